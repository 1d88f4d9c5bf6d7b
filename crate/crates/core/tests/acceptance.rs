//! Acceptance gates, one test per criterion. Each prints a single
//! `criterion N: PASS|FAIL ...` line. A process-wide lock runs them one at
//! a time so the timed runs are not sharing the core.

mod common;

use std::io::Write;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use shellnet::autodiff::gradcheck::{operator_suite, TOLERANCE};
use shellnet::data::checkpoint::{decode_checkpoint, encode_checkpoint};
use shellnet::data::{decode_cloud, encode_cloud, generate_parts, generate_shapes, Dataset};
use shellnet::network::accounting::count_parameters;
use shellnet::network::{Network, NetworkConfig, Preset};
use shellnet::shellconv::{layer_gradcheck, PartitionMode};
use shellnet::training::{EpochMetrics, TrainConfig, Trainer};

static SERIAL: Mutex<()> = Mutex::new(());

/// Writes straight to stderr so the line survives the harness's output capture.
fn report(id: u32, ok: bool, detail: String) {
    let verdict = if ok { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "criterion {id}: {verdict} {detail}");
    assert!(ok, "criterion {id} failed: {detail}");
}

fn serial() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

const SWEEP: [usize; 3] = [8, 16, 32];

fn permutation_check(shell_size: usize, seed: u64) -> (bool, String) {
    let cfg = common::small_classifier(shell_size, 8);
    let (gap32, _) = common::permutation_gap::<f32>(&cfg, seed, 100);
    let (gap64, bitwise) = common::permutation_gap::<f64>(&cfg, seed + 1, 100);
    (
        gap32 <= 1e-5 && bitwise,
        format!("ss={shell_size}: 100 pairs, f32 max gap {gap32:.1e}, f64 max gap {gap64:.1e}"),
    )
}

fn layer_check(shell_size: usize, seeds: u64) -> f64 {
    let mut worst = 0.0_f64;
    for mode in [PartitionMode::Fixed, PartitionMode::Equidistant] {
        for s in 0..seeds {
            worst = worst.max(layer_gradcheck(s, mode, shell_size).unwrap());
        }
    }
    worst
}

#[test]
fn criterion_1_permutation_invariance() {
    let _g = serial();
    let start = Instant::now();
    let (ok, detail) = permutation_check(16, 100);
    let elapsed = start.elapsed();
    report(
        1,
        ok && elapsed < Duration::from_secs(60),
        format!("{detail}, {:.1}s", elapsed.as_secs_f64()),
    );
}

#[test]
fn criterion_2_gradients() {
    let _g = serial();
    let start = Instant::now();
    let ops = operator_suite(0, 10).unwrap();
    let worst_op = ops
        .iter()
        .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
        .unwrap();
    let layer = layer_check(4, 10);
    let elapsed = start.elapsed();
    let ok = ops.iter().all(|r| r.passed())
        && layer < TOLERANCE
        && elapsed < Duration::from_secs(120);
    report(
        2,
        ok,
        format!(
            "{} ops x 10 seeds, worst {} {:.1e}; composed layer {:.1e}; {:.1}s",
            ops.len(),
            worst_op.name,
            worst_op.max_rel_error,
            layer,
            elapsed.as_secs_f64()
        ),
    );
}

#[test]
fn criterion_3_geometry_oracles() {
    let _g = serial();
    let start = Instant::now();
    let result = common::geometry_oracles(3, 1000, &[1, 2, 3, 4, 8, 16, 32]);
    let elapsed = start.elapsed();
    report(
        3,
        result.is_ok() && elapsed < Duration::from_secs(60),
        format!(
            "1000 instances, N <= 256: {}; {:.1}s",
            result.err().unwrap_or_else(|| "all exact".into()),
            elapsed.as_secs_f64()
        ),
    );
}

fn desk_classifier() -> NetworkConfig {
    let mut cfg = NetworkConfig::classification();
    for (l, (points, channels)) in cfg.layers.iter_mut().zip([(128, 64), (32, 128), (8, 256)]) {
        l.points = points;
        l.channels = channels;
    }
    cfg.num_outputs = 8;
    cfg
}

fn desk_shapes(per_class: usize, test_per_class: usize) -> Dataset {
    let mut data = generate_shapes(per_class, 256, 2024).unwrap();
    data.split_per_class(test_per_class).unwrap();
    data
}

/// Trains until `done` holds for an epoch's test metrics or the epoch budget
/// runs out. Returns the history.
fn train_until(
    cfg: &NetworkConfig,
    train: TrainConfig,
    data: &Dataset,
    mut done: impl FnMut(&EpochMetrics) -> bool,
) -> Vec<EpochMetrics> {
    let net = Network::<f32>::build(cfg).unwrap();
    let mut t = Trainer::new(net, train).unwrap();
    t.fit(data, &Default::default(), |m| !done(m)).unwrap();
    t.history
}

#[test]
fn criterion_4_desk_classification() {
    let _g = serial();
    let data = desk_shapes(130, 30);
    let start = Instant::now();
    let history = train_until(&desk_classifier(), TrainConfig::default(), &data, |m| {
        m.test.as_ref().is_some_and(|t| t.overall_accuracy >= 0.90)
    });
    let elapsed = start.elapsed();
    let last = history.last().unwrap();
    let oa = last.test.as_ref().unwrap().overall_accuracy;
    report(
        4,
        oa >= 0.90 && history.len() <= 30 && elapsed < Duration::from_secs(15 * 60),
        format!(
            "test OA {oa:.3} at epoch {} of 30, {:.0}s",
            last.epoch,
            elapsed.as_secs_f64()
        ),
    );
}

fn desk_segmenter() -> NetworkConfig {
    let mut cfg = NetworkConfig::segmentation();
    for (l, (points, channels)) in cfg.layers.iter_mut().zip([(128, 64), (32, 128), (8, 256)]) {
        l.points = points;
        l.channels = channels;
    }
    cfg.num_outputs = 4;
    cfg
}

#[test]
fn criterion_5_desk_segmentation() {
    let _g = serial();
    let data = generate_parts(800, 256, 2024).unwrap();
    let train = TrainConfig {
        epochs: 40,
        batch_size: 4,
        ..Default::default()
    };
    let start = Instant::now();
    let reached = |m: &EpochMetrics| {
        m.test
            .as_ref()
            .is_some_and(|t| t.overall_accuracy >= 0.85 && t.mean_iou.unwrap_or(0.0) >= 0.70)
    };
    let history = train_until(&desk_segmenter(), train, &data, reached);
    let last = history.last().unwrap();
    let t = last.test.as_ref().unwrap();
    report(
        5,
        reached(last),
        format!(
            "per-point OA {:.3}, mIoU {:.3} at epoch {} of 40, {:.0}s",
            t.overall_accuracy,
            t.mean_iou.unwrap_or(0.0),
            last.epoch,
            start.elapsed().as_secs_f64()
        ),
    );
}

#[test]
fn criterion_6_ablation_presets() {
    let _g = serial();
    let data = desk_shapes(50, 10);
    let steps_per_epoch = data.train.len().div_ceil(32) as f64;
    let mut rows = Vec::new();
    let mut ok = true;
    for preset in Preset::ALL {
        let cfg = desk_classifier().with_preset(preset);
        let train = TrainConfig {
            epochs: 2,
            ..Default::default()
        };
        let history = train_until(&cfg, train, &data, |_| false);
        let finite = history.iter().all(|m| {
            m.train_loss.is_finite() && m.test.as_ref().is_some_and(|t| t.loss.is_finite())
        });
        ok &= finite && history.len() == 2;
        let per_step = history.iter().map(|m| m.wall_time_s).sum::<f64>()
            / (history.len() as f64 * steps_per_epoch);
        rows.push((preset, per_step, history.last().unwrap().train_loss));
    }
    let mut order = rows.clone();
    order.sort_by(|a, b| a.1.total_cmp(&b.1));
    let ranking: Vec<String> = order
        .iter()
        .map(|(p, s, _)| format!("{p:?} {s:.3}s/step"))
        .collect();
    for (p, s, loss) in &rows {
        println!("  preset {p:?}: {s:.3} s/step, final train loss {loss:.4}");
    }
    report(
        6,
        ok,
        format!("all presets finite; cost order {}", ranking.join(" < ")),
    );
}

#[test]
fn criterion_7_accounting() {
    let _g = serial();
    let net = Network::<f32>::build(&NetworkConfig::classification()).unwrap();
    let report7 = count_parameters(&net);
    let total = report7.total;
    for (name, n) in &report7.layers {
        println!("  {name:<12} {n:>8}");
    }
    report(
        7,
        (200_000..=1_000_000).contains(&total),
        format!(
            "default classifier {total} parameters; reference 480000, gap {:+.1}%",
            100.0 * (total as f64 - 480_000.0) / 480_000.0
        ),
    );
}

#[test]
fn criterion_8_shell_size_sweep() {
    let _g = serial();
    let mut details = Vec::new();
    let mut ok = true;
    for ss in SWEEP {
        let start = Instant::now();
        let (perm_ok, _) = permutation_check(ss, 200 + ss as u64);
        let grad = layer_check(ss, 10);
        let geo = common::geometry_oracles(500 + ss as u64, 1000, &[ss]);
        let elapsed = start.elapsed().as_secs_f64();
        let pass = perm_ok && grad < TOLERANCE && geo.is_ok();
        ok &= pass;
        details.push(format!(
            "ss={ss}: {} (grad {grad:.1e}, {elapsed:.0}s)",
            if pass { "ok" } else { "failed" }
        ));
    }
    report(8, ok, details.join("; "));
}

#[test]
fn criterion_9_persistence() {
    let _g = serial();
    let data = {
        let mut d = generate_shapes(3, 128, 9).unwrap();
        d.split_per_class(1).unwrap();
        d
    };
    let cfg = common::small_classifier(8, 8);
    let train = TrainConfig {
        epochs: 2,
        batch_size: 4,
        seed: 21,
        ..Default::default()
    };
    let mut straight = Trainer::new(Network::<f64>::build(&cfg).unwrap(), train.clone()).unwrap();
    straight.fit(&data, &Default::default(), |_| true).unwrap();
    let mut first = Trainer::new(Network::<f64>::build(&cfg).unwrap(), train).unwrap();
    first.fit(&data, &Default::default(), |m| m.epoch < 1).unwrap();
    let mut resumed = decode_checkpoint::<f64>(&encode_checkpoint(&first).unwrap()).unwrap();
    resumed.fit(&data, &Default::default(), |_| true).unwrap();
    let weights_equal = resumed.net.params().values() == straight.net.params().values();

    let clouds_roundtrip = data
        .clouds
        .iter()
        .chain(&generate_parts(3, 64, 9).unwrap().clouds)
        .all(|c| {
            let bytes = encode_cloud(c);
            let back = decode_cloud(&bytes).unwrap();
            encode_cloud(&back) == bytes && &back == c
        });
    let ckpt = encode_checkpoint(&resumed).unwrap();
    let ckpt_roundtrip =
        encode_checkpoint(&decode_checkpoint::<f64>(&ckpt).unwrap()).unwrap() == ckpt;
    report(
        9,
        weights_equal && clouds_roundtrip && ckpt_roundtrip,
        format!(
            "resume equivalence {weights_equal}, cloud roundtrip {clouds_roundtrip}, \
             checkpoint roundtrip {ckpt_roundtrip}"
        ),
    );
}
