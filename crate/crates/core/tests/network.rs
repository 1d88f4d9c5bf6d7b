mod common;

use ndarray::Axis;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use shellnet::autodiff::Graph;
use shellnet::geometry::{knn_points, PointCloud};
use shellnet::network::accounting::{count_flops, count_parameters};
use shellnet::network::{LayerSpec, Network, NetworkConfig, SamplePlan, Task};
use shellnet::shellconv::{shell_conv, Activation, PartitionMode};

/// Classifier logits computed one representative at a time with the
/// single-center convolution, then pooled and fed through the head.
fn per_center_logits(net: &Network<f64>, cloud: &PointCloud, plan: &SamplePlan) -> Vec<f64> {
    let mut g = Graph::new();
    let bound = net.params().bind(&mut g).unwrap();
    let mut points = cloud.points().to_vec();
    let mut features = None;
    for (params, reps) in net.encoder().iter().zip(&plan.layers) {
        let mut rows = Vec::new();
        for &r in reps {
            let set = knn_points(&points, &points[r], params.plan.neighbors(), r).unwrap();
            let prev = features.map(|f| g.gather_rows(f, &set.indices).unwrap());
            let out = shell_conv(
                &mut g,
                &bound,
                params,
                points[r],
                &set,
                &points,
                prev,
                PartitionMode::Fixed,
            )
            .unwrap();
            rows.push(g.reshape(out, &[1, params.plan.out_channels]).unwrap());
        }
        let mut stacked = rows[0];
        for &row in &rows[1..] {
            stacked = g.concat(stacked, row, 0).unwrap();
        }
        features = Some(stacked);
        points = reps.iter().map(|&r| points[r]).collect();
    }
    let f = features.unwrap();
    let c = g.shape(f)[1];
    let pooled = g.maxpool_over_axis(f, 0).unwrap();
    let mut x = g.reshape(pooled, &[1, c]).unwrap();
    let last = net.head().len() - 1;
    for (i, layer) in net.head().iter().enumerate() {
        let act = if i < last { Activation::Relu } else { Activation::Identity };
        x = layer.forward_with(&mut g, &bound, x, act).unwrap();
    }
    g.value(x).iter().copied().collect()
}

#[test]
fn batched_forward_matches_per_center_reference() {
    let net = Network::<f64>::build(&common::small_classifier(8, 5)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let clouds: Vec<PointCloud> = (0..3)
        .map(|_| PointCloud::new(common::random_points(&mut rng, 128)).unwrap())
        .collect();
    let plans = net.plans(&clouds, 9).unwrap();
    let batched = net.predict(&clouds, &plans).unwrap();
    for (i, (cloud, plan)) in clouds.iter().zip(&plans).enumerate() {
        let reference = per_center_logits(&net, cloud, plan);
        for (a, b) in batched.index_axis(Axis(0), i).iter().zip(&reference) {
            assert!((a - b).abs() < 1e-12, "cloud {i}: {a} vs {b}");
        }
    }
}

#[test]
fn segmentation_batch_rows_match_single_clouds() {
    let mut net = Network::<f64>::build(&common::small_segmenter(8, 3)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let clouds: Vec<PointCloud> = (0..3)
        .map(|_| PointCloud::new(common::random_points(&mut rng, 128)).unwrap())
        .collect();
    let plans = net.plans(&clouds, 1).unwrap();
    let batched = net.predict(&clouds, &plans).unwrap();
    assert_eq!(batched.shape(), &[3, 128, 3]);
    for i in 0..3 {
        let single = net.predict(&clouds[i..=i], &plans[i..=i]).unwrap();
        let row = batched.index_axis(Axis(0), i);
        for (a, b) in row.iter().zip(single.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    net.set_skip_connections(false);
    let severed = net.predict(&clouds, &plans).unwrap();
    assert_eq!(severed.shape(), batched.shape());
    assert!(severed.iter().all(|v| v.is_finite()));
    assert!(severed.iter().zip(batched.iter()).any(|(a, b)| a != b));
}

#[test]
fn permutation_invariance_small_suite() {
    let cfg = common::small_classifier(16, 4);
    let (gap32, _) = common::permutation_gap::<f32>(&cfg, 1, 10);
    assert!(gap32 <= 1e-5, "{gap32}");
    let (_, bitwise) = common::permutation_gap::<f64>(&cfg, 2, 10);
    assert!(bitwise);
}

fn linear(i: usize, o: usize) -> usize {
    i * o + o
}

/// Scalar count of a classifier, recounted from the configuration alone.
fn closed_form_classifier(cfg: &NetworkConfig) -> usize {
    let mut lift = 0;
    let mut width = 3;
    for &w in &cfg.lift_widths {
        lift += linear(width, w);
        width = w;
    }
    let mut total = 0;
    let mut prev = 0;
    for l in &cfg.layers {
        total += lift + l.shells * (prev + width) * l.channels + l.channels;
        prev = l.channels;
    }
    for &h in &cfg.head_widths {
        total += linear(prev, h);
        prev = h;
    }
    total + linear(prev, cfg.num_outputs)
}

#[test]
fn parameter_counts_follow_the_closed_form() {
    let mut cfg = NetworkConfig::classification();
    let base = count_parameters(&Network::<f32>::build(&cfg).unwrap()).total;
    assert_eq!(base, closed_form_classifier(&cfg));
    for l in &mut cfg.layers {
        l.channels *= 2;
    }
    let doubled = count_parameters(&Network::<f32>::build(&cfg).unwrap()).total;
    assert_eq!(doubled, closed_form_classifier(&cfg));
    assert!(doubled > 2 * base && doubled < 4 * base);
    for ss in [8, 16, 32] {
        let cfg = common::small_classifier(ss, 6);
        let n = count_parameters(&Network::<f32>::build(&cfg).unwrap()).total;
        assert_eq!(n, closed_form_classifier(&cfg), "ss {ss}");
    }
}

#[test]
fn one_network_serves_every_input_size() {
    let net = Network::<f32>::build(&common::small_classifier(8, 3)).unwrap();
    let before = net.params().values().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for n in [128, 200, 513] {
        let cloud = PointCloud::new(common::random_points(&mut rng, n)).unwrap();
        let plan = net.plan(&cloud, 0).unwrap();
        let out = net.predict(&[cloud], &[plan]).unwrap();
        assert_eq!(out.shape(), &[1, 3]);
    }
    assert_eq!(net.params().values(), &before[..]);
}

#[test]
fn flops_are_affine_in_input_size() {
    for cfg in [common::small_classifier(8, 4), common::small_segmenter(8, 4)] {
        let net = Network::<f32>::build(&cfg).unwrap();
        let f: Vec<i128> = [128, 256, 384, 512]
            .iter()
            .map(|&n| count_flops(&net, n, 1).inference as i128)
            .collect();
        let t: Vec<i128> = [128, 256, 384, 512]
            .iter()
            .map(|&n| count_flops(&net, n, 1).training as i128)
            .collect();
        for s in [&f, &t] {
            assert_eq!(s[1] - s[0], s[2] - s[1]);
            assert_eq!(s[2] - s[1], s[3] - s[2]);
            assert!(s[1] > s[0]);
        }
        assert_eq!(count_flops(&net, 256, 4).inference, 4 * f[1] as u64);
    }
}

fn arbitrary_config() -> impl Strategy<Value = (NetworkConfig, usize)> {
    (
        1usize..=3,
        1usize..=4,
        prop::bool::ANY,
        prop::bool::ANY,
        any::<u64>(),
    )
        .prop_map(|(levels, ss, segment, equidistant, seed)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut layers = Vec::new();
            let mut points = 48;
            let mut channels = 4;
            for _ in 0..levels {
                let shells = rng.random_range(1..=3);
                let next = (points / 2).max(shells * ss);
                layers.push(LayerSpec {
                    points: next.min(points),
                    shells,
                    channels,
                });
                points = next.min(points);
                channels += rng.random_range(1..=6);
            }
            // keep representatives strictly shrinking and neighborhoods satisfiable
            for i in 1..layers.len() {
                if layers[i].points >= layers[i - 1].points {
                    layers[i].points = layers[i - 1].points - 1;
                }
                layers[i].shells = layers[i].shells.min(layers[i - 1].points / ss).max(1);
            }
            let input = 48 + rng.random_range(0..40);
            let cfg = NetworkConfig {
                task: if segment { Task::Segmentation } else { Task::Classification },
                decoder: segment,
                layers,
                shell_size: ss,
                lift_widths: vec![rng.random_range(1..=6)],
                head_widths: if segment { vec![] } else { vec![5] },
                num_outputs: rng.random_range(1..=5),
                final_channels: 3,
                partition: if equidistant { PartitionMode::Equidistant } else { PartitionMode::Fixed },
                init_seed: seed,
                ..NetworkConfig::classification()
            };
            (cfg, input)
        })
        .prop_filter("valid configuration", |(cfg, input)| {
            cfg.validate().is_ok() && *input >= cfg.min_input_points()
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn output_shape_contract((cfg, n) in arbitrary_config(), batch in 1usize..=3, seed: u64) {
        let net = Network::<f32>::build(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let clouds: Vec<PointCloud> = (0..batch)
            .map(|_| PointCloud::new(common::random_points(&mut rng, n)).unwrap())
            .collect();
        let plans = net.plans(&clouds, seed).unwrap();
        let out = net.predict(&clouds, &plans).unwrap();
        let expected = match cfg.task {
            Task::Classification => vec![batch, cfg.num_outputs],
            Task::Segmentation => vec![batch, n, cfg.num_outputs],
        };
        prop_assert_eq!(out.shape(), &expected[..]);
        prop_assert!(out.iter().all(|v| v.is_finite()));
    }
}
