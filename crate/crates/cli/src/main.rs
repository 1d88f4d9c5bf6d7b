mod config;
mod error;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use shellnet::autodiff::gradcheck::{operator_suite, TOLERANCE};
use shellnet::autodiff::Real;
use shellnet::data::checkpoint::decode_checkpoint;
use shellnet::data::{
    generate_parts, generate_shapes, read_cloud, save_checkpoint, write_cloud, DataError, Dataset,
};
use shellnet::geometry::{
    knn_query, partition_shells_equidistant, partition_shells_fixed, KnnSpace, Labels, PointCloud,
};
use shellnet::network::accounting::{count_flops, count_parameters};
use shellnet::network::{argmax_rows, Network, Task};
use shellnet::shellconv::{layer_gradcheck, PartitionMode};
use shellnet::training::{evaluate, TrainOutputs, Trainer};

use config::{ConfigArgs, Precision, RunConfig};
use error::CliError;

#[derive(Parser)]
#[command(name = "shellnet", version, about = "Shell-convolution point-cloud networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Test,
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum DataKind {
    Shapes,
    Parts,
}

#[derive(Subcommand)]
enum Command {
    /// Train on a dataset directory; writes config.toml, metrics.jsonl and checkpoint.shck.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from the checkpoint already in `--out`.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a checkpoint and print metrics as JSON.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
        /// Sampling seed; defaults to the training seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Predict labels for one cloud file and write them to `--out`.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print the shells around one point of a cloud file.
    Inspect {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 0)]
        center: usize,
        #[arg(long, default_value_t = 16)]
        shell_size: usize,
        #[arg(long, default_value_t = 4)]
        shells: usize,
        #[arg(long, value_enum, default_value = "fixed")]
        partition: PartitionArg,
        #[arg(long, value_enum, default_value = "coordinates")]
        space: SpaceArg,
    },
    /// Finite-difference gradient checks of every operator and of a full layer.
    Gradcheck {
        #[arg(long, default_value_t = 3)]
        seeds: usize,
        #[arg(long, default_value_t = 0)]
        first_seed: u64,
        /// Shell size of the composed-layer check.
        #[arg(long, default_value_t = 2)]
        shell_size: usize,
    },
    /// Parameter and FLOP counts, plus measured step times when `--repeat` > 0.
    Bench {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value_t = 1024)]
        input_size: usize,
        #[arg(long, default_value_t = 1)]
        batch: usize,
        #[arg(long, default_value_t = 0)]
        repeat: usize,
        #[arg(long)]
        json: bool,
    },
    /// Write a synthetic dataset directory.
    GenData {
        #[arg(long, value_enum)]
        kind: DataKind,
        /// Clouds per class (shapes) or objects (parts).
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 1024)]
        points: usize,
        /// Shapes only: held-out clouds per class.
        #[arg(long)]
        test_per_class: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum PartitionArg {
    Fixed,
    Equidistant,
}

#[derive(Clone, Copy, ValueEnum)]
enum SpaceArg {
    Coordinates,
    Features,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Train {
            cfg,
            data,
            out,
            resume,
        } => train(&cfg, &data, &out, resume),
        Command::Eval {
            checkpoint,
            data,
            split,
            seed,
        } => {
            let data = Dataset::load(&data)?;
            let indices = match split {
                Split::Train => data.train.clone(),
                Split::Test => data.test.clone(),
                Split::All => (0..data.clouds.len()).collect(),
            };
            let json = match load_any(&checkpoint)? {
                AnyTrainer::F32(t) => eval_json(&t, &data, &indices, seed)?,
                AnyTrainer::F64(t) => eval_json(&t, &data, &indices, seed)?,
            };
            println!("{json}");
            Ok(())
        }
        Command::Infer {
            checkpoint,
            input,
            out,
            seed,
        } => {
            let cloud = read_cloud(&input)?;
            let labels = match load_any(&checkpoint)? {
                AnyTrainer::F32(t) => infer(&t.net, &cloud, seed)?,
                AnyTrainer::F64(t) => infer(&t.net, &cloud, seed)?,
            };
            match &labels {
                Labels::Cloud(l) => println!("class {l}"),
                Labels::Points(ls) => println!("{} point labels", ls.len()),
                Labels::None => {}
            }
            write_cloud(&cloud.with_labels(labels).map_err(DataError::from)?, &out)?;
            Ok(())
        }
        Command::Inspect {
            input,
            center,
            shell_size,
            shells,
            partition,
            space,
        } => {
            let cloud = read_cloud(&input)?;
            print!(
                "{}",
                inspect(&cloud, center, shell_size, shells, partition, space)?
            );
            Ok(())
        }
        Command::Gradcheck {
            seeds,
            first_seed,
            shell_size,
        } => gradcheck(seeds, first_seed, shell_size),
        Command::Bench {
            cfg,
            input_size,
            batch,
            repeat,
            json,
        } => {
            let cfg = cfg.resolve(None)?;
            match cfg.precision {
                Precision::F32 => bench::<f32>(&cfg, input_size, batch, repeat, json),
                Precision::F64 => bench::<f64>(&cfg, input_size, batch, repeat, json),
            }
        }
        Command::GenData {
            kind,
            count,
            points,
            test_per_class,
            seed,
            out,
        } => {
            let mut data = match kind {
                DataKind::Shapes => generate_shapes(count, points, seed)?,
                DataKind::Parts => generate_parts(count, points, seed)?,
            };
            if let Some(t) = test_per_class {
                data.split_per_class(t)?;
            }
            data.save(&out)?;
            println!(
                "wrote {} clouds ({} train, {} test) to {}",
                data.clouds.len(),
                data.train.len(),
                data.test.len(),
                out.display()
            );
            Ok(())
        }
    }
}

fn train(cfg: &ConfigArgs, data: &Path, out: &Path, resume: bool) -> Result<(), CliError> {
    let data = Dataset::load(data)?;
    let mut resolved = cfg.resolve(Some(data.task))?;
    if cfg.config.is_none() && !cfg.overrides.iter().any(|o| o.contains("num_outputs")) {
        resolved.network.num_outputs = data.num_labels();
    }
    std::fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    let text = config::to_toml(&resolved);
    println!("# resolved configuration\n{text}");
    let cfg_path = out.join("config.toml");
    std::fs::write(&cfg_path, &text).map_err(|e| CliError::io(&cfg_path, e))?;
    match resolved.precision {
        Precision::F32 => fit::<f32>(&resolved, &data, out, resume),
        Precision::F64 => fit::<f64>(&resolved, &data, out, resume),
    }
}

fn fit<T: Real>(cfg: &RunConfig, data: &Dataset, out: &Path, resume: bool) -> Result<(), CliError> {
    let outputs = TrainOutputs {
        metrics: Some(out.join("metrics.jsonl")),
        checkpoint: Some(out.join("checkpoint.shck")),
    };
    let mut trainer = if resume {
        let path = outputs.checkpoint.as_ref().expect("set above");
        let mut t = shellnet::data::load_checkpoint::<T>(path)?;
        if t.net.config() != &cfg.network {
            return Err(CliError::Config(
                "network configuration differs from the checkpoint".into(),
            ));
        }
        t.config.epochs = cfg.train.epochs;
        t
    } else {
        if let Some(m) = &outputs.metrics {
            let _ = std::fs::remove_file(m);
        }
        Trainer::new(Network::<T>::build(&cfg.network)?, cfg.train.clone())?
    };
    trainer.fit(data, &outputs, |m| {
        let test = m.test.as_ref().map_or(String::new(), |t| {
            let miou = t.mean_iou.map_or(String::new(), |v| format!(" miou {v:.4}"));
            format!(" test_loss {:.4} test_oa {:.4}{miou}", t.loss, t.overall_accuracy)
        });
        println!(
            "epoch {} loss {:.4} acc {:.4}{test} ({:.1}s)",
            m.epoch, m.train_loss, m.train_accuracy, m.wall_time_s
        );
        true
    })?;
    if trainer.history.is_empty() {
        save_checkpoint(&trainer, outputs.checkpoint.as_ref().expect("set above"))?;
    }
    Ok(())
}

enum AnyTrainer {
    F32(Trainer<f32>),
    F64(Trainer<f64>),
}

fn load_any(path: &Path) -> Result<AnyTrainer, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    match decode_checkpoint::<f32>(&bytes) {
        Ok(t) => Ok(AnyTrainer::F32(t)),
        Err(DataError::Precision { .. }) => Ok(AnyTrainer::F64(decode_checkpoint(&bytes)?)),
        Err(e) => Err(e.into()),
    }
}

fn eval_json<T: Real>(
    t: &Trainer<T>,
    data: &Dataset,
    indices: &[usize],
    seed: Option<u64>,
) -> Result<String, CliError> {
    data.validate(t.net.config().num_outputs)?;
    let seed = seed.unwrap_or(t.config.seed);
    let m = evaluate(&t.net, data, indices, t.config.batch_size, seed)?;
    Ok(serde_json::to_string_pretty(&m).map_err(DataError::from)?)
}

fn infer<T: Real>(net: &Network<T>, cloud: &PointCloud, seed: u64) -> Result<Labels, CliError> {
    let plan = net.plan(cloud, seed)?;
    let logits = net.predict(std::slice::from_ref(cloud), &[plan])?;
    let pred: Vec<u32> = argmax_rows(&logits).into_iter().map(|l| l as u32).collect();
    Ok(match net.config().task {
        Task::Classification => Labels::Cloud(pred[0]),
        Task::Segmentation => Labels::Points(pred),
    })
}

fn inspect(
    cloud: &PointCloud,
    center: usize,
    shell_size: usize,
    shells: usize,
    partition: PartitionArg,
    space: SpaceArg,
) -> Result<String, CliError> {
    use std::fmt::Write;
    let space = match space {
        SpaceArg::Coordinates => KnnSpace::Coordinates,
        SpaceArg::Features => KnnSpace::Features,
    };
    let set = knn_query(cloud, center, shell_size * shells, space).map_err(shellnet::network::NetworkError::from)?;
    let part = match partition {
        PartitionArg::Fixed => partition_shells_fixed(&set, shell_size, shells),
        PartitionArg::Equidistant => partition_shells_equidistant(&set, shells),
    }
    .map_err(shellnet::network::NetworkError::from)?;
    let distance: std::collections::HashMap<usize, f64> =
        set.indices.iter().copied().zip(set.distances.iter().copied()).collect();
    let c = cloud.points()[center];
    let mut out = String::new();
    writeln!(out, "center {center} at ({:.6}, {:.6}, {:.6})", c[0], c[1], c[2]).ok();
    for (s, (members, radius)) in part.shells.iter().zip(&part.radii).enumerate() {
        writeln!(out, "shell {s}: {} points, outer radius {radius:.6}", members.len()).ok();
        for &i in members {
            let p = cloud.points()[i];
            writeln!(
                out,
                "  {i:>6}  {:.6}  ({:.6}, {:.6}, {:.6})",
                distance[&i], p[0], p[1], p[2]
            )
            .ok();
        }
    }
    Ok(out)
}

fn gradcheck(seeds: usize, first_seed: u64, shell_size: usize) -> Result<(), CliError> {
    let check = |e: shellnet::autodiff::TensorError| CliError::CheckFailed(e.to_string());
    let mut rows: Vec<(String, f64)> = operator_suite(first_seed, seeds)
        .map_err(check)?
        .into_iter()
        .map(|r| (r.name, r.max_rel_error))
        .collect();
    for (name, mode) in [
        ("layer (fixed shells)", PartitionMode::Fixed),
        ("layer (equidistant shells)", PartitionMode::Equidistant),
    ] {
        let mut worst = 0.0_f64;
        for s in first_seed..first_seed + seeds as u64 {
            let err = layer_gradcheck(s, mode, shell_size)
                .map_err(|e| CliError::CheckFailed(e.to_string()))?;
            worst = worst.max(err);
        }
        rows.push((name.to_string(), worst));
    }
    let mut failed = 0;
    println!("{:<32} {:>12}  result", "check", "max rel err");
    for (name, err) in &rows {
        let ok = *err < TOLERANCE;
        failed += usize::from(!ok);
        println!("{name:<32} {err:>12.3e}  {}", if ok { "pass" } else { "FAIL" });
    }
    if failed > 0 {
        return Err(CliError::CheckFailed(format!(
            "{failed} of {} checks exceed {TOLERANCE:e}",
            rows.len()
        )));
    }
    Ok(())
}

/// Published parameter count of the default classifier.
const REFERENCE_PARAMETERS: usize = 480_000;

fn bench<T: Real>(
    cfg: &RunConfig,
    input_size: usize,
    batch: usize,
    repeat: usize,
    json: bool,
) -> Result<(), CliError> {
    let net = Network::<T>::build(&cfg.network)?;
    let params = count_parameters(&net);
    let flops = count_flops(&net, input_size, batch);
    let timing = if repeat > 0 {
        Some(time_steps(&net, input_size, batch, repeat)?)
    } else {
        None
    };
    let reference = {
        let mut default = shellnet::network::NetworkConfig::classification();
        default.init_seed = cfg.network.init_seed;
        (default == cfg.network).then_some(REFERENCE_PARAMETERS)
    };
    if json {
        let v = serde_json::json!({
            "config": cfg,
            "parameters": params,
            "reference_parameters": reference,
            "flops": flops,
            "seconds_per_step": timing,
        });
        println!("{}", serde_json::to_string_pretty(&v).map_err(DataError::from)?);
        return Ok(());
    }
    println!("# resolved configuration\n{}", config::to_toml(cfg));
    println!("parameters");
    for (name, n) in &params.layers {
        println!("  {name:<16} {n:>10}");
    }
    println!("  {:<16} {:>10}", "total", params.total);
    if let Some(r) = reference {
        let gap = 100.0 * (params.total as f64 - r as f64) / r as f64;
        println!("  {:<16} {r:>10}  (published default classifier, gap {gap:+.1}%)", "reference");
    }
    println!("flops (input {input_size}, batch {batch})");
    for item in &flops.items {
        println!("  {:<24} fwd {:>14}  bwd {:>14}", item.name, item.forward, item.backward);
    }
    println!("  inference {:>14}", flops.inference);
    println!("  training  {:>14}", flops.training);
    if let Some((fwd, step)) = timing {
        println!("seconds per forward {fwd:.4}, per training step {step:.4}");
    }
    Ok(())
}

/// Mean wall time of a forward pass and of forward plus backward on random
/// unit-cube clouds.
fn time_steps<T: Real>(
    net: &Network<T>,
    input_size: usize,
    batch: usize,
    repeat: usize,
) -> Result<(f64, f64), CliError> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(net.config().init_seed);
    let k = net.config().num_outputs as u32;
    let clouds = (0..batch)
        .map(|_| {
            let pts = (0..input_size)
                .map(|_| [rng.random(), rng.random(), rng.random()])
                .collect();
            let labels = match net.config().task {
                Task::Classification => Labels::Cloud(rng.random_range(0..k)),
                Task::Segmentation => {
                    Labels::Points((0..input_size).map(|_| rng.random_range(0..k)).collect())
                }
            };
            PointCloud::new(pts).and_then(|c| c.with_labels(labels))
        })
        .collect::<Result<Vec<_>, _>>()
        .map_err(DataError::from)?;
    let plans = net.plans(&clouds, 0)?;
    let start = Instant::now();
    for _ in 0..repeat {
        net.predict(&clouds, &plans)?;
    }
    let fwd = start.elapsed().as_secs_f64() / repeat as f64;
    let start = Instant::now();
    for _ in 0..repeat {
        let mut g = shellnet::autodiff::Graph::new();
        let bound = net.params().bind(&mut g).map_err(shellnet::network::NetworkError::from)?;
        let (loss, _) = net.loss(&mut g, &bound, &clouds, &plans)?;
        g.backward(loss).map_err(shellnet::network::NetworkError::from)?;
    }
    Ok((fwd, start.elapsed().as_secs_f64() / repeat as f64))
}
