//! `danet`: train and probe density-adaptive point cloud networks.
//!
//! Verbs: `train`, `eval`, `density-sweep`, `perturb-sweep`, `cost`,
//! `gen-data`. Every command is deterministic given `--seed`, and every
//! CSV carries a header row plus the seed in a leading comment line.
//! Exit codes: 0 success, 1 usage error, 2 runtime or data error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use danet::daconv::{count_cost, CostVariant};
use danet::dataio::{
    default_shape_specs, downsample, generate_synthetic_dataset, DatasetManifest, DownsampleMode,
    LabeledCloud, Split, SyntheticShapeSpec,
};
use danet::geometry::PointCloud;
use danet::iam;
use danet::network::{
    count_flops, count_parameters, parse_network_config, Network, NetworkSpec, Task,
};
use danet::train::{
    augment, evaluate, evaluate_with_voting, train, AugmentationConfig, Schedule, TrainConfig,
};
use danet::{Error, Result};

#[derive(Parser)]
#[command(name = "danet", version, about = "Density-adaptive point cloud networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScheduleKind {
    Cosine,
    Step,
}

/// Flags shared by every command that evaluates a trained model.
#[derive(Args)]
struct ModelArgs {
    /// Network architecture config file.
    #[arg(long)]
    config: PathBuf,
    /// Trained checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset manifest.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Subcommand)]
enum Command {
    /// Train a network; writes a checkpoint and a metrics CSV.
    Train {
        /// Network architecture config file.
        #[arg(long)]
        config: PathBuf,
        /// Dataset manifest.
        #[arg(long)]
        data: PathBuf,
        /// Where to write the trained checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Where to write the metrics CSV.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 50)]
        epochs: usize,
        #[arg(long, default_value_t = 16)]
        batch_size: usize,
        #[arg(long, default_value_t = 0.1)]
        lr: f64,
        #[arg(long, default_value_t = 0.001)]
        lr_floor: f64,
        #[arg(long, value_enum, default_value_t = ScheduleKind::Cosine)]
        schedule: ScheduleKind,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Train on raw samples, without augmentation.
        #[arg(long)]
        no_augment: bool,
        /// Candidate point budgets; each training batch is downsampled
        /// to one of them at random, e.g. 256,192,128,96,64.
        #[arg(long, value_delimiter = ',', value_name = "N,N,...")]
        point_budget: Option<Vec<usize>>,
    },
    /// Report accuracy on the test split.
    Eval {
        #[command(flatten)]
        model: ModelArgs,
        /// Average logits over this many randomly scaled copies.
        #[arg(long, default_value_t = 1)]
        votes: usize,
    },
    /// Accuracy at descending point budgets, as CSV.
    DensitySweep {
        #[command(flatten)]
        model: ModelArgs,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
        /// Point budgets to test; defaults to the ratio ladder scaled
        /// to the dataset resolution.
        #[arg(long, value_delimiter = ',')]
        levels: Option<Vec<usize>>,
    },
    /// Accuracy under permutation and rigid transforms, as CSV.
    PerturbSweep {
        #[command(flatten)]
        model: ModelArgs,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Parameter and FLOP report for an architecture.
    Cost {
        /// Network architecture config file.
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 1024)]
        n_points: usize,
    },
    /// Generate a synthetic shape-classification dataset.
    GenData {
        /// Dataset root directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// How many shape families to include.
        #[arg(long, default_value_t = 8, value_parser = clap::value_parser!(u64).range(2..=8))]
        classes: u64,
        #[arg(long, default_value_t = 20)]
        train_per_class: usize,
        #[arg(long, default_value_t = 10)]
        test_per_class: usize,
        #[arg(long, default_value_t = 256)]
        points: usize,
        /// Surface noise standard deviation.
        #[arg(long, default_value_t = 0.02)]
        noise: f64,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let code = if err.use_stderr() { 1 } else { 0 };
            let _ = err.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {}", err);
            ExitCode::from(2)
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Train {
            config,
            data,
            checkpoint,
            out,
            epochs,
            batch_size,
            lr,
            lr_floor,
            schedule,
            seed,
            no_augment,
            point_budget,
        } => cmd_train(
            &config, &data, &checkpoint, &out, epochs, batch_size, lr, lr_floor, schedule, seed,
            no_augment, point_budget,
        ),
        Command::Eval { model, votes } => cmd_eval(&model, votes),
        Command::DensitySweep { model, out, levels } => cmd_density_sweep(&model, &out, levels),
        Command::PerturbSweep { model, out } => cmd_perturb_sweep(&model, &out),
        Command::Cost { config, n_points } => cmd_cost(&config, n_points),
        Command::GenData {
            out,
            seed,
            classes,
            train_per_class,
            test_per_class,
            points,
            noise,
        } => cmd_gen_data(
            &out,
            seed,
            classes as usize,
            train_per_class,
            test_per_class,
            points,
            noise,
        ),
    }
}

fn read_spec(path: &Path) -> Result<NetworkSpec> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::invalid("config", format!("{}: {}", path.display(), e)))?;
    parse_network_config(&text)
}

fn check_classes(spec: &NetworkSpec, manifest: &DatasetManifest) -> Result<()> {
    if spec.task == Task::Classification && spec.num_classes() != manifest.num_classes() {
        return Err(Error::invalid(
            "dataset",
            format!(
                "network predicts {} classes but the dataset has {}",
                spec.num_classes(),
                manifest.num_classes()
            ),
        ));
    }
    Ok(())
}

fn load_model(args: &ModelArgs) -> Result<(Network, DatasetManifest)> {
    let spec = read_spec(&args.config)?;
    let manifest = DatasetManifest::load(&args.data)?;
    check_classes(&spec, &manifest)?;
    let net = Network::load(spec, &args.checkpoint)?;
    Ok((net, manifest))
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    config: &Path,
    data: &Path,
    checkpoint: &Path,
    out: &Path,
    epochs: usize,
    batch_size: usize,
    lr: f64,
    lr_floor: f64,
    schedule: ScheduleKind,
    seed: u64,
    no_augment: bool,
    point_budget: Option<Vec<usize>>,
) -> Result<()> {
    let spec = read_spec(config)?;
    let manifest = DatasetManifest::load(data)?;
    check_classes(&spec, &manifest)?;
    let train_set = manifest.load_split(Split::Train)?;
    let test_set = manifest.load_split(Split::Test)?;

    let mut net = Network::init(spec, seed)?;
    let cfg = TrainConfig {
        epochs,
        batch_size,
        schedule: match schedule {
            ScheduleKind::Cosine => Schedule::cosine(lr, lr_floor, epochs)?,
            ScheduleKind::Step => Schedule::step(lr, lr_floor)?,
        },
        augmentation: if no_augment {
            AugmentationConfig::none()
        } else {
            AugmentationConfig::training()
        },
        point_budget: match &point_budget {
            None => None,
            Some(v) if v.len() == 2 => Some((v[0], v[1])),
            Some(_) => {
                return Err(Error::invalid("train", "--point-budget wants LO,HI"));
            }
        },
        momentum: 0.9,
        seed,
        checkpoint_path: Some(checkpoint.to_path_buf()),
        metrics_path: Some(out.to_path_buf()),
    };
    let metrics = train(&mut net, &train_set, &test_set, &cfg)?;
    let last = metrics.last().unwrap();
    println!(
        "trained {} epochs on {} samples (seed {})",
        metrics.len(),
        train_set.len(),
        seed
    );
    println!("final train accuracy: {:.2}%", last.train_acc);
    println!("final test accuracy: {:.2}%", last.val_acc);
    println!("checkpoint: {}", checkpoint.display());
    println!("metrics: {}", out.display());
    Ok(())
}

fn cmd_eval(args: &ModelArgs, votes: usize) -> Result<()> {
    let (net, manifest) = load_model(args)?;
    let test = manifest.load_split(Split::Test)?;
    let acc = if votes <= 1 {
        evaluate(&net, &test)?
    } else {
        evaluate_with_voting(
            &net,
            &test,
            votes,
            &AugmentationConfig::scaling(0.9, 1.1),
            args.seed,
        )?
    };
    println!("samples: {}", test.len());
    println!("accuracy: {}%", acc * 100.0);
    Ok(())
}

/// Published sweep resolutions; other training resolutions use the
/// same ratios.
const DENSITY_LADDER: [usize; 7] = [1024, 768, 512, 384, 256, 128, 64];

fn cmd_density_sweep(args: &ModelArgs, out: &Path, levels: Option<Vec<usize>>) -> Result<()> {
    let (net, manifest) = load_model(args)?;
    let test = manifest.load_split(Split::Test)?;
    let resolution = manifest.points_per_sample;
    let mut levels = match levels {
        Some(v) if !v.is_empty() => v,
        _ => DENSITY_LADDER
            .iter()
            .map(|&l| l * resolution / 1024)
            .filter(|&n| n >= 1)
            .collect(),
    };
    levels.dedup();

    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let mut csv = format!("# seed={}\nn_points,accuracy\n", args.seed);
    for &n in &levels {
        let mut shrunk = Vec::with_capacity(test.len());
        for sample in &test {
            let sample_seed: u64 = rng.random();
            shrunk.push(LabeledCloud {
                cloud: downsample(&sample.cloud, n, DownsampleMode::Fps, sample_seed)?,
                label: sample.label,
            });
        }
        let acc = evaluate(&net, &shrunk)? * 100.0;
        println!("{} points: {}%", n, acc);
        csv.push_str(&format!("{},{}\n", n, acc));
    }
    std::fs::write(out, csv)?;
    println!("sweep: {}", out.display());
    Ok(())
}

enum Perturbation {
    None,
    Permute,
    /// Degrees about the vertical axis.
    Rotate(f64),
    TranslateZ(f64),
    Scale(f64, f64),
    Jitter,
}

fn perturbations() -> Vec<(&'static str, Perturbation)> {
    vec![
        ("none", Perturbation::None),
        ("permutation", Perturbation::Permute),
        ("rotate_-90", Perturbation::Rotate(-90.0)),
        ("rotate_90", Perturbation::Rotate(90.0)),
        ("rotate_180", Perturbation::Rotate(180.0)),
        ("translate_+0.2", Perturbation::TranslateZ(0.2)),
        ("translate_-0.2", Perturbation::TranslateZ(-0.2)),
        ("scale_0.5-1.5", Perturbation::Scale(0.5, 1.5)),
        ("scale_0.6-1.4", Perturbation::Scale(0.6, 1.4)),
        ("scale_0.7-1.3", Perturbation::Scale(0.7, 1.3)),
        ("scale_0.8-1.2", Perturbation::Scale(0.8, 1.2)),
        ("scale_0.9-1.1", Perturbation::Scale(0.9, 1.1)),
        ("jitter", Perturbation::Jitter),
    ]
}

fn shift_z(cloud: &PointCloud, dz: f64) -> Result<PointCloud> {
    let positions = cloud
        .positions()
        .iter()
        .map(|p| [p[0], p[1], p[2] + dz])
        .collect();
    let mut out = PointCloud::new(positions)?;
    if let Some(attrs) = cloud.attributes() {
        out = out.with_attributes(attrs.clone())?;
    }
    if let Some(labels) = cloud.labels() {
        out = out.with_labels(labels.to_vec())?;
    }
    Ok(out)
}

fn perturb(cloud: &PointCloud, kind: &Perturbation, seed: u64) -> Result<PointCloud> {
    match kind {
        Perturbation::None => Ok(cloud.clone()),
        Perturbation::Permute => {
            let cfg = AugmentationConfig {
                shuffle: true,
                ..AugmentationConfig::none()
            };
            augment(cloud, &cfg, seed)
        }
        Perturbation::Rotate(degrees) => {
            augment(cloud, &AugmentationConfig::fixed_rotation(2, degrees.to_radians()), seed)
        }
        Perturbation::TranslateZ(dz) => shift_z(cloud, *dz),
        Perturbation::Scale(lo, hi) => augment(cloud, &AugmentationConfig::scaling(*lo, *hi), seed),
        Perturbation::Jitter => {
            let cfg = AugmentationConfig {
                jitter_sigma: 0.01,
                jitter_clip: 0.05,
                ..AugmentationConfig::none()
            };
            augment(cloud, &cfg, seed)
        }
    }
}

fn cmd_perturb_sweep(args: &ModelArgs, out: &Path) -> Result<()> {
    let (net, manifest) = load_model(args)?;
    let test = manifest.load_split(Split::Test)?;

    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let mut csv = format!("# seed={}\ncondition,accuracy\n", args.seed);
    for (label, kind) in perturbations() {
        let mut transformed = Vec::with_capacity(test.len());
        for sample in &test {
            let sample_seed: u64 = rng.random();
            transformed.push(LabeledCloud {
                cloud: perturb(&sample.cloud, &kind, sample_seed)?,
                label: sample.label,
            });
        }
        let acc = evaluate(&net, &transformed)? * 100.0;
        println!("{}: {}%", label, acc);
        csv.push_str(&format!("{},{}\n", label, acc));
    }
    std::fs::write(out, csv)?;
    println!("sweep: {}", out.display());
    Ok(())
}

fn cmd_cost(config: &Path, n_points: usize) -> Result<()> {
    let spec = read_spec(config)?;
    let params = count_parameters(&spec)?;
    let cost = count_flops(&spec, n_points)?;

    println!("task: {}", spec.task.as_str());
    println!("parameters: {}", params);
    println!("multiply-adds at {} points: {}", n_points, cost.total_macs);
    if cost.iam_flops > 0 {
        println!("attention flops: {}", cost.iam_flops);
    }

    println!();
    println!(
        "per-convolution weight counts, naive vs reformulated (c_mid {}):",
        spec.c_mid
    );
    let mut naive_dynamic = 0usize;
    let mut reformulated_dynamic = 0usize;
    for layer in &cost.layers {
        if let Some((k, c_in, c_out)) = layer.conv_dims {
            let naive = count_cost(k, c_in, spec.c_mid, c_out, CostVariant::Naive)?;
            let reform = count_cost(k, c_in, spec.c_mid, c_out, CostVariant::Reformulated)?;
            println!("  {} (k={} c_in={} c_out={})", layer.name, k, c_in, c_out);
            println!(
                "    naive:        dynamic {:>9} static {:>9}",
                naive.dynamic_weight_count, naive.static_weight_count
            );
            println!(
                "    reformulated: dynamic {:>9} static {:>9}",
                reform.dynamic_weight_count, reform.static_weight_count
            );
            naive_dynamic += naive.dynamic_weight_count;
            reformulated_dynamic += reform.dynamic_weight_count;
        }
    }
    if naive_dynamic > 0 {
        println!(
            "  dynamic weights overall: {} naive vs {} reformulated ({:.1}% fewer)",
            naive_dynamic,
            reformulated_dynamic,
            100.0 * (1.0 - reformulated_dynamic as f64 / naive_dynamic as f64)
        );
    }

    if cost.layers.iter().any(|l| l.iam_dims.is_some()) {
        println!();
        println!("attention flops by reduction ratio:");
        for r in [4usize, 8, 16, 32] {
            let mut total = 0usize;
            for layer in &cost.layers {
                if let Some((n, k, c)) = layer.iam_dims {
                    total += iam::count_flops(c, n, k, r)?;
                }
            }
            println!("  r={}: {}", r, total);
        }
    }
    Ok(())
}

fn cmd_gen_data(
    out: &Path,
    seed: u64,
    classes: usize,
    train_per_class: usize,
    test_per_class: usize,
    points: usize,
    noise: f64,
) -> Result<()> {
    let specs: Vec<SyntheticShapeSpec> = default_shape_specs()
        .into_iter()
        .take(classes)
        .map(|s| SyntheticShapeSpec { noise, ..s })
        .collect();
    let manifest =
        generate_synthetic_dataset(out, &specs, train_per_class, test_per_class, points, seed)?;
    println!(
        "generated {} classes, {} train / {} test samples at {} points (seed {})",
        manifest.num_classes(),
        manifest.samples(Split::Train).len(),
        manifest.samples(Split::Test).len(),
        points,
        seed
    );
    println!("manifest: {}", out.join("manifest.txt").display());
    Ok(())
}
