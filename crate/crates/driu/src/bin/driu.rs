//! Command-line entry point: training, inference, evaluation,
//! synthetic-data generation and gradient checking.
//!
//! Exit codes: 0 success, 1 verification/quality failure, 2 usage or
//! input error. All output files are written atomically.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use driu::data::{
    load_dataset, load_weights, read_image, save_synth_dataset, save_weights, write_atomic,
    write_probmap, Layout,
};
use driu::error::{Error, Result};
use driu::eval::{
    binarize, boundary_csv, boundary_error, human_points, human_points_csv, ods, pr_curve,
    pr_curve_csv, quartiles, summary_text, EvalImage,
};
use driu::gradcheck::{check_all_ops, check_end_to_end_scaled};
use driu::net::{build_network, forward, NetConfig, NetworkParams, Task};
use driu::tensor::Tensor;
use driu::train::{
    compute_channel_means, loss_log_csv, preprocess, train, AugmentConfig, ChannelMeans,
    TrainConfig,
};

/// Name of the per-channel mean record stored alongside network weights.
const MEAN_KEY: &str = "preprocess.mean";

#[derive(Parser)]
#[command(name = "driu", version, about = "Retinal vessel and optic disc segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Vessel,
    Disc,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Task {
        match t {
            TaskArg::Vessel => Task::Vessel,
            TaskArg::Disc => Task::Disc,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum InferTaskArg {
    Vessel,
    Disc,
    Both,
}

#[derive(Clone, Copy, ValueEnum)]
enum LayoutArg {
    Drive,
    Stare,
    Drions,
    Rimone,
    Generic,
}

impl From<LayoutArg> for Layout {
    fn from(l: LayoutArg) -> Layout {
        match l {
            LayoutArg::Drive => Layout::Drive,
            LayoutArg::Stare => Layout::Stare,
            LayoutArg::Drions => Layout::Drions,
            LayoutArg::Rimone => Layout::Rimone,
            LayoutArg::Generic => Layout::Generic,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum OnOff {
    On,
    Off,
}

/// Overridable run settings; every key is also a `key = value` line in the
/// optional config file, with command-line flags taking precedence.
#[derive(Args, Default, Clone)]
struct Overrides {
    /// Path to a flat `key = value` config file (# comments allowed)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base learning rate [key: base_lr]
    #[arg(long)]
    base_lr: Option<f64>,
    /// SGD momentum coefficient [key: momentum]
    #[arg(long)]
    momentum: Option<f64>,
    /// Number of training iterations [key: iterations]
    #[arg(long)]
    iterations: Option<usize>,
    /// Multiplicative learning-rate decay factor [key: decay_factor]
    #[arg(long)]
    decay_factor: Option<f64>,
    /// Iterations between learning-rate decays [key: decay_interval]
    #[arg(long)]
    decay_interval: Option<usize>,
    /// Seed for initialization, ordering and augmentation [key: seed]
    #[arg(long)]
    seed: Option<u64>,
    /// Channel-width divisor for the trunk [key: width_scale]
    #[arg(long)]
    width_scale: Option<usize>,
    /// Enable training-time augmentation [key: augment]
    #[arg(long, value_enum)]
    augment: Option<OnOff>,
    /// Restrict evaluation to the field-of-view mask [key: fov]
    #[arg(long, value_enum)]
    fov: Option<OnOff>,
}

/// Fully resolved settings: defaults, then config file, then flags.
struct RunConfig {
    train: TrainConfig,
    net: NetConfig,
    fov: Option<bool>,
}

const CONFIG_KEYS: &[&str] = &[
    "base_lr",
    "momentum",
    "iterations",
    "decay_factor",
    "decay_interval",
    "seed",
    "width_scale",
    "augment",
    "fov",
];

fn parse_config_file(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config {}: {}", path.display(), e)))?;
    let mut map = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!(
                "{}:{}: expected `key = value`, got {:?}",
                path.display(),
                lineno + 1,
                raw
            ))
        })?;
        let key = key.trim();
        if !CONFIG_KEYS.contains(&key) {
            return Err(Error::Config(format!(
                "{}:{}: unknown key {:?} (known keys: {})",
                path.display(),
                lineno + 1,
                key,
                CONFIG_KEYS.join(", ")
            )));
        }
        map.insert(key.to_string(), value.trim().to_string());
    }
    Ok(map)
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {:?} for key {:?}", value, key)))
}

fn parse_on_off(key: &str, value: &str) -> Result<bool> {
    match value {
        "on" => Ok(true),
        "off" => Ok(false),
        _ => Err(Error::Config(format!(
            "invalid value {:?} for key {:?} (expected on|off)",
            value, key
        ))),
    }
}

impl Overrides {
    fn resolve(&self) -> Result<RunConfig> {
        let file = match &self.config {
            Some(p) => parse_config_file(p)?,
            None => BTreeMap::new(),
        };
        let mut train = TrainConfig::default();
        let mut width_scale = 8usize;
        let mut augment = true;
        let mut fov = None;
        if let Some(v) = file.get("base_lr") {
            train.base_lr = parse_value("base_lr", v)?;
        }
        if let Some(v) = file.get("momentum") {
            train.momentum = parse_value("momentum", v)?;
        }
        if let Some(v) = file.get("iterations") {
            train.iterations = parse_value("iterations", v)?;
        }
        if let Some(v) = file.get("decay_factor") {
            train.decay_factor = parse_value("decay_factor", v)?;
        }
        if let Some(v) = file.get("decay_interval") {
            train.decay_interval = parse_value("decay_interval", v)?;
        }
        if let Some(v) = file.get("seed") {
            train.seed = parse_value("seed", v)?;
        }
        if let Some(v) = file.get("width_scale") {
            width_scale = parse_value("width_scale", v)?;
        }
        if let Some(v) = file.get("augment") {
            augment = parse_on_off("augment", v)?;
        }
        if let Some(v) = file.get("fov") {
            fov = Some(parse_on_off("fov", v)?);
        }
        if let Some(v) = self.base_lr {
            train.base_lr = v;
        }
        if let Some(v) = self.momentum {
            train.momentum = v;
        }
        if let Some(v) = self.iterations {
            train.iterations = v;
        }
        if let Some(v) = self.decay_factor {
            train.decay_factor = v;
        }
        if let Some(v) = self.decay_interval {
            train.decay_interval = v;
        }
        if let Some(v) = self.seed {
            train.seed = v;
        }
        if let Some(v) = self.width_scale {
            width_scale = v;
        }
        if let Some(v) = self.augment {
            augment = matches!(v, OnOff::On);
        }
        if let Some(v) = self.fov {
            fov = Some(matches!(v, OnOff::On));
        }
        if !augment {
            train.augment = AugmentConfig::identity();
        }
        let net = NetConfig::with_width_scale(width_scale);
        net.validate()?;
        train.validate()?;
        Ok(RunConfig { train, net, fov })
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a head from scratch on a dataset's training split
    Train {
        /// Dataset root directory
        #[arg(long)]
        data: PathBuf,
        /// Dataset directory layout
        #[arg(long, value_enum, default_value = "generic")]
        layout: LayoutArg,
        /// Which head to train
        #[arg(long, value_enum)]
        task: TaskArg,
        /// Output weight file
        #[arg(long)]
        out: PathBuf,
        /// Output loss-log CSV
        #[arg(long)]
        log: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Run a trained network on one image and write probability maps
    Infer {
        /// Trained weight file
        #[arg(long)]
        weights: PathBuf,
        /// Input image (8-bit binary PPM)
        #[arg(long)]
        image: PathBuf,
        /// Head(s) to evaluate; `both` shares one trunk evaluation
        #[arg(long, value_enum)]
        task: InferTaskArg,
        /// Output probability map (16-bit PGM); with `--task both` the
        /// task name is inserted before the extension
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Evaluate probability maps against a dataset's test split
    Eval {
        /// Directory holding one `<id>.pgm` probability map per test image
        #[arg(long)]
        pred_dir: PathBuf,
        /// Dataset root directory
        #[arg(long)]
        data: PathBuf,
        /// Dataset directory layout
        #[arg(long, value_enum, default_value = "generic")]
        layout: LayoutArg,
        /// Which head's ground truth to evaluate against
        #[arg(long, value_enum)]
        task: TaskArg,
        /// Prefix for the emitted CSV and summary files
        #[arg(long)]
        out_prefix: String,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Generate a synthetic dataset in the generic layout
    Synth {
        /// Base seed; sample i uses seed + i
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of images to generate
        #[arg(long, default_value_t = 4)]
        count: usize,
        /// Square image size in pixels (>= 32)
        #[arg(long, default_value_t = 64)]
        size: usize,
        /// Output dataset directory
        #[arg(long)]
        out: PathBuf,
    },
    /// Verify analytic gradients against finite differences
    Gradcheck {
        /// Seed for the random probe shapes
        #[arg(long, default_value_t = 11)]
        seed: u64,
        /// Channel-width divisor for the end-to-end network
        #[arg(long, default_value_t = 8)]
        width_scale: usize,
        /// Negate the named op's analytic gradient (harness self-test)
        #[arg(long)]
        inject_fault: Option<String>,
    },
}

fn exit_code_for(_err: &Error) -> u8 {
    2
}

fn run() -> std::result::Result<u8, Error> {
    match Cli::parse().command {
        Command::Train {
            data,
            layout,
            task,
            out,
            log,
            overrides,
        } => cmd_train(&data, layout.into(), task.into(), &out, &log, &overrides),
        Command::Infer {
            weights,
            image,
            task,
            out,
            overrides,
        } => cmd_infer(&weights, &image, task, &out, &overrides),
        Command::Eval {
            pred_dir,
            data,
            layout,
            task,
            out_prefix,
            overrides,
        } => cmd_eval(&pred_dir, &data, layout.into(), task.into(), &out_prefix, &overrides),
        Command::Synth {
            seed,
            count,
            size,
            out,
        } => {
            save_synth_dataset(&out, seed, count, size)?;
            println!("wrote {} samples to {}", count, out.display());
            Ok(0)
        }
        Command::Gradcheck {
            seed,
            width_scale,
            inject_fault,
        } => cmd_gradcheck(seed, width_scale, inject_fault.as_deref()),
    }
}

fn cmd_train(
    data: &Path,
    layout: Layout,
    task: Task,
    out: &Path,
    log_path: &Path,
    overrides: &Overrides,
) -> std::result::Result<u8, Error> {
    let run = overrides.resolve()?;
    let split = load_dataset(data, layout, task)?;
    let params = build_network::<f32>(&run.net, run.train.seed)?;
    let means = compute_channel_means(&split.train)?;
    let (mut params, log) = train(params, &run.net, &split.train, &run.train, task)?;
    params.insert(
        MEAN_KEY,
        Tensor::from_vec(&[3], vec![means.r as f32, means.g as f32, means.b as f32])?,
    );
    write_atomic(out, &save_weights(&params))?;
    write_atomic(log_path, loss_log_csv(&log).as_bytes())?;
    match log.last() {
        Some(row) => println!("final loss {:.6} after {} iterations", row.loss, log.len()),
        None => println!("no iterations run"),
    }
    Ok(0)
}

/// Splits stored weights into network parameters and channel means,
/// verifying every tensor against the configured architecture.
fn check_architecture(
    stored: NetworkParams<f32>,
    net: &NetConfig,
) -> Result<(NetworkParams<f32>, ChannelMeans)> {
    let expected = build_network::<f32>(net, 0)?;
    let mut params = NetworkParams::new();
    let mut means = ChannelMeans { r: 0.0, g: 0.0, b: 0.0 };
    for (name, tensor) in stored.iter() {
        if name == MEAN_KEY {
            if tensor.shape() != [3] {
                return Err(Error::Consistency(format!(
                    "tensor {:?} has shape {:?}, expected [3]",
                    name,
                    tensor.shape()
                )));
            }
            means = ChannelMeans {
                r: tensor.data()[0] as f64,
                g: tensor.data()[1] as f64,
                b: tensor.data()[2] as f64,
            };
            continue;
        }
        let want = expected.get(name).map_err(|_| {
            Error::Consistency(format!(
                "weight file holds unknown tensor {:?} for this architecture",
                name
            ))
        })?;
        if want.shape() != tensor.shape() {
            return Err(Error::Consistency(format!(
                "tensor {:?} has shape {:?}, architecture expects {:?}",
                name,
                tensor.shape(),
                want.shape()
            )));
        }
        params.insert(name.clone(), tensor.clone());
    }
    if let Some(missing) = expected.names().find(|n| params.get(n).is_err()) {
        return Err(Error::Consistency(format!(
            "weight file is missing tensor {:?}",
            missing
        )));
    }
    Ok((params, means))
}

fn infer_out_path(out: &Path, task: Task) -> PathBuf {
    let stem = out
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".into());
    let ext = out
        .extension()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "pgm".into());
    out.with_file_name(format!("{}.{}.{}", stem, task.name(), ext))
}

fn cmd_infer(
    weights: &Path,
    image_path: &Path,
    task: InferTaskArg,
    out: &Path,
    overrides: &Overrides,
) -> std::result::Result<u8, Error> {
    let run = overrides.resolve()?;
    let stored = load_weights(&fs::read(weights).map_err(|e| {
        Error::InvalidArgument(format!("cannot read weights {}: {}", weights.display(), e))
    })?)?;
    let (params, means) = check_architecture(stored, &run.net)?;
    let image = read_image(&fs::read(image_path).map_err(|e| {
        Error::InvalidArgument(format!("cannot read image {}: {}", image_path.display(), e))
    })?)?;
    let input = preprocess(&image, &means);
    let heads: Vec<Task> = match task {
        InferTaskArg::Vessel => vec![Task::Vessel],
        InferTaskArg::Disc => vec![Task::Disc],
        InferTaskArg::Both => vec![Task::Vessel, Task::Disc],
    };
    let (outputs, _) = forward(&params, &run.net, &input, &heads)?;
    let many = outputs.len() > 1;
    for (head, prob) in &outputs {
        let path = if many {
            infer_out_path(out, *head)
        } else {
            out.to_path_buf()
        };
        write_atomic(&path, &write_probmap(prob)?)?;
        println!("wrote {}", path.display());
    }
    Ok(0)
}

fn cmd_eval(
    pred_dir: &Path,
    data: &Path,
    layout: Layout,
    task: Task,
    out_prefix: &str,
    overrides: &Overrides,
) -> std::result::Result<u8, Error> {
    let run = overrides.resolve()?;
    let split = load_dataset(data, layout, task)?;
    if split.test.is_empty() {
        return Err(Error::Dataset("test split is empty".into()));
    }
    // FOV restriction defaults to on when any FOV mask exists
    let use_fov = run
        .fov
        .unwrap_or_else(|| split.test.iter().any(|s| s.fov.is_some()));

    let missing: Vec<&str> = split
        .test
        .iter()
        .filter(|s| !pred_dir.join(format!("{}.pgm", s.id)).is_file())
        .map(|s| s.id.as_str())
        .collect();
    if !missing.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "missing probability maps in {}: {}",
            pred_dir.display(),
            missing.join(", ")
        )));
    }

    let mut images = Vec::with_capacity(split.test.len());
    for s in &split.test {
        let prob = driu::data::read_probmap(&fs::read(pred_dir.join(format!("{}.pgm", s.id)))?)?;
        if prob.shape()[1] != s.gold.height() || prob.shape()[2] != s.gold.width() {
            return Err(Error::shape(format!(
                "probability map for {:?} is {:?}, gold is {}x{}",
                s.id,
                &prob.shape()[1..],
                s.gold.height(),
                s.gold.width()
            )));
        }
        images.push(EvalImage {
            id: s.id.clone(),
            prob,
            gold: s.gold.clone(),
            fov: if use_fov { s.fov.clone() } else { None },
        });
    }

    let curve = pr_curve(&images)?;
    let best = ods(&curve)?;

    let mut boundary_rows = Vec::new();
    let mut boundary_values = Vec::new();
    let mut undefined = 0usize;
    for img in &images {
        let pred = binarize(&img.prob, best.threshold)?;
        match boundary_error(&pred, &img.gold) {
            Ok(e) => {
                boundary_rows.push((img.id.clone(), e));
                boundary_values.push(e);
            }
            Err(Error::Consistency(_)) => {
                eprintln!("warning: boundary error undefined for {}", img.id);
                undefined += 1;
            }
            Err(e) => return Err(e),
        }
    }
    let boundary_stats = if boundary_values.is_empty() {
        None
    } else {
        Some(quartiles(&boundary_values)?)
    };

    let human_inputs: Vec<_> = split
        .test
        .iter()
        .map(|s| {
            if s.second.is_none() {
                eprintln!("warning: no second annotation for {}", s.id);
            }
            (
                s.id.clone(),
                s.gold.clone(),
                s.second.clone(),
                if use_fov { s.fov.clone() } else { None },
            )
        })
        .collect();
    let (per_image, pooled) = human_points(&human_inputs)?;

    let prefix = |suffix: &str| PathBuf::from(format!("{}{}", out_prefix, suffix));
    write_atomic(&prefix("pr.csv"), pr_curve_csv(&curve).as_bytes())?;
    write_atomic(&prefix("boundary.csv"), boundary_csv(&boundary_rows).as_bytes())?;
    if !per_image.is_empty() {
        write_atomic(
            &prefix("human.csv"),
            human_points_csv(&per_image, pooled.as_ref()).as_bytes(),
        )?;
    }
    let summary = summary_text(&best, boundary_stats.as_ref(), undefined);
    write_atomic(&prefix("summary.txt"), summary.as_bytes())?;
    print!("{}", summary);
    Ok(0)
}

fn cmd_gradcheck(
    seed: u64,
    width_scale: usize,
    fault: Option<&str>,
) -> std::result::Result<u8, Error> {
    let mut reports = check_all_ops(seed, fault)?;
    reports.push(check_end_to_end_scaled(
        seed,
        width_scale,
        fault == Some(driu::gradcheck::END_TO_END),
    )?);
    let mut all_passed = true;
    for r in &reports {
        let status = if r.passed() { "pass" } else { "FAIL" };
        println!(
            "{:<16} max_rel_err {:.3e} (threshold {:.0e}) {}",
            r.name, r.max_rel_err, r.threshold, status
        );
        if !r.passed() {
            all_passed = false;
            eprintln!("gradient check failed for {}", r.name);
        }
    }
    Ok(if all_passed { 0 } else { 1 })
}

fn main() -> ExitCode {
    match run() {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::from(exit_code_for(&e))
        }
    }
}
