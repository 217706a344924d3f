use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use frace_core::bundle::ModelBundle;
use frace_core::classifier::{train_classifier, Classifier, ResNetConfig, TrainSchedule};
use frace_core::datasets::{Dataset, IdxSplit, LabeledImage};
use frace_core::evaluation::{
    bench_ips, evaluate, iterative_baseline_batch, BaselineConfig, BenchConfig, BenchResult,
};
use frace_core::explainer::{
    explain, explain_batch, explain_pixels, explanation_grid, png_bytes, render_overlay, to_rgb,
    Explanation, OverlaySpec,
};
use frace_core::training::{train, AdversarialMode, TrainConfig, TrainOutputs};
use frace_core::Tensor;
use image::imageops::FilterType;
use image::RgbImage;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data;
use crate::server::{self, decode_upload, AppState};

#[derive(Debug, Parser)]
#[command(
    name = "frace",
    version,
    about = "Real-time counterfactual explanations"
)]
pub struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the ResNet-18 classifier that explanations are made for.
    TrainClassifier(TrainClassifierArgs),
    /// Train the counterfactual generator against a frozen classifier and
    /// write a model bundle.
    TrainGan(TrainGanArgs),
    /// Explain one image toward a counter class.
    Explain(ExplainArgs),
    /// Render the class-by-class explanation grid.
    Grid(GridArgs),
    /// Measure validity, perturbation size, cycle error and realism.
    Eval(EvalArgs),
    /// Measure explanation throughput, optionally against the iterative baseline.
    Bench(BenchArgs),
    /// Serve the HTTP API.
    Serve(ServeArgs),
}

#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    /// Directory with the dataset's IDX files.
    #[arg(long, env = "FRACE_DATA", default_value = "data/mnist")]
    pub data: PathBuf,
    /// Dataset identifier (mnist, emnist-letters).
    #[arg(long, default_value = "mnist")]
    pub dataset: String,
}

#[derive(Debug, Clone, Args)]
pub struct BundleArgs {
    /// Model bundle directory.
    #[arg(long, env = "FRACE_BUNDLE")]
    pub bundle: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainClassifierArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Checkpoint stem to write (`<out>.json` and `<out>.bin`).
    #[arg(long)]
    pub out: PathBuf,
    /// JSON schedule file; flags below override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub base_lr: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    pub decay_epochs: Option<Vec<usize>>,
    #[arg(long)]
    pub decay_factor: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Channel width of the first ResNet stage.
    #[arg(long, default_value_t = 8)]
    pub width: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Use the paper's 80-epoch schedule instead of the 10-epoch desk schedule.
    #[arg(long)]
    pub full_schedule: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AdversarialArg {
    Minimax,
    Wasserstein,
}

#[derive(Debug, Args)]
pub struct TrainGanArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Classifier checkpoint stem.
    #[arg(long)]
    pub classifier: PathBuf,
    /// Bundle directory to write.
    #[arg(long)]
    pub out: PathBuf,
    /// JSON training config; flags below override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Train on the first N training images only.
    #[arg(long)]
    pub subset: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lambda_adv: Option<f64>,
    #[arg(long)]
    pub lambda_cls: Option<f64>,
    #[arg(long)]
    pub lambda_rec: Option<f64>,
    #[arg(long)]
    pub lambda_exp: Option<f64>,
    #[arg(long)]
    pub lambda_per: Option<f64>,
    /// Generator Adam learning rate.
    #[arg(long)]
    pub lr_g: Option<f64>,
    /// Discriminator Adam learning rate.
    #[arg(long)]
    pub lr_d: Option<f64>,
    #[arg(long)]
    pub d_steps: Option<usize>,
    #[arg(long)]
    pub adversarial: Option<AdversarialArg>,
    /// Critic weight clip for the Wasserstein objective.
    #[arg(long, default_value_t = 0.01)]
    pub clip: f64,
    #[arg(long)]
    pub generator_width: Option<usize>,
    #[arg(long)]
    pub discriminator_width: Option<usize>,
    #[arg(long)]
    pub residual_blocks: Option<usize>,
    /// Write intermediate checkpoints every N steps (0 disables).
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
    /// Loss log path (newline-delimited JSON); defaults to `<out>/train_log.ndjson`.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExplainArgs {
    #[command(flatten)]
    pub bundle: BundleArgs,
    #[command(flatten)]
    pub data: DataArgs,
    /// Index into the test split.
    #[arg(long, conflicts_with = "image", required_unless_present = "image")]
    pub index: Option<usize>,
    /// Image file to explain instead of a test image.
    #[arg(long)]
    pub image: Option<PathBuf>,
    #[arg(long)]
    pub counter: usize,
    #[arg(long, default_value_t = 0.1)]
    pub threshold: f64,
    /// Write the overlay PNG here.
    #[arg(long)]
    pub overlay_out: Option<PathBuf>,
    /// Write the counterfactual PNG here.
    #[arg(long)]
    pub counterfactual_out: Option<PathBuf>,
    /// Nearest-neighbour upscaling factor for written PNGs.
    #[arg(long, default_value_t = 1)]
    pub scale: u32,
}

#[derive(Debug, Args)]
pub struct GridArgs {
    #[command(flatten)]
    pub bundle: BundleArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0.1)]
    pub threshold: f64,
    /// Seed for picking one random test image per class.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 4)]
    pub scale: u32,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub bundle: BundleArgs,
    #[command(flatten)]
    pub data: DataArgs,
    /// Seed for sampling counter classes.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Evaluate the first N test images only.
    #[arg(long)]
    pub limit: Option<usize>,
    /// Write the report here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BaselineArg {
    None,
    Iterative,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub bundle: BundleArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_enum, default_value_t = BaselineArg::Iterative)]
    pub baseline: BaselineArg,
    /// JSON bench config; flags below override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub warmup: Option<usize>,
    #[arg(long)]
    pub timed: Option<usize>,
    #[arg(long)]
    pub repetitions: Option<usize>,
    /// Baseline iteration cap.
    #[arg(long, default_value_t = 200)]
    pub max_iters: usize,
    #[arg(long, default_value_t = 0.05)]
    pub step_size: f64,
    #[arg(long, default_value_t = 0.1)]
    pub l1_weight: f64,
    /// Test images to cycle through.
    #[arg(long, default_value_t = 256)]
    pub images: usize,
    /// Hardware description recorded with the results.
    #[arg(long)]
    pub hardware: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[command(flatten)]
    pub bundle: BundleArgs,
    /// Directory with the dataset's IDX files; its test split backs `sample_id`.
    #[arg(long, env = "FRACE_DATA")]
    pub data: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub bind: SocketAddr,
    /// Explanations computed concurrently before requests get 503.
    #[arg(long, default_value_t = 4)]
    pub max_in_flight: usize,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::TrainClassifier(a) => train_classifier_cmd(a),
        Command::TrainGan(a) => train_gan_cmd(a),
        Command::Explain(a) => explain_cmd(a),
        Command::Grid(a) => grid_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Bench(a) => bench_cmd(a),
        Command::Serve(a) => serve_cmd(a),
    }
}

fn write_json(value: &impl Serialize, out: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match out {
        Some(path) => {
            fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
        }
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn load_bundle(args: &BundleArgs) -> Result<ModelBundle<f32>> {
    ModelBundle::load(&args.bundle)
        .with_context(|| format!("loading bundle {}", args.bundle.display()))
}

fn test_split(args: &DataArgs, bundle: &ModelBundle<f32>) -> Result<Dataset<f32>> {
    let data = data::load_split(&args.dataset, &args.data, IdxSplit::Test)?;
    if data.descriptor.num_classes != bundle.num_classes()
        || data.descriptor.image_shape != bundle.manifest.dataset.image_shape
    {
        bail!(
            "dataset {} does not match bundle dataset {}",
            data.descriptor.name,
            bundle.manifest.dataset.name
        );
    }
    Ok(data)
}

fn save_png(img: &RgbImage, scale: u32, path: &Path) -> Result<()> {
    let img = if scale > 1 {
        image::imageops::resize(
            img,
            img.width() * scale,
            img.height() * scale,
            FilterType::Nearest,
        )
    } else {
        img.clone()
    };
    fs::write(path, png_bytes(&img)?).with_context(|| format!("writing {}", path.display()))
}

fn train_classifier_cmd(a: TrainClassifierArgs) -> Result<()> {
    let mut schedule = match &a.config {
        Some(path) => read_json(path)?,
        None if a.full_schedule => TrainSchedule::default(),
        None => TrainSchedule::desk_scale(),
    };
    if let Some(v) = a.epochs {
        schedule.epochs = v;
    }
    if let Some(v) = a.base_lr {
        schedule.base_lr = v;
    }
    if let Some(v) = a.decay_epochs {
        schedule.decay_epochs = v;
    }
    if let Some(v) = a.decay_factor {
        schedule.decay_factor = v;
    }
    if let Some(v) = a.weight_decay {
        schedule.weight_decay = v;
    }
    if let Some(v) = a.momentum {
        schedule.momentum = v;
    }
    if let Some(v) = a.batch_size {
        schedule.batch_size = v;
    }
    schedule.validate()?;
    let train_set = data::load_split(&a.data.dataset, &a.data.data, IdxSplit::Train)?;
    let test_set = data::load_split(&a.data.dataset, &a.data.data, IdxSplit::Test)?;
    let config = ResNetConfig::new(
        train_set.descriptor.image_shape,
        train_set.descriptor.num_classes,
    )
    .with_width(a.width);
    let model = train_classifier(&train_set, Some(&test_set), config, &schedule, a.seed)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    model.save(&a.out)?;
    write_json(&model.training, None)
}

fn train_gan_cmd(a: TrainGanArgs) -> Result<()> {
    let mut cfg: TrainConfig = match &a.config {
        Some(path) => read_json(path)?,
        None => TrainConfig::default(),
    };
    cfg.dataset = a.data.dataset.clone();
    macro_rules! set {
        ($($flag:ident => $($field:ident).+),* $(,)?) => {
            $(if let Some(v) = a.$flag { cfg.$($field).+ = v; })*
        };
    }
    set!(
        epochs => epochs,
        batch_size => batch_size,
        seed => seed,
        lambda_adv => weights.lambda_adv,
        lambda_cls => weights.lambda_cls,
        lambda_rec => weights.lambda_rec,
        lambda_exp => weights.lambda_exp,
        lambda_per => weights.lambda_per,
        lr_g => generator_optimizer.lr,
        lr_d => discriminator_optimizer.lr,
        d_steps => d_steps_per_g,
        generator_width => generator_width,
        discriminator_width => discriminator_width,
        residual_blocks => residual_blocks,
        checkpoint_every => checkpoint_every,
    );
    if a.subset.is_some() {
        cfg.train_subset = a.subset;
    }
    match a.adversarial {
        Some(AdversarialArg::Minimax) => cfg.adversarial = AdversarialMode::Minimax,
        Some(AdversarialArg::Wasserstein) => {
            cfg.adversarial = AdversarialMode::Wasserstein { clip: a.clip }
        }
        None => {}
    }
    cfg.validate()?;

    let classifier = Classifier::<f32>::load(&a.classifier)
        .with_context(|| format!("loading classifier {}", a.classifier.display()))?;
    let train_set = data::load_split(&a.data.dataset, &a.data.data, IdxSplit::Train)?;
    fs::create_dir_all(&a.out)?;
    let outputs = TrainOutputs {
        checkpoint_dir: Some(a.out.join("checkpoints")),
        log_path: Some(a.log.unwrap_or_else(|| a.out.join("train_log.ndjson"))),
    };
    let result = train(&cfg, &train_set, &classifier, &outputs)?;
    let bundle = ModelBundle::new(
        train_set.descriptor.clone(),
        classifier,
        result.generator,
        Some(result.discriminator),
    )?;
    bundle.save(&a.out)?;
    fs::write(
        a.out.join("train_config.json"),
        serde_json::to_string_pretty(&cfg)?,
    )?;
    write_json(&result.log.last(), None)
}

#[derive(Serialize)]
struct ExplainSummary {
    predicted_class: usize,
    counter_class: usize,
    counterfactual_class: usize,
    prob_counter_before: f32,
    prob_counter_after: f32,
    mean_abs_perturbation: f64,
    latency_ms: f64,
}

impl ExplainSummary {
    fn of(e: &Explanation<f32>) -> Self {
        Self {
            predicted_class: e.predicted_class.index(),
            counter_class: e.counter_class.index(),
            counterfactual_class: frace_core::tensor::argmax(&e.probs_after),
            prob_counter_before: e.prob_counter_before(),
            prob_counter_after: e.prob_counter_after(),
            mean_abs_perturbation: e.mean_abs_perturbation(),
            latency_ms: e.latency_ms,
        }
    }
}

fn explain_cmd(a: ExplainArgs) -> Result<()> {
    let spec = OverlaySpec::default().with_threshold(a.threshold);
    spec.validate()?;
    let bundle = load_bundle(&a.bundle)?;
    let (g, h) = (&bundle.generator, &bundle.classifier);
    let e = match (a.index, &a.image) {
        (Some(i), _) => {
            let data = test_split(&a.data, &bundle)?;
            let q = data.get(i).with_context(|| {
                format!("index {i} outside the {}-image test split", data.len())
            })?;
            explain(g, h, q, a.counter)?
        }
        (None, Some(path)) => {
            let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
            let payload = base64::Engine::encode(&base64::engine::general_purpose::STANDARD, bytes);
            let pixels = decode_upload(&payload, bundle.manifest.dataset.image_shape)
                .map_err(anyhow::Error::msg)?;
            explain_pixels(g, h, &pixels, a.counter)?
        }
        (None, None) => bail!("one of --index and --image is required"),
    };
    if let Some(path) = &a.overlay_out {
        save_png(&render_overlay(&e, &spec), a.scale, path)?;
    }
    if let Some(path) = &a.counterfactual_out {
        save_png(&to_rgb(&e.counterfactual_image, e.shape), a.scale, path)?;
    }
    write_json(&ExplainSummary::of(&e), None)
}

/// One randomly chosen test image per class.
pub fn pick_representatives(
    data: &Dataset<f32>,
    num_classes: usize,
    seed: u64,
) -> Vec<LabeledImage<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..num_classes)
        .filter_map(|k| {
            data.indices_of_class(k, usize::MAX)
                .choose(&mut rng)
                .map(|&i| data.examples()[i].clone())
        })
        .collect()
}

fn grid_cmd(a: GridArgs) -> Result<()> {
    let spec = OverlaySpec::default().with_threshold(a.threshold);
    let bundle = load_bundle(&a.bundle)?;
    let data = test_split(&a.data, &bundle)?;
    let reps = pick_representatives(&data, bundle.num_classes(), a.seed);
    let grid = explanation_grid(&bundle.generator, &bundle.classifier, &reps, &spec)?;
    save_png(&grid.image, a.scale, &a.out)?;
    let valid = grid.cells.iter().filter(|c| c.valid).count();
    log::info!(
        "{}×{} grid written to {}; {valid} of {} cells reach their counter class",
        grid.num_classes,
        grid.num_classes,
        a.out.display(),
        grid.cells.len()
    );
    write_json(&grid.cells, None)
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let bundle = load_bundle(&a.bundle)?;
    let Some(d) = &bundle.discriminator else {
        bail!("bundle has no discriminator; the realism metric needs one");
    };
    let mut data = test_split(&a.data, &bundle)?;
    if let Some(n) = a.limit {
        data = data.take(n);
    }
    let report = evaluate(&bundle.generator, d, &bundle.classifier, &data, a.seed)?;
    write_json(&report, a.out.as_deref())
}

#[derive(Serialize)]
struct BenchOutput {
    hardware: String,
    config: BenchConfig,
    frace: BenchResult,
    baseline: Option<BaselineBench>,
    /// FRACE mean IPS over baseline mean IPS.
    speedup: Option<f64>,
}

#[derive(Serialize)]
struct BaselineBench {
    settings: BaselineConfig,
    result: BenchResult,
}

/// CPU model from /proc/cpuinfo where available.
fn detect_hardware() -> String {
    fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split(':').nth(1))
                .map(|m| m.trim().to_string())
        })
        .unwrap_or_else(|| std::env::consts::ARCH.to_string())
}

/// Deterministic counter classes, one per benchmark image, never the label.
pub fn bench_counters(labels: &[usize], num_classes: usize) -> Vec<usize> {
    labels
        .iter()
        .enumerate()
        .map(|(i, &y)| (y + 1 + i % (num_classes - 1)) % num_classes)
        .collect()
}

fn bench_cmd(a: BenchArgs) -> Result<()> {
    let mut config: BenchConfig = match &a.config {
        Some(path) => read_json(path)?,
        None => BenchConfig::default(),
    };
    if let Some(v) = a.batch_size {
        config.batch_size = v;
    }
    if let Some(v) = a.warmup {
        config.warmup_batches = v;
    }
    if let Some(v) = a.timed {
        config.timed_batches = v;
    }
    if let Some(v) = a.repetitions {
        config.repetitions = v;
    }
    config.validate()?;
    let bundle = load_bundle(&a.bundle)?;
    let data = test_split(&a.data, &bundle)?.take(a.images);
    let idx: Vec<usize> = (0..data.len()).collect();
    let (images, labels) = data.batch(&idx);
    let counters = bench_counters(&labels, bundle.num_classes());
    let pick = |batch: &[usize]| -> Vec<usize> { batch.iter().map(|&i| counters[i]).collect() };
    let (g, h) = (&bundle.generator, &bundle.classifier);

    let frace = bench_ips(
        |x: &Tensor<f32>, batch: &[usize]| explain_batch(g, h, x, &pick(batch)).map(drop),
        &images,
        &config,
    )?;
    let baseline = match a.baseline {
        BaselineArg::None => None,
        BaselineArg::Iterative => {
            let settings = BaselineConfig {
                step_size: a.step_size,
                max_iters: a.max_iters,
                l1_weight: a.l1_weight,
            };
            let result = bench_ips(
                |x: &Tensor<f32>, batch: &[usize]| {
                    iterative_baseline_batch(h, x, &pick(batch), &settings).map(drop)
                },
                &images,
                &config,
            )?;
            Some(BaselineBench { settings, result })
        }
    };
    let speedup = baseline
        .as_ref()
        .map(|b| frace.mean_ips / b.result.mean_ips);
    let out = BenchOutput {
        hardware: a.hardware.unwrap_or_else(detect_hardware),
        config,
        frace,
        baseline,
        speedup,
    };
    write_json(&out, a.out.as_deref())
}

fn serve_cmd(a: ServeArgs) -> Result<()> {
    let bundle = load_bundle(&a.bundle)?;
    let samples = a
        .data
        .as_ref()
        .map(|dir| data::load_split(&bundle.manifest.dataset.name, dir, IdxSplit::Test))
        .transpose()?;
    let state = AppState::new(bundle, samples, a.max_in_flight)?;
    tokio::runtime::Runtime::new()?.block_on(server::serve(state, a.bind))
}
