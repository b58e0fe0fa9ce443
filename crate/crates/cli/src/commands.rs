use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Subcommand, ValueEnum};
use log::info;
use sepdl_core::data::{add_gaussian_noise, extract_patches, load_dict, load_pgm, save_dict, save_pgm};
use sepdl_core::trainer::{InMemoryTransport, Transport};
use sepdl_core::{
    denoise_image, psnr, rmse, ssim, train, CodingStop, DenoiseConfig, DenoiseReport, DenoiseStats, DictMode,
    DictionaryPair, PatchSet, SparseCoder, TrainConfig, TrainError, TrainOutput,
};
use serde::{Deserialize, Serialize};

use crate::manifest::{self, fingerprint, Manifest};
use crate::source::{default_atoms, DataSource, ShapeHints, DEFAULT_M};
use crate::CliError;

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a dictionary pair with the master-worker trainer.
    Train(TrainArgs),
    /// Denoise a grayscale PGM image.
    Denoise(DenoiseArgs),
    /// Time the training main loop over several node counts.
    Bench(BenchArgs),
    /// Score a dictionary on a dataset, or an image against a reference.
    Evaluate(EvaluateArgs),
}

pub fn run(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Train(args) => cmd_train(args),
        Command::Denoise(args) => cmd_denoise(args),
        Command::Bench(args) => cmd_bench(args),
        Command::Evaluate(args) => cmd_evaluate(args),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransportKind {
    /// In-process channels.
    Memory,
    /// Unix socket pairs with the binary frame encoding.
    Socket,
}

impl TransportKind {
    fn build(self) -> Result<Box<dyn Transport>, CliError> {
        match self {
            TransportKind::Memory => Ok(Box::new(InMemoryTransport)),
            #[cfg(unix)]
            TransportKind::Socket => Ok(Box::new(sepdl_core::trainer::SocketTransport)),
            #[cfg(not(unix))]
            TransportKind::Socket => Err(CliError::Usage("socket transport needs a unix host".into())),
        }
    }
}

#[derive(Debug, Args)]
pub struct ShapeArgs {
    /// Dictionary kind: general (unit-norm columns) or ortho.
    #[arg(long, default_value = "general")]
    mode: DictMode,
    /// Patch side length.
    #[arg(long)]
    m: Option<usize>,
    /// Left atom count (default m for ortho, 2m for general).
    #[arg(long)]
    n1: Option<usize>,
    /// Right atom count (default m for ortho, 2m for general).
    #[arg(long)]
    n2: Option<usize>,
    /// Code sparsity used in training (default m).
    #[arg(long)]
    s: Option<usize>,
}

impl ShapeArgs {
    fn hints(&self) -> ShapeHints {
        ShapeHints { mode: self.mode, m: self.m, n1: self.n1, n2: self.n2, s: self.s }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// `synth:N=..,m=..[,n=..,n1=..,n2=..,s=..,sigma=..]`, a .pgm image or a .sdl patch set.
    #[arg(long, required_unless_present = "replay")]
    data: Option<String>,
    #[command(flatten)]
    shape: ShapeArgs,
    #[arg(long, default_value_t = 20)]
    iters: usize,
    /// Worker count.
    #[arg(long, default_value_t = 1)]
    nodes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "memory")]
    transport: TransportKind,
    /// Patch stride when extracting from an image.
    #[arg(long, default_value_t = 1)]
    stride: usize,
    /// Train on a seeded random subset of this many patches.
    #[arg(long)]
    sample: Option<usize>,
    /// Subtract each patch's mean before training.
    #[arg(long)]
    remove_mean: bool,
    /// Repeat the run described by a manifest; other flags except --out and
    /// --transport are ignored.
    #[arg(long, conflicts_with = "data")]
    replay: Option<PathBuf>,
}

/// Everything that determines a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSetup {
    pub data: DataSource,
    pub sample: Option<usize>,
    pub remove_mean: bool,
    pub mode: DictMode,
    pub m: usize,
    pub n1: usize,
    pub n2: usize,
    pub s: usize,
    pub iters: usize,
    pub nodes: usize,
    pub seed: u64,
}

impl TrainSetup {
    fn from_args(args: &TrainArgs) -> Result<Self, CliError> {
        let data_arg = args.data.as_deref().expect("clap enforces --data");
        if args.stride == 0 {
            return Err(CliError::Usage("--stride must be >= 1".into()));
        }
        let data = DataSource::parse(data_arg, args.shape.hints(), args.stride)?;
        let m = match &data {
            DataSource::Synth { spec } => spec.m,
            DataSource::Image { m, .. } => *m,
            DataSource::PatchFile { .. } => args.shape.m.unwrap_or(0),
        };
        let (mode, shape) = (args.shape.mode, &args.shape);
        Ok(TrainSetup {
            data,
            sample: args.sample,
            remove_mean: args.remove_mean,
            mode,
            m,
            n1: shape.n1.unwrap_or(default_atoms(mode, m)),
            n2: shape.n2.unwrap_or(default_atoms(mode, m)),
            s: shape.s.unwrap_or(m),
            iters: args.iters,
            nodes: args.nodes,
            seed: args.seed,
        })
    }

    fn config(&self) -> TrainConfig {
        TrainConfig::new(self.mode, self.n1, self.n2, self.s, self.iters, self.nodes, self.seed)
    }

    /// Rejects inconsistent flags for synthetic data without generating it.
    fn precheck(&self) -> Result<(), CliError> {
        if let DataSource::Synth { spec } = &self.data {
            let samples = self.sample.unwrap_or(spec.count).min(spec.count);
            self.config().validate(spec.m, samples).map_err(usage_if_invalid)?;
        }
        Ok(())
    }

    /// Loads the patches and settles the shape fields a patch file decides.
    fn load(&mut self) -> Result<PatchSet, CliError> {
        let mut set = self.data.load(self.seed)?;
        if let DataSource::PatchFile { .. } = self.data {
            if self.m != 0 && self.m != set.m() {
                return Err(CliError::Usage(format!(
                    "--m {} but the patch file holds {}x{} patches",
                    self.m,
                    set.m(),
                    set.m()
                )));
            }
            if self.m == 0 {
                self.m = set.m();
                self.n1 = if self.n1 == 0 { default_atoms(self.mode, self.m) } else { self.n1 };
                self.n2 = if self.n2 == 0 { default_atoms(self.mode, self.m) } else { self.n2 };
                self.s = if self.s == 0 { self.m } else { self.s };
            }
        }
        if let Some(k) = self.sample {
            set = set.sample(k, self.seed.wrapping_add(1))?;
        }
        if self.remove_mean {
            set = set.remove_means().0;
        }
        Ok(set)
    }
}

fn usage_if_invalid(e: TrainError) -> CliError {
    match e {
        TrainError::InvalidConfig(msg) => CliError::Usage(msg),
        other => CliError::Runtime(other.to_string()),
    }
}

fn read_pgm(path: &Path) -> Result<sepdl_core::GrayImage, CliError> {
    load_pgm(path).map_err(|e| CliError::Runtime(format!("cannot read image {}: {e}", path.display())))
}

fn read_dict(path: &Path) -> Result<DictionaryPair, CliError> {
    load_dict(path).map_err(|e| CliError::Runtime(format!("cannot read dictionary {}: {e}", path.display())))
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))
}

fn run_training(setup: &TrainSetup, data: &PatchSet, transport: TransportKind) -> Result<TrainOutput, CliError> {
    let transport = transport.build()?;
    let cfg = setup.config();
    cfg.validate(data.m(), data.len()).map_err(usage_if_invalid)?;
    info!(
        "training {} on {} patches of side {} with {} node(s)",
        setup.mode.as_str(),
        data.len(),
        data.m(),
        setup.nodes
    );
    train(&cfg, data, transport.as_ref()).map_err(usage_if_invalid)
}

fn cmd_train(args: TrainArgs) -> Result<(), CliError> {
    let (mut setup, expected_sha) = match &args.replay {
        Some(path) => {
            let man = manifest::read::<TrainSetup>(path)?;
            (man.config, man.dataset_sha256)
        }
        None => (TrainSetup::from_args(&args)?, None),
    };
    if setup.iters == 0 || setup.nodes == 0 {
        return Err(CliError::Usage("--iters and --nodes must be >= 1".into()));
    }
    setup.precheck()?;
    let data = setup.load()?;
    setup.config().validate(data.m(), data.len()).map_err(usage_if_invalid)?;
    let sha = fingerprint(&data);
    if let Some(expected) = expected_sha {
        if expected != sha {
            return Err(CliError::Runtime(format!("dataset fingerprint {sha} differs from the manifest's {expected}")));
        }
    }

    create_dir(&args.out)?;
    let out = run_training(&setup, &data, args.transport)?;
    save_dict(&out.dict, args.out.join("dict.sdl"))?;
    fs::write(args.out.join("metrics.csv"), out.metrics.to_csv())?;
    fs::write(args.out.join("metrics.json"), serde_json::to_string_pretty(&out.metrics.summary_json())?)?;

    let mut man = Manifest::new("train", setup.seed, setup.clone());
    man.dataset_sha256 = Some(sha);
    man.artifacts = ["dict.sdl", "metrics.csv", "metrics.json"].map(String::from).to_vec();
    man.write(&args.out)?;

    let last = out.metrics.iterations.last().expect("row 0 always present");
    println!(
        "trained {} iterations: objective {:.6e}, rmse {:.6e}, {:.3}s main loop; wrote {}",
        last.iter,
        last.objective,
        last.rmse,
        out.metrics.total_seconds,
        args.out.display()
    );
    Ok(())
}

#[derive(Debug, Args)]
pub struct DenoiseArgs {
    /// Clean reference image; enables PSNR and SSIM in the report.
    #[arg(long)]
    clean: Option<PathBuf>,
    /// Noisy input image. Without it, noise of level --sigma is added to --clean.
    #[arg(long)]
    noisy: Option<PathBuf>,
    /// Noise standard deviation in intensity units.
    #[arg(long)]
    sigma: f64,
    /// Trained dictionary pair.
    #[arg(long, required_unless_present = "train_on_noisy", conflicts_with = "train_on_noisy")]
    dict: Option<PathBuf>,
    /// Train on this many random noisy patches first (`N=4000` or `4000`).
    #[arg(long)]
    train_on_noisy: Option<String>,
    #[arg(long, default_value = "ortho")]
    mode: DictMode,
    #[arg(long, default_value_t = DEFAULT_M)]
    m: usize,
    #[arg(long)]
    n1: Option<usize>,
    #[arg(long)]
    n2: Option<usize>,
    /// Training sparsity (default 6).
    #[arg(long, default_value_t = 6)]
    s: usize,
    #[arg(long, default_value_t = 20)]
    iters: usize,
    #[arg(long, default_value_t = 1)]
    nodes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    stride: usize,
    /// Residual target multiplier: epsilon = gain * sigma * m.
    #[arg(long, default_value_t = 1.15)]
    gain: f64,
    /// Maximum atoms per patch (default m*m/2).
    #[arg(long)]
    s_cap: Option<usize>,
    /// Weight of the noisy pixel in the final average.
    #[arg(long)]
    blend: Option<f64>,
    /// Code mean-removed patches and add the mean back.
    #[arg(long)]
    remove_mean: bool,
}

#[derive(Debug, Serialize)]
struct DenoiseSetup<'a> {
    clean: Option<&'a Path>,
    noisy: Option<&'a Path>,
    dict: Option<&'a Path>,
    train_on_noisy: Option<usize>,
    training: Option<TrainConfigEcho>,
    denoise: &'a DenoiseConfig,
    noise_seed: u64,
}

#[derive(Debug, Serialize)]
struct TrainConfigEcho {
    mode: DictMode,
    n1: usize,
    n2: usize,
    s: usize,
    iters: usize,
    nodes: usize,
    sample_seed: u64,
    train_seed: u64,
}

fn parse_count(arg: &str) -> Result<usize, CliError> {
    let digits = arg.strip_prefix("N=").unwrap_or(arg);
    digits
        .parse::<usize>()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(format!("--train-on-noisy '{arg}': expected N=<count> with count >= 1")))
}

fn cmd_denoise(args: DenoiseArgs) -> Result<(), CliError> {
    if args.noisy.is_none() && args.clean.is_none() {
        return Err(CliError::Usage("need --noisy, or --clean together with --sigma to synthesize noise".into()));
    }
    let train_count = args.train_on_noisy.as_deref().map(parse_count).transpose()?;
    let mut cfg = DenoiseConfig::new(args.sigma, args.m);
    cfg.epsilon_gain = args.gain;
    cfg.stride = args.stride;
    cfg.blend = args.blend;
    cfg.remove_mean = args.remove_mean;
    if let Some(cap) = args.s_cap {
        cfg.s_cap = cap;
    }
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let (noise_seed, sample_seed, train_seed) = (args.seed, args.seed.wrapping_add(1), args.seed.wrapping_add(2));
    let training = train_count.map(|_| TrainConfigEcho {
        mode: args.mode,
        n1: args.n1.unwrap_or(default_atoms(args.mode, args.m)),
        n2: args.n2.unwrap_or(default_atoms(args.mode, args.m)),
        s: args.s,
        iters: args.iters,
        nodes: args.nodes,
        sample_seed,
        train_seed,
    });

    let clean = args.clean.as_deref().map(read_pgm).transpose()?;
    let noisy = match (&args.noisy, &clean) {
        (Some(path), _) => read_pgm(path)?,
        (None, Some(clean)) => add_gaussian_noise(clean, args.sigma, noise_seed)?,
        (None, None) => unreachable!("checked above"),
    };

    let dict: DictionaryPair = match (&args.dict, &training) {
        (Some(path), _) => read_dict(path)?,
        (None, Some(t)) => {
            let patches = extract_patches(&noisy, args.m, 1)?;
            let count = train_count.expect("training implies a count").min(patches.len());
            let patches = patches.sample(count, t.sample_seed)?;
            let tc = TrainConfig::new(t.mode, t.n1, t.n2, t.s, t.iters, t.nodes, t.train_seed);
            tc.validate(args.m, patches.len()).map_err(usage_if_invalid)?;
            info!("training {} dictionary on {count} noisy patches", t.mode.as_str());
            train(&tc, &patches, &InMemoryTransport)?.dict
        }
        (None, None) => unreachable!("clap requires --dict or --train-on-noisy"),
    };
    if dict.m() != args.m && args.dict.is_some() {
        info!("using patch side {} from the dictionary", dict.m());
    }
    let cfg = DenoiseConfig { s_cap: args.s_cap.unwrap_or(DenoiseConfig::new(args.sigma, dict.m()).s_cap), ..cfg };

    create_dir(&args.out)?;
    // zero noise: nothing to remove, the input is the answer
    let (denoised, stats) = if args.sigma == 0.0 {
        (noisy.map(|v| v.clamp(0.0, 255.0)), DenoiseStats { patches_coded: 0, mean_triplets: 0.0 })
    } else {
        denoise_image(&noisy, &dict, &cfg)?
    };
    let report = DenoiseReport::new(clean.as_ref(), &noisy, &denoised, stats)?;

    let mut artifacts = vec!["denoised.pgm".to_string(), "report.json".to_string()];
    save_pgm(&denoised, args.out.join("denoised.pgm"))?;
    if args.noisy.is_none() {
        save_pgm(&noisy.map(|v| v.round().clamp(0.0, 255.0)), args.out.join("noisy.pgm"))?;
        artifacts.push("noisy.pgm".into());
    }
    if training.is_some() {
        save_dict(&dict, args.out.join("dict.sdl"))?;
        artifacts.push("dict.sdl".into());
    }
    fs::write(args.out.join("report.json"), serde_json::to_string_pretty(&report)?)?;
    let setup = DenoiseSetup {
        clean: args.clean.as_deref(),
        noisy: args.noisy.as_deref(),
        dict: args.dict.as_deref(),
        train_on_noisy: train_count,
        training,
        denoise: &cfg,
        noise_seed,
    };
    let mut man = Manifest::new("denoise", args.seed, setup);
    man.artifacts = artifacts;
    man.write(&args.out)?;

    match (report.psnr_noisy, report.psnr_denoised) {
        (Some(a), Some(b)) => println!("PSNR {a:.3} dB -> {b:.3} dB; wrote {}", args.out.display()),
        _ => println!("denoised {} patches; wrote {}", stats.patches_coded, args.out.display()),
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Same forms as `train --data`.
    #[arg(long)]
    data: String,
    #[command(flatten)]
    shape: ShapeArgs,
    /// Node counts to time; must include 1.
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8")]
    nodes_list: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    iters: usize,
    /// Runs per node count; the median wall time is reported.
    #[arg(long, default_value_t = 3)]
    repeats: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// CSV output file (standard output when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "memory")]
    transport: TransportKind,
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let k = xs.len() / 2;
    if xs.len() % 2 == 1 {
        xs[k]
    } else {
        0.5 * (xs[k - 1] + xs[k])
    }
}

fn cmd_bench(args: BenchArgs) -> Result<(), CliError> {
    if !args.nodes_list.contains(&1) {
        return Err(CliError::Usage("--nodes-list must include 1 (speedups are relative to it)".into()));
    }
    if args.nodes_list.contains(&0) || args.repeats == 0 || args.iters == 0 {
        return Err(CliError::Usage("node counts, --repeats and --iters must be >= 1".into()));
    }
    let train_args = TrainArgs {
        data: Some(args.data.clone()),
        shape: args.shape,
        iters: args.iters,
        nodes: 1,
        seed: args.seed,
        out: PathBuf::new(),
        transport: args.transport,
        stride: 1,
        sample: None,
        remove_mean: false,
        replay: None,
    };
    let mut setup = TrainSetup::from_args(&train_args)?;
    setup.precheck()?;
    let data = setup.load()?;
    for &p in &args.nodes_list {
        setup.nodes = p;
        setup.config().validate(data.m(), data.len()).map_err(usage_if_invalid)?;
    }

    let mut rows = Vec::new();
    for &p in &args.nodes_list {
        setup.nodes = p;
        let mut times = Vec::with_capacity(args.repeats);
        let mut bytes = 0;
        for _ in 0..args.repeats {
            let out = run_training(&setup, &data, args.transport)?;
            times.push(out.metrics.total_seconds);
            let first = &out.metrics.iterations[1];
            bytes = (first.bytes_up() + first.bytes_down()) / p as u64;
        }
        rows.push((p, median(times), bytes));
    }
    let base = rows.iter().find(|r| r.0 == 1).expect("validated above").1;
    let mut csv = String::from("p,wall_seconds,speedup_vs_p1,bytes_per_iter\n");
    for (p, secs, bytes) in rows {
        csv.push_str(&format!("{p},{secs:.6},{:.4},{bytes}\n", base / secs));
    }
    match &args.out {
        Some(path) => fs::write(path, csv)?,
        None => print!("{csv}"),
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Dictionary pair to score on --data.
    #[arg(long, requires = "data", conflicts_with_all = ["image", "clean"])]
    dict: Option<PathBuf>,
    /// Dataset in the same forms as `train --data`.
    #[arg(long, requires = "dict")]
    data: Option<String>,
    /// Sparsity of the fixed-sparsity codes (default m).
    #[arg(long)]
    s: Option<usize>,
    /// Reference image for image scoring.
    #[arg(long, requires = "image")]
    clean: Option<PathBuf>,
    /// Image to score against --clean.
    #[arg(long, requires = "clean")]
    image: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// JSON output file (standard output when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<(), CliError> {
    let value = match (&args.dict, &args.clean) {
        (Some(dict_path), None) => {
            let dict = read_dict(dict_path)?;
            let hints = ShapeHints {
                mode: dict.mode(),
                m: Some(dict.m()),
                n1: Some(dict.n1()),
                n2: Some(dict.n2()),
                s: args.s,
            };
            let source = DataSource::parse(args.data.as_deref().expect("clap requires --data"), hints, 1)?;
            let data = source.load(args.seed)?;
            if data.m() != dict.m() {
                return Err(CliError::Usage(format!(
                    "patches are {0}x{0} but the dictionary expects {1}x{1}",
                    data.m(),
                    dict.m()
                )));
            }
            let s = args.s.unwrap_or(dict.m());
            if s == 0 || s > dict.n1() * dict.n2() {
                return Err(CliError::Usage(format!("--s must be in 1..={}", dict.n1() * dict.n2())));
            }
            let coder = SparseCoder::for_dict(&dict);
            let codes = data
                .patches()
                .iter()
                .map(|y| coder.code(y, CodingStop::FixedSparsity(s)))
                .collect::<Result<Vec<_>, _>>()?;
            let objective = sepdl_core::objective(&data, &codes, &dict)?;
            serde_json::json!({
                "samples": data.len(),
                "mode": dict.mode(),
                "s": s,
                "objective": objective,
                "rmse": rmse(&data, &codes, &dict)?,
            })
        }
        (None, Some(clean_path)) => {
            let clean = read_pgm(clean_path)?;
            let image = read_pgm(args.image.as_deref().expect("clap requires --image"))?;
            serde_json::json!({ "psnr": psnr(&image, &clean)?, "ssim": ssim(&image, &clean)? })
        }
        _ => return Err(CliError::Usage("give either --dict with --data, or --clean with --image".into())),
    };
    let text = serde_json::to_string_pretty(&value)?;
    match &args.out {
        Some(path) => fs::write(path, text + "\n")?,
        None => println!("{text}"),
    }
    Ok(())
}
