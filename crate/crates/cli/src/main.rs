use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use snnergy_core::cmqka::Pathways;
use snnergy_core::data_io::{generate_dataset, load_dataset, save_dataset, Dataset};
use snnergy_core::model::{ModelConfig, Snnergy};
use snnergy_core::nn::{Ctx, ParamStore};
use snnergy_core::profiler::{self, BenchKind, BenchReport, FiringRateStats, REFERENCE_TABLE};
use snnergy_core::tensor::instrument;
use snnergy_core::train::{self, AblationAxis, TrainConfig};
use snnergy_core::{Tape, Tensor};

mod config;

use config::{parse_list, ConfigError, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "snnergy", version, about = "Spiking audio-visual transformer: data, training, profiling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic audio-visual dataset directory
    GenData(GenData),
    /// Train a model and write a checkpoint
    Train(TrainCmd),
    /// Evaluate a checkpoint on a dataset split
    Eval(EvalCmd),
    /// Print complexity, energy and firing-rate tables
    Profile(ProfileCmd),
    /// Runtime and memory scaling sweep over token counts
    Bench(BenchCmd),
    /// Train one variant per sweep value and tabulate accuracy
    Ablate(AblateCmd),
}

#[derive(Args, Debug)]
struct Common {
    /// TOML file with optional [data], [model] and [train] tables
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct GenData {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value = "data")]
    out: PathBuf,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    samples_per_class: Option<usize>,
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    timesteps: Option<usize>,
    /// Probability that audio carries the video's class
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    sigma: Option<f64>,
    /// Disable the class-specific temporal schedule
    #[arg(long)]
    no_temporal_signal: bool,
}

#[derive(Args, Debug)]
struct ModelOverrides {
    /// Model preset: toy (32², T=2) or paper (128², T=6, full width)
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    timesteps: Option<usize>,
    /// spatial-only, temporal-only or spatiotemporal
    #[arg(long)]
    pathways: Option<Pathways>,
    #[arg(long)]
    base_dim: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainOverrides {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Args, Debug)]
struct TrainCmd {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    model: ModelOverrides,
    #[command(flatten)]
    train: TrainOverrides,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "model.snck")]
    out: PathBuf,
    /// Per-epoch metrics CSV
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalCmd {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ProfilePreset {
    /// The reference complexity table, diffed cell by cell
    PaperTable,
    Toy,
    Paper,
}

#[derive(Args, Debug)]
struct ProfileCmd {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_enum, default_value = "paper-table")]
    preset: ProfilePreset,
    /// Profile a trained model instead of a freshly initialized preset
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Draw inputs from this dataset's test split instead of random noise
    #[arg(long)]
    data: Option<PathBuf>,
    /// Write `<name>.txt` and `<name>.toml` reports into this directory
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum BenchChoice {
    Cmqka,
    Ssa,
    Both,
}

#[derive(Args, Debug)]
struct BenchCmd {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_enum, default_value = "both")]
    kind: BenchChoice,
    /// Comma-separated, ascending token counts
    #[arg(long, default_value = "64,256,1024,4096", value_delimiter = ',')]
    n: Vec<usize>,
    #[arg(long, default_value_t = 96)]
    channels: usize,
    #[arg(long, default_value_t = 5)]
    repeats: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Axis {
    Timesteps,
    Pathway,
}

#[derive(Args, Debug)]
struct AblateCmd {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    train: TrainOverrides,
    #[arg(long, value_enum)]
    axis: Axis,
    /// Comma-separated sweep values (default: 1,2,4 or all three pathway modes)
    #[arg(long)]
    values: Option<String>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("SNNERGY_LOG", "info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<ConfigError>().is_some() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<snnergy_core::Error>() {
            return if e.is_config() { 2 } else { 1 };
        }
    }
    1
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData(c) => gen_data(c),
        Command::Train(c) => train_cmd(c),
        Command::Eval(c) => eval_cmd(c),
        Command::Profile(c) => profile_cmd(c),
        Command::Bench(c) => bench_cmd(c),
        Command::Ablate(c) => ablate_cmd(c),
    }
}

fn write_out(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// SHA-256 over every file's relative path and contents, in sorted path order.
fn dir_digest(dir: &Path) -> Result<String> {
    fn walk(base: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
        for e in fs::read_dir(dir)? {
            let p = e?.path();
            if p.is_dir() {
                walk(base, &p, out)?;
            } else {
                out.push(p.strip_prefix(base).unwrap_or(&p).to_path_buf());
            }
        }
        Ok(())
    }
    let mut files = Vec::new();
    walk(dir, dir, &mut files)?;
    files.sort();
    let mut h = Sha256::new();
    for f in files {
        h.update(f.to_string_lossy().as_bytes());
        h.update([0]);
        h.update(fs::read(dir.join(&f))?);
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

fn gen_data(c: GenData) -> Result<()> {
    let mut spec = RunConfig::load(c.common.config.as_deref())?.data;
    if let Some(v) = c.classes {
        spec.num_classes = v;
    }
    if let Some(v) = c.samples_per_class {
        spec.samples_per_class = v;
    }
    if let Some(v) = c.size {
        spec.hw = (v, v);
    }
    if let Some(v) = c.timesteps {
        spec.timesteps = v;
    }
    if let Some(v) = c.rho {
        spec.cross_modal_correlation = v;
    }
    if let Some(v) = c.sigma {
        spec.noise_sigma = v;
    }
    if c.no_temporal_signal {
        spec.temporal_signal = false;
    }
    if let Some(s) = c.common.seed {
        spec.seed = s;
    }
    let ds = generate_dataset(&spec)?;
    save_dataset(&ds, &c.out)?;
    println!(
        "wrote {} train / {} val / {} test samples to {}",
        ds.train.len(),
        ds.val.len(),
        ds.test.len(),
        c.out.display()
    );
    println!("digest {}", dir_digest(&c.out)?);
    Ok(())
}

fn model_config(file: &RunConfig, o: &ModelOverrides, seed: Option<u64>) -> Result<ModelConfig> {
    let mut m = match &o.preset {
        Some(p) => ModelConfig::preset(p)?,
        None => file.model.clone(),
    };
    if let Some(t) = o.timesteps {
        m.timesteps = t;
    }
    if let Some(p) = o.pathways {
        m.cmqka.pathways = p;
    }
    if let Some(d) = o.base_dim {
        m.base_dim = d;
    }
    if let Some(s) = seed {
        m.seed = s;
    }
    Ok(m)
}

fn train_config(file: &RunConfig, o: &TrainOverrides, seed: Option<u64>) -> TrainConfig {
    let mut t = file.train.clone();
    if let Some(v) = o.epochs {
        t.epochs = v;
    }
    if let Some(v) = o.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = o.lr {
        t.lr = v;
    }
    if let Some(s) = seed {
        t.seed = s;
    }
    t
}

/// Input geometry and class count follow the dataset.
fn align_to_data(m: &mut ModelConfig, ds: &Dataset) {
    let s = &ds.spec;
    if (m.input_hw, m.video_channels, m.audio_channels, m.num_classes) != (s.hw, s.video_channels, s.audio_channels, s.num_classes) {
        log::info!("model input set to {}x{}, {}+{} channels, {} classes from the dataset", s.hw.0, s.hw.1, s.video_channels, s.audio_channels, s.num_classes);
    }
    m.input_hw = s.hw;
    m.video_channels = s.video_channels;
    m.audio_channels = s.audio_channels;
    m.num_classes = s.num_classes;
}

fn train_cmd(c: TrainCmd) -> Result<()> {
    let file = RunConfig::load(c.common.config.as_deref())?;
    let ds = load_dataset(&c.data)?;
    let mut mc = model_config(&file, &c.model, c.common.seed)?;
    align_to_data(&mut mc, &ds);
    let mut tc = train_config(&file, &c.train, c.common.seed);
    tc.checkpoint_path = Some(c.out.clone());
    let trained = train::train(&mc, &tc, &ds)?;
    if let Some(p) = &c.metrics {
        write_out(p, &trained.metrics.to_csv())?;
    }
    let m = &trained.metrics;
    let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
    println!("final val top1 {}  test top1 {}", fmt(m.final_val_top1()), fmt(m.test_top1));
    if let Some(r) = &m.firing_rates {
        print!("{}", r.render());
    }
    println!("checkpoint {}", c.out.display());
    Ok(())
}

fn eval_cmd(c: EvalCmd) -> Result<()> {
    let (model, store) = train::load_checkpoint(&c.checkpoint)?;
    let ds = load_dataset(&c.data)?;
    let split = ds.split(&c.split)?;
    let r = train::evaluate(&model, &store, split, c.batch_size)?;
    println!("{} samples  top1 {:.4}  loss {:.4}", r.samples, r.top1, r.loss);
    print!("{}", r.firing_rates.render());
    Ok(())
}

fn save_report(out: Option<&Path>, name: &str, text: &str, toml_text: &str) -> Result<()> {
    if let Some(dir) = out {
        write_out(&dir.join(format!("{name}.txt")), text)?;
        write_out(&dir.join(format!("{name}.toml")), toml_text)?;
    }
    Ok(())
}

fn to_toml<T: serde::Serialize>(v: &T) -> Result<String> {
    toml::to_string(v).map_err(|e| anyhow!("serializing report: {e}"))
}

fn profile_cmd(c: ProfileCmd) -> Result<()> {
    let file = RunConfig::load(c.common.config.as_deref())?;
    if let (ProfilePreset::PaperTable, None) = (c.preset, &c.checkpoint) {
        let mut mismatches = 0;
        for col in &REFERENCE_TABLE {
            let report = profiler::complexity_table(&col.geometry(), &profiler::HYBRID_KINDS)?;
            println!("base width {} (MACs per block per timestep, dominant term)", col.base_dim);
            print!("{}", report.render());
            let diff = col.diff(&report);
            for d in &diff {
                println!("  mismatch: {d}");
            }
            if diff.is_empty() {
                println!("  all cells match the reference table");
            }
            mismatches += diff.len();
            save_report(c.out.as_deref(), &format!("complexity_{}", col.base_dim), &report.render(), &report.to_toml()?)?;
        }
        if mismatches > 0 {
            bail!("{mismatches} cells differ from the reference table");
        }
        return Ok(());
    }

    let (model, store) = match &c.checkpoint {
        Some(p) => train::load_checkpoint(p)?,
        None => {
            let preset = match c.preset {
                ProfilePreset::Paper => "paper",
                _ => "toy",
            };
            let mut cfg = ModelConfig::preset(preset)?;
            if c.common.config.is_some() {
                cfg = file.model.clone();
            }
            if let Some(s) = c.common.seed {
                cfg.seed = s;
            }
            let mut store = ParamStore::new();
            (Snnergy::new(cfg, &mut store)?, store)
        }
    };
    let cfg = &model.cfg;
    let geometry: Vec<(usize, usize)> = cfg.stages().iter().map(|s| (s.tokens(), s.channels)).collect();
    let kinds: Vec<_> = cfg.stages().iter().map(|s| s.attention).collect();
    let table = profiler::complexity_table(&geometry, &kinds)?;
    println!("complexity (MACs per block per timestep, dominant term)");
    print!("{}", table.render());
    save_report(c.out.as_deref(), "complexity", &table.render(), &table.to_toml()?)?;

    let (video, audio) = match &c.data {
        Some(dir) => {
            let ds = load_dataset(dir)?;
            let split = if ds.test.is_empty() { &ds.train } else { &ds.test };
            let (v, a, _) = split.batch(&[0], cfg.timesteps)?;
            (v, a)
        }
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(c.common.seed.unwrap_or(0));
            let (h, w) = cfg.input_hw;
            (
                Tensor::uniform(&[cfg.timesteps, 1, cfg.video_channels, h, w], 0.0, 1.0, &mut rng),
                Tensor::uniform(&[cfg.timesteps, 1, cfg.audio_channels, h, w], 0.0, 1.0, &mut rng),
            )
        }
    };
    let tape = Tape::inference();
    let ctx = Ctx::new(&tape, &store, false);
    let (out, counts) = instrument::count_ops(|| model.forward(&ctx, &tape.constant(video), &tape.constant(audio)));
    out?;
    let rates: FiringRateStats = profiler::measure_firing_rates(&ctx.spike_records())?;
    let energy = profiler::model_energy(&counts, &rates, cfg.timesteps, 1)?;
    println!("\nenergy (MACs per sample per timestep; BN folded)");
    print!("{}", energy.render());
    println!("\nfiring rates");
    print!("{}", rates.render());
    save_report(c.out.as_deref(), "energy", &energy.render(), &to_toml(&energy)?)?;
    save_report(c.out.as_deref(), "firing_rates", &rates.render(), &to_toml(&rates)?)?;
    Ok(())
}

fn bench_cmd(c: BenchCmd) -> Result<()> {
    let kinds = match c.kind {
        BenchChoice::Cmqka => vec![BenchKind::Cmqka],
        BenchChoice::Ssa => vec![BenchKind::Ssa],
        BenchChoice::Both => vec![BenchKind::Cmqka, BenchKind::Ssa],
    };
    let seed = c.common.seed.unwrap_or(0);
    let mut rows = Vec::new();
    for k in &kinds {
        rows.extend(profiler::scaling_bench(*k, &c.n, c.channels, c.repeats, seed)?);
    }
    let report = BenchReport { rows };
    let csv = report.to_csv();
    print!("{csv}");
    for k in &kinds {
        let ratios: Vec<String> = report.op_ratios(*k).iter().map(|r| format!("{r:.2}")).collect();
        let slope = report.time_slope(*k).map_or("-".into(), |s| format!("{s:.3}"));
        eprintln!("{}: op ratios [{}], time slope {}", k.as_str(), ratios.join(", "), slope);
    }
    if let Some(p) = &c.out {
        write_out(p, &csv)?;
    }
    Ok(())
}

fn ablate_cmd(c: AblateCmd) -> Result<()> {
    let file = RunConfig::load(c.common.config.as_deref())?;
    let ds = load_dataset(&c.data)?;
    let mut mc = file.model.clone();
    if let Some(s) = c.common.seed {
        mc.seed = s;
    }
    align_to_data(&mut mc, &ds);
    let tc = train_config(&file, &c.train, c.common.seed);
    let axis = match c.axis {
        Axis::Timesteps => AblationAxis::Timesteps(parse_list(c.values.as_deref().unwrap_or("1,2,4")).map_err(ConfigError)?),
        Axis::Pathway => AblationAxis::Pathway(
            parse_list(c.values.as_deref().unwrap_or("spatial-only,temporal-only,spatiotemporal")).map_err(ConfigError)?,
        ),
    };
    let rows = train::ablation_sweep(&axis, &mc, &tc, &ds)?;
    let csv = train::ablation_csv(&rows);
    print!("{csv}");
    if let Some(p) = &c.out {
        write_out(p, &csv)?;
    }
    Ok(())
}
