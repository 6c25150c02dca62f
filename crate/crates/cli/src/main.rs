use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use lenctl::corpus::{write_corpus, CorpusSpec, LengthDistribution, Task};
use lenctl::evaluation::{evaluate, read_records, write_reports, write_ttest, EvalConfig, LengthPolicy};
use lenctl::experiment::{load_corpus, parse_clip, run_experiment, train_run, ExperimentPlan};
use lenctl::model::{read_checkpoint, DecodePolicy};
use lenctl::seed::derive_seed;
use lenctl::signal::{dump_impatience, dump_pre, dump_rpe, SignalConfig};
use lenctl::training::{AdamWConfig, TrainConfig};
use lenctl::{LengthControlMode, Model32, ModelConfig};

const OUT_ENV: &str = "LENCTL_OUT";
const DEFAULT_OUT: &str = "lenctl-out";

/// Length-controlled generation laboratory.
///
/// Outputs go under $LENCTL_OUT (default ./lenctl-out). Every file is staged
/// under <out>/tmp/ and moved into place when its command succeeds.
#[derive(Parser, Debug)]
#[command(name = "lenctl", version, about, long_about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic corpus
    Gen(GenArgs),
    /// Train a model on a corpus
    Train(TrainArgs),
    /// Generate from a checkpoint for one source sequence
    Generate(GenerateArgs),
    /// Evaluate a checkpoint on a corpus
    Eval(EvalArgs),
    /// Dump conditioning signals as CSV to stdout
    Signal(SignalArgs),
    /// Run corpus, training, evaluation and comparison in one go
    Experiment(ExperimentArgs),
}

#[derive(Args, Debug)]
struct GenArgs {
    #[arg(long, default_value = "prefix_copy")]
    task: Task,
    /// Number of examples
    #[arg(long, default_value_t = 5000)]
    n: usize,
    #[arg(long, default_value_t = 64)]
    vocab_size: usize,
    #[arg(long, default_value_t = 80)]
    source_min: usize,
    #[arg(long, default_value_t = 90)]
    source_max: usize,
    #[arg(long, default_value_t = 40.0)]
    len_mean: f64,
    #[arg(long, default_value_t = 10.0)]
    len_sd: f64,
    #[arg(long, default_value_t = 8)]
    len_min: usize,
    #[arg(long, default_value_t = 80)]
    len_max: usize,
    /// Probability that a content token is preceded by a marker
    #[arg(long, default_value_t = 0.5)]
    marker_rate: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output file, relative to the output directory
    #[arg(long, default_value = "corpus.jsonl")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ModelArgs {
    #[arg(long, default_value = "PRE")]
    mode: LengthControlMode,
    #[arg(long, default_value_t = 64)]
    vocab_size: usize,
    #[arg(long, default_value_t = 64)]
    d_model: usize,
    #[arg(long, default_value_t = 4)]
    n_heads: usize,
    #[arg(long, default_value_t = 2)]
    enc_layers: usize,
    #[arg(long, default_value_t = 2)]
    dec_layers: usize,
    #[arg(long, default_value_t = 128)]
    d_ff: usize,
    #[arg(long, default_value_t = 1024)]
    max_positions: usize,
    /// Frequency scale of the progress signal [default: d_model / 2]
    #[arg(long)]
    signal_scale: Option<f64>,
    #[arg(long, default_value_t = 1.0)]
    laam_boost: f64,
}

impl ModelArgs {
    fn config(&self) -> Result<ModelConfig> {
        let mut cfg = ModelConfig::new(self.d_model, self.vocab_size, self.mode)?;
        cfg.n_heads = self.n_heads;
        cfg.n_enc_layers = self.enc_layers;
        cfg.n_dec_layers = self.dec_layers;
        cfg.d_ff = self.d_ff;
        cfg.max_positions = self.max_positions;
        cfg.laam_boost = self.laam_boost;
        if let Some(m) = self.signal_scale {
            cfg.signal = cfg.signal.with_scale(m)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Training corpus (JSON lines)
    #[arg(long)]
    corpus: PathBuf,
    /// Run directory name under <out>/runs
    #[arg(long, default_value = "run")]
    name: String,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 4000)]
    steps: usize,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    #[arg(long, default_value_t = 3e-4)]
    lr: f64,
    #[arg(long, default_value_t = 0.9)]
    beta1: f64,
    #[arg(long, default_value_t = 0.99)]
    beta2: f64,
    #[arg(long, default_value_t = 1e-8)]
    eps: f64,
    #[arg(long, default_value_t = 0.01)]
    weight_decay: f64,
    /// Global gradient-norm ceiling, or "none"
    #[arg(long, default_value = "1.0")]
    grad_clip: String,
    /// Jitter progress ratios during training
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    noise: bool,
    /// Write an extra checkpoint every N steps (0 = final only)
    #[arg(long, default_value_t = 0)]
    checkpoint_every: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Comma-separated source token ids
    #[arg(long)]
    source: String,
    /// Requested output length
    #[arg(long)]
    length: usize,
    /// Sample at this temperature instead of greedy decoding [default: greedy]
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Evaluation corpus (JSON lines)
    #[arg(long)]
    corpus: PathBuf,
    /// Report directory name under <out>/eval
    #[arg(long, default_value = "eval")]
    name: String,
    #[arg(long, default_value = "prefix_copy")]
    task: Task,
    /// reference or random_ood:LO-HI
    #[arg(long, default_value = "reference")]
    policy: LengthPolicy,
    #[arg(long, default_value_t = 10)]
    bucket_width: usize,
    #[arg(long, default_value_t = 20)]
    outlier_threshold: usize,
    #[arg(long, default_value_t = 5)]
    histogram_width: usize,
    /// records.jsonl of another run to t-test against [default: none]
    #[arg(long)]
    baseline: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SignalKind {
    Pre,
    Rpe,
    Impatience,
}

#[derive(Args, Debug)]
struct SignalArgs {
    #[arg(long, value_enum, default_value = "pre")]
    dump: SignalKind,
    #[arg(long, default_value_t = 8)]
    d_model: usize,
    /// Number of ratio samples in [0, 1]
    #[arg(long, default_value_t = 11)]
    grid: usize,
    /// Frequency scale [default: d_model / 2]
    #[arg(long)]
    scale: Option<f64>,
    /// Target length for the countdown dump
    #[arg(long, default_value_t = 10)]
    length: usize,
    /// Comma-separated pulsations for the impatience dump
    #[arg(long, default_value = "1,2,4,8")]
    omegas: String,
}

#[derive(Args, Debug)]
struct ExperimentArgs {
    /// Plan file of key=value lines; absent keys use the built-in plan [default: built-in]
    #[arg(long)]
    plan: Option<PathBuf>,
    /// Built-in plan to start from: copy or extract [default: from plan, else copy]
    #[arg(long)]
    preset: Option<String>,
    /// Overrides the plan's name [default: from plan]
    #[arg(long)]
    name: Option<String>,
    /// Overrides the plan's seed [default: from plan]
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the plan's training steps [default: from plan]
    #[arg(long)]
    steps: Option<usize>,
    /// Overrides the plan's worker count [default: from plan]
    #[arg(long)]
    workers: Option<usize>,
}

fn out_root() -> PathBuf {
    std::env::var_os(OUT_ENV).map_or_else(|| PathBuf::from(DEFAULT_OUT), PathBuf::from)
}

/// Stages `rel` under `<root>/tmp`, runs `write`, then moves it into place.
fn staged<F>(root: &Path, rel: &Path, write: F) -> Result<PathBuf>
where
    F: FnOnce(&Path) -> Result<()>,
{
    let tmp = root.join("tmp").join(rel);
    let dst = root.join(rel);
    if tmp.exists() {
        remove(&tmp)?;
    }
    if let Some(p) = tmp.parent() {
        fs::create_dir_all(p)?;
    }
    write(&tmp)?;
    if let Some(p) = dst.parent() {
        fs::create_dir_all(p)?;
    }
    if dst.exists() {
        remove(&dst)?;
    }
    fs::rename(&tmp, &dst).with_context(|| format!("moving {} into place", dst.display()))?;
    let _ = fs::remove_dir(root.join("tmp"));
    Ok(dst)
}

fn remove(p: &Path) -> io::Result<()> {
    if p.is_dir() {
        fs::remove_dir_all(p)
    } else {
        fs::remove_file(p)
    }
}

fn gen(a: GenArgs) -> Result<()> {
    let spec = CorpusSpec {
        task: a.task,
        vocab_size: a.vocab_size,
        n_examples: a.n,
        source_len: (a.source_min, a.source_max),
        lengths: LengthDistribution {
            mean: a.len_mean,
            sd: a.len_sd,
            min: a.len_min,
            max: a.len_max,
        },
        marker_rate: a.marker_rate,
        rng_seed: derive_seed(a.seed, "corpus"),
    };
    spec.validate().context("gen")?;
    let examples = spec.generate().context("gen")?;
    let dst = staged(&out_root(), &a.out, |p| {
        write_corpus(&examples, &spec.header(), BufWriter::new(fs::File::create(p)?))?;
        Ok(())
    })
    .context("gen")?;
    eprintln!("wrote {} examples to {}", examples.len(), dst.display());
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let model_cfg = a.model.config().context("train")?;
    let tc = TrainConfig {
        batch_size: a.batch_size,
        steps: a.steps,
        lr: a.lr,
        adamw: AdamWConfig {
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
            weight_decay: a.weight_decay,
        },
        grad_clip_norm: parse_clip(&a.grad_clip).context("train")?,
        noise_enabled: a.noise,
        rng_seed: derive_seed(a.seed, "train"),
        checkpoint_every: a.checkpoint_every,
        workers: a.workers,
    };
    tc.validate().context("train")?;
    let examples = load_corpus(&a.corpus).with_context(|| format!("train: reading {}", a.corpus.display()))?;
    let every = (tc.steps / 20).max(1);
    let rel = Path::new("runs").join(&a.name);
    let dst = staged(&out_root(), &rel, |dir| {
        train_run(&model_cfg, derive_seed(a.seed, "init"), &examples, &tc, dir, &mut |r| {
            if r.step % every == 0 || r.step == tc.steps {
                eprintln!("step {} loss {:.4} ({:.0}s)", r.step, r.loss, r.seconds);
            }
        })?;
        Ok(())
    })
    .context("train")?;
    eprintln!("wrote {}", dst.display());
    Ok(())
}

fn load_model(path: &Path) -> Result<Model32> {
    let f = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(read_checkpoint(io::BufReader::new(f))?)
}

fn parse_ids(s: &str) -> Result<Vec<u32>> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| t.parse().with_context(|| format!("bad token id {t:?}")))
        .collect()
}

fn generate(a: GenerateArgs) -> Result<()> {
    let model = load_model(&a.checkpoint).context("generate")?;
    let source = parse_ids(&a.source).context("generate")?;
    let policy = match a.temperature {
        Some(temperature) => DecodePolicy::Sample {
            temperature,
            seed: derive_seed(a.seed, "generate"),
        },
        None => DecodePolicy::Greedy,
    };
    let g = model.generate(&source, a.length, policy).context("generate")?;
    let ids: Vec<String> = g.tokens.iter().map(u32::to_string).collect();
    println!("{}", ids.join(","));
    eprintln!("length {} (requested {}){}", g.tokens.len(), a.length, if g.cap_hit { ", cap hit" } else { "" });
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let model = load_model(&a.checkpoint).context("eval")?;
    let examples = load_corpus(&a.corpus).with_context(|| format!("eval: reading {}", a.corpus.display()))?;
    let policy = match a.policy {
        LengthPolicy::RandomOod { lo, hi, .. } => LengthPolicy::RandomOod {
            lo,
            hi,
            seed: derive_seed(a.seed, "eval"),
        },
        p => p,
    };
    let cfg = EvalConfig {
        bucket_width: a.bucket_width,
        outlier_threshold: a.outlier_threshold,
        histogram_width: a.histogram_width,
        workers: a.workers,
        ..EvalConfig::new(a.task, policy)
    };
    let records = evaluate(&model, &examples, &cfg).context("eval")?;
    let baseline = match &a.baseline {
        Some(p) => Some(read_records(&fs::read_to_string(p)?).with_context(|| format!("eval: reading {}", p.display()))?),
        None => None,
    };
    let rel = Path::new("eval").join(&a.name);
    let mut summary = None;
    let dst = staged(&out_root(), &rel, |dir| {
        summary = Some(write_reports(dir, &records, &cfg)?);
        if let Some(b) = &baseline {
            let t = write_ttest(dir, "model", &records, "baseline", b)?;
            eprintln!("t {:.4} p {:.4} (df {})", t.t, t.p, t.df);
        }
        Ok(())
    })
    .context("eval")?;
    let s = summary.expect("set by the staged writer");
    eprintln!(
        "{}: mae {:.3} sd {:.3} outlier rate {:.3} rouge-1 {:.3} ({})",
        policy,
        s.mae.mae,
        s.mae.sd,
        s.outlier_rate,
        s.rouge.r1,
        dst.display()
    );
    Ok(())
}

fn signal(a: SignalArgs) -> Result<()> {
    let mut cfg = SignalConfig::new(a.d_model).context("signal")?;
    if let Some(m) = a.scale {
        cfg = cfg.with_scale(m).context("signal")?;
    }
    let stdout = io::stdout();
    let mut out = BufWriter::new(stdout.lock());
    match a.dump {
        SignalKind::Pre => dump_pre(&cfg, a.grid, &mut out)?,
        SignalKind::Rpe => dump_rpe(&cfg, a.length, &mut out)?,
        SignalKind::Impatience => {
            let omegas: Vec<f64> = a
                .omegas
                .split(',')
                .map(|s| s.trim().parse().with_context(|| format!("bad pulsation {s:?}")))
                .collect::<Result<_>>()?;
            dump_impatience(&omegas, a.grid, &mut out)?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Plan text with `overrides` replacing any lines for the same keys.
fn merge_plan(text: &str, overrides: &[(&str, String)]) -> String {
    let mut out: String = text
        .lines()
        .filter(|line| {
            let key = line.split_once('=').map_or("", |(k, _)| k.trim());
            !overrides.iter().any(|(k, _)| *k == key)
        })
        .flat_map(|l| [l, "\n"])
        .collect();
    for (k, v) in overrides {
        out += &format!("{k}={v}\n");
    }
    out
}

fn experiment(a: ExperimentArgs) -> Result<()> {
    let text = match &a.plan {
        Some(p) => fs::read_to_string(p).with_context(|| format!("plan: reading {}", p.display()))?,
        None => String::new(),
    };
    let mut overrides = Vec::new();
    if let Some(v) = a.preset {
        overrides.push(("preset", v));
    }
    if let Some(v) = a.name {
        overrides.push(("name", v));
    }
    if let Some(v) = a.seed {
        overrides.push(("seed", v.to_string()));
    }
    if let Some(v) = a.steps {
        overrides.push(("steps", v.to_string()));
    }
    if let Some(v) = a.workers {
        overrides.push(("workers", v.to_string()));
    }
    let plan = ExperimentPlan::parse(&merge_plan(&text, &overrides)).context("plan")?;
    let outcome = run_experiment(&plan, &out_root(), &mut |line| eprintln!("{line}"))?;
    print!("{}", fs::read_to_string(outcome.dir.join("comparison.csv"))?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen(a) => gen(a),
        Command::Train(a) => train(a),
        Command::Generate(a) => generate(a),
        Command::Eval(a) => eval(a),
        Command::Signal(a) => signal(a),
        Command::Experiment(a) => experiment(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
