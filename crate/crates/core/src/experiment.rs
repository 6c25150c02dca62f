//! One-command pipeline: corpus, training per mode, evaluation per policy,
//! and a combined comparison table.
//!
//! Output layout under `<out>/<name>/`:
//!
//! ```text
//! plan.txt
//! corpus/{train,valid,test,ood}.jsonl
//! runs/<MODE>/{model.ckpt,loss.csv}
//! eval/<MODE>/<POLICY>/{mae_summary,buckets,rouge,length_density}.csv records.jsonl
//! eval/ttest/<POLICY>/<A>_vs_<B>/ttest.csv
//! comparison.csv
//! ```
//!
//! Everything is first written to `<out>/tmp/<name>/` and renamed into
//! place once every stage has succeeded.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::corpus::{read_corpus, write_corpus, CorpusSpec, LengthDistribution, Task, TrainingExample};
use crate::error::{Error, Result};
use crate::evaluation::{
    evaluate, write_reports, write_ttest, EvalConfig, GenerationRecord, LengthPolicy, Summary, TTest,
};
use crate::kv::KeyValues;
use crate::model::{write_checkpoint, LengthControlMode, Model, ModelConfig};
use crate::seed::derive_seed;
use crate::training::{loss_log_header, loss_log_line, train, LossRecord, TrainConfig};

const KEYS: &[&str] = &[
    "preset",
    "name",
    "seed",
    "task",
    "vocab_size",
    "n_train",
    "n_valid",
    "n_test",
    "source_min",
    "source_max",
    "len_mean",
    "len_sd",
    "len_min",
    "len_max",
    "marker_rate",
    "modes",
    "d_model",
    "n_heads",
    "n_enc_layers",
    "n_dec_layers",
    "d_ff",
    "max_positions",
    "laam_boost",
    "signal_scale",
    "steps",
    "batch_size",
    "lr",
    "weight_decay",
    "grad_clip",
    "noise",
    "policies",
    "eval_split",
    "ood_n",
    "ood_source_min",
    "ood_source_max",
    "bucket_width",
    "outlier_threshold",
    "workers",
];

/// Which corpus split the REFERENCE policy is scored on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalSplit {
    Valid,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentPlan {
    pub name: String,
    pub seed: u64,
    pub corpus: CorpusSpec,
    pub n_train: usize,
    pub n_valid: usize,
    pub n_test: usize,
    pub modes: Vec<LengthControlMode>,
    /// Template; `mode` is overwritten per run.
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub policies: Vec<LengthPolicy>,
    pub eval_split: EvalSplit,
    pub ood_n: usize,
    pub ood_source: (usize, usize),
    pub bucket_width: usize,
    pub outlier_threshold: usize,
    pub workers: usize,
}

impl ExperimentPlan {
    /// The prefix-copy comparison at desk scale.
    pub fn default_copy(seed: u64) -> Result<Self> {
        let mut model = ModelConfig::new(64, 64, LengthControlMode::Pre)?;
        model.d_ff = 128;
        model.max_positions = 1024;
        let corpus = CorpusSpec::prefix_copy(64, 6000, derive_seed(seed, "corpus"));
        Ok(ExperimentPlan {
            name: "copy".into(),
            seed,
            corpus,
            n_train: 5000,
            n_valid: 500,
            n_test: 500,
            modes: vec![LengthControlMode::Pre, LengthControlMode::None, LengthControlMode::Rpe],
            model,
            train: TrainConfig {
                lr: 1.5e-3,
                batch_size: 12,
                rng_seed: derive_seed(seed, "train"),
                ..TrainConfig::default()
            },
            policies: vec![
                LengthPolicy::Reference,
                LengthPolicy::RandomOod {
                    lo: 100,
                    hi: 320,
                    seed: derive_seed(seed, "eval"),
                },
            ],
            eval_split: EvalSplit::Test,
            ood_n: 300,
            ood_source: (330, 340),
            bucket_width: 25,
            outlier_threshold: 5,
            workers: 1,
        })
    }

    /// The marked-extraction comparison: PRE against NONE on in-distribution
    /// lengths, scored mainly by ROUGE.
    pub fn default_extract(seed: u64) -> Result<Self> {
        let mut p = ExperimentPlan::default_copy(seed)?;
        p.name = "extract".into();
        p.corpus.task = Task::MarkedExtract;
        p.corpus.source_len = (72, 80);
        p.corpus.lengths = LengthDistribution {
            mean: 12.0,
            sd: 3.0,
            min: 4,
            max: 20,
        };
        p.train.steps = 8000;
        p.modes = vec![LengthControlMode::Pre, LengthControlMode::None];
        p.policies = vec![LengthPolicy::Reference];
        p.bucket_width = 10;
        Ok(p)
    }

    /// Built-in plan by name: `copy` or `extract`.
    pub fn preset(name: &str, seed: u64) -> Result<Self> {
        match name {
            "copy" => ExperimentPlan::default_copy(seed),
            "extract" => ExperimentPlan::default_extract(seed),
            _ => Err(Error::Config(format!("unknown preset {name:?}; expected copy or extract"))),
        }
    }

    /// Parses a `key=value` plan. Absent keys keep the values of the
    /// `preset` (default `copy`).
    pub fn parse(text: &str) -> Result<Self> {
        let kv = KeyValues::parse(text, 1)?;
        kv.only(KEYS)?;
        let seed = kv.get("seed")?.unwrap_or(0);
        let mut p = ExperimentPlan::preset(kv.raw("preset").unwrap_or("copy"), seed)?;
        if let Some(v) = kv.get("name")? {
            p.name = v;
        }
        if let Some(v) = kv.get::<Task>("task")? {
            p.corpus.task = v;
        }
        if let Some(v) = kv.get("vocab_size")? {
            p.corpus.vocab_size = v;
            p.model.vocab_size = v;
        }
        set(&kv, "n_train", &mut p.n_train)?;
        set(&kv, "n_valid", &mut p.n_valid)?;
        set(&kv, "n_test", &mut p.n_test)?;
        set(&kv, "source_min", &mut p.corpus.source_len.0)?;
        set(&kv, "source_max", &mut p.corpus.source_len.1)?;
        let l: &mut LengthDistribution = &mut p.corpus.lengths;
        set(&kv, "len_mean", &mut l.mean)?;
        set(&kv, "len_sd", &mut l.sd)?;
        set(&kv, "len_min", &mut l.min)?;
        set(&kv, "len_max", &mut l.max)?;
        set(&kv, "marker_rate", &mut p.corpus.marker_rate)?;
        if let Some(v) = kv.raw("modes") {
            p.modes = split_list(v).map(str::parse).collect::<Result<_>>()?;
        }
        let d_model = kv.get("d_model")?.unwrap_or(p.model.d_model);
        if d_model != p.model.d_model {
            let template = p.model.clone();
            p.model = ModelConfig::new(d_model, template.vocab_size, template.mode)?;
            p.model.max_positions = template.max_positions;
            p.model.d_ff = 2 * d_model;
        }
        set(&kv, "n_heads", &mut p.model.n_heads)?;
        set(&kv, "n_enc_layers", &mut p.model.n_enc_layers)?;
        set(&kv, "n_dec_layers", &mut p.model.n_dec_layers)?;
        set(&kv, "d_ff", &mut p.model.d_ff)?;
        set(&kv, "max_positions", &mut p.model.max_positions)?;
        set(&kv, "laam_boost", &mut p.model.laam_boost)?;
        if let Some(m) = kv.get("signal_scale")? {
            p.model.signal = p.model.signal.clone().with_scale(m)?;
        }
        set(&kv, "steps", &mut p.train.steps)?;
        set(&kv, "batch_size", &mut p.train.batch_size)?;
        set(&kv, "lr", &mut p.train.lr)?;
        set(&kv, "weight_decay", &mut p.train.adamw.weight_decay)?;
        if let Some(v) = kv.raw("grad_clip") {
            p.train.grad_clip_norm = parse_clip(v)?;
        }
        set(&kv, "noise", &mut p.train.noise_enabled)?;
        if let Some(v) = kv.raw("policies") {
            let eval_seed = derive_seed(seed, "eval");
            p.policies = split_list(v)
                .map(|s| {
                    s.parse::<LengthPolicy>().map(|pol| match pol {
                        LengthPolicy::RandomOod { lo, hi, .. } => LengthPolicy::RandomOod { lo, hi, seed: eval_seed },
                        r => r,
                    })
                })
                .collect::<Result<_>>()?;
        }
        if let Some(v) = kv.raw("eval_split") {
            p.eval_split = match v.to_ascii_lowercase().as_str() {
                "valid" => EvalSplit::Valid,
                "test" => EvalSplit::Test,
                _ => return Err(Error::Config(format!("eval_split must be valid or test, got {v:?}"))),
            };
        }
        set(&kv, "ood_n", &mut p.ood_n)?;
        set(&kv, "ood_source_min", &mut p.ood_source.0)?;
        set(&kv, "ood_source_max", &mut p.ood_source.1)?;
        set(&kv, "bucket_width", &mut p.bucket_width)?;
        set(&kv, "outlier_threshold", &mut p.outlier_threshold)?;
        set(&kv, "workers", &mut p.workers)?;
        p.train.workers = p.workers;
        p.corpus.n_examples = p.n_train + p.n_valid + p.n_test;
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.modes.is_empty() || self.policies.is_empty() {
            return Err(Error::Config("a plan needs at least one mode and one policy".into()));
        }
        for (i, m) in self.modes.iter().enumerate() {
            if self.modes[..i].contains(m) {
                return Err(Error::Config(format!("mode {m} listed twice")));
            }
        }
        if self.n_train == 0 || self.eval_examples_len() == 0 {
            return Err(Error::Config("training and evaluation splits must be non-empty".into()));
        }
        if self.corpus.vocab_size != self.model.vocab_size {
            return Err(Error::VocabMismatch {
                model: self.model.vocab_size,
                corpus: self.corpus.vocab_size,
            });
        }
        for p in &self.policies {
            if let LengthPolicy::RandomOod { hi, .. } = *p {
                if self.ood_n == 0 || self.ood_source.0 > self.ood_source.1 {
                    return Err(Error::Config("RANDOM_OOD needs ood_n > 0 and a valid ood source range".into()));
                }
                if self.corpus.task == Task::PrefixCopy && hi > self.ood_source.0 {
                    return Err(Error::Config(format!(
                        "RANDOM_OOD upper length {hi} exceeds ood_source_min {}",
                        self.ood_source.0
                    )));
                }
            }
        }
        Ok(())
    }

    fn eval_examples_len(&self) -> usize {
        match self.eval_split {
            EvalSplit::Valid => self.n_valid,
            EvalSplit::Test => self.n_test,
        }
    }

    pub fn model_config(&self, mode: LengthControlMode) -> ModelConfig {
        ModelConfig {
            mode,
            ..self.model.clone()
        }
    }

    /// Long-source corpus used by RANDOM_OOD.
    pub fn ood_spec(&self) -> CorpusSpec {
        CorpusSpec {
            n_examples: self.ood_n,
            source_len: self.ood_source,
            rng_seed: derive_seed(self.seed, "ood"),
            ..self.corpus.clone()
        }
    }

    /// Plan text that parses back to `self`.
    pub fn to_text(&self) -> String {
        let c = &self.corpus;
        let modes: Vec<&str> = self.modes.iter().map(|m| m.as_str()).collect();
        let policies: Vec<String> = self
            .policies
            .iter()
            .map(|p| match p {
                LengthPolicy::Reference => "reference".to_string(),
                LengthPolicy::RandomOod { lo, hi, .. } => format!("random_ood:{lo}-{hi}"),
            })
            .collect();
        let clip = self.train.grad_clip_norm.map_or("none".into(), |c| format!("{c:?}"));
        format!(
            "name={}\nseed={}\ntask={}\nvocab_size={}\nn_train={}\nn_valid={}\nn_test={}\n\
             source_min={}\nsource_max={}\nlen_mean={:?}\nlen_sd={:?}\nlen_min={}\nlen_max={}\nmarker_rate={:?}\n\
             modes={}\nd_model={}\nn_heads={}\nn_enc_layers={}\nn_dec_layers={}\nd_ff={}\nmax_positions={}\n\
             laam_boost={:?}\nsignal_scale={:?}\nsteps={}\nbatch_size={}\nlr={:?}\nweight_decay={:?}\ngrad_clip={clip}\n\
             noise={}\npolicies={}\neval_split={}\nood_n={}\nood_source_min={}\nood_source_max={}\n\
             bucket_width={}\noutlier_threshold={}\nworkers={}\n",
            self.name,
            self.seed,
            c.task,
            c.vocab_size,
            self.n_train,
            self.n_valid,
            self.n_test,
            c.source_len.0,
            c.source_len.1,
            c.lengths.mean,
            c.lengths.sd,
            c.lengths.min,
            c.lengths.max,
            c.marker_rate,
            modes.join(","),
            self.model.d_model,
            self.model.n_heads,
            self.model.n_enc_layers,
            self.model.n_dec_layers,
            self.model.d_ff,
            self.model.max_positions,
            self.model.laam_boost,
            self.model.signal.scale,
            self.train.steps,
            self.train.batch_size,
            self.train.lr,
            self.train.adamw.weight_decay,
            self.train.noise_enabled,
            policies.join(","),
            match self.eval_split {
                EvalSplit::Valid => "valid",
                EvalSplit::Test => "test",
            },
            self.ood_n,
            self.ood_source.0,
            self.ood_source.1,
            self.bucket_width,
            self.outlier_threshold,
            self.workers,
        )
    }
}

fn set<V: std::str::FromStr>(kv: &KeyValues, key: &str, slot: &mut V) -> Result<()>
where
    V::Err: std::fmt::Display,
{
    if let Some(v) = kv.get(key)? {
        *slot = v;
    }
    Ok(())
}

fn split_list(v: &str) -> impl Iterator<Item = &str> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty())
}

/// `none` or a positive norm.
pub fn parse_clip(v: &str) -> Result<Option<f64>> {
    if v.eq_ignore_ascii_case("none") {
        return Ok(None);
    }
    v.parse()
        .map(Some)
        .map_err(|_| Error::Config(format!("grad_clip must be a number or none, got {v:?}")))
}

/// One row of `comparison.csv`.
#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonRow {
    pub mode: LengthControlMode,
    pub policy: &'static str,
    pub summary: Summary,
}

#[derive(Debug)]
pub struct ExperimentOutcome {
    /// Final output directory.
    pub dir: PathBuf,
    pub rows: Vec<ComparisonRow>,
    pub records: BTreeMap<(LengthControlMode, &'static str), Vec<GenerationRecord>>,
    pub losses: BTreeMap<LengthControlMode, Vec<LossRecord>>,
    pub ttests: Vec<(&'static str, LengthControlMode, LengthControlMode, TTest)>,
    /// Wall-clock seconds per stage, keyed like the log lines
    /// (`train PRE`, `eval PRE RANDOM_OOD`).
    pub seconds: BTreeMap<String, f64>,
}

impl ExperimentOutcome {
    pub fn records(&self, mode: LengthControlMode, policy: &str) -> Option<&[GenerationRecord]> {
        self.records
            .iter()
            .find(|((m, p), _)| *m == mode && *p == policy)
            .map(|(_, r)| r.as_slice())
    }

    pub fn row(&self, mode: LengthControlMode, policy: &str) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.mode == mode && r.policy == policy)
    }
}

fn save_corpus(path: &Path, examples: &[TrainingExample], header: &str) -> Result<()> {
    write_corpus(examples, header, BufWriter::new(fs::File::create(path)?))
}

pub fn load_corpus(path: &Path) -> Result<Vec<TrainingExample>> {
    read_corpus(BufReader::new(fs::File::open(path)?))
}

/// Trains one model and writes its checkpoint and loss log into `dir`.
pub fn train_run(
    model_cfg: &ModelConfig,
    init_seed: u64,
    examples: &[TrainingExample],
    tc: &TrainConfig,
    dir: &Path,
    progress: &mut dyn FnMut(&LossRecord),
) -> Result<(Model<f32>, Vec<LossRecord>)> {
    fs::create_dir_all(dir)?;
    let mut model = Model::<f32>::new(model_cfg.clone(), init_seed)?;
    let mut log = BufWriter::new(fs::File::create(dir.join("loss.csv"))?);
    log.write_all(loss_log_header(tc).as_bytes())?;
    let losses = train(&mut model, examples, tc, &mut |r, m| {
        log.write_all(loss_log_line(r).as_bytes())?;
        if tc.checkpoint_every > 0 && r.step % tc.checkpoint_every == 0 && r.step != tc.steps {
            let path = dir.join(format!("step_{:06}.ckpt", r.step));
            write_checkpoint(m, BufWriter::new(fs::File::create(path)?))?;
        }
        progress(r);
        Ok(())
    })?;
    log.flush()?;
    write_checkpoint(&model, BufWriter::new(fs::File::create(dir.join("model.ckpt"))?))?;
    Ok((model, losses))
}

/// Runs the whole plan. `log` receives one line per stage event.
pub fn run_experiment(plan: &ExperimentPlan, out_root: &Path, log: &mut dyn FnMut(&str)) -> Result<ExperimentOutcome> {
    plan.validate().map_err(|e| e.in_stage("plan"))?;
    let tmp = out_root.join("tmp").join(&plan.name);
    if tmp.exists() {
        fs::remove_dir_all(&tmp)?;
    }
    fs::create_dir_all(&tmp)?;
    fs::write(tmp.join("plan.txt"), plan.to_text())?;

    log(&format!("gen: {} examples ({})", plan.corpus.n_examples, plan.corpus.task));
    let corpus_dir = tmp.join("corpus");
    fs::create_dir_all(&corpus_dir)?;
    let all = plan.corpus.generate().map_err(|e| e.in_stage("gen"))?;
    let (train_set, rest) = all.split_at(plan.n_train);
    let (valid_set, test_set) = rest.split_at(plan.n_valid);
    let header = plan.corpus.header();
    save_corpus(&corpus_dir.join("train.jsonl"), train_set, &header)?;
    save_corpus(&corpus_dir.join("valid.jsonl"), valid_set, &header)?;
    save_corpus(&corpus_dir.join("test.jsonl"), test_set, &header)?;
    let needs_ood = plan.policies.iter().any(|p| matches!(p, LengthPolicy::RandomOod { .. }));
    let ood = if needs_ood {
        let spec = plan.ood_spec();
        let ood = spec.generate().map_err(|e| e.in_stage("gen ood"))?;
        save_corpus(&corpus_dir.join("ood.jsonl"), &ood, &spec.header())?;
        ood
    } else {
        Vec::new()
    };
    let eval_set = match plan.eval_split {
        EvalSplit::Valid => valid_set,
        EvalSplit::Test => test_set,
    };

    let init_seed = derive_seed(plan.seed, "init");
    let mut rows = Vec::new();
    let mut records = BTreeMap::new();
    let mut losses = BTreeMap::new();
    let mut seconds = BTreeMap::new();
    for &mode in &plan.modes {
        let stage = format!("train {mode}");
        log(&format!("{stage}: {} steps", plan.train.steps));
        let run_dir = tmp.join("runs").join(mode.as_str());
        let every = (plan.train.steps / 10).max(1);
        let clock = Instant::now();
        let (model, loss) = train_run(&plan.model_config(mode), init_seed, train_set, &plan.train, &run_dir, &mut |r| {
            if r.step % every == 0 {
                log(&format!("{stage}: step {} loss {:.4} ({:.0}s)", r.step, r.loss, r.seconds));
            }
        })
        .map_err(|e| e.in_stage(stage.clone()))?;
        seconds.insert(stage, clock.elapsed().as_secs_f64());
        losses.insert(mode, loss);
        for &policy in &plan.policies {
            let stage = format!("eval {mode} {policy}");
            let examples = match policy {
                LengthPolicy::Reference => eval_set,
                LengthPolicy::RandomOod { .. } => &ood[..],
            };
            let cfg = EvalConfig {
                bucket_width: plan.bucket_width,
                outlier_threshold: plan.outlier_threshold,
                workers: plan.workers,
                ..EvalConfig::new(plan.corpus.task, policy)
            };
            let clock = Instant::now();
            let recs = evaluate(&model, examples, &cfg).map_err(|e| e.in_stage(stage.clone()))?;
            let dir = tmp.join("eval").join(mode.as_str()).join(policy.name());
            let summary = write_reports(&dir, &recs, &cfg).map_err(|e| e.in_stage(stage.clone()))?;
            seconds.insert(stage.clone(), clock.elapsed().as_secs_f64());
            log(&format!(
                "{stage}: mae {:.3} sd {:.3} outliers {:.3} cap hits {}",
                summary.mae.mae, summary.mae.sd, summary.outlier_rate, summary.cap_hits
            ));
            rows.push(ComparisonRow {
                mode,
                policy: policy.name(),
                summary,
            });
            records.insert((mode, policy.name()), recs);
        }
    }

    let mut ttests = Vec::new();
    if let Some(&first) = plan.modes.first() {
        for &policy in &plan.policies {
            for &other in &plan.modes[1..] {
                let a = &records[&(first, policy.name())];
                let b = &records[&(other, policy.name())];
                let dir = tmp
                    .join("eval")
                    .join("ttest")
                    .join(policy.name())
                    .join(format!("{first}_vs_{other}"));
                let t = write_ttest(&dir, first.as_str(), a, other.as_str(), b)
                    .map_err(|e| e.in_stage(format!("ttest {policy}")))?;
                ttests.push((policy.name(), first, other, t));
            }
        }
    }

    let mut csv = String::from("mode,policy,mae,sd,outlier_rate,r1,r2,rL\n");
    for r in &rows {
        let s = &r.summary;
        csv += &format!(
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            r.mode, r.policy, s.mae.mae, s.mae.sd, s.outlier_rate, s.rouge.r1, s.rouge.r2, s.rouge.rl
        );
    }
    fs::write(tmp.join("comparison.csv"), csv)?;

    let dir = out_root.join(&plan.name);
    if dir.exists() {
        fs::remove_dir_all(&dir)?;
    }
    fs::rename(&tmp, &dir)?;
    let _ = fs::remove_dir(out_root.join("tmp"));
    log(&format!("done: {}", dir.display()));
    Ok(ExperimentOutcome {
        dir,
        rows,
        records,
        losses,
        ttests,
        seconds,
    })
}

impl Default for ExperimentPlan {
    fn default() -> Self {
        ExperimentPlan::default_copy(0).expect("default plan is valid")
    }
}
