//! End-to-end acceptance suite. Prints one `criterion N: PASS|FAIL` line per
//! criterion and fails if any criterion fails.
//!
//! Criteria 4 to 8 train five models on one core and take roughly an hour.
//! Artifacts are kept under `$LENCTL_OUT` when it is set.

use std::io::Cursor;
use std::path::PathBuf;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use lenctl::corpus::{read_corpus, write_corpus, CorpusSpec, TrainingExample};
use lenctl::evaluation::{
    bucket_report, length_histogram, length_mae, paired_t_test, rouge, GenerationRecord, MaeSummary,
};
use lenctl::experiment::{run_experiment, ExperimentOutcome, ExperimentPlan};
use lenctl::model::{read_checkpoint, write_checkpoint};
use lenctl::signal::{max_signal_frequency, pre_embedding, ProgressRatio, SignalConfig};
use lenctl::training::{batch_loss, moving_average, NoisePlan};
use lenctl::{LengthControlMode, Model32, Model64, ModelConfig};

struct Verdict {
    pass: bool,
    detail: String,
}

impl Verdict {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Verdict {
            pass,
            detail: detail.into(),
        }
    }
}

fn timed(budget_s: f64, f: impl FnOnce() -> Verdict) -> Verdict {
    let start = Instant::now();
    let v = f();
    let secs = start.elapsed().as_secs_f64();
    let in_time = secs < budget_s;
    Verdict::new(
        v.pass && in_time,
        format!("{} [{secs:.1}s, budget {budget_s:.0}s{}]", v.detail, if in_time { "" } else { " EXCEEDED" }),
    )
}

fn signal_exactness() -> Verdict {
    let mut fails = Vec::new();
    for d in [2usize, 4, 8, 16, 64, 128] {
        let cfg = SignalConfig::new(d).unwrap();
        let zero = pre_embedding(ProgressRatio::new(0.0), &cfg);
        let alternating: Vec<f64> = (0..d).map(|a| (a % 2) as f64).collect();
        if zero.0 != alternating {
            fails.push(format!("d={d}: xi(0) is not alternating 0/1"));
        }
        let mut worst = 0.0f64;
        for k in 0..1000 {
            let r = k as f64 / 999.0;
            let e = pre_embedding(ProgressRatio::new(r), &cfg);
            if e.0[0] != 0.0 {
                fails.push(format!("d={d}: dimension 1 is {} at r={r}", e.0[0]));
                break;
            }
            for (a, &v) in e.0.iter().enumerate() {
                let j = a + 1;
                let arg = r * (j / 2) as f64;
                let simple = if j % 2 == 1 { arg.sin() } else { arg.cos() };
                worst = worst.max((simple - v).abs());
            }
        }
        if worst >= 1e-12 {
            fails.push(format!("d={d}: simplified form differs by {worst:e}"));
        }
    }
    let detail = if fails.is_empty() {
        "xi(0) alternates 0/1, dimension 1 vanishes, simplified form within 1e-12".to_string()
    } else {
        fails.join("; ")
    };
    Verdict::new(fails.is_empty(), detail)
}

fn nyquist() -> Verdict {
    let mut fails = Vec::new();
    for d in [2usize, 8, 16, 64, 512] {
        let base = SignalConfig::new(d).unwrap();
        let fs = d as f64 / 2.0;
        let edge = base.clone().with_scale(d as f64 * std::f64::consts::PI / 2.0).unwrap();
        let at_edge = max_signal_frequency(&edge).unwrap();
        let at_default = max_signal_frequency(&base).unwrap();
        if at_edge != fs / 2.0 {
            fails.push(format!("d={d}: F_max {at_edge} at the boundary, expected {}", fs / 2.0));
        }
        if !(at_default < fs / 2.0) {
            fails.push(format!("d={d}: default F_max {at_default} not below {}", fs / 2.0));
        }
    }
    let detail = if fails.is_empty() {
        "F_max = F_s/2 exactly at M = d*pi/2, strictly below at M = d/2".to_string()
    } else {
        fails.join("; ")
    };
    Verdict::new(fails.is_empty(), detail)
}

/// Denominator floor for the relative error. Central differences on an O(1)
/// loss carry about 2e-11 of rounding noise, which swamps partials that are
/// exactly zero (key biases cancel in the softmax).
const REL_FLOOR: f64 = 1e-6;

fn gradient_fidelity() -> Verdict {
    let examples = [
        TrainingExample::new(vec![4, 9, 5, 10, 6, 7], vec![4, 9, 5, 10]).unwrap(),
        TrainingExample::new(vec![8, 5, 4, 7, 9], vec![8, 5]).unwrap(),
    ];
    let batch: Vec<&TrainingExample> = examples.iter().collect();
    let mut worst_overall = 0.0f64;
    let mut worst_abs = 0.0f64;
    let mut fails = Vec::new();
    let mut checked = 0usize;
    for mode in LengthControlMode::ALL {
        let mut cfg = ModelConfig::new(16, 11, mode).unwrap();
        cfg.n_enc_layers = 1;
        cfg.n_dec_layers = 1;
        cfg.laam_boost = 0.7;
        let mut model = Model64::new(cfg, 11).unwrap();
        let noise = if mode == LengthControlMode::Pre {
            NoisePlan::Fixed(0.4)
        } else {
            NoisePlan::Off
        };
        let analytic = batch_loss(&model, &batch, noise, 1).unwrap().grads;
        let h = 1e-5;
        let mut worst = 0.0f64;
        for t in 0..model.params().len() {
            for i in 0..model.params().tensor(t).numel() {
                let x0 = model.params().tensor(t).data()[i];
                model.params_mut().tensors_mut()[t].data_mut()[i] = x0 + h;
                let up = batch_loss(&model, &batch, noise, 1).unwrap().loss;
                model.params_mut().tensors_mut()[t].data_mut()[i] = x0 - h;
                let down = batch_loss(&model, &batch, noise, 1).unwrap().loss;
                model.params_mut().tensors_mut()[t].data_mut()[i] = x0;
                let numeric = (up - down) / (2.0 * h);
                let a = analytic[t][i];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
                worst_abs = worst_abs.max((a - numeric).abs());
                worst = worst.max(rel);
                checked += 1;
            }
        }
        if worst >= 1e-4 {
            fails.push(format!("{mode}: {worst:.2e}"));
        }
        worst_overall = worst_overall.max(worst);
    }
    let detail = format!(
        "{checked} partials over NONE/RPE/PRE/LAAM, max relative error {worst_overall:.2e}, max absolute {worst_abs:.1e}{}",
        if fails.is_empty() { String::new() } else { format!(" ({})", fails.join(", ")) }
    );
    Verdict::new(fails.is_empty(), detail)
}

fn rec(id: usize, l: usize, generated_len: usize) -> GenerationRecord {
    GenerationRecord {
        id,
        l,
        generated_len,
        cap_hit: false,
        generated: vec![5; generated_len],
        reference: vec![5; l],
    }
}

fn metric_suites() -> Verdict {
    let mut fails: Vec<String> = Vec::new();
    let mut check = |ok: bool, what: &str| {
        if !ok {
            fails.push(what.to_string());
        }
    };
    let close = |a: f64, b: f64| (a - b).abs() < 1e-12;

    let same = [1u32, 2, 3];
    let r = rouge(&same, &same);
    check((r.r1, r.r2, r.rl) == (1.0, 1.0, 1.0), "rouge identical");
    let r = rouge(&[1u32, 2, 3], &[4u32, 5, 6]);
    check((r.r1, r.r2, r.rl) == (0.0, 0.0, 0.0), "rouge disjoint");
    let r = rouge(&[1u32, 2, 3, 5], &[1u32, 2, 4, 5]);
    check(close(r.r1, 0.75) && close(r.r2, 1.0 / 3.0) && close(r.rl, 0.75), "rouge worked example");
    let r = rouge::<u32>(&[], &[1, 2]);
    check((r.r1, r.r2, r.rl) == (0.0, 0.0, 0.0), "rouge empty candidate");

    check(length_mae(&[rec(0, 7, 7), rec(1, 12, 12)]).unwrap() == MaeSummary { mae: 0.0, sd: 0.0 }, "mae exact");
    let m = length_mae(&[rec(0, 10, 11), rec(1, 10, 13)]).unwrap();
    check(close(m.mae, 2.0) && close(m.sd, 1.0), "mae errors {1,3}");
    check(length_mae(&[]).is_err(), "mae empty input");

    let b = bucket_report(&[rec(0, 305, 305)], 25, 20).unwrap();
    check(b.len() == 1 && (b[0].lo, b[0].hi) == (300, 325), "bucket boundary");
    let b = bucket_report(&[rec(0, 100, 130), rec(1, 105, 50)], 25, 20).unwrap();
    check(b[0].outlier_rate == 1.0, "bucket all outliers");
    let b = bucket_report(&[rec(0, 110, 110), rec(1, 111, 136), rec(2, 112, 117)], 25, 20).unwrap();
    check(close(b[0].outlier_rate, 1.0 / 3.0), "bucket mixed");

    let h = length_histogram(&[rec(0, 13, 13)], 5).unwrap();
    let nz: Vec<_> = h.iter().filter(|r| r.count > 0).collect();
    check(nz.len() == 2 && nz.iter().all(|r| r.lo == 10) && nz[0].series != nz[1].series, "histogram single record");
    let uniform: Vec<_> = (1..=100).map(|l| rec(l, l, l)).collect();
    let h = length_histogram(&uniform, 10).unwrap();
    for series in ["reference", "generated"] {
        let rows: Vec<_> = h.iter().filter(|r| r.series == series).collect();
        let total: f64 = rows.iter().map(|r| r.density * 10.0).sum();
        check((total - 1.0).abs() < 1e-9, "histogram normalization");
        let counts: Vec<usize> = rows.iter().map(|r| r.count).collect();
        check(counts[1..10].iter().all(|&c| c == 10) && counts[0] == 9 && counts[10] == 1, "histogram uniform");
    }

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..200 {
        let n = rng.random_range(0..40);
        let recs: Vec<_> = (0..n)
            .map(|i| {
                let l = rng.random_range(1..400);
                let g = rng.random_range(0..500);
                let mut r = rec(i, l, g);
                r.generated = (0..g).map(|_| rng.random_range(4..9)).collect();
                r.reference = (0..l).map(|_| rng.random_range(4..9)).collect();
                r
            })
            .collect();
        let w = rng.random_range(1..60);
        let total: usize = bucket_report(&recs, w, 20).unwrap().iter().map(|b| b.count).sum();
        check(total == recs.len(), "bucket partition");
        for r in &recs {
            let s = rouge(&r.generated, &r.reference);
            check([s.r1, s.r2, s.rl].iter().all(|v| (0.0..=1.0).contains(v)), "rouge bounds");
            if !r.generated.is_empty() {
                check(rouge(&r.generated, &r.generated).r1 == 1.0, "rouge self");
            }
        }
    }

    let mut cfg = ModelConfig::new(16, 11, LengthControlMode::Laam).unwrap();
    cfg.n_enc_layers = 1;
    cfg.n_dec_layers = 1;
    let model = Model32::new(cfg, 5).unwrap();
    let mut bytes = Vec::new();
    write_checkpoint(&model, &mut bytes).unwrap();
    let back: Model32 = read_checkpoint(Cursor::new(&bytes)).unwrap();
    let mut again = Vec::new();
    write_checkpoint(&back, &mut again).unwrap();
    check(bytes == again && back.config() == model.config(), "checkpoint round trip");
    let bits_equal = model
        .params()
        .tensors()
        .iter()
        .zip(back.params().tensors())
        .all(|(a, b)| a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    check(bits_equal, "checkpoint bit-exact");

    let spec = CorpusSpec::prefix_copy(64, 100, 17);
    let examples = spec.generate().unwrap();
    let mut text = Vec::new();
    write_corpus(&examples, &spec.header(), &mut text).unwrap();
    check(read_corpus(Cursor::new(text)).unwrap() == examples, "corpus round trip");

    let detail = if fails.is_empty() {
        "rouge, length_mae, bucket_report, length_histogram, checkpoint and corpus suites".to_string()
    } else {
        fails.join("; ")
    };
    Verdict::new(fails.is_empty(), detail)
}

fn out_root() -> (PathBuf, Option<tempfile::TempDir>) {
    match std::env::var_os("LENCTL_OUT") {
        Some(p) => (PathBuf::from(p), None),
        None => {
            let t = tempfile::tempdir().unwrap();
            (t.path().to_path_buf(), Some(t))
        }
    }
}

fn run(plan: &ExperimentPlan, root: &std::path::Path) -> Result<ExperimentOutcome, String> {
    run_experiment(plan, root, &mut |line| eprintln!("  {line}")).map_err(|e| e.to_string())
}

fn mean_last(losses: &[lenctl::training::LossRecord], n: usize) -> f64 {
    let tail = &losses[losses.len().saturating_sub(n)..];
    tail.iter().map(|r| r.loss).sum::<f64>() / tail.len() as f64
}

/// Criteria 4 to 7, all from the prefix-copy comparison.
fn copy_criteria(copy: &Result<ExperimentOutcome, String>, plan: &ExperimentPlan) -> [Verdict; 4] {
    let out = match copy {
        Ok(o) => o,
        Err(e) => {
            let v = || Verdict::new(false, format!("experiment failed: {e}"));
            return [v(), v(), v(), v()];
        }
    };
    use LengthControlMode::{None as Plain, Pre, Rpe};
    let pre_loss = &out.losses[&Pre];
    let final_loss = mean_last(pre_loss, 100);
    let train_pre = out.seconds["train PRE"];
    let c4 = Verdict::new(
        final_loss < 0.1 && pre_loss.len() <= 4000 && train_pre < 900.0,
        format!(
            "PRE final loss {final_loss:.4} (mean of last 100 steps, last step {:.4}) after {} steps in {train_pre:.0}s",
            pre_loss.last().unwrap().loss,
            pre_loss.len()
        ),
    );

    let pre = out.row(Pre, "REFERENCE").unwrap().summary.mae;
    let none = out.row(Plain, "REFERENCE").unwrap().summary.mae;
    let n_ref = out.records(Pre, "REFERENCE").unwrap().len();
    let c5 = Verdict::new(
        n_ref == 500 && pre.mae <= 1.0 && none.mae >= 5.0 * pre.mae,
        format!(
            "{n_ref} held-out: PRE mae {:.3} +/- {:.3}, NONE mae {:.3} +/- {:.3} (ratio {:.1})",
            pre.mae,
            pre.sd,
            none.mae,
            none.sd,
            none.mae / pre.mae.max(f64::MIN_POSITIVE)
        ),
    );

    let pre_ood = out.records(Pre, "RANDOM_OOD").unwrap();
    let rpe_ood = out.records(Rpe, "RANDOM_OOD").unwrap();
    let thr = plan.outlier_threshold;
    let pb = bucket_report(pre_ood, plan.bucket_width, thr).unwrap();
    let rb = bucket_report(rpe_ood, plan.bucket_width, thr).unwrap();
    let mut bucket_ok = pb.len() == rb.len();
    let mut cells = Vec::new();
    for (p, r) in pb.iter().zip(&rb) {
        bucket_ok &= p.lo == r.lo && p.outlier_rate < r.outlier_rate;
        cells.push(format!("[{},{}) {:.2}<{:.2}", p.lo, p.hi, p.outlier_rate, r.outlier_rate));
    }
    let pm = length_mae(pre_ood).unwrap().mae;
    let rm = length_mae(rpe_ood).unwrap().mae;
    let ood_secs = out.seconds["train PRE"]
        + out.seconds["train RPE"]
        + out.seconds["eval PRE RANDOM_OOD"]
        + out.seconds["eval RPE RANDOM_OOD"];
    let c6 = Verdict::new(
        bucket_ok && pm <= 0.5 * rm && ood_secs < 1800.0,
        format!(
            "OOD mae PRE {pm:.2} vs RPE {rm:.2}; outlier rates PRE<RPE: {}; train+eval {ood_secs:.0}s",
            cells.join(" ")
        ),
    );

    let errs = |r: &[GenerationRecord]| r.iter().map(|r| r.abs_error() as f64).collect::<Vec<_>>();
    let t = paired_t_test(&errs(pre_ood), &errs(rpe_ood)).unwrap();
    let worked = paired_t_test(&[2.0, 4.0, 6.0, 8.0], &[1.0, 2.0, 3.0, 4.0]).unwrap();
    let worked_ok = (worked.t - 3.873).abs() < 1e-3 && (worked.p - 0.0305).abs() < 1e-3;
    let c7 = Verdict::new(
        t.p < 0.01 && t.mean_diff < 0.0 && worked_ok,
        format!(
            "PRE-RPE paired t {:.3}, p {:.3e}, mean diff {:.2} over {} pairs; worked example t {:.4} p {:.4}",
            t.t,
            t.p,
            t.mean_diff,
            t.df + 1,
            worked.t,
            worked.p
        ),
    );
    [c4, c5, c6, c7]
}

/// Training-run properties checked alongside the numbered criteria.
fn run_properties(copy: &Result<ExperimentOutcome, String>) -> Vec<(&'static str, Verdict)> {
    let out = match copy {
        Ok(o) => o,
        Err(e) => return vec![("copy run", Verdict::new(false, format!("experiment failed: {e}")))],
    };
    let losses: Vec<f64> = out.losses[&LengthControlMode::Pre].iter().map(|r| r.loss).collect();
    let chance = 64f64.ln();
    let init = losses[0];
    let init_ok = (init - chance).abs() <= 0.05 * chance;

    let ma = moving_average(&losses, 200);
    let rises: Vec<(usize, f64)> = ma
        .windows(2)
        .enumerate()
        .filter(|(_, w)| w[1] > w[0])
        .map(|(i, w)| (i + 200, w[1] - w[0]))
        .collect();
    let worst_rise = rises.iter().map(|r| r.1).fold(0.0, f64::max);

    let at20: Vec<&GenerationRecord> = out
        .records(LengthControlMode::Pre, "REFERENCE")
        .unwrap()
        .iter()
        .filter(|r| r.l == 20)
        .collect();
    let off: Vec<usize> = at20.iter().filter(|r| r.abs_error() > 1).map(|r| r.generated_len).collect();
    vec![
        (
            "initial loss",
            Verdict::new(init_ok, format!("step 1 loss {init:.4} vs ln 64 = {chance:.4}")),
        ),
        (
            "loss trend",
            Verdict::new(
                rises.is_empty(),
                format!(
                    "200-step moving average rises at {} of {} steps (largest rise {worst_rise:.2e})",
                    rises.len(),
                    ma.len().saturating_sub(1)
                ),
            ),
        ),
        (
            "length 20",
            Verdict::new(
                !at20.is_empty() && off.is_empty(),
                format!("{} held-out targets of length 20, {} outside 20 +/- 1 {off:?}", at20.len(), off.len()),
            ),
        ),
    ]
}

fn quality_criterion(extract: &Result<ExperimentOutcome, String>) -> Verdict {
    let out = match extract {
        Ok(o) => o,
        Err(e) => return Verdict::new(false, format!("experiment failed: {e}")),
    };
    let pre = &out.row(LengthControlMode::Pre, "REFERENCE").unwrap().summary;
    let none = &out.row(LengthControlMode::None, "REFERENCE").unwrap().summary;
    let gap = (pre.rouge.r1 - none.rouge.r1) * 100.0;
    Verdict::new(
        gap.abs() <= 2.0,
        format!(
            "ROUGE-1 F1 PRE {:.2} vs NONE {:.2} (gap {gap:+.2} points); length mae PRE {:.2}, NONE {:.2}",
            pre.rouge.r1 * 100.0,
            none.rouge.r1 * 100.0,
            pre.mae.mae,
            none.mae.mae
        ),
    )
}

fn main() {
    let (root, _guard) = out_root();
    let mut verdicts: Vec<(usize, Verdict)> = Vec::new();
    let mut report = |n: usize, v: Verdict| {
        println!("criterion {n}: {} {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
        verdicts.push((n, v));
    };

    report(1, timed(1.0, signal_exactness));
    report(2, timed(1.0, nyquist));
    report(3, timed(120.0, gradient_fidelity));

    let copy_plan = ExperimentPlan::default_copy(0).unwrap();
    eprintln!("running the prefix-copy comparison");
    let copy = run(&copy_plan, &root);
    let [c4, c5, c6, c7] = copy_criteria(&copy, &copy_plan);
    let extras = run_properties(&copy);
    report(4, c4);
    report(5, c5);
    report(6, c6);
    report(7, c7);

    let extract_plan = ExperimentPlan::default_extract(0).unwrap();
    eprintln!("running the marked-extraction comparison");
    let extract = run(&extract_plan, &root);
    report(8, quality_criterion(&extract));

    report(9, timed(60.0, metric_suites));

    let mut extra_failed = Vec::new();
    for (what, v) in extras {
        println!("run property {what}: {} {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
        if !v.pass {
            extra_failed.push(what);
        }
    }

    for out in [&copy, &extract].into_iter().flatten() {
        println!("{}", std::fs::read_to_string(out.dir.join("comparison.csv")).unwrap_or_default());
    }
    let failed: Vec<usize> = verdicts.iter().filter(|(_, v)| !v.pass).map(|(n, _)| *n).collect();
    if !failed.is_empty() || !extra_failed.is_empty() {
        eprintln!("failing criteria: {failed:?}, failing run properties: {extra_failed:?}");
        drop(_guard);
        std::process::exit(1);
    }
}
