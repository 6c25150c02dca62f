//! Teacher-forced maximum-likelihood training with AdamW.

use std::time::Instant;

use rand::seq::SliceRandom;

use crate::compute::Tape;
use crate::corpus::TrainingExample;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::scalar::Scalar;
use crate::seed;
use crate::signal::{FixedNoise, GaussianNoise, NoiseSource};

#[derive(Clone, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: usize,
    pub lr: f64,
    pub adamw: AdamWConfig,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub grad_clip_norm: Option<f64>,
    pub noise_enabled: bool,
    pub rng_seed: u64,
    /// Checkpoint period in steps; `0` keeps only the final one.
    pub checkpoint_every: usize,
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 8,
            steps: 4000,
            lr: 3e-4,
            adamw: AdamWConfig::default(),
            grad_clip_norm: Some(1.0),
            noise_enabled: true,
            rng_seed: 0,
            checkpoint_every: 0,
            workers: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let a = &self.adamw;
        let ok = self.batch_size >= 1
            && self.lr > 0.0
            && (0.0..1.0).contains(&a.beta1)
            && (0.0..1.0).contains(&a.beta2)
            && a.eps > 0.0
            && a.weight_decay >= 0.0
            && self.grad_clip_norm.is_none_or(|c| c > 0.0)
            && self.workers >= 1;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid training config {self:?}")))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    /// Mean token cross-entropy over the batch.
    pub loss: f64,
    pub seconds: f64,
}

/// Where ratio jitter comes from during a batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum NoisePlan {
    Off,
    /// Independent Gaussian stream per batch slot.
    Seeded(u64),
    /// Every draw equals the given value.
    Fixed(f64),
}

impl NoisePlan {
    fn source(self, slot: usize) -> Option<Box<dyn NoiseSource>> {
        match self {
            NoisePlan::Off => None,
            NoisePlan::Seeded(s) => Some(Box::new(GaussianNoise::new(seed::derive_indexed(s, slot as u64)))),
            NoisePlan::Fixed(x) => Some(Box::new(FixedNoise(x))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct BatchLoss {
    /// Mean negative log-likelihood over all target tokens of the batch.
    pub loss: f64,
    pub tokens: usize,
    /// Gradient of `loss`, one vector per parameter tensor.
    pub grads: Vec<Vec<f64>>,
}

fn example_grads<T: Scalar>(
    model: &Model<T>,
    ex: &TrainingExample,
    mut noise: Option<Box<dyn NoiseSource>>,
    scale: f64,
) -> Result<(f64, Vec<Option<Vec<T>>>)> {
    let mut tape = Tape::new();
    let b = model.bind(&mut tape);
    let loss = model.example_loss(&mut tape, &b, &ex.source, &ex.target, noise.as_mut().map(|n| n.as_mut() as &mut dyn NoiseSource), scale)?;
    let value = tape.value(loss)[0].f64();
    let mut g = tape.backward(loss)?;
    Ok((value, b.0.iter().map(|&v| g.take(v)).collect()))
}

/// Loss and parameter gradients over `batch`, summed in example order so
/// the result does not depend on `workers`.
pub fn batch_loss<T: Scalar>(
    model: &Model<T>,
    batch: &[&TrainingExample],
    noise: NoisePlan,
    workers: usize,
) -> Result<BatchLoss> {
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let tokens: usize = batch.iter().map(|ex| ex.target.len()).sum();
    let scale = 1.0 / tokens as f64;
    let run = |slot: usize| example_grads(model, batch[slot], noise.source(slot), scale);
    let per: Vec<Result<(f64, Vec<Option<Vec<T>>>)>> = if workers <= 1 || batch.len() == 1 {
        (0..batch.len()).map(run).collect()
    } else {
        let chunk = batch.len().div_ceil(workers);
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..batch.len())
                .collect::<Vec<_>>()
                .chunks(chunk)
                .map(|slots| {
                    let slots = slots.to_vec();
                    let run = &run;
                    s.spawn(move || slots.into_iter().map(run).collect::<Vec<_>>())
                })
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("training worker panicked"))
                .collect()
        })
    };
    let mut loss = 0.0;
    let mut grads: Vec<Vec<f64>> = model.params().tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
    for r in per {
        let (l, g) = r?;
        loss += l;
        for (acc, g) in grads.iter_mut().zip(g) {
            if let Some(g) = g {
                for (a, v) in acc.iter_mut().zip(g) {
                    *a += v.f64();
                }
            }
        }
    }
    Ok(BatchLoss { loss, tokens, grads })
}

pub fn global_norm(grads: &[Vec<f64>]) -> f64 {
    grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt()
}

/// Scales `grads` so their global norm is at most `max_norm`; returns the
/// norm before scaling.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

/// First and second moment estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamW {
    pub fn new<T: Scalar>(model: &Model<T>) -> Self {
        let zeros: Vec<Vec<f64>> = model.params().tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
        AdamW {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    /// One decoupled-weight-decay update. A non-finite gradient leaves
    /// parameters and state untouched.
    pub fn step<T: Scalar>(&mut self, model: &mut Model<T>, grads: &[Vec<f64>], lr: f64, cfg: &AdamWConfig) -> Result<()> {
        let names = model.params().names().to_vec();
        let tensors = model.params_mut().tensors_mut();
        if grads.len() != tensors.len() || self.m.len() != tensors.len() {
            return Err(Error::ShapeMismatch {
                op: "adamw",
                left: vec![tensors.len()],
                right: vec![grads.len()],
            });
        }
        for (name, (g, p)) in names.iter().zip(grads.iter().zip(tensors.iter())) {
            if g.len() != p.numel() {
                return Err(Error::ShapeMismatch {
                    op: "adamw",
                    left: p.shape().to_vec(),
                    right: vec![g.len()],
                });
            }
            if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient(format!("{name}[{i}] = {}", g[i])));
            }
        }
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let c2 = 1.0 - cfg.beta2.powi(self.t as i32);
        for (((p, g), m), v) in tensors.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                let mhat = *m / c1;
                let vhat = *v / c2;
                let x = p.f64();
                *p = T::of(x * (1.0 - lr * cfg.weight_decay) - lr * mhat / (vhat.sqrt() + cfg.eps));
            }
        }
        Ok(())
    }
}

/// Batches of example indices: a fresh seeded shuffle every epoch.
pub struct BatchSampler {
    n: usize,
    batch: usize,
    order: Vec<usize>,
    pos: usize,
    rng: rand_chacha::ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(n: usize, batch: usize, seed: u64) -> Result<Self> {
        if n == 0 {
            return Err(Error::Empty("training set"));
        }
        Ok(BatchSampler {
            n,
            batch,
            order: Vec::new(),
            pos: n,
            rng: seed::rng(seed),
        })
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.batch);
        while out.len() < self.batch {
            if self.pos == self.n {
                self.order = (0..self.n).collect();
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Trains `model` in place. `on_step` sees every record and the updated
/// model, and may abort by returning an error.
pub fn train<T: Scalar>(
    model: &mut Model<T>,
    examples: &[TrainingExample],
    tc: &TrainConfig,
    on_step: &mut dyn FnMut(&LossRecord, &Model<T>) -> Result<()>,
) -> Result<Vec<LossRecord>> {
    tc.validate()?;
    let vocab = model.config().vocab_size;
    if let Some(ex) = examples.iter().find(|ex| ex.max_token() as usize >= vocab) {
        return Err(Error::VocabMismatch {
            model: vocab,
            corpus: ex.max_token() as usize,
        });
    }
    model.signal_mut().noise_enabled = tc.noise_enabled;
    let mut sampler = BatchSampler::new(examples.len(), tc.batch_size, seed::derive_seed(tc.rng_seed, "batches"))?;
    let noise_base = seed::derive_seed(tc.rng_seed, "noise");
    let mut opt = AdamW::new(model);
    let start = Instant::now();
    let mut log = Vec::with_capacity(tc.steps);
    for step in 1..=tc.steps {
        let batch: Vec<&TrainingExample> = sampler.next_batch().into_iter().map(|i| &examples[i]).collect();
        let noise = if tc.noise_enabled {
            NoisePlan::Seeded(seed::derive_indexed(noise_base, step as u64))
        } else {
            NoisePlan::Off
        };
        let mut bl = batch_loss(model, &batch, noise, tc.workers)?;
        if let Some(c) = tc.grad_clip_norm {
            clip_global_norm(&mut bl.grads, c);
        }
        opt.step(model, &bl.grads, tc.lr, &tc.adamw)
            .map_err(|e| e.in_stage(format!("step {step}")))?;
        let rec = LossRecord {
            step,
            loss: bl.loss,
            seconds: start.elapsed().as_secs_f64(),
        };
        on_step(&rec, model)?;
        log.push(rec);
    }
    Ok(log)
}

/// First line of a loss log.
pub fn loss_log_header(tc: &TrainConfig) -> String {
    let clip = tc.grad_clip_norm.map_or("none".to_string(), |c| format!("{c}"));
    format!(
        "# grad_clip_norm={clip} lr={} batch_size={} noise={} seed={}\nstep,loss,seconds\n",
        tc.lr, tc.batch_size, tc.noise_enabled, tc.rng_seed
    )
}

pub fn loss_log_line(r: &LossRecord) -> String {
    format!("{},{:.6},{:.3}\n", r.step, r.loss, r.seconds)
}

/// Trailing moving average of `values` over `window` entries.
pub fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    if window == 0 || values.len() < window {
        return Vec::new();
    }
    let mut out = Vec::with_capacity(values.len() - window + 1);
    let mut sum: f64 = values[..window].iter().sum();
    out.push(sum / window as f64);
    for i in window..values.len() {
        sum += values[i] - values[i - window];
        out.push(sum / window as f64);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{LengthControlMode, ModelConfig};
    use crate::tokens::EOS;

    fn model(vocab: usize, mode: LengthControlMode) -> Model<f64> {
        let mut cfg = ModelConfig::new(16, vocab, mode).unwrap();
        cfg.d_ff = 32;
        cfg.n_enc_layers = 1;
        cfg.n_dec_layers = 1;
        Model::new(cfg, 3).unwrap()
    }

    fn ex(source: &[u32], content: &[u32]) -> TrainingExample {
        TrainingExample::new(source.to_vec(), content.to_vec()).unwrap()
    }

    #[test]
    fn initial_loss_is_near_uniform() {
        let m = model(8, LengthControlMode::Pre);
        let e = ex(&[4, 5, 6, 7, 5], &[4, 5, 6]);
        let bl = batch_loss(&m, &[&e], NoisePlan::Off, 1).unwrap();
        assert!((bl.loss - 8f64.ln()).abs() < 0.1, "{}", bl.loss);
        assert_eq!(bl.tokens, 4);
    }

    #[test]
    fn duplicated_batch_has_the_same_loss() {
        let m = model(10, LengthControlMode::Rpe);
        let e = ex(&[4, 5, 6, 7], &[4, 5]);
        let one = batch_loss(&m, &[&e], NoisePlan::Off, 1).unwrap();
        let two = batch_loss(&m, &[&e, &e], NoisePlan::Off, 1).unwrap();
        assert!((one.loss - two.loss).abs() < 1e-12);
        assert!(matches!(batch_loss(&m, &[], NoisePlan::Off, 1), Err(Error::Empty(_))));
    }

    #[test]
    fn workers_do_not_change_the_result() {
        let m = model(10, LengthControlMode::Pre);
        let a = ex(&[4, 5, 6, 7], &[4, 5]);
        let b = ex(&[9, 8, 7], &[9, 8, 7]);
        let c = ex(&[6, 6, 5, 4, 4], &[6]);
        let batch = [&a, &b, &c];
        let one = batch_loss(&m, &batch, NoisePlan::Seeded(5), 1).unwrap();
        let three = batch_loss(&m, &batch, NoisePlan::Seeded(5), 3).unwrap();
        assert_eq!(one.loss.to_bits(), three.loss.to_bits());
        assert_eq!(one.grads, three.grads);
    }

    #[test]
    fn zero_jitter_equals_noise_off() {
        let mut m = model(10, LengthControlMode::Pre);
        m.signal_mut().noise_enabled = true;
        let e = ex(&[4, 5, 6, 7], &[4, 5, 6]);
        let off = batch_loss(&m, &[&e], NoisePlan::Off, 1).unwrap();
        let zero = batch_loss(&m, &[&e], NoisePlan::Fixed(0.0), 1).unwrap();
        assert_eq!(off.loss.to_bits(), zero.loss.to_bits());
        assert_eq!(off.grads, zero.grads);
        let jitter = batch_loss(&m, &[&e], NoisePlan::Fixed(1.0), 1).unwrap();
        assert_ne!(off.loss, jitter.loss);
    }

    #[test]
    fn adamw_examples() {
        let mut m = model(10, LengthControlMode::None);
        let before = m.params().clone();
        let zeros: Vec<Vec<f64>> = m.params().tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
        let no_decay = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        let mut opt = AdamW::new(&m);
        opt.step(&mut m, &zeros, 1e-3, &no_decay).unwrap();
        assert_eq!(m.params(), &before);

        let decay = AdamWConfig {
            weight_decay: 0.1,
            ..AdamWConfig::default()
        };
        opt.step(&mut m, &zeros, 1e-2, &decay).unwrap();
        let p0 = before.tensor(0).data()[0];
        assert!((m.params().tensor(0).data()[0] - p0 * (1.0 - 1e-3)).abs() < 1e-15);

        let mut m = model(10, LengthControlMode::None);
        let start = m.params().tensor(0).data()[0];
        let ones: Vec<Vec<f64>> = m.params().tensors().iter().map(|t| vec![1.0; t.numel()]).collect();
        AdamW::new(&m).step(&mut m, &ones, 1e-3, &no_decay).unwrap();
        let moved = m.params().tensor(0).data()[0] - start;
        assert!((moved + 1e-3 / (1.0 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut m = model(10, LengthControlMode::None);
        let before = m.params().clone();
        let mut g: Vec<Vec<f64>> = m.params().tensors().iter().map(|t| vec![0.5; t.numel()]).collect();
        g[3][1] = f64::NAN;
        let mut opt = AdamW::new(&m);
        let err = opt.step(&mut m, &g, 1e-3, &AdamWConfig::default()).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient(ref s) if s.contains(&before.names()[3])));
        assert_eq!(m.params(), &before);
        assert_eq!(opt.t, 0);
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut g = vec![vec![3.0, 0.0], vec![4.0]];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((global_norm(&g) - 1.0).abs() < 1e-15);
        let mut small = vec![vec![0.1]];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small, vec![vec![0.1]]);
    }

    #[test]
    fn sampler_covers_each_epoch() {
        let mut s = BatchSampler::new(10, 4, 1).unwrap();
        let mut seen: Vec<usize> = (0..5).flat_map(|_| s.next_batch()).collect();
        seen.truncate(20);
        let mut first: Vec<usize> = seen[..10].to_vec();
        first.sort();
        assert_eq!(first, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn training_is_deterministic_and_learns() {
        let data: Vec<TrainingExample> = (0..6u32).map(|i| ex(&[4 + i, 5, 6 + i, 7], &[4 + i, 5])).collect();
        let tc = TrainConfig {
            batch_size: 3,
            steps: 30,
            lr: 1e-2,
            rng_seed: 2,
            ..TrainConfig::default()
        };
        let run = || {
            let mut m = model(12, LengthControlMode::Pre);
            let log = train(&mut m, &data, &tc, &mut |_, _| Ok(())).unwrap();
            (m, log)
        };
        let (a, la) = run();
        let (b, lb) = run();
        assert_eq!(a.params(), b.params());
        assert_eq!(
            la.iter().map(|r| r.loss.to_bits()).collect::<Vec<_>>(),
            lb.iter().map(|r| r.loss.to_bits()).collect::<Vec<_>>()
        );
        assert!(la.last().unwrap().loss < la[0].loss * 0.5);
        assert!(a.config().signal.noise_enabled);
        assert_eq!(data[0].target.last(), Some(&EOS));
    }

    #[test]
    fn moving_average_windows() {
        assert_eq!(moving_average(&[1.0, 2.0, 3.0, 4.0], 2), vec![1.5, 2.5, 3.5]);
        assert!(moving_average(&[1.0], 2).is_empty());
    }
}
