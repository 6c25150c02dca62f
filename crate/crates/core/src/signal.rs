//! Conditioning signals for the decoder input.
//!
//! Four families live here, all evaluated in `f64`:
//!
//! * [`sinusoidal_pe`]: the fixed absolute positional embedding `P_t`.
//! * [`rpe_embedding`]: the same sinusoid driven by the countdown `l - i`.
//! * [`pre_embedding`]: the progress-ratio embedding `xi(r)`, a bank of
//!   sin/cos pairs whose pulsation `r * M` grows as decoding approaches the
//!   requested length.
//! * [`noisy_ratio`]: the training-time Gaussian jitter on ratios.
//!
//! # Component indexing
//!
//! The progress-ratio embedding is defined over 1-based dimensions `j` with
//! sine on odd `j` and cosine on even `j`, both at argument
//! `2 * r * M * floor(j / 2) / d_model`. Storage is 0-based with `a = j - 1`,
//! so even `a` holds a sine and odd `a` a cosine.

use std::f64::consts::PI;
use std::io::Write;
use std::ops::Deref;

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::seed;

/// Base of the geometric frequency ladder of the classic sinusoidal encoding.
pub const SINUSOID_BASE: f64 = 10_000.0;

#[derive(Clone, Debug, PartialEq)]
pub struct SignalConfig {
    pub d_model: usize,
    /// Frequency scale `M`; the pulsation at ratio `r` is `r * M`.
    pub scale: f64,
    pub noise_enabled: bool,
    pub rng_seed: u64,
}

impl SignalConfig {
    /// Config with the default scale `M = d_model / 2`, noise disabled.
    pub fn new(d_model: usize) -> Result<Self> {
        let cfg = SignalConfig {
            d_model,
            scale: d_model as f64 / 2.0,
            noise_enabled: false,
            rng_seed: 0,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_scale(mut self, scale: f64) -> Result<Self> {
        self.scale = scale;
        self.validate()?;
        Ok(self)
    }

    pub fn with_noise(mut self, enabled: bool, rng_seed: u64) -> Self {
        self.noise_enabled = enabled;
        self.rng_seed = rng_seed;
        self
    }

    /// Largest admissible `M`: `d_model * pi / 2`.
    pub fn nyquist_ceiling(&self) -> f64 {
        self.d_model as f64 * PI / 2.0
    }

    /// Sampling rate of the dimension grid, `F_s = d_model / 2`.
    pub fn sampling_rate(&self) -> f64 {
        self.d_model as f64 / 2.0
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model < 2 || self.d_model % 2 != 0 {
            return Err(Error::Config(format!(
                "d_model must be even and at least 2, got {}",
                self.d_model
            )));
        }
        if !(self.scale >= 0.0) || !self.scale.is_finite() {
            return Err(Error::Config(format!(
                "frequency scale must be finite and non-negative, got {}",
                self.scale
            )));
        }
        if self.scale > self.nyquist_ceiling() {
            return Err(Error::Nyquist {
                scale: self.scale,
                ceiling: self.nyquist_ceiling(),
                d_model: self.d_model,
            });
        }
        Ok(())
    }
}

/// Fraction of the requested length already generated, clipped to `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct ProgressRatio(f64);

impl ProgressRatio {
    /// Clips into `[0, 1]`; NaN maps to 0.
    pub fn new(value: f64) -> Self {
        if value.is_nan() {
            return ProgressRatio(0.0);
        }
        ProgressRatio(value.clamp(0.0, 1.0))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// A `d_model`-long conditioning vector in `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingVector(pub Vec<f64>);

impl EmbeddingVector {
    pub fn zeros(d_model: usize) -> Self {
        EmbeddingVector(vec![0.0; d_model])
    }

    pub fn max_abs_diff(&self, other: &EmbeddingVector) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl Deref for EmbeddingVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// `min(t / l, 1)`. Exactly 1 once `t >= l`.
pub fn progress_ratio(t: usize, l: usize) -> Result<ProgressRatio> {
    if l == 0 {
        return Err(Error::InvalidTargetLength(l));
    }
    if t >= l {
        return Ok(ProgressRatio(1.0));
    }
    Ok(ProgressRatio(t as f64 / l as f64))
}

/// Progress-ratio embedding `xi(r)`.
pub fn pre_embedding(r: ProgressRatio, cfg: &SignalConfig) -> EmbeddingVector {
    let d = cfg.d_model;
    let omega = r.value() * cfg.scale;
    let components = (0..d)
        .map(|a| {
            let j = a + 1;
            let arg = 2.0 * omega * (j / 2) as f64 / d as f64;
            if j % 2 == 0 {
                arg.cos()
            } else {
                arg.sin()
            }
        })
        .collect();
    EmbeddingVector(components)
}

fn sinusoid(value: f64, d_model: usize) -> EmbeddingVector {
    let mut out = vec![0.0; d_model];
    for k in 0..d_model / 2 {
        let angle = value / SINUSOID_BASE.powf(2.0 * k as f64 / d_model as f64);
        out[2 * k] = angle.sin();
        out[2 * k + 1] = angle.cos();
    }
    EmbeddingVector(out)
}

/// Fixed absolute positional embedding for position `pos`.
pub fn sinusoidal_pe(pos: usize, cfg: &SignalConfig) -> EmbeddingVector {
    sinusoid(pos as f64, cfg.d_model)
}

/// Countdown embedding for step `i` of a length-`l` target. The countdown
/// saturates at zero once `i >= l`.
pub fn rpe_embedding(i: usize, l: usize, cfg: &SignalConfig) -> EmbeddingVector {
    sinusoid(l.saturating_sub(i) as f64, cfg.d_model)
}

/// Source of standard-normal draws for ratio jitter.
pub trait NoiseSource {
    fn sample(&mut self) -> f64;
}

/// Seeded `N(0, 1)` sampler. Owned per worker.
#[derive(Clone, Debug)]
pub struct GaussianNoise {
    rng: ChaCha8Rng,
}

impl GaussianNoise {
    pub fn new(seed: u64) -> Self {
        GaussianNoise {
            rng: seed::rng(seed),
        }
    }
}

impl NoiseSource for GaussianNoise {
    fn sample(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }
}

/// Always returns the same draw; `FixedNoise(0.0)` disables jitter.
#[derive(Clone, Copy, Debug)]
pub struct FixedNoise(pub f64);

impl NoiseSource for FixedNoise {
    fn sample(&mut self) -> f64 {
        self.0
    }
}

/// `clip(r + 2 * delta / d_model, 0, 1)` with `delta` drawn from `noise`.
/// Returns `r` untouched (and draws nothing) when noise is disabled.
pub fn noisy_ratio(
    r: ProgressRatio,
    cfg: &SignalConfig,
    noise: &mut dyn NoiseSource,
) -> ProgressRatio {
    if !cfg.noise_enabled {
        return r;
    }
    let delta = noise.sample();
    ProgressRatio::new(r.value() + 2.0 * delta / cfg.d_model as f64)
}

/// The periodic impatience signal `(cos(omega x), sin(omega x))`.
pub fn impatience_signal(omega: f64, x: f64) -> (f64, f64) {
    let arg = omega * x;
    (arg.cos(), arg.sin())
}

/// Highest per-unit-ratio frequency present in `xi`, reached at `r = 1` on
/// the last dimension: `M / (2 pi)`. Fails when it would exceed half the
/// sampling rate.
pub fn max_signal_frequency(cfg: &SignalConfig) -> Result<f64> {
    if cfg.d_model < 2 || cfg.d_model % 2 != 0 {
        return Err(Error::Config(format!(
            "d_model must be even and at least 2, got {}",
            cfg.d_model
        )));
    }
    let ceiling = cfg.nyquist_ceiling();
    if cfg.scale > ceiling {
        return Err(Error::Nyquist {
            scale: cfg.scale,
            ceiling,
            d_model: cfg.d_model,
        });
    }
    // M / (2 pi) written relative to the ceiling, where it equals F_s / 2,
    // so the boundary case lands on d_model / 4 without rounding.
    Ok(cfg.scale / ceiling * (cfg.sampling_rate() / 2.0))
}

fn ratio_grid(points: usize) -> Vec<f64> {
    match points {
        0 => Vec::new(),
        1 => vec![0.0],
        n => (0..n).map(|i| i as f64 / (n - 1) as f64).collect(),
    }
}

/// CSV `ratio,dim,value` sampling `xi` on `points` evenly spaced ratios.
pub fn dump_pre<W: Write>(cfg: &SignalConfig, points: usize, out: &mut W) -> Result<()> {
    writeln!(out, "ratio,dim,value")?;
    for r in ratio_grid(points) {
        let e = pre_embedding(ProgressRatio::new(r), cfg);
        for (dim, v) in e.iter().enumerate() {
            writeln!(out, "{r},{dim},{v}")?;
        }
    }
    Ok(())
}

/// CSV `remaining,dim,value` of the countdown embedding for a length-`l` target.
pub fn dump_rpe<W: Write>(cfg: &SignalConfig, l: usize, out: &mut W) -> Result<()> {
    writeln!(out, "remaining,dim,value")?;
    for i in 0..=l {
        let e = rpe_embedding(i, l, cfg);
        for (dim, v) in e.iter().enumerate() {
            writeln!(out, "{},{dim},{v}", l - i)?;
        }
    }
    Ok(())
}

/// CSV `omega,x,cos,sin` of impatience curves, one per pulsation.
pub fn dump_impatience<W: Write>(omegas: &[f64], points: usize, out: &mut W) -> Result<()> {
    writeln!(out, "omega,x,cos,sin")?;
    for &omega in omegas {
        for x in ratio_grid(points) {
            let (c, s) = impatience_signal(omega, x);
            writeln!(out, "{omega},{x},{c},{s}")?;
        }
    }
    Ok(())
}
