use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::signal::{progress_ratio, ProgressRatio, SignalConfig};

/// How the decoder learns the requested length.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LengthControlMode {
    /// No length information.
    None,
    /// Countdown embedding added to the decoder input.
    Rpe,
    /// Progress-ratio embedding added to the decoder input.
    Pre,
    /// Top-k boost in the last cross-attention (simplified LAAM).
    Laam,
}

impl LengthControlMode {
    pub const ALL: [LengthControlMode; 4] = [Self::None, Self::Rpe, Self::Pre, Self::Laam];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::None => "NONE",
            Self::Rpe => "RPE",
            Self::Pre => "PRE",
            Self::Laam => "LAAM",
        }
    }
}

impl fmt::Display for LengthControlMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LengthControlMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "NONE" => Ok(Self::None),
            "RPE" => Ok(Self::Rpe),
            "PRE" => Ok(Self::Pre),
            "LAAM" => Ok(Self::Laam),
            _ => Err(Error::Config(format!("unknown length-control mode {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub mode: LengthControlMode,
    pub signal: SignalConfig,
    pub laam_boost: f64,
    pub ln_eps: f64,
}

impl ModelConfig {
    /// A config with the conventional defaults: 4 heads, 2 + 2 layers,
    /// `d_ff = 4 d_model`, `M = d_model / 2`.
    pub fn new(d_model: usize, vocab_size: usize, mode: LengthControlMode) -> Result<Self> {
        let cfg = ModelConfig {
            d_model,
            n_heads: 4,
            n_enc_layers: 2,
            n_dec_layers: 2,
            d_ff: 4 * d_model,
            vocab_size,
            max_positions: 512,
            mode,
            signal: SignalConfig::new(d_model)?,
            laam_boost: 1.0,
            ln_eps: crate::compute::LN_EPS,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.signal.validate()?;
        let bad = |msg: String| Err(Error::Config(msg));
        if self.signal.d_model != self.d_model {
            return bad(format!(
                "signal width {} differs from d_model {}",
                self.signal.d_model, self.d_model
            ));
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad(format!("{} heads do not divide d_model {}", self.n_heads, self.d_model));
        }
        if self.n_enc_layers == 0 || self.n_dec_layers == 0 {
            return bad("encoder and decoder need at least one layer".into());
        }
        if self.d_ff == 0 || self.max_positions == 0 {
            return bad("d_ff and max_positions must be positive".into());
        }
        if self.vocab_size <= crate::tokens::FIRST_CONTENT as usize {
            return bad(format!("vocab_size {} leaves no content ids", self.vocab_size));
        }
        if !(self.laam_boost >= 0.0) || !(self.ln_eps > 0.0) {
            return bad("laam_boost must be >= 0 and ln_eps > 0".into());
        }
        Ok(())
    }
}

/// Everything the decoder needs to know about step `t` of a length-`l` target.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecoderStepContext {
    pub step: usize,
    pub target_len: usize,
    pub ratio: ProgressRatio,
    pub remaining: usize,
}

impl DecoderStepContext {
    pub fn new(step: usize, target_len: usize) -> Result<Self> {
        Ok(DecoderStepContext {
            step,
            target_len,
            ratio: progress_ratio(step, target_len)?,
            remaining: target_len.saturating_sub(step),
        })
    }

    /// Same step with a perturbed ratio (training-time jitter).
    pub fn with_ratio(mut self, ratio: ProgressRatio) -> Self {
        self.ratio = ratio;
        self
    }
}
