//! Toy pre-norm encoder-decoder transformer with pluggable length control.
//!
//! Decoder inputs are `E_t + (P_t + c_t)` where `E_t` is the learned token
//! embedding, `P_t` the fixed sinusoidal position and `c_t` the mode's
//! conditioning vector (zero for NONE and LAAM). LAAM instead reweights the
//! last decoder layer's cross-attention.
//!
//! Two forward paths exist: a teacher-forced pass on a [`Tape`](crate::compute::Tape) used for
//! training, and a cached step-by-step decoder used for generation. Tests
//! pin them to each other.

mod checkpoint;
mod config;
mod forward;
mod infer;
mod params;

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use config::{DecoderStepContext, LengthControlMode, ModelConfig};
pub use forward::{Bound, TeacherForcing};
pub use infer::{generation_cap, DecodePolicy, Generation, IncrementalDecoder};
pub use params::{Layout, ModelParameters};

use crate::compute::{kernels, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::signal::{pre_embedding, rpe_embedding, sinusoidal_pe, EmbeddingVector, SignalConfig};

#[derive(Clone, Debug)]
pub struct Model<T: Scalar> {
    cfg: ModelConfig,
    params: ModelParameters<T>,
    layout: Layout,
}

impl<T: Scalar> Model<T> {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let params = ModelParameters::init(&cfg, seed);
        let layout = params::layout(&cfg);
        Ok(Model { cfg, params, layout })
    }

    pub fn from_parameters(cfg: ModelConfig, params: ModelParameters<T>) -> Result<Self> {
        cfg.validate()?;
        let layout = params::layout(&cfg);
        let expected = ModelParameters::<T>::init(&cfg, 0);
        let same_shapes = expected.len() == params.len()
            && expected
                .iter()
                .zip(params.iter())
                .all(|((n1, t1), (n2, t2))| n1 == n2 && t1.shape() == t2.shape());
        if !same_shapes {
            return Err(Error::Checkpoint("parameter layout does not match config".into()));
        }
        Ok(Model { cfg, params, layout })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Mutable access is limited to fields that leave the layout intact.
    pub fn signal_mut(&mut self) -> &mut SignalConfig {
        &mut self.cfg.signal
    }

    pub fn params(&self) -> &ModelParameters<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ModelParameters<T> {
        &mut self.params
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            cfg: self.cfg.clone(),
            params: self.params.cast(),
            layout: self.layout.clone(),
        }
    }

    fn check_tokens(&self, ids: &[u32]) -> Result<()> {
        match ids.iter().find(|&&id| id as usize >= self.cfg.vocab_size) {
            Some(&id) => Err(Error::VocabMismatch {
                model: self.cfg.vocab_size,
                corpus: id as usize,
            }),
            None => Ok(()),
        }
    }

    /// `P_t + c_t` for decoder step `ctx`, in `f64`.
    pub fn decoder_signal(&self, ctx: &DecoderStepContext) -> EmbeddingVector {
        let pos = sinusoidal_pe(ctx.step, &self.cfg.signal);
        match conditioning(ctx, self.cfg.mode, &self.cfg.signal) {
            Some(c) => EmbeddingVector(pos.iter().zip(c.iter()).map(|(p, c)| p + c).collect()),
            None => pos,
        }
    }
}

/// The mode's additive conditioning vector, if any.
pub fn conditioning(
    ctx: &DecoderStepContext,
    mode: LengthControlMode,
    cfg: &SignalConfig,
) -> Option<EmbeddingVector> {
    match mode {
        LengthControlMode::Pre => Some(pre_embedding(ctx.ratio, cfg)),
        LengthControlMode::Rpe => Some(rpe_embedding(ctx.step, ctx.target_len, cfg)),
        LengthControlMode::None | LengthControlMode::Laam => None,
    }
}

/// Decoder input vector: token embedding plus position plus conditioning.
pub fn compose_decoder_input(
    token_emb: &EmbeddingVector,
    pos_emb: &EmbeddingVector,
    ctx: &DecoderStepContext,
    mode: LengthControlMode,
    cfg: &SignalConfig,
) -> Result<EmbeddingVector> {
    let d = cfg.d_model;
    if token_emb.len() != d || pos_emb.len() != d {
        return Err(Error::ShapeMismatch {
            op: "compose_decoder_input",
            left: vec![token_emb.len()],
            right: vec![pos_emb.len()],
        });
    }
    let out = match conditioning(ctx, mode, cfg) {
        Some(c) => token_emb
            .iter()
            .zip(pos_emb.iter())
            .zip(c.iter())
            .map(|((e, p), c)| e + (p + c))
            .collect(),
        None => token_emb.iter().zip(pos_emb.iter()).map(|(e, p)| e + p).collect(),
    };
    Ok(EmbeddingVector(out))
}

/// Boosts the `min(remaining, n)` largest weights of a `[1 x n]` attention
/// row by `1 + boost` and renormalises. Ties go to the lowest index.
pub fn laam_boost<T: Scalar>(attn: &Tensor<T>, remaining: usize, boost: f64) -> Result<Tensor<T>> {
    if attn.rows() != 1 {
        return Err(Error::ShapeMismatch {
            op: "laam_boost",
            left: attn.shape().to_vec(),
            right: vec![1, attn.cols()],
        });
    }
    let mut row: Vec<f64> = attn.data().iter().map(|v| v.f64()).collect();
    kernels::boost_top_k(&mut row, remaining, boost);
    Tensor::from_f64(attn.shape().to_vec(), &row)
}
