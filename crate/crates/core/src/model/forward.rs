//! Teacher-forced forward pass on a tape.

use super::params::{AttnIds, FfIds, LnIds};
use super::{DecoderStepContext, LengthControlMode, Model};
use crate::compute::{AttentionSpec, LaamSpec, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::signal::{noisy_ratio, sinusoidal_pe, NoiseSource};
use crate::tokens::BOS;

/// Parameter leaves of one tape, indexed like [`super::ModelParameters`].
pub struct Bound(pub Vec<Var>);

impl Bound {
    fn at(&self, id: usize) -> Var {
        self.0[id]
    }
}

/// Decoder inputs, targets and per-position signal rows for one example.
pub struct TeacherForcing<T> {
    pub inputs: Vec<u32>,
    pub targets: Vec<u32>,
    /// `[(l + 1) x d_model]`, rows are `P_t + c_t`.
    pub signal: Tensor<T>,
    pub remaining: Vec<usize>,
}

impl<T: Scalar> Model<T> {
    /// Adds every parameter to `tape` as a borrowed leaf.
    pub fn bind<'p>(&'p self, tape: &mut Tape<'p, T>) -> Bound {
        Bound(self.params.tensors().iter().map(|t| tape.leaf(t)).collect())
    }

    pub(super) fn check_length(&self, len: usize) -> Result<()> {
        if len > self.cfg.max_positions {
            return Err(Error::SequenceTooLong {
                len,
                max: self.cfg.max_positions,
            });
        }
        Ok(())
    }

    /// Decoder-side tensors for teacher forcing on `target` (which ends in
    /// the end token). With `noise`, PRE ratios are jittered per position.
    pub fn teacher_forcing(&self, target: &[u32], mut noise: Option<&mut dyn NoiseSource>) -> Result<TeacherForcing<T>> {
        if target.is_empty() {
            return Err(Error::Empty("target"));
        }
        let l = target.len() - 1;
        if l == 0 {
            return Err(Error::InvalidTargetLength(0));
        }
        self.check_length(target.len())?;
        self.check_tokens(target)?;
        let d = self.cfg.d_model;
        let mut inputs = Vec::with_capacity(l + 1);
        inputs.push(BOS);
        inputs.extend_from_slice(&target[..l]);
        let mut signal = Vec::with_capacity((l + 1) * d);
        let mut remaining = Vec::with_capacity(l + 1);
        for t in 0..=l {
            let mut ctx = DecoderStepContext::new(t, l)?;
            if self.cfg.mode == LengthControlMode::Pre {
                if let Some(noise) = noise.as_deref_mut() {
                    ctx = ctx.with_ratio(noisy_ratio(ctx.ratio, &self.cfg.signal, noise));
                }
            }
            signal.extend(self.decoder_signal(&ctx).iter().map(|&v| T::of(v)));
            remaining.push(ctx.remaining);
        }
        Ok(TeacherForcing {
            inputs,
            targets: target.to_vec(),
            signal: Tensor::new(vec![l + 1, d], signal)?,
            remaining,
        })
    }

    pub(super) fn linear(&self, tape: &mut Tape<'_, T>, b: &Bound, x: Var, w: usize, bias: usize) -> Result<Var> {
        let y = tape.matmul(x, b.at(w))?;
        tape.add_row(y, b.at(bias))
    }

    pub(super) fn ln(&self, tape: &mut Tape<'_, T>, b: &Bound, x: Var, ids: LnIds) -> Result<Var> {
        tape.layer_norm(x, b.at(ids.gamma), b.at(ids.beta), self.cfg.ln_eps)
    }

    pub(super) fn attention_block(
        &self,
        tape: &mut Tape<'_, T>,
        b: &Bound,
        query: Var,
        memory: Var,
        ids: AttnIds,
        spec: &AttentionSpec,
    ) -> Result<Var> {
        let q = self.linear(tape, b, query, ids.q_w, ids.q_b)?;
        let k = self.linear(tape, b, memory, ids.k_w, ids.k_b)?;
        let v = self.linear(tape, b, memory, ids.v_w, ids.v_b)?;
        let a = tape.attention(q, k, v, spec)?;
        self.linear(tape, b, a, ids.o_w, ids.o_b)
    }

    pub(super) fn ff_block(&self, tape: &mut Tape<'_, T>, b: &Bound, x: Var, ids: FfIds) -> Result<Var> {
        let h = self.linear(tape, b, x, ids.w1, ids.b1)?;
        let h = tape.gelu(h);
        self.linear(tape, b, h, ids.w2, ids.b2)
    }

    /// Encoder stack on the tape; returns `[n x d_model]`.
    pub fn encode_on_tape(&self, tape: &mut Tape<'_, T>, b: &Bound, source: &[u32], positional: bool) -> Result<Var> {
        if source.is_empty() {
            return Err(Error::Empty("source"));
        }
        self.check_length(source.len())?;
        self.check_tokens(source)?;
        let ids: Vec<usize> = source.iter().map(|&t| t as usize).collect();
        let mut x = tape.gather(b.at(self.layout.tok_emb), &ids)?;
        if positional {
            let d = self.cfg.d_model;
            let mut pe = Vec::with_capacity(source.len() * d);
            for pos in 0..source.len() {
                pe.extend(sinusoidal_pe(pos, &self.cfg.signal).iter().map(|&v| T::of(v)));
            }
            let pe = tape.constant(Tensor::new(vec![source.len(), d], pe)?);
            x = tape.add(x, pe)?;
        }
        let spec = AttentionSpec {
            heads: self.cfg.n_heads,
            causal: false,
            laam: None,
        };
        for layer in &self.layout.enc {
            let h = self.ln(tape, b, x, layer.ln1)?;
            let a = self.attention_block(tape, b, h, h, layer.attn, &spec)?;
            x = tape.add(x, a)?;
            let h = self.ln(tape, b, x, layer.ln2)?;
            let f = self.ff_block(tape, b, h, layer.ff)?;
            x = tape.add(x, f)?;
        }
        self.ln(tape, b, x, self.layout.enc_ln)
    }

    /// Decoder stack on the tape; returns logits `[(l + 1) x vocab]`.
    pub fn decode_on_tape(&self, tape: &mut Tape<'_, T>, b: &Bound, enc: Var, tf: &TeacherForcing<T>) -> Result<Var> {
        let ids: Vec<usize> = tf.inputs.iter().map(|&t| t as usize).collect();
        let e = tape.gather(b.at(self.layout.tok_emb), &ids)?;
        let s = tape.constant(tf.signal.clone());
        let mut y = tape.add(e, s)?;
        let self_spec = AttentionSpec {
            heads: self.cfg.n_heads,
            causal: true,
            laam: None,
        };
        let cross_spec = AttentionSpec {
            heads: self.cfg.n_heads,
            causal: false,
            laam: None,
        };
        let last = self.layout.dec.len() - 1;
        for (i, layer) in self.layout.dec.iter().enumerate() {
            let h = self.ln(tape, b, y, layer.ln1)?;
            let a = self.attention_block(tape, b, h, h, layer.self_attn, &self_spec)?;
            y = tape.add(y, a)?;
            let h = self.ln(tape, b, y, layer.ln2)?;
            let a = if i == last && self.cfg.mode == LengthControlMode::Laam {
                let spec = AttentionSpec {
                    laam: Some(LaamSpec {
                        remaining: tf.remaining.clone(),
                        boost: self.cfg.laam_boost,
                    }),
                    ..cross_spec.clone()
                };
                self.attention_block(tape, b, h, enc, layer.cross, &spec)?
            } else {
                self.attention_block(tape, b, h, enc, layer.cross, &cross_spec)?
            };
            y = tape.add(y, a)?;
            let h = self.ln(tape, b, y, layer.ln3)?;
            let f = self.ff_block(tape, b, h, layer.ff)?;
            y = tape.add(y, f)?;
        }
        let y = self.ln(tape, b, y, self.layout.dec_ln)?;
        self.linear(tape, b, y, self.layout.out_w, self.layout.out_b)
    }

    /// Summed token negative log-likelihood of one example, times `scale`.
    pub fn example_loss<'p>(
        &'p self,
        tape: &mut Tape<'p, T>,
        b: &Bound,
        source: &[u32],
        target: &[u32],
        noise: Option<&mut dyn NoiseSource>,
        scale: f64,
    ) -> Result<Var> {
        let tf = self.teacher_forcing(target, noise)?;
        let enc = self.encode_on_tape(tape, b, source, true)?;
        let logits = self.decode_on_tape(tape, b, enc, &tf)?;
        let targets: Vec<usize> = tf.targets.iter().map(|&t| t as usize).collect();
        tape.cross_entropy(logits, &targets, scale)
    }

    /// Encoder output `[n x d_model]` for `source`.
    pub fn encode(&self, source: &[u32]) -> Result<Tensor<T>> {
        self.encode_with_positions(source, true)
    }

    /// Encoder output with positional embeddings optionally switched off.
    pub fn encode_with_positions(&self, source: &[u32], positional: bool) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape);
        let out = self.encode_on_tape(&mut tape, &b, source, positional)?;
        Ok(tape.tensor(out))
    }

    /// Teacher-forced logits `[(l + 1) x vocab]` for every decoder position.
    pub fn teacher_forced_logits(&self, source: &[u32], target: &[u32]) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape);
        let tf = self.teacher_forcing(target, None)?;
        let enc = self.encode_on_tape(&mut tape, &b, source, true)?;
        let logits = self.decode_on_tape(&mut tape, &b, enc, &tf)?;
        Ok(tape.tensor(logits))
    }
}
