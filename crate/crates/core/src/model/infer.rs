//! Cached autoregressive decoding.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{DecoderStepContext, LengthControlMode, Model};
use crate::compute::{kernels, AttentionSpec, LaamSpec, Tape, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::seed;
use crate::tokens::{BOS, EOS};

#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub enum DecodePolicy {
    /// Argmax, ties to the lowest id.
    #[default]
    Greedy,
    /// Softmax sampling at `temperature` from a seeded generator.
    Sample { temperature: f64, seed: u64 },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Generation {
    /// Generated ids, end token excluded.
    pub tokens: Vec<u32>,
    /// The loop stopped at the hard cap rather than on the end token.
    pub cap_hit: bool,
}

/// Hard cap on generated tokens for requested length `l`.
pub fn generation_cap(l: usize) -> usize {
    (2 * l).max(l + 50)
}

/// Step-by-step decoder holding per-layer key/value caches.
pub struct IncrementalDecoder<'m, T: Scalar> {
    model: &'m Model<T>,
    cross_k: Vec<Tensor<T>>,
    cross_v: Vec<Tensor<T>>,
    self_k: Vec<Option<Tensor<T>>>,
    self_v: Vec<Option<Tensor<T>>>,
    consumed: Vec<u32>,
}

impl<'m, T: Scalar> IncrementalDecoder<'m, T> {
    pub fn new(model: &'m Model<T>, enc_out: &Tensor<T>) -> Result<Self> {
        let d = model.cfg.d_model;
        if enc_out.shape().len() != 2 || enc_out.cols() != d {
            return Err(Error::ShapeMismatch {
                op: "decoder memory",
                left: enc_out.shape().to_vec(),
                right: vec![enc_out.rows(), d],
            });
        }
        let mut cross_k = Vec::new();
        let mut cross_v = Vec::new();
        for layer in &model.layout.dec {
            let mut tape = Tape::new();
            let b = model.bind(&mut tape);
            let mem = tape.leaf(enc_out);
            let k = model.linear(&mut tape, &b, mem, layer.cross.k_w, layer.cross.k_b)?;
            let v = model.linear(&mut tape, &b, mem, layer.cross.v_w, layer.cross.v_b)?;
            cross_k.push(tape.tensor(k));
            cross_v.push(tape.tensor(v));
        }
        let n = model.layout.dec.len();
        Ok(IncrementalDecoder {
            model,
            cross_k,
            cross_v,
            self_k: vec![None; n],
            self_v: vec![None; n],
            consumed: Vec::new(),
        })
    }

    /// Number of decoder positions already processed.
    pub fn steps(&self) -> usize {
        self.self_k[0].as_ref().map_or(0, Tensor::rows)
    }

    /// Next-token logits at step `ctx.step`, where `prefix` holds the
    /// `ctx.step` tokens generated so far.
    pub fn step(&mut self, prefix: &[u32], ctx: &DecoderStepContext) -> Result<Vec<T>> {
        let t = self.steps();
        if prefix.len() != ctx.step || ctx.step != t || prefix[..t.saturating_sub(1)] != self.consumed[..] {
            return Err(Error::PrefixMismatch {
                prefix: prefix.len(),
                step: ctx.step,
            });
        }
        let model = self.model;
        let cfg = &model.cfg;
        model.check_length(t + 1)?;
        let token = if t == 0 { BOS } else { prefix[t - 1] };
        model.check_tokens(&[token])?;
        if t > 0 {
            self.consumed.push(token);
        }

        let signal: Vec<T> = model.decoder_signal(ctx).iter().map(|&v| T::of(v)).collect();
        let mut x: Tensor<T> = {
            let mut tape = Tape::new();
            let b = model.bind(&mut tape);
            let e = tape.gather(b.0[model.layout.tok_emb], &[token as usize])?;
            let s = tape.constant(Tensor::new(vec![1, cfg.d_model], signal)?);
            let y = tape.add(e, s)?;
            tape.tensor(y)
        };
        let plain = AttentionSpec {
            heads: cfg.n_heads,
            causal: false,
            laam: None,
        };
        let last = model.layout.dec.len() - 1;
        for (i, layer) in model.layout.dec.iter().enumerate() {
            let (q, k, v) = {
                let mut tape = Tape::new();
                let b = model.bind(&mut tape);
                let xv = tape.leaf(&x);
                let h = model.ln(&mut tape, &b, xv, layer.ln1)?;
                let q = model.linear(&mut tape, &b, h, layer.self_attn.q_w, layer.self_attn.q_b)?;
                let k = model.linear(&mut tape, &b, h, layer.self_attn.k_w, layer.self_attn.k_b)?;
                let v = model.linear(&mut tape, &b, h, layer.self_attn.v_w, layer.self_attn.v_b)?;
                (tape.tensor(q), tape.tensor(k), tape.tensor(v))
            };
            append(&mut self.self_k[i], k)?;
            append(&mut self.self_v[i], v)?;
            let cross_spec = if i == last && cfg.mode == LengthControlMode::Laam {
                AttentionSpec {
                    laam: Some(LaamSpec {
                        remaining: vec![ctx.remaining],
                        boost: cfg.laam_boost,
                    }),
                    ..plain.clone()
                }
            } else {
                plain.clone()
            };
            let mut tape = Tape::new();
            let b = model.bind(&mut tape);
            let xv = tape.leaf(&x);
            let qv = tape.leaf(&q);
            let kc = tape.leaf(self.self_k[i].as_ref().expect("appended"));
            let vc = tape.leaf(self.self_v[i].as_ref().expect("appended"));
            let a = tape.attention(qv, kc, vc, &plain)?;
            let a = model.linear(&mut tape, &b, a, layer.self_attn.o_w, layer.self_attn.o_b)?;
            let y = tape.add(xv, a)?;
            let h = model.ln(&mut tape, &b, y, layer.ln2)?;
            let q = model.linear(&mut tape, &b, h, layer.cross.q_w, layer.cross.q_b)?;
            let kx = tape.leaf(&self.cross_k[i]);
            let vx = tape.leaf(&self.cross_v[i]);
            let a = tape.attention(q, kx, vx, &cross_spec)?;
            let a = model.linear(&mut tape, &b, a, layer.cross.o_w, layer.cross.o_b)?;
            let y = tape.add(y, a)?;
            let h = model.ln(&mut tape, &b, y, layer.ln3)?;
            let f = model.ff_block(&mut tape, &b, h, layer.ff)?;
            let y = tape.add(y, f)?;
            x = tape.tensor(y);
        }
        let mut tape = Tape::new();
        let b = model.bind(&mut tape);
        let xv = tape.leaf(&x);
        let h = model.ln(&mut tape, &b, xv, model.layout.dec_ln)?;
        let logits = model.linear(&mut tape, &b, h, model.layout.out_w, model.layout.out_b)?;
        Ok(tape.value(logits).to_vec())
    }
}

fn append<T: Scalar>(cache: &mut Option<Tensor<T>>, row: Tensor<T>) -> Result<()> {
    match cache {
        Some(c) => c.push_row(row.data()),
        None => {
            *cache = Some(row);
            Ok(())
        }
    }
}

fn argmax<T: Scalar>(logits: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in logits.iter().enumerate() {
        if *v > logits[best] {
            best = i;
        }
    }
    best
}

fn sample<T: Scalar>(logits: &[T], temperature: f64, rng: &mut ChaCha8Rng) -> usize {
    let scaled: Vec<f64> = logits.iter().map(|v| v.f64() / temperature).collect();
    let lse = kernels::log_sum_exp(&scaled);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, s) in scaled.iter().enumerate() {
        acc += (s - lse).exp();
        if u < acc {
            return i;
        }
    }
    scaled.len() - 1
}

impl<T: Scalar> Model<T> {
    /// Logits for step `ctx.step` given `prefix`, recomputed from scratch.
    pub fn decode_step(&self, prefix: &[u32], enc_out: &Tensor<T>, ctx: &DecoderStepContext) -> Result<Vec<T>> {
        if prefix.len() != ctx.step {
            return Err(Error::PrefixMismatch {
                prefix: prefix.len(),
                step: ctx.step,
            });
        }
        let mut dec = IncrementalDecoder::new(self, enc_out)?;
        for s in 0..ctx.step {
            dec.step(&prefix[..s], &DecoderStepContext::new(s, ctx.target_len)?)?;
        }
        dec.step(prefix, ctx)
    }

    /// Autoregressive generation toward `l` tokens.
    pub fn generate(&self, source: &[u32], l: usize, policy: DecodePolicy) -> Result<Generation> {
        if l == 0 {
            return Err(Error::InvalidTargetLength(0));
        }
        let cap = generation_cap(l);
        self.check_length(cap + 1)?;
        if let DecodePolicy::Sample { temperature, .. } = policy {
            if !(temperature > 0.0) {
                return Err(Error::Config(format!("temperature {temperature} must be positive")));
            }
        }
        let enc = self.encode(source)?;
        let mut dec = IncrementalDecoder::new(self, &enc)?;
        let mut rng = match policy {
            DecodePolicy::Sample { seed, .. } => Some(seed::rng(seed)),
            DecodePolicy::Greedy => None,
        };
        let mut tokens = Vec::new();
        while tokens.len() < cap {
            let ctx = DecoderStepContext::new(tokens.len(), l)?;
            let logits = dec.step(&tokens, &ctx)?;
            let next = match (policy, rng.as_mut()) {
                (DecodePolicy::Sample { temperature, .. }, Some(rng)) => sample(&logits, temperature, rng),
                _ => argmax(&logits),
            } as u32;
            if next == EOS {
                return Ok(Generation { tokens, cap_hit: false });
            }
            tokens.push(next);
        }
        Ok(Generation { tokens, cap_hit: true })
    }
}
