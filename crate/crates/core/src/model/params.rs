use rand_distr::{Distribution, Normal};

use super::config::ModelConfig;
use crate::compute::Tensor;
use crate::scalar::Scalar;
use crate::seed;

#[derive(Clone, Copy, Debug)]
pub struct LnIds {
    pub gamma: usize,
    pub beta: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct AttnIds {
    pub q_w: usize,
    pub q_b: usize,
    pub k_w: usize,
    pub k_b: usize,
    pub v_w: usize,
    pub v_b: usize,
    pub o_w: usize,
    pub o_b: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct FfIds {
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct EncLayerIds {
    pub ln1: LnIds,
    pub attn: AttnIds,
    pub ln2: LnIds,
    pub ff: FfIds,
}

#[derive(Clone, Copy, Debug)]
pub struct DecLayerIds {
    pub ln1: LnIds,
    pub self_attn: AttnIds,
    pub ln2: LnIds,
    pub cross: AttnIds,
    pub ln3: LnIds,
    pub ff: FfIds,
}

/// Positions of every parameter group in [`ModelParameters`].
#[derive(Clone, Debug)]
pub struct Layout {
    pub tok_emb: usize,
    pub enc: Vec<EncLayerIds>,
    pub enc_ln: LnIds,
    pub dec: Vec<DecLayerIds>,
    pub dec_ln: LnIds,
    pub out_w: usize,
    pub out_b: usize,
}

#[derive(Clone, Copy, Debug)]
enum Init {
    Normal(f64),
    Zeros,
    Ones,
}

struct Decl {
    entries: Vec<(String, Vec<usize>, Init)>,
}

impl Decl {
    fn add(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        self.entries.push((name, shape, init));
        self.entries.len() - 1
    }

    fn ln(&mut self, prefix: &str, d: usize) -> LnIds {
        LnIds {
            gamma: self.add(format!("{prefix}.g"), vec![d], Init::Ones),
            beta: self.add(format!("{prefix}.b"), vec![d], Init::Zeros),
        }
    }

    fn linear(&mut self, prefix: &str, d_in: usize, d_out: usize) -> (usize, usize) {
        let std = 1.0 / (d_in as f64).sqrt();
        (
            self.add(format!("{prefix}.w"), vec![d_in, d_out], Init::Normal(std)),
            self.add(format!("{prefix}.b"), vec![d_out], Init::Zeros),
        )
    }

    fn attn(&mut self, prefix: &str, d: usize) -> AttnIds {
        let (q_w, q_b) = self.linear(&format!("{prefix}.q"), d, d);
        let (k_w, k_b) = self.linear(&format!("{prefix}.k"), d, d);
        let (v_w, v_b) = self.linear(&format!("{prefix}.v"), d, d);
        let (o_w, o_b) = self.linear(&format!("{prefix}.o"), d, d);
        AttnIds {
            q_w,
            q_b,
            k_w,
            k_b,
            v_w,
            v_b,
            o_w,
            o_b,
        }
    }

    fn ff(&mut self, prefix: &str, d: usize, d_ff: usize) -> FfIds {
        let (w1, b1) = self.linear(&format!("{prefix}.fc1"), d, d_ff);
        let (w2, b2) = self.linear(&format!("{prefix}.fc2"), d_ff, d);
        FfIds { w1, b1, w2, b2 }
    }
}

/// Output-projection init scale; keeps initial logits near uniform.
const OUT_INIT_STD: f64 = 0.02;

fn declare(cfg: &ModelConfig) -> (Decl, Layout) {
    let d = cfg.d_model;
    let mut decl = Decl { entries: Vec::new() };
    let tok_emb = decl.add("tok_emb".into(), vec![cfg.vocab_size, d], Init::Normal(1.0));
    let enc = (0..cfg.n_enc_layers)
        .map(|i| EncLayerIds {
            ln1: decl.ln(&format!("enc.{i}.ln1"), d),
            attn: decl.attn(&format!("enc.{i}.attn"), d),
            ln2: decl.ln(&format!("enc.{i}.ln2"), d),
            ff: decl.ff(&format!("enc.{i}.ff"), d, cfg.d_ff),
        })
        .collect();
    let enc_ln = decl.ln("enc.ln_f", d);
    let dec = (0..cfg.n_dec_layers)
        .map(|i| DecLayerIds {
            ln1: decl.ln(&format!("dec.{i}.ln1"), d),
            self_attn: decl.attn(&format!("dec.{i}.self"), d),
            ln2: decl.ln(&format!("dec.{i}.ln2"), d),
            cross: decl.attn(&format!("dec.{i}.cross"), d),
            ln3: decl.ln(&format!("dec.{i}.ln3"), d),
            ff: decl.ff(&format!("dec.{i}.ff"), d, cfg.d_ff),
        })
        .collect();
    let dec_ln = decl.ln("dec.ln_f", d);
    let out_w = decl.add("out.w".into(), vec![d, cfg.vocab_size], Init::Normal(OUT_INIT_STD));
    let out_b = decl.add("out.b".into(), vec![cfg.vocab_size], Init::Zeros);
    let layout = Layout {
        tok_emb,
        enc,
        enc_ln,
        dec,
        dec_ln,
        out_w,
        out_b,
    };
    (decl, layout)
}

pub fn layout(cfg: &ModelConfig) -> Layout {
    declare(cfg).1
}

/// Named learnable tensors in architectural order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParameters<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> ModelParameters<T> {
    /// Random initialisation, deterministic in `seed`.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let (decl, _) = declare(cfg);
        let mut rng = seed::rng(seed);
        let mut names = Vec::with_capacity(decl.entries.len());
        let mut tensors = Vec::with_capacity(decl.entries.len());
        for (name, shape, init) in decl.entries {
            let n: usize = shape.iter().product();
            let data: Vec<T> = match init {
                Init::Zeros => vec![T::zero(); n],
                Init::Ones => vec![T::one(); n],
                Init::Normal(std) => {
                    let dist = Normal::new(0.0, std).expect("positive std");
                    (0..n).map(|_| T::of(dist.sample(&mut rng))).collect()
                }
            };
            names.push(name);
            tensors.push(Tensor::new(shape, data).expect("declared shape").with_grad());
        }
        ModelParameters { names, tensors }
    }

    /// Rebuilds parameters from a flat value stream in declared order.
    pub fn from_flat(cfg: &ModelConfig, values: &[T]) -> Option<Self> {
        let (decl, _) = declare(cfg);
        let total: usize = decl.entries.iter().map(|(_, s, _)| s.iter().product::<usize>()).sum();
        if total != values.len() {
            return None;
        }
        let mut offset = 0;
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (name, shape, _) in decl.entries {
            let n: usize = shape.iter().product();
            let data = values[offset..offset + n].to_vec();
            offset += n;
            names.push(name);
            tensors.push(Tensor::new(shape, data).ok()?.with_grad());
        }
        Some(ModelParameters { names, tensors })
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn tensor(&self, id: usize) -> &Tensor<T> {
        &self.tensors[id]
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn cast<U: Scalar>(&self) -> ModelParameters<U> {
        ModelParameters {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }
}
