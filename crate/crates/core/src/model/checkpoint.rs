//! Plain-text header plus raw little-endian `f32` parameters.

use std::io::{BufRead, BufReader, Read, Write};

use super::{LengthControlMode, Model, ModelConfig, ModelParameters};
use crate::error::{Error, Result};
use crate::kv::KeyValues;
use crate::scalar::Scalar;
use crate::signal::SignalConfig;

pub const CHECKPOINT_MAGIC: &str = "LENCTL1";
const ACTIVATION: &str = "gelu_tanh";

const KEYS: [&str; 15] = [
    "d_model",
    "n_heads",
    "n_enc_layers",
    "n_dec_layers",
    "d_ff",
    "vocab_size",
    "max_positions",
    "mode",
    "laam_boost",
    "ln_eps",
    "activation",
    "signal.d_model",
    "signal.scale",
    "signal.noise_enabled",
    "signal.rng_seed",
];

fn header(cfg: &ModelConfig) -> String {
    let s = &cfg.signal;
    // `{:?}` prints the shortest decimal that parses back to the same f64.
    format!(
        "{CHECKPOINT_MAGIC}\nd_model={}\nn_heads={}\nn_enc_layers={}\nn_dec_layers={}\nd_ff={}\n\
         vocab_size={}\nmax_positions={}\nmode={}\nlaam_boost={:?}\nln_eps={:?}\nactivation={ACTIVATION}\n\
         signal.d_model={}\nsignal.scale={:?}\nsignal.noise_enabled={}\nsignal.rng_seed={}\n\n",
        cfg.d_model,
        cfg.n_heads,
        cfg.n_enc_layers,
        cfg.n_dec_layers,
        cfg.d_ff,
        cfg.vocab_size,
        cfg.max_positions,
        cfg.mode,
        cfg.laam_boost,
        cfg.ln_eps,
        s.d_model,
        s.scale,
        s.noise_enabled,
        s.rng_seed,
    )
}

pub fn write_checkpoint<T: Scalar, W: Write>(model: &Model<T>, mut out: W) -> Result<()> {
    out.write_all(header(model.config()).as_bytes())?;
    let mut buf = Vec::with_capacity(model.params().numel() * 4);
    for t in model.params().tensors() {
        for v in t.data() {
            buf.extend_from_slice(&(v.f64() as f32).to_le_bytes());
        }
    }
    out.write_all(&buf)?;
    out.flush()?;
    Ok(())
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn read_checkpoint<T: Scalar, R: Read>(input: R) -> Result<Model<T>> {
    let mut r = BufReader::new(input);
    let mut line = String::new();
    r.read_line(&mut line)?;
    if line.trim_end_matches('\n') != CHECKPOINT_MAGIC {
        return Err(bad(format!("missing {CHECKPOINT_MAGIC} header")));
    }
    let mut text = String::new();
    loop {
        line.clear();
        if r.read_line(&mut line)? == 0 {
            return Err(bad("header is not terminated by a blank line"));
        }
        if line.trim().is_empty() {
            break;
        }
        text.push_str(&line);
    }
    let kv = KeyValues::parse(&text, 2)?;
    kv.only(&KEYS)?;
    let activation: String = kv.require("activation")?;
    if activation != ACTIVATION {
        return Err(bad(format!("unsupported activation {activation:?}")));
    }
    let cfg = ModelConfig {
        d_model: kv.require("d_model")?,
        n_heads: kv.require("n_heads")?,
        n_enc_layers: kv.require("n_enc_layers")?,
        n_dec_layers: kv.require("n_dec_layers")?,
        d_ff: kv.require("d_ff")?,
        vocab_size: kv.require("vocab_size")?,
        max_positions: kv.require("max_positions")?,
        mode: kv.require::<LengthControlMode>("mode")?,
        signal: SignalConfig {
            d_model: kv.require("signal.d_model")?,
            scale: kv.require("signal.scale")?,
            noise_enabled: kv.require("signal.noise_enabled")?,
            rng_seed: kv.require("signal.rng_seed")?,
        },
        laam_boost: kv.require("laam_boost")?,
        ln_eps: kv.require("ln_eps")?,
    };
    cfg.validate()?;
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() % 4 != 0 {
        return Err(bad(format!("payload of {} bytes is not a whole number of floats", bytes.len())));
    }
    let values: Vec<T> = bytes
        .chunks_exact(4)
        .map(|c| T::of(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
        .collect();
    let params = ModelParameters::from_flat(&cfg, &values)
        .ok_or_else(|| bad(format!("{} values do not fit the configured layout", values.len())))?;
    Model::from_parameters(cfg, params)
}
