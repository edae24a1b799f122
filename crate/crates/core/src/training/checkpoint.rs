//! Binary checkpoint format.
//!
//! ```text
//! "SQD1" | version u32 | crc32(payload) u32 | payload
//! payload = config_len u64 | config text (UTF-8 key = value lines)
//!         | tensor_count u64
//!         | per tensor: name_len u64 | name | dtype u8 (0 = f32) | rank u64 | dims u64.. | f32 data
//! ```
//! All integers little-endian.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::{Stage, TrainState};
use crate::compression::{Activation, CompressionConfig, Projector, Pipeline, PipelineConfig};
use crate::error::{Error, Result};
use crate::kv::{KvMap, KvWriter};
use crate::tensor::{AdamWConfig, OptimizerState, Tensor};
use crate::transformer::{DecoderConfig, DecoderModel};

const MAGIC: &[u8; 4] = b"SQD1";
pub const CHECKPOINT_VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

fn put_decoder(w: &mut KvWriter, prefix: &str, c: &DecoderConfig) {
    w.put(&format!("{prefix}.d_model"), c.d_model)
        .put(&format!("{prefix}.n_layers"), c.n_layers)
        .put(&format!("{prefix}.n_heads"), c.n_heads)
        .put(&format!("{prefix}.d_ff"), c.d_ff)
        .put(&format!("{prefix}.vocab_size"), c.vocab_size)
        .put(&format!("{prefix}.max_seq_len"), c.max_seq_len)
        .put(&format!("{prefix}.rope_base"), c.rope_base);
}

fn get_decoder(m: &KvMap, prefix: &str) -> Result<DecoderConfig> {
    let k = |f: &str| format!("{prefix}.{f}");
    Ok(DecoderConfig {
        d_model: m.require(&k("d_model"))?,
        n_layers: m.require(&k("n_layers"))?,
        n_heads: m.require(&k("n_heads"))?,
        d_ff: m.require(&k("d_ff"))?,
        vocab_size: m.require(&k("vocab_size"))?,
        max_seq_len: m.require(&k("max_seq_len"))?,
        rope_base: m.require(&k("rope_base"))?,
    })
}

fn activation_name(a: Activation) -> &'static str {
    match a {
        Activation::Gelu => "gelu",
        Activation::Identity => "identity",
    }
}

fn config_text(state: &TrainState) -> String {
    let c = state.model.config();
    let mut w = KvWriter::default();
    w.put("max_memory", c.max_memory)
        .put("n_memory", c.compression.n_memory)
        .put("max_context", c.compression.max_context)
        .put("d_proj", c.d_proj)
        .put("activation", activation_name(c.activation));
    put_decoder(&mut w, "pi_s", &c.encoder);
    put_decoder(&mut w, "pi_l", &c.decoder);
    w.put("stage", state.stage.map(Stage::name).unwrap_or("none"))
        .put("stage_step", state.stage_step)
        .put("stage_seed", state.stage_seed);
    let done: Vec<&str> = state.completed.iter().map(|s| s.name()).collect();
    w.put("completed", done.join(","));
    if let Some(o) = &state.optimizer {
        w.put("opt.step", o.step)
            .put("opt.beta1", o.config.beta1)
            .put("opt.beta2", o.config.beta2)
            .put("opt.eps", o.config.eps)
            .put("opt.weight_decay", o.config.weight_decay);
    }
    w.finish()
}

fn named_tensors(state: &TrainState) -> Vec<(String, Vec<usize>, Vec<f32>)> {
    let params = state.model.params();
    let mut out: Vec<(String, Vec<usize>, Vec<f32>)> = params
        .iter()
        .map(|(n, t)| (n.clone(), t.shape().to_vec(), t.data().to_vec()))
        .collect();
    if let Some(o) = &state.optimizer {
        for (kind, moments) in [("m", &o.m), ("v", &o.v)] {
            for ((n, t), data) in params.iter().zip(moments) {
                out.push((format!("opt.{kind}.{n}"), t.shape().to_vec(), data.clone()));
            }
        }
    }
    out.push((
        "train.loss_history".into(),
        vec![state.loss_history.len()],
        state.loss_history.clone(),
    ));
    out
}

fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

/// Serialises `state` to bytes.
pub fn encode_checkpoint(state: &TrainState) -> Vec<u8> {
    let mut payload = Vec::new();
    let text = config_text(state);
    put_u64(&mut payload, text.len() as u64);
    payload.extend_from_slice(text.as_bytes());
    let tensors = named_tensors(state);
    put_u64(&mut payload, tensors.len() as u64);
    for (name, shape, data) in &tensors {
        put_u64(&mut payload, name.len() as u64);
        payload.extend_from_slice(name.as_bytes());
        payload.push(DTYPE_F32);
        put_u64(&mut payload, shape.len() as u64);
        for &d in shape {
            put_u64(&mut payload, d as u64);
        }
        for v in data {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut out = Vec::with_capacity(payload.len() + 12);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
    out.extend_from_slice(&payload);
    out
}

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    fs::write(path, encode_checkpoint(state))?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Format("unexpected end of checkpoint".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v)
            .ok()
            .filter(|&v| v <= self.buf.len())
            .ok_or_else(|| Error::Format(format!("implausible length {v}")))
    }
}

/// Parses checkpoint bytes.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<TrainState> {
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(Error::Format("not a squidlet checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let stored = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    let payload = &bytes[12..];
    let computed = crc32fast::hash(payload);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }

    let mut r = Reader { buf: payload, pos: 0 };
    let text_len = r.len()?;
    let text = std::str::from_utf8(r.take(text_len)?)
        .map_err(|_| Error::Format("config text is not UTF-8".into()))?;
    let kv = KvMap::parse(text, Path::new("<checkpoint>"))?;

    let count = r.len()?;
    let mut tensors: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
    for _ in 0..count {
        let name_len = r.len()?;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let dtype = r.take(1)?[0];
        if dtype != DTYPE_F32 {
            return Err(Error::Format(format!("tensor `{name}` has unsupported dtype {dtype}")));
        }
        let rank = r.len()?;
        let shape = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let numel = numel
            .filter(|&n| n.checked_mul(4).is_some_and(|b| b <= payload.len()))
            .ok_or_else(|| Error::Format(format!("tensor `{name}` is too large")))?;
        let data = r
            .take(numel * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if tensors.insert(name.clone(), Tensor::new(shape, data)?).is_some() {
            return Err(Error::Format(format!("duplicate tensor `{name}`")));
        }
    }
    if r.pos != payload.len() {
        return Err(Error::Format("trailing bytes after last tensor".into()));
    }

    let activation = match kv.require::<String>("activation")?.as_str() {
        "gelu" => Activation::Gelu,
        "identity" => Activation::Identity,
        other => return Err(Error::Format(format!("unknown activation `{other}`"))),
    };
    let config = PipelineConfig {
        max_memory: kv.require("max_memory")?,
        compression: CompressionConfig {
            n_memory: kv.require("n_memory")?,
            max_context: kv.require("max_context")?,
        },
        encoder: get_decoder(&kv, "pi_s")?,
        decoder: get_decoder(&kv, "pi_l")?,
        d_proj: kv.require("d_proj")?,
        activation,
    };
    let mut take = |name: String| -> Result<Tensor<f32>> {
        tensors
            .remove(&name)
            .ok_or_else(|| Error::Format(format!("missing tensor `{name}`")))
    };
    let encoder = DecoderModel::from_named(config.encoder.clone(), |n| take(format!("pi_s.{n}")))?;
    let projector = Projector::from_named(activation, |n| take(format!("projector.{n}")))?;
    let decoder = DecoderModel::from_named(config.decoder.clone(), |n| take(format!("pi_l.{n}")))?;
    let model = Pipeline::from_parts(config, encoder, projector, decoder)?;

    let optimizer = match kv.get::<u64>("opt.step")? {
        None => None,
        Some(step) => {
            let names: Vec<String> = model.params().into_iter().map(|(n, _)| n).collect();
            let mut moments = |kind: &str| -> Result<Vec<Vec<f32>>> {
                names
                    .iter()
                    .map(|n| take(format!("opt.{kind}.{n}")).map(Tensor::into_data))
                    .collect()
            };
            let m = moments("m")?;
            let v = moments("v")?;
            Some(OptimizerState {
                config: AdamWConfig {
                    beta1: kv.require("opt.beta1")?,
                    beta2: kv.require("opt.beta2")?,
                    eps: kv.require("opt.eps")?,
                    weight_decay: kv.require("opt.weight_decay")?,
                },
                step,
                m,
                v,
            })
        }
    };
    let loss_history = take("train.loss_history".into())?.into_data();
    if !tensors.is_empty() {
        let extra: Vec<&String> = tensors.keys().collect();
        return Err(Error::Format(format!("unexpected tensors {extra:?}")));
    }
    let stage = match kv.require::<String>("stage")?.as_str() {
        "none" => None,
        s => Some(s.parse::<Stage>().map_err(|e| Error::Format(e.to_string()))?),
    };
    let completed = kv
        .raw("completed")
        .unwrap_or("")
        .split(',')
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<Stage>().map_err(|e| Error::Format(e.to_string())))
        .collect::<Result<Vec<_>>>()?;
    let stage_step: usize = kv.require("stage_step")?;
    if loss_history.len() != stage_step {
        return Err(Error::Format(format!(
            "loss history has {} entries but {stage_step} steps were recorded",
            loss_history.len()
        )));
    }
    Ok(TrainState {
        model,
        optimizer,
        stage,
        stage_step,
        stage_seed: kv.require("stage_seed")?,
        loss_history,
        completed,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    decode_checkpoint(&fs::read(path)?)
}
