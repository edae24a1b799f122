//! Browser bindings: a FLOP explorer for compressed vs full-context
//! inference, plus compression and attention views of a toy pipeline.
//!
//! Everything returns JSON strings so the page needs no generated types.

use serde::Serialize;
use squidlet::compression::{Pipeline, PipelineConfig};
use squidlet::evalbench::{count_encoder_flops, count_flops, count_projector_flops, FlopCount};
use squidlet::tokenizer::Tokenizer;
use squidlet::Result;
use wasm_bindgen::prelude::*;

#[derive(Serialize)]
struct FlopView {
    context_len: usize,
    n_memory: usize,
    query_len: usize,
    generated: usize,
    compression_ratio: f64,
    full: FlopCount,
    compressed_decoder: FlopCount,
    compressed_total: FlopCount,
    /// Main-decoder prefill attention-score ratio, full over compressed.
    score_ratio: f64,
    /// End-to-end FLOP ratio including encoder and projector.
    total_ratio: f64,
    formulas: &'static str,
}

fn add(a: &FlopCount, b: &FlopCount) -> FlopCount {
    FlopCount {
        attention_scores: a.attention_scores + b.attention_scores,
        attention_values: a.attention_values + b.attention_values,
        projections: a.projections + b.projections,
        feed_forward: a.feed_forward + b.feed_forward,
        lm_head: a.lm_head + b.lm_head,
        other: a.other + b.other,
    }
}

/// FLOPs of both arms on the default toy shapes.
pub fn flop_view(context_len: usize, n_memory: usize, query_len: usize, generated: usize) -> String {
    let cfg = PipelineConfig::toy(n_memory.max(1));
    let full = count_flops(&cfg.decoder, context_len + query_len, generated);
    let dec = count_flops(&cfg.decoder, n_memory + query_len, generated);
    let enc = add(
        &count_encoder_flops(&cfg.encoder, context_len + n_memory),
        &count_projector_flops(cfg.encoder.d_model, cfg.d_proj, cfg.decoder.d_model, n_memory),
    );
    let total = add(&dec, &enc);
    let prefill = |p: usize| count_flops(&cfg.decoder, p, 1).attention_scores as f64;
    let ratio = |a: f64, b: f64| if b > 0.0 { a / b } else { 0.0 };
    let view = FlopView {
        context_len,
        n_memory,
        query_len,
        generated,
        compression_ratio: ratio(context_len as f64, n_memory as f64),
        full,
        compressed_decoder: dec,
        compressed_total: total,
        score_ratio: ratio(prefill(context_len + query_len), prefill(n_memory + query_len)),
        total_ratio: ratio(full.total() as f64, total.total() as f64),
        formulas: FlopCount::FORMULAS,
    };
    serde_json::to_string(&view).expect("serialisable")
}

#[derive(Serialize)]
struct CompressView {
    tokens: usize,
    n_memory: usize,
    ratio: String,
    /// Decoded augmented sequence, memory tokens shown as `<m{i}>`.
    augmented: Vec<String>,
    /// L2 norm of each memory-slot embedding before and after projection.
    memory_norms: Vec<f32>,
    projected_norms: Vec<f32>,
    encoder_width: usize,
    decoder_width: usize,
}

#[derive(Serialize)]
struct AttentionView {
    labels: Vec<String>,
    layer: usize,
    head: usize,
    layers: usize,
    heads: usize,
    /// Row-major `T x T`, row = query position.
    weights: Vec<f32>,
}

fn label(tok: &Tokenizer, id: u32) -> String {
    if tok.is_memory(id) {
        return format!("<m{}>", id - squidlet::tokenizer::MEMORY_BASE);
    }
    match id {
        0..=255 => {
            let c = id as u8 as char;
            if c.is_ascii_graphic() || c == ' ' {
                c.to_string()
            } else {
                format!("\\x{id:02x}")
            }
        }
        _ => format!("<{id}>"),
    }
}

fn norms(t: &squidlet::Tensor) -> Vec<f32> {
    (0..t.rows()).map(|r| t.row(r).iter().map(|v| v * v).sum::<f32>().sqrt()).collect()
}

/// A randomly initialised toy pipeline; the demo shows shapes and
/// information flow, not trained behaviour.
#[wasm_bindgen]
pub struct Demo {
    model: Pipeline<f32>,
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32) -> Result<Demo, JsError> {
        Ok(Demo::native(seed as u64)?)
    }

    /// Compresses `text` into `n_memory` slots.
    pub fn compress_text(&self, text: &str, n_memory: usize) -> Result<String, JsError> {
        Ok(self.compress_json(text, n_memory)?)
    }

    /// Small-decoder attention over `text` followed by its memory tokens.
    pub fn attention_map(&self, text: &str, n_memory: usize, layer: usize, head: usize) -> Result<String, JsError> {
        Ok(self.attention_json(text, n_memory, layer, head)?)
    }
}

impl Demo {
    pub fn native(seed: u64) -> Result<Demo> {
        Ok(Demo {
            model: Pipeline::new(PipelineConfig::toy(16), seed)?,
        })
    }

    fn augmented(&self, text: &str, n_memory: usize) -> Result<Vec<u32>> {
        let tok = self.model.tokenizer();
        let cfg = self.model.config();
        squidlet::compression::augment_context(
            tok,
            &tok.encode(text),
            n_memory,
            cfg.compression.max_context + n_memory,
        )
    }

    pub fn compress_json(&self, text: &str, n_memory: usize) -> Result<String> {
        let tok = self.model.tokenizer();
        let aug = self.augmented(text, n_memory)?;
        let ctx = &aug[..aug.len() - n_memory];
        let (m, e) = self.model.compress_with(ctx, n_memory)?;
        let view = CompressView {
            tokens: ctx.len(),
            n_memory,
            ratio: squidlet::compression::compression_ratio(ctx.len(), n_memory)?.to_string(),
            augmented: aug.iter().map(|&id| label(tok, id)).collect(),
            memory_norms: norms(&m.0),
            projected_norms: norms(&e.0),
            encoder_width: m.0.cols(),
            decoder_width: e.0.cols(),
        };
        Ok(serde_json::to_string(&view).expect("serialisable"))
    }

    pub fn attention_json(&self, text: &str, n_memory: usize, layer: usize, head: usize) -> Result<String> {
        let tok = self.model.tokenizer();
        let aug = self.augmented(text, n_memory)?;
        let cfg = &self.model.config().encoder;
        if layer >= cfg.n_layers || head >= cfg.n_heads {
            return Err(squidlet::Error::Usage(format!(
                "layer {layer} / head {head} out of range ({} layers, {} heads)",
                cfg.n_layers, cfg.n_heads
            )));
        }
        let maps = self.model.encoder.attention_maps(&aug)?;
        let t = aug.len();
        let weights = maps[layer].data()[head * t * t..(head + 1) * t * t].to_vec();
        let view = AttentionView {
            labels: aug.iter().map(|&id| label(tok, id)).collect(),
            layer,
            head,
            layers: cfg.n_layers,
            heads: cfg.n_heads,
            weights,
        };
        Ok(serde_json::to_string(&view).expect("serialisable"))
    }
}

/// FLOP comparison for the given lengths, as JSON.
#[wasm_bindgen]
pub fn flop_explorer(context_len: usize, n_memory: usize, query_len: usize, generated: usize) -> String {
    flop_view(context_len, n_memory, query_len, generated)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::Value;

    #[test]
    fn flop_explorer_reports_the_score_ratio() {
        let v: Value = serde_json::from_str(&flop_view(512, 64, 16, 32)).unwrap();
        assert!((v["score_ratio"].as_f64().unwrap() - 43.56).abs() < 1e-9);
        assert_eq!(v["compression_ratio"], 8.0);
        assert!(v["total_ratio"].as_f64().unwrap() > 1.0);
    }

    #[test]
    fn compress_and_attention_views() {
        let d = Demo::native(1).unwrap();
        let v: Value = serde_json::from_str(&d.compress_json("The archive opened in 1921.", 4).unwrap()).unwrap();
        assert_eq!(v["tokens"], 27);
        assert_eq!(v["augmented"].as_array().unwrap().len(), 31);
        assert_eq!(v["augmented"][27], "<m0>");
        assert_eq!(v["projected_norms"].as_array().unwrap().len(), 4);
        assert_eq!(v["decoder_width"], 128);

        let a: Value = serde_json::from_str(&d.attention_json("abc", 2, 1, 3).unwrap()).unwrap();
        let w: Vec<f64> = a["weights"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
        assert_eq!(w.len(), 25);
        for r in 0..5 {
            let row = &w[r * 5..r * 5 + 5];
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-5);
            assert!(row[r + 1..].iter().all(|&x| x == 0.0), "causal");
        }
        assert!(d.attention_json("abc", 2, 9, 0).is_err());
        assert!(d.compress_json("", 2).is_err());
    }
}
