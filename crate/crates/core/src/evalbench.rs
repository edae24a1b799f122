//! Restoration and answer scoring, closed-form FLOP accounting and the
//! compressed-vs-full-context latency bench.

use std::collections::BTreeMap;
use std::thread;
use std::time::Instant;

use serde::Serialize;

use crate::compression::{ContextEmbedding, Pipeline};
use crate::data::{Corpus, Sample};
use crate::error::{Error, Result};
use crate::tensor::counter::{Component, Counts};
use crate::tensor::Float;
use crate::tokenizer::TokenId;
use crate::training::{Stage, TrainState};
use crate::transformer::{generate, DecoderConfig, DecoderModel, GenerateOptions};

/// Levenshtein distance with unit costs.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// `1 - distance / max_len`; two empty sequences are identical.
pub fn edit_similarity<T: PartialEq>(a: &[T], b: &[T]) -> f64 {
    let longest = a.len().max(b.len());
    if longest == 0 {
        return 1.0;
    }
    1.0 - edit_distance(a, b) as f64 / longest as f64
}

/// Edit similarity over whitespace-separated words.
pub fn word_similarity(a: &str, b: &str) -> f64 {
    let wa: Vec<&str> = a.split_whitespace().collect();
    let wb: Vec<&str> = b.split_whitespace().collect();
    edit_similarity(&wa, &wb)
}

/// Lowercase, trim and collapse runs of whitespace.
pub fn normalize(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

/// Outcome for one sample.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Scored {
    pub category: String,
    /// Output equals the reference exactly.
    pub exact: bool,
    /// Exact after normalisation, or the normalised reference occurs in the
    /// normalised output.
    pub correct: bool,
    /// Positions where output and reference agree.
    pub matched_tokens: usize,
    pub reference_tokens: usize,
    pub similarity: f64,
}

impl Scored {
    pub fn new(category: &str, reference: &[TokenId], output: &[TokenId], reference_text: &str, output_text: &str) -> Self {
        let (nr, no) = (normalize(reference_text), normalize(output_text));
        Scored {
            category: category.to_string(),
            exact: reference == output,
            correct: nr == no || (!nr.is_empty() && no.contains(&nr)),
            matched_tokens: reference.iter().zip(output).filter(|(a, b)| a == b).count(),
            reference_tokens: reference.len(),
            similarity: edit_similarity(reference, output),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct CategoryScore {
    pub count: usize,
    pub exact: usize,
    pub correct: usize,
    pub exact_rate: f64,
    pub correct_rate: f64,
    /// Micro-averaged position-wise token agreement.
    pub token_accuracy: f64,
    /// Mean normalised edit similarity.
    pub edit_similarity: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct AccuracyReport {
    pub categories: BTreeMap<String, CategoryScore>,
    pub total: usize,
    /// Count-weighted mean of per-category exact-match rates.
    pub weighted_average: f64,
    /// Count-weighted mean of per-category lenient (`correct`) rates.
    pub weighted_correct: f64,
    pub token_accuracy: f64,
    pub edit_similarity: f64,
}

impl AccuracyReport {
    pub fn from_scores(scores: &[Scored]) -> Self {
        let mut groups: BTreeMap<String, Vec<&Scored>> = BTreeMap::new();
        for s in scores {
            groups.entry(s.category.clone()).or_default().push(s);
        }
        let mut categories = BTreeMap::new();
        for (name, items) in groups {
            let count = items.len();
            let exact = items.iter().filter(|s| s.exact).count();
            let correct = items.iter().filter(|s| s.correct).count();
            let matched: usize = items.iter().map(|s| s.matched_tokens).sum();
            let reference: usize = items.iter().map(|s| s.reference_tokens).sum();
            categories.insert(
                name,
                CategoryScore {
                    count,
                    exact,
                    correct,
                    exact_rate: exact as f64 / count as f64,
                    correct_rate: correct as f64 / count as f64,
                    token_accuracy: ratio(matched, reference),
                    edit_similarity: items.iter().map(|s| s.similarity).sum::<f64>() / count as f64,
                },
            );
        }
        let total = scores.len();
        let weighted = |f: fn(&CategoryScore) -> f64| {
            if total == 0 {
                return 0.0;
            }
            categories.values().map(|c| c.count as f64 * f(c)).sum::<f64>() / total as f64
        };
        let matched: usize = scores.iter().map(|s| s.matched_tokens).sum();
        let reference: usize = scores.iter().map(|s| s.reference_tokens).sum();
        AccuracyReport {
            weighted_average: weighted(|c| c.exact_rate),
            weighted_correct: weighted(|c| c.correct_rate),
            token_accuracy: ratio(matched, reference),
            edit_similarity: if total == 0 {
                0.0
            } else {
                scores.iter().map(|s| s.similarity).sum::<f64>() / total as f64
            },
            categories,
            total,
        }
    }

    /// Fixed-width table for terminals.
    pub fn table(&self) -> String {
        let mut out = format!(
            "{:<16} {:>6} {:>8} {:>8} {:>9} {:>8}\n",
            "category", "count", "exact%", "lenient%", "token%", "editsim"
        );
        for (name, c) in &self.categories {
            out.push_str(&format!(
                "{:<16} {:>6} {:>8.2} {:>8.2} {:>9.2} {:>8.4}\n",
                name,
                c.count,
                100.0 * c.exact_rate,
                100.0 * c.correct_rate,
                100.0 * c.token_accuracy,
                c.edit_similarity
            ));
        }
        out.push_str(&format!(
            "{:<16} {:>6} {:>8.2} {:>8.2} {:>9.2} {:>8.4}\n",
            "weighted avg",
            self.total,
            100.0 * self.weighted_average,
            100.0 * self.weighted_correct,
            100.0 * self.token_accuracy,
            self.edit_similarity
        ));
        out
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Maps `f` over `items` on up to `threads` scoped workers; output order
/// matches input order.
pub fn par_map<I: Sync, O: Send>(items: &[I], threads: usize, f: impl Fn(&I) -> Result<O> + Sync) -> Result<Vec<O>> {
    let threads = threads.max(1).min(items.len().max(1));
    if threads == 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    let f = &f;
    let parts: Vec<Result<Vec<O>>> = thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| s.spawn(move || c.iter().map(f).collect::<Result<Vec<O>>>()))
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(items.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

fn category_of(s: &Sample) -> &'static str {
    s.category.map(|c| c.name()).unwrap_or("uncategorized")
}

/// Compresses each context, greedily restores `|C|` tokens and scores the
/// reconstruction. The state must have trained on restoration.
pub fn restoration_accuracy(state: &TrainState, corpus: &Corpus, threads: usize) -> Result<AccuracyReport> {
    let trained = state.completed.contains(&Stage::Restoration)
        || (state.stage == Some(Stage::Restoration) && state.stage_step > 0);
    if !trained {
        return Err(Error::Usage(
            "restoration accuracy needs a model trained through the restoration stage".into(),
        ));
    }
    let model = &state.model;
    let tok = model.tokenizer();
    let scores = par_map(&corpus.samples, threads, |s| {
        let ctx = tok.encode(&s.context);
        let out = model.restore(&ctx)?;
        Ok(Scored::new(category_of(s), &ctx, &out, &s.context, &tok.decode(&out)?))
    })?;
    Ok(AccuracyReport::from_scores(&scores))
}

/// Extra decode budget beyond the reference length.
pub const ANSWER_SLACK: usize = 16;

/// Answers every prompt from its compressed context and scores it against
/// the reference response.
pub fn answer_accuracy(model: &Pipeline<f32>, corpus: &Corpus, threads: usize) -> Result<AccuracyReport> {
    let tok = model.tokenizer();
    let scores = par_map(&corpus.samples, threads, |s| {
        let reference = tok.encode(&s.response);
        let out = model.answer(
            &tok.encode(&s.context),
            &tok.encode(&s.prompt),
            reference.len() + ANSWER_SLACK,
        )?;
        Ok(Scored::new(category_of(s), &reference, &out, &s.response, &tok.decode(&out)?))
    })?;
    Ok(AccuracyReport::from_scores(&scores))
}

/// Forward FLOPs by component.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct FlopCount {
    pub attention_scores: u64,
    pub attention_values: u64,
    pub projections: u64,
    pub feed_forward: u64,
    pub lm_head: u64,
    pub other: u64,
}

impl FlopCount {
    pub const FORMULAS: &'static str = "\
matmul m x k . k x n = 2mkn FLOPs; d = d_model, f = d_ff, V = vocab, L = layers
prefill of P positions, per layer: scores 2 P^2 d, values 2 P^2 d, q/k/v/o 8 P d^2, ffn 6 P d f
decode step with cache length c (new token included), per layer: scores 2 c d, values 2 c d, q/k/v/o 8 d^2, ffn 6 d f
LM head: 2 d V per prefill and per decode step (last position only)
G generated tokens = one prefill + (G - 1) decode steps; G = 0 costs nothing
encoder: prefill without LM head; projector: 2 N (d_s p + p d_l)";

    pub fn total(&self) -> u64 {
        self.attention_scores + self.attention_values + self.projections + self.feed_forward + self.lm_head + self.other
    }

    pub fn from_counts(c: &Counts) -> Self {
        FlopCount {
            attention_scores: c.get(Component::AttentionScores),
            attention_values: c.get(Component::AttentionValues),
            projections: c.get(Component::Projections),
            feed_forward: c.get(Component::FeedForward),
            lm_head: c.get(Component::LmHead),
            other: c.get(Component::Other),
        }
    }

    fn add(&mut self, o: &FlopCount) {
        self.attention_scores += o.attention_scores;
        self.attention_values += o.attention_values;
        self.projections += o.projections;
        self.feed_forward += o.feed_forward;
        self.lm_head += o.lm_head;
        self.other += o.other;
    }
}

/// `t` new positions attending over `c` cached-plus-new keys, no LM head.
fn layer_pass(cfg: &DecoderConfig, t: u64, c: u64) -> FlopCount {
    let d = cfg.d_model as u64;
    let f = cfg.d_ff as u64;
    let l = cfg.n_layers as u64;
    FlopCount {
        attention_scores: l * 2 * t * c * d,
        attention_values: l * 2 * t * c * d,
        projections: l * 8 * t * d * d,
        feed_forward: l * 6 * t * d * f,
        lm_head: 0,
        other: 0,
    }
}

/// Decoder FLOPs for a prefill of `prefix_tokens` positions followed by
/// `generated_tokens` greedy tokens (see [`FlopCount::FORMULAS`]).
pub fn count_flops(cfg: &DecoderConfig, prefix_tokens: usize, generated_tokens: usize) -> FlopCount {
    if generated_tokens == 0 {
        return FlopCount::default();
    }
    let head = 2 * cfg.d_model as u64 * cfg.vocab_size as u64;
    let p = prefix_tokens as u64;
    let mut total = FlopCount::default();
    if p > 0 {
        total = layer_pass(cfg, p, p);
        total.lm_head = head;
    }
    for i in 1..generated_tokens as u64 {
        let mut step = layer_pass(cfg, 1, p + i);
        step.lm_head = head;
        total.add(&step);
    }
    total
}

/// Encoder FLOPs over `tokens` positions (hidden states only).
pub fn count_encoder_flops(cfg: &DecoderConfig, tokens: usize) -> FlopCount {
    let t = tokens as u64;
    layer_pass(cfg, t, t)
}

/// Projector FLOPs for `n` rows.
pub fn count_projector_flops(d_in: usize, d_hidden: usize, d_out: usize, n: usize) -> FlopCount {
    FlopCount {
        other: 2 * n as u64 * (d_in * d_hidden + d_hidden * d_out) as u64,
        ..Default::default()
    }
}

/// One bench item: context tokens plus the query tokens fed to the main
/// decoder after the context (or after its compressed form).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BenchSample {
    pub context: Vec<TokenId>,
    pub query: Vec<TokenId>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct BenchOptions {
    pub warmup: usize,
    pub repetitions: usize,
    pub max_new: usize,
    /// Time encoder and projector as part of the compressed arm.
    pub include_compression_cost: bool,
    /// Memory tokens for the compressed arm; `None` uses the model's own.
    pub n_memory: Option<usize>,
}

impl Default for BenchOptions {
    fn default() -> Self {
        BenchOptions {
            warmup: 3,
            repetitions: 10,
            max_new: 32,
            include_compression_cost: true,
            n_memory: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LatencyReport {
    /// Median seconds per sample.
    pub compressed_s: Vec<f64>,
    pub baseline_s: Vec<f64>,
    pub compressed_mean_s: f64,
    pub baseline_mean_s: f64,
    /// `baseline_mean / compressed_mean`.
    pub improvement_factor: f64,
    pub compressed_prefill_tokens: Vec<usize>,
    pub baseline_prefill_tokens: Vec<usize>,
    pub compressed_flops: FlopCount,
    pub baseline_flops: FlopCount,
    pub options: BenchOptions,
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(|a, b| a.total_cmp(b));
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Times compressed inference (`E ++ query`) against the full-context
/// baseline (`context ++ query`) on `baseline`. Both arms greedily generate
/// exactly `max_new` tokens. Single-threaded.
pub fn bench_latency<T: Float>(
    model: &Pipeline<T>,
    baseline: &DecoderModel<T>,
    samples: &[BenchSample],
    opts: &BenchOptions,
) -> Result<LatencyReport> {
    if samples.is_empty() {
        return Err(Error::Usage("bench needs at least one sample".into()));
    }
    if opts.repetitions == 0 {
        return Err(Error::Usage("bench needs at least one repetition".into()));
    }
    let gen = GenerateOptions::greedy(opts.max_new);
    let n = opts.n_memory.unwrap_or(model.n_memory());
    let cfg = model.config();
    let mut out = LatencyReport {
        compressed_s: Vec::new(),
        baseline_s: Vec::new(),
        compressed_mean_s: 0.0,
        baseline_mean_s: 0.0,
        improvement_factor: 0.0,
        compressed_prefill_tokens: Vec::new(),
        baseline_prefill_tokens: Vec::new(),
        compressed_flops: FlopCount::default(),
        baseline_flops: FlopCount::default(),
        options: *opts,
    };
    for s in samples {
        let full: Vec<TokenId> = s.context.iter().chain(&s.query).copied().collect();
        let pre: Option<ContextEmbedding<T>> = if opts.include_compression_cost {
            None
        } else {
            Some(model.compress_with(&s.context, n)?.1)
        };
        let compressed = || -> Result<Vec<TokenId>> {
            let e = match &pre {
                Some(e) => e.clone(),
                None => model.compress_with(&s.context, n)?.1,
            };
            generate(&model.decoder, Some(&e.0), &s.query, &gen)
        };
        let base = || generate(baseline, None, &full, &gen);
        for _ in 0..opts.warmup {
            compressed()?;
            base()?;
        }
        let (mut tc, mut tb) = (Vec::new(), Vec::new());
        for _ in 0..opts.repetitions {
            let t = Instant::now();
            compressed()?;
            tc.push(t.elapsed().as_secs_f64());
            let t = Instant::now();
            base()?;
            tb.push(t.elapsed().as_secs_f64());
        }
        out.compressed_s.push(median(&mut tc));
        out.baseline_s.push(median(&mut tb));
        out.compressed_prefill_tokens.push(n + s.query.len());
        out.baseline_prefill_tokens.push(full.len());

        let mut cf = count_flops(&cfg.decoder, n + s.query.len(), opts.max_new);
        if opts.include_compression_cost {
            cf.add(&count_encoder_flops(&cfg.encoder, s.context.len() + n));
            cf.add(&count_projector_flops(cfg.encoder.d_model, cfg.d_proj, cfg.decoder.d_model, n));
        }
        out.compressed_flops.add(&cf);
        out.baseline_flops.add(&count_flops(baseline.config(), full.len(), opts.max_new));
    }
    out.compressed_mean_s = mean(&out.compressed_s);
    out.baseline_mean_s = mean(&out.baseline_s);
    out.improvement_factor = out.baseline_mean_s / out.compressed_mean_s;
    Ok(out)
}
