//! Three-stage curriculum (restoration, continual, instruction) over the
//! compressor, with seeded batching and bit-exact checkpoints.

mod checkpoint;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::compression::{Pipeline, PipelineVars, Trainable};
use crate::data::{batchify, split_for_continual, Corpus};
use crate::error::{Error, Result};
use crate::tensor::{adamw_step, AdamWConfig, LrSchedule, OptimizerState, Tape, Var};
use crate::tokenizer::{TokenId, BOS, CONTINUE, EOS, PAD, RESTORE};

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Restoration,
    Continual,
    Instruction,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::Restoration, Stage::Continual, Stage::Instruction];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Restoration => "restoration",
            Stage::Continual => "continual",
            Stage::Instruction => "instruction",
        }
    }

    fn tag(self) -> u64 {
        match self {
            Stage::Restoration => 1,
            Stage::Continual => 2,
            Stage::Instruction => 3,
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage `{s}` (expected restoration, continual or instruction)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub stage: Stage,
    pub steps: usize,
    pub batch_size: usize,
    /// Longest context (in tokens) accepted by this stage.
    pub max_context: usize,
    pub lr: f32,
    pub warmup: usize,
    /// Final learning rate as a fraction of `lr`.
    pub min_lr_ratio: f32,
    /// Global gradient-norm clip; `0` disables clipping.
    pub clip_norm: f32,
    pub optimizer: AdamWConfig,
    pub trainable: Trainable,
    pub seed: u64,
}

impl StageConfig {
    pub fn new(stage: Stage, steps: usize, seed: u64) -> Self {
        StageConfig {
            stage,
            steps,
            batch_size: 8,
            max_context: 512,
            lr: 1e-3,
            warmup: (steps / 20).min(100),
            min_lr_ratio: 0.1,
            clip_norm: 1.0,
            optimizer: AdamWConfig::default(),
            trainable: Trainable::default(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("steps must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !self.trainable.any() {
            return Err(Error::Config("at least one parameter group must be trainable".into()));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        Ok(())
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            peak: self.lr,
            warmup: self.warmup as u64,
            total: self.steps as u64,
            min_ratio: self.min_lr_ratio,
        }
    }
}

/// Everything needed to continue training bit-exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub model: Pipeline<f32>,
    pub optimizer: Option<OptimizerState>,
    /// Stage in progress (or last finished).
    pub stage: Option<Stage>,
    /// Steps completed in the current stage.
    pub stage_step: usize,
    /// Seed of the current stage; together with `stage_step` this is the
    /// complete RNG state (all randomness is derived from counters).
    pub stage_seed: u64,
    /// Per-step loss of the current stage.
    pub loss_history: Vec<f32>,
    /// Stages run to completion, in order.
    pub completed: Vec<Stage>,
}

impl TrainState {
    pub fn new(model: Pipeline<f32>) -> Self {
        TrainState {
            model,
            optimizer: None,
            stage: None,
            stage_step: 0,
            stage_seed: 0,
            loss_history: Vec::new(),
            completed: Vec::new(),
        }
    }
}

/// One training sequence: a context for the encoder plus the main decoder's
/// token input (after the `N` prefix rows) and per-position targets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub context: Vec<TokenId>,
    pub input: Vec<TokenId>,
    /// One target per decoder position (`N + input.len()`).
    pub targets: Vec<TokenId>,
    pub mask: Vec<bool>,
}

impl Example {
    /// Decoder input `[E, control, s_1 .. s_{k-1}]` predicting `s_1 .. s_k`.
    fn teacher_forced(context: Vec<TokenId>, control: TokenId, seq: &[TokenId], loss_from: usize, n: usize) -> Self {
        let mut input = Vec::with_capacity(seq.len());
        input.push(control);
        input.extend_from_slice(&seq[..seq.len() - 1]);
        let mut targets = vec![PAD; n];
        targets.extend_from_slice(seq);
        let mut mask = vec![false; n + seq.len()];
        for m in &mut mask[n + loss_from..] {
            *m = true;
        }
        Example {
            context,
            input,
            targets,
            mask,
        }
    }

    /// `[E, restore, C]` with loss on `C`.
    pub fn restoration(context: &[TokenId], n: usize) -> Result<Self> {
        if context.is_empty() {
            return Err(Error::InvalidBatch("empty context".into()));
        }
        Ok(Self::teacher_forced(context.to_vec(), RESTORE, context, 0, n))
    }

    /// `[E(C1), continue, C2]` with loss on `C2`.
    pub fn continual(c1: &[TokenId], c2: &[TokenId], n: usize) -> Result<Self> {
        if c1.is_empty() || c2.is_empty() {
            return Err(Error::Split(c1.len() + c2.len()));
        }
        Ok(Self::teacher_forced(c1.to_vec(), CONTINUE, c2, 0, n))
    }

    /// `[E, bos, Q, R, eos]` with loss on `R` and `eos`.
    pub fn instruction(context: &[TokenId], prompt: &[TokenId], response: &[TokenId], n: usize) -> Result<Self> {
        if context.is_empty() {
            return Err(Error::InvalidBatch("empty context".into()));
        }
        let mut seq = Vec::with_capacity(prompt.len() + response.len() + 1);
        seq.extend_from_slice(prompt);
        seq.extend_from_slice(response);
        seq.push(EOS);
        // input is [bos, Q, R]; targets past the prompt are R and eos
        Ok(Self::teacher_forced(context.to_vec(), BOS, &seq, prompt.len(), n))
    }

    pub fn target_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Mean cross entropy of one example, recorded on `tape`.
pub fn example_loss(model: &Pipeline<f32>, tape: &mut Tape<f32>, vars: &PipelineVars, ex: &Example) -> Result<Var> {
    let e = model.compress_taped(tape, vars, &ex.context)?;
    let h = model.decoder.hidden_taped(tape, &vars.decoder, Some(e), &ex.input)?;
    let logits = model.decoder.logits_taped(tape, &vars.decoder, h)?;
    tape.cross_entropy(logits, &ex.targets, &ex.mask)
}

fn check_example(model: &Pipeline<f32>, ex: &Example, max_context: usize, idx: usize) -> Result<()> {
    let n = model.n_memory();
    let limit = max_context.min(model.config().compression.max_context);
    if ex.context.len() > limit {
        return Err(Error::InvalidBatch(format!(
            "sample {idx}: context of {} tokens exceeds the cap of {limit}",
            ex.context.len()
        )));
    }
    let dec_len = n + ex.input.len();
    if dec_len > model.config().decoder.max_seq_len {
        return Err(Error::InvalidBatch(format!(
            "sample {idx}: decoder sequence of {dec_len} positions exceeds {}",
            model.config().decoder.max_seq_len
        )));
    }
    if ex.targets.len() != dec_len || ex.mask.len() != dec_len {
        return Err(Error::InvalidBatch(format!("sample {idx}: targets do not cover the decoder sequence")));
    }
    Ok(())
}

/// Token-weighted mean loss over examples without touching parameters.
pub fn evaluate_loss(model: &Pipeline<f32>, examples: &[Example]) -> Result<f32> {
    let total: usize = examples.iter().map(Example::target_count).sum();
    if total == 0 {
        return Err(Error::InvalidBatch("batch has no target tokens".into()));
    }
    let mut sum = 0.0f64;
    for ex in examples {
        let mut tape = Tape::new();
        let vars = model.register(
            &mut tape,
            Trainable {
                encoder: false,
                projector: false,
                decoder: false,
            },
        );
        let l = example_loss(model, &mut tape, &vars, ex)?;
        sum += tape.value(l).data()[0] as f64 * ex.target_count() as f64;
    }
    Ok((sum / total as f64) as f32)
}

/// Gradients of the token-weighted mean loss, in `model.params()` order;
/// `None` for frozen tensors. Examples run one at a time on their own tape.
pub fn batch_gradients(
    model: &Pipeline<f32>,
    examples: &[Example],
    trainable: Trainable,
) -> Result<(f32, Vec<Option<Vec<f32>>>)> {
    let total: usize = examples.iter().map(Example::target_count).sum();
    if total == 0 {
        return Err(Error::InvalidBatch("batch has no target tokens".into()));
    }
    let shapes: Vec<usize> = model.params().iter().map(|(_, t)| t.numel()).collect();
    let mut grads: Vec<Option<Vec<f32>>> = Vec::new();
    let mut loss = 0.0f64;
    for ex in examples {
        let weight = ex.target_count() as f32 / total as f32;
        let mut tape = Tape::new();
        let vars = model.register(&mut tape, trainable);
        let l = example_loss(model, &mut tape, &vars, ex)?;
        loss += tape.value(l).data()[0] as f64 * weight as f64;
        tape.backward(l)?;
        let all = vars.all();
        if grads.is_empty() {
            grads = all
                .iter()
                .zip(&shapes)
                .map(|(&v, &n)| tape.value(v).requires_grad().then(|| vec![0.0; n]))
                .collect();
        }
        for (g, &v) in grads.iter_mut().zip(&all) {
            if let (Some(acc), Some(src)) = (g.as_mut(), tape.grad(v)) {
                for (a, s) in acc.iter_mut().zip(src) {
                    *a += weight * *s;
                }
            }
        }
    }
    Ok((loss as f32, grads))
}

/// Forward, backward and one optimizer update. Returns the batch loss.
pub fn apply_step(state: &mut TrainState, cfg: &StageConfig, examples: &[Example], lr: f32) -> Result<f32> {
    for (i, ex) in examples.iter().enumerate() {
        check_example(&state.model, ex, cfg.max_context, i)?;
    }
    let (loss, mut grads) = batch_gradients(&state.model, examples, cfg.trainable)?;
    if cfg.clip_norm > 0.0 {
        let sq: f64 = grads.iter().flatten().flatten().map(|&g| (g as f64) * (g as f64)).sum();
        let norm = sq.sqrt();
        if norm > cfg.clip_norm as f64 {
            let scale = (cfg.clip_norm as f64 / norm) as f32;
            grads.iter_mut().flatten().flatten().for_each(|g| *g *= scale);
        }
    }
    let opt = state
        .optimizer
        .get_or_insert_with(|| OptimizerState::new(cfg.optimizer, state.model.params().into_iter().map(|(_, t)| t)));
    let mut params = state.model.params_mut();
    for (p, g) in params.iter_mut().zip(grads) {
        p.set_requires_grad(g.is_some());
        p.set_grad(g)?;
    }
    adamw_step(&mut params, opt, lr)?;
    for p in params.iter_mut() {
        p.set_requires_grad(false);
    }
    if !loss.is_finite() {
        return Err(Error::NonFinite { op: "training loss" });
    }
    Ok(loss)
}

/// Deterministic 64-bit mix of a seed with counters.
fn derive_seed(parts: &[u64]) -> u64 {
    let mut h = 0x9E37_79B9_7F4A_7C15u64;
    for &p in parts {
        h ^= p;
        // splitmix64 finaliser
        h = h.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476C_E5B9_E477);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

/// Builds the examples of one stage step from corpus indices.
pub fn stage_examples(
    model: &Pipeline<f32>,
    cfg: &StageConfig,
    corpus: &Corpus,
    indices: &[usize],
    step: usize,
) -> Result<Vec<Example>> {
    let tok = model.tokenizer();
    let n = model.n_memory();
    indices
        .iter()
        .map(|&i| {
            let s = &corpus.samples[i];
            let ctx = tok.encode(&s.context);
            let ex = match cfg.stage {
                Stage::Restoration => Example::restoration(&ctx, n),
                Stage::Continual => {
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[
                        cfg.seed,
                        cfg.stage.tag(),
                        step as u64,
                        i as u64,
                    ]));
                    let (c1, c2) = split_for_continual(&ctx, &mut rng)?;
                    Example::continual(&c1, &c2, n)
                }
                Stage::Instruction => Example::instruction(&ctx, &tok.encode(&s.prompt), &tok.encode(&s.response), n),
            };
            ex.map_err(|e| Error::InvalidBatch(format!("sample {i}: {e}")))
        })
        .collect()
}

/// Corpus indices of the batch used at `step` (epochs reshuffle with a seed
/// derived from the stage seed and epoch number).
pub fn batch_indices(model: &Pipeline<f32>, cfg: &StageConfig, corpus: &Corpus, step: usize) -> Result<Vec<usize>> {
    let per_epoch = corpus.len().div_ceil(cfg.batch_size);
    let epoch = step / per_epoch;
    let seed = derive_seed(&[cfg.seed, cfg.stage.tag(), epoch as u64]);
    let batches = batchify(corpus, model.tokenizer(), cfg.batch_size, model.n_memory(), seed)?;
    Ok(batches[step % per_epoch].indices.clone())
}

/// Runs the stage to completion (resuming if `state` is mid-way through the
/// same stage and seed).
pub fn train(state: &mut TrainState, cfg: &StageConfig, corpus: &Corpus) -> Result<()> {
    train_with(state, cfg, corpus, usize::MAX, |_, _| {}).map(|_| ())
}

/// Runs at most `max_steps` further steps; returns how many ran.
pub fn train_for(state: &mut TrainState, cfg: &StageConfig, corpus: &Corpus, max_steps: usize) -> Result<usize> {
    train_with(state, cfg, corpus, max_steps, |_, _| {})
}

/// [`train_for`] with a per-step callback `(step, loss)`.
pub fn train_with(
    state: &mut TrainState,
    cfg: &StageConfig,
    corpus: &Corpus,
    max_steps: usize,
    mut on_step: impl FnMut(usize, f32),
) -> Result<usize> {
    cfg.validate()?;
    corpus.require_nonempty()?;
    let resuming = state.stage == Some(cfg.stage) && state.stage_seed == cfg.seed && state.stage_step < cfg.steps;
    if !resuming {
        state.stage = Some(cfg.stage);
        state.stage_seed = cfg.seed;
        state.stage_step = 0;
        state.loss_history.clear();
        state.optimizer = None;
    }
    let schedule = cfg.schedule();
    let mut ran = 0;
    while state.stage_step < cfg.steps && ran < max_steps {
        let step = state.stage_step;
        let mut run = || -> Result<f32> {
            let idx = batch_indices(&state.model, cfg, corpus, step)?;
            let examples = stage_examples(&state.model, cfg, corpus, &idx, step)?;
            for (ex, &i) in examples.iter().zip(&idx) {
                check_example(&state.model, ex, cfg.max_context, i)?;
            }
            let lr = schedule.at(step as u64);
            apply_step(state, cfg, &examples, lr)
        };
        let loss = run().map_err(|e| Error::Step {
            step,
            source: Box::new(e),
        })?;
        state.loss_history.push(loss);
        state.stage_step += 1;
        ran += 1;
        on_step(step, loss);
    }
    if state.stage_step == cfg.steps && state.completed.last() != Some(&cfg.stage) {
        state.completed.push(cfg.stage);
    }
    Ok(ran)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn example_layouts() {
        let ex = Example::restoration(&[10, 11, 12], 2).unwrap();
        assert_eq!(ex.input, vec![RESTORE, 10, 11]);
        assert_eq!(ex.targets, vec![PAD, PAD, 10, 11, 12]);
        assert_eq!(ex.mask, vec![false, false, true, true, true]);

        let ex = Example::instruction(&[1], &[20, 21], &[30], 1).unwrap();
        assert_eq!(ex.input, vec![BOS, 20, 21, 30]);
        assert_eq!(ex.targets, vec![PAD, 20, 21, 30, EOS]);
        assert_eq!(ex.mask, vec![false, false, false, true, true]);

        let ex = Example::continual(&[1, 2], &[3, 4], 1).unwrap();
        assert_eq!(ex.context, vec![1, 2]);
        assert_eq!(ex.input, vec![CONTINUE, 3]);
        assert_eq!(ex.target_count(), 2);
    }

    #[test]
    fn stage_names() {
        for s in Stage::ALL {
            assert_eq!(s.name().parse::<Stage>().unwrap(), s);
        }
        assert!("pretrain".parse::<Stage>().is_err());
    }

    #[test]
    fn derived_seeds_differ() {
        assert_ne!(derive_seed(&[1, 2]), derive_seed(&[2, 1]));
        assert_ne!(derive_seed(&[0]), derive_seed(&[0, 0]));
    }
}
