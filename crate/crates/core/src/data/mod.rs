//! Corpora of (context, prompt, response) triplets: JSONL ingestion, seeded
//! synthetic generation, continual splits and batching.

mod synthetic;

use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::tokenizer::{TokenId, Tokenizer, PAD};

pub use synthetic::{generate_synthetic, SyntheticProfile};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    ContextualQa,
    NumericQa,
    Rephrasing,
    Summarization,
    TitleKeywords,
    Continuation,
}

impl Category {
    pub const ALL: [Category; 6] = [
        Category::ContextualQa,
        Category::NumericQa,
        Category::Rephrasing,
        Category::Summarization,
        Category::TitleKeywords,
        Category::Continuation,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Category::ContextualQa => "contextual_qa",
            Category::NumericQa => "numeric_qa",
            Category::Rephrasing => "rephrasing",
            Category::Summarization => "summarization",
            Category::TitleKeywords => "title_keywords",
            Category::Continuation => "continuation",
        }
    }

    /// Share of each category in the reference test set, in basis points.
    pub fn reference_share_bp(self) -> u32 {
        match self {
            Category::ContextualQa => 5636,
            Category::NumericQa => 919,
            Category::Rephrasing => 686,
            Category::Summarization => 708,
            Category::TitleKeywords => 1378,
            Category::Continuation => 673,
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Category {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Category::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown category `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub context: String,
    pub prompt: String,
    pub response: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<Category>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Corpus {
    pub samples: Vec<Sample>,
    pub provenance: String,
    pub seed: Option<u64>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Training needs at least one sample.
    pub fn require_nonempty(&self) -> Result<()> {
        if self.samples.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        Ok(())
    }
}

/// Reads one JSON object per line. Blank lines are skipped; unknown keys are
/// ignored. An empty file yields an empty corpus.
pub fn load_corpus(path: &Path) -> Result<Corpus> {
    let text = fs::read_to_string(path)?;
    let mut samples = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        samples.push(parse_line(path, i + 1, line)?);
    }
    Ok(Corpus {
        samples,
        provenance: path.display().to_string(),
        seed: None,
    })
}

fn parse_line(path: &Path, line: usize, text: &str) -> Result<Sample> {
    let parse_err = |message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let value: Value = serde_json::from_str(text).map_err(|e| parse_err(e.to_string()))?;
    let obj = value
        .as_object()
        .ok_or_else(|| parse_err("expected a JSON object".into()))?;
    let field = |name: &'static str| -> Result<String> {
        match obj.get(name) {
            None | Some(Value::Null) => Err(Error::Schema {
                path: path.to_path_buf(),
                line,
                field: name,
            }),
            Some(Value::String(s)) => Ok(s.clone()),
            Some(other) => Err(parse_err(format!("field `{name}` must be a string, found {other}"))),
        }
    };
    let context = field("context")?;
    if context.is_empty() {
        return Err(parse_err("field `context` must be nonempty".into()));
    }
    let category = match obj.get("category") {
        None | Some(Value::Null) => None,
        Some(Value::String(s)) => Some(s.parse::<Category>().map_err(|e| parse_err(e.to_string()))?),
        Some(other) => return Err(parse_err(format!("field `category` must be a string, found {other}"))),
    };
    Ok(Sample {
        context,
        prompt: field("prompt")?,
        response: field("response")?,
        category,
    })
}

pub fn write_corpus(path: &Path, corpus: &Corpus) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for s in &corpus.samples {
        serde_json::to_writer(&mut w, s).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Splits at `round(f * len)` for `f ~ U[0.25, 0.75]`, clamped so both halves
/// are nonempty.
pub fn split_for_continual<R: Rng + ?Sized>(tokens: &[TokenId], rng: &mut R) -> Result<(Vec<TokenId>, Vec<TokenId>)> {
    let len = tokens.len();
    if len < 2 {
        return Err(Error::Split(len));
    }
    let f: f64 = rng.gen_range(0.25..=0.75);
    let idx = ((f * len as f64).round() as usize).clamp(1, len - 1);
    Ok((tokens[..idx].to_vec(), tokens[idx..].to_vec()))
}

/// A group of samples with their contexts left-padded to a common augmented
/// length (memory tokens always occupy the last `N` positions).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    /// Positions in the source corpus.
    pub indices: Vec<usize>,
    /// `[PAD..., context..., memory_0..memory_{N-1}]`, all the same length.
    pub tokens: Vec<Vec<TokenId>>,
    /// Leading pad count per row.
    pub pad: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Row `i` without its padding.
    pub fn unpadded(&self, i: usize) -> &[TokenId] {
        &self.tokens[i][self.pad[i]..]
    }
}

/// Seeded shuffle then chunking; the final short batch is kept.
pub fn batchify(
    corpus: &Corpus,
    tokenizer: &Tokenizer,
    batch_size: usize,
    n_memory: usize,
    seed: u64,
) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::Usage("batch size must be at least 1".into()));
    }
    let memory = tokenizer.memory_token_ids(n_memory)?;
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(order
        .chunks(batch_size)
        .map(|idx| {
            let rows: Vec<Vec<TokenId>> = idx
                .iter()
                .map(|&i| {
                    let mut r = tokenizer.encode(&corpus.samples[i].context);
                    r.extend_from_slice(&memory);
                    r
                })
                .collect();
            let width = rows.iter().map(Vec::len).max().unwrap_or(0);
            let pad: Vec<usize> = rows.iter().map(|r| width - r.len()).collect();
            let tokens = rows
                .into_iter()
                .zip(&pad)
                .map(|(r, &p)| {
                    let mut row = vec![PAD; p];
                    row.extend(r);
                    row
                })
                .collect();
            Batch {
                indices: idx.to_vec(),
                tokens,
                pad,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_forced_case() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..50 {
            assert_eq!(split_for_continual(&[1, 2], &mut rng).unwrap(), (vec![1], vec![2]));
        }
        assert!(matches!(split_for_continual(&[1], &mut rng), Err(Error::Split(1))));
        assert!(matches!(split_for_continual(&[], &mut rng), Err(Error::Split(0))));
    }

    #[test]
    fn split_bounds_for_100() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let toks: Vec<u32> = (0..100).collect();
        for _ in 0..500 {
            let (a, b) = split_for_continual(&toks, &mut rng).unwrap();
            assert!((25..=75).contains(&a.len()));
            assert_eq!([a, b].concat(), toks);
        }
    }

    #[test]
    fn category_names_round_trip() {
        for c in Category::ALL {
            assert_eq!(c.name().parse::<Category>().unwrap(), c);
            assert_eq!(serde_json::to_string(&c).unwrap(), format!("\"{}\"", c.name()));
        }
        let total: u32 = Category::ALL.iter().map(|c| c.reference_share_bp()).sum();
        assert_eq!(total, 10_000);
    }

    #[test]
    fn batch_sizes_and_padding() {
        let corpus = Corpus {
            samples: (0..10)
                .map(|i| Sample {
                    context: "x".repeat(i + 1),
                    prompt: String::new(),
                    response: String::new(),
                    category: None,
                })
                .collect(),
            ..Default::default()
        };
        let tok = Tokenizer::default();
        let batches = batchify(&corpus, &tok, 4, 3, 7).unwrap();
        assert_eq!(batches.iter().map(Batch::len).collect::<Vec<_>>(), vec![4, 4, 2]);
        for b in &batches {
            let w = b.tokens[0].len();
            for (i, row) in b.tokens.iter().enumerate() {
                assert_eq!(row.len(), w);
                assert_eq!(&row[w - 3..], &[261, 262, 263]);
                assert!(row[..b.pad[i]].iter().all(|&t| t == PAD));
                let ctx = &corpus.samples[b.indices[i]].context;
                assert_eq!(b.unpadded(i).len(), ctx.len() + 3);
            }
        }
        assert_eq!(batches, batchify(&corpus, &tok, 4, 3, 7).unwrap());
        assert!(matches!(batchify(&corpus, &tok, 0, 3, 7), Err(Error::Usage(_))));
    }
}
