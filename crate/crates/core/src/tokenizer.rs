//! Byte-level tokenizer with control and memory tokens.
//!
//! Ids `0..256` are raw bytes. Five control tokens follow (`pad`, `bos`,
//! `eos`, `restore`, `continue`), then `memory_0 .. memory_{N_max-1}` starting
//! at id 261.

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const BYTE_VOCAB: u32 = 256;
pub const PAD: TokenId = 256;
pub const BOS: TokenId = 257;
pub const EOS: TokenId = 258;
pub const RESTORE: TokenId = 259;
pub const CONTINUE: TokenId = 260;
pub const MEMORY_BASE: TokenId = 261;

/// Size of the vocabulary without memory tokens (bytes plus control tokens).
pub const BASE_VOCAB: usize = MEMORY_BASE as usize;

pub const DEFAULT_MAX_MEMORY: usize = 64;

const CONTROL_NAMES: [&str; 5] = ["pad", "bos", "eos", "restore", "continue"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Tokenizer {
    max_memory: usize,
}

impl Default for Tokenizer {
    fn default() -> Self {
        Tokenizer::new(DEFAULT_MAX_MEMORY)
    }
}

impl Tokenizer {
    pub fn new(max_memory: usize) -> Self {
        Tokenizer { max_memory }
    }

    /// `N_max`, the number of distinct memory tokens.
    pub fn max_memory(&self) -> usize {
        self.max_memory
    }

    /// Total vocabulary including memory tokens: `256 + 5 + N_max`.
    pub fn vocab_size(&self) -> usize {
        BASE_VOCAB + self.max_memory
    }

    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        text.bytes().map(TokenId::from).collect()
    }

    /// Bytes become text (invalid sequences turn into U+FFFD); special ids
    /// render as their bracketed names.
    pub fn decode(&self, ids: &[TokenId]) -> Result<String> {
        let mut out = String::new();
        let mut bytes = Vec::new();
        for &id in ids {
            if id < BYTE_VOCAB {
                bytes.push(id as u8);
                continue;
            }
            let name = self.special_name(id)?;
            out.push_str(&String::from_utf8_lossy(&bytes));
            bytes.clear();
            out.push('[');
            out.push_str(&name);
            out.push(']');
        }
        out.push_str(&String::from_utf8_lossy(&bytes));
        Ok(out)
    }

    fn special_name(&self, id: TokenId) -> Result<String> {
        if id < MEMORY_BASE {
            return Ok(CONTROL_NAMES[(id - BYTE_VOCAB) as usize].to_string());
        }
        let slot = (id - MEMORY_BASE) as usize;
        if slot >= self.max_memory {
            return Err(Error::Index {
                what: "vocabulary",
                index: id as usize,
                size: self.vocab_size(),
            });
        }
        Ok(format!("memory_{slot}"))
    }

    pub fn memory_token_id(&self, i: usize) -> Result<TokenId> {
        if i >= self.max_memory {
            return Err(Error::Capacity {
                requested: i + 1,
                max: self.max_memory,
            });
        }
        Ok(MEMORY_BASE + i as TokenId)
    }

    /// Ids of `memory_0 .. memory_{n-1}`.
    pub fn memory_token_ids(&self, n: usize) -> Result<Vec<TokenId>> {
        if n > self.max_memory {
            return Err(Error::Capacity {
                requested: n,
                max: self.max_memory,
            });
        }
        Ok((0..n as TokenId).map(|i| MEMORY_BASE + i).collect())
    }

    pub fn is_memory(&self, id: TokenId) -> bool {
        id >= MEMORY_BASE && ((id - MEMORY_BASE) as usize) < self.max_memory
    }
}
