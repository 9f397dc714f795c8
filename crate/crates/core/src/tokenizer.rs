//! Byte-level vocabulary with reserved control tokens.
//!
//! Data tokens `0..256` are the raw byte values, so encoding is total and
//! `decode ∘ encode` is the identity on arbitrary bytes. Reserved tokens
//! (EOS, BOS, PAD, ...) follow the byte range and decode to nothing.

use crate::error::{Error, Result};

pub type TokenSequence = Vec<usize>;

pub const BYTE_TOKENS: usize = 256;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    reserved: Vec<String>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::byte_level()
    }
}

impl Vocabulary {
    /// 256 byte tokens followed by EOS, BOS and PAD (V = 259).
    pub fn byte_level() -> Self {
        Self {
            reserved: vec!["<eos>".into(), "<bos>".into(), "<pad>".into()],
        }
    }

    /// Rebuild from reserved-token names, e.g. when loading a checkpoint.
    /// The first three names must be the EOS, BOS and PAD tokens.
    pub fn from_reserved(names: Vec<String>) -> Result<Self> {
        if names.len() < 3 {
            return Err(Error::format(
                "vocabulary",
                "expected at least the EOS, BOS and PAD reserved tokens",
            ));
        }
        let mut seen = std::collections::HashSet::new();
        for n in &names {
            if !seen.insert(n) {
                return Err(Error::format("vocabulary", format!("duplicate reserved token {n}")));
            }
        }
        Ok(Self { reserved: names })
    }

    /// Add a reserved token and return its index.
    pub fn add_reserved(&mut self, name: &str) -> Result<usize> {
        if self.reserved.iter().any(|r| r == name) {
            return Err(Error::Contract(format!("reserved token {name} already exists")));
        }
        self.reserved.push(name.to_string());
        Ok(self.size() - 1)
    }

    pub fn size(&self) -> usize {
        BYTE_TOKENS + self.reserved.len()
    }

    pub fn eos(&self) -> usize {
        BYTE_TOKENS
    }

    pub fn bos(&self) -> usize {
        BYTE_TOKENS + 1
    }

    pub fn pad(&self) -> usize {
        BYTE_TOKENS + 2
    }

    pub fn reserved_names(&self) -> &[String] {
        &self.reserved
    }

    pub fn is_reserved(&self, token: usize) -> bool {
        (BYTE_TOKENS..self.size()).contains(&token)
    }

    /// Byte representation of a token; reserved tokens are empty.
    pub fn token_bytes(&self, token: usize) -> Result<&'static [u8]> {
        const BYTES: [u8; 256] = {
            let mut b = [0u8; 256];
            let mut i = 0;
            while i < 256 {
                b[i] = i as u8;
                i += 1;
            }
            b
        };
        match token {
            t if t < BYTE_TOKENS => Ok(&BYTES[t..t + 1]),
            t if t < self.size() => Ok(&[]),
            t => Err(Error::Index {
                what: "token",
                index: t,
                size: self.size(),
            }),
        }
    }

    pub fn encode(&self, text: &[u8]) -> TokenSequence {
        text.iter().map(|&b| b as usize).collect()
    }

    pub fn encode_str(&self, text: &str) -> TokenSequence {
        self.encode(text.as_bytes())
    }

    pub fn decode(&self, tokens: &[usize]) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(tokens.len());
        for &t in tokens {
            out.extend_from_slice(self.token_bytes(t)?);
        }
        Ok(out)
    }

    /// Decode and replace invalid UTF-8 sequences.
    pub fn decode_lossy(&self, tokens: &[usize]) -> Result<String> {
        Ok(String::from_utf8_lossy(&self.decode(tokens)?).into_owned())
    }

    pub fn validate(&self, tokens: &[usize]) -> Result<()> {
        match tokens.iter().find(|&&t| t >= self.size()) {
            Some(&t) => Err(Error::Index {
                what: "token",
                index: t,
                size: self.size(),
            }),
            None => Ok(()),
        }
    }
}
