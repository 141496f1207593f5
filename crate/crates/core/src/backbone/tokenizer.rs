use std::ops::Range;

use crate::error::{Error, Result};

/// Token ids plus the span of placeholder slots that learnable prefix
/// embeddings replace at the embedding layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub prefix_slots: Option<Range<usize>>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Byte-level tokenizer: one token per UTF-8 byte, plus start/end markers.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ByteTokenizer;

impl ByteTokenizer {
    pub const START: u32 = 256;
    pub const END: u32 = 257;
    pub const VOCAB_SIZE: usize = 258;

    /// Id of the literal `X` used for prefix placeholders.
    pub const PLACEHOLDER: u32 = b'X' as u32;

    pub fn encode(&self, text: &str) -> TokenSequence {
        self.encode_with_prefix(text, 0)
    }

    /// `[START, X × prefix_len, bytes…, END]`; the prefix sits immediately
    /// after the start marker.
    pub fn encode_with_prefix(&self, text: &str, prefix_len: usize) -> TokenSequence {
        let mut ids = Vec::with_capacity(text.len() + prefix_len + 2);
        ids.push(Self::START);
        ids.extend(std::iter::repeat_n(Self::PLACEHOLDER, prefix_len));
        ids.extend(text.bytes().map(u32::from));
        ids.push(Self::END);
        TokenSequence {
            ids,
            prefix_slots: (prefix_len > 0).then(|| 1..1 + prefix_len),
        }
    }

    pub fn check_fits(&self, tokens: &TokenSequence, context_length: usize) -> Result<()> {
        if tokens.len() > context_length {
            return Err(Error::InputContract(format!(
                "token sequence of length {} exceeds context length {context_length}",
                tokens.len()
            )));
        }
        Ok(())
    }
}
