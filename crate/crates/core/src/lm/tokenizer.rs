//! Byte-level tokenizer.
//!
//! Ids `0..=255` are the raw bytes; the five specials follow them, so the
//! vocabulary is 261 ids and any byte string round-trips exactly.

use crate::error::{Error, Result};

pub const BYTE_TOKENS: u32 = 256;
pub const BOS: u32 = 256;
pub const EOS: u32 = 257;
pub const IMG_START: u32 = 258;
pub const IMG_END: u32 = 259;
pub const PAD: u32 = 260;
pub const SPECIAL_COUNT: usize = 5;
pub const VOCAB_SIZE: usize = BYTE_TOKENS as usize + SPECIAL_COUNT;

pub fn is_special(id: u32) -> bool {
    (BYTE_TOKENS..VOCAB_SIZE as u32).contains(&id)
}

pub fn tokenize(text: impl AsRef<[u8]>) -> Vec<u32> {
    text.as_ref().iter().map(|&b| b as u32).collect()
}

/// Bytes for `ids`, dropping known specials.
pub fn detokenize(ids: &[u32]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(ids.len());
    for &id in ids {
        if id < BYTE_TOKENS {
            out.push(id as u8);
        } else if !is_special(id) {
            return Err(Error::Decode(id));
        }
    }
    Ok(out)
}

/// [`detokenize`] followed by lossy UTF-8 decoding.
pub fn detokenize_lossy(ids: &[u32]) -> Result<String> {
    Ok(String::from_utf8_lossy(&detokenize(ids)?).into_owned())
}
