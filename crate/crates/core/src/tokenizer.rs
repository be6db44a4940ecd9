//! Byte-level tokenizer shared by all backends.
//!
//! Ids 0-255 map to raw bytes; 256/257/258 are reserved for BOS, EOS and PAD.
//! Detokenization skips reserved ids, so `detokenize(tokenize(s)) == s` for
//! every UTF-8 string.

/// Token id marking beginning-of-sequence.
pub const BOS_ID: u32 = 256;
/// Token id marking end-of-sequence; greedy decoding stops on it.
pub const EOS_ID: u32 = 257;
/// Padding token id (unused by decoding, reserved in the vocabulary).
pub const PAD_ID: u32 = 258;
/// Number of ids the byte tokenizer occupies: 256 bytes + 3 reserved ids.
pub const BYTE_VOCAB_SIZE: usize = 259;

/// Maps text to token ids and back.
pub trait Tokenizer {
    fn tokenize(&self, text: &str) -> Vec<u32>;
    fn detokenize(&self, ids: &[u32]) -> String;
    fn vocab_size(&self) -> usize;
}

/// The bundled byte-level tokenizer.
#[derive(Debug, Clone, Copy, Default)]
pub struct ByteTokenizer;

impl Tokenizer for ByteTokenizer {
    fn tokenize(&self, text: &str) -> Vec<u32> {
        text.bytes().map(u32::from).collect()
    }

    fn detokenize(&self, ids: &[u32]) -> String {
        let bytes: Vec<u8> = ids
            .iter()
            .filter(|&&id| id < 256)
            .map(|&id| id as u8)
            .collect();
        // Ids below 256 are raw bytes of the original UTF-8 text; decoding a
        // pure byte sequence back is lossless. Generated sequences may form
        // invalid UTF-8, which is replaced rather than rejected.
        String::from_utf8_lossy(&bytes).into_owned()
    }

    fn vocab_size(&self) -> usize {
        BYTE_VOCAB_SIZE
    }
}
