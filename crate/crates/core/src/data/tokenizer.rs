//! Fixed 64-symbol character vocabulary.

use crate::error::{bail, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
pub const VOCAB_SIZE: usize = 64;

const SYMBOLS: &str = " abcdefghijklmnopqrstuvwxyz0123456789.,:;?!-<>/()'\"+=%_#*&[]";
const FIRST: u32 = 4;

/// Text to ids. Letters are lowercased; characters outside the vocabulary
/// map to [`UNK`].
pub fn encode(text: &str) -> Vec<u32> {
    text.chars()
        .map(|c| {
            let c = c.to_ascii_lowercase();
            SYMBOLS.find(c).map_or(UNK, |i| FIRST + i as u32)
        })
        .collect()
}

/// Like [`encode`] but refuses characters outside the vocabulary.
pub fn encode_strict(text: &str) -> Result<Vec<u32>> {
    let ids = encode(text);
    if let Some(p) = ids.iter().position(|&i| i == UNK) {
        bail!(Format, "character {:?} is outside the vocabulary", text.chars().nth(p).unwrap_or('?'));
    }
    Ok(ids)
}

/// Ids to text; special ids are dropped.
pub fn decode(ids: &[u32]) -> String {
    let sym: Vec<char> = SYMBOLS.chars().collect();
    ids.iter()
        .filter_map(|&i| i.checked_sub(FIRST).and_then(|k| sym.get(k as usize)).copied())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocabulary_is_full() {
        assert_eq!(FIRST as usize + SYMBOLS.chars().count(), VOCAB_SIZE);
        let mut v: Vec<char> = SYMBOLS.chars().collect();
        v.sort();
        v.dedup();
        assert_eq!(v.len(), SYMBOLS.len());
    }

    #[test]
    fn round_trip_and_unknowns() {
        let t = "<think>a pseudo-ct image, radius 3.</think> yes";
        assert_eq!(decode(&encode(t)), t);
        assert_eq!(encode("A"), encode("a"));
        assert_eq!(encode("é"), vec![UNK]);
        assert!(encode_strict("tab\there").is_err());
        assert!(encode(t).iter().all(|&i| (i as usize) < VOCAB_SIZE));
    }
}
