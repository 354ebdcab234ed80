use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
/// Byte `b` maps to id `b + BYTE_OFFSET`.
pub const BYTE_OFFSET: usize = 3;
pub const VOCAB_SIZE: usize = 256 + BYTE_OFFSET;

/// A tokenized caption. `ids` is never empty.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TokenSequence {
    ids: Vec<usize>,
    has_eos: bool,
}

impl TokenSequence {
    pub fn new(ids: Vec<usize>) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::Contract("token sequences need at least one id".into()));
        }
        if let Some(bad) = ids.iter().find(|&&id| id >= VOCAB_SIZE) {
            return Err(Error::Index(format!("token id {bad} outside vocabulary")));
        }
        let has_eos = ids.last() == Some(&EOS);
        Ok(TokenSequence { ids, has_eos })
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn has_eos(&self) -> bool {
        self.has_eos
    }

    /// Whether `self` is `other` cut to some length with EOS re-appended.
    pub fn is_capped_prefix_of(&self, other: &TokenSequence) -> bool {
        if self.len() > other.len() {
            return false;
        }
        if self == other {
            return true;
        }
        let body = &self.ids[..self.len() - 1];
        self.has_eos && other.ids.starts_with(body)
    }
}

pub fn tokenize(text: &str) -> TokenSequence {
    tokenize_bytes(text.as_bytes())
}

pub fn tokenize_bytes(bytes: &[u8]) -> TokenSequence {
    let mut ids = Vec::with_capacity(bytes.len() + 2);
    ids.push(BOS);
    ids.extend(bytes.iter().map(|&b| b as usize + BYTE_OFFSET));
    ids.push(EOS);
    TokenSequence { ids, has_eos: true }
}

/// Bytes of the non-special tokens.
pub fn detokenize(seq: &TokenSequence) -> Vec<u8> {
    seq.ids
        .iter()
        .filter(|&&id| id >= BYTE_OFFSET)
        .map(|&id| (id - BYTE_OFFSET) as u8)
        .collect()
}

/// Caps a sequence at `limit` tokens, keeping the first `limit - 1` ids and
/// closing with EOS.
pub fn truncate(seq: &TokenSequence, limit: usize) -> Result<TokenSequence> {
    if limit < 2 {
        return Err(Error::Contract(format!("truncation limit must be >= 2, got {limit}")));
    }
    if seq.len() <= limit {
        return Ok(seq.clone());
    }
    let mut ids = seq.ids[..limit - 1].to_vec();
    ids.push(EOS);
    Ok(TokenSequence { ids, has_eos: true })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_text() {
        let t = tokenize("");
        assert_eq!(t.ids(), &[BOS, EOS]);
        assert_eq!(t.len(), 2);
    }

    #[test]
    fn byte_mapping() {
        let t = tokenize("ab");
        assert_eq!(t.ids(), &[BOS, b'a' as usize + 3, b'b' as usize + 3, EOS]);
    }

    #[test]
    fn truncation_examples() {
        let t50 = tokenize(&"x".repeat(48));
        assert_eq!(truncate(&t50, 77).unwrap(), t50);

        let t100 = tokenize(&"y".repeat(98));
        let cut = truncate(&t100, 77).unwrap();
        assert_eq!(cut.len(), 77);
        assert_eq!(*cut.ids().last().unwrap(), EOS);
        assert!(cut.is_capped_prefix_of(&t100));

        assert_eq!(truncate(&t100, 2).unwrap().ids(), &[BOS, EOS]);
        assert!(truncate(&t100, 1).is_err());
    }

    #[test]
    fn sequence_validation() {
        assert!(TokenSequence::new(vec![]).is_err());
        assert!(TokenSequence::new(vec![BOS, VOCAB_SIZE]).is_err());
        assert!(!TokenSequence::new(vec![BOS, 10]).unwrap().has_eos());
    }

    proptest! {
        #[test]
        fn detokenize_inverts_tokenize(bytes in proptest::collection::vec(any::<u8>(), 0..64)) {
            prop_assert_eq!(detokenize(&tokenize_bytes(&bytes)), bytes);
        }

        #[test]
        fn truncate_is_idempotent(len in 0usize..200, limit in 2usize..120) {
            let s = tokenize(&"z".repeat(len));
            let once = truncate(&s, limit).unwrap();
            prop_assert_eq!(truncate(&once, limit).unwrap(), once.clone());
            prop_assert!(once.len() <= limit);
            prop_assert!(once.is_capped_prefix_of(&s));
        }
    }
}
