use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::weights::Relevance;

pub type TokenId = u32;

pub const EOS_TOKEN: &str = "<eos>";

/// Ids of the tokens the decoder treats specially.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecialTokens {
    pub eos: TokenId,
    pub both: TokenId,
    pub video: TokenId,
    pub audio: TokenId,
}

impl SpecialTokens {
    pub fn meta(&self, r: Relevance) -> TokenId {
        match r {
            Relevance::Both => self.both,
            Relevance::Video => self.video,
            Relevance::Audio => self.audio,
        }
    }

    pub fn is_special(&self, id: TokenId) -> bool {
        [self.eos, self.both, self.video, self.audio].contains(&id)
    }

    fn validate(&self, size: usize) -> Result<()> {
        let ids = [self.eos, self.both, self.video, self.audio];
        for (i, a) in ids.iter().enumerate() {
            if *a as usize >= size {
                return Err(Error::Configuration(format!(
                    "special token id {a} out of range for vocabulary of {size}"
                )));
            }
            if ids[i + 1..].contains(a) {
                return Err(Error::Configuration(format!(
                    "special token id {a} is used twice"
                )));
            }
        }
        Ok(())
    }
}

/// An ordered, duplicate-free token list with dense ids `0..len`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
    special: SpecialTokens,
}

impl Vocabulary {
    /// Builds a vocabulary from its tokens. `<eos>`, `both`, `video` and
    /// `audio` must all be present.
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as TokenId).is_some() {
                return Err(Error::invalid(format!("duplicate token {t:?}")));
            }
        }
        let find = |name: &str| {
            index.get(name).copied().ok_or_else(|| {
                Error::Configuration(format!("vocabulary lacks the {name:?} token"))
            })
        };
        let special = SpecialTokens {
            eos: find(EOS_TOKEN)?,
            both: find("both")?,
            video: find("video")?,
            audio: find("audio")?,
        };
        Ok(Self {
            tokens,
            index,
            special,
        })
    }

    /// The layout used by synthetic specs: `<eos>`, `both`, `video`, `audio`,
    /// then `content` answer tokens named `w0`, `w1`, ...
    pub fn standard(content: usize) -> Self {
        let mut tokens: Vec<String> = [EOS_TOKEN, "both", "video", "audio"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        tokens.extend((0..content).map(|i| format!("w{i}")));
        Self::new(tokens).expect("standard vocabulary is well formed")
    }

    /// A vocabulary known only by size and special ids, as advertised by a
    /// remote provider. Other tokens are named `t{id}`.
    pub fn placeholder(size: usize, special: SpecialTokens) -> Result<Self> {
        special.validate(size)?;
        let tokens: Vec<String> = (0..size as TokenId)
            .map(|id| match id {
                id if id == special.eos => EOS_TOKEN.to_string(),
                id if id == special.both => "both".to_string(),
                id if id == special.video => "video".to_string(),
                id if id == special.audio => "audio".to_string(),
                id => format!("t{id}"),
            })
            .collect();
        Self::new(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn special(&self) -> SpecialTokens {
        self.special
    }

    pub fn eos(&self) -> TokenId {
        self.special.eos
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Ids that are neither EOS nor meta tokens.
    pub fn content_ids(&self) -> Vec<TokenId> {
        (0..self.len() as TokenId)
            .filter(|&id| !self.special.is_special(id))
            .collect()
    }
}

impl Serialize for Vocabulary {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.tokens.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Vocabulary {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let tokens = Vec::<String>::deserialize(d)?;
        Vocabulary::new(tokens).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_layout() {
        let v = Vocabulary::standard(3);
        assert_eq!(v.len(), 7);
        assert_eq!(v.eos(), 0);
        assert_eq!(v.id("audio"), Some(3));
        assert_eq!(v.token(4), Some("w0"));
        assert_eq!(v.content_ids(), vec![4, 5, 6]);
    }

    #[test]
    fn rejects_duplicates_and_missing_meta() {
        let dup = vec!["<eos>", "both", "video", "audio", "both"];
        assert!(Vocabulary::new(dup.into_iter().map(String::from).collect()).is_err());
        let missing = vec!["<eos>", "both", "video"];
        let err = Vocabulary::new(missing.into_iter().map(String::from).collect()).unwrap_err();
        assert!(matches!(err, Error::Configuration(_)));
    }

    #[test]
    fn placeholder_validates_specials() {
        let sp = SpecialTokens {
            eos: 5,
            both: 1,
            video: 2,
            audio: 3,
        };
        let v = Vocabulary::placeholder(6, sp).unwrap();
        assert_eq!(v.special(), sp);
        assert_eq!(v.token(0), Some("t0"));
        assert!(Vocabulary::placeholder(5, sp).is_err());
        let clash = SpecialTokens { both: 2, ..sp };
        assert!(Vocabulary::placeholder(6, clash).is_err());
    }
}
