use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::attention::AttentionKind;
use crate::error::{Error, Result};

/// Attention kind of every layer, written as one character per layer
/// (`L`, `W`, `F`).
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ArchDescriptor {
    pub kinds: Vec<AttentionKind>,
}

impl ArchDescriptor {
    pub fn new(kinds: Vec<AttentionKind>) -> Self {
        Self { kinds }
    }

    pub fn uniform(kind: AttentionKind, depth: usize) -> Self {
        Self { kinds: vec![kind; depth] }
    }

    pub fn depth(&self) -> usize {
        self.kinds.len()
    }

    pub fn count(&self, kind: AttentionKind) -> usize {
        self.kinds.iter().filter(|&&k| k == kind).count()
    }

    /// Copy with layer `i` set to `kind`.
    pub fn with(&self, i: usize, kind: AttentionKind) -> Self {
        let mut kinds = self.kinds.clone();
        kinds[i] = kind;
        Self { kinds }
    }

    pub fn parse_with_depth(s: &str, depth: usize) -> Result<Self> {
        let a: Self = s.parse()?;
        if a.depth() != depth {
            return Err(Error::Format(format!("arch {s:?} has {} layers, expected {depth}", a.depth())));
        }
        Ok(a)
    }
}

impl fmt::Display for ArchDescriptor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.kinds.iter().try_for_each(|k| write!(f, "{}", k.code()))
    }
}

impl FromStr for ArchDescriptor {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.is_empty() {
            return Err(Error::Format("empty arch code".into()));
        }
        let kinds = s
            .chars()
            .map(|c| AttentionKind::from_code(c).ok_or_else(|| Error::Format(format!("unknown layer code {c:?} in {s:?}"))))
            .collect::<Result<_>>()?;
        Ok(Self { kinds })
    }
}

impl Serialize for ArchDescriptor {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ArchDescriptor {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}
