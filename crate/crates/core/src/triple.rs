use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::geometry::BoxCxCyWh;

/// One extracted fact: an inclusive token span, a relation id and an image region.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Triple {
    pub start: usize,
    pub end: usize,
    #[serde(rename = "rel")]
    pub relation: usize,
    #[serde(rename = "box", serialize_with = "ser_box", deserialize_with = "de_box")]
    pub bbox: BoxCxCyWh,
}

/// Exact `(span, relation)` key used by the triple and pair metrics.
pub type PairKey = (usize, usize, usize);

impl Triple {
    pub fn new(start: usize, end: usize, relation: usize, bbox: BoxCxCyWh) -> Self {
        Self {
            start,
            end,
            relation,
            bbox,
        }
    }

    pub fn span(&self) -> (usize, usize) {
        (self.start, self.end)
    }

    pub fn key(&self) -> PairKey {
        (self.start, self.end, self.relation)
    }

    /// Gold-triple contract for a sequence of length `seq_len` with `relations` classes.
    pub fn validate(&self, seq_len: usize, relations: usize) -> Result<()> {
        if self.start > self.end || self.end >= seq_len {
            return Err(Error::Data(format!(
                "span ({}, {}) outside [0, {seq_len})",
                self.start, self.end
            )));
        }
        if self.relation >= relations {
            return Err(Error::Data(format!(
                "relation {} outside [0, {relations})",
                self.relation
            )));
        }
        if !self.bbox.is_valid() {
            return Err(Error::Data(format!("box outside [0,1]: {:?}", self.bbox)));
        }
        Ok(())
    }
}

fn ser_box<S: Serializer>(b: &BoxCxCyWh, s: S) -> std::result::Result<S::Ok, S::Error> {
    b.to_array().serialize(s)
}

fn de_box<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<BoxCxCyWh, D::Error> {
    let a = <[f64; 4]>::deserialize(d)?;
    Ok(BoxCxCyWh::from_slice(&a))
}
