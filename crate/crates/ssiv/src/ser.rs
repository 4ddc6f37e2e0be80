//! Serde helpers: instrument sets are 0-based in the Rust API but serialize
//! as the canonical 1-based index order {1..J}.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

pub fn one_based<S: Serializer>(v: &[usize], s: S) -> Result<S::Ok, S::Error> {
    let shifted: Vec<usize> = v.iter().map(|&i| i + 1).collect();
    shifted.serialize(s)
}

pub fn from_one_based<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<usize>, D::Error> {
    let raw = Vec::<usize>::deserialize(d)?;
    raw.iter()
        .map(|&i| {
            i.checked_sub(1)
                .ok_or_else(|| serde::de::Error::custom("instrument indices are 1-based"))
        })
        .collect()
}
