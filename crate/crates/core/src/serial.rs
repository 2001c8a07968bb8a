//! Serde helpers that write floats as JSON numbers with 17 significant
//! digits (`{:.16e}`), which round-trips every finite `f64` exactly.

use serde::de::Deserialize;
use serde::ser::SerializeSeq;
use serde::{Deserializer, Serializer};
use serde_json::value::RawValue;

fn raw<E: serde::ser::Error>(x: f64) -> Result<Box<RawValue>, E> {
    if !x.is_finite() {
        return Err(E::custom(format!("cannot serialize non-finite value {x}")));
    }
    RawValue::from_string(format!("{x:.16e}")).map_err(E::custom)
}

pub mod f17 {
    use super::*;

    pub fn serialize<S: Serializer>(x: &f64, s: S) -> Result<S::Ok, S::Error> {
        serde::Serialize::serialize(&raw::<S::Error>(*x)?, s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        f64::deserialize(d)
    }
}

pub mod f17_vec {
    use super::*;

    pub fn serialize<S: Serializer>(xs: &[f64], s: S) -> Result<S::Ok, S::Error> {
        let mut seq = s.serialize_seq(Some(xs.len()))?;
        for &x in xs {
            seq.serialize_element(&raw::<S::Error>(x)?)?;
        }
        seq.end()
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        Vec::<f64>::deserialize(d)
    }
}

pub mod f17_pair {
    use super::*;

    pub fn serialize<S: Serializer>(xs: &[f64; 2], s: S) -> Result<S::Ok, S::Error> {
        f17_vec::serialize(xs, s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<[f64; 2], D::Error> {
        <[f64; 2]>::deserialize(d)
    }
}

pub mod f17_rows {
    use super::*;

    struct Row<'a>(&'a [f64]);

    impl serde::Serialize for Row<'_> {
        fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
            f17_vec::serialize(self.0, s)
        }
    }

    pub fn serialize<S: Serializer>(rows: &[Vec<f64>], s: S) -> Result<S::Ok, S::Error> {
        let mut seq = s.serialize_seq(Some(rows.len()))?;
        for r in rows {
            seq.serialize_element(&Row(r))?;
        }
        seq.end()
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Vec<f64>>, D::Error> {
        Vec::<Vec<f64>>::deserialize(d)
    }
}
