//! JSON-safe encoding for floats that may legitimately be infinite
//! (conformal quantiles and interval bounds). Plain JSON numbers carry
//! finite values; the strings `"inf"` / `"-inf"` carry the infinities,
//! so round trips preserve them instead of degrading to `null`.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum MaybeInf {
    Num(f64),
    Tag(String),
}

fn encode(v: f64) -> MaybeInf {
    if v == f64::INFINITY {
        MaybeInf::Tag("inf".to_string())
    } else if v == f64::NEG_INFINITY {
        MaybeInf::Tag("-inf".to_string())
    } else {
        MaybeInf::Num(v)
    }
}

fn decode<E: serde::de::Error>(raw: MaybeInf) -> Result<f64, E> {
    match raw {
        MaybeInf::Num(v) => Ok(v),
        MaybeInf::Tag(s) => match s.as_str() {
            "inf" => Ok(f64::INFINITY),
            "-inf" => Ok(f64::NEG_INFINITY),
            other => Err(E::custom(format!("expected a number, \"inf\" or \"-inf\", got {other:?}"))),
        },
    }
}

/// `#[serde(with = "jsonnum::f64_inf")]` on an `f64` field.
pub mod f64_inf {
    use super::*;

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        encode(*v).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        decode(MaybeInf::deserialize(d)?)
    }
}

/// `#[serde(with = "jsonnum::vec_f64_inf")]` on a `Vec<f64>` field.
pub mod vec_f64_inf {
    use super::*;

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        let encoded: Vec<MaybeInf> = v.iter().map(|x| encode(*x)).collect();
        encoded.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        Vec::<MaybeInf>::deserialize(d)?
            .into_iter()
            .map(decode::<D::Error>)
            .collect()
    }
}

/// `#[serde(with = "jsonnum::opt_vec_f64_inf")]` on an
/// `Option<Vec<f64>>` field.
pub mod opt_vec_f64_inf {
    use super::*;

    pub fn serialize<S: Serializer>(v: &Option<Vec<f64>>, s: S) -> Result<S::Ok, S::Error> {
        v.as_ref()
            .map(|xs| xs.iter().map(|x| encode(*x)).collect::<Vec<_>>())
            .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Vec<f64>>, D::Error> {
        match Option::<Vec<MaybeInf>>::deserialize(d)? {
            None => Ok(None),
            Some(xs) => xs
                .into_iter()
                .map(decode::<D::Error>)
                .collect::<Result<Vec<_>, _>>()
                .map(Some),
        }
    }
}

/// `#[serde(with = "jsonnum::opt_f64_inf")]` on an `Option<f64>` field.
pub mod opt_f64_inf {
    use super::*;

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        v.map(encode).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        match Option::<MaybeInf>::deserialize(d)? {
            None => Ok(None),
            Some(raw) => decode::<D::Error>(raw).map(Some),
        }
    }
}
