//! Serde adapters that keep non-finite floats representable in JSON:
//! `NaN`, `inf` and `-inf` are written as strings.

use alloc::string::String;
use alloc::vec::Vec;
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum Repr {
    Num(f64),
    Text(String),
}

fn to_repr(x: f64) -> Repr {
    if x.is_nan() {
        Repr::Text("NaN".into())
    } else if x == f64::INFINITY {
        Repr::Text("inf".into())
    } else if x == f64::NEG_INFINITY {
        Repr::Text("-inf".into())
    } else {
        Repr::Num(x)
    }
}

fn from_repr<E: serde::de::Error>(r: Repr) -> Result<f64, E> {
    match r {
        Repr::Num(x) => Ok(x),
        Repr::Text(t) if t == "NaN" => Ok(f64::NAN),
        Repr::Text(t) if t == "inf" => Ok(f64::INFINITY),
        Repr::Text(t) if t == "-inf" => Ok(f64::NEG_INFINITY),
        Repr::Text(other) => Err(E::custom(alloc::format!("invalid float '{other}'"))),
    }
}

pub fn serialize<S: Serializer>(x: &f64, s: S) -> Result<S::Ok, S::Error> {
    to_repr(*x).serialize(s)
}

pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
    let r = Repr::deserialize(d).map_err(D::Error::custom)?;
    from_repr(r)
}

pub mod vec {
    use super::*;

    pub fn serialize<S: Serializer>(xs: &[f64], s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(xs.iter().map(|&x| to_repr(x)))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        let rs: Vec<Repr> = Vec::deserialize(d)?;
        rs.into_iter().map(from_repr).collect()
    }
}
