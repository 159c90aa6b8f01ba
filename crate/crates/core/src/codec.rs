//! Float arrays in the on-disk formats: written as decimal strings with 17
//! significant digits, which round-trip every finite double exactly. Plain
//! JSON numbers are accepted on input too.

use serde::de::{self, Deserializer, SeqAccess, Visitor};
use serde::ser::{SerializeSeq, Serializer};
use serde::Deserialize;

pub fn format_f64(v: f64) -> String {
    format!("{v:.16e}")
}

#[derive(Deserialize)]
#[serde(untagged)]
enum Number {
    Num(f64),
    Text(String),
}

impl Number {
    fn value<E: de::Error>(self) -> Result<f64, E> {
        match self {
            Number::Num(v) => Ok(v),
            Number::Text(s) => s.trim().parse().map_err(|_| E::custom(format!("invalid float '{s}'"))),
        }
    }
}

pub mod float_vec {
    use super::*;

    pub fn serialize<S: Serializer>(values: &[f64], s: S) -> Result<S::Ok, S::Error> {
        let mut seq = s.serialize_seq(Some(values.len()))?;
        for &v in values {
            seq.serialize_element(&format_f64(v))?;
        }
        seq.end()
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        struct Floats;
        impl<'de> Visitor<'de> for Floats {
            type Value = Vec<f64>;
            fn expecting(&self, f: &mut std::fmt::Formatter) -> std::fmt::Result {
                f.write_str("a list of numbers or numeric strings")
            }
            fn visit_seq<A: SeqAccess<'de>>(self, mut seq: A) -> Result<Vec<f64>, A::Error> {
                let mut out = Vec::with_capacity(seq.size_hint().unwrap_or(0));
                while let Some(n) = seq.next_element::<Number>()? {
                    out.push(n.value()?);
                }
                Ok(out)
            }
        }
        d.deserialize_seq(Floats)
    }
}

pub mod float {
    use super::*;

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&format_f64(*v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Number::deserialize(d)?.value()
    }
}
