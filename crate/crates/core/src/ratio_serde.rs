//! JSON has no infinity; ratios serialize as numbers or the string `"+inf"`.

use serde::{de, Deserialize, Deserializer, Serializer};

pub fn serialize<S: Serializer>(value: &f64, s: S) -> Result<S::Ok, S::Error> {
    if value.is_finite() {
        s.serialize_f64(*value)
    } else if *value == f64::INFINITY {
        s.serialize_str("+inf")
    } else {
        Err(serde::ser::Error::custom("ratio must be finite or +inf"))
    }
}

pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Str(String),
    }
    match Repr::deserialize(d)? {
        Repr::Num(v) => Ok(v),
        Repr::Str(s) if s == "+inf" => Ok(f64::INFINITY),
        Repr::Str(s) => Err(de::Error::custom(format!("invalid ratio {s:?}"))),
    }
}
