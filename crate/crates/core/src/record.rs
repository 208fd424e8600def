//! Dynamically typed records flowing through stage pipelines.
//!
//! Stage-one inputs are text lines; after the first transformation a record
//! can be any [`Datum`]. Shuffled records must be [`Datum::Pair`]s. Keys and
//! values cross the queue as self-delimiting binary encodings:
//!
//! | tag  | variant | body                                  |
//! |------|---------|---------------------------------------|
//! | 0x01 | Int     | i64, little-endian                    |
//! | 0x02 | Float   | f64 bits, little-endian               |
//! | 0x03 | Str     | u32 LE byte length, UTF-8 bytes       |
//! | 0x04 | List    | u32 LE item count, encoded items      |
//! | 0x05 | Pair    | encoded key, encoded value            |

use std::fmt;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Datum {
    Int(i64),
    Float(f64),
    Str(String),
    List(Vec<Datum>),
    Pair(Box<Datum>, Box<Datum>),
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DecodeError {
    #[error("truncated input at byte {0}")]
    Truncated(usize),
    #[error("unknown tag {tag:#04x} at byte {at}")]
    UnknownTag { tag: u8, at: usize },
    #[error("invalid utf-8 in string at byte {0}")]
    Utf8(usize),
    #[error("{0} trailing bytes after value")]
    Trailing(usize),
}

const TAG_INT: u8 = 0x01;
const TAG_FLOAT: u8 = 0x02;
const TAG_STR: u8 = 0x03;
const TAG_LIST: u8 = 0x04;
const TAG_PAIR: u8 = 0x05;

impl Datum {
    pub fn pair(key: Datum, value: Datum) -> Datum {
        Datum::Pair(Box::new(key), Box::new(value))
    }

    pub fn str(s: impl Into<String>) -> Datum {
        Datum::Str(s.into())
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            Datum::Str(s) => Some(s),
            _ => None,
        }
    }

    pub fn as_int(&self) -> Option<i64> {
        match self {
            Datum::Int(v) => Some(*v),
            _ => None,
        }
    }

    pub fn as_list(&self) -> Option<&[Datum]> {
        match self {
            Datum::List(v) => Some(v),
            _ => None,
        }
    }

    pub fn into_pair(self) -> Option<(Datum, Datum)> {
        match self {
            Datum::Pair(k, v) => Some((*k, *v)),
            _ => None,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16);
        self.encode_into(&mut out);
        out
    }

    pub fn encode_into(&self, out: &mut Vec<u8>) {
        match self {
            Datum::Int(v) => {
                out.push(TAG_INT);
                out.extend_from_slice(&v.to_le_bytes());
            }
            Datum::Float(v) => {
                out.push(TAG_FLOAT);
                out.extend_from_slice(&v.to_bits().to_le_bytes());
            }
            Datum::Str(s) => {
                out.push(TAG_STR);
                out.extend_from_slice(&(s.len() as u32).to_le_bytes());
                out.extend_from_slice(s.as_bytes());
            }
            Datum::List(items) => {
                out.push(TAG_LIST);
                out.extend_from_slice(&(items.len() as u32).to_le_bytes());
                for item in items {
                    item.encode_into(out);
                }
            }
            Datum::Pair(k, v) => {
                out.push(TAG_PAIR);
                k.encode_into(out);
                v.encode_into(out);
            }
        }
    }

    /// Decodes exactly one value spanning all of `bytes`.
    pub fn decode(bytes: &[u8]) -> Result<Datum, DecodeError> {
        let mut pos = 0;
        let d = decode_at(bytes, &mut pos)?;
        if pos != bytes.len() {
            return Err(DecodeError::Trailing(bytes.len() - pos));
        }
        Ok(d)
    }
}

fn take<'a>(bytes: &'a [u8], pos: &mut usize, n: usize) -> Result<&'a [u8], DecodeError> {
    let end = pos.checked_add(n).ok_or(DecodeError::Truncated(*pos))?;
    let s = bytes.get(*pos..end).ok_or(DecodeError::Truncated(*pos))?;
    *pos = end;
    Ok(s)
}

fn read_u32(bytes: &[u8], pos: &mut usize) -> Result<u32, DecodeError> {
    Ok(u32::from_le_bytes(take(bytes, pos, 4)?.try_into().unwrap()))
}

fn decode_at(bytes: &[u8], pos: &mut usize) -> Result<Datum, DecodeError> {
    let at = *pos;
    let tag = take(bytes, pos, 1)?[0];
    match tag {
        TAG_INT => Ok(Datum::Int(i64::from_le_bytes(
            take(bytes, pos, 8)?.try_into().unwrap(),
        ))),
        TAG_FLOAT => Ok(Datum::Float(f64::from_bits(u64::from_le_bytes(
            take(bytes, pos, 8)?.try_into().unwrap(),
        )))),
        TAG_STR => {
            let len = read_u32(bytes, pos)? as usize;
            let start = *pos;
            let raw = take(bytes, pos, len)?;
            String::from_utf8(raw.to_vec())
                .map(Datum::Str)
                .map_err(|_| DecodeError::Utf8(start))
        }
        TAG_LIST => {
            let n = read_u32(bytes, pos)? as usize;
            // each item needs at least one byte; bound the allocation by input size
            let mut items = Vec::with_capacity(n.min(bytes.len() - *pos));
            for _ in 0..n {
                items.push(decode_at(bytes, pos)?);
            }
            Ok(Datum::List(items))
        }
        TAG_PAIR => {
            let k = decode_at(bytes, pos)?;
            let v = decode_at(bytes, pos)?;
            Ok(Datum::pair(k, v))
        }
        tag => Err(DecodeError::UnknownTag { tag, at }),
    }
}

impl fmt::Display for Datum {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Datum::Int(v) => write!(f, "{v}"),
            Datum::Float(v) => write!(f, "{v}"),
            Datum::Str(s) => f.write_str(s),
            Datum::List(items) => {
                f.write_str("[")?;
                for (i, item) in items.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    write!(f, "{item}")?;
                }
                f.write_str("]")
            }
            Datum::Pair(k, v) => write!(f, "({k}, {v})"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn arb_datum() -> impl Strategy<Value = Datum> {
        let leaf = prop_oneof![
            any::<i64>().prop_map(Datum::Int),
            any::<f64>()
                .prop_filter("nan", |f| !f.is_nan())
                .prop_map(Datum::Float),
            ".{0,12}".prop_map(Datum::Str),
        ];
        leaf.prop_recursive(3, 24, 4, |inner| {
            prop_oneof![
                proptest::collection::vec(inner.clone(), 0..4).prop_map(Datum::List),
                (inner.clone(), inner).prop_map(|(k, v)| Datum::pair(k, v)),
            ]
        })
    }

    proptest! {
        #[test]
        fn encoding_roundtrips(d in arb_datum()) {
            prop_assert_eq!(Datum::decode(&d.encode()).unwrap(), d);
        }

        #[test]
        fn decode_never_panics(bytes in proptest::collection::vec(any::<u8>(), 0..64)) {
            let _ = Datum::decode(&bytes);
        }
    }

    #[test]
    fn int_layout() {
        assert_eq!(Datum::Int(3).encode(), [1, 3, 0, 0, 0, 0, 0, 0, 0]);
        assert_eq!(Datum::str("ab").encode(), [3, 2, 0, 0, 0, b'a', b'b']);
    }

    #[test]
    fn rejects_garbage() {
        assert_eq!(Datum::decode(&[]), Err(DecodeError::Truncated(0)));
        assert!(matches!(
            Datum::decode(&[9]),
            Err(DecodeError::UnknownTag { tag: 9, .. })
        ));
        let mut b = Datum::Int(1).encode();
        b.push(0);
        assert_eq!(Datum::decode(&b), Err(DecodeError::Trailing(1)));
    }

    #[test]
    fn display() {
        let d = Datum::pair(
            Datum::List(vec![Datum::str("2015-01"), Datum::Int(2)]),
            Datum::Float(0.5),
        );
        assert_eq!(d.to_string(), "([2015-01, 2], 0.5)");
    }
}
