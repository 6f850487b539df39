//! The LTSR tensor container.
//!
//! ```text
//! "LTSR" | version u32 | ndim u32 | dims u32[ndim] | dtype u8 | 3 reserved bytes
//! payload: row-major little-endian f64
//! [named variant] UTF-8 JSON footer | footer length u64
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"LTSR";
pub const VERSION: u32 = 1;
pub const DTYPE_F64: u8 = 0;

#[derive(Debug, Error)]
pub enum LtsrError {
    #[error("bad magic bytes {0:?}")]
    MagicMismatch([u8; 4]),
    #[error("unsupported container version {0}")]
    Version(u32),
    #[error("unsupported dtype code {0}")]
    DtypeMismatch(u8),
    #[error("file truncated: need {needed} bytes, have {have}")]
    Truncated { needed: usize, have: usize },
    #[error("tensor has {data} values but dims imply {expected}")]
    ShapeMismatch { expected: usize, data: usize },
    #[error("malformed footer: {0}")]
    Footer(String),
    #[error("missing segment `{0}`")]
    MissingSegment(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, LtsrError>;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected = dims.iter().product();
        if data.len() != expected {
            return Err(LtsrError::ShapeMismatch {
                expected,
                data: data.len(),
            });
        }
        Ok(Self { dims, data })
    }
}

fn header_bytes(dims: &[usize]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * dims.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.push(DTYPE_F64);
    out.extend_from_slice(&[0u8; 3]);
    out
}

pub fn to_bytes(t: &Tensor) -> Vec<u8> {
    let mut out = header_bytes(&t.dims);
    out.reserve(8 * t.data.len());
    for v in &t.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn take<'a>(bytes: &'a [u8], at: &mut usize, n: usize) -> Result<&'a [u8]> {
    let end = *at + n;
    if end > bytes.len() {
        return Err(LtsrError::Truncated {
            needed: end,
            have: bytes.len(),
        });
    }
    let s = &bytes[*at..end];
    *at = end;
    Ok(s)
}

fn read_u32(bytes: &[u8], at: &mut usize) -> Result<u32> {
    Ok(u32::from_le_bytes(take(bytes, at, 4)?.try_into().unwrap()))
}

/// Parses the header and payload; returns the tensor and the payload end offset.
fn parse(bytes: &[u8]) -> Result<(Tensor, usize)> {
    let mut at = 0;
    let magic: [u8; 4] = take(bytes, &mut at, 4)?.try_into().unwrap();
    if &magic != MAGIC {
        return Err(LtsrError::MagicMismatch(magic));
    }
    let version = read_u32(bytes, &mut at)?;
    if version != VERSION {
        return Err(LtsrError::Version(version));
    }
    let ndim = read_u32(bytes, &mut at)? as usize;
    let dims = (0..ndim)
        .map(|_| read_u32(bytes, &mut at).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let dtype = take(bytes, &mut at, 4)?[0];
    if dtype != DTYPE_F64 {
        return Err(LtsrError::DtypeMismatch(dtype));
    }
    let count: usize = dims.iter().product();
    let payload = take(bytes, &mut at, 8 * count)?;
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((Tensor { dims, data }, at))
}

pub fn from_bytes(bytes: &[u8]) -> Result<Tensor> {
    parse(bytes).map(|(t, _)| t)
}

pub fn save_ltsr(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, to_bytes(t))?;
    Ok(())
}

pub fn load_ltsr(path: impl AsRef<Path>) -> Result<Tensor> {
    from_bytes(&fs::read(path)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentEntry {
    pub name: String,
    pub offset: usize,
    pub len: usize,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
struct Footer {
    segments: Vec<SegmentEntry>,
    #[serde(default)]
    attrs: Map<String, Value>,
}

/// Several named arrays sharing one flat payload, plus free-form attributes.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct NamedTensors {
    pub entries: Vec<(String, Tensor)>,
    pub attrs: Map<String, Value>,
}

impl NamedTensors {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.entries.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| LtsrError::MissingSegment(name.to_string()))
    }

    pub fn set_attr(&mut self, key: &str, value: impl Serialize) {
        self.attrs
            .insert(key.to_string(), serde_json::to_value(value).expect("attr serializes"));
    }

    pub fn attr<T: for<'de> Deserialize<'de>>(&self, key: &str) -> Result<T> {
        let v = self
            .attrs
            .get(key)
            .ok_or_else(|| LtsrError::Footer(format!("missing attribute `{key}`")))?;
        serde_json::from_value(v.clone()).map_err(|e| LtsrError::Footer(e.to_string()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut footer = Footer {
            segments: Vec::with_capacity(self.entries.len()),
            attrs: self.attrs.clone(),
        };
        let mut flat = Vec::new();
        for (name, t) in &self.entries {
            footer.segments.push(SegmentEntry {
                name: name.clone(),
                offset: flat.len(),
                len: t.data.len(),
                shape: t.dims.clone(),
            });
            flat.extend_from_slice(&t.data);
        }
        let n = flat.len();
        let mut out = to_bytes(&Tensor {
            dims: vec![n],
            data: flat,
        });
        let json = serde_json::to_vec(&footer).expect("footer serializes");
        out.extend_from_slice(&json);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (flat, end) = parse(bytes)?;
        if bytes.len() < end + 8 {
            return Err(LtsrError::Truncated {
                needed: end + 8,
                have: bytes.len(),
            });
        }
        let flen = u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().unwrap()) as usize;
        if end + flen + 8 != bytes.len() {
            return Err(LtsrError::Truncated {
                needed: end + flen + 8,
                have: bytes.len(),
            });
        }
        let footer: Footer = serde_json::from_slice(&bytes[end..end + flen])
            .map_err(|e| LtsrError::Footer(e.to_string()))?;
        let mut entries = Vec::with_capacity(footer.segments.len());
        for s in footer.segments {
            if s.offset + s.len > flat.data.len() || s.shape.iter().product::<usize>() != s.len {
                return Err(LtsrError::Footer(format!("segment `{}` out of range", s.name)));
            }
            let data = flat.data[s.offset..s.offset + s.len].to_vec();
            entries.push((s.name, Tensor { dims: s.shape, data }));
        }
        Ok(Self {
            entries,
            attrs: footer.attrs,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn random_tensor(seed: u64) -> Tensor {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let dims = vec![3, 4, 5];
        let data = (0..60).map(|_| rng.random::<f64>() * 1e3 - 5e2).collect();
        Tensor::new(dims, data).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ltsr");
        let mut t = random_tensor(1);
        t.data[0] = f64::MIN_POSITIVE;
        t.data[1] = -0.0;
        save_ltsr(&t, &path).unwrap();
        let back = load_ltsr(&path).unwrap();
        assert_eq!(back.dims, t.dims);
        assert!(back
            .data
            .iter()
            .zip(&t.data)
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn corrupt_magic_detected() {
        let mut b = to_bytes(&random_tensor(2));
        b[0] = b'X';
        assert!(matches!(from_bytes(&b), Err(LtsrError::MagicMismatch(_))));
    }

    #[test]
    fn short_payload_detected() {
        let b = to_bytes(&random_tensor(3));
        assert!(matches!(
            from_bytes(&b[..b.len() - 8]),
            Err(LtsrError::Truncated { .. })
        ));
    }

    #[test]
    fn wrong_dtype_detected() {
        let mut b = to_bytes(&random_tensor(4));
        let dtype_at = 12 + 4 * 3;
        b[dtype_at] = 1;
        assert!(matches!(from_bytes(&b), Err(LtsrError::DtypeMismatch(1))));
    }

    #[test]
    fn named_round_trip() {
        let mut n = NamedTensors::new();
        n.push("a", random_tensor(5));
        n.push("b", Tensor::new(vec![2], vec![1.5, -2.5]).unwrap());
        n.set_attr("depth", 4usize);
        let back = NamedTensors::from_bytes(&n.to_bytes()).unwrap();
        assert_eq!(back, n);
        assert_eq!(back.attr::<usize>("depth").unwrap(), 4);
        let mut cut = n.to_bytes();
        cut.truncate(cut.len() - 3);
        assert!(NamedTensors::from_bytes(&cut).is_err());
        // the flat payload of a named file is still readable as a plain tensor
        assert_eq!(from_bytes(&n.to_bytes()).unwrap().data.len(), 62);
    }
}
