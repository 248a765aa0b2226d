//! The `QMT1` on-disk container.
//!
//! Layout:
//!
//! ```text
//! "QMT1" | header_len: u32 LE | header: UTF-8 JSON (header_len bytes) | payload
//! ```
//!
//! The payload is little-endian `f32` in C order; complex values are stored as
//! interleaved `(re, im)` pairs. In-memory arrays are `f64`, so writing rounds
//! to single precision; anything read from a container round-trips bit-exactly.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{Array2, Array3};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::{EchoSeries, KSpaceSet, ParamMaps};
use crate::error::{Error, Result};
use crate::sampling::MaskSet;

pub const MAGIC: &[u8; 4] = b"QMT1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Echoes,
    Kspace,
    Maskset,
    Maps,
    Netparams,
    Report,
}

impl Kind {
    pub fn name(self) -> &'static str {
        match self {
            Kind::Echoes => "echoes",
            Kind::Kspace => "kspace",
            Kind::Maskset => "maskset",
            Kind::Maps => "maps",
            Kind::Netparams => "netparams",
            Kind::Report => "report",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    Float32,
    Complex64,
}

impl Dtype {
    /// Number of f32 scalars per element.
    pub fn lanes(self) -> usize {
        match self {
            Dtype::Float32 => 1,
            Dtype::Complex64 => 2,
        }
    }

    pub fn size_bytes(self) -> usize {
        4 * self.lanes()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub kind: Kind,
    pub shape: Vec<usize>,
    pub dtype: Dtype,
    #[serde(default)]
    pub te_ms: Vec<f64>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub extra: BTreeMap<String, Value>,
}

impl Header {
    pub fn new(kind: Kind, shape: Vec<usize>, dtype: Dtype) -> Self {
        Self {
            kind,
            shape,
            dtype,
            te_ms: Vec::new(),
            seed: None,
            extra: BTreeMap::new(),
        }
    }

    pub fn elements(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn payload_bytes(&self) -> usize {
        self.elements() * self.dtype.size_bytes()
    }

    pub fn expect_kind(&self, kind: Kind) -> Result<()> {
        if self.kind != kind {
            return Err(Error::WrongKind {
                expected: kind.name(),
                found: self.kind.name().to_string(),
            });
        }
        Ok(())
    }

    fn extra_f64(&self, key: &str) -> Result<f64> {
        self.extra
            .get(key)
            .and_then(Value::as_f64)
            .ok_or_else(|| Error::Header(format!("missing numeric field {key:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub header: Header,
    /// Raw f32 scalars; complex data interleaved.
    pub payload: Vec<f32>,
}

impl Container {
    pub fn new(header: Header, payload: Vec<f32>) -> Result<Self> {
        let expected = header.elements() * header.dtype.lanes();
        if payload.len() != expected {
            return Err(Error::shape(format!(
                "payload holds {} scalars, shape {:?} of {:?} needs {}",
                payload.len(),
                header.shape,
                header.dtype,
                expected
            )));
        }
        Ok(Self { header, payload })
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.header.seed = Some(seed);
        self
    }

    pub fn with_extra(mut self, key: &str, value: impl Into<Value>) -> Self {
        self.header.extra.insert(key.to_string(), value.into());
        self
    }

    pub fn encode(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("header serializes");
        let mut out = Vec::with_capacity(8 + header.len() + 4 * self.payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for v in &self.payload {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(Error::TruncatedHeader {
                declared: 4,
                found: bytes.len(),
            });
        }
        if &bytes[..4] != MAGIC {
            let mut found = [0u8; 4];
            found.copy_from_slice(&bytes[..4]);
            return Err(Error::BadMagic { found });
        }
        if bytes.len() < 8 {
            return Err(Error::TruncatedHeader {
                declared: 4,
                found: bytes.len() - 4,
            });
        }
        let header_len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let rest = &bytes[8..];
        if rest.len() < header_len {
            return Err(Error::TruncatedHeader {
                declared: header_len,
                found: rest.len(),
            });
        }
        let header_text = std::str::from_utf8(&rest[..header_len])
            .map_err(|e| Error::Header(format!("header is not UTF-8: {e}")))?;
        let header: Header =
            serde_json::from_str(header_text).map_err(|e| Error::Header(e.to_string()))?;
        let payload = &rest[header_len..];
        let expected = header.payload_bytes();
        if payload.len() < expected {
            return Err(Error::TruncatedPayload {
                expected,
                found: payload.len(),
            });
        }
        if payload.len() > expected {
            return Err(Error::shape(format!(
                "payload has {} bytes, shape {:?} of {:?} needs {}",
                payload.len(),
                header.shape,
                header.dtype,
                expected
            )));
        }
        let values = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Container::new(header, values)
    }
}

pub fn write_container(path: impl AsRef<Path>, container: &Container) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, container.encode()).map_err(|e| Error::io(path, e))
}

pub fn read_container(path: impl AsRef<Path>) -> Result<Container> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Container::decode(&bytes)
}

/// Conversion between in-memory objects and containers.
pub trait Persist: Sized {
    fn to_container(&self) -> Container;
    fn from_container(c: &Container) -> Result<Self>;
}

pub fn save<T: Persist>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    write_container(path, &value.to_container())
}

pub fn load<T: Persist>(path: impl AsRef<Path>) -> Result<T> {
    T::from_container(&read_container(path)?)
}

fn complex_payload(data: &Array3<Complex64>) -> Vec<f32> {
    data.iter().flat_map(|v| [v.re as f32, v.im as f32]).collect()
}

fn complex_array(c: &Container) -> Result<Array3<Complex64>> {
    let h = &c.header;
    if h.dtype != Dtype::Complex64 || h.shape.len() != 3 {
        return Err(Error::Header(format!(
            "expected complex64 [t, ny, nx], found {:?} {:?}",
            h.dtype, h.shape
        )));
    }
    let values = c
        .payload
        .chunks_exact(2)
        .map(|p| Complex64::new(p[0] as f64, p[1] as f64))
        .collect();
    Array3::from_shape_vec((h.shape[0], h.shape[1], h.shape[2]), values)
        .map_err(|e| Error::shape(e.to_string()))
}

impl Persist for EchoSeries {
    fn to_container(&self) -> Container {
        let (t, ny, nx) = self.data().dim();
        let mut header = Header::new(Kind::Echoes, vec![t, ny, nx], Dtype::Complex64);
        header.te_ms = self.te_ms().to_vec();
        Container::new(header, complex_payload(self.data())).expect("consistent shape")
    }

    fn from_container(c: &Container) -> Result<Self> {
        c.header.expect_kind(Kind::Echoes)?;
        EchoSeries::new(c.header.te_ms.clone(), complex_array(c)?)
    }
}

fn encode_lines(masks: &MaskSet) -> Value {
    Value::Array(
        masks
            .lines()
            .outer_iter()
            .map(|row| Value::String(row.iter().map(|&b| if b { '1' } else { '0' }).collect()))
            .collect(),
    )
}

fn decode_lines(value: Option<&Value>) -> Result<Array2<bool>> {
    let rows = value
        .and_then(Value::as_array)
        .ok_or_else(|| Error::Header("missing mask_lines".into()))?;
    let strings: Vec<&str> = rows
        .iter()
        .map(|r| r.as_str().ok_or_else(|| Error::Header("mask_lines entries must be strings".into())))
        .collect::<Result<_>>()?;
    let ny = strings.first().map_or(0, |s| s.len());
    let mut flat = Vec::with_capacity(strings.len() * ny);
    for s in &strings {
        if s.len() != ny {
            return Err(Error::Header("ragged mask_lines".into()));
        }
        for ch in s.chars() {
            flat.push(match ch {
                '1' => true,
                '0' => false,
                _ => return Err(Error::Header("mask_lines must be 0/1".into())),
            });
        }
    }
    Array2::from_shape_vec((strings.len(), ny), flat).map_err(|e| Error::shape(e.to_string()))
}

impl Persist for KSpaceSet {
    fn to_container(&self) -> Container {
        let (t, ny, nx) = self.data().dim();
        let m = self.masks();
        let mut header = Header::new(Kind::Kspace, vec![t, ny, nx], Dtype::Complex64);
        header.te_ms = self.te_ms().to_vec();
        header.extra.insert("mask_lines".into(), encode_lines(m));
        header.extra.insert("r_target".into(), m.r_target().into());
        header.extra.insert("center_frac".into(), m.center_frac().into());
        header.extra.insert("alpha".into(), m.alpha().into());
        header.extra.insert("mask_seed".into(), m.seed().into());
        Container::new(header, complex_payload(self.data())).expect("consistent shape")
    }

    fn from_container(c: &Container) -> Result<Self> {
        let h = &c.header;
        h.expect_kind(Kind::Kspace)?;
        let lines = decode_lines(h.extra.get("mask_lines"))?;
        let seed = h.extra.get("mask_seed").and_then(Value::as_u64).unwrap_or(0);
        let masks = MaskSet::from_lines(
            lines,
            h.extra_f64("r_target")?,
            h.extra_f64("center_frac")?,
            h.extra_f64("alpha")?,
            seed,
        )?;
        let data = complex_array(c)?;
        let k = KSpaceSet::new(h.te_ms.clone(), data.clone(), masks)?;
        if k.data() != &data {
            return Err(Error::invalid("k-space has energy on unsampled lines"));
        }
        Ok(k)
    }
}

/// A mask library is stored as one `[n_sets, t, ny]` float container.
impl Persist for Vec<MaskSet> {
    fn to_container(&self) -> Container {
        let first = self.first().expect("non-empty mask library");
        let (t, ny) = (first.echoes(), first.ny());
        let mut payload = Vec::with_capacity(self.len() * t * ny);
        for m in self {
            payload.extend(m.lines().iter().map(|&b| if b { 1.0f32 } else { 0.0 }));
        }
        let mut header = Header::new(Kind::Maskset, vec![self.len(), t, ny], Dtype::Float32);
        header.extra.insert("r_target".into(), first.r_target().into());
        header.extra.insert("center_frac".into(), first.center_frac().into());
        header.extra.insert("alpha".into(), first.alpha().into());
        header.extra.insert(
            "set_seeds".into(),
            Value::Array(self.iter().map(|m| m.seed().into()).collect()),
        );
        Container::new(header, payload).expect("consistent shape")
    }

    fn from_container(c: &Container) -> Result<Self> {
        let h = &c.header;
        h.expect_kind(Kind::Maskset)?;
        if h.dtype != Dtype::Float32 || h.shape.len() != 3 || h.shape[0] == 0 {
            return Err(Error::Header("mask-set container must be float32 [n, t, ny]".into()));
        }
        let (n, t, ny) = (h.shape[0], h.shape[1], h.shape[2]);
        let seeds: Vec<u64> = h
            .extra
            .get("set_seeds")
            .and_then(Value::as_array)
            .map(|a| a.iter().map(|v| v.as_u64().unwrap_or(0)).collect())
            .unwrap_or_else(|| vec![0; n]);
        let (r, cf, alpha) = (h.extra_f64("r_target")?, h.extra_f64("center_frac")?, h.extra_f64("alpha")?);
        c.payload
            .chunks_exact(t * ny)
            .enumerate()
            .map(|(i, chunk)| {
                if chunk.iter().any(|&v| v != 0.0 && v != 1.0) {
                    return Err(Error::Header("mask values must be 0 or 1".into()));
                }
                let lines = Array2::from_shape_vec((t, ny), chunk.iter().map(|&v| v == 1.0).collect())
                    .map_err(|e| Error::shape(e.to_string()))?;
                MaskSet::from_lines(lines, r, cf, alpha, seeds.get(i).copied().unwrap_or(0))
            })
            .collect()
    }
}

/// Maps are stored as `[3, ny, nx]`: i0, T2 in ms, label.
impl Persist for ParamMaps {
    fn to_container(&self) -> Container {
        let (ny, nx) = self.dim();
        let mut payload = Vec::with_capacity(3 * ny * nx);
        payload.extend(self.i0().iter().map(|&v| v as f32));
        payload.extend(self.t2_ms().iter().map(|&v| v as f32));
        payload.extend(self.roi_labels().iter().map(|&v| v as f32));
        let header = Header::new(Kind::Maps, vec![3, ny, nx], Dtype::Float32);
        Container::new(header, payload).expect("consistent shape")
    }

    fn from_container(c: &Container) -> Result<Self> {
        let h = &c.header;
        h.expect_kind(Kind::Maps)?;
        if h.dtype != Dtype::Float32 || h.shape.len() != 3 || h.shape[0] != 3 {
            return Err(Error::Header("maps container must be float32 [3, ny, nx]".into()));
        }
        let (ny, nx) = (h.shape[1], h.shape[2]);
        let plane = |i: usize| -> Result<Array2<f64>> {
            Array2::from_shape_vec(
                (ny, nx),
                c.payload[i * ny * nx..(i + 1) * ny * nx]
                    .iter()
                    .map(|&v| v as f64)
                    .collect(),
            )
            .map_err(|e| Error::shape(e.to_string()))
        };
        let labels = plane(2)?;
        if labels.iter().any(|&v| v < 0.0 || v.fract() != 0.0) {
            return Err(Error::Header("labels must be non-negative integers".into()));
        }
        ParamMaps::new(plane(0)?, plane(1)?, labels.mapv(|v| v as u32))
    }
}
