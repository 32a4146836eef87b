//! Self-describing binary container for arrays.
//!
//! Layout: an 8-byte little-endian `u64` header length, the UTF-8 JSON header,
//! then the raw little-endian payload in row-major order. Complex values are
//! stored as `(re, im)` pairs of `f32`, real values as `f32`. In-memory data is
//! `f64`, so writing quantizes to single precision; data that is already
//! `f32`-representable round-trips exactly.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    CoilSensitivities, FieldMap, ImageDims, ImageStack, KSpaceData, KSpaceDims, MapDims, ParameterMaps,
    VolumeMask, C64,
};

pub const FORMAT_TAG: &str = "t2moco-container/1";
const PARAM_MAPS: [&str; 3] = ["t2star_ms", "s0", "validity"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Kspace,
    Image,
    Params,
    Field,
    Coils,
    Mask,
}

impl Kind {
    fn is_complex(self) -> bool {
        matches!(self, Kind::Kspace | Kind::Image | Kind::Coils)
    }

    fn dim_names(self) -> &'static [&'static str] {
        match self {
            Kind::Kspace => &["slice", "echo", "coil", "pe", "ro"],
            Kind::Image => &["slice", "echo", "h", "w"],
            Kind::Params => &["map", "slice", "h", "w"],
            Kind::Field | Kind::Mask => &["slice", "h", "w"],
            Kind::Coils => &["coil", "slice", "h", "w"],
        }
    }

    fn units(self) -> &'static str {
        match self {
            Kind::Kspace | Kind::Image | Kind::Coils | Kind::Mask => "a.u.",
            Kind::Params => "t2star_ms: ms; s0: a.u.; validity: 0/1",
            Kind::Field => "rad/ms",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    C64,
    F32,
}

impl DType {
    fn width(self) -> usize {
        match self {
            DType::C64 => 8,
            DType::F32 => 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub format: String,
    pub kind: Kind,
    pub dtype: DType,
    pub dims: Vec<usize>,
    pub dim_names: Vec<String>,
    pub units: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub echo_times_ms: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tr_ms: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub voxel_size_mm: Option<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub maps: Option<Vec<String>>,
}

impl Header {
    fn new(kind: Kind, dims: Vec<usize>) -> Self {
        Header {
            format: FORMAT_TAG.to_string(),
            kind,
            dtype: if kind.is_complex() { DType::C64 } else { DType::F32 },
            dims,
            dim_names: kind.dim_names().iter().map(|s| s.to_string()).collect(),
            units: kind.units().to_string(),
            echo_times_ms: None,
            tr_ms: None,
            voxel_size_mm: None,
            maps: None,
        }
    }

    fn element_count(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn payload_bytes(&self) -> usize {
        self.element_count() * self.dtype.width()
    }
}

/// Owned result of [`read_container`].
#[derive(Clone, Debug, PartialEq)]
pub enum Container {
    KSpace(KSpaceData),
    Image(ImageStack),
    Params(ParameterMaps),
    Field(FieldMap),
    Coils(CoilSensitivities),
    Mask(VolumeMask),
}

/// Borrowed view accepted by [`write_container`].
#[derive(Clone, Copy, Debug)]
pub enum ContainerRef<'a> {
    KSpace(&'a KSpaceData),
    Image(&'a ImageStack),
    Params(&'a ParameterMaps),
    Field(&'a FieldMap),
    Coils(&'a CoilSensitivities),
    Mask(&'a VolumeMask),
}

macro_rules! container_conversions {
    ($($variant:ident => $ty:ty),* $(,)?) => {
        $(
            impl<'a> From<&'a $ty> for ContainerRef<'a> {
                fn from(value: &'a $ty) -> Self {
                    ContainerRef::$variant(value)
                }
            }

            impl TryFrom<Container> for $ty {
                type Error = Error;

                fn try_from(value: Container) -> Result<Self> {
                    match value {
                        Container::$variant(v) => Ok(v),
                        other => Err(Error::Format(format!(
                            concat!("expected a ", stringify!($variant), " container, found {:?}"),
                            other.kind()
                        ))),
                    }
                }
            }
        )*
    };
}

container_conversions! {
    KSpace => KSpaceData,
    Image => ImageStack,
    Params => ParameterMaps,
    Field => FieldMap,
    Coils => CoilSensitivities,
    Mask => VolumeMask,
}

impl Container {
    pub fn kind(&self) -> Kind {
        match self {
            Container::KSpace(_) => Kind::Kspace,
            Container::Image(_) => Kind::Image,
            Container::Params(_) => Kind::Params,
            Container::Field(_) => Kind::Field,
            Container::Coils(_) => Kind::Coils,
            Container::Mask(_) => Kind::Mask,
        }
    }
}

fn push_complex(out: &mut Vec<u8>, values: &[C64]) {
    for v in values {
        out.extend_from_slice(&(v.re as f32).to_le_bytes());
        out.extend_from_slice(&(v.im as f32).to_le_bytes());
    }
}

fn push_real(out: &mut Vec<u8>, values: impl IntoIterator<Item = f64>) {
    for v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

fn read_f32s(bytes: &[u8]) -> impl Iterator<Item = f64> + '_ {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
}

fn read_complex(bytes: &[u8]) -> Vec<C64> {
    let reals: Vec<f64> = read_f32s(bytes).collect();
    reals.chunks_exact(2).map(|p| C64::new(p[0], p[1])).collect()
}

/// Serializes to the on-disk byte layout.
pub fn encode(data: ContainerRef<'_>) -> Result<Vec<u8>> {
    let (header, payload) = match data {
        ContainerRef::KSpace(k) => {
            let mut h = Header::new(Kind::Kspace, k.dims().as_array().to_vec());
            h.echo_times_ms = Some(k.echo_times_ms().to_vec());
            h.tr_ms = Some(k.tr_ms());
            h.voxel_size_mm = Some(k.voxel_size_mm());
            let mut p = Vec::with_capacity(h.payload_bytes());
            push_complex(&mut p, k.samples());
            (h, p)
        }
        ContainerRef::Image(img) => {
            let d = img.dims();
            let mut h = Header::new(Kind::Image, vec![d.slices, d.echoes, d.h, d.w]);
            h.echo_times_ms = Some(img.echo_times_ms().to_vec());
            h.voxel_size_mm = Some(img.voxel_size_mm());
            let mut p = Vec::with_capacity(h.payload_bytes());
            push_complex(&mut p, img.values());
            (h, p)
        }
        ContainerRef::Params(m) => {
            let d = m.dims();
            let mut h = Header::new(Kind::Params, vec![3, d.slices, d.h, d.w]);
            h.maps = Some(PARAM_MAPS.iter().map(|s| s.to_string()).collect());
            let mut p = Vec::with_capacity(h.payload_bytes());
            push_real(&mut p, m.t2star_ms().iter().copied());
            push_real(&mut p, m.s0().iter().copied());
            push_real(&mut p, m.valid().iter().map(|v| if *v { 1.0 } else { 0.0 }));
            (h, p)
        }
        ContainerRef::Field(f) => {
            let d = f.dims();
            let h = Header::new(Kind::Field, vec![d.slices, d.h, d.w]);
            let mut p = Vec::with_capacity(h.payload_bytes());
            push_real(&mut p, f.omega().iter().copied());
            (h, p)
        }
        ContainerRef::Coils(c) => {
            let d = c.dims();
            let h = Header::new(Kind::Coils, vec![c.coils(), d.slices, d.h, d.w]);
            let mut p = Vec::with_capacity(h.payload_bytes());
            push_complex(&mut p, c.maps());
            (h, p)
        }
        ContainerRef::Mask(m) => {
            let d = m.dims();
            let h = Header::new(Kind::Mask, vec![d.slices, d.h, d.w]);
            let mut p = Vec::with_capacity(h.payload_bytes());
            push_real(&mut p, m.values().iter().map(|v| if *v { 1.0 } else { 0.0 }));
            (h, p)
        }
    };
    if payload.len() != header.payload_bytes() {
        return Err(Error::Shape(format!(
            "payload has {} bytes but dims {:?} imply {}",
            payload.len(),
            header.dims,
            header.payload_bytes()
        )));
    }
    let json = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
    let mut out = Vec::with_capacity(8 + json.len() + payload.len());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Splits raw bytes into the parsed header and the payload slice.
pub fn decode_header(bytes: &[u8]) -> Result<(Header, &[u8])> {
    if bytes.len() < 8 {
        return Err(Error::Format("file shorter than the 8-byte length prefix".into()));
    }
    let header_len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    let rest = &bytes[8..];
    if header_len > rest.len() {
        return Err(Error::Format(format!(
            "header length {header_len} exceeds remaining {} bytes",
            rest.len()
        )));
    }
    let header: Header =
        serde_json::from_slice(&rest[..header_len]).map_err(|e| Error::Format(format!("header: {e}")))?;
    if header.format != FORMAT_TAG {
        return Err(Error::Format(format!("unknown format tag {:?}", header.format)));
    }
    if header.kind.is_complex() != (header.dtype == DType::C64) {
        return Err(Error::Format(format!(
            "dtype {:?} does not match {:?} payload",
            header.dtype, header.kind
        )));
    }
    let expected_names = header.kind.dim_names();
    if header.dims.len() != expected_names.len() || header.dim_names != expected_names {
        return Err(Error::Format(format!(
            "{:?} expects dims named {:?}, found {:?} with {} dims",
            header.kind,
            expected_names,
            header.dim_names,
            header.dims.len()
        )));
    }
    let payload = &rest[header_len..];
    let expected = header.payload_bytes();
    if payload.len() < expected {
        return Err(Error::Truncated {
            expected,
            found: payload.len(),
        });
    }
    if payload.len() > expected {
        return Err(Error::Format(format!(
            "{} trailing bytes after payload",
            payload.len() - expected
        )));
    }
    Ok((header, payload))
}

fn required<T: Clone>(value: &Option<T>, field: &str) -> Result<T> {
    value
        .clone()
        .ok_or_else(|| Error::Format(format!("header is missing {field}")))
}

pub fn decode(bytes: &[u8]) -> Result<Container> {
    let (h, payload) = decode_header(bytes)?;
    let d = &h.dims;
    Ok(match h.kind {
        Kind::Kspace => {
            let dims = KSpaceDims {
                slices: d[0],
                echoes: d[1],
                coils: d[2],
                pe: d[3],
                ro: d[4],
            };
            Container::KSpace(KSpaceData::new(
                dims,
                read_complex(payload),
                required(&h.echo_times_ms, "echo_times_ms")?,
                required(&h.tr_ms, "tr_ms")?,
                required(&h.voxel_size_mm, "voxel_size_mm")?,
            )?)
        }
        Kind::Image => {
            let dims = ImageDims {
                slices: d[0],
                echoes: d[1],
                h: d[2],
                w: d[3],
            };
            Container::Image(ImageStack::new(
                dims,
                read_complex(payload),
                required(&h.echo_times_ms, "echo_times_ms")?,
                required(&h.voxel_size_mm, "voxel_size_mm")?,
            )?)
        }
        Kind::Params => {
            if d[0] != 3 {
                return Err(Error::Format(format!("parameter container needs 3 maps, found {}", d[0])));
            }
            let dims = MapDims {
                slices: d[1],
                h: d[2],
                w: d[3],
            };
            let values: Vec<f64> = read_f32s(payload).collect();
            let n = dims.len();
            ParameterMaps::new(
                dims,
                values[..n].to_vec(),
                values[n..2 * n].to_vec(),
                values[2 * n..].iter().map(|v| *v != 0.0).collect(),
            )
            .map(Container::Params)?
        }
        Kind::Field => {
            let dims = MapDims {
                slices: d[0],
                h: d[1],
                w: d[2],
            };
            Container::Field(FieldMap::new(dims, read_f32s(payload).collect())?)
        }
        Kind::Coils => {
            let dims = MapDims {
                slices: d[1],
                h: d[2],
                w: d[3],
            };
            Container::Coils(CoilSensitivities::new(d[0], dims, read_complex(payload))?)
        }
        Kind::Mask => {
            let dims = MapDims {
                slices: d[0],
                h: d[1],
                w: d[2],
            };
            Container::Mask(VolumeMask::new(dims, read_f32s(payload).map(|v| v != 0.0).collect())?)
        }
    })
}

pub fn write_container<'a>(data: impl Into<ContainerRef<'a>>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(data.into())?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_container(path: impl AsRef<Path>) -> Result<Container> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Reads a container and converts it to the expected type.
pub fn read_as<T: TryFrom<Container, Error = Error>>(path: impl AsRef<Path>) -> Result<T> {
    T::try_from(read_container(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_kspace() -> KSpaceData {
        let dims = KSpaceDims {
            slices: 1,
            echoes: 3,
            coils: 1,
            pe: 2,
            ro: 2,
        };
        KSpaceData::new(dims, vec![C64::default(); 12], vec![5.0, 10.0, 15.0], 2300.0, [2.0, 2.0, 3.0]).unwrap()
    }

    fn with_header(header: &serde_json::Value, payload: &[u8]) -> Vec<u8> {
        let json = serde_json::to_vec(header).unwrap();
        let mut out = (json.len() as u64).to_le_bytes().to_vec();
        out.extend_from_slice(&json);
        out.extend_from_slice(payload);
        out
    }

    #[test]
    fn payload_size_is_eight_bytes_per_complex() {
        let bytes = encode((&tiny_kspace()).into()).unwrap();
        let header_len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        // 1*3*1*2*2 complex64 samples
        assert_eq!(bytes.len(), 8 + header_len + 12 * 8);
    }

    #[test]
    fn f32_dtype_on_complex_kind_is_rejected() {
        let bytes = encode((&tiny_kspace()).into()).unwrap();
        let (header, payload) = decode_header(&bytes).unwrap();
        let mut json = serde_json::to_value(&header).unwrap();
        json["dtype"] = "f32".into();
        let err = decode(&with_header(&json, payload)).unwrap_err();
        assert!(matches!(err, Error::Format(_)), "{err}");
    }

    #[test]
    fn repeated_echo_time_is_reported() {
        let bytes = encode((&tiny_kspace()).into()).unwrap();
        let (header, payload) = decode_header(&bytes).unwrap();
        let mut json = serde_json::to_value(&header).unwrap();
        json["echo_times_ms"] = serde_json::json!([5.0, 5.0, 10.0]);
        match decode(&with_header(&json, payload)).unwrap_err() {
            Error::Invariant { field, .. } => assert_eq!(field, "echo_times_ms"),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn short_payload_is_truncation() {
        let mut bytes = encode((&tiny_kspace()).into()).unwrap();
        bytes.truncate(bytes.len() - 5);
        assert!(matches!(decode(&bytes), Err(Error::Truncated { found: 91, expected: 96 })));
    }

    #[test]
    fn unknown_dtype_is_rejected() {
        let bytes = encode((&tiny_kspace()).into()).unwrap();
        let (header, payload) = decode_header(&bytes).unwrap();
        let mut json = serde_json::to_value(&header).unwrap();
        json["dtype"] = "c128".into();
        assert!(matches!(decode(&with_header(&json, payload)), Err(Error::Format(_))));
    }

    #[test]
    fn wrong_kind_conversion_fails() {
        let c = decode(&encode((&tiny_kspace()).into()).unwrap()).unwrap();
        assert!(FieldMap::try_from(c).is_err());
    }
}
