//! Minimal NIfTI-1 single-file (`.nii`) codec.
//!
//! Reading understands the magic, `dim`, `datatype`, `pixdim`, `vox_offset`,
//! `scl_slope`/`scl_inter` and header extensions. Timing fields are ignored;
//! frame timing lives in the JSON sidecar. Only little-endian files with
//! float32, int16 or uint16 payloads are accepted.

use super::{Result, VolumeError};
use std::path::Path;

pub const HEADER_SIZE: usize = 348;
pub const MAGIC: [u8; 4] = *b"n+1\0";

pub const DT_INT16: i16 = 4;
pub const DT_FLOAT32: i16 = 16;
pub const DT_UINT16: i16 = 512;

/// Extension code used for JSON comment payloads.
pub const ECODE_COMMENT: i32 = 6;

#[derive(Debug, Clone, PartialEq)]
pub struct NiftiExtension {
    pub code: i32,
    pub data: Vec<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Datatype {
    Float32,
    Int16,
    Uint16,
}

impl Datatype {
    fn from_code(code: i16) -> Result<Self> {
        match code {
            DT_FLOAT32 => Ok(Self::Float32),
            DT_INT16 => Ok(Self::Int16),
            DT_UINT16 => Ok(Self::Uint16),
            other => Err(VolumeError::UnsupportedDatatype(other)),
        }
    }

    fn code(self) -> i16 {
        match self {
            Self::Float32 => DT_FLOAT32,
            Self::Int16 => DT_INT16,
            Self::Uint16 => DT_UINT16,
        }
    }

    fn bytes(self) -> usize {
        match self {
            Self::Float32 => 4,
            Self::Int16 | Self::Uint16 => 2,
        }
    }
}

/// Decoded image: dims are `dim[1..=dim[0]]`, data is scaled and x-fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct NiftiImage {
    pub dims: Vec<usize>,
    pub pixdim: [f64; 3],
    pub datatype: Datatype,
    pub data: Vec<f32>,
    pub extensions: Vec<NiftiExtension>,
}

impl NiftiImage {
    pub fn spatial_dims(&self) -> [usize; 3] {
        let d = |i: usize| self.dims.get(i).copied().unwrap_or(1);
        [d(0), d(1), d(2)]
    }

    /// Product of dims beyond the third (1 for 3D images).
    pub fn n_volumes(&self) -> usize {
        self.dims.iter().skip(3).product()
    }
}

fn i16_at(b: &[u8], off: usize) -> i16 {
    i16::from_le_bytes([b[off], b[off + 1]])
}

fn i32_at(b: &[u8], off: usize) -> i32 {
    i32::from_le_bytes([b[off], b[off + 1], b[off + 2], b[off + 3]])
}

fn f32_at(b: &[u8], off: usize) -> f32 {
    f32::from_le_bytes([b[off], b[off + 1], b[off + 2], b[off + 3]])
}

pub fn decode(bytes: &[u8]) -> Result<NiftiImage> {
    if bytes.len() < HEADER_SIZE {
        return Err(VolumeError::Truncated {
            expected: HEADER_SIZE,
            actual: bytes.len(),
        });
    }
    let magic: [u8; 4] = bytes[344..348].try_into().unwrap();
    if magic != MAGIC {
        return Err(VolumeError::BadMagic(magic));
    }
    if i32_at(bytes, 0) != HEADER_SIZE as i32 {
        return Err(VolumeError::BadHeader(
            "sizeof_hdr != 348 (big-endian files are not supported)".into(),
        ));
    }

    let ndim = i16_at(bytes, 40);
    if !(1..=7).contains(&ndim) {
        return Err(VolumeError::BadHeader(format!("dim[0] = {ndim}")));
    }
    let mut dims = Vec::with_capacity(ndim as usize);
    for k in 1..=ndim as usize {
        let d = i16_at(bytes, 40 + 2 * k);
        if d < 1 {
            return Err(VolumeError::BadHeader(format!("dim[{k}] = {d}")));
        }
        dims.push(d as usize);
    }
    let datatype = Datatype::from_code(i16_at(bytes, 70))?;
    let pixdim = [
        f32_at(bytes, 80) as f64,
        f32_at(bytes, 84) as f64,
        f32_at(bytes, 88) as f64,
    ];
    let vox_offset = f32_at(bytes, 108);
    if !(vox_offset.is_finite() && vox_offset >= HEADER_SIZE as f32) {
        return Err(VolumeError::BadHeader(format!("vox_offset = {vox_offset}")));
    }
    let vox_offset = vox_offset as usize;
    let slope = f32_at(bytes, 112);
    let inter = f32_at(bytes, 116);

    let extensions = decode_extensions(bytes, vox_offset);

    let n: usize = dims.iter().product();
    let need = vox_offset + n * datatype.bytes();
    if bytes.len() < need {
        return Err(VolumeError::Truncated {
            expected: need,
            actual: bytes.len(),
        });
    }
    let payload = &bytes[vox_offset..need];
    let raw: Vec<f32> = match datatype {
        Datatype::Float32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect(),
        Datatype::Int16 => payload
            .chunks_exact(2)
            .map(|c| i16::from_le_bytes([c[0], c[1]]) as f32)
            .collect(),
        Datatype::Uint16 => payload
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes([c[0], c[1]]) as f32)
            .collect(),
    };
    // slope 0 means "no scaling"; identity scaling keeps float32 payloads bit-exact
    let identity = slope == 0.0 || !slope.is_finite() || (slope == 1.0 && inter == 0.0);
    let data = if identity {
        raw
    } else {
        raw.into_iter()
            .map(|v| (v as f64 * slope as f64 + inter as f64) as f32)
            .collect()
    };

    Ok(NiftiImage {
        dims,
        pixdim,
        datatype,
        data,
        extensions,
    })
}

fn decode_extensions(bytes: &[u8], vox_offset: usize) -> Vec<NiftiExtension> {
    let mut out = Vec::new();
    if vox_offset < HEADER_SIZE + 4 || bytes.len() < HEADER_SIZE + 4 || bytes[HEADER_SIZE] == 0 {
        return out;
    }
    let mut pos = HEADER_SIZE + 4;
    while pos + 8 <= vox_offset.min(bytes.len()) {
        let esize = i32_at(bytes, pos);
        let ecode = i32_at(bytes, pos + 4);
        if esize < 16 || esize % 16 != 0 {
            break;
        }
        let end = pos + esize as usize;
        if end > vox_offset || end > bytes.len() {
            break;
        }
        let data = bytes[pos + 8..end].to_vec();
        out.push(NiftiExtension { code: ecode, data });
        pos = end;
    }
    out
}

/// Payload to encode.
pub enum Payload<'a> {
    Float32(&'a [f32]),
    Int16(&'a [i16]),
}

impl Payload<'_> {
    fn len(&self) -> usize {
        match self {
            Payload::Float32(d) => d.len(),
            Payload::Int16(d) => d.len(),
        }
    }

    fn datatype(&self) -> Datatype {
        match self {
            Payload::Float32(_) => Datatype::Float32,
            Payload::Int16(_) => Datatype::Int16,
        }
    }
}

pub fn encode(
    dims: &[usize],
    pixdim: [f64; 3],
    payload: Payload<'_>,
    extensions: &[NiftiExtension],
) -> Result<Vec<u8>> {
    if dims.is_empty() || dims.len() > 7 {
        return Err(VolumeError::BadHeader(format!("{} dims", dims.len())));
    }
    if let Some(d) = dims.iter().find(|&&d| d == 0 || d > i16::MAX as usize) {
        return Err(VolumeError::BadHeader(format!("dim {d} out of range")));
    }
    let n: usize = dims.iter().product();
    if payload.len() != n {
        return Err(VolumeError::LengthMismatch {
            expected: n,
            actual: payload.len(),
        });
    }

    let mut ext_bytes = Vec::new();
    for e in extensions {
        let esize = (8 + e.data.len()).div_ceil(16) * 16;
        ext_bytes.extend_from_slice(&(esize as i32).to_le_bytes());
        ext_bytes.extend_from_slice(&e.code.to_le_bytes());
        ext_bytes.extend_from_slice(&e.data);
        ext_bytes.resize(ext_bytes.len() + esize - 8 - e.data.len(), 0);
    }
    let vox_offset = HEADER_SIZE + 4 + ext_bytes.len();
    let datatype = payload.datatype();

    let mut h = vec![0u8; HEADER_SIZE];
    let put_i16 =
        |h: &mut [u8], off: usize, v: i16| h[off..off + 2].copy_from_slice(&v.to_le_bytes());
    let put_f32 =
        |h: &mut [u8], off: usize, v: f32| h[off..off + 4].copy_from_slice(&v.to_le_bytes());
    h[0..4].copy_from_slice(&(HEADER_SIZE as i32).to_le_bytes());
    h[38] = b'r';
    put_i16(&mut h, 40, dims.len() as i16);
    for (k, &d) in dims.iter().enumerate() {
        put_i16(&mut h, 42 + 2 * k, d as i16);
    }
    for k in dims.len()..7 {
        put_i16(&mut h, 42 + 2 * k, 1);
    }
    put_i16(&mut h, 70, datatype.code());
    put_i16(&mut h, 72, (datatype.bytes() * 8) as i16);
    put_f32(&mut h, 76, 1.0);
    for (k, &p) in pixdim.iter().enumerate() {
        put_f32(&mut h, 80 + 4 * k, p as f32);
    }
    put_f32(&mut h, 108, vox_offset as f32);
    put_f32(&mut h, 112, 1.0);
    put_f32(&mut h, 116, 0.0);
    // mm + seconds
    h[123] = 2 | 8;
    let descrip = b"dfdg";
    h[148..148 + descrip.len()].copy_from_slice(descrip);
    put_i16(&mut h, 254, 1);
    put_f32(&mut h, 280, pixdim[0] as f32);
    put_f32(&mut h, 300, pixdim[1] as f32);
    put_f32(&mut h, 320, pixdim[2] as f32);
    h[344..348].copy_from_slice(&MAGIC);

    let mut out = Vec::with_capacity(vox_offset + n * datatype.bytes());
    out.extend_from_slice(&h);
    out.extend_from_slice(&[u8::from(!extensions.is_empty()), 0, 0, 0]);
    out.extend_from_slice(&ext_bytes);
    match payload {
        Payload::Float32(d) => d
            .iter()
            .for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        Payload::Int16(d) => d
            .iter()
            .for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
    }
    Ok(out)
}

pub fn read(path: &Path) -> Result<NiftiImage> {
    let bytes = std::fs::read(path).map_err(|source| VolumeError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<u8> {
        let data: Vec<f32> = (0..4 * 4 * 3 * 2).map(|i| i as f32 * 0.25).collect();
        encode(&[4, 4, 3, 2], [2.0, 2.0, 2.5], Payload::Float32(&data), &[]).unwrap()
    }

    #[test]
    fn float32_round_trip() {
        let bytes = sample();
        assert_eq!(bytes.len(), 352 + 96 * 4);
        let img = decode(&bytes).unwrap();
        assert_eq!(img.dims, vec![4, 4, 3, 2]);
        assert_eq!(img.pixdim, [2.0, 2.0, 2.5]);
        assert_eq!(img.data[5], 1.25);
        assert_eq!(img.n_volumes(), 2);
    }

    #[test]
    fn bad_magic() {
        let mut bytes = sample();
        bytes[344..348].copy_from_slice(b"ni1\0");
        assert!(matches!(decode(&bytes), Err(VolumeError::BadMagic(m)) if &m == b"ni1\0"));
    }

    #[test]
    fn truncated_payload() {
        let data = vec![0f32; 4 * 4 * 4 * 2];
        let mut bytes = encode(&[4, 4, 4, 2], [1.0; 3], Payload::Float32(&data), &[]).unwrap();
        bytes.truncate(352 + 100);
        assert!(matches!(
            decode(&bytes),
            Err(VolumeError::Truncated {
                expected: 864,
                actual: 452
            })
        ));
    }

    #[test]
    fn unsupported_datatype() {
        let mut bytes = sample();
        bytes[70..72].copy_from_slice(&2i16.to_le_bytes());
        assert!(matches!(
            decode(&bytes),
            Err(VolumeError::UnsupportedDatatype(2))
        ));
    }

    #[test]
    fn scaling_is_applied() {
        let data: Vec<i16> = vec![1, 2, 3, 4];
        let mut bytes = encode(&[2, 2, 1], [1.0; 3], Payload::Int16(&data), &[]).unwrap();
        bytes[112..116].copy_from_slice(&2.0f32.to_le_bytes());
        bytes[116..120].copy_from_slice(&0.5f32.to_le_bytes());
        let img = decode(&bytes).unwrap();
        assert_eq!(img.data, vec![2.5, 4.5, 6.5, 8.5]);
    }

    #[test]
    fn uint16_payload() {
        let data: Vec<i16> = vec![-1, 2];
        let mut bytes = encode(&[2, 1, 1], [1.0; 3], Payload::Int16(&data), &[]).unwrap();
        bytes[70..72].copy_from_slice(&DT_UINT16.to_le_bytes());
        let img = decode(&bytes).unwrap();
        assert_eq!(img.data, vec![65535.0, 2.0]);
    }

    #[test]
    fn extensions_round_trip() {
        let ext = NiftiExtension {
            code: ECODE_COMMENT,
            data: br#"{"a":1}"#.to_vec(),
        };
        let data: Vec<i16> = vec![7; 8];
        let bytes = encode(&[2, 2, 2], [1.0; 3], Payload::Int16(&data), &[ext]).unwrap();
        let img = decode(&bytes).unwrap();
        assert_eq!(img.extensions.len(), 1);
        assert_eq!(img.extensions[0].code, ECODE_COMMENT);
        assert!(img.extensions[0].data.starts_with(br#"{"a":1}"#));
        assert_eq!(img.data, vec![7.0; 8]);
    }
}
