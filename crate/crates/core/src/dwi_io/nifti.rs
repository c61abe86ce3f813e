//! Single-file NIfTI-1 (`.nii` / `.nii.gz`) reader and writer.
//!
//! Supports uint8, int16 and float32 payloads in up to four dimensions. The
//! qform/sform orientation fields are carried through untouched; the
//! pipeline itself treats every grid as axis aligned.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use crate::error::{Error, Result};
use crate::volume::{Grid3, Volume};

pub const HEADER_SIZE: usize = 348;
pub const VOX_OFFSET: usize = 352;
const MAGIC: &[u8; 4] = b"n+1\0";
const GZIP_MAGIC: [u8; 2] = [0x1f, 0x8b];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NiftiDatatype {
    Uint8,
    Int16,
    Float32,
}

impl NiftiDatatype {
    pub fn code(self) -> i16 {
        match self {
            NiftiDatatype::Uint8 => 2,
            NiftiDatatype::Int16 => 4,
            NiftiDatatype::Float32 => 16,
        }
    }

    pub fn from_code(code: i16) -> Result<Self> {
        match code {
            2 => Ok(NiftiDatatype::Uint8),
            4 => Ok(NiftiDatatype::Int16),
            16 => Ok(NiftiDatatype::Float32),
            other => Err(Error::UnsupportedDatatype(other)),
        }
    }

    pub fn bytes(self) -> usize {
        match self {
            NiftiDatatype::Uint8 => 1,
            NiftiDatatype::Int16 => 2,
            NiftiDatatype::Float32 => 4,
        }
    }
}

/// The subset of NIfTI-1 header fields the pipeline reads or preserves.
#[derive(Clone, Debug, PartialEq)]
pub struct NiftiHeaderLite {
    /// `dim[1..=ndim]`, at most four entries.
    pub dims: Vec<usize>,
    pub datatype: NiftiDatatype,
    pub pixdim: [f32; 8],
    pub scl_slope: f32,
    pub scl_inter: f32,
    pub vox_offset: usize,
    pub qform_code: i16,
    pub sform_code: i16,
    pub quatern: [f32; 3],
    pub qoffset: [f32; 3],
    pub srow: [[f32; 4]; 3],
}

impl NiftiHeaderLite {
    /// Header for an axis-aligned volume: sform carries spacing and origin.
    pub fn for_volume(v: &Volume, datatype: NiftiDatatype) -> Self {
        let g = v.grid();
        let mut dims = g.dims.to_vec();
        if v.channels() > 1 {
            dims.push(v.channels());
        }
        let mut pixdim = [0.0f32; 8];
        pixdim[0] = 1.0;
        for a in 0..3 {
            pixdim[a + 1] = g.spacing[a] as f32;
        }
        if v.channels() > 1 {
            pixdim[4] = 1.0;
        }
        let mut srow = [[0.0f32; 4]; 3];
        for a in 0..3 {
            srow[a][a] = g.spacing[a] as f32;
            srow[a][3] = g.origin[a] as f32;
        }
        NiftiHeaderLite {
            dims,
            datatype,
            pixdim,
            scl_slope: 1.0,
            scl_inter: 0.0,
            vox_offset: VOX_OFFSET,
            qform_code: 0,
            sform_code: 1,
            quatern: [0.0; 3],
            qoffset: std::array::from_fn(|a| g.origin[a] as f32),
            srow,
        }
    }

    fn num_values(&self) -> usize {
        self.dims.iter().product()
    }

    fn grid(&self) -> Result<Grid3> {
        let dim = |a: usize| self.dims.get(a).copied().unwrap_or(1);
        let spacing = std::array::from_fn(|a| {
            let s = self.pixdim[a + 1].abs() as f64;
            if s > 0.0 && s.is_finite() {
                s
            } else {
                1.0
            }
        });
        let origin = if self.sform_code > 0 {
            std::array::from_fn(|a| self.srow[a][3] as f64)
        } else {
            std::array::from_fn(|a| self.qoffset[a] as f64)
        };
        Grid3::with_origin([dim(0), dim(1), dim(2)], spacing, origin)
    }

    fn encode(&self) -> Vec<u8> {
        let mut h = vec![0u8; VOX_OFFSET];
        let put_i16 =
            |h: &mut Vec<u8>, off: usize, v: i16| h[off..off + 2].copy_from_slice(&v.to_le_bytes());
        let put_f32 =
            |h: &mut Vec<u8>, off: usize, v: f32| h[off..off + 4].copy_from_slice(&v.to_le_bytes());
        h[0..4].copy_from_slice(&(HEADER_SIZE as i32).to_le_bytes());
        h[38] = b'r';
        put_i16(&mut h, 40, self.dims.len() as i16);
        for (a, &d) in self.dims.iter().enumerate() {
            put_i16(&mut h, 42 + 2 * a, d as i16);
        }
        for a in self.dims.len()..7 {
            put_i16(&mut h, 42 + 2 * a, 1);
        }
        put_i16(&mut h, 70, self.datatype.code());
        put_i16(&mut h, 72, (self.datatype.bytes() * 8) as i16);
        for (a, &p) in self.pixdim.iter().enumerate() {
            put_f32(&mut h, 76 + 4 * a, p);
        }
        put_f32(&mut h, 108, self.vox_offset as f32);
        put_f32(&mut h, 112, self.scl_slope);
        put_f32(&mut h, 116, self.scl_inter);
        // mm + seconds
        h[123] = 2 | 8;
        put_i16(&mut h, 252, self.qform_code);
        put_i16(&mut h, 254, self.sform_code);
        for a in 0..3 {
            put_f32(&mut h, 256 + 4 * a, self.quatern[a]);
            put_f32(&mut h, 268 + 4 * a, self.qoffset[a]);
            for c in 0..4 {
                put_f32(&mut h, 280 + 16 * a + 4 * c, self.srow[a][c]);
            }
        }
        h[344..348].copy_from_slice(MAGIC);
        h
    }

    fn decode(bytes: &[u8], path: &Path) -> Result<(Self, bool)> {
        if bytes.len() < HEADER_SIZE {
            return Err(Error::TruncatedPayload {
                expected: HEADER_SIZE,
                found: bytes.len(),
            });
        }
        let little = i32::from_le_bytes(bytes[0..4].try_into().unwrap()) == HEADER_SIZE as i32;
        let big = i32::from_be_bytes(bytes[0..4].try_into().unwrap()) == HEADER_SIZE as i32;
        if (!little && !big) || &bytes[344..348] != MAGIC {
            return Err(Error::BadMagic(path.to_path_buf()));
        }
        let i16_at = |off: usize| {
            let b = [bytes[off], bytes[off + 1]];
            if little {
                i16::from_le_bytes(b)
            } else {
                i16::from_be_bytes(b)
            }
        };
        let f32_at = |off: usize| {
            let b: [u8; 4] = bytes[off..off + 4].try_into().unwrap();
            if little {
                f32::from_le_bytes(b)
            } else {
                f32::from_be_bytes(b)
            }
        };

        let ndim = i16_at(40);
        if !(1..=7).contains(&ndim) {
            return Err(Error::InvalidHeader(format!("dim[0] = {ndim}")));
        }
        let mut dims = Vec::new();
        for a in 0..ndim as usize {
            let d = i16_at(42 + 2 * a);
            if d < 1 {
                return Err(Error::InvalidHeader(format!("dim[{}] = {d}", a + 1)));
            }
            dims.push(d as usize);
        }
        if dims.len() > 4 {
            if dims[4..].iter().any(|&d| d != 1) {
                return Err(Error::InvalidHeader(
                    "more than four non-singleton dimensions".into(),
                ));
            }
            dims.truncate(4);
        }
        let datatype = NiftiDatatype::from_code(i16_at(70))?;
        let vox_offset = f32_at(108);
        if !(vox_offset >= HEADER_SIZE as f32) {
            return Err(Error::InvalidHeader(format!("vox_offset = {vox_offset}")));
        }
        let mut scl_slope = f32_at(112);
        if scl_slope == 0.0 || !scl_slope.is_finite() {
            scl_slope = 1.0;
        }
        let scl_inter = f32_at(116);
        let header = NiftiHeaderLite {
            dims,
            datatype,
            pixdim: std::array::from_fn(|a| f32_at(76 + 4 * a)),
            scl_slope,
            scl_inter: if scl_inter.is_finite() {
                scl_inter
            } else {
                0.0
            },
            vox_offset: vox_offset as usize,
            qform_code: i16_at(252),
            sform_code: i16_at(254),
            quatern: std::array::from_fn(|a| f32_at(256 + 4 * a)),
            qoffset: std::array::from_fn(|a| f32_at(268 + 4 * a)),
            srow: std::array::from_fn(|a| std::array::from_fn(|c| f32_at(280 + 16 * a + 4 * c))),
        };
        Ok((header, little))
    }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.len() >= 2 && raw[..2] == GZIP_MAGIC {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

pub fn read_nifti_with_header(path: impl AsRef<Path>) -> Result<(NiftiHeaderLite, Volume)> {
    let path = path.as_ref();
    let bytes = read_bytes(path)?;
    let (header, little) = NiftiHeaderLite::decode(&bytes, path)?;
    let n = header.num_values();
    let width = header.datatype.bytes();
    let expected = header.vox_offset + n * width;
    if bytes.len() < expected {
        return Err(Error::TruncatedPayload {
            expected,
            found: bytes.len(),
        });
    }
    let payload = &bytes[header.vox_offset..expected];
    let (slope, inter) = (header.scl_slope, header.scl_inter);
    let data: Vec<f32> = match header.datatype {
        NiftiDatatype::Uint8 => payload.iter().map(|&b| b as f32 * slope + inter).collect(),
        NiftiDatatype::Int16 => payload
            .chunks_exact(2)
            .map(|c| {
                let b = [c[0], c[1]];
                let raw = if little {
                    i16::from_le_bytes(b)
                } else {
                    i16::from_be_bytes(b)
                };
                raw as f32 * slope + inter
            })
            .collect(),
        NiftiDatatype::Float32 => payload
            .chunks_exact(4)
            .map(|c| {
                let b: [u8; 4] = c.try_into().unwrap();
                let raw = if little {
                    f32::from_le_bytes(b)
                } else {
                    f32::from_be_bytes(b)
                };
                if slope == 1.0 && inter == 0.0 {
                    raw
                } else {
                    raw * slope + inter
                }
            })
            .collect(),
    };
    let grid = header.grid()?;
    let channels = header.dims.get(3).copied().unwrap_or(1);
    let volume = Volume::new(grid, channels, data)?;
    Ok((header, volume))
}

pub fn read_nifti(path: impl AsRef<Path>) -> Result<Volume> {
    read_nifti_with_header(path).map(|(_, v)| v)
}

/// Writes `v` using the geometry, orientation and scaling in `header`.
/// Integer payloads are `round((value - inter) / slope)`, saturated.
pub fn write_nifti_with_header(
    v: &Volume,
    path: impl AsRef<Path>,
    header: &NiftiHeaderLite,
) -> Result<()> {
    let path = path.as_ref();
    if header.num_values() != v.data().len() {
        return Err(Error::Shape(format!(
            "header dims {:?} do not match volume of {} values",
            header.dims,
            v.data().len()
        )));
    }
    let mut header = header.clone();
    header.vox_offset = VOX_OFFSET;
    if header.datatype == NiftiDatatype::Float32 {
        header.scl_slope = 1.0;
        header.scl_inter = 0.0;
    }
    let (slope, inter) = (header.scl_slope, header.scl_inter);

    let mut bytes = header.encode();
    bytes.reserve(v.data().len() * header.datatype.bytes());
    match header.datatype {
        NiftiDatatype::Uint8 => {
            for &x in v.data() {
                bytes.push(((x - inter) / slope).round().clamp(0.0, 255.0) as u8);
            }
        }
        NiftiDatatype::Int16 => {
            for &x in v.data() {
                let raw = ((x - inter) / slope)
                    .round()
                    .clamp(i16::MIN as f32, i16::MAX as f32);
                bytes.extend_from_slice(&(raw as i16).to_le_bytes());
            }
        }
        NiftiDatatype::Float32 => {
            for &x in v.data() {
                bytes.extend_from_slice(&x.to_le_bytes());
            }
        }
    }

    let gz = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("gz"));
    let out = if gz {
        let mut enc = GzEncoder::new(Vec::new(), Compression::default());
        enc.write_all(&bytes).map_err(|e| Error::io(path, e))?;
        enc.finish().map_err(|e| Error::io(path, e))?
    } else {
        bytes
    };
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Writes an axis-aligned volume; `.gz` suffix selects gzip.
pub fn write_nifti(v: &Volume, path: impl AsRef<Path>, datatype: NiftiDatatype) -> Result<()> {
    write_nifti_with_header(v, path, &NiftiHeaderLite::for_volume(v, datatype))
}
