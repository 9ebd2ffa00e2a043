//! Single-file NIfTI-1 (`.nii`) reader and writer.
//!
//! Supported: `n+1` magic, rank-3 volumes (or rank 4 with a singleton time
//! axis), datatypes uint8/int16/float32/float64, either byte order on
//! read. The writer always emits little-endian, sform-only files with the
//! data at byte 352 so that output bytes are fully deterministic.

use byteorder::{BigEndian, ByteOrder, LittleEndian};
use thiserror::Error;

use crate::volume::{Affine, AffineSource, Volume, VolumeError};

pub const HEADER_SIZE: usize = 348;
pub const DEFAULT_VOX_OFFSET: usize = 352;
pub const MAGIC_SINGLE_FILE: &[u8; 4] = b"n+1\0";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NiftiError {
    #[error("input is {0} bytes, shorter than a NIfTI-1 header")]
    Truncated(usize),
    #[error("sizeof_hdr is not 348 in either byte order")]
    BadHeaderSize,
    #[error("magic {0:?} is not a single-file NIfTI-1 magic")]
    BadMagic([u8; 4]),
    #[error("unsupported datatype code {0}")]
    UnsupportedDatatype(i16),
    #[error("unsupported dimensions {0:?}")]
    UnsupportedDimensions([i16; 8]),
    #[error("data region is {got} bytes, header declares {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("header field {0} is not finite")]
    NonFiniteHeaderField(&'static str),
    #[error("vox_offset {0} is invalid")]
    BadVoxOffset(f32),
    #[error("value {value} at voxel {index} is not representable as {datatype:?}")]
    ValueOutOfRange {
        index: usize,
        value: f64,
        datatype: Datatype,
    },
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

/// Voxel storage types understood by this module.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Datatype {
    Uint8,
    Int16,
    Float32,
    Float64,
}

impl Datatype {
    pub fn code(self) -> i16 {
        match self {
            Datatype::Uint8 => 2,
            Datatype::Int16 => 4,
            Datatype::Float32 => 16,
            Datatype::Float64 => 64,
        }
    }

    pub fn from_code(code: i16) -> Result<Self, NiftiError> {
        match code {
            2 => Ok(Datatype::Uint8),
            4 => Ok(Datatype::Int16),
            16 => Ok(Datatype::Float32),
            64 => Ok(Datatype::Float64),
            other => Err(NiftiError::UnsupportedDatatype(other)),
        }
    }

    pub fn byte_width(self) -> usize {
        match self {
            Datatype::Uint8 => 1,
            Datatype::Int16 => 2,
            Datatype::Float32 => 4,
            Datatype::Float64 => 8,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Datatype::Uint8 => "uint8",
            Datatype::Int16 => "int16",
            Datatype::Float32 => "float32",
            Datatype::Float64 => "float64",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Endianness {
    Little,
    Big,
}

/// The subset of NIfTI-1 header fields this crate reads and writes.
#[derive(Debug, Clone, PartialEq)]
pub struct NiftiHeader {
    pub sizeof_hdr: i32,
    pub dim: [i16; 8],
    pub datatype: Datatype,
    pub pixdim: [f32; 8],
    pub vox_offset: f32,
    pub scl_slope: f32,
    pub scl_inter: f32,
    pub sform_code: i16,
    pub srow_x: [f32; 4],
    pub srow_y: [f32; 4],
    pub srow_z: [f32; 4],
    pub magic: [u8; 4],
    pub endianness: Endianness,
}

impl NiftiHeader {
    pub fn extents(&self) -> [usize; 3] {
        [
            self.dim[1] as usize,
            self.dim[2] as usize,
            self.dim[3] as usize,
        ]
    }

    fn data_len(&self) -> usize {
        self.extents().iter().product::<usize>() * self.datatype.byte_width()
    }
}

fn read_header<B: ByteOrder>(b: &[u8], endianness: Endianness) -> Result<NiftiHeader, NiftiError> {
    let mut dim = [0i16; 8];
    for (i, d) in dim.iter_mut().enumerate() {
        *d = B::read_i16(&b[40 + 2 * i..]);
    }
    let datatype = Datatype::from_code(B::read_i16(&b[70..]))?;
    let mut pixdim = [0f32; 8];
    for (i, p) in pixdim.iter_mut().enumerate() {
        *p = B::read_f32(&b[76 + 4 * i..]);
    }
    let row = |off: usize| {
        let mut r = [0f32; 4];
        for (i, x) in r.iter_mut().enumerate() {
            *x = B::read_f32(&b[off + 4 * i..]);
        }
        r
    };
    let mut magic = [0u8; 4];
    magic.copy_from_slice(&b[344..348]);
    Ok(NiftiHeader {
        sizeof_hdr: B::read_i32(&b[0..]),
        dim,
        datatype,
        pixdim,
        vox_offset: B::read_f32(&b[108..]),
        scl_slope: B::read_f32(&b[112..]),
        scl_inter: B::read_f32(&b[116..]),
        sform_code: B::read_i16(&b[254..]),
        srow_x: row(280),
        srow_y: row(296),
        srow_z: row(312),
        magic,
        endianness,
    })
}

/// Parse and validate the 348-byte header at the start of `bytes`.
pub fn parse_header(bytes: &[u8]) -> Result<NiftiHeader, NiftiError> {
    if bytes.len() < HEADER_SIZE {
        return Err(NiftiError::Truncated(bytes.len()));
    }
    let mut magic = [0u8; 4];
    magic.copy_from_slice(&bytes[344..348]);
    if &magic != MAGIC_SINGLE_FILE {
        return Err(NiftiError::BadMagic(magic));
    }
    let header = if LittleEndian::read_i32(bytes) == HEADER_SIZE as i32 {
        read_header::<LittleEndian>(bytes, Endianness::Little)?
    } else if BigEndian::read_i32(bytes) == HEADER_SIZE as i32 {
        read_header::<BigEndian>(bytes, Endianness::Big)?
    } else {
        return Err(NiftiError::BadHeaderSize);
    };

    let dim = header.dim;
    let rank_ok = dim[0] == 3 || (dim[0] == 4 && dim[4] == 1);
    if !rank_ok || dim[1..4].iter().any(|&d| d < 1) {
        return Err(NiftiError::UnsupportedDimensions(dim));
    }
    let finite = |name: &'static str, vals: &[f32]| {
        if vals.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(NiftiError::NonFiniteHeaderField(name))
        }
    };
    finite("pixdim", &header.pixdim[1..4])?;
    finite("vox_offset", &[header.vox_offset])?;
    finite("scl_slope", &[header.scl_slope])?;
    finite("scl_inter", &[header.scl_inter])?;
    if header.sform_code > 0 {
        finite("srow_x", &header.srow_x)?;
        finite("srow_y", &header.srow_y)?;
        finite("srow_z", &header.srow_z)?;
    }
    if header.vox_offset < DEFAULT_VOX_OFFSET as f32 || header.vox_offset.fract() != 0.0 {
        return Err(NiftiError::BadVoxOffset(header.vox_offset));
    }
    Ok(header)
}

fn header_affine(h: &NiftiHeader) -> (Affine, AffineSource) {
    if h.sform_code > 0 {
        let r = |row: [f32; 4]| row.map(f64::from);
        (
            [r(h.srow_x), r(h.srow_y), r(h.srow_z), [0.0, 0.0, 0.0, 1.0]],
            AffineSource::Sform,
        )
    } else {
        let s = |p: f32| if p == 0.0 { 1.0 } else { f64::from(p).abs() };
        (
            [
                [s(h.pixdim[1]), 0.0, 0.0, 0.0],
                [0.0, s(h.pixdim[2]), 0.0, 0.0],
                [0.0, 0.0, s(h.pixdim[3]), 0.0],
                [0.0, 0.0, 0.0, 1.0],
            ],
            AffineSource::PixdimFallback,
        )
    }
}

fn decode_values<B: ByteOrder>(raw: &[u8], datatype: Datatype) -> Vec<f64> {
    let w = datatype.byte_width();
    raw.chunks_exact(w)
        .map(|c| match datatype {
            Datatype::Uint8 => f64::from(c[0]),
            Datatype::Int16 => f64::from(B::read_i16(c)),
            Datatype::Float32 => f64::from(B::read_f32(c)),
            Datatype::Float64 => B::read_f64(c),
        })
        .collect()
}

/// Decode a complete `.nii` byte image into a [`Volume`].
pub fn read_nifti(bytes: &[u8]) -> Result<Volume, NiftiError> {
    let header = parse_header(bytes)?;
    let offset = header.vox_offset as usize;
    let expected = header.data_len();
    let got = bytes.len().saturating_sub(offset);
    if got != expected {
        return Err(NiftiError::DimensionMismatch { expected, got });
    }
    let raw = &bytes[offset..];
    let mut values = match header.endianness {
        Endianness::Little => decode_values::<LittleEndian>(raw, header.datatype),
        Endianness::Big => decode_values::<BigEndian>(raw, header.datatype),
    };
    // slope 0 means "unscaled"
    if header.scl_slope != 0.0 {
        let slope = f64::from(header.scl_slope);
        let inter = f64::from(header.scl_inter);
        if slope != 1.0 || inter != 0.0 {
            for v in &mut values {
                *v = *v * slope + inter;
            }
        }
    }
    let (affine, source) = header_affine(&header);
    let mut volume = Volume::new(header.extents(), values, affine)?;
    volume.set_affine_source(source);
    Ok(volume)
}

fn check_representable(v: &Volume, datatype: Datatype) -> Result<(), NiftiError> {
    let (lo, hi, integral) = match datatype {
        Datatype::Uint8 => (0.0, 255.0, true),
        Datatype::Int16 => (f64::from(i16::MIN), f64::from(i16::MAX), true),
        Datatype::Float32 => (f64::from(f32::MIN), f64::from(f32::MAX), false),
        Datatype::Float64 => (f64::MIN, f64::MAX, false),
    };
    for (index, &value) in v.data().iter().enumerate() {
        let ok = if integral {
            value.fract() == 0.0 && value >= lo && value <= hi
        } else {
            value.is_nan() || value.is_infinite() || (value >= lo && value <= hi)
        };
        if !ok {
            return Err(NiftiError::ValueOutOfRange {
                index,
                value,
                datatype,
            });
        }
    }
    Ok(())
}

fn encode<B: ByteOrder>(v: &Volume, datatype: Datatype) -> Vec<u8> {
    let n = v.len();
    let mut out = vec![0u8; DEFAULT_VOX_OFFSET + n * datatype.byte_width()];
    let h = &mut out[..HEADER_SIZE];
    B::write_i32(&mut h[0..], HEADER_SIZE as i32);
    let ext = v.extents();
    let dim = [
        3i16,
        ext[0] as i16,
        ext[1] as i16,
        ext[2] as i16,
        1,
        1,
        1,
        1,
    ];
    for (i, d) in dim.iter().enumerate() {
        B::write_i16(&mut h[40 + 2 * i..], *d);
    }
    B::write_i16(&mut h[70..], datatype.code());
    B::write_i16(&mut h[72..], (datatype.byte_width() * 8) as i16);
    let spacing = v.spacing();
    let pixdim = [1.0, spacing[0], spacing[1], spacing[2], 0.0, 0.0, 0.0, 0.0];
    for (i, p) in pixdim.iter().enumerate() {
        B::write_f32(&mut h[76 + 4 * i..], *p as f32);
    }
    B::write_f32(&mut h[108..], DEFAULT_VOX_OFFSET as f32);
    B::write_f32(&mut h[112..], 1.0);
    B::write_f32(&mut h[116..], 0.0);
    // xyzt_units: millimetres
    h[123] = 2;
    B::write_i16(&mut h[252..], 0);
    B::write_i16(&mut h[254..], 1);
    let a = v.affine();
    for (r, off) in [280usize, 296, 312].into_iter().enumerate() {
        for c in 0..4 {
            B::write_f32(&mut h[off + 4 * c..], a[r][c] as f32);
        }
    }
    h[344..348].copy_from_slice(MAGIC_SINGLE_FILE);

    let body = &mut out[DEFAULT_VOX_OFFSET..];
    let w = datatype.byte_width();
    for (chunk, &x) in body.chunks_exact_mut(w).zip(v.data()) {
        match datatype {
            Datatype::Uint8 => chunk[0] = x as u8,
            Datatype::Int16 => B::write_i16(chunk, x as i16),
            Datatype::Float32 => B::write_f32(chunk, x as f32),
            Datatype::Float64 => B::write_f64(chunk, x),
        }
    }
    out
}

/// Serialise `v` as a little-endian single-file NIfTI-1 image.
pub fn write_nifti(v: &Volume, datatype: Datatype) -> Result<Vec<u8>, NiftiError> {
    write_nifti_with_order(v, datatype, Endianness::Little)
}

/// As [`write_nifti`] with an explicit byte order. Big-endian output exists
/// for interoperability fixtures.
pub fn write_nifti_with_order(
    v: &Volume,
    datatype: Datatype,
    order: Endianness,
) -> Result<Vec<u8>, NiftiError> {
    check_representable(v, datatype)?;
    Ok(match order {
        Endianness::Little => encode::<LittleEndian>(v, datatype),
        Endianness::Big => encode::<BigEndian>(v, datatype),
    })
}
