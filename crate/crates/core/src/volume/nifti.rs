//! NIfTI-1 single-file (`.nii`, optionally gzip-wrapped) reading and
//! uncompressed writing.
//!
//! Only the subset this crate needs: 3D volumes of `uint8`, `int16` or
//! `float32` voxels. Files written here are little-endian with a 348-byte
//! header, a zeroed 4-byte extension flag and voxel data at offset 352.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use byteorder::{BigEndian, ByteOrder, LittleEndian};
use flate2::read::MultiGzDecoder;
use nalgebra::{Matrix3, Vector3};

use super::{Geometry, LabelVolume, Volume, MAX_CLASS};
use crate::error::{Error, Result};

pub const HEADER_SIZE: usize = 348;
pub const VOX_OFFSET: usize = 352;
/// `sizeof_hdr` as seen when a header of the other byte order is read.
pub const SWAPPED_HEADER_SIZE: i32 = 1_543_569_408;
pub const MAGIC_SINGLE_FILE: &[u8; 4] = b"n+1\0";

pub const DT_UINT8: i16 = 2;
pub const DT_INT16: i16 = 4;
pub const DT_FLOAT32: i16 = 16;

// Field offsets within the 348-byte header.
const OFF_DIM: usize = 40;
const OFF_DATATYPE: usize = 70;
const OFF_BITPIX: usize = 72;
const OFF_PIXDIM: usize = 76;
const OFF_VOX_OFFSET: usize = 108;
const OFF_SCL_SLOPE: usize = 112;
const OFF_SCL_INTER: usize = 116;
const OFF_XYZT_UNITS: usize = 123;
const OFF_DESCRIP: usize = 148;
const OFF_QFORM_CODE: usize = 252;
const OFF_SFORM_CODE: usize = 254;
const OFF_SROW: usize = 280;
const OFF_MAGIC: usize = 344;

/// Decoded image: geometry plus voxel values converted to `f32` with the
/// header's intensity scaling applied.
#[derive(Clone, Debug)]
pub struct NiftiImage {
    pub geometry: Geometry,
    pub datatype: i16,
    pub data: Vec<f32>,
}

fn gunzip_if_needed(raw: Vec<u8>) -> Result<Vec<u8>> {
    if raw.len() >= 2 && raw[0] == 0x1f && raw[1] == 0x8b {
        let mut out = Vec::new();
        MultiGzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::Format(format!("gzip stream: {e}")))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

/// Reads and decodes a `.nii` or `.nii.gz` file.
pub fn read_nifti(path: impl AsRef<Path>) -> Result<NiftiImage> {
    let path = path.as_ref();
    let raw = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_nifti(&gunzip_if_needed(raw)?)
}

/// Decodes an in-memory uncompressed NIfTI-1 file.
pub fn parse_nifti(bytes: &[u8]) -> Result<NiftiImage> {
    if bytes.len() < HEADER_SIZE {
        return Err(Error::Truncated {
            expected: HEADER_SIZE,
            actual: bytes.len(),
        });
    }
    match LittleEndian::read_i32(&bytes[0..4]) {
        348 => parse_with::<LittleEndian>(bytes),
        SWAPPED_HEADER_SIZE => parse_with::<BigEndian>(bytes),
        other => Err(Error::Format(format!("sizeof_hdr is {other}, expected 348"))),
    }
}

fn parse_with<B: ByteOrder>(bytes: &[u8]) -> Result<NiftiImage> {
    let magic = &bytes[OFF_MAGIC..OFF_MAGIC + 4];
    if magic != MAGIC_SINGLE_FILE {
        return Err(Error::Format(format!(
            "magic {:?} is not the single-file NIfTI-1 magic \"n+1\"",
            String::from_utf8_lossy(magic)
        )));
    }
    let dim: [i16; 8] = std::array::from_fn(|i| B::read_i16(&bytes[OFF_DIM + 2 * i..]));
    if dim[0] != 3 {
        return Err(Error::UnsupportedDimensionality(dim[0]));
    }
    if dim[1..4].iter().any(|&d| d <= 0) {
        return Err(Error::Format(format!("non-positive dims {:?}", &dim[1..4])));
    }
    let dims = [dim[1] as usize, dim[2] as usize, dim[3] as usize];

    let datatype = B::read_i16(&bytes[OFF_DATATYPE..]);
    let bytes_per_voxel = match datatype {
        DT_UINT8 => 1,
        DT_INT16 => 2,
        DT_FLOAT32 => 4,
        other => return Err(Error::UnsupportedDatatype(other)),
    };

    let pixdim: [f32; 8] = std::array::from_fn(|i| B::read_f32(&bytes[OFF_PIXDIM + 4 * i..]));
    let spacing = [pixdim[1].abs() as f64, pixdim[2].abs() as f64, pixdim[3].abs() as f64];
    if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
        return Err(Error::Format(format!("invalid pixdim {:?}", &pixdim[1..4])));
    }

    let vox_offset = B::read_f32(&bytes[OFF_VOX_OFFSET..]);
    if !(vox_offset >= HEADER_SIZE as f32) || vox_offset.fract() != 0.0 {
        return Err(Error::Format(format!("invalid vox_offset {vox_offset}")));
    }
    let offset = vox_offset as usize;

    let sform_code = B::read_i16(&bytes[OFF_SFORM_CODE..]);
    let geometry = if sform_code > 0 {
        let srow: [[f32; 4]; 3] =
            std::array::from_fn(|r| std::array::from_fn(|c| B::read_f32(&bytes[OFF_SROW + 16 * r + 4 * c..])));
        let m = Matrix3::from_fn(|r, c| srow[r][c] as f64);
        let origin = Vector3::new(srow[0][3] as f64, srow[1][3] as f64, srow[2][3] as f64);
        let mut direction = m;
        for c in 0..3 {
            let norm = m.column(c).norm();
            if norm <= 0.0 {
                return Err(Error::Format("degenerate sform matrix".into()));
            }
            direction.set_column(c, &(m.column(c) / norm));
        }
        Geometry::new(dims, spacing, origin, direction)
            .map_err(|e| Error::Format(format!("sform: {e}")))?
    } else {
        Geometry::with_spacing(dims, spacing)?
    };

    let n = geometry.voxel_count();
    let needed = offset + n * bytes_per_voxel;
    if bytes.len() < needed {
        return Err(Error::Truncated {
            expected: needed,
            actual: bytes.len(),
        });
    }
    let payload = &bytes[offset..needed];
    let mut data: Vec<f32> = match datatype {
        DT_UINT8 => payload.iter().map(|&b| b as f32).collect(),
        DT_INT16 => payload.chunks_exact(2).map(|c| B::read_i16(c) as f32).collect(),
        _ => payload.chunks_exact(4).map(B::read_f32).collect(),
    };

    let slope = B::read_f32(&bytes[OFF_SCL_SLOPE..]);
    let inter = B::read_f32(&bytes[OFF_SCL_INTER..]);
    if slope != 0.0 && slope.is_finite() && inter.is_finite() && !(slope == 1.0 && inter == 0.0) {
        for v in &mut data {
            *v = (*v as f64 * slope as f64 + inter as f64) as f32;
        }
    }
    if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::Format(format!("non-finite voxel value at index {pos}")));
    }

    Ok(NiftiImage {
        geometry,
        datatype,
        data,
    })
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let img = read_nifti(path)?;
    Volume::new(img.geometry, img.data)
}

/// Maps raw label values found in files onto internal class ids.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelRemap {
    table: BTreeMap<i64, u8>,
}

impl Default for LabelRemap {
    /// Values `0..=3` map to themselves.
    fn default() -> Self {
        Self {
            table: (0..=MAX_CLASS).map(|c| (c as i64, c)).collect(),
        }
    }
}

impl LabelRemap {
    pub fn new(pairs: impl IntoIterator<Item = (i64, u8)>) -> Result<Self> {
        let mut table: BTreeMap<i64, u8> = BTreeMap::new();
        table.insert(0, 0);
        for (raw, class) in pairs {
            if class > MAX_CLASS {
                return Err(Error::InvalidInput(format!("class {class} out of range")));
            }
            table.insert(raw, class);
        }
        Ok(Self { table })
    }

    /// MS-CMRSeg encoding: 500 LV blood pool, 200 LV myocardium, 600 RV blood pool.
    pub fn challenge() -> Self {
        Self::new([(500, 1), (200, 2), (600, 3)]).expect("static table")
    }

    /// Parses `raw:class` pairs separated by commas, e.g. `500:1,200:2,600:3`.
    pub fn parse(spec: &str) -> Result<Self> {
        let pairs = spec
            .split(',')
            .filter(|s| !s.trim().is_empty())
            .map(|pair| {
                let (raw, class) = pair
                    .split_once(':')
                    .ok_or_else(|| Error::InvalidInput(format!("bad remap entry {pair:?}")))?;
                let raw: i64 = raw
                    .trim()
                    .parse()
                    .map_err(|_| Error::InvalidInput(format!("bad raw value in {pair:?}")))?;
                let class: u8 = class
                    .trim()
                    .parse()
                    .map_err(|_| Error::InvalidInput(format!("bad class in {pair:?}")))?;
                Ok((raw, class))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(pairs)
    }

    pub fn apply(&self, raw: f32) -> Result<u8> {
        let rounded = raw.round();
        if (raw - rounded).abs() > 1e-3 {
            return Err(Error::InvalidInput(format!("non-integer label value {raw}")));
        }
        self.table
            .get(&(rounded as i64))
            .copied()
            .ok_or_else(|| Error::InvalidInput(format!("label value {raw} has no class mapping")))
    }
}

pub fn read_labels(path: impl AsRef<Path>, remap: &LabelRemap) -> Result<LabelVolume> {
    let img = read_nifti(path)?;
    let data = img.data.iter().map(|&v| remap.apply(v)).collect::<Result<Vec<_>>>()?;
    LabelVolume::new(img.geometry, data)
}

fn encode_header(geometry: &Geometry, datatype: i16, bitpix: i16) -> Vec<u8> {
    type E = LittleEndian;
    let mut h = vec![0u8; VOX_OFFSET];
    E::write_i32(&mut h[0..4], HEADER_SIZE as i32);
    h[38] = b'r'; // "regular"
    let dims = geometry.dims();
    let dim: [i16; 8] = [3, dims[0] as i16, dims[1] as i16, dims[2] as i16, 1, 1, 1, 1];
    for (i, d) in dim.iter().enumerate() {
        E::write_i16(&mut h[OFF_DIM + 2 * i..], *d);
    }
    E::write_i16(&mut h[OFF_DATATYPE..], datatype);
    E::write_i16(&mut h[OFF_BITPIX..], bitpix);
    let spacing = geometry.spacing();
    let pixdim = [1.0f32, spacing[0] as f32, spacing[1] as f32, spacing[2] as f32, 1.0, 1.0, 1.0, 1.0];
    for (i, p) in pixdim.iter().enumerate() {
        E::write_f32(&mut h[OFF_PIXDIM + 4 * i..], *p);
    }
    E::write_f32(&mut h[OFF_VOX_OFFSET..], VOX_OFFSET as f32);
    E::write_f32(&mut h[OFF_SCL_SLOPE..], 0.0);
    E::write_f32(&mut h[OFF_SCL_INTER..], 0.0);
    h[OFF_XYZT_UNITS] = 2; // mm
    let descrip = b"lgefuse";
    h[OFF_DESCRIP..OFF_DESCRIP + descrip.len()].copy_from_slice(descrip);
    E::write_i16(&mut h[OFF_QFORM_CODE..], 0);
    E::write_i16(&mut h[OFF_SFORM_CODE..], 1);
    let m = geometry.scaled_direction();
    let o = geometry.origin();
    for r in 0..3 {
        for c in 0..3 {
            E::write_f32(&mut h[OFF_SROW + 16 * r + 4 * c..], m[(r, c)] as f32);
        }
        E::write_f32(&mut h[OFF_SROW + 16 * r + 12..], o[r] as f32);
    }
    h[OFF_MAGIC..OFF_MAGIC + 4].copy_from_slice(MAGIC_SINGLE_FILE);
    h
}

pub fn encode_volume(vol: &Volume) -> Vec<u8> {
    let mut out = encode_header(vol.geometry(), DT_FLOAT32, 32);
    out.reserve(vol.data().len() * 4);
    let mut buf = [0u8; 4];
    for &v in vol.data() {
        LittleEndian::write_f32(&mut buf, v);
        out.extend_from_slice(&buf);
    }
    out
}

pub fn encode_labels(labels: &LabelVolume) -> Vec<u8> {
    let mut out = encode_header(labels.geometry(), DT_UINT8, 8);
    out.extend_from_slice(labels.data());
    out
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if path.extension().is_some_and(|e| e == "gz") {
        return Err(Error::InvalidInput(format!(
            "{}: compressed output is not supported, write .nii",
            path.display()
        )));
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_volume(vol: &Volume, path: impl AsRef<Path>) -> Result<()> {
    write_bytes(path.as_ref(), &encode_volume(vol))
}

pub fn write_labels(labels: &LabelVolume, path: impl AsRef<Path>) -> Result<()> {
    write_bytes(path.as_ref(), &encode_labels(labels))
}
