//! Binary container for a registration result.
//!
//! All fields little-endian:
//!
//! | offset | size | field |
//! |-------:|-----:|-------|
//! | 0 | 4 | magic `LGFT` |
//! | 4 | 4 | version (`u32`, currently 1) |
//! | 8 | 128 | affine, 16 × `f64`, row-major |
//! | 136 | 4 | flags (`u32`): bit 0 forward field present, bit 1 backward field present |
//! | 140 | … | one field block per set flag, forward first |
//!
//! A field block is:
//!
//! | size | field |
//! |-----:|-------|
//! | 12 | reference dims, 3 × `u32` |
//! | 24 | reference spacing (mm), 3 × `f64` |
//! | 24 | reference origin (mm), 3 × `f64` |
//! | 72 | reference direction, 9 × `f64`, row-major |
//! | 24 | control point spacing (reference voxels), 3 × `f64` |
//! | 12 | lattice dims, 3 × `u32` |
//! | 8 | value count `n` (`u64`) = 3 × lattice size |
//! | 8n | displacements (mm), `f64`, node-major x-fastest, xyz interleaved |

use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::{Matrix3, Matrix4, Vector3};

use super::{AffineTransform, BSplineTransform};
use crate::error::{Error, Result};
use crate::volume::Geometry;

pub const MAGIC: &[u8; 4] = b"LGFT";
pub const VERSION: u32 = 1;

const FLAG_FWD: u32 = 1;
const FLAG_BWD: u32 = 2;

/// Affine plus optional forward/backward B-spline fields.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformBundle {
    pub affine: AffineTransform,
    pub fwd: Option<BSplineTransform>,
    pub bwd: Option<BSplineTransform>,
}

impl TransformBundle {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.write_u32::<LittleEndian>(VERSION).unwrap();
        let m = self.affine.matrix();
        for r in 0..4 {
            for c in 0..4 {
                out.write_f64::<LittleEndian>(m[(r, c)]).unwrap();
            }
        }
        let flags = if self.fwd.is_some() { FLAG_FWD } else { 0 } | if self.bwd.is_some() { FLAG_BWD } else { 0 };
        out.write_u32::<LittleEndian>(flags).unwrap();
        for t in self.fwd.iter().chain(self.bwd.iter()) {
            write_field(&mut out, t);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor::new(bytes);
        let mut magic = [0u8; 4];
        read_exact(&mut cur, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format(format!("transform magic {magic:?} is not LGFT")));
        }
        let version = cur.read_u32::<LittleEndian>().map_err(eof)?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported transform container version {version}")));
        }
        let mut m = Matrix4::zeros();
        for r in 0..4 {
            for c in 0..4 {
                m[(r, c)] = cur.read_f64::<LittleEndian>().map_err(eof)?;
            }
        }
        let affine = AffineTransform::new(m)?;
        let flags = cur.read_u32::<LittleEndian>().map_err(eof)?;
        let fwd = if flags & FLAG_FWD != 0 { Some(read_field(&mut cur)?) } else { None };
        let bwd = if flags & FLAG_BWD != 0 { Some(read_field(&mut cur)?) } else { None };
        Ok(Self { affine, fwd, bwd })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn eof(_: std::io::Error) -> Error {
    Error::Format("transform container ends early".into())
}

fn read_exact(cur: &mut Cursor<&[u8]>, buf: &mut [u8]) -> Result<()> {
    cur.read_exact(buf).map_err(eof)
}

fn write_field(out: &mut Vec<u8>, t: &BSplineTransform) {
    let g = t.geometry();
    for d in g.dims() {
        out.write_u32::<LittleEndian>(d as u32).unwrap();
    }
    for s in g.spacing() {
        out.write_f64::<LittleEndian>(s).unwrap();
    }
    for o in g.origin().iter() {
        out.write_f64::<LittleEndian>(*o).unwrap();
    }
    let dir = g.direction();
    for r in 0..3 {
        for c in 0..3 {
            out.write_f64::<LittleEndian>(dir[(r, c)]).unwrap();
        }
    }
    for s in t.grid_spacing() {
        out.write_f64::<LittleEndian>(s).unwrap();
    }
    for d in t.grid_dims() {
        out.write_u32::<LittleEndian>(d as u32).unwrap();
    }
    out.write_u64::<LittleEndian>(3 * t.node_count() as u64).unwrap();
    for c in t.coefficients() {
        for v in c {
            out.write_f64::<LittleEndian>(*v).unwrap();
        }
    }
}

fn read_field(cur: &mut Cursor<&[u8]>) -> Result<BSplineTransform> {
    let mut u32x3 = || -> Result<[usize; 3]> {
        let mut v = [0usize; 3];
        for x in &mut v {
            *x = cur.read_u32::<LittleEndian>().map_err(eof)? as usize;
        }
        Ok(v)
    };
    let dims = u32x3()?;
    let mut f64s = |n: usize| -> Result<Vec<f64>> {
        (0..n).map(|_| cur.read_f64::<LittleEndian>().map_err(eof)).collect()
    };
    let spacing = f64s(3)?;
    let origin = f64s(3)?;
    let dir = f64s(9)?;
    let grid_spacing = f64s(3)?;
    let geometry = Geometry::new(
        dims,
        [spacing[0], spacing[1], spacing[2]],
        Vector3::new(origin[0], origin[1], origin[2]),
        Matrix3::from_row_slice(&dir),
    )
    .map_err(|e| Error::Format(format!("field geometry: {e}")))?;
    let grid_spacing = [grid_spacing[0], grid_spacing[1], grid_spacing[2]];
    let mut grid_dims = [0usize; 3];
    for d in &mut grid_dims {
        *d = cur.read_u32::<LittleEndian>().map_err(eof)? as usize;
    }
    let count = cur.read_u64::<LittleEndian>().map_err(eof)? as usize;
    let empty = BSplineTransform::new(geometry, grid_spacing).map_err(|e| Error::Format(e.to_string()))?;
    if empty.grid_dims() != grid_dims || count != 3 * empty.node_count() {
        return Err(Error::Format(format!(
            "lattice {grid_dims:?} with {count} values does not match geometry (expected {:?})",
            empty.grid_dims()
        )));
    }
    let remaining = cur.get_ref().len() - cur.position() as usize;
    if remaining < count * 8 {
        return Err(Error::Truncated {
            expected: count * 8,
            actual: remaining,
        });
    }
    let mut coeffs = Vec::with_capacity(count / 3);
    for _ in 0..count / 3 {
        let v = [
            cur.read_f64::<LittleEndian>().map_err(eof)?,
            cur.read_f64::<LittleEndian>().map_err(eof)?,
            cur.read_f64::<LittleEndian>().map_err(eof)?,
        ];
        coeffs.push(v);
    }
    empty.with_same_lattice(coeffs).map_err(|e| Error::Format(e.to_string()))
}
