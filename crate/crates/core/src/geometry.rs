//! Orientation codes and axis-aligned reorientation.
//!
//! World space follows the NIfTI convention (RAS+): increasing x points
//! Right, y Anterior, z Superior. An orientation code names, for each data
//! axis, the anatomical direction its index increases toward.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::volume::{Affine, Volume};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("affine rotation/scale block is singular")]
    SingularAffine,
    #[error("two data axes map to the same anatomical axis")]
    DegenerateOrientation,
    #[error("invalid orientation code {0:?}")]
    InvalidCode(String),
}

/// Anatomical direction of a data axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Direction {
    Right,
    Left,
    Anterior,
    Posterior,
    Superior,
    Inferior,
}

impl Direction {
    /// World axis (0 = x, 1 = y, 2 = z) this direction lies on.
    pub fn world_axis(self) -> usize {
        match self {
            Direction::Right | Direction::Left => 0,
            Direction::Anterior | Direction::Posterior => 1,
            Direction::Superior | Direction::Inferior => 2,
        }
    }

    /// True when the direction points along +world axis.
    pub fn is_positive(self) -> bool {
        matches!(
            self,
            Direction::Right | Direction::Anterior | Direction::Superior
        )
    }

    fn from_axis(axis: usize, positive: bool) -> Self {
        match (axis, positive) {
            (0, true) => Direction::Right,
            (0, false) => Direction::Left,
            (1, true) => Direction::Anterior,
            (1, false) => Direction::Posterior,
            (2, true) => Direction::Superior,
            _ => Direction::Inferior,
        }
    }

    pub fn letter(self) -> char {
        match self {
            Direction::Right => 'R',
            Direction::Left => 'L',
            Direction::Anterior => 'A',
            Direction::Posterior => 'P',
            Direction::Superior => 'S',
            Direction::Inferior => 'I',
        }
    }

    fn from_letter(c: char) -> Option<Self> {
        Some(match c.to_ascii_uppercase() {
            'R' => Direction::Right,
            'L' => Direction::Left,
            'A' => Direction::Anterior,
            'P' => Direction::Posterior,
            'S' => Direction::Superior,
            'I' => Direction::Inferior,
            _ => return None,
        })
    }
}

/// Three directions, one per data axis, covering each anatomical axis once.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct OrientationCode([Direction; 3]);

impl OrientationCode {
    pub const RAS: OrientationCode =
        OrientationCode([Direction::Right, Direction::Anterior, Direction::Superior]);

    pub fn new(dirs: [Direction; 3]) -> Result<Self, GeometryError> {
        let mut seen = [false; 3];
        for d in dirs {
            let a = d.world_axis();
            if seen[a] {
                return Err(GeometryError::DegenerateOrientation);
            }
            seen[a] = true;
        }
        Ok(Self(dirs))
    }

    pub fn directions(&self) -> [Direction; 3] {
        self.0
    }

    /// All 48 valid codes (6 axis permutations x 8 sign patterns).
    pub fn all() -> Vec<OrientationCode> {
        const PERMS: [[usize; 3]; 6] = [
            [0, 1, 2],
            [0, 2, 1],
            [1, 0, 2],
            [1, 2, 0],
            [2, 0, 1],
            [2, 1, 0],
        ];
        let mut out = Vec::with_capacity(48);
        for p in PERMS {
            for signs in 0..8u8 {
                out.push(OrientationCode([
                    Direction::from_axis(p[0], signs & 1 == 0),
                    Direction::from_axis(p[1], signs & 2 == 0),
                    Direction::from_axis(p[2], signs & 4 == 0),
                ]));
            }
        }
        out
    }
}

impl fmt::Display for OrientationCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for d in self.0 {
            write!(f, "{}", d.letter())?;
        }
        Ok(())
    }
}

impl FromStr for OrientationCode {
    type Err = GeometryError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let letters: Vec<char> = s.chars().collect();
        if letters.len() != 3 {
            return Err(GeometryError::InvalidCode(s.to_string()));
        }
        let mut dirs = [Direction::Right; 3];
        for (slot, c) in dirs.iter_mut().zip(letters) {
            *slot = Direction::from_letter(c)
                .ok_or_else(|| GeometryError::InvalidCode(s.to_string()))?;
        }
        OrientationCode::new(dirs).map_err(|_| GeometryError::InvalidCode(s.to_string()))
    }
}

/// Maps source data axes onto destination data axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AxisTransform {
    /// Source axis feeding each destination axis.
    pub permutation: [usize; 3],
    /// Whether each destination axis runs opposite to its source axis.
    pub flips: [bool; 3],
}

impl AxisTransform {
    pub fn between(from: OrientationCode, to: OrientationCode) -> Self {
        let mut permutation = [0; 3];
        let mut flips = [false; 3];
        for (dst, target) in to.0.iter().enumerate() {
            let src = from
                .0
                .iter()
                .position(|d| d.world_axis() == target.world_axis())
                .expect("orientation codes cover every world axis");
            permutation[dst] = src;
            flips[dst] = from.0[src] != *target;
        }
        Self { permutation, flips }
    }

    pub fn is_identity(&self) -> bool {
        self.permutation == [0, 1, 2] && self.flips == [false; 3]
    }
}

fn det3(m: &[[f64; 3]; 3]) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

/// Orientation code implied by the columns of a voxel-to-world affine.
///
/// Each column picks its dominant world axis (largest magnitude, lowest
/// index on ties) and the sign of that entry.
pub fn orientation_of(affine: &Affine) -> Result<OrientationCode, GeometryError> {
    let mut block = [[0.0; 3]; 3];
    for (r, row) in block.iter_mut().enumerate() {
        row.copy_from_slice(&affine[r][..3]);
    }
    let det = det3(&block);
    if det == 0.0 || !det.is_finite() {
        return Err(GeometryError::SingularAffine);
    }
    let mut dirs = [Direction::Right; 3];
    for (col, dir) in dirs.iter_mut().enumerate() {
        let mut best = 0;
        for row in 1..3 {
            if block[row][col].abs() > block[best][col].abs() {
                best = row;
            }
        }
        *dir = Direction::from_axis(best, block[best][col] > 0.0);
    }
    OrientationCode::new(dirs)
}

/// Permute and flip the data axes of `v` so that its orientation becomes
/// `target`, updating the affine so every voxel keeps its world position.
pub fn reorient(v: &Volume, target: OrientationCode) -> Volume {
    let t = AxisTransform::between(v.orientation(), target);
    if t.is_identity() {
        return v.clone();
    }
    let src_ext = v.extents();
    let mut dst_ext = [0; 3];
    for d in 0..3 {
        dst_ext[d] = src_ext[t.permutation[d]];
    }

    // Source index components for destination index (i0, i1, i2).
    let src_strides = [1, src_ext[0], src_ext[0] * src_ext[1]];
    let mut data = Vec::with_capacity(v.data().len());
    let src = v.data();
    for i2 in 0..dst_ext[2] {
        for i1 in 0..dst_ext[1] {
            for i0 in 0..dst_ext[0] {
                let idx = [i0, i1, i2];
                let mut offset = 0;
                for d in 0..3 {
                    let s = t.permutation[d];
                    let comp = if t.flips[d] {
                        dst_ext[d] - 1 - idx[d]
                    } else {
                        idx[d]
                    };
                    offset += comp * src_strides[s];
                }
                data.push(src[offset]);
            }
        }
    }

    let old = v.affine();
    let mut affine = [[0.0; 4]; 4];
    affine[3] = [0.0, 0.0, 0.0, 1.0];
    for r in 0..3 {
        affine[r][3] = old[r][3];
    }
    for d in 0..3 {
        let s = t.permutation[d];
        let sign = if t.flips[d] { -1.0 } else { 1.0 };
        for r in 0..3 {
            affine[r][d] = sign * old[r][s];
            if t.flips[d] {
                affine[r][3] += old[r][s] * (dst_ext[d] - 1) as f64;
            }
        }
    }

    Volume::with_orientation(dst_ext, data, affine, target, v.affine_source())
}
