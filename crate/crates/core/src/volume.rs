//! The scalar 3D grid that flows through the pipeline.

use thiserror::Error;

use crate::geometry::{orientation_of, GeometryError, OrientationCode};

/// Row-major 4x4 voxel-index to world-millimetre transform.
pub type Affine = [[f64; 4]; 4];

pub const IDENTITY_AFFINE: Affine = [
    [1.0, 0.0, 0.0, 0.0],
    [0.0, 1.0, 0.0, 0.0],
    [0.0, 0.0, 1.0, 0.0],
    [0.0, 0.0, 0.0, 1.0],
];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VolumeError {
    #[error("extents must be positive, got {0:?}")]
    ZeroExtent([usize; 3]),
    #[error("data length {got} does not match extents product {expected}")]
    DataLength { expected: usize, got: usize },
    #[error("affine bottom row must be (0, 0, 0, 1)")]
    AffineBottomRow,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Where a volume's affine came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AffineSource {
    /// Explicit sform rows (or constructed in memory).
    #[default]
    Sform,
    /// No sform in the file; diagonal affine built from voxel spacing.
    PixdimFallback,
}

/// A 3D scalar grid with its voxel-to-world geometry.
///
/// Data is stored with axis 0 varying fastest, matching the NIfTI on-disk
/// layout: voxel `(i, j, k)` lives at `i + nx * (j + ny * k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    extents: [usize; 3],
    data: Vec<f64>,
    affine: Affine,
    orientation: OrientationCode,
    affine_source: AffineSource,
}

impl Volume {
    pub fn new(extents: [usize; 3], data: Vec<f64>, affine: Affine) -> Result<Self, VolumeError> {
        if extents.contains(&0) {
            return Err(VolumeError::ZeroExtent(extents));
        }
        let expected = extents.iter().product();
        if data.len() != expected {
            return Err(VolumeError::DataLength {
                expected,
                got: data.len(),
            });
        }
        if affine[3] != [0.0, 0.0, 0.0, 1.0] {
            return Err(VolumeError::AffineBottomRow);
        }
        let orientation = orientation_of(&affine)?;
        Ok(Self {
            extents,
            data,
            affine,
            orientation,
            affine_source: AffineSource::Sform,
        })
    }

    /// A volume with identity geometry ("RAS", 1 mm voxels at the origin).
    pub fn from_data(extents: [usize; 3], data: Vec<f64>) -> Result<Self, VolumeError> {
        Self::new(extents, data, IDENTITY_AFFINE)
    }

    pub fn zeros(extents: [usize; 3]) -> Self {
        Self::from_data(extents, vec![0.0; extents.iter().product()])
            .expect("positive extents required")
    }

    pub(crate) fn with_orientation(
        extents: [usize; 3],
        data: Vec<f64>,
        affine: Affine,
        orientation: OrientationCode,
        affine_source: AffineSource,
    ) -> Self {
        debug_assert_eq!(data.len(), extents.iter().product::<usize>());
        Self {
            extents,
            data,
            affine,
            orientation,
            affine_source,
        }
    }

    pub(crate) fn set_affine_source(&mut self, source: AffineSource) {
        self.affine_source = source;
    }

    pub fn extents(&self) -> [usize; 3] {
        self.extents
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn affine(&self) -> &Affine {
        &self.affine
    }

    pub fn orientation(&self) -> OrientationCode {
        self.orientation
    }

    pub fn affine_source(&self) -> AffineSource {
        self.affine_source
    }

    /// Voxel spacing: the column norms of the affine's 3x3 block.
    pub fn spacing(&self) -> [f64; 3] {
        let mut s = [0.0; 3];
        for (c, out) in s.iter_mut().enumerate() {
            *out = (0..3)
                .map(|r| self.affine[r][c] * self.affine[r][c])
                .sum::<f64>()
                .sqrt();
        }
        s
    }

    pub fn index(&self, ijk: [usize; 3]) -> usize {
        ijk[0] + self.extents[0] * (ijk[1] + self.extents[1] * ijk[2])
    }

    pub fn get(&self, ijk: [usize; 3]) -> f64 {
        self.data[self.index(ijk)]
    }

    /// World coordinate (mm) of a voxel centre.
    pub fn world_of(&self, ijk: [usize; 3]) -> [f64; 3] {
        let mut w = [0.0; 3];
        for (r, out) in w.iter_mut().enumerate() {
            *out = self.affine[r][3]
                + self.affine[r][0] * ijk[0] as f64
                + self.affine[r][1] * ijk[1] as f64
                + self.affine[r][2] * ijk[2] as f64;
        }
        w
    }

    /// Same geometry, new voxel values.
    pub fn map_data(&self, f: impl Fn(f64) -> f64) -> Volume {
        Volume {
            data: self.data.iter().map(|&x| f(x)).collect(),
            ..self.clone()
        }
    }

    /// Same geometry with replacement data of identical length.
    pub fn with_data(&self, data: Vec<f64>) -> Result<Volume, VolumeError> {
        if data.len() != self.data.len() {
            return Err(VolumeError::DataLength {
                expected: self.data.len(),
                got: data.len(),
            });
        }
        Ok(Volume {
            data,
            ..self.clone()
        })
    }

    /// True when every voxel is exactly 0 or 1.
    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&x| x == 0.0 || x == 1.0)
    }
}
