//! Class-balanced training patches, inference tiling and stitching.

use std::cmp::Ordering;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::RngStream;
use crate::volume::{Affine, Volume, VolumeError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PatchError {
    #[error("invalid patch spec: {0}")]
    InvalidSpec(String),
    #[error("image extents {image:?} differ from label extents {label:?}")]
    ShapeMismatch {
        image: [usize; 3],
        label: [usize; 3],
    },
    #[error("label volume is not binary")]
    NonBinaryLabel,
    #[error("overlap {overlap:?} must be below the patch size {patch:?} on every axis")]
    InvalidOverlap {
        overlap: [usize; 3],
        patch: [usize; 3],
    },
    #[error("tile predictions do not match the layout: {0}")]
    LayoutMismatch(String),
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PatchSpec {
    pub size: [usize; 3],
    pub fg_fraction: f64,
    pub pad_value_image: f64,
    pub pad_value_label: f64,
}

impl Default for PatchSpec {
    fn default() -> Self {
        Self {
            size: [32, 32, 32],
            fg_fraction: 0.5,
            pad_value_image: 0.0,
            pad_value_label: 0.0,
        }
    }
}

impl PatchSpec {
    pub fn validate(&self) -> Result<(), PatchError> {
        if self.size.contains(&0) {
            return Err(PatchError::InvalidSpec(format!(
                "size {:?} has a zero axis",
                self.size
            )));
        }
        if !(0.0..=1.0).contains(&self.fg_fraction) {
            return Err(PatchError::InvalidSpec(format!(
                "fg_fraction {} outside [0, 1]",
                self.fg_fraction
            )));
        }
        if !self.pad_value_image.is_finite() {
            return Err(PatchError::InvalidSpec(
                "pad_value_image must be finite".into(),
            ));
        }
        if self.pad_value_label != 0.0 {
            return Err(PatchError::InvalidSpec("pad_value_label must be 0".into()));
        }
        Ok(())
    }
}

/// Where a patch window sits relative to its source volume, per axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Placement {
    /// First source voxel copied.
    origin: [usize; 3],
    /// Padding voxels before the copied region.
    pad_before: [usize; 3],
}

impl Placement {
    fn centered(center: [usize; 3], extents: [usize; 3], size: [usize; 3]) -> Self {
        let mut origin = [0; 3];
        let mut pad_before = [0; 3];
        for a in 0..3 {
            if extents[a] >= size[a] {
                origin[a] = center[a]
                    .saturating_sub(size[a] / 2)
                    .min(extents[a] - size[a]);
            } else {
                pad_before[a] = (size[a] - extents[a]) / 2;
            }
        }
        Self { origin, pad_before }
    }

    /// Source voxel for patch voxel `t` along `axis`, if inside the volume.
    fn source(&self, axis: usize, t: usize, extent: usize) -> Option<usize> {
        let s = (self.origin[axis] + t).checked_sub(self.pad_before[axis])?;
        (s < extent).then_some(s)
    }
}

/// Copy a `size` window out of `data`, filling out-of-volume voxels with
/// `pad`.
fn extract(
    data: &[f64],
    extents: [usize; 3],
    p: &Placement,
    size: [usize; 3],
    pad: f64,
) -> Vec<f64> {
    let mut out = vec![pad; size.iter().product()];
    let [nx, ny, _] = extents;
    for k in 0..size[2] {
        let Some(sk) = p.source(2, k, extents[2]) else {
            continue;
        };
        for j in 0..size[1] {
            let Some(sj) = p.source(1, j, extents[1]) else {
                continue;
            };
            let row = (k * size[1] + j) * size[0];
            let src = (sk * ny + sj) * nx;
            for i in 0..size[0] {
                if let Some(si) = p.source(0, i, nx) {
                    out[row + i] = data[src + si];
                }
            }
        }
    }
    out
}

/// The source affine moved so that patch voxel (0, 0, 0) maps to the world
/// position of its source location.
fn shifted_affine(affine: &Affine, p: &Placement) -> Affine {
    let shift: [f64; 3] = std::array::from_fn(|a| p.origin[a] as f64 - p.pad_before[a] as f64);
    let mut out = *affine;
    for (r, row) in out.iter_mut().take(3).enumerate() {
        row[3] = affine[r][3] + (0..3).map(|c| affine[r][c] * shift[c]).sum::<f64>();
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPatch {
    pub image: Volume,
    pub label: Volume,
    /// Sampled center voxel in source coordinates.
    pub center: [usize; 3],
    /// Whether the center was drawn from the foreground.
    pub foreground_centered: bool,
}

impl TrainingPatch {
    pub fn contains_foreground(&self) -> bool {
        self.label.data().iter().any(|&v| v > 0.0)
    }
}

fn check_binary(label: &Volume) -> Result<(), PatchError> {
    if label.is_binary() {
        Ok(())
    } else {
        Err(PatchError::NonBinaryLabel)
    }
}

/// Foreground voxel indices of a binary label, in storage order.
pub fn foreground_indices(label: &Volume) -> Vec<usize> {
    label
        .data()
        .iter()
        .enumerate()
        .filter(|(_, &v)| v > 0.0)
        .map(|(i, _)| i)
        .collect()
}

/// Sampler over one image/label pair with a cached foreground list.
#[derive(Debug, Clone)]
pub struct PatchSampler<'a> {
    image: &'a Volume,
    label: &'a Volume,
    spec: PatchSpec,
    foreground: Vec<usize>,
}

impl<'a> PatchSampler<'a> {
    pub fn new(image: &'a Volume, label: &'a Volume, spec: &PatchSpec) -> Result<Self, PatchError> {
        spec.validate()?;
        if image.extents() != label.extents() {
            return Err(PatchError::ShapeMismatch {
                image: image.extents(),
                label: label.extents(),
            });
        }
        check_binary(label)?;
        Ok(Self {
            image,
            label,
            spec: spec.clone(),
            foreground: foreground_indices(label),
        })
    }

    /// Draw one center; returns it with whether it came from the foreground.
    fn draw_center(&self, rng: &mut RngStream) -> ([usize; 3], bool) {
        let [nx, ny, _] = self.image.extents();
        let fg = rng.bernoulli(self.spec.fg_fraction) && !self.foreground.is_empty();
        let flat = if fg {
            self.foreground[rng.below(self.foreground.len() as u64) as usize]
        } else {
            rng.below(self.image.len() as u64) as usize
        };
        ([flat % nx, (flat / nx) % ny, flat / (nx * ny)], fg)
    }

    pub fn sample(&self, rng: &mut RngStream) -> Result<TrainingPatch, PatchError> {
        let (center, fg) = self.draw_center(rng);
        self.patch_at(center, fg)
    }

    fn patch_at(&self, center: [usize; 3], fg: bool) -> Result<TrainingPatch, PatchError> {
        let ext = self.image.extents();
        let size = self.spec.size;
        let p = Placement::centered(center, ext, size);
        let img = extract(self.image.data(), ext, &p, size, self.spec.pad_value_image);
        let lab = extract(self.label.data(), ext, &p, size, self.spec.pad_value_label);
        Ok(TrainingPatch {
            image: Volume::new(size, img, shifted_affine(self.image.affine(), &p))?,
            label: Volume::new(size, lab, shifted_affine(self.label.affine(), &p))?,
            center,
            foreground_centered: fg,
        })
    }
}

/// Draw `n` patches; with probability `fg_fraction` each is centered on a
/// uniformly chosen foreground voxel, otherwise on any voxel.
pub fn sample_training_patches(
    image: &Volume,
    label: &Volume,
    spec: &PatchSpec,
    n: usize,
    rng: &mut RngStream,
) -> Result<Vec<TrainingPatch>, PatchError> {
    let sampler = PatchSampler::new(image, label, spec)?;
    (0..n).map(|_| sampler.sample(rng)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Window {
    Uniform,
    #[default]
    Hann,
}

impl std::str::FromStr for Window {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "uniform" => Ok(Window::Uniform),
            "hann" => Ok(Window::Hann),
            other => Err(format!(
                "unknown window '{other}' (expected uniform or hann)"
            )),
        }
    }
}

/// Minimum Hann weight, so tile borders still contribute.
pub const HANN_FLOOR: f64 = 1e-3;

impl Window {
    /// Per-axis weights over a patch of length `n`.
    pub fn profile(self, n: usize) -> Vec<f64> {
        match self {
            Window::Uniform => vec![1.0; n],
            Window::Hann => (0..n)
                .map(|i| {
                    let s = (PI * (i as f64 + 0.5) / n as f64).sin();
                    (s * s).max(HANN_FLOOR)
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TileLayout {
    pub origins: Vec<[usize; 3]>,
    pub patch_size: [usize; 3],
    pub volume_extents: [usize; 3],
    pub window: Window,
}

fn axis_origins(extent: usize, patch: usize, stride: usize) -> Vec<usize> {
    if extent <= patch {
        return vec![0];
    }
    let mut out = Vec::new();
    let mut x = 0;
    loop {
        if x + patch >= extent {
            out.push(extent - patch);
            return out;
        }
        out.push(x);
        x += stride;
    }
}

/// Regular tiling with stride `patch - overlap`; the last tile on each axis
/// is pulled back to end at the volume border. Axes shorter than the patch
/// get a single tile at 0 that the caller pads. Uses the Hann window.
pub fn grid_tiles(
    extents: [usize; 3],
    patch_size: [usize; 3],
    overlap: [usize; 3],
) -> Result<TileLayout, PatchError> {
    if (0..3).any(|a| overlap[a] >= patch_size[a]) {
        return Err(PatchError::InvalidOverlap {
            overlap,
            patch: patch_size,
        });
    }
    if extents.contains(&0) {
        return Err(PatchError::Volume(VolumeError::ZeroExtent(extents)));
    }
    let per_axis: Vec<Vec<usize>> = (0..3)
        .map(|a| axis_origins(extents[a], patch_size[a], patch_size[a] - overlap[a]))
        .collect();
    let mut origins = Vec::with_capacity(per_axis.iter().map(Vec::len).product());
    for &k in &per_axis[2] {
        for &j in &per_axis[1] {
            for &i in &per_axis[0] {
                origins.push([i, j, k]);
            }
        }
    }
    Ok(TileLayout {
        origins,
        patch_size,
        volume_extents: extents,
        window: Window::default(),
    })
}

/// Default inference overlap: half the patch on every axis.
pub fn default_overlap(patch_size: [usize; 3]) -> [usize; 3] {
    patch_size.map(|p| p / 2)
}

impl TileLayout {
    pub fn with_window(mut self, window: Window) -> Self {
        self.window = window;
        self
    }

    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }

    fn placement(&self, tile: usize) -> Placement {
        let mut pad_before = [0; 3];
        for (a, pad) in pad_before.iter_mut().enumerate() {
            if self.volume_extents[a] < self.patch_size[a] {
                *pad = (self.patch_size[a] - self.volume_extents[a]) / 2;
            }
        }
        Placement {
            origin: self.origins[tile],
            pad_before,
        }
    }

    /// Contents of tile `tile`, padded with `pad` where it leaves the volume.
    pub fn extract(&self, data: &[f64], tile: usize, pad: f64) -> Vec<f64> {
        extract(
            data,
            self.volume_extents,
            &self.placement(tile),
            self.patch_size,
            pad,
        )
    }

    /// Every voxel covered at least once and every tile inside the volume
    /// (axes shorter than the patch excepted).
    pub fn is_valid(&self) -> bool {
        let ext = self.volume_extents;
        let inside = self.origins.iter().all(|o| {
            (0..3).all(|a| {
                if ext[a] < self.patch_size[a] {
                    o[a] == 0
                } else {
                    o[a] + self.patch_size[a] <= ext[a]
                }
            })
        });
        inside && self.coverage().iter().all(|&c| c > 0)
    }

    /// Number of tiles covering each voxel.
    pub fn coverage(&self) -> Vec<u32> {
        let ext = self.volume_extents;
        let mut count = vec![0u32; ext.iter().product()];
        for t in 0..self.origins.len() {
            let p = self.placement(t);
            self.for_each_voxel(&p, |_, v| count[v] += 1);
        }
        count
    }

    /// Visit (patch index, volume index) for every in-volume voxel of a tile.
    fn for_each_voxel(&self, p: &Placement, mut visit: impl FnMut(usize, usize)) {
        let ext = self.volume_extents;
        let size = self.patch_size;
        for k in 0..size[2] {
            let Some(sk) = p.source(2, k, ext[2]) else {
                continue;
            };
            for j in 0..size[1] {
                let Some(sj) = p.source(1, j, ext[1]) else {
                    continue;
                };
                for i in 0..size[0] {
                    if let Some(si) = p.source(0, i, ext[0]) {
                        visit(
                            (k * size[1] + j) * size[0] + i,
                            (sk * ext[1] + sj) * ext[0] + si,
                        );
                    }
                }
            }
        }
    }
}

fn lexicographic(a: &[f64], b: &[f64]) -> Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

/// Window-weighted average of overlapping tile predictions.
///
/// Tiles are combined in origin order (ties broken by content), so the
/// result does not depend on the order tiles are listed in. Each voxel keeps
/// a running weighted mean, which reproduces agreeing tiles exactly.
pub fn stitch(layout: &TileLayout, predictions: &[Vec<f64>]) -> Result<Vec<f64>, PatchError> {
    if predictions.len() != layout.origins.len() {
        return Err(PatchError::LayoutMismatch(format!(
            "{} predictions for {} tiles",
            predictions.len(),
            layout.origins.len()
        )));
    }
    if layout.origins.is_empty() {
        return Err(PatchError::LayoutMismatch("layout has no tiles".into()));
    }
    let tile_len: usize = layout.patch_size.iter().product();
    for (t, p) in predictions.iter().enumerate() {
        if p.len() != tile_len {
            return Err(PatchError::LayoutMismatch(format!(
                "tile {t} has {} values, expected {tile_len}",
                p.len()
            )));
        }
        if p.iter().any(|v| !v.is_finite()) {
            return Err(PatchError::LayoutMismatch(format!(
                "tile {t} has non-finite values"
            )));
        }
    }
    let mut order: Vec<usize> = (0..predictions.len()).collect();
    order.sort_by(|&a, &b| {
        let (oa, ob) = (layout.origins[a], layout.origins[b]);
        [oa[2], oa[1], oa[0]]
            .cmp(&[ob[2], ob[1], ob[0]])
            .then_with(|| lexicographic(&predictions[a], &predictions[b]))
    });

    let size = layout.patch_size;
    let prof: Vec<Vec<f64>> = (0..3).map(|a| layout.window.profile(size[a])).collect();
    let weights: Vec<f64> = (0..tile_len)
        .map(|i| {
            let (x, y, z) = (
                i % size[0],
                (i / size[0]) % size[1],
                i / (size[0] * size[1]),
            );
            prof[0][x] * prof[1][y] * prof[2][z]
        })
        .collect();

    let n: usize = layout.volume_extents.iter().product();
    let mut mean = vec![0.0; n];
    let mut total = vec![0.0; n];
    for &t in &order {
        let pred = &predictions[t];
        layout.for_each_voxel(&layout.placement(t), |pi, vi| {
            let w = weights[pi];
            total[vi] += w;
            mean[vi] += (w / total[vi]) * (pred[pi] - mean[vi]);
        });
    }
    if let Some(v) = total.iter().position(|&w| w <= 0.0) {
        return Err(PatchError::LayoutMismatch(format!(
            "voxel {v} is not covered by any tile"
        )));
    }
    Ok(mean)
}
