//! Seeded synthetic volumes: noisy ellipsoid blobs on a flat background.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::RngStream;
use crate::volume::{Volume, IDENTITY_AFFINE};

pub const MAX_PLACEMENT_ATTEMPTS: usize = 1000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PhantomError {
    #[error("invalid phantom config: {0}")]
    InvalidConfig(String),
    #[error("could not place blob {blob} inside the volume after {attempts} attempts")]
    InfeasiblePlacement { blob: usize, attempts: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomConfig {
    pub extents: [usize; 3],
    pub n_blobs: usize,
    /// Inclusive range each ellipsoid semi-axis is drawn from, in voxels.
    pub radius_range: (f64, f64),
    pub fg_intensity: f64,
    pub bg_intensity: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            extents: [64, 64, 64],
            n_blobs: 5,
            radius_range: (3.0, 8.0),
            fg_intensity: 1.0,
            bg_intensity: 0.0,
            noise_sigma: 1.0,
            seed: 0,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<(), PhantomError> {
        let bad = |m: String| Err(PhantomError::InvalidConfig(m));
        if self.extents.contains(&0) {
            return bad(format!("extents {:?} has a zero axis", self.extents));
        }
        let (lo, hi) = self.radius_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return bad(format!(
                "radius range ({lo}, {hi}) must satisfy 0 < lo <= hi"
            ));
        }
        let largest = *self.extents.iter().max().unwrap() as f64;
        if hi >= largest {
            return bad(format!(
                "radius {hi} does not fit in extents {:?}",
                self.extents
            ));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!(
                "noise_sigma {} must be finite and >= 0",
                self.noise_sigma
            ));
        }
        if !self.fg_intensity.is_finite() || !self.bg_intensity.is_finite() {
            return bad("intensities must be finite".into());
        }
        Ok(())
    }
}

/// An axis-aligned ellipsoid in voxel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Blob {
    pub center: [f64; 3],
    pub radii: [f64; 3],
}

impl Blob {
    pub fn contains(&self, p: [f64; 3]) -> bool {
        (0..3)
            .map(|a| ((p[a] - self.center[a]) / self.radii[a]).powi(2))
            .sum::<f64>()
            <= 1.0
    }

    fn fits(&self, extents: [usize; 3]) -> bool {
        (0..3).all(|a| {
            self.center[a] - self.radii[a] >= 0.0
                && self.center[a] + self.radii[a] <= (extents[a] - 1) as f64
        })
    }
}

/// Draw blob radii and centers by rejection until each lies fully inside.
pub fn place_blobs(cfg: &PhantomConfig) -> Result<Vec<Blob>, PhantomError> {
    cfg.validate()?;
    let mut rng = RngStream::new(cfg.seed).split(1);
    let (lo, hi) = cfg.radius_range;
    (0..cfg.n_blobs)
        .map(|blob| {
            for _ in 0..MAX_PLACEMENT_ATTEMPTS {
                let radii = [0; 3].map(|_| rng.uniform_range(lo, hi));
                let center: [f64; 3] =
                    std::array::from_fn(|a| rng.uniform() * (cfg.extents[a] - 1) as f64);
                let b = Blob { center, radii };
                if b.fits(cfg.extents) {
                    return Ok(b);
                }
            }
            Err(PhantomError::InfeasiblePlacement {
                blob,
                attempts: MAX_PLACEMENT_ATTEMPTS,
            })
        })
        .collect()
}

/// Rasterise the union of `blobs`.
pub fn blob_mask(extents: [usize; 3], blobs: &[Blob]) -> Vec<f64> {
    let [nx, ny, nz] = extents;
    let mut mask = vec![0.0; nx * ny * nz];
    for b in blobs {
        let lo = |a: usize| (b.center[a] - b.radii[a]).floor().max(0.0) as usize;
        let hi = |a: usize| ((b.center[a] + b.radii[a]).ceil() as usize).min(extents[a] - 1);
        for k in lo(2)..=hi(2) {
            for j in lo(1)..=hi(1) {
                for i in lo(0)..=hi(0) {
                    if b.contains([i as f64, j as f64, k as f64]) {
                        mask[i + nx * (j + ny * k)] = 1.0;
                    }
                }
            }
        }
    }
    mask
}

/// Returns `(image, mask)`, both with an identity affine.
pub fn generate(cfg: &PhantomConfig) -> Result<(Volume, Volume), PhantomError> {
    let blobs = place_blobs(cfg)?;
    let mask = blob_mask(cfg.extents, &blobs);
    let mut noise = RngStream::new(cfg.seed).split(2);
    let gap = cfg.fg_intensity - cfg.bg_intensity;
    let image = mask
        .iter()
        .map(|&m| cfg.bg_intensity + gap * m + cfg.noise_sigma * noise.normal())
        .collect();
    let build = |data| Volume::new(cfg.extents, data, IDENTITY_AFFINE).expect("validated extents");
    Ok((build(image), build(mask)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::OrientationCode;

    #[test]
    fn no_blobs_is_pure_noise() {
        let cfg = PhantomConfig {
            n_blobs: 0,
            extents: [8, 8, 8],
            radius_range: (1.0, 2.0),
            ..PhantomConfig::default()
        };
        let (image, mask) = generate(&cfg).unwrap();
        assert!(mask.data().iter().all(|&v| v == 0.0));
        let mean = image.data().iter().sum::<f64>() / 512.0;
        assert!(mean.abs() < 0.1);
        assert_eq!(image.orientation(), OrientationCode::RAS);
    }

    #[test]
    fn seeded_and_bitwise_reproducible() {
        let cfg = PhantomConfig {
            extents: [24, 24, 24],
            radius_range: (2.0, 4.0),
            seed: 11,
            ..PhantomConfig::default()
        };
        assert_eq!(generate(&cfg).unwrap(), generate(&cfg).unwrap());
        let other = PhantomConfig {
            seed: 12,
            ..cfg.clone()
        };
        assert_ne!(generate(&cfg).unwrap().1, generate(&other).unwrap().1);
    }

    #[test]
    fn foreground_fraction_bounds() {
        // Three ellipsoids with semi-axes in [3, 5] enclose between
        // 3·(4/3)π·3³ and 3·(4/3)π·5³ voxels of a 64³ grid.
        for seed in 0..5 {
            let cfg = PhantomConfig {
                extents: [64, 64, 64],
                n_blobs: 3,
                radius_range: (3.0, 5.0),
                seed,
                ..PhantomConfig::default()
            };
            let (_, mask) = generate(&cfg).unwrap();
            let frac = mask.data().iter().sum::<f64>() / 64f64.powi(3);
            assert!((0.0013..=0.006).contains(&frac), "seed {seed}: {frac}");
        }
    }

    #[test]
    fn mask_matches_ellipsoid_inequality() {
        let cfg = PhantomConfig {
            extents: [20, 18, 16],
            n_blobs: 4,
            radius_range: (1.5, 4.0),
            seed: 3,
            ..PhantomConfig::default()
        };
        let blobs = place_blobs(&cfg).unwrap();
        let (image, mask) = generate(&cfg).unwrap();
        assert!(mask.is_binary());
        assert!(image.data().iter().all(|v| v.is_finite()));
        for k in 0..16 {
            for j in 0..18 {
                for i in 0..20 {
                    let p = [i as f64, j as f64, k as f64];
                    let inside = blobs.iter().any(|b| b.contains(p));
                    assert_eq!(mask.get([i, j, k]) == 1.0, inside);
                }
            }
        }
    }

    #[test]
    fn infeasible_and_invalid() {
        let cfg = PhantomConfig {
            extents: [8, 8, 8],
            n_blobs: 1,
            radius_range: (3.9, 3.95),
            ..PhantomConfig::default()
        };
        assert_eq!(
            generate(&cfg).unwrap_err(),
            PhantomError::InfeasiblePlacement {
                blob: 0,
                attempts: 1000
            }
        );
        let neg = PhantomConfig {
            noise_sigma: -1.0,
            ..PhantomConfig::default()
        };
        assert!(matches!(
            generate(&neg),
            Err(PhantomError::InvalidConfig(_))
        ));
        let zero = PhantomConfig {
            radius_range: (0.0, 1.0),
            ..PhantomConfig::default()
        };
        assert!(matches!(
            generate(&zero),
            Err(PhantomError::InvalidConfig(_))
        ));
    }
}
