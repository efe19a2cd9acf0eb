//! Input encodings for the guiding model: trainable multi-resolution dense
//! 3D feature grids for positions, and fixed real spherical harmonics for
//! directions.
//!
//! The grid features themselves live in the model's flat parameter vector;
//! `GridEmbedding` only holds the layout (resolutions, offsets, bounds) and
//! indexes into a feature slice passed per call. This keeps one parameter
//! buffer shared between the optimizer, EMA, and checkpointing.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::math::{Aabb, Vec3};

#[derive(Debug, Error, PartialEq)]
pub enum EncodingError {
    #[error("scene bounds degenerate on axis {0}")]
    DegenerateAabb(usize),
    #[error("need at least 2 lattice points per axis, got {0}")]
    ResolutionTooSmall(u32),
    #[error("resolutions must be strictly increasing")]
    NonMonotoneResolutions,
}

/// Lattice points per axis for level `l` (1-based): a geometric schedule
/// from `d_coarse` to `d_fine`, rounded up per level.
pub fn level_resolution(l: usize, levels: usize, d_coarse: u32, d_fine: u32) -> u32 {
    if levels == 1 {
        return d_coarse;
    }
    let b = (d_fine as f64 / d_coarse as f64).powf(1.0 / (levels - 1) as f64);
    (d_coarse as f64 * b.powi(l as i32 - 1)).ceil() as u32
}

/// Componentwise mapping of a world position into the unit cube, clamped
/// to [0, 1 − 1e−6].
pub fn normalize_position(x: Vec3, aabb: &Aabb) -> [f64; 3] {
    let ext = aabb.extent();
    let mut u = [0.0; 3];
    for a in 0..3 {
        u[a] = ((x.axis(a) - aabb.min.axis(a)) / ext.axis(a)).clamp(0.0, 1.0 - 1e-6);
    }
    u
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridEmbedding {
    resolutions: Vec<u32>,
    feature_dim: usize,
    level_offsets: Vec<usize>,
    total_params: usize,
    aabb: Aabb,
}

impl GridEmbedding {
    pub const DEFAULT_LEVELS: usize = 8;
    pub const DEFAULT_COARSE: u32 = 8;
    pub const DEFAULT_FINE: u32 = 86;
    pub const DEFAULT_FEATURES: usize = 4;

    pub fn new(
        levels: usize,
        d_coarse: u32,
        d_fine: u32,
        feature_dim: usize,
        aabb: Aabb,
    ) -> Result<GridEmbedding, EncodingError> {
        let resolutions: Vec<u32> = (1..=levels)
            .map(|l| level_resolution(l, levels, d_coarse, d_fine))
            .collect();
        Self::with_resolutions(resolutions, feature_dim, aabb)
    }

    pub fn with_resolutions(
        resolutions: Vec<u32>,
        feature_dim: usize,
        aabb: Aabb,
    ) -> Result<GridEmbedding, EncodingError> {
        let ext = aabb.extent();
        for a in 0..3 {
            if !(ext.axis(a) > 0.0) {
                return Err(EncodingError::DegenerateAabb(a));
            }
        }
        if let Some(&d) = resolutions.iter().find(|d| **d < 2) {
            return Err(EncodingError::ResolutionTooSmall(d));
        }
        if resolutions.windows(2).any(|w| w[0] >= w[1]) {
            return Err(EncodingError::NonMonotoneResolutions);
        }
        let mut level_offsets = Vec::with_capacity(resolutions.len());
        let mut total = 0usize;
        for &d in &resolutions {
            level_offsets.push(total);
            total += (d as usize).pow(3) * feature_dim;
        }
        Ok(GridEmbedding {
            resolutions,
            feature_dim,
            level_offsets,
            total_params: total,
            aabb,
        })
    }

    pub fn default_for(aabb: Aabb) -> Result<GridEmbedding, EncodingError> {
        Self::new(
            Self::DEFAULT_LEVELS,
            Self::DEFAULT_COARSE,
            Self::DEFAULT_FINE,
            Self::DEFAULT_FEATURES,
            aabb,
        )
    }

    pub fn levels(&self) -> usize {
        self.resolutions.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn resolutions(&self) -> &[u32] {
        &self.resolutions
    }

    /// Exact trainable parameter count: F · Σ D_l³.
    pub fn param_count(&self) -> usize {
        self.total_params
    }

    /// Width of the concatenated output (L · F).
    pub fn output_dim(&self) -> usize {
        self.resolutions.len() * self.feature_dim
    }

    pub fn aabb(&self) -> &Aabb {
        &self.aabb
    }

    pub fn normalize(&self, x: Vec3) -> [f64; 3] {
        normalize_position(x, &self.aabb)
    }

    /// Initial feature values: small symmetric uniform noise so a fresh
    /// model decodes to a near-uniform mixture.
    pub fn init_features(&self, rng: &mut impl rand::Rng) -> Vec<f64> {
        (0..self.total_params)
            .map(|_| rng.gen_range(-1e-2..1e-2))
            .collect()
    }

    #[inline]
    fn cell(&self, level: usize, u: [f64; 3]) -> ([usize; 3], [f64; 3]) {
        let d = self.resolutions[level] as usize;
        let mut idx = [0usize; 3];
        let mut frac = [0.0; 3];
        for a in 0..3 {
            let p = u[a] * (d - 1) as f64;
            let i = (p.floor() as usize).min(d - 2);
            idx[a] = i;
            frac[a] = p - i as f64;
        }
        (idx, frac)
    }

    #[inline]
    fn point_offset(&self, level: usize, ix: usize, iy: usize, iz: usize) -> usize {
        let d = self.resolutions[level] as usize;
        self.level_offsets[level] + ((ix * d + iy) * d + iz) * self.feature_dim
    }

    /// Trilinear interpolation at every level, concatenated coarsest-first
    /// into `out` (length L · F).
    pub fn query(&self, u: [f64; 3], features: &[f64], out: &mut [f64]) {
        debug_assert_eq!(features.len(), self.total_params);
        debug_assert_eq!(out.len(), self.output_dim());
        let f = self.feature_dim;
        for level in 0..self.resolutions.len() {
            let ([ix, iy, iz], [fx, fy, fz]) = self.cell(level, u);
            let dst = &mut out[level * f..(level + 1) * f];
            dst.fill(0.0);
            for cx in 0..2 {
                let wx = if cx == 0 { 1.0 - fx } else { fx };
                for cy in 0..2 {
                    let wxy = wx * if cy == 0 { 1.0 - fy } else { fy };
                    for cz in 0..2 {
                        let w = wxy * if cz == 0 { 1.0 - fz } else { fz };
                        let off = self.point_offset(level, ix + cx, iy + cy, iz + cz);
                        let src = &features[off..off + f];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += w * s;
                        }
                    }
                }
            }
        }
    }

    /// Scatters `upstream · weight` to each touched corner feature; appends
    /// `(parameter index, gradient)` pairs to `out`. Parameters not touched
    /// by the cell receive exactly zero (they are simply absent).
    pub fn backward(&self, u: [f64; 3], upstream: &[f64], out: &mut Vec<(u32, f64)>) {
        debug_assert_eq!(upstream.len(), self.output_dim());
        let f = self.feature_dim;
        for level in 0..self.resolutions.len() {
            let ([ix, iy, iz], [fx, fy, fz]) = self.cell(level, u);
            let up = &upstream[level * f..(level + 1) * f];
            if up.iter().all(|g| *g == 0.0) {
                continue;
            }
            for cx in 0..2 {
                let wx = if cx == 0 { 1.0 - fx } else { fx };
                for cy in 0..2 {
                    let wxy = wx * if cy == 0 { 1.0 - fy } else { fy };
                    for cz in 0..2 {
                        let w = wxy * if cz == 0 { 1.0 - fz } else { fz };
                        if w == 0.0 {
                            continue;
                        }
                        let off = self.point_offset(level, ix + cx, iy + cy, iz + cz);
                        for (j, g) in up.iter().enumerate() {
                            if *g != 0.0 {
                                out.push(((off + j) as u32, w * g));
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Fixed spherical-harmonics encoding for unit directions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShEncoding {
    pub bands: usize,
}

impl ShEncoding {
    pub const DEFAULT_BANDS: usize = 4;

    pub fn new(bands: usize) -> ShEncoding {
        assert!((1..=4).contains(&bands), "supported SH bands: 1..=4");
        ShEncoding { bands }
    }

    pub fn output_dim(&self) -> usize {
        self.bands * self.bands
    }

    /// Real spherical harmonics Y_l^m(ω) for l < bands, l-major with m
    /// ascending (−l..l), standard real-basis normalization.
    pub fn encode(&self, omega: Vec3, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.output_dim());
        let (x, y, z) = (omega.x, omega.y, omega.z);
        out[0] = 0.282_094_791_773_878_14;
        if self.bands >= 2 {
            out[1] = 0.488_602_511_902_919_9 * y;
            out[2] = 0.488_602_511_902_919_9 * z;
            out[3] = 0.488_602_511_902_919_9 * x;
        }
        if self.bands >= 3 {
            let z2 = z * z;
            out[4] = 1.092_548_430_592_079_2 * x * y;
            out[5] = 1.092_548_430_592_079_2 * y * z;
            out[6] = 0.315_391_565_252_520_05 * (3.0 * z2 - 1.0);
            out[7] = 1.092_548_430_592_079_2 * x * z;
            out[8] = 0.546_274_215_296_039_6 * (x * x - y * y);
        }
        if self.bands >= 4 {
            let z2 = z * z;
            out[9] = 0.590_043_589_926_643_5 * y * (3.0 * x * x - y * y);
            out[10] = 2.890_611_442_640_554 * x * y * z;
            out[11] = 0.457_045_799_464_465_8 * y * (5.0 * z2 - 1.0);
            out[12] = 0.373_176_332_590_115_4 * z * (5.0 * z2 - 3.0);
            out[13] = 0.457_045_799_464_465_8 * x * (5.0 * z2 - 1.0);
            out[14] = 1.445_305_721_320_277 * z * (x * x - y * y);
            out[15] = 0.590_043_589_926_643_5 * x * (x * x - 3.0 * y * y);
        }
    }
}
