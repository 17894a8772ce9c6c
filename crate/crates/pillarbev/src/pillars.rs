//! Point-cloud pillarization: quantize points into a sparse 2D grid and pool
//! a per-pillar feature with a one-layer per-point transform followed by an
//! elementwise max.
//!
//! Grid convention: `row` indexes y, `col` indexes x, both with right-open
//! cells `[min + i*size, min + (i+1)*size)`; points exactly on the max
//! boundary are dropped. The per-pillar mean used by the feature
//! augmentation is computed from per-coordinate sorted sums, so the pooled
//! features are bitwise identical under any permutation of the input points.
//! No normalization is applied between the per-point transform and the max
//! pooling.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

/// Width of the augmented per-point feature consumed by the pillar encoder:
/// (x, y, z, intensity, dt, x-mean, y-mean, z-mean, x-center, y-center).
pub const POINT_FEATURES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub intensity: f64,
    /// Time offset in seconds; 0 for the current sweep.
    pub dt: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Decode little-endian f32 rows with the declared channel count
    /// (4: x,y,z,intensity; 5: + dt). The channel count is never inferred
    /// from the payload.
    pub fn from_le_bytes(bytes: &[u8], channels: usize) -> Result<Self, PillarError> {
        if !(channels == 4 || channels == 5) {
            return Err(PillarError::BadChannelCount(channels));
        }
        let row = channels * 4;
        if bytes.len() % row != 0 {
            return Err(PillarError::BadPayload { len: bytes.len(), row_bytes: row });
        }
        let mut points = Vec::with_capacity(bytes.len() / row);
        for chunk in bytes.chunks_exact(row) {
            let mut v = [0.0f32; 5];
            for (i, f) in chunk.chunks_exact(4).enumerate() {
                v[i] = f32::from_le_bytes([f[0], f[1], f[2], f[3]]);
            }
            points.push(Point {
                x: v[0] as f64,
                y: v[1] as f64,
                z: v[2] as f64,
                intensity: v[3] as f64,
                dt: if channels == 5 { v[4] as f64 } else { 0.0 },
            });
        }
        Ok(Self { points })
    }

    pub fn to_le_bytes(&self, channels: usize) -> Result<Vec<u8>, PillarError> {
        if !(channels == 4 || channels == 5) {
            return Err(PillarError::BadChannelCount(channels));
        }
        let mut out = Vec::with_capacity(self.points.len() * channels * 4);
        for p in &self.points {
            let mut v = vec![p.x as f32, p.y as f32, p.z as f32, p.intensity as f32];
            if channels == 5 {
                v.push(p.dt as f32);
            }
            for f in v {
                out.extend_from_slice(&f.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn read_file(path: &Path, channels: usize) -> Result<Self, PillarError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_le_bytes(&bytes, channels)
    }

    pub fn write_file(&self, path: &Path, channels: usize) -> Result<(), PillarError> {
        let bytes = self.to_le_bytes(channels)?;
        std::fs::File::create(path)?.write_all(&bytes)?;
        Ok(())
    }
}

/// Detection range and pillar size. `pillar` is the cell size of *this*
/// grid; a coarser model derives a scaled spec via [`GridSpec::scaled`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
    pub z_range: (f64, f64),
    /// (size along x, size along y) in meters.
    pub pillar: (f64, f64),
}

impl GridSpec {
    pub fn new(
        x_range: (f64, f64),
        y_range: (f64, f64),
        z_range: (f64, f64),
        pillar: (f64, f64),
    ) -> Result<Self, PillarError> {
        let s = Self { x_range, y_range, z_range, pillar };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), PillarError> {
        let finite = [
            self.x_range.0,
            self.x_range.1,
            self.y_range.0,
            self.y_range.1,
            self.z_range.0,
            self.z_range.1,
            self.pillar.0,
            self.pillar.1,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !finite
            || self.x_range.1 <= self.x_range.0
            || self.y_range.1 <= self.y_range.0
            || self.z_range.1 <= self.z_range.0
            || self.pillar.0 <= 0.0
            || self.pillar.1 <= 0.0
        {
            return Err(PillarError::BadSpec);
        }
        let (rows, cols) = self.dims();
        if rows < 1 || cols < 1 {
            return Err(PillarError::BadSpec);
        }
        Ok(())
    }

    /// Grid dimensions (rows along y, cols along x).
    pub fn dims(&self) -> (usize, usize) {
        let rows = ((self.y_range.1 - self.y_range.0) / self.pillar.1).ceil() as usize;
        let cols = ((self.x_range.1 - self.x_range.0) / self.pillar.0).ceil() as usize;
        (rows, cols)
    }

    /// Dimensions after downsampling by `stride` (iterated ceil-halving, so
    /// a chain of stride-2 stages agrees with this for every power of two).
    pub fn dims_at_stride(&self, stride: u32) -> (usize, usize) {
        let (mut r, mut c) = self.dims();
        let mut s = 1;
        while s < stride {
            r = r.div_ceil(2);
            c = c.div_ceil(2);
            s *= 2;
        }
        (r, c)
    }

    /// Same ranges with the pillar size multiplied by `factor`.
    pub fn scaled(&self, factor: u32) -> GridSpec {
        GridSpec {
            pillar: (self.pillar.0 * factor as f64, self.pillar.1 * factor as f64),
            ..*self
        }
    }

    /// Cell of an in-range point, or None when outside the right-open ranges.
    pub fn cell_of(&self, x: f64, y: f64, z: f64) -> Option<(i32, i32)> {
        if x < self.x_range.0
            || x >= self.x_range.1
            || y < self.y_range.0
            || y >= self.y_range.1
            || z < self.z_range.0
            || z >= self.z_range.1
        {
            return None;
        }
        let col = ((x - self.x_range.0) / self.pillar.0).floor() as i32;
        let row = ((y - self.y_range.0) / self.pillar.1).floor() as i32;
        Some((row, col))
    }

    /// Geometric center of a cell.
    pub fn cell_center(&self, row: i32, col: i32) -> (f64, f64) {
        (
            self.x_range.0 + (col as f64 + 0.5) * self.pillar.0,
            self.y_range.0 + (row as f64 + 0.5) * self.pillar.1,
        )
    }
}

#[derive(Debug)]
pub enum PillarError {
    BadSpec,
    BadChannelCount(usize),
    BadPayload { len: usize, row_bytes: usize },
    BadParams(String),
    Io(std::io::Error),
}

impl std::fmt::Display for PillarError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PillarError::BadSpec => write!(f, "grid spec ranges/sizes are invalid"),
            PillarError::BadChannelCount(c) => {
                write!(f, "point files carry 4 or 5 channels, got {c}")
            }
            PillarError::BadPayload { len, row_bytes } => {
                write!(f, "payload of {len} bytes is not a multiple of {row_bytes}-byte rows")
            }
            PillarError::BadParams(m) => write!(f, "bad pillar data: {m}"),
            PillarError::Io(e) => write!(f, "io: {e}"),
        }
    }
}

impl std::error::Error for PillarError {}

impl From<std::io::Error> for PillarError {
    fn from(e: std::io::Error) -> Self {
        PillarError::Io(e)
    }
}

/// Map from occupied cell to the indices of its points, cells in row-major
/// order and point indices in input order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PillarAssignment {
    pub cells: Vec<((i32, i32), Vec<u32>)>,
}

impl PillarAssignment {
    pub fn total_points(&self) -> usize {
        self.cells.iter().map(|(_, v)| v.len()).sum()
    }
}

/// Quantize in-range points to pillar cells.
pub fn assign_pillars(pc: &PointCloud, spec: &GridSpec) -> PillarAssignment {
    let mut map: HashMap<(i32, i32), Vec<u32>> = HashMap::new();
    for (i, p) in pc.points.iter().enumerate() {
        if let Some(cell) = spec.cell_of(p.x, p.y, p.z) {
            map.entry(cell).or_default().push(i as u32);
        }
    }
    let mut cells: Vec<_> = map.into_iter().collect();
    cells.sort_unstable_by_key(|(c, _)| *c);
    PillarAssignment { cells }
}

/// Sum in ascending value order: permutation-independent to the last bit.
fn sorted_sum(vals: &mut [f64]) -> f64 {
    vals.sort_unstable_by(|a, b| a.total_cmp(b));
    vals.iter().sum()
}

fn cell_features(
    pc: &PointCloud,
    spec: &GridSpec,
    cell: (i32, i32),
    idxs: &[u32],
) -> Vec<[f64; POINT_FEATURES]> {
    let n = idxs.len() as f64;
    let mut xs: Vec<f64> = idxs.iter().map(|&i| pc.points[i as usize].x).collect();
    let mut ys: Vec<f64> = idxs.iter().map(|&i| pc.points[i as usize].y).collect();
    let mut zs: Vec<f64> = idxs.iter().map(|&i| pc.points[i as usize].z).collect();
    let mx = sorted_sum(&mut xs) / n;
    let my = sorted_sum(&mut ys) / n;
    let mz = sorted_sum(&mut zs) / n;
    let (cx, cy) = spec.cell_center(cell.0, cell.1);
    idxs.iter()
        .map(|&i| {
            let p = &pc.points[i as usize];
            [
                p.x,
                p.y,
                p.z,
                p.intensity,
                p.dt,
                p.x - mx,
                p.y - my,
                p.z - mz,
                p.x - cx,
                p.y - cy,
            ]
        })
        .collect()
}

/// Augmented 10-feature vectors per pillar, aligned with `assignment.cells`.
pub fn augment_points(
    pc: &PointCloud,
    assignment: &PillarAssignment,
    spec: &GridSpec,
) -> Vec<Vec<[f64; POINT_FEATURES]>> {
    assignment
        .cells
        .iter()
        .map(|(cell, idxs)| cell_features(pc, spec, *cell, idxs))
        .collect()
}

/// One-layer per-point transform: `relu(W * aug + b)`, pooled with max.
#[derive(Debug, Clone, PartialEq)]
pub struct PillarEncoderParams {
    /// Row-major `c_out x POINT_FEATURES`.
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
    pub c_out: usize,
}

impl PillarEncoderParams {
    pub fn new(weight: Vec<f32>, bias: Vec<f32>) -> Result<Self, PillarError> {
        if bias.is_empty() || weight.len() != bias.len() * POINT_FEATURES {
            return Err(PillarError::BadParams(format!(
                "weight {} x bias {} does not factor as c_out x {POINT_FEATURES}",
                weight.len(),
                bias.len()
            )));
        }
        if weight.iter().chain(bias.iter()).any(|v| !v.is_finite()) {
            return Err(PillarError::BadParams("non-finite entries".into()));
        }
        let c_out = bias.len();
        Ok(Self { weight, bias, c_out })
    }

    /// Identity rows on the first `c_out` augmented features; handy in tests.
    pub fn identity(c_out: usize) -> Self {
        assert!(c_out <= POINT_FEATURES);
        let mut weight = vec![0.0f32; c_out * POINT_FEATURES];
        for i in 0..c_out {
            weight[i * POINT_FEATURES + i] = 1.0;
        }
        Self { weight, bias: vec![0.0; c_out], c_out }
    }
}

/// Optional caps; both default to off. Capping keeps the first points /
/// cells in input / row-major order, which intentionally gives up the
/// permutation-invariance contract — hence off by default.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PillarizeOptions {
    pub max_points_per_pillar: Option<usize>,
    pub max_pillars: Option<usize>,
}

/// A sparse 2D feature grid: active (row, col) sites in canonical row-major
/// order with one fixed-width feature vector per site.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseGrid2D {
    pub spec: GridSpec,
    /// Downsampling factor relative to the base grid of `spec`.
    pub stride: u32,
    pub channels: usize,
    coords: Vec<(i32, i32)>,
    features: Vec<f32>,
}

impl SparseGrid2D {
    pub fn empty(spec: GridSpec, stride: u32, channels: usize) -> Self {
        Self { spec, stride, channels, coords: Vec::new(), features: Vec::new() }
    }

    /// Build from per-site features, canonicalizing to row-major order.
    /// Duplicate or out-of-bounds coordinates are rejected.
    pub fn from_sites(
        spec: GridSpec,
        stride: u32,
        channels: usize,
        mut sites: Vec<((i32, i32), Vec<f32>)>,
    ) -> Result<Self, PillarError> {
        sites.sort_unstable_by_key(|(c, _)| *c);
        let (rows, cols) = spec.dims_at_stride(stride);
        let mut coords = Vec::with_capacity(sites.len());
        let mut features = Vec::with_capacity(sites.len() * channels);
        for ((r, c), f) in sites {
            if f.len() != channels {
                return Err(PillarError::BadParams(format!(
                    "feature width {} != {channels}",
                    f.len()
                )));
            }
            if r < 0 || c < 0 || r as usize >= rows || c as usize >= cols {
                return Err(PillarError::BadParams(format!(
                    "site ({r},{c}) outside {rows}x{cols}"
                )));
            }
            if coords.last() == Some(&(r, c)) {
                return Err(PillarError::BadParams(format!("duplicate site ({r},{c})")));
            }
            coords.push((r, c));
            features.extend_from_slice(&f);
        }
        Ok(Self { spec, stride, channels, coords, features })
    }

    /// Internal constructor for already-canonical data.
    pub(crate) fn from_parts(
        spec: GridSpec,
        stride: u32,
        channels: usize,
        coords: Vec<(i32, i32)>,
        features: Vec<f32>,
    ) -> Self {
        debug_assert!(coords.windows(2).all(|w| w[0] < w[1]));
        debug_assert_eq!(features.len(), coords.len() * channels);
        Self { spec, stride, channels, coords, features }
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn coords(&self) -> &[(i32, i32)] {
        &self.coords
    }

    pub fn feature(&self, site: usize) -> &[f32] {
        &self.features[site * self.channels..(site + 1) * self.channels]
    }

    pub fn features(&self) -> &[f32] {
        &self.features
    }

    pub fn features_mut(&mut self) -> &mut [f32] {
        &mut self.features
    }

    /// Grid dimensions at this stride.
    pub fn dims(&self) -> (usize, usize) {
        self.spec.dims_at_stride(self.stride)
    }

    pub fn coord_index(&self) -> HashMap<(i32, i32), u32> {
        self.coords
            .iter()
            .enumerate()
            .map(|(i, c)| (*c, i as u32))
            .collect()
    }

    /// Reinterpret a grid built on a scaled spec as a strided view of the
    /// base spec: a stride-1 grid over `base.scaled(m)` covers the same
    /// lattice as a stride-m grid over `base`.
    pub fn rebase(self, base: GridSpec, stride: u32) -> Result<Self, PillarError> {
        let (rows, cols) = base.dims_at_stride(stride);
        for &(r, c) in &self.coords {
            if r as usize >= rows || c as usize >= cols {
                return Err(PillarError::BadParams(format!(
                    "site ({r},{c}) outside rebased {rows}x{cols}"
                )));
            }
        }
        Ok(Self { spec: base, stride, ..self })
    }
}

/// Pillarize a cloud: per occupied cell, max-pool `relu(W*aug + b)` over the
/// cell's points. Output is independent of input point order and of the
/// worker count used for the per-cell loop.
pub fn pillarize(
    pc: &PointCloud,
    spec: &GridSpec,
    params: &PillarEncoderParams,
    opts: &PillarizeOptions,
) -> SparseGrid2D {
    let mut assignment = assign_pillars(pc, spec);
    if let Some(cap) = opts.max_pillars {
        assignment.cells.truncate(cap);
    }
    if let Some(cap) = opts.max_points_per_pillar {
        for (_, idxs) in &mut assignment.cells {
            idxs.truncate(cap);
        }
    }
    let c_out = params.c_out;
    let features: Vec<f32> = assignment
        .cells
        .par_iter()
        .flat_map_iter(|(cell, idxs)| {
            let aug = cell_features(pc, spec, *cell, idxs);
            let mut pooled = vec![f32::NEG_INFINITY; c_out];
            for a in &aug {
                for (o, slot) in pooled.iter_mut().enumerate() {
                    let row = &params.weight[o * POINT_FEATURES..(o + 1) * POINT_FEATURES];
                    let mut acc = params.bias[o];
                    for (wi, ai) in row.iter().zip(a.iter()) {
                        acc += wi * *ai as f32;
                    }
                    let act = acc.max(0.0);
                    if act > *slot {
                        *slot = act;
                    }
                }
            }
            pooled
        })
        .collect();
    SparseGrid2D::from_parts(
        *spec,
        1,
        c_out,
        assignment.cells.iter().map(|(c, _)| *c).collect(),
        features,
    )
}
