//! Sparse 2D convolution over [`SparseGrid2D`]: rulebook construction,
//! submanifold and strided (regular) convolution, per-site affine + ReLU,
//! densification, and the dense convolution that both runs the dense stages
//! and serves as the oracle for the sparse path.
//!
//! Active-set semantics:
//! - submanifold (stride 1): output sites == input sites, exactly;
//! - regular stride-2: output sites are the deduplicated floor-divided input
//!   coordinates; each output still gathers every active input inside its
//!   receptive field, so values agree with a zero-padded dense convolution
//!   restricted to those sites.
//!
//! Accumulation is kernel-offset-major with a canonical site order, so
//! results are bitwise reproducible across runs and worker counts.

use crate::pillars::{GridSpec, SparseGrid2D};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvMode {
    Submanifold,
    Regular,
}

/// A K x K convolution kernel with weights laid out `[k][k][c_in][c_out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvKernel2d {
    pub k: usize,
    pub stride: usize,
    pub mode: ConvMode,
    pub c_in: usize,
    pub c_out: usize,
    weights: Vec<f32>,
    bias: Vec<f32>,
}

impl ConvKernel2d {
    pub fn new(
        k: usize,
        stride: usize,
        mode: ConvMode,
        c_in: usize,
        c_out: usize,
        weights: Vec<f32>,
        bias: Vec<f32>,
    ) -> Result<Self, SparseError> {
        if k == 0 || k % 2 == 0 {
            return Err(SparseError::BadKernel(format!("kernel size {k} must be odd")));
        }
        if !(stride == 1 || stride == 2) {
            return Err(SparseError::BadKernel(format!("stride {stride} not in {{1, 2}}")));
        }
        if mode == ConvMode::Submanifold && stride != 1 {
            return Err(SparseError::BadKernel("submanifold requires stride 1".into()));
        }
        if weights.len() != k * k * c_in * c_out || bias.len() != c_out {
            return Err(SparseError::BadKernel(format!(
                "weights {} / bias {} do not match {k}x{k}x{c_in}x{c_out}",
                weights.len(),
                bias.len()
            )));
        }
        if weights.iter().chain(bias.iter()).any(|v| !v.is_finite()) {
            return Err(SparseError::BadKernel("non-finite weights".into()));
        }
        Ok(Self { k, stride, mode, c_in, c_out, weights, bias })
    }

    /// Center tap = identity, everything else zero.
    pub fn identity(k: usize, channels: usize) -> Self {
        let mut weights = vec![0.0; k * k * channels * channels];
        let center = k / 2;
        for c in 0..channels {
            let idx = ((center * k + center) * channels + c) * channels + c;
            weights[idx] = 1.0;
        }
        Self {
            k,
            stride: 1,
            mode: ConvMode::Submanifold,
            c_in: channels,
            c_out: channels,
            weights,
            bias: vec![0.0; channels],
        }
    }

    pub fn weights(&self) -> &[f32] {
        &self.weights
    }

    pub fn bias(&self) -> &[f32] {
        &self.bias
    }

    /// The `c_in x c_out` weight block of one kernel offset.
    fn tap(&self, ki: usize, kj: usize) -> &[f32] {
        let block = self.c_in * self.c_out;
        let start = (ki * self.k + kj) * block;
        &self.weights[start..start + block]
    }
}

#[derive(Debug)]
pub enum SparseError {
    BadKernel(String),
    ChannelMismatch { expected: usize, got: usize },
    ShapeMismatch(String),
}

impl std::fmt::Display for SparseError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SparseError::BadKernel(m) => write!(f, "bad kernel: {m}"),
            SparseError::ChannelMismatch { expected, got } => {
                write!(f, "input has {got} channels, kernel expects {expected}")
            }
            SparseError::ShapeMismatch(m) => write!(f, "shape mismatch: {m}"),
        }
    }
}

impl std::error::Error for SparseError {}

/// Gather/scatter pairs per kernel offset plus the output active set.
///
/// `pairs[offset]` lists `(input site, output site)` indices; offsets are
/// row-major over the kernel window, pairs sorted by output site.
#[derive(Debug, Clone, PartialEq)]
pub struct Rulebook {
    pub pairs: Vec<Vec<(u32, u32)>>,
    pub out_coords: Vec<(i32, i32)>,
    /// Output stride relative to the base grid.
    pub out_stride: u32,
}

impl Rulebook {
    pub fn pair_count(&self) -> usize {
        self.pairs.iter().map(Vec::len).sum()
    }
}

/// Build the gather/scatter rulebook for `kernel` over `grid`.
pub fn build_rulebook(grid: &SparseGrid2D, kernel: &ConvKernel2d) -> Rulebook {
    let index = grid.coord_index();
    let pad = (kernel.k / 2) as i32;
    let out_coords: Vec<(i32, i32)> = match kernel.mode {
        ConvMode::Submanifold => grid.coords().to_vec(),
        ConvMode::Regular => {
            let s = kernel.stride as i32;
            let mut v: Vec<(i32, i32)> =
                grid.coords().iter().map(|&(r, c)| (r / s, c / s)).collect();
            v.sort_unstable();
            v.dedup();
            v
        }
    };
    let s = kernel.stride as i32;
    let mut pairs = vec![Vec::new(); kernel.k * kernel.k];
    for (out_idx, &(orow, ocol)) in out_coords.iter().enumerate() {
        for ki in 0..kernel.k {
            for kj in 0..kernel.k {
                let r = orow * s + ki as i32 - pad;
                let c = ocol * s + kj as i32 - pad;
                if let Some(&in_idx) = index.get(&(r, c)) {
                    pairs[ki * kernel.k + kj].push((in_idx, out_idx as u32));
                }
            }
        }
    }
    Rulebook { pairs, out_coords, out_stride: grid.stride * kernel.stride as u32 }
}

/// Sparse convolution driven by a freshly built rulebook.
pub fn sparse_conv(grid: &SparseGrid2D, kernel: &ConvKernel2d) -> Result<SparseGrid2D, SparseError> {
    if grid.channels != kernel.c_in {
        return Err(SparseError::ChannelMismatch { expected: kernel.c_in, got: grid.channels });
    }
    let rb = build_rulebook(grid, kernel);
    let n_out = rb.out_coords.len();
    let c_out = kernel.c_out;
    let mut out = vec![0.0f32; n_out * c_out];
    for site in out.chunks_exact_mut(c_out) {
        site.copy_from_slice(kernel.bias());
    }
    let c_in = kernel.c_in;
    for (offset, pair_list) in rb.pairs.iter().enumerate() {
        let tap = kernel.tap(offset / kernel.k, offset % kernel.k);
        for &(in_idx, out_idx) in pair_list {
            let x = grid.feature(in_idx as usize);
            let y = &mut out[out_idx as usize * c_out..(out_idx as usize + 1) * c_out];
            for ci in 0..c_in {
                let xv = x[ci];
                let w = &tap[ci * c_out..(ci + 1) * c_out];
                for (yo, wo) in y.iter_mut().zip(w) {
                    *yo += wo * xv;
                }
            }
        }
    }
    Ok(SparseGrid2D::from_parts(grid.spec, rb.out_stride, c_out, rb.out_coords, out))
}

/// Per-site `max(scale * x + shift, 0)`; the active set is unchanged.
pub fn affine_act(grid: &SparseGrid2D, scale: &[f32], shift: &[f32]) -> Result<SparseGrid2D, SparseError> {
    let mut out = affine(grid, scale, shift)?;
    for v in out.features_mut() {
        *v = v.max(0.0);
    }
    Ok(out)
}

/// Per-site `scale * x + shift` without the activation (residual tails need
/// the linear form before the skip-add).
pub fn affine(grid: &SparseGrid2D, scale: &[f32], shift: &[f32]) -> Result<SparseGrid2D, SparseError> {
    if scale.len() != grid.channels || shift.len() != grid.channels {
        return Err(SparseError::ShapeMismatch(format!(
            "affine width {}/{} vs {} channels",
            scale.len(),
            shift.len(),
            grid.channels
        )));
    }
    let mut out = grid.clone();
    let c = grid.channels;
    for site in out.features_mut().chunks_exact_mut(c) {
        for ((v, s), b) in site.iter_mut().zip(scale).zip(shift) {
            *v = *s * *v + *b;
        }
    }
    Ok(out)
}

/// Elementwise sum of two grids over an identical active set.
pub fn add_sparse(a: &SparseGrid2D, b: &SparseGrid2D) -> Result<SparseGrid2D, SparseError> {
    if a.coords() != b.coords() || a.channels != b.channels {
        return Err(SparseError::ShapeMismatch("sparse add needs identical active sets".into()));
    }
    let mut out = a.clone();
    for (v, w) in out.features_mut().iter_mut().zip(b.features()) {
        *v += *w;
    }
    Ok(out)
}

pub fn relu_sparse(grid: &SparseGrid2D) -> SparseGrid2D {
    let mut out = grid.clone();
    for v in out.features_mut() {
        *v = v.max(0.0);
    }
    out
}

/// A dense H x W x C feature map tied to a grid spec and stride.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMap2d {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub stride: u32,
    pub spec: GridSpec,
    data: Vec<f32>,
}

impl DenseMap2d {
    pub fn zeros(spec: GridSpec, stride: u32, c: usize) -> Self {
        let (h, w) = spec.dims_at_stride(stride);
        Self { h, w, c, stride, spec, data: vec![0.0; h * w * c] }
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn at(&self, row: usize, col: usize) -> &[f32] {
        let base = (row * self.w + col) * self.c;
        &self.data[base..base + self.c]
    }

    pub fn at_mut(&mut self, row: usize, col: usize) -> &mut [f32] {
        let base = (row * self.w + col) * self.c;
        &mut self.data[base..base + self.c]
    }
}

/// Copy active sites into a zero-filled dense map.
pub fn densify(grid: &SparseGrid2D) -> DenseMap2d {
    let mut map = DenseMap2d::zeros(grid.spec, grid.stride, grid.channels);
    for (i, &(r, c)) in grid.coords().iter().enumerate() {
        map.at_mut(r as usize, c as usize).copy_from_slice(grid.feature(i));
    }
    map
}

/// Collect cells with any nonzero channel into a sparse grid.
pub fn sparsify(map: &DenseMap2d) -> SparseGrid2D {
    let mut coords = Vec::new();
    let mut features = Vec::new();
    for r in 0..map.h {
        for c in 0..map.w {
            let f = map.at(r, c);
            if f.iter().any(|v| *v != 0.0) {
                coords.push((r as i32, c as i32));
                features.extend_from_slice(f);
            }
        }
    }
    SparseGrid2D::from_parts(map.spec, map.stride, map.c, coords, features)
}

/// Standard zero-padded dense convolution (pad = k/2), stride 1 or 2.
pub fn dense_conv(map: &DenseMap2d, kernel: &ConvKernel2d) -> Result<DenseMap2d, SparseError> {
    if map.c != kernel.c_in {
        return Err(SparseError::ChannelMismatch { expected: kernel.c_in, got: map.c });
    }
    let s = kernel.stride;
    let pad = (kernel.k / 2) as i64;
    let oh = if s == 1 { map.h } else { (map.h - 1) / 2 + 1 };
    let ow = if s == 1 { map.w } else { (map.w - 1) / 2 + 1 };
    let out_stride = map.stride * s as u32;
    debug_assert_eq!((oh, ow), map.spec.dims_at_stride(out_stride));
    let c_out = kernel.c_out;
    let mut out = DenseMap2d {
        h: oh,
        w: ow,
        c: c_out,
        stride: out_stride,
        spec: map.spec,
        data: vec![0.0; oh * ow * c_out],
    };
    for orow in 0..oh {
        for ocol in 0..ow {
            let y = out.at_mut(orow, ocol);
            y.copy_from_slice(kernel.bias());
            for ki in 0..kernel.k {
                let r = (orow * s) as i64 + ki as i64 - pad;
                if r < 0 || r >= map.h as i64 {
                    continue;
                }
                for kj in 0..kernel.k {
                    let c = (ocol * s) as i64 + kj as i64 - pad;
                    if c < 0 || c >= map.w as i64 {
                        continue;
                    }
                    let x = map.at(r as usize, c as usize);
                    let tap = kernel.tap(ki, kj);
                    for ci in 0..kernel.c_in {
                        let xv = x[ci];
                        let w = &tap[ci * c_out..(ci + 1) * c_out];
                        for (yo, wo) in y.iter_mut().zip(w) {
                            *yo += wo * xv;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn affine_act_dense(map: &DenseMap2d, scale: &[f32], shift: &[f32]) -> Result<DenseMap2d, SparseError> {
    let mut out = affine_dense(map, scale, shift)?;
    for v in &mut out.data {
        *v = v.max(0.0);
    }
    Ok(out)
}

pub fn affine_dense(map: &DenseMap2d, scale: &[f32], shift: &[f32]) -> Result<DenseMap2d, SparseError> {
    if scale.len() != map.c || shift.len() != map.c {
        return Err(SparseError::ShapeMismatch(format!(
            "affine width {}/{} vs {} channels",
            scale.len(),
            shift.len(),
            map.c
        )));
    }
    let mut out = map.clone();
    let c = map.c;
    for cell in out.data.chunks_exact_mut(c) {
        for ((v, s), b) in cell.iter_mut().zip(scale).zip(shift) {
            *v = *s * *v + *b;
        }
    }
    Ok(out)
}

pub fn add_dense(a: &DenseMap2d, b: &DenseMap2d) -> Result<DenseMap2d, SparseError> {
    if a.h != b.h || a.w != b.w || a.c != b.c {
        return Err(SparseError::ShapeMismatch("dense add needs identical shapes".into()));
    }
    let mut out = a.clone();
    for (v, w) in out.data.iter_mut().zip(&b.data) {
        *v += *w;
    }
    Ok(out)
}

pub fn relu_dense(map: &DenseMap2d) -> DenseMap2d {
    let mut out = map.clone();
    for v in &mut out.data {
        *v = v.max(0.0);
    }
    out
}

/// Nearest-neighbor 2x upsampling clipped to a target shape (the target may
/// be one short of 2*h when the coarse dims came from ceil-halving).
pub fn upsample2_to(map: &DenseMap2d, th: usize, tw: usize) -> Result<DenseMap2d, SparseError> {
    if th.div_ceil(2) != map.h || tw.div_ceil(2) != map.w {
        return Err(SparseError::ShapeMismatch(format!(
            "cannot upsample {}x{} to {th}x{tw}",
            map.h, map.w
        )));
    }
    let mut out = DenseMap2d {
        h: th,
        w: tw,
        c: map.c,
        stride: map.stride / 2,
        spec: map.spec,
        data: vec![0.0; th * tw * map.c],
    };
    for r in 0..th {
        for c in 0..tw {
            out.at_mut(r, c).copy_from_slice(map.at(r / 2, c / 2));
        }
    }
    Ok(out)
}

/// Channel-wise concatenation of two maps with identical spatial shape.
pub fn concat_channels(a: &DenseMap2d, b: &DenseMap2d) -> Result<DenseMap2d, SparseError> {
    if a.h != b.h || a.w != b.w {
        return Err(SparseError::ShapeMismatch(format!(
            "concat shapes {}x{} vs {}x{}",
            a.h, a.w, b.h, b.w
        )));
    }
    let c = a.c + b.c;
    let mut out = DenseMap2d {
        h: a.h,
        w: a.w,
        c,
        stride: a.stride,
        spec: a.spec,
        data: Vec::with_capacity(a.h * a.w * c),
    };
    for i in 0..a.h * a.w {
        out.data.extend_from_slice(&a.data[i * a.c..(i + 1) * a.c]);
        out.data.extend_from_slice(&b.data[i * b.c..(i + 1) * b.c]);
    }
    Ok(out)
}

/// Named f32 tensors keyed for the weight container.
pub type TensorMap = HashMap<String, (Vec<usize>, Vec<f32>)>;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pillars::GridSpec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn spec_for(dims: usize) -> GridSpec {
        let span = dims as f64 * 0.075;
        GridSpec::new((0.0, span), (0.0, span), (-1.0, 1.0), (0.075, 0.075)).unwrap()
    }

    fn grid_from(
        dims: usize,
        channels: usize,
        sites: Vec<((i32, i32), Vec<f32>)>,
    ) -> SparseGrid2D {
        SparseGrid2D::from_sites(spec_for(dims), 1, channels, sites).unwrap()
    }

    fn random_grid(rng: &mut ChaCha8Rng, dims: usize, channels: usize, fill: f64) -> SparseGrid2D {
        let mut sites = Vec::new();
        for r in 0..dims as i32 {
            for c in 0..dims as i32 {
                if rng.gen_bool(fill) {
                    sites.push(((r, c), (0..channels).map(|_| rng.gen_range(-1.0..1.0)).collect()));
                }
            }
        }
        grid_from(dims, channels, sites)
    }

    fn random_kernel(
        rng: &mut ChaCha8Rng,
        k: usize,
        stride: usize,
        mode: ConvMode,
        c_in: usize,
        c_out: usize,
    ) -> ConvKernel2d {
        ConvKernel2d::new(
            k,
            stride,
            mode,
            c_in,
            c_out,
            (0..k * k * c_in * c_out).map(|_| rng.gen_range(-0.5..0.5)).collect(),
            (0..c_out).map(|_| rng.gen_range(-0.2..0.2)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn rulebook_single_site_submanifold() {
        let g = grid_from(8, 2, vec![((3, 4), vec![1.0, 2.0])]);
        let k = ConvKernel2d::identity(3, 2);
        let rb = build_rulebook(&g, &k);
        assert_eq!(rb.out_coords, vec![(3, 4)]);
        assert_eq!(rb.pair_count(), 1);
        assert_eq!(rb.pairs[4], vec![(0, 0)]); // center offset only
    }

    #[test]
    fn rulebook_adjacent_sites() {
        let g = grid_from(8, 1, vec![((3, 4), vec![1.0]), ((3, 5), vec![2.0])]);
        let k = ConvKernel2d::identity(3, 1);
        let rb = build_rulebook(&g, &k);
        assert_eq!(rb.out_coords.len(), 2);
        // 2 center pairs + each site sees the other through one lateral tap
        assert_eq!(rb.pair_count(), 4);
        assert_eq!(rb.pairs[4].len(), 2);
    }

    #[test]
    fn rulebook_regular_stride2_floor_division() {
        let g = grid_from(16, 1, vec![((5, 7), vec![1.0])]);
        let mut k = random_kernel(&mut ChaCha8Rng::seed_from_u64(0), 3, 2, ConvMode::Regular, 1, 1);
        k = ConvKernel2d::new(3, 2, ConvMode::Regular, 1, 1, k.weights().to_vec(), vec![0.0]).unwrap();
        let rb = build_rulebook(&g, &k);
        assert_eq!(rb.out_coords, vec![(2, 3)]);
        assert_eq!(rb.out_stride, 2);
    }

    #[test]
    fn sparse_identity_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = random_grid(&mut rng, 16, 4, 0.3);
        let out = sparse_conv(&g, &ConvKernel2d::identity(3, 4)).unwrap();
        assert_eq!(out, g);
    }

    #[test]
    fn sparse_conv_empty_grid() {
        let g = SparseGrid2D::empty(spec_for(16), 1, 4);
        let out = sparse_conv(&g, &ConvKernel2d::identity(3, 4)).unwrap();
        assert!(out.is_empty());
    }

    #[test]
    fn sparse_channel_mismatch_rejected() {
        let g = grid_from(8, 2, vec![((0, 0), vec![1.0, 2.0])]);
        assert!(matches!(
            sparse_conv(&g, &ConvKernel2d::identity(3, 3)),
            Err(SparseError::ChannelMismatch { expected: 3, got: 2 })
        ));
    }

    /// Naive quadruple-loop reference, independent of dense_conv's loop
    /// structure; checks the dense path that in turn checks the sparse path.
    fn naive_conv(map: &DenseMap2d, kernel: &ConvKernel2d) -> Vec<f32> {
        let s = kernel.stride;
        let pad = (kernel.k / 2) as i64;
        let oh = if s == 1 { map.h } else { (map.h - 1) / 2 + 1 };
        let ow = if s == 1 { map.w } else { (map.w - 1) / 2 + 1 };
        let mut out = vec![0.0f32; oh * ow * kernel.c_out];
        for orow in 0..oh {
            for ocol in 0..ow {
                for co in 0..kernel.c_out {
                    let mut acc = kernel.bias()[co];
                    for ki in 0..kernel.k {
                        for kj in 0..kernel.k {
                            let r = (orow * s) as i64 + ki as i64 - pad;
                            let c = (ocol * s) as i64 + kj as i64 - pad;
                            if r < 0 || r >= map.h as i64 || c < 0 || c >= map.w as i64 {
                                continue;
                            }
                            for ci in 0..kernel.c_in {
                                let w = kernel.weights()
                                    [((ki * kernel.k + kj) * kernel.c_in + ci) * kernel.c_out + co];
                                acc += w * map.at(r as usize, c as usize)[ci];
                            }
                        }
                    }
                    out[(orow * ow + ocol) * kernel.c_out + co] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn dense_conv_matches_naive_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for stride in [1usize, 2] {
            for k in [1usize, 3, 5] {
                if stride == 2 && k == 1 {
                    continue;
                }
                let g = random_grid(&mut rng, 17, 3, 0.5);
                let map = densify(&g);
                let kernel = random_kernel(&mut rng, k, stride, ConvMode::Regular, 3, 5);
                let got = dense_conv(&map, &kernel).unwrap();
                let want = naive_conv(&map, &kernel);
                assert_eq!(got.data().len(), want.len());
                for (a, b) in got.data().iter().zip(&want) {
                    assert!((a - b).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn dense_conv_identity_and_box_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = random_grid(&mut rng, 12, 2, 0.4);
        let map = densify(&g);
        let id = dense_conv(&map, &ConvKernel2d::identity(3, 2)).unwrap();
        assert_eq!(id, map);

        // 3x3 box kernel over a single delta input -> 3x3 plateau
        let delta = grid_from(9, 1, vec![((4, 4), vec![1.0])]);
        let dmap = densify(&delta);
        let boxk = ConvKernel2d::new(3, 1, ConvMode::Regular, 1, 1, vec![1.0; 9], vec![0.0]).unwrap();
        let out = dense_conv(&dmap, &boxk).unwrap();
        for r in 0..9 {
            for c in 0..9 {
                let want = if (3..=5).contains(&r) && (3..=5).contains(&c) { 1.0 } else { 0.0 };
                assert_eq!(out.at(r, c)[0], want);
            }
        }
    }

    #[test]
    fn sparse_matches_dense_oracle_on_active_sites() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for trial in 0..60 {
            let c_in = rng.gen_range(1..=8);
            let c_out = rng.gen_range(1..=8);
            let dims = rng.gen_range(8..=32);
            let fill = rng.gen_range(0.05..0.5);
            let g = random_grid(&mut rng, dims, c_in, fill);
            let (mode, stride) = if trial % 2 == 0 {
                (ConvMode::Submanifold, 1)
            } else {
                (ConvMode::Regular, 2)
            };
            let kernel = random_kernel(&mut rng, 3, stride, mode, c_in, c_out);
            let sparse = sparse_conv(&g, &kernel).unwrap();
            let dense = dense_conv(&densify(&g), &kernel).unwrap();
            if mode == ConvMode::Submanifold {
                assert_eq!(sparse.coords(), g.coords());
            } else {
                let mut want: Vec<(i32, i32)> =
                    g.coords().iter().map(|&(r, c)| (r / 2, c / 2)).collect();
                want.sort_unstable();
                want.dedup();
                assert_eq!(sparse.coords(), &want[..]);
            }
            for (i, &(r, c)) in sparse.coords().iter().enumerate() {
                for (a, b) in sparse.feature(i).iter().zip(dense.at(r as usize, c as usize)) {
                    assert!((a - b).abs() < 1e-5, "site ({r},{c})");
                }
            }
        }
    }

    #[test]
    fn sparse_conv_linear_in_input_when_bias_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = random_grid(&mut rng, 20, 4, 0.3);
        let kernel = ConvKernel2d::new(
            3,
            1,
            ConvMode::Submanifold,
            4,
            4,
            (0..144).map(|_| rng.gen_range(-0.5..0.5)).collect(),
            vec![0.0; 4],
        )
        .unwrap();
        let mut scaled = g.clone();
        for v in scaled.features_mut() {
            *v *= 3.0;
        }
        let a = sparse_conv(&g, &kernel).unwrap();
        let b = sparse_conv(&scaled, &kernel).unwrap();
        for (x, y) in a.features().iter().zip(b.features()) {
            let want = 3.0 * x;
            assert!((y - want).abs() <= 1e-6 * want.abs().max(1e-3));
        }
    }

    #[test]
    fn stride_composition_floor_division() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let g = random_grid(&mut rng, 33, 2, 0.2);
        let k1 = random_kernel(&mut rng, 3, 2, ConvMode::Regular, 2, 2);
        let k2 = random_kernel(&mut rng, 3, 2, ConvMode::Regular, 2, 2);
        let out = sparse_conv(&sparse_conv(&g, &k1).unwrap(), &k2).unwrap();
        assert_eq!(out.stride, 4);
        let mut want: Vec<(i32, i32)> = g.coords().iter().map(|&(r, c)| (r / 4, c / 4)).collect();
        want.sort_unstable();
        want.dedup();
        assert_eq!(out.coords(), &want[..]);
    }

    #[test]
    fn affine_act_examples() {
        let g = grid_from(8, 2, vec![((1, 1), vec![0.5, -2.0]), ((2, 3), vec![1.0, 3.0])]);
        let id = affine_act(&g, &[1.0, 1.0], &[0.0, 0.0]).unwrap();
        assert_eq!(id.feature(0), &[0.5, 0.0]); // negative clamped
        assert_eq!(id.feature(1), &[1.0, 3.0]);
        let shifted = affine_act(&g, &[0.0, 0.0], &[2.0, -1.0]).unwrap();
        assert_eq!(shifted.feature(0), &[2.0, 0.0]);
        // random affine matches a scalar recomputation
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let rg = random_grid(&mut rng, 10, 3, 0.4);
        let scale: Vec<f32> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let shift: Vec<f32> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let out = affine_act(&rg, &scale, &shift).unwrap();
        for i in 0..rg.len() {
            for ch in 0..3 {
                let want = (scale[ch] * rg.feature(i)[ch] + shift[ch]).max(0.0);
                assert_eq!(out.feature(i)[ch], want);
            }
        }
    }

    #[test]
    fn densify_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let g = random_grid(&mut rng, 14, 3, 0.3);
        let dense = densify(&g);
        assert_eq!(dense.h, 14);
        let back = sparsify(&dense);
        // every site with a nonzero feature survives the round trip
        let idx = back.coord_index();
        for (i, coord) in g.coords().iter().enumerate() {
            if g.feature(i).iter().any(|v| *v != 0.0) {
                let j = idx[coord] as usize;
                assert_eq!(back.feature(j), g.feature(i));
            }
        }
        let empty = densify(&SparseGrid2D::empty(spec_for(6), 1, 2));
        assert!(empty.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn upsample_and_concat_shapes() {
        let spec = spec_for(10); // dims 10 -> stride2 dims 5
        let mut low = DenseMap2d::zeros(spec, 2, 2);
        low.at_mut(0, 0).copy_from_slice(&[1.0, 2.0]);
        let up = upsample2_to(&low, 10, 10).unwrap();
        assert_eq!(up.at(1, 1), &[1.0, 2.0]);
        assert_eq!(up.at(2, 1), &[0.0, 0.0]);
        let other = DenseMap2d::zeros(spec, 1, 3);
        let cat = concat_channels(&up, &other).unwrap();
        assert_eq!(cat.c, 5);
        assert_eq!(cat.at(1, 1), &[1.0, 2.0, 0.0, 0.0, 0.0]);
        // odd target dims round-trip through ceil-halving
        let spec9 = spec_for(9);
        let low9 = DenseMap2d::zeros(spec9, 2, 1);
        assert_eq!(low9.h, 5);
        assert_eq!(upsample2_to(&low9, 9, 9).unwrap().h, 9);
    }
}
