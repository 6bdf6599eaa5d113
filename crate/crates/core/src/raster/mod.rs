//! Grid types and the elementary image operations shared by the rest of the
//! crate: Sobel gradients, square dilation, 4-connected labeling, centroids
//! and instance boundaries.

mod file;

pub use file::{read_raw, write_raw, RawTensor, TensorData};

use std::collections::HashMap;

use crate::error::{Error, Result};

/// Dense row-major grid of `f64` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if dims.is_empty() || dims.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("dims must be positive, got {dims:?}")));
        }
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "dims {dims:?} need {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Self::filled(dims, 0.0)
    }

    pub fn filled(dims: &[usize], value: f64) -> Self {
        let n = dims.iter().product();
        Self {
            dims: dims.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Self {
            dims: vec![height, width],
            data,
        }
    }

    /// Stacks equally sized 2-D maps into a `[C, h, w]` tensor.
    pub fn stack(channels: &[&Tensor]) -> Result<Self> {
        let first = channels
            .first()
            .ok_or_else(|| Error::Shape("cannot stack zero channels".into()))?;
        let (h, w) = first.plane_dims();
        let mut data = Vec::with_capacity(channels.len() * h * w);
        for ch in channels {
            if ch.dims.len() != 2 || ch.plane_dims() != (h, w) {
                return Err(Error::Shape(format!(
                    "stack expects {h}x{w} planes, got {:?}",
                    ch.dims
                )));
            }
            data.extend_from_slice(&ch.data);
        }
        Ok(Self {
            dims: vec![channels.len(), h, w],
            data,
        })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Spatial size: the last two dims (a 1-D tensor is treated as one row).
    pub fn plane_dims(&self) -> (usize, usize) {
        match self.dims.len() {
            0 => (0, 0),
            1 => (1, self.dims[0]),
            n => (self.dims[n - 2], self.dims[n - 1]),
        }
    }

    /// Number of planes in a `[C, h, w]` tensor; 1 for a 2-D map.
    pub fn channels(&self) -> usize {
        if self.dims.len() == 3 {
            self.dims[0]
        } else {
            1
        }
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        let (_, w) = self.plane_dims();
        self.data[r * w + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        let (_, w) = self.plane_dims();
        self.data[r * w + c] = v;
    }

    pub fn plane(&self, k: usize) -> &[f64] {
        let (h, w) = self.plane_dims();
        &self.data[k * h * w..(k + 1) * h * w]
    }

    pub fn plane_mut(&mut self, k: usize) -> &mut [f64] {
        let (h, w) = self.plane_dims();
        &mut self.data[k * h * w..(k + 1) * h * w]
    }

    /// Copies plane `k` out as a 2-D map.
    pub fn channel(&self, k: usize) -> Result<Tensor> {
        if k >= self.channels() {
            return Err(Error::ChannelOutOfRange {
                index: k,
                count: self.channels(),
            });
        }
        let (h, w) = self.plane_dims();
        Ok(Tensor {
            dims: vec![h, w],
            data: self.plane(k).to_vec(),
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn same_dims(&self, other: &Tensor) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::Shape(format!(
                "{:?} vs {:?}",
                self.dims, other.dims
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        write_raw(
            path,
            &RawTensor {
                dims: self.dims.clone(),
                data: TensorData::F64(self.data.clone()),
            },
        )
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let raw = read_raw(path)?;
        match raw.data {
            TensorData::F64(data) => Tensor::new(raw.dims, data).map_err(|e| Error::Format {
                path: path.to_path_buf(),
                reason: e.to_string(),
            }),
            _ => Err(Error::Format {
                path: path.to_path_buf(),
                reason: "expected f64 payload".into(),
            }),
        }
    }
}

/// Binary pixel mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::Shape(format!(
                "{height}x{width} mask needs {} bits, got {}",
                height * width,
                bits.len()
            )));
        }
        Ok(Self {
            height,
            width,
            bits,
        })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![true; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                bits.push(f(r, c));
            }
        }
        Self {
            height,
            width,
            bits,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.bits[r * self.width + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: bool) {
        self.bits[r * self.width + c] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }

    pub fn and(&self, other: &BinaryMask) -> BinaryMask {
        BinaryMask {
            height: self.height,
            width: self.width,
            bits: self.bits.iter().zip(&other.bits).map(|(&a, &b)| a && b).collect(),
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor {
            dims: vec![self.height, self.width],
            data: self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        }
    }
}

/// Integer instance map: 0 is background, `1..=K` are instances.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstanceLabelMap {
    height: usize,
    width: usize,
    labels: Vec<u32>,
}

impl InstanceLabelMap {
    /// Builds a map whose label set must be exactly `{0} ∪ {1..K}`.
    pub fn new(height: usize, width: usize, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::Shape(format!(
                "{height}x{width} label map needs {} labels, got {}",
                height * width,
                labels.len()
            )));
        }
        let max = labels.iter().copied().max().unwrap_or(0) as usize;
        let mut seen = vec![false; max + 1];
        for &l in &labels {
            seen[l as usize] = true;
        }
        if let Some(gap) = (1..=max).find(|&k| !seen[k]) {
            return Err(Error::Shape(format!("label set has a gap at {gap}")));
        }
        Ok(Self {
            height,
            width,
            labels,
        })
    }

    /// Relabels arbitrary ids to `1..=K` in raster order of first appearance.
    pub fn compacted(height: usize, width: usize, labels: &[u32]) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::Shape(format!(
                "{height}x{width} label map needs {} labels, got {}",
                height * width,
                labels.len()
            )));
        }
        let mut remap: HashMap<u32, u32> = HashMap::new();
        let out = labels
            .iter()
            .map(|&l| {
                if l == 0 {
                    0
                } else {
                    let next = remap.len() as u32 + 1;
                    *remap.entry(l).or_insert(next)
                }
            })
            .collect();
        Ok(Self {
            height,
            width,
            labels: out,
        })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            labels: vec![0; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn get(&self, r: usize, c: usize) -> u32 {
        self.labels[r * self.width + c]
    }

    pub fn num_instances(&self) -> usize {
        self.labels.iter().copied().max().unwrap_or(0) as usize
    }

    /// Pixel count per instance; index `k - 1` holds instance `k`.
    pub fn areas(&self) -> Vec<usize> {
        let mut areas = vec![0usize; self.num_instances()];
        for &l in &self.labels {
            if l > 0 {
                areas[l as usize - 1] += 1;
            }
        }
        areas
    }

    pub fn mask(&self, k: u32) -> BinaryMask {
        BinaryMask {
            height: self.height,
            width: self.width,
            bits: self.labels.iter().map(|&l| l == k && k > 0).collect(),
        }
    }

    pub fn foreground(&self) -> BinaryMask {
        BinaryMask {
            height: self.height,
            width: self.width,
            bits: self.labels.iter().map(|&l| l > 0).collect(),
        }
    }

    /// Centroids of all instances, index `k - 1` for instance `k`.
    pub fn centroids(&self) -> Vec<(f64, f64)> {
        let k = self.num_instances();
        let mut acc = vec![(0.0f64, 0.0f64, 0usize); k];
        for r in 0..self.height {
            for c in 0..self.width {
                let l = self.labels[r * self.width + c];
                if l > 0 {
                    let e = &mut acc[l as usize - 1];
                    e.0 += r as f64;
                    e.1 += c as f64;
                    e.2 += 1;
                }
            }
        }
        acc.into_iter()
            .map(|(sr, sc, n)| (sr / n as f64, sc / n as f64))
            .collect()
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        write_raw(
            path,
            &RawTensor {
                dims: vec![self.height, self.width],
                data: TensorData::I32(self.labels.iter().map(|&l| l as i32).collect()),
            },
        )
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let bad = |reason: String| Error::Format {
            path: path.to_path_buf(),
            reason,
        };
        let raw = read_raw(path)?;
        let TensorData::I32(values) = raw.data else {
            return Err(bad("expected i32 payload".into()));
        };
        if raw.dims.len() != 2 {
            return Err(bad(format!("expected 2-D labels, got {:?}", raw.dims)));
        }
        if values.iter().any(|&v| v < 0) {
            return Err(bad("negative label".into()));
        }
        InstanceLabelMap::new(
            raw.dims[0],
            raw.dims[1],
            values.into_iter().map(|v| v as u32).collect(),
        )
        .map_err(|e| bad(e.to_string()))
    }
}

const SOBEL_X: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
const SOBEL_Y: [[f64; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];

#[inline]
fn clamp_index(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

/// Sobel response computed as weighted central differences, so constant
/// regions give exactly zero. `horizontal` selects `d/dx` (SOBEL_X).
fn sobel_clamped(src: &[f64], h: usize, w: usize, horizontal: bool) -> Vec<f64> {
    const SMOOTH: [f64; 3] = [1.0, 2.0, 1.0];
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for (d, &s) in SMOOTH.iter().enumerate() {
                let (a, b) = if horizontal {
                    let rr = clamp_index(r as isize + d as isize - 1, h);
                    (
                        src[rr * w + clamp_index(c as isize + 1, w)],
                        src[rr * w + clamp_index(c as isize - 1, w)],
                    )
                } else {
                    let cc = clamp_index(c as isize + d as isize - 1, w);
                    (
                        src[clamp_index(r as isize + 1, h) * w + cc],
                        src[clamp_index(r as isize - 1, h) * w + cc],
                    )
                };
                acc += s * (a - b);
            }
            out[r * w + c] = acc;
        }
    }
    out
}

/// Adjoint of clamped 3x3 correlation: scatters each output weight back onto the
/// clamped source pixel it read.
fn correlate_clamped_adjoint(grad: &[f64], h: usize, w: usize, k: &[[f64; 3]; 3]) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let g = grad[r * w + c];
            if g == 0.0 {
                continue;
            }
            for (dr, row) in k.iter().enumerate() {
                let rr = clamp_index(r as isize + dr as isize - 1, h);
                for (dc, &kv) in row.iter().enumerate() {
                    if kv != 0.0 {
                        let cc = clamp_index(c as isize + dc as isize - 1, w);
                        out[rr * w + cc] += kv * g;
                    }
                }
            }
        }
    }
    out
}

/// 3x3 Sobel responses with edge-clamped padding and no normalization.
/// Returns `(gx, gy)` for a 2-D map.
pub fn sobel_gradients(map: &Tensor) -> (Tensor, Tensor) {
    let (h, w) = map.plane_dims();
    let gx = sobel_clamped(map.plane(0), h, w, true);
    let gy = sobel_clamped(map.plane(0), h, w, false);
    (
        Tensor {
            dims: vec![h, w],
            data: gx,
        },
        Tensor {
            dims: vec![h, w],
            data: gy,
        },
    )
}

/// Transposed Sobel operators: returns `Sx^T gx_grad` and `Sy^T gy_grad`.
pub fn sobel_adjoint(gx_grad: &Tensor, gy_grad: &Tensor) -> (Tensor, Tensor) {
    let (h, w) = gx_grad.plane_dims();
    let ax = correlate_clamped_adjoint(gx_grad.plane(0), h, w, &SOBEL_X);
    let ay = correlate_clamped_adjoint(gy_grad.plane(0), h, w, &SOBEL_Y);
    (
        Tensor {
            dims: vec![h, w],
            data: ax,
        },
        Tensor {
            dims: vec![h, w],
            data: ay,
        },
    )
}

/// Dilation with a `(2r+1)^2` square structuring element.
pub fn dilate(mask: &BinaryMask, radius: usize) -> BinaryMask {
    let (h, w) = (mask.height, mask.width);
    if radius == 0 {
        return mask.clone();
    }
    // separable: row pass then column pass
    let mut rows = vec![false; h * w];
    for r in 0..h {
        let src = &mask.bits[r * w..(r + 1) * w];
        for c in 0..w {
            let lo = c.saturating_sub(radius);
            let hi = (c + radius).min(w - 1);
            rows[r * w + c] = src[lo..=hi].iter().any(|&b| b);
        }
    }
    let mut out = vec![false; h * w];
    for r in 0..h {
        let lo = r.saturating_sub(radius);
        let hi = (r + radius).min(h - 1);
        for c in 0..w {
            out[r * w + c] = (lo..=hi).any(|rr| rows[rr * w + c]);
        }
    }
    BinaryMask {
        height: h,
        width: w,
        bits: out,
    }
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

/// 4-connected components; ids follow raster order of each component's
/// first pixel.
pub fn connected_components(mask: &BinaryMask) -> InstanceLabelMap {
    let (h, w) = (mask.height, mask.width);
    let mut parent: Vec<usize> = (0..h * w).collect();
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            if !mask.bits[i] {
                continue;
            }
            if c > 0 && mask.bits[i - 1] {
                let (a, b) = (find(&mut parent, i), find(&mut parent, i - 1));
                parent[a.max(b)] = a.min(b);
            }
            if r > 0 && mask.bits[i - w] {
                let (a, b) = (find(&mut parent, i), find(&mut parent, i - w));
                parent[a.max(b)] = a.min(b);
            }
        }
    }
    let mut root_label: HashMap<usize, u32> = HashMap::new();
    let mut labels = vec![0u32; h * w];
    for i in 0..h * w {
        if mask.bits[i] {
            let root = find(&mut parent, i);
            let next = root_label.len() as u32 + 1;
            labels[i] = *root_label.entry(root).or_insert(next);
        }
    }
    InstanceLabelMap {
        height: h,
        width: w,
        labels,
    }
}

/// Mean `(row, col)` of the pixels carrying label `k`.
pub fn centroid(labels: &InstanceLabelMap, k: u32) -> Result<(f64, f64)> {
    let (mut sr, mut sc, mut n) = (0.0, 0.0, 0usize);
    if k > 0 {
        for r in 0..labels.height {
            for c in 0..labels.width {
                if labels.labels[r * labels.width + c] == k {
                    sr += r as f64;
                    sc += c as f64;
                    n += 1;
                }
            }
        }
    }
    if n == 0 {
        return Err(Error::UnknownInstance(k));
    }
    Ok((sr / n as f64, sc / n as f64))
}

/// Pixels where the Sobel response of the mask is nonzero, dilated by
/// `dilation_radius`.
pub fn instance_boundary(mask: &BinaryMask, dilation_radius: usize) -> BinaryMask {
    let (gx, gy) = sobel_gradients(&mask.to_tensor());
    let edge = BinaryMask {
        height: mask.height,
        width: mask.width,
        bits: gx
            .data
            .iter()
            .zip(&gy.data)
            .map(|(a, b)| a.abs() + b.abs() > 0.0)
            .collect(),
    };
    dilate(&edge, dilation_radius)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive_sobel(map: &[f64], h: usize, w: usize, k: &[[f64; 3]; 3]) -> Vec<f64> {
        let mut out = vec![0.0; h * w];
        for r in 0..h as isize {
            for c in 0..w as isize {
                let mut s = 0.0;
                for i in -1..=1isize {
                    for j in -1..=1isize {
                        let rr = (r + i).max(0).min(h as isize - 1) as usize;
                        let cc = (c + j).max(0).min(w as isize - 1) as usize;
                        s += k[(i + 1) as usize][(j + 1) as usize] * map[rr * w + cc];
                    }
                }
                out[r as usize * w + c as usize] = s;
            }
        }
        out
    }

    #[test]
    fn sobel_of_constant_is_zero() {
        let t = Tensor::filled(&[5, 6], 3.25);
        let (gx, gy) = sobel_gradients(&t);
        assert!(gx.data().iter().chain(gy.data()).all(|&v| v == 0.0));
    }

    #[test]
    fn sobel_column_ramp() {
        let t = Tensor::from_fn(6, 6, |_, c| c as f64);
        let (gx, gy) = sobel_gradients(&t);
        for r in 0..6 {
            for c in 1..5 {
                assert_eq!(gx.at(r, c), 8.0);
                assert_eq!(gy.at(r, c), 0.0);
            }
        }
    }

    #[test]
    fn sobel_single_pixel_is_zero() {
        let t = Tensor::filled(&[1, 1], 7.0);
        let (gx, gy) = sobel_gradients(&t);
        assert_eq!(gx.data(), &[0.0]);
        assert_eq!(gy.data(), &[0.0]);
    }

    #[test]
    fn sobel_matches_naive_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let data: Vec<f64> = (0..25).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let t = Tensor::new(vec![5, 5], data.clone()).unwrap();
        let (gx, gy) = sobel_gradients(&t);
        let close = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12);
        assert!(close(gx.data(), &naive_sobel(&data, 5, 5, &SOBEL_X)));
        assert!(close(gy.data(), &naive_sobel(&data, 5, 5, &SOBEL_Y)));
    }

    #[test]
    fn sobel_adjoint_is_transpose() {
        // <S x, y> == <x, S^T y>
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (h, w) = (4, 7);
        let x = Tensor::from_fn(h, w, |_, _| rng.gen_range(-1.0..1.0));
        let y = Tensor::from_fn(h, w, |_, _| rng.gen_range(-1.0..1.0));
        let (sx, sy) = sobel_gradients(&x);
        let (ax, ay) = sobel_adjoint(&y, &y);
        let dot = |a: &Tensor, b: &Tensor| -> f64 {
            a.data().iter().zip(b.data()).map(|(p, q)| p * q).sum()
        };
        assert!((dot(&sx, &y) - dot(&x, &ax)).abs() < 1e-12);
        assert!((dot(&sy, &y) - dot(&x, &ay)).abs() < 1e-12);
    }

    #[test]
    fn dilate_cases() {
        let e = BinaryMask::empty(5, 5);
        assert_eq!(dilate(&e, 2), e);
        let mut m = BinaryMask::empty(5, 5);
        m.set(2, 2, true);
        let d = dilate(&m, 1);
        let expect = BinaryMask::from_fn(5, 5, |r, c| (1..=3).contains(&r) && (1..=3).contains(&c));
        assert_eq!(d, expect);
        let f = BinaryMask::full(4, 3);
        assert_eq!(dilate(&f, 3), f);
    }

    #[test]
    fn components_cases() {
        let e = BinaryMask::empty(4, 4);
        assert_eq!(connected_components(&e).num_instances(), 0);
        let mut m = BinaryMask::empty(3, 3);
        m.set(0, 0, true);
        m.set(1, 1, true);
        let cc = connected_components(&m);
        assert_eq!(cc.num_instances(), 2);
        assert_eq!(cc.get(0, 0), 1);
        assert_eq!(cc.get(1, 1), 2);
    }

    #[test]
    fn components_label_order_is_raster_first_pixel() {
        // a U shape whose arms meet only on the bottom row
        let m = BinaryMask::from_fn(4, 5, |r, c| c == 0 || c == 4 || r == 3 || (r == 0 && c == 2));
        let cc = connected_components(&m);
        assert_eq!(cc.num_instances(), 2);
        assert_eq!(cc.get(0, 0), 1);
        assert_eq!(cc.get(0, 4), 1);
        assert_eq!(cc.get(0, 2), 2);
    }

    fn flood_fill_partition(m: &BinaryMask) -> Vec<Vec<usize>> {
        let (h, w) = (m.height(), m.width());
        let mut seen = vec![false; h * w];
        let mut groups = Vec::new();
        for start in 0..h * w {
            if !m.bits()[start] || seen[start] {
                continue;
            }
            let mut stack = vec![start];
            seen[start] = true;
            let mut g = Vec::new();
            while let Some(p) = stack.pop() {
                g.push(p);
                let (r, c) = (p / w, p % w);
                let mut nb = Vec::new();
                if r > 0 {
                    nb.push(p - w);
                }
                if r + 1 < h {
                    nb.push(p + w);
                }
                if c > 0 {
                    nb.push(p - 1);
                }
                if c + 1 < w {
                    nb.push(p + 1);
                }
                for q in nb {
                    if m.bits()[q] && !seen[q] {
                        seen[q] = true;
                        stack.push(q);
                    }
                }
            }
            g.sort_unstable();
            groups.push(g);
        }
        groups.sort();
        groups
    }

    #[test]
    fn components_match_flood_fill() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let m = BinaryMask::from_fn(16, 16, |_, _| rng.gen_bool(0.45));
            let cc = connected_components(&m);
            let mut groups: Vec<Vec<usize>> = vec![Vec::new(); cc.num_instances()];
            for (i, &l) in cc.labels().iter().enumerate() {
                if l > 0 {
                    groups[l as usize - 1].push(i);
                }
            }
            groups.sort();
            assert_eq!(groups, flood_fill_partition(&m));
        }
    }

    #[test]
    fn centroid_cases() {
        let lm = InstanceLabelMap::new(3, 3, vec![1, 1, 0, 1, 1, 0, 0, 0, 0]).unwrap();
        assert_eq!(centroid(&lm, 1).unwrap(), (0.5, 0.5));
        let mut labels = vec![0u32; 8 * 10];
        labels[3 * 10 + 7] = 1;
        let lm = InstanceLabelMap::new(8, 10, labels).unwrap();
        assert_eq!(centroid(&lm, 1).unwrap(), (3.0, 7.0));
        assert!(matches!(centroid(&lm, 2), Err(Error::UnknownInstance(2))));
    }

    #[test]
    fn centroid_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m = BinaryMask::from_fn(12, 12, |_, _| rng.gen_bool(0.6));
        let cc = connected_components(&m);
        for k in 1..=cc.num_instances() as u32 {
            let pts: Vec<(f64, f64)> = (0..144)
                .filter(|&i| cc.labels()[i] == k)
                .map(|i| ((i / 12) as f64, (i % 12) as f64))
                .collect();
            let n = pts.len() as f64;
            let er = pts.iter().map(|p| p.0).sum::<f64>() / n;
            let ec = pts.iter().map(|p| p.1).sum::<f64>() / n;
            let (r, c) = centroid(&cc, k).unwrap();
            assert!((r - er).abs() < 1e-12 && (c - ec).abs() < 1e-12);
            assert_eq!(cc.centroids()[k as usize - 1], (r, c));
        }
    }

    #[test]
    fn boundary_of_full_frame_is_empty() {
        // edge clamping makes the full mask locally constant everywhere
        let b = instance_boundary(&BinaryMask::full(6, 6), 1);
        assert_eq!(b.count(), 0);
        assert_eq!(instance_boundary(&BinaryMask::empty(6, 6), 1).count(), 0);
    }

    #[test]
    fn boundary_of_square() {
        let m = BinaryMask::from_fn(10, 10, |r, c| (3..7).contains(&r) && (3..7).contains(&c));
        // undilated: the 6x6 block around the square minus its 2x2 core
        let (gx, gy) = sobel_gradients(&m.to_tensor());
        let raw = BinaryMask::from_fn(10, 10, |r, c| gx.at(r, c).abs() + gy.at(r, c).abs() > 0.0);
        let ring = BinaryMask::from_fn(10, 10, |r, c| {
            (2..8).contains(&r) && (2..8).contains(&c) && !((4..6).contains(&r) && (4..6).contains(&c))
        });
        assert_eq!(raw, ring);
        let b = instance_boundary(&m, 1);
        let expect = BinaryMask::from_fn(10, 10, |r, c| (1..9).contains(&r) && (1..9).contains(&c));
        assert_eq!(b, expect);
    }

    #[test]
    fn label_map_rejects_gaps() {
        assert!(InstanceLabelMap::new(1, 3, vec![0, 2, 2]).is_err());
        let c = InstanceLabelMap::compacted(1, 4, &[7, 0, 3, 7]).unwrap();
        assert_eq!(c.labels(), &[1, 0, 2, 1]);
    }

    proptest! {
        #[test]
        fn sobel_is_linear(a in -3.0f64..3.0, b in -3.0f64..3.0, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::from_fn(6, 5, |_, _| rng.gen_range(-1.0..1.0));
            let y = Tensor::from_fn(6, 5, |_, _| rng.gen_range(-1.0..1.0));
            let comb = Tensor::new(vec![6, 5], x.data().iter().zip(y.data()).map(|(p, q)| a * p + b * q).collect()).unwrap();
            let (cx, cy) = sobel_gradients(&comb);
            let (xx, xy) = sobel_gradients(&x);
            let (yx, yy) = sobel_gradients(&y);
            for i in 0..30 {
                prop_assert!((cx.data()[i] - (a * xx.data()[i] + b * yx.data()[i])).abs() < 1e-10);
                prop_assert!((cy.data()[i] - (a * xy.data()[i] + b * yy.data()[i])).abs() < 1e-10);
            }
        }

        #[test]
        fn dilate_is_monotone_and_extensive(seed in 0u64..1000, radius in 1usize..3) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = BinaryMask::from_fn(9, 11, |_, _| rng.gen_bool(0.15));
            let b = BinaryMask::from_fn(9, 11, |r, c| a.get(r, c) || rng.gen_bool(0.15));
            let da = dilate(&a, radius);
            prop_assert!(a.is_subset_of(&da));
            prop_assert!(da.is_subset_of(&dilate(&b, radius)));
        }

        #[test]
        fn components_partition_true_pixels(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = BinaryMask::from_fn(10, 10, |_, _| rng.gen_bool(0.5));
            let cc = connected_components(&m);
            for (i, &l) in cc.labels().iter().enumerate() {
                prop_assert_eq!(l > 0, m.bits()[i]);
            }
        }

        #[test]
        fn centroid_inside_bbox(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = BinaryMask::from_fn(10, 10, |_, _| rng.gen_bool(0.5));
            let cc = connected_components(&m);
            for k in 1..=cc.num_instances() as u32 {
                let (r, c) = centroid(&cc, k).unwrap();
                let px: Vec<usize> = (0..100).filter(|&i| cc.labels()[i] == k).collect();
                let rmin = px.iter().map(|i| i / 10).min().unwrap() as f64;
                let rmax = px.iter().map(|i| i / 10).max().unwrap() as f64;
                let cmin = px.iter().map(|i| i % 10).min().unwrap() as f64;
                let cmax = px.iter().map(|i| i % 10).max().unwrap() as f64;
                prop_assert!(r >= rmin && r <= rmax && c >= cmin && c <= cmax);
            }
        }
    }
}
