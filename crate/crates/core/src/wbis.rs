//! Watershed-based instance segmentation: NP probability + HV distance maps
//! to an instance label map.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{connected_components, sobel_gradients, BinaryMask, InstanceLabelMap, Tensor};

/// How HV gradients become a flooding energy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnergyKind {
    /// Max of the min-max rescaled gradient magnitudes.
    Magnitude,
    /// Max of one minus the min-max rescaled signed gradients. Offsets grow
    /// along each axis inside a nucleus, so only the negative jumps at
    /// contacts and rims score high, whatever the nucleus size.
    #[default]
    Signed,
}

impl std::str::FromStr for EnergyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "magnitude" => Ok(EnergyKind::Magnitude),
            "signed" => Ok(EnergyKind::Signed),
            other => Err(Error::InvalidParam(format!("unknown energy kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WbisParams {
    pub fg_threshold: f64,
    pub marker_threshold: f64,
    pub min_instance_area: usize,
    #[serde(default)]
    pub energy: EnergyKind,
}

impl Default for WbisParams {
    fn default() -> Self {
        Self {
            fg_threshold: 0.5,
            marker_threshold: 0.4,
            min_instance_area: 10,
            energy: EnergyKind::Signed,
        }
    }
}

impl WbisParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.fg_threshold > 0.0 && self.fg_threshold < 1.0) {
            return Err(Error::InvalidParam(format!(
                "fg_threshold must lie in (0, 1), got {}",
                self.fg_threshold
            )));
        }
        if !(self.marker_threshold > 0.0 && self.marker_threshold < 1.0) {
            return Err(Error::InvalidParam(format!(
                "marker_threshold must lie in (0, 1), got {}",
                self.marker_threshold
            )));
        }
        if self.min_instance_area == 0 {
            return Err(Error::InvalidParam("min_instance_area must be >= 1".into()));
        }
        Ok(())
    }
}

fn rescale_unit(v: &mut [f64]) {
    let (lo, hi) = v
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    let span = hi - lo;
    if span > 0.0 {
        v.iter_mut().for_each(|x| *x = (*x - lo) / span);
    } else {
        // a flat gradient map carries no contact information
        v.iter_mut().for_each(|x| *x = 0.0);
    }
}

/// Per-pixel contact energy from a `[2, h, w]` HV map: the max of the
/// min-max rescaled `|d/dx hv_h|` and `|d/dy hv_v|`.
pub fn energy_landscape(hv: &Tensor) -> Result<Tensor> {
    energy_landscape_with(hv, EnergyKind::Magnitude)
}

/// Energy of the given kind. A flat gradient map contributes zeros.
pub fn energy_landscape_with(hv: &Tensor, kind: EnergyKind) -> Result<Tensor> {
    if hv.dims().len() != 3 || hv.dims()[0] != 2 {
        return Err(Error::Shape(format!(
            "hv must be [2, h, w], got {:?}",
            hv.dims()
        )));
    }
    let (gx, _) = sobel_gradients(&hv.channel(0)?);
    let (_, gy) = sobel_gradients(&hv.channel(1)?);
    let prepare = |g: &Tensor| -> Vec<f64> {
        match kind {
            EnergyKind::Magnitude => {
                let mut v: Vec<f64> = g.data().iter().map(|x| x.abs()).collect();
                rescale_unit(&mut v);
                v
            }
            EnergyKind::Signed => {
                let mut v = g.data().to_vec();
                let flat = v.iter().all(|&x| x == v[0]);
                rescale_unit(&mut v);
                if !flat {
                    v.iter_mut().for_each(|x| *x = 1.0 - *x);
                }
                v
            }
        }
    };
    let ex = prepare(&gx);
    let ey = prepare(&gy);
    let (h, w) = hv.plane_dims();
    Tensor::new(
        vec![h, w],
        ex.iter().zip(&ey).map(|(a, b)| a.max(*b)).collect(),
    )
}

#[derive(Debug, PartialEq)]
struct QueueEntry {
    energy: f64,
    order: u64,
    index: usize,
}

impl Eq for QueueEntry {}

impl Ord for QueueEntry {
    // reversed so that BinaryHeap pops the lowest (energy, order) first
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .energy
            .total_cmp(&self.energy)
            .then_with(|| other.order.cmp(&self.order))
    }
}

impl PartialOrd for QueueEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Marker-controlled priority flood restricted to `mask`.
///
/// Marker pixels seed a min-queue keyed by `(energy, insertion order)`. A
/// popped pixel hands its label to every unlabeled masked 4-neighbour, which
/// is then queued. Masked pixels unreachable from any marker stay 0. Output
/// labels are those of `markers` (not compacted).
pub fn watershed(
    energy: &Tensor,
    markers: &InstanceLabelMap,
    mask: &BinaryMask,
) -> Result<InstanceLabelMap> {
    let (h, w) = energy.plane_dims();
    if markers.height() != h || markers.width() != w || mask.height() != h || mask.width() != w {
        return Err(Error::Shape("watershed inputs differ in size".into()));
    }
    let e = energy.data();
    let mut labels = vec![0u32; h * w];
    let mut heap = BinaryHeap::new();
    let mut order = 0u64;
    for (i, &m) in markers.labels().iter().enumerate() {
        if m > 0 && mask.bits()[i] {
            labels[i] = m;
            heap.push(QueueEntry {
                energy: e[i],
                order,
                index: i,
            });
            order += 1;
        }
    }
    while let Some(QueueEntry { index, .. }) = heap.pop() {
        let (r, c) = (index / w, index % w);
        let label = labels[index];
        let mut visit = |q: usize, heap: &mut BinaryHeap<QueueEntry>| {
            if mask.bits()[q] && labels[q] == 0 {
                labels[q] = label;
                heap.push(QueueEntry {
                    energy: e[q],
                    order,
                    index: q,
                });
                order += 1;
            }
        };
        if r > 0 {
            visit(index - w, &mut heap);
        }
        if c > 0 {
            visit(index - 1, &mut heap);
        }
        if c + 1 < w {
            visit(index + 1, &mut heap);
        }
        if r + 1 < h {
            visit(index + w, &mut heap);
        }
    }
    // marker ids are kept; a marker lying wholly outside the mask would
    // leave a gap, so fall back to compacting
    InstanceLabelMap::new(h, w, labels.clone())
        .or_else(|_| InstanceLabelMap::compacted(h, w, &labels))
}

/// Full WBIS pipeline.
///
/// Foreground is `np_prob > fg_threshold`; markers are the 4-connected
/// components of low-energy foreground. A foreground component that received
/// no marker is seeded at its lowest-energy pixel so every blob yields at
/// least one instance. After flooding, instances smaller than
/// `min_instance_area` are dropped and the rest renumbered in raster order.
pub fn segment_instances(
    np_prob: &Tensor,
    hv: &Tensor,
    params: &WbisParams,
) -> Result<InstanceLabelMap> {
    params.validate()?;
    let (h, w) = np_prob.plane_dims();
    if hv.plane_dims() != (h, w) {
        return Err(Error::Shape(format!(
            "np_prob {h}x{w} vs hv {:?}",
            hv.dims()
        )));
    }
    let prob = np_prob.plane(0);
    let fg = BinaryMask::new(h, w, prob.iter().map(|&p| p > params.fg_threshold).collect())?;
    if fg.count() == 0 {
        return Ok(InstanceLabelMap::empty(h, w));
    }
    let energy = energy_landscape_with(hv, params.energy)?;
    let e = energy.data();
    let seeds = BinaryMask::new(
        h,
        w,
        fg.bits()
            .iter()
            .zip(e)
            .map(|(&f, &en)| f && en < params.marker_threshold)
            .collect(),
    )?;
    let markers = connected_components(&seeds);
    let mut marker_ids: Vec<u32> = markers.labels().to_vec();
    let mut next = markers.num_instances() as u32 + 1;

    let blobs = connected_components(&fg);
    let mut blob_has_marker = vec![false; blobs.num_instances()];
    let mut blob_argmin: Vec<Option<usize>> = vec![None; blobs.num_instances()];
    for (i, &b) in blobs.labels().iter().enumerate() {
        if b == 0 {
            continue;
        }
        let k = b as usize - 1;
        if marker_ids[i] > 0 {
            blob_has_marker[k] = true;
        }
        match blob_argmin[k] {
            Some(j) if e[j] <= e[i] => {}
            _ => blob_argmin[k] = Some(i),
        }
    }
    for k in 0..blobs.num_instances() {
        if !blob_has_marker[k] {
            if let Some(i) = blob_argmin[k] {
                marker_ids[i] = next;
                next += 1;
            }
        }
    }
    let markers = InstanceLabelMap::compacted(h, w, &marker_ids)?;
    let flooded = watershed(&energy, &markers, &fg)?;

    let areas = flooded.areas();
    let kept: Vec<u32> = flooded
        .labels()
        .iter()
        .map(|&l| {
            if l > 0 && areas[l as usize - 1] >= params.min_instance_area {
                l
            } else {
                0
            }
        })
        .collect();
    InstanceLabelMap::compacted(h, w, &kept)
}
