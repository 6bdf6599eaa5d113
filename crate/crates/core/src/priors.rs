//! Morphological priors: per-instance shape/intensity features, a per-channel
//! Gaussian KDE bank fitted on reference instances, instance scoring, and the
//! reliability mask used to weight prior-driven consistency.

use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{InstanceLabelMap, Tensor};

pub const FEATURE_COUNT: usize = 5;
const PRIORS_MAGIC: &str = "IRCR-PRIORS v1";
pub const FEATURE_NAMES: [&str; FEATURE_COUNT] =
    ["area", "solidity", "circularity", "intensity", "extent"];

/// Shape and intensity descriptors of one instance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    /// Pixel count.
    pub area: f64,
    /// Area over convex hull area.
    pub solidity: f64,
    /// `4 pi area / perimeter^2`, with the perimeter summed over border
    /// pixels weighted by their neighbour configuration. Infinite for
    /// instances too thin to have a measurable perimeter.
    pub circularity: f64,
    /// Mean H-channel value over the instance.
    pub intensity: f64,
    /// Area over bounding rectangle area.
    pub extent: f64,
}

impl FeatureVector {
    pub fn to_array(&self) -> [f64; FEATURE_COUNT] {
        [
            self.area,
            self.solidity,
            self.circularity,
            self.intensity,
            self.extent,
        ]
    }

    pub fn from_array(v: [f64; FEATURE_COUNT]) -> Self {
        Self {
            area: v[0],
            solidity: v[1],
            circularity: v[2],
            intensity: v[3],
            extent: v[4],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PiacConfig {
    /// Likelihood below which an instance is treated as unreliable.
    pub tau: f64,
    /// Weight given to every pixel not covered by an unreliable instance.
    pub weight: f64,
}

impl Default for PiacConfig {
    fn default() -> Self {
        Self {
            tau: 0.35,
            weight: 2.0,
        }
    }
}

impl PiacConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) || !(self.weight > 0.0) {
            return Err(Error::InvalidParam(format!(
                "tau and weight must be positive, got tau={} weight={}",
                self.tau, self.weight
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Default)]
struct InstanceStats {
    area: usize,
    intensity_sum: f64,
    perimeter: f64,
    rmin: usize,
    rmax: usize,
    cmin: usize,
    cmax: usize,
    // per row: (row, leftmost col, rightmost col)
    row_spans: Vec<(usize, usize, usize)>,
}

fn cross(o: (i64, i64), a: (i64, i64), b: (i64, i64)) -> i64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

/// Twice the area of the convex hull of `points` (monotone chain + shoelace).
fn hull_area_doubled(mut points: Vec<(i64, i64)>) -> i64 {
    points.sort_unstable();
    points.dedup();
    if points.len() < 3 {
        return 0;
    }
    let mut lower: Vec<(i64, i64)> = Vec::new();
    for &p in &points {
        while lower.len() >= 2 && cross(lower[lower.len() - 2], lower[lower.len() - 1], p) <= 0 {
            lower.pop();
        }
        lower.push(p);
    }
    let mut upper: Vec<(i64, i64)> = Vec::new();
    for &p in points.iter().rev() {
        while upper.len() >= 2 && cross(upper[upper.len() - 2], upper[upper.len() - 1], p) <= 0 {
            upper.pop();
        }
        upper.push(p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    let hull = lower;
    let mut twice = 0i64;
    for i in 0..hull.len() {
        let (a, b) = (hull[i], hull[(i + 1) % hull.len()]);
        twice += a.0 * b.1 - b.0 * a.1;
    }
    twice.abs()
}

/// Contribution of one border pixel to the perimeter: straight runs count
/// 1, diagonal steps sqrt(2) and corners the mean of the two.
fn border_weight(code: usize) -> f64 {
    match code {
        5 | 7 | 15 | 17 | 25 | 27 => 1.0,
        21 | 33 => std::f64::consts::SQRT_2,
        13 | 23 => (1.0 + std::f64::consts::SQRT_2) / 2.0,
        _ => 0.0,
    }
}

fn collect_stats(labels: &InstanceLabelMap, h_channel: &Tensor) -> Result<Vec<InstanceStats>> {
    let (h, w) = (labels.height(), labels.width());
    if h_channel.plane_dims() != (h, w) {
        return Err(Error::Shape(format!(
            "h_channel {:?} vs labels {h}x{w}",
            h_channel.dims()
        )));
    }
    let hc = h_channel.plane(0);
    let lab = labels.labels();
    let mut border = vec![false; h * w];
    let mut stats: Vec<InstanceStats> = (0..labels.num_instances())
        .map(|_| InstanceStats {
            rmin: usize::MAX,
            cmin: usize::MAX,
            ..Default::default()
        })
        .collect();
    for r in 0..h {
        for c in 0..w {
            let l = lab[r * w + c];
            if l == 0 {
                continue;
            }
            let s = &mut stats[l as usize - 1];
            s.area += 1;
            s.intensity_sum += hc[r * w + c];
            s.rmin = s.rmin.min(r);
            s.rmax = s.rmax.max(r);
            s.cmin = s.cmin.min(c);
            s.cmax = s.cmax.max(c);
            match s.row_spans.last_mut() {
                Some(span) if span.0 == r => span.2 = c,
                _ => s.row_spans.push((r, c, c)),
            }
            let differs = |rr: isize, cc: isize| -> bool {
                rr < 0
                    || cc < 0
                    || rr >= h as isize
                    || cc >= w as isize
                    || lab[rr as usize * w + cc as usize] != l
            };
            let (ri, ci) = (r as isize, c as isize);
            border[r * w + c] = [(ri - 1, ci), (ri + 1, ci), (ri, ci - 1), (ri, ci + 1)]
                .iter()
                .any(|&(rr, cc)| differs(rr, cc));
        }
    }
    // Each border pixel is weighted by the configuration of its border
    // neighbours: 1 + 2 per 4-neighbour + 10 per diagonal neighbour.
    let is_border = |r: isize, c: isize, l: u32| -> bool {
        r >= 0 && c >= 0 && r < h as isize && c < w as isize && {
            let i = r as usize * w + c as usize;
            border[i] && lab[i] == l
        }
    };
    for r in 0..h {
        for c in 0..w {
            let l = lab[r * w + c];
            if l == 0 || !border[r * w + c] {
                continue;
            }
            let (ri, ci) = (r as isize, c as isize);
            let side = [(-1, 0), (1, 0), (0, -1), (0, 1)]
                .iter()
                .filter(|&&(dr, dc)| is_border(ri + dr, ci + dc, l))
                .count();
            let diag = [(-1, -1), (-1, 1), (1, -1), (1, 1)]
                .iter()
                .filter(|&&(dr, dc)| is_border(ri + dr, ci + dc, l))
                .count();
            stats[l as usize - 1].perimeter += border_weight(1 + 2 * side + 10 * diag);
        }
    }
    Ok(stats)
}

fn features_from_stats(s: &InstanceStats) -> FeatureVector {
    let area = s.area as f64;
    let mut corners = Vec::with_capacity(s.row_spans.len() * 4);
    for &(r, c0, c1) in &s.row_spans {
        let (r, c0, c1) = (r as i64, c0 as i64, c1 as i64);
        corners.extend_from_slice(&[(r, c0), (r + 1, c0), (r, c1 + 1), (r + 1, c1 + 1)]);
    }
    let hull = hull_area_doubled(corners) as f64 / 2.0;
    let perimeter = s.perimeter;
    let bbox = ((s.rmax - s.rmin + 1) * (s.cmax - s.cmin + 1)) as f64;
    FeatureVector {
        area,
        solidity: area / hull,
        circularity: 4.0 * PI * area / (perimeter * perimeter),
        intensity: s.intensity_sum / area,
        extent: area / bbox,
    }
}

/// Features of instance `k`.
pub fn extract_features(
    labels: &InstanceLabelMap,
    k: u32,
    h_channel: &Tensor,
) -> Result<FeatureVector> {
    if k == 0 || k as usize > labels.num_instances() {
        return Err(Error::UnknownInstance(k));
    }
    let stats = collect_stats(labels, h_channel)?;
    Ok(features_from_stats(&stats[k as usize - 1]))
}

/// Features of every instance, index `k - 1` for instance `k`.
pub fn extract_all_features(
    labels: &InstanceLabelMap,
    h_channel: &Tensor,
) -> Result<Vec<FeatureVector>> {
    Ok(collect_stats(labels, h_channel)?
        .iter()
        .map(features_from_stats)
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum BandwidthRule {
    /// Silverman's rule on the normalized samples, floored at 1e-3.
    Silverman,
    Fixed(f64),
}

impl std::str::FromStr for BandwidthRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "auto" | "silverman" => Ok(BandwidthRule::Silverman),
            other => other
                .parse::<f64>()
                .ok()
                .filter(|h| *h > 0.0)
                .map(BandwidthRule::Fixed)
                .ok_or_else(|| Error::InvalidParam(format!("bandwidth `{other}`"))),
        }
    }
}

/// One feature channel of the prior: raw samples, their min-max bounds, the
/// samples mapped into `[0, 1]` and the kernel bandwidth in those units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KdeChannel {
    pub raw: Vec<f64>,
    pub lo: f64,
    pub hi: f64,
    pub bandwidth: f64,
    normalized: Vec<f64>,
}

impl KdeChannel {
    pub fn new(raw: Vec<f64>, lo: f64, hi: f64, bandwidth: f64) -> Result<Self> {
        if raw.is_empty() {
            return Err(Error::Empty("kde channel has no samples".into()));
        }
        if !(hi > lo) {
            return Err(Error::InvalidParam(format!("bounds {lo} >= {hi}")));
        }
        if !(bandwidth > 0.0) {
            return Err(Error::InvalidParam(format!("bandwidth {bandwidth}")));
        }
        let normalized = raw.iter().map(|&x| (x - lo) / (hi - lo)).collect();
        Ok(Self {
            raw,
            lo,
            hi,
            bandwidth,
            normalized,
        })
    }

    pub fn normalized(&self) -> &[f64] {
        &self.normalized
    }

    pub fn normalize(&self, x: f64) -> f64 {
        (x - self.lo) / (self.hi - self.lo)
    }

    /// Gaussian KDE at `x` (normalized units).
    pub fn density(&self, x: f64) -> f64 {
        let h = self.bandwidth;
        let norm = 1.0 / ((2.0 * PI).sqrt() * self.normalized.len() as f64 * h);
        let inv = 1.0 / (2.0 * h * h);
        norm * self
            .normalized
            .iter()
            .map(|&s| (-(x - s) * (x - s) * inv).exp())
            .sum::<f64>()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorBank {
    pub channels: Vec<KdeChannel>,
}

impl PriorBank {
    pub fn sample_count(&self) -> usize {
        self.channels.first().map_or(0, |c| c.raw.len())
    }

    /// Writes the text format: an `IRCR-PRIORS v1` header, `N=<count>`, one
    /// `channel=<i> h=<bw> min=<lo> max=<hi>` line per channel, then one CSV
    /// row of raw features per sample.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let n = self.sample_count();
        if self.channels.iter().any(|c| c.raw.len() != n) {
            return Err(Error::Shape("prior channels differ in sample count".into()));
        }
        let mut text = format!("{PRIORS_MAGIC}\nN={n}\n");
        for (i, c) in self.channels.iter().enumerate() {
            text.push_str(&format!(
                "channel={i} h={} min={} max={}\n",
                c.bandwidth, c.lo, c.hi
            ));
        }
        for row in 0..n {
            let cells: Vec<String> = self.channels.iter().map(|c| c.raw[row].to_string()).collect();
            text.push_str(&cells.join(","));
            text.push('\n');
        }
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let bad = |reason: String| Error::Format {
            path: path.to_path_buf(),
            reason,
        };
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(PRIORS_MAGIC) {
            return Err(bad(format!("missing `{PRIORS_MAGIC}` header")));
        }
        let n: usize = lines
            .next()
            .and_then(|l| l.trim().strip_prefix("N="))
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| bad("missing `N=<count>` line".into()))?;
        let mut heads = Vec::with_capacity(FEATURE_COUNT);
        for i in 0..FEATURE_COUNT {
            let line = lines
                .next()
                .ok_or_else(|| bad(format!("missing channel {i} line")))?;
            let mut fields = std::collections::HashMap::new();
            for tok in line.split_whitespace() {
                let (k, v) = tok
                    .split_once('=')
                    .ok_or_else(|| bad(format!("bad token `{tok}`")))?;
                fields.insert(k, v);
            }
            if fields.get("channel").and_then(|v| v.parse::<usize>().ok()) != Some(i) {
                return Err(bad(format!("expected channel {i} in `{line}`")));
            }
            let num = |k: &str| -> Result<f64> {
                fields
                    .get(k)
                    .and_then(|v| v.parse::<f64>().ok())
                    .ok_or_else(|| bad(format!("channel {i}: missing `{k}`")))
            };
            heads.push((num("h")?, num("min")?, num("max")?));
        }
        let mut raw = vec![Vec::with_capacity(n); FEATURE_COUNT];
        for (row, line) in lines.filter(|l| !l.trim().is_empty()).enumerate() {
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != FEATURE_COUNT {
                return Err(bad(format!("sample row {row}: {} fields", cells.len())));
            }
            for (ch, cell) in cells.iter().enumerate() {
                raw[ch].push(
                    cell.trim()
                        .parse::<f64>()
                        .map_err(|e| bad(format!("sample row {row}: {e}")))?,
                );
            }
        }
        if raw[0].len() != n {
            return Err(bad(format!("N={n} but {} sample rows", raw[0].len())));
        }
        let channels = raw
            .into_iter()
            .zip(heads)
            .map(|(r, (h, lo, hi))| KdeChannel::new(r, lo, hi, h))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| bad(e.to_string()))?;
        Ok(PriorBank { channels })
    }
}

/// Fits one KDE per feature channel on min-max normalized samples.
///
/// Samples with a non-finite feature (single pixels and two-pixel bars have
/// infinite circularity) are skipped.
pub fn fit_kde(samples: &[FeatureVector], rule: BandwidthRule) -> Result<PriorBank> {
    let finite: Vec<FeatureVector> = samples
        .iter()
        .filter(|s| s.to_array().iter().all(|v| v.is_finite()))
        .copied()
        .collect();
    if finite.len() < samples.len() {
        log::warn!("skipping {} samples with non-finite features", samples.len() - finite.len());
    }
    let samples = &finite[..];
    if samples.len() < 2 {
        return Err(Error::InvalidParam(format!(
            "need at least 2 samples, got {}",
            samples.len()
        )));
    }
    let n = samples.len() as f64;
    let mut channels = Vec::with_capacity(FEATURE_COUNT);
    for ch in 0..FEATURE_COUNT {
        let raw: Vec<f64> = samples.iter().map(|s| s.to_array()[ch]).collect();
        let lo = raw.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if !(hi > lo) {
            return Err(Error::DegenerateChannel(ch));
        }
        let bandwidth = match rule {
            BandwidthRule::Fixed(h) => h,
            BandwidthRule::Silverman => {
                let norm: Vec<f64> = raw.iter().map(|&x| (x - lo) / (hi - lo)).collect();
                let mean = norm.iter().sum::<f64>() / n;
                let var = norm.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
                (1.06 * var.sqrt() * n.powf(-0.2)).max(1e-3)
            }
        };
        channels.push(KdeChannel::new(raw, lo, hi, bandwidth)?);
    }
    Ok(PriorBank { channels })
}

pub fn density(bank: &PriorBank, channel: usize, x: f64) -> Result<f64> {
    bank.channels
        .get(channel)
        .map(|c| c.density(x))
        .ok_or(Error::ChannelOutOfRange {
            index: channel,
            count: bank.channels.len(),
        })
}

/// Likelihood of `z` being a real nucleus: the mean of the per-channel
/// densities at the normalized feature values. Values outside the bank's
/// range are not clamped, so they land in the kernel tails.
pub fn score_instance(bank: &PriorBank, z: &FeatureVector) -> f64 {
    let values = z.to_array();
    let k = bank.channels.len().min(FEATURE_COUNT);
    if k == 0 {
        return 0.0;
    }
    bank.channels
        .iter()
        .zip(values)
        .map(|(ch, x)| ch.density(ch.normalize(x)))
        .sum::<f64>()
        / k as f64
}

/// Scores every instance of `labels`.
pub fn score_instances(
    bank: &PriorBank,
    labels: &InstanceLabelMap,
    h_channel: &Tensor,
) -> Result<Vec<f64>> {
    Ok(extract_all_features(labels, h_channel)?
        .iter()
        .map(|z| score_instance(bank, z))
        .collect())
}

/// Reliability mask: 0 on instances scoring below `tau`, `weight` on every
/// other pixel, background included.
pub fn piac_mask(labels: &InstanceLabelMap, scores: &[f64], cfg: &PiacConfig) -> Result<Tensor> {
    cfg.validate()?;
    if scores.len() != labels.num_instances() {
        return Err(Error::Shape(format!(
            "{} scores for {} instances",
            scores.len(),
            labels.num_instances()
        )));
    }
    let data = labels
        .labels()
        .iter()
        .map(|&l| {
            if l > 0 && scores[l as usize - 1] < cfg.tau {
                0.0
            } else {
                cfg.weight
            }
        })
        .collect();
    Tensor::new(vec![labels.height(), labels.width()], data)
}
