//! Synthetic nuclei scenes, dataset files and weak/strong augmentation.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{InstanceLabelMap, Tensor};

const MAX_REJECTIONS: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    /// Side length in pixels.
    pub size: usize,
    pub count_range: (usize, usize),
    /// Semi-major axis range.
    pub radius_range: (f64, f64),
    /// Largest allowed overlap between two nuclei, as a fraction of the
    /// smaller one's area.
    pub overlap_fraction: f64,
    pub eccentricity_range: (f64, f64),
    pub intensity_range: (f64, f64),
    pub background: f64,
    /// Relative darkening from nucleus centre to rim.
    pub shading: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            size: 64,
            count_range: (6, 14),
            radius_range: (4.0, 8.0),
            overlap_fraction: 0.2,
            eccentricity_range: (0.0, 0.7),
            intensity_range: (0.5, 0.9),
            background: 0.1,
            shading: 0.3,
            noise_sigma: 0.05,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParam(format!("scene config: {m}")));
        if self.size == 0 || self.size % 4 != 0 {
            return bad("size must be a positive multiple of 4");
        }
        if self.count_range.0 > self.count_range.1 {
            return bad("count range is not ordered");
        }
        let (r0, r1) = self.radius_range;
        if !(r0 > 0.0 && r0 <= r1) || 2.0 * r1 + 1.0 > self.size as f64 {
            return bad("radius range must be ordered, positive and fit the scene");
        }
        if !(0.0..=1.0).contains(&self.overlap_fraction) {
            return bad("overlap fraction outside [0, 1]");
        }
        let (e0, e1) = self.eccentricity_range;
        if !(0.0 <= e0 && e0 <= e1 && e1 < 1.0) {
            return bad("eccentricity range must be ordered within [0, 1)");
        }
        let (i0, i1) = self.intensity_range;
        if !(0.0 <= i0 && i0 <= i1 && i1 <= 1.0) {
            return bad("intensity range must be ordered within [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.background) || !(0.0..=1.0).contains(&self.shading) {
            return bad("background and shading must lie in [0, 1]");
        }
        if !(self.noise_sigma >= 0.0) {
            return bad("noise sigma must be non-negative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub id: usize,
    pub seed: u64,
    pub labeled: bool,
    /// `[1, h, w]` in `[0, 1]`.
    pub image: Tensor,
    pub gt_labels: InstanceLabelMap,
    /// `[2, h, w]` horizontal and vertical centroid offsets in `[-1, 1]`.
    pub gt_hv: Tensor,
    /// Noiseless intensity, `[h, w]`.
    pub h_channel: Tensor,
}

struct Ellipse {
    pixels: Vec<usize>,
    intensity: f64,
    // normalized radius per pixel, for shading
    rho: Vec<f64>,
}

fn rasterize_ellipse(size: usize, cy: f64, cx: f64, a: f64, b: f64, theta: f64) -> (Vec<usize>, Vec<f64>) {
    let (s, c) = theta.sin_cos();
    let r0 = (cy - a).floor().max(0.0) as usize;
    let r1 = ((cy + a).ceil() as usize).min(size - 1);
    let c0 = (cx - a).floor().max(0.0) as usize;
    let c1 = ((cx + a).ceil() as usize).min(size - 1);
    let mut px = Vec::new();
    let mut rho = Vec::new();
    for r in r0..=r1 {
        for q in c0..=c1 {
            let dx = q as f64 - cx;
            let dy = r as f64 - cy;
            let u = (dx * c + dy * s) / a;
            let v = (-dx * s + dy * c) / b;
            let d = u * u + v * v;
            if d <= 1.0 {
                px.push(r * size + q);
                rho.push(d.sqrt());
            }
        }
    }
    (px, rho)
}

/// True when `pixels` (owned by `id` in `owner`) form one 4-connected piece.
fn is_connected(owner: &[u32], size: usize, id: u32, pixels: &[usize]) -> bool {
    let visible: Vec<usize> = pixels.iter().copied().filter(|&p| owner[p] == id).collect();
    let Some(&start) = visible.first() else {
        return false;
    };
    let mut seen = vec![false; owner.len()];
    seen[start] = true;
    let mut stack = vec![start];
    let mut reached = 1;
    while let Some(p) = stack.pop() {
        let (r, c) = (p / size, p % size);
        let mut nb = Vec::with_capacity(4);
        if r > 0 {
            nb.push(p - size);
        }
        if r + 1 < size {
            nb.push(p + size);
        }
        if c > 0 {
            nb.push(p - 1);
        }
        if c + 1 < size {
            nb.push(p + 1);
        }
        for n in nb {
            if !seen[n] && owner[n] == id {
                seen[n] = true;
                reached += 1;
                stack.push(n);
            }
        }
    }
    reached == visible.len()
}

/// Per-instance centroid offsets, each channel scaled by the largest
/// absolute offset inside the instance so values span `[-1, 1]` and have
/// zero mean.
pub fn hv_from_labels(labels: &InstanceLabelMap) -> Tensor {
    let (h, w) = (labels.height(), labels.width());
    let mut hv = Tensor::zeros(&[2, h, w]);
    let n = labels.num_instances();
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (i, &l) in labels.labels().iter().enumerate() {
        if l > 0 {
            members[l as usize - 1].push(i);
        }
    }
    for px in members.iter().filter(|m| !m.is_empty()) {
        let cnt = px.len() as f64;
        let cc = px.iter().map(|&p| (p % w) as f64).sum::<f64>() / cnt;
        let cr = px.iter().map(|&p| (p / w) as f64).sum::<f64>() / cnt;
        let mx = px.iter().map(|&p| ((p % w) as f64 - cc).abs()).fold(0.0, f64::max);
        let my = px.iter().map(|&p| ((p / w) as f64 - cr).abs()).fold(0.0, f64::max);
        for &p in px {
            if mx > 0.0 {
                hv.plane_mut(0)[p] = ((p % w) as f64 - cc) / mx;
            }
            if my > 0.0 {
                hv.plane_mut(1)[p] = ((p / w) as f64 - cr) / my;
            }
        }
    }
    hv
}

/// Places random shaded ellipses with bounded pairwise overlap. Later
/// nuclei are painted over earlier ones; a placement that would split an
/// earlier nucleus into pieces is rejected.
pub fn generate_scene(cfg: &SceneConfig) -> Result<Scene> {
    cfg.validate()?;
    let size = cfg.size;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let target = rng.gen_range(cfg.count_range.0..=cfg.count_range.1);
    let mut owner = vec![0u32; size * size];
    let mut nuclei: Vec<Ellipse> = Vec::new();
    let mut rejections = 0;
    while nuclei.len() < target && rejections < MAX_REJECTIONS {
        let a = rng.gen_range(cfg.radius_range.0..=cfg.radius_range.1);
        let e = rng.gen_range(cfg.eccentricity_range.0..=cfg.eccentricity_range.1);
        let b = a * (1.0 - e * e).sqrt();
        let theta = rng.gen_range(0.0..std::f64::consts::PI);
        let cy = rng.gen_range(a..=size as f64 - 1.0 - a);
        let cx = rng.gen_range(a..=size as f64 - 1.0 - a);
        let intensity = rng.gen_range(cfg.intensity_range.0..=cfg.intensity_range.1);
        let (pixels, rho) = rasterize_ellipse(size, cy, cx, a, b, theta);

        let mut ok = !pixels.is_empty();
        let mut touched = Vec::new();
        if ok {
            let mut hits = vec![0usize; nuclei.len()];
            for &p in &pixels {
                if owner[p] > 0 {
                    hits[owner[p] as usize - 1] += 1;
                }
            }
            // overlap is measured on full footprints, not the visible parts
            for (k, other) in nuclei.iter().enumerate() {
                let inter = other.pixels.iter().filter(|p| pixels.binary_search(p).is_ok()).count();
                if inter == 0 {
                    continue;
                }
                let smaller = other.pixels.len().min(pixels.len()) as f64;
                if inter as f64 > cfg.overlap_fraction * smaller {
                    ok = false;
                    break;
                }
                if hits[k] > 0 {
                    touched.push(k);
                }
            }
        }
        if ok && !touched.is_empty() {
            let mut trial = owner.clone();
            let id = nuclei.len() as u32 + 1;
            pixels.iter().for_each(|&p| trial[p] = id);
            ok = touched
                .iter()
                .all(|&k| is_connected(&trial, size, k as u32 + 1, &nuclei[k].pixels));
        }
        if !ok {
            rejections += 1;
            continue;
        }
        let id = nuclei.len() as u32 + 1;
        pixels.iter().for_each(|&p| owner[p] = id);
        nuclei.push(Ellipse { pixels, intensity, rho });
    }
    if nuclei.len() < cfg.count_range.0 {
        return Err(Error::SceneTooCrowded {
            placed: nuclei.len(),
            required: cfg.count_range.0,
        });
    }

    let mut clean = vec![cfg.background; size * size];
    for (k, nuc) in nuclei.iter().enumerate() {
        for (&p, &rho) in nuc.pixels.iter().zip(&nuc.rho) {
            if owner[p] == k as u32 + 1 {
                clean[p] = nuc.intensity * (1.0 - cfg.shading * rho * rho);
            }
        }
    }
    let noise = Normal::new(0.0, cfg.noise_sigma.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::InvalidParam(e.to_string()))?;
    let image: Vec<f64> = clean
        .iter()
        .map(|&v| {
            let n = if cfg.noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            (v + n).clamp(0.0, 1.0)
        })
        .collect();
    let gt_labels = InstanceLabelMap::compacted(size, size, &owner)?;
    Ok(Scene {
        id: 0,
        seed: cfg.seed,
        labeled: false,
        image: Tensor::new(vec![1, size, size], image)?,
        gt_hv: hv_from_labels(&gt_labels),
        gt_labels,
        h_channel: Tensor::new(vec![size, size], clean)?,
    })
}

/// Seed of scene `index` in a dataset generated from `base_seed`. Distinct
/// base seeds give disjoint ranges for up to 100 000 scenes.
pub fn scene_seed(base_seed: u64, index: usize) -> u64 {
    base_seed.wrapping_mul(100_000).wrapping_add(index as u64)
}

pub fn generate_dataset(base: &SceneConfig, n_scenes: usize) -> Result<Vec<Scene>> {
    (0..n_scenes)
        .map(|i| {
            let cfg = SceneConfig {
                seed: scene_seed(base.seed, i),
                ..*base
            };
            let mut s = generate_scene(&cfg)?;
            s.id = i;
            Ok(s)
        })
        .collect()
}

/// One of the eight square symmetries: an optional horizontal flip followed
/// by `rot` counter-clockwise quarter turns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct GeoTransform {
    pub flip: bool,
    pub rot: u8,
}

impl GeoTransform {
    pub const IDENTITY: GeoTransform = GeoTransform { flip: false, rot: 0 };

    pub fn all() -> impl Iterator<Item = GeoTransform> {
        (0..8).map(|i| GeoTransform {
            flip: i >= 4,
            rot: (i % 4) as u8,
        })
    }

    pub fn inverse(self) -> GeoTransform {
        if self.flip {
            self
        } else {
            GeoTransform {
                flip: false,
                rot: (4 - self.rot % 4) % 4,
            }
        }
    }

    /// Source index for each output pixel, and the output plane dims.
    fn index_map(self, h: usize, w: usize) -> (Vec<usize>, usize, usize) {
        let mut idx: Vec<usize> = (0..h * w).collect();
        let (mut ch, mut cw) = (h, w);
        if self.flip {
            idx = (0..h * w).map(|p| (p / w) * w + (w - 1 - p % w)).collect();
        }
        for _ in 0..self.rot % 4 {
            // out[r][c] = in[c][cw - 1 - r], output dims (cw, ch)
            let (nh, nw) = (cw, ch);
            let mut next = vec![0; nh * nw];
            for r in 0..nh {
                for c in 0..nw {
                    next[r * nw + c] = idx[c * cw + (cw - 1 - r)];
                }
            }
            idx = next;
            ch = nh;
            cw = nw;
        }
        (idx, ch, cw)
    }

    /// Moves every plane of a `[h, w]` or `[C, h, w]` tensor.
    pub fn apply_planes(self, t: &Tensor) -> Tensor {
        let (h, w) = t.plane_dims();
        let (idx, nh, nw) = self.index_map(h, w);
        let mut data = Vec::with_capacity(t.len());
        for k in 0..t.channels() {
            let plane = t.plane(k);
            data.extend(idx.iter().map(|&i| plane[i]));
        }
        let dims = if t.dims().len() == 2 {
            vec![nh, nw]
        } else {
            vec![t.channels(), nh, nw]
        };
        Tensor::new(dims, data).expect("permutation keeps length")
    }

    /// Moves a `[2, h, w]` offset field and rotates the offset vectors with it.
    pub fn apply_hv(self, hv: &Tensor) -> Tensor {
        let moved = self.apply_planes(hv);
        let (h, w) = moved.plane_dims();
        let n = h * w;
        let mut dx = moved.plane(0).to_vec();
        let mut dy = moved.plane(1).to_vec();
        if self.flip {
            dx.iter_mut().for_each(|v| *v = -*v);
        }
        for _ in 0..self.rot % 4 {
            // a counter-clockwise quarter turn maps (dx, dy) to (dy, -dx)
            let ndx = dy.clone();
            let ndy: Vec<f64> = dx.iter().map(|v| -v).collect();
            dx = ndx;
            dy = ndy;
        }
        let mut data = Vec::with_capacity(2 * n);
        data.extend(dx);
        data.extend(dy);
        Tensor::new(vec![2, h, w], data).expect("hv dims")
    }

    pub fn apply_labels(self, labels: &InstanceLabelMap) -> InstanceLabelMap {
        let (h, w) = (labels.height(), labels.width());
        let (idx, nh, nw) = self.index_map(h, w);
        let moved: Vec<u32> = idx.iter().map(|&i| labels.labels()[i]).collect();
        InstanceLabelMap::compacted(nh, nw, &moved).expect("permuted labels stay valid")
    }

    /// Moves a consistency feature stack `[np0, np1, hv_h, hv_v]`.
    pub fn apply_features(self, f: &Tensor) -> Result<Tensor> {
        if f.channels() != 4 || f.dims().len() != 3 {
            return Err(Error::Shape(format!("expected [4, h, w] features, got {:?}", f.dims())));
        }
        let np = Tensor::stack(&[&f.channel(0)?, &f.channel(1)?])?;
        let hv = Tensor::stack(&[&f.channel(2)?, &f.channel(3)?])?;
        let np = self.apply_planes(&np);
        let hv = self.apply_hv(&hv);
        Tensor::stack(&[&np.channel(0)?, &np.channel(1)?, &hv.channel(0)?, &hv.channel(1)?])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Augmented {
    pub scene: Scene,
    /// Geometric transform from the source frame to the augmented frame.
    pub transform: GeoTransform,
}

fn draw_transform(rng: &mut ChaCha8Rng) -> GeoTransform {
    let rot = rng.gen_range(0..4u8);
    let flip = rng.gen_bool(0.5);
    GeoTransform { flip, rot }
}

pub fn apply_transform(scene: &Scene, t: GeoTransform) -> Scene {
    Scene {
        image: t.apply_planes(&scene.image),
        gt_labels: t.apply_labels(&scene.gt_labels),
        gt_hv: t.apply_hv(&scene.gt_hv),
        h_channel: t.apply_planes(&scene.h_channel),
        ..scene.clone()
    }
}

/// Random flip and quarter turn.
pub fn weak_augment(scene: &Scene, seed: u64) -> Augmented {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let transform = draw_transform(&mut rng);
    Augmented {
        scene: apply_transform(scene, transform),
        transform,
    }
}

/// The weak geometric draw for the same seed, then brightness, contrast and
/// Gaussian noise on the image only.
pub fn strong_augment(scene: &Scene, seed: u64) -> Augmented {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let transform = draw_transform(&mut rng);
    let mut out = apply_transform(scene, transform);
    let brightness = rng.gen_range(-0.1..=0.1);
    let contrast = rng.gen_range(0.8..=1.2);
    let sigma: f64 = rng.gen_range(0.0..=0.1);
    let mean = out.image.data().iter().sum::<f64>() / out.image.len() as f64;
    let noise = Normal::new(0.0, sigma.max(f64::MIN_POSITIVE)).expect("finite sigma");
    for v in out.image.data_mut() {
        let n = noise.sample(&mut rng);
        *v = ((*v - mean) * contrast + mean + brightness + n).clamp(0.0, 1.0);
    }
    Augmented {
        scene: out,
        transform,
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestRow {
    id: usize,
    labeled: u8,
    seed: u64,
}

/// Writes `manifest.csv` plus `img_`, `lbl_`, `hv_` and `hch_` tensor files
/// per scene.
pub fn save_dataset(dir: impl AsRef<Path>, scenes: &[Scene]) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join("manifest.csv");
    let csv_err = |e: csv::Error| Error::Format {
        path: path.clone(),
        reason: e.to_string(),
    };
    let mut wr = csv::Writer::from_path(&path).map_err(csv_err)?;
    if scenes.is_empty() {
        wr.write_record(["id", "labeled", "seed"]).map_err(csv_err)?;
    }
    for s in scenes {
        wr.serialize(ManifestRow {
            id: s.id,
            labeled: u8::from(s.labeled),
            seed: s.seed,
        })
        .map_err(csv_err)?;
        s.image.save(dir.join(format!("img_{}.ircr", s.id)))?;
        s.gt_labels.save(dir.join(format!("lbl_{}.ircr", s.id)))?;
        s.gt_hv.save(dir.join(format!("hv_{}.ircr", s.id)))?;
        s.h_channel.save(dir.join(format!("hch_{}.ircr", s.id)))?;
    }
    wr.flush().map_err(|e| Error::io(&path, e))
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Vec<Scene>> {
    let dir = dir.as_ref();
    let path = dir.join("manifest.csv");
    let csv_err = |e: csv::Error| Error::Format {
        path: path.clone(),
        reason: e.to_string(),
    };
    let mut rd = csv::Reader::from_path(&path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(&path, io),
        other => Error::Format {
            path: path.clone(),
            reason: format!("{other:?}"),
        },
    })?;
    let mut scenes = Vec::new();
    for row in rd.deserialize::<ManifestRow>() {
        let row = row.map_err(csv_err)?;
        let id = row.id;
        scenes.push(Scene {
            id,
            seed: row.seed,
            labeled: row.labeled != 0,
            image: Tensor::load(dir.join(format!("img_{id}.ircr")))?,
            gt_labels: InstanceLabelMap::load(dir.join(format!("lbl_{id}.ircr")))?,
            gt_hv: Tensor::load(dir.join(format!("hv_{id}.ircr")))?,
            h_channel: Tensor::load(dir.join(format!("hch_{id}.ircr")))?,
        });
    }
    Ok(scenes)
}

/// Shuffled split with `max(1, round(ratio * n))` labeled scenes. Both parts
/// come back sorted by id with their `labeled` flags set.
pub fn split_labeled(scenes: &[Scene], ratio: f64, seed: u64) -> Result<(Vec<Scene>, Vec<Scene>)> {
    if scenes.is_empty() {
        return Err(Error::Empty("no scenes to split".into()));
    }
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::InvalidParam(format!("labeled ratio {ratio} not in (0, 1]")));
    }
    let n = scenes.len();
    let k = ((ratio * n as f64).round() as usize).clamp(1, n);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut labeled: Vec<Scene> = order[..k].iter().map(|&i| scenes[i].clone()).collect();
    let mut unlabeled: Vec<Scene> = order[k..].iter().map(|&i| scenes[i].clone()).collect();
    labeled.iter_mut().for_each(|s| s.labeled = true);
    unlabeled.iter_mut().for_each(|s| s.labeled = false);
    labeled.sort_by_key(|s| s.id);
    unlabeled.sort_by_key(|s| s.id);
    Ok((labeled, unlabeled))
}
