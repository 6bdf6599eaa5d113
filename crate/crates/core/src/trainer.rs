//! Mean-Teacher training loop, run configuration and evaluation.
//!
//! Each optimizer step consumes one labeled and one unlabeled batch. The
//! labeled batch feeds the supervised stack. The unlabeled batch goes
//! through the teacher (weak view) and the student (strong view). Both
//! outputs are warped back to the canonical frame and handed to the selected
//! [`ConsistencyStrategy`] together with the instance cache left by the
//! previous visit of each scene. After the Adam and EMA updates, the cache
//! is refreshed from this step's outputs.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use ini::Ini;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::consistency::{
    build_cache, CacheSettings, ConsistencyInput, ConsistencyStrategy, ConsistencyWeights, InstanceCache,
    StrategyRegistry,
};
use crate::data::{save_dataset, split_labeled, strong_augment, weak_augment, Scene};
use crate::error::{Error, Result};
use crate::losses::supervised_loss;
use crate::metrics::{evaluate_maps, MetricReport, DEFAULT_IOU_THRESHOLD};
use crate::model::{
    adam_step, backward, ema_update, forward, predict, AdamConfig, AdamState, Checkpoint, EmaConfig, ModelConfig,
    ModelParams,
};
use crate::priors::{PiacConfig, PriorBank};
use crate::raster::Tensor;
use crate::wbis::{segment_instances, EnergyKind, WbisParams};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// `(epoch, factor)` milestones: from `epoch` on the rate is
    /// `lr * factor`. `None` means a single drop to 10% at two thirds of
    /// the run.
    pub lr_decay: Option<Vec<(usize, f64)>>,
    /// Re-split the dataset with this ratio; `None` keeps the stored flags.
    pub labeled_ratio: Option<f64>,
    pub ema: EmaConfig,
    pub weights: ConsistencyWeights,
    pub piac: PiacConfig,
    pub wbis: WbisParams,
    pub r_factor: f64,
    pub boundary_radius: usize,
    /// Length of the linear consistency ramp; `None` means 10% of the epochs.
    pub consistency_warmup_epochs: Option<f64>,
    pub seed: u64,
    /// Registry name of the consistency strategy.
    pub consistency: String,
    pub model: ModelConfig,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 4,
            lr: 1e-4,
            lr_decay: None,
            labeled_ratio: None,
            ema: EmaConfig::default(),
            weights: ConsistencyWeights::default(),
            piac: PiacConfig::default(),
            wbis: WbisParams::default(),
            r_factor: crate::matching::DEFAULT_R_FACTOR,
            boundary_radius: 1,
            consistency_warmup_epochs: None,
            seed: 0,
            consistency: "ircr".into(),
            model: ModelConfig::default(),
            adam: AdamConfig::default(),
        }
    }
}

fn parse<T: std::str::FromStr>(section: &str, key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("[{section}] {key}: cannot parse `{value}`")))
}

fn parse_decay(value: &str) -> Result<Vec<(usize, f64)>> {
    let value = value.trim();
    if value.is_empty() || value == "none" {
        return Ok(Vec::new());
    }
    value
        .split(',')
        .map(|item| {
            let (e, f) = item
                .split_once(':')
                .ok_or_else(|| Error::Config(format!("[train] lr_decay: expected epoch:factor, got `{item}`")))?;
            Ok((parse("train", "lr_decay", e)?, parse("train", "lr_decay", f)?))
        })
        .collect()
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if let Some(r) = self.labeled_ratio {
            if !(r > 0.0 && r <= 1.0) {
                return bad(format!("labeled_ratio must lie in (0, 1], got {r}"));
            }
        }
        if let Some(d) = &self.lr_decay {
            if d.iter().any(|&(_, f)| !(f > 0.0)) {
                return bad("lr_decay factors must be positive".into());
            }
        }
        if let Some(w) = self.consistency_warmup_epochs {
            if !(w >= 0.0) {
                return bad(format!("warmup_epochs must be >= 0, got {w}"));
            }
        }
        if !(self.r_factor > 0.0) {
            return bad(format!("r_factor must be positive, got {}", self.r_factor));
        }
        self.ema.validate()?;
        self.weights.validate()?;
        self.piac.validate()?;
        self.wbis.validate()?;
        self.model.validate()
    }

    /// Milestones in effect, sorted by epoch.
    pub fn decay_schedule(&self) -> Vec<(usize, f64)> {
        let mut d = self
            .lr_decay
            .clone()
            .unwrap_or_else(|| vec![((self.epochs as f64 * 2.0 / 3.0).round() as usize, 0.1)]);
        d.sort_by_key(|&(e, _)| e);
        d
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let factor = self
            .decay_schedule()
            .iter()
            .filter(|&&(e, _)| e <= epoch)
            .last()
            .map_or(1.0, |&(_, f)| f);
        self.lr * factor
    }

    pub fn warmup_epochs(&self) -> f64 {
        self.consistency_warmup_epochs.unwrap_or(0.1 * self.epochs as f64)
    }

    /// Reads `[train]`, `[data]`, `[wbis]`, `[piac]` and `[match]` sections
    /// over the defaults. Unknown sections or keys are errors.
    pub fn from_ini_str(text: &str) -> Result<Self> {
        let ini = Ini::load_from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let mut c = TrainConfig::default();
        for (section, props) in ini.iter() {
            let Some(section) = section else {
                if props.iter().next().is_some() {
                    return Err(Error::Config("keys outside of a section".into()));
                }
                continue;
            };
            for (key, value) in props.iter() {
                let s = section;
                match (s, key) {
                    ("train", "epochs") => c.epochs = parse(s, key, value)?,
                    ("train", "batch_size") => c.batch_size = parse(s, key, value)?,
                    ("train", "lr") => c.lr = parse(s, key, value)?,
                    ("train", "lr_decay") => c.lr_decay = Some(parse_decay(value)?),
                    ("train", "seed") => c.seed = parse(s, key, value)?,
                    ("train", "consistency") => c.consistency = value.trim().to_string(),
                    ("train", "warmup_epochs") => c.consistency_warmup_epochs = Some(parse(s, key, value)?),
                    ("train", "ema_alpha") => c.ema.alpha = parse(s, key, value)?,
                    ("train", "width") => c.model.width = parse(s, key, value)?,
                    ("train", "beta") => c.weights.losses.beta = parse(s, key, value)?,
                    ("train", "gamma1") => c.weights.losses.gamma1 = parse(s, key, value)?,
                    ("train", "gamma2") => c.weights.losses.gamma2 = parse(s, key, value)?,
                    ("train", "mse_weight") => c.weights.mse = parse(s, key, value)?,
                    ("data", "labeled_ratio") => c.labeled_ratio = Some(parse(s, key, value)?),
                    ("wbis", "fg_threshold") => c.wbis.fg_threshold = parse(s, key, value)?,
                    ("wbis", "marker_threshold") => c.wbis.marker_threshold = parse(s, key, value)?,
                    ("wbis", "min_instance_area") => c.wbis.min_instance_area = parse(s, key, value)?,
                    ("wbis", "energy") => c.wbis.energy = parse::<EnergyKind>(s, key, value)?,
                    ("piac", "tau") => c.piac.tau = parse(s, key, value)?,
                    ("piac", "weight") => c.piac.weight = parse(s, key, value)?,
                    ("match", "r_factor") => c.r_factor = parse(s, key, value)?,
                    ("match", "boundary_radius") => c.boundary_radius = parse(s, key, value)?,
                    _ => return Err(Error::Config(format!("unknown key `{key}` in [{s}]"))),
                }
            }
        }
        c.validate()?;
        Ok(c)
    }

    pub fn from_ini_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_ini_str(&text)
    }

    /// The full configuration in the format read by [`Self::from_ini_str`].
    pub fn to_ini_string(&self) -> String {
        let decay: Vec<String> = self.decay_schedule().iter().map(|(e, f)| format!("{e}:{f}")).collect();
        let decay = if decay.is_empty() { "none".to_string() } else { decay.join(",") };
        let energy = match self.wbis.energy {
            EnergyKind::Magnitude => "magnitude",
            EnergyKind::Signed => "signed",
        };
        let mut s = String::new();
        s.push_str("[train]\n");
        s.push_str(&format!("epochs = {}\n", self.epochs));
        s.push_str(&format!("batch_size = {}\n", self.batch_size));
        s.push_str(&format!("lr = {}\n", self.lr));
        s.push_str(&format!("lr_decay = {decay}\n"));
        s.push_str(&format!("seed = {}\n", self.seed));
        s.push_str(&format!("consistency = {}\n", self.consistency));
        s.push_str(&format!("warmup_epochs = {}\n", self.warmup_epochs()));
        s.push_str(&format!("ema_alpha = {}\n", self.ema.alpha));
        s.push_str(&format!("width = {}\n", self.model.width));
        s.push_str(&format!("beta = {}\n", self.weights.losses.beta));
        s.push_str(&format!("gamma1 = {}\n", self.weights.losses.gamma1));
        s.push_str(&format!("gamma2 = {}\n", self.weights.losses.gamma2));
        s.push_str(&format!("mse_weight = {}\n", self.weights.mse));
        if let Some(r) = self.labeled_ratio {
            s.push_str(&format!("\n[data]\nlabeled_ratio = {r}\n"));
        }
        s.push_str("\n[wbis]\n");
        s.push_str(&format!("fg_threshold = {}\n", self.wbis.fg_threshold));
        s.push_str(&format!("marker_threshold = {}\n", self.wbis.marker_threshold));
        s.push_str(&format!("min_instance_area = {}\n", self.wbis.min_instance_area));
        s.push_str(&format!("energy = {energy}\n"));
        s.push_str("\n[piac]\n");
        s.push_str(&format!("tau = {}\n", self.piac.tau));
        s.push_str(&format!("weight = {}\n", self.piac.weight));
        s.push_str("\n[match]\n");
        s.push_str(&format!("r_factor = {}\n", self.r_factor));
        s.push_str(&format!("boundary_radius = {}\n", self.boundary_radius));
        s
    }
}

/// One row of the per-step run log. Loss columns are batch means; the
/// consistency columns are unweighted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLogRow {
    pub step: u64,
    #[serde(rename = "L_sup")]
    pub sup: f64,
    #[serde(rename = "L_dice")]
    pub dice: f64,
    #[serde(rename = "L_ce")]
    pub ce: f64,
    #[serde(rename = "L_mse")]
    pub mse: f64,
    #[serde(rename = "L_msge")]
    pub msge: f64,
    #[serde(rename = "L_miac")]
    pub miac: f64,
    #[serde(rename = "L_piac")]
    pub piac: f64,
    /// Supervised plus ramped, weighted consistency.
    #[serde(rename = "L_total")]
    pub total: f64,
    pub matched_pairs: usize,
    pub rejected_instances: usize,
    pub lr: f64,
}

pub fn write_run_log(path: impl AsRef<Path>, rows: &[RunLogRow]) -> Result<()> {
    let path = path.as_ref();
    let csv_err = |e: csv::Error| Error::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    };
    let mut wr = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in rows {
        wr.serialize(r).map_err(csv_err)?;
    }
    wr.flush().map_err(|e| Error::io(path, e))
}

pub fn read_run_log(path: impl AsRef<Path>) -> Result<Vec<RunLogRow>> {
    let path = path.as_ref();
    let csv_err = |e: csv::Error| Error::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    };
    let mut rd = csv::Reader::from_path(path).map_err(csv_err)?;
    rd.deserialize().map(|r| r.map_err(csv_err)).collect()
}

/// Parameters, optimizer state and the per-scene instance cache.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub student: ModelParams,
    pub teacher: ModelParams,
    pub adam: AdamState,
    pub cache: HashMap<usize, InstanceCache>,
    /// Index of the next step.
    pub step: u64,
}

impl TrainState {
    pub fn new(student: ModelParams) -> Self {
        Self {
            teacher: student.clone(),
            adam: AdamState::new(&student),
            student,
            cache: HashMap::new(),
            step: 0,
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            student: self.student.clone(),
            teacher: self.teacher.clone(),
            adam: self.adam.clone(),
        }
    }
}

/// Student gradient for one step before any parameter update.
#[derive(Debug, Clone)]
pub struct StepGradients {
    pub grads: ModelParams,
    pub row: RunLogRow,
    /// Cache entries built from this step's outputs, keyed by scene id.
    pub refreshed: Vec<(usize, InstanceCache)>,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub checkpoint: Checkpoint,
    pub log: Vec<RunLogRow>,
}

/// Deterministic per-purpose seed from a list of integers.
pub fn derive_seed(parts: &[u64]) -> u64 {
    fn splitmix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    parts.iter().fold(0x1234_5678_9ABC_DEF0, |acc, &p| splitmix(acc ^ splitmix(p)))
}

const STREAM_LABELED: u64 = 1;
const STREAM_UNLABELED: u64 = 2;
const VIEW_TEACHER: u64 = 3;
const VIEW_STUDENT: u64 = 4;

fn check_finite(step: u64, what: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            step: step as usize,
            detail: format!("{what} = {v}"),
        })
    }
}

fn split_heads(grad: &Tensor) -> Result<(Tensor, Tensor)> {
    Ok((
        Tensor::stack(&[&grad.channel(0)?, &grad.channel(1)?])?,
        Tensor::stack(&[&grad.channel(2)?, &grad.channel(3)?])?,
    ))
}

pub struct Trainer<'a> {
    config: TrainConfig,
    strategy: Arc<dyn ConsistencyStrategy>,
    bank: Option<&'a PriorBank>,
    dump_dir: Option<PathBuf>,
}

impl<'a> Trainer<'a> {
    pub fn new(config: TrainConfig, registry: &StrategyRegistry, bank: Option<&'a PriorBank>) -> Result<Self> {
        config.validate()?;
        let strategy = registry.get(&config.consistency)?;
        if strategy.needs_priors() && bank.is_none() {
            return Err(Error::Config(format!(
                "strategy `{}` needs a prior bank",
                strategy.name()
            )));
        }
        Ok(Self {
            config,
            strategy,
            bank,
            dump_dir: None,
        })
    }

    /// Where to write the offending batch if a loss turns non-finite.
    pub fn with_dump_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.dump_dir = Some(dir.into());
        self
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn strategy(&self) -> &dyn ConsistencyStrategy {
        self.strategy.as_ref()
    }

    pub fn init_state(&self) -> Result<TrainState> {
        Ok(TrainState::new(ModelParams::init(self.config.model, self.config.seed)?))
    }

    /// Labeled and unlabeled parts of `scenes`, re-split when the config
    /// carries a ratio.
    pub fn split(&self, scenes: &[Scene]) -> Result<(Vec<Scene>, Vec<Scene>)> {
        if scenes.is_empty() {
            return Err(Error::NoLabeledScenes);
        }
        let (lab, unl) = match self.config.labeled_ratio {
            Some(r) => split_labeled(scenes, r, self.config.seed)?,
            None => scenes.iter().cloned().partition(|s| s.labeled),
        };
        if lab.is_empty() {
            return Err(Error::NoLabeledScenes);
        }
        Ok((lab, unl))
    }

    /// Optimizer steps per epoch: enough batches to cover the larger stream.
    pub fn steps_per_epoch(&self, n_labeled: usize, n_unlabeled: usize) -> usize {
        n_labeled.max(n_unlabeled).div_ceil(self.config.batch_size)
    }

    /// Linear consistency ramp at global step `step`.
    pub fn ramp(&self, step: u64, steps_per_epoch: usize) -> f64 {
        let span = self.config.warmup_epochs() * steps_per_epoch as f64;
        if span <= 0.0 {
            1.0
        } else {
            (step as f64 / span).min(1.0)
        }
    }

    /// Gradient of the batch loss w.r.t. the student at the current state.
    /// Nothing in `state` changes.
    pub fn gradients(
        &self,
        state: &TrainState,
        labeled: &[&Scene],
        unlabeled: &[&Scene],
        ramp: f64,
    ) -> Result<StepGradients> {
        let cfg = &self.config;
        let k = state.step;
        let mut grads = state.student.zeros_like();
        let mut row = RunLogRow {
            step: k,
            sup: 0.0,
            dice: 0.0,
            ce: 0.0,
            mse: 0.0,
            msge: 0.0,
            miac: 0.0,
            piac: 0.0,
            total: 0.0,
            matched_pairs: 0,
            rejected_instances: 0,
            lr: 0.0,
        };
        if labeled.is_empty() {
            return Err(Error::NoLabeledScenes);
        }
        let nl = labeled.len() as f64;
        for scene in labeled {
            let view = weak_augment(scene, derive_seed(&[cfg.seed, STREAM_LABELED, scene.seed, k]));
            let out = forward(&state.student, &view.scene.image)?;
            let fg = view.scene.gt_labels.foreground();
            let sl = supervised_loss(&out.np_probs, &out.hv, &fg, &view.scene.gt_hv)?;
            check_finite(k, &format!("supervised loss of scene {}", scene.id), sl.total)?;
            let g = backward(
                &state.student,
                &out,
                &sl.grad_np.map(|v| v / nl),
                &sl.grad_hv.map(|v| v / nl),
            )?;
            grads.add_assign(&g)?;
            row.sup += sl.total / nl;
            row.dice += sl.dice / nl;
            row.ce += sl.ce / nl;
            row.mse += sl.mse / nl;
            row.msge += sl.msge / nl;
        }

        let mut refreshed = Vec::new();
        let mut consistency = 0.0;
        if self.strategy.uses_unlabeled() && !unlabeled.is_empty() {
            let nu = unlabeled.len() as f64;
            let settings = CacheSettings {
                wbis: &cfg.wbis,
                r_factor: cfg.r_factor,
                boundary_radius: cfg.boundary_radius,
                piac: &cfg.piac,
                bank: self.bank,
            };
            for scene in unlabeled {
                let weak = weak_augment(scene, derive_seed(&[cfg.seed, VIEW_TEACHER, scene.seed, k]));
                let strong = strong_augment(scene, derive_seed(&[cfg.seed, VIEW_STUDENT, scene.seed, k]));
                let t_out = predict(&state.teacher, &weak.scene.image)?;
                let s_out = forward(&state.student, &strong.scene.image)?;
                let ft = weak.transform.inverse().apply_features(&t_out.features())?;
                let fs = strong.transform.inverse().apply_features(&s_out.features())?;
                let cached = state.cache.get(&scene.id);
                if let Some(c) = cached {
                    if c.step >= k {
                        return Err(Error::Config(format!(
                            "cache entry for scene {} stamped {} read at step {k}",
                            scene.id, c.step
                        )));
                    }
                }
                let terms = self.strategy.loss(&ConsistencyInput {
                    student: &fs,
                    teacher: &ft,
                    cache: cached,
                    weights: &cfg.weights,
                })?;
                check_finite(k, &format!("consistency loss of scene {}", scene.id), terms.total)?;
                // the warp is a signed permutation, so its adjoint is the forward transform
                let scale = ramp / nu;
                let grad = strong.transform.apply_features(&terms.grad.map(|v| v * scale))?;
                let (g_np, g_hv) = split_heads(&grad)?;
                grads.add_assign(&backward(&state.student, &s_out, &g_np, &g_hv)?)?;
                row.miac += terms.miac / nu;
                row.piac += terms.piac / nu;
                row.matched_pairs += terms.matched_pairs;
                row.rejected_instances += terms.rejected_instances;
                consistency += terms.total / nu;
                if self.strategy.needs_instances() {
                    refreshed.push((scene.id, build_cache(k, &ft, &fs, &scene.h_channel, &settings)?));
                }
            }
        }
        row.total = row.sup + ramp * consistency;
        check_finite(k, "total loss", row.total)?;
        if !grads.is_finite() {
            return Err(Error::NonFinite {
                step: k as usize,
                detail: "student gradient".into(),
            });
        }
        Ok(StepGradients { grads, row, refreshed })
    }

    /// Applies precomputed gradients: Adam on the student, EMA on the
    /// teacher, then the cache refresh.
    pub fn apply(&self, state: &mut TrainState, step: StepGradients, lr: f64) -> Result<RunLogRow> {
        adam_step(&mut state.student, &step.grads, lr, &self.config.adam, &mut state.adam)?;
        ema_update(&mut state.teacher, &state.student, &self.config.ema)?;
        for (id, entry) in step.refreshed {
            state.cache.insert(id, entry);
        }
        state.step += 1;
        Ok(RunLogRow { lr, ..step.row })
    }

    /// One full optimizer step.
    pub fn step(
        &self,
        state: &mut TrainState,
        labeled: &[&Scene],
        unlabeled: &[&Scene],
        lr: f64,
        ramp: f64,
    ) -> Result<RunLogRow> {
        match self.gradients(state, labeled, unlabeled, ramp) {
            Ok(g) => self.apply(state, g, lr),
            Err(e @ Error::NonFinite { .. }) => {
                self.dump_batch(&e, labeled, unlabeled);
                Err(e)
            }
            Err(e) => Err(e),
        }
    }

    fn dump_batch(&self, err: &Error, labeled: &[&Scene], unlabeled: &[&Scene]) {
        let Some(dir) = &self.dump_dir else { return };
        let scenes: Vec<Scene> = labeled.iter().chain(unlabeled).map(|s| (*s).clone()).collect();
        let report = serde_json::json!({
            "error": err.to_string(),
            "labeled": labeled.iter().map(|s| s.id).collect::<Vec<_>>(),
            "unlabeled": unlabeled.iter().map(|s| s.id).collect::<Vec<_>>(),
        });
        let written = save_dataset(dir.join("batch"), &scenes).and_then(|_| {
            let p = dir.join("nonfinite.json");
            fs::write(&p, report.to_string()).map_err(|e| Error::io(&p, e))
        });
        match written {
            Ok(()) => log::error!("offending batch written to {}", dir.display()),
            Err(e) => log::error!("could not dump offending batch: {e}"),
        }
    }

    /// Full run over `scenes`.
    pub fn run(&self, scenes: &[Scene]) -> Result<TrainOutput> {
        let cfg = &self.config;
        let (labeled, unlabeled) = self.split(scenes)?;
        let spe = self.steps_per_epoch(labeled.len(), unlabeled.len());
        let b = cfg.batch_size;
        log::info!(
            "training `{}`: {} labeled, {} unlabeled, {} epochs x {} steps",
            self.strategy.name(),
            labeled.len(),
            unlabeled.len(),
            cfg.epochs,
            spe
        );
        let mut state = self.init_state()?;
        let mut log_rows = Vec::with_capacity(cfg.epochs * spe);
        for epoch in 0..cfg.epochs {
            let order = |n: usize, stream: u64| {
                let mut idx: Vec<usize> = (0..n).collect();
                idx.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.seed, stream, epoch as u64])));
                idx
            };
            let lab_order = order(labeled.len(), STREAM_LABELED);
            let unl_order = order(unlabeled.len(), STREAM_UNLABELED);
            let lr = cfg.lr_at(epoch);
            for j in 0..spe {
                let lb: Vec<&Scene> = (0..b).map(|i| &labeled[lab_order[(j * b + i) % labeled.len()]]).collect();
                let ub: Vec<&Scene> = if unlabeled.is_empty() {
                    Vec::new()
                } else {
                    (0..b).map(|i| &unlabeled[unl_order[(j * b + i) % unlabeled.len()]]).collect()
                };
                let ramp = self.ramp(state.step, spe);
                log_rows.push(self.step(&mut state, &lb, &ub, lr, ramp)?);
            }
            let tail = &log_rows[log_rows.len() - spe..];
            log::info!(
                "epoch {}/{}: L_total {:.4}, L_sup {:.4}, lr {}",
                epoch + 1,
                cfg.epochs,
                tail.iter().map(|r| r.total).sum::<f64>() / spe as f64,
                tail.iter().map(|r| r.sup).sum::<f64>() / spe as f64,
                lr
            );
        }
        Ok(TrainOutput {
            checkpoint: state.checkpoint(),
            log: log_rows,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SceneReport {
    pub scene_id: usize,
    #[serde(flatten)]
    pub report: MetricReport,
}

/// Student prediction, WBIS and metrics for every scene.
pub fn evaluate(params: &ModelParams, scenes: &[Scene], wbis: &WbisParams) -> Result<Vec<SceneReport>> {
    scenes
        .iter()
        .map(|s| {
            let out = predict(params, &s.image)?;
            let pred = segment_instances(&out.boundary_map(), &out.hv, wbis)?;
            Ok(SceneReport {
                scene_id: s.id,
                report: evaluate_maps(&s.gt_labels, &pred, DEFAULT_IOU_THRESHOLD)?,
            })
        })
        .collect()
}

/// [`evaluate`] on the checkpoint's student after checking it was built
/// for `model`.
pub fn evaluate_checkpoint(
    checkpoint: &Checkpoint,
    model: &ModelConfig,
    scenes: &[Scene],
    wbis: &WbisParams,
) -> Result<Vec<SceneReport>> {
    if checkpoint.student.config() != *model {
        return Err(Error::Shape(format!(
            "checkpoint model {:?} does not match configured {:?}",
            checkpoint.student.config(),
            model
        )));
    }
    evaluate(&checkpoint.student, scenes, wbis)
}
