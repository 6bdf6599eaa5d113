//! Consistency strategies for the unlabeled stream, kept in a name-keyed
//! registry so a run can pick one from its config or the command line.
//!
//! Every strategy sees the student and teacher feature stacks
//! `[np0, np1, hv_h, hv_v]` in the canonical (unaugmented) frame, plus the
//! detached instance cache left by the previous visit of the same scene.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::losses::{consistency_loss, miac_loss, mse_loss, piac_loss, LossValue, LossWeights, PairMasks};
use crate::matching::{match_instances, MatchResult};
use crate::priors::{piac_mask, score_instances, PiacConfig, PriorBank};
use crate::raster::{instance_boundary, InstanceLabelMap, Tensor};
use crate::wbis::{segment_instances, WbisParams};

/// Plane of the feature stack that doubles as the boundary map.
pub const BOUNDARY_CHANNEL: usize = 1;

/// Instance-level state derived from one visit's outputs. Everything here is
/// constant with respect to the next visit's student parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceCache {
    /// Step whose outputs produced this entry.
    pub step: u64,
    pub teacher: InstanceLabelMap,
    pub student: InstanceLabelMap,
    pub matches: MatchResult,
    /// Masks for each accepted pair, in `matches.pairs` order.
    pub pairs: Vec<PairMasks>,
    /// Reliability weights over the teacher instances, when a prior bank was
    /// available.
    pub reliability: Option<Tensor>,
    /// Teacher instances scored below the likelihood threshold.
    pub rejected: usize,
}

/// Settings needed to turn a pair of feature stacks into an [`InstanceCache`].
#[derive(Debug, Clone, Copy)]
pub struct CacheSettings<'a> {
    pub wbis: &'a WbisParams,
    pub r_factor: f64,
    pub boundary_radius: usize,
    pub piac: &'a PiacConfig,
    pub bank: Option<&'a PriorBank>,
}

fn instances_of(features: &Tensor, wbis: &WbisParams) -> Result<InstanceLabelMap> {
    let hv = Tensor::stack(&[&features.channel(2)?, &features.channel(3)?])?;
    segment_instances(&features.channel(1)?, &hv, wbis)
}

/// Segments both stacks, matches the instances and precomputes the pair
/// masks and the reliability weights. `h_channel` is the scene's intensity
/// proxy in the same frame as the stacks.
pub fn build_cache(
    step: u64,
    teacher: &Tensor,
    student: &Tensor,
    h_channel: &Tensor,
    settings: &CacheSettings,
) -> Result<InstanceCache> {
    teacher.same_dims(student)?;
    let t_map = instances_of(teacher, settings.wbis)?;
    let s_map = instances_of(student, settings.wbis)?;
    let matches = match_instances(&t_map, &s_map, settings.r_factor)?;
    let pairs = matches
        .pairs
        .iter()
        .map(|p| {
            let s = s_map.mask(p.student);
            let t = t_map.mask(p.teacher);
            PairMasks {
                student_boundary: instance_boundary(&s, settings.boundary_radius),
                teacher_boundary: instance_boundary(&t, settings.boundary_radius),
                student: s,
                teacher: t,
            }
        })
        .collect();
    let (reliability, rejected) = match settings.bank {
        Some(bank) => {
            let scores = score_instances(bank, &t_map, h_channel)?;
            let rejected = scores.iter().filter(|&&s| s < settings.piac.tau).count();
            (Some(piac_mask(&t_map, &scores, settings.piac)?), rejected)
        }
        None => (None, 0),
    };
    Ok(InstanceCache {
        step,
        teacher: t_map,
        student: s_map,
        matches,
        pairs,
        reliability,
        rejected,
    })
}

/// Loss weights shared by all strategies.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConsistencyWeights {
    pub losses: LossWeights,
    /// Weight of the plain squared-error baseline.
    pub mse: f64,
}

impl Default for ConsistencyWeights {
    fn default() -> Self {
        Self {
            losses: LossWeights::default(),
            mse: 1.0,
        }
    }
}

impl ConsistencyWeights {
    pub fn validate(&self) -> Result<()> {
        self.losses.validate()?;
        if !(self.mse >= 0.0) {
            return Err(Error::InvalidParam(format!("mse weight {} must be >= 0", self.mse)));
        }
        Ok(())
    }
}

pub struct ConsistencyInput<'a> {
    /// Student stack, canonical frame.
    pub student: &'a Tensor,
    /// Teacher stack, canonical frame.
    pub teacher: &'a Tensor,
    /// Entry from the previous visit, if any.
    pub cache: Option<&'a InstanceCache>,
    pub weights: &'a ConsistencyWeights,
}

/// Weighted consistency value and its gradient w.r.t. the student stack.
#[derive(Debug, Clone, PartialEq)]
pub struct ConsistencyTerms {
    /// Unweighted matched-instance term.
    pub miac: f64,
    /// Unweighted prior-weighted term.
    pub piac: f64,
    /// Unweighted plain squared-error term.
    pub mse: f64,
    pub total: f64,
    pub grad: Tensor,
    pub matched_pairs: usize,
    pub rejected_instances: usize,
}

impl ConsistencyTerms {
    pub fn zero(dims: &[usize]) -> Self {
        Self {
            miac: 0.0,
            piac: 0.0,
            mse: 0.0,
            total: 0.0,
            grad: Tensor::zeros(dims),
            matched_pairs: 0,
            rejected_instances: 0,
        }
    }
}

pub trait ConsistencyStrategy: Send + Sync {
    fn name(&self) -> &str;

    /// Whether the unlabeled stream is consumed at all.
    fn uses_unlabeled(&self) -> bool {
        true
    }

    /// Whether the trainer must keep an [`InstanceCache`] per scene.
    fn needs_instances(&self) -> bool {
        false
    }

    fn needs_priors(&self) -> bool {
        false
    }

    fn loss(&self, input: &ConsistencyInput) -> Result<ConsistencyTerms>;
}

impl fmt::Debug for dyn ConsistencyStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ConsistencyStrategy({})", self.name())
    }
}

/// Labeled data only.
#[derive(Debug, Default, Clone, Copy)]
pub struct SupervisedOnly;

impl ConsistencyStrategy for SupervisedOnly {
    fn name(&self) -> &str {
        "sup-only"
    }

    fn uses_unlabeled(&self) -> bool {
        false
    }

    fn loss(&self, input: &ConsistencyInput) -> Result<ConsistencyTerms> {
        Ok(ConsistencyTerms::zero(input.student.dims()))
    }
}

/// Mean squared error between the full stacks, no instance structure.
#[derive(Debug, Default, Clone, Copy)]
pub struct MeanTeacher;

impl ConsistencyStrategy for MeanTeacher {
    fn name(&self) -> &str {
        "mean-teacher"
    }

    fn loss(&self, input: &ConsistencyInput) -> Result<ConsistencyTerms> {
        let l = mse_loss(input.student, input.teacher)?;
        let w = input.weights.mse;
        Ok(ConsistencyTerms {
            mse: l.value,
            total: w * l.value,
            grad: l.grad.map(|g| w * g),
            ..ConsistencyTerms::zero(input.student.dims())
        })
    }
}

/// Matched-instance and/or prior-weighted terms computed from the cached
/// masks of the previous visit. No cache yet gives zero.
#[derive(Debug, Clone, Copy)]
pub struct InstanceAware {
    name: &'static str,
    matched: bool,
    prior: bool,
}

impl InstanceAware {
    pub const fn matched_only() -> Self {
        Self {
            name: "miac",
            matched: true,
            prior: false,
        }
    }

    pub const fn prior_only() -> Self {
        Self {
            name: "piac",
            matched: false,
            prior: true,
        }
    }

    pub const fn full() -> Self {
        Self {
            name: "ircr",
            matched: true,
            prior: true,
        }
    }
}

impl ConsistencyStrategy for InstanceAware {
    fn name(&self) -> &str {
        self.name
    }

    fn needs_instances(&self) -> bool {
        true
    }

    fn needs_priors(&self) -> bool {
        self.prior
    }

    fn loss(&self, input: &ConsistencyInput) -> Result<ConsistencyTerms> {
        let dims = input.student.dims();
        input.student.same_dims(input.teacher)?;
        let Some(cache) = input.cache else {
            return Ok(ConsistencyTerms::zero(dims));
        };
        let mut weights = input.weights.losses;
        let miac = if self.matched {
            let b_s = input.student.channel(BOUNDARY_CHANNEL)?;
            let b_t = input.teacher.channel(BOUNDARY_CHANNEL)?;
            miac_loss(input.student, input.teacher, &b_s, &b_t, &cache.pairs, weights.beta)?
                .fold_boundary(BOUNDARY_CHANNEL)?
        } else {
            weights.gamma2 = 0.0;
            LossValue::zero(dims)
        };
        let piac = match (self.prior, &cache.reliability) {
            (true, Some(u)) => piac_loss(input.student, input.teacher, u, cache.teacher.num_instances())?,
            (true, None) => {
                return Err(Error::Config(format!(
                    "strategy `{}` needs a prior bank",
                    self.name
                )))
            }
            (false, _) => {
                weights.gamma1 = 0.0;
                LossValue::zero(dims)
            }
        };
        let combined = consistency_loss(&piac, &miac, &weights)?;
        Ok(ConsistencyTerms {
            miac: miac.value,
            piac: piac.value,
            mse: 0.0,
            total: combined.value,
            grad: combined.grad,
            matched_pairs: if self.matched { cache.pairs.len() } else { 0 },
            rejected_instances: if self.prior { cache.rejected } else { 0 },
        })
    }
}

/// Strategies by name.
#[derive(Default)]
pub struct StrategyRegistry {
    entries: BTreeMap<String, Arc<dyn ConsistencyStrategy>>,
}

impl StrategyRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// `sup-only`, `mean-teacher`, `miac`, `piac` and `ircr`.
    pub fn with_defaults() -> Self {
        let mut r = Self::new();
        r.register(Arc::new(SupervisedOnly));
        r.register(Arc::new(MeanTeacher));
        r.register(Arc::new(InstanceAware::matched_only()));
        r.register(Arc::new(InstanceAware::prior_only()));
        r.register(Arc::new(InstanceAware::full()));
        r
    }

    /// Adds or replaces the strategy under its own name.
    pub fn register(&mut self, strategy: Arc<dyn ConsistencyStrategy>) {
        self.entries.insert(strategy.name().to_string(), strategy);
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn ConsistencyStrategy>> {
        self.entries.get(name).cloned().ok_or_else(|| {
            Error::Config(format!(
                "unknown consistency strategy `{name}` (known: {})",
                self.names().join(", ")
            ))
        })
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.keys().map(String::as_str).collect()
    }
}
