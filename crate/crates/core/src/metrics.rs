//! Instance segmentation metrics: aggregated Jaccard index, pixel Dice and
//! object-level F1.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::InstanceLabelMap;

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub aji: f64,
    pub dice: f64,
    pub f1_obj: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

/// Pairwise intersection counts and per-instance areas of two label maps.
struct Overlaps {
    inter: Vec<u64>,
    n_pred: usize,
    gt_area: Vec<u64>,
    pred_area: Vec<u64>,
}

impl Overlaps {
    fn new(gt: &InstanceLabelMap, pred: &InstanceLabelMap) -> Result<Self> {
        if gt.height() != pred.height() || gt.width() != pred.width() {
            return Err(Error::Shape(format!(
                "gt {}x{} vs pred {}x{}",
                gt.height(),
                gt.width(),
                pred.height(),
                pred.width()
            )));
        }
        let (ng, np) = (gt.num_instances(), pred.num_instances());
        let mut o = Overlaps {
            inter: vec![0; ng * np],
            n_pred: np,
            gt_area: vec![0; ng],
            pred_area: vec![0; np],
        };
        for (&g, &p) in gt.labels().iter().zip(pred.labels()) {
            if g > 0 {
                o.gt_area[g as usize - 1] += 1;
            }
            if p > 0 {
                o.pred_area[p as usize - 1] += 1;
            }
            if g > 0 && p > 0 {
                o.inter[(g as usize - 1) * np + p as usize - 1] += 1;
            }
        }
        Ok(o)
    }

    fn inter(&self, g: usize, p: usize) -> u64 {
        self.inter[g * self.n_pred + p]
    }

    fn union(&self, g: usize, p: usize) -> u64 {
        self.gt_area[g] + self.pred_area[p] - self.inter(g, p)
    }

    fn iou(&self, g: usize, p: usize) -> f64 {
        self.inter(g, p) as f64 / self.union(g, p) as f64
    }
}

/// Aggregated Jaccard index. Each ground-truth instance takes the prediction
/// of maximal IoU (lowest label on ties) and may share it with other
/// ground-truth instances; predictions claimed by nobody add their area to
/// the denominator. A ground-truth instance that overlaps no prediction
/// contributes only its own area.
pub fn aji(gt: &InstanceLabelMap, pred: &InstanceLabelMap) -> Result<f64> {
    let o = Overlaps::new(gt, pred)?;
    let (ng, np) = (o.gt_area.len(), o.pred_area.len());
    if ng == 0 {
        return Ok(if np == 0 { 1.0 } else { 0.0 });
    }
    let mut used = vec![false; np];
    let (mut num, mut den) = (0u64, 0u64);
    for g in 0..ng {
        let mut best: Option<usize> = None;
        for p in 0..np {
            if o.inter(g, p) == 0 {
                continue;
            }
            // exact comparison of inter/union ratios
            let better = match best {
                None => true,
                Some(b) => o.inter(g, p) * o.union(g, b) > o.inter(g, b) * o.union(g, p),
            };
            if better {
                best = Some(p);
            }
        }
        match best {
            Some(p) => {
                num += o.inter(g, p);
                den += o.union(g, p);
                used[p] = true;
            }
            None => den += o.gt_area[g],
        }
    }
    den += (0..np).filter(|&p| !used[p]).map(|p| o.pred_area[p]).sum::<u64>();
    Ok(num as f64 / den as f64)
}

/// Binary foreground Dice. Two empty foregrounds score 1.
pub fn dice_metric(gt: &InstanceLabelMap, pred: &InstanceLabelMap) -> Result<f64> {
    let o = Overlaps::new(gt, pred)?;
    let g: u64 = o.gt_area.iter().sum();
    let s: u64 = o.pred_area.iter().sum();
    if g + s == 0 {
        return Ok(1.0);
    }
    let both = gt
        .labels()
        .iter()
        .zip(pred.labels())
        .filter(|(&a, &b)| a > 0 && b > 0)
        .count() as f64;
    Ok(2.0 * both / (g + s) as f64)
}

/// Object F1 with greedy one-to-one matching in descending IoU order; a
/// pair is a true positive when its IoU reaches `iou_thresh`. Returns
/// `(f1, tp, fp, fn)`.
pub fn f1_obj(
    gt: &InstanceLabelMap,
    pred: &InstanceLabelMap,
    iou_thresh: f64,
) -> Result<(f64, usize, usize, usize)> {
    if !(iou_thresh > 0.0 && iou_thresh < 1.0) {
        return Err(Error::InvalidParam(format!("iou threshold {iou_thresh} not in (0, 1)")));
    }
    let o = Overlaps::new(gt, pred)?;
    let (ng, np) = (o.gt_area.len(), o.pred_area.len());
    let mut cands: Vec<(f64, usize, usize)> = Vec::new();
    for g in 0..ng {
        for p in 0..np {
            if o.inter(g, p) > 0 {
                let iou = o.iou(g, p);
                if iou >= iou_thresh {
                    cands.push((iou, g, p));
                }
            }
        }
    }
    cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut g_used = vec![false; ng];
    let mut p_used = vec![false; np];
    let mut tp = 0;
    for (_, g, p) in cands {
        if !g_used[g] && !p_used[p] {
            g_used[g] = true;
            p_used[p] = true;
            tp += 1;
        }
    }
    let (fp, fn_) = (np - tp, ng - tp);
    let f1 = if ng + np == 0 {
        1.0
    } else {
        2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
    };
    Ok((f1, tp, fp, fn_))
}

pub fn evaluate_maps(gt: &InstanceLabelMap, pred: &InstanceLabelMap, iou_thresh: f64) -> Result<MetricReport> {
    let (f1, tp, fp, fn_) = f1_obj(gt, pred, iou_thresh)?;
    Ok(MetricReport {
        aji: aji(gt, pred)?,
        dice: dice_metric(gt, pred)?,
        f1_obj: f1,
        tp,
        fp,
        fn_,
    })
}

/// Per-image mean of the three scores; `None` for an empty list.
pub fn mean_scores(reports: &[MetricReport]) -> Option<(f64, f64, f64)> {
    if reports.is_empty() {
        return None;
    }
    let n = reports.len() as f64;
    Some((
        reports.iter().map(|r| r.aji).sum::<f64>() / n,
        reports.iter().map(|r| r.dice).sum::<f64>() / n,
        reports.iter().map(|r| r.f1_obj).sum::<f64>() / n,
    ))
}

/// For each ground-truth instance, the best IoU over predicted instances.
pub fn best_ious(gt: &InstanceLabelMap, pred: &InstanceLabelMap) -> Result<Vec<f64>> {
    let o = Overlaps::new(gt, pred)?;
    Ok((0..o.gt_area.len())
        .map(|g| {
            (0..o.n_pred)
                .filter(|&p| o.inter(g, p) > 0)
                .map(|p| o.iou(g, p))
                .fold(0.0, f64::max)
        })
        .collect())
}
