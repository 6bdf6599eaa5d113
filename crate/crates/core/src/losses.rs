//! Training objectives with analytic gradients with respect to the student's
//! predicted maps. Teacher maps and all masks enter as constants.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{sobel_adjoint, sobel_gradients, BinaryMask, Tensor};

/// Dice smoothing constant, `exp(-3)`.
pub const DICE_EPS: f64 = 0.049_787_068_367_863_944;
const CE_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Boundary term weight inside the matched-instance loss.
    pub beta: f64,
    /// Prior-weighted consistency weight.
    pub gamma1: f64,
    /// Matched-instance consistency weight.
    pub gamma2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            beta: 0.5,
            gamma1: 0.1,
            gamma2: 100.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.beta < 0.0 || self.gamma1 < 0.0 || self.gamma2 < 0.0 {
            return Err(Error::InvalidParam(format!("negative loss weight in {self:?}")));
        }
        Ok(())
    }
}

/// A scalar loss and its gradient with respect to the map it differentiates.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub grad: Tensor,
}

impl LossValue {
    pub fn zero(dims: &[usize]) -> Self {
        Self {
            value: 0.0,
            grad: Tensor::zeros(dims),
        }
    }
}

fn expect_dims(t: &Tensor, dims: &[usize], what: &str) -> Result<()> {
    if t.dims() != dims {
        return Err(Error::Shape(format!(
            "{what}: expected {dims:?}, got {:?}",
            t.dims()
        )));
    }
    Ok(())
}

fn expect_mask(m: &BinaryMask, h: usize, w: usize, what: &str) -> Result<()> {
    if m.height() != h || m.width() != w {
        return Err(Error::Shape(format!(
            "{what}: mask {}x{} vs map {h}x{w}",
            m.height(),
            m.width()
        )));
    }
    Ok(())
}

/// Soft Dice loss of a foreground probability map against a binary target.
pub fn dice_loss(pred: &Tensor, gt: &BinaryMask) -> Result<LossValue> {
    let (h, w) = pred.plane_dims();
    expect_dims(pred, &[h, w], "dice pred")?;
    expect_mask(gt, h, w, "dice")?;
    let p = pred.data();
    let y = gt.bits();
    let inter: f64 = p.iter().zip(y).filter(|(_, &b)| b).map(|(&v, _)| v).sum();
    let sum = p.iter().sum::<f64>() + y.iter().filter(|&&b| b).count() as f64;
    let num = 2.0 * inter + DICE_EPS;
    let den = sum + DICE_EPS;
    let grad = y
        .iter()
        .map(|&b| {
            let yi = if b { 1.0 } else { 0.0 };
            -(2.0 * yi * den - num) / (den * den)
        })
        .collect();
    Ok(LossValue {
        value: 1.0 - num / den,
        grad: Tensor::new(vec![h, w], grad)?,
    })
}

/// Two-class cross entropy on `[2, h, w]` probabilities; class 1 is
/// foreground. Probabilities are clamped to `[1e-7, 1 - 1e-7]`.
pub fn ce_loss(pred: &Tensor, gt: &BinaryMask) -> Result<LossValue> {
    let (h, w) = pred.plane_dims();
    expect_dims(pred, &[2, h, w], "ce pred")?;
    expect_mask(gt, h, w, "ce")?;
    let n = (h * w) as f64;
    let mut grad = Tensor::zeros(&[2, h, w]);
    let mut total = 0.0;
    for (i, &fg) in gt.bits().iter().enumerate() {
        let ch = usize::from(fg);
        let p = pred.plane(ch)[i];
        let pc = p.clamp(CE_CLAMP, 1.0 - CE_CLAMP);
        total -= pc.ln();
        if p == pc {
            grad.plane_mut(ch)[i] = -1.0 / (n * p);
        }
    }
    Ok(LossValue {
        value: total / n,
        grad,
    })
}

pub fn mse_loss(pred: &Tensor, target: &Tensor) -> Result<LossValue> {
    pred.same_dims(target)?;
    let n = pred.len() as f64;
    let mut value = 0.0;
    let grad: Vec<f64> = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| {
            value += (p - t) * (p - t);
            2.0 * (p - t) / n
        })
        .collect();
    Ok(LossValue {
        value: value / n,
        grad: Tensor::new(pred.dims().to_vec(), grad)?,
    })
}

/// Mean squared error between Sobel gradients of predicted and target HV
/// maps (`d/dx` of the horizontal channel, `d/dy` of the vertical one),
/// averaged over the nuclear pixels. An empty mask gives zero.
pub fn msge_loss(pred_hv: &Tensor, gt_hv: &Tensor, nuclear: &BinaryMask) -> Result<LossValue> {
    let (h, w) = pred_hv.plane_dims();
    expect_dims(pred_hv, &[2, h, w], "msge pred")?;
    expect_dims(gt_hv, &[2, h, w], "msge target")?;
    expect_mask(nuclear, h, w, "msge")?;
    let m = nuclear.count();
    if m == 0 {
        return Ok(LossValue::zero(&[2, h, w]));
    }
    let (pgx, _) = sobel_gradients(&pred_hv.channel(0)?);
    let (_, pgy) = sobel_gradients(&pred_hv.channel(1)?);
    let (tgx, _) = sobel_gradients(&gt_hv.channel(0)?);
    let (_, tgy) = sobel_gradients(&gt_hv.channel(1)?);
    let mut dx = Tensor::zeros(&[h, w]);
    let mut dy = Tensor::zeros(&[h, w]);
    let mut value = 0.0;
    let scale = 2.0 / m as f64;
    for (i, &inside) in nuclear.bits().iter().enumerate() {
        if inside {
            let ex = pgx.data()[i] - tgx.data()[i];
            let ey = pgy.data()[i] - tgy.data()[i];
            value += ex * ex + ey * ey;
            dx.data_mut()[i] = scale * ex;
            dy.data_mut()[i] = scale * ey;
        }
    }
    let (gh, gv) = sobel_adjoint(&dx, &dy);
    Ok(LossValue {
        value: value / m as f64,
        grad: Tensor::stack(&[&gh, &gv])?,
    })
}

/// Supervised objective for one image with its components and the gradients
/// for both heads.
#[derive(Debug, Clone, PartialEq)]
pub struct SupervisedLoss {
    pub total: f64,
    pub dice: f64,
    pub ce: f64,
    pub mse: f64,
    pub msge: f64,
    /// Gradient w.r.t. the `[2, h, w]` NP probabilities.
    pub grad_np: Tensor,
    /// Gradient w.r.t. the `[2, h, w]` HV map.
    pub grad_hv: Tensor,
}

/// Dice + CE on the NP branch plus MSE + MSGE on the HV branch, unit weights.
pub fn supervised_loss(
    np_pred: &Tensor,
    hv_pred: &Tensor,
    np_gt: &BinaryMask,
    hv_gt: &Tensor,
) -> Result<SupervisedLoss> {
    let (h, w) = np_pred.plane_dims();
    expect_dims(np_pred, &[2, h, w], "np pred")?;
    expect_dims(hv_pred, &[2, h, w], "hv pred")?;
    let dice = dice_loss(&np_pred.channel(1)?, np_gt)?;
    let ce = ce_loss(np_pred, np_gt)?;
    let mse = mse_loss(hv_pred, hv_gt)?;
    let msge = msge_loss(hv_pred, hv_gt, np_gt)?;

    let mut grad_np = ce.grad;
    for (g, d) in grad_np.plane_mut(1).iter_mut().zip(dice.grad.data()) {
        *g += d;
    }
    let mut grad_hv = mse.grad;
    for (g, d) in grad_hv.data_mut().iter_mut().zip(msge.grad.data()) {
        *g += d;
    }
    Ok(SupervisedLoss {
        total: dice.value + ce.value + mse.value + msge.value,
        dice: dice.value,
        ce: ce.value,
        mse: mse.value,
        msge: msge.value,
        grad_np,
        grad_hv,
    })
}

/// Detached masks for one matched teacher/student pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PairMasks {
    pub student: BinaryMask,
    pub teacher: BinaryMask,
    pub student_boundary: BinaryMask,
    pub teacher_boundary: BinaryMask,
}

/// Matched-instance loss with separate gradients for the feature stack and
/// the boundary map.
#[derive(Debug, Clone, PartialEq)]
pub struct MiacLoss {
    pub value: f64,
    pub grad_features: Tensor,
    pub grad_boundary: Tensor,
}

impl MiacLoss {
    /// Folds the boundary gradient into plane `channel` of the feature
    /// gradient, for when the boundary map is one of the feature planes.
    pub fn fold_boundary(mut self, channel: usize) -> Result<LossValue> {
        if channel >= self.grad_features.channels() {
            return Err(Error::ChannelOutOfRange {
                index: channel,
                count: self.grad_features.channels(),
            });
        }
        for (g, b) in self
            .grad_features
            .plane_mut(channel)
            .iter_mut()
            .zip(self.grad_boundary.data())
        {
            *g += b;
        }
        Ok(LossValue {
            value: self.value,
            grad: self.grad_features,
        })
    }
}

/// Mean over matched pairs of
/// `||F_s * S - F_t * T||^2 + beta * ||B_s * S~ - B_t * T~||^2`.
///
/// Only the student maps are differentiated. No pairs gives zero.
pub fn miac_loss(
    fs: &Tensor,
    ft: &Tensor,
    bs: &Tensor,
    bt: &Tensor,
    pairs: &[PairMasks],
    beta: f64,
) -> Result<MiacLoss> {
    fs.same_dims(ft)?;
    let k = fs.channels();
    let (h, w) = fs.plane_dims();
    expect_dims(bs, &[h, w], "boundary student")?;
    expect_dims(bt, &[h, w], "boundary teacher")?;
    let mut grad_f = Tensor::zeros(fs.dims());
    let mut grad_b = Tensor::zeros(&[h, w]);
    if pairs.is_empty() {
        return Ok(MiacLoss {
            value: 0.0,
            grad_features: grad_f,
            grad_boundary: grad_b,
        });
    }
    let n = pairs.len() as f64;
    let mut value = 0.0;
    for pm in pairs {
        for m in [&pm.student, &pm.teacher, &pm.student_boundary, &pm.teacher_boundary] {
            expect_mask(m, h, w, "miac pair")?;
        }
        let s = pm.student.bits();
        let t = pm.teacher.bits();
        for i in 0..h * w {
            if !s[i] && !t[i] {
                continue;
            }
            for ch in 0..k {
                let a = if s[i] { fs.plane(ch)[i] } else { 0.0 };
                let b = if t[i] { ft.plane(ch)[i] } else { 0.0 };
                let d = a - b;
                value += d * d;
                if s[i] {
                    grad_f.plane_mut(ch)[i] += 2.0 * d / n;
                }
            }
        }
        let sb = pm.student_boundary.bits();
        let tb = pm.teacher_boundary.bits();
        for i in 0..h * w {
            if !sb[i] && !tb[i] {
                continue;
            }
            let a = if sb[i] { bs.data()[i] } else { 0.0 };
            let b = if tb[i] { bt.data()[i] } else { 0.0 };
            let d = a - b;
            value += beta * d * d;
            if sb[i] {
                grad_b.data_mut()[i] += 2.0 * beta * d / n;
            }
        }
    }
    Ok(MiacLoss {
        value: value / n,
        grad_features: grad_f,
        grad_boundary: grad_b,
    })
}

/// `||(F_s - F_t) * U||^2 / max(N, 1)` with the composite reliability mask
/// `U` and `N` teacher instances. Only `F_s` is differentiated.
pub fn piac_loss(fs: &Tensor, ft: &Tensor, u: &Tensor, n_instances: usize) -> Result<LossValue> {
    fs.same_dims(ft)?;
    let (h, w) = fs.plane_dims();
    expect_dims(u, &[h, w], "piac mask")?;
    let norm = n_instances.max(1) as f64;
    let mut grad = Tensor::zeros(fs.dims());
    let mut value = 0.0;
    let uw = u.data();
    for ch in 0..fs.channels() {
        let (a, b) = (fs.plane(ch), ft.plane(ch));
        let g = grad.plane_mut(ch);
        for i in 0..h * w {
            let d = (a[i] - b[i]) * uw[i];
            value += d * d;
            g[i] = 2.0 * d * uw[i] / norm;
        }
    }
    Ok(LossValue {
        value: value / norm,
        grad,
    })
}

/// `gamma1 * piac + gamma2 * miac`, values and gradients alike.
pub fn consistency_loss(
    piac: &LossValue,
    miac: &LossValue,
    weights: &LossWeights,
) -> Result<LossValue> {
    piac.grad.same_dims(&miac.grad)?;
    let grad = piac
        .grad
        .data()
        .iter()
        .zip(miac.grad.data())
        .map(|(p, m)| weights.gamma1 * p + weights.gamma2 * m)
        .collect();
    Ok(LossValue {
        value: weights.gamma1 * piac.value + weights.gamma2 * miac.value,
        grad: Tensor::new(piac.grad.dims().to_vec(), grad)?,
    })
}
