//! Likelihood, divergence and combined training losses.

use serde::{Deserialize, Serialize};

use crate::datamodel::FixationPoint;
use crate::error::{Error, Result};
use crate::numeric::{Graph, Tensor, Var};

pub const NLL_CLIP: f64 = 1e-7;
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub kld: f64,
    pub nll: f64,
    pub dam: f64,
    pub nll_form: NllForm,
}

/// Reading of the likelihood term's non-fixated part.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NllForm {
    /// `(1 − m)(1 − log p)`.
    Printed,
    /// `(1 − m) log(1 − p)`, the binary cross-entropy.
    #[default]
    CrossEntropy,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            kld: 0.94,
            nll: 0.03,
            dam: 0.61,
            nll_form: NllForm::CrossEntropy,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.kld > 0.0 && self.nll > 0.0 && self.dam > 0.0) {
            return Err(Error::Config(format!("loss weights must be positive: {self:?}")));
        }
        Ok(())
    }
}

fn indicator_sign(h: usize, w: usize, fix: &FixationPoint) -> Result<Tensor> {
    fix.check_bounds(h, w)?;
    // 2m − 1 for the one-hot indicator m
    let at = fix.y * w + fix.x;
    Ok(Tensor::from_fn(&[1, h, w], |i| if i == at { 1.0 } else { -1.0 }))
}

/// `−λ Σ [m log p + (1 − m)(1 − log p)]` with `p` clipped to `[1e-7, 1 − 1e-7]`
/// and `m` the one-hot indicator of `fix`.
pub fn loss_nll(g: &mut Graph, pred: Var, fix: &FixationPoint, weight: f64) -> Result<Var> {
    loss_nll_form(g, pred, fix, weight, NllForm::Printed)
}

/// `−λ Σ [m log p + (1 − m) log(1 − p)]` with the same clipping.
pub fn loss_bce(g: &mut Graph, pred: Var, fix: &FixationPoint, weight: f64) -> Result<Var> {
    loss_nll_form(g, pred, fix, weight, NllForm::CrossEntropy)
}

pub fn loss_nll_form(g: &mut Graph, pred: Var, fix: &FixationPoint, weight: f64, form: NllForm) -> Result<Var> {
    let shape = g.value(pred).shape().to_vec();
    if shape.len() != 3 || shape[0] != 1 {
        return Err(Error::shape("loss_nll", "prediction", "[1, H, W]", format!("{shape:?}")));
    }
    let (h, w) = (shape[1], shape[2]);
    let p = g.clamp(pred, NLL_CLIP, 1.0 - NLL_CLIP)?;
    let lp = g.log(p)?;
    if form == NllForm::CrossEntropy {
        fix.check_bounds(h, w)?;
        let at = fix.y * w + fix.x;
        let m = g.constant(Tensor::from_fn(&[1, h, w], |i| if i == at { 1.0 } else { 0.0 }))?;
        let cm = g.constant(Tensor::from_fn(&[1, h, w], |i| if i == at { 0.0 } else { 1.0 }))?;
        let np = g.neg(p)?;
        let cp = g.add_scalar(np, 1.0)?;
        let lcp = g.log(cp)?;
        let a = g.mul(m, lp)?;
        let b = g.mul(cm, lcp)?;
        let t = g.add(a, b)?;
        let t = g.sum(t)?;
        return g.scale(t, -weight);
    }
    let sign = g.constant(indicator_sign(h, w, fix)?)?;
    // m log p + (1 − m)(1 − log p) = (1 − m) + (2m − 1) log p
    let t = g.mul(sign, lp)?;
    let t = g.sum(t)?;
    let t = g.add_scalar(t, (h * w - 1) as f64)?;
    g.scale(t, -weight)
}

/// Components of the divergence term before weighting.
pub struct KldParts {
    pub plus: Var,
    pub minus: Var,
    pub total: Var,
}

/// `λ (L⁺ + L⁻)` between the mass-normalized prediction `m̂` and the density
/// `m`, both floored at 1e-12, where `L⁺ = Σ m (log m − log m̂)` and
/// `L⁻ = Σ (1 − m)(log(1 − m) − log(1 − m̂))`.
pub fn loss_kld(g: &mut Graph, pred: Var, gt: &Tensor, weight: f64) -> Result<KldParts> {
    g.value(pred).expect_same_shape("loss_kld", gt)?;
    if gt.data().iter().any(|&v| v < 0.0) || (gt.sum() - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidArgument(format!("loss_kld target must be a density, mass {}", gt.sum())));
    }
    let m = gt.map(|v| v.max(LOG_FLOOR));
    let q = g.normalize_mass(pred)?;
    let q = g.clamp(q, LOG_FLOOR, 1.0)?;
    let log_q = g.log(q)?;
    let log_m = g.constant(m.map(f64::ln))?;
    let diff = g.sub(log_m, log_q)?;
    let mv = g.constant(m.clone())?;
    let plus = g.mul(mv, diff)?;
    let plus = g.sum(plus)?;
    let nq = g.neg(q)?;
    let cq = g.add_scalar(nq, 1.0)?;
    let cq = g.clamp(cq, LOG_FLOOR, 1.0)?;
    let log_cq = g.log(cq)?;
    let log_cm = g.constant(m.map(|v| (1.0 - v).max(LOG_FLOOR).ln()))?;
    let cdiff = g.sub(log_cm, log_cq)?;
    let cm = g.constant(m.map(|v| 1.0 - v))?;
    let minus = g.mul(cm, cdiff)?;
    let minus = g.sum(minus)?;
    let s = g.add(plus, minus)?;
    let total = g.scale(s, weight)?;
    Ok(KldParts { plus, minus, total })
}

/// Scalar values of one sample's loss terms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub total: f64,
    pub nll: f64,
    pub kld: f64,
    pub dam: f64,
}

impl LossValues {
    pub fn add(&mut self, o: &LossValues) {
        self.total += o.total;
        self.nll += o.nll;
        self.kld += o.kld;
        self.dam += o.dam;
    }

    pub fn scale(&self, s: f64) -> LossValues {
        LossValues {
            total: self.total * s,
            nll: self.nll * s,
            kld: self.kld * s,
            dam: self.dam * s,
        }
    }
}

pub struct TotalLoss {
    pub total: Var,
    pub values: LossValues,
}

/// `L_NLL + L_KLD + λ_DAM · L_DAM`.
///
/// The first two terms depend only on the integration path and the last only
/// on the inverted stream, so one backward pass gives each parameter group
/// the gradient of its own objective.
pub fn total_loss(
    g: &mut Graph,
    pred: Var,
    fix: &FixationPoint,
    gt_density: &Tensor,
    dam_loss: Option<Var>,
    weights: &LossWeights,
) -> Result<TotalLoss> {
    let nll = loss_nll_form(g, pred, fix, weights.nll, weights.nll_form)?;
    let kld = loss_kld(g, pred, gt_density, weights.kld)?.total;
    let mut total = g.add(nll, kld)?;
    let mut dam_value = 0.0;
    if let Some(d) = dam_loss {
        dam_value = g.value(d).item();
        let weighted = g.scale(d, weights.dam)?;
        total = g.add(total, weighted)?;
    }
    let values = LossValues {
        total: g.value(total).item(),
        nll: g.value(nll).item(),
        kld: g.value(kld).item(),
        dam: dam_value,
    };
    Ok(TotalLoss { total, values })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::ObserverId;
    use crate::numeric::{finite_diff_check, FdOptions, ParamGroup, ParamStore};
    use rand::{Rng, SeedableRng};

    fn fix(x: usize, y: usize) -> FixationPoint {
        FixationPoint {
            x,
            y,
            observer: ObserverId(0),
            frame: 0,
        }
    }

    #[test]
    fn nll_hand_value() {
        let mut g = Graph::new();
        let p = g.constant(Tensor::full(&[1, 2, 2], 0.5)).unwrap();
        let l = loss_nll(&mut g, p, &fix(0, 0), 0.03).unwrap();
        let term = 0.5f64.ln() + 3.0 * (1.0 - 0.5f64.ln());
        assert!((g.value(l).item() + 0.03 * term).abs() < 1e-12);
        assert!((g.value(l).item() + 0.1316).abs() < 1e-4);
    }

    #[test]
    fn nll_gradient_at_fixation() {
        let mut store = ParamStore::new();
        let x = store
            .add("p", Tensor::new(&[1, 2, 2], vec![0.3, 0.6, 0.2, 0.9]).unwrap(), ParamGroup::Integration)
            .unwrap();
        let mut g = Graph::new();
        let p = g.param(&store, x).unwrap();
        let l = loss_nll(&mut g, p, &fix(1, 0), 0.03).unwrap();
        g.backward(l, &mut store).unwrap();
        assert!((store.get(x).grad.data()[1] + 0.03 / 0.6).abs() < 1e-12);
        assert!((store.get(x).grad.data()[0] - 0.03 / 0.3).abs() < 1e-12);
        let r = finite_diff_check(&mut store, &[x], &FdOptions::default(), |g, s| {
            let p = g.param(s, x)?;
            loss_nll(g, p, &fix(1, 0), 0.03)
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-6);
    }

    #[test]
    fn bce_hand_value_and_gradient() {
        let mut g = Graph::new();
        let p = g.constant(Tensor::full(&[1, 2, 2], 0.5)).unwrap();
        let l = loss_bce(&mut g, p, &fix(0, 0), 0.03).unwrap();
        assert!((g.value(l).item() - 0.12 * 2f64.ln()).abs() < 1e-12);
        let mut store = ParamStore::new();
        let x = store
            .add("p", Tensor::new(&[1, 2, 2], vec![0.3, 0.6, 0.2, 0.9]).unwrap(), ParamGroup::Integration)
            .unwrap();
        let mut g = Graph::new();
        let p = g.param(&store, x).unwrap();
        let l = loss_bce(&mut g, p, &fix(1, 0), 0.03).unwrap();
        g.backward(l, &mut store).unwrap();
        assert!((store.get(x).grad.data()[1] + 0.03 / 0.6).abs() < 1e-12);
        assert!((store.get(x).grad.data()[0] - 0.03 / 0.7).abs() < 1e-12);
        let r = finite_diff_check(&mut store, &[x], &FdOptions::default(), |g, s| {
            let p = g.param(s, x)?;
            loss_bce(g, p, &fix(1, 0), 0.03)
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-6);
    }

    #[test]
    fn kld_identity_and_two_pixel_case() {
        let gt = Tensor::new(&[1, 1, 3], vec![0.2, 0.3, 0.5]).unwrap();
        let mut g = Graph::new();
        let p = g.constant(gt.scale(0.7)).unwrap();
        let k = loss_kld(&mut g, p, &gt, 0.94).unwrap();
        assert!(g.value(k.total).item().abs() < 1e-9);
        assert!(g.value(k.plus).item().abs() < 1e-9);
        assert!(g.value(k.minus).item().abs() < 1e-9);

        let gt = Tensor::new(&[1, 1, 2], vec![1.0, 0.0]).unwrap();
        let p = g.constant(Tensor::full(&[1, 1, 2], 0.5)).unwrap();
        let k = loss_kld(&mut g, p, &gt, 0.94).unwrap();
        assert!((g.value(k.plus).item() - 2f64.ln()).abs() < 1e-9);

        // complement term: (1 − 1e-12)(log(1 − 1e-12) − log .5) + 0 from the saturated pixel
        assert!((g.value(k.minus).item() - 2f64.ln()).abs() < 1e-9);

        let bad = Tensor::full(&[1, 1, 2], 0.8);
        assert!(loss_kld(&mut g, p, &bad, 0.94).is_err());
    }

    #[test]
    fn kld_is_nonnegative_and_differentiable() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let gt = Tensor::from_fn(&[1, 3, 3], |_| rng.gen_range(0.0..1.0));
        let gt = gt.scale(1.0 / gt.sum());
        let mut store = ParamStore::new();
        let x = store
            .add("p", Tensor::from_fn(&[1, 3, 3], |_| rng.gen_range(0.05..0.95)), ParamGroup::Integration)
            .unwrap();
        let mut g = Graph::new();
        let p = g.param(&store, x).unwrap();
        let k = loss_kld(&mut g, p, &gt, 0.94).unwrap();
        assert!(g.value(k.plus).item() >= 0.0 && g.value(k.minus).item() >= 0.0);
        let r = finite_diff_check(&mut store, &[x], &FdOptions::default(), |g, s| {
            let p = g.param(s, x)?;
            Ok(loss_kld(g, p, &gt, 0.94)?.total)
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    #[test]
    fn total_is_additive() {
        let mut g = Graph::new();
        let gt = Tensor::new(&[1, 2, 2], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let p = g.constant(Tensor::new(&[1, 2, 2], vec![0.4, 0.3, 0.2, 0.6]).unwrap()).unwrap();
        let d = g.constant(Tensor::scalar(2.0)).unwrap();
        let w = LossWeights::default();
        let t = total_loss(&mut g, p, &fix(1, 1), &gt, Some(d), &w).unwrap();
        let v = t.values;
        assert!((v.total - (v.nll + v.kld + 0.61 * 2.0)).abs() < 1e-12);
    }
}
