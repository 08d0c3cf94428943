//! Location-based saliency scores.

use crate::datamodel::{FixationPoint, PriorityMap};
use crate::error::{Error, Result};

/// Normalized scanpath saliency at one fixation: the z-scored map value there,
/// using the population standard deviation. `None` for a constant map.
pub fn nss(pred: &PriorityMap, fix: &FixationPoint) -> Result<Option<f64>> {
    nss_mean(pred, std::slice::from_ref(fix))
}

/// Mean NSS over several fixations.
pub fn nss_mean(pred: &PriorityMap, fixes: &[FixationPoint]) -> Result<Option<f64>> {
    if fixes.is_empty() {
        return Err(Error::InvalidArgument("nss needs at least one fixation".into()));
    }
    for f in fixes {
        f.check_bounds(pred.height(), pred.width())?;
    }
    let v = pred.grid().data();
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    if sd == 0.0 || !sd.is_finite() {
        return Ok(None);
    }
    let total: f64 = fixes.iter().map(|f| (pred.at(f.x, f.y) - mean) / sd).sum();
    Ok(Some(total / fixes.len() as f64))
}

/// Judd area under the ROC curve.
///
/// Thresholds are the distinct map values at the fixated pixels. At each
/// threshold the true-positive rate counts fixated pixels and the
/// false-positive rate counts the remaining pixels at or above it. The curve
/// runs from (0, 0) to (1, 1) and is integrated with the trapezoid rule.
/// Repeated fixations on one pixel count once.
pub fn aucj(pred: &PriorityMap, fixes: &[FixationPoint]) -> Result<f64> {
    if fixes.is_empty() {
        return Err(Error::InvalidArgument("aucj needs at least one fixation".into()));
    }
    let (h, w) = (pred.height(), pred.width());
    let mut fixated = vec![false; h * w];
    for f in fixes {
        f.check_bounds(h, w)?;
        fixated[f.y * w + f.x] = true;
    }
    let v = pred.grid().data();
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite { op: "aucj" });
    }
    let mut pos: Vec<f64> = v.iter().zip(&fixated).filter(|(_, &f)| f).map(|(x, _)| *x).collect();
    let mut neg: Vec<f64> = v.iter().zip(&fixated).filter(|(_, &f)| !f).map(|(x, _)| *x).collect();
    let (np, nn) = (pos.len(), neg.len());
    if nn == 0 {
        return Ok(1.0);
    }
    pos.sort_by(|a, b| b.total_cmp(a));
    neg.sort_by(|a, b| b.total_cmp(a));
    let (mut ip, mut ineg) = (0usize, 0usize);
    let (mut tpr, mut fpr) = (0.0f64, 0.0f64);
    let mut area = 0.0;
    while ip < np {
        let theta = pos[ip];
        while ip < np && pos[ip] == theta {
            ip += 1;
        }
        while ineg < nn && neg[ineg] >= theta {
            ineg += 1;
        }
        let (t, f) = (ip as f64 / np as f64, ineg as f64 / nn as f64);
        area += (f - fpr) * (t + tpr) / 2.0;
        tpr = t;
        fpr = f;
    }
    area += (1.0 - fpr) * (1.0 + tpr) / 2.0;
    Ok(area)
}

/// Brute-force pairwise form of [`aucj`] over raw values: a non-fixated pixel
/// is beaten fully by strictly larger fixated values and half by the fixated
/// pixels holding the largest fixated value not above it.
pub fn aucj_pairwise(v: &[f64], fixated: &[bool]) -> f64 {
    let pos: Vec<f64> = v.iter().zip(fixated).filter(|p| *p.1).map(|p| *p.0).collect();
    let neg: Vec<f64> = v.iter().zip(fixated).filter(|p| !*p.1).map(|p| *p.0).collect();
    if neg.is_empty() {
        return 1.0;
    }
    let mut credit = 0.0;
    for &n in &neg {
        let floor = pos.iter().cloned().filter(|&p| p <= n).fold(f64::NEG_INFINITY, f64::max);
        for &p in &pos {
            if p > n {
                credit += 1.0;
            } else if p == floor {
                credit += 0.5;
            }
        }
    }
    credit / (pos.len() * neg.len()) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::{MapKind, ObserverId};
    use crate::numeric::Tensor;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fix(x: usize, y: usize) -> FixationPoint {
        FixationPoint {
            x,
            y,
            observer: ObserverId(0),
            frame: 0,
        }
    }

    fn pmap(h: usize, w: usize, v: Vec<f64>) -> PriorityMap {
        PriorityMap::new(Tensor::new(&[1, h, w], v).unwrap(), MapKind::Prediction).unwrap()
    }

    #[test]
    fn nss_hand_value() {
        let m = pmap(2, 2, vec![1.0, 0.0, 0.0, 0.0]);
        let v = nss(&m, &fix(0, 0)).unwrap().unwrap();
        assert!((v - 0.75 / 0.1875f64.sqrt()).abs() < 1e-12);
        assert!((v - 1.7321).abs() < 1e-4);
        assert_eq!(nss(&pmap(2, 2, vec![0.3; 4]), &fix(1, 1)).unwrap(), None);
        assert!(nss(&m, &fix(2, 0)).is_err());
    }

    #[test]
    fn aucj_reference_cases() {
        let m = pmap(2, 2, vec![0.1, 0.9, 0.2, 0.3]);
        assert_eq!(aucj(&m, &[fix(1, 0)]).unwrap(), 1.0);
        assert_eq!(aucj(&pmap(3, 3, vec![0.4; 9]), &[fix(1, 1)]).unwrap(), 0.5);
        assert!(aucj(&m, &[]).is_err());
        // single fixation beaten by one of three others: FPR 1/3, area 1 − 1/6
        let m = pmap(2, 2, vec![0.5, 0.9, 0.2, 0.3]);
        assert!((aucj(&m, &[fix(0, 0)]).unwrap() - 5.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn aucj_matches_pairwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for case in 0..1000 {
            // coarse levels force ties on some cases
            let levels = if case % 3 == 0 { 5.0 } else { 1e6 };
            let v: Vec<f64> = (0..64).map(|_| (rng.gen::<f64>() * levels).floor() / levels).collect();
            let k = rng.gen_range(1..6);
            let fixes: Vec<_> = (0..k).map(|_| fix(rng.gen_range(0..8), rng.gen_range(0..8))).collect();
            let mut fixated = vec![false; 64];
            for f in &fixes {
                fixated[f.y * 8 + f.x] = true;
            }
            let a = aucj(&pmap(8, 8, v.clone()), &fixes).unwrap();
            assert!((a - aucj_pairwise(&v, &fixated)).abs() < 1e-9, "case {case}");
        }
    }

    proptest! {
        #[test]
        fn nss_affine_invariant(v in prop::collection::vec(0.0f64..1.0, 16), x in 0usize..4, y in 0usize..4, a in 0.1f64..10.0, b in 0.0f64..5.0) {
            let m = pmap(4, 4, v.clone());
            let t = pmap(4, 4, v.iter().map(|z| a * z + b).collect());
            if let (Some(p), Some(q)) = (nss(&m, &fix(x, y)).unwrap(), nss(&t, &fix(x, y)).unwrap()) {
                prop_assert!((p - q).abs() < 1e-7);
            }
        }

        #[test]
        fn aucj_monotone_invariant(v in prop::collection::vec(0.0f64..1.0, 16), x in 0usize..4, y in 0usize..4) {
            let m = pmap(4, 4, v.clone());
            let t = pmap(4, 4, v.iter().map(|z| (3.0 * z).exp() + z.sqrt()).collect());
            let (p, q) = (aucj(&m, &[fix(x, y)]).unwrap(), aucj(&t, &[fix(x, y)]).unwrap());
            prop_assert!((p - q).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&p));
        }
    }
}
