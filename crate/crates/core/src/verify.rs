//! Self-checks run by `verify`: finite-difference gradients of every layer
//! and of full models, plus metric and harness oracles.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::dam::{excite, inverted_stream, squeeze, DamParams};
use crate::datamodel::{FixationPoint, MapKind, Modality, ObserverId, PriorityMap};
use crate::error::{Error, Result};
use crate::evalpipe::{degradation_report, run_rollouts, OracleStub, RolloutConfig};
use crate::integrator::{alstm_step, encode_frame, gmu_fuse, AlstmParams, AlstmState, EncoderParams, GmuParams, Model, ModelConfig, ModelInput, Variant};
use crate::metrics::{aucj, aucj_pairwise, nss};
use crate::numeric::param::{conv_kernel, glorot_uniform};
use crate::numeric::{finite_diff_check, FdOptions, Graph, ParamGroup, ParamId, ParamStore, Tensor, Var};
use crate::synthgen::{generate_dataset, SynthConfig};
use crate::train::{loss_kld, total_loss, LossWeights};

/// Largest accepted relative error of a finite-difference check.
pub const GRAD_TOLERANCE: f64 = 1e-4;
/// Relative-error floor for whole-model graphs, whose losses are O(10).
pub const FULL_MODEL_FLOOR: f64 = 1e-6;
/// Largest accepted deviation from a metric oracle.
pub const ORACLE_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VerifyLevel {
    Grad,
    Oracle,
    All,
}

impl std::str::FromStr for VerifyLevel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "grad" => Ok(VerifyLevel::Grad),
            "oracle" => Ok(VerifyLevel::Oracle),
            "all" => Ok(VerifyLevel::All),
            _ => Err(Error::Config(format!("unknown verify level '{s}', expected grad, oracle or all"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn grad(name: &str, err: Result<f64>) -> Check {
        match err {
            Ok(e) => Check {
                name: name.into(),
                passed: e <= GRAD_TOLERANCE,
                detail: format!("max relative error {e:.3e}"),
            },
            Err(e) => Check {
                name: name.into(),
                passed: false,
                detail: e.to_string(),
            },
        }
    }

    fn oracle(name: &str, dev: Result<f64>, tol: f64) -> Check {
        match dev {
            Ok(d) => Check {
                name: name.into(),
                passed: d <= tol,
                detail: format!("max deviation {d:.3e}"),
            },
            Err(e) => Check {
                name: name.into(),
                passed: false,
                detail: e.to_string(),
            },
        }
    }
}

pub fn run_verify(level: VerifyLevel) -> Vec<Check> {
    let mut out = Vec::new();
    if matches!(level, VerifyLevel::Grad | VerifyLevel::All) {
        out.extend(grad_checks());
    }
    if matches!(level, VerifyLevel::Oracle | VerifyLevel::All) {
        out.extend(oracle_checks());
    }
    out
}

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn rand_density(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let t = Tensor::from_fn(shape, |_| rng.gen_range(0.05..1.0));
    t.scale(1.0 / t.sum())
}

fn check_params<F>(store: &mut ParamStore, ids: &[ParamId], f: F) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    check_params_floored(store, ids, 1e-8, f)
}

fn check_params_floored<F>(store: &mut ParamStore, ids: &[ParamId], floor: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let opts = FdOptions {
        max_coords_per_param: Some(24),
        floor,
        ..FdOptions::default()
    };
    Ok(finite_diff_check(store, ids, &opts, f)?.max_rel_error)
}

fn conv_pool_softmax() -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut store = ParamStore::new();
    let x = store.add("x", rand_tensor(&[2, 6, 6], &mut rng), ParamGroup::Integration).unwrap();
    let k = store.add("k", conv_kernel(3, 2, 3, &mut rng), ParamGroup::Integration).unwrap();
    let b = store.add("b", rand_tensor(&[3], &mut rng), ParamGroup::Integration).unwrap();
    let c = rand_tensor(&[3, 6, 6], &mut rng);
    let conv = check_params(&mut store, &[x, k, b], |g, s| {
        let (xv, kv, bv) = (g.param(s, x)?, g.param(s, k)?, g.param(s, b)?);
        let y = g.conv2d(xv, kv, Some(bv), 1)?;
        let cv = g.constant(c.clone())?;
        let y = g.mul(y, cv)?;
        g.sum(y)
    });
    let cp = rand_tensor(&[2, 3, 3], &mut rng);
    let pool = check_params(&mut store, &[x], |g, s| {
        let xv = g.param(s, x)?;
        let y = g.maxpool2(xv)?;
        let cv = g.constant(cp.clone())?;
        let y = g.mul(y, cv)?;
        g.sum(y)
    });
    let cs = rand_tensor(&[2, 6, 6], &mut rng);
    let softmax = check_params(&mut store, &[x], |g, s| {
        let xv = g.param(s, x)?;
        let y = g.spatial_softmax(xv)?;
        let cv = g.constant(cs.clone())?;
        let y = g.mul(y, cv)?;
        g.sum(y)
    });
    vec![Check::grad("conv2d", conv), Check::grad("maxpool2", pool), Check::grad("spatial_softmax", softmax)]
}

fn encoder_check() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut store = ParamStore::new();
    let p = EncoderParams::init(&mut store, "enc", (3, 2), &mut rng).unwrap();
    for id in [p.b1, p.b2] {
        store.get_mut(id).value = Tensor::full(store.value(id).shape(), 0.3);
    }
    let x = Tensor::from_fn(&[1, 6, 6], |_| rng.gen_range(0.0..1.0));
    let c = rand_tensor(&[2, 6, 6], &mut rng);
    let ids: Vec<_> = store.ids().collect();
    Check::grad(
        "encoder",
        check_params(&mut store, &ids, |g, s| {
            let xv = g.constant(x.clone())?;
            let y = encode_frame(g, s, &p, xv)?;
            let cv = g.constant(c.clone())?;
            let y = g.mul(y, cv)?;
            g.sum(y)
        }),
    )
}

fn alstm_check() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut store = ParamStore::new();
    let p = AlstmParams::init(&mut store, "alstm", 2, 3, &mut rng).unwrap();
    let seq: Vec<Tensor> = (0..3).map(|_| rand_tensor(&[2, 6, 6], &mut rng)).collect();
    let c = rand_tensor(&[3, 6, 6], &mut rng);
    let ids: Vec<_> = store.ids().collect();
    Check::grad(
        "alstm_step",
        check_params(&mut store, &ids, |g, s| {
            let mut st = AlstmState::default();
            for t in &seq {
                let v = g.constant(t.clone())?;
                st = alstm_step(g, s, &p, v, &st)?;
            }
            let cv = g.constant(c.clone())?;
            let y = g.mul(st.h.expect("ran three steps"), cv)?;
            g.sum(y)
        }),
    )
}

fn gmu_check() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut store = ParamStore::new();
    let p = GmuParams::init(&mut store, "gmu", 3, 2, 2, &mut rng).unwrap();
    let xs: Vec<Tensor> = (0..3).map(|_| rand_tensor(&[2, 6, 6], &mut rng)).collect();
    let c = rand_tensor(&[2, 6, 6], &mut rng);
    let ids: Vec<_> = store.ids().collect();
    Check::grad(
        "gmu",
        check_params(&mut store, &ids, |g, s| {
            let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect::<Result<_>>()?;
            let y = gmu_fuse(g, s, &p, &vars)?;
            let cv = g.constant(c.clone())?;
            let y = g.mul(y, cv)?;
            g.sum(y)
        }),
    )
}

fn squeeze_excite_check() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let mut store = ParamStore::new();
    let w1 = store.add("w1", glorot_uniform(&[2, 4], 4, 2, &mut rng), ParamGroup::Attention).unwrap();
    let w2 = store.add("w2", glorot_uniform(&[4, 2], 2, 4, &mut rng), ParamGroup::Attention).unwrap();
    let r = store.add("r", rand_tensor(&[4, 6, 6], &mut rng), ParamGroup::Attention).unwrap();
    let c = rand_tensor(&[4, 6, 6], &mut rng);
    Check::grad(
        "squeeze_excite",
        check_params(&mut store, &[w1, w2, r], |g, s| {
            let (rv, a, b) = (g.param(s, r)?, g.param(s, w1)?, g.param(s, w2)?);
            let l1 = squeeze(g, rv)?;
            let gains = excite(g, l1, a, b)?;
            let y = g.channel_scale(rv, gains)?;
            let cv = g.constant(c.clone())?;
            let y = g.mul(y, cv)?;
            g.sum(y)
        }),
    )
}

fn dam_heads_check() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let mut store = ParamStore::new();
    let p = DamParams::init(&mut store, 3, 4, 2, 2, &mut rng).unwrap();
    let seq: Vec<Tensor> = (0..2).map(|_| rand_tensor(&[3, 6, 6], &mut rng)).collect();
    let targets = Tensor::stack(&[rand_density(&[1, 3, 3], &mut rng), rand_density(&[1, 3, 3], &mut rng)]).unwrap();
    let ids: Vec<_> = store.ids().collect();
    Check::grad(
        "dam_heads",
        check_params(&mut store, &ids, |g, s| {
            let r: Vec<Var> = seq.iter().map(|t| g.constant(t.clone())).collect::<Result<_>>()?;
            Ok(inverted_stream(g, s, &p, &r, Some(&targets))?.loss.expect("targets given"))
        }),
    )
}

/// Integration parameters against the full loss and attention parameters
/// against the inverted-stream loss, on a 6×6 model with `T′ = 3`, two cues.
pub fn full_model_check(variant: Variant) -> Result<(f64, f64)> {
    let config = ModelConfig {
        variant,
        context: Some(3),
        height: 6,
        width: 6,
        cues: vec![Modality::Saliency, Modality::Gaze],
        encoder_channels: (2, 2),
        hidden: 4,
        dam_head_channels: 2,
        ..ModelConfig::default()
    };
    let mut model = Model::new(&config, 21)?;
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let input = ModelInput {
        cues: Tensor::from_fn(&[3, 2, 1, 6, 6], |_| rng.gen_range(0.0..1.0)),
        history: Tensor::from_fn(&[3, 1, 6, 6], |_| rng.gen_range(0.0..1.0)),
    };
    let targets = Tensor::stack(&(0..3).map(|_| rand_density(&[1, 3, 3], &mut rng)).collect::<Vec<_>>())?;
    let gt = rand_density(&[1, 6, 6], &mut rng);
    let fix = FixationPoint {
        x: 2,
        y: 4,
        observer: ObserverId(0),
        frame: 0,
    };
    let weights = LossWeights::default();
    let net = model.net.clone();
    let group = |s: &ParamStore, g: ParamGroup| -> Vec<ParamId> { s.ids().filter(|&id| s.get(id).group == g).collect() };
    let integ = group(&model.store, ParamGroup::Integration);
    let attn = group(&model.store, ParamGroup::Attention);
    // rounding noise of the central difference is about 1e-16·|L|/ε
    let e_integ = check_params_floored(&mut model.store, &integ, FULL_MODEL_FLOOR, |g, s| {
        let fw = net.forward_train(g, s, &input, &targets)?;
        Ok(total_loss(g, fw.pred, &fix, &gt, Some(fw.dam_loss), &weights)?.total)
    })?;
    let e_attn = check_params_floored(&mut model.store, &attn, FULL_MODEL_FLOOR, |g, s| {
        let fw = net.forward_train(g, s, &input, &targets)?;
        g.scale(fw.dam_loss, weights.dam)
    })?;
    Ok((e_integ, e_attn))
}

pub fn grad_checks() -> Vec<Check> {
    let mut out = conv_pool_softmax();
    out.push(encoder_check());
    out.push(alstm_check());
    out.push(gmu_check());
    out.push(squeeze_excite_check());
    out.push(dam_heads_check());
    for v in [Variant::Argmu, Variant::Largmu] {
        match full_model_check(v) {
            Ok((a, b)) => {
                out.push(Check::grad(&format!("{v}_integration"), Ok(a)));
                out.push(Check::grad(&format!("{v}_attention"), Ok(b)));
            }
            Err(e) => out.push(Check::grad(&format!("{v}"), Err(e))),
        }
    }
    out
}

fn pmap(t: Tensor) -> PriorityMap {
    PriorityMap::new(t, MapKind::Prediction).expect("non-negative map")
}

fn fix_at(i: usize, w: usize) -> FixationPoint {
    FixationPoint {
        x: i % w,
        y: i / w,
        observer: ObserverId(0),
        frame: 0,
    }
}

/// Deviation of [`nss`] from a direct z-score on random 8×8 maps.
fn nss_oracle(cases: usize) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let v: Vec<f64> = (0..64).map(|_| rng.gen_range(0.0..1.0)).collect();
        let i = rng.gen_range(0..64);
        let mean = v.iter().sum::<f64>() / 64.0;
        let sd = (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / 64.0).sqrt();
        let got = nss(&pmap(Tensor::new(&[1, 8, 8], v.clone())?), &fix_at(i, 8))?.unwrap_or(f64::NAN);
        worst = worst.max((got - (v[i] - mean) / sd).abs());
    }
    Ok(worst)
}

/// Deviation of [`aucj`] from [`aucj_pairwise`] on random 8×8 maps, one in
/// three quantized to force ties.
fn aucj_oracle(cases: usize) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let mut worst = 0.0f64;
    for case in 0..cases {
        let levels = if case % 3 == 0 { 5.0 } else { 1e6 };
        let v: Vec<f64> = (0..64).map(|_| (rng.gen::<f64>() * levels).floor() / levels).collect();
        let fixes: Vec<_> = (0..rng.gen_range(1..6)).map(|_| fix_at(rng.gen_range(0..64), 8)).collect();
        let mut fixated = vec![false; 64];
        for f in &fixes {
            fixated[f.y * 8 + f.x] = true;
        }
        let got = aucj(&pmap(Tensor::new(&[1, 8, 8], v.clone())?), &fixes)?;
        worst = worst.max((got - aucj_pairwise(&v, &fixated)).abs());
    }
    Ok(worst)
}

fn aucj_extremes() -> Result<f64> {
    let flat = aucj(&pmap(Tensor::full(&[1, 8, 8], 0.4)), &[fix_at(9, 8)])?;
    let peak = aucj(&pmap(Tensor::from_fn(&[1, 8, 8], |i| if i == 9 { 1.0 } else { 0.1 })), &[fix_at(9, 8)])?;
    Ok((flat - 0.5).abs().max((peak - 1.0).abs()))
}

fn kld_identity() -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let gt = rand_density(&[1, 8, 8], &mut rng);
    let mut g = Graph::new();
    let p = g.constant(gt.clone())?;
    let k = loss_kld(&mut g, p, &gt, 1.0)?.total;
    Ok(g.value(k).item().abs())
}

/// Largest absolute per-step change of the ground-truth stub's rollout scores.
fn oracle_rollout() -> Result<f64> {
    let d = generate_dataset(&SynthConfig {
        videos: 10,
        frames: 32,
        observers: 3,
        height: 8,
        width: 8,
        ..SynthConfig::default()
    })?;
    let stub = OracleStub::new(&d, 4);
    let report = degradation_report(&run_rollouts(&stub, &d, &RolloutConfig::default(), 1)?)?;
    let mut worst = 0.0f64;
    for s in &report.steps {
        worst = worst.max((s.aucj - 1.0).abs()).max(s.aucj_change.abs()).max(s.nss_change.abs());
    }
    Ok(worst)
}

pub fn oracle_checks() -> Vec<Check> {
    vec![
        Check::oracle("nss_zscore", nss_oracle(1000), ORACLE_TOLERANCE),
        Check::oracle("aucj_pairwise", aucj_oracle(1000), ORACLE_TOLERANCE),
        Check::oracle("aucj_constant_and_perfect", aucj_extremes(), 0.0),
        Check::oracle("kld_identity", kld_identity(), ORACLE_TOLERANCE),
        Check::oracle("oracle_rollout_flat", oracle_rollout(), 1e-9),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_check_passes() {
        let checks = run_verify(VerifyLevel::All);
        assert!(checks.len() >= 15);
        for c in &checks {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
    }

    #[test]
    fn levels_parse() {
        assert_eq!("grad".parse::<VerifyLevel>().unwrap(), VerifyLevel::Grad);
        assert!("fast".parse::<VerifyLevel>().is_err());
    }
}
