//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::param::{ParamId, ParamStore};
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct FdOptions {
    pub eps: f64,
    /// Check at most this many randomly chosen coordinates per parameter.
    pub max_coords_per_param: Option<usize>,
    pub seed: u64,
    /// Lower bound of the relative-error denominator. Gradients below it are
    /// compared absolutely, which keeps rounding noise of large losses from
    /// dominating near-zero coordinates.
    pub floor: f64,
}

impl Default for FdOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            max_coords_per_param: None,
            seed: 0,
            floor: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct FdWorst {
    pub param: String,
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug)]
pub struct FdReport {
    pub max_rel_error: f64,
    pub coords_checked: usize,
    pub worst: Option<FdWorst>,
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    relative_error_floored(a, b, 1e-8)
}

pub fn relative_error_floored(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Compares the backward-pass gradient of the scalar built by `f` against
/// `(f(θ+ε) − f(θ−ε)) / 2ε` for every (sampled) coordinate of `params`.
///
/// Gradient buffers of `store` are zeroed before and after the check.
pub fn finite_diff_check<F>(store: &mut ParamStore, params: &[ParamId], opts: &FdOptions, f: F) -> Result<FdReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    store.zero_grads();
    let mut g = Graph::new();
    let loss = f(&mut g, store)?;
    g.backward(loss, store)?;
    drop(g);
    let analytic: Vec<_> = params.iter().map(|&id| store.get(id).grad.clone()).collect();
    store.zero_grads();

    let eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let v = f(&mut g, store)?;
        Ok(g.value(v).item())
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = FdReport {
        max_rel_error: 0.0,
        coords_checked: 0,
        worst: None,
    };
    for (&id, grad) in params.iter().zip(&analytic) {
        let n = grad.len();
        let coords: Vec<usize> = match opts.max_coords_per_param {
            Some(k) if k < n => sample(&mut rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        for c in coords {
            let orig = store.get(id).value.data()[c];
            store.get_mut(id).value.data_mut()[c] = orig + opts.eps;
            let plus = eval(store)?;
            store.get_mut(id).value.data_mut()[c] = orig - opts.eps;
            let minus = eval(store)?;
            store.get_mut(id).value.data_mut()[c] = orig;
            let numeric = (plus - minus) / (2.0 * opts.eps);
            let err = relative_error_floored(grad.data()[c], numeric, opts.floor);
            report.coords_checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some(FdWorst {
                    param: store.get(id).name.clone(),
                    coord: c,
                    analytic: grad.data()[c],
                    numeric,
                });
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::param::{conv_kernel, ParamGroup};
    use crate::numeric::tensor::Tensor;
    use rand::Rng;

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn linear_layer_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let w = store.add("w", rand_tensor(&[3, 4], &mut rng), ParamGroup::Integration).unwrap();
        let b = store.add("b", rand_tensor(&[3], &mut rng), ParamGroup::Integration).unwrap();
        let x = rand_tensor(&[4], &mut rng);
        let r = finite_diff_check(&mut store, &[w, b], &FdOptions::default(), |g, s| {
            let xv = g.constant(x.clone())?;
            let (wv, bv) = (g.param(s, w)?, g.param(s, b)?);
            let y = g.linear(xv, wv, Some(bv))?;
            g.sum(y)
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    #[test]
    fn conv_sigmoid_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let k = store.add("k", conv_kernel(2, 3, 3, &mut rng), ParamGroup::Integration).unwrap();
        let b = store.add("b", rand_tensor(&[2], &mut rng), ParamGroup::Integration).unwrap();
        let x = store.add("x", rand_tensor(&[3, 4, 4], &mut rng), ParamGroup::Integration).unwrap();
        let r = finite_diff_check(&mut store, &[k, b, x], &FdOptions::default(), |g, s| {
            let (xv, kv, bv) = (g.param(s, x)?, g.param(s, k)?, g.param(s, b)?);
            let y = g.conv2d(xv, kv, Some(bv), 1)?;
            let y = g.sigmoid(y)?;
            g.sum(y)
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn maxpool_untied() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let x = store.add("x", rand_tensor(&[2, 4, 4], &mut rng), ParamGroup::Integration).unwrap();
        let wts = rand_tensor(&[2, 2, 2], &mut rng);
        let r = finite_diff_check(&mut store, &[x], &FdOptions::default(), |g, s| {
            let xv = g.param(s, x)?;
            let p = g.maxpool2(xv)?;
            let w = g.constant(wts.clone())?;
            let y = g.mul(p, w)?;
            g.sum(y)
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }
}
