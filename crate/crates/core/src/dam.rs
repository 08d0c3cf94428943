//! Directed attention module.
//!
//! A squeeze-excitation block whose parameters are shared by two streams. The
//! direct stream re-weights the modality channels fed to the integrator and
//! sees the parameters only as constants. The inverted stream applies the same
//! block to `−softmax(r)` and decodes one half-resolution density map per
//! timestep; its cross-entropy loss is the only signal that trains the block.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numeric::param::{conv_kernel, glorot_uniform};
use crate::numeric::{avgpool2, Graph, ParamGroup, ParamId, ParamStore, Tensor, Var};

/// Floor inside the cross-entropy logarithm.
pub const DAM_LOG_EPS: f64 = 1e-12;

/// Width of the excitation bottleneck for `channels` inputs.
///
/// Below eight channels the ratio is clamped so the bottleneck keeps at least
/// two units; otherwise `channels` must be divisible by `gamma`.
pub fn reduced_dim(channels: usize, gamma: usize) -> Result<usize> {
    if gamma == 0 || channels == 0 {
        return Err(Error::Config("reduction ratio and channel count must be positive".into()));
    }
    if channels < 8 {
        return Ok((channels / gamma).max(2));
    }
    if channels % gamma != 0 {
        return Err(Error::Config(format!("{channels} channels not divisible by reduction ratio {gamma}")));
    }
    Ok(channels / gamma)
}

#[derive(Clone, Copy, Debug)]
pub struct DamHead {
    pub k1: ParamId,
    pub b1: ParamId,
    pub k2: ParamId,
    pub b2: ParamId,
}

#[derive(Clone, Debug)]
pub struct DamParams {
    pub w1: ParamId,
    pub w2: ParamId,
    pub heads: Vec<DamHead>,
    pub channels: usize,
}

impl DamParams {
    pub fn init(
        store: &mut ParamStore,
        channels: usize,
        gamma: usize,
        context: usize,
        head_channels: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let r = reduced_dim(channels, gamma)?;
        let g = ParamGroup::Attention;
        let w1 = store.add("dam.w1", glorot_uniform(&[r, channels], channels, r, rng), g)?;
        let w2 = store.add("dam.w2", glorot_uniform(&[channels, r], r, channels, rng), g)?;
        let heads = (0..context)
            .map(|t| {
                Ok(DamHead {
                    k1: store.add(format!("dam.head{t}.k1"), conv_kernel(head_channels, channels, 3, rng), g)?,
                    b1: store.add(format!("dam.head{t}.b1"), Tensor::zeros(&[head_channels]), g)?,
                    k2: store.add(format!("dam.head{t}.k2"), conv_kernel(1, head_channels, 1, rng), g)?,
                    b2: store.add(format!("dam.head{t}.b2"), Tensor::zeros(&[1]), g)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            w1,
            w2,
            heads,
            channels,
        })
    }
}

/// Per-channel spatial mean.
pub fn squeeze(g: &mut Graph, r: Var) -> Result<Var> {
    g.spatial_mean(r)
}

/// `σ(W2 · relu(W1 · ℓ1))`.
pub fn excite(g: &mut Graph, l1: Var, w1: Var, w2: Var) -> Result<Var> {
    let a = g.linear(l1, w1, None)?;
    let a = g.relu(a)?;
    let b = g.linear(a, w2, None)?;
    g.sigmoid(b)
}

/// `−softmax(r)` per channel.
pub fn invert_representation(g: &mut Graph, r: Var) -> Result<Var> {
    let s = g.spatial_softmax(r)?;
    g.neg(s)
}

fn squeeze_excite_scale(g: &mut Graph, r: Var, w1: Var, w2: Var) -> Result<(Var, Var)> {
    let l1 = squeeze(g, r)?;
    let gains = excite(g, l1, w1, w2)?;
    Ok((g.channel_scale(r, gains)?, gains))
}

/// Scales each timestep's channels by the excitation gains, using the current
/// parameter values as constants so no gradient reaches them.
pub fn direct_stream(g: &mut Graph, store: &ParamStore, p: &DamParams, r_seq: &[Var]) -> Result<Vec<Var>> {
    let w1 = g.constant(store.value(p.w1).clone())?;
    let w2 = g.constant(store.value(p.w2).clone())?;
    r_seq.iter().map(|&r| Ok(squeeze_excite_scale(g, r, w1, w2)?.0)).collect()
}

/// Gains the direct stream applies to `r` (`[C′, H, W]`), outside any graph.
pub fn direct_gains(store: &ParamStore, p: &DamParams, r: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let rv = g.constant(r.clone())?;
    let w1 = g.constant(store.value(p.w1).clone())?;
    let w2 = g.constant(store.value(p.w2).clone())?;
    let l1 = squeeze(&mut g, rv)?;
    let gains = excite(&mut g, l1, w1, w2)?;
    Ok(g.value(gains).clone())
}

pub struct InvertedOut {
    /// One `[1, H/2, W/2]` density per timestep.
    pub maps: Vec<Var>,
    /// Summed cross-entropy against the targets, when targets were given.
    pub loss: Option<Var>,
}

/// Head predictions of the inverted stream. With `targets` (`[T′, 1, H/2, W/2]`
/// densities) the cross-entropy loss is also recorded.
pub fn inverted_stream(
    g: &mut Graph,
    store: &ParamStore,
    p: &DamParams,
    r_seq: &[Var],
    targets: Option<&Tensor>,
) -> Result<InvertedOut> {
    if r_seq.len() != p.heads.len() {
        return Err(Error::shape("inverted_stream", "timesteps", p.heads.len(), r_seq.len()));
    }
    let w1 = g.param(store, p.w1)?;
    let w2 = g.param(store, p.w2)?;
    let mut maps = Vec::with_capacity(r_seq.len());
    for (&r, head) in r_seq.iter().zip(&p.heads) {
        let inv = invert_representation(g, r)?;
        let (scaled, _) = squeeze_excite_scale(g, inv, w1, w2)?;
        let (k1, b1) = (g.param(store, head.k1)?, g.param(store, head.b1)?);
        let x = g.conv2d(scaled, k1, Some(b1), 1)?;
        let x = g.maxpool2(x)?;
        let (k2, b2) = (g.param(store, head.k2)?, g.param(store, head.b2)?);
        let x = g.conv2d(x, k2, Some(b2), 0)?;
        maps.push(g.spatial_softmax(x)?);
    }
    let loss = match targets {
        None => None,
        Some(t) => Some(cross_entropy(g, &maps, t)?),
    };
    Ok(InvertedOut { maps, loss })
}

/// `−Σ target · log(pred + ε)` summed over timesteps and pixels.
pub fn cross_entropy(g: &mut Graph, preds: &[Var], targets: &Tensor) -> Result<Var> {
    if targets.rank() != 4 || targets.shape()[0] < preds.len() {
        return Err(Error::InvalidArgument(format!(
            "DAM loss needs {} target maps, got shape {:?}",
            preds.len(),
            targets.shape()
        )));
    }
    let mut terms = Vec::with_capacity(preds.len());
    for (t, &pred) in preds.iter().enumerate() {
        let target = targets.index_first(t)?;
        if target.shape() != g.value(pred).shape() {
            return Err(Error::shape("dam_loss", format!("target {t}"), format!("{:?}", g.value(pred).shape()), format!("{:?}", target.shape())));
        }
        let lp = g.add_scalar(pred, DAM_LOG_EPS)?;
        let lp = g.log(lp)?;
        let tv = g.constant(target)?;
        let prod = g.mul(tv, lp)?;
        terms.push(g.sum(prod)?);
    }
    let total = add_all(g, &terms)?;
    g.neg(total)
}

/// Sum of same-shaped values.
pub fn add_all(g: &mut Graph, vars: &[Var]) -> Result<Var> {
    let (&first, rest) = vars
        .split_first()
        .ok_or_else(|| Error::InvalidArgument("sum of zero terms".into()))?;
    rest.iter().try_fold(first, |acc, &v| g.add(acc, v))
}

/// Half-resolution target for a head: 2×2 average pooling, renormalized.
pub fn downscale_density(density: &Tensor) -> Result<Tensor> {
    let pooled = avgpool2(density)?;
    let s = pooled.sum();
    if s <= 0.0 {
        return Err(Error::InvalidArgument("density has no mass".into()));
    }
    Ok(pooled.scale(1.0 / s))
}

/// Shannon entropy `−Σ p log p` with the same floor as the loss.
pub fn entropy(p: &Tensor) -> f64 {
    -p.data().iter().map(|&v| v * (v + DAM_LOG_EPS).ln()).sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn setup(channels: usize, context: usize) -> (ParamStore, DamParams) {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let p = DamParams::init(&mut store, channels, 4, context, 4, &mut rng).unwrap();
        (store, p)
    }

    fn rand_map(shape: &[usize], seed: u64) -> Tensor {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn squeeze_examples() {
        let mut g = Graph::new();
        let r = g.constant(Tensor::new(&[2, 2, 2], vec![0.0, 2.0, 4.0, 6.0, 5.0, 5.0, 5.0, 5.0]).unwrap()).unwrap();
        let l = squeeze(&mut g, r).unwrap();
        assert_eq!(g.value(l).data(), &[3.0, 5.0]);
        let r2 = g.scale(r, 3.0).unwrap();
        let l2 = squeeze(&mut g, r2).unwrap();
        assert_eq!(g.value(l2).data(), &[9.0, 15.0]);
    }

    #[test]
    fn excite_examples() {
        let mut g = Graph::new();
        let l = g.constant(Tensor::new(&[1], vec![2.0]).unwrap()).unwrap();
        let w = g.constant(Tensor::full(&[1, 1], 1.0)).unwrap();
        let e = excite(&mut g, l, w, w).unwrap();
        assert!((g.value(e).item() - 0.8808).abs() < 1e-4);
        let l = g.constant(Tensor::new(&[3], vec![-4.0, 0.5, 9.0]).unwrap()).unwrap();
        let (z1, z2) = (g.constant(Tensor::zeros(&[2, 3])).unwrap(), g.constant(Tensor::zeros(&[3, 2])).unwrap());
        let e = excite(&mut g, l, z1, z2).unwrap();
        assert!(g.value(e).data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn inverted_maps_sum_to_minus_one() {
        let mut g = Graph::new();
        let x = rand_map(&[3, 4, 5], 1);
        let r = g.constant(x.clone()).unwrap();
        let inv = invert_representation(&mut g, r).unwrap();
        let v = g.value(inv);
        for c in 0..3 {
            let s: f64 = v.data()[c * 20..(c + 1) * 20].iter().sum();
            assert!((s + 1.0).abs() < 1e-12);
            let block = &x.data()[c * 20..(c + 1) * 20];
            let argmax = block.iter().enumerate().fold(0, |b, (i, &y)| if y > block[b] { i } else { b });
            let inv_block = &v.data()[c * 20..(c + 1) * 20];
            let argmin = inv_block.iter().enumerate().fold(0, |b, (i, &y)| if y < inv_block[b] { i } else { b });
            assert_eq!(argmax, argmin);
        }
        let u = g.constant(Tensor::full(&[1, 2, 2], 7.0)).unwrap();
        let inv = invert_representation(&mut g, u).unwrap();
        assert!(g.value(inv).data().iter().all(|&v| (v + 0.25).abs() < 1e-15));
    }

    #[test]
    fn direct_stream_with_zero_weights_halves() {
        let (mut store, p) = setup(4, 2);
        store.get_mut(p.w1).value.fill(0.0);
        store.get_mut(p.w2).value.fill(0.0);
        let x = rand_map(&[4, 4, 4], 2);
        let mut g = Graph::new();
        let r = g.constant(x.clone()).unwrap();
        let z = g.constant(Tensor::zeros(&[4, 4, 4])).unwrap();
        let out = direct_stream(&mut g, &store, &p, &[r, z]).unwrap();
        assert_eq!(*g.value(out[0]), x.scale(0.5));
        assert!(g.value(out[1]).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn direct_stream_sends_no_gradient_to_dam() {
        let (mut store, p) = setup(4, 1);
        let mut g = Graph::new();
        let w = store.add("probe", rand_map(&[4, 4, 4], 3), ParamGroup::Integration).unwrap();
        let r = g.param(&store, w).unwrap();
        let out = direct_stream(&mut g, &store, &p, &[r]).unwrap();
        let loss = g.sum(out[0]).unwrap();
        g.backward(loss, &mut store).unwrap();
        assert_eq!(store.grad_norm(ParamGroup::Attention), 0.0);
        assert!(store.grad_norm(ParamGroup::Integration) > 0.0);
    }

    #[test]
    fn head_outputs_are_densities_and_loss_bounds_entropy() {
        let (mut store, p) = setup(3, 2);
        let x = [rand_map(&[3, 6, 6], 4), rand_map(&[3, 6, 6], 5)];
        let targets = Tensor::stack(&[
            rand_map(&[1, 3, 3], 6).scale(1.0 / rand_map(&[1, 3, 3], 6).sum()),
            Tensor::full(&[1, 3, 3], 1.0 / 9.0),
        ])
        .unwrap();
        let mut g = Graph::new();
        let r: Vec<Var> = x.iter().map(|t| g.constant(t.clone()).unwrap()).collect();
        let out = inverted_stream(&mut g, &store, &p, &r, Some(&targets)).unwrap();
        for &m in &out.maps {
            assert_eq!(g.value(m).shape(), &[1, 3, 3]);
            assert!((g.value(m).sum() - 1.0).abs() < 1e-12);
        }
        let h: f64 = (0..2).map(|t| entropy(&targets.index_first(t).unwrap())).sum();
        let loss = out.loss.unwrap();
        assert!(g.value(loss).item() >= h - 1e-12);
        g.backward(loss, &mut store).unwrap();
        assert!(store.grad_norm(ParamGroup::Attention) > 0.0);
        assert!(inverted_stream(&mut g, &store, &p, &r[..1], None).is_err());
    }

    #[test]
    fn perfect_prediction_loss_is_entropy() {
        let target = rand_map(&[1, 3, 4], 7);
        let target = target.scale(1.0 / target.sum());
        let mut g = Graph::new();
        let logits = g.constant(target.map(f64::ln)).unwrap();
        let pred = g.spatial_softmax(logits).unwrap();
        let t = target.clone().reshape(&[1, 1, 3, 4]).unwrap();
        let loss = cross_entropy(&mut g, &[pred], &t).unwrap();
        assert!((g.value(loss).item() - entropy(&target)).abs() < 1e-9);
    }

    #[test]
    fn bottleneck_width() {
        assert_eq!(reduced_dim(4, 4).unwrap(), 2);
        assert_eq!(reduced_dim(32, 4).unwrap(), 8);
        assert!(reduced_dim(10, 4).is_err());
    }

    #[test]
    fn downscaled_target_is_density() {
        let d = rand_map(&[1, 4, 6], 8);
        let t = downscale_density(&d).unwrap();
        assert_eq!(t.shape(), &[1, 2, 3]);
        assert!((t.sum() - 1.0).abs() < 1e-12);
    }
}
