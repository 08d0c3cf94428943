//! Per-modality convolutional encoders.

use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::numeric::param::conv_kernel;
use crate::numeric::{Graph, ParamGroup, ParamId, ParamStore, Tensor, Var};

/// Two shape-preserving 3×3 convolutions with ReLU: `1 → c1 → c2` channels.
#[derive(Clone, Debug)]
pub struct EncoderParams {
    pub k1: ParamId,
    pub b1: ParamId,
    pub k2: ParamId,
    pub b2: ParamId,
    pub channels: (usize, usize),
}

impl EncoderParams {
    pub fn init(store: &mut ParamStore, prefix: &str, channels: (usize, usize), rng: &mut ChaCha8Rng) -> Result<Self> {
        let g = ParamGroup::Integration;
        Ok(Self {
            k1: store.add(format!("{prefix}.k1"), conv_kernel(channels.0, 1, 3, rng), g)?,
            b1: store.add(format!("{prefix}.b1"), Tensor::zeros(&[channels.0]), g)?,
            k2: store.add(format!("{prefix}.k2"), conv_kernel(channels.1, channels.0, 3, rng), g)?,
            b2: store.add(format!("{prefix}.b2"), Tensor::zeros(&[channels.1]), g)?,
            channels,
        })
    }
}

/// Encodes one `[1, H, W]` map into `[c2, H, W]` features.
pub fn encode_frame(g: &mut Graph, store: &ParamStore, p: &EncoderParams, x: Var) -> Result<Var> {
    let (k1, b1) = (g.param(store, p.k1)?, g.param(store, p.b1)?);
    let y = g.conv2d(x, k1, Some(b1), 1)?;
    let y = g.relu(y)?;
    let (k2, b2) = (g.param(store, p.k2)?, g.param(store, p.b2)?);
    let y = g.conv2d(y, k2, Some(b2), 1)?;
    g.relu(y)
}

/// Encodes every timestep of a modality sequence.
pub fn encode_modality(g: &mut Graph, store: &ParamStore, p: &EncoderParams, seq: &[Var]) -> Result<Vec<Var>> {
    seq.iter().map(|&x| encode_frame(g, store, p, x)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{finite_diff_check, FdOptions};
    use rand::{Rng, SeedableRng};

    #[test]
    fn zero_input_gives_bias_driven_constants() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let p = EncoderParams::init(&mut store, "enc", (3, 4), &mut rng).unwrap();
        store.get_mut(p.b1).value = Tensor::new(&[3], vec![0.5, -1.0, 2.0]).unwrap();
        store.get_mut(p.b2).value = Tensor::new(&[4], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        store.get_mut(p.k2).value.fill(0.0);
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 5, 3])).unwrap();
        let y = encode_frame(&mut g, &store, &p, x).unwrap();
        let v = g.value(y);
        assert_eq!(v.shape(), &[4, 5, 3]);
        for c in 0..4 {
            assert!(v.data()[c * 15..(c + 1) * 15].iter().all(|&a| (a - 0.1 * (c + 1) as f64).abs() < 1e-15));
        }
    }

    #[test]
    fn gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let p = EncoderParams::init(&mut store, "enc", (2, 3), &mut rng).unwrap();
        for id in [p.b1, p.b2] {
            store.get_mut(id).value = Tensor::full(&[store.value(id).len()], 0.05);
        }
        let x: Vec<Tensor> = (0..2).map(|_| Tensor::from_fn(&[1, 4, 4], |_| rng.gen_range(0.0..1.0))).collect();
        let ids: Vec<_> = store.ids().collect();
        let r = finite_diff_check(&mut store, &ids, &FdOptions::default(), |g, s| {
            let xs: Vec<Var> = x.iter().map(|t| g.constant(t.clone())).collect::<Result<_>>()?;
            let ys = encode_modality(g, s, &p, &xs)?;
            let y = g.concat(&ys)?;
            let y = g.tanh(y)?;
            g.sum(y)
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }
}
