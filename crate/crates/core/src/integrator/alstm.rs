//! Attentive convolutional LSTM.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numeric::param::conv_kernel;
use crate::numeric::{Graph, ParamGroup, ParamId, ParamStore, Tensor, Var};

/// Gate order inside the fused kernels: input, forget, output, candidate, attention.
const GATES: [&str; 5] = ["i", "f", "o", "c", "a"];

#[derive(Clone, Debug)]
pub struct AlstmParams {
    /// `W_*`: `[hidden, input, 3, 3]`, in [`GATES`] order.
    pub w: [ParamId; 5],
    /// `U_*`: `[hidden, hidden, 3, 3]`.
    pub u: [ParamId; 5],
    /// `b_*`: `[hidden]`.
    pub b: [ParamId; 5],
    /// `W_q`: `[input, hidden, 3, 3]`, so the attention map has one channel per input channel.
    pub wq: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl AlstmParams {
    pub fn init(store: &mut ParamStore, prefix: &str, input: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let g = ParamGroup::Integration;
        let mut w = Vec::new();
        let mut u = Vec::new();
        let mut b = Vec::new();
        for gate in GATES {
            w.push(store.add(format!("{prefix}.w_{gate}"), conv_kernel(hidden, input, 3, rng), g)?);
            u.push(store.add(format!("{prefix}.u_{gate}"), conv_kernel(hidden, hidden, 3, rng), g)?);
            b.push(store.add(format!("{prefix}.b_{gate}"), Tensor::zeros(&[hidden]), g)?);
        }
        let wq = store.add(format!("{prefix}.w_q"), conv_kernel(input, hidden, 3, rng), g)?;
        let arr = |v: Vec<ParamId>| -> [ParamId; 5] { v.try_into().expect("five gates") };
        Ok(Self {
            w: arr(w),
            u: arr(u),
            b: arr(b),
            wq,
            input,
            hidden,
        })
    }
}

/// Recurrent state. All fields are absent before the first step, which is
/// equivalent to `h = c = 0` with attention bypassed.
#[derive(Clone, Copy, Debug, Default)]
pub struct AlstmState {
    pub h: Option<Var>,
    pub c: Option<Var>,
    pub q: Option<Var>,
}

/// `HW · softmax(q_prev) ⊙ s′`, or `s′` unchanged at the first step. The
/// attention map has unit mean, so a flat `q` passes the input through.
pub fn alstm_attend(g: &mut Graph, q_prev: Option<Var>, s_raw: Var) -> Result<Var> {
    match q_prev {
        None => Ok(s_raw),
        Some(q) => {
            let (qc, sc) = (g.value(q).shape()[0], g.value(s_raw).shape()[0]);
            if qc != sc {
                return Err(Error::shape("alstm_attend", "channels (axis 0)", sc, qc));
            }
            let hw = { let s = g.value(q).shape(); (s[1] * s[2]) as f64 };
            let a = g.spatial_softmax(q)?;
            let a = g.scale(a, hw)?;
            g.mul(a, s_raw)
        }
    }
}

/// One recurrent step on the raw input `s_raw` (`[input, H, W]`).
pub fn alstm_step(g: &mut Graph, store: &ParamStore, p: &AlstmParams, s_raw: Var, state: &AlstmState) -> Result<AlstmState> {
    let cin = g.value(s_raw).shape()[0];
    if cin != p.input {
        return Err(Error::shape("alstm_step", "input channels (axis 0)", p.input, cin));
    }
    let s = alstm_attend(g, state.q, s_raw)?;
    let hd = p.hidden;
    let w: Vec<Var> = p.w.iter().map(|&id| g.param(store, id)).collect::<Result<_>>()?;
    let b: Vec<Var> = p.b.iter().map(|&id| g.param(store, id)).collect::<Result<_>>()?;
    let w = g.concat(&w)?;
    let b = g.concat(&b)?;
    let mut pre = g.conv2d(s, w, Some(b), 1)?;
    if let Some(h_prev) = state.h {
        let u: Vec<Var> = p.u.iter().map(|&id| g.param(store, id)).collect::<Result<_>>()?;
        let u = g.concat(&u)?;
        let rec = g.conv2d(h_prev, u, None, 1)?;
        pre = g.add(pre, rec)?;
    }
    let gate = |g: &mut Graph, k: usize| g.slice(pre, k * hd, hd);
    let i = gate(g, 0)?;
    let i = g.sigmoid(i)?;
    let f = gate(g, 1)?;
    let f = g.sigmoid(f)?;
    let o = gate(g, 2)?;
    let o = g.sigmoid(o)?;
    let cand = gate(g, 3)?;
    let cand = g.tanh(cand)?;
    let ig = g.mul(i, cand)?;
    let c = match state.c {
        Some(c_prev) => {
            let fc = g.mul(f, c_prev)?;
            g.add(fc, ig)?
        }
        None => ig,
    };
    let tc = g.tanh(c)?;
    let h = g.mul(o, tc)?;
    let a = gate(g, 4)?;
    let a = g.tanh(a)?;
    let wq = g.param(store, p.wq)?;
    let q = g.conv2d(a, wq, None, 1)?;
    Ok(AlstmState {
        h: Some(h),
        c: Some(c),
        q: Some(q),
    })
}

/// Runs the sequence and returns the final hidden state.
pub fn alstm_run(g: &mut Graph, store: &ParamStore, p: &AlstmParams, seq: &[Var]) -> Result<Var> {
    let mut state = AlstmState::default();
    for &s in seq {
        state = alstm_step(g, store, p, s, &state)?;
    }
    state.h.ok_or_else(|| Error::InvalidArgument("recurrence over an empty sequence".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{finite_diff_check, FdOptions};
    use rand::{Rng, SeedableRng};

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn zero_params_give_zero_hidden() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let p = AlstmParams::init(&mut store, "a", 2, 3, &mut rng).unwrap();
        for p in store.iter_mut() {
            p.value.fill(0.0);
        }
        let mut g = Graph::new();
        let s = g.constant(rand_tensor(&[2, 4, 4], &mut rng)).unwrap();
        let st = alstm_step(&mut g, &store, &p, s, &AlstmState::default()).unwrap();
        assert!(g.value(st.h.unwrap()).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn saturated_forget_gate_keeps_cell() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let p = AlstmParams::init(&mut store, "a", 2, 3, &mut rng).unwrap();
        store.get_mut(p.b[1]).value.fill(20.0);
        store.get_mut(p.b[0]).value.fill(-20.0);
        let mut g = Graph::new();
        let s1 = g.constant(rand_tensor(&[2, 4, 4], &mut rng)).unwrap();
        let s2 = g.constant(rand_tensor(&[2, 4, 4], &mut rng)).unwrap();
        let c0 = g.constant(rand_tensor(&[3, 4, 4], &mut rng)).unwrap();
        let h0 = g.constant(rand_tensor(&[3, 4, 4], &mut rng)).unwrap();
        let st = AlstmState {
            h: Some(h0),
            c: Some(c0),
            q: None,
        };
        let st = alstm_step(&mut g, &store, &p, s1, &st).unwrap();
        let st2 = alstm_step(&mut g, &store, &p, s2, &st).unwrap();
        let (a, b) = (g.value(st.c.unwrap()), g.value(c0));
        assert!(a.l1_distance(b) / a.len() as f64 <= 1e-6);
        assert!(g.value(st2.c.unwrap()).l1_distance(b) / a.len() as f64 <= 1e-6);
    }

    #[test]
    fn attention_rules() {
        let mut g = Graph::new();
        let s = g.constant(Tensor::from_fn(&[2, 3, 3], |i| i as f64)).unwrap();
        assert_eq!(alstm_attend(&mut g, None, s).unwrap(), s);
        let q = g.constant(Tensor::full(&[2, 3, 3], 0.3)).unwrap();
        let a = alstm_attend(&mut g, Some(q), s).unwrap();
        for (x, y) in g.value(a).data().iter().zip(g.value(s).data()) {
            assert!((x - y).abs() < 1e-14);
        }
        let q = g.constant(Tensor::from_fn(&[2, 3, 3], |i| if i % 9 == 4 { 100.0 } else { 0.0 })).unwrap();
        let a = alstm_attend(&mut g, Some(q), s).unwrap();
        for (i, (x, y)) in g.value(a).data().iter().zip(g.value(s).data()).enumerate() {
            let expect = if i % 9 == 4 { 9.0 * y } else { 0.0 };
            assert!((x - expect).abs() < 1e-40f64.max(1e-12 * y.abs()), "{i}: {x} vs {expect}");
        }
        let bad = g.constant(Tensor::zeros(&[3, 3, 3])).unwrap();
        assert!(alstm_attend(&mut g, Some(bad), s).is_err());
    }

    #[test]
    fn step_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let p = AlstmParams::init(&mut store, "a", 2, 3, &mut rng).unwrap();
        let seq: Vec<Tensor> = (0..3).map(|_| rand_tensor(&[2, 4, 4], &mut rng)).collect();
        let ids: Vec<_> = store.ids().collect();
        let r = finite_diff_check(&mut store, &ids, &FdOptions::default(), |g, s| {
            let xs: Vec<Var> = seq.iter().map(|t| g.constant(t.clone())).collect::<Result<_>>()?;
            let h = alstm_run(g, s, &p, &xs)?;
            g.sum(h)
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }
}
