//! Gated multimodal unit over `K` same-sized feature maps.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numeric::param::conv_kernel;
use crate::numeric::{Graph, ParamGroup, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Debug)]
pub struct GmuParams {
    /// `(W_j, b_j)` per modality: `[out, in_k, 1, 1]`, `[out]`.
    pub proj: Vec<(ParamId, ParamId)>,
    /// `(W_d, b_d)` per modality over the concatenated inputs: `[out, Σ in_k, 1, 1]`, `[out]`.
    pub gate: Vec<(ParamId, ParamId)>,
    pub input: usize,
    pub output: usize,
}

impl GmuParams {
    /// `k` inputs of `input` channels each, fused into `output` channels.
    pub fn init(store: &mut ParamStore, prefix: &str, k: usize, input: usize, output: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if k == 0 {
            return Err(Error::Config("GMU needs at least one input".into()));
        }
        let g = ParamGroup::Integration;
        let mut proj = Vec::new();
        let mut gate = Vec::new();
        for m in 0..k {
            proj.push((
                store.add(format!("{prefix}.w_j{m}"), conv_kernel(output, input, 1, rng), g)?,
                store.add(format!("{prefix}.b_j{m}"), Tensor::zeros(&[output]), g)?,
            ));
            gate.push((
                store.add(format!("{prefix}.w_d{m}"), conv_kernel(output, input * k, 1, rng), g)?,
                store.add(format!("{prefix}.b_d{m}"), Tensor::zeros(&[output]), g)?,
            ));
        }
        Ok(Self {
            proj,
            gate,
            input,
            output,
        })
    }
}

/// `Σ_k σ(W_d^k ∗ [s¹..sᴷ] + b_d^k) ⊙ tanh(W_j^k ∗ sᵏ + b_j^k)`.
pub fn gmu_fuse(g: &mut Graph, store: &ParamStore, p: &GmuParams, inputs: &[Var]) -> Result<Var> {
    if inputs.is_empty() {
        return Err(Error::InvalidArgument("gmu_fuse needs at least one input".into()));
    }
    if inputs.len() != p.proj.len() {
        return Err(Error::shape("gmu_fuse", "modalities", p.proj.len(), inputs.len()));
    }
    let all = g.concat(inputs)?;
    let wd: Vec<Var> = p.gate.iter().map(|&(w, _)| g.param(store, w)).collect::<Result<_>>()?;
    let bd: Vec<Var> = p.gate.iter().map(|&(_, b)| g.param(store, b)).collect::<Result<_>>()?;
    let wd = g.concat(&wd)?;
    let bd = g.concat(&bd)?;
    // all K gates in one pass over the concatenated input
    let gates = g.conv2d(all, wd, Some(bd), 0)?;
    let gates = g.sigmoid(gates)?;
    let mut terms = Vec::with_capacity(inputs.len());
    for (k, (&s, &(wj, bj))) in inputs.iter().zip(&p.proj).enumerate() {
        let (wj, bj) = (g.param(store, wj)?, g.param(store, bj)?);
        let j = g.conv2d(s, wj, Some(bj), 0)?;
        let j = g.tanh(j)?;
        let d = g.slice(gates, k * p.output, p.output)?;
        terms.push(g.mul(d, j)?);
    }
    crate::dam::add_all(g, &terms)
}
