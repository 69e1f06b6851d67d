//! Three graph-convolution layers over the per-window adjacency, followed by
//! the linear forecast head.

use diffcore::{ParamId, ParamStore, Tape, Tensor, Var};
use rand::Rng;

use crate::error::{Error, Result};
use crate::init::fan_in_uniform;

#[derive(Debug, Clone, PartialEq)]
pub struct GcnParams {
    /// `(weight, bias)` per layer: `F → hidden → hidden → out`.
    pub layers: [(ParamId, ParamId); 3],
    /// `[out + F, H]`
    pub head_w: ParamId,
    pub head_b: ParamId,
}

impl GcnParams {
    pub fn register(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        horizon: usize,
    ) -> Result<Self> {
        let dims = [(in_dim, hidden), (hidden, hidden), (hidden, out_dim)];
        let mut layers = Vec::with_capacity(3);
        for (l, (fi, fo)) in dims.into_iter().enumerate() {
            let w = store.add(format!("gnn.w{}", l + 1), fan_in_uniform(rng, &[fi, fo], fi))?;
            let b = store.add(format!("gnn.b{}", l + 1), Tensor::zeros(&[fo]))?;
            layers.push((w, b));
        }
        let head_in = out_dim + in_dim;
        Ok(Self {
            layers: [layers[0], layers[1], layers[2]],
            head_w: store.add("head.w", fan_in_uniform(rng, &[head_in, horizon], head_in))?,
            head_b: store.add("head.b", Tensor::zeros(&[horizon]))?,
        })
    }
}

/// `D^{-1/2} (max(Ŝ, 0) + I) D^{-1/2}` for `Ŝ: [B, S, S]`, with `D` the row
/// sums of the bracket.
pub fn normalized_adjacency<'t>(tape: &'t Tape, s_hat: Var<'t>) -> Result<Var<'t>> {
    let shape = s_hat.shape();
    let n = *shape.last().ok_or(Error::Config("empty adjacency".into()))?;
    let a = s_hat.relu().add(tape.constant(Tensor::eye(n)))?;
    let d = a.sum_last()?.powf(-0.5);
    Ok(a.scale_rows(d)?.scale_cols(d)?)
}

fn dense<'t>(x: Var<'t>, w: Var<'t>) -> Result<Var<'t>> {
    let s = x.shape();
    let out = w.shape()[1];
    let rows: usize = s[..s.len() - 1].iter().product();
    let mut shape = s.clone();
    *shape.last_mut().unwrap() = out;
    Ok(x.reshape(&[rows, s[s.len() - 1]])?
        .matmul(w)?
        .reshape(&shape)?)
}

/// One propagation step `Â · (H W) + b` before the activation.
pub fn gcn_layer<'t>(a_norm: Var<'t>, h: Var<'t>, w: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    Ok(a_norm.bmm(dense(h, w)?)?.add(b)?)
}

/// `V′ = Â·tanh(Â·tanh(Â·V·W1)·W2)·W3` with biases; `V: [B, S, F]`.
pub fn gcn_forward<'t>(
    tape: &'t Tape,
    store: &ParamStore,
    p: &GcnParams,
    s_hat: Var<'t>,
    v: Var<'t>,
) -> Result<Var<'t>> {
    let a = normalized_adjacency(tape, s_hat)?;
    let mut h = v;
    for (l, &(w, b)) in p.layers.iter().enumerate() {
        h = gcn_layer(a, h, tape.param(store, w), tape.param(store, b))?;
        if l < 2 {
            h = h.tanh();
        }
    }
    Ok(h)
}

/// `Ŷ = (V′ ∥ V) W + b`, `[B, S, H]`.
pub fn forecast_head<'t>(
    tape: &'t Tape,
    store: &ParamStore,
    p: &GcnParams,
    v_prime: Var<'t>,
    v: Var<'t>,
) -> Result<Var<'t>> {
    let x = Var::concat(&[v_prime, v])?;
    Ok(dense(x, tape.param(store, p.head_w))?.add(tape.param(store, p.head_b))?)
}
