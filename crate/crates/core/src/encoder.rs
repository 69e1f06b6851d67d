//! Per-series temporal encoder: scalar lift, GRU, attention summary, and
//! residual layer norm.
//!
//! Every series owns its lift and GRU weights; they are stored stacked along a
//! leading series axis so that all series run in one batched product. The
//! attention vector and the layer-norm affine are shared.
//!
//! GRU convention (gates over `[r | z | n]` column blocks):
//!
//! ```text
//! r = σ(x Wx_r + bx_r + h Wh_r + bh_r)
//! z = σ(x Wx_z + bx_z + h Wh_z + bh_z)
//! n = tanh(x Wx_n + bx_n + r ⊙ (h Wh_n + bh_n))
//! h' = h + z ⊙ (n − h)
//! ```
//!
//! so a closed update gate (`z = 0`) freezes the state.

use diffcore::{ParamId, ParamStore, Tape, Tensor, Var};
use rand::Rng;

use crate::error::{Error, Result};
use crate::init::fan_in_uniform;

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub n_series: usize,
    pub lift_dim: usize,
    pub hidden: usize,
    /// `[S, 1, D]`
    pub lift_w1: ParamId,
    /// `[S, D]`
    pub lift_b1: ParamId,
    /// `[S, D, D]`
    pub lift_w2: ParamId,
    pub lift_b2: ParamId,
    /// `[S, D, 3M]`
    pub gru_wx: ParamId,
    /// `[S, 3M]`
    pub gru_bx: ParamId,
    /// `[S, M, 3M]`
    pub gru_wh: ParamId,
    pub gru_bh: ParamId,
    /// Attention weights on the step state, `[M, 1]`.
    pub attn_h: ParamId,
    /// Attention weights on the final state, `[M, 1]`.
    pub attn_z: ParamId,
    pub ln_gain: ParamId,
    pub ln_bias: ParamId,
}

impl EncoderParams {
    pub fn register(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        n_series: usize,
        lift_dim: usize,
        hidden: usize,
    ) -> Result<Self> {
        let (s, d, m) = (n_series, lift_dim, hidden);
        Ok(Self {
            n_series,
            lift_dim,
            hidden,
            lift_w1: store.add("encoder.lift_w1", fan_in_uniform(rng, &[s, 1, d], 1))?,
            lift_b1: store.add("encoder.lift_b1", Tensor::zeros(&[s, d]))?,
            lift_w2: store.add("encoder.lift_w2", fan_in_uniform(rng, &[s, d, d], d))?,
            lift_b2: store.add("encoder.lift_b2", Tensor::zeros(&[s, d]))?,
            gru_wx: store.add("encoder.gru_wx", fan_in_uniform(rng, &[s, d, 3 * m], d))?,
            gru_bx: store.add("encoder.gru_bx", Tensor::zeros(&[s, 3 * m]))?,
            gru_wh: store.add("encoder.gru_wh", fan_in_uniform(rng, &[s, m, 3 * m], m))?,
            gru_bh: store.add("encoder.gru_bh", Tensor::zeros(&[s, 3 * m]))?,
            attn_h: store.add("encoder.attn_h", fan_in_uniform(rng, &[m, 1], 2 * m))?,
            attn_z: store.add("encoder.attn_z", fan_in_uniform(rng, &[m, 1], 2 * m))?,
            ln_gain: store.add("encoder.ln_gain", Tensor::ones(&[m]))?,
            ln_bias: store.add("encoder.ln_bias", Tensor::zeros(&[m]))?,
        })
    }
}

/// Intermediate values of one encoder pass over `B` windows.
pub struct EncoderOutput<'t> {
    /// Temporal embeddings `[B, S, M]`.
    pub c: Var<'t>,
    /// GRU states per step, each `[S, B, M]`.
    pub states: Vec<Var<'t>>,
    /// Attention weights `[S·B, T]`; absent without self-attention.
    pub attention: Option<Var<'t>>,
    /// Value fed to the layer norm, `[S, B, M]`.
    pub pre_norm: Var<'t>,
}

/// Lifts each scalar of `x: [S, B, T]` to a `D`-vector: `[S, B·T, D]`, rows in
/// `(b, t)` order.
pub fn lift_series<'t>(
    tape: &'t Tape,
    store: &ParamStore,
    p: &EncoderParams,
    x: &Tensor,
) -> Result<Var<'t>> {
    let &[s, b, t] = x.shape() else {
        return Err(Error::Config(format!(
            "encoder input must be [series, batch, steps], got {:?}",
            x.shape()
        )));
    };
    if s != p.n_series {
        return Err(Error::Config(format!(
            "encoder sized for {} series, got {s}",
            p.n_series
        )));
    }
    let x = tape.input(x.clone().reshape(&[s, b * t, 1])?);
    let h = x
        .bmm(tape.param(store, p.lift_w1))?
        .add_rows(tape.param(store, p.lift_b1))?
        .tanh();
    Ok(h
        .bmm(tape.param(store, p.lift_w2))?
        .add_rows(tape.param(store, p.lift_b2))?)
}

/// Runs the GRU over lifted inputs `[S, B·T, D]` from a zero state and returns
/// the state after every step, each `[S, B, M]`.
pub fn gru_forward<'t>(
    tape: &'t Tape,
    store: &ParamStore,
    p: &EncoderParams,
    lifted: Var<'t>,
    batch: usize,
    steps: usize,
) -> Result<Vec<Var<'t>>> {
    let (s, m) = (p.n_series, p.hidden);
    let gates_in = lifted
        .bmm(tape.param(store, p.gru_wx))?
        .add_rows(tape.param(store, p.gru_bx))?
        .reshape(&[s, batch, steps * 3 * m])?;
    let wh = tape.param(store, p.gru_wh);
    let bh = tape.param(store, p.gru_bh);
    let mut h = tape.constant(Tensor::zeros(&[s, batch, m]));
    let mut states = Vec::with_capacity(steps);
    for step in 0..steps {
        let gi = gates_in.slice_last(step * 3 * m, 3 * m)?;
        let gh = h.bmm(wh)?.add_rows(bh)?;
        let r = gi
            .slice_last(0, m)?
            .add(gh.slice_last(0, m)?)?
            .sigmoid();
        let z = gi
            .slice_last(m, m)?
            .add(gh.slice_last(m, m)?)?
            .sigmoid();
        let n = gi
            .slice_last(2 * m, m)?
            .add(r.mul(gh.slice_last(2 * m, m)?)?)?
            .tanh();
        h = h.add(z.mul(n.sub(h)?)?)?;
        states.push(h);
    }
    Ok(states)
}

/// Attention-weighted summary of the states plus the final state, layer
/// normalised. Returns `(c, attention, pre_norm)` with `c: [S, B, M]`.
pub fn attend_summarize<'t>(
    tape: &'t Tape,
    store: &ParamStore,
    p: &EncoderParams,
    states: &[Var<'t>],
    eps: f64,
) -> Result<(Var<'t>, Var<'t>, Var<'t>)> {
    let last = *states.last().ok_or(Error::Config("no GRU states".into()))?;
    let shape = last.shape();
    let (s, b, m) = (shape[0], shape[1], shape[2]);
    let steps = states.len();
    let hs = Var::concat(states)?.reshape(&[s * b, steps, m])?;
    let score_h = hs
        .reshape(&[s * b * steps, m])?
        .matmul(tape.param(store, p.attn_h))?
        .reshape(&[s * b, steps, 1])?;
    let score_z = last
        .reshape(&[s * b, m])?
        .matmul(tape.param(store, p.attn_z))?;
    let attention = score_h
        .add_rows(score_z)?
        .tanh()
        .reshape(&[s * b, steps])?
        .softmax_last();
    let summary = attention
        .reshape(&[s * b, 1, steps])?
        .bmm(hs)?
        .reshape(&[s, b, m])?;
    let pre_norm = last.add(summary)?;
    let c = pre_norm.layer_norm(
        tape.param(store, p.ln_gain),
        tape.param(store, p.ln_bias),
        eps,
    )?;
    Ok((c, attention, pre_norm))
}

/// Encodes `x: [S, B, T]` (normalised windows, series-major) into `[B, S, M]`.
pub fn encode_all<'t>(
    tape: &'t Tape,
    store: &ParamStore,
    p: &EncoderParams,
    x: &Tensor,
    eps: f64,
    self_attention: bool,
) -> Result<EncoderOutput<'t>> {
    let lifted = lift_series(tape, store, p, x)?;
    let (b, t) = (x.shape()[1], x.shape()[2]);
    let states = gru_forward(tape, store, p, lifted, b, t)?;
    let (c, attention, pre_norm) = if self_attention {
        let (c, a, pre) = attend_summarize(tape, store, p, &states, eps)?;
        (c, Some(a), pre)
    } else {
        let last = *states.last().ok_or(Error::Config("empty window".into()))?;
        let c = last.layer_norm(
            tape.param(store, p.ln_gain),
            tape.param(store, p.ln_bias),
            eps,
        )?;
        (c, None, last)
    };
    Ok(EncoderOutput {
        c: c.permute01()?,
        states,
        attention,
        pre_norm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(s: usize, d: usize, m: usize) -> (ParamStore, EncoderParams) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = EncoderParams::register(&mut store, &mut rng, s, d, m).unwrap();
        (store, p)
    }

    fn random_input(s: usize, b: usize, t: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..s * b * t).map(|_| rng.random_range(-2.0..2.0)).collect();
        Tensor::new(&[s, b, t], data).unwrap()
    }

    #[test]
    fn zero_lift_weights_give_zero_output() {
        let (mut store, p) = setup(2, 3, 4);
        for id in [p.lift_w1, p.lift_w2] {
            let shape = store.value(id).shape().to_vec();
            store.set_value(store.get(id).name().to_string().as_str(), Tensor::zeros(&shape)).unwrap();
        }
        let tape = Tape::new();
        let out = lift_series(&tape, &store, &p, &random_input(2, 1, 5, 1)).unwrap();
        assert_eq!(out.shape(), vec![2, 5, 3]);
        assert!(out.value().data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn closed_update_gate_freezes_zero_state() {
        let (mut store, p) = setup(1, 2, 3);
        let m = 3;
        let mut bx = Tensor::zeros(&[1, 3 * m]);
        for j in m..2 * m {
            bx.data_mut()[j] = -1000.0;
        }
        store.set_value("encoder.gru_bx", bx).unwrap();
        let tape = Tape::new();
        let out = encode_all(&tape, &store, &p, &random_input(1, 2, 6, 2), 1e-5, true).unwrap();
        for h in &out.states {
            assert!(h.value().data().iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn single_step_summary_doubles_final_state() {
        let (store, p) = setup(2, 3, 4);
        let tape = Tape::new();
        let out = encode_all(&tape, &store, &p, &random_input(2, 3, 1, 3), 1e-5, true).unwrap();
        assert_eq!(out.states.len(), 1);
        assert!(out.attention.unwrap().value().data().iter().all(|a| *a == 1.0));
        let z = out.states[0].value();
        let pre = out.pre_norm.value();
        for (a, b) in pre.data().iter().zip(z.data()) {
            assert!((a - 2.0 * b).abs() < 1e-15);
        }
    }

    #[test]
    fn attention_is_a_distribution() {
        let (store, p) = setup(3, 4, 4);
        let tape = Tape::new();
        let out = encode_all(&tape, &store, &p, &random_input(3, 2, 7, 4), 1e-5, true).unwrap();
        let a = out.attention.unwrap().value();
        for row in a.data().chunks(7) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|v| *v > 0.0));
        }
        assert_eq!(out.c.shape(), vec![2, 3, 4]);
    }

    #[test]
    fn series_count_mismatch_is_config_error() {
        let (store, p) = setup(3, 2, 2);
        let tape = Tape::new();
        assert!(matches!(
            encode_all(&tape, &store, &p, &random_input(2, 1, 4, 5), 1e-5, true),
            Err(Error::Config(_))
        ));
    }
}
