//! LSTM and bidirectional LSTM built from tape primitives.
//!
//! Gate order is input, forget, cell, output (`i, f, g, o`); each gate has
//! its own input matrix `wx [H, D]`, recurrent matrix `wh [H, H]`, and bias
//! `b [H]`, named `{prefix}.wx_i`, `{prefix}.wh_i`, `{prefix}.b_i` and so on.

use super::params::ParamSet;
use super::tape::{Tape, Var};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};
use rand::Rng;

const GATES: [char; 4] = ['i', 'f', 'g', 'o'];

/// Tape handles for one LSTM's parameters.
pub struct LstmVars<'t, S: Scalar> {
    pub wx: [Var<'t, S>; 4],
    pub wh: [Var<'t, S>; 4],
    pub b: [Var<'t, S>; 4],
}

/// Register LSTM parameters under `prefix`. The forget-gate bias starts at
/// 1.0 so long sequences keep gradient flow early in training.
pub fn init_lstm_params<S: Scalar, R: Rng>(
    ps: &mut ParamSet<S>,
    prefix: &str,
    input_dim: usize,
    hidden: usize,
    rng: &mut R,
) -> Result<()> {
    for gate in GATES {
        ps.insert_glorot(&format!("{prefix}.wx_{gate}"), &[hidden, input_dim], input_dim, hidden, rng)?;
        ps.insert_glorot(&format!("{prefix}.wh_{gate}"), &[hidden, hidden], hidden, hidden, rng)?;
        let bias = if gate == 'f' { 1.0 } else { 0.0 };
        ps.insert_full(&format!("{prefix}.b_{gate}"), &[hidden], bias, true)?;
    }
    Ok(())
}

impl<'t, S: Scalar> LstmVars<'t, S> {
    /// Bind the parameters registered by [`init_lstm_params`] onto a tape.
    pub fn from_params(tape: &'t Tape<S>, ps: &ParamSet<S>, prefix: &str) -> Result<Self> {
        let mut wx = Vec::with_capacity(4);
        let mut wh = Vec::with_capacity(4);
        let mut b = Vec::with_capacity(4);
        for gate in GATES {
            wx.push(tape.param(ps, &format!("{prefix}.wx_{gate}"))?);
            wh.push(tape.param(ps, &format!("{prefix}.wh_{gate}"))?);
            b.push(tape.param(ps, &format!("{prefix}.b_{gate}"))?);
        }
        let into4 = |v: Vec<Var<'t, S>>| -> [Var<'t, S>; 4] {
            [v[0], v[1], v[2], v[3]]
        };
        Ok(LstmVars {
            wx: into4(wx),
            wh: into4(wh),
            b: into4(b),
        })
    }

    pub fn hidden(&self) -> usize {
        self.b[0].value().numel()
    }
}

/// Run an LSTM over `xs` (each `[D]`). Returns per-step hidden states and
/// the final `(h, c)` pair.
pub fn lstm_sequence<'t, S: Scalar>(
    xs: &[Var<'t, S>],
    p: &LstmVars<'t, S>,
) -> Result<(Vec<Var<'t, S>>, (Var<'t, S>, Var<'t, S>))> {
    let first = xs
        .first()
        .ok_or_else(|| Error::Config("lstm_sequence: empty input sequence".into()))?;
    let tape = first.tape();
    let hidden = p.hidden();
    let mut h = tape.constant(Tensor::zeros(&[hidden]));
    let mut c = tape.constant(Tensor::zeros(&[hidden]));
    let mut outputs = Vec::with_capacity(xs.len());
    for &x in xs {
        let gate = |k: usize| p.wx[k].matvec(x).add(p.wh[k].matvec(h)).add(p.b[k]);
        let i = gate(0).sigmoid();
        let f = gate(1).sigmoid();
        let g = gate(2).tanh();
        let o = gate(3).sigmoid();
        c = f.mul(c).add(i.mul(g));
        h = o.mul(c.tanh());
        outputs.push(h);
    }
    Ok((outputs, (h, c)))
}

/// Bidirectional LSTM: per step, the forward hidden state concatenated with
/// the backward hidden state for the same position, each `[2H]`.
pub fn bilstm_sequence<'t, S: Scalar>(
    xs: &[Var<'t, S>],
    fwd: &LstmVars<'t, S>,
    bwd: &LstmVars<'t, S>,
) -> Result<Vec<Var<'t, S>>> {
    let (fwd_out, _) = lstm_sequence(xs, fwd)?;
    let reversed: Vec<Var<'t, S>> = xs.iter().rev().copied().collect();
    let (mut bwd_out, _) = lstm_sequence(&reversed, bwd)?;
    bwd_out.reverse();
    let tape = xs[0].tape();
    Ok(fwd_out
        .iter()
        .zip(&bwd_out)
        .map(|(&hf, &hb)| tape.concat(&[hf, hb]))
        .collect())
}
