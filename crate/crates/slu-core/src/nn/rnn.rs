//! LSTM and GRU layers over per-timestep batch tensors.
//!
//! A layer consumes `xs[t]` of shape B×Din and produces B×H per step
//! (B×2H when bidirectional). Per-utterance lengths are enforced by zeroing
//! hidden and cell state at padded steps, so the backward direction starts
//! at each utterance's own last valid frame and padded outputs stay zero.

use crate::autodiff::{NodeId, Tape};
use crate::error::{Result, SluError};
use crate::nn::ParamSet;
use crate::tensor::{Scalar, Tensor};
use rand::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CellKind {
    Lstm,
    Gru,
}

impl CellKind {
    pub fn gate_multiple(self) -> usize {
        match self {
            CellKind::Lstm => 4,
            CellKind::Gru => 3,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            CellKind::Lstm => "lstm",
            CellKind::Gru => "gru",
        }
    }
}

/// Register parameters for one cell direction under `prefix`:
/// `{prefix}.w_ih` (Din×gH), `{prefix}.w_hh` (H×gH), `{prefix}.bias` (gH).
/// Matrices init uniform ±1/sqrt(fan-in); biases zero except the LSTM forget
/// gate slice at +1.
pub fn register_cell<F: Scalar, R: Rng>(
    params: &mut ParamSet<F>,
    prefix: &str,
    kind: CellKind,
    input_dim: usize,
    hidden: usize,
    rng: &mut R,
) -> Result<()> {
    let g = kind.gate_multiple();
    let w_ih = Tensor::uniform(
        vec![input_dim, g * hidden],
        1.0 / (input_dim as f64).sqrt(),
        rng,
    );
    let w_hh = Tensor::uniform(vec![hidden, g * hidden], 1.0 / (hidden as f64).sqrt(), rng);
    let mut bias = Tensor::zeros(vec![g * hidden]);
    if kind == CellKind::Lstm {
        for b in &mut bias.data_mut()[hidden..2 * hidden] {
            *b = F::one();
        }
    }
    params.add(&format!("{prefix}.w_ih"), w_ih)?;
    params.add(&format!("{prefix}.w_hh"), w_hh)?;
    params.add(&format!("{prefix}.bias"), bias)?;
    Ok(())
}

/// Bound tape nodes for one cell direction.
pub struct CellNodes {
    pub w_ih: NodeId,
    pub w_hh: NodeId,
    pub bias: NodeId,
}

pub fn bind_cell<F: Scalar>(params: &ParamSet<F>, tape: &mut Tape<F>, prefix: &str) -> CellNodes {
    CellNodes {
        w_ih: params.bind(tape, &format!("{prefix}.w_ih")),
        w_hh: params.bind(tape, &format!("{prefix}.w_hh")),
        bias: params.bind(tape, &format!("{prefix}.bias")),
    }
}

fn lstm_step<F: Scalar>(
    tape: &mut Tape<F>,
    x: NodeId,
    h: NodeId,
    c: NodeId,
    cell: &CellNodes,
    hidden: usize,
) -> (NodeId, NodeId) {
    let xi = tape.matmul(x, cell.w_ih);
    let hh = tape.matmul(h, cell.w_hh);
    let pre = tape.add(xi, hh);
    let gates = tape.add_bias(pre, cell.bias);
    let i_raw = tape.slice_cols(gates, 0, hidden);
    let f_raw = tape.slice_cols(gates, hidden, hidden);
    let g_raw = tape.slice_cols(gates, 2 * hidden, hidden);
    let o_raw = tape.slice_cols(gates, 3 * hidden, hidden);
    let i = tape.sigmoid(i_raw);
    let f = tape.sigmoid(f_raw);
    let g = tape.tanh(g_raw);
    let o = tape.sigmoid(o_raw);
    let fc = tape.mul(f, c);
    let ig = tape.mul(i, g);
    let c_next = tape.add(fc, ig);
    let c_act = tape.tanh(c_next);
    let h_next = tape.mul(o, c_act);
    (h_next, c_next)
}

fn gru_step<F: Scalar>(
    tape: &mut Tape<F>,
    x: NodeId,
    h: NodeId,
    cell: &CellNodes,
    hidden: usize,
) -> NodeId {
    let xi = tape.matmul(x, cell.w_ih);
    let xib = tape.add_bias(xi, cell.bias);
    let hh = tape.matmul(h, cell.w_hh);
    let xr = tape.slice_cols(xib, 0, hidden);
    let xz = tape.slice_cols(xib, hidden, hidden);
    let xn = tape.slice_cols(xib, 2 * hidden, hidden);
    let hr = tape.slice_cols(hh, 0, hidden);
    let hz = tape.slice_cols(hh, hidden, hidden);
    let hn = tape.slice_cols(hh, 2 * hidden, hidden);
    let r_pre = tape.add(xr, hr);
    let z_pre = tape.add(xz, hz);
    let r = tape.sigmoid(r_pre);
    let z = tape.sigmoid(z_pre);
    let rhn = tape.mul(r, hn);
    let n_pre = tape.add(xn, rhn);
    let n = tape.tanh(n_pre);
    // h' = z*h + (1-z)*n  =  n + z*(h - n)
    let hmn = tape.sub(h, n);
    let zd = tape.mul(z, hmn);
    tape.add(n, zd)
}

/// Per-step row masks: 1 where t < len, else 0.
pub fn step_masks<F: Scalar>(lengths: &[usize], steps: usize) -> Vec<Vec<F>> {
    (0..steps)
        .map(|t| {
            lengths
                .iter()
                .map(|&l| if t < l { F::one() } else { F::zero() })
                .collect()
        })
        .collect()
}

/// Run one direction of a recurrent layer. `reverse` walks time backwards
/// (outputs are still indexed by original time). State is zeroed at padded
/// steps so each utterance's recurrence spans exactly its valid frames.
pub fn rnn_direction<F: Scalar>(
    tape: &mut Tape<F>,
    xs: &[NodeId],
    cell: &CellNodes,
    kind: CellKind,
    hidden: usize,
    lengths: &[usize],
    reverse: bool,
) -> Vec<NodeId> {
    let steps = xs.len();
    let batch = lengths.len();
    let masks = step_masks::<F>(lengths, steps);
    let zero = tape.constant(Tensor::zeros(vec![batch, hidden]));
    let mut h = zero;
    let mut c = zero;
    let mut out = vec![zero; steps];
    let order: Vec<usize> = if reverse {
        (0..steps).rev().collect()
    } else {
        (0..steps).collect()
    };
    for t in order {
        match kind {
            CellKind::Lstm => {
                let (h_next, c_next) = lstm_step(tape, xs[t], h, c, cell, hidden);
                h = tape.scale_rows(h_next, masks[t].clone());
                c = tape.scale_rows(c_next, masks[t].clone());
            }
            CellKind::Gru => {
                let h_next = gru_step(tape, xs[t], h, cell, hidden);
                h = tape.scale_rows(h_next, masks[t].clone());
            }
        }
        out[t] = h;
    }
    out
}

/// Full (optionally bidirectional) recurrent layer. Bidirectional output is
/// the concatenation [forward ; backward] per step, width 2H.
#[allow(clippy::too_many_arguments)]
pub fn rnn_layer_forward<F: Scalar>(
    tape: &mut Tape<F>,
    xs: &[NodeId],
    params: &ParamSet<F>,
    prefix: &str,
    kind: CellKind,
    hidden: usize,
    bidirectional: bool,
    lengths: &[usize],
) -> Result<Vec<NodeId>> {
    if xs.is_empty() {
        return Err(SluError::InvalidArgument(
            "rnn layer needs at least one timestep".into(),
        ));
    }
    let in_dim = tape.value(xs[0]).cols();
    let expect = params
        .value(&format!("{prefix}.fwd.w_ih"))
        .ok_or_else(|| SluError::Shape(format!("missing cell params under `{prefix}.fwd`")))?
        .rows();
    if in_dim != expect {
        return Err(SluError::Shape(format!(
            "input width {in_dim} does not match cell input dim {expect} at `{prefix}`"
        )));
    }
    let fwd_cell = bind_cell(params, tape, &format!("{prefix}.fwd"));
    let fwd = rnn_direction(tape, xs, &fwd_cell, kind, hidden, lengths, false);
    if !bidirectional {
        return Ok(fwd);
    }
    let bwd_cell = bind_cell(params, tape, &format!("{prefix}.bwd"));
    let bwd = rnn_direction(tape, xs, &bwd_cell, kind, hidden, lengths, true);
    Ok(fwd
        .iter()
        .zip(bwd.iter())
        .map(|(&f, &b)| tape.concat(&[f, b]))
        .collect())
}

/// Register both directions of a layer under `prefix` (`.fwd` / `.bwd`).
pub fn register_layer<F: Scalar, R: Rng>(
    params: &mut ParamSet<F>,
    prefix: &str,
    kind: CellKind,
    input_dim: usize,
    hidden: usize,
    bidirectional: bool,
    rng: &mut R,
) -> Result<()> {
    register_cell(params, &format!("{prefix}.fwd"), kind, input_dim, hidden, rng)?;
    if bidirectional {
        register_cell(params, &format!("{prefix}.bwd"), kind, input_dim, hidden, rng)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn constant_steps(
        tape: &mut Tape<f64>,
        data: &[Vec<f64>],
        batch: usize,
        dim: usize,
    ) -> Vec<NodeId> {
        data.iter()
            .map(|step| tape.constant(Tensor::new(vec![batch, dim], step.clone())))
            .collect()
    }

    #[test]
    fn zero_weight_lstm_outputs_zero_sequence() {
        let mut params = ParamSet::<f64>::new();
        let h = 3;
        params.add("l.fwd.w_ih", Tensor::zeros(vec![2, 4 * h])).unwrap();
        params.add("l.fwd.w_hh", Tensor::zeros(vec![h, 4 * h])).unwrap();
        params.add("l.fwd.bias", Tensor::zeros(vec![4 * h])).unwrap();
        let mut tape = Tape::<f64>::new();
        let xs = constant_steps(
            &mut tape,
            &[vec![1.0, -2.0], vec![0.5, 3.0], vec![-1.0, 1.0]],
            1,
            2,
        );
        let out =
            rnn_layer_forward(&mut tape, &xs, &params, "l", CellKind::Lstm, h, false, &[3])
                .unwrap();
        for &o in &out {
            for &v in tape.value(o).data() {
                assert_eq!(v, 0.0);
            }
        }
    }

    #[test]
    fn bidirectional_output_width_is_2h() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut params = ParamSet::<f64>::new();
        register_layer(&mut params, "l", CellKind::Lstm, 5, 4, true, &mut rng).unwrap();
        let mut tape = Tape::<f64>::new();
        let steps: Vec<Vec<f64>> = (0..7).map(|t| vec![t as f64 * 0.1; 5]).collect();
        let xs = constant_steps(&mut tape, &steps, 1, 5);
        let out =
            rnn_layer_forward(&mut tape, &xs, &params, "l", CellKind::Lstm, 4, true, &[7])
                .unwrap();
        assert_eq!(out.len(), 7);
        for &o in &out {
            assert_eq!(tape.value(o).shape(), &[1, 8]);
        }
    }

    #[test]
    fn single_step_lstm_matches_scalar_oracle() {
        // 1-d input, 1-d hidden, hand-picked weights. The oracle below is an
        // independent scalar transcription of the gate equations; the frozen
        // values were produced by it.
        let (w_i, w_f, w_g, w_o) = (0.5, -0.3, 0.8, 0.2);
        let (u_i, u_f, u_g, u_o) = (0.1, 0.4, -0.2, 0.6);
        let (b_i, b_f, b_g, b_o) = (0.05, 1.0, -0.1, 0.3);
        let x = 0.7;

        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let i = sig(w_i * x + b_i);
        let f = sig(w_f * x + b_f);
        let g = (w_g * x + b_g).tanh();
        let o = sig(w_o * x + b_o);
        let c1 = f * 0.0 + i * g;
        let h1 = o * c1.tanh();

        let mut params = ParamSet::<f64>::new();
        params
            .add("l.fwd.w_ih", Tensor::new(vec![1, 4], vec![w_i, w_f, w_g, w_o]))
            .unwrap();
        params
            .add("l.fwd.w_hh", Tensor::new(vec![1, 4], vec![u_i, u_f, u_g, u_o]))
            .unwrap();
        params
            .add("l.fwd.bias", Tensor::new(vec![4], vec![b_i, b_f, b_g, b_o]))
            .unwrap();
        let mut tape = Tape::<f64>::new();
        let xs = vec![tape.constant(Tensor::new(vec![1, 1], vec![x]))];
        let out =
            rnn_layer_forward(&mut tape, &xs, &params, "l", CellKind::Lstm, 1, false, &[1])
                .unwrap();
        let got = tape.value(out[0]).item();
        assert!((got - h1).abs() < 1e-12, "h1 {got} vs oracle {h1}");
        // frozen golden values from the scalar oracle
        assert!((c1 - 0.257486110176).abs() < 1e-9, "golden c1 mismatch: {c1}");
        assert!((got - 0.153246427014).abs() < 1e-9, "golden h1 mismatch: {got}");
    }

    #[test]
    fn input_width_mismatch_is_a_shape_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut params = ParamSet::<f64>::new();
        register_layer(&mut params, "l", CellKind::Lstm, 6, 4, false, &mut rng).unwrap();
        let mut tape = Tape::<f64>::new();
        // layer expects width 6, feed width 3
        let xs = vec![tape.constant(Tensor::zeros(vec![1, 3]))];
        let err = rnn_layer_forward(&mut tape, &xs, &params, "l", CellKind::Lstm, 4, false, &[1])
            .unwrap_err();
        assert!(matches!(err, crate::error::SluError::Shape(_)));
    }

    #[test]
    fn gru_layer_runs_and_masks_padding() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut params = ParamSet::<f64>::new();
        register_layer(&mut params, "g", CellKind::Gru, 3, 4, true, &mut rng).unwrap();
        let mut tape = Tape::<f64>::new();
        // batch of 2, lengths 2 and 4
        let steps: Vec<Vec<f64>> = (0..4)
            .map(|t| {
                let mut row = vec![0.1 * t as f64, -0.2, 0.3];
                row.extend_from_slice(&[0.5, 0.2 * t as f64, -0.1]);
                row
            })
            .collect();
        let xs = constant_steps(&mut tape, &steps, 2, 3);
        let out =
            rnn_layer_forward(&mut tape, &xs, &params, "g", CellKind::Gru, 4, true, &[2, 4])
                .unwrap();
        // padded steps of utterance 0 must be exactly zero
        for t in 2..4 {
            let row0 = tape.value(out[t]).row(0).to_vec();
            assert!(row0.iter().all(|&v| v == 0.0), "padding leak at t={t}");
        }
        // valid steps should generally be nonzero
        assert!(tape.value(out[1]).row(0).iter().any(|&v| v != 0.0));
    }

    #[test]
    fn padded_equals_unpadded_for_bidirectional_layer() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut params = ParamSet::<f64>::new();
        register_layer(&mut params, "l", CellKind::Lstm, 2, 3, true, &mut rng).unwrap();

        // utterance alone, T=3
        let utt: Vec<Vec<f64>> = vec![vec![0.2, -0.1], vec![0.4, 0.3], vec![-0.5, 0.6]];
        let mut tape_a = Tape::<f64>::new();
        let xs_a = constant_steps(&mut tape_a, &utt, 1, 2);
        let out_a =
            rnn_layer_forward(&mut tape_a, &xs_a, &params, "l", CellKind::Lstm, 3, true, &[3])
                .unwrap();

        // same utterance padded to T=5 in a batch of 2 (other row longer)
        let mut tape_b = Tape::<f64>::new();
        let mut steps = Vec::new();
        for t in 0..5 {
            let mut row = if t < 3 { utt[t].clone() } else { vec![0.0, 0.0] };
            row.extend_from_slice(&[0.9, -0.9]); // second utterance, full length
            steps.push(row);
        }
        let xs_b = constant_steps(&mut tape_b, &steps, 2, 2);
        let out_b =
            rnn_layer_forward(&mut tape_b, &xs_b, &params, "l", CellKind::Lstm, 3, true, &[3, 5])
                .unwrap();

        for t in 0..3 {
            let a = tape_a.value(out_a[t]).row(0).to_vec();
            let b = tape_b.value(out_b[t]).row(0).to_vec();
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() < 1e-12, "t={t}: {x} vs {y}");
            }
        }
    }
}
