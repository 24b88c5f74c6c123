use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2};
use rand::Rng;

use super::NeuralError;

/// LSTM gate. Rows of the stacked weight matrices are ordered
/// forget, input, output, cell-candidate, `hidden_size` rows each.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Gate {
    Forget = 0,
    Input = 1,
    Output = 2,
    Candidate = 3,
}

impl Gate {
    pub const ALL: [Gate; 4] = [Gate::Forget, Gate::Input, Gate::Output, Gate::Candidate];
}

/// Parameters of one LSTM layer.
///
/// `input_weights` stacks `W_fx, W_ix, W_ox, W_gx` (each `hidden × input`),
/// `recurrent_weights` stacks `W_fh, W_ih, W_oh, W_gh` (each `hidden × hidden`)
/// and `bias` stacks `b_f, b_i, b_o, b_g`.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmLayerParams {
    pub input_weights: Array2<f64>,
    pub recurrent_weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl LstmLayerParams {
    pub fn zeros(input_size: usize, hidden_size: usize) -> Self {
        LstmLayerParams {
            input_weights: Array2::zeros((4 * hidden_size, input_size)),
            recurrent_weights: Array2::zeros((4 * hidden_size, hidden_size)),
            bias: Array1::zeros(4 * hidden_size),
        }
    }

    /// Uniform initialisation in `[-1/sqrt(hidden), 1/sqrt(hidden)]`.
    pub fn random<R: Rng>(input_size: usize, hidden_size: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (hidden_size as f64).sqrt();
        let mut draw = || rng.gen_range(-bound..=bound);
        LstmLayerParams {
            input_weights: Array2::from_shape_simple_fn((4 * hidden_size, input_size), &mut draw),
            recurrent_weights: Array2::from_shape_simple_fn((4 * hidden_size, hidden_size), &mut draw),
            bias: Array1::from_shape_simple_fn(4 * hidden_size, &mut draw),
        }
    }

    pub fn input_size(&self) -> usize {
        self.input_weights.ncols()
    }

    pub fn hidden_size(&self) -> usize {
        self.recurrent_weights.ncols()
    }

    pub fn param_count(&self) -> usize {
        self.input_weights.len() + self.recurrent_weights.len() + self.bias.len()
    }

    pub fn gate_input_weights(&self, gate: Gate) -> ArrayView2<'_, f64> {
        let h = self.hidden_size();
        let g = gate as usize;
        self.input_weights.slice(s![g * h..(g + 1) * h, ..])
    }

    pub fn gate_recurrent_weights(&self, gate: Gate) -> ArrayView2<'_, f64> {
        let h = self.hidden_size();
        let g = gate as usize;
        self.recurrent_weights.slice(s![g * h..(g + 1) * h, ..])
    }

    pub fn gate_bias(&self, gate: Gate) -> ArrayView1<'_, f64> {
        let h = self.hidden_size();
        let g = gate as usize;
        self.bias.slice(s![g * h..(g + 1) * h])
    }

    pub(crate) fn check_shapes(&self) -> Result<(), NeuralError> {
        let h = self.hidden_size();
        if self.recurrent_weights.nrows() != 4 * h {
            return Err(NeuralError::DimensionMismatch {
                what: "recurrent weight rows",
                expected: 4 * h,
                actual: self.recurrent_weights.nrows(),
            });
        }
        if self.input_weights.nrows() != 4 * h {
            return Err(NeuralError::DimensionMismatch {
                what: "input weight rows",
                expected: 4 * h,
                actual: self.input_weights.nrows(),
            });
        }
        if self.bias.len() != 4 * h {
            return Err(NeuralError::DimensionMismatch {
                what: "bias length",
                expected: 4 * h,
                actual: self.bias.len(),
            });
        }
        Ok(())
    }
}

/// Hidden output and memory cell of one layer after a time step.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmState {
    pub hidden: Vec<f64>,
    pub cell: Vec<f64>,
}

impl LstmState {
    pub fn zeros(hidden_size: usize) -> Self {
        LstmState {
            hidden: vec![0.0; hidden_size],
            cell: vec![0.0; hidden_size],
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// One time step of a single LSTM layer:
///
/// ```text
/// f = σ(W_fx x + W_fh h + b_f)    i = σ(W_ix x + W_ih h + b_i)
/// o = σ(W_ox x + W_oh h + b_o)    g = tanh(W_gx x + W_gh h + b_g)
/// c' = c ⊙ f + i ⊙ g              h' = tanh(c') ⊙ o
/// ```
pub fn lstm_cell_forward(
    x: &[f64],
    prev: &LstmState,
    params: &LstmLayerParams,
) -> Result<LstmState, NeuralError> {
    params.check_shapes()?;
    let h = params.hidden_size();
    if x.len() != params.input_size() {
        return Err(NeuralError::DimensionMismatch {
            what: "cell input",
            expected: params.input_size(),
            actual: x.len(),
        });
    }
    if prev.hidden.len() != h || prev.cell.len() != h {
        return Err(NeuralError::DimensionMismatch {
            what: "previous state",
            expected: h,
            actual: prev.hidden.len().max(prev.cell.len()),
        });
    }
    if x.iter().chain(&prev.hidden).chain(&prev.cell).any(|v| !v.is_finite()) {
        return Err(NeuralError::NonFiniteInput("cell input"));
    }

    let pre = |row: usize| -> f64 {
        let wx = params.input_weights.row(row);
        let wh = params.recurrent_weights.row(row);
        let mut acc = params.bias[row];
        for (w, v) in wx.iter().zip(x) {
            acc += w * v;
        }
        for (w, v) in wh.iter().zip(&prev.hidden) {
            acc += w * v;
        }
        acc
    };

    let mut next = LstmState::zeros(h);
    for u in 0..h {
        let f = sigmoid(pre(u));
        let i = sigmoid(pre(h + u));
        let o = sigmoid(pre(2 * h + u));
        let g = pre(3 * h + u).tanh();
        let c = prev.cell[u] * f + i * g;
        next.cell[u] = c;
        next.hidden[u] = c.tanh() * o;
    }
    Ok(next)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_params_fixed_point() {
        let params = LstmLayerParams::zeros(3, 4);
        let out = lstm_cell_forward(&[0.3, -2.0, 7.0], &LstmState::zeros(4), &params).unwrap();
        assert_eq!(out, LstmState::zeros(4));
    }

    #[test]
    fn zero_params_halve_the_cell() {
        let params = LstmLayerParams::zeros(2, 3);
        let prev = LstmState {
            hidden: vec![0.9, -0.4, 0.1],
            cell: vec![1.0, -2.0, 0.5],
        };
        let out = lstm_cell_forward(&[1.0, 2.0], &prev, &params).unwrap();
        for u in 0..3 {
            let c = 0.5 * prev.cell[u];
            assert_eq!(out.cell[u], c);
            assert!((out.hidden[u] - 0.5 * c.tanh()).abs() < 1e-15);
        }
    }

    #[test]
    fn scalar_cell_matches_hand_evaluation() {
        // one unit, one input; gates in f, i, o, g order
        let mut p = LstmLayerParams::zeros(1, 1);
        let wx = [0.5, -0.3, 0.8, 1.1];
        let wh = [0.2, 0.4, -0.6, 0.7];
        let b = [0.1, -0.2, 0.05, 0.3];
        for k in 0..4 {
            p.input_weights[[k, 0]] = wx[k];
            p.recurrent_weights[[k, 0]] = wh[k];
            p.bias[k] = b[k];
        }
        let (x, h0, c0) = (0.7_f64, 0.25_f64, -0.4_f64);
        let prev = LstmState { hidden: vec![h0], cell: vec![c0] };
        let out = lstm_cell_forward(&[x], &prev, &p).unwrap();

        let sig = |z: f64| 1.0 / (1.0 + (-z).exp());
        let f = sig(0.5 * x + 0.2 * h0 + 0.1);
        let i = sig(-0.3 * x + 0.4 * h0 - 0.2);
        let o = sig(0.8 * x - 0.6 * h0 + 0.05);
        let g = (1.1 * x + 0.7 * h0 + 0.3).tanh();
        let c = c0 * f + i * g;
        let h = c.tanh() * o;
        assert!((out.cell[0] - c).abs() < 1e-15);
        assert!((out.hidden[0] - h).abs() < 1e-15);
        // frozen from an independent evaluation
        assert!((out.cell[0] - 0.109_341_818_107_874_36).abs() < 1e-12);
        assert!((out.hidden[0] - 0.066_762_234_769_573_88).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_inputs() {
        let params = LstmLayerParams::zeros(2, 3);
        let prev = LstmState::zeros(3);
        assert!(matches!(
            lstm_cell_forward(&[1.0], &prev, &params),
            Err(NeuralError::DimensionMismatch { .. })
        ));
        assert!(matches!(
            lstm_cell_forward(&[1.0, f64::NAN], &prev, &params),
            Err(NeuralError::NonFiniteInput(_))
        ));
        assert!(lstm_cell_forward(&[1.0, 1.0], &LstmState::zeros(2), &params).is_err());
    }

    #[test]
    fn hidden_stays_in_open_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = LstmLayerParams::random(4, 5, &mut rng);
        let mut state = LstmState::zeros(5);
        for t in 0..50 {
            let x = [t as f64, -3.0, 100.0, 0.5];
            state = lstm_cell_forward(&x, &state, &params).unwrap();
            assert!(state.hidden.iter().all(|h| h.abs() < 1.0));
        }
    }

    #[test]
    fn gate_views_follow_stacking_order() {
        let mut p = LstmLayerParams::zeros(2, 3);
        p.input_weights[[2 * 3 + 1, 0]] = 9.0;
        p.bias[3 * 3 + 2] = 4.0;
        assert_eq!(p.gate_input_weights(Gate::Output)[[1, 0]], 9.0);
        assert_eq!(p.gate_bias(Gate::Candidate)[2], 4.0);
        assert_eq!(p.gate_recurrent_weights(Gate::Forget).dim(), (3, 3));
        assert_eq!(p.param_count(), 4 * (3 * 2 + 3 * 3 + 3));
    }
}
