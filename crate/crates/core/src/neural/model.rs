use std::borrow::Borrow;

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, Axis};
use rand::Rng;

use super::lstm::sigmoid;
use super::{LstmLayerParams, NeuralError, ParameterVector, HIDDEN_SIZE};
use crate::data::SequenceSample;

/// Stacked two-layer LSTM with a linear head on the last hidden state.
///
/// Layer 2 consumes layer 1's hidden output at every step; both layers start
/// each sequence from a zero state.
///
/// Flattening order (row-major throughout):
///
/// 1. layer 1 `input_weights` (`4h × d`), `recurrent_weights` (`4h × h`), `bias` (`4h`)
/// 2. layer 2 `input_weights` (`4h × h`), `recurrent_weights` (`4h × h`), `bias` (`4h`)
/// 3. head weights (`h`), head bias (`1`)
///
/// where gate blocks inside each stacked matrix are ordered forget, input,
/// output, candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastModel {
    pub layer1: LstmLayerParams,
    pub layer2: LstmLayerParams,
    pub head_weights: Array1<f64>,
    pub head_bias: f64,
}

impl ForecastModel {
    pub fn zeros(feature_dim: usize) -> Self {
        Self::zeros_with_hidden(feature_dim, HIDDEN_SIZE)
    }

    /// Hidden-size override, used by tests that need tiny models.
    pub fn zeros_with_hidden(feature_dim: usize, hidden: usize) -> Self {
        ForecastModel {
            layer1: LstmLayerParams::zeros(feature_dim, hidden),
            layer2: LstmLayerParams::zeros(hidden, hidden),
            head_weights: Array1::zeros(hidden),
            head_bias: 0.0,
        }
    }

    pub fn random<R: Rng>(feature_dim: usize, rng: &mut R) -> Self {
        Self::random_with_hidden(feature_dim, HIDDEN_SIZE, rng)
    }

    pub fn random_with_hidden<R: Rng>(feature_dim: usize, hidden: usize, rng: &mut R) -> Self {
        let layer1 = LstmLayerParams::random(feature_dim, hidden, rng);
        let layer2 = LstmLayerParams::random(hidden, hidden, rng);
        let bound = 1.0 / (hidden as f64).sqrt();
        let head_weights = Array1::from_shape_simple_fn(hidden, || rng.gen_range(-bound..=bound));
        let head_bias = rng.gen_range(-bound..=bound);
        ForecastModel {
            layer1,
            layer2,
            head_weights,
            head_bias,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.layer1.input_size()
    }

    pub fn hidden_size(&self) -> usize {
        self.layer1.hidden_size()
    }

    /// `4(h·d + h·h + h) + 4(h·h + h·h + h) + h + 1`.
    pub fn param_count_for(feature_dim: usize, hidden: usize) -> usize {
        let h = hidden;
        4 * (h * feature_dim + h * h + h) + 4 * (h * h + h * h + h) + h + 1
    }

    pub fn param_count(&self) -> usize {
        Self::param_count_for(self.feature_dim(), self.hidden_size())
    }

    pub fn flatten(&self) -> ParameterVector {
        let mut out = Vec::with_capacity(self.param_count());
        for layer in [&self.layer1, &self.layer2] {
            out.extend(layer.input_weights.iter());
            out.extend(layer.recurrent_weights.iter());
            out.extend(layer.bias.iter());
        }
        out.extend(self.head_weights.iter());
        out.push(self.head_bias);
        ParameterVector(out)
    }

    pub fn unflatten(feature_dim: usize, values: &[f64]) -> Result<Self, NeuralError> {
        Self::unflatten_with_hidden(feature_dim, HIDDEN_SIZE, values)
    }

    pub fn unflatten_with_hidden(
        feature_dim: usize,
        hidden: usize,
        values: &[f64],
    ) -> Result<Self, NeuralError> {
        let mut model = Self::zeros_with_hidden(feature_dim, hidden);
        model.load(values)?;
        Ok(model)
    }

    /// Overwrites every parameter from a flat vector in flattening order.
    pub fn load(&mut self, values: &[f64]) -> Result<(), NeuralError> {
        let expected = self.param_count();
        if values.len() != expected {
            return Err(NeuralError::DimensionMismatch {
                what: "parameter vector",
                expected,
                actual: values.len(),
            });
        }
        let mut rest = values;
        for layer in [&mut self.layer1, &mut self.layer2] {
            fill(&mut layer.input_weights, &mut rest);
            fill(&mut layer.recurrent_weights, &mut rest);
            fill(&mut layer.bias, &mut rest);
        }
        fill(&mut self.head_weights, &mut rest);
        self.head_bias = rest[0];
        Ok(())
    }
}

/// Copies the next `a.len()` values of `src` into `a` in logical order.
fn fill<D: ndarray::Dimension>(a: &mut ndarray::Array<f64, D>, src: &mut &[f64]) {
    let (head, tail) = src.split_at(a.len());
    match a.as_slice_mut() {
        Some(dst) => dst.copy_from_slice(head),
        None => a.iter_mut().zip(head).for_each(|(d, s)| *d = *s),
    }
    *src = tail;
}

/// Per-step activations of one layer over a batch, kept for BPTT.
struct LayerTrace {
    /// Activated gates `[f | i | o | g]`, `B × 4h`, one per step.
    gates: Vec<Array2<f64>>,
    /// `c_0 ..= c_K`; `c_0` is zero.
    cells: Vec<Array2<f64>>,
    /// `tanh(c_t)` for steps `1..=K`.
    tanh_cells: Vec<Array2<f64>>,
    /// `h_0 ..= h_K`; `h_0` is zero.
    hiddens: Vec<Array2<f64>>,
}

/// Below this many rows GEMM packing costs more than it saves.
const SMALL_BATCH: usize = 4;

/// `out += x · wᵀ`.
fn add_product(out: &mut Array2<f64>, x: &Array2<f64>, w: &Array2<f64>) {
    if x.nrows() > SMALL_BATCH {
        general_mat_mul(1.0, x, &w.t(), 1.0, out);
        return;
    }
    for (xr, mut or) in x.rows().into_iter().zip(out.rows_mut()) {
        for (o, wr) in or.iter_mut().zip(w.rows()) {
            *o += xr.dot(&wr);
        }
    }
}

fn layer_forward(params: &LstmLayerParams, inputs: &[Array2<f64>]) -> LayerTrace {
    let batch = inputs[0].nrows();
    let h = params.hidden_size();
    let steps = inputs.len();
    let mut trace = LayerTrace {
        gates: Vec::with_capacity(steps),
        cells: Vec::with_capacity(steps + 1),
        tanh_cells: Vec::with_capacity(steps),
        hiddens: Vec::with_capacity(steps + 1),
    };
    trace.cells.push(Array2::zeros((batch, h)));
    trace.hiddens.push(Array2::zeros((batch, h)));

    for x in inputs {
        let mut pre = params.bias.broadcast((batch, 4 * h)).expect("bias broadcast").to_owned();
        add_product(&mut pre, x, &params.input_weights);
        add_product(&mut pre, trace.hiddens.last().unwrap(), &params.recurrent_weights);
        for mut row in pre.rows_mut() {
            let r = row.as_slice_mut().expect("standard layout");
            for v in &mut r[..3 * h] {
                *v = sigmoid(*v);
            }
            for v in &mut r[3 * h..] {
                *v = v.tanh();
            }
        }

        let c_prev = trace.cells.last().unwrap();
        let mut c = Array2::zeros((batch, h));
        let mut tc = Array2::zeros((batch, h));
        let mut hid = Array2::zeros((batch, h));
        for b in 0..batch {
            let g = pre.row(b);
            let g = g.as_slice().unwrap();
            let cp = c_prev.row(b);
            for u in 0..h {
                let cell = cp[u] * g[u] + g[h + u] * g[3 * h + u];
                let t = cell.tanh();
                c[[b, u]] = cell;
                tc[[b, u]] = t;
                hid[[b, u]] = t * g[2 * h + u];
            }
        }
        trace.gates.push(pre);
        trace.cells.push(c);
        trace.tanh_cells.push(tc);
        trace.hiddens.push(hid);
    }
    trace
}

/// Accumulates parameter gradients of one layer and returns, when asked,
/// the gradients with respect to the layer inputs at every step.
fn layer_backward(
    params: &LstmLayerParams,
    inputs: &[Array2<f64>],
    trace: &LayerTrace,
    upstream: &[Option<Array2<f64>>],
    grad: &mut LstmLayerParams,
    want_input_grads: bool,
) -> Vec<Array2<f64>> {
    let batch = inputs[0].nrows();
    let h = params.hidden_size();
    let steps = inputs.len();
    let mut dh_next = Array2::<f64>::zeros((batch, h));
    let mut dc_next = Array2::<f64>::zeros((batch, h));
    let mut dp = Array2::<f64>::zeros((batch, 4 * h));
    let mut input_grads = Vec::new();
    if want_input_grads {
        input_grads = vec![Array2::zeros((0, 0)); steps];
    }

    for t in (0..steps).rev() {
        if let Some(up) = &upstream[t] {
            dh_next += up;
        }
        let gates = &trace.gates[t];
        let c_prev = &trace.cells[t];
        let tc = &trace.tanh_cells[t];
        for b in 0..batch {
            let g = gates.row(b);
            let g = g.as_slice().unwrap();
            let mut dpr = dp.row_mut(b);
            let dpr = dpr.as_slice_mut().unwrap();
            for u in 0..h {
                let (f, i, o, gg) = (g[u], g[h + u], g[2 * h + u], g[3 * h + u]);
                let dh = dh_next[[b, u]];
                let t_c = tc[[b, u]];
                let d_o = dh * t_c;
                let dc = dc_next[[b, u]] + dh * o * (1.0 - t_c * t_c);
                let df = dc * c_prev[[b, u]];
                let di = dc * gg;
                let dg = dc * i;
                dc_next[[b, u]] = dc * f;
                dpr[u] = df * f * (1.0 - f);
                dpr[h + u] = di * i * (1.0 - i);
                dpr[2 * h + u] = d_o * o * (1.0 - o);
                dpr[3 * h + u] = dg * (1.0 - gg * gg);
            }
        }
        general_mat_mul(1.0, &dp.t(), &inputs[t], 1.0, &mut grad.input_weights);
        general_mat_mul(1.0, &dp.t(), &trace.hiddens[t], 1.0, &mut grad.recurrent_weights);
        grad.bias += &dp.sum_axis(Axis(0));
        dh_next = dp.dot(&params.recurrent_weights);
        if want_input_grads {
            input_grads[t] = dp.dot(&params.input_weights);
        }
    }
    input_grads
}

fn check_batch<S: Borrow<SequenceSample>>(
    batch: &[S],
    model: &ForecastModel,
) -> Result<usize, NeuralError> {
    let first = batch.first().ok_or(NeuralError::Empty("batch"))?.borrow();
    let steps = first.steps();
    if steps == 0 {
        return Err(NeuralError::Empty("sequence"));
    }
    for s in batch {
        let s = s.borrow();
        if s.dim() != model.feature_dim() {
            return Err(NeuralError::DimensionMismatch {
                what: "sequence feature dimension",
                expected: model.feature_dim(),
                actual: s.dim(),
            });
        }
        if s.steps() != steps {
            return Err(NeuralError::DimensionMismatch {
                what: "sequence length",
                expected: steps,
                actual: s.steps(),
            });
        }
    }
    Ok(steps)
}

/// Builds the per-step `B × d` input matrices.
fn gather_inputs<S: Borrow<SequenceSample>>(batch: &[S], steps: usize, dim: usize) -> Vec<Array2<f64>> {
    (0..steps)
        .map(|t| {
            let mut x = Array2::zeros((batch.len(), dim));
            for (b, s) in batch.iter().enumerate() {
                x.row_mut(b)
                    .as_slice_mut()
                    .unwrap()
                    .copy_from_slice(s.borrow().step(t));
            }
            x
        })
        .collect()
}

struct ForwardPass {
    inputs: Vec<Array2<f64>>,
    l1: LayerTrace,
    l2: LayerTrace,
    predictions: Array1<f64>,
}

fn forward_pass<S: Borrow<SequenceSample>>(
    batch: &[S],
    model: &ForecastModel,
) -> Result<ForwardPass, NeuralError> {
    let steps = check_batch(batch, model)?;
    let inputs = gather_inputs(batch, steps, model.feature_dim());
    let l1 = layer_forward(&model.layer1, &inputs);
    let l2 = layer_forward(&model.layer2, &l1.hiddens[1..]);
    let predictions = l2.hiddens[steps].dot(&model.head_weights) + model.head_bias;
    Ok(ForwardPass {
        inputs,
        l1,
        l2,
        predictions,
    })
}

/// Predictions for a batch of sequences.
pub fn predict_batch<S: Borrow<SequenceSample>>(
    batch: &[S],
    model: &ForecastModel,
) -> Result<Vec<f64>, NeuralError> {
    if batch.is_empty() {
        return Ok(Vec::new());
    }
    Ok(forward_pass(batch, model)?.predictions.to_vec())
}

/// Prediction `ê_t` for one sequence.
pub fn model_forward(seq: &SequenceSample, model: &ForecastModel) -> Result<f64, NeuralError> {
    Ok(forward_pass(std::slice::from_ref(seq), model)?.predictions[0])
}

/// Gradient of the batch mean squared error, in flattening order.
pub fn compute_gradients<S: Borrow<SequenceSample>>(
    batch: &[S],
    model: &ForecastModel,
) -> Result<ParameterVector, NeuralError> {
    loss_and_gradients(batch, model).map(|(_, g)| g)
}

/// Batch mean squared error together with its gradient.
pub fn loss_and_gradients<S: Borrow<SequenceSample>>(
    batch: &[S],
    model: &ForecastModel,
) -> Result<(f64, ParameterVector), NeuralError> {
    let pass = forward_pass(batch, model)?;
    let n = batch.len() as f64;
    let steps = pass.inputs.len();
    let h = model.hidden_size();

    let mut loss = 0.0;
    let mut dy = Array1::zeros(batch.len());
    for (b, s) in batch.iter().enumerate() {
        let diff = pass.predictions[b] - s.borrow().label;
        loss += diff * diff;
        dy[b] = 2.0 * diff / n;
    }
    loss /= n;

    let mut grad = ForecastModel::zeros_with_hidden(model.feature_dim(), h);
    let last_hidden = &pass.l2.hiddens[steps];
    grad.head_weights = last_hidden.t().dot(&dy);
    grad.head_bias = dy.sum();

    let mut upstream: Vec<Option<Array2<f64>>> = vec![None; steps];
    let dh_last = dy
        .view()
        .insert_axis(Axis(1))
        .dot(&model.head_weights.view().insert_axis(Axis(0)));
    upstream[steps - 1] = Some(dh_last);

    let d_l1_out = layer_backward(
        &model.layer2,
        &pass.l1.hiddens[1..],
        &pass.l2,
        &upstream,
        &mut grad.layer2,
        true,
    );
    let upstream1: Vec<Option<Array2<f64>>> = d_l1_out.into_iter().map(Some).collect();
    layer_backward(&model.layer1, &pass.inputs, &pass.l1, &upstream1, &mut grad.layer1, false);

    let flat = grad.flatten();
    if let Some(index) = flat.first_non_finite() {
        return Err(NeuralError::NonFiniteGradient { index });
    }
    Ok((loss, flat))
}
