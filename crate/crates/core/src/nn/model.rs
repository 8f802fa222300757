use ndarray::{concatenate, s, Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut2, Axis};
use rand::Rng;

use super::{CellKind, CellParams, ModelWeights, Real};
use crate::error::{Error, Result};
use crate::seed::rng_from_seed;

/// A batch of equal-length sequences, stored time-major: row `t·batch + b` is
/// sample `b` at step `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceBatch<F> {
    pub steps: usize,
    pub batch: usize,
    pub x: Array2<F>,
}

impl<F: Real> SequenceBatch<F> {
    /// Builds a batch from `features × steps` matrices.
    pub fn from_views<G: Real>(samples: &[ArrayView2<'_, G>]) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::EmptySelection("empty batch".into()))?;
        let (rows, steps) = first.dim();
        let batch = samples.len();
        let mut x = Array2::<F>::zeros((steps * batch, rows));
        for (b, s) in samples.iter().enumerate() {
            if s.dim() != (rows, steps) {
                return Err(Error::ShapeMismatch {
                    expected: vec![rows, steps],
                    actual: s.shape().to_vec(),
                });
            }
            for t in 0..steps {
                let mut dst = x.row_mut(t * batch + b);
                for (d, v) in dst.iter_mut().zip(s.column(t)) {
                    *d = F::of_f64(v.as_f64());
                }
            }
        }
        Ok(Self { steps, batch, x })
    }

    pub fn input_size(&self) -> usize {
        self.x.ncols()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    /// Inverted dropout with a mask drawn from `seed`.
    Train { seed: u64 },
    /// Dropout is the identity.
    Eval,
}

/// Hidden (and, for LSTM, cell) state of one direction for a single sample.
#[derive(Debug, Clone, PartialEq)]
pub struct CellState<F> {
    pub h: Array1<F>,
    pub c: Option<Array1<F>>,
}

impl<F: Real> CellState<F> {
    pub fn zeros(kind: CellKind, hidden: usize) -> Self {
        Self {
            h: Array1::zeros(hidden),
            c: (kind != CellKind::Gru).then(|| Array1::zeros(hidden)),
        }
    }
}

fn transposed<F: Real>(a: &Array2<F>) -> Array2<F> {
    a.t().as_standard_layout().into_owned()
}

#[inline]
fn sigmoid<F: Real>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

/// Per-direction activations kept for backpropagation, rows indexed by time step.
#[derive(Debug, Clone)]
struct DirectionCache<F> {
    reversed: bool,
    /// Activated gates (LSTM `[i, f, g, o]`, GRU `[z, r, h̃]`).
    gates: Array2<F>,
    h_prev: Array2<F>,
    /// LSTM: previous cell state. GRU: `r ⊙ h_prev`.
    aux: Array2<F>,
    /// LSTM: `tanh(c)`. Unused for GRU.
    tanh_c: Array2<F>,
    h_final: Array2<F>,
}

/// Everything [`backward`] needs from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<F> {
    kind: CellKind,
    steps: usize,
    batch: usize,
    x: Array2<F>,
    directions: Vec<DirectionCache<F>>,
    representation: Array2<F>,
    fc1_pre: Array2<F>,
    /// 0 for dropped units, `1/(1−p)` for kept ones; all ones in eval mode.
    dropout_mask: Array2<F>,
    hidden_out: Array2<F>,
    pub predictions: Array1<F>,
}

/// One LSTM step on a batch. `xp` already contains `W x + b`.
fn lstm_step<F: Real>(
    rt: ArrayView2<'_, F>,
    xp: ArrayView2<'_, F>,
    h_prev: ArrayView2<'_, F>,
    c_prev: ArrayView2<'_, F>,
    mut gates: ArrayViewMut2<'_, F>,
    mut c: ArrayViewMut2<'_, F>,
    mut tanh_c: ArrayViewMut2<'_, F>,
    mut h: ArrayViewMut2<'_, F>,
) {
    let hs = h_prev.ncols();
    gates.assign(&xp);
    F::mm_nn(h_prev, rt, &mut gates);
    for b in 0..gates.nrows() {
        let mut g = gates.row_mut(b);
        let g = g.as_slice_mut().expect("contiguous rows");
        for (j, v) in g.iter_mut().enumerate() {
            *v = if (2 * hs..3 * hs).contains(&j) { v.tanh() } else { sigmoid(*v) };
        }
        for j in 0..hs {
            let (i, f, gg, o) = (g[j], g[hs + j], g[2 * hs + j], g[3 * hs + j]);
            let cv = f * c_prev[[b, j]] + i * gg;
            let tc = cv.tanh();
            c[[b, j]] = cv;
            tanh_c[[b, j]] = tc;
            h[[b, j]] = o * tc;
        }
    }
}

/// One GRU step on a batch: `z, r = σ(·)`, `h̃ = tanh(W_h x + R_h (r ⊙ h) + b_h)`,
/// `h' = (1 − z) ⊙ h + z ⊙ h̃`.
fn gru_step<F: Real>(
    rt: ArrayView2<'_, F>,
    xp: ArrayView2<'_, F>,
    h_prev: ArrayView2<'_, F>,
    mut gates: ArrayViewMut2<'_, F>,
    mut rh: ArrayViewMut2<'_, F>,
    mut h: ArrayViewMut2<'_, F>,
) {
    let hs = h_prev.ncols();
    gates.assign(&xp);
    {
        let mut zr = gates.slice_mut(s![.., 0..2 * hs]);
        F::mm_nn(h_prev, rt.slice(s![.., 0..2 * hs]), &mut zr);
        zr.mapv_inplace(sigmoid);
    }
    for b in 0..rh.nrows() {
        for j in 0..hs {
            rh[[b, j]] = gates[[b, hs + j]] * h_prev[[b, j]];
        }
    }
    {
        let mut cand = gates.slice_mut(s![.., 2 * hs..3 * hs]);
        F::mm_nn(rh.view(), rt.slice(s![.., 2 * hs..3 * hs]), &mut cand);
        cand.mapv_inplace(|v| v.tanh());
    }
    for b in 0..h.nrows() {
        for j in 0..hs {
            let z = gates[[b, j]];
            h[[b, j]] = (F::one() - z) * h_prev[[b, j]] + z * gates[[b, 2 * hs + j]];
        }
    }
}

fn run_direction<F: Real>(kind: CellKind, p: &CellParams<F>, batch: &SequenceBatch<F>, reversed: bool) -> DirectionCache<F> {
    let (steps, bsz) = (batch.steps, batch.batch);
    let hs = p.recurrent.ncols();
    let gw = p.recurrent.nrows();
    let mut xp = Array2::<F>::zeros((steps * bsz, gw));
    xp += &p.bias;
    F::mm_nn(batch.x.view(), transposed(&p.input).view(), &mut xp.view_mut());
    let rt = transposed(&p.recurrent);
    let mut gates = Array2::<F>::zeros((steps * bsz, gw));
    let mut h_prev = Array2::<F>::zeros((steps * bsz, hs));
    let mut aux = Array2::<F>::zeros((steps * bsz, hs));
    let mut tanh_c = Array2::<F>::zeros(if kind == CellKind::Gru { (0, hs) } else { (steps * bsz, hs) });
    let mut h = Array2::<F>::zeros((bsz, hs));
    let mut c = Array2::<F>::zeros((bsz, hs));
    for s in 0..steps {
        let t = if reversed { steps - 1 - s } else { s };
        let rows = s![t * bsz..(t + 1) * bsz, ..];
        h_prev.slice_mut(rows).assign(&h);
        let mut h_new = Array2::<F>::zeros((bsz, hs));
        match kind {
            CellKind::Gru => gru_step(
                rt.view(),
                xp.slice(rows),
                h.view(),
                gates.slice_mut(rows),
                aux.slice_mut(rows),
                h_new.view_mut(),
            ),
            CellKind::Lstm | CellKind::BiLstm => {
                aux.slice_mut(rows).assign(&c);
                let mut c_new = Array2::<F>::zeros((bsz, hs));
                lstm_step(
                    rt.view(),
                    xp.slice(rows),
                    h.view(),
                    c.view(),
                    gates.slice_mut(rows),
                    c_new.view_mut(),
                    tanh_c.slice_mut(rows),
                    h_new.view_mut(),
                );
                c = c_new;
            }
        }
        h = h_new;
    }
    DirectionCache {
        reversed,
        gates,
        h_prev,
        aux,
        tanh_c,
        h_final: h,
    }
}

/// Single-sample recurrence step, `x` of length `input_size`.
pub fn cell_step<F: Real>(kind: CellKind, params: &CellParams<F>, x: ArrayView1<'_, F>, state: &CellState<F>) -> Result<CellState<F>> {
    let hs = params.recurrent.ncols();
    if x.len() != params.input.ncols() || state.h.len() != hs || (kind != CellKind::Gru) != state.c.is_some() {
        return Err(Error::ShapeMismatch {
            expected: vec![params.input.ncols(), hs],
            actual: vec![x.len(), state.h.len()],
        });
    }
    let mut xp = x.insert_axis(Axis(0)).dot(&params.input.t());
    xp += &params.bias;
    let rt = transposed(&params.recurrent);
    let h_prev = state.h.view().insert_axis(Axis(0));
    let mut gates = Array2::<F>::zeros((1, params.recurrent.nrows()));
    let mut h = Array2::<F>::zeros((1, hs));
    match kind {
        CellKind::Gru => {
            let mut rh = Array2::<F>::zeros((1, hs));
            gru_step(rt.view(), xp.view(), h_prev, gates.view_mut(), rh.view_mut(), h.view_mut());
            Ok(CellState {
                h: h.row(0).to_owned(),
                c: None,
            })
        }
        CellKind::Lstm | CellKind::BiLstm => {
            let c_prev = state.c.as_ref().expect("checked above").view().insert_axis(Axis(0));
            let mut c = Array2::<F>::zeros((1, hs));
            let mut tc = Array2::<F>::zeros((1, hs));
            lstm_step(rt.view(), xp.view(), h_prev, c_prev, gates.view_mut(), c.view_mut(), tc.view_mut(), h.view_mut());
            Ok(CellState {
                h: h.row(0).to_owned(),
                c: Some(c.row(0).to_owned()),
            })
        }
    }
}

fn check_batch<F: Real>(weights: &ModelWeights<F>, batch: &SequenceBatch<F>) -> Result<()> {
    if batch.input_size() != weights.spec.input_size || batch.steps == 0 || batch.batch == 0 {
        return Err(Error::ShapeMismatch {
            expected: vec![weights.spec.input_size],
            actual: vec![batch.input_size(), batch.steps, batch.batch],
        });
    }
    Ok(())
}

/// Recurrent layer (both directions for BiLSTM), last-step readout, then the dense head.
pub fn forward<F: Real>(weights: &ModelWeights<F>, batch: &SequenceBatch<F>, mode: ForwardMode) -> Result<ForwardCache<F>> {
    check_batch(weights, batch)?;
    let kind = weights.spec.cell_kind;
    let directions: Vec<DirectionCache<F>> = weights
        .directions
        .iter()
        .enumerate()
        .map(|(d, p)| run_direction(kind, p, batch, d == 1))
        .collect();
    let finals: Vec<ArrayView2<'_, F>> = directions.iter().map(|d| d.h_final.view()).collect();
    let representation = concatenate(Axis(1), &finals).expect("equal batch sizes");

    let mut fc1_pre = Array2::<F>::zeros((batch.batch, weights.spec.fc1_size));
    fc1_pre += &weights.fc1_bias;
    F::mm_nn(representation.view(), transposed(&weights.fc1_weight).view(), &mut fc1_pre.view_mut());
    let dropout_mask = match mode {
        ForwardMode::Eval => Array2::<F>::ones(fc1_pre.raw_dim()),
        ForwardMode::Train { .. } if weights.spec.dropout_rate == 0.0 => Array2::<F>::ones(fc1_pre.raw_dim()),
        ForwardMode::Train { seed } => {
            let p = weights.spec.dropout_rate;
            let keep_scale = F::of_f64(1.0 / (1.0 - p));
            let mut rng = rng_from_seed(seed);
            Array2::from_shape_simple_fn(fc1_pre.raw_dim(), || {
                if rng.random::<f64>() < p {
                    F::zero()
                } else {
                    keep_scale
                }
            })
        }
    };
    let hidden_out = fc1_pre.mapv(|v| if v > F::zero() { v } else { F::zero() }) * &dropout_mask;
    let mut out = hidden_out.dot(&weights.fc2_weight.t());
    out += &weights.fc2_bias;
    let predictions = out.column(0).to_owned();
    Ok(ForwardCache {
        kind,
        steps: batch.steps,
        batch: batch.batch,
        x: batch.x.clone(),
        directions,
        representation,
        fc1_pre,
        dropout_mask,
        hidden_out,
        predictions,
    })
}

/// Eval-mode predictions.
pub fn predict<F: Real>(weights: &ModelWeights<F>, batch: &SequenceBatch<F>) -> Result<Array1<F>> {
    Ok(forward(weights, batch, ForwardMode::Eval)?.predictions)
}

/// Mean squared error and its gradient `2(ŷ − y)/B` with respect to the predictions.
pub fn mse_output_grad<F: Real>(predictions: &Array1<F>, targets: &[F]) -> Result<(f64, Array1<F>)> {
    if predictions.len() != targets.len() || targets.is_empty() {
        return Err(Error::LengthMismatch {
            left: predictions.len(),
            right: targets.len(),
        });
    }
    let n = targets.len() as f64;
    let loss = predictions
        .iter()
        .zip(targets)
        .map(|(p, t)| {
            let r = p.as_f64() - t.as_f64();
            r * r
        })
        .sum::<f64>()
        / n;
    let scale = F::of_f64(2.0 / n);
    let grad = predictions
        .iter()
        .zip(targets)
        .map(|(&p, &t)| scale * (p - t))
        .collect();
    Ok((loss, grad))
}

fn backward_direction<F: Real>(
    kind: CellKind,
    p: &CellParams<F>,
    cache: &DirectionCache<F>,
    x: &Array2<F>,
    steps: usize,
    bsz: usize,
    d_final: ArrayView2<'_, F>,
    grad: &mut CellParams<F>,
) {
    let hs = p.recurrent.ncols();
    let mut d_pre = Array2::<F>::zeros(cache.gates.raw_dim());
    let mut dh = d_final.to_owned();
    let mut dc = Array2::<F>::zeros((bsz, hs));
    let one = F::one();
    for s in (0..steps).rev() {
        let t = if cache.reversed { steps - 1 - s } else { s };
        let r0 = t * bsz;
        match kind {
            CellKind::Lstm | CellKind::BiLstm => {
                for b in 0..bsz {
                    let row = r0 + b;
                    let g = cache.gates.row(row);
                    let mut da = d_pre.row_mut(row);
                    for j in 0..hs {
                        let (i, f, gg, o) = (g[j], g[hs + j], g[2 * hs + j], g[3 * hs + j]);
                        let tc = cache.tanh_c[[row, j]];
                        let dhv = dh[[b, j]];
                        let dcv = dc[[b, j]] + dhv * o * (one - tc * tc);
                        da[j] = dcv * gg * i * (one - i);
                        da[hs + j] = dcv * cache.aux[[row, j]] * f * (one - f);
                        da[2 * hs + j] = dcv * i * (one - gg * gg);
                        da[3 * hs + j] = dhv * tc * o * (one - o);
                        dc[[b, j]] = dcv * f;
                    }
                }
                dh.fill(F::zero());
                F::mm_nn(d_pre.slice(s![r0..r0 + bsz, ..]), p.recurrent.view(), &mut dh.view_mut());
            }
            CellKind::Gru => {
                let mut dh_prev = Array2::<F>::zeros((bsz, hs));
                // candidate path first: it feeds through r ⊙ h
                for b in 0..bsz {
                    let row = r0 + b;
                    for j in 0..hs {
                        let z = cache.gates[[row, j]];
                        let hc = cache.gates[[row, 2 * hs + j]];
                        let hp = cache.h_prev[[row, j]];
                        let dhv = dh[[b, j]];
                        d_pre[[row, 2 * hs + j]] = dhv * z * (one - hc * hc);
                        d_pre[[row, j]] = dhv * (hc - hp) * z * (one - z);
                        dh_prev[[b, j]] = dhv * (one - z);
                    }
                }
                let mut d_rh = Array2::<F>::zeros((bsz, hs));
                F::mm_nn(
                    d_pre.slice(s![r0..r0 + bsz, 2 * hs..3 * hs]),
                    p.recurrent.slice(s![2 * hs..3 * hs, ..]),
                    &mut d_rh.view_mut(),
                );
                for b in 0..bsz {
                    let row = r0 + b;
                    for j in 0..hs {
                        let r = cache.gates[[row, hs + j]];
                        let hp = cache.h_prev[[row, j]];
                        d_pre[[row, hs + j]] = d_rh[[b, j]] * hp * r * (one - r);
                        dh_prev[[b, j]] += d_rh[[b, j]] * r;
                    }
                }
                let dzr = d_pre.slice(s![r0..r0 + bsz, 0..2 * hs]);
                F::mm_nn(dzr, p.recurrent.slice(s![0..2 * hs, ..]), &mut dh_prev.view_mut());
                dh = dh_prev;
            }
        }
    }
    // W, R and b gradients over all steps at once
    F::mm_tn(d_pre.view(), x.view(), &mut grad.input.view_mut());
    match kind {
        CellKind::Lstm | CellKind::BiLstm => {
            F::mm_tn(d_pre.view(), cache.h_prev.view(), &mut grad.recurrent.view_mut());
        }
        CellKind::Gru => {
            let mut r_zr = grad.recurrent.slice_mut(s![0..2 * hs, ..]);
            F::mm_tn(d_pre.slice(s![.., 0..2 * hs]), cache.h_prev.view(), &mut r_zr);
            let mut r_h = grad.recurrent.slice_mut(s![2 * hs..3 * hs, ..]);
            F::mm_tn(d_pre.slice(s![.., 2 * hs..3 * hs]), cache.aux.view(), &mut r_h);
        }
    }
    grad.bias += &d_pre.sum_axis(Axis(0));
}

/// Exact gradients of a loss with `∂L/∂ŷ = d_out` with respect to every weight,
/// backpropagated through all time steps.
pub fn backward<F: Real>(weights: &ModelWeights<F>, cache: &ForwardCache<F>, d_out: &Array1<F>) -> Result<ModelWeights<F>> {
    if d_out.len() != cache.batch || cache.kind != weights.spec.cell_kind {
        return Err(Error::ShapeMismatch {
            expected: vec![cache.batch],
            actual: vec![d_out.len()],
        });
    }
    let mut grad = weights.zeros_like();
    let d_out2 = d_out.view().insert_axis(Axis(1));
    grad.fc2_weight.assign(&d_out2.t().dot(&cache.hidden_out));
    grad.fc2_bias = Array1::from_elem(1, d_out.sum());
    let mut d_fc1 = d_out2.dot(&weights.fc2_weight) * &cache.dropout_mask;
    ndarray::Zip::from(&mut d_fc1)
        .and(&cache.fc1_pre)
        .for_each(|d, &pre| {
            if pre <= F::zero() {
                *d = F::zero();
            }
        });
    F::mm_tn(d_fc1.view(), cache.representation.view(), &mut grad.fc1_weight.view_mut());
    grad.fc1_bias = d_fc1.sum_axis(Axis(0));
    let mut d_rep = Array2::<F>::zeros(cache.representation.raw_dim());
    F::mm_nn(d_fc1.view(), weights.fc1_weight.view(), &mut d_rep.view_mut());
    let hs = weights.spec.hidden_size;
    for (d, (p, dc)) in weights.directions.iter().zip(&cache.directions).enumerate() {
        let d_final = d_rep.slice(s![.., d * hs..(d + 1) * hs]);
        backward_direction(
            cache.kind,
            p,
            dc,
            &cache.x,
            cache.steps,
            cache.batch,
            d_final,
            &mut grad.directions[d],
        );
    }
    Ok(grad)
}
