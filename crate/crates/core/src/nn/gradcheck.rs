use ndarray::Array3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{backward, forward, init_weights, mse_output_grad, CellKind, ForwardMode, ModelSpec, ModelWeights, SequenceBatch};
use crate::error::Result;
use crate::seed::{derive_seed, derived_rng};

/// Outcome of comparing analytic gradients with central finite differences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub cell_kind: CellKind,
    pub trials: usize,
    pub parameters_checked: usize,
    pub max_rel_error: f64,
    /// Tensor holding the worst entry.
    pub worst_tensor: String,
}

impl GradCheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

const HIDDEN: usize = 8;
const STEPS: usize = 3;
const INPUT: usize = 5;
const BATCH: usize = 2;
const EPS: f64 = 1e-5;
/// Below this magnitude both gradients are treated as zero and compared absolutely.
const FLOOR: f64 = 1e-7;

fn loss(w: &ModelWeights<f64>, batch: &SequenceBatch<f64>, targets: &[f64]) -> Result<f64> {
    let cache = forward(w, batch, ForwardMode::Eval)?;
    Ok(mse_output_grad(&cache.predictions, targets)?.0)
}

/// Randomized double-precision check of every weight of small models
/// (hidden 8, sequence 3, dropout off).
pub fn gradient_check(kind: CellKind, trials: usize, seed: u64) -> Result<GradCheckReport> {
    let spec = ModelSpec {
        cell_kind: kind,
        input_size: INPUT,
        hidden_size: HIDDEN,
        fc1_size: HIDDEN,
        dropout_rate: 0.0,
        output_size: 1,
    };
    let mut report = GradCheckReport {
        cell_kind: kind,
        trials,
        parameters_checked: 0,
        max_rel_error: 0.0,
        worst_tensor: String::new(),
    };
    for trial in 0..trials {
        let label = format!("gradcheck/{kind}/{trial}");
        let mut weights = init_weights::<f64>(&spec, derive_seed(seed, &label))?;
        let mut rng = derived_rng(seed, &format!("{label}/data"));
        // non-zero biases so every term of the recurrence is exercised
        for p in &mut weights.directions {
            p.bias.mapv_inplace(|b| b + rng.random_range(-0.5..0.5));
        }
        weights.fc1_bias.mapv_inplace(|_| rng.random_range(0.0..0.3));
        weights.fc2_bias.mapv_inplace(|_| rng.random_range(-0.3..0.3));
        let data = Array3::from_shape_simple_fn((BATCH, INPUT, STEPS), || rng.random_range(-2.0..2.0));
        let views: Vec<_> = data.outer_iter().collect();
        let batch = SequenceBatch::<f64>::from_views(&views)?;
        let targets: Vec<f64> = (0..BATCH).map(|_| rng.random_range(0.0..1.0)).collect();

        let cache = forward(&weights, &batch, ForwardMode::Eval)?;
        let (_, d_out) = mse_output_grad(&cache.predictions, &targets)?;
        let grads = backward(&weights, &cache, &d_out)?;
        let analytic: Vec<(String, Vec<f64>)> =
            grads.named().into_iter().map(|(n, _, v)| (n, v.to_vec())).collect();

        for (ti, (name, g)) in analytic.iter().enumerate() {
            for (i, &a) in g.iter().enumerate() {
                let orig = weights.slices_mut()[ti][i];
                weights.slices_mut()[ti][i] = orig + EPS;
                let up = loss(&weights, &batch, &targets)?;
                weights.slices_mut()[ti][i] = orig - EPS;
                let down = loss(&weights, &batch, &targets)?;
                weights.slices_mut()[ti][i] = orig;
                let numeric = (up - down) / (2.0 * EPS);
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FLOOR);
                report.parameters_checked += 1;
                if rel > report.max_rel_error || rel.is_nan() {
                    report.max_rel_error = if rel.is_nan() { f64::INFINITY } else { rel };
                    report.worst_tensor = name.clone();
                }
            }
        }
    }
    Ok(report)
}
