use std::path::Path;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{CellKind, ModelSpec, Real, TrainConfig};
use crate::container::{self, Tensor, TensorData};
use crate::error::{Error, Result};
use crate::seed::rng_from_seed;

/// One recurrent direction. Gate blocks are stacked along rows:
/// LSTM `[input, forget, cell, output]`, GRU `[update, reset, candidate]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CellParams<F> {
    /// `gates·hidden × input`
    pub input: Array2<F>,
    /// `gates·hidden × hidden`
    pub recurrent: Array2<F>,
    pub bias: Array1<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights<F> {
    pub spec: ModelSpec,
    /// Forward direction first; BiLSTM adds the reverse direction.
    pub directions: Vec<CellParams<F>>,
    /// `fc1 × cell_output`
    pub fc1_weight: Array2<F>,
    pub fc1_bias: Array1<F>,
    /// `1 × fc1`
    pub fc2_weight: Array2<F>,
    pub fc2_bias: Array1<F>,
}

const DIRECTION_NAMES: [&str; 2] = ["fwd", "bwd"];

impl<F: Real> ModelWeights<F> {
    pub fn zeros(spec: ModelSpec) -> Self {
        let g = spec.cell_kind.gates() * spec.hidden_size;
        let directions = (0..spec.cell_kind.directions())
            .map(|_| CellParams {
                input: Array2::zeros((g, spec.input_size)),
                recurrent: Array2::zeros((g, spec.hidden_size)),
                bias: Array1::zeros(g),
            })
            .collect();
        Self {
            spec,
            directions,
            fc1_weight: Array2::zeros((spec.fc1_size, spec.cell_output())),
            fc1_bias: Array1::zeros(spec.fc1_size),
            fc2_weight: Array2::zeros((spec.output_size, spec.fc1_size)),
            fc2_bias: Array1::zeros(spec.output_size),
        }
    }

    /// Same shapes, all zeros (gradient / velocity buffers).
    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.spec)
    }

    /// `(name, shape, values)` for every tensor, in a fixed order.
    pub fn named(&self) -> Vec<(String, Vec<usize>, &[F])> {
        let mut out = Vec::new();
        for (d, p) in self.directions.iter().enumerate() {
            let dir = DIRECTION_NAMES[d];
            out.push((format!("cell.{dir}.input_weights"), p.input.shape().to_vec(), slice(&p.input)));
            out.push((
                format!("cell.{dir}.recurrent_weights"),
                p.recurrent.shape().to_vec(),
                slice(&p.recurrent),
            ));
            out.push((format!("cell.{dir}.bias"), p.bias.shape().to_vec(), slice1(&p.bias)));
        }
        out.push(("fc1.weight".into(), self.fc1_weight.shape().to_vec(), slice(&self.fc1_weight)));
        out.push(("fc1.bias".into(), self.fc1_bias.shape().to_vec(), slice1(&self.fc1_bias)));
        out.push(("fc2.weight".into(), self.fc2_weight.shape().to_vec(), slice(&self.fc2_weight)));
        out.push(("fc2.bias".into(), self.fc2_bias.shape().to_vec(), slice1(&self.fc2_bias)));
        out
    }

    /// Mutable views in the same order as [`ModelWeights::named`].
    pub fn slices_mut(&mut self) -> Vec<&mut [F]> {
        let mut out: Vec<&mut [F]> = Vec::new();
        for p in &mut self.directions {
            out.push(p.input.as_slice_mut().expect("standard layout"));
            out.push(p.recurrent.as_slice_mut().expect("standard layout"));
            out.push(p.bias.as_slice_mut().expect("standard layout"));
        }
        out.push(self.fc1_weight.as_slice_mut().expect("standard layout"));
        out.push(self.fc1_bias.as_slice_mut().expect("standard layout"));
        out.push(self.fc2_weight.as_slice_mut().expect("standard layout"));
        out.push(self.fc2_bias.as_slice_mut().expect("standard layout"));
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.named().iter().map(|(_, _, v)| v.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.named().iter().all(|(_, _, v)| v.iter().all(|x| x.is_finite()))
    }

    pub fn cast<G: Real>(&self) -> ModelWeights<G> {
        let c2 = |a: &Array2<F>| a.mapv(|v| G::of_f64(v.as_f64()));
        let c1 = |a: &Array1<F>| a.mapv(|v| G::of_f64(v.as_f64()));
        ModelWeights {
            spec: self.spec,
            directions: self
                .directions
                .iter()
                .map(|p| CellParams {
                    input: c2(&p.input),
                    recurrent: c2(&p.recurrent),
                    bias: c1(&p.bias),
                })
                .collect(),
            fc1_weight: c2(&self.fc1_weight),
            fc1_bias: c1(&self.fc1_bias),
            fc2_weight: c2(&self.fc2_weight),
            fc2_bias: c1(&self.fc2_bias),
        }
    }

    /// Largest absolute elementwise difference over all tensors.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.named()
            .iter()
            .zip(other.named())
            .flat_map(|((_, _, a), (_, _, b))| a.iter().zip(b.iter()).map(|(x, y)| (x.as_f64() - y.as_f64()).abs()))
            .fold(0.0, f64::max)
    }
}

fn slice<F>(a: &Array2<F>) -> &[F] {
    a.as_slice().expect("standard layout")
}

fn slice1<F>(a: &Array1<F>) -> &[F] {
    a.as_slice().expect("standard layout")
}

fn glorot<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Array2<f64> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-limit..limit))
}

/// `rows × cols` (rows ≥ cols) with orthonormal columns, by modified Gram–Schmidt
/// on a standard normal matrix.
fn orthogonal<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Array2<f64> {
    let mut q = Array2::from_shape_fn((rows, cols), |_| rng.sample::<f64, _>(StandardNormal));
    for j in 0..cols {
        for i in 0..j {
            let proj = q.column(i).dot(&q.column(j));
            let qi = q.column(i).to_owned();
            q.column_mut(j).scaled_add(-proj, &qi);
        }
        let norm = q.column(j).dot(&q.column(j)).sqrt();
        q.column_mut(j).mapv_inplace(|v| v / norm);
    }
    q
}

/// Glorot-uniform input and dense weights, orthogonal recurrent weights, zero
/// biases except the LSTM forget gate (1).
pub fn init_weights<F: Real>(spec: &ModelSpec, seed: u64) -> Result<ModelWeights<F>> {
    spec.validate()?;
    let mut rng = rng_from_seed(seed);
    let h = spec.hidden_size;
    let g = spec.cell_kind.gates() * h;
    let mut w = ModelWeights::<f64>::zeros(*spec);
    for p in &mut w.directions {
        p.input = glorot(&mut rng, g, spec.input_size);
        p.recurrent = orthogonal(&mut rng, g, h);
        if spec.cell_kind != CellKind::Gru {
            p.bias.slice_mut(ndarray::s![h..2 * h]).fill(1.0);
        }
    }
    w.fc1_weight = glorot(&mut rng, spec.fc1_size, spec.cell_output());
    w.fc2_weight = glorot(&mut rng, spec.output_size, spec.fc1_size);
    Ok(w.cast())
}

/// JSON header stored alongside the tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightsHeader {
    pub model_spec: ModelSpec,
    pub train_config: Option<TrainConfig>,
    /// Free-form identity of the training data (e.g. a hash of the split).
    pub data_fingerprint: Option<String>,
    /// Feature normalizer fitted on the training split, when used.
    pub normalizer: Option<crate::features::FeatureNormalizer>,
    pub model_id: String,
}

impl WeightsHeader {
    pub fn new(spec: ModelSpec) -> Self {
        Self {
            model_spec: spec,
            train_config: None,
            data_fingerprint: None,
            normalizer: None,
            model_id: format!("{}-untrained", spec.cell_kind.name().to_ascii_lowercase()),
        }
    }
}

/// Stores `f32` weights as float32 tensors and `f64` weights as float64 tensors.
pub fn save_weights<F: Real>(weights: &ModelWeights<F>, header: &WeightsHeader, path: &Path) -> Result<()> {
    if header.model_spec != weights.spec {
        return Err(Error::SpecMismatch("header spec differs from weights spec".into()));
    }
    let wide = std::mem::size_of::<F>() == 8;
    let tensors = weights
        .named()
        .into_iter()
        .map(|(name, dims, vals)| {
            let data = if wide {
                TensorData::F64(vals.iter().map(|v| v.as_f64()).collect())
            } else {
                TensorData::F32(vals.iter().map(|v| v.as_f64() as f32).collect())
            };
            Ok((name, Tensor::new(dims, data)?))
        })
        .collect::<Result<Vec<_>>>()?;
    container::write_bundle(path, &serde_json::to_value(header)?, &tensors)
}

/// Loads a weights bundle. When `expected_kind` is given, a file holding a
/// different cell kind is rejected.
pub fn load_weights<F: Real>(path: &Path, expected_kind: Option<CellKind>) -> Result<(ModelWeights<F>, WeightsHeader)> {
    let (header, tensors) = container::read_bundle(path)?;
    let header: WeightsHeader = serde_json::from_value(header).map_err(|e| Error::CorruptContainer {
        path: path.to_path_buf(),
        reason: format!("bad weights header: {e}"),
    })?;
    if let Some(kind) = expected_kind {
        if header.model_spec.cell_kind != kind {
            return Err(Error::SpecMismatch(format!(
                "file holds a {} model, expected {}",
                header.model_spec.cell_kind, kind
            )));
        }
    }
    header.model_spec.validate()?;
    let mut weights = ModelWeights::<F>::zeros(header.model_spec);
    let expected: Vec<(String, Vec<usize>)> =
        weights.named().into_iter().map(|(n, d, _)| (n, d)).collect();
    if expected.len() != tensors.len() {
        return Err(Error::SpecMismatch(format!(
            "expected {} tensors, file holds {}",
            expected.len(),
            tensors.len()
        )));
    }
    for (((name, dims), (got_name, t)), dst) in expected.iter().zip(&tensors).zip(weights.slices_mut()) {
        if name != got_name || dims != &t.dims {
            return Err(Error::SpecMismatch(format!(
                "tensor {got_name} {:?} does not match expected {name} {dims:?}",
                t.dims
            )));
        }
        match &t.data {
            TensorData::F64(v) => dst.iter_mut().zip(v).for_each(|(d, s)| *d = F::of_f64(*s)),
            TensorData::F32(v) => dst.iter_mut().zip(v).for_each(|(d, s)| *d = F::of_f64(f64::from(*s))),
        }
    }
    if !weights.all_finite() {
        return Err(Error::CorruptContainer {
            path: path.to_path_buf(),
            reason: "non-finite weight values".into(),
        });
    }
    Ok((weights, header))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_with_expected_shapes() {
        let spec = ModelSpec::standard(CellKind::Gru);
        let a = init_weights::<f32>(&spec, 11).unwrap();
        let b = init_weights::<f32>(&spec, 11).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, init_weights::<f32>(&spec, 12).unwrap());
        assert_eq!(a.directions.len(), 1);
        assert_eq!(a.directions[0].input.shape(), &[768, 168]);
        assert_eq!(a.directions[0].recurrent.shape(), &[768, 256]);

        let bi = init_weights::<f32>(&ModelSpec::standard(CellKind::BiLstm), 1).unwrap();
        assert_eq!(bi.directions.len(), 2);
        assert_ne!(bi.directions[0].input, bi.directions[1].input);
        assert_eq!(bi.fc1_weight.shape(), &[256, 512]);
    }

    #[test]
    fn recurrent_init_is_orthonormal_and_forget_bias_is_one() {
        let spec = ModelSpec {
            hidden_size: 16,
            input_size: 5,
            fc1_size: 4,
            ..ModelSpec::standard(CellKind::Lstm)
        };
        let w = init_weights::<f64>(&spec, 3).unwrap();
        let r = &w.directions[0].recurrent;
        let gram = r.t().dot(r);
        for i in 0..16 {
            for j in 0..16 {
                let target = if i == j { 1.0 } else { 0.0 };
                assert!((gram[[i, j]] - target).abs() < 1e-10);
            }
        }
        let b = &w.directions[0].bias;
        assert!(b.iter().enumerate().all(|(i, &v)| v == if (16..32).contains(&i) { 1.0 } else { 0.0 }));
    }

    #[test]
    fn save_load_roundtrip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        let spec = ModelSpec {
            hidden_size: 6,
            fc1_size: 5,
            ..ModelSpec::standard(CellKind::Gru)
        };
        let w = init_weights::<f32>(&spec, 4).unwrap();
        save_weights(&w, &WeightsHeader::new(spec), &path).unwrap();
        let (back, header) = load_weights::<f32>(&path, Some(CellKind::Gru)).unwrap();
        assert_eq!(back, w);
        assert_eq!(header.model_spec, spec);

        assert!(matches!(
            load_weights::<f32>(&path, Some(CellKind::Lstm)),
            Err(Error::SpecMismatch(_))
        ));

        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 7]).unwrap();
        assert!(matches!(
            load_weights::<f32>(&path, None),
            Err(Error::CorruptContainer { .. })
        ));
    }

    #[test]
    fn f64_weights_roundtrip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m64.bin");
        let spec = ModelSpec {
            hidden_size: 3,
            fc1_size: 2,
            input_size: 4,
            ..ModelSpec::standard(CellKind::BiLstm)
        };
        let w = init_weights::<f64>(&spec, 8).unwrap();
        save_weights(&w, &WeightsHeader::new(spec), &path).unwrap();
        let (back, _) = load_weights::<f64>(&path, None).unwrap();
        assert_eq!(back, w);
    }
}
