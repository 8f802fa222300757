//! Six-layer recurrent regressor: spectrogram sequence → GRU / LSTM / BiLSTM →
//! dense(256) → ReLU → dropout → dense(1).
//!
//! Forward and backward passes are written out by hand (backpropagation through
//! time over the full sequence). Everything is generic over [`Real`] so the same
//! code trains in `f32` and is gradient-checked in `f64`.

mod gradcheck;
mod kernels;
mod model;
mod optim;
mod train;
mod weights;

use std::fmt;
use std::str::FromStr;

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2, LinalgScalar, ScalarOperand};
use num_traits::{Float, NumAssign};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use gradcheck::{gradient_check, GradCheckReport};
pub use model::{
    backward, cell_step, forward, mse_output_grad, predict, CellState, ForwardCache, ForwardMode, SequenceBatch,
};
pub use optim::{lr_schedule, sgd_momentum_step, TrainConfig};
pub use train::{predict_samples, train, train_with_progress, EpochStats, SampleSet, TrainOutcome};
pub use weights::{init_weights, load_weights, save_weights, CellParams, ModelWeights, WeightsHeader};

/// Scalar type the network runs in.
pub trait Real:
    Float + NumAssign + LinalgScalar + ScalarOperand + Send + Sync + fmt::Debug + fmt::Display + Default + 'static
{
    fn of_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// `c += a · b`
    fn mm_nn(a: ArrayView2<'_, Self>, b: ArrayView2<'_, Self>, c: &mut ArrayViewMut2<'_, Self>) {
        general_mat_mul(Self::one(), &a, &b, Self::one(), c)
    }

    /// `c += aᵀ · b`
    fn mm_tn(a: ArrayView2<'_, Self>, b: ArrayView2<'_, Self>, c: &mut ArrayViewMut2<'_, Self>) {
        general_mat_mul(Self::one(), &a.t(), &b, Self::one(), c)
    }
}

impl Real for f32 {
    fn of_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        f64::from(self)
    }
    fn mm_nn(a: ArrayView2<'_, Self>, b: ArrayView2<'_, Self>, c: &mut ArrayViewMut2<'_, Self>) {
        kernels::mm_nn(a, b, c)
    }
    fn mm_tn(a: ArrayView2<'_, Self>, b: ArrayView2<'_, Self>, c: &mut ArrayViewMut2<'_, Self>) {
        kernels::mm_tn(a, b, c)
    }
}

impl Real for f64 {
    fn of_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellKind {
    Gru,
    Lstm,
    BiLstm,
}

impl CellKind {
    pub const ALL: [CellKind; 3] = [CellKind::Gru, CellKind::Lstm, CellKind::BiLstm];

    pub fn gates(self) -> usize {
        match self {
            CellKind::Gru => 3,
            CellKind::Lstm | CellKind::BiLstm => 4,
        }
    }

    pub fn directions(self) -> usize {
        match self {
            CellKind::BiLstm => 2,
            _ => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            CellKind::Gru => "GRU",
            CellKind::Lstm => "LSTM",
            CellKind::BiLstm => "BiLSTM",
        }
    }
}

impl fmt::Display for CellKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CellKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gru" => Ok(CellKind::Gru),
            "lstm" => Ok(CellKind::Lstm),
            "bilstm" => Ok(CellKind::BiLstm),
            _ => Err(Error::InvalidParameter(format!("unknown cell kind {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub cell_kind: CellKind,
    pub input_size: usize,
    /// Per direction.
    pub hidden_size: usize,
    pub fc1_size: usize,
    pub dropout_rate: f64,
    pub output_size: usize,
}

impl ModelSpec {
    /// 168 inputs, 256 hidden units per direction, 256-node dense layer, 50 % dropout.
    pub fn standard(cell_kind: CellKind) -> Self {
        Self {
            cell_kind,
            input_size: crate::features::FEATURE_ROWS,
            hidden_size: 256,
            fc1_size: 256,
            dropout_rate: 0.5,
            output_size: 1,
        }
    }

    /// BiLSTM variant whose two directions together hold `total` hidden units.
    pub fn with_split_hidden(mut self, total: usize) -> Self {
        self.hidden_size = (total / self.cell_kind.directions()).max(1);
        self
    }

    pub fn cell_output(&self) -> usize {
        self.hidden_size * self.cell_kind.directions()
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 || self.hidden_size == 0 || self.fc1_size == 0 {
            return Err(Error::InvalidParameter("layer sizes must be >= 1".into()));
        }
        if self.output_size != 1 {
            return Err(Error::InvalidParameter("only a single regression output is supported".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::InvalidParameter(format!(
                "dropout rate must be in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        Ok(())
    }
}
