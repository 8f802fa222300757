//! Spectrogram features on a log-spaced frequency grid.
//!
//! Each 3001-sample window of input and output is transformed with a short-time
//! Fourier transform evaluated by direct summation at 42 frequencies between 0
//! and 10 Hz. Real parts and phase angles of both spectrograms are stacked into a
//! 168 × 11 real tensor.

use std::f64::consts::PI;

use ndarray::{s, Array2, ArrayView2, ArrayViewMut2};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const GRID_LEN: usize = 42;
pub const FEATURE_ROWS: usize = 4 * GRID_LEN;

/// Magnitudes below this are treated as zero when taking a phase.
pub const PHASE_ZERO_THRESHOLD: f64 = 1e-300;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FreqGrid {
    pub frequencies: Vec<f64>,
}

/// `[0, 10^(h/20 − 1) for h in 0..41]`: 0 Hz followed by 41 points from 0.1 Hz to 10 Hz.
pub fn log_freq_grid() -> FreqGrid {
    let frequencies = std::iter::once(0.0)
        .chain((0..GRID_LEN - 1).map(|h| 10f64.powf(h as f64 / 20.0 - 1.0)))
        .collect();
    FreqGrid { frequencies }
}

impl FreqGrid {
    pub fn len(&self) -> usize {
        self.frequencies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frequencies.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowFunction {
    /// Periodic Hann, `g[k] = 0.5 − 0.5 cos(2πk/L)`.
    Hann,
    Rectangular,
}

impl WindowFunction {
    pub fn coefficients(self, len: usize) -> Vec<f64> {
        match self {
            WindowFunction::Hann => (0..len)
                .map(|k| 0.5 - 0.5 * (2.0 * PI * k as f64 / len as f64).cos())
                .collect(),
            WindowFunction::Rectangular => vec![1.0; len],
        }
    }
}

/// Time origin of the complex exponential.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseOrigin {
    /// Each frame is referenced to its own first sample: `e^{−j2πf k/fs}`.
    FrameStart,
    /// All frames share the window's first sample: `e^{−j2πf (m·hop + k)/fs}`.
    WindowStart,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StftConfig {
    pub window_len: usize,
    pub hop: usize,
    pub fs: f64,
    pub window: WindowFunction,
    pub phase_origin: PhaseOrigin,
}

impl Default for StftConfig {
    /// 2 s Hann window, 95 % overlap (100-sample hop) at 1 kHz.
    fn default() -> Self {
        Self {
            window_len: 2000,
            hop: 100,
            fs: 1000.0,
            window: WindowFunction::Hann,
            phase_origin: PhaseOrigin::FrameStart,
        }
    }
}

impl StftConfig {
    pub fn frame_count(&self, len: usize) -> Result<usize> {
        if self.hop == 0 || self.window_len == 0 {
            return Err(Error::InvalidParameter("window length and hop must be >= 1".into()));
        }
        if len < self.window_len {
            return Err(Error::SequenceTooShort {
                len,
                required: self.window_len,
            });
        }
        Ok((len - self.window_len) / self.hop + 1)
    }
}

/// Complex STFT, `frequencies × frames`.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub values: Array2<Complex64>,
    pub hop: usize,
    pub window_len: usize,
}

impl Spectrogram {
    pub fn frames(&self) -> usize {
        self.values.ncols()
    }
}

/// STFT evaluator with the windowed kernel precomputed for one configuration.
#[derive(Debug, Clone)]
pub struct Stft {
    cfg: StftConfig,
    grid: FreqGrid,
    /// `g[k]·e^{−j2πf_h k/fs}`, row per frequency.
    kernel: Vec<Vec<Complex64>>,
}

impl Stft {
    pub fn new(cfg: StftConfig, grid: FreqGrid) -> Result<Self> {
        cfg.frame_count(cfg.window_len)?;
        let g = cfg.window.coefficients(cfg.window_len);
        let kernel = grid
            .frequencies
            .iter()
            .map(|&f| {
                g.iter()
                    .enumerate()
                    .map(|(k, &gk)| Complex64::from_polar(gk, -2.0 * PI * f * k as f64 / cfg.fs))
                    .collect()
            })
            .collect();
        Ok(Self { cfg, grid, kernel })
    }

    pub fn config(&self) -> &StftConfig {
        &self.cfg
    }

    pub fn grid(&self) -> &FreqGrid {
        &self.grid
    }

    pub fn transform(&self, x: &[f64]) -> Result<Spectrogram> {
        let frames = self.cfg.frame_count(x.len())?;
        let mut values = Array2::<Complex64>::zeros((self.grid.len(), frames));
        for m in 0..frames {
            let offset = m * self.cfg.hop;
            let seg = &x[offset..offset + self.cfg.window_len];
            for (h, row) in self.kernel.iter().enumerate() {
                let mut v = windowed_sum(seg, row);
                if self.cfg.phase_origin == PhaseOrigin::WindowStart && offset > 0 {
                    let f = self.grid.frequencies[h];
                    v *= Complex64::from_polar(1.0, -2.0 * PI * f * offset as f64 / self.cfg.fs);
                }
                values[[h, m]] = v;
            }
        }
        Ok(Spectrogram {
            values,
            hop: self.cfg.hop,
            window_len: self.cfg.window_len,
        })
    }
}

/// `Σ x[k]·kernel[k]` with independent partial sums so the loop is not latency bound.
fn windowed_sum(x: &[f64], kernel: &[Complex64]) -> Complex64 {
    const PARTS: usize = 4;
    let mut re = [0.0; PARTS];
    let mut im = [0.0; PARTS];
    let mut xs = x.chunks_exact(PARTS);
    let mut ks = kernel.chunks_exact(PARTS);
    for (xc, kc) in (&mut xs).zip(&mut ks) {
        for p in 0..PARTS {
            re[p] += xc[p] * kc[p].re;
            im[p] += xc[p] * kc[p].im;
        }
    }
    let mut tail = Complex64::new(0.0, 0.0);
    for (xk, kk) in xs.remainder().iter().zip(ks.remainder()) {
        tail += kk * xk;
    }
    Complex64::new((re[0] + re[1]) + (re[2] + re[3]), (im[0] + im[1]) + (im[2] + im[3])) + tail
}

pub fn stft(x: &[f64], cfg: StftConfig, grid: &FreqGrid) -> Result<Spectrogram> {
    Stft::new(cfg, grid.clone())?.transform(x)
}

/// Phase angle in `(−π, π]`, with the phase of (near-)zero values defined as 0.
pub fn phase(z: Complex64) -> f64 {
    if z.norm() < PHASE_ZERO_THRESHOLD {
        return 0.0;
    }
    let a = z.im.atan2(z.re);
    if a <= -PI {
        PI
    } else {
        a
    }
}

/// Real 168 × T feature matrix: `[real(input); real(output); phase(input); phase(output)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTensor {
    pub values: Array2<f64>,
}

impl FeatureTensor {
    pub fn rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn steps(&self) -> usize {
        self.values.ncols()
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.values.view()
    }
}

pub struct Featurizer {
    stft: Stft,
    window_samples: usize,
}

impl Featurizer {
    /// `window_samples` is the I/O window length (3001 for 3 s at 1 kHz).
    pub fn new(cfg: StftConfig, window_samples: usize) -> Result<Self> {
        cfg.frame_count(window_samples)?;
        Ok(Self {
            stft: Stft::new(cfg, log_freq_grid())?,
            window_samples,
        })
    }

    pub fn standard() -> Self {
        Self::new(StftConfig::default(), 3001).expect("default configuration is valid")
    }

    pub fn config(&self) -> &StftConfig {
        self.stft.config()
    }

    pub fn window_samples(&self) -> usize {
        self.window_samples
    }

    pub fn steps(&self) -> usize {
        self.stft.config().frame_count(self.window_samples).unwrap()
    }

    pub fn featurize_pair(&self, u_win: &[f64], y_win: &[f64]) -> Result<FeatureTensor> {
        if u_win.len() != y_win.len() {
            return Err(Error::LengthMismatch {
                left: u_win.len(),
                right: y_win.len(),
            });
        }
        if u_win.len() != self.window_samples {
            return Err(Error::LengthMismatch {
                left: u_win.len(),
                right: self.window_samples,
            });
        }
        let su = self.stft.transform(u_win)?;
        let sy = self.stft.transform(y_win)?;
        let n = self.stft.grid().len();
        let mut values = Array2::<f64>::zeros((4 * n, su.frames()));
        values.slice_mut(s![0..n, ..]).assign(&su.values.mapv(|z| z.re));
        values.slice_mut(s![n..2 * n, ..]).assign(&sy.values.mapv(|z| z.re));
        values.slice_mut(s![2 * n..3 * n, ..]).assign(&su.values.mapv(phase));
        values.slice_mut(s![3 * n..4 * n, ..]).assign(&sy.values.mapv(phase));
        Ok(FeatureTensor { values })
    }
}

/// Featurizes with the default configuration.
pub fn featurize_pair(u_win: &[f64], y_win: &[f64]) -> Result<FeatureTensor> {
    Featurizer::standard().featurize_pair(u_win, y_win)
}

/// Per-feature-row z-score fitted on a training set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureNormalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureNormalizer {
    /// Statistics pooled over all steps of all samples; rows with zero spread keep scale 1.
    pub fn fit<'a>(samples: impl IntoIterator<Item = ArrayView2<'a, f32>>) -> Result<Self> {
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        let mut count = 0usize;
        for x in samples {
            if sum.is_empty() {
                sum = vec![0.0; x.nrows()];
                sq = vec![0.0; x.nrows()];
            }
            if x.nrows() != sum.len() {
                return Err(Error::ShapeMismatch {
                    expected: vec![sum.len()],
                    actual: vec![x.nrows()],
                });
            }
            for (r, row) in x.rows().into_iter().enumerate() {
                for &v in row {
                    let v = f64::from(v);
                    sum[r] += v;
                    sq[r] += v * v;
                }
            }
            count += x.ncols();
        }
        if count == 0 {
            return Err(Error::EmptySelection("no samples to fit normalizer".into()));
        }
        let n = count as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| {
                let sd = (q / n - m * m).max(0.0).sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn apply(&self, mut x: ArrayViewMut2<'_, f32>) {
        for (r, mut row) in x.rows_mut().into_iter().enumerate() {
            let (m, s) = (self.mean[r], self.std[r]);
            row.mapv_inplace(|v| ((f64::from(v) - m) / s) as f32);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn grid_values() {
        let g = log_freq_grid();
        assert_eq!(g.len(), 42);
        assert_eq!(g.frequencies[0], 0.0);
        assert_relative_eq!(g.frequencies[1], 0.1, max_relative = 1e-14);
        assert!((g.frequencies[2] - 0.1122).abs() < 5e-5);
        assert!((g.frequencies[3] - 0.1259).abs() < 5e-5);
        assert!((g.frequencies[39] - 7.9433).abs() < 5e-5);
        assert!((g.frequencies[40] - 8.9125).abs() < 5e-5);
        assert!((g.frequencies[41] - 10.0).abs() < 1e-12);
        assert!((g.frequencies[21] - 1.0).abs() < 1e-12);
        assert!(g.frequencies.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn frame_count_matches_overlap_formula() {
        let cfg = StftConfig::default();
        assert_eq!(cfg.frame_count(3001).unwrap(), 11);
        // (1 − k)/(k(1 − p)) + 1 with k = 2/3, p = 0.95
        let (k, p) = (2.0f64 / 3.0, 0.95f64);
        assert!(((1.0 - k) / (k * (1.0 - p)) + 1.0 - 11.0).abs() < 1e-9);
        assert!(matches!(cfg.frame_count(1999), Err(Error::SequenceTooShort { .. })));
    }

    #[test]
    fn constant_signal_dc_bin() {
        let cfg = StftConfig::default();
        let spec = stft(&vec![2.5; 3001], cfg, &log_freq_grid()).unwrap();
        let gsum: f64 = WindowFunction::Hann.coefficients(2000).iter().sum();
        for m in 0..spec.frames() {
            let v = spec.values[[0, m]];
            assert_relative_eq!(v.re, 2.5 * gsum, max_relative = 1e-12);
            assert_eq!(v.im, 0.0);
        }
    }

    #[test]
    fn one_hertz_peak() {
        let x: Vec<f64> = (0..3001).map(|i| (2.0 * PI * i as f64 / 1000.0).sin()).collect();
        for origin in [PhaseOrigin::FrameStart, PhaseOrigin::WindowStart] {
            let cfg = StftConfig {
                phase_origin: origin,
                ..StftConfig::default()
            };
            let spec = stft(&x, cfg, &log_freq_grid()).unwrap();
            let best = (0..42)
                .max_by(|&a, &b| spec.values[[a, 0]].norm().total_cmp(&spec.values[[b, 0]].norm()))
                .unwrap();
            assert_eq!(best, 21);
        }
    }

    #[test]
    fn phase_convention() {
        assert_eq!(phase(Complex64::new(0.0, 0.0)), 0.0);
        assert_eq!(phase(Complex64::new(-0.0, -0.0)), 0.0);
        assert_eq!(phase(Complex64::new(-1.0, -0.0)), PI);
        assert_eq!(phase(Complex64::new(-1.0, 0.0)), PI);
        assert_relative_eq!(phase(Complex64::new(0.0, -1.0)), -PI / 2.0);
    }

    #[test]
    fn featurize_shapes_and_blocks() {
        let u: Vec<f64> = (0..3001).map(|i| (i as f64 * 0.003).sin() + 0.2).collect();
        let zeros = vec![0.0; 3001];
        let f = featurize_pair(&u, &zeros).unwrap();
        assert_eq!((f.rows(), f.steps()), (168, 11));
        assert!(f.values.slice(s![42..84, ..]).iter().all(|&v| v == 0.0));
        assert!(f.values.slice(s![126..168, ..]).iter().all(|&v| v == 0.0));
        assert!(f.values.slice(s![84..168, ..]).iter().all(|&v| v > -PI && v <= PI));

        let scaled: Vec<f64> = u.iter().map(|v| 3.0 * v).collect();
        let g = featurize_pair(&scaled, &zeros).unwrap();
        for h in 0..42 {
            for m in 0..11 {
                assert_relative_eq!(g.values[[h, m]], 3.0 * f.values[[h, m]], max_relative = 1e-12, epsilon = 1e-9);
                let (pa, pb) = (f.values[[84 + h, m]], g.values[[84 + h, m]]);
                let d = (pa - pb).abs();
                assert!(d < 1e-9 || (d - 2.0 * PI).abs() < 1e-9, "phase changed {pa} vs {pb}");
            }
        }
        assert!(featurize_pair(&u[..3000], &zeros[..3000]).is_err());
        assert!(matches!(featurize_pair(&u, &zeros[..3000]), Err(Error::LengthMismatch { .. })));
    }

    #[test]
    fn normalizer_centers_rows() {
        let a = Array2::from_shape_fn((3, 4), |(r, c)| (r * 10 + c) as f32);
        let b = Array2::from_shape_fn((3, 4), |(r, c)| (r * 10 + c + 4) as f32);
        let norm = FeatureNormalizer::fit([a.view(), b.view()]).unwrap();
        let mut x = a.clone();
        norm.apply(x.view_mut());
        let mut y = b.clone();
        norm.apply(y.view_mut());
        for r in 0..3 {
            let s: f32 = x.row(r).sum() + y.row(r).sum();
            assert!(s.abs() < 1e-5);
        }
    }
}
