//! Dataset generation, sliding windows, cross-validation splits and persistence.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::container::{self, Tensor, TensorData};
use crate::error::{Error, Result};
use crate::seed::{derive_seed, derived_rng};
use crate::sim::{InputSignal, Trajectory};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const DEFAULT_FS: f64 = 1000.0;
pub const DEFAULT_DURATION_S: f64 = 10.0;
/// 3 s inclusive of both endpoints at 1 kHz.
pub const DEFAULT_WINDOW_LEN: usize = 3001;
pub const DEFAULT_NOISE_SIGMA: f64 = 0.01;
pub const VALIDATION_FRACTION: f64 = 0.1;

/// ζ ∈ {0.1, …, 0.8}.
pub fn zeta_grid() -> Vec<f64> {
    (1..=8).map(|i| i as f64 / 10.0).collect()
}

/// Unit step, unit ramp and three 10-amplitude sinusoids at 0.5, 1 and 2 Hz.
pub fn base_inputs() -> Vec<InputSignal> {
    let sine = |f| InputSignal::Sine {
        amplitude: 10.0,
        frequency_hz: f,
    };
    vec![
        InputSignal::Step { magnitude: 1.0 },
        InputSignal::Ramp { slope: 1.0 },
        sine(0.5),
        sine(1.0),
        sine(2.0),
    ]
}

/// Base catalog plus steps of magnitude −1, +10 and −10.
pub fn extended_inputs() -> Vec<InputSignal> {
    let mut v = base_inputs();
    v.extend([-1.0, 10.0, -10.0].map(|m| InputSignal::Step { magnitude: m }));
    v
}

pub fn window_count(traj_len: usize, window_len: usize) -> Result<usize> {
    if window_len == 0 {
        return Err(Error::InvalidParameter("window length must be >= 1".into()));
    }
    if traj_len < window_len {
        return Err(Error::SequenceTooShort {
            len: traj_len,
            required: window_len,
        });
    }
    Ok(traj_len - window_len + 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub extended: bool,
    pub noise_sigma: f64,
    pub master_seed: u64,
    pub fs: f64,
    pub duration_s: f64,
    pub window_len: usize,
}

impl DatasetConfig {
    pub fn new(extended: bool, noise_sigma: f64, master_seed: u64) -> Self {
        Self {
            extended,
            noise_sigma,
            master_seed,
            fs: DEFAULT_FS,
            duration_s: DEFAULT_DURATION_S,
            window_len: DEFAULT_WINDOW_LEN,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryEntry {
    pub id: usize,
    pub input: InputSignal,
    pub zeta: f64,
    pub seed: u64,
    pub len: usize,
    /// Relative to the manifest's directory.
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub fs: f64,
    pub duration_s: f64,
    pub zetas: Vec<f64>,
    pub inputs: Vec<InputSignal>,
    pub window_len: usize,
    pub noise_sigma: f64,
    pub master_seed: u64,
    pub extended: bool,
    pub trajectories: Vec<TrajectoryEntry>,
}

impl DatasetManifest {
    pub fn trajectory_len(&self) -> usize {
        (self.duration_s * self.fs).round() as usize + 1
    }

    pub fn total_windows(&self) -> Result<usize> {
        self.trajectories
            .iter()
            .map(|t| window_count(t.len, self.window_len))
            .sum()
    }
}

/// Manifest plus the trajectories it indexes, in manifest order.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub trajectories: Vec<Trajectory>,
}

pub fn noise_seed(master_seed: u64, input: &InputSignal, zeta: f64) -> u64 {
    derive_seed(master_seed, &format!("noise/{}/{zeta}", input.label()))
}

/// Simulates every (input, ζ) pair of the chosen catalog. Nothing is written to disk.
pub fn generate_dataset(cfg: &DatasetConfig) -> Result<Dataset> {
    let inputs = if cfg.extended {
        extended_inputs()
    } else {
        base_inputs()
    };
    let zetas = zeta_grid();
    let pairs: Vec<(InputSignal, f64)> = inputs
        .iter()
        .flat_map(|&i| zetas.iter().map(move |&z| (i, z)))
        .collect();
    let trajectories = pairs
        .par_iter()
        .map(|&(input, zeta)| {
            let seed = noise_seed(cfg.master_seed, &input, zeta);
            Trajectory::simulate(input, zeta, cfg.duration_s, cfg.fs, cfg.noise_sigma, seed)
        })
        .collect::<Result<Vec<_>>>()?;
    let entries = trajectories
        .iter()
        .enumerate()
        .map(|(id, t)| TrajectoryEntry {
            id,
            input: t.input,
            zeta: t.zeta,
            seed: t.seed,
            len: t.len(),
            path: PathBuf::from(format!("trajectories/traj_{id:03}.bin")),
        })
        .collect();
    let manifest = DatasetManifest {
        fs: cfg.fs,
        duration_s: cfg.duration_s,
        zetas,
        inputs,
        window_len: cfg.window_len,
        noise_sigma: cfg.noise_sigma,
        master_seed: cfg.master_seed,
        extended: cfg.extended,
        trajectories: entries,
    };
    if let Some(t) = manifest.trajectories.iter().find(|t| t.len < cfg.window_len) {
        return Err(Error::SequenceTooShort {
            len: t.len,
            required: cfg.window_len,
        });
    }
    Ok(Dataset {
        manifest,
        trajectories,
    })
}

/// A trajectory as a 2 × n `(u; y)` float64 tensor.
pub fn trajectory_tensor(t: &Trajectory) -> Tensor {
    let mut data = Vec::with_capacity(2 * t.len());
    data.extend_from_slice(&t.u);
    data.extend_from_slice(&t.y);
    Tensor::f64(vec![2, t.len()], data).expect("consistent shape")
}

pub fn write_trajectory(path: &Path, t: &Trajectory) -> Result<()> {
    container::write_tensor(path, &trajectory_tensor(t))
}

/// Reads a `(u; y)` tensor back into `(u, y)`.
pub fn read_io_pair(path: &Path) -> Result<(Vec<f64>, Vec<f64>)> {
    let t = container::read_tensor(path)?;
    let corrupt = |reason: &str| Error::CorruptContainer {
        path: path.to_path_buf(),
        reason: reason.into(),
    };
    if t.dims.len() != 2 || t.dims[0] != 2 {
        return Err(corrupt("trajectory must be a 2 × n matrix"));
    }
    let n = t.dims[1];
    let data = match t.data {
        TensorData::F64(v) => v,
        TensorData::F32(_) => return Err(corrupt("trajectory must be float64")),
    };
    Ok((data[..n].to_vec(), data[n..].to_vec()))
}

impl Dataset {
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for (entry, t) in self.manifest.trajectories.iter().zip(&self.trajectories) {
            write_trajectory(&dir.join(&entry.path), t)?;
        }
        fs::write(
            dir.join(MANIFEST_FILE),
            serde_json::to_string_pretty(&self.manifest)?,
        )?;
        Ok(())
    }

    /// Loads a manifest and all trajectory files, checking declared lengths.
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: DatasetManifest =
            serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
        let trajectories = manifest
            .trajectories
            .iter()
            .map(|e| {
                let path = dir.join(&e.path);
                if !path.exists() {
                    return Err(Error::MissingTrajectory(path));
                }
                let (u, y) = read_io_pair(&path)?;
                if u.len() != e.len {
                    return Err(Error::CorruptContainer {
                        path,
                        reason: format!("declared length {} but file holds {}", e.len, u.len()),
                    });
                }
                Ok(Trajectory {
                    u,
                    y,
                    fs: manifest.fs,
                    input: e.input,
                    zeta: e.zeta,
                    noise_sigma: manifest.noise_sigma,
                    seed: e.seed,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            manifest,
            trajectories,
        })
    }

    /// Windows with starts `0, stride, 2·stride, …`; stride 1 gives every window.
    pub fn windows(&self, stride: usize) -> Result<Vec<WindowRef>> {
        if stride == 0 {
            return Err(Error::InvalidParameter("window stride must be >= 1".into()));
        }
        let len = self.manifest.window_len;
        let mut out = Vec::new();
        for (id, t) in self.trajectories.iter().enumerate() {
            let count = window_count(t.len(), len)?;
            out.extend((0..count).step_by(stride).map(|start| WindowRef {
                trajectory: id,
                start,
                len,
            }));
        }
        Ok(out)
    }

    pub fn window_slices(&self, w: &WindowRef) -> (&[f64], &[f64]) {
        let t = &self.trajectories[w.trajectory];
        let r = w.start..w.start + w.len;
        (&t.u[r.clone()], &t.y[r])
    }

    pub fn zeta_of(&self, w: &WindowRef) -> f64 {
        self.trajectories[w.trajectory].zeta
    }

    pub fn input_of(&self, w: &WindowRef) -> InputSignal {
        self.trajectories[w.trajectory].input
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct WindowRef {
    pub trajectory: usize,
    pub start: usize,
    pub len: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum SplitKind {
    /// Folds hold disjoint ζ sets: fold 1 trains on ζ ∈ {0.1, 0.3, 0.5, 0.7}.
    SepZeta { fold: u8 },
    /// Seeded random halves; fold 1 tests on the first half.
    MixZeta { seed: u64, fold: u8 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub kind: SplitKind,
    pub train: Vec<WindowRef>,
    pub validation: Vec<WindowRef>,
    pub test: Vec<WindowRef>,
}

fn check_fold(fold: u8) -> Result<()> {
    if fold == 1 || fold == 2 {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("fold must be 1 or 2, got {fold}")))
    }
}

fn carve_validation(mut pool: Vec<WindowRef>, seed: u64, label: &str) -> (Vec<WindowRef>, Vec<WindowRef>) {
    pool.shuffle(&mut derived_rng(seed, label));
    let n_val = (pool.len() as f64 * VALIDATION_FRACTION).floor() as usize;
    let train = pool.split_off(n_val);
    (train, pool)
}

/// ζ values at even positions of the sorted grid (0.1, 0.3, …) form group A.
fn zeta_group_a(dataset: &Dataset) -> BTreeSet<usize> {
    let mut zetas: Vec<f64> = dataset.manifest.zetas.clone();
    zetas.sort_by(f64::total_cmp);
    dataset
        .trajectories
        .iter()
        .enumerate()
        .filter(|(_, t)| {
            zetas
                .iter()
                .position(|z| (z - t.zeta).abs() < 1e-9)
                .is_some_and(|p| p % 2 == 0)
        })
        .map(|(i, _)| i)
        .collect()
}

pub fn split_sep_zeta(dataset: &Dataset, windows: &[WindowRef], fold: u8, seed: u64) -> Result<SplitSpec> {
    check_fold(fold)?;
    let group_a = zeta_group_a(dataset);
    let (a, b): (Vec<WindowRef>, Vec<WindowRef>) =
        windows.iter().partition(|w| group_a.contains(&w.trajectory));
    let (pool, test) = if fold == 1 { (a, b) } else { (b, a) };
    let (train, validation) = carve_validation(pool, seed, &format!("split/sep/{fold}/validation"));
    Ok(SplitSpec {
        kind: SplitKind::SepZeta { fold },
        train,
        validation,
        test,
    })
}

pub fn split_mix_zeta(windows: &[WindowRef], seed: u64, fold: u8) -> Result<SplitSpec> {
    check_fold(fold)?;
    let mut all = windows.to_vec();
    all.shuffle(&mut derived_rng(seed, "split/mix/halves"));
    let second = all.split_off(all.len() / 2);
    let (test, pool) = if fold == 1 { (all, second) } else { (second, all) };
    let (train, validation) = carve_validation(pool, seed, &format!("split/mix/{fold}/validation"));
    Ok(SplitSpec {
        kind: SplitKind::MixZeta { seed, fold },
        train,
        validation,
        test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Dataset {
        let cfg = DatasetConfig {
            duration_s: 0.2,
            window_len: 51,
            ..DatasetConfig::new(false, 0.01, 3)
        };
        generate_dataset(&cfg).unwrap()
    }

    #[test]
    fn window_counts() {
        assert_eq!(window_count(10_001, 3001).unwrap(), 7001);
        assert_eq!(window_count(500, 500).unwrap(), 1);
        assert_eq!(window_count(10_001, 2001).unwrap(), 8001);
        assert!(window_count(10, 11).is_err());
    }

    #[test]
    fn default_dataset_sizes() {
        let base = generate_dataset(&DatasetConfig::new(false, 0.01, 1)).unwrap();
        assert_eq!(base.trajectories.len(), 40);
        assert!(base.trajectories.iter().all(|t| t.len() == 10_001));
        assert_eq!(base.manifest.total_windows().unwrap(), 280_040);
        assert_eq!(base.windows(1).unwrap().len(), 280_040);
        assert_eq!(base.windows(50).unwrap().len(), 40 * 141);

        let ext = generate_dataset(&DatasetConfig::new(true, 0.01, 1)).unwrap();
        assert_eq!(ext.trajectories.len(), 64);
        assert_eq!(ext.manifest.total_windows().unwrap(), 448_064);
    }

    #[test]
    fn sep_zeta_partitions() {
        let d = small();
        let w = d.windows(1).unwrap();
        for fold in [1, 2] {
            let s = split_sep_zeta(&d, &w, fold, 9).unwrap();
            let train_z: BTreeSet<u64> = s.train.iter().chain(&s.validation).map(|w| (d.zeta_of(w) * 10.0).round() as u64).collect();
            let test_z: BTreeSet<u64> = s.test.iter().map(|w| (d.zeta_of(w) * 10.0).round() as u64).collect();
            assert!(train_z.is_disjoint(&test_z));
            let expected_test: BTreeSet<u64> = if fold == 1 { [2, 4, 6, 8] } else { [1, 3, 5, 7] }.into();
            assert_eq!(test_z, expected_test);
            assert_eq!(s.train.len() + s.validation.len() + s.test.len(), w.len());
        }
        assert!(split_sep_zeta(&d, &w, 3, 9).is_err());
    }

    #[test]
    fn mix_zeta_is_seeded() {
        let d = small();
        let w = d.windows(1).unwrap();
        let a = split_mix_zeta(&w, 5, 1).unwrap();
        assert_eq!(a, split_mix_zeta(&w, 5, 1).unwrap());
        assert_ne!(a.test, split_mix_zeta(&w, 6, 1).unwrap().test);
        let b = split_mix_zeta(&w, 5, 2).unwrap();
        let ta: BTreeSet<_> = a.test.iter().collect();
        let tb: BTreeSet<_> = b.test.iter().collect();
        assert!(ta.is_disjoint(&tb));
        assert_eq!(ta.len() + tb.len(), w.len());
    }

    #[test]
    fn persistence_roundtrip() {
        let d = small();
        let dir = tempfile::tempdir().unwrap();
        d.save(dir.path()).unwrap();
        let back = Dataset::load(dir.path()).unwrap();
        assert_eq!(back.manifest, d.manifest);
        for (a, b) in back.trajectories.iter().zip(&d.trajectories) {
            assert_eq!(a, b);
        }
        fs::remove_file(dir.path().join(&d.manifest.trajectories[3].path)).unwrap();
        assert!(matches!(Dataset::load(dir.path()), Err(Error::MissingTrajectory(_))));
    }

    #[test]
    fn window_slices_have_declared_length() {
        let d = small();
        for w in d.windows(7).unwrap() {
            let (u, y) = d.window_slices(&w);
            assert_eq!((u.len(), y.len()), (w.len, w.len));
        }
    }
}
