//! Second-order plant: continuous parameters, Tustin discretization, input
//! catalog, discrete simulation and measurement noise.

use std::fmt;
use std::str::FromStr;

use num_complex::Complex64;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::rng_from_seed;

/// Rotational plant `J θ'' + b θ' + k θ = u`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhysicalParams {
    /// Moment of inertia (kg·m²).
    pub inertia: f64,
    /// Viscous damping (N·m·s).
    pub damping: f64,
    /// Spring constant (N·m/rad).
    pub stiffness: f64,
}

impl PhysicalParams {
    pub fn new(inertia: f64, damping: f64, stiffness: f64) -> Result<Self> {
        for (name, v) in [("J", inertia), ("b", damping), ("k", stiffness)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidParameter(format!("{name} must be finite and > 0, got {v}")));
            }
        }
        Ok(Self {
            inertia,
            damping,
            stiffness,
        })
    }
}

/// Standard form `gain·ωₙ² / (s² + 2ζωₙ s + ωₙ²)`, restricted to the underdamped case.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CanonicalParams {
    omega_n: f64,
    zeta: f64,
    gain: f64,
}

impl CanonicalParams {
    pub fn new(omega_n: f64, zeta: f64, gain: f64) -> Result<Self> {
        if !(omega_n.is_finite() && omega_n > 0.0) {
            return Err(Error::InvalidParameter(format!("omega_n must be > 0, got {omega_n}")));
        }
        if !(gain.is_finite() && gain > 0.0) {
            return Err(Error::InvalidParameter(format!("gain must be > 0, got {gain}")));
        }
        if !zeta.is_finite() || zeta <= 0.0 {
            return Err(Error::InvalidParameter(format!("zeta must be > 0, got {zeta}")));
        }
        if zeta >= 1.0 {
            return Err(Error::OverdampedExcluded { zeta });
        }
        Ok(Self { omega_n, zeta, gain })
    }

    /// Unity-gain system with ωₙ = 1 rad/s, the configuration used for every dataset.
    pub fn unit(zeta: f64) -> Result<Self> {
        Self::new(1.0, zeta, 1.0)
    }

    pub fn omega_n(&self) -> f64 {
        self.omega_n
    }

    pub fn zeta(&self) -> f64 {
        self.zeta
    }

    pub fn gain(&self) -> f64 {
        self.gain
    }

    /// Damped natural frequency ω_d = ωₙ√(1−ζ²).
    pub fn omega_d(&self) -> f64 {
        self.omega_n * (1.0 - self.zeta * self.zeta).sqrt()
    }
}

pub fn canonical_from_physical(p: &PhysicalParams) -> Result<CanonicalParams> {
    let omega_n = (p.stiffness / p.inertia).sqrt();
    let zeta = p.damping / (4.0 * p.stiffness * p.inertia).sqrt();
    CanonicalParams::new(omega_n, zeta, 1.0 / p.stiffness)
}

/// The conjugate pole pair `−ζωₙ ± jωₙ√(1−ζ²)`, upper half-plane pole first.
pub fn poles(c: &CanonicalParams) -> (Complex64, Complex64) {
    let re = -c.zeta * c.omega_n;
    let im = c.omega_d();
    (Complex64::new(re, im), Complex64::new(re, -im))
}

/// Two-state discrete system `x_{k+1} = A x_k + B u_k`, `y_k = C x_k + D u_k`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiscreteStateSpace {
    pub a: [[f64; 2]; 2],
    pub b: [f64; 2],
    pub c: [f64; 2],
    pub d: f64,
    pub ts: f64,
}

impl DiscreteStateSpace {
    pub fn spectral_radius(&self) -> f64 {
        let [[a11, a12], [a21, a22]] = self.a;
        let tr = a11 + a22;
        let det = a11 * a22 - a12 * a21;
        let disc = Complex64::new(tr * tr - 4.0 * det, 0.0).sqrt();
        let l1 = (Complex64::new(tr, 0.0) + disc) / 2.0;
        let l2 = (Complex64::new(tr, 0.0) - disc) / 2.0;
        l1.norm().max(l2.norm())
    }

    pub fn sample_rate(&self) -> f64 {
        1.0 / self.ts
    }
}

/// Tustin (bilinear) discretization in controllable companion form.
///
/// With `a = 2/Ts` and `M = a² + 2aζωₙ + ωₙ²` the realization is
/// `A = [[0, 1], [1 − 2(a²+ωₙ²)/M, 2(a²−ωₙ²)/M]]`, `B = [0, 1]ᵀ`,
/// `C = gain·4aωₙ²/M² · [ζωₙ, a+ζωₙ]`, `D = gain·ωₙ²/M`.
pub fn tustin_discretize(c: &CanonicalParams, ts: f64) -> Result<DiscreteStateSpace> {
    if !(ts.is_finite() && ts > 0.0) {
        return Err(Error::InvalidParameter(format!("sampling period must be > 0, got {ts}")));
    }
    let wn = c.omega_n;
    let z = c.zeta;
    let a = 2.0 / ts;
    let m = a * a + 2.0 * a * z * wn + wn * wn;
    let scale = c.gain * 4.0 * a * wn * wn / (m * m);
    Ok(DiscreteStateSpace {
        a: [
            [0.0, 1.0],
            [1.0 - 2.0 * (a * a + wn * wn) / m, 2.0 * (a * a - wn * wn) / m],
        ],
        b: [0.0, 1.0],
        c: [scale * z * wn, scale * (a + z * wn)],
        d: c.gain * wn * wn / m,
        ts,
    })
}

/// Excitation applied to the plant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum InputSignal {
    Step { magnitude: f64 },
    Ramp { slope: f64 },
    Sine { amplitude: f64, frequency_hz: f64 },
}

impl InputSignal {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v != 0.0;
        let valid = match *self {
            InputSignal::Step { magnitude } => ok(magnitude),
            InputSignal::Ramp { slope } => ok(slope),
            InputSignal::Sine {
                amplitude,
                frequency_hz,
            } => ok(amplitude) && frequency_hz.is_finite() && frequency_hz > 0.0,
        };
        if valid {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!("invalid input signal {self}")))
        }
    }

    pub fn is_step(&self) -> bool {
        matches!(self, InputSignal::Step { .. })
    }

    /// Short filesystem- and CSV-safe label, e.g. `step+1`, `ramp1`, `sine10@0.5hz`.
    pub fn label(&self) -> String {
        match *self {
            InputSignal::Step { magnitude } => format!("step{magnitude:+}"),
            InputSignal::Ramp { slope } => format!("ramp{slope}"),
            InputSignal::Sine {
                amplitude,
                frequency_hz,
            } => format!("sine{amplitude}@{frequency_hz}hz"),
        }
    }
}

impl fmt::Display for InputSignal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            InputSignal::Step { magnitude } => write!(f, "step:{magnitude}"),
            InputSignal::Ramp { slope } => write!(f, "ramp:{slope}"),
            InputSignal::Sine {
                amplitude,
                frequency_hz,
            } => write!(f, "sine:{amplitude}:{frequency_hz}"),
        }
    }
}

impl FromStr for InputSignal {
    type Err = Error;

    /// Parses `step:<m>`, `ramp:<slope>` or `sine:<amplitude>:<hz>`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidParameter(format!("cannot parse input signal {s:?}"));
        let parts: Vec<&str> = s.split(':').collect();
        let num = |i: usize| -> Result<f64> {
            parts.get(i).ok_or_else(bad)?.trim().parse::<f64>().map_err(|_| bad())
        };
        let sig = match (parts[0].trim().to_ascii_lowercase().as_str(), parts.len()) {
            ("step", 2) => InputSignal::Step { magnitude: num(1)? },
            ("ramp", 2) => InputSignal::Ramp { slope: num(1)? },
            ("sine", 3) => InputSignal::Sine {
                amplitude: num(1)?,
                frequency_hz: num(2)?,
            },
            _ => return Err(bad()),
        };
        sig.validate()?;
        Ok(sig)
    }
}

/// Samples `sig` at `t = i/fs` for `i = 0..n`.
pub fn generate_input(sig: &InputSignal, n: usize, fs: f64) -> Vec<f64> {
    (0..n)
        .map(|i| {
            let t = i as f64 / fs;
            match *sig {
                InputSignal::Step { magnitude } => magnitude,
                InputSignal::Ramp { slope } => slope * t,
                InputSignal::Sine {
                    amplitude,
                    frequency_hz,
                } => amplitude * (2.0 * std::f64::consts::PI * frequency_hz * t).sin(),
            }
        })
        .collect()
}

/// Runs the state recursion from rest (`x₀ = 0`).
pub fn simulate(ss: &DiscreteStateSpace, u: &[f64]) -> Vec<f64> {
    let [[a11, a12], [a21, a22]] = ss.a;
    let mut x = [0.0f64; 2];
    u.iter()
        .map(|&uk| {
            let y = ss.c[0] * x[0] + ss.c[1] * x[1] + ss.d * uk;
            x = [
                a11 * x[0] + a12 * x[1] + ss.b[0] * uk,
                a21 * x[0] + a22 * x[1] + ss.b[1] * uk,
            ];
            y
        })
        .collect()
}

/// Closed-form unit-step response of the continuous system.
pub fn analytic_step_response(c: &CanonicalParams, t: f64) -> f64 {
    let z = c.zeta;
    let root = (1.0 - z * z).sqrt();
    let envelope = (-z * c.omega_n * t).exp() / root;
    c.gain * (1.0 - envelope * (c.omega_d() * t + (root / z).atan()).sin())
}

/// Adds i.i.d. `N(0, σ²)` noise drawn from a ChaCha8 stream seeded by `seed`.
pub fn add_measurement_noise(y: &[f64], sigma: f64, seed: u64) -> Result<Vec<f64>> {
    if !(sigma.is_finite() && sigma >= 0.0) {
        return Err(Error::InvalidParameter(format!("noise sigma must be >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(y.to_vec());
    }
    let normal = Normal::new(0.0, sigma).expect("sigma validated");
    let mut rng = rng_from_seed(seed);
    Ok(y.iter().map(|&v| v + normal.sample(&mut rng)).collect())
}

/// One simulated input/output record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub u: Vec<f64>,
    pub y: Vec<f64>,
    pub fs: f64,
    pub input: InputSignal,
    pub zeta: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Trajectory {
    /// Simulates `duration_s` seconds inclusive of both endpoints (`duration·fs + 1` samples)
    /// of the unity-gain, ωₙ = 1 rad/s plant.
    pub fn simulate(
        input: InputSignal,
        zeta: f64,
        duration_s: f64,
        fs: f64,
        noise_sigma: f64,
        seed: u64,
    ) -> Result<Self> {
        input.validate()?;
        if !(fs.is_finite() && fs > 0.0 && duration_s.is_finite() && duration_s > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "duration and fs must be > 0 (got {duration_s} s at {fs} Hz)"
            )));
        }
        let params = CanonicalParams::unit(zeta)?;
        let ss = tustin_discretize(&params, 1.0 / fs)?;
        let n = (duration_s * fs).round() as usize + 1;
        let u = generate_input(&input, n, fs);
        let clean = simulate(&ss, &u);
        let y = add_measurement_noise(&clean, noise_sigma, seed)?;
        Ok(Self {
            u,
            y,
            fs,
            input,
            zeta,
            noise_sigma,
            seed,
        })
    }

    pub fn len(&self) -> usize {
        self.u.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn physical_to_canonical() {
        let c = canonical_from_physical(&PhysicalParams::new(1.0, 1.0, 1.0).unwrap()).unwrap();
        assert_relative_eq!(c.omega_n(), 1.0);
        assert_relative_eq!(c.zeta(), 0.5);
        assert_relative_eq!(c.gain(), 1.0);

        let c = canonical_from_physical(&PhysicalParams::new(1.0, 0.2, 1.0).unwrap()).unwrap();
        assert_relative_eq!(c.zeta(), 0.1, max_relative = 1e-15);

        match canonical_from_physical(&PhysicalParams::new(1.0, 4.0, 1.0).unwrap()) {
            Err(Error::OverdampedExcluded { zeta }) => assert_relative_eq!(zeta, 2.0),
            other => panic!("expected OverdampedExcluded, got {other:?}"),
        }
        // critically damped boundary
        assert!(matches!(
            canonical_from_physical(&PhysicalParams::new(1.0, 2.0, 1.0).unwrap()),
            Err(Error::OverdampedExcluded { .. })
        ));
        assert!(PhysicalParams::new(0.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn pole_examples() {
        let (p, q) = poles(&CanonicalParams::unit(0.5).unwrap());
        assert_relative_eq!(p.re, -0.5, max_relative = 1e-15);
        assert_relative_eq!(p.im, 3f64.sqrt() / 2.0, max_relative = 1e-15);
        assert_eq!(q, p.conj());

        let (p, _) = poles(&CanonicalParams::unit(0.1).unwrap());
        assert_relative_eq!(p.re, -0.1, max_relative = 1e-15);
        assert_relative_eq!(p.im, 0.99f64.sqrt(), max_relative = 1e-15);

        let (p2, _) = poles(&CanonicalParams::new(2.0, 0.5, 1.0).unwrap());
        let (p1, _) = poles(&CanonicalParams::unit(0.5).unwrap());
        assert_relative_eq!(p2.re, 2.0 * p1.re, max_relative = 1e-15);
        assert_relative_eq!(p2.im, 2.0 * p1.im, max_relative = 1e-15);
    }

    #[test]
    fn tustin_constant_m() {
        // α = 2000, M = α² + 2·α·0.1 + 1 = 4_000_000 + 400 + 1
        let ss = tustin_discretize(&CanonicalParams::unit(0.1).unwrap(), 0.001).unwrap();
        let m = 4_000_401.0;
        assert_relative_eq!(ss.d, 1.0 / m, max_relative = 1e-15);
        assert_relative_eq!(ss.a[1][1], 2.0 * (4e6 - 1.0) / m, max_relative = 1e-15);
    }

    #[test]
    fn step_response_settles_at_gain() {
        for gain in [1.0, 0.25, 3.0] {
            let c = CanonicalParams::new(1.0, 0.3, gain).unwrap();
            let ss = tustin_discretize(&c, 0.001).unwrap();
            let y = simulate(&ss, &vec![1.0; 100_001]);
            assert_relative_eq!(*y.last().unwrap(), gain, max_relative = 1e-6);
        }
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let ss = tustin_discretize(&CanonicalParams::unit(0.4).unwrap(), 0.001).unwrap();
        assert!(simulate(&ss, &[0.0; 500]).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unit_step_peak_matches_overshoot_formula() {
        let ss = tustin_discretize(&CanonicalParams::unit(0.1).unwrap(), 0.001).unwrap();
        let y = simulate(&ss, &vec![1.0; 10_001]);
        let peak = y.iter().cloned().fold(f64::MIN, f64::max);
        let expected = 1.0 + (-0.1 * std::f64::consts::PI / 0.99f64.sqrt()).exp();
        assert!((peak - expected).abs() < 0.005, "peak {peak} vs {expected}");
        assert!((expected - 1.7292).abs() < 1e-4);
    }

    #[test]
    fn input_catalog() {
        assert_eq!(generate_input(&InputSignal::Step { magnitude: 1.0 }, 3, 1000.0), vec![1.0; 3]);
        let r = generate_input(&InputSignal::Ramp { slope: 1.0 }, 1001, 1000.0);
        assert_eq!(r[1000], 1.0);
        let s = generate_input(
            &InputSignal::Sine {
                amplitude: 10.0,
                frequency_hz: 0.5,
            },
            501,
            1000.0,
        );
        assert_eq!(s[0], 0.0);
        assert_relative_eq!(s[500], 10.0, max_relative = 1e-14);
    }

    #[test]
    fn signal_parsing() {
        assert_eq!("step:1".parse::<InputSignal>().unwrap(), InputSignal::Step { magnitude: 1.0 });
        assert_eq!(
            "sine:10:0.5".parse::<InputSignal>().unwrap(),
            InputSignal::Sine {
                amplitude: 10.0,
                frequency_hz: 0.5
            }
        );
        assert!("sine:10:0".parse::<InputSignal>().is_err());
        assert!("step:0".parse::<InputSignal>().is_err());
        assert!("pulse:1".parse::<InputSignal>().is_err());
        let s = InputSignal::Step { magnitude: -10.0 };
        assert_eq!(s.to_string().parse::<InputSignal>().unwrap(), s);
        assert_eq!(s.label(), "step-10");
    }

    #[test]
    fn analytic_response_endpoints() {
        let c = CanonicalParams::unit(0.5).unwrap();
        assert!(analytic_step_response(&c, 0.0).abs() < 1e-15);
        let far = 200.0 / (c.zeta() * c.omega_n());
        assert!((analytic_step_response(&c, far) - 1.0).abs() < 1e-9);
        let tp = std::f64::consts::PI / c.omega_d();
        let peak = analytic_step_response(&c, tp);
        assert_relative_eq!(peak, 1.0 + (-0.5 * tp).exp(), max_relative = 1e-12);
        assert!((peak - 1.1630).abs() < 1e-4);
        // the closed-form peak is the maximum of a dense evaluation
        let dense = (0..20_000)
            .map(|i| analytic_step_response(&c, i as f64 * 1e-3))
            .fold(f64::MIN, f64::max);
        assert!((dense - peak).abs() < 1e-6);
    }

    #[test]
    fn noise_is_deterministic_and_optional() {
        let y: Vec<f64> = (0..100).map(|i| i as f64).collect();
        assert_eq!(add_measurement_noise(&y, 0.0, 1).unwrap(), y);
        let a = add_measurement_noise(&y, 0.01, 42).unwrap();
        let b = add_measurement_noise(&y, 0.01, 42).unwrap();
        assert!(a.iter().zip(&b).all(|(p, q)| p.to_bits() == q.to_bits()));
        assert_ne!(a, add_measurement_noise(&y, 0.01, 43).unwrap());
        assert!(add_measurement_noise(&y, -1.0, 0).is_err());
    }

    #[test]
    fn noise_mean_concentrates() {
        let sigma = 0.01;
        let zeros = vec![0.0; 1_000_000];
        let noisy = add_measurement_noise(&zeros, sigma, 42).unwrap();
        let mean = noisy.iter().sum::<f64>() / noisy.len() as f64;
        assert!(mean.abs() < 4.0 * sigma / 1e3, "mean {mean}");
        let var = noisy.iter().map(|v| v * v).sum::<f64>() / noisy.len() as f64;
        assert!((var.sqrt() - sigma).abs() < 0.01 * sigma);
    }

    #[test]
    fn trajectory_length() {
        let t = Trajectory::simulate(InputSignal::Step { magnitude: 1.0 }, 0.1, 10.0, 1000.0, 0.0, 0).unwrap();
        assert_eq!(t.len(), 10_001);
        assert!(Trajectory::simulate(InputSignal::Step { magnitude: 1.0 }, 1.5, 10.0, 1000.0, 0.0, 0).is_err());
    }

    proptest! {
        #[test]
        fn poles_conjugate_stable_with_modulus_omega_n(wn in 0.01f64..100.0, z in 0.001f64..0.999) {
            let c = CanonicalParams::new(wn, z, 1.0).unwrap();
            let (p, q) = poles(&c);
            prop_assert_eq!(q, p.conj());
            prop_assert!(p.re < 0.0);
            prop_assert!((p.norm() - wn).abs() <= 1e-12 * wn);
        }

        #[test]
        fn simulation_is_linear(
            u1 in proptest::collection::vec(-10.0f64..10.0, 1..300),
            a in -5.0f64..5.0,
            z in 0.05f64..0.95,
        ) {
            let ss = tustin_discretize(&CanonicalParams::unit(z).unwrap(), 0.001).unwrap();
            let u2: Vec<f64> = u1.iter().enumerate().map(|(i, v)| (i as f64 * 0.37).sin() - v).collect();
            let combo: Vec<f64> = u1.iter().zip(&u2).map(|(p, q)| a * p + q).collect();
            let y1 = simulate(&ss, &u1);
            let y2 = simulate(&ss, &u2);
            let yc = simulate(&ss, &combo);
            let scale = y1.iter().chain(&y2).fold(1e-300f64, |m, v| m.max(v.abs())) * (1.0 + a.abs());
            for i in 0..yc.len() {
                prop_assert!((yc[i] - (a * y1[i] + y2[i])).abs() <= 1e-12 * scale);
            }
        }
    }
}
