//! Saleh-Valenzuela channel synthesis for a RIS-assisted cell-free downlink.
//!
//! Base stations and the RIS carry uniform planar arrays. Each BS reaches the
//! RIS over a few discrete paths and the RIS reaches each user over a few
//! more; the direct BS–UE links are assumed blocked. The estimation target is
//! the cascaded channel `h = diag(v^H) G` with `G = [G_1, ..., G_B]`.

mod io;
mod scenario;

pub use io::{read_dataset, write_dataset, DATASET_MAGIC, DATASET_VERSION};
pub use scenario::{generate_scenario, user_channel, Layout, Scenario, ScenarioConfig, UserData};

use std::f64::consts::PI;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::linalg::{kron, ComplexMatrix, C64};
use crate::seed::Rng;
use crate::{Error, Result};

/// Uniform planar array with `n1 × n2` elements.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArrayGeometry {
    pub n1: usize,
    pub n2: usize,
    pub wavelength: f64,
    pub spacing: f64,
}

impl ArrayGeometry {
    /// Half-wavelength spaced array.
    pub fn new(n1: usize, n2: usize, wavelength: f64) -> Result<Self> {
        Self::with_spacing(n1, n2, wavelength, wavelength / 2.0)
    }

    pub fn with_spacing(n1: usize, n2: usize, wavelength: f64, spacing: f64) -> Result<Self> {
        let geom = Self {
            n1,
            n2,
            wavelength,
            spacing,
        };
        geom.validate()?;
        Ok(geom)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n1 == 0 || self.n2 == 0 {
            return Err(Error::InvalidGeometry(format!(
                "element counts must be positive, got {}x{}",
                self.n1, self.n2
            )));
        }
        if !(self.spacing > 0.0 && self.spacing.is_finite()) {
            return Err(Error::InvalidGeometry(format!(
                "spacing must be positive, got {}",
                self.spacing
            )));
        }
        if !(self.wavelength > 0.0 && self.wavelength.is_finite()) {
            return Err(Error::InvalidGeometry(format!(
                "wavelength must be positive, got {}",
                self.wavelength
            )));
        }
        Ok(())
    }

    pub fn elements(&self) -> usize {
        self.n1 * self.n2
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Angles {
    pub azimuth: f64,
    pub elevation: f64,
}

impl Angles {
    pub fn new(azimuth: f64, elevation: f64) -> Self {
        Self { azimuth, elevation }
    }
}

/// One propagation path. `ris` holds the angles seen at the RIS; `remote`
/// holds the departure angles at the BS and is ignored on RIS–UE links.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Path {
    pub gain: C64,
    pub ris: Angles,
    pub remote: Angles,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathSet {
    paths: Vec<Path>,
}

impl PathSet {
    pub fn new(paths: Vec<Path>) -> Result<Self> {
        if paths.is_empty() {
            return Err(Error::EmptyPathSet);
        }
        if paths
            .iter()
            .any(|p| !(p.gain.re.is_finite() && p.gain.im.is_finite()))
        {
            return Err(Error::InvalidArgument("path gains must be finite".into()));
        }
        Ok(Self { paths })
    }

    pub fn paths(&self) -> &[Path] {
        &self.paths
    }

    pub fn len(&self) -> usize {
        self.paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }
}

fn phase_ramp(count: usize, phase_per_element: f64) -> Vec<C64> {
    (0..count)
        .map(|n| C64::from_polar(1.0, -phase_per_element * n as f64))
        .collect()
}

/// UPA response `(1/√N) [e^{-j2πd cos(ψ) n1/λ}] ⊗ [e^{-j2πd sin(ψ) cos(θ) n2/λ}]`
/// with `θ` the azimuth and `ψ` the elevation.
pub fn steering_vector(geom: &ArrayGeometry, azimuth: f64, elevation: f64) -> Vec<C64> {
    let k = 2.0 * PI * geom.spacing / geom.wavelength;
    let ramp1 = phase_ramp(geom.n1, k * elevation.cos());
    let ramp2 = phase_ramp(geom.n2, k * elevation.sin() * azimuth.cos());
    let norm = 1.0 / (geom.elements() as f64).sqrt();
    kron(&ramp1, &ramp2).into_iter().map(|z| z * norm).collect()
}

/// BS–RIS channel `G_b` of shape `N × N_t`.
pub fn bs_ris_channel(
    bs: &ArrayGeometry,
    ris: &ArrayGeometry,
    paths: &PathSet,
) -> Result<ComplexMatrix> {
    if paths.is_empty() {
        return Err(Error::EmptyPathSet);
    }
    let n = ris.elements();
    let nt = bs.elements();
    let prefactor = ((nt * n) as f64 / paths.len() as f64).sqrt();
    let mut g = ComplexMatrix::zeros(n, nt);
    for path in paths.paths() {
        let a = steering_vector(ris, path.ris.azimuth, path.ris.elevation);
        let u = steering_vector(bs, path.remote.azimuth, path.remote.elevation);
        let scaled = path.gain * prefactor;
        for (r, ar) in a.iter().enumerate() {
            let left = scaled * ar;
            for (c, uc) in u.iter().enumerate() {
                let cur = g.get(r, c);
                g.set(r, c, cur + left * uc);
            }
        }
    }
    Ok(g)
}

/// RIS–UE channel `v^H` as a `1 × N` row.
pub fn ris_ue_channel(ris: &ArrayGeometry, paths: &PathSet) -> Result<ComplexMatrix> {
    if paths.is_empty() {
        return Err(Error::EmptyPathSet);
    }
    let n = ris.elements();
    let prefactor = (n as f64 / paths.len() as f64).sqrt();
    let mut row = vec![C64::new(0.0, 0.0); n];
    for path in paths.paths() {
        let a = steering_vector(ris, path.ris.azimuth, path.ris.elevation);
        let scaled = path.gain * prefactor;
        for (o, x) in row.iter_mut().zip(&a) {
            *o += scaled * x;
        }
    }
    Ok(ComplexMatrix::row_vector(row))
}

/// Horizontal concatenation `[G_1, ..., G_B]`.
pub fn stack_bs_channels(blocks: &[ComplexMatrix]) -> Result<ComplexMatrix> {
    let first = blocks
        .first()
        .ok_or_else(|| Error::InvalidArgument("no BS channels to stack".into()))?;
    let rows = first.rows();
    if let Some(bad) = blocks.iter().find(|b| b.rows() != rows) {
        return Err(Error::shape("stack_bs_channels", rows, bad.rows()));
    }
    let cols: usize = blocks.iter().map(|b| b.cols()).sum();
    let mut out = ComplexMatrix::zeros(rows, cols);
    let mut offset = 0;
    for b in blocks {
        for r in 0..rows {
            out.row_mut(r)[offset..offset + b.cols()].copy_from_slice(b.row(r));
        }
        offset += b.cols();
    }
    Ok(out)
}

/// `h = diag(v^H) G`: row `n` of `g_all` scaled by entry `n` of the RIS–UE row.
pub fn cascade(v_h: &ComplexMatrix, g_all: &ComplexMatrix) -> Result<ComplexMatrix> {
    if v_h.rows() != 1 || v_h.cols() != g_all.rows() {
        return Err(Error::shape(
            "cascade",
            format!("1x{}", g_all.rows()),
            format!("{}x{}", v_h.rows(), v_h.cols()),
        ));
    }
    let mut h = g_all.clone();
    for (n, scale) in v_h.as_slice().iter().enumerate() {
        for x in h.row_mut(n) {
            *x *= scale;
        }
    }
    Ok(h)
}

/// Known pilot configuration shared by transmitter and estimator.
#[derive(Debug, Clone, PartialEq)]
pub struct PilotConfig {
    /// `pilot_length × N`, unit-modulus RIS reflection coefficients per symbol.
    pub ris_phases: ComplexMatrix,
    /// Stacked beamformer `F`, length `N_t · B`.
    pub beamformer: Vec<C64>,
    pub symbol: C64,
}

impl PilotConfig {
    pub fn new(ris_phases: ComplexMatrix, beamformer: Vec<C64>, symbol: C64) -> Result<Self> {
        if ris_phases
            .as_slice()
            .iter()
            .any(|z| (z.norm() - 1.0).abs() > 1e-9)
        {
            return Err(Error::InvalidArgument(
                "RIS phases must be unit modulus".into(),
            ));
        }
        let f_norm: f64 = beamformer.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        if !(f_norm.is_finite() && f_norm > 0.0) {
            return Err(Error::InvalidArgument(
                "beamformer norm must be finite and nonzero".into(),
            ));
        }
        Ok(Self {
            ris_phases,
            beamformer,
            symbol,
        })
    }

    /// Random per-symbol phases uniform on the unit circle and a unit-norm
    /// equal-gain beamformer with random phases.
    pub fn random(
        pilot_length: usize,
        ris_elements: usize,
        stacked_antennas: usize,
        rng: &mut Rng,
    ) -> Self {
        let ris_phases = ComplexMatrix::from_fn(pilot_length, ris_elements, |_, _| {
            C64::from_polar(1.0, rng.random_range(0.0..2.0 * PI))
        });
        let amp = 1.0 / (stacked_antennas as f64).sqrt();
        let beamformer = (0..stacked_antennas)
            .map(|_| C64::from_polar(amp, rng.random_range(0.0..2.0 * PI)))
            .collect();
        Self {
            ris_phases,
            beamformer,
            symbol: C64::new(1.0, 0.0),
        }
    }

    pub fn pilot_length(&self) -> usize {
        self.ris_phases.rows()
    }

    pub fn ris_elements(&self) -> usize {
        self.ris_phases.cols()
    }

    pub fn stacked_antennas(&self) -> usize {
        self.beamformer.len()
    }

    /// Noise-free pilots `y_t = φ_t h F s`.
    pub fn noiseless(&self, h: &ComplexMatrix) -> Result<Vec<C64>> {
        if h.rows() != self.ris_elements() || h.cols() != self.stacked_antennas() {
            return Err(Error::shape(
                "PilotConfig::noiseless",
                format!("{}x{}", self.ris_elements(), self.stacked_antennas()),
                format!("{}x{}", h.rows(), h.cols()),
            ));
        }
        let hf: Vec<C64> = (0..h.rows())
            .map(|n| {
                h.row(n)
                    .iter()
                    .zip(&self.beamformer)
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect();
        Ok((0..self.pilot_length())
            .map(|t| {
                let y: C64 = self
                    .ris_phases
                    .row(t)
                    .iter()
                    .zip(&hf)
                    .map(|(p, x)| p * x)
                    .sum();
                y * self.symbol
            })
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PilotSample {
    pub received: Vec<C64>,
    pub truth: ComplexMatrix,
    pub snr_db: f64,
}

/// Circularly-symmetric complex Gaussian with total variance `variance`.
pub fn complex_gaussian(rng: &mut Rng, variance: f64) -> C64 {
    let s = (variance / 2.0).sqrt();
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    C64::new(re * s, im * s)
}

pub fn noise_variance(reference_power: f64, snr_db: f64) -> f64 {
    if snr_db == f64::INFINITY {
        0.0
    } else {
        reference_power / 10f64.powf(snr_db / 10.0)
    }
}

/// Noisy pilots `y_t = φ_t h F s + n_t`. The noise variance is
/// `reference_power / 10^(snr_db/10)`; `snr_db = +∞` disables noise.
pub fn received_pilots(
    h: &ComplexMatrix,
    cfg: &PilotConfig,
    snr_db: f64,
    reference_power: f64,
    rng: &mut Rng,
) -> Result<PilotSample> {
    let clean = cfg.noiseless(h)?;
    Ok(add_noise(clean, h.clone(), snr_db, reference_power, rng))
}

pub(crate) fn add_noise(
    mut clean: Vec<C64>,
    truth: ComplexMatrix,
    snr_db: f64,
    reference_power: f64,
    rng: &mut Rng,
) -> PilotSample {
    let var = noise_variance(reference_power, snr_db);
    if var > 0.0 {
        for y in &mut clean {
            *y += complex_gaussian(rng, var);
        }
    }
    PilotSample {
        received: clean,
        truth,
        snr_db,
    }
}

/// One user's collection of pilot observations and their true channels.
#[derive(Debug, Clone, PartialEq)]
pub struct PilotDataset {
    pub user: usize,
    pub pilot_length: usize,
    pub ris_elements: usize,
    pub stacked_antennas: usize,
    pub samples: Vec<PilotSample>,
}

impl PilotDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Mean received pilot power, used as the user's RSRP.
    pub fn mean_received_power(&self) -> f64 {
        let total: usize = self.samples.iter().map(|s| s.received.len()).sum();
        if total == 0 {
            return 0.0;
        }
        let power: f64 = self
            .samples
            .iter()
            .flat_map(|s| s.received.iter())
            .map(|y| y.norm_sqr())
            .sum();
        power / total as f64
    }

    /// Splits into `(train, test)` with `train_ratio` training samples per
    /// test sample, keeping the original order.
    pub fn split(&self, train_ratio: usize) -> (PilotDataset, PilotDataset) {
        let n_train = (self.len() * train_ratio)
            .div_ceil(train_ratio + 1)
            .min(self.len());
        let mut train = self.clone();
        let test_samples = train.samples.split_off(n_train);
        let test = PilotDataset {
            samples: test_samples,
            ..self.clone_header()
        };
        (train, test)
    }

    pub fn take(&self, n: usize) -> PilotDataset {
        PilotDataset {
            samples: self.samples.iter().take(n).cloned().collect(),
            ..self.clone_header()
        }
    }

    fn clone_header(&self) -> PilotDataset {
        PilotDataset {
            user: self.user,
            pilot_length: self.pilot_length,
            ris_elements: self.ris_elements,
            stacked_antennas: self.stacked_antennas,
            samples: Vec::new(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_for;

    fn close(a: C64, b: C64, tol: f64) -> bool {
        (a - b).norm() <= tol
    }

    fn random_angles(rng: &mut Rng) -> Angles {
        Angles::new(rng.random_range(-PI..PI), rng.random_range(0.0..PI))
    }

    fn random_paths(rng: &mut Rng, count: usize) -> PathSet {
        PathSet::new(
            (0..count)
                .map(|_| Path {
                    gain: complex_gaussian(rng, 1.0),
                    ris: random_angles(rng),
                    remote: random_angles(rng),
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn steering_zero_phase_case() {
        let geom = ArrayGeometry::new(2, 2, 1.0).unwrap();
        let a = steering_vector(&geom, PI / 2.0, PI / 2.0);
        for z in a {
            assert!(close(z, C64::new(0.5, 0.0), 1e-12));
        }
    }

    #[test]
    fn steering_unit_norm_many_angles() {
        let mut rng = rng_for(1, 99, 0);
        let geom = ArrayGeometry::new(3, 5, 0.01).unwrap();
        for _ in 0..10_000 {
            let ang = random_angles(&mut rng);
            let a = steering_vector(&geom, ang.azimuth, ang.elevation);
            let n: f64 = a.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn steering_matches_double_loop() {
        let mut rng = rng_for(2, 99, 0);
        let geom = ArrayGeometry::new(2, 3, 0.05).unwrap();
        for _ in 0..20 {
            let ang = random_angles(&mut rng);
            let a = steering_vector(&geom, ang.azimuth, ang.elevation);
            let d = geom.spacing;
            let lam = geom.wavelength;
            let mut idx = 0;
            for i1 in 0..geom.n1 {
                for i2 in 0..geom.n2 {
                    let phase = -2.0 * PI * d / lam
                        * (ang.elevation.cos() * i1 as f64
                            + ang.elevation.sin() * ang.azimuth.cos() * i2 as f64);
                    let want = C64::from_polar(1.0 / 6f64.sqrt(), phase);
                    assert!(close(a[idx], want, 1e-12));
                    idx += 1;
                }
            }
        }
    }

    #[test]
    fn rejects_bad_geometry_and_empty_paths() {
        assert!(ArrayGeometry::new(0, 2, 1.0).is_err());
        assert!(ArrayGeometry::with_spacing(2, 2, 1.0, 0.0).is_err());
        assert!(matches!(PathSet::new(vec![]), Err(Error::EmptyPathSet)));
    }

    #[test]
    fn single_path_bs_ris_norm() {
        let bs = ArrayGeometry::new(2, 2, 1.0).unwrap();
        let ris = ArrayGeometry::new(3, 3, 1.0).unwrap();
        let paths = PathSet::new(vec![Path {
            gain: C64::new(1.0, 0.0),
            ris: Angles::new(0.3, 1.1),
            remote: Angles::new(-0.7, 0.4),
        }])
        .unwrap();
        let g = bs_ris_channel(&bs, &ris, &paths).unwrap();
        assert_eq!(g.shape(), (9, 4));
        assert!((g.norm() - (4.0f64 * 9.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn bs_ris_matches_term_by_term_oracle() {
        let mut rng = rng_for(3, 99, 0);
        let bs = ArrayGeometry::new(2, 2, 1.0).unwrap();
        let ris = ArrayGeometry::new(2, 3, 1.0).unwrap();
        let paths = random_paths(&mut rng, 3);
        let g = bs_ris_channel(&bs, &ris, &paths).unwrap();
        let mut oracle = ComplexMatrix::zeros(6, 4);
        for p in paths.paths() {
            let a =
                ComplexMatrix::column_vector(steering_vector(&ris, p.ris.azimuth, p.ris.elevation));
            let u = ComplexMatrix::row_vector(steering_vector(
                &bs,
                p.remote.azimuth,
                p.remote.elevation,
            ));
            let term = a.matmul(&u).unwrap().scale(p.gain * (24.0f64 / 3.0).sqrt());
            oracle = oracle.add(&term).unwrap();
        }
        for (x, y) in g.as_slice().iter().zip(oracle.as_slice()) {
            assert!(close(*x, *y, 1e-12));
        }
        let scaled = PathSet::new(
            paths
                .paths()
                .iter()
                .map(|p| Path {
                    gain: p.gain * C64::new(0.0, 2.0),
                    ..*p
                })
                .collect(),
        )
        .unwrap();
        let g2 = bs_ris_channel(&bs, &ris, &scaled).unwrap();
        for (x, y) in g2.as_slice().iter().zip(g.as_slice()) {
            assert!(close(*x, y * C64::new(0.0, 2.0), 1e-12));
        }
    }

    #[test]
    fn ris_ue_single_cancel_and_oracle() {
        let ris = ArrayGeometry::new(4, 2, 1.0).unwrap();
        let ang = Angles::new(0.2, 0.9);
        let one = PathSet::new(vec![Path {
            gain: C64::new(1.0, 0.0),
            ris: ang,
            remote: ang,
        }])
        .unwrap();
        let v = ris_ue_channel(&ris, &one).unwrap();
        assert_eq!(v.shape(), (1, 8));
        assert!((v.norm() - 8f64.sqrt()).abs() < 1e-12);

        let pair = PathSet::new(vec![
            Path {
                gain: C64::new(0.7, 0.1),
                ris: ang,
                remote: ang,
            },
            Path {
                gain: C64::new(-0.7, -0.1),
                ris: ang,
                remote: ang,
            },
        ])
        .unwrap();
        assert!(ris_ue_channel(&ris, &pair).unwrap().norm() < 1e-12);

        let mut rng = rng_for(4, 99, 0);
        let paths = random_paths(&mut rng, 4);
        let v = ris_ue_channel(&ris, &paths).unwrap();
        for n in 0..8 {
            let mut want = C64::new(0.0, 0.0);
            for p in paths.paths() {
                want += p.gain
                    * (8.0f64 / 4.0).sqrt()
                    * steering_vector(&ris, p.ris.azimuth, p.ris.elevation)[n];
            }
            assert!(close(v.get(0, n), want, 1e-12));
        }
    }

    #[test]
    fn cascade_cases() {
        let mut rng = rng_for(5, 99, 0);
        let g = ComplexMatrix::from_fn(8, 8, |_, _| complex_gaussian(&mut rng, 1.0));
        let ones = ComplexMatrix::row_vector(vec![C64::new(1.0, 0.0); 8]);
        assert_eq!(cascade(&ones, &g).unwrap(), g);

        let mut e1 = vec![C64::new(0.0, 0.0); 8];
        e1[0] = C64::new(1.0, 0.0);
        let h = cascade(&ComplexMatrix::row_vector(e1), &g).unwrap();
        assert!(h.row(0).iter().zip(g.row(0)).all(|(a, b)| a == b));
        assert!((1..8).all(|r| h.row(r).iter().all(|z| z.norm() == 0.0)));

        let v =
            ComplexMatrix::row_vector((0..8).map(|_| complex_gaussian(&mut rng, 1.0)).collect());
        let diag = ComplexMatrix::from_fn(8, 8, |r, c| {
            if r == c {
                v.get(0, r)
            } else {
                C64::new(0.0, 0.0)
            }
        });
        let oracle = diag.matmul(&g).unwrap();
        let got = cascade(&v, &g).unwrap();
        for (x, y) in got.as_slice().iter().zip(oracle.as_slice()) {
            assert!(close(*x, *y, 1e-12));
        }

        // bilinearity
        let w =
            ComplexMatrix::row_vector((0..8).map(|_| complex_gaussian(&mut rng, 1.0)).collect());
        let c = C64::new(0.3, -1.2);
        let lhs = cascade(&v.add(&w.scale(c)).unwrap(), &g).unwrap();
        let rhs = got.add(&cascade(&w, &g).unwrap().scale(c)).unwrap();
        for (x, y) in lhs.as_slice().iter().zip(rhs.as_slice()) {
            assert!(close(*x, *y, 1e-12));
        }
        let g2 = ComplexMatrix::from_fn(8, 8, |_, _| complex_gaussian(&mut rng, 1.0));
        let lhs = cascade(&v, &g.add(&g2.scale(c)).unwrap()).unwrap();
        let rhs = got.add(&cascade(&v, &g2).unwrap().scale(c)).unwrap();
        for (x, y) in lhs.as_slice().iter().zip(rhs.as_slice()) {
            assert!(close(*x, *y, 1e-12));
        }

        assert!(cascade(&ComplexMatrix::row_vector(vec![C64::new(1.0, 0.0); 3]), &g).is_err());
    }

    fn toy_pilots(rng: &mut Rng) -> (ComplexMatrix, PilotConfig) {
        let h = ComplexMatrix::from_fn(4, 6, |_, _| complex_gaussian(rng, 1.0));
        (h, PilotConfig::random(16, 4, 6, rng))
    }

    #[test]
    fn noiseless_and_linear_pilots() {
        let mut rng = rng_for(6, 99, 0);
        let (h, cfg) = toy_pilots(&mut rng);
        let s = received_pilots(&h, &cfg, f64::INFINITY, 1.0, &mut rng).unwrap();
        assert_eq!(s.received, cfg.noiseless(&h).unwrap());
        for t in 0..cfg.pilot_length() {
            let mut want = C64::new(0.0, 0.0);
            for n in 0..4 {
                for m in 0..6 {
                    want += cfg.ris_phases.get(t, n) * h.get(n, m) * cfg.beamformer[m];
                }
            }
            assert!(close(s.received[t], want * cfg.symbol, 1e-12));
        }
        let c = C64::new(2.0, 0.5);
        let mut scaled = cfg.clone();
        scaled.beamformer.iter_mut().for_each(|f| *f *= c);
        let s2 = received_pilots(&h, &scaled, f64::INFINITY, 1.0, &mut rng).unwrap();
        for (a, b) in s2.received.iter().zip(&s.received) {
            assert!(close(*a, b * c, 1e-12));
        }
    }

    #[test]
    fn zero_channel_gives_noise_at_requested_power() {
        let mut rng = rng_for(7, 99, 0);
        let h = ComplexMatrix::zeros(4, 2);
        let cfg = PilotConfig::random(10_000, 4, 2, &mut rng);
        let reference = 3.0;
        let snr_db = 5.0;
        let s = received_pilots(&h, &cfg, snr_db, reference, &mut rng).unwrap();
        let power = s.received.iter().map(|y| y.norm_sqr()).sum::<f64>() / s.received.len() as f64;
        let expected = noise_variance(reference, snr_db);
        assert!(
            (power / expected - 1.0).abs() < 0.05,
            "power {power} vs {expected}"
        );
    }

    #[test]
    fn split_keeps_ratio() {
        let ds = PilotDataset {
            user: 0,
            pilot_length: 1,
            ris_elements: 1,
            stacked_antennas: 1,
            samples: (0..100)
                .map(|i| PilotSample {
                    received: vec![C64::new(i as f64, 0.0)],
                    truth: ComplexMatrix::zeros(1, 1),
                    snr_db: 0.0,
                })
                .collect(),
        };
        let (train, test) = ds.split(9);
        assert_eq!((train.len(), test.len()), (90, 10));
        assert_eq!(test.samples[0].received[0].re, 90.0);
    }
}
