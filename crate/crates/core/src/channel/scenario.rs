use std::f64::consts::PI;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    add_noise, bs_ris_channel, cascade, complex_gaussian, ris_ue_channel, stack_bs_channels,
    Angles, ArrayGeometry, Path, PathSet, PilotConfig, PilotDataset,
};
use crate::linalg::ComplexMatrix;
use crate::seed::{rng_for, stream, Rng};
use crate::{Error, Result};

/// Spatial arrangement of users into channel clusters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    /// Every user sits in its own cluster.
    Sparse,
    /// All users share one cluster.
    Dense,
    /// Users `0..ceil(K/2)` form cluster 0, the rest cluster 1.
    TwoCluster,
}

impl Layout {
    pub fn cluster_of(&self, user: usize, users: usize) -> usize {
        match self {
            Layout::Sparse => user,
            Layout::Dense => 0,
            Layout::TwoCluster => usize::from(user >= users.div_ceil(2)),
        }
    }

    pub fn cluster_count(&self, users: usize) -> usize {
        match self {
            Layout::Sparse => users,
            Layout::Dense => 1,
            Layout::TwoCluster => users.min(2),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub num_bs: usize,
    pub bs_array: [usize; 2],
    pub ris_array: [usize; 2],
    pub users: usize,
    pub layout: Layout,
    pub pilot_length: usize,
    pub samples_per_user: usize,
    pub server_samples: usize,
    pub bs_ris_paths: usize,
    pub ris_ue_paths: usize,
    pub snr_db: f64,
    pub wavelength: f64,
    /// Std-dev (radians) of each user's fixed angular offset from its cluster.
    pub user_angle_spread: f64,
    /// Std-dev (radians) of per-sample angular jitter around the user's paths.
    pub sample_angle_jitter: f64,
    pub area_radius: f64,
    pub cluster_radius: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            num_bs: 2,
            bs_array: [2, 2],
            ris_array: [4, 4],
            users: 6,
            layout: Layout::TwoCluster,
            pilot_length: 32,
            samples_per_user: 400,
            server_samples: 400,
            bs_ris_paths: 3,
            ris_ue_paths: 3,
            snr_db: 10.0,
            wavelength: 0.0107,
            user_angle_spread: 0.02,
            sample_angle_jitter: 0.005,
            area_radius: 200.0,
            cluster_radius: 20.0,
        }
    }
}

impl ScenarioConfig {
    /// Four BSs with 4×4 arrays, an 8×8 RIS, ten users and 4000 samples per
    /// user with 128 pilots. Slow.
    pub fn full_scale() -> Self {
        Self {
            num_bs: 4,
            bs_array: [4, 4],
            ris_array: [8, 8],
            users: 10,
            layout: Layout::Sparse,
            pilot_length: 128,
            samples_per_user: 4000,
            server_samples: 4000,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("num_bs", self.num_bs),
            ("users", self.users),
            ("pilot_length", self.pilot_length),
            ("bs_ris_paths", self.bs_ris_paths),
            ("ris_ue_paths", self.ris_ue_paths),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::InvalidGeometry(format!("{name} must be positive")));
            }
        }
        self.bs_geometry()?;
        self.ris_geometry()?;
        if self.snr_db.is_nan() {
            return Err(Error::InvalidArgument("snr_db must not be NaN".into()));
        }
        Ok(())
    }

    pub fn bs_geometry(&self) -> Result<ArrayGeometry> {
        ArrayGeometry::new(self.bs_array[0], self.bs_array[1], self.wavelength)
    }

    pub fn ris_geometry(&self) -> Result<ArrayGeometry> {
        ArrayGeometry::new(self.ris_array[0], self.ris_array[1], self.wavelength)
    }

    pub fn ris_elements(&self) -> usize {
        self.ris_array[0] * self.ris_array[1]
    }

    /// `N_t · B`.
    pub fn stacked_antennas(&self) -> usize {
        self.bs_array[0] * self.bs_array[1] * self.num_bs
    }

    /// Length of the real-valued estimator target `2 · N · N_t · B`.
    pub fn target_dim(&self) -> usize {
        2 * self.ris_elements() * self.stacked_antennas()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UserData {
    pub id: usize,
    pub cluster: usize,
    pub position: [f64; 2],
    /// Nominal RIS–UE paths; per-sample channels redraw gains and jitter angles.
    pub paths: PathSet,
    /// Mean noiseless pilot power the user's SNR is referenced to.
    pub reference_power: f64,
    pub dataset: PilotDataset,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub config: ScenarioConfig,
    pub seed: u64,
    pub ris_geometry: ArrayGeometry,
    /// Stacked BS–RIS channel `G`, `N × (N_t · B)`.
    pub bs_ris: ComplexMatrix,
    pub pilots: PilotConfig,
    pub users: Vec<UserData>,
    pub server: PilotDataset,
}

impl Scenario {
    pub fn datasets(&self) -> Vec<&PilotDataset> {
        self.users.iter().map(|u| &u.dataset).collect()
    }

    pub fn positions(&self) -> Vec<[f64; 2]> {
        self.users.iter().map(|u| u.position).collect()
    }
}

fn uniform_angles(rng: &mut Rng) -> Angles {
    Angles::new(rng.random_range(-PI..PI), rng.random_range(0.0..PI))
}

fn gaussian(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn jitter(angles: Angles, sigma: f64, rng: &mut Rng) -> Angles {
    if sigma == 0.0 {
        return angles;
    }
    Angles::new(
        angles.azimuth + sigma * gaussian(rng),
        angles.elevation + sigma * gaussian(rng),
    )
}

/// Truth channel for a concrete RIS–UE path set.
pub fn user_channel(
    bs_ris: &ComplexMatrix,
    ris: &ArrayGeometry,
    paths: &PathSet,
) -> Result<ComplexMatrix> {
    cascade(&ris_ue_channel(ris, paths)?, bs_ris)
}

/// Draws one small-scale realisation: fresh gains, jittered angles.
fn realize_paths(nominal: &PathSet, angle_jitter: f64, rng: &mut Rng) -> Result<PathSet> {
    PathSet::new(
        nominal
            .paths()
            .iter()
            .map(|p| Path {
                gain: complex_gaussian(rng, 1.0),
                ris: jitter(p.ris, angle_jitter, rng),
                remote: p.remote,
            })
            .collect(),
    )
}

struct Infrastructure {
    bs_ris: ComplexMatrix,
    pilots: PilotConfig,
    cluster_paths: Vec<Vec<Angles>>,
    cluster_centers: Vec<[f64; 2]>,
}

fn build_infrastructure(cfg: &ScenarioConfig, seed: u64) -> Result<Infrastructure> {
    let bs = cfg.bs_geometry()?;
    let ris = cfg.ris_geometry()?;
    let mut rng = rng_for(seed, stream::INFRASTRUCTURE, 0);
    let mut blocks = Vec::with_capacity(cfg.num_bs);
    for _ in 0..cfg.num_bs {
        let paths = PathSet::new(
            (0..cfg.bs_ris_paths)
                .map(|_| Path {
                    gain: complex_gaussian(&mut rng, 1.0),
                    ris: uniform_angles(&mut rng),
                    remote: uniform_angles(&mut rng),
                })
                .collect(),
        )?;
        blocks.push(bs_ris_channel(&bs, &ris, &paths)?);
    }
    let bs_ris = stack_bs_channels(&blocks)?;

    let clusters = cfg.layout.cluster_count(cfg.users);
    let cluster_paths = (0..clusters)
        .map(|_| {
            (0..cfg.ris_ue_paths)
                .map(|_| uniform_angles(&mut rng))
                .collect()
        })
        .collect();
    let cluster_centers = (0..clusters)
        .map(|c| {
            let theta = 2.0 * PI * c as f64 / clusters as f64;
            [cfg.area_radius * theta.cos(), cfg.area_radius * theta.sin()]
        })
        .collect();

    let mut pilot_rng = rng_for(seed, stream::PILOTS, 0);
    let pilots = PilotConfig::random(
        cfg.pilot_length,
        ris.elements(),
        cfg.stacked_antennas(),
        &mut pilot_rng,
    );
    Ok(Infrastructure {
        bs_ris,
        pilots,
        cluster_paths,
        cluster_centers,
    })
}

fn user_layout(
    cfg: &ScenarioConfig,
    infra: &Infrastructure,
    seed: u64,
    user: usize,
) -> Result<(usize, [f64; 2], PathSet)> {
    let cluster = cfg.layout.cluster_of(user, cfg.users);
    let mut rng = rng_for(seed, stream::USER_LAYOUT, user as u64);
    let r = cfg.cluster_radius * rng.random::<f64>().sqrt();
    let phi = rng.random_range(0.0..2.0 * PI);
    let center = infra.cluster_centers[cluster];
    let position = [center[0] + r * phi.cos(), center[1] + r * phi.sin()];
    let paths = PathSet::new(
        infra.cluster_paths[cluster]
            .iter()
            .map(|&a| {
                let ris = jitter(a, cfg.user_angle_spread, &mut rng);
                Path {
                    gain: complex_gaussian(&mut rng, 1.0),
                    ris,
                    remote: ris,
                }
            })
            .collect(),
    )?;
    Ok((cluster, position, paths))
}

/// Generates `count` samples for one path set; noise is referenced to the
/// mean noiseless pilot power of the generated batch.
fn synthesize(
    cfg: &ScenarioConfig,
    infra: &Infrastructure,
    ris: &ArrayGeometry,
    paths: &[&PathSet],
    count: usize,
    user: usize,
    rng: &mut Rng,
) -> Result<(PilotDataset, f64)> {
    let mut clean = Vec::with_capacity(count);
    for i in 0..count {
        let realized = realize_paths(paths[i % paths.len()], cfg.sample_angle_jitter, rng)?;
        let h = user_channel(&infra.bs_ris, ris, &realized)?;
        let y = infra.pilots.noiseless(&h)?;
        clean.push((y, h));
    }
    let symbols = (count * cfg.pilot_length).max(1);
    let reference = clean
        .iter()
        .flat_map(|(y, _)| y.iter())
        .map(|z| z.norm_sqr())
        .sum::<f64>()
        / symbols as f64;
    let samples = clean
        .into_iter()
        .map(|(y, h)| add_noise(y, h, cfg.snr_db, reference, rng))
        .collect();
    Ok((
        PilotDataset {
            user,
            pilot_length: cfg.pilot_length,
            ris_elements: cfg.ris_elements(),
            stacked_antennas: cfg.stacked_antennas(),
            samples,
        },
        reference,
    ))
}

/// Builds the full scenario. Pure in `(cfg, seed)`; users are generated in
/// parallel from independent streams.
pub fn generate_scenario(cfg: &ScenarioConfig, seed: u64) -> Result<Scenario> {
    cfg.validate()?;
    let ris = cfg.ris_geometry()?;
    let infra = build_infrastructure(cfg, seed)?;

    let users = (0..cfg.users)
        .into_par_iter()
        .map(|k| -> Result<UserData> {
            let (cluster, position, paths) = user_layout(cfg, &infra, seed, k)?;
            let mut rng = rng_for(seed, stream::USER_DATA, k as u64);
            let (dataset, reference_power) = synthesize(
                cfg,
                &infra,
                &ris,
                &[&paths],
                cfg.samples_per_user,
                k,
                &mut rng,
            )?;
            Ok(UserData {
                id: k,
                cluster,
                position,
                paths,
                reference_power,
                dataset,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let all_paths: Vec<&PathSet> = users.iter().map(|u| &u.paths).collect();
    let mut rng = rng_for(seed, stream::SERVER_DATA, 0);
    let (server, _) = synthesize(
        cfg,
        &infra,
        &ris,
        &all_paths,
        cfg.server_samples,
        cfg.users,
        &mut rng,
    )?;

    Ok(Scenario {
        config: cfg.clone(),
        seed,
        ris_geometry: ris,
        bs_ris: infra.bs_ris,
        pilots: infra.pilots,
        users,
        server,
    })
}
