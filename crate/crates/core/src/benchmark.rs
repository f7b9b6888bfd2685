//! Scaled-down counterfactual anomaly-detection benchmark on synthetic
//! phantoms: a bridge model (DBSM training + implicit sampling) against
//! DDPM partial noising at several noise levels.

use rayon::prelude::*;

use crate::error::Result;
use crate::evaluation::{anomaly_map, ap_pix, max_dice_per_sample};
use crate::network::ScoreNetworkConfig;
use crate::rng::RngStream;
use crate::sampling::{dbim_sample, partial_diffusion_counterfactual, per_sample_seed, Denoiser, SamplerConfig};
use crate::schedules::NoiseSchedule;
use crate::synthdata::{generate_pairs, LesionSpec, PairedSample, PhantomSpec};
use crate::tensor::Tensor;
use crate::training::{train, Dataset, Objective, TrainConfig};

#[derive(Clone, Debug)]
pub struct ToyBenchmarkConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub phantom: PhantomSpec,
    pub lesion: LesionSpec,
    pub schedule: NoiseSchedule,
    pub net: ScoreNetworkConfig,
    /// Shared by both models; the objective is set per model.
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    /// Partial-noising levels as fractions of the horizon.
    pub t_stars: Vec<f64>,
    pub ddpm_steps: usize,
    pub smooth_radius: usize,
}

impl Default for ToyBenchmarkConfig {
    fn default() -> Self {
        Self {
            n_train: 500,
            n_test: 64,
            phantom: PhantomSpec::default(),
            lesion: LesionSpec::default(),
            schedule: NoiseSchedule::default(),
            net: ScoreNetworkConfig::conv(64, vec![8, 16, 32], 16),
            train: TrainConfig {
                learning_rate: 3e-3,
                batch_size: 8,
                total_steps: 3000,
                ..TrainConfig::default()
            },
            sampler: SamplerConfig {
                strict: true,
                ..SamplerConfig::default()
            },
            t_stars: vec![0.25, 0.5, 0.75],
            ddpm_steps: 10,
            smooth_radius: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MethodScore {
    pub name: String,
    pub mean_max_dice: f64,
    pub ap_pix: f64,
}

#[derive(Clone, Debug)]
pub struct BenchmarkOutcome {
    pub seed: u64,
    pub bridge: MethodScore,
    pub baselines: Vec<MethodScore>,
}

impl BenchmarkOutcome {
    pub fn best_baseline_dice(&self) -> f64 {
        self.baselines
            .iter()
            .map(|m| m.mean_max_dice)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn best_baseline_ap(&self) -> f64 {
        self.baselines
            .iter()
            .map(|m| m.ap_pix)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Bridge strictly ahead of every baseline level on both metrics.
    pub fn bridge_wins(&self) -> bool {
        self.bridge.mean_max_dice > self.best_baseline_dice() && self.bridge.ap_pix > self.best_baseline_ap()
    }
}

/// Distinct master seeds for the train and test cohorts of one run.
fn cohort_seeds(seed: u64) -> (u64, u64) {
    (
        seed.wrapping_mul(2).wrapping_add(1_000),
        seed.wrapping_mul(2).wrapping_add(1_001),
    )
}

pub fn score(
    name: &str,
    test: &[PairedSample],
    counterfactuals: &[Tensor],
    smooth_radius: usize,
) -> Result<MethodScore> {
    let maps: Vec<Tensor> = test
        .par_iter()
        .zip(counterfactuals)
        .map(|(s, cf)| anomaly_map(&s.pathological, cf, smooth_radius))
        .collect::<Result<_>>()?;
    let dice: Vec<f64> = maps
        .iter()
        .zip(test)
        .map(|(m, s)| max_dice_per_sample(m, &s.lesion_mask).map(|r| r.0))
        .collect::<Result<_>>()?;
    let scores: Vec<f64> = maps.iter().flat_map(|m| m.data().iter().copied()).collect();
    let labels: Vec<bool> = test
        .iter()
        .flat_map(|s| s.lesion_mask.data().iter().map(|&v| v != 0.0))
        .collect();
    Ok(MethodScore {
        name: name.to_string(),
        mean_max_dice: dice.iter().sum::<f64>() / dice.len() as f64,
        ap_pix: ap_pix(&scores, &labels)?,
    })
}

fn bridge_counterfactuals(
    model: &impl Denoiser,
    cfg: &ToyBenchmarkConfig,
    test: &[PairedSample],
    seed: u64,
) -> Result<Vec<Tensor>> {
    test.par_iter()
        .enumerate()
        .map(|(i, s)| {
            let sampler = SamplerConfig {
                seed: per_sample_seed(seed, i as u64),
                ..cfg.sampler.clone()
            };
            dbim_sample(model, &cfg.schedule, &s.pathological, &sampler)
        })
        .collect()
}

fn partial_counterfactuals(
    model: &impl Denoiser,
    cfg: &ToyBenchmarkConfig,
    test: &[PairedSample],
    t_star: f64,
    seed: u64,
) -> Result<Vec<Tensor>> {
    let base = RngStream::new(seed, 77);
    test.par_iter()
        .enumerate()
        .map(|(i, s)| {
            let mut rng = base.derive(i as u64);
            partial_diffusion_counterfactual(
                model,
                &cfg.schedule,
                &s.pathological,
                t_star * cfg.schedule.horizon,
                cfg.ddpm_steps,
                &mut rng,
            )
        })
        .collect()
}

/// Runs the full benchmark for one seed: data, both trainings, sampling and
/// scoring.
pub fn run_toy_benchmark(cfg: &ToyBenchmarkConfig, seed: u64) -> Result<BenchmarkOutcome> {
    let (train_seed, test_seed) = cohort_seeds(seed);
    let train_set = generate_pairs(train_seed, cfg.n_train, &cfg.phantom, &cfg.lesion)?;
    let test_set = generate_pairs(test_seed, cfg.n_test, &cfg.phantom, &cfg.lesion)?;

    let paired = Dataset::Paired(
        train_set
            .iter()
            .map(|s| (s.healthy.clone(), s.pathological.clone()))
            .collect(),
    );
    let healthy = Dataset::Unpaired(train_set.iter().map(|s| s.healthy.clone()).collect());

    let bridge_cfg = TrainConfig {
        objective: Objective::Dbsm,
        seed,
        ..cfg.train.clone()
    };
    let bridge = train(&bridge_cfg, &cfg.schedule, &paired, &cfg.net)?;
    let cf = bridge_counterfactuals(&bridge, cfg, &test_set, seed)?;
    let bridge_score = score("DDBM", &test_set, &cf, cfg.smooth_radius)?;

    let ddpm_cfg = TrainConfig {
        objective: Objective::Dsm,
        seed,
        ..cfg.train.clone()
    };
    let ddpm = train(&ddpm_cfg, &cfg.schedule, &healthy, &cfg.net)?;
    let baselines = cfg
        .t_stars
        .iter()
        .map(|&ts| {
            let cf = partial_counterfactuals(&ddpm, cfg, &test_set, ts, seed)?;
            score(&format!("DDPM t*={ts}T"), &test_set, &cf, cfg.smooth_radius)
        })
        .collect::<Result<_>>()?;
    Ok(BenchmarkOutcome {
        seed,
        bridge: bridge_score,
        baselines,
    })
}
