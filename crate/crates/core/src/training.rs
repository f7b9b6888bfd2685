//! Bridge score matching and denoising score matching training.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;

use crate::autodiff::{Tape, Var};
use crate::checkpoint::Checkpoint;
use crate::error::{contract, Error, Result};
use crate::network::{backward, forward_on_tape, LossGraph, NamedTensors, ParameterSet, ScoreNetworkConfig};
use crate::rng::RngStream;
use crate::schedules::NoiseSchedule;
use crate::tensor::Tensor;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

/// RNG stream ids, so that initialization and per-step draws never overlap.
const STREAM_INIT: u64 = 1;
const STREAM_STEPS: u64 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    /// Bridge score matching on `(x_0, x_T)` pairs.
    Dbsm,
    /// Plain denoising score matching on `x_0` alone.
    Dsm,
}

impl Objective {
    pub fn as_str(self) -> &'static str {
        match self {
            Objective::Dbsm => "dbsm",
            Objective::Dsm => "dsm",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "dbsm" => Ok(Objective::Dbsm),
            "dsm" => Ok(Objective::Dsm),
            _ => Err(Error::Config(format!("unknown objective `{s}` (dbsm|dsm)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Weighting {
    /// Mean squared error of the data prediction.
    UnitX0Mse,
    /// Mean squared error of the implied score.
    UnitScore,
}

impl Weighting {
    pub fn as_str(self) -> &'static str {
        match self {
            Weighting::UnitX0Mse => "unit_x0_mse",
            Weighting::UnitScore => "unit_score",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "unit_x0_mse" => Ok(Weighting::UnitX0Mse),
            "unit_score" => Ok(Weighting::UnitScore),
            _ => Err(Error::Config(format!(
                "unknown weighting `{s}` (unit_x0_mse|unit_score)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Adam,
    RAdam,
}

impl OptimizerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            OptimizerKind::Adam => "adam",
            OptimizerKind::RAdam => "radam",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "adam" => Ok(OptimizerKind::Adam),
            "radam" => Ok(OptimizerKind::RAdam),
            _ => Err(Error::Config(format!("unknown optimizer `{s}` (adam|radam)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub objective: Objective,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub total_steps: u64,
    pub weighting: Weighting,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    /// 0 disables periodic checkpoints.
    pub checkpoint_every: u64,
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            objective: Objective::Dbsm,
            learning_rate: 1e-4,
            batch_size: 16,
            total_steps: 1000,
            weighting: Weighting::UnitX0Mse,
            seed: 0,
            optimizer: OptimizerKind::RAdam,
            checkpoint_every: 0,
            log_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.total_steps == 0 {
            return Err(Error::Config("total_steps must be at least 1".into()));
        }
        if self.log_every == 0 {
            return Err(Error::Config("log_every must be at least 1".into()));
        }
        Ok(())
    }
}

/// Training inputs: `(x_0, x_T)` pairs for bridge matching, or bare `x_0`.
#[derive(Clone, Debug)]
pub enum Dataset {
    Paired(Vec<(Tensor, Tensor)>),
    Unpaired(Vec<Tensor>),
}

impl Dataset {
    pub fn len(&self) -> usize {
        match self {
            Dataset::Paired(v) => v.len(),
            Dataset::Unpaired(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn x0(&self, i: usize) -> &Tensor {
        match self {
            Dataset::Paired(v) => &v[i].0,
            Dataset::Unpaired(v) => &v[i],
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainState {
    pub params: ParameterSet,
    pub first_moment: NamedTensors,
    pub second_moment: NamedTensors,
    /// Number of optimizer steps applied so far.
    pub step: u64,
    /// Exponential moving average of the batch loss (0.99 decay).
    pub loss_ema: f64,
    pub last_loss: f64,
}

impl TrainState {
    pub fn new(params: ParameterSet) -> Self {
        let zeros = NamedTensors::zeros_like(&params);
        Self {
            first_moment: zeros.clone(),
            second_moment: zeros,
            params,
            step: 0,
            loss_ema: 0.0,
            last_loss: f64::NAN,
        }
    }

    /// Fresh parameters drawn from the `seed`'s initialization stream.
    pub fn init(net: &ScoreNetworkConfig, seed: u64) -> Result<Self> {
        let mut rng = RngStream::new(seed, STREAM_INIT);
        Ok(Self::new(ParameterSet::init(net, &mut rng)?))
    }

    fn record_loss(&mut self, loss: f64) {
        self.loss_ema = if self.step <= 1 {
            loss
        } else {
            0.99 * self.loss_ema + 0.01 * loss
        };
        self.last_loss = loss;
    }
}

/// One noised training example: the network sees `(x_t, x_end, t)` and the
/// implied score is `−(x_t − offset − k·x̂_0)/v`.
#[derive(Clone, Debug)]
struct Draw {
    x0: Tensor,
    x_end: Tensor,
    x_t: Tensor,
    t: f64,
    offset: Tensor,
    k: f64,
    v: f64,
}

fn draw_time(rng: &mut RngStream, schedule: &NoiseSchedule) -> f64 {
    schedule.t_clamp_lo + (schedule.t_clamp_hi - schedule.t_clamp_lo) * rng.uniform()
}

fn dbsm_draws(schedule: &NoiseSchedule, batch: &[(&Tensor, &Tensor)], rng: &mut RngStream) -> Result<Vec<Draw>> {
    contract!(!batch.is_empty(), "empty training batch");
    batch
        .iter()
        .map(|&(x0, x_end)| {
            x0.ensure_same_shape(x_end, "bridge training pair")?;
            let t = draw_time(rng, schedule);
            let coef = schedule.bridge_coefficients(t)?;
            let mut x_t = x_end.lincomb(coef.a, x0, coef.b);
            for v in x_t.data_mut() {
                *v += coef.c * rng.normal();
            }
            Ok(Draw {
                x0: x0.clone(),
                x_end: x_end.clone(),
                x_t,
                t,
                offset: x_end.scale(coef.a),
                k: coef.b,
                v: coef.c_sq(),
            })
        })
        .collect()
}

fn dsm_draws(schedule: &NoiseSchedule, batch: &[&Tensor], rng: &mut RngStream) -> Result<Vec<Draw>> {
    contract!(!batch.is_empty(), "empty training batch");
    batch
        .iter()
        .map(|&x0| {
            let t = draw_time(rng, schedule);
            let (alpha, sigma) = schedule.alpha_sigma(t)?;
            let mut x_t = x0.scale(alpha);
            for v in x_t.data_mut() {
                *v += sigma * rng.normal();
            }
            let zeros = Tensor::zeros(x0.shape());
            Ok(Draw {
                x0: x0.clone(),
                x_end: zeros.clone(),
                x_t,
                t,
                offset: zeros,
                k: alpha,
                v: sigma * sigma,
            })
        })
        .collect()
}

/// Records every draw's share of the batch-mean loss. `predict` records the
/// data prediction for draw `i` on the given tape.
fn record_graph<F>(draws: &[Draw], weighting: Weighting, predict: F) -> Result<LossGraph>
where
    F: Fn(&mut Tape, usize, &Draw) -> Result<Var> + Sync,
{
    let parts = draws
        .par_iter()
        .enumerate()
        .map(|(i, d)| {
            let mut tape = Tape::new();
            let pred = predict(&mut tape, i, d)?;
            let norm = 1.0 / (draws.len() * d.x0.numel()) as f64;
            let diff = match weighting {
                Weighting::UnitX0Mse => {
                    let x0 = tape.constant(d.x0.clone());
                    tape.sub(pred, x0)
                }
                Weighting::UnitScore => {
                    let kv = d.k / d.v;
                    let base = tape.constant(d.x_t.zip_map(&d.offset, |x, o| -(x - o) / d.v));
                    let kx = tape.scale(pred, kv);
                    let score = tape.add(base, kx);
                    let target = d.x_t.zip_map(&d.offset, |x, o| -(x - o) / d.v);
                    let target = tape.constant(target.zip_map(&d.x0, |b, x0| b + x0 * kv));
                    tape.sub(score, target)
                }
            };
            let sq = tape.sum_squares(diff);
            let loss = tape.scale(sq, norm);
            Ok((tape, loss))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LossGraph::from_parts(parts))
}

fn network_graph(
    params: &ParameterSet,
    net: &ScoreNetworkConfig,
    schedule: &NoiseSchedule,
    draws: &[Draw],
    weighting: Weighting,
) -> Result<LossGraph> {
    let shape = net.data_shape();
    let draws: Vec<Draw> = draws
        .iter()
        .map(|d| {
            let mut d = d.clone();
            d.x0 = d.x0.reshape(shape.clone())?;
            d.x_end = d.x_end.reshape(shape.clone())?;
            d.x_t = d.x_t.reshape(shape.clone())?;
            d.offset = d.offset.reshape(shape.clone())?;
            Ok(d)
        })
        .collect::<Result<_>>()?;
    let horizon = schedule.horizon;
    record_graph(&draws, weighting, |tape, _, d| {
        forward_on_tape(tape, params, net, &d.x_t, &d.x_end, d.t / horizon)
    })
}

/// Bridge score matching loss over `(x_0, x_T)` pairs: each pair gets its own
/// time `t` and bridge-kernel draw `x_t`.
pub fn dbsm_loss(
    params: &ParameterSet,
    net: &ScoreNetworkConfig,
    cfg: &TrainConfig,
    schedule: &NoiseSchedule,
    batch: &[(Tensor, Tensor)],
    rng: &mut RngStream,
) -> Result<LossGraph> {
    let refs: Vec<(&Tensor, &Tensor)> = batch.iter().map(|(a, b)| (a, b)).collect();
    let draws = dbsm_draws(schedule, &refs, rng)?;
    network_graph(params, net, schedule, &draws, cfg.weighting)
}

/// Denoising score matching loss with the marginal kernel
/// `x_t ~ N(α_t x_0, σ_t² I)`; the endpoint input is all zeros.
pub fn dsm_loss(
    params: &ParameterSet,
    net: &ScoreNetworkConfig,
    cfg: &TrainConfig,
    schedule: &NoiseSchedule,
    batch: &[Tensor],
    rng: &mut RngStream,
) -> Result<LossGraph> {
    let refs: Vec<&Tensor> = batch.iter().collect();
    let draws = dsm_draws(schedule, &refs, rng)?;
    network_graph(params, net, schedule, &draws, cfg.weighting)
}

/// Applies one Adam or RAdam update. Non-finite gradients reject the step
/// and leave the state untouched.
pub fn optimizer_step(state: &mut TrainState, grads: &NamedTensors, cfg: &TrainConfig) -> Result<()> {
    contract!(
        grads.is_congruent(&state.params),
        "gradient is not congruent with the parameter set"
    );
    let step = state.step + 1;
    for (name, g) in grads.iter() {
        if !g.is_finite() {
            return Err(Error::NonFiniteGradient {
                step,
                param: name.to_string(),
            });
        }
    }
    let t = step as f64;
    let bc1 = 1.0 - BETA1.powf(t);
    let bc2 = 1.0 - BETA2.powf(t);
    let lr = cfg.learning_rate;
    // RAdam: length of the approximated SMA and the variance rectification.
    let rho_inf = 2.0 / (1.0 - BETA2) - 1.0;
    let rho_t = rho_inf - 2.0 * t * BETA2.powf(t) / bc2;
    let rect = match cfg.optimizer {
        OptimizerKind::Adam => None,
        OptimizerKind::RAdam if rho_t > 5.0 => {
            Some(((rho_t - 4.0) * (rho_t - 2.0) * rho_inf / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t)).sqrt())
        }
        OptimizerKind::RAdam => Some(0.0),
    };
    let moments = state
        .params
        .iter_mut()
        .zip(state.first_moment.iter_mut())
        .zip(state.second_moment.iter_mut())
        .zip(grads.iter());
    for ((((_, p), (_, m)), (_, v)), (_, g)) in moments {
        let (p, m, v, g) = (p.data_mut(), m.data_mut(), v.data_mut(), g.data());
        for i in 0..p.len() {
            m[i] = BETA1 * m[i] + (1.0 - BETA1) * g[i];
            v[i] = BETA2 * v[i] + (1.0 - BETA2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            p[i] -= match rect {
                None => lr * m_hat / ((v[i] / bc2).sqrt() + EPS),
                // Rectification undefined: momentum-only update.
                Some(0.0) => lr * m_hat,
                Some(r) => lr * m_hat * r * bc2.sqrt() / (v[i].sqrt() + EPS),
            };
        }
    }
    state.step = step;
    Ok(())
}

/// Gathers a batch with replacement and returns its loss graph.
fn step_graph(
    state: &TrainState,
    cfg: &TrainConfig,
    schedule: &NoiseSchedule,
    dataset: &Dataset,
    net: &ScoreNetworkConfig,
    rng: &mut RngStream,
) -> Result<LossGraph> {
    let idx: Vec<usize> = (0..cfg.batch_size)
        .map(|_| rng.below(dataset.len() as u64) as usize)
        .collect();
    match (cfg.objective, dataset) {
        (Objective::Dbsm, Dataset::Paired(pairs)) => {
            let refs: Vec<(&Tensor, &Tensor)> = idx.iter().map(|&i| (&pairs[i].0, &pairs[i].1)).collect();
            let draws = dbsm_draws(schedule, &refs, rng)?;
            network_graph(&state.params, net, schedule, &draws, cfg.weighting)
        }
        (Objective::Dbsm, Dataset::Unpaired(_)) => Err(Error::Config(
            "bridge matching (dbsm) needs paired (x_0, x_T) samples; got unpaired data".into(),
        )),
        (Objective::Dsm, _) => {
            let refs: Vec<&Tensor> = idx.iter().map(|&i| dataset.x0(i)).collect();
            let draws = dsm_draws(schedule, &refs, rng)?;
            network_graph(&state.params, net, schedule, &draws, cfg.weighting)
        }
    }
}

/// Where `train_with` writes periodic checkpoints and the loss log.
#[derive(Clone, Debug, Default)]
pub struct TrainOutput {
    pub dir: Option<PathBuf>,
}

impl TrainOutput {
    pub fn to_dir(dir: impl Into<PathBuf>) -> Self {
        Self { dir: Some(dir.into()) }
    }

    pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
        dir.join(format!("ckpt_{step:08}.bten"))
    }
}

/// Trains from freshly initialized parameters without touching the disk.
pub fn train(
    cfg: &TrainConfig,
    schedule: &NoiseSchedule,
    dataset: &Dataset,
    net: &ScoreNetworkConfig,
) -> Result<Checkpoint> {
    train_with(cfg, schedule, dataset, net, None, &TrainOutput::default())
}

/// Full training loop. Step `k` draws from a stream derived from `(seed, k)`
/// so a resumed run reproduces an uninterrupted one bitwise.
pub fn train_with(
    cfg: &TrainConfig,
    schedule: &NoiseSchedule,
    dataset: &Dataset,
    net: &ScoreNetworkConfig,
    resume: Option<TrainState>,
    output: &TrainOutput,
) -> Result<Checkpoint> {
    cfg.validate()?;
    schedule.validate()?;
    net.validate()?;
    contract!(!dataset.is_empty(), "training dataset is empty");
    if cfg.objective == Objective::Dbsm && matches!(dataset, Dataset::Unpaired(_)) {
        return Err(Error::Config(
            "bridge matching (dbsm) needs paired (x_0, x_T) samples; got unpaired data".into(),
        ));
    }
    let numel: usize = net.data_shape().iter().product();
    let first = dataset.x0(0);
    contract!(
        first.numel() == numel,
        "samples have {} values, network expects {numel}",
        first.numel()
    );

    let mut state = match resume {
        Some(s) => {
            s.params.check_layout(net)?;
            contract!(
                s.first_moment.is_congruent(&s.params) && s.second_moment.is_congruent(&s.params),
                "optimizer moments are not congruent with parameters"
            );
            s
        }
        None => TrainState::init(net, cfg.seed)?,
    };
    let base = RngStream::new(cfg.seed, STREAM_STEPS);
    let started = Instant::now();
    let mut log = match &output.dir {
        Some(dir) => Some(open_log(dir, state.step == 0)?),
        None => None,
    };
    let mut window = 0.0;
    let mut window_len = 0u64;

    while state.step < cfg.total_steps {
        let mut rng = base.derive(state.step);
        let graph = step_graph(&state, cfg, schedule, dataset, net, &mut rng)?;
        let loss = graph.value();
        let grads = backward(&state.params, net, &graph)?;
        optimizer_step(&mut state, &grads, cfg)?;
        state.record_loss(loss);
        window += loss;
        window_len += 1;

        if let (Some((path, file)), true) = (&mut log, state.step % cfg.log_every == 0) {
            let wall_ms = started.elapsed().as_millis();
            writeln!(file, "{},{},{}", state.step, window / window_len as f64, wall_ms)
                .map_err(|e| Error::io(path.as_path(), e))?;
            window = 0.0;
            window_len = 0;
        }
        if let Some(dir) = &output.dir {
            if cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every == 0 {
                let ckpt = Checkpoint::new(schedule.clone(), net.clone(), cfg.clone(), state.clone());
                ckpt.save(TrainOutput::checkpoint_path(dir, state.step))?;
            }
        }
    }
    let ckpt = Checkpoint::new(schedule.clone(), net.clone(), cfg.clone(), state);
    if let Some(dir) = &output.dir {
        ckpt.save(dir.join("final.bten"))?;
    }
    Ok(ckpt)
}

fn open_log(dir: &Path, fresh: bool) -> Result<(PathBuf, std::fs::File)> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join("loss.csv");
    let exists = path.exists();
    let mut file = std::fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(!fresh)
        .truncate(fresh)
        .open(&path)
        .map_err(|e| Error::io(&path, e))?;
    if fresh || !exists {
        writeln!(file, "step,loss,wall_ms").map_err(|e| Error::io(&path, e))?;
    }
    Ok((path, file))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy::{two_moons, GaussianToy};

    fn toy_draws(weighting_seed: u64) -> Vec<Draw> {
        let s = NoiseSchedule::default();
        let toy = GaussianToy::new(3, 1.0, 0.25).unwrap();
        let mut rng = RngStream::new(weighting_seed, 0);
        let pairs = toy.pairs(6, &mut rng);
        let refs: Vec<(&Tensor, &Tensor)> = pairs.iter().map(|(a, b)| (a, b)).collect();
        dbsm_draws(&s, &refs, &mut rng).unwrap()
    }

    #[test]
    fn oracle_stub_has_zero_loss() {
        let draws = toy_draws(0);
        for w in [Weighting::UnitX0Mse, Weighting::UnitScore] {
            let g = record_graph(&draws, w, |tape, i, _| Ok(tape.constant(draws[i].x0.clone()))).unwrap();
            assert_eq!(g.value(), 0.0);
        }
        let s = NoiseSchedule::default();
        let mut rng = RngStream::new(0, 0);
        let x0 = [Tensor::from_vec(vec![0.5, -0.2])];
        let refs: Vec<&Tensor> = x0.iter().collect();
        let draws = dsm_draws(&s, &refs, &mut rng).unwrap();
        let g = record_graph(&draws, Weighting::UnitScore, |tape, _, _| {
            Ok(tape.constant(x0[0].clone()))
        })
        .unwrap();
        assert_eq!(g.value(), 0.0);
    }

    #[test]
    fn unit_score_is_reweighted_x0_mse() {
        let draws = toy_draws(1);
        let delta = 0.37;
        let predict = |tape: &mut Tape, i: usize, _: &Draw| Ok(tape.constant(draws[i].x0.map(|v| v + delta)));
        let mse = record_graph(&draws, Weighting::UnitX0Mse, predict).unwrap();
        let score = record_graph(&draws, Weighting::UnitScore, predict).unwrap();
        let s = NoiseSchedule::default();
        for (i, d) in draws.iter().enumerate() {
            let coef = s.bridge_coefficients(d.t).unwrap();
            let w = coef.b * coef.b / (coef.c_sq() * coef.c_sq());
            let (a, b) = (&mse.parts[i], &score.parts[i]);
            let lhs = b.0.value(b.1).data()[0];
            let rhs = w * a.0.value(a.1).data()[0];
            assert!((lhs - rhs).abs() <= 1e-8 * rhs.abs(), "{lhs} vs {rhs}");
            // Per-element loss (b²/c⁴)·δ², here averaged over 6 pairs × 3 dims.
            assert!((lhs - w * delta * delta / 6.0).abs() <= 1e-8 * lhs);
        }
    }

    #[test]
    fn empty_batch_rejected() {
        let s = NoiseSchedule::default();
        let net = ScoreNetworkConfig::mlp(2, vec![4], 4);
        let params = TrainState::init(&net, 0).unwrap().params;
        let mut rng = RngStream::new(0, 0);
        let cfg = TrainConfig::default();
        assert!(matches!(
            dbsm_loss(&params, &net, &cfg, &s, &[], &mut rng),
            Err(Error::Contract(_))
        ));
        assert!(matches!(
            dsm_loss(&params, &net, &cfg, &s, &[], &mut rng),
            Err(Error::Contract(_))
        ));
    }

    fn quadratic_run(kind: OptimizerKind) -> f64 {
        let mut state = TrainState::new(NamedTensors::new(vec![(
            "w".into(),
            Tensor::from_vec(vec![1.0, -2.0, 0.5]),
        )]));
        let cfg = TrainConfig {
            learning_rate: 0.1,
            optimizer: kind,
            ..TrainConfig::default()
        };
        for _ in 0..200 {
            let w = state.params.get("w").unwrap();
            let g = NamedTensors::new(vec![("w".into(), w.scale(2.0))]);
            optimizer_step(&mut state, &g, &cfg).unwrap();
        }
        state.params.get("w").unwrap().sq_norm().sqrt()
    }

    #[test]
    fn quadratic_bowl_converges() {
        let r = quadratic_run(OptimizerKind::RAdam);
        assert!(r < 1e-3, "radam |w| = {r}");
    }

    #[test]
    fn zero_gradient_only_decays_moments() {
        let params = NamedTensors::new(vec![("w".into(), Tensor::from_vec(vec![1.0, 2.0]))]);
        let mut state = TrainState::new(params.clone());
        state.first_moment = NamedTensors::new(vec![("w".into(), Tensor::from_vec(vec![0.0, 0.0]))]);
        let zero = NamedTensors::zeros_like(&params);
        for kind in [OptimizerKind::Adam, OptimizerKind::RAdam] {
            let cfg = TrainConfig {
                optimizer: kind,
                ..TrainConfig::default()
            };
            let mut s = state.clone();
            optimizer_step(&mut s, &zero, &cfg).unwrap();
            assert!(s.params.get("w").unwrap().bitwise_eq(params.get("w").unwrap()));
            assert_eq!(s.step, 1);
        }
        let mut s = state.clone();
        s.first_moment = NamedTensors::new(vec![("w".into(), Tensor::from_vec(vec![1.0, 1.0]))]);
        optimizer_step(&mut s, &zero, &TrainConfig::default()).unwrap();
        assert_eq!(s.first_moment.get("w").unwrap().data(), &[0.9, 0.9]);
    }

    #[test]
    fn radam_first_step_is_momentum_only() {
        let params = NamedTensors::new(vec![("w".into(), Tensor::from_vec(vec![1.0]))]);
        let mut state = TrainState::new(params);
        let g = NamedTensors::new(vec![("w".into(), Tensor::from_vec(vec![4.0]))]);
        let cfg = TrainConfig {
            learning_rate: 0.01,
            ..TrainConfig::default()
        };
        optimizer_step(&mut state, &g, &cfg).unwrap();
        // m̂_1 = g, so w ← 1 − lr·4 without any second-moment scaling.
        assert_eq!(state.params.get("w").unwrap().data()[0], 1.0 - 0.01 * 4.0);
    }

    #[test]
    fn non_finite_gradient_rejected_with_step() {
        let params = NamedTensors::new(vec![("w".into(), Tensor::from_vec(vec![1.0]))]);
        let mut state = TrainState::new(params);
        state.step = 41;
        let g = NamedTensors::new(vec![("w".into(), Tensor::from_vec(vec![f64::NAN]))]);
        let err = optimizer_step(&mut state, &g, &TrainConfig::default()).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient { step: 42, ref param } if param == "w"));
        assert_eq!(state.step, 41);
        assert_eq!(state.params.get("w").unwrap().data()[0], 1.0);
    }

    fn loss_ratio(cfg: &TrainConfig, dataset: &Dataset, net: &ScoreNetworkConfig) -> f64 {
        let s = NoiseSchedule::default();
        let eval = |state: &TrainState| -> f64 {
            // Fixed evaluation batches so the two losses are comparable.
            let mut total = 0.0;
            for k in 0..8 {
                let mut rng = RngStream::new(999, k);
                total += step_graph(state, cfg, &s, dataset, net, &mut rng).unwrap().value();
            }
            total
        };
        let before = eval(&TrainState::init(net, cfg.seed).unwrap());
        let ckpt = train(cfg, &s, dataset, net).unwrap();
        eval(&ckpt.state) / before
    }

    #[test]
    fn dbsm_smoke_halves_loss() {
        let toy = GaussianToy::new(2, 1.0, 0.25).unwrap();
        let mut rng = RngStream::new(3, 0);
        let dataset = Dataset::Paired(toy.pairs(2000, &mut rng));
        let net = ScoreNetworkConfig::mlp(2, vec![32, 32], 8);
        let cfg = TrainConfig {
            learning_rate: 1e-3,
            batch_size: 32,
            total_steps: 500,
            ..TrainConfig::default()
        };
        let ratio = loss_ratio(&cfg, &dataset, &net);
        assert!(ratio < 0.5, "loss ratio {ratio}");
    }

    #[test]
    fn dsm_smoke_halves_loss_on_moons() {
        let mut rng = RngStream::new(4, 0);
        let dataset = Dataset::Unpaired(two_moons(2000, 0.05, &mut rng));
        let net = ScoreNetworkConfig::mlp(2, vec![32, 32], 8);
        let cfg = TrainConfig {
            objective: Objective::Dsm,
            learning_rate: 1e-3,
            batch_size: 32,
            total_steps: 500,
            ..TrainConfig::default()
        };
        let ratio = loss_ratio(&cfg, &dataset, &net);
        assert!(ratio < 0.5, "loss ratio {ratio}");
    }

    #[test]
    fn training_is_deterministic_and_resumable() {
        let toy = GaussianToy::new(2, 1.0, 0.25).unwrap();
        let mut rng = RngStream::new(0, 0);
        let dataset = Dataset::Paired(toy.pairs(64, &mut rng));
        let net = ScoreNetworkConfig::mlp(2, vec![8], 4);
        let s = NoiseSchedule::default();
        let cfg = TrainConfig {
            batch_size: 4,
            total_steps: 30,
            learning_rate: 1e-3,
            ..TrainConfig::default()
        };
        let a = train(&cfg, &s, &dataset, &net).unwrap();
        let b = train(&cfg, &s, &dataset, &net).unwrap();
        let half = TrainConfig {
            total_steps: 12,
            ..cfg.clone()
        };
        let first = train(&half, &s, &dataset, &net).unwrap();
        let resumed = train_with(&cfg, &s, &dataset, &net, Some(first.state), &TrainOutput::default()).unwrap();
        for other in [&b, &resumed] {
            assert_eq!(other.state.step, 30);
            for ((_, x), (_, y)) in a.state.params.iter().zip(other.state.params.iter()) {
                assert!(x.bitwise_eq(y));
            }
        }
    }

    #[test]
    fn training_contracts() {
        let net = ScoreNetworkConfig::mlp(2, vec![4], 4);
        let s = NoiseSchedule::default();
        let unpaired = Dataset::Unpaired(vec![Tensor::from_vec(vec![0.0, 1.0])]);
        let cfg = TrainConfig {
            total_steps: 0,
            ..TrainConfig::default()
        };
        assert!(matches!(train(&cfg, &s, &unpaired, &net), Err(Error::Config(_))));
        let cfg = TrainConfig::default();
        assert!(matches!(train(&cfg, &s, &unpaired, &net), Err(Error::Config(_))));
        assert!(matches!(
            train(&cfg, &s, &Dataset::Paired(vec![]), &net),
            Err(Error::Contract(_))
        ));
    }
}
