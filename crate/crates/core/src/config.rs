//! Flat `key=value` run configuration.
//!
//! One pair per line, `#` starts a comment, keys are grouped by prefix
//! (`schedule.`, `net.`, `train.`, `sample.`, `data.`, `eval.`). Unknown or
//! repeated keys are rejected with their line number. `to_text` emits every
//! key in a fixed order and parses back to an identical config.

use std::fmt::Display;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::network::{parse_activation, Architecture, ScoreNetworkConfig};
use crate::sampling::{SamplerConfig, TimeGrid};
use crate::schedules::{NoiseSchedule, ScheduleKind};
use crate::synthdata::{LesionSpec, PhantomSpec};
use crate::training::{Objective, OptimizerKind, TrainConfig, Weighting};

/// Which counterfactual generator `sample` runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleMethod {
    /// Implicit bridge sampler from the pathological endpoint.
    Dbim,
    /// DDPM partial noising to `t_star` and back.
    Partial,
}

impl SampleMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            SampleMethod::Dbim => "dbim",
            SampleMethod::Partial => "partial",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "dbim" => Ok(SampleMethod::Dbim),
            "partial" => Ok(SampleMethod::Partial),
            _ => Err(Error::Config(format!("unknown sample method `{s}` (dbim|partial)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleSection {
    pub sampler: SamplerConfig,
    pub method: SampleMethod,
    /// Partial-noising level as a fraction of the horizon.
    pub t_star: f64,
    pub ddpm_steps: usize,
}

impl Default for SampleSection {
    fn default() -> Self {
        Self {
            sampler: SamplerConfig::default(),
            method: SampleMethod::Dbim,
            t_star: 0.5,
            ddpm_steps: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataSection {
    pub n: usize,
    pub seed: u64,
    pub phantom: PhantomSpec,
    pub lesion: LesionSpec,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            n: 100,
            seed: 0,
            phantom: PhantomSpec::default(),
            lesion: LesionSpec::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSection {
    pub smooth_radius: usize,
    pub method_name: String,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            smooth_radius: 1,
            method_name: "model".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub schedule: NoiseSchedule,
    pub net: ScoreNetworkConfig,
    pub train: TrainConfig,
    pub sample: SampleSection,
    pub data: DataSection,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schedule: NoiseSchedule::default(),
            net: ScoreNetworkConfig::conv(64, vec![8, 16, 32], 16),
            train: TrainConfig::default(),
            sample: SampleSection::default(),
            data: DataSection::default(),
            eval: EvalSection::default(),
        }
    }
}

fn num<T: FromStr>(v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("cannot parse `{v}` as a number")))
}

fn boolean(v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!("expected true or false, got `{v}`"))),
    }
}

fn list<T: FromStr>(v: &str) -> Result<Vec<T>> {
    v.split(',').map(|p| num(p.trim())).collect()
}

fn bands(v: &str) -> Result<Vec<(f64, f64)>> {
    v.split(',')
        .map(|b| {
            let (lo, hi) = b
                .trim()
                .split_once(':')
                .ok_or_else(|| Error::Config(format!("band `{b}` is not lo:hi")))?;
            Ok((num(lo)?, num(hi)?))
        })
        .collect()
}

fn join<T: Display>(items: &[T]) -> String {
    items.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

/// Every recognized key, in emission order.
pub const KEYS: &[&str] = &[
    "schedule.kind",
    "schedule.beta_min",
    "schedule.beta_max",
    "schedule.horizon",
    "net.arch",
    "net.widths",
    "net.time_embed_dim",
    "net.image_side",
    "net.input_dim",
    "net.activation",
    "train.objective",
    "train.learning_rate",
    "train.batch_size",
    "train.total_steps",
    "train.weighting",
    "train.seed",
    "train.optimizer",
    "train.checkpoint_every",
    "train.log_every",
    "sample.method",
    "sample.n_steps",
    "sample.eta",
    "sample.grid",
    "sample.seed",
    "sample.strict",
    "sample.t_star",
    "sample.ddpm_steps",
    "data.n",
    "data.seed",
    "data.image_side",
    "data.ellipses_min",
    "data.ellipses_max",
    "data.bands",
    "data.texture_sd",
    "data.background_level",
    "data.edge_width",
    "data.lesion_radius_min",
    "data.lesion_radius_max",
    "data.diffusion_iterations",
    "data.intensity_shift",
    "data.max_area_fraction",
    "eval.smooth_radius",
    "eval.method_name",
];

impl RunConfig {
    /// Parses config text on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen: Vec<&str> = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let at = |msg: String| Error::ConfigLine { line, msg };
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| at(format!("expected key=value, got `{content}`")))?;
            let (key, value) = (key.trim(), value.trim());
            let known = KEYS
                .iter()
                .find(|k| **k == key)
                .ok_or_else(|| at(format!("unknown key `{key}`")))?;
            if seen.contains(known) {
                return Err(at(format!("key `{key}` given twice")));
            }
            seen.push(known);
            cfg.set(key, value).map_err(|e| match e {
                Error::Config(msg) => at(format!("{key}: {msg}")),
                other => at(format!("{key}: {other}")),
            })?;
        }
        cfg.finish();
        Ok(cfg)
    }

    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let s = &mut self.schedule;
        let n = &mut self.net;
        let t = &mut self.train;
        let sm = &mut self.sample;
        let p = &mut self.data.phantom;
        let l = &mut self.data.lesion;
        match key {
            "schedule.kind" => s.kind = ScheduleKind::parse(v).map_err(|e| Error::Config(e.to_string()))?,
            "schedule.beta_min" => s.beta_min = num(v)?,
            "schedule.beta_max" => s.beta_max = num(v)?,
            "schedule.horizon" => s.horizon = num(v)?,
            "net.arch" => n.arch = Architecture::parse(v).map_err(|e| Error::Config(e.to_string()))?,
            "net.widths" => n.hidden_widths = list(v)?,
            "net.time_embed_dim" => n.time_embed_dim = num(v)?,
            "net.image_side" => n.image_side = num(v)?,
            "net.input_dim" => n.input_dim = num(v)?,
            "net.activation" => n.activation = parse_activation(v).map_err(|e| Error::Config(e.to_string()))?,
            "train.objective" => t.objective = Objective::parse(v)?,
            "train.learning_rate" => t.learning_rate = num(v)?,
            "train.batch_size" => t.batch_size = num(v)?,
            "train.total_steps" => t.total_steps = num(v)?,
            "train.weighting" => t.weighting = Weighting::parse(v)?,
            "train.seed" => t.seed = num(v)?,
            "train.optimizer" => t.optimizer = OptimizerKind::parse(v)?,
            "train.checkpoint_every" => t.checkpoint_every = num(v)?,
            "train.log_every" => t.log_every = num(v)?,
            "sample.method" => sm.method = SampleMethod::parse(v)?,
            "sample.n_steps" => sm.sampler.n_steps = num(v)?,
            "sample.eta" => sm.sampler.eta = num(v)?,
            "sample.grid" => sm.sampler.grid = TimeGrid::parse(v)?,
            "sample.seed" => sm.sampler.seed = num(v)?,
            "sample.strict" => sm.sampler.strict = boolean(v)?,
            "sample.t_star" => sm.t_star = num(v)?,
            "sample.ddpm_steps" => sm.ddpm_steps = num(v)?,
            "data.n" => self.data.n = num(v)?,
            "data.seed" => self.data.seed = num(v)?,
            "data.image_side" => p.image_side = num(v)?,
            "data.ellipses_min" => p.n_ellipses.0 = num(v)?,
            "data.ellipses_max" => p.n_ellipses.1 = num(v)?,
            "data.bands" => p.intensity_bands = bands(v)?,
            "data.texture_sd" => p.texture_noise_sd = num(v)?,
            "data.background_level" => p.background_level = num(v)?,
            "data.edge_width" => p.edge_width = num(v)?,
            "data.lesion_radius_min" => l.seed_blob_radius.0 = num(v)?,
            "data.lesion_radius_max" => l.seed_blob_radius.1 = num(v)?,
            "data.diffusion_iterations" => l.diffusion_iterations = num(v)?,
            "data.intensity_shift" => l.intensity_shift = num(v)?,
            "data.max_area_fraction" => l.max_area_fraction = num(v)?,
            "eval.smooth_radius" => self.eval.smooth_radius = num(v)?,
            "eval.method_name" => {
                if v.is_empty() || v.contains(',') {
                    return Err(Error::Config("method name must be non-empty and comma-free".into()));
                }
                self.eval.method_name = v.to_string()
            }
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Re-derives the schedule's clamp range from its horizon.
    fn finish(&mut self) {
        let h = self.schedule.horizon;
        self.schedule.t_clamp_lo = 1e-4 * h;
        self.schedule.t_clamp_hi = (1.0 - 1e-4) * h;
    }

    /// Checks every section; failures are configuration errors.
    pub fn validate(&self) -> Result<()> {
        let cfg_err = |e: Error| match e {
            Error::Config(m) => Error::Config(m),
            other => Error::Config(other.to_string()),
        };
        self.schedule.validate().map_err(cfg_err)?;
        self.net.validate().map_err(cfg_err)?;
        self.train.validate()?;
        self.sample.sampler.validate()?;
        if !(self.sample.t_star > 0.0 && self.sample.t_star < 1.0) {
            return Err(Error::Config(format!(
                "sample.t_star must lie in (0, 1), got {}",
                self.sample.t_star
            )));
        }
        if self.sample.ddpm_steps == 0 {
            return Err(Error::Config("sample.ddpm_steps must be at least 1".into()));
        }
        self.data.phantom.validate()?;
        self.data.lesion.validate()?;
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let s = &self.schedule;
        let n = &self.net;
        let t = &self.train;
        let sm = &self.sample;
        let p = &self.data.phantom;
        let l = &self.data.lesion;
        let bands: Vec<String> = p.intensity_bands.iter().map(|(a, b)| format!("{a}:{b}")).collect();
        let values: Vec<String> = vec![
            s.kind.as_str().into(),
            s.beta_min.to_string(),
            s.beta_max.to_string(),
            s.horizon.to_string(),
            n.arch.as_str().into(),
            join(&n.hidden_widths),
            n.time_embed_dim.to_string(),
            n.image_side.to_string(),
            n.input_dim.to_string(),
            n.activation.as_str().into(),
            t.objective.as_str().into(),
            t.learning_rate.to_string(),
            t.batch_size.to_string(),
            t.total_steps.to_string(),
            t.weighting.as_str().into(),
            t.seed.to_string(),
            t.optimizer.as_str().into(),
            t.checkpoint_every.to_string(),
            t.log_every.to_string(),
            sm.method.as_str().into(),
            sm.sampler.n_steps.to_string(),
            sm.sampler.eta.to_string(),
            sm.sampler.grid.as_str().into(),
            sm.sampler.seed.to_string(),
            sm.sampler.strict.to_string(),
            sm.t_star.to_string(),
            sm.ddpm_steps.to_string(),
            self.data.n.to_string(),
            self.data.seed.to_string(),
            p.image_side.to_string(),
            p.n_ellipses.0.to_string(),
            p.n_ellipses.1.to_string(),
            bands.join(","),
            p.texture_noise_sd.to_string(),
            p.background_level.to_string(),
            p.edge_width.to_string(),
            l.seed_blob_radius.0.to_string(),
            l.seed_blob_radius.1.to_string(),
            l.diffusion_iterations.to_string(),
            l.intensity_shift.to_string(),
            l.max_area_fraction.to_string(),
            self.eval.smooth_radius.to_string(),
            self.eval.method_name.clone(),
        ];
        debug_assert_eq!(values.len(), KEYS.len());
        let mut out = String::from("# resolved configuration\n");
        for (k, v) in KEYS.iter().zip(values) {
            out.push_str(k);
            out.push('=');
            out.push_str(&v);
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
        assert_eq!(RunConfig::parse("").unwrap(), cfg);
        cfg.validate().unwrap();
    }

    #[test]
    fn custom_values_round_trip_exactly() {
        let text = "\
# comment line
schedule.kind = brownian
schedule.horizon = 2.5
net.arch = mlp   # trailing comment
net.widths = 64,64
net.input_dim = 2
train.learning_rate = 0.000123456789
train.objective = dsm
sample.eta = 0.1
sample.strict = true
data.bands = 0.2:0.3,0.6:0.7
";
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.schedule.kind, ScheduleKind::Brownian);
        assert_eq!(cfg.schedule.t_clamp_hi, (1.0 - 1e-4) * 2.5);
        assert_eq!(cfg.net.hidden_widths, vec![64, 64]);
        assert_eq!(cfg.train.learning_rate, 0.000123456789);
        assert_eq!(cfg.data.phantom.intensity_bands, vec![(0.2, 0.3), (0.6, 0.7)]);
        assert!(cfg.sample.sampler.strict);
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn errors_name_the_line() {
        let err = RunConfig::parse("train.seed = 1\n\ntrain.bogus = 3\n").unwrap_err();
        assert!(matches!(err, Error::ConfigLine { line: 3, .. }), "{err}");
        let err = RunConfig::parse("train.seed = x").unwrap_err();
        assert!(matches!(err, Error::ConfigLine { line: 1, .. }));
        let err = RunConfig::parse("train.seed = 1\ntrain.seed = 2").unwrap_err();
        assert!(matches!(err, Error::ConfigLine { line: 2, .. }));
        let err = RunConfig::parse("no equals sign").unwrap_err();
        assert!(matches!(err, Error::ConfigLine { line: 1, .. }));
        assert!(RunConfig::parse("sample.eta = 2").unwrap().validate().is_err());
    }
}
