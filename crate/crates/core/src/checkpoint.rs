//! Trained model snapshots stored as BTEN files.
//!
//! Entries: `__config__` (u8, the resolved `schedule.`/`net.`/`train.`
//! configuration text), `__state__` (f64 `[step, loss_ema, last_loss]`),
//! then every parameter under its own name, then optimizer moments as
//! `__m__.<name>` and `__v__.<name>`.

use std::path::Path;

use crate::bten::{find, read_bten, write_bten, BtenEntry, TensorData};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::network::{forward, NamedTensors, ScoreNetworkConfig};
use crate::sampling::Denoiser;
use crate::schedules::NoiseSchedule;
use crate::tensor::Tensor;
use crate::training::{Objective, TrainConfig, TrainState};

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub schedule: NoiseSchedule,
    pub net: ScoreNetworkConfig,
    pub train: TrainConfig,
    pub state: TrainState,
}

impl Checkpoint {
    pub fn new(schedule: NoiseSchedule, net: ScoreNetworkConfig, train: TrainConfig, state: TrainState) -> Self {
        Self {
            schedule,
            net,
            train,
            state,
        }
    }

    pub fn config_text(&self) -> String {
        let cfg = RunConfig {
            schedule: self.schedule.clone(),
            net: self.net.clone(),
            train: self.train.clone(),
            ..RunConfig::default()
        };
        cfg.to_text()
    }

    pub fn to_entries(&self) -> Result<Vec<BtenEntry>> {
        let text = self.config_text().into_bytes();
        let mut entries = vec![
            BtenEntry::u8("__config__", vec![text.len()], text)?,
            BtenEntry::new(
                "__state__",
                vec![3],
                TensorData::F64(vec![self.state.step as f64, self.state.loss_ema, self.state.last_loss]),
            )?,
        ];
        for (name, t) in self.state.params.iter() {
            entries.push(BtenEntry::f64(name, t));
        }
        for (prefix, set) in [
            ("__m__.", &self.state.first_moment),
            ("__v__.", &self.state.second_moment),
        ] {
            for (name, t) in set.iter() {
                entries.push(BtenEntry::f64(format!("{prefix}{name}"), t));
            }
        }
        Ok(entries)
    }

    pub fn from_entries(entries: &[BtenEntry]) -> Result<Self> {
        let cfg_entry = find(entries, "__config__")?;
        let TensorData::U8(bytes) = &cfg_entry.data else {
            return Err(Error::Data("`__config__` must be a u8 entry".into()));
        };
        let text = std::str::from_utf8(bytes).map_err(|_| Error::Data("checkpoint config is not UTF-8".into()))?;
        let cfg = RunConfig::parse(text)?;
        cfg.net.validate()?;
        let st = find(entries, "__state__")?.to_tensor()?;
        if st.numel() != 3 {
            return Err(Error::Data("`__state__` must hold 3 values".into()));
        }
        let load = |prefix: &str| -> Result<NamedTensors> {
            let set = cfg
                .net
                .parameter_layout()
                .into_iter()
                .map(|(name, shape)| {
                    let t = find(entries, &format!("{prefix}{name}"))?.to_tensor()?;
                    if t.shape() != shape.as_slice() {
                        return Err(Error::Data(format!(
                            "checkpoint entry `{prefix}{name}` has shape {:?}, expected {shape:?}",
                            t.shape()
                        )));
                    }
                    Ok((name, t))
                })
                .collect::<Result<_>>()?;
            Ok(NamedTensors::new(set))
        };
        let step = st.data()[0];
        if !(step >= 0.0 && step.fract() == 0.0) {
            return Err(Error::Data(format!("invalid checkpoint step {step}")));
        }
        let state = TrainState {
            params: load("")?,
            first_moment: load("__m__.")?,
            second_moment: load("__v__.")?,
            step: step as u64,
            loss_ema: st.data()[1],
            last_loss: st.data()[2],
        };
        Ok(Self::new(cfg.schedule, cfg.net, cfg.train, state))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_bten(path, &self.to_entries()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_entries(&read_bten(path)?)
    }
}

impl Denoiser for Checkpoint {
    fn predict_x0(&self, x_t: &Tensor, x_end: &Tensor, t: f64) -> Result<Tensor> {
        let shape = self.net.data_shape();
        let out = forward(
            &self.state.params,
            &self.net,
            &x_t.clone().reshape(shape.clone())?,
            &x_end.clone().reshape(shape)?,
            t / self.schedule.horizon,
        )?;
        out.reshape(x_t.shape().to_vec())
    }

    fn objective(&self) -> Option<Objective> {
        Some(self.train.objective)
    }
}
