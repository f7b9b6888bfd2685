//! Data-prediction network `x̂_0 = x_θ(x_t, x_T, t)`.
//!
//! Two architectures share one contract: the endpoint `x_T` is concatenated
//! with `x_t` as an extra input feature/channel, `t` enters through
//! sinusoidal features projected onto each hidden layer, and the output is a
//! residual added to `x_t`. The output layer (including a linear shortcut
//! from the raw inputs) starts at zero, so an untrained network is the
//! identity `x̂_0 = x_t`.

use rayon::prelude::*;

use crate::autodiff::{Activation, Tape, Var};
use crate::error::{contract, domain, Error, Result};
use crate::rng::RngStream;
use crate::schedules::NoiseSchedule;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Architecture {
    Mlp,
    ConvResidual2d,
}

impl Architecture {
    pub fn as_str(self) -> &'static str {
        match self {
            Architecture::Mlp => "mlp",
            Architecture::ConvResidual2d => "conv",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mlp" => Ok(Architecture::Mlp),
            "conv" | "convresidual2d" => Ok(Architecture::ConvResidual2d),
            other => Err(Error::Config(format!("unknown architecture `{other}`"))),
        }
    }
}

pub fn parse_activation(s: &str) -> Result<Activation> {
    match s.to_ascii_lowercase().as_str() {
        "silu" => Ok(Activation::Silu),
        "relu" => Ok(Activation::Relu),
        other => Err(Error::Config(format!("unknown activation `{other}`"))),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreNetworkConfig {
    pub arch: Architecture,
    /// Hidden layer widths (MLP) or channel counts per resolution level (conv).
    pub hidden_widths: Vec<usize>,
    pub time_embed_dim: usize,
    /// Side length of square single-channel images (conv only).
    pub image_side: usize,
    /// Length of the data vector (MLP only).
    pub input_dim: usize,
    pub activation: Activation,
}

impl ScoreNetworkConfig {
    pub fn mlp(input_dim: usize, hidden_widths: Vec<usize>, time_embed_dim: usize) -> Self {
        Self {
            arch: Architecture::Mlp,
            hidden_widths,
            time_embed_dim,
            image_side: 0,
            input_dim,
            activation: Activation::Silu,
        }
    }

    pub fn conv(image_side: usize, hidden_widths: Vec<usize>, time_embed_dim: usize) -> Self {
        Self {
            arch: Architecture::ConvResidual2d,
            hidden_widths,
            time_embed_dim,
            image_side,
            input_dim: 0,
            activation: Activation::Silu,
        }
    }

    pub fn validate(&self) -> Result<()> {
        contract!(
            !self.hidden_widths.is_empty(),
            "network needs at least one hidden layer"
        );
        contract!(
            self.hidden_widths.iter().all(|&w| w > 0),
            "hidden widths must be positive"
        );
        contract!(
            self.time_embed_dim >= 2 && self.time_embed_dim.is_multiple_of(2),
            "time_embed_dim must be even and >= 2, got {}",
            self.time_embed_dim
        );
        match self.arch {
            Architecture::Mlp => contract!(self.input_dim > 0, "MLP needs input_dim > 0"),
            Architecture::ConvResidual2d => {
                let factor = 1usize << (self.hidden_widths.len() - 1);
                contract!(
                    self.image_side > 0 && self.image_side.is_multiple_of(factor),
                    "image_side {} must be a positive multiple of {factor}",
                    self.image_side
                );
            }
        }
        Ok(())
    }

    /// Shape of `x_t`, `x_T` and the prediction.
    pub fn data_shape(&self) -> Vec<usize> {
        match self.arch {
            Architecture::Mlp => vec![self.input_dim],
            Architecture::ConvResidual2d => vec![self.image_side, self.image_side],
        }
    }

    /// Names and shapes of every parameter, in canonical order.
    pub fn parameter_layout(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.time_embed_dim;
        let widths = &self.hidden_widths;
        let mut layout = Vec::new();
        match self.arch {
            Architecture::Mlp => {
                let inputs = 2 * self.input_dim;
                let mut fan_in = inputs;
                for (l, &w) in widths.iter().enumerate() {
                    layout.push((format!("mlp.{l}.w"), vec![w, fan_in]));
                    layout.push((format!("mlp.{l}.b"), vec![w]));
                    layout.push((format!("mlp.{l}.t"), vec![w, d]));
                    fan_in = w;
                }
                layout.push(("out.w".into(), vec![self.input_dim, fan_in]));
                layout.push(("out.b".into(), vec![self.input_dim]));
                layout.push(("out.skip".into(), vec![self.input_dim, inputs]));
            }
            Architecture::ConvResidual2d => {
                let c0 = widths[0];
                layout.push(("stem.w".into(), vec![c0, 2, 3, 3]));
                layout.push(("stem.b".into(), vec![c0]));
                layout.push(("stem.t".into(), vec![c0, d]));
                for (i, &c) in widths.iter().enumerate() {
                    if i > 0 {
                        let prev = widths[i - 1];
                        layout.push((format!("down{i}.w"), vec![c, prev, 3, 3]));
                        layout.push((format!("down{i}.b"), vec![c]));
                        layout.push((format!("down{i}.t"), vec![c, d]));
                    }
                    layout.push((format!("res{i}.w1"), vec![c, c, 3, 3]));
                    layout.push((format!("res{i}.b1"), vec![c]));
                    layout.push((format!("res{i}.w2"), vec![c, c, 3, 3]));
                    layout.push((format!("res{i}.b2"), vec![c]));
                }
                for i in (1..widths.len()).rev() {
                    layout.push((format!("up{i}.w"), vec![widths[i - 1], widths[i], 3, 3]));
                    layout.push((format!("up{i}.b"), vec![widths[i - 1]]));
                }
                layout.push(("out.w".into(), vec![1, c0, 3, 3]));
                layout.push(("out.b".into(), vec![1]));
                layout.push(("out.skip".into(), vec![1, 2, 1, 1]));
            }
        }
        layout
    }

    pub fn parameter_count(&self) -> usize {
        self.parameter_layout()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

/// Named tensors in canonical layout order.
#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensors {
    entries: Vec<(String, Tensor)>,
}

pub type ParameterSet = NamedTensors;

/// Gradient of a scalar loss, keyed like its [`ParameterSet`].
pub type Gradient = NamedTensors;

impl NamedTensors {
    pub fn new(entries: Vec<(String, Tensor)>) -> Self {
        Self { entries }
    }

    pub fn zeros_like(other: &NamedTensors) -> Self {
        Self {
            entries: other
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), Tensor::zeros(t.shape())))
                .collect(),
        }
    }

    /// Default initialization: weights `N(0, 1/fan_in)`, biases zero,
    /// output layer zero.
    pub fn init(cfg: &ScoreNetworkConfig, rng: &mut RngStream) -> Result<Self> {
        cfg.validate()?;
        let entries = cfg
            .parameter_layout()
            .into_iter()
            .map(|(name, shape)| {
                let numel: usize = shape.iter().product();
                let is_bias = shape.len() == 1;
                let data = if name.starts_with("out.") || is_bias {
                    vec![0.0; numel]
                } else {
                    let fan_in: usize = shape[1..].iter().product();
                    let sd = (1.0 / fan_in as f64).sqrt();
                    (0..numel).map(|_| sd * rng.normal()).collect()
                };
                (name, Tensor::new(shape, data).expect("layout shape"))
            })
            .collect();
        Ok(Self { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn into_entries(self) -> Vec<(String, Tensor)> {
        self.entries
    }

    pub fn is_congruent(&self, other: &NamedTensors) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((a, x), (b, y))| a == b && x.shape() == y.shape())
    }

    /// Checks names and shapes against a network configuration.
    pub fn check_layout(&self, cfg: &ScoreNetworkConfig) -> Result<()> {
        let layout = cfg.parameter_layout();
        contract!(
            layout.len() == self.entries.len(),
            "parameter set has {} entries, config expects {}",
            self.entries.len(),
            layout.len()
        );
        for ((name, shape), (n, t)) in layout.iter().zip(&self.entries) {
            contract!(
                name == n && shape.as_slice() == t.shape(),
                "parameter `{n}` {:?} does not match layout `{name}` {shape:?}",
                t.shape()
            );
        }
        Ok(())
    }

    /// `self += k · other`, entry by entry.
    pub fn add_scaled(&mut self, other: &NamedTensors, k: f64) {
        for ((_, a), (_, b)) in self.entries.iter_mut().zip(&other.entries) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += k * y;
            }
        }
    }
}

/// Sinusoidal features of normalized time `s = t/T`, with `dim/2`
/// frequencies geometrically spaced over [1, 10⁴].
pub fn time_features(s: f64, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    let freqs: Vec<f64> = (0..half)
        .map(|k| {
            if half == 1 {
                1.0
            } else {
                10f64.powf(4.0 * k as f64 / (half - 1) as f64)
            }
        })
        .collect();
    out.extend(freqs.iter().map(|f| (f * s).sin()));
    out.extend(freqs.iter().map(|f| (f * s).cos()));
    Tensor::from_vec(out)
}

/// Records the network on `tape`, registering every parameter, and returns
/// the prediction variable, shaped like `cfg.data_shape()`.
pub fn forward_on_tape(
    tape: &mut Tape,
    params: &ParameterSet,
    cfg: &ScoreNetworkConfig,
    x_t: &Tensor,
    x_end: &Tensor,
    t: f64,
) -> Result<Var> {
    let shape = cfg.data_shape();
    contract!(
        x_t.shape() == shape.as_slice() && x_end.shape() == shape.as_slice(),
        "network expects inputs of shape {shape:?}, got {:?} and {:?}",
        x_t.shape(),
        x_end.shape()
    );
    let mut vars = Vec::with_capacity(params.len());
    for (name, value) in params.iter() {
        vars.push(tape.param(name, value));
    }
    let lookup = |name: &str| -> Var {
        let idx = params
            .entries
            .iter()
            .position(|(n, _)| n == name)
            .unwrap_or_else(|| panic!("missing parameter {name}"));
        vars[idx]
    };
    let act = cfg.activation;
    let temb = tape.constant(time_features(t, cfg.time_embed_dim));
    let mut input = x_t.data().to_vec();
    input.extend_from_slice(x_end.data());

    match cfg.arch {
        Architecture::Mlp => {
            let u = tape.constant(Tensor::from_vec(input));
            let x_var = tape.constant(x_t.clone());
            let mut h = u;
            for l in 0..cfg.hidden_widths.len() {
                let z = tape.matvec(lookup(&format!("mlp.{l}.w")), h);
                let z = tape.channel_bias(z, lookup(&format!("mlp.{l}.b")));
                let tz = tape.matvec(lookup(&format!("mlp.{l}.t")), temb);
                let z = tape.add(z, tz);
                h = tape.act(z, act);
            }
            let out = tape.matvec(lookup("out.w"), h);
            let out = tape.channel_bias(out, lookup("out.b"));
            let skip = tape.matvec(lookup("out.skip"), u);
            let out = tape.add(out, skip);
            Ok(tape.add(x_var, out))
        }
        Architecture::ConvResidual2d => {
            let side = cfg.image_side;
            let u = tape.constant(Tensor::new(vec![2, side, side], input)?);
            let x_var = tape.constant(x_t.clone().reshape(vec![1, side, side])?);
            let widths = &cfg.hidden_widths;

            let mut h = tape.conv2d(u, lookup("stem.w"), 1);
            h = tape.channel_bias(h, lookup("stem.b"));
            let tz = tape.matvec(lookup("stem.t"), temb);
            h = tape.channel_bias(h, tz);
            h = tape.act(h, act);

            let mut skips = Vec::with_capacity(widths.len());
            for i in 0..widths.len() {
                if i > 0 {
                    h = tape.conv2d(h, lookup(&format!("down{i}.w")), 2);
                    h = tape.channel_bias(h, lookup(&format!("down{i}.b")));
                    let tz = tape.matvec(lookup(&format!("down{i}.t")), temb);
                    h = tape.channel_bias(h, tz);
                    h = tape.act(h, act);
                }
                let r = tape.conv2d(h, lookup(&format!("res{i}.w1")), 1);
                let r = tape.channel_bias(r, lookup(&format!("res{i}.b1")));
                let r = tape.act(r, act);
                let r = tape.conv2d(r, lookup(&format!("res{i}.w2")), 1);
                let r = tape.channel_bias(r, lookup(&format!("res{i}.b2")));
                let sum = tape.add(h, r);
                h = tape.act(sum, act);
                skips.push(h);
            }
            for i in (1..widths.len()).rev() {
                h = tape.upsample2x(h);
                h = tape.conv2d(h, lookup(&format!("up{i}.w")), 1);
                h = tape.channel_bias(h, lookup(&format!("up{i}.b")));
                let sum = tape.add(h, skips[i - 1]);
                h = tape.act(sum, act);
            }
            let out = tape.conv2d(h, lookup("out.w"), 1);
            let out = tape.channel_bias(out, lookup("out.b"));
            let skip = tape.conv2d(u, lookup("out.skip"), 1);
            let out = tape.add(out, skip);
            let out = tape.add(x_var, out);
            Ok(tape.reshape(out, shape))
        }
    }
}

/// Predicts `x̂_0` for inputs shaped like `cfg.data_shape()`; `t` is
/// normalized time `t/T ∈ [0, 1]`.
pub fn forward(
    params: &ParameterSet,
    cfg: &ScoreNetworkConfig,
    x_t: &Tensor,
    x_end: &Tensor,
    t: f64,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let out = forward_on_tape(&mut tape, params, cfg, x_t, x_end, t)?;
    let value = tape.value(out).clone().reshape(cfg.data_shape())?;
    value.ensure_finite("network output")?;
    Ok(value)
}

/// A recorded scalar loss: one tape per batch element, each already scaled
/// by its share of the batch mean.
pub struct LossGraph {
    pub(crate) parts: Vec<(Tape, Var)>,
}

impl LossGraph {
    pub fn from_parts(parts: Vec<(Tape, Var)>) -> Self {
        Self { parts }
    }

    pub fn value(&self) -> f64 {
        self.parts.iter().map(|(tape, v)| tape.value(*v).data()[0]).sum()
    }
}

/// Exact reverse-mode gradient of the recorded loss with respect to every
/// parameter. Per-element gradients are summed in batch order.
pub fn backward(params: &ParameterSet, cfg: &ScoreNetworkConfig, graph: &LossGraph) -> Result<Gradient> {
    params.check_layout(cfg)?;
    let parts: Vec<NamedTensors> = graph
        .parts
        .par_iter()
        .map(|(tape, out)| tape.param_grads(*out).map(NamedTensors::new))
        .collect::<Result<_>>()?;
    let mut total = NamedTensors::zeros_like(params);
    for grads in &parts {
        contract!(
            grads.is_congruent(params),
            "loss graph was recorded against a different parameter set"
        );
        total.add_scaled(grads, 1.0);
    }
    Ok(total)
}

/// Bridge score implied by a data prediction:
/// `−(x_t − a_t x_T − b_t x̂_0) / c_t²`.
pub fn score_from_prediction(
    schedule: &NoiseSchedule,
    x_t: &Tensor,
    x_end: &Tensor,
    t: f64,
    x0_hat: &Tensor,
) -> Result<Tensor> {
    x_t.ensure_same_shape(x_end, "score_from_prediction")?;
    x_t.ensure_same_shape(x0_hat, "score_from_prediction")?;
    let coef = schedule.bridge_coefficients(t)?;
    let c_sq = coef.c_sq();
    domain!(c_sq > 0.0, "bridge variance vanishes at t={t}");
    let mean = x_end.lincomb(coef.a, x0_hat, coef.b);
    Ok(x_t.zip_map(&mean, |x, m| -(x - m) / c_sq))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sde::analytic_bridge_score;

    fn randomize(params: &mut ParameterSet, rng: &mut RngStream, scale: f64) {
        for (_, t) in params.iter_mut() {
            for v in t.data_mut() {
                *v = scale * rng.normal();
            }
        }
    }

    #[test]
    fn zero_init_is_identity() {
        let mut rng = RngStream::new(0, 0);
        for cfg in [
            ScoreNetworkConfig::mlp(3, vec![8, 8], 4),
            ScoreNetworkConfig::conv(8, vec![2, 3], 4),
        ] {
            let params = ParameterSet::init(&cfg, &mut rng).unwrap();
            let n: usize = cfg.data_shape().iter().product();
            let x = Tensor::new(cfg.data_shape(), rng.normal_vec(n)).unwrap();
            let e = Tensor::new(cfg.data_shape(), rng.normal_vec(n)).unwrap();
            let y = forward(&params, &cfg, &x, &e, 0.3).unwrap();
            assert!(y.bitwise_eq(&x));
        }
    }

    #[test]
    fn forward_is_pure() {
        let mut rng = RngStream::new(1, 0);
        let cfg = ScoreNetworkConfig::conv(8, vec![2, 3, 4], 6);
        let mut params = ParameterSet::init(&cfg, &mut rng).unwrap();
        randomize(&mut params, &mut rng, 0.3);
        let x = Tensor::new(vec![8, 8], rng.normal_vec(64)).unwrap();
        let e = Tensor::new(vec![8, 8], rng.normal_vec(64)).unwrap();
        let a = forward(&params, &cfg, &x, &e, 0.7).unwrap();
        let b = forward(&params, &cfg, &x, &e, 0.7).unwrap();
        assert!(a.bitwise_eq(&b));
    }

    #[test]
    fn mlp_shape_contract() {
        let mut rng = RngStream::new(2, 0);
        let cfg = ScoreNetworkConfig::mlp(2, vec![8], 4);
        let mut params = ParameterSet::init(&cfg, &mut rng).unwrap();
        randomize(&mut params, &mut rng, 1.0);
        let x = Tensor::from_vec(vec![0.5, -0.2]);
        let y = forward(&params, &cfg, &x, &x, 0.5).unwrap();
        assert_eq!(y.shape(), &[2]);
        assert!(y.is_finite());
        let bad = Tensor::from_vec(vec![0.5, -0.2, 1.0]);
        assert!(matches!(
            forward(&params, &cfg, &bad, &bad, 0.5),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn parameter_counts() {
        // 2d inputs = 4; layer0: 8*4 + 8 + 8*4; out: 2*8 + 2 + 2*4.
        let cfg = ScoreNetworkConfig::mlp(2, vec![8], 4);
        assert_eq!(cfg.parameter_count(), 32 + 8 + 32 + 16 + 2 + 8);
        // stem 2*2*9+2+2*4; down1 3*2*9+3+3*4; res0 2*(2*2*9+2);
        // res1 2*(3*3*9+3); up1 2*3*9+2; out 2*9+1; skip 2.
        let cfg = ScoreNetworkConfig::conv(8, vec![2, 3], 4);
        let expected = (36 + 2 + 8) + (54 + 3 + 12) + 2 * 38 + 2 * 84 + (54 + 2) + 19 + 2;
        assert_eq!(cfg.parameter_count(), expected);
        let params = ParameterSet::init(&cfg, &mut RngStream::new(0, 0)).unwrap();
        assert_eq!(params.scalar_count(), expected);
    }

    #[test]
    fn config_validation() {
        assert!(ScoreNetworkConfig::mlp(2, vec![], 4).validate().is_err());
        assert!(ScoreNetworkConfig::mlp(2, vec![4], 3).validate().is_err());
        assert!(ScoreNetworkConfig::conv(6, vec![2, 2, 2], 4).validate().is_err());
        assert!(ScoreNetworkConfig::conv(8, vec![2, 2, 2], 4).validate().is_ok());
    }

    #[test]
    fn default_init_is_lipschitz_sane() {
        let mut rng = RngStream::new(3, 0);
        let cfg = ScoreNetworkConfig::conv(16, vec![4, 8, 8], 8);
        let params = ParameterSet::init(&cfg, &mut rng).unwrap();
        let x = Tensor::new(vec![16, 16], rng.normal_vec(256)).unwrap();
        let e = Tensor::new(vec![16, 16], rng.normal_vec(256)).unwrap();
        let base = forward(&params, &cfg, &x, &e, 0.4).unwrap();
        let mut bumped = x.clone();
        bumped.data_mut()[37] += 1e-6;
        let moved = forward(&params, &cfg, &bumped, &e, 0.4).unwrap();
        assert!(base.max_abs_diff(&moved) < 1e-2);
    }

    #[test]
    fn score_from_prediction_examples() {
        let s = NoiseSchedule::brownian(1.0);
        let one = |v: f64| Tensor::from_vec(vec![v]);
        let score = score_from_prediction(&s, &one(1.0), &one(0.0), 0.5, &one(0.0)).unwrap();
        assert!((score.data()[0] + 4.0).abs() < 1e-14);

        let vp = NoiseSchedule::default();
        let mut rng = RngStream::new(4, 0);
        let x0 = Tensor::from_vec(rng.normal_vec(4));
        let xe = Tensor::from_vec(rng.normal_vec(4));
        let xt = Tensor::from_vec(rng.normal_vec(4));
        let a = score_from_prediction(&vp, &xt, &xe, 0.4, &x0).unwrap();
        let b = analytic_bridge_score(&vp, &xt, &x0, &xe, 0.4).unwrap();
        assert!(a.bitwise_eq(&b));

        let c = vp.bridge_coefficients(0.4).unwrap();
        let at_mean = xe.lincomb(c.a, &x0, c.b);
        let zero = score_from_prediction(&vp, &at_mean, &xe, 0.4, &x0).unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.0));
        assert!(score_from_prediction(&vp, &xt, &xe, 1.0, &x0).is_err());
    }

    #[test]
    fn time_features_layout() {
        let f = time_features(0.0, 6);
        assert_eq!(f.data(), &[0.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let g = time_features(0.5, 2);
        assert!((g.data()[0] - 0.5f64.sin()).abs() < 1e-15);
    }
}
