//! The adversarial click model.
//!
//! Four sub-networks share one composite:
//!
//! ```text
//!   X ──► base ──► Z_A ──► prediction hidden ──► Z_Y ─┐
//!                   │                                 ├─► ŷ = σ(W_Y·Z_Y + W_BY·Z_BY + c)
//!   b ──► bypass hidden ─────────────────────► Z_BY ──┘
//!                   │
//!                   └────► bias ──► b̂
//! ```
//!
//! Training alternates two updates on each minibatch. The predictor side
//! (base, prediction, bypass) minimizes `(1 − λ)·BCE(y, ŷ) + λ·Cov(b, b̂)²`
//! with the bias network frozen; the Cov² gradient reaches the base network
//! through the bias network's input gradient. The bias network then
//! minimizes `MSE(b, b̂)` with everything else frozen.
//!
//! At inference the bias network is unused and `b` is either supplied per
//! row or fixed to the position-1 CTR for every row.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::distributions::{Distribution, Uniform};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feedbacksim::Dataset;
use crate::losses::{self, LossValue, NoisyLoss};
use crate::nncore::{sigmoid, Activation, ForwardTrace, Matrix, Network, NetworkGrads};
use crate::seed;

const TAG_BASE: u64 = 1;
const TAG_PREDICTION: u64 = 2;
const TAG_BIAS: u64 = 3;
const TAG_BYPASS: u64 = 4;
const TAG_BYPASS_OUT: u64 = 5;
const TAG_SHUFFLE: u64 = 6;
const TAG_PROBE: u64 = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    WithBypass,
    NoBypass,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::WithBypass => "with_bypass",
            Variant::NoBypass => "no_bypass",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "with_bypass" => Ok(Variant::WithBypass),
            "no_bypass" => Ok(Variant::NoBypass),
            other => Err(Error::config(format!("unknown variant {other:?}"))),
        }
    }
}

/// Hidden-layer widths of each sub-network. All hidden layers use tanh.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Architecture {
    /// Base network layers; the last width is the size of `Z_A`.
    pub base_hidden: Vec<usize>,
    /// Hidden layers between `Z_A` and the sigmoid head; the last is `Z_Y`.
    pub prediction_hidden: Vec<usize>,
    /// Hidden layers between `Z_A` and the linear `b̂` output.
    pub bias_hidden: Vec<usize>,
    /// Hidden layers applied to the scalar `b`; the last is `Z_BY`.
    pub bypass_hidden: Vec<usize>,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture {
            base_hidden: vec![10],
            prediction_hidden: vec![10],
            bias_hidden: vec![10],
            bypass_hidden: vec![1],
        }
    }
}

impl Architecture {
    /// The larger production-scale layout: base 300/150, prediction and
    /// bias one hidden layer of 300.
    pub fn large() -> Self {
        Architecture {
            base_hidden: vec![300, 150],
            prediction_hidden: vec![300],
            bias_hidden: vec![300],
            bypass_hidden: vec![1],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda: f64,
    pub learning_rate: f64,
    pub minibatch_size: usize,
    pub epochs: usize,
    /// Bias-only epochs run by [`probe_bias`] after training.
    pub probe_epochs: usize,
    pub architecture: Architecture,
    pub variant: Variant,
    pub rng_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 0.0,
            learning_rate: 0.01,
            minibatch_size: 100,
            epochs: 100,
            probe_epochs: 100,
            architecture: Architecture::default(),
            variant: Variant::WithBypass,
            rng_seed: 0,
        }
    }
}

impl TrainConfig {
    /// Production-scale settings: large architecture, minibatch 3072, 15 epochs.
    pub fn large() -> Self {
        TrainConfig {
            minibatch_size: 3072,
            epochs: 15,
            architecture: Architecture::large(),
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        losses::check_lambda(self.lambda)?;
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate must be positive"));
        }
        if self.minibatch_size < 2 {
            return Err(Error::config(
                "minibatch_size must be at least 2 (minibatch covariance needs two rows)",
            ));
        }
        let a = &self.architecture;
        if a.base_hidden.is_empty() {
            return Err(Error::config("base network needs at least one layer"));
        }
        if self.variant == Variant::WithBypass && a.bypass_hidden.is_empty() {
            return Err(Error::config("bypass network needs at least one hidden layer"));
        }
        let widths = a
            .base_hidden
            .iter()
            .chain(&a.prediction_hidden)
            .chain(&a.bias_hidden)
            .chain(&a.bypass_hidden);
        if widths.clone().any(|&w| w == 0) {
            return Err(Error::config("layer widths must be positive"));
        }
        Ok(())
    }
}

/// Scalar-input bypass path: hidden layers on `b` followed by the output
/// weights `W_BY` that enter the logit linearly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bypass {
    pub hidden: Network,
    pub out_weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnParams {
    /// θ_A.
    pub base: Network,
    /// θ_Y. Its final single-unit linear layer holds `W_Y` and the offset `c`.
    pub prediction: Network,
    /// θ_B.
    pub bias: Network,
    /// θ_BY, absent in the no-bypass variant.
    pub bypass: Option<Bypass>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnPrediction {
    pub y_hat: Vec<f64>,
    pub b_hat: Vec<f64>,
    pub z_a: Matrix,
}

/// Gradients of the noisy loss for every predictor-side parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictorGrads {
    pub base: NetworkGrads,
    pub prediction: NetworkGrads,
    pub bypass_hidden: Option<NetworkGrads>,
    pub bypass_out: Option<Vec<f64>>,
}

impl PredictorGrads {
    /// Same order as [`AnnParams::predictor_param_mut`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = self.base.flatten();
        v.extend(self.prediction.flatten());
        if let Some(h) = &self.bypass_hidden {
            v.extend(h.flatten());
        }
        if let Some(o) = &self.bypass_out {
            v.extend(o);
        }
        v
    }

    fn all_finite(&self) -> bool {
        self.flatten().iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLosses {
    pub loss_n: f64,
    pub loss_b: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss_n: f64,
    pub mean_loss_b: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochLog>,
}

/// How the bypass input `b` is chosen at inference time.
#[derive(Debug, Clone, Copy)]
pub enum BPolicy<'a> {
    /// One value per row.
    Given(&'a [f64]),
    /// Every row uses the position-1 CTR; `None` is a configuration error.
    Position1Ctr(Option<f64>),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BypassDiff {
    pub mean_abs_diff: f64,
    pub variant: Variant,
}

struct AnnTrace {
    base: ForwardTrace,
    prediction: ForwardTrace,
    bypass: Option<(ForwardTrace, Matrix)>,
    bias: ForwardTrace,
    y_hat: Vec<f64>,
    b_hat: Vec<f64>,
}

fn tanh_then(widths: &[usize], last: Option<Activation>) -> Vec<Activation> {
    let mut acts = vec![Activation::Tanh; widths.len()];
    acts.extend(last);
    acts
}

impl AnnParams {
    pub fn init(n_features: usize, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if n_features == 0 {
            return Err(Error::config("feature dimension must be positive"));
        }
        let a = &cfg.architecture;
        let z_a = *a.base_hidden.last().unwrap();

        let mut dims = vec![n_features];
        dims.extend(&a.base_hidden);
        let base = Network::init(
            &dims,
            &tanh_then(&a.base_hidden, None),
            seed::derive(cfg.rng_seed, TAG_BASE),
        )?;

        let mut dims = vec![z_a];
        dims.extend(&a.prediction_hidden);
        dims.push(1);
        let prediction = Network::init(
            &dims,
            &tanh_then(&a.prediction_hidden, Some(Activation::Linear)),
            seed::derive(cfg.rng_seed, TAG_PREDICTION),
        )?;

        let mut dims = vec![z_a];
        dims.extend(&a.bias_hidden);
        dims.push(1);
        let bias = Network::init(
            &dims,
            &tanh_then(&a.bias_hidden, Some(Activation::Linear)),
            seed::derive(cfg.rng_seed, TAG_BIAS),
        )?;

        let bypass = match cfg.variant {
            Variant::NoBypass => None,
            Variant::WithBypass => {
                let mut dims = vec![1];
                dims.extend(&a.bypass_hidden);
                let hidden = Network::init(
                    &dims,
                    &tanh_then(&a.bypass_hidden, None),
                    seed::derive(cfg.rng_seed, TAG_BYPASS),
                )?;
                let width = hidden.out_dim();
                let bound = 1.0 / (width as f64).sqrt();
                let dist = Uniform::new_inclusive(-bound, bound);
                let mut rng = seed::rng_for(cfg.rng_seed, TAG_BYPASS_OUT);
                let out_weights = (0..width).map(|_| dist.sample(&mut rng)).collect();
                Some(Bypass { hidden, out_weights })
            }
        };

        let params = AnnParams {
            base,
            prediction,
            bias,
            bypass,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn variant(&self) -> Variant {
        if self.bypass.is_some() {
            Variant::WithBypass
        } else {
            Variant::NoBypass
        }
    }

    pub fn n_features(&self) -> usize {
        self.base.in_dim()
    }

    /// Checks the wiring between sub-networks.
    pub fn validate(&self) -> Result<()> {
        for net in [&self.base, &self.prediction, &self.bias] {
            Network::new(net.layers().to_vec())?;
        }
        let z_a = self.base.out_dim();
        if self.prediction.in_dim() != z_a || self.bias.in_dim() != z_a {
            return Err(Error::config(format!(
                "prediction and bias networks must read Z_A of width {z_a}"
            )));
        }
        if self.prediction.out_dim() != 1 || self.bias.out_dim() != 1 {
            return Err(Error::config("prediction and bias networks must end in one unit"));
        }
        let last = |n: &Network| n.layers()[n.depth() - 1].activation();
        if last(&self.prediction) != Activation::Linear || last(&self.bias) != Activation::Linear {
            return Err(Error::config(
                "prediction head and bias output must be linear (sigmoid is applied by the composite)",
            ));
        }
        if let Some(bp) = &self.bypass {
            Network::new(bp.hidden.layers().to_vec())?;
            if bp.hidden.in_dim() != 1 {
                return Err(Error::config("bypass network must take the scalar b"));
            }
            if bp.out_weights.len() != bp.hidden.out_dim() {
                return Err(Error::config("bypass output weights do not match Z_BY width"));
            }
        }
        Ok(())
    }

    pub fn predictor_param_count(&self) -> usize {
        self.base.param_count()
            + self.prediction.param_count()
            + self
                .bypass
                .as_ref()
                .map_or(0, |b| b.hidden.param_count() + b.out_weights.len())
    }

    /// Indexes θ_A, θ_Y, θ_BY hidden, then `W_BY`, in that order.
    pub fn predictor_param_mut(&mut self, mut index: usize) -> Option<&mut f64> {
        for net in [&mut self.base, &mut self.prediction] {
            let c = net.param_count();
            if index < c {
                return net.param_mut(index);
            }
            index -= c;
        }
        let bp = self.bypass.as_mut()?;
        let c = bp.hidden.param_count();
        if index < c {
            return bp.hidden.param_mut(index);
        }
        bp.out_weights.get_mut(index - c)
    }

    fn check_batch(&self, x: &Matrix, b: &[f64]) -> Result<()> {
        if x.cols() != self.n_features() {
            return Err(Error::input(format!(
                "model expects {} features, got {}",
                self.n_features(),
                x.cols()
            )));
        }
        if b.len() != x.rows() {
            return Err(Error::input(format!(
                "{} bias values for {} rows",
                b.len(),
                x.rows()
            )));
        }
        Ok(())
    }

    /// Pre-sigmoid logits and bypass trace.
    fn logits(
        &self,
        z_a: &Matrix,
        b: &[f64],
    ) -> Result<(Vec<f64>, ForwardTrace, Option<(ForwardTrace, Matrix)>)> {
        let (head, pred_trace) = self.prediction.forward(z_a)?;
        let mut logits = head.into_vec();
        let bypass = match &self.bypass {
            None => None,
            Some(bp) => {
                let (z_by, trace) = bp.hidden.forward(&Matrix::column(b))?;
                for (i, l) in logits.iter_mut().enumerate() {
                    *l += z_by
                        .row(i)
                        .iter()
                        .zip(&bp.out_weights)
                        .map(|(z, w)| z * w)
                        .sum::<f64>();
                }
                Some((trace, z_by))
            }
        };
        Ok((logits, pred_trace, bypass))
    }

    fn forward_traced(&self, x: &Matrix, b: &[f64]) -> Result<AnnTrace> {
        self.check_batch(x, b)?;
        let (z_a, base) = self.base.forward(x)?;
        let (logits, prediction, bypass) = self.logits(&z_a, b)?;
        let (b_hat, bias) = self.bias.forward(&z_a)?;
        Ok(AnnTrace {
            base,
            prediction,
            bypass,
            bias,
            y_hat: logits.into_iter().map(sigmoid).collect(),
            b_hat: b_hat.into_vec(),
        })
    }

    pub fn forward(&self, x: &Matrix, b: &[f64]) -> Result<AnnPrediction> {
        self.check_batch(x, b)?;
        let z_a = self.base.predict(x)?;
        let y_hat = self.predict_from_za(&z_a, b)?;
        let b_hat = self.bias.predict(&z_a)?.into_vec();
        Ok(AnnPrediction { y_hat, b_hat, z_a })
    }

    fn predict_from_za(&self, z_a: &Matrix, b: &[f64]) -> Result<Vec<f64>> {
        let mut logits = self.prediction.predict(z_a)?.into_vec();
        if let Some(bp) = &self.bypass {
            let z_by = bp.hidden.predict(&Matrix::column(b))?;
            for (i, l) in logits.iter_mut().enumerate() {
                *l += z_by
                    .row(i)
                    .iter()
                    .zip(&bp.out_weights)
                    .map(|(z, w)| z * w)
                    .sum::<f64>();
            }
        }
        Ok(logits.into_iter().map(sigmoid).collect())
    }

    /// Bias network estimate `b̂` for each row.
    pub fn predict_bias(&self, x: &Matrix) -> Result<Vec<f64>> {
        let z_a = self.base.predict(x)?;
        Ok(self.bias.predict(&z_a)?.into_vec())
    }

    /// Noisy-loss value and its gradient with respect to θ_A, θ_Y, θ_BY.
    /// The Cov² gradient is chained through the (unchanged) bias network.
    pub fn noisy_loss_grads(
        &self,
        x: &Matrix,
        y: &[f64],
        b: &[f64],
        lambda: f64,
    ) -> Result<(NoisyLoss, PredictorGrads)> {
        let t = self.forward_traced(x, b)?;
        let loss = losses::noisy_loss(y, &t.y_hat, b, &t.b_hat, lambda)?;

        let dlogit: Vec<f64> = losses::bce_logit_grad(y, &t.y_hat)?
            .into_iter()
            .map(|g| (1.0 - lambda) * g)
            .collect();
        let (prediction, mut dz_a) =
            self.prediction.backward(&t.prediction, &Matrix::column(&dlogit))?;

        let (bypass_hidden, bypass_out) = match (&self.bypass, &t.bypass) {
            (Some(bp), Some((trace, z_by))) => {
                let width = bp.out_weights.len();
                let mut d_out = vec![0.0; width];
                let mut dz_by = Matrix::zeros(dlogit.len(), width);
                for (i, &g) in dlogit.iter().enumerate() {
                    let row = &mut dz_by.data_mut()[i * width..(i + 1) * width];
                    for k in 0..width {
                        d_out[k] += g * z_by.get(i, k);
                        row[k] = g * bp.out_weights[k];
                    }
                }
                let (gh, _) = bp.hidden.backward(trace, &dz_by)?;
                (Some(gh), Some(d_out))
            }
            _ => (None, None),
        };

        if lambda > 0.0 {
            let (_, dz_bias) = self
                .bias
                .backward(&t.bias, &Matrix::column(&loss.grad_b_hat))?;
            dz_a.data_mut()
                .iter_mut()
                .zip(dz_bias.data())
                .for_each(|(a, d)| *a += d);
        }
        let (base, _) = self.base.backward(&t.base, &dz_a)?;

        Ok((
            loss,
            PredictorGrads {
                base,
                prediction,
                bypass_hidden,
                bypass_out,
            },
        ))
    }

    /// Bias-loss value and its gradient with respect to θ_B.
    pub fn bias_loss_grads(&self, x: &Matrix, b: &[f64]) -> Result<(LossValue, NetworkGrads)> {
        self.check_batch(x, b)?;
        let z_a = self.base.predict(x)?;
        let (b_hat, trace) = self.bias.forward(&z_a)?;
        let loss = losses::bias_mse_loss(b, b_hat.data())?;
        let (grads, _) = self.bias.backward(&trace, &Matrix::column(&loss.grad))?;
        Ok((loss, grads))
    }

    fn apply_predictor_step(&mut self, g: &PredictorGrads, lr: f64) -> Result<()> {
        if !g.all_finite() {
            return Err(Error::training("non-finite gradient in noisy-loss update"));
        }
        self.base.sgd_step(&g.base, lr)?;
        self.prediction.sgd_step(&g.prediction, lr)?;
        if let (Some(bp), Some(gh), Some(go)) = (&mut self.bypass, &g.bypass_hidden, &g.bypass_out) {
            bp.hidden.sgd_step(gh, lr)?;
            bp.out_weights
                .iter_mut()
                .zip(go)
                .for_each(|(w, d)| *w -= lr * d);
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>, config: &TrainConfig) -> Result<()> {
        let ckpt = Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: config.clone(),
            params: self.clone(),
        };
        serde_json::to_writer_pretty(BufWriter::new(File::create(path)?), &ckpt)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(AnnParams, TrainConfig)> {
        let ckpt: Checkpoint = serde_json::from_reader(BufReader::new(File::open(path)?))?;
        ckpt.into_parts()
    }
}

pub const CHECKPOINT_FORMAT: &str = "ann-debias-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// On-disk model: JSON, floats printed in shortest round-trip form.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: TrainConfig,
    pub params: AnnParams,
}

impl Checkpoint {
    pub fn into_parts(self) -> Result<(AnnParams, TrainConfig)> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(Error::input(format!("not a checkpoint: format {:?}", self.format)));
        }
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::input(format!(
                "unsupported checkpoint version {}",
                self.version
            )));
        }
        self.params.validate()?;
        Ok((self.params, self.config))
    }
}

pub fn ann_forward(params: &AnnParams, x: &Matrix, b: &[f64]) -> Result<AnnPrediction> {
    params.forward(x, b)
}

/// Noisy-loss update of θ_A, θ_Y and θ_BY; θ_B is read but never written.
/// Returns the loss evaluated before the update.
pub fn noisy_update(
    params: &mut AnnParams,
    x: &Matrix,
    y: &[f64],
    b: &[f64],
    cfg: &TrainConfig,
) -> Result<NoisyLoss> {
    if x.rows() < 2 {
        return Err(Error::input("noisy-loss update needs a minibatch of at least 2 rows"));
    }
    let (noisy, grads) = params.noisy_loss_grads(x, y, b, cfg.lambda)?;
    if !noisy.value.is_finite() {
        return Err(Error::training(format!(
            "non-finite noisy loss (bce {}, cov² {})",
            noisy.bce, noisy.sq_cov
        )));
    }
    params.apply_predictor_step(&grads, cfg.learning_rate)?;
    Ok(noisy)
}

/// Bias-loss update of θ_B only. Returns the loss evaluated before the update.
pub fn bias_update(params: &mut AnnParams, x: &Matrix, b: &[f64], cfg: &TrainConfig) -> Result<LossValue> {
    let (loss, grads) = params.bias_loss_grads(x, b)?;
    if !loss.value.is_finite() {
        return Err(Error::training("non-finite bias loss"));
    }
    params.bias.sgd_step(&grads, cfg.learning_rate)?;
    Ok(loss)
}

/// One alternating update on a minibatch: [`noisy_update`], then
/// [`bias_update`] against the updated base network.
pub fn train_step(
    params: &mut AnnParams,
    x: &Matrix,
    y: &[f64],
    b: &[f64],
    cfg: &TrainConfig,
) -> Result<StepLosses> {
    let noisy = noisy_update(params, x, y, b, cfg)?;
    let bias = bias_update(params, x, b, cfg)?;
    Ok(StepLosses {
        loss_n: noisy.value,
        loss_b: bias.value,
    })
}

/// Splits a permutation into minibatches; a trailing singleton joins the
/// previous batch so every batch has at least two rows.
pub fn minibatches(order: &[usize], size: usize) -> Vec<&[usize]> {
    let mut batches: Vec<&[usize]> = order.chunks(size.max(1)).collect();
    if batches.len() > 1 && batches[batches.len() - 1].len() == 1 {
        let start = (batches.len() - 2) * size;
        batches.pop();
        let last = batches.len() - 1;
        batches[last] = &order[start..];
    }
    batches
}

fn check_trainable(dataset: &Dataset, params: &AnnParams, context: &str) -> Result<()> {
    if dataset.len() < 2 {
        return Err(Error::input(format!("{context}: dataset needs at least 2 rows")));
    }
    dataset.require_b(context)?;
    if dataset.n_features() != params.n_features() {
        return Err(Error::input(format!(
            "{context}: dataset has {} features, model expects {}",
            dataset.n_features(),
            params.n_features()
        )));
    }
    Ok(())
}

pub fn train(params: &mut AnnParams, dataset: &Dataset, cfg: &TrainConfig) -> Result<TrainingLog> {
    cfg.validate()?;
    check_trainable(dataset, params, "train")?;
    let mut rng = seed::rng_for(cfg.rng_seed, TAG_SHUFFLE);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut log = TrainingLog::default();
    let mut global_batch = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let batches = minibatches(&order, cfg.minibatch_size);
        let (mut sum_n, mut sum_b) = (0.0, 0.0);
        for idx in &batches {
            let batch = dataset.subset(idx);
            let losses = train_step(
                params,
                batch.x(),
                batch.y(),
                batch.require_b("train")?,
                cfg,
            )
            .map_err(|e| e.at_batch(global_batch))?;
            sum_n += losses.loss_n;
            sum_b += losses.loss_b;
            global_batch += 1;
        }
        let k = batches.len() as f64;
        log.epochs.push(EpochLog {
            epoch,
            mean_loss_n: sum_n / k,
            mean_loss_b: sum_b / k,
        });
    }
    Ok(log)
}

/// Dataset-level `MSE(b, b̂)` of the current bias network.
pub fn bias_mse(params: &AnnParams, x: &Matrix, b: &[f64]) -> Result<f64> {
    let b_hat = params.predict_bias(x)?;
    Ok(losses::bias_mse_loss(b, &b_hat)?.value)
}

/// Trains only the bias network for `cfg.probe_epochs` and returns the
/// resulting dataset-level MSE: how much of `b` is still recoverable from `Z_A`.
pub fn probe_bias(params: &mut AnnParams, dataset: &Dataset, cfg: &TrainConfig) -> Result<f64> {
    cfg.validate()?;
    check_trainable(dataset, params, "probe_bias")?;
    let b = dataset.require_b("probe_bias")?;
    let mut rng = seed::rng_for(cfg.rng_seed, TAG_PROBE);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut global_batch = 0;
    for _ in 0..cfg.probe_epochs {
        order.shuffle(&mut rng);
        for idx in minibatches(&order, cfg.minibatch_size) {
            let batch = dataset.subset(idx);
            bias_update(params, batch.x(), batch.require_b("probe_bias")?, cfg)
                .map_err(|e| e.at_batch(global_batch))?;
            global_batch += 1;
        }
    }
    bias_mse(params, dataset.x(), b)
}

/// Click predictions with the bias network ignored.
pub fn infer(params: &AnnParams, x: &Matrix, policy: BPolicy<'_>) -> Result<Vec<f64>> {
    let fixed;
    let b = match policy {
        BPolicy::Given(b) => b,
        BPolicy::Position1Ctr(None) => {
            return Err(Error::config("position-1 CTR policy requires a CTR value"));
        }
        BPolicy::Position1Ctr(Some(ctr)) => {
            if !ctr.is_finite() {
                return Err(Error::config(format!("position-1 CTR must be finite, got {ctr}")));
            }
            fixed = vec![ctr; x.rows()];
            &fixed
        }
    };
    params.check_batch(x, b)?;
    let z_a = params.base.predict(x)?;
    params.predict_from_za(&z_a, b)
}

/// Mean over rows of `|ŷ(b = b1) − ŷ(b = b2)|`. Exactly 0 for the
/// no-bypass variant.
pub fn bypass_prediction_diff(params: &AnnParams, x: &Matrix, b1: f64, b2: f64) -> Result<BypassDiff> {
    let variant = params.variant();
    if variant == Variant::NoBypass || x.rows() == 0 {
        return Ok(BypassDiff {
            mean_abs_diff: 0.0,
            variant,
        });
    }
    let y1 = infer(params, x, BPolicy::Position1Ctr(Some(b1)))?;
    let y2 = infer(params, x, BPolicy::Position1Ctr(Some(b2)))?;
    let total: f64 = y1.iter().zip(&y2).map(|(a, b)| (a - b).abs()).sum();
    Ok(BypassDiff {
        mean_abs_diff: total / x.rows() as f64,
        variant,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn cfg(variant: Variant, lambda: f64) -> TrainConfig {
        TrainConfig {
            lambda,
            variant,
            rng_seed: 3,
            ..TrainConfig::default()
        }
    }

    fn batch(n: usize, d: usize, seed: u64) -> (Matrix, Vec<f64>, Vec<f64>) {
        let mut rng = seed::rng(seed);
        let x = Matrix::from_vec(n, d, (0..n * d).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
        let y = (0..n).map(|i| (i % 2) as f64).collect();
        let b = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        (x, y, b)
    }

    fn zero_out(p: &mut AnnParams) {
        for net in [&mut p.base, &mut p.prediction, &mut p.bias] {
            for l in net.layers_mut() {
                l.weights_mut().iter_mut().for_each(|w| *w = 0.0);
            }
        }
        if let Some(bp) = &mut p.bypass {
            for l in bp.hidden.layers_mut() {
                l.weights_mut().iter_mut().for_each(|w| *w = 0.0);
            }
            bp.out_weights.iter_mut().for_each(|w| *w = 0.0);
        }
    }

    #[test]
    fn init_wiring() {
        let p = AnnParams::init(10, &cfg(Variant::WithBypass, 0.0)).unwrap();
        assert_eq!(p.base.in_dim(), 10);
        assert_eq!(p.base.out_dim(), 10);
        assert_eq!(p.prediction.depth(), 2);
        assert_eq!(p.bias.depth(), 2);
        let bp = p.bypass.as_ref().unwrap();
        assert_eq!(bp.hidden.in_dim(), 1);
        assert_eq!(bp.out_weights.len(), 1);
        let q = AnnParams::init(10, &cfg(Variant::NoBypass, 0.0)).unwrap();
        assert!(q.bypass.is_none());
        // shared sub-networks are identical across variants for the same seed
        assert_eq!(p.base, q.base);
        assert_eq!(p.bias, q.bias);
    }

    #[test]
    fn large_config_is_expressible() {
        let c = TrainConfig::large();
        let p = AnnParams::init(20, &c).unwrap();
        assert_eq!(p.base.layers()[0].out_dim(), 300);
        assert_eq!(p.base.out_dim(), 150);
        assert_eq!(p.prediction.layers()[0].out_dim(), 300);
        assert_eq!(c.minibatch_size, 3072);
        assert_eq!(c.epochs, 15);
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::default();
        c.lambda = 1.2;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = TrainConfig::default();
        c.minibatch_size = 1;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.architecture.base_hidden.clear();
        assert!(c.validate().is_err());
    }

    #[test]
    fn zero_weights_forward() {
        let mut p = AnnParams::init(4, &cfg(Variant::WithBypass, 0.0)).unwrap();
        zero_out(&mut p);
        let (x, _, b) = batch(5, 4, 1);
        let out = ann_forward(&p, &x, &b).unwrap();
        assert!(out.y_hat.iter().all(|&v| v == 0.5));
        assert!(out.b_hat.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bypass_structural_dependence() {
        let (x, _, b) = batch(6, 4, 2);
        let b2: Vec<f64> = b.iter().map(|v| 1.0 - v).collect();
        let p = AnnParams::init(4, &cfg(Variant::WithBypass, 0.0)).unwrap();
        assert_ne!(ann_forward(&p, &x, &b).unwrap().y_hat, ann_forward(&p, &x, &b2).unwrap().y_hat);
        let q = AnnParams::init(4, &cfg(Variant::NoBypass, 0.0)).unwrap();
        assert_eq!(ann_forward(&q, &x, &b).unwrap().y_hat, ann_forward(&q, &x, &b2).unwrap().y_hat);
    }

    #[test]
    fn forward_matches_hand_rolled_computation() {
        let p = AnnParams::init(3, &cfg(Variant::WithBypass, 0.0)).unwrap();
        let (x, _, b) = batch(4, 3, 5);
        let out = ann_forward(&p, &x, &b).unwrap();

        fn dense(layer: &crate::nncore::DenseLayer, v: &[f64]) -> Vec<f64> {
            (0..layer.out_dim())
                .map(|o| {
                    let mut z = layer.biases()[o];
                    for j in 0..layer.in_dim() {
                        z += layer.weights()[o * layer.in_dim() + j] * v[j];
                    }
                    layer.activation().apply(z)
                })
                .collect()
        }
        for i in 0..4 {
            let za = dense(&p.base.layers()[0], x.row(i));
            let zy = dense(&p.prediction.layers()[0], &za);
            let head = dense(&p.prediction.layers()[1], &zy)[0];
            let bp = p.bypass.as_ref().unwrap();
            let zby = dense(&bp.hidden.layers()[0], &[b[i]]);
            let logit = head + zby[0] * bp.out_weights[0];
            let y = 1.0 / (1.0 + (-logit).exp());
            assert!((out.y_hat[i] - y).abs() < 1e-14);
            let bh = dense(&p.bias.layers()[1], &dense(&p.bias.layers()[0], &za))[0];
            assert!((out.b_hat[i] - bh).abs() < 1e-14);
        }
    }

    #[test]
    fn freeze_contract() {
        let c = cfg(Variant::WithBypass, 0.7);
        let mut p = AnnParams::init(4, &c).unwrap();
        let (x, y, b) = batch(8, 4, 3);
        let before = p.clone();
        let (_, g) = p.noisy_loss_grads(&x, &y, &b, c.lambda).unwrap();
        p.apply_predictor_step(&g, c.learning_rate).unwrap();
        assert_eq!(p.bias, before.bias);
        assert_ne!(p.base, before.base);
        let mid = p.clone();
        let (_, gb) = p.bias_loss_grads(&x, &b).unwrap();
        p.bias.sgd_step(&gb, c.learning_rate).unwrap();
        assert_eq!(p.base, mid.base);
        assert_eq!(p.prediction, mid.prediction);
        assert_eq!(p.bypass, mid.bypass);
        assert_ne!(p.bias, mid.bias);

        // train_step performs exactly this sequence
        let mut q = before.clone();
        train_step(&mut q, &x, &y, &b, &c).unwrap();
        assert_eq!(q, p);
    }

    #[test]
    fn lambda_zero_is_plain_bce() {
        let p = AnnParams::init(4, &cfg(Variant::WithBypass, 0.0)).unwrap();
        let (x, y, b) = batch(8, 4, 4);
        let (loss, g) = p.noisy_loss_grads(&x, &y, &b, 0.0).unwrap();
        let bce = losses::bce_loss(&y, &ann_forward(&p, &x, &b).unwrap().y_hat).unwrap();
        assert_eq!(loss.value, bce.value);
        // Cov² contributes nothing: the bias network's output cannot matter.
        let mut other = p.clone();
        other.bias = AnnParams::init(4, &TrainConfig { rng_seed: 99, ..cfg(Variant::WithBypass, 0.0) })
            .unwrap()
            .bias;
        let (_, g2) = other.noisy_loss_grads(&x, &y, &b, 0.0).unwrap();
        assert_eq!(g, g2);
    }

    #[test]
    fn covariance_gradient_reaches_base() {
        let p = AnnParams::init(4, &cfg(Variant::WithBypass, 1.0)).unwrap();
        let (x, y, b) = batch(16, 4, 6);
        let (_, g) = p.noisy_loss_grads(&x, &y, &b, 1.0).unwrap();
        assert!(g.base.flatten().iter().any(|&v| v != 0.0));
        assert!(g.prediction.flatten().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn train_step_matches_finite_difference_update() {
        let c = TrainConfig {
            learning_rate: 0.05,
            ..cfg(Variant::WithBypass, 0.5)
        };
        let p = AnnParams::init(3, &c).unwrap();
        let (x, y, b) = batch(4, 3, 8);
        let eps = 1e-6;
        let noisy = |q: &AnnParams| {
            let o = ann_forward(q, &x, &b).unwrap();
            losses::noisy_loss(&y, &o.y_hat, &b, &o.b_hat, c.lambda).unwrap().value
        };
        let fd: Vec<f64> = (0..p.predictor_param_count())
            .map(|k| {
                let mut a = p.clone();
                *a.predictor_param_mut(k).unwrap() += eps;
                let mut m = p.clone();
                *m.predictor_param_mut(k).unwrap() -= eps;
                (noisy(&a) - noisy(&m)) / (2.0 * eps)
            })
            .collect();
        let mut stepped = p.clone();
        train_step(&mut stepped, &x, &y, &b, &c).unwrap();
        for (k, g) in fd.iter().enumerate() {
            let before = *p.clone().predictor_param_mut(k).unwrap();
            let after = *stepped.predictor_param_mut(k).unwrap();
            assert!(((after - before) + c.learning_rate * g).abs() < 1e-9, "param {k}");
        }
    }

    #[test]
    fn minibatch_split_merges_singletons() {
        let order: Vec<usize> = (0..201).collect();
        let b = minibatches(&order, 100);
        assert_eq!(b.iter().map(|s| s.len()).collect::<Vec<_>>(), vec![100, 101]);
        let order: Vec<usize> = (0..202).collect();
        assert_eq!(minibatches(&order, 100).len(), 3);
        let order: Vec<usize> = (0..5).collect();
        assert_eq!(minibatches(&order, 100), vec![&order[..]]);
    }

    #[test]
    fn infer_policies() {
        let p = AnnParams::init(4, &cfg(Variant::WithBypass, 0.0)).unwrap();
        let (x, _, b) = batch(6, 4, 9);
        assert_eq!(
            infer(&p, &x, BPolicy::Given(&b)).unwrap(),
            ann_forward(&p, &x, &b).unwrap().y_hat
        );
        assert!(matches!(infer(&p, &x, BPolicy::Position1Ctr(None)), Err(Error::Config(_))));
        let q = AnnParams::init(4, &cfg(Variant::NoBypass, 0.0)).unwrap();
        assert_eq!(
            infer(&q, &x, BPolicy::Given(&b)).unwrap(),
            infer(&q, &x, BPolicy::Position1Ctr(Some(0.464))).unwrap()
        );
    }

    #[test]
    fn bypass_diff_edge_cases() {
        let (x, _, _) = batch(6, 4, 10);
        let mut p = AnnParams::init(4, &cfg(Variant::WithBypass, 0.0)).unwrap();
        assert_eq!(bypass_prediction_diff(&p, &x, 0.4, 0.4).unwrap().mean_abs_diff, 0.0);
        assert!(bypass_prediction_diff(&p, &x, 0.464, 0.414).unwrap().mean_abs_diff > 0.0);
        p.bypass.as_mut().unwrap().out_weights[0] = 0.0;
        assert_eq!(bypass_prediction_diff(&p, &x, 0.464, 0.414).unwrap().mean_abs_diff, 0.0);
        let q = AnnParams::init(4, &cfg(Variant::NoBypass, 0.0)).unwrap();
        let d = bypass_prediction_diff(&q, &x, 0.464, 0.414).unwrap();
        assert_eq!(d.mean_abs_diff, 0.0);
        assert_eq!(d.variant, Variant::NoBypass);
    }
}
