//! The representation network (view generator, cascaded encoder, decoder and
//! surrogate classifier) and its alternating training loop.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;

use crate::cdta::{CdtaBypass, CdtaLayer, CdtaTrace, FusedRepresentation};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::mere::{mere_bypass, EndogenousViews, MereLayer};
use crate::numerics::{
    adam_step, l2_penalty, AdamConfig, AdamState, BatchNormState, Mode, Module, Param, ParamKind,
    Tape, Tensor, Var,
};
use crate::rng::{self, Rng};
use crate::scalar::Scalar;

#[derive(Clone, Debug)]
enum Encoder<T> {
    Cascaded(CdtaLayer<T>),
    Pooled(CdtaBypass<T>),
}

/// Parameter groups touched by the two alternating objectives.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Group {
    Encoder,
    Decoder,
    Surrogate,
}

/// Which objective a training step minimizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    /// `l_mse + alpha * l_reg` over encoder and decoder.
    Reconstruction,
    /// `beta * l_pred` over encoder and surrogate.
    Prediction,
}

impl Phase {
    /// Steps are numbered from 1; odd steps reconstruct.
    pub fn of_step(step: u64) -> Self {
        if step % 2 == 1 {
            Phase::Reconstruction
        } else {
            Phase::Prediction
        }
    }

    fn groups(self) -> [Group; 2] {
        match self {
            Phase::Reconstruction => [Group::Encoder, Group::Decoder],
            Phase::Prediction => [Group::Encoder, Group::Surrogate],
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub l_mse: f64,
    pub l_reg: f64,
    pub l_pred: f64,
    pub total: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<LossBreakdown>,
    pub valid_accuracy: Vec<f64>,
    /// Breakdown of every mini-batch step, in order.
    pub steps: Vec<LossBreakdown>,
}

pub struct ForwardOutput {
    pub views: EndogenousViews,
    /// Present unless the cascaded encoder is ablated.
    pub cdta: Option<CdtaTrace>,
    pub fused: FusedRepresentation,
    pub logits: Var,
    pub recon: Var,
}

/// Tape nodes of the composite loss.
pub struct LossVars {
    pub l_mse: Var,
    pub l_reg: Var,
    pub l_pred: Var,
    pub total: Var,
}

/// A labelled set of windows, `x[N, D_in, S]`.
#[derive(Clone, Debug)]
pub struct Samples<T> {
    pub x: Tensor<T>,
    pub labels: Vec<usize>,
}

impl<T: Scalar> Samples<T> {
    pub fn new(x: Tensor<T>, labels: Vec<usize>) -> Result<Self> {
        if x.ndim() != 3 || x.shape()[0] != labels.len() {
            return Err(Error::dim(format!(
                "samples: x {:?} with {} labels",
                x.shape(),
                labels.len()
            )));
        }
        Ok(Self { x, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Rows `idx` of `x` as a new `[idx.len(), D_in, S]` tensor.
    pub fn gather(&self, idx: &[usize]) -> Result<Tensor<T>> {
        gather_rows(&self.x, idx)
    }
}

fn gather_rows<T: Scalar>(x: &Tensor<T>, idx: &[usize]) -> Result<Tensor<T>> {
    let shape = x.shape();
    let row: usize = shape[1..].iter().product();
    let mut data = Vec::with_capacity(idx.len() * row);
    for &i in idx {
        data.extend_from_slice(&x.data()[i * row..(i + 1) * row]);
    }
    let mut out_shape = shape.to_vec();
    out_shape[0] = idx.len();
    Tensor::new(&out_shape, data)
}

#[derive(Clone, Debug)]
pub struct Model<T> {
    config: ModelConfig,
    mere: Option<MereLayer<T>>,
    encoder: Encoder<T>,
    decoder_w: Param<T>,
    decoder_b: Param<T>,
    head_w: Param<T>,
    head_b: Param<T>,
}

/// Builds the network for `config`, or `None` for the `no_both` ablation,
/// which has no network at all.
pub fn build_network<T: Scalar>(config: &ModelConfig) -> Result<Option<Model<T>>> {
    if config.ablation.uses_network() {
        Model::new(config).map(Some)
    } else {
        config.validate()?;
        Ok(None)
    }
}

impl<T: Scalar> Model<T> {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        if !config.ablation.uses_network() {
            return Err(Error::config("ablation", "no_both has no network to build"));
        }
        let mut rng = rng::stream(config.seed, "init");
        let mere = if config.ablation.uses_mere() {
            Some(MereLayer::init_with(config, &mut rng)?)
        } else {
            None
        };
        let (n_views, view_dim) = match &mere {
            Some(m) => (m.n_views(), m.view_dim()),
            None => (1, config.d_in),
        };
        let encoder = if config.ablation.uses_cdta() {
            Encoder::Cascaded(CdtaLayer::init_with(config, view_dim, n_views, &mut rng)?)
        } else {
            Encoder::Pooled(CdtaBypass::init_with(config, view_dim, n_views, &mut rng))
        };
        let (dp, out, k) = (config.d_proj, config.d_in * config.seq_len, config.n_classes);
        let bound = (1.0 / dp as f64).sqrt();
        let decoder_w = Param::uniform("decoder.weight", ParamKind::Weight, &[dp, out], bound, &mut rng);
        let decoder_b = Param::zeros("decoder.bias", ParamKind::Bias, &[out]);
        let head_w = Param::uniform("surrogate.weight", ParamKind::Weight, &[dp, k], bound, &mut rng);
        let head_b = Param::zeros("surrogate.bias", ParamKind::Bias, &[k]);
        Ok(Self {
            config: config.clone(),
            mere,
            encoder,
            decoder_w,
            decoder_b,
            head_w,
            head_b,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn mere(&self) -> Option<&MereLayer<T>> {
        self.mere.as_ref()
    }

    pub fn mere_mut(&mut self) -> Option<&mut MereLayer<T>> {
        self.mere.as_mut()
    }

    pub fn cdta(&self) -> Option<&CdtaLayer<T>> {
        match &self.encoder {
            Encoder::Cascaded(c) => Some(c),
            Encoder::Pooled(_) => None,
        }
    }

    /// Batch-norm states in declaration order (empty without the view generator).
    pub fn norm_states(&self) -> &[BatchNormState<T>] {
        self.mere.as_ref().map_or(&[], |m| m.norms())
    }

    pub fn norm_states_mut(&mut self) -> &mut [BatchNormState<T>] {
        match self.mere.as_mut() {
            Some(m) => m.norms_mut(),
            None => &mut [],
        }
    }

    pub fn visit_group<'a>(&'a self, group: Group, f: &mut dyn FnMut(&'a Param<T>)) {
        match group {
            Group::Encoder => {
                if let Some(m) = &self.mere {
                    m.visit_params(f);
                }
                match &self.encoder {
                    Encoder::Cascaded(c) => c.visit_params(f),
                    Encoder::Pooled(c) => c.visit_params(f),
                }
            }
            Group::Decoder => {
                f(&self.decoder_w);
                f(&self.decoder_b);
            }
            Group::Surrogate => {
                f(&self.head_w);
                f(&self.head_b);
            }
        }
    }

    pub fn visit_group_mut(&mut self, group: Group, f: &mut dyn FnMut(&mut Param<T>)) {
        match group {
            Group::Encoder => {
                if let Some(m) = &mut self.mere {
                    m.visit_params_mut(f);
                }
                match &mut self.encoder {
                    Encoder::Cascaded(c) => c.visit_params_mut(f),
                    Encoder::Pooled(c) => c.visit_params_mut(f),
                }
            }
            Group::Decoder => {
                f(&mut self.decoder_w);
                f(&mut self.decoder_b);
            }
            Group::Surrogate => {
                f(&mut self.head_w);
                f(&mut self.head_b);
            }
        }
    }

    /// `x[B, D_in, S]` to views, fused representation, logits and reconstruction.
    pub fn forward(&mut self, tape: &mut Tape<T>, x: Var, mode: Mode) -> Result<ForwardOutput> {
        let shape = tape.shape(x).to_vec();
        let c = &self.config;
        if shape.len() != 3 || shape[1] != c.d_in || shape[2] != c.seq_len {
            return Err(Error::dim(format!(
                "model expects [B, {}, {}], got {shape:?}",
                c.d_in, c.seq_len
            )));
        }
        let views = match &mut self.mere {
            Some(m) => m.forward(tape, x, mode)?,
            None => mere_bypass(tape, x)?,
        };
        let (cdta, fused) = match &self.encoder {
            Encoder::Cascaded(layer) => {
                let trace = layer.forward(tape, views)?;
                let fused = trace.fused;
                (Some(trace), fused)
            }
            Encoder::Pooled(layer) => (None, layer.forward(tape, views)?),
        };
        let (hw, hb) = (tape.param(&self.head_w)?, tape.param(&self.head_b)?);
        let logits = tape.linear(fused.z, hw, hb)?;
        let (dw, db) = (tape.param(&self.decoder_w)?, tape.param(&self.decoder_b)?);
        let flat = tape.linear(fused.z, dw, db)?;
        let recon = tape.reshape(flat, &shape)?;
        Ok(ForwardOutput {
            views,
            cdta,
            fused,
            logits,
            recon,
        })
    }

    /// Records the composite loss. `mse_weight` scales the reconstruction term
    /// inside `total` (1 in normal use).
    pub fn loss_vars(
        &mut self,
        tape: &mut Tape<T>,
        x: Var,
        labels: &[usize],
        mode: Mode,
        mse_weight: f64,
    ) -> Result<(ForwardOutput, LossVars)> {
        if let Some(&bad) = labels.iter().find(|&&l| l >= self.config.n_classes) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} out of range for {} classes",
                self.config.n_classes
            )));
        }
        let out = self.forward(tape, x, mode)?;
        let l_mse = tape.mse(out.recon, x)?;
        let l_reg = l2_penalty(tape, &*self)?;
        let l_pred = tape.softmax_cross_entropy(out.logits, labels)?;
        let a = tape.scale(l_mse, T::lit(mse_weight))?;
        let b = tape.scale(l_reg, T::lit(self.config.alpha))?;
        let c = tape.scale(l_pred, T::lit(self.config.beta))?;
        let ab = tape.add(a, b)?;
        let total = tape.add(ab, c)?;
        Ok((
            out,
            LossVars {
                l_mse,
                l_reg,
                l_pred,
                total,
            },
        ))
    }

    /// Loss breakdown on `x`; train mode updates running statistics.
    pub fn loss(&mut self, x: &Tensor<T>, labels: &[usize], mode: Mode) -> Result<LossBreakdown> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone())?;
        let (_, vars) = self.loss_vars(&mut tape, xv, labels, mode, 1.0)?;
        Ok(read_breakdown(&tape, &vars))
    }

    /// Gradients of one phase objective with respect to that phase's
    /// parameters, keyed by parameter name. Train mode, so running statistics
    /// are updated exactly as in a training step.
    pub fn phase_gradients(
        &mut self,
        x: &Tensor<T>,
        labels: &[usize],
        phase: Phase,
        mse_weight: f64,
    ) -> Result<(LossBreakdown, BTreeMap<String, Vec<T>>)> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone())?;
        let (_, vars) = self.loss_vars(&mut tape, xv, labels, Mode::Train, mse_weight)?;
        let breakdown = read_breakdown(&tape, &vars);
        let objective = match phase {
            Phase::Reconstruction => {
                let m = tape.scale(vars.l_mse, T::lit(mse_weight))?;
                let r = tape.scale(vars.l_reg, T::lit(self.config.alpha))?;
                tape.add(m, r)?
            }
            Phase::Prediction => tape.scale(vars.l_pred, T::lit(self.config.beta))?,
        };
        tape.backward(objective)?;
        let mut grads = BTreeMap::new();
        for group in phase.groups() {
            self.visit_group(group, &mut |p| {
                let g = tape
                    .param_grad(p.id())
                    .map_or_else(|| vec![T::zero(); p.len()], <[T]>::to_vec);
                grads.insert(p.name().to_string(), g);
            });
        }
        Ok((breakdown, grads))
    }

    /// Fused representation `Z[N, D_proj]` in eval mode, computed in chunks.
    pub fn represent(&mut self, x: &Tensor<T>) -> Result<Tensor<f64>> {
        self.eval_map(x, |tape, out| tape.value(out.fused.z).to_f64_vec())
            .and_then(|(rows, data)| Tensor::new(&[rows, self.config.d_proj], data))
    }

    /// Surrogate-head class predictions in eval mode.
    pub fn predict_classes(&mut self, x: &Tensor<T>) -> Result<Vec<usize>> {
        let k = self.config.n_classes;
        let (_, logits) = self.eval_map(x, |tape, out| tape.value(out.logits).to_f64_vec())?;
        Ok(logits.chunks(k).map(crate::gbdt::argmax).collect())
    }

    fn eval_map(
        &mut self,
        x: &Tensor<T>,
        f: impl Fn(&Tape<T>, &ForwardOutput) -> Vec<f64>,
    ) -> Result<(usize, Vec<f64>)> {
        let n = x.shape()[0];
        let chunk = self.config.batch_size.max(1);
        let mut data = Vec::new();
        for start in (0..n).step_by(chunk) {
            let idx: Vec<usize> = (start..(start + chunk).min(n)).collect();
            let mut tape = Tape::new();
            let xv = tape.constant(gather_rows(x, &idx)?)?;
            let out = self.forward(&mut tape, xv, Mode::Eval)?;
            data.extend(f(&tape, &out));
        }
        Ok((n, data))
    }
}

fn read_breakdown<T: Scalar>(tape: &Tape<T>, v: &LossVars) -> LossBreakdown {
    LossBreakdown {
        l_mse: tape.value(v.l_mse).item().as_f64(),
        l_reg: tape.value(v.l_reg).item().as_f64(),
        l_pred: tape.value(v.l_pred).item().as_f64(),
        total: tape.value(v.total).item().as_f64(),
    }
}

impl<T: Scalar> Module<T> for Model<T> {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        for g in [Group::Encoder, Group::Decoder, Group::Surrogate] {
            self.visit_group(g, f);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        for g in [Group::Encoder, Group::Decoder, Group::Surrogate] {
            self.visit_group_mut(g, f);
        }
    }
}

/// Adam moments per parameter name, shared by both phases.
#[derive(Clone, Debug)]
pub struct Optimizer<T> {
    config: AdamConfig<T>,
    states: BTreeMap<String, AdamState<T>>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(learning_rate: f64) -> Result<Self> {
        let config = AdamConfig::new(T::lit(learning_rate));
        config.validate()?;
        Ok(Self {
            config,
            states: BTreeMap::new(),
        })
    }

    pub fn state(&self, name: &str) -> Option<&AdamState<T>> {
        self.states.get(name)
    }

    /// Applies one Adam update to every parameter of `phase` in `model`.
    pub fn step(
        &mut self,
        model: &mut Model<T>,
        phase: Phase,
        grads: &BTreeMap<String, Vec<T>>,
    ) -> Result<()> {
        let mut res = Ok(());
        for group in phase.groups() {
            model.visit_group_mut(group, &mut |p| {
                if res.is_err() {
                    return;
                }
                let Some(g) = grads.get(p.name()) else {
                    return;
                };
                let name = p.name().to_string();
                let state = match self.states.get_mut(&name) {
                    Some(s) => s,
                    None => match AdamState::new(p.len(), self.config) {
                        Ok(s) => self.states.entry(name.clone()).or_insert(s),
                        Err(e) => {
                            res = Err(e);
                            return;
                        }
                    },
                };
                res = adam_step(&name, p.tensor.data_mut(), g, state);
            });
        }
        res
    }
}

fn mean_breakdown(steps: &[LossBreakdown]) -> LossBreakdown {
    let n = steps.len() as f64;
    let mut m = LossBreakdown::default();
    for s in steps {
        m.l_mse += s.l_mse;
        m.l_reg += s.l_reg;
        m.l_pred += s.l_pred;
        m.total += s.total;
    }
    m.l_mse /= n;
    m.l_reg /= n;
    m.l_pred /= n;
    m.total /= n;
    m
}

pub fn accuracy(predicted: &[usize], labels: &[usize]) -> f64 {
    let hits = predicted.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len().max(1) as f64
}

/// Alternating mini-batch training for `config.epochs` epochs. Batch order is
/// reshuffled every epoch from the `shuffle` stream of `config.seed`.
pub fn train_alternating<T: Scalar>(
    model: &mut Model<T>,
    train: &Samples<T>,
    valid: &Samples<T>,
) -> Result<TrainHistory> {
    if train.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    if valid.is_empty() {
        return Err(Error::InvalidArgument("validation set is empty".into()));
    }
    let config = model.config.clone();
    let mut optimizer = Optimizer::new(config.learning_rate)?;
    let mut rng: Rng = rng::stream(config.seed, "shuffle");
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = TrainHistory::default();
    let mut step: u64 = 0;
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_steps = Vec::new();
        for batch in order.chunks(config.batch_size) {
            step += 1;
            let phase = Phase::of_step(step);
            let x = train.gather(batch)?;
            let labels: Vec<usize> = batch.iter().map(|&i| train.labels[i]).collect();
            let context = |e: Error| match e {
                Error::NonFinite(msg) => {
                    Error::NonFinite(format!("epoch {epoch}, step {step}: {msg}"))
                }
                other => other,
            };
            let (breakdown, grads) = model
                .phase_gradients(&x, &labels, phase, 1.0)
                .map_err(context)?;
            if !breakdown.total.is_finite() {
                return Err(Error::NonFinite(format!(
                    "epoch {epoch}, step {step}: loss {breakdown:?}"
                )));
            }
            optimizer.step(model, phase, &grads).map_err(context)?;
            epoch_steps.push(breakdown);
        }
        history.epochs.push(mean_breakdown(&epoch_steps));
        history.steps.extend(epoch_steps);
        let predicted = model.predict_classes(&valid.x)?;
        history.valid_accuracy.push(accuracy(&predicted, &valid.labels));
    }
    Ok(history)
}
