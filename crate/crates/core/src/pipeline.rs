//! A fitted end-to-end predictor for one slot: preprocessing, the optional
//! representation network and the tree ensemble, plus its checkpoint format.

use crate::binio::{Reader, Writer};
use crate::config::{Ablation, ExperimentConfig, ModelConfig};
use crate::data::{Preprocessor, RawWindow};
use crate::error::{Error, Result};
use crate::gbdt::{GbdtModel, Prediction};
use crate::model::{train_alternating, Model, Samples, TrainHistory};
use crate::numerics::{Module, Tensor};

#[derive(Clone, Debug)]
pub struct Pipeline {
    /// Model section has `d_in`, `seq_len`, `n_classes` and `seed` resolved.
    pub config: ExperimentConfig,
    pub feature_names: Vec<String>,
    pub preprocessor: Preprocessor,
    pub network: Option<Model<f64>>,
    pub head: GbdtModel,
}

pub struct FitOutcome {
    pub pipeline: Pipeline,
    /// `None` for the variant without a network.
    pub history: Option<TrainHistory>,
}

/// `config.model` with the data-dependent fields filled in. The pool stride
/// is capped at the window length so that the shortest slots stay usable.
pub fn resolve_model_config(
    config: &ModelConfig,
    d_in: usize,
    slot: usize,
    n_classes: usize,
    variant: Ablation,
    seed: u64,
) -> ModelConfig {
    ModelConfig {
        d_in,
        seq_len: slot,
        pool_stride: config.pool_stride.min(slot),
        n_classes,
        ablation: variant,
        seed,
        ..config.clone()
    }
}

fn flatten(x: Tensor<f64>) -> Result<Tensor<f64>> {
    let n = x.shape()[0];
    let width = x.len() / n;
    Tensor::new(&[n, width], x.into_data())
}

impl Pipeline {
    /// Fits on `train` only. The training windows also serve as the
    /// per-epoch monitoring set.
    pub fn fit(
        train: &[&RawWindow],
        feature_names: &[String],
        n_classes: usize,
        variant: Ablation,
        config: &ExperimentConfig,
        seed: u64,
    ) -> Result<FitOutcome> {
        let first = train
            .first()
            .ok_or_else(|| Error::InvalidArgument("no training windows".into()))?;
        let mut config = config.clone();
        config.model = resolve_model_config(&config.model, first.d_in, first.slot, n_classes, variant, seed);
        config.validate()?;
        let preprocessor = Preprocessor::fit(train)?;
        let x = preprocessor.tensor(train)?;
        let labels: Vec<usize> = train.iter().map(|w| w.label).collect();
        let (network, history, features) = if variant.uses_network() {
            let mut model = Model::<f64>::new(&config.model)?;
            let samples = Samples::new(x, labels.clone())?;
            let history = train_alternating(&mut model, &samples, &samples)?;
            let z = model.represent(&samples.x)?;
            (Some(model), Some(history), z)
        } else {
            (None, None, flatten(x)?)
        };
        let head = GbdtModel::fit(&features, &labels, n_classes, &config.gbdt)?;
        Ok(FitOutcome {
            pipeline: Pipeline {
                config,
                feature_names: feature_names.to_vec(),
                preprocessor,
                network,
                head,
            },
            history,
        })
    }

    pub fn slot(&self) -> usize {
        self.config.model.seq_len
    }

    pub fn variant(&self) -> Ablation {
        self.config.model.ablation
    }

    pub fn n_classes(&self) -> usize {
        self.head.n_classes()
    }

    /// Features handed to the tree ensemble for `windows`.
    pub fn head_features(&mut self, windows: &[&RawWindow]) -> Result<Tensor<f64>> {
        if let Some(w) = windows.iter().find(|w| w.slot != self.slot()) {
            return Err(Error::dim(format!(
                "window of {} has {} hours, pipeline expects {}",
                w.patient_id,
                w.slot,
                self.slot()
            )));
        }
        let x = self.preprocessor.tensor(windows)?;
        match &mut self.network {
            Some(net) => net.represent(&x),
            None => flatten(x),
        }
    }

    pub fn predict(&mut self, windows: &[&RawWindow]) -> Result<Prediction> {
        let features = self.head_features(windows)?;
        self.head.predict(&features)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION);
        section(&mut w, b"CONF", |s| s.str(&self.config.to_text()));
        section(&mut w, b"FEAT", |s| {
            s.usize(self.feature_names.len());
            for n in &self.feature_names {
                s.str(n);
            }
        });
        section(&mut w, b"PREP", |s| self.preprocessor.write(s));
        if let Some(net) = &self.network {
            section(&mut w, b"NETW", |s| write_network(s, net));
        }
        section(&mut w, b"GBDT", |s| self.head.write(s));
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let (mut config, mut names, mut prep, mut net, mut head) = (None, None, None, None, None);
        while !r.is_at_end() {
            let tag: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
            let len = r.count(1)?;
            let mut s = Reader::new(r.take(len)?);
            match &tag {
                b"CONF" => config = Some(ExperimentConfig::from_text(&s.str()?)?),
                b"FEAT" => {
                    let n = s.count(8)?;
                    names = Some((0..n).map(|_| s.str()).collect::<Result<Vec<_>>>()?);
                }
                b"PREP" => prep = Some(Preprocessor::read(&mut s)?),
                b"NETW" => {
                    let cfg: &ExperimentConfig = config
                        .as_ref()
                        .ok_or_else(|| Error::Format("network section before config".into()))?;
                    net = Some(read_network(&mut s, &cfg.model)?);
                }
                b"GBDT" => head = Some(GbdtModel::read(&mut s)?),
                other => {
                    return Err(Error::Format(format!(
                        "unknown checkpoint section {:?}",
                        String::from_utf8_lossy(other)
                    )))
                }
            }
            if !s.is_at_end() {
                return Err(Error::Format(format!(
                    "trailing bytes in section {}",
                    String::from_utf8_lossy(&tag)
                )));
            }
        }
        let missing = |what: &str| Error::Format(format!("checkpoint lacks its {what} section"));
        let config = config.ok_or_else(|| missing("config"))?;
        if config.model.ablation.uses_network() && net.is_none() {
            return Err(missing("network"));
        }
        let pipeline = Pipeline {
            feature_names: names.ok_or_else(|| missing("feature"))?,
            preprocessor: prep.ok_or_else(|| missing("preprocessing"))?,
            network: net,
            head: head.ok_or_else(|| missing("tree ensemble"))?,
            config,
        };
        if pipeline.preprocessor.d_in() != pipeline.config.model.d_in
            || pipeline.feature_names.len() != pipeline.config.model.d_in
        {
            return Err(Error::Format("checkpoint sections disagree on feature count".into()));
        }
        Ok(pipeline)
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"MEETCKPT";
const CHECKPOINT_VERSION: u32 = 1;

fn section(w: &mut Writer, tag: &[u8; 4], body: impl FnOnce(&mut Writer)) {
    let mut inner = Writer::new();
    body(&mut inner);
    w.bytes(tag);
    w.usize(inner.buf.len());
    w.bytes(&inner.buf);
}

fn blob(w: &mut Writer, name: &str, values: &[f64]) {
    w.str(name);
    w.usize(values.len() * 8);
    w.f64s(values);
}

/// Parameters in declaration order, then batch-norm running statistics.
fn write_network(w: &mut Writer, net: &Model<f64>) {
    let mut blobs: Vec<(String, Vec<f64>)> = Vec::new();
    net.visit_params(&mut |p| blobs.push((p.name().to_string(), p.tensor.data().to_vec())));
    for (g, s) in net.norm_states().iter().enumerate() {
        blobs.push((format!("mere.view{g}.bn_running_mean"), s.running_mean.clone()));
        blobs.push((format!("mere.view{g}.bn_running_var"), s.running_var.clone()));
    }
    w.usize(blobs.len());
    for (name, values) in &blobs {
        blob(w, name, values);
    }
}

fn read_network(r: &mut Reader, config: &ModelConfig) -> Result<Model<f64>> {
    let mut net = Model::<f64>::new(config)?;
    let n = r.count(16)?;
    let mut blobs = std::collections::BTreeMap::new();
    for _ in 0..n {
        let name = r.str()?;
        let bytes = r.count(1)?;
        if bytes % 8 != 0 {
            return Err(Error::Format(format!("blob {name} is not a whole number of floats")));
        }
        blobs.insert(name, r.f64s(bytes / 8)?);
    }
    let mut res = Ok(());
    net.visit_params_mut(&mut |p| {
        if res.is_err() {
            return;
        }
        match blobs.remove(p.name()) {
            Some(v) if v.len() == p.len() => p.tensor.data_mut().copy_from_slice(&v),
            Some(v) => {
                res = Err(Error::Format(format!(
                    "parameter {} has {} values, expected {}",
                    p.name(),
                    v.len(),
                    p.len()
                )))
            }
            None => res = Err(Error::Format(format!("checkpoint lacks parameter {}", p.name()))),
        }
    });
    res?;
    for (g, s) in net.norm_states_mut().iter_mut().enumerate() {
        let mean = blobs.remove(&format!("mere.view{g}.bn_running_mean"));
        let var = blobs.remove(&format!("mere.view{g}.bn_running_var"));
        match (mean, var) {
            (Some(m), Some(v)) => s.set_running(m, v)?,
            _ => return Err(Error::Format(format!("checkpoint lacks running statistics of view {g}"))),
        }
    }
    if let Some(extra) = blobs.keys().next() {
        return Err(Error::Format(format!("unexpected blob {extra}")));
    }
    Ok(net)
}
