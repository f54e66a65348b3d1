//! Adam training with per-epoch validation and best-checkpoint selection.

mod adam;
mod checkpoint;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::features::FeatureStore;
use crate::model::{parse_value, Batch, Seq2Seq};
use crate::rng;

pub use adam::{adam_step, clip_grad_norm, AdamConfig, AdamState};
pub use checkpoint::{Checkpoint, MAGIC, VERSION};

/// Length-sorted pools span this many batches before being cut into batches.
const POOL_BATCHES: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Text-only data, all-zero visual input.
    Pretrain,
    /// Multimodal data, starting from a pretrained checkpoint.
    Finetune,
    /// Multimodal data from random initialization.
    Scratch,
}

impl Mode {
    pub fn is_multimodal(self) -> bool {
        self != Mode::Pretrain
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Pretrain => "pretrain",
            Mode::Finetune => "finetune",
            Mode::Scratch => "scratch",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(Mode::Pretrain),
            "finetune" => Ok(Mode::Finetune),
            "scratch" => Ok(Mode::Scratch),
            _ => Err(Error::Config(format!(
                "mode must be pretrain, finetune or scratch, got {s:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub max_len: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    pub mode: Mode,
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 40,
            max_epochs: 25,
            max_len: 50,
            adam: AdamConfig::default(),
            seed: 1,
            mode: Mode::Scratch,
            clip_norm: None,
        }
    }
}

impl TrainConfig {
    pub const KEYS: [&'static str; 10] = [
        "batch_size",
        "max_epochs",
        "max_len",
        "lr",
        "beta1",
        "beta2",
        "eps",
        "seed",
        "mode",
        "clip_norm",
    ];

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.max_len == 0 {
            return bad("max_len must be at least 1".into());
        }
        for (name, b) in [("beta1", self.adam.beta1), ("beta2", self.adam.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return bad(format!("{name} must be in (0, 1), got {b}"));
            }
        }
        if !(self.adam.lr >= 0.0 && self.adam.lr.is_finite()) {
            return bad(format!(
                "lr must be a finite non-negative number, got {}",
                self.adam.lr
            ));
        }
        if self.adam.eps.is_nan() || self.adam.eps <= 0.0 {
            return bad(format!("eps must be positive, got {}", self.adam.eps));
        }
        if let Some(c) = self.clip_norm {
            if c.is_nan() || c <= 0.0 {
                return bad(format!("clip_norm must be positive, got {c}"));
            }
        }
        Ok(())
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("batch_size", self.batch_size.to_string()),
            ("max_epochs", self.max_epochs.to_string()),
            ("max_len", self.max_len.to_string()),
            ("lr", self.adam.lr.to_string()),
            ("beta1", self.adam.beta1.to_string()),
            ("beta2", self.adam.beta2.to_string()),
            ("eps", self.adam.eps.to_string()),
            ("seed", self.seed.to_string()),
            ("mode", self.mode.to_string()),
            (
                "clip_norm",
                self.clip_norm
                    .map_or_else(|| "none".to_string(), |c| c.to_string()),
            ),
        ]
    }

    /// Sets one field by name. Returns `Ok(false)` for keys this type does not own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "max_epochs" => self.max_epochs = parse_value(key, value)?,
            "max_len" => self.max_len = parse_value(key, value)?,
            "lr" => self.adam.lr = parse_value(key, value)?,
            "beta1" => self.adam.beta1 = parse_value(key, value)?,
            "beta2" => self.adam.beta2 = parse_value(key, value)?,
            "eps" => self.adam.eps = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "mode" => self.mode = value.trim().parse()?,
            "clip_norm" => {
                self.clip_norm = match value.trim() {
                    "none" | "" => None,
                    v => Some(parse_value(key, v)?),
                }
            }
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// One id-mapped training pair. `feature_id` keys the visual features in
/// multimodal modes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub src: Vec<usize>,
    pub tgt: Vec<usize>,
    pub feature_id: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_ppl: f64,
    pub time_s: f64,
}

impl fmt::Display for EpochLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "epoch={} train_loss={:.6} valid_ppl={:.6} time_s={:.3}",
            self.epoch, self.train_loss, self.valid_ppl, self.time_s
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Checkpoint of the epoch with the lowest validation perplexity.
    pub best: Checkpoint,
    /// Parameters after the final epoch.
    pub last: Seq2Seq<f32>,
    pub log: Vec<EpochLog>,
    /// Training pairs dropped for exceeding `max_len`.
    pub dropped: usize,
}

fn batch_of(examples: &[&Example], features: Option<&FeatureStore>) -> Result<Batch> {
    let visual = match features {
        None => None,
        Some(store) => Some(
            examples
                .iter()
                .map(|e| store.get(feature_id(e)?))
                .collect::<Result<Vec<_>>>()?,
        ),
    };
    Ok(Batch {
        src: examples.iter().map(|e| e.src.clone()).collect(),
        tgt: examples.iter().map(|e| e.tgt.clone()).collect(),
        visual,
    })
}

fn feature_id(e: &Example) -> Result<&str> {
    e.feature_id
        .as_deref()
        .ok_or_else(|| Error::MissingFeature("<example without a feature id>".into()))
}

fn check_features(model: &Seq2Seq<f32>, data: &[Example], store: &FeatureStore) -> Result<()> {
    let cfg = model.config();
    if store.regions() != cfg.visual_regions || store.dim() != cfg.visual_dim {
        return Err(Error::shape(
            "features",
            format!(
                "store holds {}x{} matrices, model expects {}x{}",
                store.regions(),
                store.dim(),
                cfg.visual_regions,
                cfg.visual_dim
            ),
        ));
    }
    for e in data {
        let id = feature_id(e)?;
        if !store.contains(id) {
            return Err(Error::MissingFeature(id.to_string()));
        }
    }
    Ok(())
}

/// Perplexity `exp(mean token cross-entropy)` in eval mode.
pub fn perplexity(
    model: &Seq2Seq<f32>,
    data: &[Example],
    features: Option<&FeatureStore>,
    batch_size: usize,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Empty("evaluation data"));
    }
    let refs: Vec<&Example> = data.iter().collect();
    let mut total = 0.0;
    let mut tokens = 0usize;
    let mut rng = rng::seeded(0);
    for chunk in refs.chunks(batch_size.max(1)) {
        let batch = batch_of(chunk, features)?;
        let loss = model.forward_loss(&batch, false, &mut rng)? as f64;
        let n = batch.n_target_tokens();
        total += loss * n as f64;
        tokens += n;
    }
    Ok((total / tokens as f64).exp())
}

/// Shuffles, groups similar lengths inside pools of `POOL_BATCHES` batches,
/// cuts batches and shuffles the batch order.
fn epoch_batches(data: &[Example], batch_size: usize, rng: &mut rng::Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(rng);
    let mut batches = Vec::new();
    for pool in order.chunks_mut(batch_size * POOL_BATCHES) {
        pool.sort_by_key(|&i| (data[i].src.len(), data[i].tgt.len()));
        batches.extend(pool.chunks(batch_size).map(<[usize]>::to_vec));
    }
    batches.shuffle(rng);
    batches
}

/// Feature stores of the training and validation splits. Keys are row-based
/// per split, so each split usually has its own file.
#[derive(Clone, Copy)]
pub struct FeatureSplits<'a> {
    pub train: &'a FeatureStore,
    pub valid: &'a FeatureStore,
}

impl<'a> FeatureSplits<'a> {
    /// One store serving both splits.
    pub fn shared(store: &'a FeatureStore) -> Self {
        FeatureSplits {
            train: store,
            valid: store,
        }
    }
}

/// Trains `model` for `cfg.max_epochs` epochs and returns the checkpoint with
/// the lowest validation perplexity. `features` must be present exactly in
/// the multimodal modes. `on_epoch` observes each epoch's log line as it
/// completes.
pub fn train(
    cfg: &TrainConfig,
    model: Seq2Seq<f32>,
    data: &[Example],
    valid: &[Example],
    features: Option<FeatureSplits<'_>>,
    metadata: BTreeMap<String, String>,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    match (cfg.mode.is_multimodal(), features) {
        (true, None) => {
            return Err(Error::Config(format!(
                "mode {} needs a feature store",
                cfg.mode
            )));
        }
        (false, Some(_)) => {
            return Err(Error::Config(
                "pretrain mode takes no visual features".into(),
            ));
        }
        _ => {}
    }
    let kept: Vec<Example> = data
        .iter()
        .filter(|e| e.src.len() <= cfg.max_len && e.tgt.len() <= cfg.max_len)
        .cloned()
        .collect();
    let dropped = data.len() - kept.len();
    if kept.is_empty() {
        return Err(Error::Empty("training data"));
    }
    if valid.is_empty() {
        return Err(Error::Empty("validation data"));
    }
    if let Some(f) = features {
        check_features(&model, &kept, f.train)?;
        check_features(&model, valid, f.valid)?;
    }
    let (train_store, valid_store) = (features.map(|f| f.train), features.map(|f| f.valid));

    let mut model = model;
    let mut state = AdamState::new(model.params());
    let mut shuffle_rng = rng::stream(cfg.seed, rng::streams::SHUFFLE);
    let mut dropout_rng = rng::stream(cfg.seed, rng::streams::DROPOUT);
    let mut log = Vec::with_capacity(cfg.max_epochs);
    let mut best: Option<Checkpoint> = None;

    for epoch in 1..=cfg.max_epochs {
        let started = Instant::now();
        let mut total = 0.0;
        let mut tokens = 0usize;
        for idx in epoch_batches(&kept, cfg.batch_size, &mut shuffle_rng) {
            let members: Vec<&Example> = idx.iter().map(|&i| &kept[i]).collect();
            let batch = batch_of(&members, train_store)?;
            let (loss, mut grads) = model.loss_and_grads(&batch, true, &mut dropout_rng)?;
            if let Some(max) = cfg.clip_norm {
                clip_grad_norm(&mut grads, max);
            }
            adam_step(model.params_mut(), &grads, &mut state, &cfg.adam)?;
            let n = batch.n_target_tokens();
            total += loss as f64 * n as f64;
            tokens += n;
        }
        let valid_ppl = perplexity(&model, valid, valid_store, cfg.batch_size)?;
        let entry = EpochLog {
            epoch,
            train_loss: total / tokens as f64,
            valid_ppl,
            time_s: started.elapsed().as_secs_f64(),
        };
        on_epoch(&entry);
        log.push(entry);
        if best.as_ref().is_none_or(|b| valid_ppl < b.valid_ppl) {
            best = Some(Checkpoint {
                model: model.clone(),
                train: cfg.clone(),
                epoch,
                valid_ppl,
                metadata: metadata.clone(),
            });
        }
    }
    let best = match best {
        Some(b) => b,
        None => Checkpoint {
            valid_ppl: perplexity(&model, valid, valid_store, cfg.batch_size)?,
            model: model.clone(),
            train: cfg.clone(),
            epoch: 0,
            metadata,
        },
    };
    Ok(TrainOutcome {
        best,
        last: model,
        log,
        dropped,
    })
}
