//! Bidirectional GRU encoder with a decoder that attends over both the source
//! annotations and a grid of image-region features.

mod network;
mod params;

use std::fmt;

use crate::autodiff::{Real, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::features::VisualFeatures;
use crate::rng::{self, Rng};

use network::{AttentionKeys, Net};
pub use params::ParamStore;
use params::{AttentionIds, Layout};

pub const INIT_SCALE: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub emb_size: usize,
    pub hidden_size: usize,
    pub n_layers: usize,
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    pub visual_regions: usize,
    pub visual_dim: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            emb_size: 500,
            hidden_size: 500,
            n_layers: 2,
            src_vocab: 4,
            tgt_vocab: 4,
            visual_regions: 49,
            visual_dim: 512,
            dropout: 0.3,
        }
    }
}

impl ModelConfig {
    pub const KEYS: [&'static str; 8] = [
        "emb_size",
        "hidden_size",
        "n_layers",
        "src_vocab",
        "tgt_vocab",
        "visual_regions",
        "visual_dim",
        "dropout",
    ];

    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("emb_size", self.emb_size),
            ("hidden_size", self.hidden_size),
            ("n_layers", self.n_layers),
            ("src_vocab", self.src_vocab),
            ("tgt_vocab", self.tgt_vocab),
            ("visual_regions", self.visual_regions),
            ("visual_dim", self.visual_dim),
        ];
        if let Some((name, _)) = sizes.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout must be in [0, 1), got {}",
                self.dropout
            )));
        }
        Ok(())
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("emb_size", self.emb_size.to_string()),
            ("hidden_size", self.hidden_size.to_string()),
            ("n_layers", self.n_layers.to_string()),
            ("src_vocab", self.src_vocab.to_string()),
            ("tgt_vocab", self.tgt_vocab.to_string()),
            ("visual_regions", self.visual_regions.to_string()),
            ("visual_dim", self.visual_dim.to_string()),
            ("dropout", self.dropout.to_string()),
        ]
    }

    /// Sets one field by name. Returns `Ok(false)` for keys this type does not own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let slot = match key {
            "emb_size" => &mut self.emb_size,
            "hidden_size" => &mut self.hidden_size,
            "n_layers" => &mut self.n_layers,
            "src_vocab" => &mut self.src_vocab,
            "tgt_vocab" => &mut self.tgt_vocab,
            "visual_regions" => &mut self.visual_regions,
            "visual_dim" => &mut self.visual_dim,
            "dropout" => {
                self.dropout = parse_value(key, value)?;
                return Ok(true);
            }
            _ => return Ok(false),
        };
        *slot = parse_value(key, value)?;
        Ok(true)
    }
}

pub(crate) fn parse_value<V: std::str::FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid value for {key}: {value:?}")))
}

/// A training or validation batch of id sequences (without `<s>`/`</s>`).
/// Absent visual features mean the all-zero matrix used for text-only data.
#[derive(Debug, Clone, Default)]
pub struct Batch {
    pub src: Vec<Vec<usize>>,
    pub tgt: Vec<Vec<usize>>,
    pub visual: Option<Vec<VisualFeatures>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }

    /// Number of predicted target positions, `</s>` included.
    pub fn n_target_tokens(&self) -> usize {
        self.tgt.iter().map(|t| t.len() + 1).sum()
    }

    fn visual_tensor<T: Real>(&self, cfg: &ModelConfig) -> Result<Tensor<T>> {
        let (l, d) = (cfg.visual_regions, cfg.visual_dim);
        let Some(feats) = &self.visual else {
            return Ok(Tensor::zeros(&[self.len(), l, d]));
        };
        if feats.len() != self.len() {
            return Err(Error::shape(
                "batch",
                format!("{} examples, {} feature matrices", self.len(), feats.len()),
            ));
        }
        let mut data = Vec::with_capacity(self.len() * l * d);
        for f in feats {
            check_visual(cfg, f)?;
            data.extend(f.data().iter().map(|&v| T::lit(v as f64)));
        }
        Tensor::new(vec![self.len(), l, d], data)
    }
}

fn check_visual(cfg: &ModelConfig, f: &VisualFeatures) -> Result<()> {
    if f.regions() != cfg.visual_regions || f.dim() != cfg.visual_dim {
        return Err(Error::shape(
            "visual_features",
            format!(
                "expected ({}, {}), got ({}, {})",
                cfg.visual_regions,
                cfg.visual_dim,
                f.regions(),
                f.dim()
            ),
        ));
    }
    Ok(())
}

/// Which of the two attention modules to address.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionKind {
    Text,
    Visual,
}

/// Encoder output for one sentence.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderAnnotations<T: Real> {
    /// `(src_len, 2 * hidden)`, forward state then backward state per row.
    pub annotations: Tensor<T>,
    /// Per layer: final forward and final backward state.
    pub finals: Vec<(Vec<T>, Vec<T>)>,
}

/// Recurrent decoder state, one `(1, hidden)` tensor per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderState<T: Real> {
    hidden: Vec<Tensor<T>>,
}

impl<T: Real> DecoderState<T> {
    pub fn layers(&self) -> &[Tensor<T>] {
        &self.hidden
    }

    pub fn is_finite(&self) -> bool {
        self.hidden.iter().all(Tensor::is_finite)
    }
}

/// Per-sentence tensors reused at every decoding step.
#[derive(Debug, Clone)]
pub struct SourceContext<T: Real> {
    annotations: Tensor<T>,
    text_proj: Tensor<T>,
    visual: Tensor<T>,
    visual_proj: Tensor<T>,
    initial: DecoderState<T>,
}

impl<T: Real> SourceContext<T> {
    pub fn initial_state(&self) -> &DecoderState<T> {
        &self.initial
    }

    pub fn src_len(&self) -> usize {
        self.annotations.shape()[1]
    }
}

#[derive(Debug, Clone)]
pub struct StepResult<T: Real> {
    pub logits: Vec<T>,
    pub state: DecoderState<T>,
    pub text_weights: Vec<T>,
    pub visual_weights: Vec<T>,
}

/// The translation network: configuration plus named parameters.
#[derive(Clone)]
pub struct Seq2Seq<T: Real> {
    config: ModelConfig,
    layout: Layout,
    params: ParamStore<T>,
}

impl<T: Real> fmt::Debug for Seq2Seq<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Seq2Seq")
            .field("config", &self.config)
            .field("params", &self.params.len())
            .field("elements", &self.params.total_elements())
            .finish()
    }
}

impl<T: Real> Seq2Seq<T> {
    /// A model with every parameter zero.
    pub fn zeroed(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let (layout, params) = Layout::build(&config);
        Ok(Seq2Seq {
            config,
            layout,
            params,
        })
    }

    /// Uniform(-0.1, 0.1) initialization from the seed's init stream.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut model = Self::zeroed(config)?;
        let mut rng = rng::stream(seed, rng::streams::INIT);
        params::init_uniform(&mut model.params, INIT_SCALE, &mut rng);
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn cast<U: Real>(&self) -> Seq2Seq<U> {
        Seq2Seq {
            config: self.config.clone(),
            layout: self.layout.clone(),
            params: self.params.cast(),
        }
    }

    fn net<'p>(&'p self, bound: &'p [Var]) -> Net<'p> {
        Net {
            cfg: &self.config,
            layout: &self.layout,
            bound,
        }
    }

    /// Records the batch loss on `tape` with every parameter bound as a
    /// gradient-tracking leaf. Returns the loss and the parameter variables.
    pub fn record_loss<'a>(
        &'a self,
        tape: &mut Tape<'a, T>,
        batch: &Batch,
        train: bool,
        rng: &mut Rng,
    ) -> Result<(Var, Vec<Var>)> {
        let bound = self.params.bind(tape, true);
        let visual = tape.constant(batch.visual_tensor(&self.config)?);
        let net = self.net(&bound);
        let loss = network::batch_loss(tape, &net, &batch.src, &batch.tgt, visual, train, rng)?;
        Ok((loss, bound))
    }

    /// Mean token cross-entropy of the batch under teacher forcing.
    pub fn forward_loss(&self, batch: &Batch, train: bool, rng: &mut Rng) -> Result<T> {
        let mut tape = Tape::new();
        let (loss, _) = self.record_loss(&mut tape, batch, train, rng)?;
        Ok(tape.value(loss).data()[0])
    }

    /// Loss and the gradient for every parameter, in parameter order.
    pub fn loss_and_grads(
        &self,
        batch: &Batch,
        train: bool,
        rng: &mut Rng,
    ) -> Result<(T, Vec<Vec<T>>)> {
        let mut tape = Tape::new();
        let (loss, bound) = self.record_loss(&mut tape, batch, train, rng)?;
        tape.backward(loss)?;
        let value = tape.value(loss).data()[0];
        let grads = bound
            .iter()
            .zip(self.params.values())
            .map(|(&v, p)| {
                tape.take_grad(v)
                    .unwrap_or_else(|| vec![T::zero(); p.len()])
            })
            .collect();
        Ok((value, grads))
    }

    /// Runs the encoder on one sentence.
    pub fn encode(&self, src: &[usize]) -> Result<EncoderAnnotations<T>> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let net = self.net(&bound);
        let mut rng = rng::seeded(0);
        let enc = network::encode_batch(&mut tape, &net, &[src.to_vec()], false, &mut rng)?;
        let s = src.len();
        let h2 = 2 * self.config.hidden_size;
        let annotations = tape.value(enc.annotations_bm).reshaped(&[s, h2])?;
        let finals = enc
            .finals
            .iter()
            .map(|&(f, b)| (tape.value(f).data().to_vec(), tape.value(b).data().to_vec()))
            .collect();
        Ok(EncoderAnnotations {
            annotations,
            finals,
        })
    }

    /// Encodes a source sentence and prepares everything the decoder reuses.
    /// `None` visual features stand for the all-zero matrix.
    pub fn prepare(
        &self,
        src: &[usize],
        visual: Option<&VisualFeatures>,
    ) -> Result<SourceContext<T>> {
        let cfg = &self.config;
        let visual = match visual {
            Some(f) => {
                check_visual(cfg, f)?;
                f.to_tensor::<T>()
                    .reshaped(&[1, cfg.visual_regions, cfg.visual_dim])?
            }
            None => Tensor::zeros(&[1, cfg.visual_regions, cfg.visual_dim]),
        };
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let net = self.net(&bound);
        let mut rng = rng::seeded(0);
        let enc = network::encode_batch(&mut tape, &net, &[src.to_vec()], false, &mut rng)?;
        let text = network::prepare_keys(
            &mut tape,
            &net,
            &self.layout.text_attention,
            enc.annotations_bm,
            None,
        )?;
        let vis_var = tape.leaf_ref(&visual, false);
        let vis = network::visual_keys(&mut tape, &net, vis_var)?;
        let hidden = network::init_decoder(&mut tape, &net, &enc.finals)?;
        let initial = DecoderState {
            hidden: hidden.iter().map(|&h| tape.value(h).clone()).collect(),
        };
        let annotations = tape.value(text.keys_bm).clone();
        let text_proj = tape.value(text.proj_tm).clone();
        let visual_proj = tape.value(vis.proj_tm).clone();
        drop(tape);
        Ok(SourceContext {
            annotations,
            text_proj,
            visual,
            visual_proj,
            initial,
        })
    }

    /// One decoding step from `state` after emitting `prev`.
    pub fn step(
        &self,
        ctx: &SourceContext<T>,
        state: &DecoderState<T>,
        prev: usize,
    ) -> Result<StepResult<T>> {
        if state.hidden.len() != self.config.n_layers {
            return Err(Error::shape(
                "decode_step",
                format!(
                    "expected {} layers, got {}",
                    self.config.n_layers,
                    state.hidden.len()
                ),
            ));
        }
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let net = self.net(&bound);
        let text = AttentionKeys {
            keys_bm: tape.leaf_ref(&ctx.annotations, false),
            proj_tm: tape.leaf_ref(&ctx.text_proj, false),
            mask: None,
        };
        let vis = AttentionKeys {
            keys_bm: tape.leaf_ref(&ctx.visual, false),
            proj_tm: tape.leaf_ref(&ctx.visual_proj, false),
            mask: None,
        };
        let hidden: Vec<Var> = state
            .hidden
            .iter()
            .map(|h| tape.leaf_ref(h, false))
            .collect();
        let mut rng = rng::seeded(0);
        let out = network::decode_step(
            &mut tape,
            &net,
            &[prev],
            &hidden,
            &text,
            &vis,
            false,
            &mut rng,
        )?;
        Ok(StepResult {
            logits: tape.value(out.logits).data().to_vec(),
            state: DecoderState {
                hidden: out.hidden.iter().map(|&h| tape.value(h).clone()).collect(),
            },
            text_weights: tape.value(out.text_weights).data().to_vec(),
            visual_weights: tape.value(out.visual_weights).data().to_vec(),
        })
    }

    /// Applies one attention module to a single query over `keys` shaped
    /// `(positions, key_dim)`. Returns the context vector and the weights.
    pub fn attend(
        &self,
        kind: AttentionKind,
        query: &[T],
        keys: &Tensor<T>,
    ) -> Result<(Vec<T>, Vec<T>)> {
        let (ids, key_dim) = self.attention(kind);
        if keys.ndim() != 2 || keys.shape()[1] != key_dim || keys.shape()[0] == 0 {
            return Err(Error::shape(
                "attend",
                format!("keys must be (n >= 1, {key_dim}), got {:?}", keys.shape()),
            ));
        }
        let h = self.config.hidden_size;
        if query.len() != h {
            return Err(Error::shape(
                "attend",
                format!("query must have {h} elements, got {}", query.len()),
            ));
        }
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let net = self.net(&bound);
        let keys_bm = tape.constant(keys.reshaped(&[1, keys.shape()[0], key_dim])?);
        let q = tape.constant(Tensor::new(vec![1, h], query.to_vec())?);
        let prepared = network::prepare_keys(&mut tape, &net, &ids, keys_bm, None)?;
        let (ctx, weights) = network::attend(&mut tape, &net, &ids, q, &prepared)?;
        Ok((
            tape.value(ctx).data().to_vec(),
            tape.value(weights).data().to_vec(),
        ))
    }

    /// Compares every parameter's analytic gradient of the batch loss with
    /// central differences and returns the largest relative error. Dropout
    /// masks are replayed from `dropout_seed` for every evaluation.
    pub fn gradient_check(
        &mut self,
        batch: &Batch,
        train: bool,
        eps: f64,
        dropout_seed: u64,
    ) -> Result<f64> {
        let replay = || rng::stream(dropout_seed, rng::streams::DROPOUT);
        let (_, grads) = self.loss_and_grads(batch, train, &mut replay())?;
        let mut worst = 0.0f64;
        for (p, grad) in grads.iter().enumerate() {
            for (i, &analytic) in grad.iter().enumerate() {
                let orig = self.params.values()[p].data()[i];
                self.params.values_mut()[p].data_mut()[i] = T::lit(orig.as_f64() + eps);
                let up = self.forward_loss(batch, train, &mut replay())?.as_f64();
                self.params.values_mut()[p].data_mut()[i] = T::lit(orig.as_f64() - eps);
                let down = self.forward_loss(batch, train, &mut replay())?.as_f64();
                self.params.values_mut()[p].data_mut()[i] = orig;
                let numeric = (up - down) / (2.0 * eps);
                worst = worst.max(crate::autodiff::relative_error(analytic.as_f64(), numeric));
            }
        }
        Ok(worst)
    }

    fn attention(&self, kind: AttentionKind) -> (AttentionIds, usize) {
        match kind {
            AttentionKind::Text => (self.layout.text_attention, 2 * self.config.hidden_size),
            AttentionKind::Visual => (self.layout.visual_attention, self.config.visual_dim),
        }
    }

    /// Parameter names of one attention module: key projection, query
    /// projection, bias, and scoring vector.
    pub fn attention_param_names(&self, kind: AttentionKind) -> [&str; 4] {
        let (ids, _) = self.attention(kind);
        let names = self.params.names();
        [
            names[ids.w_key].as_str(),
            names[ids.w_query].as_str(),
            names[ids.bias].as_str(),
            names[ids.v].as_str(),
        ]
    }
}
