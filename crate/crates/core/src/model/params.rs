use std::collections::HashMap;

use rand::Rng as _;

use crate::autodiff::{Real, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;

use super::ModelConfig;

/// Named parameter tensors in a fixed registration order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T: Real> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
        }
    }
}

impl<T: Real> ParamStore<T> {
    fn register(&mut self, name: String, shape: &[usize]) -> usize {
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(Tensor::zeros(shape));
        id
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor<T>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.values
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.values[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index.get(name).map(|&i| &mut self.values[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn total_elements(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Registers every parameter as a leaf on `tape`, borrowing the values.
    pub fn bind<'a>(&'a self, tape: &mut Tape<'a, T>, requires_grad: bool) -> Vec<Var> {
        self.values
            .iter()
            .map(|v| tape.leaf_ref(v, requires_grad))
            .collect()
    }

    /// Replaces every value with the same-named tensor from `other`, checking
    /// names and shapes.
    pub fn load_from(
        &mut self,
        other: impl IntoIterator<Item = (String, Tensor<T>)>,
    ) -> Result<()> {
        let mut seen = vec![false; self.values.len()];
        for (name, tensor) in other {
            let &id = self
                .index
                .get(&name)
                .ok_or_else(|| Error::shape("load", format!("unknown parameter {name}")))?;
            if self.values[id].shape() != tensor.shape() {
                return Err(Error::shape(
                    "load",
                    format!(
                        "{name}: expected {:?}, got {:?}",
                        self.values[id].shape(),
                        tensor.shape()
                    ),
                ));
            }
            self.values[id] = tensor;
            seen[id] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::shape(
                "load",
                format!("missing parameter {}", self.names[missing]),
            ));
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct GruIds {
    pub w_ir: usize,
    pub w_iz: usize,
    pub w_in: usize,
    pub w_hr: usize,
    pub w_hz: usize,
    pub w_hn: usize,
    pub b_r: usize,
    pub b_z: usize,
    pub b_in: usize,
    pub b_hn: usize,
}

impl GruIds {
    fn register<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        input: usize,
        hidden: usize,
    ) -> Self {
        let mut reg = |n: &str, shape: &[usize]| store.register(format!("{prefix}.{n}"), shape);
        GruIds {
            w_ir: reg("w_ir", &[input, hidden]),
            w_iz: reg("w_iz", &[input, hidden]),
            w_in: reg("w_in", &[input, hidden]),
            w_hr: reg("w_hr", &[hidden, hidden]),
            w_hz: reg("w_hz", &[hidden, hidden]),
            w_hn: reg("w_hn", &[hidden, hidden]),
            b_r: reg("b_r", &[hidden]),
            b_z: reg("b_z", &[hidden]),
            b_in: reg("b_in", &[hidden]),
            b_hn: reg("b_hn", &[hidden]),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct AttentionIds {
    pub w_key: usize,
    pub w_query: usize,
    pub bias: usize,
    pub v: usize,
}

impl AttentionIds {
    fn register<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        key_dim: usize,
        query_dim: usize,
        attn_dim: usize,
    ) -> Self {
        let mut reg = |n: &str, shape: &[usize]| store.register(format!("{prefix}.{n}"), shape);
        AttentionIds {
            w_key: reg("w_key", &[key_dim, attn_dim]),
            w_query: reg("w_query", &[query_dim, attn_dim]),
            bias: reg("bias", &[attn_dim]),
            v: reg("v", &[attn_dim, 1]),
        }
    }
}

/// Indices of every parameter inside the [`ParamStore`].
#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub src_emb: usize,
    /// Per layer: forward and backward cells.
    pub encoder: Vec<[GruIds; 2]>,
    /// Per decoder layer: weight and bias of the initial-state map.
    pub init: Vec<(usize, usize)>,
    pub tgt_emb: usize,
    pub text_attention: AttentionIds,
    pub visual_attention: AttentionIds,
    pub decoder: Vec<GruIds>,
    pub pre_w: usize,
    pub pre_b: usize,
    pub out_w: usize,
    pub out_b: usize,
}

impl Layout {
    /// Registers all parameters (zero-filled) in their canonical order.
    pub fn build<T: Real>(cfg: &ModelConfig) -> (Layout, ParamStore<T>) {
        let (e, h, d) = (cfg.emb_size, cfg.hidden_size, cfg.visual_dim);
        let mut store = ParamStore::default();
        let src_emb = store.register("enc.src_emb".into(), &[cfg.src_vocab, e]);
        let encoder = (0..cfg.n_layers)
            .map(|l| {
                let input = if l == 0 { e } else { 2 * h };
                [
                    GruIds::register(&mut store, &format!("enc.l{l}.fwd"), input, h),
                    GruIds::register(&mut store, &format!("enc.l{l}.bwd"), input, h),
                ]
            })
            .collect();
        let init = (0..cfg.n_layers)
            .map(|l| {
                (
                    store.register(format!("dec.init.l{l}.w"), &[2 * h, h]),
                    store.register(format!("dec.init.l{l}.b"), &[h]),
                )
            })
            .collect();
        let tgt_emb = store.register("dec.tgt_emb".into(), &[cfg.tgt_vocab, e]);
        let text_attention = AttentionIds::register(&mut store, "att.text", 2 * h, h, h);
        let visual_attention = AttentionIds::register(&mut store, "att.visual", d, h, h);
        let decoder = (0..cfg.n_layers)
            .map(|l| {
                let input = if l == 0 { e + 2 * h + d } else { h };
                GruIds::register(&mut store, &format!("dec.l{l}"), input, h)
            })
            .collect();
        let pre_w = store.register("out.pre.w".into(), &[h + 2 * h + d + e, h]);
        let pre_b = store.register("out.pre.b".into(), &[h]);
        let out_w = store.register("out.proj.w".into(), &[h, cfg.tgt_vocab]);
        let out_b = store.register("out.proj.b".into(), &[cfg.tgt_vocab]);
        (
            Layout {
                src_emb,
                encoder,
                init,
                tgt_emb,
                text_attention,
                visual_attention,
                decoder,
                pre_w,
                pre_b,
                out_w,
                out_b,
            },
            store,
        )
    }
}

/// Fills every parameter with independent uniform(-scale, scale) draws.
pub(crate) fn init_uniform<T: Real>(store: &mut ParamStore<T>, scale: f64, rng: &mut Rng) {
    for tensor in store.values_mut() {
        for v in tensor.data_mut() {
            *v = T::lit(rng.random_range(-scale..scale));
        }
    }
}
