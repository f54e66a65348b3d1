//! Graph construction for the encoder, attention and decoder. Everything is
//! batched: activations are `(batch, features)` per time step.

use crate::autodiff::{Real, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::subword::{BOS, EOS, PAD};

use super::params::{AttentionIds, GruIds, Layout};
use super::ModelConfig;

/// Everything a graph-building call needs besides the tape.
pub(crate) struct Net<'p> {
    pub cfg: &'p ModelConfig,
    pub layout: &'p Layout,
    pub bound: &'p [Var],
}

impl Net<'_> {
    fn p(&self, id: usize) -> Var {
        self.bound[id]
    }

    fn linear<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var, w: usize, b: usize) -> Result<Var> {
        let y = tape.matmul(x, self.p(w))?;
        tape.add(y, self.p(b))
    }

    /// One GRU update: `h' = n + z * (h - n)`.
    pub fn gru_step<T: Real>(
        &self,
        tape: &mut Tape<'_, T>,
        ids: &GruIds,
        x: Var,
        h: Var,
    ) -> Result<Var> {
        let gate = |tape: &mut Tape<'_, T>, wi: usize, wh: usize, b: usize| -> Result<Var> {
            let xi = tape.matmul(x, self.p(wi))?;
            let hh = tape.matmul(h, self.p(wh))?;
            let s = tape.add(xi, hh)?;
            let s = tape.add(s, self.p(b))?;
            Ok(tape.sigmoid(s))
        };
        let r = gate(tape, ids.w_ir, ids.w_hr, ids.b_r)?;
        let z = gate(tape, ids.w_iz, ids.w_hz, ids.b_z)?;
        let xn = self.linear(tape, x, ids.w_in, ids.b_in)?;
        let hn = self.linear(tape, h, ids.w_hn, ids.b_hn)?;
        let rhn = tape.mul(r, hn)?;
        let n = tape.add(xn, rhn)?;
        let n = tape.tanh(n);
        let diff = tape.sub(h, n)?;
        let zd = tape.mul(z, diff)?;
        tape.add(n, zd)
    }
}

/// Keys prepared for additive attention: batch-major keys for the context
/// product, time-major projected keys for the score computation, and an
/// optional additive mask (`0` or `-inf`) over padded positions.
#[derive(Debug, Clone, Copy)]
pub(crate) struct AttentionKeys {
    pub keys_bm: Var,
    pub proj_tm: Var,
    pub mask: Option<Var>,
}

pub(crate) fn prepare_keys<T: Real>(
    tape: &mut Tape<'_, T>,
    net: &Net<'_>,
    ids: &AttentionIds,
    keys_bm: Var,
    mask: Option<Var>,
) -> Result<AttentionKeys> {
    let keys_tm = tape.transpose(keys_bm, 0, 1)?;
    let proj_tm = tape.matmul(keys_tm, net.p(ids.w_key))?;
    Ok(AttentionKeys {
        keys_bm,
        proj_tm,
        mask,
    })
}

/// Additive attention: `score_s = v . tanh(W_k k_s + W_q q + b)`, softmax over
/// positions, context = weighted sum of keys. Returns `(context, weights)`
/// shaped `(batch, key_dim)` and `(batch, positions)`.
pub(crate) fn attend<T: Real>(
    tape: &mut Tape<'_, T>,
    net: &Net<'_>,
    ids: &AttentionIds,
    query: Var,
    keys: &AttentionKeys,
) -> Result<(Var, Var)> {
    let proj_shape = tape.shape(keys.proj_tm).to_vec();
    let (positions, batch) = (proj_shape[0], proj_shape[1]);
    let key_dim = tape.shape(keys.keys_bm)[2];
    let q = tape.matmul(query, net.p(ids.w_query))?;
    let e = tape.add(keys.proj_tm, q)?;
    let e = tape.add(e, net.p(ids.bias))?;
    let e = tape.tanh(e);
    let scores = tape.matmul(e, net.p(ids.v))?;
    let scores = tape.reshape(scores, &[positions, batch])?;
    let mut scores = tape.transpose(scores, 0, 1)?;
    if let Some(mask) = keys.mask {
        scores = tape.add(scores, mask)?;
    }
    let weights = tape.softmax(scores)?;
    let w3 = tape.reshape(weights, &[batch, 1, positions])?;
    let ctx = tape.matmul(w3, keys.keys_bm)?;
    let ctx = tape.reshape(ctx, &[batch, key_dim])?;
    Ok((ctx, weights))
}

/// Encoder output for a batch.
pub(crate) struct Encoded {
    /// `(batch, src_len, 2*hidden)`.
    pub annotations_bm: Var,
    /// Additive mask over padded source positions, absent when unpadded.
    pub mask: Option<Var>,
    /// Per layer: final forward and backward states, `(batch, hidden)`.
    pub finals: Vec<(Var, Var)>,
}

fn validate_ids(ids: &[usize], vocab: usize, op: &'static str) -> Result<()> {
    match ids.iter().find(|&&id| id >= vocab) {
        Some(&id) => Err(Error::IdOutOfRange {
            op,
            id,
            size: vocab,
        }),
        None => Ok(()),
    }
}

/// Bidirectional stacked GRU over a padded batch. Padded steps leave the
/// recurrent state untouched, so each row's result is independent of the
/// padding introduced by other rows.
pub(crate) fn encode_batch<T: Real>(
    tape: &mut Tape<'_, T>,
    net: &Net<'_>,
    src: &[Vec<usize>],
    train: bool,
    rng: &mut Rng,
) -> Result<Encoded> {
    let cfg = net.cfg;
    let batch = src.len();
    if batch == 0 {
        return Err(Error::Empty("source batch"));
    }
    if src.iter().any(Vec::is_empty) {
        return Err(Error::Empty("source sentence"));
    }
    for s in src {
        validate_ids(s, cfg.src_vocab, "encode")?;
    }
    let len = src.iter().map(Vec::len).max().unwrap_or(0);
    let h = cfg.hidden_size;

    // keep[t] = Some((m, 1 - m)) when some row is padded at step t.
    let mut keep = Vec::with_capacity(len);
    for t in 0..len {
        if src.iter().all(|s| t < s.len()) {
            keep.push(None);
        } else {
            let mut on = Vec::with_capacity(batch * h);
            let mut off = Vec::with_capacity(batch * h);
            for s in src {
                let valid = t < s.len();
                on.extend(std::iter::repeat_n(
                    if valid { T::one() } else { T::zero() },
                    h,
                ));
                off.extend(std::iter::repeat_n(
                    if valid { T::zero() } else { T::one() },
                    h,
                ));
            }
            let on = tape.constant(Tensor::new(vec![batch, h], on)?);
            let off = tape.constant(Tensor::new(vec![batch, h], off)?);
            keep.push(Some((on, off)));
        }
    }

    let mut inputs = Vec::with_capacity(len);
    for t in 0..len {
        let ids: Vec<usize> = src
            .iter()
            .map(|s| s.get(t).copied().unwrap_or(PAD))
            .collect();
        let emb = tape.embedding(net.p(net.layout.src_emb), &ids)?;
        inputs.push(tape.dropout(emb, cfg.dropout, train, rng)?);
    }

    let zero = tape.constant(Tensor::zeros(&[batch, h]));
    let mut finals = Vec::with_capacity(cfg.n_layers);
    for (l, cells) in net.layout.encoder.iter().enumerate() {
        let mut fwd = vec![zero; len];
        let mut bwd = vec![zero; len];
        let mut state = zero;
        for t in 0..len {
            let next = net.gru_step(tape, &cells[0], inputs[t], state)?;
            state = masked(tape, next, state, keep[t])?;
            fwd[t] = state;
        }
        let mut state = zero;
        for t in (0..len).rev() {
            let next = net.gru_step(tape, &cells[1], inputs[t], state)?;
            state = masked(tape, next, state, keep[t])?;
            bwd[t] = state;
        }
        finals.push((fwd[len - 1], bwd[0]));
        let last = l + 1 == cfg.n_layers;
        let mut outputs = Vec::with_capacity(len);
        for t in 0..len {
            let o = tape.concat(&[fwd[t], bwd[t]], 1)?;
            outputs.push(if last {
                o
            } else {
                tape.dropout(o, cfg.dropout, train, rng)?
            });
        }
        inputs = outputs;
    }

    let mut rows = Vec::with_capacity(len);
    for &o in &inputs {
        rows.push(tape.reshape(o, &[1, batch, 2 * h])?);
    }
    let annotations_tm = tape.concat(&rows, 0)?;
    let annotations_bm = tape.transpose(annotations_tm, 0, 1)?;

    let mask = if src.iter().all(|s| s.len() == len) {
        None
    } else {
        let data = src
            .iter()
            .flat_map(|s| {
                (0..len).map(move |t| {
                    if t < s.len() {
                        T::zero()
                    } else {
                        T::neg_infinity()
                    }
                })
            })
            .collect();
        Some(tape.constant(Tensor::new(vec![batch, len], data)?))
    };
    Ok(Encoded {
        annotations_bm,
        mask,
        finals,
    })
}

fn masked<T: Real>(
    tape: &mut Tape<'_, T>,
    next: Var,
    prev: Var,
    keep: Option<(Var, Var)>,
) -> Result<Var> {
    match keep {
        None => Ok(next),
        Some((on, off)) => {
            let a = tape.mul(next, on)?;
            let b = tape.mul(prev, off)?;
            tape.add(a, b)
        }
    }
}

/// Decoder initial state per layer: `tanh(W [fwd_final; bwd_final] + b)`.
pub(crate) fn init_decoder<T: Real>(
    tape: &mut Tape<'_, T>,
    net: &Net<'_>,
    finals: &[(Var, Var)],
) -> Result<Vec<Var>> {
    finals
        .iter()
        .zip(&net.layout.init)
        .map(|(&(f, b), &(w, bias))| {
            let x = tape.concat(&[f, b], 1)?;
            let y = net.linear(tape, x, w, bias)?;
            Ok(tape.tanh(y))
        })
        .collect()
}

pub(crate) struct StepOutput {
    pub logits: Var,
    pub hidden: Vec<Var>,
    pub text_weights: Var,
    pub visual_weights: Var,
}

/// One decoder step. The previous top-layer state queries both attentions;
/// the GRU consumes `[embedding; text context; visual context]`; the output
/// layer reads `[new state; both contexts; embedding]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn decode_step<T: Real>(
    tape: &mut Tape<'_, T>,
    net: &Net<'_>,
    prev: &[usize],
    hidden: &[Var],
    text: &AttentionKeys,
    visual: &AttentionKeys,
    train: bool,
    rng: &mut Rng,
) -> Result<StepOutput> {
    let cfg = net.cfg;
    let layout = net.layout;
    validate_ids(prev, cfg.tgt_vocab, "decode_step")?;
    let emb = tape.embedding(net.p(layout.tgt_emb), prev)?;
    let emb = tape.dropout(emb, cfg.dropout, train, rng)?;
    let query = *hidden.last().expect("at least one layer");
    let (text_ctx, text_weights) = attend(tape, net, &layout.text_attention, query, text)?;
    let (vis_ctx, visual_weights) = attend(tape, net, &layout.visual_attention, query, visual)?;
    let mut x = tape.concat(&[emb, text_ctx, vis_ctx], 1)?;
    let mut next_hidden = Vec::with_capacity(hidden.len());
    for (l, (cell, &h)) in layout.decoder.iter().zip(hidden).enumerate() {
        let h_new = net.gru_step(tape, cell, x, h)?;
        next_hidden.push(h_new);
        x = if l + 1 < hidden.len() {
            tape.dropout(h_new, cfg.dropout, train, rng)?
        } else {
            h_new
        };
    }
    let top = *next_hidden.last().expect("at least one layer");
    let features = tape.concat(&[top, text_ctx, vis_ctx, emb], 1)?;
    let pre = net.linear(tape, features, layout.pre_w, layout.pre_b)?;
    let pre = tape.tanh(pre);
    let pre = tape.dropout(pre, cfg.dropout, train, rng)?;
    let logits = net.linear(tape, pre, layout.out_w, layout.out_b)?;
    Ok(StepOutput {
        logits,
        hidden: next_hidden,
        text_weights,
        visual_weights,
    })
}

/// Visual keys for a `(batch, L, D)` feature tensor.
pub(crate) fn visual_keys<T: Real>(
    tape: &mut Tape<'_, T>,
    net: &Net<'_>,
    visual: Var,
) -> Result<AttentionKeys> {
    let s = tape.shape(visual);
    if s.len() != 3 || s[1] != net.cfg.visual_regions || s[2] != net.cfg.visual_dim {
        return Err(Error::shape(
            "visual_features",
            format!(
                "expected (batch, {}, {}), got {s:?}",
                net.cfg.visual_regions, net.cfg.visual_dim
            ),
        ));
    }
    prepare_keys(tape, net, &net.layout.visual_attention, visual, None)
}

/// Teacher-forced mean token cross-entropy. Step `t` feeds `<s>` or the
/// previous reference token and predicts the reference token or `</s>`;
/// positions past a sentence's end are padding and excluded.
pub(crate) fn batch_loss<T: Real>(
    tape: &mut Tape<'_, T>,
    net: &Net<'_>,
    src: &[Vec<usize>],
    tgt: &[Vec<usize>],
    visual: Var,
    train: bool,
    rng: &mut Rng,
) -> Result<Var> {
    if src.is_empty() {
        return Err(Error::Empty("batch"));
    }
    if src.len() != tgt.len() {
        return Err(Error::shape(
            "forward_loss",
            format!("{} sources, {} targets", src.len(), tgt.len()),
        ));
    }
    for t in tgt {
        validate_ids(t, net.cfg.tgt_vocab, "forward_loss")?;
    }
    let enc = encode_batch(tape, net, src, train, rng)?;
    let text = prepare_keys(
        tape,
        net,
        &net.layout.text_attention,
        enc.annotations_bm,
        enc.mask,
    )?;
    let vis = visual_keys(tape, net, visual)?;
    let mut hidden = init_decoder(tape, net, &enc.finals)?;
    let steps = tgt.iter().map(Vec::len).max().unwrap_or(0) + 1;
    let mut all_logits = Vec::with_capacity(steps);
    let mut targets = Vec::with_capacity(steps * tgt.len());
    for t in 0..steps {
        let prev: Vec<usize> = tgt
            .iter()
            .map(|y| match t {
                0 => BOS,
                _ => y.get(t - 1).copied().unwrap_or(PAD),
            })
            .collect();
        targets.extend(tgt.iter().map(|y| match t.cmp(&y.len()) {
            std::cmp::Ordering::Less => Some(y[t]),
            std::cmp::Ordering::Equal => Some(EOS),
            std::cmp::Ordering::Greater => None,
        }));
        let out = decode_step(tape, net, &prev, &hidden, &text, &vis, train, rng)?;
        hidden = out.hidden;
        all_logits.push(out.logits);
    }
    let logits = tape.concat(&all_logits, 0)?;
    tape.cross_entropy(logits, &targets)
}
