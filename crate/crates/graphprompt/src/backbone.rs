//! Small pre-norm encoder-decoder transformer. The encoder consumes an
//! already-embedded input matrix (prompt rows plus token embeddings);
//! the decoder generates sentinel/value sequences. After pretraining
//! the internal weights are frozen and checksummed; gradients still
//! flow through them into the prompt and embedding parameters.

use crate::data::vocab::{Vocabulary, EOS, PAD};
use crate::encoder::param_node;
use crate::error::{Error, Result};
use crate::numerics::checkpoint::tensor_sha256;
use crate::numerics::params::{init_normal, init_ones, init_xavier, init_zeros};
use crate::numerics::scalar::Scalar;
use crate::numerics::{AdamW, AdamWConfig, Binding, NodeId, ParamGroup, ParamStore, Tape};
use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::rc::Rc;

pub const LN_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub d_model: usize,
    pub num_heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub ff_dim: usize,
    pub max_positions: usize,
    /// Filled in from the vocabulary at model assembly time.
    pub vocab_size: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            d_model: 512,
            num_heads: 8,
            enc_layers: 2,
            dec_layers: 2,
            ff_dim: 1024,
            max_positions: 512,
            vocab_size: 0,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.num_heads == 0 || self.d_model % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "model width {} not divisible by {} heads",
                self.d_model, self.num_heads
            )));
        }
        if self.enc_layers == 0 || self.dec_layers == 0 || self.ff_dim == 0 {
            return Err(Error::Config("backbone needs nonempty layer stacks".to_string()));
        }
        if self.max_positions == 0 {
            return Err(Error::Config("zero position budget".to_string()));
        }
        if self.vocab_size == 0 {
            return Err(Error::Config("backbone vocabulary size unset".to_string()));
        }
        Ok(())
    }
}

/// Sinusoidal absolute positions: even columns sine, odd columns
/// cosine, wavelengths geometric from 2π to 10000·2π.
pub fn positional_encoding<S: Scalar>(len: usize, d_model: usize) -> ArrayD<S> {
    ArrayD::from_shape_fn(IxDyn(&[len, d_model]), |ix| {
        let (pos, j) = (ix[0], ix[1]);
        let pair = (j / 2) as f64;
        let angle = pos as f64 / 10000f64.powf(2.0 * pair / d_model as f64);
        S::from_f64(if j % 2 == 0 { angle.sin() } else { angle.cos() })
    })
}

/// Register every backbone tensor. The token embedding table joins the
/// embedding group (it stays trainable after the freeze); everything
/// else is backbone-group and will be frozen.
pub fn register_backbone_params<S: Scalar, R: Rng>(
    store: &mut ParamStore<S>,
    cfg: &BackboneConfig,
    rng: &mut R,
) -> Result<()> {
    cfg.validate()?;
    let d = cfg.d_model;
    let b = ParamGroup::Backbone;
    store.register(
        "backbone.token_embed",
        init_normal(rng, &[cfg.vocab_size, d], 0.02),
        ParamGroup::Embedding,
        false,
    )?;
    store.register(
        "backbone.out_proj",
        init_xavier(rng, d, cfg.vocab_size),
        b,
        false,
    )?;
    let attn = |store: &mut ParamStore<S>, rng: &mut R, prefix: &str| -> Result<()> {
        for w in ["wq", "wk", "wv", "wo"] {
            store.register(&format!("{prefix}.{w}"), init_xavier(rng, d, d), b, false)?;
        }
        Ok(())
    };
    let norm = |store: &mut ParamStore<S>, prefix: &str| -> Result<()> {
        store.register(&format!("{prefix}.gamma"), init_ones(&[d]), b, false)?;
        store.register(&format!("{prefix}.beta"), init_zeros(&[d]), b, false)?;
        Ok(())
    };
    let ff = |store: &mut ParamStore<S>, rng: &mut R, prefix: &str| -> Result<()> {
        store.register(&format!("{prefix}.w1"), init_xavier(rng, d, cfg.ff_dim), b, false)?;
        store.register(&format!("{prefix}.b1"), init_zeros(&[cfg.ff_dim]), b, false)?;
        store.register(&format!("{prefix}.w2"), init_xavier(rng, cfg.ff_dim, d), b, false)?;
        store.register(&format!("{prefix}.b2"), init_zeros(&[d]), b, false)?;
        Ok(())
    };
    for l in 0..cfg.enc_layers {
        norm(store, &format!("backbone.enc{l}.ln1"))?;
        attn(store, rng, &format!("backbone.enc{l}.attn"))?;
        norm(store, &format!("backbone.enc{l}.ln2"))?;
        ff(store, rng, &format!("backbone.enc{l}.ff"))?;
    }
    for l in 0..cfg.dec_layers {
        norm(store, &format!("backbone.dec{l}.ln1"))?;
        attn(store, rng, &format!("backbone.dec{l}.self_attn"))?;
        norm(store, &format!("backbone.dec{l}.ln2"))?;
        attn(store, rng, &format!("backbone.dec{l}.cross_attn"))?;
        norm(store, &format!("backbone.dec{l}.ln3"))?;
        ff(store, rng, &format!("backbone.dec{l}.ff"))?;
    }
    norm(store, "backbone.enc_final")?;
    norm(store, "backbone.dec_final")?;
    Ok(())
}

fn layer_norm_named<S: Scalar>(
    tape: &mut Tape<S>,
    store: &ParamStore<S>,
    binding: &Binding,
    prefix: &str,
    x: NodeId,
) -> Result<NodeId> {
    let gamma = param_node(store, binding, &format!("{prefix}.gamma"))?;
    let beta = param_node(store, binding, &format!("{prefix}.beta"))?;
    tape.layer_norm(x, gamma, beta, LN_EPS)
}

/// Multi-head scaled dot-product attention; `causal` restricts each
/// query row to keys at its own position or earlier (square case only).
fn multi_head_attention<S: Scalar>(
    tape: &mut Tape<S>,
    store: &ParamStore<S>,
    binding: &Binding,
    prefix: &str,
    queries_in: NodeId,
    keys_in: NodeId,
    heads: usize,
    causal: bool,
) -> Result<NodeId> {
    let wq = param_node(store, binding, &format!("{prefix}.wq"))?;
    let wk = param_node(store, binding, &format!("{prefix}.wk"))?;
    let wv = param_node(store, binding, &format!("{prefix}.wv"))?;
    let wo = param_node(store, binding, &format!("{prefix}.wo"))?;
    let d = tape.value(wq).shape()[1];
    if heads == 0 || d % heads != 0 {
        return Err(Error::shape(
            "attention",
            format!("width {d} not divisible by {heads} heads"),
        ));
    }
    let head_dim = d / heads;
    let nq = tape.value(queries_in).shape()[0];
    let nk = tape.value(keys_in).shape()[0];
    if causal && nq != nk {
        return Err(Error::shape(
            "attention",
            format!("causal mask needs square scores, got {nq}×{nk}"),
        ));
    }
    let q = tape.matmul(queries_in, wq)?;
    let k = tape.matmul(keys_in, wk)?;
    let v = tape.matmul(keys_in, wv)?;
    let mask = if causal {
        Some(tape.constant(ArrayD::from_shape_fn(IxDyn(&[nq, nk]), |ix| {
            if ix[1] <= ix[0] {
                S::zero()
            } else {
                S::from_f64(-1e30)
            }
        })))
    } else {
        None
    };
    let scale = S::from_f64(1.0 / (head_dim as f64).sqrt());
    let mut outputs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * head_dim, head_dim)?;
        let kh = tape.slice_cols(k, h * head_dim, head_dim)?;
        let vh = tape.slice_cols(v, h * head_dim, head_dim)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, scale);
        let scores = match mask {
            Some(m) => tape.add(scores, m)?,
            None => scores,
        };
        let alpha = tape.softmax_rows(scores)?;
        let ctx = tape.matmul(alpha, vh)?;
        outputs.push(tape.transpose(ctx)?);
    }
    let stacked = tape.concat_rows(&outputs)?;
    let merged = tape.transpose(stacked)?;
    tape.matmul(merged, wo)
}

fn feed_forward<S: Scalar>(
    tape: &mut Tape<S>,
    store: &ParamStore<S>,
    binding: &Binding,
    prefix: &str,
    x: NodeId,
) -> Result<NodeId> {
    let w1 = param_node(store, binding, &format!("{prefix}.w1"))?;
    let b1 = param_node(store, binding, &format!("{prefix}.b1"))?;
    let w2 = param_node(store, binding, &format!("{prefix}.w2"))?;
    let b2 = param_node(store, binding, &format!("{prefix}.b2"))?;
    let h = tape.matmul(x, w1)?;
    let h = tape.add_row(h, b1)?;
    let h = tape.relu(h);
    let h = tape.matmul(h, w2)?;
    tape.add_row(h, b2)
}

/// Embed a token sequence without positions.
pub fn embed_tokens<S: Scalar>(
    tape: &mut Tape<S>,
    store: &ParamStore<S>,
    binding: &Binding,
    tokens: &[usize],
) -> Result<NodeId> {
    let table = param_node(store, binding, "backbone.token_embed")?;
    tape.gather_rows(table, Rc::new(tokens.to_vec()))
}

/// Run the encoder stack over an embedded input; sinusoidal positions
/// are added here, so every row (prompt or token) is position-coded by
/// its index in the assembled sequence.
pub fn encode_input<S: Scalar>(
    tape: &mut Tape<S>,
    store: &ParamStore<S>,
    binding: &Binding,
    cfg: &BackboneConfig,
    input: NodeId,
) -> Result<NodeId> {
    let n = tape.value(input).shape()[0];
    if n > cfg.max_positions {
        return Err(Error::Config(format!(
            "input length {n} exceeds {} positions",
            cfg.max_positions
        )));
    }
    let pe = tape.constant(positional_encoding::<S>(n, cfg.d_model));
    let mut x = tape.add(input, pe)?;
    for l in 0..cfg.enc_layers {
        let h = layer_norm_named(tape, store, binding, &format!("backbone.enc{l}.ln1"), x)?;
        let a = multi_head_attention(
            tape,
            store,
            binding,
            &format!("backbone.enc{l}.attn"),
            h,
            h,
            cfg.num_heads,
            false,
        )?;
        x = tape.add(x, a)?;
        let h = layer_norm_named(tape, store, binding, &format!("backbone.enc{l}.ln2"), x)?;
        let f = feed_forward(tape, store, binding, &format!("backbone.enc{l}.ff"), h)?;
        x = tape.add(x, f)?;
    }
    layer_norm_named(tape, store, binding, "backbone.enc_final", x)
}

/// Decoder pass over explicit decoder-input tokens, returning logits
/// for every decoder position.
fn decoder_logits<S: Scalar>(
    tape: &mut Tape<S>,
    store: &ParamStore<S>,
    binding: &Binding,
    cfg: &BackboneConfig,
    memory: NodeId,
    dec_tokens: &[usize],
) -> Result<NodeId> {
    if dec_tokens.len() > cfg.max_positions {
        return Err(Error::Config(format!(
            "decoder length {} exceeds {} positions",
            dec_tokens.len(),
            cfg.max_positions
        )));
    }
    let emb = embed_tokens(tape, store, binding, dec_tokens)?;
    let pe = tape.constant(positional_encoding::<S>(dec_tokens.len(), cfg.d_model));
    let mut y = tape.add(emb, pe)?;
    for l in 0..cfg.dec_layers {
        let h = layer_norm_named(tape, store, binding, &format!("backbone.dec{l}.ln1"), y)?;
        let a = multi_head_attention(
            tape,
            store,
            binding,
            &format!("backbone.dec{l}.self_attn"),
            h,
            h,
            cfg.num_heads,
            true,
        )?;
        y = tape.add(y, a)?;
        let h = layer_norm_named(tape, store, binding, &format!("backbone.dec{l}.ln2"), y)?;
        let c = multi_head_attention(
            tape,
            store,
            binding,
            &format!("backbone.dec{l}.cross_attn"),
            h,
            memory,
            cfg.num_heads,
            false,
        )?;
        y = tape.add(y, c)?;
        let h = layer_norm_named(tape, store, binding, &format!("backbone.dec{l}.ln3"), y)?;
        let f = feed_forward(tape, store, binding, &format!("backbone.dec{l}.ff"), h)?;
        y = tape.add(y, f)?;
    }
    let y = layer_norm_named(tape, store, binding, "backbone.dec_final", y)?;
    let proj = param_node(store, binding, "backbone.out_proj")?;
    tape.matmul(y, proj)
}

pub struct TeacherForced {
    /// (target length + 1) × vocab logits.
    pub logits: NodeId,
    /// Shifted labels: the target tokens then EOS, all scored.
    pub labels: Vec<Option<usize>>,
}

/// Teacher-forced pass: decoder input is the target shifted right
/// behind a padding start token; labels append EOS.
pub fn forward_teacher_forced<S: Scalar>(
    tape: &mut Tape<S>,
    store: &ParamStore<S>,
    binding: &Binding,
    cfg: &BackboneConfig,
    input: NodeId,
    target: &[usize],
) -> Result<TeacherForced> {
    let memory = encode_input(tape, store, binding, cfg, input)?;
    let mut dec_tokens = Vec::with_capacity(target.len() + 1);
    dec_tokens.push(PAD);
    dec_tokens.extend_from_slice(target);
    let logits = decoder_logits(tape, store, binding, cfg, memory, &dec_tokens)?;
    let mut labels: Vec<Option<usize>> = target.iter().map(|&t| Some(t)).collect();
    labels.push(Some(EOS));
    Ok(TeacherForced { logits, labels })
}

/// Greedy decoding: argmax per step with ties broken toward the lowest
/// token id, stopping at EOS or after `max_len` tokens.
pub fn greedy_decode<S: Scalar>(
    tape: &mut Tape<S>,
    store: &ParamStore<S>,
    binding: &Binding,
    cfg: &BackboneConfig,
    input: NodeId,
    max_len: usize,
) -> Result<Vec<usize>> {
    let memory = encode_input(tape, store, binding, cfg, input)?;
    let mut out: Vec<usize> = Vec::new();
    for _ in 0..max_len {
        let mut dec_tokens = Vec::with_capacity(out.len() + 1);
        dec_tokens.push(PAD);
        dec_tokens.extend_from_slice(&out);
        let logits = decoder_logits(tape, store, binding, cfg, memory, &dec_tokens)?;
        let v = tape.value(logits);
        let last = dec_tokens.len() - 1;
        let mut best = 0usize;
        let mut best_val = v[[last, 0]];
        for t in 1..cfg.vocab_size {
            if v[[last, t]] > best_val {
                best_val = v[[last, t]];
                best = t;
            }
        }
        if best == EOS {
            break;
        }
        out.push(best);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PretrainMode {
    /// Train on sentinel-masked span filling for this many steps.
    SpanCorruption { steps: usize },
    /// Freeze the seeded initialization without any training.
    RandomFrozen,
}

pub struct PretrainReport {
    /// Freeze-time digests of every frozen tensor.
    pub checksums: BTreeMap<String, String>,
    /// Per-step training losses (empty in random-frozen mode).
    pub losses: Vec<f64>,
}

/// Mark every backbone-group tensor frozen and return their digests.
pub fn freeze_backbone<S: Scalar>(store: &mut ParamStore<S>) -> BTreeMap<String, String> {
    let ids: Vec<_> = store
        .iter()
        .filter(|(_, p)| p.group == ParamGroup::Backbone)
        .map(|(id, _)| id)
        .collect();
    for id in ids {
        store.set_frozen(id, true);
    }
    frozen_checksums(store)
}

/// Digests of all currently frozen tensors.
pub fn frozen_checksums<S: Scalar>(store: &ParamStore<S>) -> BTreeMap<String, String> {
    store
        .iter()
        .filter(|(_, p)| p.frozen)
        .map(|(_, p)| (p.name.clone(), tensor_sha256(&p.value)))
        .collect()
}

/// Compare current frozen tensors against freeze-time digests; any
/// difference is a hard failure listing the drifted tensors.
pub fn verify_frozen<S: Scalar>(
    store: &ParamStore<S>,
    reference: &BTreeMap<String, String>,
) -> Result<()> {
    let now = frozen_checksums(store);
    let mut drifted: Vec<String> = Vec::new();
    for (name, digest) in reference {
        match now.get(name) {
            Some(d) if d == digest => {}
            Some(_) => drifted.push(format!("{name}: contents changed")),
            None => drifted.push(format!("{name}: no longer frozen")),
        }
    }
    if drifted.is_empty() {
        Ok(())
    } else {
        Err(Error::FrozenDrift(drifted.join("; ")))
    }
}

/// Prepare a frozen backbone: optionally pretrain on span filling over
/// the corpus, then freeze and checksum all internal weights.
pub fn pretrain_and_freeze<S: Scalar>(
    store: &mut ParamStore<S>,
    cfg: &BackboneConfig,
    vocab: &Vocabulary,
    corpus: &[String],
    mode: PretrainMode,
    seed: u64,
) -> Result<PretrainReport> {
    cfg.validate()?;
    let mut losses = Vec::new();
    if let PretrainMode::SpanCorruption { steps } = mode {
        let usable: Vec<Vec<usize>> = corpus
            .iter()
            .map(|s| vocab.tokenize(s))
            .filter(|t| t.len() >= 3 && t.len() + 4 <= cfg.max_positions)
            .collect();
        if usable.is_empty() {
            return Err(Error::Argument(
                "pretraining corpus has no usable sentences".to_string(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pre_cfg = AdamWConfig::with_lr(1e-3, 0.0);
        let mut opt = AdamW::with_backbone(pre_cfg, pre_cfg, pre_cfg, Some(1.0));
        let trainable = store.trainable_ids();
        for _ in 0..steps {
            let tokens = &usable[rng.gen_range(0..usable.len())];
            // Corrupt one to three non-overlapping spans, each replaced
            // by its own sentinel, so the decoder sees sentinel chains
            // like the downstream slot-filling targets.
            let max_spans = 3
                .min(tokens.len() / 2)
                .min(vocab.sentinel_range().len())
                .max(1);
            let num_spans = rng.gen_range(1..=max_spans);
            let mut spans: Vec<(usize, usize)> = Vec::with_capacity(num_spans);
            let mut cursor = 0usize;
            for k in 0..num_spans {
                let later = num_spans - k - 1;
                let latest_start = tokens.len() - later - 1;
                let start = rng.gen_range(cursor..=latest_start);
                let max_len = (tokens.len() - start - later).min(3);
                let len = rng.gen_range(1..=max_len);
                spans.push((start, len));
                cursor = start + len;
            }
            let mut corrupted = Vec::with_capacity(tokens.len());
            let mut target = Vec::with_capacity(tokens.len());
            let mut pos = 0usize;
            for (j, &(start, len)) in spans.iter().enumerate() {
                corrupted.extend_from_slice(&tokens[pos..start]);
                let sentinel = vocab.sentinel_id(j)?;
                corrupted.push(sentinel);
                target.push(sentinel);
                target.extend_from_slice(&tokens[start..start + len]);
                pos = start + len;
            }
            corrupted.extend_from_slice(&tokens[pos..]);

            let mut tape = Tape::new();
            let binding = store.bind(&mut tape);
            let emb = embed_tokens(&mut tape, store, &binding, &corrupted)?;
            let tf = forward_teacher_forced(&mut tape, store, &binding, cfg, emb, &target)?;
            let loss = tape.cross_entropy(tf.logits, Rc::new(tf.labels))?;
            losses.push(tape.scalar_value(loss).to_f64());
            let grads = tape.backward(loss)?;
            let mut by_id = BTreeMap::new();
            for &id in &trainable {
                if let Some(g) = grads.get(binding.node(id)) {
                    by_id.insert(id, g.clone());
                }
            }
            opt.step(store, &by_id)?;
        }
    }
    let checksums = freeze_backbone(store);
    Ok(PretrainReport { checksums, losses })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn toy_cfg(vocab_size: usize) -> BackboneConfig {
        BackboneConfig {
            d_model: 8,
            num_heads: 1,
            enc_layers: 1,
            dec_layers: 1,
            ff_dim: 12,
            max_positions: 32,
            vocab_size,
        }
    }

    /// Deterministic patterned weights so the reference computation is
    /// reproducible without sharing the initialization path.
    fn pattern(shape: &[usize], salt: u64) -> ArrayD<f64> {
        ArrayD::from_shape_fn(IxDyn(shape), {
            let mut c = salt;
            move |_| {
                c = c.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((c >> 33) as f64 / (1u64 << 31) as f64 - 1.0) * 0.3
            }
        })
    }

    fn patterned_store(cfg: &BackboneConfig) -> ParamStore<f64> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        register_backbone_params(&mut store, cfg, &mut rng).unwrap();
        let names: Vec<String> = store.iter().map(|(_, p)| p.name.clone()).collect();
        for (salt, name) in names.iter().enumerate() {
            let id = store.id(name).unwrap();
            let shape = store.value(id).shape().to_vec();
            if name.ends_with(".gamma") {
                store.set_value(id, init_ones(&shape));
            } else if name.ends_with(".beta") || name.ends_with(".b1") || name.ends_with(".b2") {
                store.set_value(id, init_zeros(&shape));
            } else {
                store.set_value(id, pattern(&shape, salt as u64 + 1));
            }
        }
        store
    }

    fn to2(a: &ArrayD<f64>) -> Array2<f64> {
        Array2::from_shape_vec(
            (a.shape()[0], a.shape()[1]),
            a.iter().copied().collect(),
        )
        .unwrap()
    }

    // Independent dense reference for the toy configuration.
    mod reference {
        use super::*;

        pub fn layer_norm(x: &Array2<f64>) -> Array2<f64> {
            let mut out = x.clone();
            for mut row in out.rows_mut() {
                let d = row.len() as f64;
                let mean = row.sum() / d;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
                let r = 1.0 / (var + LN_EPS).sqrt();
                for v in row.iter_mut() {
                    *v = (*v - mean) * r;
                }
            }
            out
        }

        pub fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
            let mut out = x.clone();
            for mut row in out.rows_mut() {
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    total += *v;
                }
                for v in row.iter_mut() {
                    *v /= total;
                }
            }
            out
        }

        pub struct Weights {
            pub embed: Array2<f64>,
            pub out_proj: Array2<f64>,
            pub enc_attn: [Array2<f64>; 4],
            pub enc_ff: (Array2<f64>, Array2<f64>),
            pub dec_self: [Array2<f64>; 4],
            pub dec_cross: [Array2<f64>; 4],
            pub dec_ff: (Array2<f64>, Array2<f64>),
        }

        pub fn attention(
            q_in: &Array2<f64>,
            kv_in: &Array2<f64>,
            w: &[Array2<f64>; 4],
            causal: bool,
        ) -> Array2<f64> {
            let d = w[0].shape()[1] as f64;
            let q = q_in.dot(&w[0]);
            let k = kv_in.dot(&w[1]);
            let v = kv_in.dot(&w[2]);
            let mut scores = q.dot(&k.t()) / d.sqrt();
            if causal {
                for i in 0..scores.nrows() {
                    for j in (i + 1)..scores.ncols() {
                        scores[[i, j]] = -1e30;
                    }
                }
            }
            softmax_rows(&scores).dot(&v).dot(&w[3])
        }

        pub fn positional(len: usize, d: usize) -> Array2<f64> {
            Array2::from_shape_fn((len, d), |(pos, j)| {
                let angle =
                    pos as f64 / 10000f64.powf(2.0 * (j / 2) as f64 / d as f64);
                if j % 2 == 0 {
                    angle.sin()
                } else {
                    angle.cos()
                }
            })
        }

        pub fn forward(
            w: &Weights,
            input_tokens: &[usize],
            target: &[usize],
        ) -> Array2<f64> {
            let d = w.embed.ncols();
            let embed_rows = |toks: &[usize]| {
                Array2::from_shape_fn((toks.len(), d), |(i, j)| w.embed[[toks[i], j]])
            };
            // Encoder.
            let mut x = embed_rows(input_tokens) + positional(input_tokens.len(), d);
            let a = attention(&layer_norm(&x), &layer_norm(&x), &w.enc_attn, false);
            x = x + a;
            let h = layer_norm(&x);
            let f = h.dot(&w.enc_ff.0).mapv(|v| v.max(0.0)).dot(&w.enc_ff.1);
            x = x + f;
            let memory = layer_norm(&x);
            // Decoder.
            let mut dec_tokens = vec![PAD];
            dec_tokens.extend_from_slice(target);
            let mut y = embed_rows(&dec_tokens) + positional(dec_tokens.len(), d);
            let a = attention(&layer_norm(&y), &layer_norm(&y), &w.dec_self, true);
            y = y + a;
            let c = attention(&layer_norm(&y), &memory, &w.dec_cross, false);
            y = y + c;
            let h = layer_norm(&y);
            let f = h.dot(&w.dec_ff.0).mapv(|v| v.max(0.0)).dot(&w.dec_ff.1);
            y = y + f;
            layer_norm(&y).dot(&w.out_proj)
        }
    }

    fn tape_logits(
        store: &ParamStore<f64>,
        cfg: &BackboneConfig,
        input_tokens: &[usize],
        target: &[usize],
    ) -> ArrayD<f64> {
        let mut tape = Tape::new();
        let binding = store.bind(&mut tape);
        let emb = embed_tokens(&mut tape, store, &binding, input_tokens).unwrap();
        let tf = forward_teacher_forced(&mut tape, store, &binding, cfg, emb, target).unwrap();
        (*tape.value(tf.logits)).clone()
    }

    #[test]
    fn logits_shape_is_target_plus_one_by_vocab() {
        let cfg = toy_cfg(9);
        let store = patterned_store(&cfg);
        let logits = tape_logits(&store, &cfg, &[3, 4, 5], &[6, 7]);
        assert_eq!(logits.shape(), &[3, 9]);
    }

    #[test]
    fn identical_inputs_give_bit_identical_logits() {
        let cfg = toy_cfg(9);
        let store = patterned_store(&cfg);
        let a = tape_logits(&store, &cfg, &[3, 4, 5], &[6, 7]);
        let b = tape_logits(&store, &cfg, &[3, 4, 5], &[6, 7]);
        assert_eq!(a, b);
    }

    #[test]
    fn toy_forward_matches_hand_stepped_reference() {
        let cfg = toy_cfg(9);
        let store = patterned_store(&cfg);
        let get = |name: &str| to2(&store.value(store.id(name).unwrap()));
        let w = reference::Weights {
            embed: get("backbone.token_embed"),
            out_proj: get("backbone.out_proj"),
            enc_attn: [
                get("backbone.enc0.attn.wq"),
                get("backbone.enc0.attn.wk"),
                get("backbone.enc0.attn.wv"),
                get("backbone.enc0.attn.wo"),
            ],
            enc_ff: (get("backbone.enc0.ff.w1"), get("backbone.enc0.ff.w2")),
            dec_self: [
                get("backbone.dec0.self_attn.wq"),
                get("backbone.dec0.self_attn.wk"),
                get("backbone.dec0.self_attn.wv"),
                get("backbone.dec0.self_attn.wo"),
            ],
            dec_cross: [
                get("backbone.dec0.cross_attn.wq"),
                get("backbone.dec0.cross_attn.wk"),
                get("backbone.dec0.cross_attn.wv"),
                get("backbone.dec0.cross_attn.wo"),
            ],
            dec_ff: (get("backbone.dec0.ff.w1"), get("backbone.dec0.ff.w2")),
        };
        let input = [3usize, 4, 5, 8];
        let target = [6usize, 7];
        let want = reference::forward(&w, &input, &target);
        let got = tape_logits(&store, &cfg, &input, &target);
        for i in 0..want.nrows() {
            for j in 0..want.ncols() {
                assert!(
                    (got[[i, j]] - want[[i, j]]).abs() < 1e-9,
                    "logit [{i},{j}]: {} vs {}",
                    got[[i, j]],
                    want[[i, j]]
                );
            }
        }
    }

    #[test]
    fn decoder_is_causal_in_the_target() {
        let cfg = BackboneConfig {
            d_model: 16,
            num_heads: 2,
            enc_layers: 1,
            dec_layers: 2,
            ff_dim: 24,
            max_positions: 32,
            vocab_size: 11,
        };
        let store = patterned_store(&cfg);
        let a = tape_logits(&store, &cfg, &[3, 4], &[5, 6, 7, 8]);
        let b = tape_logits(&store, &cfg, &[3, 4], &[5, 6, 9, 10]);
        // Rows 0..=2 depend only on the shared prefix [PAD, 5, 6].
        for i in 0..3 {
            for j in 0..cfg.vocab_size {
                assert_eq!(a[[i, j]], b[[i, j]], "row {i} col {j}");
            }
        }
        // Later rows must differ somewhere, or the test proves nothing.
        let mut any_diff = false;
        for j in 0..cfg.vocab_size {
            if a[[3, j]] != b[[3, j]] {
                any_diff = true;
            }
        }
        assert!(any_diff);
    }

    #[test]
    fn uniform_logits_decode_pads_to_max_len_with_lowest_id() {
        let cfg = toy_cfg(9);
        let mut store = patterned_store(&cfg);
        let id = store.id("backbone.out_proj").unwrap();
        store.set_value(id, init_zeros(&[cfg.d_model, cfg.vocab_size]));
        let mut tape = Tape::inference();
        let binding = store.bind(&mut tape);
        let emb = embed_tokens(&mut tape, &store, &binding, &[3, 4]).unwrap();
        let out = greedy_decode(&mut tape, &store, &binding, &cfg, emb, 17).unwrap();
        assert_eq!(out, vec![PAD; 17]);
    }

    #[test]
    fn overlong_sequences_are_length_errors() {
        let cfg = toy_cfg(9);
        let store = patterned_store(&cfg);
        let long: Vec<usize> = (0..40).map(|i| 3 + (i % 5)).collect();
        let mut tape = Tape::<f64>::new();
        let binding = store.bind(&mut tape);
        let emb = embed_tokens(&mut tape, &store, &binding, &long).unwrap();
        assert!(encode_input(&mut tape, &store, &binding, &cfg, emb).is_err());
        let short = embed_tokens(&mut tape, &store, &binding, &[3, 4]).unwrap();
        let tf = forward_teacher_forced(&mut tape, &store, &binding, &cfg, short, &long);
        assert!(tf.is_err());
    }

    fn word_vocab(n: usize) -> Vocabulary {
        let text: String = (0..n)
            .map(|i| format!("w{i}"))
            .collect::<Vec<_>>()
            .join(" ");
        Vocabulary::build([text.as_str()], 2, 0, 0)
    }

    #[test]
    fn random_frozen_mode_freezes_seeded_initialization() {
        let vocab = word_vocab(6);
        let mut cfg = toy_cfg(0);
        cfg.vocab_size = vocab.len();
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        register_backbone_params(&mut store, &cfg, &mut rng).unwrap();
        let before = (*store.value(store.id("backbone.out_proj").unwrap())).clone();
        let report =
            pretrain_and_freeze(&mut store, &cfg, &vocab, &[], PretrainMode::RandomFrozen, 1)
                .unwrap();
        assert!(report.losses.is_empty());
        assert_eq!(*store.value(store.id("backbone.out_proj").unwrap()), before);
        let proj = store.get(store.id("backbone.out_proj").unwrap());
        assert!(proj.frozen);
        let embed = store.get(store.id("backbone.token_embed").unwrap());
        assert!(!embed.frozen, "token embeddings must stay trainable");
        assert!(report.checksums.contains_key("backbone.out_proj"));
        assert!(!report.checksums.contains_key("backbone.token_embed"));
        verify_frozen(&store, &report.checksums).unwrap();
    }

    #[test]
    fn frozen_drift_is_detected() {
        let vocab = word_vocab(6);
        let mut cfg = toy_cfg(0);
        cfg.vocab_size = vocab.len();
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        register_backbone_params(&mut store, &cfg, &mut rng).unwrap();
        let report =
            pretrain_and_freeze(&mut store, &cfg, &vocab, &[], PretrainMode::RandomFrozen, 1)
                .unwrap();
        let id = store.id("backbone.enc0.attn.wq").unwrap();
        let mut v = (*store.value(id)).clone();
        v[[0, 0]] += 1.0;
        store.set_frozen(id, false);
        store.set_value(id, v);
        store.set_frozen(id, true);
        let err = verify_frozen(&store, &report.checksums).unwrap_err();
        assert!(matches!(err, Error::FrozenDrift(_)));
    }

    #[test]
    fn span_pretraining_reduces_loss_on_tiny_corpus() {
        let sentences: Vec<String> = vec![
            "the red lamp is on the desk".to_string(),
            "the blue lamp is on the shelf".to_string(),
            "a green book sits on the desk".to_string(),
            "the red book sits on the shelf".to_string(),
        ];
        let vocab = Vocabulary::build(sentences.iter().map(String::as_str), 2, 0, 0);
        let cfg = BackboneConfig {
            d_model: 16,
            num_heads: 2,
            enc_layers: 1,
            dec_layers: 1,
            ff_dim: 24,
            max_positions: 32,
            vocab_size: vocab.len(),
        };
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        register_backbone_params(&mut store, &cfg, &mut rng).unwrap();
        let report = pretrain_and_freeze(
            &mut store,
            &cfg,
            &vocab,
            &sentences,
            PretrainMode::SpanCorruption { steps: 120 },
            7,
        )
        .unwrap();
        assert_eq!(report.losses.len(), 120);
        let first: f64 = report.losses[..30].iter().sum::<f64>() / 30.0;
        let last: f64 = report.losses[90..].iter().sum::<f64>() / 30.0;
        assert!(
            last < first * 0.8,
            "span pretraining did not learn: {first} -> {last}"
        );
        verify_frozen(&store, &report.checksums).unwrap();
    }

    #[test]
    fn empty_corpus_rejected_for_span_pretraining() {
        let vocab = word_vocab(6);
        let mut cfg = toy_cfg(0);
        cfg.vocab_size = vocab.len();
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        register_backbone_params(&mut store, &cfg, &mut rng).unwrap();
        let err = pretrain_and_freeze(
            &mut store,
            &cfg,
            &vocab,
            &[],
            PretrainMode::SpanCorruption { steps: 5 },
            1,
        );
        assert!(matches!(err, Err(Error::Argument(_))));
    }
}
