//! Transformer encoder with an MLM decoding head and a `[CLS]`-based
//! multitask regression head.
//!
//! The architecture is the standard post-norm encoder: learned token and
//! position embeddings, per-layer multihead scaled dot-product attention with
//! additive masking on `[PAD]` keys, GELU feed-forward blocks, residual +
//! layer norm per sublayer, and a final layer norm. The MLM head is an untied
//! linear projection; the regression head reads the position-0 (`[CLS]`)
//! vector through a dropout layer.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::tensor::{c, Graph, Scalar, Tensor, TensorError, Var};
use crate::tokenizer::TokenSequence;
use crate::util::mix_seed;

pub const LAYER_NORM_EPS: f64 = 1e-12;
pub const INIT_STD: f64 = 0.02;
/// Additive score for masked attention keys; exp() underflows to exactly 0.
pub const ATTN_MASK_NEG: f64 = -1e9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub hidden: usize,
    pub ffn: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    pub dropout_p: f64,
    pub head_dropout_p: f64,
    pub num_properties: usize,
}

impl EncoderConfig {
    /// 4 layers / 4 heads / hidden 128: trains in minutes on CPU while
    /// exercising the same code paths as the paper-scale preset.
    pub fn desk(vocab_size: usize, num_properties: usize) -> Self {
        EncoderConfig {
            num_layers: 4,
            num_heads: 4,
            hidden: 128,
            ffn: 512,
            max_len: 128,
            vocab_size,
            dropout_p: 0.1,
            head_dropout_p: 0.1,
            num_properties,
        }
    }

    /// 12 layers / 12 heads / hidden 768.
    pub fn paper(vocab_size: usize, num_properties: usize) -> Self {
        EncoderConfig {
            num_layers: 12,
            num_heads: 12,
            hidden: 768,
            ffn: 3072,
            max_len: 512,
            vocab_size,
            dropout_p: 0.1,
            head_dropout_p: 0.1,
            num_properties,
        }
    }

    pub fn validate(&self) -> Result<(), TensorError> {
        let positive = [
            self.num_layers,
            self.num_heads,
            self.hidden,
            self.ffn,
            self.max_len,
            self.vocab_size,
            self.num_properties,
        ];
        if positive.iter().any(|&d| d == 0) {
            return Err(TensorError::InvalidArg {
                op: "encoder_config",
                message: "all dimensions must be positive".into(),
            });
        }
        if self.hidden % self.num_heads != 0 {
            return Err(TensorError::InvalidArg {
                op: "encoder_config",
                message: format!(
                    "hidden {} not divisible by num_heads {}",
                    self.hidden, self.num_heads
                ),
            });
        }
        for p in [self.dropout_p, self.head_dropout_p] {
            if !(0.0..1.0).contains(&p) {
                return Err(TensorError::InvalidArg {
                    op: "encoder_config",
                    message: format!("dropout probability {p} outside [0,1)"),
                });
            }
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.num_heads
    }

    /// Total parameter count; a pure function of the config.
    pub fn param_count(&self) -> usize {
        let h = self.hidden;
        let per_layer = 4 * (h * h + h)       // q, k, v, o projections
            + 2 * h                           // attention layer norm
            + (h * self.ffn + self.ffn)       // ffn in
            + (self.ffn * h + h)              // ffn out
            + 2 * h; // ffn layer norm
        self.vocab_size * h                   // token embedding
            + self.max_len * h                // position embedding
            + self.num_layers * per_layer
            + 2 * h                           // final layer norm
            + (h * self.vocab_size + self.vocab_size) // mlm head
            + (h * self.num_properties + self.num_properties) // regression head
    }
}

#[derive(Debug, Clone)]
pub struct LayerParams<E> {
    pub q_w: Tensor<E>,
    pub q_b: Tensor<E>,
    pub k_w: Tensor<E>,
    pub k_b: Tensor<E>,
    pub v_w: Tensor<E>,
    pub v_b: Tensor<E>,
    pub o_w: Tensor<E>,
    pub o_b: Tensor<E>,
    pub attn_norm_gain: Tensor<E>,
    pub attn_norm_bias: Tensor<E>,
    pub ffn_w1: Tensor<E>,
    pub ffn_b1: Tensor<E>,
    pub ffn_w2: Tensor<E>,
    pub ffn_b2: Tensor<E>,
    pub ffn_norm_gain: Tensor<E>,
    pub ffn_norm_bias: Tensor<E>,
}

#[derive(Debug, Clone)]
pub struct EncoderModel<E> {
    pub config: EncoderConfig,
    pub tok_emb: Tensor<E>,
    pub pos_emb: Tensor<E>,
    pub layers: Vec<LayerParams<E>>,
    pub final_norm_gain: Tensor<E>,
    pub final_norm_bias: Tensor<E>,
    pub mlm_w: Tensor<E>,
    pub mlm_b: Tensor<E>,
    pub reg_w: Tensor<E>,
    pub reg_b: Tensor<E>,
}

enum TensorKind {
    Weight,
    Bias,
    Gain,
}

fn kind_of(name: &str) -> TensorKind {
    if name.ends_with(".gain") {
        TensorKind::Gain
    } else if name.ends_with(".b") || name.ends_with(".bias") {
        TensorKind::Bias
    } else {
        TensorKind::Weight
    }
}

impl<E: Scalar> EncoderModel<E> {
    /// All weights ~ Normal(0, 0.02^2), biases zero, layer-norm gains one.
    /// Draw order is the canonical named-tensor order with the regression
    /// head last, so models differing only in `num_properties` share every
    /// trunk parameter for a given seed.
    pub fn init(config: &EncoderConfig, seed: u64) -> Result<Self, TensorError> {
        config.validate()?;
        let h = config.hidden;
        let zero_layer = || LayerParams {
            q_w: Tensor::zeros(vec![h, h]),
            q_b: Tensor::zeros(vec![h]),
            k_w: Tensor::zeros(vec![h, h]),
            k_b: Tensor::zeros(vec![h]),
            v_w: Tensor::zeros(vec![h, h]),
            v_b: Tensor::zeros(vec![h]),
            o_w: Tensor::zeros(vec![h, h]),
            o_b: Tensor::zeros(vec![h]),
            attn_norm_gain: Tensor::zeros(vec![h]),
            attn_norm_bias: Tensor::zeros(vec![h]),
            ffn_w1: Tensor::zeros(vec![h, config.ffn]),
            ffn_b1: Tensor::zeros(vec![config.ffn]),
            ffn_w2: Tensor::zeros(vec![config.ffn, h]),
            ffn_b2: Tensor::zeros(vec![h]),
            ffn_norm_gain: Tensor::zeros(vec![h]),
            ffn_norm_bias: Tensor::zeros(vec![h]),
        };
        let mut model = EncoderModel {
            config: config.clone(),
            tok_emb: Tensor::zeros(vec![config.vocab_size, h]),
            pos_emb: Tensor::zeros(vec![config.max_len, h]),
            layers: (0..config.num_layers).map(|_| zero_layer()).collect(),
            final_norm_gain: Tensor::zeros(vec![h]),
            final_norm_bias: Tensor::zeros(vec![h]),
            mlm_w: Tensor::zeros(vec![h, config.vocab_size]),
            mlm_b: Tensor::zeros(vec![config.vocab_size]),
            reg_w: Tensor::zeros(vec![h, config.num_properties]),
            reg_b: Tensor::zeros(vec![config.num_properties]),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid stddev");
        for (name, tensor) in model.named_tensors_mut() {
            match kind_of(&name) {
                TensorKind::Weight => {
                    for v in tensor.data_mut() {
                        *v = c(normal.sample(&mut rng));
                    }
                }
                TensorKind::Bias => {} // already zero
                TensorKind::Gain => {
                    for v in tensor.data_mut() {
                        *v = E::one();
                    }
                }
            }
        }
        Ok(model)
    }

    /// Replaces the regression head with a freshly initialized one. Applied
    /// whenever a trunk is loaded from a checkpoint.
    pub fn fresh_regression_head(&mut self, num_properties: usize, seed: u64) {
        let h = self.config.hidden;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x4e9d));
        let normal = Normal::new(0.0, INIT_STD).expect("valid stddev");
        let mut w = Tensor::zeros(vec![h, num_properties]);
        for v in w.data_mut() {
            *v = c(normal.sample(&mut rng));
        }
        self.reg_w = w;
        self.reg_b = Tensor::zeros(vec![num_properties]);
        self.config.num_properties = num_properties;
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor<E>)> {
        let mut out: Vec<(String, &Tensor<E>)> = vec![
            ("tok_emb".into(), &self.tok_emb),
            ("pos_emb".into(), &self.pos_emb),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            out.extend([
                (format!("layer.{i}.attn.q.w"), &l.q_w),
                (format!("layer.{i}.attn.q.b"), &l.q_b),
                (format!("layer.{i}.attn.k.w"), &l.k_w),
                (format!("layer.{i}.attn.k.b"), &l.k_b),
                (format!("layer.{i}.attn.v.w"), &l.v_w),
                (format!("layer.{i}.attn.v.b"), &l.v_b),
                (format!("layer.{i}.attn.o.w"), &l.o_w),
                (format!("layer.{i}.attn.o.b"), &l.o_b),
                (format!("layer.{i}.attn.norm.gain"), &l.attn_norm_gain),
                (format!("layer.{i}.attn.norm.bias"), &l.attn_norm_bias),
                (format!("layer.{i}.ffn.w1"), &l.ffn_w1),
                (format!("layer.{i}.ffn.b1"), &l.ffn_b1),
                (format!("layer.{i}.ffn.w2"), &l.ffn_w2),
                (format!("layer.{i}.ffn.b2"), &l.ffn_b2),
                (format!("layer.{i}.ffn.norm.gain"), &l.ffn_norm_gain),
                (format!("layer.{i}.ffn.norm.bias"), &l.ffn_norm_bias),
            ]);
        }
        out.extend([
            ("final_norm.gain".to_string(), &self.final_norm_gain),
            ("final_norm.bias".to_string(), &self.final_norm_bias),
            ("mlm.w".to_string(), &self.mlm_w),
            ("mlm.b".to_string(), &self.mlm_b),
            ("reg.w".to_string(), &self.reg_w),
            ("reg.b".to_string(), &self.reg_b),
        ]);
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<E>)> {
        let mut out: Vec<(String, &mut Tensor<E>)> = vec![
            ("tok_emb".into(), &mut self.tok_emb),
            ("pos_emb".into(), &mut self.pos_emb),
        ];
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.extend([
                (format!("layer.{i}.attn.q.w"), &mut l.q_w),
                (format!("layer.{i}.attn.q.b"), &mut l.q_b),
                (format!("layer.{i}.attn.k.w"), &mut l.k_w),
                (format!("layer.{i}.attn.k.b"), &mut l.k_b),
                (format!("layer.{i}.attn.v.w"), &mut l.v_w),
                (format!("layer.{i}.attn.v.b"), &mut l.v_b),
                (format!("layer.{i}.attn.o.w"), &mut l.o_w),
                (format!("layer.{i}.attn.o.b"), &mut l.o_b),
                (format!("layer.{i}.attn.norm.gain"), &mut l.attn_norm_gain),
                (format!("layer.{i}.attn.norm.bias"), &mut l.attn_norm_bias),
                (format!("layer.{i}.ffn.w1"), &mut l.ffn_w1),
                (format!("layer.{i}.ffn.b1"), &mut l.ffn_b1),
                (format!("layer.{i}.ffn.w2"), &mut l.ffn_w2),
                (format!("layer.{i}.ffn.b2"), &mut l.ffn_b2),
                (format!("layer.{i}.ffn.norm.gain"), &mut l.ffn_norm_gain),
                (format!("layer.{i}.ffn.norm.bias"), &mut l.ffn_norm_bias),
            ]);
        }
        out.extend([
            ("final_norm.gain".to_string(), &mut self.final_norm_gain),
            ("final_norm.bias".to_string(), &mut self.final_norm_bias),
            ("mlm.w".to_string(), &mut self.mlm_w),
            ("mlm.b".to_string(), &mut self.mlm_b),
            ("reg.w".to_string(), &mut self.reg_w),
            ("reg.b".to_string(), &mut self.reg_b),
        ]);
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Binds every parameter into `g` as a leaf; `trainable` controls
    /// whether gradients flow.
    pub fn bind(&self, g: &mut Graph<E>, trainable: bool) -> BoundEncoder {
        let mut bind = |t: &Tensor<E>| g.leaf(t.clone(), trainable);
        let layers: Vec<BoundLayer> = self
            .layers
            .iter()
            .map(|l| BoundLayer {
                q_w: bind(&l.q_w),
                q_b: bind(&l.q_b),
                k_w: bind(&l.k_w),
                k_b: bind(&l.k_b),
                v_w: bind(&l.v_w),
                v_b: bind(&l.v_b),
                o_w: bind(&l.o_w),
                o_b: bind(&l.o_b),
                attn_norm_gain: bind(&l.attn_norm_gain),
                attn_norm_bias: bind(&l.attn_norm_bias),
                ffn_w1: bind(&l.ffn_w1),
                ffn_b1: bind(&l.ffn_b1),
                ffn_w2: bind(&l.ffn_w2),
                ffn_b2: bind(&l.ffn_b2),
                ffn_norm_gain: bind(&l.ffn_norm_gain),
                ffn_norm_bias: bind(&l.ffn_norm_bias),
            })
            .collect();
        BoundEncoder {
            config: self.config.clone(),
            tok_emb: bind(&self.tok_emb),
            pos_emb: bind(&self.pos_emb),
            layers,
            final_norm_gain: bind(&self.final_norm_gain),
            final_norm_bias: bind(&self.final_norm_bias),
            mlm_w: bind(&self.mlm_w),
            mlm_b: bind(&self.mlm_b),
            reg_w: bind(&self.reg_w),
            reg_b: bind(&self.reg_b),
        }
    }

    /// Graph leaf handles in the same order as [`Self::named_tensors`], for
    /// optimizers that read gradients by name.
    pub fn named_vars(bound: &BoundEncoder) -> Vec<(String, Var)> {
        let mut out: Vec<(String, Var)> = vec![
            ("tok_emb".into(), bound.tok_emb),
            ("pos_emb".into(), bound.pos_emb),
        ];
        for (i, l) in bound.layers.iter().enumerate() {
            out.extend([
                (format!("layer.{i}.attn.q.w"), l.q_w),
                (format!("layer.{i}.attn.q.b"), l.q_b),
                (format!("layer.{i}.attn.k.w"), l.k_w),
                (format!("layer.{i}.attn.k.b"), l.k_b),
                (format!("layer.{i}.attn.v.w"), l.v_w),
                (format!("layer.{i}.attn.v.b"), l.v_b),
                (format!("layer.{i}.attn.o.w"), l.o_w),
                (format!("layer.{i}.attn.o.b"), l.o_b),
                (format!("layer.{i}.attn.norm.gain"), l.attn_norm_gain),
                (format!("layer.{i}.attn.norm.bias"), l.attn_norm_bias),
                (format!("layer.{i}.ffn.w1"), l.ffn_w1),
                (format!("layer.{i}.ffn.b1"), l.ffn_b1),
                (format!("layer.{i}.ffn.w2"), l.ffn_w2),
                (format!("layer.{i}.ffn.b2"), l.ffn_b2),
                (format!("layer.{i}.ffn.norm.gain"), l.ffn_norm_gain),
                (format!("layer.{i}.ffn.norm.bias"), l.ffn_norm_bias),
            ]);
        }
        out.extend([
            ("final_norm.gain".to_string(), bound.final_norm_gain),
            ("final_norm.bias".to_string(), bound.final_norm_bias),
            ("mlm.w".to_string(), bound.mlm_w),
            ("mlm.b".to_string(), bound.mlm_b),
            ("reg.w".to_string(), bound.reg_w),
            ("reg.b".to_string(), bound.reg_b),
        ]);
        out
    }
}

pub struct BoundLayer {
    pub q_w: Var,
    pub q_b: Var,
    pub k_w: Var,
    pub k_b: Var,
    pub v_w: Var,
    pub v_b: Var,
    pub o_w: Var,
    pub o_b: Var,
    pub attn_norm_gain: Var,
    pub attn_norm_bias: Var,
    pub ffn_w1: Var,
    pub ffn_b1: Var,
    pub ffn_w2: Var,
    pub ffn_b2: Var,
    pub ffn_norm_gain: Var,
    pub ffn_norm_bias: Var,
}

pub struct BoundEncoder {
    pub config: EncoderConfig,
    pub tok_emb: Var,
    pub pos_emb: Var,
    pub layers: Vec<BoundLayer>,
    pub final_norm_gain: Var,
    pub final_norm_bias: Var,
    pub mlm_w: Var,
    pub mlm_b: Var,
    pub reg_w: Var,
    pub reg_b: Var,
}

/// Padded id batch. Sequences are padded only to the longest in-batch
/// length, never the full model max_len; masked attention makes the result
/// identical to full padding.
#[derive(Debug, Clone)]
pub struct Batch {
    pub ids: Vec<usize>,
    pub mask: Vec<u8>,
    pub batch: usize,
    pub len: usize,
}

impl Batch {
    pub fn from_sequences<'a, I>(seqs: I) -> Batch
    where
        I: IntoIterator<Item = &'a TokenSequence>,
    {
        let seqs: Vec<&TokenSequence> = seqs.into_iter().collect();
        let len = seqs.iter().map(|s| s.length).max().unwrap_or(0).max(2);
        let mut ids = Vec::with_capacity(seqs.len() * len);
        let mut mask = Vec::with_capacity(seqs.len() * len);
        for s in &seqs {
            for i in 0..len {
                ids.push(*s.ids.get(i).unwrap_or(&crate::tokenizer::PAD_ID));
                mask.push(*s.attention_mask.get(i).unwrap_or(&0));
            }
        }
        Batch {
            ids,
            mask,
            batch: seqs.len(),
            len,
        }
    }
}

/// Per-call dropout seed stream; forward structure is fixed, so deriving by
/// call index keeps runs reproducible.
struct SeedStream {
    base: u64,
    calls: u64,
}

impl SeedStream {
    fn next(&mut self) -> u64 {
        self.calls += 1;
        mix_seed(self.base, self.calls)
    }
}

pub struct EncodeOutput {
    pub hidden: Var,
    /// Per-layer attention probabilities, shaped `(B*heads, L, L)`.
    pub attn_probs: Vec<Var>,
}

/// Runs the encoder stack over a batch, returning hidden states
/// `(B, L, hidden)` and the per-layer attention maps.
pub fn encode<E: Scalar>(
    g: &mut Graph<E>,
    m: &BoundEncoder,
    batch: &Batch,
    train: bool,
    dropout_seed: u64,
) -> Result<EncodeOutput, TensorError> {
    let cfg = &m.config;
    let (b, l, h) = (batch.batch, batch.len, cfg.hidden);
    if l > cfg.max_len {
        return Err(TensorError::InvalidArg {
            op: "encode",
            message: format!("batch length {l} exceeds max_len {}", cfg.max_len),
        });
    }
    if batch.ids.len() != b * l || batch.mask.len() != b * l {
        return Err(TensorError::InvalidArg {
            op: "encode",
            message: format!("batch of {b}x{l} with {} ids", batch.ids.len()),
        });
    }
    let heads = cfg.num_heads;
    let dh = cfg.head_dim();
    let mut seeds = SeedStream {
        base: dropout_seed,
        calls: 0,
    };

    // Embeddings: token rows + position rows (suffix-broadcast over batch).
    let tok = g.embedding(m.tok_emb, &batch.ids, &[b, l])?;
    let pos_ids: Vec<usize> = (0..l).collect();
    let pos = g.embedding(m.pos_emb, &pos_ids, &[l])?;
    let mut x = g.bias_add(tok, pos)?;
    x = g.dropout(x, cfg.dropout_p, train, seeds.next());

    // Additive attention mask over keys, shared by every layer.
    let mut mask_data = vec![E::zero(); b * heads * l * l];
    for bi in 0..b {
        for j in 0..l {
            if batch.mask[bi * l + j] == 0 {
                let neg = c::<E>(ATTN_MASK_NEG);
                for hd in 0..heads {
                    let base = ((bi * heads + hd) * l) * l;
                    for q in 0..l {
                        mask_data[base + q * l + j] = neg;
                    }
                }
            }
        }
    }
    let attn_mask = g.constant(Tensor::new(vec![b * heads, l, l], mask_data)?);

    let mut attn_probs = Vec::with_capacity(cfg.num_layers);
    for layer in &m.layers {
        // Projections operate on (B*L, H).
        let x2 = g.reshape(x, vec![b * l, h])?;
        let project = |g: &mut Graph<E>, w: Var, bias: Var| -> Result<Var, TensorError> {
            let p = g.matmul(x2, w)?;
            let p = g.bias_add(p, bias)?;
            // (B, L, heads, dh) -> (B, heads, L, dh) -> (B*heads, L, dh)
            let p = g.reshape(p, vec![b, l, heads, dh])?;
            let p = g.permute(p, &[0, 2, 1, 3])?;
            g.reshape(p, vec![b * heads, l, dh])
        };
        let q = project(g, layer.q_w, layer.q_b)?;
        let k = project(g, layer.k_w, layer.k_b)?;
        let v = project(g, layer.v_w, layer.v_b)?;

        let kt = g.permute(k, &[0, 2, 1])?;
        let scores = g.bmm(q, kt)?;
        let scores = g.scale(scores, c::<E>(1.0 / (dh as f64).sqrt()));
        let scores = g.add(scores, attn_mask)?;
        let probs = g.softmax(scores)?;
        attn_probs.push(probs);
        let probs_d = g.dropout(probs, cfg.dropout_p, train, seeds.next());

        let ctx = g.bmm(probs_d, v)?;
        // (B*heads, L, dh) -> (B, L, H)
        let ctx = g.reshape(ctx, vec![b, heads, l, dh])?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx2 = g.reshape(ctx, vec![b * l, h])?;
        let attn_out = g.matmul(ctx2, layer.o_w)?;
        let attn_out = g.bias_add(attn_out, layer.o_b)?;
        let attn_out = g.reshape(attn_out, vec![b, l, h])?;
        let attn_out = g.dropout(attn_out, cfg.dropout_p, train, seeds.next());

        let res = g.add(x, attn_out)?;
        x = g.layer_norm(res, layer.attn_norm_gain, layer.attn_norm_bias, LAYER_NORM_EPS)?;

        let x2 = g.reshape(x, vec![b * l, h])?;
        let ff = g.matmul(x2, layer.ffn_w1)?;
        let ff = g.bias_add(ff, layer.ffn_b1)?;
        let ff = g.gelu(ff);
        let ff = g.matmul(ff, layer.ffn_w2)?;
        let ff = g.bias_add(ff, layer.ffn_b2)?;
        let ff = g.reshape(ff, vec![b, l, h])?;
        let ff = g.dropout(ff, cfg.dropout_p, train, seeds.next());

        let res = g.add(x, ff)?;
        x = g.layer_norm(res, layer.ffn_norm_gain, layer.ffn_norm_bias, LAYER_NORM_EPS)?;
    }

    let hidden = g.layer_norm(x, m.final_norm_gain, m.final_norm_bias, LAYER_NORM_EPS)?;
    Ok(EncodeOutput { hidden, attn_probs })
}

/// Linear projection of hidden states to vocabulary logits `(B, L, V)`.
pub fn mlm_logits<E: Scalar>(
    g: &mut Graph<E>,
    m: &BoundEncoder,
    hidden: Var,
) -> Result<Var, TensorError> {
    let shape = g.value(hidden).shape().to_vec();
    let (b, l, h) = (shape[0], shape[1], shape[2]);
    let flat = g.reshape(hidden, vec![b * l, h])?;
    let logits = g.matmul(flat, m.mlm_w)?;
    let logits = g.bias_add(logits, m.mlm_b)?;
    g.reshape(logits, vec![b, l, m.config.vocab_size])
}

/// `[CLS]`-based regression head: position-0 vector through dropout and a
/// linear layer, producing `(B, num_properties)` in normalized units.
pub fn regress<E: Scalar>(
    g: &mut Graph<E>,
    m: &BoundEncoder,
    hidden: Var,
    train: bool,
    dropout_seed: u64,
) -> Result<Var, TensorError> {
    let cls = g.select(hidden, 1, 0)?;
    let cls = g.dropout(cls, m.config.head_dropout_p, train, mix_seed(dropout_seed, 0x0c15));
    let out = g.matmul(cls, m.reg_w)?;
    g.bias_add(out, m.reg_b)
}
