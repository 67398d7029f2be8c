//! Tiny encoder-decoder transformer with a value head, exported
//! cross-attention scores, and exact hand-written backprop in f64.
//!
//! The encoder runs self-attention over projected patch features; the
//! decoder runs causal self-attention over `[BOS] query [SEP] response`
//! tokens with cross-attention into the encoded patches. The LM head is
//! tied to the token embedding; the value head is a separate projection
//! reading the same final decoder state.

use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::GridImage;
use crate::sample::TokenId;
use crate::vocab::Vocab;

use super::tensor::{axpy, dot, linear_bwd, linear_fwd, softmax_bwd, softmax_inplace, Tensor};

const RMS_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("bad model config: {0}")]
    BadConfig(String),
    #[error("context length {got} exceeds configured maximum {max}")]
    LengthOverflow { got: usize, max: usize },
    #[error("patch count {got} exceeds configured maximum {max}")]
    PatchOverflow { got: usize, max: usize },
    #[error("image feature dim {got} does not match model feature dim {want}")]
    FeatureDimMismatch { got: usize, want: usize },
    #[error("checkpoint io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint format error: {0}")]
    Format(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub num_heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub ff_dim: usize,
    pub feature_dim: usize,
    pub max_patches: usize,
    pub max_ctx: usize,
    pub init_seed: u64,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            num_heads: 4,
            encoder_layers: 1,
            decoder_layers: 2,
            ff_dim: 128,
            feature_dim: 4,
            max_patches: 100,
            max_ctx: 32,
            init_seed: 0,
            init_std: 0.02,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.embed_dim == 0 || self.num_heads == 0 || self.ff_dim == 0 {
            return Err(ModelError::BadConfig("dimensions must be positive".into()));
        }
        if self.embed_dim % self.num_heads != 0 {
            return Err(ModelError::BadConfig(format!(
                "embed_dim {} not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if self.decoder_layers == 0 {
            return Err(ModelError::BadConfig("need at least one decoder layer".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    /// Patch inputs are the image features plus two normalized coordinate
    /// channels (patch center x and y).
    pub fn patch_input_dim(&self) -> usize {
        self.feature_dim + 2
    }
}

/// Named parameter tensors with a deterministic iteration order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    pub tensors: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn get(&self, name: &str) -> &Tensor {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name:?}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        self.tensors
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name:?}"))
    }

    pub fn zeros_like(&self) -> ParamSet {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .map(|(k, t)| (k.clone(), Tensor::zeros(t.rows, t.cols)))
                .collect(),
        }
    }

    pub fn names(&self) -> Vec<String> {
        self.tensors.keys().cloned().collect()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.values().map(|t| t.data.len()).sum()
    }

    pub fn add_assign(&mut self, other: &ParamSet) {
        for (k, t) in self.tensors.iter_mut() {
            t.add_assign(other.get(k));
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in self.tensors.values_mut() {
            t.scale(s);
        }
    }

    pub fn zero(&mut self) {
        for t in self.tensors.values_mut() {
            t.fill(0.0);
        }
    }
}

// ---------------------------------------------------------------------------
// Forward caches
// ---------------------------------------------------------------------------

struct AttnCache {
    q: Tensor,
    k: Tensor,
    v: Tensor,
    /// Post-softmax weights, one `Lq x Lkv` tensor per head; masked entries
    /// are zero.
    weights: Vec<Tensor>,
    /// Pre-softmax scores `Q_i . K_j / sqrt(d_k)`, same layout.
    scores: Vec<Tensor>,
    /// Concatenated head outputs before the output projection.
    ctx: Tensor,
}

struct MlpCache {
    h_pre: Tensor,
    h_act: Tensor,
}

struct EncLayerCache {
    x0: Tensor,
    inv1: Vec<f64>,
    normed1: Tensor,
    attn: AttnCache,
    x1: Tensor,
    inv2: Vec<f64>,
    normed2: Tensor,
    mlp: MlpCache,
}

struct DecLayerCache {
    x0: Tensor,
    inv1: Vec<f64>,
    normed1: Tensor,
    self_attn: AttnCache,
    x1: Tensor,
    inv2: Vec<f64>,
    normed2: Tensor,
    cross_attn: AttnCache,
    x2: Tensor,
    inv3: Vec<f64>,
    normed3: Tensor,
    mlp: MlpCache,
}

struct EncTrace {
    features: Tensor,
    layers: Vec<EncLayerCache>,
    pre_final: Tensor,
    final_inv: Vec<f64>,
}

/// Encoded image: final patch representations, the per-decoder-layer
/// cross-attention key/value projections (fixed for a given encoding), and
/// optionally the forward trace needed to backpropagate into the encoder.
pub struct ImageEncoding {
    pub out: Tensor,
    pub patch_count: usize,
    cross_kv: Vec<(Tensor, Tensor)>,
    trace: Option<EncTrace>,
}

/// Full decoder forward over `[BOS] query [SEP] response`.
///
/// Row `sep_pos + t` of `logits` is the next-token distribution after
/// consuming `response[..t]`; the same row of `values` is the value estimate
/// of that state. Cross-attention scores are kept per layer and head for the
/// attention-mass reward.
pub struct DecodeTrace {
    pub ctx: Vec<TokenId>,
    pub query_len: usize,
    pub response_len: usize,
    pub logits: Tensor,
    pub values: Vec<f64>,
    cross_scores: Vec<Vec<Tensor>>,
    layers: Vec<DecLayerCache>,
    x0: Tensor,
    pre_final: Tensor,
    final_inv: Vec<f64>,
    final_normed: Tensor,
}

impl DecodeTrace {
    /// Position of the separator token in the context.
    pub fn sep_pos(&self) -> usize {
        1 + self.query_len
    }

    /// Logits predicting `response[t]`; `t == response_len` gives the
    /// next-token logits after the whole prefix.
    pub fn step_logits(&self, t: usize) -> &[f64] {
        self.logits.row(self.sep_pos() + t)
    }

    /// Value estimate of the state before emitting `response[t]`.
    pub fn step_value(&self, t: usize) -> f64 {
        self.values[self.sep_pos() + t]
    }

    pub fn next_logits(&self) -> &[f64] {
        self.logits.row(self.ctx.len() - 1)
    }

    /// Context row at which `response[t]` is consumed as an input.
    pub fn response_row(&self, t: usize) -> usize {
        self.sep_pos() + 1 + t
    }

    /// Pre-softmax cross-attention scores of one layer and head, shaped
    /// `ctx_len x patch_count`.
    pub fn cross_scores(&self, layer: usize, head: usize) -> &Tensor {
        &self.cross_scores[layer][head]
    }

    pub fn num_layers(&self) -> usize {
        self.cross_scores.len()
    }

    pub fn num_heads(&self) -> usize {
        self.cross_scores[0].len()
    }
}

/// Which decoder layer to read cross-attention from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSelect {
    Last,
    Index(usize),
}

/// How to combine heads when slicing cross-attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadReduce {
    Mean,
    Head(usize),
}

/// Pre-softmax cross-attention logits for the response-token positions in
/// `token_positions`, reduced over heads, over all patches. Returns a
/// `|N| x P` matrix; an empty `N` yields an empty matrix.
pub fn cross_attention_slice(
    trace: &DecodeTrace,
    token_positions: &[usize],
    layer: LayerSelect,
    reduce: HeadReduce,
) -> Tensor {
    let layer = match layer {
        LayerSelect::Last => trace.num_layers() - 1,
        LayerSelect::Index(i) => i,
    };
    let heads = trace.num_heads();
    let p = trace.cross_scores(layer, 0).cols;
    let mut out = Tensor::zeros(token_positions.len(), p);
    for (row, &t) in token_positions.iter().enumerate() {
        let ctx_row = trace.response_row(t);
        let dst = out.row_mut(row);
        match reduce {
            HeadReduce::Mean => {
                for h in 0..heads {
                    axpy(1.0 / heads as f64, trace.cross_scores(layer, h).row(ctx_row), dst);
                }
            }
            HeadReduce::Head(h) => {
                dst.copy_from_slice(trace.cross_scores(layer, h).row(ctx_row));
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct PolicyModel {
    pub cfg: ModelConfig,
    pub vocab: Vocab,
    pub params: ParamSet,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    config: ModelConfig,
    vocab: Vocab,
    params: ParamSet,
}

impl PolicyModel {
    pub fn new(cfg: ModelConfig, vocab: Vocab) -> Result<Self, ModelError> {
        cfg.validate()?;
        let d = cfg.embed_dim;
        let v = vocab.size();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
        let mut tensors = BTreeMap::new();
        // Creation order is fixed so the init stream is reproducible.
        let mut put = |name: String, rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng| {
            let t = if std == 0.0 {
                Tensor::zeros(rows, cols)
            } else {
                Tensor::randn(rows, cols, std, rng)
            };
            tensors.insert(name, t);
        };
        let s = cfg.init_std;
        put("tok_emb".into(), v, d, s, &mut rng);
        put("pos_emb".into(), cfg.max_ctx, d, s, &mut rng);
        put("patch_proj".into(), d, cfg.patch_input_dim(), s, &mut rng);
        put("patch_pos".into(), cfg.max_patches, d, s, &mut rng);
        for l in 0..cfg.encoder_layers {
            put(format!("enc{l}.attn.wq"), d, d, s, &mut rng);
            put(format!("enc{l}.attn.wk"), d, d, s, &mut rng);
            put(format!("enc{l}.attn.wv"), d, d, s, &mut rng);
            put(format!("enc{l}.attn.wo"), d, d, 0.0, &mut rng);
            put(format!("enc{l}.mlp.fc1"), cfg.ff_dim, d, s, &mut rng);
            put(format!("enc{l}.mlp.fc2"), d, cfg.ff_dim, 0.0, &mut rng);
        }
        for l in 0..cfg.decoder_layers {
            put(format!("dec{l}.self.wq"), d, d, s, &mut rng);
            put(format!("dec{l}.self.wk"), d, d, s, &mut rng);
            put(format!("dec{l}.self.wv"), d, d, s, &mut rng);
            put(format!("dec{l}.self.wo"), d, d, 0.0, &mut rng);
            put(format!("dec{l}.cross.wq"), d, d, s, &mut rng);
            put(format!("dec{l}.cross.wk"), d, d, s, &mut rng);
            put(format!("dec{l}.cross.wv"), d, d, s, &mut rng);
            put(format!("dec{l}.cross.wo"), d, d, 0.0, &mut rng);
            put(format!("dec{l}.mlp.fc1"), cfg.ff_dim, d, s, &mut rng);
            put(format!("dec{l}.mlp.fc2"), d, cfg.ff_dim, 0.0, &mut rng);
        }
        put("value_head".into(), 1, d, 0.0, &mut rng);
        Ok(Self {
            cfg,
            vocab,
            params: ParamSet { tensors },
        })
    }

    pub fn num_params(&self) -> usize {
        self.params.num_values()
    }

    // -- attention -----------------------------------------------------------

    fn attn_fwd(
        &self,
        prefix: &str,
        x_q: &Tensor,
        x_kv: &Tensor,
        causal: bool,
        precomputed_kv: Option<&(Tensor, Tensor)>,
    ) -> (Tensor, AttnCache) {
        let heads = self.cfg.num_heads;
        let dk = self.cfg.head_dim();
        let scale = 1.0 / (dk as f64).sqrt();
        let q = linear_fwd(x_q, self.params.get(&format!("{prefix}.wq")));
        let (k, v) = match precomputed_kv {
            Some((k, v)) => (k.clone(), v.clone()),
            None => (
                linear_fwd(x_kv, self.params.get(&format!("{prefix}.wk"))),
                linear_fwd(x_kv, self.params.get(&format!("{prefix}.wv"))),
            ),
        };
        let (lq, lkv) = (x_q.rows, x_kv.rows);
        let mut ctx = Tensor::zeros(lq, q.cols);
        let mut weights = Vec::with_capacity(heads);
        let mut scores = Vec::with_capacity(heads);
        for h in 0..heads {
            let hs = h * dk;
            let mut sc = Tensor::zeros(lq, lkv);
            let mut w = Tensor::zeros(lq, lkv);
            for i in 0..lq {
                let limit = if causal { i + 1 } else { lkv };
                let qh = &q.row(i)[hs..hs + dk];
                {
                    let row = sc.row_mut(i);
                    for j in 0..limit {
                        row[j] = scale * dot(qh, &k.row(j)[hs..hs + dk]);
                    }
                }
                let wrow = w.row_mut(i);
                wrow[..limit].copy_from_slice(&sc.row(i)[..limit]);
                softmax_inplace(&mut wrow[..limit]);
                let ctx_h = &mut ctx.row_mut(i)[hs..hs + dk];
                for j in 0..limit {
                    axpy(wrow[j], &v.row(j)[hs..hs + dk], ctx_h);
                }
            }
            weights.push(w);
            scores.push(sc);
        }
        let out = linear_fwd(&ctx, self.params.get(&format!("{prefix}.wo")));
        (out, AttnCache { q, k, v, weights, scores, ctx })
    }

    #[allow(clippy::too_many_arguments)]
    fn attn_bwd(
        &self,
        prefix: &str,
        cache: &AttnCache,
        x_q: &Tensor,
        x_kv: &Tensor,
        causal: bool,
        d_out: &Tensor,
        d_x_q: &mut Tensor,
        d_x_kv: &mut Tensor,
        grads: &mut ParamSet,
    ) {
        let heads = self.cfg.num_heads;
        let dk = self.cfg.head_dim();
        let scale = 1.0 / (dk as f64).sqrt();
        let (lq, lkv) = (x_q.rows, x_kv.rows);

        // Through the output projection.
        let mut d_ctx = Tensor::zeros(lq, cache.ctx.cols);
        linear_bwd(
            &cache.ctx,
            self.params.get(&format!("{prefix}.wo")),
            d_out,
            &mut d_ctx,
            grads.get_mut(&format!("{prefix}.wo")),
        );

        let mut d_q = Tensor::zeros(lq, cache.q.cols);
        let mut d_k = Tensor::zeros(lkv, cache.k.cols);
        let mut d_v = Tensor::zeros(lkv, cache.v.cols);
        let mut d_w_row = vec![0.0; lkv];
        let mut d_s_row = vec![0.0; lkv];
        for h in 0..heads {
            let hs = h * dk;
            let w = &cache.weights[h];
            for i in 0..lq {
                let limit = if causal { i + 1 } else { lkv };
                let d_ctx_h = &d_ctx.row(i)[hs..hs + dk];
                let wrow = &w.row(i)[..limit];
                for j in 0..limit {
                    d_w_row[j] = dot(d_ctx_h, &cache.v.row(j)[hs..hs + dk]);
                    axpy(wrow[j], d_ctx_h, &mut d_v.row_mut(j)[hs..hs + dk]);
                }
                softmax_bwd(wrow, &d_w_row[..limit], &mut d_s_row[..limit]);
                let qh = &cache.q.row(i)[hs..hs + dk];
                let d_qh = &mut d_q.row_mut(i)[hs..hs + dk];
                for j in 0..limit {
                    let g = d_s_row[j] * scale;
                    if g != 0.0 {
                        axpy(g, &cache.k.row(j)[hs..hs + dk], d_qh);
                        axpy(g, qh, &mut d_k.row_mut(j)[hs..hs + dk]);
                    }
                }
            }
        }

        linear_bwd(
            x_q,
            self.params.get(&format!("{prefix}.wq")),
            &d_q,
            d_x_q,
            grads.get_mut(&format!("{prefix}.wq")),
        );
        linear_bwd(
            x_kv,
            self.params.get(&format!("{prefix}.wk")),
            &d_k,
            d_x_kv,
            grads.get_mut(&format!("{prefix}.wk")),
        );
        linear_bwd(
            x_kv,
            self.params.get(&format!("{prefix}.wv")),
            &d_v,
            d_x_kv,
            grads.get_mut(&format!("{prefix}.wv")),
        );
    }

    fn mlp_fwd(&self, prefix: &str, x: &Tensor) -> (Tensor, MlpCache) {
        let h_pre = linear_fwd(x, self.params.get(&format!("{prefix}.fc1")));
        let mut h_act = h_pre.clone();
        h_act.data.iter_mut().for_each(|v| {
            if *v < 0.0 {
                *v = 0.0;
            }
        });
        let out = linear_fwd(&h_act, self.params.get(&format!("{prefix}.fc2")));
        (out, MlpCache { h_pre, h_act })
    }

    fn mlp_bwd(
        &self,
        prefix: &str,
        cache: &MlpCache,
        x: &Tensor,
        d_out: &Tensor,
        d_x: &mut Tensor,
        grads: &mut ParamSet,
    ) {
        let mut d_h = Tensor::zeros(cache.h_act.rows, cache.h_act.cols);
        linear_bwd(
            &cache.h_act,
            self.params.get(&format!("{prefix}.fc2")),
            d_out,
            &mut d_h,
            grads.get_mut(&format!("{prefix}.fc2")),
        );
        for (g, &pre) in d_h.data.iter_mut().zip(&cache.h_pre.data) {
            if pre <= 0.0 {
                *g = 0.0;
            }
        }
        linear_bwd(
            x,
            self.params.get(&format!("{prefix}.fc1")),
            &d_h,
            d_x,
            grads.get_mut(&format!("{prefix}.fc1")),
        );
    }

    // -- encoder --------------------------------------------------------------

    pub fn encode_image(&self, image: &GridImage, with_trace: bool) -> Result<ImageEncoding, ModelError> {
        let p = image.patch_count();
        if p > self.cfg.max_patches {
            return Err(ModelError::PatchOverflow {
                got: p,
                max: self.cfg.max_patches,
            });
        }
        if image.feature_dim != self.cfg.feature_dim {
            return Err(ModelError::FeatureDimMismatch {
                got: image.feature_dim,
                want: self.cfg.feature_dim,
            });
        }
        let in_dim = self.cfg.patch_input_dim();
        let mut features = Tensor::zeros(p, in_dim);
        for row in 0..image.height_patches {
            for col in 0..image.width_patches {
                let idx = row * image.width_patches + col;
                let dst = features.row_mut(idx);
                dst[..image.feature_dim].copy_from_slice(image.feature(idx));
                dst[image.feature_dim] = (col as f64 + 0.5) / image.width_patches as f64;
                dst[image.feature_dim + 1] = (row as f64 + 0.5) / image.height_patches as f64;
            }
        }
        let mut x = linear_fwd(&features, self.params.get("patch_proj"));
        let patch_pos = self.params.get("patch_pos");
        for i in 0..p {
            axpy(1.0, patch_pos.row(i), x.row_mut(i));
        }

        let mut layers = Vec::with_capacity(self.cfg.encoder_layers);
        for l in 0..self.cfg.encoder_layers {
            let x0 = x.clone();
            let (normed1, inv1) = rmsnorm_rows(&x0);
            let (attn_out, attn) =
                self.attn_fwd(&format!("enc{l}.attn"), &normed1, &normed1, false, None);
            let mut x1 = x0.clone();
            x1.add_assign(&attn_out);
            let (normed2, inv2) = rmsnorm_rows(&x1);
            let (mlp_out, mlp) = self.mlp_fwd(&format!("enc{l}.mlp"), &normed2);
            x = x1.clone();
            x.add_assign(&mlp_out);
            layers.push(EncLayerCache {
                x0,
                inv1,
                normed1,
                attn,
                x1,
                inv2,
                normed2,
                mlp,
            });
        }
        let pre_final = x.clone();
        let (out, final_inv) = rmsnorm_rows(&pre_final);
        let cross_kv = (0..self.cfg.decoder_layers)
            .map(|l| {
                (
                    linear_fwd(&out, self.params.get(&format!("dec{l}.cross.wk"))),
                    linear_fwd(&out, self.params.get(&format!("dec{l}.cross.wv"))),
                )
            })
            .collect();
        let trace = with_trace.then_some(EncTrace {
            features,
            layers,
            pre_final,
            final_inv,
        });
        Ok(ImageEncoding {
            out,
            patch_count: p,
            cross_kv,
            trace,
        })
    }

    fn encoder_backward(&self, enc: &ImageEncoding, d_out: &Tensor, grads: &mut ParamSet) {
        let trace = enc
            .trace
            .as_ref()
            .expect("encoder backward requires a traced encoding");
        let mut d_x = rmsnorm_bwd_rows(d_out, &trace.pre_final, &trace.final_inv);
        for (l, layer) in trace.layers.iter().enumerate().rev() {
            // x2 = x1 + mlp(norm(x1))
            let mut d_normed2 = Tensor::zeros(d_x.rows, d_x.cols);
            self.mlp_bwd(
                &format!("enc{l}.mlp"),
                &layer.mlp,
                &layer.normed2,
                &d_x,
                &mut d_normed2,
                grads,
            );
            let d_from_norm2 = rmsnorm_bwd_rows(&d_normed2, &layer.x1, &layer.inv2);
            d_x.add_assign(&d_from_norm2);
            // x1 = x0 + attn(norm(x0))
            let mut d_normed1 = Tensor::zeros(d_x.rows, d_x.cols);
            let mut d_normed1_kv = Tensor::zeros(d_x.rows, d_x.cols);
            self.attn_bwd(
                &format!("enc{l}.attn"),
                &layer.attn,
                &layer.normed1,
                &layer.normed1,
                false,
                &d_x,
                &mut d_normed1,
                &mut d_normed1_kv,
                grads,
            );
            d_normed1.add_assign(&d_normed1_kv);
            let d_from_norm1 = rmsnorm_bwd_rows(&d_normed1, &layer.x0, &layer.inv1);
            d_x.add_assign(&d_from_norm1);
        }
        // x = features patch_proj^T + patch_pos
        let g_pos = grads.get_mut("patch_pos");
        for i in 0..d_x.rows {
            axpy(1.0, d_x.row(i), g_pos.row_mut(i));
        }
        let mut d_features = Tensor::zeros(trace.features.rows, trace.features.cols);
        linear_bwd(
            &trace.features,
            self.params.get("patch_proj"),
            &d_x,
            &mut d_features,
            grads.get_mut("patch_proj"),
        );
    }

    // -- decoder --------------------------------------------------------------

    /// Assemble the decoder context `[BOS] query [SEP] response`.
    pub fn build_ctx(&self, query: &[TokenId], response: &[TokenId]) -> Vec<TokenId> {
        let mut ctx = Vec::with_capacity(query.len() + response.len() + 2);
        ctx.push(self.vocab.bos());
        ctx.extend_from_slice(query);
        ctx.push(self.vocab.sep());
        ctx.extend_from_slice(response);
        ctx
    }

    pub fn decode(
        &self,
        enc: &ImageEncoding,
        query: &[TokenId],
        response: &[TokenId],
    ) -> Result<DecodeTrace, ModelError> {
        let ctx = self.build_ctx(query, response);
        let l = ctx.len();
        if l > self.cfg.max_ctx {
            return Err(ModelError::LengthOverflow {
                got: l,
                max: self.cfg.max_ctx,
            });
        }
        let d = self.cfg.embed_dim;
        let tok_emb = self.params.get("tok_emb");
        let pos_emb = self.params.get("pos_emb");
        let mut x = Tensor::zeros(l, d);
        for (i, &t) in ctx.iter().enumerate() {
            let row = x.row_mut(i);
            row.copy_from_slice(tok_emb.row(t as usize));
            axpy(1.0, pos_emb.row(i), row);
        }
        let x0 = x.clone();

        let mut layers = Vec::with_capacity(self.cfg.decoder_layers);
        let mut cross_scores = Vec::with_capacity(self.cfg.decoder_layers);
        for layer in 0..self.cfg.decoder_layers {
            let lx0 = x.clone();
            let (normed1, inv1) = rmsnorm_rows(&lx0);
            let (self_out, self_attn) =
                self.attn_fwd(&format!("dec{layer}.self"), &normed1, &normed1, true, None);
            let mut x1 = lx0.clone();
            x1.add_assign(&self_out);
            let (normed2, inv2) = rmsnorm_rows(&x1);
            let (cross_out, cross_attn) = self.attn_fwd(
                &format!("dec{layer}.cross"),
                &normed2,
                &enc.out,
                false,
                Some(&enc.cross_kv[layer]),
            );
            let mut x2 = x1.clone();
            x2.add_assign(&cross_out);
            let (normed3, inv3) = rmsnorm_rows(&x2);
            let (mlp_out, mlp) = self.mlp_fwd(&format!("dec{layer}.mlp"), &normed3);
            x = x2.clone();
            x.add_assign(&mlp_out);
            cross_scores.push(cross_attn.scores.clone());
            layers.push(DecLayerCache {
                x0: lx0,
                inv1,
                normed1,
                self_attn,
                x1,
                inv2,
                normed2,
                cross_attn,
                x2,
                inv3,
                normed3,
                mlp,
            });
        }
        let pre_final = x;
        let (final_normed, final_inv) = rmsnorm_rows(&pre_final);
        let logits = linear_fwd(&final_normed, tok_emb);
        let values_t = linear_fwd(&final_normed, self.params.get("value_head"));
        let values = values_t.data;

        Ok(DecodeTrace {
            ctx,
            query_len: query.len(),
            response_len: response.len(),
            logits,
            values,
            cross_scores,
            layers,
            x0,
            pre_final,
            final_inv,
            final_normed,
        })
    }

    /// Convenience wrapper: traced encode + decode.
    pub fn forward(
        &self,
        image: &GridImage,
        query: &[TokenId],
        response: &[TokenId],
    ) -> Result<(ImageEncoding, DecodeTrace), ModelError> {
        let enc = self.encode_image(image, true)?;
        let dec = self.decode(&enc, query, response)?;
        Ok((enc, dec))
    }

    /// Backpropagate `d_logits` (ctx_len x vocab) and `d_values` (ctx_len)
    /// through decoder and encoder, accumulating parameter gradients.
    pub fn backward(
        &self,
        enc: &ImageEncoding,
        trace: &DecodeTrace,
        d_logits: &Tensor,
        d_values: &[f64],
        grads: &mut ParamSet,
    ) {
        let l = trace.ctx.len();
        let d = self.cfg.embed_dim;

        // Tied LM head and value head.
        let mut d_final_normed = Tensor::zeros(l, d);
        linear_bwd(
            &trace.final_normed,
            self.params.get("tok_emb"),
            d_logits,
            &mut d_final_normed,
            grads.get_mut("tok_emb"),
        );
        let d_values_t = Tensor {
            rows: l,
            cols: 1,
            data: d_values.to_vec(),
        };
        linear_bwd(
            &trace.final_normed,
            self.params.get("value_head"),
            &d_values_t,
            &mut d_final_normed,
            grads.get_mut("value_head"),
        );

        let mut d_x = rmsnorm_bwd_rows(&d_final_normed, &trace.pre_final, &trace.final_inv);
        let mut d_enc_out = Tensor::zeros(enc.out.rows, enc.out.cols);
        for (layer, cache) in trace.layers.iter().enumerate().rev() {
            // x3 = x2 + mlp(norm3(x2))
            let mut d_normed3 = Tensor::zeros(l, d);
            self.mlp_bwd(
                &format!("dec{layer}.mlp"),
                &cache.mlp,
                &cache.normed3,
                &d_x,
                &mut d_normed3,
                grads,
            );
            d_x.add_assign(&rmsnorm_bwd_rows(&d_normed3, &cache.x2, &cache.inv3));
            // x2 = x1 + cross(norm2(x1), enc_out)
            let mut d_normed2 = Tensor::zeros(l, d);
            self.attn_bwd(
                &format!("dec{layer}.cross"),
                &cache.cross_attn,
                &cache.normed2,
                &enc.out,
                false,
                &d_x,
                &mut d_normed2,
                &mut d_enc_out,
                grads,
            );
            d_x.add_assign(&rmsnorm_bwd_rows(&d_normed2, &cache.x1, &cache.inv2));
            // x1 = x0 + self(norm1(x0))
            let mut d_normed1 = Tensor::zeros(l, d);
            let mut d_normed1_kv = Tensor::zeros(l, d);
            self.attn_bwd(
                &format!("dec{layer}.self"),
                &cache.self_attn,
                &cache.normed1,
                &cache.normed1,
                true,
                &d_x,
                &mut d_normed1,
                &mut d_normed1_kv,
                grads,
            );
            d_normed1.add_assign(&d_normed1_kv);
            d_x.add_assign(&rmsnorm_bwd_rows(&d_normed1, &cache.x0, &cache.inv1));
        }
        let _ = &trace.x0;

        // Embedding scatter.
        {
            let g_tok = grads.get_mut("tok_emb");
            for (i, &t) in trace.ctx.iter().enumerate() {
                axpy(1.0, d_x.row(i), g_tok.row_mut(t as usize));
            }
        }
        {
            let g_pos = grads.get_mut("pos_emb");
            for i in 0..l {
                axpy(1.0, d_x.row(i), g_pos.row_mut(i));
            }
        }

        self.encoder_backward(enc, &d_enc_out, grads);
    }

    // -- incremental decoding ---------------------------------------------------

    /// Fresh incremental decoding state for one context.
    pub fn begin_decode(&self, enc: &ImageEncoding) -> Result<DecoderState, ModelError> {
        if enc.out.rows == 0 {
            return Err(ModelError::BadConfig("empty encoding".into()));
        }
        let d = self.cfg.embed_dim;
        Ok(DecoderState {
            k_self: (0..self.cfg.decoder_layers)
                .map(|_| Tensor::zeros(self.cfg.max_ctx, d))
                .collect(),
            v_self: (0..self.cfg.decoder_layers)
                .map(|_| Tensor::zeros(self.cfg.max_ctx, d))
                .collect(),
            len: 0,
            last_logits: Vec::new(),
            last_value: 0.0,
        })
    }

    /// Push one token through the decoder, reusing cached self-attention
    /// keys/values of earlier positions. Produces bit-identical logits and
    /// values to a full [`decode`](Self::decode) over the same context.
    pub fn decode_step(
        &self,
        enc: &ImageEncoding,
        state: &mut DecoderState,
        token: TokenId,
    ) -> Result<(), ModelError> {
        if state.len + 1 > self.cfg.max_ctx {
            return Err(ModelError::LengthOverflow {
                got: state.len + 1,
                max: self.cfg.max_ctx,
            });
        }
        let d = self.cfg.embed_dim;
        let heads = self.cfg.num_heads;
        let dk = self.cfg.head_dim();
        let scale = 1.0 / (dk as f64).sqrt();
        let pos = state.len;

        let matvec = |w: &Tensor, x: &[f64]| -> Vec<f64> {
            (0..w.rows).map(|o| dot(x, w.row(o))).collect()
        };

        let mut x = self.params.get("tok_emb").row(token as usize).to_vec();
        axpy(1.0, self.params.get("pos_emb").row(pos), &mut x);

        for l in 0..self.cfg.decoder_layers {
            // Causal self-attention over cached positions plus this one.
            let normed1 = rmsnorm_row(&x);
            let q = matvec(self.params.get(&format!("dec{l}.self.wq")), &normed1);
            let k = matvec(self.params.get(&format!("dec{l}.self.wk")), &normed1);
            let v = matvec(self.params.get(&format!("dec{l}.self.wv")), &normed1);
            state.k_self[l].row_mut(pos).copy_from_slice(&k);
            state.v_self[l].row_mut(pos).copy_from_slice(&v);
            let mut ctx = vec![0.0; d];
            let mut scores = vec![0.0; pos + 1];
            for h in 0..heads {
                let hs = h * dk;
                for (j, s) in scores.iter_mut().enumerate() {
                    *s = scale * dot(&q[hs..hs + dk], &state.k_self[l].row(j)[hs..hs + dk]);
                }
                softmax_inplace(&mut scores);
                for (j, &w) in scores.iter().enumerate() {
                    axpy(w, &state.v_self[l].row(j)[hs..hs + dk], &mut ctx[hs..hs + dk]);
                }
            }
            let attn_out = matvec(self.params.get(&format!("dec{l}.self.wo")), &ctx);
            for (xi, a) in x.iter_mut().zip(&attn_out) {
                *xi += a;
            }

            // Cross-attention into the precomputed patch keys/values.
            let normed2 = rmsnorm_row(&x);
            let qc = matvec(self.params.get(&format!("dec{l}.cross.wq")), &normed2);
            let (kc, vc) = &enc.cross_kv[l];
            let mut ctx = vec![0.0; d];
            let mut cscores = vec![0.0; enc.patch_count];
            for h in 0..heads {
                let hs = h * dk;
                for (j, s) in cscores.iter_mut().enumerate() {
                    *s = scale * dot(&qc[hs..hs + dk], &kc.row(j)[hs..hs + dk]);
                }
                softmax_inplace(&mut cscores);
                for (j, &w) in cscores.iter().enumerate() {
                    axpy(w, &vc.row(j)[hs..hs + dk], &mut ctx[hs..hs + dk]);
                }
            }
            let cross_out = matvec(self.params.get(&format!("dec{l}.cross.wo")), &ctx);
            for (xi, a) in x.iter_mut().zip(&cross_out) {
                *xi += a;
            }

            // Feed-forward.
            let normed3 = rmsnorm_row(&x);
            let mut h1 = matvec(self.params.get(&format!("dec{l}.mlp.fc1")), &normed3);
            h1.iter_mut().for_each(|v| {
                if *v < 0.0 {
                    *v = 0.0;
                }
            });
            let mlp_out = matvec(self.params.get(&format!("dec{l}.mlp.fc2")), &h1);
            for (xi, a) in x.iter_mut().zip(&mlp_out) {
                *xi += a;
            }
        }

        let xf = rmsnorm_row(&x);
        state.last_logits = matvec(self.params.get("tok_emb"), &xf);
        state.last_value = dot(&xf, self.params.get("value_head").row(0));
        state.len += 1;
        Ok(())
    }

    /// Build an incremental state primed with `[BOS] query [SEP]`; the
    /// state's logits then predict the first response token.
    pub fn prefill(&self, enc: &ImageEncoding, query: &[TokenId]) -> Result<DecoderState, ModelError> {
        let mut state = self.begin_decode(enc)?;
        self.decode_step(enc, &mut state, self.vocab.bos())?;
        for &t in query {
            self.decode_step(enc, &mut state, t)?;
        }
        self.decode_step(enc, &mut state, self.vocab.sep())?;
        Ok(state)
    }

    // -- checkpointing ---------------------------------------------------------

    /// Write a self-describing JSON checkpoint (config, vocab, parameters).
    /// JSON float round-tripping is exact, so a reload reproduces forward
    /// outputs bit for bit.
    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let file = std::fs::File::create(path)?;
        let ckpt = Checkpoint {
            config: self.cfg.clone(),
            vocab: self.vocab.clone(),
            params: self.params.clone(),
        };
        serde_json::to_writer(BufWriter::new(file), &ckpt)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let file = std::fs::File::open(path)?;
        let mut ckpt: Checkpoint = serde_json::from_reader(BufReader::new(file))?;
        ckpt.vocab.rebuild_index();
        ckpt.config.validate()?;
        Ok(Self {
            cfg: ckpt.config,
            vocab: ckpt.vocab,
            params: ckpt.params,
        })
    }
}

/// Incremental decoder state: per-layer self-attention key/value caches plus
/// the newest position's outputs. Cheap to clone, so a shared prefix can be
/// forked across sampling candidates.
#[derive(Clone)]
pub struct DecoderState {
    k_self: Vec<Tensor>,
    v_self: Vec<Tensor>,
    len: usize,
    last_logits: Vec<f64>,
    last_value: f64,
}

impl DecoderState {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Next-token logits after the last pushed position.
    pub fn last_logits(&self) -> &[f64] {
        &self.last_logits
    }

    pub fn last_value(&self) -> f64 {
        self.last_value
    }
}

fn rmsnorm_row(x: &[f64]) -> Vec<f64> {
    let ms = dot(x, x) / x.len() as f64;
    let ri = (ms + RMS_EPS).sqrt().recip();
    x.iter().map(|&v| v * ri).collect()
}

fn rmsnorm_rows(x: &Tensor) -> (Tensor, Vec<f64>) {
    let mut out = Tensor::zeros(x.rows, x.cols);
    let mut inv = Vec::with_capacity(x.rows);
    let n = x.cols as f64;
    for i in 0..x.rows {
        let row = x.row(i);
        let ms = dot(row, row) / n;
        let ri = (ms + RMS_EPS).sqrt().recip();
        inv.push(ri);
        for (o, &v) in out.row_mut(i).iter_mut().zip(row) {
            *o = v * ri;
        }
    }
    (out, inv)
}

fn rmsnorm_bwd_rows(dy: &Tensor, x: &Tensor, inv: &[f64]) -> Tensor {
    let mut dx = Tensor::zeros(x.rows, x.cols);
    let n = x.cols as f64;
    for i in 0..x.rows {
        let ri = inv[i];
        let xr = x.row(i);
        let dyr = dy.row(i);
        let proj = dot(dyr, xr) * ri * ri * ri / n;
        for ((d, &dyv), &xv) in dx.row_mut(i).iter_mut().zip(dyr).zip(xr) {
            *d = ri * dyv - proj * xv;
        }
    }
    dx
}
