//! Transformer encoder with temporal-kernel attention and the two task heads.
//!
//! Per time step the input is `[values ⊙ mask, mask]` (missing values carry
//! no content, only the observation flag). Blocks are pre-norm:
//!
//! ```text
//! x ← x + Wₒ·concat_h(Â_h · LN(x)W_v,h)
//! x ← x + FFN(LN(x))
//! ```
//!
//! followed by a final layer norm and either a pooled logit (classification)
//! or a per-position regression head (masked-value probe).

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{attention_node, check_qk_shape, AttentionHeadParams, AttentionNodes};
use crate::data::Window;
use crate::error::{config, contract, Error, Result};
use crate::graph::{sigmoid, Graph, NodeId};
use crate::kernels::{kernel_nodes, temporal_features, KernelParams, KernelSpec};
use crate::matrix::Matrix;
use crate::params::{Gradients, ParamGroup, ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Classify,
    Masked,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    Mean,
    Max,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub task: Task,
    pub channels: usize,
    /// Sequence length `T`.
    pub window: usize,
    pub layers: usize,
    pub heads: usize,
    /// Per-head width; the model width is `heads × d_k`.
    pub d_k: usize,
    pub d_ff: usize,
    pub kernel: KernelSpec,
    pub positional_encoding: bool,
    pub causal: bool,
    pub pooling: Pooling,
    /// Initial period of the periodic kernel, in steps.
    pub init_period: f64,
}

impl ModelConfig {
    /// Three layers, two heads of width 8.
    pub fn classifier(channels: usize, window: usize) -> Self {
        Self {
            task: Task::Classify,
            channels,
            window,
            layers: 3,
            heads: 2,
            d_k: 8,
            d_ff: 32,
            kernel: KernelSpec::VANILLA,
            positional_encoding: true,
            causal: false,
            pooling: Pooling::Mean,
            init_period: 12.0,
        }
    }

    /// One layer, one head, width 8.
    pub fn probe(channels: usize, window: usize) -> Self {
        Self {
            task: Task::Masked,
            layers: 1,
            heads: 1,
            d_k: 8,
            d_ff: 16,
            ..Self::classifier(channels, window)
        }
    }

    pub fn d_model(&self) -> usize {
        self.heads * self.d_k
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("channels", self.channels),
            ("window", self.window),
            ("layers", self.layers),
            ("heads", self.heads),
            ("dk", self.d_k),
            ("d_ff", self.d_ff),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(config(format!("{name} must be at least 1")));
            }
        }
        if !(self.init_period > 1.0 && self.init_period.is_finite()) {
            return Err(config("init_period must exceed 1"));
        }
        check_qk_shape(self.kernel.apply, self.kernel.mode, self.window, self.d_k)
    }
}

#[derive(Debug, Clone, PartialEq)]
enum KernelIds {
    Fixed(ParamId),
    Adaptive { weight: ParamId, bias: ParamId },
}

#[derive(Debug, Clone, PartialEq)]
struct HeadIds {
    w_query: ParamId,
    w_key: ParamId,
    w_value: ParamId,
    kernel: KernelIds,
}

#[derive(Debug, Clone, PartialEq)]
struct BlockIds {
    ln1: (ParamId, ParamId),
    heads: Vec<HeadIds>,
    w_out: ParamId,
    b_out: ParamId,
    ln2: (ParamId, ParamId),
    ff_w1: ParamId,
    ff_b1: ParamId,
    ff_w2: ParamId,
    ff_b2: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
struct ModelIds {
    embed_w: ParamId,
    embed_b: ParamId,
    mask_token: Option<ParamId>,
    blocks: Vec<BlockIds>,
    ln_final: (ParamId, ParamId),
    head_w: ParamId,
    head_b: ParamId,
}

/// Parameter initializer: Xavier-uniform weights, zero biases, unit norm gains.
struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn xavier(&mut self, rows: usize, cols: usize) -> Matrix {
        let limit = libm::sqrt(6.0 / (rows + cols) as f64);
        Matrix::from_fn(rows, cols, |_, _| self.rng.random_range(-limit..limit))
    }
}

fn add_head(
    store: &mut ParamStore,
    init: &mut Init,
    prefix: &str,
    d_in: usize,
    cfg: &ModelConfig,
) -> HeadIds {
    let w_query = store.add(format!("{prefix}.w_query"), ParamGroup::Weight, init.xavier(d_in, cfg.d_k));
    let w_key = store.add(format!("{prefix}.w_key"), ParamGroup::Weight, init.xavier(d_in, cfg.d_k));
    let w_value = store.add(format!("{prefix}.w_value"), ParamGroup::Weight, init.xavier(d_in, cfg.d_k));
    let raw = KernelParams::near_flat(cfg.window, cfg.init_period)
        .to_raw()
        .expect("near-flat kernel parameters are valid");
    let raw_row = Matrix::from_rows(&[raw]);
    let kernel = if cfg.kernel.adaptive {
        KernelIds::Adaptive {
            weight: store.add(format!("{prefix}.kernel.adaptive_w"), ParamGroup::Kernel, Matrix::zeros(4, 4)),
            bias: store.add(format!("{prefix}.kernel.adaptive_b"), ParamGroup::Kernel, raw_row),
        }
    } else {
        KernelIds::Fixed(store.add(format!("{prefix}.kernel.raw"), ParamGroup::Kernel, raw_row))
    };
    HeadIds {
        w_query,
        w_key,
        w_value,
        kernel,
    }
}

fn layer_norm_params(store: &mut ParamStore, prefix: &str, d: usize) -> (ParamId, ParamId) {
    (
        store.add(format!("{prefix}.gain"), ParamGroup::Weight, Matrix::ones(1, d)),
        store.add(format!("{prefix}.bias"), ParamGroup::Weight, Matrix::zeros(1, d)),
    )
}

fn build_layout(cfg: &ModelConfig, seed: u64) -> (ParamStore, ModelIds) {
    let mut init = Init {
        rng: ChaCha8Rng::seed_from_u64(seed),
    };
    let mut store = ParamStore::new();
    let d = cfg.d_model();
    let embed_w = store.add("embed.weight", ParamGroup::Weight, init.xavier(2 * cfg.channels, d));
    let embed_b = store.add("embed.bias", ParamGroup::Weight, Matrix::zeros(1, d));
    let mask_token = (cfg.task == Task::Masked)
        .then(|| store.add("embed.mask_token", ParamGroup::Weight, init.xavier(1, d)));
    let mut blocks = Vec::with_capacity(cfg.layers);
    for l in 0..cfg.layers {
        let p = format!("layer{l}");
        let ln1 = layer_norm_params(&mut store, &format!("{p}.ln1"), d);
        let heads = (0..cfg.heads)
            .map(|h| add_head(&mut store, &mut init, &format!("{p}.head{h}"), d, cfg))
            .collect();
        let w_out = store.add(format!("{p}.attn_out.weight"), ParamGroup::Weight, init.xavier(d, d));
        let b_out = store.add(format!("{p}.attn_out.bias"), ParamGroup::Weight, Matrix::zeros(1, d));
        let ln2 = layer_norm_params(&mut store, &format!("{p}.ln2"), d);
        let ff_w1 = store.add(format!("{p}.ffn.w1"), ParamGroup::Weight, init.xavier(d, cfg.d_ff));
        let ff_b1 = store.add(format!("{p}.ffn.b1"), ParamGroup::Weight, Matrix::zeros(1, cfg.d_ff));
        let ff_w2 = store.add(format!("{p}.ffn.w2"), ParamGroup::Weight, init.xavier(cfg.d_ff, d));
        let ff_b2 = store.add(format!("{p}.ffn.b2"), ParamGroup::Weight, Matrix::zeros(1, d));
        blocks.push(BlockIds {
            ln1,
            heads,
            w_out,
            b_out,
            ln2,
            ff_w1,
            ff_b1,
            ff_w2,
            ff_b2,
        });
    }
    let ln_final = layer_norm_params(&mut store, "final_ln", d);
    let out_dim = match cfg.task {
        Task::Classify => 1,
        Task::Masked => cfg.channels,
    };
    let head_w = store.add("head.weight", ParamGroup::Weight, init.xavier(d, out_dim));
    let head_b = store.add("head.bias", ParamGroup::Weight, Matrix::zeros(1, out_dim));
    let ids = ModelIds {
        embed_w,
        embed_b,
        mask_token,
        blocks,
        ln_final,
        head_w,
        head_b,
    };
    (store, ids)
}

/// Sinusoidal absolute position table, `T × d`.
pub fn positional_encoding(t: usize, d: usize) -> Matrix {
    Matrix::from_fn(t, d, |pos, i| {
        let pair = (i / 2) as f64;
        let angle = pos as f64 / libm::pow(10_000.0, 2.0 * pair / d as f64);
        if i % 2 == 0 {
            libm::sin(angle)
        } else {
            libm::cos(angle)
        }
    })
}

/// Supervision for one window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Target {
    /// Binary event label.
    Label(f64),
    /// Masked-value regression at this position.
    Masked(usize),
}

/// Recorded forward pass of one window.
#[derive(Debug, Clone)]
pub struct Forward {
    pub graph: Graph,
    /// `1×1` logit or `T×C` predictions.
    pub output: NodeId,
    /// `[layer][head]` attention nodes.
    pub attention: Vec<Vec<AttentionNodes>>,
}

/// Masked-value prediction at one position.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedPrediction {
    pub prediction: Vec<f64>,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SatModel {
    config: ModelConfig,
    store: ParamStore,
    ids: ModelIds,
}

impl SatModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (store, ids) = build_layout(&config, seed);
        Ok(Self { config, store, ids })
    }

    /// Reassembles a model from a configuration and previously saved weights.
    pub fn from_parts(config: ModelConfig, store: ParamStore) -> Result<Self> {
        config.validate()?;
        let (layout, ids) = build_layout(&config, 0);
        layout.check_layout(&store)?;
        Ok(Self { config, store, ids })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn into_parts(self) -> (ModelConfig, ParamStore) {
        (self.config, self.store)
    }

    fn check_window(&self, w: &Window) -> Result<()> {
        let want = (self.config.window, self.config.channels);
        if w.values.shape() != want || w.mask.shape() != want {
            return Err(Error::Shape {
                op: "model input",
                lhs: want,
                rhs: w.values.shape(),
            });
        }
        if w.timestamps.len() != self.config.window {
            return Err(contract("one timestamp per time step is required"));
        }
        Ok(())
    }

    /// Records the forward pass against `store` (which must share this
    /// model's layout); `masked` hides one position behind the mask token.
    pub fn forward_with(&self, store: &ParamStore, w: &Window, masked: Option<usize>) -> Result<Forward> {
        self.check_window(w)?;
        let cfg = &self.config;
        let t = cfg.window;
        if let Some(p) = masked {
            if p >= t {
                return Err(contract(format!("masked position {p} outside window of {t} steps")));
            }
            if cfg.task != Task::Masked {
                return Err(contract("masked prediction needs a masked-value model"));
            }
        }
        let mut values = w.values.clone();
        let mut mask = w.mask.clone();
        if let Some(p) = masked {
            values.row_mut(p).fill(0.0);
            mask.row_mut(p).fill(0.0);
        }
        let input = Matrix::from_fn(t, 2 * cfg.channels, |i, j| {
            if j < cfg.channels {
                values[(i, j)] * mask[(i, j)]
            } else {
                mask[(i, j - cfg.channels)]
            }
        });
        let features = if cfg.kernel.adaptive && cfg.kernel.mode != crate::kernels::KernelMode::None {
            Some(temporal_features(&values, &mask, &w.timestamps)?.as_row())
        } else {
            None
        };

        let mut g = Graph::new(store);
        let ids = &self.ids;
        let x_in = g.constant(input);
        let we = g.param(store, ids.embed_w);
        let be = g.param(store, ids.embed_b);
        let mut x = g.matmul(x_in, we)?;
        x = g.add_row(x, be)?;
        if cfg.positional_encoding {
            let pe = g.constant(positional_encoding(t, cfg.d_model()));
            x = g.add(x, pe)?;
        }
        if let (Some(p), Some(tok)) = (masked, ids.mask_token) {
            let mut onehot = Matrix::zeros(t, 1);
            onehot[(p, 0)] = 1.0;
            let oh = g.constant(onehot);
            let tok = g.param(store, tok);
            let placed = g.matmul(oh, tok)?;
            x = g.add(x, placed)?;
        }
        let feat = features.map(|f| g.constant(f));
        let mut attention = Vec::with_capacity(cfg.layers);
        for block in &ids.blocks {
            let (out, att) = block_forward(&mut g, store, block, x, &cfg.kernel, cfg.causal, feat)?;
            x = out;
            attention.push(att);
        }
        x = affine_norm(&mut g, store, x, ids.ln_final)?;
        let hw = g.param(store, ids.head_w);
        let hb = g.param(store, ids.head_b);
        let output = match cfg.task {
            Task::Classify => {
                let pooled = match cfg.pooling {
                    Pooling::Mean => g.mean_rows(x),
                    Pooling::Max => g.max_rows(x),
                };
                let z = g.matmul(pooled, hw)?;
                g.add(z, hb)?
            }
            Task::Masked => {
                let z = g.matmul(x, hw)?;
                g.add_row(z, hb)?
            }
        };
        Ok(Forward {
            graph: g,
            output,
            attention,
        })
    }

    pub fn forward(&self, w: &Window, masked: Option<usize>) -> Result<Forward> {
        self.forward_with(&self.store, w, masked)
    }

    /// Event probability for one window.
    pub fn classify(&self, w: &Window) -> Result<f64> {
        if self.config.task != Task::Classify {
            return Err(contract("classify needs a classification model"));
        }
        let f = self.forward(w, None)?;
        Ok(sigmoid(f.graph.value(f.output)[(0, 0)]))
    }

    pub fn masked_predict(&self, w: &Window, position: usize) -> Result<MaskedPrediction> {
        let mut f = self.forward(w, Some(position))?;
        let loss = record_loss(&mut f, w, Target::Masked(position))?;
        let prediction = f.graph.value(f.output).row(position).to_vec();
        Ok(MaskedPrediction {
            prediction,
            loss: f.graph.value(loss)[(0, 0)],
        })
    }

    /// Loss of one window under `store`, plus the recorded graph.
    pub fn loss_with(&self, store: &ParamStore, w: &Window, target: Target) -> Result<(Forward, NodeId)> {
        let masked = match target {
            Target::Masked(p) => Some(p),
            Target::Label(_) => None,
        };
        let mut f = self.forward_with(store, w, masked)?;
        let loss = record_loss(&mut f, w, target)?;
        Ok((f, loss))
    }

    /// Loss value and parameter gradients for one window.
    pub fn loss_and_grads(&self, w: &Window, target: Target) -> Result<(f64, Gradients)> {
        let (mut f, loss) = self.loss_with(&self.store, w, target)?;
        let grads = f.graph.backward(loss, &self.store)?;
        Ok((f.graph.value(loss)[(0, 0)], grads))
    }

    /// Exact attention matrices of the forward pass, `[layer][head]`.
    pub fn attention_snapshot(&self, w: &Window) -> Result<Vec<Vec<Matrix>>> {
        let f = self.forward(w, None)?;
        Ok(f.attention
            .iter()
            .map(|layer| layer.iter().map(|a| f.graph.value(a.attention).clone()).collect())
            .collect())
    }

    /// Attention of `layer` where row `p` is taken from the pass that masks
    /// position `p`: the rows the masked-value objective actually trains.
    /// Returns one `T×T` matrix per head.
    pub fn masked_attention(&self, w: &Window, layer: usize) -> Result<Vec<Matrix>> {
        if layer >= self.config.layers {
            return Err(contract(format!("layer {layer} out of range")));
        }
        let t = self.config.window;
        let mut out = vec![Matrix::zeros(t, t); self.config.heads];
        for p in 0..t {
            let f = self.forward(w, Some(p))?;
            for (h, a) in f.attention[layer].iter().enumerate() {
                out[h].row_mut(p).copy_from_slice(f.graph.value(a.attention).row(p));
            }
        }
        Ok(out)
    }

    /// Positive kernel parameters of every head, `[layer][head]`. Adaptive
    /// kernels need the window whose features drive them.
    pub fn kernel_params(&self, w: Option<&Window>) -> Result<Vec<Vec<KernelParams>>> {
        let features = match (self.config.kernel.adaptive, w) {
            (true, Some(w)) => Some(temporal_features(&w.values, &w.mask, &w.timestamps)?),
            (true, None) => return Err(contract("adaptive kernels need a window")),
            (false, _) => None,
        };
        self.ids
            .blocks
            .iter()
            .map(|b| {
                b.heads
                    .iter()
                    .map(|h| {
                        let raw = match &h.kernel {
                            KernelIds::Fixed(id) => {
                                let s = self.store.value(*id).as_slice();
                                [s[0], s[1], s[2], s[3]]
                            }
                            KernelIds::Adaptive { weight, bias } => {
                                let f = features.as_ref().expect("checked above");
                                crate::kernels::AdaptiveMap {
                                    weight: self.store.value(*weight).clone(),
                                    bias: self.store.value(*bias).clone(),
                                }
                                .raw(f)?
                            }
                        };
                        Ok(KernelParams::from_raw(raw))
                    })
                    .collect()
            })
            .collect()
    }

    /// Plain-matrix view of one head (for analysis and tests).
    pub fn head_params(&self, layer: usize, head: usize, w: Option<&Window>) -> Result<AttentionHeadParams> {
        let h = &self.ids.blocks[layer].heads[head];
        Ok(AttentionHeadParams {
            w_query: self.store.value(h.w_query).clone(),
            w_key: self.store.value(h.w_key).clone(),
            w_value: self.store.value(h.w_value).clone(),
            kernel: self.kernel_params(w)?[layer][head],
        })
    }

    pub fn param_names(&self) -> Vec<String> {
        self.store.iter().map(|(_, p)| p.name.clone()).collect()
    }
}

fn record_loss(f: &mut Forward, w: &Window, target: Target) -> Result<NodeId> {
    let g = &mut f.graph;
    match target {
        Target::Label(y) => g.bce_with_logits(f.output, y),
        Target::Masked(p) => {
            let pred = g.row(f.output, p)?;
            let observed = w.mask.row(p);
            let n: f64 = observed.iter().sum();
            if n == 0.0 {
                return Err(contract(format!("masked position {p} has no observed value")));
            }
            let target = g.constant(Matrix::from_vec(1, observed.len(), w.values.row(p).to_vec())?);
            let m = g.constant(Matrix::from_vec(1, observed.len(), observed.to_vec())?);
            let diff = g.sub(pred, target)?;
            let diff = g.mul(diff, m)?;
            let sq = g.mul(diff, diff)?;
            let s = g.sum(sq);
            Ok(g.scale(s, 1.0 / n))
        }
    }
}

fn affine_norm(g: &mut Graph, store: &ParamStore, x: NodeId, (gain, bias): (ParamId, ParamId)) -> Result<NodeId> {
    let n = g.layer_norm(x);
    let gn = g.param(store, gain);
    let bn = g.param(store, bias);
    let y = g.mul_row(n, gn)?;
    g.add_row(y, bn)
}

fn head_kernels(
    g: &mut Graph,
    store: &ParamStore,
    head: &HeadIds,
    spec: &KernelSpec,
    t: usize,
    features: Option<NodeId>,
) -> Result<crate::kernels::KernelNodes> {
    let raw = match (&head.kernel, features) {
        (KernelIds::Fixed(id), _) => g.param(store, *id),
        (KernelIds::Adaptive { weight, bias }, Some(f)) => {
            let w = g.param(store, *weight);
            let b = g.param(store, *bias);
            let r = g.matmul(f, w)?;
            g.add(r, b)?
        }
        (KernelIds::Adaptive { .. }, None) => {
            return Err(contract("adaptive kernels need temporal features"));
        }
    };
    kernel_nodes(g, spec.mode, raw, t)
}

/// Multi-head attention sublayer on an already-normalized input: per-head
/// attention, concatenation and output projection. No residual.
fn attention_sublayer(
    g: &mut Graph,
    store: &ParamStore,
    block: &BlockIds,
    h: NodeId,
    spec: &KernelSpec,
    causal: bool,
    features: Option<NodeId>,
) -> Result<(NodeId, Vec<AttentionNodes>)> {
    let t = g.shape(h).0;
    let mut outs = Vec::with_capacity(block.heads.len());
    let mut att = Vec::with_capacity(block.heads.len());
    for head in &block.heads {
        let wq = g.param(store, head.w_query);
        let wk = g.param(store, head.w_key);
        let wv = g.param(store, head.w_value);
        let q = g.matmul(h, wq)?;
        let k = g.matmul(h, wk)?;
        let v = g.matmul(h, wv)?;
        let kernels = if spec.is_identity() {
            crate::kernels::KernelNodes {
                exp: None,
                periodic: None,
            }
        } else {
            head_kernels(g, store, head, spec, t, features)?
        };
        let a = attention_node(g, q, k, kernels, spec.apply, causal)?;
        outs.push(g.matmul(a.attention, v)?);
        att.push(a);
    }
    let cat = g.concat_cols(&outs)?;
    let wo = g.param(store, block.w_out);
    let bo = g.param(store, block.b_out);
    let proj = g.matmul(cat, wo)?;
    Ok((g.add_row(proj, bo)?, att))
}

fn block_forward(
    g: &mut Graph,
    store: &ParamStore,
    block: &BlockIds,
    x: NodeId,
    spec: &KernelSpec,
    causal: bool,
    features: Option<NodeId>,
) -> Result<(NodeId, Vec<AttentionNodes>)> {
    let h = affine_norm(g, store, x, block.ln1)?;
    let (attn, att) = attention_sublayer(g, store, block, h, spec, causal, features)?;
    let x = g.add(x, attn)?;
    let h2 = affine_norm(g, store, x, block.ln2)?;
    let w1 = g.param(store, block.ff_w1);
    let b1 = g.param(store, block.ff_b1);
    let w2 = g.param(store, block.ff_w2);
    let b2 = g.param(store, block.ff_b2);
    let f = g.matmul(h2, w1)?;
    let f = g.add_row(f, b1)?;
    let f = g.gelu(f);
    let f = g.matmul(f, w2)?;
    let f = g.add_row(f, b2)?;
    Ok((g.add(x, f)?, att))
}

/// Plain-matrix weights of one encoder block.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderBlockParams {
    pub heads: Vec<AttentionHeadParams>,
    /// `d_model × d_model`.
    pub w_out: Matrix,
    pub b_out: Matrix,
    pub ln1_gain: Matrix,
    pub ln1_bias: Matrix,
    pub ln2_gain: Matrix,
    pub ln2_bias: Matrix,
    pub ff_w1: Matrix,
    pub ff_b1: Matrix,
    pub ff_w2: Matrix,
    pub ff_b2: Matrix,
}

/// Outputs of [`multi_head_forward`].
#[derive(Debug, Clone, PartialEq)]
pub struct BlockOutput {
    /// Attention sublayer output before the residual connection.
    pub attention_output: Matrix,
    /// Full block output (both residual sublayers applied).
    pub output: Matrix,
    pub attention: Vec<Matrix>,
}

impl EncoderBlockParams {
    /// Registers the block in a fresh store. Kernel parameters are stored in
    /// unconstrained form.
    fn to_store(&self) -> Result<(ParamStore, BlockIds)> {
        let d_model = self.w_out.rows();
        let d_k_total: usize = self.heads.iter().map(|h| h.d_k()).sum();
        if d_k_total != d_model {
            return Err(config(format!(
                "heads × d_k = {d_k_total} must equal the model width {d_model}"
            )));
        }
        let mut s = ParamStore::new();
        let ln1 = (
            s.add("ln1.gain", ParamGroup::Weight, self.ln1_gain.clone()),
            s.add("ln1.bias", ParamGroup::Weight, self.ln1_bias.clone()),
        );
        let mut heads = Vec::new();
        for (i, h) in self.heads.iter().enumerate() {
            heads.push(HeadIds {
                w_query: s.add(format!("head{i}.w_query"), ParamGroup::Weight, h.w_query.clone()),
                w_key: s.add(format!("head{i}.w_key"), ParamGroup::Weight, h.w_key.clone()),
                w_value: s.add(format!("head{i}.w_value"), ParamGroup::Weight, h.w_value.clone()),
                kernel: KernelIds::Fixed(s.add(
                    format!("head{i}.kernel.raw"),
                    ParamGroup::Kernel,
                    Matrix::from_rows(&[h.kernel.to_raw()?]),
                )),
            });
        }
        let ids = BlockIds {
            ln1,
            heads,
            w_out: s.add("attn_out.weight", ParamGroup::Weight, self.w_out.clone()),
            b_out: s.add("attn_out.bias", ParamGroup::Weight, self.b_out.clone()),
            ln2: (
                s.add("ln2.gain", ParamGroup::Weight, self.ln2_gain.clone()),
                s.add("ln2.bias", ParamGroup::Weight, self.ln2_bias.clone()),
            ),
            ff_w1: s.add("ffn.w1", ParamGroup::Weight, self.ff_w1.clone()),
            ff_b1: s.add("ffn.b1", ParamGroup::Weight, self.ff_b1.clone()),
            ff_w2: s.add("ffn.w2", ParamGroup::Weight, self.ff_w2.clone()),
            ff_b2: s.add("ffn.b2", ParamGroup::Weight, self.ff_b2.clone()),
        };
        Ok((s, ids))
    }
}

/// One pre-norm encoder block on `V` (`T × d_model`).
pub fn multi_head_forward(
    v: &Matrix,
    block: &EncoderBlockParams,
    spec: &KernelSpec,
    causal: bool,
) -> Result<BlockOutput> {
    let (store, ids) = block.to_store()?;
    if v.cols() != block.w_out.rows() {
        return Err(Error::Shape {
            op: "multi_head_forward",
            lhs: v.shape(),
            rhs: block.w_out.shape(),
        });
    }
    for h in &block.heads {
        check_qk_shape(spec.apply, spec.mode, v.rows(), h.d_k())?;
    }
    let mut g = Graph::new(&store);
    let x = g.constant(v.clone());
    let h = affine_norm(&mut g, &store, x, ids.ln1)?;
    let (attn, _) = attention_sublayer(&mut g, &store, &ids, h, spec, causal, None)?;
    let attention_output = g.value(attn).clone();
    let (out, att) = block_forward(&mut g, &store, &ids, x, spec, causal, None)?;
    Ok(BlockOutput {
        attention_output,
        output: g.value(out).clone(),
        attention: att.iter().map(|a| g.value(a.attention).clone()).collect(),
    })
}

/// Attention sublayer alone on an already-normalized input (no residual, no
/// layer norm).
pub fn multi_head_attention(h: &Matrix, block: &EncoderBlockParams, spec: &KernelSpec) -> Result<Matrix> {
    let (store, ids) = block.to_store()?;
    let mut g = Graph::new(&store);
    let x = g.constant(h.clone());
    let (attn, _) = attention_sublayer(&mut g, &store, &ids, x, spec, false, None)?;
    Ok(g.value(attn).clone())
}
