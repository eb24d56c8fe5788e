//! Backbone encoder, attention message passing over the batch graph, and the
//! two classification heads.
//!
//! Parameter containers are generic over the handle type `P`: the same
//! structure holds [`Tensor`]s at rest and [`Var`]s while bound to a
//! [`Graph`]. [`ModelParams::map`] converts between the two and
//! [`ModelParams::visit`] walks every tensor in a fixed order with a stable
//! dotted name, which is what the optimizer, the checkpoint writer and the
//! gradient checker all key on.

mod checkpoint;

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// How raw attention scores are scaled before the softmax.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreScale {
    /// Divide by `sqrt(d)`, the full embedding width.
    Embedding,
    /// Divide by `sqrt(d / M)`, the per-head width.
    Head,
}

impl ScoreScale {
    pub fn name(self) -> &'static str {
        match self {
            ScoreScale::Embedding => "embedding",
            ScoreScale::Head => "head",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "embedding" => Some(ScoreScale::Embedding),
            "head" => Some(ScoreScale::Head),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MpnConfig {
    /// Number of message passing steps.
    pub steps: usize,
    /// Attention heads per step.
    pub heads: usize,
    /// Embedding width `d`.
    pub dim: usize,
    /// Hidden width of the feed-forward block.
    pub ff_dim: usize,
    /// Whether a node attends to itself.
    pub include_self: bool,
    pub score_scale: ScoreScale,
    pub norm_eps: f64,
}

impl Default for MpnConfig {
    fn default() -> Self {
        MpnConfig {
            steps: 1,
            heads: 2,
            dim: 32,
            ff_dim: 64,
            include_self: true,
            score_scale: ScoreScale::Embedding,
            norm_eps: 1e-5,
        }
    }
}

impl MpnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps < 1 {
            return Err(Error::config("mpn.steps", "must be at least 1"));
        }
        if self.heads < 1 {
            return Err(Error::config("mpn.heads", "must be at least 1"));
        }
        if self.dim < 2 {
            return Err(Error::config("embed_dim", "must be at least 2"));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::config(
                "mpn.heads",
                format!(
                    "embedding width {} not divisible by {} heads",
                    self.dim, self.heads
                ),
            ));
        }
        if self.ff_dim < 1 {
            return Err(Error::config("mpn.ff_dim", "must be at least 1"));
        }
        if !(self.norm_eps > 0.0) {
            return Err(Error::config("mpn.norm_eps", "must be positive"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    fn score_divisor(&self) -> f64 {
        match self.score_scale {
            ScoreScale::Embedding => (self.dim as f64).sqrt(),
            ScoreScale::Head => (self.head_dim() as f64).sqrt(),
        }
    }
}

/// Shapes of everything outside the message passing block.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub input_dim: usize,
    /// Hidden widths of the backbone MLP, between `input_dim` and `mpn.dim`.
    pub hidden: Vec<usize>,
    pub classes: usize,
    pub mpn: MpnConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.mpn.validate()?;
        if self.input_dim < 1 {
            return Err(Error::config("input_dim", "must be positive"));
        }
        if self.hidden.contains(&0) {
            return Err(Error::config(
                "backbone.hidden",
                "layer widths must be positive",
            ));
        }
        if self.classes < 2 {
            return Err(Error::config("classes", "need at least 2 training classes"));
        }
        Ok(())
    }
}

/// `y = x · weightᵀ + bias` with `weight` stored `[out × in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<P = Tensor> {
    pub weight: P,
    pub bias: P,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormParams<P = Tensor> {
    pub gain: P,
    pub bias: P,
}

/// Per-head projections, each `[d/M × d]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionHead<P = Tensor> {
    pub query: P,
    pub key: P,
    pub value: P,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MpnLayer<P = Tensor> {
    pub heads: Vec<AttentionHead<P>>,
    pub ff1: Linear<P>,
    pub ff2: Linear<P>,
    pub norm1: NormParams<P>,
    pub norm2: NormParams<P>,
}

/// ReLU MLP; the last layer is linear. No layers means identity.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone<P = Tensor> {
    pub layers: Vec<Linear<P>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Classifier<P = Tensor> {
    /// Head on the refined (message-passed) features.
    pub mpn: Linear<P>,
    /// Auxiliary head directly on the backbone features.
    pub backbone: Linear<P>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<P = Tensor> {
    pub backbone: Backbone<P>,
    pub mpn: Vec<MpnLayer<P>>,
    pub classifier: Classifier<P>,
}

impl<P> Linear<P> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a P)) {
        f(format!("{prefix}.weight"), &self.weight);
        f(format!("{prefix}.bias"), &self.bias);
    }

    fn map<Q>(&self, f: &mut dyn FnMut(&P) -> Q) -> Linear<Q> {
        Linear {
            weight: f(&self.weight),
            bias: f(&self.bias),
        }
    }
}

impl<P> NormParams<P> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a P)) {
        f(format!("{prefix}.gain"), &self.gain);
        f(format!("{prefix}.bias"), &self.bias);
    }

    fn map<Q>(&self, f: &mut dyn FnMut(&P) -> Q) -> NormParams<Q> {
        NormParams {
            gain: f(&self.gain),
            bias: f(&self.bias),
        }
    }
}

impl<P> MpnLayer<P> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a P)) {
        for (m, h) in self.heads.iter().enumerate() {
            f(format!("{prefix}.head.{m}.query"), &h.query);
            f(format!("{prefix}.head.{m}.key"), &h.key);
            f(format!("{prefix}.head.{m}.value"), &h.value);
        }
        self.ff1.visit(&format!("{prefix}.ff1"), f);
        self.ff2.visit(&format!("{prefix}.ff2"), f);
        self.norm1.visit(&format!("{prefix}.norm1"), f);
        self.norm2.visit(&format!("{prefix}.norm2"), f);
    }

    fn map<Q>(&self, f: &mut dyn FnMut(&P) -> Q) -> MpnLayer<Q> {
        MpnLayer {
            heads: self
                .heads
                .iter()
                .map(|h| AttentionHead {
                    query: f(&h.query),
                    key: f(&h.key),
                    value: f(&h.value),
                })
                .collect(),
            ff1: self.ff1.map(f),
            ff2: self.ff2.map(f),
            norm1: self.norm1.map(f),
            norm2: self.norm2.map(f),
        }
    }
}

impl<P> ModelParams<P> {
    /// Walks every parameter in canonical order.
    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a P)) {
        for (i, l) in self.backbone.layers.iter().enumerate() {
            l.visit(&format!("backbone.{i}"), f);
        }
        for (i, l) in self.mpn.iter().enumerate() {
            l.visit(&format!("mpn.{i}"), f);
        }
        self.classifier.mpn.visit("classifier.mpn", f);
        self.classifier.backbone.visit("classifier.backbone", f);
    }

    pub fn map<Q>(&self, f: &mut dyn FnMut(&P) -> Q) -> ModelParams<Q> {
        ModelParams {
            backbone: Backbone {
                layers: self.backbone.layers.iter().map(|l| l.map(f)).collect(),
            },
            mpn: self.mpn.iter().map(|l| l.map(f)).collect(),
            classifier: Classifier {
                mpn: self.classifier.mpn.map(f),
                backbone: self.classifier.backbone.map(f),
            },
        }
    }

    pub fn named(&self) -> Vec<(String, &P)> {
        let mut out = Vec::new();
        self.visit(&mut |n, p| out.push((n, p)));
        out
    }
}

impl ModelParams<Tensor> {
    pub fn flatten(&self) -> Vec<Tensor> {
        let mut out = Vec::new();
        self.visit(&mut |_, p| out.push(p.clone()));
        out
    }

    /// Same structure, tensors taken in canonical order from `values`.
    pub fn rebuild(&self, values: Vec<Tensor>) -> Result<ModelParams<Tensor>> {
        let mut it = values.into_iter();
        let mut bad = None;
        let out = self.map(&mut |old| {
            let new = it.next().unwrap_or_else(|| Tensor::zeros(&[0]));
            if new.shape() != old.shape() && bad.is_none() {
                bad = Some((old.shape().to_vec(), new.shape().to_vec()));
            }
            new
        });
        if let Some((lhs, rhs)) = bad {
            return Err(Error::Shape {
                op: "rebuild params",
                lhs,
                rhs,
            });
        }
        if it.next().is_some() {
            return Err(Error::Param(
                "too many tensors for parameter structure".into(),
            ));
        }
        Ok(out)
    }

    pub fn bind(&self, g: &mut Graph) -> ModelParams<Var> {
        self.map(&mut |t| g.leaf(t.clone()))
    }

    pub fn count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.len());
        n
    }
}

/// Parameter group used for per-group reporting: the backbone as a whole,
/// each attention projection of each head separately, the feed-forward and
/// normalization blocks of each step, and the two classifier heads.
pub fn param_group(name: &str) -> String {
    let parts: Vec<&str> = name.split('.').collect();
    match parts.as_slice() {
        ["backbone", ..] => "backbone".into(),
        ["mpn", l, "head", m, proj] => format!("mpn.{l}.head.{m}.{proj}"),
        ["mpn", l, ff, _] if ff.starts_with("ff") => format!("mpn.{l}.ff"),
        ["mpn", l, norm, _] if norm.starts_with("norm") => format!("mpn.{l}.norm"),
        ["classifier", head, _] => format!("classifier.{head}"),
        _ => name.into(),
    }
}

fn glorot(rng: &mut Rng, out_dim: usize, in_dim: usize) -> Tensor {
    let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
    let data = (0..out_dim * in_dim)
        .map(|_| rng.uniform(-limit, limit))
        .collect();
    Tensor::new(vec![out_dim, in_dim], data).expect("glorot shape")
}

fn linear(rng: &mut Rng, out_dim: usize, in_dim: usize) -> Linear {
    Linear {
        weight: glorot(rng, out_dim, in_dim),
        bias: Tensor::zeros(&[out_dim]),
    }
}

fn norm(dim: usize) -> NormParams {
    NormParams {
        gain: Tensor::full(&[dim], 1.0),
        bias: Tensor::zeros(&[dim]),
    }
}

/// A configured network plus the seed it was initialized from.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
    pub seed: u64,
}

impl Model {
    /// Glorot-uniform linear maps, zero biases, unit-gain norms.
    pub fn init(config: ModelConfig, rng: &mut Rng) -> Result<Model> {
        config.validate()?;
        let d = config.mpn.dim;
        let mut widths = vec![config.input_dim];
        widths.extend(&config.hidden);
        widths.push(d);
        let backbone = Backbone {
            layers: widths.windows(2).map(|w| linear(rng, w[1], w[0])).collect(),
        };
        let hd = config.mpn.head_dim();
        let mpn = (0..config.mpn.steps)
            .map(|_| MpnLayer {
                heads: (0..config.mpn.heads)
                    .map(|_| AttentionHead {
                        query: glorot(rng, hd, d),
                        key: glorot(rng, hd, d),
                        value: glorot(rng, hd, d),
                    })
                    .collect(),
                ff1: linear(rng, config.mpn.ff_dim, d),
                ff2: linear(rng, d, config.mpn.ff_dim),
                norm1: norm(d),
                norm2: norm(d),
            })
            .collect();
        let classifier = Classifier {
            mpn: linear(rng, config.classes, d),
            backbone: linear(rng, config.classes, d),
        };
        Ok(Model {
            config,
            params: ModelParams {
                backbone,
                mpn,
                classifier,
            },
            seed: rng.seed(),
        })
    }

    /// Backbone embeddings for every row of `x`, unnormalized.
    pub fn embed(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let bb = self.params.backbone.map(&mut |t| g.leaf(t.clone()));
        let xv = g.leaf(x.clone());
        let h = backbone_forward(&mut g, &bb, xv)?;
        Ok(g.value(h).clone())
    }

    /// Runs all message passing steps over the batch `h0`.
    pub fn refine(&self, h0: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let layers: Vec<MpnLayer<Var>> = self
            .params
            .mpn
            .iter()
            .map(|l| l.map(&mut |t| g.leaf(t.clone())))
            .collect();
        let hv = g.leaf(h0.clone());
        let out = mpn_forward(&mut g, &self.config.mpn, &layers, hv)?;
        Ok(g.value(out).clone())
    }

    /// Attention matrix of one head of one step, evaluated on `h`.
    pub fn attention(&self, step: usize, head: usize, h: &Tensor) -> Result<Tensor> {
        let layer = self
            .params
            .mpn
            .get(step)
            .ok_or_else(|| Error::Param(format!("no message passing step {step}")))?;
        let mut g = Graph::new();
        let lv = layer.map(&mut |t| g.leaf(t.clone()));
        let hv = g.leaf(h.clone());
        let a = attention_scores(&mut g, &self.config.mpn, &lv, head, hv)?;
        Ok(g.value(a).clone())
    }
}

impl<P> Backbone<P> {
    fn map<Q>(&self, f: &mut dyn FnMut(&P) -> Q) -> Backbone<Q> {
        Backbone {
            layers: self.layers.iter().map(|l| l.map(f)).collect(),
        }
    }
}

pub fn linear_forward(g: &mut Graph, layer: &Linear<Var>, x: Var) -> Result<Var> {
    let y = g.matmul_t(x, layer.weight)?;
    g.add_bias(y, layer.bias)
}

pub fn backbone_forward(g: &mut Graph, backbone: &Backbone<Var>, x: Var) -> Result<Var> {
    let mut h = x;
    for (i, layer) in backbone.layers.iter().enumerate() {
        h = linear_forward(g, layer, h)?;
        if i + 1 < backbone.layers.len() {
            h = g.relu(h);
        }
    }
    Ok(h)
}

/// Row-normalized attention of one head: row `i` holds the weights node `i`
/// gives to every incoming message.
pub fn attention_scores(
    g: &mut Graph,
    cfg: &MpnConfig,
    layer: &MpnLayer<Var>,
    head: usize,
    h: Var,
) -> Result<Var> {
    let p = layer.heads.get(head).ok_or_else(|| {
        Error::Param(format!(
            "head {head} out of range for {} heads",
            layer.heads.len()
        ))
    })?;
    let q = g.matmul_t(h, p.query)?;
    let k = g.matmul_t(h, p.key)?;
    let raw = g.matmul_t(q, k)?;
    let mut scores = g.scale(raw, 1.0 / cfg.score_divisor());
    if !cfg.include_self {
        let b = g.value(scores).rows();
        if b < 2 {
            return Err(Error::Param(
                "self-excluded attention needs at least two nodes".into(),
            ));
        }
        let mut mask = Tensor::zeros(&[b, b]);
        for i in 0..b {
            mask.data_mut()[i * b + i] = f64::NEG_INFINITY;
        }
        let mask = g.leaf(mask);
        scores = g.add(scores, mask)?;
    }
    g.row_softmax(scores)
}

/// One message passing step: multi-head attention aggregation, residual and
/// norm, then feed-forward with a second residual and norm.
pub fn mpn_step(g: &mut Graph, cfg: &MpnConfig, layer: &MpnLayer<Var>, h: Var) -> Result<Var> {
    let (_, d) = g.value(h).as_matrix("mpn_step")?;
    if d != cfg.dim {
        return Err(Error::Shape {
            op: "mpn_step",
            lhs: g.value(h).shape().to_vec(),
            rhs: vec![cfg.dim],
        });
    }
    let mut head_out = Vec::with_capacity(layer.heads.len());
    for (m, p) in layer.heads.iter().enumerate() {
        let attn = attention_scores(g, cfg, layer, m, h)?;
        let messages = g.matmul_t(h, p.value)?;
        head_out.push(g.matmul(attn, messages)?);
    }
    let agg = g.concat(&head_out)?;
    let res = g.add(agg, h)?;
    let f = g.layer_norm(res, layer.norm1.gain, layer.norm1.bias, cfg.norm_eps)?;
    let hidden = linear_forward(g, &layer.ff1, f)?;
    let hidden = g.relu(hidden);
    let ff = linear_forward(g, &layer.ff2, hidden)?;
    let res = g.add(ff, f)?;
    g.layer_norm(res, layer.norm2.gain, layer.norm2.bias, cfg.norm_eps)
}

pub fn mpn_forward(
    g: &mut Graph,
    cfg: &MpnConfig,
    layers: &[MpnLayer<Var>],
    h0: Var,
) -> Result<Var> {
    if layers.len() != cfg.steps {
        return Err(Error::Param(format!(
            "configured for {} message passing steps but given {} layers",
            cfg.steps,
            layers.len()
        )));
    }
    layers
        .iter()
        .try_fold(h0, |h, layer| mpn_step(g, cfg, layer, h))
}

/// Class logits `h · Wᵀ + b`.
pub fn classify(g: &mut Graph, head: &Linear<Var>, h: Var) -> Result<Var> {
    linear_forward(g, head, h)
}
