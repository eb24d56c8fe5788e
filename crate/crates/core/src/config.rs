//! Run configuration as a flat `key = value` text file.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown and repeated
//! keys are errors, as is any value that violates a precondition of the
//! module it feeds; the error names the offending key. Every key has a
//! default, so an empty file is a valid configuration.
//!
//! | key | default | meaning |
//! | --- | --- | --- |
//! | `seed` | `0` | master seed for initialization, sampling and k-means |
//! | `data` | *(empty)* | feature file; empty means synthetic blobs |
//! | `data.seed` | `seed` | seed of the synthetic generator |
//! | `blobs.classes` | `40` | synthetic classes |
//! | `blobs.per_class` | `30` | synthetic samples per class |
//! | `blobs.dim` | `16` | synthetic feature width |
//! | `blobs.center_scale` | `1.0` | centers uniform in `±center_scale` |
//! | `blobs.informative` | `6` | leading coordinates in which class centers differ |
//! | `blobs.noise` | `0.3` | per-coordinate noise standard deviation |
//! | `split.fraction` | `0.5` | fraction of classes (lowest ids) used for training |
//! | `backbone.hidden` | `64` | comma-separated hidden widths, may be empty |
//! | `embed_dim` | `32` | embedding width `d` |
//! | `mpn.steps` | `1` | message passing steps |
//! | `mpn.heads` | `2` | attention heads per step |
//! | `mpn.ff_dim` | `2·embed_dim` | feed-forward hidden width |
//! | `mpn.include_self` | `true` | nodes attend to themselves |
//! | `mpn.score_scale` | `embedding` | `embedding` (√d) or `head` (√(d/M)) |
//! | `mpn.norm_eps` | `1e-5` | layer norm epsilon |
//! | `loss.temperature` | `0.1` | softmax temperature |
//! | `loss.smoothing` | `0.1` | label smoothing |
//! | `loss.aux_weight` | `1.0` | weight of the backbone loss |
//! | `loss.mpn` | `true` | cross-entropy on refined features |
//! | `loss.aux` | `true` | cross-entropy on backbone features |
//! | `opt.lr_mpn` | `1e-3` | learning rate of message passing and classifier heads |
//! | `opt.lr_backbone` | `1e-2` | learning rate of the backbone |
//! | `opt.beta1`, `opt.beta2`, `opt.eps` | `0.9`, `0.999`, `1e-8` | RAdam moments |
//! | `opt.weight_decay` | `0` | decoupled weight decay |
//! | `batch.classes` | `10` | classes per batch `n` |
//! | `batch.per_class` | `6` | samples per class `p` |
//! | `epochs` | `30` | epochs of `⌈N_train / (n·p)⌉` batches |
//! | `infer.mode` | `backbone` | `backbone` or `mpn-reciprocal` |
//! | `infer.k` | `10` | neighbourhood size for reciprocal batches |
//! | `infer.alpha` | `0.6666666666666666` | expansion overlap threshold |
//! | `infer.k_r` | `10` | reciprocal batch size |
//! | `eval.ks` | `1,2,4,8` | Recall@K cutoffs |
//! | `eval.clusters` | classes present | k-means clusters for NMI |
//! | `kmeans.max_iter`, `kmeans.tol`, `kmeans.restarts` | `300`, `1e-6`, `1` | clustering |
//! | `out_dir` | `out` | where commands write artifacts by default |

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::batching::BlobParams;
use crate::error::{Error, Result};
use crate::inference::ReciprocalParams;
use crate::metrics::KMeansConfig;
use crate::model::{MpnConfig, ScoreScale};
use crate::objective::{LossConfig, RAdamConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InferMode {
    Backbone,
    MpnReciprocal,
}

impl InferMode {
    pub fn name(self) -> &'static str {
        match self {
            InferMode::Backbone => "backbone",
            InferMode::MpnReciprocal => "mpn-reciprocal",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "backbone" => Some(InferMode::Backbone),
            "mpn-reciprocal" => Some(InferMode::MpnReciprocal),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub data: Option<PathBuf>,
    pub data_seed: Option<u64>,
    pub blobs: BlobParams,
    pub split_fraction: f64,
    pub hidden: Vec<usize>,
    pub mpn: MpnConfig,
    pub loss: LossConfig,
    pub opt_mpn: RAdamConfig,
    pub opt_backbone: RAdamConfig,
    pub classes_per_batch: usize,
    pub samples_per_class: usize,
    pub epochs: usize,
    pub infer_mode: InferMode,
    pub infer_k: usize,
    pub infer_alpha: f64,
    pub infer_batch: usize,
    pub eval_ks: Vec<usize>,
    pub eval_clusters: Option<usize>,
    pub kmeans: KMeansConfig,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            data: None,
            data_seed: None,
            blobs: BlobParams {
                classes: 40,
                per_class: 30,
                dim: 16,
                informative: 6,
                center_scale: 1.0,
                noise: 0.3,
            },
            split_fraction: 0.5,
            hidden: vec![64],
            mpn: MpnConfig::default(),
            loss: LossConfig::default(),
            opt_mpn: RAdamConfig::default(),
            opt_backbone: RAdamConfig {
                lr: 1e-2,
                ..RAdamConfig::default()
            },
            classes_per_batch: 10,
            samples_per_class: 6,
            epochs: 30,
            infer_mode: InferMode::Backbone,
            infer_k: 10,
            infer_alpha: 2.0 / 3.0,
            infer_batch: 10,
            eval_ks: vec![1, 2, 4, 8],
            eval_clusters: None,
            kmeans: KMeansConfig::default(),
            out_dir: PathBuf::from("out"),
        }
    }
}

fn value<T: FromStr>(key: &str, raw: &str) -> Result<T> {
    raw.parse()
        .map_err(|_| Error::config(key, format!("cannot parse `{raw}`")))
}

fn list(key: &str, raw: &str) -> Result<Vec<usize>> {
    if raw.trim().is_empty() {
        return Ok(Vec::new());
    }
    raw.split(',').map(|p| value(key, p.trim())).collect()
}

fn join(xs: &[usize]) -> String {
    xs.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

impl RunConfig {
    /// Defaults for the built-in gradient check: a 12-sample batch (4 classes
    /// × 3) through `d = 8`, two heads and two message passing steps.
    pub fn gradcheck_default() -> Self {
        let mut cfg = RunConfig {
            blobs: BlobParams {
                classes: 8,
                per_class: 6,
                dim: 6,
                informative: 6,
                center_scale: 1.0,
                noise: 0.3,
            },
            hidden: vec![12],
            classes_per_batch: 4,
            samples_per_class: 3,
            ..RunConfig::default()
        };
        cfg.mpn.dim = 8;
        cfg.mpn.steps = 2;
        cfg.mpn.heads = 2;
        cfg.mpn.ff_dim = 16;
        cfg
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = BTreeSet::new();
        let mut ff_set = false;
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, raw) = line.split_once('=').ok_or_else(|| {
                Error::config(
                    format!("line {}", i + 1),
                    format!("expected `key = value`, got `{line}`"),
                )
            })?;
            let (key, raw) = (key.trim(), raw.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::config(key, "given more than once"));
            }
            if key == "mpn.ff_dim" {
                ff_set = true;
            }
            cfg.set(key, raw)?;
        }
        if !ff_set {
            cfg.mpn.ff_dim = 2 * cfg.mpn.dim;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies one `key = value` pair.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        match key {
            "seed" => self.seed = value(key, raw)?,
            "data" => {
                self.data = if raw.is_empty() {
                    None
                } else {
                    Some(PathBuf::from(raw))
                }
            }
            "data.seed" => self.data_seed = Some(value(key, raw)?),
            "blobs.classes" => self.blobs.classes = value(key, raw)?,
            "blobs.per_class" => self.blobs.per_class = value(key, raw)?,
            "blobs.dim" => self.blobs.dim = value(key, raw)?,
            "blobs.informative" => self.blobs.informative = value(key, raw)?,
            "blobs.center_scale" => self.blobs.center_scale = value(key, raw)?,
            "blobs.noise" => self.blobs.noise = value(key, raw)?,
            "split.fraction" => self.split_fraction = value(key, raw)?,
            "backbone.hidden" => self.hidden = list(key, raw)?,
            "embed_dim" => self.mpn.dim = value(key, raw)?,
            "mpn.steps" => self.mpn.steps = value(key, raw)?,
            "mpn.heads" => self.mpn.heads = value(key, raw)?,
            "mpn.ff_dim" => self.mpn.ff_dim = value(key, raw)?,
            "mpn.include_self" => self.mpn.include_self = value(key, raw)?,
            "mpn.score_scale" => {
                self.mpn.score_scale = ScoreScale::parse(raw)
                    .ok_or_else(|| Error::config(key, "expected `embedding` or `head`"))?
            }
            "mpn.norm_eps" => self.mpn.norm_eps = value(key, raw)?,
            "loss.temperature" => self.loss.temperature = value(key, raw)?,
            "loss.smoothing" => self.loss.smoothing = value(key, raw)?,
            "loss.aux_weight" => self.loss.aux_weight = value(key, raw)?,
            "loss.mpn" => self.loss.use_mpn_loss = value(key, raw)?,
            "loss.aux" => self.loss.use_aux_loss = value(key, raw)?,
            "opt.lr_mpn" => self.opt_mpn.lr = value(key, raw)?,
            "opt.lr_backbone" => self.opt_backbone.lr = value(key, raw)?,
            "opt.beta1" => {
                let v = value(key, raw)?;
                self.opt_mpn.beta1 = v;
                self.opt_backbone.beta1 = v;
            }
            "opt.beta2" => {
                let v = value(key, raw)?;
                self.opt_mpn.beta2 = v;
                self.opt_backbone.beta2 = v;
            }
            "opt.eps" => {
                let v = value(key, raw)?;
                self.opt_mpn.eps = v;
                self.opt_backbone.eps = v;
            }
            "opt.weight_decay" => {
                let v = value(key, raw)?;
                self.opt_mpn.weight_decay = v;
                self.opt_backbone.weight_decay = v;
            }
            "batch.classes" => self.classes_per_batch = value(key, raw)?,
            "batch.per_class" => self.samples_per_class = value(key, raw)?,
            "epochs" => self.epochs = value(key, raw)?,
            "infer.mode" => {
                self.infer_mode = InferMode::parse(raw)
                    .ok_or_else(|| Error::config(key, "expected `backbone` or `mpn-reciprocal`"))?
            }
            "infer.k" => self.infer_k = value(key, raw)?,
            "infer.alpha" => self.infer_alpha = value(key, raw)?,
            "infer.k_r" => self.infer_batch = value(key, raw)?,
            "eval.ks" => self.eval_ks = list(key, raw)?,
            "eval.clusters" => self.eval_clusters = Some(value(key, raw)?),
            "kmeans.max_iter" => self.kmeans.max_iter = value(key, raw)?,
            "kmeans.tol" => self.kmeans.tol = value(key, raw)?,
            "kmeans.restarts" => self.kmeans.restarts = value(key, raw)?,
            "out_dir" => self.out_dir = PathBuf::from(raw),
            _ => return Err(Error::config(key, "unknown key")),
        }
        Ok(())
    }

    pub fn data_seed(&self) -> u64 {
        self.data_seed.unwrap_or(self.seed)
    }

    pub fn batch_size(&self) -> usize {
        self.classes_per_batch * self.samples_per_class
    }

    pub fn reciprocal(&self) -> ReciprocalParams {
        ReciprocalParams {
            k: self.infer_k,
            alpha: self.infer_alpha,
            batch_size: self.infer_batch,
        }
    }

    /// Checks everything that can be checked without the data.
    pub fn validate(&self) -> Result<()> {
        if self.data.is_none() {
            self.blobs.validate()?;
        }
        if !(self.split_fraction > 0.0 && self.split_fraction < 1.0) {
            return Err(Error::config("split.fraction", "must be in (0, 1)"));
        }
        if self.hidden.contains(&0) {
            return Err(Error::config(
                "backbone.hidden",
                "layer widths must be positive",
            ));
        }
        self.mpn.validate()?;
        self.loss.validate()?;
        self.opt_mpn.validate("opt.")?;
        if !(self.opt_backbone.lr > 0.0) || !self.opt_backbone.lr.is_finite() {
            return Err(Error::config("opt.lr_backbone", "must be positive"));
        }
        if !(self.opt_mpn.lr.is_finite()) {
            return Err(Error::config("opt.lr_mpn", "must be positive"));
        }
        if self.classes_per_batch == 0 {
            return Err(Error::config("batch.classes", "must be positive"));
        }
        if self.samples_per_class == 0 {
            return Err(Error::config("batch.per_class", "must be positive"));
        }
        self.reciprocal().validate()?;
        if self.eval_ks.is_empty() || self.eval_ks.contains(&0) {
            return Err(Error::config(
                "eval.ks",
                "need one or more positive cutoffs",
            ));
        }
        if self.eval_clusters == Some(0) {
            return Err(Error::config("eval.clusters", "must be positive"));
        }
        if self.kmeans.max_iter == 0 {
            return Err(Error::config("kmeans.max_iter", "must be positive"));
        }
        if !(self.kmeans.tol >= 0.0) {
            return Err(Error::config("kmeans.tol", "must be non-negative"));
        }
        if self.kmeans.restarts == 0 {
            return Err(Error::config("kmeans.restarts", "must be positive"));
        }
        Ok(())
    }

    /// Every key with its resolved value, in a form [`RunConfig::parse`]
    /// reads back to an equal config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").unwrap();
        kv("seed", self.seed.to_string());
        kv(
            "data",
            self.data
                .as_ref()
                .map_or(String::new(), |p| p.display().to_string()),
        );
        if let Some(ds) = self.data_seed {
            kv("data.seed", ds.to_string());
        }
        kv("blobs.classes", self.blobs.classes.to_string());
        kv("blobs.per_class", self.blobs.per_class.to_string());
        kv("blobs.dim", self.blobs.dim.to_string());
        kv("blobs.informative", self.blobs.informative.to_string());
        kv(
            "blobs.center_scale",
            format!("{:?}", self.blobs.center_scale),
        );
        kv("blobs.noise", format!("{:?}", self.blobs.noise));
        kv("split.fraction", format!("{:?}", self.split_fraction));
        kv("backbone.hidden", join(&self.hidden));
        kv("embed_dim", self.mpn.dim.to_string());
        kv("mpn.steps", self.mpn.steps.to_string());
        kv("mpn.heads", self.mpn.heads.to_string());
        kv("mpn.ff_dim", self.mpn.ff_dim.to_string());
        kv("mpn.include_self", self.mpn.include_self.to_string());
        kv("mpn.score_scale", self.mpn.score_scale.name().to_string());
        kv("mpn.norm_eps", format!("{:?}", self.mpn.norm_eps));
        kv("loss.temperature", format!("{:?}", self.loss.temperature));
        kv("loss.smoothing", format!("{:?}", self.loss.smoothing));
        kv("loss.aux_weight", format!("{:?}", self.loss.aux_weight));
        kv("loss.mpn", self.loss.use_mpn_loss.to_string());
        kv("loss.aux", self.loss.use_aux_loss.to_string());
        kv("opt.lr_mpn", format!("{:?}", self.opt_mpn.lr));
        kv("opt.lr_backbone", format!("{:?}", self.opt_backbone.lr));
        kv("opt.beta1", format!("{:?}", self.opt_mpn.beta1));
        kv("opt.beta2", format!("{:?}", self.opt_mpn.beta2));
        kv("opt.eps", format!("{:?}", self.opt_mpn.eps));
        kv(
            "opt.weight_decay",
            format!("{:?}", self.opt_mpn.weight_decay),
        );
        kv("batch.classes", self.classes_per_batch.to_string());
        kv("batch.per_class", self.samples_per_class.to_string());
        kv("epochs", self.epochs.to_string());
        kv("infer.mode", self.infer_mode.name().to_string());
        kv("infer.k", self.infer_k.to_string());
        kv("infer.alpha", format!("{:?}", self.infer_alpha));
        kv("infer.k_r", self.infer_batch.to_string());
        kv("eval.ks", join(&self.eval_ks));
        if let Some(c) = self.eval_clusters {
            kv("eval.clusters", c.to_string());
        }
        kv("kmeans.max_iter", self.kmeans.max_iter.to_string());
        kv("kmeans.tol", format!("{:?}", self.kmeans.tol));
        kv("kmeans.restarts", self.kmeans.restarts.to_string());
        kv("out_dir", self.out_dir.display().to_string());
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key_of(r: Result<RunConfig>) -> String {
        match r {
            Err(Error::Config { key, .. }) => key,
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn empty_file_is_defaults() {
        let cfg = RunConfig::parse("# nothing\n\n").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.mpn.ff_dim, 64);
        assert_eq!(cfg.reciprocal().batch_size, 10);
    }

    #[test]
    fn ff_dim_follows_embed_dim() {
        let cfg = RunConfig::parse("embed_dim = 16").unwrap();
        assert_eq!(cfg.mpn.ff_dim, 32);
        let cfg = RunConfig::parse("embed_dim = 16\nmpn.ff_dim = 5").unwrap();
        assert_eq!(cfg.mpn.ff_dim, 5);
    }

    #[test]
    fn errors_name_the_key() {
        assert_eq!(key_of(RunConfig::parse("bogus = 1")), "bogus");
        assert_eq!(key_of(RunConfig::parse("epochs = -3")), "epochs");
        assert_eq!(key_of(RunConfig::parse("seed = 1\nseed = 2")), "seed");
        assert_eq!(
            key_of(RunConfig::parse("embed_dim = 30\nmpn.heads = 4")),
            "mpn.heads"
        );
        assert_eq!(
            key_of(RunConfig::parse("loss.smoothing = 1.0")),
            "loss.smoothing"
        );
        assert_eq!(
            key_of(RunConfig::parse("loss.mpn = false\nloss.aux = false")),
            "loss.mpn"
        );
        assert_eq!(key_of(RunConfig::parse("infer.alpha = 2")), "infer.alpha");
        assert_eq!(key_of(RunConfig::parse("eval.ks = 1,0")), "eval.ks");
        assert_eq!(
            key_of(RunConfig::parse("split.fraction = 1")),
            "split.fraction"
        );
        assert_eq!(
            key_of(RunConfig::parse("mpn.score_scale = sqrt")),
            "mpn.score_scale"
        );
    }

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig::parse(
            "seed = 9\ndata.seed = 4\nbackbone.hidden = 8,4\nmpn.include_self = false\n\
             infer.mode = mpn-reciprocal\ninfer.k_r = 7\neval.clusters = 3\nloss.aux_weight = 0.25",
        )
        .unwrap();
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
        cfg.hidden.clear();
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }
}
