//! End-to-end runs driven by a [`RunConfig`]: data, training, embedding,
//! evaluation and the model-level gradient check.
//!
//! Every function here is a pure function of the config (and of the model or
//! data passed in); two calls with equal inputs produce bit-identical output.

use std::collections::BTreeMap;
use std::fmt;

use crate::batching::{
    load_dataset, make_blobs, sample_batch, zero_shot_split, LabeledDataset, Side, SplitSpec,
};
use crate::config::{InferMode, RunConfig};
use crate::error::{Error, Result};
use crate::gradcheck::{grad_check_with, GradCheckOptions};
use crate::graph::{Graph, Var};
use crate::inference::{extract_backbone_embeddings, refine_all, RetrievalIndex};
use crate::metrics::{evaluate, EvalReport};
use crate::model::{
    backbone_forward, classify, mpn_forward, param_group, Model, ModelConfig, ModelParams,
};
use crate::objective::{combined_loss, LossConfig, LossTerms, RAdam};
use crate::rng::{stream, Rng};
use crate::tensor::Tensor;

/// The configured feature file, or synthetic blobs drawn from `data.seed`.
pub fn load_data(cfg: &RunConfig) -> Result<LabeledDataset> {
    match &cfg.data {
        Some(path) => load_dataset(path),
        None => synthetic_data(cfg),
    }
}

pub fn synthetic_data(cfg: &RunConfig) -> Result<LabeledDataset> {
    make_blobs(
        &mut Rng::new(cfg.data_seed()).fork(stream::DATA),
        &cfg.blobs,
    )
}

pub fn split(cfg: &RunConfig, ds: &LabeledDataset) -> Result<SplitSpec> {
    zero_shot_split(ds, cfg.split_fraction)
}

pub fn model_config(cfg: &RunConfig, ds: &LabeledDataset, split: &SplitSpec) -> ModelConfig {
    ModelConfig {
        input_dim: ds.dim(),
        hidden: cfg.hidden.clone(),
        classes: split.train_classes.len(),
        mpn: cfg.mpn.clone(),
    }
}

/// Mean loss terms over the batches of one epoch. A term that is switched
/// off is `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub total: f64,
    pub mpn: Option<f64>,
    pub aux: Option<f64>,
}

impl fmt::Display for EpochLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let opt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.6}"));
        write!(
            f,
            "epoch {} total {:.6} mpn {} aux {}",
            self.epoch,
            self.total,
            opt(self.mpn),
            opt(self.aux)
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<EpochLog>,
}

/// Loss of one batch under `params`. The message passing block is skipped
/// entirely when its loss is off.
pub fn batch_loss(
    g: &mut Graph,
    config: &ModelConfig,
    loss: &LossConfig,
    params: &ModelParams<Var>,
    x: &Tensor,
    labels: &[usize],
) -> Result<LossTerms> {
    let xv = g.leaf(x.clone());
    let h0 = backbone_forward(g, &params.backbone, xv)?;
    let mpn_logits = if loss.use_mpn_loss {
        let h = mpn_forward(g, &config.mpn, &params.mpn, h0)?;
        Some(classify(g, &params.classifier.mpn, h)?)
    } else {
        None
    };
    let aux_logits = if loss.use_aux_loss {
        Some(classify(g, &params.classifier.backbone, h0)?)
    } else {
        None
    };
    combined_loss(g, loss, mpn_logits, aux_logits, labels)
}

fn training_view(
    ds: &LabeledDataset,
    split: &SplitSpec,
) -> Result<(LabeledDataset, BTreeMap<usize, usize>)> {
    let train = ds.side(split, Side::Train)?;
    let remap = split
        .train_classes
        .iter()
        .enumerate()
        .map(|(i, &c)| (c, i))
        .collect();
    Ok((train, remap))
}

fn check_geometry(cfg: &RunConfig, split: &SplitSpec) -> Result<()> {
    let available = split.train_classes.len();
    if cfg.classes_per_batch > available {
        return Err(Error::config(
            "batch.classes",
            format!(
                "{} classes per batch but the training split has {available}",
                cfg.classes_per_batch
            ),
        ));
    }
    Ok(())
}

pub fn train(cfg: &RunConfig, ds: &LabeledDataset, split: &SplitSpec) -> Result<TrainOutcome> {
    train_with(cfg, ds, split, |_| {})
}

/// Trains a fresh model, calling `on_epoch` after every epoch.
///
/// The backbone and the rest of the network (message passing and both
/// classifier heads) have separate optimizers and learning rates.
pub fn train_with(
    cfg: &RunConfig,
    ds: &LabeledDataset,
    split: &SplitSpec,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_geometry(cfg, split)?;
    let mconf = model_config(cfg, ds, split);
    let (train_ds, remap) = training_view(ds, split)?;

    let root = Rng::new(cfg.seed);
    let mut model = Model::init(mconf, &mut root.fork(stream::INIT))?;
    model.seed = cfg.seed;
    let mut sampler = root.fork(stream::SAMPLER);

    let is_backbone: Vec<bool> = model
        .params
        .named()
        .iter()
        .map(|(n, _)| n.starts_with("backbone."))
        .collect();
    let pick = |all: &[Tensor], want: bool| -> Vec<Tensor> {
        all.iter()
            .zip(&is_backbone)
            .filter(|(_, &b)| b == want)
            .map(|(t, _)| t.clone())
            .collect()
    };
    let flat = model.params.flatten();
    let mut opt_backbone = RAdam::new(cfg.opt_backbone.clone(), &pick(&flat, true));
    let mut opt_rest = RAdam::new(cfg.opt_mpn.clone(), &pick(&flat, false));

    let batches = train_ds.len().div_ceil(cfg.batch_size()).max(1);
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let (mut total, mut mpn, mut aux) = (0.0, 0.0, 0.0);
        for _ in 0..batches {
            let batch = sample_batch(
                &train_ds,
                &split.train_classes,
                cfg.classes_per_batch,
                cfg.samples_per_class,
                &mut sampler,
            )?;
            let x = train_ds.features().select_rows(&batch.rows);
            let y: Vec<usize> = batch.labels.iter().map(|l| remap[l]).collect();

            let mut g = Graph::new();
            let pv = model.params.bind(&mut g);
            let terms = batch_loss(&mut g, &model.config, &cfg.loss, &pv, &x, &y)?;
            let value = g.value(terms.total).item();
            if !value.is_finite() {
                return Err(Error::Divergence(format!(
                    "loss became {value} in epoch {epoch}"
                )));
            }
            total += value;
            mpn += terms.mpn.map_or(0.0, |v| g.value(v).item());
            aux += terms.aux.map_or(0.0, |v| g.value(v).item());

            let grads = g.backward(terms.total)?;
            let mut flat_grads = Vec::new();
            pv.visit(&mut |_, v| flat_grads.push(grads.wrt(*v)));
            let flat = model.params.flatten();

            let mut bb = pick(&flat, true);
            let mut rest = pick(&flat, false);
            opt_backbone.step(&mut bb, &pick(&flat_grads, true))?;
            opt_rest.step(&mut rest, &pick(&flat_grads, false))?;
            let (mut bb, mut rest) = (bb.into_iter(), rest.into_iter());
            let merged = is_backbone
                .iter()
                .map(|&b| if b { bb.next() } else { rest.next() }.expect("parameter count"))
                .collect();
            model.params = model.params.rebuild(merged)?;
        }
        let n = batches as f64;
        let entry = EpochLog {
            epoch,
            total: total / n,
            mpn: cfg.loss.use_mpn_loss.then_some(mpn / n),
            aux: (cfg.loss.use_aux_loss && cfg.loss.aux_weight > 0.0).then_some(aux / n),
        };
        on_epoch(&entry);
        log.push(entry);
    }
    Ok(TrainOutcome { model, log })
}

/// Fails when a loaded model does not have the shapes `cfg` and the data
/// call for.
pub fn check_compatible(cfg: &RunConfig, model: &Model, ds: &LabeledDataset) -> Result<()> {
    let m = &model.config;
    let mut bad = Vec::new();
    if m.input_dim != ds.dim() {
        bad.push(format!("input width {} vs data {}", m.input_dim, ds.dim()));
    }
    if m.hidden != cfg.hidden {
        bad.push(format!(
            "backbone.hidden {:?} vs {:?}",
            m.hidden, cfg.hidden
        ));
    }
    if m.mpn != cfg.mpn {
        bad.push(format!(
            "message passing settings differ (embed_dim {} vs {}, steps {} vs {}, heads {} vs {})",
            m.mpn.dim, cfg.mpn.dim, m.mpn.steps, cfg.mpn.steps, m.mpn.heads, cfg.mpn.heads
        ));
    }
    if bad.is_empty() {
        Ok(())
    } else {
        Err(Error::Checkpoint(format!(
            "checkpoint does not match config: {}",
            bad.join("; ")
        )))
    }
}

/// Unit-norm embeddings of `ds` under `mode`.
pub fn embed(
    cfg: &RunConfig,
    model: &Model,
    ds: &LabeledDataset,
    mode: InferMode,
) -> Result<RetrievalIndex> {
    let backbone = extract_backbone_embeddings(model, ds)?;
    match mode {
        InferMode::Backbone => Ok(backbone.index),
        InferMode::MpnReciprocal => refine_all(model, &backbone, &cfg.reciprocal()),
    }
}

/// Recall@K for `eval.ks` and NMI with k-means seeded from the run seed.
pub fn evaluate_index(cfg: &RunConfig, index: &RetrievalIndex) -> Result<EvalReport> {
    let mut rng = Rng::new(cfg.seed).fork(stream::KMEANS);
    evaluate(
        index,
        &cfg.eval_ks,
        cfg.eval_clusters,
        &mut rng,
        &cfg.kmeans,
    )
}

/// Worst relative error of one parameter group.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupCheck {
    pub group: String,
    pub max_rel_error: f64,
    pub entries: usize,
}

#[derive(Debug, Clone)]
pub struct ModelGradCheck {
    pub groups: Vec<GroupCheck>,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl ModelGradCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }

    /// One `group <name> <error> <PASS|FAIL>` line per group and a final
    /// `gradcheck` line.
    pub fn render(&self) -> String {
        let verdict = |e: f64| if e <= self.tolerance { "PASS" } else { "FAIL" };
        let mut s = String::new();
        for g in &self.groups {
            s.push_str(&format!(
                "group {} {:.3e} {}\n",
                g.group,
                g.max_rel_error,
                verdict(g.max_rel_error)
            ));
        }
        s.push_str(&format!(
            "gradcheck max_rel_error {:.3e} tolerance {:.1e} {}\n",
            self.max_rel_error,
            self.tolerance,
            verdict(self.max_rel_error)
        ));
        s
    }
}

/// Finite-difference check of every model parameter on one training batch
/// of the configured data, with both loss terms as configured.
pub fn gradcheck_model(cfg: &RunConfig, opts: GradCheckOptions) -> Result<ModelGradCheck> {
    cfg.validate()?;
    let ds = load_data(cfg)?;
    let split = split(cfg, &ds)?;
    check_geometry(cfg, &split)?;
    let mconf = model_config(cfg, &ds, &split);
    let (train_ds, remap) = training_view(&ds, &split)?;
    let root = Rng::new(cfg.seed);
    let model = Model::init(mconf, &mut root.fork(stream::INIT))?;
    let batch = sample_batch(
        &train_ds,
        &split.train_classes,
        cfg.classes_per_batch,
        cfg.samples_per_class,
        &mut root.fork(stream::GRADCHECK),
    )?;
    let x = train_ds.features().select_rows(&batch.rows);
    let y: Vec<usize> = batch.labels.iter().map(|l| remap[l]).collect();

    let report = grad_check_with(&model.params.flatten(), opts, |g, vars| {
        let mut it = vars.iter();
        let pv = model
            .params
            .map(&mut |_| *it.next().expect("one var per parameter"));
        Ok(batch_loss(g, &model.config, &cfg.loss, &pv, &x, &y)?.total)
    })?;

    let mut groups: Vec<GroupCheck> = Vec::new();
    for ((name, t), err) in model.params.named().iter().zip(&report.per_param) {
        let group = param_group(name);
        match groups.iter_mut().find(|g| g.group == group) {
            Some(g) => {
                g.max_rel_error = g.max_rel_error.max(*err);
                g.entries += t.len();
            }
            None => groups.push(GroupCheck {
                group,
                max_rel_error: *err,
                entries: t.len(),
            }),
        }
    }
    Ok(ModelGradCheck {
        groups,
        max_rel_error: report.max_rel_error,
        tolerance: report.tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> RunConfig {
        let mut cfg = RunConfig::gradcheck_default();
        cfg.epochs = 2;
        cfg
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = tiny();
        let ds = load_data(&cfg).unwrap();
        let sp = split(&cfg, &ds).unwrap();
        let a = train(&cfg, &ds, &sp).unwrap();
        let b = train(&cfg, &ds, &sp).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.log, b.log);
        assert_eq!(a.log.len(), 2);
    }

    #[test]
    fn mpn_params_frozen_without_mpn_loss() {
        let mut cfg = tiny();
        cfg.loss.use_mpn_loss = false;
        let ds = load_data(&cfg).unwrap();
        let sp = split(&cfg, &ds).unwrap();
        let out = train(&cfg, &ds, &sp).unwrap();
        let init = Model::init(
            model_config(&cfg, &ds, &sp),
            &mut Rng::new(cfg.seed).fork(stream::INIT),
        )
        .unwrap();
        assert_eq!(out.model.params.mpn, init.params.mpn);
        assert_eq!(out.model.params.classifier.mpn, init.params.classifier.mpn);
        assert_ne!(out.model.params.backbone, init.params.backbone);
        assert!(out.log.iter().all(|e| e.mpn.is_none()));
    }

    #[test]
    fn too_many_classes_per_batch() {
        let mut cfg = tiny();
        cfg.classes_per_batch = 5;
        let ds = load_data(&cfg).unwrap();
        let sp = split(&cfg, &ds).unwrap();
        match train(&cfg, &ds, &sp) {
            Err(Error::Config { key, .. }) => assert_eq!(key, "batch.classes"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn epoch_line() {
        let e = EpochLog {
            epoch: 3,
            total: 1.5,
            mpn: Some(1.0),
            aux: None,
        };
        assert_eq!(e.to_string(), "epoch 3 total 1.500000 mpn 1.000000 aux -");
    }
}
