//! Test-time embeddings.
//!
//! Two ways to embed a split: straight backbone features, or backbone
//! features refined by the message passing block inside a batch built
//! around each query from its reciprocal nearest neighbours. Either way the
//! result is a [`RetrievalIndex`] of unit-norm rows searched exhaustively
//! by Euclidean distance.

use std::collections::BTreeSet;

use crate::batching::LabeledDataset;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::{squared_distance, Tensor};

const EMBED_CHUNK: usize = 256;

/// Unit-norm embeddings with their labels.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalIndex {
    embeddings: Tensor,
    labels: Vec<usize>,
}

impl RetrievalIndex {
    /// Normalizes every row to unit length. Rows already within `1e-12` of
    /// unit norm are kept bit-for-bit, which makes the constructor idempotent
    /// and lets exported embeddings be re-indexed exactly.
    pub fn new(embeddings: Tensor, labels: Vec<usize>) -> Result<Self> {
        let (n, _) = embeddings.as_matrix("retrieval index")?;
        if n != labels.len() {
            return Err(Error::Shape {
                op: "retrieval index labels",
                lhs: embeddings.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        let mut embeddings = embeddings;
        for i in 0..n {
            let row = embeddings.row_mut(i);
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(norm > 0.0) || !norm.is_finite() {
                return Err(Error::Degenerate(format!(
                    "embedding row {i} has norm {norm} and cannot be normalized"
                )));
            }
            if (norm - 1.0).abs() > 1e-12 {
                row.iter_mut().for_each(|v| *v /= norm);
            }
        }
        Ok(RetrievalIndex { embeddings, labels })
    }

    pub fn embeddings(&self) -> &Tensor {
        &self.embeddings
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols()
    }

    pub fn distance(&self, a: usize, b: usize) -> f64 {
        squared_distance(self.embeddings.row(a), self.embeddings.row(b))
    }

    /// Every other row ordered by ascending distance to `q`, ties by index.
    pub fn ranking(&self, q: usize) -> Vec<usize> {
        self.nearest(q, self.len() - 1)
    }

    fn nearest(&self, q: usize, k: usize) -> Vec<usize> {
        let qrow = self.embeddings.row(q);
        let mut cand: Vec<(f64, usize)> = (0..self.len())
            .filter(|&i| i != q)
            .map(|i| (squared_distance(qrow, self.embeddings.row(i)), i))
            .collect();
        let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if k < cand.len() {
            cand.select_nth_unstable_by(k, cmp);
            cand.truncate(k);
        }
        cand.sort_unstable_by(cmp);
        cand.into_iter().map(|(_, i)| i).collect()
    }

    /// Converts back into a labeled dataset, e.g. for export.
    pub fn to_dataset(&self) -> Result<LabeledDataset> {
        LabeledDataset::new(self.embeddings.clone(), self.labels.clone())
    }
}

/// The `k` rows nearest to `q`, excluding `q`, ascending by distance with
/// ties broken by ascending row index.
pub fn knn(index: &RetrievalIndex, q: usize, k: usize) -> Result<Vec<usize>> {
    if q >= index.len() {
        return Err(Error::Param(format!(
            "query {q} out of range for {} rows",
            index.len()
        )));
    }
    if k >= index.len() {
        return Err(Error::Param(format!(
            "k = {k} must be smaller than the index size {}",
            index.len()
        )));
    }
    Ok(index.nearest(q, k))
}

/// Why a row is in a reciprocal batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Query,
    /// In the query's k-NN and has the query in its own k-NN.
    Reciprocal,
    /// Brought in by a reciprocal member's half-size reciprocal set.
    Expanded,
    /// Padding with the query's next nearest rows.
    Fill,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReciprocalParams {
    pub k: usize,
    pub alpha: f64,
    /// Final batch size.
    pub batch_size: usize,
}

impl Default for ReciprocalParams {
    fn default() -> Self {
        ReciprocalParams {
            k: 10,
            alpha: 2.0 / 3.0,
            batch_size: 10,
        }
    }
}

impl ReciprocalParams {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::config("infer.k", "must be at least 2"));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::config("infer.alpha", "must be in [0, 1]"));
        }
        if self.batch_size < 1 {
            return Err(Error::config("infer.k_r", "must be positive"));
        }
        Ok(())
    }

    fn half(&self) -> usize {
        self.k.div_ceil(2)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReciprocalBatch {
    pub query: usize,
    /// Query first, then members by ascending distance to the query.
    pub members: Vec<usize>,
    pub provenance: Vec<Provenance>,
    /// Rows admitted by expansion before truncation.
    pub expanded_admitted: usize,
}

impl ReciprocalBatch {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

/// Builds reciprocal-neighbour batches for many queries of one index,
/// sharing a precomputed k-NN table.
#[derive(Debug)]
pub struct ReciprocalBatcher<'a> {
    index: &'a RetrievalIndex,
    params: ReciprocalParams,
    table: Vec<Vec<usize>>,
}

impl<'a> ReciprocalBatcher<'a> {
    pub fn new(index: &'a RetrievalIndex, params: ReciprocalParams) -> Result<Self> {
        params.validate()?;
        if params.batch_size > index.len() {
            return Err(Error::Param(format!(
                "batch size {} exceeds index size {}",
                params.batch_size,
                index.len()
            )));
        }
        if params.k >= index.len() {
            return Err(Error::Param(format!(
                "k = {} must be smaller than the index size {}",
                params.k,
                index.len()
            )));
        }
        let table = (0..index.len())
            .map(|i| index.nearest(i, params.k))
            .collect();
        Ok(ReciprocalBatcher {
            index,
            params,
            table,
        })
    }

    pub fn params(&self) -> &ReciprocalParams {
        &self.params
    }

    /// `g`'s `k`-NN, a prefix of the cached table.
    pub fn neighbors(&self, g: usize, k: usize) -> &[usize] {
        &self.table[g][..k]
    }

    fn reciprocal(&self, center: usize, k: usize) -> Vec<usize> {
        self.neighbors(center, k)
            .iter()
            .copied()
            .filter(|&g| self.neighbors(g, k).contains(&center))
            .collect()
    }

    pub fn batch(&self, q: usize) -> Result<ReciprocalBatch> {
        if q >= self.index.len() {
            return Err(Error::Param(format!("query {q} out of range")));
        }
        let k = self.params.k;
        let half = self.params.half();

        // Neighbourhood sets include their own center.
        let reciprocal = self.reciprocal(q, k);
        let core: BTreeSet<usize> = std::iter::once(q)
            .chain(reciprocal.iter().copied())
            .collect();

        let mut members: Vec<(usize, Provenance)> = vec![(q, Provenance::Query)];
        members.extend(reciprocal.iter().map(|&g| (g, Provenance::Reciprocal)));
        let mut seen = core.clone();
        let mut expanded_admitted = 0;
        for &g in &reciprocal {
            let rg: Vec<usize> = std::iter::once(g).chain(self.reciprocal(g, half)).collect();
            let overlap = rg.iter().filter(|h| core.contains(h)).count();
            if overlap as f64 >= self.params.alpha * rg.len() as f64 - 1e-12 {
                for h in rg {
                    if seen.insert(h) {
                        members.push((h, Provenance::Expanded));
                        expanded_admitted += 1;
                    }
                }
            }
        }

        let qdist = |i: usize| self.index.distance(q, i);
        members[1..].sort_by(|a, b| qdist(a.0).total_cmp(&qdist(b.0)).then(a.0.cmp(&b.0)));
        members.truncate(self.params.batch_size);
        if members.len() < self.params.batch_size {
            for i in self.index.ranking(q) {
                if members.len() == self.params.batch_size {
                    break;
                }
                if seen.insert(i) {
                    members.push((i, Provenance::Fill));
                }
            }
        }
        let (members, provenance) = members.into_iter().unzip();
        Ok(ReciprocalBatch {
            query: q,
            members,
            provenance,
            expanded_admitted,
        })
    }
}

/// Single-query convenience over [`ReciprocalBatcher`].
pub fn reciprocal_knn_batch(
    index: &RetrievalIndex,
    q: usize,
    params: &ReciprocalParams,
) -> Result<ReciprocalBatch> {
    ReciprocalBatcher::new(index, params.clone())?.batch(q)
}

/// Backbone features of a split, raw and as a normalized index.
#[derive(Debug, Clone)]
pub struct BackboneEmbeddings {
    pub raw: Tensor,
    pub index: RetrievalIndex,
}

pub fn extract_backbone_embeddings(
    model: &Model,
    ds: &LabeledDataset,
) -> Result<BackboneEmbeddings> {
    if ds.dim() != model.config.input_dim {
        return Err(Error::Shape {
            op: "extract embeddings",
            lhs: ds.features().shape().to_vec(),
            rhs: vec![model.config.input_dim],
        });
    }
    let mut parts = Vec::new();
    let rows: Vec<usize> = (0..ds.len()).collect();
    for chunk in rows.chunks(EMBED_CHUNK) {
        parts.push(model.embed(&ds.features().select_rows(chunk))?);
    }
    let mut data = Vec::with_capacity(ds.len() * model.config.mpn.dim);
    for p in parts {
        data.extend(p.into_data());
    }
    let raw = Tensor::new(vec![ds.len(), model.config.mpn.dim], data)?;
    let index = RetrievalIndex::new(raw.clone(), ds.labels().to_vec())?;
    Ok(BackboneEmbeddings { raw, index })
}

/// Refined, unit-norm embedding of `q`: the message passing block is run
/// over the backbone features of `q`'s reciprocal batch.
pub fn refine_with_mpn(
    model: &Model,
    backbone: &BackboneEmbeddings,
    batcher: &ReciprocalBatcher<'_>,
    q: usize,
) -> Result<Vec<f64>> {
    let batch = batcher.batch(q)?;
    let h0 = backbone.raw.select_rows(&batch.members);
    let refined = model.refine(&h0)?;
    let row = refined.row(0);
    let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(Error::Degenerate(format!(
            "refined embedding of row {q} has norm {norm}"
        )));
    }
    Ok(row.iter().map(|v| v / norm).collect())
}

/// Refines every row of the split. Queries are independent, so they are
/// spread over threads; the result does not depend on the thread count.
pub fn refine_all(
    model: &Model,
    backbone: &BackboneEmbeddings,
    params: &ReciprocalParams,
) -> Result<RetrievalIndex> {
    let batcher = ReciprocalBatcher::new(&backbone.index, params.clone())?;
    let n = backbone.index.len();
    let d = model.config.mpn.dim;
    let threads = std::thread::available_parallelism()
        .map_or(1, |t| t.get())
        .min(n.max(1));
    let chunk = n.div_ceil(threads.max(1)).max(1);
    let queries: Vec<usize> = (0..n).collect();
    let results: Vec<Result<Vec<f64>>> = std::thread::scope(|s| {
        let handles: Vec<_> = queries
            .chunks(chunk)
            .map(|qs| {
                let batcher = &batcher;
                s.spawn(move || -> Result<Vec<f64>> {
                    let mut out = Vec::with_capacity(qs.len() * d);
                    for &q in qs {
                        out.extend(refine_with_mpn(model, backbone, batcher, q)?);
                    }
                    Ok(out)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("refinement thread panicked"))
            .collect()
    });
    let mut data = Vec::with_capacity(n * d);
    for r in results {
        data.extend(r?);
    }
    RetrievalIndex::new(
        Tensor::new(vec![n, d], data)?,
        backbone.index.labels().to_vec(),
    )
}

/// Models whose backbone features are concatenated.
#[derive(Debug, Clone)]
pub struct EnsembleSpec {
    pub models: Vec<Model>,
}

impl EnsembleSpec {
    pub fn validate(&self) -> Result<()> {
        if self.models.len() < 2 {
            return Err(Error::Param("an ensemble needs at least two models".into()));
        }
        let first = &self.models[0].config;
        for m in &self.models[1..] {
            if m.config.mpn.dim != first.mpn.dim
                || m.config.input_dim != first.input_dim
                || m.config.classes != first.classes
            {
                return Err(Error::Param(format!(
                    "ensemble members disagree: embed_dim {} vs {}, input_dim {} vs {}",
                    first.mpn.dim, m.config.mpn.dim, first.input_dim, m.config.input_dim
                )));
            }
        }
        Ok(())
    }
}

/// Per-model normalized backbone features, concatenated and re-normalized.
pub fn ensemble_concat(spec: &EnsembleSpec, ds: &LabeledDataset) -> Result<RetrievalIndex> {
    spec.validate()?;
    let parts = spec
        .models
        .iter()
        .map(|m| extract_backbone_embeddings(m, ds).map(|e| e.index.embeddings().clone()))
        .collect::<Result<Vec<_>>>()?;
    RetrievalIndex::new(Tensor::hstack(&parts)?, ds.labels().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn index_2d(points: &[[f64; 2]], labels: &[usize]) -> RetrievalIndex {
        RetrievalIndex::new(Tensor::from_rows(points), labels.to_vec()).unwrap()
    }

    fn arc(angles: &[f64]) -> RetrievalIndex {
        let pts: Vec<[f64; 2]> = angles.iter().map(|a| [a.cos(), a.sin()]).collect();
        index_2d(&pts, &vec![0; angles.len()])
    }

    #[test]
    fn rows_are_unit_and_zero_rejected() {
        let idx = index_2d(&[[3.0, 4.0], [0.0, 2.0]], &[0, 1]);
        for i in 0..2 {
            let n: f64 = idx.embeddings().row(i).iter().map(|v| v * v).sum();
            assert!((n.sqrt() - 1.0).abs() < 1e-9);
        }
        let err = RetrievalIndex::new(Tensor::from_rows(&[[1.0, 0.0], [0.0, 0.0]]), vec![0, 0]);
        assert!(err.unwrap_err().to_string().contains("row 1"));
    }

    #[test]
    fn normalization_is_idempotent() {
        let idx = index_2d(&[[3.0, 4.0], [0.1, 2.0], [-7.0, 1.0]], &[0, 1, 2]);
        let again = RetrievalIndex::new(idx.embeddings().clone(), idx.labels().to_vec()).unwrap();
        assert_eq!(idx, again);
    }

    #[test]
    fn duplicate_point_is_nearest() {
        let idx = index_2d(&[[1.0, 0.0], [1.0, 0.0], [-1.0, 0.2]], &[0, 0, 1]);
        assert_eq!(knn(&idx, 0, 1).unwrap(), vec![1]);
        assert_eq!(knn(&idx, 1, 1).unwrap(), vec![0]);
        assert!(knn(&idx, 0, 3).is_err());
    }

    #[test]
    fn ties_break_by_index() {
        let idx = arc(&[0.0, 0.0, 0.0, 0.0]);
        assert_eq!(knn(&idx, 2, 3).unwrap(), vec![0, 1, 3]);
    }

    #[test]
    fn clique_batch_is_the_clique() {
        // Five identical points far away from three others.
        let idx = arc(&[0.0, 0.0, 0.0, 0.0, 0.0, 2.0, 2.5, 3.0]);
        let p = ReciprocalParams {
            k: 4,
            alpha: 2.0 / 3.0,
            batch_size: 5,
        };
        let b = reciprocal_knn_batch(&idx, 2, &p).unwrap();
        let mut m = b.members.clone();
        m.sort();
        assert_eq!(m, vec![0, 1, 2, 3, 4]);
        assert_eq!(b.provenance[0], Provenance::Query);
        assert!(b.provenance[1..]
            .iter()
            .all(|&t| t == Provenance::Reciprocal));
    }

    #[test]
    fn parameter_errors() {
        let idx = arc(&[0.0, 0.1, 0.2]);
        assert!(reciprocal_knn_batch(
            &idx,
            0,
            &ReciprocalParams {
                k: 2,
                alpha: 0.5,
                batch_size: 4
            }
        )
        .is_err());
        assert!(reciprocal_knn_batch(
            &idx,
            0,
            &ReciprocalParams {
                k: 1,
                alpha: 0.5,
                batch_size: 2
            }
        )
        .is_err());
        assert!(reciprocal_knn_batch(
            &idx,
            0,
            &ReciprocalParams {
                k: 2,
                alpha: 1.5,
                batch_size: 2
            }
        )
        .is_err());
    }

    #[test]
    fn fill_pads_to_batch_size() {
        let idx = arc(&[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
        let p = ReciprocalParams {
            k: 2,
            alpha: 1.0,
            batch_size: 6,
        };
        let b = reciprocal_knn_batch(&idx, 0, &p).unwrap();
        assert_eq!(b.len(), 6);
        assert!(b.provenance.contains(&Provenance::Fill));
    }
}
