//! Retrieval and clustering quality: Recall@K over exact nearest neighbours
//! and normalized mutual information between a k-means clustering and the
//! ground-truth classes.

use std::collections::HashMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::inference::{knn, RetrievalIndex};
use crate::rng::Rng;
use crate::tensor::{squared_distance, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct RecallReport {
    /// `(K, recall)` in the order requested.
    pub values: Vec<(usize, f64)>,
    pub queries: usize,
}

impl RecallReport {
    pub fn at(&self, k: usize) -> Option<f64> {
        self.values.iter().find(|(kk, _)| *kk == k).map(|(_, v)| *v)
    }
}

/// Fraction of rows whose `K` nearest other rows contain a same-label row.
pub fn recall_at_k(index: &RetrievalIndex, ks: &[usize]) -> Result<RecallReport> {
    let n = index.len();
    let kmax = ks
        .iter()
        .copied()
        .max()
        .ok_or_else(|| Error::Param("no K values requested".into()))?;
    if ks.contains(&0) {
        return Err(Error::Param("K must be positive".into()));
    }
    if kmax >= n {
        return Err(Error::Param(format!(
            "K = {kmax} must be smaller than the {n} indexed rows"
        )));
    }
    // First rank (1-based) at which a same-label row appears, if within kmax.
    let mut first_hit = Vec::with_capacity(n);
    for q in 0..n {
        let label = index.labels()[q];
        let nn = knn(index, q, kmax)?;
        first_hit.push(
            nn.iter()
                .position(|&j| index.labels()[j] == label)
                .map(|p| p + 1),
        );
    }
    let values = ks
        .iter()
        .map(|&k| {
            let hits = first_hit
                .iter()
                .filter(|h| matches!(h, Some(r) if *r <= k))
                .count();
            (k, hits as f64 / n as f64)
        })
        .collect();
    Ok(RecallReport { values, queries: n })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    pub assignment: Vec<usize>,
    pub centroids: Tensor,
    pub inertia: f64,
    /// Inertia after each assignment step.
    pub history: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansConfig {
    pub max_iter: usize,
    pub tol: f64,
    pub restarts: usize,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        KMeansConfig {
            max_iter: 300,
            tol: 1e-6,
            restarts: 1,
        }
    }
}

fn nearest_centroid(x: &[f64], centroids: &Tensor) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for c in 0..centroids.rows() {
        let d = squared_distance(x, centroids.row(c));
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn plus_plus_seeds(points: &Tensor, k: usize, rng: &mut Rng) -> Tensor {
    let n = points.rows();
    let mut chosen = vec![rng.below(n)];
    let mut dist: Vec<f64> = (0..n)
        .map(|i| squared_distance(points.row(i), points.row(chosen[0])))
        .collect();
    while chosen.len() < k {
        let total: f64 = dist.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.uniform(0.0, total);
            let mut pick = n - 1;
            for (i, &d) in dist.iter().enumerate() {
                if d > 0.0 && target < d {
                    pick = i;
                    break;
                }
                target -= d;
            }
            // Rounding can walk off the end onto an already chosen point.
            if dist[pick] == 0.0 {
                pick = dist.iter().rposition(|&d| d > 0.0).unwrap_or(pick);
            }
            pick
        } else {
            // All remaining points coincide with a seed; take unchosen rows.
            (0..n).find(|i| !chosen.contains(i)).unwrap_or(0)
        };
        chosen.push(next);
        for (i, d) in dist.iter_mut().enumerate() {
            *d = d.min(squared_distance(points.row(i), points.row(next)));
        }
    }
    points.select_rows(&chosen)
}

fn lloyd(points: &Tensor, k: usize, rng: &mut Rng, cfg: &KMeansConfig) -> Clustering {
    let (n, d) = (points.rows(), points.cols());
    let mut centroids = plus_plus_seeds(points, k, rng);
    let mut assignment = vec![usize::MAX; n];
    let mut history = Vec::new();
    for _ in 0..cfg.max_iter.max(1) {
        let mut inertia = 0.0;
        let mut changed = false;
        let mut cost = vec![0.0; n];
        for i in 0..n {
            let (c, dist) = nearest_centroid(points.row(i), &centroids);
            if assignment[i] != c {
                assignment[i] = c;
                changed = true;
            }
            cost[i] = dist;
            inertia += dist;
        }
        history.push(inertia);
        if !changed {
            break;
        }

        let mut sums = vec![0.0; k * d];
        let mut counts = vec![0usize; k];
        for (i, &c) in assignment.iter().enumerate() {
            counts[c] += 1;
            for (s, x) in sums[c * d..(c + 1) * d].iter_mut().zip(points.row(i)) {
                *s += x;
            }
        }
        let mut shift: f64 = 0.0;
        let mut taken = Vec::new();
        for c in 0..k {
            let new: Vec<f64> = if counts[c] > 0 {
                sums[c * d..(c + 1) * d]
                    .iter()
                    .map(|s| s / counts[c] as f64)
                    .collect()
            } else {
                // Re-seed an empty cluster at the point worst served by its centroid.
                let far = (0..n)
                    .filter(|i| !taken.contains(i))
                    .max_by(|&a, &b| cost[a].total_cmp(&cost[b]).then(b.cmp(&a)))
                    .unwrap_or(0);
                taken.push(far);
                cost[far] = 0.0;
                points.row(far).to_vec()
            };
            shift = shift.max(squared_distance(&new, centroids.row(c)).sqrt());
            centroids.row_mut(c).copy_from_slice(&new);
        }
        if shift < cfg.tol {
            let mut inertia = 0.0;
            for (i, slot) in assignment.iter_mut().enumerate() {
                let (c, dist) = nearest_centroid(points.row(i), &centroids);
                *slot = c;
                inertia += dist;
            }
            history.push(inertia);
            break;
        }
    }
    let inertia = *history.last().unwrap_or(&0.0);
    Clustering {
        assignment,
        centroids,
        inertia,
        history,
    }
}

/// k-means++ seeding followed by Lloyd iterations; the best of
/// `cfg.restarts` runs by inertia.
pub fn kmeans(points: &Tensor, k: usize, rng: &mut Rng, cfg: &KMeansConfig) -> Result<Clustering> {
    let (n, _) = points.as_matrix("kmeans")?;
    if k == 0 || k > n {
        return Err(Error::Param(format!(
            "cannot form {k} clusters from {n} points"
        )));
    }
    let mut best: Option<Clustering> = None;
    for _ in 0..cfg.restarts.max(1) {
        let c = lloyd(points, k, rng, cfg);
        if best.as_ref().is_none_or(|b| c.inertia < b.inertia) {
            best = Some(c);
        }
    }
    Ok(best.expect("at least one restart"))
}

fn entropy(counts: impl Iterator<Item = usize>, n: f64) -> f64 {
    counts
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// `2·I(A;L) / (H(A) + H(L))` with natural logarithms.
///
/// When both partitions are a single cluster the value is 1; when exactly
/// one of them is, it is 0.
pub fn nmi(assignment: &[usize], labels: &[usize]) -> Result<f64> {
    if assignment.len() != labels.len() {
        return Err(Error::Shape {
            op: "nmi",
            lhs: vec![assignment.len()],
            rhs: vec![labels.len()],
        });
    }
    if assignment.is_empty() {
        return Err(Error::Param("nmi of empty partitions".into()));
    }
    let n = assignment.len() as f64;
    let mut a_counts: HashMap<usize, usize> = HashMap::new();
    let mut l_counts: HashMap<usize, usize> = HashMap::new();
    let mut joint: HashMap<(usize, usize), usize> = HashMap::new();
    for (&a, &l) in assignment.iter().zip(labels) {
        *a_counts.entry(a).or_default() += 1;
        *l_counts.entry(l).or_default() += 1;
        *joint.entry((a, l)).or_default() += 1;
    }
    let ha = entropy(sorted_counts(&a_counts), n);
    let hl = entropy(sorted_counts(&l_counts), n);
    match (a_counts.len() == 1, l_counts.len() == 1) {
        (true, true) => return Ok(1.0),
        (true, false) | (false, true) => return Ok(0.0),
        _ => {}
    }
    let mut cells: Vec<_> = joint.values().copied().collect();
    cells.sort_unstable();
    let hal = entropy(cells.into_iter(), n);
    let mi = (ha + hl - hal).max(0.0);
    Ok((2.0 * mi / (ha + hl)).clamp(0.0, 1.0))
}

fn sorted_counts(m: &HashMap<usize, usize>) -> std::vec::IntoIter<usize> {
    let mut v: Vec<usize> = m.values().copied().collect();
    v.sort_unstable();
    v.into_iter()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub recall: RecallReport,
    pub nmi: f64,
    pub clusters: usize,
}

impl EvalReport {
    /// Line-oriented text: one `recall@K <K> <value>` line per K, then
    /// `nmi <value>`, then a single `summary` line of `key=value` tokens.
    /// Values carry six decimals.
    pub fn render(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.recall.values {
            writeln!(s, "recall@K {k} {v:.6}").unwrap();
        }
        writeln!(s, "nmi {:.6}", self.nmi).unwrap();
        write!(
            s,
            "summary queries={} clusters={}",
            self.recall.queries, self.clusters
        )
        .unwrap();
        for (k, v) in &self.recall.values {
            write!(s, " r@{k}={v:.6}").unwrap();
        }
        writeln!(s, " nmi={:.6}", self.nmi).unwrap();
        s
    }
}

/// Recall@K for every requested K plus NMI of a k-means clustering with
/// `clusters` centers (the number of ground-truth classes by default).
pub fn evaluate(
    index: &RetrievalIndex,
    ks: &[usize],
    clusters: Option<usize>,
    rng: &mut Rng,
    kmeans_cfg: &KMeansConfig,
) -> Result<EvalReport> {
    let recall = recall_at_k(index, ks)?;
    let clusters = clusters.unwrap_or_else(|| {
        let mut l = index.labels().to_vec();
        l.sort_unstable();
        l.dedup();
        l.len()
    });
    let c = kmeans(index.embeddings(), clusters, rng, kmeans_cfg)?;
    let nmi = nmi(&c.assignment, index.labels())?;
    Ok(EvalReport {
        recall,
        nmi,
        clusters,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line_index(xs: &[f64], labels: &[usize]) -> RetrievalIndex {
        let rows: Vec<[f64; 2]> = xs.iter().map(|&x| [x, 1.0]).collect();
        RetrievalIndex::new(Tensor::from_rows(&rows), labels.to_vec()).unwrap()
    }

    #[test]
    fn recall_extremes() {
        let xs = [0.0, 0.1, 0.5, 0.9, 1.3];
        let same = line_index(&xs, &[4; 5]);
        let r = recall_at_k(&same, &[1, 2, 4]).unwrap();
        assert!(r.values.iter().all(|(_, v)| *v == 1.0));
        let singletons = line_index(&xs, &[0, 1, 2, 3, 4]);
        let r = recall_at_k(&singletons, &[1, 2, 4]).unwrap();
        assert!(r.values.iter().all(|(_, v)| *v == 0.0));
        assert!(recall_at_k(&same, &[5]).is_err());
    }

    #[test]
    fn report_keys_follow_request() {
        let idx = line_index(&[0.0, 0.1, 0.5, 0.9, 1.3], &[0, 0, 1, 1, 1]);
        let r = recall_at_k(&idx, &[4, 1, 2]).unwrap();
        let keys: Vec<usize> = r.values.iter().map(|v| v.0).collect();
        assert_eq!(keys, vec![4, 1, 2]);
    }

    #[test]
    fn kmeans_trivial_cases() {
        let pts = Tensor::from_rows(&[[0.0, 0.0], [1.0, 0.0], [5.0, 5.0]]);
        let c = kmeans(&pts, 3, &mut Rng::new(1), &KMeansConfig::default()).unwrap();
        assert_eq!(c.inertia, 0.0);
        let mut a = c.assignment.clone();
        a.sort();
        assert_eq!(a, vec![0, 1, 2]);

        let mut rows = Vec::new();
        for loc in [[0.0, 0.0], [3.0, 1.0], [-2.0, 4.0]] {
            for _ in 0..4 {
                rows.push(loc);
            }
        }
        let pts = Tensor::from_rows(&rows);
        let c = kmeans(&pts, 3, &mut Rng::new(2), &KMeansConfig::default()).unwrap();
        assert_eq!(c.inertia, 0.0);
        for g in 0..3 {
            let first = c.assignment[g * 4];
            assert!(c.assignment[g * 4..g * 4 + 4].iter().all(|&a| a == first));
        }
        assert!(kmeans(&pts, 13, &mut Rng::new(2), &KMeansConfig::default()).is_err());
    }

    #[test]
    fn kmeans_more_clusters_than_distinct_points() {
        let pts = Tensor::from_rows(&[[1.0, 1.0], [1.0, 1.0], [1.0, 1.0], [2.0, 2.0]]);
        let c = kmeans(&pts, 3, &mut Rng::new(3), &KMeansConfig::default()).unwrap();
        assert_eq!(c.inertia, 0.0);
        assert!(c.assignment.iter().all(|&a| a < 3));
    }

    #[test]
    fn nmi_conventions() {
        assert_eq!(nmi(&[0, 0, 1, 1, 2], &[5, 5, 7, 7, 9]).unwrap(), 1.0);
        assert_eq!(nmi(&[0, 0, 0, 0], &[1, 1, 2, 2]).unwrap(), 0.0);
        assert_eq!(nmi(&[1, 1, 2, 2], &[0, 0, 0, 0]).unwrap(), 0.0);
        assert_eq!(nmi(&[3, 3], &[4, 4]).unwrap(), 1.0);
        assert!(nmi(&[0, 1], &[0]).is_err());
    }

    #[test]
    fn report_grammar() {
        let r = EvalReport {
            recall: RecallReport {
                values: vec![(1, 0.5), (2, 0.75)],
                queries: 4,
            },
            nmi: 0.25,
            clusters: 2,
        };
        assert_eq!(
            r.render(),
            "recall@K 1 0.500000\nrecall@K 2 0.750000\nnmi 0.250000\n\
             summary queries=4 clusters=2 r@1=0.500000 r@2=0.750000 nmi=0.250000\n"
        );
    }
}
