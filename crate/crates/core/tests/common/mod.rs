//! Brute-force reference implementations shared by the integration tests.
//! None of these call into the code paths they are compared with.
#![allow(dead_code)]

use std::collections::BTreeMap;

use intrabatch::{Rng, Tensor};

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Every other row of `emb` sorted by (distance to `q`, row index).
pub fn full_sort(emb: &Tensor, q: usize) -> Vec<usize> {
    let mut all: Vec<(f64, usize)> = (0..emb.rows())
        .filter(|&i| i != q)
        .map(|i| (sq_dist(emb.row(q), emb.row(i)), i))
        .collect();
    all.sort_by(|a, b| a.partial_cmp(b).unwrap());
    all.into_iter().map(|(_, i)| i).collect()
}

pub fn brute_recall(emb: &Tensor, labels: &[usize], k: usize) -> f64 {
    let n = emb.rows();
    let hits = (0..n)
        .filter(|&q| {
            full_sort(emb, q)[..k]
                .iter()
                .any(|&j| labels[j] == labels[q])
        })
        .count();
    hits as f64 / n as f64
}

/// Mutual information by summing over the contingency table directly.
pub fn direct_nmi(a: &[usize], l: &[usize]) -> f64 {
    let n = a.len() as f64;
    let mut ca = BTreeMap::new();
    let mut cl = BTreeMap::new();
    let mut joint = BTreeMap::new();
    for (&x, &y) in a.iter().zip(l) {
        *ca.entry(x).or_insert(0.0) += 1.0;
        *cl.entry(y).or_insert(0.0) += 1.0;
        *joint.entry((x, y)).or_insert(0.0) += 1.0;
    }
    let h = |m: &BTreeMap<usize, f64>| -> f64 { m.values().map(|c| -(c / n) * (c / n).ln()).sum() };
    let (ha, hl) = (h(&ca), h(&cl));
    if ca.len() == 1 && cl.len() == 1 {
        return 1.0;
    }
    if ca.len() == 1 || cl.len() == 1 {
        return 0.0;
    }
    let mi: f64 = joint
        .iter()
        .map(|(&(x, y), &c)| (c / n) * (n * c / (ca[&x] * cl[&y])).ln())
        .sum();
    2.0 * mi / (ha + hl)
}

/// Points on a coarse positive grid so that duplicate rows and distance
/// ties are common.
pub fn grid_points(rng: &mut Rng, n: usize, dim: usize) -> Tensor {
    let data = (0..n * dim).map(|_| 1.0 + rng.below(3) as f64).collect();
    Tensor::new(vec![n, dim], data).unwrap()
}

pub fn gaussian_points(rng: &mut Rng, n: usize, dim: usize) -> Tensor {
    let data = (0..n * dim).map(|_| rng.normal()).collect();
    Tensor::new(vec![n, dim], data).unwrap()
}

/// Sum of squared distances to the mean of each group.
pub fn grouped_inertia(points: &Tensor, assignment: &[usize], k: usize) -> f64 {
    let d = points.cols();
    let mut sums = vec![vec![0.0; d]; k];
    let mut counts = vec![0.0; k];
    for (i, &c) in assignment.iter().enumerate() {
        counts[c] += 1.0;
        for (s, x) in sums[c].iter_mut().zip(points.row(i)) {
            *s += x;
        }
    }
    assignment
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            let mean: Vec<f64> = sums[c].iter().map(|s| s / counts[c]).collect();
            sq_dist(points.row(i), &mean)
        })
        .sum()
}
