#![allow(dead_code)]

use maskprop::hac::{euclidean, Merge};
use rand::Rng;

/// Textbook complete linkage: rescan every pair of live clusters, merge the
/// closest, repeat. Cubic or worse, only for small inputs.
pub fn naive_complete_linkage(points: &[Vec<f64>]) -> Vec<Merge> {
    let n = points.len();
    let mut clusters: Vec<(usize, Vec<usize>)> = (0..n).map(|i| (i, vec![i])).collect();
    let mut merges = Vec::new();
    while clusters.len() > 1 {
        let mut best = (0, 1, f64::INFINITY);
        for i in 0..clusters.len() {
            for j in i + 1..clusters.len() {
                let d = clusters[i]
                    .1
                    .iter()
                    .flat_map(|&a| clusters[j].1.iter().map(move |&b| (a, b)))
                    .map(|(a, b)| euclidean(&points[a], &points[b]))
                    .fold(f64::NEG_INFINITY, f64::max);
                if d < best.2 {
                    best = (i, j, d);
                }
            }
        }
        let (i, j, d) = best;
        let (lj, mj) = clusters.remove(j);
        let (li, mi) = clusters.remove(i);
        merges.push(Merge { left: li.min(lj), right: li.max(lj), height: d });
        clusters.push((n + merges.len() - 1, mi.into_iter().chain(mj).collect()));
    }
    merges
}

pub fn random_points<R: Rng>(rng: &mut R, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..d).map(|_| rng.random::<f64>()).collect()).collect()
}

/// True when all pairwise distances differ, so the merge order is unique.
pub fn distinct_distances(points: &[Vec<f64>]) -> bool {
    let mut d: Vec<f64> = Vec::new();
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            d.push(euclidean(&points[i], &points[j]));
        }
    }
    d.sort_by(f64::total_cmp);
    d.windows(2).all(|w| w[0] != w[1])
}

/// Spearman rank correlation, ties given their mean rank.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            for k in i..=j {
                r[idx[k]] = (i + j) as f64 / 2.0;
            }
            i = j + 1;
        }
        r
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}
