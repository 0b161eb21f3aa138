//! Clustering agreement measures (ACC, NMI, ARI, pairwise F1) computed on a
//! shared contingency table, and the Calinski–Harabasz separation score.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::points::PointSet;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("label vectors differ: {0}")]
    Consistency(String),
    #[error("invalid input: {0}")]
    Parameter(String),
    #[error("zero within-cluster scatter: clusters are infinitely separated")]
    InfiniteSeparation,
    #[error("zero between- and within-cluster scatter")]
    Degenerate,
}

/// Counts of points per (true class, predicted cluster), over the distinct
/// labels of each side in ascending order.
#[derive(Debug, Clone, PartialEq)]
pub struct ContingencyTable {
    pub counts: Vec<Vec<u64>>,
    pub n: u64,
}

fn compact(labels: &[usize]) -> (Vec<usize>, usize) {
    let mut ids: Vec<usize> = labels.to_vec();
    ids.sort_unstable();
    ids.dedup();
    (labels.iter().map(|l| ids.binary_search(l).expect("present")).collect(), ids.len())
}

impl ContingencyTable {
    pub fn new(truth: &[usize], pred: &[usize]) -> Result<Self, MetricError> {
        if truth.len() != pred.len() {
            return Err(MetricError::Consistency(format!("{} true labels vs {} predicted", truth.len(), pred.len())));
        }
        if truth.is_empty() {
            return Err(MetricError::Consistency("no labels".into()));
        }
        let (t, kt) = compact(truth);
        let (p, kp) = compact(pred);
        let mut counts = vec![vec![0u64; kp]; kt];
        for (a, b) in t.iter().zip(&p) {
            counts[*a][*b] += 1;
        }
        Ok(Self { counts, n: truth.len() as u64 })
    }

    pub fn row_sums(&self) -> Vec<u64> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<u64> {
        let cols = self.counts.first().map_or(0, |r| r.len());
        (0..cols).map(|j| self.counts.iter().map(|r| r[j]).sum()).collect()
    }

    /// (Σ C(n_ij,2), Σ C(a_i,2), Σ C(b_j,2), C(n,2))
    fn pair_counts(&self) -> (u128, u128, u128, u128) {
        let c2 = |x: u64| (x as u128) * (x.saturating_sub(1) as u128) / 2;
        let index = self.counts.iter().flatten().map(|&x| c2(x)).sum();
        let a = self.row_sums().into_iter().map(c2).sum();
        let b = self.col_sums().into_iter().map(c2).sum();
        (index, a, b, c2(self.n))
    }
}

/// Minimum-cost perfect assignment on a square matrix (Hungarian method with
/// potentials). Returns the column assigned to each row.
pub fn hungarian(cost: &[Vec<i64>]) -> Vec<usize> {
    let n = cost.len();
    // 1-based arrays with a virtual column 0
    let mut u = vec![0i64; n + 1];
    let mut v = vec![0i64; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![i64::MAX; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = i64::MAX;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0; n];
    for j in 1..=n {
        if p[j] > 0 {
            assign[p[j] - 1] = j - 1;
        }
    }
    assign
}

/// Best one-to-one cluster-to-class matched fraction.
pub fn accuracy(truth: &[usize], pred: &[usize]) -> Result<f64, MetricError> {
    let t = ContingencyTable::new(truth, pred)?;
    let rows = t.counts.len();
    let cols = t.counts[0].len();
    let m = rows.max(cols);
    let max = t.counts.iter().flatten().copied().max().unwrap_or(0) as i64;
    let cost: Vec<Vec<i64>> = (0..m)
        .map(|i| (0..m).map(|j| max - t.counts.get(i).and_then(|r| r.get(j)).copied().unwrap_or(0) as i64).collect())
        .collect();
    let assign = hungarian(&cost);
    let matched: u64 = (0..rows).map(|i| t.counts[i].get(assign[i]).copied().unwrap_or(0)).sum();
    Ok(matched as f64 / t.n as f64)
}

/// I(T;P)/√(H(T)·H(P)), natural log. Two single-cluster partitions score 1;
/// exactly one single-cluster partition scores 0.
pub fn nmi(truth: &[usize], pred: &[usize]) -> Result<f64, MetricError> {
    let t = ContingencyTable::new(truth, pred)?;
    let n = t.n as f64;
    let entropy = |sums: &[u64]| -> f64 {
        sums.iter().filter(|&&c| c > 0).map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        }).sum()
    };
    let a = t.row_sums();
    let b = t.col_sums();
    let (ha, hb) = (entropy(&a), entropy(&b));
    if a.len() == 1 && b.len() == 1 {
        return Ok(1.0);
    }
    if a.len() == 1 || b.len() == 1 {
        return Ok(0.0);
    }
    let mut mi = 0.0;
    for (i, row) in t.counts.iter().enumerate() {
        for (j, &c) in row.iter().enumerate() {
            if c > 0 {
                let c = c as f64;
                mi += c / n * (c * n / (a[i] as f64 * b[j] as f64)).ln();
            }
        }
    }
    Ok((mi / (ha * hb).sqrt()).clamp(0.0, 1.0))
}

/// Adjusted Rand index with exact integer pair counts; 1.0 when the
/// denominator vanishes (both partitions trivial in the same way).
pub fn ari(truth: &[usize], pred: &[usize]) -> Result<f64, MetricError> {
    let t = ContingencyTable::new(truth, pred)?;
    let (index, a, b, total) = t.pair_counts();
    let (index, a, b, total) = (index as i128, a as i128, b as i128, total as i128);
    let num = 2 * index * total - 2 * a * b;
    let den = (a + b) * total - 2 * a * b;
    if den == 0 {
        return Ok(1.0);
    }
    Ok(num as f64 / den as f64)
}

/// F1 of "same cluster" decisions over all unordered pairs.
pub fn pairwise_f1(truth: &[usize], pred: &[usize]) -> Result<f64, MetricError> {
    let t = ContingencyTable::new(truth, pred)?;
    let (tp, a, b, _) = t.pair_counts();
    if tp == 0 {
        return Ok(0.0);
    }
    Ok(2.0 * tp as f64 / (a + b) as f64)
}

/// [tr(B)/(k−1)] / [tr(W)/(N−k)] for labels in [0, k), k = max label + 1.
pub fn calinski_harabasz(points: &PointSet, labels: &[usize]) -> Result<f64, MetricError> {
    let n = points.len();
    if labels.len() != n {
        return Err(MetricError::Consistency(format!("{} labels for {n} points", labels.len())));
    }
    let k = labels.iter().copied().max().map_or(0, |m| m + 1);
    if k < 2 {
        return Err(MetricError::Parameter("at least two clusters are required".into()));
    }
    if k >= n {
        return Err(MetricError::Parameter(format!("k = {k} must be below N = {n}")));
    }
    let d = points.dim();
    let mut counts = vec![0usize; k];
    let mut sums = vec![vec![0.0; d]; k];
    let mut mean = vec![0.0; d];
    for (i, &l) in labels.iter().enumerate() {
        counts[l] += 1;
        for (j, v) in points.row(i).iter().enumerate() {
            sums[l][j] += v;
            mean[j] += v;
        }
    }
    if let Some(c) = counts.iter().position(|&c| c == 0) {
        return Err(MetricError::Parameter(format!("cluster {c} is empty")));
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centers: Vec<Vec<f64>> = sums.iter().zip(&counts).map(|(s, &c)| s.iter().map(|v| v / c as f64).collect()).collect();
    let between: f64 = centers
        .iter()
        .zip(&counts)
        .map(|(c, &m)| m as f64 * crate::points::sq_dist(c, &mean))
        .sum();
    let within: f64 = labels.iter().enumerate().map(|(i, &l)| crate::points::sq_dist(points.row(i), &centers[l])).sum();
    if within == 0.0 {
        return Err(if between == 0.0 { MetricError::Degenerate } else { MetricError::InfiniteSeparation });
    }
    Ok(between / (k - 1) as f64 / (within / (n - k) as f64))
}

/// Every metric of a clustering, with the variants named.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub acc: f64,
    pub nmi: f64,
    pub ari: f64,
    pub f1: f64,
    /// Calinski–Harabasz of the predicted clusters on the clustered features;
    /// absent when undefined (see `ch_note`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ch: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ch_note: Option<String>,
    pub nmi_variant: String,
    pub f1_variant: String,
}

pub fn evaluate(truth: &[usize], pred: &[usize], features: Option<&PointSet>) -> Result<MetricsReport, MetricError> {
    let (ch, ch_note) = match features.map(|f| calinski_harabasz(f, pred)) {
        None => (None, None),
        Some(Ok(v)) => (Some(v), None),
        Some(Err(e)) => (None, Some(e.to_string())),
    };
    Ok(MetricsReport {
        acc: accuracy(truth, pred)?,
        nmi: nmi(truth, pred)?,
        ari: ari(truth, pred)?,
        f1: pairwise_f1(truth, pred)?,
        ch,
        ch_note,
        nmi_variant: "geometric mean, natural log".into(),
        f1_variant: "pairwise".into(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[0, 0, 1, 1], &[1, 1, 0, 0]).unwrap(), 1.0);
        assert_eq!(accuracy(&[0, 0, 1, 1], &[0, 1, 0, 1]).unwrap(), 0.5);
        assert_eq!(accuracy(&[0, 0, 1, 1, 2], &[5, 5, 5, 5, 5]).unwrap(), 0.4);
        assert!(matches!(accuracy(&[0], &[0, 1]), Err(MetricError::Consistency(_))));
    }

    #[test]
    fn nmi_examples() {
        assert!((nmi(&[0, 0, 1, 1, 2], &[2, 2, 0, 0, 1]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(nmi(&[0, 0, 1, 1], &[0, 0, 0, 0]).unwrap(), 0.0);
        assert_eq!(nmi(&[3, 3], &[1, 1]).unwrap(), 1.0);
        // 3×3 table evaluated term by term
        let t = [0, 0, 0, 1, 1, 1, 2, 2, 2, 2];
        let p = [0, 0, 1, 1, 1, 2, 2, 2, 0, 2];
        let n = 10.0f64;
        let counts = [[2.0, 1.0, 0.0], [0.0, 2.0, 1.0], [1.0, 0.0, 3.0]];
        let a = [3.0, 3.0, 4.0];
        let b = [3.0, 3.0, 4.0];
        let mut mi = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                if counts[i][j] > 0.0 {
                    mi += counts[i][j] / n * (n * counts[i][j] / (a[i] * b[j])).ln();
                }
            }
        }
        let h = |s: &[f64]| -s.iter().map(|x| x / n * (x / n).ln()).sum::<f64>();
        let want = mi / (h(&a) * h(&b)).sqrt();
        assert!((nmi(&t, &p).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn ari_and_f1_examples() {
        assert_eq!(ari(&[0, 0, 1, 1], &[1, 1, 0, 0]).unwrap(), 1.0);
        assert_eq!(ari(&[0, 0, 1, 1], &[0, 0, 0, 0]).unwrap(), 0.0);
        assert_eq!(pairwise_f1(&[0, 0, 1, 1], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert_eq!(pairwise_f1(&[0, 0, 1, 1], &[0, 1, 2, 3]).unwrap(), 0.0);
    }

    #[test]
    fn calinski_harabasz_cases() {
        let masses = PointSet::from_rows(&[vec![0.0], vec![0.0], vec![2.0], vec![2.0]]);
        assert_eq!(calinski_harabasz(&masses, &[0, 0, 1, 1]), Err(MetricError::InfiniteSeparation));
        let same = PointSet::from_rows(&vec![vec![1.0]; 4]);
        assert_eq!(calinski_harabasz(&same, &[0, 0, 1, 1]), Err(MetricError::Degenerate));
        assert!(calinski_harabasz(&same, &[0, 0, 2, 2]).is_err());
        assert!(calinski_harabasz(&same, &[0, 1, 2, 3]).is_err());
        let (tight, lt) = crate::synthetic::blobs(&[vec![0.0, 0.0], vec![4.0, 0.0]], &[0.3, 0.3], 30, 5);
        let (loose, ll) = crate::synthetic::blobs(&[vec![0.0, 0.0], vec![4.0, 0.0]], &[1.0, 1.0], 30, 5);
        assert!(calinski_harabasz(&tight, &lt).unwrap() > calinski_harabasz(&loose, &ll).unwrap());
        // direct evaluation on a tiny case: clusters {0,2} and {10}
        let p = PointSet::from_rows(&[vec![0.0], vec![2.0], vec![10.0], vec![12.0]]);
        // centers 1, 11; mean 6; B = 2·25 + 2·25 = 100; W = 4; (100/1)/(4/2) = 50
        assert!((calinski_harabasz(&p, &[0, 0, 1, 1]).unwrap() - 50.0).abs() < 1e-12);
    }

    fn brute_accuracy(t: &[usize], p: &[usize], k: usize) -> f64 {
        fn perms(k: usize) -> Vec<Vec<usize>> {
            if k == 0 {
                return vec![vec![]];
            }
            let mut out = Vec::new();
            for p in perms(k - 1) {
                for pos in 0..=p.len() {
                    let mut q = p.clone();
                    q.insert(pos, k - 1);
                    out.push(q);
                }
            }
            out
        }
        perms(k)
            .iter()
            .map(|perm| t.iter().zip(p).filter(|(a, b)| perm[**b] == **a).count())
            .max()
            .unwrap() as f64
            / t.len() as f64
    }

    fn pair_oracle(t: &[usize], p: &[usize]) -> (f64, f64) {
        let n = t.len();
        let (mut ss, mut sd, mut ds, mut dd) = (0f64, 0f64, 0f64, 0f64);
        for i in 0..n {
            for j in i + 1..n {
                match (t[i] == t[j], p[i] == p[j]) {
                    (true, true) => ss += 1.0,
                    (true, false) => sd += 1.0,
                    (false, true) => ds += 1.0,
                    (false, false) => dd += 1.0,
                }
            }
        }
        let total = ss + sd + ds + dd;
        let expected = (ss + sd) * (ss + ds) / total;
        let max = 0.5 * ((ss + sd) + (ss + ds));
        let ari = if max == expected { 1.0 } else { (ss - expected) / (max - expected) };
        let f1 = if ss == 0.0 { 0.0 } else { 2.0 * ss / (2.0 * ss + sd + ds) };
        (ari, f1)
    }

    #[test]
    fn oracles_on_random_cases() {
        let mut r = rng::stream(0, "test/metrics");
        for _ in 0..200 {
            let k = r.random_range(1..=6);
            let n = r.random_range(2..40);
            let t: Vec<usize> = (0..n).map(|_| r.random_range(0..k)).collect();
            let p: Vec<usize> = (0..n).map(|_| r.random_range(0..k)).collect();
            assert_eq!(accuracy(&t, &p).unwrap(), brute_accuracy(&t, &p, k));
            let (a, f) = pair_oracle(&t, &p);
            assert!((ari(&t, &p).unwrap() - a).abs() < 1e-12, "{t:?} {p:?} {a}");
            assert!((pairwise_f1(&t, &p).unwrap() - f).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn relabeling_invariance(labels in prop::collection::vec((0usize..4, 0usize..4), 2..50), shift in 1usize..4) {
            let t: Vec<usize> = labels.iter().map(|x| x.0).collect();
            let p: Vec<usize> = labels.iter().map(|x| x.1).collect();
            let q: Vec<usize> = p.iter().map(|x| (x + shift) % 4 + 10).collect();
            prop_assert_eq!(accuracy(&t, &p).unwrap(), accuracy(&t, &q).unwrap());
            prop_assert_eq!(ari(&t, &p).unwrap(), ari(&t, &q).unwrap());
            prop_assert_eq!(pairwise_f1(&t, &p).unwrap(), pairwise_f1(&t, &q).unwrap());
            prop_assert!((nmi(&t, &p).unwrap() - nmi(&t, &q).unwrap()).abs() < 1e-14);
            prop_assert_eq!(ari(&t, &t).unwrap(), 1.0);
        }

        #[test]
        fn balanced_accuracy_floor(pred in prop::collection::vec(0usize..3, 30)) {
            let truth: Vec<usize> = (0..30).map(|i| i % 3).collect();
            prop_assert!(accuracy(&truth, &pred).unwrap() >= 1.0 / 3.0);
        }
    }
}
