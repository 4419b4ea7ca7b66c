//! Two-stage hierarchical imputation of missing views.
//!
//! Stage 1 completes soft assignments: views are ranked for each view v by
//! a label-aware contrastive similarity computed on co-observed samples,
//! and a missing assignment row is copied from the highest-ranked view
//! where the sample is available. Stage 2 completes latent features: a
//! missing row takes the prototype (mean observed latent) of the cluster
//! its completed assignment selects, inside its own view.
//!
//! Everything here is value-level and pure; how the copied rows interact
//! with gradients is decided by the graph builder that replays this plan.

use crate::datasets::Mask;
use crate::diffnet::Matrix;
use crate::error::{Error, Result};
use crate::model::{hard_labels, AssignmentMatrix, LatentBank, Provenance};

/// Pairwise view similarities, imputation source rankings, and the sizes
/// of the co-observed sets they were computed from.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityTable {
    /// sim[v][v2] for ordered pair (v, v2); diagonal unused (0).
    pub sim: Vec<Vec<f64>>,
    /// rankings[v]: the other views sorted by descending sim[v][.],
    /// ties broken by ascending view index.
    pub rankings: Vec<Vec<usize>>,
    /// co_counts[v][v2] = |I_{v,v2}|.
    pub co_counts: Vec<Vec<usize>>,
}

/// Per-view cluster prototypes in latent space.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterPrototypes {
    /// K x d matrix; row k is the prototype of cluster k, or the fallback
    /// vector when the cluster has no observed member.
    pub c: Matrix,
    pub valid: Vec<bool>,
    /// Mean of all observed latents in the view (1 x d).
    pub fallback: Matrix,
    /// Observed member rows per cluster (ascending), for gradient replay.
    pub members: Vec<Vec<usize>>,
    /// All observed rows (ascending), the fallback's contributors.
    pub observed_rows: Vec<usize>,
}

/// Indices observed in both views, ascending.
pub fn co_observed(mask: &Mask, v: usize, v2: usize) -> Vec<usize> {
    (0..mask.rows()).filter(|&i| mask.observed(i, v) && mask.observed(i, v2)).collect()
}

/// Label-aware contrastive similarity of view v2 to view v over the
/// co-observed set. For each anchor i the denominator keeps i itself and
/// every j whose predicted label in v2 differs from i's label in v (false
/// negatives are excluded). Result is the mean ratio, in (0, 1].
pub fn pair_similarity(
    q_v: &Matrix,
    q_v2: &Matrix,
    co: &[usize],
    labels_v: &[usize],
    labels_v2: &[usize],
    tau: f64,
) -> Result<f64> {
    if co.is_empty() {
        return Err(Error::Shape("pair similarity needs a nonempty co-observed set".into()));
    }
    if !(tau > 0.0) {
        return Err(Error::Config(format!("tau must be positive, got {tau}")));
    }
    let qa = q_v.gather_rows(co);
    let qb = q_v2.gather_rows(co);
    let s = qa.matmul(&qb.transpose())?;
    let m = co.len();
    let mut total = 0.0;
    for i in 0..m {
        // Shift by the row max over kept entries to keep exp well-scaled.
        let keep =
            |j: usize| j == i || labels_v[co[i]] != labels_v2[co[j]];
        let mut row_max = f64::NEG_INFINITY;
        for j in 0..m {
            if keep(j) {
                row_max = row_max.max(s.get(i, j) / tau);
            }
        }
        let mut denom = 0.0;
        for j in 0..m {
            if keep(j) {
                denom += (s.get(i, j) / tau - row_max).exp();
            }
        }
        total += (s.get(i, i) / tau - row_max).exp() / denom;
    }
    Ok(total / m as f64)
}

/// Fills the full ordered-pair similarity table and per-view rankings.
/// Pairs with no co-observed samples get similarity 0.
pub fn build_similarity_table(
    q: &[Matrix],
    labels: &[Vec<usize>],
    mask: &Mask,
    tau: f64,
) -> Result<SimilarityTable> {
    let v_count = q.len();
    let mut sim = vec![vec![0.0; v_count]; v_count];
    let mut co_counts = vec![vec![0usize; v_count]; v_count];
    for v in 0..v_count {
        for v2 in 0..v_count {
            if v == v2 {
                continue;
            }
            let co = co_observed(mask, v, v2);
            co_counts[v][v2] = co.len();
            if !co.is_empty() {
                sim[v][v2] = pair_similarity(&q[v], &q[v2], &co, &labels[v], &labels[v2], tau)?;
            }
        }
    }
    let mut rankings = Vec::with_capacity(v_count);
    for v in 0..v_count {
        let mut others: Vec<usize> = (0..v_count).filter(|&v2| v2 != v).collect();
        // Stable sort keeps ascending view index on ties.
        others.sort_by(|&a, &b| sim[v][b].partial_cmp(&sim[v][a]).unwrap());
        rankings.push(others);
    }
    Ok(SimilarityTable { sim, rankings, co_counts })
}

/// Stage 1: completed assignments. Observed rows are copied verbatim; a
/// missing row (i, v) is copied from the first view in v's ranking where
/// sample i is observed.
pub fn impute_assignments(
    q: &[Matrix],
    mask: &Mask,
    table: &SimilarityTable,
) -> Result<AssignmentMatrix> {
    let v_count = q.len();
    let n = mask.rows();
    let mut q_star = Vec::with_capacity(v_count);
    let mut provenance = Vec::with_capacity(v_count);
    for v in 0..v_count {
        let mut out = q[v].clone();
        let mut prov = vec![Provenance::Observed; n];
        for i in 0..n {
            if mask.observed(i, v) {
                continue;
            }
            let source = table.rankings[v]
                .iter()
                .copied()
                .find(|&v2| mask.observed(i, v2))
                .ok_or_else(|| {
                    Error::Data(format!("sample {i} observed in no view"))
                })?;
            out.row_mut(i).copy_from_slice(q[source].row(i));
            prov[i] = Provenance::Imputed { from: source };
        }
        q_star.push(out);
        provenance.push(prov);
    }
    let labels = q_star.iter().map(hard_labels).collect();
    Ok(AssignmentMatrix { q: q.to_vec(), q_star, labels, provenance })
}

/// Per-view prototypes: C_v(k) is the mean latent of observed rows whose
/// completed label is k; clusters with no observed member carry the mean
/// of all observed latents and are flagged invalid.
pub fn compute_prototypes(
    h_v: &Matrix,
    mask: &Mask,
    view: usize,
    labels_v: &[usize],
    k: usize,
) -> Result<ClusterPrototypes> {
    let observed_rows = mask.observed_rows(view);
    if observed_rows.is_empty() {
        return Err(Error::Data(format!(
            "view {view} has zero observed rows in this batch"
        )));
    }
    let d = h_v.cols();
    let mut fallback = Matrix::zeros(1, d);
    for &r in &observed_rows {
        fallback.add_scaled(&row_matrix(h_v, r), 1.0)?;
    }
    let inv = 1.0 / observed_rows.len() as f64;
    for v in fallback.as_mut_slice() {
        *v *= inv;
    }

    let mut members: Vec<Vec<usize>> = vec![Vec::new(); k];
    for &r in &observed_rows {
        let label = labels_v[r];
        if label >= k {
            return Err(Error::Shape(format!("label {label} out of range for K={k}")));
        }
        members[label].push(r);
    }
    let mut c = Matrix::zeros(k, d);
    let mut valid = vec![false; k];
    for cluster in 0..k {
        if members[cluster].is_empty() {
            c.row_mut(cluster).copy_from_slice(fallback.row(0));
            continue;
        }
        valid[cluster] = true;
        let mut acc = vec![0.0; d];
        for &r in &members[cluster] {
            for (a, x) in acc.iter_mut().zip(h_v.row(r)) {
                *a += x;
            }
        }
        let inv = 1.0 / members[cluster].len() as f64;
        for (dst, a) in c.row_mut(cluster).iter_mut().zip(&acc) {
            *dst = a * inv;
        }
    }
    Ok(ClusterPrototypes { c, valid, fallback, members, observed_rows })
}

/// Stage 2: completed latent features. Observed rows are copied verbatim;
/// a missing row takes its own view's prototype for the cluster chosen by
/// the completed assignment. Views whose prototypes are absent (no
/// observed row in the batch) keep placeholder latents, flagged
/// unavailable.
pub fn impute_features(
    h: &[Matrix],
    mask: &Mask,
    assignments: &AssignmentMatrix,
    prototypes: &[Option<ClusterPrototypes>],
) -> Result<LatentBank> {
    let v_count = h.len();
    let n = mask.rows();
    let mut h_star = Vec::with_capacity(v_count);
    let mut provenance = Vec::with_capacity(v_count);
    for v in 0..v_count {
        let mut out = h[v].clone();
        let mut prov = vec![Provenance::Observed; n];
        for i in 0..n {
            if mask.observed(i, v) {
                continue;
            }
            match &prototypes[v] {
                Some(p) => {
                    let cluster = assignments.labels[v][i];
                    out.row_mut(i).copy_from_slice(p.c.row(cluster));
                    prov[i] = Provenance::Imputed { from: cluster };
                }
                None => prov[i] = Provenance::Unavailable,
            }
        }
        h_star.push(out);
        provenance.push(prov);
    }
    Ok(LatentBank { h: h.to_vec(), h_star, provenance })
}

fn row_matrix(m: &Matrix, r: usize) -> Matrix {
    m.gather_rows(&[r])
}
