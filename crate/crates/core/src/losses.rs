//! The training objective: masked reconstruction, energy-based
//! intra-cluster alignment, contrastive assignment alignment with an
//! entropy regularizer, and their weighted total.
//!
//! Each builder records its term on the tape and returns the scalar node,
//! so one backward pass differentiates the whole objective. Imputation
//! decisions (who copies from whom, cluster membership, anchors) arrive
//! here as plain data; how those rows were built into the graph (detached
//! constants or flowing copies) is the graph builder's concern.

use crate::datasets::Mask;
use crate::diffnet::{Matrix, NodeId, Tape};
use crate::error::{Error, Result};
use crate::model::ModelBundle;

/// Per-batch loss values, with per-cluster and per-pair breakdowns.
#[derive(Debug, Clone, Default)]
pub struct LossReport {
    pub rec: f64,
    pub ebm: f64,
    pub caa: f64,
    pub total: f64,
    pub per_cluster_ebm: Vec<f64>,
    pub per_pair: Vec<PairTerm>,
}

/// One ordered view pair's contrastive and regularizer values.
#[derive(Debug, Clone, PartialEq)]
pub struct PairTerm {
    pub v: usize,
    pub v2: usize,
    pub sim_weight: f64,
    pub ca: f64,
    pub reg: f64,
}

/// Pooled per-cluster energies and their anchors for one batch.
#[derive(Debug, Clone, Default)]
pub struct EnergyBank {
    pub clusters: Vec<ClusterEnergies>,
}

#[derive(Debug, Clone, Default)]
pub struct ClusterEnergies {
    /// (view, row) of each pooled feature, in pooling order.
    pub members: Vec<(usize, usize)>,
    pub energies: Vec<f64>,
    /// Minimum energy; `None` for an empty cluster.
    pub anchor: Option<f64>,
}

/// Masked reconstruction error:
/// (1 / (V * N)) * sum_v sum_i G(i, v) * ||X_v(i) - Xhat_v(i)||^2.
pub fn loss_rec(
    tape: &mut Tape,
    x: &[NodeId],
    x_hat: &[NodeId],
    mask: &Mask,
) -> Result<NodeId> {
    if x.len() != x_hat.len() || x.len() != mask.views() {
        return Err(Error::Shape(format!(
            "{} inputs, {} reconstructions, {} mask views",
            x.len(),
            x_hat.len(),
            mask.views()
        )));
    }
    let n = mask.rows();
    let v_count = x.len();
    let mut acc: Option<NodeId> = None;
    for v in 0..v_count {
        let diff = tape.sub(x_hat[v], x[v])?;
        let sq = tape.mul(diff, diff)?;
        let gated = tape.scale_rows(sq, mask.view_weights(v))?;
        let s = tape.sum_all(gated);
        acc = Some(match acc {
            Some(a) => tape.add(a, s)?,
            None => s,
        });
    }
    let total = acc.expect("at least one view");
    Ok(tape.scale(total, 1.0 / (v_count * n) as f64))
}

/// A cluster's anchor as frozen by the batch plan, for the detached mode.
#[derive(Debug, Clone, PartialEq)]
pub struct DetachedAnchor {
    /// Minimum energy over the pooled rows at plan time.
    pub value: f64,
    /// Positions within the cluster's pooling list whose plan-time energy
    /// equals the anchor. Their deviation terms are identically zero at
    /// the evaluation point, so they are omitted from the recorded sum;
    /// keeping them would plant an absolute-value kink exactly at the
    /// current parameters and break finite-difference agreement.
    pub at_min: Vec<usize>,
}

/// Energy alignment: each cluster k pools completed features across views
/// (rows listed in `pooling[k]`), scores them with its own energy net, and
/// pays the mean absolute deviation from the cluster's minimum energy.
/// Empty clusters contribute zero; the result divides by K regardless.
///
/// With `detached` anchors the anchor enters as a plan-time constant;
/// otherwise it is the on-tape minimum and the subgradient flows through
/// the argmin entry.
pub fn loss_ebm(
    tape: &mut Tape,
    bundle: &ModelBundle,
    h_star: &[NodeId],
    pooling: &[Vec<(usize, usize)>],
    detached: Option<&[Option<DetachedAnchor>]>,
) -> Result<(NodeId, EnergyBank, Vec<f64>)> {
    let k_count = bundle.k;
    if pooling.len() != k_count {
        return Err(Error::Shape(format!("{} pools for K={k_count}", pooling.len())));
    }
    if let Some(anchors) = detached {
        if anchors.len() != k_count {
            return Err(Error::Shape(format!(
                "{} anchors for K={k_count}",
                anchors.len()
            )));
        }
    }
    let mut bank = EnergyBank::default();
    let mut per_cluster = vec![0.0; k_count];
    let mut acc: Option<NodeId> = None;
    for k in 0..k_count {
        let m = pooling[k].len();
        if m == 0 {
            bank.clusters.push(ClusterEnergies::default());
            continue;
        }
        let sources: Vec<(NodeId, usize)> =
            pooling[k].iter().map(|&(v, row)| (h_star[v], row)).collect();
        let pooled = tape.stitch_rows(sources)?;
        let energies = bundle.energy_of(tape, k, pooled)?;
        let (term, anchor_value) = match detached {
            Some(anchors) => {
                let a = anchors[k].as_ref().ok_or_else(|| {
                    Error::Shape(format!("cluster {k} pooled rows but has no anchor"))
                })?;
                let kept: Vec<(NodeId, usize)> = (0..m)
                    .filter(|i| !a.at_min.contains(i))
                    .map(|i| (energies, i))
                    .collect();
                let term = if kept.is_empty() {
                    tape.scalar(0.0)
                } else {
                    let e_kept = tape.stitch_rows(kept)?;
                    let anchor = tape.scalar(a.value);
                    let dev = tape.sub_scalar(e_kept, anchor)?;
                    let abs_dev = tape.abs(dev);
                    let sum = tape.sum_all(abs_dev);
                    tape.scale(sum, 1.0 / m as f64)
                };
                (term, a.value)
            }
            None => {
                let anchor = tape.min_all(energies)?;
                let dev = tape.sub_scalar(energies, anchor)?;
                let abs_dev = tape.abs(dev);
                let sum = tape.sum_all(abs_dev);
                let term = tape.scale(sum, 1.0 / m as f64);
                (term, tape.value(anchor).item()?)
            }
        };
        per_cluster[k] = tape.value(term).item()?;
        bank.clusters.push(ClusterEnergies {
            members: pooling[k].clone(),
            energies: tape.value(energies).as_slice().to_vec(),
            anchor: Some(anchor_value),
        });
        acc = Some(match acc {
            Some(a) => tape.add(a, term)?,
            None => term,
        });
    }
    let total = match acc {
        Some(a) => tape.scale(a, 1.0 / k_count as f64),
        None => tape.scalar(0.0),
    };
    Ok((total, bank, per_cluster))
}

/// Contrastive assignment alignment over ordered view pairs:
/// (1/2) * sum_v sum_{v2 != v} [ sim(v,v2) * L_ca(v,v2) + L_reg(v,v2) ].
///
/// L_ca is an InfoNCE form on completed assignment rows: similarities are
/// S = Q*_v (Q*_v2)^T scaled by 1/tau, the positive is the diagonal, and
/// the denominator sums over the whole batch. L_reg penalizes degenerate
/// batch-mean assignment distributions: (1/K) * sum_k [qbar_v ln qbar_v +
/// qbar_v2 ln qbar_v2].
pub fn loss_caa(
    tape: &mut Tape,
    q_star: &[NodeId],
    sim: &[Vec<f64>],
    tau: f64,
) -> Result<(NodeId, Vec<PairTerm>)> {
    let v_count = q_star.len();
    if !(tau > 0.0) {
        return Err(Error::Config(format!("tau must be positive, got {tau}")));
    }
    if sim.len() != v_count {
        return Err(Error::Shape(format!(
            "similarity table covers {} views, batch has {v_count}",
            sim.len()
        )));
    }
    if v_count < 2 {
        return Ok((tape.scalar(0.0), Vec::new()));
    }
    let n = tape.value(q_star[0]).rows();
    let k = tape.value(q_star[0]).cols();

    // Per-view negative entropy of the batch-mean assignment distribution,
    // built once and shared across pairs.
    let mut neg_entropy = Vec::with_capacity(v_count);
    for &q in q_star {
        let qbar = tape.mean_rows(q)?;
        let logq = tape.log_clamped(qbar);
        let prod = tape.mul(qbar, logq)?;
        neg_entropy.push(tape.sum_all(prod));
    }

    let mut pairs = Vec::new();
    let mut acc: Option<NodeId> = None;
    for v in 0..v_count {
        for v2 in 0..v_count {
            if v == v2 {
                continue;
            }
            let qt = tape.transpose(q_star[v2]);
            let s = tape.matmul(q_star[v], qt)?;
            let sc = tape.scale(s, 1.0 / tau);
            let lse = tape.masked_row_logsumexp(sc, Matrix::filled(n, n, 1.0))?;
            let diag = tape.diag(sc)?;
            let per_row = tape.sub(lse, diag)?;
            let ca_sum = tape.sum_all(per_row);
            let ca = tape.scale(ca_sum, 1.0 / n as f64);
            let weight = sim[v][v2];
            let weighted = tape.scale(ca, weight);
            let reg_sum = tape.add(neg_entropy[v], neg_entropy[v2])?;
            let reg = tape.scale(reg_sum, 1.0 / k as f64);
            let pair_total = tape.add(weighted, reg)?;
            pairs.push(PairTerm {
                v,
                v2,
                sim_weight: weight,
                ca: tape.value(ca).item()?,
                reg: tape.value(reg).item()?,
            });
            acc = Some(match acc {
                Some(a) => tape.add(a, pair_total)?,
                None => pair_total,
            });
        }
    }
    let total = tape.scale(acc.expect("v_count >= 2"), 0.5);
    Ok((total, pairs))
}

/// Weighted total L = L_REC + alpha * L_EBM + beta * L_CAA. Missing terms
/// (disabled by config) enter as zero constants. Non-finite components
/// abort with the offending term named.
pub fn loss_total(
    tape: &mut Tape,
    rec: Option<NodeId>,
    ebm: Option<NodeId>,
    caa: Option<NodeId>,
    alpha: f64,
    beta: f64,
) -> Result<NodeId> {
    if alpha < 0.0 || beta < 0.0 {
        return Err(Error::Config(format!(
            "loss weights must be nonnegative, got alpha {alpha}, beta {beta}"
        )));
    }
    for (name, node) in [("rec", rec), ("ebm", ebm), ("caa", caa)] {
        if let Some(id) = node {
            let v = tape.value(id).item()?;
            if !v.is_finite() {
                return Err(Error::Numeric(format!("loss term {name} is not finite: {v}")));
            }
        }
    }
    let zero = tape.scalar(0.0);
    let rec = rec.unwrap_or(zero);
    let ebm_scaled = match ebm {
        Some(e) => tape.scale(e, alpha),
        None => zero,
    };
    let caa_scaled = match caa {
        Some(c) => tape.scale(c, beta),
        None => zero,
    };
    let partial = tape.add(rec, ebm_scaled)?;
    let total = tape.add(partial, caa_scaled)?;
    let v = tape.value(total).item()?;
    if !v.is_finite() {
        return Err(Error::Numeric(format!("total loss is not finite: {v}")));
    }
    Ok(total)
}
