//! Per-batch computation: a value-level plan (imputation decisions,
//! cluster pooling, anchor energies) followed by graph construction on a
//! fresh tape. The trainer and the finite-difference gradient checks call
//! the same builder, so analytic gradients are validated against exactly
//! the graph that training differentiates.
//!
//! The plan freezes every discrete choice: similarity rankings, copy
//! sources, cluster memberships, and (for the detached modes) the copied
//! row values and anchor energies. Rebuilding the graph from the same plan
//! at perturbed parameters keeps those choices fixed, which is what makes
//! central differences agree with the tape.

use serde::{Deserialize, Serialize};

use crate::datasets::{Mask, ViewDataset};
use crate::diffnet::{Matrix, NodeId, Tape};
use crate::error::{Error, Result};
use crate::imputation::{
    build_similarity_table, compute_prototypes, impute_assignments, impute_features,
    ClusterPrototypes, SimilarityTable,
};
use crate::losses::{
    loss_caa, loss_ebm, loss_rec, loss_total, DetachedAnchor, EnergyBank, LossReport,
};
use crate::model::{hard_labels, AssignmentMatrix, LatentBank, ModelBundle, Provenance};

/// Where feature-imputation prototypes come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrototypeScope {
    /// Recomputed inside every mini-batch.
    Batch,
    /// Computed once per epoch from a full-data pass; they enter each
    /// batch as constants (they predate the step's graph by definition).
    Epoch,
}

/// Loss-term and gradient-flow switches. Defaults: all terms on, imputed
/// rows and anchors treated as constants, batch-scoped prototypes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Toggles {
    pub use_rec: bool,
    pub use_ebm: bool,
    pub use_caa: bool,
    pub detach_anchors: bool,
    pub detach_imputed: bool,
    pub prototype_scope: PrototypeScope,
}

impl Default for Toggles {
    fn default() -> Self {
        Toggles {
            use_rec: true,
            use_ebm: true,
            use_caa: true,
            detach_anchors: true,
            detach_imputed: true,
            prototype_scope: PrototypeScope::Batch,
        }
    }
}

/// Everything the graph builder needs besides the batch itself.
#[derive(Debug, Clone, Copy)]
pub struct GraphSpec {
    pub toggles: Toggles,
    pub alpha: f64,
    pub beta: f64,
    pub tau: f64,
}

impl GraphSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if self.alpha < 0.0 || self.beta < 0.0 {
            return Err(Error::Config(format!(
                "alpha and beta must be nonnegative, got {} and {}",
                self.alpha, self.beta
            )));
        }
        Ok(())
    }
}

/// One mini-batch: aligned per-view rows, their mask, and the original
/// dataset indices they came from.
#[derive(Debug, Clone)]
pub struct BatchData {
    pub x: Vec<Matrix>,
    pub mask: Mask,
    pub indices: Vec<usize>,
}

impl BatchData {
    pub fn from_dataset(ds: &ViewDataset, indices: &[usize]) -> Self {
        let (x, mask) = ds.gather(indices);
        BatchData { x, mask, indices: indices.to_vec() }
    }

    pub fn full(ds: &ViewDataset) -> Self {
        let all: Vec<usize> = (0..ds.n()).collect();
        Self::from_dataset(ds, &all)
    }

    pub fn rows(&self) -> usize {
        self.mask.rows()
    }

    pub fn views(&self) -> usize {
        self.x.len()
    }
}

/// Value-level record of every decision the imputation stages made for
/// one batch, plus the quantities the detached graph modes reuse as
/// constants.
#[derive(Debug, Clone)]
pub struct ImputationPlan {
    pub table: SimilarityTable,
    pub assignments: AssignmentMatrix,
    pub latents: LatentBank,
    /// Per view; `None` when the view had no observed row in the batch
    /// (and no epoch prototypes were supplied).
    pub prototypes: Vec<Option<ClusterPrototypes>>,
    /// Per cluster k: (view, row) of every usable completed feature whose
    /// completed label is k, view-major then row order.
    pub pooling: Vec<Vec<(usize, usize)>>,
    /// Per cluster: the plan-time minimum energy and which pooled rows
    /// attain it.
    pub anchors: Vec<Option<DetachedAnchor>>,
}

impl ImputationPlan {
    /// Imputed-assignment rows per view.
    pub fn imputed_assignment_counts(&self) -> Vec<usize> {
        count_by(&self.assignments.provenance, |p| matches!(p, Provenance::Imputed { .. }))
    }

    /// Prototype-imputed feature rows per view.
    pub fn imputed_feature_counts(&self) -> Vec<usize> {
        count_by(&self.latents.provenance, |p| matches!(p, Provenance::Imputed { .. }))
    }

    /// Rows left unimputed because their view had no prototypes.
    pub fn unavailable_counts(&self) -> Vec<usize> {
        count_by(&self.latents.provenance, |p| matches!(p, Provenance::Unavailable))
    }
}

fn count_by(prov: &[Vec<Provenance>], pred: impl Fn(&Provenance) -> bool) -> Vec<usize> {
    prov.iter().map(|rows| rows.iter().filter(|p| pred(p)).count()).collect()
}

/// Runs the value-level forward pass and both imputation stages, then
/// records cluster pooling and anchor energies. `epoch_prototypes`
/// (present iff `prototype_scope == Epoch`) replaces batch-local
/// prototype computation.
pub fn build_plan(
    bundle: &ModelBundle,
    batch: &BatchData,
    spec: &GraphSpec,
    epoch_prototypes: Option<&[Option<ClusterPrototypes>]>,
) -> Result<ImputationPlan> {
    spec.validate()?;
    let v_count = batch.views();
    if v_count != bundle.view_dims.len() {
        return Err(Error::Shape(format!(
            "batch has {v_count} views, model expects {}",
            bundle.view_dims.len()
        )));
    }

    let mut h = Vec::with_capacity(v_count);
    let mut q = Vec::with_capacity(v_count);
    for v in 0..v_count {
        let h_v = bundle.encode_value(v, &batch.x[v])?;
        q.push(bundle.predict_value(&h_v)?);
        h.push(h_v);
    }
    let pre_labels: Vec<Vec<usize>> = q.iter().map(hard_labels).collect();
    let table = build_similarity_table(&q, &pre_labels, &batch.mask, spec.tau)?;
    let assignments = impute_assignments(&q, &batch.mask, &table)?;

    let mut prototypes = Vec::with_capacity(v_count);
    for v in 0..v_count {
        let p = match epoch_prototypes {
            Some(eps) => eps[v].clone(),
            None => {
                if batch.mask.observed_rows(v).is_empty() {
                    None
                } else {
                    Some(compute_prototypes(
                        &h[v],
                        &batch.mask,
                        v,
                        &assignments.labels[v],
                        bundle.k,
                    )?)
                }
            }
        };
        prototypes.push(p);
    }
    let latents = impute_features(&h, &batch.mask, &assignments, &prototypes)?;

    let mut pooling = vec![Vec::new(); bundle.k];
    for v in 0..v_count {
        for i in 0..batch.rows() {
            if matches!(latents.provenance[v][i], Provenance::Unavailable) {
                continue;
            }
            pooling[assignments.labels[v][i]].push((v, i));
        }
    }

    let mut anchors = vec![None; bundle.k];
    if spec.toggles.use_ebm {
        for k in 0..bundle.k {
            if pooling[k].is_empty() {
                continue;
            }
            let mut rows = Matrix::zeros(pooling[k].len(), bundle.latent_dim);
            for (out, &(v, i)) in pooling[k].iter().enumerate() {
                rows.row_mut(out).copy_from_slice(latents.h_star[v].row(i));
            }
            let e = bundle.energy_value(k, &rows)?;
            let min = e.as_slice().iter().cloned().fold(f64::INFINITY, f64::min);
            if !min.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite anchor energy in cluster {k}"
                )));
            }
            let at_min: Vec<usize> = e
                .as_slice()
                .iter()
                .enumerate()
                .filter(|&(_, &v)| v == min)
                .map(|(i, _)| i)
                .collect();
            anchors[k] = Some(DetachedAnchor { value: min, at_min });
        }
    }

    Ok(ImputationPlan { table, assignments, latents, prototypes, pooling, anchors })
}

/// A recorded batch graph: the tape, the total-loss node, and the
/// value-level results read back from it.
pub struct BatchGraph {
    pub tape: Tape,
    pub loss: NodeId,
    pub report: LossReport,
    pub bank: EnergyBank,
}

/// Records the whole batch computation on a fresh tape, reusing the
/// plan's decisions. Gradient flow through imputed rows follows the
/// toggles: detached modes splice in constants copied from the plan,
/// flow modes splice in live rows (copy sources for assignments,
/// on-tape prototype means for features).
pub fn build_graph(
    bundle: &ModelBundle,
    batch: &BatchData,
    spec: &GraphSpec,
    plan: &ImputationPlan,
) -> Result<BatchGraph> {
    spec.validate()?;
    let v_count = batch.views();
    let t = &spec.toggles;
    let mut tape = Tape::new();

    let x_nodes: Vec<NodeId> =
        batch.x.iter().map(|m| tape.constant(m.clone())).collect();
    let mut h_nodes = Vec::with_capacity(v_count);
    for v in 0..v_count {
        h_nodes.push(bundle.encode_batch(&mut tape, v, x_nodes[v])?);
    }

    let rec = if t.use_rec {
        let mut x_hat = Vec::with_capacity(v_count);
        for v in 0..v_count {
            x_hat.push(bundle.decode_batch(&mut tape, v, h_nodes[v])?);
        }
        Some(loss_rec(&mut tape, &x_nodes, &x_hat, &batch.mask)?)
    } else {
        None
    };

    let need_q = t.use_ebm || t.use_caa;
    let mut q_star_nodes = Vec::new();
    if need_q {
        let mut q_nodes = Vec::with_capacity(v_count);
        for &h in &h_nodes {
            q_nodes.push(bundle.predict_assignments(&mut tape, h)?);
        }
        for v in 0..v_count {
            let mut frozen: Option<NodeId> = None;
            q_star_nodes.push(completed_rows_node(
                &mut tape,
                &plan.assignments.provenance[v],
                q_nodes[v],
                |tape, i, from| {
                    if t.detach_imputed {
                        let f = match frozen {
                            Some(f) => f,
                            None => {
                                let f = tape.constant(plan.assignments.q_star[v].clone());
                                frozen = Some(f);
                                f
                            }
                        };
                        Ok((f, i))
                    } else {
                        Ok((q_nodes[from], i))
                    }
                },
            )?);
        }
    }

    let mut ebm = None;
    let mut bank = EnergyBank::default();
    let mut per_cluster = vec![0.0; bundle.k];
    if t.use_ebm {
        let mut proto_nodes: Vec<Option<Vec<NodeId>>> = vec![None; v_count];
        let freeze_features = t.detach_imputed || t.prototype_scope == PrototypeScope::Epoch;
        let mut h_star_nodes = Vec::with_capacity(v_count);
        for v in 0..v_count {
            let mut frozen: Option<NodeId> = None;
            h_star_nodes.push(completed_rows_node(
                &mut tape,
                &plan.latents.provenance[v],
                h_nodes[v],
                |tape, i, cluster| {
                    if freeze_features {
                        let f = match frozen {
                            Some(f) => f,
                            None => {
                                let f = tape.constant(plan.latents.h_star[v].clone());
                                frozen = Some(f);
                                f
                            }
                        };
                        return Ok((f, i));
                    }
                    let protos = prototype_nodes(tape, plan, v, h_nodes[v], &mut proto_nodes)?;
                    Ok((protos[cluster], 0))
                },
            )?);
        }
        let detached = t.detach_anchors.then_some(plan.anchors.as_slice());
        let (node, b, per) =
            loss_ebm(&mut tape, bundle, &h_star_nodes, &plan.pooling, detached)?;
        ebm = Some(node);
        bank = b;
        per_cluster = per;
    }

    let mut caa = None;
    let mut per_pair = Vec::new();
    if t.use_caa {
        let (node, pairs) = loss_caa(&mut tape, &q_star_nodes, &plan.table.sim, spec.tau)?;
        caa = Some(node);
        per_pair = pairs;
    }

    let loss = loss_total(&mut tape, rec, ebm, caa, spec.alpha, spec.beta)?;
    let term = |id: Option<NodeId>| -> Result<f64> {
        id.map_or(Ok(0.0), |i| tape.value(i).item())
    };
    let report = LossReport {
        rec: term(rec)?,
        ebm: term(ebm)?,
        caa: term(caa)?,
        total: tape.value(loss).item()?,
        per_cluster_ebm: per_cluster,
        per_pair,
    };
    Ok(BatchGraph { tape, loss, report, bank })
}

/// Result of comparing analytic gradients against central differences.
#[derive(Debug, Clone)]
pub struct GradCheck {
    /// Coordinates compared (every layer, weight and bias, of every store).
    pub checked: usize,
    /// Coordinates whose relative error exceeded the tolerance.
    pub failures: usize,
    pub max_rel_err: f64,
    /// (store, layer, is_bias, row, col) of the worst coordinate.
    pub worst: Option<(u32, usize, bool, usize, usize)>,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

/// Checks every parameter gradient of the batch loss against central
/// finite differences with the given step. The plan is built once at the
/// current parameters and reused for every perturbed evaluation, so all
/// discrete decisions stay fixed and the comparison is well defined.
///
/// Relative error per coordinate: |analytic - numeric| divided by
/// max(|analytic|, |numeric|, 1e-6).
pub fn check_gradients(
    bundle: &ModelBundle,
    batch: &BatchData,
    spec: &GraphSpec,
    step: f64,
    tol: f64,
) -> Result<GradCheck> {
    let plan = build_plan(bundle, batch, spec, None)?;
    let base = build_graph(bundle, batch, spec, &plan)?;
    let grads = base.tape.backward(base.loss)?;

    let mut work = bundle.clone();
    let mut out = GradCheck { checked: 0, failures: 0, max_rel_err: 0.0, worst: None };
    let store_ids: Vec<u32> = bundle.stores().iter().map(|&(id, _)| id).collect();
    for store_id in store_ids {
        let layer_count = work
            .network_mut(store_id)
            .expect("store id from stores()")
            .store
            .layers
            .len();
        for layer in 0..layer_count {
            for is_bias in [false, true] {
                let (rows, cols) = {
                    let net = work.network_mut(store_id).unwrap();
                    let m = if is_bias {
                        &net.store.layers[layer].b
                    } else {
                        &net.store.layers[layer].w
                    };
                    m.shape()
                };
                for r in 0..rows {
                    for c in 0..cols {
                        let set_param = |work: &mut ModelBundle, value: f64| {
                            let net = work.network_mut(store_id).unwrap();
                            let m = if is_bias {
                                &mut net.store.layers[layer].b
                            } else {
                                &mut net.store.layers[layer].w
                            };
                            m.set(r, c, value);
                        };
                        let old = {
                            let net = work.network_mut(store_id).unwrap();
                            let m = if is_bias {
                                &net.store.layers[layer].b
                            } else {
                                &net.store.layers[layer].w
                            };
                            m.get(r, c)
                        };
                        set_param(&mut work, old + step);
                        let plus = build_graph(&work, batch, spec, &plan)?.report.total;
                        set_param(&mut work, old - step);
                        let minus = build_graph(&work, batch, spec, &plan)?.report.total;
                        set_param(&mut work, old);
                        let numeric = (plus - minus) / (2.0 * step);
                        let key = crate::diffnet::ParamKey {
                            store: store_id,
                            layer: layer as u32,
                            slot: if is_bias {
                                crate::diffnet::Slot::Bias
                            } else {
                                crate::diffnet::Slot::Weight
                            },
                        };
                        let analytic = grads.get(&key).map_or(0.0, |m| m.get(r, c));
                        let rel = (analytic - numeric).abs()
                            / analytic.abs().max(numeric.abs()).max(1e-6);
                        out.checked += 1;
                        if rel > out.max_rel_err {
                            out.max_rel_err = rel;
                            out.worst = Some((store_id, layer, is_bias, r, c));
                        }
                        if rel > tol {
                            out.failures += 1;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Splices observed rows from the live node and imputed rows from
/// whatever `imputed_source` chooses. All-observed batches short-circuit
/// to the live node itself.
fn completed_rows_node(
    tape: &mut Tape,
    provenance: &[Provenance],
    live: NodeId,
    mut imputed_source: impl FnMut(&mut Tape, usize, usize) -> Result<(NodeId, usize)>,
) -> Result<NodeId> {
    if provenance.iter().all(|p| matches!(p, Provenance::Observed)) {
        return Ok(live);
    }
    let mut sources = Vec::with_capacity(provenance.len());
    for (i, p) in provenance.iter().enumerate() {
        match p {
            Provenance::Observed => sources.push((live, i)),
            Provenance::Imputed { from } => sources.push(imputed_source(tape, i, *from)?),
            // Rows no stage could fill: keep the live placeholder row.
            // They are excluded from pooling and gated out of every loss.
            Provenance::Unavailable => sources.push((live, i)),
        }
    }
    tape.stitch_rows(sources)
}

/// On-tape per-cluster prototype rows for one view (flow mode): the mean
/// of the live member latents, or of all observed rows for invalid
/// clusters. Built once per view and cached.
fn prototype_nodes(
    tape: &mut Tape,
    plan: &ImputationPlan,
    v: usize,
    h_live: NodeId,
    cache: &mut [Option<Vec<NodeId>>],
) -> Result<Vec<NodeId>> {
    if let Some(nodes) = &cache[v] {
        return Ok(nodes.clone());
    }
    let protos = plan.prototypes[v].as_ref().ok_or_else(|| {
        Error::Shape(format!("view {v} has imputed features but no prototypes"))
    })?;
    let mut fallback: Option<NodeId> = None;
    let mut nodes = Vec::with_capacity(protos.valid.len());
    for k in 0..protos.valid.len() {
        let node = if protos.valid[k] {
            let sources: Vec<(NodeId, usize)> =
                protos.members[k].iter().map(|&r| (h_live, r)).collect();
            let stacked = tape.stitch_rows(sources)?;
            tape.mean_rows(stacked)?
        } else {
            match fallback {
                Some(f) => f,
                None => {
                    let sources: Vec<(NodeId, usize)> =
                        protos.observed_rows.iter().map(|&r| (h_live, r)).collect();
                    let stacked = tape.stitch_rows(sources)?;
                    let f = tape.mean_rows(stacked)?;
                    fallback = Some(f);
                    f
                }
            }
        };
        nodes.push(node);
    }
    cache[v] = Some(nodes.clone());
    Ok(nodes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{synthesize, SyntheticSpec};
    use crate::diffnet::ParamKey;
    use crate::model::ArchConfig;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_setup(
        n: usize,
        seed: u64,
    ) -> (ModelBundle, ViewDataset) {
        let spec = SyntheticSpec {
            n,
            v_count: 2,
            k: 2,
            latent_dim: 3,
            view_dims: vec![3, 4],
            separation: 4.0,
            noise_scale: 0.1,
            seed,
        };
        let ds = synthesize(&spec).unwrap();
        let arch = ArchConfig {
            latent_dim: 3,
            encoder_hidden: vec![5],
            predictor_hidden: vec![4],
            energy_hidden: vec![4],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xBEEF);
        let bundle = ModelBundle::init(&arch, &[3, 4], 2, &mut rng).unwrap();
        (bundle, ds)
    }

    fn default_spec() -> GraphSpec {
        GraphSpec { toggles: Toggles::default(), alpha: 0.1, beta: 0.01, tau: 0.5 }
    }

    fn masked(ds: &mut ViewDataset, rows: &[Vec<f64>]) {
        let mask = Mask::from_matrix(Matrix::from_rows(rows).unwrap()).unwrap();
        ds.apply_mask(mask).unwrap();
    }

    #[test]
    fn toggles_default_and_serde_round_trip() {
        let t = Toggles::default();
        assert!(t.use_rec && t.use_ebm && t.use_caa);
        assert!(t.detach_anchors && t.detach_imputed);
        assert_eq!(t.prototype_scope, PrototypeScope::Batch);
        let json = serde_json::to_string(&t).unwrap();
        assert!(json.contains("\"prototype_scope\":\"batch\""));
        let back: Toggles = serde_json::from_str(&json).unwrap();
        assert_eq!(back, t);
        // Partial objects fill from defaults; unknown keys are rejected.
        let partial: Toggles = serde_json::from_str("{\"use_caa\":false}").unwrap();
        assert!(!partial.use_caa && partial.use_rec);
        assert!(serde_json::from_str::<Toggles>("{\"use_ca\":false}").is_err());
    }

    #[test]
    fn full_mask_plan_is_identity_and_graph_matches_values() {
        let (bundle, ds) = tiny_setup(5, 11);
        let batch = BatchData::full(&ds);
        let spec = default_spec();
        let plan = build_plan(&bundle, &batch, &spec, None).unwrap();
        assert!(plan.imputed_assignment_counts().iter().all(|&c| c == 0));
        assert!(plan.imputed_feature_counts().iter().all(|&c| c == 0));
        for v in 0..2 {
            assert_eq!(plan.assignments.q[v], plan.assignments.q_star[v]);
            assert_eq!(plan.latents.h[v], plan.latents.h_star[v]);
        }
        let g = build_graph(&bundle, &batch, &spec, &plan).unwrap();
        assert!(g.report.total.is_finite());
        assert_abs_diff_eq!(
            g.report.total,
            g.report.rec + 0.1 * g.report.ebm + 0.01 * g.report.caa,
            epsilon = 1e-9
        );
        // Every pooled row is accounted for exactly once per (view, row).
        let pooled: usize = plan.pooling.iter().map(Vec::len).sum();
        assert_eq!(pooled, 2 * 5);
    }

    #[test]
    fn masked_plan_counts_imputations_and_anchors_match_bank() {
        let (bundle, mut ds) = tiny_setup(6, 3);
        masked(
            &mut ds,
            &[
                vec![1.0, 0.0],
                vec![0.0, 1.0],
                vec![1.0, 1.0],
                vec![1.0, 1.0],
                vec![0.0, 1.0],
                vec![1.0, 0.0],
            ],
        );
        let batch = BatchData::full(&ds);
        let spec = default_spec();
        let plan = build_plan(&bundle, &batch, &spec, None).unwrap();
        assert_eq!(plan.imputed_assignment_counts(), vec![2, 2]);
        assert_eq!(plan.imputed_feature_counts(), vec![2, 2]);
        assert_eq!(plan.unavailable_counts(), vec![0, 0]);
        let g = build_graph(&bundle, &batch, &spec, &plan).unwrap();
        // Detached anchors come from the plan; the bank records the same
        // values because the graph runs at the same parameters.
        for (k, cluster) in g.bank.clusters.iter().enumerate() {
            match &plan.anchors[k] {
                Some(a) => {
                    assert_abs_diff_eq!(cluster.anchor.unwrap(), a.value, epsilon = 1e-12);
                    let live_min = cluster
                        .energies
                        .iter()
                        .cloned()
                        .fold(f64::INFINITY, f64::min);
                    assert_eq!(a.value, live_min);
                    assert!(!a.at_min.is_empty());
                }
                None => assert!(cluster.members.is_empty()),
            }
        }
    }

    #[test]
    fn zero_observed_view_is_skipped_but_training_proceeds() {
        let (bundle, mut ds) = tiny_setup(4, 9);
        // View 0 never observed in this batch.
        masked(
            &mut ds,
            &[vec![0.0, 1.0], vec![0.0, 1.0], vec![0.0, 1.0], vec![0.0, 1.0]],
        );
        let batch = BatchData::full(&ds);
        let spec = default_spec();
        let plan = build_plan(&bundle, &batch, &spec, None).unwrap();
        assert!(plan.prototypes[0].is_none());
        assert_eq!(plan.unavailable_counts(), vec![4, 0]);
        // Assignments still complete (copied from view 1).
        assert_eq!(plan.imputed_assignment_counts(), vec![4, 0]);
        // Pooling only contains view-1 rows.
        for pool in &plan.pooling {
            assert!(pool.iter().all(|&(v, _)| v == 1));
        }
        let g = build_graph(&bundle, &batch, &spec, &plan).unwrap();
        assert!(g.report.total.is_finite());
        let grads = g.tape.backward(g.loss).unwrap();
        // View 0's decoder sees no observed row: zero or absent gradient.
        let key = ParamKey {
            store: bundle.decoder_store_id(0),
            layer: 0,
            slot: crate::diffnet::Slot::Weight,
        };
        if let Some(m) = grads.get(&key) {
            assert!(m.as_slice().iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn detached_and_flow_modes_agree_on_loss_value() {
        let (bundle, mut ds) = tiny_setup(6, 21);
        masked(
            &mut ds,
            &[
                vec![1.0, 0.0],
                vec![0.0, 1.0],
                vec![1.0, 1.0],
                vec![1.0, 1.0],
                vec![0.0, 1.0],
                vec![1.0, 1.0],
            ],
        );
        let batch = BatchData::full(&ds);
        let detached = default_spec();
        let mut flow = detached;
        flow.toggles.detach_imputed = false;
        flow.toggles.detach_anchors = false;
        let plan = build_plan(&bundle, &batch, &detached, None).unwrap();
        let g1 = build_graph(&bundle, &batch, &detached, &plan).unwrap();
        let g2 = build_graph(&bundle, &batch, &flow, &plan).unwrap();
        // Same parameters, same plan: values agree bitwise; only the
        // gradient paths differ.
        assert_eq!(g1.report.total, g2.report.total);
        assert_eq!(g1.report.rec, g2.report.rec);
        assert_eq!(g1.report.ebm, g2.report.ebm);
        assert_eq!(g1.report.caa, g2.report.caa);
    }

    #[test]
    fn ablation_toggles_zero_their_terms() {
        let (bundle, mut ds) = tiny_setup(5, 30);
        masked(
            &mut ds,
            &[
                vec![1.0, 1.0],
                vec![0.0, 1.0],
                vec![1.0, 1.0],
                vec![1.0, 0.0],
                vec![1.0, 1.0],
            ],
        );
        let batch = BatchData::full(&ds);
        let mut spec = default_spec();
        spec.toggles.use_caa = false;
        let plan = build_plan(&bundle, &batch, &spec, None).unwrap();
        let g = build_graph(&bundle, &batch, &spec, &plan).unwrap();
        assert_eq!(g.report.caa, 0.0);
        assert!(g.report.per_pair.is_empty());
        assert_abs_diff_eq!(
            g.report.total,
            g.report.rec + 0.1 * g.report.ebm,
            epsilon = 1e-9
        );

        let mut no_ebm = default_spec();
        no_ebm.toggles.use_ebm = false;
        let plan2 = build_plan(&bundle, &batch, &no_ebm, None).unwrap();
        assert!(plan2.anchors.iter().all(Option::is_none));
        let g2 = build_graph(&bundle, &batch, &no_ebm, &plan2).unwrap();
        assert_eq!(g2.report.ebm, 0.0);
        assert!(g2.bank.clusters.is_empty());
    }

    #[test]
    fn pretrain_mode_touches_only_autoencoder_parameters() {
        let (bundle, ds) = tiny_setup(4, 2);
        let batch = BatchData::full(&ds);
        let spec = GraphSpec {
            toggles: Toggles {
                use_ebm: false,
                use_caa: false,
                ..Toggles::default()
            },
            alpha: 0.1,
            beta: 0.01,
            tau: 0.5,
        };
        let plan = build_plan(&bundle, &batch, &spec, None).unwrap();
        let g = build_graph(&bundle, &batch, &spec, &plan).unwrap();
        let grads = g.tape.backward(g.loss).unwrap();
        let pred = bundle.predictor_store_id();
        let energy0 = bundle.energy_store_id(0);
        for key in grads.keys() {
            assert_ne!(key.store, pred, "predictor must not receive gradients");
            assert!(key.store < energy0, "energy nets must not receive gradients");
        }
    }

    #[test]
    fn gradients_match_finite_differences_in_detached_mode() {
        let (bundle, mut ds) = tiny_setup(5, 41);
        masked(
            &mut ds,
            &[
                vec![1.0, 0.0],
                vec![0.0, 1.0],
                vec![1.0, 1.0],
                vec![1.0, 1.0],
                vec![0.0, 1.0],
            ],
        );
        let batch = BatchData::full(&ds);
        let spec = default_spec();
        let check = check_gradients(&bundle, &batch, &spec, 1e-4, 1e-3).unwrap();
        assert!(
            check.passed(),
            "{} of {} coordinates failed; worst {:?} rel {:.3e}",
            check.failures,
            check.checked,
            check.worst,
            check.max_rel_err
        );
        assert!(check.checked > 100);
    }

    #[test]
    fn gradients_match_finite_differences_in_flow_mode() {
        let (bundle, mut ds) = tiny_setup(5, 42);
        masked(
            &mut ds,
            &[
                vec![1.0, 1.0],
                vec![0.0, 1.0],
                vec![1.0, 0.0],
                vec![1.0, 1.0],
                vec![1.0, 1.0],
            ],
        );
        let batch = BatchData::full(&ds);
        let mut spec = default_spec();
        spec.toggles.detach_imputed = false;
        spec.toggles.detach_anchors = false;
        let check = check_gradients(&bundle, &batch, &spec, 1e-4, 1e-3).unwrap();
        assert!(
            check.passed(),
            "{} of {} coordinates failed; worst {:?} rel {:.3e}",
            check.failures,
            check.checked,
            check.worst,
            check.max_rel_err
        );
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(12))]
        #[test]
        fn report_identity_holds_for_random_masks(seed in 0u64..500) {
            let (bundle, mut ds) = tiny_setup(6, seed);
            let mask = crate::datasets::generate_mask(6, 2, 0.3, seed).unwrap();
            ds.apply_mask(mask).unwrap();
            let batch = BatchData::full(&ds);
            let spec = default_spec();
            let plan = build_plan(&bundle, &batch, &spec, None).unwrap();
            let g = build_graph(&bundle, &batch, &spec, &plan).unwrap();
            proptest::prop_assert!(
                (g.report.total - (g.report.rec + 0.1 * g.report.ebm + 0.01 * g.report.caa)).abs()
                    <= 1e-9
            );
            // Pooled rows cover exactly the usable (view, row) pairs.
            let pooled: usize = plan.pooling.iter().map(Vec::len).sum();
            let unavailable: usize = plan.unavailable_counts().iter().sum();
            proptest::prop_assert_eq!(pooled + unavailable, 2 * 6);
        }
    }
}
