//! Training orchestration: reconstruction-only pretraining, fine-tuning
//! with hierarchical imputation and the full objective, deterministic
//! epoch batching, exact-resume snapshots, final label extraction, and
//! run artifacts.
//!
//! Determinism contract: model initialization draws from stream 0 of a
//! ChaCha generator seeded with the config seed, and the batch order of
//! epoch e (in either phase) is a pure function of (seed, e) via stream
//! e + 1. Resuming from a snapshot therefore replays the exact batch
//! sequence, and restoring optimizer moments reproduces the uninterrupted
//! trajectory bitwise.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::{write_labels, ViewDataset};
use crate::diffnet::{
    read_tensors, write_tensors, AdamHyper, AdamState, Layer, Matrix, StoreGrads,
};
use crate::error::{Error, Result};
use crate::imputation::{
    build_similarity_table, compute_prototypes, impute_assignments, impute_features,
    ClusterPrototypes, SimilarityTable,
};
use crate::metrics::{evaluate, MetricsReport};
use crate::model::{hard_labels, ArchConfig, AssignmentMatrix, LatentBank, ModelBundle};
use crate::pipeline::{
    build_graph, build_plan, BatchData, GraphSpec, PrototypeScope, Toggles,
};

/// Full training configuration. Defaults give the desk-scale profile;
/// unknown JSON keys are rejected, missing ones fall back to defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub k: usize,
    pub latent_dim: usize,
    pub encoder_hidden: Vec<usize>,
    pub predictor_hidden: Vec<usize>,
    pub energy_hidden: Vec<usize>,
    pub alpha: f64,
    pub beta: f64,
    pub tau: f64,
    pub lr: f64,
    pub pretrain_epochs: usize,
    pub finetune_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub toggles: Toggles,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let arch = ArchConfig::default();
        TrainConfig {
            k: 2,
            latent_dim: arch.latent_dim,
            encoder_hidden: arch.encoder_hidden,
            predictor_hidden: arch.predictor_hidden,
            energy_hidden: arch.energy_hidden,
            alpha: 0.1,
            beta: 0.01,
            tau: 0.5,
            lr: 1e-3,
            pretrain_epochs: 60,
            finetune_epochs: 120,
            batch_size: 100,
            seed: 0,
            toggles: Toggles::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::Config(format!("k must be at least 2, got {}", self.k)));
        }
        if self.latent_dim == 0 {
            return Err(Error::Config("latent_dim must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        self.graph_spec().validate()
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: TrainConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn arch(&self) -> ArchConfig {
        ArchConfig {
            latent_dim: self.latent_dim,
            encoder_hidden: self.encoder_hidden.clone(),
            predictor_hidden: self.predictor_hidden.clone(),
            energy_hidden: self.energy_hidden.clone(),
        }
    }

    pub fn graph_spec(&self) -> GraphSpec {
        GraphSpec { toggles: self.toggles, alpha: self.alpha, beta: self.beta, tau: self.tau }
    }

    /// The pretraining objective: reconstruction only, other toggles off.
    pub fn pretrain_spec(&self) -> GraphSpec {
        let mut spec = self.graph_spec();
        spec.toggles.use_rec = true;
        spec.toggles.use_ebm = false;
        spec.toggles.use_caa = false;
        spec
    }
}

/// Mean loss values of one epoch, weighted by batch length.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub rec: f64,
    pub ebm: f64,
    pub caa: f64,
    pub total: f64,
}

/// Progress counters and histories; serialized into snapshots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub seed: u64,
    pub completed_pretrain: usize,
    pub completed_finetune: usize,
    pub pretrain_history: Vec<EpochReport>,
    pub finetune_history: Vec<EpochReport>,
    /// Assignment rows copied from another view, summed over all batches.
    pub imputed_assignment_rows: u64,
    /// Feature rows filled from a prototype, summed over all batches.
    pub imputed_feature_rows: u64,
    /// Rows left unfilled because their view had no prototype.
    pub unavailable_rows: u64,
    /// Fine-tune epoch with the lowest mean total loss so far.
    pub best_epoch: Option<usize>,
}

impl TrainState {
    fn new(seed: u64) -> Self {
        TrainState {
            seed,
            completed_pretrain: 0,
            completed_finetune: 0,
            pretrain_history: Vec::new(),
            finetune_history: Vec::new(),
            imputed_assignment_rows: 0,
            imputed_feature_rows: 0,
            unavailable_rows: 0,
            best_epoch: None,
        }
    }

    fn check(&self) -> Result<()> {
        if self.pretrain_history.len() != self.completed_pretrain
            || self.finetune_history.len() != self.completed_finetune
        {
            return Err(Error::Data(
                "training state histories do not match epoch counters".into(),
            ));
        }
        Ok(())
    }
}

/// Batch order for one epoch: a pure function of (seed, epoch).
pub fn epoch_indices(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    let mut idxs: Vec<usize> = (0..n).collect();
    idxs.shuffle(&mut rng);
    idxs
}

struct OptimBank {
    covered: Vec<u32>,
    states: BTreeMap<u32, AdamState>,
}

impl OptimBank {
    fn fresh(bundle: &ModelBundle, covered: Vec<u32>) -> Self {
        let states = covered
            .iter()
            .map(|&id| {
                let net = bundle.stores().into_iter().find(|&(sid, _)| sid == id);
                (id, AdamState::zeros_like(&net.expect("covered id exists").1.store))
            })
            .collect();
        OptimBank { covered, states }
    }
}

/// Drives the two training phases over one model bundle.
pub struct Trainer {
    pub config: TrainConfig,
    pub bundle: ModelBundle,
    pub state: TrainState,
    optim: Option<OptimBank>,
}

fn fail_at(phase: &str, epoch: usize, batch: usize, e: Error) -> Error {
    let ctx = |m: String| format!("{phase} epoch {epoch}, batch {batch}: {m}");
    match e {
        Error::Numeric(m) => Error::Numeric(ctx(m)),
        Error::Shape(m) => Error::Shape(ctx(m)),
        Error::Data(m) => Error::Data(ctx(m)),
        other => other,
    }
}

impl Trainer {
    pub fn new(config: TrainConfig, view_dims: &[usize]) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let bundle = ModelBundle::init(&config.arch(), view_dims, config.k, &mut rng)?;
        let state = TrainState::new(config.seed);
        Ok(Trainer { config, bundle, state, optim: None })
    }

    fn autoencoder_store_ids(&self) -> Vec<u32> {
        let v = self.bundle.view_dims.len() as u32;
        (0..2 * v).collect()
    }

    fn all_store_ids(&self) -> Vec<u32> {
        self.bundle.stores().iter().map(|&(id, _)| id).collect()
    }

    /// One pass over the data: shuffled batches, plan, graph, backward,
    /// one optimizer step per batch restricted to the bank's stores.
    fn run_one_epoch(
        &mut self,
        ds: &ViewDataset,
        spec: &GraphSpec,
        phase: &str,
        epoch: usize,
        epoch_protos: Option<&[Option<ClusterPrototypes>]>,
    ) -> Result<EpochReport> {
        let hyper = AdamHyper::with_lr(self.config.lr);
        let idxs = epoch_indices(self.config.seed, epoch, ds.n());
        let mut sums = [0.0; 4];
        let mut rows = 0usize;
        for (b, chunk) in idxs.chunks(self.config.batch_size).enumerate() {
            let batch = BatchData::from_dataset(ds, chunk);
            let plan = build_plan(&self.bundle, &batch, spec, epoch_protos)
                .map_err(|e| fail_at(phase, epoch, b, e))?;
            let graph = build_graph(&self.bundle, &batch, spec, &plan)
                .map_err(|e| fail_at(phase, epoch, b, e))?;
            let grads = graph
                .tape
                .backward(graph.loss)
                .map_err(|e| fail_at(phase, epoch, b, e))?;
            let bank = self.optim.as_mut().expect("optimizer bank initialized");
            for &id in &bank.covered {
                let net = self.bundle.network_mut(id).expect("store id valid");
                let store_grads = StoreGrads::collect(&grads, id, &net.store);
                bank.states
                    .get_mut(&id)
                    .expect("state per covered store")
                    .step(&mut net.store, &store_grads, &hyper)?;
            }
            let n_b = chunk.len() as f64;
            let r = &graph.report;
            for (s, v) in sums.iter_mut().zip([r.rec, r.ebm, r.caa, r.total]) {
                *s += v * n_b;
            }
            rows += chunk.len();
            self.state.imputed_assignment_rows +=
                plan.imputed_assignment_counts().iter().sum::<usize>() as u64;
            self.state.imputed_feature_rows +=
                plan.imputed_feature_counts().iter().sum::<usize>() as u64;
            self.state.unavailable_rows +=
                plan.unavailable_counts().iter().sum::<usize>() as u64;
        }
        let n = rows as f64;
        Ok(EpochReport {
            epoch,
            rec: sums[0] / n,
            ebm: sums[1] / n,
            caa: sums[2] / n,
            total: sums[3] / n,
        })
    }

    /// Autoencoder pretraining: reconstruction loss only, optimizer
    /// restricted to encoder and decoder stores. Predictor and energy
    /// nets stay bitwise untouched.
    pub fn pretrain(&mut self, ds: &ViewDataset) -> Result<()> {
        if self.state.completed_pretrain >= self.config.pretrain_epochs {
            return Ok(());
        }
        let spec = self.config.pretrain_spec();
        if self.optim.is_none() {
            self.optim = Some(OptimBank::fresh(&self.bundle, self.autoencoder_store_ids()));
        }
        for epoch in self.state.completed_pretrain..self.config.pretrain_epochs {
            let report = self.run_one_epoch(ds, &spec, "pretrain", epoch, None)?;
            self.state.pretrain_history.push(report);
            self.state.completed_pretrain = epoch + 1;
        }
        Ok(())
    }

    /// Fine-tuning with the full objective. Every batch runs, in order:
    /// latents and assignments, similarity table, completed assignments,
    /// completed features, alignment losses, total loss, one optimizer
    /// step over all parameters.
    pub fn finetune(&mut self, ds: &ViewDataset) -> Result<()> {
        if self.state.completed_finetune >= self.config.finetune_epochs {
            return Ok(());
        }
        let spec = self.config.graph_spec();
        if self.state.completed_finetune == 0 {
            self.optim = Some(OptimBank::fresh(&self.bundle, self.all_store_ids()));
        } else if self.optim.is_none() {
            return Err(Error::Data(
                "resuming mid fine-tune requires optimizer moments".into(),
            ));
        }
        for epoch in self.state.completed_finetune..self.config.finetune_epochs {
            let epoch_protos = if self.config.toggles.prototype_scope == PrototypeScope::Epoch
            {
                Some(self.epoch_prototypes(ds)?)
            } else {
                None
            };
            let report =
                self.run_one_epoch(ds, &spec, "finetune", epoch, epoch_protos.as_deref())?;
            self.state.finetune_history.push(report);
            self.state.completed_finetune = epoch + 1;
            let best = self
                .state
                .best_epoch
                .map(|e| self.state.finetune_history[e].total)
                .unwrap_or(f64::INFINITY);
            if report.total < best {
                self.state.best_epoch = Some(epoch);
            }
        }
        Ok(())
    }

    /// Full-data per-view prototypes for the epoch-scoped mode.
    fn epoch_prototypes(
        &self,
        ds: &ViewDataset,
    ) -> Result<Vec<Option<ClusterPrototypes>>> {
        let completed = complete_dataset(&self.bundle, ds, self.config.tau)?;
        Ok(completed.prototypes)
    }

    /// Runs both phases to completion.
    pub fn train(&mut self, ds: &ViewDataset) -> Result<()> {
        self.pretrain(ds)?;
        self.finetune(ds)
    }

    /// Writes a resumable snapshot: model checkpoint, state JSON, and the
    /// active optimizer moments.
    pub fn save_snapshot(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.bundle
            .save_checkpoint(&dir.join("model.bin"), &dir.join("model.manifest.json"))?;
        let optim_meta = self.optim.as_ref().map(|bank| OptimMeta {
            covered: bank.covered.clone(),
            steps: bank.covered.iter().map(|id| bank.states[id].step).collect(),
        });
        let snap = Snapshot {
            config: self.config.clone(),
            state: self.state.clone(),
            optim: optim_meta,
        };
        let path = dir.join("state.json");
        let json = serde_json::to_string_pretty(&snap)
            .map_err(|e| Error::Data(format!("snapshot serialization: {e}")))?;
        fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
        if let Some(bank) = &self.optim {
            let path = dir.join("optim.bin");
            let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            let mut w = BufWriter::new(file);
            for id in &bank.covered {
                let st = &bank.states[id];
                let tensors: Vec<&Matrix> = st
                    .m
                    .iter()
                    .zip(&st.v)
                    .flat_map(|(m, v)| [&m.w, &m.b, &v.w, &v.b])
                    .collect();
                write_tensors(&mut w, &tensors).map_err(|e| Error::io(&path, e))?;
            }
        }
        Ok(())
    }

    /// Restores a trainer from `save_snapshot` output. The supplied
    /// config must match the snapshot's.
    pub fn resume(config: TrainConfig, dir: &Path) -> Result<Self> {
        config.validate()?;
        let path = dir.join("state.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let snap: Snapshot = serde_json::from_str(&text)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        if snap.config != config {
            return Err(Error::Config(
                "snapshot was created with a different configuration".into(),
            ));
        }
        snap.state.check()?;
        let bundle = ModelBundle::load_checkpoint(
            &dir.join("model.bin"),
            &dir.join("model.manifest.json"),
        )?;
        let optim = match snap.optim {
            None => None,
            Some(meta) => {
                let path = dir.join("optim.bin");
                let file = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
                let mut r = BufReader::new(file);
                let mut states = BTreeMap::new();
                for (&id, &step) in meta.covered.iter().zip(&meta.steps) {
                    let tensors = read_tensors(&mut r)?;
                    let layer_count = tensors.len() / 4;
                    if tensors.len() % 4 != 0 {
                        return Err(Error::Data(
                            "optimizer container tensor count must be a multiple of 4".into(),
                        ));
                    }
                    let mut m = Vec::with_capacity(layer_count);
                    let mut v = Vec::with_capacity(layer_count);
                    for quad in tensors.chunks(4) {
                        m.push(Layer { w: quad[0].clone(), b: quad[1].clone() });
                        v.push(Layer { w: quad[2].clone(), b: quad[3].clone() });
                    }
                    states.insert(id, AdamState { m, v, step });
                }
                Some(OptimBank { covered: meta.covered, states })
            }
        };
        Ok(Trainer { config, bundle, state: snap.state, optim })
    }
}

#[derive(Serialize, Deserialize)]
struct OptimMeta {
    covered: Vec<u32>,
    steps: Vec<u64>,
}

#[derive(Serialize, Deserialize)]
struct Snapshot {
    config: TrainConfig,
    state: TrainState,
    optim: Option<OptimMeta>,
}

/// Full-data completion at the current parameters: latents, assignments,
/// similarity table, prototypes, and completed features for every view.
pub struct CompletedData {
    pub latents: LatentBank,
    pub assignments: AssignmentMatrix,
    pub table: SimilarityTable,
    pub prototypes: Vec<Option<ClusterPrototypes>>,
}

pub fn complete_dataset(
    bundle: &ModelBundle,
    ds: &ViewDataset,
    tau: f64,
) -> Result<CompletedData> {
    let v_count = ds.v_count();
    let mut h = Vec::with_capacity(v_count);
    let mut q = Vec::with_capacity(v_count);
    for v in 0..v_count {
        let h_v = bundle.encode_value(v, &ds.views[v])?;
        q.push(bundle.predict_value(&h_v)?);
        h.push(h_v);
    }
    let pre_labels: Vec<Vec<usize>> = q.iter().map(hard_labels).collect();
    let table = build_similarity_table(&q, &pre_labels, &ds.mask, tau)?;
    let assignments = impute_assignments(&q, &ds.mask, &table)?;
    let mut prototypes = Vec::with_capacity(v_count);
    for v in 0..v_count {
        prototypes.push(if ds.mask.observed_rows(v).is_empty() {
            None
        } else {
            Some(compute_prototypes(&h[v], &ds.mask, v, &assignments.labels[v], bundle.k)?)
        });
    }
    let latents = impute_features(&h, &ds.mask, &assignments, &prototypes)?;
    Ok(CompletedData { latents, assignments, table, prototypes })
}

/// Final cluster labels: per sample, the argmax over clusters of the sum
/// of completed assignments across views (ties to the lowest index).
pub fn labels_from_completed(assignments: &AssignmentMatrix) -> Result<Vec<usize>> {
    let mut total = assignments.q_star[0].clone();
    for q in &assignments.q_star[1..] {
        total.add_scaled(q, 1.0)?;
    }
    Ok(hard_labels(&total))
}

pub fn final_labels(bundle: &ModelBundle, ds: &ViewDataset, tau: f64) -> Result<Vec<usize>> {
    let completed = complete_dataset(bundle, ds, tau)?;
    labels_from_completed(&completed.assignments)
}

/// End-to-end results of `run`.
pub struct RunArtifacts {
    pub labels: Vec<usize>,
    pub metrics: Option<MetricsReport>,
    pub state: TrainState,
}

/// Trains from scratch and writes every artifact into `out_dir`:
/// `checkpoint.dhia` (+ manifest), `losses.csv` (fine-tune),
/// `pretrain.csv`, `labels.txt`, and `metrics.json` when the dataset has
/// ground-truth labels.
pub fn run(config: &TrainConfig, ds: &ViewDataset, out_dir: &Path) -> Result<RunArtifacts> {
    config.validate()?;
    ds.validate()?;
    let mut trainer = Trainer::new(config.clone(), &ds.dims())?;
    trainer.train(ds)?;
    let labels = final_labels(&trainer.bundle, ds, config.tau)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    trainer.bundle.save_checkpoint(
        &out_dir.join("checkpoint.dhia"),
        &out_dir.join("checkpoint.manifest.json"),
    )?;
    write_loss_csv(&out_dir.join("losses.csv"), &trainer.state.finetune_history)?;
    write_loss_csv(&out_dir.join("pretrain.csv"), &trainer.state.pretrain_history)?;
    write_labels(&out_dir.join("labels.txt"), &labels)?;
    let metrics = match &ds.labels {
        Some(truth) => {
            let report = evaluate(&labels, truth)?;
            let path = out_dir.join("metrics.json");
            let json = serde_json::to_string_pretty(&report.to_json())
                .map_err(|e| Error::Data(format!("metrics serialization: {e}")))?;
            fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
            Some(report)
        }
        None => None,
    };
    Ok(RunArtifacts { labels, metrics, state: trainer.state })
}

/// Writes epoch reports as `epoch,rec,ebm,caa,total` CSV.
pub fn write_loss_csv(path: &Path, rows: &[EpochReport]) -> Result<()> {
    let mut text = String::from("epoch,rec,ebm,caa,total\n");
    for r in rows {
        text.push_str(&format!("{},{},{},{},{}\n", r.epoch, r.rec, r.ebm, r.caa, r.total));
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
