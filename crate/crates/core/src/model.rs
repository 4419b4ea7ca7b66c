//! The model bundle: per-view autoencoders, the view-shared cluster
//! predictor, and one energy network per cluster.
//!
//! Every network owns a parameter store addressed by a stable store id:
//! encoder v -> v, decoder v -> V+v, predictor -> 2V, energy net k ->
//! 2V+1+k. The ids partition the trainable parameters, so optimizer state
//! and gradient collection can treat each network independently while a
//! single tape differentiates through all of them.

use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::Rng;

use crate::diffnet::checkpoint::{read_tensors, write_tensors};
use crate::diffnet::mlp::{self, Layer, MlpSpec, OutputActivation, ParamStore};
use crate::diffnet::{Matrix, NodeId, Tape};
use crate::error::{Error, Result};

/// Hidden-layer widths for each network family; the data dimensions
/// (per-view input width, latent width, cluster count) are supplied by the
/// dataset and config when the bundle is built.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    pub latent_dim: usize,
    pub encoder_hidden: Vec<usize>,
    pub predictor_hidden: Vec<usize>,
    pub energy_hidden: Vec<usize>,
}

impl Default for ArchConfig {
    /// Desk-scale widths: encoders [d_v, 64, 128, 32], predictor
    /// [32, 64, K], energy nets [32, 64, 64, 64, 1].
    fn default() -> Self {
        ArchConfig {
            latent_dim: 32,
            encoder_hidden: vec![64, 128],
            predictor_hidden: vec![64],
            energy_hidden: vec![64, 64, 64],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub spec: MlpSpec,
    pub store: ParamStore,
}

impl Network {
    fn init(spec: MlpSpec, rng: &mut impl Rng) -> Result<Self> {
        let store = ParamStore::init(&spec, rng)?;
        Ok(Network { spec, store })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub encoders: Vec<Network>,
    pub decoders: Vec<Network>,
    pub predictor: Network,
    pub energy_nets: Vec<Network>,
    pub latent_dim: usize,
    pub k: usize,
    pub view_dims: Vec<usize>,
}

/// Per-row provenance of completed (post-imputation) quantities.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Observed,
    /// Imputed; for assignments the payload is the source view, for
    /// features the cluster whose prototype was used.
    Imputed { from: usize },
    /// Left as a placeholder because no imputation source existed
    /// (a view with zero observed rows in the batch); excluded from
    /// every statistic.
    Unavailable,
}

impl Provenance {
    pub fn usable(&self) -> bool {
        !matches!(self, Provenance::Unavailable)
    }
}

/// Batch latent features per view, before and after feature completion.
#[derive(Debug, Clone)]
pub struct LatentBank {
    /// H_v as encoded, one per view (missing rows are placeholder latents
    /// of zero-padded input).
    pub h: Vec<Matrix>,
    /// H*_v after prototype imputation.
    pub h_star: Vec<Matrix>,
    /// provenance[v][i] for row i of view v.
    pub provenance: Vec<Vec<Provenance>>,
}

/// Batch soft assignments per view, before and after completion.
#[derive(Debug, Clone)]
pub struct AssignmentMatrix {
    pub q: Vec<Matrix>,
    pub q_star: Vec<Matrix>,
    /// Hard labels from Q*: labels[v][i] = argmax_k Q*_v(i,k), ties to the
    /// lowest cluster index.
    pub labels: Vec<Vec<usize>>,
    pub provenance: Vec<Vec<Provenance>>,
}

impl ModelBundle {
    /// Initializes all networks with Glorot-uniform weights drawn from a
    /// single RNG in a fixed order (encoders, decoders, predictor, energy).
    pub fn init(
        arch: &ArchConfig,
        view_dims: &[usize],
        k: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if view_dims.is_empty() {
            return Err(Error::Config("model needs at least one view".into()));
        }
        if k == 0 {
            return Err(Error::Config("cluster count must be positive".into()));
        }
        if arch.latent_dim == 0 {
            return Err(Error::Config("latent dim must be positive".into()));
        }
        let d = arch.latent_dim;
        let mut encoders = Vec::with_capacity(view_dims.len());
        for &dv in view_dims {
            let mut widths = vec![dv];
            widths.extend(&arch.encoder_hidden);
            widths.push(d);
            encoders.push(Network::init(MlpSpec::new(widths, OutputActivation::Identity)?, rng)?);
        }
        let mut decoders = Vec::with_capacity(view_dims.len());
        for &dv in view_dims {
            let mut widths = vec![d];
            widths.extend(arch.encoder_hidden.iter().rev());
            widths.push(dv);
            decoders.push(Network::init(MlpSpec::new(widths, OutputActivation::Identity)?, rng)?);
        }
        let mut pred_widths = vec![d];
        pred_widths.extend(&arch.predictor_hidden);
        pred_widths.push(k);
        let predictor = Network::init(MlpSpec::new(pred_widths, OutputActivation::Softmax)?, rng)?;
        let mut energy_nets = Vec::with_capacity(k);
        for _ in 0..k {
            let mut widths = vec![d];
            widths.extend(&arch.energy_hidden);
            widths.push(1);
            energy_nets.push(Network::init(MlpSpec::new(widths, OutputActivation::Softplus)?, rng)?);
        }
        Ok(ModelBundle {
            encoders,
            decoders,
            predictor,
            energy_nets,
            latent_dim: d,
            k,
            view_dims: view_dims.to_vec(),
        })
    }

    pub fn v_count(&self) -> usize {
        self.view_dims.len()
    }

    pub fn encoder_store_id(&self, v: usize) -> u32 {
        v as u32
    }

    pub fn decoder_store_id(&self, v: usize) -> u32 {
        (self.v_count() + v) as u32
    }

    pub fn predictor_store_id(&self) -> u32 {
        (2 * self.v_count()) as u32
    }

    pub fn energy_store_id(&self, k: usize) -> u32 {
        (2 * self.v_count() + 1 + k) as u32
    }

    /// All (store id, network) pairs in checkpoint order.
    pub fn stores(&self) -> Vec<(u32, &Network)> {
        let mut out = Vec::new();
        for (v, n) in self.encoders.iter().enumerate() {
            out.push((self.encoder_store_id(v), n));
        }
        for (v, n) in self.decoders.iter().enumerate() {
            out.push((self.decoder_store_id(v), n));
        }
        out.push((self.predictor_store_id(), &self.predictor));
        for (k, n) in self.energy_nets.iter().enumerate() {
            out.push((self.energy_store_id(k), n));
        }
        out
    }

    pub fn network_mut(&mut self, store_id: u32) -> Option<&mut Network> {
        let v_count = self.v_count();
        let id = store_id as usize;
        if id < v_count {
            self.encoders.get_mut(id)
        } else if id < 2 * v_count {
            self.decoders.get_mut(id - v_count)
        } else if id == 2 * v_count {
            Some(&mut self.predictor)
        } else {
            self.energy_nets.get_mut(id - 2 * v_count - 1)
        }
    }

    pub fn encode_batch(&self, tape: &mut Tape, v: usize, x: NodeId) -> Result<NodeId> {
        let net = self
            .encoders
            .get(v)
            .ok_or_else(|| Error::Shape(format!("view {v} out of range")))?;
        mlp::forward(tape, &net.spec, self.encoder_store_id(v), &net.store, x)
    }

    pub fn decode_batch(&self, tape: &mut Tape, v: usize, h: NodeId) -> Result<NodeId> {
        let net = self
            .decoders
            .get(v)
            .ok_or_else(|| Error::Shape(format!("view {v} out of range")))?;
        mlp::forward(tape, &net.spec, self.decoder_store_id(v), &net.store, h)
    }

    pub fn predict_assignments(&self, tape: &mut Tape, h: NodeId) -> Result<NodeId> {
        mlp::forward(
            tape,
            &self.predictor.spec,
            self.predictor_store_id(),
            &self.predictor.store,
            h,
        )
    }

    pub fn energy_of(&self, tape: &mut Tape, k: usize, rows: NodeId) -> Result<NodeId> {
        let net = self.energy_nets.get(k).ok_or_else(|| {
            Error::Shape(format!("cluster index {k} out of range for K={}", self.k))
        })?;
        mlp::forward(tape, &net.spec, self.energy_store_id(k), &net.store, rows)
    }

    /// Value-only helpers used by planning and evaluation passes.
    pub fn encode_value(&self, v: usize, x: &Matrix) -> Result<Matrix> {
        let net = self
            .encoders
            .get(v)
            .ok_or_else(|| Error::Shape(format!("view {v} out of range")))?;
        mlp::forward_value(&net.spec, &net.store, x)
    }

    pub fn predict_value(&self, h: &Matrix) -> Result<Matrix> {
        mlp::forward_value(&self.predictor.spec, &self.predictor.store, h)
    }

    pub fn energy_value(&self, k: usize, rows: &Matrix) -> Result<Matrix> {
        let net = self.energy_nets.get(k).ok_or_else(|| {
            Error::Shape(format!("cluster index {k} out of range for K={}", self.k))
        })?;
        mlp::forward_value(&net.spec, &net.store, rows)
    }

    /// Writes the binary checkpoint (one tensor container per network, in
    /// store order) and its JSON manifest.
    pub fn save_checkpoint(&self, bin_path: &Path, manifest_path: &Path) -> Result<()> {
        let file = fs::File::create(bin_path).map_err(|e| Error::io(bin_path, e))?;
        let mut w = BufWriter::new(file);
        for (_, net) in self.stores() {
            let tensors: Vec<&Matrix> =
                net.store.layers.iter().flat_map(|l| [&l.w, &l.b]).collect();
            write_tensors(&mut w, &tensors).map_err(|e| Error::io(bin_path, e))?;
        }
        let manifest = Manifest::of(self);
        let json = serde_json::to_string_pretty(&manifest)
            .map_err(|e| Error::Data(format!("manifest serialization: {e}")))?;
        fs::write(manifest_path, json).map_err(|e| Error::io(manifest_path, e))
    }

    /// Rebuilds a bundle from a checkpoint and manifest pair.
    pub fn load_checkpoint(bin_path: &Path, manifest_path: &Path) -> Result<Self> {
        let text =
            fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)
            .map_err(|e| Error::Data(format!("{}: {e}", manifest_path.display())))?;
        let file = fs::File::open(bin_path).map_err(|e| Error::io(bin_path, e))?;
        let mut r = BufReader::new(file);

        let load_net = |r: &mut BufReader<fs::File>, widths: &[usize], output| -> Result<Network> {
            let spec = MlpSpec::new(widths.to_vec(), output)?;
            let tensors = read_tensors(r)?;
            if tensors.len() != 2 * spec.layer_count() {
                return Err(Error::Data(format!(
                    "checkpoint container holds {} tensors, spec needs {}",
                    tensors.len(),
                    2 * spec.layer_count()
                )));
            }
            let mut layers = Vec::with_capacity(spec.layer_count());
            for pair in tensors.chunks(2) {
                layers.push(Layer { w: pair[0].clone(), b: pair[1].clone() });
            }
            let store = ParamStore { layers };
            if !store.matches(&spec) {
                return Err(Error::Data(format!(
                    "checkpoint tensor shapes do not match widths {widths:?}"
                )));
            }
            Ok(Network { spec, store })
        };

        let mut encoders = Vec::new();
        for widths in &manifest.encoder_widths {
            encoders.push(load_net(&mut r, widths, OutputActivation::Identity)?);
        }
        let mut decoders = Vec::new();
        for widths in &manifest.decoder_widths {
            decoders.push(load_net(&mut r, widths, OutputActivation::Identity)?);
        }
        let predictor = load_net(&mut r, &manifest.predictor_widths, OutputActivation::Softmax)?;
        let mut energy_nets = Vec::new();
        for widths in &manifest.energy_widths {
            energy_nets.push(load_net(&mut r, widths, OutputActivation::Softplus)?);
        }
        let bundle = ModelBundle {
            encoders,
            decoders,
            predictor,
            energy_nets,
            latent_dim: manifest.latent_dim,
            k: manifest.k,
            view_dims: manifest.view_dims,
        };
        bundle.validate()?;
        Ok(bundle)
    }

    /// Cross-checks the width coupling invariants between networks.
    pub fn validate(&self) -> Result<()> {
        let d = self.latent_dim;
        if self.encoders.len() != self.view_dims.len()
            || self.decoders.len() != self.view_dims.len()
        {
            return Err(Error::Config("encoder/decoder count must equal view count".into()));
        }
        for (v, (&dv, (e, dec))) in self
            .view_dims
            .iter()
            .zip(self.encoders.iter().zip(&self.decoders))
            .enumerate()
        {
            if e.spec.input_dim() != dv || e.spec.output_dim() != d {
                return Err(Error::Config(format!(
                    "encoder {v} maps {}->{}, expected {dv}->{d}",
                    e.spec.input_dim(),
                    e.spec.output_dim()
                )));
            }
            if dec.spec.input_dim() != d || dec.spec.output_dim() != dv {
                return Err(Error::Config(format!(
                    "decoder {v} maps {}->{}, expected {d}->{dv}",
                    dec.spec.input_dim(),
                    dec.spec.output_dim()
                )));
            }
        }
        if self.predictor.spec.input_dim() != d || self.predictor.spec.output_dim() != self.k {
            return Err(Error::Config(format!(
                "predictor maps {}->{}, expected {d}->{}",
                self.predictor.spec.input_dim(),
                self.predictor.spec.output_dim(),
                self.k
            )));
        }
        if self.energy_nets.len() != self.k {
            return Err(Error::Config(format!(
                "{} energy nets for K={}",
                self.energy_nets.len(),
                self.k
            )));
        }
        for (k, n) in self.energy_nets.iter().enumerate() {
            if n.spec.input_dim() != d || n.spec.output_dim() != 1 {
                return Err(Error::Config(format!(
                    "energy net {k} maps {}->{}, expected {d}->1",
                    n.spec.input_dim(),
                    n.spec.output_dim()
                )));
            }
        }
        Ok(())
    }
}

#[derive(serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    view_dims: Vec<usize>,
    latent_dim: usize,
    k: usize,
    encoder_widths: Vec<Vec<usize>>,
    decoder_widths: Vec<Vec<usize>>,
    predictor_widths: Vec<usize>,
    energy_widths: Vec<Vec<usize>>,
}

impl Manifest {
    fn of(bundle: &ModelBundle) -> Self {
        Manifest {
            view_dims: bundle.view_dims.clone(),
            latent_dim: bundle.latent_dim,
            k: bundle.k,
            encoder_widths: bundle.encoders.iter().map(|n| n.spec.widths.clone()).collect(),
            decoder_widths: bundle.decoders.iter().map(|n| n.spec.widths.clone()).collect(),
            predictor_widths: bundle.predictor.spec.widths.clone(),
            energy_widths: bundle.energy_nets.iter().map(|n| n.spec.widths.clone()).collect(),
        }
    }
}

/// Hard label per row of a simplex matrix, ties to the lowest index.
pub fn hard_labels(q: &Matrix) -> Vec<usize> {
    (0..q.rows()).map(|r| q.row_argmax(r)).collect()
}
