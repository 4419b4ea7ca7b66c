//! Multi-view datasets: CSV ingestion, availability masks, synthetic
//! Gaussian data, and feature normalization.
//!
//! A dataset is V matrices sharing N rows plus an N x V binary mask G;
//! G(i, v) = 1 means sample i is observed in view v. Missing rows are
//! stored as all zeros so matrix shapes stay rectangular.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::diffnet::Matrix;
use crate::error::{Error, Result};

/// N x V availability matrix with entries in {0, 1}.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    m: Matrix,
}

impl Mask {
    pub fn all_ones(n: usize, v_count: usize) -> Self {
        Mask { m: Matrix::filled(n, v_count, 1.0) }
    }

    /// Validates binary entries and at least one observed view per row.
    pub fn from_matrix(m: Matrix) -> Result<Self> {
        for r in 0..m.rows() {
            let mut row_sum = 0.0;
            for c in 0..m.cols() {
                let v = m.get(r, c);
                if v != 0.0 && v != 1.0 {
                    return Err(Error::Data(format!(
                        "mask entry at row {r}, view {c} is {v}, expected 0 or 1"
                    )));
                }
                row_sum += v;
            }
            if row_sum == 0.0 {
                return Err(Error::Data(format!(
                    "sample observed in no view: mask row {r} is all zeros"
                )));
            }
        }
        Ok(Mask { m })
    }

    pub fn rows(&self) -> usize {
        self.m.rows()
    }

    pub fn views(&self) -> usize {
        self.m.cols()
    }

    pub fn observed(&self, row: usize, view: usize) -> bool {
        self.m.get(row, view) == 1.0
    }

    /// Rows observed in the given view, ascending.
    pub fn observed_rows(&self, view: usize) -> Vec<usize> {
        (0..self.rows()).filter(|&r| self.observed(r, view)).collect()
    }

    pub fn zeros_in_view(&self, view: usize) -> usize {
        (0..self.rows()).filter(|&r| !self.observed(r, view)).count()
    }

    pub fn row_sum(&self, row: usize) -> usize {
        (0..self.views()).filter(|&v| self.observed(row, v)).count()
    }

    /// Mask column for one view as 0.0/1.0 weights.
    pub fn view_weights(&self, view: usize) -> Vec<f64> {
        (0..self.rows()).map(|r| self.m.get(r, view)).collect()
    }

    /// Sub-mask over the given rows, in order.
    pub fn gather_rows(&self, indices: &[usize]) -> Mask {
        Mask { m: self.m.gather_rows(indices) }
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.m
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewDataset {
    pub views: Vec<Matrix>,
    pub mask: Mask,
    pub labels: Option<Vec<usize>>,
}

impl ViewDataset {
    pub fn n(&self) -> usize {
        self.views.first().map_or(0, Matrix::rows)
    }

    pub fn v_count(&self) -> usize {
        self.views.len()
    }

    pub fn dims(&self) -> Vec<usize> {
        self.views.iter().map(Matrix::cols).collect()
    }

    /// Checks every structural invariant; call after any construction path.
    pub fn validate(&self) -> Result<()> {
        if self.views.is_empty() {
            return Err(Error::Data("dataset has no views".into()));
        }
        let n = self.n();
        for (v, x) in self.views.iter().enumerate() {
            if x.rows() != n {
                return Err(Error::Data(format!(
                    "view {v} has {} rows, view 0 has {n}",
                    x.rows()
                )));
            }
            if x.cols() == 0 {
                return Err(Error::Data(format!("view {v} has zero columns")));
            }
        }
        if self.mask.rows() != n || self.mask.views() != self.v_count() {
            return Err(Error::Data(format!(
                "mask is {}x{}, dataset is {}x{}",
                self.mask.rows(),
                self.mask.views(),
                n,
                self.v_count()
            )));
        }
        for v in 0..self.v_count() {
            for r in 0..n {
                if !self.mask.observed(r, v) && self.views[v].row(r).iter().any(|&x| x != 0.0) {
                    return Err(Error::Data(format!(
                        "row {r} of view {v} is flagged missing but holds nonzero values"
                    )));
                }
            }
        }
        if let Some(labels) = &self.labels {
            if labels.len() != n {
                return Err(Error::Data(format!(
                    "{} labels for {n} samples",
                    labels.len()
                )));
            }
        }
        Ok(())
    }

    /// Installs a mask, zeroing rows it flags as missing.
    pub fn apply_mask(&mut self, mask: Mask) -> Result<()> {
        if mask.rows() != self.n() || mask.views() != self.v_count() {
            return Err(Error::Data(format!(
                "mask is {}x{}, dataset is {}x{}",
                mask.rows(),
                mask.views(),
                self.n(),
                self.v_count()
            )));
        }
        for v in 0..self.v_count() {
            for r in 0..self.n() {
                if !mask.observed(r, v) {
                    self.views[v].row_mut(r).fill(0.0);
                }
            }
        }
        self.mask = mask;
        self.validate()
    }

    pub fn with_labels(mut self, labels: Vec<usize>) -> Result<Self> {
        self.labels = Some(labels);
        self.validate()?;
        Ok(self)
    }

    /// Per-view feature rows and sub-mask for the given sample indices.
    pub fn gather(&self, indices: &[usize]) -> (Vec<Matrix>, Mask) {
        let views = self.views.iter().map(|x| x.gather_rows(indices)).collect();
        (views, self.mask.gather_rows(indices))
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n: usize,
    pub v_count: usize,
    pub k: usize,
    pub latent_dim: usize,
    pub view_dims: Vec<usize>,
    /// Distance between cluster centers in units of the unit latent spread.
    pub separation: f64,
    /// Standard deviation of additive view-space noise.
    pub noise_scale: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Config("synthetic n must be positive".into()));
        }
        if self.k == 0 {
            return Err(Error::Config("synthetic k must be at least 1".into()));
        }
        if self.v_count == 0 || self.view_dims.len() != self.v_count {
            return Err(Error::Config(format!(
                "{} view dims for v_count {}",
                self.view_dims.len(),
                self.v_count
            )));
        }
        if self.view_dims.iter().any(|&d| d == 0) {
            return Err(Error::Config("view dims must be positive".into()));
        }
        if self.latent_dim < self.k {
            return Err(Error::Config(format!(
                "latent_dim {} must be at least k {} so centers can be separated",
                self.latent_dim, self.k
            )));
        }
        if !(self.separation > 0.0) {
            return Err(Error::Config("separation must be positive".into()));
        }
        if !(self.noise_scale >= 0.0) {
            return Err(Error::Config("noise scale must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Draws balanced Gaussian clusters in a latent space and maps each view
/// through its own random linear map plus view-space noise. Labels are
/// attached and the mask is all ones; apply a generated mask afterwards to
/// simulate missing views.
pub fn synthesize(spec: &SyntheticSpec) -> Result<ViewDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    // Center k sits on axis k scaled so pairwise distances equal
    // `separation` while per-cluster latent spread is the unit Gaussian.
    let scale = spec.separation / 2.0_f64.sqrt();
    let labels: Vec<usize> = (0..spec.n).map(|i| i % spec.k).collect();

    let maps: Vec<Matrix> = (0..spec.v_count)
        .map(|v| {
            let mut a = Matrix::zeros(spec.latent_dim, spec.view_dims[v]);
            let col_scale = 1.0 / (spec.latent_dim as f64).sqrt();
            for e in a.as_mut_slice() {
                let g: f64 = rng.sample(StandardNormal);
                *e = g * col_scale;
            }
            a
        })
        .collect();

    let mut latent = Matrix::zeros(spec.n, spec.latent_dim);
    for i in 0..spec.n {
        for d in 0..spec.latent_dim {
            let g: f64 = rng.sample(StandardNormal);
            let center = if d == labels[i] { scale } else { 0.0 };
            latent.set(i, d, center + g);
        }
    }

    let mut views = Vec::with_capacity(spec.v_count);
    for map in &maps {
        let mut x = latent.matmul(map)?;
        if spec.noise_scale > 0.0 {
            for e in x.as_mut_slice() {
                let g: f64 = rng.sample(StandardNormal);
                *e += spec.noise_scale * g;
            }
        }
        views.push(x);
    }

    let ds = ViewDataset {
        mask: Mask::all_ones(spec.n, spec.v_count),
        views,
        labels: Some(labels),
    };
    ds.validate()?;
    Ok(ds)
}

/// Generates an availability mask with exactly round(eta * n) missing rows
/// per view. Draws per-view missing sets uniformly, then resamples the zero
/// placement for any row left observed nowhere (moving that zero to a
/// randomly chosen donor row), so per-view counts stay exact and every row
/// keeps at least one view.
pub fn generate_mask(n: usize, v_count: usize, eta: f64, seed: u64) -> Result<Mask> {
    if n == 0 || v_count == 0 {
        return Err(Error::Config("mask needs n >= 1 and v_count >= 1".into()));
    }
    if !(0.0..1.0).contains(&eta) {
        return Err(Error::Config(format!("eta must be in [0,1), got {eta}")));
    }
    let zeros_per_view = (eta * n as f64).round() as usize;
    if zeros_per_view * v_count > n * (v_count - 1) {
        return Err(Error::Config(format!(
            "eta {eta} infeasible: {zeros_per_view} zeros per view over {v_count} views \
             cannot leave every one of {n} rows observed somewhere"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = Matrix::filled(n, v_count, 1.0);
    let mut indices: Vec<usize> = (0..n).collect();
    for v in 0..v_count {
        indices.shuffle(&mut rng);
        for &r in indices.iter().take(zeros_per_view) {
            m.set(r, v, 0.0);
        }
    }

    // Repair collisions: for each row observed nowhere, hand one of its
    // zeros to a donor row that can afford it.
    loop {
        let Some(r) = (0..n).find(|&r| (0..v_count).all(|v| m.get(r, v) == 0.0)) else {
            break;
        };
        let mut donors: Vec<(usize, usize)> = Vec::new();
        for v in 0..v_count {
            for d in 0..n {
                if m.get(d, v) == 1.0 {
                    let row_sum = (0..v_count).filter(|&vv| m.get(d, vv) == 1.0).count();
                    if row_sum >= 2 {
                        donors.push((v, d));
                    }
                }
            }
        }
        let &(v, d) = donors
            .choose(&mut rng)
            .ok_or_else(|| Error::Config("mask repair found no donor row".into()))?;
        m.set(r, v, 1.0);
        m.set(d, v, 0.0);
    }

    let mask = Mask::from_matrix(m)?;
    for v in 0..v_count {
        debug_assert_eq!(mask.zeros_in_view(v), zeros_per_view);
    }
    Ok(mask)
}

/// Min-max scales each feature column to [0, 1] using observed rows only;
/// missing rows stay zero and constant columns map to zero.
pub fn normalize(dataset: &ViewDataset) -> ViewDataset {
    let mut out = dataset.clone();
    for v in 0..out.v_count() {
        let observed = out.mask.observed_rows(v);
        let cols = out.views[v].cols();
        for c in 0..cols {
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for &r in &observed {
                let x = out.views[v].get(r, c);
                lo = lo.min(x);
                hi = hi.max(x);
            }
            let range = hi - lo;
            for &r in &observed {
                let x = out.views[v].get(r, c);
                let y = if range > 0.0 { (x - lo) / range } else { 0.0 };
                out.views[v].set(r, c, y);
            }
        }
    }
    out
}

/// Loads one headerless CSV per view plus an optional mask CSV. Rows the
/// mask flags as missing are zeroed even if the file stored values there.
pub fn load_views(paths: &[impl AsRef<Path>], mask_path: Option<&Path>) -> Result<ViewDataset> {
    if paths.is_empty() {
        return Err(Error::Data("no view files given".into()));
    }
    let mut views = Vec::with_capacity(paths.len());
    for p in paths {
        views.push(read_matrix_csv(p.as_ref())?);
    }
    let n = views[0].rows();
    for (v, x) in views.iter().enumerate() {
        if x.rows() != n {
            return Err(Error::Data(format!(
                "view {v} has {} rows, view 0 has {n}",
                x.rows()
            )));
        }
    }
    let mask = match mask_path {
        Some(p) => {
            let m = read_matrix_csv(p)?;
            if m.rows() != n || m.cols() != views.len() {
                return Err(Error::Data(format!(
                    "mask is {}x{}, expected {}x{}",
                    m.rows(),
                    m.cols(),
                    n,
                    views.len()
                )));
            }
            Mask::from_matrix(m)?
        }
        None => Mask::all_ones(n, views.len()),
    };
    let mut ds = ViewDataset { views, mask: Mask::all_ones(n, paths.len()), labels: None };
    ds.apply_mask(mask)?;
    Ok(ds)
}

pub fn read_matrix_csv(path: &Path) -> Result<Matrix> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .map(|cell| {
                cell.trim().parse::<f64>().map_err(|_| {
                    Error::Data(format!(
                        "{}:{}: cannot parse '{}' as a number",
                        path.display(),
                        lineno + 1,
                        cell.trim()
                    ))
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Data(format!("{}: no data rows", path.display())));
    }
    Matrix::from_rows(&rows).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

pub fn write_matrix_csv(path: &Path, m: &Matrix) -> Result<()> {
    let mut out = String::new();
    for r in 0..m.rows() {
        let line: Vec<String> = m.row(r).iter().map(|v| v.to_string()).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_labels(path: &Path) -> Result<Vec<usize>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(lineno, l)| {
            l.trim().parse::<usize>().map_err(|_| {
                Error::Data(format!(
                    "{}:{}: cannot parse '{}' as a cluster id",
                    path.display(),
                    lineno + 1,
                    l.trim()
                ))
            })
        })
        .collect()
}

pub fn write_labels(path: &Path, labels: &[usize]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for l in labels {
        writeln!(f, "{l}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}
