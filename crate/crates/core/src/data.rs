//! Seeded synthetic data with known ground truth, and CSV ingestion.
//!
//! * [`gen_common_ensemble`] builds covariance families that share an exact
//!   (or noisy) common eigenbasis.
//! * [`gen_toy_dg`] builds a small multi-domain classification problem with
//!   an invariant class signal and domain-dependent spurious features.
//! * [`load_domain_csv`] reads per-domain CSV files into a [`DomainData`]
//!   that can be sampled into balanced [`DomainBatch`]es.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{
    self, CovarianceMatrix, CovarianceSet, Matrix, OrthogonalBasis, WeightedCovariance,
};

pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Haar-distributed rotation: QR of a Gaussian matrix with the signs of
/// `diag(R)` folded into `Q`, then the first column negated if `det Q = −1`.
pub fn random_rotation(d: usize, rng: &mut impl Rng) -> OrthogonalBasis {
    let g = nalgebra::DMatrix::<f64>::from_fn(d, d, |_, _| rng.sample(StandardNormal));
    let qr = g.qr();
    let q = qr.q();
    let r = qr.r();
    let mut out = Matrix::from_fn(d, d, |i, j| {
        let s = if r[(j, j)] < 0.0 { -1.0 } else { 1.0 };
        q[(i, j)] * s
    });
    if linalg::det(&out).unwrap_or(1.0) < 0.0 {
        for i in 0..d {
            out[(i, 0)] = -out[(i, 0)];
        }
    }
    OrthogonalBasis::from_matrix_unchecked(out)
}

/// A covariance family with a planted common basis.
#[derive(Clone, Debug)]
pub struct CommonBasisEnsemble {
    pub truth: OrthogonalBasis,
    /// `spectra[k][l]` is the planted variance of domain `k` along `truth[:, l]`.
    pub spectra: Vec<Vec<f64>>,
    pub noise_level: f64,
    pub covs: CovarianceSet,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case", deny_unknown_fields)]
pub struct EnsembleParams {
    pub d: usize,
    pub k: usize,
    pub spectra_range: (f64, f64),
    pub noise_level: f64,
    /// Sample weight `n_k` attached to every domain.
    pub weight: f64,
}

impl Default for EnsembleParams {
    fn default() -> Self {
        EnsembleParams {
            d: 8,
            k: 3,
            spectra_range: (0.5, 10.0),
            noise_level: 0.0,
            weight: 20.0,
        }
    }
}

/// Draws `d` values in `[lo, hi]` whose pairwise gaps are at least 5% of
/// the range (or `range/(d−1)·½` when `d` is too large for 5% to fit),
/// in random order.
fn gapped_spectrum(d: usize, lo: f64, hi: f64, rng: &mut impl Rng) -> Vec<f64> {
    let range = hi - lo;
    let gap = if d > 1 {
        (0.05 * range).min(0.5 * range / (d - 1) as f64)
    } else {
        0.0
    };
    let slack = range - gap * (d.saturating_sub(1)) as f64;
    let mut u: Vec<f64> = (0..d).map(|_| rng.random::<f64>() * slack).collect();
    u.sort_by(f64::total_cmp);
    let mut vals: Vec<f64> = u
        .iter()
        .enumerate()
        .map(|(i, v)| lo + v + gap * i as f64)
        .collect();
    vals.shuffle(rng);
    vals
}

/// Builds `S_k = Q diag(λ_k) Qᵀ`, optionally perturbed by `τ E_k` with `E_k`
/// symmetric of unit Frobenius norm and then floored to PSD.
pub fn gen_common_ensemble(params: &EnsembleParams, seed: u64) -> Result<CommonBasisEnsemble> {
    let EnsembleParams {
        d,
        k,
        spectra_range: (lo, hi),
        noise_level,
        weight,
    } = *params;
    if d < 2 {
        return Err(Error::DimensionTooSmall { dim: d, min: 2 });
    }
    if k < 1 {
        return Err(Error::InvalidValue("need at least one domain".into()));
    }
    if !(lo > 0.0 && hi > lo) {
        return Err(Error::InvalidValue(format!("spectra range ({lo}, {hi}) must be positive and increasing")));
    }
    if !(noise_level >= 0.0) {
        return Err(Error::InvalidValue(format!("noise level {noise_level} must be ≥ 0")));
    }
    let mut rng = rng_from_seed(seed);
    let q = random_rotation(d, &mut rng);
    let spectra: Vec<Vec<f64>> = (0..k).map(|_| gapped_spectrum(d, lo, hi, &mut rng)).collect();
    let mut domains = Vec::with_capacity(k);
    for lam in &spectra {
        let mut s = q.matmul(&Matrix::diag_from(lam)).matmul_tr(&q).symmetrize();
        if noise_level > 0.0 {
            let raw = Matrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal)).symmetrize();
            let e = raw.scale(1.0 / raw.frobenius_norm());
            s = s.add(&e.scale(noise_level)).symmetrize();
            s = psd_floor(&s);
        }
        domains.push(WeightedCovariance {
            cov: CovarianceMatrix::new(s)?,
            weight,
        });
    }
    Ok(CommonBasisEnsemble {
        truth: q,
        spectra,
        noise_level,
        covs: CovarianceSet::new(domains)?,
    })
}

/// Clamps negative eigenvalues to zero; returns the input unchanged when it
/// is already PSD.
fn psd_floor(s: &Matrix) -> Matrix {
    let d = s.rows();
    let eig = nalgebra::DMatrix::from_fn(d, d, |i, j| s[(i, j)]).symmetric_eigen();
    if eig.eigenvalues.iter().all(|&v| v >= 0.0) {
        return s.clone();
    }
    let v = Matrix::from_fn(d, d, |i, j| eig.eigenvectors[(i, j)]);
    let lam: Vec<f64> = eig.eigenvalues.iter().map(|&x| x.max(0.0)).collect();
    v.matmul(&Matrix::diag_from(&lam)).matmul_tr(&v).symmetrize()
}

/// Rows and labels of one domain.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainSet {
    pub x: Matrix,
    pub y: Vec<usize>,
}

impl DomainSet {
    /// First `n` rows and the rest.
    pub fn split(&self, n: usize) -> Result<(DomainSet, DomainSet)> {
        let rows = self.x.rows();
        if n == 0 || n >= rows {
            return Err(Error::InvalidValue(format!("cannot split {rows} rows at {n}")));
        }
        let head: Vec<usize> = (0..n).collect();
        let tail: Vec<usize> = (n..rows).collect();
        Ok((
            DomainSet {
                x: self.x.select_rows(&head),
                y: self.y[..n].to_vec(),
            },
            DomainSet {
                x: self.x.select_rows(&tail),
                y: self.y[n..].to_vec(),
            },
        ))
    }
}

/// Multi-domain classification data with an invariant class signal.
///
/// Latent coordinates (before a fixed random rotation of ℝᵖ):
/// the first `C` hold the class mean `margin·e_y` plus unit noise, identical
/// in law across domains; the next `C` hold `strength·s_k·e_y` plus noise,
/// where `s_k` is positive and varies over training domains and is negative
/// on the held-out domain; the remaining coordinates are nuisance noise whose
/// scale varies by domain in proportion to `strength`.
#[derive(Clone, Debug)]
pub struct ToyDGDataset {
    pub domains: Vec<DomainSet>,
    pub heldout: usize,
    pub num_classes: usize,
    pub spurious_signs: Vec<f64>,
    pub mixing: OrthogonalBasis,
}

/// Spurious strength at which an ERM model loses at least ten points of
/// accuracy on the held-out domain (with the default margin).
pub const HARD_SPURIOUS_STRENGTH: f64 = 1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case", deny_unknown_fields)]
pub struct ToyDgParams {
    pub p: usize,
    pub k: usize,
    pub c: usize,
    pub n_per_domain: usize,
    pub spurious_strength: f64,
    /// Distance of the invariant class means from the origin.
    pub margin: f64,
}

impl Default for ToyDgParams {
    fn default() -> Self {
        ToyDgParams {
            p: 20,
            k: 3,
            c: 4,
            n_per_domain: 400,
            spurious_strength: HARD_SPURIOUS_STRENGTH,
            margin: 3.0,
        }
    }
}

pub fn gen_toy_dg(params: &ToyDgParams, seed: u64) -> Result<ToyDGDataset> {
    let ToyDgParams {
        p,
        k,
        c,
        n_per_domain,
        spurious_strength,
        margin,
    } = *params;
    if p < 2 * c {
        return Err(Error::InvalidValue(format!("need p ≥ 2C, got p = {p}, C = {c}")));
    }
    if k < 3 {
        return Err(Error::InvalidValue(format!("need K ≥ 3 domains, got {k}")));
    }
    if c < 2 {
        return Err(Error::InvalidValue("need at least two classes".into()));
    }
    if n_per_domain < 2 {
        return Err(Error::DegenerateBatch(format!("{n_per_domain} samples per domain")));
    }
    let mut rng = rng_from_seed(seed);
    let mixing = random_rotation(p, &mut rng);
    let heldout = k - 1;
    let train = k - 1;
    // training domains: correlation weakens from 1.0 towards 0.6; held-out flips.
    let spurious_signs: Vec<f64> = (0..k)
        .map(|j| {
            if j == heldout {
                -1.0
            } else if train > 1 {
                1.0 - 0.4 * j as f64 / (train - 1) as f64
            } else {
                1.0
            }
        })
        .collect();
    let nuisance_scale: Vec<f64> = (0..k)
        .map(|j| 1.0 + spurious_strength * 0.5 * j as f64 / (k - 1) as f64)
        .collect();

    let mut domains = Vec::with_capacity(k);
    for j in 0..k {
        let mut y: Vec<usize> = (0..n_per_domain).map(|i| i % c).collect();
        y.shuffle(&mut rng);
        let latent = Matrix::from_fn(n_per_domain, p, |i, col| {
            let noise: f64 = rng.sample(StandardNormal);
            let cls = y[i];
            if col < c {
                margin * f64::from(u8::from(col == cls)) + noise
            } else if col < 2 * c {
                let hit = f64::from(u8::from(col - c == cls));
                spurious_strength * spurious_signs[j] * hit + 0.5 * noise
            } else {
                nuisance_scale[j] * noise
            }
        });
        let x = latent.matmul_tr(&mixing);
        domains.push(DomainSet { x, y });
    }
    Ok(ToyDGDataset {
        domains,
        heldout,
        num_classes: c,
        spurious_signs,
        mixing,
    })
}

impl ToyDGDataset {
    pub fn train_domains(&self) -> Vec<&DomainSet> {
        self.domains
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != self.heldout)
            .map(|(_, d)| d)
            .collect()
    }

    pub fn heldout_domain(&self) -> &DomainSet {
        &self.domains[self.heldout]
    }

    pub fn input_dim(&self) -> usize {
        self.domains[0].x.cols()
    }

    /// Training portion as a sampler-ready [`DomainData`].
    pub fn train_data(&self) -> DomainData {
        DomainData {
            domains: self.train_domains().into_iter().cloned().collect(),
        }
    }

    /// Same features with every label drawn uniformly at random.
    pub fn with_permuted_labels(&self, seed: u64) -> ToyDGDataset {
        let mut rng = rng_from_seed(seed);
        let mut out = self.clone();
        for d in &mut out.domains {
            d.y.shuffle(&mut rng);
        }
        out
    }

    /// Writes `domain_<j>.csv` (features then label) and `manifest.json`.
    pub fn write_csv(&self, dir: &Path) -> Result<DatasetManifest> {
        std::fs::create_dir_all(dir)?;
        let mut paths = Vec::new();
        for (j, dom) in self.domains.iter().enumerate() {
            let path = dir.join(format!("domain_{j}.csv"));
            let mut w = csv::Writer::from_path(&path)?;
            for i in 0..dom.x.rows() {
                let mut rec: Vec<String> =
                    dom.x.row(i).iter().map(|&v| linalg::io::fmt_f64(v)).collect();
                rec.push(dom.y[i].to_string());
                w.write_record(&rec)?;
            }
            w.flush()?;
            paths.push(PathBuf::from(format!("domain_{j}.csv")));
        }
        let manifest = DatasetManifest {
            domains: paths,
            heldout: self.heldout,
            num_classes: self.num_classes,
        };
        std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
        Ok(manifest)
    }
}

/// Lists per-domain CSV files (relative to the manifest) and the held-out index.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub domains: Vec<PathBuf>,
    pub heldout: usize,
    pub num_classes: usize,
}

impl DatasetManifest {
    pub fn read(path: &Path) -> Result<(DatasetManifest, Vec<PathBuf>)> {
        let m: DatasetManifest = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolved = m.domains.iter().map(|p| base.join(p)).collect();
        Ok((m, resolved))
    }
}

/// One training mini-batch: rows from every domain, with labels and domain ids.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainBatch {
    pub x: Matrix,
    pub labels: Vec<usize>,
    pub domains: Vec<usize>,
}

impl DomainBatch {
    /// Checks that every domain `0..k` appears at least twice and labels are `< c`.
    pub fn validate(&self, k: usize, c: usize) -> Result<()> {
        let n = self.x.rows();
        if self.labels.len() != n || self.domains.len() != n {
            return Err(crate::error::shape_err(
                "domain batch",
                format!("{n} rows, {} labels, {} domain ids", self.labels.len(), self.domains.len()),
            ));
        }
        if let Some(&bad) = self.labels.iter().find(|&&y| y >= c) {
            return Err(Error::InvalidValue(format!("label {bad} out of range for {c} classes")));
        }
        if let Some(&bad) = self.domains.iter().find(|&&dm| dm >= k) {
            return Err(Error::WrongDomainCount {
                expected: k,
                found: bad + 1,
            });
        }
        for dom in 0..k {
            let count = self.domains.iter().filter(|&&x| x == dom).count();
            if count < 2 {
                return Err(Error::DegenerateBatch(format!(
                    "domain {dom} has {count} sample(s) in the batch"
                )));
            }
        }
        Ok(())
    }

    /// Row indices per domain, in row order.
    pub fn domain_rows(&self, k: usize) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); k];
        for (i, &dm) in self.domains.iter().enumerate() {
            if dm < k {
                out[dm].push(i);
            }
        }
        out
    }

    pub fn num_domains(&self) -> usize {
        self.domains.iter().max().map_or(0, |m| m + 1)
    }
}

/// Per-domain training pools.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainData {
    pub domains: Vec<DomainSet>,
}

impl DomainData {
    pub fn num_domains(&self) -> usize {
        self.domains.len()
    }

    /// Infinite balanced sampler: each batch has `per_domain` rows from each
    /// domain, drawn without replacement from a reshuffled pool.
    pub fn sampler(&self, per_domain: usize, seed: u64) -> Result<DomainSampler<'_>> {
        if per_domain < 2 {
            return Err(Error::DegenerateBatch(format!(
                "batch size per domain must be ≥ 2, got {per_domain}"
            )));
        }
        Ok(DomainSampler {
            data: self,
            per_domain,
            rng: rng_from_seed(seed),
            cursors: vec![usize::MAX; self.domains.len()],
            orders: vec![Vec::new(); self.domains.len()],
        })
    }
}

pub struct DomainSampler<'a> {
    data: &'a DomainData,
    per_domain: usize,
    rng: ChaCha8Rng,
    cursors: Vec<usize>,
    orders: Vec<Vec<usize>>,
}

impl Iterator for DomainSampler<'_> {
    type Item = DomainBatch;

    fn next(&mut self) -> Option<DomainBatch> {
        let mut rows: Vec<Vec<f64>> = Vec::new();
        let mut labels = Vec::new();
        let mut domains = Vec::new();
        for (j, dom) in self.data.domains.iter().enumerate() {
            let n = dom.x.rows();
            for _ in 0..self.per_domain {
                if self.cursors[j] >= self.orders[j].len() {
                    let mut order: Vec<usize> = (0..n).collect();
                    order.shuffle(&mut self.rng);
                    self.orders[j] = order;
                    self.cursors[j] = 0;
                }
                let i = self.orders[j][self.cursors[j]];
                self.cursors[j] += 1;
                rows.push(dom.x.row(i).to_vec());
                labels.push(dom.y[i]);
                domains.push(j);
            }
        }
        Some(DomainBatch {
            x: Matrix::from_rows(&rows).expect("finite rows"),
            labels,
            domains,
        })
    }
}

/// Reads one CSV per domain: `p` feature columns followed by one integer
/// class label column.
pub fn load_domain_csv(paths: &[PathBuf]) -> Result<DomainData> {
    let mut domains = Vec::with_capacity(paths.len());
    let mut width: Option<usize> = None;
    for path in paths {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .flexible(true)
            .from_path(path)?;
        let mut rows = Vec::new();
        let mut y = Vec::new();
        for (r, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let schema = |col: usize, detail: String| Error::SchemaMismatch {
                path: path.clone(),
                row: r + 1,
                col,
                detail,
            };
            let w = *width.get_or_insert(rec.len());
            if rec.len() != w || w < 2 {
                return Err(schema(rec.len(), format!("expected {w} columns (≥ 2), got {}", rec.len())));
            }
            let mut feats = Vec::with_capacity(w - 1);
            for (c, cell) in rec.iter().take(w - 1).enumerate() {
                let v = cell
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| schema(c + 1, format!("not a finite number: {cell:?}")))?;
                feats.push(v);
            }
            let label_cell = &rec[w - 1];
            let label = label_cell
                .parse::<usize>()
                .map_err(|_| schema(w, format!("label is not a non-negative integer: {label_cell:?}")))?;
            rows.push(feats);
            y.push(label);
        }
        if rows.len() < 2 {
            return Err(Error::DegenerateBatch(format!(
                "{} has {} row(s); each domain needs at least 2",
                path.display(),
                rows.len()
            )));
        }
        domains.push(DomainSet {
            x: Matrix::from_rows(&rows)?,
            y,
        });
    }
    Ok(DomainData { domains })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rotation_is_proper_orthogonal() {
        let mut rng = rng_from_seed(0);
        for d in [2, 5, 16] {
            let q = random_rotation(d, &mut rng);
            assert!(q.orthogonality_error() < 1e-12);
            assert!((q.det() - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn gapped_spectrum_respects_gap() {
        let mut rng = rng_from_seed(1);
        for _ in 0..50 {
            let mut v = gapped_spectrum(8, 0.5, 10.0, &mut rng);
            v.sort_by(f64::total_cmp);
            assert!(v.windows(2).all(|w| w[1] - w[0] >= 0.05 * 9.5 - 1e-12));
            assert!(v[0] >= 0.5 && v[7] <= 10.0);
        }
    }

    #[test]
    fn noiseless_ensemble_commutes_and_is_diagonal_in_truth() {
        let ens = gen_common_ensemble(&EnsembleParams::default(), 42).unwrap();
        let mats: Vec<&Matrix> = ens.covs.iter().map(|(s, _)| s).collect();
        for a in &mats {
            for b in &mats {
                let comm = a.matmul(b).sub(&b.matmul(a)).frobenius_norm();
                assert!(comm < 1e-10);
            }
        }
        for hat in ens.covs.transformed(ens.truth.as_matrix()) {
            assert!(linalg::offdiag_energy(&hat).unwrap() < 1e-12);
        }
    }

    #[test]
    fn generators_are_seed_deterministic() {
        let a = gen_common_ensemble(&EnsembleParams::default(), 7).unwrap();
        let b = gen_common_ensemble(&EnsembleParams::default(), 7).unwrap();
        assert_eq!(a.covs, b.covs);
        let c = gen_common_ensemble(&EnsembleParams::default(), 8).unwrap();
        assert!(a.truth.sub(&c.truth).frobenius_norm() > 0.1);

        let p = ToyDgParams::default();
        let x = gen_toy_dg(&p, 3).unwrap();
        let y = gen_toy_dg(&p, 3).unwrap();
        for (u, v) in x.domains.iter().zip(&y.domains) {
            assert_eq!(u, v);
        }
    }

    #[test]
    fn psd_floor_moves_eigenvalues_by_at_most_noise_times_d() {
        let params = EnsembleParams {
            d: 6,
            spectra_range: (0.01, 1.0),
            noise_level: 0.5,
            ..EnsembleParams::default()
        };
        for seed in 0..20 {
            let ens = gen_common_ensemble(&params, seed).unwrap();
            for ((s, _), lam) in ens.covs.iter().zip(&ens.spectra) {
                let eig = nalgebra::DMatrix::from_fn(6, 6, |i, j| s[(i, j)]).symmetric_eigenvalues();
                let mut got: Vec<f64> = eig.iter().cloned().collect();
                got.sort_by(f64::total_cmp);
                let mut want = lam.clone();
                want.sort_by(f64::total_cmp);
                for (g, w) in got.iter().zip(&want) {
                    assert!(*g >= -1e-12);
                    assert!((g - w).abs() <= 0.5 * 6.0);
                }
            }
        }
    }

    #[test]
    fn zero_strength_domains_share_distribution_parameters() {
        let p = ToyDgParams {
            spurious_strength: 0.0,
            ..ToyDgParams::default()
        };
        let ds = gen_toy_dg(&p, 1).unwrap();
        // Latent second-moment of each domain should agree up to sampling error.
        let covs: Vec<Matrix> = ds
            .domains
            .iter()
            .map(|d| linalg::covariance(&d.x).unwrap().into_matrix())
            .collect();
        for c in &covs[1..] {
            assert!(c.sub(&covs[0]).max_abs() < 0.5);
        }
    }

    #[test]
    fn sampler_batches_cover_every_domain() {
        let ds = gen_toy_dg(&ToyDgParams::default(), 5).unwrap();
        let data = ds.train_data();
        let mut s = data.sampler(8, 0).unwrap();
        let b = s.next().unwrap();
        assert_eq!(b.x.rows(), 16);
        b.validate(2, 4).unwrap();
        assert!(data.sampler(1, 0).is_err());
    }

    #[test]
    fn batch_validation_errors() {
        let b = DomainBatch {
            x: Matrix::zeros(3, 2),
            labels: vec![0, 1, 0],
            domains: vec![0, 0, 1],
        };
        assert!(matches!(b.validate(2, 2), Err(Error::DegenerateBatch(_))));
        assert!(matches!(b.validate(2, 1), Err(Error::InvalidValue(_))));
    }
}
