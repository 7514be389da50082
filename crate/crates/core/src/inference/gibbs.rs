//! Pólya-Gamma blocked Gibbs sampler.
//!
//! Each iteration
//! 1. draws one PG(1, η_i) auxiliary variable per record, which turns the
//!    logistic likelihood into a Gaussian one in the latent effects;
//! 2. updates every hyperparameter block by adaptive random-walk Metropolis
//!    on its density with the latent Gaussian block integrated out;
//! 3. draws the latent block (β₀, β, α, ω, u*, γ) exactly from its Gaussian
//!    full conditional.
//!
//! Sum-to-zero constraints are imposed by sampling α, γ and each ICAR
//! component in an orthonormal basis of the constrained subspace, so the
//! latent block is a proper Gaussian in reduced coordinates `z`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::polya_gamma::sample_pg1;
use crate::cell::design_rows;
use crate::error::{Error, Result};
use crate::linalg::sum_to_zero_basis;
use crate::model::{logistic, HyperBlock, HyperKind, IndexedData, ModelSpec, ParameterLayout, Variant};

const TARGET_ACCEPT: f64 = 0.25;

struct ConstrainedBlock {
    z: usize,
    basis: DMatrix<f64>,
    /// Structure matrix in reduced coordinates (identity for IID effects).
    structure: DMatrix<f64>,
}

struct BymBlock {
    z_u: usize,
    dim: usize,
    /// n × dim map from reduced coordinates to u*.
    embed: DMatrix<f64>,
    /// embedᵀ Q embed for the scaled ICAR precision Q.
    reduced_precision: DMatrix<f64>,
    structured: Vec<bool>,
}

struct SpatialBlock {
    z_omega: usize,
    n: usize,
    bym: Option<BymBlock>,
}

pub(crate) struct Latent<'a> {
    spec: &'a ModelSpec,
    layout: ParameterLayout,
    dim: usize,
    num_beta: usize,
    beta_precision: f64,
    alpha: Option<ConstrainedBlock>,
    spatial: Vec<SpatialBlock>,
    gamma: Option<ConstrainedBlock>,
    row_ptr: Vec<usize>,
    row_idx: Vec<usize>,
    row_val: Vec<f64>,
    b: DVector<f64>,
    hyper_offset: usize,
}

impl<'a> Latent<'a> {
    pub(crate) fn new(spec: &'a ModelSpec, data: &IndexedData) -> Self {
        let layout = spec.layout();
        let num_beta = layout.num_beta;
        let mut dim = 1 + num_beta;
        let rw1 = |t: usize| {
            let mut r = DMatrix::zeros(t, t);
            for k in 1..t {
                r[(k, k)] += 1.0;
                r[(k - 1, k - 1)] += 1.0;
                r[(k, k - 1)] -= 1.0;
                r[(k - 1, k)] -= 1.0;
            }
            r
        };
        let alpha = layout.alpha.map(|_| {
            let t = spec.num_cohorts();
            let basis = sum_to_zero_basis(t);
            let structure = basis.transpose() * rw1(t) * &basis;
            let block = ConstrainedBlock { z: dim, basis, structure };
            dim += t - 1;
            block
        });
        let mut spatial = Vec::new();
        for t in 0..layout.omega.len() {
            let n = layout.area_count(t);
            spatial.push(SpatialBlock { z_omega: dim, n, bym: None });
            dim += n;
        }
        if spec.variant() == Variant::Proposed {
            for (t, block) in spatial.iter_mut().enumerate() {
                let icar = spec.icar(t).expect("proposed model has graphs");
                let reduced: usize = icar
                    .components
                    .iter()
                    .filter(|c| c.scale.is_some())
                    .map(|c| c.nodes.len() - 1)
                    .sum();
                let mut embed = DMatrix::zeros(block.n, reduced);
                let mut structured = vec![false; block.n];
                let mut col = 0;
                for c in icar.components.iter().filter(|c| c.scale.is_some()) {
                    let basis = sum_to_zero_basis(c.nodes.len());
                    for (a, &i) in c.nodes.iter().enumerate() {
                        structured[i] = true;
                        for k in 0..basis.ncols() {
                            embed[(i, col + k)] = basis[(a, k)];
                        }
                    }
                    col += basis.ncols();
                }
                let reduced_precision = embed.transpose() * icar.precision() * &embed;
                block.bym = Some(BymBlock {
                    z_u: dim,
                    dim: reduced,
                    embed,
                    reduced_precision,
                    structured,
                });
                dim += reduced;
            }
        }
        let gamma = layout.gamma.map(|_| {
            let w = spec.waves().len();
            let basis = sum_to_zero_basis(w);
            let block = ConstrainedBlock {
                z: dim,
                basis,
                structure: DMatrix::identity(w - 1, w - 1),
            };
            dim += w - 1;
            block
        });

        let rows = design_rows(spec.covariates());
        let mut row_ptr = vec![0];
        let mut row_idx = Vec::new();
        let mut row_val = Vec::new();
        let mut b = DVector::zeros(dim);
        for i in 0..data.len() {
            let start = row_idx.len();
            row_idx.push(0);
            row_val.push(1.0);
            for &k in &rows[data.cell[i] as usize] {
                row_idx.push(1 + k);
                row_val.push(1.0);
            }
            let t = data.cohort[i] as usize;
            if let Some(a) = &alpha {
                for k in 0..a.basis.ncols() {
                    row_idx.push(a.z + k);
                    row_val.push(a.basis[(t, k)]);
                }
            }
            if let Some(s) = spatial.get(t) {
                row_idx.push(s.z_omega + data.area[i] as usize);
                row_val.push(1.0);
            }
            if let Some(g) = &gamma {
                let w = data.wave[i] as usize;
                for k in 0..g.basis.ncols() {
                    row_idx.push(g.z + k);
                    row_val.push(g.basis[(w, k)]);
                }
            }
            let kappa = if data.y[i] { 0.5 } else { -0.5 };
            for e in start..row_idx.len() {
                b[row_idx[e]] += kappa * row_val[e];
            }
            row_ptr.push(row_idx.len());
        }
        let sd = spec.priors().beta_sd;
        Latent {
            spec,
            hyper_offset: layout.latent_len(),
            layout,
            dim,
            num_beta,
            beta_precision: 1.0 / (sd * sd),
            alpha,
            spatial,
            gamma,
            row_ptr,
            row_idx,
            row_val,
            b,
        }
    }

    pub(crate) fn layout(&self) -> &ParameterLayout {
        &self.layout
    }

    fn num_rows(&self) -> usize {
        self.row_ptr.len() - 1
    }

    fn hyper_slice<'t>(&self, h: &HyperBlock, theta: &'t [f64]) -> &'t [f64] {
        let s = h.start - self.hyper_offset;
        &theta[s..s + h.len]
    }

    /// Adds the prior precision of z under hyperparameters `theta` to `m`
    /// and returns the θ-dependent part of its log determinant.
    fn add_prior(&self, theta: &[f64], m: &mut DMatrix<f64>) -> f64 {
        for k in 0..=self.num_beta {
            m[(k, k)] += self.beta_precision;
        }
        let mut logdet = 0.0;
        for h in self.layout.hyper_blocks() {
            let th = self.hyper_slice(h, theta);
            match h.kind {
                HyperKind::Temporal | HyperKind::Survey => {
                    let block = if h.kind == HyperKind::Temporal { &self.alpha } else { &self.gamma };
                    let block = block.as_ref().unwrap();
                    let kappa = th[0].exp();
                    let d = block.structure.nrows();
                    for i in 0..d {
                        for j in 0..d {
                            m[(block.z + i, block.z + j)] += kappa * block.structure[(i, j)];
                        }
                    }
                    logdet += d as f64 * th[0];
                }
                HyperKind::Iid(t) => {
                    let s = &self.spatial[t];
                    let kappa = th[0].exp();
                    for i in 0..s.n {
                        m[(s.z_omega + i, s.z_omega + i)] += kappa;
                    }
                    logdet += s.n as f64 * th[0];
                }
                HyperKind::Bym2(t) => {
                    let s = &self.spatial[t];
                    let bym = s.bym.as_ref().unwrap();
                    let (lt, q) = (th[0], th[1]);
                    let tau = lt.exp();
                    let phi = logistic(q);
                    let log_a = lt + softplus(q);
                    let a = log_a.exp();
                    let ac = a * (phi / tau).sqrt();
                    for i in 0..s.n {
                        let oi = s.z_omega + i;
                        if !bym.structured[i] {
                            m[(oi, oi)] += tau;
                            logdet += lt;
                            continue;
                        }
                        m[(oi, oi)] += a;
                        logdet += log_a;
                        for k in 0..bym.dim {
                            let v = ac * bym.embed[(i, k)];
                            if v != 0.0 {
                                m[(oi, bym.z_u + k)] -= v;
                                m[(bym.z_u + k, oi)] -= v;
                            }
                        }
                    }
                    let ratio = q.exp();
                    for i in 0..bym.dim {
                        for j in 0..bym.dim {
                            m[(bym.z_u + i, bym.z_u + j)] += bym.reduced_precision[(i, j)];
                        }
                        m[(bym.z_u + i, bym.z_u + i)] += ratio;
                    }
                }
            }
        }
        logdet
    }

    fn log_hyperprior(&self, theta: &[f64]) -> f64 {
        self.layout
            .hyper_blocks()
            .iter()
            .map(|h| self.spec.log_hyperprior(h.kind, self.hyper_slice(h, theta)))
            .sum()
    }

    /// Σ ω_i r_i r_iᵀ.
    fn data_precision(&self, omega: &[f64]) -> DMatrix<f64> {
        let mut d = DMatrix::zeros(self.dim, self.dim);
        for i in 0..self.num_rows() {
            let (lo, hi) = (self.row_ptr[i], self.row_ptr[i + 1]);
            let w = omega[i];
            for e in lo..hi {
                let (ie, ve) = (self.row_idx[e], w * self.row_val[e]);
                for f in lo..hi {
                    d[(ie, self.row_idx[f])] += ve * self.row_val[f];
                }
            }
        }
        d
    }

    /// Collapsed log density of θ given the PG variables, with the factor
    /// of the latent Gaussian conditional needed for the subsequent draw.
    fn collapsed(&self, theta: &[f64], data_prec: &DMatrix<f64>) -> Option<Collapsed> {
        let mut p = data_prec.clone();
        let prior_logdet = self.add_prior(theta, &mut p);
        let chol = Cholesky::new(p)?;
        let logdet_p: f64 = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let mean = chol.solve(&self.b);
        let value = self.log_hyperprior(theta) + 0.5 * prior_logdet - 0.5 * logdet_p + 0.5 * self.b.dot(&mean);
        value.is_finite().then_some(Collapsed { value, chol, mean })
    }

    fn linear_predictors(&self, z: &DVector<f64>, out: &mut [f64]) {
        for (i, eta) in out.iter_mut().enumerate() {
            let mut s = 0.0;
            for e in self.row_ptr[i]..self.row_ptr[i + 1] {
                s += self.row_val[e] * z[self.row_idx[e]];
            }
            *eta = s;
        }
    }

    /// Writes the layout coordinates for (z, θ) into `x`.
    fn coordinates(&self, z: &DVector<f64>, theta: &[f64], x: &mut [f64]) {
        let l = &self.layout;
        x[..=self.num_beta].copy_from_slice(&z.as_slice()[..=self.num_beta]);
        if let (Some(a), Some(block)) = (l.alpha, &self.alpha) {
            let v = &block.basis * z.rows(block.z, block.basis.ncols());
            x[a..a + v.len()].copy_from_slice(v.as_slice());
        }
        for (t, s) in self.spatial.iter().enumerate() {
            let o = l.omega[t];
            x[o..o + s.n].copy_from_slice(&z.as_slice()[s.z_omega..s.z_omega + s.n]);
            if let Some(bym) = &s.bym {
                let u = &bym.embed * z.rows(bym.z_u, bym.dim);
                let us = l.structured[t];
                x[us..us + s.n].copy_from_slice(u.as_slice());
            }
        }
        if let (Some(g), Some(block)) = (l.gamma, &self.gamma) {
            let v = &block.basis * z.rows(block.z, block.basis.ncols());
            x[g..g + v.len()].copy_from_slice(v.as_slice());
        }
        x[self.hyper_offset..].copy_from_slice(theta);
    }
}

struct Collapsed {
    value: f64,
    chol: Cholesky<f64, Dyn>,
    mean: DVector<f64>,
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Adaptive random-walk proposal for one hyperparameter block.
struct Proposal {
    block: HyperBlock,
    log_scale: f64,
    chol: DMatrix<f64>,
    history: Vec<Vec<f64>>,
    accepted: usize,
    tried: usize,
}

impl Proposal {
    fn new(block: HyperBlock) -> Self {
        Proposal {
            block,
            log_scale: 0.5f64.ln(),
            chol: DMatrix::identity(block.len, block.len),
            history: Vec::new(),
            accepted: 0,
            tried: 0,
        }
    }

    fn step(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let e: Vec<f64> = (0..self.block.len).map(|_| StandardNormal.sample(rng)).collect();
        let e = DVector::from_vec(e);
        let v = &self.chol * e * self.log_scale.exp();
        v.as_slice().to_vec()
    }

    fn adapt(&mut self, iter: usize, accept_prob: f64) {
        let gain = (iter as f64 + 1.0).powf(-0.6);
        self.log_scale += gain * (accept_prob - TARGET_ACCEPT);
    }

    /// Replaces the proposal shape by the empirical covariance of the second
    /// half of the warmup history.
    fn reshape(&mut self) {
        let tail = &self.history[self.history.len() / 2..];
        let n = tail.len();
        let d = self.block.len;
        if n < 20 {
            return;
        }
        let mut mean = vec![0.0; d];
        for h in tail {
            for k in 0..d {
                mean[k] += h[k] / n as f64;
            }
        }
        let mut cov = DMatrix::zeros(d, d);
        for h in tail {
            for i in 0..d {
                for j in 0..d {
                    cov[(i, j)] += (h[i] - mean[i]) * (h[j] - mean[j]) / (n - 1) as f64;
                }
            }
        }
        for i in 0..d {
            cov[(i, i)] += 1e-6;
        }
        if let Some(c) = Cholesky::new(cov) {
            self.chol = c.l();
            self.log_scale = (2.38 / (d as f64).sqrt()).ln();
        }
    }
}

pub(crate) struct ChainOutput {
    /// Draw-major layout coordinates, `draws × layout.len()`.
    pub values: Vec<f64>,
    pub acceptance: Vec<f64>,
}

pub(crate) fn run_chain(
    latent: &Latent,
    warmup: usize,
    draws: usize,
    thin: usize,
    rng: &mut ChaCha8Rng,
) -> Result<ChainOutput> {
    let n = latent.num_rows();
    let width = latent.layout.len();
    let mut theta: Vec<f64> = latent
        .layout
        .hyper_blocks()
        .iter()
        .flat_map(|h| h.range())
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let mut proposals: Vec<Proposal> = latent.layout.hyper_blocks().iter().map(|&h| Proposal::new(h)).collect();
    let mut z = DVector::zeros(latent.dim);
    let mut eta = vec![0.0; n];
    let mut pg = vec![0.0; n];
    let mut values = Vec::with_capacity(draws * width);
    let mut x = vec![0.0; width];
    let total = warmup + draws * thin;
    let mut reshape_at = 100;

    for iter in 0..total {
        latent.linear_predictors(&z, &mut eta);
        for (w, &e) in pg.iter_mut().zip(&eta) {
            *w = sample_pg1(e, rng);
        }
        let data_prec = latent.data_precision(&pg);
        let mut current = latent
            .collapsed(&theta, &data_prec)
            .ok_or_else(|| Error::Numerical("latent precision is not positive definite".into()))?;

        for p in proposals.iter_mut() {
            let off = p.block.start - latent.hyper_offset;
            let step = p.step(rng);
            let mut prop = theta.clone();
            for (k, s) in step.iter().enumerate() {
                prop[off + k] += s;
            }
            let (accept_prob, next) = match latent.collapsed(&prop, &data_prec) {
                Some(c) => (((c.value - current.value).min(0.0)).exp(), Some(c)),
                None => (0.0, None),
            };
            let accepted = rng.random::<f64>() < accept_prob;
            if accepted {
                theta = prop;
                current = next.unwrap();
            }
            if iter < warmup {
                p.adapt(iter, accept_prob);
                p.history.push(theta[off..off + p.block.len].to_vec());
            } else {
                p.tried += 1;
                p.accepted += accepted as usize;
            }
        }
        if iter + 1 == reshape_at && iter < warmup * 3 / 4 {
            for p in proposals.iter_mut() {
                p.reshape();
            }
            reshape_at *= 2;
        }

        let eps: Vec<f64> = (0..latent.dim).map(|_| StandardNormal.sample(rng)).collect();
        let eps = DVector::from_vec(eps);
        let noise = current
            .chol
            .l_dirty()
            .tr_solve_lower_triangular(&eps)
            .ok_or_else(|| Error::Numerical("triangular solve failed".into()))?;
        z = &current.mean + noise;

        if iter >= warmup && (iter - warmup) % thin == 0 {
            latent.coordinates(&z, &theta, &mut x);
            values.extend_from_slice(&x);
        }
    }
    let acceptance = proposals
        .iter()
        .map(|p| if p.tried == 0 { f64::NAN } else { p.accepted as f64 / p.tried as f64 })
        .collect();
    Ok(ChainOutput { values, acceptance })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cell::{CellKey, CovariateSet};
    use crate::graph::AdjacencyGraph;
    use crate::ingest::{AreaId, Cohort, GeographyVersion, MoverRecord, SurveyWave};
    use crate::model::{PosteriorDensity, PriorConfig};
    use rand::SeedableRng;
    use std::collections::BTreeMap;

    fn small_spec() -> ModelSpec {
        let nodes: Vec<AreaId> = ["a", "b", "c", "d"].iter().map(|&s| s.into()).collect();
        let edges = vec![(nodes[0].clone(), nodes[1].clone()), (nodes[1].clone(), nodes[2].clone())];
        let mut graphs = BTreeMap::new();
        graphs.insert(GeographyVersion::V2010, AdjacencyGraph::new(nodes, &edges, GeographyVersion::V2010).unwrap());
        ModelSpec::from_graphs(
            Variant::Proposed,
            CovariateSet::empty().with(crate::cell::Covariate::Tenure),
            Cohort(0),
            2,
            vec![SurveyWave(2017), SurveyWave(2019)],
            PriorConfig { beta_sd: 1.0, precision_shape: 2.0, precision_rate: 1.0, ..Default::default() },
            &graphs,
        )
        .unwrap()
    }

    fn records(spec: &ModelSpec, rng: &mut ChaCha8Rng) -> Vec<MoverRecord> {
        (0..40)
            .map(|i| {
                let cohort = Cohort(rng.random_range(0..2));
                MoverRecord {
                    household_id: i.to_string(),
                    survey_wave: if cohort.0 == 0 { SurveyWave(2017) } else { SurveyWave(2019) },
                    area: spec.cohorts()[0].areas[rng.random_range(0..4)].clone(),
                    geography: GeographyVersion::V2010,
                    cohort,
                    displaced: rng.random_bool(0.4),
                    cell: CellKey::from_index(rng.random_range(0..900)).unwrap(),
                }
            })
            .collect()
    }

    /// The Gaussian prior on z, mapped to layout coordinates, must agree with
    /// the random-effect densities of the log posterior: for fixed θ the
    /// difference between the two log densities is constant in z.
    #[test]
    fn reduced_prior_matches_log_posterior() {
        let spec = small_spec();
        let data = spec.index_data(&[]).unwrap();
        let latent = Latent::new(&spec, &data);
        let density = PosteriorDensity::new(&spec, &data);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let theta: Vec<f64> = (0..latent.layout.len() - latent.hyper_offset)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let mut q = DMatrix::zeros(latent.dim, latent.dim);
        latent.add_prior(&theta, &mut q);
        let mut diffs = Vec::new();
        for _ in 0..5 {
            let z = DVector::from_vec((0..latent.dim).map(|_| rng.random_range(-1.0..1.0)).collect());
            let mut x = vec![0.0; latent.layout.len()];
            latent.coordinates(&z, &theta, &mut x);
            let lp = density.evaluate(&x, None).unwrap();
            let gauss = -0.5 * z.dot(&(&q * &z));
            diffs.push(lp - gauss);
        }
        for d in &diffs {
            assert!((d - diffs[0]).abs() < 1e-9, "{diffs:?}");
        }
    }

    /// Without data the latent Gaussian integrates out exactly, leaving the
    /// hyperprior up to a constant.
    #[test]
    fn collapsed_density_without_data_is_hyperprior() {
        let spec = small_spec();
        let data = spec.index_data(&[]).unwrap();
        let latent = Latent::new(&spec, &data);
        let zero = DMatrix::zeros(latent.dim, latent.dim);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let k = latent.layout.len() - latent.hyper_offset;
        let mut vals = Vec::new();
        for _ in 0..4 {
            let theta: Vec<f64> = (0..k).map(|_| rng.random_range(-1.5..1.5)).collect();
            let c = latent.collapsed(&theta, &zero).unwrap();
            vals.push(c.value - latent.log_hyperprior(&theta));
        }
        for v in &vals {
            assert!((v - vals[0]).abs() < 1e-9, "{vals:?}");
        }
    }

    #[test]
    fn latent_rows_reproduce_linear_predictor() {
        let spec = small_spec();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let recs = records(&spec, &mut rng);
        let data = spec.index_data(&recs).unwrap();
        let latent = Latent::new(&spec, &data);
        let z = DVector::from_vec((0..latent.dim).map(|_| rng.random_range(-1.0..1.0)).collect());
        let theta = vec![0.1; latent.layout.len() - latent.hyper_offset];
        let mut x = vec![0.0; latent.layout.len()];
        latent.coordinates(&z, &theta, &mut x);
        let params = latent.layout.unpack(&x);
        let mut eta = vec![0.0; recs.len()];
        latent.linear_predictors(&z, &mut eta);
        for (r, e) in recs.iter().zip(&eta) {
            let direct = crate::model::linear_predictor(&spec, &params, r.cell, &r.area, r.cohort, Some(r.survey_wave)).unwrap();
            assert!((direct - e).abs() < 1e-12);
        }
        assert!(params.alpha.iter().sum::<f64>().abs() < 1e-12);
        assert!(params.gamma.iter().sum::<f64>().abs() < 1e-12);
        // the isolated node carries no structured effect, the path sums to zero
        assert_eq!(params.structured[0][3], 0.0);
        assert!(params.structured[0][..3].iter().sum::<f64>().abs() < 1e-12);
    }
}
