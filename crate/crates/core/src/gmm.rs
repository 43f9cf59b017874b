//! Analytic Gaussian-mixture targets.
//!
//! The target density is `p(x) = sum_j w_j N(x; mu_j, Sigma_j)`. Everything
//! downstream needs three exact quantities at arbitrary points:
//!
//! * `log p(x)`, evaluated in log space through a log-sum-exp over
//!   per-component log densities;
//! * the score `s(x) = grad log p(x) = sum_j r_j(x) s_j(x)` where
//!   `s_j = -P_j (x - mu_j)` and `r_j` are softmax responsibilities;
//! * the score Jacobian (Hessian of `log p`)
//!   `H = sum_j r_j (-P_j + s_j s_j^T) - s_bar s_bar^T`, with
//!   `s_bar = sum_j r_j s_j`.
//!
//! Each component caches its Cholesky factor, precision matrix, and log
//! normalizer at construction, so evaluation never refactorizes. A mixture
//! diffused under the variance-preserving forward process stays a mixture:
//! [`GmmSpec::diffuse`] maps `(w_j, mu_j, Sigma_j)` to
//! `(w_j, alpha mu_j, alpha^2 Sigma_j + sigma^2 I)`, which is what lets the
//! probability-flow velocity use exact scores instead of a learned model.
//!
//! [`benchmark_gmm`] builds the two-component benchmark family used by the
//! experiments: means `-2 e_0` and `+2 e_0`, weights `0.25 / 0.75`, one
//! axis-aligned noisy-diagonal covariance and one conjugated by a random
//! rotation drawn from the QR decomposition of a Gaussian matrix.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::Result;

pub const LN_2PI: f64 = 1.8378770664093453;

/// One mixture component plus its cached factorizations.
///
/// `weight`, `mean`, and `covariance` are the defining data; everything else
/// is derived at construction and never serialized.
#[derive(Debug, Clone)]
pub struct ComponentSpec {
    pub weight: f64,
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    /// Lower-triangular Cholesky factor L with covariance = L L^T.
    chol: DMatrix<f64>,
    /// Inverse covariance.
    precision: DMatrix<f64>,
    /// log of the Gaussian normalizer: -(D/2) ln(2 pi) - sum_i ln L_ii.
    log_norm: f64,
    /// ln(weight), cached for the log-sum-exp.
    log_weight: f64,
}

impl ComponentSpec {
    pub fn new(weight: f64, mean: DVector<f64>, covariance: DMatrix<f64>) -> Result<Self> {
        let dim = mean.len();
        if covariance.nrows() != dim || covariance.ncols() != dim {
            return Err(Error::invalid(format!(
                "covariance is {}x{}, expected {dim}x{dim}",
                covariance.nrows(),
                covariance.ncols()
            )));
        }
        if !(weight > 0.0) || !weight.is_finite() {
            return Err(Error::invalid(format!("component weight {weight} must be positive")));
        }
        let max_abs = covariance.amax().max(1.0);
        for r in 0..dim {
            for c in 0..r {
                if (covariance[(r, c)] - covariance[(c, r)]).abs() > 1e-12 * max_abs {
                    return Err(Error::NotPositiveDefinite(format!(
                        "asymmetric covariance at ({r}, {c})"
                    )));
                }
            }
        }
        let chol = nalgebra::Cholesky::new(covariance.clone())
            .ok_or_else(|| Error::NotPositiveDefinite("Cholesky factorization failed".into()))?;
        let mut log_det_half = 0.0;
        for i in 0..dim {
            log_det_half += chol.l_dirty()[(i, i)].ln();
        }
        let precision = chol.inverse();
        let log_norm = -0.5 * dim as f64 * LN_2PI - log_det_half;
        Ok(ComponentSpec {
            weight,
            mean,
            covariance,
            chol: chol.unpack(),
            precision,
            log_norm,
            log_weight: weight.ln(),
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Log density of this component alone (without the mixture weight).
    pub fn log_density(&self, x: &DVector<f64>) -> f64 {
        let d = x - &self.mean;
        let q = (&self.precision * &d).dot(&d);
        self.log_norm - 0.5 * q
    }
}

impl PartialEq for ComponentSpec {
    fn eq(&self, other: &Self) -> bool {
        self.weight == other.weight
            && self.mean == other.mean
            && self.covariance == other.covariance
    }
}

/// A validated Gaussian mixture. Weights sum to one within 1e-12.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmSpec {
    dim: usize,
    components: Vec<ComponentSpec>,
}

/// Reusable buffers for the evaluation hot path. The flow integrator calls
/// [`GmmSpec::score_into`] hundreds of millions of times per SMC run; going
/// through a scratch keeps those calls allocation-free.
#[derive(Debug, Clone)]
pub struct GmmScratch {
    d: DVector<f64>,
    /// Per-component P_j (x - mu_j).
    pd: Vec<DVector<f64>>,
    /// Per-component unnormalized log responsibilities.
    lw: Vec<f64>,
    aux: DVector<f64>,
}

impl GmmScratch {
    pub fn new(dim: usize, n_components: usize) -> Self {
        GmmScratch {
            d: DVector::zeros(dim),
            pd: vec![DVector::zeros(dim); n_components],
            lw: vec![0.0; n_components],
            aux: DVector::zeros(dim),
        }
    }

    pub fn for_gmm(gmm: &GmmSpec) -> Self {
        Self::new(gmm.dim(), gmm.n_components())
    }
}

impl GmmSpec {
    pub fn new(components: Vec<ComponentSpec>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::invalid("mixture needs at least one component"));
        }
        let dim = components[0].dim();
        if dim == 0 {
            return Err(Error::invalid("mixture dimension must be positive"));
        }
        if components.iter().any(|c| c.dim() != dim) {
            return Err(Error::invalid("components disagree on dimension"));
        }
        let total: f64 = components.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::invalid(format!("weights sum to {total}, expected 1")));
        }
        Ok(GmmSpec { dim, components })
    }

    /// Same components under different mixture weights. Means, covariances,
    /// and component order are preserved; only the weights change.
    pub fn with_weights(&self, weights: &[f64]) -> Result<GmmSpec> {
        if weights.len() != self.components.len() {
            return Err(Error::invalid(format!(
                "{} weights for {} components",
                weights.len(),
                self.components.len()
            )));
        }
        let components = self
            .components
            .iter()
            .zip(weights)
            .map(|(c, &w)| ComponentSpec::new(w, c.mean.clone(), c.covariance.clone()))
            .collect::<Result<Vec<_>>>()?;
        GmmSpec::new(components)
    }

    /// Single standard-normal component; the stationary system where the
    /// flow velocity vanishes identically.
    pub fn standard_normal(dim: usize) -> Self {
        let comp = ComponentSpec::new(1.0, DVector::zeros(dim), DMatrix::identity(dim, dim))
            .expect("identity covariance is SPD");
        GmmSpec { dim, components: vec![comp] }
    }

    /// Single zero-mean Gaussian with the given covariance.
    pub fn single_gaussian(covariance: DMatrix<f64>) -> Result<Self> {
        let dim = covariance.nrows();
        let comp = ComponentSpec::new(1.0, DVector::zeros(dim), covariance)?;
        GmmSpec::new(vec![comp])
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_components(&self) -> usize {
        self.components.len()
    }

    pub fn components(&self) -> &[ComponentSpec] {
        &self.components
    }

    /// Fills `scratch.lw` with `ln w_j + ln N_j(x)` and `scratch.pd[j]` with
    /// `P_j (x - mu_j)`; returns the max log term for the log-sum-exp.
    fn fill_component_terms(&self, x: &DVector<f64>, scratch: &mut GmmScratch) -> f64 {
        debug_assert_eq!(x.len(), self.dim);
        let mut max_lw = f64::NEG_INFINITY;
        for (j, comp) in self.components.iter().enumerate() {
            scratch.d.copy_from(x);
            scratch.d -= &comp.mean;
            comp.precision.mul_to(&scratch.d, &mut scratch.pd[j]);
            let q = scratch.pd[j].dot(&scratch.d);
            let lw = comp.log_weight + comp.log_norm - 0.5 * q;
            scratch.lw[j] = lw;
            if lw > max_lw {
                max_lw = lw;
            }
        }
        max_lw
    }

    /// `log p(x)` through a max-shifted log-sum-exp.
    pub fn log_density(&self, x: &DVector<f64>) -> f64 {
        let mut scratch = GmmScratch::for_gmm(self);
        self.log_density_with(x, &mut scratch)
    }

    /// Allocation-free variant of [`GmmSpec::log_density`].
    pub fn log_density_with(&self, x: &DVector<f64>, scratch: &mut GmmScratch) -> f64 {
        let max_lw = self.fill_component_terms(x, scratch);
        if max_lw == f64::NEG_INFINITY {
            return f64::NEG_INFINITY;
        }
        let sum: f64 = scratch.lw.iter().map(|&lw| (lw - max_lw).exp()).sum();
        max_lw + sum.ln()
    }

    /// Softmax responsibilities `r_j(x)`.
    pub fn responsibilities(&self, x: &DVector<f64>) -> Vec<f64> {
        let mut scratch = GmmScratch::for_gmm(self);
        let max_lw = self.fill_component_terms(x, &mut scratch);
        let mut r: Vec<f64> = scratch.lw.iter().map(|&lw| (lw - max_lw).exp()).collect();
        let sum: f64 = r.iter().sum();
        for v in r.iter_mut() {
            *v /= sum;
        }
        r
    }

    /// Score `grad log p(x)`.
    pub fn score(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.dim);
        let mut scratch = GmmScratch::for_gmm(self);
        self.score_into(x, &mut out, &mut scratch);
        out
    }

    /// Allocation-free score evaluation: `out = sum_j r_j (-P_j (x - mu_j))`.
    pub fn score_into(&self, x: &DVector<f64>, out: &mut DVector<f64>, scratch: &mut GmmScratch) {
        let max_lw = self.fill_component_terms(x, scratch);
        let mut total = 0.0;
        out.fill(0.0);
        for j in 0..self.components.len() {
            let rj = (scratch.lw[j] - max_lw).exp();
            total += rj;
            out.axpy(-rj, &scratch.pd[j], 1.0);
        }
        *out /= total;
    }

    /// Hessian of `log p` at `x` (the Jacobian of the score):
    /// `sum_j r_j (-P_j + s_j s_j^T) - s_bar s_bar^T`.
    pub fn score_jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let mut scratch = GmmScratch::for_gmm(self);
        let max_lw = self.fill_component_terms(x, &mut scratch);
        let mut r: Vec<f64> = scratch.lw.iter().map(|&lw| (lw - max_lw).exp()).collect();
        let total: f64 = r.iter().sum();
        for v in r.iter_mut() {
            *v /= total;
        }
        let mut h = DMatrix::zeros(self.dim, self.dim);
        let mut s_bar = DVector::zeros(self.dim);
        for (j, comp) in self.components.iter().enumerate() {
            let sj = -&scratch.pd[j];
            h += &comp.precision * (-r[j]);
            h.ger(r[j], &sj, &sj, 1.0);
            s_bar.axpy(r[j], &sj, 1.0);
        }
        h.ger(-1.0, &s_bar, &s_bar, 1.0);
        h
    }

    /// Hessian-vector product `out = H(x) w` without forming `H`:
    /// `sum_j r_j (-P_j w + s_j (s_j . w)) - s_bar (s_bar . w)`.
    pub fn score_hessian_vp_into(
        &self,
        x: &DVector<f64>,
        w: &DVector<f64>,
        out: &mut DVector<f64>,
        scratch: &mut GmmScratch,
    ) {
        let max_lw = self.fill_component_terms(x, scratch);
        let mut total = 0.0;
        for j in 0..self.components.len() {
            scratch.lw[j] = (scratch.lw[j] - max_lw).exp();
            total += scratch.lw[j];
        }
        out.fill(0.0);
        // aux accumulates s_bar = -sum_j r_j P_j (x - mu_j).
        let (sbar, pw_buf) = (&mut scratch.aux, &mut scratch.d);
        sbar.fill(0.0);
        for (j, comp) in self.components.iter().enumerate() {
            let rj = scratch.lw[j] / total;
            comp.precision.mul_to(w, pw_buf);
            let sj_dot_w = -scratch.pd[j].dot(w);
            out.axpy(-rj, pw_buf, 1.0);
            out.axpy(-rj * sj_dot_w, &scratch.pd[j], 1.0);
            sbar.axpy(-rj, &scratch.pd[j], 1.0);
        }
        let sbar_dot_w = sbar.dot(w);
        out.axpy(-sbar_dot_w, sbar, 1.0);
    }

    /// Index of the component with the largest responsibility at `x`.
    /// Ties resolve to the lower index.
    pub fn modal_assignment(&self, x: &DVector<f64>) -> usize {
        let mut scratch = GmmScratch::for_gmm(self);
        self.fill_component_terms(x, &mut scratch);
        let mut best = 0;
        for j in 1..scratch.lw.len() {
            if scratch.lw[j] > scratch.lw[best] {
                best = j;
            }
        }
        best
    }

    /// Exact sample: categorical component choice, then a Gaussian draw
    /// through the cached Cholesky factor. Returns the chosen component too.
    pub fn sample_component<R: Rng + ?Sized>(&self, rng: &mut R) -> (usize, DVector<f64>) {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut idx = self.components.len() - 1;
        for (j, comp) in self.components.iter().enumerate() {
            acc += comp.weight;
            if u < acc {
                idx = j;
                break;
            }
        }
        let comp = &self.components[idx];
        let xi = DVector::from_fn(self.dim, |_, _| rng.sample::<f64, _>(StandardNormal));
        (idx, &comp.mean + &comp.chol * xi)
    }

    /// Exact sample from the mixture.
    pub fn sample_direct<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        self.sample_component(rng).1
    }

    /// Mixture diffused by the forward process `x_t = alpha x_0 + sigma xi`:
    /// weights unchanged, means scaled by `alpha`, covariances mapped to
    /// `alpha^2 Sigma + sigma^2 I`. With `alpha = 1, sigma = 0` this
    /// reproduces the original mixture exactly.
    pub fn diffuse(&self, alpha: f64, sigma: f64) -> Result<GmmSpec> {
        if !alpha.is_finite() || !sigma.is_finite() || sigma < 0.0 {
            return Err(Error::invalid(format!("bad diffusion scale alpha={alpha} sigma={sigma}")));
        }
        let a2 = alpha * alpha;
        let s2 = sigma * sigma;
        let components = self
            .components
            .iter()
            .map(|c| {
                let mut cov = &c.covariance * a2;
                for i in 0..self.dim {
                    cov[(i, i)] += s2;
                }
                ComponentSpec::new(c.weight, &c.mean * alpha, cov)
            })
            .collect::<Result<Vec<_>>>()?;
        GmmSpec::new(components)
    }

    /// Serializes to structured text (`dim` plus one `[[component]]` table
    /// per component, covariance row-major). Floats are written with enough
    /// decimal digits that reloading reproduces every f64 bit-exactly.
    pub fn to_toml_string(&self) -> String {
        let raw = RawGmm {
            dim: self.dim,
            component: self
                .components
                .iter()
                .map(|c| RawComponent {
                    weight: c.weight,
                    mean: c.mean.iter().copied().collect(),
                    covariance: c.covariance.transpose().as_slice().to_vec(),
                })
                .collect(),
        };
        toml::to_string(&raw).expect("GmmSpec serialization cannot fail")
    }

    /// Parses and validates the format written by [`GmmSpec::to_toml_string`].
    pub fn from_toml_str(text: &str) -> Result<GmmSpec> {
        let raw: RawGmm =
            toml::from_str(text).map_err(|e| Error::config(format!("bad mixture file: {e}")))?;
        let components = raw
            .component
            .into_iter()
            .enumerate()
            .map(|(j, rc)| {
                if rc.mean.len() != raw.dim {
                    return Err(Error::config(format!(
                        "component {j}: mean has {} entries, expected {}",
                        rc.mean.len(),
                        raw.dim
                    )));
                }
                if rc.covariance.len() != raw.dim * raw.dim {
                    return Err(Error::config(format!(
                        "component {j}: covariance has {} entries, expected {}",
                        rc.covariance.len(),
                        raw.dim * raw.dim
                    )));
                }
                let mean = DVector::from_vec(rc.mean);
                let cov = DMatrix::from_row_slice(raw.dim, raw.dim, &rc.covariance);
                ComponentSpec::new(rc.weight, mean, cov)
            })
            .collect::<Result<Vec<_>>>()?;
        GmmSpec::new(components)
    }
}

#[derive(Serialize, Deserialize)]
struct RawGmm {
    dim: usize,
    component: Vec<RawComponent>,
}

#[derive(Serialize, Deserialize)]
struct RawComponent {
    weight: f64,
    mean: Vec<f64>,
    covariance: Vec<f64>,
}

/// Benchmark two-component mixture in `dim` dimensions.
///
/// Construction, with all draws taken from a ChaCha stream seeded by `seed`
/// in this fixed order:
///
/// 1. component-1 diagonal entries `0.01 + noise_std * |N(0,1)|`;
/// 2. component-2 diagonal entries, same law, fresh draws;
/// 3. a dim x dim standard-normal matrix, filled row-major, whose QR
///    factorization (signs fixed so R has positive diagonal) provides the
///    rotation `Q` conjugating component 2: `Sigma_2 = Q D Q^T`.
///
/// Means are `-2 e_0` and `+2 e_0`; weights are `0.25` and `0.75`. Same
/// `(dim, seed, noise_std)` always yields the bit-identical mixture.
pub fn benchmark_gmm_with_noise(dim: usize, seed: u64, noise_std: f64) -> Result<GmmSpec> {
    if dim == 0 {
        return Err(Error::invalid("benchmark mixture needs dim >= 1"));
    }
    if !(noise_std >= 0.0) || !noise_std.is_finite() {
        return Err(Error::invalid(format!("noise_std {noise_std} must be nonnegative")));
    }
    let mut rng = crate::seed::rng_from(seed);
    let draw_diag = |rng: &mut rand_chacha::ChaCha8Rng| {
        DVector::from_fn(dim, |_, _| {
            0.01 + noise_std * rng.sample::<f64, _>(StandardNormal).abs()
        })
    };
    let d1 = draw_diag(&mut rng);
    let d2 = draw_diag(&mut rng);
    let mut g = DMatrix::zeros(dim, dim);
    for r in 0..dim {
        for c in 0..dim {
            g[(r, c)] = rng.sample::<f64, _>(StandardNormal);
        }
    }
    let qr = g.qr();
    let r = qr.r();
    let mut q = qr.q();
    // Fix the QR sign ambiguity: flip columns of Q so diag(R) > 0.
    for j in 0..dim {
        if r[(j, j)] < 0.0 {
            for i in 0..dim {
                q[(i, j)] = -q[(i, j)];
            }
        }
    }
    let cov1 = DMatrix::from_diagonal(&d1);
    let mut cov2 = &q * DMatrix::from_diagonal(&d2) * q.transpose();
    // Symmetrize away factorization roundoff before the SPD check.
    for rr in 0..dim {
        for cc in 0..rr {
            let avg = 0.5 * (cov2[(rr, cc)] + cov2[(cc, rr)]);
            cov2[(rr, cc)] = avg;
            cov2[(cc, rr)] = avg;
        }
    }
    let mut mean1 = DVector::zeros(dim);
    mean1[0] = -2.0;
    let mut mean2 = DVector::zeros(dim);
    mean2[0] = 2.0;
    GmmSpec::new(vec![
        ComponentSpec::new(0.25, mean1, cov1)?,
        ComponentSpec::new(0.75, mean2, cov2)?,
    ])
}

/// [`benchmark_gmm_with_noise`] at the default diagonal noise scale 0.5
/// (entries `0.01 + |N(0, 0.25)|`).
pub fn benchmark_gmm(dim: usize, seed: u64) -> Result<GmmSpec> {
    benchmark_gmm_with_noise(dim, seed, 0.5)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_normal_log_density_at_origin() {
        // -(D/2) ln(2 pi) with D = 2.
        let gmm = GmmSpec::standard_normal(2);
        let x = DVector::zeros(2);
        let expected = -LN_2PI;
        assert!(
            (gmm.log_density(&x) - expected).abs() < 1e-15,
            "expected {expected}, got {}",
            gmm.log_density(&x)
        );
    }

    #[test]
    fn log_density_far_from_all_components_stays_finite() {
        let gmm = benchmark_gmm(3, 11).unwrap();
        let x = DVector::from_element(3, 1e3);
        let ld = gmm.log_density(&x);
        assert!(ld.is_finite() && ld < -1e5, "far-field log density {ld} should be hugely negative");
        let s = gmm.score(&x);
        assert!(s.iter().all(|v| v.is_finite()), "score must stay finite far out");
    }

    #[test]
    fn responsibilities_sum_to_one_even_far_out() {
        let gmm = benchmark_gmm(4, 3).unwrap();
        let x = DVector::from_element(4, -800.0);
        let r = gmm.responsibilities(&x);
        let total: f64 = r.iter().sum();
        assert!((total - 1.0).abs() < 1e-12, "responsibilities sum {total}");
    }

    #[test]
    fn modal_assignment_matches_sign_on_separated_points() {
        let gmm = benchmark_gmm(5, 17).unwrap();
        let mut x = DVector::zeros(5);
        x[0] = -2.5;
        assert_eq!(gmm.modal_assignment(&x), 0);
        x[0] = 2.5;
        assert_eq!(gmm.modal_assignment(&x), 1);
    }

    #[test]
    fn benchmark_is_deterministic_and_rotation_is_orthogonal() {
        let a = benchmark_gmm(6, 1234).unwrap();
        let b = benchmark_gmm(6, 1234).unwrap();
        assert_eq!(a, b, "same (dim, seed) must give the bit-identical mixture");
        assert_ne!(a, benchmark_gmm(6, 1235).unwrap());

        // Component 2's covariance must have the same spectrum as its
        // generating diagonal: conjugation by Q preserves eigenvalues, and
        // all of them sit at or above the 0.01 floor.
        let eig = a.components()[1].covariance.clone().symmetric_eigen();
        for ev in eig.eigenvalues.iter() {
            assert!(*ev >= 0.0099, "eigenvalue {ev} below the 0.01 jitter floor");
        }
        // Component 1 stays axis-aligned.
        let c1 = &a.components()[0].covariance;
        for r in 0..6 {
            for c in 0..6 {
                if r != c {
                    assert_eq!(c1[(r, c)], 0.0);
                }
            }
        }
    }

    #[test]
    fn component_frequencies_match_weights() {
        let gmm = benchmark_gmm(3, 5).unwrap();
        let mut rng = crate::seed::rng_from(99);
        let n = 100_000;
        let mut count0 = 0usize;
        for _ in 0..n {
            if gmm.sample_component(&mut rng).0 == 0 {
                count0 += 1;
            }
        }
        let freq = count0 as f64 / n as f64;
        let se = (0.25 * 0.75 / n as f64).sqrt();
        assert!(
            (freq - 0.25).abs() < 3.0 * se,
            "component-0 frequency {freq} not within 3 SE ({se:.5}) of 0.25"
        );
    }

    #[test]
    fn diffuse_identity_is_exact() {
        let gmm = benchmark_gmm(4, 21).unwrap();
        let same = gmm.diffuse(1.0, 0.0).unwrap();
        assert_eq!(gmm, same, "alpha=1, sigma=0 must reproduce the mixture exactly");
    }

    #[test]
    fn toml_roundtrip_is_bit_exact() {
        let gmm = benchmark_gmm(5, 2024).unwrap();
        let text = gmm.to_toml_string();
        let back = GmmSpec::from_toml_str(&text).unwrap();
        assert_eq!(gmm, back, "decimal serialization must round-trip bit-exactly");
        // And through a second generation to catch formatting instability.
        assert_eq!(text, back.to_toml_string());
    }

    #[test]
    fn with_weights_keeps_components_and_replaces_weights() {
        let gmm = benchmark_gmm(4, 9).unwrap();
        let flat = gmm.with_weights(&[0.5, 0.5]).unwrap();
        assert_eq!(flat.components()[0].weight, 0.5);
        assert_eq!(flat.components()[1].weight, 0.5);
        assert_eq!(flat.components()[0].mean, gmm.components()[0].mean);
        assert_eq!(flat.components()[1].covariance, gmm.components()[1].covariance);
        assert!(gmm.with_weights(&[0.3, 0.3]).is_err(), "weights must sum to 1");
        assert!(gmm.with_weights(&[1.0]).is_err(), "weight count must match");
    }

    #[test]
    fn rejects_bad_inputs() {
        let id = DMatrix::identity(2, 2);
        assert!(ComponentSpec::new(0.0, DVector::zeros(2), id.clone()).is_err());
        assert!(ComponentSpec::new(1.0, DVector::zeros(3), id.clone()).is_err());
        let neg = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -1.0]));
        assert!(matches!(
            ComponentSpec::new(1.0, DVector::zeros(2), neg),
            Err(Error::NotPositiveDefinite(_))
        ));
        let c1 = ComponentSpec::new(0.6, DVector::zeros(2), id.clone()).unwrap();
        let c2 = ComponentSpec::new(0.6, DVector::zeros(2), id).unwrap();
        assert!(GmmSpec::new(vec![c1, c2]).is_err(), "weights summing to 1.2 must be rejected");
    }

    #[test]
    fn hessian_vp_matches_full_jacobian() {
        let gmm = benchmark_gmm(6, 77).unwrap();
        let mut rng = crate::seed::rng_from(4);
        for _ in 0..10 {
            let x = DVector::from_fn(6, |_, _| rng.sample::<f64, _>(StandardNormal) * 2.0);
            let w = DVector::from_fn(6, |_, _| rng.sample::<f64, _>(StandardNormal));
            let full = gmm.score_jacobian(&x) * &w;
            let mut hvp = DVector::zeros(6);
            let mut scratch = GmmScratch::for_gmm(&gmm);
            gmm.score_hessian_vp_into(&x, &w, &mut hvp, &mut scratch);
            let err = (&full - &hvp).norm() / full.norm().max(1e-300);
            assert!(err < 1e-12, "H*w disagrees with matrix-free product: rel err {err}");
        }
    }
}
