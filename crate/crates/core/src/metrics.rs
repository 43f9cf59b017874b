//! Ensemble metrics: modal occupancy, fixed-bin histograms of the reaction
//! coordinate and of sample energies, and the total-variation gate against a
//! direct-sample reference.

use nalgebra::DVector;
use rand::Rng;

use crate::error::Error;
use crate::gmm::GmmSpec;
use crate::smc::{distinct_ancestors, normalized_weights, Particle};
use crate::Result;

/// Reaction-coordinate histogram defaults: coordinate 0 on [-4, 4].
pub const RC_BINS: usize = 60;
pub const RC_RANGE: (f64, f64) = (-4.0, 4.0);
/// Energy histograms: 50 bins over the pooled 1st-99th percentile range.
pub const ENERGY_BINS: usize = 50;

/// A weighted histogram on uniform bins. Out-of-range mass is clamped into
/// the end bins so the masses always total the input weight.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub mass: Vec<f64>,
}

impl Histogram {
    /// Bins `values` with the given weights. Weights need not be normalized;
    /// masses carry whatever total they have.
    pub fn weighted(values: &[f64], weights: &[f64], lo: f64, hi: f64, bins: usize) -> Result<Self> {
        if bins == 0 || !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::invalid(format!("bad histogram range [{lo}, {hi}] x {bins}")));
        }
        if values.len() != weights.len() {
            return Err(Error::invalid("histogram values and weights must align"));
        }
        let mut mass = vec![0.0; bins];
        let width = (hi - lo) / bins as f64;
        for (&v, &w) in values.iter().zip(weights) {
            if !v.is_finite() {
                return Err(Error::numerical(format!("non-finite histogram value {v}")));
            }
            let idx = (((v - lo) / width).floor() as i64).clamp(0, bins as i64 - 1) as usize;
            mass[idx] += w;
        }
        Ok(Histogram { lo, hi, mass })
    }

    pub fn bins(&self) -> usize {
        self.mass.len()
    }

    /// Bin edges, `bins + 1` of them.
    pub fn edges(&self) -> Vec<f64> {
        let width = (self.hi - self.lo) / self.bins() as f64;
        (0..=self.bins()).map(|i| self.lo + i as f64 * width).collect()
    }

    pub fn total(&self) -> f64 {
        self.mass.iter().sum()
    }

    fn normalized_mass(&self) -> Vec<f64> {
        let t = self.total();
        self.mass.iter().map(|m| m / t).collect()
    }
}

/// Total-variation distance between two histograms on identical bins, after
/// normalizing each to unit mass. Always in [0, 1].
pub fn tv_distance(a: &Histogram, b: &Histogram) -> Result<f64> {
    if a.bins() != b.bins() || a.lo != b.lo || a.hi != b.hi {
        return Err(Error::invalid("TV distance needs identical binning"));
    }
    if !(a.total() > 0.0) || !(b.total() > 0.0) {
        return Err(Error::invalid("TV distance needs nonempty histograms"));
    }
    let pa = a.normalized_mass();
    let pb = b.normalized_mass();
    Ok(0.5 * pa.iter().zip(&pb).map(|(x, y)| (x - y).abs()).sum::<f64>())
}

/// Nearest-rank percentile (p in [0, 100]) of unsorted data.
pub fn percentile(values: &[f64], p: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::invalid("percentile of empty data"));
    }
    if !(0.0..=100.0).contains(&p) {
        return Err(Error::invalid(format!("percentile {p} out of [0, 100]")));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    let n = sorted.len();
    let rank = ((p / 100.0 * n as f64).ceil() as usize).clamp(1, n);
    Ok(sorted[rank - 1])
}

/// Weighted fraction of the ensemble modally assigned to each mixture
/// component. Fractions sum to 1 (the weights are normalized).
pub fn modal_weights(gmm: &GmmSpec, particles: &[Particle]) -> Vec<f64> {
    let weights = normalized_weights(particles);
    let mut out = vec![0.0; gmm.n_components()];
    for (p, w) in particles.iter().zip(weights) {
        out[gmm.modal_assignment(&p.x)] += w;
    }
    out
}

/// Unweighted modal fractions of direct samples, the reference for the
/// stationary smoke check.
pub fn modal_fractions_direct(gmm: &GmmSpec, samples: &[DVector<f64>]) -> Vec<f64> {
    let mut out = vec![0.0; gmm.n_components()];
    for x in samples {
        out[gmm.modal_assignment(x)] += 1.0;
    }
    for v in out.iter_mut() {
        *v /= samples.len() as f64;
    }
    out
}

/// Reaction-coordinate histogram: coordinate 0 of `x`, weighted, on the
/// fixed default bins.
pub fn rc_histogram(particles: &[Particle]) -> Result<Histogram> {
    let values: Vec<f64> = particles.iter().map(|p| p.x[0]).collect();
    let weights = normalized_weights(particles);
    Histogram::weighted(&values, &weights, RC_RANGE.0, RC_RANGE.1, RC_BINS)
}

/// Energy histograms of the weighted ensemble against a direct-sample
/// reference, both on bins spanning the pooled 1st-99th percentile range,
/// plus their total-variation distance.
pub fn energy_comparison(
    target: &GmmSpec,
    particles: &[Particle],
    reference: &[DVector<f64>],
) -> Result<(Histogram, Histogram, f64)> {
    if reference.is_empty() {
        return Err(Error::invalid("energy comparison needs reference samples"));
    }
    let ens: Vec<f64> = particles.iter().map(|p| p.work.u_x).collect();
    let refe: Vec<f64> = reference.iter().map(|x| -target.log_density(x)).collect();
    let pooled: Vec<f64> = ens.iter().chain(&refe).copied().collect();
    let mut lo = percentile(&pooled, 1.0)?;
    let mut hi = percentile(&pooled, 99.0)?;
    if !(hi > lo) {
        lo -= 0.5;
        hi += 0.5;
    }
    let weights = normalized_weights(particles);
    let ref_w = vec![1.0 / refe.len() as f64; refe.len()];
    let h_ens = Histogram::weighted(&ens, &weights, lo, hi, ENERGY_BINS)?;
    let h_ref = Histogram::weighted(&refe, &ref_w, lo, hi, ENERGY_BINS)?;
    let tv = tv_distance(&h_ens, &h_ref)?;
    Ok((h_ens, h_ref, tv))
}

/// Direct target samples for reference histograms.
pub fn reference_samples<R: Rng + ?Sized>(
    gmm: &GmmSpec,
    count: usize,
    rng: &mut R,
) -> Vec<DVector<f64>> {
    (0..count).map(|_| gmm.sample_direct(rng)).collect()
}

/// Everything one run reports.
#[derive(Debug, Clone)]
pub struct MetricsReport {
    pub modal: Vec<f64>,
    pub rc_hist: Histogram,
    pub energy_hist: Histogram,
    pub energy_ref_hist: Histogram,
    pub energy_tv: f64,
    pub distinct_ancestors: usize,
    pub total_passes: u64,
    pub wall_s: f64,
}

impl MetricsReport {
    pub fn compute(
        target: &GmmSpec,
        particles: &[Particle],
        reference: &[DVector<f64>],
        total_passes: u64,
        wall_s: f64,
    ) -> Result<Self> {
        let (energy_hist, energy_ref_hist, energy_tv) =
            energy_comparison(target, particles, reference)?;
        Ok(MetricsReport {
            modal: modal_weights(target, particles),
            rc_hist: rc_histogram(particles)?,
            energy_hist,
            energy_ref_hist,
            energy_tv,
            distinct_ancestors: distinct_ancestors(particles),
            total_passes,
            wall_s,
        })
    }
}
