//! Purification-risk lower bound: a gradient-norm term minus the KL
//! divergence between adversarial and benign likelihood-score populations.

use std::io::Write;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffprior::{elbo_score, Denoiser};
use crate::error::{Error, Result};
use crate::rng::{derive_index, rng};
use crate::tensor::{cosine, Scalar, Tape, Tensor, Var};

pub const DEFAULT_BINS: usize = 64;
/// Minimum population size accepted by [`kl_histogram`].
pub const MIN_SCORES: usize = 64;
const LO_PCT: f64 = 0.001;
const HI_PCT: f64 = 0.999;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Estimator {
    #[serde(rename = "pixel-elbo")]
    PixelElbo,
    #[serde(rename = "latent-diff-elbo")]
    LatentDiffElbo,
    #[serde(rename = "latent-cos")]
    LatentCos,
}

impl Estimator {
    pub fn tag(self) -> &'static str {
        match self {
            Estimator::PixelElbo => "pixel-elbo",
            Estimator::LatentDiffElbo => "latent-diff-elbo",
            Estimator::LatentCos => "latent-cos",
        }
    }
}

impl std::fmt::Display for Estimator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.tag())
    }
}

impl std::str::FromStr for Estimator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pixel-elbo" => Ok(Estimator::PixelElbo),
            "latent-diff-elbo" => Ok(Estimator::LatentDiffElbo),
            "latent-cos" => Ok(Estimator::LatentCos),
            other => Err(Error::config(format!("unknown estimator `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Cohort {
    Ben,
    Adv,
}

/// A population of log-likelihood proxy scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreSet {
    pub label: Cohort,
    pub estimator: Estimator,
    scores: Vec<f64>,
}

impl ScoreSet {
    pub fn new(label: Cohort, estimator: Estimator, scores: Vec<f64>) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::Empty("score set"));
        }
        if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
            return Err(Error::numerical(format!("{estimator} scores"), format!("score {i} is not finite")));
        }
        Ok(Self {
            label,
            estimator,
            scores,
        })
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn mean(&self) -> f64 {
        self.scores.iter().sum::<f64>() / self.scores.len() as f64
    }

    /// Resampled copy with the given indices.
    pub fn select(&self, idx: &[usize]) -> ScoreSet {
        ScoreSet {
            label: self.label,
            estimator: self.estimator,
            scores: idx.iter().map(|&i| self.scores[i]).collect(),
        }
    }
}

/// Empirical quantile with linear interpolation between order statistics.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Shared bin counts of two populations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// `bins + 1` edges
    pub edges: Vec<f64>,
    pub adv: Vec<usize>,
    pub ben: Vec<usize>,
}

impl Histogram {
    /// Edges span the pooled 0.1–99.9 percentiles; values outside land in
    /// the end bins.
    pub fn build(adv: &[f64], ben: &[f64], bins: usize) -> Result<Self> {
        if bins == 0 {
            return Err(Error::invalid("histogram needs at least one bin"));
        }
        if adv.is_empty() || ben.is_empty() {
            return Err(Error::Empty("histogram population"));
        }
        let mut pooled: Vec<f64> = adv.iter().chain(ben).copied().collect();
        pooled.sort_by(f64::total_cmp);
        let (lo, mut hi) = (quantile(&pooled, LO_PCT), quantile(&pooled, HI_PCT));
        if hi <= lo {
            hi = lo + 1.0;
        }
        let width = (hi - lo) / bins as f64;
        let edges: Vec<f64> = (0..=bins).map(|b| lo + width * b as f64).collect();
        let count = |xs: &[f64]| {
            let mut c = vec![0; bins];
            for &x in xs {
                let b = ((x - lo) / width).floor();
                c[(b.max(0.0) as usize).min(bins - 1)] += 1;
            }
            c
        };
        Ok(Self {
            edges,
            adv: count(adv),
            ben: count(ben),
        })
    }

    pub fn bins(&self) -> usize {
        self.adv.len()
    }

    /// `Σ_b p_adv(b) log(p_adv(b)/p_ben(b))` with `p(b) = (c_b + 1)/(n + B)`.
    pub fn kl(&self) -> f64 {
        let nb = self.bins() as f64;
        let na: usize = self.adv.iter().sum();
        let nn: usize = self.ben.iter().sum();
        let kl: f64 = self
            .adv
            .iter()
            .zip(&self.ben)
            .map(|(&a, &b)| {
                let pa = (a as f64 + 1.0) / (na as f64 + nb);
                let pb = (b as f64 + 1.0) / (nn as f64 + nb);
                pa * (pa / pb).ln()
            })
            .sum();
        kl.max(0.0)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "bin,lo,hi,adv_count,ben_count")?;
        for b in 0..self.bins() {
            writeln!(
                w,
                "{b},{:.9e},{:.9e},{},{}",
                self.edges[b],
                self.edges[b + 1],
                self.adv[b],
                self.ben[b]
            )?;
        }
        Ok(())
    }
}

/// Histogram estimate of `KL(p_adv ‖ p_ben)`.
pub fn kl_histogram(adv: &ScoreSet, ben: &ScoreSet, bins: usize) -> Result<f64> {
    if adv.estimator != ben.estimator {
        return Err(Error::invalid(format!(
            "comparing {} scores against {} scores",
            adv.estimator, ben.estimator
        )));
    }
    kl_histogram_raw(adv.scores(), ben.scores(), bins)
}

/// [`kl_histogram`] on bare score slices.
pub fn kl_histogram_raw(adv: &[f64], ben: &[f64], bins: usize) -> Result<f64> {
    if adv.len() < MIN_SCORES || ben.len() < MIN_SCORES {
        return Err(Error::invalid(format!(
            "histogram KL needs {MIN_SCORES} scores per population, got {} and {}",
            adv.len(),
            ben.len()
        )));
    }
    Ok(Histogram::build(adv, ben, bins)?.kl())
}

fn check_sigma_dt(sigma: f64, dt: f64) -> Result<()> {
    if !(sigma >= 0.0 && sigma.is_finite()) || !(dt >= 0.0 && dt.is_finite()) {
        return Err(Error::invalid(format!("sigma {sigma} and dt {dt} must be finite and >= 0")));
    }
    Ok(())
}

/// Mean of `½‖∇score(x)‖² σ² Δt` over the rows of `samples`.
///
/// `score_fn` maps an `m × d` block and the block's row indices to `m × 1`
/// per-row scores; rows must not interact.
pub fn grad_norm_term<F>(samples: &Tensor<f64>, score_fn: F, sigma: f64, dt: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape<f64>, Var<'t, f64>, &[usize]) -> Result<Var<'t, f64>> + Sync,
{
    check_sigma_dt(sigma, dt)?;
    let m = samples.rows();
    if m == 0 {
        return Err(Error::Empty("gradient-norm samples"));
    }
    let chunk = 64;
    let starts: Vec<usize> = (0..m).step_by(chunk).collect();
    let sums = starts
        .par_iter()
        .map(|&s| {
            let idx: Vec<usize> = (s..(s + chunk).min(m)).collect();
            let tape = Tape::new();
            let x = tape.leaf(samples.select_rows(&idx));
            let out = score_fn(&tape, x, &idx)?;
            let g = tape
                .gradients(out.sum()?, &[x])?
                .pop()
                .flatten()
                .unwrap_or_else(|| Tensor::zeros(&x.shape()));
            if !g.all_finite() {
                return Err(Error::numerical("grad_norm_term", "non-finite gradient"));
            }
            Ok((0..g.rows())
                .map(|i| g.row_slice(i).iter().map(|v| v * v).sum::<f64>())
                .sum::<f64>())
        })
        .collect::<Result<Vec<f64>>>()?;
    let mean_sq = sums.iter().sum::<f64>() / m as f64;
    Ok(0.5 * mean_sq * sigma * sigma * dt)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RiskReport {
    pub estimator: Estimator,
    pub grad_norm_term: f64,
    pub kl_term: f64,
    pub lower_bound: f64,
    pub sigma: f64,
    pub dt: f64,
    pub n_adv: usize,
    pub n_ben: usize,
}

impl RiskReport {
    pub const CSV_HEADER: &'static str = "estimator,grad_norm_term,kl_term,lower_bound,sigma,dt,n_adv,n_ben";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.9e},{:.9e},{:.9e},{},{:.9e},{},{}",
            self.estimator,
            self.grad_norm_term,
            self.kl_term,
            self.lower_bound,
            self.sigma,
            self.dt,
            self.n_adv,
            self.n_ben
        )
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

pub fn write_reports_csv<W: Write>(mut w: W, reports: &[RiskReport]) -> Result<()> {
    writeln!(w, "{}", RiskReport::CSV_HEADER)?;
    for r in reports {
        writeln!(w, "{}", r.csv_row())?;
    }
    Ok(())
}

/// Combines a precomputed gradient-norm term with the histogram KL.
pub fn risk_report(
    adv: &ScoreSet,
    ben: &ScoreSet,
    grad_norm_term: f64,
    sigma: f64,
    dt: f64,
    bins: usize,
) -> Result<RiskReport> {
    check_sigma_dt(sigma, dt)?;
    if adv.label != Cohort::Adv || ben.label != Cohort::Ben {
        return Err(Error::invalid("risk report expects (adv, ben) score sets"));
    }
    let kl_term = kl_histogram(adv, ben, bins)?;
    Ok(RiskReport {
        estimator: adv.estimator,
        grad_norm_term,
        kl_term,
        lower_bound: grad_norm_term - kl_term,
        sigma,
        dt,
        n_adv: adv.len(),
        n_ben: ben.len(),
    })
}

/// Cosine of every row of `z` to the blank embedding.
pub fn cos_scores<T: Scalar>(z: &Tensor<T>, blank: &[T], label: Cohort) -> Result<ScoreSet> {
    let scores = (0..z.rows())
        .map(|i| cosine(z.row_slice(i), blank).map(Scalar::f64))
        .collect::<Result<Vec<f64>>>()?;
    ScoreSet::new(label, Estimator::LatentCos, scores)
}

/// Mean ELBO proxy of every row; row `i` uses the draw stream of `ids[i]`.
pub fn elbo_scores<T, D>(
    den: &D,
    data: &Tensor<T>,
    ids: &[usize],
    t_range: (usize, usize),
    n_samples: usize,
    seed: u64,
    label: Cohort,
    estimator: Estimator,
) -> Result<ScoreSet>
where
    T: Scalar,
    D: Denoiser<T> + Sync + ?Sized,
{
    if ids.len() != data.rows() {
        return Err(Error::invalid(format!("{} ids for {} rows", ids.len(), data.rows())));
    }
    let scores = (0..data.rows())
        .into_par_iter()
        .map(|i| elbo_score(den, data.row_slice(i), t_range, n_samples, derive_index(seed, ids[i] as u64)))
        .collect::<Result<Vec<f64>>>()?;
    ScoreSet::new(label, estimator, scores)
}

/// Paired bootstrap of `KL(hi) − KL(lo)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BootstrapOrdering {
    pub kl_hi: f64,
    pub kl_lo: f64,
    pub diffs: Vec<f64>,
    /// 5% empirical quantile of the resampled differences
    pub lower_quantile: f64,
    pub confident: bool,
}

/// Resamples the adversarial and benign populations with replacement
/// (the same indices for both estimators) and checks that the 5% quantile
/// of `KL(hi) − KL(lo)` is positive.
pub fn bootstrap_ordering(
    hi: (&ScoreSet, &ScoreSet),
    lo: (&ScoreSet, &ScoreSet),
    bins: usize,
    resamples: usize,
    seed: u64,
) -> Result<BootstrapOrdering> {
    if resamples == 0 {
        return Err(Error::invalid("bootstrap needs at least one resample"));
    }
    let (na, nb) = (hi.0.len(), hi.1.len());
    if lo.0.len() != na || lo.1.len() != nb {
        return Err(Error::invalid("bootstrap corpora are not matched"));
    }
    let kl_hi = kl_histogram(hi.0, hi.1, bins)?;
    let kl_lo = kl_histogram(lo.0, lo.1, bins)?;
    let mut diffs = Vec::with_capacity(resamples);
    for r in 0..resamples {
        let mut g = rng(derive_index(seed, r as u64));
        let ia: Vec<usize> = (0..na).map(|_| g.random_range(0..na)).collect();
        let ib: Vec<usize> = (0..nb).map(|_| g.random_range(0..nb)).collect();
        let h = kl_histogram(&hi.0.select(&ia), &hi.1.select(&ib), bins)?;
        let l = kl_histogram(&lo.0.select(&ia), &lo.1.select(&ib), bins)?;
        diffs.push(h - l);
    }
    let mut sorted = diffs.clone();
    sorted.sort_by(f64::total_cmp);
    let lower_quantile = quantile(&sorted, 0.05);
    Ok(BootstrapOrdering {
        kl_hi,
        kl_lo,
        diffs,
        lower_quantile,
        confident: lower_quantile > 0.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::gaussian_vec;

    fn normal(n: usize, mu: f64, sd: f64, seed: u64) -> Vec<f64> {
        gaussian_vec::<f64, _>(&mut rng(seed), n)
            .into_iter()
            .map(|v| mu + sd * v)
            .collect()
    }

    fn set(label: Cohort, v: Vec<f64>) -> ScoreSet {
        ScoreSet::new(label, Estimator::LatentCos, v).unwrap()
    }

    #[test]
    fn identical_sets_near_zero() {
        let a = normal(2000, 0.0, 1.0, 1);
        let kl = kl_histogram_raw(&a, &a, 64).unwrap();
        assert!(kl.abs() < 0.01, "{kl}");
    }

    #[test]
    fn small_sets_rejected() {
        let a = normal(63, 0.0, 1.0, 1);
        assert!(kl_histogram_raw(&a, &normal(100, 0.0, 1.0, 2), 64).is_err());
        assert!(ScoreSet::new(Cohort::Adv, Estimator::LatentCos, vec![]).is_err());
        assert!(ScoreSet::new(Cohort::Adv, Estimator::LatentCos, vec![f64::NAN]).is_err());
    }

    #[test]
    fn mismatched_estimators_rejected() {
        let a = set(Cohort::Adv, normal(100, 0.0, 1.0, 1));
        let b = ScoreSet::new(Cohort::Ben, Estimator::PixelElbo, normal(100, 0.0, 1.0, 2)).unwrap();
        assert!(kl_histogram(&a, &b, 64).is_err());
    }

    #[test]
    fn out_of_range_values_clamped() {
        let ben: Vec<f64> = (0..1000).map(|i| i as f64 / 999.0).collect();
        let h = Histogram::build(&[-1e9, 0.6, 1e9], &ben, 4).unwrap();
        assert_eq!(h.adv, vec![1, 0, 1, 1]);
        assert_eq!(h.ben.iter().sum::<usize>(), 1000);
    }

    #[test]
    fn constant_score_has_zero_grad_term() {
        let x = Tensor::new(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let g = grad_norm_term(&x, |t, _, _| Ok(t.constant(Tensor::zeros(&[3, 1]))), 1.0, 1.0).unwrap();
        assert_eq!(g, 0.0);
    }

    #[test]
    fn quadratic_score_by_hand() {
        let x = Tensor::new(vec![1, 2], vec![2.0, 0.0]).unwrap();
        let g = grad_norm_term(&x, |_, v, _| v.sq_norm_rows()?.scale(-0.5), 1.0, 1.0).unwrap();
        assert!((g - 2.0).abs() < 1e-12);
        let z = grad_norm_term(&x, |_, v, _| v.sq_norm_rows()?.scale(-0.5), 0.0, 1.0).unwrap();
        assert_eq!(z, 0.0);
    }

    #[test]
    fn report_assembly() {
        let a = set(Cohort::Adv, normal(500, 0.0, 1.0, 1));
        let b = set(Cohort::Ben, normal(500, 0.0, 1.0, 1));
        let r = risk_report(&a, &b, 0.3, 1.0, 0.01, 64).unwrap();
        assert!(r.kl_term < 0.01);
        assert!((r.lower_bound - (0.3 - r.kl_term)).abs() < 1e-15);
        assert!(risk_report(&b, &a, 0.3, 1.0, 0.01, 64).is_err());
        let json = r.to_json().unwrap();
        assert!(json.contains("\"latent-cos\""));
        assert_eq!(r.csv_row().split(',').count(), RiskReport::CSV_HEADER.split(',').count());
    }

    #[test]
    fn bootstrap_detects_clear_ordering() {
        let wide = (set(Cohort::Adv, normal(512, 2.0, 1.0, 1)), set(Cohort::Ben, normal(512, 0.0, 1.0, 2)));
        let narrow = (set(Cohort::Adv, normal(512, 0.1, 1.0, 3)), set(Cohort::Ben, normal(512, 0.0, 1.0, 4)));
        let b = bootstrap_ordering((&wide.0, &wide.1), (&narrow.0, &narrow.1), 64, 10, 7).unwrap();
        assert_eq!(b.diffs.len(), 10);
        assert!(b.confident, "{b:?}");
        let rev = bootstrap_ordering((&narrow.0, &narrow.1), (&wide.0, &wide.1), 64, 10, 7).unwrap();
        assert!(!rev.confident);
    }
}
