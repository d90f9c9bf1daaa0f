//! Likelihood-ascent purification of image embeddings on the unit sphere.
//!
//! An embedding is split into a direction `u` and a magnitude `r`; only the
//! direction moves. Each step differentiates the log-likelihood proxy of
//! `z = r·u` with respect to `u`, takes a step of size `η` and renormalizes.
//! The magnitude is frozen at its initial value and reapplied at the end.

use serde::{Deserialize, Serialize};

use crate::diffprior::{elbo_var, Denoiser, DiffPrior, Draw};
use crate::error::{Error, Result};
use crate::rng::derive_index;
use crate::tensor::{cosine, l2_norm, Scalar, Tape, Tensor, Var, NORM_EPS};
use crate::zeroshot::{argmax, ClassBank, Preprocess};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Cos,
    Diff,
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cos" => Ok(Variant::Cos),
            "diff" => Ok(Variant::Diff),
            other => Err(Error::config(format!("unknown purifier variant `{other}`"))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::Cos => "cos",
            Variant::Diff => "diff",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PurifyConfig {
    pub variant: Variant,
    pub steps: usize,
    pub eta: f64,
    /// inclusive timestep range for the diffusion variant
    pub t_lo: usize,
    pub t_hi: usize,
    pub guidance_w: f64,
    /// first guided step (0-based)
    pub guidance_start: usize,
    /// temperature of the guidance classifier
    pub tau: f64,
    pub seed: u64,
    /// `u = z/‖z‖²`, `r = ‖z‖²`, no renormalization, `r` recomputed each step
    pub literal_polar: bool,
}

impl Default for PurifyConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Cos,
            steps: 10,
            eta: 30.0,
            t_lo: 90,
            t_hi: 100,
            guidance_w: 0.0,
            guidance_start: 5,
            tau: 0.07,
            seed: 0,
            literal_polar: false,
        }
    }
}

impl PurifyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta >= 0.0) || !self.eta.is_finite() {
            return Err(Error::config(format!("step size {} must be non-negative", self.eta)));
        }
        if !(self.guidance_w >= 0.0) {
            return Err(Error::config(format!("guidance weight {} must be >= 0", self.guidance_w)));
        }
        if self.t_lo > self.t_hi {
            return Err(Error::config(format!("t_lo {} > t_hi {}", self.t_lo, self.t_hi)));
        }
        if !(self.tau > 0.0) {
            return Err(Error::config("guidance temperature must be positive"));
        }
        Ok(())
    }

    fn guided(&self, step: usize) -> bool {
        self.guidance_w > 0.0 && step >= self.guidance_start
    }
}

/// Direction and magnitude of an embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct PolarEmbedding<T> {
    pub u: Vec<T>,
    pub r: T,
}

impl<T: Scalar> PolarEmbedding<T> {
    pub fn to_embedding(&self) -> Vec<T> {
        self.u.iter().map(|&v| v * self.r).collect()
    }
}

/// `u = z/‖z‖₂`, `r = ‖z‖₂`.
pub fn to_polar<T: Scalar>(z: &[T]) -> Result<PolarEmbedding<T>> {
    let r = l2_norm(z);
    if r.f64() < NORM_EPS {
        return Err(Error::DegenerateNorm {
            op: "to_polar",
            norm: r.f64(),
        });
    }
    Ok(PolarEmbedding {
        u: z.iter().map(|&v| v / r).collect(),
        r,
    })
}

/// Cosine log-likelihood proxy.
pub fn loglik_cos<T: Scalar>(z: &[T], blank: &[T]) -> Result<T> {
    cosine(z, blank)
}

/// Single-draw diffusion ELBO proxy at timestep `t` with noise from `seed`.
pub fn loglik_diff<T: Scalar>(z: &[T], t: usize, prior: &DiffPrior<T>, seed: u64) -> Result<T> {
    if !prior.is_trained() {
        return Err(Error::invalid("diffusion prior has not been trained"));
    }
    let tape = Tape::new();
    let zv = tape.constant(Tensor::row(z)?);
    let dr = Draw::at(t, z.len(), seed);
    prior.schedule().alpha_bar(t)?;
    Ok(elbo_var(prior, &tape, zv, &[dr])?.item())
}

/// One row of a purification trajectory.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TraceRow {
    pub step: usize,
    pub cos_to_blank: f64,
    pub pred: usize,
}

/// Purifier bound to a class bank and (for the diffusion variant) a prior.
#[derive(Clone, Copy, Debug)]
pub struct Purifier<'a, T> {
    pub cfg: &'a PurifyConfig,
    pub bank: &'a ClassBank<T>,
    pub prior: Option<&'a DiffPrior<T>>,
}

impl<'a, T: Scalar> Purifier<'a, T> {
    pub fn new(cfg: &'a PurifyConfig, bank: &'a ClassBank<T>, prior: Option<&'a DiffPrior<T>>) -> Result<Self> {
        cfg.validate()?;
        if cfg.variant == Variant::Diff {
            let p = prior.ok_or_else(|| Error::config("diffusion variant needs a prior"))?;
            if !p.is_trained() {
                return Err(Error::invalid("diffusion prior has not been trained"));
            }
            p.schedule().check_range(cfg.t_lo, cfg.t_hi)?;
        }
        Ok(Self { cfg, bank, prior })
    }

    /// Per-sample stream seed for the diffusion draws.
    pub fn row_seed(&self, sample_id: usize) -> u64 {
        derive_index(self.cfg.seed, sample_id as u64)
    }

    /// Summed objective over rows of `z`: log-likelihood proxy plus the
    /// guidance term on guided steps.
    fn objective<'t>(&self, tape: &'t Tape<T>, z: Var<'t, T>, step: usize, row_seeds: &[u64]) -> Result<Var<'t, T>> {
        let m = z.rows();
        let ll = match self.cfg.variant {
            Variant::Cos => z.cosine_rows(tape.constant(self.bank.blank.clone()))?,
            Variant::Diff => {
                let prior = self.prior.ok_or_else(|| Error::config("diffusion variant needs a prior"))?;
                let d = z.cols();
                let draws: Vec<Draw<T>> = row_seeds
                    .iter()
                    .map(|&s| Draw::sample(self.cfg.t_lo, self.cfg.t_hi, d, derive_index(s, step as u64)))
                    .collect();
                elbo_var(prior, tape, z, &draws)?
            }
        };
        let mut obj = ll.sum()?;
        if self.cfg.guided(step) {
            let scores = self.bank.scores_var(tape, z)?;
            let sv = scores.value();
            let yhat: Vec<usize> = (0..m).map(|i| argmax(sv.row_slice(i))).collect();
            let logp = scores
                .scale(1.0 / self.cfg.tau)?
                .log_softmax_rows()?
                .gather(&yhat)?
                .sum()?;
            obj = obj.add(logp.scale(self.cfg.guidance_w)?)?;
        }
        Ok(obj)
    }

    fn gradient<'t>(&self, tape: &'t Tape<T>, obj: Var<'t, T>, u: Var<'t, T>) -> Result<Var<'t, T>> {
        match tape.grad(obj, &[u])?.pop().flatten() {
            Some(g) => Ok(g),
            None => Ok(tape.constant(Tensor::zeros(&u.shape()))),
        }
    }

    /// Purifies the rows of `z` on `tape`. With `create_graph` the whole
    /// trajectory stays differentiable with respect to `z`; otherwise each
    /// step is detached and the tape is trimmed as it goes.
    pub fn run_on_tape<'t>(
        &self,
        tape: &'t Tape<T>,
        z: Var<'t, T>,
        row_seeds: &[u64],
        create_graph: bool,
        mut trace: Option<&mut Vec<TraceRow>>,
    ) -> Result<Var<'t, T>> {
        if self.cfg.steps == 0 {
            return Ok(z);
        }
        if row_seeds.len() != z.rows() {
            return Err(Error::invalid(format!("{} seeds for {} rows", row_seeds.len(), z.rows())));
        }
        if z.cols() != self.bank.dim() {
            return Err(Error::ShapeMismatch {
                op: "purify",
                lhs: z.shape(),
                rhs: vec![z.rows(), self.bank.dim()],
            });
        }
        let eta = self.cfg.eta;
        let wrap = |step: usize| move |e: Error| Error::numerical(format!("purify step {step}"), e.to_string());

        if self.cfg.literal_polar {
            let mut z = z;
            for step in 0..self.cfg.steps {
                let mark = tape.len();
                let next = (|| {
                    let r = z.sq_norm_rows()?;
                    let u = z.div_col(r)?;
                    let obj = self.objective(tape, u.mul_col(r)?, step, row_seeds)?;
                    let g = self.gradient(tape, obj, u)?;
                    u.add(g.scale(eta)?)?.mul_col(r)
                })()
                .map_err(wrap(step))?;
                z = self.settle(tape, next, mark, create_graph);
                self.record(&mut trace, step, z)?;
            }
            return Ok(z);
        }

        let r = z.l2norm_rows()?;
        let mut u = z.div_col(r)?;
        for step in 0..self.cfg.steps {
            let mark = tape.len();
            let next = (|| {
                let obj = self.objective(tape, u.mul_col(r)?, step, row_seeds)?;
                let g = self.gradient(tape, obj, u)?;
                u.add(g.scale(eta)?)?.normalize_rows()
            })()
            .map_err(wrap(step))?;
            u = self.settle(tape, next, mark, create_graph);
            self.record(&mut trace, step, u)?;
        }
        u.mul_col(r)
    }

    fn settle<'t>(&self, tape: &'t Tape<T>, v: Var<'t, T>, mark: usize, create_graph: bool) -> Var<'t, T> {
        if create_graph {
            v
        } else {
            let value = (*v.value()).clone();
            tape.truncate(mark);
            tape.constant(value)
        }
    }

    fn record(&self, trace: &mut Option<&mut Vec<TraceRow>>, step: usize, v: Var<'_, T>) -> Result<()> {
        if let Some(t) = trace.as_deref_mut() {
            let val = v.value();
            let row = val.row_slice(0);
            let (pred, _) = crate::zeroshot::classify(row, self.bank)?;
            t.push(TraceRow {
                step: step + 1,
                cos_to_blank: cosine(row, self.bank.blank.data())?.f64(),
                pred,
            });
        }
        Ok(())
    }

    /// Purified embeddings for the rows of `z`; `ids` select the per-sample
    /// random streams of the diffusion variant.
    pub fn purify(&self, z: &Tensor<T>, ids: &[usize]) -> Result<Tensor<T>> {
        if self.cfg.steps == 0 {
            return Ok(z.clone());
        }
        let seeds: Vec<u64> = ids.iter().map(|&i| self.row_seed(i)).collect();
        let tape = Tape::new();
        let zv = tape.constant(z.clone().as_matrix());
        let out = self.run_on_tape(&tape, zv, &seeds, false, None)?;
        Ok((*out.value()).clone())
    }

    /// Purifies a single embedding and records the trajectory.
    pub fn purify_traced(&self, z: &[T], id: usize) -> Result<(Vec<T>, Vec<TraceRow>)> {
        let tape = Tape::new();
        let zv = tape.constant(Tensor::row(z)?);
        let mut trace = Vec::new();
        let out = self.run_on_tape(&tape, zv, &[self.row_seed(id)], false, Some(&mut trace))?;
        Ok((out.value().data().to_vec(), trace))
    }

    /// One update of a polar embedding (`step` selects the diffusion draw
    /// and whether guidance applies).
    pub fn purify_step(&self, polar: &PolarEmbedding<T>, step: usize, id: usize) -> Result<PolarEmbedding<T>> {
        let tape = Tape::new();
        let u = tape.constant(Tensor::row(&polar.u)?);
        let r = tape.constant(Tensor::scalar(polar.r));
        let obj = self.objective(&tape, u.mul_col(r)?, step, &[self.row_seed(id)])?;
        let g = self.gradient(&tape, obj, u)?;
        let next = u.add(g.scale(self.cfg.eta)?)?.normalize_rows()?;
        Ok(PolarEmbedding {
            u: next.value().data().to_vec(),
            r: polar.r,
        })
    }
}

impl<T: Scalar> Preprocess<T> for Purifier<'_, T> {
    fn apply(&self, z: &Tensor<T>, ids: &[usize]) -> Result<Tensor<T>> {
        self.purify(z, ids)
    }

    fn steps(&self) -> usize {
        self.cfg.steps
    }
}
