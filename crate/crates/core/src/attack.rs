//! White-box gradient attacks: PGD, APGD-lite, adaptive and BPDA variants
//! through the purifier, and EOT gradient averaging.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dualenc::DualEncoder;
use crate::error::{Error, Result};
use crate::purifier::Purifier;
use crate::rng::{derive_index, derive_seed, gaussian, rng};
use crate::tensor::{Scalar, Tape, Tensor, Var};
use crate::zeroshot::ClassBank;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Norm {
    #[serde(rename = "linf")]
    Linf,
    #[serde(rename = "l2")]
    L2,
}

/// How the purifier enters the attacker's gradient.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// classifier ∘ encoder, purifier ignored
    Direct,
    /// classifier ∘ purifier ∘ encoder through the full tape
    Adaptive,
    /// purifier in the forward pass, identity in the backward pass
    Bpda,
}

impl std::str::FromStr for Norm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linf" | "inf" => Ok(Norm::Linf),
            "l2" => Ok(Norm::L2),
            o => Err(Error::config(format!("unknown norm `{o}`"))),
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "direct" => Ok(Mode::Direct),
            "adaptive" => Ok(Mode::Adaptive),
            "bpda" => Ok(Mode::Bpda),
            o => Err(Error::config(format!("unknown attack mode `{o}`"))),
        }
    }
}

impl std::fmt::Display for Norm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Norm::Linf => "linf",
            Norm::L2 => "l2",
        })
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Direct => "direct",
            Mode::Adaptive => "adaptive",
            Mode::Bpda => "bpda",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub norm: Norm,
    pub eps: f64,
    pub alpha: f64,
    pub steps: usize,
    /// scale of the Brownian term added every step (0 disables it)
    pub sigma: f64,
    pub eot_samples: usize,
    pub mode: Mode,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            norm: Norm::Linf,
            eps: 8.0 / 255.0,
            alpha: 2.0 / 255.0,
            steps: 40,
            sigma: 0.0,
            eot_samples: 1,
            mode: Mode::Adaptive,
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps >= 0.0) {
            return Err(Error::config(format!("eps {} must be >= 0", self.eps)));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::config(format!("alpha {} must be > 0", self.alpha)));
        }
        if self.steps == 0 {
            return Err(Error::config("attack needs at least one step"));
        }
        if !(self.sigma >= 0.0) {
            return Err(Error::config(format!("sigma {} must be >= 0", self.sigma)));
        }
        if self.eot_samples == 0 {
            return Err(Error::config("eot_samples must be >= 1"));
        }
        Ok(())
    }
}

/// Differentiable per-row loss that the attacker maximizes.
pub trait Objective<T: Scalar>: Sync {
    /// Per-row losses and their gradients with respect to `x` (`m × P`).
    /// `seeds` drive any randomness, one stream per row.
    fn loss_grad(&self, x: &Tensor<T>, labels: &[usize], seeds: &[u64]) -> Result<(Vec<f64>, Tensor<T>)>;

    /// Whether repeated evaluations with different seeds differ.
    fn stochastic(&self) -> bool {
        false
    }
}

/// Zero-shot classifier with optional purification, attacked through
/// cross-entropy over cosine scores divided by `tau`.
#[derive(Clone, Copy, Debug)]
pub struct Pipeline<'a, T> {
    pub encoder: &'a DualEncoder<T>,
    pub bank: &'a ClassBank<T>,
    pub purifier: Option<Purifier<'a, T>>,
    pub mode: Mode,
    pub tau: f64,
}

impl<'a, T: Scalar> Pipeline<'a, T> {
    pub fn new(encoder: &'a DualEncoder<T>, bank: &'a ClassBank<T>) -> Self {
        Self {
            encoder,
            bank,
            purifier: None,
            mode: Mode::Direct,
            tau: encoder.cfg.tau,
        }
    }

    pub fn with_purifier(mut self, purifier: Purifier<'a, T>, mode: Mode) -> Self {
        self.purifier = Some(purifier);
        self.mode = mode;
        self
    }

    /// Embedding that the classifier sees, built on `tape` from `x`.
    pub fn embed<'t>(&self, tape: &'t Tape<T>, x: Var<'t, T>, seeds: &[u64]) -> Result<Var<'t, T>> {
        let z = self.encoder.encode_image_var(tape, x)?;
        match (self.purifier, self.mode) {
            (None, _) | (_, Mode::Direct) => Ok(z),
            (Some(p), Mode::Adaptive) => p.run_on_tape(tape, z, seeds, true, None),
            (Some(p), Mode::Bpda) => {
                let scratch = Tape::new();
                let zc = scratch.constant((*z.value()).clone());
                let pure = p.run_on_tape(&scratch, zc, seeds, false, None)?;
                z.straight_through((*pure.value()).clone())
            }
        }
    }

    /// Per-row cross-entropy, `m × 1`.
    pub fn loss_var<'t>(&self, tape: &'t Tape<T>, x: Var<'t, T>, labels: &[usize], seeds: &[u64]) -> Result<Var<'t, T>> {
        let z = self.embed(tape, x, seeds)?;
        self.bank
            .scores_var(tape, z)?
            .scale(1.0 / self.tau)?
            .cross_entropy_rows(labels)
    }
}

impl<T: Scalar> Objective<T> for Pipeline<'_, T> {
    fn loss_grad(&self, x: &Tensor<T>, labels: &[usize], seeds: &[u64]) -> Result<(Vec<f64>, Tensor<T>)> {
        let tape = Tape::new();
        let xv = tape.leaf(x.clone().as_matrix());
        let ce = self.loss_var(&tape, xv, labels, seeds)?;
        let losses = ce.value().to_f64_vec();
        let g = tape
            .gradients(ce.sum()?, &[xv])?
            .pop()
            .flatten()
            .unwrap_or_else(|| Tensor::zeros(&xv.shape()));
        Ok((losses, g))
    }

    fn stochastic(&self) -> bool {
        matches!(
            (self.purifier, self.mode),
            (Some(p), Mode::Adaptive | Mode::Bpda) if p.cfg.variant == crate::purifier::Variant::Diff
        )
    }
}

fn step_seeds(cfg: &AttackConfig, ids: &[usize], step: usize, draw: usize) -> Vec<u64> {
    ids.iter()
        .map(|&id| derive_index(derive_index(derive_index(cfg.seed, id as u64), step as u64), draw as u64))
        .collect()
}

/// Mean of `eot_samples` gradient evaluations with distinct sub-seeds
/// (a single evaluation for deterministic objectives).
pub fn eot_gradient<T: Scalar, O: Objective<T> + ?Sized>(
    obj: &O,
    x: &Tensor<T>,
    labels: &[usize],
    ids: &[usize],
    cfg: &AttackConfig,
    step: usize,
) -> Result<(Vec<f64>, Tensor<T>)> {
    let wrap = |e: Error| Error::numerical(format!("attack gradient at step {step}"), e.to_string());
    let n = if obj.stochastic() { cfg.eot_samples } else { 1 };
    let (mut losses, mut g) = obj.loss_grad(x, labels, &step_seeds(cfg, ids, step, 0)).map_err(wrap)?;
    if n > 1 {
        let mut acc: Vec<f64> = g.to_f64_vec();
        for k in 1..n {
            let (l, gk) = obj.loss_grad(x, labels, &step_seeds(cfg, ids, step, k)).map_err(wrap)?;
            for (a, b) in losses.iter_mut().zip(l) {
                *a += b;
            }
            for (a, b) in acc.iter_mut().zip(gk.data()) {
                *a += b.f64();
            }
        }
        losses.iter_mut().for_each(|v| *v /= n as f64);
        g = Tensor::new(g.shape().to_vec(), acc.into_iter().map(|v| T::c(v / n as f64)).collect())?;
    }
    if !g.all_finite() || losses.iter().any(|l| !l.is_finite()) {
        return Err(Error::numerical(format!("attack gradient at step {step}"), "non-finite value"));
    }
    Ok((losses, g))
}

/// Alias of [`eot_gradient`] for a single attack step.
pub fn attack_gradient<T: Scalar, O: Objective<T> + ?Sized>(
    obj: &O,
    x: &Tensor<T>,
    labels: &[usize],
    ids: &[usize],
    cfg: &AttackConfig,
) -> Result<Tensor<T>> {
    eot_gradient(obj, x, labels, ids, cfg, 0).map(|(_, g)| g)
}

fn sign<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

/// Steepest-ascent direction per row: sign for ℓ∞, unit gradient for ℓ2.
fn direction<T: Scalar>(g: &Tensor<T>, norm: Norm) -> Tensor<T> {
    match norm {
        Norm::Linf => g.map(sign),
        Norm::L2 => {
            let p = g.cols();
            let mut out = g.data().to_vec();
            for row in out.chunks_mut(p.max(1)) {
                let n = row.iter().map(|v| v.f64() * v.f64()).sum::<f64>().sqrt();
                if n < 1e-12 {
                    row.iter_mut().for_each(|v| *v = T::zero());
                } else {
                    row.iter_mut().for_each(|v| *v = T::c(v.f64() / n));
                }
            }
            Tensor::new(g.shape().to_vec(), out).expect("finite direction")
        }
    }
}

fn nudge_toward<T: Scalar>(v: T, target: f64) -> T {
    let step = T::epsilon() * v.abs().max(T::one());
    if v.f64() > target {
        v - step
    } else {
        v + step
    }
}

/// Projects `x` onto the `eps` ball around `x0` and the `[0,1]` box. The
/// ball constraint holds exactly when distances are measured in `f64`.
pub fn project<T: Scalar>(x0: &Tensor<T>, x: &Tensor<T>, norm: Norm, eps: f64) -> Tensor<T> {
    let p = x0.cols();
    let mut out = Vec::with_capacity(x.numel());
    for i in 0..x0.rows() {
        let (a, b) = (x0.row_slice(i), x.row_slice(i));
        match norm {
            Norm::Linf => {
                for (&o, &v) in a.iter().zip(b) {
                    let (lo, hi) = ((o.f64() - eps).max(0.0), (o.f64() + eps).min(1.0));
                    let mut v = T::c(v.f64().clamp(lo, hi));
                    while v.f64() > hi {
                        v = nudge_toward(v, lo);
                    }
                    while v.f64() < lo {
                        v = nudge_toward(v, hi);
                    }
                    out.push(v);
                }
            }
            Norm::L2 => {
                let delta: Vec<f64> = a.iter().zip(b).map(|(o, v)| v.f64() - o.f64()).collect();
                let n = delta.iter().map(|d| d * d).sum::<f64>().sqrt();
                let mut s = if n > eps { eps / n } else { 1.0 };
                loop {
                    let row: Vec<T> = a
                        .iter()
                        .zip(&delta)
                        .map(|(o, d)| T::c((o.f64() + s * d).clamp(0.0, 1.0)))
                        .collect();
                    let dist = row
                        .iter()
                        .zip(a)
                        .map(|(v, o)| (v.f64() - o.f64()).powi(2))
                        .sum::<f64>()
                        .sqrt();
                    if dist <= eps || s == 0.0 {
                        out.extend(row);
                        break;
                    }
                    s *= 1.0 - 1e-6;
                    if s < 1e-300 {
                        s = 0.0;
                    }
                }
            }
        }
    }
    debug_assert_eq!(out.len(), x0.rows() * p);
    Tensor::from_parts(x.shape().to_vec(), out)
}

/// Largest per-row perturbation norm `‖x_adv − x0‖_ρ`, measured in `f64`.
pub fn max_distance<T: Scalar>(x0: &Tensor<T>, x: &Tensor<T>, norm: Norm) -> f64 {
    (0..x0.rows())
        .map(|i| {
            let d = x0.row_slice(i).iter().zip(x.row_slice(i)).map(|(a, b)| b.f64() - a.f64());
            match norm {
                Norm::Linf => d.fold(0.0f64, |m, v| m.max(v.abs())),
                Norm::L2 => d.map(|v| v * v).sum::<f64>().sqrt(),
            }
        })
        .fold(0.0, f64::max)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackOutcome<T> {
    pub x_adv: Tensor<T>,
    /// per-row loss after each gradient evaluation
    pub losses: Vec<Vec<f64>>,
}

fn check_inputs<T: Scalar>(x: &Tensor<T>, labels: &[usize], ids: &[usize]) -> Result<()> {
    if x.rows() != labels.len() || labels.len() != ids.len() {
        return Err(Error::invalid(format!(
            "{} images, {} labels, {} ids",
            x.rows(),
            labels.len(),
            ids.len()
        )));
    }
    if x.data().iter().any(|v| v.f64() < 0.0 || v.f64() > 1.0) {
        return Err(Error::invalid("attack input outside [0, 1]"));
    }
    Ok(())
}

fn add_noise<T: Scalar>(x: &mut Tensor<T>, cfg: &AttackConfig, ids: &[usize], step: usize) {
    if cfg.sigma == 0.0 {
        return;
    }
    let p = x.cols();
    let seeds = step_seeds(cfg, ids, step, usize::MAX);
    for (row, s) in x.data_mut().chunks_mut(p).zip(seeds) {
        let mut r = rng(derive_seed(s, "wiener"));
        for v in row {
            *v = *v + T::c(cfg.sigma) * gaussian::<T, _>(&mut r);
        }
    }
}

/// Projected gradient ascent: `x ← Π(x + α·dir(∇L) + σ·N(0, I))`.
pub fn pgd<T: Scalar, O: Objective<T> + ?Sized>(
    obj: &O,
    x0: &Tensor<T>,
    labels: &[usize],
    ids: &[usize],
    cfg: &AttackConfig,
) -> Result<AttackOutcome<T>> {
    cfg.validate()?;
    check_inputs(x0, labels, ids)?;
    let x0 = x0.clone().as_matrix();
    let mut x = x0.clone();
    let mut losses = vec![Vec::with_capacity(cfg.steps); labels.len()];
    let alpha = T::c(cfg.alpha);
    for step in 0..cfg.steps {
        let (l, g) = eot_gradient(obj, &x, labels, ids, cfg, step)?;
        for (trace, v) in losses.iter_mut().zip(l) {
            trace.push(v);
        }
        let dir = direction(&g, cfg.norm);
        let mut next = x.clone();
        for (v, &d) in next.data_mut().iter_mut().zip(dir.data()) {
            *v = *v + alpha * d;
        }
        add_noise(&mut next, cfg, ids, step);
        x = project(&x0, &next, cfg.norm, cfg.eps);
    }
    Ok(AttackOutcome { x_adv: x, losses })
}

/// PGD with momentum 0.75, step halving after `⌈0.22·T⌉` steps without a
/// new best loss (down to `α/64`, restarting from the best point), and
/// best-iterate tracking.
pub fn apgd_lite<T: Scalar, O: Objective<T> + ?Sized>(
    obj: &O,
    x0: &Tensor<T>,
    labels: &[usize],
    ids: &[usize],
    cfg: &AttackConfig,
) -> Result<AttackOutcome<T>> {
    cfg.validate()?;
    check_inputs(x0, labels, ids)?;
    let m = labels.len();
    let x0 = x0.clone().as_matrix();
    let p = x0.cols();
    let patience = (0.22 * cfg.steps as f64).ceil() as usize;
    let alpha_min = cfg.alpha / 64.0;

    let (l0, g0) = eot_gradient(obj, &x0, labels, ids, cfg, 0)?;
    let mut losses: Vec<Vec<f64>> = l0.iter().map(|&v| vec![v]).collect();
    let mut x = x0.clone();
    let mut x_prev = x0.clone();
    let mut g = g0.clone();
    let mut best_x = x0.clone();
    let mut best_g = g0;
    let mut best = l0;
    let mut step_size = vec![cfg.alpha; m];
    let mut stall = vec![0usize; m];

    for step in 0..cfg.steps {
        let dir = direction(&g, cfg.norm);
        let mut z = x.clone();
        for (i, row) in z.data_mut().chunks_mut(p).enumerate() {
            let a = T::c(step_size[i]);
            for (v, &d) in row.iter_mut().zip(dir.row_slice(i)) {
                *v = *v + a * d;
            }
        }
        add_noise(&mut z, cfg, ids, step);
        let z = project(&x0, &z, cfg.norm, cfg.eps);
        let next = if step == 0 {
            z
        } else {
            let (a, b) = (T::c(0.75), T::c(0.25));
            let mixed: Vec<T> = x
                .data()
                .iter()
                .zip(z.data())
                .zip(x_prev.data())
                .map(|((&xv, &zv), &pv)| xv + a * (zv - xv) + b * (xv - pv))
                .collect();
            project(&x0, &Tensor::from_parts(x.shape().to_vec(), mixed), cfg.norm, cfg.eps)
        };
        x_prev = std::mem::replace(&mut x, next);
        let (l, gn) = eot_gradient(obj, &x, labels, ids, cfg, step + 1)?;
        g = gn;
        for i in 0..m {
            losses[i].push(l[i]);
            if l[i] > best[i] {
                best[i] = l[i];
                copy_row(&mut best_x, &x, i);
                copy_row(&mut best_g, &g, i);
                stall[i] = 0;
            } else {
                stall[i] += 1;
                if stall[i] >= patience {
                    stall[i] = 0;
                    step_size[i] = (step_size[i] / 2.0).max(alpha_min);
                    copy_row(&mut x, &best_x, i);
                    copy_row(&mut x_prev, &best_x, i);
                    copy_row(&mut g, &best_g, i);
                }
            }
        }
    }
    Ok(AttackOutcome { x_adv: best_x, losses })
}

fn copy_row<T: Scalar>(dst: &mut Tensor<T>, src: &Tensor<T>, i: usize) {
    let p = dst.cols();
    dst.data_mut()[i * p..(i + 1) * p].copy_from_slice(src.row_slice(i));
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Pgd,
    ApgdLite,
}

/// Attacks every row of `x` in parallel chunks; results are independent of
/// the chunk size because all randomness is keyed by sample id.
pub fn attack_dataset<T: Scalar, O: Objective<T> + ?Sized>(
    obj: &O,
    x: &Tensor<T>,
    labels: &[usize],
    ids: &[usize],
    cfg: &AttackConfig,
    algorithm: Algorithm,
    chunk: usize,
) -> Result<AttackOutcome<T>> {
    check_inputs(x, labels, ids)?;
    let x = x.clone().as_matrix();
    let n = labels.len();
    let chunk = chunk.max(1);
    let starts: Vec<usize> = (0..n).step_by(chunk).collect();
    let parts = starts
        .par_iter()
        .map(|&s| {
            let e = (s + chunk).min(n);
            let idx: Vec<usize> = (s..e).collect();
            let xs = x.select_rows(&idx);
            match algorithm {
                Algorithm::Pgd => pgd(obj, &xs, &labels[s..e], &ids[s..e], cfg),
                Algorithm::ApgdLite => apgd_lite(obj, &xs, &labels[s..e], &ids[s..e], cfg),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let mut data = Vec::with_capacity(x.numel());
    let mut losses = Vec::with_capacity(n);
    for part in parts {
        data.extend_from_slice(part.x_adv.data());
        losses.extend(part.losses);
    }
    Ok(AttackOutcome {
        x_adv: Tensor::new(x.shape().to_vec(), data)?,
        losses,
    })
}
