//! Small conditional diffusion prior over embedding (or pixel) vectors.
//!
//! The denoiser predicts the injected noise from `(z_t, t, z̄)`. Its ELBO
//! `−‖ε̂ − ε‖²` is the likelihood proxy used by the diffusion purifier and
//! the pixel/latent comparison.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::checkpoint::{Checkpoint, TAG_PRIOR};
use crate::error::{Error, Result};
use crate::nn::{init_linear, linear, ParamSet, Sgd};
use crate::rng::{derive_index, derive_seed, gaussian_vec, rng};
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Cumulative signal fractions `ᾱ_0 = 1 ≥ ᾱ_1 ≥ … ≥ ᾱ_T`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Cosine-shaped schedule with per-step `β ≤ 0.999`.
    pub fn cosine(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::config("schedule needs at least one step"));
        }
        let s = 0.008;
        let f = |t: usize| {
            let x = (t as f64 / steps as f64 + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2;
            x.cos().powi(2)
        };
        let mut alpha_bar = vec![1.0];
        for t in 1..=steps {
            let ratio = (f(t) / f(t - 1)).max(1e-3);
            alpha_bar.push(alpha_bar[t - 1] * ratio);
        }
        Ok(Self { alpha_bar })
    }

    /// Number of noising steps `T`.
    pub fn steps(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bar
            .get(t)
            .copied()
            .ok_or_else(|| Error::invalid(format!("timestep {t} outside 0..={}", self.steps())))
    }

    pub fn check_range(&self, lo: usize, hi: usize) -> Result<()> {
        if lo > hi || hi > self.steps() {
            return Err(Error::invalid(format!(
                "timestep range [{lo}, {hi}] outside 0..={}",
                self.steps()
            )));
        }
        Ok(())
    }
}

/// `z_t = √ᾱ_t z₀ + √(1−ᾱ_t) ε`
pub fn noise<T: Scalar>(z0: &[T], t: usize, eps: &[T], schedule: &NoiseSchedule) -> Result<Vec<T>> {
    if z0.len() != eps.len() {
        return Err(Error::ShapeMismatch {
            op: "noise",
            lhs: vec![z0.len()],
            rhs: vec![eps.len()],
        });
    }
    let ab = schedule.alpha_bar(t)?;
    let (a, b) = (T::c(ab.sqrt()), T::c((1.0 - ab).sqrt()));
    Ok(z0.iter().zip(eps).map(|(&z, &e)| a * z + b * e).collect())
}

/// One Monte-Carlo draw `(t, ε)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Draw<T> {
    pub t: usize,
    pub eps: Vec<T>,
}

impl<T: Scalar> Draw<T> {
    /// Noise for a fixed timestep, determined by `seed`.
    pub fn at(t: usize, dim: usize, seed: u64) -> Self {
        Self {
            t,
            eps: gaussian_vec(&mut rng(derive_seed(seed, "eps")), dim),
        }
    }

    /// Timestep uniform in `[lo, hi]` plus noise, determined by `seed`.
    pub fn sample(lo: usize, hi: usize, dim: usize, seed: u64) -> Self {
        let t = rng(derive_seed(seed, "t")).random_range(lo..=hi);
        Self::at(t, dim, seed)
    }
}

/// Noise-prediction network `ε_θ(z_t, t, z̄)`.
pub trait Denoiser<T: Scalar> {
    fn schedule(&self) -> &NoiseSchedule;
    fn data_dim(&self) -> usize;
    /// Fixed multiplier applied to data before noising.
    fn scale(&self) -> f64;
    /// Predicted noise for the rows of `zt` (already scaled) at timesteps `ts`.
    fn predict<'t>(&self, tape: &'t Tape<T>, zt: Var<'t, T>, ts: &[usize]) -> Result<Var<'t, T>>;
}

/// Per-row ELBO proxy `−‖ε̂(z_t, t) − ε‖²` with one draw per row, `m × 1`.
/// Differentiable with respect to `z`.
pub fn elbo_var<'t, T: Scalar, D: Denoiser<T> + ?Sized>(
    den: &D,
    tape: &'t Tape<T>,
    z: Var<'t, T>,
    draws: &[Draw<T>],
) -> Result<Var<'t, T>> {
    elbo_with(tape, z, draws, den.schedule(), den.scale(), den.data_dim(), |zt, ts| {
        den.predict(tape, zt, ts)
    })
}

fn elbo_with<'t, T: Scalar>(
    tape: &'t Tape<T>,
    z: Var<'t, T>,
    draws: &[Draw<T>],
    sched: &NoiseSchedule,
    scale: f64,
    data_dim: usize,
    predict: impl FnOnce(Var<'t, T>, &[usize]) -> Result<Var<'t, T>>,
) -> Result<Var<'t, T>> {
    let (m, d) = (z.rows(), z.cols());
    if d != data_dim {
        return Err(Error::ShapeMismatch {
            op: "elbo",
            lhs: z.shape(),
            rhs: vec![m, data_dim],
        });
    }
    if draws.len() != m {
        return Err(Error::invalid(format!("{} draws for {m} rows", draws.len())));
    }
    let mut a = Vec::with_capacity(m);
    let mut b = Vec::with_capacity(m);
    let mut eps = Vec::with_capacity(m * d);
    for dr in draws {
        let ab = sched.alpha_bar(dr.t)?;
        a.push(T::c(ab.sqrt()));
        b.push(T::c((1.0 - ab).sqrt()));
        if dr.eps.len() != d {
            return Err(Error::invalid("noise draw has the wrong dimension"));
        }
        eps.extend_from_slice(&dr.eps);
    }
    let a = tape.constant(Tensor::new(vec![m, 1], a)?);
    let b = tape.constant(Tensor::new(vec![m, 1], b)?);
    let eps = tape.constant(Tensor::new(vec![m, d], eps)?);
    let zs = z.scale(scale)?;
    let zt = zs.mul_col(a)?.add(eps.mul_col(b)?)?;
    let ts: Vec<usize> = draws.iter().map(|d| d.t).collect();
    let pred = predict(zt, &ts)?;
    pred.sub(eps)?.sq_norm_rows()?.neg()
}

/// Mean ELBO proxy of one vector over `n_samples` seeded draws with
/// `t` uniform in `t_range`.
pub fn elbo_score<T: Scalar, D: Denoiser<T> + ?Sized>(
    den: &D,
    z: &[T],
    t_range: (usize, usize),
    n_samples: usize,
    seed: u64,
) -> Result<f64> {
    if n_samples == 0 {
        return Err(Error::Empty("elbo samples"));
    }
    den.schedule().check_range(t_range.0, t_range.1)?;
    let draws: Vec<Draw<T>> = (0..n_samples)
        .map(|k| Draw::sample(t_range.0, t_range.1, z.len(), derive_index(seed, k as u64)))
        .collect();
    let tape = Tape::new();
    let zr = tape.constant(Tensor::row(z)?).broadcast_rows(n_samples)?;
    let s = elbo_var(den, &tape, zr, &draws)?;
    Ok(s.mean()?.item().f64())
}

fn timestep_features<T: Scalar>(ts: &[usize], dim: usize) -> Tensor<T> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        for k in 0..half {
            let freq = (-(1000f64).ln() * k as f64 / half as f64).exp();
            out.push(T::c((t as f64 * freq).sin()));
        }
        for k in 0..half {
            let freq = (-(1000f64).ln() * k as f64 / half as f64).exp();
            out.push(T::c((t as f64 * freq).cos()));
        }
    }
    Tensor::from_parts(vec![ts.len(), 2 * half], out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PriorConfig {
    pub hidden: usize,
    pub temb_dim: usize,
    pub timesteps: usize,
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch: usize,
    pub seed: u64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            hidden: 128,
            temb_dim: 32,
            timesteps: 100,
            epochs: 40,
            lr: 0.02,
            momentum: 0.9,
            batch: 128,
            seed: 17,
        }
    }
}

impl PriorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.temb_dim < 2 || self.batch == 0 {
            return Err(Error::config("prior sizes must be positive"));
        }
        if self.timesteps == 0 {
            return Err(Error::config("prior needs at least one timestep"));
        }
        Ok(())
    }
}

/// Residual MLP denoiser: input projection, one residual SiLU block, output
/// projection. The conditioning vector is concatenated to every input row.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffPrior<T> {
    pub cfg: PriorConfig,
    data_dim: usize,
    cond: Option<Tensor<T>>,
    scale: f64,
    schedule: NoiseSchedule,
    params: ParamSet<T>,
    trained: bool,
}

impl<T: Scalar> DiffPrior<T> {
    /// Untrained prior; `cond` is the fixed conditioning row (`None` for the
    /// unconditional pixel twin).
    pub fn new(cfg: PriorConfig, data_dim: usize, cond: Option<Tensor<T>>, scale: f64) -> Result<Self> {
        cfg.validate()?;
        let schedule = NoiseSchedule::cosine(cfg.timesteps)?;
        let cond_dim = cond.as_ref().map_or(0, |c| c.cols());
        let mut r = rng(derive_seed(cfg.seed, "prior-init"));
        let mut params = ParamSet::default();
        let h = cfg.hidden;
        init_linear(&mut params, &mut r, "prior.in", data_dim + 2 * (cfg.temb_dim / 2) + cond_dim, h);
        init_linear(&mut params, &mut r, "prior.res", h, h);
        init_linear(&mut params, &mut r, "prior.out", h, data_dim);
        Ok(Self {
            cfg,
            data_dim,
            cond,
            scale,
            schedule,
            params,
            trained: false,
        })
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub fn cond(&self) -> Option<&Tensor<T>> {
        self.cond.as_ref()
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn cast<U: Scalar>(&self) -> DiffPrior<U> {
        DiffPrior {
            cfg: self.cfg.clone(),
            data_dim: self.data_dim,
            cond: self.cond.as_ref().map(|c| c.cast()),
            scale: self.scale,
            schedule: self.schedule.clone(),
            params: self.params.cast(),
            trained: self.trained,
        }
    }

    fn forward<'t>(&self, tape: &'t Tape<T>, p: &[Var<'t, T>], zt: Var<'t, T>, ts: &[usize]) -> Result<Var<'t, T>> {
        let m = zt.rows();
        let temb = tape.constant(timestep_features(ts, self.cfg.temb_dim));
        let mut x = zt.concat_cols(temb)?;
        if let Some(c) = &self.cond {
            let c = tape.constant(c.clone()).scale(self.scale)?.broadcast_rows(m)?;
            x = x.concat_cols(c)?;
        }
        let h = linear(x, p[0], p[1])?.silu()?;
        let h = h.add(linear(h, p[2], p[3])?.silu()?)?;
        linear(h, p[4], p[5])
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new(TAG_PRIOR, self.data_dim);
        let cfg = &self.cfg;
        for (k, v) in [
            ("hidden", cfg.hidden.to_string()),
            ("temb_dim", cfg.temb_dim.to_string()),
            ("timesteps", cfg.timesteps.to_string()),
            ("scale", format!("{:?}", self.scale)),
            ("trained", self.trained.to_string()),
        ] {
            c.meta.insert(k.into(), v);
        }
        c.layers = self.params.to_layers();
        if let Some(cond) = &self.cond {
            c.layers.push(("prior.cond".into(), cond.cast()));
        }
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        c.expect_tag(TAG_PRIOR)?;
        let num = |k: &str| -> Result<usize> {
            c.meta(k)?
                .parse()
                .map_err(|_| Error::Format(format!("bad meta `{k}`")))
        };
        let cfg = PriorConfig {
            hidden: num("hidden")?,
            temb_dim: num("temb_dim")?,
            timesteps: num("timesteps")?,
            ..PriorConfig::default()
        };
        let scale: f64 = c
            .meta("scale")?
            .parse()
            .map_err(|_| Error::Format("bad scale".into()))?;
        let cond = c.layer("prior.cond").ok().map(|t| t.cast());
        let mut prior = Self::new(cfg, c.dim as usize, cond, scale)?;
        prior.params.load_from(c)?;
        prior.trained = c.meta("trained")? == "true";
        Ok(prior)
    }
}

impl<T: Scalar> Denoiser<T> for DiffPrior<T> {
    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn data_dim(&self) -> usize {
        self.data_dim
    }

    fn scale(&self) -> f64 {
        self.scale
    }

    fn predict<'t>(&self, tape: &'t Tape<T>, zt: Var<'t, T>, ts: &[usize]) -> Result<Var<'t, T>> {
        let p = self.params.bind(tape, false);
        self.forward(tape, &p, zt, ts)
    }
}

#[derive(Clone, Debug)]
pub struct PriorOutcome {
    pub prior: DiffPrior<f32>,
    /// mean per-coordinate denoising loss per epoch
    pub loss_curve: Vec<f64>,
    /// the same loss for the untrained network on the first epoch's draws
    pub initial_loss: f64,
}

/// Trains the denoiser on `corpus` (`N × d`). Data are scaled by the inverse
/// root-mean-square coordinate of the corpus.
pub fn train_prior(corpus: &Tensor<f32>, cond: Option<Tensor<f32>>, cfg: &PriorConfig) -> Result<PriorOutcome> {
    let n = corpus.rows();
    if n == 0 {
        return Err(Error::Empty("prior corpus"));
    }
    let d = corpus.cols();
    let ms: f64 = corpus.data().iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>() / corpus.numel() as f64;
    if !(ms > 0.0) {
        return Err(Error::numerical("prior training", "corpus has zero energy"));
    }
    let mut prior = DiffPrior::new(cfg.clone(), d, cond, 1.0 / ms.sqrt())?;
    let data = corpus.clone().as_matrix();
    let tmax = prior.schedule.steps();
    let mut opt = Sgd::new(&prior.params, cfg.lr, cfg.momentum);
    let mut order: Vec<usize> = (0..n).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    let draws_for = |epoch: usize, idx: &[usize]| -> Vec<Draw<f32>> {
        let s = derive_seed(cfg.seed, &format!("prior-epoch-{epoch}"));
        idx.iter()
            .map(|&i| Draw::sample(1, tmax, d, derive_index(s, i as u64)))
            .collect()
    };
    let batch_loss = |prior: &DiffPrior<f32>, idx: &[usize], draws: &[Draw<f32>], grads: bool| {
        let tape = Tape::new();
        let p = prior.params.bind(&tape, grads);
        let z = tape.constant(data.select_rows(idx));
        let s = elbo_with(&tape, z, draws, &prior.schedule, prior.scale, d, |zt, ts| {
            prior.forward(&tape, &p, zt, ts)
        })?;
        let loss = s
            .neg()?
            .mean()?
            .scale(1.0 / d as f64)?;
        let g = if grads { Some(tape.gradients(loss, &p)?) } else { None };
        Ok::<_, Error>((f64::from(loss.item()), g))
    };

    let mut initial = 0.0;
    let mut count = 0;
    for idx in order.chunks(cfg.batch) {
        initial += batch_loss(&prior, idx, &draws_for(0, idx), false)?.0;
        count += 1;
    }
    let initial_loss = initial / count as f64;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng(derive_seed(cfg.seed, &format!("prior-shuffle-{epoch}"))));
        let (mut total, mut count) = (0.0, 0usize);
        for (b, idx) in order.chunks(cfg.batch).enumerate() {
            let (loss, grads) = batch_loss(&prior, idx, &draws_for(epoch, idx), true).map_err(|e| {
                Error::numerical(format!("prior training epoch {epoch} batch {b}"), e.to_string())
            })?;
            if !loss.is_finite() {
                return Err(Error::numerical(
                    format!("prior training epoch {epoch} batch {b}"),
                    "non-finite loss",
                ));
            }
            opt.step(&mut prior.params, &grads.expect("gradients requested"))?;
            total += loss;
            count += 1;
        }
        curve.push(total / count as f64);
    }
    prior.trained = true;
    Ok(PriorOutcome {
        prior,
        loss_curve: curve,
        initial_loss,
    })
}
