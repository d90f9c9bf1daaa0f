//! Finite-difference cases shared by the gradient and acceptance suites.

use std::sync::Arc;

use clipure_core::attack::{Mode, Pipeline};
use clipure_core::purifier::{Purifier, PurifyConfig, Variant};
use clipure_core::tensor::{finite_diff_check, Tape, Var};
use clipure_core::{Result, Tensor};

use super::*;

pub const H: f64 = 1e-5;

pub type Case = Box<dyn for<'t> Fn(&'t Tape<f64>, Var<'t, f64>) -> Result<Var<'t, f64>>>;

pub fn boxed<F>(f: F) -> Case
where
    F: for<'t> Fn(&'t Tape<f64>, Var<'t, f64>) -> Result<Var<'t, f64>> + 'static,
{
    Box::new(f)
}

/// Pins a closure to the higher-ranked signature the checker expects.
pub fn hr<F>(f: F) -> F
where
    F: for<'t> Fn(&'t Tape<f64>, Var<'t, f64>) -> Result<Var<'t, f64>>,
{
    f
}

#[derive(Clone, Copy)]
pub enum Domain {
    Any,
    Positive,
    /// magnitudes at least 0.05 so no coordinate sits on a kink
    OffKink,
}

pub fn point(seed: u64, rows: usize, cols: usize, d: Domain) -> Tensor<f64> {
    let g = gaussian_matrix(seed, rows, cols);
    match d {
        Domain::Any => g,
        Domain::Positive => g.map(|v| 0.2 + v.abs()),
        Domain::OffKink => g.map(|v| v.signum() * (0.05 + v.abs())),
    }
}

/// Contracts any output with fixed weights so every coordinate matters.
pub fn contract<'t>(t: &'t Tape<f64>, y: Var<'t, f64>, seed: u64) -> Result<Var<'t, f64>> {
    let w = gaussian_matrix(seed ^ 0x5eed, y.rows(), y.cols());
    y.mul(t.constant(w))?.sum()
}

pub fn primitive_cases(seed: u64) -> Vec<(&'static str, usize, usize, Domain, Case)> {
    let (m, n, k) = (3, 4, 5);
    let other = gaussian_matrix(seed + 1, m, n);
    let right = gaussian_matrix(seed + 2, n, k);
    let row = gaussian_matrix(seed + 3, 1, n);
    let col = gaussian_matrix(seed + 4, m, 1);
    let labels: Vec<usize> = (0..m).map(|i| (seed as usize + i) % n).collect();
    let bags = Arc::new(vec![vec![0, 2], vec![1], vec![3, 3, 0]]);
    macro_rules! case {
        ($name:expr, $r:expr, $c:expr, $d:expr, |$t:ident, $x:ident| $body:expr) => {{
            let f = boxed(move |$t, $x| {
                let y = $body?;
                contract($t, y, seed)
            });
            ($name, $r, $c, $d, f)
        }};
    }
    let o = other.clone();
    let o2 = other.clone();
    let o3 = other.clone();
    let o4 = other.clone();
    let r1 = right.clone();
    let r2 = right.clone();
    let rw = row.clone();
    let cl = col.clone();
    let cl2 = col.clone();
    let l1 = labels.clone();
    let l2 = labels.clone();
    let b1 = bags.clone();
    vec![
        case!("matmul", m, n, Domain::Any, |t, x| x.matmul(t.constant(r1.clone()))),
        case!("matmul_rhs", n, k, Domain::Any, |t, x| t.constant(o4.clone()).matmul(x)),
        case!("matmul_nt", m, n, Domain::Any, |t, x| x.matmul_t(t.constant(o.clone()), false, true)),
        case!("matmul_tn", n, k, Domain::Any, |t, x| x.matmul_t(t.constant(r2.clone()), true, false)),
        case!("add", m, n, Domain::Any, |t, x| x.add(t.constant(o2.clone()))),
        case!("sub", m, n, Domain::Any, |t, x| t.constant(o3.clone()).sub(x)),
        case!("mul_self", m, n, Domain::Any, |_t, x| x.mul(x)),
        case!("neg", m, n, Domain::Any, |_t, x| x.neg()),
        case!("scale", m, n, Domain::Any, |_t, x| x.scale(-2.5)),
        case!("add_scalar", m, n, Domain::Any, |_t, x| x.add_scalar(0.7)),
        case!("add_row", m, n, Domain::Any, |t, x| x.add_row(t.constant(rw.clone()))),
        case!("add_row_rhs", 1, n, Domain::Any, |t, x| t.constant(other.clone()).add_row(x)),
        case!("mul_col", m, n, Domain::Any, |t, x| x.mul_col(t.constant(cl.clone()))),
        case!("mul_col_rhs", m, 1, Domain::Any, |t, x| t.constant(gaussian_matrix(seed + 5, m, n)).mul_col(x)),
        case!("div_col", m, 1, Domain::Positive, |t, x| t.constant(gaussian_matrix(seed + 6, m, n)).div_col(x)),
        case!("broadcast_rows", 1, n, Domain::Any, |_t, x| x.broadcast_rows(m)),
        case!("broadcast_cols", m, 1, Domain::Any, |_t, x| x.broadcast_cols(n)),
        case!("expand", 1, 1, Domain::Any, |_t, x| x.expand(&[m, n])),
        case!("sum", m, n, Domain::Any, |_t, x| x.sum()),
        case!("mean", m, n, Domain::Any, |_t, x| x.mean()),
        case!("sum_rows", m, n, Domain::Any, |_t, x| x.sum_rows()),
        case!("sum_cols", m, n, Domain::Any, |_t, x| x.sum_cols()),
        case!("relu", m, n, Domain::OffKink, |_t, x| x.relu()),
        case!("tanh", m, n, Domain::Any, |_t, x| x.tanh()),
        case!("sigmoid", m, n, Domain::Any, |_t, x| x.sigmoid()),
        case!("silu", m, n, Domain::Any, |_t, x| x.silu()),
        case!("exp", m, n, Domain::Any, |_t, x| x.exp()),
        case!("log", m, n, Domain::Positive, |_t, x| x.log()),
        case!("sqrt", m, n, Domain::Positive, |_t, x| x.sqrt()),
        case!("recip", m, n, Domain::Positive, |_t, x| x.recip()),
        case!("square", m, n, Domain::Any, |_t, x| x.square()),
        case!("logsumexp", m, n, Domain::Any, |_t, x| x.logsumexp_cols()),
        case!("log_softmax", m, n, Domain::Any, |_t, x| x.log_softmax_rows()),
        case!("cross_entropy", m, n, Domain::Any, |_t, x| x.cross_entropy_rows(&l1)),
        case!("gather", m, n, Domain::Any, |_t, x| x.gather(&l2)),
        case!("concat_cols", m, n, Domain::Any, |t, x| x.concat_cols(t.constant(cl2.clone()))),
        case!("slice_cols", m, n, Domain::Any, |_t, x| x.slice_cols(1, 2)),
        case!("embed_bag", 4, n, Domain::Any, |_t, x| x.embed_bag(b1.clone())),
        case!("sq_norm_rows", m, n, Domain::Any, |_t, x| x.sq_norm_rows()),
        case!("l2norm_rows", m, n, Domain::Any, |_t, x| x.l2norm_rows()),
        case!("l2norm", m, n, Domain::Any, |_t, x| x.l2norm()),
        case!("normalize_rows", m, n, Domain::Any, |_t, x| x.normalize_rows()),
        case!("cosine_rows", m, n, Domain::Any, |t, x| x.cosine_rows(t.constant(gaussian_matrix(seed + 7, m, n)))),
        case!("cosine_self", m, n, Domain::Any, |t, x| {
            let c = t.constant(gaussian_matrix(seed + 8, m, n));
            x.cosine_rows(c.add(x)?)
        }),
    ]
}

/// Worst relative error of the attack loss gradient through the purifier.
pub fn pipeline_error(variant: Variant, mode: Mode, steps: usize, seed: u64) -> f64 {
    let (enc, bank) = toy_model(seed);
    let prior = toy_prior(&bank, seed + 1);
    let cfg = PurifyConfig {
        variant,
        steps,
        eta: 0.5,
        t_lo: 20,
        t_hi: 60,
        seed,
        ..PurifyConfig::default()
    };
    let p = Purifier::new(&cfg, &bank, Some(&prior)).unwrap();
    let pipe = Pipeline::new(&enc, &bank).with_purifier(p, mode);
    let x = toy_images(seed + 2, 2);
    let labels = [seed as usize % CLASSES, (seed as usize + 1) % CLASSES];
    let seeds = [seed, seed + 1];
    let f = hr(|t, x| pipe.loss_var(t, x, &labels, &seeds)?.sum());
    finite_diff_check(f, &x, H, None).unwrap().max_rel_error
}

