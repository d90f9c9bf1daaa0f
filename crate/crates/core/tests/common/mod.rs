#![allow(dead_code)]

pub mod cases;

use clipure_core::data::class_name;
use clipure_core::diffprior::{train_prior, DiffPrior, PriorConfig};
use clipure_core::dualenc::{DualEncoder, EncoderConfig};
use clipure_core::rng::{gaussian_vec, rng};
use clipure_core::text::Templates;
use clipure_core::zeroshot::{build_bank, ClassBank};
use clipure_core::Tensor;

pub const SHAPE: [usize; 3] = [3, 4, 4];
pub const CLASSES: usize = 4;

/// Small untrained encoder and its class bank in double precision.
pub fn toy_model(seed: u64) -> (DualEncoder<f64>, ClassBank<f64>) {
    let cfg = EncoderConfig {
        dim: 8,
        hidden: 16,
        token_dim: 8,
        tau: 0.07,
    };
    let enc = DualEncoder::<f64>::new(cfg, SHAPE, seed).unwrap();
    let names: Vec<String> = (0..CLASSES).map(class_name).collect();
    let bank = build_bank(&enc, &names, &Templates::fast()).unwrap();
    (enc, bank)
}

/// Briefly trained latent prior conditioned on `bank.blank`.
pub fn toy_prior(bank: &ClassBank<f64>, seed: u64) -> DiffPrior<f64> {
    let d = bank.dim();
    let corpus: Vec<f32> = gaussian_vec(&mut rng(seed), 64 * d);
    let cfg = PriorConfig {
        hidden: 16,
        temb_dim: 8,
        timesteps: 100,
        epochs: 1,
        batch: 32,
        seed,
        ..PriorConfig::default()
    };
    let cond = bank.blank.cast::<f32>();
    train_prior(&Tensor::new(vec![64, d], corpus).unwrap(), Some(cond), &cfg)
        .unwrap()
        .prior
        .cast()
}

pub fn gaussian_matrix(seed: u64, rows: usize, cols: usize) -> Tensor<f64> {
    Tensor::new(vec![rows, cols], gaussian_vec(&mut rng(seed), rows * cols)).unwrap()
}

/// Images with pixels strictly inside `[0, 1]`.
pub fn toy_images(seed: u64, rows: usize) -> Tensor<f64> {
    let p: usize = SHAPE.iter().product();
    let g = gaussian_matrix(seed, rows, p);
    g.map(|v| 0.5 + 0.2 * v.tanh())
}
