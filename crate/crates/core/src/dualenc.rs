//! Toy contrastive dual encoder.
//!
//! Image tower: `x − 0.5 → Linear → tanh → Linear` on flattened pixels.
//! Text tower: mean of token embeddings followed by a linear map.

use std::sync::Arc;

use rand::seq::SliceRandom;

use crate::checkpoint::{Checkpoint, TAG_ENCODER};
use crate::data::GlyphDataset;
use crate::error::{Error, Result};
use crate::nn::{init_linear, linear, ParamSet, Sgd};
use crate::rng::{derive_seed, gaussian_vec, rng};
use crate::tensor::{Scalar, Tape, Tensor, Var};
use crate::text::Vocab;

const IW1: usize = 0;
const IB1: usize = 1;
const IW2: usize = 2;
const IB2: usize = 3;
const TOK: usize = 4;
const TW: usize = 5;
const TB: usize = 6;

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub dim: usize,
    pub hidden: usize,
    pub token_dim: usize,
    pub tau: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            hidden: 256,
            token_dim: 64,
            tau: 0.07,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.hidden == 0 || self.token_dim == 0 {
            return Err(Error::config("encoder sizes must be positive"));
        }
        if !(self.tau > 0.0) {
            return Err(Error::config(format!("temperature {} must be positive", self.tau)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 0.05,
            momentum: 0.9,
            batch: 128,
            seed: 17,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DualEncoder<T> {
    pub cfg: EncoderConfig,
    image_shape: [usize; 3],
    vocab: Vocab,
    params: ParamSet<T>,
}

/// Symmetric contrastive loss over cosine logits scaled by `1/tau`.
/// Row `n` of `zi` is paired with row `n` of `zt`.
pub fn clip_loss<'t, T: Scalar>(zi: Var<'t, T>, zt: Var<'t, T>, tau: f64) -> Result<Var<'t, T>> {
    if !(tau > 0.0) {
        return Err(Error::invalid(format!("temperature {tau} must be positive")));
    }
    let n = zi.rows();
    if n == 0 {
        return Err(Error::Empty("contrastive batch"));
    }
    if zt.shape() != zi.shape() {
        return Err(Error::ShapeMismatch {
            op: "clip_loss",
            lhs: zi.shape(),
            rhs: zt.shape(),
        });
    }
    let a = zi.normalize_rows()?;
    let b = zt.normalize_rows()?;
    let diag: Vec<usize> = (0..n).collect();
    let logits_i = a.matmul_t(b, false, true)?.scale(1.0 / tau)?;
    let logits_t = b.matmul_t(a, false, true)?.scale(1.0 / tau)?;
    let li = logits_i.cross_entropy_rows(&diag)?.sum()?;
    let lt = logits_t.cross_entropy_rows(&diag)?.sum()?;
    li.add(lt)?.scale(0.5 / n as f64)
}

impl<T: Scalar> DualEncoder<T> {
    pub fn new(cfg: EncoderConfig, image_shape: [usize; 3], seed: u64) -> Result<Self> {
        cfg.validate()?;
        let vocab = Vocab::standard();
        let p_in: usize = image_shape.iter().product();
        let mut r = rng(derive_seed(seed, "encoder-init"));
        let mut params = ParamSet::default();
        init_linear(&mut params, &mut r, "image.l1", p_in, cfg.hidden);
        init_linear(&mut params, &mut r, "image.l2", cfg.hidden, cfg.dim);
        let emb: Vec<T> = gaussian_vec(&mut r, vocab.len() * cfg.token_dim);
        params.push(
            "text.embed",
            Tensor::new(vec![vocab.len(), cfg.token_dim], emb)?,
        );
        init_linear(&mut params, &mut r, "text.proj", cfg.token_dim, cfg.dim);
        Ok(Self {
            cfg,
            image_shape,
            vocab,
            params,
        })
    }

    pub fn dim(&self) -> usize {
        self.cfg.dim
    }

    pub fn image_shape(&self) -> [usize; 3] {
        self.image_shape
    }

    pub fn image_dim(&self) -> usize {
        self.image_shape.iter().product()
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn cast<U: Scalar>(&self) -> DualEncoder<U> {
        DualEncoder {
            cfg: self.cfg.clone(),
            image_shape: self.image_shape,
            vocab: self.vocab.clone(),
            params: self.params.cast(),
        }
    }

    fn image_tower<'t>(&self, p: &[Var<'t, T>], x: Var<'t, T>) -> Result<Var<'t, T>> {
        let h = linear(x.add_scalar(-0.5)?, p[IW1], p[IB1])?.tanh()?;
        linear(h, p[IW2], p[IB2])
    }

    fn text_tower<'t>(&self, p: &[Var<'t, T>], bags: Arc<Vec<Vec<usize>>>) -> Result<Var<'t, T>> {
        let pooled = p[TOK].embed_bag(bags)?;
        linear(pooled, p[TW], p[TB])
    }

    fn check_images(&self, x: &[usize]) -> Result<()> {
        let p = self.image_dim();
        let ok = match x.len() {
            2 => x[1] == p,
            4 => x[1..] == self.image_shape,
            _ => false,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::ShapeMismatch {
                op: "encode_image",
                lhs: x.to_vec(),
                rhs: vec![0, self.image_shape[0], self.image_shape[1], self.image_shape[2]],
            })
        }
    }

    /// Image embeddings for `x` (`m × P` rows) on an existing tape; the
    /// parameters enter as constants so gradients flow only to `x`.
    pub fn encode_image_var<'t>(&self, tape: &'t Tape<T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        self.check_images(&x.shape())?;
        let p = self.params.bind(tape, false);
        self.image_tower(&p, x)
    }

    /// Embeddings of a batch of images, `N×C×H×W` or `N×P`, as `N × d`.
    pub fn encode_images(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_images(x.shape())?;
        let tape = Tape::new();
        let xv = tape.constant(x.clone().as_matrix());
        let z = self.encode_image_var(&tape, xv)?;
        Ok((*z.value()).clone())
    }

    pub fn encode_text(&self, text: &str) -> Result<Tensor<T>> {
        self.encode_texts(&[text.to_string()])
    }

    /// Text embeddings, one row per input string.
    pub fn encode_texts<S: AsRef<str>>(&self, texts: &[S]) -> Result<Tensor<T>> {
        if texts.is_empty() {
            return Err(Error::Empty("text batch"));
        }
        let bags = texts
            .iter()
            .map(|t| self.vocab.encode(t.as_ref()))
            .collect::<Result<Vec<_>>>()?;
        let tape = Tape::new();
        let p = self.params.bind(&tape, false);
        let z = self.text_tower(&p, Arc::new(bags))?;
        Ok((*z.value()).clone())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new(TAG_ENCODER, self.cfg.dim);
        let [ch, h, w] = self.image_shape;
        c.meta.insert("image_shape".into(), format!("{ch}x{h}x{w}"));
        c.meta.insert("hidden".into(), self.cfg.hidden.to_string());
        c.meta.insert("token_dim".into(), self.cfg.token_dim.to_string());
        c.meta.insert("tau".into(), format!("{:?}", self.cfg.tau));
        c.meta.insert("vocab".into(), self.vocab.tokens().join(" "));
        c.layers = self.params.to_layers();
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        c.expect_tag(TAG_ENCODER)?;
        let parse = |k: &str| -> Result<usize> {
            c.meta(k)?
                .parse()
                .map_err(|_| Error::Format(format!("bad meta `{k}`")))
        };
        let dims: Vec<usize> = c
            .meta("image_shape")?
            .split('x')
            .map(|s| s.parse().map_err(|_| Error::Format("bad image_shape".into())))
            .collect::<Result<_>>()?;
        let shape: [usize; 3] = dims
            .try_into()
            .map_err(|_| Error::Format("image_shape needs 3 dims".into()))?;
        let cfg = EncoderConfig {
            dim: c.dim as usize,
            hidden: parse("hidden")?,
            token_dim: parse("token_dim")?,
            tau: c
                .meta("tau")?
                .parse()
                .map_err(|_| Error::Format("bad tau".into()))?,
        };
        let mut enc = Self::new(cfg, shape, 0)?;
        if c.meta("vocab")? != enc.vocab.tokens().join(" ") {
            return Err(Error::Format("vocabulary differs from this build".into()));
        }
        enc.params.load_from(c)?;
        Ok(enc)
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub encoder: DualEncoder<f32>,
    /// mean contrastive loss per epoch
    pub loss_curve: Vec<f64>,
}

/// Trains a fresh encoder on `ds` with momentum SGD; fully determined by
/// the seed.
pub fn train(ds: &GlyphDataset, enc_cfg: &EncoderConfig, cfg: &TrainConfig) -> Result<TrainOutcome> {
    if ds.is_empty() {
        return Err(Error::Empty("training dataset"));
    }
    if cfg.batch == 0 {
        return Err(Error::config("batch size must be positive"));
    }
    let mut enc = DualEncoder::<f32>::new(enc_cfg.clone(), ds.image_shape(), cfg.seed)?;
    let images = ds.flat_images();
    let bags: Vec<Vec<usize>> = ds
        .captions
        .iter()
        .map(|c| enc.vocab.encode(c))
        .collect::<Result<_>>()?;
    let mut opt = Sgd::new(&enc.params, cfg.lr, cfg.momentum);
    let mut order: Vec<usize> = (0..ds.len()).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng(derive_seed(cfg.seed, &format!("epoch-{epoch}"))));
        let (mut total, mut count) = (0.0, 0usize);
        for (b, idx) in order.chunks(cfg.batch).enumerate() {
            let tape = Tape::new();
            let p = enc.params.bind(&tape, true);
            let x = tape.constant(images.select_rows(idx));
            let batch_bags = Arc::new(idx.iter().map(|&i| bags[i].clone()).collect());
            let step = || -> Result<_> {
                let zi = enc.image_tower(&p, x)?;
                let zt = enc.text_tower(&p, batch_bags)?;
                let loss = clip_loss(zi, zt, enc_cfg.tau)?;
                let grads = tape.gradients(loss, &p)?;
                Ok((loss.item() as f64, grads))
            };
            let (loss, grads) = step().map_err(|e| {
                Error::numerical(format!("encoder training epoch {epoch} batch {b}"), e.to_string())
            })?;
            if !loss.is_finite() {
                return Err(Error::numerical(
                    format!("encoder training epoch {epoch} batch {b}"),
                    "non-finite loss",
                ));
            }
            opt.step(&mut enc.params, &grads)?;
            total += loss;
            count += 1;
        }
        curve.push(total / count as f64);
    }
    Ok(TrainOutcome {
        encoder: enc,
        loss_curve: curve,
    })
}
