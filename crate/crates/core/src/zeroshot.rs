//! Zero-shot classification against template-averaged class embeddings.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::dualenc::DualEncoder;
use crate::error::{Error, Result};
use crate::tensor::{cosine, Scalar, Tape, Tensor, Var};
use crate::text::Templates;

#[derive(Clone, Debug, PartialEq)]
pub struct ClassBank<T> {
    pub class_names: Vec<String>,
    pub templates: Vec<String>,
    /// `K × d`, row `c` is the mean template embedding of class `c`
    pub class_emb: Tensor<T>,
    /// `1 × d`, mean embedding of the templates with the slot left empty
    pub blank: Tensor<T>,
}

/// Builds the class bank by averaging template expansions per class.
pub fn build_bank<T: Scalar, S: AsRef<str>>(
    encoder: &DualEncoder<T>,
    classes: &[S],
    templates: &Templates,
) -> Result<ClassBank<T>> {
    if classes.len() < 2 {
        return Err(Error::invalid(format!("need at least 2 classes, got {}", classes.len())));
    }
    let t = templates.as_slice();
    let mut rows = Vec::with_capacity(classes.len() + 1);
    for name in classes.iter().map(AsRef::as_ref).chain(std::iter::once("")) {
        let texts: Vec<String> = t.iter().map(|tpl| Templates::expand(tpl, name)).collect();
        let emb = encoder.encode_texts(&texts)?;
        let d = emb.cols();
        let mut mean = vec![T::zero(); d];
        for i in 0..emb.rows() {
            for (m, &v) in mean.iter_mut().zip(emb.row_slice(i)) {
                *m = *m + v;
            }
        }
        let inv = T::one() / T::c(t.len() as f64);
        rows.push(mean.into_iter().map(|v| v * inv).collect::<Vec<T>>());
    }
    let blank = rows.pop().expect("blank row");
    Ok(ClassBank {
        class_names: classes.iter().map(|c| c.as_ref().to_string()).collect(),
        templates: t.to_vec(),
        class_emb: Tensor::from_rows(&rows)?,
        blank: Tensor::row(&blank)?,
    })
}

impl<T: Scalar> ClassBank<T> {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn dim(&self) -> usize {
        self.class_emb.cols()
    }

    pub fn cast<U: Scalar>(&self) -> ClassBank<U> {
        ClassBank {
            class_names: self.class_names.clone(),
            templates: self.templates.clone(),
            class_emb: self.class_emb.cast(),
            blank: self.blank.cast(),
        }
    }

    /// Cosine scores of every row of `z` against every class, `m × K`.
    pub fn scores_var<'t>(&self, tape: &'t Tape<T>, z: Var<'t, T>) -> Result<Var<'t, T>> {
        let zc = tape.constant(self.class_emb.clone()).normalize_rows()?;
        z.normalize_rows()?.matmul_t(zc, false, true)
    }

    /// Class embeddings permuted so that new row `i` is old row `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> ClassBank<T> {
        ClassBank {
            class_names: perm.iter().map(|&i| self.class_names[i].clone()).collect(),
            templates: self.templates.clone(),
            class_emb: self.class_emb.select_rows(perm),
            blank: self.blank.clone(),
        }
    }
}

/// Index of the largest score; the lowest index wins ties.
pub fn argmax<T: PartialOrd + Copy>(scores: &[T]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Predicted label and cosine score vector for one embedding.
pub fn classify<T: Scalar>(z: &[T], bank: &ClassBank<T>) -> Result<(usize, Vec<T>)> {
    if z.len() != bank.dim() {
        return Err(Error::ShapeMismatch {
            op: "classify",
            lhs: vec![z.len()],
            rhs: vec![bank.dim()],
        });
    }
    let scores = (0..bank.num_classes())
        .map(|c| cosine(z, bank.class_emb.row_slice(c)))
        .collect::<Result<Vec<T>>>()?;
    Ok((argmax(&scores), scores))
}

/// Classifies every row of an `m × d` embedding matrix.
pub fn classify_batch<T: Scalar>(z: &Tensor<T>, bank: &ClassBank<T>) -> Result<Vec<(usize, Vec<T>)>> {
    (0..z.rows()).map(|i| classify(z.row_slice(i), bank)).collect()
}

/// `score[true] − max_{c ≠ true} score[c]`
pub fn margin<T: Scalar>(scores: &[T], label: usize) -> f64 {
    let other = scores
        .iter()
        .enumerate()
        .filter(|&(c, _)| c != label)
        .map(|(_, s)| s.f64())
        .fold(f64::NEG_INFINITY, f64::max);
    scores[label].f64() - other
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub sample_id: usize,
    #[serde(rename = "true")]
    pub true_label: usize,
    pub pred: usize,
    pub margin: f64,
    pub purify_steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub records: Vec<SampleRecord>,
}

/// Embedding-space preprocessing applied before classification.
pub trait Preprocess<T> {
    /// Transforms `m × d` embeddings; `ids` are the global sample ids.
    fn apply(&self, z: &Tensor<T>, ids: &[usize]) -> Result<Tensor<T>>;
    fn steps(&self) -> usize;
}

/// Accuracy of `encoder` + optional preprocessing on images with labels.
pub fn evaluate<T: Scalar>(
    encoder: &DualEncoder<T>,
    bank: &ClassBank<T>,
    images: &Tensor<T>,
    labels: &[usize],
    preprocess: Option<&dyn Preprocess<T>>,
) -> Result<Evaluation> {
    if labels.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    if images.rows() != labels.len() {
        return Err(Error::invalid(format!(
            "{} images for {} labels",
            images.rows(),
            labels.len()
        )));
    }
    let ids: Vec<usize> = (0..labels.len()).collect();
    let mut z = encoder.encode_images(images)?;
    if let Some(p) = preprocess {
        z = p.apply(&z, &ids)?;
    }
    let steps = preprocess.map_or(0, |p| p.steps());
    Ok(score_embeddings(&z, bank, labels, &ids, steps)?)
}

/// Classifies precomputed embeddings and builds per-sample records.
pub fn score_embeddings<T: Scalar>(
    z: &Tensor<T>,
    bank: &ClassBank<T>,
    labels: &[usize],
    ids: &[usize],
    purify_steps: usize,
) -> Result<Evaluation> {
    if labels.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let preds = classify_batch(z, bank)?;
    let records: Vec<SampleRecord> = preds
        .iter()
        .zip(labels)
        .zip(ids)
        .map(|(((pred, scores), &y), &id)| SampleRecord {
            sample_id: id,
            true_label: y,
            pred: *pred,
            margin: margin(scores, y),
            purify_steps,
        })
        .collect();
    let correct = records.iter().filter(|r| r.pred == r.true_label).count();
    Ok(Evaluation {
        accuracy: correct as f64 / records.len() as f64,
        records,
    })
}

pub fn write_records_csv<W: Write>(mut w: W, records: &[SampleRecord]) -> Result<()> {
    writeln!(w, "sample_id,true,pred,margin,purify_steps")?;
    for r in records {
        writeln!(
            w,
            "{},{},{},{:.6},{}",
            r.sample_id, r.true_label, r.pred, r.margin, r.purify_steps
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bank(rows: &[[f64; 2]]) -> ClassBank<f64> {
        ClassBank {
            class_names: (0..rows.len()).map(|i| format!("c{i}")).collect(),
            templates: vec!["{}".into()],
            class_emb: Tensor::from_rows(rows).unwrap(),
            blank: Tensor::row(&[1.0, 1.0]).unwrap(),
        }
    }

    #[test]
    fn classify_by_hand() {
        let b = bank(&[[1.0, 0.0], [0.0, 1.0]]);
        let (l, s) = classify(&[1.0, 0.0], &b).unwrap();
        assert_eq!((l, s), (0, vec![1.0, 0.0]));
        assert_eq!(classify(&[5.0, 0.0], &b).unwrap(), (0, vec![1.0, 0.0]));
        assert!(classify(&[0.0, 0.0], &b).is_err());
    }

    #[test]
    fn tie_goes_to_lower_index() {
        let b = bank(&[[1.0, 0.0], [0.0, 1.0]]);
        assert_eq!(classify(&[1.0, 1.0], &b).unwrap().0, 0);
        assert_eq!(argmax(&[0.5, 0.7, 0.7]), 1);
    }

    #[test]
    fn records_csv_header() {
        let mut out = Vec::new();
        write_records_csv(
            &mut out,
            &[SampleRecord {
                sample_id: 3,
                true_label: 1,
                pred: 1,
                margin: 0.25,
                purify_steps: 10,
            }],
        )
        .unwrap();
        let s = String::from_utf8(out).unwrap();
        assert_eq!(s, "sample_id,true,pred,margin,purify_steps\n3,1,1,0.250000,10\n");
    }
}
