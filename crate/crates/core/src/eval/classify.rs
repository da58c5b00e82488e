use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::matrix::{dot, Matrix};
use crate::projector::{ProjectorError, ProjectorStack, TokenBundle, OUTPUT_NORM_FLOOR};

/// Prompt bundles per class, in class-index order.
#[derive(Debug, Clone)]
pub struct ClassifierSpec {
    pub classes: Vec<(String, Vec<TokenBundle>)>,
}

impl ClassifierSpec {
    pub fn new(classes: Vec<(String, Vec<TokenBundle>)>) -> Result<Self, EvalError> {
        if classes.len() < 2 {
            return Err(EvalError::TooFewClasses(classes.len()));
        }
        if let Some((id, _)) = classes.iter().find(|(_, p)| p.is_empty()) {
            return Err(EvalError::EmptyClass(id.clone()));
        }
        Ok(Self { classes })
    }

    pub fn class_index(&self, label: &str) -> Option<usize> {
        self.classes.iter().position(|(id, _)| id == label)
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }
}

/// Normalized mean of the projected prompts of one class.
pub fn text_prototype(
    prompts: &[TokenBundle],
    stack: &ProjectorStack,
) -> Result<Vec<f64>, EvalError> {
    let mut mean = vec![0.0; stack.dims.d_out];
    for p in prompts {
        for (m, v) in mean.iter_mut().zip(stack.project_text(p)?) {
            *m += v;
        }
    }
    if !crate::matrix::normalize_in_place(&mut mean, OUTPUT_NORM_FLOOR) {
        return Err(ProjectorError::ZeroOutput.into());
    }
    Ok(mean)
}

/// One unit prototype per class, stacked as rows.
pub fn class_prototypes(
    spec: &ClassifierSpec,
    stack: &ProjectorStack,
) -> Result<Matrix, EvalError> {
    let rows: Result<Vec<Vec<f64>>, _> = spec
        .classes
        .iter()
        .map(|(_, p)| text_prototype(p, stack))
        .collect();
    let rows = rows?;
    let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
    Ok(Matrix::from_rows(&refs))
}

/// Index of the largest score; the first wins ties.
pub fn argmax(scores: impl IntoIterator<Item = f64>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, s) in scores.into_iter().enumerate() {
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((i, s));
        }
    }
    best.map(|(i, _)| i)
}

pub fn predict(embedding: &[f64], prototypes: &Matrix) -> usize {
    argmax((0..prototypes.rows()).map(|c| dot(embedding, prototypes.row(c)))).unwrap_or(0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAccuracy {
    pub class_id: String,
    pub total: usize,
    pub correct: usize,
    /// `None` when the class has no evaluation images.
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub top1: f64,
    pub total: usize,
    pub correct: usize,
    pub per_class: Vec<ClassAccuracy>,
    pub predictions: Vec<usize>,
}

pub fn zero_shot_classify(
    images: &[TokenBundle],
    labels: &[&str],
    spec: &ClassifierSpec,
    stack: &ProjectorStack,
) -> Result<ClassificationReport, EvalError> {
    if images.len() != labels.len() {
        return Err(EvalError::LengthMismatch {
            what: "labels",
            expected: images.len(),
            actual: labels.len(),
        });
    }
    let truth: Result<Vec<usize>, EvalError> = labels
        .iter()
        .map(|l| {
            spec.class_index(l)
                .ok_or_else(|| EvalError::UnknownLabel(String::from(*l)))
        })
        .collect();
    let truth = truth?;
    let protos = class_prototypes(spec, stack)?;
    let predictions: Result<Vec<usize>, EvalError> = images
        .iter()
        .map(|img| Ok(predict(&stack.project_vision(img)?, &protos)))
        .collect();
    let predictions = predictions?;
    Ok(score_predictions(spec, &truth, predictions))
}

pub fn score_predictions(
    spec: &ClassifierSpec,
    truth: &[usize],
    predictions: Vec<usize>,
) -> ClassificationReport {
    let mut total = vec![0usize; spec.len()];
    let mut correct = vec![0usize; spec.len()];
    for (&t, &p) in truth.iter().zip(&predictions) {
        total[t] += 1;
        if t == p {
            correct[t] += 1;
        }
    }
    let n: usize = total.iter().sum();
    let c: usize = correct.iter().sum();
    ClassificationReport {
        top1: if n == 0 { 0.0 } else { c as f64 / n as f64 },
        total: n,
        correct: c,
        per_class: spec
            .classes
            .iter()
            .enumerate()
            .map(|(i, (id, _))| ClassAccuracy {
                class_id: id.clone(),
                total: total[i],
                correct: correct[i],
                accuracy: (total[i] > 0).then(|| correct[i] as f64 / total[i] as f64),
            })
            .collect(),
        predictions,
    }
}
