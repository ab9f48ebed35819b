//! Leave-one-subject-out evaluation, confusion matrices and the unweighted
//! metric suite (accuracy, F1, UF1, UAR).

use std::collections::BTreeMap;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::{DatasetId, EmotionClass, SubjectKey};
use crate::flow::FlowCube;
use crate::ststnet::{self, ModelError, TrainConfig, CLASSES};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("nothing to evaluate: the dataset is empty")]
    EmptyDataset,
    #[error("truth and prediction lists differ in length ({truths} vs {predictions})")]
    LengthMismatch { truths: usize, predictions: usize },
    #[error("confusion matrix is empty")]
    EmptyMatrix,
    #[error("class index {0} out of range")]
    ClassIndex(usize),
    #[error("fold {ordinal} (held-out subject {subject}) failed: {source}")]
    Fold {
        ordinal: usize,
        subject: String,
        #[source]
        source: ModelError,
    },
    #[error("worker pool: {0}")]
    Pool(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fold {
    pub subject: SubjectKey,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// One fold per distinct subject, in sorted subject order. Sample ids are
/// indices into `subjects`.
pub fn make_loso_plan(subjects: &[SubjectKey]) -> Vec<Fold> {
    let mut groups: BTreeMap<&SubjectKey, Vec<usize>> = BTreeMap::new();
    for (i, s) in subjects.iter().enumerate() {
        groups.entry(s).or_default().push(i);
    }
    groups
        .into_iter()
        .map(|(subject, test)| {
            let train = subjects
                .iter()
                .enumerate()
                .filter(|(_, s)| *s != subject)
                .map(|(i, _)| i)
                .collect();
            Fold {
                subject: subject.clone(),
                train,
                test,
            }
        })
        .collect()
}

/// Square count matrix; rows are the true class, columns the prediction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            counts: vec![vec![0; classes]; classes],
        }
    }

    pub fn from_counts(counts: Vec<Vec<u64>>) -> Result<Self, EvalError> {
        let n = counts.len();
        if n == 0 || counts.iter().any(|r| r.len() != n) {
            return Err(EvalError::EmptyMatrix);
        }
        Ok(Self { counts })
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn record(&mut self, truth: usize, prediction: usize) -> Result<(), EvalError> {
        let n = self.classes();
        if truth >= n || prediction >= n {
            return Err(EvalError::ClassIndex(truth.max(prediction)));
        }
        self.counts[truth][prediction] += 1;
        Ok(())
    }

    pub fn accumulate(
        &mut self,
        truths: &[EmotionClass],
        predictions: &[EmotionClass],
    ) -> Result<(), EvalError> {
        if truths.len() != predictions.len() {
            return Err(EvalError::LengthMismatch {
                truths: truths.len(),
                predictions: predictions.len(),
            });
        }
        for (t, p) in truths.iter().zip(predictions) {
            self.record(t.index(), p.index())?;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    /// Row-normalised percentages rounded to two decimals; empty rows stay 0.
    pub fn row_percentages(&self) -> Vec<Vec<f64>> {
        self.counts
            .iter()
            .map(|row| {
                let s: u64 = row.iter().sum();
                row.iter()
                    .map(|&c| {
                        if s == 0 {
                            0.0
                        } else {
                            (c as f64 * 10000.0 / s as f64).round() / 100.0
                        }
                    })
                    .collect()
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub scope: String,
    pub samples: u64,
    pub accuracy: f64,
    pub f1: f64,
    pub uf1: f64,
    pub uar: f64,
    pub per_class: Vec<ClassMetrics>,
    /// Notes on classes whose precision or recall had a zero denominator.
    pub flags: Vec<String>,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

fn class_name(i: usize) -> String {
    EmotionClass::from_index(i).map_or_else(|| format!("class {i}"), |c| c.to_string())
}

pub fn metrics(cm: &ConfusionMatrix, scope: &str) -> Result<MetricReport, EvalError> {
    let total = cm.total();
    if total == 0 {
        return Err(EvalError::EmptyMatrix);
    }
    let n = cm.classes();
    let c = cm.counts();
    let mut per_class = Vec::with_capacity(n);
    let mut flags = Vec::new();
    for a in 0..n {
        let tp = c[a][a];
        let row: u64 = c[a].iter().sum();
        let col: u64 = (0..n).map(|r| c[r][a]).sum();
        let precision = ratio(tp, col).unwrap_or_else(|| {
            flags.push(format!(
                "{}: never predicted, precision taken as 0",
                class_name(a)
            ));
            0.0
        });
        let recall = ratio(tp, row).unwrap_or_else(|| {
            flags.push(format!(
                "{}: no true samples, recall taken as 0",
                class_name(a)
            ));
            0.0
        });
        per_class.push(ClassMetrics {
            precision,
            recall,
            f1: harmonic(precision, recall),
        });
    }
    let m = n as f64;
    let trace: u64 = (0..n).map(|a| c[a][a]).sum();
    let macro_p = per_class.iter().map(|x| x.precision).sum::<f64>() / m;
    let macro_r = per_class.iter().map(|x| x.recall).sum::<f64>() / m;
    Ok(MetricReport {
        scope: scope.to_string(),
        samples: total,
        accuracy: trace as f64 / total as f64,
        f1: harmonic(macro_p, macro_r),
        uf1: per_class.iter().map(|x| x.f1).sum::<f64>() / m,
        uar: macro_r,
        per_class,
        flags,
    })
}

// ---------------------------------------------------------------------------
// LOSO driver

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub fold: usize,
    pub dataset: DatasetId,
    pub subject: String,
    pub video: String,
    pub truth: EmotionClass,
    pub prediction: EmotionClass,
    pub probabilities: [f64; CLASSES],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldTiming {
    pub fold: usize,
    pub subject: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScopedMatrix {
    pub scope: String,
    pub counts: ConfusionMatrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LosoOutcome {
    /// "Full" first, then one report per database present, in database order.
    pub reports: Vec<MetricReport>,
    pub matrices: Vec<ScopedMatrix>,
    pub records: Vec<SampleRecord>,
    pub timings: Vec<FoldTiming>,
    pub folds: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LosoOptions {
    pub base_seed: u64,
    /// 0 means the rayon default.
    pub workers: usize,
    /// Only run the first `n` folds.
    pub fold_limit: Option<usize>,
}

pub const FULL_SCOPE: &str = "Full";

/// Trains one model per held-out subject and pools the held-out predictions.
/// Fold `i` trains with seed `base_seed + i`; folds run in parallel and are
/// reduced in fold order.
pub fn run_loso(
    cubes: &[FlowCube],
    train: &TrainConfig,
    opts: &LosoOptions,
) -> Result<LosoOutcome, EvalError> {
    if cubes.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    let subjects: Vec<SubjectKey> = cubes.iter().map(|c| c.key.subject_key()).collect();
    let mut plan = make_loso_plan(&subjects);
    if let Some(n) = opts.fold_limit {
        plan.truncate(n);
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.workers)
        .build()
        .map_err(|e| EvalError::Pool(e.to_string()))?;

    let results: Vec<Result<(Vec<SampleRecord>, FoldTiming), EvalError>> = pool.install(|| {
        plan.par_iter()
            .enumerate()
            .map(|(ordinal, fold)| {
                let start = Instant::now();
                let fail = |source| EvalError::Fold {
                    ordinal,
                    subject: fold.subject.to_string(),
                    source,
                };
                let cfg = TrainConfig {
                    seed: opts.base_seed.wrapping_add(ordinal as u64),
                    ..train.clone()
                };
                let train_set: Vec<&FlowCube> = fold.train.iter().map(|&i| &cubes[i]).collect();
                let model = ststnet::train_cubes(&train_set, &cfg).map_err(fail)?.params;
                let mut records = Vec::with_capacity(fold.test.len());
                for &i in &fold.test {
                    let cube = &cubes[i];
                    let probs = ststnet::forward(&model, &cube.data)
                        .map_err(fail)?
                        .probabilities;
                    records.push(SampleRecord {
                        fold: ordinal,
                        dataset: cube.key.dataset,
                        subject: cube.key.subject.clone(),
                        video: cube.key.video.clone(),
                        truth: cube.label,
                        prediction: ststnet::argmax_class(&probs),
                        probabilities: probs,
                    });
                }
                Ok((
                    records,
                    FoldTiming {
                        fold: ordinal,
                        subject: fold.subject.to_string(),
                        seconds: start.elapsed().as_secs_f64(),
                    },
                ))
            })
            .collect()
    });

    let mut records = Vec::new();
    let mut timings = Vec::new();
    for r in results {
        let (rec, t) = r?;
        records.extend(rec);
        timings.push(t);
    }

    let mut full = ConfusionMatrix::new(CLASSES);
    let mut per_db: BTreeMap<DatasetId, ConfusionMatrix> = BTreeMap::new();
    for r in &records {
        full.record(r.truth.index(), r.prediction.index())?;
        per_db
            .entry(r.dataset)
            .or_insert_with(|| ConfusionMatrix::new(CLASSES))
            .record(r.truth.index(), r.prediction.index())?;
    }
    let mut matrices = vec![ScopedMatrix {
        scope: FULL_SCOPE.to_string(),
        counts: full,
    }];
    matrices.extend(per_db.into_iter().map(|(db, counts)| ScopedMatrix {
        scope: db.to_string(),
        counts,
    }));
    let reports = matrices
        .iter()
        .map(|m| metrics(&m.counts, &m.scope))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(LosoOutcome {
        reports,
        matrices,
        records,
        timings,
        folds: plan.len(),
    })
}
