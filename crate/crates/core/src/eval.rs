//! Classification metrics and the few-shot experiment table.

use std::fmt::Write as _;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{FamError, Result};
use crate::model::{Model, ParameterSet};
use crate::personalization::{fine_tune, personalize, predict_labels, PersonalizationConfig};
use crate::rng::{derive_seed, rng_for, tag};
use crate::sparsity::PruneMask;
use crate::tasks::{sample_episode_for_classes, ClientDataset};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Averaging {
    /// Per-class scores weighted by class support.
    #[default]
    Weighted,
    /// Unweighted mean over classes.
    Macro,
}

impl Averaging {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "weighted" => Ok(Averaging::Weighted),
            "macro" => Ok(Averaging::Macro),
            other => Err(FamError::Config(format!("unknown averaging `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    pub n_examples: usize,
}

/// Accuracy plus averaged precision, recall and F1. A class nobody predicted
/// has precision 0.
pub fn compute_metrics(
    predictions: &[usize],
    labels: &[usize],
    n_classes: usize,
    averaging: Averaging,
) -> Result<MetricsReport> {
    if predictions.is_empty() {
        return Err(FamError::Input("no predictions to score".into()));
    }
    if predictions.len() != labels.len() {
        return Err(FamError::Input(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if let Some(bad) = predictions.iter().chain(labels).find(|&&c| c >= n_classes) {
        return Err(FamError::Input(format!("class {bad} outside 0..{n_classes}")));
    }
    let mut confusion = vec![vec![0usize; n_classes]; n_classes];
    for (&p, &l) in predictions.iter().zip(labels) {
        confusion[l][p] += 1;
    }
    let n = labels.len();
    let correct: usize = (0..n_classes).map(|c| confusion[c][c]).sum();
    let (mut precision, mut recall, mut f1) = (0.0, 0.0, 0.0);
    for c in 0..n_classes {
        let tp = confusion[c][c] as f64;
        let support: usize = confusion[c].iter().sum();
        let predicted: usize = confusion.iter().map(|row| row[c]).sum();
        let p = if predicted == 0 { 0.0 } else { tp / predicted as f64 };
        let r = if support == 0 { 0.0 } else { tp / support as f64 };
        let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
        let w = match averaging {
            Averaging::Weighted => support as f64 / n as f64,
            Averaging::Macro => 1.0 / n_classes as f64,
        };
        precision += w * p;
        recall += w * r;
        f1 += w * f;
    }
    Ok(MetricsReport {
        accuracy: correct as f64 / n as f64,
        precision,
        recall,
        f1,
        confusion,
        n_examples: n,
    })
}

/// How a global model is adapted before scoring.
#[derive(Clone, Copy, Debug)]
pub enum Adapter<'a> {
    /// Train only the positions the mask pruned.
    Grow(&'a PruneMask),
    /// Train every parameter.
    FineTune,
    /// Score the global model as is in every row.
    None,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub trials: usize,
    pub seed: u64,
    pub way: usize,
    /// Held-out test examples per class, shared by all rows of a trial.
    pub test_per_class: usize,
    pub alpha: f64,
    pub epochs: usize,
    pub episode_counts: Vec<usize>,
    pub shots: Vec<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            trials: 20,
            seed: 0,
            way: 2,
            test_per_class: 40,
            alpha: 0.2,
            epochs: 5,
            episode_counts: vec![1, 5],
            shots: vec![1, 5],
        }
    }
}

/// One table row; metric columns are means over trials, `*_std` sample
/// standard deviations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub row: usize,
    /// 0 for the unadapted row.
    pub episodes: usize,
    pub way: usize,
    pub shot: usize,
    pub trials: usize,
    pub accuracy: f64,
    pub accuracy_std: f64,
    pub precision: f64,
    pub precision_std: f64,
    pub recall: f64,
    pub recall_std: f64,
    pub f1: f64,
    pub f1_std: f64,
}

impl TableRow {
    pub fn label(&self) -> String {
        if self.episodes == 0 {
            format!("{} way - 0 shot", self.way)
        } else {
            format!("#{} episode, {} way - {} shot", self.episodes, self.way, self.shot)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentTable {
    pub rows: Vec<TableRow>,
    /// `per_trial[row][trial]`, for paired comparisons between rows.
    pub per_trial: Vec<Vec<MetricsReport>>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl ExperimentTable {
    /// Number of trials in which row `b` scores a strictly higher accuracy
    /// than row `a` (rows are 0-based).
    pub fn strictly_better(&self, a: usize, b: usize) -> usize {
        self.per_trial[a]
            .iter()
            .zip(&self.per_trial[b])
            .filter(|(x, y)| y.accuracy > x.accuracy)
            .count()
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r)?;
        }
        let bytes = w.into_inner().map_err(|e| FamError::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    pub fn parse_csv(text: &str) -> Result<Vec<TableRow>> {
        csv::Reader::from_reader(text.as_bytes())
            .deserialize()
            .map(|r| r.map_err(FamError::from))
            .collect()
    }

    /// Fixed-width text with metrics in percent.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(
            s,
            "{:>3}  {:<28} {:>15} {:>15} {:>15} {:>15}",
            "#", "adaptation", "accuracy", "precision", "recall", "f1"
        )
        .unwrap();
        for r in &self.rows {
            let cell = |m: f64, sd: f64| format!("{:.2} ± {:.2}", 100.0 * m, 100.0 * sd);
            writeln!(
                s,
                "{:>3}  {:<28} {:>15} {:>15} {:>15} {:>15}",
                r.row,
                r.label(),
                cell(r.accuracy, r.accuracy_std),
                cell(r.precision, r.precision_std),
                cell(r.recall, r.recall_std),
                cell(r.f1, r.f1_std)
            )
            .unwrap();
        }
        s
    }
}

/// Scores the unadapted model and every (episodes, shot) cell over
/// `cfg.trials` trials.
///
/// Trial `t` uses `clients[t % clients.len()]`: the last `test_per_class`
/// examples of each class form the test set, adaptation episodes are drawn
/// from the rest. All rows of a trial share one class choice and one test
/// set, and a row with fewer episodes uses a prefix of the episodes of a row
/// with more.
pub fn run_experiment_table(
    model: &Model,
    params: &ParameterSet,
    adapter: Adapter,
    clients: &[ClientDataset],
    cfg: &ExperimentConfig,
) -> Result<ExperimentTable> {
    if cfg.trials == 0 || clients.is_empty() {
        return Err(FamError::Config("experiment needs at least one trial and one client".into()));
    }
    if !matches!(adapter, Adapter::None) && model.spec().num_classes != cfg.way {
        return Err(FamError::Config(format!(
            "adapting a {}-output model to {}-way episodes",
            model.spec().num_classes,
            cfg.way
        )));
    }
    let cells: Vec<(usize, usize)> = cfg
        .episode_counts
        .iter()
        .flat_map(|&e| cfg.shots.iter().map(move |&k| (e, k)))
        .collect();
    let max_episodes = cfg.episode_counts.iter().copied().max().unwrap_or(0);

    let trial = |t: usize| -> Result<Vec<MetricsReport>> {
        let ds = &clients[t % clients.len()];
        let seed = derive_seed(cfg.seed, &[tag::TRIAL, t as u64]);
        if ds.num_classes() < cfg.way {
            return Err(FamError::Episode(format!(
                "client {} has {} classes, {}-way evaluation needs {}",
                ds.client_id,
                ds.num_classes(),
                cfg.way,
                cfg.way
            )));
        }
        let (adapt_pool, test_pool) = ds.split(cfg.test_per_class)?;
        let mut classes = index::sample(&mut rng_for(seed, &[0]), ds.num_classes(), cfg.way).into_vec();
        classes.sort_unstable();
        let (test, _) = test_pool.sample_batch(&classes, cfg.test_per_class, seed)?;
        let score = |p: &ParameterSet| -> Result<MetricsReport> {
            let preds = predict_labels(model, p, &test.inputs, &classes)?;
            compute_metrics(&preds, &test.labels, cfg.way, Averaging::Weighted)
        };
        let mut out = vec![score(params)?];
        for &(episodes, shot) in &cells {
            let all = (0..max_episodes)
                .map(|e| {
                    let s = derive_seed(seed, &[1, shot as u64, e as u64]);
                    sample_episode_for_classes(&adapt_pool, &classes, shot, 1, s)
                })
                .collect::<Result<Vec<_>>>()?;
            let eps = &all[..episodes];
            let pcfg = PersonalizationConfig {
                alpha: cfg.alpha,
                epochs: cfg.epochs,
                episodes,
                shot,
            };
            let adapted = match adapter {
                Adapter::Grow(mask) => personalize(model, params, mask, eps, &pcfg)?,
                Adapter::FineTune => fine_tune(model, params, eps, &pcfg)?,
                Adapter::None => params.clone(),
            };
            out.push(score(&adapted)?);
        }
        Ok(out)
    };

    let trial = &trial;
    let results: Vec<Result<Vec<MetricsReport>>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..cfg.trials).map(|t| s.spawn(move || trial(t))).collect();
        handles.into_iter().map(|h| h.join().expect("trial thread panicked")).collect()
    });
    let by_trial = results.into_iter().collect::<Result<Vec<_>>>()?;

    let n_rows = 1 + cells.len();
    let per_trial: Vec<Vec<MetricsReport>> = (0..n_rows)
        .map(|r| by_trial.iter().map(|t| t[r].clone()).collect())
        .collect();
    let rows = per_trial
        .iter()
        .enumerate()
        .map(|(i, reports)| {
            let col = |f: fn(&MetricsReport) -> f64| mean_std(&reports.iter().map(f).collect::<Vec<_>>());
            let (episodes, shot) = if i == 0 { (0, 0) } else { cells[i - 1] };
            let (accuracy, accuracy_std) = col(|m| m.accuracy);
            let (precision, precision_std) = col(|m| m.precision);
            let (recall, recall_std) = col(|m| m.recall);
            let (f1, f1_std) = col(|m| m.f1);
            TableRow {
                row: i + 1,
                episodes,
                way: cfg.way,
                shot,
                trials: cfg.trials,
                accuracy,
                accuracy_std,
                precision,
                precision_std,
                recall,
                recall_std,
                f1,
                f1_std,
            }
        })
        .collect();
    Ok(ExperimentTable { rows, per_trial })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn round2(x: f64) -> f64 {
        (x * 10000.0).round() / 100.0
    }

    #[test]
    fn perfect_predictions() {
        let l = [0, 1, 2, 1];
        let m = compute_metrics(&l, &l, 3, Averaging::Weighted).unwrap();
        assert_eq!((m.accuracy, m.precision, m.recall, m.f1), (1.0, 1.0, 1.0, 1.0));
    }

    #[test]
    fn collapsed_five_way() {
        let labels: Vec<usize> = (0..100).map(|i| i % 5).collect();
        let m = compute_metrics(&[0; 100], &labels, 5, Averaging::Weighted).unwrap();
        assert_eq!(
            [round2(m.accuracy), round2(m.precision), round2(m.recall), round2(m.f1)],
            [20.0, 4.0, 20.0, 6.67]
        );
    }

    #[test]
    fn hand_confusion() {
        // rows true, columns predicted: [[3,1],[2,4]]
        let labels = [0, 0, 0, 0, 1, 1, 1, 1, 1, 1];
        let preds = [0, 0, 0, 1, 0, 0, 1, 1, 1, 1];
        let m = compute_metrics(&preds, &labels, 2, Averaging::Weighted).unwrap();
        assert_eq!(m.confusion, vec![vec![3, 1], vec![2, 4]]);
        assert!((m.accuracy - 0.7).abs() < 1e-12);
        // class 0: p = 3/5, r = 3/4; class 1: p = 4/5, r = 4/6
        let p = 0.4 * 0.6 + 0.6 * 0.8;
        let f0 = 2.0 * 0.6 * 0.75 / 1.35;
        let f1 = 2.0 * 0.8 * (4.0 / 6.0) / (0.8 + 4.0 / 6.0);
        assert!((m.precision - p).abs() < 1e-12);
        assert!((m.recall - 0.7).abs() < 1e-12);
        assert!((m.f1 - (0.4 * f0 + 0.6 * f1)).abs() < 1e-12);
        let mac = compute_metrics(&preds, &labels, 2, Averaging::Macro).unwrap();
        assert!((mac.precision - 0.7).abs() < 1e-12);
    }

    #[test]
    fn input_errors() {
        assert!(compute_metrics(&[], &[], 2, Averaging::Weighted).is_err());
        assert!(compute_metrics(&[0], &[0, 1], 2, Averaging::Weighted).is_err());
        assert!(compute_metrics(&[2], &[0], 2, Averaging::Weighted).is_err());
    }
}
