//! Training runs and their metrics.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{BatchSampler, Dataset};
use crate::error::{Error, Result};
use crate::network::{Network, Sample};
use crate::optim::Optimizer;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub iterations: usize,
    pub batch_size: usize,
    /// Evaluate every this many iterations; iteration 0 and the last
    /// iteration are always evaluated.
    pub eval_every: usize,
    pub shuffle: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub seed: u64,
    pub iteration: usize,
    pub wall_time_s: f64,
    pub train_loss_subset: f64,
    pub test_loss: Option<f64>,
    pub test_accuracy: Option<f64>,
    /// Mean CG iterations per solve over the steps since the previous row.
    pub cg_iters_mean: f64,
}

pub const METRICS_HEADER: &str = "seed,iteration,wall_time_s,train_loss_subset,test_loss,test_accuracy,cg_iters_mean";

fn opt_cell(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| format!("{x}"))
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{:.6},{},{},{},{}",
            r.seed,
            r.iteration,
            r.wall_time_s,
            r.train_loss_subset,
            opt_cell(r.test_loss),
            opt_cell(r.test_accuracy),
            r.cg_iters_mean
        );
    }
    s
}

/// Mean loss and accuracy (argmax of the output against the label).
pub fn evaluate(net: &Network, ds: &Dataset) -> Result<(f64, f64)> {
    let mut loss = 0.0;
    let mut correct = 0usize;
    for i in 0..ds.len() {
        let s = ds.sample(i);
        let out = net.predict(&s.x)?;
        loss += crate::layers::loss_forward_grad_hess(net.loss, &out, &s.y)?.value;
        let pred =
            out.data().iter().enumerate().fold((0, f64::NEG_INFINITY), |best, (k, &v)| if v > best.1 { (k, v) } else { best }).0;
        correct += usize::from(pred == ds.labels[i]);
    }
    let n = ds.len() as f64;
    Ok((loss / n, correct as f64 / n))
}

fn finite(v: f64, what: &str, iteration: usize) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(format!("{what} is {v} at iteration {iteration}")))
    }
}

/// Trains `net` in place and returns one metrics row per evaluation.
pub fn train_run(
    net: &mut Network,
    opt: &mut Optimizer,
    train: &Dataset,
    eval_train: &[Sample],
    test: Option<&Dataset>,
    settings: &TrainSettings,
    seed: u64,
) -> Result<Vec<MetricsRow>> {
    if settings.eval_every == 0 {
        return Err(Error::InvalidArgument("eval_every must be at least 1".into()));
    }
    let mut sampler = BatchSampler::new(train.len(), settings.batch_size, seed, settings.shuffle)?;
    let start = Instant::now();
    let mut rows = Vec::new();
    let mut cg_sum = 0.0;
    let mut cg_steps = 0usize;
    let record = |net: &Network, iteration: usize, cg: f64| -> Result<MetricsRow> {
        let train_loss = finite(net.mean_loss(eval_train)?, "train loss", iteration)?;
        let (test_loss, test_accuracy) = match test {
            Some(t) => {
                let (l, a) = evaluate(net, t)?;
                (Some(finite(l, "test loss", iteration)?), Some(a))
            }
            None => (None, None),
        };
        Ok(MetricsRow {
            seed,
            iteration,
            wall_time_s: start.elapsed().as_secs_f64(),
            train_loss_subset: train_loss,
            test_loss,
            test_accuracy,
            cg_iters_mean: cg,
        })
    };
    rows.push(record(net, 0, 0.0)?);
    for it in 1..=settings.iterations {
        let batch = train.samples(&sampler.next_batch());
        let stats = opt.step(net, &batch)?;
        finite(stats.loss, "batch loss", it)?;
        cg_sum += stats.cg_iters_mean;
        cg_steps += 1;
        if it % settings.eval_every == 0 || it == settings.iterations {
            rows.push(record(net, it, cg_sum / cg_steps as f64)?);
            cg_sum = 0.0;
            cg_steps = 0;
        }
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AggregateRow {
    pub iteration: usize,
    pub seeds: usize,
    pub wall_time_s_mean: f64,
    pub train_loss_subset_mean: f64,
    pub train_loss_subset_std: f64,
    pub test_loss_mean: Option<f64>,
    pub test_loss_std: Option<f64>,
    pub test_accuracy_mean: Option<f64>,
    pub test_accuracy_std: Option<f64>,
    pub cg_iters_mean: f64,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (m, 0.0);
    }
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, var.sqrt())
}

fn opt_mean_std(v: Vec<Option<f64>>) -> (Option<f64>, Option<f64>) {
    let vals: Option<Vec<f64>> = v.into_iter().collect();
    match vals {
        Some(vals) if !vals.is_empty() => {
            let (m, s) = mean_std(&vals);
            (Some(m), Some(s))
        }
        _ => (None, None),
    }
}

/// Mean and sample standard deviation across seeds at every iteration
/// evaluated by all runs.
pub fn aggregate(runs: &[Vec<MetricsRow>]) -> Vec<AggregateRow> {
    let Some(first) = runs.first() else { return Vec::new() };
    let mut out = Vec::new();
    for row in first {
        let at: Vec<&MetricsRow> = runs.iter().filter_map(|r| r.iter().find(|x| x.iteration == row.iteration)).collect();
        if at.len() != runs.len() {
            continue;
        }
        let col = |f: fn(&MetricsRow) -> f64| at.iter().map(|r| f(r)).collect::<Vec<_>>();
        let (tl, tls) = mean_std(&col(|r| r.train_loss_subset));
        let (te, tes) = opt_mean_std(at.iter().map(|r| r.test_loss).collect());
        let (ta, tas) = opt_mean_std(at.iter().map(|r| r.test_accuracy).collect());
        out.push(AggregateRow {
            iteration: row.iteration,
            seeds: at.len(),
            wall_time_s_mean: mean_std(&col(|r| r.wall_time_s)).0,
            train_loss_subset_mean: tl,
            train_loss_subset_std: tls,
            test_loss_mean: te,
            test_loss_std: tes,
            test_accuracy_mean: ta,
            test_accuracy_std: tas,
            cg_iters_mean: mean_std(&col(|r| r.cg_iters_mean)).0,
        });
    }
    out
}

pub fn aggregate_csv(rows: &[AggregateRow]) -> String {
    let mut s = String::from(
        "iteration,seeds,wall_time_s_mean,train_loss_subset_mean,train_loss_subset_std,test_loss_mean,test_loss_std,test_accuracy_mean,test_accuracy_std,cg_iters_mean\n",
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{:.6},{},{},{},{},{},{},{}",
            r.iteration,
            r.seeds,
            r.wall_time_s_mean,
            r.train_loss_subset_mean,
            r.train_loss_subset_std,
            opt_cell(r.test_loss_mean),
            opt_cell(r.test_loss_std),
            opt_cell(r.test_accuracy_mean),
            opt_cell(r.test_accuracy_std),
            r.cg_iters_mean
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic_classification;
    use crate::layers::LossKind;
    use crate::network::{LayerSpec, NetworkSpec};
    use crate::optim::SgdState;

    fn setup() -> (Network, Dataset) {
        let spec = NetworkSpec {
            input: vec![2],
            layers: vec![LayerSpec::Linear { out_features: 2 }, LayerSpec::Bias],
            loss: LossKind::SoftmaxCrossEntropy,
        };
        (Network::from_spec(&spec, 1).unwrap(), synthetic_classification(3, 20, 2, 2).unwrap())
    }

    fn sgd() -> Optimizer {
        Optimizer::Sgd { lr: 0.1, momentum: 0.0, state: SgdState::default() }
    }

    #[test]
    fn zero_iterations_yield_initial_row() {
        let (mut net, ds) = setup();
        let s = TrainSettings { iterations: 0, batch_size: 5, eval_every: 1, shuffle: true };
        let rows = train_run(&mut net, &mut sgd(), &ds, &ds.all_samples(), Some(&ds), &s, 0).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].iteration, 0);
        assert_eq!(metrics_csv(&rows).lines().count(), 2);
    }

    #[test]
    fn eval_schedule_includes_last_iteration() {
        let (mut net, ds) = setup();
        let s = TrainSettings { iterations: 7, batch_size: 5, eval_every: 3, shuffle: true };
        let rows = train_run(&mut net, &mut sgd(), &ds, &ds.all_samples(), None, &s, 0).unwrap();
        let its: Vec<usize> = rows.iter().map(|r| r.iteration).collect();
        assert_eq!(its, vec![0, 3, 6, 7]);
        assert!(rows.last().unwrap().train_loss_subset < rows[0].train_loss_subset);
        assert!(rows[0].test_loss.is_none());
    }

    #[test]
    fn runs_are_reproducible() {
        let s = TrainSettings { iterations: 5, batch_size: 4, eval_every: 1, shuffle: true };
        let run = || {
            let (mut net, ds) = setup();
            train_run(&mut net, &mut sgd(), &ds, &ds.all_samples(), Some(&ds), &s, 9).unwrap()
        };
        let (a, b) = (run(), run());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!((x.train_loss_subset, x.test_loss, x.test_accuracy), (y.train_loss_subset, y.test_loss, y.test_accuracy));
        }
    }

    #[test]
    fn aggregate_mean_and_std() {
        let row = |seed, loss| MetricsRow {
            seed,
            iteration: 0,
            wall_time_s: 1.0,
            train_loss_subset: loss,
            test_loss: None,
            test_accuracy: Some(0.5),
            cg_iters_mean: 2.0,
        };
        let agg = aggregate(&[vec![row(0, 1.0)], vec![row(1, 3.0)]]);
        assert_eq!(agg.len(), 1);
        assert_eq!(agg[0].train_loss_subset_mean, 2.0);
        assert!((agg[0].train_loss_subset_std - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(agg[0].test_loss_mean, None);
        assert_eq!(agg[0].test_accuracy_std, Some(0.0));
        assert!(aggregate_csv(&agg).lines().nth(1).unwrap().starts_with("0,2,"));
    }

    #[test]
    fn non_finite_training_aborts() {
        let spec = NetworkSpec { input: vec![2], layers: vec![LayerSpec::Linear { out_features: 2 }], loss: LossKind::Square };
        let mut net = Network::from_spec(&spec, 1).unwrap();
        let ds = synthetic_classification(3, 20, 2, 2).unwrap();
        let mut opt = Optimizer::Sgd { lr: 1e300, momentum: 0.0, state: SgdState::default() };
        let s = TrainSettings { iterations: 5, batch_size: 20, eval_every: 1, shuffle: false };
        let err = train_run(&mut net, &mut opt, &ds, &ds.all_samples(), None, &s, 0).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)), "{err}");
    }
}
