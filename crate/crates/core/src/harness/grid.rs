//! Grid search over λ_tgt and the two learning rates.

use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::param_space::Regime;
use crate::unlearning::Strategy;

use super::config::{ExperimentConfig, GridPoint};
use super::pipeline::{run_experiment, MetricsLog};

/// Seed-averaged summary of one grid point.
#[derive(Debug, Clone, PartialEq)]
pub struct PointScore {
    pub point: GridPoint,
    /// Mean first-FU-round target accuracy; lower is better.
    pub target_acc: f64,
    /// Mean global accuracy after the final round.
    pub final_global_acc: f64,
    pub feasible: bool,
}

/// The chosen point for one (strategy, regime, β) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub strategy: Strategy,
    pub regime: Regime,
    pub beta: f64,
    pub slack: f64,
    pub scores: Vec<PointScore>,
    pub best: usize,
}

impl Selection {
    pub fn best_point(&self) -> GridPoint {
        self.scores[self.best].point
    }
}

#[derive(Debug, Clone)]
pub struct GridOutcome {
    /// Every run, in expansion order.
    pub logs: Vec<MetricsLog>,
    pub selections: Vec<Selection>,
}

impl GridOutcome {
    /// Logs of the selected grid point in every cell.
    pub fn selected_logs(&self) -> Vec<&MetricsLog> {
        self.logs
            .iter()
            .filter(|log| {
                self.selections.iter().any(|s| {
                    let p = s.best_point();
                    s.strategy == log.meta.strategy
                        && s.regime == log.meta.regime
                        && s.beta == log.meta.beta
                        && p.lambda_tgt == log.meta.lambda_tgt
                        && p.lr_main == log.meta.lr_main
                        && p.lr_standalone == log.meta.lr_standalone
                })
            })
            .collect()
    }
}

/// Lowest mean target accuracy among points whose final global accuracy is
/// within `slack` of the best point's; ties go to the earliest point.
pub fn select(points: &[GridPoint], logs_per_point: &[Vec<&MetricsLog>], slack: f64) -> Result<(Vec<PointScore>, usize)> {
    if points.is_empty() {
        return Err(Error::Argument("empty grid".into()));
    }
    let mut scores = Vec::with_capacity(points.len());
    for (point, logs) in points.iter().zip(logs_per_point) {
        if logs.is_empty() {
            return Err(Error::Argument("grid point without runs".into()));
        }
        let mut target = 0.0;
        let mut global = 0.0;
        for log in logs {
            target += log
                .first_fu()
                .and_then(|r| r.target_test_accuracy)
                .ok_or_else(|| Error::Argument(format!("{} has no FU round to score", log.meta.run_id)))?;
            global += log.last().map(|r| r.global_test_accuracy).unwrap_or(0.0);
        }
        let n = logs.len() as f64;
        scores.push(PointScore {
            point: *point,
            target_acc: target / n,
            final_global_acc: global / n,
            feasible: false,
        });
    }
    let best_global = scores
        .iter()
        .map(|s| s.final_global_acc)
        .fold(f64::NEG_INFINITY, f64::max);
    for s in &mut scores {
        s.feasible = s.final_global_acc >= best_global - slack;
    }
    let mut best = None;
    for (i, s) in scores.iter().enumerate() {
        if s.feasible && best.is_none_or(|b: usize| s.target_acc < scores[b].target_acc) {
            best = Some(i);
        }
    }
    // the best-global point is always feasible
    Ok((scores, best.expect("at least one feasible point")))
}

/// Runs the Cartesian product of all axes (in parallel) and selects one grid
/// point per (strategy, regime, β). Histories go to `history_root/<run_id>`
/// when given.
pub fn grid_search(cfg: &ExperimentConfig, history_root: Option<&Path>) -> Result<GridOutcome> {
    let runs = cfg.expand()?;
    if cfg.phases.fu == 0 {
        return Err(Error::Config(vec![
            "phases.fu: grid search scores the first FU round, so fu must be positive".into(),
        ]));
    }
    let logs: Vec<MetricsLog> = runs
        .par_iter()
        .map(|run| {
            let dir = history_root.map(|root| root.join(run.run_id()));
            run_experiment(run, dir.as_deref())
        })
        .collect::<Result<_>>()?;

    let points = cfg.grid_points();
    let mut selections = Vec::new();
    for strategy in cfg.strategy.to_vec() {
        for regime in cfg.regime.to_vec() {
            for beta in cfg.beta.to_vec() {
                let per_point: Vec<Vec<&MetricsLog>> = points
                    .iter()
                    .map(|p| {
                        logs.iter()
                            .filter(|l| {
                                l.meta.strategy == strategy
                                    && l.meta.regime == regime
                                    && l.meta.beta == beta
                                    && l.meta.lambda_tgt == p.lambda_tgt
                                    && l.meta.lr_main == p.lr_main
                                    && l.meta.lr_standalone == p.lr_standalone
                            })
                            .collect()
                    })
                    .collect();
                let (scores, best) = select(&points, &per_point, cfg.grid_slack)?;
                selections.push(Selection {
                    strategy,
                    regime,
                    beta,
                    slack: cfg.grid_slack,
                    scores,
                    best,
                });
            }
        }
    }
    Ok(GridOutcome { logs, selections })
}
