//! `metrics.csv` (one row per round) and `runs.csv` (one row per run).

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::federation::{Phase, RoundReport};
use crate::param_space::Regime;
use crate::unlearning::Strategy;

use super::grid::Selection;
use super::pipeline::MetricsLog;

const FIXED_COLUMNS: [&str; 10] = [
    "run_id",
    "strategy",
    "regime",
    "beta",
    "seed",
    "round",
    "phase",
    "global_acc",
    "target_acc",
    "remaining_acc",
];

fn fmt_acc(v: f64) -> String {
    format!("{v:.12}")
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Parse {
            path: path.to_path_buf(),
            row: 0,
            column: 0,
            message: format!("{other:?}"),
        },
    }
}

/// Writes every round of every log. Client columns run up to the largest
/// client count among the logs; absent values are left empty.
pub fn emit_csv(logs: &[&MetricsLog], path: &Path) -> Result<()> {
    let clients = logs.iter().map(|l| l.meta.num_clients).max().unwrap_or(0);
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut header: Vec<String> = FIXED_COLUMNS.iter().map(|s| s.to_string()).collect();
    header.extend((0..clients).map(|k| format!("client_{k}")));
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for log in logs {
        let m = &log.meta;
        for r in &log.reports {
            let mut row = vec![
                m.run_id.clone(),
                m.strategy.to_string(),
                m.regime.to_string(),
                m.beta.to_string(),
                m.seed.to_string(),
                r.round.to_string(),
                r.phase.to_string(),
                fmt_acc(r.global_test_accuracy),
                r.target_test_accuracy.map(fmt_acc).unwrap_or_default(),
                fmt_acc(r.remaining_test_accuracy),
            ];
            row.extend((0..clients).map(|k| r.per_client_accuracy.get(&k).map(|&a| fmt_acc(a)).unwrap_or_default()));
            w.write_record(&row).map_err(|e| csv_err(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Per-round rows regrouped by run.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedRun {
    pub run_id: String,
    pub strategy: Strategy,
    pub regime: Regime,
    pub beta: f64,
    pub seed: u64,
    pub reports: Vec<RoundReport>,
}

/// Reads a file written by [`emit_csv`]. Runs keep their order of first appearance.
pub fn read_metrics_csv(path: &Path) -> Result<Vec<ParsedRun>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let header = r.headers().map_err(|e| csv_err(path, e))?.clone();
    for (i, name) in FIXED_COLUMNS.iter().enumerate() {
        if header.get(i) != Some(name) {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                row: 1,
                column: i + 1,
                message: format!("expected column {name:?}"),
            });
        }
    }
    let clients: Vec<usize> = header
        .iter()
        .skip(FIXED_COLUMNS.len())
        .enumerate()
        .map(|(i, h)| {
            h.strip_prefix("client_")
                .and_then(|k| k.parse().ok())
                .ok_or_else(|| Error::Parse {
                    path: path.to_path_buf(),
                    row: 1,
                    column: FIXED_COLUMNS.len() + i + 1,
                    message: format!("unexpected column {h:?}"),
                })
        })
        .collect::<Result<_>>()?;

    let mut runs: Vec<ParsedRun> = Vec::new();
    let mut index: BTreeMap<String, usize> = BTreeMap::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let row = i + 2;
        let field = |c: usize| rec.get(c).unwrap_or("");
        let bad = |c: usize, what: &str| Error::Parse {
            path: path.to_path_buf(),
            row,
            column: c + 1,
            message: format!("invalid {what} {:?}", field(c)),
        };
        let num = |c: usize| field(c).parse::<f64>().map_err(|_| bad(c, "number"));
        let opt_num = |c: usize| {
            if field(c).is_empty() {
                Ok(None)
            } else {
                num(c).map(Some)
            }
        };
        let run_id = field(0).to_string();
        let slot = match index.get(&run_id) {
            Some(&s) => s,
            None => {
                runs.push(ParsedRun {
                    run_id: run_id.clone(),
                    strategy: field(1).parse().map_err(|_| bad(1, "strategy"))?,
                    regime: match field(2) {
                        "standard" => Regime::Standard,
                        "ntk" => Regime::Ntk,
                        _ => return Err(bad(2, "regime")),
                    },
                    beta: num(3)?,
                    seed: field(4).parse().map_err(|_| bad(4, "seed"))?,
                    reports: Vec::new(),
                });
                index.insert(run_id, runs.len() - 1);
                runs.len() - 1
            }
        };
        let mut per_client = BTreeMap::new();
        for (j, &k) in clients.iter().enumerate() {
            if let Some(a) = opt_num(FIXED_COLUMNS.len() + j)? {
                per_client.insert(k, a);
            }
        }
        runs[slot].reports.push(RoundReport {
            round: field(5).parse().map_err(|_| bad(5, "round"))?,
            phase: field(6).parse::<Phase>().map_err(|_| bad(6, "phase"))?,
            global_test_accuracy: num(7)?,
            target_test_accuracy: opt_num(8)?,
            remaining_test_accuracy: num(9)?,
            per_client_accuracy: per_client,
        });
    }
    Ok(runs)
}

/// Run metadata and communication counters, one row per run.
pub fn emit_runs_csv(logs: &[&MetricsLog], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut header = vec![
        "run_id", "config_hash", "strategy", "regime", "anchor", "beta", "seed", "lambda_tgt", "lr_main",
        "lr_standalone",
    ]
    .into_iter()
    .map(String::from)
    .collect::<Vec<_>>();
    for phase in Phase::ALL {
        for counter in ["rounds", "broadcasts", "uploads", "local_steps", "calibration_rounds"] {
            header.push(format!("{}_{counter}", phase.to_string().to_lowercase()));
        }
    }
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for log in logs {
        let m = &log.meta;
        let mut row = vec![
            m.run_id.clone(),
            m.config_hash.clone(),
            m.strategy.to_string(),
            m.regime.to_string(),
            m.anchor.to_string(),
            m.beta.to_string(),
            m.seed.to_string(),
            m.lambda_tgt.to_string(),
            m.lr_main.to_string(),
            m.lr_standalone.to_string(),
        ];
        for phase in Phase::ALL {
            let c = m.comm.get(phase);
            for v in [c.rounds, c.broadcasts, c.uploads, c.local_steps, c.calibration_rounds] {
                row.push(v.to_string());
            }
        }
        w.write_record(&row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Grid scores with the selection criterion spelled out per cell.
pub fn emit_selection_csv(selections: &[Selection], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record([
        "strategy",
        "regime",
        "beta",
        "lambda_tgt",
        "lr_main",
        "lr_standalone",
        "mean_first_fu_target_acc",
        "mean_final_global_acc",
        "feasible",
        "selected",
        "criterion",
    ])
    .map_err(|e| csv_err(path, e))?;
    for s in selections {
        let criterion = format!(
            "min first-FU target accuracy s.t. final global accuracy >= best - {}",
            s.slack
        );
        for (i, p) in s.scores.iter().enumerate() {
            w.write_record([
                s.strategy.to_string(),
                s.regime.to_string(),
                s.beta.to_string(),
                p.point.lambda_tgt.to_string(),
                p.point.lr_main.to_string(),
                p.point.lr_standalone.to_string(),
                fmt_acc(p.target_acc),
                fmt_acc(p.final_global_acc),
                p.feasible.to_string(),
                (i == s.best).to_string(),
                criterion.clone(),
            ])
            .map_err(|e| csv_err(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}
