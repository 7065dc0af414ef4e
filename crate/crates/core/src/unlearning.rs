//! Client-removal strategies: SATA, SAFA, train-from-scratch, continue-to-train
//! and FedEraser.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::federation::{AnchorMode, ClientUpdate, Federation, Phase, RoundReport, ServerState};
use crate::param_space::{combine, Owner, ParamVector, Regime, TaskVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// Subtract the target's standalone vector from the global model.
    Sata,
    /// Rebuild from θ₀ with the remaining clients' standalone vectors.
    Safa,
    /// Train from scratch without the target.
    Tfs,
    /// Continue to train without the target.
    Ctt,
    FedEraser,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::Sata,
        Strategy::Safa,
        Strategy::Tfs,
        Strategy::Ctt,
        Strategy::FedEraser,
    ];

    /// Produces the cleansed model in one communication round.
    pub fn is_single_round(self) -> bool {
        matches!(self, Strategy::Sata | Strategy::Safa)
    }

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Sata => "sata",
            Strategy::Safa => "safa",
            Strategy::Tfs => "tfs",
            Strategy::Ctt => "ctt",
            Strategy::FedEraser => "federaser",
        }
    }

    /// Display label used in plots.
    pub fn label(self) -> &'static str {
        match self {
            Strategy::Sata => "SATA",
            Strategy::Safa => "SAFA",
            Strategy::Tfs => "TFS",
            Strategy::Ctt => "CTT",
            Strategy::FedEraser => "FedEraser",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                Error::Argument(format!(
                    "unknown strategy {s:?}; expected one of sata, safa, tfs, ctt, federaser"
                ))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnlearnRequest {
    pub target_id: usize,
    pub lambda_tgt: f64,
    pub strategy: Strategy,
    pub calibration_epochs: usize,
}

/// `θ̂ ← θ̂ − λ_tgt·τ_tgt^sa`. The anchor is left where it was.
pub fn sata_unlearn(server: &mut ServerState, tau_sa: &TaskVector, lambda_tgt: f64) -> Result<ParamVector> {
    if !tau_sa.standalone {
        return Err(Error::Contract(
            "SATA requires a standalone task vector".into(),
        ));
    }
    if !lambda_tgt.is_finite() {
        return Err(Error::Argument(format!("lambda_tgt must be finite, got {lambda_tgt}")));
    }
    server.theta_hat = combine(&server.theta_hat, &[(-lambda_tgt, tau_sa)])?;
    Ok(server.theta_hat.clone())
}

/// `θ₀ + Σ_{i≠tgt} λ_i τ_i^sa` with `λ_i = n_i / Σ_{j≠tgt} n_j`. The target's
/// entry, if present, is never read.
pub fn safa_rebuild(
    theta_0: &ParamVector,
    standalone: &BTreeMap<usize, &TaskVector>,
    sample_counts: &BTreeMap<usize, usize>,
    target_id: usize,
) -> Result<ParamVector> {
    let remaining: Vec<(usize, &TaskVector)> = standalone
        .iter()
        .filter(|(&k, _)| k != target_id)
        .map(|(&k, &t)| (k, t))
        .collect();
    if remaining.is_empty() {
        return Err(Error::Degenerate("SAFA needs at least one remaining client".into()));
    }
    let mut counts = Vec::with_capacity(remaining.len());
    for (k, tau) in &remaining {
        if !tau.standalone {
            return Err(Error::Contract(format!(
                "client {k} supplied a non-standalone vector"
            )));
        }
        let n = *sample_counts
            .get(k)
            .ok_or_else(|| Error::Argument(format!("no sample count for client {k}")))?;
        counts.push(n);
    }
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(Error::Degenerate("remaining clients hold no samples".into()));
    }
    let terms: Vec<(f64, &TaskVector)> = remaining
        .iter()
        .zip(&counts)
        .map(|((_, tau), &n)| (n as f64 / total as f64, *tau))
        .collect();
    combine(theta_0, &terms)
}

/// Back to θ₀ with an empty history.
pub fn tfs_restart(server: &mut ServerState) {
    server.theta_hat = server.theta_0.clone();
    server.anchor = server.theta_0.clone();
    server.history.clear();
    server.lambda.clear();
    server.round_index = 0;
}

/// Stored versus recalibrated magnitude of one replayed update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormRecord {
    pub round: usize,
    pub client: usize,
    pub stored_norm: f64,
    pub recalibrated_norm: f64,
}

/// The reconstruction after each replayed round.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplaySnapshot {
    pub round: usize,
    pub theta: ParamVector,
    pub anchor: ParamVector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FedEraserOutcome {
    pub server: ServerState,
    pub snapshots: Vec<ReplaySnapshot>,
    pub norms: Vec<NormRecord>,
    /// `(round, client)` pairs dropped for a zero-norm calibration update.
    pub skipped: Vec<(usize, usize)>,
    pub calibration_rounds: usize,
}

/// Replays the stored history from θ₀ without `target_id`. For each stored
/// round, `calibrate(round, current_model, clients)` returns one calibration
/// update per client; the replayed update keeps the stored norm and takes the
/// calibration direction.
pub fn federaser_recover<F>(
    server: &ServerState,
    target_id: usize,
    anchor_mode: AnchorMode,
    mut calibrate: F,
) -> Result<FedEraserOutcome>
where
    F: FnMut(usize, &ParamVector, &[usize]) -> Result<BTreeMap<usize, ParamVector>>,
{
    for (i, round) in server.history.iter().enumerate() {
        if round.round != i {
            return Err(Error::InconsistentState(format!(
                "history position {i} holds round {}; a round is missing",
                round.round
            )));
        }
    }
    if server.round_index != server.history.len() {
        return Err(Error::InconsistentState(format!(
            "server is at round {} but only {} rounds are stored",
            server.round_index,
            server.history.len()
        )));
    }

    let mut rebuilt = ServerState::new(server.theta_0.clone());
    let mut snapshots = Vec::new();
    let mut norms = Vec::new();
    let mut skipped = Vec::new();
    let mut calibration_rounds = 0;
    for stored in &server.history {
        let clients: Vec<usize> = stored.entries.keys().copied().filter(|&k| k != target_id).collect();
        if clients.is_empty() {
            log::warn!("stored round {} has no non-target client; nothing to replay", stored.round);
            continue;
        }
        let base = rebuilt.theta_hat.clone();
        let calibration = calibrate(stored.round, &base, &clients)?;
        calibration_rounds += 1;

        let mut updates = Vec::with_capacity(clients.len());
        for &k in &clients {
            let entry = &stored.entries[&k];
            let cal = calibration.get(&k).ok_or_else(|| {
                Error::InconsistentState(format!(
                    "no calibration update from client {k} for round {}",
                    stored.round
                ))
            })?;
            let cal_norm = cal.norm();
            if cal_norm == 0.0 {
                log::warn!(
                    "client {k} produced a zero calibration update in round {}; skipped",
                    stored.round
                );
                skipped.push((stored.round, k));
                continue;
            }
            let stored_norm = entry.update.norm();
            let recalibrated = cal.scale(stored_norm / cal_norm)?;
            norms.push(NormRecord {
                round: stored.round,
                client: k,
                stored_norm,
                recalibrated_norm: recalibrated.norm(),
            });
            updates.push(ClientUpdate {
                client: k,
                tau: TaskVector::new(recalibrated, Owner::Client(k), Regime::Standard, false),
                sample_count: entry.sample_count,
            });
        }
        if updates.is_empty() {
            continue;
        }
        rebuilt.aggregate(&updates)?;
        rebuilt.anchor = match anchor_mode {
            AnchorMode::Round => base,
            AnchorMode::Pretrain => rebuilt.theta_0.clone(),
        };
        snapshots.push(ReplaySnapshot {
            round: stored.round,
            theta: rebuilt.theta_hat.clone(),
            anchor: rebuilt.anchor.clone(),
        });
    }
    Ok(FedEraserOutcome {
        server: rebuilt,
        snapshots,
        norms,
        skipped,
        calibration_rounds,
    })
}

/// What applying a strategy to a live federation produced.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StrategyOutcome {
    /// FU reports emitted by the strategy itself.
    pub reports: Vec<RoundReport>,
    pub norms: Vec<NormRecord>,
}

/// Applies `request` at the start of the FU phase. The target leaves the
/// participant set in every case. SATA and SAFA emit one report; FedEraser
/// emits one per replayed round; TFS and CTT emit none and rely on ordinary
/// FU rounds afterwards.
pub fn apply_strategy(fed: &mut Federation, request: &UnlearnRequest) -> Result<StrategyOutcome> {
    let target = request.target_id;
    if target >= fed.num_clients() {
        return Err(Error::Argument(format!("target {target} is not a registered client")));
    }
    if !request.lambda_tgt.is_finite() {
        return Err(Error::Argument(format!(
            "lambda_tgt must be finite, got {}",
            request.lambda_tgt
        )));
    }
    fed.participants.remove(&target);
    let mut outcome = StrategyOutcome::default();
    match request.strategy {
        Strategy::Sata => {
            let tau_sa = fed.clients[target].tau_standalone.clone();
            let fu = fed.comm.get_mut(Phase::Fu);
            fu.uploads += 1;
            fu.rounds += 1;
            sata_unlearn(&mut fed.server, &tau_sa, request.lambda_tgt)?;
            outcome.reports.push(fed.report(Phase::Fu)?);
        }
        Strategy::Safa => {
            let standalone: BTreeMap<usize, &TaskVector> = fed
                .participants
                .iter()
                .map(|&k| (k, &fed.clients[k].tau_standalone))
                .collect();
            let counts: BTreeMap<usize, usize> = fed
                .participants
                .iter()
                .map(|&k| (k, fed.clients[k].sample_count()))
                .collect();
            let theta = safa_rebuild(&fed.server.theta_0, &standalone, &counts, target)?;
            let fu = fed.comm.get_mut(Phase::Fu);
            fu.uploads += counts.len() as u64;
            fu.rounds += 1;
            let server = &mut fed.server;
            server.theta_hat = theta;
            server.anchor = server.theta_0.clone();
            server.history.clear();
            server.lambda.clear();
            outcome.reports.push(fed.report(Phase::Fu)?);
        }
        Strategy::Tfs => tfs_restart(&mut fed.server),
        Strategy::Ctt => {}
        Strategy::FedEraser => {
            if request.calibration_epochs == 0 {
                return Err(Error::Argument("calibration_epochs must be at least 1".into()));
            }
            let model = &fed.model;
            let settings = &fed.settings;
            let clients = &fed.clients;
            let theta_0 = &fed.server.theta_0;
            let mut steps_per_round = Vec::new();
            let recovered = federaser_recover(&fed.server, target, settings.anchor_mode, |round, base, ids| {
                let results: Vec<(usize, ParamVector, u64)> = ids
                    .par_iter()
                    .map(|&k| {
                        let (update, steps) = clients[k].calibration_update(
                            model,
                            base,
                            theta_0,
                            settings,
                            request.calibration_epochs,
                            round,
                        )?;
                        Ok((k, update, steps))
                    })
                    .collect::<Result<_>>()?;
                steps_per_round.push((ids.len() as u64, results.iter().map(|r| r.2).sum::<u64>()));
                Ok(results.into_iter().map(|(k, u, _)| (k, u)).collect())
            })?;
            let fu = fed.comm.get_mut(Phase::Fu);
            for (n, steps) in steps_per_round {
                fu.rounds += 1;
                fu.calibration_rounds += 1;
                fu.broadcasts += n;
                fu.uploads += n;
                fu.local_steps += steps;
            }
            fed.server = recovered.server;
            fed.persist_all_rounds()?;
            for snap in &recovered.snapshots {
                outcome
                    .reports
                    .push(fed.report_for(Phase::Fu, &snap.theta, &snap.anchor)?);
            }
            outcome.norms = recovered.norms;
        }
    }
    Ok(outcome)
}
