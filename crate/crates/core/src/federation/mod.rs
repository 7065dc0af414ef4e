//! Round-based FedAvg engine. Each client trains a main task vector on top of
//! the broadcast model and a standalone vector anchored at θ₀; only the main
//! vectors are aggregated.

pub mod client;
pub mod history;
pub mod server;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::param_space::{ParamVector, Regime};

pub use client::{local_train, pretrain, ClientState, Objective, ShuffleKey};
pub use history::HistoryStore;
pub use server::{ClientUpdate, HistoryEntry, HistoryRound, ServerState};

/// Where the NTK linearization point sits for training and evaluation of the
/// global model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnchorMode {
    /// θ_{r−1}: the model the latest aggregation started from.
    #[default]
    Round,
    /// Always θ₀.
    Pretrain,
}

impl fmt::Display for AnchorMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AnchorMode::Round => "round",
            AnchorMode::Pretrain => "pretrain",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub regime: Regime,
    pub anchor_mode: AnchorMode,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Phase {
    Fl,
    Fu,
    Pu,
}

impl Phase {
    pub const ALL: [Phase; 3] = [Phase::Fl, Phase::Fu, Phase::Pu];

    fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Fl => "FL",
            Phase::Fu => "FU",
            Phase::Pu => "PU",
        })
    }
}

impl FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "FL" => Ok(Phase::Fl),
            "FU" => Ok(Phase::Fu),
            "PU" => Ok(Phase::Pu),
            other => Err(Error::Argument(format!("unknown phase {other:?}"))),
        }
    }
}

/// Accuracies of the global model at the end of one round.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundReport {
    /// 1-based position in the whole run.
    pub round: usize,
    pub phase: Phase,
    pub global_test_accuracy: f64,
    /// `None` when the run has no target client.
    pub target_test_accuracy: Option<f64>,
    /// Pooled test splits of every non-target client.
    pub remaining_test_accuracy: f64,
    pub per_client_accuracy: BTreeMap<usize, f64>,
}

/// Client/server traffic and client compute, counted per phase.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CommStats {
    pub rounds: u64,
    /// Server → client model transfers.
    pub broadcasts: u64,
    /// Client → server vector transfers.
    pub uploads: u64,
    /// Client optimizer steps.
    pub local_steps: u64,
    pub calibration_rounds: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CommLedger {
    phases: [CommStats; 3],
}

impl CommLedger {
    pub fn get(&self, phase: Phase) -> &CommStats {
        &self.phases[phase.index()]
    }

    pub fn get_mut(&mut self, phase: Phase) -> &mut CommStats {
        &mut self.phases[phase.index()]
    }
}

/// Argmax accuracy of `theta` on `data`. In the NTK regime the network is
/// evaluated through its linearization at `anchor`.
pub fn evaluate(
    model: &Model,
    theta: &ParamVector,
    data: &Dataset,
    regime: Regime,
    anchor: &ParamVector,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Degenerate("cannot evaluate on an empty dataset".into()));
    }
    let batch = data.as_batch()?;
    let logits = match regime {
        Regime::Standard => model.forward(theta, &batch)?,
        Regime::Ntk => model.linearized_forward(anchor, &theta.sub(anchor)?, &batch)?,
    };
    Ok(Model::accuracy(&logits, batch.labels()))
}

/// Server, clients and bookkeeping for one simulated federation.
#[derive(Debug)]
pub struct Federation {
    pub model: Model,
    pub server: ServerState,
    /// Indexed by client id.
    pub clients: Vec<ClientState>,
    pub participants: BTreeSet<usize>,
    pub global_test: Dataset,
    pub target_id: Option<usize>,
    pub settings: TrainSettings,
    pub comm: CommLedger,
    remaining_test: Dataset,
    history_store: Option<HistoryStore>,
    rounds_reported: usize,
}

impl Federation {
    pub fn new(
        model: Model,
        theta_0: ParamVector,
        clients: Vec<ClientState>,
        global_test: Dataset,
        target_id: Option<usize>,
        settings: TrainSettings,
    ) -> Result<Self> {
        if clients.is_empty() {
            return Err(Error::Degenerate("a federation needs at least one client".into()));
        }
        if theta_0.len() != model.dim() {
            return Err(Error::dim(model.dim(), theta_0.len()));
        }
        for (i, c) in clients.iter().enumerate() {
            if c.id != i {
                return Err(Error::Argument(format!("client at position {i} has id {}", c.id)));
            }
            if c.tau_main.len() != model.dim() {
                return Err(Error::dim(model.dim(), c.tau_main.len()));
            }
        }
        if let Some(t) = target_id {
            if t >= clients.len() {
                return Err(Error::Argument(format!(
                    "target {t} is not one of the {} clients",
                    clients.len()
                )));
            }
        }
        let others: Vec<&Dataset> = clients
            .iter()
            .filter(|c| Some(c.id) != target_id)
            .map(|c| &c.test_data)
            .collect();
        let remaining_test = if others.is_empty() {
            global_test.clone()
        } else {
            Dataset::concat(&others, Split::Test)?
        };
        Ok(Self {
            participants: clients.iter().map(|c| c.id).collect(),
            server: ServerState::new(theta_0),
            model,
            clients,
            global_test,
            target_id,
            settings,
            comm: CommLedger::default(),
            remaining_test,
            history_store: None,
            rounds_reported: 0,
        })
    }

    /// Persists every subsequent aggregation under `dir`.
    pub fn persist_history(&mut self, dir: impl Into<PathBuf>) -> Result<()> {
        self.history_store = Some(HistoryStore::open(dir)?);
        Ok(())
    }

    pub fn num_clients(&self) -> usize {
        self.clients.len()
    }

    pub fn rounds_reported(&self) -> usize {
        self.rounds_reported
    }

    /// Broadcast, parallel local training of both vectors, aggregation, evaluation.
    pub fn run_round(&mut self, phase: Phase) -> Result<RoundReport> {
        if self.participants.is_empty() {
            return Err(Error::Degenerate("no participating clients".into()));
        }
        let base = self.server.theta_hat.clone();
        let theta_0 = self.server.theta_0.clone();
        let round = self.server.round_index;
        let model = &self.model;
        let settings = &self.settings;
        let participants = &self.participants;
        let steps: Vec<u64> = self
            .clients
            .par_iter_mut()
            .filter(|c| participants.contains(&c.id))
            .map(|c| -> Result<u64> {
                c.reset_main()?;
                let main = c.client_local_train(model, &base, &theta_0, settings, round)?;
                let standalone = c.client_standalone_train(model, &theta_0, settings, round)?;
                Ok(main + standalone)
            })
            .collect::<Result<_>>()?;

        let updates: Vec<ClientUpdate> = self
            .clients
            .iter()
            .filter(|c| participants.contains(&c.id))
            .map(|c| ClientUpdate {
                client: c.id,
                tau: c.tau_main.clone(),
                sample_count: c.sample_count(),
            })
            .collect();
        self.server.aggregate(&updates)?;
        self.server.anchor = match self.settings.anchor_mode {
            AnchorMode::Round => base,
            AnchorMode::Pretrain => theta_0,
        };
        self.persist_latest_round()?;

        let n = updates.len() as u64;
        let stats = self.comm.get_mut(phase);
        stats.rounds += 1;
        stats.broadcasts += n;
        stats.uploads += n;
        stats.local_steps += steps.iter().sum::<u64>();
        self.report(phase)
    }

    fn persist_latest_round(&mut self) -> Result<()> {
        if let (Some(store), Some(round)) = (self.history_store.as_mut(), self.server.history.last()) {
            store.write_round(round)?;
        }
        Ok(())
    }

    /// Appends the server's whole current history to the store, used after a
    /// reconstruction replaced it.
    pub(crate) fn persist_all_rounds(&mut self) -> Result<()> {
        if let Some(store) = self.history_store.as_mut() {
            for round in &self.server.history {
                store.write_round(round)?;
            }
        }
        Ok(())
    }

    /// Evaluates the current global model and emits the next report.
    pub fn report(&mut self, phase: Phase) -> Result<RoundReport> {
        let theta = self.server.theta_hat.clone();
        let anchor = self.server.anchor.clone();
        self.report_for(phase, &theta, &anchor)
    }

    /// Emits a report for an arbitrary parameter point, e.g. an intermediate
    /// reconstruction.
    pub fn report_for(&mut self, phase: Phase, theta: &ParamVector, anchor: &ParamVector) -> Result<RoundReport> {
        let regime = self.settings.regime;
        let model = &self.model;
        let per_client_accuracy = self
            .clients
            .par_iter()
            .map(|c| Ok((c.id, evaluate(model, theta, &c.test_data, regime, anchor)?)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        let global_test_accuracy = evaluate(model, theta, &self.global_test, regime, anchor)?;
        let remaining_test_accuracy = evaluate(model, theta, &self.remaining_test, regime, anchor)?;
        self.rounds_reported += 1;
        Ok(RoundReport {
            round: self.rounds_reported,
            phase,
            global_test_accuracy,
            target_test_accuracy: self.target_id.map(|t| per_client_accuracy[&t]),
            remaining_test_accuracy,
            per_client_accuracy,
        })
    }
}
