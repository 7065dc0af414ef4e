//! Server state and FedAvg aggregation.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::param_space::{combine, Owner, ParamVector, Regime, TaskVector};

/// One stored client contribution.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryEntry {
    pub update: ParamVector,
    pub sample_count: usize,
    pub lambda: f64,
}

/// Everything aggregated in one round, keyed by client id.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryRound {
    pub round: usize,
    pub entries: BTreeMap<usize, HistoryEntry>,
}

/// A client's main-vector upload for one round.
#[derive(Debug, Clone)]
pub struct ClientUpdate {
    pub client: usize,
    pub tau: TaskVector,
    pub sample_count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServerState {
    pub theta_0: ParamVector,
    pub theta_hat: ParamVector,
    /// Linearization point used to evaluate `theta_hat` in the NTK regime.
    pub anchor: ParamVector,
    pub round_index: usize,
    pub history: Vec<HistoryRound>,
    /// FedAvg weights of the latest aggregation.
    pub lambda: BTreeMap<usize, f64>,
}

impl ServerState {
    pub fn new(theta_0: ParamVector) -> Self {
        Self {
            theta_hat: theta_0.clone(),
            anchor: theta_0.clone(),
            theta_0,
            round_index: 0,
            history: Vec::new(),
            lambda: BTreeMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.theta_0.len()
    }

    /// FedAvg: `θ̂ ← θ̂ + Σ_k λ_k τ_k` with `λ_k = n_k / Σ n`, summed in client-id
    /// order. The round is appended to the history.
    pub fn aggregate(&mut self, updates: &[ClientUpdate]) -> Result<&ParamVector> {
        if updates.is_empty() {
            return Err(Error::Degenerate("no client updates to aggregate".into()));
        }
        let mut sorted: Vec<&ClientUpdate> = updates.iter().collect();
        sorted.sort_by_key(|u| u.client);
        if sorted.windows(2).any(|w| w[0].client == w[1].client) {
            return Err(Error::Argument("duplicate client in one aggregation".into()));
        }
        for u in &sorted {
            if u.tau.standalone {
                return Err(Error::Contract(format!(
                    "standalone vector of client {} offered for aggregation",
                    u.client
                )));
            }
            if u.tau.len() != self.dim() {
                return Err(Error::dim(self.dim(), u.tau.len()));
            }
        }
        let total: usize = sorted.iter().map(|u| u.sample_count).sum();
        if total == 0 {
            return Err(Error::Degenerate("aggregation over zero samples".into()));
        }
        let lambdas: Vec<f64> = sorted
            .iter()
            .map(|u| u.sample_count as f64 / total as f64)
            .collect();
        let terms: Vec<(f64, &TaskVector)> = lambdas.iter().copied().zip(sorted.iter().map(|u| &u.tau)).collect();
        self.theta_hat = combine(&self.theta_hat, &terms)?;

        let entries = sorted
            .iter()
            .zip(&lambdas)
            .map(|(u, &lambda)| {
                (
                    u.client,
                    HistoryEntry {
                        update: u.tau.delta().clone(),
                        sample_count: u.sample_count,
                        lambda,
                    },
                )
            })
            .collect();
        self.history.push(HistoryRound {
            round: self.round_index,
            entries,
        });
        self.lambda = sorted.iter().map(|u| u.client).zip(lambdas).collect();
        self.round_index += 1;
        Ok(&self.theta_hat)
    }

    /// `θ₀ + Σ_rounds Σ_k λ_k τ_k`, replayed round by round from the stored history.
    pub fn reconstruct_from_history(&self) -> Result<ParamVector> {
        let mut theta = self.theta_0.clone();
        for round in &self.history {
            let vectors: Vec<(f64, TaskVector)> = round
                .entries
                .iter()
                .map(|(&k, e)| {
                    (
                        e.lambda,
                        TaskVector::new(e.update.clone(), Owner::Client(k), Regime::Standard, false),
                    )
                })
                .collect();
            let terms: Vec<(f64, &TaskVector)> = vectors.iter().map(|(l, t)| (*l, t)).collect();
            theta = combine(&theta, &terms)?;
        }
        Ok(theta)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn update(client: usize, values: &[f64], n: usize) -> ClientUpdate {
        ClientUpdate {
            client,
            tau: TaskVector::new(
                ParamVector::new(values.to_vec()).unwrap(),
                Owner::Client(client),
                Regime::Standard,
                false,
            ),
            sample_count: n,
        }
    }

    #[test]
    fn zero_updates_leave_model_unchanged() {
        let theta = ParamVector::new(vec![0.25, -1.0]).unwrap();
        let mut s = ServerState::new(theta.clone());
        s.aggregate(&[update(0, &[0.0, 0.0], 3), update(1, &[0.0, 0.0], 5)])
            .unwrap();
        assert_eq!(s.theta_hat, theta);
        assert_eq!(s.round_index, 1);
        assert_eq!(s.history.len(), 1);
    }

    #[test]
    fn identical_updates_are_a_fixed_point() {
        let theta = ParamVector::new(vec![1.0, 2.0]).unwrap();
        let mut s = ServerState::new(theta);
        s.aggregate(&[
            update(2, &[0.5, -0.25], 4),
            update(0, &[0.5, -0.25], 4),
            update(1, &[0.5, -0.25], 4),
        ])
        .unwrap();
        // 1/3 weights are inexact; the fixed point holds up to rounding
        for (got, want) in s.theta_hat.iter().zip([1.5, 1.75]) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn standalone_vectors_are_refused() {
        let mut s = ServerState::new(ParamVector::zeros(2));
        let mut u = update(0, &[1.0, 1.0], 1);
        u.tau.standalone = true;
        assert!(matches!(s.aggregate(&[u]), Err(Error::Contract(_))));
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let mut s = ServerState::new(ParamVector::zeros(2));
        assert!(matches!(
            s.aggregate(&[update(0, &[1.0], 1)]),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn history_replay_reproduces_model() {
        let mut s = ServerState::new(ParamVector::new(vec![0.1, 0.2, 0.3]).unwrap());
        s.aggregate(&[update(0, &[0.3, 0.1, -0.2], 2), update(1, &[-0.7, 0.4, 0.9], 5)])
            .unwrap();
        s.aggregate(&[update(1, &[0.01, 0.02, 0.03], 5), update(0, &[1.0, -1.0, 0.5], 2)])
            .unwrap();
        assert_eq!(s.reconstruct_from_history().unwrap(), s.theta_hat);
    }
}
