//! Client-side local training of the main and standalone task vectors.

use rand::seq::SliceRandom;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::optim::{AdamWConfig, AdamWState};
use crate::param_space::{Owner, ParamVector, Regime, TaskVector};
use crate::rng::{self, stream};

use super::{AnchorMode, TrainSettings};

/// What a local optimizer is minimizing.
#[derive(Debug, Clone, Copy)]
pub enum Objective<'a> {
    /// Cross-entropy of the network at `base + τ`.
    Standard { base: &'a ParamVector },
    /// Cross-entropy of `f(x; anchor) + J(x; anchor)·(base − anchor + τ)`.
    Linearized {
        anchor: &'a ParamVector,
        base: &'a ParamVector,
    },
}

impl<'a> Objective<'a> {
    /// Objective for a vector trained on top of `base` in `regime`, with the
    /// linearization point picked by `mode`.
    pub fn for_regime(
        regime: Regime,
        mode: AnchorMode,
        base: &'a ParamVector,
        theta_0: &'a ParamVector,
    ) -> Self {
        match (regime, mode) {
            (Regime::Standard, _) => Objective::Standard { base },
            (Regime::Ntk, AnchorMode::Round) => Objective::Linearized { anchor: base, base },
            (Regime::Ntk, AnchorMode::Pretrain) => Objective::Linearized {
                anchor: theta_0,
                base,
            },
        }
    }

    fn loss_and_grad(&self, model: &Model, tau: &[f64], data: &Dataset, idx: &[usize]) -> Result<(f64, ParamVector)> {
        let batch = data.batch(idx)?;
        match *self {
            Objective::Standard { base } => {
                let theta: Vec<f64> = base.iter().zip(tau).map(|(b, t)| b + t).collect();
                model.loss_and_grad(&ParamVector::new(theta)?, &batch)
            }
            Objective::Linearized { anchor, base } => {
                let tangent: Vec<f64> = base
                    .iter()
                    .zip(anchor.iter())
                    .zip(tau)
                    .map(|((b, a), t)| (b - a) + t)
                    .collect();
                model.linearized_loss_and_grad(anchor, &ParamVector::new(tangent)?, &batch)
            }
        }
    }
}

/// Identifies the shuffle stream of a training run: one permutation per
/// `(client, round, epoch)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShuffleKey {
    pub seed: u64,
    pub client: u64,
    pub round: u64,
}

/// Runs `epochs` passes of mini-batch AdamW on `tau`. Returns the number of
/// optimizer steps taken.
#[allow(clippy::too_many_arguments)]
pub fn local_train(
    model: &Model,
    data: &Dataset,
    objective: Objective<'_>,
    tau: &mut [f64],
    opt: &mut AdamWState,
    epochs: usize,
    batch_size: usize,
    key: ShuffleKey,
) -> Result<u64> {
    if data.is_empty() {
        return Err(Error::Degenerate("cannot train on an empty dataset".into()));
    }
    if batch_size == 0 {
        return Err(Error::Argument("batch_size must be positive".into()));
    }
    if tau.len() != model.dim() {
        return Err(Error::dim(model.dim(), tau.len()));
    }
    let mut steps = 0;
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..epochs {
        order.sort_unstable();
        let mut rng = rng::rng_for(key.seed, &[stream::SHUFFLE, key.client, key.round, epoch as u64]);
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch_size) {
            let (_, grad) = objective.loss_and_grad(model, tau, data, chunk)?;
            opt.step(tau, grad.as_slice())?;
            steps += 1;
        }
    }
    Ok(steps)
}

/// One participant: its private data plus the two independently trained task vectors.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: usize,
    pub train_data: Dataset,
    pub test_data: Dataset,
    /// Contribution to the global model, reset at the start of every round.
    pub tau_main: TaskVector,
    /// Isolated vector anchored at θ₀; never aggregated.
    pub tau_standalone: TaskVector,
    pub opt_main: AdamWState,
    pub opt_standalone: AdamWState,
    pub regime: Regime,
}

impl ClientState {
    pub fn new(
        id: usize,
        train_data: Dataset,
        test_data: Dataset,
        d: usize,
        regime: Regime,
        opt_main: AdamWConfig,
        opt_standalone: AdamWConfig,
    ) -> Result<Self> {
        Ok(Self {
            id,
            train_data,
            test_data,
            tau_main: TaskVector::zeros(d, Owner::Client(id), regime, false),
            tau_standalone: TaskVector::zeros(d, Owner::Client(id), regime, true),
            opt_main: AdamWState::new(d, opt_main)?,
            opt_standalone: AdamWState::new(d, opt_standalone)?,
            regime,
        })
    }

    pub fn sample_count(&self) -> usize {
        self.train_data.len()
    }

    /// Zeroes the main vector and its optimizer moments for a new round.
    pub fn reset_main(&mut self) -> Result<()> {
        let d = self.tau_main.len();
        self.tau_main = TaskVector::zeros(d, Owner::Client(self.id), self.regime, false);
        self.opt_main = AdamWState::new(d, self.opt_main.config)?;
        Ok(())
    }

    /// Trains `tau_main` on top of the broadcast `base`. Returns optimizer steps.
    pub fn client_local_train(
        &mut self,
        model: &Model,
        base: &ParamVector,
        theta_0: &ParamVector,
        settings: &TrainSettings,
        round: usize,
    ) -> Result<u64> {
        let objective = Objective::for_regime(self.regime, settings.anchor_mode, base, theta_0);
        let mut tau = self.tau_main.delta().as_slice().to_vec();
        let result = local_train(
            model,
            &self.train_data,
            objective,
            &mut tau,
            &mut self.opt_main,
            settings.epochs,
            settings.batch_size,
            ShuffleKey {
                seed: settings.seed,
                client: self.id as u64,
                round: round as u64,
            },
        );
        self.tau_main.set_delta(ParamVector::from_computed(tau)?);
        result
    }

    /// Continues `tau_standalone`, always anchored at θ₀ and blind to the global model.
    pub fn client_standalone_train(
        &mut self,
        model: &Model,
        theta_0: &ParamVector,
        settings: &TrainSettings,
        round: usize,
    ) -> Result<u64> {
        let objective = match self.regime {
            Regime::Standard => Objective::Standard { base: theta_0 },
            Regime::Ntk => Objective::Linearized {
                anchor: theta_0,
                base: theta_0,
            },
        };
        let mut tau = self.tau_standalone.delta().as_slice().to_vec();
        let result = local_train(
            model,
            &self.train_data,
            objective,
            &mut tau,
            &mut self.opt_standalone,
            settings.epochs,
            settings.batch_size,
            ShuffleKey {
                seed: settings.seed,
                client: self.id as u64,
                round: round as u64,
            },
        );
        self.tau_standalone.set_delta(ParamVector::from_computed(tau)?);
        result
    }

    /// A throwaway update from `base` with a fresh optimizer, used for
    /// FedEraser calibration. The client's own vectors are untouched.
    pub fn calibration_update(
        &self,
        model: &Model,
        base: &ParamVector,
        theta_0: &ParamVector,
        settings: &TrainSettings,
        epochs: usize,
        stored_round: usize,
    ) -> Result<(ParamVector, u64)> {
        let objective = Objective::for_regime(self.regime, settings.anchor_mode, base, theta_0);
        let mut tau = vec![0.0; model.dim()];
        let mut opt = AdamWState::new(model.dim(), self.opt_main.config)?;
        let steps = local_train(
            model,
            &self.train_data,
            objective,
            &mut tau,
            &mut opt,
            epochs,
            settings.batch_size,
            ShuffleKey {
                seed: settings.seed,
                client: self.id as u64,
                round: CALIBRATION_ROUND_BASE + stored_round as u64,
            },
        )?;
        Ok((ParamVector::from_computed(tau)?, steps))
    }
}

/// Shuffle-stream offset separating calibration passes from ordinary rounds.
const CALIBRATION_ROUND_BASE: u64 = 1 << 32;

/// Produces θ₀ by training `theta_init` on the pretraining split in the standard regime.
pub fn pretrain(
    model: &Model,
    theta_init: &ParamVector,
    data: &Dataset,
    opt: AdamWConfig,
    epochs: usize,
    batch_size: usize,
    seed: u64,
) -> Result<ParamVector> {
    if epochs == 0 {
        return Ok(theta_init.clone());
    }
    let mut tau = vec![0.0; model.dim()];
    let mut state = AdamWState::new(model.dim(), opt)?;
    local_train(
        model,
        data,
        Objective::Standard { base: theta_init },
        &mut tau,
        &mut state,
        epochs,
        batch_size,
        ShuffleKey {
            seed: rng::derive_seed(seed, &[stream::PRETRAIN]),
            client: u64::MAX,
            round: 0,
        },
    )?;
    theta_init.add_scaled(1.0, &ParamVector::from_computed(tau)?)
}
