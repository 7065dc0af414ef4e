//! The FL → FU → PU pipeline for one resolved run.

use std::path::Path;

use rayon::prelude::*;

use crate::data::{
    dirichlet_partition, exclusive_class_partition, load_csv, split_client, Dataset, Partition, Split,
    SyntheticSource,
};
use crate::error::{Error, Result};
use crate::federation::{pretrain, AnchorMode, ClientState, CommLedger, Federation, Phase, RoundReport, TrainSettings};
use crate::model::Model;
use crate::optim::AdamWConfig;
use crate::param_space::{ParamVector, Regime};
use crate::rng;
use crate::unlearning::{apply_strategy, NormRecord, Strategy, UnlearnRequest};

use super::config::{DataSource, ExperimentConfig, RunConfig};

// sub-streams of the run seed for the three synthetic splits
const POOL: u64 = 1;
const PRETRAIN_SET: u64 = 2;
const GLOBAL_TEST: u64 = 3;

/// Run metadata stored next to the per-round reports.
#[derive(Debug, Clone, PartialEq)]
pub struct RunMeta {
    pub run_id: String,
    pub config_hash: String,
    /// Canonical TOML of the resolved run.
    pub config_echo: String,
    pub seed: u64,
    pub strategy: Strategy,
    pub regime: Regime,
    pub anchor: AnchorMode,
    pub beta: f64,
    pub lambda_tgt: f64,
    pub lr_main: f64,
    pub lr_standalone: f64,
    pub num_clients: usize,
    pub target_id: usize,
    pub comm: CommLedger,
    /// FedEraser only.
    pub norms: Vec<NormRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsLog {
    pub meta: RunMeta,
    pub reports: Vec<RoundReport>,
}

impl MetricsLog {
    pub fn first_fu(&self) -> Option<&RoundReport> {
        self.reports.iter().find(|r| r.phase == Phase::Fu)
    }

    pub fn last(&self) -> Option<&RoundReport> {
        self.reports.last()
    }

    pub fn phase_rounds(&self, phase: Phase) -> usize {
        self.reports.iter().filter(|r| r.phase == phase).count()
    }
}

/// Data shared by every client: the partitioned pool plus the pretraining and
/// global test sets.
#[derive(Debug, Clone)]
pub struct RunData {
    pub pool: Dataset,
    pub pretrain: Dataset,
    pub global_test: Dataset,
    pub partition: Partition,
}

pub fn load_data(cfg: &RunConfig) -> Result<RunData> {
    let d = &cfg.data;
    let (pool, pretrain, global_test) = match d.source {
        DataSource::Synthetic => {
            let source = SyntheticSource::new(d.num_classes, cfg.model.input_dim, d.class_separation, cfg.seed)?;
            let sub = |tag| rng::derive_seed(cfg.seed, &[tag]);
            (
                source.sample(d.samples_per_class, Split::Train, sub(POOL))?,
                source.sample(d.pretrain_samples_per_class, Split::Pretrain, sub(PRETRAIN_SET))?,
                source.sample(d.global_test_samples_per_class, Split::Test, sub(GLOBAL_TEST))?,
            )
        }
        DataSource::Csv => {
            let path = |p: &Option<std::path::PathBuf>, field: &str| {
                p.clone()
                    .ok_or_else(|| Error::Config(vec![format!("data.{field}: required for csv data")]))
            };
            let k = Some(d.num_classes);
            (
                load_csv(&path(&d.path, "path")?, k, Split::Train)?,
                load_csv(&path(&d.pretrain_path, "pretrain_path")?, k, Split::Pretrain)?,
                load_csv(&path(&d.test_path, "test_path")?, k, Split::Test)?,
            )
        }
    };
    for set in [&pool, &pretrain, &global_test] {
        if set.input_dim() != cfg.model.input_dim {
            return Err(Error::dim(cfg.model.input_dim, set.input_dim()));
        }
    }
    let partition = partition_pool(cfg, &pool)?;
    Ok(RunData {
        pool,
        pretrain,
        global_test,
        partition,
    })
}

/// Every client needs one train and one test sample.
const MIN_CLIENT_SAMPLES: usize = 2;
const MAX_PARTITION_DRAWS: u64 = 1000;
const PARTITION_REDRAW: u64 = 4;

/// Partitions the client pool, redrawing with derived seeds while some
/// client holds fewer than two samples.
fn partition_pool(cfg: &RunConfig, pool: &Dataset) -> Result<Partition> {
    for attempt in 0..MAX_PARTITION_DRAWS {
        let seed = if attempt == 0 {
            cfg.seed
        } else {
            rng::derive_seed(cfg.seed, &[PARTITION_REDRAW, attempt])
        };
        let partition = if cfg.data.exclusive_classes > 0 {
            exclusive_class_partition(
                pool.labels(),
                cfg.num_clients,
                cfg.beta,
                seed,
                cfg.target_id,
                &cfg.data.exclusive_class_ids(),
            )?
        } else {
            dirichlet_partition(pool.labels(), cfg.num_clients, cfg.beta, seed)?
        };
        if partition.client_indices.iter().all(|c| c.len() >= MIN_CLIENT_SAMPLES) {
            if attempt > 0 {
                log::info!("partition redrawn {attempt} time(s) to give every client {MIN_CLIENT_SAMPLES} samples");
            }
            return Ok(partition);
        }
    }
    Err(Error::Degenerate(format!(
        "no partition with at least {MIN_CLIENT_SAMPLES} samples per client after {MAX_PARTITION_DRAWS} draws"
    )))
}

/// Builds θ₀ and the federation for `cfg`, before any round has run.
pub fn build_federation(cfg: &RunConfig) -> Result<Federation> {
    let data = load_data(cfg)?;
    build_federation_from(cfg, &data)
}

pub fn build_federation_from(cfg: &RunConfig, data: &RunData) -> Result<Federation> {
    let t = &cfg.training;
    let mut model = Model::new(cfg.model.clone())?;
    let theta_init = model.init_params(&mut rng::rng_for(cfg.seed, &[rng::stream::MODEL_INIT]));
    if cfg.model.head_frozen {
        model.fit_centroid_head(&theta_init, &data.pretrain.as_batch()?)?;
    }
    let pretrain_opt = AdamWConfig {
        weight_decay: t.weight_decay,
        ..AdamWConfig::with_lr(t.pretrain_lr)
    };
    let theta_0 = pretrain(
        &model,
        &theta_init,
        &data.pretrain,
        pretrain_opt,
        t.pretrain_epochs,
        t.batch_size,
        cfg.seed,
    )?;

    let opt = |lr| AdamWConfig {
        weight_decay: t.weight_decay,
        ..AdamWConfig::with_lr(lr)
    };
    let clients = (0..cfg.num_clients)
        .map(|k| {
            let (train, test) = split_client(&data.pool, &data.partition, k, cfg.data.test_fraction)?;
            ClientState::new(
                k,
                train,
                test,
                model.dim(),
                cfg.regime,
                opt(t.lr_main),
                opt(t.lr_standalone),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let settings = TrainSettings {
        epochs: t.epochs_per_round,
        batch_size: t.batch_size,
        regime: cfg.regime,
        anchor_mode: cfg.anchor,
        seed: cfg.seed,
    };
    Federation::new(
        model,
        theta_0,
        clients,
        data.global_test.clone(),
        Some(cfg.target_id),
        settings,
    )
}

/// Pretraining, FL rounds, the strategy at the start of FU, the remaining FU
/// rounds, then PU rounds without the target.
pub fn run_experiment(cfg: &RunConfig, history_dir: Option<&Path>) -> Result<MetricsLog> {
    let mut fed = build_federation(cfg)?;
    if let Some(dir) = history_dir {
        fed.persist_history(dir)?;
    }
    let (fu, pu) = cfg.effective_rounds();
    let mut reports = Vec::new();
    for _ in 0..cfg.phases.fl {
        reports.push(fed.run_round(Phase::Fl)?);
    }
    let mut norms = Vec::new();
    if fu > 0 {
        let outcome = apply_strategy(
            &mut fed,
            &UnlearnRequest {
                target_id: cfg.target_id,
                lambda_tgt: cfg.lambda_tgt,
                strategy: cfg.strategy,
                calibration_epochs: cfg.training.calibration_epochs,
            },
        )?;
        let emitted = outcome.reports.len();
        reports.extend(outcome.reports);
        norms = outcome.norms;
        for _ in emitted..fu {
            reports.push(fed.run_round(Phase::Fu)?);
        }
        for _ in 0..pu {
            reports.push(fed.run_round(Phase::Pu)?);
        }
    }
    log::info!(
        "{}: {} rounds, final global accuracy {:.4}",
        cfg.run_id(),
        reports.len(),
        reports.last().map_or(f64::NAN, |r| r.global_test_accuracy)
    );
    Ok(MetricsLog {
        meta: RunMeta {
            run_id: cfg.run_id(),
            config_hash: cfg.hash()?,
            config_echo: cfg.to_toml()?,
            seed: cfg.seed,
            strategy: cfg.strategy,
            regime: cfg.regime,
            anchor: cfg.anchor,
            beta: cfg.beta,
            lambda_tgt: cfg.lambda_tgt,
            lr_main: cfg.training.lr_main,
            lr_standalone: cfg.training.lr_standalone,
            num_clients: cfg.num_clients,
            target_id: cfg.target_id,
            comm: fed.comm,
            norms,
        },
        reports,
    })
}

/// Runs every expanded configuration of `cfg` in parallel. Each run's history
/// goes to `history_root/<run_id>`, or straight to `history_root` when there
/// is a single run.
pub fn run_all(cfg: &ExperimentConfig, history_root: Option<&Path>) -> Result<Vec<MetricsLog>> {
    if cfg.has_grid() {
        return Err(Error::Config(vec![
            "lambda_tgt/lr_main/lr_standalone: several values form a grid; run a grid search instead".into(),
        ]));
    }
    let runs = cfg.expand()?;
    let single = runs.len() == 1;
    runs.par_iter()
        .map(|run| {
            let dir = history_root.map(|root| if single { root.to_path_buf() } else { root.join(run.run_id()) });
            run_experiment(run, dir.as_deref())
        })
        .collect()
}

/// Accuracy of θ₀ on the global test set, for reference lines and sanity checks.
pub fn pretrained_accuracy(fed: &Federation) -> Result<f64> {
    let theta_0: &ParamVector = &fed.server.theta_0;
    crate::federation::evaluate(&fed.model, theta_0, &fed.global_test, fed.settings.regime, theta_0)
}
