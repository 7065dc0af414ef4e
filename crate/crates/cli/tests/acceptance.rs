//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any fails.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fedunlearn_core::data::dirichlet_partition;
use fedunlearn_core::harness::config::GridPoint;
use fedunlearn_core::harness::{build_federation, run_experiment, ExperimentConfig, MetricsLog, RunConfig};
use fedunlearn_core::model::{Batch, FrozenHead, Matrix};
use fedunlearn_core::unlearning::{safa_rebuild, sata_unlearn};
use fedunlearn_core::{
    combine, task_vector, Activation, AdamWConfig, AdamWState, Model, ModelSpec, ParamVector, Phase, Regime,
    ServerState, Strategy,
};

type Outcome = Result<String, String>;

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

fn pv(v: Vec<f64>) -> ParamVector {
    ParamVector::new(v).expect("finite")
}

fn random_batch(rng: &mut ChaCha8Rng, n: usize, input_dim: usize, classes: usize) -> Batch {
    let inputs = uniform(rng, n * input_dim, 1.0);
    let labels = (0..n).map(|_| rng.random_range(0..classes)).collect();
    Batch::new(inputs, labels, input_dim).unwrap()
}

fn model(spec: ModelSpec, rng: &mut ChaCha8Rng) -> Model {
    let m = Model::new(spec.clone()).unwrap();
    if !spec.head_frozen {
        return m;
    }
    let f = spec.feature_dim();
    let head = FrozenHead::new(
        spec.num_classes,
        f,
        uniform(rng, spec.num_classes * f, 1.0),
        uniform(rng, spec.num_classes, 0.5),
    )
    .unwrap();
    m.with_head(head).unwrap()
}

fn with_coord(v: &[f64], i: usize, delta: f64) -> ParamVector {
    let mut w = v.to_vec();
    w[i] += delta;
    pv(w)
}

// Gradient entries smaller than this are compared in absolute terms.
const GRAD_FLOOR: f64 = 1e-6;

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(GRAD_FLOOR)
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let h = 1e-5;
    let mut worst = [0.0f64; 2];
    let mut checked = [0usize; 2];
    for draw in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + draw);
        let specs = [
            ModelSpec {
                input_dim: 6,
                hidden_dims: vec![5, 4],
                num_classes: 3,
                activation: Activation::Tanh,
                head_frozen: false,
            },
            ModelSpec {
                input_dim: 6,
                hidden_dims: vec![7],
                num_classes: 4,
                activation: Activation::Relu,
                head_frozen: true,
            },
        ];
        for spec in specs {
            let smooth = spec.activation == Activation::Tanh;
            let m = model(spec.clone(), &mut rng);
            let d = m.dim();
            let theta = pv(uniform(&mut rng, d, 0.5));
            let tau = pv(uniform(&mut rng, d, 0.1));
            let batch = random_batch(&mut rng, 8, spec.input_dim, spec.num_classes);
            let coords: Vec<usize> = (0..10).map(|_| rng.random_range(0..d)).collect();

            // ReLU kinks make the standard loss non-smooth, so only the smooth
            // net is checked there. The linearized loss is smooth in τ either way.
            if smooth {
                let (_, g) = m.loss_and_grad(&theta, &batch).map_err(|e| e.to_string())?;
                for &i in &coords {
                    let lp = m.loss(&with_coord(theta.as_slice(), i, h), &batch).unwrap();
                    let lm = m.loss(&with_coord(theta.as_slice(), i, -h), &batch).unwrap();
                    worst[0] = worst[0].max(rel_err(g.as_slice()[i], (lp - lm) / (2.0 * h)));
                    checked[0] += 1;
                }
            }
            let (_, g) = m.linearized_loss_and_grad(&theta, &tau, &batch).map_err(|e| e.to_string())?;
            let lin_loss = |t: &ParamVector| {
                let logits = m.linearized_forward(&theta, t, &batch).unwrap();
                fedunlearn_core::model::cross_entropy(&logits, batch.labels()).0
            };
            for &i in &coords {
                let lp = lin_loss(&with_coord(tau.as_slice(), i, h));
                let lm = lin_loss(&with_coord(tau.as_slice(), i, -h));
                worst[1] = worst[1].max(rel_err(g.as_slice()[i], (lp - lm) / (2.0 * h)));
                checked[1] += 1;
            }
        }
    }
    let elapsed = start.elapsed();
    let detail = format!(
        "standard: {} coords, max rel err {:.2e}; linearized: {} coords, max rel err {:.2e}; {:.2?}",
        checked[0], worst[0], checked[1], worst[1], elapsed
    );
    if worst.iter().all(|&w| w < 1e-5) && checked.iter().all(|&c| c >= 100) && elapsed < Duration::from_secs(10) {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn frobenius_diff(a: &Matrix, b: &Matrix) -> f64 {
    a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn criterion_2() -> Outcome {
    // Identity activation with a frozen head: logits are affine in θ.
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let spec = ModelSpec {
        input_dim: 5,
        hidden_dims: vec![4],
        num_classes: 3,
        activation: Activation::Identity,
        head_frozen: true,
    };
    let m = model(spec, &mut rng);
    let d = m.dim();
    let theta_0 = pv(uniform(&mut rng, d, 0.5));
    let batch = random_batch(&mut rng, 16, 5, 3);
    let cfg = AdamWConfig::with_lr(0.05);
    let mut opt_std = AdamWState::new(d, cfg).unwrap();
    let mut opt_lin = AdamWState::new(d, cfg).unwrap();
    let mut tau_std = vec![0.0; d];
    let mut tau_lin = vec![0.0; d];
    let mut max_gap = 0.0f64;
    for _ in 0..50 {
        let at = theta_0.add_scaled(1.0, &pv(tau_std.clone())).unwrap();
        let (_, g_std) = m.loss_and_grad(&at, &batch).unwrap();
        let (_, g_lin) = m.linearized_loss_and_grad(&theta_0, &pv(tau_lin.clone()), &batch).unwrap();
        opt_std.step(&mut tau_std, g_std.as_slice()).unwrap();
        opt_lin.step(&mut tau_lin, g_lin.as_slice()).unwrap();
        let gap = tau_std.iter().zip(&tau_lin).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        max_gap = max_gap.max(gap);
    }
    let moved = tau_std.iter().map(|v| v.abs()).fold(0.0, f64::max);

    // Generic smooth net: halving τ should cut the linearization error ~4x.
    let spec = ModelSpec {
        input_dim: 5,
        hidden_dims: vec![6],
        num_classes: 3,
        activation: Activation::Tanh,
        head_frozen: false,
    };
    let mut ratios = Vec::new();
    for draw in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + draw);
        let m = model(spec.clone(), &mut rng);
        let d = m.dim();
        let theta_0 = pv(uniform(&mut rng, d, 0.8));
        let batch = random_batch(&mut rng, 8, 5, 3);
        let dir = pv(uniform(&mut rng, d, 1.0));
        let tau = dir.scale(1e-3 / dir.norm()).unwrap();
        let err = |t: &ParamVector| {
            let lin = m.linearized_forward(&theta_0, t, &batch).unwrap();
            let full = m.forward(&theta_0.add_scaled(1.0, t).unwrap(), &batch).unwrap();
            frobenius_diff(&lin, &full)
        };
        ratios.push(err(&tau) / err(&tau.scale(0.5).unwrap()));
    }
    let detail = format!(
        "linear map: max trajectory gap {max_gap:.2e} over 50 steps (|τ|∞ reached {moved:.3}); halving ratios {}",
        ratios.iter().map(|r| format!("{r:.3}")).collect::<Vec<_>>().join(", ")
    );
    if max_gap <= 1e-10 && moved > 0.1 && ratios.iter().all(|r| (3.5..=4.5).contains(r)) {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn small_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        num_clients: 3,
        target_id: 1,
        ..Default::default()
    };
    cfg.model.input_dim = 16;
    cfg.model.hidden_dims = vec![16];
    cfg.model.num_classes = 4;
    cfg.data.num_classes = 4;
    cfg.data.samples_per_class = 40;
    cfg.data.pretrain_samples_per_class = 10;
    cfg.data.global_test_samples_per_class = 20;
    cfg.data.exclusive_classes = 1;
    cfg.phases.fl = 2;
    cfg.phases.fu = 1;
    cfg.phases.pu = 0;
    cfg.parity = false;
    cfg.training.epochs_per_round = 2;
    cfg.training.pretrain_epochs = 2;
    cfg
}

fn resolve(cfg: &ExperimentConfig, strategy: Strategy, regime: Regime, seed: u64) -> RunConfig {
    let t = &cfg.training;
    let point = GridPoint {
        lambda_tgt: cfg.lambda_tgt.to_vec()[0],
        lr_main: t.lr_main.to_vec()[0],
        lr_standalone: t.lr_standalone.to_vec()[0],
    };
    cfg.resolve(strategy, regime, cfg.beta.to_vec()[0], point, seed)
}

fn bitwise_eq(a: &ParamVector, b: &ParamVector) -> bool {
    a.len() == b.len() && a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn max_rel_gap(a: &ParamVector, b: &ParamVector) -> f64 {
    let scale = a.iter().chain(b.iter()).map(|v| v.abs()).fold(0.0, f64::max);
    let gap = a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    if scale == 0.0 {
        gap
    } else {
        gap / scale
    }
}

fn criterion_3() -> Outcome {
    let cfg = small_config();
    let run = resolve(&cfg, Strategy::Sata, Regime::Ntk, 3);
    let mut fed = build_federation(&run).map_err(|e| e.to_string())?;
    for _ in 0..cfg.phases.fl {
        fed.run_round(Phase::Fl).map_err(|e| e.to_string())?;
    }
    let theta_0 = fed.server.theta_0.clone();
    let theta_hat = fed.server.theta_hat.clone();
    let mut failures = Vec::new();

    // Round trip on the trained global model and each client's standalone point.
    let mut endpoints = vec![theta_hat.clone()];
    for c in &fed.clients {
        endpoints.push(combine(&theta_0, &[(1.0, &c.tau_standalone)]).unwrap());
    }
    for (i, theta_t) in endpoints.iter().enumerate() {
        let back = combine(&theta_0, &[(1.0, &task_vector(theta_t, &theta_0).unwrap())]).unwrap();
        if !bitwise_eq(&back, theta_t) {
            failures.push(format!("round trip {i}"));
        }
    }

    let tau = &fed.clients[run.target_id].tau_standalone;
    let zeros: Vec<(f64, _)> = fed.clients.iter().map(|c| (0.0, &c.tau_standalone)).collect();
    if !bitwise_eq(&combine(&theta_0, &zeros).unwrap(), &theta_0) {
        failures.push("combine with zero coefficients".into());
    }
    let mut s = ServerState::new(theta_0.clone());
    s.theta_hat = theta_hat.clone();
    if !bitwise_eq(&sata_unlearn(&mut s, tau, 0.0).unwrap(), &theta_hat) {
        failures.push("sata with lambda 0".into());
    }

    let (a, b) = (0.3, 1.1);
    let lin_gap = max_rel_gap(
        &combine(&theta_0, &[(a, tau), (b, tau)]).unwrap(),
        &combine(&theta_0, &[(a + b, tau)]).unwrap(),
    );
    if lin_gap > 1e-12 {
        failures.push(format!("combine linearity gap {lin_gap:.2e}"));
    }
    let mut sata_gap = 0.0f64;
    for (l1, l2) in [(0.25, 1.5), (1.0, 0.7), (-0.5, 2.0)] {
        let mut s1 = s.clone();
        let mut s2 = s.clone();
        s1.theta_hat = theta_hat.clone();
        s2.theta_hat = theta_hat.clone();
        let r1 = sata_unlearn(&mut s1, tau, l1).unwrap();
        let r2 = sata_unlearn(&mut s2, tau, l2).unwrap();
        let lhs = r1.sub(&r2).unwrap();
        let rhs = tau.delta().scale(l2 - l1).unwrap();
        sata_gap = sata_gap.max(max_rel_gap(&lhs, &rhs));
    }
    if sata_gap > 1e-12 {
        failures.push(format!("sata linearity gap {sata_gap:.2e}"));
    }

    // SAFA must not read the target's vector.
    let counts: BTreeMap<usize, usize> = fed.clients.iter().map(|c| (c.id, c.sample_count())).collect();
    let honest: BTreeMap<usize, _> = fed.clients.iter().map(|c| (c.id, &c.tau_standalone)).collect();
    let mut poisoned_tau = fed.clients[run.target_id].tau_standalone.clone();
    poisoned_tau.set_delta(pv(vec![1e300; poisoned_tau.len()]));
    let mut poisoned = honest.clone();
    poisoned.insert(run.target_id, &poisoned_tau);
    let x = safa_rebuild(&theta_0, &honest, &counts, run.target_id).unwrap();
    let y = safa_rebuild(&theta_0, &poisoned, &counts, run.target_id).unwrap();
    if !bitwise_eq(&x, &y) {
        failures.push("safa output depends on the target vector".into());
    }

    let detail = format!(
        "{} round trips, zero-coefficient identities, linearity gaps {lin_gap:.1e}/{sata_gap:.1e}, SAFA sentinel",
        endpoints.len()
    );
    if failures.is_empty() {
        Ok(detail)
    } else {
        Err(format!("{detail}; failed: {}", failures.join(", ")))
    }
}

fn criterion_4() -> Outcome {
    let cfg = small_config();
    let sata = run_experiment(&resolve(&cfg, Strategy::Sata, Regime::Ntk, 4), None).map_err(|e| e.to_string())?;
    let fe = run_experiment(&resolve(&cfg, Strategy::FedEraser, Regime::Ntk, 4), None).map_err(|e| e.to_string())?;
    let s = sata.meta.comm.get(Phase::Fu);
    let f = fe.meta.comm.get(Phase::Fu);
    let fl = cfg.phases.fl as u64;
    let detail = format!(
        "SATA: {} upload(s), {} client steps, {} round(s); FedEraser: {} calibration rounds (FL rounds {fl}), {} client steps",
        s.uploads, s.local_steps, s.rounds, f.calibration_rounds, f.local_steps
    );
    if s.uploads == 1 && s.local_steps == 0 && s.broadcasts == 0 && s.rounds == 1 && f.calibration_rounds >= fl {
        Ok(detail)
    } else {
        Err(detail)
    }
}

struct Benchmark {
    runs: BTreeMap<(Strategy, Regime, u64), MetricsLog>,
    seeds: Vec<u64>,
    elapsed: Duration,
}

fn benchmark() -> Result<Benchmark, String> {
    let start = Instant::now();
    let cfg = ExperimentConfig::load(&workspace_root().join("configs/exclusive_class.toml")).map_err(|e| e.to_string())?;
    let seeds = cfg.seeds.to_vec();
    let combos = [
        (Strategy::Sata, Regime::Ntk),
        (Strategy::Sata, Regime::Standard),
        (Strategy::Safa, Regime::Ntk),
        (Strategy::Ctt, Regime::Ntk),
        (Strategy::FedEraser, Regime::Ntk),
    ];
    let mut runs = BTreeMap::new();
    for &seed in &seeds {
        for (strategy, regime) in combos {
            let log = run_experiment(&resolve(&cfg, strategy, regime, seed), None).map_err(|e| e.to_string())?;
            runs.insert((strategy, regime, seed), log);
        }
    }
    Ok(Benchmark {
        runs,
        seeds,
        elapsed: start.elapsed(),
    })
}

impl Benchmark {
    fn first_fu(&self, strategy: Strategy, regime: Regime, seed: u64) -> (f64, f64, f64) {
        let r = self.runs[&(strategy, regime, seed)].first_fu().expect("FU round");
        (
            r.target_test_accuracy.expect("target accuracy"),
            r.global_test_accuracy,
            r.remaining_test_accuracy,
        )
    }

    fn count(&self, f: impl Fn(u64) -> bool) -> usize {
        self.seeds.iter().filter(|&&s| f(s)).count()
    }

    fn needed(&self) -> usize {
        self.seeds.len() - 1
    }
}

fn criterion_5(b: &Benchmark) -> Outcome {
    use Regime::Ntk;
    let below_ctt = b.count(|s| b.first_fu(Strategy::Sata, Ntk, s).0 < b.first_fu(Strategy::Ctt, Ntk, s).0);
    let below_fe = b.count(|s| b.first_fu(Strategy::Sata, Ntk, s).0 < b.first_fu(Strategy::FedEraser, Ntk, s).0);
    let close = b.count(|s| (b.first_fu(Strategy::Sata, Ntk, s).2 - b.first_fu(Strategy::Ctt, Ntk, s).2).abs() <= 0.15);
    let mean = |st| b.seeds.iter().map(|&s| b.first_fu(st, Ntk, s).0).sum::<f64>() / b.seeds.len() as f64;
    let n = b.seeds.len();
    let detail = format!(
        "target acc SATA < CTT in {below_ctt}/{n}, < FedEraser in {below_fe}/{n}; remaining-client acc within 15 pts of CTT in {close}/{n}; \
         mean target acc SATA {:.3}, FedEraser {:.3}, CTT {:.3}; {} runs in {:.1?}",
        mean(Strategy::Sata),
        mean(Strategy::FedEraser),
        mean(Strategy::Ctt),
        b.runs.len(),
        b.elapsed
    );
    let k = b.needed();
    if below_ctt >= k && below_fe >= k && close >= k && b.elapsed < Duration::from_secs(300) {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion_6(b: &Benchmark) -> Outcome {
    use Regime::Ntk;
    let global = b.count(|s| b.first_fu(Strategy::Safa, Ntk, s).1 >= b.first_fu(Strategy::Sata, Ntk, s).1);
    let target = b.count(|s| b.first_fu(Strategy::Safa, Ntk, s).0 >= b.first_fu(Strategy::Sata, Ntk, s).0);
    let n = b.seeds.len();
    let detail = format!("SAFA global acc >= SATA in {global}/{n}, SAFA target acc >= SATA in {target}/{n}");
    if global >= b.needed() && target >= b.needed() {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion_7(b: &Benchmark) -> Outcome {
    let wins = b.count(|s| {
        b.first_fu(Strategy::Sata, Regime::Ntk, s).0 <= b.first_fu(Strategy::Sata, Regime::Standard, s).0
    });
    let detail = format!("SATA-NTK target acc <= SATA-standard in {wins}/{}", b.seeds.len());
    if wins >= b.needed() {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion_8() -> Outcome {
    let mut cfg = small_config();
    cfg.phases.fl = 2;
    let log = run_experiment(&resolve(&cfg, Strategy::FedEraser, Regime::Standard, 8), None).map_err(|e| e.to_string())?;
    let norms = &log.meta.norms;
    let worst = norms
        .iter()
        .map(|n| (n.stored_norm - n.recalibrated_norm).abs())
        .fold(0.0, f64::max);
    let expected = cfg.phases.fl * (cfg.num_clients - 1);
    let detail = format!("{} recalibrated updates (expected {expected}), max norm gap {worst:.2e}", norms.len());
    if norms.len() == expected && worst <= 1e-10 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion_9() -> Outcome {
    let labels: Vec<usize> = (0..1200).map(|i| i % 10).collect();
    let k = 10;
    let mut mean = [0.0; 2];
    let mut covered = true;
    for seed in 0..20u64 {
        for (slot, beta) in [0.05, 0.5].into_iter().enumerate() {
            let p = dirichlet_partition(&labels, k, beta, seed).map_err(|e| e.to_string())?;
            covered &= p.covers_exactly(labels.len());
            let e = p.label_entropies(&labels, 10);
            mean[slot] += e.iter().sum::<f64>() / e.len() as f64 / 20.0;
        }
    }
    let detail = format!(
        "mean label entropy {:.3} at beta 0.05 vs {:.3} at beta 0.5; exact coverage in all 40 partitions: {covered}",
        mean[0], mean[1]
    );
    if mean[0] < mean[1] && covered {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion_10() -> Outcome {
    let bin = env!("CARGO_BIN_EXE_fedunlearn");
    let config = workspace_root().join("configs/exclusive_class.toml");
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut outputs = Vec::new();
    for i in 0..2 {
        let out = tmp.path().join(format!("run{i}"));
        let status = Command::new(bin)
            .arg("run")
            .arg("--config")
            .arg(&config)
            .args(["--seed", "0", "--strategy", "sata,federaser", "--out"])
            .arg(&out)
            .output()
            .map_err(|e| e.to_string())?;
        if !status.status.success() {
            return Err(format!("run {i} failed: {}", String::from_utf8_lossy(&status.stderr)));
        }
        outputs.push(std::fs::read(out.join("metrics.csv")).map_err(|e| e.to_string())?);
    }
    let detail = format!("two runs wrote {} and {} bytes of metrics.csv", outputs[0].len(), outputs[1].len());
    if outputs[0] == outputs[1] && !outputs[0].is_empty() {
        Ok(format!("{detail}, byte-identical"))
    } else {
        Err(format!("{detail}, contents differ"))
    }
}

fn main() {
    let bench = benchmark();
    let shared = |f: fn(&Benchmark) -> Outcome| match &bench {
        Ok(b) => f(b),
        Err(e) => Err(format!("benchmark failed: {e}")),
    };
    let results: Vec<(&str, Outcome)> = vec![
        ("gradient correctness", criterion_1()),
        ("linearization exactness", criterion_2()),
        ("task-vector algebra", criterion_3()),
        ("single-round guarantee", criterion_4()),
        ("unlearning efficacy trend", shared(criterion_5)),
        ("SAFA vs SATA ordering", shared(criterion_6)),
        ("NTK-regime benefit", shared(criterion_7)),
        ("FedEraser norm preservation", criterion_8()),
        ("Dirichlet skew", criterion_9()),
        ("determinism", criterion_10()),
    ];
    let mut failed = 0;
    for (i, (name, outcome)) in results.iter().enumerate() {
        match outcome {
            Ok(detail) => println!("criterion {:>2} PASS {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {:>2} FAIL {name}: {detail}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
