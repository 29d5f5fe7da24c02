//! Experiment orchestration: data preparation, the CVAE bootstrap, the
//! federated round loop, metrics and report files.
//!
//! Every random choice is drawn from a stream keyed by one of the four
//! config seeds plus (round, client) tags, and every reduction runs in
//! client-id order, so a config always reproduces the same rounds.

mod config;
mod report;

pub use config::{AttackName, DefenseKind, ExperimentConfig, ModelKind, PartitionScheme};
pub use report::{emit_reports, rounds_csv, run_id, scores_csv, summary_json, svg_line_chart};

use std::collections::BTreeSet;
use std::path::Path;
use std::time::Instant;

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::{apply_byzantine, run_backdoor_client, AttackKind, AttackSpec};
use crate::cvae::{build_training_set, train_cvae_logged, CvaeState, EpochLog, HarvestConfig};
use crate::data::{
    load_idx, make_trigger_set, partition_dirichlet, partition_inverse_law, BackdoorPattern, LabeledData, Partition,
    TriggerSet,
};
use crate::defense::{
    aggregate_fedavg, aggregate_geomed, filter_mean_threshold, score_clients, trust_propagate, ClientScore,
    FilterDecision,
};
use crate::error::{Error, Result};
use crate::nn::{evaluate, init_model, train_local, ModelSpec, WeightVector};
use crate::seed::derive_seed;

pub const THREADS_ENV: &str = "FLCLEANER_THREADS";

const TAG_PARTITION: u64 = 1;
const TAG_TRIGGER: u64 = 2;
const TAG_ROLES: u64 = 3;
const TAG_TRAIN: u64 = 4;
const TAG_HARVEST: u64 = 5;
const TAG_CVAE: u64 = 6;
const TAG_SELECT: u64 = 7;
const TAG_ATTACK: u64 = 8;

/// Rayon pool honoring `FLCLEANER_THREADS` when set.
pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::Config(format!("{THREADS_ENV}={v:?} is not a positive integer")))?;
        builder = builder.num_threads(n);
    }
    builder.build().map_err(|e| Error::invalid(e.to_string()))
}

/// `(train, test)` from the four IDX files in `cfg.data_dir`.
pub fn load_dataset(cfg: &ExperimentConfig) -> Result<(LabeledData, LabeledData)> {
    let dir = &cfg.data_dir;
    let train = load_idx(dir.join("train-images-idx3-ubyte"), dir.join("train-labels-idx1-ubyte"))?;
    let test = load_idx(dir.join("t10k-images-idx3-ubyte"), dir.join("t10k-labels-idx1-ubyte"))?;
    Ok((train, test))
}

pub fn build_partition(cfg: &ExperimentConfig, train: &LabeledData) -> Result<Partition> {
    let seed = derive_seed(cfg.seed_data, &[TAG_PARTITION]);
    match cfg.partition {
        PartitionScheme::Dirichlet => partition_dirichlet(train, cfg.num_clients, cfg.dirichlet_alpha, seed),
        PartitionScheme::InverseLaw => partition_inverse_law(train, cfg.num_clients, &cfg.inverse_law(), seed),
    }
}

/// Everything a run needs besides the config.
#[derive(Clone, Debug)]
pub struct Environment {
    pub spec: ModelSpec,
    pub partition: Partition,
    pub clients: Vec<LabeledData>,
    pub trigger: TriggerSet,
    /// Clean test samples outside the trigger set.
    pub eval: LabeledData,
    /// Stamped test samples whose true class is not the target, relabeled to it.
    pub asr_eval: LabeledData,
    /// Sorted ids of the malicious clients.
    pub attackers: Vec<usize>,
}

impl Environment {
    pub fn prepare(cfg: &ExperimentConfig, train: &LabeledData, test: &LabeledData) -> Result<Self> {
        cfg.validate()?;
        let train = if cfg.train_limit > 0 { train.truncated(cfg.train_limit) } else { train.clone() };
        if train.shape() != cfg.input_shape() || test.shape() != cfg.input_shape() {
            return Err(Error::ShapeMismatch {
                expected: cfg.input_shape().size(),
                actual: train.shape().size(),
            });
        }
        let partition = build_partition(cfg, &train)?;
        let clients = partition.assignments.iter().map(|a| train.subset(a)).collect();
        let (trigger, rest) = make_trigger_set(test, cfg.trigger_size, derive_seed(cfg.seed_data, &[TAG_TRIGGER]))?;
        let keep = if cfg.test_limit > 0 { cfg.test_limit.min(rest.len()) } else { rest.len() };
        let eval = test.subset(&rest[..keep]);
        if eval.is_empty() {
            return Err(Error::Config("no test samples left for evaluation".into()));
        }
        let asr_eval = triggered_eval(&eval, &cfg.pattern());
        let mut rng = crate::seed::derived_rng(cfg.seed_attack, &[TAG_ROLES]);
        let mut attackers = index::sample(&mut rng, cfg.num_clients, cfg.num_attackers()).into_vec();
        attackers.sort_unstable();
        Ok(Self {
            spec: cfg.model_spec(),
            partition,
            clients,
            trigger,
            eval,
            asr_eval,
            attackers,
        })
    }

    pub fn attack_for(&self, cfg: &ExperimentConfig, client: usize) -> Option<AttackKind> {
        let pos = self.attackers.binary_search(&client).ok()?;
        cfg.attack_kind(pos)
    }
}

fn triggered_eval(eval: &LabeledData, pattern: &BackdoorPattern) -> LabeledData {
    let idx: Vec<usize> = (0..eval.len()).filter(|&i| eval.label(i) != pattern.target_class).collect();
    let mut out = eval.subset(&idx);
    let shape = out.shape();
    for i in 0..out.len() {
        pattern.stamp(out.sample_mut(i), shape);
        out.set_label(i, pattern.target_class);
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub acc: f64,
    pub recall: f64,
    pub fpr: f64,
    pub asr: f64,
    /// No attacker was selected, so `recall` is 1.0 by convention.
    pub no_attackers: bool,
}

/// Detection rates over the selected clients plus model quality on the
/// clean and triggered evaluation sets.
pub fn compute_metrics(
    decision: &FilterDecision,
    selected: &[usize],
    attackers: &[usize],
    model: &WeightVector,
    spec: &ModelSpec,
    eval: &LabeledData,
    asr_eval: &LabeledData,
) -> Result<Metrics> {
    let (mut att, mut att_blocked, mut ben, mut ben_blocked) = (0, 0, 0, 0);
    for &id in selected {
        let blocked = decision.is_blocked(id);
        if attackers.contains(&id) {
            att += 1;
            att_blocked += blocked as usize;
        } else {
            ben += 1;
            ben_blocked += blocked as usize;
        }
    }
    let rate = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let acc = evaluate(model, spec, eval)?;
    let asr = if asr_eval.is_empty() { 0.0 } else { evaluate(model, spec, asr_eval)? };
    Ok(Metrics {
        acc,
        recall: if att == 0 { 1.0 } else { rate(att_blocked, att) },
        fpr: rate(ben_blocked, ben),
        asr,
        no_attackers: att == 0,
    })
}

/// Attack run by one selected attacker in one round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackRecord {
    pub client_id: usize,
    pub attack: AttackKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub acc: f64,
    pub recall: f64,
    pub fpr: f64,
    pub asr: f64,
    pub no_attackers: bool,
    pub selected: Vec<usize>,
    pub attackers: Vec<usize>,
    pub attacks: Vec<AttackRecord>,
    pub benign_ids: Vec<usize>,
    pub blocked_ids: Vec<usize>,
    pub scores: Vec<ClientScore>,
    pub delta: f64,
    pub warnings: Vec<String>,
    pub wall_ms: u64,
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub config: ExperimentConfig,
    pub reports: Vec<RoundReport>,
    pub global: WeightVector,
    pub cvae: Option<CvaeState>,
    pub cvae_log: Vec<EpochLog>,
    pub warnings: Vec<String>,
}

impl RunOutput {
    pub fn last(&self) -> &RoundReport {
        self.reports.last().expect("a run has at least one round")
    }
}

/// Loads the dataset named in `cfg` and runs it inside the configured pool.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let (train, test) = load_dataset(cfg)?;
    run_experiment_with(cfg, &train, &test)
}

pub fn run_experiment_with(cfg: &ExperimentConfig, train: &LabeledData, test: &LabeledData) -> Result<RunOutput> {
    let env = Environment::prepare(cfg, train, test)?;
    thread_pool()?.install(|| run_rounds(cfg, &env))
}

/// Trains the scoring CVAE from a server-side replay on the trigger set.
pub fn bootstrap_cvae(
    cfg: &ExperimentConfig,
    env: &Environment,
    global: &WeightVector,
) -> Result<(CvaeState, Vec<EpochLog>, usize)> {
    let harvest = HarvestConfig {
        warmup_epochs: cfg.warmup_epochs,
        harvest_epochs: cfg.harvest_epochs,
        lr: cfg.lr,
        batch_size: cfg.batch_size,
        seed: derive_seed(cfg.seed_init, &[TAG_HARVEST]),
        layer_mask: cfg.layer_mask(),
        geomed: cfg.geomed_options(),
    };
    let ts = build_training_set(global, &env.spec, &env.trigger, &harvest)?;
    let (state, log) = train_cvae_logged(&ts, &cfg.cvae_config(derive_seed(cfg.seed_init, &[TAG_CVAE])))?;
    Ok((state, log, ts.geomed_unconverged))
}

fn local_update(
    cfg: &ExperimentConfig,
    env: &Environment,
    global: &WeightVector,
    round: usize,
    client: usize,
) -> Result<WeightVector> {
    let data = &env.clients[client];
    let params = cfg.train_params(derive_seed(cfg.seed_init, &[TAG_TRAIN, round as u64, client as u64]));
    let attack = env.attack_for(cfg, client).map(|kind| AttackSpec {
        kind,
        seed: derive_seed(cfg.seed_attack, &[TAG_ATTACK, round as u64, client as u64]),
    });
    match attack {
        None => train_local(global, &env.spec, data, &params, None),
        Some(a) if a.kind.is_backdoor() => run_backdoor_client(global, &env.spec, data, &a, &params),
        Some(a) => apply_byzantine(&train_local(global, &env.spec, data, &params, None)?, &a),
    }
}

fn run_rounds(cfg: &ExperimentConfig, env: &Environment) -> Result<RunOutput> {
    let mut global = init_model(&env.spec)?;
    let mut warnings = Vec::new();
    let (cvae, cvae_log) = if cfg.defense.uses_cvae() {
        let (state, log, unconverged) = bootstrap_cvae(cfg, env, &global).map_err(|e| Error::Round {
            round: 0,
            source: Box::new(e),
        })?;
        if unconverged > 0 {
            warnings.push(format!("{unconverged} harvest epochs hit the geometric-median iteration cap"));
        }
        (Some(state), log)
    } else {
        (None, Vec::new())
    };

    let per_round = cfg.selected_per_round();
    let mut reports = Vec::with_capacity(cfg.rounds);
    for round in 1..=cfg.rounds {
        let started = Instant::now();
        let wrap = |e: Error| Error::Round {
            round,
            source: Box::new(e),
        };
        let mut rng = crate::seed::derived_rng(cfg.seed_selection, &[TAG_SELECT, round as u64]);
        let mut selected = index::sample(&mut rng, cfg.num_clients, per_round).into_vec();
        selected.sort_unstable();

        let updates: Vec<WeightVector> = selected
            .par_iter()
            .map(|&c| local_update(cfg, env, &global, round, c))
            .collect::<Result<_>>()
            .map_err(wrap)?;

        let mut round_warnings = Vec::new();
        let (finite, broken): (Vec<usize>, Vec<usize>) =
            (0..selected.len()).partition(|&i| updates[i].is_finite());
        if !broken.is_empty() {
            let ids: Vec<usize> = broken.iter().map(|&i| selected[i]).collect();
            round_warnings.push(format!("blocked non-finite updates from clients {ids:?}"));
        }
        let candidates: Vec<(usize, &WeightVector)> = finite.iter().map(|&i| (selected[i], &updates[i])).collect();

        let (mut decision, scores, aggregated) = defend(cfg, env, cvae.as_ref(), &candidates, &mut round_warnings)
            .map_err(wrap)?;
        decision.blocked_ids.extend(broken.iter().map(|&i| selected[i]));

        global = match aggregated {
            Some(w) => w,
            None => {
                let accepted: BTreeSet<usize> = decision.benign_ids.iter().copied().collect();
                let (models, sizes): (Vec<&WeightVector>, Vec<usize>) = candidates
                    .iter()
                    .filter(|(id, _)| accepted.contains(id))
                    .map(|&(id, w)| (w, env.clients[id].len()))
                    .unzip();
                if models.is_empty() {
                    round_warnings.push("no update accepted; global model unchanged".into());
                    global
                } else {
                    aggregate_fedavg(&models, &sizes).map_err(wrap)?
                }
            }
        };

        let m = compute_metrics(&decision, &selected, &env.attackers, &global, &env.spec, &env.eval, &env.asr_eval)
            .map_err(wrap)?;
        let attackers: Vec<usize> = selected.iter().copied().filter(|c| env.attackers.contains(c)).collect();
        let attacks = attackers
            .iter()
            .filter_map(|&c| env.attack_for(cfg, c).map(|attack| AttackRecord { client_id: c, attack }))
            .collect();
        reports.push(RoundReport {
            round,
            acc: m.acc,
            recall: m.recall,
            fpr: m.fpr,
            asr: m.asr,
            no_attackers: m.no_attackers,
            selected,
            attackers,
            attacks,
            benign_ids: decision.benign_ids,
            blocked_ids: decision.blocked_ids,
            scores,
            delta: decision.delta,
            warnings: round_warnings,
            wall_ms: started.elapsed().as_millis() as u64,
        });
    }
    Ok(RunOutput {
        config: cfg.clone(),
        reports,
        global,
        cvae,
        cvae_log,
        warnings,
    })
}

/// Filtering decision, per-client scores, and an aggregate when the defense
/// replaces FedAvg.
fn defend(
    cfg: &ExperimentConfig,
    env: &Environment,
    cvae: Option<&CvaeState>,
    candidates: &[(usize, &WeightVector)],
    warnings: &mut Vec<String>,
) -> Result<(FilterDecision, Vec<ClientScore>, Option<WeightVector>)> {
    let ids = || candidates.iter().map(|(id, _)| *id);
    match cfg.defense {
        DefenseKind::None => Ok((FilterDecision::accept_all(ids()), Vec::new(), None)),
        DefenseKind::GeomedAgg => {
            let models: Vec<&WeightVector> = candidates.iter().map(|(_, w)| *w).collect();
            let agg = if models.is_empty() { None } else { Some(aggregate_geomed(&models, &cfg.geomed_options())?) };
            Ok((FilterDecision::accept_all(ids()), Vec::new(), agg))
        }
        DefenseKind::FlCleaner | DefenseKind::MeanThreshold => {
            if candidates.len() < 2 {
                warnings.push("fewer than two finite updates; scoring skipped".into());
                return Ok((FilterDecision::accept_all(ids()), Vec::new(), None));
            }
            let cvae = cvae.expect("CVAE is trained for scoring defenses");
            let scoring = score_clients(
                candidates,
                &env.spec,
                &env.trigger,
                &cfg.layer_mask(),
                cvae,
                &cfg.geomed_options(),
            )?;
            if scoring.geomed_unconverged > 0 {
                warnings.push(format!(
                    "{} trigger samples hit the geometric-median iteration cap",
                    scoring.geomed_unconverged
                ));
            }
            let decision = if cfg.defense == DefenseKind::FlCleaner {
                trust_propagate(&scoring.scores, cfg.lambda)?
            } else {
                filter_mean_threshold(&scoring.scores)?
            };
            let scores = decision.mark(&scoring.scores);
            Ok((decision, scores, None))
        }
    }
}

/// Runs `cfg` and writes its reports to `out_dir`.
pub fn run_to_dir(cfg: &ExperimentConfig, out_dir: &Path) -> Result<RunOutput> {
    let out = run_experiment(cfg)?;
    emit_reports(&out, out_dir)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::testutil::random_data;
    use crate::nn::Shape;

    fn tiny() -> (ExperimentConfig, LabeledData, LabeledData) {
        let shape = Shape::new(1, 28, 28);
        let cfg = ExperimentConfig {
            num_clients: 6,
            rounds: 2,
            hidden: 8,
            local_epochs: 1,
            trigger_size: 20,
            warmup_epochs: 1,
            harvest_epochs: 2,
            cvae_epochs: 2,
            cvae_hidden: 8,
            cvae_latent: 2,
            ..Default::default()
        };
        (cfg, random_data(120, shape, 10, 1), random_data(60, shape, 10, 2))
    }

    #[test]
    fn metrics_count_roles() {
        let d = FilterDecision {
            benign_ids: vec![1, 2, 4, 5, 6, 7, 8, 9],
            blocked_ids: vec![0, 3],
            delta: 0.0,
            lambda: 0.3,
        };
        let spec = ModelSpec::mlp(Shape::flat(4), 2, 10, 0);
        let w = WeightVector::zeros(spec.param_count().unwrap());
        let data = random_data(10, Shape::flat(4), 10, 0);
        let ids: Vec<usize> = (0..10).collect();
        let m = compute_metrics(&d, &ids, &[0, 3, 5, 7], &w, &spec, &data, &data).unwrap();
        assert_eq!((m.recall, m.fpr, m.no_attackers), (0.5, 0.0, false));
        let none = compute_metrics(&d, &ids, &[], &w, &spec, &data, &data).unwrap();
        assert_eq!((none.recall, none.no_attackers), (1.0, true));
        assert!((none.fpr - 0.2).abs() < 1e-15);
    }

    #[test]
    fn runs_are_deterministic_and_conserve_clients() {
        let (cfg, train, test) = tiny();
        let cfg = ExperimentConfig { attack: AttackName::SignFlip, ..cfg };
        let a = run_experiment_with(&cfg, &train, &test).unwrap();
        let b = run_experiment_with(&cfg, &train, &test).unwrap();
        assert_eq!(rounds_csv(&a.reports), rounds_csv(&b.reports));
        assert_eq!(a.global, b.global);
        for r in &a.reports {
            assert_eq!(r.benign_ids.len() + r.blocked_ids.len(), r.selected.len());
            assert_eq!(r.scores.len(), r.selected.len());
        }
    }

    #[test]
    fn no_defense_without_attackers_is_plain_fedavg() {
        let (cfg, train, test) = tiny();
        let cfg = ExperimentConfig { defense: DefenseKind::None, ..cfg };
        let out = run_experiment_with(&cfg, &train, &test).unwrap();
        let env = Environment::prepare(&cfg, &train, &test).unwrap();
        let mut global = init_model(&env.spec).unwrap();
        for r in &out.reports {
            let updates: Vec<WeightVector> = r
                .selected
                .iter()
                .map(|&c| {
                    let p = cfg.train_params(derive_seed(cfg.seed_init, &[TAG_TRAIN, r.round as u64, c as u64]));
                    train_local(&global, &env.spec, &env.clients[c], &p, None).unwrap()
                })
                .collect();
            let sizes: Vec<usize> = r.selected.iter().map(|&c| env.clients[c].len()).collect();
            global = aggregate_fedavg(&updates.iter().collect::<Vec<_>>(), &sizes).unwrap();
            assert!(r.blocked_ids.is_empty());
        }
        assert_eq!(out.global, global);
    }
}
