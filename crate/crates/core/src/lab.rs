//! Synthetic ground-truth generation and end-to-end experiments.
//!
//! The lab generates a known basis, annotator cohorts with known simplex
//! weights, and Boltzmann-sampled preference data, then runs the full
//! pipeline against that ground truth: recovery experiments check Stage-1
//! training against the generating model, and cohort-shift experiments
//! exercise weight-only adaptation, jury assembly, and all four voting rules
//! on configured candidate slates.

use std::collections::BTreeMap;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Dirichlet, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DataError, ItemCatalog, PreferenceDataset, PreferenceRecord};
use crate::jury::{jury_profile, select_jury, JuryError, JuryPool};
use crate::optim::{fit_weights, train_joint, TrainConfig, TrainError, TrainReport};
use crate::reward::{
    bt_prob, dataset_nll, personal_reward, preference_accuracy, BasisModel, ModelError,
    WeightEntry, WeightTable,
};
use crate::scalar::Scalar;
use crate::voting::{apply_rule, mean_pairwise_spearman, VotingError, VotingRule};

#[derive(Debug, Error)]
pub enum LabError {
    #[error("invalid experiment spec: {0}")]
    InvalidSpec(String),
    #[error("catalog has {items} item(s); need at least 2 to sample pairs")]
    CatalogTooSmall { items: usize },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Jury(#[from] JuryError),
    #[error(transparent)]
    Voting(#[from] VotingError),
}

/// How a cohort's true weight vectors are drawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WeightDistribution {
    /// Dirichlet over the K heads; a single alpha broadcasts to all heads.
    Dirichlet { alpha: Vec<f64> },
    /// Exact one-hot vectors, the head drawn from the categorical
    /// distribution `p` (normalized). Models populations whose preferences
    /// collapse onto single reward axes.
    OneHotMixture { p: Vec<f64> },
}

/// One synthetic cohort: its tag, size, and weight distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortSpec {
    pub cohort_id: String,
    pub size: usize,
    pub weights: WeightDistribution,
}

/// Everything needed to generate a [`GroundTruth`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthConfig {
    pub k: usize,
    pub d: usize,
    /// Number of catalog items to generate.
    pub items: usize,
    pub seed: u64,
    pub cohorts: Vec<CohortSpec>,
}

impl Default for GroundTruthConfig {
    fn default() -> Self {
        Self {
            k: 4,
            d: 16,
            items: 200,
            seed: 0,
            cohorts: vec![CohortSpec {
                cohort_id: "t0".into(),
                size: 50,
                weights: WeightDistribution::Dirichlet { alpha: vec![0.3] },
            }],
        }
    }
}

/// A generating model the experiments can score against: true basis, true
/// annotator weights with cohort tags, and the item catalog.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth<F = f64> {
    pub basis_true: BasisModel<F>,
    pub weights_true: WeightTable<F>,
    pub catalog: ItemCatalog<F>,
}

fn draw_weights<F: Scalar>(
    dist: &WeightDistribution,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<F>, LabError> {
    match dist {
        WeightDistribution::Dirichlet { alpha } => {
            let alphas: Vec<f64> = match alpha.len() {
                1 => vec![alpha[0]; k],
                n if n == k => alpha.clone(),
                n => {
                    return Err(LabError::InvalidSpec(format!(
                        "dirichlet alpha has length {n}; expected 1 or K = {k}"
                    )))
                }
            };
            if alphas.iter().any(|&a| !(a.is_finite() && a > 0.0)) {
                return Err(LabError::InvalidSpec(
                    "dirichlet alphas must be positive".into(),
                ));
            }
            let dirichlet = Dirichlet::new(&alphas)
                .map_err(|e| LabError::InvalidSpec(format!("dirichlet: {e}")))?;
            let raw: Vec<f64> = dirichlet.sample(rng);
            let sum: f64 = raw.iter().sum();
            Ok(raw.into_iter().map(|x| F::lit(x / sum)).collect())
        }
        WeightDistribution::OneHotMixture { p } => {
            if p.len() != k {
                return Err(LabError::InvalidSpec(format!(
                    "one_hot_mixture p has length {}; expected K = {k}",
                    p.len()
                )));
            }
            let total: f64 = p.iter().sum();
            if p.iter().any(|&x| !(x.is_finite() && x >= 0.0)) || total <= 0.0 {
                return Err(LabError::InvalidSpec(
                    "one_hot_mixture p must be nonnegative with positive sum".into(),
                ));
            }
            let draw: f64 = rng.gen_range(0.0..total);
            let mut acc = 0.0;
            let mut head = k - 1;
            for (idx, &mass) in p.iter().enumerate() {
                acc += mass;
                if draw < acc {
                    head = idx;
                    break;
                }
            }
            let mut w = vec![F::zero(); k];
            w[head] = F::one();
            Ok(w)
        }
    }
}

/// Generates a seeded ground truth: standard-normal item embeddings, basis
/// rows scaled by `1/sqrt(d)`, zero biases, beta = 1, and cohort weights
/// drawn per spec. Deterministic given the config.
pub fn generate_ground_truth<F: Scalar>(
    cfg: &GroundTruthConfig,
) -> Result<GroundTruth<F>, LabError> {
    if cfg.k < 1 || cfg.d < 1 {
        return Err(LabError::InvalidSpec("k and d must be >= 1".into()));
    }
    if cfg.items < 1 {
        return Err(LabError::InvalidSpec("items must be >= 1".into()));
    }
    if cfg.cohorts.is_empty() {
        return Err(LabError::InvalidSpec("need at least one cohort".into()));
    }
    for cohort in &cfg.cohorts {
        if cohort.size < 1 {
            return Err(LabError::InvalidSpec(format!(
                "cohort {:?} must be nonempty",
                cohort.cohort_id
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let catalog = ItemCatalog::new((0..cfg.items).map(|i| {
        let embedding: Vec<F> = (0..cfg.d)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                F::lit(z)
            })
            .collect();
        (format!("item-{i:04}"), embedding, None)
    }))?;

    let scale = F::lit(1.0 / (cfg.d as f64).sqrt());
    let theta: Vec<Vec<F>> = (0..cfg.k)
        .map(|_| {
            (0..cfg.d)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    F::lit(z) * scale
                })
                .collect()
        })
        .collect();
    let basis_true = BasisModel::new(theta, vec![F::zero(); cfg.k], F::one())?;

    let mut entries = BTreeMap::new();
    for cohort in &cfg.cohorts {
        for i in 0..cohort.size {
            let w = draw_weights(&cohort.weights, cfg.k, &mut rng)?;
            entries.insert(
                format!("{}-{i:03}", cohort.cohort_id),
                WeightEntry {
                    cohort_id: cohort.cohort_id.clone(),
                    w,
                },
            );
        }
    }
    let weights_true = WeightTable::new(entries, cfg.k)?;

    Ok(GroundTruth {
        basis_true,
        weights_true,
        catalog,
    })
}

/// Draws `per_annotator` labelled comparisons per annotator: item pairs
/// sampled uniformly (i != j), labels sampled from the Boltzmann choice
/// probability at rationality `beta`. Deterministic given the seed;
/// annotators are processed in sorted id order.
pub fn simulate_comparisons<F: Scalar>(
    truth: &GroundTruth<F>,
    per_annotator: usize,
    beta: f64,
    seed: u64,
) -> Result<PreferenceDataset, LabError> {
    let n_items = truth.catalog.len();
    if n_items < 2 {
        return Err(LabError::CatalogTooSmall { items: n_items });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let beta = F::lit(beta);

    // Personal rewards for every item, per annotator, computed once.
    let mut records = Vec::new();
    for (annotator_id, entry) in truth.weights_true.iter() {
        let rewards: Vec<F> = (0..n_items)
            .map(|idx| {
                let embedding = truth.catalog.embedding_at(idx).expect("valid index");
                let values = truth
                    .basis_true
                    .basis_rewards(embedding)
                    .expect("catalog dim matches basis");
                personal_reward(&entry.w, &values).expect("weight length matches K")
            })
            .collect();
        for _ in 0..per_annotator {
            let i = rng.gen_range(0..n_items);
            let mut j = rng.gen_range(0..n_items - 1);
            if j >= i {
                j += 1;
            }
            let p = bt_prob(rewards[i], rewards[j], beta).to_f64_lossy();
            let u: f64 = rng.gen();
            let (chosen, rejected) = if u < p { (i, j) } else { (j, i) };
            records.push(PreferenceRecord {
                annotator_id: annotator_id.to_string(),
                cohort_id: entry.cohort_id.clone(),
                chosen: truth.catalog.id_at(chosen).expect("valid").to_string(),
                rejected: truth.catalog.id_at(rejected).expect("valid").to_string(),
            });
        }
    }
    Ok(PreferenceDataset::new(records, &truth.catalog)?)
}

/// Mean total-variation distance between fitted and true weights under the
/// best head permutation; `None` when the Ks differ or the annotator sets
/// do not match.
pub fn best_permutation_tv<F: Scalar>(
    fitted: &WeightTable<F>,
    truth: &WeightTable<F>,
) -> Option<f64> {
    let ids: Vec<&str> = fitted.ids().collect();
    if ids.is_empty() || ids.len() != truth.len() {
        return None;
    }
    let k = fitted.get(ids[0])?.w.len();
    for id in &ids {
        if truth.get(id)?.w.len() != k || fitted.get(id)?.w.len() != k {
            return None;
        }
    }
    let mut best: Option<f64> = None;
    let mut perm: Vec<usize> = (0..k).collect();
    permute(&mut perm, 0, &mut |perm| {
        let mut total = 0.0;
        for id in &ids {
            let fit = &fitted.get(id).expect("checked").w;
            let tru = &truth.get(id).expect("checked").w;
            let tv: f64 = (0..k)
                .map(|kk| (fit[perm[kk]].to_f64_lossy() - tru[kk].to_f64_lossy()).abs())
                .sum::<f64>()
                / 2.0;
            total += tv;
        }
        let mean = total / ids.len() as f64;
        best = Some(best.map_or(mean, |b: f64| b.min(mean)));
    });
    best
}

fn permute(slots: &mut Vec<usize>, at: usize, visit: &mut impl FnMut(&[usize])) {
    if at == slots.len() {
        visit(slots);
        return;
    }
    for i in at..slots.len() {
        slots.swap(at, i);
        permute(slots, at + 1, visit);
        slots.swap(at, i);
    }
}

/// Config for the Stage-1 recovery experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RecoveryConfig {
    pub k_true: usize,
    pub d: usize,
    pub items: usize,
    pub n_annotators: usize,
    pub per_annotator: usize,
    pub beta: f64,
    pub seed: u64,
    pub holdout_fraction: f64,
    /// Allowed held-out accuracy gap (in fraction points) between the fitted
    /// model and the generator.
    pub accuracy_margin: f64,
    pub weights: WeightDistribution,
    pub train: TrainConfig,
}

impl Default for RecoveryConfig {
    fn default() -> Self {
        Self {
            k_true: 4,
            d: 16,
            items: 200,
            n_annotators: 50,
            per_annotator: 500,
            beta: 1.0,
            seed: 0,
            holdout_fraction: 0.2,
            accuracy_margin: 0.02,
            weights: WeightDistribution::Dirichlet { alpha: vec![0.3] },
            train: TrainConfig {
                k: 4,
                ..TrainConfig::default()
            },
        }
    }
}

/// Recovery metrics against the generating model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryReport {
    pub config: RecoveryConfig,
    pub fitted_holdout_accuracy: f64,
    pub truth_holdout_accuracy: f64,
    pub fitted_holdout_nll: f64,
    pub truth_holdout_nll: f64,
    /// Best-permutation mean total-variation distance between fitted and
    /// true weights; absent when K_fit != K_true.
    pub weight_alignment_tv: Option<f64>,
    pub meets_margin: bool,
    pub train_report: TrainReport,
}

/// Generates a ground truth, simulates data, trains Stage 1, and scores the
/// fit against the generator on a held-out split.
pub fn recovery_experiment(cfg: &RecoveryConfig) -> Result<RecoveryReport, LabError> {
    let truth_cfg = GroundTruthConfig {
        k: cfg.k_true,
        d: cfg.d,
        items: cfg.items,
        seed: cfg.seed,
        cohorts: vec![CohortSpec {
            cohort_id: "t0".into(),
            size: cfg.n_annotators,
            weights: cfg.weights.clone(),
        }],
    };
    let truth: GroundTruth = generate_ground_truth(&truth_cfg)?;
    let data = simulate_comparisons(&truth, cfg.per_annotator, cfg.beta, cfg.seed.wrapping_add(1))?;
    if data.is_empty() {
        return Err(LabError::Train(TrainError::EmptyDataset));
    }
    let (train, holdout) = data.split_holdout(cfg.holdout_fraction, cfg.seed.wrapping_add(2))?;
    let (model, weights, train_report) = train_joint(&train, &truth.catalog, &cfg.train)?;

    let fitted_holdout_accuracy =
        preference_accuracy(&model, &weights, &holdout, &truth.catalog)?;
    let truth_holdout_accuracy = preference_accuracy(
        &truth.basis_true,
        &truth.weights_true,
        &holdout,
        &truth.catalog,
    )?;
    let fitted_holdout_nll = dataset_nll(&model, &weights, &holdout, &truth.catalog)?;
    let truth_holdout_nll = dataset_nll(
        &truth.basis_true,
        &truth.weights_true,
        &holdout,
        &truth.catalog,
    )?;
    let weight_alignment_tv = if cfg.train.k == cfg.k_true {
        best_permutation_tv(&weights, &truth.weights_true)
    } else {
        None
    };
    let meets_margin = fitted_holdout_accuracy >= truth_holdout_accuracy - cfg.accuracy_margin;
    Ok(RecoveryReport {
        config: cfg.clone(),
        fitted_holdout_accuracy,
        truth_holdout_accuracy,
        fitted_holdout_nll,
        truth_holdout_nll,
        weight_alignment_tv,
        meets_margin,
        train_report,
    })
}

/// How a slate's candidate items are chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SlateItems {
    /// Explicit catalog item ids.
    Explicit { items: Vec<String> },
    /// A seeded sample of `count` distinct catalog items.
    Random { count: usize, seed: u64 },
}

/// One question slate for the voting stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlateSpec {
    pub question_id: String,
    pub slate: SlateItems,
}

/// One jury to assemble, identified by name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JuryQuotaSpec {
    pub name: String,
    pub quotas: BTreeMap<String, usize>,
    pub seed: u64,
}

/// Config for the cohort-shift experiment: train bases on the first cohort,
/// adapt the rest with small per-annotator budgets, then vote.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CohortShiftConfig {
    pub truth: GroundTruthConfig,
    /// Comparisons per annotator in the initial (training) cohort.
    pub per_annotator_initial: usize,
    /// Comparisons per annotator for each adapted cohort.
    pub adapt_comparisons: usize,
    pub beta: f64,
    pub seed: u64,
    pub train: TrainConfig,
    pub juries: Vec<JuryQuotaSpec>,
    pub slates: Vec<SlateSpec>,
}

impl Default for CohortShiftConfig {
    fn default() -> Self {
        let truth = GroundTruthConfig {
            k: 4,
            d: 16,
            items: 200,
            seed: 0,
            cohorts: vec![
                CohortSpec {
                    cohort_id: "base".into(),
                    size: 40,
                    weights: WeightDistribution::Dirichlet { alpha: vec![0.3] },
                },
                CohortSpec {
                    cohort_id: "era-a".into(),
                    size: 12,
                    weights: WeightDistribution::OneHotMixture {
                        p: vec![1.0, 0.0, 0.0, 0.0],
                    },
                },
                CohortSpec {
                    cohort_id: "era-b".into(),
                    size: 12,
                    weights: WeightDistribution::OneHotMixture {
                        p: vec![0.0, 1.0, 0.0, 0.0],
                    },
                },
            ],
        };
        let mk_jury = |name: &str, quotas: &[(&str, usize)], seed: u64| JuryQuotaSpec {
            name: name.into(),
            quotas: quotas
                .iter()
                .map(|(c, n)| (c.to_string(), *n))
                .collect(),
            seed,
        };
        Self {
            truth,
            per_annotator_initial: 300,
            adapt_comparisons: 30,
            beta: 1.0,
            seed: 0,
            train: TrainConfig {
                k: 4,
                ..TrainConfig::default()
            },
            juries: vec![
                mk_jury("base-only", &[("base", 10)], 11),
                mk_jury("era-a-only", &[("era-a", 10)], 12),
                mk_jury("era-b-only", &[("era-b", 10)], 13),
                mk_jury(
                    "all-periods",
                    &[("base", 10), ("era-a", 10), ("era-b", 10)],
                    14,
                ),
            ],
            slates: vec![SlateSpec {
                question_id: "q0".into(),
                slate: SlateItems::Random { count: 10, seed: 21 },
            }],
        }
    }
}

/// One row of the winners table: a jury voting on one slate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JuryRuleRow {
    pub jury: String,
    pub question_id: String,
    pub size: usize,
    /// Selected winner per rule, keyed by rule name.
    pub winners: BTreeMap<String, String>,
    /// Mean pairwise Spearman correlation among the jury's ballots.
    pub spearman: f64,
}

/// Cohort-shift results: the winners-by-rule table plus the training and
/// adaptation traces behind it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortShiftReport {
    pub config: CohortShiftConfig,
    pub rows: Vec<JuryRuleRow>,
    pub train_report: TrainReport,
    /// Per adapted cohort, in config order.
    pub adapt_reports: BTreeMap<String, TrainReport>,
    pub pool_size: usize,
}

fn resolve_slate(
    slate: &SlateItems,
    catalog: &ItemCatalog,
) -> Result<Vec<String>, LabError> {
    match slate {
        SlateItems::Explicit { items } => {
            if items.is_empty() {
                return Err(LabError::InvalidSpec("slate has no items".into()));
            }
            for id in items {
                if !catalog.contains(id) {
                    return Err(LabError::InvalidSpec(format!(
                        "slate item {id:?} is not in the catalog"
                    )));
                }
            }
            Ok(items.clone())
        }
        SlateItems::Random { count, seed } => {
            if *count < 1 || *count > catalog.len() {
                return Err(LabError::InvalidSpec(format!(
                    "random slate count {count} out of range 1..={}",
                    catalog.len()
                )));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            let mut ids: Vec<String> = rand::seq::index::sample(&mut rng, catalog.len(), *count)
                .iter()
                .map(|i| catalog.id_at(i).expect("valid").to_string())
                .collect();
            ids.sort_unstable();
            Ok(ids)
        }
    }
}

/// Runs the full shift pipeline: Stage-1 training on the first cohort,
/// Stage-3 adaptation for every later cohort, jury selection per quota spec,
/// and all four voting rules on every slate.
pub fn cohort_shift_experiment(cfg: &CohortShiftConfig) -> Result<CohortShiftReport, LabError> {
    if cfg.truth.cohorts.len() < 2 {
        return Err(LabError::InvalidSpec(
            "cohort shift needs at least 2 cohorts".into(),
        ));
    }
    let truth: GroundTruth = generate_ground_truth(&cfg.truth)?;
    let initial_cohort = cfg.truth.cohorts[0].cohort_id.clone();

    let initial_data = simulate_comparisons(
        &truth,
        cfg.per_annotator_initial,
        cfg.beta,
        cfg.seed.wrapping_add(1),
    )?
    .retain_cohorts(&[initial_cohort.as_str()]);
    let (basis, initial_weights, train_report) =
        train_joint(&initial_data, &truth.catalog, &cfg.train)?;

    let mut pool = JuryPool::new(basis, initial_weights)?;
    let mut adapt_reports = BTreeMap::new();
    for (idx, cohort) in cfg.truth.cohorts.iter().enumerate().skip(1) {
        let adapt_data = simulate_comparisons(
            &truth,
            cfg.adapt_comparisons,
            cfg.beta,
            cfg.seed.wrapping_add(2 + idx as u64),
        )?
        .retain_cohorts(&[cohort.cohort_id.as_str()]);
        let (new_weights, report) =
            fit_weights(pool.basis(), &adapt_data, &truth.catalog, &cfg.train)?;
        pool = pool.add_cohort(&new_weights, &cohort.cohort_id)?;
        adapt_reports.insert(cohort.cohort_id.clone(), report);
    }

    let mut rows = Vec::new();
    for jury_spec in &cfg.juries {
        let jury = select_jury(&pool, &jury_spec.quotas, jury_spec.seed)?;
        for slate_spec in &cfg.slates {
            let slate = resolve_slate(&slate_spec.slate, &truth.catalog)?;
            let profile = jury_profile(&jury, &pool, &slate, &truth.catalog)?;
            let mut winners = BTreeMap::new();
            for rule in VotingRule::ALL {
                let outcome = apply_rule(&profile, rule)?;
                winners.insert(rule.name().to_string(), outcome.selected);
            }
            let spearman = if jury.juror_ids.len() >= 2 && slate.len() >= 2 {
                mean_pairwise_spearman(&profile)?
            } else {
                1.0
            };
            rows.push(JuryRuleRow {
                jury: jury_spec.name.clone(),
                question_id: slate_spec.question_id.clone(),
                size: jury.juror_ids.len(),
                winners,
                spearman,
            });
        }
    }

    Ok(CohortShiftReport {
        config: cfg.clone(),
        rows,
        train_report,
        adapt_reports,
        pool_size: pool.len(),
    })
}

/// Declarative experiment selector for config files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "experiment", rename_all = "snake_case")]
pub enum ExperimentConfig {
    Recovery(RecoveryConfig),
    CohortShift(CohortShiftConfig),
}

/// Report union matching [`ExperimentConfig`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "experiment", rename_all = "snake_case")]
pub enum ExperimentReport {
    Recovery(RecoveryReport),
    CohortShift(CohortShiftReport),
}

/// Dispatches on the experiment kind.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport, LabError> {
    Ok(match cfg {
        ExperimentConfig::Recovery(cfg) => ExperimentReport::Recovery(recovery_experiment(cfg)?),
        ExperimentConfig::CohortShift(cfg) => {
            ExperimentReport::CohortShift(cohort_shift_experiment(cfg)?)
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::jury::rank_candidates;
    use crate::voting::{Ballot, Profile};

    fn one_hot_cfg(k: usize, head: usize) -> WeightDistribution {
        let mut p = vec![0.0; k];
        p[head] = 1.0;
        WeightDistribution::OneHotMixture { p }
    }

    #[test]
    fn ground_truth_is_deterministic_and_shaped() {
        let cfg = GroundTruthConfig {
            k: 3,
            d: 5,
            items: 20,
            seed: 9,
            cohorts: vec![
                CohortSpec {
                    cohort_id: "a".into(),
                    size: 4,
                    weights: WeightDistribution::Dirichlet { alpha: vec![0.5] },
                },
                CohortSpec {
                    cohort_id: "b".into(),
                    size: 3,
                    weights: one_hot_cfg(3, 1),
                },
            ],
        };
        let t1: GroundTruth = generate_ground_truth(&cfg).unwrap();
        let t2: GroundTruth = generate_ground_truth(&cfg).unwrap();
        assert_eq!(t1, t2);
        assert_eq!(t1.catalog.len(), 20);
        assert_eq!(t1.basis_true.k(), 3);
        assert_eq!(t1.weights_true.len(), 7);
        t1.weights_true.validate(3).unwrap();

        // One-hot cohort sits exactly on head 1.
        for (id, entry) in t1.weights_true.iter() {
            if id.starts_with("b-") {
                assert_eq!(entry.w, vec![0.0, 1.0, 0.0]);
            }
        }
    }

    #[test]
    fn ground_truth_rejects_bad_specs() {
        let mut cfg = GroundTruthConfig::default();
        cfg.cohorts[0].weights = WeightDistribution::Dirichlet { alpha: vec![0.5, 0.5] };
        assert!(matches!(
            generate_ground_truth::<f64>(&cfg).unwrap_err(),
            LabError::InvalidSpec(_)
        ));
        let mut cfg = GroundTruthConfig::default();
        cfg.cohorts[0].size = 0;
        assert!(generate_ground_truth::<f64>(&cfg).is_err());
    }

    fn two_item_truth(gap: f64) -> GroundTruth {
        // One head reading the single coordinate; rewards are `gap` and 0.
        let basis = BasisModel::new(vec![vec![1.0]], vec![0.0], 1.0).unwrap();
        let catalog = ItemCatalog::new(vec![
            ("hi".into(), vec![gap], None),
            ("lo".into(), vec![0.0], None),
        ])
        .unwrap();
        let mut entries = BTreeMap::new();
        entries.insert(
            "solo".to_string(),
            WeightEntry {
                cohort_id: "t0".into(),
                w: vec![1.0],
            },
        );
        GroundTruth {
            basis_true: basis,
            weights_true: WeightTable::new(entries, 1).unwrap(),
            catalog,
        }
    }

    #[test]
    fn simulate_matches_choice_probabilities() {
        // beta = 0: empirical rate 0.5 within 3 sigma.
        let truth = two_item_truth(3f64.ln());
        let data = simulate_comparisons(&truth, 2000, 0.0, 4).unwrap();
        let hi_rate =
            data.records().iter().filter(|r| r.chosen == "hi").count() as f64 / 2000.0;
        let sigma = 0.5 / (2000f64).sqrt();
        assert!((hi_rate - 0.5).abs() < 3.0 * sigma, "rate {hi_rate}");

        // beta = 1, reward gap ln 3: rate 0.75 within 3 sigma.
        let data = simulate_comparisons(&truth, 2000, 1.0, 5).unwrap();
        let hi_rate =
            data.records().iter().filter(|r| r.chosen == "hi").count() as f64 / 2000.0;
        let sigma = (0.75f64 * 0.25 / 2000.0).sqrt();
        assert!((hi_rate - 0.75).abs() < 3.0 * sigma, "rate {hi_rate}");

        // Very large beta: labels follow the reward sign exactly.
        let data = simulate_comparisons(&truth, 500, 1e6, 6).unwrap();
        assert!(data.records().iter().all(|r| r.chosen == "hi"));

        // Determinism.
        assert_eq!(
            simulate_comparisons(&truth, 50, 1.0, 7).unwrap(),
            simulate_comparisons(&truth, 50, 1.0, 7).unwrap()
        );
    }

    #[test]
    fn simulate_requires_two_items() {
        let truth = {
            let mut t = two_item_truth(1.0);
            t.catalog = ItemCatalog::new(vec![("only".into(), vec![1.0], None)]).unwrap();
            t
        };
        assert!(matches!(
            simulate_comparisons(&truth, 10, 1.0, 0).unwrap_err(),
            LabError::CatalogTooSmall { items: 1 }
        ));
    }

    #[test]
    fn disjoint_one_hot_cohorts_agree_within_not_across() {
        let cfg = GroundTruthConfig {
            k: 2,
            d: 8,
            items: 60,
            seed: 3,
            cohorts: vec![
                CohortSpec {
                    cohort_id: "first".into(),
                    size: 5,
                    weights: one_hot_cfg(2, 0),
                },
                CohortSpec {
                    cohort_id: "second".into(),
                    size: 5,
                    weights: one_hot_cfg(2, 1),
                },
            ],
        };
        let truth: GroundTruth = generate_ground_truth(&cfg).unwrap();
        let slate: Vec<String> = (0..12).map(|i| format!("item-{i:04}")).collect();

        let ballots_for = |prefix: &str| -> Vec<Ballot> {
            truth
                .weights_true
                .iter()
                .filter(|(id, _)| id.starts_with(prefix))
                .map(|(id, e)| {
                    rank_candidates(id, &e.w, &truth.basis_true, &slate, &truth.catalog)
                        .unwrap()
                })
                .collect()
        };
        let within = |prefix: &str| -> f64 {
            let profile = Profile::new(slate.clone(), ballots_for(prefix)).unwrap();
            mean_pairwise_spearman(&profile).unwrap()
        };
        // Cross-cohort mean: one juror from each cohort per pair.
        let firsts = ballots_for("first");
        let seconds = ballots_for("second");
        let mut cross_total = 0.0;
        let mut cross_pairs = 0;
        for a in &firsts {
            for b in &seconds {
                let pair = Profile::new(slate.clone(), vec![a.clone(), b.clone()]).unwrap();
                cross_total += mean_pairwise_spearman(&pair).unwrap();
                cross_pairs += 1;
            }
        }
        let cross = cross_total / cross_pairs as f64;

        assert_eq!(within("first"), 1.0, "identical weights rank identically");
        assert_eq!(within("second"), 1.0);
        assert!(
            within("first") > cross + 0.5,
            "within {} should dwarf cross {cross}",
            within("first")
        );
    }

    #[test]
    fn recovery_smoke_meets_margin_on_small_instance() {
        let cfg = RecoveryConfig {
            k_true: 2,
            d: 6,
            items: 60,
            n_annotators: 8,
            per_annotator: 150,
            accuracy_margin: 0.03,
            train: TrainConfig {
                k: 2,
                max_epochs: 300,
                ..TrainConfig::default()
            },
            ..RecoveryConfig::default()
        };
        let report = recovery_experiment(&cfg).unwrap();
        assert!(
            report.meets_margin,
            "fitted {} vs truth {}",
            report.fitted_holdout_accuracy, report.truth_holdout_accuracy
        );
        assert!(report.weight_alignment_tv.unwrap() <= 1.0);
        for pair in report.train_report.epoch_nll.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-9);
        }
    }

    #[test]
    fn zero_comparisons_is_an_error() {
        let cfg = RecoveryConfig {
            per_annotator: 0,
            ..RecoveryConfig::default()
        };
        assert!(matches!(
            recovery_experiment(&cfg).unwrap_err(),
            LabError::Train(TrainError::EmptyDataset)
        ));
    }

    #[test]
    fn cohort_shift_produces_table_rows_deterministically() {
        let cfg = CohortShiftConfig {
            truth: GroundTruthConfig {
                k: 2,
                d: 6,
                items: 40,
                seed: 2,
                cohorts: vec![
                    CohortSpec {
                        cohort_id: "base".into(),
                        size: 8,
                        weights: WeightDistribution::Dirichlet { alpha: vec![0.4] },
                    },
                    CohortSpec {
                        cohort_id: "late".into(),
                        size: 4,
                        weights: one_hot_cfg(2, 1),
                    },
                ],
            },
            per_annotator_initial: 120,
            adapt_comparisons: 30,
            train: TrainConfig {
                k: 2,
                max_epochs: 150,
                ..TrainConfig::default()
            },
            juries: vec![JuryQuotaSpec {
                name: "mixed".into(),
                quotas: BTreeMap::from([("base".to_string(), 3), ("late".to_string(), 3)]),
                seed: 5,
            }],
            slates: vec![SlateSpec {
                question_id: "q0".into(),
                slate: SlateItems::Random { count: 6, seed: 8 },
            }],
            ..CohortShiftConfig::default()
        };
        let report = cohort_shift_experiment(&cfg).unwrap();
        assert_eq!(report.rows.len(), 1);
        let row = &report.rows[0];
        assert_eq!(row.size, 6);
        assert_eq!(row.winners.len(), 4);
        assert!(row.spearman >= -1.0 && row.spearman <= 1.0);
        assert_eq!(report.pool_size, 12);
        assert!(report.adapt_reports.contains_key("late"));

        let rerun = cohort_shift_experiment(&cfg).unwrap();
        assert_eq!(report, rerun);
    }

    #[test]
    fn experiment_config_round_trips_through_serde() {
        let cfg = ExperimentConfig::CohortShift(CohortShiftConfig::default());
        let json = serde_json::to_string_pretty(&cfg).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(cfg, back);
        assert!(json.contains("\"experiment\": \"cohort_shift\""));
    }
}
