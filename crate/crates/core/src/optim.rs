//! Projected gradient training for reward bases and simplex weights.
//!
//! Stage 1 ([`train_joint`]) fits the basis heads and every annotator's
//! weights together on an initial dataset. Stage 3 ([`fit_weights`]) fits
//! weights for new annotators over a frozen basis, one independent solve per
//! annotator.
//!
//! Both trainers run deterministic full-batch projected gradient descent
//! with per-epoch step halving: whenever a step would raise the objective,
//! the learning rates are halved and the epoch retried from its starting
//! point, which keeps the accepted-epoch objective non-increasing without
//! depending on minibatch order.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{ItemCatalog, PreferenceDataset};
use crate::reward::{logistic, softplus, BasisModel, ModelError, WeightEntry, WeightTable};
use crate::scalar::Scalar;

/// Hard cap on step halvings per solve; past this point the step is
/// effectively zero and training stops.
pub const MAX_HALVINGS: usize = 20;

/// Errors raised by the trainers.
#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training dataset is empty")]
    EmptyDataset,
    #[error("objective became non-finite at epoch {epoch}")]
    NonFiniteNll { epoch: usize },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Hyperparameters for both trainers. Defaults follow the artifact-wide
/// conventions (K = 8 heads, beta fixed at 1); they are configuration, not
/// contract.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, bound(serialize = "F: Scalar", deserialize = "F: Scalar"))]
pub struct TrainConfig<F = f64> {
    /// Number of basis heads to fit (ignored by [`fit_weights`], which uses
    /// the frozen model's K).
    pub k: usize,
    pub max_epochs: usize,
    pub lr_theta: F,
    pub lr_w: F,
    /// Stop once the relative objective improvement over a full epoch drops
    /// below this.
    pub tolerance: F,
    pub seed: u64,
    /// Standard deviation of the Gaussian init for theta.
    pub init_scale: F,
    /// Optional train/holdout split fraction, consumed by callers that want
    /// held-out metrics; the trainers themselves never split.
    pub holdout_fraction: Option<f64>,
    /// Coefficient of an L2 penalty on theta added to the mean-per-record
    /// objective. Zero (the default) reproduces the plain likelihood; when
    /// nonzero, step acceptance tracks the penalized objective while the
    /// report still records the raw NLL.
    pub l2_theta: F,
}

impl<F: Scalar> Default for TrainConfig<F> {
    fn default() -> Self {
        Self {
            k: 8,
            max_epochs: 500,
            lr_theta: F::lit(0.05),
            lr_w: F::lit(0.1),
            tolerance: F::lit(1e-6),
            seed: 0,
            init_scale: F::lit(0.01),
            holdout_fraction: None,
            l2_theta: F::zero(),
        }
    }
}

impl<F: Scalar> TrainConfig<F> {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.k < 1 {
            return Err(TrainError::InvalidConfig("k must be >= 1".into()));
        }
        if self.max_epochs < 1 {
            return Err(TrainError::InvalidConfig("max_epochs must be >= 1".into()));
        }
        for (name, value) in [
            ("lr_theta", self.lr_theta),
            ("lr_w", self.lr_w),
            ("tolerance", self.tolerance),
            ("init_scale", self.init_scale),
        ] {
            if !(value.is_finite() && value > F::zero()) {
                return Err(TrainError::InvalidConfig(format!(
                    "{name} must be positive, got {value}"
                )));
            }
        }
        if !(self.l2_theta.is_finite() && self.l2_theta >= F::zero()) {
            return Err(TrainError::InvalidConfig("l2_theta must be >= 0".into()));
        }
        if let Some(f) = self.holdout_fraction {
            if !(f > 0.0 && f < 1.0) {
                return Err(TrainError::InvalidConfig(format!(
                    "holdout_fraction must lie in (0,1), got {f}"
                )));
            }
        }
        Ok(())
    }
}

/// Which stopping rule ended a training run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    /// Relative objective improvement fell below the tolerance.
    Tolerance,
    /// The epoch budget ran out.
    MaxEpochs,
    /// The halving budget ran out while the objective still would not
    /// decrease.
    HalvingLimit,
}

/// One learning-rate halving, recorded for the audit trail.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HalvingEvent<F = f64> {
    pub epoch: usize,
    /// The annotator whose solve halved (weight-only fitting); `None` for
    /// the joint trainer.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub annotator: Option<String>,
    pub lr_theta: F,
    pub lr_w: F,
}

/// Training trace: per-epoch NLL, halvings, and the stopping rule that fired.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport<F = f64> {
    pub initial_nll: F,
    /// Raw dataset NLL after each accepted epoch; non-increasing when
    /// `l2_theta` is zero.
    pub epoch_nll: Vec<F>,
    pub final_nll: F,
    pub epochs: usize,
    pub halvings: Vec<HalvingEvent<F>>,
    pub stop: StopReason,
}

/// Euclidean projection onto the probability simplex, by the exact
/// sort-and-threshold rule: with `u` the entries sorted descending and
/// `tau = (sum_{i<=rho} u_i - 1) / rho` for the largest feasible prefix
/// `rho`, the projection is `max(v_i - tau, 0)` componentwise.
pub fn project_to_simplex<F: Scalar>(v: &[F]) -> Vec<F> {
    assert!(!v.is_empty(), "cannot project an empty vector");
    let mut sorted = v.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).expect("finite entries"));
    let mut prefix = F::zero();
    let mut tau = F::zero();
    for (i, &u) in sorted.iter().enumerate() {
        prefix += u;
        let t = (prefix - F::one()) / F::from_usize(i + 1).expect("small integer");
        if u - t > F::zero() {
            tau = t;
        }
    }
    v.iter().map(|&x| (x - tau).max(F::zero())).collect()
}

// Compact index form of a dataset: annotators and items as integers so the
// epoch loop never touches strings.
struct Indexed {
    annotators: Vec<String>,
    cohorts: Vec<String>,
    counts: Vec<usize>,
    /// Catalog indices of the items actually referenced.
    item_slots: Vec<usize>,
    /// Per record: (annotator, chosen, rejected), the item fields indexing
    /// `item_slots`.
    records: Vec<(u32, u32, u32)>,
}

impl Indexed {
    fn build<F: Scalar>(
        data: &PreferenceDataset,
        catalog: &ItemCatalog<F>,
    ) -> Result<Self, TrainError> {
        if data.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        let mut annotators: Vec<String> = data
            .records()
            .iter()
            .map(|r| r.annotator_id.clone())
            .collect();
        annotators.sort_unstable();
        annotators.dedup();
        let ann_index: BTreeMap<&str, u32> = annotators
            .iter()
            .enumerate()
            .map(|(i, id)| (id.as_str(), i as u32))
            .collect();

        let mut cohorts = vec![String::new(); annotators.len()];
        let mut item_index: BTreeMap<usize, u32> = BTreeMap::new();
        let mut item_slots = Vec::new();
        let mut counts = vec![0usize; annotators.len()];
        let mut records = Vec::with_capacity(data.len());
        for rec in data.records() {
            let ann = ann_index[rec.annotator_id.as_str()];
            if cohorts[ann as usize].is_empty() {
                cohorts[ann as usize] = rec.cohort_id.clone();
            }
            let mut slot_of = |item_id: &str| -> Result<u32, TrainError> {
                let cat_idx = catalog.index_of(item_id).ok_or_else(|| {
                    TrainError::Model(ModelError::MissingItem {
                        item_id: item_id.to_string(),
                    })
                })?;
                Ok(*item_index.entry(cat_idx).or_insert_with(|| {
                    item_slots.push(cat_idx);
                    (item_slots.len() - 1) as u32
                }))
            };
            let ci = slot_of(&rec.chosen)?;
            let cj = slot_of(&rec.rejected)?;
            counts[ann as usize] += 1;
            records.push((ann, ci, cj));
        }
        Ok(Self {
            annotators,
            cohorts,
            counts,
            item_slots,
            records,
        })
    }
}

struct Workspace<'a, F> {
    embeddings: Vec<&'a [F]>,
    k: usize,
    d: usize,
    beta: F,
}

impl<'a, F: Scalar> Workspace<'a, F> {
    fn new(
        indexed: &Indexed,
        catalog: &'a ItemCatalog<F>,
        k: usize,
        beta: F,
    ) -> Self {
        let embeddings = indexed
            .item_slots
            .iter()
            .map(|&slot| catalog.embedding_at(slot).expect("validated item"))
            .collect::<Vec<_>>();
        let d = catalog.dim();
        Self {
            embeddings,
            k,
            d,
            beta,
        }
    }

    /// Basis values for every referenced item under the current heads.
    fn basis_values(&self, theta: &[Vec<F>], bias: &[F]) -> Vec<Vec<F>> {
        self.embeddings
            .iter()
            .map(|x| {
                theta
                    .iter()
                    .zip(bias)
                    .map(|(row, &b)| {
                        let dot: F = row.iter().zip(x.iter()).map(|(&t, &e)| t * e).sum();
                        dot + b
                    })
                    .collect()
            })
            .collect()
    }

    fn nll(&self, indexed: &Indexed, values: &[Vec<F>], w: &[Vec<F>]) -> F {
        let mut total = F::zero();
        for &(ann, ci, cj) in &indexed.records {
            let wn = &w[ann as usize];
            let vi = &values[ci as usize];
            let vj = &values[cj as usize];
            let mut gap = F::zero();
            for kk in 0..self.k {
                gap += wn[kk] * (vi[kk] - vj[kk]);
            }
            total += softplus(-(self.beta * gap));
        }
        total
    }

    /// Gradient sums over records: (d/d theta, d/d w_n).
    fn gradients(
        &self,
        indexed: &Indexed,
        values: &[Vec<F>],
        w: &[Vec<F>],
    ) -> (Vec<Vec<F>>, Vec<Vec<F>>) {
        let mut grad_theta = vec![vec![F::zero(); self.d]; self.k];
        let mut grad_w = vec![vec![F::zero(); self.k]; w.len()];
        for &(ann, ci, cj) in &indexed.records {
            let wn = &w[ann as usize];
            let vi = &values[ci as usize];
            let vj = &values[cj as usize];
            let mut gap = F::zero();
            for kk in 0..self.k {
                gap += wn[kk] * (vi[kk] - vj[kk]);
            }
            let s = logistic(-(self.beta * gap));
            let coeff = -(self.beta * s);
            let xi = self.embeddings[ci as usize];
            let xj = self.embeddings[cj as usize];
            let gw = &mut grad_w[ann as usize];
            for kk in 0..self.k {
                gw[kk] += coeff * (vi[kk] - vj[kk]);
                let scale = coeff * wn[kk];
                let row = &mut grad_theta[kk];
                for (slot, (&xiv, &xjv)) in row.iter_mut().zip(xi.iter().zip(xj.iter())) {
                    *slot += scale * (xiv - xjv);
                }
            }
        }
        (grad_theta, grad_w)
    }
}

fn l2_penalty<F: Scalar>(theta: &[Vec<F>], l2: F, n_records: usize) -> F {
    if l2 == F::zero() {
        return F::zero();
    }
    let sq: F = theta.iter().flatten().map(|&t| t * t).sum();
    l2 * F::from_usize(n_records).expect("record count") * sq
}

/// Stage 1: jointly fits basis heads and per-annotator simplex weights by
/// full-batch projected gradient descent.
///
/// Heads initialize from a seeded Gaussian, biases at zero, and every weight
/// vector at uniform. Theta steps use the record-mean gradient; each
/// annotator's weight step uses the mean over that annotator's records,
/// followed by simplex projection. Deterministic given (record order, seed,
/// config).
pub fn train_joint<F: Scalar>(
    data: &PreferenceDataset,
    catalog: &ItemCatalog<F>,
    cfg: &TrainConfig<F>,
) -> Result<(BasisModel<F>, WeightTable<F>, TrainReport<F>), TrainError> {
    cfg.validate()?;
    let indexed = Indexed::build(data, catalog)?;
    let n_records = indexed.records.len();
    let n_ann = indexed.annotators.len();
    let k = cfg.k;
    let d = catalog.dim();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut theta = vec![vec![F::zero(); d]; k];
    for row in &mut theta {
        for slot in row.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *slot = F::lit(z) * cfg.init_scale;
        }
    }
    let bias = vec![F::zero(); k];
    let uniform = F::one() / F::from_usize(k).expect("k");
    let mut w = vec![vec![uniform; k]; n_ann];

    let beta = F::one();
    let ws = Workspace::new(&indexed, catalog, k, beta);
    let inv_records = F::one() / F::from_usize(n_records).expect("records");

    let values = ws.basis_values(&theta, &bias);
    let mut nll_prev = ws.nll(&indexed, &values, &w);
    if !nll_prev.is_finite() {
        return Err(TrainError::NonFiniteNll { epoch: 0 });
    }
    let initial_nll = nll_prev;
    let mut obj_prev = nll_prev + l2_penalty(&theta, cfg.l2_theta, n_records);

    let mut lr_t = cfg.lr_theta;
    let mut lr_w = cfg.lr_w;
    let mut halvings_used = 0usize;
    let mut halvings = Vec::new();
    let mut epoch_nll = Vec::new();
    let mut epochs = 0usize;
    let mut stop = None;
    let two = F::lit(2.0);
    let tiny = F::lit(1e-300).max(F::min_positive_value());

    for epoch in 1..=cfg.max_epochs {
        let values = ws.basis_values(&theta, &bias);
        let (grad_theta, grad_w) = ws.gradients(&indexed, &values, &w);
        loop {
            let mut theta_new = theta.clone();
            for kk in 0..k {
                for jj in 0..d {
                    let mean_grad = grad_theta[kk][jj] * inv_records
                        + two * cfg.l2_theta * theta[kk][jj];
                    theta_new[kk][jj] = theta[kk][jj] - lr_t * mean_grad;
                }
            }
            let mut w_new = Vec::with_capacity(n_ann);
            for (ann, wn) in w.iter().enumerate() {
                let inv_count =
                    F::one() / F::from_usize(indexed.counts[ann]).expect("count");
                let stepped: Vec<F> = wn
                    .iter()
                    .zip(&grad_w[ann])
                    .map(|(&wk, &g)| wk - lr_w * g * inv_count)
                    .collect();
                w_new.push(project_to_simplex(&stepped));
            }
            let values_new = ws.basis_values(&theta_new, &bias);
            let nll_new = ws.nll(&indexed, &values_new, &w_new);
            let obj_new = nll_new + l2_penalty(&theta_new, cfg.l2_theta, n_records);
            if nll_new.is_finite() && obj_new <= obj_prev {
                theta = theta_new;
                w = w_new;
                let rel = (obj_prev - obj_new) / obj_prev.abs().max(tiny);
                obj_prev = obj_new;
                nll_prev = nll_new;
                epoch_nll.push(nll_new);
                epochs = epoch;
                if rel < cfg.tolerance {
                    stop = Some(StopReason::Tolerance);
                }
                break;
            }
            if halvings_used == MAX_HALVINGS {
                if !nll_new.is_finite() {
                    return Err(TrainError::NonFiniteNll { epoch });
                }
                stop = Some(StopReason::HalvingLimit);
                break;
            }
            halvings_used += 1;
            lr_t = lr_t / two;
            lr_w = lr_w / two;
            halvings.push(HalvingEvent {
                epoch,
                annotator: None,
                lr_theta: lr_t,
                lr_w,
            });
        }
        if stop.is_some() {
            break;
        }
    }

    let model = BasisModel::new(theta, bias, beta)?;
    let mut entries = BTreeMap::new();
    for (idx, id) in indexed.annotators.iter().enumerate() {
        entries.insert(
            id.clone(),
            WeightEntry {
                cohort_id: indexed.cohorts[idx].clone(),
                w: w[idx].clone(),
            },
        );
    }
    let table = WeightTable::new(entries, k)?;
    let report = TrainReport {
        initial_nll,
        epoch_nll,
        final_nll: nll_prev,
        epochs,
        halvings,
        stop: stop.unwrap_or(StopReason::MaxEpochs),
    };
    Ok((model, table, report))
}

struct WeightSolve<F> {
    w: Vec<F>,
    trajectory: Vec<F>,
    initial: F,
    halvings: Vec<(usize, F)>,
    stop: StopReason,
}

fn solve_weights_for<F: Scalar>(
    basis_values: &[Vec<F>],
    records: &[(u32, u32)],
    beta: F,
    cfg: &TrainConfig<F>,
) -> Result<WeightSolve<F>, TrainError> {
    let k = basis_values[0].len();
    let uniform = F::one() / F::from_usize(k).expect("k");
    let mut w = vec![uniform; k];
    let inv_count = F::one() / F::from_usize(records.len()).expect("count");
    let two = F::lit(2.0);
    let tiny = F::lit(1e-300).max(F::min_positive_value());

    let nll_of = |w: &[F]| -> F {
        records
            .iter()
            .map(|&(ci, cj)| {
                let vi = &basis_values[ci as usize];
                let vj = &basis_values[cj as usize];
                let mut gap = F::zero();
                for kk in 0..k {
                    gap += w[kk] * (vi[kk] - vj[kk]);
                }
                softplus(-(beta * gap))
            })
            .sum()
    };
    let grad_of = |w: &[F]| -> Vec<F> {
        let mut grad = vec![F::zero(); k];
        for &(ci, cj) in records {
            let vi = &basis_values[ci as usize];
            let vj = &basis_values[cj as usize];
            let mut gap = F::zero();
            for kk in 0..k {
                gap += w[kk] * (vi[kk] - vj[kk]);
            }
            let s = logistic(-(beta * gap));
            let coeff = -(beta * s);
            for kk in 0..k {
                grad[kk] += coeff * (vi[kk] - vj[kk]);
            }
        }
        grad
    };

    let mut obj_prev = nll_of(&w);
    if !obj_prev.is_finite() {
        return Err(TrainError::NonFiniteNll { epoch: 0 });
    }
    let initial = obj_prev;
    let mut lr_w = cfg.lr_w;
    let mut halvings_used = 0usize;
    let mut halvings = Vec::new();
    let mut trajectory = Vec::new();
    let mut stop = None;

    for epoch in 1..=cfg.max_epochs {
        let grad = grad_of(&w);
        loop {
            let stepped: Vec<F> = w
                .iter()
                .zip(&grad)
                .map(|(&wk, &g)| wk - lr_w * g * inv_count)
                .collect();
            let w_new = project_to_simplex(&stepped);
            let obj_new = nll_of(&w_new);
            if obj_new.is_finite() && obj_new <= obj_prev {
                let rel = (obj_prev - obj_new) / obj_prev.abs().max(tiny);
                w = w_new;
                obj_prev = obj_new;
                trajectory.push(obj_new);
                if rel < cfg.tolerance {
                    stop = Some(StopReason::Tolerance);
                }
                break;
            }
            if halvings_used == MAX_HALVINGS {
                if !obj_new.is_finite() {
                    return Err(TrainError::NonFiniteNll { epoch });
                }
                stop = Some(StopReason::HalvingLimit);
                break;
            }
            halvings_used += 1;
            lr_w = lr_w / two;
            halvings.push((epoch, lr_w));
        }
        if stop.is_some() {
            break;
        }
    }

    Ok(WeightSolve {
        w,
        trajectory,
        initial,
        halvings,
        stop: stop.unwrap_or(StopReason::MaxEpochs),
    })
}

/// Stage 3: fits simplex weights for each annotator present in `data_new`
/// over a frozen basis. The basis is never modified; each annotator's solve
/// is independent and runs in sorted annotator order, so the result is
/// deterministic.
pub fn fit_weights<F: Scalar>(
    basis: &BasisModel<F>,
    data_new: &PreferenceDataset,
    catalog: &ItemCatalog<F>,
    cfg: &TrainConfig<F>,
) -> Result<(WeightTable<F>, TrainReport<F>), TrainError> {
    cfg.validate()?;
    let indexed = Indexed::build(data_new, catalog)?;
    let ws = Workspace::new(&indexed, catalog, basis.k(), basis.beta());
    let values = ws.basis_values(basis.theta(), basis.bias());

    // Per-annotator record lists, annotators already sorted by Indexed.
    let mut per_ann: Vec<Vec<(u32, u32)>> = vec![Vec::new(); indexed.annotators.len()];
    for &(ann, ci, cj) in &indexed.records {
        per_ann[ann as usize].push((ci, cj));
    }

    let mut entries = BTreeMap::new();
    let mut solves = Vec::new();
    for (idx, id) in indexed.annotators.iter().enumerate() {
        let solve = solve_weights_for(&values, &per_ann[idx], basis.beta(), cfg)?;
        entries.insert(
            id.clone(),
            WeightEntry {
                cohort_id: indexed.cohorts[idx].clone(),
                w: solve.w.clone(),
            },
        );
        solves.push((id.clone(), solve));
    }
    let table = WeightTable::new(entries, basis.k())?;

    // Aggregate the per-annotator traces into one report: epoch e of the
    // combined trajectory sums each annotator's objective at its own epoch
    // min(e, last).
    let initial_nll: F = solves.iter().map(|(_, s)| s.initial).sum();
    let max_epochs = solves
        .iter()
        .map(|(_, s)| s.trajectory.len())
        .max()
        .unwrap_or(0);
    let mut epoch_nll = Vec::with_capacity(max_epochs);
    for e in 0..max_epochs {
        let mut total = F::zero();
        for (_, s) in &solves {
            total += match s.trajectory.len() {
                0 => s.initial,
                len => s.trajectory[e.min(len - 1)],
            };
        }
        epoch_nll.push(total);
    }
    let final_nll = *epoch_nll.last().unwrap_or(&initial_nll);
    let mut halvings = Vec::new();
    for (id, s) in &solves {
        for &(epoch, lr) in &s.halvings {
            halvings.push(HalvingEvent {
                epoch,
                annotator: Some(id.clone()),
                lr_theta: F::zero(),
                lr_w: lr,
            });
        }
    }
    // Report the weakest stopping guarantee across the independent solves.
    let stop = if solves.iter().any(|(_, s)| s.stop == StopReason::MaxEpochs) {
        StopReason::MaxEpochs
    } else if solves
        .iter()
        .any(|(_, s)| s.stop == StopReason::HalvingLimit)
    {
        StopReason::HalvingLimit
    } else {
        StopReason::Tolerance
    };
    let report = TrainReport {
        initial_nll,
        epoch_nll,
        final_nll,
        epochs: max_epochs,
        halvings,
        stop,
    };
    Ok((table, report))
}
