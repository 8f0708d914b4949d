//! Reward bases, per-annotator simplex weights, and the Bradley-Terry core.
//!
//! A [`BasisModel`] holds K linear reward heads over item embeddings; head k
//! scores an item `x` as `theta_k . x + bias_k`. Each annotator mixes the
//! heads with a simplex weight vector from a [`WeightTable`], giving the
//! personal reward `R_n(x) = w_n . v(x)`. Pairwise choice probabilities
//! follow the Boltzmann-rational model: the probability of preferring item i
//! over item j is logistic in `beta * (R_n(i) - R_n(j))`.
//!
//! Everything here works on reward *differences*, never on raw exponentials,
//! so large rewards cannot overflow and complementary probabilities sum to
//! one exactly.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{ItemCatalog, PreferenceDataset};
use crate::scalar::Scalar;

/// Tolerance on `sum(w) - 1` accepted by weight-table validation.
pub const SIMPLEX_TOLERANCE: f64 = 1e-9;

/// Errors raised by model construction, IO, and likelihood evaluation.
#[derive(Debug, Error)]
pub enum ModelError {
    #[error("model has no heads (K must be >= 1)")]
    NoHeads,
    #[error("head {head} has dimension {found}, expected {expected}")]
    RaggedTheta {
        head: usize,
        expected: usize,
        found: usize,
    },
    #[error("bias length {found} does not match K = {k}")]
    BiasLength { k: usize, found: usize },
    #[error("model parameter {name} contains a non-finite entry")]
    NonFiniteParameter { name: &'static str },
    #[error("beta must be >= 0, got {beta}")]
    NegativeBeta { beta: f64 },
    #[error("item embedding has length {found}, expected {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("weight vector for {annotator_id:?} has length {found}, expected {expected}")]
    WeightLength {
        annotator_id: String,
        expected: usize,
        found: usize,
    },
    #[error("weight vector for {annotator_id:?} is off the simplex (component {component})")]
    OffSimplex {
        annotator_id: String,
        component: String,
    },
    #[error("annotator {annotator_id:?} has no weight entry")]
    MissingAnnotator { annotator_id: String },
    #[error("item {item_id:?} is not in the catalog")]
    MissingItem { item_id: String },
    #[error("vector lengths differ: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: invalid model JSON: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

/// Numerically stable logistic `1 / (1 + exp(-z))`.
pub(crate) fn logistic<F: Scalar>(z: F) -> F {
    if z < F::zero() {
        let e = z.exp();
        e / (F::one() + e)
    } else {
        F::one() / (F::one() + (-z).exp())
    }
}

/// Numerically stable `ln(1 + exp(x))`.
pub(crate) fn softplus<F: Scalar>(x: F) -> F {
    if x > F::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Probability that an annotator with rationality `beta` prefers an item with
/// reward `r_i` over one with reward `r_j`.
///
/// Computed from the reward difference only. The two branches share every
/// intermediate, which makes `bt_prob(a, b, beta) + bt_prob(b, a, beta) == 1`
/// hold exactly, not just approximately.
pub fn bt_prob<F: Scalar>(r_i: F, r_j: F, beta: F) -> F {
    let z = beta * (r_i - r_j);
    if z < F::zero() {
        let e = z.exp();
        e / (F::one() + e)
    } else {
        let e = (-z).exp();
        F::one() - e / (F::one() + e)
    }
}

/// `-ln bt_prob(r_i, r_j, beta)` without forming the probability.
pub fn bt_nll<F: Scalar>(r_i: F, r_j: F, beta: F) -> F {
    softplus(-(beta * (r_i - r_j)))
}

/// Mixes basis values with simplex weights: `dot(w, basis_values)`.
pub fn personal_reward<F: Scalar>(w: &[F], basis_values: &[F]) -> Result<F, ModelError> {
    if w.len() != basis_values.len() {
        return Err(ModelError::LengthMismatch {
            left: w.len(),
            right: basis_values.len(),
        });
    }
    Ok(w.iter()
        .zip(basis_values)
        .map(|(&wk, &vk)| wk * vk)
        .sum())
}

/// K linear reward heads over d-dimensional embeddings, plus the rationality
/// parameter `beta` used for every likelihood built on this model.
///
/// Head biases are carried for generality but cancel in pairwise differences,
/// so they are inert under preference training (their gradient is zero).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisModel<F = f64> {
    #[serde(rename = "K")]
    k: usize,
    d: usize,
    beta: F,
    theta: Vec<Vec<F>>,
    bias: Vec<F>,
}

impl<F: Scalar> BasisModel<F> {
    /// Builds a model from explicit head weights and biases; `K` and `d` are
    /// inferred from `theta`.
    pub fn new(theta: Vec<Vec<F>>, bias: Vec<F>, beta: F) -> Result<Self, ModelError> {
        let k = theta.len();
        if k == 0 {
            return Err(ModelError::NoHeads);
        }
        let d = theta[0].len();
        if d == 0 {
            return Err(ModelError::RaggedTheta {
                head: 0,
                expected: 1,
                found: 0,
            });
        }
        for (head, row) in theta.iter().enumerate() {
            if row.len() != d {
                return Err(ModelError::RaggedTheta {
                    head,
                    expected: d,
                    found: row.len(),
                });
            }
            if row.iter().any(|x| !x.is_finite()) {
                return Err(ModelError::NonFiniteParameter { name: "theta" });
            }
        }
        if bias.len() != k {
            return Err(ModelError::BiasLength {
                k,
                found: bias.len(),
            });
        }
        if bias.iter().any(|x| !x.is_finite()) {
            return Err(ModelError::NonFiniteParameter { name: "bias" });
        }
        if !beta.is_finite() || beta < F::zero() {
            return Err(ModelError::NegativeBeta {
                beta: beta.to_f64_lossy(),
            });
        }
        Ok(Self {
            k,
            d,
            beta,
            theta,
            bias,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn beta(&self) -> F {
        self.beta
    }

    pub fn theta(&self) -> &[Vec<F>] {
        &self.theta
    }

    pub fn bias(&self) -> &[F] {
        &self.bias
    }

    /// Evaluates all K heads on one embedding: component k is
    /// `theta_k . item + bias_k`.
    pub fn basis_rewards(&self, item: &[F]) -> Result<Vec<F>, ModelError> {
        if item.len() != self.d {
            return Err(ModelError::DimensionMismatch {
                expected: self.d,
                found: item.len(),
            });
        }
        Ok(self
            .theta
            .iter()
            .zip(&self.bias)
            .map(|(row, &b)| {
                let dot: F = row.iter().zip(item).map(|(&t, &x)| t * x).sum();
                dot + b
            })
            .collect())
    }

    /// Reorders heads by `perm` (new head k = old head `perm[k]`). Reordering
    /// heads together with all weight vectors leaves every personal reward
    /// unchanged.
    pub fn permute_heads(&self, perm: &[usize]) -> Self {
        assert_eq!(perm.len(), self.k, "permutation length must equal K");
        let theta = perm.iter().map(|&p| self.theta[p].clone()).collect();
        let bias = perm.iter().map(|&p| self.bias[p]).collect();
        Self {
            k: self.k,
            d: self.d,
            beta: self.beta,
            theta,
            bias,
        }
    }

    /// Loads a model artifact (JSON object with fields `K`, `d`, `beta`,
    /// `theta`, `bias`), re-validating all invariants.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|source| ModelError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let raw: BasisModel<F> =
            serde_json::from_reader(BufReader::new(file)).map_err(|source| ModelError::Json {
                path: path.to_path_buf(),
                source,
            })?;
        Self::new(raw.theta, raw.bias, raw.beta)
    }

    /// Writes the model artifact as pretty JSON with a trailing newline.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ModelError> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|source| ModelError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut writer = BufWriter::new(file);
        serde_json::to_writer_pretty(&mut writer, self).map_err(|source| ModelError::Json {
            path: path.to_path_buf(),
            source,
        })?;
        writeln!(writer).map_err(|source| ModelError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(())
    }
}

/// One annotator's entry: cohort tag plus simplex mixing weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightEntry<F = f64> {
    pub cohort_id: String,
    pub w: Vec<F>,
}

/// Per-annotator simplex weight vectors, keyed by annotator id.
///
/// The `BTreeMap` keeps iteration and serialization in sorted annotator
/// order, which the deterministic trainers and artifact hashing rely on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightTable<F = f64> {
    annotators: BTreeMap<String, WeightEntry<F>>,
}

impl<F: Scalar> WeightTable<F> {
    /// Builds a table, validating that every vector has length `k`, is
    /// nonnegative, and sums to one within [`SIMPLEX_TOLERANCE`].
    pub fn new(
        annotators: BTreeMap<String, WeightEntry<F>>,
        k: usize,
    ) -> Result<Self, ModelError> {
        let table = Self { annotators };
        table.validate(k)?;
        Ok(table)
    }

    /// Builds a table without simplex validation. Useful for intermediate
    /// numerical states (e.g. finite-difference probes); artifacts written by
    /// the trainers always satisfy the simplex invariants.
    pub fn from_raw(annotators: BTreeMap<String, WeightEntry<F>>) -> Self {
        Self { annotators }
    }

    pub fn validate(&self, k: usize) -> Result<(), ModelError> {
        let tol = F::lit(SIMPLEX_TOLERANCE);
        for (annotator_id, entry) in &self.annotators {
            if entry.w.len() != k {
                return Err(ModelError::WeightLength {
                    annotator_id: annotator_id.clone(),
                    expected: k,
                    found: entry.w.len(),
                });
            }
            let mut sum = F::zero();
            for (idx, &wk) in entry.w.iter().enumerate() {
                if !wk.is_finite() || wk < F::zero() {
                    return Err(ModelError::OffSimplex {
                        annotator_id: annotator_id.clone(),
                        component: format!("w[{idx}] = {wk}"),
                    });
                }
                sum += wk;
            }
            if (sum - F::one()).abs() > tol {
                return Err(ModelError::OffSimplex {
                    annotator_id: annotator_id.clone(),
                    component: format!("sum = {sum}"),
                });
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.annotators.len()
    }

    pub fn is_empty(&self) -> bool {
        self.annotators.is_empty()
    }

    pub fn get(&self, annotator_id: &str) -> Option<&WeightEntry<F>> {
        self.annotators.get(annotator_id)
    }

    pub fn contains(&self, annotator_id: &str) -> bool {
        self.annotators.contains_key(annotator_id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &WeightEntry<F>)> {
        self.annotators.iter().map(|(id, e)| (id.as_str(), e))
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.annotators.keys().map(String::as_str)
    }

    /// Distinct cohort ids present, sorted.
    pub fn cohorts(&self) -> Vec<&str> {
        let mut cohorts: Vec<&str> = self
            .annotators
            .values()
            .map(|e| e.cohort_id.as_str())
            .collect();
        cohorts.sort_unstable();
        cohorts.dedup();
        cohorts
    }

    /// Annotator ids grouped by cohort, both levels sorted.
    pub fn by_cohort(&self) -> BTreeMap<&str, Vec<&str>> {
        let mut groups: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
        for (id, entry) in &self.annotators {
            groups
                .entry(entry.cohort_id.as_str())
                .or_default()
                .push(id.as_str());
        }
        groups
    }

    /// Applies a head permutation to every weight vector (companion to
    /// [`BasisModel::permute_heads`]).
    pub fn permute_heads(&self, perm: &[usize]) -> Self {
        let annotators = self
            .annotators
            .iter()
            .map(|(id, entry)| {
                let w = perm.iter().map(|&p| entry.w[p]).collect();
                (
                    id.clone(),
                    WeightEntry {
                        cohort_id: entry.cohort_id.clone(),
                        w,
                    },
                )
            })
            .collect();
        Self { annotators }
    }

    /// Disjoint union with another table; any shared annotator id is an
    /// error (reported by id).
    pub fn merge_disjoint(&self, other: &Self) -> Result<Self, ModelError> {
        let mut annotators = self.annotators.clone();
        for (id, entry) in &other.annotators {
            if annotators.contains_key(id) {
                return Err(ModelError::MissingAnnotator {
                    annotator_id: format!("duplicate annotator id {id:?} while merging"),
                });
            }
            annotators.insert(id.clone(), entry.clone());
        }
        Ok(Self { annotators })
    }

    /// Loads a weight-table artifact (JSON object `{"annotators": {...}}`).
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|source| ModelError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        serde_json::from_reader(BufReader::new(file)).map_err(|source| ModelError::Json {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Writes the weight-table artifact as pretty JSON with a trailing
    /// newline, annotators in sorted order.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ModelError> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|source| ModelError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut writer = BufWriter::new(file);
        serde_json::to_writer_pretty(&mut writer, self).map_err(|source| ModelError::Json {
            path: path.to_path_buf(),
            source,
        })?;
        writeln!(writer).map_err(|source| ModelError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(())
    }
}

fn personal_reward_for<F: Scalar>(
    model: &BasisModel<F>,
    w: &[F],
    catalog: &ItemCatalog<F>,
    item_id: &str,
) -> Result<F, ModelError> {
    let embedding = catalog
        .embedding(item_id)
        .map_err(|_| ModelError::MissingItem {
            item_id: item_id.to_string(),
        })?;
    let values = model.basis_rewards(embedding)?;
    personal_reward(w, &values)
}

/// Total negative log-likelihood of a preference dataset: the sum over
/// records of `-ln bt_prob(R_n(chosen), R_n(rejected), beta)`.
pub fn dataset_nll<F: Scalar>(
    model: &BasisModel<F>,
    weights: &WeightTable<F>,
    data: &PreferenceDataset,
    catalog: &ItemCatalog<F>,
) -> Result<F, ModelError> {
    let mut total = F::zero();
    for rec in data.records() {
        let entry = weights
            .get(&rec.annotator_id)
            .ok_or_else(|| ModelError::MissingAnnotator {
                annotator_id: rec.annotator_id.clone(),
            })?;
        let r_i = personal_reward_for(model, &entry.w, catalog, &rec.chosen)?;
        let r_j = personal_reward_for(model, &entry.w, catalog, &rec.rejected)?;
        total += bt_nll(r_i, r_j, model.beta());
    }
    Ok(total)
}

/// Analytic gradients of [`dataset_nll`], summed over records.
#[derive(Debug, Clone, PartialEq)]
pub struct NllGradients<F = f64> {
    /// d NLL / d theta, a K x d matrix.
    pub theta: Vec<Vec<F>>,
    /// d NLL / d bias. Biases cancel in pairwise reward differences, so this
    /// is identically zero; it is returned to keep the gradient shape
    /// aligned with the parameter shape.
    pub bias: Vec<F>,
    /// d NLL / d w_n for every annotator in the weight table.
    pub w: BTreeMap<String, Vec<F>>,
}

/// Computes the gradients of the dataset NLL with respect to `theta`, `bias`,
/// and every annotator's weight vector.
///
/// Per record `(i, j, n)` with `z = beta * (R_n(i) - R_n(j))` and
/// `s = logistic(-z)`, the contributions are
/// `grad_w_n -= beta * s * (v(i) - v(j))` and
/// `grad_theta_k -= beta * s * w_{n,k} * (x_i - x_j)`.
pub fn nll_gradients<F: Scalar>(
    model: &BasisModel<F>,
    weights: &WeightTable<F>,
    data: &PreferenceDataset,
    catalog: &ItemCatalog<F>,
) -> Result<NllGradients<F>, ModelError> {
    let k = model.k();
    let d = model.d();
    let mut grad_theta = vec![vec![F::zero(); d]; k];
    let grad_bias = vec![F::zero(); k];
    let mut grad_w: BTreeMap<String, Vec<F>> = weights
        .iter()
        .map(|(id, _)| (id.to_string(), vec![F::zero(); k]))
        .collect();

    for rec in data.records() {
        let entry = weights
            .get(&rec.annotator_id)
            .ok_or_else(|| ModelError::MissingAnnotator {
                annotator_id: rec.annotator_id.clone(),
            })?;
        let x_i = catalog
            .embedding(&rec.chosen)
            .map_err(|_| ModelError::MissingItem {
                item_id: rec.chosen.clone(),
            })?;
        let x_j = catalog
            .embedding(&rec.rejected)
            .map_err(|_| ModelError::MissingItem {
                item_id: rec.rejected.clone(),
            })?;
        let v_i = model.basis_rewards(x_i)?;
        let v_j = model.basis_rewards(x_j)?;
        let r_i = personal_reward(&entry.w, &v_i)?;
        let r_j = personal_reward(&entry.w, &v_j)?;
        let beta = model.beta();
        let z = beta * (r_i - r_j);
        let s = logistic(-z);
        let coeff = -(beta * s);

        let gw = grad_w
            .get_mut(&rec.annotator_id)
            .expect("initialized above");
        for kk in 0..k {
            gw[kk] += coeff * (v_i[kk] - v_j[kk]);
            let scale = coeff * entry.w[kk];
            let row = &mut grad_theta[kk];
            for (slot, (&xi, &xj)) in row.iter_mut().zip(x_i.iter().zip(x_j)) {
                *slot += scale * (xi - xj);
            }
        }
    }

    Ok(NllGradients {
        theta: grad_theta,
        bias: grad_bias,
        w: grad_w,
    })
}

/// Fraction of records whose chosen item gets the strictly higher personal
/// reward; exact ties count half.
pub fn preference_accuracy<F: Scalar>(
    model: &BasisModel<F>,
    weights: &WeightTable<F>,
    data: &PreferenceDataset,
    catalog: &ItemCatalog<F>,
) -> Result<f64, ModelError> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0.0f64;
    for rec in data.records() {
        let entry = weights
            .get(&rec.annotator_id)
            .ok_or_else(|| ModelError::MissingAnnotator {
                annotator_id: rec.annotator_id.clone(),
            })?;
        let r_i = personal_reward_for(model, &entry.w, catalog, &rec.chosen)?;
        let r_j = personal_reward_for(model, &entry.w, catalog, &rec.rejected)?;
        if r_i > r_j {
            correct += 1.0;
        } else if r_i == r_j {
            correct += 0.5;
        }
    }
    Ok(correct / data.len() as f64)
}
