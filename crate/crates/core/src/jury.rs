//! Stage 2: jury selection, per-juror candidate ranking, and rule-based
//! aggregation into an auditable outcome; plus Stage-3 pool expansion.

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::ItemCatalog;
use crate::reward::{personal_reward, BasisModel, ModelError, WeightEntry, WeightTable};
use crate::scalar::Scalar;
use crate::voting::{apply_rule, Ballot, Profile, VoteOutcome, VotingError, VotingRule};

#[derive(Debug, Error)]
pub enum JuryError {
    #[error("weight table K = {weights_k} does not match basis K = {basis_k}")]
    KMismatch { basis_k: usize, weights_k: usize },
    #[error("unknown cohort {cohort_id:?} in quota map")]
    UnknownCohort { cohort_id: String },
    #[error("quota {requested} exceeds cohort {cohort_id:?} size {available}")]
    QuotaExceedsCohort {
        cohort_id: String,
        requested: usize,
        available: usize,
    },
    #[error("juror {juror_id:?} is not in the pool")]
    UnknownJuror { juror_id: String },
    #[error("jury is empty")]
    EmptyJury,
    #[error("candidate set is empty")]
    EmptyCandidates,
    #[error("duplicate candidate {item_id:?} in slate")]
    DuplicateCandidate { item_id: String },
    #[error("candidate {item_id:?} is not in the catalog")]
    UnknownCandidate { item_id: String },
    #[error("annotator id {annotator_id:?} already exists in the pool")]
    IdCollision { annotator_id: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Voting(#[from] VotingError),
}

/// The full pool of potential jurors: a basis model plus every annotator's
/// weights across all cohorts.
#[derive(Debug, Clone, PartialEq)]
pub struct JuryPool<F = f64> {
    basis: BasisModel<F>,
    weights: WeightTable<F>,
}

impl<F: Scalar> JuryPool<F> {
    pub fn new(basis: BasisModel<F>, weights: WeightTable<F>) -> Result<Self, JuryError> {
        weights
            .validate(basis.k())
            .map_err(|_| JuryError::KMismatch {
                basis_k: basis.k(),
                weights_k: weights
                    .iter()
                    .next()
                    .map(|(_, e)| e.w.len())
                    .unwrap_or(basis.k()),
            })?;
        Ok(Self { basis, weights })
    }

    pub fn basis(&self) -> &BasisModel<F> {
        &self.basis
    }

    pub fn weights(&self) -> &WeightTable<F> {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Adds a cohort of new annotators, relabelling every incoming entry
    /// with `cohort_id`. The basis is unchanged; annotator ids must not
    /// collide with the existing pool.
    pub fn add_cohort(
        &self,
        new_weights: &WeightTable<F>,
        cohort_id: &str,
    ) -> Result<Self, JuryError> {
        new_weights
            .validate(self.basis.k())
            .map_err(|_| JuryError::KMismatch {
                basis_k: self.basis.k(),
                weights_k: new_weights
                    .iter()
                    .next()
                    .map(|(_, e)| e.w.len())
                    .unwrap_or(self.basis.k()),
            })?;
        let mut merged: BTreeMap<String, WeightEntry<F>> = self
            .weights
            .iter()
            .map(|(id, e)| (id.to_string(), e.clone()))
            .collect();
        for (id, entry) in new_weights.iter() {
            if merged.contains_key(id) {
                return Err(JuryError::IdCollision {
                    annotator_id: id.to_string(),
                });
            }
            merged.insert(
                id.to_string(),
                WeightEntry {
                    cohort_id: cohort_id.to_string(),
                    w: entry.w.clone(),
                },
            );
        }
        Ok(Self {
            basis: self.basis.clone(),
            weights: WeightTable::new(merged, self.basis.k())?,
        })
    }
}

/// A concrete jury: the selected juror ids plus the seed and quota map that
/// produced them, kept for replay.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JurySpec {
    pub juror_ids: Vec<String>,
    pub seed: u64,
    pub quotas: BTreeMap<String, usize>,
}

/// Samples jurors uniformly without replacement within each cohort, per the
/// quota map. Output order is cohort-sorted, then id-sorted; deterministic
/// given the seed.
pub fn select_jury<F: Scalar>(
    pool: &JuryPool<F>,
    quotas: &BTreeMap<String, usize>,
    seed: u64,
) -> Result<JurySpec, JuryError> {
    let by_cohort = pool.weights().by_cohort();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut juror_ids = Vec::new();
    for (cohort_id, &count) in quotas {
        let members = by_cohort
            .get(cohort_id.as_str())
            .ok_or_else(|| JuryError::UnknownCohort {
                cohort_id: cohort_id.clone(),
            })?;
        if count > members.len() {
            return Err(JuryError::QuotaExceedsCohort {
                cohort_id: cohort_id.clone(),
                requested: count,
                available: members.len(),
            });
        }
        let mut picked: Vec<String> = rand::seq::index::sample(&mut rng, members.len(), count)
            .iter()
            .map(|i| members[i].to_string())
            .collect();
        picked.sort_unstable();
        juror_ids.extend(picked);
    }
    if juror_ids.is_empty() {
        return Err(JuryError::EmptyJury);
    }
    Ok(JurySpec {
        juror_ids,
        seed,
        quotas: quotas.clone(),
    })
}

/// Scores every candidate with `personal_reward . basis_rewards` and returns
/// the strict ballot: descending score, score ties broken by ascending
/// candidate id. Raw scores are retained in ballot order.
pub fn rank_candidates<F: Scalar>(
    juror_id: &str,
    juror_w: &[F],
    basis: &BasisModel<F>,
    candidates: &[String],
    catalog: &ItemCatalog<F>,
) -> Result<Ballot<F>, JuryError> {
    if candidates.is_empty() {
        return Err(JuryError::EmptyCandidates);
    }
    let mut seen = BTreeSet::new();
    let mut scored: Vec<(String, F)> = Vec::with_capacity(candidates.len());
    for item_id in candidates {
        if !seen.insert(item_id.as_str()) {
            return Err(JuryError::DuplicateCandidate {
                item_id: item_id.clone(),
            });
        }
        let embedding = catalog
            .embedding(item_id)
            .map_err(|_| JuryError::UnknownCandidate {
                item_id: item_id.clone(),
            })?;
        let values = basis.basis_rewards(embedding).map_err(JuryError::Model)?;
        let score = personal_reward(juror_w, &values).map_err(JuryError::Model)?;
        scored.push((item_id.clone(), score));
    }
    scored.sort_by(|(id_a, score_a), (id_b, score_b)| {
        score_b
            .partial_cmp(score_a)
            .expect("finite scores")
            .then_with(|| id_a.cmp(id_b))
    });
    let (ranking, scores) = scored.into_iter().unzip();
    Ok(Ballot {
        juror_id: juror_id.to_string(),
        ranking,
        scores: Some(scores),
    })
}

/// One aggregated decision with its complete audit trail.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterOutcome<F = f64> {
    pub question_id: String,
    pub candidates: Vec<String>,
    pub rule: VotingRule,
    /// Per-juror strict rankings with raw reward scores, in jury order.
    pub rankings: Vec<Ballot<F>>,
    pub outcome: VoteOutcome,
}

/// Builds the preference profile from every juror's personalized ranking and
/// applies the rule. Pure: neither the pool nor the basis is modified.
pub fn democratic_filter<F: Scalar>(
    jury: &JurySpec,
    pool: &JuryPool<F>,
    question_id: &str,
    candidates: &[String],
    catalog: &ItemCatalog<F>,
    rule: VotingRule,
) -> Result<FilterOutcome<F>, JuryError> {
    if jury.juror_ids.is_empty() {
        return Err(JuryError::EmptyJury);
    }
    if candidates.is_empty() {
        return Err(JuryError::EmptyCandidates);
    }
    let profile = jury_profile(jury, pool, candidates, catalog)?;
    let outcome = apply_rule(&profile, rule)?;
    Ok(FilterOutcome {
        question_id: question_id.to_string(),
        candidates: candidates.to_vec(),
        rule,
        rankings: profile.ballots().to_vec(),
        outcome,
    })
}

/// The jury's preference profile over a slate, reusable across rules.
pub fn jury_profile<F: Scalar>(
    jury: &JurySpec,
    pool: &JuryPool<F>,
    candidates: &[String],
    catalog: &ItemCatalog<F>,
) -> Result<Profile<F>, JuryError> {
    let mut ballots = Vec::with_capacity(jury.juror_ids.len());
    for juror_id in &jury.juror_ids {
        let entry = pool
            .weights()
            .get(juror_id)
            .ok_or_else(|| JuryError::UnknownJuror {
                juror_id: juror_id.clone(),
            })?;
        ballots.push(rank_candidates(
            juror_id,
            &entry.w,
            pool.basis(),
            candidates,
            catalog,
        )?);
    }
    Ok(Profile::new(candidates.to_vec(), ballots)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::voting::RuleAudit;

    fn pool_fixture() -> (JuryPool, ItemCatalog) {
        // Two heads over 2-d embeddings; head k reads coordinate k.
        let basis = BasisModel::new(
            vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            vec![0.0, 0.0],
            1.0,
        )
        .unwrap();
        let catalog = ItemCatalog::new(vec![
            ("a".into(), vec![1.0, 0.0], None),
            ("b".into(), vec![0.0, 2.0], None),
            ("twin1".into(), vec![0.5, 0.5], None),
            ("twin2".into(), vec![0.5, 0.5], None),
        ])
        .unwrap();
        let mut entries = BTreeMap::new();
        for (id, cohort, w) in [
            ("j-head0", "left", vec![1.0, 0.0]),
            ("j-head1", "right", vec![0.0, 1.0]),
            ("j-even", "left", vec![0.5, 0.5]),
        ] {
            entries.insert(
                id.to_string(),
                WeightEntry {
                    cohort_id: cohort.into(),
                    w,
                },
            );
        }
        let weights = WeightTable::new(entries, 2).unwrap();
        (JuryPool::new(basis, weights).unwrap(), catalog)
    }

    #[test]
    fn pool_rejects_k_mismatch() {
        let basis = BasisModel::new(vec![vec![1.0, 0.0]], vec![0.0], 1.0).unwrap();
        let mut entries = BTreeMap::new();
        entries.insert(
            "x".to_string(),
            WeightEntry {
                cohort_id: "c".into(),
                w: vec![0.5, 0.5],
            },
        );
        let weights = WeightTable::from_raw(entries);
        assert!(matches!(
            JuryPool::new(basis, weights).unwrap_err(),
            JuryError::KMismatch { basis_k: 1, weights_k: 2 }
        ));
    }

    #[test]
    fn select_jury_is_stratified_sorted_and_deterministic() {
        let (pool, _) = pool_fixture();
        let quotas = BTreeMap::from([("left".to_string(), 2), ("right".to_string(), 1)]);
        let jury = select_jury(&pool, &quotas, 3).unwrap();
        assert_eq!(jury.juror_ids, vec!["j-even", "j-head0", "j-head1"]);
        assert_eq!(select_jury(&pool, &quotas, 3).unwrap(), jury);

        let single = select_jury(&pool, &BTreeMap::from([("right".to_string(), 1)]), 9).unwrap();
        assert_eq!(single.juror_ids, vec!["j-head1"]);

        assert!(matches!(
            select_jury(&pool, &BTreeMap::from([("left".to_string(), 3)]), 0).unwrap_err(),
            JuryError::QuotaExceedsCohort { .. }
        ));
        assert!(matches!(
            select_jury(&pool, &BTreeMap::from([("ghost".to_string(), 1)]), 0).unwrap_err(),
            JuryError::UnknownCohort { .. }
        ));
    }

    #[test]
    fn rank_candidates_orders_by_score_then_id() {
        let (pool, catalog) = pool_fixture();
        let slate: Vec<String> = vec!["a".into(), "b".into()];

        // One-hot on head 0: a scores 1, b scores 0.
        let ballot = rank_candidates("j-head0", &[1.0, 0.0], pool.basis(), &slate, &catalog)
            .unwrap();
        assert_eq!(ballot.ranking, vec!["a", "b"]);
        assert_eq!(ballot.scores, Some(vec![1.0, 0.0]));

        // Even juror: a scores 0.5, b scores 1.0.
        let ballot =
            rank_candidates("j-even", &[0.5, 0.5], pool.basis(), &slate, &catalog).unwrap();
        assert_eq!(ballot.ranking, vec!["b", "a"]);

        // Identical embeddings tie; smaller id first.
        let twins: Vec<String> = vec!["twin2".into(), "twin1".into()];
        let ballot =
            rank_candidates("j-even", &[0.5, 0.5], pool.basis(), &twins, &catalog).unwrap();
        assert_eq!(ballot.ranking, vec!["twin1", "twin2"]);

        let dup: Vec<String> = vec!["a".into(), "a".into()];
        assert!(matches!(
            rank_candidates("j", &[0.5, 0.5], pool.basis(), &dup, &catalog).unwrap_err(),
            JuryError::DuplicateCandidate { .. }
        ));
    }

    #[test]
    fn single_juror_dictates_every_rule() {
        let (pool, catalog) = pool_fixture();
        let jury = JurySpec {
            juror_ids: vec!["j-head1".into()],
            seed: 0,
            quotas: BTreeMap::new(),
        };
        let slate: Vec<String> = vec!["a".into(), "b".into(), "twin1".into()];
        for rule in VotingRule::ALL {
            let out =
                democratic_filter(&jury, &pool, "q0", &slate, &catalog, rule).unwrap();
            assert_eq!(out.outcome.selected, "b", "rule {rule} must follow the juror");
            assert_eq!(out.rankings.len(), 1);
        }
    }

    #[test]
    fn two_candidates_collapse_to_pairwise_majority() {
        let (pool, catalog) = pool_fixture();
        let jury = JurySpec {
            juror_ids: vec!["j-even".into(), "j-head0".into(), "j-head1".into()],
            seed: 0,
            quotas: BTreeMap::new(),
        };
        let slate: Vec<String> = vec!["a".into(), "b".into()];
        // j-head0 prefers a; j-head1 and j-even prefer b => majority b.
        let mut selections = BTreeSet::new();
        for rule in VotingRule::ALL {
            let out =
                democratic_filter(&jury, &pool, "q1", &slate, &catalog, rule).unwrap();
            selections.insert(out.outcome.selected.clone());
        }
        assert_eq!(selections, BTreeSet::from(["b".to_string()]));
    }

    #[test]
    fn filter_outcome_embeds_complete_audit() {
        let (pool, catalog) = pool_fixture();
        let jury = JurySpec {
            juror_ids: vec!["j-head0".into(), "j-head1".into()],
            seed: 0,
            quotas: BTreeMap::new(),
        };
        let slate: Vec<String> = vec!["a".into(), "b".into(), "twin1".into(), "twin2".into()];
        let out = democratic_filter(&jury, &pool, "q2", &slate, &catalog, VotingRule::Copeland)
            .unwrap();
        // Ballots are permutations of the slate with non-increasing scores.
        for ballot in &out.rankings {
            let mut sorted = ballot.ranking.clone();
            sorted.sort_unstable();
            let mut expected = slate.clone();
            expected.sort_unstable();
            assert_eq!(sorted, expected);
            let scores = ballot.scores.as_ref().unwrap();
            for pair in scores.windows(2) {
                assert!(pair[0] >= pair[1]);
            }
        }
        assert!(matches!(out.outcome.audit, RuleAudit::Copeland { .. }));
    }

    #[test]
    fn add_cohort_unions_disjointly_and_relabels() {
        let (pool, _) = pool_fixture();
        let mut entries = BTreeMap::new();
        entries.insert(
            "newbie".to_string(),
            WeightEntry {
                cohort_id: "whatever".into(),
                w: vec![0.25, 0.75],
            },
        );
        let incoming = WeightTable::new(entries, 2).unwrap();
        let grown = pool.add_cohort(&incoming, "era-z").unwrap();
        assert_eq!(grown.len(), pool.len() + 1);
        assert_eq!(grown.weights().get("newbie").unwrap().cohort_id, "era-z");
        assert_eq!(grown.basis(), pool.basis());

        // Empty table: pool unchanged.
        let empty = WeightTable::new(BTreeMap::new(), 2).unwrap();
        let same = pool.add_cohort(&empty, "era-z").unwrap();
        assert_eq!(same.weights(), pool.weights());

        // Collision is reported by id.
        let mut entries = BTreeMap::new();
        entries.insert(
            "j-even".to_string(),
            WeightEntry {
                cohort_id: "x".into(),
                w: vec![1.0, 0.0],
            },
        );
        let colliding = WeightTable::new(entries, 2).unwrap();
        match pool.add_cohort(&colliding, "era-z").unwrap_err() {
            JuryError::IdCollision { annotator_id } => assert_eq!(annotator_id, "j-even"),
            other => panic!("unexpected error: {other}"),
        }
    }

    #[test]
    fn affine_score_transform_preserves_ballots() {
        let (pool, catalog) = pool_fixture();
        let slate: Vec<String> = vec!["a".into(), "b".into(), "twin1".into()];
        // r -> 2r + 1.5 via theta' = 2 theta, bias' = 2 bias + 1.5 (weights
        // sum to one, so the shift passes through personal_reward intact).
        let scaled = BasisModel::new(
            pool.basis()
                .theta()
                .iter()
                .map(|row| row.iter().map(|&t| 2.0 * t).collect())
                .collect(),
            pool.basis().bias().iter().map(|&b| 2.0 * b + 1.5).collect(),
            1.0,
        )
        .unwrap();
        let scaled_pool = JuryPool::new(scaled, pool.weights().clone()).unwrap();
        for juror in ["j-head0", "j-head1", "j-even"] {
            let w = &pool.weights().get(juror).unwrap().w;
            let base = rank_candidates(juror, w, pool.basis(), &slate, &catalog).unwrap();
            let moved =
                rank_candidates(juror, w, scaled_pool.basis(), &slate, &catalog).unwrap();
            assert_eq!(base.ranking, moved.ranking);
        }
    }
}
