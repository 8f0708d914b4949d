//! Exact social-choice functions over strict ballots.
//!
//! A [`Profile`] is a set of strict rankings (one per juror) over a shared
//! candidate list. Four rules are implemented: plurality, Borda, Copeland,
//! and instant-runoff with parallel-universe tie-breaking (IRV-PUT). Every
//! rule returns the full winner set plus a rule-specific audit trace; the
//! single `selected` candidate is always the lexicographically smallest
//! winner, a declared convention rather than part of any rule.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;

/// IRV-PUT tracks remaining candidates in a bitmask; profiles are capped
/// accordingly.
pub const MAX_IRV_CANDIDATES: usize = 16;

#[derive(Debug, Error)]
pub enum VotingError {
    #[error("profile must have at least one candidate")]
    NoCandidates,
    #[error("profile must have at least one ballot")]
    NoBallots,
    #[error("duplicate candidate id {candidate:?}")]
    DuplicateCandidate { candidate: String },
    #[error("ballot {juror_id:?} is not a permutation of the candidate set ({detail})")]
    InvalidBallot { juror_id: String, detail: String },
    #[error("ballot {juror_id:?} has {found} scores for {expected} candidates")]
    ScoreLength {
        juror_id: String,
        expected: usize,
        found: usize,
    },
    #[error("unknown candidate {candidate:?}")]
    UnknownCandidate { candidate: String },
    #[error("candidate id {candidate:?} already exists")]
    CandidateCollision { candidate: String },
    #[error("IRV-PUT supports at most {MAX_IRV_CANDIDATES} candidates, got {found}")]
    TooManyCandidates { found: usize },
    #[error("need at least 2 ballots and 2 candidates, got {ballots} ballot(s) over {candidates}")]
    NotEnoughForCorrelation { ballots: usize, candidates: usize },
    #[error("removing {candidate:?} would leave an empty candidate set")]
    WouldBeEmpty { candidate: String },
    #[error("placements length {found} does not match ballot count {expected}")]
    PlacementLength { expected: usize, found: usize },
}

/// One juror's strict ranking, best candidate first, with optional raw
/// scores kept for the audit trail.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ballot<F = f64> {
    pub juror_id: String,
    pub ranking: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scores: Option<Vec<F>>,
}

/// A candidate list plus one strict ballot per juror.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ProfileData<F>", bound(deserialize = "F: Scalar"))]
pub struct Profile<F = f64> {
    candidates: Vec<String>,
    ballots: Vec<Ballot<F>>,
}

#[derive(Deserialize)]
struct ProfileData<F> {
    candidates: Vec<String>,
    ballots: Vec<Ballot<F>>,
}

impl<F: Scalar> TryFrom<ProfileData<F>> for Profile<F> {
    type Error = VotingError;

    fn try_from(raw: ProfileData<F>) -> Result<Self, VotingError> {
        Profile::new(raw.candidates, raw.ballots)
    }
}

impl<F: Scalar> Profile<F> {
    /// Validates that every ballot ranks exactly the candidate set.
    pub fn new(candidates: Vec<String>, ballots: Vec<Ballot<F>>) -> Result<Self, VotingError> {
        if candidates.is_empty() {
            return Err(VotingError::NoCandidates);
        }
        if ballots.is_empty() {
            return Err(VotingError::NoBallots);
        }
        let mut index = HashMap::with_capacity(candidates.len());
        for (i, c) in candidates.iter().enumerate() {
            if index.insert(c.as_str(), i).is_some() {
                return Err(VotingError::DuplicateCandidate {
                    candidate: c.clone(),
                });
            }
        }
        for ballot in &ballots {
            if ballot.ranking.len() != candidates.len() {
                return Err(VotingError::InvalidBallot {
                    juror_id: ballot.juror_id.clone(),
                    detail: format!(
                        "ranks {} of {} candidates",
                        ballot.ranking.len(),
                        candidates.len()
                    ),
                });
            }
            let mut seen = vec![false; candidates.len()];
            for c in &ballot.ranking {
                match index.get(c.as_str()) {
                    Some(&i) if !seen[i] => seen[i] = true,
                    Some(_) => {
                        return Err(VotingError::InvalidBallot {
                            juror_id: ballot.juror_id.clone(),
                            detail: format!("ranks {c:?} twice"),
                        })
                    }
                    None => {
                        return Err(VotingError::InvalidBallot {
                            juror_id: ballot.juror_id.clone(),
                            detail: format!("ranks unknown candidate {c:?}"),
                        })
                    }
                }
            }
            if let Some(scores) = &ballot.scores {
                if scores.len() != candidates.len() {
                    return Err(VotingError::ScoreLength {
                        juror_id: ballot.juror_id.clone(),
                        expected: candidates.len(),
                        found: scores.len(),
                    });
                }
            }
        }
        Ok(Self {
            candidates,
            ballots,
        })
    }

    pub fn candidates(&self) -> &[String] {
        &self.candidates
    }

    pub fn ballots(&self) -> &[Ballot<F>] {
        &self.ballots
    }

    pub fn num_candidates(&self) -> usize {
        self.candidates.len()
    }

    pub fn num_ballots(&self) -> usize {
        self.ballots.len()
    }

    fn candidate_index(&self) -> HashMap<&str, usize> {
        self.candidates
            .iter()
            .enumerate()
            .map(|(i, c)| (c.as_str(), i))
            .collect()
    }

    /// Rankings as candidate indices, one row per ballot.
    fn index_ballots(&self) -> Vec<Vec<usize>> {
        let index = self.candidate_index();
        self.ballots
            .iter()
            .map(|b| b.ranking.iter().map(|c| index[c.as_str()]).collect())
            .collect()
    }
}

/// The rules the pipeline can aggregate with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VotingRule {
    Plurality,
    Borda,
    Copeland,
    IrvPut,
}

impl VotingRule {
    pub const ALL: [VotingRule; 4] = [
        VotingRule::IrvPut,
        VotingRule::Copeland,
        VotingRule::Borda,
        VotingRule::Plurality,
    ];

    pub fn name(self) -> &'static str {
        match self {
            VotingRule::Plurality => "plurality",
            VotingRule::Borda => "borda",
            VotingRule::Copeland => "copeland",
            VotingRule::IrvPut => "irv_put",
        }
    }
}

impl std::fmt::Display for VotingRule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for VotingRule {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "plurality" => Ok(VotingRule::Plurality),
            "borda" => Ok(VotingRule::Borda),
            "copeland" => Ok(VotingRule::Copeland),
            "irv_put" => Ok(VotingRule::IrvPut),
            other => Err(format!(
                "unknown rule {other:?}; expected plurality, borda, copeland, or irv_put"
            )),
        }
    }
}

/// Pairwise contest counts with the candidate order they index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MarginMatrix {
    pub candidates: Vec<String>,
    /// `counts[a][b]` = number of ballots ranking candidate `a` above `b`.
    pub counts: Vec<Vec<u32>>,
}

/// One IRV-PUT state: the remaining candidate set, its first-place tallies,
/// which candidates were branched on for elimination, and the winners of the
/// universes rooted here. States are shared between universes, so the audit
/// is a DAG listed in first-visit (preorder) order, root first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IrvNode {
    pub remaining: Vec<String>,
    pub first_place: BTreeMap<String, u32>,
    pub eliminated: Vec<String>,
    pub winners: BTreeSet<String>,
}

/// Rule-specific audit payloads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RuleAudit {
    Plurality {
        tallies: BTreeMap<String, u32>,
    },
    Borda {
        scores: BTreeMap<String, u64>,
    },
    Copeland {
        margins: MarginMatrix,
        scores: BTreeMap<String, i64>,
    },
    IrvPut {
        nodes: Vec<IrvNode>,
    },
}

/// Result of applying a rule: the full winner set, the deterministic
/// selection (lexicographically smallest winner), and the audit trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoteOutcome {
    pub rule: VotingRule,
    pub winner_set: BTreeSet<String>,
    pub selected: String,
    pub audit: RuleAudit,
}

fn outcome(rule: VotingRule, winner_set: BTreeSet<String>, audit: RuleAudit) -> VoteOutcome {
    let selected = winner_set
        .iter()
        .next()
        .expect("winner set is nonempty")
        .clone();
    VoteOutcome {
        rule,
        winner_set,
        selected,
        audit,
    }
}

fn argmax_set<T: Ord + Copy>(scores: &[T], candidates: &[String]) -> BTreeSet<String> {
    let best = scores.iter().max().expect("nonempty");
    scores
        .iter()
        .zip(candidates)
        .filter(|(s, _)| *s == best)
        .map(|(_, c)| c.clone())
        .collect()
}

/// Counts, for every ordered candidate pair `(a, b)`, the ballots ranking
/// `a` above `b`. Off-diagonal entries satisfy `m[a][b] + m[b][a] = ballots`.
pub fn pairwise_margins<F: Scalar>(profile: &Profile<F>) -> Vec<Vec<u32>> {
    let m = profile.num_candidates();
    let mut counts = vec![vec![0u32; m]; m];
    for ranking in profile.index_ballots() {
        for (pos, &above) in ranking.iter().enumerate() {
            for &below in &ranking[pos + 1..] {
                counts[above][below] += 1;
            }
        }
    }
    counts
}

/// The candidate beating every other in pairwise majority, if one exists.
pub fn condorcet_winner<F: Scalar>(profile: &Profile<F>) -> Option<String> {
    let margins = pairwise_margins(profile);
    let m = profile.num_candidates();
    (0..m)
        .find(|&a| (0..m).all(|b| a == b || margins[a][b] > margins[b][a]))
        .map(|a| profile.candidates()[a].clone())
}

/// First-past-the-post: most first-place votes wins.
pub fn plurality<F: Scalar>(profile: &Profile<F>) -> VoteOutcome {
    let m = profile.num_candidates();
    let mut tallies = vec![0u32; m];
    for ranking in profile.index_ballots() {
        tallies[ranking[0]] += 1;
    }
    let winner_set = argmax_set(&tallies, profile.candidates());
    let audit = RuleAudit::Plurality {
        tallies: profile
            .candidates()
            .iter()
            .zip(&tallies)
            .map(|(c, &t)| (c.clone(), t))
            .collect(),
    };
    outcome(VotingRule::Plurality, winner_set, audit)
}

/// Borda count: position p (0-indexed) on a ballot of M candidates earns
/// M - 1 - p points.
pub fn borda<F: Scalar>(profile: &Profile<F>) -> VoteOutcome {
    let m = profile.num_candidates();
    let mut scores = vec![0u64; m];
    for ranking in profile.index_ballots() {
        for (pos, &cand) in ranking.iter().enumerate() {
            scores[cand] += (m - 1 - pos) as u64;
        }
    }
    let winner_set = argmax_set(&scores, profile.candidates());
    let audit = RuleAudit::Borda {
        scores: profile
            .candidates()
            .iter()
            .zip(&scores)
            .map(|(c, &s)| (c.clone(), s))
            .collect(),
    };
    outcome(VotingRule::Borda, winner_set, audit)
}

/// Copeland: score = pairwise wins minus pairwise losses, ties worth zero.
/// Condorcet-consistent: a Condorcet winner scores M - 1, strictly above
/// everyone else.
pub fn copeland<F: Scalar>(profile: &Profile<F>) -> VoteOutcome {
    let m = profile.num_candidates();
    let margins = pairwise_margins(profile);
    let mut scores = vec![0i64; m];
    for a in 0..m {
        for b in 0..m {
            if a == b {
                continue;
            }
            if margins[a][b] > margins[b][a] {
                scores[a] += 1;
            } else if margins[a][b] < margins[b][a] {
                scores[a] -= 1;
            }
        }
    }
    let winner_set = argmax_set(&scores, profile.candidates());
    let audit = RuleAudit::Copeland {
        margins: MarginMatrix {
            candidates: profile.candidates().to_vec(),
            counts: margins,
        },
        scores: profile
            .candidates()
            .iter()
            .zip(&scores)
            .map(|(c, &s)| (c.clone(), s))
            .collect(),
    };
    outcome(VotingRule::Copeland, winner_set, audit)
}

struct IrvState<'a> {
    rankings: &'a [Vec<usize>],
    candidates: &'a [String],
    memo: HashMap<u32, BTreeSet<usize>>,
    /// Node masks in first-visit order, with tallies and branch lists.
    order: Vec<u32>,
    nodes: HashMap<u32, (Vec<u32>, Vec<usize>, BTreeSet<usize>)>,
}

impl<'a> IrvState<'a> {
    fn first_place_counts(&self, mask: u32) -> Vec<u32> {
        let mut counts = vec![0u32; self.candidates.len()];
        for ranking in self.rankings {
            let top = ranking
                .iter()
                .find(|&&c| mask & (1 << c) != 0)
                .expect("mask is nonempty");
            counts[*top] += 1;
        }
        counts
    }

    fn solve(&mut self, mask: u32) -> BTreeSet<usize> {
        if let Some(hit) = self.memo.get(&mask) {
            return hit.clone();
        }
        let remaining: Vec<usize> = (0..self.candidates.len())
            .filter(|&c| mask & (1 << c) != 0)
            .collect();
        let counts = self.first_place_counts(mask);

        let (winners, branched) = if remaining.len() == 1 {
            (BTreeSet::from([remaining[0]]), Vec::new())
        } else {
            let min_count = remaining.iter().map(|&c| counts[c]).min().expect("nonempty");
            let lowest: Vec<usize> = remaining
                .iter()
                .copied()
                .filter(|&c| counts[c] == min_count)
                .collect();
            if lowest.len() == remaining.len() {
                // Every remaining candidate ties for last: the universe ends
                // with all of them winning.
                (remaining.iter().copied().collect(), Vec::new())
            } else {
                self.order.push(mask);
                self.nodes.insert(
                    mask,
                    (counts.clone(), lowest.clone(), BTreeSet::new()),
                );
                let mut winners = BTreeSet::new();
                for &out in &lowest {
                    winners.extend(self.solve(mask & !(1 << out)));
                }
                self.nodes.get_mut(&mask).expect("inserted above").2 = winners.clone();
                self.memo.insert(mask, winners.clone());
                return winners;
            }
        };
        self.order.push(mask);
        self.nodes
            .insert(mask, (counts, branched, winners.clone()));
        self.memo.insert(mask, winners.clone());
        winners
    }
}

/// Instant-runoff with parallel-universe tie-breaking: when several
/// candidates tie for fewest first-place votes, every choice of eliminee
/// spawns a universe, and the winner set is the union over universes. No
/// majority shortcut is taken; a strict-majority candidate survives every
/// round anyway.
pub fn irv_put<F: Scalar>(profile: &Profile<F>) -> Result<VoteOutcome, VotingError> {
    let m = profile.num_candidates();
    if m > MAX_IRV_CANDIDATES {
        return Err(VotingError::TooManyCandidates { found: m });
    }
    let rankings = profile.index_ballots();
    let mut state = IrvState {
        rankings: &rankings,
        candidates: profile.candidates(),
        memo: HashMap::new(),
        order: Vec::new(),
        nodes: HashMap::new(),
    };
    let full_mask = (1u32 << m) - 1;
    let winners = state.solve(full_mask);

    let nodes = state
        .order
        .iter()
        .map(|mask| {
            let (counts, branched, winners) = &state.nodes[mask];
            let remaining: Vec<String> = (0..m)
                .filter(|&c| mask & (1 << c) != 0)
                .map(|c| profile.candidates()[c].clone())
                .collect();
            IrvNode {
                first_place: (0..m)
                    .filter(|&c| mask & (1 << c) != 0)
                    .map(|c| (profile.candidates()[c].clone(), counts[c]))
                    .collect(),
                eliminated: branched
                    .iter()
                    .map(|&c| profile.candidates()[c].clone())
                    .collect(),
                winners: winners
                    .iter()
                    .map(|&c| profile.candidates()[c].clone())
                    .collect(),
                remaining,
            }
        })
        .collect();

    let winner_set: BTreeSet<String> = winners
        .iter()
        .map(|&c| profile.candidates()[c].clone())
        .collect();
    Ok(outcome(
        VotingRule::IrvPut,
        winner_set,
        RuleAudit::IrvPut { nodes },
    ))
}

/// Applies the named rule.
pub fn apply_rule<F: Scalar>(
    profile: &Profile<F>,
    rule: VotingRule,
) -> Result<VoteOutcome, VotingError> {
    Ok(match rule {
        VotingRule::Plurality => plurality(profile),
        VotingRule::Borda => borda(profile),
        VotingRule::Copeland => copeland(profile),
        VotingRule::IrvPut => irv_put(profile)?,
    })
}

/// Where a clone lands relative to its target on a ballot.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClonePlacement {
    Below,
    Above,
}

fn insert_clone<F: Scalar>(
    profile: &Profile<F>,
    target: &str,
    clone_id: &str,
    placement_for: impl Fn(usize) -> ClonePlacement,
) -> Result<Profile<F>, VotingError> {
    let target_pos = profile
        .candidates()
        .iter()
        .position(|c| c == target)
        .ok_or_else(|| VotingError::UnknownCandidate {
            candidate: target.to_string(),
        })?;
    if profile.candidates().iter().any(|c| c == clone_id) {
        return Err(VotingError::CandidateCollision {
            candidate: clone_id.to_string(),
        });
    }
    let mut candidates = profile.candidates().to_vec();
    candidates.insert(target_pos + 1, clone_id.to_string());

    let ballots = profile
        .ballots()
        .iter()
        .enumerate()
        .map(|(idx, ballot)| {
            let pos = ballot
                .ranking
                .iter()
                .position(|c| c == target)
                .expect("profile is valid");
            let insert_at = match placement_for(idx) {
                ClonePlacement::Below => pos + 1,
                ClonePlacement::Above => pos,
            };
            let mut ranking = ballot.ranking.clone();
            ranking.insert(insert_at, clone_id.to_string());
            let scores = ballot.scores.as_ref().map(|s| {
                let mut scores = s.clone();
                scores.insert(insert_at, s[pos]);
                scores
            });
            Ballot {
                juror_id: ballot.juror_id.clone(),
                ranking,
                scores,
            }
        })
        .collect();
    Profile::new(candidates, ballots)
}

/// Inserts a perfect clone of `target` immediately below it on every ballot,
/// so `{target, clone_id}` are adjacent everywhere. Any retained scores copy
/// the target's score.
pub fn clone_insert<F: Scalar>(
    profile: &Profile<F>,
    target: &str,
    clone_id: &str,
) -> Result<Profile<F>, VotingError> {
    insert_clone(profile, target, clone_id, |_| ClonePlacement::Below)
}

/// Clone insertion with a per-ballot choice of landing above or below the
/// target. The clone set is still adjacent on every ballot; mixed placements
/// are what make vote-splitting witnesses (e.g. against plurality)
/// constructible.
pub fn clone_insert_at<F: Scalar>(
    profile: &Profile<F>,
    target: &str,
    clone_id: &str,
    placements: &[ClonePlacement],
) -> Result<Profile<F>, VotingError> {
    if placements.len() != profile.num_ballots() {
        return Err(VotingError::PlacementLength {
            expected: profile.num_ballots(),
            found: placements.len(),
        });
    }
    insert_clone(profile, target, clone_id, |idx| placements[idx])
}

/// Removes a candidate from the profile (the inverse of clone insertion when
/// applied to the clone).
pub fn remove_candidate<F: Scalar>(
    profile: &Profile<F>,
    candidate: &str,
) -> Result<Profile<F>, VotingError> {
    if !profile.candidates().iter().any(|c| c == candidate) {
        return Err(VotingError::UnknownCandidate {
            candidate: candidate.to_string(),
        });
    }
    if profile.num_candidates() == 1 {
        return Err(VotingError::WouldBeEmpty {
            candidate: candidate.to_string(),
        });
    }
    let candidates = profile
        .candidates()
        .iter()
        .filter(|c| c.as_str() != candidate)
        .cloned()
        .collect();
    let ballots = profile
        .ballots()
        .iter()
        .map(|ballot| {
            let pos = ballot
                .ranking
                .iter()
                .position(|c| c == candidate)
                .expect("profile is valid");
            let mut ranking = ballot.ranking.clone();
            ranking.remove(pos);
            let scores = ballot.scores.as_ref().map(|s| {
                let mut scores = s.clone();
                scores.remove(pos);
                scores
            });
            Ballot {
                juror_id: ballot.juror_id.clone(),
                ranking,
                scores,
            }
        })
        .collect();
    Profile::new(candidates, ballots)
}

/// Mean Spearman rank correlation over all unordered juror pairs, using the
/// closed-form permutation formula `rho = 1 - 6 sum(d^2) / (M (M^2 - 1))`
/// (ballots are strict, so no tie correction is needed).
pub fn mean_pairwise_spearman<F: Scalar>(profile: &Profile<F>) -> Result<F, VotingError> {
    let m = profile.num_candidates();
    let n = profile.num_ballots();
    if n < 2 || m < 2 {
        return Err(VotingError::NotEnoughForCorrelation {
            ballots: n,
            candidates: m,
        });
    }
    // rank_of[ballot][candidate index] = position in that ballot.
    let rankings = profile.index_ballots();
    let ranks: Vec<Vec<i64>> = rankings
        .iter()
        .map(|ranking| {
            let mut rank = vec![0i64; m];
            for (pos, &cand) in ranking.iter().enumerate() {
                rank[cand] = pos as i64;
            }
            rank
        })
        .collect();
    let denom = (m * (m * m - 1)) as i64;
    let mut total = F::zero();
    let mut pairs = 0usize;
    for a in 0..n {
        for b in (a + 1)..n {
            let d2: i64 = (0..m)
                .map(|c| {
                    let d = ranks[a][c] - ranks[b][c];
                    d * d
                })
                .sum();
            let rho = F::one()
                - F::lit(6.0) * F::from_i64(d2).expect("fits") / F::from_i64(denom).expect("fits");
            total += rho;
            pairs += 1;
        }
    }
    Ok(total / F::from_usize(pairs).expect("pairs"))
}
