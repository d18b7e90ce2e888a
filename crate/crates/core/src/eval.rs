//! Leave-one-out evaluation over the whole per-domain candidate set:
//! HR@K, NDCG@K, MRR, user-hit-rate of the retrieved histories, and
//! warm/cold partitioned reports, plus the end-to-end pipeline
//! (encode -> retrieve -> prompt -> generate -> ground -> refine -> rank).

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Catalog, DomainId, EvalPair, UserSequence};
use crate::gnn::ItemRepresentations;
use crate::grounding::{ground, refine_answer, AnswerSource, Bm25Index};
use crate::llm::{build_inference_prompt, generate_recommendation, GenerationBackend, LlmError};
use crate::model::{ModelError, ModelState};
use crate::retrieval::{knn_retrieve_excluding, RetrievalError, UserEmbeddingIndex};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no users to evaluate")]
    NoUsers,
    #[error("{path}:{line}: malformed trace record: {message}")]
    MalformedTrace { path: String, line: usize, message: String },
    #[error("retrieved user {0} has no known history")]
    UnknownRetrievedUser(u32),
    #[error("user hit rate undefined: retrieved histories are empty")]
    ZeroRetrievedLength,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

/// 1-based rank of the target inside a ranking; `None` means the target
/// never appears (rank infinity: zero contribution to every metric).
pub type Rank = Option<usize>;

pub fn rank_of_target(ranking: &[u32], target: u32) -> Rank {
    ranking.iter().position(|&id| id == target).map(|p| p + 1)
}

/// Which slice of test users a report covers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    All,
    Warm,
    Cold,
}

/// Top-K metrics over one partition. `hr@k` is the fraction of users with
/// rank <= k, `ndcg@k` averages `1/log2(rank + 1)` for hits, `mrr`
/// averages reciprocal ranks; misses contribute zero everywhere.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub partition: Partition,
    pub n_users: usize,
    pub hr: BTreeMap<usize, f64>,
    pub ndcg: BTreeMap<usize, f64>,
    pub mrr: f64,
}

pub const DEFAULT_KS: [usize; 4] = [1, 5, 10, 20];

pub fn metrics_from_ranks(ranks: &[Rank], ks: &[usize], partition: Partition) -> Result<MetricReport, EvalError> {
    if ranks.is_empty() {
        return Err(EvalError::NoUsers);
    }
    let n = ranks.len() as f64;
    let mut hr = BTreeMap::new();
    let mut ndcg = BTreeMap::new();
    for &k in ks {
        let mut hits = 0.0;
        let mut gain = 0.0;
        for rank in ranks.iter().flatten() {
            if *rank <= k {
                hits += 1.0;
                gain += 1.0 / ((*rank as f64) + 1.0).log2();
            }
        }
        hr.insert(k, hits / n);
        ndcg.insert(k, gain / n);
    }
    let mut rr = 0.0;
    for rank in ranks.iter().flatten() {
        rr += 1.0 / *rank as f64;
    }
    Ok(MetricReport { partition, n_users: ranks.len(), hr, ndcg, mrr: rr / n })
}

/// Cold users have fewer than 3 prefix events in the target's domain.
pub fn is_cold(pair: &EvalPair, catalog: &Catalog) -> bool {
    let domain = catalog.domain_of(pair.target);
    let relevant = pair.prefix.iter().filter(|&&id| catalog.domain_of(id) == domain).count();
    relevant < 3
}

pub fn warm_cold_partition<'a>(
    pairs: &'a [EvalPair],
    catalog: &Catalog,
) -> (Vec<&'a EvalPair>, Vec<&'a EvalPair>) {
    let mut warm = Vec::new();
    let mut cold = Vec::new();
    for p in pairs {
        if is_cold(p, catalog) {
            cold.push(p);
        } else {
            warm.push(p);
        }
    }
    (warm, cold)
}

/// Hit indicator of the retrieved users' histories containing the target,
/// divided by the total retrieved interaction length.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UhrRecord {
    pub hit: bool,
    pub total_length: usize,
    pub uhr: f64,
}

pub fn compute_uhr(retrieved: &[&UserSequence], target: u32) -> Result<UhrRecord, EvalError> {
    let total_length: usize = retrieved.iter().map(|s| s.events.len()).sum();
    if total_length == 0 {
        return Err(EvalError::ZeroRetrievedLength);
    }
    let hit = retrieved.iter().any(|s| s.events.contains(&target));
    Ok(UhrRecord { hit, total_length, uhr: if hit { 1.0 / total_length as f64 } else { 0.0 } })
}

/// One line of the per-user evaluation trace.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TraceRecord {
    pub user: u32,
    /// 1-based rank of the target in the final answer; `null` when the
    /// target never appears.
    pub rank: Rank,
    pub source: AnswerSource,
    /// Retrieval quality for this user; `null` when nothing was retrieved.
    pub uhr: Option<f64>,
    pub partition: Partition,
}

/// Everything the end-to-end evaluation needs.
pub struct Pipeline<'a> {
    pub model: &'a ModelState,
    pub reps: &'a ItemRepresentations,
    pub index: &'a UserEmbeddingIndex,
    pub train_users: &'a [UserSequence],
    pub catalog: &'a Catalog,
    pub bm25: &'a Bm25Index,
    /// `None` evaluates the sequence model alone.
    pub backend: Option<&'a dyn GenerationBackend>,
    /// Retrieved users per prompt; 0 disables retrieval (the prompt
    /// carries no similar-user block).
    pub k: usize,
    /// Domain-check depth of the refinement rule.
    pub m: usize,
    pub max_tokens: usize,
    pub seed: u64,
}

/// Result of recommending for one user history.
pub struct Recommendation {
    pub answer: crate::grounding::RankedAnswer,
    pub retrieved: Vec<u32>,
}

pub struct EvalRun {
    pub reports: Vec<MetricReport>,
    pub traces: Vec<TraceRecord>,
}

impl<'a> Pipeline<'a> {
    fn history(&self, user_id: u32) -> Option<&'a UserSequence> {
        self.train_users.iter().find(|s| s.user_id == user_id)
    }

    /// Runs the full answer path for one user history. Backend failures
    /// (after bounded retries) and out-of-domain generations both fall
    /// back to the sequence model's own ranking, which always exists.
    pub fn recommend(&self, user_id: u32, events: &[u32], domain: DomainId) -> Result<Recommendation, EvalError> {
        let pref = self.model.encode_user(events, self.reps)?;
        let model_ranking = self.model.score_items(&pref, domain);

        let Some(backend) = self.backend else {
            return Ok(Recommendation {
                answer: crate::grounding::RankedAnswer {
                    items: model_ranking,
                    source: AnswerSource::GraphModel,
                    top_m_inspected: 0,
                },
                retrieved: Vec::new(),
            });
        };

        let retrieved_ids = if self.k == 0 {
            Vec::new()
        } else {
            knn_retrieve_excluding(&pref, self.index, domain, self.k, Some(user_id))?
        };
        let mut retrieved_seqs = Vec::with_capacity(retrieved_ids.len());
        for &rid in &retrieved_ids {
            retrieved_seqs
                .push(self.history(rid).ok_or(EvalError::UnknownRetrievedUser(rid))?.clone());
        }

        let prompt = build_inference_prompt(
            &UserSequence { user_id, events: events.to_vec() },
            &retrieved_seqs,
            domain,
            self.catalog,
        )?;
        let answer = match generate_recommendation(&prompt, backend, self.max_tokens, Some(self.seed)) {
            Ok(outcome) => {
                let grounded = ground(&outcome.text, self.bm25, self.catalog.n_items());
                refine_answer(&grounded, &model_ranking, domain, self.catalog, self.m)
            }
            Err(e) => {
                log::warn!("user {user_id}: generation failed ({e}); answering from the sequence model");
                crate::grounding::RankedAnswer {
                    items: model_ranking,
                    source: AnswerSource::GraphModel,
                    top_m_inspected: 0,
                }
            }
        };
        Ok(Recommendation { answer, retrieved: retrieved_ids })
    }

    /// Evaluates every (prefix, target) pair in ascending user order and
    /// reduces to all/warm/cold reports plus the per-user trace.
    pub fn evaluate(&self, pairs: &[EvalPair], ks: &[usize]) -> Result<EvalRun, EvalError> {
        if pairs.is_empty() {
            return Err(EvalError::NoUsers);
        }
        let mut ordered: Vec<&EvalPair> = pairs.iter().collect();
        ordered.sort_by_key(|p| p.user_id);

        let mut traces = Vec::with_capacity(ordered.len());
        let mut ranks_all = Vec::with_capacity(ordered.len());
        let mut ranks_warm = Vec::new();
        let mut ranks_cold = Vec::new();
        for pair in ordered {
            let domain = self.catalog.domain_of(pair.target);
            let rec = self.recommend(pair.user_id, &pair.prefix, domain)?;
            let rank = rank_of_target(&rec.answer.items, pair.target);
            let partition = if is_cold(pair, self.catalog) { Partition::Cold } else { Partition::Warm };
            // UHR scores the retrieved histories against the held-out target
            let uhr = if rec.retrieved.is_empty() {
                None
            } else {
                let refs: Vec<&UserSequence> =
                    rec.retrieved.iter().filter_map(|&rid| self.history(rid)).collect();
                Some(compute_uhr(&refs, pair.target)?.uhr)
            };
            traces.push(TraceRecord { user: pair.user_id, rank, source: rec.answer.source, uhr, partition });
            ranks_all.push(rank);
            match partition {
                Partition::Warm => ranks_warm.push(rank),
                Partition::Cold => ranks_cold.push(rank),
                Partition::All => unreachable!(),
            }
        }

        let mut reports = vec![metrics_from_ranks(&ranks_all, ks, Partition::All)?];
        if !ranks_warm.is_empty() {
            reports.push(metrics_from_ranks(&ranks_warm, ks, Partition::Warm)?);
        }
        if !ranks_cold.is_empty() {
            reports.push(metrics_from_ranks(&ranks_cold, ks, Partition::Cold)?);
        }
        Ok(EvalRun { reports, traces })
    }
}

pub fn write_trace(traces: &[TraceRecord], path: &Path) -> Result<(), EvalError> {
    use std::io::Write;
    let io = |source: std::io::Error| EvalError::Io { path: path.display().to_string(), source };
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    for t in traces {
        serde_json::to_writer(&mut f, t).expect("trace serializes");
        f.write_all(b"\n").map_err(io)?;
    }
    f.flush().map_err(io)
}

pub fn read_trace(path: &Path) -> Result<Vec<TraceRecord>, EvalError> {
    let io = |source: std::io::Error| EvalError::Io { path: path.display().to_string(), source };
    let body = std::fs::read_to_string(path).map_err(io)?;
    body.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(no, l)| {
            serde_json::from_str(l).map_err(|e| EvalError::MalformedTrace {
                path: path.display().to_string(),
                line: no + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

/// Recomputes the all/warm/cold reports from a trace file; used to verify
/// reports bitwise.
pub fn reports_from_trace(traces: &[TraceRecord], ks: &[usize]) -> Result<Vec<MetricReport>, EvalError> {
    let all: Vec<Rank> = traces.iter().map(|t| t.rank).collect();
    let warm: Vec<Rank> =
        traces.iter().filter(|t| t.partition == Partition::Warm).map(|t| t.rank).collect();
    let cold: Vec<Rank> =
        traces.iter().filter(|t| t.partition == Partition::Cold).map(|t| t.rank).collect();
    let mut out = vec![metrics_from_ranks(&all, ks, Partition::All)?];
    if !warm.is_empty() {
        out.push(metrics_from_ranks(&warm, ks, Partition::Warm)?);
    }
    if !cold.is_empty() {
        out.push(metrics_from_ranks(&cold, ks, Partition::Cold)?);
    }
    Ok(out)
}

/// Spearman rank correlation between two equal-length samples; average
/// ranks for ties.
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let rx = average_ranks(xs);
    let ry = average_ranks(ys);
    let n = xs.len() as f64;
    let mean = (n + 1.0) / 2.0;
    let mut num = 0.0;
    let mut dx = 0.0;
    let mut dy = 0.0;
    for (a, b) in rx.iter().zip(ry.iter()) {
        num += (a - mean) * (b - mean);
        dx += (a - mean) * (a - mean);
        dy += (b - mean) * (b - mean);
    }
    if dx == 0.0 || dy == 0.0 {
        return 0.0;
    }
    num / (dx * dy).sqrt()
}

fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).unwrap_or(std::cmp::Ordering::Equal));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::test_catalog;

    #[test]
    fn rank_of_target_examples() {
        assert_eq!(rank_of_target(&[5, 3, 9], 3), Some(2));
        assert_eq!(rank_of_target(&[5, 3, 9], 5), Some(1));
        assert_eq!(rank_of_target(&[5, 3, 9], 7), None);
    }

    #[test]
    fn metric_examples_by_hand() {
        let r = metrics_from_ranks(&[Some(1)], &DEFAULT_KS, Partition::All).unwrap();
        assert_eq!(r.hr[&1], 1.0);
        assert_eq!(r.ndcg[&1], 1.0);
        assert_eq!(r.mrr, 1.0);

        // single user at rank 3: ndcg@5 = 1/log2(4) = 0.5, mrr = 1/3
        let r = metrics_from_ranks(&[Some(3)], &DEFAULT_KS, Partition::All).unwrap();
        assert_eq!(r.hr[&1], 0.0);
        assert_eq!(r.hr[&5], 1.0);
        assert!((r.ndcg[&5] - 0.5).abs() < 1e-12);
        assert!((r.mrr - 1.0 / 3.0).abs() < 1e-12);

        // ranks [2, miss]: mrr = (0.5 + 0)/2
        let r = metrics_from_ranks(&[Some(2), None], &DEFAULT_KS, Partition::All).unwrap();
        assert!((r.mrr - 0.25).abs() < 1e-12);

        assert!(matches!(metrics_from_ranks(&[], &DEFAULT_KS, Partition::All), Err(EvalError::NoUsers)));
    }

    #[test]
    fn hr_monotone_and_ndcg1_equals_hr1() {
        use rand::{RngExt, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(31);
        for _ in 0..30 {
            let ranks: Vec<Rank> = (0..rng.random_range(1..40))
                .map(|_| {
                    if rng.random_bool(0.2) {
                        None
                    } else {
                        Some(rng.random_range(1..50usize))
                    }
                })
                .collect();
            let r = metrics_from_ranks(&ranks, &DEFAULT_KS, Partition::All).unwrap();
            let mut prev = 0.0;
            for k in DEFAULT_KS {
                assert!(r.hr[&k] >= prev, "hr must be nondecreasing in k");
                assert!(r.ndcg[&k] <= r.hr[&k] + 1e-12, "ndcg is dominated by hr");
                prev = r.hr[&k];
            }
            assert_eq!(r.ndcg[&1], r.hr[&1], "a rank-1 hit has gain exactly 1");
            // ranks beyond the last k contribute at most 1/(k+1) each
            let tail = 1.0 / (DEFAULT_KS[3] as f64 + 1.0);
            assert!(r.mrr <= r.hr[&DEFAULT_KS[3]] + tail);
        }
    }

    #[test]
    fn warm_cold_threshold_is_three_domain_events() {
        let catalog = test_catalog(&[
            (0, DomainId::A, "a0", &[]),
            (1, DomainId::A, "a1", &[]),
            (2, DomainId::A, "a2", &[]),
            (3, DomainId::B, "b0", &[]),
        ]);
        let pair = |prefix: Vec<u32>, target: u32| EvalPair { user_id: 0, prefix, target };
        // 2 domain-A events -> cold
        assert!(is_cold(&pair(vec![0, 1, 3], 2), &catalog));
        // exactly 3 -> warm ("less than 3" is cold)
        assert!(!is_cold(&pair(vec![0, 1, 2, 3], 0), &catalog));
        // zero -> cold
        assert!(is_cold(&pair(vec![3], 0), &catalog));
    }

    #[test]
    fn uhr_examples() {
        let seq = |user_id, events: &[u32]| UserSequence { user_id, events: events.to_vec() };
        let one = seq(0, &[1, 2, 3, 4]);
        let r = compute_uhr(&[&one], 3).unwrap();
        assert!(r.hit);
        assert!((r.uhr - 0.25).abs() < 1e-12);

        let r = compute_uhr(&[&one], 9).unwrap();
        assert!(!r.hit);
        assert_eq!(r.uhr, 0.0);

        let a = seq(0, &[1, 2, 3]);
        let b = seq(1, &[4, 5, 6, 7, 3]);
        let r = compute_uhr(&[&a, &b], 3).unwrap();
        assert!((r.uhr - 1.0 / 8.0).abs() < 1e-12);

        let empty = seq(2, &[]);
        assert!(matches!(compute_uhr(&[&empty], 1), Err(EvalError::ZeroRetrievedLength)));
    }

    #[test]
    fn spearman_signs() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]) - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[30.0, 20.0, 10.0]) + 1.0).abs() < 1e-12);
        assert!(spearman(&[1.0, 2.0, 3.0, 4.0, 5.0], &[1.0, 3.0, 2.0, 5.0, 4.0]) > 0.0);
        assert_eq!(spearman(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]), 0.0);
    }

    #[test]
    fn trace_roundtrip() {
        let traces = vec![
            TraceRecord { user: 3, rank: Some(2), source: AnswerSource::Grounded, uhr: Some(0.25), partition: Partition::Warm },
            TraceRecord { user: 5, rank: None, source: AnswerSource::RefinedFallback, uhr: None, partition: Partition::Cold },
        ];
        let f = tempfile::NamedTempFile::new().unwrap();
        write_trace(&traces, f.path()).unwrap();
        let back = read_trace(f.path()).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].rank, Some(2));
        assert_eq!(back[1].rank, None);
        assert_eq!(back[1].partition, Partition::Cold);
    }
}
