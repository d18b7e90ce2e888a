//! Grounding generated text back into item space with Okapi BM25 over
//! item titles, and the domain-refinement rule that falls back to the
//! sequence model's ranking whenever the grounded list strays out of the
//! target domain.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Catalog, DomainId};

#[derive(Debug, Error)]
pub enum GroundingError {
    #[error("no indexable titles: every document tokenizes to nothing")]
    AllTitlesEmpty,
}

/// Lowercase, split on non-alphanumeric, drop empties.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

/// Okapi BM25 index over item titles (document ids are item ids).
/// Attributes can be folded into the documents behind a flag.
#[derive(Clone, Debug)]
pub struct Bm25Index {
    k1: f64,
    b: f64,
    avgdl: f64,
    n_docs: usize,
    doc_len: Vec<usize>,
    /// term -> (item id, term frequency), ascending by item id.
    postings: BTreeMap<String, Vec<(u32, u32)>>,
}

pub const DEFAULT_K1: f64 = 1.2;
pub const DEFAULT_B: f64 = 0.75;

/// Builds the index; errors if every document tokenizes to nothing.
/// Zero-length documents are kept (they can never match) with a warning.
pub fn index_items(
    catalog: &Catalog,
    k1: f64,
    b: f64,
    include_attributes: bool,
) -> Result<Bm25Index, GroundingError> {
    let mut postings: BTreeMap<String, Vec<(u32, u32)>> = BTreeMap::new();
    let mut doc_len = Vec::with_capacity(catalog.n_items());
    let mut total_len = 0usize;
    for item in catalog.items() {
        let mut tokens = tokenize(&item.title);
        if include_attributes {
            for attr in &item.attributes {
                tokens.extend(tokenize(attr));
            }
        }
        if tokens.is_empty() {
            log::warn!("item {}: title tokenizes to nothing; it can never be grounded", item.id);
        }
        let mut tf: BTreeMap<&str, u32> = BTreeMap::new();
        for t in &tokens {
            *tf.entry(t).or_insert(0) += 1;
        }
        for (term, count) in tf {
            postings.entry(term.to_string()).or_default().push((item.id, count));
        }
        doc_len.push(tokens.len());
        total_len += tokens.len();
    }
    if total_len == 0 {
        return Err(GroundingError::AllTitlesEmpty);
    }
    let n_docs = catalog.n_items();
    Ok(Bm25Index { k1, b, avgdl: total_len as f64 / n_docs as f64, n_docs, doc_len, postings })
}

impl Bm25Index {
    pub fn n_docs(&self) -> usize {
        self.n_docs
    }

    pub fn avgdl(&self) -> f64 {
        self.avgdl
    }

    pub fn doc_len(&self, id: u32) -> usize {
        self.doc_len[id as usize]
    }

    pub fn document_frequency(&self, term: &str) -> usize {
        self.postings.get(term).map_or(0, Vec::len)
    }

    /// Non-negative Okapi idf: `ln(1 + (N - df + 0.5) / (df + 0.5))`.
    pub fn idf(&self, term: &str) -> f64 {
        let df = self.document_frequency(term) as f64;
        let n = self.n_docs as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }

    /// BM25 score of a query against one document; distinct query terms
    /// count once. `tf * (k1 + 1) / (tf + k1 * (1 - b + b * dl / avgdl))`
    /// saturates the term frequency.
    pub fn score(&self, query: &str, item: u32) -> f64 {
        let mut terms: Vec<String> = tokenize(query);
        terms.sort();
        terms.dedup();
        let dl = self.doc_len[item as usize] as f64;
        let mut total = 0.0;
        for term in &terms {
            let Some(posts) = self.postings.get(term) else { continue };
            let Ok(pos) = posts.binary_search_by_key(&item, |&(id, _)| id) else { continue };
            let tf = posts[pos].1 as f64;
            let sat = tf * (self.k1 + 1.0) / (tf + self.k1 * (1.0 - self.b + self.b * dl / self.avgdl));
            total += self.idf(term) * sat;
        }
        total
    }
}

/// Items ranked by descending BM25 score of the generated text against
/// titles; zero-score items are excluded, ties break by ascending id, and
/// the list is truncated to `limit`. An empty query grounds to nothing.
pub fn ground(text: &str, index: &Bm25Index, limit: usize) -> Vec<u32> {
    let mut terms: Vec<String> = tokenize(text);
    terms.sort();
    terms.dedup();
    if terms.is_empty() {
        return Vec::new();
    }
    let mut scores: BTreeMap<u32, f64> = BTreeMap::new();
    for term in &terms {
        let Some(posts) = index.postings.get(term) else { continue };
        let idf = index.idf(term);
        for &(id, tf) in posts {
            let dl = index.doc_len[id as usize] as f64;
            let tf = tf as f64;
            let sat =
                tf * (index.k1 + 1.0) / (tf + index.k1 * (1.0 - index.b + index.b * dl / index.avgdl));
            *scores.entry(id).or_insert(0.0) += idf * sat;
        }
    }
    let mut ranked: Vec<(f64, u32)> =
        scores.into_iter().filter(|&(_, s)| s > 0.0).map(|(id, s)| (s, id)).collect();
    ranked.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal).then(a.1.cmp(&b.1)));
    ranked.into_iter().take(limit).map(|(_, id)| id).collect()
}

/// Where the final ranking came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AnswerSource {
    /// Sequence model ranking, no generation involved.
    GraphModel,
    /// BM25-grounded generation that stayed in-domain.
    Grounded,
    /// Grounded list rejected by the domain check; sequence model ranking
    /// returned instead.
    RefinedFallback,
}

/// Ordered recommendation with provenance.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RankedAnswer {
    pub items: Vec<u32>,
    pub source: AnswerSource,
    pub top_m_inspected: usize,
}

/// Inspects the first `min(m, |grounded|)` grounded ids: if any falls
/// outside the target domain's id range — or the grounded list is empty —
/// the model ranking wins; otherwise the grounded list stands.
pub fn refine_answer(
    grounded: &[u32],
    model_ranking: &[u32],
    target_domain: DomainId,
    catalog: &Catalog,
    m: usize,
) -> RankedAnswer {
    assert!(m >= 1, "m must be at least 1");
    assert!(!model_ranking.is_empty(), "the model ranking is always total");
    let inspected = m.min(grounded.len());
    let in_domain =
        !grounded.is_empty() && grounded[..inspected].iter().all(|&id| catalog.domain_of(id) == target_domain);
    if in_domain {
        RankedAnswer { items: grounded.to_vec(), source: AnswerSource::Grounded, top_m_inspected: inspected }
    } else {
        RankedAnswer {
            items: model_ranking.to_vec(),
            source: AnswerSource::RefinedFallback,
            top_m_inspected: inspected,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::test_catalog;

    fn star_catalog() -> Catalog {
        test_catalog(&[
            (0, DomainId::A, "Star Wars", &[]),
            (1, DomainId::A, "Star Trek", &[]),
        ])
    }

    #[test]
    fn index_stats_by_hand() {
        let idx = index_items(&star_catalog(), DEFAULT_K1, DEFAULT_B, false).unwrap();
        assert_eq!(idx.document_frequency("star"), 2);
        assert_eq!(idx.document_frequency("trek"), 1);
        assert_eq!(idx.avgdl(), 2.0);

        let one = test_catalog(&[(0, DomainId::A, "just three little words", &[])]);
        let idx = index_items(&one, DEFAULT_K1, DEFAULT_B, false).unwrap();
        assert_eq!(idx.avgdl(), 4.0);
    }

    #[test]
    fn punctuation_only_title_is_kept_but_unmatchable() {
        let catalog = test_catalog(&[
            (0, DomainId::A, "...", &[]),
            (1, DomainId::A, "real title", &[]),
        ]);
        let idx = index_items(&catalog, DEFAULT_K1, DEFAULT_B, false).unwrap();
        assert_eq!(idx.doc_len(0), 0);
        assert!(ground("anything real", &idx, 10).iter().all(|&id| id == 1));
    }

    #[test]
    fn all_empty_titles_error() {
        let catalog = test_catalog(&[(0, DomainId::A, "!!!", &[]), (1, DomainId::A, "---", &[])]);
        assert!(matches!(
            index_items(&catalog, DEFAULT_K1, DEFAULT_B, false),
            Err(GroundingError::AllTitlesEmpty)
        ));
    }

    #[test]
    fn trek_query_scores_ln2_with_length_term_cancelling() {
        // dl = avgdl makes the length normalization drop out:
        // idf = ln(1 + (2 - 1 + 0.5)/(1 + 0.5)) = ln 2, tf term = 2.2/2.2
        let idx = index_items(&star_catalog(), DEFAULT_K1, DEFAULT_B, false).unwrap();
        let s = idx.score("trek", 1);
        assert!((s - (2.0f64).ln()).abs() < 1e-9, "got {s}");
        assert!((s * 10000.0).round() == 6931.0, "four decimal places: 0.6931");
        let top = ground("trek", &idx, 10);
        assert_eq!(top[0], 1);
    }

    #[test]
    fn unknown_token_grounds_to_nothing() {
        let idx = index_items(&star_catalog(), DEFAULT_K1, DEFAULT_B, false).unwrap();
        assert!(ground("galactica", &idx, 10).is_empty());
        assert!(ground("...", &idx, 10).is_empty());
    }

    #[test]
    fn exact_title_query_ranks_its_item_first() {
        let catalog = test_catalog(&[
            (0, DomainId::A, "deep blue sea", &[]),
            (1, DomainId::A, "blue sky mine", &[]),
            (2, DomainId::A, "deep sky survey", &[]),
        ]);
        let idx = index_items(&catalog, DEFAULT_K1, DEFAULT_B, false).unwrap();
        for item in catalog.items() {
            // brute-force oracle over all documents
            let mut best = (f64::NEG_INFINITY, 0u32);
            for other in catalog.items() {
                let s = idx.score(&item.title, other.id);
                if s > best.0 {
                    best = (s, other.id);
                }
            }
            assert_eq!(best.1, item.id);
            assert_eq!(ground(&item.title, &idx, 1), vec![item.id]);
        }
    }

    #[test]
    fn ground_matches_per_document_scorer() {
        // the accumulator route and the single-document route are
        // independent computations of the same formula
        let catalog = test_catalog(&[
            (0, DomainId::A, "alpha beta gamma", &[]),
            (1, DomainId::A, "beta gamma delta", &[]),
            (2, DomainId::A, "gamma delta alpha epsilon", &[]),
            (3, DomainId::B, "zeta eta", &[]),
        ]);
        let idx = index_items(&catalog, DEFAULT_K1, DEFAULT_B, false).unwrap();
        for query in ["alpha", "beta gamma", "delta epsilon zeta", "alpha alpha beta"] {
            let ranked = ground(query, &idx, 10);
            let mut expect: Vec<(f64, u32)> = (0..4u32)
                .map(|id| (idx.score(query, id), id))
                .filter(|&(s, _)| s > 0.0)
                .collect();
            expect.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            let expect: Vec<u32> = expect.into_iter().map(|(_, id)| id).collect();
            assert_eq!(ranked, expect, "query {query:?}");
        }
    }

    #[test]
    fn attributes_extend_documents_when_enabled() {
        let catalog = test_catalog(&[
            (0, DomainId::A, "plain title", &["quirky"]),
            (1, DomainId::A, "other title", &[]),
        ]);
        let without = index_items(&catalog, DEFAULT_K1, DEFAULT_B, false).unwrap();
        assert!(ground("quirky", &without, 5).is_empty());
        let with = index_items(&catalog, DEFAULT_K1, DEFAULT_B, true).unwrap();
        assert_eq!(ground("quirky", &with, 5), vec![0]);
    }

    fn range_catalog() -> Catalog {
        let items: Vec<(u32, DomainId, String)> = (0..10u32)
            .map(|id| (id, if id < 5 { DomainId::A } else { DomainId::B }, format!("item {id}")))
            .collect();
        let refs: Vec<(u32, DomainId, &str, &[&str])> =
            items.iter().map(|(id, d, t)| (*id, *d, t.as_str(), &[] as &[&str])).collect();
        test_catalog(&refs)
    }

    #[test]
    fn refine_keeps_in_domain_grounded_lists() {
        let catalog = range_catalog();
        let model: Vec<u32> = vec![4, 3, 2, 1, 0];
        let grounded = vec![3, 0, 1, 2, 4, 9]; // out-of-domain id 9 beyond m = 5
        let ans = refine_answer(&grounded, &model, DomainId::A, &catalog, 5);
        assert_eq!(ans.source, AnswerSource::Grounded);
        assert_eq!(ans.items, grounded);
        assert_eq!(ans.top_m_inspected, 5);
    }

    #[test]
    fn refine_falls_back_on_out_of_domain_or_empty() {
        let catalog = range_catalog();
        let model: Vec<u32> = vec![4, 3, 2, 1, 0];
        let grounded = vec![3, 9, 1]; // 9 is domain B
        let ans = refine_answer(&grounded, &model, DomainId::A, &catalog, 5);
        assert_eq!(ans.source, AnswerSource::RefinedFallback);
        assert_eq!(ans.items, model);
        assert_eq!(ans.top_m_inspected, 3);

        let ans = refine_answer(&[], &model, DomainId::A, &catalog, 5);
        assert_eq!(ans.source, AnswerSource::RefinedFallback);
        assert_eq!(ans.items, model);
    }

    #[test]
    fn refine_truth_table_over_bit_patterns() {
        // grounded lists of length 10; bit t of the pattern decides
        // whether position t is in-domain. With m = 5 the answer keeps the
        // grounded list exactly when the low five bits are all in-domain.
        let catalog = range_catalog();
        let model: Vec<u32> = (0..5u32).collect();
        for pattern in 0u32..(1 << 10) {
            let grounded: Vec<u32> = (0..10)
                .map(|t| if pattern >> t & 1 == 1 { t as u32 % 5 } else { 5 + (t as u32 % 5) })
                .collect();
            let ans = refine_answer(&grounded, &model, DomainId::A, &catalog, 5);
            let keep = (0..5).all(|t| pattern >> t & 1 == 1);
            assert_eq!(
                ans.source,
                if keep { AnswerSource::Grounded } else { AnswerSource::RefinedFallback },
                "pattern {pattern:#012b}"
            );
        }
    }
}
