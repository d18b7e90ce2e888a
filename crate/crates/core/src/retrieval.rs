//! Per-user domain preference vectors and exact top-k nearest-neighbor
//! retrieval by inner product over unit-normalized rows.

use std::collections::BTreeMap;
use std::path::Path;

use thiserror::Error;

use crate::checkpoint::{load_index, save_index, CheckpointError};
use crate::dataset::{DomainId, UserSequence};
use crate::gnn::ItemRepresentations;
use crate::linalg::{dot, l2_norm, normalize, Mat};
use crate::model::{ModelError, ModelState, UserPreference};

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("index is empty")]
    EmptyIndex,
    #[error("index has a single user; no neighbor excluding self exists")]
    SingleUser,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// Row-aligned per-user embeddings for both domains. Rows follow
/// `user_ids` order; when `normalized` is set every non-degenerate row has
/// unit L2 norm.
#[derive(Clone, Debug)]
pub struct UserEmbeddingIndex {
    user_ids: Vec<u32>,
    domain_a: Mat,
    domain_b: Mat,
    normalized: bool,
}

impl UserEmbeddingIndex {
    /// Wraps pre-computed per-user rows; rows align with `user_ids`.
    pub fn from_rows(user_ids: Vec<u32>, domain_a: Mat, domain_b: Mat, normalized: bool) -> Self {
        assert_eq!(user_ids.len(), domain_a.rows());
        assert_eq!(user_ids.len(), domain_b.rows());
        UserEmbeddingIndex { user_ids, domain_a, domain_b, normalized }
    }

    pub fn len(&self) -> usize {
        self.user_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.user_ids.is_empty()
    }

    pub fn user_ids(&self) -> &[u32] {
        &self.user_ids
    }

    pub fn normalized(&self) -> bool {
        self.normalized
    }

    pub fn rows(&self, domain: DomainId) -> &Mat {
        match domain {
            DomainId::A => &self.domain_a,
            DomainId::B => &self.domain_b,
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        save_index(&self.user_ids, &self.domain_a, &self.domain_b, self.normalized, path)
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let p = load_index(path)?;
        Ok(UserEmbeddingIndex {
            user_ids: p.user_ids,
            domain_a: p.domain_a,
            domain_b: p.domain_b,
            normalized: p.normalized,
        })
    }
}

/// Encodes every train user and stores the normalized per-domain vectors
/// `h_full + h_a` and `h_full + h_b`. A zero preference vector cannot be
/// normalized and is stored as zeros with a warning.
pub fn build_index(
    train_users: &[UserSequence],
    model: &ModelState,
    reps: &ItemRepresentations,
) -> Result<UserEmbeddingIndex, RetrievalError> {
    let width = model.dims.width;
    let mut user_ids = Vec::with_capacity(train_users.len());
    let mut rows_a = Mat::zeros(train_users.len(), width);
    let mut rows_b = Mat::zeros(train_users.len(), width);
    for (i, seq) in train_users.iter().enumerate() {
        let pref = model.encode_user(&seq.events, reps)?;
        for (domain, rows) in [(DomainId::A, &mut rows_a), (DomainId::B, &mut rows_b)] {
            let combined = pref.combined(domain);
            if l2_norm(&combined) == 0.0 {
                log::warn!("user {}: zero preference vector for domain {domain}; stored unnormalized", seq.user_id);
                continue;
            }
            rows.row_mut(i).copy_from_slice(&normalize(&combined));
        }
        user_ids.push(seq.user_id);
    }
    Ok(UserEmbeddingIndex { user_ids, domain_a: rows_a, domain_b: rows_b, normalized: true })
}

/// Top-k users by descending inner product of the normalized query against
/// the stored rows for the given domain. Ties break by ascending user id;
/// at most `min(k, n_users)` ids come back.
pub fn knn_retrieve(
    query: &UserPreference,
    index: &UserEmbeddingIndex,
    domain: DomainId,
    k: usize,
) -> Result<Vec<u32>, RetrievalError> {
    knn_retrieve_excluding(query, index, domain, k, None)
}

/// Same as [`knn_retrieve`] but optionally skipping one user id (used at
/// evaluation time when the query user itself sits in the index).
pub fn knn_retrieve_excluding(
    query: &UserPreference,
    index: &UserEmbeddingIndex,
    domain: DomainId,
    k: usize,
    exclude: Option<u32>,
) -> Result<Vec<u32>, RetrievalError> {
    assert!(k >= 1, "k must be at least 1");
    if index.is_empty() {
        return Err(RetrievalError::EmptyIndex);
    }
    let q = normalize(&query.combined(domain));
    let rows = index.rows(domain);
    // (negated score, user id) sorts ascending = descending score with
    // ascending-id tie break
    let mut scored: Vec<(f64, u32)> = index
        .user_ids
        .iter()
        .enumerate()
        .filter(|(_, &uid)| Some(uid) != exclude)
        .map(|(i, &uid)| (dot(rows.row(i), &q), uid))
        .collect();
    scored.sort_by(|a, b| {
        b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal).then(a.1.cmp(&b.1))
    });
    Ok(scored.into_iter().take(k).map(|(_, uid)| uid).collect())
}

/// For every indexed user, its nearest neighbor excluding itself (the
/// rank-2 hit overall, since each user is its own best match).
pub fn training_neighbors(
    index: &UserEmbeddingIndex,
    domain: DomainId,
) -> Result<BTreeMap<u32, u32>, RetrievalError> {
    if index.is_empty() {
        return Err(RetrievalError::EmptyIndex);
    }
    if index.len() == 1 {
        return Err(RetrievalError::SingleUser);
    }
    let rows = index.rows(domain);
    let mut out = BTreeMap::new();
    for (i, &uid) in index.user_ids.iter().enumerate() {
        let q = rows.row(i);
        let mut best: Option<(f64, u32)> = None;
        for (j, &other) in index.user_ids.iter().enumerate() {
            if other == uid {
                continue;
            }
            let s = dot(rows.row(j), q);
            let better = match best {
                None => true,
                Some((bs, bu)) => s > bs || (s == bs && other < bu),
            };
            if better {
                best = Some((s, other));
            }
        }
        out.insert(uid, best.expect("index has at least two users").1);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn index_from_rows(rows: &[(u32, Vec<f64>)]) -> UserEmbeddingIndex {
        let user_ids: Vec<u32> = rows.iter().map(|(u, _)| *u).collect();
        let mats: Vec<Vec<f64>> = rows.iter().map(|(_, r)| normalize(r)).collect();
        let m = Mat::from_rows(&mats);
        UserEmbeddingIndex { user_ids, domain_a: m.clone(), domain_b: m, normalized: true }
    }

    fn pref(v: &[f64]) -> UserPreference {
        // query enters through domain A: combined = full + domain_a
        UserPreference {
            full: v.to_vec(),
            domain_a: vec![0.0; v.len()],
            domain_b: vec![0.0; v.len()],
        }
    }

    #[test]
    fn knn_ranks_by_inner_product() {
        let index = index_from_rows(&[
            (0, vec![1.0, 0.0]),
            (1, vec![0.6, 0.8]),
            (2, vec![0.0, 1.0]),
        ]);
        // products against [1, 0]: 1.0, 0.6, 0.0
        let got = knn_retrieve(&pref(&[1.0, 0.0]), &index, DomainId::A, 2).unwrap();
        assert_eq!(got, vec![0, 1]);
        // k >= n returns everyone, sorted
        let got = knn_retrieve(&pref(&[1.0, 0.0]), &index, DomainId::A, 10).unwrap();
        assert_eq!(got, vec![0, 1, 2]);
        // query equal to a stored row puts that user first
        let got = knn_retrieve(&pref(&[0.6, 0.8]), &index, DomainId::A, 1).unwrap();
        assert_eq!(got, vec![1]);
    }

    #[test]
    fn retrieval_is_scale_invariant_and_deterministic() {
        let index = index_from_rows(&[
            (0, vec![1.0, 0.2]),
            (1, vec![-0.3, 0.9]),
            (2, vec![0.5, 0.5]),
        ]);
        let a = knn_retrieve(&pref(&[0.4, 0.3]), &index, DomainId::A, 3).unwrap();
        let b = knn_retrieve(&pref(&[40.0, 30.0]), &index, DomainId::A, 3).unwrap();
        assert_eq!(a, b, "positive scaling of the raw query must not matter");
        let c = knn_retrieve(&pref(&[0.4, 0.3]), &index, DomainId::A, 3).unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn knn_matches_brute_force_for_all_k() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let n = 200;
        let dimension = 8;
        let rows: Vec<(u32, Vec<f64>)> = (0..n)
            .map(|u| (u as u32, (0..dimension).map(|_| rng.random_range(-1.0..1.0)).collect()))
            .collect();
        let index = index_from_rows(&rows);
        for _ in 0..25 {
            let raw: Vec<f64> = (0..dimension).map(|_| rng.random_range(-1.0..1.0)).collect();
            let q = normalize(&raw);
            for k in [1usize, 2, 5, 20] {
                let got = knn_retrieve(&pref(&raw), &index, DomainId::A, k).unwrap();
                // brute force oracle over the normalized rows
                let mut scored: Vec<(f64, u32)> = (0..n)
                    .map(|i| (dot(index.domain_a.row(i), &q), i as u32))
                    .collect();
                scored.sort_by(|a, b| {
                    b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1))
                });
                let expect: Vec<u32> = scored.iter().take(k).map(|(_, u)| *u).collect();
                assert_eq!(got, expect);
            }
        }
    }

    #[test]
    fn empty_index_is_an_error() {
        let index = UserEmbeddingIndex {
            user_ids: vec![],
            domain_a: Mat::zeros(0, 2),
            domain_b: Mat::zeros(0, 2),
            normalized: true,
        };
        assert!(matches!(
            knn_retrieve(&pref(&[1.0, 0.0]), &index, DomainId::A, 1),
            Err(RetrievalError::EmptyIndex)
        ));
    }

    #[test]
    fn training_neighbors_excludes_self() {
        let index = index_from_rows(&[(0, vec![1.0, 0.0]), (1, vec![0.9, 0.1])]);
        let n = training_neighbors(&index, DomainId::A).unwrap();
        assert_eq!(n[&0], 1);
        assert_eq!(n[&1], 0);

        let single = index_from_rows(&[(0, vec![1.0, 0.0])]);
        assert!(matches!(training_neighbors(&single, DomainId::A), Err(RetrievalError::SingleUser)));
    }

    #[test]
    fn training_neighbors_match_rank2_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let rows: Vec<(u32, Vec<f64>)> = (0..50)
            .map(|u| (u as u32, (0..6).map(|_| rng.random_range(-1.0..1.0)).collect()))
            .collect();
        let index = index_from_rows(&rows);
        let neighbors = training_neighbors(&index, DomainId::B).unwrap();
        for (i, &uid) in index.user_ids.iter().enumerate() {
            // oracle: full ranking including self; self must be rank 1,
            // the reported neighbor rank 2
            let q = index.domain_b.row(i).to_vec();
            let mut scored: Vec<(f64, u32)> = (0..index.len())
                .map(|j| (dot(index.domain_b.row(j), &q), index.user_ids[j]))
                .collect();
            scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            assert_eq!(scored[0].1, uid, "self is always the top hit");
            assert_eq!(neighbors[&uid], scored[1].1);
            assert_ne!(neighbors[&uid], uid);
        }
    }

    #[test]
    fn built_index_rows_are_unit_norm() {
        use crate::model::tests::tiny_setup;
        let (_, bundle, model) = tiny_setup();
        let norm = model.normalize_graphs(&bundle).unwrap();
        let reps = model.item_representations(&norm);
        let users = vec![
            UserSequence { user_id: 0, events: vec![0, 3, 1] },
            UserSequence { user_id: 1, events: vec![2, 5] },
        ];
        let index = build_index(&users, &model, &reps).unwrap();
        assert!(index.normalized());
        for domain in [DomainId::A, DomainId::B] {
            for i in 0..index.len() {
                let n = l2_norm(index.rows(domain).row(i));
                assert!((n - 1.0).abs() <= 1e-9, "row norm {n}");
            }
        }
        // single-user index: that user is its own nearest neighbor
        let solo = build_index(&users[..1], &model, &reps).unwrap();
        let pref = model.encode_user(&users[0].events, &reps).unwrap();
        let got = knn_retrieve(&pref, &solo, DomainId::A, 1).unwrap();
        assert_eq!(got, vec![0]);
    }
}
