//! Parameter-free propagation over the four graphs, cross-layer
//! aggregation, attribute-to-domain alignment, and the concatenated item
//! representations consumed by the sequence encoders.
//!
//! The functions here are the plain (tape-free) reference path; training
//! rebuilds the same composition on the autodiff tape and a test pins the
//! two together.

use thiserror::Error;

use crate::graphs::SparseGraph;
use crate::linalg::Mat;

#[derive(Debug, Error)]
pub enum GnnError {
    #[error("shape mismatch: graph is {g_rows}x{g_cols}, embeddings are {e_rows}x{e_cols}")]
    ShapeMismatch { g_rows: usize, g_cols: usize, e_rows: usize, e_cols: usize },
    #[error("aggregate needs at least one propagated layer")]
    NoLayers,
    #[error("item id {id} outside domain range")]
    IdOutOfDomain { id: u32 },
}

/// `layers` successive applications of the row-normalized adjacency:
/// `E^i = Norm(A) * E^{i-1}`. No nonlinearity, no per-layer parameters.
pub fn propagate(graph: &SparseGraph, e0: &Mat, layers: usize) -> Result<Vec<Mat>, GnnError> {
    assert!(layers >= 1, "propagate needs at least one layer");
    if graph.n_cols() != e0.rows() || graph.n_rows() != e0.rows() {
        return Err(GnnError::ShapeMismatch {
            g_rows: graph.n_rows(),
            g_cols: graph.n_cols(),
            e_rows: e0.rows(),
            e_cols: e0.cols(),
        });
    }
    let mut out = Vec::with_capacity(layers);
    let mut cur = graph.spmm(e0);
    for _ in 1..layers {
        let next = graph.spmm(&cur);
        out.push(cur);
        cur = next;
    }
    out.push(cur);
    Ok(out)
}

/// Mean of the propagated layers plus the initial table:
/// `(1/l) * sum_i E^i + E^0`.
pub fn aggregate(e0: &Mat, layers: &[Mat]) -> Result<Mat, GnnError> {
    if layers.is_empty() {
        return Err(GnnError::NoLayers);
    }
    let mut acc = layers[0].clone();
    for layer in &layers[1..] {
        acc.add_assign(layer);
    }
    let mut out = acc.scale(1.0 / layers.len() as f64);
    out.add_assign(e0);
    Ok(out)
}

/// Propagate-then-aggregate in one call.
pub fn encode_graph(graph: &SparseGraph, e0: &Mat, layers: usize) -> Result<Mat, GnnError> {
    let props = propagate(graph, e0, layers)?;
    aggregate(e0, &props)
}

/// Affine map from attribute-embedding space to item-embedding space.
#[derive(Clone, Debug)]
pub struct Projection {
    pub weight: Mat, // (d_attr, d_item)
    pub bias: Mat,   // (1, d_item)
}

impl Projection {
    pub fn apply(&self, x: &Mat) -> Mat {
        let mut out = x.matmul(&self.weight);
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(self.bias.row(0).iter()) {
                *o += b;
            }
        }
        out
    }
}

/// Sum over batch items of the L2 distance between the projected
/// attribute-graph row and the matching domain-graph row. Domain-A items
/// index `domain_a_hat` by global id; domain-B items index `domain_b_hat`
/// by `id - boundary`.
#[allow(clippy::too_many_arguments)]
pub fn alignment_loss(
    attr_hat: &Mat,
    domain_a_hat: &Mat,
    domain_b_hat: &Mat,
    proj_a: &Projection,
    proj_b: &Projection,
    batch_a: &[u32],
    batch_b: &[u32],
    boundary: usize,
) -> Result<f64, GnnError> {
    let mut total = 0.0;
    for &id in batch_a {
        if id as usize >= boundary {
            return Err(GnnError::IdOutOfDomain { id });
        }
        let projected = proj_a.apply(&attr_hat.gather_rows(&[id as usize]));
        let diff = projected.sub(&domain_a_hat.gather_rows(&[id as usize]));
        total += crate::linalg::l2_norm(diff.row(0));
    }
    for &id in batch_b {
        let local = (id as usize).checked_sub(boundary).filter(|l| *l < domain_b_hat.rows());
        let Some(local) = local else {
            return Err(GnnError::IdOutOfDomain { id });
        };
        let projected = proj_b.apply(&attr_hat.gather_rows(&[id as usize]));
        let diff = projected.sub(&domain_b_hat.gather_rows(&[local]));
        total += crate::linalg::l2_norm(diff.row(0));
    }
    Ok(total)
}

/// Final per-item representations: the projected attribute row
/// concatenated with the matching item-graph row (width `2 * d_item`).
#[derive(Clone, Debug)]
pub struct ItemRepresentations {
    /// Row `i` is item `i` over the full catalog.
    pub full: Mat,
    /// Row `i` is domain-A item `i`.
    pub domain_a: Mat,
    /// Row `i` is domain-B item `boundary + i`.
    pub domain_b: Mat,
}

/// `full[i] = [L(attr_hat[i]) || full_hat[i]]`, and per-domain analogues
/// with their own projections. `attr_hat` has item rows first, so global
/// item ids address it directly.
#[allow(clippy::too_many_arguments)]
pub fn concat_representations(
    attr_hat: &Mat,
    full_hat: &Mat,
    domain_a_hat: &Mat,
    domain_b_hat: &Mat,
    proj_full: &Projection,
    proj_a: &Projection,
    proj_b: &Projection,
    boundary: usize,
) -> ItemRepresentations {
    let n_items = full_hat.rows();
    let item_rows: Vec<usize> = (0..n_items).collect();
    let attr_items = attr_hat.gather_rows(&item_rows);
    let full = proj_full.apply(&attr_items).concat_cols(full_hat);

    let rows_a: Vec<usize> = (0..boundary).collect();
    let domain_a = proj_a.apply(&attr_hat.gather_rows(&rows_a)).concat_cols(domain_a_hat);

    let rows_b: Vec<usize> = (boundary..n_items).collect();
    let domain_b = proj_b.apply(&attr_hat.gather_rows(&rows_b)).concat_cols(domain_b_hat);

    ItemRepresentations { full, domain_a, domain_b }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn two_node_pair() -> SparseGraph {
        // undirected pair; row-normalized it is the swap permutation
        SparseGraph::from_entries(2, 2, &[(0, 1, 1.0), (1, 0, 1.0)], false)
            .unwrap()
            .row_normalize()
            .unwrap()
    }

    #[test]
    fn propagate_swaps_identity_on_pair() {
        let g = two_node_pair();
        let e0 = Mat::identity(2);
        let layers = propagate(&g, &e0, 1).unwrap();
        assert_eq!(layers[0], Mat::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]));
        // permutation squared is the identity
        let layers = propagate(&g, &e0, 2).unwrap();
        assert_eq!(layers[1], Mat::identity(2));
    }

    #[test]
    fn propagate_zero_graph_gives_zeros() {
        let g = SparseGraph::from_entries(3, 3, &[], true).unwrap();
        let e0 = Mat::identity(3);
        let layers = propagate(&g, &e0, 2).unwrap();
        for l in layers {
            assert_eq!(l, Mat::zeros(3, 3));
        }
    }

    #[test]
    fn propagate_rejects_shape_mismatch() {
        let g = two_node_pair();
        assert!(matches!(
            propagate(&g, &Mat::zeros(3, 2), 1),
            Err(GnnError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn aggregate_examples() {
        let e0 = Mat::identity(2);
        let g = two_node_pair();
        // l = 2 on the pair: (E1 + E2)/2 + E0 = [[1.5, 0.5], [0.5, 1.5]]
        let layers = propagate(&g, &e0, 2).unwrap();
        let agg = aggregate(&e0, &layers).unwrap();
        assert_eq!(agg, Mat::from_rows(&[vec![1.5, 0.5], vec![0.5, 1.5]]));

        // self-loop graph: E1 = E0, so aggregate = 2 * E0
        let self_loop = SparseGraph::from_entries(2, 2, &[(0, 0, 1.0), (1, 1, 1.0)], true)
            .unwrap()
            .row_normalize()
            .unwrap();
        let layers = propagate(&self_loop, &e0, 1).unwrap();
        assert_eq!(aggregate(&e0, &layers).unwrap(), e0.scale(2.0));

        // zero-edge graph: aggregate = E0
        let zero = SparseGraph::from_entries(2, 2, &[], true).unwrap();
        let layers = propagate(&zero, &e0, 1).unwrap();
        assert_eq!(aggregate(&e0, &layers).unwrap(), e0);

        assert!(matches!(aggregate(&e0, &[]), Err(GnnError::NoLayers)));
    }

    #[test]
    fn propagate_matches_dense_power_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..25 {
            let n = rng.random_range(2..=10usize);
            let mut b = crate::graphs::SparseGraphBuilder::new(n, n, true);
            for _ in 0..rng.random_range(1..3 * n) {
                b.add(rng.random_range(0..n), rng.random_range(0..n), rng.random_range(0.1..2.0));
            }
            let g = b.build().unwrap().row_normalize().unwrap();
            let e0 = Mat::uniform(n, 4, 1.0, &mut rng);
            let layers = propagate(&g, &e0, 3).unwrap();
            // oracle: dense matrix powers
            let dense = g.to_dense();
            let mut expect = e0.clone();
            for layer in &layers {
                expect = dense.matmul(&expect);
                assert!(layer.max_abs_diff(&expect) <= 1e-12);
            }
        }
    }

    #[test]
    fn propagate_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let g = two_node_pair();
        let e = Mat::uniform(2, 3, 1.0, &mut rng);
        let f = Mat::uniform(2, 3, 1.0, &mut rng);
        let (alpha, beta) = (0.7, -1.3);
        let combined = e.scale(alpha).add(&f.scale(beta));
        let lhs = propagate(&g, &combined, 2).unwrap();
        let pe = propagate(&g, &e, 2).unwrap();
        let pf = propagate(&g, &f, 2).unwrap();
        for i in 0..2 {
            let rhs = pe[i].scale(alpha).add(&pf[i].scale(beta));
            assert!(lhs[i].max_abs_diff(&rhs) <= 1e-10);
        }
    }

    fn proj(weight: Vec<Vec<f64>>, bias: Vec<f64>) -> Projection {
        Projection { weight: Mat::from_rows(&weight), bias: Mat::from_vec(1, bias.len(), bias) }
    }

    #[test]
    fn alignment_loss_hand_cases() {
        // identity projection, d_attr = d_item = 2
        let p = proj(vec![vec![1.0, 0.0], vec![0.0, 1.0]], vec![0.0, 0.0]);
        let attr_hat = Mat::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]);
        let domain_a = Mat::from_rows(&[vec![0.0, 0.0], vec![0.0, 0.0]]);
        let domain_b = Mat::zeros(0, 2);
        // single item at distance 1
        let l = alignment_loss(&attr_hat, &domain_a, &domain_b, &p, &p, &[0], &[], 2).unwrap();
        assert!((l - 1.0).abs() < 1e-12);
        // perfect alignment
        let l = alignment_loss(&attr_hat, &attr_hat, &domain_b, &p, &p, &[0, 1], &[], 2).unwrap();
        assert!(l.abs() < 1e-12);
        // two items each at distance 1
        let attr2 = Mat::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let l = alignment_loss(&attr2, &domain_a, &domain_b, &p, &p, &[0, 1], &[], 2).unwrap();
        assert!((l - 2.0).abs() < 1e-12);
    }

    #[test]
    fn alignment_loss_rejects_out_of_domain_ids() {
        let p = proj(vec![vec![1.0]], vec![0.0]);
        let attr_hat = Mat::zeros(2, 1);
        let da = Mat::zeros(1, 1);
        let db = Mat::zeros(1, 1);
        assert!(matches!(
            alignment_loss(&attr_hat, &da, &db, &p, &p, &[1], &[], 1),
            Err(GnnError::IdOutOfDomain { id: 1 })
        ));
        assert!(matches!(
            alignment_loss(&attr_hat, &da, &db, &p, &p, &[], &[0], 1),
            Err(GnnError::IdOutOfDomain { id: 0 })
        ));
    }

    #[test]
    fn concat_representation_layout() {
        // d_attr = 1 -> d_item = 2 via projection [[1, 2]]
        let p = proj(vec![vec![1.0, 2.0]], vec![0.0, 0.0]);
        // 2 items + 1 attribute node
        let attr_hat = Mat::from_rows(&[vec![1.0], vec![2.0], vec![9.0]]);
        let full_hat = Mat::from_rows(&[vec![3.0, 4.0], vec![5.0, 6.0]]);
        let da_hat = Mat::from_rows(&[vec![7.0, 8.0]]);
        let db_hat = Mat::from_rows(&[vec![1.5, 2.5]]);
        let reps = concat_representations(&attr_hat, &full_hat, &da_hat, &db_hat, &p, &p, &p, 1);
        assert_eq!(reps.full.row(0), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(reps.full.row(1), &[2.0, 4.0, 5.0, 6.0]);
        assert_eq!(reps.domain_a.rows(), 1);
        assert_eq!(reps.domain_a.row(0), &[1.0, 2.0, 7.0, 8.0]);
        assert_eq!(reps.domain_b.row(0), &[2.0, 4.0, 1.5, 2.5]);
    }

    #[test]
    fn concat_of_zeros_is_zero() {
        let p = proj(vec![vec![0.0, 0.0]], vec![0.0, 0.0]);
        let reps = concat_representations(
            &Mat::zeros(2, 1),
            &Mat::zeros(2, 2),
            &Mat::zeros(1, 2),
            &Mat::zeros(1, 2),
            &p,
            &p,
            &p,
            1,
        );
        assert_eq!(reps.full, Mat::zeros(2, 4));
    }
}
