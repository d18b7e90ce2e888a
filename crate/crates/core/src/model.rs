//! Trainable state and forward passes: graph-propagated item
//! representations feeding three causal self-attention encoders (full
//! sequence, domain A, domain B) plus per-domain discriminator heads.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{NodeId, ParamId, Params, Tape};
use crate::dataset::DomainId;
use crate::gnn::{ItemRepresentations, Projection};
use crate::graphs::{GraphBundle, GraphError, SparseGraph};
use crate::linalg::{add_vecs, argsort_desc, dot, Mat};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("cannot encode an empty sequence")]
    EmptySequence,
    #[error("target item {0} outside the catalog")]
    TargetOutOfCatalog(u32),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Model geometry. `d_item` and `d_attr` size the graph embeddings; the
/// encoders project the `2 * d_item` item representations down to `width`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelDims {
    pub d_attr: usize,
    pub d_item: usize,
    pub width: usize,
    pub heads: usize,
    pub blocks: usize,
    pub max_len: usize,
    /// Graph propagation depth.
    pub layers: usize,
    /// Whether the attribute-to-item projections carry a bias term.
    pub proj_bias: bool,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims {
            d_attr: 32,
            d_item: 128,
            width: 64,
            heads: 2,
            blocks: 1,
            max_len: 50,
            layers: 2,
            proj_bias: true,
        }
    }
}

/// Catalog shape the model was built for.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CatalogSizes {
    pub n_items: usize,
    pub boundary: usize,
    pub n_attrs: usize,
}

#[derive(Clone, Debug)]
pub struct BlockParams {
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub ff1_w: ParamId,
    pub ff1_b: ParamId,
    pub ff2_w: ParamId,
    pub ff2_b: ParamId,
}

#[derive(Clone, Debug)]
pub struct EncoderParams {
    pub token_w: ParamId,
    pub token_b: ParamId,
    pub pos: ParamId,
    /// Learned output for an empty domain view.
    pub null: ParamId,
    pub blocks: Vec<BlockParams>,
}

#[derive(Clone, Debug)]
pub struct ModelHandles {
    pub embed_attr: ParamId,
    pub embed_full: ParamId,
    pub embed_a: ParamId,
    pub embed_b: ParamId,
    pub proj_full_w: ParamId,
    pub proj_full_b: ParamId,
    pub proj_a_w: ParamId,
    pub proj_a_b: ParamId,
    pub proj_b_w: ParamId,
    pub proj_b_b: ParamId,
    pub enc_full: EncoderParams,
    pub enc_a: EncoderParams,
    pub enc_b: EncoderParams,
    pub disc_a_w: ParamId,
    pub disc_a_b: ParamId,
    pub disc_b_w: ParamId,
    pub disc_b_b: ParamId,
}

/// All trainable state plus the geometry needed to rebuild it.
#[derive(Clone, Debug)]
pub struct ModelState {
    pub dims: ModelDims,
    pub sizes: CatalogSizes,
    pub seed: u64,
    pub epoch: u64,
    /// Hyperparameters of the run that produced these weights, if any.
    pub hyper: Option<crate::train::TrainConfig>,
    pub params: Params,
    pub handles: ModelHandles,
}

/// Registers every parameter in canonical order, pulling each initial
/// value from `init`. Both fresh initialization and checkpoint loading go
/// through this single layout.
fn build_layout(
    dims: &ModelDims,
    sizes: &CatalogSizes,
    init: &mut dyn FnMut(&str, usize, usize) -> Mat,
) -> (Params, ModelHandles) {
    assert!(dims.width.is_multiple_of(dims.heads), "width must divide evenly into heads");
    let mut params = Params::new();
    fn reg(
        p: &mut Params,
        init: &mut dyn FnMut(&str, usize, usize) -> Mat,
        name: &str,
        rows: usize,
        cols: usize,
    ) -> ParamId {
        let value = init(name, rows, cols);
        assert_eq!(value.shape(), (rows, cols), "init returned wrong shape for {name}");
        p.register(name, value)
    }

    let n_a = sizes.boundary;
    let n_b = sizes.n_items - sizes.boundary;
    let embed_attr = reg(&mut params, init, "embed_attr", sizes.n_items + sizes.n_attrs, dims.d_attr);
    let embed_full = reg(&mut params, init, "embed_full", sizes.n_items, dims.d_item);
    let embed_a = reg(&mut params, init, "embed_a", n_a, dims.d_item);
    let embed_b = reg(&mut params, init, "embed_b", n_b, dims.d_item);

    let proj_full_w = reg(&mut params, init, "proj_full.w", dims.d_attr, dims.d_item);
    let proj_full_b = reg(&mut params, init, "proj_full.b", 1, dims.d_item);
    let proj_a_w = reg(&mut params, init, "proj_a.w", dims.d_attr, dims.d_item);
    let proj_a_b = reg(&mut params, init, "proj_a.b", 1, dims.d_item);
    let proj_b_w = reg(&mut params, init, "proj_b.w", dims.d_attr, dims.d_item);
    let proj_b_b = reg(&mut params, init, "proj_b.b", 1, dims.d_item);

    fn encoder(
        params: &mut Params,
        init: &mut dyn FnMut(&str, usize, usize) -> Mat,
        dims: &ModelDims,
        prefix: &str,
    ) -> EncoderParams {
        let token_w = reg(params, init, &format!("{prefix}.token.w"), 2 * dims.d_item, dims.width);
        let token_b = reg(params, init, &format!("{prefix}.token.b"), 1, dims.width);
        let pos = reg(params, init, &format!("{prefix}.pos"), dims.max_len, dims.width);
        let null = reg(params, init, &format!("{prefix}.null"), 1, dims.width);
        let mut blocks = Vec::with_capacity(dims.blocks);
        for b in 0..dims.blocks {
            let p = format!("{prefix}.block{b}");
            blocks.push(BlockParams {
                wq: reg(params, init, &format!("{p}.wq"), dims.width, dims.width),
                bq: reg(params, init, &format!("{p}.bq"), 1, dims.width),
                wk: reg(params, init, &format!("{p}.wk"), dims.width, dims.width),
                bk: reg(params, init, &format!("{p}.bk"), 1, dims.width),
                wv: reg(params, init, &format!("{p}.wv"), dims.width, dims.width),
                bv: reg(params, init, &format!("{p}.bv"), 1, dims.width),
                wo: reg(params, init, &format!("{p}.wo"), dims.width, dims.width),
                bo: reg(params, init, &format!("{p}.bo"), 1, dims.width),
                ff1_w: reg(params, init, &format!("{p}.ff1.w"), dims.width, dims.width),
                ff1_b: reg(params, init, &format!("{p}.ff1.b"), 1, dims.width),
                ff2_w: reg(params, init, &format!("{p}.ff2.w"), dims.width, dims.width),
                ff2_b: reg(params, init, &format!("{p}.ff2.b"), 1, dims.width),
            });
        }
        EncoderParams { token_w, token_b, pos, null, blocks }
    }

    let enc_full = encoder(&mut params, init, dims, "enc_full");
    let enc_a = encoder(&mut params, init, dims, "enc_a");
    let enc_b = encoder(&mut params, init, dims, "enc_b");

    let disc_a_w = reg(&mut params, init, "disc_a.w", n_a, dims.width);
    let disc_a_b = reg(&mut params, init, "disc_a.b", 1, n_a);
    let disc_b_w = reg(&mut params, init, "disc_b.w", n_b, dims.width);
    let disc_b_b = reg(&mut params, init, "disc_b.b", 1, n_b);

    let handles = ModelHandles {
        embed_attr,
        embed_full,
        embed_a,
        embed_b,
        proj_full_w,
        proj_full_b,
        proj_a_w,
        proj_a_b,
        proj_b_w,
        proj_b_b,
        enc_full,
        enc_a,
        enc_b,
        disc_a_w,
        disc_a_b,
        disc_b_w,
        disc_b_b,
    };
    (params, handles)
}

impl ModelState {
    /// Fresh model with embeddings drawn uniformly from
    /// `[-1/sqrt(dim), 1/sqrt(dim)]`, weight matrices from the same rule
    /// on their fan-in, and zero biases. Deterministic per seed.
    pub fn init(sizes: CatalogSizes, dims: ModelDims, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = |name: &str, rows: usize, cols: usize| -> Mat {
            let is_bias = name.ends_with(".b")
                || name.ends_with(".bq")
                || name.ends_with(".bk")
                || name.ends_with(".bv")
                || name.ends_with(".bo")
                || name.ends_with(".ff1.b")
                || name.ends_with(".ff2.b")
                || name.ends_with(".token.b");
            if is_bias {
                Mat::zeros(rows, cols)
            } else if name.starts_with("embed")
                || name.starts_with("disc")
                || name.ends_with(".pos")
                || name.ends_with(".null")
            {
                // row-indexed tables scale with their embedding width
                Mat::uniform(rows, cols, 1.0 / (cols as f64).sqrt(), &mut rng)
            } else {
                // weight matrices scale with their fan-in
                Mat::uniform(rows, cols, 1.0 / (rows as f64).sqrt(), &mut rng)
            }
        };
        let (params, handles) = build_layout(&dims, &sizes, &mut init);
        ModelState { dims, sizes, seed, epoch: 0, hyper: None, params, handles }
    }

    /// Rebuilds a model from named tables (checkpoint loading).
    pub fn from_tables(
        sizes: CatalogSizes,
        dims: ModelDims,
        seed: u64,
        epoch: u64,
        mut tables: std::collections::BTreeMap<String, Mat>,
    ) -> Result<Self, String> {
        let mut problems = Vec::new();
        let mut init = |name: &str, rows: usize, cols: usize| -> Mat {
            match tables.remove(name) {
                Some(m) if m.shape() == (rows, cols) => m,
                Some(m) => {
                    problems.push(format!(
                        "{name}: expected {rows}x{cols}, found {}x{}",
                        m.rows(),
                        m.cols()
                    ));
                    Mat::zeros(rows, cols)
                }
                None => {
                    problems.push(format!("{name}: missing"));
                    Mat::zeros(rows, cols)
                }
            }
        };
        let (params, handles) = build_layout(&dims, &sizes, &mut init);
        if !problems.is_empty() {
            return Err(format!("checkpoint tables do not match layout: {}", problems.join("; ")));
        }
        if !tables.is_empty() {
            let extra: Vec<_> = tables.keys().cloned().collect();
            return Err(format!("checkpoint has unexpected tables: {}", extra.join(", ")));
        }
        Ok(ModelState { dims, sizes, seed, epoch, hyper: None, params, handles })
    }

    pub fn projection_full(&self) -> Projection {
        self.projection(self.handles.proj_full_w, self.handles.proj_full_b)
    }

    pub fn projection_a(&self) -> Projection {
        self.projection(self.handles.proj_a_w, self.handles.proj_a_b)
    }

    pub fn projection_b(&self) -> Projection {
        self.projection(self.handles.proj_b_w, self.handles.proj_b_b)
    }

    fn projection(&self, w: ParamId, b: ParamId) -> Projection {
        let bias = if self.dims.proj_bias {
            self.params.value(b).clone()
        } else {
            Mat::zeros(1, self.dims.d_item)
        };
        Projection { weight: self.params.value(w).clone(), bias }
    }

    /// Row-normalized graphs wrapped for repeated tape use.
    pub fn normalize_graphs(&self, bundle: &GraphBundle) -> Result<NormalizedGraphs, GraphError> {
        let n = bundle.normalized()?;
        Ok(NormalizedGraphs {
            attr: Rc::new(n.attr),
            full: Rc::new(n.full),
            domain_a: Rc::new(n.domain_a),
            domain_b: Rc::new(n.domain_b),
        })
    }

    /// Item representations for inference (forward only).
    pub fn item_representations(&self, norm: &NormalizedGraphs) -> ItemRepresentations {
        let mut tape = Tape::new();
        let leafs = self.params.park_all(&mut tape);
        let reps = reps_on_tape(&mut tape, self, &leafs, norm);
        ItemRepresentations {
            full: tape.value(reps.full).clone(),
            domain_a: tape.value(reps.domain_a).clone(),
            domain_b: tape.value(reps.domain_b).clone(),
        }
    }

    /// Encodes one user's history into the three preference vectors. The
    /// sequence is truncated to the trailing `max_len` events and the
    /// domain views are derived from the truncated window; an empty view
    /// yields that encoder's learned null vector.
    pub fn encode_user(
        &self,
        events: &[u32],
        reps: &ItemRepresentations,
    ) -> Result<UserPreference, ModelError> {
        if events.is_empty() {
            return Err(ModelError::EmptySequence);
        }
        let window = truncate(events, self.dims.max_len);
        let boundary = self.sizes.boundary;

        let mut tape = Tape::new();
        let leafs = self.params.park_all(&mut tape);

        let rows_full: Vec<usize> = window.iter().map(|&id| id as usize).collect();
        let tok_full = tape.constant(reps.full.gather_rows(&rows_full));
        let h_full =
            encode_tokens_on_tape(&mut tape, &self.handles.enc_full, &leafs, tok_full, self.dims.heads);

        let rows_a: Vec<usize> = window
            .iter()
            .filter(|&&id| (id as usize) < boundary)
            .map(|&id| id as usize)
            .collect();
        let h_a = if rows_a.is_empty() {
            leafs[self.handles.enc_a.null.0]
        } else {
            let tok = tape.constant(reps.domain_a.gather_rows(&rows_a));
            encode_tokens_on_tape(&mut tape, &self.handles.enc_a, &leafs, tok, self.dims.heads)
        };

        let rows_b: Vec<usize> = window
            .iter()
            .filter(|&&id| (id as usize) >= boundary)
            .map(|&id| id as usize - boundary)
            .collect();
        let h_b = if rows_b.is_empty() {
            leafs[self.handles.enc_b.null.0]
        } else {
            let tok = tape.constant(reps.domain_b.gather_rows(&rows_b));
            encode_tokens_on_tape(&mut tape, &self.handles.enc_b, &leafs, tok, self.dims.heads)
        };

        Ok(UserPreference {
            full: tape.value(h_full).row(0).to_vec(),
            domain_a: tape.value(h_a).row(0).to_vec(),
            domain_b: tape.value(h_b).row(0).to_vec(),
        })
    }

    /// Discriminator logits for one domain given a combined preference
    /// vector (`h_full + h_domain`).
    pub fn domain_logits(&self, combined: &[f64], domain: DomainId) -> Vec<f64> {
        let (w, b) = match domain {
            DomainId::A => (self.handles.disc_a_w, self.handles.disc_a_b),
            DomainId::B => (self.handles.disc_b_w, self.handles.disc_b_b),
        };
        let w = self.params.value(w);
        let b = self.params.value(b);
        (0..w.rows()).map(|i| dot(w.row(i), combined) + b.get(0, i)).collect()
    }

    /// Every item of the target domain ranked by descending discriminator
    /// score, ties broken by ascending id; returns global item ids.
    pub fn score_items(&self, pref: &UserPreference, domain: DomainId) -> Vec<u32> {
        let combined = pref.combined(domain);
        let scores = self.domain_logits(&combined, domain);
        let offset = match domain {
            DomainId::A => 0,
            DomainId::B => self.sizes.boundary,
        };
        argsort_desc(&scores).into_iter().map(|i| (i + offset) as u32).collect()
    }
}

/// Last-position outputs of the three encoders.
#[derive(Clone, Debug, PartialEq)]
pub struct UserPreference {
    pub full: Vec<f64>,
    pub domain_a: Vec<f64>,
    pub domain_b: Vec<f64>,
}

impl UserPreference {
    pub fn combined(&self, domain: DomainId) -> Vec<f64> {
        match domain {
            DomainId::A => add_vecs(&self.full, &self.domain_a),
            DomainId::B => add_vecs(&self.full, &self.domain_b),
        }
    }
}

/// Row-normalized graphs shared across tapes.
#[derive(Clone)]
pub struct NormalizedGraphs {
    pub attr: Rc<SparseGraph>,
    pub full: Rc<SparseGraph>,
    pub domain_a: Rc<SparseGraph>,
    pub domain_b: Rc<SparseGraph>,
}

/// Tape nodes for the item representations and the intermediates the
/// alignment loss needs.
pub struct RepNodes {
    pub full: NodeId,
    pub domain_a: NodeId,
    pub domain_b: NodeId,
    /// Projected attribute rows over domain-A items, aligned with `a_hat`.
    pub proj_attr_a: NodeId,
    pub proj_attr_b: NodeId,
    pub a_hat: NodeId,
    pub b_hat: NodeId,
}

/// Propagate + aggregate on the tape: `(1/l) * sum E^i + E^0`.
fn encode_graph_on_tape(tape: &mut Tape, graph: Rc<SparseGraph>, e0: NodeId, layers: usize) -> NodeId {
    assert!(layers >= 1);
    let mut cur = tape.spmm(graph.clone(), e0);
    let mut acc = cur;
    for _ in 1..layers {
        cur = tape.spmm(graph.clone(), cur);
        acc = tape.add(acc, cur);
    }
    let scaled = tape.scale(acc, 1.0 / layers as f64);
    tape.add(scaled, e0)
}

fn project_on_tape(tape: &mut Tape, x: NodeId, w: NodeId, b: NodeId, with_bias: bool) -> NodeId {
    let p = tape.matmul(x, w);
    if with_bias {
        tape.add_row(p, b)
    } else {
        p
    }
}

/// Builds the full set of item-representation nodes from parked parameter
/// leafs. The training path gathers user rows from these nodes so
/// gradients flow back into the embedding tables.
pub fn reps_on_tape(
    tape: &mut Tape,
    model: &ModelState,
    leafs: &[NodeId],
    norm: &NormalizedGraphs,
) -> RepNodes {
    let h = &model.handles;
    let dims = &model.dims;
    let n_items = model.sizes.n_items;
    let boundary = model.sizes.boundary;

    let attr_hat = encode_graph_on_tape(tape, norm.attr.clone(), leafs[h.embed_attr.0], dims.layers);
    let full_hat = encode_graph_on_tape(tape, norm.full.clone(), leafs[h.embed_full.0], dims.layers);
    let a_hat = encode_graph_on_tape(tape, norm.domain_a.clone(), leafs[h.embed_a.0], dims.layers);
    let b_hat = encode_graph_on_tape(tape, norm.domain_b.clone(), leafs[h.embed_b.0], dims.layers);

    let item_rows: Vec<usize> = (0..n_items).collect();
    let attr_items = tape.gather_rows(attr_hat, &item_rows);
    let proj_full =
        project_on_tape(tape, attr_items, leafs[h.proj_full_w.0], leafs[h.proj_full_b.0], dims.proj_bias);
    let full = tape.concat_cols(proj_full, full_hat);

    let rows_a: Vec<usize> = (0..boundary).collect();
    let attr_a = tape.gather_rows(attr_hat, &rows_a);
    let proj_attr_a =
        project_on_tape(tape, attr_a, leafs[h.proj_a_w.0], leafs[h.proj_a_b.0], dims.proj_bias);
    let domain_a = tape.concat_cols(proj_attr_a, a_hat);

    let rows_b: Vec<usize> = (boundary..n_items).collect();
    let attr_b = tape.gather_rows(attr_hat, &rows_b);
    let proj_attr_b =
        project_on_tape(tape, attr_b, leafs[h.proj_b_w.0], leafs[h.proj_b_b.0], dims.proj_bias);
    let domain_b = tape.concat_cols(proj_attr_b, b_hat);

    RepNodes { full, domain_a, domain_b, proj_attr_a, proj_attr_b, a_hat, b_hat }
}

/// Strictly-upper-triangular -inf mask so position `t` attends to `<= t`.
fn causal_mask(len: usize) -> Mat {
    let mut m = Mat::zeros(len, len);
    for r in 0..len {
        for c in (r + 1)..len {
            m.set(r, c, f64::NEG_INFINITY);
        }
    }
    m
}

/// One block stack over projected tokens; returns all positions.
fn block_stack_on_tape(
    tape: &mut Tape,
    enc: &EncoderParams,
    leafs: &[NodeId],
    tokens: NodeId,
    heads: usize,
) -> NodeId {
    let k = tape.value(tokens).rows();
    assert!(k >= 1, "encoder needs at least one token");
    let projected = tape.matmul(tokens, leafs[enc.token_w.0]);
    let projected = tape.add_row(projected, leafs[enc.token_b.0]);
    let pos_rows: Vec<usize> = (0..k).collect();
    let pos = tape.gather_rows(leafs[enc.pos.0], &pos_rows);
    let mut x = tape.add(projected, pos);

    let width = tape.value(x).cols();
    let head_dim = width / heads;
    let mask = tape.constant(causal_mask(k));

    for block in &enc.blocks {
        let q = tape.matmul(x, leafs[block.wq.0]);
        let q = tape.add_row(q, leafs[block.bq.0]);
        let kk = tape.matmul(x, leafs[block.wk.0]);
        let kk = tape.add_row(kk, leafs[block.bk.0]);
        let v = tape.matmul(x, leafs[block.wv.0]);
        let v = tape.add_row(v, leafs[block.bv.0]);

        let mut merged: Option<NodeId> = None;
        for hd in 0..heads {
            let qh = tape.slice_cols(q, hd * head_dim, head_dim);
            let kh = tape.slice_cols(kk, hd * head_dim, head_dim);
            let vh = tape.slice_cols(v, hd * head_dim, head_dim);
            let kt = tape.transpose(kh);
            let scores = tape.matmul(qh, kt);
            let scaled = tape.scale(scores, 1.0 / (head_dim as f64).sqrt());
            let masked = tape.add(scaled, mask);
            let attn = tape.softmax_rows(masked);
            let out = tape.matmul(attn, vh);
            merged = Some(match merged {
                None => out,
                Some(m) => tape.concat_cols(m, out),
            });
        }
        let merged = merged.expect("at least one head");
        let attn_out = tape.matmul(merged, leafs[block.wo.0]);
        let attn_out = tape.add_row(attn_out, leafs[block.bo.0]);
        x = tape.add(x, attn_out);

        let f = tape.matmul(x, leafs[block.ff1_w.0]);
        let f = tape.add_row(f, leafs[block.ff1_b.0]);
        let f = tape.relu(f);
        let f = tape.matmul(f, leafs[block.ff2_w.0]);
        let f = tape.add_row(f, leafs[block.ff2_b.0]);
        x = tape.add(x, f);
    }
    x
}

/// Single causal encoder over pre-gathered token representations
/// (`tokens` is `(k, 2 * d_item)`); returns the final-position output as a
/// `(1, width)` node. The caller guarantees `k <= max_len`.
pub fn encode_tokens_on_tape(
    tape: &mut Tape,
    enc: &EncoderParams,
    leafs: &[NodeId],
    tokens: NodeId,
    heads: usize,
) -> NodeId {
    let k = tape.value(tokens).rows();
    let x = block_stack_on_tape(tape, enc, leafs, tokens, heads);
    tape.gather_rows(x, &[k - 1])
}

/// Full per-position encoder output for a row-index sequence; used by
/// tests and diagnostics rather than the training path.
pub fn encode_positions(model: &ModelState, enc: &EncoderParams, reps: &Mat, rows: &[usize]) -> Mat {
    assert!(!rows.is_empty());
    let mut tape = Tape::new();
    let leafs = model.params.park_all(&mut tape);
    let tokens = tape.constant(reps.gather_rows(rows));
    let x = block_stack_on_tape(&mut tape, enc, &leafs, tokens, model.dims.heads);
    tape.value(x).clone()
}

/// Keeps the trailing `max_len` events.
pub fn truncate(events: &[u32], max_len: usize) -> Vec<u32> {
    if events.len() > max_len {
        events[events.len() - max_len..].to_vec()
    } else {
        events.to_vec()
    }
}

/// Draws `n` values uniform in `[0, 1)`.
pub fn uniform01<R: Rng>(n: usize, rng: &mut R) -> Vec<f64> {
    use rand::RngExt;
    (0..n).map(|_| rng.random::<f64>()).collect()
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::dataset::{test_catalog, DomainId};
    use crate::graphs::build_bundle;
    use crate::UserSequence;

    pub(crate) fn tiny_setup() -> (crate::dataset::Catalog, GraphBundle, ModelState) {
        let catalog = test_catalog(&[
            (0, DomainId::A, "a zero", &["p"]),
            (1, DomainId::A, "a one", &["p", "q"]),
            (2, DomainId::A, "a two", &[]),
            (3, DomainId::B, "b zero", &["q"]),
            (4, DomainId::B, "b one", &[]),
            (5, DomainId::B, "b two", &["p"]),
        ]);
        let seqs = vec![
            UserSequence { user_id: 0, events: vec![0, 3, 1, 4] },
            UserSequence { user_id: 1, events: vec![2, 5, 0] },
            UserSequence { user_id: 2, events: vec![1, 1, 3] },
        ];
        let bundle = build_bundle(&seqs, &catalog, false).unwrap();
        let dims = ModelDims {
            d_attr: 2,
            d_item: 3,
            width: 4,
            heads: 2,
            blocks: 1,
            max_len: 6,
            layers: 2,
            proj_bias: true,
        };
        let sizes = CatalogSizes {
            n_items: catalog.n_items(),
            boundary: catalog.boundary(),
            n_attrs: catalog.attribute_vocab().len(),
        };
        let model = ModelState::init(sizes, dims, 42);
        (catalog, bundle, model)
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let (_, _, m1) = tiny_setup();
        let (_, _, m2) = tiny_setup();
        for id in m1.params.ids() {
            assert_eq!(m1.params.value(id), m2.params.value(id));
        }
    }

    #[test]
    fn tape_reps_match_plain_composition() {
        let (_, bundle, model) = tiny_setup();
        let norm = model.normalize_graphs(&bundle).unwrap();
        let reps = model.item_representations(&norm);

        let attr_hat =
            crate::gnn::encode_graph(&norm.attr, model.params.value(model.handles.embed_attr), 2).unwrap();
        let full_hat =
            crate::gnn::encode_graph(&norm.full, model.params.value(model.handles.embed_full), 2).unwrap();
        let a_hat =
            crate::gnn::encode_graph(&norm.domain_a, model.params.value(model.handles.embed_a), 2).unwrap();
        let b_hat =
            crate::gnn::encode_graph(&norm.domain_b, model.params.value(model.handles.embed_b), 2).unwrap();
        let plain = crate::gnn::concat_representations(
            &attr_hat,
            &full_hat,
            &a_hat,
            &b_hat,
            &model.projection_full(),
            &model.projection_a(),
            &model.projection_b(),
            model.sizes.boundary,
        );
        assert!(reps.full.max_abs_diff(&plain.full) < 1e-12);
        assert!(reps.domain_a.max_abs_diff(&plain.domain_a) < 1e-12);
        assert!(reps.domain_b.max_abs_diff(&plain.domain_b) < 1e-12);
    }

    #[test]
    fn causal_mask_makes_prefix_outputs_exact() {
        let (_, bundle, model) = tiny_setup();
        let norm = model.normalize_graphs(&bundle).unwrap();
        let reps = model.item_representations(&norm);
        let rows = vec![0usize, 3, 1, 4, 2];
        let out = encode_positions(&model, &model.handles.enc_full, &reps.full, &rows);
        // permute the tail after position 1; outputs at 0 and 1 unchanged
        let permuted = vec![0usize, 3, 2, 4, 1];
        let out2 = encode_positions(&model, &model.handles.enc_full, &reps.full, &permuted);
        for t in 0..2 {
            assert_eq!(out.row(t), out2.row(t), "position {t} must not see the future");
        }
        assert_ne!(out.row(4), out2.row(4));
    }

    #[test]
    fn single_event_sequence_uses_position_zero_only() {
        let (_, bundle, model) = tiny_setup();
        let norm = model.normalize_graphs(&bundle).unwrap();
        let reps = model.item_representations(&norm);
        let solo = encode_positions(&model, &model.handles.enc_full, &reps.full, &[2]);
        let longer = encode_positions(&model, &model.handles.enc_full, &reps.full, &[2, 4, 0]);
        assert_eq!(solo.row(0), longer.row(0));
    }

    #[test]
    fn empty_domain_view_returns_null_vector() {
        let (_, bundle, model) = tiny_setup();
        let norm = model.normalize_graphs(&bundle).unwrap();
        let reps = model.item_representations(&norm);
        // all events in domain A: the B view is empty
        let pref = model.encode_user(&[0, 1, 2], &reps).unwrap();
        let null_b = model.params.value(model.handles.enc_b.null);
        assert_eq!(pref.domain_b, null_b.row(0).to_vec());
    }

    #[test]
    fn encode_user_rejects_empty_sequence() {
        let (_, bundle, model) = tiny_setup();
        let norm = model.normalize_graphs(&bundle).unwrap();
        let reps = model.item_representations(&norm);
        assert!(matches!(model.encode_user(&[], &reps), Err(ModelError::EmptySequence)));
    }

    #[test]
    fn encode_user_truncates_to_max_len() {
        let (_, bundle, model) = tiny_setup();
        let norm = model.normalize_graphs(&bundle).unwrap();
        let reps = model.item_representations(&norm);
        // max_len = 6, so a length-8 history equals its trailing window
        let long = model.encode_user(&[0, 1, 2, 3, 4, 5, 0, 1], &reps).unwrap();
        let window = model.encode_user(&[2, 3, 4, 5, 0, 1], &reps).unwrap();
        assert_eq!(long, window);
    }

    #[test]
    fn score_items_orders_and_breaks_ties() {
        let (_, bundle, model) = tiny_setup();
        let norm = model.normalize_graphs(&bundle).unwrap();
        let reps = model.item_representations(&norm);
        let pref = model.encode_user(&[0, 3], &reps).unwrap();
        let ranked_a = model.score_items(&pref, DomainId::A);
        assert_eq!(ranked_a.len(), 3);
        let combined = pref.combined(DomainId::A);
        let scores = model.domain_logits(&combined, DomainId::A);
        for w in ranked_a.windows(2) {
            let (s0, s1) = (scores[w[0] as usize], scores[w[1] as usize]);
            assert!(s0 > s1 || (s0 == s1 && w[0] < w[1]));
        }
        let ranked_b = model.score_items(&pref, DomainId::B);
        assert!(ranked_b.iter().all(|&id| (3..6).contains(&id)));
    }

    #[test]
    fn ranking_is_invariant_under_positive_affine_transforms() {
        let scores = vec![0.4, -1.0, 0.4, 2.2, 0.0];
        let base = argsort_desc(&scores);
        for (a, b) in [(2.0, 0.0), (0.5, 3.0), (10.0, -7.0)] {
            let t: Vec<f64> = scores.iter().map(|s| a * s + b).collect();
            assert_eq!(argsort_desc(&t), base);
        }
    }

    #[test]
    fn encode_is_deterministic() {
        let (_, bundle, model) = tiny_setup();
        let norm = model.normalize_graphs(&bundle).unwrap();
        let reps = model.item_representations(&norm);
        let p1 = model.encode_user(&[0, 3, 1], &reps).unwrap();
        let p2 = model.encode_user(&[0, 3, 1], &reps).unwrap();
        assert_eq!(p1, p2);
    }
}
