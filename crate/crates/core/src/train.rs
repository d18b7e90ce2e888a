//! Loss terms and the training loop: next-item cross-entropy per domain,
//! the contrastive term built from corrupted cross-domain sequences with
//! sign-patterned noise, and the alignment penalty, combined as
//! `L = L_t + lambda * L_ct + gamma * L_al` and optimized with Adam.

use rand::{Rng, RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{log_sum_exp, softmax, Adam, NodeId, Tape};
use crate::dataset::{DomainId, SplitDataset};
use crate::graphs::GraphBundle;
use crate::linalg::{l2_norm, Mat};
use crate::model::{
    encode_tokens_on_tape, reps_on_tape, truncate, CatalogSizes, ModelDims, ModelError,
    ModelState, NormalizedGraphs, RepNodes, UserPreference,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("loss diverged (non-finite) at epoch {epoch}, batch {batch}")]
    Diverged { epoch: usize, batch: usize },
    #[error("no trainable sequences (every train view has fewer than 2 events)")]
    NoTrainableUsers,
    #[error("domain {domain} has {items} item(s); the contrastive objective needs at least 2 (set lambda to 0 to train without it)")]
    DomainTooSmall { domain: DomainId, items: usize },
    #[error("loss component is not finite: {0}")]
    NonFiniteComponent(&'static str),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Graph(#[from] crate::graphs::GraphError),
}

/// Optimization hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    /// Weight of the contrastive term.
    pub lambda: f64,
    /// Weight of the alignment term.
    pub gamma: f64,
    /// L2 radius of the contrastive noise.
    pub epsilon: f64,
    /// Per-event corruption probability.
    pub rho: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Use the literal `1 - p` penalty on negatives instead of
    /// `-log(1 - p)`.
    pub contrastive_literal: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 0.3,
            gamma: 0.3,
            epsilon: 0.1,
            rho: 0.3,
            learning_rate: 1e-4,
            epochs: 30,
            batch_size: 32,
            seed: 7,
            contrastive_literal: false,
        }
    }
}

/// Exact weighted sum `lt + lambda * lct + gamma * lal`.
pub fn total_loss(lt: f64, lct: f64, lal: f64, cfg: &TrainConfig) -> Result<f64, TrainError> {
    for (name, v) in [("next-item", lt), ("contrastive", lct), ("alignment", lal)] {
        if !v.is_finite() {
            return Err(TrainError::NonFiniteComponent(name));
        }
    }
    Ok(lt + cfg.lambda * lct + cfg.gamma * lal)
}

/// Cross-entropy of the target item under the softmax of its domain's
/// discriminator, evaluated on `h_full + h_domain`.
pub fn next_item_loss(
    model: &ModelState,
    pref: &UserPreference,
    target: u32,
) -> Result<f64, ModelError> {
    if target as usize >= model.sizes.n_items {
        return Err(ModelError::TargetOutOfCatalog(target));
    }
    let domain = if (target as usize) < model.sizes.boundary { DomainId::A } else { DomainId::B };
    let local = match domain {
        DomainId::A => target as usize,
        DomainId::B => target as usize - model.sizes.boundary,
    };
    let logits = model.domain_logits(&pref.combined(domain), domain);
    Ok(log_sum_exp(&logits) - logits[local])
}

/// Replaces each event independently with probability `rho` by a uniform
/// random item of the same domain; order and length are preserved.
pub fn corrupt_sequence<R: Rng>(
    events: &[u32],
    boundary: usize,
    n_items: usize,
    rho: f64,
    rng: &mut R,
) -> Vec<u32> {
    assert!((0.0..=1.0).contains(&rho), "corruption probability out of range");
    events
        .iter()
        .map(|&id| {
            if rng.random_bool(rho) {
                if (id as usize) < boundary {
                    rng.random_range(0..boundary as u32)
                } else {
                    rng.random_range(boundary as u32..n_items as u32)
                }
            } else {
                id
            }
        })
        .collect()
}

/// Adds noise of exact L2 norm `epsilon`: magnitudes drawn uniform in
/// `(0, 1)` per coordinate, signed by the anchor's sign pattern, then
/// rescaled. A zero anchor coordinate counts as positive.
pub fn perturb<R: Rng>(vector: &[f64], epsilon: f64, anchor: &[f64], rng: &mut R) -> Vec<f64> {
    assert_eq!(vector.len(), anchor.len(), "anchor length mismatch");
    assert!(epsilon >= 0.0, "epsilon must be non-negative");
    if epsilon == 0.0 {
        return vector.to_vec();
    }
    let mut magnitudes: Vec<f64> = (0..vector.len()).map(|_| rng.random::<f64>()).collect();
    while l2_norm(&magnitudes) == 0.0 {
        magnitudes = (0..vector.len()).map(|_| rng.random::<f64>()).collect();
    }
    let norm = l2_norm(&magnitudes);
    vector
        .iter()
        .zip(anchor.iter())
        .zip(magnitudes.iter())
        .map(|((v, a), m)| {
            let sign = if *a < 0.0 { -1.0 } else { 1.0 };
            v + sign * m * epsilon / norm
        })
        .collect()
}

/// Contrastive term for one user: with an A-domain target,
/// `-log p(target | D_A(h_full + h_a)) - log(1 - p(target | D_A(h_full + h_b_neg)))`,
/// and symmetrically for B-domain targets. The negatives are encodings of
/// corrupted cross-domain sequences (already noise-perturbed).
#[allow(clippy::too_many_arguments)]
pub fn contrastive_loss(
    model: &ModelState,
    h_full: &[f64],
    h_a: &[f64],
    h_b: &[f64],
    h_a_neg: &[f64],
    h_b_neg: &[f64],
    target: u32,
    literal: bool,
) -> Result<f64, ModelError> {
    if target as usize >= model.sizes.n_items {
        return Err(ModelError::TargetOutOfCatalog(target));
    }
    let boundary = model.sizes.boundary;
    let (domain, local, pos, neg) = if (target as usize) < boundary {
        (DomainId::A, target as usize, crate::linalg::add_vecs(h_full, h_a), crate::linalg::add_vecs(h_full, h_b_neg))
    } else {
        (DomainId::B, target as usize - boundary, crate::linalg::add_vecs(h_full, h_b), crate::linalg::add_vecs(h_full, h_a_neg))
    };
    let pos_logits = model.domain_logits(&pos, domain);
    let neg_logits = model.domain_logits(&neg, domain);
    let pos_term = log_sum_exp(&pos_logits) - pos_logits[local];
    let p_neg = softmax(&neg_logits)[local];
    let neg_term = if literal {
        1.0 - p_neg
    } else {
        let rest: Vec<f64> = neg_logits
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != local)
            .map(|(_, &x)| x)
            .collect();
        log_sum_exp(&neg_logits) - log_sum_exp(&rest)
    };
    Ok(pos_term + neg_term)
}

/// One next-item training instance: the input window and its target.
#[derive(Clone, Debug)]
pub struct TrainInstance {
    pub user_id: u32,
    pub input: Vec<u32>,
    pub target: u32,
}

/// Every prefix position of every train view becomes an instance: a
/// sequence `[e0..en]` yields `([e0] -> e1)` through
/// `([e0..e_{n-1}] -> en)`. Users with a single train event contribute
/// nothing.
pub fn train_instances(split: &SplitDataset) -> Vec<TrainInstance> {
    let mut out = Vec::new();
    for s in &split.train {
        for p in 1..s.events.len() {
            out.push(TrainInstance {
                user_id: s.user_id,
                input: s.events[..p].to_vec(),
                target: s.events[p],
            });
        }
    }
    out
}

/// Per-epoch progress.
#[derive(Clone, Debug)]
pub struct TrainReport {
    /// Mean next-item loss over all instances before any update.
    pub initial_lt: f64,
    /// Mean next-item loss per epoch, as observed during updates.
    pub epoch_lt: Vec<f64>,
    /// Mean total loss of the final epoch.
    pub final_total: f64,
}

struct UserNodes {
    lt: NodeId,
    /// Absent when the contrastive weight is zero: the negative branch is
    /// never built, so it cannot influence anything.
    lct: Option<NodeId>,
}

/// Builds the per-user loss nodes on the tape. `noise` carries the rng
/// when corruption/perturbation is wanted (training); `None` evaluates the
/// clean losses only.
#[allow(clippy::too_many_arguments)]
fn user_losses_on_tape(
    tape: &mut Tape,
    model: &ModelState,
    leafs: &[NodeId],
    reps: &RepNodes,
    instance: &TrainInstance,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> UserNodes {
    let boundary = model.sizes.boundary;
    let dims = &model.dims;
    let window = truncate(&instance.input, dims.max_len);

    let rows_full: Vec<usize> = window.iter().map(|&id| id as usize).collect();
    let tok_full = tape.gather_rows(reps.full, &rows_full);
    let h_full = encode_tokens_on_tape(tape, &model.handles.enc_full, leafs, tok_full, dims.heads);

    let view_a: Vec<u32> = window.iter().copied().filter(|&id| (id as usize) < boundary).collect();
    let view_b: Vec<u32> = window.iter().copied().filter(|&id| (id as usize) >= boundary).collect();

    let encode_view = |tape: &mut Tape, view: &[u32], domain: DomainId| -> NodeId {
        let enc = match domain {
            DomainId::A => &model.handles.enc_a,
            DomainId::B => &model.handles.enc_b,
        };
        if view.is_empty() {
            return leafs[enc.null.0];
        }
        let rows: Vec<usize> = view
            .iter()
            .map(|&id| match domain {
                DomainId::A => id as usize,
                DomainId::B => id as usize - boundary,
            })
            .collect();
        let rep = match domain {
            DomainId::A => reps.domain_a,
            DomainId::B => reps.domain_b,
        };
        let tok = tape.gather_rows(rep, &rows);
        encode_tokens_on_tape(tape, enc, leafs, tok, dims.heads)
    };

    let h_a = encode_view(tape, &view_a, DomainId::A);
    let h_b = encode_view(tape, &view_b, DomainId::B);

    let logits_for = |tape: &mut Tape, h: NodeId, domain: DomainId| -> NodeId {
        let (w, b) = match domain {
            DomainId::A => (model.handles.disc_a_w, model.handles.disc_a_b),
            DomainId::B => (model.handles.disc_b_w, model.handles.disc_b_b),
        };
        let wt = tape.transpose(leafs[w.0]);
        let l = tape.matmul(h, wt);
        tape.add_row(l, leafs[b.0])
    };

    let target = instance.target;
    let target_domain = if (target as usize) < boundary { DomainId::A } else { DomainId::B };
    let local = match target_domain {
        DomainId::A => target as usize,
        DomainId::B => target as usize - boundary,
    };

    let h_domain = match target_domain {
        DomainId::A => h_a,
        DomainId::B => h_b,
    };
    let h_pos = tape.add(h_full, h_domain);
    let pos_logits = logits_for(tape, h_pos, target_domain);
    let lt = tape.cross_entropy(pos_logits, local);

    if cfg.lambda == 0.0 {
        return UserNodes { lt, lct: None };
    }

    // Negative branch: corrupt the cross-domain view, encode it, add
    // sign-patterned noise of radius epsilon, and score it with the
    // target domain's discriminator.
    let (cross_view, cross_domain) = match target_domain {
        DomainId::A => (&view_b, DomainId::B),
        DomainId::B => (&view_a, DomainId::A),
    };
    let corrupted = corrupt_sequence(cross_view, boundary, model.sizes.n_items, cfg.rho, rng);
    let h_neg_raw = encode_view(tape, &corrupted, cross_domain);
    let h_neg = if cfg.epsilon > 0.0 {
        let anchor = tape.value(h_neg_raw).row(0).to_vec();
        let zero = vec![0.0; anchor.len()];
        let delta = perturb(&zero, cfg.epsilon, &anchor, rng);
        let delta = tape.constant(Mat::from_vec(1, delta.len(), delta));
        tape.add(h_neg_raw, delta)
    } else {
        h_neg_raw
    };
    let h_neg_sum = tape.add(h_full, h_neg);
    let neg_logits = logits_for(tape, h_neg_sum, target_domain);
    let neg_term = if cfg.contrastive_literal {
        tape.complement_linear(neg_logits, local)
    } else {
        tape.complement_nll(neg_logits, local)
    };
    let lct = tape.add_n(&[lt, neg_term]);

    UserNodes { lt, lct: Some(lct) }
}

/// Alignment nodes for the multiset of batch items, split by domain.
fn alignment_on_tape(tape: &mut Tape, reps: &RepNodes, batch_a: &[usize], batch_b: &[usize]) -> NodeId {
    let pa = tape.gather_rows(reps.proj_attr_a, batch_a);
    let ga = tape.gather_rows(reps.a_hat, batch_a);
    let da = tape.sub(pa, ga);
    let la = tape.row_l2_sum(da);
    let pb = tape.gather_rows(reps.proj_attr_b, batch_b);
    let gb = tape.gather_rows(reps.b_hat, batch_b);
    let db = tape.sub(pb, gb);
    let lb = tape.row_l2_sum(db);
    tape.add(la, lb)
}

/// Assembles the scalar batch loss
/// `(1/|B|) * sum_u [lt_u + lambda * lct_u] + (gamma/|B|) * L_al(batch items)`
/// and returns it plus the summed next-item loss for reporting.
pub fn batch_loss_on_tape(
    tape: &mut Tape,
    model: &ModelState,
    leafs: &[NodeId],
    norm: &NormalizedGraphs,
    batch: &[&TrainInstance],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> (NodeId, f64) {
    let reps = reps_on_tape(tape, model, leafs, norm);
    let boundary = model.sizes.boundary;

    let mut user_terms = Vec::with_capacity(batch.len());
    let mut lt_sum = 0.0;
    let mut batch_a = Vec::new();
    let mut batch_b = Vec::new();
    for instance in batch {
        let nodes = user_losses_on_tape(tape, model, leafs, &reps, instance, cfg, rng);
        lt_sum += tape.scalar(nodes.lt);
        let term = match nodes.lct {
            Some(lct) => {
                let weighted = tape.scale(lct, cfg.lambda);
                tape.add(nodes.lt, weighted)
            }
            None => nodes.lt,
        };
        user_terms.push(term);
        for &id in truncate(&instance.input, model.dims.max_len).iter() {
            if (id as usize) < boundary {
                batch_a.push(id as usize);
            } else {
                batch_b.push(id as usize - boundary);
            }
        }
    }
    let users = tape.add_n(&user_terms);
    let mean_users = tape.scale(users, 1.0 / batch.len() as f64);
    let lal = alignment_on_tape(tape, &reps, &batch_a, &batch_b);
    let lal_scaled = tape.scale(lal, cfg.gamma / batch.len() as f64);
    let loss = tape.add(mean_users, lal_scaled);
    (loss, lt_sum)
}

/// Mean clean next-item loss over the instances (no updates, no noise).
pub fn mean_next_item_loss(
    model: &ModelState,
    norm: &NormalizedGraphs,
    instances: &[TrainInstance],
) -> Result<f64, TrainError> {
    if instances.is_empty() {
        return Err(TrainError::NoTrainableUsers);
    }
    let reps = model.item_representations(norm);
    let mut sum = 0.0;
    for inst in instances {
        let pref = model.encode_user(&inst.input, &reps)?;
        sum += next_item_loss(model, &pref, inst.target)?;
    }
    Ok(sum / instances.len() as f64)
}

/// Trains a fresh model on the split's train sequences. Deterministic for
/// a fixed config: shuffling, corruption, and noise all come from one
/// seeded generator consumed in a fixed order.
pub fn train(
    split: &SplitDataset,
    bundle: &GraphBundle,
    sizes: CatalogSizes,
    dims: ModelDims,
    cfg: &TrainConfig,
) -> Result<(ModelState, TrainReport), TrainError> {
    let instances = train_instances(split);
    if instances.is_empty() {
        return Err(TrainError::NoTrainableUsers);
    }
    if cfg.lambda > 0.0 {
        // the negative branch scores a complement probability, which is
        // undefined over a single-item vocabulary
        for (domain, items) in [
            (DomainId::A, sizes.boundary),
            (DomainId::B, sizes.n_items - sizes.boundary),
        ] {
            if items < 2 {
                return Err(TrainError::DomainTooSmall { domain, items });
            }
        }
    }
    let mut model = ModelState::init(sizes, dims, cfg.seed);
    model.hyper = Some(*cfg);
    let norm = model.normalize_graphs(bundle)?;
    let initial_lt = mean_next_item_loss(&model, &norm, &instances)?;

    let mut opt = Adam::new(&model.params, cfg.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut epoch_lt = Vec::with_capacity(cfg.epochs);
    let mut final_total = 0.0;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..instances.len()).collect();
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        let mut lt_accum = 0.0;
        let mut total_accum = 0.0;
        let mut batches = 0usize;
        for (batch_no, chunk) in order.chunks(cfg.batch_size.max(1)).enumerate() {
            let batch: Vec<&TrainInstance> = chunk.iter().map(|&i| &instances[i]).collect();
            let mut tape = Tape::new();
            let leafs = model.params.park_all(&mut tape);
            let (loss, lt_sum) =
                batch_loss_on_tape(&mut tape, &model, &leafs, &norm, &batch, cfg, &mut rng);
            let loss_value = tape.scalar(loss);
            if !loss_value.is_finite() {
                return Err(TrainError::Diverged { epoch, batch: batch_no });
            }
            let grads = tape.backward(loss);
            opt.step(&mut model.params, &grads);
            lt_accum += lt_sum;
            total_accum += loss_value;
            batches += 1;
        }
        epoch_lt.push(lt_accum / instances.len() as f64);
        final_total = total_accum / batches as f64;
        model.epoch = (epoch + 1) as u64;
    }

    Ok((model, TrainReport { initial_lt, epoch_lt, final_total }))
}
