//! Contrastive training: the multi-part objective over in-batch score
//! matrices, an AdamW loop with early stopping and best-checkpoint return,
//! a finite-difference gradient-check harness, hyperparameter grid search,
//! and checkpoint serialization.

use std::io::{Read, Write};
use std::path::Path;
use std::time::Instant;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, EMBED_DIM_SPACE, EXPERTS_K_SPACE, MAX_TEXT_LEN_SPACE, TOP_K_SPACE};
use crate::data::{DatasetSplit, EntityCatalog};
use crate::encoders::EncoderAdapter;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::matching::{
    build_batch, build_coarse_match, build_fine_match, build_gated_fuse, AttentionNodes,
    BatchScores, Channels, LayerNormNodes,
};
use crate::model::{encode_entity, encode_mention, EncodedObject, ModelParams};
use crate::seeded;
use crate::smoe::{
    build_stack_forward, MlpNodes, RoutingPlan, SmoeLayerNodes, SmoeStack, SmoeStackNodes,
};

/// Which loss channels are summed. A removed module drops both the score
/// and the loss, so these are derived from the config's loss AND module
/// toggles.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LossToggles {
    pub o: bool,
    pub t: bool,
    pub v: bool,
    pub c: bool,
}

impl LossToggles {
    pub fn all() -> Self {
        LossToggles {
            o: true,
            t: true,
            v: true,
            c: true,
        }
    }

    pub fn from_config(cfg: &RunConfig) -> Self {
        LossToggles {
            o: cfg.loss_o,
            t: cfg.loss_t && cfg.use_intra_text,
            v: cfg.loss_v && cfg.use_intra_visual,
            c: cfg.loss_c && cfg.use_inter,
        }
    }
}

/// Stable `lse(row) - row[positive]` on the tape.
pub fn build_contrastive_row(g: &mut Graph, row: NodeId, positive: usize) -> NodeId {
    let lse = g.log_sum_exp_row(row);
    let pos = g.gather_col(row, positive);
    g.sub(lse, pos)
}

/// In-batch contrastive loss for one score row; the positive sits at
/// `positive_index`. Numerically stable for any finite score scale.
pub fn contrastive_loss(scores: &[f64], positive_index: usize) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::Argument("empty score row".into()));
    }
    if positive_index >= scores.len() {
        return Err(Error::Argument(format!(
            "positive index {positive_index} out of {}",
            scores.len()
        )));
    }
    if !scores.iter().all(|s| s.is_finite()) {
        return Err(Error::Numeric("non-finite score in contrastive row".into()));
    }
    let mut g = Graph::new();
    let row = g.constant(Array2::from_shape_vec((1, scores.len()), scores.to_vec()).unwrap());
    let loss = build_contrastive_row(&mut g, row, positive_index);
    Ok(g.scalar_value(loss))
}

/// Per-channel B x B score matrices; absent channels were not computed.
#[derive(Debug, Clone, Default)]
pub struct ChannelMatrices {
    pub o: Option<Array2<f64>>,
    pub t: Option<Array2<f64>>,
    pub v: Option<Array2<f64>>,
    pub c: Option<Array2<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub l_o: Option<f64>,
    pub l_t: Option<f64>,
    pub l_v: Option<f64>,
    pub l_c: Option<f64>,
}

fn channel_loss(matrix: &Array2<f64>) -> Result<f64> {
    let b = matrix.nrows();
    if matrix.ncols() != b {
        return Err(Error::Shape(format!(
            "score matrix must be square, got {:?}",
            matrix.dim()
        )));
    }
    let mut sum = 0.0;
    for i in 0..b {
        sum += contrastive_loss(&matrix.row(i).to_vec(), i)?;
    }
    Ok(sum / b as f64)
}

/// Sum of per-channel losses (mean over rows, diagonal positives) for every
/// enabled channel.
pub fn total_loss(
    matrices: &ChannelMatrices,
    toggles: &LossToggles,
) -> Result<(f64, LossBreakdown)> {
    let pick = |on: bool, m: &Option<Array2<f64>>, name: &str| -> Result<Option<f64>> {
        if !on {
            return Ok(None);
        }
        match m {
            Some(m) => Ok(Some(channel_loss(m)?)),
            None => Err(Error::Argument(format!(
                "loss channel {name} enabled but not computed"
            ))),
        }
    };
    let l_o = pick(toggles.o, &matrices.o, "O")?;
    let l_t = pick(toggles.t, &matrices.t, "T")?;
    let l_v = pick(toggles.v, &matrices.v, "V")?;
    let l_c = pick(toggles.c, &matrices.c, "C")?;
    let total: f64 = [l_o, l_t, l_v, l_c].iter().flatten().sum();
    if [l_o, l_t, l_v, l_c].iter().all(|x| x.is_none()) {
        return Err(Error::Argument("no loss channels enabled".into()));
    }
    Ok((
        total,
        LossBreakdown {
            total,
            l_o,
            l_t,
            l_v,
            l_c,
        },
    ))
}

pub struct LossNodes {
    pub total: NodeId,
    pub l_o: Option<NodeId>,
    pub l_t: Option<NodeId>,
    pub l_v: Option<NodeId>,
    pub l_c: Option<NodeId>,
}

/// Assemble the four channel losses from a pairwise score grid (diagonal
/// positives) on the tape.
pub fn build_total_loss(
    g: &mut Graph,
    batch: &BatchScores,
    toggles: &LossToggles,
) -> Result<LossNodes> {
    let b = batch.pairs.len();
    if batch.pairs.iter().any(|row| row.len() != b) {
        return Err(Error::Shape(
            "in-batch training needs a square score grid".into(),
        ));
    }
    let channel = |g: &mut Graph,
                   on: bool,
                   name: &str,
                   get: &dyn Fn(&crate::matching::PairScores) -> Option<NodeId>|
     -> Result<Option<NodeId>> {
        if !on {
            return Ok(None);
        }
        let mut acc: Option<NodeId> = None;
        for i in 0..b {
            let row_nodes: Vec<NodeId> = batch.pairs[i]
                .iter()
                .map(|p| {
                    get(p).ok_or_else(|| {
                        Error::Argument(format!("loss channel {name} enabled but not computed"))
                    })
                })
                .collect::<Result<_>>()?;
            let row = g.concat_cols(&row_nodes);
            let loss_i = build_contrastive_row(g, row, i);
            acc = Some(match acc {
                Some(a) => g.add(a, loss_i),
                None => loss_i,
            });
        }
        Ok(Some(g.scale(acc.expect("b >= 1"), 1.0 / b as f64)))
    };
    let l_o = channel(g, toggles.o, "O", &|p| Some(p.s_o))?;
    let l_t = channel(g, toggles.t, "T", &|p| p.s_t)?;
    let l_v = channel(g, toggles.v, "V", &|p| p.s_v)?;
    let l_c = channel(g, toggles.c, "C", &|p| p.s_c)?;
    let mut total: Option<NodeId> = None;
    for l in [l_o, l_t, l_v, l_c].into_iter().flatten() {
        total = Some(match total {
            Some(t) => g.add(t, l),
            None => l,
        });
    }
    let total = total.ok_or_else(|| Error::Argument("no loss channels enabled".into()))?;
    Ok(LossNodes {
        total,
        l_o,
        l_t,
        l_v,
        l_c,
    })
}

/// Decoupled-weight-decay Adam over the model's tensors in walk order.
pub struct AdamW {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    step_count: u64,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl AdamW {
    pub fn new(cfg: &RunConfig, params: &ModelParams) -> Self {
        let mut m = Vec::new();
        params.for_each(&mut |_, t| m.push(Array2::zeros(t.dim())));
        let v = m.clone();
        AdamW {
            lr: cfg.learning_rate,
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
            step_count: 0,
            m,
            v,
        }
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &[Array2<f64>]) {
        self.step_count += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step_count as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step_count as i32);
        let mut idx = 0;
        params.for_each_mut(&mut |name, tensor| {
            let g = &grads[idx];
            assert_eq!(g.dim(), tensor.dim(), "gradient shape mismatch at {name}");
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            for ((t, gv), (mv, vv)) in tensor
                .iter_mut()
                .zip(g.iter())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let m_hat = *mv / bc1;
                let v_hat = *vv / bc2;
                *t -= self.lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * *t);
            }
            idx += 1;
        });
        assert_eq!(idx, grads.len(), "gradient count mismatch");
    }
}

/// One training-log record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub l_o: Option<f64>,
    pub l_t: Option<f64>,
    pub l_v: Option<f64>,
    pub l_c: Option<f64>,
    pub val_mrr: f64,
    pub wall_seconds: f64,
}

pub struct TrainData<'a> {
    pub train: &'a DatasetSplit,
    pub valid: &'a DatasetSplit,
    pub catalog: &'a EntityCatalog,
}

const EPOCH_SEED_TAG: u64 = 0x65706f6368; // "epoch"

/// Mini-batch contrastive training with in-batch negatives (gold entities of
/// the other batch mentions). Returns the parameters of the best-validation
/// epoch and the per-epoch history. Fully reproducible for a fixed seed.
pub fn train(
    cfg: &RunConfig,
    data: &TrainData,
    encoder: &dyn EncoderAdapter,
) -> Result<(ModelParams, Vec<EpochRecord>)> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(Error::Argument("training split is empty".into()));
    }
    if data.valid.is_empty() {
        return Err(Error::Argument("validation split is empty".into()));
    }
    let channels = Channels::from_config(cfg);
    let toggles = LossToggles::from_config(cfg);
    let mut params = ModelParams::init(cfg)?;
    if cfg.epochs == 0 {
        return Ok((params, Vec::new()));
    }

    // encode once; training revisits the same objects every epoch
    let mentions: Vec<EncodedObject> = data
        .train
        .mentions()
        .iter()
        .map(|m| encode_mention(m, encoder, cfg))
        .collect::<Result<_>>()?;
    let golds: Vec<EncodedObject> = data
        .train
        .mentions()
        .iter()
        .map(|m| {
            let e = data.catalog.get(&m.gold_entity_id).ok_or_else(|| {
                Error::Integrity(format!(
                    "gold entity {:?} of mention {:?} missing from catalog",
                    m.gold_entity_id, m.id
                ))
            })?;
            encode_entity(e, encoder, cfg)
        })
        .collect::<Result<_>>()?;

    let mut optimizer = AdamW::new(cfg, &params);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, ModelParams)> = None;
    let mut since_best = 0usize;

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..mentions.len()).collect();
        let mut rng = seeded::rng(cfg.seed ^ EPOCH_SEED_TAG ^ epoch as u64);
        seeded::shuffle(&mut rng, &mut order);

        let mut loss_weighted = 0.0;
        let mut channel_sums = [0.0f64; 4];
        let mut channel_seen = [false; 4];
        let mut seen = 0usize;
        for batch_idx in order.chunks(cfg.batch_size.max(1)) {
            let batch_mentions: Vec<EncodedObject> =
                batch_idx.iter().map(|&i| mentions[i].clone()).collect();
            let batch_entities: Vec<EncodedObject> =
                batch_idx.iter().map(|&i| golds[i].clone()).collect();
            let mut g = Graph::new();
            let (nodes, order_ids) = params.register(&mut g);
            let batch = build_batch(
                &mut g,
                &batch_mentions,
                &batch_entities,
                &params,
                &nodes,
                channels,
            )?;
            let loss_nodes = build_total_loss(&mut g, &batch, &toggles)?;
            let loss_value = g.scalar_value(loss_nodes.total);
            if !loss_value.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss {loss_value} at epoch {epoch}, batch starting {}",
                    batch_idx[0]
                )));
            }
            let grads_all = g.backward(loss_nodes.total);
            let mut grads = Vec::with_capacity(order_ids.len());
            for (_, id) in &order_ids {
                grads.push(grads_all.get(*id, g.shape(*id)));
            }
            optimizer.step(&mut params, &grads);
            let mut bad: Option<String> = None;
            params.for_each(&mut |name, t| {
                if bad.is_none() && !t.iter().all(|v| v.is_finite()) {
                    bad = Some(name);
                }
            });
            if let Some(name) = bad {
                return Err(Error::Numeric(format!(
                    "parameter {name} became non-finite at epoch {epoch}"
                )));
            }
            let b = batch_idx.len() as f64;
            loss_weighted += loss_value * b;
            seen += batch_idx.len();
            for (slot, l) in [
                loss_nodes.l_o,
                loss_nodes.l_t,
                loss_nodes.l_v,
                loss_nodes.l_c,
            ]
            .into_iter()
            .enumerate()
            {
                if let Some(n) = l {
                    channel_sums[slot] += g.scalar_value(n) * b;
                    channel_seen[slot] = true;
                }
            }
        }
        let train_loss = loss_weighted / seen as f64;
        let channel_mean =
            |slot: usize| channel_seen[slot].then(|| channel_sums[slot] / seen as f64);

        let val = crate::eval::evaluate_split(data.valid, data.catalog, &params, cfg, encoder)?;
        let val_mrr = val.metrics.mrr;
        history.push(EpochRecord {
            epoch,
            train_loss,
            l_o: channel_mean(0),
            l_t: channel_mean(1),
            l_v: channel_mean(2),
            l_c: channel_mean(3),
            val_mrr,
            wall_seconds: started.elapsed().as_secs_f64(),
        });

        let improved = best.as_ref().is_none_or(|(b, _)| val_mrr > *b);
        if improved {
            best = Some((val_mrr, params.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if cfg.patience > 0 && since_best >= cfg.patience {
                break;
            }
        }
    }
    let (_, best_params) = best.expect("at least one epoch ran");
    Ok((best_params, history))
}

// ---- gradient checking ------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradComponent {
    Projection,
    CoarseMatch,
    FineMatch,
    GatedFuse,
    ContrastiveLoss,
    SmoeForward,
}

impl std::str::FromStr for GradComponent {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "projection" => Ok(Self::Projection),
            "coarse_match" => Ok(Self::CoarseMatch),
            "fine_match" => Ok(Self::FineMatch),
            "gated_fuse" => Ok(Self::GatedFuse),
            "contrastive_loss" => Ok(Self::ContrastiveLoss),
            "smoe" | "smoe_forward" => Ok(Self::SmoeForward),
            other => Err(Error::Argument(format!(
                "unknown gradcheck component {other:?}"
            ))),
        }
    }
}

pub const GRAD_COMPONENTS: [GradComponent; 6] = [
    GradComponent::Projection,
    GradComponent::CoarseMatch,
    GradComponent::FineMatch,
    GradComponent::GatedFuse,
    GradComponent::ContrastiveLoss,
    GradComponent::SmoeForward,
];

type LossBuilder<'a> = dyn Fn(&mut Graph, &[NodeId]) -> NodeId + 'a;

/// Analytic gradients vs central finite differences over every coordinate of
/// every input; returns the max relative error.
fn max_rel_error(inputs: &[Array2<f64>], build: &LossBuilder, eps: f64) -> f64 {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|x| g.param(x.clone())).collect();
    let loss = build(&mut g, &ids);
    let grads = g.backward(loss);
    let eval = |shifted: &[Array2<f64>]| -> f64 {
        let mut g2 = Graph::new();
        let ids2: Vec<NodeId> = shifted.iter().map(|x| g2.param(x.clone())).collect();
        let l2 = build(&mut g2, &ids2);
        g2.scalar_value(l2)
    };
    let mut worst = 0.0f64;
    for (k, x) in inputs.iter().enumerate() {
        let analytic = grads.get(ids[k], x.dim());
        for r in 0..x.nrows() {
            for c in 0..x.ncols() {
                let mut plus = inputs.to_vec();
                plus[k][[r, c]] += eps;
                let mut minus = inputs.to_vec();
                minus[k][[r, c]] -= eps;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * eps);
                let a = analytic[[r, c]];
                let rel = (a - numeric).abs() / (a.abs() + numeric.abs() + 1e-6);
                worst = worst.max(rel);
            }
        }
    }
    worst
}

fn rand_mat(rng: &mut rand_chacha::ChaCha8Rng, r: usize, c: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((r, c), |_| seeded::uniform_sym(rng, scale))
}

fn mlp_nodes_from(iter: &mut impl Iterator<Item = NodeId>) -> MlpNodes {
    MlpNodes {
        w1: iter.next().expect("w1"),
        b1: iter.next().expect("b1"),
        w2: iter.next().expect("w2"),
        b2: iter.next().expect("b2"),
    }
}

fn stack_nodes_from(stack: &SmoeStack, iter: &mut impl Iterator<Item = NodeId>) -> SmoeStackNodes {
    let fuse = mlp_nodes_from(iter);
    let layers = stack
        .layers
        .iter()
        .map(|l| SmoeLayerNodes {
            router: iter.next().expect("router"),
            experts: l.experts.iter().map(|_| mlp_nodes_from(iter)).collect(),
            top_k: l.top_k,
        })
        .collect();
    SmoeStackNodes { fuse, layers }
}

/// Compare analytic and finite-difference gradients for one component at a
/// small size. For the expert mixture, routing is captured once and held
/// fixed across all perturbed evaluations.
pub fn grad_check(component: GradComponent, dim: usize, eps: f64) -> Result<f64> {
    if !(1e-6..=1e-3).contains(&eps) {
        return Err(Error::Argument(format!("eps {eps} outside [1e-6, 1e-3]")));
    }
    if dim == 0 || dim > 64 {
        return Err(Error::Argument(format!("dim {dim} outside [1, 64]")));
    }
    let mut rng = seeded::rng(0x67726164 ^ dim as u64); // "grad"
    let err = match component {
        GradComponent::Projection => {
            let native = dim + 3;
            let w = rand_mat(&mut rng, native, dim, 0.5);
            let x = rand_mat(&mut rng, 3, native, 0.8);
            let probe = rand_mat(&mut rng, 3, dim, 0.9);
            max_rel_error(
                &[w],
                &move |g, ids| {
                    let xc = g.constant(x.clone());
                    let pc = g.constant(probe.clone());
                    let y = g.matmul(xc, ids[0]);
                    let m = g.mul(y, pc);
                    g.sum_all(m)
                },
                eps,
            )
        }
        GradComponent::CoarseMatch => {
            let h_e = rand_mat(&mut rng, 1, dim, 0.8);
            let h_m = rand_mat(&mut rng, 1, dim, 0.8);
            max_rel_error(
                &[h_e, h_m],
                &|g, ids| build_coarse_match(g, ids[0], ids[1]),
                eps,
            )
        }
        GradComponent::FineMatch => {
            let rows = 3;
            let mask_e = vec![true, true, false];
            let mask_m = vec![true, false, true];
            let inputs = vec![
                rand_mat(&mut rng, dim, dim, 0.5),  // wq
                rand_mat(&mut rng, dim, dim, 0.5),  // wk
                rand_mat(&mut rng, dim, dim, 0.5),  // wv
                rand_mat(&mut rng, 1, dim, 0.8),    // h_e
                rand_mat(&mut rng, rows, dim, 0.8), // fine_e
                rand_mat(&mut rng, rows, dim, 0.8), // fine_m
            ];
            max_rel_error(
                &inputs,
                &move |g, ids| {
                    let attn = AttentionNodes {
                        w_q: ids[0],
                        w_k: ids[1],
                        w_v: ids[2],
                    };
                    build_fine_match(g, ids[3], ids[4], &mask_e, ids[5], &mask_m, &attn)
                        .expect("unmasked rows present")
                },
                eps,
            )
        }
        GradComponent::GatedFuse => {
            let rows = 3;
            let mask = vec![true, true, false];
            let probe = rand_mat(&mut rng, 1, dim, 0.9);
            let inputs = vec![
                rand_mat(&mut rng, 1, dim, 0.6) + 1.0, // gamma away from zero
                rand_mat(&mut rng, 1, dim, 0.3),       // beta
                rand_mat(&mut rng, 1, dim, 0.8),       // h_text
                rand_mat(&mut rng, rows, dim, 0.8),    // fine
            ];
            max_rel_error(
                &inputs,
                &move |g, ids| {
                    let ln = LayerNormNodes {
                        gamma: ids[0],
                        beta: ids[1],
                    };
                    let e = build_gated_fuse(g, ids[2], ids[3], &mask, &ln);
                    let pc = g.constant(probe.clone());
                    g.dot(e, pc)
                },
                eps,
            )
        }
        GradComponent::ContrastiveLoss => {
            let b = dim.max(3);
            let row = rand_mat(&mut rng, 1, b, 2.0);
            max_rel_error(&[row], &|g, ids| build_contrastive_row(g, ids[0], 1), eps)
        }
        GradComponent::SmoeForward => {
            // dense (k == K), sparse (k < K, fixed routing), and a two-layer
            // stack where the replayed routing plan spans both layers
            let dense = smoe_probe(dim, 2, 2, 1, &mut rng, eps)?;
            let sparse = smoe_probe(dim, 3, 2, 1, &mut rng, eps)?;
            let deep = smoe_probe(dim, 3, 2, 2, &mut rng, eps)?;
            dense.max(sparse).max(deep)
        }
    };
    Ok(err)
}

fn smoe_probe(
    dim: usize,
    num_experts: usize,
    top_k: usize,
    num_layers: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
    eps: f64,
) -> Result<f64> {
    let stack = SmoeStack::init(dim, num_experts, top_k, num_layers, 2 * dim, rng)?;
    let p = rand_mat(rng, 3, dim, 0.8);
    let probe = rand_mat(rng, 3, dim, 0.9);

    // capture routing at the base point, then hold it fixed
    let plan: RoutingPlan = {
        let mut g = Graph::new();
        let p_n = g.constant(p.clone());
        let nodes = stack.register(&mut g);
        build_stack_forward(&mut g, p_n, &nodes, None, None)?.routing
    };

    let mut inputs = Vec::new();
    stack.for_each("stack", &mut |_, t| inputs.push(t.clone()));
    inputs.push(p.clone());

    let stack_template = stack.clone();
    Ok(max_rel_error(
        &inputs,
        &move |g, ids| {
            let mut iter = ids[..ids.len() - 1].iter().copied();
            let nodes = stack_nodes_from(&stack_template, &mut iter);
            let p_node = ids[ids.len() - 1];
            let run = build_stack_forward(g, p_node, &nodes, Some(&plan), None)
                .expect("finite probe inputs");
            let pc = g.constant(probe.clone());
            let m = g.mul(run.output, pc);
            g.sum_all(m)
        },
        eps,
    ))
}

// ---- grid search ------------------------------------------------------------

/// Candidate lists for the searched hyperparameters. Architecture values
/// must come from the published search spaces.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridSpace {
    pub experts_k: Vec<usize>,
    pub top_k: Vec<usize>,
    pub embed_dim: Vec<usize>,
    pub max_text_len: Vec<usize>,
    pub learning_rate: Vec<f64>,
}

impl GridSpace {
    /// The full published lattice crossed with a small learning-rate sweep.
    pub fn full_lattice() -> Self {
        GridSpace {
            experts_k: EXPERTS_K_SPACE.to_vec(),
            top_k: TOP_K_SPACE.to_vec(),
            embed_dim: EMBED_DIM_SPACE.to_vec(),
            max_text_len: MAX_TEXT_LEN_SPACE.to_vec(),
            learning_rate: vec![1e-5],
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let space: GridSpace = serde_json::from_str(&text)
            .map_err(|e| Error::parse(path.display().to_string(), e.line(), e.to_string()))?;
        space.validate()?;
        Ok(space)
    }

    pub fn validate(&self) -> Result<()> {
        let subset = |vals: &[usize], space: &[usize], name: &str| -> Result<()> {
            if vals.is_empty() {
                return Err(Error::Argument(format!("{name} candidate list is empty")));
            }
            for v in vals {
                if !space.contains(v) {
                    return Err(Error::Argument(format!(
                        "{name} value {v} outside the search space {space:?}"
                    )));
                }
            }
            Ok(())
        };
        subset(&self.experts_k, &EXPERTS_K_SPACE, "experts_k")?;
        subset(&self.top_k, &TOP_K_SPACE, "top_k")?;
        subset(&self.embed_dim, &EMBED_DIM_SPACE, "embed_dim")?;
        subset(&self.max_text_len, &MAX_TEXT_LEN_SPACE, "max_text_len")?;
        if self.learning_rate.is_empty() || self.learning_rate.iter().any(|&lr| lr <= 0.0) {
            return Err(Error::Argument("learning rates must be positive".into()));
        }
        Ok(())
    }

    /// All combinations in serialization order (nested loops over the fields
    /// in declaration order).
    pub fn enumerate(&self, base: &RunConfig) -> Vec<RunConfig> {
        let mut out = Vec::new();
        for &k_experts in &self.experts_k {
            for &k in &self.top_k {
                for &d in &self.embed_dim {
                    for &len in &self.max_text_len {
                        for &lr in &self.learning_rate {
                            let mut cfg = base.clone();
                            cfg.experts_k = k_experts;
                            cfg.top_k = k;
                            cfg.embed_dim = d;
                            cfg.max_text_len = len;
                            cfg.learning_rate = lr;
                            out.push(cfg);
                        }
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridOutcome {
    pub config: RunConfig,
    pub val_mrr: Option<f64>,
    pub error: Option<String>,
}

/// Train every candidate (up to `budget`) and rank by best validation MRR.
/// Ties keep serialization order; per-candidate failures are recorded and
/// the search continues.
pub fn grid_search(
    space: &GridSpace,
    budget: usize,
    base: &RunConfig,
    data: &TrainData,
    encoder: &dyn EncoderAdapter,
) -> Result<(RunConfig, Vec<GridOutcome>)> {
    space.validate()?;
    if budget == 0 {
        return Err(Error::Argument("budget must be >= 1".into()));
    }
    let candidates = space.enumerate(base);
    let mut outcomes = Vec::new();
    for cfg in candidates.into_iter().take(budget) {
        let run = || -> Result<f64> {
            cfg.validate()?;
            let (_, history) = train(&cfg, data, encoder)?;
            history
                .iter()
                .map(|e| e.val_mrr)
                .fold(None::<f64>, |acc, v| Some(acc.map_or(v, |a| a.max(v))))
                .ok_or_else(|| Error::Argument("no epochs ran".into()))
        };
        match run() {
            Ok(mrr) => outcomes.push(GridOutcome {
                config: cfg,
                val_mrr: Some(mrr),
                error: None,
            }),
            Err(e) => outcomes.push(GridOutcome {
                config: cfg,
                val_mrr: None,
                error: Some(e.to_string()),
            }),
        }
    }
    let mut leaderboard = outcomes.clone();
    leaderboard.sort_by(|a, b| match (a.val_mrr, b.val_mrr) {
        (Some(x), Some(y)) => y.partial_cmp(&x).expect("finite mrr"),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => std::cmp::Ordering::Equal,
    });
    let best = leaderboard
        .first()
        .filter(|o| o.val_mrr.is_some())
        .map(|o| o.config.clone())
        .ok_or_else(|| Error::Argument("every grid candidate failed".into()))?;
    Ok((best, leaderboard))
}

// ---- checkpoints -------------------------------------------------------------

const CHECKPOINT_MAGIC: &[u8; 8] = b"MELCKPT\x01";

/// Versioned binary container: magic, a payload digest, the config
/// fingerprint, then named f64 tensors. The digest makes any bit-level
/// corruption a parse error instead of silently altered weights.
/// Written atomically (temp file + rename).
pub fn save_checkpoint(
    params: &ModelParams,
    cfg: &RunConfig,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let display = path.display().to_string();
    let mut tensors: Vec<(String, Array2<f64>)> = Vec::new();
    params.for_each(&mut |name, t| tensors.push((name, t.clone())));

    let mut payload = Vec::new();
    let fp = cfg.fingerprint();
    payload.extend_from_slice(&(fp.len() as u32).to_le_bytes());
    payload.extend_from_slice(fp.as_bytes());
    payload.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in &tensors {
        payload.extend_from_slice(&(name.len() as u32).to_le_bytes());
        payload.extend_from_slice(name.as_bytes());
        payload.extend_from_slice(&(t.nrows() as u64).to_le_bytes());
        payload.extend_from_slice(&(t.ncols() as u64).to_le_bytes());
        for v in t.iter() {
            payload.extend_from_slice(&v.to_bits().to_le_bytes());
        }
    }
    let mut buf = Vec::with_capacity(payload.len() + 16);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&crate::hash::fnv1a64(&payload).to_le_bytes());
    buf.extend_from_slice(&payload);
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, &buf).map_err(|e| Error::io(tmp.display().to_string(), e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(&display, e))
}

struct Cursor<'a> {
    data: &'a [u8],
    at: usize,
    path: &'a str,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.data.len() {
            return Err(Error::parse(self.path, 0, "truncated checkpoint"));
        }
        let s = &self.data[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| Error::parse(self.path, 0, "invalid utf8 in checkpoint"))
    }
}

/// Load a checkpoint for the active config. The fingerprint must match; the
/// tensor set must agree exactly with the config's architecture. No partial
/// state escapes on failure.
pub fn load_checkpoint(path: impl AsRef<Path>, cfg: &RunConfig) -> Result<ModelParams> {
    let path = path.as_ref();
    let display = path.display().to_string();
    let mut data = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut data))
        .map_err(|e| Error::io(&display, e))?;
    let mut cur = Cursor {
        data: &data,
        at: 0,
        path: &display,
    };
    if cur.take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::parse(
            &display,
            0,
            "bad magic; not a checkpoint file",
        ));
    }
    let stored_digest = cur.u64()?;
    if crate::hash::fnv1a64(&data[16..]) != stored_digest {
        return Err(Error::parse(
            &display,
            0,
            "checkpoint payload digest mismatch",
        ));
    }
    let fp = cur.string()?;
    if fp != cfg.fingerprint() {
        return Err(Error::Compat(format!(
            "checkpoint fingerprint {fp} does not match active config {}",
            cfg.fingerprint()
        )));
    }
    let count = cur.u32()? as usize;
    let mut tensors = std::collections::HashMap::with_capacity(count);
    for _ in 0..count {
        let name = cur.string()?;
        let rows = cur.u64()? as usize;
        let cols = cur.u64()? as usize;
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::parse(&display, 0, "tensor shape overflow"))?;
        let bytes = cur.take(n * 8)?;
        let mut values = Vec::with_capacity(n);
        for chunk in bytes.chunks_exact(8) {
            values.push(f64::from_bits(u64::from_le_bytes(
                chunk.try_into().unwrap(),
            )));
        }
        let t = Array2::from_shape_vec((rows, cols), values)
            .map_err(|_| Error::parse(&display, 0, "tensor shape mismatch"))?;
        if tensors.insert(name.clone(), t).is_some() {
            return Err(Error::parse(
                &display,
                0,
                format!("duplicate tensor {name:?}"),
            ));
        }
    }
    if cur.at != data.len() {
        return Err(Error::parse(
            &display,
            0,
            "trailing bytes after checkpoint payload",
        ));
    }

    let mut params = ModelParams::init(cfg)?;
    let mut failure: Option<Error> = None;
    let mut used = 0usize;
    params.for_each_mut(&mut |name, tensor| {
        if failure.is_some() {
            return;
        }
        match tensors.get(&name) {
            Some(t) if t.dim() == tensor.dim() => {
                tensor.assign(t);
                used += 1;
            }
            Some(t) => {
                failure = Some(Error::Compat(format!(
                    "tensor {name:?} has shape {:?}, expected {:?}",
                    t.dim(),
                    tensor.dim()
                )));
            }
            None => {
                failure = Some(Error::Compat(format!(
                    "checkpoint is missing tensor {name:?}"
                )));
            }
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    if used != tensors.len() {
        return Err(Error::Compat(format!(
            "checkpoint has {} tensors, architecture uses {used}",
            tensors.len()
        )));
    }
    Ok(params)
}

/// Append epoch records to a JSONL training log.
pub fn write_history(history: &[EpochRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let display = path.display().to_string();
    let mut out =
        std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(&display, e))?);
    for rec in history {
        let line = serde_json::to_string(rec).expect("epoch record serializes");
        writeln!(out, "{line}").map_err(|e| Error::io(&display, e))?;
    }
    out.flush().map_err(|e| Error::io(&display, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::ToyEncoder;
    use crate::synth;

    #[test]
    fn contrastive_uniform_two_way_is_ln2() {
        let l = contrastive_loss(&[1.5, 1.5], 0).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-9);
    }

    #[test]
    fn contrastive_single_class_is_zero() {
        assert_eq!(contrastive_loss(&[4.2], 0).unwrap(), 0.0);
    }

    #[test]
    fn contrastive_dominant_positive_hand_value() {
        let l = contrastive_loss(&[10.0, 0.0, 0.0], 0).unwrap();
        // naive formula evaluated directly
        let naive = -((10.0f64).exp() / ((10.0f64).exp() + 2.0)).ln();
        assert!((l - naive).abs() < 1e-12);
        assert!((l - 9.08e-5).abs() < 1e-7);
    }

    #[test]
    fn contrastive_matches_naive_formula_up_to_50() {
        let mut rng = seeded::rng(9);
        for _ in 0..200 {
            let n = 2 + seeded::uniform_index(&mut rng, 6);
            let row: Vec<f64> = (0..n)
                .map(|_| seeded::uniform_sym(&mut rng, 50.0))
                .collect();
            let pos = seeded::uniform_index(&mut rng, n);
            let stable = contrastive_loss(&row, pos).unwrap();
            // raw formula with unshifted exponentials; fine in f64 for |s| <= 50
            let denom: f64 = row.iter().map(|&s| s.exp()).sum();
            let naive = -(row[pos].exp() / denom).ln();
            assert!(
                (stable - naive).abs() < 1e-6,
                "stable {stable} vs naive {naive}"
            );
            assert!(stable >= 0.0);
        }
    }

    #[test]
    fn contrastive_row_shift_invariance() {
        let row = [0.3, -1.2, 2.0, 0.0];
        let base = contrastive_loss(&row, 2).unwrap();
        let shifted: Vec<f64> = row.iter().map(|s| s + 17.5).collect();
        let l = contrastive_loss(&shifted, 2).unwrap();
        assert!((l - base).abs() < 1e-9);
    }

    #[test]
    fn contrastive_rejects_bad_input() {
        assert!(matches!(contrastive_loss(&[], 0), Err(Error::Argument(_))));
        assert!(matches!(
            contrastive_loss(&[1.0], 1),
            Err(Error::Argument(_))
        ));
        assert!(matches!(
            contrastive_loss(&[1.0, f64::NAN], 0),
            Err(Error::Numeric(_))
        ));
    }

    fn square(vals: &[f64], b: usize) -> Array2<f64> {
        Array2::from_shape_vec((b, b), vals.to_vec()).unwrap()
    }

    #[test]
    fn total_loss_replicated_channels_quadruple() {
        let m = square(&[2.0, 0.0, 0.5, 1.5], 2);
        let matrices = ChannelMatrices {
            o: Some(m.clone()),
            t: Some(m.clone()),
            v: Some(m.clone()),
            c: Some(m.clone()),
        };
        let (total, breakdown) = total_loss(&matrices, &LossToggles::all()).unwrap();
        let single = breakdown.l_o.unwrap();
        assert!((total - 4.0 * single).abs() < 1e-12);
    }

    #[test]
    fn total_loss_toggle_omits_channel() {
        let m = square(&[2.0, 0.0, 0.5, 1.5], 2);
        let matrices = ChannelMatrices {
            o: Some(m.clone()),
            t: Some(m.clone()),
            v: Some(m.clone()),
            c: Some(m.clone()),
        };
        let toggles = LossToggles {
            v: false,
            ..LossToggles::all()
        };
        let (total, breakdown) = total_loss(&matrices, &toggles).unwrap();
        assert!(breakdown.l_v.is_none());
        let with_v = total_loss(&matrices, &LossToggles::all()).unwrap().0;
        assert!(total < with_v);
    }

    #[test]
    fn total_loss_only_o_equals_channel_loss() {
        let m = square(&[1.0, -0.5, 0.25, 2.0], 2);
        let matrices = ChannelMatrices {
            o: Some(m.clone()),
            ..Default::default()
        };
        let toggles = LossToggles {
            o: true,
            t: false,
            v: false,
            c: false,
        };
        let (total, breakdown) = total_loss(&matrices, &toggles).unwrap();
        assert_eq!(total, breakdown.l_o.unwrap());
        let expected = (contrastive_loss(&[1.0, -0.5], 0).unwrap()
            + contrastive_loss(&[0.25, 2.0], 1).unwrap())
            / 2.0;
        assert!((total - expected).abs() < 1e-12);
    }

    #[test]
    fn total_loss_shape_errors() {
        let bad = Array2::zeros((2, 3));
        let matrices = ChannelMatrices {
            o: Some(bad),
            ..Default::default()
        };
        let toggles = LossToggles {
            o: true,
            t: false,
            v: false,
            c: false,
        };
        assert!(matches!(
            total_loss(&matrices, &toggles),
            Err(Error::Shape(_))
        ));
        // enabled channel without a matrix
        let toggles = LossToggles {
            o: true,
            t: true,
            v: false,
            c: false,
        };
        let matrices = ChannelMatrices {
            o: Some(square(&[0.0; 4], 2)),
            ..Default::default()
        };
        assert!(matches!(
            total_loss(&matrices, &toggles),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn grad_check_linear_projection_tight() {
        let err = grad_check(GradComponent::Projection, 4, 1e-5).unwrap();
        assert!(err < 1e-6, "projection gradcheck error {err}");
    }

    #[test]
    fn grad_check_all_components_pass_at_small_dims() {
        for comp in GRAD_COMPONENTS {
            let err = grad_check(comp, 4, 1e-5).unwrap();
            assert!(err < 1e-4, "{comp:?} gradcheck error {err}");
        }
    }

    #[test]
    fn grad_check_fine_match_d8() {
        let err = grad_check(GradComponent::FineMatch, 8, 1e-5).unwrap();
        assert!(err < 1e-4, "fine_match gradcheck error {err}");
    }

    #[test]
    fn grad_check_eps_domain() {
        assert!(grad_check(GradComponent::CoarseMatch, 4, 1e-7).is_err());
        assert!(grad_check(GradComponent::CoarseMatch, 4, 1e-2).is_err());
    }

    fn toy_cfg(seed: u64) -> RunConfig {
        let mut cfg = RunConfig::with_seed(seed);
        cfg.embed_dim = 16;
        cfg.native_dim = 24;
        cfg.experts_k = 2;
        cfg.top_k = 1;
        cfg.max_text_len = 8;
        cfg.num_patches = 4;
        cfg.batch_size = 8;
        cfg.epochs = 4;
        cfg.learning_rate = 3e-3;
        cfg.weight_decay = 0.0;
        cfg
    }

    #[test]
    fn zero_epochs_returns_init_and_empty_history() {
        let dir = tempfile::tempdir().unwrap();
        let task = synth::toy_task(dir.path(), 4, 3).unwrap();
        let mut cfg = toy_cfg(3);
        cfg.epochs = 0;
        let enc = ToyEncoder::new(cfg.native_dim, cfg.num_patches, cfg.seed);
        let data = TrainData {
            train: &task.train,
            valid: &task.valid,
            catalog: &task.catalog,
        };
        let (params, history) = train(&cfg, &data, &enc).unwrap();
        assert!(history.is_empty());
        assert_eq!(params, ModelParams::init(&cfg).unwrap());
    }

    #[test]
    fn training_is_deterministic_under_fixed_seed() {
        let dir = tempfile::tempdir().unwrap();
        let task = synth::toy_task(dir.path(), 5, 4).unwrap();
        let mut cfg = toy_cfg(4);
        cfg.epochs = 2;
        let enc = ToyEncoder::new(cfg.native_dim, cfg.num_patches, cfg.seed);
        let data = TrainData {
            train: &task.train,
            valid: &task.valid,
            catalog: &task.catalog,
        };
        let (pa, ha) = train(&cfg, &data, &enc).unwrap();
        let (pb, hb) = train(&cfg, &data, &enc).unwrap();
        assert_eq!(pa, pb);
        let strip = |h: &[EpochRecord]| {
            h.iter()
                .map(|e| (e.epoch, e.train_loss, e.val_mrr, e.l_o, e.l_t, e.l_v, e.l_c))
                .collect::<Vec<_>>()
        };
        assert_eq!(strip(&ha), strip(&hb));
    }

    #[test]
    fn one_small_step_decreases_loss() {
        // line-search witness: some small learning rate strictly decreases
        // the first-batch loss after one optimizer step
        let dir = tempfile::tempdir().unwrap();
        let task = synth::toy_task(dir.path(), 6, 5).unwrap();
        let cfg = toy_cfg(5);
        let enc = ToyEncoder::new(cfg.native_dim, cfg.num_patches, cfg.seed);
        let channels = Channels::from_config(&cfg);
        let toggles = LossToggles::from_config(&cfg);
        let mentions: Vec<EncodedObject> = task
            .train
            .mentions()
            .iter()
            .map(|m| encode_mention(m, &enc, &cfg).unwrap())
            .collect();
        let entities: Vec<EncodedObject> = task
            .train
            .mentions()
            .iter()
            .map(|m| {
                encode_entity(task.catalog.get(&m.gold_entity_id).unwrap(), &enc, &cfg).unwrap()
            })
            .collect();
        let loss_at = |params: &ModelParams| -> f64 {
            let mut g = Graph::new();
            let (nodes, _) = params.register(&mut g);
            let batch =
                build_batch(&mut g, &mentions, &entities, params, &nodes, channels).unwrap();
            let l = build_total_loss(&mut g, &batch, &toggles).unwrap();
            g.scalar_value(l.total)
        };
        let base_params = ModelParams::init(&cfg).unwrap();
        let base_loss = loss_at(&base_params);
        let mut found = false;
        for lr in [1e-2, 1e-3, 1e-4, 1e-5] {
            let mut params = base_params.clone();
            let mut g = Graph::new();
            let (nodes, order) = params.register(&mut g);
            let batch =
                build_batch(&mut g, &mentions, &entities, &params, &nodes, channels).unwrap();
            let l = build_total_loss(&mut g, &batch, &toggles).unwrap();
            let grads_all = g.backward(l.total);
            let grads: Vec<Array2<f64>> = order
                .iter()
                .map(|(_, id)| grads_all.get(*id, g.shape(*id)))
                .collect();
            let mut opt_cfg = cfg.clone();
            opt_cfg.learning_rate = lr;
            opt_cfg.weight_decay = 0.0;
            let mut opt = AdamW::new(&opt_cfg, &params);
            opt.step(&mut params, &grads);
            if loss_at(&params) < base_loss {
                found = true;
                break;
            }
        }
        assert!(found, "no tested learning rate decreased the loss");
    }

    #[test]
    fn checkpoint_roundtrip_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = toy_cfg(6);
        let params = ModelParams::init(&cfg).unwrap();
        let p = dir.path().join("model.ckpt");
        save_checkpoint(&params, &cfg, &p).unwrap();
        let back = load_checkpoint(&p, &cfg).unwrap();
        let mut a = Vec::new();
        params.for_each(&mut |name, t| a.push((name, t.clone())));
        let mut b = Vec::new();
        back.for_each(&mut |name, t| b.push((name, t.clone())));
        assert_eq!(a.len(), b.len());
        for ((na, ta), (nb, tb)) in a.iter().zip(&b) {
            assert_eq!(na, nb);
            for (x, y) in ta.iter().zip(tb.iter()) {
                assert_eq!(x.to_bits(), y.to_bits(), "tensor {na}");
            }
        }
    }

    #[test]
    fn checkpoint_fingerprint_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = toy_cfg(7);
        let params = ModelParams::init(&cfg).unwrap();
        let p = dir.path().join("model.ckpt");
        save_checkpoint(&params, &cfg, &p).unwrap();
        let mut other = cfg.clone();
        other.experts_k = 4;
        other.top_k = 2;
        assert!(matches!(load_checkpoint(&p, &other), Err(Error::Compat(_))));
    }

    #[test]
    fn corrupted_checkpoint_is_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = toy_cfg(8);
        let params = ModelParams::init(&cfg).unwrap();
        let p = dir.path().join("model.ckpt");
        save_checkpoint(&params, &cfg, &p).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        bytes.truncate(bytes.len() / 2);
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(
            load_checkpoint(&p, &cfg),
            Err(Error::Parse { .. })
        ));
        let garbage = dir.path().join("garbage.ckpt");
        std::fs::write(&garbage, b"not a checkpoint at all").unwrap();
        assert!(matches!(
            load_checkpoint(&garbage, &cfg),
            Err(Error::Parse { .. })
        ));
    }

    #[test]
    fn mutated_checkpoints_always_fail_cleanly() {
        // any single-byte flip or truncation is rejected (digest or format),
        // and none of them may panic
        let dir = tempfile::tempdir().unwrap();
        let cfg = toy_cfg(9);
        let params = ModelParams::init(&cfg).unwrap();
        let p = dir.path().join("model.ckpt");
        save_checkpoint(&params, &cfg, &p).unwrap();
        let pristine = std::fs::read(&p).unwrap();
        let mutated = dir.path().join("mutated.ckpt");
        let mut rng = seeded::rng(0xf422);
        for case in 0..200 {
            let mut bytes = pristine.clone();
            if case % 2 == 0 {
                let at = seeded::uniform_index(&mut rng, bytes.len());
                bytes[at] ^= 1 << seeded::uniform_index(&mut rng, 8);
            } else {
                let keep = seeded::uniform_index(&mut rng, bytes.len());
                bytes.truncate(keep);
            }
            if bytes == pristine {
                continue;
            }
            std::fs::write(&mutated, &bytes).unwrap();
            let err =
                load_checkpoint(&mutated, &cfg).expect_err("mutated checkpoint must not load");
            assert!(
                matches!(err, Error::Parse { .. } | Error::Compat(_)),
                "unexpected error class: {err}"
            );
        }
    }

    #[test]
    fn full_lattice_has_500_combinations() {
        let base = RunConfig::with_seed(1);
        let space = GridSpace::full_lattice();
        assert_eq!(space.enumerate(&base).len(), 500);
    }

    #[test]
    fn grid_space_validates_membership() {
        let mut space = GridSpace::full_lattice();
        space.embed_dim = vec![47];
        assert!(space.validate().is_err());
        let mut space = GridSpace::full_lattice();
        space.learning_rate = vec![0.0];
        assert!(space.validate().is_err());
    }

    fn tiny_grid_space() -> GridSpace {
        GridSpace {
            experts_k: vec![2],
            top_k: vec![1],
            embed_dim: vec![48],
            max_text_len: vec![20],
            learning_rate: vec![3e-3],
        }
    }

    #[test]
    fn grid_singleton_space_single_row() {
        let dir = tempfile::tempdir().unwrap();
        let task = synth::toy_task(dir.path(), 3, 9).unwrap();
        let mut base = toy_cfg(9);
        base.epochs = 1;
        base.native_dim = 16;
        let enc = ToyEncoder::new(base.native_dim, base.num_patches, base.seed);
        let data = TrainData {
            train: &task.train,
            valid: &task.valid,
            catalog: &task.catalog,
        };
        let (best, leaderboard) = grid_search(&tiny_grid_space(), 10, &base, &data, &enc).unwrap();
        assert_eq!(leaderboard.len(), 1);
        assert_eq!(best.embed_dim, 48);
        assert!(leaderboard[0].val_mrr.is_some());
    }

    #[test]
    fn grid_tie_break_keeps_serialization_order() {
        let dir = tempfile::tempdir().unwrap();
        let task = synth::toy_task(dir.path(), 3, 10).unwrap();
        let mut base = toy_cfg(10);
        base.epochs = 2;
        base.native_dim = 16;
        let enc = ToyEncoder::new(base.native_dim, base.num_patches, base.seed);
        let data = TrainData {
            train: &task.train,
            valid: &task.valid,
            catalog: &task.catalog,
        };
        let mut space = tiny_grid_space();
        space.max_text_len = vec![20, 30]; // ample for the tiny contexts: same results
        let (best, leaderboard) = grid_search(&space, 10, &base, &data, &enc).unwrap();
        assert_eq!(leaderboard.len(), 2);
        if leaderboard[0].val_mrr == leaderboard[1].val_mrr {
            assert_eq!(best.max_text_len, 20, "tie must keep serialization order");
        }
    }

    #[test]
    fn grid_records_candidate_failures() {
        let dir = tempfile::tempdir().unwrap();
        let task = synth::toy_task(dir.path(), 3, 11).unwrap();
        let mut base = toy_cfg(11);
        base.epochs = 1;
        base.native_dim = 16;
        let enc = ToyEncoder::new(base.native_dim, base.num_patches, base.seed);
        let data = TrainData {
            train: &task.train,
            valid: &task.valid,
            catalog: &task.catalog,
        };
        let mut space = tiny_grid_space();
        space.experts_k = vec![2];
        space.top_k = vec![1, 3]; // k=3 > K=2 must fail but not abort
        let (_, leaderboard) = grid_search(&space, 10, &base, &data, &enc).unwrap();
        assert_eq!(leaderboard.len(), 2);
        assert!(leaderboard.iter().any(|o| o.error.is_some()));
        assert!(leaderboard.iter().any(|o| o.val_mrr.is_some()));
    }
}
