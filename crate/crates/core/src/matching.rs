//! Mention-entity scoring: coarse dot products, fine-grained attention
//! matching within a modality, gated cross-modal fusion, and the assembled
//! per-pair score set.
//!
//! Attention reads query-key similarity as `M K^T / sqrt(d)` with the
//! softmax over mention tokens (padding masked out), and the aggregate is a
//! masked mean over entity tokens, which is the only reading under which the
//! final dot product with the entity summary type-checks.

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;

use crate::encoders::FeatureBundle;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::model::{EncodedObject, ModelNodes, ModelParams};
use crate::seeded;
use crate::smoe::{build_fuse, build_split, build_stack_forward, SmoeStack, SmoeStackNodes};

/// Query/key/value projections for one modality's fine-grained matcher.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub w_q: Array2<f64>,
    pub w_k: Array2<f64>,
    pub w_v: Array2<f64>,
}

impl AttentionParams {
    pub fn init(dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let s = 1.0 / (dim as f64).sqrt();
        let mk = |rng: &mut ChaCha8Rng| {
            Array2::from_shape_fn((dim, dim), |_| seeded::uniform_sym(rng, s))
        };
        AttentionParams {
            w_q: mk(rng),
            w_k: mk(rng),
            w_v: mk(rng),
        }
    }

    pub fn identity(dim: usize) -> Self {
        AttentionParams {
            w_q: Array2::eye(dim),
            w_k: Array2::eye(dim),
            w_v: Array2::eye(dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.w_q.nrows()
    }

    pub fn param_count(&self) -> usize {
        self.w_q.len() + self.w_k.len() + self.w_v.len()
    }

    pub fn register(&self, g: &mut Graph) -> AttentionNodes {
        AttentionNodes {
            w_q: g.param(self.w_q.clone()),
            w_k: g.param(self.w_k.clone()),
            w_v: g.param(self.w_v.clone()),
        }
    }

    pub fn for_each(&self, prefix: &str, f: &mut dyn FnMut(String, &Array2<f64>)) {
        f(format!("{prefix}.wq"), &self.w_q);
        f(format!("{prefix}.wk"), &self.w_k);
        f(format!("{prefix}.wv"), &self.w_v);
    }

    pub fn for_each_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Array2<f64>)) {
        f(format!("{prefix}.wq"), &mut self.w_q);
        f(format!("{prefix}.wk"), &mut self.w_k);
        f(format!("{prefix}.wv"), &mut self.w_v);
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionNodes {
    pub w_q: NodeId,
    pub w_k: NodeId,
    pub w_v: NodeId,
}

impl AttentionNodes {
    pub fn collect_ids(&self, prefix: &str, out: &mut Vec<(String, NodeId)>) {
        out.push((format!("{prefix}.wq"), self.w_q));
        out.push((format!("{prefix}.wk"), self.w_k));
        out.push((format!("{prefix}.wv"), self.w_v));
    }
}

/// Learnable affine layer norm (epsilon fixed at 1e-5).
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub gamma: Array2<f64>,
    pub beta: Array2<f64>,
}

impl LayerNormParams {
    pub fn init(dim: usize) -> Self {
        LayerNormParams {
            gamma: Array2::ones((1, dim)),
            beta: Array2::zeros((1, dim)),
        }
    }

    pub fn param_count(&self) -> usize {
        self.gamma.len() + self.beta.len()
    }

    pub fn register(&self, g: &mut Graph) -> LayerNormNodes {
        LayerNormNodes {
            gamma: g.param(self.gamma.clone()),
            beta: g.param(self.beta.clone()),
        }
    }

    pub fn for_each(&self, prefix: &str, f: &mut dyn FnMut(String, &Array2<f64>)) {
        f(format!("{prefix}.gamma"), &self.gamma);
        f(format!("{prefix}.beta"), &self.beta);
    }

    pub fn for_each_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Array2<f64>)) {
        f(format!("{prefix}.gamma"), &mut self.gamma);
        f(format!("{prefix}.beta"), &mut self.beta);
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNormNodes {
    pub gamma: NodeId,
    pub beta: NodeId,
}

impl LayerNormNodes {
    pub fn collect_ids(&self, prefix: &str, out: &mut Vec<(String, NodeId)>) {
        out.push((format!("{prefix}.gamma"), self.gamma));
        out.push((format!("{prefix}.beta"), self.beta));
    }
}

/// Which scoring modules are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Channels {
    pub intra_text: bool,
    pub intra_visual: bool,
    pub inter: bool,
}

impl Channels {
    pub fn all() -> Self {
        Channels {
            intra_text: true,
            intra_visual: true,
            inter: true,
        }
    }

    pub fn from_config(cfg: &crate::config::RunConfig) -> Self {
        Channels {
            intra_text: cfg.use_intra_text,
            intra_visual: cfg.use_intra_visual,
            inter: cfg.use_inter,
        }
    }
}

/// Sub-scores feeding the per-channel averages.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ScoreComponents {
    pub cm_t: f64,
    pub fm_t: f64,
    pub cm_v: f64,
    pub fm_v: f64,
    pub tvm: f64,
    pub vtm: f64,
}

/// All scores for one mention-entity pair. Disabled channels hold 0, so
/// `s_o == s_t + s_v + s_c` holds whatever the toggle set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreSet {
    pub s_t: f64,
    pub s_v: f64,
    pub s_c: f64,
    pub s_o: f64,
    pub components: ScoreComponents,
    pub channels: Channels,
    /// True when a fine matcher saw an all-padding side and returned 0.
    pub degenerate_fine: bool,
}

// ---- graph builders -------------------------------------------------------

/// Constant-loaded feature bundle on the tape.
pub struct BundleNodes {
    pub coarse: NodeId,
    pub fine: NodeId,
    pub mask: Vec<bool>,
}

pub fn load_bundle(g: &mut Graph, bundle: &FeatureBundle) -> BundleNodes {
    BundleNodes {
        coarse: g.constant(bundle.coarse.clone()),
        fine: g.constant(bundle.fine.clone()),
        mask: bundle.mask.clone(),
    }
}

/// Project a loaded bundle into the model dimension.
pub fn project_bundle(g: &mut Graph, b: &BundleNodes, proj: NodeId) -> BundleNodes {
    BundleNodes {
        coarse: g.matmul(b.coarse, proj),
        fine: g.matmul(b.fine, proj),
        mask: b.mask.clone(),
    }
}

/// Coarse matching: plain dot product of the two summary vectors.
pub fn build_coarse_match(g: &mut Graph, h_e: NodeId, h_m: NodeId) -> NodeId {
    g.dot(h_e, h_m)
}

/// Fine matching: entity tokens attend over mention tokens, the attended
/// values are averaged over real entity tokens, and the aggregate is dotted
/// with the entity summary. Returns None when either side is all padding.
pub fn build_fine_match(
    g: &mut Graph,
    h_e: NodeId,
    fine_e: NodeId,
    mask_e: &[bool],
    fine_m: NodeId,
    mask_m: &[bool],
    attn: &AttentionNodes,
) -> Option<NodeId> {
    if !mask_m.iter().any(|&m| m) || !mask_e.iter().any(|&m| m) {
        return None; // no valid keys or no valid queries
    }
    let d = g.shape(h_e).1 as f64;
    let m = g.matmul(fine_e, attn.w_q);
    let k = g.matmul(fine_m, attn.w_k);
    let v = g.matmul(fine_m, attn.w_v);
    let kt = g.transpose(k);
    let x = g.matmul(m, kt);
    let x = g.scale(x, 1.0 / d.sqrt());
    let a = g.row_softmax(x, mask_m);
    let av = g.matmul(a, v);
    let aggregate = g.masked_mean_rows(av, mask_e);
    Some(g.dot(h_e, aggregate))
}

/// Gated cross-modal fusion: `LayerNorm(tanh(h) * h + attention(h -> fine))`.
/// With an all-padding fine side the attention term is zero.
pub fn build_gated_fuse(
    g: &mut Graph,
    h_text: NodeId,
    fine: NodeId,
    fine_mask: &[bool],
    ln: &LayerNormNodes,
) -> NodeId {
    let h_star = g.tanh(h_text);
    let gated = g.mul(h_star, h_text);
    let pre = if fine_mask.iter().any(|&m| m) {
        let ft = g.transpose(fine);
        let logits = g.matmul(h_text, ft);
        let a = g.row_softmax(logits, fine_mask);
        let attended = g.matmul(a, fine);
        g.add(gated, attended)
    } else {
        gated
    };
    g.layernorm_rows(pre, ln.gamma, ln.beta)
}

fn build_enhance(
    g: &mut Graph,
    bundle: &BundleNodes,
    stack: Option<&SmoeStackNodes>,
) -> Result<(NodeId, NodeId)> {
    match stack {
        Some(stack) => {
            let (p, slot) = build_fuse(g, bundle.fine, bundle.coarse, &stack.fuse);
            let run = build_stack_forward(g, p, stack, None, None)?;
            Ok(build_split(g, run.output, slot))
        }
        None => Ok((bundle.coarse, bundle.fine)),
    }
}

/// Per-object enhanced representations; pair scoring combines two of these.
pub struct ObjectRepr {
    pub text_mask: Vec<bool>,
    pub vis_mask: Vec<bool>,
    pub intra_text: Option<(NodeId, NodeId)>,
    pub intra_visual: Option<(NodeId, NodeId)>,
    pub inter_tvm: Option<NodeId>,
    pub inter_vtm: Option<NodeId>,
}

/// Run every enabled module's object-side computation (SMoE enhancement and
/// cross-modal fusion). The result is reused across all pairs involving the
/// object.
pub fn build_object_repr(
    g: &mut Graph,
    text: &BundleNodes,
    visual: &BundleNodes,
    nodes: &ModelNodes,
    channels: Channels,
) -> Result<ObjectRepr> {
    let mut repr = ObjectRepr {
        text_mask: text.mask.clone(),
        vis_mask: visual.mask.clone(),
        intra_text: None,
        intra_visual: None,
        inter_tvm: None,
        inter_vtm: None,
    };
    if channels.intra_text {
        let it = nodes
            .intra_text
            .as_ref()
            .ok_or_else(|| Error::Argument("intra_text enabled but unparameterized".into()))?;
        repr.intra_text = Some(build_enhance(g, text, it.smoe.as_ref())?);
    }
    if channels.intra_visual {
        let iv = nodes
            .intra_visual
            .as_ref()
            .ok_or_else(|| Error::Argument("intra_visual enabled but unparameterized".into()))?;
        repr.intra_visual = Some(build_enhance(g, visual, iv.smoe.as_ref())?);
    }
    if channels.inter {
        let inter = nodes
            .inter
            .as_ref()
            .ok_or_else(|| Error::Argument("inter enabled but unparameterized".into()))?;
        // text summary gates visual patches
        let tvm_in = BundleNodes {
            coarse: text.coarse,
            fine: visual.fine,
            mask: visual.mask.clone(),
        };
        let (h_t, fine_v) = build_enhance(g, &tvm_in, inter.smoe_tvm.as_ref())?;
        repr.inter_tvm = Some(build_gated_fuse(
            g,
            h_t,
            fine_v,
            &visual.mask,
            &inter.ln_tvm,
        ));
        // visual summary gates text tokens
        let vtm_in = BundleNodes {
            coarse: visual.coarse,
            fine: text.fine,
            mask: text.mask.clone(),
        };
        let (h_v, fine_t) = build_enhance(g, &vtm_in, inter.smoe_vtm.as_ref())?;
        repr.inter_vtm = Some(build_gated_fuse(g, h_v, fine_t, &text.mask, &inter.ln_vtm));
    }
    Ok(repr)
}

/// Score nodes for one pair; disabled channels are absent.
pub struct PairScores {
    pub cm_t: Option<NodeId>,
    pub fm_t: Option<NodeId>,
    pub s_t: Option<NodeId>,
    pub cm_v: Option<NodeId>,
    pub fm_v: Option<NodeId>,
    pub s_v: Option<NodeId>,
    pub tvm: Option<NodeId>,
    pub vtm: Option<NodeId>,
    pub s_c: Option<NodeId>,
    pub s_o: NodeId,
    pub degenerate_fine: bool,
}

/// Pairwise scoring of a mention repr against an entity repr.
pub fn build_pair_scores(
    g: &mut Graph,
    mention: &ObjectRepr,
    entity: &ObjectRepr,
    nodes: &ModelNodes,
    channels: Channels,
) -> Result<PairScores> {
    let mut out = PairScores {
        cm_t: None,
        fm_t: None,
        s_t: None,
        cm_v: None,
        fm_v: None,
        s_v: None,
        tvm: None,
        vtm: None,
        s_c: None,
        s_o: g.scalar_const(0.0),
        degenerate_fine: false,
    };
    let mut total: Option<NodeId> = None;
    let add_to_total = |g: &mut Graph, total: &mut Option<NodeId>, s: NodeId| {
        *total = Some(match *total {
            Some(t) => g.add(t, s),
            None => s,
        });
    };

    if channels.intra_text {
        let attn = &nodes
            .intra_text
            .as_ref()
            .expect("checked by object repr")
            .attn;
        let (h_m, fine_m) = mention.intra_text.expect("mention text repr");
        let (h_e, fine_e) = entity.intra_text.expect("entity text repr");
        let cm = build_coarse_match(g, h_e, h_m);
        let fm = match build_fine_match(
            g,
            h_e,
            fine_e,
            &entity.text_mask,
            fine_m,
            &mention.text_mask,
            attn,
        ) {
            Some(n) => n,
            None => {
                out.degenerate_fine = true;
                g.scalar_const(0.0)
            }
        };
        let sum = g.add(cm, fm);
        let s = g.scale(sum, 0.5);
        out.cm_t = Some(cm);
        out.fm_t = Some(fm);
        out.s_t = Some(s);
        add_to_total(g, &mut total, s);
    }
    if channels.intra_visual {
        let attn = &nodes
            .intra_visual
            .as_ref()
            .expect("checked by object repr")
            .attn;
        let (h_m, fine_m) = mention.intra_visual.expect("mention visual repr");
        let (h_e, fine_e) = entity.intra_visual.expect("entity visual repr");
        let cm = build_coarse_match(g, h_e, h_m);
        let fm = match build_fine_match(
            g,
            h_e,
            fine_e,
            &entity.vis_mask,
            fine_m,
            &mention.vis_mask,
            attn,
        ) {
            Some(n) => n,
            None => {
                out.degenerate_fine = true;
                g.scalar_const(0.0)
            }
        };
        let sum = g.add(cm, fm);
        let s = g.scale(sum, 0.5);
        out.cm_v = Some(cm);
        out.fm_v = Some(fm);
        out.s_v = Some(s);
        add_to_total(g, &mut total, s);
    }
    if channels.inter {
        let e_m_tvm = mention.inter_tvm.expect("mention tvm repr");
        let e_e_tvm = entity.inter_tvm.expect("entity tvm repr");
        let e_m_vtm = mention.inter_vtm.expect("mention vtm repr");
        let e_e_vtm = entity.inter_vtm.expect("entity vtm repr");
        let tvm = g.dot(e_e_tvm, e_m_tvm);
        let vtm = g.dot(e_e_vtm, e_m_vtm);
        let sum = g.add(tvm, vtm);
        let s = g.scale(sum, 0.5);
        out.tvm = Some(tvm);
        out.vtm = Some(vtm);
        out.s_c = Some(s);
        add_to_total(g, &mut total, s);
    }
    if let Some(t) = total {
        out.s_o = t;
    }
    Ok(out)
}

impl PairScores {
    pub fn to_score_set(&self, g: &Graph, channels: Channels) -> ScoreSet {
        let v = |n: Option<NodeId>| n.map_or(0.0, |id| g.scalar_value(id));
        ScoreSet {
            s_t: v(self.s_t),
            s_v: v(self.s_v),
            s_c: v(self.s_c),
            s_o: g.scalar_value(self.s_o),
            components: ScoreComponents {
                cm_t: v(self.cm_t),
                fm_t: v(self.fm_t),
                cm_v: v(self.cm_v),
                fm_v: v(self.fm_v),
                tvm: v(self.tvm),
                vtm: v(self.vtm),
            },
            channels,
            degenerate_fine: self.degenerate_fine,
        }
    }
}

/// Object reprs for a mention/entity batch plus the all-pairs score nodes.
pub struct BatchScores {
    pub pairs: Vec<Vec<PairScores>>,
}

/// Build the full pairwise score grid for a batch on one tape; object-side
/// work is shared across the row/column.
pub fn build_batch(
    g: &mut Graph,
    mentions: &[EncodedObject],
    entities: &[EncodedObject],
    params: &ModelParams,
    nodes: &ModelNodes,
    channels: Channels,
) -> Result<BatchScores> {
    if mentions.is_empty() || entities.is_empty() {
        return Err(Error::Argument("batch sides must be non-empty".into()));
    }
    let build_side = |g: &mut Graph, objs: &[EncodedObject]| -> Result<Vec<ObjectRepr>> {
        objs.iter()
            .map(|o| {
                crate::model::check_object_dims(o, params)?;
                let text = load_bundle(g, &o.text);
                let visual = load_bundle(g, &o.visual);
                let text = project_bundle(g, &text, nodes.proj_text);
                let visual = project_bundle(g, &visual, nodes.proj_visual);
                build_object_repr(g, &text, &visual, nodes, channels)
            })
            .collect()
    };
    let mention_reprs = build_side(g, mentions)?;
    let entity_reprs = build_side(g, entities)?;
    let mut pairs = Vec::with_capacity(mentions.len());
    for m in &mention_reprs {
        let mut row = Vec::with_capacity(entities.len());
        for e in &entity_reprs {
            row.push(build_pair_scores(g, m, e, nodes, channels)?);
        }
        pairs.push(row);
    }
    Ok(BatchScores { pairs })
}

// ---- plain (array-level) entry points --------------------------------------

/// Dot product of two summary vectors.
pub fn coarse_match(h_e: &Array2<f64>, h_m: &Array2<f64>) -> Result<f64> {
    if h_e.dim() != h_m.dim() || h_e.nrows() != 1 {
        return Err(Error::Shape(format!(
            "coarse_match wants matching 1xd vectors, got {:?} and {:?}",
            h_e.dim(),
            h_m.dim()
        )));
    }
    let mut g = Graph::new();
    let a = g.constant(h_e.clone());
    let b = g.constant(h_m.clone());
    let s = build_coarse_match(&mut g, a, b);
    Ok(g.scalar_value(s))
}

/// Fine-grained attention match; the bool is the degenerate-input flag
/// (all-padding side, score defined as 0).
pub fn fine_match(
    h_e: &Array2<f64>,
    fine_e: &Array2<f64>,
    mask_e: &[bool],
    fine_m: &Array2<f64>,
    mask_m: &[bool],
    attn: &AttentionParams,
) -> Result<(f64, bool)> {
    let d = attn.dim();
    if fine_e.ncols() != d || fine_m.ncols() != d || h_e.ncols() != d || h_e.nrows() != 1 {
        return Err(Error::Shape("fine_match dimension mismatch".into()));
    }
    if mask_e.len() != fine_e.nrows() || mask_m.len() != fine_m.nrows() {
        return Err(Error::Shape("fine_match mask length mismatch".into()));
    }
    let mut g = Graph::new();
    let h = g.constant(h_e.clone());
    let fe = g.constant(fine_e.clone());
    let fm = g.constant(fine_m.clone());
    let an = attn.register(&mut g);
    match build_fine_match(&mut g, h, fe, mask_e, fm, mask_m, &an) {
        Some(score) => Ok((g.scalar_value(score), false)),
        None => Ok((0.0, true)),
    }
}

/// Gated cross-modal fusion of a summary vector with a fine matrix.
pub fn gated_fuse(
    h_text: &Array2<f64>,
    fine: &Array2<f64>,
    fine_mask: &[bool],
    ln: &LayerNormParams,
) -> Result<Array2<f64>> {
    if h_text.nrows() != 1 || h_text.ncols() != fine.ncols() {
        return Err(Error::Shape("gated_fuse dimension mismatch".into()));
    }
    if fine_mask.len() != fine.nrows() {
        return Err(Error::Shape("gated_fuse mask length mismatch".into()));
    }
    let mut g = Graph::new();
    let h = g.constant(h_text.clone());
    let f = g.constant(fine.clone());
    let lnn = ln.register(&mut g);
    let e = build_gated_fuse(&mut g, h, f, fine_mask, &lnn);
    Ok(g.value(e).clone())
}

/// Intra-modal matching of two same-modality bundles (already in model dim):
/// SMoE enhancement on each side, then (coarse, fine, average) scores.
pub fn intra_score(
    mention: &FeatureBundle,
    entity: &FeatureBundle,
    smoe: Option<&SmoeStack>,
    attn: &AttentionParams,
) -> Result<(f64, f64, f64)> {
    if mention.modality != entity.modality {
        return Err(Error::Argument(
            "intra_score needs same-modality bundles".into(),
        ));
    }
    let mut g = Graph::new();
    let m = load_bundle(&mut g, mention);
    let e = load_bundle(&mut g, entity);
    let stack_nodes = smoe.map(|s| s.register(&mut g));
    let (h_m, fine_m) = build_enhance(&mut g, &m, stack_nodes.as_ref())?;
    let (h_e, fine_e) = build_enhance(&mut g, &e, stack_nodes.as_ref())?;
    let an = attn.register(&mut g);
    let cm = build_coarse_match(&mut g, h_e, h_m);
    let fm_node = build_fine_match(
        &mut g,
        h_e,
        fine_e,
        &entity.mask,
        fine_m,
        &mention.mask,
        &an,
    );
    let cm_v = g.scalar_value(cm);
    let fm_v = fm_node.map_or(0.0, |n| g.scalar_value(n));
    Ok((cm_v, fm_v, (cm_v + fm_v) / 2.0))
}

/// Cross-modal matching over both directions; returns (tvm, vtm, average).
#[allow(clippy::too_many_arguments)]
pub fn inter_score(
    m_text: &FeatureBundle,
    m_visual: &FeatureBundle,
    e_text: &FeatureBundle,
    e_visual: &FeatureBundle,
    inter: &crate::model::InterParams,
) -> Result<(f64, f64, f64)> {
    let mut g = Graph::new();
    let tvm_stack = inter.smoe_tvm.as_ref().map(|s| s.register(&mut g));
    let vtm_stack = inter.smoe_vtm.as_ref().map(|s| s.register(&mut g));
    let ln_tvm = inter.ln_tvm.register(&mut g);
    let ln_vtm = inter.ln_vtm.register(&mut g);
    let side =
        |g: &mut Graph, text: &FeatureBundle, visual: &FeatureBundle| -> Result<(NodeId, NodeId)> {
            let t = load_bundle(g, text);
            let v = load_bundle(g, visual);
            let tvm_in = BundleNodes {
                coarse: t.coarse,
                fine: v.fine,
                mask: v.mask.clone(),
            };
            let (h_t, fine_v) = build_enhance(g, &tvm_in, tvm_stack.as_ref())?;
            let e_tvm = build_gated_fuse(g, h_t, fine_v, &visual.mask, &ln_tvm);
            let vtm_in = BundleNodes {
                coarse: v.coarse,
                fine: t.fine,
                mask: t.mask.clone(),
            };
            let (h_v, fine_t) = build_enhance(g, &vtm_in, vtm_stack.as_ref())?;
            let e_vtm = build_gated_fuse(g, h_v, fine_t, &text.mask, &ln_vtm);
            Ok((e_tvm, e_vtm))
        };
    let (m_tvm, m_vtm) = side(&mut g, m_text, m_visual)?;
    let (e_tvm, e_vtm) = side(&mut g, e_text, e_visual)?;
    let tvm = g.dot(e_tvm, m_tvm);
    let vtm = g.dot(e_vtm, m_vtm);
    let tvm_v = g.scalar_value(tvm);
    let vtm_v = g.scalar_value(vtm);
    Ok((tvm_v, vtm_v, (tvm_v + vtm_v) / 2.0))
}

/// All scores for one mention-entity pair under the given toggles.
pub fn score_pair(
    mention: &EncodedObject,
    entity: &EncodedObject,
    params: &ModelParams,
    channels: Channels,
) -> Result<ScoreSet> {
    let grid = score_matrix(
        std::slice::from_ref(mention),
        std::slice::from_ref(entity),
        params,
        channels,
    )?;
    Ok(grid[0][0])
}

/// Pairwise score grid: row i, column j holds mention i against entity j.
pub fn score_matrix(
    mentions: &[EncodedObject],
    entities: &[EncodedObject],
    params: &ModelParams,
    channels: Channels,
) -> Result<Vec<Vec<ScoreSet>>> {
    let mut g = Graph::new();
    let (nodes, _) = params.register(&mut g);
    let batch = build_batch(&mut g, mentions, entities, params, &nodes, channels)?;
    Ok(batch
        .pairs
        .iter()
        .map(|row| row.iter().map(|p| p.to_score_set(&g, channels)).collect())
        .collect())
}
