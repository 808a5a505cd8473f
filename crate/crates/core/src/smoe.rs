//! Switch mixture-of-experts layer: fuse coarse+fine features into one token
//! stack, route every token sparsely to k of K expert feed-forward networks,
//! recombine, and split back into coarse and fine parts.
//!
//! Routing softmax runs over all K experts; the top-k slice is renormalized
//! to sum to one. Selection is detached from the gradient, gate weights are
//! not. Ties in the top-k break toward the lowest expert index.

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::seeded;

/// Two affine maps with a GELU between. Serves both as an expert FFN and as
/// the row-wise fuse MLP.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub w1: Array2<f64>,
    pub b1: Array2<f64>,
    pub w2: Array2<f64>,
    pub b2: Array2<f64>,
}

impl Mlp {
    pub fn init(in_dim: usize, hidden: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let s1 = 1.0 / (in_dim as f64).sqrt();
        let s2 = 1.0 / (hidden as f64).sqrt();
        Mlp {
            w1: Array2::from_shape_fn((in_dim, hidden), |_| seeded::uniform_sym(rng, s1)),
            b1: Array2::zeros((1, hidden)),
            w2: Array2::from_shape_fn((hidden, out_dim), |_| seeded::uniform_sym(rng, s2)),
            b2: Array2::zeros((1, out_dim)),
        }
    }

    /// Exact identity map: x -> gelu(x) - gelu(-x) == x, hidden width 2*dim.
    pub fn identity(dim: usize) -> Self {
        let mut w1 = Array2::zeros((dim, 2 * dim));
        let mut w2 = Array2::zeros((2 * dim, dim));
        for i in 0..dim {
            w1[[i, i]] = 1.0;
            w1[[i, dim + i]] = -1.0;
            w2[[i, i]] = 1.0;
            w2[[dim + i, i]] = -1.0;
        }
        Mlp {
            w1,
            b1: Array2::zeros((1, 2 * dim)),
            w2,
            b2: Array2::zeros((1, dim)),
        }
    }

    /// Exact negation map: x -> -x.
    pub fn negation(dim: usize) -> Self {
        let mut mlp = Self::identity(dim);
        mlp.w2.mapv_inplace(|v| -v);
        mlp
    }

    pub fn in_dim(&self) -> usize {
        self.w1.nrows()
    }

    pub fn out_dim(&self) -> usize {
        self.w2.ncols()
    }

    pub fn param_count(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    pub fn register(&self, g: &mut Graph) -> MlpNodes {
        MlpNodes {
            w1: g.param(self.w1.clone()),
            b1: g.param(self.b1.clone()),
            w2: g.param(self.w2.clone()),
            b2: g.param(self.b2.clone()),
        }
    }

    pub fn for_each(&self, prefix: &str, f: &mut dyn FnMut(String, &Array2<f64>)) {
        f(format!("{prefix}.w1"), &self.w1);
        f(format!("{prefix}.b1"), &self.b1);
        f(format!("{prefix}.w2"), &self.w2);
        f(format!("{prefix}.b2"), &self.b2);
    }

    pub fn for_each_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Array2<f64>)) {
        f(format!("{prefix}.w1"), &mut self.w1);
        f(format!("{prefix}.b1"), &mut self.b1);
        f(format!("{prefix}.w2"), &mut self.w2);
        f(format!("{prefix}.b2"), &mut self.b2);
    }
}

#[derive(Debug, Clone, Copy)]
pub struct MlpNodes {
    pub w1: NodeId,
    pub b1: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
}

/// One routed layer: router weights plus K independently parameterized
/// expert FFNs, of which the top `top_k` fire per token.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoeLayerState {
    pub router: Array2<f64>, // d x K
    pub experts: Vec<Mlp>,
    pub top_k: usize,
}

impl SmoeLayerState {
    pub fn init(
        dim: usize,
        num_experts: usize,
        top_k: usize,
        hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if num_experts == 0 || top_k == 0 || top_k > num_experts {
            return Err(Error::Argument(format!(
                "need 1 <= k <= K, got k={top_k} K={num_experts}"
            )));
        }
        let scale = 1.0 / (dim as f64).sqrt();
        Ok(SmoeLayerState {
            router: Array2::from_shape_fn((dim, num_experts), |_| seeded::uniform_sym(rng, scale)),
            experts: (0..num_experts)
                .map(|_| Mlp::init(dim, hidden, dim, rng))
                .collect(),
            top_k,
        })
    }

    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn dim(&self) -> usize {
        self.router.nrows()
    }

    pub fn param_count(&self) -> usize {
        self.router.len() + self.experts.iter().map(Mlp::param_count).sum::<usize>()
    }

    pub fn register(&self, g: &mut Graph) -> SmoeLayerNodes {
        SmoeLayerNodes {
            router: g.param(self.router.clone()),
            experts: self.experts.iter().map(|e| e.register(g)).collect(),
            top_k: self.top_k,
        }
    }

    pub fn for_each(&self, prefix: &str, f: &mut dyn FnMut(String, &Array2<f64>)) {
        f(format!("{prefix}.router"), &self.router);
        for (i, e) in self.experts.iter().enumerate() {
            e.for_each(&format!("{prefix}.expert{i}"), f);
        }
    }

    pub fn for_each_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Array2<f64>)) {
        f(format!("{prefix}.router"), &mut self.router);
        for (i, e) in self.experts.iter_mut().enumerate() {
            e.for_each_mut(&format!("{prefix}.expert{i}"), f);
        }
    }
}

#[derive(Debug, Clone)]
pub struct SmoeLayerNodes {
    pub router: NodeId,
    pub experts: Vec<MlpNodes>,
    pub top_k: usize,
}

/// A full SMoE instance: the fuse MLP followed by one or more routed layers.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoeStack {
    pub fuse: Mlp,
    pub layers: Vec<SmoeLayerState>,
}

impl SmoeStack {
    pub fn init(
        dim: usize,
        num_experts: usize,
        top_k: usize,
        num_layers: usize,
        expert_hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if num_layers == 0 {
            return Err(Error::Argument("need at least one layer".into()));
        }
        let layers = (0..num_layers)
            .map(|_| SmoeLayerState::init(dim, num_experts, top_k, expert_hidden, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(SmoeStack {
            fuse: Mlp::init(dim, dim, dim, rng),
            layers,
        })
    }

    /// All-identity stack: fuse and every expert are exact identity maps, so
    /// fuse -> forward -> split is the identity regardless of routing.
    pub fn identity(dim: usize, num_experts: usize, top_k: usize) -> Result<Self> {
        if num_experts == 0 || top_k == 0 || top_k > num_experts {
            return Err(Error::Argument(format!(
                "need 1 <= k <= K, got k={top_k} K={num_experts}"
            )));
        }
        Ok(SmoeStack {
            fuse: Mlp::identity(dim),
            layers: vec![SmoeLayerState {
                router: Array2::zeros((dim, num_experts)),
                experts: (0..num_experts).map(|_| Mlp::identity(dim)).collect(),
                top_k,
            }],
        })
    }

    pub fn dim(&self) -> usize {
        self.layers[0].dim()
    }

    pub fn param_count(&self) -> usize {
        self.fuse.param_count()
            + self
                .layers
                .iter()
                .map(SmoeLayerState::param_count)
                .sum::<usize>()
    }

    pub fn register(&self, g: &mut Graph) -> SmoeStackNodes {
        SmoeStackNodes {
            fuse: self.fuse.register(g),
            layers: self.layers.iter().map(|l| l.register(g)).collect(),
        }
    }

    pub fn for_each(&self, prefix: &str, f: &mut dyn FnMut(String, &Array2<f64>)) {
        self.fuse.for_each(&format!("{prefix}.fuse"), f);
        for (i, l) in self.layers.iter().enumerate() {
            l.for_each(&format!("{prefix}.layer{i}"), f);
        }
    }

    pub fn for_each_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Array2<f64>)) {
        self.fuse.for_each_mut(&format!("{prefix}.fuse"), f);
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.for_each_mut(&format!("{prefix}.layer{i}"), f);
        }
    }
}

#[derive(Debug, Clone)]
pub struct SmoeStackNodes {
    pub fuse: MlpNodes,
    pub layers: Vec<SmoeLayerNodes>,
}

/// Full-K gate for one token: softmax weights plus the selected expert set.
#[derive(Debug, Clone, PartialEq)]
pub struct GateVector {
    pub weights: Vec<f64>,
    /// The min(k, K) largest-weight indices, ties broken toward lower index.
    pub selected: Vec<usize>,
}

/// Expert selections per layer, per token row. Captured from a forward pass
/// and replayed to hold routing fixed (gradient checks).
pub type RoutingPlan = Vec<Vec<Vec<usize>>>;

/// Per-layer, per-expert FFN invocation counts.
pub type ExpertCalls = Vec<Vec<usize>>;

fn top_k_indices(weights: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..weights.len()).collect();
    // stable sort keeps ascending index order among exact ties
    idx.sort_by(|&a, &b| {
        weights[b]
            .partial_cmp(&weights[a])
            .expect("finite gate weights")
    });
    idx.truncate(k.min(weights.len()));
    idx
}

/// x -> gelu(x W1 + b1) W2 + b2 on the tape.
pub fn build_mlp(g: &mut Graph, x: NodeId, mlp: &MlpNodes) -> NodeId {
    let h = g.matmul(x, mlp.w1);
    let h = g.add_bias(h, mlp.b1);
    let h = g.gelu(h);
    let out = g.matmul(h, mlp.w2);
    g.add_bias(out, mlp.b2)
}

/// Append the coarse vector as one extra token row and apply the row-wise
/// fuse MLP. Returns the fused node and the coarse row's slot.
pub fn build_fuse(
    g: &mut Graph,
    fine: NodeId,
    coarse: NodeId,
    fuse_mlp: &MlpNodes,
) -> (NodeId, usize) {
    let stacked = g.concat_rows(&[fine, coarse]);
    let coarse_slot = g.shape(stacked).0 - 1;
    (build_mlp(g, stacked, fuse_mlp), coarse_slot)
}

/// One routed layer over every row of `p`. Selection comes from the layer's
/// own gates unless `plan` pins it. `calls` (when given) is incremented at
/// the single point where an expert FFN is evaluated.
fn build_layer(
    g: &mut Graph,
    p: NodeId,
    layer: &SmoeLayerNodes,
    plan: Option<&[Vec<usize>]>,
    mut calls: Option<&mut Vec<usize>>,
    used: &mut Vec<Vec<usize>>,
) -> NodeId {
    let rows = g.shape(p).0;
    let k_total = layer.experts.len();
    let mut out_rows = Vec::with_capacity(rows);
    for r in 0..rows {
        let token = g.slice_rows(p, r, r + 1);
        let logits = g.matmul(token, layer.router);
        let gate = g.row_softmax(logits, &vec![true; k_total]);
        let selected: Vec<usize> = match plan {
            Some(rows_plan) => rows_plan[r].clone(),
            None => {
                let weights: Vec<f64> = g.value(gate).row(0).to_vec();
                top_k_indices(&weights, layer.top_k)
            }
        };
        let gathered: Vec<NodeId> = selected.iter().map(|&i| g.gather_col(gate, i)).collect();
        let sel_row = g.concat_cols(&gathered);
        let denom = g.sum_all(sel_row);
        let mut combined: Option<NodeId> = None;
        for (slot, &expert_idx) in selected.iter().enumerate() {
            let weight = g.div(gathered[slot], denom);
            if let Some(counts) = calls.as_deref_mut() {
                counts[expert_idx] += 1;
            }
            let expert_out = build_mlp(g, token, &layer.experts[expert_idx]);
            let contrib = g.mul_scalar(expert_out, weight);
            combined = Some(match combined {
                Some(acc) => g.add(acc, contrib),
                None => contrib,
            });
        }
        out_rows.push(combined.expect("top_k >= 1"));
        used.push(selected);
    }
    g.concat_rows(&out_rows)
}

pub struct StackRun {
    pub output: NodeId,
    /// Selections actually used, replayable as a plan.
    pub routing: RoutingPlan,
}

/// Forward through every layer of a stack. `plan` replays fixed selections;
/// `calls` (shape: layers x experts, pre-sized or empty) counts expert
/// evaluations.
pub fn build_stack_forward(
    g: &mut Graph,
    p: NodeId,
    stack: &SmoeStackNodes,
    plan: Option<&RoutingPlan>,
    mut calls: Option<&mut ExpertCalls>,
) -> Result<StackRun> {
    if !g.value(p).iter().all(|v| v.is_finite()) {
        return Err(Error::Numeric(
            "non-finite values entering expert routing".into(),
        ));
    }
    if let Some(c) = calls.as_deref_mut() {
        c.clear();
        for layer in &stack.layers {
            c.push(vec![0; layer.experts.len()]);
        }
    }
    let mut routing = RoutingPlan::with_capacity(stack.layers.len());
    let mut current = p;
    for (li, layer) in stack.layers.iter().enumerate() {
        let mut used = Vec::new();
        let layer_calls = calls.as_deref_mut().map(|c| &mut c[li]);
        current = build_layer(
            g,
            current,
            layer,
            plan.map(|pl| pl[li].as_slice()),
            layer_calls,
            &mut used,
        );
        routing.push(used);
    }
    Ok(StackRun {
        output: current,
        routing,
    })
}

/// Take the coarse-slot row out of `q`; remaining rows keep their order.
pub fn build_split(g: &mut Graph, q: NodeId, coarse_slot: usize) -> (NodeId, NodeId) {
    let rows = g.shape(q).0;
    assert!(
        coarse_slot < rows,
        "coarse slot {coarse_slot} out of {rows} rows"
    );
    let coarse = g.slice_rows(q, coarse_slot, coarse_slot + 1);
    let fine = if coarse_slot == rows - 1 {
        g.slice_rows(q, 0, coarse_slot)
    } else if coarse_slot == 0 {
        g.slice_rows(q, 1, rows)
    } else {
        let before = g.slice_rows(q, 0, coarse_slot);
        let after = g.slice_rows(q, coarse_slot + 1, rows);
        g.concat_rows(&[before, after])
    };
    (coarse, fine)
}

// ---- plain (array-level) entry points; each one evaluates the same graph
// ---- construction the model uses, so there is a single formula source.

/// Fusion feature: coarse appended as the last row, then the row-wise MLP.
pub fn fuse(
    fine: &Array2<f64>,
    coarse: &Array2<f64>,
    fuse_mlp: &Mlp,
) -> Result<(Array2<f64>, usize)> {
    if coarse.nrows() != 1 || coarse.ncols() != fine.ncols() {
        return Err(Error::Shape(format!(
            "coarse {:?} does not match fine {:?}",
            coarse.dim(),
            fine.dim()
        )));
    }
    if fuse_mlp.in_dim() != fine.ncols() || fuse_mlp.out_dim() != fine.ncols() {
        return Err(Error::Shape(format!(
            "fuse MLP maps {}->{}, features have dim {}",
            fuse_mlp.in_dim(),
            fuse_mlp.out_dim(),
            fine.ncols()
        )));
    }
    let mut g = Graph::new();
    let fine_n = g.constant(fine.clone());
    let coarse_n = g.constant(coarse.clone());
    let mlp_n = fuse_mlp.register(&mut g);
    let (p, slot) = build_fuse(&mut g, fine_n, coarse_n, &mlp_n);
    Ok((g.value(p).clone(), slot))
}

/// Full-K softmax gate for one token, with top-k selection.
pub fn route(token: &Array2<f64>, layer: &SmoeLayerState) -> Result<GateVector> {
    if token.nrows() != 1 || token.ncols() != layer.dim() {
        return Err(Error::Shape(format!(
            "token {:?} incompatible with router {:?}",
            token.dim(),
            layer.router.dim()
        )));
    }
    if !token.iter().all(|v| v.is_finite()) {
        return Err(Error::Numeric("non-finite token values".into()));
    }
    let mut g = Graph::new();
    let t = g.constant(token.clone());
    let r = g.constant(layer.router.clone());
    let logits = g.matmul(t, r);
    let gate = g.row_softmax(logits, &vec![true; layer.num_experts()]);
    let weights: Vec<f64> = g.value(gate).row(0).to_vec();
    let selected = top_k_indices(&weights, layer.top_k);
    Ok(GateVector { weights, selected })
}

/// Route-and-combine every row of `p` through the stack's layers (no fuse).
pub fn smoe_forward(p: &Array2<f64>, stack: &SmoeStack) -> Result<Array2<f64>> {
    smoe_forward_counted(p, stack, None)
}

/// Same as [`smoe_forward`], optionally counting expert FFN evaluations.
pub fn smoe_forward_counted(
    p: &Array2<f64>,
    stack: &SmoeStack,
    calls: Option<&mut ExpertCalls>,
) -> Result<Array2<f64>> {
    if p.ncols() != stack.dim() {
        return Err(Error::Shape(format!(
            "tokens have dim {}, stack expects {}",
            p.ncols(),
            stack.dim()
        )));
    }
    let mut g = Graph::new();
    let p_n = g.constant(p.clone());
    let nodes = stack.register(&mut g);
    let run = build_stack_forward(&mut g, p_n, &nodes, None, calls)?;
    Ok(g.value(run.output).clone())
}

/// Split `q` into its coarse-slot row and the remaining fine rows.
pub fn split(q: &Array2<f64>, coarse_slot: usize) -> Result<(Array2<f64>, Array2<f64>)> {
    if coarse_slot >= q.nrows() || q.nrows() < 2 {
        return Err(Error::Shape(format!(
            "coarse slot {coarse_slot} invalid for {} rows",
            q.nrows()
        )));
    }
    let mut g = Graph::new();
    let q_n = g.constant(q.clone());
    let (c, f) = build_split(&mut g, q_n, coarse_slot);
    Ok((g.value(c).clone(), g.value(f).clone()))
}
