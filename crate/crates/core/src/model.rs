//! The trainable parameter set and the record-to-features pipeline.
//!
//! Parameters are grouped per module instance: shared projections into the
//! model dimension, one SMoE stack + attention per intra-modal matcher, and
//! two SMoE stacks + layer norms for the cross-modal matcher (one per
//! direction). Disabled modules own no parameters, so ablated variants have
//! honest parameter counts.

use ndarray::Array2;

use crate::config::RunConfig;
use crate::data::{EntityRecord, MentionRecord};
use crate::encoders::{EncoderAdapter, FeatureBundle, Side};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::matching::{AttentionNodes, AttentionParams, LayerNormNodes, LayerNormParams};
use crate::seeded;
use crate::smoe::{SmoeStack, SmoeStackNodes};

/// One intra-modal matcher: optional SMoE enhancement plus its own
/// attention parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct IntraParams {
    pub smoe: Option<SmoeStack>,
    pub attn: AttentionParams,
}

/// The cross-modal matcher: one SMoE stack and layer norm per direction
/// (text-gates-visual and visual-gates-text).
#[derive(Debug, Clone, PartialEq)]
pub struct InterParams {
    pub smoe_tvm: Option<SmoeStack>,
    pub smoe_vtm: Option<SmoeStack>,
    pub ln_tvm: LayerNormParams,
    pub ln_vtm: LayerNormParams,
}

/// Every trainable tensor of the scoring model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub dim: usize,
    pub proj_text: Array2<f64>,
    pub proj_visual: Array2<f64>,
    pub intra_text: Option<IntraParams>,
    pub intra_visual: Option<IntraParams>,
    pub inter: Option<InterParams>,
}

const PARAM_SEED_TAG: u64 = 0x6d656c2d696e6974; // "mel-init"

impl ModelParams {
    /// Seeded initialization matching the config's architecture and toggles.
    pub fn init(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.embed_dim;
        let mut rng = seeded::rng(cfg.seed ^ PARAM_SEED_TAG);
        let proj_scale = 1.0 / (cfg.native_dim as f64).sqrt();
        let proj = |rng: &mut rand_chacha::ChaCha8Rng| {
            Array2::from_shape_fn((cfg.native_dim, d), |_| {
                seeded::uniform_sym(rng, proj_scale)
            })
        };
        let proj_text = proj(&mut rng);
        let proj_visual = proj(&mut rng);
        let stack = |rng: &mut rand_chacha::ChaCha8Rng| -> Result<Option<SmoeStack>> {
            if cfg.use_smoe {
                Ok(Some(SmoeStack::init(
                    d,
                    cfg.experts_k,
                    cfg.top_k,
                    cfg.smoe_layers,
                    cfg.expert_hidden(),
                    rng,
                )?))
            } else {
                Ok(None)
            }
        };
        let intra_text = if cfg.use_intra_text {
            Some(IntraParams {
                smoe: stack(&mut rng)?,
                attn: AttentionParams::init(d, &mut rng),
            })
        } else {
            None
        };
        let intra_visual = if cfg.use_intra_visual {
            Some(IntraParams {
                smoe: stack(&mut rng)?,
                attn: AttentionParams::init(d, &mut rng),
            })
        } else {
            None
        };
        let inter = if cfg.use_inter {
            Some(InterParams {
                smoe_tvm: stack(&mut rng)?,
                smoe_vtm: stack(&mut rng)?,
                ln_tvm: LayerNormParams::init(d),
                ln_vtm: LayerNormParams::init(d),
            })
        } else {
            None
        };
        Ok(ModelParams {
            dim: d,
            proj_text,
            proj_visual,
            intra_text,
            intra_visual,
            inter,
        })
    }

    /// Visit every tensor as (name, tensor), in a fixed order.
    pub fn for_each(&self, f: &mut dyn FnMut(String, &Array2<f64>)) {
        f("proj.text".into(), &self.proj_text);
        f("proj.visual".into(), &self.proj_visual);
        if let Some(it) = &self.intra_text {
            if let Some(s) = &it.smoe {
                s.for_each("intra_text.smoe", f);
            }
            it.attn.for_each("intra_text.attn", f);
        }
        if let Some(iv) = &self.intra_visual {
            if let Some(s) = &iv.smoe {
                s.for_each("intra_visual.smoe", f);
            }
            iv.attn.for_each("intra_visual.attn", f);
        }
        if let Some(inter) = &self.inter {
            if let Some(s) = &inter.smoe_tvm {
                s.for_each("inter.tvm.smoe", f);
            }
            if let Some(s) = &inter.smoe_vtm {
                s.for_each("inter.vtm.smoe", f);
            }
            inter.ln_tvm.for_each("inter.ln_tvm", f);
            inter.ln_vtm.for_each("inter.ln_vtm", f);
        }
    }

    /// Mutable visit; same names and order as [`Self::for_each`].
    pub fn for_each_mut(&mut self, f: &mut dyn FnMut(String, &mut Array2<f64>)) {
        f("proj.text".into(), &mut self.proj_text);
        f("proj.visual".into(), &mut self.proj_visual);
        if let Some(it) = &mut self.intra_text {
            if let Some(s) = &mut it.smoe {
                s.for_each_mut("intra_text.smoe", f);
            }
            it.attn.for_each_mut("intra_text.attn", f);
        }
        if let Some(iv) = &mut self.intra_visual {
            if let Some(s) = &mut iv.smoe {
                s.for_each_mut("intra_visual.smoe", f);
            }
            iv.attn.for_each_mut("intra_visual.attn", f);
        }
        if let Some(inter) = &mut self.inter {
            if let Some(s) = &mut inter.smoe_tvm {
                s.for_each_mut("inter.tvm.smoe", f);
            }
            if let Some(s) = &mut inter.smoe_vtm {
                s.for_each_mut("inter.vtm.smoe", f);
            }
            inter.ln_tvm.for_each_mut("inter.ln_tvm", f);
            inter.ln_vtm.for_each_mut("inter.ln_vtm", f);
        }
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.for_each(&mut |_, t| n += t.len());
        n
    }

    /// Register every tensor on a tape. The second return value pairs each
    /// name with its leaf, in `for_each` order, for gradient extraction.
    pub fn register(&self, g: &mut Graph) -> (ModelNodes, Vec<(String, NodeId)>) {
        let mut order = Vec::new();
        let nodes = ModelNodes {
            proj_text: g.param(self.proj_text.clone()),
            proj_visual: g.param(self.proj_visual.clone()),
            intra_text: self.intra_text.as_ref().map(|it| IntraNodes {
                smoe: it.smoe.as_ref().map(|s| s.register(g)),
                attn: it.attn.register(g),
            }),
            intra_visual: self.intra_visual.as_ref().map(|iv| IntraNodes {
                smoe: iv.smoe.as_ref().map(|s| s.register(g)),
                attn: iv.attn.register(g),
            }),
            inter: self.inter.as_ref().map(|inter| InterNodes {
                smoe_tvm: inter.smoe_tvm.as_ref().map(|s| s.register(g)),
                smoe_vtm: inter.smoe_vtm.as_ref().map(|s| s.register(g)),
                ln_tvm: inter.ln_tvm.register(g),
                ln_vtm: inter.ln_vtm.register(g),
            }),
        };
        // A second registration pass would allocate fresh leaves, so the
        // name/id pairing is reconstructed by walking both structures in
        // for_each order instead.
        nodes.collect_ids(self, &mut order);
        (nodes, order)
    }
}

#[derive(Debug, Clone)]
pub struct IntraNodes {
    pub smoe: Option<SmoeStackNodes>,
    pub attn: AttentionNodes,
}

#[derive(Debug, Clone)]
pub struct InterNodes {
    pub smoe_tvm: Option<SmoeStackNodes>,
    pub smoe_vtm: Option<SmoeStackNodes>,
    pub ln_tvm: LayerNormNodes,
    pub ln_vtm: LayerNormNodes,
}

#[derive(Debug, Clone)]
pub struct ModelNodes {
    pub proj_text: NodeId,
    pub proj_visual: NodeId,
    pub intra_text: Option<IntraNodes>,
    pub intra_visual: Option<IntraNodes>,
    pub inter: Option<InterNodes>,
}

impl ModelNodes {
    fn collect_ids(&self, params: &ModelParams, out: &mut Vec<(String, NodeId)>) {
        out.push(("proj.text".into(), self.proj_text));
        out.push(("proj.visual".into(), self.proj_visual));
        if let (Some(it), Some(itn)) = (&params.intra_text, &self.intra_text) {
            if let (Some(s), Some(sn)) = (&it.smoe, &itn.smoe) {
                collect_stack_ids(s, sn, "intra_text.smoe", out);
            }
            itn.attn.collect_ids("intra_text.attn", out);
        }
        if let (Some(iv), Some(ivn)) = (&params.intra_visual, &self.intra_visual) {
            if let (Some(s), Some(sn)) = (&iv.smoe, &ivn.smoe) {
                collect_stack_ids(s, sn, "intra_visual.smoe", out);
            }
            ivn.attn.collect_ids("intra_visual.attn", out);
        }
        if let (Some(inter), Some(intn)) = (&params.inter, &self.inter) {
            if let (Some(s), Some(sn)) = (&inter.smoe_tvm, &intn.smoe_tvm) {
                collect_stack_ids(s, sn, "inter.tvm.smoe", out);
            }
            if let (Some(s), Some(sn)) = (&inter.smoe_vtm, &intn.smoe_vtm) {
                collect_stack_ids(s, sn, "inter.vtm.smoe", out);
            }
            intn.ln_tvm.collect_ids("inter.ln_tvm", out);
            intn.ln_vtm.collect_ids("inter.ln_vtm", out);
        }
    }
}

fn collect_stack_ids(
    stack: &SmoeStack,
    nodes: &SmoeStackNodes,
    prefix: &str,
    out: &mut Vec<(String, NodeId)>,
) {
    let _ = stack;
    let mlp = |m: &crate::smoe::MlpNodes, p: String, out: &mut Vec<(String, NodeId)>| {
        out.push((format!("{p}.w1"), m.w1));
        out.push((format!("{p}.b1"), m.b1));
        out.push((format!("{p}.w2"), m.w2));
        out.push((format!("{p}.b2"), m.b2));
    };
    mlp(&nodes.fuse, format!("{prefix}.fuse"), out);
    for (i, layer) in nodes.layers.iter().enumerate() {
        out.push((format!("{prefix}.layer{i}.router"), layer.router));
        for (j, e) in layer.experts.iter().enumerate() {
            mlp(e, format!("{prefix}.layer{i}.expert{j}"), out);
        }
    }
}

/// Native-dim feature bundles for one mention or entity.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedObject {
    pub text: FeatureBundle,
    pub visual: FeatureBundle,
}

/// Encode a mention: the text side is "mention_word + enhanced-or-raw
/// context"; the visual side is its image or the placeholder.
pub fn encode_mention(
    record: &MentionRecord,
    encoder: &dyn EncoderAdapter,
    cfg: &RunConfig,
) -> Result<EncodedObject> {
    let context = record
        .enhanced_context
        .as_deref()
        .unwrap_or(&record.context);
    let text_input = format!("{} {}", record.mention_word, context);
    let text = encoder
        .encode_text(&text_input, cfg.max_text_len)?
        .with_side(Side::Mention);
    let visual = encoder
        .encode_image(record.image_ref.as_deref().map(std::path::Path::new))?
        .with_side(Side::Mention);
    Ok(EncodedObject { text, visual })
}

/// Encode an entity: "name + attributes" plus its image or placeholder.
pub fn encode_entity(
    record: &EntityRecord,
    encoder: &dyn EncoderAdapter,
    cfg: &RunConfig,
) -> Result<EncodedObject> {
    let text_input = format!("{} {}", record.name, record.attributes);
    let text = encoder
        .encode_text(&text_input, cfg.max_text_len)?
        .with_side(Side::Entity);
    let visual = encoder
        .encode_image(record.image_ref.as_deref().map(std::path::Path::new))?
        .with_side(Side::Entity);
    Ok(EncodedObject { text, visual })
}

/// Quick dimension sanity check before scoring.
pub fn check_object_dims(obj: &EncodedObject, params: &ModelParams) -> Result<()> {
    if obj.text.dim() != params.proj_text.nrows() || obj.visual.dim() != params.proj_visual.nrows()
    {
        return Err(Error::Shape(format!(
            "encoded dims (text {}, visual {}) do not match projections ({}, {})",
            obj.text.dim(),
            obj.visual.dim(),
            params.proj_text.nrows(),
            params.proj_visual.nrows()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::ToyEncoder;

    fn small_cfg() -> RunConfig {
        let mut cfg = RunConfig::with_seed(5);
        cfg.embed_dim = 8;
        cfg.native_dim = 12;
        cfg.experts_k = 3;
        cfg.top_k = 2;
        cfg.max_text_len = 6;
        cfg.num_patches = 4;
        cfg
    }

    #[test]
    fn init_is_deterministic() {
        let cfg = small_cfg();
        let a = ModelParams::init(&cfg).unwrap();
        let b = ModelParams::init(&cfg).unwrap();
        assert_eq!(a, b);
        let mut cfg2 = cfg.clone();
        cfg2.seed = 6;
        let c = ModelParams::init(&cfg2).unwrap();
        assert_ne!(a.proj_text, c.proj_text);
    }

    #[test]
    fn toggles_change_parameter_set() {
        let cfg = small_cfg();
        let full = ModelParams::init(&cfg).unwrap();
        let mut no_inter = cfg.clone();
        no_inter.use_inter = false;
        let ablated = ModelParams::init(&no_inter).unwrap();
        assert!(ablated.inter.is_none());
        assert!(ablated.param_count() < full.param_count());
        let mut no_smoe = cfg.clone();
        no_smoe.use_smoe = false;
        let lean = ModelParams::init(&no_smoe).unwrap();
        assert!(lean.intra_text.as_ref().unwrap().smoe.is_none());
        assert!(lean.param_count() < ablated.param_count());
    }

    #[test]
    fn register_order_matches_for_each() {
        let params = ModelParams::init(&small_cfg()).unwrap();
        let mut g = Graph::new();
        let (_, order) = params.register(&mut g);
        let mut names = Vec::new();
        params.for_each(&mut |name, _| names.push(name));
        let reg_names: Vec<&str> = order.iter().map(|(n, _)| n.as_str()).collect();
        let walk_names: Vec<&str> = names.iter().map(|n| n.as_str()).collect();
        assert_eq!(reg_names, walk_names);
        // registered leaves carry the same values
        for ((name, id), tensor) in order.iter().zip({
            let mut v = Vec::new();
            params.for_each(&mut |_, t| v.push(t.clone()));
            v
        }) {
            assert_eq!(g.value(*id), &tensor, "leaf {name}");
        }
    }

    #[test]
    fn param_count_matches_walk() {
        let params = ModelParams::init(&small_cfg()).unwrap();
        let mut total = 0;
        params.for_each(&mut |_, t| total += t.len());
        assert_eq!(total, params.param_count());
        assert!(total > 0);
    }

    #[test]
    fn encode_uses_enhanced_context_when_present() {
        let cfg = small_cfg();
        let enc = ToyEncoder::new(cfg.native_dim, cfg.num_patches, cfg.seed);
        let mut rec = MentionRecord {
            id: "m".into(),
            mention_word: "alpha".into(),
            context: "beta".into(),
            image_ref: None,
            gold_entity_id: "e".into(),
            enhanced_context: None,
        };
        let plain = encode_mention(&rec, &enc, &cfg).unwrap();
        rec.enhanced_context = Some("beta [SEP] gamma".into());
        let enhanced = encode_mention(&rec, &enc, &cfg).unwrap();
        assert_ne!(plain.text.fine, enhanced.text.fine);
        assert_eq!(plain.visual, enhanced.visual);
    }
}
