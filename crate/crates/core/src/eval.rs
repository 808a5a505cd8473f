//! Ranking evaluation: score every catalog entity per mention, compute MRR
//! and Hits@{1,3,5}, sweep ablation variants, and report parameter/FLOP
//! complexity per module.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{DatasetSplit, EntityCatalog, MentionRecord};
use crate::encoders::EncoderAdapter;
use crate::error::{Error, Result};
use crate::matching::{score_matrix, Channels};
use crate::model::{encode_entity, encode_mention, EncodedObject, ModelParams};
use crate::training::{train, TrainData};

/// Full entity ordering for one mention, by descending overall score with
/// ties broken by ascending entity id.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedResult {
    pub mention_id: String,
    /// (entity_id, overall score), best first.
    pub ordered: Vec<(String, f64)>,
    /// 1-based rank of the gold entity.
    pub gold_rank: usize,
}

/// Build a ranking from raw (entity, score) pairs. The scoring path and this
/// ordering rule are the only places rank semantics live.
pub fn rank_from_scores(
    mention_id: &str,
    mut scored: Vec<(String, f64)>,
    gold_entity_id: &str,
) -> Result<RankedResult> {
    if scored.is_empty() {
        return Err(Error::Argument("cannot rank an empty candidate set".into()));
    }
    if let Some(bad) = scored.iter().find(|(_, s)| !s.is_finite()) {
        return Err(Error::Numeric(format!(
            "non-finite score for entity {:?}",
            bad.0
        )));
    }
    scored.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .expect("finite scores")
            .then_with(|| a.0.cmp(&b.0))
    });
    let gold_rank = scored
        .iter()
        .position(|(id, _)| id == gold_entity_id)
        .ok_or_else(|| {
            Error::Integrity(format!(
                "gold entity {gold_entity_id:?} not among candidates"
            ))
        })?
        + 1;
    Ok(RankedResult {
        mention_id: mention_id.to_string(),
        ordered: scored,
        gold_rank,
    })
}

/// Score one mention against the full catalog.
pub fn rank_entities(
    mention: &MentionRecord,
    catalog: &EntityCatalog,
    params: &ModelParams,
    cfg: &RunConfig,
    encoder: &dyn EncoderAdapter,
) -> Result<RankedResult> {
    if catalog.is_empty() {
        return Err(Error::Argument("catalog is empty".into()));
    }
    if !catalog.contains(&mention.gold_entity_id) {
        return Err(Error::Integrity(format!(
            "gold entity {:?} missing from catalog",
            mention.gold_entity_id
        )));
    }
    let channels = Channels::from_config(cfg);
    let m = encode_mention(mention, encoder, cfg)?;
    let mut scored = Vec::with_capacity(catalog.len());
    let entity_records: Vec<_> = catalog.iter().collect();
    let encoded: Vec<EncodedObject> = entity_records
        .iter()
        .map(|e| encode_entity(e, encoder, cfg))
        .collect::<Result<_>>()?;
    let grid = score_matrix(std::slice::from_ref(&m), &encoded, params, channels)?;
    for (e, s) in entity_records.iter().zip(&grid[0]) {
        scored.push((e.entity_id.clone(), s.s_o));
    }
    rank_from_scores(&mention.id, scored, &mention.gold_entity_id)
}

/// Per-mention evaluation detail.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MentionOutcome {
    pub mention_id: String,
    pub gold_rank: usize,
    pub reciprocal_rank: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mrr: f64,
    pub hits1: f64,
    pub hits3: f64,
    pub hits5: f64,
    pub n_mentions: usize,
    pub details: Vec<MentionOutcome>,
}

/// Metrics-report file body (External interface shape). Keys are ordered
/// so the file is byte-reproducible.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsFile {
    pub mrr: f64,
    pub hits: std::collections::BTreeMap<String, f64>,
    pub n_mentions: usize,
    pub config_fingerprint: String,
}

impl MetricsReport {
    pub fn to_file(&self, fingerprint: &str) -> MetricsFile {
        let mut hits = std::collections::BTreeMap::new();
        hits.insert("1".into(), self.hits1);
        hits.insert("3".into(), self.hits3);
        hits.insert("5".into(), self.hits5);
        MetricsFile {
            mrr: self.mrr,
            hits,
            n_mentions: self.n_mentions,
            config_fingerprint: fingerprint.to_string(),
        }
    }
}

/// MRR = mean(1/gold_rank); Hits@n = fraction with gold_rank <= n.
pub fn compute_metrics(results: &[RankedResult]) -> Result<MetricsReport> {
    if results.is_empty() {
        return Err(Error::Argument("no ranked results to aggregate".into()));
    }
    let n = results.len() as f64;
    let mut mrr = 0.0;
    let (mut h1, mut h3, mut h5) = (0usize, 0usize, 0usize);
    let mut details = Vec::with_capacity(results.len());
    for r in results {
        let rr = 1.0 / r.gold_rank as f64;
        mrr += rr;
        if r.gold_rank <= 1 {
            h1 += 1;
        }
        if r.gold_rank <= 3 {
            h3 += 1;
        }
        if r.gold_rank <= 5 {
            h5 += 1;
        }
        details.push(MentionOutcome {
            mention_id: r.mention_id.clone(),
            gold_rank: r.gold_rank,
            reciprocal_rank: rr,
        });
    }
    Ok(MetricsReport {
        mrr: mrr / n,
        hits1: h1 as f64 / n,
        hits3: h3 as f64 / n,
        hits5: h5 as f64 / n,
        n_mentions: results.len(),
        details,
    })
}

/// One line of the predictions dump: the top-3 entities for a mention.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub mention_id: String,
    pub gold_entity: String,
    pub gold_rank: usize,
    /// (entity_id, overall score), best first, at most 3.
    pub top: Vec<(String, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOutput {
    pub metrics: MetricsReport,
    pub predictions: Vec<PredictionRecord>,
}

/// Evaluate a whole split against the catalog. Entities are encoded once;
/// mentions are scored in batches of `cfg.batch_size`.
pub fn evaluate_split(
    split: &DatasetSplit,
    catalog: &EntityCatalog,
    params: &ModelParams,
    cfg: &RunConfig,
    encoder: &dyn EncoderAdapter,
) -> Result<EvalOutput> {
    evaluate_split_with_candidates(split, catalog, params, cfg, encoder, None)
}

/// As [`evaluate_split`], optionally restricting each mention to a candidate
/// list (mention_id -> entity ids). Mentions absent from the map use the
/// full catalog.
pub fn evaluate_split_with_candidates(
    split: &DatasetSplit,
    catalog: &EntityCatalog,
    params: &ModelParams,
    cfg: &RunConfig,
    encoder: &dyn EncoderAdapter,
    candidates: Option<&HashMap<String, Vec<String>>>,
) -> Result<EvalOutput> {
    if split.is_empty() {
        return Err(Error::Argument("cannot evaluate an empty split".into()));
    }
    if catalog.is_empty() {
        return Err(Error::Argument("catalog is empty".into()));
    }
    let channels = Channels::from_config(cfg);
    let entity_records: Vec<_> = catalog.iter().collect();
    let encoded_entities: Vec<EncodedObject> = entity_records
        .iter()
        .map(|e| encode_entity(e, encoder, cfg))
        .collect::<Result<_>>()?;
    let mut results = Vec::with_capacity(split.len());

    let full_catalog_mentions: Vec<&MentionRecord> = split
        .mentions()
        .iter()
        .filter(|m| candidates.is_none_or(|c| !c.contains_key(&m.id)))
        .collect();
    let restricted: Vec<&MentionRecord> = split
        .mentions()
        .iter()
        .filter(|m| candidates.is_some_and(|c| c.contains_key(&m.id)))
        .collect();

    let chunk = cfg.batch_size.max(1);
    for batch in full_catalog_mentions.chunks(chunk) {
        let encoded: Vec<EncodedObject> = batch
            .iter()
            .map(|m| encode_mention(m, encoder, cfg))
            .collect::<Result<_>>()?;
        let grid = score_matrix(&encoded, &encoded_entities, params, channels)?;
        for (mention, row) in batch.iter().zip(&grid) {
            if !catalog.contains(&mention.gold_entity_id) {
                return Err(Error::Integrity(format!(
                    "gold entity {:?} missing from catalog",
                    mention.gold_entity_id
                )));
            }
            let scored: Vec<(String, f64)> = entity_records
                .iter()
                .zip(row)
                .map(|(e, s)| (e.entity_id.clone(), s.s_o))
                .collect();
            results.push(rank_from_scores(
                &mention.id,
                scored,
                &mention.gold_entity_id,
            )?);
        }
    }
    for mention in restricted {
        let ids = &candidates.expect("restricted implies map")[&mention.id];
        let mut subset = Vec::with_capacity(ids.len());
        let mut sub_encoded = Vec::with_capacity(ids.len());
        for id in ids {
            let e = catalog.get(id).ok_or_else(|| {
                Error::Integrity(format!("candidate entity {id:?} missing from catalog"))
            })?;
            subset.push(e);
            sub_encoded.push(encode_entity(e, encoder, cfg)?);
        }
        let m = encode_mention(mention, encoder, cfg)?;
        let grid = score_matrix(std::slice::from_ref(&m), &sub_encoded, params, channels)?;
        let scored: Vec<(String, f64)> = subset
            .iter()
            .zip(&grid[0])
            .map(|(e, s)| (e.entity_id.clone(), s.s_o))
            .collect();
        results.push(rank_from_scores(
            &mention.id,
            scored,
            &mention.gold_entity_id,
        )?);
    }

    // restore split order (restricted mentions were processed after)
    let order: HashMap<&str, usize> = split
        .mentions()
        .iter()
        .enumerate()
        .map(|(i, m)| (m.id.as_str(), i))
        .collect();
    results.sort_by_key(|r| order[r.mention_id.as_str()]);

    let predictions = results
        .iter()
        .zip(split.mentions())
        .map(|(r, m)| PredictionRecord {
            mention_id: r.mention_id.clone(),
            gold_entity: m.gold_entity_id.clone(),
            gold_rank: r.gold_rank,
            top: r.ordered.iter().take(3).cloned().collect(),
        })
        .collect();
    let metrics = compute_metrics(&results)?;
    Ok(EvalOutput {
        metrics,
        predictions,
    })
}

pub const ABLATION_TOGGLES: [&str; 7] = [
    "loss_t",
    "loss_v",
    "loss_c",
    "loss_o",
    "intra_text",
    "intra_visual",
    "inter",
];

fn apply_toggle(cfg: &RunConfig, toggle: &str) -> Result<RunConfig> {
    let mut v = cfg.clone();
    match toggle {
        "loss_t" => v.loss_t = false,
        "loss_v" => v.loss_v = false,
        "loss_c" => v.loss_c = false,
        "loss_o" => v.loss_o = false,
        "intra_text" => v.use_intra_text = false,
        "intra_visual" => v.use_intra_visual = false,
        "inter" => v.use_inter = false,
        other => {
            return Err(Error::Argument(format!(
                "unknown ablation toggle {other:?} (expected one of {ABLATION_TOGGLES:?})"
            )))
        }
    }
    Ok(v)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub mrr: Option<f64>,
    pub hits1: Option<f64>,
    pub hits3: Option<f64>,
    pub hits5: Option<f64>,
    /// variant minus base, present on non-base rows that succeeded.
    pub delta_mrr: Option<f64>,
    pub delta_hits1: Option<f64>,
    pub error: Option<String>,
}

/// Train and evaluate the base config plus one variant per toggle.
/// Per-variant failures are recorded as rows; the sweep continues.
pub fn ablation_sweep(
    base_cfg: &RunConfig,
    toggles: &[String],
    data: &TrainData,
    eval_split: &DatasetSplit,
    encoder: &dyn EncoderAdapter,
) -> Result<Vec<AblationRow>> {
    for t in toggles {
        apply_toggle(base_cfg, t)?; // validate names before any training
    }
    let mut rows = Vec::with_capacity(toggles.len() + 1);
    let run = |cfg: &RunConfig| -> Result<MetricsReport> {
        let (params, _) = train(cfg, data, encoder)?;
        Ok(evaluate_split(eval_split, data.catalog, &params, cfg, encoder)?.metrics)
    };
    let base = run(base_cfg)?;
    rows.push(AblationRow {
        variant: "base".into(),
        mrr: Some(base.mrr),
        hits1: Some(base.hits1),
        hits3: Some(base.hits3),
        hits5: Some(base.hits5),
        delta_mrr: None,
        delta_hits1: None,
        error: None,
    });
    for toggle in toggles {
        let cfg = apply_toggle(base_cfg, toggle)?;
        match run(&cfg) {
            Ok(m) => rows.push(AblationRow {
                variant: format!("w/o {toggle}"),
                mrr: Some(m.mrr),
                hits1: Some(m.hits1),
                hits3: Some(m.hits3),
                hits5: Some(m.hits5),
                delta_mrr: Some(m.mrr - base.mrr),
                delta_hits1: Some(m.hits1 - base.hits1),
                error: None,
            }),
            Err(e) => rows.push(AblationRow {
                variant: format!("w/o {toggle}"),
                mrr: None,
                hits1: None,
                hits3: None,
                hits5: None,
                delta_mrr: None,
                delta_hits1: None,
                error: Some(e.to_string()),
            }),
        }
    }
    Ok(rows)
}

// ---- complexity ------------------------------------------------------------

/// FLOP accounting constants. One multiply-add counts as 2 FLOPs;
/// transcendental and division costs are flat per element.
pub const FLOPS_PER_MAC: u64 = 2;
const FLOPS_GELU: u64 = 10;
const FLOPS_TANH: u64 = 1;
const FLOPS_SOFTMAX_PER_ELEM: u64 = 5;
const FLOPS_LAYERNORM_PER_ELEM: u64 = 8;

fn linear_flops(rows: u64, in_dim: u64, out_dim: u64) -> u64 {
    FLOPS_PER_MAC * rows * in_dim * out_dim + rows * out_dim
}

fn mlp_flops(rows: u64, in_dim: u64, hidden: u64, out_dim: u64) -> u64 {
    linear_flops(rows, in_dim, hidden)
        + FLOPS_GELU * rows * hidden
        + linear_flops(rows, hidden, out_dim)
}

fn smoe_stack_flops(cfg: &RunConfig, content_rows: u64) -> u64 {
    if !cfg.use_smoe {
        return 0;
    }
    let d = cfg.embed_dim as u64;
    let k_total = cfg.experts_k as u64;
    let k = cfg.top_k as u64;
    let hidden = cfg.expert_hidden() as u64;
    let rows = content_rows + 1; // coarse token joins the stack
    let fuse = mlp_flops(rows, d, d, d);
    let per_layer = {
        let routing = FLOPS_PER_MAC * rows * d * k_total
            + FLOPS_SOFTMAX_PER_ELEM * rows * k_total
            + rows * 3 * k; // top-k renormalization
        let experts = rows * k * mlp_flops(1, d, hidden, d);
        let combine = rows * (2 * k - 1) * d; // scale each, then sum
        routing + experts + combine
    };
    fuse + per_layer * cfg.smoe_layers as u64
}

fn fine_match_flops(cfg: &RunConfig, entity_rows: u64, mention_rows: u64) -> u64 {
    let d = cfg.embed_dim as u64;
    let projections = FLOPS_PER_MAC * (entity_rows + 2 * mention_rows) * d * d;
    let logits = FLOPS_PER_MAC * entity_rows * mention_rows * d + entity_rows * mention_rows;
    let softmax = FLOPS_SOFTMAX_PER_ELEM * entity_rows * mention_rows;
    let attended = FLOPS_PER_MAC * entity_rows * mention_rows * d;
    let mean = entity_rows * d + d;
    let dot = FLOPS_PER_MAC * d;
    projections + logits + softmax + attended + mean + dot
}

fn gated_fuse_flops(cfg: &RunConfig, fine_rows: u64) -> u64 {
    let d = cfg.embed_dim as u64;
    (FLOPS_TANH + 1) * d                      // tanh(h) * h
        + FLOPS_PER_MAC * fine_rows * d       // attention logits
        + FLOPS_SOFTMAX_PER_ELEM * fine_rows
        + FLOPS_PER_MAC * fine_rows * d       // attended sum
        + d                                   // residual add
        + FLOPS_LAYERNORM_PER_ELEM * d
}

/// Analytic FLOPs for scoring one mention-entity pair under the config's
/// toggles, with both objects encoded from scratch.
pub fn flops_per_pair(cfg: &RunConfig) -> u64 {
    let d = cfg.embed_dim as u64;
    let native = cfg.native_dim as u64;
    let text_rows = cfg.max_text_len as u64;
    let vis_rows = cfg.num_patches as u64;
    let mut total = 0;
    // projections for both sides, both modalities (coarse + fine rows)
    total += 2 * FLOPS_PER_MAC * (text_rows + 1) * native * d;
    total += 2 * FLOPS_PER_MAC * (vis_rows + 1) * native * d;
    if cfg.use_intra_text {
        total += 2 * smoe_stack_flops(cfg, text_rows);
        total += fine_match_flops(cfg, text_rows, text_rows);
        total += FLOPS_PER_MAC * d + 2; // coarse dot + average
    }
    if cfg.use_intra_visual {
        total += 2 * smoe_stack_flops(cfg, vis_rows);
        total += fine_match_flops(cfg, vis_rows, vis_rows);
        total += FLOPS_PER_MAC * d + 2;
    }
    if cfg.use_inter {
        total += 2 * (smoe_stack_flops(cfg, vis_rows) + gated_fuse_flops(cfg, vis_rows));
        total += 2 * (smoe_stack_flops(cfg, text_rows) + gated_fuse_flops(cfg, text_rows));
        total += 2 * (FLOPS_PER_MAC * d) + 2; // two dots + average
    }
    total += 2; // overall sum
    total
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComplexityRow {
    pub variant: String,
    pub param_count: usize,
    pub flops_per_pair: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComplexityReport {
    /// Counting conventions, stated so the numbers are interpretable.
    pub conventions: String,
    pub rows: Vec<ComplexityRow>,
}

/// Exact parameter counts (by tensor-element summation) and analytic FLOPs
/// for the active config plus the module-removal variants.
pub fn complexity_report(params: &ModelParams, cfg: &RunConfig) -> Result<ComplexityReport> {
    let mut rows = vec![ComplexityRow {
        variant: "full".into(),
        param_count: params.param_count(),
        flops_per_pair: flops_per_pair(cfg),
    }];
    type Tweak = fn(&mut RunConfig);
    let variants: [(&str, Tweak); 4] = [
        ("w/o IntraMoE-T", |c| c.use_intra_text = false),
        ("w/o IntraMoE-V", |c| c.use_intra_visual = false),
        ("w/o InterMoE", |c| c.use_inter = false),
        ("w/o SMoE", |c| c.use_smoe = false),
    ];
    for (name, tweak) in variants {
        let mut vcfg = cfg.clone();
        tweak(&mut vcfg);
        let vparams = ModelParams::init(&vcfg)?;
        rows.push(ComplexityRow {
            variant: name.into(),
            param_count: vparams.param_count(),
            flops_per_pair: flops_per_pair(&vcfg),
        });
    }
    Ok(ComplexityReport {
        conventions: format!(
            "multiply-add = {FLOPS_PER_MAC} FLOPs; gelu = {FLOPS_GELU}/elem; \
             softmax = {FLOPS_SOFTMAX_PER_ELEM}/elem; layernorm = {FLOPS_LAYERNORM_PER_ELEM}/elem; \
             per-pair cost covers both objects end to end with no cross-pair sharing"
        ),
        rows,
    })
}
