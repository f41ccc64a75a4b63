//! Open-world sample selection.
//!
//! The distribution-guided strategy scores every sample by how far its
//! per-BN-layer feature statistics sit from the teacher's running
//! statistics, selects the closest ε samples, and assigns each selected
//! sample a weight that decays affinely from 1 (closest) to 0 (farthest).
//! Random and confidence-ranked selection are the baselines.
//!
//! The per-layer distance term is (‖μ(x)−μ_ref‖₂ + ‖σ²(x)−σ²_ref‖₂)/√C so
//! wide layers do not dominate, and the aggregate is the mean over layers by
//! default; both choices are configurable for ablation.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Stratum};
use crate::error::{Error, Result};
use crate::loss::softmax_channels;
use crate::nets::{FeatureStats, Network};
use crate::parallel::par_map;
use crate::rng::{derive_seed, Rng};
use crate::tensor::Tensor;

/// Frozen copy of a teacher's per-BN-layer running statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BnReference {
    pub layers: Vec<BnLayerReference>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BnLayerReference {
    pub layer_index: usize,
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

/// Copy all running statistics out of a frozen teacher. Errors if the
/// network has no BN layers to harvest.
pub fn harvest_bn_reference(teacher: &Network) -> Result<BnReference> {
    let layers = teacher
        .bn_layers()
        .into_iter()
        .map(|(layer_index, bn)| BnLayerReference {
            layer_index,
            mean: bn.running_mean.clone(),
            var: bn.running_var.clone(),
        })
        .collect::<Vec<_>>();
    if layers.is_empty() {
        return Err(Error::invalid(
            "teacher has no batchnorm layers; nothing encodes its training distribution",
        ));
    }
    for l in &layers {
        if l.var.iter().any(|v| *v < 0.0) {
            return Err(Error::non_finite(format!(
                "negative running variance in BN layer {}",
                l.layer_index
            )));
        }
    }
    Ok(BnReference { layers })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerCombine {
    Mean,
    Sum,
}

/// Aggregation knobs for the statistic distance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistanceConfig {
    /// Restrict to this subset of BN layers (indices into the reference's
    /// layer list); `None` uses all layers.
    pub layer_subset: Option<Vec<usize>>,
    pub combine: LayerCombine,
}

impl Default for DistanceConfig {
    fn default() -> Self {
        DistanceConfig { layer_subset: None, combine: LayerCombine::Mean }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistanceBreakdown {
    /// Channel-normalized term per participating layer.
    pub per_layer: Vec<f64>,
    pub aggregate: f64,
}

/// Statistic-space distance between one sample's feature statistics and the
/// teacher reference.
pub fn distribution_distance(
    stats: &FeatureStats,
    reference: &BnReference,
    cfg: &DistanceConfig,
) -> Result<DistanceBreakdown> {
    if stats.layers.len() != reference.layers.len() {
        return Err(Error::shape(format!(
            "sample has {} BN layers, reference has {}",
            stats.layers.len(),
            reference.layers.len()
        )));
    }
    let indices: Vec<usize> = match &cfg.layer_subset {
        Some(subset) => {
            for &i in subset {
                if i >= reference.layers.len() {
                    return Err(Error::invalid(format!(
                        "layer subset index {i} out of {} BN layers",
                        reference.layers.len()
                    )));
                }
            }
            subset.clone()
        }
        None => (0..reference.layers.len()).collect(),
    };
    if indices.is_empty() {
        return Err(Error::invalid("distance layer subset is empty"));
    }

    let mut per_layer = Vec::with_capacity(indices.len());
    for &li in &indices {
        let s = &stats.layers[li];
        let r = &reference.layers[li];
        if s.layer_index != r.layer_index || s.mean.len() != r.mean.len() {
            return Err(Error::shape(format!(
                "BN layer {li}: stats layer {} ({} ch) vs reference layer {} ({} ch)",
                s.layer_index,
                s.mean.len(),
                r.layer_index,
                r.mean.len()
            )));
        }
        let mut mean_sq = 0.0f64;
        let mut var_sq = 0.0f64;
        for c in 0..s.mean.len() {
            let dm = s.mean[c] as f64 - r.mean[c] as f64;
            let dv = s.var[c] as f64 - r.var[c] as f64;
            mean_sq += dm * dm;
            var_sq += dv * dv;
        }
        let term = (mean_sq.sqrt() + var_sq.sqrt()) / (s.mean.len() as f64).sqrt();
        per_layer.push(term);
    }
    let sum: f64 = per_layer.iter().sum();
    let aggregate = match cfg.combine {
        LayerCombine::Mean => sum / per_layer.len() as f64,
        LayerCombine::Sum => sum,
    };
    Ok(DistanceBreakdown { per_layer, aggregate })
}

/// Affine weights over the selected distances: the closest sample gets 1,
/// the farthest 0. When every distance ties, all weights are 1 and weighted
/// distillation degenerates to the unweighted objective.
pub fn compute_weights(distances: &[f64]) -> Result<Vec<f64>> {
    if distances.is_empty() {
        return Err(Error::invalid("compute_weights over an empty selection"));
    }
    let min = distances.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = distances.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(min.is_finite() && max.is_finite()) {
        return Err(Error::non_finite("non-finite distance in weight computation".to_string()));
    }
    if max == min {
        return Ok(vec![1.0; distances.len()]);
    }
    Ok(distances.iter().map(|d| 1.0 - (d - min) / (max - min)).collect())
}

/// Everything measured about one corpus sample in a single teacher pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredSample {
    pub id: u32,
    pub stratum: Stratum,
    pub per_layer: Vec<f64>,
    pub distance: f64,
    /// Mean over pixels of the max softmax probability of the teacher.
    pub confidence: f64,
}

/// Score every sample of the corpus against the teacher: statistic distance
/// plus prediction confidence, one forward pass per sample, parallel over
/// samples, output ordered by id.
pub fn score_corpus(
    teacher: &Network,
    reference: &BnReference,
    corpus: &Corpus,
    cfg: &DistanceConfig,
) -> Result<Vec<ScoredSample>> {
    let results = par_map(&corpus.records, |_, record| -> Result<ScoredSample> {
        let (logits, stats) = teacher.forward_with_stats(&record.pixels)?;
        let breakdown = distribution_distance(&stats, reference, cfg)?;
        let confidence = mean_max_softmax(&logits)?;
        Ok(ScoredSample {
            id: record.id,
            stratum: record.stratum,
            per_layer: breakdown.per_layer,
            distance: breakdown.aggregate,
            confidence,
        })
    });
    results.into_iter().collect()
}

fn mean_max_softmax(logits: &Tensor<f32>) -> Result<f64> {
    let probs = softmax_channels(logits)?;
    let (n, k, h, w) = probs.dims4()?;
    debug_assert_eq!(n, 1);
    let plane = h * w;
    let p = probs.data();
    let mut total = 0.0f64;
    for px in 0..plane {
        let mut best = f32::NEG_INFINITY;
        for c in 0..k {
            best = best.max(p[c * plane + px]);
        }
        total += best as f64;
    }
    Ok(total / plane as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Ads,
    Random,
    Confidence,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::Ads => "ads",
            Strategy::Random => "random",
            Strategy::Confidence => "confidence",
        }
    }
}

/// Per-sample outcome of distribution-guided selection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleScore {
    pub id: u32,
    pub per_layer: Vec<f64>,
    pub distance: f64,
    pub weight: f64,
    pub rank: usize,
}

/// The chosen subset, ordered by selection rank. Persisted as JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub strategy: Strategy,
    pub epsilon: usize,
    pub seed: Option<u64>,
    pub ids: Vec<u32>,
    /// Present for the distribution-guided strategy.
    pub scores: Option<Vec<SampleScore>>,
    /// Present for the confidence strategy: (id, confidence) by rank.
    pub confidences: Option<Vec<(u32, f64)>>,
    pub corpus_config_hash: String,
    pub corpus_seed: u64,
}

impl SelectionResult {
    /// Per-sample training weights aligned with `ids`: the distribution
    /// strategy carries its affine weights, the baselines weigh every
    /// sample at 1.
    pub fn weights(&self) -> Vec<f64> {
        match &self.scores {
            Some(scores) => scores.iter().map(|s| s.weight).collect(),
            None => vec![1.0; self.ids.len()],
        }
    }
}

fn check_epsilon(epsilon: usize, corpus: &Corpus) -> Result<()> {
    if epsilon == 0 {
        return Err(Error::invalid("selection size must be >= 1"));
    }
    if epsilon > corpus.len() {
        return Err(Error::invalid(format!(
            "selection size {epsilon} exceeds corpus size {}",
            corpus.len()
        )));
    }
    Ok(())
}

/// Distribution-guided selection from precomputed scores: the ε samples
/// with the smallest distances, ties broken by ascending id, weighted over
/// the selected subset.
pub fn ads_select_from_scores(
    scores: &[ScoredSample],
    epsilon: usize,
    corpus: &Corpus,
) -> Result<SelectionResult> {
    check_epsilon(epsilon, corpus)?;
    let mut order: Vec<&ScoredSample> = scores.iter().collect();
    order.sort_by(|a, b| {
        a.distance
            .partial_cmp(&b.distance)
            .expect("finite distances")
            .then(a.id.cmp(&b.id))
    });
    let selected = &order[..epsilon];
    let distances: Vec<f64> = selected.iter().map(|s| s.distance).collect();
    let weights = compute_weights(&distances)?;
    let sample_scores: Vec<SampleScore> = selected
        .iter()
        .zip(&weights)
        .enumerate()
        .map(|(rank, (s, w))| SampleScore {
            id: s.id,
            per_layer: s.per_layer.clone(),
            distance: s.distance,
            weight: *w,
            rank,
        })
        .collect();
    Ok(SelectionResult {
        strategy: Strategy::Ads,
        epsilon,
        seed: None,
        ids: sample_scores.iter().map(|s| s.id).collect(),
        scores: Some(sample_scores),
        confidences: None,
        corpus_config_hash: corpus.manifest.config_hash.clone(),
        corpus_seed: corpus.manifest.seed,
    })
}

pub fn ads_select(
    teacher: &Network,
    corpus: &Corpus,
    epsilon: usize,
    cfg: &DistanceConfig,
) -> Result<SelectionResult> {
    check_epsilon(epsilon, corpus)?;
    let reference = harvest_bn_reference(teacher)?;
    let scores = score_corpus(teacher, &reference, corpus, cfg)?;
    ads_select_from_scores(&scores, epsilon, corpus)
}

/// Seeded uniform selection without replacement (partial Fisher-Yates).
pub fn random_select(corpus: &Corpus, epsilon: usize, seed: u64) -> Result<SelectionResult> {
    check_epsilon(epsilon, corpus)?;
    let mut ids: Vec<u32> = corpus.records.iter().map(|r| r.id).collect();
    let mut rng = Rng::new(derive_seed(seed, "random-select"));
    for i in 0..epsilon {
        let j = i + rng.below((ids.len() - i) as u64) as usize;
        ids.swap(i, j);
    }
    ids.truncate(epsilon);
    Ok(SelectionResult {
        strategy: Strategy::Random,
        epsilon,
        seed: Some(seed),
        ids,
        scores: None,
        confidences: None,
        corpus_config_hash: corpus.manifest.config_hash.clone(),
        corpus_seed: corpus.manifest.seed,
    })
}

/// The ε samples with the highest teacher confidence, ties broken by
/// ascending id.
pub fn confidence_select_from_scores(
    scores: &[ScoredSample],
    epsilon: usize,
    corpus: &Corpus,
) -> Result<SelectionResult> {
    check_epsilon(epsilon, corpus)?;
    let mut order: Vec<&ScoredSample> = scores.iter().collect();
    order.sort_by(|a, b| {
        b.confidence
            .partial_cmp(&a.confidence)
            .expect("finite confidences")
            .then(a.id.cmp(&b.id))
    });
    let selected = &order[..epsilon];
    Ok(SelectionResult {
        strategy: Strategy::Confidence,
        epsilon,
        seed: None,
        ids: selected.iter().map(|s| s.id).collect(),
        scores: None,
        confidences: Some(selected.iter().map(|s| (s.id, s.confidence)).collect()),
        corpus_config_hash: corpus.manifest.config_hash.clone(),
        corpus_seed: corpus.manifest.seed,
    })
}

pub fn confidence_select(
    teacher: &Network,
    corpus: &Corpus,
    epsilon: usize,
    cfg: &DistanceConfig,
) -> Result<SelectionResult> {
    check_epsilon(epsilon, corpus)?;
    let reference = harvest_bn_reference(teacher)?;
    let scores = score_corpus(teacher, &reference, corpus, cfg)?;
    confidence_select_from_scores(&scores, epsilon, corpus)
}

// ---------------------------------------------------------------------------
// Diagnostics export
// ---------------------------------------------------------------------------

/// One row of the diagnostics CSV; absent fields serialize as empty cells.
#[derive(Clone, Debug, PartialEq)]
pub struct CsvRow {
    pub id: u32,
    pub stratum: Option<Stratum>,
    pub distance: Option<f64>,
    pub omega: Option<f64>,
    pub confidence: Option<f64>,
}

/// Write `id,stratum,d,omega,confidence` rows ordered by id.
pub fn export_stats_csv(rows: &[CsvRow], path: &Path) -> Result<()> {
    if rows.is_empty() {
        return Err(Error::invalid("csv export of zero rows"));
    }
    let mut sorted: Vec<&CsvRow> = rows.iter().collect();
    sorted.sort_by_key(|r| r.id);
    let mut out = String::from("id,stratum,d,omega,confidence\n");
    for r in sorted {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.id,
            r.stratum.map(|s| s.name()).unwrap_or(""),
            r.distance.map(|v| format!("{v:.9}")).unwrap_or_default(),
            r.omega.map(|v| format!("{v:.9}")).unwrap_or_default(),
            r.confidence.map(|v| format!("{v:.9}")).unwrap_or_default(),
        ));
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Rows combining the full score table with a selection's weights.
pub fn csv_rows(scores: &[ScoredSample], selection: Option<&SelectionResult>) -> Vec<CsvRow> {
    let mut omega_by_id = std::collections::BTreeMap::new();
    if let Some(sel) = selection {
        if let Some(ss) = &sel.scores {
            for s in ss {
                omega_by_id.insert(s.id, s.weight);
            }
        }
    }
    scores
        .iter()
        .map(|s| CsvRow {
            id: s.id,
            stratum: Some(s.stratum),
            distance: Some(s.distance),
            omega: omega_by_id.get(&s.id).copied(),
            confidence: Some(s.confidence),
        })
        .collect()
}
