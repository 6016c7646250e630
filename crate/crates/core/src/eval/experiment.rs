//! The synthetic end-to-end experiment: synth → train → refresh → graph →
//! retrieve → metrics.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::{mean_std, neighbor_purity, normalized_entropy, relative_metric_change, retrieval_recall, Platt};
use crate::config::RunConfig;
use crate::encoder::{encode_checkpoint, evaluation_loss, train, training_examples, BatchEntry, ModelParams};
use crate::error::{Error, Result};
use crate::event_model::{synth_generate, temporal_split, EngagementLog, SynthData, TemporalSplit};
use crate::graph::{brute_force_knn, build_graph, normalize_embeddings, GraphBuild, GraphConfig, RegionPoints};
use crate::parallel::par_map;
use crate::pipeline::{build_snapshot, extract_feature_arch, EmbeddingSnapshot, Embedder};
use crate::retrieval::{retrieve_all, Histogram, RetrievalOutput};

pub const REPORT_FOOTER: &str = "Production NE gains and online lift are not reproduced at this scale. \
Recall of held-out synthetic engagements stands in for the online value metric; \
the random-ads baseline plays the control arm.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metric {
    pub value: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub stddev: Option<f64>,
    /// The operation that computed the value.
    pub operation: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config_hash: String,
    pub dataset_seeds: Vec<u64>,
    pub metrics: BTreeMap<String, Metric>,
    /// Per-seed values, present for multi-seed sweeps.
    #[serde(skip_serializing_if = "BTreeMap::is_empty", default)]
    pub per_seed: BTreeMap<String, BTreeMap<String, f64>>,
    /// Per-user candidate counts, pooled over seeds.
    pub histogram: Histogram,
    pub notes: Vec<String>,
}

/// Wall-clock seconds per stage; kept apart from the report so report
/// bytes stay reproducible.
pub type Timing = Vec<(String, f64)>;

/// Every intermediate artifact of one run.
pub struct PipelineRun {
    pub config: RunConfig,
    pub data: SynthData,
    pub split: TemporalSplit,
    pub train_engagements: EngagementLog,
    pub examples: Vec<BatchEntry>,
    pub params: ModelParams,
    pub losses: Vec<f64>,
    pub loss_initial: f64,
    pub loss_final: f64,
    pub checkpoint: Vec<u8>,
    pub embedder: Embedder,
    pub snapshot: EmbeddingSnapshot,
    pub skipped_users: usize,
    pub graph: GraphBuild,
    pub retrieval: RetrievalOutput,
    pub timing: Timing,
}

struct Stopwatch {
    start: Instant,
    timing: Timing,
}

impl Stopwatch {
    fn new() -> Self {
        Stopwatch {
            start: Instant::now(),
            timing: Vec::new(),
        }
    }

    fn lap(&mut self, stage: &str) {
        let now = Instant::now();
        let secs = (now - self.start).as_secs_f64();
        log::info!("stage {stage}: {secs:.2}s");
        self.timing.push((stage.to_string(), secs));
        self.start = now;
    }
}

/// Runs every stage in memory.
pub fn run_pipeline(cfg: &RunConfig) -> Result<PipelineRun> {
    cfg.validate()?;
    let mut sw = Stopwatch::new();
    let data = synth_generate(&cfg.synth)?;
    let split = temporal_split(&data.histories, cfg.train.heldout_fraction);
    let train_engagements = EngagementLog::from_histories(&split.train);
    sw.lap("synth");

    let examples = training_examples(&split.train, cfg.model.n_sources);
    let probe = &examples[..examples.len().min(cfg.train.eval_examples)];
    let mut params = ModelParams::init(&cfg.model);
    let loss_initial = evaluation_loss(&params, &cfg.model, probe)?;
    let losses = train(&mut params, &cfg.model, &examples, cfg.train.steps)?;
    let loss_final = evaluation_loss(&params, &cfg.model, probe)?;
    let checkpoint = encode_checkpoint(&params, &cfg.model)?;
    sw.lap("train");

    let embedder = extract_feature_arch(&checkpoint)?;
    let (snapshot, skipped_users) = build_snapshot(&embedder, &split.train, 1, split.train_end)?;
    sw.lap("embed");

    let graph = build_graph(&snapshot, &cfg.graph)?;
    sw.lap("build_graph");

    let retrieval = retrieve_all(
        &graph.graph,
        &train_engagements,
        &data.catalog,
        &cfg.retrieval,
        split.train_end,
    );
    sw.lap("retrieve");

    Ok(PipelineRun {
        config: cfg.clone(),
        data,
        split,
        train_engagements,
        examples,
        params,
        losses,
        loss_initial,
        loss_final,
        checkpoint,
        embedder,
        snapshot,
        skipped_users,
        graph,
        retrieval,
        timing: sw.timing,
    })
}

/// Mean over users of `|two-stage ∩ exact| / |exact|` neighbor lists.
pub fn knn_recall(snapshot: &EmbeddingSnapshot, build: &GraphBuild, cfg: &GraphConfig) -> Result<f64> {
    let (unit, _) = normalize_embeddings(snapshot, cfg.reduction);
    let mut total = 0.0;
    let mut n = 0usize;
    for ids in snapshot.region_index.values() {
        let points = RegionPoints::from_map(&unit, ids);
        if points.len() < 2 {
            continue;
        }
        let rows: Vec<usize> = (0..points.len()).collect();
        let per_user = par_map(&rows, |&i| {
            let exact: BTreeSet<u64> = brute_force_knn(&points, i, cfg.k2).into_iter().map(|(v, _)| v).collect();
            let got = build.graph.neighbors(points.ids[i]);
            got.iter().filter(|(v, _)| exact.contains(v)).count() as f64 / exact.len() as f64
        });
        total += per_user.iter().sum::<f64>();
        n += per_user.len();
    }
    if n == 0 {
        return Err(Error::Invalid("no region with at least 2 users".into()));
    }
    Ok(total / n as f64)
}

/// Held-out ads per user, minus anything already engaged in training.
fn heldout_targets(run: &PipelineRun) -> BTreeMap<u64, BTreeSet<u64>> {
    let mut out = BTreeMap::new();
    for (&user, events) in &run.split.heldout.by_user {
        let seen: BTreeSet<u64> = run.train_engagements.get(user).iter().map(|e| e.ad_id).collect();
        let fresh: BTreeSet<u64> = events.iter().map(|e| e.ad_id).filter(|a| !seen.contains(a)).collect();
        if !fresh.is_empty() {
            out.insert(user, fresh);
        }
    }
    out
}

/// `k` ads drawn uniformly without replacement from `pool`.
fn draw(pool: &[u64], k: usize, rng: &mut ChaCha8Rng) -> BTreeSet<u64> {
    sample(rng, pool.len(), k.min(pool.len())).into_iter().map(|i| pool[i]).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecallResult {
    pub alure: f64,
    pub baseline: f64,
    pub n_users: usize,
}

/// Held-out recall of the u2u candidates and of a random-ads control that
/// gets the same number of ads per user.
pub fn recall_vs_baseline(run: &PipelineRun) -> Result<RecallResult> {
    let targets = heldout_targets(run);
    if targets.is_empty() {
        return Err(Error::EmptyHeldout);
    }
    let sets: BTreeMap<u64, BTreeSet<u64>> = run.retrieval.sets.iter().map(|s| (s.user_id, s.ad_ids())).collect();
    let all_ads: Vec<u64> = run.data.catalog.all_ads().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(run.config.seed ^ 0xba5e_11e5);
    let empty = BTreeSet::new();
    let (mut alure, mut baseline) = (0.0, 0.0);
    for (user, heldout) in &targets {
        let got = sets.get(user).unwrap_or(&empty);
        alure += retrieval_recall(got, heldout)?;
        let seen: BTreeSet<u64> = run.train_engagements.get(*user).iter().map(|e| e.ad_id).collect();
        let pool: Vec<u64> = all_ads.iter().copied().filter(|a| !seen.contains(a)).collect();
        baseline += retrieval_recall(&draw(&pool, got.len(), &mut rng), heldout)?;
    }
    let n = targets.len() as f64;
    Ok(RecallResult {
        alure: alure / n,
        baseline: baseline / n,
        n_users: targets.len(),
    })
}

/// NE of a Platt-calibrated u2u score on (user, ad) pairs: held-out ads are
/// positives, equally many random unengaged ads are negatives. Users at even
/// positions fit the calibration, odd positions are scored.
pub fn heldout_ne(run: &PipelineRun) -> Result<f64> {
    let targets = heldout_targets(run);
    let scores: BTreeMap<u64, BTreeMap<u64, f64>> = run
        .retrieval
        .sets
        .iter()
        .map(|s| (s.user_id, s.candidates.iter().map(|c| (c.ad_id, c.score)).collect()))
        .collect();
    let all_ads: Vec<u64> = run.data.catalog.all_ads().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(run.config.seed ^ 0x0e11_0e11);
    let mut halves: [(Vec<f64>, Vec<bool>); 2] = Default::default();
    let empty = BTreeMap::new();
    for (pos, (user, heldout)) in targets.iter().enumerate() {
        let user_scores = scores.get(user).unwrap_or(&empty);
        let seen: BTreeSet<u64> = run.train_engagements.get(*user).iter().map(|e| e.ad_id).collect();
        let pool: Vec<u64> = all_ads
            .iter()
            .copied()
            .filter(|a| !seen.contains(a) && !heldout.contains(a))
            .collect();
        let negatives = draw(&pool, heldout.len(), &mut rng);
        let (xs, ys) = &mut halves[pos % 2];
        for (ad, label) in heldout.iter().map(|a| (a, true)).chain(negatives.iter().map(|a| (a, false))) {
            xs.push(user_scores.get(ad).copied().unwrap_or(0.0));
            ys.push(label);
        }
    }
    let platt = Platt::fit(&halves[0].0, &halves[0].1)?;
    let predictions: Vec<f64> = halves[1].0.iter().map(|&x| platt.predict(x)).collect();
    normalized_entropy(&predictions, &halves[1].1)
}

fn metric(value: f64, operation: &str) -> Metric {
    Metric {
        value,
        stddev: None,
        operation: operation.to_string(),
    }
}

/// Computes every metric of one run.
pub fn report_for(run: &PipelineRun) -> Result<ExperimentReport> {
    let cfg = &run.config;
    let recall = recall_vs_baseline(run)?;
    let purity = neighbor_purity(&run.graph.graph, &run.data.ground_truth)?;
    let knn = knn_recall(&run.snapshot, &run.graph, &cfg.graph)?;
    let ne = heldout_ne(run)?;
    let max_count = run.retrieval.sets.iter().map(|s| s.len()).max().unwrap_or(0);

    let mut m = BTreeMap::new();
    m.insert("train_loss_initial".into(), metric(run.loss_initial, "evaluation_loss"));
    m.insert("train_loss_final".into(), metric(run.loss_final, "evaluation_loss"));
    m.insert(
        "train_loss_decrease".into(),
        metric(run.loss_initial - run.loss_final, "evaluation_loss"),
    );
    m.insert("neighbor_purity".into(), metric(purity, "neighbor_purity"));
    m.insert("knn_recall_vs_exact".into(), metric(knn, "knn_recall"));
    m.insert("recall_alure".into(), metric(recall.alure, "retrieval_recall"));
    m.insert("recall_random_baseline".into(), metric(recall.baseline, "retrieval_recall"));
    m.insert(
        "recall_lift_percent".into(),
        metric(relative_metric_change(recall.alure, recall.baseline)?, "relative_metric_change"),
    );
    m.insert(
        "recall_ratio".into(),
        metric(recall.alure / recall.baseline, "retrieval_recall"),
    );
    m.insert("heldout_ne".into(), metric(ne, "normalized_entropy"));
    m.insert("max_candidates_per_user".into(), metric(max_count as f64, "retrieve_all"));
    m.insert("users_embedded".into(), metric(run.snapshot.len() as f64, "refresh"));
    m.insert("users_skipped".into(), metric(run.skipped_users as f64, "refresh"));
    m.insert("graph_edges".into(), metric(run.graph.graph.n_edges() as f64, "build_graph"));
    m.insert("heldout_users".into(), metric(recall.n_users as f64, "retrieval_recall"));

    Ok(ExperimentReport {
        config_hash: cfg.hash(),
        dataset_seeds: vec![cfg.seed],
        metrics: m,
        per_seed: BTreeMap::new(),
        histogram: run.retrieval.histogram.clone(),
        notes: vec![REPORT_FOOTER.to_string()],
    })
}

/// One seed, end to end.
pub fn run_experiment(cfg: &RunConfig) -> Result<(ExperimentReport, Timing)> {
    let run = run_pipeline(cfg)?;
    let start = Instant::now();
    let report = report_for(&run)?;
    let mut timing = run.timing;
    timing.push(("metrics".into(), start.elapsed().as_secs_f64()));
    Ok((report, timing))
}

/// Runs every seed and reports mean ± sample standard deviation.
pub fn run_sweep(cfg: &RunConfig, seeds: &[u64]) -> Result<(ExperimentReport, Timing)> {
    if seeds.is_empty() {
        return Err(Error::Invalid("no seeds".into()));
    }
    let mut per_seed = BTreeMap::new();
    let mut reports = Vec::new();
    let mut timing = Vec::new();
    for &seed in seeds {
        log::info!("seed {seed}");
        let (r, t) = run_experiment(&cfg.clone().with_seed(seed))?;
        timing.extend(t.into_iter().map(|(stage, s)| (format!("seed{seed}.{stage}"), s)));
        per_seed.insert(
            format!("{seed}"),
            r.metrics.iter().map(|(k, v)| (k.clone(), v.value)).collect(),
        );
        reports.push(r);
    }
    let first = &reports[0];
    let mut metrics = BTreeMap::new();
    for (name, m) in &first.metrics {
        let values: Vec<f64> = reports.iter().map(|r| r.metrics[name].value).collect();
        let (mean, std) = mean_std(&values);
        metrics.insert(
            name.clone(),
            Metric {
                value: mean,
                stddev: Some(std),
                operation: m.operation.clone(),
            },
        );
    }
    let mut histogram = first.histogram.clone();
    for r in &reports[1..] {
        for (a, b) in histogram.counts.iter_mut().zip(&r.histogram.counts) {
            *a += b;
        }
    }
    let report = ExperimentReport {
        config_hash: cfg.clone().with_seed(0).hash(),
        dataset_seeds: seeds.to_vec(),
        metrics,
        per_seed,
        histogram,
        notes: vec![REPORT_FOOTER.to_string()],
    };
    Ok((report, timing))
}

impl ExperimentReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "ALURE synthetic experiment");
        let _ = writeln!(out, "config hash: {}", self.config_hash);
        let _ = writeln!(out, "seeds: {:?}", self.dataset_seeds);
        let _ = writeln!(out);
        for (name, m) in &self.metrics {
            match m.stddev {
                Some(sd) => {
                    let _ = writeln!(out, "{name:<26} {:>14.6} ± {sd:<12.6} [{}]", m.value, m.operation);
                }
                None => {
                    let _ = writeln!(out, "{name:<26} {:>14.6}   [{}]", m.value, m.operation);
                }
            }
        }
        let _ = writeln!(out);
        let _ = writeln!(out, "candidates per user (bucket_low count):");
        for line in self.histogram.to_text().lines() {
            let _ = writeln!(out, "  {line}");
        }
        let _ = writeln!(out);
        for n in &self.notes {
            let _ = writeln!(out, "{n}");
        }
        out
    }
}
