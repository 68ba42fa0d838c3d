//! Token-to-expert selection traces: balanced training traces for profiling
//! and skewed inference traces with known ground truth for estimator checks.
//!
//! The generator draws each token's next expert from a seeded transition
//! structure with probability `pattern_strength`, else from the layer's
//! marginal. The pattern blends a first-order permutation map keyed on the
//! current expert with a skip-layer permutation keyed on the expert two
//! layers back, so short sample paths genuinely carry less information than
//! longer ones while balanced marginals stay balanced (bijections preserve
//! uniformity exactly).

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{ExpertId, ModelSpec};

/// Share of the pattern branch routed through the skip-layer map instead of
/// the first-order map. Zeroed at pattern strength 1 so the fully-patterned
/// limit stays a deterministic function of the current expert.
const SKIP_BLEND: f64 = 0.15;

#[derive(Debug, Error)]
pub enum WorkloadError {
    #[error("trace needs at least two layers")]
    TraceTooShort,
    #[error("parse error at line {line}: {message}")]
    ParseError { line: usize, message: String },
    #[error("schema mismatch at line {line}: {message}")]
    SchemaMismatch { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceMode {
    TrainingBalanced,
    InferenceSkewed,
}

/// Generator knobs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorParams {
    /// Probability a token follows its path-consistent expert into the next
    /// layer.
    pub pattern_strength: f64,
    /// Popularity skew exponent per layer (inference mode).
    pub zipf_s: f64,
    pub tokens_per_batch: u32,
    pub num_batches: u32,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceMeta {
    pub layers: u32,
    pub experts: u16,
    pub top_k: u16,
    pub seed: u64,
    pub mode: TraceMode,
    pub pattern_strength: f64,
    pub zipf_s: f64,
    pub tokens_per_batch: u32,
    pub num_batches: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    #[serde(rename = "b")]
    pub batch: u32,
    #[serde(rename = "t")]
    pub token: u32,
    #[serde(rename = "sel")]
    pub selections: Vec<Vec<ExpertId>>,
}

impl TraceRecord {
    /// Highest-ranked expert at a layer, the path key.
    pub fn top1(&self, layer: usize) -> ExpertId {
        self.selections[layer][0]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceSet {
    pub meta: TraceMeta,
    pub records: Vec<TraceRecord>,
}

impl TraceSet {
    pub fn batch(&self, b: u32) -> impl Iterator<Item = &TraceRecord> {
        self.records.iter().filter(move |r| r.batch == b)
    }
}

/// The seeded structure behind a generated trace, exact by construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub pattern_strength: f64,
    /// Effective skip-map share of the pattern branch.
    pub skip_blend: f64,
    /// psi[t-1][b]: first-order map into target layer t (targets start at 1).
    pub psi: Vec<Vec<ExpertId>>,
    /// skip[t-2][a]: skip-layer map into target layer t >= 2, keyed on the
    /// expert selected two layers earlier.
    pub skip: Vec<Vec<ExpertId>>,
    /// Draw marginal per layer (the no-pattern branch).
    pub marginals: Vec<Vec<f64>>,
}

impl GroundTruth {
    fn experts(&self) -> usize {
        self.marginals[0].len()
    }

    /// Exact conditional distribution over target-layer experts given the
    /// top-1 picks at the two preceding layers. `a` is ignored for target 1.
    pub fn pair_transition(&self, target: usize, a: ExpertId, b: ExpertId) -> Vec<f64> {
        let p = self.pattern_strength;
        let q = if target >= 2 { self.skip_blend } else { 0.0 };
        let mut row: Vec<f64> = self.marginals[target]
            .iter()
            .map(|m| (1.0 - p) * m)
            .collect();
        row[self.psi[target - 1][b as usize] as usize] += p * (1.0 - q);
        if target >= 2 {
            row[self.skip[target - 2][a as usize] as usize] += p * q;
        }
        row
    }

    /// Exact first-order rows P(next | current) per target layer, obtained by
    /// propagating the pair joint through the chain.
    pub fn first_order_rows(&self) -> Vec<Vec<Vec<f64>>> {
        let e = self.experts();
        let layers = self.marginals.len();
        let mut rows = Vec::new();
        if layers < 2 {
            return rows;
        }
        // joint[a][b] over (layer t-1, layer t), seeded with layers 0 and 1
        let mut joint = vec![vec![0.0f64; e]; e];
        for a in 0..e {
            for b in 0..e {
                let mut p = (1.0 - self.pattern_strength) * self.marginals[1][b];
                if self.psi[0][a] as usize == b {
                    p += self.pattern_strength;
                }
                joint[a][b] = self.marginals[0][a] * p;
            }
        }
        rows.push(
            (0..e)
                .map(|b| self.pair_transition(1, 0, b as ExpertId))
                .collect(),
        );
        for target in 2..layers {
            let mut row_t = vec![vec![0.0f64; e]; e];
            let mut next_joint = vec![vec![0.0f64; e]; e];
            for b in 0..e {
                let mass: f64 = (0..e).map(|a| joint[a][b]).sum();
                for a in 0..e {
                    if joint[a][b] == 0.0 {
                        continue;
                    }
                    let cond = self.pair_transition(target, a as ExpertId, b as ExpertId);
                    for (c, &pc) in cond.iter().enumerate() {
                        row_t[b][c] += joint[a][b] * pc;
                        next_joint[b][c] += joint[a][b] * pc;
                    }
                }
                if mass > 0.0 {
                    for c in 0..e {
                        row_t[b][c] /= mass;
                    }
                }
            }
            rows.push(row_t);
            joint = next_joint;
        }
        rows
    }
}

struct Structure {
    psi: Vec<Vec<ExpertId>>,
    skip: Vec<Vec<ExpertId>>,
    skip_blend: f64,
    marginals: Vec<Vec<f64>>,
    cumulative: Vec<Vec<f64>>,
}

/// Zipf probabilities over ranks 1..=n with exponent s.
fn zipf_probs(n: usize, s: f64) -> Vec<f64> {
    let weights: Vec<f64> = (1..=n).map(|r| (r as f64).powf(-s)).collect();
    let total: f64 = weights.iter().sum();
    weights.into_iter().map(|w| w / total).collect()
}

fn permutation(e: usize, rng: &mut ChaCha8Rng) -> Vec<ExpertId> {
    let mut p: Vec<ExpertId> = (0..e as u16).collect();
    p.shuffle(rng);
    p
}

fn build_structure(params: &GeneratorParams, model: &ModelSpec, mode: TraceMode) -> Structure {
    let e = model.experts_per_layer as usize;
    let layers = model.num_layers as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);

    let mut psi = Vec::new();
    for _ in 1..layers {
        psi.push(permutation(e, &mut rng));
    }
    // The skip maps are independent permutations: pushing any uniform
    // marginal through a bijection stays uniform, so the second-order blend
    // cannot skew balanced traces no matter how pattern mass accumulates.
    let skip_blend = if params.pattern_strength >= 1.0 {
        0.0
    } else {
        SKIP_BLEND
    };
    let mut skip = Vec::new();
    for _ in 2..layers {
        skip.push(permutation(e, &mut rng));
    }

    let mut marginals = Vec::new();
    match mode {
        TraceMode::TrainingBalanced => {
            for _ in 0..layers {
                marginals.push(vec![1.0 / e as f64; e]);
            }
        }
        TraceMode::InferenceSkewed => {
            let probs = zipf_probs(e, params.zipf_s);
            // Rank assignment chained through the first-order maps keeps the
            // pattern branch and the draw branch skew-aligned, so every layer
            // stays Zipf-shaped while its popular experts differ.
            let mut rank_to_expert = permutation(e, &mut rng);
            for layer in 0..layers {
                if layer > 0 {
                    rank_to_expert = rank_to_expert
                        .iter()
                        .map(|&x| psi[layer - 1][x as usize])
                        .collect();
                }
                let mut m = vec![0.0; e];
                for (rank, &expert) in rank_to_expert.iter().enumerate() {
                    m[expert as usize] = probs[rank];
                }
                marginals.push(m);
            }
        }
    }
    let cumulative = marginals
        .iter()
        .map(|m| {
            let mut acc = 0.0;
            m.iter()
                .map(|p| {
                    acc += p;
                    acc
                })
                .collect()
        })
        .collect();
    Structure {
        psi,
        skip,
        skip_blend,
        marginals,
        cumulative,
    }
}

fn sample_marginal(cum: &[f64], rng: &mut ChaCha8Rng) -> ExpertId {
    let x: f64 = rng.gen();
    match cum.iter().position(|&c| x < c) {
        Some(i) => i as ExpertId,
        None => (cum.len() - 1) as ExpertId,
    }
}

/// Generates a trace and its exact ground truth. Deterministic per seed;
/// batches draw from independent derived streams.
pub fn gen_trace(
    params: &GeneratorParams,
    model: &ModelSpec,
    mode: TraceMode,
) -> (TraceSet, GroundTruth) {
    assert!(
        (0.0..=1.0).contains(&params.pattern_strength),
        "pattern_strength must be in [0,1]"
    );
    assert!(params.zipf_s >= 0.0, "zipf_s must be >= 0");
    let structure = build_structure(params, model, mode);
    let layers = model.num_layers as usize;
    let e = model.experts_per_layer as usize;
    let k = model.gating_top_k as usize;
    let p = params.pattern_strength;

    let mut records = Vec::with_capacity((params.num_batches * params.tokens_per_batch) as usize);
    for batch in 0..params.num_batches {
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        rng.set_stream(batch as u64 + 1);
        for token in 0..params.tokens_per_batch {
            let mut selections: Vec<Vec<ExpertId>> = Vec::with_capacity(layers);
            for layer in 0..layers {
                let top = if layer == 0 {
                    sample_marginal(&structure.cumulative[0], &mut rng)
                } else if rng.gen::<f64>() < p {
                    let b = selections[layer - 1][0];
                    if layer >= 2 && rng.gen::<f64>() < structure.skip_blend {
                        let a = selections[layer - 2][0];
                        structure.skip[layer - 2][a as usize]
                    } else {
                        structure.psi[layer - 1][b as usize]
                    }
                } else {
                    sample_marginal(&structure.cumulative[layer], &mut rng)
                };
                let mut sel = vec![top];
                while sel.len() < k {
                    let cand = rng.gen_range(0..e) as ExpertId;
                    if !sel.contains(&cand) {
                        sel.push(cand);
                    }
                }
                selections.push(sel);
            }
            records.push(TraceRecord {
                batch,
                token,
                selections,
            });
        }
    }

    let meta = TraceMeta {
        layers: model.num_layers,
        experts: model.experts_per_layer,
        top_k: model.gating_top_k,
        seed: params.seed,
        mode,
        pattern_strength: params.pattern_strength,
        zipf_s: params.zipf_s,
        tokens_per_batch: params.tokens_per_batch,
        num_batches: params.num_batches,
    };
    let truth = GroundTruth {
        pattern_strength: p,
        skip_blend: structure.skip_blend,
        psi: structure.psi,
        skip: structure.skip,
        marginals: structure.marginals,
    };
    (TraceSet { meta, records }, truth)
}

/// Per-layer ratio of tokens whose next-layer expert falls in their current
/// group's local top-k, the selection-pattern statistic.
pub fn measure_pattern(trace: &TraceSet, k: usize) -> Result<Vec<f64>, WorkloadError> {
    let layers = trace.meta.layers as usize;
    if layers < 2 {
        return Err(WorkloadError::TraceTooShort);
    }
    let e = trace.meta.experts as usize;
    let mut ratios = Vec::with_capacity(layers - 1);
    for layer in 0..layers - 1 {
        // next-expert counts per current-expert group
        let mut counts = vec![vec![0u64; e]; e];
        for r in &trace.records {
            counts[r.top1(layer) as usize][r.top1(layer + 1) as usize] += 1;
        }
        let mut hits = 0u64;
        let mut total = 0u64;
        for group in counts {
            let size: u64 = group.iter().sum();
            if size == 0 {
                continue;
            }
            let mut ranked: Vec<(u64, usize)> =
                group.iter().enumerate().map(|(i, &c)| (c, i)).collect();
            ranked.sort_by(|x, y| y.0.cmp(&x.0).then(x.1.cmp(&y.1)));
            let top: u64 = ranked.iter().take(k).map(|(c, _)| *c).sum();
            hits += top;
            total += size;
        }
        ratios.push(if total > 0 {
            hits as f64 / total as f64
        } else {
            0.0
        });
    }
    Ok(ratios)
}

/// Largest relative deviation of per-layer expert frequencies from uniform.
pub fn marginal_uniform_deviation(trace: &TraceSet) -> f64 {
    let e = trace.meta.experts as usize;
    let layers = trace.meta.layers as usize;
    let mut worst: f64 = 0.0;
    for layer in 0..layers {
        let mut counts = vec![0u64; e];
        for r in &trace.records {
            counts[r.top1(layer) as usize] += 1;
        }
        let total: u64 = counts.iter().sum();
        let expected = total as f64 / e as f64;
        for &c in &counts {
            worst = worst.max((c as f64 - expected).abs() / expected);
        }
    }
    worst
}

pub fn save_trace(trace: &TraceSet, path: &Path) -> Result<(), WorkloadError> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut w, &trace.meta).map_err(|e| WorkloadError::Io(e.into()))?;
    w.write_all(b"\n")?;
    for r in &trace.records {
        serde_json::to_writer(&mut w, r).map_err(|e| WorkloadError::Io(e.into()))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_trace(path: &Path) -> Result<TraceSet, WorkloadError> {
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines();
    let meta_line = lines.next().ok_or(WorkloadError::ParseError {
        line: 1,
        message: "empty trace file".into(),
    })??;
    let meta: TraceMeta =
        serde_json::from_str(&meta_line).map_err(|e| WorkloadError::ParseError {
            line: 1,
            message: e.to_string(),
        })?;
    let mut records = Vec::new();
    for (i, line) in lines.enumerate() {
        let line_no = i + 2;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: TraceRecord =
            serde_json::from_str(&line).map_err(|e| WorkloadError::ParseError {
                line: line_no,
                message: e.to_string(),
            })?;
        if record.selections.len() != meta.layers as usize {
            return Err(WorkloadError::SchemaMismatch {
                line: line_no,
                message: format!(
                    "token has {} layer selections, metadata says {}",
                    record.selections.len(),
                    meta.layers
                ),
            });
        }
        for sel in &record.selections {
            if sel.len() != meta.top_k as usize {
                return Err(WorkloadError::SchemaMismatch {
                    line: line_no,
                    message: format!("selection width {} != top_k {}", sel.len(), meta.top_k),
                });
            }
            for &ex in sel {
                if ex >= meta.experts {
                    return Err(WorkloadError::SchemaMismatch {
                        line: line_no,
                        message: format!("expert index {ex} >= {}", meta.experts),
                    });
                }
            }
        }
        records.push(record);
    }
    Ok(TraceSet { meta, records })
}

pub fn save_ground_truth(truth: &GroundTruth, path: &Path) -> Result<(), WorkloadError> {
    let w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(w, truth).map_err(|e| WorkloadError::Io(e.into()))?;
    Ok(())
}

pub fn load_ground_truth(path: &Path) -> Result<GroundTruth, WorkloadError> {
    let r = BufReader::new(File::open(path)?);
    serde_json::from_reader(r).map_err(|e| WorkloadError::ParseError {
        line: 0,
        message: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model(layers: u32, experts: u16, top_k: u16) -> ModelSpec {
        ModelSpec {
            num_layers: layers,
            experts_per_layer: experts,
            token_embedding_bytes: 1024,
            nonexpert_grad_bytes: vec![],
            gating_top_k: top_k,
        }
    }

    fn params(p: f64, zipf: f64, tokens: u32, batches: u32, seed: u64) -> GeneratorParams {
        GeneratorParams {
            pattern_strength: p,
            zipf_s: zipf,
            tokens_per_batch: tokens,
            num_batches: batches,
            seed,
        }
    }

    #[test]
    fn generation_is_reproducible() {
        let m = model(6, 8, 2);
        let p = params(0.5, 0.0, 64, 4, 42);
        let (a, ta) = gen_trace(&p, &m, TraceMode::TrainingBalanced);
        let (b, tb) = gen_trace(&p, &m, TraceMode::TrainingBalanced);
        assert_eq!(a, b);
        assert_eq!(ta, tb);
    }

    #[test]
    fn full_pattern_strength_is_deterministic_in_current_expert() {
        let m = model(8, 8, 1);
        let p = params(1.0, 0.0, 256, 2, 3);
        let (trace, truth) = gen_trace(&p, &m, TraceMode::TrainingBalanced);
        assert_eq!(truth.skip_blend, 0.0);
        for r in &trace.records {
            for layer in 1..8usize {
                let b = r.top1(layer - 1);
                assert_eq!(r.top1(layer), truth.psi[layer - 1][b as usize]);
            }
        }
    }

    #[test]
    fn independent_trace_pattern_ratio_near_chance() {
        let m = model(4, 16, 1);
        let p = params(0.0, 0.0, 2500, 4, 11);
        let (trace, _) = gen_trace(&p, &m, TraceMode::TrainingBalanced);
        let ratios = measure_pattern(&trace, 1).unwrap();
        for r in ratios {
            assert!((r - 1.0 / 16.0).abs() < 0.03, "ratio {r}");
        }
    }

    #[test]
    fn calibrated_pattern_ratio_in_paper_band() {
        let m = model(12, 16, 1);
        let p = params(0.42, 0.0, 2000, 10, 5);
        let (trace, _) = gen_trace(&p, &m, TraceMode::TrainingBalanced);
        let ratios = measure_pattern(&trace, 1).unwrap();
        let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
        assert!((0.37..=0.47).contains(&mean), "mean follow ratio {mean}");
    }

    #[test]
    fn training_marginals_stay_near_uniform() {
        for seed in [1, 2, 3, 4, 5] {
            let m = model(6, 16, 2);
            let p = params(0.6, 0.0, 16000, 8, seed);
            let (trace, _) = gen_trace(&p, &m, TraceMode::TrainingBalanced);
            let dev = marginal_uniform_deviation(&trace);
            assert!(dev < 0.05, "seed {seed}: relative deviation {dev}");
        }
    }

    #[test]
    fn skewed_mode_hits_token_ratio_four() {
        // 4 experts with s = 1: ranks get 1, 1/2, 1/3, 1/4 -> max/min = 4.
        let m = model(6, 4, 1);
        let p = params(0.6, 1.0, 10000, 5, 9);
        let (trace, _) = gen_trace(&p, &m, TraceMode::InferenceSkewed);
        let mut counts = vec![0u64; 4];
        for r in &trace.records {
            counts[r.top1(0) as usize] += 1;
        }
        let max = *counts.iter().max().unwrap() as f64;
        let min = *counts.iter().min().unwrap() as f64;
        let ratio = max / min;
        assert!((3.4..=4.6).contains(&ratio), "max/min token ratio {ratio}");
    }

    #[test]
    fn empirical_transitions_match_exact_rows() {
        let m = model(6, 16, 1);
        let p = params(0.6, 0.0, 5000, 10, 21);
        let (trace, truth) = gen_trace(&p, &m, TraceMode::TrainingBalanced);
        let rows = truth.first_order_rows();
        // layer 2 -> 3 transition, well past the chain start
        let target = 3usize;
        let e = 16usize;
        let mut counts = vec![vec![0u64; e]; e];
        for r in &trace.records {
            counts[r.top1(target - 1) as usize][r.top1(target) as usize] += 1;
        }
        for b in 0..e {
            let total: u64 = counts[b].iter().sum();
            if total < 500 {
                continue;
            }
            for c in 0..e {
                let emp = counts[b][c] as f64 / total as f64;
                let exact = rows[target - 1][b][c];
                assert!(
                    (emp - exact).abs() < 0.02,
                    "row {b} col {c}: empirical {emp} vs exact {exact}"
                );
            }
        }
    }

    #[test]
    fn trace_round_trips_through_jsonl() {
        let m = model(4, 8, 2);
        let p = params(0.5, 0.5, 32, 2, 77);
        let (trace, _) = gen_trace(&p, &m, TraceMode::InferenceSkewed);
        let dir = std::env::temp_dir().join("linasim-workload-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("roundtrip.jsonl");
        save_trace(&trace, &path).unwrap();
        let loaded = load_trace(&path).unwrap();
        assert_eq!(trace, loaded);
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = std::env::temp_dir().join("linasim-workload-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("malformed.jsonl");
        let mut content = String::new();
        content.push_str(
            "{\"layers\":2,\"experts\":4,\"top_k\":1,\"seed\":1,\"mode\":\"training_balanced\",\"pattern_strength\":0.0,\"zipf_s\":0.0,\"tokens_per_batch\":4,\"num_batches\":1}\n",
        );
        for i in 0..5 {
            content.push_str(&format!("{{\"b\":0,\"t\":{i},\"sel\":[[0],[1]]}}\n"));
        }
        content.push_str("{\"b\":0,\"t\":5,\"sel\":[[0],[1]]\n"); // line 7, broken
        std::fs::write(&path, content).unwrap();
        match load_trace(&path) {
            Err(WorkloadError::ParseError { line, .. }) => assert_eq!(line, 7),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn out_of_range_expert_is_schema_mismatch() {
        let dir = std::env::temp_dir().join("linasim-workload-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("schema.jsonl");
        let content = "{\"layers\":2,\"experts\":4,\"top_k\":1,\"seed\":1,\"mode\":\"training_balanced\",\"pattern_strength\":0.0,\"zipf_s\":0.0,\"tokens_per_batch\":1,\"num_batches\":1}\n{\"b\":0,\"t\":0,\"sel\":[[0],[9]]}\n";
        std::fs::write(&path, content).unwrap();
        match load_trace(&path) {
            Err(WorkloadError::SchemaMismatch { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected schema mismatch, got {other:?}"),
        }
    }

    #[test]
    fn deterministic_trace_measures_full_pattern() {
        let m = model(3, 8, 1);
        let p = params(1.0, 0.0, 4000, 2, 13);
        let (trace, _) = gen_trace(&p, &m, TraceMode::TrainingBalanced);
        let ratios = measure_pattern(&trace, 1).unwrap();
        for r in ratios {
            assert_eq!(r, 1.0);
        }
    }
}
