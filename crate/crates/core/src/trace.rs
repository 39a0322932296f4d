//! Expert-activation traces: ingest, synthesis and hot/warm/cold statistics.
//!
//! On disk a trace is JSON lines. The first line is a header
//!
//! ```text
//! {"model_id":"deepseek-v2","batch":512,"num_experts":160,"top_k":6}
//! ```
//!
//! followed by one record per decode step, numbered from 0 without gaps:
//!
//! ```text
//! {"step":0,"layers":[[12,0,3,...],[...],...]}
//! ```
//!
//! Each inner array holds the token count of every routed expert of one
//! layer and must sum to `batch × top_k`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::weighted::WeightedAliasIndex;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::Exec;
use crate::model::ModelSpec;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error at line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("schema violation at step {step}, layer {layer}: {reason}")]
    Schema {
        step: usize,
        layer: usize,
        reason: String,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodeStep {
    pub step_index: usize,
    /// `layers[l][e]` = tokens routed to expert `e` of layer `l`.
    pub layers: Vec<Vec<u32>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActivationTrace {
    pub model_id: String,
    pub batch_size: usize,
    pub num_experts: usize,
    pub top_k: usize,
    pub steps: Vec<DecodeStep>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model_id: String,
    batch: usize,
    num_experts: usize,
    top_k: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StepRecord {
    step: usize,
    layers: Vec<Vec<u32>>,
}

impl ActivationTrace {
    pub fn num_layers(&self) -> usize {
        self.steps.first().map_or(0, |s| s.layers.len())
    }

    pub fn tokens_per_layer(&self) -> u64 {
        (self.batch_size * self.top_k) as u64
    }

    /// Checks conservation, vector lengths and step numbering.
    pub fn validate(&self) -> Result<(), TraceError> {
        let expected = self.tokens_per_layer();
        let num_layers = self.num_layers();
        for (pos, step) in self.steps.iter().enumerate() {
            if step.step_index != pos {
                return Err(TraceError::Schema {
                    step: step.step_index,
                    layer: 0,
                    reason: format!("expected step {pos}"),
                });
            }
            if step.layers.len() != num_layers || num_layers == 0 {
                return Err(TraceError::Schema {
                    step: pos,
                    layer: 0,
                    reason: format!("{} layers, expected {num_layers}", step.layers.len()),
                });
            }
            for (l, loads) in step.layers.iter().enumerate() {
                if loads.len() != self.num_experts {
                    return Err(TraceError::Schema {
                        step: pos,
                        layer: l,
                        reason: format!("{} experts, expected {}", loads.len(), self.num_experts),
                    });
                }
                let sum: u64 = loads.iter().map(|&x| x as u64).sum();
                if sum != expected {
                    return Err(TraceError::Schema {
                        step: pos,
                        layer: l,
                        reason: format!("load sum {sum} != batch x top_k = {expected}"),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let header = Header {
            model_id: self.model_id.clone(),
            batch: self.batch_size,
            num_experts: self.num_experts,
            top_k: self.top_k,
        };
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n")?;
        for s in &self.steps {
            let rec = StepRecord {
                step: s.step_index,
                layers: s.layers.clone(),
            };
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n")?;
        }
        w.flush()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        self.write_jsonl(BufWriter::new(File::create(path)?))
    }
}

pub fn load_trace(path: impl AsRef<Path>) -> Result<ActivationTrace, TraceError> {
    read_trace(BufReader::new(File::open(path)?))
}

pub fn read_trace<R: BufRead>(reader: R) -> Result<ActivationTrace, TraceError> {
    let mut header: Option<Header> = None;
    let mut steps = Vec::new();
    let mut last_line = 0;
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        last_line = lineno;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        if header.is_none() {
            let h: Header = serde_json::from_str(&line).map_err(|e| TraceError::Parse {
                line: lineno,
                reason: format!("bad header: {e}"),
            })?;
            header = Some(h);
            continue;
        }
        let rec: StepRecord = serde_json::from_str(&line).map_err(|e| TraceError::Parse {
            line: lineno,
            reason: e.to_string(),
        })?;
        steps.push(DecodeStep {
            step_index: rec.step,
            layers: rec.layers,
        });
    }
    let Some(h) = header else {
        return Err(TraceError::Parse {
            line: last_line + 1,
            reason: "missing header".into(),
        });
    };
    if steps.is_empty() {
        return Err(TraceError::Parse {
            line: last_line + 1,
            reason: "no steps".into(),
        });
    }
    let trace = ActivationTrace {
        model_id: h.model_id,
        batch_size: h.batch,
        num_experts: h.num_experts,
        top_k: h.top_k,
        steps,
    };
    trace.validate()?;
    Ok(trace)
}

/// Popularity skew and its drift between decode steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SkewProfile {
    /// Zipf exponent over popularity ranks.
    pub zipf_exponent: f64,
    /// Probability that a layer keeps its popularity ranking from one step to the next.
    pub locality: f64,
    /// Fraction of ranks reshuffled when the ranking does change.
    pub rerank_fraction: f64,
}

impl SkewProfile {
    /// Reproduces the measured aggregate skew for DeepSeek-V2 at batch 512:
    /// roughly three quarters of experts are cold and carry under a tenth of
    /// the tokens, a fifth to a quarter are warm.
    pub const DEEPSEEK_BATCH_512: SkewProfile = SkewProfile {
        zipf_exponent: 1.6,
        locality: 0.9,
        rerank_fraction: 0.2,
    };

    pub fn validate(&self) -> Result<(), String> {
        if !(self.zipf_exponent > 0.0) || !self.zipf_exponent.is_finite() {
            return Err(format!("zipf_exponent must be > 0, got {}", self.zipf_exponent));
        }
        if !(0.0..=1.0).contains(&self.locality) {
            return Err(format!("locality must be in [0,1], got {}", self.locality));
        }
        if !(0.0..=1.0).contains(&self.rerank_fraction) {
            return Err(format!(
                "rerank_fraction must be in [0,1], got {}",
                self.rerank_fraction
            ));
        }
        Ok(())
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn substream(seed: u64, salt: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix(seed ^ splitmix(salt)));
    rng.set_stream(stream);
    rng
}

const REJECTION_TRIES: usize = 32;

/// Draws `k` distinct ranks with probability proportional to `weights`,
/// one after another from what remains.
fn draw_distinct(
    rng: &mut ChaCha8Rng,
    alias: &WeightedAliasIndex<f64>,
    weights: &[f64],
    k: usize,
    out: &mut Vec<usize>,
) {
    out.clear();
    while out.len() < k {
        let mut found = None;
        for _ in 0..REJECTION_TRIES {
            let r = alias.sample(rng);
            if !out.contains(&r) {
                found = Some(r);
                break;
            }
        }
        let r = match found {
            Some(r) => r,
            None => {
                let remaining: f64 = weights
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| !out.contains(i))
                    .map(|(_, w)| w)
                    .sum();
                let mut u = rng.random::<f64>() * remaining;
                let mut pick = None;
                for (i, &w) in weights.iter().enumerate() {
                    if out.contains(&i) {
                        continue;
                    }
                    pick = Some(i);
                    if u < w {
                        break;
                    }
                    u -= w;
                }
                pick.expect("k <= number of experts")
            }
        };
        out.push(r);
    }
}

/// Synthesizes a trace with Zipf-skewed popularity that persists between
/// steps with probability `profile.locality`.
///
/// Each token selects `top_k` distinct experts, so every layer vector sums
/// to `batch × top_k`. The result depends only on the arguments.
pub fn generate_trace(
    model: &ModelSpec,
    batch: usize,
    num_steps: usize,
    profile: &SkewProfile,
    seed: u64,
) -> ActivationTrace {
    generate_trace_with(Exec::default(), model, batch, num_steps, profile, seed)
}

pub fn generate_trace_with(
    exec: Exec,
    model: &ModelSpec,
    batch: usize,
    num_steps: usize,
    profile: &SkewProfile,
    seed: u64,
) -> ActivationTrace {
    assert!(batch >= 1 && num_steps >= 1, "batch and num_steps must be >= 1");
    let n = model.num_routed_experts;
    let k = model.top_k;
    let layers = model.num_layers;

    // Rankings evolve sequentially; sampling per (step, layer) is independent.
    let mut rankings: Vec<Vec<Vec<usize>>> = Vec::with_capacity(num_steps);
    let mut current: Vec<Vec<usize>> = (0..layers)
        .map(|l| {
            let mut rng = substream(seed, 1, l as u64);
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng);
            perm
        })
        .collect();
    let reshuffle = ((profile.rerank_fraction * n as f64).round() as usize).min(n);
    let mut drift_rngs: Vec<ChaCha8Rng> = (0..layers).map(|l| substream(seed, 2, l as u64)).collect();
    for t in 0..num_steps {
        if t > 0 {
            for (perm, rng) in current.iter_mut().zip(drift_rngs.iter_mut()) {
                if rng.random::<f64>() >= profile.locality && reshuffle >= 2 {
                    let mut positions: Vec<usize> = (0..n).collect();
                    positions.shuffle(rng);
                    positions.truncate(reshuffle);
                    let mut experts: Vec<usize> = positions.iter().map(|&p| perm[p]).collect();
                    experts.shuffle(rng);
                    for (&p, e) in positions.iter().zip(experts) {
                        perm[p] = e;
                    }
                }
            }
        }
        rankings.push(current.clone());
    }

    let weights: Vec<f64> = (0..n)
        .map(|r| ((r + 1) as f64).powf(-profile.zipf_exponent))
        .collect();
    let alias = WeightedAliasIndex::new(weights.clone()).expect("positive zipf weights");

    let steps = exec.map_range(num_steps, |t| {
        let layers_loads = (0..layers)
            .map(|l| {
                let mut rng = substream(seed, 3, (t * layers + l) as u64);
                let perm = &rankings[t][l];
                let mut loads = vec![0u32; n];
                let mut picks = Vec::with_capacity(k);
                for _ in 0..batch {
                    draw_distinct(&mut rng, &alias, &weights, k, &mut picks);
                    for &r in &picks {
                        loads[perm[r]] += 1;
                    }
                }
                loads
            })
            .collect();
        DecodeStep {
            step_index: t,
            layers: layers_loads,
        }
    });

    ActivationTrace {
        model_id: model.name.clone(),
        batch_size: batch,
        num_experts: n,
        top_k: k,
        steps,
    }
}

/// Load class of an expert.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpertClass {
    Hot,
    Warm,
    Cold,
}

/// Hot at or above `hot_min_tokens`, cold at or below `cold_max_tokens`,
/// warm in between. A load matching both falls to the colder class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifyThresholds {
    pub hot_min_tokens: f64,
    pub cold_max_tokens: f64,
}

impl Default for ClassifyThresholds {
    fn default() -> Self {
        Self {
            hot_min_tokens: 256.0,
            cold_max_tokens: 8.0,
        }
    }
}

impl ClassifyThresholds {
    pub fn classify(&self, load: f64) -> ExpertClass {
        if load <= self.cold_max_tokens {
            ExpertClass::Cold
        } else if load >= self.hot_min_tokens {
            ExpertClass::Hot
        } else {
            ExpertClass::Warm
        }
    }
}

/// Fractions of (step, layer, expert) observations and of tokens per class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub hot_experts: f64,
    pub warm_experts: f64,
    pub cold_experts: f64,
    pub hot_tokens: f64,
    pub warm_tokens: f64,
    pub cold_tokens: f64,
}

pub fn classify_stats(trace: &ActivationTrace, thresholds: &ClassifyThresholds) -> ClassStats {
    let mut experts = [0u64; 3];
    let mut tokens = [0u64; 3];
    for step in &trace.steps {
        for layer in &step.layers {
            for &load in layer {
                let c = match thresholds.classify(load as f64) {
                    ExpertClass::Hot => 0,
                    ExpertClass::Warm => 1,
                    ExpertClass::Cold => 2,
                };
                experts[c] += 1;
                tokens[c] += load as u64;
            }
        }
    }
    let ne = experts.iter().sum::<u64>().max(1) as f64;
    let nt = tokens.iter().sum::<u64>().max(1) as f64;
    ClassStats {
        hot_experts: experts[0] as f64 / ne,
        warm_experts: experts[1] as f64 / ne,
        cold_experts: experts[2] as f64 / ne,
        hot_tokens: tokens[0] as f64 / nt,
        warm_tokens: tokens[1] as f64 / nt,
        cold_tokens: tokens[2] as f64 / nt,
    }
}

/// Finds the Zipf exponent whose generated traces give cold experts
/// `target_cold_tokens` of all tokens, by bisection over `[lo, hi]`.
pub fn calibrate_zipf_exponent(
    model: &ModelSpec,
    batch: usize,
    target_cold_tokens: f64,
    thresholds: &ClassifyThresholds,
    seed: u64,
) -> f64 {
    // Few layers and steps suffice for the aggregate statistic.
    let mut probe = model.clone();
    probe.num_layers = probe.num_layers.min(8);
    let stat = |s: f64| {
        let profile = SkewProfile {
            zipf_exponent: s,
            locality: 1.0,
            rerank_fraction: 0.0,
        };
        classify_stats(&generate_trace(&probe, batch, 4, &profile, seed), thresholds).cold_tokens
    };
    let (mut lo, mut hi) = (0.3, 3.0);
    // cold token share falls as skew grows over this range
    for _ in 0..30 {
        let mid = 0.5 * (lo + hi);
        if stat(mid) > target_cold_tokens {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}
