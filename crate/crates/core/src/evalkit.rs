//! Mask-fidelity and downstream-utility evaluation.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::Denoiser;
use crate::error::{Error, Result};
use crate::params::ParamVector;
use crate::pnm::Raster;
use crate::rng::RngState;
use crate::sampler::{sample, SamplerConfig};
use crate::schedule::NoiseSchedule;
use crate::seg_oracle::{train_oracle, SegOracle, SegTrainConfig};
use crate::synthdata::{hex, tensor_to_image, Dataset};
use crate::tensor::Tensor;

pub const THRESHOLD: f64 = 0.5;

/// Per-item `(dice, iou)` of `pred > 0.5` against a binary `target`.
/// Two empty masks count as a perfect match.
pub fn dice_iou(pred: &Tensor, target: &Tensor) -> Result<Vec<(f64, f64)>> {
    pred.ensure_same_shape(target, "dice prediction/target")?;
    if pred.channels() != 1 {
        return Err(Error::Input("dice expects single-channel maps".into()));
    }
    Ok((0..pred.batch())
        .map(|n| {
            let (mut inter, mut p_sum, mut t_sum) = (0usize, 0usize, 0usize);
            for (&p, &t) in pred.item_slice(n).iter().zip(target.item_slice(n)) {
                let p = p > THRESHOLD;
                let t = t > THRESHOLD;
                inter += usize::from(p && t);
                p_sum += usize::from(p);
                t_sum += usize::from(t);
            }
            if p_sum + t_sum == 0 {
                return (1.0, 1.0);
            }
            let dice = 2.0 * inter as f64 / (p_sum + t_sum) as f64;
            let iou = inter as f64 / (p_sum + t_sum - inter) as f64;
            (dice, iou)
        })
        .collect())
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seeds: Vec<u64>,
    /// Name → SHA-256 of the checkpoint file.
    pub checkpoints: BTreeMap<String, String>,
    /// Name → SHA-256 of the dataset manifest or item digests.
    pub datasets: BTreeMap<String, String>,
    pub config: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemScore {
    pub index: usize,
    pub dice: f64,
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub items: Vec<ItemScore>,
    pub m_dice: f64,
    pub m_iou: f64,
    /// Mean Dice of predictions scored against masks of other items.
    pub chance_dice: Option<f64>,
    pub provenance: Provenance,
}

impl EvalReport {
    pub fn from_scores(scores: &[(f64, f64)], provenance: Provenance) -> Self {
        let n = scores.len().max(1) as f64;
        Self {
            items: scores
                .iter()
                .enumerate()
                .map(|(index, &(dice, iou))| ItemScore { index, dice, iou })
                .collect(),
            m_dice: scores.iter().map(|s| s.0).sum::<f64>() / n,
            m_iou: scores.iter().map(|s| s.1).sum::<f64>() / n,
            chance_dice: None,
            provenance,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::pnm::write_atomic(path, serde_json::to_string_pretty(self)?.as_bytes())
    }
}

pub fn file_digest(path: &Path) -> Result<String> {
    use sha2::{Digest, Sha256};
    Ok(hex(&Sha256::digest(std::fs::read(path)?)))
}

/// SHA-256 over the concatenated per-item digests of a dataset.
pub fn dataset_digest(data: &Dataset) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    for d in &data.digests {
        h.update(d);
    }
    hex(&h.finalize())
}

/// Samples, oracle maps and scores of one fidelity run.
#[derive(Debug, Clone)]
pub struct FidelityRun {
    pub samples: Tensor,
    pub predictions: Tensor,
    pub report: EvalReport,
}

/// Generates one image per mask, segments it with the oracle and scores
/// the global map against the conditioning mask.
#[allow(clippy::too_many_arguments)]
pub fn eval_mask_fidelity(
    denoiser: &Denoiser,
    params: &ParamVector,
    oracle: &SegOracle,
    oracle_params: &ParamVector,
    masks: &Tensor,
    sampler: &SamplerConfig,
    sched: &NoiseSchedule,
    seed: u64,
    chunk: usize,
) -> Result<FidelityRun> {
    if masks.batch() == 0 {
        return Err(Error::Input("no masks to evaluate".into()));
    }
    let chunk = chunk.max(1);
    let base = RngState::new(seed);
    let mut samples = Vec::new();
    let mut preds = Vec::new();
    let idx: Vec<usize> = (0..masks.batch()).collect();
    for (k, part) in idx.chunks(chunk).enumerate() {
        let c0 = Tensor::stack(&part.iter().map(|&i| masks.item(i)).collect::<Vec<_>>())?;
        let x = sample(denoiser, params, &c0, sampler, sched, base.fork(k as u64), None)?;
        let seg = oracle.segment(oracle_params, &x)?;
        for i in 0..part.len() {
            samples.push(x.item(i));
            preds.push(seg.cg.item(i));
        }
    }
    let samples = Tensor::stack(&samples)?;
    let predictions = Tensor::stack(&preds)?;
    let scores = dice_iou(&predictions, masks)?;
    let mut report = EvalReport::from_scores(
        &scores,
        Provenance {
            seeds: vec![seed],
            ..Default::default()
        },
    );
    report.chance_dice = Some(chance_dice(&predictions, masks, seed, 8)?);
    Ok(FidelityRun {
        samples,
        predictions,
        report,
    })
}

/// Mean Dice of prediction `i` against mask `(i + s) mod n` for random
/// nonzero shifts `s`, averaged over `rounds`.
pub fn chance_dice(preds: &Tensor, masks: &Tensor, seed: u64, rounds: usize) -> Result<f64> {
    let n = masks.batch();
    if n < 2 {
        return Err(Error::Input("chance baseline needs at least two masks".into()));
    }
    let mut g = RngState::new(seed).fork(0xC4A2).generator();
    let mut total = 0.0;
    for _ in 0..rounds {
        let s = g.random_range(1..n);
        let shifted = Tensor::stack(&(0..n).map(|i| masks.item((i + s) % n)).collect::<Vec<_>>())?;
        let scores = dice_iou(preds, &shifted)?;
        total += scores.iter().map(|d| d.0).sum::<f64>() / n as f64;
    }
    Ok(total / rounds as f64)
}

/// Scores the oracle on images with known masks.
pub fn eval_oracle(oracle: &SegOracle, params: &ParamVector, data: &Dataset) -> Result<EvalReport> {
    let mut scores = Vec::with_capacity(data.len());
    let idx: Vec<usize> = (0..data.len()).collect();
    for part in idx.chunks(16) {
        let (x, c0) = data.batch(part)?;
        scores.extend(dice_iou(&oracle.segment(params, &x)?.cg, &c0)?);
    }
    let mut prov = Provenance::default();
    prov.datasets.insert("eval".into(), dataset_digest(data));
    Ok(EvalReport::from_scores(&scores, prov))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub real_only: (f64, f64),
    pub augmented: (f64, f64),
    pub delta_dice: f64,
    pub delta_iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DownstreamReport {
    pub per_seed: Vec<SeedResult>,
    pub median_real_only_dice: f64,
    pub median_augmented_dice: f64,
    pub median_delta_dice: f64,
    pub median_delta_iou: f64,
    pub provenance: Provenance,
}

impl DownstreamReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        crate::pnm::write_atomic(path, serde_json::to_string_pretty(self)?.as_bytes())
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Fails if any test item also appears in a training set.
pub fn check_split_hygiene(test: &Dataset, train: &[&Dataset]) -> Result<()> {
    let seen: std::collections::HashSet<&[u8; 32]> = train.iter().flat_map(|d| d.digests.iter()).collect();
    if let Some(k) = test.digests.iter().position(|d| seen.contains(d)) {
        return Err(Error::Input(format!("test item {k} also appears in a training set")));
    }
    Ok(())
}

/// Trains a fresh segmenter per seed on the real set and on real plus
/// synthetic items, then scores both on `test`.
pub fn eval_downstream(
    real: &Dataset,
    synth: Option<&Dataset>,
    test: &Dataset,
    seeds: &[u64],
    config: &SegTrainConfig,
) -> Result<DownstreamReport> {
    let empty = Dataset::default();
    let synth = synth.unwrap_or(&empty);
    check_split_hygiene(test, &[real, synth])?;
    if real.is_empty() || test.is_empty() || seeds.is_empty() {
        return Err(Error::Input("downstream evaluation needs real, test and seeds".into()));
    }
    let mut combined = real.clone();
    combined.extend(synth);
    let oracle = SegOracle::new(config.model)?;
    let score = |data: &Dataset, seed: u64| -> Result<(f64, f64)> {
        let run = train_oracle(data, config, RngState::new(seed))?;
        let r = eval_oracle(&oracle, &run.params, test)?;
        Ok((r.m_dice, r.m_iou))
    };
    let mut per_seed = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let real_only = score(real, seed)?;
        let augmented = if synth.is_empty() { real_only } else { score(&combined, seed)? };
        per_seed.push(SeedResult {
            seed,
            real_only,
            augmented,
            delta_dice: augmented.0 - real_only.0,
            delta_iou: augmented.1 - real_only.1,
        });
    }
    let col = |f: fn(&SeedResult) -> f64| median(&per_seed.iter().map(f).collect::<Vec<_>>());
    let mut provenance = Provenance {
        seeds: seeds.to_vec(),
        config: serde_json::to_value(config)?,
        ..Default::default()
    };
    provenance.datasets.insert("real".into(), dataset_digest(real));
    provenance.datasets.insert("synthetic".into(), dataset_digest(synth));
    provenance.datasets.insert("test".into(), dataset_digest(test));
    Ok(DownstreamReport {
        median_real_only_dice: col(|s| s.real_only.0),
        median_augmented_dice: col(|s| s.augmented.0),
        median_delta_dice: col(|s| s.delta_dice),
        median_delta_iou: col(|s| s.delta_iou),
        per_seed,
        provenance,
    })
}

/// One row per item: generated sample | conditioning mask | oracle map.
pub fn contact_sheet(samples: &Tensor, masks: &Tensor, preds: &Tensor) -> Result<Raster> {
    let [n, _, h, w] = samples.shape();
    if masks.shape() != [n, 1, h, w] || preds.shape() != [n, 1, h, w] {
        return Err(Error::Shape("contact sheet inputs disagree in shape".into()));
    }
    let gap = 2;
    let width = 3 * w + 2 * gap;
    let height = n * h + n.saturating_sub(1) * gap;
    let mut data = vec![255u8; width * height * 3];
    for i in 0..n {
        let img = tensor_to_image(samples, i);
        let gray = |t: &Tensor| -> Vec<u8> {
            t.item_slice(i).iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
        };
        let (m, p) = (gray(masks), gray(preds));
        for y in 0..h {
            let row = (i * (h + gap) + y) * width;
            for x in 0..w {
                let k = y * w + x;
                for c in 0..3 {
                    data[(row + x) * 3 + c] = img.data[k * 3 + c];
                    data[(row + w + gap + x) * 3 + c] = m[k];
                    data[(row + 2 * (w + gap) + x) * 3 + c] = p[k];
                }
            }
        }
    }
    Ok(Raster {
        width,
        height,
        channels: 3,
        data,
    })
}
