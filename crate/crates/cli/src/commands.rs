use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;
use serde_json::json;

use maskdiff::checkpoint::{Checkpoint, CheckpointKind};
use maskdiff::evalkit::{self, contact_sheet, dataset_digest, eval_mask_fidelity, eval_oracle, file_digest};
use maskdiff::gradcheck;
use maskdiff::pnm::{write_atomic, Raster};
use maskdiff::rng::RngState;
use maskdiff::sampler::sample as run_sampler;
use maskdiff::schedule::NoiseSchedule;
use maskdiff::seg_oracle::{load_oracle, save_oracle, train_oracle as fit_oracle};
use maskdiff::synthdata::{
    gen_dataset, mask_to_tensor, prepare_out_dir, tensor_to_image, tensor_to_mask, write_items, Dataset,
    DatasetManifest, Geometry, Split, SynthItem,
};
use maskdiff::tensor::Tensor;
use maskdiff::trainer::{load_denoiser, Ablation, TrainSetup, Trainer};

use crate::config::{CommandRecord, RunConfig};
use crate::{Common, UsageError};

const CONTACT_ROWS: usize = 16;

struct Invocation {
    cfg: RunConfig,
    seed: u64,
    record: CommandRecord,
}

impl Invocation {
    fn new(common: &Common, name: &str) -> Result<Self> {
        let mut cfg = RunConfig::load(common.config.as_deref())?;
        if let Some(seed) = common.seed {
            cfg.seed = seed;
        }
        cfg.command = None;
        let mut args = BTreeMap::new();
        args.insert("out".to_string(), show(&common.out));
        Ok(Self {
            seed: cfg.seed,
            cfg,
            record: CommandRecord {
                name: name.to_string(),
                args,
            },
        })
    }

    fn arg(&mut self, key: &str, value: impl ToString) {
        self.record.args.insert(key.to_string(), value.to_string());
    }

    fn finish(self, out: &Path) -> Result<()> {
        self.cfg.write_lock(out, self.record)
    }
}

fn show(p: &Path) -> String {
    p.display().to_string()
}

/// Refuses to clear an output directory that holds one of the inputs.
fn guard_inputs(common: &Common, inputs: &[&Path]) -> Result<()> {
    let Ok(out) = common.out.canonicalize() else {
        return Ok(());
    };
    for input in inputs {
        let input = input
            .canonicalize()
            .with_context(|| format!("input {} not found", input.display()))?;
        if input.starts_with(&out) {
            bail!(UsageError(format!(
                "input {} lies inside the output directory {}",
                input.display(),
                out.display()
            )));
        }
    }
    Ok(())
}

fn prepare(common: &Common, inputs: &[&Path]) -> Result<()> {
    guard_inputs(common, inputs)?;
    prepare_out_dir(&common.out, common.overwrite)?;
    Ok(())
}

fn write_jsonl<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut text = String::new();
    for row in rows {
        text.push_str(&serde_json::to_string(&row)?);
        text.push('\n');
    }
    write_atomic(path, text.as_bytes())?;
    Ok(())
}

fn load_split(root: &Path, split: Option<Split>) -> Result<Dataset> {
    let manifest = DatasetManifest::load(root).with_context(|| format!("loading dataset {}", root.display()))?;
    Ok(Dataset::load(&manifest, split)?)
}

pub fn synth_data(common: &Common, n_train: Option<u64>, n_test: Option<u64>, size: Option<usize>) -> Result<()> {
    let mut inv = Invocation::new(common, "synth-data")?;
    let data = &mut inv.cfg.data;
    if let Some(n) = n_train {
        data.n_train = n as usize;
    }
    if let Some(n) = n_test {
        data.n_test = n as usize;
    }
    if let Some(s) = size {
        data.size = s;
    }
    let data = inv.cfg.data.clone();
    let manifest = gen_dataset(
        inv.seed,
        data.n_train,
        data.n_test,
        Geometry { size: data.size },
        &common.out,
        common.overwrite,
    )?;
    let digest = manifest.digest()?;
    write_jsonl(
        &common.out.join("metrics.jsonl"),
        [
            json!({"split": "train", "count": manifest.count(Split::Train)}),
            json!({"split": "test", "count": manifest.count(Split::Test)}),
            json!({"manifest_sha256": digest}),
        ],
    )?;
    inv.finish(&common.out)?;
    println!(
        "wrote {} train / {} test items ({}x{}) to {}",
        data.n_train,
        data.n_test,
        data.size,
        data.size,
        common.out.display()
    );
    Ok(())
}

pub fn train_oracle(common: &Common, data: &Path, epochs: Option<usize>) -> Result<()> {
    let mut inv = Invocation::new(common, "train-oracle")?;
    inv.arg("data", show(data));
    if let Some(e) = epochs {
        inv.cfg.oracle.epochs = e;
    }
    let train = load_split(data, Some(Split::Train))?;
    let test = load_split(data, Some(Split::Test))?;
    prepare(common, &[data])?;
    let cfg = inv.cfg.oracle.clone();
    let run = fit_oracle(&train, &cfg, RngState::new(inv.seed))?;
    write_jsonl(
        &common.out.join("metrics.jsonl"),
        run.losses.iter().enumerate().map(|(i, l)| json!({"step": i + 1, "loss": l})),
    )?;
    let ckpt = common.out.join("oracle.ckpt");
    save_oracle(&ckpt, &cfg, &run.params)?;
    let oracle = maskdiff::seg_oracle::SegOracle::new(cfg.model)?;
    let mut report = eval_oracle(&oracle, &run.params, &test)?;
    report.provenance.seeds = vec![inv.seed];
    report.provenance.checkpoints.insert("oracle".into(), file_digest(&ckpt)?);
    report.provenance.datasets.insert("train".into(), dataset_digest(&train));
    report.provenance.datasets.insert("test".into(), dataset_digest(&test));
    report.provenance.config = serde_json::to_value(&cfg)?;
    report.save(&common.out.join("eval.json"))?;
    inv.finish(&common.out)?;
    println!(
        "oracle trained for {} steps; test mDice {:.4}, mIoU {:.4}",
        run.losses.len(),
        report.m_dice,
        report.m_iou
    );
    Ok(())
}

pub fn train(
    common: &Common,
    data: &Path,
    oracle: Option<&Path>,
    ablation: Option<Ablation>,
    steps: Option<u64>,
    resume: Option<&Path>,
) -> Result<()> {
    let mut inv = Invocation::new(common, "train")?;
    inv.arg("data", show(data));
    if let Some(a) = ablation {
        inv.cfg.train = inv.cfg.train.clone().with_ablation(a);
        inv.arg("ablation", a.name());
    }
    if let Some(s) = steps {
        inv.cfg.train.steps = s;
    }
    inv.cfg.train.seed = inv.seed;
    let mut inputs: Vec<&Path> = vec![data];
    let oracle = match (inv.cfg.train.use_refine, oracle) {
        (true, None) => bail!(UsageError("refinement is enabled; pass --oracle <checkpoint>".into())),
        (true, Some(path)) => {
            inv.arg("oracle", show(path));
            inputs.push(path);
            Some(load_oracle(path)?)
        }
        (false, _) => None,
    };
    if let Some(r) = resume {
        inv.arg("resume", show(r));
        inputs.push(r);
    }
    let train = load_split(data, Some(Split::Train))?;
    let setup = TrainSetup {
        denoiser: inv.cfg.denoiser.clone(),
        schedule: inv.cfg.schedule,
        train: inv.cfg.train.clone(),
        oracle: oracle.as_ref().map(|(o, _)| *o.config()),
    };
    let trainer = Trainer::new(setup, &train)?;
    let state = match resume {
        Some(path) => trainer.state_from_checkpoint(&Checkpoint::load_kind(path, CheckpointKind::Denoiser)?)?,
        None => trainer.init_state(oracle.map(|(_, p)| p))?,
    };
    prepare(common, &inputs)?;
    let start = state.step;
    let state = trainer.run(state, inv.cfg.train.steps, Some(&common.out))?;
    inv.finish(&common.out)?;
    println!(
        "trained steps {}..{}; checkpoint {}",
        start,
        state.step,
        common.out.join("final.ckpt").display()
    );
    Ok(())
}

fn collect_masks(paths: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = std::fs::read_dir(p)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x == "pgm"))
                .collect();
            found.sort();
            files.extend(found);
        } else {
            files.push(p.clone());
        }
    }
    if files.is_empty() {
        bail!(UsageError("no .pgm masks found".into()));
    }
    Ok(files)
}

pub fn sample(common: &Common, ckpt: &Path, masks: &[PathBuf], steps: Option<usize>, eta: Option<f64>) -> Result<()> {
    let mut inv = Invocation::new(common, "sample")?;
    inv.arg("ckpt", show(ckpt));
    inv.arg(
        "masks",
        masks.iter().map(|p| show(p)).collect::<Vec<_>>().join(","),
    );
    if let Some(s) = steps {
        inv.cfg.sampler.num_steps = s;
    }
    if let Some(e) = eta {
        inv.cfg.sampler.eta = e;
    }
    let (setup, denoiser, ema) = load_denoiser(ckpt)?;
    let sched = NoiseSchedule::from_config(&setup.schedule)?;
    inv.cfg.sampler.validate(&sched)?;
    let files = collect_masks(masks)?;
    let mut tensors = Vec::with_capacity(files.len());
    for f in &files {
        let r = Raster::read(f)?;
        if r.channels != 1 {
            bail!("{} is not a single-channel mask", f.display());
        }
        tensors.push(mask_to_tensor(&r));
    }
    let all = Tensor::stack(&tensors).context("masks must share one size")?;
    let mut inputs: Vec<&Path> = vec![ckpt];
    inputs.extend(masks.iter().map(PathBuf::as_path));
    prepare(common, &inputs)?;

    let base = RngState::new(inv.seed);
    let chunk = inv.cfg.eval.chunk.max(1);
    let mut items = Vec::with_capacity(files.len());
    let mut rows = Vec::with_capacity(files.len());
    for (k, start) in (0..files.len()).step_by(chunk).enumerate() {
        let end = (start + chunk).min(files.len());
        let c0 = Tensor::stack(&(start..end).map(|i| all.item(i)).collect::<Vec<_>>())?;
        let x = run_sampler(&denoiser, &ema, &c0, &inv.cfg.sampler, &sched, base.fork(k as u64), None)?;
        for j in 0..end - start {
            let i = start + j;
            let item = SynthItem {
                image: tensor_to_image(&x, j),
                mask: tensor_to_mask(&c0, j),
                blob: None,
                seed: inv.seed,
            };
            items.push((item, i as u64, Split::Train));
            rows.push(json!({"index": i, "mask": show(&files[i]), "chunk": k}));
        }
    }
    write_items(&common.out, &items)?;
    write_jsonl(&common.out.join("metrics.jsonl"), rows)?;
    inv.finish(&common.out)?;
    println!("wrote {} samples to {}", items.len(), common.out.join("images").display());
    Ok(())
}

pub fn eval_fidelity(common: &Common, ckpt: &Path, oracle: &Path, data: &Path, n_samples: Option<usize>) -> Result<()> {
    let mut inv = Invocation::new(common, "eval-fidelity")?;
    inv.arg("ckpt", show(ckpt));
    inv.arg("oracle", show(oracle));
    inv.arg("data", show(data));
    if let Some(n) = n_samples {
        inv.cfg.eval.n_samples = n;
    }
    let (setup, denoiser, ema) = load_denoiser(ckpt)?;
    let (seg, seg_params) = load_oracle(oracle)?;
    let sched = NoiseSchedule::from_config(&setup.schedule)?;
    let test = load_split(data, Some(Split::Test))?;
    let n = match inv.cfg.eval.n_samples {
        0 => test.len(),
        n => n.min(test.len()),
    };
    let (_, masks) = test.batch(&(0..n).collect::<Vec<_>>())?;
    prepare(common, &[ckpt, oracle, data])?;
    let run = eval_mask_fidelity(
        &denoiser,
        &ema,
        &seg,
        &seg_params,
        &masks,
        &inv.cfg.sampler,
        &sched,
        inv.seed,
        inv.cfg.eval.chunk,
    )?;
    let mut report = run.report;
    report.provenance.checkpoints.insert("denoiser".into(), file_digest(ckpt)?);
    report.provenance.checkpoints.insert("oracle".into(), file_digest(oracle)?);
    report.provenance.datasets.insert("test".into(), dataset_digest(&test));
    report.provenance.config = json!({"sampler": inv.cfg.sampler, "n_samples": n, "chunk": inv.cfg.eval.chunk});
    report.save(&common.out.join("report.json"))?;
    write_jsonl(
        &common.out.join("metrics.jsonl"),
        report.items.iter().enumerate().map(|(i, s)| json!({"index": i, "dice": s.dice, "iou": s.iou})),
    )?;
    let rows = n.min(CONTACT_ROWS);
    let pick = |t: &Tensor| Tensor::stack(&(0..rows).map(|i| t.item(i)).collect::<Vec<_>>());
    contact_sheet(&pick(&run.samples)?, &pick(&masks)?, &pick(&run.predictions)?)?
        .write_atomic(&common.out.join("contact_sheet.ppm"))?;
    inv.finish(&common.out)?;
    println!(
        "mask fidelity over {n} samples: mDice {:.4}, mIoU {:.4}, chance mDice {:.4}",
        report.m_dice,
        report.m_iou,
        report.chance_dice.unwrap_or(f64::NAN)
    );
    Ok(())
}

pub fn eval_downstream(common: &Common, real: &Path, synth: Option<&Path>, test: Option<&Path>) -> Result<()> {
    let mut inv = Invocation::new(common, "eval-downstream")?;
    inv.arg("real", show(real));
    let real_train = load_split(real, Some(Split::Train))?;
    let test_root = test.unwrap_or(real);
    inv.arg("test", show(test_root));
    let test_set = load_split(test_root, Some(Split::Test))?;
    let synth_set = match synth {
        Some(p) => {
            inv.arg("synth", show(p));
            Some(load_split(p, None)?)
        }
        None => None,
    };
    let mut inputs = vec![real, test_root];
    inputs.extend(synth);
    prepare(common, &inputs)?;
    let seeds: Vec<u64> = (0..inv.cfg.eval.downstream_seeds as u64)
        .map(|i| inv.seed.wrapping_add(i))
        .collect();
    let report = evalkit::eval_downstream(
        &real_train,
        synth_set.as_ref(),
        &test_set,
        &seeds,
        &inv.cfg.eval.segmenter,
    )?;
    report.save(&common.out.join("report.json"))?;
    write_jsonl(&common.out.join("metrics.jsonl"), &report.per_seed)?;
    inv.finish(&common.out)?;
    println!(
        "median mDice real-only {:.4}, real+synthetic {:.4}, delta {:+.4}",
        report.median_real_only_dice, report.median_augmented_dice, report.median_delta_dice
    );
    Ok(())
}

pub fn grad_check(common: &Common) -> Result<()> {
    let inv = Invocation::new(common, "grad-check")?;
    prepare(common, &[])?;
    let report = gradcheck::run_all(inv.seed)?;
    write_atomic(
        &common.out.join("report.json"),
        serde_json::to_string_pretty(&report)?.as_bytes(),
    )?;
    write_jsonl(&common.out.join("metrics.jsonl"), &report.checks)?;
    inv.finish(&common.out)?;
    for c in &report.checks {
        println!(
            "{:<4} {:<40} max rel err {:.2e} over {}/{} coords",
            if c.passed { "ok" } else { "FAIL" },
            c.name,
            c.max_rel_err,
            c.coords_checked,
            c.coords_total
        );
    }
    if !report.passed() {
        bail!(
            "gradient check failed: max relative error {:.3e} exceeds {:.0e}",
            report.max_rel_err(),
            report.tolerance
        );
    }
    Ok(())
}
