//! Individual subcommand implementations. Each is a thin file-in/file-out
//! wrapper over the library.

use crate::manifest::RunManifest;
use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use shiftcal_core::backbone::BackboneConfig;
use shiftcal_core::data::{
    generate_synthetic, load_dataset, split_by_subject, Segment, SplitsManifest,
    SyntheticShiftSpec,
};
use shiftcal_core::metrics::{self, EvalReport, TierTable};
use shiftcal_core::recalib::{self, RecalMethod, Recalibrator};
use shiftcal_core::train::{train_ensemble, train_model, train_seeds, EpochLog, TrainConfig};
use shiftcal_core::uq::{self, PredRecord, PredictMode};
use shiftcal_core::{checkpoint, Error as CoreError};
use std::path::Path;

fn require_file(path: &str) -> Result<()> {
    if !Path::new(path).is_file() {
        bail!(CoreError::config(format!("input file not found: {path}")));
    }
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &str) -> Result<T> {
    require_file(path)?;
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {path}"))?;
    serde_json::from_str(&text)
        .map_err(|e| anyhow::Error::new(CoreError::config(format!("{path}: {e}"))))
}

pub fn gen_synth(spec_path: &str, out: &str) -> Result<()> {
    let spec: SyntheticShiftSpec = read_json(spec_path)?;
    let corpus = generate_synthetic(&spec)?;
    shiftcal_core::data::save_dataset(out, &corpus)?;
    println!(
        "generated {} segments ({} subjects) -> {out}",
        corpus.len(),
        spec.n_subjects
    );
    Ok(())
}

pub fn split(data: &str, fractions: &str, seed: u64, out: &str) -> Result<()> {
    require_file(data)?;
    let fs: Vec<f64> = fractions
        .split(',')
        .map(|s| s.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| CoreError::config(format!("bad fractions {fractions}: {e}")))?;
    if fs.len() != 4 {
        bail!(CoreError::config("fractions must list 4 values"));
    }
    let corpus = load_dataset(data)?;
    let splits = split_by_subject(&corpus, (fs[0], fs[1], fs[2], fs[3]), seed)?;
    let manifest = SplitsManifest::from_splits(&splits, data);
    manifest.save(out)?;
    println!(
        "split {} segments into {}/{}/{}/{} -> {out}",
        corpus.len(),
        splits.train.len(),
        splits.val.len(),
        splits.calib.len(),
        splits.test.len()
    );
    Ok(())
}

/// Training run description: single model, several seeds, or an ensemble.
#[derive(Serialize, Deserialize)]
pub struct TrainSpec {
    pub backbone: BackboneConfig,
    pub train: TrainConfig,
    /// "single" (default), "seeds", or "ensemble".
    #[serde(default = "default_mode")]
    pub mode: String,
    #[serde(default)]
    pub seeds: Vec<u64>,
    #[serde(default = "default_k")]
    pub k: usize,
}

fn default_mode() -> String {
    "single".to_string()
}

fn default_k() -> usize {
    5
}

fn load_split_segments<'a>(
    corpus: &'a [Segment],
    manifest: &SplitsManifest,
    name: &str,
) -> Result<Vec<&'a Segment>> {
    let refs = manifest
        .get(name)
        .ok_or_else(|| CoreError::config(format!("unknown split {name}")))?;
    refs.iter()
        .map(|(_, line)| {
            corpus.get(*line).ok_or_else(|| {
                anyhow::Error::new(CoreError::validation(format!(
                    "split references line {line} beyond corpus size {}",
                    corpus.len()
                )))
            })
        })
        .collect()
}

fn write_epoch_log(path: &Path, log: &[EpochLog]) -> Result<()> {
    let mut text = String::from("epoch,train_loss,val_mae\n");
    for l in log {
        text.push_str(&format!("{},{},{}\n", l.epoch, l.train_loss, l.val_mae));
    }
    std::fs::write(path, text)?;
    Ok(())
}

pub fn train(data: &str, splits: &str, config: &str, out: &str) -> Result<()> {
    require_file(data)?;
    require_file(splits)?;
    let spec: TrainSpec = read_json(config)?;
    spec.backbone.validate()?;
    spec.train.validate()?;
    let corpus = load_dataset(data)?;
    let manifest = SplitsManifest::load(splits)?;
    let train_set = load_split_segments(&corpus, &manifest, "train")?;
    let val_set = load_split_segments(&corpus, &manifest, "val")?;

    let mut run = RunManifest::new("train", serde_json::to_value(&spec)?);
    run.add_input(data)?;
    run.add_input(splits)?;
    run.add_input(config)?;
    std::fs::create_dir_all(out)?;

    match spec.mode.as_str() {
        "single" => {
            let (ckpt, log) = train_model(&train_set, &val_set, &spec.backbone, &spec.train)?;
            checkpoint::save(out, &ckpt.model)?;
            write_epoch_log(&Path::new(out).join("log.csv"), &log)?;
            run.seeds.push(spec.train.seed);
            println!(
                "trained 1 model: best val MAE {:.6} at epoch {}",
                ckpt.val_mae, ckpt.epoch
            );
        }
        "seeds" => {
            if spec.seeds.is_empty() {
                bail!(CoreError::config("mode \"seeds\" requires a seeds list"));
            }
            let runs = train_seeds(&train_set, &val_set, &spec.backbone, &spec.train, &spec.seeds)?;
            for (seed, (ckpt, log)) in spec.seeds.iter().zip(&runs) {
                let dir = Path::new(out).join(format!("seed_{seed}"));
                checkpoint::save(&dir, &ckpt.model)?;
                write_epoch_log(&dir.join("log.csv"), log)?;
                run.seeds.push(*seed);
            }
            println!("trained {} seed runs", runs.len());
        }
        "ensemble" => {
            let members =
                train_ensemble(&train_set, &val_set, &spec.backbone, &spec.train, spec.k)?;
            for (k, ckpt) in members.iter().enumerate() {
                let dir = Path::new(out).join(format!("member_{k}"));
                checkpoint::save(&dir, &ckpt.model)?;
            }
            run.seeds.push(spec.train.seed);
            println!("trained ensemble of {}", members.len());
        }
        other => bail!(CoreError::config(format!("unknown train mode {other}"))),
    }
    run.add_artifact(out);
    run.write(out)?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn predict(
    ckpt: &str,
    mode: &str,
    passes: usize,
    data: &str,
    splits: Option<&str>,
    split_name: &str,
    seed: u64,
    out: &str,
) -> Result<()> {
    require_file(data)?;
    let mode = match mode {
        "mcd" => PredictMode::Mcd,
        "ensemble" => PredictMode::Ensemble,
        other => bail!(CoreError::config(format!("unknown predict mode {other}"))),
    };
    let models: Vec<_> = ckpt
        .split(',')
        .map(|dir| checkpoint::load(dir.trim()))
        .collect::<std::result::Result<_, _>>()?;
    let model_refs: Vec<&shiftcal_core::backbone::Model> = models.iter().collect();

    let corpus = load_dataset(data)?;
    let segments: Vec<&Segment> = match (splits, split_name) {
        (Some(sp), name) if name != "all" => {
            require_file(sp)?;
            let manifest = SplitsManifest::load(sp)?;
            load_split_segments(&corpus, &manifest, name)?
        }
        _ => corpus.iter().collect(),
    };
    let records = uq::predict_dataset(&model_refs, &segments, mode, passes, seed)?;
    uq::save_predictions(out, &records)?;
    println!("predicted {} segments -> {out}", records.len());
    Ok(())
}

pub fn recalibrate(method: &str, calib: &str, out: &str) -> Result<()> {
    require_file(calib)?;
    let method = RecalMethod::parse(method)?;
    let records = uq::load_predictions(calib)?;
    let fitted = recalib::fit(method, &records)?;
    fitted.save(out)?;
    println!("fitted {} on {} calibration points -> {out}", method.name(), records.len());
    Ok(())
}

pub fn apply(recal: &str, preds: &str, out: &str) -> Result<()> {
    require_file(recal)?;
    require_file(preds)?;
    let fitted = Recalibrator::load(recal)?;
    let records = uq::load_predictions(preds)?;
    let adjusted = recalib::apply_recalibration(&fitted, &records)?;
    uq::save_predictions(out, &adjusted)?;
    println!(
        "applied {} to {} predictions -> {out}",
        fitted.method().name(),
        adjusted.len()
    );
    Ok(())
}

pub fn evaluate(preds: &str, method_id: &str, replicates: usize, seed: u64, out: &str) -> Result<()> {
    require_file(preds)?;
    let records = uq::load_predictions(preds)?;
    let report = metrics::evaluate(method_id, &records, replicates, seed)?;
    std::fs::write(out, serde_json::to_string_pretty(&report)?)?;
    println!(
        "{method_id}: mae {:.6}, summary {:.6} -> {out}",
        report.mae, report.summary
    );
    Ok(())
}

pub fn emd(a: &str, b: &str, out: &str) -> Result<()> {
    require_file(a)?;
    require_file(b)?;
    let ta: Vec<f64> = load_dataset(a)?.iter().map(|s| s.target).collect();
    let tb: Vec<f64> = load_dataset(b)?.iter().map(|s| s.target).collect();
    let d = metrics::emd_1d(&ta, &tb)?;
    let payload = serde_json::json!({"a": a, "b": b, "emd": d, "n_a": ta.len(), "n_b": tb.len()});
    std::fs::write(out, serde_json::to_string_pretty(&payload)?)?;
    println!("emd({a}, {b}) = {d:.6} -> {out}");
    Ok(())
}

pub fn tier_to_csv(table: &TierTable) -> String {
    let mut text = String::from("slice,mode,tier,method,metric,delta_vs_best,ci_lo,ci_hi\n");
    for e in &table.entries {
        let tier = match e.tier {
            metrics::Tier::Best => "best",
            metrics::Tier::Tier1 => "tier1",
            metrics::Tier::Tier2 => "tier2",
        };
        let (delta, lo, hi) = match (e.delta, e.ci) {
            (Some(d), Some(ci)) => (d.to_string(), ci.lo.to_string(), ci.hi.to_string()),
            _ => (String::new(), String::new(), String::new()),
        };
        text.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            table.slice, table.mode, tier, e.method_id, e.metric, delta, lo, hi
        ));
    }
    text
}

#[allow(clippy::too_many_arguments)]
pub fn compare(
    preds: &[String],
    metric: &str,
    slice: &str,
    replicates: usize,
    seed: u64,
    out: &str,
    csv: Option<&str>,
) -> Result<()> {
    let mut methods: Vec<(String, Vec<PredRecord>)> = Vec::new();
    for spec in preds {
        let (name, path) = spec
            .split_once('=')
            .ok_or_else(|| CoreError::config(format!("expected name=path, got {spec}")))?;
        require_file(path)?;
        methods.push((name.to_string(), uq::load_predictions(path)?));
    }
    let metric_fn: fn(&[PredRecord]) -> shiftcal_core::Result<f64> = match metric {
        "mae" => metrics::mae_records,
        "summary" => |r| Ok(metrics::calib_summary(r)?.2),
        other => bail!(CoreError::config(format!("unknown metric {other}"))),
    };
    let mode = if metric == "mae" { "accuracy" } else { "calibration" };
    let table = metrics::tier_methods(slice, mode, &methods, metric_fn, replicates, seed)?;
    std::fs::write(out, serde_json::to_string_pretty(&table)?)?;
    if let Some(csv_path) = csv {
        std::fs::write(csv_path, tier_to_csv(&table))?;
    }
    println!(
        "compared {} methods on {slice}/{mode}: best = {} -> {out}",
        methods.len(),
        table.best
    );
    Ok(())
}

pub fn report(reports: &str, tiers: &str, out: &str) -> Result<()> {
    let mut text = String::from("slice,mode,tier,method,metric_name,value,delta_vs_best,ci_lo,ci_hi\n");
    for entry in reports.split(',').filter(|s| !s.is_empty()) {
        let (slice, path) = entry
            .split_once('=')
            .ok_or_else(|| CoreError::config(format!("expected slice=path, got {entry}")))?;
        let report: EvalReport = read_json(path)?;
        for (name, value, ci) in [
            ("mae", report.mae, report.mae_ci),
            ("winkler1", report.winkler1, report.winkler1_ci),
            ("winkler2", report.winkler2, report.winkler2_ci),
            ("summary", report.summary, report.summary_ci),
        ] {
            text.push_str(&format!(
                "{},,,{},{},{},,{},{}\n",
                slice, report.method_id, name, value, ci.lo, ci.hi
            ));
        }
    }
    for path in tiers.split(',').filter(|s| !s.is_empty()) {
        let table: TierTable = read_json(path)?;
        for e in &table.entries {
            let tier = match e.tier {
                metrics::Tier::Best => "best",
                metrics::Tier::Tier1 => "tier1",
                metrics::Tier::Tier2 => "tier2",
            };
            let (delta, lo, hi) = match (e.delta, e.ci) {
                (Some(d), Some(ci)) => (d.to_string(), ci.lo.to_string(), ci.hi.to_string()),
                _ => (String::new(), String::new(), String::new()),
            };
            text.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                table.slice, table.mode, tier, e.method_id, "metric", e.metric, delta, lo, hi
            ));
        }
    }
    std::fs::write(out, text)?;
    println!("wrote combined report -> {out}");
    Ok(())
}
