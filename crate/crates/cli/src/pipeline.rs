//! End-to-end pipeline: generate/split -> train -> predict -> recalibrate
//! -> evaluate -> compare, from a single config JSON.
//!
//! Config validation happens before any artifact is written; a config
//! referencing nothing usable exits with code 2 and an untouched output
//! directory.

use crate::commands::tier_to_csv;
use crate::manifest::RunManifest;
use anyhow::{bail, Result};
use serde::{Deserialize, Serialize};
use shiftcal_core::backbone::BackboneConfig;
use shiftcal_core::data::{
    generate_synthetic, save_dataset, split_by_subject, Segment, SplitsManifest,
    SyntheticShiftSpec,
};
use shiftcal_core::metrics::{self, EvalReport, TierTable};
use shiftcal_core::recalib::{self, RecalMethod};
use shiftcal_core::train::{train_ensemble, train_model, TrainConfig};
use shiftcal_core::uq::{self, PredRecord, PredictMode};
use shiftcal_core::{checkpoint, Error as CoreError};
use std::path::{Path, PathBuf};

#[derive(Clone, Serialize, Deserialize)]
pub struct UqSpec {
    /// "mcd" or "ensemble".
    pub mode: String,
    #[serde(default = "default_passes")]
    pub passes: usize,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_passes() -> usize {
    uq::DEFAULT_MC_PASSES
}

fn default_k() -> usize {
    5
}

#[derive(Clone, Serialize, Deserialize)]
pub struct EvalSpec {
    #[serde(default = "default_replicates")]
    pub replicates: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_replicates() -> usize {
    1000
}

#[derive(Clone, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub out_dir: String,
    pub corpus: SyntheticShiftSpec,
    /// Optional out-of-distribution test corpus.
    #[serde(default)]
    pub shifted_corpus: Option<SyntheticShiftSpec>,
    pub fractions: [f64; 4],
    pub split_seed: u64,
    pub backbone: BackboneConfig,
    pub train: TrainConfig,
    pub uq: UqSpec,
    #[serde(default)]
    pub recalibration: Vec<String>,
    #[serde(default = "default_eval")]
    pub eval: EvalSpec,
}

fn default_eval() -> EvalSpec {
    EvalSpec {
        replicates: default_replicates(),
        seed: 0,
    }
}

struct Stage<'a>(&'a str);

impl Stage<'_> {
    fn err(&self, e: impl std::fmt::Display) -> anyhow::Error {
        anyhow::anyhow!("stage {}: {e}", self.0)
    }
}

pub fn run(config_path: &str) -> Result<()> {
    if !Path::new(config_path).is_file() {
        bail!(CoreError::config(format!(
            "config file not found: {config_path}"
        )));
    }
    let text = std::fs::read_to_string(config_path)?;
    let cfg: PipelineConfig = serde_json::from_str(&text)
        .map_err(|e| CoreError::config(format!("{config_path}: {e}")))?;

    // validate everything up front; nothing is written before this point
    cfg.corpus.validate()?;
    if let Some(shifted) = &cfg.shifted_corpus {
        shifted.validate()?;
    }
    cfg.backbone.validate()?;
    cfg.train.validate()?;
    let recal_methods: Vec<RecalMethod> = cfg
        .recalibration
        .iter()
        .map(|m| RecalMethod::parse(m))
        .collect::<shiftcal_core::Result<_>>()?;
    let predict_mode = match cfg.uq.mode.as_str() {
        "mcd" => PredictMode::Mcd,
        "ensemble" => PredictMode::Ensemble,
        other => bail!(CoreError::config(format!("unknown uq mode {other}"))),
    };
    let fsum: f64 = cfg.fractions.iter().sum();
    if (fsum - 1.0).abs() > 1e-9 {
        bail!(CoreError::config("fractions must sum to 1"));
    }

    let out = PathBuf::from(&cfg.out_dir);
    std::fs::create_dir_all(&out)?;
    let mut manifest = RunManifest::new("pipeline", serde_json::to_value(&cfg)?);
    manifest.add_input(config_path)?;
    manifest.seeds = vec![
        cfg.corpus.seed,
        cfg.split_seed,
        cfg.train.seed,
        cfg.uq.seed,
        cfg.eval.seed,
    ];

    // generate
    let stage = Stage("gen-synth");
    println!("[gen-synth] generating corpus");
    let corpus = generate_synthetic(&cfg.corpus).map_err(|e| stage.err(e))?;
    let corpus_path = out.join("corpus.jsonl");
    save_dataset(&corpus_path, &corpus)?;
    manifest.add_artifact(&corpus_path);
    let shifted = match &cfg.shifted_corpus {
        Some(spec) => {
            let shifted = generate_synthetic(spec).map_err(|e| stage.err(e))?;
            let path = out.join("shifted.jsonl");
            save_dataset(&path, &shifted)?;
            manifest.add_artifact(&path);
            Some(shifted)
        }
        None => None,
    };

    // split
    let stage = Stage("split");
    println!("[split] subject-disjoint partitioning");
    let f = cfg.fractions;
    let splits = split_by_subject(&corpus, (f[0], f[1], f[2], f[3]), cfg.split_seed)
        .map_err(|e| stage.err(e))?;
    let splits_path = out.join("splits.json");
    SplitsManifest::from_splits(&splits, "corpus.jsonl").save(&splits_path)?;
    manifest.add_artifact(&splits_path);
    let train_set: Vec<&Segment> = splits.take("train", &corpus).unwrap();
    let val_set: Vec<&Segment> = splits.take("val", &corpus).unwrap();
    let calib_set: Vec<&Segment> = splits.take("calib", &corpus).unwrap();
    let test_set: Vec<&Segment> = splits.take("test", &corpus).unwrap();

    // train
    let stage = Stage("train");
    println!("[train] fitting model(s)");
    let members: Vec<shiftcal_core::backbone::Model> = match predict_mode {
        PredictMode::Mcd => {
            let (ckpt, log) = train_model(&train_set, &val_set, &cfg.backbone, &cfg.train)
                .map_err(|e| stage.err(e))?;
            let dir = out.join("ckpt");
            checkpoint::save(&dir, &ckpt.model)?;
            let mut text = String::from("epoch,train_loss,val_mae\n");
            for l in &log {
                text.push_str(&format!("{},{},{}\n", l.epoch, l.train_loss, l.val_mae));
            }
            std::fs::write(dir.join("log.csv"), text)?;
            manifest.add_artifact(&dir);
            vec![checkpoint::load(&dir)?]
        }
        PredictMode::Ensemble => {
            let ckpts = train_ensemble(&train_set, &val_set, &cfg.backbone, &cfg.train, cfg.uq.k)
                .map_err(|e| stage.err(e))?;
            let mut loaded = Vec::with_capacity(ckpts.len());
            for (k, ckpt) in ckpts.iter().enumerate() {
                let dir = out.join(format!("ckpt/member_{k}"));
                checkpoint::save(&dir, &ckpt.model)?;
                manifest.add_artifact(&dir);
                loaded.push(checkpoint::load(&dir)?);
            }
            loaded
        }
    };
    let member_refs: Vec<&shiftcal_core::backbone::Model> = members.iter().collect();

    // predict
    let stage = Stage("predict");
    println!("[predict] scoring calib/test splits");
    let mut slices: Vec<(String, Vec<PredRecord>)> = Vec::new();
    let calib_preds =
        uq::predict_dataset(&member_refs, &calib_set, predict_mode, cfg.uq.passes, cfg.uq.seed)
            .map_err(|e| stage.err(e))?;
    uq::save_predictions(out.join("preds_calib.csv"), &calib_preds)?;
    manifest.add_artifact(out.join("preds_calib.csv"));
    let test_preds =
        uq::predict_dataset(&member_refs, &test_set, predict_mode, cfg.uq.passes, cfg.uq.seed)
            .map_err(|e| stage.err(e))?;
    uq::save_predictions(out.join("preds_test.csv"), &test_preds)?;
    manifest.add_artifact(out.join("preds_test.csv"));
    slices.push(("id".to_string(), test_preds));
    if let Some(shifted) = &shifted {
        let refs: Vec<&Segment> = shifted.iter().collect();
        let preds =
            uq::predict_dataset(&member_refs, &refs, predict_mode, cfg.uq.passes, cfg.uq.seed)
                .map_err(|e| stage.err(e))?;
        uq::save_predictions(out.join("preds_shifted.csv"), &preds)?;
        manifest.add_artifact(out.join("preds_shifted.csv"));
        slices.push(("shifted".to_string(), preds));

        // label-shift quantification between the two corpora
        let ta: Vec<f64> = corpus.iter().map(|s| s.target).collect();
        let tb: Vec<f64> = shifted.iter().map(|s| s.target).collect();
        let emd = metrics::emd_1d(&ta, &tb)?;
        std::fs::write(
            out.join("emd.json"),
            serde_json::to_string_pretty(&serde_json::json!({
                "a": "corpus.jsonl", "b": "shifted.jsonl", "emd": emd
            }))?,
        )?;
        manifest.add_artifact(out.join("emd.json"));
    }

    // recalibrate
    let stage = Stage("recalibrate");
    let mut method_preds: Vec<(String, Vec<(String, Vec<PredRecord>)>)> = Vec::new();
    method_preds.push(("bench".to_string(), slices.clone()));
    for method in &recal_methods {
        println!("[recalibrate] fitting {}", method.name());
        let fitted = recalib::fit(*method, &calib_preds).map_err(|e| stage.err(e))?;
        let recal_path = out.join(format!("recal_{}.json", method.name()));
        fitted.save(&recal_path)?;
        manifest.add_artifact(&recal_path);
        let mut adjusted_slices = Vec::new();
        for (slice, preds) in &slices {
            let adjusted = recalib::apply_recalibration(&fitted, preds)?;
            let path = out.join(format!("preds_{}_{}.csv", slice, method.name()));
            uq::save_predictions(&path, &adjusted)?;
            manifest.add_artifact(&path);
            adjusted_slices.push((slice.clone(), adjusted));
        }
        method_preds.push((method.name().to_string(), adjusted_slices));
    }

    // evaluate
    let stage = Stage("evaluate");
    println!("[evaluate] scoring methods");
    let mut reports: Vec<(String, EvalReport)> = Vec::new();
    for (method, per_slice) in &method_preds {
        for (slice, preds) in per_slice {
            let report = metrics::evaluate(method, preds, cfg.eval.replicates, cfg.eval.seed)
                .map_err(|e| stage.err(e))?;
            reports.push((slice.clone(), report));
        }
    }
    let reports_json: Vec<serde_json::Value> = reports
        .iter()
        .map(|(slice, r)| {
            let mut v = serde_json::to_value(r).expect("report json");
            v["slice"] = serde_json::Value::String(slice.clone());
            v
        })
        .collect();
    std::fs::write(
        out.join("reports.json"),
        serde_json::to_string_pretty(&reports_json)?,
    )?;
    manifest.add_artifact(out.join("reports.json"));
    let mut metrics_csv =
        String::from("slice,method,n_segments,mae,winkler1,winkler2,summary\n");
    for (slice, r) in &reports {
        metrics_csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            slice, r.method_id, r.n_segments, r.mae, r.winkler1, r.winkler2, r.summary
        ));
    }
    std::fs::write(out.join("metrics.csv"), metrics_csv)?;
    manifest.add_artifact(out.join("metrics.csv"));

    // compare
    let stage = Stage("compare");
    println!("[compare] tiered statistical comparison");
    let mut tier_tables: Vec<TierTable> = Vec::new();
    let slice_names: Vec<String> = slices.iter().map(|(s, _)| s.clone()).collect();
    for slice in &slice_names {
        let methods: Vec<(String, Vec<PredRecord>)> = method_preds
            .iter()
            .map(|(m, per_slice)| {
                let preds = per_slice
                    .iter()
                    .find(|(s, _)| s == slice)
                    .map(|(_, p)| p.clone())
                    .expect("slice present for every method");
                (m.clone(), preds)
            })
            .collect();
        for (mode, metric_fn) in [
            (
                "accuracy",
                metrics::mae_records as fn(&[PredRecord]) -> shiftcal_core::Result<f64>,
            ),
            ("calibration", |r: &[PredRecord]| {
                Ok(metrics::calib_summary(r)?.2)
            }),
        ] {
            let table = metrics::tier_methods(
                slice,
                mode,
                &methods,
                metric_fn,
                cfg.eval.replicates,
                cfg.eval.seed,
            )
            .map_err(|e| stage.err(e))?;
            tier_tables.push(table);
        }
    }
    std::fs::write(
        out.join("tiers.json"),
        serde_json::to_string_pretty(&tier_tables)?,
    )?;
    manifest.add_artifact(out.join("tiers.json"));
    let mut tier_csv = String::from("slice,mode,tier,method,metric,delta_vs_best,ci_lo,ci_hi\n");
    for table in &tier_tables {
        let body = tier_to_csv(table);
        tier_csv.push_str(body.split_once('\n').map(|(_, b)| b).unwrap_or(""));
    }
    std::fs::write(out.join("tiers.csv"), tier_csv)?;
    manifest.add_artifact(out.join("tiers.csv"));

    manifest.write(&out)?;
    println!("pipeline complete -> {}", out.display());
    Ok(())
}
