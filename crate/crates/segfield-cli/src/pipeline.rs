//! End-to-end pipeline with content-hash step skipping.
//!
//! Each step records a fingerprint (its config slice plus the content hashes
//! of its inputs) and the hashes of its outputs in `manifest.json`. A step
//! reruns iff its fingerprint changed or an output is missing/stale, so
//! editing only the stage-2 hyper-parameters reruns exactly stage 2 and
//! evaluation.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use segfield_core::hash::mix_seed;
use segfield_core::scene::{load_scene, save_scene, Scene, SplitTag};
use segfield_core::synth::generate_toy_scene;
use segfield_core::trainer::{train_stage1, train_stage2};

use crate::config::PipelineConfig;
use crate::ops;

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

pub fn hash_file(path: &Path) -> Result<String> {
    let bytes =
        fs::read(path).with_context(|| format!("hashing missing file {}", path.display()))?;
    Ok(sha256_hex(&bytes))
}

/// Stable hash of anything serializable (JSON struct field order is fixed).
pub fn hash_value<T: Serialize>(value: &T) -> String {
    sha256_hex(serde_json::to_string(value).expect("serialize").as_bytes())
}

/// Combined hash over a sorted list of files.
fn hash_files(paths: &[PathBuf]) -> Result<String> {
    let mut sorted: Vec<&PathBuf> = paths.iter().collect();
    sorted.sort();
    let mut acc = String::new();
    for p in sorted {
        acc.push_str(&p.display().to_string());
        acc.push('=');
        acc.push_str(&hash_file(p)?);
        acc.push('\n');
    }
    Ok(sha256_hex(acc.as_bytes()))
}

fn scene_input_files(scene_dir: &Path, scene: &Scene) -> Vec<PathBuf> {
    let mut files = vec![
        scene_dir.join("meta.json"),
        scene_dir.join("poses.json"),
        scene_dir.join("split.json"),
    ];
    for view in &scene.views {
        files.push(scene_dir.join("images").join(format!("{}.png", view.name)));
        if view.label_map.is_some() {
            files.push(scene_dir.join("labels").join(format!("{}.png", view.name)));
        }
    }
    files
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct Manifest {
    steps: BTreeMap<String, StepRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
struct StepRecord {
    fingerprint: String,
    outputs: BTreeMap<String, String>,
}

impl Manifest {
    fn load(path: &Path) -> Self {
        fs::read_to_string(path)
            .ok()
            .and_then(|text| serde_json::from_str(&text).ok())
            .unwrap_or_default()
    }

    fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    fn is_current(&self, step: &str, fingerprint: &str) -> bool {
        let Some(record) = self.steps.get(step) else {
            return false;
        };
        if record.fingerprint != fingerprint {
            return false;
        }
        record.outputs.iter().all(|(path, hash)| {
            let p = PathBuf::from(path);
            p.exists() && hash_file(&p).map(|h| &h == hash).unwrap_or(false)
        })
    }

    fn record(&mut self, step: &str, fingerprint: String, outputs: &[PathBuf]) -> Result<()> {
        let mut map = BTreeMap::new();
        for path in outputs {
            map.insert(path.display().to_string(), hash_file(path)?);
        }
        self.steps.insert(
            step.to_string(),
            StepRecord {
                fingerprint,
                outputs: map,
            },
        );
        Ok(())
    }

    fn output_hash(&self, step: &str) -> String {
        self.steps
            .get(step)
            .map(|record| hash_value(&record.outputs))
            .unwrap_or_default()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepStatus {
    Ran,
    Skipped,
}

pub struct PipelineReport {
    pub steps: Vec<(String, StepStatus)>,
    pub scene_miou: Option<f64>,
    pub eval_csv: Option<PathBuf>,
}

/// Execute gen -> extract -> pseudo-label -> train 1 -> train 2 -> evaluate,
/// skipping steps whose recorded fingerprint and outputs are current.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<PipelineReport> {
    let out_dir = &cfg.output;
    fs::create_dir_all(out_dir)?;
    let manifest_path = out_dir.join("manifest.json");
    let mut manifest = Manifest::load(&manifest_path);
    let mut steps = Vec::new();

    // -- gen-scene ----------------------------------------------------------
    if let Some(spec) = &cfg.toy_scene {
        let fp = hash_value(&(spec, cfg.seed));
        if manifest.is_current("gen-scene", &fp) {
            steps.push(("gen-scene".to_string(), StepStatus::Skipped));
        } else {
            log::info!("generating toy scene at {}", cfg.scene.display());
            let scene = generate_toy_scene(spec)?;
            save_scene(&scene, &cfg.scene)?;
            let files = scene_input_files(&cfg.scene, &scene);
            manifest.record("gen-scene", fp, &files)?;
            manifest.save(&manifest_path)?;
            steps.push(("gen-scene".to_string(), StepStatus::Ran));
        }
    }

    let scene = load_scene(&cfg.scene)
        .with_context(|| format!("loading scene {}", cfg.scene.display()))?;
    let scene_hash = hash_files(&scene_input_files(&cfg.scene, &scene))?;

    // -- extract-features ---------------------------------------------------
    let backend = ops::make_backend(cfg.backend, &cfg.scene, cfg.sam_features_dir.as_deref());
    let cache = segfield_core::features::FeatureCache::for_scene(&cfg.scene);
    let fp = hash_value(&(backend.id(), &scene_hash));
    let feature_paths: Vec<PathBuf> = scene
        .views
        .iter()
        .filter(|v| matches!(v.split, SplitTag::TrainLabeled | SplitTag::Test))
        .map(|v| {
            cache.entry_path(
                backend.id(),
                segfield_core::features::image_content_hash(&v.image),
            )
        })
        .collect();
    if manifest.is_current("extract-features", &fp) {
        steps.push(("extract-features".to_string(), StepStatus::Skipped));
    } else {
        log::info!("extracting {} features", backend.id());
        ops::extract_scene_features(&scene, &cfg.scene, backend.as_ref(), Some(&cache.dir))?;
        manifest.record("extract-features", fp, &feature_paths)?;
        manifest.save(&manifest_path)?;
        steps.push(("extract-features".to_string(), StepStatus::Ran));
    }
    let features = ops::extract_scene_features(&scene, &cfg.scene, backend.as_ref(), Some(&cache.dir))?;

    // -- pseudo-label -------------------------------------------------------
    let fp = hash_value(&(
        &cfg.metric,
        backend.id(),
        &scene_hash,
        manifest.output_hash("extract-features"),
    ));
    let mut pseudo_paths = vec![cfg.scene.join("centroids.json")];
    for v in &scene.views {
        if v.split == SplitTag::Test {
            pseudo_paths.push(cfg.scene.join("labels_pseudo").join(format!("{}.png", v.name)));
            pseudo_paths.push(cfg.scene.join("margins").join(format!("{}.npy", v.name)));
        }
    }
    if manifest.is_current("pseudo-label", &fp) {
        steps.push(("pseudo-label".to_string(), StepStatus::Skipped));
    } else {
        log::info!("assigning pseudo-labels to test views");
        ops::pseudo_label_scene(&scene, &cfg.scene, &features, cfg.metric)?;
        manifest.record("pseudo-label", fp, &pseudo_paths)?;
        manifest.save(&manifest_path)?;
        steps.push(("pseudo-label".to_string(), StepStatus::Ran));
    }

    // -- train stage 1 ------------------------------------------------------
    let stage1_cfg = cfg.stage1.to_train_config(1, mix_seed(cfg.seed, "stage1"));
    let stage1_ckpt = out_dir.join("stage1.ckpt");
    let fp = hash_value(&(&cfg.field, &stage1_cfg, &scene_hash));
    if manifest.is_current("train-stage1", &fp) {
        steps.push(("train-stage1".to_string(), StepStatus::Skipped));
    } else {
        log::info!("stage 1: {} iterations", stage1_cfg.iterations);
        train_stage1(&scene, &cfg.field, &stage1_cfg, None, out_dir)?;
        manifest.record("train-stage1", fp, &[stage1_ckpt.clone()])?;
        manifest.save(&manifest_path)?;
        steps.push(("train-stage1".to_string(), StepStatus::Ran));
    }

    // -- train stage 2 ------------------------------------------------------
    let fusion_cfg = cfg.fusion.clone();
    if fusion_cfg.semantic_dim != scene.class_count {
        bail!(
            "fusion.semantic_dim {} does not match the scene's {} classes",
            fusion_cfg.semantic_dim,
            scene.class_count
        );
    }
    let stage2_cfg = cfg.stage2.to_train_config(2, mix_seed(cfg.seed, "stage2"));
    let stage2_ckpt = out_dir.join("stage2.ckpt");
    let fp = hash_value(&(
        &cfg.field,
        &fusion_cfg,
        &stage2_cfg,
        hash_file(&stage1_ckpt)?,
        manifest.output_hash("pseudo-label"),
        manifest.output_hash("extract-features"),
    ));
    if manifest.is_current("train-stage2", &fp) {
        steps.push(("train-stage2".to_string(), StepStatus::Skipped));
    } else {
        log::info!("stage 2: {} iterations", stage2_cfg.iterations);
        let inputs = ops::load_stage2_inputs(&scene, &cfg.scene, features.clone())?;
        train_stage2(
            &scene,
            &stage1_ckpt,
            &inputs,
            &cfg.field,
            &fusion_cfg,
            &stage2_cfg,
            None,
            out_dir,
        )?;
        manifest.record("train-stage2", fp, &[stage2_ckpt.clone()])?;
        manifest.save(&manifest_path)?;
        steps.push(("train-stage2".to_string(), StepStatus::Ran));
    }

    // -- evaluate ------------------------------------------------------------
    let fp = hash_value(&(
        hash_file(&stage2_ckpt)?,
        &scene_hash,
        backend.id(),
        cfg.eval_samples(),
    ));
    let eval_csv = out_dir.join("eval.csv");
    let mut scene_miou = None;
    if manifest.is_current("evaluate", &fp) {
        steps.push(("evaluate".to_string(), StepStatus::Skipped));
        // surface the previous score for the report
        if let Ok(text) = fs::read_to_string(&eval_csv) {
            scene_miou = parse_scene_miou(&text);
        }
    } else {
        log::info!("evaluating test views");
        let model = ops::restore_model(&stage2_ckpt)?;
        let summary = ops::evaluate_scene(&scene, &model, &features, cfg.eval_samples(), out_dir)?;
        let mut outputs = vec![eval_csv.clone()];
        for v in &scene.views {
            if v.split == SplitTag::Test {
                outputs.push(out_dir.join("pred_labels").join(format!("{}.png", v.name)));
            }
        }
        scene_miou = Some(summary.scene_miou);
        manifest.record("evaluate", fp, &outputs)?;
        manifest.save(&manifest_path)?;
        steps.push(("evaluate".to_string(), StepStatus::Ran));
    }

    Ok(PipelineReport {
        steps,
        scene_miou,
        eval_csv: Some(eval_csv),
    })
}

fn parse_scene_miou(csv: &str) -> Option<f64> {
    csv.lines()
        .find(|l| l.starts_with("scene,"))
        .and_then(|l| l.split(',').nth(1))
        .and_then(|v| v.parse().ok())
}
