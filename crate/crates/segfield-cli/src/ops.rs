//! Shared implementations behind the subcommands and the pipeline runner.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use image::GrayImage;

use segfield_core::checkpoint::{load_checkpoint, LoadedCheckpoint};
use segfield_core::features::{
    extract_features, FeatureBackend, FeatureCache, FeatureMap, SamBackend, StubBackend,
};
use segfield_core::field::NeuralField;
use segfield_core::fusion::FusionHead;
use segfield_core::metrics::{AbsentClassPolicy, ConfusionMatrix};
use segfield_core::pseudo::{
    assign_pseudo_labels, compute_centroids, load_pseudo_labels, save_centroids, save_pseudo_map,
    DistanceMetric,
};
use segfield_core::scene::{Scene, SplitTag};
use segfield_core::trainer::Stage2Inputs;
use segfield_core::volume::render_view;

use crate::config::{BackendChoice, PipelineConfig};

pub fn make_backend(
    choice: BackendChoice,
    scene_dir: &Path,
    sam_dir: Option<&Path>,
) -> Box<dyn FeatureBackend> {
    match choice {
        BackendChoice::Stub => Box::new(StubBackend),
        BackendChoice::Sam => {
            let dir = sam_dir
                .map(Path::to_path_buf)
                .unwrap_or_else(|| scene_dir.join("sam_features"));
            Box::new(SamBackend::new(dir))
        }
    }
}

/// Extract (or read back from cache) the feature maps of every view that
/// stage 2 and evaluation touch: train-labeled and test views.
pub fn extract_scene_features(
    scene: &Scene,
    scene_dir: &Path,
    backend: &dyn FeatureBackend,
    cache_dir: Option<&Path>,
) -> Result<BTreeMap<usize, FeatureMap>> {
    let cache = match cache_dir {
        Some(dir) => FeatureCache::new(dir),
        None => FeatureCache::for_scene(scene_dir),
    };
    let mut out = BTreeMap::new();
    for (vid, view) in scene.views.iter().enumerate() {
        if matches!(view.split, SplitTag::TrainLabeled | SplitTag::Test) {
            let fmap = extract_features(&view.image, backend, Some(&cache))
                .with_context(|| format!("extracting features for view {}", view.name))?;
            out.insert(vid, fmap);
        }
    }
    Ok(out)
}

/// Centroids from the labeled training views, then pseudo-labels for every
/// test view, persisted under the scene directory.
pub fn pseudo_label_scene(
    scene: &Scene,
    scene_dir: &Path,
    features: &BTreeMap<usize, FeatureMap>,
    metric: DistanceMetric,
) -> Result<()> {
    let labeled: Vec<(&FeatureMap, &GrayImage)> = scene
        .views
        .iter()
        .enumerate()
        .filter(|(_, v)| v.split == SplitTag::TrainLabeled)
        .filter_map(|(vid, v)| {
            v.label_map
                .as_ref()
                .map(|labels| (&features[&vid], labels))
        })
        .collect();
    if labeled.is_empty() {
        bail!("no labeled training views; cannot build class centroids");
    }
    let centroids = compute_centroids(&labeled, scene.class_count, metric)?;
    for class in 0..scene.class_count {
        if !centroids.is_valid(class) {
            log::warn!(
                "class {class} ({}) has no labeled pixels; it cannot be pseudo-labeled",
                scene.class_names.get(class).map(String::as_str).unwrap_or("?")
            );
        }
    }
    save_centroids(&scene_dir.join("centroids.json"), &centroids)?;
    for (vid, view) in scene.views.iter().enumerate() {
        if view.split == SplitTag::Test {
            let map = assign_pseudo_labels(&features[&vid], &centroids, vid)?;
            save_pseudo_map(scene_dir, &view.name, &map)?;
        }
    }
    Ok(())
}

/// Gather stage-2 inputs from disk artifacts.
pub fn load_stage2_inputs(
    scene: &Scene,
    scene_dir: &Path,
    features: BTreeMap<usize, FeatureMap>,
) -> Result<Stage2Inputs> {
    let mut pseudo_labels = BTreeMap::new();
    for (vid, view) in scene.views.iter().enumerate() {
        if view.split == SplitTag::Test {
            let labels = load_pseudo_labels(scene_dir, &view.name)?;
            pseudo_labels.insert(vid, labels);
        }
    }
    let inputs = Stage2Inputs {
        features,
        pseudo_labels,
    };
    inputs.validate(scene)?;
    Ok(inputs)
}

pub struct RestoredModel {
    pub checkpoint: LoadedCheckpoint,
    pub field: NeuralField,
    pub fusion: Option<FusionHead>,
}

pub fn restore_model(path: &Path) -> Result<RestoredModel> {
    let checkpoint = load_checkpoint(path)?;
    let field = NeuralField::from_store(&checkpoint.store, checkpoint.meta.field.clone())?;
    let fusion = match &checkpoint.meta.fusion {
        Some(cfg) => Some(FusionHead::from_store(&checkpoint.store, cfg.clone())?),
        None => None,
    };
    Ok(RestoredModel {
        checkpoint,
        field,
        fusion,
    })
}

/// Render one view to `<out>/render_NNN.png` (+ `_labels.png` with a
/// stage-2 checkpoint).
pub fn render_one(
    scene: &Scene,
    view_id: usize,
    model: &RestoredModel,
    features: Option<&BTreeMap<usize, FeatureMap>>,
    samples_per_ray: usize,
    out_dir: &Path,
) -> Result<PathBuf> {
    fs::create_dir_all(out_dir)?;
    let fusion_ctx = match (&model.fusion, features) {
        (Some(head), Some(features)) => {
            let fmap = features
                .get(&view_id)
                .ok_or_else(|| anyhow!("no feature map for view {view_id}"))?;
            Some((head, fmap))
        }
        (Some(_), None) => bail!("stage-2 checkpoint needs feature maps to render semantics"),
        (None, _) => None,
    };
    let rendered = render_view(
        scene,
        view_id,
        &model.field,
        &model.checkpoint.store,
        fusion_ctx,
        samples_per_ray,
    )?;
    let name = &scene.views[view_id].name;
    let img_path = out_dir.join(format!("render_{name}.png"));
    rendered.image.save(&img_path)?;
    if let Some(labels) = &rendered.labels {
        labels.save(out_dir.join(format!("render_{name}_labels.png")))?;
    }
    Ok(img_path)
}

pub struct ViewScore {
    pub name: String,
    pub miou: f64,
    pub per_class: Vec<Option<f64>>,
    pub pixels: u64,
}

pub struct EvalSummary {
    pub per_view: Vec<ViewScore>,
    pub scene_miou: f64,
    pub csv_path: PathBuf,
}

/// Render every test view with the stage-2 model, score against ground
/// truth, dump predicted label maps and a deterministic CSV.
pub fn evaluate_scene(
    scene: &Scene,
    model: &RestoredModel,
    features: &BTreeMap<usize, FeatureMap>,
    samples_per_ray: usize,
    out_dir: &Path,
) -> Result<EvalSummary> {
    let Some(fusion) = &model.fusion else {
        bail!("evaluate needs a stage-2 checkpoint (no fusion head found)");
    };
    fs::create_dir_all(out_dir.join("pred_labels"))?;
    let mut per_view = Vec::new();
    let mut merged = ConfusionMatrix::new(scene.class_count);
    for (vid, view) in scene.views.iter().enumerate() {
        if view.split != SplitTag::Test {
            continue;
        }
        let gt = view
            .label_map
            .as_ref()
            .ok_or_else(|| anyhow!("test view {} has no ground-truth labels", view.name))?;
        let fmap = features
            .get(&vid)
            .ok_or_else(|| anyhow!("no feature map for test view {}", view.name))?;
        let rendered = render_view(
            scene,
            vid,
            &model.field,
            &model.checkpoint.store,
            Some((fusion, fmap)),
            samples_per_ray,
        )?;
        let pred = rendered.labels.expect("semantic rendering");
        pred.save(out_dir.join("pred_labels").join(format!("{}.png", view.name)))?;

        let mut cm = ConfusionMatrix::new(scene.class_count);
        cm.accumulate(gt, &pred)?;
        let report = cm.miou(AbsentClassPolicy::Exclude)?;
        per_view.push(ViewScore {
            name: view.name.clone(),
            miou: report.mean,
            per_class: report.per_class,
            pixels: cm.total(),
        });
        merged.merge(&cm);
    }
    if per_view.is_empty() {
        bail!("scene has no test views to evaluate");
    }
    let scene_report = merged.miou(AbsentClassPolicy::Exclude)?;

    let mut csv = String::new();
    csv.push_str("view,miou");
    for c in 0..scene.class_count {
        csv.push_str(&format!(",iou_class_{c}"));
    }
    csv.push_str(",pixels\n");
    let fmt_iou = |v: &Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    for score in &per_view {
        csv.push_str(&format!("{},{:.6}", score.name, score.miou));
        for c in &score.per_class {
            csv.push(',');
            csv.push_str(&fmt_iou(c));
        }
        csv.push_str(&format!(",{}\n", score.pixels));
    }
    csv.push_str(&format!("scene,{:.6}", scene_report.mean));
    for c in &scene_report.per_class {
        csv.push(',');
        csv.push_str(&fmt_iou(c));
    }
    csv.push_str(&format!(",{}\n", merged.total()));

    let csv_path = out_dir.join("eval.csv");
    fs::write(&csv_path, &csv)?;
    Ok(EvalSummary {
        per_view,
        scene_miou: scene_report.mean,
        csv_path,
    })
}

/// Pretty table for stdout.
pub fn print_eval_table(config: &PipelineConfig, summary: &EvalSummary) {
    println!("view     mIoU     pixels");
    for score in &summary.per_view {
        println!("{:<8} {:<8.4} {}", score.name, score.miou, score.pixels);
    }
    println!("scene    {:<8.4} (backend {})", summary.scene_miou, config.backend);
}
