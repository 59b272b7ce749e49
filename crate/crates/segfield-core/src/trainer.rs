//! Two-stage training.
//!
//! Stage 1 minimizes the mean squared colour error of rendered rays against
//! all RGB views. Stage 2 freezes the field, generates per-ray semantic
//! attributes with the fusion head, composites them with the frozen-density
//! weights, and minimizes a lambda-weighted cross-entropy: ground-truth rays
//! from the labeled training views carry lambda_train (1.0), test-view rays
//! supervised by pseudo-labels carry lambda_pseudo (0.001).

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use image::GrayImage;
use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{ensure_config_matches, load_checkpoint, save_checkpoint, CheckpointMeta};
use crate::error::{Error, Result};
use crate::features::FeatureMap;
use crate::field::{freeze_density, freeze_field, FieldConfig, NeuralField};
use crate::fusion::{FusionConfig, FusionHead};
use crate::hash::mix_seed;
use crate::nn::{lr_schedule, Adam, AdamConfig, ParamSession, ParamStore};
use crate::scene::{Ray, Scene, SplitTag, ALL_TAGS, IGNORE_LABEL};
use crate::tape::{Matrix, Tape};
use crate::volume::{sample_along_ray, SampleMode};

pub const PROB_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// 1 = geometry/colour, 2 = semantic transfer.
    pub stage: u8,
    pub ray_batch_size: usize,
    pub samples_per_ray: usize,
    pub learning_rate: f64,
    pub lr_final: f64,
    pub iterations: u64,
    pub lambda_train: f64,
    pub lambda_pseudo: f64,
    /// Fraction of each stage-2 batch drawn from test views.
    pub pseudo_mix_fraction: f64,
    pub rng_seed: u64,
    /// Stratified depth sampling during training (rendering always uses
    /// bin centres).
    pub stratified: bool,
    /// 0 = checkpoint only at the end.
    pub checkpoint_every: u64,
    pub log_every: u64,
}

impl TrainConfig {
    pub fn stage1(iterations: u64, rng_seed: u64) -> Self {
        Self {
            stage: 1,
            ray_batch_size: 1024,
            samples_per_ray: 64,
            learning_rate: 5e-4,
            lr_final: 5e-5,
            iterations,
            lambda_train: 1.0,
            lambda_pseudo: 0.001,
            pseudo_mix_fraction: 0.5,
            rng_seed,
            stratified: true,
            checkpoint_every: 0,
            log_every: 50,
        }
    }

    pub fn stage2(iterations: u64, rng_seed: u64) -> Self {
        Self {
            stage: 2,
            ..Self::stage1(iterations, rng_seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage != 1 && self.stage != 2 {
            return Err(Error::InvalidArgument(format!("stage {} not in {{1,2}}", self.stage)));
        }
        if self.ray_batch_size == 0 || self.samples_per_ray == 0 {
            return Err(Error::InvalidArgument("batch and sample counts must be positive".into()));
        }
        if self.lambda_train < 0.0 || self.lambda_pseudo < 0.0 {
            return Err(Error::InvalidArgument("lambda weights must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.pseudo_mix_fraction) {
            return Err(Error::InvalidArgument(format!(
                "pseudo_mix_fraction {} outside [0, 1]",
                self.pseudo_mix_fraction
            )));
        }
        Ok(())
    }
}

/// One CSV row of training bookkeeping.
#[derive(Debug, Clone)]
pub struct LossRecord {
    pub iteration: u64,
    pub loss_rgb: Option<f64>,
    pub loss_sem_train: Option<f64>,
    pub loss_sem_pseudo: Option<f64>,
    pub psnr: Option<f64>,
    pub wall_clock_s: f64,
}

impl LossRecord {
    pub const CSV_HEADER: &'static str =
        "iteration,loss_rgb,loss_sem_train,loss_sem_pseudo,psnr,wall_clock_s";

    pub fn to_csv_row(&self) -> String {
        let cell = |v: &Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{}",
            self.iteration,
            cell(&self.loss_rgb),
            cell(&self.loss_sem_train),
            cell(&self.loss_sem_pseudo),
            cell(&self.psnr),
            self.wall_clock_s
        )
    }
}

/// Mean over rays of the squared L2 colour error.
pub fn loss_rgb(rendered: ArrayView2<f64>, ground_truth: ArrayView2<f64>) -> f64 {
    assert_eq!(rendered.dim(), ground_truth.dim(), "loss_rgb: shape mismatch");
    let b = rendered.nrows() as f64;
    let mut total = 0.0;
    for (r, g) in rendered.rows().into_iter().zip(ground_truth.rows()) {
        total += r
            .iter()
            .zip(g.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
    }
    total / b
}

/// Weighted categorical cross-entropy, mean over rays:
/// `mean_r lambda_r * -ln(max(probs[r, target_r], clamp))`.
/// Returns the loss and how many rows hit the probability clamp.
pub fn loss_semantic(seg_probs: ArrayView2<f64>, targets: &[usize], lambdas: &[f64]) -> (f64, u64) {
    assert_eq!(seg_probs.nrows(), targets.len(), "loss_semantic: row mismatch");
    assert_eq!(targets.len(), lambdas.len(), "loss_semantic: lambda mismatch");
    let mut total = 0.0;
    let mut clamped = 0;
    for (r, (&t, &lam)) in targets.iter().zip(lambdas).enumerate() {
        let p = seg_probs[[r, t]];
        if p < PROB_CLAMP {
            clamped += 1;
        }
        total += lam * -(p.max(PROB_CLAMP)).ln();
    }
    (total / targets.len() as f64, clamped)
}

#[derive(Debug)]
pub struct StageResult {
    pub checkpoint: PathBuf,
    pub records: Vec<LossRecord>,
    pub final_iteration: u64,
}

/// Per-batch geometry shared by both stages.
struct RayBatch {
    points: Array2<f64>,
    dirs: Array2<f64>,
    deltas: Matrix,
    /// (near, far)-normalized sample depths, one per point row.
    depths_norm: Array1<f64>,
}

fn assemble_batch(scene: &Scene, rays: &[Ray], n: usize, cfg: &TrainConfig, iter: u64) -> RayBatch {
    let b = rays.len();
    let mut points = Array2::zeros((b * n, 3));
    let mut dirs = Array2::zeros((b * n, 3));
    let mut deltas = Matrix::zeros((b, n));
    let mut depths_norm = Array1::zeros(b * n);
    let span = scene.far - scene.near;
    for (i, ray) in rays.iter().enumerate() {
        let mode = if cfg.stratified {
            SampleMode::Stratified {
                seed: mix_seed(cfg.rng_seed, &format!("strat-{}-{iter}-{i}", cfg.stage)),
            }
        } else {
            SampleMode::Centers
        };
        let samples = sample_along_ray(ray, n, mode);
        for s in 0..n {
            for c in 0..3 {
                points[[i * n + s, c]] = samples.positions[[s, c]];
                dirs[[i * n + s, c]] = ray.direction[c];
            }
            deltas[[i, s]] = samples.deltas[s];
            depths_norm[i * n + s] = (samples.ts[s] - scene.near) / span;
        }
    }
    RayBatch {
        points,
        dirs,
        deltas,
        depths_norm,
    }
}

struct CsvLog {
    file: fs::File,
}

impl CsvLog {
    fn open(path: &Path) -> Result<Self> {
        let fresh = !path.exists();
        let mut file = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        if fresh {
            writeln!(file, "{}", LossRecord::CSV_HEADER).map_err(|e| Error::io(path, e))?;
        }
        Ok(Self { file })
    }

    fn write(&mut self, record: &LossRecord) {
        let _ = writeln!(self.file, "{}", record.to_csv_row());
    }
}

fn dump_diagnostic(out_dir: &Path, iteration: u64, rays: &[Ray], detail: &str) -> PathBuf {
    #[derive(Serialize)]
    struct Dump<'a> {
        iteration: u64,
        detail: &'a str,
        rays: Vec<(usize, f64, f64)>,
    }
    let dump = Dump {
        iteration,
        detail,
        rays: rays.iter().map(|r| (r.view_id, r.pixel.0, r.pixel.1)).collect(),
    };
    let path = out_dir.join(format!("diagnostic_iter{iteration}.json"));
    let _ = fs::write(&path, serde_json::to_string_pretty(&dump).unwrap_or_default());
    path
}

/// Optimize the field on random ray batches drawn from every view.
pub fn train_stage1(
    scene: &Scene,
    field_config: &FieldConfig,
    cfg: &TrainConfig,
    resume: Option<&Path>,
    out_dir: &Path,
) -> Result<StageResult> {
    cfg.validate()?;
    if cfg.stage != 1 {
        return Err(Error::InvalidArgument("train_stage1 called with stage != 1".into()));
    }
    if scene.views.len() < 2 {
        return Err(Error::InvalidScene("stage 1 needs at least 2 views".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let (mut store, field, mut adam, start_iter) = match resume {
        Some(path) => {
            let loaded = load_checkpoint(path)?;
            if loaded.meta.stage != 1 {
                return Err(Error::Checkpoint {
                    path: path.into(),
                    detail: format!("expected a stage-1 checkpoint, found stage {}", loaded.meta.stage),
                });
            }
            ensure_config_matches(path, &loaded.meta, field_config, None)?;
            let field = NeuralField::from_store(&loaded.store, field_config.clone())?;
            let adam = match loaded.adam {
                Some(state) => Adam::from_state(AdamConfig::default(), state),
                None => Adam::new(AdamConfig::default()),
            };
            (loaded.store, field, adam, loaded.meta.iteration)
        }
        None => {
            let mut store = ParamStore::new();
            let field = NeuralField::init(
                &mut store,
                field_config.clone(),
                mix_seed(cfg.rng_seed, "field-init"),
            )?;
            (store, field, Adam::new(AdamConfig::default()), 0)
        }
    };

    let mut csv = CsvLog::open(&out_dir.join("losses_stage1.csv"))?;
    let total_iters = start_iter + cfg.iterations;
    let n = cfg.samples_per_ray;
    let b = cfg.ray_batch_size;
    let started = Instant::now();
    let mut records = Vec::new();

    for iter in start_iter..total_iters {
        let rays = crate::scene::sample_ray_batch(
            scene,
            b,
            &ALL_TAGS,
            mix_seed(cfg.rng_seed, &format!("s1-rays-{iter}")),
        )?;
        let batch = assemble_batch(scene, &rays, n, cfg, iter);
        let mut gt = Array2::zeros((b, 3));
        for (i, ray) in rays.iter().enumerate() {
            let rgb = scene.views[ray.view_id]
                .rgb_at(ray.pixel.0 as u32, ray.pixel.1 as u32);
            for c in 0..3 {
                gt[[i, c]] = rgb[c];
            }
        }

        let mut tape = Tape::new();
        let mut sess = ParamSession::new(&store);
        let vars = field.forward_on_tape(
            &mut tape,
            &mut sess,
            batch.points.view(),
            Some(batch.dirs.view()),
        )?;
        let sigma_rows = tape.reshape(vars.sigma, b, n);
        let weights = tape.render_weights(sigma_rows, batch.deltas.clone());
        let rendered = tape.weighted_sum(weights, vars.colour.expect("colour branch"));
        let gt_leaf = tape.leaf(gt);
        let err = tape.sub(rendered, gt_leaf);
        let sq = tape.mul(err, err);
        let total = tape.sum_all(sq);
        let loss = tape.scale(total, 1.0 / b as f64);

        let loss_value = tape.value(loss)[[0, 0]];
        if !loss_value.is_finite() {
            let dump = dump_diagnostic(out_dir, iter, &rays, "non-finite stage-1 loss");
            return Err(Error::NonFiniteLoss {
                iteration: iter,
                dump,
            });
        }

        let grads = tape.backward(loss);
        let grad_list = sess.collect_grads(&grads);
        let lr = lr_schedule(cfg.learning_rate, cfg.lr_final, iter, total_iters);
        adam.step(&mut store, &grad_list, lr);

        let last = iter + 1 == total_iters;
        if last || (cfg.log_every > 0 && iter % cfg.log_every == 0) {
            // loss is the per-ray squared norm; per-channel MSE is a third of it
            let mse = loss_value / 3.0;
            let record = LossRecord {
                iteration: iter,
                loss_rgb: Some(loss_value),
                loss_sem_train: None,
                loss_sem_pseudo: None,
                psnr: Some(-10.0 * mse.max(1e-12).log10()),
                wall_clock_s: started.elapsed().as_secs_f64(),
            };
            csv.write(&record);
            records.push(record);
        }
        if cfg.checkpoint_every > 0 && (iter + 1) % cfg.checkpoint_every == 0 && !last {
            let meta = CheckpointMeta {
                stage: 1,
                iteration: iter + 1,
                seed: cfg.rng_seed,
                field: field_config.clone(),
                fusion: None,
            };
            save_checkpoint(
                &out_dir.join(format!("stage1_iter{:06}.ckpt", iter + 1)),
                &meta,
                &store,
                Some(&adam.export_state()),
            )?;
        }
    }

    let checkpoint = out_dir.join("stage1.ckpt");
    let meta = CheckpointMeta {
        stage: 1,
        iteration: total_iters,
        seed: cfg.rng_seed,
        field: field_config.clone(),
        fusion: None,
    };
    save_checkpoint(&checkpoint, &meta, &store, Some(&adam.export_state()))?;
    Ok(StageResult {
        checkpoint,
        records,
        final_iteration: total_iters,
    })
}

/// Labeled-pixel index for ground-truth ray sampling.
fn labeled_pixel_index(scene: &Scene) -> Vec<(usize, u32, u32, u8)> {
    let mut out = Vec::new();
    for (vid, view) in scene.views.iter().enumerate() {
        if view.split != SplitTag::TrainLabeled {
            continue;
        }
        if let Some(labels) = &view.label_map {
            for (x, y, p) in labels.enumerate_pixels() {
                if p.0[0] != IGNORE_LABEL {
                    out.push((vid, x, y, p.0[0]));
                }
            }
        }
    }
    out
}

/// Inputs bundled for stage 2: per-view feature maps (train-labeled and test
/// views) plus pseudo-label maps for every test view.
pub struct Stage2Inputs {
    pub features: BTreeMap<usize, FeatureMap>,
    pub pseudo_labels: BTreeMap<usize, GrayImage>,
}

impl Stage2Inputs {
    pub fn validate(&self, scene: &Scene) -> Result<()> {
        let mut dim = None;
        for (vid, view) in scene.views.iter().enumerate() {
            let needs_features = matches!(view.split, SplitTag::TrainLabeled | SplitTag::Test);
            if needs_features {
                let fmap = self.features.get(&vid).ok_or_else(|| {
                    Error::InvalidArgument(format!("missing feature map for view {}", view.name))
                })?;
                if let Some(d) = dim {
                    if fmap.feature_dim() != d {
                        return Err(Error::FeatureDimMismatch {
                            expected: d,
                            got: fmap.feature_dim(),
                        });
                    }
                } else {
                    dim = Some(fmap.feature_dim());
                }
            }
            if view.split == SplitTag::Test && !self.pseudo_labels.contains_key(&vid) {
                return Err(Error::MissingPseudoLabels {
                    view: view.name.clone(),
                });
            }
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        self.features
            .values()
            .next()
            .map(|f| f.feature_dim())
            .unwrap_or(0)
    }
}

/// Freeze the field from the stage-1 checkpoint and fit the fusion head on a
/// mix of ground-truth rays and pseudo-labeled test rays.
#[allow(clippy::too_many_arguments)]
pub fn train_stage2(
    scene: &Scene,
    stage1_checkpoint: &Path,
    inputs: &Stage2Inputs,
    field_config: &FieldConfig,
    fusion_config: &FusionConfig,
    cfg: &TrainConfig,
    resume: Option<&Path>,
    out_dir: &Path,
) -> Result<StageResult> {
    cfg.validate()?;
    if cfg.stage != 2 {
        return Err(Error::InvalidArgument("train_stage2 called with stage != 2".into()));
    }
    if fusion_config.semantic_dim != scene.class_count {
        return Err(Error::ConfigMismatch(format!(
            "fusion semantic_dim {} != scene class count {}",
            fusion_config.semantic_dim, scene.class_count
        )));
    }
    inputs.validate(scene)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let gt_pixels = labeled_pixel_index(scene);
    if gt_pixels.is_empty() {
        return Err(Error::InvalidScene(
            "stage 2 requires at least one labeled pixel in a train-labeled view".into(),
        ));
    }
    let test_views = scene.view_ids_with_tags(&[SplitTag::Test]);

    let (mut store, field, fusion, mut adam, start_iter) = match resume {
        Some(path) => {
            let loaded = load_checkpoint(path)?;
            if loaded.meta.stage != 2 {
                return Err(Error::Checkpoint {
                    path: path.into(),
                    detail: format!("expected a stage-2 checkpoint, found stage {}", loaded.meta.stage),
                });
            }
            ensure_config_matches(path, &loaded.meta, field_config, Some(fusion_config))?;
            let field = NeuralField::from_store(&loaded.store, field_config.clone())?;
            let fusion = FusionHead::from_store(&loaded.store, fusion_config.clone())?;
            let adam = match loaded.adam {
                Some(state) => Adam::from_state(AdamConfig::default(), state),
                None => Adam::new(AdamConfig::default()),
            };
            (loaded.store, field, fusion, adam, loaded.meta.iteration)
        }
        None => {
            let loaded = load_checkpoint(stage1_checkpoint)?;
            if loaded.meta.stage != 1 {
                return Err(Error::Checkpoint {
                    path: stage1_checkpoint.into(),
                    detail: format!(
                        "expected a stage-1 checkpoint, found stage {}",
                        loaded.meta.stage
                    ),
                });
            }
            ensure_config_matches(stage1_checkpoint, &loaded.meta, field_config, None)?;
            let mut store = loaded.store;
            let field = NeuralField::from_store(&store, field_config.clone())?;
            freeze_density(&mut store);
            // colour branch and base trunk stay fixed in stage 2 as well
            freeze_field(&mut store);
            let fusion = FusionHead::init(
                &mut store,
                fusion_config.clone(),
                field_config.base_feature_dim,
                inputs.feature_dim(),
                mix_seed(cfg.rng_seed, "fusion-init"),
            )?;
            (store, field, fusion, Adam::new(AdamConfig::default()), 0)
        }
    };

    let mut csv = CsvLog::open(&out_dir.join("losses_stage2.csv"))?;
    let total_iters = start_iter + cfg.iterations;
    let n = cfg.samples_per_ray;
    let b = cfg.ray_batch_size;
    let started = Instant::now();
    let mut records = Vec::new();

    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    for iter in start_iter..total_iters {
        // batch composition: pseudo rays from test views, ground-truth rays
        // from labeled pixels
        let n_pseudo = if test_views.is_empty() {
            0
        } else {
            ((b as f64) * cfg.pseudo_mix_fraction).round() as usize
        };
        let n_gt = b - n_pseudo;

        let mut rays = Vec::with_capacity(b);
        let mut targets = Vec::with_capacity(b);
        let mut lambdas = Vec::with_capacity(b);

        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.rng_seed, &format!("s2-gt-{iter}")));
        for _ in 0..n_gt {
            let (vid, x, y, label) = gt_pixels[rng.random_range(0..gt_pixels.len())];
            rays.push(scene.ray_through(vid, x as f64 + 0.5, y as f64 + 0.5)?);
            targets.push(label as usize);
            lambdas.push(cfg.lambda_train);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.rng_seed, &format!("s2-ps-{iter}")));
        for _ in 0..n_pseudo {
            let vid = test_views[rng.random_range(0..test_views.len())];
            let cam = &scene.views[vid].camera;
            let x = rng.random_range(0..cam.width);
            let y = rng.random_range(0..cam.height);
            let label = inputs.pseudo_labels[&vid].get_pixel(x, y).0[0];
            rays.push(scene.ray_through(vid, x as f64 + 0.5, y as f64 + 0.5)?);
            targets.push(label as usize);
            lambdas.push(cfg.lambda_pseudo);
        }

        let batch = assemble_batch(scene, &rays, n, cfg, iter);
        // frozen field: plain inference, no gradient flows back into it
        let field_out = field.query(&store, batch.points.view(), None)?;
        let mut weight_rows = Matrix::zeros((b, n));
        for i in 0..b {
            let sigmas: Vec<f64> = (0..n).map(|s| field_out.sigma[i * n + s]).collect();
            let drow: Vec<f64> = (0..n).map(|s| batch.deltas[[i, s]]).collect();
            let w = crate::volume::compute_weights(&sigmas, &drow)?;
            for (s, wv) in w.iter().enumerate() {
                weight_rows[[i, s]] = *wv;
            }
        }
        let mut prior = Array2::zeros((b, inputs.feature_dim()));
        for (i, ray) in rays.iter().enumerate() {
            let fmap = &inputs.features[&ray.view_id];
            let f = fmap.lookup(ray.pixel.0, ray.pixel.1)?;
            for (c, v) in f.iter().enumerate() {
                prior[[i, c]] = *v;
            }
        }

        let mut tape = Tape::new();
        let mut sess = ParamSession::new(&store);
        let base = tape.leaf(field_out.base);
        let prior_leaf = tape.leaf(prior);
        let s2 = fusion.forward(
            &mut tape,
            &mut sess,
            base,
            Some(batch.depths_norm.view()),
            Some(prior_leaf),
            b,
            n,
        )?;
        let weights_leaf = tape.leaf(weight_rows);
        let seg_logits = tape.weighted_sum(weights_leaf, s2);
        let probs = tape.softmax_rows(seg_logits);
        let loss = tape.nll_pick(probs, targets.clone(), lambdas.clone(), PROB_CLAMP);

        let loss_value = tape.value(loss)[[0, 0]];
        if !loss_value.is_finite() {
            let dump = dump_diagnostic(out_dir, iter, &rays, "non-finite stage-2 loss");
            return Err(Error::NonFiniteLoss {
                iteration: iter,
                dump,
            });
        }
        if tape.clamp_hits() > 0 {
            log::warn!(
                "iteration {iter}: {} rays hit the probability clamp",
                tape.clamp_hits()
            );
        }

        let grads = tape.backward(loss);
        let grad_list = sess.collect_grads(&grads);
        let lr = lr_schedule(cfg.learning_rate, cfg.lr_final, iter, total_iters);
        adam.step(&mut store, &grad_list, lr);

        let last = iter + 1 == total_iters;
        if last || (cfg.log_every > 0 && iter % cfg.log_every == 0) {
            let prob_values = tape.value(probs);
            let group_mean = |range: std::ops::Range<usize>| -> Option<f64> {
                if range.is_empty() {
                    return None;
                }
                let mut total = 0.0;
                for r in range.clone() {
                    total += lambdas[r] * -(prob_values[[r, targets[r]]].max(PROB_CLAMP)).ln();
                }
                Some(total / range.len() as f64)
            };
            let record = LossRecord {
                iteration: iter,
                loss_rgb: None,
                loss_sem_train: group_mean(0..n_gt),
                loss_sem_pseudo: group_mean(n_gt..b),
                psnr: None,
                wall_clock_s: started.elapsed().as_secs_f64(),
            };
            csv.write(&record);
            records.push(record);
        }
        if cfg.checkpoint_every > 0 && (iter + 1) % cfg.checkpoint_every == 0 && !last {
            let meta = CheckpointMeta {
                stage: 2,
                iteration: iter + 1,
                seed: cfg.rng_seed,
                field: field_config.clone(),
                fusion: Some(fusion_config.clone()),
            };
            save_checkpoint(
                &out_dir.join(format!("stage2_iter{:06}.ckpt", iter + 1)),
                &meta,
                &store,
                Some(&adam.export_state()),
            )?;
        }
    }

    let checkpoint = out_dir.join("stage2.ckpt");
    let meta = CheckpointMeta {
        stage: 2,
        iteration: total_iters,
        seed: cfg.rng_seed,
        field: field_config.clone(),
        fusion: Some(fusion_config.clone()),
    };
    save_checkpoint(&checkpoint, &meta, &store, Some(&adam.export_state()))?;
    Ok(StageResult {
        checkpoint,
        records,
        final_iteration: total_iters,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{extract_features, StubBackend};
    use crate::pseudo::{assign_pseudo_labels, compute_centroids, DistanceMetric};
    use crate::synth::{generate_toy_scene, CameraRing, Primitive, PrimitiveShape, ToySceneSpec};
    use ndarray::arr2;

    fn tiny_spec() -> ToySceneSpec {
        ToySceneSpec {
            primitives: vec![
                Primitive {
                    shape: PrimitiveShape::Plane,
                    position: [0.0, 0.0, 0.0],
                    size: [10.0, 0.0, 10.0],
                    albedo: [0.4, 0.45, 0.5],
                    class: 0,
                },
                Primitive {
                    shape: PrimitiveShape::Sphere,
                    position: [0.0, 0.6, 0.0],
                    size: [0.6, 0.0, 0.0],
                    albedo: [0.85, 0.2, 0.1],
                    class: 1,
                },
            ],
            camera_ring: CameraRing {
                radius: 2.2,
                height: 1.6,
                count: 4,
                look_at: [0.0, 0.4, 0.0],
            },
            image_size: [24, 24],
            focal: 22.0,
            near: 0.4,
            far: 20.0,
            labeled_views: vec![0],
            unlabeled_views: vec![1],
            rng_seed: 3,
        }
    }

    fn tiny_field() -> FieldConfig {
        FieldConfig {
            position_freqs: 3,
            direction_freqs: 2,
            hidden_width: 24,
            depth: 2,
            base_feature_dim: 12,
            position_scale: 12.0,
        }
    }

    fn tiny_fusion() -> FusionConfig {
        FusionConfig {
            model_dim: 8,
            head_count: 2,
            encoder_layers: 1,
            decoder_layers: 1,
            feedforward_dim: 16,
            semantic_dim: 2,
            depth_encoding: true,
        }
    }

    fn tiny_train(stage: u8, iterations: u64) -> TrainConfig {
        TrainConfig {
            stage,
            ray_batch_size: 16,
            samples_per_ray: 8,
            learning_rate: 5e-4,
            lr_final: 5e-5,
            iterations,
            lambda_train: 1.0,
            lambda_pseudo: 0.001,
            pseudo_mix_fraction: 0.5,
            rng_seed: 11,
            stratified: true,
            checkpoint_every: 0,
            log_every: 10,
        }
    }

    fn stage2_inputs(scene: &Scene, dir: &Path) -> Stage2Inputs {
        let cache = crate::features::FeatureCache::new(dir.join("features"));
        let mut features = BTreeMap::new();
        for (vid, view) in scene.views.iter().enumerate() {
            if matches!(view.split, SplitTag::TrainLabeled | SplitTag::Test) {
                features.insert(
                    vid,
                    extract_features(&view.image, &StubBackend, Some(&cache)).unwrap(),
                );
            }
        }
        let labeled: Vec<(usize, &FeatureMap)> = scene
            .views
            .iter()
            .enumerate()
            .filter(|(_, v)| v.split == SplitTag::TrainLabeled)
            .map(|(vid, _)| (vid, &features[&vid]))
            .collect();
        let pairs: Vec<(&FeatureMap, &GrayImage)> = labeled
            .iter()
            .map(|(vid, f)| (*f, scene.views[*vid].label_map.as_ref().unwrap()))
            .collect();
        let cents =
            compute_centroids(&pairs, scene.class_count, DistanceMetric::Euclidean).unwrap();
        let mut pseudo_labels = BTreeMap::new();
        for (vid, view) in scene.views.iter().enumerate() {
            if view.split == SplitTag::Test {
                let map = assign_pseudo_labels(&features[&vid], &cents, vid).unwrap();
                pseudo_labels.insert(vid, map.labels);
            }
        }
        Stage2Inputs {
            features,
            pseudo_labels,
        }
    }

    #[test]
    fn loss_rgb_examples_and_brute_force() {
        let a = arr2(&[[0.1, 0.2, 0.3], [0.9, 0.8, 0.7]]);
        assert_eq!(loss_rgb(a.view(), a.view()), 0.0);

        let eps = 0.05;
        let shifted = &a + &arr2(&[[eps, 0.0, 0.0], [eps, 0.0, 0.0]]);
        assert!((loss_rgb(shifted.view(), a.view()) - eps * eps).abs() < 1e-12);

        use rand::Rng;
        use rand_chacha::rand_core::SeedableRng;
        use rand_chacha::ChaCha8Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = Array2::from_shape_fn((32, 3), |_| rng.random_range(0.0..1.0));
        let g = Array2::from_shape_fn((32, 3), |_| rng.random_range(0.0..1.0));
        let mut brute = 0.0;
        for i in 0..32 {
            for c in 0..3 {
                let d: f64 = r[[i, c]] - g[[i, c]];
                brute += d * d;
            }
        }
        brute /= 32.0;
        assert!((loss_rgb(r.view(), g.view()) - brute).abs() < 1e-7);
    }

    #[test]
    fn loss_semantic_examples() {
        // one-hot correct prediction costs nothing
        let probs = arr2(&[[0.0, 1.0, 0.0]]);
        let (l, clamped) = loss_semantic(probs.view(), &[1], &[1.0]);
        assert_eq!(l, 0.0);
        assert_eq!(clamped, 0);

        // uniform over 4 classes costs ln 4
        let probs = arr2(&[[0.25, 0.25, 0.25, 0.25]]);
        let (l, _) = loss_semantic(probs.view(), &[2], &[1.0]);
        assert!((l - 4.0f64.ln()).abs() < 1e-12);
        assert!((l - 1.386294).abs() < 1e-6);

        // mixed batch equals the hand-computed weighted sum
        let probs = arr2(&[[0.7, 0.3], [0.2, 0.8]]);
        let (l, _) = loss_semantic(probs.view(), &[0, 0], &[1.0, 0.001]);
        let expected = (1.0 * -(0.7f64.ln()) + 0.001 * -(0.2f64.ln())) / 2.0;
        assert!((l - expected).abs() < 1e-12);

        // zero probability hits the clamp and the warning counter
        let probs = arr2(&[[1.0, 0.0]]);
        let (l, clamped) = loss_semantic(probs.view(), &[1], &[1.0]);
        assert_eq!(clamped, 1);
        assert!((l - -(PROB_CLAMP.ln())).abs() < 1e-6);
    }

    #[test]
    fn zero_iterations_keeps_initialization() {
        let scene = generate_toy_scene(&tiny_spec()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_train(1, 0);
        let result = train_stage1(&scene, &tiny_field(), &cfg, None, dir.path()).unwrap();
        let loaded = load_checkpoint(&result.checkpoint).unwrap();

        let mut fresh = ParamStore::new();
        NeuralField::init(&mut fresh, tiny_field(), mix_seed(cfg.rng_seed, "field-init")).unwrap();
        for (name, param) in fresh.iter() {
            assert_eq!(&param.value, loaded.store.value(name), "{name}");
        }
        assert_eq!(loaded.meta.iteration, 0);
    }

    #[test]
    fn stage1_loss_decreases_on_fixed_seed() {
        let scene = generate_toy_scene(&tiny_spec()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_train(1, 100);
        cfg.log_every = 1;
        let result = train_stage1(&scene, &tiny_field(), &cfg, None, dir.path()).unwrap();
        let first = result.records.first().unwrap().loss_rgb.unwrap();
        let last = result.records.last().unwrap().loss_rgb.unwrap();
        assert!(
            last < first,
            "loss should decrease over 100 iterations: {first} -> {last}"
        );
    }

    #[test]
    fn resume_continues_iteration_numbering() {
        let scene = generate_toy_scene(&tiny_spec()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_train(1, 5);
        let r1 = train_stage1(&scene, &tiny_field(), &cfg, None, dir.path()).unwrap();
        assert_eq!(r1.final_iteration, 5);
        let r2 =
            train_stage1(&scene, &tiny_field(), &cfg, Some(&r1.checkpoint), dir.path()).unwrap();
        assert_eq!(r2.final_iteration, 10);
        assert!(r2.records.iter().all(|r| r.iteration >= 5));
        let loaded = load_checkpoint(&r2.checkpoint).unwrap();
        assert_eq!(loaded.meta.iteration, 10);

        // resuming with a different field config is rejected
        let mut other = tiny_field();
        other.hidden_width += 8;
        assert!(train_stage1(&scene, &other, &cfg, Some(&r1.checkpoint), dir.path()).is_err());
    }

    #[test]
    fn stage2_freezes_density_bit_exactly() {
        let scene = generate_toy_scene(&tiny_spec()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let s1 = train_stage1(&scene, &tiny_field(), &tiny_train(1, 10), None, dir.path()).unwrap();
        let before = load_checkpoint(&s1.checkpoint).unwrap();

        let inputs = stage2_inputs(&scene, dir.path());
        let s2 = train_stage2(
            &scene,
            &s1.checkpoint,
            &inputs,
            &tiny_field(),
            &tiny_fusion(),
            &tiny_train(2, 10),
            None,
            dir.path(),
        )
        .unwrap();
        let after = load_checkpoint(&s2.checkpoint).unwrap();

        let mut fusion_changed = false;
        for (name, param) in after.store.iter() {
            if name.starts_with("field.") {
                assert_eq!(
                    &param.value,
                    before.store.value(name),
                    "frozen field param {name} changed"
                );
            } else if name == "fusion.out_proj.w" {
                fusion_changed = true;
            }
            let _ = param;
        }
        assert!(fusion_changed);
    }

    #[test]
    fn stage2_changes_only_fusion_parameters() {
        let scene = generate_toy_scene(&tiny_spec()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let s1 = train_stage1(&scene, &tiny_field(), &tiny_train(1, 5), None, dir.path()).unwrap();
        let inputs = stage2_inputs(&scene, dir.path());
        let cfg = tiny_train(2, 1);
        let s2 = train_stage2(
            &scene,
            &s1.checkpoint,
            &inputs,
            &tiny_field(),
            &tiny_fusion(),
            &cfg,
            None,
            dir.path(),
        )
        .unwrap();
        let after = load_checkpoint(&s2.checkpoint).unwrap();

        // reconstruct the pre-step stage-2 store: stage-1 params + fresh fusion
        let mut reference = load_checkpoint(&s1.checkpoint).unwrap().store;
        crate::field::freeze_density(&mut reference);
        crate::field::freeze_field(&mut reference);
        FusionHead::init(
            &mut reference,
            tiny_fusion(),
            tiny_field().base_feature_dim,
            inputs.feature_dim(),
            mix_seed(cfg.rng_seed, "fusion-init"),
        )
        .unwrap();

        let mut changed = Vec::new();
        for (name, param) in after.store.iter() {
            if reference.value(name) != &param.value {
                changed.push(name.to_string());
            }
        }
        assert!(!changed.is_empty());
        assert!(
            changed.iter().all(|n| n.starts_with("fusion.")),
            "non-fusion parameters changed: {changed:?}"
        );
        assert!(changed.iter().any(|n| n == "fusion.out_proj.w"));
    }

    #[test]
    fn zero_lambda_pseudo_all_pseudo_batch_is_a_no_op() {
        let scene = generate_toy_scene(&tiny_spec()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let s1 = train_stage1(&scene, &tiny_field(), &tiny_train(1, 5), None, dir.path()).unwrap();
        let inputs = stage2_inputs(&scene, dir.path());
        let mut cfg = tiny_train(2, 3);
        cfg.lambda_pseudo = 0.0;
        cfg.pseudo_mix_fraction = 1.0;
        let s2 = train_stage2(
            &scene,
            &s1.checkpoint,
            &inputs,
            &tiny_field(),
            &tiny_fusion(),
            &cfg,
            None,
            dir.path(),
        )
        .unwrap();
        let after = load_checkpoint(&s2.checkpoint).unwrap();

        let mut reference = load_checkpoint(&s1.checkpoint).unwrap().store;
        crate::field::freeze_density(&mut reference);
        crate::field::freeze_field(&mut reference);
        FusionHead::init(
            &mut reference,
            tiny_fusion(),
            tiny_field().base_feature_dim,
            inputs.feature_dim(),
            mix_seed(cfg.rng_seed, "fusion-init"),
        )
        .unwrap();
        for (name, param) in after.store.iter() {
            assert_eq!(reference.value(name), &param.value, "{name} changed");
        }
    }

    #[test]
    fn stage2_requires_pseudo_labels_for_every_test_view() {
        let scene = generate_toy_scene(&tiny_spec()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let s1 = train_stage1(&scene, &tiny_field(), &tiny_train(1, 2), None, dir.path()).unwrap();
        let mut inputs = stage2_inputs(&scene, dir.path());
        let missing = *inputs.pseudo_labels.keys().next().unwrap();
        inputs.pseudo_labels.remove(&missing);
        let err = train_stage2(
            &scene,
            &s1.checkpoint,
            &inputs,
            &tiny_field(),
            &tiny_fusion(),
            &tiny_train(2, 2),
            None,
            dir.path(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::MissingPseudoLabels { .. }));
    }

    #[test]
    fn batch_losses_are_deterministic_for_a_seed() {
        let scene = generate_toy_scene(&tiny_spec()).unwrap();
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let mut cfg = tiny_train(1, 8);
        cfg.log_every = 1;
        let r1 = train_stage1(&scene, &tiny_field(), &cfg, None, d1.path()).unwrap();
        let r2 = train_stage1(&scene, &tiny_field(), &cfg, None, d2.path()).unwrap();
        for (a, b) in r1.records.iter().zip(&r2.records) {
            assert_eq!(a.loss_rgb, b.loss_rgb);
        }
    }
}
