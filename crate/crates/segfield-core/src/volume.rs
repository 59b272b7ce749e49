//! Stratified ray sampling and the compositing equations.
//!
//! Colour and semantic rendering share one weight computation:
//! `w_i = exp(-sum_{j<i} delta_j sigma_j) * (1 - exp(-delta_i sigma_i))`,
//! the pixel colour is `sum_i w_i c_i` and the raw semantic logits are
//! `sum_i w_i s2_i`. The composited logits are turned into probabilities
//! with a softmax on the loss side.

use ndarray::{Array1, Array2, ArrayView2};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scene::Ray;

/// Interval assigned to the last sample so it absorbs the remaining
/// transmittance.
pub const DELTA_SENTINEL: f64 = 1e10;

#[derive(Debug, Clone, Copy)]
pub enum SampleMode {
    /// One sample at each bin centre.
    Centers,
    /// One uniform draw per bin, seeded for reproducibility.
    Stratified { seed: u64 },
}

#[derive(Debug, Clone)]
pub struct RaySamples {
    /// Depths along the ray, strictly increasing, inside [near, far].
    pub ts: Vec<f64>,
    /// World-space sample positions, one row per sample.
    pub positions: Array2<f64>,
    /// Consecutive depth differences; the final entry is [`DELTA_SENTINEL`].
    pub deltas: Vec<f64>,
}

/// Partition `[near, far]` into `n` bins and draw one sample per bin.
pub fn sample_along_ray(ray: &Ray, n: usize, mode: SampleMode) -> RaySamples {
    assert!(n >= 1, "sample_along_ray: n must be >= 1");
    let h = (ray.far - ray.near) / n as f64;
    let mut ts = Vec::with_capacity(n);
    match mode {
        SampleMode::Centers => {
            for i in 0..n {
                ts.push(ray.near + (i as f64 + 0.5) * h);
            }
        }
        SampleMode::Stratified { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for i in 0..n {
                let u: f64 = rng.random_range(0.0..1.0);
                ts.push(ray.near + (i as f64 + u) * h);
            }
        }
    }
    let mut deltas = Vec::with_capacity(n);
    for i in 0..n - 1 {
        deltas.push(ts[i + 1] - ts[i]);
    }
    deltas.push(DELTA_SENTINEL);
    let mut positions = Array2::zeros((n, 3));
    for (i, &t) in ts.iter().enumerate() {
        let p = ray.origin + ray.direction * t;
        positions[[i, 0]] = p.x;
        positions[[i, 1]] = p.y;
        positions[[i, 2]] = p.z;
    }
    RaySamples {
        ts,
        positions,
        deltas,
    }
}

/// Shared weight kernel. Also used by the tape's `render_weights` op so the
/// differentiable path and this public API cannot drift apart.
pub(crate) fn weights_from_row(sigmas: &[f64], deltas: &[f64]) -> Vec<f64> {
    let mut weights = Vec::with_capacity(sigmas.len());
    let mut transmittance = 1.0;
    for (&sigma, &delta) in sigmas.iter().zip(deltas) {
        let att = (-delta * sigma).exp();
        weights.push(transmittance * (1.0 - att));
        transmittance *= att;
    }
    weights
}

/// Compositing weights for one ray.
pub fn compute_weights(sigmas: &[f64], deltas: &[f64]) -> Result<Vec<f64>> {
    if sigmas.len() != deltas.len() {
        return Err(Error::ShapeMismatch(format!(
            "compute_weights: {} sigmas vs {} deltas",
            sigmas.len(),
            deltas.len()
        )));
    }
    if let Some(s) = sigmas.iter().find(|s| !s.is_finite() || **s < 0.0) {
        return Err(Error::InvalidArgument(format!("negative or non-finite sigma {s}")));
    }
    if let Some(d) = deltas.iter().find(|d| !d.is_finite() || **d <= 0.0) {
        return Err(Error::InvalidArgument(format!("non-positive or non-finite delta {d}")));
    }
    Ok(weights_from_row(sigmas, deltas))
}

/// `sum_i w_i c_i`, componentwise.
pub fn render_colour(weights: &[f64], colours: ArrayView2<f64>) -> [f64; 3] {
    assert_eq!(weights.len(), colours.nrows(), "render_colour: shape mismatch");
    assert_eq!(colours.ncols(), 3);
    let mut out = [0.0; 3];
    for (i, &w) in weights.iter().enumerate() {
        for c in 0..3 {
            out[c] += w * colours[[i, c]];
        }
    }
    out
}

/// Raw composited semantic logits `sum_i w_i s2_i`.
pub fn render_semantics(weights: &[f64], semantic_attrs: ArrayView2<f64>) -> Array1<f64> {
    assert_eq!(
        weights.len(),
        semantic_attrs.nrows(),
        "render_semantics: shape mismatch"
    );
    let l = semantic_attrs.ncols();
    let mut out = Array1::zeros(l);
    for (i, &w) in weights.iter().enumerate() {
        for c in 0..l {
            out[c] += w * semantic_attrs[[i, c]];
        }
    }
    out
}

/// Softmax of composited logits; the probability vector consumed by the
/// semantic loss and by per-pixel argmax rendering.
pub fn seg_probabilities(logits: &Array1<f64>) -> Array1<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out = logits.mapv(|v| (v - m).exp());
    let sum = out.sum();
    out.mapv_inplace(|v| v / sum);
    out
}

/// Per-ray composited outputs.
#[derive(Debug, Clone)]
pub struct RenderOutput {
    pub colour: [f64; 3],
    /// Class probabilities (softmax of composited logits); absent when the
    /// model has no semantic head attached.
    pub seg: Option<Array1<f64>>,
    pub weights: Vec<f64>,
    pub accumulated_opacity: f64,
}

pub fn composite_ray(
    weights: Vec<f64>,
    colours: ArrayView2<f64>,
    semantic_attrs: Option<ArrayView2<f64>>,
) -> RenderOutput {
    let colour = render_colour(&weights, colours);
    let seg = semantic_attrs.map(|attrs| seg_probabilities(&render_semantics(&weights, attrs)));
    let accumulated_opacity = weights.iter().sum();
    RenderOutput {
        colour,
        seg,
        weights,
        accumulated_opacity,
    }
}

/// Full-image rendering of one view: composited colour, accumulated opacity,
/// and (when a fusion head plus that view's feature map are attached) the
/// per-pixel argmax label map. Uses deterministic centre sampling.
pub fn render_view(
    scene: &crate::scene::Scene,
    view_id: usize,
    field: &crate::field::NeuralField,
    store: &crate::nn::ParamStore,
    fusion: Option<(&crate::fusion::FusionHead, &crate::features::FeatureMap)>,
    samples_per_ray: usize,
) -> Result<RenderedView> {
    use rayon::prelude::*;

    let cam = &scene.views[view_id].camera;
    let (w, h) = (cam.width, cam.height);
    let n = samples_per_ray;
    let all_pixels: Vec<(u32, u32)> = (0..h).flat_map(|y| (0..w).map(move |x| (x, y))).collect();

    const CHUNK: usize = 2048;
    let chunks: Vec<Vec<(u32, u32)>> = all_pixels.chunks(CHUNK).map(|c| c.to_vec()).collect();
    let results: Vec<Result<ChunkRender>> = chunks
        .par_iter()
        .map(|pixels| render_chunk(scene, view_id, field, store, fusion, pixels, n))
        .collect();

    let mut image = image::RgbImage::new(w, h);
    let mut labels = fusion.map(|_| image::GrayImage::new(w, h));
    let mut opacity = Array2::zeros((h as usize, w as usize));
    for (pixels, chunk) in chunks.iter().zip(results) {
        let chunk = chunk?;
        for (i, &(x, y)) in pixels.iter().enumerate() {
            let c = chunk.colours[i];
            image.put_pixel(
                x,
                y,
                image::Rgb([
                    (c[0].clamp(0.0, 1.0) * 255.0).round() as u8,
                    (c[1].clamp(0.0, 1.0) * 255.0).round() as u8,
                    (c[2].clamp(0.0, 1.0) * 255.0).round() as u8,
                ]),
            );
            if let Some(labels) = labels.as_mut() {
                labels.put_pixel(x, y, image::Luma([chunk.labels[i]]));
            }
            opacity[[y as usize, x as usize]] = chunk.opacities[i];
        }
    }
    Ok(RenderedView {
        image,
        labels,
        opacity,
    })
}

#[derive(Debug)]
pub struct RenderedView {
    pub image: image::RgbImage,
    /// Present when semantics were rendered.
    pub labels: Option<image::GrayImage>,
    pub opacity: Array2<f64>,
}

struct ChunkRender {
    colours: Vec<[f64; 3]>,
    labels: Vec<u8>,
    opacities: Vec<f64>,
}

fn render_chunk(
    scene: &crate::scene::Scene,
    view_id: usize,
    field: &crate::field::NeuralField,
    store: &crate::nn::ParamStore,
    fusion: Option<(&crate::fusion::FusionHead, &crate::features::FeatureMap)>,
    pixels: &[(u32, u32)],
    n: usize,
) -> Result<ChunkRender> {
    use ndarray::Array1;

    let b = pixels.len();
    let mut points = Array2::zeros((b * n, 3));
    let mut dirs = Array2::zeros((b * n, 3));
    let mut deltas = Array2::zeros((b, n));
    let mut depths_norm = Array1::zeros(b * n);
    let span = scene.far - scene.near;
    for (i, &(x, y)) in pixels.iter().enumerate() {
        let ray = scene.ray_through(view_id, x as f64 + 0.5, y as f64 + 0.5)?;
        let samples = sample_along_ray(&ray, n, SampleMode::Centers);
        for s in 0..n {
            for c in 0..3 {
                points[[i * n + s, c]] = samples.positions[[s, c]];
                dirs[[i * n + s, c]] = ray.direction[c];
            }
            deltas[[i, s]] = samples.deltas[s];
            depths_norm[i * n + s] = (samples.ts[s] - scene.near) / span;
        }
    }

    let out = field.query(store, points.view(), Some(dirs.view()))?;
    let mut colours = Vec::with_capacity(b);
    let mut labels = Vec::with_capacity(b);
    let mut opacities = Vec::with_capacity(b);

    let seg_attrs = match fusion {
        Some((head, fmap)) => {
            let mut prior = Array2::zeros((b, fmap.feature_dim()));
            for (i, &(x, y)) in pixels.iter().enumerate() {
                let f = fmap.lookup(x as f64 + 0.5, y as f64 + 0.5)?;
                for (c, v) in f.iter().enumerate() {
                    prior[[i, c]] = *v;
                }
            }
            Some(head.infer(
                store,
                &out.base,
                Some(depths_norm.view()),
                Some(&prior),
                b,
                n,
            )?)
        }
        None => None,
    };

    for i in 0..b {
        let sigmas: Vec<f64> = (0..n).map(|s| out.sigma[i * n + s]).collect();
        let drow: Vec<f64> = (0..n).map(|s| deltas[[i, s]]).collect();
        let weights = weights_from_row(&sigmas, &drow);
        let colour = render_colour(&weights, out.colour.slice(ndarray::s![i * n..(i + 1) * n, ..]));
        colours.push(colour);
        opacities.push(weights.iter().sum());
        if let Some(attrs) = &seg_attrs {
            let logits =
                render_semantics(&weights, attrs.slice(ndarray::s![i * n..(i + 1) * n, ..]));
            let probs = seg_probabilities(&logits);
            let label = probs
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(c, _)| c as u8)
                .unwrap_or(0);
            labels.push(label);
        }
    }
    Ok(ChunkRender {
        colours,
        labels,
        opacities,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::Ray;
    use nalgebra::{Point3, Vector3};
    use proptest::prelude::*;

    fn test_ray(near: f64, far: f64) -> Ray {
        Ray {
            origin: Point3::origin(),
            direction: Vector3::new(0.0, 0.0, -1.0),
            near,
            far,
            pixel: (0.0, 0.0),
            view_id: 0,
        }
    }

    #[test]
    fn centers_mode_hits_bin_centres() {
        let s = sample_along_ray(&test_ray(0.0, 4.0), 4, SampleMode::Centers);
        assert_eq!(s.ts, vec![0.5, 1.5, 2.5, 3.5]);
        assert_eq!(s.deltas[..3], [1.0, 1.0, 1.0]);
        assert_eq!(s.deltas[3], DELTA_SENTINEL);
    }

    #[test]
    fn single_sample_sits_at_centre() {
        let s = sample_along_ray(&test_ray(1.0, 3.0), 1, SampleMode::Centers);
        assert_eq!(s.ts, vec![2.0]);
        assert_eq!(s.deltas, vec![DELTA_SENTINEL]);
    }

    #[test]
    fn stratified_draws_stay_in_their_bins() {
        let ray = test_ray(0.5, 4.5);
        let n = 16;
        let s = sample_along_ray(&ray, n, SampleMode::Stratified { seed: 9 });
        let h = (ray.far - ray.near) / n as f64;
        for (i, &t) in s.ts.iter().enumerate() {
            let lo = ray.near + i as f64 * h;
            assert!(t >= lo && t < lo + h, "sample {i} out of bin");
        }
        for w in s.ts.windows(2) {
            assert!(w[1] > w[0]);
        }
        // same seed, same draws
        let s2 = sample_along_ray(&ray, n, SampleMode::Stratified { seed: 9 });
        assert_eq!(s.ts, s2.ts);
    }

    #[test]
    fn transparent_medium_has_zero_weights() {
        let w = compute_weights(&[0.0, 0.0, 0.0], &[1.0, 1.0, 1.0]).unwrap();
        assert!(w.iter().all(|&w| w == 0.0));
    }

    #[test]
    fn opaque_first_sample_takes_all_weight() {
        let w = compute_weights(&[1e9], &[1.0]).unwrap();
        assert!((w[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn two_sample_weights_match_direct_evaluation() {
        // w1 = 1 - e^-1, w2 = e^-1 (1 - e^-1)
        let w = compute_weights(&[1.0, 1.0], &[1.0, 1.0]).unwrap();
        let e1 = (-1.0f64).exp();
        assert!((w[0] - (1.0 - e1)).abs() < 1e-15);
        assert!((w[1] - e1 * (1.0 - e1)).abs() < 1e-15);
        assert!((w[0] - 0.63212).abs() < 1e-5);
        assert!((w[1] - 0.23254).abs() < 1e-5);
    }

    #[test]
    fn negative_inputs_are_rejected() {
        assert!(compute_weights(&[-1.0], &[1.0]).is_err());
        assert!(compute_weights(&[1.0], &[0.0]).is_err());
        assert!(compute_weights(&[1.0], &[-2.0]).is_err());
    }

    #[test]
    fn render_colour_examples() {
        let c = ndarray::arr2(&[[0.2, 0.4, 0.6]]);
        assert_eq!(render_colour(&[1.0], c.view()), [0.2, 0.4, 0.6]);
        assert_eq!(render_colour(&[0.0], c.view()), [0.0, 0.0, 0.0]);
        let c2 = ndarray::arr2(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]);
        let out = render_colour(&[0.5, 0.25], c2.view());
        assert_eq!(out, [0.5, 0.25, 0.0]);
    }

    #[test]
    fn render_semantics_examples() {
        // one-hot attribute passes through
        let s = ndarray::arr2(&[[0.0, 0.0, 1.0, 0.0]]);
        let seg = render_semantics(&[1.0], s.view());
        let am = seg
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert_eq!(am, 2);

        // composited logits and argmax from the two-point case
        let s2 = ndarray::arr2(&[[2.0, 0.0], [0.0, 4.0]]);
        let seg2 = render_semantics(&[0.6, 0.2], s2.view());
        assert!((seg2[0] - 1.2).abs() < 1e-12);
        assert!((seg2[1] - 0.8).abs() < 1e-12);
        let probs = seg_probabilities(&seg2);
        assert!(probs[0] > probs[1]);
        assert!((probs.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn identical_attrs_make_seg_proportional_regardless_of_split() {
        let s = ndarray::arr2(&[[0.3, 0.7, 0.1], [0.3, 0.7, 0.1]]);
        let a = render_semantics(&[0.8, 0.1], s.view());
        let b = render_semantics(&[0.45, 0.45], s.view());
        // both proportional to (0.3, 0.7, 0.1)
        let ra = &a / a.sum();
        let rb = &b / b.sum();
        for (x, y) in ra.iter().zip(rb.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn splitting_a_sample_preserves_constant_colour_compositing() {
        let sigma = 0.7;
        let delta = 0.4;
        let colour = ndarray::arr2(&[[0.3, 0.5, 0.9], [0.3, 0.5, 0.9], [0.1, 0.2, 0.3]]);
        let merged = {
            let w = compute_weights(&[sigma, 2.0, 0.4], &[delta, 0.3, 0.2]).unwrap();
            render_colour(&w, colour.slice(ndarray::s![..3, ..]))
        };
        let split = {
            let colour4 =
                ndarray::arr2(&[[0.3, 0.5, 0.9], [0.3, 0.5, 0.9], [0.3, 0.5, 0.9], [0.1, 0.2, 0.3]]);
            let w = compute_weights(
                &[sigma, sigma, 2.0, 0.4],
                &[delta / 2.0, delta / 2.0, 0.3, 0.2],
            )
            .unwrap();
            render_colour(&w, colour4.view())
        };
        for c in 0..3 {
            assert!((merged[c] - split[c]).abs() < 1e-6);
        }
    }

    proptest! {
        #[test]
        fn weight_sum_matches_total_transmittance(
            sig in proptest::collection::vec(0.0f64..5.0, 1..32),
            del in proptest::collection::vec(0.01f64..2.0, 1..32),
        ) {
            let n = sig.len().min(del.len());
            let w = compute_weights(&sig[..n], &del[..n]).unwrap();
            let total: f64 = w.iter().sum();
            let expected = 1.0 - (-sig[..n]
                .iter()
                .zip(&del[..n])
                .map(|(s, d)| s * d)
                .sum::<f64>())
                .exp();
            prop_assert!((total - expected).abs() < 1e-6);
            prop_assert!(w.iter().all(|&w| (0.0..=1.0 + 1e-9).contains(&w)));
            prop_assert!(total <= 1.0 + 1e-6);
        }
    }
}
