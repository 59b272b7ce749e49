//! Pseudo-labels from foundation features: per-class centroids over the
//! labeled training pixels, then minimum-distance assignment for every pixel
//! of the test views. No confidence thresholding; the distance margin between
//! the best and second-best centroid is emitted for diagnostics only.

use std::fs;
use std::io::Write;
use std::path::Path;

use image::GrayImage;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureMap;
use crate::scene::IGNORE_LABEL;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistanceMetric {
    Euclidean,
    Cosine,
}

impl DistanceMetric {
    pub fn distance(&self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            DistanceMetric::Euclidean => a
                .iter()
                .zip(b)
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt(),
            DistanceMetric::Cosine => {
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
                let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
                if na == 0.0 || nb == 0.0 {
                    1.0
                } else {
                    1.0 - dot / (na * nb)
                }
            }
        }
    }
}

/// Per-class mean foundation-feature vectors. Classes that had no labeled
/// pixels are flagged invalid (count 0), never silently zero.
#[derive(Debug, Clone)]
pub struct ClassCentroids {
    /// (L, D) means; rows of invalid classes are zero and must not be used.
    pub centroids: Array2<f64>,
    pub counts: Vec<u64>,
    pub metric: DistanceMetric,
}

impl ClassCentroids {
    pub fn class_count(&self) -> usize {
        self.counts.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.centroids.ncols()
    }

    pub fn is_valid(&self, class: usize) -> bool {
        self.counts[class] > 0
    }

    pub fn valid_classes(&self) -> Vec<usize> {
        (0..self.counts.len()).filter(|&c| self.is_valid(c)).collect()
    }
}

/// Mean feature per class over the labeled pixels of the given views.
/// Features are looked up at pixel centres via bilinear interpolation.
pub fn compute_centroids(
    views: &[(&FeatureMap, &GrayImage)],
    class_count: usize,
    metric: DistanceMetric,
) -> Result<ClassCentroids> {
    if views.is_empty() {
        return Err(Error::InvalidArgument(
            "compute_centroids: no labeled views".into(),
        ));
    }
    let d = views[0].0.feature_dim();
    let mut sums = Array2::<f64>::zeros((class_count, d));
    let mut counts = vec![0u64; class_count];
    for (fmap, labels) in views {
        if fmap.feature_dim() != d {
            return Err(Error::FeatureDimMismatch {
                expected: d,
                got: fmap.feature_dim(),
            });
        }
        if (labels.width(), labels.height()) != (fmap.source_width, fmap.source_height) {
            return Err(Error::ShapeMismatch(format!(
                "label map {}x{} vs feature source {}x{}",
                labels.width(),
                labels.height(),
                fmap.source_width,
                fmap.source_height
            )));
        }
        for (x, y, p) in labels.enumerate_pixels() {
            let label = p.0[0];
            if label == IGNORE_LABEL {
                continue;
            }
            let class = label as usize;
            if class >= class_count {
                return Err(Error::LabelOutOfRange {
                    view: "<centroid input>".into(),
                    value: label,
                    class_count,
                });
            }
            let f = fmap.lookup(x as f64 + 0.5, y as f64 + 0.5)?;
            for (c, v) in f.iter().enumerate() {
                sums[[class, c]] += v;
            }
            counts[class] += 1;
        }
    }
    if counts.iter().all(|&c| c == 0) {
        return Err(Error::InvalidArgument(
            "compute_centroids: no labeled pixels in any view".into(),
        ));
    }
    for (class, &count) in counts.iter().enumerate() {
        if count > 0 {
            let inv = 1.0 / count as f64;
            sums.row_mut(class).mapv_inplace(|v| v * inv);
        } else {
            log::warn!("class {class} has no labeled pixels; centroid marked invalid");
        }
    }
    Ok(ClassCentroids {
        centroids: sums,
        counts,
        metric,
    })
}

/// Minimum-distance pseudo-labels for every pixel of one view.
#[derive(Debug, Clone)]
pub struct PseudoLabelMap {
    pub labels: GrayImage,
    /// Distance gap between the best and second-best centroid per pixel;
    /// zero when only one class is valid.
    pub margins: Array2<f64>,
    pub view_id: usize,
}

/// Assign each pixel the valid class with the nearest centroid. Ties break
/// toward the lowest class index.
pub fn assign_pseudo_labels(
    fmap: &FeatureMap,
    centroids: &ClassCentroids,
    view_id: usize,
) -> Result<PseudoLabelMap> {
    let valid = centroids.valid_classes();
    if valid.is_empty() {
        return Err(Error::NoValidCentroids);
    }
    if centroids.feature_dim() != fmap.feature_dim() {
        return Err(Error::FeatureDimMismatch {
            expected: centroids.feature_dim(),
            got: fmap.feature_dim(),
        });
    }
    let (w, h) = (fmap.source_width, fmap.source_height);
    let mut labels = GrayImage::new(w, h);
    let mut margins = Array2::zeros((h as usize, w as usize));
    for y in 0..h {
        for x in 0..w {
            let f = fmap.lookup(x as f64 + 0.5, y as f64 + 0.5)?;
            let mut best = (usize::MAX, f64::INFINITY);
            let mut second = f64::INFINITY;
            for &class in &valid {
                let d = centroids.metric.distance(
                    &f,
                    centroids.centroids.row(class).as_slice().expect("row"),
                );
                if d < best.1 {
                    second = best.1;
                    best = (class, d);
                } else if d < second {
                    second = d;
                }
            }
            labels.put_pixel(x, y, image::Luma([best.0 as u8]));
            margins[[y as usize, x as usize]] = if second.is_finite() {
                second - best.1
            } else {
                0.0
            };
        }
    }
    Ok(PseudoLabelMap {
        labels,
        margins,
        view_id,
    })
}

// ---------------------------------------------------------------------------
// On-disk layout: labels_pseudo/NNN.png + margins/NNN.npy + centroids.json
// ---------------------------------------------------------------------------

/// Minimal NPY v1.0 writer (little-endian f32, C order).
pub fn write_npy_f32(path: &Path, rows: usize, cols: usize, data: &[f32]) -> Result<()> {
    assert_eq!(data.len(), rows * cols);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut header = format!("{{'descr': '<f4', 'fortran_order': False, 'shape': ({rows}, {cols}), }}");
    let unpadded = 10 + header.len() + 1;
    let pad = (64 - unpadded % 64) % 64;
    header.push_str(&" ".repeat(pad));
    header.push('\n');
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(b"\x93NUMPY\x01\x00").map_err(|e| Error::io(path, e))?;
    file.write_all(&(header.len() as u16).to_le_bytes())
        .map_err(|e| Error::io(path, e))?;
    file.write_all(header.as_bytes()).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::with_capacity(data.len() * 4);
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    file.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct CentroidsFile {
    metric: DistanceMetric,
    counts: Vec<u64>,
    feature_dim: usize,
    centroids: Vec<Vec<f64>>,
}

pub fn save_centroids(path: &Path, centroids: &ClassCentroids) -> Result<()> {
    let file = CentroidsFile {
        metric: centroids.metric,
        counts: centroids.counts.clone(),
        feature_dim: centroids.feature_dim(),
        centroids: centroids
            .centroids
            .rows()
            .into_iter()
            .map(|r| r.to_vec())
            .collect(),
    };
    let text = serde_json::to_string_pretty(&file).expect("serialize");
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_centroids(path: &Path) -> Result<ClassCentroids> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: CentroidsFile = serde_json::from_str(&text).map_err(|e| Error::Parse {
        what: "centroids.json",
        path: path.into(),
        detail: e.to_string(),
    })?;
    let l = file.counts.len();
    let mut centroids = Array2::zeros((l, file.feature_dim));
    for (i, row) in file.centroids.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            centroids[[i, j]] = *v;
        }
    }
    Ok(ClassCentroids {
        centroids,
        counts: file.counts,
        metric: file.metric,
    })
}

/// Write one view's pseudo-label map under the scene directory.
pub fn save_pseudo_map(scene_dir: &Path, view_name: &str, map: &PseudoLabelMap) -> Result<()> {
    let label_dir = scene_dir.join("labels_pseudo");
    fs::create_dir_all(&label_dir).map_err(|e| Error::io(&label_dir, e))?;
    let label_path = label_dir.join(format!("{view_name}.png"));
    map.labels
        .save(&label_path)
        .map_err(|e| Error::image(&label_path, e))?;
    let (h, w) = map.margins.dim();
    let data: Vec<f32> = map.margins.iter().map(|&v| v as f32).collect();
    write_npy_f32(
        &scene_dir.join("margins").join(format!("{view_name}.npy")),
        h,
        w,
        &data,
    )
}

pub fn pseudo_label_path(scene_dir: &Path, view_name: &str) -> std::path::PathBuf {
    scene_dir.join("labels_pseudo").join(format!("{view_name}.png"))
}

pub fn load_pseudo_labels(scene_dir: &Path, view_name: &str) -> Result<GrayImage> {
    let path = pseudo_label_path(scene_dir, view_name);
    if !path.exists() {
        return Err(Error::MissingPseudoLabels {
            view: view_name.to_string(),
        });
    }
    Ok(image::open(&path).map_err(|e| Error::image(&path, e))?.to_luma8())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{FeatureBackend, FeatureMap, StubBackend};
    use image::{Luma, Rgb, RgbImage};
    use ndarray::Array3;

    /// Feature map whose grid equals the image resolution, one value per
    /// pixel, so lookups at pixel centres return exact cell values.
    fn dense_map(values: &Array2<f64>, d: usize) -> FeatureMap {
        let (h, w) = values.dim();
        let grid = Array3::from_shape_fn((h, w, d), |(y, x, c)| {
            (values[[y, x]] + c as f64 * 10.0) as f32
        });
        FeatureMap::new(grid, w as u32, h as u32, "test")
    }

    fn labels_from(rows: &[&[u8]]) -> GrayImage {
        let h = rows.len() as u32;
        let w = rows[0].len() as u32;
        GrayImage::from_fn(w, h, |x, y| Luma([rows[y as usize][x as usize]]))
    }

    #[test]
    fn single_pixel_per_class_copies_the_feature() {
        let values = ndarray::arr2(&[[1.0, 5.0]]);
        let fmap = dense_map(&values, 3);
        let labels = labels_from(&[&[0, 1]]);
        let cents = compute_centroids(&[(&fmap, &labels)], 2, DistanceMetric::Euclidean).unwrap();
        let f0 = fmap.lookup(0.5, 0.5).unwrap();
        let f1 = fmap.lookup(1.5, 0.5).unwrap();
        for c in 0..3 {
            assert!((cents.centroids[[0, c]] - f0[c]).abs() < 1e-12);
            assert!((cents.centroids[[1, c]] - f1[c]).abs() < 1e-12);
        }
        assert_eq!(cents.counts, vec![1, 1]);
    }

    #[test]
    fn two_pixels_average() {
        let values = ndarray::arr2(&[[2.0, 6.0]]);
        let fmap = dense_map(&values, 2);
        let labels = labels_from(&[&[0, 0]]);
        let cents = compute_centroids(&[(&fmap, &labels)], 1, DistanceMetric::Euclidean).unwrap();
        assert!((cents.centroids[[0, 0]] - 4.0).abs() < 1e-12);
        assert_eq!(cents.counts[0], 2);
    }

    #[test]
    fn centroids_match_brute_force_on_random_pixels() {
        use rand::Rng;
        use rand_chacha::rand_core::SeedableRng;
        use rand_chacha::ChaCha8Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let img = RgbImage::from_fn(48, 48, |x, y| {
            Rgb([
                ((x * 5 + y) % 256) as u8,
                ((x + y * 7) % 256) as u8,
                ((x * y) % 256) as u8,
            ])
        });
        let fmap = StubBackend.extract(&img).unwrap();
        let mut labels = GrayImage::from_pixel(48, 48, Luma([IGNORE_LABEL]));
        let mut picks: Vec<(u32, u32, u8)> = Vec::new();
        for _ in 0..50 {
            let x = rng.random_range(0..48u32);
            let y = rng.random_range(0..48u32);
            let class = rng.random_range(0..3u8);
            labels.put_pixel(x, y, Luma([class]));
        }
        for (x, y, p) in labels.enumerate_pixels() {
            if p.0[0] != IGNORE_LABEL {
                picks.push((x, y, p.0[0]));
            }
        }

        let cents = compute_centroids(&[(&fmap, &labels)], 3, DistanceMetric::Euclidean).unwrap();

        // brute-force accumulation oracle
        let d = fmap.feature_dim();
        let mut sums = vec![vec![0.0f64; d]; 3];
        let mut counts = [0u64; 3];
        for &(x, y, class) in &picks {
            let f = fmap.lookup(x as f64 + 0.5, y as f64 + 0.5).unwrap();
            for (c, v) in f.iter().enumerate() {
                sums[class as usize][c] += v;
            }
            counts[class as usize] += 1;
        }
        for class in 0..3 {
            assert_eq!(cents.counts[class], counts[class]);
            if counts[class] > 0 {
                for c in 0..d {
                    let expected = sums[class][c] / counts[class] as f64;
                    assert!(
                        (cents.centroids[[class, c]] - expected).abs() < 1e-6,
                        "class {class} dim {c}"
                    );
                }
            }
        }
    }

    #[test]
    fn view_order_does_not_change_centroids() {
        let va = ndarray::arr2(&[[1.0, 2.0], [3.0, 4.0]]);
        let vb = ndarray::arr2(&[[5.0, 6.0], [7.0, 8.0]]);
        let fa = dense_map(&va, 4);
        let fb = dense_map(&vb, 4);
        let la = labels_from(&[&[0, 1], &[1, 0]]);
        let lb = labels_from(&[&[1, 0], &[0, 1]]);
        let c1 = compute_centroids(&[(&fa, &la), (&fb, &lb)], 2, DistanceMetric::Euclidean).unwrap();
        let c2 = compute_centroids(&[(&fb, &lb), (&fa, &la)], 2, DistanceMetric::Euclidean).unwrap();
        for i in 0..2 {
            for j in 0..4 {
                assert!((c1.centroids[[i, j]] - c2.centroids[[i, j]]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn empty_class_is_flagged_not_fatal() {
        let values = ndarray::arr2(&[[1.0, 5.0]]);
        let fmap = dense_map(&values, 2);
        let labels = labels_from(&[&[0, 0]]);
        let cents = compute_centroids(&[(&fmap, &labels)], 3, DistanceMetric::Euclidean).unwrap();
        assert!(cents.is_valid(0));
        assert!(!cents.is_valid(1));
        assert!(!cents.is_valid(2));
        assert_eq!(cents.valid_classes(), vec![0]);
    }

    #[test]
    fn assignment_picks_nearest_centroid_with_margin() {
        let values = ndarray::arr2(&[[0.0, 10.0]]);
        let fmap = dense_map(&values, 2);
        let labels = labels_from(&[&[0, 1]]);
        let cents = compute_centroids(&[(&fmap, &labels)], 2, DistanceMetric::Euclidean).unwrap();
        let assigned = assign_pseudo_labels(&fmap, &cents, 3).unwrap();
        assert_eq!(assigned.labels.get_pixel(0, 0).0[0], 0);
        assert_eq!(assigned.labels.get_pixel(1, 0).0[0], 1);
        assert_eq!(assigned.view_id, 3);
        // pixel feature equals centroid 0: margin is the distance to the runner-up
        let f = fmap.lookup(0.5, 0.5).unwrap();
        let d1 = cents
            .metric
            .distance(&f, cents.centroids.row(1).as_slice().unwrap());
        assert!((assigned.margins[[0, 0]] - d1).abs() < 1e-9);
    }

    #[test]
    fn single_valid_class_labels_everything_with_zero_margin() {
        let values = ndarray::arr2(&[[0.0, 10.0]]);
        let fmap = dense_map(&values, 2);
        let labels = labels_from(&[&[0, 0]]);
        let cents = compute_centroids(&[(&fmap, &labels)], 2, DistanceMetric::Euclidean).unwrap();
        let assigned = assign_pseudo_labels(&fmap, &cents, 0).unwrap();
        assert!(assigned.labels.pixels().all(|p| p.0[0] == 0));
        assert!(assigned.margins.iter().all(|&m| m == 0.0));
    }

    #[test]
    fn four_pixel_two_centroid_case_matches_distance_table() {
        // features: 0, 3, 7, 10; centroids at 1 (class 0) and 9 (class 1)
        let values = ndarray::arr2(&[[0.0, 3.0, 7.0, 10.0]]);
        let fmap = dense_map(&values, 1);
        let mut cents = ClassCentroids {
            centroids: ndarray::arr2(&[[1.0], [9.0]]),
            counts: vec![1, 1],
            metric: DistanceMetric::Euclidean,
        };
        let assigned = assign_pseudo_labels(&fmap, &cents, 0).unwrap();
        // |0-1|=1 vs |0-9|=9 -> 0; |3-1|=2 vs 6 -> 0; |7-1|=6 vs 2 -> 1; 9 vs 1 -> 1
        let expect = [0u8, 0, 1, 1];
        for (x, &e) in expect.iter().enumerate() {
            assert_eq!(assigned.labels.get_pixel(x as u32, 0).0[0], e);
        }
        // cosine metric on 1-d positive features is degenerate (all zero
        // distance): every pixel ties and resolves to class 0
        cents.metric = DistanceMetric::Cosine;
        let assigned = assign_pseudo_labels(&fmap, &cents, 0).unwrap();
        assert!(assigned.labels.pixels().all(|p| p.0[0] == 0));
    }

    #[test]
    fn equidistant_tie_breaks_to_lowest_class() {
        let values = ndarray::arr2(&[[5.0]]);
        let fmap = dense_map(&values, 1);
        let cents = ClassCentroids {
            centroids: ndarray::arr2(&[[3.0], [7.0], [3.0]]),
            counts: vec![1, 1, 1],
            metric: DistanceMetric::Euclidean,
        };
        let assigned = assign_pseudo_labels(&fmap, &cents, 0).unwrap();
        assert_eq!(assigned.labels.get_pixel(0, 0).0[0], 0);
        // margin to the runner-up (the equidistant class 2) is zero
        assert!(assigned.margins[[0, 0]].abs() < 1e-12);
    }

    #[test]
    fn uniform_feature_scaling_preserves_euclidean_assignment() {
        use rand::Rng;
        use rand_chacha::rand_core::SeedableRng;
        use rand_chacha::ChaCha8Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let values = Array2::from_shape_fn((4, 6), |_| rng.random_range(-2.0..2.0));
        let fmap = dense_map(&values, 3);
        let cents = ClassCentroids {
            centroids: Array2::from_shape_fn((3, 3), |_| rng.random_range(-2.0..2.0)),
            counts: vec![4, 2, 9],
            metric: DistanceMetric::Euclidean,
        };
        let base = assign_pseudo_labels(&fmap, &cents, 0).unwrap();

        let scale = 3.7f64;
        let scaled_map = FeatureMap::new(fmap.grid.mapv(|v| v * scale as f32), 6, 4, "test");
        let scaled_cents = ClassCentroids {
            centroids: cents.centroids.mapv(|v| v * scale),
            counts: cents.counts.clone(),
            metric: DistanceMetric::Euclidean,
        };
        let scaled = assign_pseudo_labels(&scaled_map, &scaled_cents, 0).unwrap();
        assert_eq!(base.labels.as_raw(), scaled.labels.as_raw());
    }

    #[test]
    fn no_valid_classes_is_an_error() {
        let values = ndarray::arr2(&[[0.0]]);
        let fmap = dense_map(&values, 1);
        let cents = ClassCentroids {
            centroids: ndarray::arr2(&[[0.0]]),
            counts: vec![0],
            metric: DistanceMetric::Euclidean,
        };
        assert!(matches!(
            assign_pseudo_labels(&fmap, &cents, 0),
            Err(Error::NoValidCentroids)
        ));
    }

    #[test]
    fn pseudo_map_round_trips_through_scene_dir() {
        let dir = tempfile::tempdir().unwrap();
        let values = ndarray::arr2(&[[0.0, 10.0], [10.0, 0.0]]);
        let fmap = dense_map(&values, 2);
        let cents = ClassCentroids {
            centroids: ndarray::arr2(&[[0.0, 10.0], [10.0, 20.0]]),
            counts: vec![1, 1],
            metric: DistanceMetric::Euclidean,
        };
        let map = assign_pseudo_labels(&fmap, &cents, 0).unwrap();
        save_pseudo_map(dir.path(), "007", &map).unwrap();
        let loaded = load_pseudo_labels(dir.path(), "007").unwrap();
        assert_eq!(loaded.as_raw(), map.labels.as_raw());
        assert!(dir.path().join("margins/007.npy").exists());
        assert!(matches!(
            load_pseudo_labels(dir.path(), "008"),
            Err(Error::MissingPseudoLabels { .. })
        ));

        save_centroids(&dir.path().join("centroids.json"), &cents).unwrap();
        let loaded = load_centroids(&dir.path().join("centroids.json")).unwrap();
        assert_eq!(loaded.counts, cents.counts);
        assert_eq!(loaded.metric, cents.metric);
        assert_eq!(loaded.centroids, cents.centroids);
    }

    #[test]
    fn npy_header_is_well_formed() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.npy");
        write_npy_f32(&path, 2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(&bytes[..6], b"\x93NUMPY");
        let header_len = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
        assert_eq!((10 + header_len) % 64, 0);
        let header = std::str::from_utf8(&bytes[10..10 + header_len]).unwrap();
        assert!(header.contains("'<f4'"));
        assert!(header.contains("(2, 3)"));
        assert_eq!(bytes.len(), 10 + header_len + 6 * 4);
    }
}
