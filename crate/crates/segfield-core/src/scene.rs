//! Posed multi-view scenes with sparse labels: directory IO, pinhole ray
//! generation and split-filtered random ray batches.
//!
//! Scene directory layout:
//! - `images/NNN.png` 8-bit RGB
//! - `labels/NNN.png` 8-bit single channel class indices, 255 = ignore
//!   (only for views that actually carry labels)
//! - `poses.json` per-view intrinsics and 4x4 row-major camera-to-world
//! - `split.json` view name -> split tag
//! - `meta.json` class count/names and the ray near/far bounds
//!
//! Camera convention: right-handed, camera looks down -z in camera frame,
//! image x right, image y down.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use image::{GrayImage, RgbImage};
use nalgebra::{Matrix3, Matrix4, Point3, Vector3};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Label value that marks pixels excluded from supervision and scoring.
pub const IGNORE_LABEL: u8 = 255;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitTag {
    TrainLabeled,
    TrainUnlabeled,
    Test,
}

pub const ALL_TAGS: [SplitTag; 3] = [
    SplitTag::TrainLabeled,
    SplitTag::TrainUnlabeled,
    SplitTag::Test,
];

#[derive(Debug, Clone)]
pub struct CameraModel {
    pub width: u32,
    pub height: u32,
    /// Focal length in pixels (square pixels).
    pub focal: f64,
    pub principal_point: (f64, f64),
    /// Camera-to-world rigid transform.
    pub pose: Matrix4<f64>,
}

impl CameraModel {
    /// Build a camera at `eye` looking at `target`.
    pub fn look_at(
        eye: Point3<f64>,
        target: Point3<f64>,
        up: Vector3<f64>,
        width: u32,
        height: u32,
        focal: f64,
    ) -> Result<Self> {
        let backward = (eye - target)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::InvalidCamera("eye equals look-at target".into()))?;
        let right = up
            .cross(&backward)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::InvalidCamera("up is parallel to view direction".into()))?;
        let true_up = backward.cross(&right);
        let mut pose = Matrix4::identity();
        pose.fixed_view_mut::<3, 1>(0, 0).copy_from(&right);
        pose.fixed_view_mut::<3, 1>(0, 1).copy_from(&true_up);
        pose.fixed_view_mut::<3, 1>(0, 2).copy_from(&backward);
        pose.fixed_view_mut::<3, 1>(0, 3).copy_from(&eye.coords);
        let cam = Self {
            width,
            height,
            focal,
            principal_point: (width as f64 / 2.0, height as f64 / 2.0),
            pose,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.pose.fixed_view::<3, 3>(0, 0).into_owned()
    }

    /// Camera centre in world coordinates.
    pub fn centre(&self) -> Point3<f64> {
        Point3::from(self.pose.fixed_view::<3, 1>(0, 3).into_owned())
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.rotation();
        let dev = (r.transpose() * r - Matrix3::identity()).norm();
        if dev >= 1e-5 {
            return Err(Error::InvalidCamera(format!(
                "rotation block not orthonormal (deviation {dev:.2e})"
            )));
        }
        if !(self.focal > 0.0) {
            return Err(Error::InvalidCamera(format!("focal {} <= 0", self.focal)));
        }
        let (px, py) = self.principal_point;
        if !(0.0..self.width as f64).contains(&px) || !(0.0..self.height as f64).contains(&py) {
            return Err(Error::InvalidCamera(format!(
                "principal point ({px}, {py}) outside {}x{}",
                self.width, self.height
            )));
        }
        Ok(())
    }

    fn contains_pixel(&self, x: f64, y: f64) -> bool {
        (0.0..self.width as f64).contains(&x) && (0.0..self.height as f64).contains(&y)
    }

    /// Back-project a continuous pixel coordinate into a world-space unit
    /// direction through the pinhole.
    pub fn pixel_direction(&self, x: f64, y: f64) -> Vector3<f64> {
        let (px, py) = self.principal_point;
        let dir_cam = Vector3::new((x - px) / self.focal, -(y - py) / self.focal, -1.0);
        (self.rotation() * dir_cam).normalize()
    }

    /// Project a world point; `None` when the point is not in front of the
    /// camera.
    pub fn project(&self, p: &Point3<f64>) -> Option<(f64, f64)> {
        let cam = self.rotation().transpose() * (p - self.centre());
        if cam.z >= -1e-12 {
            return None;
        }
        let (px, py) = self.principal_point;
        Some((
            px + self.focal * (cam.x / -cam.z),
            py - self.focal * (cam.y / -cam.z),
        ))
    }
}

#[derive(Debug, Clone)]
pub struct Ray {
    pub origin: Point3<f64>,
    /// Unit direction.
    pub direction: Vector3<f64>,
    pub near: f64,
    pub far: f64,
    /// Continuous image coordinates the ray passes through.
    pub pixel: (f64, f64),
    pub view_id: usize,
}

#[derive(Debug, Clone)]
pub struct View {
    pub name: String,
    pub image: RgbImage,
    pub camera: CameraModel,
    pub label_map: Option<GrayImage>,
    pub split: SplitTag,
}

impl View {
    /// Pixel colour in [0,1].
    pub fn rgb_at(&self, x: u32, y: u32) -> [f64; 3] {
        let p = self.image.get_pixel(x, y);
        [
            p.0[0] as f64 / 255.0,
            p.0[1] as f64 / 255.0,
            p.0[2] as f64 / 255.0,
        ]
    }

    pub fn label_at(&self, x: u32, y: u32) -> Option<u8> {
        self.label_map.as_ref().map(|m| m.get_pixel(x, y).0[0])
    }
}

#[derive(Debug, Clone)]
pub struct Scene {
    pub views: Vec<View>,
    pub class_count: usize,
    pub class_names: Vec<String>,
    pub near: f64,
    pub far: f64,
}

impl Scene {
    pub fn view_ids_with_tags(&self, tags: &[SplitTag]) -> Vec<usize> {
        self.views
            .iter()
            .enumerate()
            .filter(|(_, v)| tags.contains(&v.split))
            .map(|(i, _)| i)
            .collect()
    }

    /// Ray from a view's camera centre through a continuous pixel coordinate.
    pub fn ray_through(&self, view_id: usize, x: f64, y: f64) -> Result<Ray> {
        let cam = &self.views[view_id].camera;
        if !cam.contains_pixel(x, y) {
            return Err(Error::PixelOutOfBounds {
                x,
                y,
                width: cam.width,
                height: cam.height,
            });
        }
        Ok(Ray {
            origin: cam.centre(),
            direction: cam.pixel_direction(x, y),
            near: self.near,
            far: self.far,
            pixel: (x, y),
            view_id,
        })
    }

    pub fn validate(&self) -> Result<()> {
        for v in &self.views {
            v.camera.validate()?;
            if v.image.width() != v.camera.width || v.image.height() != v.camera.height {
                return Err(Error::InvalidScene(format!(
                    "view {}: image is {}x{} but camera says {}x{}",
                    v.name,
                    v.image.width(),
                    v.image.height(),
                    v.camera.width,
                    v.camera.height
                )));
            }
            if let Some(m) = &v.label_map {
                if m.dimensions() != v.image.dimensions() {
                    return Err(Error::LabelSizeMismatch {
                        view: v.name.clone(),
                        label_w: m.width(),
                        label_h: m.height(),
                        image_w: v.image.width(),
                        image_h: v.image.height(),
                    });
                }
                if let Some(bad) = m
                    .pixels()
                    .map(|p| p.0[0])
                    .find(|&l| l != IGNORE_LABEL && l as usize >= self.class_count)
                {
                    return Err(Error::LabelOutOfRange {
                        view: v.name.clone(),
                        value: bad,
                        class_count: self.class_count,
                    });
                }
            }
        }
        if !(self.near >= 0.0 && self.near < self.far) {
            return Err(Error::InvalidScene(format!(
                "near/far bounds invalid: {} / {}",
                self.near, self.far
            )));
        }
        Ok(())
    }
}

/// Back-project a list of pixels through one camera.
pub fn generate_rays(
    camera: &CameraModel,
    pixels: &[(f64, f64)],
    near: f64,
    far: f64,
    view_id: usize,
) -> Result<Vec<Ray>> {
    let origin = camera.centre();
    pixels
        .iter()
        .map(|&(x, y)| {
            if !camera.contains_pixel(x, y) {
                return Err(Error::PixelOutOfBounds {
                    x,
                    y,
                    width: camera.width,
                    height: camera.height,
                });
            }
            Ok(Ray {
                origin,
                direction: camera.pixel_direction(x, y),
                near,
                far,
                pixel: (x, y),
                view_id,
            })
        })
        .collect()
}

/// Uniformly random (view, pixel) rays from the views matching `pool`.
/// Deterministic for a given seed. Rays pass through pixel centres.
pub fn sample_ray_batch(
    scene: &Scene,
    count: usize,
    pool: &[SplitTag],
    seed: u64,
) -> Result<Vec<Ray>> {
    let views = scene.view_ids_with_tags(pool);
    if views.is_empty() {
        return Err(Error::EmptyRayPool {
            pool: format!("{pool:?}"),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rays = Vec::with_capacity(count);
    for _ in 0..count {
        let vid = views[rng.random_range(0..views.len())];
        let cam = &scene.views[vid].camera;
        let x = rng.random_range(0..cam.width);
        let y = rng.random_range(0..cam.height);
        rays.push(scene.ray_through(vid, x as f64 + 0.5, y as f64 + 0.5)?);
    }
    Ok(rays)
}

// ---------------------------------------------------------------------------
// Directory IO
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct PoseEntry {
    name: String,
    width: u32,
    height: u32,
    focal: f64,
    principal_point: [f64; 2],
    /// Row-major camera-to-world.
    camera_to_world: [[f64; 4]; 4],
}

#[derive(Serialize, Deserialize)]
struct PosesFile {
    views: Vec<PoseEntry>,
}

#[derive(Serialize, Deserialize)]
struct MetaFile {
    class_count: usize,
    class_names: Vec<String>,
    near: f64,
    far: f64,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path, what: &'static str) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        what,
        path: path.to_path_buf(),
        detail: e.to_string(),
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serialize");
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn pose_to_matrix(rows: &[[f64; 4]; 4]) -> Matrix4<f64> {
    Matrix4::from_fn(|r, c| rows[r][c])
}

fn matrix_to_pose(m: &Matrix4<f64>) -> [[f64; 4]; 4] {
    let mut rows = [[0.0; 4]; 4];
    for (r, row) in rows.iter_mut().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            *v = m[(r, c)];
        }
    }
    rows
}

pub fn load_scene(dir: &Path) -> Result<Scene> {
    let meta: MetaFile = read_json(&dir.join("meta.json"), "meta.json")?;
    let poses: PosesFile = read_json(&dir.join("poses.json"), "poses.json")?;
    let split: BTreeMap<String, SplitTag> = read_json(&dir.join("split.json"), "split.json")?;
    let pose_by_name: BTreeMap<&str, &PoseEntry> =
        poses.views.iter().map(|p| (p.name.as_str(), p)).collect();

    let images_dir = dir.join("images");
    let mut names: Vec<String> = fs::read_dir(&images_dir)
        .map_err(|e| Error::io(&images_dir, e))?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().to_string_lossy().into_owned();
            name.strip_suffix(".png").map(|s| s.to_string())
        })
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(Error::InvalidScene(format!(
            "no images under {}",
            images_dir.display()
        )));
    }

    let mut views = Vec::with_capacity(names.len());
    for name in names {
        let pose = *pose_by_name
            .get(name.as_str())
            .ok_or_else(|| Error::MissingPose { view: name.clone() })?;
        let img_path = images_dir.join(format!("{name}.png"));
        let image = image::open(&img_path)
            .map_err(|e| Error::image(&img_path, e))?
            .to_rgb8();
        let camera = CameraModel {
            width: pose.width,
            height: pose.height,
            focal: pose.focal,
            principal_point: (pose.principal_point[0], pose.principal_point[1]),
            pose: pose_to_matrix(&pose.camera_to_world),
        };
        let label_path = dir.join("labels").join(format!("{name}.png"));
        let label_map = if label_path.exists() {
            Some(
                image::open(&label_path)
                    .map_err(|e| Error::image(&label_path, e))?
                    .to_luma8(),
            )
        } else {
            None
        };
        let split_tag = *split.get(&name).ok_or_else(|| Error::Parse {
            what: "split.json",
            path: dir.join("split.json"),
            detail: format!("no split tag for view {name}"),
        })?;
        views.push(View {
            name,
            image,
            camera,
            label_map,
            split: split_tag,
        });
    }

    let scene = Scene {
        views,
        class_count: meta.class_count,
        class_names: meta.class_names,
        near: meta.near,
        far: meta.far,
    };
    scene.validate()?;
    Ok(scene)
}

pub fn save_scene(scene: &Scene, dir: &Path) -> Result<()> {
    scene.validate()?;
    fs::create_dir_all(dir.join("images")).map_err(|e| Error::io(dir, e))?;
    let any_labels = scene.views.iter().any(|v| v.label_map.is_some());
    if any_labels {
        fs::create_dir_all(dir.join("labels")).map_err(|e| Error::io(dir, e))?;
    }

    let mut pose_entries = Vec::new();
    let mut split = BTreeMap::new();
    for v in &scene.views {
        let img_path = dir.join("images").join(format!("{}.png", v.name));
        v.image
            .save(&img_path)
            .map_err(|e| Error::image(&img_path, e))?;
        if let Some(m) = &v.label_map {
            let lbl_path = dir.join("labels").join(format!("{}.png", v.name));
            m.save(&lbl_path).map_err(|e| Error::image(&lbl_path, e))?;
        }
        pose_entries.push(PoseEntry {
            name: v.name.clone(),
            width: v.camera.width,
            height: v.camera.height,
            focal: v.camera.focal,
            principal_point: [v.camera.principal_point.0, v.camera.principal_point.1],
            camera_to_world: matrix_to_pose(&v.camera.pose),
        });
        split.insert(v.name.clone(), v.split);
    }

    write_json(&dir.join("poses.json"), &PosesFile { views: pose_entries })?;
    write_json(&dir.join("split.json"), &split)?;
    write_json(
        &dir.join("meta.json"),
        &MetaFile {
            class_count: scene.class_count,
            class_names: scene.class_names.clone(),
            near: scene.near,
            far: scene.far,
        },
    )?;
    Ok(())
}
