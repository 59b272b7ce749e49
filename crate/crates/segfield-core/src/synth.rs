//! Procedural toy scenes: textured-free geometric primitives on a ground
//! plane, rendered by exact ray casting with flat albedo so the colour
//! supervision is exactly representable by the field. Every view gets a dense
//! ground-truth label map (pixels whose ray hits nothing are marked ignore).

use image::{GrayImage, Luma, Rgb, RgbImage};
use nalgebra::{Point3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{CameraModel, Scene, SplitTag, View, IGNORE_LABEL};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrimitiveShape {
    Sphere,
    Box,
    Plane,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub shape: PrimitiveShape,
    pub position: [f64; 3],
    /// Sphere: `size[0]` is the radius. Box: half-extents. Plane: a
    /// horizontal rectangle at `position.y` with half-extents
    /// `size[0]`/`size[2]` along x/z.
    pub size: [f64; 3],
    /// Flat RGB albedo in [0,1].
    pub albedo: [f64; 3],
    pub class: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraRing {
    pub radius: f64,
    pub height: f64,
    pub count: usize,
    pub look_at: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToySceneSpec {
    pub primitives: Vec<Primitive>,
    pub camera_ring: CameraRing,
    /// (width, height) in pixels.
    pub image_size: [u32; 2],
    pub focal: f64,
    pub near: f64,
    pub far: f64,
    /// Ring indices tagged train-labeled.
    pub labeled_views: Vec<usize>,
    /// Ring indices tagged train-unlabeled; every other view is a test view.
    #[serde(default)]
    pub unlabeled_views: Vec<usize>,
    pub rng_seed: u64,
}

impl ToySceneSpec {
    pub fn class_count(&self) -> usize {
        self.primitives
            .iter()
            .map(|p| p.class as usize + 1)
            .max()
            .unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.primitives.is_empty() {
            return Err(Error::InvalidArgument(
                "toy scene needs at least one primitive".into(),
            ));
        }
        let l = self.class_count();
        for c in 0..l {
            if !self.primitives.iter().any(|p| p.class as usize == c) {
                return Err(Error::InvalidArgument(format!(
                    "class indices must be contiguous from 0; class {c} is unused"
                )));
            }
        }
        if self.camera_ring.count == 0 {
            return Err(Error::InvalidArgument("camera ring count is 0".into()));
        }
        if !(self.near >= 0.0 && self.near < self.far) {
            return Err(Error::InvalidArgument(format!(
                "invalid near/far {}/{}",
                self.near, self.far
            )));
        }
        for &v in self.labeled_views.iter().chain(&self.unlabeled_views) {
            if v >= self.camera_ring.count {
                return Err(Error::InvalidArgument(format!(
                    "view index {v} outside ring of {}",
                    self.camera_ring.count
                )));
            }
        }
        if self
            .labeled_views
            .iter()
            .any(|v| self.unlabeled_views.contains(v))
        {
            return Err(Error::InvalidArgument(
                "labeled and unlabeled view sets overlap".into(),
            ));
        }
        Ok(())
    }

    pub fn ring_cameras(&self) -> Result<Vec<CameraModel>> {
        let look = Point3::from(self.camera_ring.look_at);
        (0..self.camera_ring.count)
            .map(|i| {
                let theta = 2.0 * std::f64::consts::PI * i as f64 / self.camera_ring.count as f64;
                let eye = Point3::new(
                    look.x + self.camera_ring.radius * theta.cos(),
                    self.camera_ring.height,
                    look.z + self.camera_ring.radius * theta.sin(),
                );
                CameraModel::look_at(
                    eye,
                    look,
                    Vector3::y(),
                    self.image_size[0],
                    self.image_size[1],
                    self.focal,
                )
            })
            .collect()
    }
}

/// Nearest intersection of a ray with one primitive, as a depth t > eps.
fn intersect(prim: &Primitive, origin: &Point3<f64>, dir: &Vector3<f64>) -> Option<f64> {
    const EPS: f64 = 1e-9;
    let c = Point3::from(prim.position);
    match prim.shape {
        PrimitiveShape::Sphere => {
            let r = prim.size[0];
            let oc = origin - c;
            let b = oc.dot(dir);
            let disc = b * b - (oc.dot(&oc) - r * r);
            if disc < 0.0 {
                return None;
            }
            let sq = disc.sqrt();
            let t0 = -b - sq;
            let t1 = -b + sq;
            if t0 > EPS {
                Some(t0)
            } else if t1 > EPS {
                Some(t1)
            } else {
                None
            }
        }
        PrimitiveShape::Box => {
            let mut tmin = f64::NEG_INFINITY;
            let mut tmax = f64::INFINITY;
            for a in 0..3 {
                let half = prim.size[a];
                let o = origin[a] - c[a];
                let d = dir[a];
                if d.abs() < 1e-15 {
                    if o.abs() > half {
                        return None;
                    }
                    continue;
                }
                let mut t0 = (-half - o) / d;
                let mut t1 = (half - o) / d;
                if t0 > t1 {
                    std::mem::swap(&mut t0, &mut t1);
                }
                tmin = tmin.max(t0);
                tmax = tmax.min(t1);
                if tmin > tmax {
                    return None;
                }
            }
            if tmin > EPS {
                Some(tmin)
            } else if tmax > EPS {
                Some(tmax)
            } else {
                None
            }
        }
        PrimitiveShape::Plane => {
            if dir.y.abs() < 1e-15 {
                return None;
            }
            let t = (c.y - origin.y) / dir.y;
            if t <= EPS {
                return None;
            }
            let hit = origin + dir * t;
            if (hit.x - c.x).abs() <= prim.size[0] && (hit.z - c.z).abs() <= prim.size[2] {
                Some(t)
            } else {
                None
            }
        }
    }
}

/// First primitive hit along a ray: (primitive index, depth).
pub fn cast_ray(
    spec: &ToySceneSpec,
    origin: &Point3<f64>,
    dir: &Vector3<f64>,
) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, prim) in spec.primitives.iter().enumerate() {
        if let Some(t) = intersect(prim, origin, dir) {
            if best.map_or(true, |(_, bt)| t < bt) {
                best = Some((i, t));
            }
        }
    }
    best
}

/// Exact point-in-primitive test; surfaces count as inside.
/// The geometry oracle for field-quality tests.
pub fn ground_truth_density(spec: &ToySceneSpec, point: &Point3<f64>) -> bool {
    spec.primitives.iter().any(|prim| {
        let c = Point3::from(prim.position);
        match prim.shape {
            PrimitiveShape::Sphere => (point - c).norm() <= prim.size[0],
            PrimitiveShape::Box => {
                (0..3).all(|a| (point[a] - c[a]).abs() <= prim.size[a])
            }
            PrimitiveShape::Plane => {
                (point.y - c.y).abs() <= 1e-9
                    && (point.x - c.x).abs() <= prim.size[0]
                    && (point.z - c.z).abs() <= prim.size[2]
            }
        }
    })
}

fn quantize(albedo: [f64; 3]) -> Rgb<u8> {
    Rgb([
        (albedo[0].clamp(0.0, 1.0) * 255.0).round() as u8,
        (albedo[1].clamp(0.0, 1.0) * 255.0).round() as u8,
        (albedo[2].clamp(0.0, 1.0) * 255.0).round() as u8,
    ])
}

/// Render the spec from every ring camera. One ray per pixel centre, no
/// anti-aliasing, flat albedo; label maps are dense with ignore on misses.
/// Train-unlabeled views carry no label map at all.
pub fn generate_toy_scene(spec: &ToySceneSpec) -> Result<Scene> {
    spec.validate()?;
    let cameras = spec.ring_cameras()?;
    let (w, h) = (spec.image_size[0], spec.image_size[1]);
    let mut views = Vec::with_capacity(cameras.len());
    for (vid, camera) in cameras.into_iter().enumerate() {
        let origin = camera.centre();
        let mut image = RgbImage::new(w, h);
        let mut labels = GrayImage::new(w, h);
        for y in 0..h {
            for x in 0..w {
                let dir = camera.pixel_direction(x as f64 + 0.5, y as f64 + 0.5);
                match cast_ray(spec, &origin, &dir) {
                    Some((pi, t)) => {
                        if t < spec.near || t > spec.far {
                            return Err(Error::InvalidArgument(format!(
                                "view {vid}: hit at depth {t:.3} outside [near, far] = [{}, {}]",
                                spec.near, spec.far
                            )));
                        }
                        let prim = &spec.primitives[pi];
                        image.put_pixel(x, y, quantize(prim.albedo));
                        labels.put_pixel(x, y, Luma([prim.class]));
                    }
                    None => {
                        image.put_pixel(x, y, Rgb([0, 0, 0]));
                        labels.put_pixel(x, y, Luma([IGNORE_LABEL]));
                    }
                }
            }
        }
        let split = if spec.labeled_views.contains(&vid) {
            SplitTag::TrainLabeled
        } else if spec.unlabeled_views.contains(&vid) {
            SplitTag::TrainUnlabeled
        } else {
            SplitTag::Test
        };
        views.push(View {
            name: format!("{vid:03}"),
            image,
            camera,
            label_map: (split != SplitTag::TrainUnlabeled).then_some(labels),
            split,
        });
    }
    let class_count = spec.class_count();
    let scene = Scene {
        views,
        class_count,
        class_names: (0..class_count).map(|c| format!("class_{c}")).collect(),
        near: spec.near,
        far: spec.far,
    };
    scene.validate()?;
    Ok(scene)
}
