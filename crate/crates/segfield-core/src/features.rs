//! Dense per-image foundation-feature maps behind a pluggable backend, with
//! a mandatory disk cache and continuous bilinear lookup.
//!
//! Two backends ship: `stub`, a deterministic per-patch colour-moment
//! extractor that runs anywhere, and `sam`, which ingests SAM ViT-B encoder
//! grids precomputed offline (see `scripts/export_sam_features.py`). Grid
//! cell (u, v) is centred at image coordinates
//! `((u + 0.5) * W / w_f, (v + 0.5) * H / h_f)`.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use image::RgbImage;
use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hash::{fnv1a64, splitmix64};

/// Environment variable overriding the feature cache directory.
pub const CACHE_DIR_ENV: &str = "SEGFIELD_FEATURE_CACHE";

pub const STUB_BACKEND_ID: &str = "stub-moments-v1";
pub const SAM_BACKEND_ID: &str = "sam-vit-b";
pub const SAM_FEATURE_DIM: usize = 256;

/// Side length of the square patch each stub grid cell summarizes.
pub const STUB_PATCH: u32 = 16;
pub const STUB_FEATURE_DIM: usize = 32;

#[derive(Debug, Clone)]
pub struct FeatureMap {
    /// (h_f, w_f, D) feature grid.
    pub grid: Array3<f32>,
    pub source_width: u32,
    pub source_height: u32,
    pub backend_id: String,
    pub checksum: u64,
}

impl FeatureMap {
    pub fn new(grid: Array3<f32>, source_width: u32, source_height: u32, backend_id: &str) -> Self {
        let checksum = grid_checksum(&grid);
        Self {
            grid,
            source_width,
            source_height,
            backend_id: backend_id.to_string(),
            checksum,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.grid.dim().2
    }

    /// Bilinear interpolation at continuous image coordinates, clamped to the
    /// grid's cell-centre lattice at the borders.
    pub fn lookup(&self, x: f64, y: f64) -> Result<Vec<f64>> {
        if !(0.0..self.source_width as f64).contains(&x)
            || !(0.0..self.source_height as f64).contains(&y)
        {
            return Err(Error::LookupOutOfBounds {
                x,
                y,
                width: self.source_width,
                height: self.source_height,
            });
        }
        let (h_f, w_f, d) = self.grid.dim();
        let gx = (x * w_f as f64 / self.source_width as f64 - 0.5).clamp(0.0, (w_f - 1) as f64);
        let gy = (y * h_f as f64 / self.source_height as f64 - 0.5).clamp(0.0, (h_f - 1) as f64);
        let x0 = gx.floor() as usize;
        let y0 = gy.floor() as usize;
        let x1 = (x0 + 1).min(w_f - 1);
        let y1 = (y0 + 1).min(h_f - 1);
        let tx = gx - x0 as f64;
        let ty = gy - y0 as f64;
        let mut out = vec![0.0; d];
        for (c, o) in out.iter_mut().enumerate() {
            let v00 = self.grid[[y0, x0, c]] as f64;
            let v01 = self.grid[[y0, x1, c]] as f64;
            let v10 = self.grid[[y1, x0, c]] as f64;
            let v11 = self.grid[[y1, x1, c]] as f64;
            *o = (1.0 - ty) * ((1.0 - tx) * v00 + tx * v01) + ty * ((1.0 - tx) * v10 + tx * v11);
        }
        Ok(out)
    }
}

fn grid_checksum(grid: &Array3<f32>) -> u64 {
    let mut bytes = Vec::with_capacity(grid.len() * 4);
    for v in grid.iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fnv1a64(&bytes)
}

/// Content hash of an image (dimensions + raw pixels); the cache key.
pub fn image_content_hash(image: &RgbImage) -> u64 {
    let mut bytes = Vec::with_capacity(image.as_raw().len() + 8);
    bytes.extend_from_slice(&image.width().to_le_bytes());
    bytes.extend_from_slice(&image.height().to_le_bytes());
    bytes.extend_from_slice(image.as_raw());
    fnv1a64(&bytes)
}

pub trait FeatureBackend {
    fn id(&self) -> &str;
    fn feature_dim(&self) -> usize;
    fn extract(&self, image: &RgbImage) -> Result<FeatureMap>;
}

/// Deterministic stand-in for a foundation encoder: each grid cell holds the
/// colour moments of its 16x16 patch (mean and variance per channel) plus a
/// hash-derived expansion of the quantized patch content. Cells depend only
/// on their own patch, so features are local and reproducible.
#[derive(Debug, Clone, Default)]
pub struct StubBackend;

impl FeatureBackend for StubBackend {
    fn id(&self) -> &str {
        STUB_BACKEND_ID
    }

    fn feature_dim(&self) -> usize {
        STUB_FEATURE_DIM
    }

    fn extract(&self, image: &RgbImage) -> Result<FeatureMap> {
        let (w, h) = image.dimensions();
        let w_f = w.div_ceil(STUB_PATCH) as usize;
        let h_f = h.div_ceil(STUB_PATCH) as usize;
        let mut grid = Array3::zeros((h_f, w_f, STUB_FEATURE_DIM));
        for v in 0..h_f {
            for u in 0..w_f {
                let x0 = u as u32 * STUB_PATCH;
                let y0 = v as u32 * STUB_PATCH;
                let x1 = (x0 + STUB_PATCH).min(w);
                let y1 = (y0 + STUB_PATCH).min(h);
                let count = ((x1 - x0) * (y1 - y0)) as f64;

                let mut mean = [0.0f64; 3];
                let mut sq = [0.0f64; 3];
                let mut quantized = Vec::with_capacity((count as usize) * 3);
                for y in y0..y1 {
                    for x in x0..x1 {
                        let p = image.get_pixel(x, y).0;
                        for c in 0..3 {
                            let val = p[c] as f64 / 255.0;
                            mean[c] += val;
                            sq[c] += val * val;
                            quantized.push(p[c] >> 3);
                        }
                    }
                }
                for c in 0..3 {
                    mean[c] /= count;
                    let var = (sq[c] / count - mean[c] * mean[c]).max(0.0);
                    grid[[v, u, c]] = mean[c] as f32;
                    grid[[v, u, 3 + c]] = var as f32;
                }
                // position-free texture hash: identical patches hash alike
                let mut state = fnv1a64(&quantized);
                for k in 6..STUB_FEATURE_DIM {
                    let r = splitmix64(&mut state);
                    grid[[v, u, k]] = 0.25 * (r as f64 / u64::MAX as f64) as f32;
                }
            }
        }
        Ok(FeatureMap::new(grid, w, h, STUB_BACKEND_ID))
    }
}

/// Real-encoder backend. SAM ViT-B inference is not run in-process; the
/// backend loads grids precomputed by the exporter script from
/// `precomputed_dir`. A missing grid yields the backend-unavailable error so
/// callers can fall back to the stub.
#[derive(Debug, Clone)]
pub struct SamBackend {
    pub precomputed_dir: PathBuf,
}

impl SamBackend {
    pub fn new(precomputed_dir: impl Into<PathBuf>) -> Self {
        Self {
            precomputed_dir: precomputed_dir.into(),
        }
    }

    pub fn expected_path(&self, image: &RgbImage) -> PathBuf {
        self.precomputed_dir
            .join(cache_file_name(SAM_BACKEND_ID, image_content_hash(image)))
    }
}

impl FeatureBackend for SamBackend {
    fn id(&self) -> &str {
        SAM_BACKEND_ID
    }

    fn feature_dim(&self) -> usize {
        SAM_FEATURE_DIM
    }

    fn extract(&self, image: &RgbImage) -> Result<FeatureMap> {
        let path = self.expected_path(image);
        if !path.exists() {
            return Err(Error::BackendUnavailable {
                backend: SAM_BACKEND_ID.into(),
                detail: format!(
                    "no precomputed encoder grid at {} (export with scripts/export_sam_features.py)",
                    path.display()
                ),
            });
        }
        let fmap = read_feature_file(&path)?;
        if fmap.feature_dim() != SAM_FEATURE_DIM {
            return Err(Error::FeatureDimMismatch {
                expected: SAM_FEATURE_DIM,
                got: fmap.feature_dim(),
            });
        }
        if (fmap.source_width, fmap.source_height) != image.dimensions() {
            return Err(Error::CorruptCache {
                path,
                detail: format!(
                    "grid is for a {}x{} image, got {}x{}",
                    fmap.source_width,
                    fmap.source_height,
                    image.width(),
                    image.height()
                ),
            });
        }
        Ok(fmap)
    }
}

// ---------------------------------------------------------------------------
// Disk cache
// ---------------------------------------------------------------------------

const FEATURE_MAGIC: &[u8; 4] = b"SFC1";

#[derive(Serialize, Deserialize)]
struct FeatureHeader {
    backend_id: String,
    feature_dim: usize,
    h_f: usize,
    w_f: usize,
    source_width: u32,
    source_height: u32,
    checksum: u64,
}

pub fn write_feature_file(path: &Path, fmap: &FeatureMap) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let (h_f, w_f, d) = fmap.grid.dim();
    let header = FeatureHeader {
        backend_id: fmap.backend_id.clone(),
        feature_dim: d,
        h_f,
        w_f,
        source_width: fmap.source_width,
        source_height: fmap.source_height,
        checksum: fmap.checksum,
    };
    let header_json = serde_json::to_vec(&header).expect("serialize header");
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(FEATURE_MAGIC).map_err(|e| Error::io(path, e))?;
    file.write_all(&(header_json.len() as u32).to_le_bytes())
        .map_err(|e| Error::io(path, e))?;
    file.write_all(&header_json).map_err(|e| Error::io(path, e))?;
    let mut data = Vec::with_capacity(fmap.grid.len() * 4);
    for v in fmap.grid.iter() {
        data.extend_from_slice(&v.to_le_bytes());
    }
    file.write_all(&data).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_feature_file(path: &Path) -> Result<FeatureMap> {
    let mut file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut magic = [0u8; 4];
    file.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
    if &magic != FEATURE_MAGIC {
        return Err(Error::CorruptCache {
            path: path.into(),
            detail: "bad magic".into(),
        });
    }
    let mut len = [0u8; 4];
    file.read_exact(&mut len).map_err(|e| Error::io(path, e))?;
    let mut header_json = vec![0u8; u32::from_le_bytes(len) as usize];
    file.read_exact(&mut header_json)
        .map_err(|e| Error::io(path, e))?;
    let header: FeatureHeader =
        serde_json::from_slice(&header_json).map_err(|e| Error::CorruptCache {
            path: path.into(),
            detail: e.to_string(),
        })?;
    let n = header.h_f * header.w_f * header.feature_dim;
    let mut data = vec![0u8; n * 4];
    file.read_exact(&mut data).map_err(|e| Error::io(path, e))?;
    let floats: Vec<f32> = data
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let grid = Array3::from_shape_vec((header.h_f, header.w_f, header.feature_dim), floats)
        .map_err(|e| Error::CorruptCache {
            path: path.into(),
            detail: e.to_string(),
        })?;
    if grid_checksum(&grid) != header.checksum {
        return Err(Error::CorruptCache {
            path: path.into(),
            detail: "checksum mismatch".into(),
        });
    }
    Ok(FeatureMap {
        grid,
        source_width: header.source_width,
        source_height: header.source_height,
        backend_id: header.backend_id,
        checksum: header.checksum,
    })
}

fn cache_file_name(backend_id: &str, image_hash: u64) -> String {
    format!("{backend_id}-{image_hash:016x}.sfc")
}

/// Feature cache keyed by (image content hash, backend id).
#[derive(Debug, Clone)]
pub struct FeatureCache {
    pub dir: PathBuf,
}

impl FeatureCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    /// Cache directory for a scene: the env var when set, otherwise
    /// `<scene>/features`.
    pub fn for_scene(scene_dir: &Path) -> Self {
        match std::env::var_os(CACHE_DIR_ENV) {
            Some(dir) => Self::new(PathBuf::from(dir)),
            None => Self::new(scene_dir.join("features")),
        }
    }

    pub fn entry_path(&self, backend_id: &str, image_hash: u64) -> PathBuf {
        self.dir.join(cache_file_name(backend_id, image_hash))
    }
}

/// Extract features for one image, reading/writing the disk cache.
pub fn extract_features(
    image: &RgbImage,
    backend: &dyn FeatureBackend,
    cache: Option<&FeatureCache>,
) -> Result<FeatureMap> {
    let hash = image_content_hash(image);
    if let Some(cache) = cache {
        let path = cache.entry_path(backend.id(), hash);
        if path.exists() {
            let fmap = read_feature_file(&path)?;
            if fmap.backend_id == backend.id() && fmap.feature_dim() == backend.feature_dim() {
                return Ok(fmap);
            }
            return Err(Error::CorruptCache {
                path,
                detail: format!(
                    "cache entry is {} (D={}), expected {} (D={})",
                    fmap.backend_id,
                    fmap.feature_dim(),
                    backend.id(),
                    backend.feature_dim()
                ),
            });
        }
    }
    let fmap = backend.extract(image)?;
    if let Some(cache) = cache {
        write_feature_file(&cache.entry_path(backend.id(), hash), &fmap)?;
    }
    Ok(fmap)
}
