//! The implicit neural field: a position-conditioned trunk producing density
//! and a base feature per point, plus a direction-conditioned colour branch.
//!
//! Density is a function of position only by construction: the trunk never
//! sees the ray direction. The colour branch consumes the base feature and
//! the encoded direction. Stage 2 freezes the density sub-network (and, per
//! this artifact's stage-2 policy, the whole field) and trains only the
//! fusion head on top of the frozen base features.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{init_linear, linear, ParamSession, ParamStore};
use crate::tape::{Matrix, Tape, VarId};

pub const FIELD_PREFIX: &str = "field.";
pub const DENSITY_PREFIXES: [&str; 2] = ["field.trunk.", "field.sigma."];

fn default_position_scale() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldConfig {
    /// Frequency octaves for the positional encoding of sample positions.
    pub position_freqs: usize,
    /// Frequency octaves for the ray-direction encoding.
    pub direction_freqs: usize,
    pub hidden_width: usize,
    /// Number of trunk layers.
    pub depth: usize,
    /// Width of the per-point base feature `b_i`.
    pub base_feature_dim: usize,
    /// World positions are divided by this before encoding; set it to the
    /// scene radius so encoded coordinates land in roughly [-1, 1].
    #[serde(default = "default_position_scale")]
    pub position_scale: f64,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self {
            position_freqs: 10,
            direction_freqs: 4,
            hidden_width: 256,
            depth: 8,
            base_feature_dim: 256,
            position_scale: 1.0,
        }
    }
}

impl FieldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.position_freqs == 0
            || self.direction_freqs == 0
            || self.hidden_width == 0
            || self.depth == 0
        {
            return Err(Error::InvalidArgument(
                "field config fields must be positive".into(),
            ));
        }
        if !(self.position_scale > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "position_scale {} must be positive",
                self.position_scale
            )));
        }
        if self.base_feature_dim < 8 {
            return Err(Error::InvalidArgument(format!(
                "base_feature_dim {} < 8",
                self.base_feature_dim
            )));
        }
        Ok(())
    }

    pub fn encoded_position_dim(&self) -> usize {
        3 * (1 + 2 * self.position_freqs)
    }

    pub fn encoded_direction_dim(&self) -> usize {
        3 * (1 + 2 * self.direction_freqs)
    }

    fn colour_hidden(&self) -> usize {
        (self.hidden_width / 2).max(16)
    }
}

/// Per-point field outputs.
#[derive(Debug, Clone)]
pub struct FieldOutput {
    /// Non-negative densities, one per point.
    pub sigma: Array1<f64>,
    /// Colours in [0,1], one row per point.
    pub colour: Array2<f64>,
    /// Base features `b_i`, one row per point.
    pub base: Array2<f64>,
}

/// `[x, sin(2^k pi x), cos(2^k pi x)]` for k = 0..freqs-1, applied
/// componentwise; output width is `d * (1 + 2 * freqs)`.
pub fn positional_encode(x: ArrayView2<f64>, freqs: usize) -> Array2<f64> {
    assert!(freqs >= 1, "positional_encode: freqs must be >= 1");
    let (n, d) = x.dim();
    let mut out = Array2::zeros((n, d * (1 + 2 * freqs)));
    out.slice_mut(ndarray::s![.., ..d]).assign(&x);
    for k in 0..freqs {
        let scale = (1u64 << k) as f64 * std::f64::consts::PI;
        for r in 0..n {
            for c in 0..d {
                let v = x[[r, c]] * scale;
                out[[r, d + 2 * k * d + c]] = v.sin();
                out[[r, d + (2 * k + 1) * d + c]] = v.cos();
            }
        }
    }
    out
}

/// Tape handles for one field forward pass.
pub struct FieldVars {
    /// (n, 1) non-negative densities.
    pub sigma: VarId,
    /// (n, base_feature_dim) base features.
    pub base: VarId,
    /// (n, 3) colours; present only when directions were supplied.
    pub colour: Option<VarId>,
}

#[derive(Debug, Clone)]
pub struct NeuralField {
    pub config: FieldConfig,
}

impl NeuralField {
    /// Register all field parameters under `field.` in the store.
    pub fn init(store: &mut ParamStore, config: FieldConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let enc_pos = config.encoded_position_dim();
        let enc_dir = config.encoded_direction_dim();
        let h = config.hidden_width;
        let mut in_dim = enc_pos;
        for i in 0..config.depth {
            init_linear(store, &format!("field.trunk.{i}"), in_dim, h, seed);
            in_dim = h;
        }
        init_linear(store, "field.sigma", h, 1, seed);
        init_linear(store, "field.base", h, config.base_feature_dim, seed);
        init_linear(
            store,
            "field.colour.hidden",
            config.base_feature_dim + enc_dir,
            config.colour_hidden(),
            seed,
        );
        init_linear(store, "field.colour.out", config.colour_hidden(), 3, seed);
        Ok(Self { config })
    }

    /// Construct a handle for parameters already present in `store`
    /// (e.g. restored from a checkpoint).
    pub fn from_store(store: &ParamStore, config: FieldConfig) -> Result<Self> {
        config.validate()?;
        for required in ["field.trunk.0.w", "field.sigma.w", "field.base.w"] {
            if !store.contains(required) {
                return Err(Error::ConfigMismatch(format!(
                    "store is missing field parameter {required}"
                )));
            }
        }
        Ok(Self { config })
    }

    /// Forward pass on an existing tape. `directions` must be unit rows when
    /// present; omit them to skip the colour branch (stage 2 and density
    /// probes don't need it).
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        sess: &mut ParamSession,
        points: ArrayView2<f64>,
        directions: Option<ArrayView2<f64>>,
    ) -> Result<FieldVars> {
        if points.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput("field query positions".into()));
        }
        if let Some(d) = directions {
            if d.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteInput("field query directions".into()));
            }
            debug_assert!(d
                .rows()
                .into_iter()
                .all(|r| (r.dot(&r).sqrt() - 1.0).abs() < 1e-6));
        }
        let scaled = points.mapv(|v| v / self.config.position_scale);
        let enc_pos = positional_encode(scaled.view(), self.config.position_freqs);
        let mut x = tape.leaf(enc_pos);
        for i in 0..self.config.depth {
            x = linear(tape, sess, &format!("field.trunk.{i}"), x);
            x = tape.relu(x);
        }
        let sigma_raw = linear(tape, sess, "field.sigma", x);
        let sigma = tape.softplus(sigma_raw);
        let base = linear(tape, sess, "field.base", x);

        let colour = match directions {
            Some(dirs) => {
                let enc_dir = positional_encode(dirs, self.config.direction_freqs);
                let dir_leaf = tape.leaf(enc_dir);
                let joint = tape.concat_cols(base, dir_leaf);
                let h = linear(tape, sess, "field.colour.hidden", joint);
                let h = tape.relu(h);
                let out = linear(tape, sess, "field.colour.out", h);
                Some(tape.sigmoid(out))
            }
            None => None,
        };
        Ok(FieldVars {
            sigma,
            base,
            colour,
        })
    }

    /// Pure inference: density, base feature and (with directions) colour for
    /// each point. Deterministic given parameters.
    pub fn query(
        &self,
        store: &ParamStore,
        points: ArrayView2<f64>,
        directions: Option<ArrayView2<f64>>,
    ) -> Result<FieldOutput> {
        let mut tape = Tape::new();
        let mut sess = ParamSession::new(store);
        let vars = self.forward_on_tape(&mut tape, &mut sess, points, directions)?;
        let sigma = tape.value(vars.sigma).index_axis(Axis(1), 0).to_owned();
        let base = tape.value(vars.base).clone();
        let colour = match vars.colour {
            Some(c) => tape.value(c).clone(),
            None => Matrix::zeros((points.nrows(), 3)),
        };
        Ok(FieldOutput {
            sigma,
            colour,
            base,
        })
    }
}

/// Mark the density sub-network (trunk and density head) non-trainable.
/// Idempotent; subsequent optimizer steps leave those weights bit-identical.
pub fn freeze_density(store: &mut ParamStore) -> usize {
    DENSITY_PREFIXES
        .iter()
        .map(|p| store.freeze_prefix(p))
        .sum()
}

/// Stage-2 policy: the entire field (density, base trunk, colour branch) is
/// frozen; only the fusion head trains.
pub fn freeze_field(store: &mut ParamStore) -> usize {
    store.freeze_prefix(FIELD_PREFIX)
}
