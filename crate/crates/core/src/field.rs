//! The radiance field: frequency encoding plus an MLP mapping a 3D point and
//! view direction to volume density and color.
//!
//! Density comes from a direction-independent head; color from a head that
//! sees the density branch's feature vector concatenated with the encoded
//! direction, squashed through a sigmoid. Everything runs on the [`grad`]
//! tape so training gets exact parameter gradients.
//!
//! [`grad`]: crate::grad

use crate::grad::{
    self, ParamLayout, ParamLeaves, ParamVector, SliceSpec, Tape, ValueId,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Frequency counts for the positional encoding of positions and directions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncodingConfig {
    pub l_pos: usize,
    pub l_dir: usize,
}

impl Default for EncodingConfig {
    fn default() -> Self {
        // Desk-scale default; the 10/4 values of larger fields are accepted.
        EncodingConfig { l_pos: 6, l_dir: 2 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DensityNonlinearity {
    Softplus,
    Relu,
}

/// MLP architecture of the field.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldConfig {
    pub depth: usize,
    pub width: usize,
    pub skip_layer: Option<usize>,
    pub density_nonlinearity: DensityNonlinearity,
}

impl Default for FieldConfig {
    fn default() -> Self {
        FieldConfig {
            depth: 4,
            width: 64,
            skip_layer: Some(2),
            density_nonlinearity: DensityNonlinearity::Softplus,
        }
    }
}

impl FieldConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.depth < 1 {
            return Err("field depth must be >= 1".into());
        }
        if self.width < 1 {
            return Err("field width must be >= 1".into());
        }
        if let Some(s) = self.skip_layer {
            if s >= self.depth {
                return Err(format!(
                    "skip layer {s} out of range for depth {}",
                    self.depth
                ));
            }
        }
        Ok(())
    }

    fn color_hidden_width(&self) -> usize {
        (self.width / 2).max(1)
    }
}

/// Density and color at one sample point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FieldOutput {
    pub sigma: f64,
    pub color: [f64; 3],
}

/// Encoded length of a k-vector at L frequencies: k + 2kL.
pub fn encoded_len(k: usize, l: usize) -> usize {
    k + 2 * k * l
}

/// concat(x, sin(2^0 pi x), cos(2^0 pi x), ..., sin(2^(L-1) pi x),
/// cos(2^(L-1) pi x)), componentwise. The raw input leads the features.
pub fn positional_encode(x: &[f64], l: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(encoded_len(x.len(), l));
    out.extend_from_slice(x);
    for level in 0..l {
        let freq = std::f64::consts::PI * (1u64 << level) as f64;
        out.extend(x.iter().map(|&v| (freq * v).sin()));
        out.extend(x.iter().map(|&v| (freq * v).cos()));
    }
    out
}

/// Tape version of [`positional_encode`]; the input becomes a constant leaf.
pub fn encode_on_tape(tape: &mut Tape, x: &[f64], l: usize) -> ValueId {
    let raw = tape.constant(x);
    if l == 0 {
        return raw;
    }
    let mut parts = Vec::with_capacity(1 + 2 * l);
    parts.push(raw);
    for level in 0..l {
        let freq = std::f64::consts::PI * (1u64 << level) as f64;
        let scaled = tape.scale(raw, freq);
        parts.push(tape.sin(scaled));
        parts.push(tape.cos(scaled));
    }
    tape.concat(&parts)
}

/// Parameter layout for a field configuration. Hidden layers are named
/// `hidden{i}.weight`/`hidden{i}.bias`; heads are `sigma.*`, `color_hidden.*`
/// and `color_out.*`.
pub fn param_layout(cfg: &FieldConfig, enc: &EncodingConfig) -> ParamLayout {
    let pos_dim = encoded_len(3, enc.l_pos);
    let dir_dim = encoded_len(3, enc.l_dir);
    let mut slices = Vec::new();
    let mut in_dim = pos_dim;
    for i in 0..cfg.depth {
        let dim = if cfg.skip_layer == Some(i) && i > 0 {
            in_dim + pos_dim
        } else if cfg.skip_layer == Some(i) && i == 0 {
            // A skip at the input layer concatenates the encoding with itself.
            in_dim + pos_dim
        } else {
            in_dim
        };
        slices.push(SliceSpec::matrix(format!("hidden{i}.weight"), cfg.width, dim));
        slices.push(SliceSpec::vector(format!("hidden{i}.bias"), cfg.width));
        in_dim = cfg.width;
    }
    slices.push(SliceSpec::matrix("sigma.weight", 1, cfg.width));
    slices.push(SliceSpec::vector("sigma.bias", 1));
    let ch = cfg.color_hidden_width();
    slices.push(SliceSpec::matrix(
        "color_hidden.weight",
        ch,
        cfg.width + dir_dim,
    ));
    slices.push(SliceSpec::vector("color_hidden.bias", ch));
    slices.push(SliceSpec::matrix("color_out.weight", 3, ch));
    slices.push(SliceSpec::vector("color_out.bias", 3));
    ParamLayout::new(slices)
}

/// Xavier-uniform weights (bound sqrt(6/(fan_in+fan_out))), zero biases,
/// deterministic in the seed.
pub fn init_params(cfg: &FieldConfig, enc: &EncodingConfig, seed: u64) -> ParamVector {
    let layout = param_layout(cfg, enc);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = vec![0.0; layout.total_len()];
    for (i, spec) in layout.slices().iter().enumerate() {
        if spec.cols > 1 || spec.name.ends_with(".weight") {
            let bound = (6.0 / (spec.cols + spec.rows) as f64).sqrt();
            for v in &mut values[layout.range(i)] {
                *v = rng.random_range(-bound..bound);
            }
        }
        // biases stay zero
    }
    ParamVector::from_values(layout, values)
}

/// Field parameter leaves resolved to per-layer ids, built once per tape.
pub struct FieldLeaves {
    hidden: Vec<(ValueId, ValueId)>,
    sigma: (ValueId, ValueId),
    color_hidden: (ValueId, ValueId),
    color_out: (ValueId, ValueId),
}

impl FieldLeaves {
    pub fn resolve(leaves: &ParamLeaves, layout: &ParamLayout, cfg: &FieldConfig) -> Self {
        let id_of = |name: &str| {
            leaves.ids[layout
                .index_of(name)
                .unwrap_or_else(|| panic!("layout missing slice {name}"))]
        };
        FieldLeaves {
            hidden: (0..cfg.depth)
                .map(|i| {
                    (
                        id_of(&format!("hidden{i}.weight")),
                        id_of(&format!("hidden{i}.bias")),
                    )
                })
                .collect(),
            sigma: (id_of("sigma.weight"), id_of("sigma.bias")),
            color_hidden: (id_of("color_hidden.weight"), id_of("color_hidden.bias")),
            color_out: (id_of("color_out.weight"), id_of("color_out.bias")),
        }
    }
}

/// Build the field forward pass on a tape. `enc_dir` is the already-encoded
/// view direction (shared across samples on a ray). Returns (sigma, color)
/// node ids of lengths 1 and 3.
pub fn field_on_tape(
    tape: &mut Tape,
    leaves: &FieldLeaves,
    cfg: &FieldConfig,
    enc: &EncodingConfig,
    point: [f64; 3],
    enc_dir: ValueId,
) -> (ValueId, ValueId) {
    let enc_pos = encode_on_tape(tape, &point, enc.l_pos);
    let mut h = enc_pos;
    for (i, &(w, b)) in leaves.hidden.iter().enumerate() {
        if cfg.skip_layer == Some(i) {
            h = tape.concat(&[h, enc_pos]);
        }
        let z = tape.matvec(w, h);
        let zb = tape.add(z, b);
        h = tape.relu(zb);
    }
    let (sw, sb) = leaves.sigma;
    let sz = tape.matvec(sw, h);
    let szb = tape.add(sz, sb);
    let sigma = match cfg.density_nonlinearity {
        DensityNonlinearity::Softplus => tape.softplus(szb),
        DensityNonlinearity::Relu => tape.relu(szb),
    };

    let cat = tape.concat(&[h, enc_dir]);
    let (cw, cb) = leaves.color_hidden;
    let cz = tape.matvec(cw, cat);
    let czb = tape.add(cz, cb);
    let ch = tape.relu(czb);
    let (ow, ob) = leaves.color_out;
    let oz = tape.matvec(ow, ch);
    let ozb = tape.add(oz, ob);
    let color = tape.sigmoid(ozb);
    (sigma, color)
}

/// Evaluate the field at one (point, direction) pair.
pub fn field_eval(
    params: &ParamVector,
    cfg: &FieldConfig,
    enc: &EncodingConfig,
    point: [f64; 3],
    dir: [f64; 3],
) -> FieldOutput {
    let norm = (dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]).sqrt();
    assert!(
        (norm - 1.0).abs() < 1e-6,
        "view direction must be unit norm, got |d| = {norm}"
    );
    let mut tape = Tape::new();
    let leaves = grad::register_params(&mut tape, params);
    let field_leaves = FieldLeaves::resolve(&leaves, params.layout(), cfg);
    let enc_dir = encode_on_tape(&mut tape, &dir, enc.l_dir);
    let (sigma, color) = field_on_tape(&mut tape, &field_leaves, cfg, enc, point, enc_dir);
    let c = tape.value(color);
    FieldOutput {
        sigma: tape.scalar_value(sigma),
        color: [c[0], c[1], c[2]],
    }
}
