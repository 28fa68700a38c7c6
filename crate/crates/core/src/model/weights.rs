//! Parameter storage, seeded initialisation and the binary weight format.
//!
//! File layout (all integers little-endian):
//!
//! ```text
//! magic        b"SPWT"
//! version      u32 = 1
//! field_count  u32 = 7
//! fields       u64 x 7: vocab_size, d_model, n_heads, d_head, n_layers, max_positions, seed
//! tensor_count u32
//! tensors      tensor_count x { rows u32, cols u32, rows*cols f32 row-major }
//! ```
//!
//! Tensors appear in the order produced by [`Weights::tensors`]: token
//! embedding, position embedding, then per layer `ln1.gain ln1.bias wq bq wk
//! bk wv bv wo bo ln2.gain ln2.bias w_up b_up w_down b_down`, then the final
//! layer norm gain and bias. Vectors are stored as `1 x n`.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::Real;

pub const MAGIC: &[u8; 4] = b"SPWT";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_FIELDS: u32 = 7;
const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights<F> {
    pub ln1_gain: Vec<F>,
    pub ln1_bias: Vec<F>,
    pub wq: Vec<F>,
    pub bq: Vec<F>,
    pub wk: Vec<F>,
    pub bk: Vec<F>,
    pub wv: Vec<F>,
    pub bv: Vec<F>,
    pub wo: Vec<F>,
    pub bo: Vec<F>,
    pub ln2_gain: Vec<F>,
    pub ln2_bias: Vec<F>,
    pub w_up: Vec<F>,
    pub b_up: Vec<F>,
    pub w_down: Vec<F>,
    pub b_down: Vec<F>,
}

/// Transformer parameters. Projection matrices are stored `in x out`, so a
/// row-vector activation multiplies them from the left. The output head is
/// tied to `token_embedding`.
#[derive(Clone, Debug, PartialEq)]
pub struct Weights<F> {
    pub config: ModelConfig,
    pub token_embedding: Vec<F>,
    pub position_embedding: Vec<F>,
    pub layers: Vec<LayerWeights<F>>,
    pub final_gain: Vec<F>,
    pub final_bias: Vec<F>,
}

pub type ModelWeights = Weights<f32>;

/// Borrowed view of one named tensor.
pub struct TensorView<'a, F> {
    pub name: String,
    pub shape: (usize, usize),
    pub data: &'a [F],
}

pub struct TensorViewMut<'a, F> {
    pub name: String,
    pub shape: (usize, usize),
    pub data: &'a mut Vec<F>,
}

/// Whether a tensor sits at the end of a residual branch (scaled init).
fn is_residual_output(name: &str) -> bool {
    name.ends_with(".wo") || name.ends_with(".w_down")
}

fn is_gain(name: &str) -> bool {
    name.ends_with("_gain")
}

fn is_bias(name: &str) -> bool {
    name.ends_with("_bias") || name.rsplit('.').next().is_some_and(|s| s.starts_with('b'))
}

fn push<'a, F>(out: &mut Vec<TensorView<'a, F>>, name: String, shape: (usize, usize), data: &'a [F]) {
    out.push(TensorView { name, shape, data });
}

macro_rules! layer_tensors {
    ($layer:expr, $i:expr, $cfg:expr, $out:ident) => {{
        let d = $cfg.d_model;
        let f = $cfg.d_ff();
        push(&mut $out, format!("layer{}.ln1_gain", $i), (1, d), &$layer.ln1_gain);
        push(&mut $out, format!("layer{}.ln1_bias", $i), (1, d), &$layer.ln1_bias);
        push(&mut $out, format!("layer{}.wq", $i), (d, d), &$layer.wq);
        push(&mut $out, format!("layer{}.bq", $i), (1, d), &$layer.bq);
        push(&mut $out, format!("layer{}.wk", $i), (d, d), &$layer.wk);
        push(&mut $out, format!("layer{}.bk", $i), (1, d), &$layer.bk);
        push(&mut $out, format!("layer{}.wv", $i), (d, d), &$layer.wv);
        push(&mut $out, format!("layer{}.bv", $i), (1, d), &$layer.bv);
        push(&mut $out, format!("layer{}.wo", $i), (d, d), &$layer.wo);
        push(&mut $out, format!("layer{}.bo", $i), (1, d), &$layer.bo);
        push(&mut $out, format!("layer{}.ln2_gain", $i), (1, d), &$layer.ln2_gain);
        push(&mut $out, format!("layer{}.ln2_bias", $i), (1, d), &$layer.ln2_bias);
        push(&mut $out, format!("layer{}.w_up", $i), (d, f), &$layer.w_up);
        push(&mut $out, format!("layer{}.b_up", $i), (1, f), &$layer.b_up);
        push(&mut $out, format!("layer{}.w_down", $i), (f, d), &$layer.w_down);
        push(&mut $out, format!("layer{}.b_down", $i), (1, d), &$layer.b_down);
    }};
}

impl<F: Real> Weights<F> {
    /// All-zero parameters with every shape implied by `config`.
    pub fn zeros(config: &ModelConfig) -> Self {
        let d = config.d_model;
        let f = config.d_ff();
        let z = |n: usize| vec![F::zero(); n];
        let layer = LayerWeights {
            ln1_gain: z(d),
            ln1_bias: z(d),
            wq: z(d * d),
            bq: z(d),
            wk: z(d * d),
            bk: z(d),
            wv: z(d * d),
            bv: z(d),
            wo: z(d * d),
            bo: z(d),
            ln2_gain: z(d),
            ln2_bias: z(d),
            w_up: z(d * f),
            b_up: z(f),
            w_down: z(f * d),
            b_down: z(d),
        };
        Self {
            config: config.clone(),
            token_embedding: z(config.vocab_size * d),
            position_embedding: z(config.max_positions * d),
            layers: vec![layer; config.n_layers],
            final_gain: z(d),
            final_bias: z(d),
        }
    }

    /// Seeded Gaussian initialisation: std 0.02, residual output projections
    /// scaled by `1/sqrt(n_layers)`, unit gains and zero biases. Values are
    /// drawn in f32 so every precision sees the same numbers.
    pub fn init_random(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut weights = Self::zeros(config);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let base = Normal::new(0.0f32, INIT_STD as f32).unwrap();
        let residual_std = (INIT_STD / (config.n_layers as f64).sqrt()) as f32;
        let residual = Normal::new(0.0f32, residual_std).unwrap();
        for t in weights.tensors_mut() {
            if is_gain(&t.name) {
                t.data.fill(F::one());
            } else if is_bias(&t.name) {
                // already zero
            } else {
                let dist = if is_residual_output(&t.name) { &residual } else { &base };
                for v in t.data.iter_mut() {
                    *v = F::from_f32(dist.sample(&mut rng)).unwrap();
                }
            }
        }
        Ok(weights)
    }

    pub fn tensors(&self) -> Vec<TensorView<'_, F>> {
        let cfg = &self.config;
        let d = cfg.d_model;
        let mut out = Vec::new();
        push(&mut out, "token_embedding".into(), (cfg.vocab_size, d), &self.token_embedding);
        push(&mut out, "position_embedding".into(), (cfg.max_positions, d), &self.position_embedding);
        for (i, layer) in self.layers.iter().enumerate() {
            layer_tensors!(layer, i, cfg, out);
        }
        push(&mut out, "final_gain".into(), (1, d), &self.final_gain);
        push(&mut out, "final_bias".into(), (1, d), &self.final_bias);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<TensorViewMut<'_, F>> {
        let names: Vec<(String, (usize, usize))> = self.tensors().into_iter().map(|t| (t.name, t.shape)).collect();
        let mut slots: Vec<&mut Vec<F>> = Vec::with_capacity(names.len());
        slots.push(&mut self.token_embedding);
        slots.push(&mut self.position_embedding);
        for layer in self.layers.iter_mut() {
            let LayerWeights {
                ln1_gain,
                ln1_bias,
                wq,
                bq,
                wk,
                bk,
                wv,
                bv,
                wo,
                bo,
                ln2_gain,
                ln2_bias,
                w_up,
                b_up,
                w_down,
                b_down,
            } = layer;
            slots.extend([
                ln1_gain, ln1_bias, wq, bq, wk, bk, wv, bv, wo, bo, ln2_gain, ln2_bias, w_up, b_up, w_down, b_down,
            ]);
        }
        slots.push(&mut self.final_gain);
        slots.push(&mut self.final_bias);
        names.into_iter().zip(slots).map(|((name, shape), data)| TensorViewMut { name, shape, data }).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    /// Checks every tensor length against the config.
    pub fn audit_shapes(&self) -> Result<()> {
        self.config.validate()?;
        if self.layers.len() != self.config.n_layers {
            return Err(Error::ShapeMismatch(format!(
                "{} layers stored, config says {}",
                self.layers.len(),
                self.config.n_layers
            )));
        }
        for t in self.tensors() {
            if t.data.len() != t.shape.0 * t.shape.1 {
                return Err(Error::ShapeMismatch(format!(
                    "{} holds {} values, expected {}x{}",
                    t.name,
                    t.data.len(),
                    t.shape.0,
                    t.shape.1
                )));
            }
        }
        Ok(())
    }

    /// Element-wise conversion to another precision.
    pub fn cast<G: Real>(&self) -> Weights<G> {
        let mut out = Weights::<G>::zeros(&self.config);
        for (src, dst) in self.tensors().into_iter().zip(out.tensors_mut()) {
            for (d, s) in dst.data.iter_mut().zip(src.data) {
                *d = G::from_f64_lossy(s.as_f64());
            }
        }
        out
    }

    /// Canonical byte serialisation (values narrowed to f32).
    pub fn to_bytes(&self) -> Vec<u8> {
        let cfg = &self.config;
        let mut buf = Vec::with_capacity(64 + self.parameter_count() * 4);
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        buf.extend_from_slice(&HEADER_FIELDS.to_le_bytes());
        for field in [
            cfg.vocab_size as u64,
            cfg.d_model as u64,
            cfg.n_heads as u64,
            cfg.d_head as u64,
            cfg.n_layers as u64,
            cfg.max_positions as u64,
            cfg.seed,
        ] {
            buf.extend_from_slice(&field.to_le_bytes());
        }
        let tensors = self.tensors();
        buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for t in tensors {
            buf.extend_from_slice(&(t.shape.0 as u32).to_le_bytes());
            buf.extend_from_slice(&(t.shape.1 as u32).to_le_bytes());
            for v in t.data {
                buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
            }
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::BadMagic);
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let fields = r.u32()?;
        if fields != HEADER_FIELDS {
            return Err(Error::ShapeMismatch(format!("header lists {fields} fields, expected {HEADER_FIELDS}")));
        }
        let mut next = || -> Result<usize> { Ok(r.u64()? as usize) };
        let vocab_size = next()?;
        let d_model = next()?;
        let n_heads = next()?;
        let d_head = next()?;
        let n_layers = next()?;
        let max_positions = next()?;
        let seed = r.u64()?;
        let config = ModelConfig { vocab_size, d_model, n_heads, d_head, n_layers, max_positions, seed };
        config.validate()?;
        let mut weights = Self::zeros(&config);
        let count = r.u32()? as usize;
        let mut slots = weights.tensors_mut();
        if count != slots.len() {
            return Err(Error::ShapeMismatch(format!("file holds {count} tensors, config implies {}", slots.len())));
        }
        for slot in slots.iter_mut() {
            let found = (r.u32()? as usize, r.u32()? as usize);
            if found != slot.shape {
                return Err(Error::TensorSize { tensor: slot.name.clone(), expected: slot.shape, found });
            }
            let raw = r.take(found.0 * found.1 * 4)?;
            for (dst, chunk) in slot.data.iter_mut().zip(raw.chunks_exact(4)) {
                let v = f32::from_le_bytes(chunk.try_into().unwrap());
                *dst = F::from_f32(v).unwrap();
            }
        }
        drop(slots);
        if r.at != bytes.len() {
            return Err(Error::ShapeMismatch(format!("{} trailing bytes after the last tensor", bytes.len() - r.at)));
        }
        Ok(weights)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut file = fs::File::create(path)?;
        file.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).ok_or(Error::Truncated)?;
        let out = self.bytes.get(self.at..end).ok_or(Error::Truncated)?;
        self.at = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(seed: u64) -> ModelConfig {
        ModelConfig { vocab_size: 11, d_model: 16, n_heads: 4, d_head: 4, n_layers: 2, max_positions: 12, seed }
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let a = ModelWeights::init_random(&tiny(7)).unwrap();
        let b = ModelWeights::init_random(&tiny(7)).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        let c = ModelWeights::init_random(&tiny(8)).unwrap();
        assert_ne!(a.token_embedding, c.token_embedding);
    }

    #[test]
    fn init_shapes_and_statistics() {
        let w = ModelWeights::init_random(&tiny(7)).unwrap();
        w.audit_shapes().unwrap();
        assert!(w.all_finite());
        assert!(w.layers[0].ln1_gain.iter().all(|&g| g == 1.0));
        assert!(w.layers[1].b_up.iter().all(|&b| b == 0.0));
        let std = |xs: &[f32]| {
            let n = xs.len() as f64;
            (xs.iter().map(|&x| (x as f64).powi(2)).sum::<f64>() / n).sqrt()
        };
        let big = ModelConfig { d_model: 64, d_head: 16, ..tiny(1) };
        let w = ModelWeights::init_random(&big).unwrap();
        assert!((std(&w.layers[0].w_up) - 0.02).abs() < 0.002);
        let scaled = 0.02 / 2f64.sqrt();
        assert!((std(&w.layers[0].w_down) - scaled).abs() < 0.002);
    }

    #[test]
    fn byte_round_trip_is_exact() {
        let w = ModelWeights::init_random(&tiny(3)).unwrap();
        let bytes = w.to_bytes();
        let back = ModelWeights::from_bytes(&bytes).unwrap();
        assert_eq!(back, w);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.bin");
        let w = ModelWeights::init_random(&tiny(5)).unwrap();
        w.save(&path).unwrap();
        assert_eq!(ModelWeights::load(&path).unwrap().to_bytes(), w.to_bytes());
    }

    #[test]
    fn corrupt_magic_is_rejected() {
        let mut bytes = ModelWeights::init_random(&tiny(3)).unwrap().to_bytes();
        bytes[0] = b'X';
        assert!(matches!(ModelWeights::from_bytes(&bytes), Err(Error::BadMagic)));
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let mut bytes = ModelWeights::init_random(&tiny(3)).unwrap().to_bytes();
        bytes[4] = 9;
        assert!(matches!(ModelWeights::from_bytes(&bytes), Err(Error::UnsupportedVersion(9))));
    }

    #[test]
    fn truncated_file_is_rejected() {
        let bytes = ModelWeights::init_random(&tiny(3)).unwrap().to_bytes();
        for cut in [3, 20, bytes.len() - 1] {
            assert!(matches!(ModelWeights::from_bytes(&bytes[..cut]), Err(Error::Truncated)));
        }
    }

    #[test]
    fn header_tensor_disagreement_is_rejected() {
        let cfg = ModelConfig { vocab_size: 49, ..tiny(3) };
        let mut bytes = ModelWeights::init_random(&cfg).unwrap().to_bytes();
        // vocab_size is the first u64 after magic, version and field count
        bytes[12..20].copy_from_slice(&50u64.to_le_bytes());
        match ModelWeights::from_bytes(&bytes) {
            Err(Error::TensorSize { tensor, expected, found }) => {
                assert_eq!(tensor, "token_embedding");
                assert_eq!(expected, (50, 16));
                assert_eq!(found, (49, 16));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn cast_round_trip_through_f64() {
        let w = ModelWeights::init_random(&tiny(3)).unwrap();
        let hi: Weights<f64> = w.cast();
        assert_eq!(hi.cast::<f32>(), w);
    }
}
