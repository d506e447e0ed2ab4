//! Multi-layer perceptron classifiers and their binary checkpoint format.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{matmul_values, Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"LFMECKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Hidden widths used for experts, target and weighting network.
pub const DEFAULT_HIDDEN: [usize; 2] = [64, 64];

/// `[d_in, 64, 64, out]`.
pub fn default_dims(d_in: usize, out: usize) -> Vec<usize> {
    let mut dims = vec![d_in];
    dims.extend_from_slice(&DEFAULT_HIDDEN);
    dims.push(out);
    dims
}

/// ReLU MLP with an identity output layer. Weights are stored `fan_in × fan_out`.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpModel {
    layer_dims: Vec<usize>,
    weights: Vec<Tensor>,
    biases: Vec<Tensor>,
}

/// Parameter handles of one model recorded on a tape, in checkpoint order.
#[derive(Clone, Debug)]
pub struct BoundParams {
    pub vars: Vec<Var>,
}

impl MlpModel {
    /// Uniform(±√(6/fan_in)) weights and zero biases, deterministic in `seed`.
    pub fn init(layer_dims: &[usize], seed: u64) -> Result<Self> {
        if layer_dims.len() < 2 {
            return Err(Error::Invalid(format!(
                "an MLP needs at least input and output dims, got {layer_dims:?}"
            )));
        }
        if layer_dims.contains(&0) {
            return Err(Error::Invalid(format!(
                "layer dims must be positive, got {layer_dims:?}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for pair in layer_dims.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let bound = (6.0 / fan_in as f64).sqrt();
            let data = (0..fan_in * fan_out)
                .map(|_| rng.random_range(-bound..bound))
                .collect();
            weights.push(Tensor::new(vec![fan_in, fan_out], data)?);
            biases.push(Tensor::zeros(vec![fan_out]));
        }
        Ok(MlpModel {
            layer_dims: layer_dims.to_vec(),
            weights,
            biases,
        })
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[Tensor] {
        &self.weights
    }

    pub fn biases(&self) -> &[Tensor] {
        &self.biases
    }

    /// Parameters in checkpoint order: weight then bias per layer.
    pub fn params(&self) -> Vec<&Tensor> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| [w, b])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.weights
            .iter_mut()
            .zip(self.biases.iter_mut())
            .flat_map(|(w, b)| [w, b])
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape().len() != 2 || x.shape()[1] != self.input_dim() {
            return Err(Error::Dimension {
                op: "forward",
                left: x.shape().to_vec(),
                right: vec![self.input_dim()],
            });
        }
        Ok(())
    }

    /// Records the forward pass on `tape`; returns logits and parameter handles.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<(Var, BoundParams)> {
        self.check_input(tape.value(x))?;
        let mut vars = Vec::with_capacity(2 * self.num_layers());
        let mut h = x;
        for (i, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let wv = tape.param(w.clone());
            let bv = tape.param(b.clone());
            vars.push(wv);
            vars.push(bv);
            let lin = tape.matmul(h, wv)?;
            h = tape.add_bias(lin, bv)?;
            if i + 1 < self.num_layers() {
                h = tape.relu(h);
            }
        }
        Ok((h, BoundParams { vars }))
    }

    /// Forward pass without a tape. Bit-identical to [`MlpModel::forward`].
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut h = x.clone();
        for (i, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut out = matmul_values(&h, w)?;
            let n = b.len();
            for row in out.data_mut().chunks_mut(n) {
                for (o, bias) in row.iter_mut().zip(b.data()) {
                    *o += bias;
                }
            }
            if i + 1 < self.num_layers() {
                out.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
            }
            h = out;
        }
        Ok(h)
    }

    /// Uniform parameter average of same-architecture models.
    pub fn average(models: &[&MlpModel]) -> Result<MlpModel> {
        let first = models
            .first()
            .ok_or_else(|| Error::Invalid("cannot average zero models".into()))?;
        for m in models {
            if m.layer_dims != first.layer_dims {
                return Err(Error::Dimension {
                    op: "model_average",
                    left: first.layer_dims.clone(),
                    right: m.layer_dims.clone(),
                });
            }
        }
        let mut out = (*first).clone();
        let scale = 1.0 / models.len() as f64;
        let sources: Vec<Vec<&Tensor>> = models.iter().map(|m| m.params()).collect();
        for (pi, param) in out.params_mut().into_iter().enumerate() {
            for (j, v) in param.data_mut().iter_mut().enumerate() {
                *v = sources.iter().map(|p| p[pi].data()[j]).sum::<f64>() * scale;
            }
        }
        Ok(out)
    }
}

/// Which role a checkpointed model plays.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelRole {
    Expert(u32),
    Target,
    Weighting,
}

impl ModelRole {
    fn encode(self) -> (u8, u32) {
        match self {
            ModelRole::Expert(i) => (0, i),
            ModelRole::Target => (1, 0),
            ModelRole::Weighting => (2, 0),
        }
    }

    fn decode(tag: u8, index: u32) -> Result<Self> {
        match tag {
            0 => Ok(ModelRole::Expert(index)),
            1 => Ok(ModelRole::Target),
            2 => Ok(ModelRole::Weighting),
            t => Err(Error::Format(format!("unknown role tag {t}"))),
        }
    }

    pub fn file_stem(self) -> String {
        match self {
            ModelRole::Expert(i) => format!("expert-{i}"),
            ModelRole::Target => "target".into(),
            ModelRole::Weighting => "weighting".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub role: ModelRole,
    pub step: u64,
    pub seed: u64,
    pub model: MlpModel,
}

impl Checkpoint {
    /// Layout (little endian): magic, u32 version, u8 role, u32 role index,
    /// u64 step, u64 seed, u32 dim count, u32 dims, f64 parameters.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let (tag, index) = self.role.encode();
        out.push(tag);
        out.extend_from_slice(&index.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        let dims = self.model.layer_dims();
        out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
        for &d in dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for p in self.model.params() {
            for v in p.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::Format("bad magic bytes".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported version {version}, expected {CHECKPOINT_VERSION}"
            )));
        }
        let tag = r.take(1)?[0];
        let index = r.u32()?;
        let role = ModelRole::decode(tag, index)?;
        let step = r.u64()?;
        let seed = r.u64()?;
        let ndims = r.u32()? as usize;
        if ndims < 2 {
            return Err(Error::Format(format!("dim list of length {ndims}")));
        }
        let dims = (0..ndims)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let mut model = MlpModel::init(&dims, 0).map_err(|e| Error::Format(e.to_string()))?;
        let expected = r.pos + 8 * model.num_params();
        if bytes.len() != expected {
            return Err(Error::PayloadLength {
                expected,
                found: bytes.len(),
            });
        }
        for p in model.params_mut() {
            for v in p.data_mut() {
                *v = f64::from_le_bytes(r.take(8)?.try_into().unwrap());
            }
        }
        Ok(Checkpoint {
            role,
            step,
            seed,
            model,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::PayloadLength {
                expected: self.pos + n,
                found: self.bytes.len(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn save_checkpoint(model: &MlpModel, role: ModelRole, step: u64, seed: u64, path: &Path) -> Result<()> {
    Checkpoint {
        role,
        step,
        seed,
        model: model.clone(),
    }
    .save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<MlpModel> {
    Ok(Checkpoint::load(path)?.model)
}
