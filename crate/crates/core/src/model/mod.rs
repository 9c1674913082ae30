//! MLP encoder into the latent space and the three per-angle logit heads.

mod checkpoint;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{checksum, load_checkpoint, save_checkpoint, CHECKPOINT_MANIFEST};

use crate::diff::{Matrix, NodeId, Tape};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Angle {
    Yaw,
    Pitch,
    Roll,
}

impl Angle {
    pub const ALL: [Angle; 3] = [Angle::Yaw, Angle::Pitch, Angle::Roll];

    pub fn name(self) -> &'static str {
        match self {
            Angle::Yaw => "yaw",
            Angle::Pitch => "pitch",
            Angle::Roll => "roll",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub latent_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            input_dim: 32,
            hidden_dims: vec![64, 64],
            latent_dim: 16,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(Error::Config("encoder dimensions must be >= 1".into()));
        }
        if self.latent_dim < 2 {
            return Err(Error::Config(format!(
                "latent_dim must be >= 2, got {}",
                self.latent_dim
            )));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` of every affine layer, latent layer last.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = vec![self.input_dim];
        dims.extend(&self.hidden_dims);
        dims.push(self.latent_dim);
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }
}

/// Affine layer `x · W + b` with `W` stored fan_in × fan_out.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Matrix,
    pub bias: Matrix,
}

impl Dense {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Dense {
            weight: Matrix::zeros(fan_in, fan_out),
            bias: Matrix::zeros(1, fan_out),
        }
    }

    /// Uniform weights in `±sqrt(6 / (fan_in + fan_out))`, zero bias.
    pub fn glorot(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-limit..=limit))
            .collect();
        Dense {
            weight: Matrix::from_vec(fan_in, fan_out, data).expect("sized above"),
            bias: Matrix::zeros(1, fan_out),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.rows()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.cols()
    }
}

/// All learnable parameters: encoder layers, three heads and, once stage 2
/// is initialized, the K × latent_dim cluster centers.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub encoder: Vec<Dense>,
    pub heads: [Dense; 3],
    pub centers: Option<Matrix>,
}

impl ModelParams {
    pub fn init(config: &EncoderConfig, num_bins: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if num_bins == 0 {
            return Err(Error::Config("num_bins must be >= 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = config
            .layer_dims()
            .into_iter()
            .map(|(i, o)| Dense::glorot(i, o, &mut rng))
            .collect();
        let heads = std::array::from_fn(|_| Dense::glorot(config.latent_dim, num_bins, &mut rng));
        Ok(ModelParams {
            encoder,
            heads,
            centers: None,
        })
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        let input_dim = self.encoder.first().map_or(0, Dense::fan_in);
        let latent_dim = self.encoder.last().map_or(0, Dense::fan_out);
        let hidden_dims = self.encoder[..self.encoder.len().saturating_sub(1)]
            .iter()
            .map(Dense::fan_out)
            .collect();
        EncoderConfig {
            input_dim,
            hidden_dims,
            latent_dim,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.encoder[0].fan_in()
    }

    pub fn latent_dim(&self) -> usize {
        self.encoder.last().expect("encoder has a latent layer").fan_out()
    }

    pub fn num_bins(&self) -> usize {
        self.heads[0].fan_out()
    }

    pub fn head(&self, angle: Angle) -> &Dense {
        &self.heads[angle.index()]
    }

    /// Checks the cross-tensor shape invariants.
    pub fn validate(&self) -> Result<()> {
        if self.encoder.is_empty() {
            return Err(Error::Integrity("encoder has no layers".into()));
        }
        for pair in self.encoder.windows(2) {
            if pair[0].fan_out() != pair[1].fan_in() {
                return Err(Error::Integrity("encoder layers do not chain".into()));
            }
        }
        for layer in self.encoder.iter().chain(&self.heads) {
            if layer.bias.shape() != (1, layer.fan_out()) {
                return Err(Error::Integrity("bias shape does not match weight".into()));
            }
        }
        let c = self.num_bins();
        if self
            .heads
            .iter()
            .any(|h| h.fan_in() != self.latent_dim() || h.fan_out() != c)
        {
            return Err(Error::Integrity("heads disagree on latent width or bin count".into()));
        }
        if let Some(centers) = &self.centers {
            if centers.cols() != self.latent_dim() {
                return Err(Error::Integrity("cluster centers have wrong latent width".into()));
            }
        }
        Ok(())
    }

    /// Stable tensor names in checkpoint order.
    pub fn tensor_names(&self) -> Vec<String> {
        self.tensors().into_iter().map(|(n, _)| n).collect()
    }

    pub fn tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out = Vec::new();
        for (i, layer) in self.encoder.iter().enumerate() {
            out.push((format!("encoder.{i}.weight"), &layer.weight));
            out.push((format!("encoder.{i}.bias"), &layer.bias));
        }
        for angle in Angle::ALL {
            let head = &self.heads[angle.index()];
            out.push((format!("head.{}.weight", angle.name()), &head.weight));
            out.push((format!("head.{}.bias", angle.name()), &head.bias));
        }
        if let Some(c) = &self.centers {
            out.push((CENTERS.to_string(), c));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let mut out = Vec::new();
        for (i, layer) in self.encoder.iter_mut().enumerate() {
            out.push((format!("encoder.{i}.weight"), &mut layer.weight));
            out.push((format!("encoder.{i}.bias"), &mut layer.bias));
        }
        for (angle, head) in Angle::ALL.into_iter().zip(self.heads.iter_mut()) {
            out.push((format!("head.{}.weight", angle.name()), &mut head.weight));
            out.push((format!("head.{}.bias", angle.name()), &mut head.bias));
        }
        if let Some(c) = &mut self.centers {
            out.push((CENTERS.to_string(), c));
        }
        out
    }

    /// Registers every tensor on `tape`, as differentiable leaves when
    /// `trainable`, otherwise as constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundParams {
        let mut leaf = |m: &Matrix| {
            if trainable {
                tape.param(m.clone())
            } else {
                tape.constant(m.clone())
            }
        };
        let encoder = self.encoder.iter().map(|l| (leaf(&l.weight), leaf(&l.bias))).collect();
        let heads = std::array::from_fn(|i| (leaf(&self.heads[i].weight), leaf(&self.heads[i].bias)));
        let centers = self.centers.as_ref().map(&mut leaf);
        BoundParams {
            encoder,
            heads,
            centers,
        }
    }
}

pub const CENTERS: &str = "clusters.centers";

/// Tape handles for one [`ModelParams::bind`] call.
#[derive(Debug, Clone)]
pub struct BoundParams {
    pub encoder: Vec<(NodeId, NodeId)>,
    pub heads: [(NodeId, NodeId); 3],
    pub centers: Option<NodeId>,
}

impl BoundParams {
    /// `(name, node)` pairs in the same order as [`ModelParams::tensors`].
    pub fn named(&self) -> Vec<(String, NodeId)> {
        let mut out = Vec::new();
        for (i, (w, b)) in self.encoder.iter().enumerate() {
            out.push((format!("encoder.{i}.weight"), *w));
            out.push((format!("encoder.{i}.bias"), *b));
        }
        for angle in Angle::ALL {
            let (w, b) = self.heads[angle.index()];
            out.push((format!("head.{}.weight", angle.name()), w));
            out.push((format!("head.{}.bias", angle.name()), b));
        }
        if let Some(c) = self.centers {
            out.push((CENTERS.to_string(), c));
        }
        out
    }
}

/// Affine + ReLU through the hidden layers, then an affine latent layer with
/// no activation.
pub fn encode(tape: &mut Tape, params: &BoundParams, batch: NodeId) -> Result<NodeId> {
    let last = params.encoder.len() - 1;
    let mut x = batch;
    for (i, &(w, b)) in params.encoder.iter().enumerate() {
        let z = tape.matmul(x, w)?;
        x = tape.add_row_bias(z, b)?;
        if i < last {
            x = tape.relu(x)?;
        }
    }
    Ok(x)
}

/// Three independent affine maps from latents to bin logits.
pub fn angle_heads(tape: &mut Tape, params: &BoundParams, latents: NodeId) -> Result<[NodeId; 3]> {
    let mut out = [latents; 3];
    for (slot, &(w, b)) in out.iter_mut().zip(&params.heads) {
        let z = tape.matmul(latents, w)?;
        *slot = tape.add_row_bias(z, b)?;
    }
    Ok(out)
}

/// Frozen forward pass returning the latent batch and the three logit matrices.
pub fn forward_frozen(params: &ModelParams, batch: &Matrix) -> Result<(Matrix, [Matrix; 3])> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let x = tape.constant(batch.clone());
    let latents = encode(&mut tape, &bound, x)?;
    let logits = angle_heads(&mut tape, &bound, latents)?;
    Ok((tape.value(latents).clone(), logits.map(|l| tape.value(l).clone())))
}

/// Frozen encoder output for a batch.
pub fn encode_frozen(params: &ModelParams, batch: &Matrix) -> Result<Matrix> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let x = tape.constant(batch.clone());
    let latents = encode(&mut tape, &bound, x)?;
    Ok(tape.value(latents).clone())
}
