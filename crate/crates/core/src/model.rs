//! The small convolutional classifier used for both teacher and student.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One 3×3 convolution with ReLU and an optional 2×2 average pool.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvBlock {
    pub out_channels: usize,
    #[serde(default = "one")]
    pub stride: usize,
    #[serde(default)]
    pub pool: bool,
}

fn one() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSpec {
    pub input_channels: usize,
    pub input_size: usize,
    pub blocks: Vec<ConvBlock>,
    pub num_classes: usize,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            input_channels: 1,
            input_size: 32,
            blocks: vec![
                ConvBlock { out_channels: 8, stride: 1, pool: true },
                ConvBlock { out_channels: 16, stride: 1, pool: true },
            ],
            num_classes: 2,
        }
    }
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        self.feature_dims().map(|_| ())
    }

    /// `(C, W, H)` of the last conv block's output for one sample.
    pub fn feature_dims(&self) -> Result<(usize, usize, usize)> {
        if self.input_channels == 0 || self.input_size == 0 {
            return Err(Error::config("model input dimensions must be positive"));
        }
        if self.blocks.is_empty() {
            return Err(Error::config("model needs at least one conv block"));
        }
        if self.num_classes < 2 {
            return Err(Error::config("model needs at least two classes"));
        }
        let mut c = self.input_channels;
        let mut s = self.input_size;
        for (i, b) in self.blocks.iter().enumerate() {
            if b.out_channels == 0 || b.stride == 0 {
                return Err(Error::config(format!("block {i}: channels and stride must be positive")));
            }
            c = b.out_channels;
            s = (s - 1) / b.stride + 1;
            if b.pool {
                if !s.is_multiple_of(2) {
                    return Err(Error::config(format!("block {i}: cannot pool odd side {s}")));
                }
                s /= 2;
            }
        }
        Ok((c, s, s))
    }

    /// Names and shapes of every parameter tensor, in storage order.
    pub fn param_shapes(&self) -> Result<Vec<(String, Vec<usize>)>> {
        let (c_last, _, _) = self.feature_dims()?;
        let mut out = Vec::new();
        let mut cin = self.input_channels;
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("block{i}.weight"), vec![b.out_channels, cin * 9]));
            out.push((format!("block{i}.bias"), vec![b.out_channels]));
            cin = b.out_channels;
        }
        out.push(("head.weight".into(), vec![self.num_classes, c_last]));
        out.push(("head.bias".into(), vec![self.num_classes]));
        Ok(out)
    }

    /// SHA-256 of the canonical JSON encoding, hex.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("model spec serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }

    /// He-normal conv weights, `N(0, 1/fan_in)` head weights, zero biases.
    pub fn init(&self, seed: u64) -> Result<ModelParams> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shapes = self.param_shapes()?;
        let mut tensors = Vec::with_capacity(shapes.len());
        for (name, shape) in &shapes {
            let t = if name.ends_with(".bias") {
                Tensor::zeros(shape)
            } else {
                let fan_in = shape[1] as f64;
                let gain = if name.starts_with("head") { 1.0 } else { 2.0 };
                let normal = Normal::new(0.0, (gain / fan_in).sqrt()).expect("positive std");
                let n: usize = shape.iter().product();
                Tensor::new(shape.clone(), (0..n).map(|_| normal.sample(&mut rng)).collect())?
            };
            tensors.push(t);
        }
        Ok(ModelParams { names: shapes.into_iter().map(|(n, _)| n).collect(), tensors })
    }

    /// All-zero parameters.
    pub fn zeros(&self) -> Result<ModelParams> {
        let shapes = self.param_shapes()?;
        Ok(ModelParams {
            tensors: shapes.iter().map(|(_, s)| Tensor::zeros(s)).collect(),
            names: shapes.into_iter().map(|(n, _)| n).collect(),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor>,
}

impl ModelParams {
    /// Checks that the tensors match `spec` in number and shape.
    pub fn check(&self, spec: &ModelSpec) -> Result<()> {
        let shapes = spec.param_shapes()?;
        if shapes.len() != self.tensors.len() {
            return Err(Error::dim(format!(
                "model expects {} parameter tensors, got {}",
                shapes.len(),
                self.tensors.len()
            )));
        }
        for ((name, shape), t) in shapes.iter().zip(&self.tensors) {
            if t.shape() != shape.as_slice() {
                return Err(Error::dim(format!("{name}: expected {shape:?}, got {:?}", t.shape())));
            }
        }
        Ok(())
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }
}

/// Nodes produced by one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardOutput {
    /// `[N, classes]`.
    pub logits: Var,
    /// Last conv block output, `[N, C, W, H]`.
    pub features: Var,
    /// Global-average-pooled features, `[N, C]`.
    pub pooled: Var,
}

/// Records the network on `tape`. `params` are nodes holding the
/// [`ModelParams`] tensors in order; `images` is `[N, C, S, S]`.
pub fn forward(tape: &mut Tape, spec: &ModelSpec, params: &[Var], images: Var) -> Result<ForwardOutput> {
    let expected = 2 * spec.blocks.len() + 2;
    if params.len() != expected {
        return Err(Error::dim(format!("expected {expected} parameter nodes, got {}", params.len())));
    }
    match tape.value(images).shape() {
        &[_, c, w, h] if c == spec.input_channels && w == spec.input_size && h == spec.input_size => {}
        other => {
            return Err(Error::dim(format!(
                "input batch {other:?} does not match [N, {}, {}, {}]",
                spec.input_channels, spec.input_size, spec.input_size
            )))
        }
    }
    let mut x = images;
    for (i, b) in spec.blocks.iter().enumerate() {
        x = tape.conv2d(x, params[2 * i], params[2 * i + 1], b.stride)?;
        x = tape.relu(x);
        if b.pool {
            x = tape.avg_pool2(x)?;
        }
    }
    let pooled = tape.global_avg_pool(x)?;
    let k = spec.blocks.len();
    let logits = tape.linear(pooled, params[2 * k], params[2 * k + 1])?;
    Ok(ForwardOutput { logits, features: x, pooled })
}

/// Stacks same-shape `C×S×S` images into a `[N, C, S, S]` batch.
pub fn stack_images(images: &[&Tensor]) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::data("empty batch"))?;
    let shape = first.shape().to_vec();
    let mut data = Vec::with_capacity(images.len() * first.len());
    for img in images {
        if img.shape() != shape.as_slice() {
            return Err(Error::dim(format!("image {:?} differs from {:?}", img.shape(), shape)));
        }
        data.extend_from_slice(img.data());
    }
    let mut full = vec![images.len()];
    full.extend(shape);
    Tensor::new(full, data)
}

/// Per-sample outputs of a gradient-free forward pass.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Inference {
    pub logits: Vec<Vec<f64>>,
    pub pooled: Vec<Vec<f64>>,
    /// `C×W×H` backbone features.
    pub features: Vec<Tensor>,
}

/// Runs the network over `images` in chunks of `chunk` samples.
pub fn infer(spec: &ModelSpec, params: &ModelParams, images: &[Tensor], chunk: usize) -> Result<Inference> {
    params.check(spec)?;
    let mut out = Inference::default();
    for batch in images.chunks(chunk.max(1)) {
        let mut tape = Tape::new();
        let p: Vec<Var> = params.tensors.iter().map(|t| tape.constant(t.clone())).collect();
        let refs: Vec<&Tensor> = batch.iter().collect();
        let x = tape.constant(stack_images(&refs)?);
        let fo = forward(&mut tape, spec, &p, x)?;
        let logits = tape.value(fo.logits);
        let k = logits.shape()[1];
        out.logits.extend(logits.data().chunks_exact(k).map(<[f64]>::to_vec));
        let pooled = tape.value(fo.pooled);
        let c = pooled.shape()[1];
        out.pooled.extend(pooled.data().chunks_exact(c).map(<[f64]>::to_vec));
        let feats = tape.value(fo.features);
        let fshape = feats.shape()[1..].to_vec();
        let per: usize = fshape.iter().product();
        for f in feats.data().chunks_exact(per) {
            out.features.push(Tensor::new(fshape.clone(), f.to_vec())?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny() -> ModelSpec {
        ModelSpec {
            input_channels: 1,
            input_size: 8,
            blocks: vec![ConvBlock { out_channels: 2, stride: 1, pool: true }, ConvBlock { out_channels: 3, stride: 1, pool: false }],
            num_classes: 2,
        }
    }

    fn random_images(rng: &mut ChaCha8Rng, n: usize, s: usize) -> Vec<Tensor> {
        (0..n)
            .map(|_| Tensor::feature(1, s, s, (0..s * s).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap())
            .collect()
    }

    #[test]
    fn default_feature_dims() {
        assert_eq!(ModelSpec::default().feature_dims().unwrap(), (16, 8, 8));
    }

    #[test]
    fn zero_weights_give_uniform_logits() {
        let spec = ModelSpec::default();
        let params = spec.zeros().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let inf = infer(&spec, &params, &random_images(&mut rng, 3, 32), 8).unwrap();
        for row in &inf.logits {
            assert_eq!(row, &vec![0.0, 0.0]);
        }
    }

    #[test]
    fn duplicate_samples_match() {
        let spec = tiny();
        let params = spec.init(3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut imgs = random_images(&mut rng, 3, 8);
        imgs.push(imgs[1].clone());
        let inf = infer(&spec, &params, &imgs, 16).unwrap();
        assert_eq!(inf.logits[1], inf.logits[3]);
        assert_eq!(inf.features[1], inf.features[3]);
    }

    #[test]
    fn activations_finite_over_seeds() {
        let spec = ModelSpec::default();
        for seed in 0..100 {
            let params = spec.init(seed).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
            let inf = infer(&spec, &params, &random_images(&mut rng, 2, 32), 2).unwrap();
            assert!(inf.logits.iter().flatten().all(|v| v.is_finite()));
            assert!(inf.features.iter().all(Tensor::all_finite));
        }
    }

    #[test]
    fn wrong_input_shape() {
        let spec = tiny();
        let params = spec.init(0).unwrap();
        let img = Tensor::zeros(&[1, 16, 16]);
        assert!(matches!(infer(&spec, &params, &[img], 1), Err(Error::Dimension(_))));
    }

    #[test]
    fn param_check_rejects_mismatch() {
        let mut p = tiny().init(0).unwrap();
        p.tensors[0] = Tensor::zeros(&[1, 1]);
        assert!(matches!(p.check(&tiny()), Err(Error::Dimension(_))));
    }

    #[test]
    fn hash_changes_with_spec() {
        let a = ModelSpec::default();
        let mut b = a.clone();
        b.blocks[0].out_channels = 4;
        assert_eq!(a.hash(), a.clone().hash());
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }
}
