//! Meta-learner network families, parameter layout and loss evaluation.
//!
//! Two families exist: a ReLU MLP and a four-block convolutional stack
//! (3×3 conv → bias → ReLU → 2×2 max pool per block, then a linear
//! classifier). Blocks carry a bias instead of batch normalization so that
//! weight rewinding has no hidden running statistics to reconcile.

mod checkpoint;
mod params;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint};
pub use params::{count_params, count_prunable, Param, ParamCount, ParameterSet, Role};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{FamError, Result};
use crate::tensor::{pooled_dim, Dual, Scalar, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    Mlp,
    Conv4,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Mlp => "mlp",
            ModelKind::Conv4 => "conv4",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mlp" => Ok(ModelKind::Mlp),
            "conv4" => Ok(ModelKind::Conv4),
            other => Err(FamError::Config(format!("unknown model kind `{other}`"))),
        }
    }
}

/// Architecture description. For `Mlp`, `hidden` lists hidden layer widths;
/// for `Conv4`, it lists the filter count of each of the four blocks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub input_shape: Vec<usize>,
    pub hidden: Vec<usize>,
    pub num_classes: usize,
}

impl ModelSpec {
    pub fn mlp(input_shape: &[usize], hidden: &[usize], num_classes: usize) -> Result<Self> {
        let spec = ModelSpec {
            kind: ModelKind::Mlp,
            input_shape: input_shape.to_vec(),
            hidden: hidden.to_vec(),
            num_classes,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn conv4(input_shape: &[usize], filters: usize, num_classes: usize) -> Result<Self> {
        let spec = ModelSpec {
            kind: ModelKind::Conv4,
            input_shape: input_shape.to_vec(),
            hidden: vec![filters; 4],
            num_classes,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Desk-scale convolutional default: 8 filters on 1×12×12 inputs.
    pub fn desk_conv4(num_classes: usize) -> Result<Self> {
        Self::conv4(&[1, 12, 12], 8, num_classes)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(FamError::Config("num_classes must be at least 2".into()));
        }
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(FamError::Config(format!(
                "invalid input shape {:?}",
                self.input_shape
            )));
        }
        if self.hidden.contains(&0) {
            return Err(FamError::Config("layer sizes must be positive".into()));
        }
        if self.kind == ModelKind::Conv4 {
            if self.input_shape.len() != 3 {
                return Err(FamError::Config(
                    "conv4 expects a [C, H, W] input shape".into(),
                ));
            }
            if self.hidden.len() != 4 {
                return Err(FamError::Config(
                    "conv4 has exactly four convolutional blocks".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    /// Spatial size `(h, w)` after each of the four pooling stages.
    pub fn conv_spatial_dims(&self) -> Vec<(usize, usize)> {
        let (mut h, mut w) = (self.input_shape[1], self.input_shape[2]);
        (0..4)
            .map(|_| {
                h = pooled_dim(h);
                w = pooled_dim(w);
                (h, w)
            })
            .collect()
    }

    /// Width of the input to the final linear classifier.
    pub fn classifier_input(&self) -> usize {
        match self.kind {
            ModelKind::Mlp => *self.hidden.last().unwrap_or(&self.input_len()),
            ModelKind::Conv4 => {
                let (h, w) = *self.conv_spatial_dims().last().unwrap();
                self.hidden[3] * h * w
            }
        }
    }

    /// Canonical one-line description, also the input of [`Self::hash`].
    pub fn describe(&self) -> String {
        format!(
            "{} in={:?} hidden={:?} classes={}",
            self.kind.as_str(),
            self.input_shape,
            self.hidden,
            self.num_classes
        )
    }

    pub fn hash(&self) -> u64 {
        let digest = Sha256::digest(self.describe().as_bytes());
        let mut bytes = [0u8; 8];
        bytes.copy_from_slice(&digest[..8]);
        u64::from_le_bytes(bytes)
    }

    /// Names, roles, shapes and fan-in of every tensor in declaration order.
    pub fn layout(&self) -> Vec<(String, Role, Vec<usize>, usize)> {
        let mut out = Vec::new();
        match self.kind {
            ModelKind::Mlp => {
                let mut widths = vec![self.input_len()];
                widths.extend(&self.hidden);
                widths.push(self.num_classes);
                for (i, pair) in widths.windows(2).enumerate() {
                    out.push((format!("fc{i}.weight"), Role::Weight, vec![pair[0], pair[1]], pair[0]));
                    out.push((format!("fc{i}.bias"), Role::Bias, vec![pair[1]], pair[0]));
                }
            }
            ModelKind::Conv4 => {
                let mut c = self.input_shape[0];
                for (i, &f) in self.hidden.iter().enumerate() {
                    out.push((format!("conv{i}.weight"), Role::Weight, vec![f, c, 3, 3], c * 9));
                    out.push((format!("conv{i}.bias"), Role::Bias, vec![f], c * 9));
                    c = f;
                }
                let d = self.classifier_input();
                out.push(("fc.weight".into(), Role::Weight, vec![d, self.num_classes], d));
                out.push(("fc.bias".into(), Role::Bias, vec![self.num_classes], d));
            }
        }
        out
    }
}

/// Deterministic initialization: weights uniform in ±sqrt(6 / fan_in),
/// biases zero.
pub fn init_params(spec: &ModelSpec, seed: u64) -> Result<ParameterSet> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::new();
    for (name, role, shape, fan_in) in spec.layout() {
        let n: usize = shape.iter().product();
        let data = match role {
            Role::Bias => vec![0.0; n],
            Role::Weight => {
                let bound = (6.0 / fan_in as f64).sqrt();
                (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
            }
        };
        entries.push(Param {
            name,
            role,
            tensor: Tensor::from_vec(&shape, data)?,
        });
    }
    ParameterSet::new(entries)
}

/// A labeled batch: inputs stacked as `[B, ...input_shape]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(inputs: Tensor, labels: Vec<usize>) -> Result<Self> {
        if inputs.shape()[0] != labels.len() {
            return Err(FamError::Dimension {
                op: "batch",
                left: inputs.shape().to_vec(),
                right: vec![labels.len()],
            });
        }
        Ok(Batch { inputs, labels })
    }

    /// Stacks equally shaped examples into one batch.
    pub fn stack<'a>(examples: impl IntoIterator<Item = (&'a Tensor, usize)>) -> Result<Self> {
        let mut data = Vec::new();
        let mut labels = Vec::new();
        let mut shape: Option<Vec<usize>> = None;
        for (x, y) in examples {
            match &shape {
                None => shape = Some(x.shape().to_vec()),
                Some(s) if s.as_slice() != x.shape() => {
                    return Err(FamError::Dimension {
                        op: "stack",
                        left: s.clone(),
                        right: x.shape().to_vec(),
                    })
                }
                _ => {}
            }
            data.extend_from_slice(x.data());
            labels.push(y);
        }
        let Some(mut shape) = shape else {
            return Err(FamError::Input("cannot stack an empty batch".into()));
        };
        shape.insert(0, labels.len());
        Batch::new(Tensor::new(shape, data)?, labels)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Example `i` as an unbatched tensor.
    pub fn example(&self, i: usize) -> Tensor {
        let per = self.inputs.len() / self.len();
        Tensor::from_vec(
            &self.inputs.shape()[1..],
            self.inputs.data()[i * per..(i + 1) * per].to_vec(),
        )
        .expect("batch layout")
    }
}

/// A differentiable loss over a parameter set, as consumed by the meta-learning
/// and personalization loops.
pub trait Objective {
    fn loss_and_grad(&self, params: &ParameterSet, batch: &Batch) -> Result<(f64, ParameterSet)>;

    /// Hessian of the loss applied to `v`.
    fn hessian_vector(
        &self,
        _params: &ParameterSet,
        _batch: &Batch,
        _v: &ParameterSet,
    ) -> Result<ParameterSet> {
        Err(FamError::Contract(
            "this objective does not provide second-order information".into(),
        ))
    }
}

/// A network of a given [`ModelSpec`] paired with mean cross-entropy loss.
#[derive(Clone, Debug)]
pub struct Model {
    spec: ModelSpec,
}

impl Model {
    pub fn new(spec: ModelSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Model { spec })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    fn check_batch(&self, params: &ParameterSet, batch: &Batch) -> Result<()> {
        if batch.is_empty() {
            return Err(FamError::Input("empty batch".into()));
        }
        if batch.inputs.shape()[1..] != self.spec.input_shape[..] {
            return Err(FamError::Dimension {
                op: "forward",
                left: batch.inputs.shape().to_vec(),
                right: self.spec.input_shape.clone(),
            });
        }
        if let Some(&bad) = batch.labels.iter().find(|&&l| l >= self.spec.num_classes) {
            return Err(FamError::Input(format!(
                "label {bad} out of range for {} classes",
                self.spec.num_classes
            )));
        }
        let layout = self.spec.layout();
        let congruent = layout.len() == params.len()
            && layout
                .iter()
                .zip(params.iter())
                .all(|((name, _, shape, _), p)| *name == p.name && shape.as_slice() == p.tensor.shape());
        if !congruent {
            return Err(FamError::Contract(format!(
                "parameter set does not match model `{}`",
                self.spec.describe()
            )));
        }
        Ok(())
    }

    /// Records the network on `tape` and returns the `[B, classes]` logits.
    fn logits<S: Scalar>(&self, tape: &mut Tape<S>, params: &[Var], x: Var, batch: usize) -> Result<Var> {
        match self.spec.kind {
            ModelKind::Mlp => {
                let mut h = tape.reshape(x, &[batch, self.spec.input_len()])?;
                let layers = params.len() / 2;
                for l in 0..layers {
                    h = tape.matmul(h, params[2 * l])?;
                    h = tape.add_bias(h, params[2 * l + 1])?;
                    if l + 1 < layers {
                        h = tape.relu(h);
                    }
                }
                Ok(h)
            }
            ModelKind::Conv4 => {
                let mut h = x;
                for block in 0..4 {
                    h = tape.conv2d(h, params[2 * block])?;
                    h = tape.add_channel_bias(h, params[2 * block + 1])?;
                    h = tape.relu(h);
                    h = tape.max_pool_2x2(h)?;
                }
                h = tape.reshape(h, &[batch, self.spec.classifier_input()])?;
                h = tape.matmul(h, params[8])?;
                tape.add_bias(h, params[9])
            }
        }
    }

    /// Mean cross-entropy loss and the `[B, classes]` logits.
    pub fn forward_loss(&self, params: &ParameterSet, batch: &Batch) -> Result<(f64, Tensor)> {
        self.check_batch(params, batch)?;
        let mut tape = Tape::<f64>::new();
        let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.tensor.clone())).collect();
        let x = tape.leaf(batch.inputs.clone());
        let logits = self.logits(&mut tape, &vars, x, batch.len())?;
        let loss = tape.softmax_cross_entropy(logits, &batch.labels)?;
        let value = tape.value(loss).data()[0];
        if !value.is_finite() {
            return Err(FamError::numeric("forward loss"));
        }
        Ok((value, tape.value(logits).clone()))
    }

    pub fn logits_of(&self, params: &ParameterSet, inputs: &Tensor) -> Result<Tensor> {
        let b = inputs.shape()[0];
        let batch = Batch::new(inputs.clone(), vec![0; b])?;
        self.forward_loss(params, &batch).map(|(_, logits)| logits)
    }

    /// Arg-max class per example (lowest index wins ties).
    pub fn predict(&self, params: &ParameterSet, inputs: &Tensor) -> Result<Vec<usize>> {
        let logits = self.logits_of(params, inputs)?;
        let c = self.spec.num_classes;
        Ok(logits
            .data()
            .chunks(c)
            .map(|row| {
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect())
    }

    /// Arg-max restricted to the output columns `classes`, returned as a
    /// position in `classes`. Lets a model with more outputs than an
    /// episode's way answer that episode.
    pub fn predict_among(&self, params: &ParameterSet, inputs: &Tensor, classes: &[usize]) -> Result<Vec<usize>> {
        let c = self.spec.num_classes;
        if classes.is_empty() || classes.iter().any(|&k| k >= c) {
            return Err(FamError::Input(format!("classes {classes:?} outside a {c}-output model")));
        }
        let logits = self.logits_of(params, inputs)?;
        Ok(logits
            .data()
            .chunks(c)
            .map(|row| {
                let mut best = 0;
                for (j, &k) in classes.iter().enumerate() {
                    if row[k] > row[classes[best]] {
                        best = j;
                    }
                }
                best
            })
            .collect())
    }

    fn gradient_pass<S: Scalar>(
        &self,
        leaves: Vec<Tensor<S>>,
        batch: &Batch,
    ) -> Result<(S, Vec<Tensor<S>>)> {
        let mut tape = Tape::<S>::new();
        let vars: Vec<Var> = leaves.into_iter().map(|t| tape.leaf(t)).collect();
        let x = tape.leaf(batch.inputs.map(S::from_f64));
        let logits = self.logits(&mut tape, &vars, x, batch.len())?;
        let loss = tape.softmax_cross_entropy(logits, &batch.labels)?;
        let grads = tape.backward(loss)?;
        let value = tape.value(loss).data()[0];
        Ok((value, vars.iter().map(|&v| grads.wrt(v)).collect()))
    }
}

fn rebuild(template: &ParameterSet, tensors: Vec<Tensor>) -> Result<ParameterSet> {
    ParameterSet::new(
        template
            .iter()
            .zip(tensors)
            .map(|(p, t)| Param {
                name: p.name.clone(),
                role: p.role,
                tensor: t,
            })
            .collect(),
    )
}

impl Objective for Model {
    fn loss_and_grad(&self, params: &ParameterSet, batch: &Batch) -> Result<(f64, ParameterSet)> {
        self.check_batch(params, batch)?;
        let leaves = params.iter().map(|p| p.tensor.clone()).collect();
        let (loss, grads) = self.gradient_pass::<f64>(leaves, batch)?;
        if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            return Err(FamError::numeric("loss gradient"));
        }
        Ok((loss, rebuild(params, grads)?))
    }

    /// Exact Hessian-vector product by running the reverse pass over dual
    /// numbers whose tangent is `v`.
    fn hessian_vector(
        &self,
        params: &ParameterSet,
        batch: &Batch,
        v: &ParameterSet,
    ) -> Result<ParameterSet> {
        self.check_batch(params, batch)?;
        params.check_congruent(v, "hessian_vector")?;
        let leaves = params
            .iter()
            .zip(v.iter())
            .map(|(p, d)| p.tensor.to_dual(&d.tensor))
            .collect::<Result<Vec<Tensor<Dual>>>>()?;
        let (_, grads) = self.gradient_pass::<Dual>(leaves, batch)?;
        let hv: Vec<Tensor> = grads.iter().map(|g| g.tangent()).collect();
        if hv.iter().any(|t| !t.is_finite()) {
            return Err(FamError::numeric("hessian-vector product"));
        }
        rebuild(params, hv)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mlp_spec() -> ModelSpec {
        ModelSpec::mlp(&[4], &[8], 3).unwrap()
    }

    #[test]
    fn mlp_parameter_count() {
        let p = init_params(&mlp_spec(), 0).unwrap();
        assert_eq!(p.total_count(), 4 * 8 + 8 + 8 * 3 + 3);
        assert_eq!(p.total_count(), 67);
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let a = init_params(&mlp_spec(), 9).unwrap();
        let b = init_params(&mlp_spec(), 9).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
        for p in a.iter().filter(|p| p.role == Role::Bias) {
            assert!(p.tensor.data().iter().all(|&v| v == 0.0));
        }
        let weights = count_prunable(&a);
        assert_eq!(weights.nonzero, weights.total);
        let c = init_params(&mlp_spec(), 10).unwrap();
        assert_ne!(a.to_bits(), c.to_bits());
    }

    #[test]
    fn init_respects_fan_in_bound() {
        let spec = ModelSpec::desk_conv4(5).unwrap();
        let p = init_params(&spec, 3).unwrap();
        for (param, (_, _, _, fan_in)) in p.iter().zip(spec.layout()) {
            let bound = (6.0 / fan_in as f64).sqrt();
            assert!(param.tensor.data().iter().all(|v| v.abs() <= bound));
        }
    }

    #[test]
    fn conv4_spatial_chain() {
        let spec = ModelSpec::desk_conv4(2).unwrap();
        assert_eq!(spec.conv_spatial_dims(), vec![(6, 6), (3, 3), (1, 1), (1, 1)]);
        assert_eq!(spec.classifier_input(), 8);
        let full_size = ModelSpec::conv4(&[3, 84, 84], 64, 5).unwrap();
        assert_eq!(full_size.classifier_input(), 64 * 5 * 5);
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(ModelSpec::mlp(&[4], &[8], 1).is_err());
        assert!(ModelSpec::mlp(&[4], &[0], 3).is_err());
        assert!(ModelSpec::conv4(&[12, 12], 8, 3).is_err());
    }

    #[test]
    fn uniform_logits_give_log_n() {
        let spec = mlp_spec();
        let model = Model::new(spec.clone()).unwrap();
        let mut p = init_params(&spec, 1).unwrap();
        for e in p.entries_mut().iter_mut().filter(|e| e.name == "fc1.weight") {
            e.tensor = Tensor::zeros(e.tensor.shape());
        }
        let batch = Batch::new(Tensor::zeros(&[2, 4]), vec![0, 2]).unwrap();
        let (loss, logits) = model.forward_loss(&p, &batch).unwrap();
        assert!((loss - 3f64.ln()).abs() < 1e-12);
        assert_eq!(logits.shape(), &[2, 3]);
    }

    #[test]
    fn saturated_logits_give_small_loss() {
        let spec = ModelSpec::mlp(&[2], &[], 2).unwrap();
        let model = Model::new(spec.clone()).unwrap();
        let mut p = init_params(&spec, 0).unwrap();
        p.entries_mut()[0].tensor = Tensor::from_vec(&[2, 2], vec![20.0, -20.0, 0.0, 0.0]).unwrap();
        let batch = Batch::new(Tensor::from_vec(&[1, 2], vec![1.0, 0.0]).unwrap(), vec![0]).unwrap();
        let (loss, _) = model.forward_loss(&p, &batch).unwrap();
        assert!(loss < 0.01);
    }

    #[test]
    fn label_out_of_range() {
        let spec = mlp_spec();
        let model = Model::new(spec.clone()).unwrap();
        let p = init_params(&spec, 1).unwrap();
        let batch = Batch::new(Tensor::zeros(&[1, 4]), vec![3]).unwrap();
        assert!(matches!(model.forward_loss(&p, &batch), Err(FamError::Input(_))));
    }

    #[test]
    fn flatten_roundtrip() {
        let p = init_params(&ModelSpec::desk_conv4(3).unwrap(), 5).unwrap();
        assert_eq!(p.unflatten(&p.flatten()).unwrap(), p);
    }

    #[test]
    fn stack_rejects_mixed_shapes() {
        let a = Tensor::zeros(&[2]);
        let b = Tensor::zeros(&[3]);
        assert!(Batch::stack([(&a, 0), (&b, 1)]).is_err());
        let batch = Batch::stack([(&a, 0), (&a, 1)]).unwrap();
        assert_eq!(batch.inputs.shape(), &[2, 2]);
        assert_eq!(batch.example(1), a);
    }
}
