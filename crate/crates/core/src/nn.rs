//! Parameterized building blocks. Each block owns only its name prefix and
//! shape; tensors live in a [`NamedTensorSet`] and are pulled onto a
//! [`Graph`] during the forward pass.

use rand::Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::kernels::ConvSpec;
use crate::params::NamedTensorSet;
use crate::tensor::{Scalar, Tensor};

pub const LEAKY_SLOPE: f64 = 0.1;

pub(crate) fn uniform<S: Scalar, R: Rng>(rng: &mut R, shape: &[usize], bound: f64) -> Tensor<S> {
    Tensor::from_fn(shape, |_| S::of(rng.gen_range(-bound..=bound)))
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub spec: ConvSpec,
    pub bias: bool,
}

impl Conv {
    pub fn new(name: impl Into<String>, cin: usize, cout: usize, kernel: usize, spec: ConvSpec) -> Self {
        Self {
            name: name.into(),
            cin,
            cout,
            kernel,
            spec,
            bias: true,
        }
    }

    pub fn without_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    /// Depthwise convolution, one filter per channel.
    pub fn depthwise(name: impl Into<String>, channels: usize, kernel: usize) -> Self {
        Self::new(
            name,
            channels,
            channels,
            kernel,
            ConvSpec {
                groups: channels,
                ..ConvSpec::same(kernel)
            },
        )
    }

    pub fn pointwise(name: impl Into<String>, cin: usize, cout: usize) -> Self {
        Self::new(name, cin, cout, 1, ConvSpec::default())
    }

    pub fn weight_name(&self) -> String {
        format!("{}.w", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.b", self.name)
    }

    pub fn init<S: Scalar, R: Rng>(&self, store: &mut NamedTensorSet<S>, rng: &mut R) {
        let cg = self.cin / self.spec.groups;
        let fan_in = (cg * self.kernel * self.kernel) as f64;
        let bound = 1.0 / fan_in.sqrt();
        store.insert(
            self.weight_name(),
            uniform(rng, &[self.cout, cg, self.kernel, self.kernel], bound),
            true,
        );
        if self.bias {
            store.insert(self.bias_name(), uniform(rng, &[self.cout], bound), true);
        }
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, x: Var) -> Result<Var> {
        let w = g.param(&self.weight_name())?;
        let b = if self.bias {
            Some(g.param(&self.bias_name())?)
        } else {
            None
        };
        g.conv2d(x, w, b, self.spec)
    }
}

/// Convolution, batch normalization, leaky rectification (slope 0.1).
#[derive(Clone, Debug)]
pub struct Cbl {
    pub conv: Conv,
    pub bn: String,
}

impl Cbl {
    pub fn new(name: &str, cin: usize, cout: usize, kernel: usize, spec: ConvSpec) -> Self {
        Self {
            conv: Conv::new(format!("{name}.conv"), cin, cout, kernel, spec).without_bias(),
            bn: format!("{name}.bn"),
        }
    }

    /// Stride-1 CBL with "same" padding.
    pub fn same(name: &str, cin: usize, cout: usize, kernel: usize) -> Self {
        Self::new(name, cin, cout, kernel, ConvSpec::same(kernel))
    }

    pub fn init<S: Scalar, R: Rng>(&self, store: &mut NamedTensorSet<S>, rng: &mut R) {
        self.conv.init(store, rng);
        let c = self.conv.cout;
        store.insert(format!("{}.gamma", self.bn), Tensor::full(&[c], S::one()), true);
        store.insert(format!("{}.beta", self.bn), Tensor::zeros(&[c]), true);
        store.insert(format!("{}.running_mean", self.bn), Tensor::zeros(&[c]), false);
        store.insert(format!("{}.running_var", self.bn), Tensor::full(&[c], S::one()), false);
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, x: Var) -> Result<Var> {
        let y = self.conv.forward(g, x)?;
        let gamma = g.param(&format!("{}.gamma", self.bn))?;
        let beta = g.param(&format!("{}.beta", self.bn))?;
        let y = g.batch_norm(y, gamma, beta, &self.bn)?;
        Ok(g.leaky_relu(y, LEAKY_SLOPE))
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub name: String,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    pub fn new(name: impl Into<String>, din: usize, dout: usize) -> Self {
        Self {
            name: name.into(),
            din,
            dout,
        }
    }

    pub fn init<S: Scalar, R: Rng>(&self, store: &mut NamedTensorSet<S>, rng: &mut R) {
        let bound = 1.0 / (self.din as f64).sqrt();
        store.insert(format!("{}.w", self.name), uniform(rng, &[self.dout, self.din], bound), true);
        store.insert(format!("{}.b", self.name), uniform(rng, &[self.dout], bound), true);
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, x: Var) -> Result<Var> {
        let w = g.param(&format!("{}.w", self.name))?;
        let b = g.param(&format!("{}.b", self.name))?;
        g.linear(x, w, Some(b))
    }
}

/// Two-layer perceptron over pooled `[B, C, 1, 1]` descriptors.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(name: &str, din: usize, hidden: usize, dout: usize) -> Self {
        Self {
            fc1: Linear::new(format!("{name}.fc1"), din, hidden.max(1)),
            fc2: Linear::new(format!("{name}.fc2"), hidden.max(1), dout),
        }
    }

    pub fn init<S: Scalar, R: Rng>(&self, store: &mut NamedTensorSet<S>, rng: &mut R) {
        self.fc1.init(store, rng);
        self.fc2.init(store, rng);
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, pooled: Var) -> Result<Var> {
        let b = g.shape(pooled)[0];
        let flat = g.reshape(pooled, &[b, self.fc1.din])?;
        let h = self.fc1.forward(g, flat)?;
        let h = g.relu(h);
        let y = self.fc2.forward(g, h)?;
        g.reshape(y, &[b, self.fc2.dout, 1, 1])
    }
}

/// Depthwise 3x3 followed by a pointwise projection.
#[derive(Clone, Debug)]
pub struct DwSeparable {
    pub dw: Conv,
    pub pw: Conv,
}

impl DwSeparable {
    pub fn new(name: &str, cin: usize, cout: usize) -> Self {
        Self {
            dw: Conv::depthwise(format!("{name}.dw"), cin, 3),
            pw: Conv::pointwise(format!("{name}.pw"), cin, cout),
        }
    }

    pub fn init<S: Scalar, R: Rng>(&self, store: &mut NamedTensorSet<S>, rng: &mut R) {
        self.dw.init(store, rng);
        self.pw.init(store, rng);
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, x: Var) -> Result<Var> {
        let y = self.dw.forward(g, x)?;
        self.pw.forward(g, y)
    }
}

/// Global average pooling, two-layer perceptron, sigmoid: one gate per
/// channel, shaped `[B, C, 1, 1]`.
#[derive(Clone, Debug)]
pub struct ChannelAttention {
    pub mlp: Mlp,
}

impl ChannelAttention {
    pub fn new(name: &str, channels: usize, reduction: usize) -> Self {
        Self {
            mlp: Mlp::new(&format!("{name}.mlp"), channels, channels / reduction, channels),
        }
    }

    pub fn init<S: Scalar, R: Rng>(&self, store: &mut NamedTensorSet<S>, rng: &mut R) {
        self.mlp.init(store, rng);
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, x: Var) -> Result<Var> {
        let p = g.global_avg_pool(x)?;
        let z = self.mlp.forward(g, p)?;
        Ok(g.sigmoid(z))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Mode;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn identity_cbl(store: &mut NamedTensorSet<f64>) -> Cbl {
        let cbl = Cbl::same("c", 1, 1, 1);
        cbl.init(store, &mut ChaCha8Rng::seed_from_u64(0));
        store.set("c.conv.w", Tensor::full(&[1, 1, 1, 1], 1.0)).unwrap();
        cbl
    }

    #[test]
    fn cbl_passthrough_and_slope() {
        let mut store = NamedTensorSet::new();
        let cbl = identity_cbl(&mut store);
        let mut g = Graph::new(&store, Mode::Eval);
        let x = g.constant(Tensor::new(&[1, 1, 1, 2], vec![2.0, -1.0]).unwrap());
        let y = cbl.forward(&mut g, x).unwrap();
        let y = g.value(y).data();
        // running var 1 plus eps 1e-5 in the denominator
        assert!((y[0] - 2.0).abs() < 2e-5);
        assert!((y[1] + 0.1).abs() < 2e-6);
    }

    #[test]
    fn cbl_zero_kernel_gives_zero() {
        let mut store = NamedTensorSet::new();
        let cbl = identity_cbl(&mut store);
        store.set("c.conv.w", Tensor::zeros(&[1, 1, 1, 1])).unwrap();
        for mode in [Mode::Train, Mode::Eval] {
            let mut g = Graph::new(&store, mode);
            let x = g.constant(Tensor::new(&[1, 1, 2, 2], vec![1.0, 5.0, -3.0, 2.0]).unwrap());
            let y = cbl.forward(&mut g, x).unwrap();
            assert!(g.value(y).data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn cbl_constant_channel_is_guarded() {
        // zero variance in train mode must not divide by zero
        let mut store = NamedTensorSet::new();
        let cbl = identity_cbl(&mut store);
        let mut g = Graph::new(&store, Mode::Train);
        let x = g.constant(Tensor::full(&[2, 1, 3, 3], 4.0));
        let y = cbl.forward(&mut g, x).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
        assert_eq!(g.stat_updates().len(), 2);
    }

    #[test]
    fn mlp_hand_case() {
        let mut store = NamedTensorSet::new();
        let mlp = Mlp::new("m", 2, 2, 2);
        mlp.init(&mut store, &mut ChaCha8Rng::seed_from_u64(1));
        store.set("m.fc1.w", Tensor::new(&[2, 2], vec![1.0, 2.0, -1.0, 1.0]).unwrap()).unwrap();
        store.set("m.fc1.b", Tensor::new(&[2], vec![0.0, 0.5]).unwrap()).unwrap();
        store.set("m.fc2.w", Tensor::new(&[2, 2], vec![1.0, 0.0, 2.0, -1.0]).unwrap()).unwrap();
        store.set("m.fc2.b", Tensor::zeros(&[2])).unwrap();
        let mut g = Graph::new(&store, Mode::Eval);
        let x = g.constant(Tensor::new(&[1, 2, 1, 1], vec![1.0, 3.0]).unwrap());
        let y = mlp.forward(&mut g, x).unwrap();
        // h = relu([1+6, -1+3+0.5]) = [7, 2.5]; y = [7, 14-2.5]
        assert_eq!(g.value(y).data(), &[7.0, 11.5]);
        assert_eq!(g.shape(y), &[1, 2, 1, 1]);
    }
}
