//! Parameter storage and per-forward sessions.
//!
//! Weights live in a [`ParamStore`] (ordered, named tensors). Every forward
//! pass opens a [`Session`], which copies the parameters onto a fresh tape
//! as leaf nodes; after `backward` the per-parameter gradients are read back
//! by index. Registration order is fixed by model construction, which keeps
//! checkpoints and optimizer state aligned.

use crate::error::{Error, Result};
use crate::tensor::gradcheck::{finite_difference_check, GradCheckReport, GradSpec};
use crate::tensor::{Arr, Graph, Var};
use ndarray::IxDyn;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

/// Ordered collection of named weight tensors.
#[derive(Default, Clone)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Arr>,
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, value: Arr) -> ParamId {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name}"
        );
        let id = self.values.len();
        self.names.push(name.to_string());
        self.values.push(value);
        self.index.insert(name.to_string(), id);
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Arr {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Arr {
        &mut self.values[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Arr)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.values.iter())
    }

    /// Total number of scalar weights.
    pub fn n_scalars(&self) -> usize {
        self.values.iter().map(Arr::len).sum()
    }

    /// Replace a tensor, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Arr) -> Result<()> {
        if self.values[id.0].shape() != value.shape() {
            return Err(Error::Shape(format!(
                "parameter {}: shape {:?} != {:?}",
                self.names[id.0],
                self.values[id.0].shape(),
                value.shape()
            )));
        }
        self.values[id.0] = value;
        Ok(())
    }
}

/// One forward/backward pass over a parameter store.
pub struct Session {
    pub graph: Graph,
    param_vars: Vec<Var>,
    trainable: bool,
}

impl Session {
    /// Open a session. With `trainable` set, parameters become
    /// gradient-enabled leaves.
    pub fn new(store: &ParamStore, trainable: bool) -> Self {
        let mut graph = Graph::new();
        let param_vars = store
            .values
            .iter()
            .map(|v| graph.leaf(v.clone(), trainable))
            .collect();
        Self {
            graph,
            param_vars,
            trainable,
        }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.param_vars[id.0]
    }

    /// Insert a non-trainable input tensor.
    pub fn input(&mut self, value: Arr) -> Var {
        self.graph.leaf(value, false)
    }

    /// Insert an input that participates in gradient computation (used by
    /// gradient checks on activations).
    pub fn trainable_input(&mut self, value: Arr) -> Var {
        self.graph.leaf(value, true)
    }

    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.trainable {
            return Err(Error::Precondition(
                "session opened without gradients".into(),
            ));
        }
        self.graph.backward(loss)
    }

    /// Per-parameter gradients after `backward`; `None` for parameters the
    /// loss does not touch.
    pub fn param_grads(&self) -> Vec<Option<Arr>> {
        self.param_vars
            .iter()
            .map(|v| self.graph.grad(*v).cloned())
            .collect()
    }
}

/// He-normal initialized convolution weights.
pub fn he_weights(c_out: usize, c_in: usize, k: usize, rng: &mut ChaCha8Rng) -> Arr {
    let std = (2.0 / (c_in * k * k) as f64).sqrt();
    Arr::from_shape_fn(IxDyn(&[c_out, c_in, k, k]), |_| {
        // Box-Muller from two uniforms; ChaCha keeps this reproducible.
        let u1: f64 = rng.random_range(f64::EPSILON..1.0);
        let u2: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        std * (-2.0 * u1.ln()).sqrt() * u2.cos()
    })
}

/// A 2-D convolution layer: weights plus stride/padding hyperparameters.
#[derive(Clone, Copy, Debug)]
pub struct Conv2dLayer {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2dLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w = store.register(&format!("{name}.w"), he_weights(c_out, c_in, k, rng));
        let b = store.register(&format!("{name}.b"), Arr::zeros(IxDyn(&[c_out])));
        Self { w, b, stride, pad }
    }

    pub fn forward(&self, sess: &mut Session, x: Var) -> Result<Var> {
        let w = sess.var(self.w);
        let b = sess.var(self.b);
        sess.graph.conv2d(x, w, b, self.stride, self.pad)
    }
}

/// Two 3x3 convolutions with an identity skip: `x + conv2(relu(conv1(x)))`.
#[derive(Clone, Copy, Debug)]
pub struct ResBlock {
    conv1: Conv2dLayer,
    conv2: Conv2dLayer,
}

impl ResBlock {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            conv1: Conv2dLayer::new(
                store,
                &format!("{name}.conv1"),
                channels,
                channels,
                3,
                1,
                1,
                rng,
            ),
            conv2: Conv2dLayer::new(
                store,
                &format!("{name}.conv2"),
                channels,
                channels,
                3,
                1,
                1,
                rng,
            ),
        }
    }

    pub fn forward(&self, sess: &mut Session, x: Var) -> Result<Var> {
        let h = self.conv1.forward(sess, x)?;
        let h = sess.graph.relu(h);
        let h = self.conv2.forward(sess, h)?;
        sess.graph.add(x, h)
    }
}

/// Finite-difference check of parameter gradients for an arbitrary forward
/// closure. Coordinates are sampled across all touched parameters.
pub fn check_parameter_gradients<F>(
    store: &ParamStore,
    build: F,
    spec: GradSpec,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Session) -> Result<Var>,
{
    let mut sess = Session::new(store, true);
    let loss = build(&mut sess)?;
    sess.backward(loss)?;
    let grads = sess.param_grads();

    let inputs: Vec<Arr> = store.values.clone();
    let analytic: Vec<Arr> = grads
        .into_iter()
        .zip(&inputs)
        .map(|(g, v)| g.unwrap_or_else(|| Arr::zeros(v.raw_dim())))
        .collect();

    let names = store.names.clone();
    let index = store.index.clone();
    let mut eval = move |xs: &[Arr]| -> f64 {
        let probe = ParamStore {
            names: names.clone(),
            values: xs.to_vec(),
            index: index.clone(),
        };
        let mut sess = Session::new(&probe, false);
        let out = build(&mut sess).expect("forward failed during finite differences");
        sess.graph
            .value(out)
            .iter()
            .next()
            .copied()
            .expect("scalar loss")
    };
    Ok(finite_difference_check(&mut eval, &inputs, &analytic, spec))
}
