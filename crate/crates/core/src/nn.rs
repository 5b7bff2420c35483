//! Fully connected layer stacks recorded on a [`Tape`].

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ParamId, ParamSet, Real, Tape, Tensor, Var};

/// How network weights enter a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binding {
    /// Weights are differentiable leaves.
    Train,
    /// Weights are constants; gradients stop at them.
    Frozen,
}

pub(crate) fn bind<T: Real>(tape: &mut Tape<T>, params: &ParamSet<T>, id: ParamId, binding: Binding) -> Var {
    match binding {
        Binding::Train => tape.param(params, id),
        Binding::Frozen => tape.frozen(params, id),
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform with variance `2 / fan_in`, suited to rectifier layers.
    He,
    /// Uniform with variance `2 / (fan_in + fan_out)`.
    Glorot,
    Zero,
}

/// One affine layer `x·W + b`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Dense {
    pub fn new(params: &mut ParamSet<f32>, name: &str, fan_in: usize, fan_out: usize, init: Init, rng: &mut ChaCha8Rng) -> Self {
        let bound = match init {
            Init::He => (6.0 / fan_in as f64).sqrt(),
            Init::Glorot => (6.0 / (fan_in + fan_out) as f64).sqrt(),
            Init::Zero => 0.0,
        };
        let data: Vec<f32> = (0..fan_in * fan_out)
            .map(|_| if bound > 0.0 { rng.gen_range(-bound..bound) as f32 } else { 0.0 })
            .collect();
        let weight = params.add(format!("{name}.weight"), Tensor::from_vec(fan_in, fan_out, data));
        let bias = params.add(format!("{name}.bias"), Tensor::zeros(1, fan_out));
        Self { weight, bias, fan_in, fan_out }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, params: &ParamSet<T>, binding: Binding, x: Var) -> Var {
        debug_assert_eq!(tape.value(x).cols(), self.fan_in, "dense input width");
        let w = bind(tape, params, self.weight, binding);
        let b = bind(tape, params, self.bias, binding);
        tape.affine(x, w, Some(b))
    }
}

/// Rectified hidden stack; layer `skip` (if any) also receives the stack input.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Trunk {
    pub layers: Vec<Dense>,
    pub skip: Option<usize>,
}

impl Trunk {
    pub fn new(
        params: &mut ParamSet<f32>,
        name: &str,
        in_dim: usize,
        width: usize,
        depth: usize,
        skip: Option<usize>,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let skip = skip.filter(|&s| s > 0 && s < depth);
        let layers = (0..depth)
            .map(|i| {
                let fan_in = match i {
                    0 => in_dim,
                    i if Some(i) == skip => width + in_dim,
                    _ => width,
                };
                Dense::new(params, &format!("{name}.{i}"), fan_in, width, Init::He, rng)
            })
            .collect();
        Self { layers, skip }
    }

    pub fn width(&self) -> usize {
        self.layers.last().map_or(0, |l| l.fan_out)
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, params: &ParamSet<T>, binding: Binding, input: Var) -> Var {
        let mut h = input;
        for (i, layer) in self.layers.iter().enumerate() {
            if Some(i) == self.skip {
                h = tape.concat(&[h, input]);
            }
            let z = layer.forward(tape, params, binding, h);
            h = tape.relu(z);
        }
        h
    }
}
