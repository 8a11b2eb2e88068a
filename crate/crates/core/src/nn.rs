//! Dense and masked tanh networks whose weights live in a [`ParameterSet`].

use rand::Rng;

use crate::autodiff::{ParamVars, ParameterSet, Tape, Tensor, Var};
use crate::error::Result;

/// How a layer's weights start out.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform in `±1/sqrt(fan_in)`.
    Uniform,
    Zero,
}

/// `x W + b`; the weight and bias are referenced by position in the
/// parameter set.
#[derive(Clone, Debug)]
pub struct Linear {
    w: usize,
    b: usize,
    fan_in: usize,
    fan_out: usize,
    mask: Option<Vec<f64>>,
}

fn init_values(n: usize, fan_in: usize, init: Init, rng: &mut impl Rng) -> Vec<f64> {
    match init {
        Init::Zero => vec![0.0; n],
        Init::Uniform => {
            let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
            (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
        }
    }
}

impl Linear {
    pub fn new(
        params: &mut ParameterSet,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        init: Init,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let w = init_values(fan_in * fan_out, fan_in, init, rng);
        let b = init_values(fan_out, fan_in, init, rng);
        let w = params.insert(format!("{name}.w"), Tensor::matrix(fan_in, fan_out, w)?)?;
        let b = params.insert(format!("{name}.b"), Tensor::matrix(1, fan_out, b)?)?;
        Ok(Self {
            w,
            b,
            fan_in,
            fan_out,
            mask: None,
        })
    }

    /// A layer whose weight is multiplied elementwise by a fixed 0/1 mask
    /// (row-major, `fan_in x fan_out`). Masked entries start at zero.
    pub fn masked(
        params: &mut ParameterSet,
        name: &str,
        mask: Vec<f64>,
        fan_in: usize,
        fan_out: usize,
        init: Init,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        assert_eq!(mask.len(), fan_in * fan_out);
        let mut layer = Self::new(params, name, fan_in, fan_out, init, rng)?;
        let w = params.by_index_mut(layer.w);
        for (v, m) in w.values_mut().iter_mut().zip(&mask) {
            *v *= m;
        }
        layer.mask = Some(mask);
        Ok(layer)
    }

    pub fn fan_in(&self) -> usize {
        self.fan_in
    }

    pub fn fan_out(&self) -> usize {
        self.fan_out
    }

    pub fn weight_index(&self) -> usize {
        self.w
    }

    pub fn bias_index(&self) -> usize {
        self.b
    }

    pub fn weight(&self, tape: &mut Tape, vars: &ParamVars) -> Var {
        let w = vars.get(self.w);
        match &self.mask {
            None => w,
            Some(m) => {
                let m = tape.constant(self.fan_in, self.fan_out, m.clone());
                tape.mul(w, m)
            }
        }
    }

    pub fn forward(&self, tape: &mut Tape, vars: &ParamVars, x: Var) -> Var {
        let w = self.weight(tape, vars);
        let y = tape.matmul(x, w);
        tape.add_row(y, vars.get(self.b))
    }
}

/// Tanh multilayer perceptron with a linear output layer.
#[derive(Clone, Debug)]
pub struct Mlp {
    layers: Vec<Linear>,
}

impl Mlp {
    /// `widths` lists every layer width including input and output.
    pub fn new(
        params: &mut ParameterSet,
        name: &str,
        widths: &[usize],
        last_init: Init,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        assert!(widths.len() >= 2);
        let mut layers = Vec::with_capacity(widths.len() - 1);
        for l in 0..widths.len() - 1 {
            let init = if l + 2 == widths.len() {
                last_init
            } else {
                Init::Uniform
            };
            layers.push(Linear::new(
                params,
                &format!("{name}.l{l}"),
                widths[l],
                widths[l + 1],
                init,
                rng,
            )?);
        }
        Ok(Self { layers })
    }

    pub fn from_layers(layers: Vec<Linear>) -> Self {
        Self { layers }
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    pub fn forward(&self, tape: &mut Tape, vars: &ParamVars, x: Var) -> Var {
        let mut h = x;
        for (l, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, vars, h);
            if l + 1 < self.layers.len() {
                h = tape.tanh(h);
            }
        }
        h
    }
}

/// Per-point network whose output group `j` (of width `group`) never sees
/// input coordinate `j`.
///
/// Hidden unit `u` carries label `u % dim`; it reads every input except its
/// label and feeds only hidden units and the output group with the same
/// label. With `dim = 1` the output is a learned constant.
#[derive(Clone, Debug)]
pub struct MaskedMlp {
    mlp: Mlp,
    dim: usize,
    group: usize,
}

impl MaskedMlp {
    pub fn new(
        params: &mut ParameterSet,
        name: &str,
        dim: usize,
        hidden: &[usize],
        group: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        assert!(!hidden.is_empty());
        let label = |u: usize| u % dim;
        let mut layers = Vec::new();
        let mut prev = dim;
        for (l, &width) in hidden.iter().enumerate() {
            let mut mask = vec![0.0; prev * width];
            for i in 0..prev {
                for u in 0..width {
                    let ok = if l == 0 { i != label(u) } else { label(i) == label(u) };
                    if ok {
                        mask[i * width + u] = 1.0;
                    }
                }
            }
            layers.push(Linear::masked(
                params,
                &format!("{name}.l{l}"),
                mask,
                prev,
                width,
                Init::Uniform,
                rng,
            )?);
            prev = width;
        }
        let out = dim * group;
        let mut mask = vec![0.0; prev * out];
        for u in 0..prev {
            for o in 0..out {
                if label(u) == o / group {
                    mask[u * out + o] = 1.0;
                }
            }
        }
        layers.push(Linear::masked(
            params,
            &format!("{name}.l{}", hidden.len()),
            mask,
            prev,
            out,
            Init::Uniform,
            rng,
        )?);
        Ok(Self {
            mlp: Mlp::from_layers(layers),
            dim,
            group,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn group(&self) -> usize {
        self.group
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    /// `n x dim` in, `n x (dim * group)` out.
    pub fn forward(&self, tape: &mut Tape, vars: &ParamVars, x: Var) -> Var {
        self.mlp.forward(tape, vars, x)
    }
}
