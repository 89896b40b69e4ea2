//! Parameterised building blocks recorded onto a [`Graph`].

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::config::bottleneck_width;
use crate::error::{shape_err, Result};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var, LN_EPS};

pub fn normal_tensor(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("finite std");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect()).expect("valid shape")
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        std: f64,
        trainable: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let w = store.add(format!("{name}.w"), normal_tensor(rng, &[d_in, d_out], std), trainable);
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[d_out]), trainable);
        Self { w, b, d_in, d_out }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        if g.cols(x) != self.d_in {
            return Err(shape_err!("linear expects width {}, got {:?}", self.d_in, g.shape(x)));
        }
        let w = g.param(self.w);
        let y = g.matmul(x, w)?;
        let b = g.param(self.b);
        g.add_row(y, b)
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.w, self.b]
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, trainable: bool) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::filled(&[d], 1.0), trainable);
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[d]), trainable);
        Self { gamma, beta }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (gm, bt) = (g.param(self.gamma), g.param(self.beta));
        g.layernorm(x, gm, bt, LN_EPS)
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.gamma, self.beta]
    }
}

/// `LN(Fc(GELU(Fc(x))))` with hidden width `⌈in/r⌉`.
#[derive(Clone, Debug)]
pub struct BottleneckMlp {
    pub down: Linear,
    pub up: Linear,
    pub norm: LayerNorm,
}

/// Weight initialisation scale.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Std(f64),
    /// `1/√fan_in`.
    FanIn,
}

impl Init {
    pub fn std(self, fan_in: usize) -> f64 {
        match self {
            Init::Std(s) => s,
            Init::FanIn => 1.0 / (fan_in as f64).sqrt(),
        }
    }
}

impl BottleneckMlp {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        r: usize,
        init: Init,
        rng: &mut impl Rng,
    ) -> Self {
        let hidden = bottleneck_width(d_in, r);
        Self {
            down: Linear::new(store, &format!("{name}.down"), d_in, hidden, init.std(d_in), true, rng),
            up: Linear::new(store, &format!("{name}.up"), hidden, d_out, init.std(hidden), true, rng),
            norm: LayerNorm::new(store, &format!("{name}.ln"), d_out, true),
        }
    }

    pub fn hidden(&self) -> usize {
        self.down.d_out
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.down.forward(g, x)?;
        let h = g.gelu(h);
        let y = self.up.forward(g, h)?;
        self.norm.forward(g, y)
    }

    pub fn params(&self) -> Vec<ParamId> {
        [self.down.params(), self.up.params(), self.norm.params()].concat()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn bottleneck_hidden_widths() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let a = BottleneckMlp::new(&mut store, "a", 128, 64, 16, Init::Std(0.02), &mut rng);
        let b = BottleneckMlp::new(&mut store, "b", 128, 64, 4, Init::Std(0.02), &mut rng);
        assert_eq!((a.hidden(), b.hidden()), (8, 32));
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let mlp = BottleneckMlp::new(&mut store, "m", 6, 4, 2, Init::Std(0.0), &mut rng);
        let mut g = Graph::new(&store);
        let x = g.constant(normal_tensor(&mut rng, &[3, 6], 1.0));
        let y = mlp.forward(&mut g, x).unwrap();
        assert_eq!(g.shape(y), &[3, 4]);
        assert!(g.value(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn width_mismatch_is_shape_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let mlp = BottleneckMlp::new(&mut store, "m", 6, 4, 2, Init::Std(0.02), &mut rng);
        let mut g = Graph::new(&store);
        let x = g.constant(Tensor::zeros(&[3, 5]));
        assert!(matches!(mlp.forward(&mut g, x), Err(crate::Error::Shape(_))));
    }
}
