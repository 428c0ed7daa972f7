//! Small layer helpers built on the autodiff graph.

use crate::error::Result;
use crate::numerics::{Bound, Graph, ParamId, ParamStore, Rng, Tensor, Var};

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    /// Weights `N(0, 1/fan_in)`, zero bias.
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, bias: bool, rng: &mut Rng) -> Self {
        let w = store.randn(format!("{name}.w"), &[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt(), rng);
        let b = bias.then(|| store.zeros(format!("{name}.b"), &[fan_out]));
        Self { w, b }
    }

    pub fn zeros(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, bias: bool) -> Self {
        let w = store.zeros(format!("{name}.w"), &[fan_in, fan_out]);
        let b = bias.then(|| store.zeros(format!("{name}.b"), &[fan_out]));
        Self { w, b }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let y = g.matmul(x, p.var(self.w))?;
        match self.b {
            Some(b) => g.add_row(y, p.var(b)),
            None => Ok(y),
        }
    }
}

/// `x + fc2(gelu(fc1(x)))`.
#[derive(Clone, Debug)]
pub struct ResMlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl ResMlp {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, hidden: usize, rng: &mut Rng) -> Self {
        let fc1 = Linear::new(store, &format!("{name}.fc1"), width, hidden, true, rng);
        let fc2 = Linear::new(store, &format!("{name}.fc2"), hidden, width, true, rng);
        // Start close to identity so deep stacks train from the first step.
        let w = store.get_mut(fc2.w);
        w.data_mut().iter_mut().for_each(|x| *x *= 0.5);
        Self { fc1, fc2 }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, p, x)?;
        let h = g.gelu(h);
        let h = self.fc2.forward(g, p, h)?;
        g.add(x, h)
    }
}

/// Learned lookup table; rows gathered by index.
#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: ParamId,
}

impl Embedding {
    pub fn new(store: &mut ParamStore, name: &str, n: usize, width: usize, std: f64, rng: &mut Rng) -> Self {
        Self {
            table: store.randn(format!("{name}.table"), &[n, width], std, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, idx: &[usize]) -> Result<Var> {
        g.gather_rows(p.var(self.table), idx.into())
    }
}

/// Evaluate `f` on a throwaway graph with every parameter constant.
pub fn eval<T>(store: &ParamStore, f: impl FnOnce(&mut Graph, &Bound) -> Result<T>) -> Result<T> {
    let mut g = Graph::new();
    let p = g.bind(store, false);
    f(&mut g, &p)
}

pub fn value_of(g: &Graph, v: Var) -> Tensor {
    g.value(v).clone()
}

/// Pre-norm transformer block: `x + attn(norm(x))`, then `x + mlp(norm(x))`.
/// Each norm takes an optional per-row scale (timestep modulation).
#[derive(Clone, Debug)]
pub struct Block {
    pub norm1: ParamId,
    pub qkv: Linear,
    pub proj: Linear,
    pub norm2: ParamId,
    pub fc1: Linear,
    pub fc2: Linear,
    pub width: usize,
    pub heads: usize,
}

impl Block {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, heads: usize, mlp_ratio: usize, rng: &mut Rng) -> Self {
        let norm1 = store.add(format!("{name}.norm1"), Tensor::full(&[width], 1.0));
        let qkv = Linear::new(store, &format!("{name}.qkv"), width, 3 * width, true, rng);
        let proj = Linear::new(store, &format!("{name}.proj"), width, width, true, rng);
        let norm2 = store.add(format!("{name}.norm2"), Tensor::full(&[width], 1.0));
        let fc1 = Linear::new(store, &format!("{name}.fc1"), width, mlp_ratio * width, true, rng);
        let fc2 = Linear::new(store, &format!("{name}.fc2"), mlp_ratio * width, width, true, rng);
        for id in [proj.w, fc2.w] {
            store.get_mut(id).data_mut().iter_mut().for_each(|x| *x *= 0.5);
        }
        Self {
            norm1,
            qkv,
            proj,
            norm2,
            fc1,
            fc2,
            width,
            heads,
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        x: Var,
        mask: &std::rc::Rc<crate::numerics::AttnMask>,
        scales: Option<(Var, Var)>,
    ) -> Result<Var> {
        let c = self.width;
        let (s1, s2) = match scales {
            Some(s) => s,
            None => {
                let one = g.constant(Tensor::full(&[c], 1.0));
                (one, one)
            }
        };
        let h = g.rms_norm(x, p.var(self.norm1), s1, crate::numerics::NORM_EPS)?;
        let qkv = self.qkv.forward(g, p, h)?;
        let q = g.slice_cols(qkv, 0, c)?;
        let k = g.slice_cols(qkv, c, 2 * c)?;
        let v = g.slice_cols(qkv, 2 * c, 3 * c)?;
        let a = g.attention(q, k, v, self.heads, mask.clone())?;
        let a = self.proj.forward(g, p, a)?;
        let x = g.add(x, a)?;
        let h = g.rms_norm(x, p.var(self.norm2), s2, crate::numerics::NORM_EPS)?;
        let h = self.fc1.forward(g, p, h)?;
        let h = g.gelu(h);
        let h = self.fc2.forward(g, p, h)?;
        g.add(x, h)
    }
}
