//! Central finite-difference checks for graph gradients.

use super::{Graph, Rng, Tensor, Var};
use crate::error::{dim_err, Result};

/// Relative error per input: `‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂, 1e-12)`.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub rel_err: Vec<f64>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.rel_err.iter().cloned().fold(0.0, f64::max)
    }
}

/// Check the scalar function `f` of `inputs`. `f` must build the same
/// computation every time it is called.
pub fn check<F>(inputs: &[Tensor], h: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = f(&mut g, &vars)?;
    if g.value(out).len() != 1 {
        return Err(dim_err!("gradcheck needs a scalar output"));
    }
    g.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.scalar(out))
    };

    let mut rel_err = Vec::with_capacity(inputs.len());
    let mut xs = inputs.to_vec();
    for (i, a) in analytic.iter().enumerate() {
        let mut num = vec![0.0; inputs[i].len()];
        for (j, nj) in num.iter_mut().enumerate() {
            let orig = xs[i].data()[j];
            xs[i].data_mut()[j] = orig + h;
            let fp = eval(&xs)?;
            xs[i].data_mut()[j] = orig - h;
            let fm = eval(&xs)?;
            xs[i].data_mut()[j] = orig;
            *nj = (fp - fm) / (2.0 * h);
        }
        let diff: f64 = a.data().iter().zip(&num).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
        let na = a.data().iter().map(|x| x * x).sum::<f64>().sqrt();
        let nn = num.iter().map(|x| x * x).sum::<f64>().sqrt();
        rel_err.push(diff / na.max(nn).max(1e-12));
    }
    Ok(GradCheckReport { rel_err })
}

/// Reduce a non-scalar output to a scalar with fixed random weights so every
/// output entry contributes to the checked gradient.
pub fn project(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    let shape = g.value(out).shape().to_vec();
    let w = g.constant(Rng::new(seed).randn(&shape));
    let prod = g.mul(out, w)?;
    Ok(g.sum(prod))
}
