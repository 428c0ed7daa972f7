//! Rectified flow: straight-line interpolation between data and noise, the
//! conditional flow-matching regression target, and Euler sampling from
//! `t = 1` (noise) down to `t = 0` (data).

use serde::{Deserialize, Serialize};

use crate::error::{config_err, dim_err, validation_err, Error, Result};
use crate::numerics::{Graph, Rng, Tensor, Var};

/// `z_t = (1 − t)·z0 + t·eps`.
pub fn forward_interpolate(z0: &Tensor, eps: &Tensor, t: f64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&t) {
        return Err(validation_err!("t = {t} outside [0, 1]"));
    }
    if z0.shape() != eps.shape() {
        return Err(dim_err!("interpolate: {:?} vs {:?}", z0.shape(), eps.shape()));
    }
    z0.zip_map(eps, |a, b| (1.0 - t) * a + t * b)
}

/// Velocity of the straight path, `eps − z0`, constant in `t`.
pub fn cfm_target(z0: &Tensor, eps: &Tensor) -> Result<Tensor> {
    if z0.shape() != eps.shape() {
        return Err(dim_err!("cfm target: {:?} vs {:?}", z0.shape(), eps.shape()));
    }
    eps.zip_map(z0, |e, z| e - z)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TimeSchedule {
    #[default]
    Uniform,
}

impl TimeSchedule {
    pub fn sample(self, rng: &mut Rng) -> f64 {
        match self {
            TimeSchedule::Uniform => rng.uniform(),
        }
    }
}

/// One training batch: `samples` grids of `rows` tokens each, stacked.
#[derive(Clone, Debug)]
pub struct FlowBatch {
    pub rows: usize,
    pub t: Vec<f64>,
    pub z_t: Tensor,
    pub target: Tensor,
}

impl FlowBatch {
    /// Draw one `t` per sample and fresh noise for every entry.
    pub fn new(z0s: &[&Tensor], schedule: TimeSchedule, rng: &mut Rng) -> Result<Self> {
        let first = z0s.first().ok_or_else(|| config_err!("empty flow batch"))?;
        let t: Vec<f64> = z0s.iter().map(|_| schedule.sample(rng)).collect();
        let mut zt = Vec::new();
        let mut tg = Vec::new();
        for (z0, &ti) in z0s.iter().zip(&t) {
            if z0.shape() != first.shape() {
                return Err(dim_err!("flow batch mixes {:?} and {:?}", first.shape(), z0.shape()));
            }
            let eps = rng.randn(z0.shape());
            zt.push(forward_interpolate(z0, &eps, ti)?);
            tg.push(cfm_target(z0, &eps)?);
        }
        Self::from_parts(&zt.iter().collect::<Vec<_>>(), &tg.iter().collect::<Vec<_>>(), t)
    }

    pub fn from_parts(z_t: &[&Tensor], target: &[&Tensor], t: Vec<f64>) -> Result<Self> {
        let rows = z_t.first().map(|z| z.rows()).unwrap_or(0);
        Ok(Self {
            rows,
            t,
            z_t: Tensor::vstack(z_t)?,
            target: Tensor::vstack(target)?,
        })
    }

    pub fn samples(&self) -> usize {
        self.t.len()
    }
}

/// Mean squared error between the model velocity and the path velocity.
/// `model` receives the stacked `z_t` and the per-sample times.
pub fn cfm_loss<M>(g: &mut Graph, batch: &FlowBatch, model: M) -> Result<Var>
where
    M: FnOnce(&mut Graph, Var, &[f64]) -> Result<Var>,
{
    let zt = g.constant(batch.z_t.clone());
    let v = model(g, zt, &batch.t)?;
    let loss = g.mse(v, std::rc::Rc::new(batch.target.clone()))?;
    let value = g.scalar(loss);
    if !value.is_finite() {
        return Err(Error::Numeric(format!(
            "flow-matching loss is {value} on a batch of {} samples with t = {:?}",
            batch.samples(),
            batch.t
        )));
    }
    Ok(loss)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub num_steps: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { num_steps: 50 }
    }
}

impl SamplerConfig {
    /// Uniform grid `1 = t_0 > t_1 > … > t_N = 0`.
    pub fn grid(&self) -> Result<Vec<f64>> {
        if self.num_steps == 0 {
            return Err(config_err!("sampler needs at least one step"));
        }
        let n = self.num_steps;
        Ok((0..=n).map(|k| if k == n { 0.0 } else { 1.0 - k as f64 / n as f64 }).collect())
    }
}

/// Integrate `dz/dt = v(z, t)` from `z1` at `t = 1` to `t = 0` with signed
/// steps `Δt = t_next − t_cur < 0`.
pub fn euler_from<M>(z1: Tensor, cfg: &SamplerConfig, mut model: M) -> Result<Tensor>
where
    M: FnMut(&Tensor, f64) -> Result<Tensor>,
{
    let grid = cfg.grid()?;
    let mut z = z1;
    for (k, w) in grid.windows(2).enumerate() {
        let v = model(&z, w[0])?;
        if v.shape() != z.shape() {
            return Err(dim_err!("velocity {:?} for state {:?}", v.shape(), z.shape()));
        }
        let dt = w[1] - w[0];
        for (zi, vi) in z.data_mut().iter_mut().zip(v.data()) {
            *zi += vi * dt;
        }
        if !z.all_finite() {
            return Err(Error::SamplingDiverged { step: k });
        }
    }
    Ok(z)
}

/// Draw `z1 ~ N(0, I)` of `shape` and integrate to `t = 0`.
pub fn euler_sample<M>(shape: &[usize], cfg: &SamplerConfig, rng: &mut Rng, model: M) -> Result<Tensor>
where
    M: FnMut(&Tensor, f64) -> Result<Tensor>,
{
    euler_from(rng.randn(shape), cfg, model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck;
    use crate::numerics::{adam_step, AdamConfig, AdamState, ParamStore};

    #[test]
    fn interpolation_cases() {
        let z0 = Tensor::scalar(2.0);
        let e = Tensor::scalar(0.0);
        assert_eq!(forward_interpolate(&z0, &e, 0.0).unwrap(), z0);
        assert_eq!(forward_interpolate(&z0, &e, 1.0).unwrap(), e);
        assert_eq!(forward_interpolate(&z0, &e, 0.25).unwrap().data(), &[1.5]);
        assert!(matches!(forward_interpolate(&z0, &e, 1.5), Err(Error::Validation(_))));
    }

    #[test]
    fn target_cases_and_time_derivative() {
        let mut rng = Rng::new(1);
        let (z0, e) = (rng.randn(&[3, 4]), rng.randn(&[3, 4]));
        assert!(cfm_target(&z0, &z0).unwrap().data().iter().all(|&x| x == 0.0));
        assert_eq!(cfm_target(&Tensor::zeros(&[3, 4]), &e).unwrap(), e);
        let h = 1e-6;
        let u = cfm_target(&z0, &e).unwrap();
        for &t in &[0.2, 0.5, 0.8] {
            let a = forward_interpolate(&z0, &e, t + h).unwrap();
            let b = forward_interpolate(&z0, &e, t - h).unwrap();
            let fd = a.zip_map(&b, |x, y| (x - y) / (2.0 * h)).unwrap();
            assert!(fd.max_abs_diff(&u) <= 1e-8);
        }
    }

    #[test]
    fn oracle_model_has_zero_loss_and_zero_model_unit_loss() {
        let mut rng = Rng::new(2);
        let z0 = Tensor::zeros(&[64, 8]);
        let batch = FlowBatch::new(&[&z0, &z0, &z0, &z0], TimeSchedule::Uniform, &mut rng).unwrap();
        let mut g = Graph::new();
        let target = batch.target.clone();
        let l = cfm_loss(&mut g, &batch, |g, _, _| Ok(g.constant(target))).unwrap();
        assert_eq!(g.scalar(l), 0.0);
        let l = cfm_loss(&mut g, &batch, |g, zt, _| Ok(g.scale(zt, 0.0))).unwrap();
        // Mean of 2048 squared standard normals: std of the estimate is sqrt(2/2048).
        assert!((g.scalar(l) - 1.0).abs() < 4.0 * (2.0f64 / 2048.0).sqrt());
    }

    #[test]
    fn loss_is_batch_order_invariant() {
        let mut rng = Rng::new(3);
        let parts: Vec<Tensor> = (0..3).map(|_| rng.randn(&[2, 3])).collect();
        let tg: Vec<Tensor> = (0..3).map(|_| rng.randn(&[2, 3])).collect();
        let eval = |order: &[usize]| {
            let z: Vec<&Tensor> = order.iter().map(|&i| &parts[i]).collect();
            let u: Vec<&Tensor> = order.iter().map(|&i| &tg[i]).collect();
            let b = FlowBatch::from_parts(&z, &u, vec![0.5; 3]).unwrap();
            let mut g = Graph::new();
            let l = cfm_loss(&mut g, &b, |g, zt, _| Ok(g.scale(zt, 0.3))).unwrap();
            g.scalar(l)
        };
        assert!((eval(&[0, 1, 2]) - eval(&[2, 0, 1])).abs() < 1e-12);
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let mut rng = Rng::new(4);
        let z0 = rng.randn(&[5, 1]);
        let batch = FlowBatch::new(&[&z0, &z0], TimeSchedule::Uniform, &mut rng).unwrap();
        let ab = [Tensor::scalar(0.3), Tensor::scalar(-0.2)];
        let rep = gradcheck::check(&ab, 1e-5, |g, v| {
            cfm_loss(g, &batch, |g, zt, _| {
                let a = g.reshape(v[0], &[1, 1])?;
                let y = g.matmul(zt, a)?;
                let b = g.reshape(v[1], &[1])?;
                g.add_row(y, b)
            })
        })
        .unwrap();
        assert!(rep.max_rel_err() <= 1e-4);
    }

    #[test]
    fn zero_velocity_returns_initial_noise() {
        let cfg = SamplerConfig::default();
        let out = euler_sample(&[3, 2], &cfg, &mut Rng::new(5), |z, _| Ok(Tensor::zeros(z.shape()))).unwrap();
        assert_eq!(out, Rng::new(5).randn(&[3, 2]));
    }

    fn oracle(z0: &Tensor) -> impl FnMut(&Tensor, f64) -> Result<Tensor> + '_ {
        move |z, t| z.zip_map(z0, |a, b| (a - b) / t)
    }

    #[test]
    fn single_step_recovers_datapoint() {
        let z0 = Tensor::from_rows(&[&[0.7, -1.3, 2.0]]).unwrap();
        let z1 = Rng::new(6).randn(&[1, 3]);
        let out = euler_from(z1, &SamplerConfig { num_steps: 1 }, oracle(&z0)).unwrap();
        assert!(out.max_abs_diff(&z0) <= 1e-10);
    }

    #[test]
    fn step_count_does_not_change_oracle_result() {
        let z0 = Tensor::from_rows(&[&[0.7, -1.3]]).unwrap();
        let z1 = Rng::new(7).randn(&[1, 2]);
        let a = euler_from(z1.clone(), &SamplerConfig { num_steps: 10 }, oracle(&z0)).unwrap();
        let b = euler_from(z1, &SamplerConfig { num_steps: 1000 }, oracle(&z0)).unwrap();
        assert!(a.max_abs_diff(&b) <= 1e-10);
        assert!(a.max_abs_diff(&z0) <= 1e-10);
    }

    #[test]
    fn time_grid_covers_unit_interval() {
        for n in [1, 7, 50] {
            let g = SamplerConfig { num_steps: n }.grid().unwrap();
            assert_eq!((g[0], g[n]), (1.0, 0.0));
            assert!(g.windows(2).all(|w| w[1] < w[0]));
            let sum: f64 = g.windows(2).map(|w| w[1] - w[0]).sum();
            assert!((sum + 1.0).abs() <= 1e-12);
        }
        assert!(SamplerConfig { num_steps: 0 }.grid().is_err());
    }

    #[test]
    fn diverging_sampler_reports_step() {
        let err = euler_sample(&[1, 1], &SamplerConfig { num_steps: 5 }, &mut Rng::new(0), |_, t| {
            Ok(Tensor::scalar(if t < 0.5 { f64::INFINITY } else { 1.0 }).reshape(&[1, 1])?)
        })
        .unwrap_err();
        assert!(matches!(err, Error::SamplingDiverged { step: 3 }));
    }

    #[test]
    fn marginal_variance_of_path() {
        let mut rng = Rng::new(8);
        let n = 40_000;
        for &t in &[0.0, 0.25, 0.5, 1.0] {
            let (z0, e) = (rng.randn(&[n, 1]), rng.randn(&[n, 1]));
            let zt = forward_interpolate(&z0, &e, t).unwrap();
            let m = zt.mean();
            let var = zt.data().iter().map(|x| (x - m).powi(2)).sum::<f64>() / n as f64;
            let want = (1.0 - t).powi(2) + t * t;
            assert!((var - want).abs() < 0.03, "t={t}: {var} vs {want}");
        }
    }

    #[test]
    fn trained_velocity_model_lands_on_datapoint() {
        let z_star = Tensor::from_rows(&[&[0.8, -0.4]]).unwrap();
        let hidden = 64;
        let mut rng = Rng::new(9);
        let mut store = ParamStore::new();
        let w1 = store.randn("w1", &[3, hidden], 1.0, &mut rng);
        let b1 = store.zeros("b1", &[hidden]);
        let w2 = store.randn("w2", &[hidden, 2], 0.1, &mut rng);
        let b2 = store.zeros("b2", &[2]);
        // The network predicts the clean point and the velocity is read off as
        // (z - D) / t, which stays accurate as t approaches zero.
        let forward = |g: &mut Graph, p: &crate::numerics::Bound, zt: Var, t: &[f64]| -> Result<Var> {
            let rows = g.value(zt).rows();
            let per = rows / t.len();
            let tcol: Vec<f64> = (0..rows).map(|i| t[i / per]).collect();
            let inv: Vec<f64> = tcol.iter().flat_map(|&t| [1.0 / t.max(0.02); 2]).collect();
            let tv = g.constant(Tensor::matrix(rows, 1, tcol)?);
            let x = g.concat_cols(&[zt, tv])?;
            let h = g.matmul(x, p.var(w1))?;
            let h = g.add_row(h, p.var(b1))?;
            let h = g.gelu(h);
            let o = g.matmul(h, p.var(w2))?;
            let d = g.add_row(o, p.var(b2))?;
            let diff = g.sub(zt, d)?;
            let inv = g.constant(Tensor::matrix(rows, 2, inv)?);
            g.mul(diff, inv)
        };
        let mut adam = AdamState::new(&store);
        let steps = 3000;
        for step in 0..steps {
            // Cosine decay from 3e-3 so the last steps refine the field near t = 0.
            let hyper = AdamConfig {
                lr: 1e-5 + 3e-3 * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / steps as f64).cos()),
                ..AdamConfig::default()
            };
            let zs: Vec<&Tensor> = vec![&z_star; 128];
            let batch = FlowBatch::new(&zs, TimeSchedule::Uniform, &mut rng).unwrap();
            let mut g = Graph::new();
            let p = g.bind(&store, true);
            let loss = cfm_loss(&mut g, &batch, |g, zt, t| forward(g, &p, zt, t)).unwrap();
            g.backward(loss).unwrap();
            adam_step(&mut store, &g.grads(&p), &mut adam, &hyper).unwrap();
        }
        for seed in 0..5 {
            let out = euler_sample(&[1, 2], &SamplerConfig::default(), &mut Rng::new(100 + seed), |z, t| {
                let mut g = Graph::new();
                let p = g.bind(&store, false);
                let zv = g.constant(z.clone());
                let v = forward(&mut g, &p, zv, &[t])?;
                Ok(g.value(v).clone())
            })
            .unwrap();
            assert!(out.max_abs_diff(&z_star) <= 1e-2, "{:?}", out.data());
        }
    }
}
