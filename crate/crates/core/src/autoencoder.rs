//! Per-patch variational autoencoder mapping videos to a latent token grid.
//!
//! Each non-overlapping `f_t × f_s × f_s` pixel patch becomes one token. The
//! encoder is a patch embedding followed by residual MLP blocks that emit a
//! mean and log-variance per token; the decoder mirrors it.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{config_err, dim_err, Error, Result};
use crate::grid::{GridDims, LatentGrid};
use crate::nn::{Linear, ResMlp};
use crate::numerics::{Bound, Graph, ParamStore, Rng, Tensor, Var};
use crate::synthdata::Video;
use crate::train::{self, TrainConfig, TrainState};

pub const CKPT_KIND: &str = "autoencoder";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AeConfig {
    pub f_t: usize,
    pub f_s: usize,
    pub c_z: usize,
    pub hidden: usize,
    pub blocks: usize,
    pub beta: f64,
    pub logvar_min: f64,
    pub logvar_max: f64,
    pub train: TrainConfig,
}

impl Default for AeConfig {
    fn default() -> Self {
        Self {
            f_t: 2,
            f_s: 4,
            c_z: 8,
            hidden: 128,
            blocks: 2,
            beta: 1e-4,
            logvar_min: -10.0,
            logvar_max: 10.0,
            train: TrainConfig {
                steps: 1500,
                batch_size: 4,
                lr: 2e-3,
                ..TrainConfig::default()
            },
        }
    }
}

impl AeConfig {
    pub fn patch_dim(&self, channels: usize) -> usize {
        self.f_t * self.f_s * self.f_s * channels
    }

    pub fn latent_dims(&self, frames: usize, height: usize, width: usize) -> Result<GridDims> {
        if self.f_t == 0 || self.f_s == 0 {
            return Err(config_err!("autoencoder downsample factors must be positive"));
        }
        if frames % self.f_t != 0 || height % self.f_s != 0 || width % self.f_s != 0 {
            return Err(config_err!(
                "video {frames}x{height}x{width} not divisible by autoencoder factors (f_t={}, f_s={})",
                self.f_t,
                self.f_s
            ));
        }
        Ok(GridDims::new(frames / self.f_t, height / self.f_s, width / self.f_s))
    }

    /// Pixels per latent scalar.
    pub fn compression_ratio(&self, channels: usize) -> f64 {
        self.patch_dim(channels) as f64 / self.c_z as f64
    }
}

/// Video → `tokens × patch_dim` matrix, patch entries ordered `(dt, c, dy, dx)`,
/// pixel values shifted to be centred on zero.
pub fn patchify(v: &Video, cfg: &AeConfig) -> Result<(GridDims, Tensor)> {
    let dims = cfg.latent_dims(v.frames, v.height, v.width)?;
    let p = cfg.patch_dim(v.channels);
    let mut out = Vec::with_capacity(dims.len() * p);
    for tz in 0..dims.t {
        for hz in 0..dims.h {
            for wz in 0..dims.w {
                for dt in 0..cfg.f_t {
                    for c in 0..v.channels {
                        for dy in 0..cfg.f_s {
                            for dx in 0..cfg.f_s {
                                let px = v.pixel(tz * cfg.f_t + dt, c, hz * cfg.f_s + dy, wz * cfg.f_s + dx);
                                out.push(px as f64 - 0.5);
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((dims, Tensor::matrix(dims.len(), p, out)?))
}

/// Inverse of [`patchify`], clamping to `[0, 1]`.
pub fn unpatchify(dims: GridDims, tokens: &Tensor, cfg: &AeConfig, channels: usize, fps: f64) -> Result<Video> {
    let p = cfg.patch_dim(channels);
    if tokens.rows() != dims.len() || tokens.cols() != p {
        return Err(dim_err!(
            "decoder output {:?} does not match grid {}x{}x{} with patch {p}",
            tokens.shape(),
            dims.t,
            dims.h,
            dims.w
        ));
    }
    let (f, h, w) = (dims.t * cfg.f_t, dims.h * cfg.f_s, dims.w * cfg.f_s);
    let mut data = vec![0f32; f * channels * h * w];
    for i in 0..dims.len() {
        let (tz, hz, wz) = dims.coords(i);
        let row = tokens.row(i);
        let mut k = 0;
        for dt in 0..cfg.f_t {
            for c in 0..channels {
                for dy in 0..cfg.f_s {
                    for dx in 0..cfg.f_s {
                        let (ff, yy, xx) = (tz * cfg.f_t + dt, hz * cfg.f_s + dy, wz * cfg.f_s + dx);
                        data[((ff * channels + c) * h + yy) * w + xx] = (row[k] + 0.5).clamp(0.0, 1.0) as f32;
                        k += 1;
                    }
                }
            }
        }
    }
    Video::new(f, channels, h, w, fps, data)
}

#[derive(Clone, Debug)]
pub struct AutoEncoder {
    pub cfg: AeConfig,
    pub channels: usize,
    pub store: ParamStore,
    enc_in: Linear,
    enc_blocks: Vec<ResMlp>,
    enc_out: Linear,
    dec_in: Linear,
    dec_blocks: Vec<ResMlp>,
    dec_out: Linear,
}

impl AutoEncoder {
    pub fn new(cfg: &AeConfig, channels: usize, rng: &mut Rng) -> Self {
        let mut s = ParamStore::new();
        let (p, hd) = (cfg.patch_dim(channels), cfg.hidden);
        let enc_in = Linear::new(&mut s, "enc.in", p, hd, true, rng);
        let enc_blocks = (0..cfg.blocks)
            .map(|i| ResMlp::new(&mut s, &format!("enc.block{i}"), hd, hd, rng))
            .collect();
        let enc_out = Linear::new(&mut s, "enc.out", hd, 2 * cfg.c_z, true, rng);
        let dec_in = Linear::new(&mut s, "dec.in", cfg.c_z, hd, true, rng);
        let dec_blocks = (0..cfg.blocks)
            .map(|i| ResMlp::new(&mut s, &format!("dec.block{i}"), hd, hd, rng))
            .collect();
        let dec_out = Linear::new(&mut s, "dec.out", hd, p, true, rng);
        Self {
            cfg: cfg.clone(),
            channels,
            store: s,
            enc_in,
            enc_blocks,
            enc_out,
            dec_in,
            dec_blocks,
            dec_out,
        }
    }

    /// All weights zero. Decoded pixels then sit at the 0.5 output offset.
    pub fn zeroed(cfg: &AeConfig, channels: usize) -> Self {
        let mut ae = Self::new(cfg, channels, &mut Rng::new(0));
        let ids: Vec<_> = ae.store.ids().collect();
        for id in ids {
            ae.store.get_mut(id).data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
        ae
    }

    pub fn checkpoint(&self, seed: u64) -> Checkpoint {
        let meta = serde_json::json!({ "config": self.cfg, "channels": self.channels });
        Checkpoint::new(CKPT_KIND, seed, meta, self.store.clone())
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let cfg: AeConfig = serde_json::from_value(ck.meta["config"].clone()).map_err(|e| config_err!("autoencoder checkpoint: {e}"))?;
        let channels = ck.meta["channels"].as_u64().ok_or_else(|| config_err!("autoencoder checkpoint lacks channels"))? as usize;
        let mut ae = Self::new(&cfg, channels, &mut Rng::new(0));
        ae.store.load_from(&ck.params.to_entries())?;
        if ck.params.is_frozen() {
            ae.store.freeze();
        }
        Ok(ae)
    }

    pub fn encode_graph(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<(Var, Var)> {
        let mut h = self.enc_in.forward(g, p, x)?;
        for b in &self.enc_blocks {
            h = b.forward(g, p, h)?;
        }
        let out = self.enc_out.forward(g, p, h)?;
        let mean = g.slice_cols(out, 0, self.cfg.c_z)?;
        let lv = g.slice_cols(out, self.cfg.c_z, 2 * self.cfg.c_z)?;
        let lv = g.clamp(lv, self.cfg.logvar_min, self.cfg.logvar_max);
        Ok((mean, lv))
    }

    /// Output is centred pixels (no clamp), so it can be used inside losses.
    pub fn decode_graph(&self, g: &mut Graph, p: &Bound, z: Var) -> Result<Var> {
        let mut h = self.dec_in.forward(g, p, z)?;
        for b in &self.dec_blocks {
            h = b.forward(g, p, h)?;
        }
        self.dec_out.forward(g, p, h)
    }

    /// Per-token `(mean, logvar)` of the posterior.
    pub fn encode_stats(&self, v: &Video) -> Result<(GridDims, Tensor, Tensor)> {
        if v.channels != self.channels {
            return Err(dim_err!("video has {} channels, autoencoder {}", v.channels, self.channels));
        }
        let (dims, x) = patchify(v, &self.cfg)?;
        let mut g = Graph::new();
        let p = g.bind(&self.store, false);
        let xv = g.constant(x);
        let (m, lv) = self.encode_graph(&mut g, &p, xv)?;
        Ok((dims, g.value(m).clone(), g.value(lv).clone()))
    }

    pub fn encode(&self, v: &Video, rng: &mut Rng, sample: bool) -> Result<LatentGrid> {
        let (dims, mean, lv) = self.encode_stats(v)?;
        let values = if sample {
            let mut out = mean;
            for (o, l) in out.data_mut().iter_mut().zip(lv.data()) {
                *o += (0.5 * l).exp() * rng.normal();
            }
            out
        } else {
            mean
        };
        LatentGrid::new(dims, values)
    }

    pub fn decode(&self, z: &LatentGrid, fps: f64) -> Result<Video> {
        if z.channels() != self.cfg.c_z {
            return Err(dim_err!("latent grid has {} channels, decoder expects {}", z.channels(), self.cfg.c_z));
        }
        let mut g = Graph::new();
        let p = g.bind(&self.store, false);
        let zv = g.constant(z.values.clone());
        let out = self.decode_graph(&mut g, &p, zv)?;
        unpatchify(z.dims, g.value(out), &self.cfg, self.channels, fps)
    }
}

pub fn mse(a: &Video, b: &Video) -> Result<f64> {
    if a.data().len() != b.data().len() {
        return Err(dim_err!("videos differ in size"));
    }
    let s: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (*x as f64 - *y as f64).powi(2)).sum();
    Ok(s / a.data().len() as f64)
}

/// Peak signal-to-noise ratio for unit-range pixels.
pub fn psnr(a: &Video, b: &Video) -> Result<f64> {
    Ok(-10.0 * mse(a, b)?.max(1e-20).log10())
}

pub fn reconstruction_psnr(ae: &AutoEncoder, v: &Video) -> Result<f64> {
    let z = ae.encode(v, &mut Rng::new(0), false)?;
    psnr(v, &ae.decode(&z, v.fps)?)
}

/// Train from scratch on `videos`; returns the frozen model and loss curve.
pub fn train_autoencoder(videos: &[&Video], cfg: &AeConfig, channels: usize) -> Result<(AutoEncoder, Vec<f64>)> {
    let mut ae = AutoEncoder::new(cfg, channels, &mut Rng::new(cfg.train.seed));
    let mut state = TrainState::new(&[&ae.store]);
    train_autoencoder_from(&mut ae, &mut state, videos, |_, _| Ok(()))?;
    ae.store.freeze();
    Ok((ae, state.losses))
}

/// Continue training `ae` from `state`; `on_step` sees the store after every update.
pub fn train_autoencoder_from(
    ae: &mut AutoEncoder,
    state: &mut TrainState,
    videos: &[&Video],
    mut on_step: impl FnMut(&ParamStore, &TrainState) -> Result<()>,
) -> Result<()> {
    if videos.is_empty() {
        return Err(config_err!("autoencoder training needs a nonempty corpus"));
    }
    let tokens: Vec<Tensor> = videos.iter().map(|v| patchify(v, &ae.cfg).map(|x| x.1)).collect::<Result<_>>()?;
    let model = ae.clone();
    let cfg = ae.cfg.clone();
    train::run(
        &mut [&mut ae.store],
        &cfg.train,
        tokens.len(),
        state,
        |g, p, ctx| {
            let parts: Vec<&Tensor> = ctx.batch.iter().map(|&i| &tokens[i]).collect();
            let x = Rc::new(Tensor::vstack(&parts)?);
            let xv = g.constant((*x).clone());
            let (mean, lv) = model.encode_graph(g, &p[0], xv)?;
            let noise = g.constant(ctx.rng.randn(g.value(mean).shape()));
            let half = g.scale(lv, 0.5);
            let std = g.exp(half);
            let eps = g.mul(std, noise)?;
            let z = g.add(mean, eps)?;
            let recon = model.decode_graph(g, &p[0], z)?;
            let rec = g.mse(recon, x)?;
            if cfg.beta == 0.0 {
                return Ok(rec);
            }
            let kl = g.kl_diag(mean, lv)?;
            let kl = g.scale(kl, cfg.beta);
            g.add(rec, kl)
        },
        |stores, st| on_step(stores[0], st),
    )
    .map_err(|e| match e {
        Error::TrainingAbort { step, reason } => Error::TrainingAbort {
            step,
            reason: format!("autoencoder: {reason}"),
        },
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> AeConfig {
        AeConfig {
            hidden: 16,
            c_z: 4,
            ..AeConfig::default()
        }
    }

    #[test]
    fn patchify_round_trips() {
        let cfg = tiny_cfg();
        let data: Vec<f32> = (0..4 * 3 * 8 * 8).map(|i| (i % 97) as f32 / 97.0).collect();
        let v = Video::new(4, 3, 8, 8, 8.0, data).unwrap();
        let (dims, x) = patchify(&v, &cfg).unwrap();
        assert_eq!((dims.t, dims.h, dims.w), (2, 2, 2));
        let back = unpatchify(dims, &x, &cfg, 3, 8.0).unwrap();
        assert!(mse(&v, &back).unwrap() < 1e-12);
    }

    #[test]
    fn zero_video_zero_weights_gives_zero_grid() {
        let ae = AutoEncoder::zeroed(&tiny_cfg(), 3);
        let v = Video::filled(2, 3, 4, 4, 8.0, 0.0);
        let z = ae.encode(&v, &mut Rng::new(0), false).unwrap();
        assert!(z.values.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn zero_grid_decodes_to_mid_gray() {
        let ae = AutoEncoder::zeroed(&tiny_cfg(), 3);
        let z = LatentGrid::zeros(GridDims::new(1, 2, 2), 4);
        let v = ae.decode(&z, 8.0).unwrap();
        assert!(v.data().iter().all(|&x| x == 0.5));
    }

    #[test]
    fn mean_encoding_and_decoding_are_deterministic() {
        let ae = AutoEncoder::new(&tiny_cfg(), 3, &mut Rng::new(1));
        let v = Video::new(2, 3, 4, 4, 8.0, Rng::new(2).normal_vec(96).iter().map(|x| (0.5 + 0.2 * x) as f32).collect()).unwrap();
        let a = ae.encode(&v, &mut Rng::new(5), false).unwrap();
        let b = ae.encode(&v, &mut Rng::new(6), false).unwrap();
        assert_eq!(a, b);
        assert_eq!(ae.decode(&a, 8.0).unwrap(), ae.decode(&a, 8.0).unwrap());
    }

    #[test]
    fn indivisible_video_is_config_error() {
        let ae = AutoEncoder::new(&tiny_cfg(), 3, &mut Rng::new(1));
        let v = Video::filled(3, 3, 4, 4, 8.0, 0.5);
        assert!(matches!(ae.encode(&v, &mut Rng::new(0), false), Err(Error::Config(_))));
    }

    #[test]
    fn sampled_std_matches_posterior() {
        let ae = AutoEncoder::new(&tiny_cfg(), 3, &mut Rng::new(4));
        let v = Video::filled(2, 3, 4, 4, 8.0, 0.8);
        let (_, mean, lv) = ae.encode_stats(&v).unwrap();
        let n = 10_000;
        let mut rng = Rng::new(9);
        let c = mean.cols();
        let mut sum = vec![0.0; c];
        let mut sq = vec![0.0; c];
        for _ in 0..n {
            let z = ae.encode(&v, &mut rng, true).unwrap();
            for j in 0..c {
                let d = z.values.data()[j] - mean.data()[j];
                sum[j] += d;
                sq[j] += d * d;
            }
        }
        for j in 0..c {
            let var = sq[j] / n as f64 - (sum[j] / n as f64).powi(2);
            let want = (0.5 * lv.data()[j]).exp();
            assert!((var.sqrt() / want - 1.0).abs() < 0.05, "{} vs {want}", var.sqrt());
        }
    }

    #[test]
    fn compression_ratio_matches_grid() {
        let cfg = AeConfig::default();
        let dims = cfg.latent_dims(16, 32, 32).unwrap();
        let pixels = 16.0 * 3.0 * 32.0 * 32.0;
        assert_eq!(pixels / (dims.len() * cfg.c_z) as f64, cfg.compression_ratio(3));
    }

    #[test]
    fn overfits_single_clip() {
        let cfg = AeConfig {
            hidden: 64,
            c_z: 8,
            train: TrainConfig {
                steps: 400,
                batch_size: 1,
                lr: 3e-3,
                ..TrainConfig::default()
            },
            ..AeConfig::default()
        };
        let data: Vec<f32> = (0..2 * 3 * 8 * 8)
            .map(|i| if (i / 8) % 2 == 0 { 0.8 } else { 0.2 })
            .collect();
        let v = Video::new(2, 3, 8, 8, 8.0, data).unwrap();
        let (ae, losses) = train_autoencoder(&[&v], &cfg, 3).unwrap();
        let z = ae.encode(&v, &mut Rng::new(0), false).unwrap();
        let err = mse(&v, &ae.decode(&z, 8.0).unwrap()).unwrap();
        assert!(err < 1e-3, "mse {err}");
        assert!(losses.last().unwrap() < &losses[0]);
        assert!(ae.store.is_frozen());
    }

    #[test]
    fn beta_zero_reports_pure_reconstruction() {
        let v = Video::filled(2, 3, 4, 4, 8.0, 0.3);
        let mk = |beta| AeConfig {
            beta,
            train: TrainConfig {
                steps: 1,
                batch_size: 1,
                ..TrainConfig::default()
            },
            ..tiny_cfg()
        };
        let (_, l0) = train_autoencoder(&[&v], &mk(0.0), 3).unwrap();
        let (_, l1) = train_autoencoder(&[&v], &mk(10.0), 3).unwrap();
        // Same init and noise, so the difference is exactly the KL term.
        assert!(l1[0] > l0[0]);
    }
}
