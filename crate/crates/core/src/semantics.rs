//! Semantic representations: a small video encoder trained to recognise the
//! corpus factors, and the per-token MLP that compresses its output into a
//! low-dimensional Gaussian token space.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{config_err, dim_err, validation_err, Error, Result};
use crate::grid::{GridDims, RawSemanticGrid, SemanticGrid};
use crate::nn::{Block, Embedding, Linear};
use crate::numerics::{AttnMask, Bound, Graph, ParamStore, Rng, Tensor, Var};
use crate::synthdata::{subsample_stride, Clip, FactorSpec, Video, VocabSizes};
use crate::train::{self, TrainConfig, TrainState};

pub const ENCODER_KIND: &str = "semantic_encoder";
pub const COMPRESSOR_KIND: &str = "compressor";
pub const PROBE_TRUNK_KIND: &str = "probe_trunk";
pub const PROBE_HEADS_KIND: &str = "probe_heads";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SemConfig {
    pub p_s: usize,
    pub d: usize,
    pub heads: usize,
    pub blocks: usize,
    pub mlp_ratio: usize,
    pub train: TrainConfig,
}

impl Default for SemConfig {
    fn default() -> Self {
        Self {
            p_s: 8,
            d: 64,
            heads: 4,
            blocks: 1,
            mlp_ratio: 2,
            train: TrainConfig {
                steps: 600,
                batch_size: 8,
                lr: 2e-3,
                ..TrainConfig::default()
            },
        }
    }
}

/// Input geometry fixed when the encoder is built.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SemGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Frame stride applied before encoding.
    pub stride: usize,
    /// Frame pairs per encoded chunk; longer inputs are encoded chunk by chunk.
    pub pairs: usize,
}

impl SemGeometry {
    pub fn grid(&self, p_s: usize, pairs: usize) -> GridDims {
        GridDims::new(pairs, self.height / p_s, self.width / p_s)
    }
}

/// Temporal pairs of `p_s × p_s` patches, concatenated: rows in raster order,
/// columns `(frame-in-pair, c, dy, dx)`, pixels centred on zero.
pub fn pair_tokens(v: &Video, p_s: usize) -> Result<(GridDims, Tensor)> {
    if v.frames % 2 != 0 {
        return Err(validation_err!("semantic encoder needs an even frame count, got {}", v.frames));
    }
    if v.height % p_s != 0 || v.width % p_s != 0 {
        return Err(config_err!("frame {}x{} not divisible by semantic patch {p_s}", v.height, v.width));
    }
    let dims = GridDims::new(v.frames / 2, v.height / p_s, v.width / p_s);
    let cols = 2 * v.channels * p_s * p_s;
    let mut out = Vec::with_capacity(dims.len() * cols);
    for i in 0..dims.len() {
        let (t, h, w) = dims.coords(i);
        for df in 0..2 {
            for c in 0..v.channels {
                for dy in 0..p_s {
                    for dx in 0..p_s {
                        out.push(v.pixel(2 * t + df, c, h * p_s + dy, w * p_s + dx) as f64 - 0.5);
                    }
                }
            }
        }
    }
    Ok((dims, Tensor::matrix(dims.len(), cols, out)?))
}

#[derive(Clone, Debug)]
pub struct SemanticEncoder {
    pub cfg: SemConfig,
    pub geom: SemGeometry,
    pub store: ParamStore,
    embed: Linear,
    pos_t: Embedding,
    pos_h: Embedding,
    pos_w: Embedding,
    blocks: Vec<Block>,
    norm_out: crate::numerics::ParamId,
}

impl SemanticEncoder {
    pub fn new(cfg: &SemConfig, geom: SemGeometry, rng: &mut Rng) -> Result<Self> {
        if cfg.d % cfg.heads != 0 {
            return Err(config_err!("semantic width {} not divisible by {} heads", cfg.d, cfg.heads));
        }
        let dims = geom.grid(cfg.p_s, geom.pairs);
        let mut s = ParamStore::new();
        let embed = Linear::new(&mut s, "embed", 2 * geom.channels * cfg.p_s * cfg.p_s, cfg.d, true, rng);
        let pos_t = Embedding::new(&mut s, "pos_t", dims.t, cfg.d, 0.1, rng);
        let pos_h = Embedding::new(&mut s, "pos_h", dims.h, cfg.d, 0.1, rng);
        let pos_w = Embedding::new(&mut s, "pos_w", dims.w, cfg.d, 0.1, rng);
        let blocks = (0..cfg.blocks)
            .map(|i| Block::new(&mut s, &format!("block{i}"), cfg.d, cfg.heads, cfg.mlp_ratio, rng))
            .collect();
        let norm_out = s.add("norm_out", Tensor::full(&[cfg.d], 1.0));
        Ok(Self {
            cfg: cfg.clone(),
            geom,
            store: s,
            embed,
            pos_t,
            pos_h,
            pos_w,
            blocks,
            norm_out,
        })
    }

    pub fn chunk_dims(&self) -> GridDims {
        self.geom.grid(self.cfg.p_s, self.geom.pairs)
    }

    pub fn checkpoint(&self, kind: &str, seed: u64) -> Checkpoint {
        let meta = serde_json::json!({ "config": self.cfg, "geometry": self.geom });
        Checkpoint::new(kind, seed, meta, self.store.clone())
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let cfg: SemConfig = serde_json::from_value(ck.meta["config"].clone()).map_err(|e| config_err!("semantic checkpoint: {e}"))?;
        let geom: SemGeometry =
            serde_json::from_value(ck.meta["geometry"].clone()).map_err(|e| config_err!("semantic checkpoint: {e}"))?;
        let mut enc = Self::new(&cfg, geom, &mut Rng::new(0))?;
        enc.store.load_from(&ck.params.to_entries())?;
        if ck.params.is_frozen() {
            enc.store.freeze();
        }
        Ok(enc)
    }

    /// Pair tokens for each chunk of `v` at encoder frame rate.
    pub fn chunk_inputs(&self, v: &Video) -> Result<Vec<Tensor>> {
        if v.channels != self.geom.channels || v.height != self.geom.height || v.width != self.geom.width {
            return Err(dim_err!(
                "video {}x{}x{} does not match semantic encoder input {}x{}x{}",
                v.channels,
                v.height,
                v.width,
                self.geom.channels,
                self.geom.height,
                self.geom.width
            ));
        }
        let sub = subsample_stride(v, self.geom.stride)?;
        let per_chunk = 2 * self.geom.pairs;
        if sub.frames % per_chunk != 0 {
            return Err(config_err!(
                "{} frames at stride {} give {} encoder frames, not a multiple of the {per_chunk}-frame chunk",
                v.frames,
                self.geom.stride,
                sub.frames
            ));
        }
        (0..sub.frames / per_chunk)
            .map(|c| {
                let idx: Vec<usize> = (c * per_chunk..(c + 1) * per_chunk).collect();
                pair_tokens(&sub.select_frames(&idx), self.cfg.p_s).map(|x| x.1)
            })
            .collect()
    }

    /// Encode `n` stacked chunks of pair tokens (`n·L × patch` rows).
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var, n: usize) -> Result<Var> {
        let dims = self.chunk_dims();
        let mut h = self.embed.forward(g, p, x)?;
        let (mut it, mut ih, mut iw) = (Vec::new(), Vec::new(), Vec::new());
        for _ in 0..n {
            for i in 0..dims.len() {
                let (t, hh, ww) = dims.coords(i);
                it.push(t);
                ih.push(hh);
                iw.push(ww);
            }
        }
        for (emb, idx) in [(&self.pos_t, it), (&self.pos_h, ih), (&self.pos_w, iw)] {
            let e = emb.forward(g, p, &idx)?;
            h = g.add(h, e)?;
        }
        let mask = Rc::new(AttnMask::full(dims.len(), dims.len()).repeat_block_diagonal(n));
        for b in &self.blocks {
            h = b.forward(g, p, h, &mask, None)?;
        }
        let one = g.constant(Tensor::full(&[self.cfg.d], 1.0));
        g.rms_norm(h, p.var(self.norm_out), one, crate::numerics::NORM_EPS)
    }

    /// Raw semantic grid of a full-rate video; long inputs are encoded
    /// chunk-wise and concatenated along time.
    pub fn encode(&self, v: &Video) -> Result<RawSemanticGrid> {
        let chunks = self.chunk_inputs(v)?;
        let n = chunks.len();
        let refs: Vec<&Tensor> = chunks.iter().collect();
        let x = Tensor::vstack(&refs)?;
        let mut g = Graph::new();
        let p = g.bind(&self.store, false);
        let xv = g.constant(x);
        let out = self.forward(&mut g, &p, xv, n)?;
        let d = self.chunk_dims();
        RawSemanticGrid::new(GridDims::new(d.t * n, d.h, d.w), g.value(out).clone())
    }
}

/// Factor-prediction heads on mean-pooled encoder tokens.
#[derive(Clone, Debug)]
pub struct FactorHeads {
    pub store: ParamStore,
    vocab: VocabSizes,
    shape: Linear,
    color: Linear,
    background: Linear,
    motion: Linear,
    velocity: Linear,
    start: Linear,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FactorPrediction {
    pub shape_id: usize,
    pub color: usize,
    pub background_id: usize,
    pub motion_pattern: usize,
    pub velocity: [f64; 2],
}

fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

impl FactorHeads {
    pub fn new(d: usize, vocab: VocabSizes, rng: &mut Rng) -> Self {
        let mut s = ParamStore::new();
        let shape = Linear::new(&mut s, "head.shape", d, vocab.shapes, true, rng);
        let color = Linear::new(&mut s, "head.color", d, vocab.colors, true, rng);
        let background = Linear::new(&mut s, "head.background", d, vocab.backgrounds, true, rng);
        let motion = Linear::new(&mut s, "head.motion", d, vocab.motions, true, rng);
        let velocity = Linear::new(&mut s, "head.velocity", d, 2, true, rng);
        let start = Linear::new(&mut s, "head.start", d, 2, true, rng);
        Self {
            store: s,
            vocab,
            shape,
            color,
            background,
            motion,
            velocity,
            start,
        }
    }

    /// `(logits per categorical factor, velocity, normalised start)`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, pooled: Var) -> Result<([Var; 4], Var, Var)> {
        Ok((
            [
                self.shape.forward(g, p, pooled)?,
                self.color.forward(g, p, pooled)?,
                self.background.forward(g, p, pooled)?,
                self.motion.forward(g, p, pooled)?,
            ],
            self.velocity.forward(g, p, pooled)?,
            self.start.forward(g, p, pooled)?,
        ))
    }
}

/// Encoder trunk plus heads. Used once as the semantic encoder's pretraining
/// wrapper, and again (own seed) as the evaluation factor probe.
#[derive(Clone, Debug)]
pub struct FactorNet {
    pub trunk: SemanticEncoder,
    pub heads: FactorHeads,
}

fn pool_matrix(n: usize, per: usize) -> Tensor {
    let mut m = Tensor::zeros(&[n, n * per]);
    for i in 0..n {
        for j in 0..per {
            m.data_mut()[i * n * per + i * per + j] = 1.0 / per as f64;
        }
    }
    m
}

/// Held-out quality of a [`FactorNet`].
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FactorReport {
    pub shape_acc: f64,
    pub color_acc: f64,
    pub background_acc: f64,
    pub motion_acc: f64,
    pub velocity_mae: f64,
}

impl FactorNet {
    pub fn new(cfg: &SemConfig, geom: SemGeometry, vocab: VocabSizes, rng: &mut Rng) -> Result<Self> {
        let trunk = SemanticEncoder::new(cfg, geom, rng)?;
        let heads = FactorHeads::new(cfg.d, vocab, rng);
        Ok(Self { trunk, heads })
    }

    /// Trunk and heads checkpoints, both frozen.
    pub fn checkpoints(&self, seed: u64) -> (Checkpoint, Checkpoint) {
        let mut trunk = self.trunk.checkpoint(PROBE_TRUNK_KIND, seed);
        trunk.params.freeze();
        let mut heads = self.heads.store.clone();
        heads.freeze();
        let meta = serde_json::json!({ "d": self.trunk.cfg.d, "vocab": self.heads.vocab });
        (trunk, Checkpoint::new(PROBE_HEADS_KIND, seed, meta, heads))
    }

    pub fn from_checkpoints(trunk: &Checkpoint, heads: &Checkpoint) -> Result<Self> {
        let trunk = SemanticEncoder::from_checkpoint(trunk)?;
        let vocab: VocabSizes =
            serde_json::from_value(heads.meta["vocab"].clone()).map_err(|e| config_err!("probe checkpoint: {e}"))?;
        let mut h = FactorHeads::new(trunk.cfg.d, vocab, &mut Rng::new(0));
        h.store.load_from(&heads.params.to_entries())?;
        Ok(Self { trunk, heads: h })
    }

    /// Pooled features for `n` videos whose chunk inputs are stacked in `x`.
    pub fn pooled(&self, g: &mut Graph, pt: &Bound, x: Var, chunks_per_video: usize, n: usize) -> Result<Var> {
        let tokens = self.trunk.forward(g, pt, x, n * chunks_per_video)?;
        let per = chunks_per_video * self.trunk.chunk_dims().len();
        let pm = g.constant(pool_matrix(n, per));
        g.matmul(pm, tokens)
    }

    pub fn predict(&self, videos: &[&Video]) -> Result<Vec<FactorPrediction>> {
        let mut out = Vec::with_capacity(videos.len());
        for chunk in videos.chunks(16) {
            let inputs: Vec<Vec<Tensor>> = chunk.iter().map(|v| self.trunk.chunk_inputs(v)).collect::<Result<_>>()?;
            let per = inputs[0].len();
            if inputs.iter().any(|c| c.len() != per) {
                return Err(dim_err!("probe batch mixes video lengths"));
            }
            let refs: Vec<&Tensor> = inputs.iter().flatten().collect();
            let mut g = Graph::new();
            let pt = g.bind(&self.trunk.store, false);
            let ph = g.bind(&self.heads.store, false);
            let x = g.constant(Tensor::vstack(&refs)?);
            let pooled = self.pooled(&mut g, &pt, x, per, chunk.len())?;
            let (logits, vel, _) = self.heads.forward(&mut g, &ph, pooled)?;
            for i in 0..chunk.len() {
                let am = |v: Var| argmax(g.value(v).row(i));
                let vr = g.value(vel).row(i);
                out.push(FactorPrediction {
                    shape_id: am(logits[0]),
                    color: am(logits[1]),
                    background_id: am(logits[2]),
                    motion_pattern: am(logits[3]),
                    velocity: [vr[0], vr[1]],
                });
            }
        }
        Ok(out)
    }

    pub fn report(&self, clips: &[&Clip]) -> Result<FactorReport> {
        if clips.is_empty() {
            return Err(config_err!("no clips to evaluate"));
        }
        let videos: Vec<&Video> = clips.iter().map(|c| &c.video).collect();
        let preds = self.predict(&videos)?;
        let n = clips.len() as f64;
        let frac = |f: &dyn Fn(&FactorPrediction, &FactorSpec) -> bool| {
            preds.iter().zip(clips).filter(|(p, c)| f(p, &c.spec)).count() as f64 / n
        };
        Ok(FactorReport {
            shape_acc: frac(&|p, s| p.shape_id == s.shape_id),
            color_acc: frac(&|p, s| p.color == s.color),
            background_acc: frac(&|p, s| p.background_id == s.background_id),
            motion_acc: frac(&|p, s| p.motion_pattern == s.motion_pattern),
            velocity_mae: preds
                .iter()
                .zip(clips)
                .map(|(p, c)| ((p.velocity[0] - c.spec.velocity[0]).abs() + (p.velocity[1] - c.spec.velocity[1]).abs()) / 2.0)
                .sum::<f64>()
                / n,
        })
    }
}

/// Train trunk and heads to predict every factor of `clips`. Fails when shape
/// accuracy on the training clips does not beat chance.
pub fn train_factor_net(
    clips: &[&Clip],
    cfg: &SemConfig,
    geom: SemGeometry,
    vocab: VocabSizes,
) -> Result<(FactorNet, Vec<f64>)> {
    let mut net = FactorNet::new(cfg, geom, vocab, &mut Rng::new(cfg.train.seed))?;
    let inputs: Vec<Vec<Tensor>> = clips.iter().map(|c| net.trunk.chunk_inputs(&c.video)).collect::<Result<_>>()?;
    let per = inputs.first().map(|c| c.len()).unwrap_or(0);
    if inputs.iter().any(|c| c.len() != per) {
        return Err(dim_err!("factor-net training clips differ in length"));
    }
    let model = net.clone();
    let width = geom.width.max(geom.height) as f64;
    let mut state = TrainState::new(&[&net.trunk.store, &net.heads.store]);
    let mut stores = [&mut net.trunk.store, &mut net.heads.store];
    train::run(
        &mut stores,
        &cfg.train,
        clips.len(),
        &mut state,
        |g, p, ctx| {
            let refs: Vec<&Tensor> = ctx.batch.iter().flat_map(|&i| inputs[i].iter()).collect();
            let x = g.constant(Tensor::vstack(&refs)?);
            let n = ctx.batch.len();
            let pooled = model.pooled(g, &p[0], x, per, n)?;
            let (logits, vel, start) = model.heads.forward(g, &p[1], pooled)?;
            let specs: Vec<&FactorSpec> = ctx.batch.iter().map(|&i| &clips[i].spec).collect();
            let labels: [Rc<[usize]>; 4] = [
                specs.iter().map(|s| s.shape_id).collect(),
                specs.iter().map(|s| s.color).collect(),
                specs.iter().map(|s| s.background_id).collect(),
                specs.iter().map(|s| s.motion_pattern).collect(),
            ];
            let mut terms = Vec::new();
            for (l, y) in logits.iter().zip(labels) {
                terms.push(g.cross_entropy(*l, y)?);
            }
            let vt: Vec<f64> = specs.iter().flat_map(|s| s.velocity).collect();
            terms.push(g.mse(vel, Rc::new(Tensor::matrix(n, 2, vt)?))?);
            let st: Vec<f64> = specs.iter().flat_map(|s| s.start_position.map(|x| x / width)).collect();
            terms.push(g.mse(start, Rc::new(Tensor::matrix(n, 2, st)?))?);
            let all = g.concat_rows(&terms)?;
            Ok(g.sum(all))
        },
        |_, _| Ok(()),
    )?;
    let train_acc = net.report(clips)?.shape_acc;
    let chance = 1.0 / vocab.shapes as f64;
    if vocab.shapes > 1 && train_acc <= chance {
        return Err(Error::TrainingAbort {
            step: cfg.train.steps,
            reason: format!("shape accuracy {train_acc:.3} not above chance {chance:.3}"),
        });
    }
    Ok((net, state.losses))
}

/// Pretrain the encoder on factor labels, then drop the heads and freeze.
pub fn pretrain_semantic_encoder(
    clips: &[&Clip],
    cfg: &SemConfig,
    geom: SemGeometry,
    vocab: VocabSizes,
) -> Result<(SemanticEncoder, FactorReport, Vec<f64>)> {
    let (net, losses) = train_factor_net(clips, cfg, geom, vocab)?;
    let report = net.report(clips)?;
    let mut enc = net.trunk;
    enc.store.freeze();
    Ok((enc, report, losses))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompressorConfig {
    pub d_c: usize,
    /// Hidden width of the per-token MLP; 0 makes it a single linear map.
    pub hidden: usize,
    pub kl_weight: f64,
    pub noise_level: f64,
    pub logvar_min: f64,
    pub logvar_max: f64,
}

impl Default for CompressorConfig {
    fn default() -> Self {
        Self {
            d_c: 8,
            hidden: 64,
            kl_weight: 1e-3,
            noise_level: 0.1,
            logvar_min: -10.0,
            logvar_max: 10.0,
        }
    }
}

/// Per-token MLP `d → (mean, logvar)` in `d_c` dimensions.
#[derive(Clone, Debug)]
pub struct Compressor {
    pub cfg: CompressorConfig,
    pub d: usize,
    pub store: ParamStore,
    fc1: Option<Linear>,
    out: Linear,
}

impl Compressor {
    pub fn new(cfg: &CompressorConfig, d: usize, rng: &mut Rng) -> Self {
        let mut s = ParamStore::new();
        let (fc1, width) = if cfg.hidden > 0 {
            (Some(Linear::new(&mut s, "fc1", d, cfg.hidden, true, rng)), cfg.hidden)
        } else {
            (None, d)
        };
        let out = Linear::new(&mut s, "out", width, 2 * cfg.d_c, true, rng);
        Self {
            cfg: cfg.clone(),
            d,
            store: s,
            fc1,
            out,
        }
    }

    pub fn zeroed(cfg: &CompressorConfig, d: usize) -> Self {
        let mut c = Self::new(cfg, d, &mut Rng::new(0));
        let ids: Vec<_> = c.store.ids().collect();
        for id in ids {
            c.store.get_mut(id).data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
        c
    }

    pub fn checkpoint(&self, seed: u64) -> Checkpoint {
        let meta = serde_json::json!({ "config": self.cfg, "d": self.d });
        Checkpoint::new(COMPRESSOR_KIND, seed, meta, self.store.clone())
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let cfg: CompressorConfig =
            serde_json::from_value(ck.meta["config"].clone()).map_err(|e| config_err!("compressor checkpoint: {e}"))?;
        let d = ck.meta["d"].as_u64().ok_or_else(|| config_err!("compressor checkpoint lacks d"))? as usize;
        let mut c = Self::new(&cfg, d, &mut Rng::new(0));
        c.store.load_from(&ck.params.to_entries())?;
        if ck.params.is_frozen() {
            c.store.freeze();
        }
        Ok(c)
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<(Var, Var)> {
        let h = match &self.fc1 {
            Some(fc) => {
                let h = fc.forward(g, p, x)?;
                g.gelu(h)
            }
            None => x,
        };
        let o = self.out.forward(g, p, h)?;
        let mean = g.slice_cols(o, 0, self.cfg.d_c)?;
        let lv = g.slice_cols(o, self.cfg.d_c, 2 * self.cfg.d_c)?;
        Ok((mean, g.clamp(lv, self.cfg.logvar_min, self.cfg.logvar_max)))
    }

    /// Returns the (possibly sampled) grid with the posterior mean and logvar.
    pub fn compress(&self, z: &RawSemanticGrid, rng: &mut Rng, sample: bool) -> Result<(SemanticGrid, Tensor, Tensor)> {
        if z.channels() != self.d {
            return Err(dim_err!("semantic grid width {} but compressor expects {}", z.channels(), self.d));
        }
        let mut g = Graph::new();
        let p = g.bind(&self.store, false);
        let x = g.constant(z.values.clone());
        let (m, lv) = self.forward(&mut g, &p, x)?;
        let (mean, logvar) = (g.value(m).clone(), g.value(lv).clone());
        let mut values = mean.clone();
        if sample {
            for (v, l) in values.data_mut().iter_mut().zip(logvar.data()) {
                *v += (0.5 * l).exp() * rng.normal();
            }
        }
        Ok((SemanticGrid::new(z.dims, values)?, mean, logvar))
    }
}

/// `½ Σ (e^logvar + mean² − 1 − logvar)`, averaged over rows (tokens).
pub fn kl_diag_gaussian(mean: &Tensor, logvar: &Tensor) -> Result<f64> {
    if mean.shape() != logvar.shape() {
        return Err(dim_err!("kl: mean {:?} vs logvar {:?}", mean.shape(), logvar.shape()));
    }
    if !mean.all_finite() || !logvar.all_finite() {
        return Err(Error::Numeric("kl divergence of non-finite gaussian parameters".into()));
    }
    let s: f64 = mean
        .data()
        .iter()
        .zip(logvar.data())
        .map(|(m, l)| l.exp() + m * m - 1.0 - l)
        .sum();
    Ok(0.5 * s / mean.rows().max(1) as f64)
}

/// `(1 − level)·z + level·ξ` with fresh standard normal `ξ`.
pub fn corrupt_semantics(z: &SemanticGrid, level: f64, rng: &mut Rng) -> Result<SemanticGrid> {
    if !(0.0..=1.0).contains(&level) {
        return Err(validation_err!("noise level {level} outside [0, 1]"));
    }
    if level == 0.0 {
        return Ok(z.clone());
    }
    let mut v = z.values.clone();
    for x in v.data_mut() {
        *x = (1.0 - level) * *x + level * rng.normal();
    }
    z.with_values(v)
}
