//! Two-stage training and sampling, plus the matched-budget baselines.
//!
//! Stage one trains a latent generator conditioned on compressed semantic
//! tokens, jointly with the compressor. Stage two trains a semantic generator
//! on the (frozen) compressor's output. Sampling chains the two and decodes
//! with the frozen autoencoder.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autoencoder::AutoEncoder;
use crate::checkpoint::Checkpoint;
use crate::dit::{AttentionLayout, Condition, Dit, DitConfig, DitShape, LayoutMode, TokenKind};
use crate::error::{config_err, dim_err, Error, Result};
use crate::flow::{cfm_loss, euler_from, FlowBatch, SamplerConfig, TimeSchedule};
use crate::grid::GridDims;
use crate::numerics::{AttnMask, Graph, ParamStore, Rng, Tensor};
use crate::semantics::{corrupt_semantics, Compressor, CompressorConfig, SemanticEncoder};
use crate::synthdata::{corpus_hash, Clip, Video, VocabSizes};
use crate::train::{self, TrainConfig, TrainState};

pub const LATENT_GEN_KIND: &str = "latent_generator";
pub const SEM_GEN_KIND: &str = "semantic_generator";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageId {
    LatentGen,
    SemGen,
    BaselineCt,
    BaselineCtSwin,
    BaselineVae2stage,
}

impl StageId {
    pub fn as_str(self) -> &'static str {
        match self {
            StageId::LatentGen => "latent_gen",
            StageId::SemGen => "sem_gen",
            StageId::BaselineCt => "baseline_ct",
            StageId::BaselineCtSwin => "baseline_ct_swin",
            StageId::BaselineVae2stage => "baseline_vae2stage",
        }
    }

    /// Whether the latent generator of this stage reads semantic tokens.
    pub fn uses_semantics(self) -> bool {
        matches!(self, StageId::LatentGen | StageId::BaselineVae2stage)
    }

    pub fn source(self) -> SemSource {
        if self == StageId::BaselineVae2stage {
            SemSource::VaeLatent
        } else {
            SemSource::Encoder
        }
    }
}

/// Where stage-one conditioning tokens come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SemSource {
    /// The frozen semantic encoder.
    Encoder,
    /// Space-to-depth of the autoencoder latents onto the semantic grid.
    VaeLatent,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageConfig {
    pub dit: DitConfig,
    pub train: TrainConfig,
}

impl Default for StageConfig {
    fn default() -> Self {
        Self {
            dit: DitConfig::default(),
            train: TrainConfig {
                steps: 2000,
                batch_size: 8,
                lr: 1e-3,
                ..TrainConfig::default()
            },
        }
    }
}

impl StageConfig {
    pub fn validate(&self, stage: StageId) -> Result<()> {
        self.train.validate()?;
        self.dit.layout.validate()?;
        match (stage, self.dit.layout.mode) {
            (StageId::BaselineCt, LayoutMode::SwinInterleaved) => {
                Err(config_err!("baseline_ct uses full attention"))
            }
            (StageId::BaselineCtSwin, LayoutMode::Full) => {
                Err(config_err!("baseline_ct_swin needs the swin_interleaved layout"))
            }
            (StageId::SemGen, LayoutMode::SwinInterleaved) => {
                Err(config_err!("the semantic generator attends fully"))
            }
            _ => Ok(()),
        }
    }
}

/// Per-channel affine standardisation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(rows: &[&Tensor]) -> Result<Self> {
        let c = rows.first().map(|t| t.cols()).ok_or_else(|| config_err!("nothing to standardise"))?;
        let mut sum = vec![0.0; c];
        let mut sq = vec![0.0; c];
        let mut n = 0usize;
        for t in rows {
            if t.cols() != c {
                return Err(dim_err!("standardiser: {} vs {} channels", t.cols(), c));
            }
            for r in 0..t.rows() {
                for (k, x) in t.row(r).iter().enumerate() {
                    sum[k] += x;
                    sq[k] += x * x;
                }
            }
            n += t.rows();
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| (q / n as f64 - m * m).max(0.0).sqrt().max(1e-6))
            .collect();
        Ok(Self { mean, std })
    }

    pub fn identity(c: usize) -> Self {
        Self {
            mean: vec![0.0; c],
            std: vec![1.0; c],
        }
    }

    pub fn apply(&self, t: &Tensor) -> Tensor {
        self.map(t, |x, m, s| (x - m) / s)
    }

    pub fn invert(&self, t: &Tensor) -> Tensor {
        self.map(t, |x, m, s| x * s + m)
    }

    fn map(&self, t: &Tensor, f: impl Fn(f64, f64, f64) -> f64) -> Tensor {
        let c = self.mean.len();
        let mut out = t.clone();
        for (i, x) in out.data_mut().iter_mut().enumerate() {
            *x = f(*x, self.mean[i % c], self.std[i % c]);
        }
        out
    }
}

/// Rearrange a latent grid onto coarser `to` dims by stacking each block of
/// `(dt, dy, dx)` neighbours into the channel axis.
pub fn space_to_depth(from: GridDims, values: &Tensor, to: GridDims) -> Result<Tensor> {
    if from.t % to.t != 0 || from.h % to.h != 0 || from.w % to.w != 0 {
        return Err(config_err!("latent grid {from:?} does not tile onto {to:?}"));
    }
    let (ft, fh, fw) = (from.t / to.t, from.h / to.h, from.w / to.w);
    let c = values.cols();
    let mut out = Vec::with_capacity(values.len());
    for i in 0..to.len() {
        let (t, h, w) = to.coords(i);
        for dt in 0..ft {
            for dy in 0..fh {
                for dx in 0..fw {
                    out.extend_from_slice(values.row(from.index(t * ft + dt, h * fh + dy, w * fw + dx)));
                }
            }
        }
    }
    Tensor::matrix(to.len(), ft * fh * fw * c, out)
}

/// Hashes of the frozen modules a generator was trained against.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FrozenHashes {
    pub autoencoder: String,
    pub semantic_encoder: String,
}

/// Per-clip tensors shared by every generator trained on one corpus.
#[derive(Clone, Debug)]
pub struct TrainingData {
    pub conds: Vec<Condition>,
    pub latent_dims: GridDims,
    /// Standardised autoencoder means, one `n_latent × c_z` matrix per clip.
    pub latents: Vec<Tensor>,
    pub latent_stats: Standardizer,
    pub sem_dims: GridDims,
    /// Stage-one conditioning inputs before compression.
    pub raw: Vec<Tensor>,
    pub source: SemSource,
    pub corpus_hash: String,
    pub frozen: FrozenHashes,
    pub vocab: VocabSizes,
    pub fps: f64,
}

impl TrainingData {
    pub fn len(&self) -> usize {
        self.conds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.conds.is_empty()
    }

    /// Latent-time units covered by one semantic time step.
    pub fn sem_span(&self) -> f64 {
        self.latent_dims.t as f64 / self.sem_dims.t as f64
    }

    /// Semantic tokens per latent token.
    pub fn token_ratio(&self) -> f64 {
        self.sem_dims.len() as f64 / self.latent_dims.len() as f64
    }

    pub fn raw_channels(&self) -> usize {
        self.raw[0].cols()
    }
}

pub fn prepare(
    clips: &[Clip],
    ae: &AutoEncoder,
    encoder: &SemanticEncoder,
    source: SemSource,
    vocab: VocabSizes,
) -> Result<TrainingData> {
    let first = clips.first().ok_or_else(|| config_err!("empty corpus"))?;
    let (w, h) = (first.video.width, first.video.height);
    let mut dims = None;
    let mut means = Vec::with_capacity(clips.len());
    for c in clips {
        let (d, m, _) = ae.encode_stats(&c.video)?;
        if *dims.get_or_insert(d) != d {
            return Err(dim_err!("clips encode to different latent grids"));
        }
        means.push(m);
    }
    let latent_dims = dims.unwrap();
    let refs: Vec<&Tensor> = means.iter().collect();
    let latent_stats = Standardizer::fit(&refs)?;
    let latents: Vec<Tensor> = means.iter().map(|m| latent_stats.apply(m)).collect();
    let mut raw = Vec::with_capacity(clips.len());
    let mut sem_dims = None;
    for (c, z) in clips.iter().zip(&latents) {
        let r = encoder.encode(&c.video)?;
        sem_dims.get_or_insert(r.dims);
        raw.push(match source {
            SemSource::Encoder => r.values,
            SemSource::VaeLatent => space_to_depth(latent_dims, z, r.dims)?,
        });
    }
    let sem_dims = sem_dims.unwrap();
    if latent_dims.t % sem_dims.t != 0 {
        return Err(config_err!("latent time {} is not a multiple of semantic time {}", latent_dims.t, sem_dims.t));
    }
    Ok(TrainingData {
        conds: clips.iter().map(|c| Condition::from_spec(&c.spec, w, h)).collect(),
        latent_dims,
        latents,
        latent_stats,
        sem_dims,
        raw,
        source,
        corpus_hash: corpus_hash(clips),
        frozen: FrozenHashes {
            autoencoder: ae.store.hash(),
            semantic_encoder: encoder.store.hash(),
        },
        vocab,
        fps: first.video.fps,
    })
}

/// Stage-one model: DiT over latent tokens plus (optionally) the compressor.
#[derive(Clone, Debug)]
pub struct LatentGenerator {
    pub stage: StageId,
    pub dit: Dit,
    pub compressor: Option<Compressor>,
    pub latent_stats: Standardizer,
    pub source: SemSource,
    pub frozen: FrozenHashes,
    pub fps: f64,
}

#[derive(Serialize, Deserialize)]
struct LatentMeta {
    stage: StageId,
    latent_stats: Standardizer,
    source: SemSource,
    frozen: FrozenHashes,
    compressor_hash: Option<String>,
    fps: f64,
}

impl LatentGenerator {
    pub fn new(
        stage: StageId,
        cfg: &StageConfig,
        comp: &CompressorConfig,
        data: &TrainingData,
        seed: u64,
    ) -> Result<Self> {
        if stage == StageId::SemGen {
            return Err(config_err!("sem_gen is not a latent-generator stage"));
        }
        cfg.validate(stage)?;
        if stage.source() != data.source {
            return Err(config_err!("{} needs {:?} conditioning data, got {:?}", stage.as_str(), stage.source(), data.source));
        }
        let rng = Rng::new(seed);
        let compressor = stage
            .uses_semantics()
            .then(|| Compressor::new(comp, data.raw_channels(), &mut rng.derive(1)));
        let shape = DitShape {
            target_kind: TokenKind::Latent,
            target_channels: data.latents[0].cols(),
            target_dims: data.latent_dims,
            semantic: compressor.as_ref().map(|c| (c.cfg.d_c, data.sem_dims)),
            sem_span: data.sem_span(),
            vocab: data.vocab,
            // With semantics, factors reach the latent generator only
            // through the semantic tokens.
            condition: compressor.is_none(),
        };
        Ok(Self {
            stage,
            dit: Dit::new(&cfg.dit, &shape, &mut rng.derive(2))?,
            compressor,
            latent_stats: data.latent_stats.clone(),
            source: data.source,
            frozen: data.frozen.clone(),
            fps: data.fps,
        })
    }

    pub fn checkpoint(&self, seed: u64) -> Checkpoint {
        let meta = LatentMeta {
            stage: self.stage,
            latent_stats: self.latent_stats.clone(),
            source: self.source,
            frozen: self.frozen.clone(),
            compressor_hash: self.compressor.as_ref().map(|c| c.store.hash()),
            fps: self.fps,
        };
        let mut ck = self.dit.checkpoint(seed, serde_json::to_value(meta).expect("plain data"));
        ck.kind = LATENT_GEN_KIND.into();
        ck
    }

    pub fn from_checkpoints(ck: &Checkpoint, compressor: Option<&Checkpoint>) -> Result<Self> {
        let meta: LatentMeta =
            serde_json::from_value(ck.meta["extra"].clone()).map_err(|e| config_err!("latent generator checkpoint: {e}"))?;
        let compressor = match (&meta.compressor_hash, compressor) {
            (None, _) => None,
            (Some(want), Some(c)) => {
                let c = Compressor::from_checkpoint(c)?;
                if &c.store.hash() != want {
                    return Err(config_err!("compressor checkpoint does not match the one trained with this latent generator"));
                }
                Some(c)
            }
            (Some(_), None) => return Err(Error::Dependency("latent generator needs its compressor checkpoint".into())),
        };
        Ok(Self {
            stage: meta.stage,
            dit: Dit::from_checkpoint(ck)?,
            compressor,
            latent_stats: meta.latent_stats,
            source: meta.source,
            frozen: meta.frozen,
            fps: meta.fps,
        })
    }

    pub fn freeze(&mut self) {
        self.dit.store.freeze();
        if let Some(c) = &mut self.compressor {
            c.store.freeze();
        }
    }

    pub fn stores(&self) -> Vec<&ParamStore> {
        let mut v = vec![&self.dit.store];
        v.extend(self.compressor.as_ref().map(|c| &c.store));
        v
    }

    /// Standardised compressor means for each clip (targets of stage two).
    pub fn semantic_means(&self, data: &TrainingData) -> Result<Vec<Tensor>> {
        let comp = self.compressor.as_ref().ok_or_else(|| config_err!("{} has no compressor", self.stage.as_str()))?;
        let mut out = Vec::with_capacity(data.len());
        for r in &data.raw {
            let mut g = Graph::new();
            let p = g.bind(&comp.store, false);
            let x = g.constant(r.clone());
            let (m, _) = comp.forward(&mut g, &p, x)?;
            out.push(g.value(m).clone());
        }
        Ok(out)
    }
}

/// Loss of the latent generator on `idx` with noise drawn from `rng`.
/// Returns `(total, flow term, kl term)` graph nodes.
fn latent_loss(
    g: &mut Graph,
    gen: &LatentGenerator,
    bound: &[crate::numerics::Bound],
    data: &TrainingData,
    idx: &[usize],
    kl_weight: f64,
    masks: &[Rc<AttnMask>],
    rng: &mut Rng,
) -> Result<(crate::numerics::Var, crate::numerics::Var, Option<crate::numerics::Var>)> {
    let conds: Vec<Condition> = idx.iter().map(|&i| data.conds[i].clone()).collect();
    let mut sem = None;
    let mut kl = None;
    if let Some(comp) = &gen.compressor {
        let parts: Vec<&Tensor> = idx.iter().map(|&i| &data.raw[i]).collect();
        let x = g.constant(Tensor::vstack(&parts)?);
        let (mean, lv) = comp.forward(g, &bound[1], x)?;
        let noise = g.constant(rng.randn(g.value(mean).shape()));
        let half = g.scale(lv, 0.5);
        let std = g.exp(half);
        let eps = g.mul(std, noise)?;
        sem = Some(g.add(mean, eps)?);
        kl = Some(g.kl_diag(mean, lv)?);
    }
    let z0s: Vec<&Tensor> = idx.iter().map(|&i| &data.latents[i]).collect();
    let batch = FlowBatch::new(&z0s, TimeSchedule::Uniform, rng)?;
    let flow = cfm_loss(g, &batch, |g, zt, t| gen.dit.forward(g, &bound[0], zt, sem, &conds, t, masks))?;
    let total = match kl {
        Some(k) if kl_weight > 0.0 => {
            let k = g.scale(k, kl_weight);
            g.add(flow, k)?
        }
        _ => flow,
    };
    Ok((total, flow, kl))
}

/// Stage one (or a latent baseline). The compressor, if any, trains jointly.
/// `on_step` receives the trainable stores (DiT first) after each update.
pub fn train_latent_generator(
    gen: &mut LatentGenerator,
    data: &TrainingData,
    cfg: &TrainConfig,
    kl_weight: f64,
    state: &mut TrainState,
    on_step: impl FnMut(&[&mut ParamStore], &TrainState) -> Result<()>,
) -> Result<()> {
    check_frozen_inputs(gen, data)?;
    let model = gen.clone();
    let masks = model.dit.batch_masks(cfg.batch_size)?;
    let mut stores: Vec<&mut ParamStore> = vec![&mut gen.dit.store];
    if let Some(c) = &mut gen.compressor {
        stores.push(&mut c.store);
    }
    train::run(
        &mut stores,
        cfg,
        data.len(),
        state,
        |g, p, ctx| Ok(latent_loss(g, &model, p, data, ctx.batch, kl_weight, &masks, ctx.rng)?.0),
        on_step,
    )
}

fn check_frozen_inputs(gen: &LatentGenerator, data: &TrainingData) -> Result<()> {
    if gen.frozen != data.frozen {
        return Err(config_err!(
            "frozen-module hashes differ: generator {:?}, data {:?}",
            gen.frozen,
            data.frozen
        ));
    }
    Ok(())
}

/// Mean flow loss (without KL) on `idx` under a fixed noise seed.
pub fn latent_eval_loss(gen: &LatentGenerator, data: &TrainingData, idx: &[usize], seed: u64) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0;
    for (k, chunk) in idx.chunks(8).enumerate() {
        let masks = gen.dit.batch_masks(chunk.len())?;
        let mut g = Graph::new();
        let bound: Vec<_> = gen.stores().iter().map(|s| g.bind(s, false)).collect();
        let mut rng = Rng::new(seed).derive(k as u64);
        let (_, flow, _) = latent_loss(&mut g, gen, &bound, data, chunk, 0.0, &masks, &mut rng)?;
        total += g.scalar(flow) * chunk.len() as f64;
        n += chunk.len();
    }
    Ok(total / n.max(1) as f64)
}

/// Stage-two model: DiT generating standardised compressed semantic grids.
#[derive(Clone, Debug)]
pub struct SemanticGenerator {
    pub dit: Dit,
    pub sem_stats: Standardizer,
    pub compressor_hash: String,
}

#[derive(Serialize, Deserialize)]
struct SemMeta {
    sem_stats: Standardizer,
    compressor_hash: String,
}

/// Targets for stage two: compressor means plus their standardisation.
pub struct SemanticTargets {
    pub grids: Vec<Tensor>,
    pub stats: Standardizer,
    pub compressor_hash: String,
}

pub fn semantic_targets(stage_one: &LatentGenerator, data: &TrainingData) -> Result<SemanticTargets> {
    let comp = stage_one
        .compressor
        .as_ref()
        .ok_or_else(|| config_err!("{} has no compressor to train a semantic generator on", stage_one.stage.as_str()))?;
    if !comp.store.is_frozen() {
        return Err(config_err!("the compressor must be frozen before stage two"));
    }
    let means = stage_one.semantic_means(data)?;
    let refs: Vec<&Tensor> = means.iter().collect();
    let stats = Standardizer::fit(&refs)?;
    Ok(SemanticTargets {
        grids: means.iter().map(|m| stats.apply(m)).collect(),
        stats,
        compressor_hash: comp.store.hash(),
    })
}

impl SemanticGenerator {
    pub fn new(cfg: &StageConfig, targets: &SemanticTargets, data: &TrainingData, seed: u64) -> Result<Self> {
        cfg.validate(StageId::SemGen)?;
        let shape = DitShape {
            target_kind: TokenKind::Semantic,
            target_channels: targets.grids[0].cols(),
            target_dims: data.sem_dims,
            semantic: None,
            sem_span: 1.0,
            vocab: data.vocab,
            condition: true,
        };
        Ok(Self {
            dit: Dit::new(&cfg.dit, &shape, &mut Rng::new(seed).derive(3))?,
            sem_stats: targets.stats.clone(),
            compressor_hash: targets.compressor_hash.clone(),
        })
    }

    pub fn checkpoint(&self, seed: u64) -> Checkpoint {
        let meta = SemMeta {
            sem_stats: self.sem_stats.clone(),
            compressor_hash: self.compressor_hash.clone(),
        };
        let mut ck = self.dit.checkpoint(seed, serde_json::to_value(meta).expect("plain data"));
        ck.kind = SEM_GEN_KIND.into();
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let meta: SemMeta =
            serde_json::from_value(ck.meta["extra"].clone()).map_err(|e| config_err!("semantic generator checkpoint: {e}"))?;
        Ok(Self {
            dit: Dit::from_checkpoint(ck)?,
            sem_stats: meta.sem_stats,
            compressor_hash: meta.compressor_hash,
        })
    }
}

fn sem_loss(
    g: &mut Graph,
    gen: &SemanticGenerator,
    p: &crate::numerics::Bound,
    targets: &SemanticTargets,
    conds: &[Condition],
    idx: &[usize],
    masks: &[Rc<AttnMask>],
    rng: &mut Rng,
) -> Result<crate::numerics::Var> {
    let c: Vec<Condition> = idx.iter().map(|&i| conds[i].clone()).collect();
    let z0s: Vec<&Tensor> = idx.iter().map(|&i| &targets.grids[i]).collect();
    let batch = FlowBatch::new(&z0s, TimeSchedule::Uniform, rng)?;
    cfm_loss(g, &batch, |g, zt, t| gen.dit.forward(g, p, zt, None, &c, t, masks))
}

/// Stage two. The compressor stays frozen: its hash is checked afterwards.
pub fn train_semantic_generator(
    gen: &mut SemanticGenerator,
    stage_one: &LatentGenerator,
    targets: &SemanticTargets,
    data: &TrainingData,
    cfg: &TrainConfig,
    state: &mut TrainState,
    on_step: impl FnMut(&[&mut ParamStore], &TrainState) -> Result<()>,
) -> Result<()> {
    let before = stage_one.compressor.as_ref().map(|c| c.store.hash());
    if before.as_deref() != Some(gen.compressor_hash.as_str()) {
        return Err(config_err!("semantic generator was built for a different compressor"));
    }
    let model = gen.clone();
    let masks = model.dit.batch_masks(cfg.batch_size)?;
    train::run(
        &mut [&mut gen.dit.store],
        cfg,
        data.len(),
        state,
        |g, p, ctx| sem_loss(g, &model, &p[0], targets, &data.conds, ctx.batch, &masks, ctx.rng),
        on_step,
    )?;
    let after = stage_one.compressor.as_ref().map(|c| c.store.hash());
    if before != after {
        return Err(config_err!("frozen compressor changed during semantic-generator training"));
    }
    Ok(())
}

pub fn semantic_eval_loss(gen: &SemanticGenerator, targets: &SemanticTargets, data: &TrainingData, idx: &[usize], seed: u64) -> Result<f64> {
    let mut total = 0.0;
    for (k, chunk) in idx.chunks(16).enumerate() {
        let masks = gen.dit.batch_masks(chunk.len())?;
        let mut g = Graph::new();
        let p = g.bind(&gen.dit.store, false);
        let l = sem_loss(&mut g, gen, &p, targets, &data.conds, chunk, &masks, &mut Rng::new(seed).derive(k as u64))?;
        total += g.scalar(l) * chunk.len() as f64;
    }
    Ok(total / idx.len().max(1) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateOptions {
    pub sampler: SamplerConfig,
    /// Corruption applied to semantic tokens before stage one sees them.
    pub noise_level: f64,
    pub seed: u64,
    pub batch: usize,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        Self {
            sampler: SamplerConfig::default(),
            noise_level: 0.1,
            seed: 0,
            batch: 16,
        }
    }
}

const SEM_NOISE: u64 = 11;
const CORRUPT_NOISE: u64 = 12;
const LATENT_NOISE: u64 = 13;

/// Per-sample generator so results do not depend on batch composition.
fn sample_rng(seed: u64, stream: u64, i: usize) -> Rng {
    Rng::new(seed).derive(stream).derive(i as u64)
}

fn integrate(dit: &Dit, conds: &[Condition], sem: Option<&Tensor>, z1: Tensor, sampler: &SamplerConfig) -> Result<Tensor> {
    let masks = dit.batch_masks(conds.len())?;
    euler_from(z1, sampler, |z, t| dit.velocity(z, sem, conds, t, &masks))
}

/// Sampled compressed semantic grids (un-standardised), one per condition.
pub fn sample_semantics(gen: &SemanticGenerator, conds: &[Condition], opts: &GenerateOptions) -> Result<Vec<Tensor>> {
    let dims = gen.dit.shape.target_dims;
    let c = gen.dit.shape.target_channels;
    let mut out = Vec::with_capacity(conds.len());
    for (b, chunk) in conds.chunks(opts.batch.max(1)).enumerate() {
        let base = b * opts.batch.max(1);
        let noise: Vec<Tensor> = (0..chunk.len())
            .map(|i| sample_rng(opts.seed, SEM_NOISE, base + i).randn(&[dims.len(), c]))
            .collect();
        let refs: Vec<&Tensor> = noise.iter().collect();
        let z = integrate(&gen.dit, chunk, None, Tensor::vstack(&refs)?, &opts.sampler)?;
        out.extend(split_rows(&gen.sem_stats.invert(&z), chunk.len())?);
    }
    Ok(out)
}

/// Sampled latent grids (un-standardised) given optional semantic grids.
pub fn sample_latents(
    gen: &LatentGenerator,
    conds: &[Condition],
    sems: Option<&[Tensor]>,
    opts: &GenerateOptions,
) -> Result<Vec<Tensor>> {
    match (gen.compressor.is_some(), sems) {
        (true, Some(s)) if s.len() == conds.len() => {}
        (true, _) => return Err(config_err!("{} needs one semantic grid per condition", gen.stage.as_str())),
        (false, Some(_)) => {
            return Err(config_err!("{} takes no semantic tokens (layout guard)", gen.stage.as_str()))
        }
        (false, None) => {}
    }
    let dims = gen.dit.shape.target_dims;
    let c = gen.dit.shape.target_channels;
    let step = opts.batch.max(1);
    let mut out = Vec::with_capacity(conds.len());
    for (b, chunk) in conds.chunks(step).enumerate() {
        let base = b * step;
        let noise: Vec<Tensor> = (0..chunk.len())
            .map(|i| sample_rng(opts.seed, LATENT_NOISE, base + i).randn(&[dims.len(), c]))
            .collect();
        let refs: Vec<&Tensor> = noise.iter().collect();
        let sem = match sems {
            Some(s) => {
                let mut parts = Vec::with_capacity(chunk.len());
                for (i, grid) in s[base..base + chunk.len()].iter().enumerate() {
                    let g = crate::grid::Grid::new(gen.dit.shape.semantic.map(|x| x.1).unwrap_or(dims), grid.clone())?;
                    let mut rng = sample_rng(opts.seed, CORRUPT_NOISE, base + i);
                    parts.push(corrupt_semantics(&g, opts.noise_level, &mut rng)?.values);
                }
                let r: Vec<&Tensor> = parts.iter().collect();
                Some(Tensor::vstack(&r)?)
            }
            None => None,
        };
        let z = integrate(&gen.dit, chunk, sem.as_ref(), Tensor::vstack(&refs)?, &opts.sampler)?;
        out.extend(split_rows(&gen.latent_stats.invert(&z), chunk.len())?);
    }
    Ok(out)
}

fn split_rows(t: &Tensor, n: usize) -> Result<Vec<Tensor>> {
    let per = t.rows() / n;
    (0..n)
        .map(|i| Tensor::matrix(per, t.cols(), t.data()[i * per * t.cols()..(i + 1) * per * t.cols()].to_vec()))
        .collect()
}

/// Check that checkpoints were trained against each other.
pub fn check_compatible(sem_gen: Option<&SemanticGenerator>, latent: &LatentGenerator, ae: &AutoEncoder) -> Result<()> {
    if latent.frozen.autoencoder != ae.store.hash() {
        return Err(config_err!("latent generator was trained against a different autoencoder checkpoint"));
    }
    if let Some(s) = sem_gen {
        let comp = latent
            .compressor
            .as_ref()
            .ok_or_else(|| config_err!("semantic generator given but latent generator {} takes no semantics", latent.stage.as_str()))?;
        if s.compressor_hash != comp.store.hash() {
            return Err(config_err!("semantic generator and latent generator checkpoints use different compressors"));
        }
        let want = latent.dit.shape.semantic.map(|x| x.1);
        if want != Some(s.dit.shape.target_dims) {
            return Err(config_err!(
                "semantic generator grid {:?} does not match latent generator semantic grid {:?}",
                s.dit.shape.target_dims,
                want
            ));
        }
    } else if latent.compressor.is_some() {
        return Err(Error::Dependency("latent generator needs a semantic generator checkpoint".into()));
    }
    Ok(())
}

fn decode_all(latents: &[Tensor], gen: &LatentGenerator, ae: &AutoEncoder) -> Result<Vec<Video>> {
    latents
        .iter()
        .map(|z| ae.decode(&crate::grid::Grid::new(gen.dit.shape.target_dims, z.clone())?, gen.fps))
        .collect()
}

/// Full text-free generation: semantics, then latents, then pixels.
pub fn generate(
    conds: &[Condition],
    sem_gen: Option<&SemanticGenerator>,
    latent: &LatentGenerator,
    ae: &AutoEncoder,
    opts: &GenerateOptions,
) -> Result<Vec<Video>> {
    check_compatible(sem_gen, latent, ae)?;
    let sems = match sem_gen {
        Some(s) => Some(sample_semantics(s, conds, opts)?),
        None => None,
    };
    let z = sample_latents(latent, conds, sems.as_deref(), opts)?;
    decode_all(&z, latent, ae)
}

/// Generation conditioned on given compressed semantic grids (e.g. of a
/// reference clip) instead of sampled ones.
pub fn generate_from_semantics(
    conds: &[Condition],
    sems: &[Tensor],
    latent: &LatentGenerator,
    ae: &AutoEncoder,
    opts: &GenerateOptions,
) -> Result<Vec<Video>> {
    check_compatible(None, latent, ae).or_else(|e| match e {
        Error::Dependency(_) => Ok(()),
        e => Err(e),
    })?;
    let z = sample_latents(latent, conds, Some(sems), opts)?;
    decode_all(&z, latent, ae)
}

/// Compressed semantic means of reference clips under `latent`'s compressor.
pub fn reference_semantics(clips: &[&Clip], latent: &LatentGenerator, encoder: &SemanticEncoder, ae: &AutoEncoder) -> Result<Vec<Tensor>> {
    let comp = latent.compressor.as_ref().ok_or_else(|| config_err!("{} has no compressor", latent.stage.as_str()))?;
    let mut out = Vec::with_capacity(clips.len());
    for c in clips {
        let raw = match latent.source {
            SemSource::Encoder => encoder.encode(&c.video)?.values,
            SemSource::VaeLatent => {
                let (d, m, _) = ae.encode_stats(&c.video)?;
                space_to_depth(d, &latent.latent_stats.apply(&m), latent.dit.shape.semantic.unwrap().1)?
            }
        };
        let mut g = Graph::new();
        let p = g.bind(&comp.store, false);
        let x = g.constant(raw);
        let (m, _) = comp.forward(&mut g, &p, x)?;
        out.push(g.value(m).clone());
    }
    Ok(out)
}

/// Long-video generation: one joint pass over the whole interleaved sequence.
pub fn generate_long(
    conds: &[Condition],
    sem_gen: Option<&SemanticGenerator>,
    latent: &LatentGenerator,
    ae: &AutoEncoder,
    opts: &GenerateOptions,
) -> Result<Vec<Video>> {
    let layout = latent.dit.cfg.layout;
    check_long_layout(&layout, latent.dit.shape.target_dims)?;
    generate(conds, sem_gen, latent, ae, opts)
}

pub fn check_long_layout(layout: &AttentionLayout, latent_dims: GridDims) -> Result<()> {
    if layout.mode != LayoutMode::SwinInterleaved {
        return Err(config_err!("long generation needs the swin_interleaved layout"));
    }
    layout.validate()?;
    if latent_dims.t % layout.window != 0 {
        return Err(config_err!(
            "{} latent frames are not a whole number of {}-frame windows",
            latent_dims.t,
            layout.window
        ));
    }
    Ok(())
}

/// What two runs must share to count as matched-budget comparisons.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FairnessRecord {
    pub corpus_hash: String,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub betas: [f64; 2],
    pub adam_eps: f64,
    pub clip_norm: f64,
    pub seed: u64,
    pub data_order_hash: String,
}

impl FairnessRecord {
    pub fn new(corpus_hash: &str, cfg: &TrainConfig, n_items: usize) -> Self {
        Self {
            corpus_hash: corpus_hash.into(),
            steps: cfg.steps,
            batch_size: cfg.batch_size,
            lr: cfg.lr,
            betas: [cfg.beta1, cfg.beta2],
            adam_eps: cfg.adam_eps,
            clip_norm: cfg.clip_norm,
            seed: cfg.seed,
            data_order_hash: cfg.data_order_hash(n_items),
        }
    }

    pub fn check_matched(&self, other: &Self) -> Result<()> {
        let a = serde_json::to_value(self).expect("plain data");
        let b = serde_json::to_value(other).expect("plain data");
        for (k, v) in a.as_object().unwrap() {
            if b.get(k) != Some(v) {
                return Err(Error::Fairness(format!("runs differ in `{k}`: {v} vs {}", b[k])));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autoencoder::AeConfig;
    use crate::semantics::{SemConfig, SemGeometry};
    use crate::synthdata::{make_corpus, ClipLength, CorpusConfig};

    fn setup(source: SemSource) -> (Vec<Clip>, AutoEncoder, SemanticEncoder, TrainingData) {
        let cfg = CorpusConfig {
            num_clips: 6,
            frames: 8,
            height: 8,
            width: 8,
            sprite_radius: 2.0,
            orbit_radius: 2.0,
            ..CorpusConfig::default()
        };
        let clips = make_corpus(&cfg, ClipLength::Short).unwrap();
        let ae_cfg = AeConfig {
            hidden: 16,
            blocks: 1,
            ..AeConfig::default()
        };
        let mut ae = AutoEncoder::new(&ae_cfg, 3, &mut Rng::new(1));
        ae.store.freeze();
        let sc = SemConfig {
            p_s: 4,
            d: 8,
            heads: 2,
            ..SemConfig::default()
        };
        let geom = SemGeometry {
            channels: 3,
            height: 8,
            width: 8,
            stride: cfg.semantic_stride(),
            pairs: 1,
        };
        let mut enc = SemanticEncoder::new(&sc, geom, &mut Rng::new(2)).unwrap();
        enc.store.freeze();
        let data = prepare(&clips, &ae, &enc, source, cfg.vocab_sizes()).unwrap();
        (clips, ae, enc, data)
    }

    fn stage_cfg(steps: usize, layout: AttentionLayout) -> StageConfig {
        StageConfig {
            dit: DitConfig {
                width: 16,
                blocks: 2,
                heads: 2,
                mlp_ratio: 2,
                t_freqs: 4,
                layout,
            },
            train: TrainConfig {
                steps,
                batch_size: 3,
                lr: 3e-3,
                ..TrainConfig::default()
            },
        }
    }

    #[test]
    fn standardizer_round_trip() {
        let t = Rng::new(4).randn(&[10, 3]).map(|x| 3.0 * x + 1.0);
        let s = Standardizer::fit(&[&t]).unwrap();
        let z = s.apply(&t);
        let again = Standardizer::fit(&[&z]).unwrap();
        assert!(again.mean.iter().all(|m| m.abs() < 1e-12));
        assert!(again.std.iter().all(|v| (v - 1.0).abs() < 1e-9));
        assert!(s.invert(&z).max_abs_diff(&t) < 1e-12);
    }

    #[test]
    fn space_to_depth_matches_index_oracle() {
        let from = GridDims::new(4, 2, 2);
        let vals = Tensor::matrix(16, 1, (0..16).map(|x| x as f64).collect()).unwrap();
        let out = space_to_depth(from, &vals, GridDims::new(2, 1, 1)).unwrap();
        assert_eq!(out.shape(), &[2, 8]);
        // Second coarse token starts at latent (t=2, h=0, w=0) = raster index 8.
        assert_eq!(out.row(1), &[8.0, 9.0, 10.0, 11.0, 12.0, 13.0, 14.0, 15.0]);
        assert!(space_to_depth(from, &vals, GridDims::new(3, 1, 1)).is_err());
    }

    #[test]
    fn vae2stage_grid_matches_semantic_token_count() {
        let (_, _, _, sem) = setup(SemSource::Encoder);
        let (_, _, _, vae) = setup(SemSource::VaeLatent);
        assert_eq!(sem.sem_dims, vae.sem_dims);
        assert_eq!(sem.raw[0].rows(), vae.raw[0].rows());
    }

    #[test]
    fn step_zero_loss_matches_data_statistics() {
        // Zero head → velocity 0, so the loss is E|ε − z0|² = 1 + E[z0²].
        let (_, _, _, data) = setup(SemSource::Encoder);
        let gen = LatentGenerator::new(
            StageId::LatentGen,
            &stage_cfg(1, AttentionLayout::default()),
            &CompressorConfig::default(),
            &data,
            0,
        )
        .unwrap();
        let all: Vec<usize> = (0..data.len()).collect();
        let second_moment: f64 =
            data.latents.iter().map(|t| t.data().iter().map(|x| x * x).sum::<f64>()).sum::<f64>()
                / data.latents.iter().map(|t| t.len()).sum::<usize>() as f64;
        let mut losses = Vec::new();
        for seed in 0..40 {
            losses.push(latent_eval_loss(&gen, &data, &all, seed).unwrap());
        }
        let mean = losses.iter().sum::<f64>() / losses.len() as f64;
        assert!((second_moment - 1.0).abs() < 1e-9);
        assert!((mean - (1.0 + second_moment)).abs() < 0.05, "{mean}");
    }

    #[test]
    fn freeze_contracts_and_determinism() {
        let (clips, ae, enc, data) = setup(SemSource::Encoder);
        let (ae_hash, enc_hash) = (ae.store.hash(), enc.store.hash());
        let cfg = stage_cfg(4, AttentionLayout::default());
        let comp = CompressorConfig {
            d_c: 4,
            ..CompressorConfig::default()
        };
        let mut lg = LatentGenerator::new(StageId::LatentGen, &cfg, &comp, &data, 0).unwrap();
        let c0 = lg.compressor.as_ref().unwrap().store.hash();
        let mut st = TrainState::new(&lg.stores());
        train_latent_generator(&mut lg, &data, &cfg.train, 1e-3, &mut st, |_, _| Ok(())).unwrap();
        assert_ne!(lg.compressor.as_ref().unwrap().store.hash(), c0, "compressor trains jointly");
        lg.freeze();

        let targets = semantic_targets(&lg, &data).unwrap();
        let comp_hash = targets.compressor_hash.clone();
        let mut sg = SemanticGenerator::new(&cfg, &targets, &data, 0).unwrap();
        let mut st = TrainState::new(&[&sg.dit.store]);
        train_semantic_generator(&mut sg, &lg, &targets, &data, &cfg.train, &mut st, |_, _| Ok(())).unwrap();
        assert_eq!(lg.compressor.as_ref().unwrap().store.hash(), comp_hash);
        assert_eq!((ae.store.hash(), enc.store.hash()), (ae_hash, enc_hash));

        let opts = GenerateOptions {
            sampler: SamplerConfig { num_steps: 4 },
            seed: 5,
            ..GenerateOptions::default()
        };
        let conds: Vec<Condition> = data.conds[..3].to_vec();
        let a = generate(&conds, Some(&sg), &lg, &ae, &opts).unwrap();
        let b = generate(&conds, Some(&sg), &lg, &ae, &opts).unwrap();
        assert_eq!(a, b);
        // Batch composition does not change a sample.
        let single = generate(&conds[1..2], Some(&sg), &lg, &ae, &GenerateOptions { batch: 1, ..opts.clone() });
        let _ = single.unwrap();
        assert_eq!(a[0].frames, clips[0].video.frames);

        // Wrong partner checkpoints are rejected.
        let mut other = sg.clone();
        other.compressor_hash = "x".into();
        assert!(matches!(generate(&conds, Some(&other), &lg, &ae, &opts), Err(Error::Config(_))));
    }

    #[test]
    fn first_sample_independent_of_batch() {
        let (_, ae, _, data) = setup(SemSource::Encoder);
        let cfg = stage_cfg(1, AttentionLayout::default());
        let lg = LatentGenerator::new(StageId::BaselineCt, &cfg, &CompressorConfig::default(), &data, 0).unwrap();
        let opts = GenerateOptions {
            sampler: SamplerConfig { num_steps: 3 },
            ..GenerateOptions::default()
        };
        let all = generate(&data.conds[..3], None, &lg, &ae, &opts).unwrap();
        let one = generate(&data.conds[..1], None, &lg, &ae, &opts).unwrap();
        assert_eq!(all[0], one[0]);
    }

    #[test]
    fn baseline_layout_guard() {
        let (_, _, _, data) = setup(SemSource::Encoder);
        let cfg = stage_cfg(1, AttentionLayout::default());
        let lg = LatentGenerator::new(StageId::BaselineCt, &cfg, &CompressorConfig::default(), &data, 0).unwrap();
        assert!(lg.compressor.is_none());
        let sems = vec![Tensor::zeros(&[data.sem_dims.len(), 8])];
        let err = sample_latents(&lg, &data.conds[..1], Some(&sems), &GenerateOptions::default()).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        let swin = AttentionLayout {
            mode: LayoutMode::SwinInterleaved,
            window: 2,
        };
        assert!(LatentGenerator::new(StageId::BaselineCt, &stage_cfg(1, swin), &CompressorConfig::default(), &data, 0).is_err());
        assert!(LatentGenerator::new(StageId::BaselineCtSwin, &stage_cfg(1, swin), &CompressorConfig::default(), &data, 0).is_ok());
    }

    #[test]
    fn long_layout_checks() {
        let swin = AttentionLayout {
            mode: LayoutMode::SwinInterleaved,
            window: 4,
        };
        assert!(check_long_layout(&swin, GridDims::new(16, 2, 2)).is_ok());
        assert!(matches!(check_long_layout(&swin, GridDims::new(10, 2, 2)), Err(Error::Config(_))));
        assert!(check_long_layout(&AttentionLayout::default(), GridDims::new(16, 2, 2)).is_err());
    }

    #[test]
    fn fairness_records() {
        let cfg = TrainConfig::default();
        let a = FairnessRecord::new("h", &cfg, 10);
        assert!(a.check_matched(&FairnessRecord::new("h", &cfg, 10)).is_ok());
        let more = TrainConfig { steps: 7, ..cfg.clone() };
        let err = a.check_matched(&FairnessRecord::new("h", &more, 10)).unwrap_err();
        assert!(matches!(err, Error::Fairness(_)));
        assert!(a.check_matched(&FairnessRecord::new("other", &cfg, 10)).is_err());
    }

    #[test]
    fn checkpoints_round_trip() {
        let (_, _, _, data) = setup(SemSource::Encoder);
        let cfg = stage_cfg(1, AttentionLayout::default());
        let lg = LatentGenerator::new(StageId::LatentGen, &cfg, &CompressorConfig::default(), &data, 0).unwrap();
        let ck = lg.checkpoint(0);
        let comp = lg.compressor.as_ref().unwrap().checkpoint(0);
        let back = LatentGenerator::from_checkpoints(&Checkpoint::from_bytes("x".as_ref(), &ck.to_bytes()).unwrap(), Some(&comp)).unwrap();
        assert_eq!(back.dit.store.hash(), lg.dit.store.hash());
        assert_eq!(back.latent_stats, lg.latent_stats);
        assert!(matches!(LatentGenerator::from_checkpoints(&ck, None), Err(Error::Dependency(_))));
    }
}
