//! Video metrics, the drift measure, the factor probe, and the experiment
//! harnesses comparing generation pipelines at matched budgets.
//!
//! Metric mapping to the usual video-quality dimensions: `bg_consistency`
//! stands in for background consistency, `frame_diff_energy` for flicker and
//! motion smoothness, `mean_luma` for imaging/exposure stability, and the
//! factor probe for semantic fidelity to the requested condition.

use std::cell::RefCell;
use std::collections::HashMap;
use std::fs::File;
use std::io::BufWriter;
use std::ops::Range;
use std::path::Path;
use std::rc::Rc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autoencoder::{self, train_autoencoder, AeConfig, AutoEncoder};
use crate::dit::{Condition, LayoutMode};
use crate::error::{config_err, validation_err, Error, Result};
use crate::pipeline::{
    generate, generate_from_semantics, latent_eval_loss, prepare, reference_semantics, semantic_targets,
    train_latent_generator, train_semantic_generator, FairnessRecord, GenerateOptions, LatentGenerator, SemSource,
    SemanticGenerator, StageConfig, StageId, TrainingData,
};
use crate::semantics::{pretrain_semantic_encoder, train_factor_net, CompressorConfig, FactorNet, FactorReport, SemConfig, SemGeometry, SemanticEncoder};
use crate::synthdata::{make_corpus, Clip, ClipLength, CorpusConfig, FactorSpec, Video};
use crate::train::TrainState;

/// Luma deviation from the per-pixel temporal median below which a pixel
/// counts as background.
pub const BG_TOLERANCE: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    MeanLuma,
    FrameDiffEnergy,
    BgConsistency,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::MeanLuma, Metric::FrameDiffEnergy, Metric::BgConsistency];

    pub fn name(self) -> &'static str {
        match self {
            Metric::MeanLuma => "mean_luma",
            Metric::FrameDiffEnergy => "frame_diff_energy",
            Metric::BgConsistency => "bg_consistency",
        }
    }

    /// Value over `frames` of `v`. `mean_luma` lies in [0, 1],
    /// `frame_diff_energy` in [0, 1], `bg_consistency` in [-1, 1].
    pub fn eval(self, v: &Video, frames: Range<usize>) -> f64 {
        match self {
            Metric::MeanLuma => mean_luma(v, frames),
            Metric::FrameDiffEnergy => frame_diff_energy(v, frames),
            Metric::BgConsistency => bg_consistency(v, frames),
        }
    }

    pub fn eval_video(self, v: &Video) -> f64 {
        self.eval(v, 0..v.frames)
    }
}

pub fn mean_luma(v: &Video, frames: Range<usize>) -> f64 {
    let n = frames.len();
    if n == 0 {
        return 0.0;
    }
    frames.map(|f| v.luma(f).iter().sum::<f64>() / (v.height * v.width) as f64).sum::<f64>() / n as f64
}

/// Mean over consecutive pairs of the mean squared pixel difference.
pub fn frame_diff_energy(v: &Video, frames: Range<usize>) -> f64 {
    if frames.len() < 2 {
        return 0.0;
    }
    let pairs = frames.len() - 1;
    let mut total = 0.0;
    for f in frames.start..frames.end - 1 {
        let (a, b) = (v.frame(f), v.frame(f + 1));
        total += a.iter().zip(b).map(|(x, y)| (*y as f64 - *x as f64).powi(2)).sum::<f64>() / a.len() as f64;
    }
    total / pairs as f64
}

/// Mean pairwise Pearson correlation of luma over pixels that are background
/// in both frames (within [`BG_TOLERANCE`] of the temporal median).
pub fn bg_consistency(v: &Video, frames: Range<usize>) -> f64 {
    let lumas: Vec<Vec<f64>> = frames.clone().map(|f| v.luma(f)).collect();
    if lumas.len() < 2 {
        return 1.0;
    }
    let px = v.height * v.width;
    let median: Vec<f64> = (0..px)
        .map(|i| {
            let mut col: Vec<f64> = lumas.iter().map(|l| l[i]).collect();
            col.sort_by(|a, b| a.total_cmp(b));
            let m = col.len();
            if m % 2 == 1 {
                col[m / 2]
            } else {
                0.5 * (col[m / 2 - 1] + col[m / 2])
            }
        })
        .collect();
    let bg: Vec<Vec<bool>> = lumas
        .iter()
        .map(|l| l.iter().zip(&median).map(|(x, m)| (x - m).abs() <= BG_TOLERANCE).collect())
        .collect();
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..lumas.len() {
        for j in i + 1..lumas.len() {
            let idx: Vec<usize> = (0..px).filter(|&k| bg[i][k] && bg[j][k]).collect();
            total += pearson(idx.iter().map(|&k| lumas[i][k]), idx.iter().map(|&k| lumas[j][k]));
            pairs += 1;
        }
    }
    total / pairs as f64
}

/// Correlation with the degenerate cases pinned: two constant series agree
/// perfectly when equal; a constant against a varying series scores 0.
fn pearson(a: impl Iterator<Item = f64> + Clone, b: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = a.clone().count() as f64;
    if n == 0.0 {
        return 0.0;
    }
    let (ma, mb) = (a.clone().sum::<f64>() / n, b.clone().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    const FLAT: f64 = 1e-12;
    match (saa < FLAT, sbb < FLAT) {
        (true, true) => {
            if (ma - mb).abs() < 1e-6 {
                1.0
            } else {
                0.0
            }
        }
        (true, false) | (false, true) => 0.0,
        _ => (sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriftReport {
    pub metric: Metric,
    pub first: f64,
    pub last: f64,
    pub delta: f64,
    pub fraction: f64,
}

/// Metric difference between the leading and trailing `floor(F·fraction)` frames.
pub fn drift(v: &Video, metric: Metric, fraction: f64) -> Result<DriftReport> {
    if !(fraction > 0.0 && fraction <= 0.5) {
        return Err(validation_err!("drift fraction {fraction} outside (0, 0.5]"));
    }
    let seg = (v.frames as f64 * fraction + 1e-9).floor() as usize;
    if seg < 1 {
        return Err(validation_err!("{} frames too short for {fraction} segments", v.frames));
    }
    let first = metric.eval(v, 0..seg);
    let last = metric.eval(v, v.frames - seg..v.frames);
    Ok(DriftReport {
        metric,
        first,
        last,
        delta: (first - last).abs(),
        fraction,
    })
}

/// Per-factor agreement between probe predictions and requested factors.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FactorMatch {
    pub shape: f64,
    pub color: f64,
    pub background: f64,
    pub motion: f64,
}

impl FactorMatch {
    /// Mean agreement over the categorical factors.
    pub fn mean(&self) -> f64 {
        (self.shape + self.color + self.background + self.motion) / 4.0
    }
}

pub fn factor_match(probe: &FactorNet, videos: &[Video], specs: &[FactorSpec]) -> Result<FactorMatch> {
    if videos.len() != specs.len() || videos.is_empty() {
        return Err(config_err!("{} videos for {} conditions", videos.len(), specs.len()));
    }
    let refs: Vec<&Video> = videos.iter().collect();
    let preds = probe.predict(&refs)?;
    let n = specs.len() as f64;
    let rate = |f: &dyn Fn(usize) -> bool| (0..specs.len()).filter(|&i| f(i)).count() as f64 / n;
    Ok(FactorMatch {
        shape: rate(&|i| preds[i].shape_id == specs[i].shape_id),
        color: rate(&|i| preds[i].color == specs[i].color),
        background: rate(&|i| preds[i].background_id == specs[i].background_id),
        motion: rate(&|i| preds[i].motion_pattern == specs[i].motion_pattern),
    })
}

/// Whether generated sprites read as the requested shapes: the probe's
/// shape agreement reaches `threshold`.
pub fn coherent_shapes(m: &FactorMatch, threshold: f64) -> bool {
    m.shape >= threshold
}

/// Horizontal strip of all frames, each pixel drawn as a `scale × scale` block.
pub fn write_filmstrip(path: &Path, v: &Video, scale: usize) -> Result<()> {
    if v.channels != 3 {
        return Err(config_err!("filmstrips need 3-channel video, got {}", v.channels));
    }
    let scale = scale.max(1);
    let (w, h) = (v.width * v.frames * scale, v.height * scale);
    let mut buf = vec![0u8; w * h * 3];
    for f in 0..v.frames {
        for y in 0..v.height {
            for x in 0..v.width {
                for c in 0..3 {
                    let b = (v.pixel(f, c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8;
                    for dy in 0..scale {
                        for dx in 0..scale {
                            let (px, py) = ((f * v.width + x) * scale + dx, y * scale + dy);
                            buf[(py * w + px) * 3 + c] = b;
                        }
                    }
                }
            }
        }
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let fmt = |e: png::EncodingError| Error::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    };
    let mut writer = enc.write_header().map_err(fmt)?;
    writer.write_image_data(&buf).map_err(fmt)?;
    writer.finish().map_err(fmt)
}

/// Write `rows` as CSV with a header taken from the row type.
pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let s = serde_json::to_string_pretty(value).expect("serialisable report");
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub net: SemConfig,
    pub stride: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        let mut net = SemConfig {
            d: 32,
            heads: 2,
            blocks: 2,
            ..SemConfig::default()
        };
        net.train.seed = 1_000;
        net.train.steps = 3_000;
        net.train.batch_size = 32;
        Self { net, stride: 1 }
    }
}

/// Sizes and seeds of the frozen foundation shared by all experiments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabConfig {
    pub corpus: CorpusConfig,
    pub ae: AeConfig,
    pub sem: SemConfig,
    /// Evaluation probe. Its own seed, and a denser frame stride than the
    /// semantic encoder so motion is easier to read.
    pub probe: ProbeConfig,
    /// Held-out clips whose conditions drive evaluation sampling.
    pub eval_clips: usize,
}

impl Default for LabConfig {
    fn default() -> Self {
        Self {
            corpus: CorpusConfig::default(),
            ae: AeConfig::default(),
            sem: SemConfig::default(),
            probe: ProbeConfig::default(),
            eval_clips: 64,
        }
    }
}

impl LabConfig {
    pub fn geometry(&self) -> SemGeometry {
        SemGeometry {
            channels: crate::synthdata::CHANNELS,
            height: self.corpus.height,
            width: self.corpus.width,
            stride: self.corpus.semantic_stride(),
            pairs: self.corpus.frames / self.corpus.semantic_stride() / 2,
        }
    }

    pub fn probe_geometry(&self) -> Result<SemGeometry> {
        let stride = self.probe.stride;
        if stride == 0 || self.corpus.frames % (2 * stride) != 0 {
            return Err(config_err!(
                "probe stride {stride} must divide frames {} into pairs",
                self.corpus.frames
            ));
        }
        Ok(SemGeometry {
            stride,
            pairs: self.corpus.frames / stride / 2,
            ..self.geometry()
        })
    }

    pub fn eval_corpus(&self) -> CorpusConfig {
        CorpusConfig {
            num_clips: self.eval_clips,
            seed: self.corpus.seed.wrapping_add(0x5EED_0E7A1),
            ..self.corpus.clone()
        }
    }
}

/// Budgets of the generators compared by the harnesses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    pub latent: StageConfig,
    pub sem: StageConfig,
    pub compressor: CompressorConfig,
    pub generate: GenerateOptions,
    /// Fraction of the budget at which the early checkpoint is taken.
    pub early_fraction: f64,
    pub coherent_threshold: f64,
    /// Compression widths; empty means `{d, d/4, d/16}` of the encoder width.
    pub d_c_sweep: Vec<usize>,
    pub long_latent: StageConfig,
    pub long_sem: StageConfig,
    pub drift_clips: usize,
    pub drift_fraction: f64,
    /// Held-out loss is measured on this many training clips.
    pub eval_loss_clips: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let mut long_latent = StageConfig::default();
        long_latent.dit.layout.mode = LayoutMode::SwinInterleaved;
        Self {
            seeds: vec![0, 1, 2],
            latent: StageConfig::default(),
            sem: StageConfig::default(),
            compressor: CompressorConfig::default(),
            generate: GenerateOptions::default(),
            early_fraction: 0.25,
            coherent_threshold: 0.5,
            d_c_sweep: Vec::new(),
            long_latent,
            long_sem: StageConfig::default(),
            drift_clips: 16,
            drift_fraction: 0.15,
            eval_loss_clips: 32,
        }
    }
}

/// A trained pipeline frozen at one step of its budget.
#[derive(Clone, Debug)]
pub struct Snapshot {
    pub step: usize,
    pub latent: LatentGenerator,
    pub sem: Option<SemanticGenerator>,
    pub eval_loss: f64,
}

#[derive(Clone, Debug)]
pub struct SystemRun {
    pub stage: StageId,
    pub seed: u64,
    pub d_c: usize,
    pub snapshots: Vec<Snapshot>,
    pub fairness: FairnessRecord,
    pub latent_losses: Vec<f64>,
    pub seconds: f64,
}

impl SystemRun {
    pub fn last(&self) -> &Snapshot {
        self.snapshots.last().expect("runs keep at least one snapshot")
    }
}

/// Train one pipeline, freezing a copy at each of `snapshot_steps`. Stage
/// two of each copy gets the same fraction of its own budget.
pub fn train_system(
    data: &TrainingData,
    stage: StageId,
    latent_cfg: &StageConfig,
    sem_cfg: &StageConfig,
    comp: &CompressorConfig,
    seed: u64,
    snapshot_steps: &[usize],
    eval_clips: usize,
) -> Result<SystemRun> {
    let start = Instant::now();
    let mut lcfg = latent_cfg.clone();
    lcfg.train.seed = seed;
    let mut gen = LatentGenerator::new(stage, &lcfg, comp, data, seed)?;
    let mut state = TrainState::new(&gen.stores());
    let eval_idx: Vec<usize> = (0..eval_clips.min(data.len())).collect();
    let mut steps: Vec<usize> = snapshot_steps.iter().map(|&s| s.clamp(1, lcfg.train.steps)).collect();
    steps.push(lcfg.train.steps);
    steps.sort_unstable();
    steps.dedup();
    let mut snapshots = Vec::new();
    for s in steps {
        let mut c = lcfg.train.clone();
        c.steps = s;
        train_latent_generator(&mut gen, data, &c, comp.kl_weight, &mut state, |_, _| Ok(()))?;
        let mut frozen = gen.clone();
        frozen.freeze();
        let sem = if stage.uses_semantics() {
            let targets = semantic_targets(&frozen, data)?;
            let mut scfg = sem_cfg.clone();
            scfg.train.seed = seed;
            scfg.train.steps = ((sem_cfg.train.steps * s) as f64 / lcfg.train.steps as f64).round().max(1.0) as usize;
            let mut sg = SemanticGenerator::new(&scfg, &targets, data, seed)?;
            let mut st = TrainState::new(&[&sg.dit.store]);
            train_semantic_generator(&mut sg, &frozen, &targets, data, &scfg.train, &mut st, |_, _| Ok(()))?;
            sg.dit.store.freeze();
            Some(sg)
        } else {
            None
        };
        let eval_loss = latent_eval_loss(&frozen, data, &eval_idx, 0xE7A1)?;
        log::info!("{} seed {seed}: step {s}, eval loss {eval_loss:.4}", stage.as_str());
        snapshots.push(Snapshot {
            step: s,
            latent: frozen,
            sem,
            eval_loss,
        });
    }
    Ok(SystemRun {
        stage,
        seed,
        d_c: if stage.uses_semantics() { comp.d_c } else { 0 },
        snapshots,
        fairness: FairnessRecord::new(&data.corpus_hash, &lcfg.train, data.len()),
        latent_losses: state.losses,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Pixel-metric and probe summary of a batch of generated clips.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SampleEval {
    pub factors: FactorMatch,
    pub factor_match: f64,
    pub bg_consistency: f64,
    pub frame_diff_energy: f64,
    pub mean_luma: f64,
}

pub fn evaluate_samples(probe: &FactorNet, videos: &[Video], specs: &[FactorSpec]) -> Result<SampleEval> {
    let factors = factor_match(probe, videos, specs)?;
    let avg = |m: Metric| videos.iter().map(|v| m.eval_video(v)).sum::<f64>() / videos.len() as f64;
    Ok(SampleEval {
        factor_match: factors.mean(),
        factors,
        bg_consistency: avg(Metric::BgConsistency),
        frame_diff_energy: avg(Metric::FrameDiffEnergy),
        mean_luma: avg(Metric::MeanLuma),
    })
}

/// Frozen autoencoder, semantic encoder and evaluation probe, plus caches of
/// prepared data and trained systems shared across experiments.
pub struct Lab {
    pub cfg: LabConfig,
    pub clips: Vec<Clip>,
    pub eval: Vec<Clip>,
    pub ae: AutoEncoder,
    pub encoder: SemanticEncoder,
    pub encoder_report: FactorReport,
    pub probe: FactorNet,
    /// Probe accuracy on held-out real clips.
    pub probe_report: FactorReport,
    data: RefCell<HashMap<(SemSource, bool), Rc<TrainingData>>>,
    runs: RefCell<HashMap<String, Rc<SystemRun>>>,
    long_clips: RefCell<Option<Rc<(Vec<Clip>, Vec<Clip>)>>>,
}

impl Lab {
    pub fn build(cfg: &LabConfig) -> Result<Self> {
        cfg.corpus.validate()?;
        let clips = make_corpus(&cfg.corpus, ClipLength::Short)?;
        let eval = make_corpus(&cfg.eval_corpus(), ClipLength::Short)?;
        let videos: Vec<&Video> = clips.iter().map(|c| &c.video).collect();
        let (ae, _) = train_autoencoder(&videos, &cfg.ae, crate::synthdata::CHANNELS)?;
        let refs: Vec<&Clip> = clips.iter().collect();
        let geom = cfg.geometry();
        let vocab = cfg.corpus.vocab_sizes();
        let (encoder, encoder_report, _) = pretrain_semantic_encoder(&refs, &cfg.sem, geom, vocab)?;
        let (probe, _) = train_factor_net(&refs, &cfg.probe.net, cfg.probe_geometry()?, vocab)?;
        let eval_refs: Vec<&Clip> = eval.iter().collect();
        let probe_report = probe.report(&eval_refs)?;
        Ok(Self::from_parts(cfg.clone(), clips, eval, ae, encoder, encoder_report, probe, probe_report))
    }

    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        cfg: LabConfig,
        clips: Vec<Clip>,
        eval: Vec<Clip>,
        ae: AutoEncoder,
        encoder: SemanticEncoder,
        encoder_report: FactorReport,
        probe: FactorNet,
        probe_report: FactorReport,
    ) -> Self {
        Self {
            cfg,
            clips,
            eval,
            ae,
            encoder,
            encoder_report,
            probe,
            probe_report,
            data: RefCell::default(),
            runs: RefCell::default(),
            long_clips: RefCell::default(),
        }
    }

    /// Long training clips and long held-out clips (same factor seeds).
    pub fn long_clips(&self) -> Result<Rc<(Vec<Clip>, Vec<Clip>)>> {
        if let Some(c) = self.long_clips.borrow().as_ref() {
            return Ok(c.clone());
        }
        let c = Rc::new((
            make_corpus(&self.cfg.corpus, ClipLength::Long)?,
            make_corpus(&self.cfg.eval_corpus(), ClipLength::Long)?,
        ));
        *self.long_clips.borrow_mut() = Some(c.clone());
        Ok(c)
    }

    pub fn data(&self, source: SemSource, long: bool) -> Result<Rc<TrainingData>> {
        if let Some(d) = self.data.borrow().get(&(source, long)) {
            return Ok(d.clone());
        }
        let long_clips;
        let clips = if long {
            long_clips = self.long_clips()?;
            &long_clips.0
        } else {
            &self.clips
        };
        let d = Rc::new(prepare(clips, &self.ae, &self.encoder, source, self.cfg.corpus.vocab_sizes())?);
        self.data.borrow_mut().insert((source, long), d.clone());
        Ok(d)
    }

    pub fn eval_specs(&self, n: usize) -> Vec<FactorSpec> {
        self.eval.iter().take(n).map(|c| c.spec.clone()).collect()
    }

    pub fn conditions(&self, specs: &[FactorSpec]) -> Vec<Condition> {
        specs
            .iter()
            .map(|s| Condition::from_spec(s, self.cfg.corpus.width, self.cfg.corpus.height))
            .collect()
    }

    /// Train (or fetch) a system; identical requests share one run.
    pub fn system(
        &self,
        stage: StageId,
        exp: &ExperimentConfig,
        d_c: usize,
        seed: u64,
        long: bool,
        snapshot_steps: &[usize],
    ) -> Result<Rc<SystemRun>> {
        let (latent, sem) = if long { (&exp.long_latent, &exp.long_sem) } else { (&exp.latent, &exp.sem) };
        let key = format!(
            "{}|{d_c}|{seed}|{long}|{snapshot_steps:?}|{}|{}|{}",
            stage.as_str(),
            serde_json::to_string(latent).unwrap(),
            serde_json::to_string(sem).unwrap(),
            serde_json::to_string(&exp.compressor).unwrap()
        );
        if let Some(r) = self.runs.borrow().get(&key) {
            return Ok(r.clone());
        }
        let data = self.data(stage.source(), long)?;
        let comp = CompressorConfig {
            d_c,
            ..exp.compressor.clone()
        };
        let run = Rc::new(train_system(&data, stage, latent, sem, &comp, seed, snapshot_steps, exp.eval_loss_clips)?);
        self.runs.borrow_mut().insert(key, run.clone());
        Ok(run)
    }

    pub fn sample(&self, snap: &Snapshot, conds: &[Condition], exp: &ExperimentConfig, seed: u64) -> Result<Vec<Video>> {
        let opts = GenerateOptions {
            seed,
            ..exp.generate.clone()
        };
        generate(conds, snap.sem.as_ref(), &snap.latent, &self.ae, &opts)
    }
}

/// Fraction of seeds on which `pass` holds, and whether that is a majority.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gate {
    pub name: String,
    pub per_seed: Vec<bool>,
    pub passed: bool,
}

impl Gate {
    pub fn majority(name: &str, per_seed: Vec<bool>) -> Self {
        let yes = per_seed.iter().filter(|&&b| b).count();
        Self {
            name: name.into(),
            passed: 2 * yes > per_seed.len(),
            per_seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub seed: u64,
    pub system: String,
    pub step: usize,
    pub eval_loss: f64,
    pub factor_match: f64,
    pub shape_match: f64,
    pub coherent: bool,
    pub bg_consistency: f64,
    pub frame_diff_energy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub systems: [String; 2],
    pub steps: Vec<usize>,
    pub rows: Vec<ComparisonRow>,
    /// First system's final factor match ≥ the second's.
    pub final_gate: Gate,
    /// First system coherent and second incoherent at the earliest step.
    pub early_gate: Gate,
}

/// Which pipeline a comparison slot runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SystemSpec {
    pub stage: StageId,
    pub d_c: usize,
}

impl SystemSpec {
    pub fn label(&self) -> String {
        if self.stage.uses_semantics() {
            format!("{}_dc{}", self.stage.as_str(), self.d_c)
        } else {
            self.stage.as_str().into()
        }
    }
}

/// Train two systems at matched budgets and compare their samples at the
/// early and final checkpoints. Pipeline-agnostic: swapping `a` and `b`
/// swaps the roles in the report.
pub fn compare_systems(lab: &Lab, exp: &ExperimentConfig, a: SystemSpec, b: SystemSpec) -> Result<ComparisonReport> {
    let total = exp.latent.train.steps;
    let early = ((total as f64 * exp.early_fraction).round() as usize).clamp(1, total);
    let steps = if early < total { vec![early, total] } else { vec![total] };
    let specs = lab.eval_specs(lab.cfg.eval_clips);
    let conds = lab.conditions(&specs);
    let mut rows = Vec::new();
    let (mut final_pass, mut early_pass) = (Vec::new(), Vec::new());
    for &seed in &exp.seeds {
        let ra = lab.system(a.stage, exp, a.d_c, seed, false, &steps)?;
        let rb = lab.system(b.stage, exp, b.d_c, seed, false, &steps)?;
        ra.fairness.check_matched(&rb.fairness)?;
        let mut evals: [Vec<SampleEval>; 2] = Default::default();
        for (k, (spec, run)) in [(a, &ra), (b, &rb)].into_iter().enumerate() {
            for snap in &run.snapshots {
                let videos = lab.sample(snap, &conds, exp, seed)?;
                let e = evaluate_samples(&lab.probe, &videos, &specs)?;
                rows.push(ComparisonRow {
                    seed,
                    system: spec.label(),
                    step: snap.step,
                    eval_loss: snap.eval_loss,
                    factor_match: e.factor_match,
                    shape_match: e.factors.shape,
                    coherent: coherent_shapes(&e.factors, exp.coherent_threshold),
                    bg_consistency: e.bg_consistency,
                    frame_diff_energy: e.frame_diff_energy,
                });
                evals[k].push(e);
            }
        }
        final_pass.push(evals[0].last().unwrap().factor_match >= evals[1].last().unwrap().factor_match);
        early_pass.push(
            coherent_shapes(&evals[0][0].factors, exp.coherent_threshold)
                && !coherent_shapes(&evals[1][0].factors, exp.coherent_threshold),
        );
    }
    Ok(ComparisonReport {
        systems: [a.label(), b.label()],
        steps,
        rows,
        final_gate: Gate::majority("final factor_match", final_pass),
        early_gate: Gate::majority("early coherent-shape probe", early_pass),
    })
}

/// Semantic-space two-stage pipeline against the compressed-VAE-space one.
pub fn convergence_experiment(lab: &Lab, exp: &ExperimentConfig) -> Result<ComparisonReport> {
    let d_c = exp.compressor.d_c;
    compare_systems(
        lab,
        exp,
        SystemSpec {
            stage: StageId::LatentGen,
            d_c,
        },
        SystemSpec {
            stage: StageId::BaselineVae2stage,
            d_c,
        },
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub seed: u64,
    pub d_c: usize,
    pub eval_loss: f64,
    pub factor_match: f64,
    pub shape_match: f64,
    pub bg_consistency: f64,
    pub frame_diff_energy: f64,
    pub mean_luma: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub sweep: Vec<usize>,
    pub rows: Vec<AblationRow>,
    /// Smallest width matches or beats the largest on factor match and
    /// background consistency.
    pub gate: Gate,
}

pub fn d_c_sweep(exp: &ExperimentConfig, d: usize) -> Vec<usize> {
    if exp.d_c_sweep.is_empty() {
        let mut v = vec![d, (d / 4).max(1), (d / 16).max(1)];
        v.dedup();
        v
    } else {
        exp.d_c_sweep.clone()
    }
}

pub fn compression_ablation(lab: &Lab, exp: &ExperimentConfig) -> Result<AblationReport> {
    let sweep = d_c_sweep(exp, lab.encoder.cfg.d);
    let (lo, hi) = (*sweep.iter().min().unwrap(), *sweep.iter().max().unwrap());
    let specs = lab.eval_specs(lab.cfg.eval_clips);
    let conds = lab.conditions(&specs);
    let total = exp.latent.train.steps;
    let early = ((total as f64 * exp.early_fraction).round() as usize).clamp(1, total);
    // Same snapshot grid as the convergence experiment so runs are shared.
    let steps = if early < total { vec![early, total] } else { vec![total] };
    let mut rows = Vec::new();
    let mut pass = Vec::new();
    for &seed in &exp.seeds {
        let mut by_dc = HashMap::new();
        let mut fairness: Option<FairnessRecord> = None;
        for &d_c in &sweep {
            let run = lab.system(StageId::LatentGen, exp, d_c, seed, false, &steps)?;
            if let Some(f) = &fairness {
                f.check_matched(&run.fairness)?;
            }
            fairness = Some(run.fairness.clone());
            let videos = lab.sample(run.last(), &conds, exp, seed)?;
            let e = evaluate_samples(&lab.probe, &videos, &specs)?;
            rows.push(AblationRow {
                seed,
                d_c,
                eval_loss: run.last().eval_loss,
                factor_match: e.factor_match,
                shape_match: e.factors.shape,
                bg_consistency: e.bg_consistency,
                frame_diff_energy: e.frame_diff_energy,
                mean_luma: e.mean_luma,
            });
            by_dc.insert(d_c, e);
        }
        let (s, l) = (&by_dc[&lo], &by_dc[&hi]);
        pass.push(s.factor_match >= l.factor_match && s.bg_consistency >= l.bg_consistency);
    }
    Ok(AblationReport {
        sweep,
        rows,
        gate: Gate::majority("smallest d_c >= largest on factor_match and bg_consistency", pass),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriftRow {
    pub seed: u64,
    pub system: String,
    pub metric: Metric,
    pub mean_delta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriftExperimentReport {
    pub systems: [String; 2],
    pub clips: usize,
    pub fraction: f64,
    pub rows: Vec<DriftRow>,
    /// First system's mean bg_consistency drift ≤ the second's.
    pub gate: Gate,
}

/// Mean drift of each metric over `videos`.
pub fn mean_drift(videos: &[Video], fraction: f64) -> Result<Vec<(Metric, f64)>> {
    Metric::ALL
        .iter()
        .map(|&m| {
            let total: f64 = videos.iter().map(|v| drift(v, m, fraction).map(|r| r.delta)).sum::<Result<f64>>()?;
            Ok((m, total / videos.len() as f64))
        })
        .collect()
}

/// Long-mode drift of two systems on matched conditions and seeds.
pub fn compare_drift(lab: &Lab, exp: &ExperimentConfig, a: SystemSpec, b: SystemSpec) -> Result<DriftExperimentReport> {
    let long = lab.long_clips()?;
    let specs: Vec<FactorSpec> = long.1.iter().take(exp.drift_clips).map(|c| c.spec.clone()).collect();
    if specs.is_empty() {
        return Err(config_err!("drift experiment needs at least one clip"));
    }
    let conds = lab.conditions(&specs);
    let mut rows = Vec::new();
    let mut pass = Vec::new();
    for &seed in &exp.seeds {
        let mut bg = [0.0; 2];
        let mut fairness = Vec::new();
        for (k, spec) in [a, b].into_iter().enumerate() {
            let run = lab.system(spec.stage, exp, spec.d_c, seed, true, &[])?;
            fairness.push(run.fairness.clone());
            let snap = run.last();
            crate::pipeline::check_long_layout(&snap.latent.dit.cfg.layout, snap.latent.dit.shape.target_dims)?;
            let videos = lab.sample(snap, &conds, exp, seed)?;
            for (m, d) in mean_drift(&videos, exp.drift_fraction)? {
                if m == Metric::BgConsistency {
                    bg[k] = d;
                }
                rows.push(DriftRow {
                    seed,
                    system: spec.label(),
                    metric: m,
                    mean_delta: d,
                });
            }
        }
        fairness[0].check_matched(&fairness[1])?;
        pass.push(bg[0] <= bg[1]);
    }
    Ok(DriftExperimentReport {
        systems: [a.label(), b.label()],
        clips: specs.len(),
        fraction: exp.drift_fraction,
        rows,
        gate: Gate::majority("mean bg_consistency drift <= baseline", pass),
    })
}

pub fn drift_experiment(lab: &Lab, exp: &ExperimentConfig) -> Result<DriftExperimentReport> {
    compare_drift(
        lab,
        exp,
        SystemSpec {
            stage: StageId::LatentGen,
            d_c: exp.compressor.d_c,
        },
        SystemSpec {
            stage: StageId::BaselineCtSwin,
            d_c: 0,
        },
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceRow {
    pub seed: u64,
    pub shape_agreement: f64,
    pub motion_agreement: f64,
    pub agreement: f64,
    pub pixel_mse: f64,
    pub noise_floor: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceReport {
    pub rows: Vec<ReferenceRow>,
    pub threshold: f64,
    pub gate: Gate,
}

/// Condition the latent generator on held-out clips' own compressed
/// semantics and check that the probe reads the reference's shape and
/// motion back while the pixels differ by more than the texture noise.
pub fn reference_experiment(lab: &Lab, exp: &ExperimentConfig, threshold: f64) -> Result<ReferenceReport> {
    let total = exp.latent.train.steps;
    let early = ((total as f64 * exp.early_fraction).round() as usize).clamp(1, total);
    let steps = if early < total { vec![early, total] } else { vec![total] };
    let refs: Vec<&Clip> = lab.eval.iter().collect();
    let specs: Vec<FactorSpec> = refs.iter().map(|c| c.spec.clone()).collect();
    let amp = lab.cfg.corpus.noise_amplitude;
    let noise_floor = amp * amp / 3.0;
    let mut rows = Vec::new();
    let mut pass = Vec::new();
    for &seed in &exp.seeds {
        let run = lab.system(StageId::LatentGen, exp, exp.compressor.d_c, seed, false, &steps)?;
        let latent = &run.last().latent;
        let sems = reference_semantics(&refs, latent, &lab.encoder, &lab.ae)?;
        let opts = GenerateOptions {
            seed,
            ..exp.generate.clone()
        };
        let conds = lab.conditions(&specs);
        let videos = generate_from_semantics(&conds, &sems, latent, &lab.ae, &opts)?;
        let m = factor_match(&lab.probe, &videos, &specs)?;
        let mse = videos
            .iter()
            .zip(&refs)
            .map(|(v, c)| autoencoder::mse(v, &c.video))
            .sum::<Result<f64>>()?
            / videos.len() as f64;
        let agreement = 0.5 * (m.shape + m.motion);
        pass.push(agreement >= threshold && mse > noise_floor);
        rows.push(ReferenceRow {
            seed,
            shape_agreement: m.shape,
            motion_agreement: m.motion,
            agreement,
            pixel_mse: mse,
            noise_floor,
        });
    }
    Ok(ReferenceReport {
        rows,
        threshold,
        gate: Gate::majority("reference agreement with pixel detail differing", pass),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn video_from_luma(frames: &[f32], h: usize, w: usize) -> Video {
        // Grey frames: equal channels give luma equal to the value.
        let mut data = Vec::new();
        for &f in frames {
            data.extend(std::iter::repeat(f).take(3 * h * w));
        }
        Video::new(frames.len(), 3, h, w, 8.0, data).unwrap()
    }

    #[test]
    fn drift_of_constant_video_is_zero() {
        let v = video_from_luma(&[0.4; 20], 2, 2);
        for m in Metric::ALL {
            assert_eq!(drift(&v, m, 0.15).unwrap().delta, 0.0);
        }
    }

    #[test]
    fn drift_matches_scalar_loop_on_ramp() {
        let frames: Vec<f32> = (0..100).map(|i| i as f32 / 99.0).collect();
        let v = video_from_luma(&frames, 2, 3);
        let r = drift(&v, Metric::MeanLuma, 0.15).unwrap();
        let (mut head, mut tail) = (0.0, 0.0);
        for i in 0..15 {
            head += v.pixel(i, 0, 0, 0) as f64;
        }
        for i in 85..100 {
            tail += v.pixel(i, 0, 0, 0) as f64;
        }
        let oracle = (head / 15.0 - tail / 15.0).abs();
        assert!((r.delta - oracle).abs() <= 1e-12, "{} vs {oracle}", r.delta);
        assert!(r.delta >= 0.0);
    }

    #[test]
    fn drift_minimal_and_invalid_cases() {
        let v = video_from_luma(&[0.2, 0.7], 1, 1);
        let r = drift(&v, Metric::MeanLuma, 0.5).unwrap();
        assert!((r.delta - 0.5).abs() < 1e-6);
        assert!(matches!(drift(&v, Metric::MeanLuma, 0.15), Err(Error::Validation(_))));
        assert!(drift(&v, Metric::MeanLuma, 0.6).is_err());
        assert!(drift(&v, Metric::MeanLuma, 0.0).is_err());
    }

    #[test]
    fn drift_is_time_reversal_symmetric() {
        let cfg = CorpusConfig {
            num_clips: 3,
            frames: 20,
            height: 8,
            width: 8,
            sprite_radius: 2.0,
            ..CorpusConfig::default()
        };
        for c in make_corpus(&cfg, ClipLength::Short).unwrap() {
            for m in Metric::ALL {
                let a = drift(&c.video, m, 0.15).unwrap().delta;
                let b = drift(&c.video.reversed(), m, 0.15).unwrap().delta;
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn frame_diff_energy_oracle() {
        let v = video_from_luma(&[0.0, 0.5, 0.5, 1.0], 1, 2);
        assert!((frame_diff_energy(&v, 0..4) - (0.25 + 0.0 + 0.25) / 3.0).abs() < 1e-12);
        assert_eq!(frame_diff_energy(&v, 1..2), 0.0);
    }

    #[test]
    fn bg_consistency_bounds() {
        let cfg = CorpusConfig {
            num_clips: 2,
            frames: 8,
            height: 12,
            width: 12,
            sprite_radius: 2.0,
            ..CorpusConfig::default()
        };
        for c in make_corpus(&cfg, ClipLength::Short).unwrap() {
            let b = bg_consistency(&c.video, 0..8);
            assert!((-1.0..=1.0).contains(&b));
            // Static textured backgrounds with small noise stay well correlated.
            assert!(b > 0.5, "{b}");
        }
        assert_eq!(bg_consistency(&video_from_luma(&[0.3, 0.3], 2, 2), 0..2), 1.0);
    }

    #[test]
    fn metrics_invariant_to_clip_duplication() {
        let v = video_from_luma(&[0.1, 0.5, 0.2], 2, 2);
        let one = [v.clone()];
        let two = [v.clone(), v];
        for m in Metric::ALL {
            let a = mean_drift(&one, 0.5).unwrap();
            let b = mean_drift(&two, 0.5).unwrap();
            assert_eq!(a, b, "{m:?}");
        }
    }

    #[test]
    fn filmstrip_png_dimensions() {
        let dir = tempfile::tempdir().unwrap();
        let v = video_from_luma(&[0.0, 1.0, 0.5], 4, 5);
        let p = dir.path().join("s/strip.png");
        write_filmstrip(&p, &v, 2).unwrap();
        let dec = png::Decoder::new(std::io::BufReader::new(File::open(&p).unwrap()));
        let reader = dec.read_info().unwrap();
        let info = reader.info();
        assert_eq!((info.width, info.height), (30, 8));
    }

    #[test]
    fn gate_majority() {
        assert!(Gate::majority("x", vec![true, false, true]).passed);
        assert!(!Gate::majority("x", vec![true, false, false]).passed);
    }
}
