//! Moving-sprite video corpus with fully known generative factors.
//!
//! Each clip shows one sprite (circle, square or triangle) of a palette colour
//! moving over a patterned background. The factors that produced a clip are
//! kept alongside it and stand in for text prompts during generation and for
//! ground truth during evaluation.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{config_err, validation_err, Error, Result};
use crate::numerics::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Motion {
    Linear,
    Bounce,
    Orbit,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pattern {
    Horizontal,
    Vertical,
    Checker,
    Stripes,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Background {
    pub pattern: Pattern,
    pub a: [f64; 3],
    pub b: [f64; 3],
}

/// Ground-truth factors of one clip. Categorical fields index into the
/// vocabularies of [`CorpusConfig`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactorSpec {
    pub shape_id: usize,
    pub color: usize,
    pub velocity: [f64; 2],
    pub start_position: [f64; 2],
    pub background_id: usize,
    pub motion_pattern: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub num_clips: usize,
    pub frames: usize,
    pub frames_long: usize,
    pub height: usize,
    pub width: usize,
    pub fps: f64,
    pub semantic_fps: f64,
    pub seed: u64,
    pub sprite_radius: f64,
    pub noise_amplitude: f64,
    pub speed_min: f64,
    pub speed_max: f64,
    pub orbit_radius: f64,
    pub shapes: Vec<Shape>,
    pub motions: Vec<Motion>,
    pub palette: Vec<[f64; 3]>,
    pub backgrounds: Vec<Background>,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            num_clips: 256,
            frames: 16,
            frames_long: 128,
            height: 32,
            width: 32,
            fps: 8.0,
            semantic_fps: 2.0,
            seed: 0,
            sprite_radius: 5.0,
            noise_amplitude: 0.05,
            speed_min: 0.5,
            speed_max: 1.5,
            orbit_radius: 6.0,
            shapes: vec![Shape::Circle, Shape::Square, Shape::Triangle],
            motions: vec![Motion::Linear, Motion::Bounce, Motion::Orbit],
            palette: vec![
                [0.95, 0.25, 0.2],
                [0.25, 0.9, 0.3],
                [0.3, 0.45, 1.0],
                [0.95, 0.9, 0.25],
            ],
            backgrounds: vec![
                Background {
                    pattern: Pattern::Horizontal,
                    a: [0.1, 0.1, 0.15],
                    b: [0.35, 0.3, 0.4],
                },
                Background {
                    pattern: Pattern::Vertical,
                    a: [0.35, 0.2, 0.1],
                    b: [0.1, 0.15, 0.1],
                },
                Background {
                    pattern: Pattern::Checker,
                    a: [0.15, 0.2, 0.3],
                    b: [0.3, 0.35, 0.45],
                },
                Background {
                    pattern: Pattern::Stripes,
                    a: [0.2, 0.3, 0.2],
                    b: [0.45, 0.4, 0.3],
                },
            ],
        }
    }
}

pub const CHANNELS: usize = 3;

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.frames == 0 || self.frames_long == 0 {
            return Err(config_err!("corpus dimensions must be positive"));
        }
        if self.shapes.is_empty() || self.motions.is_empty() || self.palette.is_empty() || self.backgrounds.is_empty() {
            return Err(config_err!(
                "vocabulary too small for stratification: every factor vocabulary needs at least one entry"
            ));
        }
        if !(self.speed_min >= 0.0 && self.speed_max >= self.speed_min) {
            return Err(config_err!("speed bounds [{}, {}] invalid", self.speed_min, self.speed_max));
        }
        if !(self.fps > 0.0 && self.semantic_fps > 0.0) {
            return Err(config_err!("frame rates must be positive"));
        }
        Ok(())
    }

    /// Frame stride used to feed the semantic encoder.
    pub fn semantic_stride(&self) -> usize {
        (self.fps / self.semantic_fps).round() as usize
    }

    pub fn vocab_sizes(&self) -> VocabSizes {
        VocabSizes {
            shapes: self.shapes.len(),
            colors: self.palette.len(),
            backgrounds: self.backgrounds.len(),
            motions: self.motions.len(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabSizes {
    pub shapes: usize,
    pub colors: usize,
    pub backgrounds: usize,
    pub motions: usize,
}

/// Pixel video laid out `frames × channels × height × width`, values in
/// `[0, 1]` and stored as `f32` (the on-disk precision).
#[derive(Clone, Debug, PartialEq)]
pub struct Video {
    pub frames: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub fps: f64,
    data: Vec<f32>,
}

impl Video {
    pub fn new(frames: usize, channels: usize, height: usize, width: usize, fps: f64, data: Vec<f32>) -> Result<Self> {
        if data.len() != frames * channels * height * width {
            return Err(crate::error::dim_err!(
                "video {}x{}x{}x{} needs {} values, got {}",
                frames,
                channels,
                height,
                width,
                frames * channels * height * width,
                data.len()
            ));
        }
        let data = data.into_iter().map(|x| x.clamp(0.0, 1.0)).collect();
        Ok(Self {
            frames,
            channels,
            height,
            width,
            fps,
            data,
        })
    }

    pub fn filled(frames: usize, channels: usize, height: usize, width: usize, fps: f64, value: f32) -> Self {
        Self {
            frames,
            channels,
            height,
            width,
            fps,
            data: vec![value.clamp(0.0, 1.0); frames * channels * height * width],
        }
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn frame_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn frame(&self, f: usize) -> &[f32] {
        let n = self.frame_len();
        &self.data[f * n..(f + 1) * n]
    }

    pub fn pixel(&self, f: usize, c: usize, y: usize, x: usize) -> f32 {
        self.data[((f * self.channels + c) * self.height + y) * self.width + x]
    }

    /// Keep the frames at `indices`, in order.
    pub fn select_frames(&self, indices: &[usize]) -> Video {
        let mut data = Vec::with_capacity(indices.len() * self.frame_len());
        for &f in indices {
            data.extend_from_slice(self.frame(f));
        }
        Video {
            frames: indices.len(),
            data,
            ..self.clone()
        }
    }

    pub fn reversed(&self) -> Video {
        let idx: Vec<usize> = (0..self.frames).rev().collect();
        self.select_frames(&idx)
    }

    /// Rec. 601 luma per frame, `frames × (height·width)`.
    pub fn luma(&self, f: usize) -> Vec<f64> {
        let hw = self.height * self.width;
        let fr = self.frame(f);
        (0..hw)
            .map(|p| {
                if self.channels == 3 {
                    0.299 * fr[p] as f64 + 0.587 * fr[hw + p] as f64 + 0.114 * fr[2 * hw + p] as f64
                } else {
                    fr[p] as f64
                }
            })
            .collect()
    }

    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.data.iter().flat_map(|x| x.to_le_bytes()).collect()
    }

    pub fn from_le_bytes(frames: usize, channels: usize, height: usize, width: usize, fps: f64, bytes: &[u8]) -> Result<Self> {
        let data: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Video::new(frames, channels, height, width, fps, data)
    }
}

fn check_spec(spec: &FactorSpec, cfg: &CorpusConfig) -> Result<()> {
    let v = cfg.vocab_sizes();
    if spec.shape_id >= v.shapes
        || spec.color >= v.colors
        || spec.background_id >= v.backgrounds
        || spec.motion_pattern >= v.motions
    {
        return Err(validation_err!("factor outside vocabulary: {spec:?}"));
    }
    let [x, y] = spec.start_position;
    if !(x >= 0.0 && x <= (cfg.width - 1) as f64 && y >= 0.0 && y <= (cfg.height - 1) as f64) {
        return Err(validation_err!(
            "start position ({x}, {y}) outside the {}x{} frame",
            cfg.width,
            cfg.height
        ));
    }
    Ok(())
}

fn reflect(pos: f64, vel: f64, hi: f64) -> (f64, f64) {
    let mut p = pos + vel;
    let mut v = vel;
    // Loop handles steps longer than the domain.
    loop {
        if p > hi {
            p = 2.0 * hi - p;
            v = -v;
        } else if p < 0.0 {
            p = -p;
            v = -v;
        } else {
            return (p, v);
        }
    }
}

/// Sprite centre `(x, y)` for frames `0..num_frames`.
pub fn trajectory(spec: &FactorSpec, cfg: &CorpusConfig, num_frames: usize) -> Vec<[f64; 2]> {
    let [x0, y0] = spec.start_position;
    let [vx, vy] = spec.velocity;
    match cfg.motions[spec.motion_pattern] {
        Motion::Linear => (0..num_frames)
            .map(|k| [x0 + vx * k as f64, y0 + vy * k as f64])
            .collect(),
        Motion::Bounce => {
            let (w, h) = ((cfg.width - 1) as f64, (cfg.height - 1) as f64);
            let (mut x, mut y, mut ux, mut uy) = (x0, y0, vx, vy);
            let mut out = Vec::with_capacity(num_frames);
            for _ in 0..num_frames {
                out.push([x, y]);
                (x, ux) = reflect(x, ux, w);
                (y, uy) = reflect(y, uy, h);
            }
            out
        }
        Motion::Orbit => {
            let r = cfg.orbit_radius;
            let speed = (vx * vx + vy * vy).sqrt();
            let dir = if vy >= 0.0 { 1.0 } else { -1.0 };
            let omega = if r > 0.0 { dir * speed / r } else { 0.0 };
            let (cx, cy) = (x0 - r, y0);
            (0..num_frames)
                .map(|k| {
                    let a = omega * k as f64;
                    [cx + r * a.cos(), cy + r * a.sin()]
                })
                .collect()
        }
    }
}

pub fn inside_shape(shape: Shape, dx: f64, dy: f64, r: f64) -> bool {
    match shape {
        Shape::Circle => dx * dx + dy * dy <= r * r,
        Shape::Square => dx.abs() <= r * 0.85 && dy.abs() <= r * 0.85,
        // Apex up, base on dy = r.
        Shape::Triangle => dy <= r && dy >= -r && dx.abs() <= (dy + r) * 0.5,
    }
}

fn background_value(bg: &Background, x: usize, y: usize, w: usize, h: usize, c: usize) -> f64 {
    let t = match bg.pattern {
        Pattern::Horizontal => x as f64 / (w.max(2) - 1) as f64,
        Pattern::Vertical => y as f64 / (h.max(2) - 1) as f64,
        Pattern::Checker => (((x / 4) + (y / 4)) % 2) as f64,
        Pattern::Stripes => {
            if ((x + y) / 3) % 2 == 0 {
                0.0
            } else {
                1.0
            }
        }
    };
    bg.a[c] * (1.0 - t) + bg.b[c] * t
}

/// Render `num_frames` frames of the clip described by `spec`.
pub fn render_clip(spec: &FactorSpec, cfg: &CorpusConfig, num_frames: usize, rng: &mut Rng) -> Result<Video> {
    check_spec(spec, cfg)?;
    let (h, w) = (cfg.height, cfg.width);
    let traj = trajectory(spec, cfg, num_frames);
    let shape = cfg.shapes[spec.shape_id];
    let color = cfg.palette[spec.color];
    let bg = &cfg.backgrounds[spec.background_id];
    let r = cfg.sprite_radius;
    let mut data = vec![0.0f32; num_frames * CHANNELS * h * w];
    for (f, &[cx, cy]) in traj.iter().enumerate() {
        for y in 0..h {
            for x in 0..w {
                let on = inside_shape(shape, x as f64 - cx, y as f64 - cy, r);
                for c in 0..CHANNELS {
                    let base = if on { color[c] } else { background_value(bg, x, y, w, h, c) };
                    let noise = if cfg.noise_amplitude > 0.0 {
                        rng.uniform_range(-cfg.noise_amplitude, cfg.noise_amplitude)
                    } else {
                        0.0
                    };
                    data[((f * CHANNELS + c) * h + y) * w + x] = (base + noise).clamp(0.0, 1.0) as f32;
                }
            }
        }
    }
    Video::new(num_frames, CHANNELS, h, w, cfg.fps, data)
}

/// Per-clip factor draw. Categorical values come from the stratified
/// assignment; continuous values from the clip's own stream.
fn sample_continuous(cat: [usize; 4], cfg: &CorpusConfig, num_frames: usize, rng: &mut Rng) -> FactorSpec {
    let [shape_id, color, background_id, motion_pattern] = cat;
    let margin = cfg.sprite_radius.min((cfg.width.min(cfg.height) as f64 - 1.0) / 2.0);
    let (wmax, hmax) = ((cfg.width - 1) as f64, (cfg.height - 1) as f64);
    let speed = rng.uniform_range(cfg.speed_min, cfg.speed_max);
    let angle = rng.uniform_range(0.0, std::f64::consts::TAU);
    let (mut vx, mut vy) = (speed * angle.cos(), speed * angle.sin());
    let span = |lo: f64, hi: f64, rng: &mut Rng| if hi > lo { rng.uniform_range(lo, hi) } else { (lo + hi) / 2.0 };
    let start = match cfg.motions[motion_pattern] {
        Motion::Linear => {
            // Keep the whole clip in view when the speed allows it.
            let travel = (num_frames.saturating_sub(1)) as f64;
            let axis = |v: f64, max: f64, rng: &mut Rng| {
                let lo = margin.max(margin - v * travel);
                let hi = (max - margin).min(max - margin - v * travel);
                if lo <= hi {
                    span(lo, hi, rng)
                } else {
                    span(margin, max - margin, rng)
                }
            };
            [axis(vx, wmax, rng), axis(vy, hmax, rng)]
        }
        Motion::Bounce => [span(margin, wmax - margin, rng), span(margin, hmax - margin, rng)],
        Motion::Orbit => {
            let r = cfg.orbit_radius;
            let cx = span(margin + r, wmax - margin - r, rng).max(0.0);
            let cy = span(margin + r, hmax - margin - r, rng).max(0.0);
            // Initial tangent of a counter-clockwise (vy > 0) or clockwise orbit.
            vx = 0.0;
            vy = if angle.sin() >= 0.0 { speed } else { -speed };
            [(cx + r).min(wmax), cy.min(hmax)]
        }
    };
    FactorSpec {
        shape_id,
        color,
        velocity: [vx, vy],
        start_position: start,
        background_id,
        motion_pattern,
    }
}

/// Balanced categorical assignment: factor `f` of clip `i` is
/// `perm_f[i] mod |vocab_f|`, with an independent permutation per factor.
fn stratified_factors(cfg: &CorpusConfig, n: usize, rng: &mut Rng) -> Vec<[usize; 4]> {
    let v = cfg.vocab_sizes();
    let sizes = [v.shapes, v.colors, v.backgrounds, v.motions];
    let perms: Vec<Vec<usize>> = sizes.iter().map(|_| rng.permutation(n)).collect();
    (0..n)
        .map(|i| {
            let mut cat = [0; 4];
            for f in 0..4 {
                cat[f] = perms[f][i] % sizes[f];
            }
            cat
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClipLength {
    Short,
    Long,
}

impl CorpusConfig {
    pub fn num_frames(&self, len: ClipLength) -> usize {
        match len {
            ClipLength::Short => self.frames,
            ClipLength::Long => self.frames_long,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Clip {
    pub spec: FactorSpec,
    pub video: Video,
}

/// Deterministically render `cfg.num_clips` clips of the requested length.
pub fn make_corpus(cfg: &CorpusConfig, len: ClipLength) -> Result<Vec<Clip>> {
    cfg.validate()?;
    if cfg.num_clips == 0 {
        return Err(config_err!("num_clips must be positive"));
    }
    let num_frames = cfg.num_frames(len);
    let stream = match len {
        ClipLength::Short => 0,
        ClipLength::Long => 1,
    };
    let root = Rng::new(cfg.seed).derive(stream);
    let mut cat_rng = root.derive(u64::MAX);
    let cats = stratified_factors(cfg, cfg.num_clips, &mut cat_rng);
    cats.into_iter()
        .enumerate()
        .map(|(i, cat)| {
            let mut rng = root.derive(i as u64);
            let spec = sample_continuous(cat, cfg, num_frames, &mut rng);
            let video = render_clip(&spec, cfg, num_frames, &mut rng)?;
            Ok(Clip { spec, video })
        })
        .collect()
}

/// Keep every `round(fps / target_fps)`-th frame starting at frame 0.
pub fn subsample_frames(v: &Video, target_fps: f64) -> Result<Video> {
    if !(target_fps > 0.0) || target_fps > v.fps {
        return Err(validation_err!("target fps {target_fps} must be in (0, {}]", v.fps));
    }
    let stride = (v.fps / target_fps).round() as usize;
    subsample_stride(v, stride)
}

pub fn subsample_stride(v: &Video, stride: usize) -> Result<Video> {
    if stride < 1 {
        return Err(validation_err!("frame stride {stride} < 1"));
    }
    let idx: Vec<usize> = (0..v.frames).step_by(stride).collect();
    let mut out = v.select_frames(&idx);
    out.fps = v.fps / stride as f64;
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct CorpusHeader {
    format: String,
    config: CorpusConfig,
    seed: u64,
    num_clips: usize,
    frames: usize,
    channels: usize,
    height: usize,
    width: usize,
    fps: f64,
}

const CORPUS_FORMAT: &str = "semgen-corpus-v1";

/// Write `header.json`, `factors.csv` and one `clip_<idx>.bin` per clip.
pub fn save_corpus(dir: &Path, cfg: &CorpusConfig, clips: &[Clip]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let first = clips.first().ok_or_else(|| config_err!("empty corpus"))?;
    let header = CorpusHeader {
        format: CORPUS_FORMAT.into(),
        config: cfg.clone(),
        seed: cfg.seed,
        num_clips: clips.len(),
        frames: first.video.frames,
        channels: first.video.channels,
        height: first.video.height,
        width: first.video.width,
        fps: first.video.fps,
    };
    let path = dir.join("header.json");
    let text = serde_json::to_string_pretty(&header).map_err(|e| Error::Internal(e.to_string()))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;

    let path = dir.join("factors.csv");
    let mut csv = String::from("idx,shape_id,color,vel_x,vel_y,start_x,start_y,background_id,motion_pattern\n");
    for (i, c) in clips.iter().enumerate() {
        let s = &c.spec;
        csv.push_str(&format!(
            "{i},{},{},{},{},{},{},{},{}\n",
            s.shape_id,
            s.color,
            s.velocity[0],
            s.velocity[1],
            s.start_position[0],
            s.start_position[1],
            s.background_id,
            s.motion_pattern
        ));
    }
    fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;

    for (i, c) in clips.iter().enumerate() {
        let path = dir.join(format!("clip_{i}.bin"));
        let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        f.write_all(&c.video.to_le_bytes()).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

fn parse_factors(path: &Path, text: &str) -> Result<Vec<FactorSpec>> {
    let bad = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 9 {
            return Err(bad(format!("line {}: expected 9 fields", ln + 1)));
        }
        let u = |s: &str| s.parse::<usize>().map_err(|e| bad(format!("line {}: {e}", ln + 1)));
        let x = |s: &str| s.parse::<f64>().map_err(|e| bad(format!("line {}: {e}", ln + 1)));
        out.push(FactorSpec {
            shape_id: u(f[1])?,
            color: u(f[2])?,
            velocity: [x(f[3])?, x(f[4])?],
            start_position: [x(f[5])?, x(f[6])?],
            background_id: u(f[7])?,
            motion_pattern: u(f[8])?,
        });
    }
    Ok(out)
}

pub fn load_corpus(dir: &Path) -> Result<(CorpusConfig, Vec<Clip>)> {
    let path = dir.join("header.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let header: CorpusHeader = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.clone(),
        reason: e.to_string(),
    })?;
    if header.format != CORPUS_FORMAT {
        return Err(Error::Format {
            path,
            reason: format!("unknown format `{}`", header.format),
        });
    }
    let path = dir.join("factors.csv");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let specs = parse_factors(&path, &text)?;
    if specs.len() != header.num_clips {
        return Err(Error::Format {
            path,
            reason: format!("{} factor rows for {} clips", specs.len(), header.num_clips),
        });
    }
    let clips = specs
        .into_iter()
        .enumerate()
        .map(|(i, spec)| {
            let path = dir.join(format!("clip_{i}.bin"));
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            let video = Video::from_le_bytes(header.frames, header.channels, header.height, header.width, header.fps, &bytes)?;
            Ok(Clip { spec, video })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((header.config, clips))
}

/// SHA-256 over every clip's pixels and factors, in corpus order.
pub fn corpus_hash(clips: &[Clip]) -> String {
    let mut h = Sha256::new();
    for c in clips {
        h.update(c.video.to_le_bytes());
        h.update(serde_json::to_vec(&c.spec).unwrap_or_default());
    }
    hex::encode(h.finalize())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> CorpusConfig {
        CorpusConfig {
            height: 24,
            width: 24,
            sprite_radius: 3.0,
            num_clips: 8,
            ..CorpusConfig::default()
        }
    }

    fn spec(motion: usize, start: [f64; 2], vel: [f64; 2]) -> FactorSpec {
        FactorSpec {
            shape_id: 0,
            color: 0,
            velocity: vel,
            start_position: start,
            background_id: 0,
            motion_pattern: motion,
        }
    }

    #[test]
    fn static_sprite_frames_match_up_to_noise() {
        let cfg = small_cfg();
        let v = render_clip(&spec(0, [10.0, 10.0], [0.0, 0.0]), &cfg, 6, &mut Rng::new(1)).unwrap();
        let amp = cfg.noise_amplitude as f32;
        for f in 1..6 {
            for (a, b) in v.frame(0).iter().zip(v.frame(f)) {
                assert!((a - b).abs() <= 2.0 * amp + 1e-6);
            }
        }
    }

    #[test]
    fn linear_kinematics() {
        let cfg = CorpusConfig {
            width: 32,
            ..small_cfg()
        };
        let t = trajectory(&spec(0, [2.0, 5.0], [1.0, 0.0]), &cfg, 16);
        let xs: Vec<f64> = t.iter().map(|p| p[0]).collect();
        assert_eq!(xs, (2..=17).map(|x| x as f64).collect::<Vec<_>>());
    }

    #[test]
    fn bounce_matches_scalar_simulation() {
        let cfg = CorpusConfig {
            motions: vec![Motion::Linear, Motion::Bounce],
            ..small_cfg()
        };
        let h = cfg.height as f64;
        let t = trajectory(&spec(1, [h - 2.0, 4.0], [2.0, 0.0]), &cfg, 12);
        // Scalar oracle: step, then mirror about the wall that was crossed.
        let hi = (cfg.width - 1) as f64;
        let (mut x, mut v) = (h - 2.0, 2.0f64);
        for p in &t {
            assert!((p[0] - x).abs() < 1e-12, "{} vs {}", p[0], x);
            x += v;
            if x > hi {
                x = hi - (x - hi);
                v = -v;
            }
            if x < 0.0 {
                x = -x;
                v = -v;
            }
        }
        assert_eq!(t[1][0], h - 2.0);
    }

    #[test]
    fn orbit_has_constant_radius_and_step() {
        let cfg = small_cfg();
        let t = trajectory(&spec(2, [15.0, 12.0], [0.0, 1.2]), &cfg, 10);
        let c = [15.0 - cfg.orbit_radius, 12.0];
        let step = |a: [f64; 2], b: [f64; 2]| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
        for w in t.windows(2) {
            assert!((step(w[0], c) - cfg.orbit_radius).abs() < 1e-12);
            assert!((step(w[0], w[1]) - step(t[0], t[1])).abs() < 1e-12);
        }
    }

    #[test]
    fn start_outside_frame_is_rejected() {
        let err = render_clip(&spec(0, [-1.0, 3.0], [0.0, 0.0]), &small_cfg(), 4, &mut Rng::new(0)).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn recover_velocity_by_least_squares() {
        let cfg = CorpusConfig {
            noise_amplitude: 0.0,
            width: 40,
            height: 40,
            ..small_cfg()
        };
        let s = FactorSpec {
            shape_id: 1,
            ..spec(0, [8.0, 20.0], [1.3, -0.6])
        };
        let v = render_clip(&s, &cfg, 12, &mut Rng::new(0)).unwrap();
        let color = cfg.palette[0];
        let centers: Vec<[f64; 2]> = (0..v.frames)
            .map(|f| {
                let (mut sx, mut sy, mut n) = (0.0, 0.0, 0.0);
                for y in 0..v.height {
                    for x in 0..v.width {
                        if (0..3).all(|c| (v.pixel(f, c, y, x) as f64 - color[c]).abs() < 1e-6) {
                            sx += x as f64;
                            sy += y as f64;
                            n += 1.0;
                        }
                    }
                }
                [sx / n, sy / n]
            })
            .collect();
        let n = centers.len() as f64;
        let tm = (n - 1.0) / 2.0;
        for axis in 0..2 {
            let mean = centers.iter().map(|c| c[axis]).sum::<f64>() / n;
            let num: f64 = centers.iter().enumerate().map(|(k, c)| (k as f64 - tm) * (c[axis] - mean)).sum();
            let den: f64 = (0..centers.len()).map(|k| (k as f64 - tm).powi(2)).sum();
            assert!((num / den - s.velocity[axis]).abs() < 0.1, "axis {axis}: {}", num / den);
        }
    }

    #[test]
    fn corpus_is_deterministic_and_sized() {
        let cfg = small_cfg();
        let a = make_corpus(&cfg, ClipLength::Short).unwrap();
        let b = make_corpus(&cfg, ClipLength::Short).unwrap();
        assert_eq!(a.len(), cfg.num_clips);
        assert_eq!(corpus_hash(&a), corpus_hash(&b));
        let one = make_corpus(&CorpusConfig { num_clips: 1, ..cfg.clone() }, ClipLength::Short).unwrap();
        assert_eq!(one.len(), 1);
    }

    #[test]
    fn stratification_covers_every_category() {
        let cfg = CorpusConfig {
            num_clips: 256,
            height: 12,
            width: 12,
            frames: 2,
            sprite_radius: 2.0,
            orbit_radius: 2.0,
            ..CorpusConfig::default()
        };
        let clips = make_corpus(&cfg, ClipLength::Short).unwrap();
        let v = cfg.vocab_sizes();
        let mut hist = [vec![0; v.shapes], vec![0; v.colors], vec![0; v.backgrounds], vec![0; v.motions]];
        for c in &clips {
            hist[0][c.spec.shape_id] += 1;
            hist[1][c.spec.color] += 1;
            hist[2][c.spec.background_id] += 1;
            hist[3][c.spec.motion_pattern] += 1;
        }
        for h in &hist {
            assert!(h.iter().all(|&n| n >= 1), "{h:?}");
        }
    }

    #[test]
    fn empty_vocabulary_is_config_error() {
        let cfg = CorpusConfig {
            shapes: vec![],
            ..small_cfg()
        };
        assert!(matches!(make_corpus(&cfg, ClipLength::Short), Err(Error::Config(_))));
    }

    #[test]
    fn subsample_cases() {
        let v = Video::filled(16, 3, 2, 2, 8.0, 0.5);
        assert_eq!(subsample_frames(&v, 8.0).unwrap(), v);
        let s = subsample_frames(&v, 2.0).unwrap();
        assert_eq!(s.frames, 4);
        let long = Video::filled(240, 1, 1, 1, 24.0, 0.0);
        let s = subsample_frames(&long, 1.6).unwrap();
        assert_eq!(s.frames, 16);
        assert!(subsample_frames(&v, 16.0).is_err());
        assert!(subsample_stride(&v, 0).is_err());
    }

    #[test]
    fn subsample_keeps_expected_indices() {
        let data: Vec<f32> = (0..16).map(|f| f as f32 / 16.0).collect();
        let v = Video::new(16, 1, 1, 1, 8.0, data).unwrap();
        let s = subsample_frames(&v, 2.0).unwrap();
        let got: Vec<f32> = s.data().to_vec();
        assert_eq!(got, vec![0.0, 4.0 / 16.0, 8.0 / 16.0, 12.0 / 16.0]);
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = CorpusConfig {
            num_clips: 3,
            frames: 4,
            ..small_cfg()
        };
        let clips = make_corpus(&cfg, ClipLength::Short).unwrap();
        save_corpus(dir.path(), &cfg, &clips).unwrap();
        let (cfg2, back) = load_corpus(dir.path()).unwrap();
        assert_eq!(cfg2, cfg);
        assert_eq!(corpus_hash(&back), corpus_hash(&clips));
    }
}
