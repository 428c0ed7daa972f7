//! Diffusion transformer shared by both generators.
//!
//! A sequence is `[condition] ++ [semantic tokens] ++ [noised target tokens]`.
//! Every block applies RMS normalisation whose per-channel scale comes from
//! the timestep embedding before attention and before the MLP. Attention is
//! either full or the interleaved shifted-window layout, where latent and
//! semantic tokens share windows along latent time, semantic tokens see each
//! other globally, and the condition token is visible to everyone.

use std::collections::HashSet;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{config_err, dim_err, Error, Result};
use crate::grid::GridDims;
use crate::nn::{Block, Embedding, Linear};
use crate::numerics::{AttnMask, Bound, Graph, MaskGrid, ParamId, ParamStore, Rng, Tensor, Var, NORM_EPS};
use crate::synthdata::{FactorSpec, VocabSizes};

pub const CKPT_KIND: &str = "dit";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenKind {
    Condition,
    Semantic,
    Latent,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LayoutMode {
    #[default]
    Full,
    SwinInterleaved,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttentionLayout {
    pub mode: LayoutMode,
    /// Window length in latent-time units.
    pub window: usize,
}

impl Default for AttentionLayout {
    fn default() -> Self {
        Self {
            mode: LayoutMode::Full,
            window: 4,
        }
    }
}

impl AttentionLayout {
    pub fn validate(&self) -> Result<()> {
        if self.mode == LayoutMode::SwinInterleaved && (self.window == 0 || self.window % 2 != 0) {
            return Err(config_err!("swin window {} must be even and positive", self.window));
        }
        Ok(())
    }

    /// Shift applied at `layer`: half a window on odd layers.
    pub fn shift(&self, layer: usize) -> f64 {
        if layer % 2 == 1 {
            self.window as f64 / 2.0
        } else {
            0.0
        }
    }

    pub fn window_of(&self, time: f64, layer: usize) -> i64 {
        ((time - self.shift(layer)) / self.window as f64).floor() as i64
    }
}

/// Condition token inputs derived from factors: categorical indices and
/// continuous values (velocity, normalised start position).
#[derive(Clone, Debug, PartialEq)]
pub struct Condition {
    pub cats: [usize; 4],
    pub cont: [f64; 4],
}

impl Condition {
    pub fn from_spec(s: &FactorSpec, width: usize, height: usize) -> Self {
        Self {
            cats: [s.shape_id, s.color, s.background_id, s.motion_pattern],
            cont: [
                s.velocity[0],
                s.velocity[1],
                s.start_position[0] / width as f64 - 0.5,
                s.start_position[1] / height as f64 - 0.5,
            ],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Position {
    pub t: usize,
    pub h: usize,
    pub w: usize,
}

/// Token bookkeeping for one sample (values live in the graph).
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub kinds: Vec<TokenKind>,
    pub positions: Vec<Position>,
    /// Latent-time coordinate; `None` marks globally visible tokens.
    pub times: Vec<Option<f64>>,
    pub target_kind: TokenKind,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.kinds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kinds.is_empty()
    }

    pub fn count(&self, kind: TokenKind) -> usize {
        self.kinds.iter().filter(|&&k| k == kind).count()
    }

    pub fn offset(&self, kind: TokenKind) -> usize {
        self.kinds.iter().position(|&k| k == kind).unwrap_or(self.len())
    }
}

/// Lay out the condition token (when used), the optional semantic grid, then
/// the target grid, each in raster order. `sem_span` is how many latent-time units one
/// semantic time step covers; semantic tokens sit at the centre of that span.
pub fn build_sequence(
    target: GridDims,
    target_kind: TokenKind,
    semantic: Option<GridDims>,
    sem_span: f64,
    condition: bool,
) -> Result<TokenSequence> {
    let n = usize::from(condition);
    let mut seq = TokenSequence {
        kinds: vec![TokenKind::Condition; n],
        positions: vec![Position { t: 0, h: 0, w: 0 }; n],
        times: vec![None; n],
        target_kind,
    };
    let mut push = |kind, dims: GridDims, time: &dyn Fn(usize) -> f64| {
        for i in 0..dims.len() {
            let (t, h, w) = dims.coords(i);
            seq.kinds.push(kind);
            seq.positions.push(Position { t, h, w });
            seq.times.push(Some(time(t)));
        }
    };
    if let Some(s) = semantic {
        push(TokenKind::Semantic, s, &|t| t as f64 * sem_span + (sem_span - 1.0) / 2.0);
    }
    push(target_kind, target, &|t| t as f64);
    let mut seen = HashSet::new();
    for (k, p) in seq.kinds.iter().zip(&seq.positions) {
        if !seen.insert((*k, p.t, p.h, p.w)) {
            return Err(Error::Internal(format!("duplicate {k:?} position {p:?}")));
        }
    }
    Ok(seq)
}

/// Allowed attention pairs of `seq` at `layer`.
pub fn build_mask(seq: &TokenSequence, layout: &AttentionLayout, layer: usize) -> Result<MaskGrid> {
    layout.validate()?;
    let n = seq.len();
    if layout.mode == LayoutMode::Full {
        return Ok(MaskGrid::full(n, n));
    }
    for (k, t) in seq.kinds.iter().zip(&seq.times) {
        if *k != TokenKind::Condition && t.is_none() {
            return Err(Error::Internal(format!("{k:?} token without a time coordinate")));
        }
    }
    let win: Vec<Option<i64>> = seq.times.iter().map(|t| t.map(|t| layout.window_of(t, layer))).collect();
    Ok(MaskGrid::from_fn(n, n, |i, j| {
        let (ki, kj) = (seq.kinds[i], seq.kinds[j]);
        if ki == TokenKind::Condition || kj == TokenKind::Condition {
            return true;
        }
        if ki == TokenKind::Semantic && kj == TokenKind::Semantic {
            return true;
        }
        win[i] == win[j]
    }))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DitConfig {
    pub width: usize,
    pub blocks: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub t_freqs: usize,
    pub layout: AttentionLayout,
}

impl Default for DitConfig {
    fn default() -> Self {
        Self {
            width: 128,
            blocks: 6,
            heads: 4,
            mlp_ratio: 4,
            t_freqs: 32,
            layout: AttentionLayout::default(),
        }
    }
}

/// What a particular DiT instance reads and writes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DitShape {
    pub target_kind: TokenKind,
    pub target_channels: usize,
    pub target_dims: GridDims,
    /// Channels and grid of conditioning semantic tokens, if any.
    pub semantic: Option<(usize, GridDims)>,
    pub sem_span: f64,
    pub vocab: VocabSizes,
    /// Whether a factor-condition token leads the sequence.
    pub condition: bool,
}

#[derive(Clone, Debug)]
struct PosTables {
    t: Embedding,
    h: Embedding,
    w: Embedding,
}

impl PosTables {
    /// Tables start from sinusoids of the token's centre as a fraction of the
    /// clip extent, so grids of different resolution begin spatially aligned.
    fn new(s: &mut ParamStore, name: &str, d: GridDims, width: usize, rng: &mut Rng) -> Self {
        let tables = Self {
            t: Embedding::new(s, &format!("{name}.pos_t"), d.t, width, 0.02, rng),
            h: Embedding::new(s, &format!("{name}.pos_h"), d.h, width, 0.02, rng),
            w: Embedding::new(s, &format!("{name}.pos_w"), d.w, width, 0.02, rng),
        };
        for (axis, (e, n)) in [(&tables.t, d.t), (&tables.h, d.h), (&tables.w, d.w)].into_iter().enumerate() {
            sinusoid_init(s.get_mut(e.table).data_mut(), n, width, axis);
        }
        tables
    }

    fn add(&self, g: &mut Graph, p: &Bound, x: Var, pos: &[Position]) -> Result<Var> {
        let mut x = x;
        let idx: [Vec<usize>; 3] = [
            pos.iter().map(|q| q.t).collect(),
            pos.iter().map(|q| q.h).collect(),
            pos.iter().map(|q| q.w).collect(),
        ];
        for (e, i) in [&self.t, &self.h, &self.w].into_iter().zip(idx.iter()) {
            let v = e.forward(g, p, i)?;
            x = g.add(x, v)?;
        }
        Ok(x)
    }
}

/// Each axis owns a third of the channels: sin/cos pairs at 0.5, 1, 2, …
/// cycles per clip extent. Other channels keep their random init.
fn sinusoid_init(table: &mut [f64], n: usize, width: usize, axis: usize) {
    let group = width / 3;
    let start = axis * group;
    for i in 0..n {
        let u = (i as f64 + 0.5) / n as f64;
        for j in 0..group / 2 {
            let phase = std::f64::consts::TAU * 0.5 * (1u64 << j.min(62)) as f64 * u;
            let row = &mut table[i * width..(i + 1) * width];
            row[start + 2 * j] += phase.sin();
            row[start + 2 * j + 1] += phase.cos();
        }
    }
}

#[derive(Clone, Debug)]
pub struct Dit {
    pub cfg: DitConfig,
    pub shape: DitShape,
    pub store: ParamStore,
    cond_cats: Vec<Embedding>,
    cond_cont: Option<Linear>,
    sem_embed: Option<(Linear, PosTables)>,
    target_embed: Linear,
    target_pos: PosTables,
    t_mlp1: Linear,
    t_mlp2: Linear,
    mods: Vec<Linear>,
    blocks: Vec<Block>,
    final_norm: ParamId,
    final_mod: Linear,
    head: Linear,
}

/// Sinusoidal features of `t ∈ [0, 1]`, one row per entry.
pub fn timestep_features(t: &[f64], freqs: usize) -> Tensor {
    let mut out = Vec::with_capacity(t.len() * 2 * freqs);
    for &ti in t {
        for k in 0..freqs {
            let w = (-(10_000f64.ln()) * k as f64 / freqs as f64).exp();
            out.push((1000.0 * ti * w).sin());
        }
        for k in 0..freqs {
            let w = (-(10_000f64.ln()) * k as f64 / freqs as f64).exp();
            out.push((1000.0 * ti * w).cos());
        }
    }
    Tensor::from_parts(vec![t.len(), 2 * freqs], out)
}

impl Dit {
    pub fn new(cfg: &DitConfig, shape: &DitShape, rng: &mut Rng) -> Result<Self> {
        cfg.layout.validate()?;
        if cfg.width % cfg.heads != 0 {
            return Err(config_err!("dit width {} not divisible by {} heads", cfg.width, cfg.heads));
        }
        let w = cfg.width;
        let mut s = ParamStore::new();
        let v = shape.vocab;
        let (cond_cats, cond_cont) = if shape.condition {
            let cats = [("shape", v.shapes), ("color", v.colors), ("background", v.backgrounds), ("motion", v.motions)]
                .iter()
                .map(|(n, k)| Embedding::new(&mut s, &format!("cond.{n}"), *k, w, 1.0, rng))
                .collect();
            (cats, Some(Linear::new(&mut s, "cond.cont", 4, w, true, rng)))
        } else {
            (Vec::new(), None)
        };
        let sem_embed = shape.semantic.map(|(c, d)| {
            (
                Linear::new(&mut s, "sem.embed", c, w, true, rng),
                PosTables::new(&mut s, "sem", d, w, rng),
            )
        });
        let target_embed = Linear::new(&mut s, "target.embed", shape.target_channels, w, true, rng);
        let target_pos = PosTables::new(&mut s, "target", shape.target_dims, w, rng);
        let t_mlp1 = Linear::new(&mut s, "temb.fc1", 2 * cfg.t_freqs, w, true, rng);
        let t_mlp2 = Linear::new(&mut s, "temb.fc2", w, w, true, rng);
        let mut mods = Vec::new();
        let mut blocks = Vec::new();
        for i in 0..cfg.blocks {
            mods.push(Linear::zeros(&mut s, &format!("block{i}.mod"), w, 2 * w, true));
            blocks.push(Block::new(&mut s, &format!("block{i}"), w, cfg.heads, cfg.mlp_ratio, rng));
        }
        let final_norm = s.add("final.norm", Tensor::full(&[w], 1.0));
        let final_mod = Linear::zeros(&mut s, "final.mod", w, w, true);
        let head = Linear::zeros(&mut s, "head", w, shape.target_channels, true);
        Ok(Self {
            cfg: cfg.clone(),
            shape: shape.clone(),
            store: s,
            cond_cats,
            cond_cont,
            sem_embed,
            target_embed,
            target_pos,
            t_mlp1,
            t_mlp2,
            mods,
            blocks,
            final_norm,
            final_mod,
            head,
        })
    }

    pub fn checkpoint(&self, seed: u64, extra: serde_json::Value) -> Checkpoint {
        let meta = serde_json::json!({ "config": self.cfg, "shape": self.shape, "extra": extra });
        Checkpoint::new(CKPT_KIND, seed, meta, self.store.clone())
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let cfg: DitConfig = serde_json::from_value(ck.meta["config"].clone()).map_err(|e| config_err!("dit checkpoint: {e}"))?;
        let shape: DitShape = serde_json::from_value(ck.meta["shape"].clone()).map_err(|e| config_err!("dit checkpoint: {e}"))?;
        let mut d = Self::new(&cfg, &shape, &mut Rng::new(0))?;
        d.store.load_from(&ck.params.to_entries())?;
        if ck.params.is_frozen() {
            d.store.freeze();
        }
        Ok(d)
    }

    pub fn sequence(&self) -> Result<TokenSequence> {
        build_sequence(
            self.shape.target_dims,
            self.shape.target_kind,
            self.shape.semantic.map(|x| x.1),
            self.shape.sem_span,
            self.shape.condition,
        )
    }

    /// One CSR mask per layer for a batch of `batch` samples.
    pub fn batch_masks(&self, batch: usize) -> Result<Vec<Rc<AttnMask>>> {
        self.batch_masks_with(&self.sequence()?, batch)
    }

    pub fn batch_masks_with(&self, seq: &TokenSequence, batch: usize) -> Result<Vec<Rc<AttnMask>>> {
        let even = Rc::new(AttnMask::from_grid(&build_mask(seq, &self.cfg.layout, 0)?)?.repeat_block_diagonal(batch));
        let odd = if self.cfg.layout.mode == LayoutMode::Full {
            even.clone()
        } else {
            Rc::new(AttnMask::from_grid(&build_mask(seq, &self.cfg.layout, 1)?)?.repeat_block_diagonal(batch))
        };
        Ok((0..self.cfg.blocks).map(|l| if l % 2 == 0 { even.clone() } else { odd.clone() }).collect())
    }

    /// Velocity for the target tokens of a batch.
    ///
    /// `target` stacks `B` noised grids (`B·n_target` rows), `sem` the
    /// conditioning semantic grids when this instance uses them. `t` holds one
    /// time per sample.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        target: Var,
        sem: Option<Var>,
        cond: &[Condition],
        t: &[f64],
        masks: &[Rc<AttnMask>],
    ) -> Result<Var> {
        let b = t.len();
        if b == 0 || (self.shape.condition && cond.len() != b) {
            return Err(dim_err!("dit batch: {} conditions, {} times", cond.len(), b));
        }
        if masks.len() != self.cfg.blocks {
            return Err(dim_err!("{} masks for {} blocks", masks.len(), self.cfg.blocks));
        }
        let n_t = self.shape.target_dims.len();
        if g.value(target).rows() != b * n_t || g.value(target).cols() != self.shape.target_channels {
            return Err(dim_err!(
                "target tokens {:?}, expected {}x{}",
                g.value(target).shape(),
                b * n_t,
                self.shape.target_channels
            ));
        }
        let mut parts = Vec::new();
        let mut counts = Vec::new();
        if let Some(lin) = &self.cond_cont {
            let flat: Vec<f64> = cond.iter().flat_map(|c| c.cont).collect();
            let cont = g.constant(Tensor::matrix(b, 4, flat)?);
            let mut c = lin.forward(g, p, cont)?;
            for (k, e) in self.cond_cats.iter().enumerate() {
                let idx: Vec<usize> = cond.iter().map(|c| c.cats[k]).collect();
                let v = e.forward(g, p, &idx)?;
                c = g.add(c, v)?;
            }
            parts.push(c);
            counts.push(1);
        }
        // Semantic tokens.
        match (&self.sem_embed, sem, self.shape.semantic) {
            (Some((emb, pos)), Some(sv), Some((ch, dims))) => {
                if g.value(sv).rows() != b * dims.len() || g.value(sv).cols() != ch {
                    return Err(dim_err!("semantic tokens {:?}, expected {}x{ch}", g.value(sv).shape(), b * dims.len()));
                }
                let x = emb.forward(g, p, sv)?;
                let positions = repeat_positions(dims, b);
                parts.push(pos.add(g, p, x, &positions)?);
                counts.push(dims.len());
            }
            (None, None, None) => {}
            (Some(_), None, _) => return Err(config_err!("this generator requires semantic tokens")),
            _ => return Err(config_err!("semantic tokens supplied to a generator built without them (layout guard)")),
        }
        // Target tokens.
        let x = self.target_embed.forward(g, p, target)?;
        let positions = repeat_positions(self.shape.target_dims, b);
        parts.push(self.target_pos.add(g, p, x, &positions)?);
        counts.push(n_t);

        // Kind-major stack → sample-major sequence.
        let l: usize = counts.iter().sum();
        let stacked = g.concat_rows(&parts)?;
        let mut perm = Vec::with_capacity(b * l);
        for s in 0..b {
            let mut base = 0;
            for &n in &counts {
                perm.extend((0..n).map(|i| base + s * n + i));
                base += b * n;
            }
        }
        let mut h = g.gather_rows(stacked, perm.into())?;

        // Timestep embedding → per-sample modulation, broadcast to tokens.
        let tf = g.constant(timestep_features(t, self.cfg.t_freqs));
        let te = self.t_mlp1.forward(g, p, tf)?;
        let te = g.silu(te);
        let te = self.t_mlp2.forward(g, p, te)?;
        let te = g.silu(te);
        let owner: Rc<[usize]> = (0..b * l).map(|i| i / l).collect();
        let w = self.cfg.width;
        for (i, (blk, m)) in self.blocks.iter().zip(&self.mods).enumerate() {
            let s = m.forward(g, p, te)?;
            let s = g.add_scalar(s, 1.0);
            let s = g.gather_rows(s, owner.clone())?;
            let s1 = g.slice_cols(s, 0, w)?;
            let s2 = g.slice_cols(s, w, 2 * w)?;
            h = blk.forward(g, p, h, &masks[i], Some((s1, s2)))?;
            if !g.value(h).all_finite() {
                return Err(Error::Numeric(format!("non-finite activation after block {i}")));
            }
        }
        let s = self.final_mod.forward(g, p, te)?;
        let s = g.add_scalar(s, 1.0);
        let s = g.gather_rows(s, owner)?;
        let h = g.rms_norm(h, p.var(self.final_norm), s, NORM_EPS)?;
        let off = l - n_t;
        let rows: Rc<[usize]> = (0..b).flat_map(|s| (0..n_t).map(move |i| s * l + off + i)).collect();
        let h = g.gather_rows(h, rows)?;
        self.head.forward(g, p, h)
    }

    /// Inference helper: velocity for stacked `z` at a shared time `t`.
    pub fn velocity(&self, z: &Tensor, sem: Option<&Tensor>, cond: &[Condition], t: f64, masks: &[Rc<AttnMask>]) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = g.bind(&self.store, false);
        let zv = g.constant(z.clone());
        let sv = sem.map(|s| g.constant(s.clone()));
        let ts = vec![t; cond.len()];
        let v = self.forward(&mut g, &p, zv, sv, cond, &ts, masks)?;
        Ok(g.value(v).clone())
    }

    /// Parameters of the semantic-token embedder (empty without semantics).
    pub fn semantic_param_ids(&self) -> Vec<ParamId> {
        self.sem_embed
            .iter()
            .flat_map(|(l, pos)| [Some(l.w), l.b, Some(pos.t.table), Some(pos.h.table), Some(pos.w.table)])
            .flatten()
            .collect()
    }
}

fn repeat_positions(d: GridDims, b: usize) -> Vec<Position> {
    (0..b)
        .flat_map(|_| {
            (0..d.len()).map(move |i| {
                let (t, h, w) = d.coords(i);
                Position { t, h, w }
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn latent_seq(t: usize, sem: Option<GridDims>) -> TokenSequence {
        build_sequence(GridDims::new(t, 1, 1), TokenKind::Latent, sem, 2.0, true).unwrap()
    }

    #[test]
    fn sequence_counts_and_raster_order() {
        let s = build_sequence(GridDims::new(2, 2, 2), TokenKind::Latent, None, 1.0, true).unwrap();
        assert_eq!(s.len(), 9);
        let s = build_sequence(GridDims::new(2, 2, 2), TokenKind::Latent, Some(GridDims::new(1, 1, 1)), 2.0, true).unwrap();
        assert_eq!(s.len(), 10);
        assert_eq!(
            (s.count(TokenKind::Condition), s.count(TokenKind::Semantic), s.count(TokenKind::Latent)),
            (1, 1, 8)
        );
        let off = s.offset(TokenKind::Latent);
        assert_eq!(s.positions[off + 5], Position { t: 1, h: 0, w: 1 });
    }

    #[test]
    fn condition_token_is_optional() {
        let s = build_sequence(GridDims::new(2, 2, 2), TokenKind::Latent, Some(GridDims::new(1, 1, 1)), 2.0, false).unwrap();
        assert_eq!(s.len(), 9);
        assert_eq!(s.count(TokenKind::Condition), 0);
        assert_eq!(s.offset(TokenKind::Semantic), 0);
    }

    #[test]
    fn semantic_tokens_sit_at_span_centres() {
        let s = build_sequence(GridDims::new(8, 1, 1), TokenKind::Latent, Some(GridDims::new(2, 1, 1)), 4.0, true).unwrap();
        assert_eq!(s.times[1], Some(1.5));
        assert_eq!(s.times[2], Some(5.5));
    }

    #[test]
    fn full_mode_is_all_true() {
        let s = latent_seq(8, None);
        let m = build_mask(&s, &AttentionLayout::default(), 0).unwrap();
        assert_eq!(m.count_allowed(), s.len() * s.len());
    }

    fn swin(w: usize) -> AttentionLayout {
        AttentionLayout {
            mode: LayoutMode::SwinInterleaved,
            window: w,
        }
    }

    #[test]
    fn swin_windows_match_double_loop_oracle() {
        let s = latent_seq(8, None);
        let off = s.offset(TokenKind::Latent);
        let even = build_mask(&s, &swin(4), 0).unwrap();
        let odd = build_mask(&s, &swin(4), 1).unwrap();
        let even_sets = [[0, 1, 2, 3].as_slice(), &[4, 5, 6, 7]];
        let odd_sets = [[0, 1].as_slice(), &[2, 3, 4, 5], &[6, 7]];
        let same = |sets: &[&[usize]], i: usize, j: usize| sets.iter().any(|s| s.contains(&i) && s.contains(&j));
        for i in 0..8 {
            for j in 0..8 {
                assert_eq!(even.get(off + i, off + j), same(&even_sets, i, j));
                assert_eq!(odd.get(off + i, off + j), same(&odd_sets, i, j));
                // Formula oracle.
                let win = |t: usize, shift: f64| ((t as f64 - shift) / 4.0).floor() as i64;
                assert_eq!(odd.get(off + i, off + j), win(i, 2.0) == win(j, 2.0));
            }
        }
    }

    #[test]
    fn swin_mask_symmetry_and_global_tokens() {
        let s = latent_seq(12, Some(GridDims::new(6, 1, 1)));
        for layer in 0..2 {
            let m = build_mask(&s, &swin(4), layer).unwrap();
            for i in 0..s.len() {
                assert!(m.get(0, i) && m.get(i, 0));
                for j in 0..s.len() {
                    assert_eq!(m.get(i, j), m.get(j, i));
                    if s.kinds[i] == TokenKind::Semantic && s.kinds[j] == TokenKind::Semantic {
                        assert!(m.get(i, j));
                    }
                }
            }
        }
        assert_eq!(swin(4).shift(1), 2.0);
        assert_eq!(swin(4).shift(0), 0.0);
        assert!(swin(3).validate().is_err());
    }

    #[test]
    fn two_layer_reachability() {
        let t = 24;
        let s = latent_seq(t, None);
        let off = s.offset(TokenKind::Latent);
        let lat = |m: &MaskGrid| MaskGrid::from_fn(t, t, |i, j| m.get(off + i, off + j));
        let (a, b) = (lat(&build_mask(&s, &swin(4), 0).unwrap()), lat(&build_mask(&s, &swin(4), 1).unwrap()));
        let compose = |x: &MaskGrid, y: &MaskGrid| MaskGrid::from_fn(t, t, |i, j| (0..t).any(|k| x.get(i, k) && y.get(k, j)));
        let (ab, ba) = (compose(&a, &b), compose(&b, &a));
        for i in 0..t {
            for j in 0..t {
                if i.abs_diff(j) <= 4 {
                    assert!(ab.get(i, j) || ba.get(i, j), "{i} {j}");
                }
            }
        }
        // One and a half windows is not guaranteed: 0 and 6 stay apart.
        assert!(!ab.get(0, 6) && !ba.get(0, 6));
        assert!(ab.get(0, 5));
    }

    #[test]
    fn pair_count_grows_linearly() {
        let count = |t: usize| {
            let s = latent_seq(t, None);
            let off = s.offset(TokenKind::Latent);
            let m = build_mask(&s, &swin(4), 1).unwrap();
            (off..s.len()).flat_map(|i| (off..s.len()).map(move |j| (i, j))).filter(|&(i, j)| m.get(i, j)).count()
        };
        let (a, b) = (count(64), count(128));
        assert!(b as f64 <= 2.2 * a as f64, "{a} -> {b}");
    }

    fn tiny(semantic: bool, layout: AttentionLayout) -> Dit {
        let shape = DitShape {
            target_kind: TokenKind::Latent,
            target_channels: 3,
            target_dims: GridDims::new(4, 2, 1),
            semantic: semantic.then_some((2, GridDims::new(2, 1, 1))),
            sem_span: 2.0,
            condition: true,
            vocab: VocabSizes {
                shapes: 3,
                colors: 2,
                backgrounds: 2,
                motions: 3,
            },
        };
        let cfg = DitConfig {
            width: 8,
            blocks: 2,
            heads: 2,
            mlp_ratio: 2,
            t_freqs: 4,
            layout,
        };
        Dit::new(&cfg, &shape, &mut Rng::new(1)).unwrap()
    }

    fn cond() -> Condition {
        Condition {
            cats: [1, 0, 1, 2],
            cont: [0.5, -0.2, 0.1, 0.0],
        }
    }

    #[test]
    fn zero_head_gives_zero_velocity() {
        let d = tiny(true, AttentionLayout::default());
        let masks = d.batch_masks(2).unwrap();
        let z = Rng::new(3).randn(&[16, 3]);
        let s = Rng::new(4).randn(&[4, 2]);
        let v = d.velocity(&z, Some(&s), &[cond(), cond()], 0.3, &masks).unwrap();
        assert!(v.data().iter().all(|&x| x == 0.0));
    }

    /// Randomise the zero-initialised parts so outputs depend on inputs.
    fn randomised(mut d: Dit) -> Dit {
        let mut rng = Rng::new(77);
        let ids: Vec<_> = d.store.ids().collect();
        for id in ids {
            let name = d.store.name(id).to_string();
            if name.starts_with("head") || name.contains("mod") {
                for x in d.store.get_mut(id).data_mut() {
                    *x = 0.3 * rng.normal();
                }
            }
        }
        d
    }

    #[test]
    fn batch_forward_matches_single_samples() {
        let d = randomised(tiny(true, swin(2)));
        let z = Rng::new(3).randn(&[16, 3]);
        let s = Rng::new(4).randn(&[4, 2]);
        let c2 = Condition {
            cats: [0, 1, 0, 1],
            cont: [0.0; 4],
        };
        let both = d.velocity(&z, Some(&s), &[cond(), c2.clone()], 0.6, &d.batch_masks(2).unwrap()).unwrap();
        let m1 = d.batch_masks(1).unwrap();
        let top = |t: &Tensor, r: std::ops::Range<usize>| Tensor::matrix(r.len(), t.cols(), t.data()[r.start * t.cols()..r.end * t.cols()].to_vec()).unwrap();
        let a = d.velocity(&top(&z, 0..8), Some(&top(&s, 0..2)), &[cond()], 0.6, &m1).unwrap();
        let b = d.velocity(&top(&z, 8..16), Some(&top(&s, 2..4)), &[c2], 0.6, &m1).unwrap();
        assert!(top(&both, 0..8).max_abs_diff(&a) < 1e-12);
        assert!(top(&both, 8..16).max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn windowed_outputs_ignore_other_windows() {
        // One block without semantics: windows {t0,t1} and {t2,t3} only meet
        // through the condition token, which needs a second layer to relay.
        let mut d = randomised(tiny(false, swin(2)));
        d.cfg.blocks = 1;
        d.blocks.truncate(1);
        d.mods.truncate(1);
        let masks = d.batch_masks(1).unwrap();
        let z = Rng::new(5).randn(&[8, 3]);
        let mut z2 = z.clone();
        for x in &mut z2.data_mut()[12..] {
            *x += 1.0;
        }
        let a = d.velocity(&z, None, &[cond()], 0.4, &masks).unwrap();
        let b = d.velocity(&z2, None, &[cond()], 0.4, &masks).unwrap();
        assert!(a.data()[..12].iter().zip(&b.data()[..12]).all(|(x, y)| (x - y).abs() < 1e-12));
        assert!(a.max_abs_diff(&b) > 1e-6);
    }

    #[test]
    fn swapping_tokens_and_positions_permutes_outputs() {
        // Attention and MLPs are permutation-equivariant once position
        // embeddings travel with their tokens; check at the block level.
        let d = randomised(tiny(false, AttentionLayout::default()));
        let blk = &d.blocks[0];
        let x = Rng::new(6).randn(&[5, 8]);
        let perm = [0usize, 2, 1, 3, 4];
        let px = Tensor::matrix(5, 8, perm.iter().flat_map(|&i| x.row(i).to_vec()).collect()).unwrap();
        let grid = MaskGrid::from_fn(5, 5, |i, j| i == 0 || j == 0 || (i > 2) == (j > 2));
        let pgrid = MaskGrid::from_fn(5, 5, |i, j| grid.get(perm[i], perm[j]));
        let run = |x: &Tensor, m: &MaskGrid| {
            let mut g = Graph::new();
            let p = g.bind(&d.store, false);
            let xv = g.constant(x.clone());
            let y = blk.forward(&mut g, &p, xv, &Rc::new(AttnMask::from_grid(m).unwrap()), None).unwrap();
            g.value(y).clone()
        };
        let (y, py) = (run(&x, &grid), run(&px, &pgrid));
        for (i, &pi) in perm.iter().enumerate() {
            for c in 0..8 {
                assert!((py.row(i)[c] - y.row(pi)[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn semantic_embedder_gradients() {
        let d = randomised(tiny(true, AttentionLayout::default()));
        let masks = d.batch_masks(1).unwrap();
        let mut g = Graph::new();
        let p = g.bind(&d.store, true);
        let z = g.constant(Rng::new(3).randn(&[8, 3]));
        let s = g.constant(Rng::new(4).randn(&[2, 2]));
        let v = d.forward(&mut g, &p, z, Some(s), &[cond()], &[0.5], &masks).unwrap();
        let l = g.mean(v);
        let l = g.mul(l, l).unwrap();
        g.backward(l).unwrap();
        let norm: f64 = d
            .semantic_param_ids()
            .iter()
            .filter_map(|&id| g.grad(p.var(id)))
            .map(|t| t.data().iter().map(|x| x * x).sum::<f64>())
            .sum();
        assert!(norm > 0.0);

        // Same weights, but the sequence carries no semantic block: the
        // embedder is never touched.
        let mut plain = d.clone();
        plain.sem_embed = None;
        plain.shape.semantic = None;
        let masks = plain.batch_masks(1).unwrap();
        let mut g = Graph::new();
        let p = g.bind(&plain.store, true);
        let z = g.constant(Rng::new(3).randn(&[8, 3]));
        let v = plain.forward(&mut g, &p, z, None, &[cond()], &[0.5], &masks).unwrap();
        let l = g.mean(v);
        let l = g.mul(l, l).unwrap();
        g.backward(l).unwrap();
        for id in d.semantic_param_ids() {
            assert!(g.grad(p.var(id)).map_or(true, |t| t.data().iter().all(|&x| x == 0.0)));
        }
    }

    #[test]
    fn layout_guard_rejects_unexpected_semantics() {
        let d = tiny(false, AttentionLayout::default());
        let masks = d.batch_masks(1).unwrap();
        let mut g = Graph::new();
        let p = g.bind(&d.store, false);
        let z = g.constant(Tensor::zeros(&[8, 3]));
        let s = g.constant(Tensor::zeros(&[2, 2]));
        let err = d.forward(&mut g, &p, z, Some(s), &[cond()], &[0.5], &masks).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn dit_gradients_match_finite_differences() {
        use crate::numerics::gradcheck;
        let d = randomised(tiny(true, swin(2)));
        let masks = d.batch_masks(2).unwrap();
        let targets = ["target.embed.w", "block1.mod.w", "sem.embed.w", "block0.qkv.w", "head.w", "cond.shape.table"];
        for seed in 0..20u64 {
            let mut rng = Rng::new(seed);
            let z = rng.randn(&[16, 3]);
            let s = rng.randn(&[4, 2]);
            for name in targets {
                let id = d.store.find(name).unwrap();
                let inputs = [d.store.get(id).clone()];
                let rep = gradcheck::check(&inputs, 1e-5, |g, v| {
                    let p = g.bind(&d.store, false);
                    let mut vars: Vec<Var> = d.store.ids().map(|i| p.var(i)).collect();
                    vars[id.index()] = v[0];
                    let p = crate::numerics::Bound::from_vars(vars);
                    let zv = g.constant(z.clone());
                    let sv = g.constant(s.clone());
                    let out = d.forward(g, &p, zv, Some(sv), &[cond(), cond()], &[0.3, 0.8], &masks)?;
                    gradcheck::project(g, out, seed + 7)
                })
                .unwrap();
                assert!(rep.max_rel_err() <= 1e-4, "seed {seed} {name}: {}", rep.max_rel_err());
            }
        }
    }
}
