use std::sync::Arc;

use rand::Rng;

use crate::diffops::{Tape, Var, PAD};
use crate::error::{config_err, shape_err, Result};
use crate::params::{Builder, Init, ParamId, ParamStore, ParamVars};
use crate::tensor::{Real, Tensor};

use super::window::{dense_error, expand, to_dense_index, to_tokens_index, token_index, WindowPlan};

const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;
/// MLP hidden width as a multiple of the feature width.
pub const MLP_RATIO: usize = 4;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    pub patch: usize,
    /// Embedding width `C`; stage `i` runs at `C·2^i`.
    pub embed_dim: usize,
    /// Blocks per stage, each even (W-MSA / SW-MSA pairs).
    pub depths: [usize; 4],
    pub heads: [usize; 4],
    /// Window size `M`.
    pub window: usize,
    pub in_channels: usize,
    /// Learned relative position bias inside attention.
    pub rel_pos_bias: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            patch: 2,
            embed_dim: 48,
            depths: [2; 4],
            heads: [3, 6, 12, 24],
            window: 4,
            in_channels: 1,
            rel_pos_bias: false,
        }
    }
}

impl EncoderConfig {
    /// Defaults with a different width; head counts follow [`Self::default_heads`].
    pub fn with_width(embed_dim: usize, window: usize) -> Self {
        Self { embed_dim, heads: Self::default_heads(embed_dim), window, ..Self::default() }
    }

    /// `[3, 6, 12, 24]` when `C` is a multiple of 3, else `[1, 2, 4, 8]`.
    pub fn default_heads(embed_dim: usize) -> [usize; 4] {
        if embed_dim % 3 == 0 {
            [3, 6, 12, 24]
        } else {
            [1, 2, 4, 8]
        }
    }

    /// Feature width of stage `i` (0-based); `i = 4` is the bottleneck.
    pub fn width(&self, stage: usize) -> usize {
        self.embed_dim << stage
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 {
            return config_err("patch", "must be at least 1");
        }
        if self.embed_dim == 0 {
            return config_err("embed_dim", "must be at least 1");
        }
        if self.in_channels == 0 {
            return config_err("in_channels", "must be at least 1");
        }
        if self.window < 2 {
            return config_err("window", "must be at least 2");
        }
        for (i, &d) in self.depths.iter().enumerate() {
            if d == 0 || d % 2 == 1 {
                return config_err("depths", format!("stage {i} depth {d} is not a positive even number"));
            }
        }
        for (i, &h) in self.heads.iter().enumerate() {
            if h == 0 || self.width(i) % h != 0 {
                return config_err("heads", format!("stage {i}: {h} heads do not divide width {}", self.width(i)));
            }
        }
        Ok(())
    }

    /// Spatial extent of feature `f_i` for an input extent (`i` in 0..=5).
    pub fn feature_extent(&self, input: usize, level: usize) -> usize {
        match level {
            0 => input,
            _ => (1..level).fold(input / self.patch, |e, _| e.div_ceil(2)),
        }
    }

    /// Channel width of feature `f_i`.
    pub fn feature_width(&self, level: usize) -> usize {
        match level {
            0 => self.in_channels,
            l => self.width(l - 1),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AttnIds {
    pub q: ParamId,
    pub k: ParamId,
    pub v: ParamId,
    pub o: ParamId,
    pub rel: Option<ParamId>,
}

/// Tape handles for one attention module.
#[derive(Clone, Copy, Debug)]
pub struct AttnVars {
    pub q: Var,
    pub k: Var,
    pub v: Var,
    pub o: Var,
    pub rel: Option<Var>,
}

impl AttnIds {
    pub fn vars(&self, pv: &ParamVars) -> AttnVars {
        AttnVars { q: pv[self.q], k: pv[self.k], v: pv[self.v], o: pv[self.o], rel: self.rel.map(|r| pv[r]) }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BlockIds {
    pub norm1: (ParamId, ParamId),
    pub attn: AttnIds,
    pub norm2: (ParamId, ParamId),
    pub fc1: (ParamId, ParamId),
    pub fc2: (ParamId, ParamId),
}

#[derive(Clone, Debug)]
pub struct StageIds {
    pub blocks: Vec<BlockIds>,
    pub merge_norm: (ParamId, ParamId),
    pub merge: ParamId,
}

#[derive(Clone, Debug)]
pub struct EncoderIds {
    pub embed_w: ParamId,
    pub embed_b: ParamId,
    pub stages: Vec<StageIds>,
}

fn add_norm<T: Real, R: Rng>(b: &mut Builder<T, R>, name: &str, f: usize) -> Result<(ParamId, ParamId)> {
    Ok((b.add(&format!("{name}.gamma"), &[f], Init::Ones)?, b.add(&format!("{name}.beta"), &[f], Init::Zeros)?))
}

fn add_block<T: Real, R: Rng>(
    b: &mut Builder<T, R>,
    f: usize,
    heads: usize,
    window: usize,
    rel: bool,
) -> Result<BlockIds> {
    let proj = Init::TruncNormal(INIT_STD);
    let norm1 = add_norm(b, "norm1", f)?;
    let attn = AttnIds {
        q: b.add("attn.wq", &[f, f], proj)?,
        k: b.add("attn.wk", &[f, f], proj)?,
        v: b.add("attn.wv", &[f, f], proj)?,
        o: b.add("attn.wo", &[f, f], proj)?,
        rel: if rel { Some(b.add("attn.rel_bias", &[(2 * window - 1).pow(3), heads], proj)?) } else { None },
    };
    let norm2 = add_norm(b, "norm2", f)?;
    let hidden = MLP_RATIO * f;
    Ok(BlockIds {
        norm1,
        attn,
        norm2,
        fc1: (b.add("mlp.fc1.w", &[f, hidden], proj)?, b.add("mlp.fc1.b", &[hidden], Init::Zeros)?),
        fc2: (b.add("mlp.fc2.w", &[hidden, f], proj)?, b.add("mlp.fc2.b", &[f], Init::Zeros)?),
    })
}

/// Per-partition index tables and mask for one window layout.
pub struct WindowOps<T> {
    pub plan: WindowPlan,
    pub heads: usize,
    pub feat: usize,
    partition: Arc<[usize]>,
    reverse: Arc<[usize]>,
    split: Arc<[usize]>,
    merge: Arc<[usize]>,
    rel: Option<Arc<[usize]>>,
    pub mask: Option<Tensor<T>>,
}

impl<T: Real> WindowOps<T> {
    pub fn new(plan: WindowPlan, feat: usize, heads: usize, rel: bool) -> Self {
        let (nw, t) = (plan.n_windows(), plan.window_tokens());
        let split = split_heads_index(nw, t, feat, heads);
        let merge = invert(&split);
        Self {
            partition: expand(plan.slots(), feat),
            reverse: expand(plan.inverse(), feat),
            split,
            merge,
            rel: rel.then(|| rel_bias_index(plan.record.window, heads)),
            mask: plan.attention_mask().map(|m| m.to_bias()),
            plan,
            heads,
            feat,
        }
    }

    fn window_dims(&self) -> [usize; 3] {
        [self.plan.n_windows(), self.plan.window_tokens(), self.feat]
    }
}

/// `[n_win, T, F]` → `[n_win, heads, T, F/heads]`.
fn split_heads_index(nw: usize, t: usize, f: usize, heads: usize) -> Arc<[usize]> {
    let d = f / heads;
    let mut idx = Vec::with_capacity(nw * t * f);
    for w in 0..nw {
        for h in 0..heads {
            for i in 0..t {
                idx.extend((0..d).map(|j| (w * t + i) * f + h * d + j));
            }
        }
    }
    idx.into()
}

fn invert(perm: &[usize]) -> Arc<[usize]> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv.into()
}

/// `[heads, T, T]` entries of a `[(2M−1)³, heads]` table by coordinate offset.
fn rel_bias_index(m: usize, heads: usize) -> Arc<[usize]> {
    let t = m * m * m;
    let span = 2 * m - 1;
    let coord = |i: usize| [i / (m * m), (i / m) % m, i % m];
    let mut idx = Vec::with_capacity(heads * t * t);
    for h in 0..heads {
        for i in 0..t {
            for j in 0..t {
                let (a, b) = (coord(i), coord(j));
                let r = (0..3).fold(0, |acc, k| acc * span + a[k] + m - 1 - b[k]);
                idx.push(r * heads + h);
            }
        }
    }
    idx.into()
}

/// Output of [`window_msa`].
pub struct WindowAttention {
    /// `[n_win, T, F]`.
    pub out: Var,
    /// Post-softmax weights `[n_win, heads, T, T]`.
    pub weights: Var,
}

/// Multi-head self-attention inside each window:
/// `softmax(QKᵀ/√d + mask) V`, heads concatenated, then output-projected.
pub fn window_msa<T: Real>(
    tape: &mut Tape<T>,
    windows: Var,
    p: &AttnVars,
    ops: &WindowOps<T>,
) -> Result<WindowAttention> {
    let [nw, t, f] = ops.window_dims();
    if tape.dims(windows) != [nw, t, f] {
        return shape_err(format!("window_msa: expected {:?}, got {:?}", [nw, t, f], tape.dims(windows)));
    }
    let (h, d) = (ops.heads, f / ops.heads);
    let split_dims = [nw, h, t, d];
    let mut project = |w: Var| -> Result<Var> {
        let y = tape.linear(windows, w, None)?;
        tape.gather(y, ops.split.clone(), &split_dims)
    };
    let (q, k, v) = (project(p.q)?, project(p.k)?, project(p.v)?);
    let scores = tape.matmul(q, k, true)?;
    let mut scores = tape.scale(scores, T::lit(1.0 / (d as f64).sqrt()));
    if let (Some(table), Some(idx)) = (p.rel, &ops.rel) {
        let bias = tape.gather(table, idx.clone(), &[h, t, t])?;
        scores = tape.add_bias(scores, bias)?;
    }
    if let Some(mask) = &ops.mask {
        scores = tape.add_const(scores, mask)?;
    }
    let weights = tape.softmax(scores, 3)?;
    let ctx = tape.matmul(weights, v, false)?;
    let ctx = tape.gather(ctx, ops.merge.clone(), &[nw, t, f])?;
    let out = tape.linear(ctx, p.o, None)?;
    Ok(WindowAttention { out, weights })
}

/// One transformer block: `ẑ = MSA(LN(z)) + z; z' = MLP(LN(ẑ)) + ẑ` on a
/// `[N, F]` token sequence, windows laid out by `ops`.
pub fn swin_block<T: Real>(
    tape: &mut Tape<T>,
    pv: &ParamVars,
    z: Var,
    ids: &BlockIds,
    ops: &WindowOps<T>,
) -> Result<Var> {
    let n = tape.dims(z)[0];
    let eps = T::lit(LN_EPS);
    let h = tape.layer_norm(z, pv[ids.norm1.0], pv[ids.norm1.1], eps)?;
    let win = tape.gather(h, ops.partition.clone(), &ops.window_dims())?;
    let attn = window_msa(tape, win, &ids.attn.vars(pv), ops)?;
    let back = tape.gather(attn.out, ops.reverse.clone(), &[n, ops.feat])?;
    let z = tape.add(z, back)?;
    let h = tape.layer_norm(z, pv[ids.norm2.0], pv[ids.norm2.1], eps)?;
    let h = tape.linear(h, pv[ids.fc1.0], Some(pv[ids.fc1.1]))?;
    let h = tape.gelu(h);
    let h = tape.linear(h, pv[ids.fc2.0], Some(pv[ids.fc2.1]))?;
    tape.add(z, h)
}

/// A W-MSA block followed by an SW-MSA block.
pub fn swin_block_pair<T: Real>(
    tape: &mut Tape<T>,
    pv: &ParamVars,
    z: Var,
    ids: [&BlockIds; 2],
    regular: &WindowOps<T>,
    shifted: &WindowOps<T>,
) -> Result<Var> {
    let z = swin_block(tape, pv, z, ids[0], regular)?;
    swin_block(tape, pv, z, ids[1], shifted)
}

/// Non-overlapping `patch³` cubes flattened (channel, z, y, x order) and
/// linearly embedded; returns `[h·w·d, C]` tokens and the grid.
pub fn patch_embed<T: Real>(tape: &mut Tape<T>, x: Var, w: Var, b: Var, patch: usize) -> Result<(Var, [usize; 3])> {
    let dims = tape.dims(x).to_vec();
    if dims.len() != 4 {
        return Err(dense_error("patch_embed", &dims));
    }
    if dims[1..].iter().any(|&e| e % patch != 0) {
        return shape_err(format!("patch_embed: extents {:?} not divisible by patch {patch}", &dims[1..]));
    }
    let y = tape.conv3d(x, w, Some(b), patch, 0)?;
    let yd = tape.dims(y).to_vec();
    let grid = [yd[1], yd[2], yd[3]];
    let n = grid.iter().product::<usize>();
    let tokens = tape.gather(y, to_tokens_index(yd[0], n), &[n, yd[0]])?;
    Ok((tokens, grid))
}

/// Concatenation table for merging 2×2×2 neighbourhoods of a `[N, F]` grid
/// (odd extents zero-padded). Neighbour `k = 4·dz + 2·dy + dx`.
pub fn merge_index(grid: [usize; 3], f: usize) -> (Arc<[usize]>, [usize; 3]) {
    let out = grid.map(|g| g.div_ceil(2));
    let mut rows = Vec::with_capacity(out.iter().product::<usize>() * 8);
    for z in 0..out[0] {
        for y in 0..out[1] {
            for x in 0..out[2] {
                for k in 0..8 {
                    let p = [2 * z + k / 4, 2 * y + (k / 2) % 2, 2 * x + k % 2];
                    rows.push(if (0..3).all(|a| p[a] < grid[a]) { token_index(grid, p[0], p[1], p[2]) } else { PAD });
                }
            }
        }
    }
    (expand(&rows, f), out)
}

/// 2×2×2 neighbourhood concat → LN(8F) → bias-free projection to 2F.
pub fn patch_merge<T: Real>(
    tape: &mut Tape<T>,
    z: Var,
    grid: [usize; 3],
    norm: (Var, Var),
    w_down: Var,
) -> Result<(Var, [usize; 3])> {
    let f = tape.dims(z)[1];
    let (idx, out) = merge_index(grid, f);
    let n = out.iter().product::<usize>();
    let cat = tape.gather(z, idx, &[n, 8 * f])?;
    let h = tape.layer_norm(cat, norm.0, norm.1, T::lit(LN_EPS))?;
    Ok((tape.linear(h, w_down, None)?, out))
}

/// Index tables for every stage at one input size.
pub struct StagePlan<T> {
    pub grid: [usize; 3],
    pub regular: WindowOps<T>,
    pub shifted: WindowOps<T>,
    dense: Arc<[usize]>,
}

pub struct EncoderPlan<T> {
    pub input: [usize; 3],
    pub stages: Vec<StagePlan<T>>,
}

/// Encoder features `f0..f5`, each dense `[C_i, H_i, W_i, D_i]`.
pub struct Features {
    pub maps: Vec<Var>,
}

impl Features {
    pub fn bottleneck(&self) -> Var {
        self.maps[5]
    }
}

/// The four-stage encoder with its parameter handles.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    pub ids: EncoderIds,
}

impl Encoder {
    /// Registers parameters under the builder's prefix.
    pub fn new<T: Real, R: Rng>(cfg: EncoderConfig, b: &mut Builder<T, R>) -> Result<Self> {
        cfg.validate()?;
        let (c, p) = (cfg.embed_dim, cfg.patch);
        let embed_w = b.add("embed.w", &[c, cfg.in_channels, p, p, p], Init::TruncNormal(INIT_STD))?;
        let embed_b = b.add("embed.b", &[c], Init::Zeros)?;
        let mut stages = Vec::new();
        for s in 0..4 {
            let f = cfg.width(s);
            let mut sb = b.scope(&format!("stage{}", s + 1));
            let blocks = (0..cfg.depths[s])
                .map(|i| add_block(&mut sb.scope(&format!("block{i}")), f, cfg.heads[s], cfg.window, cfg.rel_pos_bias))
                .collect::<Result<Vec<_>>>()?;
            let merge_norm = add_norm(&mut sb, "merge.norm", 8 * f)?;
            let merge = sb.add("merge.w", &[8 * f, 2 * f], Init::TruncNormal(INIT_STD))?;
            stages.push(StageIds { blocks, merge_norm, merge });
        }
        Ok(Self { cfg, ids: EncoderIds { embed_w, embed_b, stages } })
    }

    pub fn plan<T: Real>(&self, input: [usize; 3]) -> Result<EncoderPlan<T>> {
        let cfg = &self.cfg;
        if input.iter().any(|&e| e == 0 || e % cfg.patch != 0) {
            return shape_err(format!("input extents {input:?} not divisible by patch {}", cfg.patch));
        }
        let mut grid = input.map(|e| e / cfg.patch);
        let m = cfg.window;
        let mut stages = Vec::new();
        for s in 0..4 {
            let f = cfg.width(s);
            let regular = WindowPlan::new(grid, m, [0; 3])?;
            let shifted = WindowPlan::new(grid, m, [m / 2; 3])?;
            stages.push(StagePlan {
                grid,
                regular: WindowOps::new(regular, f, cfg.heads[s], cfg.rel_pos_bias),
                shifted: WindowOps::new(shifted, f, cfg.heads[s], cfg.rel_pos_bias),
                dense: to_dense_index(f, grid.iter().product()),
            });
            grid = grid.map(|g| g.div_ceil(2));
        }
        Ok(EncoderPlan { input, stages })
    }

    /// Patch embedding: dense `[S, H, W, D]` → `[N, C]` tokens.
    pub fn embed<T: Real>(&self, tape: &mut Tape<T>, pv: &ParamVars, x: Var) -> Result<Var> {
        let (tokens, _) = patch_embed(tape, x, pv[self.ids.embed_w], pv[self.ids.embed_b], self.cfg.patch)?;
        Ok(tokens)
    }

    /// Runs stage `s` on its input tokens. Returns the dense stage output
    /// (`f_{s+1}`) and the merged tokens feeding the next stage.
    pub fn stage<T: Real>(
        &self,
        tape: &mut Tape<T>,
        pv: &ParamVars,
        s: usize,
        z: Var,
        plan: &EncoderPlan<T>,
    ) -> Result<(Var, Var)> {
        let sp = &plan.stages[s];
        let ids = &self.ids.stages[s];
        let mut z = z;
        for pair in ids.blocks.chunks(2) {
            z = swin_block_pair(tape, pv, z, [&pair[0], &pair[1]], &sp.regular, &sp.shifted)?;
        }
        let f = self.cfg.width(s);
        let [h, w, d] = sp.grid;
        let dense = tape.gather(z, sp.dense.clone(), &[f, h, w, d])?;
        let norm = (pv[ids.merge_norm.0], pv[ids.merge_norm.1]);
        let (merged, _) = patch_merge(tape, z, sp.grid, norm, pv[ids.merge])?;
        Ok((dense, merged))
    }

    /// Full forward producing `f0..f5`. `x` is `[S, H, W, D]`.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, pv: &ParamVars, x: Var) -> Result<Features> {
        let dims = tape.dims(x).to_vec();
        if dims.len() != 4 || dims[0] != self.cfg.in_channels {
            return Err(dense_error("encoder input", &dims));
        }
        let plan = self.plan::<T>([dims[1], dims[2], dims[3]])?;
        self.forward_planned(tape, pv, x, &plan)
    }

    pub fn forward_planned<T: Real>(
        &self,
        tape: &mut Tape<T>,
        pv: &ParamVars,
        x: Var,
        plan: &EncoderPlan<T>,
    ) -> Result<Features> {
        let mut maps = vec![x];
        let mut z = self.embed(tape, pv, x)?;
        for s in 0..4 {
            let (dense, merged) = self.stage(tape, pv, s, z, plan)?;
            maps.push(dense);
            z = merged;
        }
        let g = plan.stages[3].grid.map(|g| g.div_ceil(2));
        let f = self.cfg.width(4);
        let n = g.iter().product::<usize>();
        maps.push(tape.gather(z, to_dense_index(f, n), &[f, g[0], g[1], g[2]])?);
        Ok(Features { maps })
    }

    /// Forward without gradients, stage by stage on short-lived tapes so only
    /// one stage's intermediates are alive at a time.
    pub fn features<T: Real>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let dims = x.dims();
        if dims.len() != 4 || dims[0] != self.cfg.in_channels {
            return Err(dense_error("encoder input", dims));
        }
        let plan = self.plan::<T>([dims[1], dims[2], dims[3]])?;
        let mut out = vec![x.clone()];
        let mut tape = Tape::new();
        let pv = store.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let tokens = self.embed(&mut tape, &pv, xv)?;
        let mut z = tape.value(tokens).clone();
        for s in 0..4 {
            let mut tape = Tape::new();
            let pv = store.bind(&mut tape);
            let zv = tape.constant(z);
            let (dense, merged) = self.stage(&mut tape, &pv, s, zv, &plan)?;
            out.push(tape.value(dense).clone());
            z = tape.value(merged).clone();
        }
        let g = plan.stages[3].grid.map(|g| g.div_ceil(2));
        let f = self.cfg.width(4);
        let n = g.iter().product::<usize>();
        let idx = to_dense_index(f, n);
        let data = idx.iter().map(|&i| z.data()[i]).collect();
        out.push(Tensor::new(vec![f, g[0], g[1], g[2]], data)?);
        Ok(out)
    }
}
