//! Float (teacher/reference) SWIN transformer: patch embedding, windowed and
//! shifted-window attention with relative position bias, patch merging, and
//! the classification head.
//!
//! Three execution paths share the exact same data-movement maps and
//! arithmetic kernels:
//!
//! * the plain float forward (teacher inference, evaluation, calibration),
//! * the taped forward used for training ([`build_logits`]),
//! * the int8 path in [`crate::quant`], which reuses the same index maps.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Parameter, Tape, ValueId};
use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

/// Attention-mask fill for cross-region pairs in shifted windows.
/// Common practice; large enough that softmax assigns such pairs < 1e-40
/// weight.
pub const DEFAULT_ATTN_MASK_VALUE: f32 = -100.0;

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct SwinConfig {
    /// Square input side in pixels.
    pub image_size: usize,
    pub patch_size: usize,
    pub in_channels: usize,
    /// Channel width of stage 0; doubles after every patch merge.
    pub embed_dim: usize,
    /// Blocks per stage.
    pub depths: Vec<usize>,
    /// Attention heads per stage.
    pub num_heads: Vec<usize>,
    /// Window side M; blocks alternate shift 0 and ⌊M/2⌋.
    pub window_size: usize,
    /// FC1 expansion factor.
    pub mlp_ratio: usize,
    pub num_classes: usize,
    pub layer_norm_eps: f32,
    pub attn_mask_value: f32,
}

impl SwinConfig {
    /// Desk-scale default: small enough for finite-difference checks while
    /// still exercising shifts, masks and merging.
    pub fn toy() -> Self {
        Self {
            image_size: 32,
            patch_size: 4,
            in_channels: 1,
            embed_dim: 32,
            depths: vec![2, 2],
            num_heads: vec![2, 4],
            window_size: 4,
            mlp_ratio: 4,
            num_classes: 10,
            layer_norm_eps: 1e-5,
            attn_mask_value: DEFAULT_ATTN_MASK_VALUE,
        }
    }

    pub fn num_stages(&self) -> usize {
        self.depths.len()
    }

    pub fn num_blocks(&self) -> usize {
        self.depths.iter().sum()
    }

    /// Feature-map side at stage `s` (tokens per row).
    pub fn stage_side(&self, s: usize) -> usize {
        (self.image_size / self.patch_size) >> s
    }

    /// Channel width at stage `s`.
    pub fn stage_dim(&self, s: usize) -> usize {
        self.embed_dim << s
    }

    pub fn shift_for_depth(&self, depth_in_stage: usize) -> usize {
        if depth_in_stage % 2 == 0 {
            0
        } else {
            self.window_size / 2
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |msg: String| Err(Error::InvalidParameter(msg));
        if self.depths.is_empty() || self.depths.len() != self.num_heads.len() {
            return err(format!(
                "depths ({:?}) and heads ({:?}) must be non-empty and equal length",
                self.depths, self.num_heads
            ));
        }
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return err(format!(
                "image size {} not divisible by patch size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.mlp_ratio == 0 || self.num_classes == 0 || self.in_channels == 0 {
            return err("mlp_ratio, num_classes and in_channels must be positive".into());
        }
        if !(self.layer_norm_eps > 0.0) {
            return err(format!(
                "layer_norm_eps must be > 0, got {}",
                self.layer_norm_eps
            ));
        }
        for s in 0..self.num_stages() {
            let side = self.stage_side(s);
            if side == 0 || side % self.window_size != 0 {
                return err(format!(
                    "stage {s} side {side} not divisible by window {}",
                    self.window_size
                ));
            }
            if self.num_heads[s] == 0 || self.stage_dim(s) % self.num_heads[s] != 0 {
                return err(format!(
                    "stage {s} dim {} not divisible by {} heads",
                    self.stage_dim(s),
                    self.num_heads[s]
                ));
            }
        }
        Ok(())
    }
}

/// MLP activation of a block; the only thing the replacement procedure of
/// [`crate::distill`] swaps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Activation {
    Gelu,
    Relu,
}

#[derive(Clone, Debug)]
pub struct SwinBlock {
    pub ln1_gamma: Parameter,
    pub ln1_beta: Parameter,
    pub qkv_weight: Parameter,
    pub qkv_bias: Parameter,
    pub proj_weight: Parameter,
    pub proj_bias: Parameter,
    /// (2M−1)² learned offsets per head, gathered via `pos_index`.
    pub pos_bias_table: Parameter,
    pub ln2_gamma: Parameter,
    pub ln2_beta: Parameter,
    pub fc1_weight: Parameter,
    pub fc1_bias: Parameter,
    pub fc2_weight: Parameter,
    pub fc2_bias: Parameter,
    /// M²×M² map from token pair to table row, precomputed.
    pub pos_index: Arc<Vec<u32>>,
    pub activation: Activation,
    pub shift: usize,
    pub num_heads: usize,
    pub window: usize,
}

#[derive(Clone, Debug)]
pub struct PatchMerge {
    /// 4C → 2C reduction applied to 2×2 neighbor concatenations.
    pub weight: Parameter,
    pub bias: Parameter,
}

#[derive(Clone, Debug)]
pub struct Stage {
    pub blocks: Vec<SwinBlock>,
    pub merge: Option<PatchMerge>,
}

#[derive(Clone, Debug)]
pub struct SwinModel {
    pub config: SwinConfig,
    pub patch_weight: Parameter,
    pub patch_bias: Parameter,
    pub stages: Vec<Stage>,
    pub norm_gamma: Parameter,
    pub norm_beta: Parameter,
    pub head_weight: Parameter,
    pub head_bias: Parameter,
}

// ---------------------------------------------------------------------------
// Window geometry primitives
// ---------------------------------------------------------------------------

/// Partition `[H, W, C]` into non-overlapping M×M tiles: `[nW, M·M, C]`,
/// windows ordered row-major.
pub fn window_partition(x: &Tensor, m: usize) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 3 || m == 0 || s[0] % m != 0 || s[1] % m != 0 {
        return Err(Error::ShapeMismatch {
            op: "window_partition",
            lhs: s.to_vec(),
            rhs: vec![m, m],
        });
    }
    let (h, w, c) = (s[0], s[1], s[2]);
    let rows = shift_partition_rows(1, h, w, m, 0);
    let mut data = Vec::with_capacity(x.len());
    gather_rows_t(x.data(), &rows, c, &mut data);
    Tensor::new(vec![(h / m) * (w / m), m * m, c], data)
}

/// Exact inverse of [`window_partition`].
pub fn window_reverse(windows: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let s = windows.shape();
    if s.len() != 3 || s[0] * s[1] != h * w {
        return Err(Error::ShapeMismatch {
            op: "window_reverse",
            lhs: s.to_vec(),
            rhs: vec![h, w],
        });
    }
    let m2 = s[1];
    let m = (m2 as f64).sqrt() as usize;
    if m * m != m2 || h % m != 0 || w % m != 0 {
        return Err(Error::ShapeMismatch {
            op: "window_reverse",
            lhs: s.to_vec(),
            rhs: vec![h, w],
        });
    }
    let c = s[2];
    let rows = reverse_unshift_rows(1, h, w, m, 0);
    let mut data = Vec::with_capacity(windows.len());
    gather_rows_t(windows.data(), &rows, c, &mut data);
    Tensor::new(vec![h, w, c], data)
}

/// Cyclic roll: `out[i][j] = x[(i+dy) mod H][(j+dx) mod W]`.
pub fn cyclic_shift(x: &Tensor, dy: i64, dx: i64) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 3 {
        return Err(Error::ShapeMismatch {
            op: "cyclic_shift",
            lhs: s.to_vec(),
            rhs: vec![0, 0, 0],
        });
    }
    let (h, w, c) = (s[0], s[1], s[2]);
    let mut data = Vec::with_capacity(x.len());
    for i in 0..h {
        let si = (i as i64 + dy).rem_euclid(h as i64) as usize;
        for j in 0..w {
            let sj = (j as i64 + dx).rem_euclid(w as i64) as usize;
            data.extend_from_slice(&x.data()[(si * w + sj) * c..(si * w + sj + 1) * c]);
        }
    }
    Tensor::new(vec![h, w, c], data)
}

/// Relative-displacement index map: entry (p, q) encodes
/// (Δrow + M−1, Δcol + M−1) flattened over a (2M−1)×(2M−1) grid.
pub fn relative_position_index(m: usize) -> Vec<u32> {
    let m2 = m * m;
    let span = 2 * m - 1;
    let mut idx = Vec::with_capacity(m2 * m2);
    for p in 0..m2 {
        let (pr, pc) = (p / m, p % m);
        for q in 0..m2 {
            let (qr, qc) = (q / m, q % m);
            let dr = pr as i64 - qr as i64 + m as i64 - 1;
            let dc = pc as i64 - qc as i64 + m as i64 - 1;
            idx.push((dr * span as i64 + dc) as u32);
        }
    }
    idx
}

/// Expand a `[(2M−1)², heads]` table into per-head bias matrices
/// `[heads, M², M²]` using the precomputed index map.
pub fn relative_position_bias(table: &Tensor, index_map: &[u32], heads: usize) -> Result<Tensor> {
    let rows = table.shape()[0];
    if table.shape().len() != 2 || table.shape()[1] != heads {
        return Err(Error::ShapeMismatch {
            op: "relative_position_bias",
            lhs: table.shape().to_vec(),
            rhs: vec![rows, heads],
        });
    }
    if let Some(&bad) = index_map.iter().find(|&&i| i as usize >= rows) {
        return Err(Error::InvalidParameter(format!(
            "position index {bad} out of range for table with {rows} rows"
        )));
    }
    let m4 = index_map.len();
    let mut data = Vec::with_capacity(heads * m4);
    for h in 0..heads {
        for &i in index_map {
            data.push(table.data()[i as usize * heads + h]);
        }
    }
    let m2 = (m4 as f64).sqrt() as usize;
    Tensor::new(vec![heads, m2, m2], data)
}

/// Attention mask for shifted windows: 0 where both positions come from the
/// same pre-shift region, `mask_value` otherwise. All zeros when shift = 0.
pub fn shifted_window_attention_mask(
    h: usize,
    w: usize,
    m: usize,
    shift: usize,
    mask_value: f32,
) -> Result<Tensor> {
    if shift >= m || h % m != 0 || w % m != 0 {
        return Err(Error::InvalidParameter(format!(
            "mask geometry invalid: h={h} w={w} m={m} shift={shift}"
        )));
    }
    let nw = (h / m) * (w / m);
    let m2 = m * m;
    let mut mask = Tensor::zeros(vec![nw, m2, m2]);
    if shift == 0 {
        return Ok(mask);
    }
    // Region id per cell of the (already shifted) canvas, 3 bands per axis.
    let band = |i: usize, len: usize| {
        if i < len - m {
            0
        } else if i < len - shift {
            1
        } else {
            2
        }
    };
    let region: Vec<u8> = (0..h * w)
        .map(|t| (band(t / w, h) * 3 + band(t % w, w)) as u8)
        .collect();
    let data = mask.data_mut();
    for wy in 0..h / m {
        for wx in 0..w / m {
            let wi = wy * (w / m) + wx;
            for p in 0..m2 {
                let rp = region[(wy * m + p / m) * w + wx * m + p % m];
                for q in 0..m2 {
                    let rq = region[(wy * m + q / m) * w + wx * m + q % m];
                    if rp != rq {
                        data[(wi * m2 + p) * m2 + q] = mask_value;
                    }
                }
            }
        }
    }
    Ok(mask)
}

// ---------------------------------------------------------------------------
// Index-map builders shared by the float, taped and int8 paths
// ---------------------------------------------------------------------------

/// Row map sending window-ordered rows to token rows after a cyclic shift:
/// output row (b, wy, wx, py, px) reads token (b, (wy·M+py+shift) mod H,
/// (wx·M+px+shift) mod W).
pub(crate) fn shift_partition_rows(
    b: usize,
    h: usize,
    w: usize,
    m: usize,
    shift: usize,
) -> Vec<u32> {
    let n = h * w;
    let mut rows = Vec::with_capacity(b * n);
    for bi in 0..b {
        for wy in 0..h / m {
            for wx in 0..w / m {
                for py in 0..m {
                    let y = (wy * m + py + shift) % h;
                    for px in 0..m {
                        let x = (wx * m + px + shift) % w;
                        rows.push((bi * n + y * w + x) as u32);
                    }
                }
            }
        }
    }
    rows
}

/// Inverse of [`shift_partition_rows`]: token rows gathered back from the
/// window-ordered layout.
pub(crate) fn reverse_unshift_rows(
    b: usize,
    h: usize,
    w: usize,
    m: usize,
    shift: usize,
) -> Vec<u32> {
    let n = h * w;
    let wcols = w / m;
    let mut rows = Vec::with_capacity(b * n);
    for bi in 0..b {
        for y in 0..h {
            let i = (y + h - shift % h) % h;
            for x in 0..w {
                let j = (x + w - shift % w) % w;
                let win = (i / m) * wcols + j / m;
                let pos = (i % m) * m + j % m;
                rows.push((bi * n + win * (m * m) + pos) as u32);
            }
        }
    }
    rows
}

/// Element map flattening non-overlapping patches of `[B, H, W, ch]` into
/// rows of length patch²·ch.
pub(crate) fn patch_embed_elems(b: usize, h: usize, w: usize, ch: usize, p: usize) -> Vec<u32> {
    let (th, tw) = (h / p, w / p);
    let mut map = Vec::with_capacity(b * h * w * ch);
    for bi in 0..b {
        for ty in 0..th {
            for tx in 0..tw {
                for dy in 0..p {
                    for dx in 0..p {
                        for c in 0..ch {
                            let src = ((bi * h + ty * p + dy) * w + tx * p + dx) * ch + c;
                            map.push(src as u32);
                        }
                    }
                }
            }
        }
    }
    map
}

/// Element map for 2×2 patch merging: output row (b, ty, tx) concatenates
/// top-left, bottom-left, top-right, bottom-right neighbors, C channels each.
pub(crate) fn merge_gather_elems(b: usize, h: usize, w: usize, c: usize) -> Vec<u32> {
    let n = h * w;
    let mut map = Vec::with_capacity(b * n * c);
    const OFFSETS: [(usize, usize); 4] = [(0, 0), (1, 0), (0, 1), (1, 1)];
    for bi in 0..b {
        for ty in 0..h / 2 {
            for tx in 0..w / 2 {
                for (dy, dx) in OFFSETS {
                    let row = bi * n + (2 * ty + dy) * w + 2 * tx + dx;
                    for cc in 0..c {
                        map.push((row * c + cc) as u32);
                    }
                }
            }
        }
    }
    map
}

/// Element map extracting one of q/k/v (`part` 0/1/2) from a packed
/// `[windows·M², 3C]` projection into head-major `[windows·heads, M², dh]`.
pub(crate) fn head_split_elems(
    windows: usize,
    m2: usize,
    c: usize,
    heads: usize,
    part: usize,
) -> Vec<u32> {
    let dh = c / heads;
    let mut map = Vec::with_capacity(windows * m2 * c);
    for wi in 0..windows {
        for hd in 0..heads {
            for p in 0..m2 {
                let row = wi * m2 + p;
                let base = row * 3 * c + part * c + hd * dh;
                for d in 0..dh {
                    map.push((base + d) as u32);
                }
            }
        }
    }
    map
}

/// Inverse of the head split for a single tensor: `[windows·heads, M², dh]`
/// back to `[windows·M², C]`.
pub(crate) fn head_merge_elems(windows: usize, m2: usize, c: usize, heads: usize) -> Vec<u32> {
    let dh = c / heads;
    let mut map = Vec::with_capacity(windows * m2 * c);
    for wi in 0..windows {
        for p in 0..m2 {
            for hd in 0..heads {
                let base = ((wi * heads + hd) * m2 + p) * dh;
                for d in 0..dh {
                    map.push((base + d) as u32);
                }
            }
        }
    }
    map
}

/// Element map expanding the position-bias table to the full per-window
/// attention shape `[b·nW·heads, M², M²]`.
pub(crate) fn bias_expand_elems(bw: usize, heads: usize, pos_index: &[u32]) -> Vec<u32> {
    let m4 = pos_index.len();
    let mut map = Vec::with_capacity(bw * heads * m4);
    for _ in 0..bw {
        for h in 0..heads {
            for &pi in pos_index {
                map.push(pi * heads as u32 + h as u32);
            }
        }
    }
    map
}

pub(crate) fn gather_rows_t<T: Copy>(src: &[T], rows: &[u32], width: usize, out: &mut Vec<T>) {
    out.clear();
    out.reserve(rows.len() * width);
    for &r in rows {
        let r = r as usize;
        out.extend_from_slice(&src[r * width..(r + 1) * width]);
    }
}

pub(crate) fn gather_elems_t<T: Copy>(src: &[T], map: &[u32]) -> Vec<T> {
    map.iter().map(|&i| src[i as usize]).collect()
}

// ---------------------------------------------------------------------------
// Calibration observer
// ---------------------------------------------------------------------------

/// Activation sites that carry a quantization scale: the inputs of the six
/// int8 GEMMs. Attention probabilities are not listed because their scale is
/// pinned (softmax outputs lie in [0, 1]).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CalibSite {
    /// After LN1: input of the QKV GEMM (window reordering preserves max-abs).
    QkvIn,
    /// After the QKV bias: the shared q/k/v scale.
    QkvOut,
    /// Attention context (merged heads): input of the projection GEMM.
    AttnCtx,
    /// After LN2: input of the FC1 GEMM.
    Fc1In,
    /// After the MLP activation: input of the FC2 GEMM.
    Fc2In,
}

pub const CALIB_SITES: [CalibSite; 5] = [
    CalibSite::QkvIn,
    CalibSite::QkvOut,
    CalibSite::AttnCtx,
    CalibSite::Fc1In,
    CalibSite::Fc2In,
];

/// Hook invoked by the float forward at every calibration site.
pub trait ActivationObserver {
    fn record(&mut self, block: usize, site: CalibSite, values: &[f32]);
}

pub struct NoopObserver;

impl ActivationObserver for NoopObserver {
    fn record(&mut self, _: usize, _: CalibSite, _: &[f32]) {}
}

// ---------------------------------------------------------------------------
// Model construction and parameter access
// ---------------------------------------------------------------------------

fn trunc_normal(rng: &mut ChaCha8Rng, std: f32) -> f32 {
    // Box-Muller, resampled until within ±2σ.
    loop {
        let u1: f32 = rng.gen_range(f32::EPSILON..1.0);
        let u2: f32 = rng.gen_range(0.0..1.0);
        let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f32::consts::PI * u2).cos();
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

fn init_weight(rng: &mut ChaCha8Rng, shape: Vec<usize>, std: f32) -> Parameter {
    Parameter::new(Tensor::from_fn(shape, |_| trunc_normal(rng, std)))
}

impl SwinBlock {
    fn init(
        rng: &mut ChaCha8Rng,
        c: usize,
        heads: usize,
        window: usize,
        shift: usize,
        mlp_ratio: usize,
    ) -> Self {
        let span = 2 * window - 1;
        let hidden = mlp_ratio * c;
        Self {
            ln1_gamma: Parameter::new(Tensor::filled(vec![c], 1.0)),
            ln1_beta: Parameter::new(Tensor::zeros(vec![c])),
            qkv_weight: init_weight(rng, vec![c, 3 * c], 0.02),
            qkv_bias: Parameter::new(Tensor::zeros(vec![3 * c])),
            proj_weight: init_weight(rng, vec![c, c], 0.02),
            proj_bias: Parameter::new(Tensor::zeros(vec![c])),
            pos_bias_table: init_weight(rng, vec![span * span, heads], 0.02),
            ln2_gamma: Parameter::new(Tensor::filled(vec![c], 1.0)),
            ln2_beta: Parameter::new(Tensor::zeros(vec![c])),
            fc1_weight: init_weight(rng, vec![c, hidden], 0.02),
            fc1_bias: Parameter::new(Tensor::zeros(vec![hidden])),
            fc2_weight: init_weight(rng, vec![hidden, c], 0.02),
            fc2_bias: Parameter::new(Tensor::zeros(vec![c])),
            pos_index: Arc::new(relative_position_index(window)),
            activation: Activation::Gelu,
            shift,
            num_heads: heads,
            window,
        }
    }

    pub fn dim(&self) -> usize {
        self.ln1_gamma.value.len()
    }

    /// Float forward over a single image's token grid `[H·W, C]`.
    pub fn forward(
        &self,
        x: &Tensor,
        h: usize,
        w: usize,
        eps: f32,
        mask_value: f32,
    ) -> Result<Tensor> {
        block_forward_batched(self, x, 1, h, w, eps, mask_value, 0, &mut NoopObserver)
    }
}

impl SwinModel {
    /// Fresh model with seeded truncated-normal weights; every block starts
    /// with GELU activation.
    pub fn init(config: SwinConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let patch_in = config.patch_size * config.patch_size * config.in_channels;
        let patch_weight = init_weight(&mut rng, vec![patch_in, config.embed_dim], 0.02);
        let patch_bias = Parameter::new(Tensor::zeros(vec![config.embed_dim]));
        let mut stages = Vec::new();
        for s in 0..config.num_stages() {
            let c = config.stage_dim(s);
            let mut blocks = Vec::new();
            for d in 0..config.depths[s] {
                blocks.push(SwinBlock::init(
                    &mut rng,
                    c,
                    config.num_heads[s],
                    config.window_size,
                    config.shift_for_depth(d),
                    config.mlp_ratio,
                ));
            }
            let merge = if s + 1 < config.num_stages() {
                Some(PatchMerge {
                    weight: init_weight(&mut rng, vec![4 * c, 2 * c], 0.02),
                    bias: Parameter::new(Tensor::zeros(vec![2 * c])),
                })
            } else {
                None
            };
            stages.push(Stage { blocks, merge });
        }
        let last = config.stage_dim(config.num_stages() - 1);
        let norm_gamma = Parameter::new(Tensor::filled(vec![last], 1.0));
        let norm_beta = Parameter::new(Tensor::zeros(vec![last]));
        let head_weight = init_weight(&mut rng, vec![last, config.num_classes], 0.02);
        let head_bias = Parameter::new(Tensor::zeros(vec![config.num_classes]));
        Ok(Self {
            config,
            patch_weight,
            patch_bias,
            stages,
            norm_gamma,
            norm_beta,
            head_weight,
            head_bias,
        })
    }

    /// Blocks in architectural order (stage-major, depth-minor) — the order
    /// the replacement procedure walks.
    pub fn blocks(&self) -> impl Iterator<Item = &SwinBlock> {
        self.stages.iter().flat_map(|s| s.blocks.iter())
    }

    pub fn blocks_mut(&mut self) -> impl Iterator<Item = &mut SwinBlock> {
        self.stages.iter_mut().flat_map(|s| s.blocks.iter_mut())
    }

    pub fn num_blocks(&self) -> usize {
        self.stages.iter().map(|s| s.blocks.len()).sum()
    }

    /// Canonical named parameter enumeration. The position of a parameter in
    /// this sequence is its key on the training tape, and its name is the
    /// tensor name in checkpoints.
    pub fn named_params(&self) -> Vec<(String, &Parameter)> {
        let mut out: Vec<(String, &Parameter)> = Vec::new();
        out.push(("patch_embed.weight".into(), &self.patch_weight));
        out.push(("patch_embed.bias".into(), &self.patch_bias));
        for (si, stage) in self.stages.iter().enumerate() {
            for (bi, b) in stage.blocks.iter().enumerate() {
                let p = format!("stage{si}.block{bi}");
                out.push((format!("{p}.ln1.gamma"), &b.ln1_gamma));
                out.push((format!("{p}.ln1.beta"), &b.ln1_beta));
                out.push((format!("{p}.qkv.weight"), &b.qkv_weight));
                out.push((format!("{p}.qkv.bias"), &b.qkv_bias));
                out.push((format!("{p}.proj.weight"), &b.proj_weight));
                out.push((format!("{p}.proj.bias"), &b.proj_bias));
                out.push((format!("{p}.pos_bias.table"), &b.pos_bias_table));
                out.push((format!("{p}.ln2.gamma"), &b.ln2_gamma));
                out.push((format!("{p}.ln2.beta"), &b.ln2_beta));
                out.push((format!("{p}.fc1.weight"), &b.fc1_weight));
                out.push((format!("{p}.fc1.bias"), &b.fc1_bias));
                out.push((format!("{p}.fc2.weight"), &b.fc2_weight));
                out.push((format!("{p}.fc2.bias"), &b.fc2_bias));
            }
            if let Some(m) = &stage.merge {
                out.push((format!("stage{si}.merge.weight"), &m.weight));
                out.push((format!("stage{si}.merge.bias"), &m.bias));
            }
        }
        out.push(("norm.gamma".into(), &self.norm_gamma));
        out.push(("norm.beta".into(), &self.norm_beta));
        out.push(("head.weight".into(), &self.head_weight));
        out.push(("head.bias".into(), &self.head_bias));
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Parameter)> {
        let mut out: Vec<(String, &mut Parameter)> = Vec::new();
        out.push(("patch_embed.weight".into(), &mut self.patch_weight));
        out.push(("patch_embed.bias".into(), &mut self.patch_bias));
        for (si, stage) in self.stages.iter_mut().enumerate() {
            for (bi, b) in stage.blocks.iter_mut().enumerate() {
                let p = format!("stage{si}.block{bi}");
                out.push((format!("{p}.ln1.gamma"), &mut b.ln1_gamma));
                out.push((format!("{p}.ln1.beta"), &mut b.ln1_beta));
                out.push((format!("{p}.qkv.weight"), &mut b.qkv_weight));
                out.push((format!("{p}.qkv.bias"), &mut b.qkv_bias));
                out.push((format!("{p}.proj.weight"), &mut b.proj_weight));
                out.push((format!("{p}.proj.bias"), &mut b.proj_bias));
                out.push((format!("{p}.pos_bias.table"), &mut b.pos_bias_table));
                out.push((format!("{p}.ln2.gamma"), &mut b.ln2_gamma));
                out.push((format!("{p}.ln2.beta"), &mut b.ln2_beta));
                out.push((format!("{p}.fc1.weight"), &mut b.fc1_weight));
                out.push((format!("{p}.fc1.bias"), &mut b.fc1_bias));
                out.push((format!("{p}.fc2.weight"), &mut b.fc2_weight));
                out.push((format!("{p}.fc2.bias"), &mut b.fc2_bias));
            }
            if let Some(m) = &mut stage.merge {
                out.push((format!("stage{si}.merge.weight"), &mut m.weight));
                out.push((format!("stage{si}.merge.bias"), &mut m.bias));
            }
        }
        out.push(("norm.gamma".into(), &mut self.norm_gamma));
        out.push(("norm.beta".into(), &mut self.norm_beta));
        out.push(("head.weight".into(), &mut self.head_weight));
        out.push(("head.bias".into(), &mut self.head_bias));
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, p)| p.value.len()).sum()
    }

    /// Classification forward: `[B, H, W, ch]` images to `[B, classes]`
    /// logits.
    pub fn forward(&self, images: &Tensor) -> Result<Tensor> {
        self.forward_observed(images, &mut NoopObserver)
    }

    /// Same forward, reporting every quantization-relevant activation to the
    /// observer (used for post-training calibration).
    pub fn forward_observed(
        &self,
        images: &Tensor,
        obs: &mut dyn ActivationObserver,
    ) -> Result<Tensor> {
        let cfg = &self.config;
        let s = images.shape();
        let expected = [cfg.image_size, cfg.image_size, cfg.in_channels];
        if s.len() != 4 || s[1..] != expected {
            return Err(Error::ShapeMismatch {
                op: "model_forward",
                lhs: s.to_vec(),
                rhs: expected.to_vec(),
            });
        }
        let b = s[0];
        let mut x = patch_embed(
            images,
            &self.patch_weight.value,
            &self.patch_bias.value,
            cfg.patch_size,
        )?;
        let mut side = cfg.stage_side(0);
        let mut blk = 0usize;
        for stage in &self.stages {
            for block in &stage.blocks {
                x = block_forward_batched(
                    block,
                    &x,
                    b,
                    side,
                    side,
                    cfg.layer_norm_eps,
                    cfg.attn_mask_value,
                    blk,
                    obs,
                )?;
                blk += 1;
            }
            if let Some(merge) = &stage.merge {
                x = patch_merging_batched(
                    &x,
                    b,
                    side,
                    side,
                    &merge.weight.value,
                    &merge.bias.value,
                )?;
                side /= 2;
            }
        }
        let x = tensor::layernorm(
            &x,
            &self.norm_gamma.value,
            &self.norm_beta.value,
            cfg.layer_norm_eps,
        )?;
        let c = *x.shape().last().unwrap();
        let tokens = side * side;
        let mut pooled = vec![0.0f32; b * c];
        for (r, row) in x.data().chunks(c).enumerate() {
            let orow = &mut pooled[(r / tokens) * c..(r / tokens + 1) * c];
            for (o, &v) in orow.iter_mut().zip(row) {
                *o += v / tokens as f32;
            }
        }
        let pooled = Tensor::new(vec![b, c], pooled)?;
        let mut logits = tensor::matmul_f32(&pooled, &self.head_weight.value)?;
        bias_add_inplace(&mut logits, self.head_bias.value.data());
        Ok(logits)
    }
}

// ---------------------------------------------------------------------------
// Float forward internals
// ---------------------------------------------------------------------------

pub(crate) fn bias_add_inplace(x: &mut Tensor, bias: &[f32]) {
    for row in x.data_mut().chunks_mut(bias.len()) {
        for (v, b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

fn add_tensors(a: &Tensor, b: &Tensor) -> Tensor {
    debug_assert_eq!(a.shape(), b.shape());
    let mut out = a.clone();
    for (o, &v) in out.data_mut().iter_mut().zip(b.data()) {
        *o += v;
    }
    out
}

/// Non-overlapping patch flatten + linear projection: `[B, H, W, ch]` to
/// `[B·(H/p)·(W/p), C]`.
pub fn patch_embed(
    images: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    patch: usize,
) -> Result<Tensor> {
    let s = images.shape();
    if s.len() != 4 || patch == 0 || s[1] % patch != 0 || s[2] % patch != 0 {
        return Err(Error::ShapeMismatch {
            op: "patch_embed",
            lhs: s.to_vec(),
            rhs: vec![patch, patch],
        });
    }
    let (b, h, w, ch) = (s[0], s[1], s[2], s[3]);
    let map = patch_embed_elems(b, h, w, ch, patch);
    let rows = b * (h / patch) * (w / patch);
    let pvec = patch * patch * ch;
    let patches = Tensor::new(vec![rows, pvec], gather_elems_t(images.data(), &map))?;
    let mut out = tensor::matmul_f32(&patches, weight)?;
    bias_add_inplace(&mut out, bias.data());
    Ok(out)
}

/// 2×2 neighbor concatenation followed by a linear reduction, for a single
/// image (`x` is `[H·W, C]`).
pub fn patch_merging(
    x: &Tensor,
    h: usize,
    w: usize,
    weight: &Tensor,
    bias: &Tensor,
) -> Result<Tensor> {
    patch_merging_batched(x, 1, h, w, weight, bias)
}

pub(crate) fn patch_merging_batched(
    x: &Tensor,
    b: usize,
    h: usize,
    w: usize,
    weight: &Tensor,
    bias: &Tensor,
) -> Result<Tensor> {
    let c = *x.shape().last().unwrap();
    if h % 2 != 0 || w % 2 != 0 || x.len() != b * h * w * c {
        return Err(Error::ShapeMismatch {
            op: "patch_merging",
            lhs: x.shape().to_vec(),
            rhs: vec![b, h, w, c],
        });
    }
    let map = merge_gather_elems(b, h, w, c);
    let rows = b * (h / 2) * (w / 2);
    let gathered = Tensor::new(vec![rows, 4 * c], gather_elems_t(x.data(), &map))?;
    let mut out = tensor::matmul_f32(&gathered, weight)?;
    bias_add_inplace(&mut out, bias.data());
    Ok(out)
}

/// One transformer block over `[B·H·W, C]` tokens: LN → shift → windowed
/// multi-head attention (scaled QKᵀ + position bias + mask, softmax, ·V,
/// projection) → residual → LN → FC1 → activation → FC2 → residual.
#[allow(clippy::too_many_arguments)]
pub(crate) fn block_forward_batched(
    block: &SwinBlock,
    x: &Tensor,
    b: usize,
    h: usize,
    w: usize,
    eps: f32,
    mask_value: f32,
    blk_idx: usize,
    obs: &mut dyn ActivationObserver,
) -> Result<Tensor> {
    let c = block.dim();
    let n = h * w;
    if x.shape() != [b * n, c] {
        return Err(Error::ShapeMismatch {
            op: "block_forward",
            lhs: x.shape().to_vec(),
            rhs: vec![b * n, c],
        });
    }
    let m = block.window;
    let m2 = m * m;
    let nw = (h / m) * (w / m);
    let heads = block.num_heads;
    let dh = c / heads;
    let bw = b * nw;
    let bh = bw * heads;

    // LN1 + shift + window partition
    let t = tensor::layernorm(x, &block.ln1_gamma.value, &block.ln1_beta.value, eps)?;
    obs.record(blk_idx, CalibSite::QkvIn, t.data());
    let rows = shift_partition_rows(b, h, w, m, block.shift);
    let mut xw_data = Vec::new();
    gather_rows_t(t.data(), &rows, c, &mut xw_data);
    let xw = Tensor::new(vec![b * n, c], xw_data)?;

    // QKV projection
    let mut qkv = tensor::matmul_f32(&xw, &block.qkv_weight.value)?;
    bias_add_inplace(&mut qkv, block.qkv_bias.value.data());
    obs.record(blk_idx, CalibSite::QkvOut, qkv.data());

    // Head split
    let q = Tensor::new(
        vec![bh, m2, dh],
        gather_elems_t(qkv.data(), &head_split_elems(bw, m2, c, heads, 0)),
    )?;
    let k = Tensor::new(
        vec![bh, m2, dh],
        gather_elems_t(qkv.data(), &head_split_elems(bw, m2, c, heads, 1)),
    )?;
    let v = Tensor::new(
        vec![bh, m2, dh],
        gather_elems_t(qkv.data(), &head_split_elems(bw, m2, c, heads, 2)),
    )?;

    // Scaled attention logits + position bias (+ shift mask)
    let mut scores = vec![0.0f32; bh * m2 * m2];
    tensor::batch_matmul_kernel(q.data(), k.data(), bh, m2, dh, m2, true, &mut scores);
    let inv_sqrt = 1.0 / (dh as f32).sqrt();
    for s in scores.iter_mut() {
        *s *= inv_sqrt;
    }
    let bias = relative_position_bias(&block.pos_bias_table.value, &block.pos_index, heads)?;
    for bhi in 0..bh {
        let hd = bhi % heads;
        let brow = &bias.data()[hd * m2 * m2..(hd + 1) * m2 * m2];
        let srow = &mut scores[bhi * m2 * m2..(bhi + 1) * m2 * m2];
        for (s, &bv) in srow.iter_mut().zip(brow) {
            *s += bv;
        }
    }
    if block.shift > 0 {
        let mask = shifted_window_attention_mask(h, w, m, block.shift, mask_value)?;
        for bhi in 0..bh {
            let wi = (bhi / heads) % nw;
            let mrow = &mask.data()[wi * m2 * m2..(wi + 1) * m2 * m2];
            let srow = &mut scores[bhi * m2 * m2..(bhi + 1) * m2 * m2];
            for (s, &mv) in srow.iter_mut().zip(mrow) {
                *s += mv;
            }
        }
    }
    let att = tensor::softmax_lastdim(&Tensor::new(vec![bh, m2, m2], scores)?);

    // Context and projection
    let mut ctx_heads = vec![0.0f32; bh * m2 * dh];
    tensor::batch_matmul_kernel(att.data(), v.data(), bh, m2, m2, dh, false, &mut ctx_heads);
    let ctx = Tensor::new(
        vec![b * n, c],
        gather_elems_t(&ctx_heads, &head_merge_elems(bw, m2, c, heads)),
    )?;
    obs.record(blk_idx, CalibSite::AttnCtx, ctx.data());
    let mut attn_out = tensor::matmul_f32(&ctx, &block.proj_weight.value)?;
    bias_add_inplace(&mut attn_out, block.proj_bias.value.data());

    // Back to token order, first residual
    let back_rows = reverse_unshift_rows(b, h, w, m, block.shift);
    let mut back_data = Vec::new();
    gather_rows_t(attn_out.data(), &back_rows, c, &mut back_data);
    let u = add_tensors(x, &Tensor::new(vec![b * n, c], back_data)?);

    // MLP with second residual
    let t2 = tensor::layernorm(&u, &block.ln2_gamma.value, &block.ln2_beta.value, eps)?;
    obs.record(blk_idx, CalibSite::Fc1In, t2.data());
    let mut y = tensor::matmul_f32(&t2, &block.fc1_weight.value)?;
    bias_add_inplace(&mut y, block.fc1_bias.value.data());
    let a = match block.activation {
        Activation::Gelu => tensor::gelu(&y),
        Activation::Relu => tensor::relu(&y),
    };
    obs.record(blk_idx, CalibSite::Fc2In, a.data());
    let mut z = tensor::matmul_f32(&a, &block.fc2_weight.value)?;
    bias_add_inplace(&mut z, block.fc2_bias.value.data());
    Ok(add_tensors(&u, &z))
}

// ---------------------------------------------------------------------------
// Taped forward (training path)
// ---------------------------------------------------------------------------

/// Record the full classification forward on a tape and return the logits
/// node. Parameter keys follow [`SwinModel::named_params`] order, and the
/// arithmetic kernels are the same ones the float forward uses, so the taped
/// logits reproduce [`SwinModel::forward`] bitwise.
pub fn build_logits(tape: &mut Tape, model: &SwinModel, images: &Tensor) -> Result<ValueId> {
    let cfg = &model.config;
    let s = images.shape();
    let b = s[0];
    let img = tape.input(images.clone());

    let mut key = 0usize;
    let mut next_key = || {
        let k = key;
        key += 1;
        k
    };

    // Patch embedding
    let pw = tape.param(next_key(), &model.patch_weight);
    let pb = tape.param(next_key(), &model.patch_bias);
    let map = Arc::new(patch_embed_elems(
        b,
        cfg.image_size,
        cfg.image_size,
        cfg.in_channels,
        cfg.patch_size,
    ));
    let side0 = cfg.stage_side(0);
    let pvec = cfg.patch_size * cfg.patch_size * cfg.in_channels;
    let patches = tape.gather(img, map, vec![b * side0 * side0, pvec])?;
    let mut x = tape.matmul(patches, pw)?;
    x = tape.bias_add(x, pb)?;

    let mut side = side0;
    for stage in &model.stages {
        for block in &stage.blocks {
            // Parameter nodes in canonical enumeration order.
            let ln1g = tape.param(next_key(), &block.ln1_gamma);
            let ln1b = tape.param(next_key(), &block.ln1_beta);
            let qkvw = tape.param(next_key(), &block.qkv_weight);
            let qkvb = tape.param(next_key(), &block.qkv_bias);
            let projw = tape.param(next_key(), &block.proj_weight);
            let projb = tape.param(next_key(), &block.proj_bias);
            let table = tape.param(next_key(), &block.pos_bias_table);
            let ln2g = tape.param(next_key(), &block.ln2_gamma);
            let ln2b = tape.param(next_key(), &block.ln2_beta);
            let fc1w = tape.param(next_key(), &block.fc1_weight);
            let fc1b = tape.param(next_key(), &block.fc1_bias);
            let fc2w = tape.param(next_key(), &block.fc2_weight);
            let fc2b = tape.param(next_key(), &block.fc2_bias);

            let (h, w) = (side, side);
            let c = block.dim();
            let n = h * w;
            let m = block.window;
            let m2 = m * m;
            let nw = (h / m) * (w / m);
            let heads = block.num_heads;
            let dh = c / heads;
            let bw = b * nw;
            let bh = bw * heads;

            let t = tape.layernorm(x, ln1g, ln1b, cfg.layer_norm_eps)?;
            let rows = shift_partition_rows(b, h, w, m, block.shift);
            let elems = rows_to_elems(&rows, c);
            let xw = tape.gather(t, Arc::new(elems), vec![b * n, c])?;

            let mut qkv = tape.matmul(xw, qkvw)?;
            qkv = tape.bias_add(qkv, qkvb)?;

            let q = tape.gather(
                qkv,
                Arc::new(head_split_elems(bw, m2, c, heads, 0)),
                vec![bh, m2, dh],
            )?;
            let kk = tape.gather(
                qkv,
                Arc::new(head_split_elems(bw, m2, c, heads, 1)),
                vec![bh, m2, dh],
            )?;
            let vv = tape.gather(
                qkv,
                Arc::new(head_split_elems(bw, m2, c, heads, 2)),
                vec![bh, m2, dh],
            )?;

            let mut scores = tape.batch_matmul(q, kk, true)?;
            scores = tape.scale(scores, 1.0 / (dh as f32).sqrt())?;
            let bias = tape.gather(
                table,
                Arc::new(bias_expand_elems(bw, heads, &block.pos_index)),
                vec![bh, m2, m2],
            )?;
            scores = tape.add(scores, bias)?;
            if block.shift > 0 {
                let mask =
                    shifted_window_attention_mask(h, w, m, block.shift, cfg.attn_mask_value)?;
                let mut full = Vec::with_capacity(bh * m2 * m2);
                for bhi in 0..bh {
                    let wi = (bhi / heads) % nw;
                    full.extend_from_slice(&mask.data()[wi * m2 * m2..(wi + 1) * m2 * m2]);
                }
                let mask_node = tape.input(Tensor::new(vec![bh, m2, m2], full)?);
                scores = tape.add(scores, mask_node)?;
            }
            let att = tape.softmax(scores)?;
            let ctx_heads = tape.batch_matmul(att, vv, false)?;
            let ctx = tape.gather(
                ctx_heads,
                Arc::new(head_merge_elems(bw, m2, c, heads)),
                vec![b * n, c],
            )?;
            let mut attn_out = tape.matmul(ctx, projw)?;
            attn_out = tape.bias_add(attn_out, projb)?;
            let back_rows = reverse_unshift_rows(b, h, w, m, block.shift);
            let back = tape.gather(
                attn_out,
                Arc::new(rows_to_elems(&back_rows, c)),
                vec![b * n, c],
            )?;
            let u = tape.add(x, back)?;

            let t2 = tape.layernorm(u, ln2g, ln2b, cfg.layer_norm_eps)?;
            let mut y = tape.matmul(t2, fc1w)?;
            y = tape.bias_add(y, fc1b)?;
            let a = match block.activation {
                Activation::Gelu => tape.gelu(y)?,
                Activation::Relu => tape.relu(y)?,
            };
            let mut z = tape.matmul(a, fc2w)?;
            z = tape.bias_add(z, fc2b)?;
            x = tape.add(u, z)?;
        }
        if let Some(merge) = &stage.merge {
            let mw = tape.param(next_key(), &merge.weight);
            let mb = tape.param(next_key(), &merge.bias);
            let c = tape.value(x).shape()[1];
            let map = Arc::new(merge_gather_elems(b, side, side, c));
            let rows = b * (side / 2) * (side / 2);
            let gathered = tape.gather(x, map, vec![rows, 4 * c])?;
            x = tape.matmul(gathered, mw)?;
            x = tape.bias_add(x, mb)?;
            side /= 2;
        }
    }

    let ng = tape.param(next_key(), &model.norm_gamma);
    let nb = tape.param(next_key(), &model.norm_beta);
    let hw = tape.param(next_key(), &model.head_weight);
    let hb = tape.param(next_key(), &model.head_bias);
    let x = tape.layernorm(x, ng, nb, cfg.layer_norm_eps)?;
    let pooled = tape.mean_pool(x, side * side)?;
    let logits = tape.matmul(pooled, hw)?;
    tape.bias_add(logits, hb)
}

fn rows_to_elems(rows: &[u32], width: usize) -> Vec<u32> {
    let mut out = Vec::with_capacity(rows.len() * width);
    for &r in rows {
        let base = r * width as u32;
        for c in 0..width as u32 {
            out.push(base + c);
        }
    }
    out
}

/// Copy gradients accumulated on a tape into the model's parameter slots;
/// parameters the tape never saw (or frozen ones) get zero gradients.
pub fn apply_param_grads(model: &mut SwinModel, tape: &Tape) {
    for (idx, (_, p)) in model.named_params_mut().into_iter().enumerate() {
        match tape.param_grad(idx) {
            Some(g) if p.trainable => p.grad = g.clone(),
            _ => p.zero_grad(),
        }
    }
}
