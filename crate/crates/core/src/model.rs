//! The decoder-only causal-Transformer forecaster.
//!
//! A normalized patch grid is embedded rowwise by a residual MLP, summed with
//! a fixed sinusoidal positional encoding and a trainable granularity
//! encoding, passed through pre-norm causal self-attention layers, and the
//! final patch representation alone is projected to the whole H-step forecast
//! in one shot.
//!
//! Two execution paths share the same arithmetic: the plain functions below
//! ([`forward`] and the ops it composes) for inference, and
//! [`build_chunk_graph`] which records the identical computation on a
//! [`Tape`] for reverse-mode training.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::series::{
    classify_granularity, denormalize, prepare_variable, Granularity, PatchGrid, TimeSeriesWindow,
};
use crate::tape::{gelu_scalar, layer_norm_forward, masked_softmax_forward, NodeId, Tape};

/// Finite stand-in for minus infinity in attention masks. Softmax maps
/// logits this low to a weight of exactly zero in double precision.
pub const MASK_SENTINEL: f64 = -1e9;

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Patch length L_p.
    pub patch_len: usize,
    /// Latent width d_m (must be even for the positional encoding).
    pub latent_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    /// Per-head query/key width d_k.
    pub head_key_dim: usize,
    /// Per-head value width d_v.
    pub head_value_dim: usize,
    pub ffn_hidden_dim: usize,
    /// Forecast length H.
    pub horizon: usize,
    /// Longest supported input in patches; histories up to
    /// `max_patches * patch_len` steps are accepted.
    pub max_patches: usize,
    pub embed_resnet_blocks: usize,
    pub output_resnet_blocks: usize,
    /// Ablation toggle: add the sinusoidal positional encoding.
    pub use_positional_encoding: bool,
    /// Ablation toggle: add the per-granularity trainable encoding.
    pub use_granularity_encoding: bool,
}

impl Default for ModelConfig {
    /// Desk-scale defaults: d_m = 64, 4 layers, 4 heads, FFN 4*d_m, L_p = 4,
    /// H = 4, histories up to 64 steps.
    fn default() -> Self {
        Self {
            patch_len: 4,
            latent_dim: 64,
            num_layers: 4,
            num_heads: 4,
            head_key_dim: 16,
            head_value_dim: 16,
            ffn_hidden_dim: 256,
            horizon: 4,
            max_patches: 16,
            embed_resnet_blocks: 2,
            output_resnet_blocks: 2,
            use_positional_encoding: true,
            use_granularity_encoding: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("patch_len", self.patch_len),
            ("latent_dim", self.latent_dim),
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("head_key_dim", self.head_key_dim),
            ("head_value_dim", self.head_value_dim),
            ("ffn_hidden_dim", self.ffn_hidden_dim),
            ("horizon", self.horizon),
            ("max_patches", self.max_patches),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("{name} must be at least 1")));
            }
        }
        if self.latent_dim % 2 != 0 {
            return Err(Error::InvalidArgument(format!(
                "latent_dim must be even for the sinusoidal positional encoding, got {}",
                self.latent_dim
            )));
        }
        Ok(())
    }

    /// Longest accepted history length.
    pub fn max_history(&self) -> usize {
        self.max_patches * self.patch_len
    }
}

/// All trainable arrays, keyed by canonical names.
///
/// Vectors are stored as 1 x n matrices. The name scheme:
/// `embed.in.{w,b}`, `embed.block<i>.{w,b}`, `granularity.table`,
/// `layer<l>.ln1.{gain,bias}`, `layer<l>.attn.head<h>.{wq,wk,wv}`,
/// `layer<l>.attn.wo`, `layer<l>.ln2.{gain,bias}`,
/// `layer<l>.ffn.{w1,b1,w2,b2}`, `output.block<i>.{w,b}`,
/// `output.proj.{w,b}`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    arrays: BTreeMap<String, Array2<f64>>,
}

impl ModelParams {
    /// The canonical name-to-shape map for a configuration. Checkpoint
    /// loading and optimizer state mirror exactly these entries.
    pub fn shape_map(config: &ModelConfig) -> BTreeMap<String, (usize, usize)> {
        let d = config.latent_dim;
        let mut m = BTreeMap::new();
        m.insert("embed.in.w".into(), (config.patch_len, d));
        m.insert("embed.in.b".into(), (1, d));
        for i in 0..config.embed_resnet_blocks {
            m.insert(format!("embed.block{i}.w"), (d, d));
            m.insert(format!("embed.block{i}.b"), (1, d));
        }
        m.insert("granularity.table".into(), (3, d));
        for l in 0..config.num_layers {
            m.insert(format!("layer{l}.ln1.gain"), (1, d));
            m.insert(format!("layer{l}.ln1.bias"), (1, d));
            for h in 0..config.num_heads {
                m.insert(format!("layer{l}.attn.head{h}.wq"), (d, config.head_key_dim));
                m.insert(format!("layer{l}.attn.head{h}.wk"), (d, config.head_key_dim));
                m.insert(format!("layer{l}.attn.head{h}.wv"), (d, config.head_value_dim));
            }
            m.insert(format!("layer{l}.attn.wo"), (config.num_heads * config.head_value_dim, d));
            m.insert(format!("layer{l}.ln2.gain"), (1, d));
            m.insert(format!("layer{l}.ln2.bias"), (1, d));
            m.insert(format!("layer{l}.ffn.w1"), (d, config.ffn_hidden_dim));
            m.insert(format!("layer{l}.ffn.b1"), (1, config.ffn_hidden_dim));
            m.insert(format!("layer{l}.ffn.w2"), (config.ffn_hidden_dim, d));
            m.insert(format!("layer{l}.ffn.b2"), (1, d));
        }
        for i in 0..config.output_resnet_blocks {
            m.insert(format!("output.block{i}.w"), (d, d));
            m.insert(format!("output.block{i}.b"), (1, d));
        }
        m.insert("output.proj.w".into(), (d, config.horizon));
        m.insert("output.proj.b".into(), (1, config.horizon));
        m
    }

    /// Initializes parameters: weight matrices draw from a fan-in-scaled
    /// uniform distribution U(-1/sqrt(fan_in), 1/sqrt(fan_in)); biases and the
    /// granularity table start at zero; normalization gains start at one.
    /// Deterministic in (config, seed): arrays are filled in canonical name
    /// order from a single seeded stream.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut arrays = BTreeMap::new();
        for (name, (rows, cols)) in Self::shape_map(config) {
            let last = name.rsplit('.').next().unwrap_or("");
            let arr = if last == "gain" {
                Array2::ones((rows, cols))
            } else if last.starts_with('b') || name == "granularity.table" {
                Array2::zeros((rows, cols))
            } else {
                let bound = 1.0 / (rows as f64).sqrt();
                Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-bound..bound))
            };
            arrays.insert(name, arr);
        }
        Ok(Self { arrays })
    }

    pub fn from_arrays(arrays: BTreeMap<String, Array2<f64>>) -> Self {
        Self { arrays }
    }

    pub fn get(&self, name: &str) -> Result<&Array2<f64>> {
        self.arrays
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Array2<f64>> {
        self.arrays
            .get_mut(name)
            .ok_or_else(|| Error::InvalidArgument(format!("missing parameter `{name}`")))
    }

    pub fn arrays(&self) -> &BTreeMap<String, Array2<f64>> {
        &self.arrays
    }

    pub fn arrays_mut(&mut self) -> &mut BTreeMap<String, Array2<f64>> {
        &mut self.arrays
    }

    /// Total scalar parameter count.
    pub fn num_scalars(&self) -> usize {
        self.arrays.values().map(|a| a.len()).sum()
    }

    /// Confirms the arrays match a configuration's canonical shapes exactly.
    pub fn check_shapes(&self, config: &ModelConfig) -> Result<()> {
        let want = Self::shape_map(config);
        if self.arrays.len() != want.len() {
            return Err(Error::InvalidArgument(format!(
                "parameter count {} does not match configuration ({} expected)",
                self.arrays.len(),
                want.len()
            )));
        }
        for (name, (rows, cols)) in &want {
            let arr = self.get(name)?;
            if arr.dim() != (*rows, *cols) {
                return Err(Error::InvalidArgument(format!(
                    "parameter `{name}` has shape {:?}, expected ({rows}, {cols})",
                    arr.dim()
                )));
            }
        }
        Ok(())
    }
}

fn gelu_mat(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(gelu_scalar)
}

/// `x . w + b` with `b` a 1 x n row broadcast over rows.
fn linear(x: &Array2<f64>, w: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let mut y = x.dot(w);
    let row = b.row(0);
    y += &row;
    y
}

/// One residual MLP block: `h + gelu(h . w + b)`.
fn resnet_block(h: &Array2<f64>, w: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    h + &gelu_mat(&linear(h, w, b))
}

/// Fixed sinusoidal positional encoding: entry (j, 2i) = sin(j / 10000^(2i/d)),
/// entry (j, 2i+1) = cos of the same argument; j is the zero-based patch index.
pub fn positional_encoding(n_patches: usize, d_m: usize) -> Result<Array2<f64>> {
    if n_patches == 0 || d_m == 0 {
        return Err(Error::InvalidArgument("positional encoding dims must be at least 1".into()));
    }
    if d_m % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "positional encoding requires an even latent width, got {d_m}"
        )));
    }
    let mut pe = Array2::zeros((n_patches, d_m));
    for j in 0..n_patches {
        for i in 0..d_m / 2 {
            let denom = 10000f64.powf(2.0 * i as f64 / d_m as f64);
            let arg = j as f64 / denom;
            pe[[j, 2 * i]] = arg.sin();
            pe[[j, 2 * i + 1]] = arg.cos();
        }
    }
    Ok(pe)
}

/// Broadcasts the granularity table row for `g` to every patch row.
pub fn granularity_encoding(
    g: Granularity,
    n_patches: usize,
    params: &ModelParams,
) -> Result<Array2<f64>> {
    let table = params.get("granularity.table")?;
    let row = table.row(g.index());
    let mut out = Array2::zeros((n_patches, table.ncols()));
    for mut r in out.rows_mut() {
        r.assign(&row);
    }
    Ok(out)
}

/// Elementwise sum of patch embedding, positional encoding, and granularity
/// encoding.
pub fn compose_input(
    e_pat: &Array2<f64>,
    e_pos: &Array2<f64>,
    e_gra: &Array2<f64>,
) -> Result<Array2<f64>> {
    if e_pat.dim() != e_pos.dim() || e_pat.dim() != e_gra.dim() {
        return Err(Error::InvalidArgument(format!(
            "compose_input shapes differ: {:?}, {:?}, {:?}",
            e_pat.dim(),
            e_pos.dim(),
            e_gra.dim()
        )));
    }
    Ok(&(e_pat + e_pos) + e_gra)
}

/// Additive causal mask: entry (i, j) is 0 where j <= i and [`MASK_SENTINEL`]
/// where j > i, so position i attends to itself and earlier positions only.
pub fn causal_mask(n_patches: usize) -> Array2<f64> {
    block_causal_mask(1, n_patches)
}

/// Block-diagonal causal mask for `chunk` independent series stacked
/// vertically, each `n_patches` rows: attention never crosses block borders
/// and stays causal inside each block.
pub fn block_causal_mask(chunk: usize, n_patches: usize) -> Array2<f64> {
    let n = chunk * n_patches;
    Array2::from_shape_fn((n, n), |(i, j)| {
        if i / n_patches == j / n_patches && j <= i {
            0.0
        } else {
            MASK_SENTINEL
        }
    })
}

/// Single attention head: softmax((E Wq)(E Wk)^T / sqrt(d_k) + mask) (E Wv).
pub fn attention_head(
    e: &Array2<f64>,
    wq: &Array2<f64>,
    wk: &Array2<f64>,
    wv: &Array2<f64>,
    mask: &Array2<f64>,
) -> Array2<f64> {
    let q = e.dot(wq);
    let k = e.dot(wk);
    let v = e.dot(wv);
    let scale = 1.0 / (wq.ncols() as f64).sqrt();
    let logits = q.dot(&k.t()).mapv(|x| x * scale);
    let weights = masked_softmax_forward(&logits, mask);
    weights.dot(&v)
}

/// Multi-head attention for layer `l`: heads are concatenated along columns
/// and projected by W^O back to the latent width.
pub fn multi_head(
    e: &Array2<f64>,
    params: &ModelParams,
    layer: usize,
    config: &ModelConfig,
    mask: &Array2<f64>,
) -> Result<Array2<f64>> {
    let mut heads = Vec::with_capacity(config.num_heads);
    for h in 0..config.num_heads {
        let wq = params.get(&format!("layer{layer}.attn.head{h}.wq"))?;
        let wk = params.get(&format!("layer{layer}.attn.head{h}.wk"))?;
        let wv = params.get(&format!("layer{layer}.attn.head{h}.wv"))?;
        heads.push(attention_head(e, wq, wk, wv, mask));
    }
    let views: Vec<_> = heads.iter().map(|h| h.view()).collect();
    let cat = ndarray::concatenate(ndarray::Axis(1), &views)
        .map_err(|e| Error::InvalidArgument(format!("head concatenation failed: {e}")))?;
    let wo = params.get(&format!("layer{layer}.attn.wo"))?;
    Ok(cat.dot(wo))
}

/// One pre-norm Transformer layer:
/// `E1 = E + MultiHead(LN1(E))`, `E_out = E1 + FFN(LN2(E1))`.
pub fn transformer_layer(
    e_in: &Array2<f64>,
    params: &ModelParams,
    layer: usize,
    config: &ModelConfig,
    mask: &Array2<f64>,
) -> Result<Array2<f64>> {
    let ln1 = layer_norm_forward(
        e_in,
        params.get(&format!("layer{layer}.ln1.gain"))?,
        params.get(&format!("layer{layer}.ln1.bias"))?,
    );
    let attn = multi_head(&ln1, params, layer, config, mask)?;
    let e1 = e_in + &attn;
    let ln2 = layer_norm_forward(
        &e1,
        params.get(&format!("layer{layer}.ln2.gain"))?,
        params.get(&format!("layer{layer}.ln2.bias"))?,
    );
    let hidden = gelu_mat(&linear(
        &ln2,
        params.get(&format!("layer{layer}.ffn.w1"))?,
        params.get(&format!("layer{layer}.ffn.b1"))?,
    ));
    let ffn = linear(
        &hidden,
        params.get(&format!("layer{layer}.ffn.w2"))?,
        params.get(&format!("layer{layer}.ffn.b2"))?,
    );
    Ok(&e1 + &ffn)
}

/// Rowwise embedding ResNet: linear L_p -> d_m, then residual MLP blocks.
pub fn embed_patches(
    grid: &PatchGrid,
    params: &ModelParams,
    config: &ModelConfig,
) -> Result<Array2<f64>> {
    if grid.patch_len() != config.patch_len {
        return Err(Error::InvalidArgument(format!(
            "grid patch length {} does not match configured {}",
            grid.patch_len(),
            config.patch_len
        )));
    }
    let mut h = linear(&grid.patches, params.get("embed.in.w")?, params.get("embed.in.b")?);
    for i in 0..config.embed_resnet_blocks {
        h = resnet_block(
            &h,
            params.get(&format!("embed.block{i}.w"))?,
            params.get(&format!("embed.block{i}.b"))?,
        );
    }
    Ok(h)
}

/// Output head: the ResNet and projection are applied to the final patch
/// representation only, producing the whole H-step forecast at once.
pub fn project_output(
    z: &Array2<f64>,
    params: &ModelParams,
    config: &ModelConfig,
) -> Result<Array1<f64>> {
    if z.nrows() == 0 {
        return Err(Error::InvalidArgument("output projection needs at least one row".into()));
    }
    let last = z.row(z.nrows() - 1).to_owned().insert_axis(ndarray::Axis(0));
    let mut h = last;
    for i in 0..config.output_resnet_blocks {
        h = resnet_block(
            &h,
            params.get(&format!("output.block{i}.w"))?,
            params.get(&format!("output.block{i}.b"))?,
        );
    }
    let out = linear(&h, params.get("output.proj.w")?, params.get("output.proj.b")?);
    Ok(out.row(0).to_owned())
}

/// Runs the backbone on one prepared variable and returns the normalized
/// H-step forecast.
pub fn forward_variable(
    grid: &PatchGrid,
    params: &ModelParams,
    config: &ModelConfig,
) -> Result<Array1<f64>> {
    let n_p = grid.num_patches();
    let mut e = embed_patches(grid, params, config)?;
    if config.use_positional_encoding {
        e = &e + &positional_encoding(n_p, config.latent_dim)?;
    }
    if config.use_granularity_encoding {
        e = &e + &granularity_encoding(grid.granularity, n_p, params)?;
    }
    let mask = causal_mask(n_p);
    for l in 0..config.num_layers {
        e = transformer_layer(&e, params, l, config, &mask)?;
    }
    project_output(&e, params, config)
}

/// Full forecast: prepares every variable (normalize, pad, patchify, mask),
/// runs the shared backbone per variable, and denormalizes, assembling an
/// M x H output.
///
/// `mask_override` zeroes the first `r` positions of each variable's padded
/// series exactly as a training mask would; the normalization statistics then
/// cover the surviving samples only, so a masked window equals its truncated
/// counterpart bit for bit.
pub fn forward(
    window: &TimeSeriesWindow,
    params: &ModelParams,
    config: &ModelConfig,
    mask_override: Option<usize>,
) -> Result<Array2<f64>> {
    config.validate()?;
    let l = window.history_len();
    if l > config.max_history() {
        return Err(Error::InvalidArgument(format!(
            "history length {l} exceeds the configured maximum {}",
            config.max_history()
        )));
    }
    if !window.values.iter().all(|v| v.is_finite()) {
        return Err(Error::InvalidArgument("window values contain non-finite entries".into()));
    }
    let granularity = classify_granularity(window.delta_t_seconds)?;
    let r = mask_override.unwrap_or(0);
    let m = window.num_variables();
    let mut out = Array2::zeros((m, config.horizon));
    for (idx, row) in window.values.rows().into_iter().enumerate() {
        let grid = prepare_variable(row, config.patch_len, r, granularity)?;
        let pred_norm = forward_variable(&grid, params, config)?;
        let pred = denormalize(pred_norm.view(), grid.stats);
        out.row_mut(idx).assign(&pred);
    }
    Ok(out)
}

/// Parameter leaves inserted on a tape, keyed by canonical name.
pub struct TapeParams {
    pub ids: BTreeMap<String, NodeId>,
}

/// Inserts every parameter as a named leaf on `tape`.
pub fn insert_params(tape: &mut Tape, params: &ModelParams) -> TapeParams {
    let mut ids = BTreeMap::new();
    for (name, value) in params.arrays() {
        ids.insert(name.clone(), tape.param(name, value.clone()));
    }
    TapeParams { ids }
}

impl TapeParams {
    fn id(&self, name: &str) -> Result<NodeId> {
        self.ids
            .get(name)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("missing parameter `{name}` on tape")))
    }
}

/// Records the backbone on a tape for a chunk of prepared variables that
/// share one patch count and granularity (variables of the same window).
///
/// The chunk's patch grids are stacked into a `(chunk * N_p) x L_p` input and
/// attention uses a block-diagonal causal mask, so every variable's
/// computation stays independent: the result matches per-variable
/// [`forward_variable`] calls. Returns the node holding the normalized
/// `chunk x H` predictions.
pub fn build_chunk_graph(
    tape: &mut Tape,
    tp: &TapeParams,
    grids: &[PatchGrid],
    config: &ModelConfig,
) -> Result<NodeId> {
    if grids.is_empty() {
        return Err(Error::InvalidArgument("chunk must hold at least one variable".into()));
    }
    let n_p = grids[0].num_patches();
    let granularity = grids[0].granularity;
    for g in grids {
        if g.num_patches() != n_p || g.granularity != granularity {
            return Err(Error::InvalidArgument(
                "all variables of a chunk must share patch count and granularity".into(),
            ));
        }
        if g.patch_len() != config.patch_len {
            return Err(Error::InvalidArgument(format!(
                "grid patch length {} does not match configured {}",
                g.patch_len(),
                config.patch_len
            )));
        }
    }
    let chunk = grids.len();

    let mut stacked = Array2::zeros((chunk * n_p, config.patch_len));
    for (c, g) in grids.iter().enumerate() {
        stacked
            .slice_mut(ndarray::s![c * n_p..(c + 1) * n_p, ..])
            .assign(&g.patches);
    }

    let x = tape.leaf(stacked);
    let w_in = tp.id("embed.in.w")?;
    let b_in = tp.id("embed.in.b")?;
    let mut e = {
        let prod = tape.matmul(x, w_in);
        tape.add_row(prod, b_in)
    };
    for i in 0..config.embed_resnet_blocks {
        let w = tp.id(&format!("embed.block{i}.w"))?;
        let b = tp.id(&format!("embed.block{i}.b"))?;
        let prod = tape.matmul(e, w);
        let aff = tape.add_row(prod, b);
        let act = tape.gelu(aff);
        e = tape.add(e, act);
    }

    if config.use_positional_encoding {
        let pe_block = positional_encoding(n_p, config.latent_dim)?;
        let mut pe = Array2::zeros((chunk * n_p, config.latent_dim));
        for c in 0..chunk {
            pe.slice_mut(ndarray::s![c * n_p..(c + 1) * n_p, ..]).assign(&pe_block);
        }
        let pe_leaf = tape.leaf(pe);
        e = tape.add(e, pe_leaf);
    }
    if config.use_granularity_encoding {
        let table = tp.id("granularity.table")?;
        let rows = vec![granularity.index(); chunk * n_p];
        let ge = tape.select_rows(table, &rows);
        e = tape.add(e, ge);
    }

    let mask = block_causal_mask(chunk, n_p);
    let scale = 1.0 / (config.head_key_dim as f64).sqrt();
    for l in 0..config.num_layers {
        let g1 = tp.id(&format!("layer{l}.ln1.gain"))?;
        let b1 = tp.id(&format!("layer{l}.ln1.bias"))?;
        let ln1 = tape.layer_norm(e, g1, b1);
        let mut heads = Vec::with_capacity(config.num_heads);
        for h in 0..config.num_heads {
            let wq = tp.id(&format!("layer{l}.attn.head{h}.wq"))?;
            let wk = tp.id(&format!("layer{l}.attn.head{h}.wk"))?;
            let wv = tp.id(&format!("layer{l}.attn.head{h}.wv"))?;
            let q = tape.matmul(ln1, wq);
            let k = tape.matmul(ln1, wk);
            let v = tape.matmul(ln1, wv);
            let logits_raw = tape.matmul_nt(q, k);
            let logits = tape.scale(logits_raw, scale);
            let weights = tape.masked_softmax(logits, &mask);
            heads.push(tape.matmul(weights, v));
        }
        let cat = tape.concat_cols(&heads);
        let wo = tp.id(&format!("layer{l}.attn.wo"))?;
        let attn = tape.matmul(cat, wo);
        let e1 = tape.add(e, attn);

        let g2 = tp.id(&format!("layer{l}.ln2.gain"))?;
        let b2 = tp.id(&format!("layer{l}.ln2.bias"))?;
        let ln2 = tape.layer_norm(e1, g2, b2);
        let w1 = tp.id(&format!("layer{l}.ffn.w1"))?;
        let fb1 = tp.id(&format!("layer{l}.ffn.b1"))?;
        let w2 = tp.id(&format!("layer{l}.ffn.w2"))?;
        let fb2 = tp.id(&format!("layer{l}.ffn.b2"))?;
        let h1 = tape.matmul(ln2, w1);
        let h1b = tape.add_row(h1, fb1);
        let act = tape.gelu(h1b);
        let h2 = tape.matmul(act, w2);
        let ffn = tape.add_row(h2, fb2);
        e = tape.add(e1, ffn);
    }

    let last_rows: Vec<usize> = (0..chunk).map(|c| (c + 1) * n_p - 1).collect();
    let mut z = tape.select_rows(e, &last_rows);
    for i in 0..config.output_resnet_blocks {
        let w = tp.id(&format!("output.block{i}.w"))?;
        let b = tp.id(&format!("output.block{i}.b"))?;
        let prod = tape.matmul(z, w);
        let aff = tape.add_row(prod, b);
        let act = tape.gelu(aff);
        z = tape.add(z, act);
    }
    let wp = tp.id("output.proj.w")?;
    let bp = tp.id("output.proj.b")?;
    let proj = tape.matmul(z, wp);
    Ok(tape.add_row(proj, bp))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::series::{NormStats, TaskTag};
    use ndarray::array;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            patch_len: 2,
            latent_dim: 4,
            num_layers: 2,
            num_heads: 2,
            head_key_dim: 2,
            head_value_dim: 2,
            ffn_hidden_dim: 8,
            horizon: 4,
            max_patches: 8,
            embed_resnet_blocks: 1,
            output_resnet_blocks: 1,
            use_positional_encoding: true,
            use_granularity_encoding: true,
        }
    }

    fn grid_from(patches: Array2<f64>, granularity: Granularity) -> PatchGrid {
        let mask = Array2::ones(patches.dim());
        PatchGrid { patches, mask, stats: NormStats { mean: 0.0, std: 1.0 }, granularity }
    }

    #[test]
    fn positional_encoding_matches_reference_values() {
        let pe = positional_encoding(3, 4).unwrap();
        for i in 0..2 {
            assert_eq!(pe[[0, 2 * i]], 0.0, "row 0 even columns are sin(0)");
            assert_eq!(pe[[0, 2 * i + 1]], 1.0, "row 0 odd columns are cos(0)");
        }
        assert!((pe[[1, 0]] - 0.8414709848078965).abs() < 1e-12, "sin(1)");
        assert!((pe[[1, 1]] - 0.5403023058681398).abs() < 1e-12, "cos(1)");
        assert!(pe.iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!(positional_encoding(3, 5).is_err(), "odd width rejected");
    }

    #[test]
    fn granularity_encoding_broadcasts_table_rows() {
        let config = tiny_config();
        let mut params = ModelParams::init(&config, 0).unwrap();
        *params.get_mut("granularity.table").unwrap() = array![
            [1.0, 2.0, 3.0, 4.0],
            [5.0, 6.0, 7.0, 8.0],
            [9.0, 10.0, 11.0, 12.0]
        ];
        let enc = granularity_encoding(Granularity::Medium, 3, &params).unwrap();
        assert_eq!(enc.nrows(), 3);
        for row in enc.rows() {
            assert_eq!(row, array![5.0, 6.0, 7.0, 8.0].view(), "all rows identical");
        }
        let high = granularity_encoding(Granularity::High, 1, &params).unwrap();
        let low = granularity_encoding(Granularity::Low, 1, &params).unwrap();
        assert_ne!(high, low, "distinct levels select distinct rows");

        let zeroed = ModelParams::init(&config, 0).unwrap();
        let enc = granularity_encoding(Granularity::Low, 2, &zeroed).unwrap();
        assert!(enc.iter().all(|&v| v == 0.0), "zero-initialized table encodes zeros");
    }

    #[test]
    fn compose_input_sums_elementwise() {
        let a = array![[1.0, 2.0]];
        let b = array![[3.0, 4.0]];
        let c = array![[5.0, 6.0]];
        let z = Array2::zeros((1, 2));
        assert_eq!(compose_input(&a, &b, &c).unwrap(), array![[9.0, 12.0]]);
        assert_eq!(compose_input(&a, &z, &z).unwrap(), a);
        let abc = compose_input(&a, &b, &c).unwrap();
        let cab = compose_input(&c, &a, &b).unwrap();
        assert_eq!(abc, cab, "sum is permutation-invariant");
        assert!(compose_input(&a, &b, &Array2::zeros((2, 2))).is_err());
    }

    #[test]
    fn causal_mask_matches_reference_structure() {
        let m = causal_mask(2);
        assert_eq!(m, array![[0.0, MASK_SENTINEL], [0.0, 0.0]]);
        assert_eq!(causal_mask(1), array![[0.0]]);
        let m = causal_mask(5);
        for i in 0..5 {
            let zeros = m.row(i).iter().filter(|&&v| v == 0.0).count();
            assert_eq!(zeros, i + 1, "row {i} attends to exactly i+1 positions");
        }
    }

    #[test]
    fn block_causal_mask_isolates_blocks() {
        let m = block_causal_mask(2, 2);
        for i in 0..4 {
            for j in 0..4 {
                let same_block = i / 2 == j / 2;
                let expect = if same_block && j <= i { 0.0 } else { MASK_SENTINEL };
                assert_eq!(m[[i, j]], expect, "entry ({i},{j})");
            }
        }
    }

    #[test]
    fn attention_head_singleton_softmax_returns_value_row() {
        let e = array![[0.3, -0.7, 1.1, 0.2]];
        let wq = array![[0.1, 0.2], [0.3, 0.4], [-0.1, 0.5], [0.2, -0.3]];
        let wk = wq.mapv(|v| v * 0.5);
        let wv = array![[1.0, 0.0], [0.0, 1.0], [0.5, 0.5], [-0.5, 0.5]];
        let out = attention_head(&e, &wq, &wk, &wv, &causal_mask(1));
        let expected = e.dot(&wv);
        for (a, b) in out.iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-12, "singleton softmax weight is 1");
        }
    }

    #[test]
    fn attention_row_zero_ignores_future_tokens() {
        let wq = array![[0.1, 0.2], [0.3, 0.4], [-0.1, 0.5], [0.2, -0.3]];
        let wk = array![[0.2, -0.1], [0.1, 0.3], [0.4, 0.1], [-0.2, 0.2]];
        let wv = array![[1.0, 0.0], [0.0, 1.0], [0.5, 0.5], [-0.5, 0.5]];
        let mask = causal_mask(3);
        let e1 = array![[0.3, -0.7, 1.1, 0.2], [0.5, 0.5, -0.5, 0.1], [1.0, -1.0, 0.0, 0.3]];
        let mut e2 = e1.clone();
        e2.row_mut(2).assign(&array![9.0, -9.0, 9.0, -9.0]);
        e2.row_mut(1).assign(&array![-3.0, 2.0, 8.0, 1.0]);
        let o1 = attention_head(&e1, &wq, &wk, &wv, &mask);
        let o2 = attention_head(&e2, &wq, &wk, &wv, &mask);
        assert_eq!(o1.row(0), o2.row(0), "row 0 output depends only on token 0");
    }

    #[test]
    fn attention_head_matches_brute_force_loops() {
        let e = array![[0.3, -0.7], [0.5, 0.5], [1.0, -1.0]];
        let wq = array![[0.1, 0.2], [0.3, -0.4]];
        let wk = array![[0.2, -0.1], [0.1, 0.3]];
        let wv = array![[0.7, 0.1], [-0.2, 0.5]];
        let mask = causal_mask(3);
        let got = attention_head(&e, &wq, &wk, &wv, &mask);

        // Brute force with explicit loops over queries, keys, and values.
        let n = 3;
        let dk = 2;
        let dv = 2;
        let dm = 2;
        let proj = |w: &Array2<f64>, cols: usize| {
            let mut out = vec![vec![0.0; cols]; n];
            for i in 0..n {
                for c in 0..cols {
                    for d in 0..dm {
                        out[i][c] += e[[i, d]] * w[[d, c]];
                    }
                }
            }
            out
        };
        let q = proj(&wq, dk);
        let k = proj(&wk, dk);
        let v = proj(&wv, dv);
        for i in 0..n {
            let mut weights = vec![0.0; n];
            let mut max = f64::NEG_INFINITY;
            let mut logits = vec![0.0; n];
            for j in 0..n {
                let mut dot = 0.0;
                for c in 0..dk {
                    dot += q[i][c] * k[j][c];
                }
                logits[j] = dot / (dk as f64).sqrt() + mask[[i, j]];
                max = max.max(logits[j]);
            }
            let mut sum = 0.0;
            for j in 0..n {
                weights[j] = (logits[j] - max).exp();
                sum += weights[j];
            }
            for j in 0..n {
                weights[j] /= sum;
            }
            for c in 0..dv {
                let mut acc = 0.0;
                for j in 0..n {
                    acc += weights[j] * v[j][c];
                }
                assert!(
                    (got[[i, c]] - acc).abs() < 1e-9,
                    "attention output ({i},{c}) differs from brute force"
                );
            }
        }
    }

    #[test]
    fn multi_head_identity_projection_returns_single_head() {
        let mut config = tiny_config();
        config.num_heads = 1;
        config.head_key_dim = 4;
        config.head_value_dim = 4;
        let mut params = ModelParams::init(&config, 3).unwrap();
        *params.get_mut("layer0.attn.wo").unwrap() = Array2::eye(4);
        let e = array![
            [0.3, -0.7, 1.1, 0.2],
            [0.5, 0.5, -0.5, 0.1]
        ];
        let mask = causal_mask(2);
        let got = multi_head(&e, &params, 0, &config, &mask).unwrap();
        let head = attention_head(
            &e,
            params.get("layer0.attn.head0.wq").unwrap(),
            params.get("layer0.attn.head0.wk").unwrap(),
            params.get("layer0.attn.head0.wv").unwrap(),
            &mask,
        );
        for (a, b) in got.iter().zip(head.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn duplicated_heads_with_halved_projection_match_single_head() {
        // Two identical heads, each projected by half of the single-head W^O,
        // must reproduce the single-head output.
        let mut single = tiny_config();
        single.num_heads = 1;
        single.head_key_dim = 2;
        single.head_value_dim = 2;
        let mut p1 = ModelParams::init(&single, 7).unwrap();
        let wo_single = Array2::from_shape_fn((2, 4), |(i, j)| 0.1 * (i as f64 + 1.0) - 0.05 * j as f64);
        *p1.get_mut("layer0.attn.wo").unwrap() = wo_single.clone();

        let mut dual = tiny_config();
        dual.num_heads = 2;
        dual.head_key_dim = 2;
        dual.head_value_dim = 2;
        let mut p2 = ModelParams::init(&dual, 7).unwrap();
        for name in ["wq", "wk", "wv"] {
            let src = p1.get(&format!("layer0.attn.head0.{name}")).unwrap().clone();
            *p2.get_mut(&format!("layer0.attn.head0.{name}")).unwrap() = src.clone();
            *p2.get_mut(&format!("layer0.attn.head1.{name}")).unwrap() = src;
        }
        let half = wo_single.mapv(|v| v * 0.5);
        let stacked = ndarray::concatenate(ndarray::Axis(0), &[half.view(), half.view()]).unwrap();
        *p2.get_mut("layer0.attn.wo").unwrap() = stacked;

        let e = array![[0.3, -0.7, 1.1, 0.2], [0.5, 0.5, -0.5, 0.1]];
        let mask = causal_mask(2);
        let o1 = multi_head(&e, &p1, 0, &single, &mask).unwrap();
        let o2 = multi_head(&e, &p2, 0, &dual, &mask).unwrap();
        for (a, b) in o1.iter().zip(o2.iter()) {
            assert!((a - b).abs() < 1e-12, "duplicated halved heads equal one head");
        }
    }

    #[test]
    fn multi_head_output_shape_follows_config() {
        for heads in [1usize, 2, 4] {
            let mut config = tiny_config();
            config.num_heads = heads;
            let params = ModelParams::init(&config, 1).unwrap();
            let e = Array2::from_shape_fn((3, 4), |(i, j)| 0.1 * i as f64 - 0.2 * j as f64);
            let out = multi_head(&e, &params, 0, &config, &causal_mask(3)).unwrap();
            assert_eq!(out.dim(), (3, 4));
        }
    }

    #[test]
    fn transformer_layer_is_identity_with_zero_output_weights() {
        let config = tiny_config();
        let mut params = ModelParams::init(&config, 5).unwrap();
        *params.get_mut("layer0.attn.wo").unwrap() = Array2::zeros((4, 4));
        *params.get_mut("layer0.ffn.w2").unwrap() = Array2::zeros((8, 4));
        let e = array![[0.3, -0.7, 1.1, 0.2], [0.5, 0.5, -0.5, 0.1]];
        let out = transformer_layer(&e, &params, 0, &config, &causal_mask(2)).unwrap();
        assert_eq!(out, e, "zeroed W^O and FFN output leave the residual stream");
    }

    #[test]
    fn transformer_layer_causality_is_exact() {
        let config = tiny_config();
        let params = ModelParams::init(&config, 11).unwrap();
        let mask = causal_mask(4);
        let e1 = Array2::from_shape_fn((4, 4), |(i, j)| (i as f64 * 0.37 - j as f64 * 0.21).sin());
        let mut e2 = e1.clone();
        for j in 0..4 {
            e2[[3, j]] += 5.0;
            e2[[2, j]] -= 3.0;
        }
        let o1 = transformer_layer(&e1, &params, 0, &config, &mask).unwrap();
        let o2 = transformer_layer(&e2, &params, 0, &config, &mask).unwrap();
        for i in 0..2 {
            assert_eq!(o1.row(i), o2.row(i), "row {i} must ignore perturbed rows 2 and 3");
        }
    }

    #[test]
    fn embed_patches_is_rowwise_and_zero_preserving() {
        let config = tiny_config();
        let params = ModelParams::init(&config, 2).unwrap();
        let zero_grid = grid_from(Array2::zeros((3, 2)), Granularity::High);
        let e = embed_patches(&zero_grid, &params, &config).unwrap();
        assert!(
            e.iter().all(|&v| v == 0.0),
            "zero patches with zero biases embed to zero rows"
        );

        let patches = array![[0.4, -1.2], [0.4, -1.2], [2.0, 0.3]];
        let grid = grid_from(patches, Granularity::High);
        let e = embed_patches(&grid, &params, &config).unwrap();
        assert_eq!(e.row(0), e.row(1), "identical patch rows embed identically");
        assert_eq!(e.dim(), (3, 4));

        let single = grid_from(array![[1.0, 2.0]], Granularity::High);
        let e = embed_patches(&single, &params, &config).unwrap();
        assert_eq!(e.dim(), (1, 4), "single patch yields a 1 x d_m embedding");

        let wrong = grid_from(Array2::zeros((2, 3)), Granularity::High);
        assert!(embed_patches(&wrong, &params, &config).is_err());
    }

    #[test]
    fn project_output_depends_on_last_row_only() {
        let config = tiny_config();
        let params = ModelParams::init(&config, 9).unwrap();
        let z1 = Array2::from_shape_fn((5, 4), |(i, j)| (i + j) as f64 * 0.17);
        let mut z2 = z1.clone();
        for i in 0..4 {
            for j in 0..4 {
                z2[[i, j]] = -99.0 + i as f64 + j as f64;
            }
        }
        let o1 = project_output(&z1, &params, &config).unwrap();
        let o2 = project_output(&z2, &params, &config).unwrap();
        assert_eq!(o1, o2, "only the final row feeds the forecast");

        for n_p in 1..=16 {
            let z = Array2::from_shape_fn((n_p, 4), |(i, j)| (i * 4 + j) as f64 * 0.01);
            assert_eq!(project_output(&z, &params, &config).unwrap().len(), 4);
        }

        let mut zeroed = ModelParams::init(&config, 9).unwrap();
        *zeroed.get_mut("output.block0.w").unwrap() = Array2::zeros((4, 4));
        *zeroed.get_mut("output.proj.w").unwrap() = Array2::zeros((4, 4));
        let out = project_output(&Array2::zeros((2, 4)), &zeroed, &config).unwrap();
        assert!(out.iter().all(|&v| v == 0.0), "zero final row, zero biases, zero forecast");
    }

    #[test]
    fn forward_produces_m_by_h_and_permutes_with_input() {
        let config = tiny_config();
        let params = ModelParams::init(&config, 21).unwrap();
        let values =
            Array2::from_shape_fn((3, 16), |(m, t)| ((t + m + 1) as f64 * 0.43).sin() + m as f64);
        let window = TimeSeriesWindow::new(values.clone(), None, 0.0005, TaskTag::Channel).unwrap();
        let out = forward(&window, &params, &config, None).unwrap();
        assert_eq!(out.dim(), (3, 4));

        let mut permuted = values.clone();
        permuted.row_mut(0).assign(&values.row(2));
        permuted.row_mut(2).assign(&values.row(0));
        let pw = TimeSeriesWindow::new(permuted, None, 0.0005, TaskTag::Channel).unwrap();
        let pout = forward(&pw, &params, &config, None).unwrap();
        assert_eq!(out.row(0), pout.row(2), "variables run through separate forward passes");
        assert_eq!(out.row(2), pout.row(0));
        assert_eq!(out.row(1), pout.row(1));
    }

    #[test]
    fn forward_rejects_overlong_and_non_finite_input() {
        let config = tiny_config();
        let params = ModelParams::init(&config, 21).unwrap();
        let long = TimeSeriesWindow::new(Array2::ones((1, 17)), None, 1.0, TaskTag::Custom).unwrap();
        assert!(forward(&long, &params, &config, None).is_err(), "L > max history");
        let ok = TimeSeriesWindow::new(Array2::ones((1, 16)), None, 1.0, TaskTag::Custom).unwrap();
        assert!(forward(&ok, &params, &config, None).is_ok());
    }

    #[test]
    fn forward_pad_equivalence_is_exact() {
        let config = tiny_config();
        let params = ModelParams::init(&config, 33).unwrap();
        let series = array![[0.4, -1.3, 2.2, 0.9, -0.6]];
        let w_short = TimeSeriesWindow::new(series.clone(), None, 0.01, TaskTag::Custom).unwrap();
        let out_short = forward(&w_short, &params, &config, None).unwrap();

        // Manually prepend zeros to L=6 (next patch multiple) and mask them.
        let mut padded = Array2::zeros((1, 6));
        padded.slice_mut(ndarray::s![.., 1..]).assign(&series);
        let w_padded = TimeSeriesWindow::new(padded, None, 0.01, TaskTag::Custom).unwrap();
        let out_padded = forward(&w_padded, &params, &config, Some(1)).unwrap();
        assert_eq!(out_short, out_padded, "padding plus matching mask is exact");
    }

    #[test]
    fn forward_is_scale_equivariant() {
        let config = tiny_config();
        let params = ModelParams::init(&config, 13).unwrap();
        let base = Array2::from_shape_fn((2, 12), |(m, t)| ((t + m) as f64 * 0.7).sin() + 0.2);
        let w = TimeSeriesWindow::new(base.clone(), None, 0.01, TaskTag::Custom).unwrap();
        let out = forward(&w, &params, &config, None).unwrap();

        let a = 3.7;
        let b = -2.0;
        let scaled = base.mapv(|v| a * v + b);
        let ws = TimeSeriesWindow::new(scaled, None, 0.01, TaskTag::Custom).unwrap();
        let outs = forward(&ws, &params, &config, None).unwrap();
        let expect = out.mapv(|v| a * v + b);
        for (got, want) in outs.iter().zip(expect.iter()) {
            let rel = (got - want).abs() / want.abs().max(1.0);
            assert!(rel < 1e-5, "scale equivariance: got {got}, want {want}");
        }
    }

    #[test]
    fn init_is_deterministic_and_shape_faithful() {
        let config = tiny_config();
        let p1 = ModelParams::init(&config, 42).unwrap();
        let p2 = ModelParams::init(&config, 42).unwrap();
        assert_eq!(p1, p2, "same seed, same parameters");
        let p3 = ModelParams::init(&config, 43).unwrap();
        assert_ne!(p1, p3, "different seed, different parameters");
        p1.check_shapes(&config).unwrap();
        assert!(
            p1.get("layer0.ln1.gain").unwrap().iter().all(|&v| v == 1.0),
            "normalization gains start at one"
        );
        assert!(
            p1.get("granularity.table").unwrap().iter().all(|&v| v == 0.0),
            "granularity table starts at zero"
        );
    }

    #[test]
    fn chunk_graph_matches_per_variable_forward() {
        let config = tiny_config();
        let params = ModelParams::init(&config, 77).unwrap();
        let series = [
            array![0.4, -1.3, 2.2, 0.9, -0.6, 1.4],
            array![1.0, 1.1, 0.9, 1.3, 0.7, 1.2],
            array![-2.0, 0.3, 0.1, -0.4, 2.2, -1.0],
        ];
        let grids: Vec<PatchGrid> = series
            .iter()
            .map(|s| prepare_variable(s.view(), 2, 1, Granularity::Medium).unwrap())
            .collect();

        let mut tape = Tape::new();
        let tp = insert_params(&mut tape, &params);
        let pred_node = build_chunk_graph(&mut tape, &tp, &grids, &config).unwrap();
        let chunk_pred = tape.value(pred_node).clone();
        assert_eq!(chunk_pred.dim(), (3, 4));

        for (i, grid) in grids.iter().enumerate() {
            let single = forward_variable(grid, &params, &config).unwrap();
            for (a, b) in chunk_pred.row(i).iter().zip(single.iter()) {
                assert!(
                    (a - b).abs() < 1e-9,
                    "chunked and per-variable forward diverge at variable {i}: {a} vs {b}"
                );
            }
        }
    }

    #[test]
    fn chunk_graph_single_variable_matches_forward_exactly() {
        let config = tiny_config();
        let params = ModelParams::init(&config, 101).unwrap();
        let s = array![0.4, -1.3, 2.2, 0.9, -0.6, 1.4, 0.2, -0.8];
        let grid = prepare_variable(s.view(), 2, 0, Granularity::High).unwrap();
        let mut tape = Tape::new();
        let tp = insert_params(&mut tape, &params);
        let pred_node = build_chunk_graph(&mut tape, &tp, std::slice::from_ref(&grid), &config).unwrap();
        let tape_pred = tape.value(pred_node).row(0).to_owned();
        let direct = forward_variable(&grid, &params, &config).unwrap();
        for (a, b) in tape_pred.iter().zip(direct.iter()) {
            assert!((a - b).abs() < 1e-12, "tape and direct forward must agree: {a} vs {b}");
        }
    }
}
