//! Small vision transformer exposing the normalized [CLS] output of every block.

use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Mat, NormAxis, Var};
use crate::error::{Error, Result};
use crate::params::{name_rng, trunc_normal, xavier_uniform, ParamSet};

const LN_EPS: f64 = 1e-6;
const INIT_STD: f64 = 0.02;

pub const PATCH_WEIGHT: &str = "encoder.patch_proj.weight";
pub const PATCH_BIAS: &str = "encoder.patch_proj.bias";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub patch_size: usize,
    pub image_size: usize,
    pub mlp_ratio: f64,
    pub channels: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            num_layers: 6,
            embed_dim: 96,
            num_heads: 3,
            patch_size: 4,
            image_size: 32,
            mlp_ratio: 4.0,
            channels: 3,
        }
    }
}

impl EncoderConfig {
    /// ViT-S/32 at 224 pixels.
    pub fn vit_small_32() -> Self {
        Self {
            num_layers: 12,
            embed_dim: 384,
            num_heads: 12,
            patch_size: 32,
            image_size: 224,
            ..Self::default()
        }
    }

    /// ViT-B/16 at 224 pixels.
    pub fn vit_base_16() -> Self {
        Self {
            num_layers: 12,
            embed_dim: 768,
            num_heads: 12,
            patch_size: 16,
            image_size: 224,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("encoder.num_layers", self.num_layers),
            ("encoder.embed_dim", self.embed_dim),
            ("encoder.num_heads", self.num_heads),
            ("encoder.patch_size", self.patch_size),
            ("encoder.image_size", self.image_size),
            ("encoder.channels", self.channels),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if self.num_layers < 2 {
            return Err(Error::config(
                "encoder.num_layers",
                "at least 2 layers are required (one intermediate layer to distill)",
            ));
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::config(
                "encoder.image_size",
                format!(
                    "{} is not divisible by patch_size {}",
                    self.image_size, self.patch_size
                ),
            ));
        }
        if !self.embed_dim.is_multiple_of(self.num_heads) {
            return Err(Error::config(
                "encoder.embed_dim",
                format!(
                    "{} is not divisible by num_heads {}",
                    self.embed_dim, self.num_heads
                ),
            ));
        }
        if !self.embed_dim.is_multiple_of(4) {
            return Err(Error::config(
                "encoder.embed_dim",
                "must be divisible by 4 for the 2-D sine-cosine embedding",
            ));
        }
        if !(self.mlp_ratio > 0.0) || !self.mlp_ratio.is_finite() {
            return Err(Error::config("encoder.mlp_ratio", "must be positive"));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Tokens per sample including [CLS].
    pub fn seq_len(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn mlp_hidden(&self) -> usize {
        ((self.embed_dim as f64) * self.mlp_ratio).round() as usize
    }
}

/// A batch of square images, `N × C × H × W`, row-major, values in `[0, 1]`
/// before normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBatch {
    pub pixels: Vec<f32>,
    pub channels: usize,
    pub size: usize,
    pub source_indices: Vec<usize>,
}

impl ImageBatch {
    pub fn new(
        pixels: Vec<f32>,
        channels: usize,
        size: usize,
        source_indices: Vec<usize>,
    ) -> Result<Self> {
        let n = source_indices.len();
        if n == 0 {
            return Err(Error::Input(
                "image batch must contain at least one sample".into(),
            ));
        }
        if pixels.len() != n * channels * size * size {
            return Err(Error::shape(
                "image batch pixels",
                n * channels * size * size,
                pixels.len(),
            ));
        }
        Ok(Self {
            pixels,
            channels,
            size,
            source_indices,
        })
    }

    pub fn len(&self) -> usize {
        self.source_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source_indices.is_empty()
    }

    pub fn sample_len(&self) -> usize {
        self.channels * self.size * self.size
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        let l = self.sample_len();
        &self.pixels[i * l..(i + 1) * l]
    }

    /// Rows `idx` of this batch, in order.
    pub fn select(&self, idx: &[usize]) -> ImageBatch {
        let mut pixels = Vec::with_capacity(idx.len() * self.sample_len());
        for &i in idx {
            pixels.extend_from_slice(self.sample(i));
        }
        ImageBatch {
            pixels,
            channels: self.channels,
            size: self.size,
            source_indices: idx.iter().map(|&i| self.source_indices[i]).collect(),
        }
    }
}

/// Per-layer [CLS] features: `layers[l]` is `N × D` for block `l + 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerFeatureStack {
    pub layers: Vec<Mat>,
}

impl LayerFeatureStack {
    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn batch_size(&self) -> usize {
        self.layers.first().map_or(0, |m| m.nrows())
    }

    pub fn dim(&self) -> usize {
        self.layers.first().map_or(0, |m| m.ncols())
    }

    /// Feature of block `layer` (1-based).
    pub fn layer(&self, layer: usize) -> &Mat {
        &self.layers[layer - 1]
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.num_layers(), self.batch_size(), self.dim())
    }
}

/// Fixed 2-D sine-cosine positional embedding, `(grid_h·grid_w) × dim`.
///
/// Row `i·grid_w + j` encodes grid position `(i, j)`. The first quarter of
/// the columns holds `sin` of the column coordinate, then `cos` of the column
/// coordinate, then `sin` and `cos` of the row coordinate.
pub fn positional_embedding_2d(grid_h: usize, grid_w: usize, dim: usize) -> Result<Mat> {
    if dim == 0 || !dim.is_multiple_of(4) {
        return Err(Error::config(
            "embed_dim",
            format!("{dim} is not divisible by 4"),
        ));
    }
    let quarter = dim / 4;
    let omega: Vec<f64> = (0..quarter)
        .map(|k| 1.0 / 10000f64.powf(k as f64 / quarter as f64))
        .collect();
    let mut out = Mat::zeros((grid_h * grid_w, dim));
    for i in 0..grid_h {
        for j in 0..grid_w {
            let mut row = out.row_mut(i * grid_w + j);
            for (k, &w) in omega.iter().enumerate() {
                let (x, y) = (j as f64 * w, i as f64 * w);
                row[k] = x.sin();
                row[quarter + k] = x.cos();
                row[2 * quarter + k] = y.sin();
                row[3 * quarter + k] = y.cos();
            }
        }
    }
    Ok(out)
}

/// Splits each image into non-overlapping patches: `(N·T) × (C·P·P)`,
/// flattened channel-major to match the projector's input layout.
pub fn patchify(batch: &ImageBatch, config: &EncoderConfig) -> Result<Mat> {
    if batch.channels != config.channels {
        return Err(Error::config(
            "encoder.channels",
            format!(
                "batch has {} channels, config {}",
                batch.channels, config.channels
            ),
        ));
    }
    if batch.size != config.image_size {
        return Err(Error::config(
            "encoder.image_size",
            format!(
                "batch images are {}px, config {}",
                batch.size, config.image_size
            ),
        ));
    }
    let (p, grid, c, size) = (
        config.patch_size,
        config.grid(),
        config.channels,
        config.image_size,
    );
    let t = config.num_patches();
    let mut out = Mat::zeros((batch.len() * t, config.patch_dim()));
    for n in 0..batch.len() {
        let img = batch.sample(n);
        for gi in 0..grid {
            for gj in 0..grid {
                let mut row = out.row_mut(n * t + gi * grid + gj);
                let mut k = 0;
                for ch in 0..c {
                    for py in 0..p {
                        let base = ch * size * size + (gi * p + py) * size + gj * p;
                        for px in 0..p {
                            row[k] = img[base + px] as f64;
                            k += 1;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

fn block_name(l: usize, rest: &str) -> String {
    format!("encoder.blocks.{l}.{rest}")
}

/// Transformer encoder; parameters live in a [`ParamSet`] under `encoder.*`.
#[derive(Clone, Debug)]
pub struct ViTEncoder {
    pub config: EncoderConfig,
    pos_embed: Mat,
}

impl ViTEncoder {
    pub fn new(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let grid = config.grid();
        let pos_embed = positional_embedding_2d(grid, grid, config.embed_dim)?;
        Ok(Self { config, pos_embed })
    }

    pub fn frozen_param_names() -> [&'static str; 2] {
        [PATCH_WEIGHT, PATCH_BIAS]
    }

    /// Positional embedding for the patch tokens; the [CLS] slot uses zeros.
    pub fn pos_embed(&self) -> &Mat {
        &self.pos_embed
    }

    pub fn init_params(&self, seed: u64) -> ParamSet {
        let c = &self.config;
        let d = c.embed_dim;
        let hidden = c.mlp_hidden();
        let mut p = ParamSet::new();
        let tn = |p: &mut ParamSet, name: String, rows: usize, cols: usize| {
            let m = trunc_normal(rows, cols, INIT_STD, &mut name_rng(seed, &name));
            p.insert(name, m);
        };
        p.insert(
            PATCH_WEIGHT,
            xavier_uniform(c.patch_dim(), d, &mut name_rng(seed, PATCH_WEIGHT)),
        );
        p.insert(PATCH_BIAS, Mat::zeros((1, d)));
        tn(&mut p, "encoder.cls_token".into(), 1, d);
        for l in 0..c.num_layers {
            p.insert(block_name(l, "ln1.gamma"), Mat::ones((1, d)));
            p.insert(block_name(l, "ln1.beta"), Mat::zeros((1, d)));
            tn(&mut p, block_name(l, "attn.qkv.weight"), d, 3 * d);
            p.insert(block_name(l, "attn.qkv.bias"), Mat::zeros((1, 3 * d)));
            tn(&mut p, block_name(l, "attn.proj.weight"), d, d);
            p.insert(block_name(l, "attn.proj.bias"), Mat::zeros((1, d)));
            p.insert(block_name(l, "ln2.gamma"), Mat::ones((1, d)));
            p.insert(block_name(l, "ln2.beta"), Mat::zeros((1, d)));
            tn(&mut p, block_name(l, "mlp.fc1.weight"), d, hidden);
            p.insert(block_name(l, "mlp.fc1.bias"), Mat::zeros((1, hidden)));
            tn(&mut p, block_name(l, "mlp.fc2.weight"), hidden, d);
            p.insert(block_name(l, "mlp.fc2.bias"), Mat::zeros((1, d)));
        }
        p.insert("encoder.norm.gamma", Mat::ones((1, d)));
        p.insert("encoder.norm.beta", Mat::zeros((1, d)));
        p
    }

    /// Token sequence `(N·(1+T)) × D`: [CLS] at position 0 of every sample,
    /// followed by frozen patch projections plus positional embedding.
    pub fn patch_embed(
        &self,
        g: &mut Graph,
        params: &ParamSet,
        batch: &ImageBatch,
        trainable: bool,
    ) -> Result<Var> {
        let patches = patchify(batch, &self.config)?;
        let mut emb = patches.dot(params.get(PATCH_WEIGHT)?) + params.get(PATCH_BIAS)?;
        let t = self.config.num_patches();
        for n in 0..batch.len() {
            let mut rows = emb.slice_mut(s![n * t..(n + 1) * t, ..]);
            rows += &self.pos_embed;
        }
        let body = g.constant(emb);
        let cls = g.param(
            "encoder.cls_token",
            params.get("encoder.cls_token")?,
            trainable,
        );
        Ok(g.prepend_row(cls, body, batch.len()))
    }

    fn layer_norm(
        &self,
        g: &mut Graph,
        params: &ParamSet,
        x: Var,
        prefix: &str,
        trainable: bool,
    ) -> Result<Var> {
        let gamma = g.param(
            &format!("{prefix}.gamma"),
            params.get(&format!("{prefix}.gamma"))?,
            trainable,
        );
        let beta = g.param(
            &format!("{prefix}.beta"),
            params.get(&format!("{prefix}.beta"))?,
            trainable,
        );
        let h = g.standardize(x, NormAxis::Rows, LN_EPS);
        let h = g.mul_row(h, gamma);
        Ok(g.add_row(h, beta))
    }

    fn linear(
        &self,
        g: &mut Graph,
        params: &ParamSet,
        x: Var,
        prefix: &str,
        trainable: bool,
    ) -> Result<Var> {
        let w_name = format!("{prefix}.weight");
        let b_name = format!("{prefix}.bias");
        let w = g.param(&w_name, params.get(&w_name)?, trainable);
        let b = g.param(&b_name, params.get(&b_name)?, trainable);
        let y = g.matmul(x, w);
        Ok(g.add_row(y, b))
    }

    /// Per-block [CLS] features after the shared final normalization, one
    /// `N × D` node per block.
    pub fn forward_layers(
        &self,
        g: &mut Graph,
        params: &ParamSet,
        batch: &ImageBatch,
        trainable: bool,
    ) -> Result<Vec<Var>> {
        let c = &self.config;
        let n = batch.len();
        let seq = c.seq_len();
        let cls_rows: Vec<usize> = (0..n).map(|i| i * seq).collect();
        let mut x = self.patch_embed(g, params, batch, trainable)?;
        let mut out = Vec::with_capacity(c.num_layers);
        for l in 0..c.num_layers {
            let h = self.layer_norm(g, params, x, &block_name(l, "ln1"), trainable)?;
            let qkv = self.linear(g, params, h, &block_name(l, "attn.qkv"), trainable)?;
            let a = g.attention(qkv, n, seq, c.num_heads);
            let a = self.linear(g, params, a, &block_name(l, "attn.proj"), trainable)?;
            x = g.add(x, a);
            let h = self.layer_norm(g, params, x, &block_name(l, "ln2"), trainable)?;
            let h = self.linear(g, params, h, &block_name(l, "mlp.fc1"), trainable)?;
            let h = g.gelu(h);
            let h = self.linear(g, params, h, &block_name(l, "mlp.fc2"), trainable)?;
            x = g.add(x, h);
            if g.value(x).iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric {
                    what: "encoder activations".into(),
                    layer: Some(l + 1),
                });
            }
            let cls = g.gather_rows(x, cls_rows.clone());
            out.push(self.layer_norm(g, params, cls, "encoder.norm", trainable)?);
        }
        Ok(out)
    }

    /// Gradient-free forward pass returning the full feature stack.
    pub fn forward_all_layers(
        &self,
        params: &ParamSet,
        batch: &ImageBatch,
    ) -> Result<LayerFeatureStack> {
        let mut g = Graph::new();
        let vars = self.forward_layers(&mut g, params, batch, false)?;
        let layers: Vec<Mat> = vars.iter().map(|&v| g.value(v).clone()).collect();
        for (l, m) in layers.iter().enumerate() {
            if m.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric {
                    what: "layer features".into(),
                    layer: Some(l + 1),
                });
            }
        }
        Ok(LayerFeatureStack { layers })
    }

    /// Features in chunks of at most `chunk` samples, concatenated per layer.
    pub fn extract_features(
        &self,
        params: &ParamSet,
        batch: &ImageBatch,
        chunk: usize,
    ) -> Result<LayerFeatureStack> {
        let chunk = chunk.max(1);
        let n = batch.len();
        let mut layers: Vec<Mat> = (0..self.config.num_layers)
            .map(|_| Array2::zeros((n, self.config.embed_dim)))
            .collect();
        let mut start = 0;
        while start < n {
            let end = (start + chunk).min(n);
            let idx: Vec<usize> = (start..end).collect();
            let part = self.forward_all_layers(params, &batch.select(&idx))?;
            for (dst, src) in layers.iter_mut().zip(part.layers) {
                dst.slice_mut(s![start..end, ..]).assign(&src);
            }
            start = end;
        }
        Ok(LayerFeatureStack { layers })
    }
}
