//! Trainable scene representation.
//!
//! Positions are normalised into the scene box, optionally contracted, and
//! looked up in a stack of dense trilinear feature grids. Grid features plus
//! a low-frequency encoding of the position feed the density head, whose
//! first output becomes `σ` through a softplus and whose remaining outputs
//! are geometry features for the colour head. The colour head also sees
//! the encoded view direction and the sequence appearance embedding, both
//! entering at its first layer; `σ` never depends on either.

pub mod checkpoint;
pub mod encoding;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::AppearanceKey;
use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::tape::{self, NodeId, Tape};

pub use encoding::{contract, positional_encode, uncontract};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FieldConfig {
    /// Cells per axis for each grid level, strictly increasing.
    pub grid_resolutions: Vec<usize>,
    pub grid_features: usize,
    /// Frequency count of the position encoding fed to the density head.
    pub pos_frequencies: usize,
    pub dir_frequencies: usize,
    pub embedding_dim: usize,
    pub hidden_width: usize,
    pub density_layers: usize,
    pub color_layers: usize,
    pub geo_features: usize,
    pub contraction: bool,
    /// World-space box mapped onto `[-1, 1]^3` before contraction.
    pub scene_center: [f64; 3],
    pub scene_half_extent: [f64; 3],
    /// Added to the raw density output before the softplus.
    pub density_bias: f64,
    pub appearance_embeddings: bool,
    pub init_seed: u64,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self {
            grid_resolutions: vec![16, 32, 64, 128],
            grid_features: 2,
            pos_frequencies: 2,
            dir_frequencies: 2,
            embedding_dim: 8,
            hidden_width: 32,
            density_layers: 2,
            color_layers: 1,
            geo_features: 7,
            contraction: true,
            scene_center: [0.0, 0.0, 2.0],
            scene_half_extent: [25.0, 25.0, 6.0],
            density_bias: -6.0,
            appearance_embeddings: true,
            init_seed: 0,
        }
    }
}

impl FieldConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("field config: {m}")));
        if self.grid_resolutions.is_empty() || self.grid_resolutions.iter().any(|&r| r == 0) {
            return bad("grid levels must be non-empty with positive resolutions");
        }
        if self.grid_resolutions.windows(2).any(|w| w[0] >= w[1]) {
            return bad("grid resolutions must be strictly increasing");
        }
        let counts = [
            self.grid_features,
            self.dir_frequencies,
            self.embedding_dim,
            self.hidden_width,
            self.density_layers,
            self.color_layers,
            self.geo_features,
        ];
        if counts.iter().any(|&c| c == 0) {
            return bad("all counts must be at least 1");
        }
        if self.scene_half_extent.iter().any(|&h| !(h > 0.0)) {
            return bad("scene half extents must be positive");
        }
        Ok(())
    }

    fn grid_domain(&self) -> (f64, f64) {
        if self.contraction {
            (-2.0, 2.0)
        } else {
            (-1.0, 1.0)
        }
    }

    fn density_input_dim(&self) -> usize {
        self.grid_resolutions.len() * self.grid_features + 6 * self.pos_frequencies
    }

    fn context_dim(&self) -> usize {
        6 * self.dir_frequencies + self.embedding_dim
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layer {
    pub weight: usize,
    pub bias: usize,
    pub n_in: usize,
    pub n_out: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridLevel {
    pub offset: usize,
    pub resolution: usize,
}

/// Parameter groups, used to assign learning rates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Grid,
    Head,
    Embedding,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamLayout {
    pub grids: Vec<GridLevel>,
    pub density: Vec<Layer>,
    /// First colour layer, split into the per-sample geometry block (with
    /// bias) and the per-ray context block (no bias).
    pub color_geo: Layer,
    pub color_ctx: usize,
    pub color: Vec<Layer>,
    pub embeddings: usize,
    pub total: usize,
    groups: Vec<(std::ops::Range<usize>, ParamGroup)>,
}

impl ParamLayout {
    fn new(cfg: &FieldConfig, n_sequences: usize) -> Self {
        let mut off = 0;
        let mut groups = Vec::new();
        let grids: Vec<_> = cfg
            .grid_resolutions
            .iter()
            .map(|&r| {
                let level = GridLevel {
                    offset: off,
                    resolution: r,
                };
                off += (r + 1).pow(3) * cfg.grid_features;
                level
            })
            .collect();
        groups.push((0..off, ParamGroup::Grid));

        let head_start = off;
        let mut layer = |n_in: usize, n_out: usize, with_bias: bool| {
            let weight = off;
            off += n_in * n_out;
            let bias = off;
            if with_bias {
                off += n_out;
            }
            Layer {
                weight,
                bias,
                n_in,
                n_out,
            }
        };
        let mut density = Vec::new();
        let mut n_in = cfg.density_input_dim();
        for _ in 0..cfg.density_layers {
            density.push(layer(n_in, cfg.hidden_width, true));
            n_in = cfg.hidden_width;
        }
        density.push(layer(n_in, 1 + cfg.geo_features, true));

        let color_geo = layer(cfg.geo_features, cfg.hidden_width, true);
        let color_ctx = layer(cfg.context_dim(), cfg.hidden_width, false).weight;
        let mut color = Vec::new();
        for _ in 1..cfg.color_layers {
            color.push(layer(cfg.hidden_width, cfg.hidden_width, true));
        }
        color.push(layer(cfg.hidden_width, 3, true));
        groups.push((head_start..off, ParamGroup::Head));

        let embeddings = off;
        off += n_sequences * cfg.embedding_dim;
        groups.push((embeddings..off, ParamGroup::Embedding));

        Self {
            grids,
            density,
            color_geo,
            color_ctx,
            color,
            embeddings,
            total: off,
            groups,
        }
    }

    pub fn groups(&self) -> impl Iterator<Item = (std::ops::Range<usize>, ParamGroup)> + '_ {
        self.groups.iter().cloned()
    }

    pub fn group_of(&self, index: usize) -> ParamGroup {
        self.groups
            .iter()
            .find(|(r, _)| r.contains(&index))
            .map(|(_, g)| *g)
            .expect("index inside layout")
    }
}

/// Which appearance embedding conditions the colour head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Appearance {
    Sequence { trip: u32, camera: u32 },
    /// Mean embedding over every sequence recorded by this camera.
    CameraAverage { camera: u32 },
    /// All-zero embedding.
    Neutral,
}

impl From<AppearanceKey> for Appearance {
    fn from(k: AppearanceKey) -> Self {
        Appearance::Sequence {
            trip: k.trip,
            camera: k.camera,
        }
    }
}

/// Per-ray inputs shared by every sample: encoded direction and embedding
/// already pushed through the context block of the first colour layer.
#[derive(Debug, Clone)]
pub struct RayContext {
    base: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct RadianceField {
    config: FieldConfig,
    layout: ParamLayout,
    params: Vec<f64>,
    sequences: BTreeMap<AppearanceKey, usize>,
}

/// Reusable buffers for the tape-free forward pass.
#[derive(Debug, Default, Clone)]
pub struct QueryScratch {
    input: Vec<f64>,
    a: Vec<f64>,
    b: Vec<f64>,
    taps: Vec<(usize, f64)>,
}

impl RadianceField {
    /// Builds a field with deterministic initialisation from
    /// `config.init_seed`. `sequences` fixes the embedding table.
    pub fn new(config: FieldConfig, sequences: &[AppearanceKey]) -> Result<Self> {
        config.validate()?;
        let mut keys: Vec<_> = sequences.to_vec();
        keys.sort();
        keys.dedup();
        let sequences: BTreeMap<_, _> = keys.into_iter().enumerate().map(|(i, k)| (k, i)).collect();
        let layout = ParamLayout::new(&config, sequences.len());
        let mut params = vec![0.0; layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let grid_end = layout.density[0].weight;
        for p in &mut params[..grid_end] {
            *p = rng.gen_range(-1e-4..1e-4);
        }
        let uniform = |rng: &mut ChaCha8Rng, slice: &mut [f64], n_in: usize| {
            let bound = (6.0 / n_in as f64).sqrt();
            slice.iter_mut().for_each(|p| *p = rng.gen_range(-bound..bound));
        };
        for l in &layout.density {
            uniform(&mut rng, &mut params[l.weight..l.weight + l.n_in * l.n_out], l.n_in);
        }
        // Fan-in of the colour input layer counts both blocks.
        let first_in = config.geo_features + config.context_dim();
        let cg = layout.color_geo;
        uniform(&mut rng, &mut params[cg.weight..cg.weight + cg.n_in * cg.n_out], first_in);
        let ctx = layout.color_ctx;
        uniform(&mut rng, &mut params[ctx..ctx + config.context_dim() * config.hidden_width], first_in);
        for l in &layout.color {
            uniform(&mut rng, &mut params[l.weight..l.weight + l.n_in * l.n_out], l.n_in);
        }
        Ok(Self {
            config,
            layout,
            params,
            sequences,
        })
    }

    pub(crate) fn from_parts(config: FieldConfig, sequences: Vec<AppearanceKey>, params: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let sequences: BTreeMap<_, _> = sequences.into_iter().enumerate().map(|(i, k)| (k, i)).collect();
        let layout = ParamLayout::new(&config, sequences.len());
        if params.len() != layout.total {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                layout.total,
                params.len()
            )));
        }
        Ok(Self {
            config,
            layout,
            params,
            sequences,
        })
    }

    pub fn config(&self) -> &FieldConfig {
        &self.config
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn sequences(&self) -> impl Iterator<Item = AppearanceKey> + '_ {
        self.sequences.keys().copied()
    }

    pub fn embedding(&self, key: AppearanceKey) -> Result<&[f64]> {
        let row = *self.sequences.get(&key).ok_or(Error::UnknownSequence(key))?;
        let d = self.config.embedding_dim;
        let s = self.layout.embeddings + row * d;
        Ok(&self.params[s..s + d])
    }

    /// Maps a world point into grid coordinates (after optional contraction).
    pub fn normalize(&self, x: &Vec3) -> Vec3 {
        let c = &self.config;
        let mut p = Vec3::zeros();
        for a in 0..3 {
            p[a] = (x[a] - c.scene_center[a]) / c.scene_half_extent[a];
        }
        if c.contraction {
            contract(&p)
        } else {
            p
        }
    }

    /// `(offset, weight)` taps of the embedding rows selected by `appearance`,
    /// or `None` for the zero embedding.
    fn embedding_taps(&self, appearance: Appearance) -> Result<Option<Vec<(usize, f64)>>> {
        let d = self.config.embedding_dim;
        let rows: Vec<usize> = match appearance {
            Appearance::Neutral => return Ok(None),
            Appearance::Sequence { trip, camera } => {
                let key = AppearanceKey::new(trip, camera);
                vec![*self.sequences.get(&key).ok_or(Error::UnknownSequence(key))?]
            }
            Appearance::CameraAverage { camera } => {
                let rows: Vec<_> = self
                    .sequences
                    .iter()
                    .filter(|(k, _)| k.camera == camera)
                    .map(|(_, &r)| r)
                    .collect();
                if rows.is_empty() {
                    return Err(Error::UnknownCamera(camera));
                }
                rows
            }
        };
        if !self.config.appearance_embeddings {
            return Ok(None);
        }
        let w = 1.0 / rows.len() as f64;
        Ok(Some(rows.iter().map(|&r| (self.layout.embeddings + r * d, w)).collect()))
    }

    fn context_input(&self, direction: &Vec3, appearance: Appearance) -> Result<(Vec<f64>, Option<Vec<(usize, f64)>>)> {
        let c = &self.config;
        let mut ctx = vec![0.0; c.context_dim()];
        encoding::positional_encode_into(&[direction.x, direction.y, direction.z], c.dir_frequencies, &mut ctx[..6 * c.dir_frequencies]);
        let taps = self.embedding_taps(appearance)?;
        if let Some(t) = &taps {
            tape::gather_forward(&self.params, t, t.len(), c.embedding_dim, &mut ctx[6 * c.dir_frequencies..]);
        }
        Ok((ctx, taps))
    }

    pub fn ray_context(&self, direction: &Vec3, appearance: Appearance) -> Result<RayContext> {
        let (ctx, _) = self.context_input(direction, appearance)?;
        let mut base = vec![0.0; self.config.hidden_width];
        tape::linear_forward(&self.params, self.layout.color_ctx, self.layout.color_geo.bias, &ctx, &mut base);
        Ok(RayContext { base })
    }

    fn grid_taps(&self, p: &Vec3, taps: &mut Vec<(usize, f64)>) {
        taps.clear();
        let (lo, hi) = self.config.grid_domain();
        let f = self.config.grid_features;
        for level in &self.layout.grids {
            let r = level.resolution;
            let n = r + 1;
            let mut cell = [0usize; 3];
            let mut frac = [0.0; 3];
            for a in 0..3 {
                let g = ((p[a] - lo) / (hi - lo) * r as f64).clamp(0.0, r as f64);
                let i = (g.floor() as usize).min(r - 1);
                cell[a] = i;
                frac[a] = g - i as f64;
            }
            for corner in 0..8 {
                let (dx, dy, dz) = (corner & 1, (corner >> 1) & 1, (corner >> 2) & 1);
                let w = (if dx == 1 { frac[0] } else { 1.0 - frac[0] })
                    * (if dy == 1 { frac[1] } else { 1.0 - frac[1] })
                    * (if dz == 1 { frac[2] } else { 1.0 - frac[2] });
                let idx = ((cell[2] + dz) * n + cell[1] + dy) * n + cell[0] + dx;
                taps.push((level.offset + idx * f, w));
            }
        }
    }

    fn density_input(&self, x: &Vec3, scratch: &mut QueryScratch) {
        let c = &self.config;
        let p = self.normalize(x);
        let mut taps = std::mem::take(&mut scratch.taps);
        self.grid_taps(&p, &mut taps);
        let n_grid = c.grid_resolutions.len() * c.grid_features;
        scratch.input.resize(c.density_input_dim(), 0.0);
        tape::gather_forward(&self.params, &taps, 8, c.grid_features, &mut scratch.input[..n_grid]);
        encoding::positional_encode_into(&[p.x, p.y, p.z], c.pos_frequencies, &mut scratch.input[n_grid..]);
        scratch.taps = taps;
    }

    /// Runs the density head; leaves its raw output in `scratch.a`.
    fn density_forward(&self, x: &Vec3, scratch: &mut QueryScratch) -> f64 {
        self.density_input(x, scratch);
        let QueryScratch { input, a, b, .. } = scratch;
        std::mem::swap(a, input);
        let n = self.layout.density.len();
        for (i, l) in self.layout.density.iter().enumerate() {
            b.resize(l.n_out, 0.0);
            tape::linear_forward(&self.params, l.weight, l.bias, a, b);
            if i + 1 < n {
                b.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            std::mem::swap(a, b);
        }
        tape::softplus(a[0] + self.config.density_bias)
    }

    /// Density only; independent of direction and appearance.
    pub fn density(&self, x: &Vec3, scratch: &mut QueryScratch) -> f64 {
        self.density_forward(x, scratch)
    }

    /// `(σ, rgb)` at `x` for a ray whose context was prepared by
    /// [`RadianceField::ray_context`].
    pub fn query_with(&self, x: &Vec3, ctx: &RayContext, scratch: &mut QueryScratch) -> (f64, [f64; 3]) {
        let sigma = self.density_forward(x, scratch);
        let QueryScratch { input, a, b, .. } = scratch;
        let geo = &a[1..];
        let cg = self.layout.color_geo;
        input.resize(cg.n_out, 0.0);
        for o in 0..cg.n_out {
            let row = &self.params[cg.weight + o * cg.n_in..cg.weight + (o + 1) * cg.n_in];
            let mut acc = ctx.base[o];
            for (w, g) in row.iter().zip(geo) {
                acc += w * g;
            }
            input[o] = acc.max(0.0);
        }
        let n = self.layout.color.len();
        for (i, l) in self.layout.color.iter().enumerate() {
            b.resize(l.n_out, 0.0);
            tape::linear_forward(&self.params, l.weight, l.bias, input, b);
            if i + 1 < n {
                b.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            std::mem::swap(input, b);
        }
        let rgb = [tape::sigmoid(input[0]), tape::sigmoid(input[1]), tape::sigmoid(input[2])];
        (sigma, rgb)
    }

    pub fn query(&self, x: &Vec3, direction: &Vec3, appearance: Appearance) -> Result<(f64, [f64; 3])> {
        let ctx = self.ray_context(direction, appearance)?;
        Ok(self.query_with(x, &ctx, &mut QueryScratch::default()))
    }

    /// Records the per-ray colour context on `tape`.
    pub fn ray_context_on_tape(&self, tape: &mut Tape, direction: &Vec3, appearance: Appearance) -> Result<NodeId> {
        let c = &self.config;
        let (ctx, taps) = self.context_input(direction, appearance)?;
        let dir = tape.constant(&ctx[..6 * c.dir_frequencies]);
        let emb = match taps {
            Some(t) => tape.gather(&self.params, &t, t.len(), c.embedding_dim),
            None => tape.constant(&ctx[6 * c.dir_frequencies..]),
        };
        let input = tape.concat(&[dir, emb]);
        Ok(tape.linear(&self.params, input, self.layout.color_ctx, self.layout.color_geo.bias, c.hidden_width))
    }

    /// Records the density head at `x`; returns its raw output node.
    fn density_head_on_tape(&self, tape: &mut Tape, x: &Vec3, scratch: &mut QueryScratch) -> NodeId {
        let c = &self.config;
        let p = self.normalize(x);
        self.grid_taps(&p, &mut scratch.taps);
        let grid = tape.gather(&self.params, &scratch.taps, 8, c.grid_features);
        scratch.input.resize(6 * c.pos_frequencies, 0.0);
        encoding::positional_encode_into(&[p.x, p.y, p.z], c.pos_frequencies, &mut scratch.input);
        let enc = tape.constant(&scratch.input);
        let mut h = tape.concat(&[grid, enc]);
        let n = self.layout.density.len();
        for (i, l) in self.layout.density.iter().enumerate() {
            h = tape.linear(&self.params, h, l.weight, l.bias, l.n_out);
            if i + 1 < n {
                h = tape.relu(h);
            }
        }
        h
    }

    /// Records `σ(x)` only.
    pub fn density_on_tape(&self, tape: &mut Tape, x: &Vec3, scratch: &mut QueryScratch) -> NodeId {
        let h = self.density_head_on_tape(tape, x, scratch);
        let raw = tape.slice(h, 0, 1);
        tape.softplus(raw, self.config.density_bias)
    }

    /// Records one sample; returns `(σ, rgb)` nodes.
    pub fn sample_on_tape(&self, tape: &mut Tape, x: &Vec3, ctx: NodeId, scratch: &mut QueryScratch) -> (NodeId, NodeId) {
        let c = &self.config;
        let h = self.density_head_on_tape(tape, x, scratch);
        let raw_sigma = tape.slice(h, 0, 1);
        let sigma = tape.softplus(raw_sigma, c.density_bias);
        let geo = tape.slice(h, 1, c.geo_features);
        let mut g = tape.affine(&self.params, geo, self.layout.color_geo.weight, ctx);
        g = tape.relu(g);
        let n = self.layout.color.len();
        for (i, l) in self.layout.color.iter().enumerate() {
            g = tape.linear(&self.params, g, l.weight, l.bias, l.n_out);
            if i + 1 < n {
                g = tape.relu(g);
            }
        }
        let rgb = tape.sigmoid(g);
        (sigma, rgb)
    }
}
