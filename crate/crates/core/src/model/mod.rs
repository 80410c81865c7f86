//! Miniature query-based mask-classification network with per-class QCR adapters.
//!
//! Data path: strided conv backbone -> bilinear pixel decoder (per-pixel
//! embeddings) -> `L` decoder layers (cross-attention to a low-resolution
//! memory, self-attention, feed-forward) starting from learned queries ->
//! shared class head and a mask head dotted with the pixel embeddings.
//! When QCR is enabled, queries whose penultimate-layer argmax class is an
//! incremental class are refined by that class's low-rank adapter before the
//! last decoder layer.

mod geometry;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::domain::{argmax_over, ChannelLayout, ClassId, ImageSample, ModelOutput};
use crate::error::{LabError, Result};
use crate::tensor::Matrix;

pub use geometry::Geometry;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub n_queries: usize,
    pub query_dim: usize,
    pub decoder_layers: usize,
    pub max_classes: usize,
    pub adapter_rank: usize,
    pub backbone_channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_queries: 20,
            query_dim: 64,
            decoder_layers: 3,
            max_classes: 10,
            adapter_rank: 16,
            backbone_channels: 16,
            height: 24,
            width: 24,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(LabError::InvalidArgument(m.to_string()));
        if self.decoder_layers < 2 {
            return bad("decoder_layers must be >= 2");
        }
        if self.adapter_rank == 0 {
            return bad("adapter_rank must be >= 1");
        }
        if self.n_queries == 0 || self.query_dim == 0 || self.backbone_channels == 0 {
            return bad("n_queries, query_dim and backbone_channels must be positive");
        }
        if self.max_classes == 0 || self.max_classes >= u16::MAX as usize {
            return bad("max_classes out of range");
        }
        if self.height < crate::domain::MIN_IMAGE_SIDE || self.width < crate::domain::MIN_IMAGE_SIDE
        {
            return bad("image sides must be >= 8");
        }
        Ok(())
    }

    pub fn channels(&self) -> usize {
        self.max_classes + 2
    }
}

/// Parameter count of one QCR adapter: `W1` (D x r) plus `W2` (r x D).
pub fn adapter_parameter_count(query_dim: usize, rank: usize) -> usize {
    2 * query_dim * rank
}

/// Named parameter array stored in single precision.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
    pub trainable: bool,
}

impl Param {
    fn zeros(name: impl Into<String>, rows: usize, cols: usize) -> Self {
        Param {
            name: name.into(),
            rows,
            cols,
            data: vec![0.0; rows * cols],
            trainable: true,
        }
    }

    fn random(
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        std: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let normal = Normal::new(0.0, std).expect("positive std");
        Param {
            name: name.into(),
            rows,
            cols,
            data: (0..rows * cols).map(|_| normal.sample(rng) as f32).collect(),
            trainable: true,
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn to_matrix(&self) -> Matrix {
        Matrix::from_vec(self.rows, self.cols, self.data.iter().map(|&v| v as f64).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QcrAdapter {
    pub class_id: ClassId,
    pub w1: Param,
    pub w2: Param,
    pub frozen: bool,
}

impl QcrAdapter {
    pub fn parameter_count(&self) -> usize {
        self.w1.len() + self.w2.len()
    }

    /// The rank-<=r update matrix `W1 * W2`.
    pub fn update_matrix(&self) -> Matrix {
        self.w1.to_matrix().matmul(&self.w2.to_matrix())
    }
}

#[derive(Clone, Debug)]
pub struct ModelState {
    pub config: ModelConfig,
    /// Non-adapter parameters in a fixed order (see [`ModelState::new`]).
    pub params: Vec<Param>,
    pub adapters: BTreeMap<ClassId, QcrAdapter>,
    pub step: usize,
    /// `C^1..C^t` in step order.
    pub step_classes: Vec<Vec<ClassId>>,
    geometry: Arc<Geometry>,
}

impl PartialEq for ModelState {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.params == other.params
            && self.adapters == other.adapters
            && self.step == other.step
            && self.step_classes == other.step_classes
    }
}

pub const QUERY_EMBED: &str = "query.embed";

/// Indices into `params` resolved once per forward pass.
struct Layout {
    conv: [(usize, usize); 3],
    skip: (usize, usize),
    fuse: (usize, usize),
    out: (usize, usize),
    mem: (usize, usize),
    pos: usize,
    query: usize,
    decoder: Vec<DecoderParams>,
    class_head: (usize, usize),
    mask_head: usize,
}

struct DecoderParams {
    cross: [usize; 4],
    selfa: [usize; 4],
    ffn: [usize; 4],
}

impl ModelState {
    /// Fresh step-0 model (no active classes) with seeded initialization.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let geometry = Arc::new(Geometry::new(
            config.height,
            config.width,
            config.backbone_channels,
            2 * config.backbone_channels,
        ));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (c1, c2, d) = (
            config.backbone_channels,
            2 * config.backbone_channels,
            config.query_dim,
        );
        let he = |fan_in: usize| (2.0 / fan_in as f64).sqrt();
        let xavier = |fan_in: usize, fan_out: usize| (2.0 / (fan_in + fan_out) as f64).sqrt();
        let mut params = Vec::new();
        let mut linear = |params: &mut Vec<Param>, name: &str, i: usize, o: usize, relu: bool| {
            let std = if relu { he(i) } else { xavier(i, o) };
            params.push(Param::random(format!("{name}.w"), i, o, std, &mut rng));
            params.push(Param::zeros(format!("{name}.b"), 1, o));
        };
        linear(&mut params, "backbone.conv1", 27, c1, true);
        linear(&mut params, "backbone.conv2", 9 * c1, c2, true);
        linear(&mut params, "backbone.conv3", 9 * c2, c2, true);
        linear(&mut params, "pixel.skip", 27, c1, true);
        linear(&mut params, "pixel.fuse", c1 + c2, d, true);
        linear(&mut params, "pixel.out", d, d, false);
        linear(&mut params, "memory.proj", c2, d, false);
        let mem_tokens = geometry.memory_tokens();
        params.push(Param::random("memory.pos", mem_tokens, d, 0.5, &mut rng));
        params.push(Param::random(QUERY_EMBED, config.n_queries, d, 1.0, &mut rng));
        for l in 0..config.decoder_layers {
            for block in ["cross", "self"] {
                for p in ["q", "k", "v", "o"] {
                    params.push(Param::random(
                        format!("decoder.{l}.{block}.{p}"),
                        d,
                        d,
                        xavier(d, d),
                        &mut rng,
                    ));
                }
            }
            params.push(Param::random(format!("decoder.{l}.ffn.w1"), d, 2 * d, he(d), &mut rng));
            params.push(Param::zeros(format!("decoder.{l}.ffn.b1"), 1, 2 * d));
            params.push(Param::random(
                format!("decoder.{l}.ffn.w2"),
                2 * d,
                d,
                xavier(2 * d, d),
                &mut rng,
            ));
            params.push(Param::zeros(format!("decoder.{l}.ffn.b2"), 1, d));
        }
        params.push(Param::random(
            "head.class.w",
            d,
            config.channels(),
            xavier(d, config.channels()),
            &mut rng,
        ));
        params.push(Param::zeros("head.class.b", 1, config.channels()));
        params.push(Param::random("head.mask.w", d, d, xavier(d, d), &mut rng));

        let state = ModelState {
            config,
            params,
            adapters: BTreeMap::new(),
            step: 0,
            step_classes: Vec::new(),
            geometry,
        };
        state.layout()?;
        Ok(state)
    }

    /// Reassembles a state from stored parts (checkpoint loading).
    pub fn from_parts(
        config: ModelConfig,
        params: Vec<Param>,
        adapters: BTreeMap<ClassId, QcrAdapter>,
        step: usize,
        step_classes: Vec<Vec<ClassId>>,
    ) -> Result<Self> {
        config.validate()?;
        let reference = ModelState::new(config.clone(), 0)?;
        if params.len() != reference.params.len() {
            return Err(LabError::malformed(
                "model parameters",
                format!("{} arrays, expected {}", params.len(), reference.params.len()),
            ));
        }
        for (p, r) in params.iter().zip(&reference.params) {
            if p.name != r.name || p.rows != r.rows || p.cols != r.cols || p.len() != r.len() {
                return Err(LabError::malformed(
                    "model parameters",
                    format!("array {} ({}x{}) does not match {} ({}x{})", p.name, p.rows, p.cols, r.name, r.rows, r.cols),
                ));
            }
        }
        let d = config.query_dim;
        for a in adapters.values() {
            if (a.w1.rows, a.w1.cols, a.w2.rows, a.w2.cols) != (d, config.adapter_rank, config.adapter_rank, d) {
                return Err(LabError::malformed(
                    "adapter",
                    format!("adapter for class {} has wrong shape", a.class_id),
                ));
            }
        }
        if step != step_classes.len() {
            return Err(LabError::malformed(
                "model state",
                format!("step {step} with {} class groups", step_classes.len()),
            ));
        }
        Ok(ModelState {
            geometry: reference.geometry,
            config,
            params,
            adapters,
            step,
            step_classes,
        })
    }

    fn index(&self, name: &str) -> Result<usize> {
        self.params
            .iter()
            .position(|p| p.name == name)
            .ok_or_else(|| LabError::malformed("model parameters", format!("missing {name}")))
    }

    fn pair(&self, name: &str) -> Result<(usize, usize)> {
        Ok((self.index(&format!("{name}.w"))?, self.index(&format!("{name}.b"))?))
    }

    fn layout(&self) -> Result<Layout> {
        let decoder = (0..self.config.decoder_layers)
            .map(|l| {
                let four = |block: &str, names: [&str; 4]| -> Result<[usize; 4]> {
                    let mut out = [0; 4];
                    for (o, n) in out.iter_mut().zip(names) {
                        *o = self.index(&format!("decoder.{l}.{block}.{n}"))?;
                    }
                    Ok(out)
                };
                Ok(DecoderParams {
                    cross: four("cross", ["q", "k", "v", "o"])?,
                    selfa: four("self", ["q", "k", "v", "o"])?,
                    ffn: four("ffn", ["w1", "b1", "w2", "b2"])?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Layout {
            conv: [
                self.pair("backbone.conv1")?,
                self.pair("backbone.conv2")?,
                self.pair("backbone.conv3")?,
            ],
            skip: self.pair("pixel.skip")?,
            fuse: self.pair("pixel.fuse")?,
            out: self.pair("pixel.out")?,
            mem: self.pair("memory.proj")?,
            pos: self.index("memory.pos")?,
            query: self.index(QUERY_EMBED)?,
            decoder,
            class_head: self.pair("head.class")?,
            mask_head: self.index("head.mask.w")?,
        })
    }

    pub fn layout_channels(&self) -> ChannelLayout {
        ChannelLayout::with_classes(
            self.config.max_classes,
            self.step_classes.iter().flatten().copied(),
        )
    }

    /// Shared class head applied to arbitrary queries, inactive channels masked.
    pub fn class_logits_for(&self, queries: &Matrix) -> Result<Matrix> {
        let lay = self.layout()?;
        let w = self.params[lay.class_head.0].to_matrix();
        let b = &self.params[lay.class_head.1].data;
        if queries.cols != w.rows {
            return Err(LabError::DimensionMismatch(format!(
                "queries have {} columns, class head expects {}",
                queries.cols, w.rows
            )));
        }
        let mut logits = queries.matmul(&w);
        for r in 0..logits.rows {
            for (x, &bv) in logits.row_mut(r).iter_mut().zip(b) {
                *x += bv as f64;
            }
        }
        self.layout_channels().mask_logits(&mut logits);
        Ok(logits)
    }

    /// Classes introduced after the first step, `C^{2:t}`.
    pub fn incremental_classes(&self) -> BTreeSet<ClassId> {
        self.step_classes.iter().skip(1).flatten().copied().collect()
    }

    pub fn seen_classes(&self) -> BTreeSet<ClassId> {
        self.step_classes.iter().flatten().copied().collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(Param::len).sum::<usize>()
            + self.adapters.values().map(QcrAdapter::parameter_count).sum::<usize>()
    }

    /// All parameters in canonical order: core arrays, then `(W1, W2)` per adapter class.
    pub fn all_params(&self) -> Vec<&Param> {
        let mut out: Vec<&Param> = self.params.iter().collect();
        for a in self.adapters.values() {
            out.push(&a.w1);
            out.push(&a.w2);
        }
        out
    }

    pub fn all_params_mut(&mut self) -> Vec<&mut Param> {
        let mut out: Vec<&mut Param> = self.params.iter_mut().collect();
        for a in self.adapters.values_mut() {
            out.push(&mut a.w1);
            out.push(&mut a.w2);
        }
        out
    }

    /// Starts step `t`: returns the new trainable state and, for `t >= 2`, the
    /// frozen copy of the previous model.
    pub fn begin_step(
        &self,
        t: usize,
        new_classes: &BTreeSet<ClassId>,
        rng: &mut impl Rng,
    ) -> Result<(ModelState, Option<ModelState>)> {
        if t != self.step + 1 {
            return Err(LabError::InvalidArgument(format!(
                "begin_step({t}) on a model at step {}",
                self.step
            )));
        }
        if new_classes.is_empty() {
            return Err(LabError::InvalidArgument("step introduces no classes".into()));
        }
        let seen = self.seen_classes();
        let overlap: Vec<u16> = new_classes.intersection(&seen).map(|c| c.0).collect();
        if !overlap.is_empty() {
            return Err(LabError::OverlappingClasses(overlap));
        }
        if let Some(c) = new_classes
            .iter()
            .find(|c| c.0 == 0 || c.0 as usize > self.config.max_classes)
        {
            return Err(LabError::UnknownClass(c.0));
        }

        let old = (self.step >= 1).then(|| self.clone());
        let mut next = self.clone();
        next.step = t;
        next.step_classes.push(new_classes.iter().copied().collect());
        for p in &mut next.params {
            p.trainable = !(t > 1 && p.name == QUERY_EMBED);
        }
        for a in next.adapters.values_mut() {
            a.frozen = true;
        }
        if t > 1 {
            let (d, r) = (self.config.query_dim, self.config.adapter_rank);
            for &c in new_classes {
                let mut w1 = Param::random(format!("adapter.{c}.w1"), d, r, 1.0 / (d as f64).sqrt(), rng);
                let mut w2 = Param::zeros(format!("adapter.{c}.w2"), r, d);
                w1.trainable = true;
                w2.trainable = true;
                next.adapters.insert(
                    c,
                    QcrAdapter {
                        class_id: c,
                        w1,
                        w2,
                        frozen: false,
                    },
                );
            }
        }
        next.sync_adapter_trainability();
        Ok((next, old))
    }

    pub(crate) fn sync_adapter_trainability(&mut self) {
        for a in self.adapters.values_mut() {
            a.w1.trainable = !a.frozen;
            a.w2.trainable = !a.frozen;
        }
    }

    /// Inference-only forward pass.
    pub fn forward(&self, image: &ImageSample, use_qcr: bool) -> Result<ModelOutput> {
        Ok(self.run(image, use_qcr, false)?.output)
    }

    /// Forward pass recorded on a tape with trainable parameters as gradient leaves.
    pub fn forward_for_training(&self, image: &ImageSample, use_qcr: bool) -> Result<TapedForward> {
        self.run(image, use_qcr, true)
    }

    fn run(&self, image: &ImageSample, use_qcr: bool, grads: bool) -> Result<TapedForward> {
        let (h, w) = (self.config.height, self.config.width);
        if image.height != h || image.width != w || image.pixels.len() != 3 * h * w {
            return Err(LabError::DimensionMismatch(format!(
                "image {} is {}x{}, model expects {h}x{w}",
                image.sample_id, image.height, image.width
            )));
        }
        let lay = self.layout()?;
        let geo = &self.geometry;
        let d = self.config.query_dim;
        let n = self.config.n_queries;
        let mut g = Graph::new();

        let all = self.all_params();
        let param_vars: Vec<Var> = all
            .iter()
            .map(|p| g.leaf(p.to_matrix(), grads && p.trainable))
            .collect();
        let pv = |i: usize| param_vars[i];
        let adapter_base = self.params.len();
        let adapter_vars: BTreeMap<ClassId, (Var, Var)> = self
            .adapters
            .keys()
            .enumerate()
            .map(|(i, c)| (*c, (param_vars[adapter_base + 2 * i], param_vars[adapter_base + 2 * i + 1])))
            .collect();

        let input = Matrix::from_vec(
            h * w,
            3,
            image.pixels.iter().map(|&b| b as f64 / 255.0).collect(),
        );
        let x = g.constant(input);

        let conv = |g: &mut Graph, src: Var, conv: &geometry::ConvIndex, (wi, bi): (usize, usize)| {
            let cols = g.value(pv(wi)).rows;
            let patches = g.gather(src, conv.index.clone(), conv.out_pixels, cols);
            let y = g.matmul(patches, pv(wi));
            let y = g.add_row(y, pv(bi));
            g.relu(y)
        };
        let c1 = conv(&mut g, x, &geo.conv1, lay.conv[0]);
        let c2 = conv(&mut g, c1, &geo.conv2, lay.conv[1]);
        let c3 = conv(&mut g, c2, &geo.conv3, lay.conv[2]);
        let skip = conv(&mut g, x, &geo.full, lay.skip);
        let up = g.row_mix(c3, geo.upsample.clone());
        let cat = g.concat_cols(up, skip);
        let fused = g.matmul(cat, pv(lay.fuse.0));
        let fused = g.add_row(fused, pv(lay.fuse.1));
        let fused = g.relu(fused);
        let pixel = g.matmul(fused, pv(lay.out.0));
        let pixel = g.add_row(pixel, pv(lay.out.1));

        let mem = g.matmul(c3, pv(lay.mem.0));
        let mem = g.add_row(mem, pv(lay.mem.1));
        let mem = g.add(mem, pv(lay.pos));

        let layout = self.layout_channels();
        let active = layout.active_channels();
        let incremental = self.incremental_classes();
        let scale = 1.0 / (d as f64).sqrt();
        let attend = |g: &mut Graph, q: Var, kv: Var, p: [usize; 4]| {
            let qq = g.matmul(q, pv(p[0]));
            let kk = g.matmul(kv, pv(p[1]));
            let vv = g.matmul(kv, pv(p[2]));
            let s = g.matmul_bt(qq, kk);
            let s = g.scale(s, scale);
            let a = g.softmax_rows(s);
            let o = g.matmul(a, vv);
            let o = g.matmul(o, pv(p[3]));
            let r = g.add(q, o);
            g.layer_norm(r)
        };

        let mut q = pv(lay.query);
        let mut queries_per_layer = Vec::with_capacity(self.config.decoder_layers);
        let mut refined_flags = vec![false; n];
        for (l, dp) in lay.decoder.iter().enumerate() {
            if l + 1 == self.config.decoder_layers && use_qcr && !incremental.is_empty() {
                let (refined, flags) =
                    self.qcr_on_tape(&mut g, q, &lay, &active, &incremental, &adapter_vars, &param_vars)?;
                q = refined;
                refined_flags = flags;
            }
            q = attend(&mut g, q, mem, dp.cross);
            q = attend(&mut g, q, q, dp.selfa);
            let hdn = g.matmul(q, pv(dp.ffn[0]));
            let hdn = g.add_row(hdn, pv(dp.ffn[1]));
            let hdn = g.relu(hdn);
            let f = g.matmul(hdn, pv(dp.ffn[2]));
            let f = g.add_row(f, pv(dp.ffn[3]));
            let r = g.add(q, f);
            q = g.layer_norm(r);
            queries_per_layer.push(g.value(q).clone());
        }
        let logits = g.matmul(q, pv(lay.class_head.0));
        let logits = g.add_row(logits, pv(lay.class_head.1));
        let emb = g.matmul(q, pv(lay.mask_head));
        let masks = g.matmul_bt(emb, pixel);

        let mut class_logits = g.value(logits).clone();
        layout.mask_logits(&mut class_logits);
        let output = ModelOutput {
            queries_per_layer,
            class_logits,
            mask_logits: g.value(masks).clone(),
            refined_flags,
            height: h,
            width: w,
        };
        Ok(TapedForward {
            graph: g,
            class_logits: logits,
            mask_logits: masks,
            final_queries: q,
            param_vars,
            output,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn qcr_on_tape(
        &self,
        g: &mut Graph,
        q: Var,
        lay: &Layout,
        active: &[usize],
        incremental: &BTreeSet<ClassId>,
        adapter_vars: &BTreeMap<ClassId, (Var, Var)>,
        param_vars: &[Var],
    ) -> Result<(Var, Vec<bool>)> {
        // routing logits from the shared class head; no gradient flows through argmax
        let (wc, bc) = (
            g.value(param_vars[lay.class_head.0]).clone(),
            g.value(param_vars[lay.class_head.1]).clone(),
        );
        let mut logits = g.value(q).matmul(&wc);
        for r in 0..logits.rows {
            for (x, b) in logits.row_mut(r).iter_mut().zip(&bc.data) {
                *x += b;
            }
        }
        let routes = route_queries(&logits, active, incremental);
        let mut flags = vec![false; logits.rows];
        let mut out = q;
        for (class, rows) in routes {
            let &(w1, w2) = adapter_vars
                .get(&class)
                .ok_or(LabError::MissingAdapter(class.0))?;
            for &r in &rows {
                flags[r] = true;
            }
            let sel = g.select_rows(q, rows.clone());
            let low = g.matmul(sel, w1);
            let delta = g.matmul(low, w2);
            let placed = g.scatter_rows(delta, rows, logits.rows);
            out = g.add(out, placed);
        }
        Ok((out, flags))
    }
}

/// Argmax routing over active channels (no-obj included, lowest index on ties):
/// returns the query rows selected for each incremental class.
pub fn route_queries(
    class_logits: &Matrix,
    active: &[usize],
    incremental: &BTreeSet<ClassId>,
) -> BTreeMap<ClassId, Vec<usize>> {
    let mut routes: BTreeMap<ClassId, Vec<usize>> = BTreeMap::new();
    for r in 0..class_logits.rows {
        if let Some(c) = argmax_over(class_logits.row(r), active) {
            if c >= 1 && c <= u16::MAX as usize {
                let class = ClassId(c as u16);
                if incremental.contains(&class) {
                    routes.entry(class).or_default().push(r);
                }
            }
        }
    }
    routes
}

/// Adapter refinement on plain matrices: `q + q * W1 * W2` for routed rows.
pub fn qcr_refine(
    queries: &Matrix,
    class_logits: &Matrix,
    layout: &ChannelLayout,
    incremental: &BTreeSet<ClassId>,
    adapters: &BTreeMap<ClassId, QcrAdapter>,
) -> Result<(Matrix, Vec<bool>)> {
    if queries.rows != class_logits.rows {
        return Err(LabError::DimensionMismatch(format!(
            "{} queries but {} logit rows",
            queries.rows, class_logits.rows
        )));
    }
    let routes = route_queries(class_logits, &layout.active_channels(), incremental);
    let mut out = queries.clone();
    let mut flags = vec![false; queries.rows];
    for (class, rows) in routes {
        let adapter = adapters.get(&class).ok_or(LabError::MissingAdapter(class.0))?;
        let (w1, w2) = (adapter.w1.to_matrix(), adapter.w2.to_matrix());
        for r in rows {
            let row = Matrix::from_vec(1, queries.cols, queries.row(r).to_vec());
            let delta = row.matmul(&w1).matmul(&w2);
            for (o, d) in out.row_mut(r).iter_mut().zip(&delta.data) {
                *o += d;
            }
            flags[r] = true;
        }
    }
    Ok((out, flags))
}

/// A forward pass kept on its tape for backpropagation.
pub struct TapedForward {
    pub graph: Graph,
    pub class_logits: Var,
    pub mask_logits: Var,
    pub final_queries: Var,
    /// One leaf per entry of [`ModelState::all_params`].
    pub param_vars: Vec<Var>,
    pub output: ModelOutput,
}

impl TapedForward {
    /// Backpropagates upstream gradients of the three heads; returns one
    /// gradient per parameter in canonical order (`None` for frozen ones).
    pub fn backward(
        &self,
        d_class_logits: &Matrix,
        d_mask_logits: &Matrix,
        d_final_queries: Option<&Matrix>,
    ) -> Vec<Option<Matrix>> {
        let mut seeds = vec![
            (self.class_logits, d_class_logits),
            (self.mask_logits, d_mask_logits),
        ];
        if let Some(dq) = d_final_queries {
            seeds.push((self.final_queries, dq));
        }
        let mut grads = self.graph.backward(&seeds);
        self.param_vars.iter().map(|v| grads.take(*v)).collect()
    }
}
