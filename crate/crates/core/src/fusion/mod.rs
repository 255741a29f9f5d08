//! BEV construction and fusion: frustum-to-grid pooling, the pose-residual
//! alignment layer, and semantic-gated blending of ego and helper rasters.
//!
//! The alignment layer predicts per-cell sampling offsets and tap weights
//! from a query/source raster pair and adds the resampled values back onto
//! the query as a residual. All-zero parameters make it an exact identity,
//! which is the reference point every fitted correction is measured against.

pub mod decode;

pub use decode::{decode_map, DECODE_THRESHOLD, MIN_COMPONENT_CELLS};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{BevGridSpec, BevRaster};
use crate::layers::ConvLayer;

// ── Frustum pooling ─────────────────────────────────────────────────────────

/// Per-camera feature frustum: `rays` image columns, each with `bins` depth
/// cells holding a feature vector and a confidence.
#[derive(Debug, Clone, PartialEq)]
pub struct FrustumTensor {
    pub rays: usize,
    pub bins: usize,
    pub channels: usize,
    /// Feature values, `[ray][bin][channel]` flattened row-major.
    pub features: Vec<f64>,
    /// Pooling confidence per (ray, bin).
    pub confidence: Vec<f64>,
    /// Target grid cell per (ray, bin); `None` falls outside the grid.
    pub cells: Vec<Option<(usize, usize)>>,
}

impl FrustumTensor {
    pub fn zeros(rays: usize, bins: usize, channels: usize) -> Self {
        FrustumTensor {
            rays,
            bins,
            channels,
            features: vec![0.0; rays * bins * channels],
            confidence: vec![0.0; rays * bins],
            cells: vec![None; rays * bins],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.rays * self.bins;
        if self.features.len() != n * self.channels
            || self.confidence.len() != n
            || self.cells.len() != n
        {
            return Err(Error::ShapeMismatch(format!(
                "frustum buffers disagree with {} rays x {} bins x {} channels",
                self.rays, self.bins, self.channels
            )));
        }
        if self.confidence.iter().any(|c| !c.is_finite() || *c < 0.0) {
            return Err(Error::InvalidInput(
                "frustum confidences must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }

    pub fn feature(&self, ray: usize, bin: usize, c: usize) -> f64 {
        self.features[(ray * self.bins + bin) * self.channels + c]
    }

    pub fn feature_mut(&mut self, ray: usize, bin: usize, c: usize) -> &mut f64 {
        &mut self.features[(ray * self.bins + bin) * self.channels + c]
    }
}

/// Confidence-weighted average pooling: every frustum cell that lands in a
/// grid cell contributes, weighted by its confidence.
pub fn soft_lss_pool(frustum: &FrustumTensor, spec: &BevGridSpec) -> Result<BevRaster> {
    frustum.validate()?;
    let mut out = BevRaster::zeros(*spec, frustum.channels);
    let mut weight = vec![0.0f64; spec.h() * spec.w()];
    for ray in 0..frustum.rays {
        for bin in 0..frustum.bins {
            let idx = ray * frustum.bins + bin;
            let Some((i, j)) = frustum.cells[idx] else {
                continue;
            };
            let w = frustum.confidence[idx];
            if w <= 0.0 {
                continue;
            }
            weight[i * spec.w() + j] += w;
            for c in 0..frustum.channels {
                let v = out.get(i, j, c) + w * frustum.feature(ray, bin, c);
                out.set(i, j, c, v);
            }
        }
    }
    for i in 0..spec.h() {
        for j in 0..spec.w() {
            let w = weight[i * spec.w() + j];
            if w > 0.0 {
                for c in 0..frustum.channels {
                    let v = out.get(i, j, c) / w;
                    out.set(i, j, c, v);
                }
            }
        }
    }
    Ok(out)
}

/// Winner-take-all pooling: each grid cell copies the features of the single
/// most confident frustum cell that lands in it; confidence ties resolve to
/// the lower (ray, bin) index. The extra last channel carries the winning
/// confidence, so output features are never a mixture.
pub fn hard_lss_pool(frustum: &FrustumTensor, spec: &BevGridSpec) -> Result<BevRaster> {
    frustum.validate()?;
    let mut out = BevRaster::zeros(*spec, frustum.channels + 1);
    let mut best: Vec<Option<(f64, usize)>> = vec![None; spec.h() * spec.w()];
    for ray in 0..frustum.rays {
        for bin in 0..frustum.bins {
            let idx = ray * frustum.bins + bin;
            let Some((i, j)) = frustum.cells[idx] else {
                continue;
            };
            let w = frustum.confidence[idx];
            let slot = &mut best[i * spec.w() + j];
            // Strict > keeps the earliest (ray, bin) on ties.
            let take = match slot {
                None => true,
                Some((bw, _)) => w > *bw,
            };
            if take {
                *slot = Some((w, idx));
            }
        }
    }
    for i in 0..spec.h() {
        for j in 0..spec.w() {
            if let Some((w, idx)) = best[i * spec.w() + j] {
                let (ray, bin) = (idx / frustum.bins, idx % frustum.bins);
                for c in 0..frustum.channels {
                    out.set(i, j, c, frustum.feature(ray, bin, c));
                }
                out.set(i, j, frustum.channels, w);
            }
        }
    }
    Ok(out)
}

// ── Alignment layer ─────────────────────────────────────────────────────────

/// Parameters of the residual alignment layer: `n_off` sampling taps, each
/// with a learned 2-D offset (in cells) and a scalar weight, both predicted
/// affinely from the query/source cell pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvaParams {
    pub n_off: usize,
    pub channels: usize,
    /// Offset head: `[n_off][2][2 * channels]` weights over [query, source].
    pub offset_weights: Vec<f64>,
    /// Offset head biases, `[n_off][2]`.
    pub offset_bias: Vec<f64>,
    /// Weight head: `[n_off][2 * channels]`.
    pub weight_weights: Vec<f64>,
    /// Weight head biases, `[n_off]`.
    pub weight_bias: Vec<f64>,
}

impl CvaParams {
    /// All-zero parameters: no offsets, zero tap weights, so the layer
    /// returns the query unchanged.
    pub fn identity(n_off: usize, channels: usize) -> Self {
        CvaParams {
            n_off,
            channels,
            offset_weights: vec![0.0; n_off * 2 * 2 * channels],
            offset_bias: vec![0.0; n_off * 2],
            weight_weights: vec![0.0; n_off * 2 * channels],
            weight_bias: vec![0.0; n_off],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_off == 0 {
            return Err(Error::InvalidParameter(
                "alignment layer needs at least one tap".into(),
            ));
        }
        let d = 2 * self.channels;
        if self.offset_weights.len() != self.n_off * 2 * d
            || self.offset_bias.len() != self.n_off * 2
            || self.weight_weights.len() != self.n_off * d
            || self.weight_bias.len() != self.n_off
        {
            return Err(Error::ShapeMismatch(format!(
                "alignment parameter buffers disagree with n_off {} channels {}",
                self.n_off, self.channels
            )));
        }
        Ok(())
    }

    /// Flat view used by the fitter; order matches [`Self::unflatten`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.dof());
        v.extend_from_slice(&self.offset_weights);
        v.extend_from_slice(&self.offset_bias);
        v.extend_from_slice(&self.weight_weights);
        v.extend_from_slice(&self.weight_bias);
        v
    }

    pub fn unflatten(&self, flat: &[f64]) -> Result<CvaParams> {
        if flat.len() != self.dof() {
            return Err(Error::ShapeMismatch(format!(
                "expected {} parameters, got {}",
                self.dof(),
                flat.len()
            )));
        }
        let mut p = self.clone();
        let (a, rest) = flat.split_at(self.offset_weights.len());
        let (b, rest) = rest.split_at(self.offset_bias.len());
        let (c, d) = rest.split_at(self.weight_weights.len());
        p.offset_weights.copy_from_slice(a);
        p.offset_bias.copy_from_slice(b);
        p.weight_weights.copy_from_slice(c);
        p.weight_bias.copy_from_slice(d);
        Ok(p)
    }

    pub fn dof(&self) -> usize {
        self.offset_weights.len()
            + self.offset_bias.len()
            + self.weight_weights.len()
            + self.weight_bias.len()
    }

    /// Indices of the bias coordinates in the flat vector: per-tap offsets
    /// first, then per-tap weights. Fitting only these moves every cell by
    /// the same learned shift, which is the right capacity for correcting a
    /// global pose error.
    pub fn bias_indices(&self) -> Vec<usize> {
        let ob = self.offset_weights.len();
        let wb = ob + self.offset_bias.len() + self.weight_weights.len();
        (ob..ob + self.offset_bias.len())
            .chain(wb..wb + self.weight_bias.len())
            .collect()
    }
}

/// Residual alignment: for every cell, predict `n_off` sampling offsets and
/// weights from the concatenated query/source features, bilinearly sample
/// the source at the offset locations, and add the weighted sum onto the
/// query. Taps whose predicted weight is exactly zero are skipped, so
/// all-zero parameters reproduce the query bit for bit.
pub fn cva_layer(query: &BevRaster, source: &BevRaster, params: &CvaParams) -> Result<BevRaster> {
    params.validate()?;
    if query.spec != source.spec {
        return Err(Error::ShapeMismatch("query/source grids differ".into()));
    }
    if query.channels != params.channels || source.channels != params.channels {
        return Err(Error::ShapeMismatch(format!(
            "alignment layer built for {} channels, rasters have {}/{}",
            params.channels, query.channels, source.channels
        )));
    }
    let spec = query.spec;
    let ch = params.channels;
    let d = 2 * ch;
    let mut out = query.clone();
    let mut feat = vec![0.0f64; d];
    for i in 0..spec.h() {
        for j in 0..spec.w() {
            for c in 0..ch {
                feat[c] = query.get(i, j, c);
                feat[ch + c] = source.get(i, j, c);
            }
            for tap in 0..params.n_off {
                let wrow = &params.weight_weights[tap * d..(tap + 1) * d];
                let mut w = params.weight_bias[tap];
                for k in 0..d {
                    w += wrow[k] * feat[k];
                }
                if w == 0.0 {
                    continue;
                }
                let mut off = [0.0f64; 2];
                for axis in 0..2 {
                    let row = &params.offset_weights[(tap * 2 + axis) * d..(tap * 2 + axis + 1) * d];
                    let mut o = params.offset_bias[tap * 2 + axis];
                    for k in 0..d {
                        o += row[k] * feat[k];
                    }
                    off[axis] = o;
                }
                let si = i as f64 + off[0];
                let sj = j as f64 + off[1];
                for c in 0..ch {
                    let v = out.get(i, j, c) + w * source.sample_bilinear(si, sj, c);
                    out.set(i, j, c, v);
                }
            }
        }
    }
    Ok(out)
}

/// Two-stage alignment: enhance the source against the query, then refine
/// the query against the enhanced source. With identity parameters both
/// stages pass their query through unchanged.
pub fn align_fuse(
    ego: &BevRaster,
    helper: &BevRaster,
    params: &CvaParams,
) -> Result<BevRaster> {
    let enhanced = cva_layer(helper, ego, params)?;
    cva_layer(ego, &enhanced, params)
}

/// Self-alignment: query and source are the same raster. This is the form
/// the pipeline applies to each warped helper, letting fitted offsets
/// translate its own content to correct a pose error.
pub fn self_enhance(raster: &BevRaster, params: &CvaParams) -> Result<BevRaster> {
    cva_layer(raster, raster, params)
}

// ── Semantic-gated fusion ───────────────────────────────────────────────────

/// Per-source gating network: one 3x3 convolution over the concatenated
/// feature and semantic channels produces a scalar score per cell; scores
/// compete in a softmax across sources.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnfParams {
    pub feature_channels: usize,
    pub semantic_channels: usize,
    pub score: ConvLayer,
}

impl SnfParams {
    pub fn zeros(feature_channels: usize, semantic_channels: usize) -> Self {
        SnfParams {
            feature_channels,
            semantic_channels,
            score: ConvLayer::zeros(feature_channels + semantic_channels, 1, 1),
        }
    }

    /// Evidence gate: score each source by the local mean of its semantic
    /// confidences, scaled by `gain`. Sources with no evidence near a cell
    /// score zero there and lose the softmax to sources that saw something.
    pub fn evidence_gated(feature_channels: usize, semantic_channels: usize, gain: f64) -> Self {
        let mut p = Self::zeros(feature_channels, semantic_channels);
        for c in 0..semantic_channels {
            for ky in 0..3 {
                for kx in 0..3 {
                    *p.score.weight_mut(0, feature_channels + c, ky, kx) = gain / 9.0;
                }
            }
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        self.score
            .validate(self.feature_channels + self.semantic_channels)?;
        if self.score.out_channels != 1 || self.score.stride != 1 {
            return Err(Error::InvalidParameter(
                "score convolution must be stride-1 with a single output channel".into(),
            ));
        }
        Ok(())
    }
}

/// One fusion input: feature channels to blend plus semantic channels that
/// only feed the gate.
#[derive(Debug, Clone)]
pub struct FusionSource<'a> {
    pub features: &'a BevRaster,
    pub semantics: &'a BevRaster,
}

/// Result of gated fusion: blended features and the per-source weight maps
/// (softmax outputs, summing to one at every cell).
#[derive(Debug, Clone)]
pub struct FusedRaster {
    pub features: BevRaster,
    pub weights: Vec<BevRaster>,
}

/// Softmax-gated blend across sources. The first source is conventionally
/// the ego raster; with a single source the output equals it exactly
/// because the lone softmax weight is exactly one.
pub fn snf_fuse(sources: &[FusionSource<'_>], params: &SnfParams) -> Result<FusedRaster> {
    let masks = vec![None; sources.len()];
    snf_fuse_masked(sources, &masks, params)
}

/// Gated blend with per-source coverage masks. A mask is a single-channel
/// raster scaling its source's softmax weight cell by cell: 0 excludes the
/// source where it observed nothing, fractional values discount partially
/// resampled cells, and `None` means full coverage. Without a mask a source
/// votes "empty" with full weight at every cell it never saw, which erodes
/// genuine evidence from the other sources. Weights still sum to one at
/// every cell with any coverage; a cell no source covers copies the first
/// source.
pub fn snf_fuse_masked(
    sources: &[FusionSource<'_>],
    masks: &[Option<&BevRaster>],
    params: &SnfParams,
) -> Result<FusedRaster> {
    params.validate()?;
    let first = sources
        .first()
        .ok_or_else(|| Error::InvalidInput("fusion needs at least one source".into()))?;
    if masks.len() != sources.len() {
        return Err(Error::InvalidInput(format!(
            "{} masks for {} fusion sources",
            masks.len(),
            sources.len()
        )));
    }
    let spec = first.features.spec;
    for s in sources {
        if s.features.spec != spec || s.semantics.spec != spec {
            return Err(Error::ShapeMismatch("fusion sources on different grids".into()));
        }
        if s.features.channels != params.feature_channels
            || s.semantics.channels != params.semantic_channels
        {
            return Err(Error::ShapeMismatch(format!(
                "fusion source has {}+{} channels, parameters expect {}+{}",
                s.features.channels,
                s.semantics.channels,
                params.feature_channels,
                params.semantic_channels
            )));
        }
    }
    for m in masks.iter().flatten() {
        if m.spec != spec || m.channels != 1 {
            return Err(Error::ShapeMismatch(
                "coverage masks must be single-channel rasters on the fusion grid".into(),
            ));
        }
    }
    let n = spec.h() * spec.w();
    let mut scores: Vec<Vec<f64>> = Vec::with_capacity(sources.len());
    for s in sources {
        let stacked = s.features.concat_channels(s.semantics)?;
        scores.push(params.score.forward_raster(&stacked)?);
    }
    let mut weights: Vec<BevRaster> = sources
        .iter()
        .map(|_| BevRaster::zeros(spec, 1))
        .collect();
    let mut features = BevRaster::zeros(spec, params.feature_channels);
    for idx in 0..n {
        let (i, j) = (idx / spec.w(), idx % spec.w());
        let max = scores
            .iter()
            .map(|s| s[idx])
            .fold(f64::NEG_INFINITY, f64::max);
        let coverage =
            |k: usize| masks[k].map_or(1.0, |m| m.get(i, j, 0).clamp(0.0, 1.0));
        let mut denom = 0.0;
        for (k, s) in scores.iter().enumerate() {
            denom += coverage(k) * (s[idx] - max).exp();
        }
        if denom == 0.0 {
            weights[0].set(i, j, 0, 1.0);
            for c in 0..params.feature_channels {
                features.set(i, j, c, sources[0].features.get(i, j, c));
            }
            continue;
        }
        for (k, s) in scores.iter().enumerate() {
            let w = coverage(k) * (s[idx] - max).exp() / denom;
            weights[k].set(i, j, 0, w);
            for c in 0..params.feature_channels {
                let v = features.get(i, j, c) + w * sources[k].features.get(i, j, c);
                features.set(i, j, c, v);
            }
        }
    }
    Ok(FusedRaster { features, weights })
}

// ── Alignment fitting ───────────────────────────────────────────────────────

/// One supervised alignment example: the layer should map `(query, source)`
/// toward `target`.
#[derive(Debug, Clone)]
pub struct AlignExample {
    pub query: BevRaster,
    pub source: BevRaster,
    pub target: BevRaster,
}

/// Knobs for the derivative-free coordinate fitter.
#[derive(Debug, Clone)]
pub struct FitOptions {
    pub iterations: usize,
    pub initial_step: f64,
    /// Flat indices to optimize; `None` fits every coordinate.
    pub coordinates: Option<Vec<usize>>,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            iterations: 40,
            initial_step: 0.5,
            coordinates: None,
        }
    }
}

/// Fit trace: loss after each accepted sweep, starting with the initial
/// loss. Non-increasing by construction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitTrace {
    pub losses: Vec<f64>,
}

pub fn alignment_loss(params: &CvaParams, examples: &[AlignExample]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for ex in examples {
        let out = cva_layer(&ex.query, &ex.source, params)?;
        if out.data.len() != ex.target.data.len() {
            return Err(Error::ShapeMismatch("target raster shape differs".into()));
        }
        for (a, b) in out.data.iter().zip(ex.target.data.iter()) {
            total += (a - b) * (a - b);
        }
        count += out.data.len();
    }
    if count == 0 {
        return Err(Error::InvalidInput("no alignment examples".into()));
    }
    Ok(total / count as f64)
}

/// Coordinate descent with step halving: each sweep tries +step and -step
/// on every selected coordinate and keeps improvements; sweeps without
/// improvement halve the step. A zero tap weight makes offset moves
/// invisible and offsets are irrelevant while the weight is zero, so each
/// sweep also probes the four diagonal moves of every (weight bias, offset
/// bias) pair of a tap, which escapes that joint saddle. The returned trace
/// is monotone non-increasing because only improving moves are accepted.
pub fn fit_cva_with_options(
    init: &CvaParams,
    examples: &[AlignExample],
    opts: &FitOptions,
) -> Result<(CvaParams, FitTrace)> {
    init.validate()?;
    let coords: Vec<usize> = match &opts.coordinates {
        Some(c) => {
            let dof = init.dof();
            for &i in c {
                if i >= dof {
                    return Err(Error::InvalidParameter(format!(
                        "coordinate {i} out of range for {dof} parameters"
                    )));
                }
            }
            c.clone()
        }
        None => (0..init.dof()).collect(),
    };
    // Flat layout: [offset_weights, offset_bias, weight_weights, weight_bias].
    let ob_start = init.offset_weights.len();
    let wb_start = ob_start + init.offset_bias.len() + init.weight_weights.len();
    let active: std::collections::HashSet<usize> = coords.iter().copied().collect();
    let mut flat = init.flatten();
    let mut loss = alignment_loss(init, examples)?;
    let mut trace = vec![loss];
    let mut step = opts.initial_step;
    for _ in 0..opts.iterations {
        let mut improved = false;
        for &ci in &coords {
            let base = flat[ci];
            let mut best = (loss, base);
            for cand in [base + step, base - step] {
                flat[ci] = cand;
                let l = alignment_loss(&init.unflatten(&flat)?, examples)?;
                if l < best.0 {
                    best = (l, cand);
                }
            }
            flat[ci] = best.1;
            if best.0 < loss {
                loss = best.0;
                improved = true;
            }
        }
        for k in 0..init.weight_bias.len() {
            let wi = wb_start + k;
            if !active.contains(&wi) {
                continue;
            }
            for d in 0..2 {
                let oi = ob_start + 2 * k + d;
                if !active.contains(&oi) {
                    continue;
                }
                let (wb, ob) = (flat[wi], flat[oi]);
                let mut best = (loss, wb, ob);
                for (sw, so) in [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)] {
                    flat[wi] = wb + sw * step;
                    flat[oi] = ob + so * step;
                    let l = alignment_loss(&init.unflatten(&flat)?, examples)?;
                    if l < best.0 {
                        best = (l, flat[wi], flat[oi]);
                    }
                }
                flat[wi] = best.1;
                flat[oi] = best.2;
                if best.0 < loss {
                    loss = best.0;
                    improved = true;
                }
            }
        }
        trace.push(loss);
        if !improved {
            step *= 0.5;
            if step < 1e-4 {
                break;
            }
        }
    }
    Ok((init.unflatten(&flat)?, FitTrace { losses: trace }))
}

pub fn fit_cva(init: &CvaParams, examples: &[AlignExample]) -> Result<(CvaParams, FitTrace)> {
    fit_cva_with_options(init, examples, &FitOptions::default())
}
