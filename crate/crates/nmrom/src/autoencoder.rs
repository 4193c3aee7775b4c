//! Convolutional autoencoders over snapshot fields, and the small
//! feed-forward "compressed decoders" that map latent coordinates straight
//! to submesh values.
//!
//! The encoder consumes normalized fields; the decoder folds the
//! denormalization in and applies a final positivity clamp to channels that
//! are physically nonnegative, so `decode` always returns physical units.
//! On the 60x60 reference grid the layer tables of both benchmarks are
//! reproduced exactly (all convolutions stride 2); other grids of the form
//! `3 * 2^L` use the same stride-2 chain rule with the linear layer sized to
//! the resulting flatten dimension.

use std::path::Path;

use crate::fvm::ProblemId;
use crate::grid::{restrict, Field, RestrictTarget, SubmeshProjector};
use crate::neural::{
    load_checkpoint, save_checkpoint, train_loop, Activation, AdamState, DetRng, LayerSpec,
    LossKind, NamedTensor, Sequential, Tensor, TrainConfig, TrainHistory,
};
use crate::snapshots::{denormalize, fit_normalization, normalize, NormalizationStats, SnapshotSet};
use crate::{Error, Result};

pub const LATENT_DIM: usize = 4;

/// One decoder network producing a subset of the state channels.
#[derive(Debug, Clone)]
pub struct DecoderHead {
    pub net: Sequential,
    /// State channels this head produces, in order.
    pub channels: Vec<usize>,
    /// Clamp the physical output at zero.
    pub positive: bool,
}

#[derive(Debug, Clone)]
pub struct CaeModel {
    pub problem: ProblemId,
    pub nx: usize,
    pub ny: usize,
    pub latent_dim: usize,
    pub encoder: Sequential,
    pub heads: Vec<DecoderHead>,
    pub stats: NormalizationStats,
    pub trained: bool,
}

fn identity_stats(channels: usize, dof: usize) -> NormalizationStats {
    NormalizationStats {
        mean: vec![0.0; dof],
        min: vec![0.0; channels],
        max: vec![0.0; channels],
        degenerate: vec![true; channels],
        channels,
    }
}

/// Encoder spec shared by both benchmarks on the reference grid.
fn reference_encoder(channels: usize) -> Vec<LayerSpec> {
    vec![
        LayerSpec::Conv2d { in_ch: channels, out_ch: 8, k: 5, pad: 0, act: Activation::Elu },
        LayerSpec::Conv2d { in_ch: 8, out_ch: 16, k: 3, pad: 1, act: Activation::Elu },
        LayerSpec::Conv2d { in_ch: 16, out_ch: 32, k: 3, pad: 1, act: Activation::Elu },
        LayerSpec::Conv2d { in_ch: 32, out_ch: 64, k: 3, pad: 1, act: Activation::Elu },
        LayerSpec::Conv2d { in_ch: 64, out_ch: 128, k: 2, pad: 1, act: Activation::Elu },
        LayerSpec::Reshape { shape: vec![128 * 3 * 3] },
        LayerSpec::Linear { inp: 128 * 3 * 3, out: LATENT_DIM, act: Activation::Elu },
    ]
}

/// Reference decoder chain 3 -> 4 -> 7 -> 14 -> 30 -> 60 with the given
/// channel progression (first entry is the reshape channel count).
fn reference_decoder(chain: &[usize], out_ch: usize) -> Vec<LayerSpec> {
    let c = chain;
    vec![
        LayerSpec::Linear { inp: LATENT_DIM, out: c[0] * 9, act: Activation::Elu },
        LayerSpec::Reshape { shape: vec![c[0], 3, 3] },
        LayerSpec::ConvTr2d { in_ch: c[0], out_ch: c[1], k: 2, pad: 1, act: Activation::Elu },
        LayerSpec::ConvTr2d { in_ch: c[1], out_ch: c[2], k: 3, pad: 1, act: Activation::Elu },
        LayerSpec::ConvTr2d { in_ch: c[2], out_ch: c[3], k: 4, pad: 1, act: Activation::Elu },
        LayerSpec::ConvTr2d { in_ch: c[3], out_ch: c[4], k: 4, pad: 0, act: Activation::Elu },
        LayerSpec::ConvTr2d { in_ch: c[4], out_ch, k: 4, pad: 1, act: Activation::None },
    ]
}

/// Reference velocity decoder for the three-channel benchmark: two
/// transposed-convolution stages carry recurrent companions.
fn reference_u_decoder() -> Vec<LayerSpec> {
    vec![
        LayerSpec::Linear { inp: LATENT_DIM, out: 300 * 9, act: Activation::Elu },
        LayerSpec::Reshape { shape: vec![300, 3, 3] },
        LayerSpec::ConvTr2d { in_ch: 300, out_ch: 75, k: 2, pad: 1, act: Activation::Elu },
        LayerSpec::ConvTr2d { in_ch: 75, out_ch: 75, k: 3, pad: 1, act: Activation::Elu },
        LayerSpec::ConvTr2dRec { in_ch: 75, out_ch: 75, k: 3, pad: 1 },
        LayerSpec::ConvTr2d { in_ch: 75, out_ch: 35, k: 4, pad: 1, act: Activation::Elu },
        LayerSpec::ConvTr2d { in_ch: 35, out_ch: 20, k: 4, pad: 0, act: Activation::Elu },
        LayerSpec::ConvTr2dRec { in_ch: 35, out_ch: 20, k: 4, pad: 0 },
        LayerSpec::ConvTr2d { in_ch: 20, out_ch: 2, k: 4, pad: 1, act: Activation::None },
    ]
}

/// Number of stride-2 halvings from `n` down to 3, if `n = 3 * 2^L`.
fn halving_depth(n: usize) -> Option<usize> {
    let mut m = n;
    let mut depth = 0;
    while m > 3 && m % 2 == 0 {
        m /= 2;
        depth += 1;
    }
    (m == 3).then_some(depth)
}

fn desk_encoder(channels: usize, depth: usize) -> Vec<LayerSpec> {
    let mut spec = Vec::new();
    let mut in_ch = channels;
    let mut out_ch = 8;
    for _ in 0..depth {
        spec.push(LayerSpec::Conv2d { in_ch, out_ch, k: 3, pad: 1, act: Activation::Elu });
        in_ch = out_ch;
        out_ch = (out_ch * 2).min(128);
    }
    let flat = in_ch * 9;
    spec.push(LayerSpec::Reshape { shape: vec![flat] });
    spec.push(LayerSpec::Linear { inp: flat, out: LATENT_DIM, act: Activation::Elu });
    spec
}

fn desk_decoder(out_ch: usize, depth: usize, recurrent: bool) -> Vec<LayerSpec> {
    let top = (8 << (depth - 1)).min(128);
    let mut spec = vec![
        LayerSpec::Linear { inp: LATENT_DIM, out: top * 9, act: Activation::Elu },
        LayerSpec::Reshape { shape: vec![top, 3, 3] },
    ];
    let mut in_ch = top;
    for level in 0..depth {
        let last = level + 1 == depth;
        let next = if last { out_ch } else { (in_ch / 2).max(4) };
        let act = if last { Activation::None } else { Activation::Elu };
        spec.push(LayerSpec::ConvTr2d { in_ch, out_ch: next, k: 4, pad: 1, act });
        if recurrent && level == 0 && !last {
            spec.push(LayerSpec::ConvTr2dRec { in_ch, out_ch: next, k: 4, pad: 1 });
        }
        in_ch = next;
    }
    spec
}

/// Builds the untrained autoencoder for a problem and grid size. Stats are
/// the identity until fitted by training.
pub fn build_cae(problem: ProblemId, nx: usize, ny: usize, seed: u64) -> Result<CaeModel> {
    if nx != ny {
        return Err(Error::Argument("autoencoder grids must be square".into()));
    }
    let channels = problem.channels();
    let rng = DetRng::new(seed);
    let (encoder_spec, head_specs): (Vec<LayerSpec>, Vec<(Vec<LayerSpec>, Vec<usize>, bool)>) =
        if nx == 60 {
            let enc = reference_encoder(channels);
            match problem {
                ProblemId::Ncl => (
                    enc,
                    vec![(reference_decoder(&[128, 64, 32, 16, 8], 2), vec![0, 1], true)],
                ),
                ProblemId::Swe => (
                    enc,
                    vec![
                        (reference_u_decoder(), vec![0, 1], false),
                        (reference_decoder(&[240, 120, 60, 30, 15], 1), vec![2], true),
                    ],
                ),
            }
        } else {
            let depth = halving_depth(nx).ok_or_else(|| {
                Error::Argument(format!("grid size {nx} is not 60 or of the form 3 * 2^L"))
            })?;
            if depth == 0 {
                return Err(Error::Argument("grid too small for an autoencoder".into()));
            }
            let enc = desk_encoder(channels, depth);
            match problem {
                ProblemId::Ncl => (enc, vec![(desk_decoder(2, depth, false), vec![0, 1], true)]),
                ProblemId::Swe => (
                    enc,
                    vec![
                        (desk_decoder(2, depth, depth >= 2), vec![0, 1], false),
                        (desk_decoder(1, depth, false), vec![2], true),
                    ],
                ),
            }
        };
    let encoder = Sequential::from_spec(&encoder_spec, &mut rng.derive(1))?;
    let mut heads = Vec::new();
    for (i, (spec, chans, positive)) in head_specs.into_iter().enumerate() {
        heads.push(DecoderHead {
            net: Sequential::from_spec(&spec, &mut rng.derive(10 + i as u64))?,
            channels: chans,
            positive,
        });
    }
    Ok(CaeModel {
        problem,
        nx,
        ny,
        latent_dim: LATENT_DIM,
        encoder,
        heads,
        stats: identity_stats(channels, channels * nx * ny),
        trained: false,
    })
}

impl CaeModel {
    pub fn dof(&self) -> usize {
        self.problem.channels() * self.nx * self.ny
    }

    pub fn n_params(&self) -> usize {
        self.encoder.n_params() + self.heads.iter().map(|h| h.net.n_params()).sum::<usize>()
    }

    /// Latent coordinates of a raw (physical-units) field.
    pub fn encode(&self, field: &Field) -> Result<Vec<f64>> {
        if !field.is_finite() {
            return Err(Error::Numeric("field contains NaN/inf".into()));
        }
        let normalized = normalize(field.values(), &self.stats)?;
        let x = Tensor::from_vec(&[1, self.problem.channels(), self.ny, self.nx], normalized)?;
        let z = self.encoder.forward(&x)?;
        Ok(z.data().to_vec())
    }

    /// Physical-units reconstruction from latent coordinates.
    pub fn decode(&self, z: &[f64]) -> Result<Field> {
        if z.len() != self.latent_dim {
            return Err(Error::Shape(format!(
                "latent vector must have length {}, got {}",
                self.latent_dim,
                z.len()
            )));
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("latent vector contains NaN/inf".into()));
        }
        let zt = Tensor::from_vec(&[1, self.latent_dim], z.to_vec())?;
        let cells = self.nx * self.ny;
        let mut normalized = vec![0.0; self.dof()];
        for head in &self.heads {
            let y = head.net.forward(&zt)?;
            for (slot, &ch) in head.channels.iter().enumerate() {
                let src = &y.data()[slot * cells..(slot + 1) * cells];
                normalized[ch * cells..(ch + 1) * cells].copy_from_slice(src);
            }
        }
        let mut physical = denormalize(&normalized, &self.stats)?;
        for head in &self.heads {
            if head.positive {
                for &ch in &head.channels {
                    for v in &mut physical[ch * cells..(ch + 1) * cells] {
                        *v = v.max(0.0);
                    }
                }
            }
        }
        Field::from_values(self.problem.channels(), cells, physical)
    }

    /// Relative reconstruction error of one snapshot.
    pub fn reconstruction_error(&self, field: &Field) -> Result<f64> {
        let z = self.encode(field)?;
        let rec = self.decode(&z)?;
        let mut num = 0.0;
        let mut den = 0.0;
        for (a, b) in rec.values().iter().zip(field.values()) {
            num += (a - b) * (a - b);
            den += b * b;
        }
        if den == 0.0 {
            return Err(Error::Domain("zero-norm snapshot".into()));
        }
        Ok((num / den).sqrt())
    }
}

/// Relative-MSE reconstruction loss of a batch of raw snapshot columns, plus
/// the weight penalty. Zero-norm snapshots are excluded.
pub fn cae_loss(model: &CaeModel, columns: &[&[f64]], weight_penalty: f64) -> Result<f64> {
    let mut loss = 0.0;
    let mut counted = 0usize;
    for col in columns {
        let norm_sq: f64 = col.iter().map(|v| v * v).sum();
        if norm_sq == 0.0 {
            log::warn!("skipping zero-norm snapshot in loss");
            continue;
        }
        let field =
            Field::from_values(model.problem.channels(), model.nx * model.ny, col.to_vec())?;
        let z = model.encode(&field)?;
        let rec = model.decode(&z)?;
        let num: f64 = rec
            .values()
            .iter()
            .zip(col.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        loss += num / norm_sq;
        counted += 1;
    }
    let mut total = loss / counted.max(1) as f64;
    total += weight_penalty
        * (model.encoder.params_sq_norm()
            + model.heads.iter().map(|h| h.net.params_sq_norm()).sum::<f64>());
    Ok(total)
}

/// Trains the autoencoder on raw snapshots. Normalization statistics are
/// fitted on this set first; the loss is the batch-averaged relative MSE in
/// physical units plus the weight penalty.
pub fn train_cae(
    model: &mut CaeModel,
    train: &SnapshotSet,
    cfg: &TrainConfig,
) -> Result<TrainHistory> {
    if train.dof() != model.dof() || train.nx() != model.nx {
        return Err(Error::Shape("training set does not match the model grid".into()));
    }
    model.stats = fit_normalization(train)?;
    let cells = model.nx * model.ny;
    let channels = model.problem.channels();
    let dof = model.dof();

    // usable columns and their norms
    let mut usable = Vec::new();
    for col in 0..train.n_columns() {
        let norm_sq: f64 = train.column_flat(col).iter().map(|v| v * v).sum();
        if norm_sq > 0.0 {
            usable.push((col, norm_sq));
        } else {
            log::warn!("excluding zero-norm training snapshot {col}");
        }
    }
    if usable.is_empty() {
        return Err(Error::Argument("no nonzero training snapshots".into()));
    }

    // precompute normalized inputs once
    let mut normalized_cols = Vec::with_capacity(usable.len());
    for &(col, _) in &usable {
        normalized_cols.push(normalize(train.column_flat(col), &model.stats)?);
    }

    let mut adam = AdamState::new();
    let n_heads = model.heads.len();
    let history = train_loop(usable.len(), cfg, |batch, lr| {
        let b = batch.len();
        let mut x = Tensor::zeros(&[b, channels, model.ny, model.nx]);
        for (row, &idx) in batch.iter().enumerate() {
            x.data_mut()[row * dof..(row + 1) * dof].copy_from_slice(&normalized_cols[idx]);
        }
        model.encoder.zero_grads();
        for h in &mut model.heads {
            h.net.zero_grads();
        }
        let enc_cache = model.encoder.forward_cached(&x)?;
        let z = enc_cache.output().clone();

        let mut head_caches = Vec::with_capacity(n_heads);
        let mut normalized_out = vec![0.0; b * dof];
        for head in &model.heads {
            let cache = head.net.forward_cached(&z)?;
            let y = cache.output();
            for row in 0..b {
                for (slot, &ch) in head.channels.iter().enumerate() {
                    let src = &y.data()[(row * head.channels.len() + slot) * cells
                        ..(row * head.channels.len() + slot + 1) * cells];
                    normalized_out[row * dof + ch * cells..row * dof + (ch + 1) * cells]
                        .copy_from_slice(src);
                }
            }
            head_caches.push(cache);
        }

        // physical reconstruction, loss, and gradient back to the nets
        let mut loss = 0.0;
        let mut d_normalized = vec![0.0; b * dof];
        for (row, &idx) in batch.iter().enumerate() {
            let (col, norm_sq) = usable[idx];
            let raw = train.column_flat(col);
            let pre = denormalize(&normalized_out[row * dof..(row + 1) * dof], &model.stats)?;
            for head in &model.heads {
                for &ch in &head.channels {
                    let scale = model.stats.scale(ch);
                    for i in 0..cells {
                        let k = ch * cells + i;
                        let value = if head.positive { pre[k].max(0.0) } else { pre[k] };
                        let diff = value - raw[k];
                        loss += diff * diff / norm_sq;
                        let mut g = 2.0 * diff / (norm_sq * b as f64);
                        if head.positive && pre[k] <= 0.0 {
                            g = 0.0;
                        }
                        d_normalized[row * dof + k] = g * scale;
                    }
                }
            }
        }
        loss /= b as f64;

        // split the gradient per head and backpropagate
        let mut dz_total = Tensor::zeros(z.shape());
        for (head, cache) in model.heads.iter_mut().zip(&head_caches) {
            let hc = head.channels.len();
            let mut dy = Tensor::zeros(&[b, hc, model.ny, model.nx]);
            for row in 0..b {
                for (slot, &ch) in head.channels.iter().enumerate() {
                    let dst = &mut dy.data_mut()
                        [(row * hc + slot) * cells..(row * hc + slot + 1) * cells];
                    dst.copy_from_slice(
                        &d_normalized[row * dof + ch * cells..row * dof + (ch + 1) * cells],
                    );
                }
            }
            let dz = head.net.backward(cache, &dy)?;
            for (t, s) in dz_total.data_mut().iter_mut().zip(dz.data()) {
                *t += s;
            }
        }
        model.encoder.backward(&enc_cache, &dz_total)?;

        if cfg.weight_penalty > 0.0 {
            loss += cfg.weight_penalty
                * (model.encoder.params_sq_norm()
                    + model.heads.iter().map(|h| h.net.params_sq_norm()).sum::<f64>());
            model.encoder.add_weight_penalty_grads(cfg.weight_penalty);
            for h in &mut model.heads {
                h.net.add_weight_penalty_grads(cfg.weight_penalty);
            }
        }

        let mut slots = model.encoder.param_slots();
        for h in &mut model.heads {
            slots.extend(h.net.param_slots());
        }
        adam.step(&mut slots, lr);
        Ok(loss)
    })?;
    model.trained = !history.aborted;
    Ok(history)
}

/// Per-parameter (mean, max) relative reconstruction errors over a test set.
pub fn reconstruction_report(model: &CaeModel, test: &SnapshotSet) -> Result<Vec<(f64, f64)>> {
    let mut out = Vec::with_capacity(test.n_params());
    for p in 0..test.n_params() {
        let mut sum = 0.0;
        let mut max = 0.0f64;
        let mut count = 0usize;
        for t in 0..test.n_times(p) {
            let field = test.column_as_field(p, t);
            let norm_sq: f64 = field.values().iter().map(|v| v * v).sum();
            if norm_sq == 0.0 {
                log::warn!("skipping zero-norm snapshot (param {p}, index {t})");
                continue;
            }
            let err = model.reconstruction_error(&field)?;
            sum += err;
            max = max.max(err);
            count += 1;
        }
        if count == 0 {
            return Err(Error::Domain(format!(
                "parameter {p} has no nonzero snapshots"
            )));
        }
        out.push((sum / count as f64, max));
    }
    Ok(out)
}

// --- compressed decoder ------------------------------------------------------

/// One feed-forward head of a compressed decoder (single hidden layer).
#[derive(Debug, Clone)]
pub struct TsHead {
    pub net: Sequential,
    pub channels: Vec<usize>,
}

/// Teacher-student compressed decoder: latent coordinates to physical state
/// values on the submesh halo, channel-major, without touching the full
/// grid.
#[derive(Debug, Clone)]
pub struct CompressedDecoder {
    pub problem: ProblemId,
    pub heads: Vec<TsHead>,
    pub halo: Vec<usize>,
    pub layers: usize,
    pub hidden: Vec<usize>,
}

/// Hidden-layer sizes per head for a magic-point count, following the
/// reference configurations (nearest row for other counts).
pub fn table_hidden(problem: ProblemId, n_magic: usize) -> Vec<usize> {
    match problem {
        ProblemId::Ncl => {
            let rows = [(50, 300), (100, 350), (150, 400)];
            vec![nearest(&rows, n_magic)]
        }
        ProblemId::Swe => {
            let u_rows = [(25, 400), (50, 400), (100, 600), (150, 600)];
            let h_rows = [(25, 200), (50, 200), (100, 300), (150, 300)];
            vec![nearest(&u_rows, n_magic), nearest(&h_rows, n_magic)]
        }
    }
}

fn nearest(rows: &[(usize, usize)], mp: usize) -> usize {
    rows.iter()
        .min_by_key(|(m, _)| m.abs_diff(mp))
        .map(|&(_, h)| h)
        .expect("non-empty table")
}

fn ts_head_layout(problem: ProblemId) -> Vec<(Vec<usize>, Activation)> {
    match problem {
        ProblemId::Ncl => vec![(vec![0, 1], Activation::Relu)],
        ProblemId::Swe => vec![(vec![0, 1], Activation::None), (vec![2], Activation::Relu)],
    }
}

pub fn build_compressed_decoder(
    problem: ProblemId,
    proj: &SubmeshProjector,
    hidden: &[usize],
    seed: u64,
) -> Result<CompressedDecoder> {
    let s_h = proj.n_halo();
    let rng = DetRng::new(seed);
    let head_layout = ts_head_layout(problem);
    if hidden.len() != head_layout.len() {
        return Err(Error::Argument(format!(
            "expected {} hidden sizes, got {}",
            head_layout.len(),
            hidden.len()
        )));
    }
    let mut heads = Vec::new();
    for (i, ((channels, act), &h)) in head_layout.into_iter().zip(hidden).enumerate() {
        let out = channels.len() * s_h;
        let net = Sequential::from_spec(
            &[
                LayerSpec::Linear { inp: LATENT_DIM, out: h, act: Activation::Elu },
                LayerSpec::Linear { inp: h, out, act },
            ],
            &mut rng.derive(i as u64 + 1),
        )?;
        heads.push(TsHead { net, channels });
    }
    Ok(CompressedDecoder {
        problem,
        heads,
        halo: proj.halo().to_vec(),
        layers: proj.layers(),
        hidden: hidden.to_vec(),
    })
}

impl CompressedDecoder {
    pub fn n_halo(&self) -> usize {
        self.halo.len()
    }

    /// Output dimension, all heads combined: `channels * halo size`.
    pub fn output_dim(&self) -> usize {
        self.problem.channels() * self.halo.len()
    }

    /// Physical state values on the halo, channel-major.
    pub fn decode_halo(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != LATENT_DIM {
            return Err(Error::Shape(format!(
                "latent vector must have length {LATENT_DIM}, got {}",
                z.len()
            )));
        }
        let zt = Tensor::from_vec(&[1, LATENT_DIM], z.to_vec())?;
        let s_h = self.halo.len();
        let mut out = vec![0.0; self.output_dim()];
        for head in &self.heads {
            let y = head.net.forward(&zt)?;
            for (slot, &ch) in head.channels.iter().enumerate() {
                out[ch * s_h..(ch + 1) * s_h]
                    .copy_from_slice(&y.data()[slot * s_h..(slot + 1) * s_h]);
            }
        }
        Ok(out)
    }
}

/// Trains a compressed decoder: inputs are the latent projections of the
/// training snapshots, targets the raw snapshots restricted to the submesh
/// halo. Returns the decoder and one history per head.
pub fn train_compressed_decoder(
    cae: &CaeModel,
    train: &SnapshotSet,
    proj: &SubmeshProjector,
    hidden: &[usize],
    cfg: &TrainConfig,
) -> Result<(CompressedDecoder, Vec<TrainHistory>)> {
    let mut decoder = build_compressed_decoder(cae.problem, proj, hidden, cfg.seed)?;
    let s_h = proj.n_halo();
    // latent inputs and restricted targets
    let mut latents = Vec::new();
    let mut restricted = Vec::new();
    for p in 0..train.n_params() {
        for t in 0..train.n_times(p) {
            let field = train.column_as_field(p, t);
            let r = restrict(&field, proj, RestrictTarget::Halo)?;
            if r.iter().map(|v| v * v).sum::<f64>() == 0.0 {
                log::warn!("excluding snapshot with zero-norm restriction (param {p}, {t})");
                continue;
            }
            latents.push(cae.encode(&field)?);
            restricted.push(r);
        }
    }
    if latents.is_empty() {
        return Err(Error::Argument("no usable teacher-student samples".into()));
    }
    let n = latents.len();
    let mut x = Tensor::zeros(&[n, LATENT_DIM]);
    for (i, z) in latents.iter().enumerate() {
        x.data_mut()[i * LATENT_DIM..(i + 1) * LATENT_DIM].copy_from_slice(z);
    }
    let mut histories = Vec::new();
    for head in &mut decoder.heads {
        let hc = head.channels.len();
        let mut targets = Tensor::zeros(&[n, hc * s_h]);
        for (i, r) in restricted.iter().enumerate() {
            for (slot, &ch) in head.channels.iter().enumerate() {
                targets.data_mut()[i * hc * s_h + slot * s_h..i * hc * s_h + (slot + 1) * s_h]
                    .copy_from_slice(&r[ch * s_h..(ch + 1) * s_h]);
            }
        }
        let history =
            crate::neural::train_network(&mut head.net, &x, &targets, LossKind::RelativeMse, cfg)?;
        if history.aborted {
            return Err(Error::Numeric("compressed-decoder training diverged".into()));
        }
        histories.push(history);
    }
    Ok((decoder, histories))
}

// --- checkpoints -------------------------------------------------------------

fn problem_code(p: ProblemId) -> f64 {
    match p {
        ProblemId::Ncl => 0.0,
        ProblemId::Swe => 1.0,
    }
}

fn problem_from_code(v: f64) -> Result<ProblemId> {
    match v as i64 {
        0 => Ok(ProblemId::Ncl),
        1 => Ok(ProblemId::Swe),
        other => Err(Error::Format(format!("unknown problem code {other}"))),
    }
}

pub fn save_cae(model: &CaeModel, path: &Path) -> Result<()> {
    let mut tensors = vec![
        NamedTensor::scalar("meta/problem", problem_code(model.problem)),
        NamedTensor::vector("meta/grid", vec![model.nx as f64, model.ny as f64]),
        NamedTensor::scalar("meta/latent", model.latent_dim as f64),
        NamedTensor::scalar("meta/trained", if model.trained { 1.0 } else { 0.0 }),
        NamedTensor::vector("stats/mean", model.stats.mean.clone()),
        NamedTensor::vector("stats/min", model.stats.min.clone()),
        NamedTensor::vector("stats/max", model.stats.max.clone()),
        NamedTensor::vector(
            "stats/degenerate",
            model.stats.degenerate.iter().map(|&d| d as u8 as f64).collect(),
        ),
    ];
    tensors.extend(model.encoder.named_tensors("encoder"));
    for (i, h) in model.heads.iter().enumerate() {
        tensors.extend(h.net.named_tensors(&format!("decoder{i}")));
    }
    save_checkpoint(path, &tensors)
}

pub fn load_cae(path: &Path, seed: u64) -> Result<CaeModel> {
    let tensors = load_checkpoint(path)?;
    let get = |name: &str| -> Result<&NamedTensor> {
        tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Format(format!("checkpoint misses tensor {name}")))
    };
    let problem = problem_from_code(get("meta/problem")?.data[0])?;
    let grid = get("meta/grid")?;
    let (nx, ny) = (grid.data[0] as usize, grid.data[1] as usize);
    let mut model = build_cae(problem, nx, ny, seed)?;
    model.trained = get("meta/trained")?.data[0] != 0.0;
    model.stats = NormalizationStats {
        mean: get("stats/mean")?.data.clone(),
        min: get("stats/min")?.data.clone(),
        max: get("stats/max")?.data.clone(),
        degenerate: get("stats/degenerate")?.data.iter().map(|&v| v != 0.0).collect(),
        channels: problem.channels(),
    };
    model.encoder.load_named_tensors("encoder", &tensors)?;
    for (i, h) in model.heads.iter_mut().enumerate() {
        h.net.load_named_tensors(&format!("decoder{i}"), &tensors)?;
    }
    Ok(model)
}

pub fn save_compressed_decoder(dec: &CompressedDecoder, path: &Path) -> Result<()> {
    let mut tensors = vec![
        NamedTensor::scalar("meta/problem", problem_code(dec.problem)),
        NamedTensor::scalar("meta/layers", dec.layers as f64),
        NamedTensor::vector("meta/halo", dec.halo.iter().map(|&c| c as f64).collect()),
        NamedTensor::vector("meta/hidden", dec.hidden.iter().map(|&h| h as f64).collect()),
    ];
    for (i, h) in dec.heads.iter().enumerate() {
        tensors.extend(h.net.named_tensors(&format!("head{i}")));
    }
    save_checkpoint(path, &tensors)
}

pub fn load_compressed_decoder(path: &Path, grid_cells: usize) -> Result<CompressedDecoder> {
    let tensors = load_checkpoint(path)?;
    let get = |name: &str| -> Result<&NamedTensor> {
        tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Format(format!("checkpoint misses tensor {name}")))
    };
    let problem = problem_from_code(get("meta/problem")?.data[0])?;
    let layers = get("meta/layers")?.data[0] as usize;
    let halo: Vec<usize> = get("meta/halo")?.data.iter().map(|&v| v as usize).collect();
    let hidden: Vec<usize> = get("meta/hidden")?.data.iter().map(|&v| v as usize).collect();
    if halo.iter().any(|&c| c >= grid_cells) {
        return Err(Error::Format("stored halo exceeds the grid".into()));
    }
    let s_h = halo.len();
    let rng = DetRng::new(0);
    let mut heads = Vec::new();
    for (i, ((channels, act), &h)) in ts_head_layout(problem).into_iter().zip(&hidden).enumerate() {
        let out = channels.len() * s_h;
        let mut net = Sequential::from_spec(
            &[
                LayerSpec::Linear { inp: LATENT_DIM, out: h, act: Activation::Elu },
                LayerSpec::Linear { inp: h, out, act },
            ],
            &mut rng.derive(i as u64 + 1),
        )?;
        net.load_named_tensors(&format!("head{i}"), &tensors)?;
        heads.push(TsHead { net, channels });
    }
    Ok(CompressedDecoder {
        problem,
        heads,
        halo,
        layers,
        hidden,
    })
}
