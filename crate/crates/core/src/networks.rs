//! Coarse probabilistic completion plus relational refinement.
//!
//! The coarse stage is a dual-path variational autoencoder. A shared
//! point-wise trunk with max pooling encodes either the complete shape `Y`
//! (posterior head `q`, used only in training) or the partial scan `X`
//! (head `p`). A shared decoder maps `[z | global feature]` to the coarse
//! cloud. The refinement stage concatenates `X` with the coarse cloud and
//! runs a U-shaped stack of R-PSK blocks, expands features and predicts
//! per-point offsets.
//!
//! Parameter names:
//!
//! | prefix                   | role                                   |
//! |--------------------------|----------------------------------------|
//! | `encoder.trunk{l}`       | shared point-wise layers               |
//! | `encoder.head_q.*`       | complete-shape posterior (train only)  |
//! | `encoder.head_p.*`       | partial-scan posterior                 |
//! | `decoder.fc{l}`, `.out`  | shared coarse decoder                  |
//! | `renet.*`                | refinement network                     |

use std::rc::Rc;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diff::{Activation, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::{self, knn_self, Point};
use crate::kernels::{self, dense, EfeParams, KernelConfig, LevelState, RpskParams};
use crate::metrics::{GaussianParams, LOGVAR_MAX, LOGVAR_MIN};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_z: usize,
    pub encoder_widths: Vec<usize>,
    pub decoder_widths: Vec<usize>,
    pub coarse_n: usize,
    pub partial_n: usize,
    /// Output resolution the expansion stage is sized for.
    pub out_n: usize,
    pub renet_widths: Vec<usize>,
    pub pool_ratio: f64,
    pub pool_k: usize,
    pub unpool_k: usize,
    pub edge_k: usize,
    pub kernels: KernelConfig,
    /// Reconstruction path and both KL terms; off gives a deterministic
    /// single-path model.
    pub dual_path: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_z: 128,
            encoder_widths: vec![64, 128, 256],
            decoder_widths: vec![256, 256],
            coarse_n: 1024,
            partial_n: 2048,
            out_n: 2048,
            renet_widths: vec![64, 128, 256],
            pool_ratio: 0.5,
            pool_k: 8,
            unpool_k: 3,
            edge_k: 8,
            kernels: KernelConfig::default(),
            dual_path: true,
        }
    }
}

impl ModelConfig {
    /// Small model for CPU smoke runs: 256-point partials, 512-point output.
    pub fn toy() -> Self {
        Self {
            d_z: 16,
            encoder_widths: vec![32, 64, 128],
            decoder_widths: vec![128, 128],
            coarse_n: 256,
            partial_n: 256,
            out_n: 512,
            renet_widths: vec![16, 32, 32],
            ..Self::default()
        }
    }

    pub fn renet_input_n(&self) -> usize {
        self.partial_n + self.coarse_n
    }

    /// Expansion factor: smallest integer `f >= 2` with `input * f >= out_n`.
    pub fn expansion_factor(&self) -> usize {
        expansion_factor(self.renet_input_n(), self.out_n)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::config(m));
        if self.d_z == 0 || self.coarse_n == 0 || self.partial_n == 0 || self.out_n == 0 {
            return fail("d_z and point counts must be positive".into());
        }
        if self.encoder_widths.is_empty() || self.renet_widths.is_empty() {
            return fail("encoder and refinement widths must be non-empty".into());
        }
        if [&self.encoder_widths, &self.decoder_widths, &self.renet_widths]
            .iter()
            .any(|w| w.contains(&0))
        {
            return fail("layer widths must be positive".into());
        }
        if !(self.pool_ratio > 0.0 && self.pool_ratio < 1.0) {
            return fail(format!("pool_ratio {} outside (0, 1)", self.pool_ratio));
        }
        if self.pool_k == 0 || self.unpool_k == 0 || self.edge_k == 0 || self.kernels.k_a == 0 {
            return fail("neighbourhood sizes must be positive".into());
        }
        if self.kernels.kernel_selection && (self.kernels.k_b == 0 || self.kernels.k_a == self.kernels.k_b) {
            return fail("PSK kernel sizes must be positive and differ".into());
        }
        let mut n = self.renet_input_n();
        for _ in 1..self.renet_widths.len() {
            n = (self.pool_ratio * n as f64).ceil() as usize;
        }
        if n < 4 {
            return fail(format!("coarsest refinement level has {n} < 4 points"));
        }
        Ok(())
    }
}

pub fn expansion_factor(input_n: usize, out_n: usize) -> usize {
    out_n.div_ceil(input_n.max(1)).max(2)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_rec: f64,
    pub lambda_com: f64,
    pub lambda_fine: f64,
    pub lambda_kl: f64,
    /// Fraction of training over which the KL weight ramps up from zero.
    pub kl_warmup: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_rec: 1.0,
            lambda_com: 1.0,
            lambda_fine: 1.0,
            lambda_kl: 0.1,
            kl_warmup: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_rec, self.lambda_com, self.lambda_fine, self.lambda_kl];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::config("loss weights must be finite and non-negative"));
        }
        if all.iter().all(|&w| w == 0.0) {
            return Err(Error::config("loss weights are all zero"));
        }
        if !(0.0..=1.0).contains(&self.kl_warmup) {
            return Err(Error::config("kl_warmup must lie in [0, 1]"));
        }
        Ok(())
    }

    /// KL weight at `step` of `total` steps.
    pub fn kl_at(&self, step: usize, total: usize) -> f64 {
        let ramp = self.kl_warmup * total as f64;
        if ramp <= 0.0 {
            self.lambda_kl
        } else {
            self.lambda_kl * (step as f64 / ramp).min(1.0)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentSource {
    Prior,
    PosteriorComplete,
    PosteriorPartial,
}

/// `z = mean + exp(logvar / 2) * eps`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentSample {
    pub z: Vec<f64>,
    pub eps: Vec<f64>,
    pub source: LatentSource,
}

impl LatentSample {
    pub fn draw(params: &GaussianParams, source: LatentSource, rng: &mut impl Rng) -> Self {
        let eps = draw_eps(params.dim(), rng);
        let z = params
            .mean()
            .iter()
            .zip(params.std())
            .zip(&eps)
            .map(|((m, s), e)| m + s * e)
            .collect();
        Self { z, eps, source }
    }
}

pub fn draw_eps(dim: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Head {
    /// `q(z | Y)`, complete input.
    Complete,
    /// `p(z | X)`, partial input.
    Partial,
}

impl Head {
    fn prefix(self) -> &'static str {
        match self {
            Head::Complete => "encoder.head_q",
            Head::Partial => "encoder.head_p",
        }
    }
}

/// Registers every parameter of the model described by `cfg`.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut store = ParamStore::new(seed);
    let mut cin = 3;
    for (l, &w) in cfg.encoder_widths.iter().enumerate() {
        store.init_linear(&format!("encoder.trunk{l}"), cin, w, true)?;
        cin = w;
    }
    let g = cin;
    let heads: &[Head] = if cfg.dual_path {
        &[Head::Complete, Head::Partial]
    } else {
        &[Head::Partial]
    };
    for h in heads {
        store.init_linear(&format!("{}.mean", h.prefix()), g, cfg.d_z, true)?;
        if cfg.dual_path {
            store.init_linear(&format!("{}.logvar", h.prefix()), g, cfg.d_z, true)?;
        }
    }
    let mut cin = cfg.d_z + g;
    for (l, &w) in cfg.decoder_widths.iter().enumerate() {
        store.init_linear(&format!("decoder.fc{l}"), cin, w, true)?;
        cin = w;
    }
    store.init_linear("decoder.out", cin, cfg.coarse_n * 3, true)?;
    for block in renet_blocks(cfg)? {
        block.init(&mut store)?;
    }
    let w0 = cfg.renet_widths[0];
    store.init_linear("renet.stem", 3, w0, true)?;
    EfeParams::new("renet.efe", w0, cfg.expansion_factor())?.init(&mut store)?;
    store.init_linear("renet.head1", w0, w0, true)?;
    store.init_linear("renet.head2", w0, 3, true)?;
    Ok(store)
}

/// Encoder blocks `renet.enc{l}` then decoder blocks `renet.dec{l}`.
fn renet_blocks(cfg: &ModelConfig) -> Result<Vec<RpskParams>> {
    let w = &cfg.renet_widths;
    let mut blocks = Vec::new();
    for l in 0..w.len() {
        let cin = if l == 0 { w[0] } else { w[l - 1] };
        blocks.push(RpskParams::new(format!("renet.enc{l}"), cin, w[l], &cfg.kernels)?);
    }
    for l in 0..w.len() - 1 {
        blocks.push(RpskParams::new(format!("renet.dec{l}"), w[l + 1] + w[l], w[l], &cfg.kernels)?);
    }
    Ok(blocks)
}

/// Number of scalar parameters the configuration produces.
pub fn parameter_count(cfg: &ModelConfig) -> Result<usize> {
    Ok(init_params(cfg, 0)?.scalar_count())
}

/// Output of one encoder pass. `logvar` is absent for the single-path
/// model.
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    pub global: Var,
    pub mean: Var,
    pub logvar: Option<Var>,
}

pub fn encode(tape: &mut Tape, store: &ParamStore, cfg: &ModelConfig, points: &[Point], head: Head) -> Result<Encoded> {
    if head == Head::Complete && !cfg.dual_path {
        return Err(Error::config("the single-path model has no complete-shape head"));
    }
    let mut h = tape.input(Tensor::from_points(points));
    let layers = cfg.encoder_widths.len();
    for l in 0..layers {
        let act = if l + 1 < layers { Activation::Relu } else { Activation::None };
        h = dense(tape, store, h, &format!("encoder.trunk{l}"), act)?;
    }
    let g = tape.max_rows(h)?;
    let width = tape.value(g).len();
    let global = tape.reshape(g, vec![1, width])?;
    let mean = dense(tape, store, global, &format!("{}.mean", head.prefix()), Activation::None)?;
    let logvar = if cfg.dual_path {
        let lv = dense(tape, store, global, &format!("{}.logvar", head.prefix()), Activation::None)?;
        Some(tape.clamp(lv, LOGVAR_MIN, LOGVAR_MAX))
    } else {
        None
    };
    Ok(Encoded { global, mean, logvar })
}

/// Current values of an encoder's distribution.
pub fn gaussian_of(tape: &Tape, enc: &Encoded) -> Result<GaussianParams> {
    let mean = tape.value(enc.mean).data().to_vec();
    let logvar = match enc.logvar {
        Some(lv) => tape.value(lv).data().to_vec(),
        None => vec![LOGVAR_MIN; mean.len()],
    };
    GaussianParams::new(mean, logvar)
}

/// Reparameterised latent: `mean + exp(logvar / 2) * eps`, or the mean when
/// the encoder has no variance head.
pub fn latent(tape: &mut Tape, enc: &Encoded, eps: &[f64]) -> Result<Var> {
    let Some(lv) = enc.logvar else {
        return Ok(enc.mean);
    };
    let half = tape.scale(lv, 0.5);
    let std = tape.exp(half);
    let e = tape.input(Tensor::matrix(1, eps.len(), eps.to_vec())?);
    let noise = tape.mul(std, e)?;
    tape.add(enc.mean, noise)
}

/// `[z | global] -> coarse_n x 3`.
pub fn decode_coarse(tape: &mut Tape, store: &ParamStore, cfg: &ModelConfig, z: Var, global: Var) -> Result<Var> {
    let zl = tape.value(z).len();
    let z = tape.reshape(z, vec![1, zl])?;
    let mut h = tape.concat_cols(&[z, global])?;
    for l in 0..cfg.decoder_widths.len() {
        h = dense(tape, store, h, &format!("decoder.fc{l}"), Activation::Relu)?;
    }
    let out = dense(tape, store, h, "decoder.out", Activation::None)?;
    tape.reshape(out, vec![cfg.coarse_n, 3])
}

/// One path's loss and its parts.
#[derive(Clone, Copy, Debug)]
pub struct PathLoss {
    pub loss: Var,
    pub kl: Option<Var>,
    pub cd: Var,
    pub output: Var,
}

fn weighted_sum(tape: &mut Tape, terms: &[(f64, Var)]) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for &(w, v) in terms {
        let s = tape.scale(v, w);
        acc = Some(match acc {
            Some(a) => tape.add(a, s)?,
            None => s,
        });
    }
    acc.ok_or_else(|| Error::contract("empty loss"))
}

/// `lambda_kl * KL(q(z|Y) || N(0, I)) + CD(Y'_r, Y)` with `Y'_r` decoded
/// from a sample of `q`. Returns the loss and the complete-head encoding.
pub fn reconstruction_path_loss(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &ModelConfig,
    y: &[Point],
    lambda_kl: f64,
    rng: &mut impl Rng,
) -> Result<(PathLoss, Encoded)> {
    let q = encode(tape, store, cfg, y, Head::Complete)?;
    let lq = q.logvar.expect("dual-path encoder has a variance head");
    let z = latent(tape, &q, &draw_eps(cfg.d_z, rng))?;
    let out = decode_coarse(tape, store, cfg, z, q.global)?;
    let target = tape.input(Tensor::from_points(y));
    let cd = tape.chamfer(out, target)?;
    let zero = tape.input(Tensor::zeros(vec![1, cfg.d_z]));
    let kl = tape.gaussian_kl(q.mean, lq, zero, zero)?;
    let loss = weighted_sum(tape, &[(lambda_kl, kl), (1.0, cd)])?;
    Ok((
        PathLoss {
            loss,
            kl: Some(kl),
            cd,
            output: out,
        },
        q,
    ))
}

/// `lambda_kl * KL(sg[q(z|Y)] || p(z|X)) + CD(Y'_c, Y)` with `Y'_c` decoded
/// from a sample of `p`. Pass `q` to reuse an encoding of `Y` from the same
/// tape. The single-path model decodes from the mean of `p` and has no KL.
pub fn completion_path_loss(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &ModelConfig,
    x: &[Point],
    y: &[Point],
    lambda_kl: f64,
    q: Option<Encoded>,
    rng: &mut impl Rng,
) -> Result<PathLoss> {
    let p = encode(tape, store, cfg, x, Head::Partial)?;
    let z = latent(tape, &p, &draw_eps(cfg.d_z, rng))?;
    let out = decode_coarse(tape, store, cfg, z, p.global)?;
    let target = tape.input(Tensor::from_points(y));
    let cd = tape.chamfer(out, target)?;
    if !cfg.dual_path {
        return Ok(PathLoss {
            loss: cd,
            kl: None,
            cd,
            output: out,
        });
    }
    let q = match q {
        Some(q) => q,
        None => encode(tape, store, cfg, y, Head::Complete)?,
    };
    let mq = tape.detach(q.mean);
    let lq = tape.detach(q.logvar.expect("dual-path encoder has a variance head"));
    let lp = p.logvar.expect("dual-path encoder has a variance head");
    let kl = tape.gaussian_kl(mq, lq, p.mean, lp)?;
    let loss = weighted_sum(tape, &[(lambda_kl, kl), (1.0, cd)])?;
    Ok(PathLoss {
        loss,
        kl: Some(kl),
        cd,
        output: out,
    })
}

/// Refinement result: `fine` has `out_n` rows; `expanded` holds all
/// `input * factor` points before the final sampling.
#[derive(Clone, Copy, Debug)]
pub struct RenetOutput {
    pub fine: Var,
    pub expanded: Var,
    pub factor: usize,
}

/// Index of the lexicographically greatest point; an order-free start for
/// farthest point sampling.
fn extreme_point(points: &[Point]) -> usize {
    let mut best = 0;
    for (i, p) in points.iter().enumerate().skip(1) {
        let b = &points[best];
        let ord = p[0].total_cmp(&b[0]).then(p[1].total_cmp(&b[1])).then(p[2].total_cmp(&b[2]));
        if ord.is_gt() {
            best = i;
        }
    }
    best
}

fn fps_from_extreme(points: &[Point], m: usize) -> Result<Vec<usize>> {
    geometry::fps_indices(points, m, extreme_point(points))
}

/// Pools one level with an order-independent farthest point start.
fn pool(tape: &mut Tape, level: &LevelState, ratio: f64, k: usize) -> Result<LevelState> {
    let m = (ratio * level.points.len() as f64).ceil() as usize;
    let keep = fps_from_extreme(&level.points, m)?;
    let points: Vec<Point> = keep.iter().map(|&i| level.points[i]).collect();
    if points.len() < 4 {
        return Err(Error::contract("pooled level has fewer than 4 points"));
    }
    let nbr = geometry::knn_query(&points, &level.points, k.min(level.points.len()))?;
    let grouped = tape.gather_rows(level.features, nbr.flat().into())?;
    let features = tape.group_max(grouped, nbr.k())?;
    let pos = tape.gather_rows(level.pos, keep.as_slice().into())?;
    Ok(LevelState {
        points,
        pos,
        features,
        parent_index: keep,
    })
}

/// Refines `[X ; coarse]` to exactly `out_n` points.
pub fn renet_forward(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &ModelConfig,
    x: &[Point],
    coarse: Var,
    out_n: usize,
) -> Result<RenetOutput> {
    let coarse_pts = tape.value(coarse).to_points();
    let points: Vec<Point> = x.iter().chain(&coarse_pts).copied().collect();
    let n0 = points.len();
    let factor = cfg.expansion_factor();
    if out_n == 0 || out_n > n0 * factor {
        return Err(Error::config(format!(
            "output of {out_n} points exceeds the expansion capacity {n0} x {factor}"
        )));
    }
    let xin = tape.input(Tensor::from_points(x));
    let pos = tape.concat_rows(&[xin, coarse])?;
    let blocks = renet_blocks(cfg)?;
    let levels = cfg.renet_widths.len();
    let (enc, dec) = blocks.split_at(levels);
    let k_max = cfg.kernels.k_max();

    let stem = dense(tape, store, pos, "renet.stem", Activation::Relu)?;
    let mut lvl = LevelState::new(tape, points, pos, stem)?;
    let mut pyramid = Vec::with_capacity(levels);
    let mut nbrs = Vec::with_capacity(levels);
    for (l, block) in enc.iter().enumerate() {
        if l > 0 {
            lvl = pool(tape, &lvl, cfg.pool_ratio, cfg.pool_k)?;
        }
        let nbr = knn_self(&lvl.points, k_max.min(lvl.points.len()))?;
        let nbr = narrow_kernels(&nbr, &cfg.kernels)?;
        let (y, _) = kernels::rpsk_forward(tape, store, lvl.features, &nbr.0, &with_sizes(block, &nbr.1))?;
        lvl.features = y;
        pyramid.push(lvl.clone());
        nbrs.push(nbr);
    }
    let mut up = pyramid[levels - 1].clone();
    for l in (0..levels - 1).rev() {
        let fine = &pyramid[l];
        let k = cfg.unpool_k.min(up.points.len());
        let u = kernels::eu_unpool(tape, &up, &fine.points, fine.pos, k)?;
        let cat = tape.concat_cols(&[u, fine.features])?;
        let (y, _) = kernels::rpsk_forward(tape, store, cat, &nbrs[l].0, &with_sizes(&dec[l], &nbrs[l].1))?;
        up = LevelState {
            features: y,
            ..fine.clone()
        };
    }

    let edge = knn_self(&up.points, cfg.edge_k.min(n0))?;
    let efe = EfeParams::new("renet.efe", cfg.renet_widths[0], factor)?;
    let expanded_feats = kernels::efe_expand(tape, store, up.features, &edge, &efe)?;
    let h = dense(tape, store, expanded_feats, "renet.head1", Activation::Relu)?;
    let offsets = dense(tape, store, h, "renet.head2", Activation::None)?;
    let rep: Rc<[usize]> = (0..n0 * factor).map(|r| r / factor).collect();
    let anchors = tape.gather_rows(pos, rep)?;
    let expanded = tape.add(anchors, offsets)?;
    let keep = fps_from_extreme(&tape.value(expanded).to_points(), out_n)?;
    let fine = tape.gather_rows(expanded, keep.into())?;
    Ok(RenetOutput {
        fine,
        expanded,
        factor,
    })
}

/// Kernel sizes clipped to small levels. Returns the neighbourhood and the
/// `(k_a, k_b)` actually used.
fn narrow_kernels(
    nbr: &geometry::NeighborhoodIndex,
    cfg: &KernelConfig,
) -> Result<(geometry::NeighborhoodIndex, (usize, usize))> {
    let n = nbr.k();
    let ka = cfg.k_a.min(n);
    let mut kb = cfg.k_b.min(n);
    if cfg.kernel_selection && ka == kb {
        // both clipped to the level size: keep the branches distinct
        kb = if ka > 1 { ka - 1 } else { ka };
    }
    Ok((nbr.clone(), (ka, kb)))
}

fn with_sizes(block: &RpskParams, sizes: &(usize, usize)) -> RpskParams {
    let mut b = block.clone();
    b.psk.k_a = sizes.0;
    b.psk.k_b = sizes.1;
    b
}

/// Scalar loss values of one joint evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub rec: f64,
    pub com: f64,
    pub fine: f64,
    pub kl_rec: f64,
    pub kl_com: f64,
    pub total: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct JointLoss {
    pub total: Var,
    pub rec: Option<PathLoss>,
    pub com: PathLoss,
    pub fine_cd: Var,
    pub fine: Var,
}

impl JointLoss {
    pub fn components(&self, tape: &Tape) -> LossComponents {
        let v = |x: Var| tape.scalar(x);
        LossComponents {
            rec: self.rec.map_or(0.0, |r| v(r.loss)),
            com: v(self.com.loss),
            fine: v(self.fine_cd),
            kl_rec: self.rec.and_then(|r| r.kl).map_or(0.0, v),
            kl_com: self.com.kl.map_or(0.0, v),
            total: v(self.total),
        }
    }
}

/// `lambda_rec * L_rec + lambda_com * L_com + lambda_fine * CD(Y'_f, Y)`,
/// where `Y'_f` refines the completion-path coarse output. `lambda_kl` is
/// the current (possibly warmed-up) KL weight.
pub fn joint_loss(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &ModelConfig,
    weights: &LossWeights,
    lambda_kl: f64,
    x: &[Point],
    y: &[Point],
    rng: &mut impl Rng,
) -> Result<JointLoss> {
    joint_loss_with_link(tape, store, cfg, weights, lambda_kl, x, y, None, rng)
}

/// [`joint_loss`] with the distribution link reading `q(z|Y)`'s mean and
/// log-variance from `link` instead of the encoder. Given the encoder's own
/// values, the result and its gradient equal those of [`joint_loss`], and the
/// stop-gradient becomes an ordinary constant that finite differences can see.
#[allow(clippy::too_many_arguments)]
pub fn joint_loss_with_link(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &ModelConfig,
    weights: &LossWeights,
    lambda_kl: f64,
    x: &[Point],
    y: &[Point],
    link: Option<(&Tensor, &Tensor)>,
    rng: &mut impl Rng,
) -> Result<JointLoss> {
    let (rec, q) = if cfg.dual_path {
        let (r, q) = reconstruction_path_loss(tape, store, cfg, y, lambda_kl, rng)?;
        let q = match link {
            Some((m, l)) => {
                let mean = tape.input(m.clone());
                Encoded {
                    global: q.global,
                    mean,
                    logvar: Some(tape.input(l.clone())),
                }
            }
            None => q,
        };
        (Some(r), Some(q))
    } else {
        (None, None)
    };
    let com = completion_path_loss(tape, store, cfg, x, y, lambda_kl, q, rng)?;
    let refined = renet_forward(tape, store, cfg, x, com.output, y.len())?;
    let target = tape.input(Tensor::from_points(y));
    let fine_cd = tape.chamfer(refined.fine, target)?;
    let mut terms = Vec::with_capacity(3);
    if let Some(r) = rec {
        terms.push((weights.lambda_rec, r.loss));
    }
    terms.push((weights.lambda_com, com.loss));
    terms.push((weights.lambda_fine, fine_cd));
    let total = weighted_sum(tape, &terms)?;
    Ok(JointLoss {
        total,
        rec,
        com,
        fine_cd,
        fine: refined.fine,
    })
}

/// Coarse and fine completions of `x` from a sample of `p(z | X)`. Only
/// shared and partial-head parameters are read.
pub fn infer(
    store: &ParamStore,
    cfg: &ModelConfig,
    x: &[Point],
    out_n: usize,
    rng: &mut impl Rng,
) -> Result<(Vec<Point>, Vec<Point>)> {
    let mut tape = Tape::new();
    let p = encode(&mut tape, store, cfg, x, Head::Partial)?;
    let z = latent(&mut tape, &p, &draw_eps(cfg.d_z, rng))?;
    let coarse = decode_coarse(&mut tape, store, cfg, z, p.global)?;
    let out = renet_forward(&mut tape, store, cfg, x, coarse, out_n)?;
    tape.check_finite()?;
    Ok((tape.value(coarse).to_points(), tape.value(out.fine).to_points()))
}
