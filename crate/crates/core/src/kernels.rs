//! Relational feature kernels over point neighbourhoods.
//!
//! * PSA: neighbourhood aggregation `y_i = sum_j alpha_ij * beta(x_j)` where
//!   `alpha_ij = gamma([sigma(x_i) | xi(x_j)])`, normalised by a softmax over
//!   the neighbourhood.
//! * PSK: two PSA branches with different neighbourhood sizes fused by
//!   channelwise gates computed from the pooled sum of both branches.
//! * R-PSK: PSK followed by a linear output layer, plus a residual path.
//! * EP / EU: farthest-point pooling with neighbourhood max, and
//!   inverse-distance unpooling.
//! * EFE: multi-branch feature expansion with edge (neighbourhood max)
//!   context.
//!
//! Every kernel records onto a [`Tape`] and reads weights from a
//! [`ParamStore`] by name.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::diff::{Activation, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::geometry::{self, NeighborhoodIndex, Point};

/// Pointwise linear layer `{prefix}.w` with optional `{prefix}.b`, then `act`.
pub fn dense(tape: &mut Tape, store: &ParamStore, x: Var, prefix: &str, act: Activation) -> Result<Var> {
    let w = tape.param(store, &format!("{prefix}.w"))?;
    let bias_name = format!("{prefix}.b");
    let b = if store.contains(&bias_name) {
        Some(tape.param(store, &bias_name)?)
    } else {
        None
    };
    let y = tape.linear(x, w, b)?;
    Ok(tape.activate(y, act))
}

/// Kernel hyper-parameters shared by every block of a network.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KernelConfig {
    pub k_a: usize,
    pub k_b: usize,
    /// Learned attention weights; when off, PSA averages `beta` uniformly.
    pub psa: bool,
    /// Two-branch selective fusion; when off, only the `k_a` branch is used.
    pub kernel_selection: bool,
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self {
            k_a: 8,
            k_b: 16,
            psa: true,
            kernel_selection: true,
        }
    }
}

impl KernelConfig {
    /// Largest neighbourhood any block asks for.
    pub fn k_max(&self) -> usize {
        if self.kernel_selection {
            self.k_a.max(self.k_b)
        } else {
            self.k_a
        }
    }
}

/// Width of `sigma`, `xi` and the hidden layer of `gamma` for `c` output
/// channels.
pub fn relation_width(c: usize) -> usize {
    (c / 4).max(4)
}

/// Width of the squeezed channel descriptor in PSK.
pub fn reduction_width(c: usize) -> usize {
    (c / 4).max(8).min(c.saturating_sub(1)).max(1)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PsaParams {
    pub prefix: String,
    pub cin: usize,
    pub cout: usize,
    /// Width of `sigma`, `xi` and the hidden layer of `gamma`.
    pub rel: usize,
    pub attention: bool,
}

impl PsaParams {
    pub fn new(prefix: impl Into<String>, cin: usize, cout: usize, attention: bool) -> Self {
        Self {
            prefix: prefix.into(),
            cin,
            cout,
            rel: relation_width(cout),
            attention,
        }
    }

    pub fn name(&self, part: &str) -> String {
        format!("{}.{part}", self.prefix)
    }

    pub fn init(&self, store: &mut ParamStore) -> Result<()> {
        if self.attention {
            store.init_linear(&self.name("sigma"), self.cin, self.rel, true)?;
            store.init_linear(&self.name("xi"), self.cin, self.rel, true)?;
            store.init_linear(&self.name("gamma1"), 2 * self.rel, self.rel, true)?;
            store.init_linear(&self.name("gamma2"), self.rel, self.cout, false)?;
        }
        store.init_linear(&self.name("beta"), self.cin, self.cout, true)
    }
}

fn repeat_index(n: usize, k: usize) -> Rc<[usize]> {
    (0..n).flat_map(|i| std::iter::repeat_n(i, k)).collect()
}

/// Point self-attention over `nbr` (one row of `k` indices per point).
pub fn psa_forward(tape: &mut Tape, store: &ParamStore, x: Var, nbr: &NeighborhoodIndex, p: &PsaParams) -> Result<Var> {
    let n = tape.value(x).rows();
    if nbr.rows() != n {
        return Err(Error::contract(format!("psa: {} neighbourhoods for {n} points", nbr.rows())));
    }
    let k = nbr.k();
    let flat: Rc<[usize]> = nbr.flat().into();
    let b = dense(tape, store, x, &p.name("beta"), Activation::None)?;
    let out = if p.attention {
        let s = dense(tape, store, x, &p.name("sigma"), Activation::None)?;
        let t = dense(tape, store, x, &p.name("xi"), Activation::None)?;
        // gamma1 applied to [s_i || t_j] splits into a per-point term for each half.
        let w1 = tape.param(store, &p.name("gamma1.w"))?;
        let b1 = tape.param(store, &p.name("gamma1.b"))?;
        let w_s = tape.gather_rows(w1, (0..p.rel).collect::<Vec<_>>().into())?;
        let w_t = tape.gather_rows(w1, (p.rel..2 * p.rel).collect::<Vec<_>>().into())?;
        let hs = tape.linear(s, w_s, Some(b1))?;
        let ht = tape.linear(t, w_t, None)?;
        let hi = tape.gather_rows(hs, repeat_index(n, k))?;
        let hj = tape.gather_rows(ht, flat.clone())?;
        let pre = tape.add(hi, hj)?;
        let h = tape.activate(pre, Activation::Relu);
        let logits = dense(tape, store, h, &p.name("gamma2"), Activation::None)?;
        if tape.value(logits).cols() != tape.value(b).cols() {
            return Err(Error::contract("psa: alpha and beta widths differ"));
        }
        tape.attend(logits, b, flat, k)?
    } else {
        let bj = tape.gather_rows(b, flat)?;
        let s = tape.group_sum(bj, k)?;
        tape.scale(s, 1.0 / k as f64)
    };
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PskParams {
    pub prefix: String,
    pub c: usize,
    pub k_a: usize,
    pub k_b: usize,
    pub d: usize,
    pub branch_a: PsaParams,
    pub branch_b: PsaParams,
    pub selection: bool,
}

impl PskParams {
    pub fn new(prefix: impl Into<String>, c: usize, cfg: &KernelConfig) -> Result<Self> {
        let prefix = prefix.into();
        if cfg.kernel_selection && cfg.k_a == cfg.k_b {
            return Err(Error::config("PSK kernel sizes must differ"));
        }
        Ok(Self {
            branch_a: PsaParams::new(format!("{prefix}.a"), c, c, cfg.psa),
            branch_b: PsaParams::new(format!("{prefix}.b"), c, c, cfg.psa),
            prefix,
            c,
            k_a: cfg.k_a,
            k_b: cfg.k_b,
            d: reduction_width(c),
            selection: cfg.kernel_selection,
        })
    }

    pub fn name(&self, part: &str) -> String {
        format!("{}.{part}", self.prefix)
    }

    pub fn init(&self, store: &mut ParamStore) -> Result<()> {
        self.branch_a.init(store)?;
        if self.selection {
            self.branch_b.init(store)?;
            store.init_linear(&self.name("fuse"), self.c, self.d, true)?;
            store.init_linear(&self.name("gate_a"), self.d, self.c, false)?;
            store.init_linear(&self.name("gate_b"), self.d, self.c, false)?;
        }
        Ok(())
    }
}

/// Intermediate values of one PSK evaluation.
#[derive(Clone, Copy, Debug)]
pub struct PskOutput {
    pub out: Var,
    pub branch_a: Var,
    pub branch_b: Option<Var>,
    pub gate_a: Option<Var>,
    pub gate_b: Option<Var>,
}

/// Two-branch selective kernel. `nbr` must hold at least `max(k_a, k_b)`
/// neighbours per point; each branch uses the leading `k` of them.
pub fn psk_forward(tape: &mut Tape, store: &ParamStore, x: Var, nbr: &NeighborhoodIndex, p: &PskParams) -> Result<PskOutput> {
    let ua = psa_forward(tape, store, x, &nbr.truncate(p.k_a)?, &p.branch_a)?;
    if !p.selection {
        return Ok(PskOutput {
            out: ua,
            branch_a: ua,
            branch_b: None,
            gate_a: None,
            gate_b: None,
        });
    }
    let ub = psa_forward(tape, store, x, &nbr.truncate(p.k_b)?, &p.branch_b)?;
    let u = tape.add(ua, ub)?;
    let s = tape.mean_rows(u)?;
    let s = tape.reshape(s, vec![1, p.c])?;
    let z = dense(tape, store, s, &p.name("fuse"), Activation::Relu)?;
    let la = dense(tape, store, z, &p.name("gate_a"), Activation::None)?;
    let lb = dense(tape, store, z, &p.name("gate_b"), Activation::None)?;
    let (a, b) = tape.softmax_pair(la, lb)?;
    let a = tape.reshape(a, vec![p.c])?;
    let b = tape.reshape(b, vec![p.c])?;
    let va = tape.mul_row(ua, a)?;
    let vb = tape.mul_row(ub, b)?;
    Ok(PskOutput {
        out: tape.add(va, vb)?,
        branch_a: ua,
        branch_b: Some(ub),
        gate_a: Some(a),
        gate_b: Some(b),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct RpskParams {
    pub prefix: String,
    pub cin: usize,
    pub cout: usize,
    pub psk: PskParams,
}

impl RpskParams {
    pub fn new(prefix: impl Into<String>, cin: usize, cout: usize, cfg: &KernelConfig) -> Result<Self> {
        let prefix = prefix.into();
        Ok(Self {
            psk: PskParams::new(format!("{prefix}.psk"), cin, cfg)?,
            prefix,
            cin,
            cout,
        })
    }

    pub fn name(&self, part: &str) -> String {
        format!("{}.{part}", self.prefix)
    }

    pub fn init(&self, store: &mut ParamStore) -> Result<()> {
        self.psk.init(store)?;
        store.init_linear(&self.name("out"), self.cin, self.cout, true)?;
        if self.cin != self.cout {
            store.init_linear(&self.name("proj"), self.cin, self.cout, false)?;
        }
        Ok(())
    }
}

/// Main path `out(relu(psk(x)))` plus the residual `proj(x)` (identity when
/// widths agree). Returns `(output, main_path)`.
pub fn rpsk_forward(tape: &mut Tape, store: &ParamStore, x: Var, nbr: &NeighborhoodIndex, p: &RpskParams) -> Result<(Var, Var)> {
    let v = psk_forward(tape, store, x, nbr, &p.psk)?.out;
    let v = tape.activate(v, Activation::Relu);
    let main = dense(tape, store, v, &p.name("out"), Activation::None)?;
    let res = if p.cin == p.cout {
        x
    } else {
        dense(tape, store, x, &p.name("proj"), Activation::None)?
    };
    Ok((tape.add(main, res)?, main))
}

/// One level of the point pyramid.
#[derive(Clone, Debug)]
pub struct LevelState {
    pub points: Vec<Point>,
    /// `points` on the tape, so that unpooling can differentiate through
    /// positions.
    pub pos: Var,
    pub features: Var,
    /// Index of each point in the next finer level.
    pub parent_index: Vec<usize>,
}

impl LevelState {
    pub fn new(tape: &mut Tape, points: Vec<Point>, pos: Var, features: Var) -> Result<Self> {
        if tape.value(features).rows() != points.len() || tape.value(pos).rows() != points.len() {
            return Err(Error::contract("level: feature rows differ from point count"));
        }
        let parent_index = (0..points.len()).collect();
        Ok(Self {
            points,
            pos,
            features,
            parent_index,
        })
    }
}

/// Farthest-point pooling to `ceil(ratio * N)` points; each kept point takes
/// the channelwise max over its `k` nearest points of the finer level.
pub fn ep_pool(tape: &mut Tape, level: &LevelState, ratio: f64, k: usize, seed: u64) -> Result<LevelState> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::contract(format!("pooling ratio {ratio} outside (0, 1)")));
    }
    let n = level.points.len();
    let m = (ratio * n as f64).ceil() as usize;
    if m < 4 {
        return Err(Error::contract(format!("pooling {n} points by {ratio} leaves {m} < 4")));
    }
    let keep = geometry::fps_seeded(&level.points, m, seed)?;
    let points: Vec<Point> = keep.iter().map(|&i| level.points[i]).collect();
    let nbr = geometry::knn_query(&points, &level.points, k)?;
    let grouped = tape.gather_rows(level.features, nbr.flat().into())?;
    let features = tape.group_max(grouped, k)?;
    let pos = tape.gather_rows(level.pos, keep.as_slice().into())?;
    Ok(LevelState {
        points,
        pos,
        features,
        parent_index: keep,
    })
}

/// Inverse-distance interpolation of `coarse` features onto `fine_points`
/// from the `k` nearest coarse points.
pub fn eu_unpool(tape: &mut Tape, coarse: &LevelState, fine_points: &[Point], fine_pos: Var, k: usize) -> Result<Var> {
    let nbr = geometry::knn_query(fine_points, &coarse.points, k)?;
    tape.idw_interpolate(fine_pos, coarse.pos, coarse.features, nbr.flat().into(), k)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EfeParams {
    pub prefix: String,
    pub c: usize,
    pub factor: usize,
}

impl EfeParams {
    pub fn new(prefix: impl Into<String>, c: usize, factor: usize) -> Result<Self> {
        if factor < 2 {
            return Err(Error::contract(format!("expansion factor {factor} < 2")));
        }
        Ok(Self {
            prefix: prefix.into(),
            c,
            factor,
        })
    }

    pub fn branch(&self, r: usize) -> String {
        format!("{}.branch{r}", self.prefix)
    }

    pub fn init(&self, store: &mut ParamStore) -> Result<()> {
        (0..self.factor).try_for_each(|r| store.init_linear(&self.branch(r), 2 * self.c, self.c, true))
    }
}

/// Expands `N x C` features to `(N * factor) x C`. Branch `r` of point `i`
/// lands on row `i * factor + r`.
pub fn efe_expand(tape: &mut Tape, store: &ParamStore, x: Var, nbr: &NeighborhoodIndex, p: &EfeParams) -> Result<Var> {
    let n = tape.value(x).rows();
    let grouped = tape.gather_rows(x, nbr.flat().into())?;
    let edge = tape.group_max(grouped, nbr.k())?;
    let h = tape.concat_cols(&[x, edge])?;
    let branches = (0..p.factor)
        .map(|r| dense(tape, store, h, &p.branch(r), Activation::Relu))
        .collect::<Result<Vec<_>>>()?;
    let stacked = tape.concat_rows(&branches)?;
    let order: Rc<[usize]> = (0..n * p.factor).map(|row| (row % p.factor) * n + row / p.factor).collect();
    tape.gather_rows(stacked, order)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::diff::{grad_check, grad_check_params, Tensor};
    use crate::geometry::knn_self;

    fn rand_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<Point> {
        (0..n)
            .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
            .collect()
    }

    fn rand_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
        Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Fills every parameter (biases included) with uniform noise.
    fn randomize(store: &mut ParamStore, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (_, t) in store.iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.8..0.8));
        }
    }

    fn set(store: &mut ParamStore, name: &str, f: impl Fn(usize) -> f64) {
        let t = store.get_mut(name).unwrap();
        t.data_mut().iter_mut().enumerate().for_each(|(i, v)| *v = f(i));
    }

    fn matvec(store: &ParamStore, prefix: &str, x: &[f64]) -> Vec<f64> {
        let w = store.get(&format!("{prefix}.w")).unwrap();
        let (cin, cout) = (w.shape()[0], w.shape()[1]);
        assert_eq!(x.len(), cin);
        let mut y: Vec<f64> = match store.get(&format!("{prefix}.b")) {
            Some(b) => b.data().to_vec(),
            None => vec![0.0; cout],
        };
        for (i, xi) in x.iter().enumerate() {
            for (o, yo) in y.iter_mut().enumerate() {
                *yo += xi * w.data()[i * cout + o];
            }
        }
        y
    }

    fn relu(v: Vec<f64>) -> Vec<f64> {
        v.into_iter().map(|x| x.max(0.0)).collect()
    }

    /// Straight-line PSA: every delta, alpha and beta materialised.
    fn naive_psa(store: &ParamStore, p: &PsaParams, x: &Tensor, nbr: &NeighborhoodIndex) -> Vec<Vec<f64>> {
        (0..x.rows())
            .map(|i| {
                let sig = matvec(store, &p.name("sigma"), x.row(i));
                let logits: Vec<Vec<f64>> = nbr
                    .row(i)
                    .iter()
                    .map(|&j| {
                        let mut delta = sig.clone();
                        delta.extend(matvec(store, &p.name("xi"), x.row(j)));
                        let h = relu(matvec(store, &p.name("gamma1"), &delta));
                        matvec(store, &p.name("gamma2"), &h)
                    })
                    .collect();
                let mut y = vec![0.0; p.cout];
                for c in 0..p.cout {
                    let m = logits.iter().map(|l| l[c]).fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = logits.iter().map(|l| (l[c] - m).exp()).sum();
                    for (jj, &j) in nbr.row(i).iter().enumerate() {
                        let beta = matvec(store, &p.name("beta"), x.row(j));
                        y[c] += (logits[jj][c] - m).exp() / z * beta[c];
                    }
                }
                y
            })
            .collect()
    }

    #[test]
    fn psa_self_only_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = PsaParams::new("psa", 3, 3, true);
        let mut store = ParamStore::new(1);
        p.init(&mut store).unwrap();
        set(&mut store, "psa.gamma2.w", |_| 0.0);
        set(&mut store, "psa.beta.w", |i| if i % 4 == 0 { 1.0 } else { 0.0 });
        set(&mut store, "psa.beta.b", |_| 0.0);
        let pts = rand_points(&mut rng, 5);
        let x = rand_tensor(&mut rng, 5, 3);
        let mut t = Tape::new();
        let xv = t.input(x.clone());
        let y = psa_forward(&mut t, &store, xv, &knn_self(&pts, 1).unwrap(), &p).unwrap();
        assert_eq!(t.value(y).data(), x.data());
    }

    #[test]
    fn psa_matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = PsaParams::new("psa", 2, 2, true);
        let mut store = ParamStore::new(2);
        p.init(&mut store).unwrap();
        randomize(&mut store, 3);
        let pts = rand_points(&mut rng, 3);
        let nbr = knn_self(&pts, 2).unwrap();
        let x = rand_tensor(&mut rng, 3, 2);
        let mut t = Tape::new();
        let xv = t.input(x.clone());
        let y = psa_forward(&mut t, &store, xv, &nbr, &p).unwrap();
        let want = naive_psa(&store, &p, &x, &nbr);
        for (i, row) in want.iter().enumerate() {
            for (a, b) in t.value(y).row(i).iter().zip(row) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn psa_uniform_when_attention_off() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = PsaParams::new("psa", 3, 2, false);
        let mut store = ParamStore::new(4);
        p.init(&mut store).unwrap();
        assert!(!store.contains("psa.gamma1.w"));
        let pts = rand_points(&mut rng, 6);
        let nbr = knn_self(&pts, 3).unwrap();
        let x = rand_tensor(&mut rng, 6, 3);
        let mut t = Tape::new();
        let xv = t.input(x.clone());
        let y = psa_forward(&mut t, &store, xv, &nbr, &p).unwrap();
        for i in 0..6 {
            for c in 0..2 {
                let want: f64 = nbr.row(i).iter().map(|&j| matvec(&store, "psa.beta", x.row(j))[c]).sum::<f64>() / 3.0;
                assert!((t.value(y).row(i)[c] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn psa_width_mismatch_is_contract_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = PsaParams::new("psa", 2, 2, true);
        let mut store = ParamStore::new(5);
        p.init(&mut store).unwrap();
        store.get_mut("psa.beta.w").map(|t| *t = Tensor::zeros(vec![2, 3]));
        store.get_mut("psa.beta.b").map(|t| *t = Tensor::zeros(vec![3]));
        let pts = rand_points(&mut rng, 4);
        let mut t = Tape::new();
        let xv = t.input(rand_tensor(&mut rng, 4, 2));
        let err = psa_forward(&mut t, &store, xv, &knn_self(&pts, 2).unwrap(), &p).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    fn psk_setup(seed: u64, n: usize, c: usize, cfg: KernelConfig) -> (ParamStore, PskParams, Vec<Point>, Tensor) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = PskParams::new("psk", c, &cfg).unwrap();
        let mut store = ParamStore::new(seed);
        p.init(&mut store).unwrap();
        randomize(&mut store, seed + 100);
        (store, p, rand_points(&mut rng, n), rand_tensor(&mut rng, n, c))
    }

    fn small_cfg() -> KernelConfig {
        KernelConfig {
            k_a: 3,
            k_b: 5,
            ..KernelConfig::default()
        }
    }

    #[test]
    fn psk_matches_manual_composition() {
        let (store, p, pts, x) = psk_setup(6, 9, 4, small_cfg());
        let nbr = knn_self(&pts, 5).unwrap();
        let mut t = Tape::new();
        let xv = t.input(x.clone());
        let out = psk_forward(&mut t, &store, xv, &nbr, &p).unwrap();
        let ua = naive_psa(&store, &p.branch_a, &x, &nbr.truncate(3).unwrap());
        let ub = naive_psa(&store, &p.branch_b, &x, &nbr.truncate(5).unwrap());
        let s: Vec<f64> = (0..4).map(|c| (0..9).map(|i| ua[i][c] + ub[i][c]).sum::<f64>() / 9.0).collect();
        let z = relu(matvec(&store, "psk.fuse", &s));
        let la = matvec(&store, "psk.gate_a", &z);
        let lb = matvec(&store, "psk.gate_b", &z);
        for i in 0..9 {
            for c in 0..4 {
                let a = la[c].exp() / (la[c].exp() + lb[c].exp());
                let b = lb[c].exp() / (la[c].exp() + lb[c].exp());
                let want = ua[i][c] * a + ub[i][c] * b;
                assert!((t.value(out.out).row(i)[c] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn psk_gates_sum_to_one() {
        for seed in 0..20 {
            let (store, p, pts, x) = psk_setup(seed, 12, 8, small_cfg());
            let mut t = Tape::new();
            let xv = t.input(x);
            let out = psk_forward(&mut t, &store, xv, &knn_self(&pts, 5).unwrap(), &p).unwrap();
            let (a, b) = (t.value(out.gate_a.unwrap()), t.value(out.gate_b.unwrap()));
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x + y - 1.0).abs() <= 1e-15);
            }
        }
    }

    #[test]
    fn psk_identical_branches_ignore_gates() {
        let cfg = small_cfg();
        let (mut store, mut p, pts, x) = psk_setup(7, 10, 4, cfg);
        p.k_b = p.k_a;
        let names: Vec<String> = store.names().filter(|n| n.starts_with("psk.a.")).map(String::from).collect();
        for n in names {
            let v = store.get(&n).unwrap().clone();
            *store.get_mut(&n.replacen("psk.a.", "psk.b.", 1)).unwrap() = v;
        }
        let mut t = Tape::new();
        let xv = t.input(x);
        let out = psk_forward(&mut t, &store, xv, &knn_self(&pts, 5).unwrap(), &p).unwrap();
        let (v, ua) = (t.value(out.out), t.value(out.branch_a));
        for (a, b) in v.data().iter().zip(ua.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn saturated_gate_selects_first_branch() {
        let (mut store, p, pts, x) = psk_setup(8, 10, 8, small_cfg());
        set(&mut store, "psk.fuse.w", |_| 0.0);
        set(&mut store, "psk.fuse.b", |_| 1.0);
        set(&mut store, "psk.gate_a.w", |_| 50.0);
        set(&mut store, "psk.gate_b.w", |_| -50.0);
        let mut t = Tape::new();
        let xv = t.input(x);
        let out = psk_forward(&mut t, &store, xv, &knn_self(&pts, 5).unwrap(), &p).unwrap();
        for (a, b) in t.value(out.out).data().iter().zip(t.value(out.branch_a).data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn rpsk_identity_and_additivity() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = RpskParams::new("blk", 4, 4, &cfg).unwrap();
        let mut store = ParamStore::new(9);
        p.init(&mut store).unwrap();
        randomize(&mut store, 10);
        let pts = rand_points(&mut rng, 10);
        let nbr = knn_self(&pts, 5).unwrap();
        let x = rand_tensor(&mut rng, 10, 4);

        let mut t = Tape::new();
        let xv = t.input(x.clone());
        let (y, main) = rpsk_forward(&mut t, &store, xv, &nbr, &p).unwrap();
        let psk = psk_forward(&mut t, &store, xv, &nbr, &p.psk).unwrap().out;
        let v = t.activate(psk, Activation::Relu);
        let direct = dense(&mut t, &store, v, "blk.out", Activation::None).unwrap();
        for i in 0..x.len() {
            assert!((t.value(y).data()[i] - x.data()[i] - t.value(main).data()[i]).abs() < 1e-15);
            assert_eq!(t.value(main).data()[i], t.value(direct).data()[i]);
        }

        set(&mut store, "blk.out.w", |_| 0.0);
        set(&mut store, "blk.out.b", |_| 0.0);
        let mut t = Tape::new();
        let xv = t.input(x.clone());
        let (y, _) = rpsk_forward(&mut t, &store, xv, &nbr, &p).unwrap();
        assert_eq!(t.value(y).data(), x.data());
    }

    #[test]
    fn rpsk_gradients_match_finite_differences() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = RpskParams::new("blk", 3, 5, &cfg).unwrap();
        let mut store = ParamStore::new(11);
        p.init(&mut store).unwrap();
        randomize(&mut store, 12);
        let pts = rand_points(&mut rng, 8);
        let nbr = knn_self(&pts, 5).unwrap();
        let x = rand_tensor(&mut rng, 8, 3);
        // Query-side shifts cancel in the neighbourhood softmax, so some
        // parameters have an exactly zero gradient; a small readout keeps
        // their finite-difference noise under the absolute floor.
        let readout = Tensor::matrix(8, 5, rand_tensor(&mut rng, 8, 5).data().iter().map(|v| v * 1e-2).collect()).unwrap();
        let report = grad_check(
            |t, v| {
                let (y, _) = rpsk_forward(t, &store, v[0], &nbr, &p)?;
                let r = t.input(readout.clone());
                let m = t.mul(y, r)?;
                Ok(t.sum(m))
            },
            std::slice::from_ref(&x),
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");

        let xs = x.clone();
        let names: Vec<String> = store.names().map(String::from).collect();
        let report = grad_check_params(
            &store,
            &names,
            |t, s| {
                let xv = t.input(xs.clone());
                let (y, _) = rpsk_forward(t, s, xv, &nbr, &p)?;
                let r = t.input(readout.clone());
                let m = t.mul(y, r)?;
                Ok(t.sum(m))
            },
            1e-5,
            None,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    fn base_level(t: &mut Tape, pts: &[Point], feats: Tensor) -> LevelState {
        let pos = t.input(Tensor::from_points(pts));
        let f = t.input(feats);
        LevelState::new(t, pts.to_vec(), pos, f).unwrap()
    }

    #[test]
    fn ep_pool_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let pts = rand_points(&mut rng, 8);
        let x = rand_tensor(&mut rng, 8, 3);
        let mut t = Tape::new();
        let lvl = base_level(&mut t, &pts, x.clone());

        // no decimation
        let same = ep_pool(&mut t, &lvl, 0.99, 3, 0).unwrap();
        let mut kept = same.parent_index.clone();
        kept.sort();
        assert_eq!(kept, (0..8).collect::<Vec<_>>());
        let full = knn_self(&pts, 3).unwrap();
        for (r, &i) in same.parent_index.iter().enumerate() {
            for c in 0..3 {
                let want = full.row(i).iter().map(|&j| x.row(j)[c]).fold(f64::NEG_INFINITY, f64::max);
                assert_eq!(t.value(same.features).row(r)[c], want);
            }
        }

        // brute-force grouping oracle at half resolution
        let half = ep_pool(&mut t, &lvl, 0.5, 3, 7).unwrap();
        assert_eq!(half.points.len(), 4);
        for (r, q) in half.points.iter().enumerate() {
            assert_eq!(*q, pts[half.parent_index[r]]);
            let mut order: Vec<usize> = (0..8).collect();
            order.sort_by(|&a, &b| geometry::dist2(q, &pts[a]).total_cmp(&geometry::dist2(q, &pts[b])).then(a.cmp(&b)));
            for c in 0..3 {
                let want = order[..3].iter().map(|&j| x.row(j)[c]).fold(f64::NEG_INFINITY, f64::max);
                assert_eq!(t.value(half.features).row(r)[c], want);
            }
        }

        // constant field
        let lvl_c = base_level(&mut t, &pts, Tensor::filled(vec![8, 2], 0.25));
        let pooled = ep_pool(&mut t, &lvl_c, 0.5, 4, 1).unwrap();
        assert!(t.value(pooled.features).data().iter().all(|&v| v == 0.25));

        assert!(ep_pool(&mut t, &lvl, 0.3, 3, 0).is_err());
        assert!(ep_pool(&mut t, &lvl, 1.0, 3, 0).is_err());
    }

    #[test]
    fn eu_unpool_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let pts = rand_points(&mut rng, 12);
        let x = rand_tensor(&mut rng, 12, 3);
        let mut t = Tape::new();
        let lvl = base_level(&mut t, &pts, x.clone());
        let back = eu_unpool(&mut t, &lvl, &pts, lvl.pos, 3).unwrap();
        assert_eq!(t.value(back).data(), x.data());

        let pooled = ep_pool(&mut t, &lvl, 0.5, 3, 2).unwrap();
        let up = eu_unpool(&mut t, &pooled, &pts, lvl.pos, 3).unwrap();
        assert_eq!(t.value(up).rows(), 12);

        let lvl_c = base_level(&mut t, &pts, Tensor::filled(vec![12, 2], -1.5));
        let fine = rand_points(&mut rng, 20);
        let fpos = t.input(Tensor::from_points(&fine));
        let up = eu_unpool(&mut t, &lvl_c, &fine, fpos, 4).unwrap();
        assert!(t.value(up).data().iter().all(|&v| (v + 1.5).abs() < 1e-12));

        // coarse at x = 0, 1, 3 with features 10, 20, 40; fine point at 0.5
        let coarse = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [3.0, 0.0, 0.0]];
        let lvl = base_level(&mut t, &coarse, Tensor::matrix(3, 1, vec![10.0, 20.0, 40.0]).unwrap());
        let fine = vec![[0.5, 0.0, 0.0], [2.0, 0.0, 0.0]];
        let fpos = t.input(Tensor::from_points(&fine));
        let up = eu_unpool(&mut t, &lvl, &fine, fpos, 2).unwrap();
        // equidistant pairs: plain averages
        assert!((t.value(up).data()[0] - 15.0).abs() < 1e-12);
        assert!((t.value(up).data()[1] - 30.0).abs() < 1e-12);
        let fine = vec![[0.25, 0.0, 0.0]];
        let fpos = t.input(Tensor::from_points(&fine));
        let up = eu_unpool(&mut t, &lvl, &fine, fpos, 2).unwrap();
        let (w0, w1) = (1.0 / (0.0625 + 1e-8), 1.0 / (0.5625 + 1e-8));
        assert!((t.value(up).data()[0] - (10.0 * w0 + 20.0 * w1) / (w0 + w1)).abs() < 1e-12);
    }

    #[test]
    fn efe_shapes_and_branch_collapse() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        for (n, factor) in [(5, 2), (7, 3), (4, 6)] {
            let p = EfeParams::new("efe", 3, factor).unwrap();
            let mut store = ParamStore::new(15);
            p.init(&mut store).unwrap();
            let pts = rand_points(&mut rng, n);
            let mut t = Tape::new();
            let xv = t.input(rand_tensor(&mut rng, n, 3));
            let y = efe_expand(&mut t, &store, xv, &knn_self(&pts, 3).unwrap(), &p).unwrap();
            assert_eq!(t.value(y).shape(), &[n * factor, 3]);
        }
        assert!(EfeParams::new("efe", 3, 1).is_err());

        let p = EfeParams::new("efe", 4, 2).unwrap();
        let mut store = ParamStore::new(16);
        p.init(&mut store).unwrap();
        randomize(&mut store, 17);
        let w = store.get("efe.branch0.w").unwrap().clone();
        let b = store.get("efe.branch0.b").unwrap().clone();
        *store.get_mut("efe.branch1.w").unwrap() = w;
        *store.get_mut("efe.branch1.b").unwrap() = b;
        let pts = rand_points(&mut rng, 6);
        let mut t = Tape::new();
        let xv = t.input(rand_tensor(&mut rng, 6, 4));
        let y = efe_expand(&mut t, &store, xv, &knn_self(&pts, 3).unwrap(), &p).unwrap();
        let y = t.value(y);
        for i in 0..6 {
            assert_eq!(y.row(2 * i), y.row(2 * i + 1));
        }
    }

    #[test]
    fn efe_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let p = EfeParams::new("efe", 4, 2).unwrap();
        let mut store = ParamStore::new(18);
        p.init(&mut store).unwrap();
        randomize(&mut store, 19);
        let pts = rand_points(&mut rng, 6);
        let nbr = knn_self(&pts, 3).unwrap();
        let readout = rand_tensor(&mut rng, 12, 4);
        let report = grad_check(
            |t, v| {
                let y = efe_expand(t, &store, v[0], &nbr, &p)?;
                let r = t.input(readout.clone());
                let m = t.mul(y, r)?;
                Ok(t.sum(m))
            },
            &[rand_tensor(&mut rng, 6, 4)],
            1e-6,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn kernels_are_permutation_equivariant() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let p = RpskParams::new("blk", 4, 6, &cfg).unwrap();
        let mut store = ParamStore::new(20);
        p.init(&mut store).unwrap();
        randomize(&mut store, 21);
        let pts = rand_points(&mut rng, 16);
        let x = rand_tensor(&mut rng, 16, 4);
        let run = |pts: &[Point], x: Tensor| {
            let mut t = Tape::new();
            let xv = t.input(x);
            let nbr = knn_self(pts, 5).unwrap();
            let psa = psa_forward(&mut t, &store, xv, &nbr.truncate(3).unwrap(), &p.psk.branch_a).unwrap();
            let psk = psk_forward(&mut t, &store, xv, &nbr, &p.psk).unwrap().out;
            let (y, _) = rpsk_forward(&mut t, &store, xv, &nbr, &p).unwrap();
            [psa, psk, y].map(|v| t.value(v).clone())
        };
        let base = run(&pts, x.clone());
        for _ in 0..10 {
            let mut perm: Vec<usize> = (0..16).collect();
            for i in (1..16).rev() {
                perm.swap(i, rng.random_range(0..=i));
            }
            let ppts: Vec<Point> = perm.iter().map(|&i| pts[i]).collect();
            let px = Tensor::matrix(16, 4, perm.iter().flat_map(|&i| x.row(i).to_vec()).collect()).unwrap();
            let out = run(&ppts, px);
            for (o, b) in out.iter().zip(&base) {
                for (r, &i) in perm.iter().enumerate() {
                    assert_eq!(o.row(r), b.row(i));
                }
            }
        }
    }
}
