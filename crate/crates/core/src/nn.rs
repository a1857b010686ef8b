//! Neural building blocks: parameter storage, linear and attention layers,
//! sinusoidal position embeddings, focal classification loss, and a decoupled
//! AdamW optimizer.
//!
//! Blocks are free functions over [`Graph`] vars so a forward pass is just a
//! sequence of op calls; parameters live in a [`ParamStore`] and are bound to
//! a fresh graph per pass.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand_core::RngCore;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Canonical uniform sample in `[lo, hi)` from 53 random mantissa bits.
pub fn uniform(rng: &mut impl RngCore, lo: f64, hi: f64) -> f64 {
    let u = (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
    lo + (hi - lo) * u
}

/// Xavier-uniform init for a `rows x cols` matrix.
pub fn xavier_uniform(rng: &mut impl RngCore, rows: usize, cols: usize) -> Tensor {
    let limit = libm::sqrt(6.0 / (rows + cols) as f64);
    let data: Vec<f64> = (0..rows * cols).map(|_| uniform(rng, -limit, limit)).collect();
    Tensor::new(&[rows, cols], data).expect("xavier shape")
}

/// Xavier-uniform init for a `cout x cin x k x k` convolution kernel.
pub fn xavier_conv(rng: &mut impl RngCore, cout: usize, cin: usize, k: usize) -> Tensor {
    let fan_in = cin * k * k;
    let fan_out = cout * k * k;
    let limit = libm::sqrt(6.0 / (fan_in + fan_out) as f64);
    let data: Vec<f64> = (0..cout * cin * k * k).map(|_| uniform(rng, -limit, limit)).collect();
    Tensor::new(&[cout, cin, k, k], data).expect("xavier conv shape")
}

// ----- parameter store -----

/// Index into a [`ParamStore`], stable across binds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    /// Position of the parameter in registration order; also its index into
    /// the bound variable vector.
    pub fn index(self) -> usize {
        self.0
    }

    /// Id of the parameter registered at `index`.
    pub fn from_index(index: usize) -> ParamId {
        ParamId(index)
    }
}

pub struct ParamEntry {
    pub name: String,
    pub tensor: Tensor,
    /// Per-parameter learning-rate multiplier (backbone params train slower).
    pub lr_mult: f64,
}

/// Named parameter set. Binding clones every tensor into a graph as leaves,
/// in registration order, so gradient vectors align with entry indices.
#[derive(Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    /// Registers a parameter. Names must be unique; they key checkpoints.
    pub fn add(&mut self, name: &str, tensor: Tensor, lr_mult: f64) -> ParamId {
        assert!(self.find(name).is_none(), "duplicate parameter name {name}");
        self.entries.push(ParamEntry { name: name.into(), tensor, lr_mult });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamEntry> {
        self.entries.iter()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    /// Binds every parameter into `g` as a leaf; `vars[id.0]` is the var for
    /// `ParamId(id.0)`.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.entries.iter().map(|e| g.leaf(e.tensor.clone(), trainable)).collect()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.len()).sum()
    }

    /// Sets the learning-rate multiplier on every parameter whose name starts
    /// with `prefix`; returns how many matched.
    pub fn set_lr_mult(&mut self, prefix: &str, mult: f64) -> usize {
        let mut hit = 0;
        for e in self.entries.iter_mut().filter(|e| e.name.starts_with(prefix)) {
            e.lr_mult = mult;
            hit += 1;
        }
        hit
    }
}

// ----- layers -----

/// `x . w` with optional row bias.
pub fn linear(g: &mut Graph, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let y = g.matmul(x, w)?;
    match b {
        Some(b) => g.add_row(y, b),
        None => Ok(y),
    }
}

/// Multi-head attention output: projected features and per-head weights.
pub struct MhaOutput {
    /// `Nq x d`.
    pub out: Var,
    /// `heads x Nq x Nk`, rows summing to 1.
    pub weights: Var,
}

/// Multi-head attention with optional additive position terms and an optional
/// additive pre-softmax bias.
///
/// Positions are added to queries and keys before their projections; values
/// stay position-free. Scores are scaled by `1/sqrt(head_dim)`; `bias`
/// (`heads x Nq x Nk`) is added to the scaled scores before the softmax.
/// Projections carry no bias terms.
#[allow(clippy::too_many_arguments)]
pub fn multi_head_attention(
    g: &mut Graph,
    heads: usize,
    q_in: Var,
    q_pos: Option<Var>,
    k_in: Var,
    k_pos: Option<Var>,
    v_in: Var,
    wq: Var,
    wk: Var,
    wv: Var,
    wo: Var,
    bias: Option<Var>,
) -> Result<MhaOutput> {
    let sq = g.shape(q_in).to_vec();
    let sk = g.shape(k_in).to_vec();
    if sq.len() != 2 || sk.len() != 2 || sq[1] != sk[1] {
        return Err(Error::shape(
            "attention",
            format!(
                "queries {} and keys {} must be rank 2 with one width",
                crate::error::shape_str(&sq),
                crate::error::shape_str(&sk)
            ),
        ));
    }
    let (nq, d) = (sq[0], sq[1]);
    let nk = sk[0];
    if g.shape(v_in) != [nk, d] {
        return Err(Error::shape(
            "attention",
            format!("values {} must match keys {nk}x{d}", crate::error::shape_str(g.shape(v_in))),
        ));
    }
    for (name, w) in [("wq", wq), ("wk", wk), ("wv", wv), ("wo", wo)] {
        if g.shape(w) != [d, d] {
            return Err(Error::shape(
                "attention",
                format!("{name} must be {d}x{d}, got {}", crate::error::shape_str(g.shape(w))),
            ));
        }
    }
    if heads == 0 || d % heads != 0 {
        return Err(Error::value(
            "attention",
            format!("width {d} is not divisible into {heads} heads"),
        ));
    }
    if let Some(b) = bias {
        if g.shape(b) != [heads, nq, nk] {
            return Err(Error::shape(
                "attention",
                format!(
                    "bias must be {heads}x{nq}x{nk}, got {}",
                    crate::error::shape_str(g.shape(b))
                ),
            ));
        }
    }
    let hd = d / heads;

    let q_sum = match q_pos {
        Some(p) => g.add(q_in, p)?,
        None => q_in,
    };
    let k_sum = match k_pos {
        Some(p) => g.add(k_in, p)?,
        None => k_in,
    };
    let q = g.matmul(q_sum, wq)?;
    let k = g.matmul(k_sum, wk)?;
    let v = g.matmul(v_in, wv)?;

    let scale = 1.0 / libm::sqrt(hd as f64);
    let mut head_outs = Vec::with_capacity(heads);
    let mut head_weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice(q, 1, h * hd, hd)?;
        let kh = g.slice(k, 1, h * hd, hd)?;
        let vh = g.slice(v, 1, h * hd, hd)?;
        let kht = g.transpose(kh)?;
        let scores = g.matmul(qh, kht)?;
        let mut scores = g.scale(scores, scale);
        if let Some(b) = bias {
            let bh = g.slice(b, 0, h, 1)?;
            let bh = g.reshape(bh, &[nq, nk])?;
            scores = g.add(scores, bh)?;
        }
        let attn = g.softmax(scores, 1)?;
        head_outs.push(g.matmul(attn, vh)?);
        head_weights.push(g.reshape(attn, &[1, nq, nk])?);
    }
    let cat = g.concat(1, &head_outs)?;
    let out = g.matmul(cat, wo)?;
    let weights = g.concat(0, &head_weights)?;
    Ok(MhaOutput { out, weights })
}

// ----- sinusoidal embeddings -----

/// Angular factors for one coordinate: `2*pi / 10000^(4i/dim)` for
/// `i in 0..dim/4`. Shared by the plain and graph embedding paths so they
/// multiply by bitwise-identical factors.
fn embed_factors(dim: usize) -> Result<Vec<f64>> {
    if dim < 4 || dim % 4 != 0 {
        return Err(Error::value(
            "sinusoidal_embed",
            format!("dimension must be a positive multiple of 4, got {dim}"),
        ));
    }
    const TAU: f64 = core::f64::consts::TAU;
    Ok((0..dim / 4)
        .map(|i| TAU / libm::pow(10000.0, (4 * i) as f64 / dim as f64))
        .collect())
}

/// Sinusoidal embedding of 2D points into `dim` values per point: the x half
/// then the y half, each half interleaving `sin`/`cos` over `dim/4`
/// geometrically spaced frequencies.
pub fn sinusoidal_embed_2d(coords: &[[f64; 2]], dim: usize) -> Result<Tensor> {
    let factors = embed_factors(dim)?;
    let half = dim / 2;
    let mut data = vec![0.0; coords.len() * dim];
    for (r, &[x, y]) in coords.iter().enumerate() {
        let row = &mut data[r * dim..(r + 1) * dim];
        for (i, &f) in factors.iter().enumerate() {
            row[2 * i] = libm::sin(f * x);
            row[2 * i + 1] = libm::cos(f * x);
            row[half + 2 * i] = libm::sin(f * y);
            row[half + 2 * i + 1] = libm::cos(f * y);
        }
    }
    Tensor::new(&[coords.len(), dim], data)
}

/// Graph version of [`sinusoidal_embed_2d`] over a `P x 2` var, differentiable
/// in the points, producing bitwise-identical values to the plain function.
pub fn embed_points(g: &mut Graph, pts: Var, dim: usize) -> Result<Var> {
    let sp = g.shape(pts).to_vec();
    if sp.len() != 2 || sp[1] != 2 {
        return Err(Error::shape(
            "sinusoidal_embed",
            format!("points must be P x 2, got {}", crate::error::shape_str(&sp)),
        ));
    }
    let factors = embed_factors(dim)?;
    let xs = g.slice(pts, 1, 0, 1)?;
    let ys = g.slice(pts, 1, 1, 1)?;
    let mut parts = Vec::with_capacity(dim);
    for &coord in &[xs, ys] {
        for &f in &factors {
            let angle = g.affine(coord, f, 0.0);
            parts.push(g.sin(angle));
            parts.push(g.cos(angle));
        }
    }
    g.concat(1, &parts)
}

// ----- focal loss -----

/// Focal loss over one-vs-all class logits: per element
/// `alpha * sigmoid(-s*x)^gamma * softplus(-s*x)` with `s = +1` for positive
/// targets and `s = -1` for negatives, summed over classes and averaged over
/// rows. At `gamma = 0`, `alpha = 1` this is exactly the sigmoid
/// cross-entropy.
pub fn focal_loss(g: &mut Graph, logits: Var, targets: &Tensor, alpha: f64, gamma: f64) -> Result<Var> {
    let sl = g.shape(logits).to_vec();
    if sl.len() != 2 || targets.shape() != sl.as_slice() {
        return Err(Error::shape(
            "focal_loss",
            format!(
                "logits {} vs targets {}",
                crate::error::shape_str(&sl),
                crate::error::shape_str(targets.shape())
            ),
        ));
    }
    if targets.data().iter().any(|&t| t != 0.0 && t != 1.0) {
        return Err(Error::value("focal_loss", "targets must be exactly 0 or 1"));
    }
    if !(alpha > 0.0) || !(gamma >= 0.0) {
        return Err(Error::value(
            "focal_loss",
            format!("alpha must be positive and gamma non-negative, got {alpha}, {gamma}"),
        ));
    }
    let rows = sl[0];
    // u = -s*x, via the constant multiplier (1 - 2t).
    let flip: Vec<f64> = targets.data().iter().map(|&t| 1.0 - 2.0 * t).collect();
    let flip = g.constant(Tensor::new(&sl, flip)?);
    let u = g.mul(logits, flip)?;
    let sig = g.sigmoid(u);
    let sp = g.softplus(u);
    let pw = g.pow_const(sig, gamma);
    let term = g.mul(pw, sp)?;
    let total = g.sum_all(term);
    Ok(g.scale(total, alpha / rows as f64))
}

// ----- optimizer -----

/// Decoupled AdamW. One step, per element:
///
/// ```text
/// m = b1*m + (1-b1)*g          v = b2*v + (1-b2)*g^2
/// mhat = m/(1-b1^t)            vhat = v/(1-b2^t)
/// p = p*(1 - lr_eff*wd) - lr_eff * mhat / (sqrt(vhat) + eps)
/// ```
///
/// with `lr_eff = lr * lr_mult` of the parameter. Weight decay multiplies the
/// parameter directly and never enters the moments.
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    /// Defaults: betas 0.9/0.999, eps 1e-8.
    pub fn new(lr: f64, weight_decay: f64, store: &ParamStore) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: store.iter().map(|e| vec![0.0; e.tensor.len()]).collect(),
            v: store.iter().map(|e| vec![0.0; e.tensor.len()]).collect(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Applies one update. `grads[i]` must match parameter `i` elementwise.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Vec<f64>]) -> Result<()> {
        if grads.len() != self.m.len() || store.len() != self.m.len() {
            return Err(Error::shape(
                "adamw",
                format!(
                    "expected {} gradient vectors, got {} for {} params",
                    self.m.len(),
                    grads.len(),
                    store.len()
                ),
            ));
        }
        self.t += 1;
        let bc1 = 1.0 - libm::pow(self.beta1, self.t as f64);
        let bc2 = 1.0 - libm::pow(self.beta2, self.t as f64);
        for i in 0..grads.len() {
            let entry = &mut store.entries[i];
            if grads[i].len() != entry.tensor.len() {
                return Err(Error::shape(
                    "adamw",
                    format!(
                        "gradient {} has {} elements, parameter {} has {}",
                        i,
                        grads[i].len(),
                        entry.name,
                        entry.tensor.len()
                    ),
                ));
            }
            let lr_eff = self.lr * entry.lr_mult;
            let decay = 1.0 - lr_eff * self.weight_decay;
            let p = entry.tensor.data_mut();
            for (j, &gj) in grads[i].iter().enumerate() {
                self.m[i][j] = self.beta1 * self.m[i][j] + (1.0 - self.beta1) * gj;
                self.v[i][j] = self.beta2 * self.v[i][j] + (1.0 - self.beta2) * gj * gj;
                let mhat = self.m[i][j] / bc1;
                let vhat = self.v[i][j] / bc2;
                p[j] = p[j] * decay - lr_eff * mhat / (libm::sqrt(vhat) + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{fd_max_rel, FD_TOL};
    use crate::graph::Graph;
    use rand_core::SeedableRng;

    type Rng = rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    fn rand_t(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| uniform(rng, lo, hi)).collect();
        Tensor::new(shape, data).unwrap()
    }

    // Independent single-head attention oracle: plain nested loops, naive
    // softmax, no graph machinery.
    #[allow(clippy::too_many_arguments)]
    fn attention_oracle_single_head(
        q_in: &Tensor,
        k_in: &Tensor,
        v_in: &Tensor,
        wq: &Tensor,
        wk: &Tensor,
        wv: &Tensor,
        wo: &Tensor,
    ) -> Vec<f64> {
        let nq = q_in.shape()[0];
        let nk = k_in.shape()[0];
        let d = q_in.shape()[1];
        let proj = |x: &Tensor, w: &Tensor, rows: usize| -> Vec<f64> {
            let mut out = vec![0.0; rows * d];
            for r in 0..rows {
                for c in 0..d {
                    let mut s = 0.0;
                    for k in 0..d {
                        s += x.data()[r * d + k] * w.data()[k * d + c];
                    }
                    out[r * d + c] = s;
                }
            }
            out
        };
        let q = proj(q_in, wq, nq);
        let k = proj(k_in, wk, nk);
        let v = proj(v_in, wv, nk);
        let scale = 1.0 / libm::sqrt(d as f64);
        let mut ctx = vec![0.0; nq * d];
        for i in 0..nq {
            let mut scores = vec![0.0; nk];
            for j in 0..nk {
                let mut s = 0.0;
                for c in 0..d {
                    s += q[i * d + c] * k[j * d + c];
                }
                scores[j] = s * scale;
            }
            let mut denom = 0.0;
            let exps: Vec<f64> = scores.iter().map(|&s| libm::exp(s)).collect();
            for &e in &exps {
                denom += e;
            }
            for j in 0..nk {
                let w = exps[j] / denom;
                for c in 0..d {
                    ctx[i * d + c] += w * v[j * d + c];
                }
            }
        }
        let mut out = vec![0.0; nq * d];
        for i in 0..nq {
            for c in 0..d {
                let mut s = 0.0;
                for k in 0..d {
                    s += ctx[i * d + k] * wo.data()[k * d + c];
                }
                out[i * d + c] = s;
            }
        }
        out
    }

    // Independent AdamW oracle: a literal transcription of the update
    // equations for a single flat parameter vector.
    struct AdamOracle {
        m: Vec<f64>,
        v: Vec<f64>,
        t: u64,
    }

    impl AdamOracle {
        fn new(n: usize) -> Self {
            AdamOracle { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
        }

        fn step(&mut self, p: &mut [f64], g: &[f64], lr: f64, wd: f64) {
            self.t += 1;
            let (b1, b2, eps) = (0.9, 0.999, 1e-8);
            for j in 0..p.len() {
                self.m[j] = b1 * self.m[j] + (1.0 - b1) * g[j];
                self.v[j] = b2 * self.v[j] + (1.0 - b2) * g[j] * g[j];
                let mhat = self.m[j] / (1.0 - libm::pow(b1, self.t as f64));
                let vhat = self.v[j] / (1.0 - libm::pow(b2, self.t as f64));
                p[j] = p[j] * (1.0 - lr * wd) - lr * mhat / (libm::sqrt(vhat) + eps);
            }
        }
    }

    #[test]
    fn attention_single_head_matches_loop_oracle() {
        let rng = &mut Rng::seed_from_u64(41);
        let d = 4;
        let q_in = rand_t(rng, &[2, d], -1.0, 1.0);
        let k_in = rand_t(rng, &[3, d], -1.0, 1.0);
        let v_in = rand_t(rng, &[3, d], -1.0, 1.0);
        let wq = rand_t(rng, &[d, d], -0.7, 0.7);
        let wk = rand_t(rng, &[d, d], -0.7, 0.7);
        let wv = rand_t(rng, &[d, d], -0.7, 0.7);
        let wo = rand_t(rng, &[d, d], -0.7, 0.7);
        let expect = attention_oracle_single_head(&q_in, &k_in, &v_in, &wq, &wk, &wv, &wo);

        let mut g = Graph::new();
        let vars: Vec<Var> = [&q_in, &k_in, &v_in, &wq, &wk, &wv, &wo]
            .iter()
            .map(|t| g.constant((*t).clone()))
            .collect();
        let out = multi_head_attention(
            &mut g, 1, vars[0], None, vars[1], None, vars[2], vars[3], vars[4], vars[5], vars[6],
            None,
        )
        .unwrap();
        for (a, b) in g.value(out.out).data().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-9, "attention deviates from oracle: {a} vs {b}");
        }
    }

    #[test]
    fn attention_uniform_when_query_projection_is_zero() {
        let rng = &mut Rng::seed_from_u64(42);
        let d = 8;
        let mut g = Graph::new();
        let q = g.constant(rand_t(rng, &[3, d], -1.0, 1.0));
        let k = g.constant(rand_t(rng, &[5, d], -1.0, 1.0));
        let v = g.constant(rand_t(rng, &[5, d], -1.0, 1.0));
        let wq = g.constant(Tensor::zeros(&[d, d]).unwrap());
        let wk = g.constant(rand_t(rng, &[d, d], -0.7, 0.7));
        let wv = g.constant(rand_t(rng, &[d, d], -0.7, 0.7));
        let wo = g.constant(rand_t(rng, &[d, d], -0.7, 0.7));
        let out =
            multi_head_attention(&mut g, 2, q, None, k, None, v, wq, wk, wv, wo, None).unwrap();
        let w = g.value(out.weights);
        assert_eq!(w.shape(), &[2, 3, 5]);
        for row in w.data().chunks_exact(5) {
            for &x in row {
                assert_eq!(x, row[0], "zero scores must give exactly equal weights");
            }
            assert!((row[0] - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn attention_weights_rows_sum_to_one() {
        let rng = &mut Rng::seed_from_u64(43);
        let d = 8;
        let mut g = Graph::new();
        let q = g.constant(rand_t(rng, &[4, d], -2.0, 2.0));
        let k = g.constant(rand_t(rng, &[6, d], -2.0, 2.0));
        let v = g.constant(rand_t(rng, &[6, d], -1.0, 1.0));
        let wq = g.constant(rand_t(rng, &[d, d], -0.7, 0.7));
        let wk = g.constant(rand_t(rng, &[d, d], -0.7, 0.7));
        let wv = g.constant(rand_t(rng, &[d, d], -0.7, 0.7));
        let wo = g.constant(rand_t(rng, &[d, d], -0.7, 0.7));
        let out =
            multi_head_attention(&mut g, 4, q, None, k, None, v, wq, wk, wv, wo, None).unwrap();
        for row in g.value(out.weights).data().chunks_exact(6) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12, "attention row sums to {s}");
        }
    }

    #[test]
    fn attention_bias_suppresses_a_key() {
        let rng = &mut Rng::seed_from_u64(44);
        let d = 4;
        let mut g = Graph::new();
        let q = g.constant(rand_t(rng, &[2, d], -1.0, 1.0));
        let k = g.constant(rand_t(rng, &[3, d], -1.0, 1.0));
        let v = g.constant(rand_t(rng, &[3, d], -1.0, 1.0));
        let wq = g.constant(rand_t(rng, &[d, d], -0.7, 0.7));
        let wk = g.constant(rand_t(rng, &[d, d], -0.7, 0.7));
        let wv = g.constant(rand_t(rng, &[d, d], -0.7, 0.7));
        let wo = g.constant(rand_t(rng, &[d, d], -0.7, 0.7));
        // Bias pushes key 1 to -1e9 for every query and head.
        let mut bias = vec![0.0; 1 * 2 * 3];
        for qi in 0..2 {
            bias[qi * 3 + 1] = -1e9;
        }
        let bias = g.constant(t(&[1, 2, 3], &bias));
        let out =
            multi_head_attention(&mut g, 1, q, None, k, None, v, wq, wk, wv, wo, Some(bias))
                .unwrap();
        for row in g.value(out.weights).data().chunks_exact(3) {
            assert!(row[1] < 1e-12, "suppressed key kept weight {}", row[1]);
        }
    }

    #[test]
    fn attention_rows_are_independent() {
        let rng = &mut Rng::seed_from_u64(45);
        let d = 8;
        let q_all = rand_t(rng, &[3, d], -1.0, 1.0);
        let k_in = rand_t(rng, &[4, d], -1.0, 1.0);
        let v_in = rand_t(rng, &[4, d], -1.0, 1.0);
        let wq = rand_t(rng, &[d, d], -0.7, 0.7);
        let wk = rand_t(rng, &[d, d], -0.7, 0.7);
        let wv = rand_t(rng, &[d, d], -0.7, 0.7);
        let wo = rand_t(rng, &[d, d], -0.7, 0.7);
        let run = |q: &Tensor| -> Vec<f64> {
            let mut g = Graph::new();
            let vars: Vec<Var> = [q, &k_in, &v_in, &wq, &wk, &wv, &wo]
                .iter()
                .map(|t| g.constant((*t).clone()))
                .collect();
            let out = multi_head_attention(
                &mut g, 2, vars[0], None, vars[1], None, vars[2], vars[3], vars[4], vars[5],
                vars[6], None,
            )
            .unwrap();
            g.value(out.out).data().to_vec()
        };
        let full = run(&q_all);
        for r in 0..3 {
            let row = t(&[1, d], &q_all.data()[r * d..(r + 1) * d]);
            let single = run(&row);
            for c in 0..d {
                assert_eq!(
                    single[c],
                    full[r * d + c],
                    "query row {r} must attend independently"
                );
            }
        }
    }

    #[test]
    fn attention_gradients_match_finite_differences() {
        let rng = &mut Rng::seed_from_u64(46);
        let d = 4;
        let inputs = [
            rand_t(rng, &[2, d], -1.0, 1.0),
            rand_t(rng, &[3, d], -1.0, 1.0),
            rand_t(rng, &[3, d], -1.0, 1.0),
            rand_t(rng, &[d, d], -0.7, 0.7),
            rand_t(rng, &[d, d], -0.7, 0.7),
            rand_t(rng, &[d, d], -0.7, 0.7),
            rand_t(rng, &[d, d], -0.7, 0.7),
            rand_t(rng, &[2, 2, 3], -0.5, 0.5),
        ];
        let w = rand_t(rng, &[2, d], -1.0, 1.0);
        let max = fd_max_rel(&inputs, |g, v| {
            let out = multi_head_attention(
                g,
                2,
                v[0],
                None,
                v[1],
                None,
                v[2],
                v[3],
                v[4],
                v[5],
                v[6],
                Some(v[7]),
            )?;
            let wv = g.constant(w.clone());
            let p = g.mul(out.out, wv)?;
            Ok(g.sum_all(p))
        })
        .unwrap();
        assert!(max < FD_TOL, "attention FD mismatch: {max:.3e}");
    }

    #[test]
    fn embedding_matches_hand_values() {
        // d = 8 gives factors 2*pi and 2*pi/100. At (0.25, 0.5):
        // sin(pi/2) = 1, cos(pi/2) = 0, sin(pi) = 0, cos(pi) = -1.
        let e = sinusoidal_embed_2d(&[[0.25, 0.5]], 8).unwrap();
        let d = e.data();
        assert!((d[0] - 1.0).abs() < 1e-9, "sin(pi/2) slot, got {}", d[0]);
        assert!(d[1].abs() < 1e-9, "cos(pi/2) slot, got {}", d[1]);
        assert!(d[4].abs() < 1e-9, "sin(pi) slot, got {}", d[4]);
        assert!((d[5] + 1.0).abs() < 1e-9, "cos(pi) slot, got {}", d[5]);
        // Second frequency divides by 100.
        assert!((d[2] - libm::sin(core::f64::consts::TAU * 0.25 / 100.0)).abs() < 1e-15);
    }

    #[test]
    fn embedding_graph_matches_plain_bitwise() {
        let rng = &mut Rng::seed_from_u64(47);
        let pts: Vec<[f64; 2]> =
            (0..5).map(|_| [uniform(rng, 0.0, 1.0), uniform(rng, 0.0, 1.0)]).collect();
        let plain = sinusoidal_embed_2d(&pts, 16).unwrap();
        let flat: Vec<f64> = pts.iter().flatten().copied().collect();
        let mut g = Graph::new();
        let pv = g.constant(t(&[5, 2], &flat));
        let emb = embed_points(&mut g, pv, 16).unwrap();
        assert_eq!(
            g.value(emb).data(),
            plain.data(),
            "graph embedding must be bitwise identical to the plain embedding"
        );
    }

    #[test]
    fn embedding_rejects_bad_dimension() {
        assert!(sinusoidal_embed_2d(&[[0.5, 0.5]], 6).is_err());
        assert!(sinusoidal_embed_2d(&[[0.5, 0.5]], 0).is_err());
    }

    #[test]
    fn embedding_gradients_match_finite_differences() {
        let rng = &mut Rng::seed_from_u64(48);
        let pts = rand_t(rng, &[3, 2], 0.1, 0.9);
        let w = rand_t(rng, &[3, 8], -1.0, 1.0);
        let max = fd_max_rel(&[pts], |g, v| {
            let e = embed_points(g, v[0], 8)?;
            let wv = g.constant(w.clone());
            let p = g.mul(e, wv)?;
            Ok(g.sum_all(p))
        })
        .unwrap();
        assert!(max < FD_TOL, "embedding FD mismatch: {max:.3e}");
    }

    #[test]
    fn focal_at_gamma_zero_alpha_one_is_sigmoid_cross_entropy() {
        // Independent oracle: textbook BCE from log and sigmoid directly.
        let rng = &mut Rng::seed_from_u64(49);
        let logits = rand_t(rng, &[4, 3], -3.0, 3.0);
        let mut tgt = vec![0.0; 12];
        for (i, slot) in tgt.iter_mut().enumerate() {
            if i % 3 == 0 {
                *slot = 1.0;
            }
        }
        let targets = t(&[4, 3], &tgt);
        let mut oracle = 0.0;
        for i in 0..12 {
            let x = logits.data()[i];
            let p = 1.0 / (1.0 + libm::exp(-x));
            let tv = targets.data()[i];
            oracle += -(tv * libm::log(p) + (1.0 - tv) * libm::log(1.0 - p));
        }
        oracle /= 4.0;
        let mut g = Graph::new();
        let lv = g.constant(logits);
        let loss = focal_loss(&mut g, lv, &targets, 1.0, 0.0).unwrap();
        let got = g.value(loss).item().unwrap();
        assert!(
            (got - oracle).abs() <= 1e-12,
            "gamma=0, alpha=1 must recover sigmoid cross-entropy: {got} vs {oracle}"
        );
    }

    #[test]
    fn focal_known_value() {
        // x = 0, t = 1, alpha = 0.25, gamma = 2: sigmoid(0)^2 * softplus(0)
        // = 0.25 * ln 2, scaled by alpha.
        let mut g = Graph::new();
        let lv = g.constant(t(&[1, 1], &[0.0]));
        let targets = t(&[1, 1], &[1.0]);
        let loss = focal_loss(&mut g, lv, &targets, 0.25, 2.0).unwrap();
        let expect = 0.25 * 0.25 * core::f64::consts::LN_2;
        assert!((g.value(loss).item().unwrap() - expect).abs() < 1e-15);
    }

    #[test]
    fn focal_alpha_scales_linearly() {
        let rng = &mut Rng::seed_from_u64(50);
        let logits = rand_t(rng, &[3, 4], -2.0, 2.0);
        let targets = t(
            &[3, 4],
            &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        );
        let eval = |alpha: f64| -> f64 {
            let mut g = Graph::new();
            let lv = g.constant(logits.clone());
            let loss = focal_loss(&mut g, lv, &targets, alpha, 2.0).unwrap();
            g.value(loss).item().unwrap()
        };
        let base = eval(0.25);
        let triple = eval(0.75);
        assert!((triple - 3.0 * base).abs() < 1e-12, "alpha must scale the loss linearly");
    }

    #[test]
    fn focal_gamma_downweights_confident_examples() {
        // Well-classified positive: large logit. Loss must shrink as gamma
        // grows.
        let targets = t(&[1, 1], &[1.0]);
        let eval = |gamma: f64| -> f64 {
            let mut g = Graph::new();
            let lv = g.constant(t(&[1, 1], &[3.0]));
            let loss = focal_loss(&mut g, lv, &targets, 1.0, gamma).unwrap();
            g.value(loss).item().unwrap()
        };
        assert!(eval(2.0) < eval(1.0));
        assert!(eval(1.0) < eval(0.0));
    }

    #[test]
    fn focal_gradients_match_finite_differences() {
        let rng = &mut Rng::seed_from_u64(51);
        let logits = rand_t(rng, &[3, 4], -2.0, 2.0);
        let targets = t(
            &[3, 4],
            &[0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0],
        );
        let max = fd_max_rel(&[logits], |g, v| focal_loss(g, v[0], &targets, 0.25, 2.0)).unwrap();
        assert!(max < FD_TOL, "focal loss FD mismatch: {max:.3e}");
    }

    #[test]
    fn focal_rejects_soft_targets() {
        let mut g = Graph::new();
        let lv = g.constant(t(&[1, 2], &[0.0, 0.0]));
        let targets = t(&[1, 2], &[0.5, 1.0]);
        assert!(focal_loss(&mut g, lv, &targets, 0.25, 2.0).is_err());
    }

    #[test]
    fn adamw_matches_scripted_trace() {
        // Two parameters, three steps, fixed gradient script.
        let mut store = ParamStore::new();
        store.add("a", t(&[2], &[1.0, -2.0]), 1.0);
        store.add("b", t(&[1, 2], &[0.5, 0.25]), 1.0);
        let mut opt = AdamW::new(0.1, 0.01, &store);

        let script: [Vec<Vec<f64>>; 3] = [
            vec![vec![0.3, -0.7], vec![1.0, 0.0]],
            vec![vec![-0.2, 0.4], vec![0.5, -0.5]],
            vec![vec![0.0, 0.1], vec![-1.0, 0.25]],
        ];

        let mut oracle_a = AdamOracle::new(2);
        let mut oracle_b = AdamOracle::new(2);
        let mut pa = vec![1.0, -2.0];
        let mut pb = vec![0.5, 0.25];
        for step in &script {
            oracle_a.step(&mut pa, &step[0], 0.1, 0.01);
            oracle_b.step(&mut pb, &step[1], 0.1, 0.01);
        }

        for step in &script {
            opt.step(&mut store, step).unwrap();
        }
        let got_a = store.get(store.find("a").unwrap()).data();
        let got_b = store.get(store.find("b").unwrap()).data();
        for (g, e) in got_a.iter().zip(&pa) {
            assert!((g - e).abs() < 1e-15, "parameter a deviates from trace: {g} vs {e}");
        }
        for (g, e) in got_b.iter().zip(&pb) {
            assert!((g - e).abs() < 1e-15, "parameter b deviates from trace: {g} vs {e}");
        }
        assert_eq!(opt.steps_taken(), 3);
    }

    #[test]
    fn adamw_zero_gradients_still_decay_weights() {
        let mut store = ParamStore::new();
        store.add("w", t(&[2], &[4.0, -4.0]), 1.0);
        let mut opt = AdamW::new(0.1, 0.5, &store);
        let zeros = vec![vec![0.0, 0.0]];
        opt.step(&mut store, &zeros).unwrap();
        let decay = 1.0 - 0.1 * 0.5;
        let got = store.get(ParamId(0)).data();
        assert!((got[0] - 4.0 * decay).abs() < 1e-15);
        assert!((got[1] + 4.0 * decay).abs() < 1e-15);
    }

    #[test]
    fn adamw_respects_lr_multiplier() {
        let mut store = ParamStore::new();
        store.add("slow", Tensor::scalar(1.0), 0.1);
        store.add("fast", Tensor::scalar(1.0), 1.0);
        let mut opt = AdamW::new(0.1, 0.0, &store);
        opt.step(&mut store, &[vec![1.0], vec![1.0]]).unwrap();
        let slow_moved = 1.0 - store.get(ParamId(0)).data()[0];
        let fast_moved = 1.0 - store.get(ParamId(1)).data()[0];
        assert!(
            (fast_moved - 10.0 * slow_moved).abs() < 1e-12,
            "lr_mult 0.1 must move a tenth as far: {slow_moved} vs {fast_moved}"
        );
    }

    #[test]
    fn param_store_binds_in_registration_order() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::scalar(1.0), 1.0);
        let b = store.add("b", Tensor::scalar(2.0), 1.0);
        let mut g = Graph::new();
        let vars = store.bind(&mut g, true);
        assert_eq!(g.value(vars[a.0]).data(), &[1.0]);
        assert_eq!(g.value(vars[b.0]).data(), &[2.0]);
        assert_eq!(store.find("b"), Some(b));
        assert_eq!(store.find("missing"), None);
    }

    #[test]
    fn param_store_rescales_lr_by_prefix() {
        let mut store = ParamStore::new();
        let a = store.add("backbone.conv1.w", Tensor::scalar(1.0), 1.0);
        let b = store.add("backbone.conv2.w", Tensor::scalar(2.0), 1.0);
        let c = store.add("enc1.attn.wq", Tensor::scalar(3.0), 1.0);
        assert_eq!(store.set_lr_mult("backbone.", 0.1), 2);
        assert_eq!(store.entry(a).lr_mult, 0.1);
        assert_eq!(store.entry(b).lr_mult, 0.1);
        assert_eq!(store.entry(c).lr_mult, 1.0, "other prefixes keep their multiplier");
        assert_eq!(store.set_lr_mult("nothing.", 0.5), 0);
    }

    #[test]
    #[should_panic(expected = "duplicate parameter name")]
    fn param_store_rejects_duplicate_names() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::scalar(1.0), 1.0);
        store.add("w", Tensor::scalar(2.0), 1.0);
    }

    #[test]
    fn xavier_stays_in_bounds() {
        let rng = &mut Rng::seed_from_u64(52);
        let w = xavier_uniform(rng, 16, 16);
        let limit = libm::sqrt(6.0 / 32.0);
        assert!(w.data().iter().all(|v| v.abs() <= limit));
        let spread = w.data().iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        assert!(spread > limit * 0.5, "xavier draw suspiciously narrow: {spread}");
    }
}
