//! Exact divergence computations on enumerable sequence spaces: TV and KL, the
//! best fully factorized approximation, latent-mixture marginals by quadrature,
//! and the latent-matching bound on a discretized latent.

use rand::Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::error::{CouplingError, Result};
use crate::scalar::{softmax_into, Scalar};
use crate::stage_b::OneStepGenerator;
use crate::tensor::Tensor;
use crate::types::TokenSequence;

/// Largest enumerable space, `V^T <= 2^16`.
pub const MAX_SUPPORT_BITS: f64 = 16.0;
const NORM_TOL: f64 = 1e-9;

/// A distribution over all `V^T` sequences, indexed by [`TokenSequence::ordinal`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExactDistribution {
    seq_len: usize,
    vocab_size: usize,
    probs: Vec<f64>,
}

fn support_size(seq_len: usize, vocab_size: usize) -> Result<usize> {
    if seq_len == 0 || vocab_size < 2 {
        return Err(CouplingError::Distribution("need T >= 1 and V >= 2".into()));
    }
    if seq_len as f64 * (vocab_size as f64).log2() > MAX_SUPPORT_BITS + 1e-12 {
        return Err(CouplingError::Distribution(format!(
            "V^T = {vocab_size}^{seq_len} exceeds the enumerable limit 2^16"
        )));
    }
    Ok(vocab_size.pow(seq_len as u32))
}

impl ExactDistribution {
    pub fn new(seq_len: usize, vocab_size: usize, probs: Vec<f64>) -> Result<Self> {
        let n = support_size(seq_len, vocab_size)?;
        if probs.len() != n {
            return Err(CouplingError::Distribution(format!("{} probabilities for {n} outcomes", probs.len())));
        }
        if let Some(p) = probs.iter().find(|p| !(**p >= 0.0) || !p.is_finite()) {
            return Err(CouplingError::Distribution(format!("invalid probability {p}")));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > NORM_TOL {
            return Err(CouplingError::Distribution(format!("probabilities sum to {total}")));
        }
        Ok(ExactDistribution { seq_len, vocab_size, probs })
    }

    /// Normalize nonnegative weights.
    pub fn from_weights(seq_len: usize, vocab_size: usize, mut weights: Vec<f64>) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) || !total.is_finite() {
            return Err(CouplingError::Distribution("weights have no positive finite mass".into()));
        }
        weights.iter_mut().for_each(|w| *w /= total);
        Self::new(seq_len, vocab_size, weights)
    }

    pub fn point_mass(x: &TokenSequence) -> Result<Self> {
        let n = support_size(x.len(), x.vocab_size())?;
        let mut probs = vec![0.0; n];
        probs[x.ordinal()] = 1.0;
        Self::new(x.len(), x.vocab_size(), probs)
    }

    pub fn uniform(seq_len: usize, vocab_size: usize) -> Result<Self> {
        let n = support_size(seq_len, vocab_size)?;
        Self::new(seq_len, vocab_size, vec![1.0 / n as f64; n])
    }

    /// Empirical law of fully revealed samples.
    pub fn empirical(samples: &[TokenSequence]) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| CouplingError::Distribution("no samples".into()))?;
        let (t, v) = (first.len(), first.vocab_size());
        let mut counts = vec![0.0; support_size(t, v)?];
        for x in samples {
            if x.len() != t || x.vocab_size() != v || x.has_mask() {
                return Err(CouplingError::Distribution("samples differ in shape or contain masks".into()));
            }
            counts[x.ordinal()] += 1.0;
        }
        Self::from_weights(t, v, counts)
    }

    /// `prod_t marginals[t]`, each a distribution over `V` tokens.
    pub fn product(marginals: &[Vec<f64>]) -> Result<Self> {
        let v = marginals.first().map_or(0, Vec::len);
        if marginals.iter().any(|m| m.len() != v) {
            return Err(CouplingError::Distribution("marginals differ in size".into()));
        }
        support_size(marginals.len(), v)?;
        Self::new(marginals.len(), v, product_probs(marginals.iter().map(Vec::as_slice)))
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn prob(&self, x: &TokenSequence) -> f64 {
        self.probs[x.ordinal()]
    }

    /// Per-position marginals, `T` rows of `V` probabilities.
    pub fn marginals(&self) -> Vec<Vec<f64>> {
        let mut out = vec![vec![0.0; self.vocab_size]; self.seq_len];
        for (o, &p) in self.probs.iter().enumerate() {
            let x = TokenSequence::from_ordinal(o, self.seq_len, self.vocab_size);
            for (t, &tok) in x.tokens().iter().enumerate() {
                out[t][tok] += p;
            }
        }
        out
    }

    /// Joint law of positions `i` and `j` as a `V x V` table.
    pub fn pair_marginal(&self, i: usize, j: usize) -> Vec<Vec<f64>> {
        let mut out = vec![vec![0.0; self.vocab_size]; self.vocab_size];
        for (o, &p) in self.probs.iter().enumerate() {
            let x = TokenSequence::from_ordinal(o, self.seq_len, self.vocab_size);
            out[x.tokens()[i]][x.tokens()[j]] += p;
        }
        out
    }

    /// The product of this law's own marginals.
    pub fn marginal_product(&self) -> Self {
        Self::product(&self.marginals()).expect("marginals of a valid law form a valid product")
    }

    fn check_matching(&self, other: &Self) -> Result<()> {
        if self.seq_len != other.seq_len || self.vocab_size != other.vocab_size {
            return Err(CouplingError::Distribution(format!(
                "support mismatch: {}^{} vs {}^{}",
                self.vocab_size, self.seq_len, other.vocab_size, other.seq_len
            )));
        }
        Ok(())
    }
}

/// Probabilities of every sequence under independent positions, position 0
/// most significant.
fn product_probs<'a>(marginals: impl Iterator<Item = &'a [f64]>) -> Vec<f64> {
    let mut probs = vec![1.0];
    for m in marginals {
        let mut next = Vec::with_capacity(probs.len() * m.len());
        for &p in &probs {
            next.extend(m.iter().map(|&q| p * q));
        }
        probs = next;
    }
    probs
}

fn tv_slices(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// `1/2 sum_x |p(x) - q(x)|`.
pub fn exact_tv(p: &ExactDistribution, q: &ExactDistribution) -> Result<f64> {
    p.check_matching(q)?;
    Ok(tv_slices(&p.probs, &q.probs))
}

fn kl_slices(p: &[f64], q: &[f64]) -> std::result::Result<f64, usize> {
    let mut acc = 0.0;
    for (i, (&a, &b)) in p.iter().zip(q).enumerate() {
        if a > 0.0 {
            if b <= 0.0 {
                return Err(i);
            }
            acc += a * (a / b).ln();
        }
    }
    Ok(acc.max(0.0))
}

/// `sum_x p(x) ln(p(x) / q(x))`, zero where `p = 0`.
pub fn exact_kl(p: &ExactDistribution, q: &ExactDistribution) -> Result<f64> {
    p.check_matching(q)?;
    kl_slices(&p.probs, &q.probs).map_err(|i| {
        CouplingError::Distribution(format!("KL undefined: q vanishes at outcome {i} where p has mass"))
    })
}

/// Result of [`best_factorized_tv`].
#[derive(Clone, Debug, PartialEq)]
pub struct FactorizedFit {
    pub marginals: Vec<Vec<f64>>,
    pub product: ExactDistribution,
    pub tv: f64,
}

const GRID_STEP: f64 = 1e-3;
const REFINE_STEPS: usize = 200;
/// Free parameters `T (V - 1)` allowed in the search.
pub const MAX_FACTORIZED_PARAMS: usize = 8;

/// Smallest TV from `p` to a fully factorized law. With at most two free
/// parameters a dense grid at resolution `1e-3` seeds the search, otherwise the
/// product of marginals does; 200 rounds of coordinate descent (mass moves
/// between token pairs at one position, step halving on stalls) refine it. The
/// result is a local optimum at grid resolution, no better than that.
pub fn best_factorized_tv(p: &ExactDistribution) -> Result<FactorizedFit> {
    let (t, v) = (p.seq_len, p.vocab_size);
    let params = t * (v - 1);
    if params > MAX_FACTORIZED_PARAMS {
        return Err(CouplingError::Distribution(format!(
            "factorized search over {params} parameters exceeds the limit {MAX_FACTORIZED_PARAMS}"
        )));
    }
    let tv_of = |m: &[Vec<f64>]| tv_slices(&p.probs, &product_probs(m.iter().map(Vec::as_slice)));

    let mut best = p.marginals();
    let mut best_tv = tv_of(&best);
    if params <= 2 {
        let n = (1.0 / GRID_STEP).round() as usize;
        let grid = |i: usize| i as f64 * GRID_STEP;
        let mut cand = best.clone();
        let visit = |cand: &Vec<Vec<f64>>, best: &mut Vec<Vec<f64>>, best_tv: &mut f64| {
            let tv = tv_of(cand);
            if tv < *best_tv - 1e-15 {
                *best_tv = tv;
                best.clone_from(cand);
            }
        };
        if t == 1 && v == 3 {
            for a in 0..=n {
                for b in 0..=(n - a) {
                    cand[0] = vec![grid(a), grid(b), (1.0 - grid(a) - grid(b)).max(0.0)];
                    visit(&cand, &mut best, &mut best_tv);
                }
            }
        } else if t == 1 {
            for a in 0..=n {
                cand[0] = vec![1.0 - grid(a), grid(a)];
                visit(&cand, &mut best, &mut best_tv);
            }
        } else {
            for a in 0..=n {
                for b in 0..=n {
                    cand[0] = vec![1.0 - grid(a), grid(a)];
                    cand[1] = vec![1.0 - grid(b), grid(b)];
                    visit(&cand, &mut best, &mut best_tv);
                }
            }
        }
    }

    let mut step = if params <= 2 { GRID_STEP } else { 0.05 };
    for _ in 0..REFINE_STEPS {
        let mut improved = false;
        for pos in 0..t {
            for from in 0..v {
                for to in 0..v {
                    if from == to || best[pos][from] <= 0.0 {
                        continue;
                    }
                    let delta = step.min(best[pos][from]);
                    let mut cand = best.clone();
                    cand[pos][from] -= delta;
                    cand[pos][to] += delta;
                    let tv = tv_of(&cand);
                    if tv < best_tv - 1e-15 {
                        best = cand;
                        best_tv = tv;
                        improved = true;
                    }
                }
            }
        }
        if !improved {
            step *= 0.5;
        }
    }
    let product = ExactDistribution::product(&best)?;
    Ok(FactorizedFit {
        tv: tv_slices(&p.probs, &product.probs),
        marginals: best,
        product,
    })
}

/// A vanishing 2x2 minor of a pair marginal is necessary for a product law;
/// this records the largest violation found.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProductWitness {
    pub positions: (usize, usize),
    pub tokens: ((usize, usize), (usize, usize)),
    /// `P(a, b) P(a', b')`.
    pub diagonal: f64,
    /// `P(a, b') P(a', b)`.
    pub off_diagonal: f64,
}

impl ProductWitness {
    pub fn gap(&self) -> f64 {
        (self.diagonal - self.off_diagonal).abs()
    }
}

pub fn product_witness(p: &ExactDistribution) -> Option<ProductWitness> {
    let (t, v) = (p.seq_len, p.vocab_size);
    let mut best: Option<ProductWitness> = None;
    for i in 0..t {
        for j in (i + 1)..t {
            let m = p.pair_marginal(i, j);
            for a in 0..v {
                for a2 in (a + 1)..v {
                    for b in 0..v {
                        for b2 in (b + 1)..v {
                            let w = ProductWitness {
                                positions: (i, j),
                                tokens: ((a, b), (a2, b2)),
                                diagonal: m[a][b] * m[a2][b2],
                                off_diagonal: m[a][b2] * m[a2][b],
                            };
                            if best.as_ref().is_none_or(|cur| w.gap() > cur.gap()) {
                                best = Some(w);
                            }
                        }
                    }
                }
            }
        }
    }
    best
}

/// A latent-conditioned generator whose per-position laws can be tabulated.
pub trait LatentDecoder {
    fn latent_dim(&self) -> usize;
    fn seq_len(&self) -> usize;
    fn vocab_size(&self) -> usize;
    /// Per-position probabilities, `(n * T) x V`, for `n` latent rows.
    fn position_probs(&self, z: &Tensor<f64>) -> Result<Tensor<f64>>;
}

impl<F: Scalar> LatentDecoder for OneStepGenerator<F> {
    fn latent_dim(&self) -> usize {
        self.shape.dim()
    }

    fn seq_len(&self) -> usize {
        self.seq_len
    }

    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn position_probs(&self, z: &Tensor<f64>) -> Result<Tensor<f64>> {
        let logits: Tensor<f64> = self.logits_batch(&z.cast(), None)?.cast();
        let mut out = Tensor::zeros(logits.rows(), logits.cols());
        for r in 0..logits.rows() {
            softmax_into(logits.row(r), out.row_mut(r));
        }
        Ok(out)
    }
}

/// A decoder given by a closure from one latent to `T` rows of `V` probabilities.
pub struct FnDecoder<G> {
    pub latent_dim: usize,
    pub seq_len: usize,
    pub vocab_size: usize,
    pub f: G,
}

impl<G: Fn(&[f64]) -> Vec<Vec<f64>>> LatentDecoder for FnDecoder<G> {
    fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    fn seq_len(&self) -> usize {
        self.seq_len
    }

    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn position_probs(&self, z: &Tensor<f64>) -> Result<Tensor<f64>> {
        let rows: Vec<Vec<f64>> = (0..z.rows()).flat_map(|i| (self.f)(z.row(i))).collect();
        Tensor::from_rows(&rows)
    }
}

/// Bound of the quadrature box `[-Z_BOX, Z_BOX]^d`.
pub const Z_BOX: f64 = 6.0;
/// Allowed deviation of the quadrature mass from 1 before renormalizing.
pub const QUADRATURE_TOL: f64 = 1e-6;

/// `int G(x | z) N(z; 0, I) dz` by the trapezoid rule with `points` nodes per
/// axis on `[-6, 6]^d`, `d <= 2`.
pub fn enumerate_generated_marginal<D: LatentDecoder + ?Sized>(decoder: &D, points: usize) -> Result<ExactDistribution> {
    let d = decoder.latent_dim();
    let (t, v) = (decoder.seq_len(), decoder.vocab_size());
    let n = support_size(t, v)?;
    if d == 0 || d > 2 {
        return Err(CouplingError::Unsupported(format!("quadrature needs latent dimension 1 or 2, got {d}")));
    }
    if points < 3 {
        return Err(CouplingError::InvalidArgument("at least 3 quadrature points per axis".into()));
    }
    let h = 2.0 * Z_BOX / (points - 1) as f64;
    let axis: Vec<(f64, f64)> = (0..points)
        .map(|i| {
            let z = -Z_BOX + i as f64 * h;
            let end = i == 0 || i == points - 1;
            let w = if end { h / 2.0 } else { h } * (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
            (z, w)
        })
        .collect();
    let nodes: Vec<(Vec<f64>, f64)> = if d == 1 {
        axis.iter().map(|&(z, w)| (vec![z], w)).collect()
    } else {
        axis.iter()
            .flat_map(|&(a, wa)| axis.iter().map(move |&(b, wb)| (vec![a, b], wa * wb)))
            .collect()
    };
    let mut acc = vec![0.0; n];
    let mut mass = 0.0;
    for chunk in nodes.chunks(4096) {
        let z = Tensor::from_rows(&chunk.iter().map(|(z, _)| z.clone()).collect::<Vec<_>>())?;
        let probs = decoder.position_probs(&z)?;
        if probs.rows() != chunk.len() * t || probs.cols() != v {
            return Err(CouplingError::Shape("decoder returned a table of the wrong shape".into()));
        }
        for (k, (_, w)) in chunk.iter().enumerate() {
            let joint = product_probs((0..t).map(|pos| probs.row(k * t + pos)));
            let row_mass: f64 = joint.iter().sum();
            for (a, p) in acc.iter_mut().zip(&joint) {
                *a += w * p;
            }
            mass += w * row_mass;
        }
    }
    if (mass - 1.0).abs() > QUADRATURE_TOL {
        return Err(CouplingError::Distribution(format!(
            "quadrature mass {mass} misses 1 by more than {QUADRATURE_TOL} at {points} points"
        )));
    }
    ExactDistribution::from_weights(t, v, acc)
}

/// Joint `q(z, x)` on a finite latent grid: weights `q(z_j)` and conditionals
/// `q(x | z_j)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscretizedLatentJoint {
    weights: Vec<f64>,
    conditionals: Vec<ExactDistribution>,
}

fn check_simplex(w: &[f64], what: &str) -> Result<()> {
    if w.is_empty() || w.iter().any(|p| !(*p >= 0.0) || !p.is_finite()) {
        return Err(CouplingError::Distribution(format!("{what} has invalid entries")));
    }
    let total: f64 = w.iter().sum();
    if (total - 1.0).abs() > NORM_TOL {
        return Err(CouplingError::Distribution(format!("{what} sums to {total}")));
    }
    Ok(())
}

impl DiscretizedLatentJoint {
    pub fn new(weights: Vec<f64>, conditionals: Vec<ExactDistribution>) -> Result<Self> {
        check_simplex(&weights, "latent weights")?;
        if weights.len() != conditionals.len() {
            return Err(CouplingError::Distribution("one conditional per grid point required".into()));
        }
        for c in &conditionals[1..] {
            conditionals[0].check_matching(c)?;
        }
        Ok(DiscretizedLatentJoint { weights, conditionals })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn conditionals(&self) -> &[ExactDistribution] {
        &self.conditionals
    }

    /// `sum_j q(z_j) q(x | z_j)`.
    pub fn data_marginal(&self) -> ExactDistribution {
        mixture(&self.weights, &self.conditionals)
    }
}

fn mixture(weights: &[f64], components: &[ExactDistribution]) -> ExactDistribution {
    let first = &components[0];
    let mut probs = vec![0.0; first.probs.len()];
    for (w, c) in weights.iter().zip(components) {
        for (a, p) in probs.iter_mut().zip(&c.probs) {
            *a += w * p;
        }
    }
    ExactDistribution::from_weights(first.seq_len, first.vocab_size, probs).expect("mixture of valid laws")
}

/// Gaussian weights renormalized over the given grid points.
pub fn gaussian_grid_weights(points: &[f64]) -> Result<Vec<f64>> {
    let w: Vec<f64> = points.iter().map(|z| (-0.5 * z * z).exp()).collect();
    let total: f64 = w.iter().sum();
    if !(total > 0.0) {
        return Err(CouplingError::Distribution("grid carries no Gaussian mass".into()));
    }
    Ok(w.into_iter().map(|x| x / total).collect())
}

/// Both sides of the latent-matching bound.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub lhs_tv: f64,
    /// `E_q TV(q(.|z), G(.|z)) + TV(q(z), prior)`.
    pub rhs_tv_bound: f64,
    /// `sqrt(eps_dec / 2) + sqrt(eps_flow / 2)`; infinite when a KL term is.
    pub rhs_kl_bound: f64,
    pub decoding_tv: f64,
    pub latent_tv: f64,
    pub eps_dec: f64,
    pub eps_flow: f64,
    pub holds_tv: bool,
    pub holds_kl: bool,
}

const BOUND_SLACK: f64 = 1e-12;

pub fn check_latent_matching_bound(
    joint: &DiscretizedLatentJoint,
    decoder: &[ExactDistribution],
    prior: &[f64],
) -> Result<BoundReport> {
    check_simplex(prior, "prior weights")?;
    if decoder.len() != joint.weights.len() || prior.len() != joint.weights.len() {
        return Err(CouplingError::Distribution("decoder, prior and joint must share the grid".into()));
    }
    for g in decoder {
        joint.conditionals[0].check_matching(g)?;
    }
    let p_data = joint.data_marginal();
    let p_gen = mixture(prior, decoder);
    let lhs_tv = tv_slices(&p_data.probs, &p_gen.probs);
    let mut decoding_tv = 0.0;
    let mut eps_dec = 0.0;
    for ((w, q), g) in joint.weights.iter().zip(&joint.conditionals).zip(decoder) {
        if *w > 0.0 {
            decoding_tv += w * tv_slices(&q.probs, &g.probs);
            eps_dec += w * kl_slices(&q.probs, &g.probs).unwrap_or(f64::INFINITY);
        }
    }
    let latent_tv = tv_slices(&joint.weights, prior);
    let eps_flow = kl_slices(&joint.weights, prior).unwrap_or(f64::INFINITY);
    let rhs_tv_bound = decoding_tv + latent_tv;
    let rhs_kl_bound = (eps_dec / 2.0).sqrt() + (eps_flow / 2.0).sqrt();
    Ok(BoundReport {
        lhs_tv,
        rhs_tv_bound,
        rhs_kl_bound,
        decoding_tv,
        latent_tv,
        eps_dec,
        eps_flow,
        holds_tv: lhs_tv <= rhs_tv_bound + BOUND_SLACK,
        holds_kl: lhs_tv <= rhs_kl_bound + BOUND_SLACK,
    })
}

/// TV between the two mixtures `sum_j a_j K_j` and `sum_j b_j K_j`, and between
/// the mixing weights. The first never exceeds the second.
pub fn data_processing_check(a: &[f64], b: &[f64], kernel: &[ExactDistribution]) -> Result<(f64, f64)> {
    check_simplex(a, "first mixing law")?;
    check_simplex(b, "second mixing law")?;
    if a.len() != kernel.len() || b.len() != kernel.len() {
        return Err(CouplingError::Distribution("mixing laws and kernel must share the grid".into()));
    }
    let out = tv_slices(&mixture(a, kernel).probs, &mixture(b, kernel).probs);
    Ok((out, tv_slices(a, b)))
}

/// A flat Dirichlet draw, optionally sharpened by `power`.
pub fn random_simplex<R: Rng + ?Sized>(n: usize, power: f64, rng: &mut R) -> Vec<f64> {
    let w: Vec<f64> = (0..n)
        .map(|_| {
            let e: f64 = Exp1.sample(rng);
            e.powf(power) + 1e-300
        })
        .collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|x| x / total).collect()
}

pub fn random_distribution<R: Rng + ?Sized>(seq_len: usize, vocab_size: usize, rng: &mut R) -> Result<ExactDistribution> {
    let n = support_size(seq_len, vocab_size)?;
    let power = [1.0, 2.0, 4.0][rng.random_range(0..3)];
    ExactDistribution::new(seq_len, vocab_size, random_simplex(n, power, rng))
}

/// The two-token law with mass 1/2 on `(0, 0)` and on `(1, 1)`.
pub fn perfect_pair() -> ExactDistribution {
    ExactDistribution::new(2, 2, vec![0.5, 0.0, 0.0, 0.5]).expect("valid law")
}

/// One line of an oracle report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleRecord {
    pub name: String,
    pub lhs: f64,
    pub rhs: f64,
    pub pass: bool,
}

impl OracleRecord {
    /// Passes when `lhs <= rhs + tol`.
    pub fn le(name: impl Into<String>, lhs: f64, rhs: f64, tol: f64) -> Self {
        OracleRecord {
            name: name.into(),
            lhs,
            rhs,
            pass: lhs <= rhs + tol,
        }
    }

    /// Passes when `|lhs - rhs| <= tol`.
    pub fn close(name: impl Into<String>, lhs: f64, rhs: f64, tol: f64) -> Self {
        OracleRecord {
            name: name.into(),
            lhs,
            rhs,
            pass: (lhs - rhs).abs() <= tol,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleSuite {
    All,
    Barrier,
    Bound,
    Pinsker,
}

/// The floor the factorized barrier must clear on the perfect pair.
pub const BARRIER_FLOOR: f64 = 0.40;

pub fn barrier_records() -> Result<Vec<OracleRecord>> {
    let p = perfect_pair();
    let fit = best_factorized_tv(&p)?;
    let marginal_tv = exact_tv(&p, &p.marginal_product())?;
    let w = product_witness(&p).expect("two positions");
    let switched = FnDecoder {
        latent_dim: 1,
        seq_len: 2,
        vocab_size: 2,
        f: |z: &[f64]| {
            let b = if z[0] >= 0.0 { 1.0 } else { 0.0 };
            vec![vec![1.0 - b, b]; 2]
        },
    };
    // An even node count keeps z = 0 off the grid, so the switch splits the mass evenly.
    let mixture = enumerate_generated_marginal(&switched, 400)?;
    Ok(vec![
        OracleRecord::close("barrier.marginal_product_tv", marginal_tv, 0.5, 1e-12),
        OracleRecord::le("barrier.floor", BARRIER_FLOOR, fit.tv, 0.0),
        OracleRecord::le("barrier.search_vs_marginal_product", fit.tv, marginal_tv, 1e-12),
        OracleRecord::close("barrier.minimizer_a", fit.marginals[0][1].max(fit.marginals[0][0]), 0.5f64.sqrt(), 2e-3),
        OracleRecord {
            name: "barrier.product_witness".into(),
            lhs: w.diagonal,
            rhs: w.off_diagonal,
            pass: w.gap() > 0.2,
        },
        OracleRecord::le("barrier.latent_mixture_tv", exact_tv(&p, &mixture)?, 1e-3, 0.0),
    ])
}

/// Random bound audits with `V = 2`, `T = 2` and 8 grid points, plus
/// data-processing checks on the same instances.
pub fn bound_records<R: Rng + ?Sized>(count: usize, rng: &mut R) -> Result<Vec<OracleRecord>> {
    let grid: Vec<f64> = (0..8).map(|i| -3.5 + i as f64).collect();
    let prior = gaussian_grid_weights(&grid)?;
    let mut out = Vec::with_capacity(3 * count + 2);
    for i in 0..count {
        let conds = (0..8).map(|_| random_distribution(2, 2, rng)).collect::<Result<Vec<_>>>()?;
        let joint = DiscretizedLatentJoint::new(random_simplex(8, 1.0, rng), conds)?;
        let decoder = (0..8).map(|_| random_distribution(2, 2, rng)).collect::<Result<Vec<_>>>()?;
        let r = check_latent_matching_bound(&joint, &decoder, &prior)?;
        out.push(OracleRecord::le(format!("bound.tv.{i}"), r.lhs_tv, r.rhs_tv_bound, BOUND_SLACK));
        out.push(OracleRecord::le(format!("bound.kl.{i}"), r.lhs_tv, r.rhs_kl_bound, BOUND_SLACK));
        let (mix, lat) = data_processing_check(joint.weights(), &prior, &decoder)?;
        out.push(OracleRecord::le(format!("bound.data_processing.{i}"), mix, lat, BOUND_SLACK));
    }

    // Exact decoder and matched latent give equality at zero; moving only the
    // latent law adds exactly its TV to the right-hand side.
    let conds = (0..8).map(|_| random_distribution(2, 2, rng)).collect::<Result<Vec<_>>>()?;
    let matched = DiscretizedLatentJoint::new(prior.clone(), conds.clone())?;
    let exact = check_latent_matching_bound(&matched, &conds, &prior)?;
    out.push(OracleRecord::close("bound.consistency", exact.lhs_tv, 0.0, 1e-12));
    let moved = DiscretizedLatentJoint::new(random_simplex(8, 1.0, rng), conds.clone())?;
    let shifted = check_latent_matching_bound(&moved, &conds, &prior)?;
    out.push(OracleRecord::close(
        "bound.latent_term",
        shifted.rhs_tv_bound - exact.rhs_tv_bound,
        tv_slices(moved.weights(), &prior),
        1e-12,
    ));
    Ok(out)
}

/// `TV <= sqrt(KL / 2)` on random pairs.
pub fn pinsker_records<R: Rng + ?Sized>(count: usize, rng: &mut R) -> Result<Vec<OracleRecord>> {
    let mut out = Vec::with_capacity(count + 1);
    let bern = |p: f64| ExactDistribution::new(1, 2, vec![1.0 - p, p]);
    out.push(OracleRecord::close(
        "pinsker.bernoulli_kl",
        exact_kl(&bern(0.8)?, &bern(0.5)?)?,
        0.8 * 1.6f64.ln() + 0.2 * 0.4f64.ln(),
        1e-12,
    ));
    for i in 0..count {
        let t = rng.random_range(1..=3);
        let v = rng.random_range(2..=3);
        let p = random_distribution(t, v, rng)?;
        let q = random_distribution(t, v, rng)?;
        out.push(OracleRecord::le(
            format!("pinsker.{i}"),
            exact_tv(&p, &q)?,
            (exact_kl(&p, &q)? / 2.0).sqrt(),
            1e-12,
        ));
    }
    Ok(out)
}

pub fn run_oracle_suite<R: Rng + ?Sized>(suite: OracleSuite, count: usize, rng: &mut R) -> Result<Vec<OracleRecord>> {
    let mut out = Vec::new();
    if matches!(suite, OracleSuite::All | OracleSuite::Barrier) {
        out.extend(barrier_records()?);
    }
    if matches!(suite, OracleSuite::All | OracleSuite::Bound) {
        out.extend(bound_records(count, rng)?);
    }
    if matches!(suite, OracleSuite::All | OracleSuite::Pinsker) {
        out.extend(pinsker_records(count, rng)?);
    }
    Ok(out)
}
