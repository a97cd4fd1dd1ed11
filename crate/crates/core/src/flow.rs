//! Affine-coupling normalizing flow with exact inverse and log-determinant.
//!
//! Block `i` keeps one half of the coordinates fixed and transforms the other
//! half as `y = x * exp(s) + t`, where `(s, t)` come from a subnetwork of the
//! fixed half and `s` is squashed to `(-clamp, clamp)` by `clamp * tanh(s / clamp)`.
//! Even blocks condition on the first half and odd blocks on the second, so
//! consecutive blocks alternate without needing a permutation. The final layer
//! of every subnetwork starts at zero: a fresh flow is the identity.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::config::{FlowConfig, Permutation, Subnet};
use crate::error::{CouplingError, Result};
use crate::nn::{Activation, Linear, Mlp, ParamStore, Transformer};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::types::{ContinuousRepresentation, GaussianLatent, LatentShape};

#[derive(Clone, Debug)]
enum SubnetKind {
    Mlp(Mlp),
    /// Per-position tokens attending over all latent positions.
    Attention {
        input: Linear,
        body: Transformer,
        output: Linear,
        positions: usize,
        trans_channels: usize,
    },
}

#[derive(Clone, Debug)]
struct CouplingBlock {
    cond: Vec<usize>,
    trans: Vec<usize>,
    /// Output column `j` is column `assemble[j]` of `[cond | trans]`.
    assemble: Vec<usize>,
    net: SubnetKind,
}

#[derive(Clone, Debug)]
pub struct CouplingFlow {
    blocks: Vec<CouplingBlock>,
    /// Applied after every block; `None` leaves coordinates in place.
    permutation: Option<Vec<usize>>,
    inverse_permutation: Option<Vec<usize>>,
    pub shape: LatentShape,
    pub clamp: f64,
}

fn assemble_order(cond: &[usize], trans: &[usize], dim: usize) -> Vec<usize> {
    let mut order = vec![0; dim];
    for (k, &i) in cond.iter().chain(trans).enumerate() {
        order[i] = k;
    }
    order
}

fn invert(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

impl CouplingFlow {
    pub fn new<F: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        shape: LatentShape,
        cfg: &FlowConfig,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let dim = shape.dim();
        let blocks = (0..cfg.num_blocks)
            .map(|b| {
                let name = format!("flow.block{b}");
                let first_fixed = b % 2 == 0;
                match cfg.subnet {
                    Subnet::Mlp => {
                        let half = dim / 2;
                        let (lo, hi): (Vec<usize>, Vec<usize>) = ((0..half).collect(), (half..dim).collect());
                        let (cond, trans) = if first_fixed { (lo, hi) } else { (hi, lo) };
                        let mut dims = vec![cond.len()];
                        dims.extend(std::iter::repeat_n(cfg.hidden_width, cfg.num_layers_per_block));
                        dims.push(2 * trans.len());
                        let net = Mlp::new(store, &format!("{name}.net"), &dims, activation, true, rng);
                        CouplingBlock {
                            assemble: assemble_order(&cond, &trans, dim),
                            cond,
                            trans,
                            net: SubnetKind::Mlp(net),
                        }
                    }
                    Subnet::Attention => {
                        let (p, c) = (shape.positions, shape.channels);
                        let half = c / 2;
                        let (lo, hi): (Vec<usize>, Vec<usize>) = ((0..half).collect(), (half..c).collect());
                        let (cc, tc) = if first_fixed { (lo, hi) } else { (hi, lo) };
                        let spread = |chs: &[usize]| -> Vec<usize> {
                            (0..p).flat_map(|pos| chs.iter().map(move |&ch| pos * c + ch)).collect()
                        };
                        let (cond, trans) = (spread(&cc), spread(&tc));
                        let w = cfg.hidden_width;
                        let net = SubnetKind::Attention {
                            input: Linear::new(store, &format!("{name}.input"), cc.len(), w, rng),
                            body: Transformer::new(
                                store,
                                &format!("{name}.body"),
                                p,
                                w,
                                cfg.num_layers_per_block,
                                cfg.heads,
                                rng,
                            ),
                            output: Linear::zeros(store, &format!("{name}.output"), w, 2 * tc.len()),
                            positions: p,
                            trans_channels: tc.len(),
                        };
                        CouplingBlock {
                            assemble: assemble_order(&cond, &trans, dim),
                            cond,
                            trans,
                            net,
                        }
                    }
                }
            })
            .collect();
        let permutation = match cfg.permutation {
            Permutation::None => None,
            Permutation::Reverse => Some((0..dim).rev().collect::<Vec<_>>()),
        };
        CouplingFlow {
            blocks,
            inverse_permutation: permutation.as_deref().map(invert),
            permutation,
            shape,
            clamp: cfg.clamp,
        }
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn dim(&self) -> usize {
        self.shape.dim()
    }

    /// Index arrays that, with the parameters, pin down the bijection.
    pub fn descriptors(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("flow.block{i}.cond_index"), b.cond.clone()));
            out.push((format!("flow.block{i}.trans_index"), b.trans.clone()));
        }
        out.push((
            "flow.permutation".into(),
            self.permutation.clone().unwrap_or_else(|| (0..self.dim()).collect()),
        ));
        out
    }

    /// `(log_scale, shift)`, each `batch x |trans|`, from the fixed half.
    fn scale_shift<'t, F: Scalar>(
        &self,
        block: &CouplingBlock,
        tape: &'t Tape<F>,
        ps: &ParamStore<F>,
        fixed: Var<'t, F>,
    ) -> (Var<'t, F>, Var<'t, F>) {
        let batch = fixed.rows();
        let nt = block.trans.len();
        let (raw, shift) = match &block.net {
            SubnetKind::Mlp(net) => {
                let o = net.forward(tape, ps, fixed);
                (o.slice_cols(0, nt), o.slice_cols(nt, 2 * nt))
            }
            SubnetKind::Attention {
                input,
                body,
                output,
                positions,
                trans_channels,
            } => {
                let (p, tc) = (*positions, *trans_channels);
                let h = input.forward(tape, ps, fixed.reshape(batch * p, fixed.cols() / p));
                let o = output
                    .forward(tape, ps, body.forward(tape, ps, h, batch))
                    .reshape(batch, p * 2 * tc);
                let s_idx: Vec<usize> = (0..p).flat_map(|q| (0..tc).map(move |j| q * 2 * tc + j)).collect();
                let t_idx: Vec<usize> = s_idx.iter().map(|&i| i + tc).collect();
                (o.select_cols(&s_idx), o.select_cols(&t_idx))
            }
        };
        let c = F::of(self.clamp);
        (raw.scale(F::one() / c).tanh().scale(c), shift)
    }

    /// `u: batch x dim` to `(z, log|det J|)` with the log-determinant as `batch x 1`.
    pub fn forward_var<'t, F: Scalar>(
        &self,
        tape: &'t Tape<F>,
        ps: &ParamStore<F>,
        u: Var<'t, F>,
    ) -> (Var<'t, F>, Var<'t, F>) {
        let mut x = u;
        let mut logdet = tape.constant(Tensor::zeros(u.rows(), 1));
        for block in &self.blocks {
            let fixed = x.select_cols(&block.cond);
            let moving = x.select_cols(&block.trans);
            let (s, t) = self.scale_shift(block, tape, ps, fixed);
            let moved = moving * s.exp() + t;
            x = Var::concat_cols(&[fixed, moved]).select_cols(&block.assemble);
            logdet = logdet + s.sum_rows();
            if let Some(p) = &self.permutation {
                x = x.select_cols(p);
            }
        }
        (x, logdet)
    }

    /// Batched forward pass on plain values.
    pub fn forward_batch<F: Scalar>(&self, ps: &ParamStore<F>, u: &Tensor<F>) -> Result<(Tensor<F>, Vec<F>)> {
        self.check_width(u.cols())?;
        let tape = Tape::new();
        let (z, logdet) = self.forward_var(&tape, ps, tape.constant(u.clone()));
        let (z, logdet) = (z.value(), logdet.value());
        if !z.all_finite() || !logdet.all_finite() {
            return Err(CouplingError::NonFinite("flow forward intermediate".into()));
        }
        Ok((z, logdet.into_vec()))
    }

    /// Batched exact inverse on plain values.
    pub fn inverse_batch<F: Scalar>(&self, ps: &ParamStore<F>, z: &Tensor<F>) -> Result<Tensor<F>> {
        self.check_width(z.cols())?;
        let tape = Tape::new();
        let mut y = tape.constant(z.clone());
        for block in self.blocks.iter().rev() {
            if let Some(inv) = &self.inverse_permutation {
                y = y.select_cols(inv);
            }
            let fixed = y.select_cols(&block.cond);
            let moved = y.select_cols(&block.trans);
            let (s, t) = self.scale_shift(block, &tape, ps, fixed);
            let moving = (moved - t) * (-s).exp();
            y = Var::concat_cols(&[fixed, moving]).select_cols(&block.assemble);
        }
        let u = y.value();
        if !u.all_finite() {
            return Err(CouplingError::NonFinite("flow inverse intermediate".into()));
        }
        Ok(u)
    }

    fn check_width(&self, cols: usize) -> Result<()> {
        if cols != self.dim() {
            return Err(CouplingError::Shape(format!(
                "flow expects {} latent dims, got {cols}",
                self.dim()
            )));
        }
        Ok(())
    }

    fn check_shape(&self, shape: LatentShape) -> Result<()> {
        if shape != self.shape {
            return Err(CouplingError::Shape(format!(
                "flow expects a {}x{} latent, got {}x{}",
                self.shape.positions, self.shape.channels, shape.positions, shape.channels
            )));
        }
        Ok(())
    }

    pub fn flow_forward<F: Scalar>(
        &self,
        ps: &ParamStore<F>,
        u: &ContinuousRepresentation<F>,
    ) -> Result<(GaussianLatent<F>, F)> {
        self.check_shape(u.shape())?;
        let (z, logdet) = self.forward_batch(ps, &u.to_row())?;
        Ok((GaussianLatent::new(self.shape, z.into_vec())?, logdet[0]))
    }

    pub fn flow_inverse<F: Scalar>(
        &self,
        ps: &ParamStore<F>,
        z: &GaussianLatent<F>,
    ) -> Result<ContinuousRepresentation<F>> {
        self.check_shape(z.shape())?;
        let u = self.inverse_batch(ps, &z.to_row())?;
        ContinuousRepresentation::new(self.shape, u.into_vec())
    }

    /// Change-of-variables negative log-likelihood under the standard normal prior.
    pub fn flow_nll<F: Scalar>(&self, ps: &ParamStore<F>, u: &ContinuousRepresentation<F>) -> Result<F> {
        let (z, logdet) = self.flow_forward(ps, u)?;
        Ok(standard_normal_nll(z.values()) - logdet)
    }
}

/// `-ln N(z; 0, I)`.
pub fn standard_normal_nll<F: Scalar>(z: &[F]) -> F {
    let half_log_2pi = F::of(0.5 * (2.0 * std::f64::consts::PI).ln());
    z.iter().map(|&v| F::of(0.5) * v * v + half_log_2pi).sum()
}

/// Per-row flow NLL from the flow outputs: `batch x 1`.
pub fn flow_nll_rows<'t, F: Scalar>(z: Var<'t, F>, logdet: Var<'t, F>) -> Var<'t, F> {
    let d = F::of_usize(z.cols());
    let constant = F::of(0.5) * d * F::of((2.0 * std::f64::consts::PI).ln());
    z.square().sum_rows().scale(F::of(0.5)).shift(constant) - logdet
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::DMatrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn flow_cfg(blocks: usize, subnet: Subnet, permutation: Permutation) -> FlowConfig {
        FlowConfig {
            num_blocks: blocks,
            hidden_width: 16,
            num_layers_per_block: 2,
            heads: 2,
            subnet,
            clamp: 5.0,
            permutation,
        }
    }

    /// A flow with every parameter jittered so no block is the identity.
    fn random_flow<F: Scalar>(
        shape: LatentShape,
        cfg: &FlowConfig,
        jitter: f64,
        seed: u64,
    ) -> (ParamStore<F>, CouplingFlow) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamStore::new();
        let flow = CouplingFlow::new(&mut ps, shape, cfg, Activation::Tanh, &mut rng);
        for t in ps.tensors_mut() {
            let noise = Tensor::<F>::randn(t.rows(), t.cols(), F::of(jitter), &mut rng);
            t.add_assign(&noise);
        }
        (ps, flow)
    }

    #[test]
    fn fresh_flow_is_identity() {
        let shape = LatentShape::flat(5);
        let mut ps = ParamStore::<f64>::new();
        let flow = CouplingFlow::new(
            &mut ps,
            shape,
            &flow_cfg(4, Subnet::Mlp, Permutation::None),
            Activation::Silu,
            &mut ChaCha8Rng::seed_from_u64(0),
        );
        let u = ContinuousRepresentation::new(shape, vec![0.3, -1.0, 2.0, 0.0, 5.0]).unwrap();
        let (z, logdet) = flow.flow_forward(&ps, &u).unwrap();
        assert_eq!(z.values(), u.values());
        assert_eq!(logdet, 0.0);
        let back = flow.flow_inverse(&ps, &z).unwrap();
        assert_eq!(back.values(), u.values());
    }

    #[test]
    fn identity_nll_examples() {
        let mut ps = ParamStore::<f64>::new();
        let identity = |dim| {
            CouplingFlow::new(
                &mut ParamStore::<f64>::new(),
                LatentShape::flat(dim),
                &flow_cfg(0, Subnet::Mlp, Permutation::None),
                Activation::Silu,
                &mut ChaCha8Rng::seed_from_u64(0),
            )
        };
        let one = identity(1);
        let u = ContinuousRepresentation::new(LatentShape::flat(1), vec![0.0]).unwrap();
        assert_relative_eq!(
            one.flow_nll(&ps, &u).unwrap(),
            0.5 * (2.0 * std::f64::consts::PI).ln(),
            epsilon = 1e-12
        );
        let flow = CouplingFlow::new(
            &mut ps,
            LatentShape::flat(2),
            &flow_cfg(3, Subnet::Mlp, Permutation::None),
            Activation::Silu,
            &mut ChaCha8Rng::seed_from_u64(0),
        );
        let u = ContinuousRepresentation::new(LatentShape::flat(2), vec![2.0f64.sqrt(), -(2.0f64.sqrt())]).unwrap();
        assert_relative_eq!(
            flow.flow_nll(&ps, &u).unwrap(),
            (2.0 * std::f64::consts::PI).ln() + 2.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn random_flow_nll_recomposes() {
        let shape = LatentShape::flat(4);
        let (ps, flow) = random_flow::<f64>(shape, &flow_cfg(3, Subnet::Mlp, Permutation::Reverse), 0.3, 9);
        let u = ContinuousRepresentation::new(shape, vec![0.2, -0.7, 1.1, 0.4]).unwrap();
        let (z, logdet) = flow.flow_forward(&ps, &u).unwrap();
        let log_density: f64 = z
            .values()
            .iter()
            .map(|v| -0.5 * v * v - 0.5 * (2.0 * std::f64::consts::PI).ln())
            .sum();
        assert_relative_eq!(flow.flow_nll(&ps, &u).unwrap(), -log_density - logdet, epsilon = 1e-12);
        assert!(logdet.abs() > 1e-3, "jittered flow should not be volume preserving");
    }

    fn round_trip_error<F: Scalar>(subnet: Subnet, shape: LatentShape, seed: u64) -> f64 {
        let (ps, flow) = random_flow::<F>(shape, &flow_cfg(4, subnet, Permutation::Reverse), 0.2, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let u = Tensor::<F>::randn(1000, shape.dim(), F::one(), &mut rng);
        let (z, _) = flow.forward_batch(&ps, &u).unwrap();
        let back = flow.inverse_batch(&ps, &z).unwrap();
        let err_u = back.max_abs_diff(&u).as_f64();
        let z2 = Tensor::<F>::randn(1000, shape.dim(), F::one(), &mut rng);
        let u2 = flow.inverse_batch(&ps, &z2).unwrap();
        let (again, _) = flow.forward_batch(&ps, &u2).unwrap();
        err_u.max(again.max_abs_diff(&z2).as_f64())
    }

    #[test]
    fn round_trip_within_tolerance() {
        assert!(round_trip_error::<f64>(Subnet::Mlp, LatentShape::flat(6), 1) < 1e-5);
        assert!(round_trip_error::<f32>(Subnet::Mlp, LatentShape::flat(6), 2) < 1e-5);
        assert!(round_trip_error::<f64>(Subnet::Attention, LatentShape::new(3, 4), 3) < 1e-5);
    }

    fn fd_logdet(flow: &CouplingFlow, ps: &ParamStore<f64>, u: &[f64]) -> f64 {
        let d = u.len();
        let h = 1e-5;
        let mut jac = DMatrix::<f64>::zeros(d, d);
        for j in 0..d {
            let mut plus = u.to_vec();
            plus[j] += h;
            let mut minus = u.to_vec();
            minus[j] -= h;
            let (zp, _) = flow.forward_batch(ps, &Tensor::from_vec(1, d, plus).unwrap()).unwrap();
            let (zm, _) = flow.forward_batch(ps, &Tensor::from_vec(1, d, minus).unwrap()).unwrap();
            for i in 0..d {
                jac[(i, j)] = (zp.data()[i] - zm.data()[i]) / (2.0 * h);
            }
        }
        jac.determinant().abs().ln()
    }

    #[test]
    fn logdet_matches_numerical_jacobian() {
        for (dim, shape, subnet) in [
            (4, LatentShape::flat(4), Subnet::Mlp),
            (6, LatentShape::flat(6), Subnet::Mlp),
            (8, LatentShape::new(2, 4), Subnet::Attention),
        ] {
            let (ps, flow) = random_flow::<f64>(shape, &flow_cfg(3, subnet, Permutation::Reverse), 0.3, dim as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(77);
            let u = Tensor::<f64>::randn(1, dim, 1.0, &mut rng);
            let (_, logdet) = flow.forward_batch(&ps, &u).unwrap();
            let numeric = fd_logdet(&flow, &ps, u.data());
            let rel = (logdet[0] - numeric).abs() / numeric.abs().max(1.0);
            assert!(rel < 1e-3, "dim {dim}: analytic {} numeric {numeric}", logdet[0]);
        }
    }

    #[test]
    fn density_integrates_to_one() {
        let shape = LatentShape::flat(2);
        let (ps, flow) = random_flow::<f64>(shape, &flow_cfg(4, Subnet::Mlp, Permutation::None), 0.15, 4);
        let n = 241;
        let (lo, hi) = (-9.0, 9.0);
        let step = (hi - lo) / (n - 1) as f64;
        let pts: Vec<f64> = (0..n).map(|i| lo + step * i as f64).collect();
        let grid = Tensor::from_fn(n * n, 2, |r, c| if c == 0 { pts[r / n] } else { pts[r % n] });
        let (z, logdet) = flow.forward_batch(&ps, &grid).unwrap();
        let mut mass = 0.0;
        for r in 0..n * n {
            let w = |i: usize| if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
            let nll = standard_normal_nll(z.row(r)) - logdet[r];
            mass += w(r / n) * w(r % n) * (-nll).exp() * step * step;
        }
        assert!((mass - 1.0).abs() < 1e-2, "mass {mass}");
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut ps = ParamStore::<f64>::new();
        let flow = CouplingFlow::new(
            &mut ps,
            LatentShape::flat(4),
            &flow_cfg(2, Subnet::Mlp, Permutation::None),
            Activation::Silu,
            &mut ChaCha8Rng::seed_from_u64(0),
        );
        let u = ContinuousRepresentation::new(LatentShape::flat(3), vec![0.0; 3]).unwrap();
        assert!(flow.flow_forward(&ps, &u).is_err());
        assert_eq!(flow.descriptors().len(), 5);
    }
}
