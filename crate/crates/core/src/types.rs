//! Domain value types shared by every stage: token sequences, continuous
//! representations and Gaussian latents, paired latent datasets and logit grids.

use serde::{Deserialize, Serialize};

use crate::error::{CouplingError, Result};
use crate::scalar::{softmax_into, Scalar};
use crate::tensor::Tensor;

/// A length-`T` sequence over a vocabulary of `V` categories. The mask token is
/// the index `V` (one past the data vocabulary).
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSequence {
    tokens: Vec<usize>,
    vocab_size: usize,
}

impl TokenSequence {
    /// A clean sequence: every token must lie in `[0, V)`.
    pub fn new(tokens: Vec<usize>, vocab_size: usize) -> Result<Self> {
        Self::check_vocab(vocab_size)?;
        if tokens.is_empty() {
            return Err(CouplingError::InvalidArgument("empty token sequence".into()));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= vocab_size) {
            return Err(CouplingError::TokenOutOfRange {
                token: t,
                vocab: vocab_size,
            });
        }
        Ok(TokenSequence { tokens, vocab_size })
    }

    /// A possibly partially masked sequence: tokens lie in `[0, V]`.
    pub fn with_mask(tokens: Vec<usize>, vocab_size: usize) -> Result<Self> {
        Self::check_vocab(vocab_size)?;
        if let Some(&t) = tokens.iter().find(|&&t| t > vocab_size) {
            return Err(CouplingError::TokenOutOfRange {
                token: t,
                vocab: vocab_size + 1,
            });
        }
        Ok(TokenSequence { tokens, vocab_size })
    }

    /// The all-mask sequence of length `len`.
    pub fn all_masked(len: usize, vocab_size: usize) -> Self {
        TokenSequence {
            tokens: vec![vocab_size; len],
            vocab_size,
        }
    }

    fn check_vocab(vocab_size: usize) -> Result<()> {
        if vocab_size < 2 {
            return Err(CouplingError::InvalidArgument(format!(
                "vocabulary size must be at least 2, got {vocab_size}"
            )));
        }
        Ok(())
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn mask_index(&self) -> usize {
        self.vocab_size
    }

    pub fn is_masked(&self, pos: usize) -> bool {
        self.tokens[pos] == self.vocab_size
    }

    pub fn has_mask(&self) -> bool {
        self.tokens.contains(&self.vocab_size)
    }

    pub fn masked_count(&self) -> usize {
        self.tokens.iter().filter(|&&t| t == self.vocab_size).count()
    }

    /// Copy with position `i` replaced by the mask token wherever `mask[i]` is set.
    pub fn make_masked_copy(&self, mask: &[bool]) -> Result<Self> {
        if mask.len() != self.len() {
            return Err(CouplingError::Shape(format!(
                "mask of length {} for a sequence of length {}",
                mask.len(),
                self.len()
            )));
        }
        if self.has_mask() {
            return Err(CouplingError::InvalidArgument(
                "sequence already contains mask tokens".into(),
            ));
        }
        let tokens = self
            .tokens
            .iter()
            .zip(mask)
            .map(|(&t, &m)| if m { self.vocab_size } else { t })
            .collect();
        Ok(TokenSequence {
            tokens,
            vocab_size: self.vocab_size,
        })
    }

    /// Mixed-radix index with position 0 most significant.
    pub fn ordinal(&self) -> usize {
        self.tokens
            .iter()
            .fold(0, |acc, &t| acc * self.vocab_size + t)
    }

    pub fn from_ordinal(mut ordinal: usize, len: usize, vocab_size: usize) -> Self {
        let mut tokens = vec![0; len];
        for slot in tokens.iter_mut().rev() {
            *slot = ordinal % vocab_size;
            ordinal /= vocab_size;
        }
        TokenSequence { tokens, vocab_size }
    }
}

/// Concatenate a batch of sequences into one index vector, checking that every
/// sequence has length `seq_len` and uses tokens below `limit`.
pub fn flatten_tokens(xs: &[TokenSequence], seq_len: usize, limit: usize) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(xs.len() * seq_len);
    for x in xs {
        if x.len() != seq_len {
            return Err(CouplingError::Shape(format!(
                "sequence of length {} where {seq_len} was expected",
                x.len()
            )));
        }
        if let Some(&t) = x.tokens().iter().find(|&&t| t >= limit) {
            return Err(CouplingError::TokenOutOfRange { token: t, vocab: limit });
        }
        out.extend_from_slice(x.tokens());
    }
    Ok(out)
}

/// Layout of a continuous representation: `positions x channels` values,
/// flattened position-major.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LatentShape {
    pub positions: usize,
    pub channels: usize,
}

impl LatentShape {
    pub fn new(positions: usize, channels: usize) -> Self {
        LatentShape {
            positions,
            channels,
        }
    }

    pub fn flat(dim: usize) -> Self {
        LatentShape {
            positions: 1,
            channels: dim,
        }
    }

    pub fn dim(&self) -> usize {
        self.positions * self.channels
    }
}

fn check_latent<F: Scalar>(shape: LatentShape, values: &[F], what: &str) -> Result<()> {
    if values.len() != shape.dim() {
        return Err(CouplingError::Shape(format!(
            "{what}: {} values for shape {}x{}",
            values.len(),
            shape.positions,
            shape.channels
        )));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(CouplingError::NonFinite(what.into()));
    }
    Ok(())
}

/// Encoder output `u`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContinuousRepresentation<F> {
    shape: LatentShape,
    values: Vec<F>,
}

impl<F: Scalar> ContinuousRepresentation<F> {
    pub fn new(shape: LatentShape, values: Vec<F>) -> Result<Self> {
        check_latent(shape, &values, "continuous representation")?;
        Ok(ContinuousRepresentation { shape, values })
    }

    pub fn shape(&self) -> LatentShape {
        self.shape
    }

    pub fn values(&self) -> &[F] {
        &self.values
    }

    pub fn to_row(&self) -> Tensor<F> {
        Tensor::from_vec(1, self.values.len(), self.values.clone()).expect("row")
    }
}

/// Flow output / prior sample `z`; same shape as the representation it came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianLatent<F> {
    shape: LatentShape,
    values: Vec<F>,
}

impl<F: Scalar> GaussianLatent<F> {
    pub fn new(shape: LatentShape, values: Vec<F>) -> Result<Self> {
        check_latent(shape, &values, "gaussian latent")?;
        Ok(GaussianLatent { shape, values })
    }

    pub fn shape(&self) -> LatentShape {
        self.shape
    }

    pub fn values(&self) -> &[F] {
        &self.values
    }

    pub fn to_row(&self) -> Tensor<F> {
        Tensor::from_vec(1, self.values.len(), self.values.clone()).expect("row")
    }

    /// Split a `n x dim` batch into individual latents.
    pub fn from_batch(shape: LatentShape, batch: &Tensor<F>) -> Result<Vec<Self>> {
        (0..batch.rows())
            .map(|r| GaussianLatent::new(shape, batch.row(r).to_vec()))
            .collect()
    }

    /// Stack latents into a `n x dim` batch.
    pub fn stack(latents: &[Self]) -> Result<Tensor<F>> {
        let dim = latents.first().map_or(0, |l| l.values.len());
        if latents.iter().any(|l| l.values.len() != dim) {
            return Err(CouplingError::Shape("latents of differing shape".into()));
        }
        Tensor::from_vec(
            latents.len(),
            dim,
            latents.iter().flat_map(|l| l.values.iter().copied()).collect(),
        )
    }

    pub fn digest(&self) -> String {
        values_digest(&self.values)
    }
}

/// SHA-256 over the values widened to little-endian `f64`.
pub fn values_digest<F: Scalar>(values: &[F]) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    for v in values {
        h.update(v.as_f64().to_le_bytes());
    }
    hex::encode(h.finalize())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairProvenance {
    /// One noise draw per example, materialized once after freezing.
    Frozen,
    /// Noise redrawn for this pass (epoch index recorded).
    Resampled { epoch: u64 },
}

/// `(z, x)` supervision pairs for the one-step decoder.
#[derive(Clone, Debug)]
pub struct PairedLatentDataset<F> {
    latents: Tensor<F>,
    sequences: Vec<TokenSequence>,
    shape: LatentShape,
    provenance: PairProvenance,
}

impl<F: Scalar> PairedLatentDataset<F> {
    pub fn new(
        latents: Tensor<F>,
        sequences: Vec<TokenSequence>,
        shape: LatentShape,
        provenance: PairProvenance,
    ) -> Result<Self> {
        if latents.rows() != sequences.len() {
            return Err(CouplingError::Shape(format!(
                "{} latents for {} sequences",
                latents.rows(),
                sequences.len()
            )));
        }
        if latents.cols() != shape.dim() {
            return Err(CouplingError::Shape("latent width differs from shape".into()));
        }
        if let Some(first) = sequences.first() {
            if sequences
                .iter()
                .any(|s| s.len() != first.len() || s.vocab_size() != first.vocab_size())
            {
                return Err(CouplingError::Shape("sequences differ in length or vocabulary".into()));
            }
        }
        if !latents.all_finite() {
            return Err(CouplingError::NonFinite("paired latents".into()));
        }
        Ok(PairedLatentDataset {
            latents,
            sequences,
            shape,
            provenance,
        })
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn latents(&self) -> &Tensor<F> {
        &self.latents
    }

    pub fn sequences(&self) -> &[TokenSequence] {
        &self.sequences
    }

    pub fn shape(&self) -> LatentShape {
        self.shape
    }

    pub fn provenance(&self) -> PairProvenance {
        self.provenance
    }

    pub fn latent(&self, i: usize) -> GaussianLatent<F> {
        GaussianLatent {
            shape: self.shape,
            values: self.latents.row(i).to_vec(),
        }
    }
}

/// Per-position unnormalized log-probabilities, `T x V`. Temperatures divide the
/// logits before the softmax.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogitGrid<F> {
    values: Tensor<F>,
}

impl<F: Scalar> LogitGrid<F> {
    pub fn new(values: Tensor<F>) -> Result<Self> {
        if !values.all_finite() {
            return Err(CouplingError::NonFinite("logit grid".into()));
        }
        if values.cols() < 2 || values.rows() == 0 {
            return Err(CouplingError::Shape(format!(
                "logit grid {}x{} needs at least one position and two categories",
                values.rows(),
                values.cols()
            )));
        }
        Ok(LogitGrid { values })
    }

    pub fn len(&self) -> usize {
        self.values.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.rows() == 0
    }

    pub fn vocab_size(&self) -> usize {
        self.values.cols()
    }

    pub fn values(&self) -> &Tensor<F> {
        &self.values
    }

    pub fn into_tensor(self) -> Tensor<F> {
        self.values
    }

    /// Row-wise `softmax(logits / temperature)`.
    pub fn probabilities(&self, temperature: F) -> Tensor<F> {
        let mut out = Tensor::zeros(self.values.rows(), self.values.cols());
        let scaled = self.values.map(|x| x / temperature);
        for r in 0..scaled.rows() {
            softmax_into(scaled.row(r), out.row_mut(r));
        }
        out
    }

    /// Split a `(n * T) x V` stack into `n` grids.
    pub fn split_batch(stacked: &Tensor<F>, len: usize) -> Result<Vec<Self>> {
        if len == 0 || !stacked.rows().is_multiple_of(len) {
            return Err(CouplingError::Shape("stacked logits not divisible by length".into()));
        }
        (0..stacked.rows() / len)
            .map(|i| LogitGrid::new(stacked.slice_rows(i * len, (i + 1) * len)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn masked_copy_examples() {
        let x = TokenSequence::new(vec![2, 0, 1], 4).unwrap();
        assert_eq!(x.make_masked_copy(&[false; 3]).unwrap(), x);
        let full = x.make_masked_copy(&[true; 3]).unwrap();
        assert_eq!(full.tokens(), &[4, 4, 4]);
        let x = TokenSequence::new(vec![2, 0, 1, 3], 4).unwrap();
        let m = x.make_masked_copy(&[false, true, false, true]).unwrap();
        assert_eq!(m.tokens(), &[2, 4, 1, 4]);
        assert!(x.make_masked_copy(&[true]).is_err());
    }

    #[test]
    fn token_range_is_enforced() {
        assert!(matches!(
            TokenSequence::new(vec![0, 2], 2),
            Err(CouplingError::TokenOutOfRange { token: 2, .. })
        ));
        assert!(TokenSequence::with_mask(vec![0, 2], 2).is_ok());
        assert!(TokenSequence::new(vec![0], 1).is_err());
    }

    #[test]
    fn ordinal_round_trip() {
        for o in 0..27 {
            let s = TokenSequence::from_ordinal(o, 3, 3);
            assert_eq!(s.ordinal(), o);
        }
        assert_eq!(TokenSequence::from_ordinal(1, 2, 2).tokens(), &[0, 1]);
    }

    #[test]
    fn latent_validation() {
        let shape = LatentShape::new(2, 3);
        assert!(GaussianLatent::<f64>::new(shape, vec![0.0; 5]).is_err());
        assert!(GaussianLatent::<f64>::new(shape, vec![f64::NAN; 6]).is_err());
        assert!(ContinuousRepresentation::<f32>::new(shape, vec![0.5; 6]).is_ok());
    }

    #[test]
    fn logit_rows_normalize() {
        let g = LogitGrid::new(Tensor::<f64>::from_fn(3, 4, |r, c| (r * c) as f64 - 2.0)).unwrap();
        let p = g.probabilities(0.7);
        for r in 0..3 {
            assert!((p.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        assert!(LogitGrid::new(Tensor::<f64>::filled(2, 2, f64::INFINITY)).is_err());
    }

    proptest! {
        #[test]
        fn zero_mask_is_identity(tokens in prop::collection::vec(0usize..5, 1..20)) {
            let x = TokenSequence::new(tokens.clone(), 5).unwrap();
            let y = x.make_masked_copy(&vec![false; tokens.len()]).unwrap();
            prop_assert_eq!(x, y);
        }

        #[test]
        fn serde_round_trip(tokens in prop::collection::vec(0usize..7, 1..12),
                            vals in prop::collection::vec(-1e6f64..1e6, 1..12)) {
            let x = TokenSequence::new(tokens, 7).unwrap();
            let back: TokenSequence = serde_json::from_str(&serde_json::to_string(&x).unwrap()).unwrap();
            prop_assert_eq!(x, back);

            let n = vals.len();
            let z = GaussianLatent::new(LatentShape::flat(n), vals.clone()).unwrap();
            let back: GaussianLatent<f64> = serde_json::from_str(&serde_json::to_string(&z).unwrap()).unwrap();
            prop_assert_eq!(&z, &back);

            let grid = LogitGrid::new(Tensor::from_vec(n, 2, vals.iter().flat_map(|&v| [v, -v]).collect()).unwrap()).unwrap();
            let back: LogitGrid<f64> = serde_json::from_str(&serde_json::to_string(&grid).unwrap()).unwrap();
            prop_assert_eq!(grid, back);
        }
    }
}
