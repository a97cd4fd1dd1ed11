//! Dataset ingestion: binarized MNIST from the IDX archives, synthetic
//! correlated sequences with closed-form laws, and plain token files.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use md5::{Digest as _, Md5};
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::{DataSource, ExperimentConfig};
use crate::error::{CouplingError, Result};
use crate::oracle::ExactDistribution;
use crate::training::{init_rng, Phase, SeededRng};
use crate::types::TokenSequence;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

struct ArchiveFiles {
    images: &'static str,
    images_md5: &'static str,
    labels: &'static str,
    labels_md5: &'static str,
}

fn archive(split: Split) -> ArchiveFiles {
    match split {
        Split::Train => ArchiveFiles {
            images: "train-images-idx3-ubyte.gz",
            images_md5: "f68b3c2dcbeaaa9fbdd348bbdeb94873",
            labels: "train-labels-idx1-ubyte.gz",
            labels_md5: "d53e105ee54ea40749a09fcbcd1e9432",
        },
        Split::Test => ArchiveFiles {
            images: "t10k-images-idx3-ubyte.gz",
            images_md5: "9fb629c4189551a2d022fa330f9573f3",
            labels: "t10k-labels-idx1-ubyte.gz",
            labels_md5: "ec29112dd5afa0611ce80d1b7f02629c",
        },
    }
}

/// Binary images flattened row-major to `side * side` tokens over `{0, 1}`.
#[derive(Clone, Debug, PartialEq)]
pub struct BinaryImageDataset {
    pub items: Vec<TokenSequence>,
    pub labels: Vec<usize>,
    pub split: Split,
    pub threshold: f64,
    pub side: usize,
}

impl BinaryImageDataset {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn ones_fraction(&self) -> f64 {
        let ones: usize = self.items.iter().map(|x| x.tokens().iter().sum::<usize>()).sum();
        ones as f64 / (self.items.len() * self.side * self.side).max(1) as f64
    }

    /// SHA-256 over pixels and labels.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for (x, y) in self.items.iter().zip(&self.labels) {
            h.update(x.tokens().iter().map(|&t| t as u8).collect::<Vec<_>>());
            h.update([*y as u8]);
        }
        hex::encode(h.finalize())
    }
}

/// Pixel on iff its `[0, 1]`-scaled intensity exceeds `threshold`.
pub fn binarize(pixels: &[u8], threshold: f64) -> Vec<usize> {
    pixels.iter().map(|&p| usize::from(p as f64 / 255.0 > threshold)).collect()
}

fn idx_error(origin: &Path, message: impl Into<String>) -> CouplingError {
    CouplingError::Format {
        path: origin.display().to_string(),
        message: message.into(),
    }
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

/// Parse an uncompressed IDX image file into `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8], origin: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    if bytes.len() < 16 || be_u32(bytes, 0) != 0x0000_0803 {
        return Err(idx_error(origin, "not an IDX image file"));
    }
    let (n, r, c) = (be_u32(bytes, 4) as usize, be_u32(bytes, 8) as usize, be_u32(bytes, 12) as usize);
    if bytes.len() != 16 + n * r * c {
        return Err(idx_error(origin, "image payload length disagrees with the header"));
    }
    Ok((n, r, c, bytes[16..].to_vec()))
}

pub fn parse_idx_labels(bytes: &[u8], origin: &Path) -> Result<Vec<u8>> {
    if bytes.len() < 8 || be_u32(bytes, 0) != 0x0000_0801 {
        return Err(idx_error(origin, "not an IDX label file"));
    }
    let n = be_u32(bytes, 4) as usize;
    if bytes.len() != 8 + n {
        return Err(idx_error(origin, "label payload length disagrees with the header"));
    }
    Ok(bytes[8..].to_vec())
}

fn read_verified(path: &Path, md5_hex: &str) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            CouplingError::Prerequisite(format!("MNIST archive {} not found", path.display()))
        } else {
            e.into()
        }
    })?;
    let got = hex::encode(Md5::digest(&raw));
    if got != md5_hex {
        return Err(CouplingError::Checksum {
            file: path.display().to_string(),
            expected: md5_hex.into(),
            actual: got,
        });
    }
    let mut out = Vec::new();
    GzDecoder::new(raw.as_slice())
        .read_to_end(&mut out)
        .map_err(|e| idx_error(path, format!("gzip: {e}")))?;
    Ok(out)
}

/// Load one split from the four standard `*.gz` archives in `dir`, checking
/// their MD5 sums, and binarize at `threshold`.
pub fn load_mnist_binary(dir: &Path, split: Split, threshold: f64, limit: Option<usize>) -> Result<BinaryImageDataset> {
    let files = archive(split);
    let ipath = dir.join(files.images);
    let lpath = dir.join(files.labels);
    let (n, r, c, pixels) = parse_idx_images(&read_verified(&ipath, files.images_md5)?, &ipath)?;
    let labels = parse_idx_labels(&read_verified(&lpath, files.labels_md5)?, &lpath)?;
    if labels.len() != n || r != c {
        return Err(idx_error(&ipath, "images and labels disagree"));
    }
    let take = limit.map_or(n, |l| l.min(n));
    let items = pixels
        .chunks_exact(r * c)
        .take(take)
        .map(|img| TokenSequence::new(binarize(img, threshold), 2))
        .collect::<Result<Vec<_>>>()?;
    Ok(BinaryImageDataset {
        items,
        labels: labels[..take].iter().map(|&y| y as usize).collect(),
        split,
        threshold,
        side: r,
    })
}

/// A synthetic source with a closed-form law.
#[derive(Clone, Debug, PartialEq)]
pub enum SyntheticSpec {
    /// Mass 1/2 on `(0, 0)` and on `(1, 1)`.
    PerfectPair,
    /// A mixture over fixed motifs.
    Motifs {
        motifs: Vec<TokenSequence>,
        weights: Vec<f64>,
    },
}

impl SyntheticSpec {
    /// `count` distinct random motifs of length `seq_len` with the given weights
    /// (uniform when empty).
    pub fn random_motifs<R: Rng + ?Sized>(
        seq_len: usize,
        vocab_size: usize,
        count: usize,
        weights: &[f64],
        rng: &mut R,
    ) -> Result<Self> {
        let space = ExactDistribution::uniform(seq_len, vocab_size)?.probs().len();
        if count == 0 || count > space {
            return Err(CouplingError::InvalidArgument(format!("{count} motifs do not fit {space} sequences")));
        }
        let mut ords = sample(rng, space, count).into_vec();
        ords.sort_unstable();
        let motifs = ords
            .into_iter()
            .map(|o| TokenSequence::from_ordinal(o, seq_len, vocab_size))
            .collect();
        let weights = if weights.is_empty() { vec![1.0 / count as f64; count] } else { weights.to_vec() };
        let spec = SyntheticSpec::Motifs { motifs, weights };
        spec.exact_law()?;
        Ok(spec)
    }

    pub fn exact_law(&self) -> Result<ExactDistribution> {
        match self {
            SyntheticSpec::PerfectPair => Ok(crate::oracle::perfect_pair()),
            SyntheticSpec::Motifs { motifs, weights } => {
                let first = motifs
                    .first()
                    .ok_or_else(|| CouplingError::InvalidArgument("no motifs".into()))?;
                if weights.len() != motifs.len() || weights.iter().any(|w| !(*w >= 0.0)) {
                    return Err(CouplingError::InvalidArgument("one nonnegative weight per motif required".into()));
                }
                let mut probs = vec![0.0; ExactDistribution::uniform(first.len(), first.vocab_size())?.probs().len()];
                for (m, w) in motifs.iter().zip(weights) {
                    probs[m.ordinal()] += w;
                }
                ExactDistribution::from_weights(first.len(), first.vocab_size(), probs)
            }
        }
    }

    /// `n` i.i.d. draws and the closed-form law.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<(Vec<TokenSequence>, ExactDistribution)> {
        let law = self.exact_law()?;
        let cdf: Vec<f64> = law
            .probs()
            .iter()
            .scan(0.0, |acc, p| {
                *acc += p;
                Some(*acc)
            })
            .collect();
        let xs = (0..n)
            .map(|_| {
                let u: f64 = rng.random();
                let o = cdf.partition_point(|&c| c <= u).min(cdf.len() - 1);
                TokenSequence::from_ordinal(o, law.seq_len(), law.vocab_size())
            })
            .collect();
        Ok((xs, law))
    }
}

pub fn synth_correlated<R: Rng + ?Sized>(
    spec: &SyntheticSpec,
    n: usize,
    rng: &mut R,
) -> Result<(Vec<TokenSequence>, ExactDistribution)> {
    spec.sample(n, rng)
}

/// One sequence per line, tokens separated by whitespace.
pub fn read_sequences(path: &Path, vocab_size: usize) -> Result<Vec<TokenSequence>> {
    let text = fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            CouplingError::Prerequisite(format!("sequence file {} not found", path.display()))
        } else {
            e.into()
        }
    })?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let toks = line
                .split_whitespace()
                .map(str::parse::<usize>)
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| idx_error(path, format!("line {}: {e}", i + 1)))?;
            TokenSequence::new(toks, vocab_size)
        })
        .collect()
}

/// Training data for an experiment.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub items: Vec<TokenSequence>,
    pub labels: Option<Vec<usize>>,
    /// Closed-form law for synthetic sources.
    pub exact: Option<ExactDistribution>,
    /// Ingestion digest for image sources.
    pub digest: Option<String>,
}

/// Build the training set described by `cfg`. Image archives are looked up in
/// `data.path` or else `data_dir`.
pub fn load_dataset(cfg: &ExperimentConfig, data_dir: Option<&Path>) -> Result<Dataset> {
    let d = &cfg.data;
    let mut rng: SeededRng = init_rng(cfg.seed, Phase::Sampling);
    match d.source {
        DataSource::PerfectPair => {
            let (items, law) = synth_correlated(&SyntheticSpec::PerfectPair, d.num_examples, &mut rng)?;
            Ok(Dataset {
                items,
                labels: None,
                exact: Some(law),
                digest: None,
            })
        }
        DataSource::Motif => {
            let spec = SyntheticSpec::random_motifs(d.seq_len, d.vocab_size, d.motif_count, &d.motif_weights, &mut rng)?;
            let (items, law) = synth_correlated(&spec, d.num_examples, &mut rng)?;
            Ok(Dataset {
                items,
                labels: None,
                exact: Some(law),
                digest: None,
            })
        }
        DataSource::Sequences => {
            let path = d
                .path
                .as_ref()
                .ok_or_else(|| CouplingError::config("data.path", "is required for the sequences source"))?;
            Ok(Dataset {
                items: read_sequences(Path::new(path), d.vocab_size)?,
                labels: None,
                exact: None,
                digest: None,
            })
        }
        DataSource::Mnist => {
            let dir: PathBuf = match (&d.path, data_dir) {
                (Some(p), _) => PathBuf::from(p),
                (None, Some(dir)) => dir.to_path_buf(),
                (None, None) => {
                    return Err(CouplingError::Prerequisite(
                        "no MNIST directory: set data.path or the data directory variable".into(),
                    ))
                }
            };
            let ds = load_mnist_binary(&dir, Split::Train, d.threshold, d.train_limit)?;
            Ok(Dataset {
                digest: Some(ds.digest()),
                labels: (d.num_classes > 0).then(|| ds.labels.clone()),
                items: ds.items,
                exact: None,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::io::Write;

    #[test]
    fn threshold_edges() {
        assert_eq!(binarize(&[0; 784], 0.5), vec![0; 784]);
        assert_eq!(binarize(&[0, 127, 128, 255], 0.5), vec![0, 0, 1, 1]);
    }

    #[test]
    fn perfect_pair_draws() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let n = 10_000;
        let (xs, law) = synth_correlated(&SyntheticSpec::PerfectPair, n, &mut rng).unwrap();
        assert!(xs.iter().all(|x| x.tokens()[0] == x.tokens()[1]));
        let ones = xs.iter().filter(|x| x.tokens()[0] == 1).count() as f64 / n as f64;
        let sd = (0.25 / n as f64).sqrt();
        assert!((ones - 0.5).abs() < 3.0 * sd);
        assert_eq!(law, crate::oracle::perfect_pair());
    }

    #[test]
    fn motif_law_has_k_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = [0.1, 0.2, 0.3, 0.4];
        let spec = SyntheticSpec::random_motifs(4, 2, 4, &w, &mut rng).unwrap();
        let law = spec.exact_law().unwrap();
        let support: Vec<f64> = law.probs().iter().copied().filter(|&p| p > 0.0).collect();
        assert_eq!(support.len(), 4);
        let SyntheticSpec::Motifs { motifs, .. } = &spec else { unreachable!() };
        for (m, &wi) in motifs.iter().zip(&w) {
            assert!((law.prob(m) - wi).abs() < 1e-12);
        }
        let (xs, _) = spec.sample(2000, &mut rng).unwrap();
        assert!(xs.iter().all(|x| motifs.contains(x)));
        assert!(SyntheticSpec::random_motifs(2, 2, 5, &[], &mut rng).is_err());
    }

    fn gz(bytes: &[u8]) -> Vec<u8> {
        let mut e = flate2::write::GzEncoder::new(Vec::new(), flate2::Compression::default());
        e.write_all(bytes).unwrap();
        e.finish().unwrap()
    }

    #[test]
    fn idx_parsing_and_checksums() {
        let mut img = vec![0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 2];
        img.extend([0, 200, 255, 10, 129, 0, 0, 0]);
        let (n, r, c, px) = parse_idx_images(&img, Path::new("x")).unwrap();
        assert_eq!((n, r, c), (2, 2, 2));
        assert_eq!(binarize(&px[..4], 0.5), vec![0, 1, 1, 0]);
        let lab = [0, 0, 8, 1, 0, 0, 0, 2, 7, 3];
        assert_eq!(parse_idx_labels(&lab, Path::new("y")).unwrap(), vec![7, 3]);
        assert!(parse_idx_images(&img[..20], Path::new("x")).is_err());

        let dir = tempfile::tempdir().unwrap();
        let missing = load_mnist_binary(dir.path(), Split::Train, 0.5, None).unwrap_err();
        assert!(matches!(missing, CouplingError::Prerequisite(_)));
        std::fs::write(dir.path().join("train-images-idx3-ubyte.gz"), gz(&img)).unwrap();
        let bad = load_mnist_binary(dir.path(), Split::Train, 0.5, None).unwrap_err();
        assert!(matches!(bad, CouplingError::Checksum { .. }));
    }

    #[test]
    fn sequence_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.txt");
        std::fs::write(&p, "0 1 2\n2 2 0\n\n").unwrap();
        let xs = read_sequences(&p, 3).unwrap();
        assert_eq!(xs.len(), 2);
        std::fs::write(&p, "0 1 3\n").unwrap();
        assert!(read_sequences(&p, 3).is_err());
    }

    #[test]
    fn toy_datasets_are_reproducible() {
        let cfg = ExperimentConfig::profile("toy-motif").unwrap();
        let a = load_dataset(&cfg, None).unwrap();
        let b = load_dataset(&cfg, None).unwrap();
        assert_eq!(a.items, b.items);
        assert_eq!(a.items.len(), cfg.data.num_examples);
        assert_eq!(a.exact.unwrap().probs().iter().filter(|&&p| p > 0.0).count(), 4);
        let mnist = ExperimentConfig::profile("mnist-binary-mini").unwrap();
        assert!(matches!(load_dataset(&mnist, None), Err(CouplingError::Prerequisite(_))));
    }
}
