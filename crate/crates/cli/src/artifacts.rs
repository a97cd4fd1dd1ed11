//! Sample dumps: the binary array file, a text file for sequences and a PNG
//! grid for images.

use std::path::{Path, PathBuf};

use coupling_core::checkpoint::write_atomic;
use coupling_core::dump::{write_sequences, DType, SampleArray};
use coupling_core::{CouplingError, ExperimentConfig, TokenSequence};
use image::{GrayImage, Luma};

pub const ARRAY_FILE: &str = "samples.cmsd";
pub const TEXT_FILE: &str = "samples.txt";
pub const GRID_FILE: &str = "samples.png";
const GRID_COLUMNS: usize = 10;
const GRID_MAX: usize = 100;

/// Write `xs` in the formats suited to the task and return the files written.
pub fn write_samples(dir: &Path, cfg: &ExperimentConfig, xs: &[TokenSequence]) -> anyhow::Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    let array = match cfg.data.image_side {
        Some(side) => {
            let flat = SampleArray::from_sequences(xs)?;
            SampleArray::new(DType::U8, vec![xs.len(), side, side], flat.values)?
        }
        None => SampleArray::from_sequences(xs)?,
    };
    let path = dir.join(ARRAY_FILE);
    array.write(&path)?;
    written.push(path);
    match cfg.data.image_side {
        Some(side) => {
            let path = dir.join(GRID_FILE);
            write_grid(&path, xs, side, cfg.data.vocab_size)?;
            written.push(path);
        }
        None => {
            let path = dir.join(TEXT_FILE);
            write_sequences(&path, xs)?;
            written.push(path);
        }
    }
    Ok(written)
}

/// Up to 100 images in a 10-column grid with a one-pixel gutter.
pub fn write_grid(path: &Path, xs: &[TokenSequence], side: usize, vocab_size: usize) -> anyhow::Result<()> {
    let shown = &xs[..xs.len().min(GRID_MAX)];
    let cols = GRID_COLUMNS.min(shown.len().max(1));
    let rows = shown.len().div_ceil(cols).max(1);
    let cell = side + 1;
    let mut img = GrayImage::from_pixel((cols * cell + 1) as u32, (rows * cell + 1) as u32, Luma([128]));
    let scale = 255.0 / (vocab_size.max(2) - 1) as f64;
    for (i, x) in shown.iter().enumerate() {
        let (ox, oy) = ((i % cols) * cell + 1, (i / cols) * cell + 1);
        for (p, &t) in x.tokens().iter().enumerate() {
            let v = (t as f64 * scale).round().min(255.0) as u8;
            img.put_pixel((ox + p % side) as u32, (oy + p / side) as u32, Luma([v]));
        }
    }
    let mut bytes = Vec::new();
    img.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)?;
    write_atomic(path, &bytes)?;
    Ok(())
}

/// The array file at `path`, or inside it when `path` is a directory.
pub fn read_array(path: &Path) -> anyhow::Result<(PathBuf, SampleArray)> {
    let file = if path.is_dir() { path.join(ARRAY_FILE) } else { path.to_path_buf() };
    if !file.exists() {
        return Err(CouplingError::Prerequisite(format!("no sample dump at {}", file.display())).into());
    }
    let array = SampleArray::read(&file)?;
    Ok((file, array))
}

/// Rows of a dump as flattened token sequences. The vocabulary is the given
/// one, or one more than the largest token.
pub fn array_sequences(array: &SampleArray, vocab_size: Option<usize>) -> anyhow::Result<Vec<TokenSequence>> {
    let n = array.dims[0];
    let per: usize = array.dims[1..].iter().product();
    let flat = SampleArray::new(array.dtype, vec![n, per], array.values.clone())?;
    let vocab = vocab_size.unwrap_or_else(|| array.values.iter().fold(0.0f64, |m, &v| m.max(v)) as usize + 1);
    Ok(flat.to_sequences(vocab.max(2))?)
}

/// Rows of a dump as grayscale images in `[0, 1]` with their side length.
pub fn array_images(array: &SampleArray) -> anyhow::Result<(Vec<Vec<f32>>, usize)> {
    let per: usize = array.dims[1..].iter().product();
    let side = (per as f64).sqrt().round() as usize;
    if side * side != per {
        return Err(CouplingError::Shape(format!("rows of {per} values are not square images")).into());
    }
    let top = array.values.iter().fold(0.0f64, |m, &v| m.max(v));
    // 8-bit pixel dumps are rescaled; token dumps are used as-is.
    let scale = match array.dtype {
        DType::U8 if top > 1.0 => 1.0 / 255.0,
        _ => 1.0,
    };
    let images = array
        .values
        .chunks(per)
        .map(|row| row.iter().map(|&v| (v * scale) as f32).collect())
        .collect();
    Ok((images, side))
}
