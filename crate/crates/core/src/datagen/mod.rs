//! Synthetic word-image corpora and their on-disk manifest.

mod glyphs;
mod manifest;
mod render;

use std::fs;
use std::path::{Path, PathBuf};
use std::thread;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use glyphs::{GlyphSet, GLYPH_HEIGHT, GLYPH_WIDTH};
pub use manifest::{valid_label, Manifest, ManifestEntry, ManifestError, MANIFEST_VERSION, MIN_LABEL_LEN};
pub use render::{layout_size, render_word, render_word_with, Augmentation, VerticalLayout, GLYPH_SPACING, MARGIN};

use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::routing::Direction;

pub const MANIFEST_FILE: &str = "manifest.tsv";
pub const IMAGE_DIR: &str = "images";

#[derive(Clone, Debug, PartialEq)]
pub struct GenSpec {
    pub count: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub vertical_fraction: f64,
    pub layout: VerticalLayout,
    pub augment: Augmentation,
    pub seed: u64,
}

impl Default for GenSpec {
    fn default() -> Self {
        GenSpec {
            count: 2000,
            min_len: 3,
            max_len: 8,
            vertical_fraction: 0.5,
            layout: VerticalLayout::Rotated,
            augment: Augmentation::default(),
            seed: 0,
        }
    }
}

impl GenSpec {
    pub fn validate(&self) -> Result<()> {
        if self.min_len < MIN_LABEL_LEN || self.max_len < self.min_len {
            return Err(Error::Config(format!(
                "word lengths {}..={} must satisfy {MIN_LABEL_LEN} <= min <= max",
                self.min_len, self.max_len
            )));
        }
        if !(0.0..=1.0).contains(&self.vertical_fraction) {
            return Err(Error::Config(format!(
                "vertical fraction {} outside [0, 1]",
                self.vertical_fraction
            )));
        }
        Ok(())
    }

    /// Spreads vertical samples evenly: sample `i` is vertical exactly when
    /// `floor((i + 1)·f)` steps past `floor(i·f)`, so any prefix is within one
    /// sample of the requested mix.
    pub fn direction_of(&self, index: usize) -> Direction {
        let f = self.vertical_fraction;
        let before = (index as f64 * f).floor();
        let after = ((index + 1) as f64 * f).floor();
        if after > before {
            Direction::Vertical
        } else {
            Direction::Horizontal
        }
    }

    /// Independent stream per sample, so the corpus does not depend on
    /// worker count or generation order.
    pub fn sample_rng(&self, index: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index as u64);
        rng
    }

    /// Label, direction and image of sample `index`.
    pub fn sample(&self, index: usize, glyphs: &GlyphSet) -> Result<(String, Direction, GrayImage)> {
        let mut rng = self.sample_rng(index);
        let symbols: Vec<char> = glyphs.symbols().collect();
        let len = rng.random_range(self.min_len..=self.max_len);
        let label: String = (0..len)
            .map(|_| symbols[rng.random_range(0..symbols.len())])
            .collect();
        let direction = self.direction_of(index);
        let image = render_word_with(&label, direction, self.layout, glyphs, &self.augment, &mut rng)?;
        Ok((label, direction, image))
    }
}

fn image_name(index: usize) -> PathBuf {
    Path::new(IMAGE_DIR).join(format!("{index:06}.pgm"))
}

/// Writes `spec.count` PGM images under `out_dir/images` plus `out_dir/manifest.tsv`.
pub fn generate_corpus(spec: &GenSpec, out_dir: &Path, workers: usize) -> Result<Manifest> {
    spec.validate()?;
    let image_dir = out_dir.join(IMAGE_DIR);
    fs::create_dir_all(&image_dir).map_err(|e| Error::io(&image_dir, e))?;
    let glyphs = GlyphSet::default();
    let workers = workers.clamp(1, spec.count.max(1));

    let produce = |index: usize| -> Result<ManifestEntry> {
        let (label, direction, image) = spec.sample(index, &glyphs)?;
        let rel = image_name(index);
        let path = out_dir.join(&rel);
        image.write_pgm(&path).map_err(|e| Error::io(&path, e))?;
        Ok(ManifestEntry {
            path: rel,
            label,
            direction,
            width: image.width(),
            height: image.height(),
        })
    };

    let entries: Vec<ManifestEntry> = if workers == 1 {
        (0..spec.count).map(produce).collect::<Result<_>>()?
    } else {
        let chunks: Vec<Result<Vec<ManifestEntry>>> = thread::scope(|s| {
            let handles: Vec<_> = (0..workers)
                .map(|w| {
                    let produce = &produce;
                    let lo = w * spec.count / workers;
                    let hi = (w + 1) * spec.count / workers;
                    s.spawn(move || (lo..hi).map(produce).collect::<Result<Vec<_>>>())
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("generator worker panicked"))
                .collect()
        });
        let mut all = Vec::with_capacity(spec.count);
        for chunk in chunks {
            all.extend(chunk?);
        }
        all
    };

    let manifest = Manifest {
        seed: spec.seed,
        entries,
        base_dir: out_dir.to_path_buf(),
    };
    manifest.write(&out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// Same samples as [`generate_corpus`], held in memory.
pub fn generate_in_memory(spec: &GenSpec) -> Result<Vec<(String, Direction, GrayImage)>> {
    spec.validate()?;
    let glyphs = GlyphSet::default();
    (0..spec.count).map(|i| spec.sample(i, &glyphs)).collect()
}
