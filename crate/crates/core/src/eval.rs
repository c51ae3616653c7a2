//! Recognition accuracy under the word-level protocol, with optional
//! lexicon-constrained matching, and attention map dumps.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::datagen::Manifest;
use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::model::Model;
use crate::routing::{Direction, RoutedImage};
use crate::train::{predict, Dataset};

/// Candidate words per sample in the standard constrained setting.
pub const LEXICON_SIZE: usize = 50;

/// Whether a label counts under the protocol: alphanumeric only, at least
/// three characters.
pub fn protocol_filter(label: &str) -> bool {
    label.chars().count() >= 3 && label.chars().all(|c| c.is_ascii_alphanumeric())
}

/// Levenshtein distance with unit costs, over characters.
pub fn edit_distance(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut row: Vec<usize> = (0..=b.len()).collect();
    for (i, ca) in a.iter().enumerate() {
        let mut diag = row[0];
        row[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let sub = diag + usize::from(ca != cb);
            diag = row[j + 1];
            row[j + 1] = sub.min(diag + 1).min(row[j] + 1);
        }
    }
    row[b.len()]
}

/// Nearest lexicon word by edit distance, ties to the lexicographically
/// smallest. An empty lexicon leaves the decode unchanged.
pub fn constrain(decoded: &str, lexicon: &[String]) -> String {
    lexicon
        .iter()
        .map(|w| (edit_distance(decoded, w), w))
        .min()
        .map_or_else(|| decoded.to_string(), |(_, w)| w.clone())
}

/// Lowercased greedy decode, snapped to `lexicon` when one is given.
pub fn recognize(model: &Model, image: &GrayImage, lexicon: Option<&[String]>) -> Result<String> {
    let decoded = model.recognize(image)?.text.to_lowercase();
    Ok(match lexicon {
        Some(words) => constrain(&decoded, words),
        None => decoded,
    })
}

/// The ground truth plus up to 49 other distinct words drawn from `pool`.
/// Deterministic in `(seed, truth)`, independent of sample order.
pub fn lexicon_50(truth: &str, pool: &[String], seed: u64) -> Vec<String> {
    let truth = truth.to_lowercase();
    let others: Vec<&String> = pool
        .iter()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .filter(|w| **w != truth)
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(truth.as_bytes()));
    let mut words: Vec<String> = others
        .choose_multiple(&mut rng, LEXICON_SIZE - 1)
        .map(|w| (*w).clone())
        .collect();
    words.push(truth);
    words.sort();
    words
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

#[derive(Clone, Debug, PartialEq)]
pub enum LexiconMode {
    Free,
    /// One shared word list for every sample.
    Shared(Vec<String>),
    /// Per-sample 50-word lexicons built from the evaluated labels.
    Fifty { seed: u64 },
}

impl LexiconMode {
    /// Reads one word per line; blank lines and `#` comments are skipped.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let words: Vec<String> = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(str::to_lowercase)
            .collect();
        if words.is_empty() {
            return Err(Error::Argument(format!("{}: lexicon is empty", path.display())));
        }
        Ok(LexiconMode::Shared(words))
    }

    pub fn name(&self) -> &'static str {
        match self {
            LexiconMode::Free => "none",
            LexiconMode::Shared(_) => "shared",
            LexiconMode::Fifty { .. } => "50",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SampleResult {
    pub path: Option<PathBuf>,
    pub label: String,
    pub prediction: String,
    pub direction: Direction,
    pub correct: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Tally {
    pub correct: usize,
    pub total: usize,
}

impl Tally {
    pub fn accuracy(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub mode: LexiconMode,
    pub overall: Tally,
    pub horizontal: Tally,
    pub vertical: Tally,
    /// Samples excluded by the protocol filter.
    pub skipped: usize,
    pub samples: Vec<SampleResult>,
}

impl EvalReport {
    /// Scores predictions case-insensitively against their labels.
    pub fn from_predictions(
        mode: LexiconMode,
        rows: impl IntoIterator<Item = (Option<PathBuf>, String, String, Direction)>,
    ) -> Self {
        let mut report = EvalReport {
            mode,
            overall: Tally::default(),
            horizontal: Tally::default(),
            vertical: Tally::default(),
            skipped: 0,
            samples: Vec::new(),
        };
        for (path, label, prediction, direction) in rows {
            if !protocol_filter(&label) {
                report.skipped += 1;
                continue;
            }
            let correct = prediction.to_lowercase() == label.to_lowercase();
            let bucket = match direction {
                Direction::Horizontal => &mut report.horizontal,
                Direction::Vertical => &mut report.vertical,
            };
            for t in [&mut report.overall, bucket] {
                t.total += 1;
                t.correct += usize::from(correct);
            }
            report.samples.push(SampleResult {
                path,
                label,
                prediction,
                direction,
                correct,
            });
        }
        report
    }

    pub fn accuracy(&self) -> f64 {
        self.overall.accuracy()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("path,label,prediction,direction,correct\n");
        for r in &self.samples {
            let path = r.path.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
            let _ = writeln!(s, "{},{},{},{},{}", csv_field(&path), r.label, r.prediction, r.direction, u8::from(r.correct));
        }
        s
    }

    pub fn summary(&self) -> String {
        let line = |name: &str, t: &Tally| format!("{name}: {:.4} ({}/{})\n", t.accuracy(), t.correct, t.total);
        let mut s = format!("lexicon: {}\n", self.mode.name());
        s += &line("overall", &self.overall);
        s += &line("horizontal", &self.horizontal);
        s += &line("vertical", &self.vertical);
        let _ = writeln!(s, "skipped: {}", self.skipped);
        s
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Routes, decodes and scores every protocol-eligible sample of `data`.
pub fn evaluate_dataset(model: &Model, data: &Dataset, mode: &LexiconMode) -> Result<EvalReport> {
    let kept: Vec<usize> = (0..data.len())
        .filter(|&i| protocol_filter(&data.samples[i].label))
        .collect();
    let skipped = data.len() - kept.len();
    let subset = data.subset(&kept);
    let decoded = predict(model, &subset)?;
    let pool: Vec<String> = subset.samples.iter().map(|s| s.label.to_lowercase()).collect();
    let rows = subset.samples.iter().zip(decoded).map(|(s, d)| {
        let d = d.to_lowercase();
        let prediction = match mode {
            LexiconMode::Free => d,
            LexiconMode::Shared(words) => constrain(&d, words),
            LexiconMode::Fifty { seed } => constrain(&d, &lexicon_50(&s.label, &pool, *seed)),
        };
        (s.path.clone(), s.label.clone(), prediction, s.routed.direction)
    });
    let mut report = EvalReport::from_predictions(mode.clone(), rows);
    report.skipped += skipped;
    Ok(report)
}

/// Loads the manifest's images and evaluates them.
pub fn evaluate(model: &Model, manifest: &Manifest, mode: &LexiconMode) -> Result<EvalReport> {
    let eligible = Manifest {
        entries: manifest
            .entries
            .iter()
            .filter(|e| protocol_filter(&e.label))
            .cloned()
            .collect(),
        ..manifest.clone()
    };
    let data = Dataset::from_manifest(&model.config, &eligible)?;
    let mut report = evaluate_dataset(model, &data, mode)?;
    report.skipped += manifest.len() - eligible.len();
    Ok(report)
}

/// Scales an attention map so its maximum becomes 255, then nearest-
/// upsamples it to `height × width`.
pub fn attention_image(weights: &[f64], grid: (usize, usize), height: usize, width: usize) -> GrayImage {
    let max = weights.iter().cloned().fold(0.0, f64::max);
    let scale = if max > 0.0 { 255.0 / max } else { 0.0 };
    let (gh, gw) = grid;
    GrayImage::from_fn(width, height, |x, y| {
        let gy = (y * gh / height).min(gh - 1);
        let gx = (x * gw / width).min(gw - 1);
        (weights[gy * gw + gx] * scale).round().clamp(0.0, 255.0) as u8
    })
}

/// Writes one `t<idx>_<char>.pgm` per decoding step, at the network input
/// resolution. Returns the written paths in step order.
pub fn dump_attention(model: &Model, image: &GrayImage, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let routed: RoutedImage = model.route(image)?;
    let recognition = model.recognize_routed(&[&routed])?.remove(0);
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let (h, w) = model.config.input_size;
    let mut written = Vec::new();
    for (t, (record, &class)) in recognition
        .output
        .attention
        .iter()
        .zip(&recognition.output.classes)
        .enumerate()
    {
        let name = format!("t{t}_{}.pgm", model.config.vocab.class_name(class));
        let path = out_dir.join(name);
        attention_image(&record.weights, record.grid, h, w)
            .write_pgm(&path)
            .map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}
