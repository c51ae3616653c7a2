use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::image::{pgm_dimensions, PgmError};
use crate::routing::{decide_direction, Direction};

pub const MANIFEST_VERSION: u32 = 1;
pub const MIN_LABEL_LEN: usize = 3;

#[derive(Debug, thiserror::Error)]
pub enum ManifestError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("line {line}: {detail}")]
    Parse { line: usize, detail: String },
    #[error("line {line}: {detail}")]
    Validation { line: usize, detail: String },
    #[error("line {line}: image {path}: {source}")]
    Image {
        line: usize,
        path: PathBuf,
        source: PgmError,
    },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    /// As written in the file; relative paths resolve against the manifest's directory.
    pub path: PathBuf,
    pub label: String,
    pub direction: Direction,
    pub width: usize,
    pub height: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    pub seed: u64,
    pub entries: Vec<ManifestEntry>,
    /// Directory that relative entry paths are joined onto.
    pub base_dir: PathBuf,
}

/// Labels must be lowercase alphanumeric and at least three symbols long.
pub fn valid_label(label: &str) -> bool {
    label.chars().count() >= MIN_LABEL_LEN
        && label
            .chars()
            .all(|c| c.is_ascii_lowercase() || c.is_ascii_digit())
}

impl Manifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        if entry.path.is_absolute() {
            entry.path.clone()
        } else {
            self.base_dir.join(&entry.path)
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("#bivex-manifest v{MANIFEST_VERSION} seed={}\n", self.seed);
        for e in &self.entries {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}",
                e.path.display(),
                e.label,
                e.direction,
                e.width,
                e.height
            );
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<(), ManifestError> {
        fs::write(path, self.to_text()).map_err(|source| ManifestError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Parses without touching the image files.
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self, ManifestError> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or(ManifestError::Parse {
            line: 1,
            detail: "empty manifest".into(),
        })?;
        let seed = parse_header(header)?;
        let mut entries = Vec::new();
        for (i, line) in lines {
            let line_no = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            entries.push(parse_entry(line, line_no)?);
        }
        Ok(Manifest {
            seed,
            entries,
            base_dir: base_dir.to_path_buf(),
        })
    }

    /// Reads, parses and validates against the image files on disk.
    pub fn load(path: &Path) -> Result<Self, ManifestError> {
        let text = fs::read_to_string(path).map_err(|source| ManifestError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        let manifest = Manifest::parse(&text, base)?;
        manifest.check_files()?;
        Ok(manifest)
    }

    /// Confirms every image exists and decodes to its stated extents.
    pub fn check_files(&self) -> Result<(), ManifestError> {
        for (i, e) in self.entries.iter().enumerate() {
            let line = i + 2;
            let path = self.resolve(e);
            let (w, h) = pgm_dimensions(&path).map_err(|source| ManifestError::Image {
                line,
                path: path.clone(),
                source,
            })?;
            if (w, h) != (e.width, e.height) {
                return Err(ManifestError::Validation {
                    line,
                    detail: format!(
                        "{} is {w}x{h}, manifest states {}x{}",
                        path.display(),
                        e.width,
                        e.height
                    ),
                });
            }
        }
        Ok(())
    }
}

fn parse_header(header: &str) -> Result<u64, ManifestError> {
    let bad = |detail: String| ManifestError::Parse { line: 1, detail };
    let mut parts = header.split_whitespace();
    if parts.next() != Some("#bivex-manifest") {
        return Err(bad(format!("expected '#bivex-manifest' header, found {header:?}")));
    }
    let version = parts.next().unwrap_or("");
    if version != format!("v{MANIFEST_VERSION}") {
        return Err(bad(format!("unsupported manifest version {version:?}")));
    }
    let seed = parts
        .next()
        .and_then(|s| s.strip_prefix("seed="))
        .ok_or_else(|| bad("missing seed=<u64>".into()))?;
    seed.parse()
        .map_err(|_| bad(format!("seed {seed:?} is not an unsigned integer")))
}

fn parse_entry(line: &str, line_no: usize) -> Result<ManifestEntry, ManifestError> {
    let parse = |detail: String| ManifestError::Parse {
        line: line_no,
        detail,
    };
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != 5 {
        return Err(parse(format!("expected 5 tab-separated fields, found {}", fields.len())));
    }
    let dim = |s: &str, name: &str| {
        s.parse::<usize>()
            .map_err(|_| parse(format!("{name} {s:?} is not an unsigned integer")))
    };
    let direction: Direction = fields[2]
        .parse()
        .map_err(|_| parse(format!("unknown direction {:?}", fields[2])))?;
    let entry = ManifestEntry {
        path: PathBuf::from(fields[0]),
        label: fields[1].to_string(),
        direction,
        width: dim(fields[3], "width")?,
        height: dim(fields[4], "height")?,
    };
    let invalid = |detail: String| ManifestError::Validation {
        line: line_no,
        detail,
    };
    if !valid_label(&entry.label) {
        return Err(invalid(format!(
            "label {:?} must match ^[a-z0-9]{{{MIN_LABEL_LEN},}}$",
            entry.label
        )));
    }
    let implied = decide_direction(entry.width, entry.height)
        .map_err(|e| invalid(e.to_string()))?;
    if implied != entry.direction {
        return Err(invalid(format!(
            "direction {} contradicts {}x{} extents, which imply {implied}",
            entry.direction, entry.width, entry.height
        )));
    }
    Ok(entry)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Manifest {
        Manifest {
            seed: 42,
            entries: vec![
                ManifestEntry {
                    path: "images/000000.pgm".into(),
                    label: "abc".into(),
                    direction: Direction::Horizontal,
                    width: 21,
                    height: 11,
                },
                ManifestEntry {
                    path: "images/000001.pgm".into(),
                    label: "x9y0".into(),
                    direction: Direction::Vertical,
                    width: 9,
                    height: 35,
                },
            ],
            base_dir: PathBuf::from("/data"),
        }
    }

    #[test]
    fn text_round_trip() {
        let m = sample();
        let text = m.to_text();
        assert!(text.starts_with("#bivex-manifest v1 seed=42\n"));
        assert!(text.contains("images/000000.pgm\tabc\thorizontal\t21\t11\n"));
        assert_eq!(Manifest::parse(&text, Path::new("/data")).unwrap(), m);
    }

    #[test]
    fn short_label_cites_length_rule() {
        let text = "#bivex-manifest v1 seed=1\na.pgm\tab\thorizontal\t15\t11\n";
        let err = Manifest::parse(text, Path::new(".")).unwrap_err();
        match err {
            ManifestError::Validation { line, detail } => {
                assert_eq!(line, 2);
                assert!(detail.contains("{3,}"), "{detail}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn direction_is_cross_checked() {
        let text = "#bivex-manifest v1 seed=1\na.pgm\tabc\thorizontal\t11\t21\n";
        assert!(matches!(
            Manifest::parse(text, Path::new(".")),
            Err(ManifestError::Validation { line: 2, .. })
        ));
    }

    #[test]
    fn malformed_lines_report_their_number() {
        for (text, line) in [
            ("", 1),
            ("#bivex-manifest v2 seed=1\n", 1),
            ("#bivex-manifest v1 seed=x\n", 1),
            ("#bivex-manifest v1 seed=1\na.pgm\tabc\thorizontal\t21\n", 2),
            ("#bivex-manifest v1 seed=1\na.pgm\tabc\thorizontal\t21\t11\nb.pgm\tabc\tsideways\t21\t11\n", 3),
            ("#bivex-manifest v1 seed=1\na.pgm\tabc\thorizontal\t2x\t11\n", 2),
        ] {
            match Manifest::parse(text, Path::new(".")) {
                Err(ManifestError::Parse { line: l, .. }) => assert_eq!(l, line, "{text:?}"),
                other => panic!("{text:?}: {other:?}"),
            }
        }
    }

    #[test]
    fn label_rule() {
        assert!(valid_label("abc"));
        assert!(valid_label("a1b2c3"));
        assert!(!valid_label("ab"));
        assert!(!valid_label("Abc"));
        assert!(!valid_label("st-op"));
    }
}
