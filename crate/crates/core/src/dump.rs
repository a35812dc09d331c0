//! Text dumps of labelled vectors and classifiers.
//!
//! A sample block is a header `ltr-dump v1, K, d, count` followed by `count`
//! rows `label, x_0, ..., x_{d-1}`. A classifier block is a header
//! `classifier v1, K, d, normalization` followed by `K` rows
//! `bias, w_0, ..., w_{d-1}`. A file holds one or both blocks; checkpoints
//! are a feature block followed by a classifier block. Numbers are written
//! with 17 significant digits so values round-trip exactly.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::losses::{Classifier, LabeledFeature, Normalization};
use crate::vecops::Matrix;

const SAMPLE_TAG: &str = "ltr-dump v1";
const CLASSIFIER_TAG: &str = "classifier v1";

fn push_row(out: &mut String, first: impl std::fmt::Display, values: &[f64]) {
    let _ = write!(out, "{first}");
    for v in values {
        let _ = write!(out, ",{v:.16e}");
    }
    out.push('\n');
}

/// Formats a sample block. Every sample must have dimension `d`.
pub fn format_samples(samples: &[LabeledFeature], num_classes: usize) -> Result<String> {
    let d = samples.first().map_or(0, |s| s.x.len());
    let mut out = format!("{SAMPLE_TAG}, {num_classes}, {d}, {}\n", samples.len());
    for s in samples {
        crate::error::check_dim(d, s.x.len())?;
        push_row(&mut out, s.label, &s.x);
    }
    Ok(out)
}

pub fn format_classifier(clf: &Classifier) -> String {
    let mut out = format!(
        "{CLASSIFIER_TAG}, {}, {}, {}\n",
        clf.num_classes(),
        clf.dim(),
        clf.normalization().as_str()
    );
    for (row, b) in clf.weights().iter_rows().zip(clf.biases()) {
        push_row(&mut out, format_args!("{b:.16e}"), row);
    }
    out
}

/// Labelled samples read from a dump, with the declared class count.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleDump {
    pub num_classes: usize,
    pub dim: usize,
    pub samples: Vec<LabeledFeature>,
}

/// Parsed content of a dump file.
#[derive(Debug, Clone, Default)]
pub struct DumpFile {
    pub samples: Option<SampleDump>,
    pub classifier: Option<Classifier>,
}

struct Lines<'a> {
    path: &'a Path,
    iter: std::iter::Peekable<std::iter::Enumerate<std::str::Lines<'a>>>,
}

impl<'a> Lines<'a> {
    fn err(&self, line: usize, msg: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.to_path_buf(),
            line,
            msg: msg.into(),
        }
    }

    /// Next non-blank line with its 1-based number.
    fn next(&mut self) -> Option<(usize, &'a str)> {
        for (i, l) in self.iter.by_ref() {
            if !l.trim().is_empty() {
                return Some((i + 1, l));
            }
        }
        None
    }
}

fn fields(line: &str) -> Vec<&str> {
    line.split(',').map(str::trim).collect()
}

fn parse_usize(lines: &Lines, n: usize, s: &str, what: &str) -> Result<usize> {
    s.parse().map_err(|_| lines.err(n, format!("invalid {what} `{s}`")))
}

fn parse_values(lines: &Lines, n: usize, items: &[&str], d: usize) -> Result<Vec<f64>> {
    if items.len() != d {
        return Err(lines.err(n, format!("expected {d} values, found {}", items.len())));
    }
    items
        .iter()
        .map(|s| match s.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(v),
            _ => Err(lines.err(n, format!("invalid number `{s}`"))),
        })
        .collect()
}

/// Parses dump text; `path` is only used in error messages.
pub fn parse_dump(text: &str, path: &Path) -> Result<DumpFile> {
    let mut lines = Lines {
        path,
        iter: text.lines().enumerate().peekable(),
    };
    let mut out = DumpFile::default();
    while let Some((n, header)) = lines.next() {
        let h = fields(header);
        if h.len() != 4 {
            return Err(lines.err(n, format!("expected a 4-field block header, found `{header}`")));
        }
        let k = parse_usize(&lines, n, h[1], "class count")?;
        let d = parse_usize(&lines, n, h[2], "dimension")?;
        match h[0] {
            SAMPLE_TAG if out.samples.is_none() => {
                let count = parse_usize(&lines, n, h[3], "sample count")?;
                let mut samples = Vec::with_capacity(count);
                for i in 0..count {
                    let (n, l) = lines
                        .next()
                        .ok_or_else(|| lines.err(n, format!("expected {count} rows, found {i}")))?;
                    let f = fields(l);
                    let label = parse_usize(&lines, n, f[0], "label")?;
                    if label >= k {
                        return Err(lines.err(n, format!("label {label} out of range for {k} classes")));
                    }
                    samples.push(LabeledFeature::new(parse_values(&lines, n, &f[1..], d)?, label));
                }
                out.samples = Some(SampleDump {
                    num_classes: k,
                    dim: d,
                    samples,
                });
            }
            CLASSIFIER_TAG if out.classifier.is_none() => {
                let norm = Normalization::parse(h[3])
                    .ok_or_else(|| lines.err(n, format!("unknown normalization `{}`", h[3])))?;
                let mut w = Matrix::zeros(k, d);
                let mut b = Vec::with_capacity(k);
                for j in 0..k {
                    let (n, l) = lines
                        .next()
                        .ok_or_else(|| lines.err(n, format!("expected {k} classifier rows, found {j}")))?;
                    let f = fields(l);
                    let bias = parse_values(&lines, n, &f[..1], 1)?[0];
                    w.row_mut(j).copy_from_slice(&parse_values(&lines, n, &f[1..], d)?);
                    b.push(bias);
                }
                out.classifier = Some(Classifier::new(w, b, norm).map_err(|e| lines.err(n, e.to_string()))?);
            }
            SAMPLE_TAG | CLASSIFIER_TAG => return Err(lines.err(n, format!("duplicate `{}` block", h[0]))),
            other => return Err(lines.err(n, format!("unknown block `{other}`"))),
        }
    }
    Ok(out)
}

pub fn read_dump(path: &Path) -> Result<DumpFile> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dump(&text, path)
}

/// Reads the sample block of a file, failing if it has none.
pub fn read_samples(path: &Path) -> Result<SampleDump> {
    read_dump(path)?.samples.ok_or_else(|| Error::Parse {
        path: path.to_path_buf(),
        line: 1,
        msg: "no sample block".into(),
    })
}

/// Reads the classifier block of a file, failing if it has none.
pub fn read_classifier(path: &Path) -> Result<Classifier> {
    read_dump(path)?.classifier.ok_or_else(|| Error::Parse {
        path: path.to_path_buf(),
        line: 1,
        msg: "no classifier block".into(),
    })
}

/// Writes `contents`, creating parent directories.
pub fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

pub fn checkpoint_path(base: &Path, stage: u8) -> PathBuf {
    let mut s = base.as_os_str().to_owned();
    s.push(format!(".s{stage}"));
    PathBuf::from(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p() -> &'static Path {
        Path::new("t.dump")
    }

    #[test]
    fn round_trip_is_exact() {
        let samples = vec![
            LabeledFeature::new(vec![0.1, -1.0 / 3.0], 1),
            LabeledFeature::new(vec![1e-300, 12345.678901234567], 0),
        ];
        let clf = Classifier::from_rows(
            &[vec![0.6, 0.8], vec![std::f64::consts::PI, 1.0], vec![0.0, -1.0]],
            vec![0.25, -1e-17, 3.0],
            Normalization::ClassifierOnly,
        )
        .unwrap();
        let text = format_samples(&samples, 3).unwrap() + &format_classifier(&clf);
        let back = parse_dump(&text, p()).unwrap();
        assert_eq!(back.samples.unwrap().samples, samples);
        assert_eq!(back.classifier.unwrap(), clf);
    }

    #[test]
    fn header_layout() {
        let text = format_samples(&[LabeledFeature::new(vec![1.0], 0)], 2).unwrap();
        assert!(text.starts_with("ltr-dump v1, 2, 1, 1\n0,1.0000000000000000e0\n"));
    }

    #[test]
    fn errors_carry_line_numbers() {
        let text = "ltr-dump v1, 2, 2, 2\n0,1,2\n1,1,oops\n";
        match parse_dump(text, p()) {
            Err(Error::Parse { line, msg, .. }) => {
                assert_eq!(line, 3);
                assert!(msg.contains("oops"));
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            parse_dump("ltr-dump v1, 2, 2, 1\n5,1,2\n", p()),
            Err(Error::Parse { line: 2, .. })
        ));
        assert!(matches!(
            parse_dump("ltr-dump v1, 2, 2, 3\n0,1,2\n", p()),
            Err(Error::Parse { line: 1, .. })
        ));
        assert!(matches!(parse_dump("bogus\n", p()), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn checkpoint_suffixes() {
        assert_eq!(checkpoint_path(Path::new("out/model.ckpt"), 2), PathBuf::from("out/model.ckpt.s2"));
    }
}
