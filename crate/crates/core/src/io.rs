//! Correspondence, model and ground-truth files.
//!
//! Plain text holds one pair per line, `x1 y1 x2 y2 [quality]`, whitespace separated,
//! with `#` comments and blank lines ignored. CSV holds the same columns with an
//! optional header row. A model sits next to the data as `<stem>.model` (9 or 12
//! row-major numbers) and ground-truth pairs as `<stem>.gt` in the plain format.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use nalgebra::Matrix3;

use crate::geometry::{Calibration, Correspondence, GeometryError, Model, ModelKind};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("cannot access {path}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },
    #[error("{path}: expected {expected} numbers, found {got}")]
    Dimension { path: PathBuf, expected: &'static str, got: usize },
    #[error("model: {0}")]
    Model(#[from] GeometryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    PlainText,
    Csv,
}

impl Format {
    /// CSV for a `.csv` extension, plain text otherwise.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("csv") => Format::Csv,
            _ => Format::PlainText,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// Sorted by decreasing quality when any quality column was present.
    pub corrs: Vec<Correspondence>,
    pub has_quality: bool,
    /// Row-major entries of the companion model file.
    pub model_values: Option<Vec<f64>>,
    pub gt_pairs: Option<Vec<Correspondence>>,
}

impl Dataset {
    /// Companion model interpreted as `kind`; 12 numbers always mean a projection.
    pub fn gt_model(&self, kind: ModelKind) -> Option<Result<Model, GeometryError>> {
        let v = self.model_values.as_ref()?;
        let kind = if v.len() == 12 { ModelKind::Projection } else { kind };
        Some(Model::from_row_major(kind, v))
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io { path: path.to_path_buf(), source }
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> IoError {
    IoError::Parse { path: path.to_path_buf(), line, message: message.into() }
}

fn parse_fields(path: &Path, line: usize, fields: &[&str]) -> Result<(Correspondence, bool), IoError> {
    if !(4..=5).contains(&fields.len()) {
        return Err(parse_err(path, line, format!("expected 4 or 5 values, found {}", fields.len())));
    }
    let mut v = [0.0; 5];
    for (k, f) in fields.iter().enumerate() {
        v[k] = f.trim().parse::<f64>().map_err(|e| parse_err(path, line, format!("{f:?}: {e}")))?;
        if !v[k].is_finite() {
            return Err(parse_err(path, line, format!("{f:?} is not finite")));
        }
    }
    let c = Correspondence::new(v[0], v[1], v[2], v[3]).with_quality(v[4]);
    Ok((c, fields.len() == 5))
}

/// Parses plain-text pairs. Returns the pairs and whether any carried a quality.
pub fn parse_pairs(path: &Path, text: &str) -> Result<(Vec<Correspondence>, bool), IoError> {
    let mut out = Vec::new();
    let mut quality = false;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let (c, q) = parse_fields(path, i + 1, &fields)?;
        quality |= q;
        out.push(c);
    }
    Ok((out, quality))
}

fn parse_csv(path: &Path, text: &str) -> Result<(Vec<Correspondence>, bool), IoError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).flexible(true).comment(Some(b'#')).from_reader(text.as_bytes());
    let mut out = Vec::new();
    let mut quality = false;
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(k + 1, |p| p.line() as usize);
            parse_err(path, line, e.to_string())
        })?;
        let line = rec.position().map_or(k + 1, |p| p.line() as usize);
        let fields: Vec<&str> = rec.iter().collect();
        if fields.iter().all(|f| f.trim().is_empty()) {
            continue;
        }
        // A leading row that is not numeric is a header.
        if out.is_empty() && k == 0 && fields.first().is_some_and(|f| f.trim().parse::<f64>().is_err()) {
            continue;
        }
        let (c, q) = parse_fields(path, line, &fields)?;
        quality |= q;
        out.push(c);
    }
    Ok((out, quality))
}

fn read(path: &Path) -> Result<String, IoError> {
    fs::read_to_string(path).map_err(io_err(path))
}

/// Whitespace separated numbers with `#` comments.
fn load_numbers(path: &Path) -> Result<Vec<f64>, IoError> {
    let text = read(path)?;
    let mut values = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("");
        for f in line.split_whitespace() {
            let v = f.parse::<f64>().map_err(|e| parse_err(path, i + 1, format!("{f:?}: {e}")))?;
            values.push(v);
        }
    }
    Ok(values)
}

pub fn load_model_values(path: &Path) -> Result<Vec<f64>, IoError> {
    let values = load_numbers(path)?;
    if values.len() != 9 && values.len() != 12 {
        return Err(IoError::Dimension { path: path.to_path_buf(), expected: "9 or 12", got: values.len() });
    }
    Ok(values)
}

/// Intrinsics as 9 row-major numbers shared by both views, or 18 for `K1` then `K2`.
pub fn load_calibration(path: &Path) -> Result<Calibration, IoError> {
    let v = load_numbers(path)?;
    let k = |s: &[f64]| Matrix3::from_row_slice(s);
    let (k1, k2) = match v.len() {
        9 => (k(&v), k(&v)),
        18 => (k(&v[..9]), k(&v[9..])),
        n => return Err(IoError::Dimension { path: path.to_path_buf(), expected: "9 or 18", got: n }),
    };
    Ok(Calibration::new(k1, k2, true)?)
}

pub fn format_calibration(cal: &Calibration) -> String {
    let mut s = String::new();
    for k in [&cal.k1, &cal.k2] {
        for r in 0..3 {
            let row: Vec<String> = (0..3).map(|c| fmt_sig(k[(r, c)])).collect();
            s.push_str(&row.join(" "));
            s.push('\n');
        }
    }
    s
}

pub fn save_calibration(path: &Path, cal: &Calibration) -> Result<(), IoError> {
    write(path, &format_calibration(cal))
}

pub fn companion(path: &Path, ext: &str) -> PathBuf {
    path.with_extension(ext)
}

pub fn load_correspondences(path: &Path, format: Format) -> Result<Dataset, IoError> {
    let text = read(path)?;
    let (mut corrs, has_quality) = match format {
        Format::PlainText => parse_pairs(path, &text)?,
        Format::Csv => parse_csv(path, &text)?,
    };
    if has_quality {
        corrs.sort_by(|a, b| b.quality.total_cmp(&a.quality));
    }
    let model_path = companion(path, "model");
    let model_values = if model_path.is_file() { Some(load_model_values(&model_path)?) } else { None };
    let gt_path = companion(path, "gt");
    let gt_pairs = if gt_path.is_file() { Some(parse_pairs(&gt_path, &read(&gt_path)?)?.0) } else { None };
    Ok(Dataset { corrs, has_quality, model_values, gt_pairs })
}

/// Shortest decimal that round-trips the value rounded to 9 significant digits.
pub fn fmt_sig(v: f64) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    let rounded: f64 = format!("{v:.8e}").parse().unwrap_or(v);
    format!("{rounded}")
}

pub fn format_pairs(corrs: &[Correspondence], with_quality: bool) -> String {
    let mut s = String::new();
    for c in corrs {
        let _ = write!(s, "{} {} {} {}", fmt_sig(c.x1), fmt_sig(c.y1), fmt_sig(c.x2), fmt_sig(c.y2));
        if with_quality {
            let _ = write!(s, " {}", fmt_sig(c.quality));
        }
        s.push('\n');
    }
    s
}

fn write(path: &Path, text: &str) -> Result<(), IoError> {
    fs::write(path, text).map_err(io_err(path))
}

pub fn save_correspondences(path: &Path, corrs: &[Correspondence], with_quality: bool, format: Format) -> Result<(), IoError> {
    let text = match format {
        Format::PlainText => format_pairs(corrs, with_quality),
        Format::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            let write_err = |e: csv::Error| parse_err(path, 0, e.to_string());
            let mut header = vec!["x1", "y1", "x2", "y2"];
            if with_quality {
                header.push("quality");
            }
            w.write_record(&header).map_err(write_err)?;
            for c in corrs {
                let mut row = vec![fmt_sig(c.x1), fmt_sig(c.y1), fmt_sig(c.x2), fmt_sig(c.y2)];
                if with_quality {
                    row.push(fmt_sig(c.quality));
                }
                w.write_record(&row).map_err(write_err)?;
            }
            let bytes = w.into_inner().map_err(|e| parse_err(path, 0, e.to_string()))?;
            String::from_utf8(bytes).unwrap_or_default()
        }
    };
    write(path, &text)
}

pub fn format_model(model: &Model) -> String {
    let v = model.to_row_major();
    let cols = if v.len() == 12 { 4 } else { 3 };
    let mut s = String::new();
    for row in v.chunks(cols) {
        let line: Vec<String> = row.iter().map(|&x| fmt_sig(x)).collect();
        s.push_str(&line.join(" "));
        s.push('\n');
    }
    s
}

pub fn save_model(path: &Path, model: &Model) -> Result<(), IoError> {
    write(path, &format_model(model))
}

/// Writes the pairs plus `<stem>.model` and `<stem>.gt` companions when given.
pub fn save_dataset(path: &Path, data: &Dataset, model: Option<&Model>) -> Result<(), IoError> {
    save_correspondences(path, &data.corrs, data.has_quality, Format::from_path(path))?;
    if let Some(m) = model {
        save_model(&companion(path, "model"), m)?;
    }
    if let Some(gt) = &data.gt_pairs {
        write(&companion(path, "gt"), &format_pairs(gt, false))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn significant_digits() {
        assert_eq!(fmt_sig(0.0), "0");
        assert_eq!(fmt_sig(1.0), "1");
        assert_eq!(fmt_sig(123.456), "123.456");
        assert_eq!(fmt_sig(1.0 / 3.0), "0.333333333");
        assert_eq!(fmt_sig(-2.0e-12), "-0.000000000002");
        assert_eq!(fmt_sig(fmt_sig(std::f64::consts::PI).parse().unwrap()), fmt_sig(std::f64::consts::PI));
    }

    #[test]
    fn comments_and_blanks() {
        let text = "# header\n0 0 1 1\n\n  1 0 2 1 # trailing\n0 1 1 2\n1 1 2 2\n";
        let (c, q) = parse_pairs(Path::new("x"), text).unwrap();
        assert_eq!(c.len(), 4);
        assert!(!q);
        assert_eq!(c[1], Correspondence::new(1.0, 0.0, 2.0, 1.0));
    }

    #[test]
    fn parse_error_has_line() {
        match parse_pairs(Path::new("x"), "0 0 1 1\n\n0 0 a 1\n") {
            Err(IoError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse_pairs(Path::new("x"), "0 0 1\n"), Err(IoError::Parse { line: 1, .. })));
    }
}
