//! CSV import: one file per trial (rows are channels, columns samples) and an
//! optional `labels.csv` index with a `file,label` header.

use std::fs;
use std::path::Path;

use super::TrialSet;
use crate::error::{Error, Result};

pub const LABELS_FILE: &str = "labels.csv";

fn csv_err(file: &Path, detail: impl Into<String>) -> Error {
    Error::Csv {
        file: file.display().to_string(),
        detail: detail.into(),
    }
}

fn read_trial(path: &Path) -> Result<(usize, Vec<f64>, usize)> {
    let text = fs::read_to_string(path)?;
    let mut width = None;
    let mut rows = 0;
    let mut data = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let before = data.len();
        for cell in line.split(',') {
            let v: f64 = cell
                .trim()
                .parse()
                .map_err(|_| csv_err(path, format!("line {}: '{}' is not a number", ln + 1, cell.trim())))?;
            data.push(v);
        }
        let w = data.len() - before;
        match width {
            None => width = Some(w),
            Some(prev) if prev != w => {
                return Err(csv_err(path, format!("ragged rows: line {} has {w} values, expected {prev}", ln + 1)));
            }
            _ => {}
        }
        rows += 1;
    }
    let width = width.ok_or_else(|| csv_err(path, "file is empty"))?;
    Ok((rows, data, width))
}

/// Reads every `*.csv` in `dir` except the label index, in file-name order.
/// With a label index present, every trial file must be listed and the class
/// count is one more than the largest label.
pub fn import_csv(dir: &Path, fs_hz: f64) -> Result<TrialSet> {
    let mut files: Vec<_> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension().is_some_and(|x| x == "csv") && p.file_name().is_some_and(|n| n != LABELS_FILE)
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Config(format!("no trial CSV files in {}", dir.display())));
    }

    let mut shape = None;
    let mut data = Vec::new();
    for f in &files {
        let (rows, values, width) = read_trial(f)?;
        match shape {
            None => shape = Some((rows, width)),
            Some(s) if s != (rows, width) => {
                return Err(csv_err(
                    f,
                    format!("{rows}x{width} trial does not match {}x{} of earlier files", s.0, s.1),
                ));
            }
            _ => {}
        }
        data.extend(values);
    }
    let (e, t) = shape.expect("at least one file");

    let index = dir.join(LABELS_FILE);
    let (labels, classes) = if index.exists() {
        let text = fs::read_to_string(&index)?;
        let mut map = std::collections::HashMap::new();
        for (ln, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let (name, label) = line
                .split_once(',')
                .ok_or_else(|| csv_err(&index, format!("line {}: expected 'file,label'", ln + 1)))?;
            let label: usize = label
                .trim()
                .parse()
                .map_err(|_| csv_err(&index, format!("line {}: bad label '{}'", ln + 1, label.trim())))?;
            map.insert(name.trim().to_string(), label);
        }
        let labels = files
            .iter()
            .map(|f| {
                let name = f.file_name().expect("file name").to_string_lossy().to_string();
                map.get(&name)
                    .copied()
                    .ok_or_else(|| csv_err(&index, format!("no label for {name}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let classes = labels.iter().max().map_or(2, |m| (m + 1).max(2));
        (Some(labels), classes)
    } else {
        (None, 2)
    };
    TrialSet::new(e, t, data, labels, fs_hz, classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scratch(name: &str) -> std::path::PathBuf {
        let d = std::env::temp_dir().join(format!("sdda-csv-{name}-{}", std::process::id()));
        let _ = fs::remove_dir_all(&d);
        fs::create_dir_all(&d).unwrap();
        d
    }

    fn trial(rows: usize, cols: usize, offset: f64) -> String {
        (0..rows)
            .map(|r| {
                (0..cols)
                    .map(|c| format!("{}", offset + (r * cols + c) as f64))
                    .collect::<Vec<_>>()
                    .join(",")
            })
            .collect::<Vec<_>>()
            .join("\n")
    }

    #[test]
    fn imports_labeled_and_unlabeled() {
        let d = scratch("ok");
        fs::write(d.join("t0.csv"), trial(3, 10, 0.0)).unwrap();
        fs::write(d.join("t1.csv"), trial(3, 10, 100.0)).unwrap();
        let set = import_csv(&d, 250.0).unwrap();
        assert_eq!((set.len(), set.channels(), set.samples()), (2, 3, 10));
        assert!(set.labels().is_none());
        fs::write(d.join(LABELS_FILE), "file,label\nt0.csv,0\nt1.csv,1\n").unwrap();
        let set = import_csv(&d, 250.0).unwrap();
        assert_eq!(set.labels(), Some(&[0, 1][..]));
        assert_eq!(set.channel(1, 0)[0], 100.0);
        fs::remove_dir_all(&d).unwrap();
    }

    #[test]
    fn ragged_file_is_named() {
        let d = scratch("ragged");
        fs::write(d.join("a.csv"), "1,2,3\n4,5\n").unwrap();
        match import_csv(&d, 250.0).unwrap_err() {
            Error::Csv { file, .. } => assert!(file.ends_with("a.csv")),
            e => panic!("{e}"),
        }
        fs::remove_dir_all(&d).unwrap();
    }
}
