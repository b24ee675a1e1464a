//! Line-delimited mask files and JSON artifact helpers.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{validate_dataset, MaskRecord};

/// Reads one mask per line. Blank lines are skipped; the records are
/// validated as a whole before being returned.
pub fn load_masks(path: impl AsRef<Path>) -> Result<Vec<MaskRecord>> {
    let path = path.as_ref();
    let reader = BufReader::new(File::open(path)?);
    let mut records = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: MaskRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: idx + 1,
            message: e.to_string(),
        })?;
        records.push(record);
    }
    validate_dataset(&records).into_result()?;
    Ok(records)
}

pub fn write_masks(path: impl AsRef<Path>, records: &[MaskRecord]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let reader = BufReader::new(File::open(path)?);
    Ok(serde_json::from_reader(reader)?)
}

pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut out, value)?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}

/// Splits records by class, preserving input order within each class and
/// ordering classes by name.
pub fn group_by_class(records: &[MaskRecord]) -> Vec<(String, Vec<MaskRecord>)> {
    let mut groups: std::collections::BTreeMap<&str, Vec<MaskRecord>> = Default::default();
    for r in records {
        groups.entry(r.class_name.as_str()).or_default().push(r.clone());
    }
    groups.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_lines(lines: &[&str]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f
    }

    #[test]
    fn loads_valid_lines() {
        let f = write_lines(&[
            r#"{"id":"a","class":"car","score":0.9,"feature":[1,2]}"#,
            r#"{"id":"b","class":"car","score":0.1,"feature":[0,2],"gt_iou":0.4}"#,
            r#"{"id":"c","class":"bus","score":0.5,"feature":[3,2],"polygon":[[0,0],[1,0],[1,1]]}"#,
        ]);
        let records = load_masks(f.path()).unwrap();
        assert_eq!(records.len(), 3);
        assert_eq!(records[1].gt_iou, Some(0.4));
    }

    #[test]
    fn malformed_line_is_named() {
        let f = write_lines(&[
            r#"{"id":"a","class":"car","score":0.9,"feature":[1,2]}"#,
            r#"{"id":"b","class":"car","score":"#,
        ]);
        match load_masks(f.path()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn empty_file_is_empty_dataset() {
        let f = write_lines(&[]);
        assert!(load_masks(f.path()).unwrap().is_empty());
    }

    #[test]
    fn invalid_dataset_aborts() {
        let f = write_lines(&[
            r#"{"id":"a","class":"car","score":0.9,"feature":[1,2]}"#,
            r#"{"id":"a","class":"car","score":0.8,"feature":[1,2]}"#,
        ]);
        assert!(matches!(load_masks(f.path()), Err(Error::Invalid(_))));
    }
}
