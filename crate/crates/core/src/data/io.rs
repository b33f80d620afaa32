//! Line-delimited JSON dataset files.
//!
//! ```text
//! {"format":"tmlab-dataset","version":1,"classes":[...],"channels":C,"domain_id":"..."}
//! {"id":"...","days":[...],"shape":[T,N,C],"pixels":[...],"label":3}
//! ...
//! ```
//!
//! Files ending in `.gz` are gzip-compressed transparently.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use serde::{Deserialize, Serialize};

use super::sample::{Dataset, TimeSeriesSample};
use crate::error::{Error, Result};

pub const DATASET_FORMAT: &str = "tmlab-dataset";
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    classes: Vec<String>,
    channels: usize,
    domain_id: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct SampleRecord {
    id: String,
    days: Vec<i32>,
    shape: [usize; 3],
    pixels: Vec<f32>,
    label: Option<usize>,
}

fn is_gzip(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "gz")
}

pub fn save_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let io = |e: std::io::Error| Error::io(path, e);
    let file = File::create(path).map_err(io)?;
    if is_gzip(path) {
        let mut enc = GzEncoder::new(BufWriter::new(file), Compression::default());
        write_records(dataset, &mut enc).map_err(io)?;
        enc.finish().map_err(io)?.flush().map_err(io)
    } else {
        let mut w = BufWriter::new(file);
        write_records(dataset, &mut w).map_err(io)?;
        w.flush().map_err(io)
    }
}

fn write_records(dataset: &Dataset, w: &mut impl Write) -> std::io::Result<()> {
    let header = Header {
        format: DATASET_FORMAT.into(),
        version: DATASET_VERSION,
        classes: dataset.class_names.clone(),
        channels: dataset.channels,
        domain_id: dataset.domain_id.clone(),
    };
    serde_json::to_writer(&mut *w, &header)?;
    w.write_all(b"\n")?;
    for s in &dataset.samples {
        let rec = SampleRecord {
            id: s.id.clone(),
            days: s.days.clone(),
            shape: s.shape(),
            pixels: s.pixels.clone(),
            label: s.label,
        };
        serde_json::to_writer(&mut *w, &rec)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let source: Box<dyn Read> = if is_gzip(path) {
        Box::new(GzDecoder::new(file))
    } else {
        Box::new(file)
    };
    parse_dataset(BufReader::new(source), path)
}

fn parse_dataset(reader: impl BufRead, path: &Path) -> Result<Dataset> {
    let err = |line: usize, sample_id: Option<&str>, message: String| Error::Parse {
        path: PathBuf::from(path),
        line,
        sample_id: sample_id.map(str::to_owned),
        message,
    };

    let mut lines = reader.lines().enumerate();
    let header: Header = match lines.next() {
        None => return Err(err(1, None, "missing header line".into())),
        Some((_, line)) => {
            let line = line.map_err(|e| Error::io(path, e))?;
            serde_json::from_str(&line).map_err(|e| err(1, None, format!("malformed header: {e}")))?
        }
    };
    if header.format != DATASET_FORMAT || header.version != DATASET_VERSION {
        return Err(err(
            1,
            None,
            format!("unsupported format {:?} version {}", header.format, header.version),
        ));
    }
    Dataset::validate_classes(&header.classes).map_err(|e| err(1, None, e.to_string()))?;
    let k = header.classes.len();

    let mut samples = Vec::new();
    for (idx, line) in lines {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SampleRecord =
            serde_json::from_str(&line).map_err(|e| err(lineno, None, format!("malformed sample: {e}")))?;
        let id = rec.id.clone();
        let [t, n, c] = rec.shape;
        if t != rec.days.len() {
            return Err(err(
                lineno,
                Some(&id),
                format!("shape declares {t} timesteps but {} days are listed", rec.days.len()),
            ));
        }
        if c != header.channels {
            return Err(err(
                lineno,
                Some(&id),
                format!("{c} channels, header declares {}", header.channels),
            ));
        }
        let sample = TimeSeriesSample::new(rec.id, rec.days, rec.pixels, n, c, rec.label)
            .map_err(|e| err(lineno, Some(&id), e.to_string()))?;
        sample.validate(k).map_err(|e| err(lineno, Some(&id), e.to_string()))?;
        samples.push(sample);
    }
    Ok(Dataset {
        samples,
        class_names: header.classes,
        domain_id: header.domain_id,
        channels: header.channels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::phenology::{generate_domain, ScenarioSpec};

    #[test]
    fn round_trip_plain_and_gzip() {
        let ds = generate_domain(&ScenarioSpec::confusable_pair(20, 30), "target", 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        for name in ["d.jsonl", "d.jsonl.gz"] {
            let p = dir.path().join(name);
            save_dataset(&ds, &p).unwrap();
            let back = load_dataset(&p).unwrap();
            assert_eq!(back, ds);
            for (a, b) in back.samples.iter().zip(&ds.samples) {
                let bits = |s: &TimeSeriesSample| s.pixels.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
                assert_eq!(bits(a), bits(b));
            }
        }
    }

    #[test]
    fn empty_dataset_round_trips() {
        let ds = Dataset::new(vec![], vec!["a".into(), "unknown".into()], "e", 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.jsonl");
        save_dataset(&ds, &p).unwrap();
        assert_eq!(load_dataset(&p).unwrap(), ds);
    }

    #[test]
    fn non_increasing_days_name_the_sample() {
        let text = concat!(
            r#"{"format":"tmlab-dataset","version":1,"classes":["a","unknown"],"channels":1,"domain_id":"x"}"#,
            "\n",
            r#"{"id":"ok","days":[1,2],"shape":[2,1,1],"pixels":[0.1,0.2],"label":0}"#,
            "\n",
            r#"{"id":"bad-one","days":[4,4],"shape":[2,1,1],"pixels":[0.1,0.2],"label":null}"#,
            "\n"
        );
        let e = parse_dataset(text.as_bytes(), Path::new("mem.jsonl")).unwrap_err();
        match &e {
            Error::Parse { line, sample_id, .. } => {
                assert_eq!(*line, 3);
                assert_eq!(sample_id.as_deref(), Some("bad-one"));
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(e.to_string().contains("bad-one"));
    }

    #[test]
    fn malformed_header_and_dimension_mismatch() {
        let e = parse_dataset("{not json}\n".as_bytes(), Path::new("m")).unwrap_err();
        assert!(matches!(e, Error::Parse { line: 1, .. }));

        let text = concat!(
            r#"{"format":"tmlab-dataset","version":1,"classes":["unknown"],"channels":2,"domain_id":"x"}"#,
            "\n",
            r#"{"id":"s","days":[1],"shape":[1,1,2],"pixels":[0.1],"label":0}"#,
            "\n"
        );
        let e = parse_dataset(text.as_bytes(), Path::new("m")).unwrap_err();
        assert!(matches!(e, Error::Parse { line: 2, .. }), "{e}");
    }
}
