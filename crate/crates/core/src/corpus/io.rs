//! JSON-lines tracklet files: one `{"id", "identity", "camera", "frames"}` object per line.
//!
//! Split files use the same record with an extra `"role": "probe" | "gallery"` key.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Corpus, CorpusError, EvalSplit, Tracklet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Role {
    Probe,
    Gallery,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SplitRecord {
    role: Role,
    id: usize,
    identity: Option<usize>,
    camera: usize,
    frames: Vec<Vec<f64>>,
}

fn parse_lines<T, R>(reader: R, mut on_record: impl FnMut(usize, T) -> Result<(), CorpusError>) -> Result<usize, CorpusError>
where
    T: for<'de> Deserialize<'de>,
    R: Read,
{
    let mut count = 0;
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: T = serde_json::from_str(&line).map_err(|e| CorpusError::Parse {
            line: line_no,
            reason: e.to_string(),
        })?;
        on_record(line_no, record)?;
        count += 1;
    }
    Ok(count)
}

fn check_record(line: usize, t: &Tracklet, dim: &mut Option<usize>) -> Result<(), CorpusError> {
    if t.frames.is_empty() {
        return Err(CorpusError::Parse {
            line,
            reason: format!("tracklet {} has no frames", t.id),
        });
    }
    if t.camera < 1 {
        return Err(CorpusError::Parse {
            line,
            reason: "camera indices start at 1".into(),
        });
    }
    for frame in &t.frames {
        let expected = *dim.get_or_insert(frame.len());
        if frame.len() != expected {
            return Err(CorpusError::DimensionMismatch {
                line,
                expected,
                found: frame.len(),
            });
        }
        if frame.iter().any(|v| !v.is_finite()) {
            return Err(CorpusError::Parse {
                line,
                reason: "non-finite feature value".into(),
            });
        }
    }
    Ok(())
}

/// Reads tracklet records from any reader, validating dimensions line by line.
pub fn read_tracklets<R: Read>(reader: R) -> Result<Vec<Tracklet>, CorpusError> {
    let mut out = Vec::new();
    let mut dim = None;
    parse_lines(reader, |line, t: Tracklet| {
        check_record(line, &t, &mut dim)?;
        out.push(t);
        Ok(())
    })?;
    if out.is_empty() {
        return Err(CorpusError::Parse {
            line: 0,
            reason: "no records".into(),
        });
    }
    Ok(out)
}

pub fn write_tracklets<W: Write>(mut writer: W, tracklets: &[Tracklet]) -> std::io::Result<()> {
    for t in tracklets {
        serde_json::to_writer(&mut writer, t)?;
        writer.write_all(b"\n")?;
    }
    writer.flush()
}

/// Loads a corpus file; every tracklet starts out unlabeled.
pub fn load_feature_corpus(path: impl AsRef<Path>) -> Result<Corpus, CorpusError> {
    let tracklets = read_tracklets(File::open(path)?)?;
    Corpus::new(tracklets)
}

pub fn save_feature_corpus(path: impl AsRef<Path>, tracklets: &[Tracklet]) -> Result<(), CorpusError> {
    write_tracklets(BufWriter::new(File::create(path)?), tracklets)?;
    Ok(())
}

pub fn save_eval_split(path: impl AsRef<Path>, split: &EvalSplit) -> Result<(), CorpusError> {
    let mut w = BufWriter::new(File::create(path)?);
    let records = split
        .probe
        .iter()
        .map(|t| (Role::Probe, t))
        .chain(split.gallery.iter().map(|t| (Role::Gallery, t)));
    for (role, t) in records {
        let record = SplitRecord {
            role,
            id: t.id,
            identity: t.identity,
            camera: t.camera,
            frames: t.frames.clone(),
        };
        serde_json::to_writer(&mut w, &record).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_eval_split(path: impl AsRef<Path>) -> Result<EvalSplit, CorpusError> {
    let mut split = EvalSplit::default();
    let mut dim = None;
    let count = parse_lines(File::open(path)?, |line, r: SplitRecord| {
        let t = Tracklet {
            id: r.id,
            identity: r.identity,
            camera: r.camera,
            frames: r.frames,
        };
        check_record(line, &t, &mut dim)?;
        match r.role {
            Role::Probe => split.probe.push(t),
            Role::Gallery => split.gallery.push(t),
        }
        Ok(())
    })?;
    if count == 0 {
        return Err(CorpusError::Parse {
            line: 0,
            reason: "no records".into(),
        });
    }
    Ok(split)
}
