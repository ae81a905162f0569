//! Corpus files: CSV per session and the compact `STSD` binary format.
//!
//! CSV header: `user_id,session_id,c0,...,c{C-1}`; rows in time order.
//! Binary layout (little-endian): magic `STSD`, version `u32`, session count
//! `u32`, then per session `user_id`, `session_id`, `L`, `C` (all `u32`) and
//! `L * C` `f32` values in row-major order.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use super::SessionRecording;
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::scalar::Scalar;

pub const CORPUS_MAGIC: &[u8; 4] = b"STSD";
pub const CORPUS_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusFormat {
    Csv,
    Binary,
}

impl CorpusFormat {
    /// Directories and `.csv` files are CSV; anything else is binary.
    pub fn detect(path: &Path) -> Self {
        if path.is_dir() || path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
            CorpusFormat::Csv
        } else {
            CorpusFormat::Binary
        }
    }
}

fn parse_err(path: &Path, line: u64, detail: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line: line as usize,
        detail: detail.into(),
    }
}

/// Reads one CSV file. Rows of several sessions may share a file; each
/// session's rows keep their order.
pub fn read_csv<S: Scalar>(path: &Path) -> Result<Vec<SessionRecording<S>>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| parse_err(path, 1, e.to_string()))?;
    let headers = rdr.headers().map_err(|e| parse_err(path, 1, e.to_string()))?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| parse_err(path, 1, format!("missing column '{name}'")))
    };
    let user_col = col("user_id")?;
    let session_col = col("session_id")?;
    let channel_cols: Vec<usize> = {
        let mut cols = Vec::new();
        while let Some(p) = headers.iter().position(|h| h == format!("c{}", cols.len())) {
            cols.push(p);
        }
        cols
    };
    if channel_cols.is_empty() {
        return Err(parse_err(path, 1, "missing column 'c0'"));
    }
    if headers.len() != channel_cols.len() + 2 {
        let extra: Vec<&str> = headers
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != user_col && *i != session_col && !channel_cols.contains(i))
            .map(|(_, h)| h)
            .collect();
        return Err(parse_err(path, 1, format!("unexpected columns {extra:?}")));
    }
    let c = channel_cols.len();
    let mut sessions: Vec<(u32, u32, Vec<S>)> = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(path, line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let field = |i: usize| rec.get(i).unwrap_or("");
        let user: u32 = field(user_col)
            .parse()
            .map_err(|_| parse_err(path, line, format!("bad user_id {:?}", field(user_col))))?;
        let session: u32 = field(session_col)
            .parse()
            .map_err(|_| parse_err(path, line, format!("bad session_id {:?}", field(session_col))))?;
        let idx = match sessions.iter().position(|s| s.0 == user && s.1 == session) {
            Some(i) => i,
            None => {
                sessions.push((user, session, Vec::new()));
                sessions.len() - 1
            }
        };
        for (j, &ci) in channel_cols.iter().enumerate() {
            let v: f64 = field(ci)
                .parse()
                .map_err(|_| parse_err(path, line, format!("bad value {:?} in column c{j}", field(ci))))?;
            if !v.is_finite() {
                return Err(parse_err(path, line, format!("non-finite value in column c{j}")));
            }
            sessions[idx].2.push(S::of(v));
        }
    }
    sessions
        .into_iter()
        .map(|(user_id, session_id, data)| {
            let l = data.len() / c;
            Ok(SessionRecording {
                user_id,
                session_id,
                samples: Tensor::new(vec![l, c], data)?,
                sample_rate: 1.0,
            })
        })
        .collect()
}

pub fn write_csv<S: Scalar>(rec: &SessionRecording<S>, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data(e.to_string()))?;
    let c = rec.channels();
    let mut header = vec!["user_id".to_string(), "session_id".to_string()];
    header.extend((0..c).map(|j| format!("c{j}")));
    w.write_record(&header).map_err(|e| Error::Data(e.to_string()))?;
    for t in 0..rec.len() {
        let mut row = vec![rec.user_id.to_string(), rec.session_id.to_string()];
        row.extend(rec.samples.row(t).iter().map(|v| v.as_f64().to_string()));
        w.write_record(&row).map_err(|e| Error::Data(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_binary<S: Scalar, W: Write>(recs: &[SessionRecording<S>], mut w: W) -> Result<()> {
    w.write_all(CORPUS_MAGIC)?;
    w.write_u32::<LittleEndian>(CORPUS_VERSION)?;
    w.write_u32::<LittleEndian>(recs.len() as u32)?;
    for r in recs {
        for v in [r.user_id, r.session_id, r.len() as u32, r.channels() as u32] {
            w.write_u32::<LittleEndian>(v)?;
        }
        for &v in r.samples.data() {
            w.write_f32::<LittleEndian>(v.as_f64() as f32)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_binary<S: Scalar, R: Read>(mut r: R) -> Result<Vec<SessionRecording<S>>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CORPUS_MAGIC {
        return Err(Error::Data(format!("corpus: bad magic {magic:?}")));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != CORPUS_VERSION {
        return Err(Error::Data(format!("corpus: unsupported version {version}")));
    }
    let n = r.read_u32::<LittleEndian>()? as usize;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let user_id = r.read_u32::<LittleEndian>()?;
        let session_id = r.read_u32::<LittleEndian>()?;
        let l = r.read_u32::<LittleEndian>()? as usize;
        let c = r.read_u32::<LittleEndian>()? as usize;
        let mut data = Vec::with_capacity(l * c);
        for _ in 0..l * c {
            data.push(S::of(r.read_f32::<LittleEndian>()? as f64));
        }
        out.push(SessionRecording {
            user_id,
            session_id,
            samples: Tensor::new(vec![l, c], data)?,
            sample_rate: 1.0,
        });
    }
    Ok(out)
}

fn csv_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")))
        .collect();
    files.sort();
    Ok(files)
}

/// Loads a corpus from a CSV file, a directory of CSV files, or a binary file.
pub fn load_corpus<S: Scalar>(path: &Path, format: Option<CorpusFormat>) -> Result<Vec<SessionRecording<S>>> {
    let recs = match format.unwrap_or_else(|| CorpusFormat::detect(path)) {
        CorpusFormat::Binary => read_binary(BufReader::new(File::open(path)?))?,
        CorpusFormat::Csv if path.is_dir() => {
            let mut all = Vec::new();
            for f in csv_files(path)? {
                all.extend(read_csv(&f)?);
            }
            all
        }
        CorpusFormat::Csv => read_csv(path)?,
    };
    if recs.is_empty() {
        return Err(Error::Data(format!("{} holds no sessions", path.display())));
    }
    let c = recs[0].channels();
    if let Some(bad) = recs.iter().find(|r| r.channels() != c) {
        return Err(Error::Data(format!(
            "inconsistent channel count: session {} of user {} has {} channels, expected {c}",
            bad.session_id,
            bad.user_id,
            bad.channels()
        )));
    }
    Ok(recs)
}

/// Writes a corpus: binary to a single file, CSV as one file per session
/// inside the directory `path`.
pub fn save_corpus<S: Scalar>(recs: &[SessionRecording<S>], path: &Path, format: CorpusFormat) -> Result<()> {
    match format {
        CorpusFormat::Binary => write_binary(recs, BufWriter::new(File::create(path)?)),
        CorpusFormat::Csv => {
            fs::create_dir_all(path)?;
            for r in recs {
                write_csv(r, &path.join(format!("u{}_s{}.csv", r.user_id, r.session_id)))?;
            }
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_row_csv() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.csv");
        fs::write(&p, "user_id,session_id,c0,c1\n3,7,1.0,2.0\n3,7,3.5,-4\n").unwrap();
        let recs: Vec<SessionRecording<f64>> = load_corpus(&p, None).unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!((recs[0].user_id, recs[0].session_id, recs[0].len()), (3, 7, 2));
        assert_eq!(recs[0].samples.data(), &[1.0, 2.0, 3.5, -4.0]);
    }

    #[test]
    fn missing_column_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.csv");
        fs::write(&p, "user_id,c0\n1,2\n").unwrap();
        let err = load_corpus::<f64>(&p, None).unwrap_err().to_string();
        assert!(err.contains("session_id"), "{err}");
    }

    #[test]
    fn bad_row_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.csv");
        fs::write(&p, "user_id,session_id,c0\n1,1,0.5\n1,1,oops\n").unwrap();
        match load_corpus::<f64>(&p, None) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn inconsistent_channels_rejected() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("a.csv"), "user_id,session_id,c0\n1,1,0.5\n").unwrap();
        fs::write(dir.path().join("b.csv"), "user_id,session_id,c0,c1\n1,2,0.5,1\n").unwrap();
        assert!(load_corpus::<f64>(dir.path(), None).is_err());
    }

    #[test]
    fn binary_round_trip() {
        let recs = vec![SessionRecording {
            user_id: 4,
            session_id: 9,
            samples: Tensor::<f32>::new(vec![3, 2], vec![0.1, -0.2, 1e-6, 3.0, 7.5, -0.0]).unwrap(),
            sample_rate: 1.0,
        }];
        let mut buf = Vec::new();
        write_binary(&recs, &mut buf).unwrap();
        let back: Vec<SessionRecording<f32>> = read_binary(&buf[..]).unwrap();
        assert_eq!(back, recs);
        assert!(read_binary::<f32, _>(&buf[..buf.len() - 1]).is_err());
    }
}
