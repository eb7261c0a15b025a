//! Binary corpus container: a line-oriented text header terminated by `end`,
//! followed by a little-endian `f64` payload in header order.
//!
//! ```text
//! dualtask-corpus 1
//! kind subject|video
//! dim 16
//! count 2
//! record subject_id=3 ref=16 target=16 prompt=4 cls=1
//! record subject_id=4 ref=16 target=16 prompt=4 cls=0
//! end
//! ```
//!
//! Video records read `record frames=T tokens=N caption=M`; their payload is
//! the frames, the caption, then the `T` foreground and `T` background flow
//! magnitudes.

use std::collections::BTreeMap;
use std::io::{BufRead, Read, Write};

use super::{DataError, SubjectPair, SyntheticVideo, TokenGrid};

const MAGIC: &str = "dualtask-corpus";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum Corpus {
    Subjects(Vec<SubjectPair>),
    Videos(Vec<SyntheticVideo>),
}

impl Corpus {
    pub fn len(&self) -> usize {
        match self {
            Corpus::Subjects(v) => v.len(),
            Corpus::Videos(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn dim(&self) -> usize {
        match self {
            Corpus::Subjects(v) => v.first().map_or(0, |p| p.ref_tokens.dim()),
            Corpus::Videos(v) => v.first().map_or(0, |p| p.caption_embed.dim()),
        }
    }
}

pub fn write_corpus<W: Write>(corpus: &Corpus, mut w: W) -> Result<(), DataError> {
    let dim = corpus.dim();
    let kind = match corpus {
        Corpus::Subjects(_) => "subject",
        Corpus::Videos(_) => "video",
    };
    writeln!(
        w,
        "{MAGIC} {VERSION}\nkind {kind}\ndim {dim}\ncount {}",
        corpus.len()
    )?;
    let mut payload: Vec<f64> = Vec::new();
    match corpus {
        Corpus::Subjects(pairs) => {
            for p in pairs {
                writeln!(
                    w,
                    "record subject_id={} ref={} target={} prompt={} cls={}",
                    p.subject_id,
                    p.ref_tokens.rows(),
                    p.target_tokens.rows(),
                    p.prompt_embed.rows(),
                    u8::from(p.cls_slot)
                )?;
                for g in [&p.ref_tokens, &p.target_tokens, &p.prompt_embed] {
                    check_dim(g, dim)?;
                    payload.extend_from_slice(g.data());
                }
            }
        }
        Corpus::Videos(videos) => {
            for v in videos {
                let tokens = v.frames.first().map_or(0, TokenGrid::rows);
                writeln!(
                    w,
                    "record frames={} tokens={tokens} caption={}",
                    v.frame_count(),
                    v.caption_embed.rows()
                )?;
                for g in v.frames.iter().chain(std::iter::once(&v.caption_embed)) {
                    check_dim(g, dim)?;
                    if g.rows() != tokens && !std::ptr::eq(g, &v.caption_embed) {
                        return Err(DataError::Format("ragged frames".into()));
                    }
                    payload.extend_from_slice(g.data());
                }
                payload.extend_from_slice(&v.fg_flow_mag);
                payload.extend_from_slice(&v.bg_flow_mag);
            }
        }
    }
    writeln!(w, "end")?;
    for x in payload {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn check_dim(g: &TokenGrid, dim: usize) -> Result<(), DataError> {
    if g.dim() != dim {
        return Err(DataError::Format(format!(
            "mixed token widths {} and {dim}",
            g.dim()
        )));
    }
    Ok(())
}

fn header_value<'a>(line: &'a str, key: &str) -> Result<&'a str, DataError> {
    line.strip_prefix(key)
        .and_then(|rest| rest.strip_prefix(' '))
        .ok_or_else(|| DataError::Format(format!("expected `{key}`, found `{line}`")))
}

fn parse_num<T: std::str::FromStr>(s: &str, what: &str) -> Result<T, DataError> {
    s.trim()
        .parse()
        .map_err(|_| DataError::Format(format!("bad {what}: `{s}`")))
}

fn record_fields(line: &str) -> Result<BTreeMap<&str, &str>, DataError> {
    header_value(line, "record")?
        .split_whitespace()
        .map(|kv| {
            kv.split_once('=')
                .ok_or_else(|| DataError::Format(format!("bad field `{kv}`")))
        })
        .collect()
}

fn field(fields: &BTreeMap<&str, &str>, key: &str) -> Result<usize, DataError> {
    let v = fields
        .get(key)
        .ok_or_else(|| DataError::Format(format!("record missing `{key}`")))?;
    parse_num(v, key)
}

struct Payload<R> {
    reader: R,
}

impl<R: Read> Payload<R> {
    fn take(&mut self, n: usize) -> Result<Vec<f64>, DataError> {
        let mut bytes = vec![0u8; n * 8];
        self.reader
            .read_exact(&mut bytes)
            .map_err(|e| DataError::Format(format!("truncated payload: {e}")))?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect())
    }

    fn grid(&mut self, rows: usize, dim: usize) -> Result<TokenGrid, DataError> {
        TokenGrid::new(rows, dim, self.take(rows * dim)?)
    }
}

pub fn read_corpus<R: BufRead>(mut r: R) -> Result<Corpus, DataError> {
    let mut lines = Vec::new();
    loop {
        let mut line = String::new();
        if r.read_line(&mut line)? == 0 {
            return Err(DataError::Format("header not terminated by `end`".into()));
        }
        let line = line.trim_end().to_string();
        if line == "end" {
            break;
        }
        lines.push(line);
    }
    if lines.len() < 4 {
        return Err(DataError::Format("header too short".into()));
    }
    let version: u32 = parse_num(header_value(&lines[0], MAGIC)?, "version")?;
    if version != VERSION {
        return Err(DataError::Format(format!("unsupported version {version}")));
    }
    let kind = header_value(&lines[1], "kind")?.to_string();
    let dim: usize = parse_num(header_value(&lines[2], "dim")?, "dim")?;
    let count: usize = parse_num(header_value(&lines[3], "count")?, "count")?;
    let records = &lines[4..];
    if records.len() != count {
        return Err(DataError::Format(format!(
            "header announces {count} records, found {}",
            records.len()
        )));
    }

    let mut payload = Payload { reader: r };
    let corpus = match kind.as_str() {
        "subject" => Corpus::Subjects(
            records
                .iter()
                .map(|line| {
                    let f = record_fields(line)?;
                    Ok(SubjectPair {
                        subject_id: field(&f, "subject_id")? as u64,
                        ref_tokens: payload.grid(field(&f, "ref")?, dim)?,
                        target_tokens: payload.grid(field(&f, "target")?, dim)?,
                        prompt_embed: payload.grid(field(&f, "prompt")?, dim)?,
                        cls_slot: field(&f, "cls")? != 0,
                    })
                })
                .collect::<Result<_, DataError>>()?,
        ),
        "video" => Corpus::Videos(
            records
                .iter()
                .map(|line| {
                    let f = record_fields(line)?;
                    let (t, n) = (field(&f, "frames")?, field(&f, "tokens")?);
                    let frames = (0..t)
                        .map(|_| payload.grid(n, dim))
                        .collect::<Result<Vec<_>, _>>()?;
                    Ok(SyntheticVideo {
                        frames,
                        caption_embed: payload.grid(field(&f, "caption")?, dim)?,
                        fg_flow_mag: payload.take(t)?,
                        bg_flow_mag: payload.take(t)?,
                    })
                })
                .collect::<Result<_, DataError>>()?,
        ),
        other => return Err(DataError::Format(format!("unknown corpus kind `{other}`"))),
    };
    let mut rest = [0u8; 1];
    if payload.reader.read(&mut rest)? != 0 {
        return Err(DataError::Format("trailing bytes after payload".into()));
    }
    Ok(corpus)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_subject_pair, gen_video};

    #[test]
    fn round_trip_both_kinds() {
        let subjects = Corpus::Subjects(vec![
            gen_subject_pair(0, 1, 0.05).unwrap(),
            gen_subject_pair(0, 2, 0.05).unwrap(),
        ]);
        let videos = Corpus::Videos(vec![
            gen_video(0, 3, 1.0).unwrap(),
            gen_video(1, 13, 0.5).unwrap(),
        ]);
        for corpus in [subjects, videos] {
            let mut buf = Vec::new();
            write_corpus(&corpus, &mut buf).unwrap();
            assert_eq!(read_corpus(&buf[..]).unwrap(), corpus);
        }
    }

    #[test]
    fn truncation_and_version_rejected() {
        let corpus = Corpus::Subjects(vec![gen_subject_pair(0, 1, 0.05).unwrap()]);
        let mut buf = Vec::new();
        write_corpus(&corpus, &mut buf).unwrap();
        assert!(read_corpus(&buf[..buf.len() - 8]).is_err());
        let bumped = String::from_utf8_lossy(&buf).replacen("corpus 1", "corpus 9", 1);
        assert!(read_corpus(bumped.as_bytes()).is_err());
    }
}
