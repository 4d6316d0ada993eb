//! Score tables (JSON-Lines of per-(model, sample) records) and the
//! per-model score CSV `model_id,ppl_r,acc,rank_p,rank_a`.

use std::fs;
use std::path::Path;

use expertforge_core::scoring::ModelScore;
use expertforge_core::{ScoreRecord, ScoreTable};

use crate::error::{ForgeError, Result};

pub const SCORE_CSV_HEADER: [&str; 5] = ["model_id", "ppl_r", "acc", "rank_p", "rank_a"];

pub fn parse_score_lines(path: &Path, text: &str) -> Result<Vec<ScoreRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: ScoreRecord = serde_json::from_str(line).map_err(|e| ForgeError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn read_score_table(path: &Path) -> Result<ScoreTable> {
    let text = fs::read_to_string(path).map_err(|e| ForgeError::io(path, e))?;
    let records = parse_score_lines(path, &text)?;
    ScoreTable::from_records(records).map_err(|source| ForgeError::Invalid {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_score_records<'a>(path: &Path, records: impl IntoIterator<Item = &'a ScoreRecord>) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r).expect("record serializes");
        out.push(b'\n');
    }
    fs::write(path, out).map_err(|e| ForgeError::io(path, e))
}

/// `ppl_r` is written with Rust's shortest round-trip float formatting, so
/// an overflowed perplexity appears as `inf`.
pub fn encode_model_scores(scores: &[ModelScore]) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(SCORE_CSV_HEADER).expect("in-memory write");
    for s in scores {
        w.write_record([
            s.model_id.clone(),
            s.ppl_r.to_string(),
            s.acc.to_string(),
            s.rank_p.to_string(),
            s.rank_a.to_string(),
        ])
        .expect("in-memory write");
    }
    w.into_inner().expect("in-memory flush")
}

pub fn write_model_scores(path: &Path, scores: &[ModelScore]) -> Result<()> {
    fs::write(path, encode_model_scores(scores)).map_err(|e| ForgeError::io(path, e))
}

pub fn decode_model_scores(path: &Path, bytes: &[u8]) -> Result<Vec<ModelScore>> {
    let mut r = csv::Reader::from_reader(bytes);
    let parse_err = |line: usize, message: String| ForgeError::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let header = r.headers().map_err(|e| parse_err(1, e.to_string()))?;
    if header.iter().ne(SCORE_CSV_HEADER) {
        return Err(parse_err(1, format!("expected header {}", SCORE_CSV_HEADER.join(","))));
    }
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| parse_err(e.position().map_or(0, |p| p.line() as usize), e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let field = |i: usize| rec.get(i).ok_or_else(|| parse_err(line, format!("missing {}", SCORE_CSV_HEADER[i])));
        let num = |i: usize| -> Result<f64> {
            field(i)?
                .parse()
                .map_err(|e| parse_err(line, format!("{}: {e}", SCORE_CSV_HEADER[i])))
        };
        let rank = |i: usize| -> Result<usize> {
            field(i)?
                .parse()
                .map_err(|e| parse_err(line, format!("{}: {e}", SCORE_CSV_HEADER[i])))
        };
        let ppl_r = num(1)?;
        out.push(ModelScore {
            model_id: field(0)?.to_string(),
            ppl_r,
            acc: num(2)?,
            rank_p: rank(3)?,
            rank_a: rank(4)?,
            overflow: ppl_r.is_infinite(),
        });
    }
    Ok(out)
}

pub fn read_model_scores(path: &Path) -> Result<Vec<ModelScore>> {
    let bytes = fs::read(path).map_err(|e| ForgeError::io(path, e))?;
    decode_model_scores(path, &bytes)
}
