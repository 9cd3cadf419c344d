use std::fmt::Write as _;
use std::path::Path;

use super::bio::is_valid_bio;
use super::{AnnotatedSentence, CorpusError, Result};

struct Row {
    line: usize,
    cols: Vec<String>,
}

fn parse_err<T>(line: usize, msg: impl Into<String>) -> Result<T> {
    Err(CorpusError::Parse {
        line,
        msg: msg.into(),
    })
}

/// Parses the column format: word, POS, head (0-based, root = own index),
/// predicate marker `Y`/`-`, then one BIO column per predicate in order.
/// Columns are split on any whitespace. A sentence without predicates may
/// carry a single all-`O` placeholder column.
pub fn parse_conll(text: &str) -> Result<Vec<AnnotatedSentence>> {
    let mut sentences = Vec::new();
    let mut block: Vec<Row> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let cols: Vec<String> = raw.split_whitespace().map(str::to_string).collect();
        if cols.is_empty() {
            if !block.is_empty() {
                sentences.push(build_sentence(std::mem::take(&mut block))?);
            }
            continue;
        }
        block.push(Row { line, cols });
    }
    if !block.is_empty() {
        sentences.push(build_sentence(block)?);
    }
    Ok(sentences)
}

fn build_sentence(rows: Vec<Row>) -> Result<AnnotatedSentence> {
    let n = rows.len();
    let width = rows[0].cols.len();
    let mut s = AnnotatedSentence::default();
    for row in &rows {
        if row.cols.len() != width {
            return parse_err(
                row.line,
                format!("expected {width} columns, found {}", row.cols.len()),
            );
        }
        if width < 4 {
            return parse_err(row.line, format!("need at least 4 columns, found {width}"));
        }
        s.tokens.push(row.cols[0].clone());
        s.pos.push(row.cols[1].clone());
        let head: usize = match row.cols[2].parse() {
            Ok(h) => h,
            Err(_) => return parse_err(row.line, format!("bad head index {:?}", row.cols[2])),
        };
        if head >= n {
            return parse_err(
                row.line,
                format!("head index {head} outside a {n}-token sentence"),
            );
        }
        s.heads.push(head);
        s.predicates.push(match row.cols[3].as_str() {
            "Y" => true,
            "-" => false,
            other => return parse_err(row.line, format!("bad predicate marker {other:?}")),
        });
    }

    let preds = s.predicate_indices();
    let frame_cols = width - 4;
    let placeholder = preds.is_empty() && frame_cols == 1;
    if frame_cols != preds.len() && !placeholder {
        return parse_err(
            rows[0].line,
            format!(
                "{} predicates but {frame_cols} role columns",
                preds.len()
            ),
        );
    }
    for k in 0..frame_cols {
        let tags: Vec<String> = rows.iter().map(|r| r.cols[4 + k].clone()).collect();
        if let Err(i) = is_valid_bio(&tags) {
            return parse_err(rows[i].line, format!("ill-formed BIO tag {:?}", tags[i]));
        }
        if placeholder {
            if let Some(i) = tags.iter().position(|t| t != "O") {
                return parse_err(rows[i].line, "role tag without any predicate");
            }
        } else {
            s.frames.insert(preds[k], tags);
        }
    }
    s.validate().map_err(|e| CorpusError::Parse {
        line: rows[0].line,
        msg: e.to_string(),
    })?;
    Ok(s)
}

pub fn read_conll(path: impl AsRef<Path>) -> Result<Vec<AnnotatedSentence>> {
    parse_conll(&std::fs::read_to_string(path)?)
}

/// Tab-separated, one blank line after each sentence. Predicates without a
/// frame get an all-`O` column.
pub fn write_conll(sentences: &[AnnotatedSentence]) -> String {
    let mut out = String::new();
    for s in sentences {
        let preds = s.predicate_indices();
        for t in 0..s.len() {
            let _ = write!(
                out,
                "{}\t{}\t{}\t{}",
                s.tokens[t],
                s.pos[t],
                s.heads[t],
                if s.predicates[t] { "Y" } else { "-" }
            );
            for p in &preds {
                let tag = s.frames.get(p).map(|f| f[t].as_str()).unwrap_or("O");
                out.push('\t');
                out.push_str(tag);
            }
            out.push('\n');
        }
        out.push('\n');
    }
    out
}

pub fn write_conll_file(path: impl AsRef<Path>, sentences: &[AnnotatedSentence]) -> Result<()> {
    std::fs::write(path, write_conll(sentences))?;
    Ok(())
}
