use std::path::Path;

use super::{InteractionRecord, PrepError};

#[derive(Clone, Debug, PartialEq)]
pub struct ParseOptions {
    /// Abort when more than this fraction of data lines is malformed.
    pub max_malformed_frac: f64,
}

impl Default for ParseOptions {
    fn default() -> Self {
        Self { max_malformed_frac: 0.01 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParsedLog {
    pub records: Vec<InteractionRecord>,
    pub malformed: usize,
    /// Non-blank data lines seen (excluding the header).
    pub lines: usize,
}

const USER_COLS: &[&str] = &["user_id", "user", "uid"];
const VIDEO_COLS: &[&str] = &["video_id", "item_id", "pid", "video", "item"];
const TIME_COLS: &[&str] = &["exposed_time", "timestamp", "time"];

fn column(header: &[&str], names: &[&str], what: &'static str) -> Result<usize, PrepError> {
    header
        .iter()
        .position(|h| names.contains(&h.trim().to_ascii_lowercase().as_str()))
        .ok_or(PrepError::MissingColumn(what))
}

/// Parses a delimited log with a header row. Tabs are used when the header
/// contains one, commas otherwise. Extra columns are ignored; malformed
/// lines are skipped and counted.
pub fn parse_log_str(text: &str, opts: &ParseOptions) -> Result<ParsedLog, PrepError> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or(PrepError::MissingHeader)?;
    let delim = if header.contains('\t') { '\t' } else { ',' };
    let cols: Vec<&str> = header.split(delim).collect();
    let (cu, cv, ct) = (column(&cols, USER_COLS, "user")?, column(&cols, VIDEO_COLS, "video")?, column(&cols, TIME_COLS, "time")?);
    let mut out = ParsedLog { records: Vec::new(), malformed: 0, lines: 0 };
    let mut first_bad = 0;
    for (n, line) in lines {
        out.lines += 1;
        let f: Vec<&str> = line.split(delim).map(str::trim).collect();
        let rec = (f.len() == cols.len())
            .then(|| (f[cu], f[cv], f[ct].parse::<u64>()))
            .and_then(|(u, v, t)| (!u.is_empty() && !v.is_empty()).then_some((u, v, t.ok()?)));
        match rec {
            Some((u, v, t)) => out.records.push(InteractionRecord::new(u, v, t)),
            None => {
                if out.malformed == 0 {
                    first_bad = n + 1;
                }
                out.malformed += 1;
            }
        }
    }
    if out.malformed as f64 > opts.max_malformed_frac * out.lines as f64 {
        return Err(PrepError::TooManyMalformed {
            malformed: out.malformed,
            lines: out.lines,
            cap_pct: 100.0 * opts.max_malformed_frac,
            first_line: first_bad,
        });
    }
    Ok(out)
}

pub fn parse_log(path: impl AsRef<Path>, opts: &ParseOptions) -> Result<ParsedLog, PrepError> {
    parse_log_str(&std::fs::read_to_string(path)?, opts)
}
