//! The votes CSV: one row per test item with its full vote stream.
//!
//! Columns: `item,label,first,second,entropy,information,counts,votes`.
//! `counts` is the per-class histogram joined by `;`, `votes` the class of
//! every sample in order, one base-36 digit each. `second` is empty when
//! only one class received votes. Reports are computed from `label` and
//! `votes` alone; the remaining columns are checked for consistency.

use std::path::Path;

use scann::analytics::{information, shannon_entropy, VoteDistribution, VoteTable};

use crate::error::{CliError, CliResult};

pub const HEADER: [&str; 8] = [
    "item",
    "label",
    "first",
    "second",
    "entropy",
    "information",
    "counts",
    "votes",
];

/// Largest class count the one-digit vote encoding supports.
pub const MAX_CLASSES: usize = 36;

#[derive(Debug, Clone, PartialEq)]
pub struct VoteFile {
    pub labels: Vec<usize>,
    pub table: VoteTable,
}

pub fn encode(table: &VoteTable, labels: &[usize]) -> CliResult<Vec<u8>> {
    if table.n_classes() > MAX_CLASSES {
        return Err(CliError::Usage(format!(
            "votes CSV supports at most {MAX_CLASSES} classes, got {}",
            table.n_classes()
        )));
    }
    if labels.len() != table.n_items() {
        return Err(CliError::Internal("label count differs from vote table".into()));
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| CliError::Internal(e.to_string());
    w.write_record(HEADER).map_err(csv_err)?;
    for (i, &label) in labels.iter().enumerate() {
        let d = table.distribution(i)?;
        let counts: Vec<String> = d.counts().iter().map(|c| c.to_string()).collect();
        let stream: String = table
            .row(i)
            .iter()
            .map(|&v| char::from_digit(v as u32, 36).expect("class below 36"))
            .collect();
        w.write_record([
            i.to_string(),
            label.to_string(),
            d.first_choice().to_string(),
            d.second_choice().map_or(String::new(), |c| c.to_string()),
            shannon_entropy(&d).to_string(),
            information(&d, table.n_classes()).to_string(),
            counts.join(";"),
            stream,
        ])
        .map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| CliError::Internal(e.to_string()))
}

pub fn read(path: &Path) -> CliResult<VoteFile> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    decode(&bytes, path)
}

pub fn decode(bytes: &[u8], path: &Path) -> CliResult<VoteFile> {
    let err = |line: u64, msg: String| CliError::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(bytes);
    let header = rdr.headers().map_err(|e| err(1, e.to_string()))?.clone();
    if header.iter().ne(HEADER) {
        return Err(err(1, format!("expected header {}", HEADER.join(","))));
    }
    let mut labels = Vec::new();
    let mut votes: Vec<u16> = Vec::new();
    let mut shape: Option<(usize, usize)> = None;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            err(line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let field = |i: usize| rec.get(i).unwrap_or("");
        let num = |i: usize| -> CliResult<usize> {
            field(i).parse().map_err(|_| {
                err(
                    line,
                    format!("{} is not a nonnegative integer: {:?}", HEADER[i], field(i)),
                )
            })
        };
        if num(0)? != labels.len() {
            return Err(err(line, format!("expected item {}", labels.len())));
        }
        let counts: Vec<u64> = field(6)
            .split(';')
            .map(|c| c.parse().map_err(|_| err(line, format!("bad count {c:?}"))))
            .collect::<CliResult<_>>()?;
        let n_classes = counts.len();
        let stream: Vec<u16> = field(7)
            .chars()
            .map(|c| match c.to_digit(36) {
                Some(v) if (v as usize) < n_classes => Ok(v as u16),
                _ => Err(err(line, format!("bad vote {c:?} for {n_classes} classes"))),
            })
            .collect::<CliResult<_>>()?;
        match shape {
            None => shape = Some((n_classes, stream.len())),
            Some(s) if s != (n_classes, stream.len()) => {
                return Err(err(
                    line,
                    format!("row has {n_classes} classes and {} votes, expected {s:?}", stream.len()),
                ))
            }
            _ => {}
        }
        let dist = VoteDistribution::from_votes(&stream, n_classes).map_err(|e| err(line, e.to_string()))?;
        if dist.counts() != counts.as_slice() {
            return Err(err(line, "counts disagree with the vote stream".into()));
        }
        let label = num(1)?;
        if label >= n_classes {
            return Err(err(line, format!("label {label} outside {n_classes} classes")));
        }
        if num(2)? != dist.first_choice() {
            return Err(err(line, "first choice disagrees with counts".into()));
        }
        labels.push(label);
        votes.extend(stream);
    }
    let (n_classes, k) = shape.ok_or_else(|| err(1, "no vote rows".into()))?;
    Ok(VoteFile {
        table: VoteTable::new(labels.len(), k, n_classes, votes),
        labels,
    })
}
