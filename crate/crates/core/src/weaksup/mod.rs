//! Labeling functions, the vote matrix and its diagnostics, the soft
//! majority vote baseline and the generative label model.

mod label_model;
pub mod lfs;
pub mod primitives;

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::io::{Read, Write};
use std::panic::{catch_unwind, AssertUnwindSafe};

#[cfg(feature = "parallel")]
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extraction::{RelationCandidate, RelationType};

pub use label_model::{
    fit_label_model, posterior_labels, FitDiagnostics, LabelModel, LabelModelConfig,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Vote {
    True,
    False,
    Abstain,
}

impl Vote {
    pub fn is_abstain(self) -> bool {
        self == Vote::Abstain
    }

    fn code(self) -> u8 {
        match self {
            Vote::Abstain => 0,
            Vote::True => 1,
            Vote::False => 2,
        }
    }

    fn from_code(c: u8) -> Option<Vote> {
        match c {
            0 => Some(Vote::Abstain),
            1 => Some(Vote::True),
            2 => Some(Vote::False),
            _ => None,
        }
    }

    pub fn parse(s: &str) -> Option<Vote> {
        match s.trim().to_uppercase().as_str() {
            "TRUE" | "1" => Some(Vote::True),
            "FALSE" | "0" => Some(Vote::False),
            "ABSTAIN" | "-" | "-1" | "" => Some(Vote::Abstain),
            _ => None,
        }
    }
}

impl fmt::Display for Vote {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Vote::True => "TRUE",
            Vote::False => "FALSE",
            Vote::Abstain => "ABSTAIN",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LfError(pub String);

impl fmt::Display for LfError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// A pure heuristic voting on a candidate.
pub trait LabelingFunction: Send + Sync {
    fn id(&self) -> &str;

    /// The relation this function was written for; `None` means any.
    fn relation_type(&self) -> Option<RelationType> {
        None
    }

    fn vote(&self, candidate: &RelationCandidate) -> std::result::Result<Vote, LfError>;
}

/// Closure-backed labeling function.
pub struct FnLf<F> {
    id: String,
    relation: Option<RelationType>,
    f: F,
}

impl<F> FnLf<F>
where
    F: Fn(&RelationCandidate) -> std::result::Result<Vote, LfError> + Send + Sync,
{
    pub fn new(id: impl Into<String>, relation: Option<RelationType>, f: F) -> Self {
        FnLf {
            id: id.into(),
            relation,
            f,
        }
    }
}

impl<F> LabelingFunction for FnLf<F>
where
    F: Fn(&RelationCandidate) -> std::result::Result<Vote, LfError> + Send + Sync,
{
    fn id(&self) -> &str {
        &self.id
    }

    fn relation_type(&self) -> Option<RelationType> {
        self.relation
    }

    fn vote(&self, candidate: &RelationCandidate) -> std::result::Result<Vote, LfError> {
        (self.f)(candidate)
    }
}

pub type BoxedLf = Box<dyn LabelingFunction>;

/// Candidates × labeling functions, stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelMatrix {
    candidate_ids: Vec<String>,
    lf_ids: Vec<String>,
    votes: Vec<Vote>,
}

impl LabelMatrix {
    pub fn new(candidate_ids: Vec<String>, lf_ids: Vec<String>, votes: Vec<Vote>) -> Result<Self> {
        if votes.len() != candidate_ids.len() * lf_ids.len() {
            return Err(Error::invalid(format!(
                "vote count {} does not match {} x {}",
                votes.len(),
                candidate_ids.len(),
                lf_ids.len()
            )));
        }
        let mut seen = HashSet::new();
        for id in &candidate_ids {
            if !seen.insert(id.as_str()) {
                return Err(Error::DuplicateId(id.clone()));
            }
        }
        let mut seen = HashSet::new();
        for id in &lf_ids {
            if !seen.insert(id.as_str()) {
                return Err(Error::invalid(format!(
                    "duplicate labeling function id {id:?}"
                )));
            }
        }
        Ok(LabelMatrix {
            candidate_ids,
            lf_ids,
            votes,
        })
    }

    /// Builds a matrix from rows of votes with generated ids, for tests and simulation.
    pub fn from_rows(rows: &[Vec<Vote>]) -> Result<Self> {
        let m = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != m) {
            return Err(Error::invalid("ragged vote rows"));
        }
        LabelMatrix::new(
            (0..rows.len()).map(|i| format!("c{i}")).collect(),
            (0..m).map(|j| format!("lf{j}")).collect(),
            rows.concat(),
        )
    }

    pub fn n(&self) -> usize {
        self.candidate_ids.len()
    }

    pub fn m(&self) -> usize {
        self.lf_ids.len()
    }

    pub fn candidate_ids(&self) -> &[String] {
        &self.candidate_ids
    }

    pub fn lf_ids(&self) -> &[String] {
        &self.lf_ids
    }

    pub fn get(&self, i: usize, j: usize) -> Vote {
        self.votes[i * self.m() + j]
    }

    pub fn row(&self, i: usize) -> &[Vote] {
        let m = self.m();
        &self.votes[i * m..(i + 1) * m]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[Vote]> {
        (0..self.n()).map(move |i| self.row(i))
    }

    pub fn column(&self, j: usize) -> impl Iterator<Item = Vote> + '_ {
        (0..self.n()).map(move |i| self.get(i, j))
    }

    /// Column subset/permutation, by index.
    pub fn select_columns(&self, cols: &[usize]) -> Result<Self> {
        let votes = (0..self.n())
            .flat_map(|i| cols.iter().map(move |&j| (i, j)))
            .map(|(i, j)| self.get(i, j))
            .collect();
        LabelMatrix::new(
            self.candidate_ids.clone(),
            cols.iter().map(|&j| self.lf_ids[j].clone()).collect(),
            votes,
        )
    }

    /// Row subset, by index.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        LabelMatrix::new(
            rows.iter()
                .map(|&i| self.candidate_ids[i].clone())
                .collect(),
            self.lf_ids.clone(),
            rows.iter()
                .flat_map(|&i| self.row(i).iter().copied())
                .collect(),
        )
    }

    /// Compact columnar layout, little-endian:
    /// `b"LMX1"`, n: u32, m: u32, m lf ids and n candidate ids (each u32
    /// byte length + UTF-8), then m columns of n vote bytes
    /// (0 = ABSTAIN, 1 = TRUE, 2 = FALSE).
    pub fn write_binary<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(b"LMX1")?;
        w.write_all(&(self.n() as u32).to_le_bytes())?;
        w.write_all(&(self.m() as u32).to_le_bytes())?;
        for s in self.lf_ids.iter().chain(&self.candidate_ids) {
            w.write_all(&(s.len() as u32).to_le_bytes())?;
            w.write_all(s.as_bytes())?;
        }
        for j in 0..self.m() {
            let col: Vec<u8> = self.column(j).map(Vote::code).collect();
            w.write_all(&col)?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self> {
        let fmt_err = |m: &str| Error::Format(m.to_string());
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)
            .map_err(|e| Error::Format(e.to_string()))?;
        let mut cur = ByteCursor { buf: &buf, pos: 0 };
        if cur.take(4)? != b"LMX1" {
            return Err(fmt_err("bad magic; not a label matrix file"));
        }
        let n = cur.u32()? as usize;
        let m = cur.u32()? as usize;
        let mut strings = Vec::with_capacity(n + m);
        for _ in 0..n + m {
            let len = cur.u32()? as usize;
            let s = std::str::from_utf8(cur.take(len)?).map_err(|_| fmt_err("invalid UTF-8 id"))?;
            strings.push(s.to_string());
        }
        let candidate_ids = strings.split_off(m);
        let lf_ids = strings;
        let cols = cur.take(n * m)?;
        let mut votes = vec![Vote::Abstain; n * m];
        for j in 0..m {
            for i in 0..n {
                votes[i * m + j] =
                    Vote::from_code(cols[j * n + i]).ok_or_else(|| fmt_err("bad vote code"))?;
            }
        }
        if cur.pos != buf.len() {
            return Err(fmt_err("trailing bytes after vote columns"));
        }
        LabelMatrix::new(candidate_ids, lf_ids, votes)
    }

    /// Long-form CSV: `candidate_id,lf_id,vote`, one row per cell.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["candidate_id", "lf_id", "vote"])?;
        for (i, cid) in self.candidate_ids.iter().enumerate() {
            for (j, lf) in self.lf_ids.iter().enumerate() {
                wtr.write_record([cid.as_str(), lf.as_str(), &self.get(i, j).to_string()])?;
            }
        }
        wtr.flush().map_err(|e| Error::Format(e.to_string()))?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        let mut cand_index: HashMap<String, usize> = HashMap::new();
        let mut lf_index: HashMap<String, usize> = HashMap::new();
        let mut cands = Vec::new();
        let mut lfs = Vec::new();
        let mut cells = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let line = rec.position().map_or(0, |p| p.line() as usize);
            let get = |k: usize| rec.get(k).unwrap_or_default().to_string();
            let (cid, lf, v) = (get(0), get(1), get(2));
            let vote = Vote::parse(&v).ok_or(Error::MalformedRecord {
                line,
                field: Some("vote".into()),
                message: format!("bad vote {v:?}"),
            })?;
            let i = *cand_index.entry(cid.clone()).or_insert_with(|| {
                cands.push(cid);
                cands.len() - 1
            });
            let j = *lf_index.entry(lf.clone()).or_insert_with(|| {
                lfs.push(lf);
                lfs.len() - 1
            });
            cells.push((i, j, vote));
        }
        let m = lfs.len();
        let mut votes = vec![Vote::Abstain; cands.len() * m];
        for (i, j, v) in cells {
            votes[i * m + j] = v;
        }
        LabelMatrix::new(cands, lfs, votes)
    }
}

struct ByteCursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteCursor<'a> {
    fn take(&mut self, k: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(k).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Format("unexpected end of file".into()))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ApplyDiagnostics {
    /// Internal errors per labeling function, recorded as ABSTAIN.
    pub errors: Vec<(String, usize)>,
}

impl ApplyDiagnostics {
    pub fn total_errors(&self) -> usize {
        self.errors.iter().map(|(_, n)| n).sum()
    }
}

fn safe_vote(lf: &dyn LabelingFunction, c: &RelationCandidate) -> Option<Vote> {
    match catch_unwind(AssertUnwindSafe(|| lf.vote(c))) {
        Ok(Ok(v)) => Some(v),
        Ok(Err(e)) => {
            log::debug!(
                "labeling function {} failed on {}: {e}",
                lf.id(),
                c.candidate_id
            );
            None
        }
        Err(_) => None,
    }
}

/// Applies every labeling function to every candidate. Errors and panics
/// inside a function become ABSTAIN and are counted in the diagnostics.
pub fn apply_lfs(
    candidates: &[RelationCandidate],
    lfs: &[BoxedLf],
) -> Result<(LabelMatrix, ApplyDiagnostics)> {
    for c in candidates {
        if let Some(lf) = lfs
            .iter()
            .find(|lf| lf.relation_type().is_some_and(|r| r != c.relation_type))
        {
            return Err(Error::invalid(format!(
                "labeling function {} targets a different relation than candidate {} ({})",
                lf.id(),
                c.candidate_id,
                c.relation_type
            )));
        }
    }
    let row = |c: &RelationCandidate| -> Vec<Option<Vote>> {
        lfs.iter().map(|lf| safe_vote(lf.as_ref(), c)).collect()
    };
    #[cfg(feature = "parallel")]
    let rows: Vec<Vec<Option<Vote>>> = candidates.par_iter().map(row).collect();
    #[cfg(not(feature = "parallel"))]
    let rows: Vec<Vec<Option<Vote>>> = candidates.iter().map(row).collect();

    let mut errors = vec![0usize; lfs.len()];
    let mut votes = Vec::with_capacity(rows.len() * lfs.len());
    for r in rows {
        for (j, v) in r.into_iter().enumerate() {
            if v.is_none() {
                errors[j] += 1;
            }
            votes.push(v.unwrap_or(Vote::Abstain));
        }
    }
    let matrix = LabelMatrix::new(
        candidates.iter().map(|c| c.candidate_id.clone()).collect(),
        lfs.iter().map(|lf| lf.id().to_string()).collect(),
        votes,
    )?;
    let diagnostics = ApplyDiagnostics {
        errors: lfs
            .iter()
            .zip(errors)
            .filter(|(_, n)| *n > 0)
            .map(|(lf, n)| (lf.id().to_string(), n))
            .collect(),
    };
    Ok((matrix, diagnostics))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LfStat {
    pub lf_id: String,
    pub coverage: f64,
    pub overlap: f64,
    pub conflict: f64,
    /// Over this function's non-abstaining rows that have gold.
    pub accuracy: Option<f64>,
    pub correct: usize,
    pub incorrect: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LfStats {
    pub n: usize,
    pub per_lf: Vec<LfStat>,
}

impl LfStats {
    pub fn has_gold(&self) -> bool {
        self.per_lf.iter().any(|s| s.accuracy.is_some())
    }

    /// Plain-text table; the accuracy columns only appear when gold was given.
    pub fn to_table(&self) -> String {
        let gold = self.has_gold();
        let mut out = format!(
            "{:<28} {:>8} {:>8} {:>8}",
            "lf_id", "coverage", "overlap", "conflict"
        );
        if gold {
            out.push_str(&format!(
                " {:>8} {:>8} {:>9}",
                "accuracy", "correct", "incorrect"
            ));
        }
        out.push('\n');
        for s in &self.per_lf {
            out.push_str(&format!(
                "{:<28} {:>8.3} {:>8.3} {:>8.3}",
                s.lf_id, s.coverage, s.overlap, s.conflict
            ));
            if gold {
                let acc = s.accuracy.map_or("-".to_string(), |a| format!("{a:.3}"));
                out.push_str(&format!(" {:>8} {:>8} {:>9}", acc, s.correct, s.incorrect));
            }
            out.push('\n');
        }
        out
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record([
            "lf_id",
            "coverage",
            "overlap",
            "conflict",
            "accuracy",
            "correct",
            "incorrect",
        ])?;
        for s in &self.per_lf {
            wtr.write_record([
                s.lf_id.clone(),
                format!("{:.6}", s.coverage),
                format!("{:.6}", s.overlap),
                format!("{:.6}", s.conflict),
                s.accuracy.map_or(String::new(), |a| format!("{a:.6}")),
                s.correct.to_string(),
                s.incorrect.to_string(),
            ])?;
        }
        wtr.flush().map_err(|e| Error::Format(e.to_string()))?;
        Ok(())
    }
}

/// Coverage, overlap and conflict per labeling function, plus empirical
/// accuracy when gold labels (keyed by candidate id) are supplied.
pub fn lf_statistics(
    matrix: &LabelMatrix,
    gold: Option<&HashMap<String, bool>>,
) -> Result<LfStats> {
    if let Some(g) = gold {
        let ids: HashSet<&str> = matrix.candidate_ids().iter().map(String::as_str).collect();
        let mut missing: Vec<String> = g
            .keys()
            .filter(|k| !ids.contains(k.as_str()))
            .cloned()
            .collect();
        if !missing.is_empty() {
            missing.sort();
            return Err(Error::MissingGoldIds(missing));
        }
    }
    let (n, m) = (matrix.n(), matrix.m());
    let denom = n.max(1) as f64;
    let mut per_lf = Vec::with_capacity(m);
    for j in 0..m {
        let (mut cov, mut ovl, mut cfl, mut correct, mut incorrect) =
            (0usize, 0usize, 0usize, 0usize, 0usize);
        for i in 0..n {
            let v = matrix.get(i, j);
            if v.is_abstain() {
                continue;
            }
            cov += 1;
            let others = (0..m)
                .filter(|&k| k != j)
                .map(|k| matrix.get(i, k))
                .filter(|o| !o.is_abstain());
            let (mut any_other, mut disagree) = (false, false);
            for o in others {
                any_other = true;
                disagree |= o != v;
            }
            ovl += any_other as usize;
            cfl += disagree as usize;
            if let Some(&y) = gold.and_then(|g| g.get(&matrix.candidate_ids()[i])) {
                if (v == Vote::True) == y {
                    correct += 1;
                } else {
                    incorrect += 1;
                }
            }
        }
        per_lf.push(LfStat {
            lf_id: matrix.lf_ids()[j].clone(),
            coverage: cov as f64 / denom,
            overlap: ovl as f64 / denom,
            conflict: cfl as f64 / denom,
            accuracy: (gold.is_some() && correct + incorrect > 0)
                .then(|| correct as f64 / (correct + incorrect) as f64),
            correct,
            incorrect,
        });
    }
    Ok(LfStats { n, per_lf })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbabilisticLabel {
    pub candidate_id: String,
    pub p_true: f64,
}

pub fn write_labels_csv<W: Write>(labels: &[ProbabilisticLabel], w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["candidate_id", "p_true"])?;
    for l in labels {
        wtr.write_record([l.candidate_id.clone(), format!("{:.17}", l.p_true)])?;
    }
    wtr.flush().map_err(|e| Error::Format(e.to_string()))?;
    Ok(())
}

pub fn read_labels_csv<R: Read>(r: R) -> Result<Vec<ProbabilisticLabel>> {
    let mut rdr = csv::Reader::from_reader(r);
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let p: f64 =
            rec.get(1)
                .unwrap_or_default()
                .parse()
                .map_err(|_| Error::MalformedRecord {
                    line,
                    field: Some("p_true".into()),
                    message: "not a number".into(),
                })?;
        out.push(ProbabilisticLabel {
            candidate_id: rec.get(0).unwrap_or_default().to_string(),
            p_true: p,
        });
    }
    Ok(out)
}

/// Fraction of non-abstaining votes that are TRUE; 0.5 when all abstain.
pub fn soft_majority_vote(matrix: &LabelMatrix) -> Vec<ProbabilisticLabel> {
    matrix
        .rows()
        .zip(matrix.candidate_ids())
        .map(|(row, id)| {
            let t = row.iter().filter(|v| **v == Vote::True).count();
            let f = row.iter().filter(|v| **v == Vote::False).count();
            ProbabilisticLabel {
                candidate_id: id.clone(),
                p_true: if t + f == 0 {
                    0.5
                } else {
                    t as f64 / (t + f) as f64
                },
            }
        })
        .collect()
}
