//! One-hot encoding and design checks shared by the regression fits.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct CategoricalEncoding {
    pub reference: String,
    /// `"{name}={level}"` for every non-reference level, sorted by level.
    pub names: Vec<String>,
    pub columns: Vec<Vec<f64>>,
}

/// Indicator columns for every level but the reference. A requested
/// reference absent from the data falls back to the most frequent level
/// (ties to the smallest).
pub fn encode_categorical(
    name: &str,
    values: &[String],
    reference: Option<&str>,
) -> CategoricalEncoding {
    let mut freq: BTreeMap<&str, usize> = BTreeMap::new();
    for v in values {
        *freq.entry(v).or_default() += 1;
    }
    let most_frequent = || {
        freq.iter()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
            .map(|(k, _)| k.to_string())
            .unwrap_or_default()
    };
    let reference = match reference {
        Some(r) if freq.contains_key(r) => r.to_string(),
        Some(r) => {
            log::warn!("reference level {r:?} of {name} not present; using most frequent level");
            most_frequent()
        }
        None => most_frequent(),
    };
    let levels: Vec<&str> = freq.keys().copied().filter(|l| *l != reference).collect();
    CategoricalEncoding {
        names: levels.iter().map(|l| format!("{name}={l}")).collect(),
        columns: levels
            .iter()
            .map(|l| values.iter().map(|v| f64::from(u8::from(v == l))).collect())
            .collect(),
        reference,
    }
}

/// Gram-Schmidt over the columns (after an optional intercept); any column
/// that is numerically a combination of earlier ones is reported.
pub(crate) fn check_full_rank(
    names: &[String],
    columns: &[Vec<f64>],
    intercept: bool,
) -> Result<()> {
    let n = columns.first().map_or(0, Vec::len);
    let mut basis: Vec<Vec<f64>> = Vec::new();
    if intercept {
        basis.push(vec![1.0 / (n as f64).sqrt(); n]);
    }
    let mut bad = Vec::new();
    for (name, col) in names.iter().zip(columns) {
        let mut r = col.clone();
        for b in &basis {
            let proj: f64 = r.iter().zip(b).map(|(x, y)| x * y).sum();
            r.iter_mut().zip(b).for_each(|(x, y)| *x -= proj * y);
        }
        let scale = col.iter().map(|x| x * x).sum::<f64>().sqrt();
        let norm = r.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm <= 1e-9 * scale.max(1.0) {
            bad.push(name.clone());
        } else {
            basis.push(r.into_iter().map(|x| x / norm).collect());
        }
    }
    if !bad.is_empty() {
        return Err(Error::RankDeficient { columns: bad });
    }
    Ok(())
}

pub(crate) fn transpose(rows: &[Vec<f64>], p: usize) -> Vec<Vec<f64>> {
    (0..p)
        .map(|j| rows.iter().map(|r| r[j]).collect())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn reference_dropped() {
        let e = encode_categorical("sex", &s(&["F", "M", "F", "U"]), None);
        assert_eq!(e.reference, "F");
        assert_eq!(e.names, ["sex=M", "sex=U"]);
        assert_eq!(e.columns[0], [0.0, 1.0, 0.0, 0.0]);
        let e = encode_categorical("sex", &s(&["F", "M"]), Some("M"));
        assert_eq!(e.names, ["sex=F"]);
        let e = encode_categorical("sex", &s(&["F", "M", "M"]), Some("X"));
        assert_eq!(e.reference, "M");
    }

    #[test]
    fn rank_check_names_columns() {
        let names = s(&["a", "b", "c"]);
        let cols = vec![
            vec![1.0, 0.0, 1.0],
            vec![0.0, 1.0, 0.0],
            vec![1.0, 1.0, 1.0],
        ];
        assert!(check_full_rank(&names[..2], &cols[..2], false).is_ok());
        match check_full_rank(&names, &cols, false) {
            Err(Error::RankDeficient { columns }) => assert_eq!(columns, ["c"]),
            other => panic!("{other:?}"),
        }
        match check_full_rank(&names[2..], &cols[2..], true) {
            Err(Error::RankDeficient { columns }) => assert_eq!(columns, ["c"]),
            other => panic!("{other:?}"),
        }
    }
}
