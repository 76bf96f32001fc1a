//! Set algebra over detector verdicts: plain intersections, exclusive
//! (UpSet-style) regions, and pairwise MCC between flag sets.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::metrics::{mcc_from_counts, Mcc};
use crate::verdict::NoiseVerdict;
use crate::{Error, Result};

pub const MAX_UPSET_METHODS: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct VerdictSet {
    pub method: String,
    pub flagged: BTreeSet<String>,
    /// Size of the universe the flags were drawn from (the training split).
    pub universe: usize,
}

impl VerdictSet {
    pub fn new(method: impl Into<String>, flagged: impl IntoIterator<Item = String>, universe: usize) -> Result<Self> {
        let flagged: BTreeSet<String> = flagged.into_iter().collect();
        if flagged.len() > universe {
            return Err(Error::invalid("more flagged ids than the universe holds"));
        }
        Ok(VerdictSet {
            method: method.into(),
            flagged,
            universe,
        })
    }

    pub fn from_verdicts(method: impl Into<String>, verdicts: &[NoiseVerdict]) -> Self {
        VerdictSet {
            method: method.into(),
            flagged: verdicts.iter().filter(|v| v.flag).map(|v| v.id.clone()).collect(),
            universe: verdicts.len(),
        }
    }
}

fn check_sets(sets: &[VerdictSet]) -> Result<()> {
    let mut names = BTreeSet::new();
    for s in sets {
        if !names.insert(s.method.as_str()) {
            return Err(Error::invalid(format!("method `{}` appears twice", s.method)));
        }
        if s.universe != sets[0].universe {
            return Err(Error::invalid("verdict sets come from different universes"));
        }
    }
    Ok(())
}

/// Ids flagged by every method in `members`.
pub fn intersect_flags(sets: &[VerdictSet], members: &[&str]) -> Result<BTreeSet<String>> {
    check_sets(sets)?;
    let chosen = members
        .iter()
        .map(|m| {
            sets.iter()
                .find(|s| s.method == *m)
                .ok_or_else(|| Error::UnknownMethod((*m).to_owned()))
        })
        .collect::<Result<Vec<_>>>()?;
    let Some((first, rest)) = chosen.split_first() else {
        return Err(Error::invalid("intersection needs at least one method"));
    };
    Ok(first
        .flagged
        .iter()
        .filter(|id| rest.iter().all(|s| s.flagged.contains(*id)))
        .cloned()
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpsetRow {
    pub members: Vec<String>,
    /// Examples flagged by exactly these methods and no others.
    pub count: usize,
    /// `count` over the universe size.
    pub fraction: f64,
    /// `count` over the size of the union of all flag sets.
    pub fraction_of_union: f64,
}

/// Exclusive region sizes for every nonempty subset of methods, largest first.
pub fn upset_table(sets: &[VerdictSet]) -> Result<Vec<UpsetRow>> {
    check_sets(sets)?;
    if sets.len() > MAX_UPSET_METHODS {
        return Err(Error::invalid(format!(
            "upset table supports at most {MAX_UPSET_METHODS} methods, got {}",
            sets.len()
        )));
    }
    let mut pattern: BTreeMap<&str, usize> = BTreeMap::new();
    for (bit, s) in sets.iter().enumerate() {
        for id in &s.flagged {
            *pattern.entry(id.as_str()).or_default() |= 1 << bit;
        }
    }
    let mut counts = vec![0usize; 1 << sets.len()];
    for mask in pattern.values() {
        counts[*mask] += 1;
    }
    let n = sets.first().map_or(0, |s| s.universe);
    let union = pattern.len();
    let ratio = |c: usize, d: usize| if d == 0 { 0.0 } else { c as f64 / d as f64 };
    let mut rows: Vec<UpsetRow> = (1..counts.len())
        .map(|mask| UpsetRow {
            members: sets
                .iter()
                .enumerate()
                .filter(|(bit, _)| mask & (1 << bit) != 0)
                .map(|(_, s)| s.method.clone())
                .collect(),
            count: counts[mask],
            fraction: ratio(counts[mask], n),
            fraction_of_union: ratio(counts[mask], union),
        })
        .collect();
    // Stable: equal counts keep subset enumeration order.
    rows.sort_by(|a, b| b.count.cmp(&a.count));
    Ok(rows)
}

/// Tab-separated export: `members  count  fraction  fraction_of_union`.
pub fn upset_to_tsv(rows: &[UpsetRow]) -> String {
    let mut s = String::from("members\tcount\tfraction\tfraction_of_union\n");
    for r in rows {
        writeln!(
            s,
            "{}\t{}\t{}\t{}",
            r.members.join("&"),
            r.count,
            r.fraction,
            r.fraction_of_union
        )
        .unwrap();
    }
    s
}

/// Symmetric matrix of pairwise MCC between flag indicators over the universe.
pub fn mcc_matrix(sets: &[VerdictSet]) -> Result<Vec<Vec<Mcc>>> {
    check_sets(sets)?;
    Ok(sets
        .iter()
        .map(|a| {
            sets.iter()
                .map(|b| {
                    let both = a.flagged.intersection(&b.flagged).count();
                    let only_a = a.flagged.len() - both;
                    let only_b = b.flagged.len() - both;
                    let neither = a.universe - both - only_a - only_b;
                    mcc_from_counts(both, only_a, only_b, neither)
                })
                .collect()
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::mcc;

    fn set(name: &str, ids: &[u32], n: usize) -> VerdictSet {
        VerdictSet::new(name, ids.iter().map(|i| i.to_string()), n).unwrap()
    }

    #[test]
    fn intersection_examples() {
        let sets = [set("a", &[1, 2, 3], 10), set("b", &[2, 3, 4], 10), set("c", &[3, 5], 10)];
        let only_a = intersect_flags(&sets, &["a"]).unwrap();
        assert_eq!(only_a, sets[0].flagged);
        let abc = intersect_flags(&sets, &["a", "b", "c"]).unwrap();
        assert_eq!(abc, BTreeSet::from(["3".to_owned()]));
        let disjoint = [set("a", &[1], 10), set("b", &[2], 10)];
        assert!(intersect_flags(&disjoint, &["a", "b"]).unwrap().is_empty());
        assert!(matches!(intersect_flags(&sets, &["zz"]), Err(Error::UnknownMethod(_))));
    }

    #[test]
    fn mismatched_universe_rejected() {
        let sets = [set("a", &[1], 10), set("b", &[1], 11)];
        assert!(intersect_flags(&sets, &["a", "b"]).is_err());
    }

    #[test]
    fn upset_examples() {
        let rows = upset_table(&[set("a", &[1, 2, 3, 4, 5], 20)]).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].count, 5);
        assert_eq!(rows[0].fraction, 0.25);

        let ids: Vec<u32> = (0..7).collect();
        let rows = upset_table(&[set("a", &ids, 20), set("b", &ids, 20)]).unwrap();
        assert_eq!(rows[0].members, ["a", "b"]);
        assert_eq!(rows[0].count, 7);
        assert_eq!(rows[0].fraction_of_union, 1.0);
        assert!(rows[1..].iter().all(|r| r.count == 0));
    }

    #[test]
    fn too_many_methods() {
        let sets: Vec<VerdictSet> = (0..9).map(|i| set(&format!("m{i}"), &[1], 5)).collect();
        assert!(upset_table(&sets).is_err());
    }

    #[test]
    fn tsv_export() {
        let rows = upset_table(&[set("ct", &[1, 2], 4), set("ls", &[2], 4)]).unwrap();
        let tsv = upset_to_tsv(&rows);
        let lines: Vec<&str> = tsv.lines().collect();
        assert_eq!(lines[0], "members\tcount\tfraction\tfraction_of_union");
        assert_eq!(lines[1], "ct\t1\t0.25\t0.5");
        assert_eq!(lines[2], "ct&ls\t1\t0.25\t0.5");
        assert_eq!(lines[3], "ls\t0\t0\t0");
    }

    #[test]
    fn mcc_matrix_examples() {
        let n = 6;
        let evens = set("a", &[0, 2, 4], n);
        let same = set("b", &[0, 2, 4], n);
        let odds = set("c", &[1, 3, 5], n);
        let m = mcc_matrix(&[evens, same, odds]).unwrap();
        assert_eq!(m[0][1].value, 1.0);
        assert_eq!(m[0][2].value, -1.0);
        assert_eq!(m[0][0].value, 1.0);

        // Delegation to the metrics contingency.
        let a = set("a", &[0, 1, 2, 3, 4], 10);
        let b = set("b", &[0, 1, 2, 3, 5, 6], 10);
        let ind = |s: &VerdictSet| (0..10).map(|i| s.flagged.contains(&i.to_string())).collect::<Vec<_>>();
        let m = mcc_matrix(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(m[0][1], mcc(&ind(&a), &ind(&b)));
    }
}
