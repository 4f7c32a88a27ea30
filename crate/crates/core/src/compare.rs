//! Discovery gains between transforms and validation-run reproducibility.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scan::ResultRow;
use crate::transforms::TransformTag;

/// Validation threshold applied to genes found in the main run.
pub const VALIDATION_LEVEL: f64 = 0.05;

/// `(|A∖B| / |A∪B|, |B∖A| / |A∪B|)`, both zero for an empty union.
pub fn discovery_gain<T: Ord>(a: &BTreeSet<T>, b: &BTreeSet<T>) -> (f64, f64) {
    let union = a.union(b).count();
    if union == 0 {
        return (0.0, 0.0);
    }
    let only_a = a.difference(b).count();
    let only_b = b.difference(a).count();
    (only_a as f64 / union as f64, only_b as f64 / union as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainRow {
    pub test: String,
    pub transform_a: TransformTag,
    pub transform_b: TransformTag,
    pub hits_a: usize,
    pub hits_b: usize,
    pub gain_a_vs_b: f64,
    pub gain_b_vs_a: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReproducibilityRow {
    pub test: String,
    pub transform: TransformTag,
    pub main_hits: usize,
    pub validated: usize,
    /// `None` when the main run has no hits.
    pub proportion: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Comparison {
    pub gains: Vec<GainRow>,
    pub reproducibility: Vec<ReproducibilityRow>,
}

type Key = (String, TransformTag);

fn hits(rows: &[ResultRow], threshold: f64) -> BTreeMap<Key, BTreeSet<String>> {
    let mut out: BTreeMap<Key, BTreeSet<String>> = BTreeMap::new();
    for r in rows {
        let set = out.entry((r.test.to_string(), r.transform)).or_default();
        if r.pvalue < threshold {
            set.insert(r.gene_id.clone());
        }
    }
    out
}

/// Proportion of main-run hits that reach `p < 0.05` in the validation run.
pub fn reproducibility(main_hits: &BTreeSet<String>, validation_hits: &BTreeSet<String>) -> (usize, Option<f64>) {
    let validated = main_hits.intersection(validation_hits).count();
    let proportion = if main_hits.is_empty() {
        None
    } else {
        Some(validated as f64 / main_hits.len() as f64)
    };
    (validated, proportion)
}

/// Discovery gains for every test and transform pair of `main`, and, given a
/// validation run, the reproducibility of each method's hits.
pub fn compare_runs(main: &[ResultRow], validation: Option<&[ResultRow]>, significance: f64) -> Result<Comparison> {
    let main_hits = hits(main, significance);
    let mut by_test: BTreeMap<&str, Vec<TransformTag>> = BTreeMap::new();
    for (test, tag) in main_hits.keys() {
        by_test.entry(test.as_str()).or_default().push(*tag);
    }
    let mut gains = Vec::new();
    for (test, tags) in &by_test {
        // Later transforms first: LPT vs INT, LPT vs UAT, INT vs UAT.
        for (i, &a) in tags.iter().enumerate().rev() {
            for &b in tags[..i].iter().rev() {
                let ha = &main_hits[&(test.to_string(), a)];
                let hb = &main_hits[&(test.to_string(), b)];
                let (ga, gb) = discovery_gain(ha, hb);
                gains.push(GainRow {
                    test: test.to_string(),
                    transform_a: a,
                    transform_b: b,
                    hits_a: ha.len(),
                    hits_b: hb.len(),
                    gain_a_vs_b: ga,
                    gain_b_vs_a: gb,
                });
            }
        }
    }
    let mut reproducibility_rows = Vec::new();
    if let Some(validation) = validation {
        let val_hits = hits(validation, VALIDATION_LEVEL);
        for (key, set) in &main_hits {
            let v = val_hits.get(key).ok_or_else(|| {
                Error::SchemaMismatch(format!("validation run has no {} / {} results", key.0, key.1))
            })?;
            let (validated, proportion) = reproducibility(set, v);
            reproducibility_rows.push(ReproducibilityRow {
                test: key.0.clone(),
                transform: key.1,
                main_hits: set.len(),
                validated,
                proportion,
            });
        }
    }
    Ok(Comparison {
        gains,
        reproducibility: reproducibility_rows,
    })
}

/// Percentage with two decimals, or `NA`.
pub fn percent(x: Option<f64>) -> String {
    match x {
        Some(v) => format!("{:.2}%", 100.0 * v),
        None => "NA".into(),
    }
}

pub fn write_comparison<W: Write>(cmp: &Comparison, mut out: W) -> std::io::Result<()> {
    writeln!(out, "test\ttransform_a\ttransform_b\thits_a\thits_b\tgain_a_vs_b\tgain_b_vs_a")?;
    for g in &cmp.gains {
        writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            g.test,
            g.transform_a,
            g.transform_b,
            g.hits_a,
            g.hits_b,
            percent(Some(g.gain_a_vs_b)),
            percent(Some(g.gain_b_vs_a))
        )?;
    }
    if !cmp.reproducibility.is_empty() {
        writeln!(out)?;
        writeln!(out, "test\ttransform\tmain_hits\tvalidated\tproportion")?;
        for r in &cmp.reproducibility {
            writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}",
                r.test,
                r.transform,
                r.main_hits,
                r.validated,
                percent(r.proportion)
            )?;
        }
    }
    out.flush()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assoc::{Flags, TestLabel};

    fn set(range: std::ops::Range<usize>) -> BTreeSet<usize> {
        range.collect()
    }

    #[test]
    fn gain_cases() {
        let a = set(0..81);
        let b = set(0..51);
        let (ga, gb) = discovery_gain(&a, &b);
        assert_eq!(ga, 30.0 / 81.0);
        assert_eq!(gb, 0.0);
        assert_eq!(percent(Some(ga)), "37.04%");
        assert_eq!(percent(Some(gb)), "0.00%");
        assert_eq!(discovery_gain(&a, &a), (0.0, 0.0));
        assert_eq!(discovery_gain(&set(0..2), &set(2..5)), (0.4, 0.6));
        assert_eq!(discovery_gain(&set(0..0), &set(0..0)), (0.0, 0.0));
    }

    #[test]
    fn reproducibility_cases() {
        let main: BTreeSet<String> = (0..81).map(|i| format!("g{i}")).collect();
        let val: BTreeSet<String> = (12..200).map(|i| format!("g{i}")).collect();
        let (v, p) = reproducibility(&main, &val);
        assert_eq!(v, 69);
        assert_eq!(percent(p), "85.19%");
        assert_eq!(reproducibility(&BTreeSet::new(), &val), (0, None));
    }

    fn row(gene: &str, tag: TransformTag, p: f64) -> ResultRow {
        ResultRow {
            gene_id: gene.into(),
            test: TestLabel::Burden,
            transform: tag,
            statistic: 0.0,
            pvalue: p,
            p_used: 6,
            flags: Flags::default(),
        }
    }

    #[test]
    fn self_comparison() {
        let rows = vec![
            row("a", TransformTag::Int, 1e-7),
            row("a", TransformTag::Lpt, 1e-8),
            row("b", TransformTag::Int, 0.5),
            row("b", TransformTag::Lpt, 1e-7),
        ];
        let cmp = compare_runs(&rows, Some(&rows), 2.5e-6).unwrap();
        assert_eq!(cmp.gains.len(), 1);
        let g = &cmp.gains[0];
        assert_eq!((g.transform_a, g.transform_b), (TransformTag::Lpt, TransformTag::Int));
        assert_eq!((g.gain_a_vs_b, g.gain_b_vs_a), (0.5, 0.0));
        assert!(cmp.reproducibility.iter().all(|r| r.proportion == Some(1.0)));

        let none = compare_runs(&rows, Some(&rows), 1e-12).unwrap();
        assert!(none.reproducibility.iter().all(|r| r.proportion.is_none()));
        let mut buf = Vec::new();
        write_comparison(&none, &mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().contains("\tNA\n"));

        let other = vec![row("a", TransformTag::Uat, 0.01)];
        assert!(matches!(compare_runs(&rows, Some(&other), 2.5e-6), Err(Error::SchemaMismatch(_))));
    }
}
