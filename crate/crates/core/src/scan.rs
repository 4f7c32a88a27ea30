//! Gene-level scan driver: align samples, fit the null model and every
//! transform once, then test each gene in parallel.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assoc::{self, Flags, PreparedTransform, TestKind, TestLabel, TestResult};
use crate::error::{Error, Result};
use crate::io::{self, GeneDefinition, GenotypeSource, PhenotypeTable};
use crate::model::{fit_null, GenotypeBlock};
use crate::transforms::{apply_transform, BandwidthRule, TransformKind, TransformTag, BLOM_OFFSET};

pub const RESULTS_HEADER: &str = "gene_id\ttest\ttransform\tstatistic\tpvalue\tp_used\tflags";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanConfig {
    pub phenotype: String,
    pub maf_min: f64,
    pub transforms: Vec<TransformTag>,
    pub tests: Vec<TestKind>,
    pub significance: f64,
    pub bandwidth: BandwidthRule,
    pub int_offset: f64,
    pub gamma: Option<f64>,
    /// Genes with at most this many SNPs after filtering are skipped.
    pub min_snps: usize,
    /// Fraction of phenotype IDs that must be found among genotyped samples.
    pub min_match_fraction: f64,
    /// Worker threads; 0 uses the global pool.
    pub threads: usize,
    pub seed: u64,
}

impl Default for ScanConfig {
    fn default() -> Self {
        ScanConfig {
            phenotype: "y".into(),
            maf_min: 0.05,
            transforms: TransformTag::ALL.to_vec(),
            tests: TestKind::ALL.to_vec(),
            significance: 2.5e-6,
            bandwidth: BandwidthRule::NormalReference,
            int_offset: BLOM_OFFSET,
            gamma: None,
            min_snps: 5,
            min_match_fraction: 0.95,
            threads: 0,
            seed: 1,
        }
    }
}

impl ScanConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.significance > 0.0 && self.significance < 1.0) {
            return Err(Error::InvalidArgument(format!("significance must be in (0, 1), got {}", self.significance)));
        }
        if !(0.0..0.5).contains(&self.maf_min) {
            return Err(Error::InvalidArgument(format!("maf_min must be in [0, 0.5), got {}", self.maf_min)));
        }
        if !(0.0..=1.0).contains(&self.min_match_fraction) {
            return Err(Error::InvalidArgument("min_match_fraction must be in [0, 1]".into()));
        }
        if self.transforms.is_empty() || self.tests.is_empty() {
            return Err(Error::InvalidArgument("need at least one test and one transform".into()));
        }
        Ok(())
    }

    /// Tests and transforms sorted into reporting order, duplicates removed.
    fn canonical(&self) -> (Vec<TestKind>, Vec<TransformTag>) {
        let mut tests = self.tests.clone();
        tests.sort();
        tests.dedup();
        let mut transforms = self.transforms.clone();
        transforms.sort();
        transforms.dedup();
        (tests, transforms)
    }
}

/// One line of the results file.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub gene_id: String,
    pub test: TestLabel,
    pub transform: TransformTag,
    pub statistic: f64,
    pub pvalue: f64,
    pub p_used: usize,
    pub flags: Flags,
}

impl ResultRow {
    fn from_result(gene_id: &str, r: TestResult) -> Self {
        ResultRow {
            gene_id: gene_id.to_string(),
            test: r.test,
            transform: r.transform.expect("scan results carry a transform"),
            statistic: r.statistic,
            pvalue: r.pvalue,
            p_used: r.p_used,
            flags: r.flags,
        }
    }
}

impl fmt::Display for ResultRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.gene_id, self.test, self.transform, self.statistic, self.pvalue, self.p_used, self.flags
        )
    }
}

impl FromStr for ResultRow {
    type Err = Error;

    fn from_str(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 7 {
            return Err(Error::SchemaMismatch(format!("expected 7 result fields, found {}", f.len())));
        }
        let num = |s: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|_| Error::SchemaMismatch(format!("not a number: {s:?}")))
        };
        Ok(ResultRow {
            gene_id: f[0].to_string(),
            test: f[1].parse()?,
            transform: f[2].parse()?,
            statistic: num(f[3])?,
            pvalue: num(f[4])?,
            p_used: f[5]
                .parse()
                .map_err(|_| Error::SchemaMismatch(format!("bad p_used {:?}", f[5])))?,
            flags: f[6].parse()?,
        })
    }
}

pub fn write_results<W: Write>(rows: &[ResultRow], mut out: W) -> std::io::Result<()> {
    writeln!(out, "{RESULTS_HEADER}")?;
    for r in rows {
        writeln!(out, "{r}")?;
    }
    out.flush()
}

pub fn read_results(path: &Path) -> Result<Vec<ResultRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == RESULTS_HEADER => {}
        _ => {
            return Err(Error::SchemaMismatch(format!(
                "{} does not start with the results header",
                path.display()
            )))
        }
    }
    lines.filter(|l| !l.is_empty()).map(str::parse).collect()
}

/// Phenotype rows and genotype rows of the samples present in both files,
/// in phenotype-file order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Alignment {
    pub phenotype_rows: Vec<usize>,
    pub genotype_rows: Vec<usize>,
}

pub fn align_samples(pheno_ids: &[String], geno_ids: Option<&[String]>, geno_n: usize, min_fraction: f64) -> Result<Alignment> {
    let total = pheno_ids.len();
    let (phenotype_rows, genotype_rows): (Vec<usize>, Vec<usize>) = match geno_ids {
        None => {
            if geno_n != total {
                return Err(Error::Alignment {
                    matched: geno_n.min(total),
                    total,
                    missing: total.abs_diff(geno_n),
                });
            }
            ((0..total).collect(), (0..total).collect())
        }
        Some(ids) => {
            let index: HashMap<&str, usize> = ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
            pheno_ids
                .iter()
                .enumerate()
                .filter_map(|(i, id)| index.get(id.as_str()).map(|&g| (i, g)))
                .unzip()
        }
    };
    let matched = phenotype_rows.len();
    if matched == 0 || (matched as f64) < min_fraction * total as f64 {
        return Err(Error::Alignment {
            matched,
            total,
            missing: total - matched,
        });
    }
    Ok(Alignment {
        phenotype_rows,
        genotype_rows,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScanCounts {
    pub phenotype_samples: usize,
    pub genotype_samples: usize,
    pub samples_used: usize,
    pub genes_total: usize,
    pub genes_tested: usize,
    pub genes_skipped: usize,
    pub snps_removed_by_maf: usize,
    pub result_rows: usize,
    /// Rows with `pvalue < significance`, keyed by `test/transform`.
    pub significant: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScanTimings {
    pub load_seconds: f64,
    pub null_fit_seconds: f64,
    /// One entry per transform, each fitted exactly once.
    pub transform_fit_seconds: BTreeMap<String, f64>,
    pub gene_tests_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanManifest {
    pub config: ScanConfig,
    pub inputs: ScanInputs,
    pub counts: ScanCounts,
    pub lpt_bandwidth: Option<f64>,
    pub timings: ScanTimings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanInputs {
    pub phenotype: PathBuf,
    pub genotypes: PathBuf,
    pub genesets: PathBuf,
}

/// Output of [`scan`]: rows in gene, test, transform order plus the manifest.
#[derive(Debug, Clone)]
pub struct ScanOutput {
    pub rows: Vec<ResultRow>,
    pub counts: ScanCounts,
    pub lpt_bandwidth: Option<f64>,
    pub timings: ScanTimings,
}

fn filtered_block(block: GenotypeBlock, weights: Option<&[f64]>, maf_min: f64) -> Result<(Option<GenotypeBlock>, Option<Vec<f64>>, usize)> {
    let keep: Vec<usize> = (0..block.p()).filter(|&j| block.mafs[j] >= maf_min).collect();
    let removed = block.p() - keep.len();
    if keep.is_empty() {
        return Ok((None, None, removed));
    }
    if removed == 0 {
        return Ok((Some(block), weights.map(<[f64]>::to_vec), 0));
    }
    let values = block.values.select_columns(&keep);
    let ids = keep.iter().map(|&j| block.snp_ids[j].clone()).collect();
    let mafs = keep.iter().map(|&j| block.mafs[j]).collect();
    let w = weights.map(|w| keep.iter().map(|&j| w[j]).collect());
    Ok((Some(GenotypeBlock::new(values, ids, mafs)?), w, removed))
}

enum GeneOutcome {
    Skipped { maf_removed: usize },
    Tested { rows: Vec<ResultRow>, maf_removed: usize },
}

/// Runs a scan on loaded inputs.
pub fn scan(
    cfg: &ScanConfig,
    table: &PhenotypeTable,
    genotypes: &dyn GenotypeSource,
    genes: &[GeneDefinition],
) -> Result<ScanOutput> {
    cfg.validate()?;
    let (tests, tags) = cfg.canonical();
    let mut timings = ScanTimings::default();

    let align = align_samples(&table.ids, genotypes.sample_ids(), genotypes.n(), cfg.min_match_fraction)?;
    let table = table.select_rows(&align.phenotype_rows);
    let start = Instant::now();
    let fit = fit_null(&table.y, &table.design()?)?;
    timings.null_fit_seconds = start.elapsed().as_secs_f64();

    let mut transforms = Vec::with_capacity(tags.len());
    let mut lpt_bandwidth = None;
    for &tag in &tags {
        let start = Instant::now();
        let output = apply_transform(TransformKind::from_tag(tag, cfg.int_offset, cfg.bandwidth), &fit)?;
        if let Some(model) = &output.model {
            lpt_bandwidth = Some(model.bandwidth());
        }
        transforms.push(PreparedTransform::new(&fit, &output)?);
        timings
            .transform_fit_seconds
            .insert(tag.to_string(), start.elapsed().as_secs_f64());
    }

    let start = Instant::now();
    let run_gene = |gene: &GeneDefinition| -> Result<GeneOutcome> {
        let block = genotypes.block(&gene.snp_ids, &align.genotype_rows)?;
        let (block, weights, maf_removed) = filtered_block(block, gene.weights.as_deref(), cfg.maf_min)?;
        let block = match block {
            Some(b) if b.p() > cfg.min_snps => b,
            _ => return Ok(GeneOutcome::Skipped { maf_removed }),
        };
        let results = assoc::gene_test_suite(&fit, &block, &transforms, &tests, weights.as_deref(), cfg.gamma)?;
        Ok(GeneOutcome::Tested {
            rows: results.into_iter().map(|r| ResultRow::from_result(&gene.gene_id, r)).collect(),
            maf_removed,
        })
    };
    let outcomes: Vec<GeneOutcome> = if cfg.threads == 0 {
        genes.par_iter().map(run_gene).collect::<Result<_>>()?
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build()
            .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
        pool.install(|| genes.par_iter().map(run_gene).collect::<Result<_>>())?
    };
    timings.gene_tests_seconds = start.elapsed().as_secs_f64();

    let mut counts = ScanCounts {
        phenotype_samples: align.phenotype_rows.len().max(table.n()),
        genotype_samples: genotypes.n(),
        samples_used: table.n(),
        genes_total: genes.len(),
        ..ScanCounts::default()
    };
    let mut rows = Vec::new();
    for outcome in outcomes {
        match outcome {
            GeneOutcome::Skipped { maf_removed } => {
                counts.genes_skipped += 1;
                counts.snps_removed_by_maf += maf_removed;
            }
            GeneOutcome::Tested { rows: r, maf_removed } => {
                counts.genes_tested += 1;
                counts.snps_removed_by_maf += maf_removed;
                rows.extend(r);
            }
        }
    }
    for &test in &tests {
        for &tag in &tags {
            let label = test.label();
            let hits = rows
                .iter()
                .filter(|r| r.test == label && r.transform == tag && r.pvalue < cfg.significance)
                .count();
            counts.significant.insert(format!("{label}/{tag}"), hits);
        }
    }
    counts.result_rows = rows.len();
    Ok(ScanOutput {
        rows,
        counts,
        lpt_bandwidth,
        timings,
    })
}

/// Manifest path written next to `out`: `results.tsv` → `results.manifest.json`.
pub fn manifest_path(out: &Path) -> PathBuf {
    out.with_extension("manifest.json")
}

/// Loads the inputs, runs the scan and writes the results TSV and manifest.
pub fn run_scan(cfg: &ScanConfig, inputs: &ScanInputs, out: &Path) -> Result<ScanManifest> {
    cfg.validate()?;
    let start = Instant::now();
    let table = io::load_table(&inputs.phenotype, &cfg.phenotype)?;
    let genotypes = io::load_genotypes(&inputs.genotypes)?;
    let genes = io::load_genesets(&inputs.genesets)?;
    let load_seconds = start.elapsed().as_secs_f64();

    let mut output = scan(cfg, &table, genotypes.as_ref(), &genes)?;
    output.timings.load_seconds = load_seconds;
    output.counts.phenotype_samples = table.n();

    let file = std::fs::File::create(out).map_err(|e| Error::io(out, e))?;
    write_results(&output.rows, std::io::BufWriter::new(file)).map_err(|e| Error::io(out, e))?;

    let manifest = ScanManifest {
        config: cfg.clone(),
        inputs: inputs.clone(),
        counts: output.counts,
        lpt_bandwidth: output.lpt_bandwidth,
        timings: output.timings,
    };
    let mpath = manifest_path(out);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&mpath, json + "\n").map_err(|e| Error::io(&mpath, e))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::TsvGenotypes;
    use nalgebra::{DMatrix, DVector};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn dataset(n: usize, genes: usize, seed: u64) -> (PhenotypeTable, TsvGenotypes, Vec<GeneDefinition>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ids: Vec<String> = (0..n).map(|i| format!("s{i}")).collect();
        let x: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let y: Vec<f64> = x.iter().map(|v| 0.5 * v + rng.sample::<f64, _>(StandardNormal)).collect();
        let table = PhenotypeTable {
            ids: ids.clone(),
            phenotype_name: "y".into(),
            y: DVector::from_vec(y),
            covariate_names: vec!["x".into()],
            covariates: DMatrix::from_column_slice(n, 1, &x),
        };
        let p = genes * 7;
        let snps: Vec<String> = (0..p).map(|j| format!("rs{j}")).collect();
        let columns: Vec<Vec<u8>> = (0..p)
            .map(|j| {
                let maf = if j % 7 == 6 { 0.01 } else { 0.3 };
                (0..n)
                    .map(|_| (rng.random::<f64>() < maf) as u8 + (rng.random::<f64>() < maf) as u8)
                    .collect()
            })
            .collect();
        let geno = TsvGenotypes::from_codes(ids, snps.clone(), columns).unwrap();
        let sets = (0..genes)
            .map(|g| GeneDefinition {
                gene_id: format!("G{g}"),
                snp_ids: snps[g * 7..g * 7 + 7].to_vec(),
                weights: None,
            })
            .collect();
        (table, geno, sets)
    }

    #[test]
    fn rows_are_ordered_and_filters_apply() {
        let (table, geno, genes) = dataset(300, 4, 1);
        let cfg = ScanConfig::default();
        let out = scan(&cfg, &table, &geno, &genes).unwrap();
        assert_eq!(out.counts.genes_tested, 4);
        assert_eq!(out.rows.len(), 36);
        assert_eq!(out.rows[0].gene_id, "G0");
        assert_eq!(out.rows[0].test, TestLabel::Burden);
        assert_eq!(out.rows[0].transform, TransformTag::Uat);
        assert_eq!(out.rows[2].transform, TransformTag::Lpt);
        assert_eq!(out.rows[3].test, TestLabel::Skat);
        assert!(out.rows.iter().all(|r| r.p_used <= 6));
        assert!(out.counts.snps_removed_by_maf >= 1);
        assert!(out.lpt_bandwidth.unwrap() > 0.0);
        assert_eq!(out.timings.transform_fit_seconds.len(), 3);

        let strict = ScanConfig {
            min_snps: 7,
            ..cfg
        };
        let out = scan(&strict, &table, &geno, &genes).unwrap();
        assert_eq!(out.rows.len(), 0);
        assert_eq!(out.counts.genes_skipped, 4);
    }

    #[test]
    fn sample_order_invariance() {
        let (table, geno, genes) = dataset(200, 3, 2);
        let cfg = ScanConfig::default();
        let a = scan(&cfg, &table, &geno, &genes).unwrap();
        let mut order: Vec<usize> = (0..200).collect();
        order.reverse();
        let b = scan(&cfg, &table.select_rows(&order), &geno, &genes).unwrap();
        for (x, y) in a.rows.iter().zip(&b.rows) {
            assert_eq!((&x.gene_id, &x.test, x.transform), (&y.gene_id, &y.test, y.transform));
            assert!((x.pvalue - y.pvalue).abs() <= 1e-9 * x.pvalue.max(1e-300), "{x} vs {y}");
        }
    }

    #[test]
    fn alignment_rules() {
        let p: Vec<String> = ["a", "b", "c", "d"].iter().map(|s| s.to_string()).collect();
        let g: Vec<String> = ["d", "c", "x", "a", "b"].iter().map(|s| s.to_string()).collect();
        let al = align_samples(&p, Some(&g), 5, 0.95).unwrap();
        assert_eq!(al.phenotype_rows, vec![0, 1, 2, 3]);
        assert_eq!(al.genotype_rows, vec![3, 4, 1, 0]);
        let short = &g[..3];
        match align_samples(&p, Some(short), 3, 0.95) {
            Err(Error::Alignment { matched, total, missing }) => assert_eq!((matched, total, missing), (2, 4, 2)),
            other => panic!("{other:?}"),
        }
        assert!(align_samples(&p, Some(short), 3, 0.5).is_ok());
        assert!(align_samples(&p, None, 4, 0.95).is_ok());
        assert!(align_samples(&p, None, 5, 0.95).is_err());
    }

    #[test]
    fn results_round_trip() {
        let (table, geno, genes) = dataset(150, 2, 3);
        let out = scan(&ScanConfig::default(), &table, &geno, &genes).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.tsv");
        write_results(&out.rows, std::fs::File::create(&path).unwrap()).unwrap();
        let back = read_results(&path).unwrap();
        assert_eq!(back.len(), out.rows.len());
        for (a, b) in back.iter().zip(&out.rows) {
            assert_eq!(a.to_string(), b.to_string());
        }
        std::fs::write(&path, "gene\tp\n").unwrap();
        assert!(matches!(read_results(&path), Err(Error::SchemaMismatch(_))));
    }
}
