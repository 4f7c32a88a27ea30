use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use lpt::io::{self, GeneDefinition, PhenotypeTable, TsvGenotypes};
use lpt::scan::{self, ResultRow, ScanConfig};
use lpt::simulate::{self, ErrorDist, SimGenotypeConfig};

struct Dataset {
    table: PhenotypeTable,
    geno: TsvGenotypes,
    genes: Vec<GeneDefinition>,
}

fn dataset(n: usize, n_genes: usize, snps_per_gene: usize, dist: ErrorDist, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = simulate::simulate_covariates(n, &mut rng).unwrap();
    let errors = simulate::sample_error(dist, n, seed + 1);
    let y = simulate::phenotype_from_errors(
        &z,
        &simulate::DEFAULT_ALPHA,
        &DMatrix::zeros(n, 1),
        &[0.0],
        simulate::Link::Identity,
        &errors,
    )
    .unwrap();
    let mut snps = Vec::new();
    let mut columns = Vec::new();
    let mut genes = Vec::new();
    for g in 0..n_genes {
        let block = simulate::simulate_genotypes(&SimGenotypeConfig::new(n, snps_per_gene), &mut rng).unwrap();
        let ids: Vec<String> = (0..snps_per_gene).map(|j| format!("rs{g}_{j}")).collect();
        for j in 0..snps_per_gene {
            columns.push(block.values.column(j).iter().map(|&v| v as u8).collect::<Vec<u8>>());
        }
        snps.extend(ids.iter().cloned());
        genes.push(GeneDefinition {
            gene_id: format!("G{g:04}"),
            snp_ids: ids,
            weights: None,
        });
    }
    let ids: Vec<String> = (0..n).map(|i| format!("s{i}")).collect();
    let table = PhenotypeTable {
        ids: ids.clone(),
        phenotype_name: "y".into(),
        y,
        covariate_names: vec!["c1".into(), "c2".into()],
        covariates: z.values().columns(1, 2).into_owned(),
    };
    let geno = TsvGenotypes::from_codes(ids, snps, columns).unwrap();
    Dataset { table, geno, genes }
}

#[test]
fn null_scan_hit_counts_are_binomial() {
    let d = dataset(1000, 500, 8, ErrorDist::ChiSq5, 11);
    let cfg = ScanConfig {
        significance: 0.01,
        ..ScanConfig::default()
    };
    let out = scan::scan(&cfg, &d.table, &d.geno, &d.genes).unwrap();
    assert_eq!(out.counts.genes_tested, 500);
    assert_eq!(out.counts.significant.len(), 9);
    let bound = 3.0 * (500.0f64 * 0.01 * 0.99).sqrt();
    for (key, &hits) in &out.counts.significant {
        assert!((hits as f64 - 5.0).abs() <= bound, "{key}: {hits} hits");
    }
}

#[test]
fn tsv_and_gmx_inputs_agree_bit_for_bit() {
    let d = dataset(300, 20, 7, ErrorDist::LogNormal, 21);
    let dir = tempfile::tempdir().unwrap();
    let (tsv, gmx) = (dir.path().join("g.tsv"), dir.path().join("g.gmx"));
    d.geno.write(&tsv).unwrap();
    d.geno.write_gmx(&gmx).unwrap();
    let cfg = ScanConfig::default();
    let a = scan::scan(&cfg, &d.table, io::load_genotypes(&tsv).unwrap().as_ref(), &d.genes).unwrap();
    let b = scan::scan(&cfg, &d.table, io::load_genotypes(&gmx).unwrap().as_ref(), &d.genes).unwrap();
    assert!(!a.rows.is_empty());
    let text = |rows: &[ResultRow]| {
        let mut buf = Vec::new();
        scan::write_results(rows, &mut buf).unwrap();
        buf
    };
    assert_eq!(text(&a.rows), text(&b.rows));
}

#[test]
fn small_genes_are_all_skipped() {
    let d = dataset(200, 10, 5, ErrorDist::StdNormal, 31);
    let out = scan::scan(&ScanConfig::default(), &d.table, &d.geno, &d.genes).unwrap();
    assert!(out.rows.is_empty());
    assert_eq!(out.counts.genes_skipped, 10);
    assert_eq!(out.counts.genes_tested, 0);
}

#[test]
fn phenotype_row_order_does_not_matter() {
    let d = dataset(400, 15, 8, ErrorDist::StudentT3, 41);
    let cfg = ScanConfig::default();
    let base = scan::scan(&cfg, &d.table, &d.geno, &d.genes).unwrap();

    let mut order: Vec<usize> = (0..d.table.n()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(42));
    let permuted = d.table.select_rows(&order);
    let shuffled = scan::scan(&cfg, &permuted, &d.geno, &d.genes).unwrap();
    assert_eq!(base.rows.len(), shuffled.rows.len());
    for (a, b) in base.rows.iter().zip(&shuffled.rows) {
        assert_eq!((&a.gene_id, &a.test, a.transform, a.p_used), (&b.gene_id, &b.test, b.transform, b.p_used));
        assert_eq!(a.flags, b.flags);
        assert!((a.statistic - b.statistic).abs() <= 1e-9 * a.statistic.abs().max(1.0));
        assert!((a.pvalue - b.pvalue).abs() <= 1e-9 * a.pvalue.max(1e-300), "{} {} {}", a.gene_id, a.pvalue, b.pvalue);
    }
}

#[test]
fn sidecar_ids_drive_alignment() {
    let d = dataset(120, 3, 7, ErrorDist::StdNormal, 51);
    let dir = tempfile::tempdir().unwrap();
    let gmx = dir.path().join("g.gmx");
    d.geno.write_gmx(&gmx).unwrap();
    let source = io::load_genotypes(&gmx).unwrap();
    assert_eq!(source.sample_ids().map(|s| s.len()), Some(120));

    // A phenotype file sharing only half of the IDs fails alignment.
    let mut half = d.table.select_rows(&(0..60).collect::<Vec<_>>());
    for id in half.ids.iter_mut().skip(30) {
        id.push('x');
    }
    assert!(matches!(
        scan::scan(&ScanConfig::default(), &half, source.as_ref(), &d.genes),
        Err(lpt::Error::Alignment { matched: 30, total: 60, .. })
    ));
}
