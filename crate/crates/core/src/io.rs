//! File formats: phenotype/covariate tables, genotype matrices (TSV and the
//! packed `GMX1` binary), and gene-set definitions.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::{DesignMatrix, GenotypeBlock};

pub const GMX_MAGIC: &[u8; 4] = b"GMX1";
const MISSING_CODE: u8 = 3;

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| Error::io(path, e))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

fn is_missing(cell: &str) -> bool {
    matches!(cell, "NA" | "na" | "NaN" | "." | "")
}

/// Phenotype, covariates and sample IDs read from a TSV with a header row.
#[derive(Debug, Clone, PartialEq)]
pub struct PhenotypeTable {
    pub ids: Vec<String>,
    pub phenotype_name: String,
    pub y: DVector<f64>,
    pub covariate_names: Vec<String>,
    /// `n × k` covariates without the intercept.
    pub covariates: DMatrix<f64>,
}

impl PhenotypeTable {
    pub fn n(&self) -> usize {
        self.ids.len()
    }

    /// Design columns including the intercept.
    pub fn q(&self) -> usize {
        self.covariates.ncols() + 1
    }

    /// Covariates with an intercept column prepended.
    pub fn design(&self) -> Result<DesignMatrix> {
        DesignMatrix::with_intercept(&self.covariates)
    }

    /// Rows `rows`, in that order.
    pub fn select_rows(&self, rows: &[usize]) -> PhenotypeTable {
        PhenotypeTable {
            ids: rows.iter().map(|&i| self.ids[i].clone()).collect(),
            phenotype_name: self.phenotype_name.clone(),
            y: DVector::from_iterator(rows.len(), rows.iter().map(|&i| self.y[i])),
            covariate_names: self.covariate_names.clone(),
            covariates: self.covariates.select_rows(rows),
        }
    }
}

/// Reads a phenotype table. The first column holds sample IDs, `phenotype`
/// names the response column and every other column is a covariate.
pub fn load_table(path: &Path, phenotype: &str) -> Result<PhenotypeTable> {
    let reader = BufReader::new(open(path)?);
    let mut lines = reader.lines();
    let header = match lines.next() {
        Some(line) => line.map_err(|e| Error::io(path, e))?,
        None => return Err(Error::SchemaMismatch(format!("{} is empty", path.display()))),
    };
    let names: Vec<String> = header.split('\t').map(|s| s.trim().to_string()).collect();
    let y_col = names
        .iter()
        .skip(1)
        .position(|c| c == phenotype)
        .map(|i| i + 1)
        .ok_or_else(|| Error::MissingColumn(phenotype.to_string()))?;
    let cov_cols: Vec<usize> = (1..names.len()).filter(|&c| c != y_col).collect();

    let mut ids = Vec::new();
    let mut y = Vec::new();
    let mut cov = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let row = i + 1;
        let cells: Vec<&str> = line.split('\t').map(str::trim).collect();
        if cells.len() != names.len() {
            return Err(Error::Parse {
                row,
                column: names.get(cells.len()).cloned().unwrap_or_default(),
                message: format!("expected {} fields, found {}", names.len(), cells.len()),
            });
        }
        let number = |c: usize| -> Result<f64> {
            cells[c]
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::Parse {
                    row,
                    column: names[c].clone(),
                    message: format!("not a finite number: {:?}", cells[c]),
                })
        };
        ids.push(cells[0].to_string());
        y.push(number(y_col)?);
        for &c in &cov_cols {
            cov.push(number(c)?);
        }
    }
    let n = ids.len();
    let unique: HashSet<&String> = ids.iter().collect();
    if unique.len() != n {
        return Err(Error::SchemaMismatch(format!("duplicate sample IDs in {}", path.display())));
    }
    Ok(PhenotypeTable {
        ids,
        phenotype_name: phenotype.to_string(),
        y: DVector::from_vec(y),
        covariate_names: cov_cols.iter().map(|&c| names[c].clone()).collect(),
        covariates: DMatrix::from_row_slice(n, cov_cols.len(), &cov),
    })
}

/// Writes a table readable by [`load_table`], using shortest round-trip
/// float formatting.
pub fn write_table(path: &Path, table: &PhenotypeTable) -> Result<()> {
    let mut out = create(path)?;
    let mut write = || -> std::io::Result<()> {
        write!(out, "id\t{}", table.phenotype_name)?;
        for name in &table.covariate_names {
            write!(out, "\t{name}")?;
        }
        writeln!(out)?;
        for i in 0..table.n() {
            write!(out, "{}\t{}", table.ids[i], table.y[i])?;
            for j in 0..table.covariates.ncols() {
                write!(out, "\t{}", table.covariates[(i, j)])?;
            }
            writeln!(out)?;
        }
        out.flush()
    };
    write().map_err(|e| Error::io(path, e))
}

/// One genotype column after imputation, restricted to selected samples.
#[derive(Debug, Clone, PartialEq)]
pub struct GenotypeColumn {
    pub values: Vec<f64>,
    pub maf: f64,
    pub missing: usize,
}

/// Mean-imputes missing codes and computes the MAF over observed codes.
pub fn impute_column(codes: &[u8], rows: &[usize]) -> GenotypeColumn {
    let (mut sum, mut observed) = (0u64, 0usize);
    for &r in rows {
        let c = codes[r];
        if c != MISSING_CODE {
            sum += c as u64;
            observed += 1;
        }
    }
    let mean = if observed > 0 { sum as f64 / observed as f64 } else { 0.0 };
    let freq = mean / 2.0;
    let values = rows
        .iter()
        .map(|&r| if codes[r] == MISSING_CODE { mean } else { codes[r] as f64 })
        .collect();
    GenotypeColumn {
        values,
        maf: freq.min(1.0 - freq),
        missing: rows.len() - observed,
    }
}

/// Column-addressable genotype storage. Codes are 0, 1, 2 or 3 (missing).
pub trait GenotypeSource: Sync {
    fn n(&self) -> usize;
    fn snp_ids(&self) -> &[String];
    /// Sample IDs in row order, when the format records them.
    fn sample_ids(&self) -> Option<&[String]>;
    fn read_codes(&self, column: usize) -> Result<Vec<u8>>;

    fn snp_position(&self, id: &str) -> Option<usize>;

    /// Imputed column `column` restricted to `rows`.
    fn column(&self, column: usize, rows: &[usize]) -> Result<GenotypeColumn> {
        Ok(impute_column(&self.read_codes(column)?, rows))
    }

    /// Genotype block for `snps` (by ID) restricted to `rows`.
    fn block(&self, snps: &[String], rows: &[usize]) -> Result<GenotypeBlock> {
        let mut values = DMatrix::zeros(rows.len(), snps.len());
        let mut mafs = Vec::with_capacity(snps.len());
        for (k, id) in snps.iter().enumerate() {
            let j = self.snp_position(id).ok_or_else(|| Error::UnknownSnp(id.clone()))?;
            let col = self.column(j, rows)?;
            values.column_mut(k).copy_from_slice(&col.values);
            mafs.push(col.maf);
        }
        GenotypeBlock::new(values, snps.to_vec(), mafs)
    }
}

/// Genotype TSV held in memory: header `id  snp1  snp2 ...`, one row per
/// sample, codes 0/1/2 or `NA`.
#[derive(Debug, Clone)]
pub struct TsvGenotypes {
    sample_ids: Vec<String>,
    snp_ids: Vec<String>,
    index: HashMap<String, usize>,
    /// Column-major codes.
    columns: Vec<Vec<u8>>,
}

impl TsvGenotypes {
    pub fn load(path: &Path) -> Result<Self> {
        let reader = BufReader::new(open(path)?);
        let mut lines = reader.lines();
        let header = match lines.next() {
            Some(line) => line.map_err(|e| Error::io(path, e))?,
            None => return Err(Error::SchemaMismatch(format!("{} is empty", path.display()))),
        };
        let names: Vec<String> = header.split('\t').map(|s| s.trim().to_string()).collect();
        if names.len() < 2 {
            return Err(Error::SchemaMismatch("genotype TSV needs an ID column and at least one SNP".into()));
        }
        let snp_ids = names[1..].to_vec();
        let mut columns = vec![Vec::new(); snp_ids.len()];
        let mut sample_ids = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let cells: Vec<&str> = line.split('\t').map(str::trim).collect();
            if cells.len() != names.len() {
                return Err(Error::Parse {
                    row: i + 1,
                    column: names.get(cells.len()).cloned().unwrap_or_default(),
                    message: format!("expected {} fields, found {}", names.len(), cells.len()),
                });
            }
            sample_ids.push(cells[0].to_string());
            for (j, cell) in cells[1..].iter().enumerate() {
                let code = match *cell {
                    "0" => 0,
                    "1" => 1,
                    "2" => 2,
                    c if is_missing(c) => MISSING_CODE,
                    c => {
                        return Err(Error::Parse {
                            row: i + 1,
                            column: names[j + 1].clone(),
                            message: format!("genotype code must be 0, 1, 2 or NA, got {c:?}"),
                        })
                    }
                };
                columns[j].push(code);
            }
        }
        Ok(TsvGenotypes {
            sample_ids,
            index: build_index(&snp_ids)?,
            snp_ids,
            columns,
        })
    }

    /// In-memory source from column-major codes.
    pub fn from_codes(sample_ids: Vec<String>, snp_ids: Vec<String>, columns: Vec<Vec<u8>>) -> Result<Self> {
        if columns.len() != snp_ids.len() || columns.iter().any(|c| c.len() != sample_ids.len()) {
            return Err(Error::DimensionMismatch("genotype codes vs IDs".into()));
        }
        if columns.iter().flatten().any(|&c| c > MISSING_CODE) {
            return Err(Error::InvalidArgument("genotype codes must be 0..=3".into()));
        }
        Ok(TsvGenotypes {
            sample_ids,
            index: build_index(&snp_ids)?,
            snp_ids,
            columns,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = create(path)?;
        let mut write = || -> std::io::Result<()> {
            write!(out, "id")?;
            for s in &self.snp_ids {
                write!(out, "\t{s}")?;
            }
            writeln!(out)?;
            for (i, id) in self.sample_ids.iter().enumerate() {
                write!(out, "{id}")?;
                for col in &self.columns {
                    match col[i] {
                        MISSING_CODE => write!(out, "\tNA")?,
                        c => write!(out, "\t{c}")?,
                    }
                }
                writeln!(out)?;
            }
            out.flush()
        };
        write().map_err(|e| Error::io(path, e))
    }

    /// Writes the same matrix as `GMX1` plus a `.ids` sidecar of sample IDs.
    pub fn write_gmx(&self, path: &Path) -> Result<()> {
        write_gmx(path, self.sample_ids.len(), &self.snp_ids, |i, j| self.columns[j][i])?;
        write_sample_ids(&sidecar_path(path), &self.sample_ids)
    }
}

fn build_index(snp_ids: &[String]) -> Result<HashMap<String, usize>> {
    let mut index = HashMap::with_capacity(snp_ids.len());
    for (j, id) in snp_ids.iter().enumerate() {
        if index.insert(id.clone(), j).is_some() {
            return Err(Error::SchemaMismatch(format!("duplicate SNP ID {id:?}")));
        }
    }
    Ok(index)
}

impl GenotypeSource for TsvGenotypes {
    fn snp_position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    fn n(&self) -> usize {
        self.sample_ids.len()
    }

    fn snp_ids(&self) -> &[String] {
        &self.snp_ids
    }

    fn sample_ids(&self) -> Option<&[String]> {
        Some(&self.sample_ids)
    }

    fn read_codes(&self, column: usize) -> Result<Vec<u8>> {
        self.columns
            .get(column)
            .cloned()
            .ok_or_else(|| Error::InvalidArgument(format!("column {column} out of range")))
    }
}

/// Sample-ID sidecar for a `GMX1` file: `<path>.ids`, one ID per line.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".ids");
    PathBuf::from(name)
}

fn write_sample_ids(path: &Path, ids: &[String]) -> Result<()> {
    let mut out = create(path)?;
    let mut write = || -> std::io::Result<()> {
        for id in ids {
            writeln!(out, "{id}")?;
        }
        out.flush()
    };
    write().map_err(|e| Error::io(path, e))
}

/// Writes a `GMX1` file with `code(i, j)` for sample `i`, SNP `j`.
pub fn write_gmx(path: &Path, n: usize, snp_ids: &[String], code: impl Fn(usize, usize) -> u8) -> Result<()> {
    let p = snp_ids.len();
    let (n32, p32) = match (u32::try_from(n), u32::try_from(p)) {
        (Ok(a), Ok(b)) => (a, b),
        _ => return Err(Error::InvalidArgument("GMX1 dimensions exceed u32".into())),
    };
    if snp_ids.iter().any(|s| s.contains('\0')) {
        return Err(Error::InvalidArgument("SNP IDs may not contain NUL".into()));
    }
    let mut out = create(path)?;
    let stride = p.div_ceil(4);
    let mut write = || -> std::io::Result<()> {
        out.write_all(GMX_MAGIC)?;
        out.write_all(&n32.to_le_bytes())?;
        out.write_all(&p32.to_le_bytes())?;
        for s in snp_ids {
            out.write_all(s.as_bytes())?;
            out.write_all(&[0])?;
        }
        let mut row = vec![0u8; stride];
        for i in 0..n {
            row.iter_mut().for_each(|b| *b = 0);
            for j in 0..p {
                row[j / 4] |= (code(i, j) & 3) << (2 * (j % 4));
            }
            out.write_all(&row)?;
        }
        out.flush()
    };
    write().map_err(|e| Error::io(path, e))
}

/// Packed 2-bit genotype file read column by column with positioned reads.
#[derive(Debug)]
pub struct GmxGenotypes {
    path: PathBuf,
    file: File,
    n: usize,
    snp_ids: Vec<String>,
    index: HashMap<String, usize>,
    sample_ids: Option<Vec<String>>,
    data_offset: u64,
    stride: usize,
}

impl GmxGenotypes {
    /// Opens `path`, reading sample IDs from the `.ids` sidecar if present.
    pub fn open(path: &Path) -> Result<Self> {
        let file = open(path)?;
        let len = file.metadata().map_err(|e| Error::io(path, e))?.len();
        let mut reader = BufReader::new(file.try_clone().map_err(|e| Error::io(path, e))?);
        let truncated = || Error::TruncatedFile(path.to_path_buf());
        let mut head = [0u8; 12];
        reader.read_exact(&mut head[..4]).map_err(|_| truncated())?;
        if &head[..4] != GMX_MAGIC {
            return Err(Error::BadMagic(path.to_path_buf()));
        }
        reader.read_exact(&mut head[4..]).map_err(|_| truncated())?;
        let n = u32::from_le_bytes(head[4..8].try_into().unwrap()) as usize;
        let p = u32::from_le_bytes(head[8..12].try_into().unwrap()) as usize;
        let mut offset = 12u64;
        let mut snp_ids = Vec::with_capacity(p);
        for _ in 0..p {
            let mut buf = Vec::new();
            let read = reader.read_until(0, &mut buf).map_err(|e| Error::io(path, e))?;
            if read == 0 || buf.last() != Some(&0) {
                return Err(truncated());
            }
            offset += read as u64;
            buf.pop();
            snp_ids.push(
                String::from_utf8(buf)
                    .map_err(|_| Error::SchemaMismatch(format!("non-UTF-8 SNP ID in {}", path.display())))?,
            );
        }
        let stride = p.div_ceil(4);
        if len < offset + (n * stride) as u64 {
            return Err(truncated());
        }
        let ids_path = sidecar_path(path);
        let sample_ids = if ids_path.exists() {
            let text = std::fs::read_to_string(&ids_path).map_err(|e| Error::io(&ids_path, e))?;
            let ids: Vec<String> = text.lines().filter(|l| !l.is_empty()).map(str::to_string).collect();
            if ids.len() != n {
                return Err(Error::SchemaMismatch(format!(
                    "{} lists {} samples, genotype file has {n}",
                    ids_path.display(),
                    ids.len()
                )));
            }
            Some(ids)
        } else {
            None
        };
        Ok(GmxGenotypes {
            path: path.to_path_buf(),
            file,
            n,
            index: build_index(&snp_ids)?,
            snp_ids,
            sample_ids,
            data_offset: offset,
            stride,
        })
    }
}

impl GenotypeSource for GmxGenotypes {
    fn snp_position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    fn n(&self) -> usize {
        self.n
    }

    fn snp_ids(&self) -> &[String] {
        &self.snp_ids
    }

    fn sample_ids(&self) -> Option<&[String]> {
        self.sample_ids.as_deref()
    }

    fn read_codes(&self, column: usize) -> Result<Vec<u8>> {
        if column >= self.snp_ids.len() {
            return Err(Error::InvalidArgument(format!("column {column} out of range")));
        }
        let byte = (column / 4) as u64;
        let shift = 2 * (column % 4);
        let mut codes = Vec::with_capacity(self.n);
        let mut b = [0u8; 1];
        for i in 0..self.n {
            let at = self.data_offset + (i * self.stride) as u64 + byte;
            self.file
                .read_exact_at(&mut b, at)
                .map_err(|_| Error::TruncatedFile(self.path.clone()))?;
            codes.push((b[0] >> shift) & 3);
        }
        Ok(codes)
    }

    fn block(&self, snps: &[String], rows: &[usize]) -> Result<GenotypeBlock> {
        // Read the byte span covering the whole gene once per sample.
        let cols: Vec<usize> = snps
            .iter()
            .map(|id| self.snp_position(id).ok_or_else(|| Error::UnknownSnp(id.clone())))
            .collect::<Result<_>>()?;
        let first = cols.iter().min().map_or(0, |c| c / 4);
        let last = cols.iter().max().map_or(0, |c| c / 4);
        let mut span = vec![0u8; last - first + 1];
        let mut codes = vec![Vec::with_capacity(self.n); cols.len()];
        for i in 0..self.n {
            let at = self.data_offset + (i * self.stride + first) as u64;
            self.file
                .read_exact_at(&mut span, at)
                .map_err(|_| Error::TruncatedFile(self.path.clone()))?;
            for (k, &c) in cols.iter().enumerate() {
                codes[k].push((span[c / 4 - first] >> (2 * (c % 4))) & 3);
            }
        }
        let mut values = DMatrix::zeros(rows.len(), cols.len());
        let mut mafs = Vec::with_capacity(cols.len());
        for (k, c) in codes.iter().enumerate() {
            let col = impute_column(c, rows);
            values.column_mut(k).copy_from_slice(&col.values);
            mafs.push(col.maf);
        }
        GenotypeBlock::new(values, snps.to_vec(), mafs)
    }
}

/// Opens a genotype file, choosing the format from its first four bytes.
pub fn load_genotypes(path: &Path) -> Result<Box<dyn GenotypeSource>> {
    let mut magic = [0u8; 4];
    let mut f = open(path)?;
    let got = f.read(&mut magic).map_err(|e| Error::io(path, e))?;
    if got == 4 && &magic == GMX_MAGIC {
        Ok(Box::new(GmxGenotypes::open(path)?))
    } else {
        Ok(Box::new(TsvGenotypes::load(path)?))
    }
}

/// A variant set: ordered SNP IDs and optional per-SNP burden weights.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneDefinition {
    pub gene_id: String,
    pub snp_ids: Vec<String>,
    pub weights: Option<Vec<f64>>,
}

/// Reads `gene_id<TAB>snp,snp,...[<TAB>w,w,...]` lines. Blank lines and
/// lines starting with `#` are ignored.
pub fn load_genesets(path: &Path) -> Result<Vec<GeneDefinition>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_genesets(&text)
}

pub fn parse_genesets(text: &str) -> Result<Vec<GeneDefinition>> {
    let mut genes = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        let row = i + 1;
        let line = line.trim_end();
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if !(2..=3).contains(&fields.len()) {
            return Err(Error::Parse {
                row,
                column: "gene_id".into(),
                message: format!("expected 2 or 3 tab-separated fields, found {}", fields.len()),
            });
        }
        let gene_id = fields[0].trim().to_string();
        let snp_ids: Vec<String> = fields[1]
            .split(',')
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .collect();
        if gene_id.is_empty() || snp_ids.is_empty() {
            return Err(Error::Parse {
                row,
                column: "snps".into(),
                message: "gene needs an ID and at least one SNP".into(),
            });
        }
        if !seen.insert(gene_id.clone()) {
            return Err(Error::Parse {
                row,
                column: "gene_id".into(),
                message: format!("duplicate gene {gene_id:?}"),
            });
        }
        let weights = match fields.get(2) {
            None => None,
            Some(w) => {
                let w: Vec<f64> = w
                    .split(',')
                    .map(|v| v.trim().parse::<f64>().ok().filter(|x| x.is_finite()))
                    .collect::<Option<_>>()
                    .ok_or_else(|| Error::Parse {
                        row,
                        column: "weights".into(),
                        message: "weights must be finite numbers".into(),
                    })?;
                if w.len() != snp_ids.len() {
                    return Err(Error::Parse {
                        row,
                        column: "weights".into(),
                        message: format!("{} weights for {} SNPs", w.len(), snp_ids.len()),
                    });
                }
                Some(w)
            }
        };
        genes.push(GeneDefinition {
            gene_id,
            snp_ids,
            weights,
        });
    }
    Ok(genes)
}

pub fn write_genesets(path: &Path, genes: &[GeneDefinition]) -> Result<()> {
    let mut out = create(path)?;
    let mut write = || -> std::io::Result<()> {
        for g in genes {
            write!(out, "{}\t{}", g.gene_id, g.snp_ids.join(","))?;
            if let Some(w) = &g.weights {
                let w: Vec<String> = w.iter().map(|v| v.to_string()).collect();
                write!(out, "\t{}", w.join(","))?;
            }
            writeln!(out)?;
        }
        out.flush()
    };
    write().map_err(|e| Error::io(path, e))
}
