//! Additive-coded genotype data with optional phenotype and covariates.
//!
//! Genotypes are the count of the coded allele: `0`, `1` or `2`, with `None`
//! marking a missing call. Storage is row-major, one row per sample.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// How missing genotype calls are handled before score testing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MissingGenotypes {
    /// Replace each missing call by the marker's observed mean.
    #[default]
    MeanImpute,
    /// Drop every sample that has at least one missing call.
    DropRows,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenotypeDataset {
    n_samples: usize,
    n_markers: usize,
    calls: Vec<Option<u8>>,
    /// Phenotype, one value per sample.
    pub phenotype: Option<Vec<f64>>,
    /// Environmental covariates, n × d, first column all ones.
    pub covariates: DMatrix<f64>,
    pub marker_ids: Vec<String>,
    pub sample_ids: Vec<String>,
}

impl GenotypeDataset {
    /// Build from row-major calls. Covariates default to an intercept column
    /// and identifiers default to `m1..` / `s1..`.
    pub fn new(n_samples: usize, n_markers: usize, calls: Vec<Option<u8>>) -> Result<Self> {
        if calls.len() != n_samples * n_markers {
            return Err(Error::Data(format!(
                "expected {} genotype calls for {n_samples} samples x {n_markers} markers, got {}",
                n_samples * n_markers,
                calls.len()
            )));
        }
        if let Some(pos) = calls.iter().position(|c| matches!(c, Some(v) if *v > 2)) {
            return Err(Error::Parse {
                row: pos / n_markers + 1,
                col: pos % n_markers + 1,
                msg: format!("genotype {} is not one of 0, 1, 2", calls[pos].unwrap()),
            });
        }
        Ok(Self {
            n_samples,
            n_markers,
            calls,
            phenotype: None,
            covariates: DMatrix::from_element(n_samples, 1, 1.0),
            marker_ids: (1..=n_markers).map(|j| format!("m{j}")).collect(),
            sample_ids: (1..=n_samples).map(|i| format!("s{i}")).collect(),
        })
    }

    /// Complete data from a dense real matrix of 0/1/2 codes.
    pub fn from_dense(genotypes: &DMatrix<f64>) -> Result<Self> {
        let (n, m) = genotypes.shape();
        let mut calls = Vec::with_capacity(n * m);
        for i in 0..n {
            for j in 0..m {
                let v = genotypes[(i, j)];
                if v != 0.0 && v != 1.0 && v != 2.0 {
                    return Err(Error::Parse {
                        row: i + 1,
                        col: j + 1,
                        msg: format!("genotype {v} is not one of 0, 1, 2"),
                    });
                }
                calls.push(Some(v as u8));
            }
        }
        Self::new(n, m, calls)
    }

    pub fn with_phenotype(mut self, phenotype: Vec<f64>) -> Result<Self> {
        if phenotype.len() != self.n_samples {
            return Err(Error::Data(format!(
                "phenotype has {} values for {} samples",
                phenotype.len(),
                self.n_samples
            )));
        }
        self.phenotype = Some(phenotype);
        Ok(self)
    }

    /// Set environmental covariates. An intercept column is prepended unless
    /// the first column is already all ones.
    pub fn with_covariates(mut self, covariates: DMatrix<f64>) -> Result<Self> {
        if covariates.nrows() != self.n_samples {
            return Err(Error::Data(format!(
                "covariates have {} rows for {} samples",
                covariates.nrows(),
                self.n_samples
            )));
        }
        let has_intercept =
            covariates.ncols() > 0 && covariates.column(0).iter().all(|&v| v == 1.0);
        self.covariates = if has_intercept {
            covariates
        } else {
            let mut full = DMatrix::from_element(self.n_samples, covariates.ncols() + 1, 1.0);
            full.columns_mut(1, covariates.ncols()).copy_from(&covariates);
            full
        };
        Ok(self)
    }

    pub fn with_ids(mut self, sample_ids: Vec<String>, marker_ids: Vec<String>) -> Result<Self> {
        if sample_ids.len() != self.n_samples || marker_ids.len() != self.n_markers {
            return Err(Error::Data("identifier count does not match data shape".into()));
        }
        self.sample_ids = sample_ids;
        self.marker_ids = marker_ids;
        Ok(self)
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn n_markers(&self) -> usize {
        self.n_markers
    }

    #[inline]
    pub fn get(&self, sample: usize, marker: usize) -> Option<u8> {
        self.calls[sample * self.n_markers + marker]
    }

    pub fn calls(&self) -> &[Option<u8>] {
        &self.calls
    }

    pub fn has_missing(&self) -> bool {
        self.calls.iter().any(Option::is_none)
    }

    /// Observed values of one marker column, `None` where missing.
    pub fn marker_column(&self, marker: usize) -> impl Iterator<Item = Option<f64>> + '_ {
        (0..self.n_samples).map(move |i| self.get(i, marker).map(f64::from))
    }

    /// Dense n × m genotype matrix; fails on the first missing call.
    pub fn dense_complete(&self) -> Result<DMatrix<f64>> {
        let mut out = DMatrix::zeros(self.n_samples, self.n_markers);
        for i in 0..self.n_samples {
            for j in 0..self.n_markers {
                out[(i, j)] = match self.get(i, j) {
                    Some(v) => f64::from(v),
                    None => return Err(Error::MissingValue { row: i + 1, col: j + 1 }),
                };
            }
        }
        Ok(out)
    }

    /// Dense genotype matrix after applying a missing-data policy, together
    /// with the sample rows it covers.
    pub fn dense_with_policy(&self, policy: MissingGenotypes) -> Result<(DMatrix<f64>, Vec<usize>)> {
        match policy {
            MissingGenotypes::MeanImpute => {
                let mut dense = DMatrix::zeros(self.n_samples, self.n_markers);
                for j in 0..self.n_markers {
                    let (sum, count) = self
                        .marker_column(j)
                        .flatten()
                        .fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
                    if count == 0 {
                        return Err(Error::Data(format!(
                            "marker {} has no observed genotypes",
                            self.marker_ids[j]
                        )));
                    }
                    let mean = sum / count as f64;
                    for (i, v) in self.marker_column(j).enumerate() {
                        dense[(i, j)] = v.unwrap_or(mean);
                    }
                }
                Ok((dense, (0..self.n_samples).collect()))
            }
            MissingGenotypes::DropRows => {
                let keep: Vec<usize> = (0..self.n_samples)
                    .filter(|&i| (0..self.n_markers).all(|j| self.get(i, j).is_some()))
                    .collect();
                let dense = self.select_samples(&keep)?.dense_complete()?;
                Ok((dense, keep))
            }
        }
    }

    /// Restrict to a subset of samples, keeping all attached data aligned.
    pub fn select_samples(&self, rows: &[usize]) -> Result<Self> {
        let mut calls = Vec::with_capacity(rows.len() * self.n_markers);
        for &i in rows {
            calls.extend_from_slice(&self.calls[i * self.n_markers..(i + 1) * self.n_markers]);
        }
        let mut out = Self::new(rows.len(), self.n_markers, calls)?;
        out.phenotype = self.phenotype.as_ref().map(|y| rows.iter().map(|&i| y[i]).collect());
        out.covariates = self.covariates.select_rows(rows);
        out.marker_ids = self.marker_ids.clone();
        out.sample_ids = rows.iter().map(|&i| self.sample_ids[i].clone()).collect();
        Ok(out)
    }
}
