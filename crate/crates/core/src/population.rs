//! Finite population frames and their delimited-text ingestion.

use std::io::Read;
use std::path::Path;

use ndarray::{Array2, ArrayView1};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// A finite population `U` of `N` units: an `N × p` predictor matrix, any number of
/// named study variables and one identifier per unit.
#[derive(Debug, Clone)]
pub struct PopulationFrame<T> {
    predictor_names: Vec<String>,
    predictors: Array2<T>,
    study_vars: Vec<(String, Vec<T>)>,
    unit_ids: Vec<String>,
}

impl<T: Scalar> PopulationFrame<T> {
    pub fn new(
        predictor_names: Vec<String>,
        predictors: Array2<T>,
        study_vars: Vec<(String, Vec<T>)>,
        unit_ids: Option<Vec<String>>,
    ) -> Result<Self> {
        let (n, p) = predictors.dim();
        if n == 0 {
            return Err(Error::Data("population has no units".into()));
        }
        if p == 0 {
            return Err(Error::Data("population has no predictors".into()));
        }
        if predictor_names.len() != p {
            return Err(Error::LengthMismatch {
                what: "predictor names",
                got: predictor_names.len(),
                expected: p,
            });
        }
        if let Some(bad) = predictors.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!(
                "non-finite predictor value for unit {} ({})",
                bad / p,
                predictor_names[bad % p]
            )));
        }
        for (name, values) in &study_vars {
            if values.len() != n {
                return Err(Error::Data(format!(
                    "study variable {name} has {} values for {n} units",
                    values.len()
                )));
            }
        }
        let unit_ids = match unit_ids {
            Some(ids) if ids.len() != n => {
                return Err(Error::LengthMismatch {
                    what: "unit ids",
                    got: ids.len(),
                    expected: n,
                })
            }
            Some(ids) => ids,
            None => (1..=n).map(|i| i.to_string()).collect(),
        };
        let predictors = if predictors.is_standard_layout() {
            predictors
        } else {
            predictors.as_standard_layout().into_owned()
        };
        Ok(Self {
            predictor_names,
            predictors,
            study_vars,
            unit_ids,
        })
    }

    pub fn n_units(&self) -> usize {
        self.predictors.nrows()
    }

    pub fn n_predictors(&self) -> usize {
        self.predictors.ncols()
    }

    pub fn predictors(&self) -> &Array2<T> {
        &self.predictors
    }

    pub fn predictor_names(&self) -> &[String] {
        &self.predictor_names
    }

    pub fn unit_ids(&self) -> &[String] {
        &self.unit_ids
    }

    pub fn predictor_index(&self, name: &str) -> Option<usize> {
        self.predictor_names.iter().position(|n| n == name)
    }

    pub fn predictor(&self, name: &str) -> Option<ArrayView1<'_, T>> {
        self.predictor_index(name).map(|j| self.predictors.column(j))
    }

    pub fn study(&self, name: &str) -> Option<&[T]> {
        self.study_vars
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_slice())
    }

    pub fn study_names(&self) -> impl Iterator<Item = &str> {
        self.study_vars.iter().map(|(n, _)| n.as_str())
    }

    /// Adds (or replaces) a study variable.
    pub fn set_study(&mut self, name: &str, values: Vec<T>) -> Result<()> {
        if values.len() != self.n_units() {
            return Err(Error::LengthMismatch {
                what: "study variable",
                got: values.len(),
                expected: self.n_units(),
            });
        }
        match self.study_vars.iter_mut().find(|(n, _)| n == name) {
            Some(slot) => slot.1 = values,
            None => self.study_vars.push((name.to_string(), values)),
        }
        Ok(())
    }

    /// The total `t_y` of a study variable.
    pub fn total(&self, name: &str) -> Option<T> {
        self.study(name)
            .map(|v| crate::scalar::compensated_sum(v.iter().copied()))
    }

    /// Copies the named predictor columns, in the order given, into a new matrix.
    pub fn select_predictors<S: AsRef<str>>(&self, names: &[S]) -> Result<Array2<T>> {
        let idx = names
            .iter()
            .map(|n| {
                self.predictor_index(n.as_ref())
                    .ok_or_else(|| Error::Data(format!("unknown predictor {}", n.as_ref())))
            })
            .collect::<Result<Vec<_>>>()?;
        let n = self.n_units();
        Ok(Array2::from_shape_fn((n, idx.len()), |(i, j)| {
            self.predictors[[i, idx[j]]]
        }))
    }

    /// Reads a population from delimited text with a header row.
    pub fn from_csv_path(path: impl AsRef<Path>, spec: &CsvSpec) -> Result<Self> {
        let file = std::fs::File::open(path.as_ref()).map_err(|e| {
            Error::Data(format!("cannot open {}: {e}", path.as_ref().display()))
        })?;
        Self::from_csv_reader(file, spec)
    }

    pub fn from_csv_reader<R: Read>(reader: R, spec: &CsvSpec) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .delimiter(spec.delimiter)
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .from_reader(reader);
        let headers: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
        let col = |name: &str| {
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::Data(format!("column {name} not found in header")))
        };
        let id_col = spec.id_column.as_deref().map(col).transpose()?;
        let study_cols = spec
            .study
            .iter()
            .map(|s| col(s))
            .collect::<Result<Vec<_>>>()?;
        let predictor_cols: Vec<usize> = match &spec.predictors {
            Some(names) => names.iter().map(|s| col(s)).collect::<Result<_>>()?,
            None => (0..headers.len())
                .filter(|c| Some(*c) != id_col && !study_cols.contains(c))
                .collect(),
        };

        let mut ids = Vec::new();
        let mut x = Vec::new();
        let mut ys: Vec<Vec<T>> = vec![Vec::new(); study_cols.len()];
        for (row, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let parse = |c: usize| -> Result<T> {
                let raw = rec.get(c).unwrap_or("");
                raw.parse::<f64>().map(T::of).map_err(|_| {
                    Error::Data(format!(
                        "row {}: column {} is not numeric ({raw:?})",
                        row + 2,
                        headers[c]
                    ))
                })
            };
            for &c in &predictor_cols {
                x.push(parse(c)?);
            }
            for (slot, &c) in ys.iter_mut().zip(&study_cols) {
                slot.push(parse(c)?);
            }
            if let Some(c) = id_col {
                ids.push(rec.get(c).unwrap_or("").to_string());
            }
        }
        let n = ids.len().max(x.len() / predictor_cols.len().max(1));
        let predictors = Array2::from_shape_vec((n, predictor_cols.len()), x)
            .map_err(|e| Error::Data(e.to_string()))?;
        let names = predictor_cols.iter().map(|&c| headers[c].clone()).collect();
        let study = spec.study.iter().cloned().zip(ys).collect();
        Self::new(names, predictors, study, id_col.map(|_| ids))
    }
}

/// Column layout of a delimited population file.
#[derive(Debug, Clone)]
pub struct CsvSpec {
    pub delimiter: u8,
    /// Predictor columns; `None` takes every column that is neither a study variable nor the id.
    pub predictors: Option<Vec<String>>,
    pub study: Vec<String>,
    pub id_column: Option<String>,
}

impl Default for CsvSpec {
    fn default() -> Self {
        Self {
            delimiter: b',',
            predictors: None,
            study: Vec::new(),
            id_column: None,
        }
    }
}
