//! CSV tables and the mapping from columns to predictors and random effects.

use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::path::Path;

use gpboost_core::covmodel::{ComponentData, Locations};
use gpboost_core::tree::Features;

use crate::config::{DataConfig, RandomEffectSpec};
use crate::error::CliError;

/// A CSV file held column by column as raw strings.
#[derive(Clone, Debug)]
pub struct Table {
    pub headers: Vec<String>,
    columns: Vec<Vec<String>>,
    rows: usize,
}

impl Table {
    pub fn read(path: &Path) -> Result<Self, CliError> {
        let file = std::fs::File::open(path).map_err(|e| CliError::Data(format!("cannot open {}: {e}", path.display())))?;
        Self::from_reader(file)
    }

    pub fn from_reader<R: std::io::Read>(reader: R) -> Result<Self, CliError> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
        let headers: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
        let mut seen = BTreeSet::new();
        for h in &headers {
            if !seen.insert(h) {
                return Err(CliError::Data(format!("duplicate column '{h}'")));
            }
        }
        let mut columns = vec![Vec::new(); headers.len()];
        let mut rows = 0;
        for rec in rdr.records() {
            let rec = rec?;
            for (c, v) in columns.iter_mut().zip(rec.iter()) {
                c.push(v.to_string());
            }
            rows += 1;
        }
        Ok(Self { headers, columns, rows })
    }

    pub fn n(&self) -> usize {
        self.rows
    }

    pub fn column(&self, name: &str) -> Result<&[String], CliError> {
        self.headers
            .iter()
            .position(|h| h == name)
            .map(|i| self.columns[i].as_slice())
            .ok_or_else(|| CliError::Data(format!("missing column '{name}'")))
    }

    /// Numeric column; empty, `NA` and `NaN` cells are missing.
    pub fn numeric(&self, name: &str) -> Result<Vec<f64>, CliError> {
        self.column(name)?
            .iter()
            .enumerate()
            .map(|(i, v)| parse_number(v).ok_or_else(|| {
                CliError::Data(format!("column '{name}', row {}: non-numeric value '{v}'", i + 1))
            }))
            .collect()
    }

    fn missing(&self, names: &[&str]) -> Vec<String> {
        names
            .iter()
            .filter(|n| !self.headers.iter().any(|h| h == *n))
            .map(|n| n.to_string())
            .collect()
    }
}

fn parse_number(v: &str) -> Option<f64> {
    match v {
        "" | "NA" | "NaN" | "nan" | "NAN" => Some(f64::NAN),
        _ => v.parse::<f64>().ok(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum PredictorColumn {
    Numeric { name: String },
    /// One dummy column per level, in this order.
    Categorical { name: String, levels: Vec<String> },
}

/// Column layout fixed at training time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    pub response: String,
    pub predictors: Vec<PredictorColumn>,
    pub random_effects: Vec<RandomEffectSpec>,
}

impl Schema {
    pub fn from_training(cfg: &DataConfig, effects: &[RandomEffectSpec], table: &Table) -> Result<Self, CliError> {
        let used: BTreeSet<&str> = effects
            .iter()
            .flat_map(RandomEffectSpec::columns)
            .chain(std::iter::once(cfg.response.as_str()))
            .collect();
        let names: Vec<String> = if cfg.predictors.is_empty() {
            table.headers.iter().filter(|h| !used.contains(h.as_str())).cloned().collect()
        } else {
            cfg.predictors.clone()
        };
        for c in &cfg.categorical {
            if !names.contains(c) {
                return Err(CliError::Usage(format!("categorical column '{c}' is not a predictor")));
            }
        }
        let mut wanted: Vec<&str> = names.iter().map(String::as_str).collect();
        wanted.extend(used.iter());
        let missing = table.missing(&wanted);
        if !missing.is_empty() {
            return Err(CliError::Data(format!("missing columns: {}", missing.join(", "))));
        }
        let mut predictors = Vec::with_capacity(names.len());
        for name in names {
            if cfg.categorical.contains(&name) {
                let levels: BTreeSet<&String> = table.column(&name)?.iter().filter(|v| !v.is_empty()).collect();
                predictors.push(PredictorColumn::Categorical {
                    levels: levels.into_iter().cloned().collect(),
                    name,
                });
            } else {
                predictors.push(PredictorColumn::Numeric { name });
            }
        }
        Ok(Self {
            response: cfg.response.clone(),
            predictors,
            random_effects: effects.to_vec(),
        })
    }

    /// Columns needed for prediction (everything but the response).
    pub fn required_columns(&self) -> Vec<&str> {
        let mut out: Vec<&str> = self
            .predictors
            .iter()
            .map(|p| match p {
                PredictorColumn::Numeric { name } | PredictorColumn::Categorical { name, .. } => name.as_str(),
            })
            .collect();
        out.extend(self.random_effects.iter().flat_map(RandomEffectSpec::columns));
        out
    }

    pub fn check_columns(&self, table: &Table) -> Result<(), CliError> {
        let missing = table.missing(&self.required_columns());
        if missing.is_empty() {
            Ok(())
        } else {
            Err(CliError::Data(format!("schema mismatch, missing columns: {}", missing.join(", "))))
        }
    }

    pub fn feature_names(&self) -> Vec<String> {
        self.predictors
            .iter()
            .flat_map(|p| match p {
                PredictorColumn::Numeric { name } => vec![name.clone()],
                PredictorColumn::Categorical { name, levels } => levels.iter().map(|l| format!("{name}={l}")).collect(),
            })
            .collect()
    }

    pub fn features(&self, table: &Table) -> Result<Features, CliError> {
        self.check_columns(table)?;
        let mut cols = Vec::new();
        for p in &self.predictors {
            match p {
                PredictorColumn::Numeric { name } => cols.push(table.numeric(name)?),
                PredictorColumn::Categorical { name, levels } => {
                    let raw = table.column(name)?;
                    for l in levels {
                        cols.push(raw.iter().map(|v| if v == l { 1.0 } else { 0.0 }).collect());
                    }
                }
            }
        }
        Ok(Features::from_columns(table.n(), cols)?)
    }

    pub fn response(&self, table: &Table) -> Result<Vec<f64>, CliError> {
        let y = table.numeric(&self.response)?;
        if let Some(i) = y.iter().position(|v| !v.is_finite()) {
            return Err(CliError::Data(format!("response '{}' is missing or non-finite in row {}", self.response, i + 1)));
        }
        Ok(y)
    }

    pub fn components(&self, table: &Table) -> Result<Vec<ComponentData>, CliError> {
        self.check_columns(table)?;
        let finite = |name: &str| -> Result<Vec<f64>, CliError> {
            let v = table.numeric(name)?;
            if v.iter().any(|x| !x.is_finite()) {
                return Err(CliError::Data(format!("column '{name}' must not have missing values")));
            }
            Ok(v)
        };
        self.random_effects
            .iter()
            .map(|re| match re {
                RandomEffectSpec::Grouped { column, slope } => {
                    let labels = table.column(column)?.to_vec();
                    if labels.iter().any(String::is_empty) {
                        return Err(CliError::Data(format!("group column '{column}' has empty labels")));
                    }
                    Ok(ComponentData::Grouped {
                        labels,
                        covariate: slope.as_deref().map(finite).transpose()?,
                    })
                }
                RandomEffectSpec::Gp { coordinates, kernel, slope } => {
                    let cols: Vec<Vec<f64>> = coordinates.iter().map(|c| finite(c)).collect::<Result<_, _>>()?;
                    let coords = (0..table.n()).flat_map(|i| cols.iter().map(move |c| c[i])).collect();
                    Ok(ComponentData::Gp {
                        locations: Locations::new(coordinates.len(), coords)?,
                        kernel: *kernel,
                        covariate: slope.as_deref().map(finite).transpose()?,
                    })
                }
            })
            .collect()
    }
}

/// Writes columns of numbers under the given headers.
pub fn write_columns(path: &Path, headers: &[String], columns: &[Vec<f64>]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(headers)?;
    let n = columns.first().map_or(0, Vec::len);
    for i in 0..n {
        w.write_record(columns.iter().map(|c| fmt_f64(c[i])))?;
    }
    w.flush()?;
    Ok(())
}

/// Shortest decimal that round-trips.
pub fn fmt_f64(v: f64) -> String {
    if v.is_nan() {
        "NaN".into()
    } else {
        format!("{v}")
    }
}
