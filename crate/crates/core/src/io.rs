//! Reading datasets and writing results.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::BootstrapReport;
use crate::mc::McSummary;
use crate::model::{CureFit, Dataset, StepFunction, SurvivalRecord};
use crate::simex::{AveragedFit, SimexResult};

/// Reads a CSV file with a header row containing `time` and `status`
/// columns; every other column is a covariate, in file order.
pub fn ingest_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    let file = std::fs::File::open(path)?;
    read_csv(file)
}

pub fn read_csv<R: Read>(input: R) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(input);
    let header = reader.headers()?.clone();
    let find = |name: &str| header.iter().position(|h| h.eq_ignore_ascii_case(name));
    let (Some(ti), Some(si)) = (find("time"), find("status")) else {
        return Err(Error::Parse {
            line: 1,
            message: "header must contain `time` and `status` columns".into(),
        });
    };
    let cov_idx: Vec<usize> = (0..header.len()).filter(|&i| i != ti && i != si).collect();
    let names: Vec<String> = cov_idx.iter().map(|&i| header[i].to_string()).collect();
    let mut records = Vec::new();
    for row in reader.records() {
        let row = row?;
        let line = row.position().map_or(0, |p| p.line() as usize);
        let fail = |message: String| Error::Parse { line, message };
        if row.len() != header.len() {
            return Err(fail(format!(
                "expected {} fields, found {}",
                header.len(),
                row.len()
            )));
        }
        let number = |i: usize| -> Result<f64> {
            let cell = &row[i];
            if cell.is_empty() {
                return Err(fail(format!("missing value in column `{}`", &header[i])));
            }
            let v: f64 = cell.parse().map_err(|_| {
                fail(format!(
                    "`{cell}` in column `{}` is not a number",
                    &header[i]
                ))
            })?;
            if !v.is_finite() {
                return Err(fail(format!("non-finite value in column `{}`", &header[i])));
            }
            Ok(v)
        };
        let time = number(ti)?;
        let status = number(si)?;
        let event = if status == 0.0 {
            false
        } else if status == 1.0 {
            true
        } else {
            return Err(fail(format!("status must be 0 or 1, found {status}")));
        };
        let cov = cov_idx
            .iter()
            .map(|&i| number(i))
            .collect::<Result<Vec<_>>>()?;
        let rec = SurvivalRecord::new(time, event, cov).map_err(|e| fail(e.to_string()))?;
        records.push(rec);
    }
    if records.is_empty() {
        return Err(Error::Parse {
            line: 1,
            message: "no data rows".into(),
        });
    }
    Dataset::new(records, names)
}

/// Subtracts the column mean from each listed covariate. Returns the
/// centered dataset and the means that were removed.
pub fn center_columns(data: &Dataset, columns: &[usize]) -> Result<(Dataset, Vec<f64>)> {
    if columns.iter().any(|&j| j >= data.dim()) {
        return Err(Error::invalid("covariate index out of range"));
    }
    let means: Vec<f64> = columns
        .iter()
        .map(|&j| data.column(j).iter().sum::<f64>() / data.len() as f64)
        .collect();
    let covs = data
        .records()
        .iter()
        .map(|r| {
            let mut c = r.covariates.clone();
            for (&j, m) in columns.iter().zip(&means) {
                c[j] -= m;
            }
            c
        })
        .collect();
    Ok((data.with_covariates(covs), means))
}

/// Writes a dataset in the format [`read_csv`] accepts. Values are printed
/// with full round-trip precision.
pub fn write_csv<W: Write>(data: &Dataset, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["time".to_string(), "status".to_string()];
    header.extend(data.column_names().iter().cloned());
    w.write_record(&header)?;
    for r in data.records() {
        let mut row = vec![r.time.to_string(), (r.event as u8).to_string()];
        row.extend(r.covariates.iter().map(|x| x.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselinePoint {
    pub t: f64,
    pub value: f64,
}

fn points(f: &StepFunction) -> Vec<BaselinePoint> {
    f.times()
        .iter()
        .zip(f.values())
        .map(|(&t, &value)| BaselinePoint { t, value })
        .collect()
}

/// JSON form of a single fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub baseline: Vec<BaselinePoint>,
    pub converged: bool,
    /// Every incidence linear predictor ran off to separation.
    pub incidence_diverged: bool,
    pub iterations: usize,
    pub loglik: f64,
    pub config: serde_json::Value,
}

impl FitReport {
    pub fn new(fit: &CureFit, config: serde_json::Value) -> FitReport {
        FitReport {
            gamma: fit.gamma.clone(),
            beta: fit.beta.clone(),
            baseline: points(&fit.baseline),
            converged: fit.converged,
            incidence_diverged: fit.incidence_diverged,
            iterations: fit.iterations,
            loglik: fit.loglik,
            config,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelReport {
    pub lambda: f64,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub baseline: Vec<BaselinePoint>,
    pub fits: usize,
    pub failures: usize,
}

/// JSON form of a SIMEX run: the corrected fit plus per-level averages and
/// extrapolant coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimexReport {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub baseline: Vec<BaselinePoint>,
    pub baseline_was_monotone: bool,
    pub levels: Vec<LevelReport>,
    pub extrapolant_coefficients: Vec<Vec<f64>>,
    pub config: serde_json::Value,
}

impl SimexReport {
    pub fn new(r: &SimexResult, config: serde_json::Value) -> SimexReport {
        let level = |(a, &failures): (&AveragedFit, &usize)| LevelReport {
            lambda: a.lambda,
            gamma: a.gamma_bar.clone(),
            beta: a.beta_bar.clone(),
            baseline: points(&a.lambda_bar),
            fits: a.fits,
            failures,
        };
        SimexReport {
            gamma: r.gamma_simex.clone(),
            beta: r.beta_simex.clone(),
            baseline: points(&r.baseline_simex),
            baseline_was_monotone: r.baseline_was_monotone,
            levels: r.per_lambda.iter().zip(&r.failures).map(level).collect(),
            extrapolant_coefficients: r.extrap_coeffs.clone(),
            config,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapOutput {
    pub parameters: Vec<String>,
    #[serde(flatten)]
    pub report: BootstrapReport,
    pub config: serde_json::Value,
}

pub fn write_json<T: Serialize, W: Write>(value: &T, mut out: W) -> Result<()> {
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

/// One row of a Monte Carlo results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McRow {
    pub parameter: String,
    pub method: String,
    pub bias_x100: f64,
    pub var_x100: f64,
    pub mse_x100: f64,
}

pub fn mc_rows(method: &str, summary: &McSummary) -> Vec<McRow> {
    summary
        .parameters
        .iter()
        .map(|p| McRow {
            parameter: p.parameter.clone(),
            method: method.to_string(),
            bias_x100: 100.0 * p.bias,
            var_x100: 100.0 * p.variance,
            mse_x100: 100.0 * p.mse,
        })
        .collect()
}

/// CSV with columns `parameter, method, bias_x100, var_x100, mse_x100`.
pub fn write_mc_csv<W: Write>(rows: &[McRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_mc_csv<R: Read>(input: R) -> Result<Vec<McRow>> {
    let mut r = csv::Reader::from_reader(input);
    r.deserialize()
        .map(|row| row.map_err(Error::from))
        .collect()
}

/// Two-column `t, S` CSV of a survival curve, starting at `(0, 1)`.
pub fn write_km_csv<W: Write>(km: &StepFunction, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["t", "S"])?;
    w.write_record(["0", &km.value_before_first().to_string()])?;
    for (t, s) in km.times().iter().zip(km.values()) {
        w.write_record([t.to_string(), s.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_rows() {
        let text = "time,status,age,stage\n1.5,1,60,2\n2.0,0,55,1\n3.25,1,70,3\n";
        let d = read_csv(text.as_bytes()).unwrap();
        assert_eq!(d.len(), 3);
        assert_eq!(d.column_names(), &["age".to_string(), "stage".to_string()]);
        assert_eq!(d.events(), vec![true, false, true]);
        assert_eq!(d.column(0), vec![60.0, 55.0, 70.0]);
    }

    #[test]
    fn bad_status_names_its_line() {
        let text = "time,status,x\n1,1,0\n2,0,0\n3,2,0\n";
        match read_csv(text.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_and_nan_cells() {
        for text in [
            "time,status,x\n1,1,\n",
            "time,status,x\n1,1,NaN\n",
            "time,status,x\n1,1,abc\n",
        ] {
            match read_csv(text.as_bytes()) {
                Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
                other => panic!("unexpected {other:?}"),
            }
        }
        assert!(matches!(
            read_csv("a,b\n1,2\n".as_bytes()),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn centering() {
        let d = Dataset::from_columns(
            &[1.0, 2.0],
            &[true, false],
            &[vec![1.0, 3.0], vec![5.0, 5.0]],
        )
        .unwrap();
        let (c, m) = center_columns(&d, &[0]).unwrap();
        assert_eq!(m, vec![2.0]);
        assert_eq!(c.column(0), vec![-1.0, 1.0]);
        assert_eq!(c.column(1), vec![5.0, 5.0]);
    }

    #[test]
    fn dataset_round_trip() {
        let d = Dataset::from_columns(
            &[0.1 + 0.2, 2.0],
            &[true, false],
            &[vec![1.0 / 3.0, -7e-300]],
        )
        .unwrap();
        let mut buf = Vec::new();
        write_csv(&d, &mut buf).unwrap();
        assert_eq!(read_csv(buf.as_slice()).unwrap(), d);
    }
}
