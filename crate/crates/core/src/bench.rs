//! Benchmark harness: split, fit, retrain on train + validation, blocked
//! rollout over the test horizon, pressure RMSE and per-step error curves.

use std::path::Path;
use std::time::Instant;

use nalgebra::DMatrix;
use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::field_data::{
    read_csv, read_snp1, split_sequences, write_snp1, FieldLayout, ScalingPolicy, SnapshotMatrix,
};
use crate::model::{fit_method, MethodFit};
use crate::opinf::LambdaScore;
use crate::pod::{fit_basis, subspace_shift, PodBasis};
use crate::solver::{generate_dataset, inlet_reynolds};

fn check_shapes(pred: &DMatrix<f64>, truth: &DMatrix<f64>, rows: Option<&[usize]>) -> Result<()> {
    if pred.shape() != truth.shape() {
        return Err(Error::Dimension(format!(
            "prediction is {:?}, truth is {:?}",
            pred.shape(),
            truth.shape()
        )));
    }
    if let Some(r) = rows {
        if let Some(bad) = r.iter().find(|&&i| i >= truth.nrows()) {
            return Err(Error::Dimension(format!("row {bad} outside 0..{}", truth.nrows())));
        }
        if r.is_empty() {
            return Err(Error::Dimension("row mask is empty".into()));
        }
    }
    Ok(())
}

fn column_sq(pred: &DMatrix<f64>, truth: &DMatrix<f64>, rows: Option<&[usize]>, k: usize) -> (f64, usize) {
    match rows {
        Some(r) => (r.iter().map(|&i| (pred[(i, k)] - truth[(i, k)]).powi(2)).sum(), r.len()),
        None => ((pred.column(k) - truth.column(k)).norm_squared(), truth.nrows()),
    }
}

/// √(mean squared difference over the selected rows and all columns).
pub fn rmse(pred: &DMatrix<f64>, truth: &DMatrix<f64>, rows: Option<&[usize]>) -> Result<f64> {
    check_shapes(pred, truth, rows)?;
    let mut sum = 0.0;
    let mut count = 0;
    for k in 0..truth.ncols() {
        let (s, n) = column_sq(pred, truth, rows, k);
        sum += s;
        count += n;
    }
    if count == 0 {
        return Err(Error::Dimension("rmse of an empty selection".into()));
    }
    Ok((sum / count as f64).sqrt())
}

/// Column-wise RMSE over the selected rows.
pub fn error_curve(pred: &DMatrix<f64>, truth: &DMatrix<f64>, rows: Option<&[usize]>) -> Result<Vec<f64>> {
    check_shapes(pred, truth, rows)?;
    Ok((0..truth.ncols())
        .map(|k| {
            let (s, n) = column_sq(pred, truth, rows, k);
            (s / n as f64).sqrt()
        })
        .collect())
}

/// Least-squares slope of `values` against `times`.
pub fn trend_slope(times: &[f64], values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let tm = times.iter().sum::<f64>() / n;
    let vm = values.iter().sum::<f64>() / n;
    let num: f64 = times.iter().zip(values).map(|(t, v)| (t - tm) * (v - vm)).sum();
    let den: f64 = times.iter().map(|t| (t - tm).powi(2)).sum();
    num / den
}

/// Reads an external forecast CSV in raw units and returns it scaled with
/// `layout`. The header must match the layout column for column.
pub fn import_external_predictions(text: &str, layout: &FieldLayout, n_test: usize) -> Result<DMatrix<f64>> {
    let csv = read_csv(text, Some(layout))?;
    if csv.raw.ncols() != n_test {
        return Err(Error::Format(format!(
            "external prediction has {} rows, the test window has {n_test}",
            csv.raw.ncols()
        )));
    }
    Ok(csv.scaled())
}

/// Reads SNP1 or CSV, chosen by the leading magic.
pub fn read_snapshots(bytes: &[u8]) -> Result<SnapshotMatrix> {
    if bytes.starts_with(b"SNP1") || !bytes.starts_with(b"t") {
        return read_snp1(bytes);
    }
    let text = std::str::from_utf8(bytes).map_err(|e| Error::Format(format!("CSV is not UTF-8: {e}")))?;
    read_csv(text, None)?.into_snapshots()
}

fn read_file(path: &str) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::Config(format!("cannot read {path}: {e}")))
}

/// Dataset as the experiment sees it: the selected features, standardised
/// with statistics from the training columns.
pub struct Dataset {
    pub data: SnapshotMatrix,
    pub source: String,
    pub reynolds: Option<f64>,
}

pub fn prepare_dataset(config: &ExperimentConfig) -> Result<Dataset> {
    let (raw, source, reynolds) = match &config.bench.data {
        Some(path) => (read_snapshots(&read_file(path)?)?, path.clone(), None),
        None => {
            let (solver, inlet) = config.solver.to_solver()?;
            let data = generate_dataset(&solver, &inlet, &config.features)?;
            (data, "solver".to_string(), Some(inlet_reynolds(&solver, &inlet)?.value))
        }
    };
    let picked = raw.select_fields(&config.features)?;
    let (n_train, _, _) = config.bench.split.counts(picked.n_times())?;
    let data = picked.rescaled(&ScalingPolicy::Standardize { fit_columns: Some(n_train) })?;
    Ok(Dataset { data, source, reynolds })
}

#[derive(Debug, Clone, Serialize)]
pub struct MethodReport {
    pub method: String,
    pub status: String,
    pub error: Option<String>,
    pub rmse_scaled: Option<f64>,
    pub rmse_pa: Option<f64>,
    pub fit_s: f64,
    pub rollout_s: f64,
    pub lambda: Option<f64>,
    pub rank: Option<usize>,
    pub basis_fingerprint: Option<String>,
    pub sweep: Vec<LambdaScore>,
    /// Pressure RMSE per test column, Pa.
    pub error_curve_pa: Vec<f64>,
    /// Spatial-mean pressure per test column, Pa.
    pub mean_p: Vec<f64>,
}

impl MethodReport {
    fn failed(method: &str, err: &Error, fit_s: f64) -> Self {
        Self {
            method: method.to_string(),
            status: "error".into(),
            error: Some(err.to_string()),
            rmse_scaled: None,
            rmse_pa: None,
            fit_s,
            rollout_s: 0.0,
            lambda: None,
            rank: None,
            basis_fingerprint: None,
            sweep: Vec::new(),
            error_curve_pa: Vec::new(),
            mean_p: Vec::new(),
        }
    }

    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct DatasetSummary {
    pub source: String,
    pub fingerprint: String,
    pub n_state: usize,
    pub n_times: usize,
    pub t0: f64,
    pub dt: f64,
    pub split: [usize; 3],
    pub inlet_reynolds: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct BasisSummary {
    pub rank: usize,
    pub energy: f64,
    /// Fingerprint of the basis fitted on the training window.
    pub fingerprint: String,
    /// Largest principal angle, degrees, to a basis of equal rank fitted on
    /// the test window.
    pub max_principal_angle_test_deg: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Report {
    pub config: ExperimentConfig,
    pub dataset: DatasetSummary,
    pub basis: Option<BasisSummary>,
    pub basis_error: Option<String>,
    pub test_times: Vec<f64>,
    pub truth_mean_p: Vec<f64>,
    pub methods: Vec<MethodReport>,
    pub notes: Vec<String>,
    /// SHA-256 of the canonical report JSON without timings.
    pub report_hash: String,
}

impl Report {
    pub fn method(&self, name: &str) -> Option<&MethodReport> {
        self.methods.iter().find(|m| m.method == name)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }

    /// `method,rmse_scaled,rmse_pa,fit_s,rollout_s,lambda,rank`
    pub fn summary_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::Format(e.to_string());
        w.write_record(["method", "rmse_scaled", "rmse_pa", "fit_s", "rollout_s", "lambda", "rank"])
            .map_err(csv_err)?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for m in &self.methods {
            w.write_record([
                m.method.clone(),
                opt(m.rmse_scaled),
                opt(m.rmse_pa),
                m.fit_s.to_string(),
                m.rollout_s.to_string(),
                opt(m.lambda),
                m.rank.map(|r| r.to_string()).unwrap_or_default(),
            ])
            .map_err(csv_err)?;
        }
        String::from_utf8(w.into_inner().map_err(|e| Error::Format(e.to_string()))?)
            .map_err(|e| Error::Format(e.to_string()))
    }

    /// `t,truth_mean_p,<method>_mean_p,...` over the test window, successful
    /// methods only.
    pub fn plot_csv(&self) -> Result<String> {
        let ok: Vec<&MethodReport> = self.methods.iter().filter(|m| m.is_ok()).collect();
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::Format(e.to_string());
        let mut header = vec!["t".to_string(), "truth_mean_p".to_string()];
        header.extend(ok.iter().map(|m| format!("{}_mean_p", m.method)));
        w.write_record(&header).map_err(csv_err)?;
        for (k, t) in self.test_times.iter().enumerate() {
            let mut rec = vec![t.to_string(), self.truth_mean_p[k].to_string()];
            rec.extend(ok.iter().map(|m| m.mean_p[k].to_string()));
            w.write_record(&rec).map_err(csv_err)?;
        }
        String::from_utf8(w.into_inner().map_err(|e| Error::Format(e.to_string()))?)
            .map_err(|e| Error::Format(e.to_string()))
    }

    /// Writes `summary.csv`, `plot.csv` and `report.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_atomic(&dir.join("summary.csv"), self.summary_csv()?.as_bytes())?;
        write_atomic(&dir.join("plot.csv"), self.plot_csv()?.as_bytes())?;
        write_atomic(&dir.join("report.json"), self.to_json()?.as_bytes())
    }
}

/// Writes through a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| Error::Config(format!("output path {} has no file name", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(name);
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn report_hash(report: &Report) -> Result<String> {
    let mut v = serde_json::to_value(report).map_err(|e| Error::Format(e.to_string()))?;
    if let Value::Object(m) = &mut v {
        m.remove("report_hash");
        if let Some(Value::Array(methods)) = m.get_mut("methods") {
            for method in methods.iter_mut().filter_map(Value::as_object_mut) {
                method.remove("fit_s");
                method.remove("rollout_s");
            }
        }
    }
    Ok(hex::encode(Sha256::digest(v.to_string().as_bytes())))
}

fn mean_rows(values: &DMatrix<f64>, rows: &[usize]) -> Vec<f64> {
    values
        .column_iter()
        .map(|c| rows.iter().map(|&i| c[i]).sum::<f64>() / rows.len() as f64)
        .collect()
}

struct Scorer<'a> {
    layout: &'a FieldLayout,
    truth: &'a DMatrix<f64>,
    truth_raw: DMatrix<f64>,
    p_rows: Vec<usize>,
}

impl Scorer<'_> {
    fn score(&self, report: &mut MethodReport, pred: &DMatrix<f64>) -> Result<()> {
        let pred_raw = self.layout.unscale(pred);
        report.rmse_scaled = Some(rmse(pred, self.truth, Some(&self.p_rows))?);
        report.rmse_pa = Some(rmse(&pred_raw, &self.truth_raw, Some(&self.p_rows))?);
        report.error_curve_pa = error_curve(&pred_raw, &self.truth_raw, Some(&self.p_rows))?;
        report.mean_p = mean_rows(&pred_raw, &self.p_rows);
        Ok(())
    }
}

#[allow(clippy::too_many_arguments)]
fn run_method(
    method: &str,
    basis: Option<&PodBasis>,
    train: &SnapshotMatrix,
    val: &SnapshotMatrix,
    history: &SnapshotMatrix,
    n_test: usize,
    config: &ExperimentConfig,
    scorer: &Scorer,
) -> MethodReport {
    let start = Instant::now();
    let fit = fit_method(method, basis, train, val, config);
    let fit_s = start.elapsed().as_secs_f64();
    let MethodFit { model, sweep } = match fit {
        Ok(f) => f,
        Err(e) => {
            let mut r = MethodReport::failed(method, &e, fit_s);
            r.rank = basis.map(PodBasis::rank);
            return r;
        }
    };
    let start = Instant::now();
    let pred = model.forecast(history, n_test, config.bench.block);
    let rollout_s = start.elapsed().as_secs_f64();
    let mut report = MethodReport {
        method: method.to_string(),
        status: "ok".into(),
        error: None,
        rmse_scaled: None,
        rmse_pa: None,
        fit_s,
        rollout_s,
        lambda: model.predictor.lambda(),
        rank: model.rank(),
        basis_fingerprint: model.basis.as_ref().map(PodBasis::fingerprint),
        sweep,
        error_curve_pa: Vec::new(),
        mean_p: Vec::new(),
    };
    if let Err(e) = pred.and_then(|p| scorer.score(&mut report, &p)) {
        report.status = "error".into();
        report.error = Some(e.to_string());
    }
    report
}

/// Runs the full protocol. Only dataset and configuration faults are
/// returned as errors; method failures become error entries in the report.
pub fn run_experiment(config: &ExperimentConfig) -> Result<Report> {
    config.validate()?;
    let Dataset { data, source, reynolds } = prepare_dataset(config)?;
    let (train, val, test) = split_sequences(&data, &config.bench.split)?;
    let history = train.concat(&val)?;
    let layout = data.layout();
    let p_rows: Vec<usize> = layout
        .field_rows("p")
        .ok_or_else(|| Error::Config("dataset has no pressure field 'p'".into()))?
        .collect();
    let truth = test.values();
    let scorer = Scorer { layout, truth, truth_raw: layout.unscale(truth), p_rows };

    let basis = fit_basis(&train).and_then(|b| config.reduction.rank_policy().apply(&b));
    let (basis, basis_summary, basis_error) = match basis {
        Ok(b) => {
            let angle = fit_basis(&test)
                .and_then(|t| t.truncated(b.rank().min(t.rank())))
                .and_then(|t| {
                    let r = t.rank();
                    subspace_shift(&b.truncated(r)?, &t)
                })
                .ok()
                .and_then(|a| a.into_iter().fold(None, |m: Option<f64>, x| Some(m.map_or(x, |m| m.max(x)))));
            let summary = BasisSummary {
                rank: b.rank(),
                energy: b.energy_captured(),
                fingerprint: b.fingerprint(),
                max_principal_angle_test_deg: angle,
            };
            (Some(b), Some(summary), None)
        }
        Err(e) => (None, None, Some(e.to_string())),
    };

    let mut methods: Vec<MethodReport> = config
        .bench
        .methods
        .iter()
        .map(|m| run_method(m, basis.as_ref(), &train, &val, &history, test.n_times(), config, &scorer))
        .collect();
    for ext in &config.bench.external {
        let start = Instant::now();
        let pred = read_file(&ext.path).and_then(|bytes| {
            let text = String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))?;
            import_external_predictions(&text, layout, test.n_times())
        });
        let mut report = MethodReport::failed(&ext.name, &Error::Data(String::new()), 0.0);
        report.fit_s = start.elapsed().as_secs_f64();
        match pred.and_then(|p| scorer.score(&mut report, &p)) {
            Ok(()) => {
                report.status = "ok".into();
                report.error = None;
            }
            Err(e) => report.error = Some(e.to_string()),
        }
        methods.push(report);
    }
    methods.sort_by(|a, b| a.method.cmp(&b.method));

    let mut notes = vec![
        "rmse_pa is the headline unit; rmse_scaled uses the train-window standardisation".to_string(),
        "plot traces are spatial means of pressure over all points".to_string(),
    ];
    if basis.is_none() {
        notes.push("no POD basis: persistence and mean act in full space".to_string());
    }
    if config.bench.data.is_none() {
        notes.push(
            "inlet amplitude, period and outlet pressure level are assumed values, not measured ones"
                .to_string(),
        );
    }
    notes.push(if config.opinf.terms.input {
        "opinf input mode: external, inlet U^z drives the B term".to_string()
    } else {
        "opinf input mode: state, inlet U^z travels inside the reduced state".to_string()
    });

    let n = [train.n_times(), val.n_times(), test.n_times()];
    let mut report = Report {
        config: config.clone(),
        dataset: DatasetSummary {
            source,
            fingerprint: hex::encode(Sha256::digest(write_snp1(&data)?)),
            n_state: data.n_state(),
            n_times: data.n_times(),
            t0: data.t0(),
            dt: data.dt(),
            split: n,
            inlet_reynolds: reynolds,
        },
        basis: basis_summary,
        basis_error,
        test_times: test.times(),
        truth_mean_p: mean_rows(&scorer.truth_raw, &scorer.p_rows),
        methods,
        notes,
        report_hash: String::new(),
    };
    report.report_hash = report_hash(&report)?;
    Ok(report)
}
