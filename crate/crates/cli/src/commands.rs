//! The `fit`, `predict`, `compare` and `gram` commands.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use iprior_core::applications::{
    build_classifier, classification_metrics, compare_models, format_table, write_comparison, Classifier,
    ModelReport, SavedModel,
};
use iprior_core::config::{RunConfig, Task};
use iprior_core::data::{load_covariates, load_dataset, load_labels, Covariates, Dataset, Schema};
use iprior_core::estimate::{em_fit, profile_hyperparameter, standard_errors, write_trace, StandardErrors};
use iprior_core::inference::{FitStatus, FittedModel};
use iprior_core::kernels::gram;
use iprior_core::Error;

use crate::exit::{classify, CliError, Code, Stage};
use crate::output::{ensure_dir, flag, num, opt, write_atomic, write_csv_file};

type CliResult<T> = Result<T, CliError>;

/// Training and optional held-out data for one configuration.
pub enum Prepared {
    Regression {
        train: Dataset,
        test: Option<Dataset>,
    },
    Classification {
        train: Covariates,
        labels: Vec<String>,
        test: Option<(Covariates, Vec<String>)>,
    },
}

pub enum Outcome {
    Regression(FittedModel),
    Classifier(Classifier),
}

impl Outcome {
    pub fn model(&self) -> &FittedModel {
        match self {
            Outcome::Regression(m) => m,
            Outcome::Classifier(c) => &c.model,
        }
    }
}

pub struct FitRun {
    pub outcome: Outcome,
    pub report: ModelReport,
    pub standard_errors: StandardErrors,
    pub profile: Option<(f64, Vec<(f64, f64)>)>,
    /// Training rows for `fitted.csv`.
    pub prepared: Prepared,
}

pub fn load_config(path: &Path) -> CliResult<RunConfig> {
    RunConfig::load(path).map_err(|e| classify(Stage::TrainData, e))
}

fn check_split(n: usize, k: usize) -> CliResult<()> {
    if k < 2 || k >= n {
        return Err(CliError::new(
            Code::Config,
            format!("train_rows = {k} must leave at least 2 training rows and 1 test row out of {n}"),
        ));
    }
    Ok(())
}

pub fn prepare(cfg: &RunConfig) -> CliResult<Prepared> {
    let schema = cfg.model_schema();
    let data = |e| classify(Stage::TrainData, e);
    match cfg.task {
        Task::Regression => {
            let full = load_dataset(&cfg.train, &schema, &cfg.response).map_err(data)?;
            let (train, mut test) = match cfg.train_rows {
                Some(k) => {
                    check_split(full.n(), k)?;
                    let head: Vec<usize> = (0..k).collect();
                    let tail: Vec<usize> = (k..full.n()).collect();
                    (
                        full.select(&head).map_err(data)?,
                        Some(full.select(&tail).map_err(data)?),
                    )
                }
                None => (full, None),
            };
            if let Some(p) = &cfg.test {
                test = Some(load_dataset(p, &schema, &cfg.response).map_err(data)?);
            }
            Ok(Prepared::Regression { train, test })
        }
        Task::Classification => {
            let feats = load_covariates(&cfg.train, &schema).map_err(data)?;
            let labels = load_labels(&cfg.train, &cfg.response).map_err(data)?;
            let (train, labels, mut test) = match cfg.train_rows {
                Some(k) => {
                    check_split(feats.n, k)?;
                    let head: Vec<usize> = (0..k).collect();
                    let tail: Vec<usize> = (k..feats.n).collect();
                    let test = (feats.select(&tail), labels[k..].to_vec());
                    (feats.select(&head), labels[..k].to_vec(), Some(test))
                }
                None => (feats, labels, None),
            };
            if let Some(p) = &cfg.test {
                let f = load_covariates(p, &schema).map_err(data)?;
                let l = load_labels(p, &cfg.response).map_err(data)?;
                test = Some((f, l));
            }
            Ok(Prepared::Classification { train, labels, test })
        }
    }
}

fn rmse(a: &[f64], b: &[f64]) -> f64 {
    let ss: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    (ss / a.len().max(1) as f64).sqrt()
}

pub fn fit(cfg: &RunConfig, prepared: Prepared) -> CliResult<FitRun> {
    let fit_err = |e| classify(Stage::Fit, e);
    let mut profile = None;
    let outcome = match &prepared {
        Prepared::Regression { train, .. } => {
            let model = match &cfg.profile {
                Some(target) => {
                    let res = profile_hyperparameter(train, &cfg.model, target, &cfg.fit).map_err(fit_err)?;
                    log::info!("profile maximum at {} after {} probes", res.best, res.probes.len());
                    profile = Some((res.best, res.probes));
                    res.model
                }
                None => em_fit(train, &cfg.model, &cfg.fit).map_err(fit_err)?,
            };
            Outcome::Regression(model)
        }
        Prepared::Classification { train, labels, .. } => {
            let kernels: Vec<_> = cfg
                .model
                .anova
                .covariates
                .iter()
                .cloned()
                .zip(cfg.model.kernels.iter().cloned())
                .collect();
            let clf = build_classifier(train, labels, &kernels, cfg.model.anova.parameterization, &cfg.fit)
                .map_err(fit_err)?;
            Outcome::Classifier(clf)
        }
    };
    let model = outcome.model();
    log::info!(
        "`{}`: log-likelihood {} after {} iterations ({:?})",
        cfg.label,
        model.log_likelihood,
        model.iterations,
        model.status
    );
    let mut report = ModelReport::from_model(cfg.label.clone(), model);
    match (&outcome, &prepared) {
        (Outcome::Regression(m), Prepared::Regression { train, test }) => {
            let (mean, _) = m.fitted();
            report.train_rmse = Some(rmse(mean.as_slice(), &train.response));
            if let Some(t) = test {
                let (mean, _) = m.predictive(&t.covariates).map_err(fit_err)?;
                report.test_rmse = Some(rmse(mean.as_slice(), &t.response));
            }
        }
        (Outcome::Classifier(c), Prepared::Classification { train, labels, test }) => {
            report.train_error_rate = Some(classification_metrics(c, train, labels).map_err(fit_err)?.error_rate);
            if let Some((f, l)) = test {
                let m = classification_metrics(c, f, l).map_err(|e| classify(Stage::PredictData, e))?;
                report.test_error_rate = Some(m.error_rate);
            }
        }
        _ => unreachable!("outcome follows the prepared task"),
    }
    let standard_errors = standard_errors(model);
    if let StandardErrors::Unavailable { reason } = &standard_errors {
        log::warn!("standard errors unavailable: {reason}");
    }
    Ok(FitRun {
        outcome,
        report,
        standard_errors,
        profile,
        prepared,
    })
}

fn status_name(s: FitStatus) -> &'static str {
    match s {
        FitStatus::Converged => "converged",
        FitStatus::Stalled => "stalled",
        FitStatus::Fixed => "fixed",
    }
}

fn report_table(run: &FitRun, task: Task) -> (Vec<String>, Vec<String>) {
    let model = run.outcome.model();
    let r = &run.report;
    let names = model.anova.param_names();
    let mut header: Vec<String> = [
        "label",
        "task",
        "log_likelihood",
        "n_lambda",
        "n_error",
        "n_rows",
        "aic",
        "bic",
        "status",
        "iterations",
        "psi",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let mut row = vec![
        r.label.clone(),
        match task {
            Task::Regression => "regression",
            Task::Classification => "classification",
        }
        .to_string(),
        num(r.log_likelihood),
        r.n_lambda.to_string(),
        r.n_error.to_string(),
        r.n_rows.to_string(),
        num(r.aic),
        num(r.bic),
        status_name(model.status).to_string(),
        model.iterations.to_string(),
        num(model.psi()),
    ];
    for (n, l) in names.iter().zip(&model.lambda) {
        header.push(format!("lambda_{n}"));
        row.push(num(*l));
    }
    let se = run.standard_errors.values();
    for (i, n) in names.iter().map(|n| format!("lambda_{n}")).chain(["log_psi".to_string()]).enumerate() {
        header.push(format!("se_{n}"));
        row.push(opt(se.map(|v| v[i])));
    }
    for (h, v) in [
        ("train_rmse", r.train_rmse),
        ("test_rmse", r.test_rmse),
        ("train_error_rate", r.train_error_rate),
        ("test_error_rate", r.test_error_rate),
    ] {
        header.push(h.into());
        row.push(opt(v));
    }
    header.push("profile_value".into());
    row.push(opt(run.profile.as_ref().map(|p| p.0)));
    (header, row)
}

fn write_fitted(path: &Path, run: &FitRun) -> CliResult<()> {
    let err = |e| classify(Stage::Fit, e);
    match (&run.outcome, &run.prepared) {
        (Outcome::Regression(m), Prepared::Regression { train, .. }) => {
            let (mean, sd) = m.fitted();
            let header = ["row", "y", "fitted", "sd", "lower", "upper"].map(String::from);
            let rows: Vec<Vec<String>> = (0..train.n())
                .map(|i| {
                    vec![
                        (i + 1).to_string(),
                        num(train.response[i]),
                        num(mean[i]),
                        num(sd[i]),
                        num(mean[i] - 2.0 * sd[i]),
                        num(mean[i] + 2.0 * sd[i]),
                    ]
                })
                .collect();
            write_csv_file(path, &header, &rows)
        }
        (Outcome::Classifier(c), Prepared::Classification { train, labels, .. }) => {
            let means = c.class_means(train).map_err(err)?;
            let predicted = c.predict(train).map_err(err)?;
            let mut header: Vec<String> = ["row", "label", "predicted"].map(String::from).to_vec();
            header.extend(c.classes.iter().map(|k| format!("mean_{k}")));
            let rows: Vec<Vec<String>> = (0..train.n)
                .map(|i| {
                    let mut r = vec![(i + 1).to_string(), labels[i].clone(), predicted[i].clone()];
                    r.extend(means.row(i).iter().map(|v| num(*v)));
                    r
                })
                .collect();
            write_csv_file(path, &header, &rows)
        }
        _ => unreachable!("outcome follows the prepared task"),
    }
}

pub fn output_dir(cfg: &RunConfig, config_path: &Path, out: Option<PathBuf>) -> PathBuf {
    out.or_else(|| cfg.output_dir.clone()).unwrap_or_else(|| {
        config_path
            .parent()
            .unwrap_or(Path::new("."))
            .join(format!("{}-output", cfg.label))
    })
}

pub fn cmd_fit(config: &Path, out: Option<PathBuf>) -> CliResult<()> {
    let cfg = load_config(config)?;
    let dir = output_dir(&cfg, config, out);
    let prepared = prepare(&cfg)?;
    let run = fit(&cfg, prepared)?;
    ensure_dir(&dir)?;

    let saved = match &run.outcome {
        Outcome::Regression(m) => SavedModel::Regression { model: m.clone() },
        Outcome::Classifier(c) => SavedModel::Classifier { classifier: c.clone() },
    };
    let json = saved.to_json().map_err(|e| classify(Stage::Write, e))?;
    write_atomic(&dir.join("model.json"), |w| {
        w.write_all(json.as_bytes())
            .and_then(|_| w.write_all(b"\n"))
            .map_err(|e| classify(Stage::Write, e.into()))
    })?;

    let model = run.outcome.model();
    write_atomic(&dir.join("trace.csv"), |w| {
        write_trace(&model.trace, &model.anova.param_names(), w).map_err(|e| classify(Stage::Write, e))
    })?;

    let (header, row) = report_table(&run, cfg.task);
    write_csv_file(&dir.join("report.csv"), &header, &[row])?;
    write_fitted(&dir.join("fitted.csv"), &run)?;

    if let Some((_, probes)) = &run.profile {
        let name = match cfg.profile.as_ref().map(|p| p.which) {
            Some(iprior_core::estimate::Hyperparameter::Sigma) => "sigma",
            _ => "hurst",
        };
        let mut sorted = probes.clone();
        sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
        let rows: Vec<Vec<String>> = sorted.iter().map(|(v, l)| vec![num(*v), num(*l)]).collect();
        write_csv_file(&dir.join("profile.csv"), &[name.to_string(), "log_likelihood".into()], &rows)?;
    }
    println!(
        "{}: log-likelihood {:.6}, {} iterations ({}); wrote {}",
        cfg.label,
        model.log_likelihood,
        model.iterations,
        status_name(model.status),
        dir.display()
    );
    Ok(())
}

fn load_saved(path: &Path) -> CliResult<SavedModel> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::new(Code::Io, format!("{}: {e}", path.display())))?;
    SavedModel::from_json(&text).map_err(|e| CliError::new(Code::Model, format!("{}: {e}", path.display())))
}

fn model_schema(model: &FittedModel, skip: &[&str]) -> Schema {
    model
        .kernels
        .iter()
        .filter(|k| !skip.contains(&k.column.as_str()))
        .fold(Schema::new(), |s, k| s.with(k.column.clone(), k.column_type))
}

fn write_to(out: Option<&Path>, header: &[String], rows: &[Vec<String>]) -> CliResult<()> {
    match out {
        Some(p) => write_csv_file(p, header, rows),
        None => {
            let stdout = std::io::stdout();
            let mut w = csv::Writer::from_writer(stdout.lock());
            let io = |e: csv::Error| CliError::new(Code::Io, e.to_string());
            w.write_record(header).map_err(io)?;
            for r in rows {
                w.write_record(r).map_err(io)?;
            }
            w.flush().map_err(|e| CliError::new(Code::Io, e.to_string()))
        }
    }
}

pub fn cmd_predict(model_path: &Path, data: &Path, out: Option<&Path>) -> CliResult<()> {
    let saved = load_saved(model_path)?;
    let schema_err = |e| classify(Stage::PredictData, e);
    match &saved {
        SavedModel::Regression { model } => {
            let new = load_covariates(data, &model_schema(model, &[])).map_err(schema_err)?;
            let (mean, var) = model.predictive(&new).map_err(schema_err)?;
            let mask = model.extrapolation_mask(&new).map_err(schema_err)?;
            let header = ["row", "mean", "variance", "extrapolation"].map(String::from);
            let rows: Vec<Vec<String>> = (0..new.n)
                .map(|i| vec![(i + 1).to_string(), num(mean[i]), num(var[i]), flag(mask[i])])
                .collect();
            write_to(out, &header, &rows)
        }
        SavedModel::Classifier { classifier } => {
            let skip = [iprior_core::applications::classification::CLASS_COLUMN];
            let new = load_covariates(data, &model_schema(&classifier.model, &skip)).map_err(schema_err)?;
            let means = classifier.class_means(&new).map_err(schema_err)?;
            let predicted = classifier.predict(&new).map_err(schema_err)?;
            let mask = classifier.extrapolation_mask(&new).map_err(schema_err)?;
            let mut header: Vec<String> = vec!["row".into(), "predicted".into()];
            header.extend(classifier.classes.iter().map(|k| format!("mean_{k}")));
            header.push("extrapolation".into());
            let rows: Vec<Vec<String>> = (0..new.n)
                .map(|i| {
                    let mut r = vec![(i + 1).to_string(), predicted[i].clone()];
                    r.extend(means.row(i).iter().map(|v| num(*v)));
                    r.push(flag(mask[i]));
                    r
                })
                .collect();
            write_to(out, &header, &rows)
        }
    }
}

pub fn cmd_compare(configs: &[PathBuf], out: Option<&Path>) -> CliResult<()> {
    let cfgs = configs.iter().map(|p| load_config(p)).collect::<CliResult<Vec<_>>>()?;
    let mut seen = HashSet::new();
    for c in &cfgs {
        if !seen.insert(c.label.as_str()) {
            return Err(CliError::new(Code::Config, format!("duplicate model label `{}`", c.label)));
        }
    }
    let mut reports = Vec::with_capacity(cfgs.len());
    for c in &cfgs {
        let prepared = prepare(c)?;
        reports.push(fit(c, prepared)?.report);
    }
    let rows = compare_models(&reports).map_err(|e| match e {
        Error::Dimension(m) => CliError::new(Code::DataMismatch, m),
        Error::Spec(m) => CliError::new(Code::Config, m),
        other => classify(Stage::Fit, other),
    })?;
    print!("{}", format_table(&rows));
    if let Some(p) = out {
        write_atomic(p, |w| write_comparison(&rows, w).map_err(|e| classify(Stage::Write, e)))?;
    }
    Ok(())
}

pub fn cmd_gram(config: &Path, covariate: &str, out: Option<&Path>) -> CliResult<()> {
    let cfg = load_config(config)?;
    let k = cfg
        .model
        .anova
        .covariates
        .iter()
        .position(|c| c == covariate)
        .ok_or_else(|| CliError::new(Code::Config, format!("`{covariate}` is not a model covariate")))?;
    let ty = cfg
        .schema
        .columns
        .iter()
        .find(|(c, _)| c == covariate)
        .map(|(_, t)| *t)
        .expect("config validation ties kernels to declared columns");
    let covs = load_covariates(&cfg.train, &Schema::new().with(covariate, ty))
        .map_err(|e| classify(Stage::TrainData, e))?;
    let covs = match cfg.train_rows {
        Some(r) => {
            check_split(covs.n, r)?;
            covs.select(&(0..r).collect::<Vec<_>>())
        }
        None => covs,
    };
    let col = covs.get(covariate).expect("loaded by name");
    let (h, _) = gram(&cfg.model.kernels[k], col).map_err(|e| classify(Stage::Fit, e))?;
    let mut header = vec!["row".to_string()];
    header.extend((1..=h.ncols()).map(|j| format!("gram:{j}")));
    let rows: Vec<Vec<String>> = h
        .row_iter()
        .enumerate()
        .map(|(i, r)| std::iter::once((i + 1).to_string()).chain(r.iter().map(|v| num(*v))).collect())
        .collect();
    write_to(out, &header, &rows)
}
