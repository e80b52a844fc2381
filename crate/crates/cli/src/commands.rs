use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use log::info;
use serde_json::json;
use shonan::certifier::{build_certificate, certify, min_eigenpair, VerdictKind};
use shonan::io::results::RecordDetails;
use shonan::io::{
    format_results, generate_synthetic, parse_g2o, random_init, read_results, write_g2o, write_results, InitMode,
    ResultFormat, ResultRecord, SyntheticSpec,
};
use shonan::problem::{build_connection_laplacian, cost, MeasurementGraph, RotationAssignment};
use shonan::staircase::{shonan_averaging, Method, SolveResult, StaircaseConfig};
use shonan::{Result, ShonanError};

use crate::{Cli, Command, Flags};

/// Exit status of a run that finished without certifying.
const UNCERTIFIED: u8 = 2;

/// Relative cost gap under which an uncertified run still counts as a success.
const SUCCESS_GAP: f64 = 0.05;

fn usage(msg: impl Into<String>) -> ShonanError {
    ShonanError::InvalidArgument(msg.into())
}

pub fn run(cli: &Cli) -> Result<u8> {
    let flags = &cli.flags;
    match cli.command {
        Command::Solve => solve(flags),
        Command::Synth => synth(flags),
        Command::Bench => bench(flags),
        Command::Certify => certify_cmd(flags),
    }
}

fn single_method(flags: &Flags) -> Result<Method> {
    match flags.method.as_slice() {
        [] => Ok(Method::Sa),
        [m] => Ok(*m),
        _ => Err(usage("this command takes a single --method")),
    }
}

/// Preset for `method` with the command-line overrides applied.
fn effective_config(method: Method, flags: &Flags) -> Result<StaircaseConfig> {
    let mut cfg = method.config();
    if let Some(p) = flags.pmin {
        cfg.p_min = p;
        if !cfg.ascend {
            cfg.p_max = p;
        }
    }
    if let Some(p) = flags.pmax {
        if !cfg.ascend && p != cfg.p_min {
            return Err(usage(format!(
                "method {method} is single-level; --pmax must equal the level"
            )));
        }
        cfg.p_max = p;
    }
    if let Some(g) = flags.gauge {
        cfg.solver.gauge_mode = g;
    }
    if let Some(t) = flags.eig_tol {
        cfg.eigen.tolerance = t;
    }
    cfg.threshold = flags.cert_threshold;
    Ok(cfg)
}

fn config_json(method: Method, cfg: &StaircaseConfig) -> serde_json::Value {
    json!({
        "method": method.name(),
        "p_min": cfg.p_min,
        "p_max": cfg.p_max,
        "staircase": cfg.ascend,
        "gauge": cfg.solver.gauge_mode.to_string(),
        "cert_threshold": cfg.threshold,
        "eig_tol": cfg.eigen.tolerance,
        "eig_max_iterations": cfg.eigen.max_iterations,
        "lm_max_iterations": cfg.solver.max_iterations,
        "lm_gradient_tolerance": cfg.solver.gradient_tolerance,
        "escape_initial_step": cfg.escape.initial_step,
        "escape_backtrack": cfg.escape.backtrack,
        "escape_max_trials": cfg.escape.max_trials,
    })
}

fn dump_configs(methods: &[Method], flags: &Flags) -> Result<u8> {
    let configs = methods
        .iter()
        .map(|&m| effective_config(m, flags).map(|c| config_json(m, &c)))
        .collect::<Result<Vec<_>>>()?;
    let value = if configs.len() == 1 {
        configs.into_iter().next().unwrap_or_default()
    } else {
        serde_json::Value::Array(configs)
    };
    println!(
        "{}",
        serde_json::to_string_pretty(&value).map_err(|e| usage(e.to_string()))?
    );
    Ok(0)
}

fn output_format(flags: &Flags) -> ResultFormat {
    flags
        .format
        .or_else(|| flags.out.as_deref().map(ResultFormat::from_path))
        .unwrap_or(ResultFormat::Json)
}

fn emit(records: &[ResultRecord], flags: &Flags) -> Result<()> {
    let format = output_format(flags);
    match &flags.out {
        Some(path) => write_results(path, records, format),
        None => {
            print!("{}", format_results(records, format)?);
            Ok(())
        }
    }
}

fn load_graph(path: &Path, flags: &Flags) -> Result<(String, MeasurementGraph)> {
    let file = parse_g2o(path, flags.kappa)?;
    if file.skipped_lines() > 0 {
        info!("{}: skipped {} unsupported lines", path.display(), file.skipped_lines());
    }
    let name = path
        .file_stem()
        .map_or_else(|| "input".into(), |s| s.to_string_lossy().into_owned());
    Ok((name, file.graph))
}

fn verdict_name(kind: VerdictKind) -> &'static str {
    match kind {
        VerdictKind::Certified => "certified",
        VerdictKind::NotCertified => "not_certified",
        VerdictKind::Indeterminate => "indeterminate",
    }
}

fn solve_record(
    dataset: &str,
    method: Method,
    cfg: &StaircaseConfig,
    g: &MeasurementGraph,
    seed: u64,
    r: &SolveResult,
) -> ResultRecord {
    ResultRecord {
        dataset: dataset.into(),
        method: method.name().into(),
        n: g.n(),
        m: g.num_edges(),
        seed: Some(seed),
        p_final: Some(r.p_final),
        lambda_min: Some(r.lambda_min),
        f_sdp: r.f_sdp,
        f_hat: Some(r.f_hat),
        certified: r.certified,
        success: r.certified,
        error_pct: None,
        opt_time_s: Some(r.opt_time_s),
        eig_time_s: Some(r.eig_time_s),
        details: Some(RecordDetails {
            d: g.d(),
            p_min: Some(r.p_min),
            gauge: Some(cfg.solver.gauge_mode.to_string()),
            verdict: Some(verdict_name(r.verdict).into()),
            suboptimality: r.suboptimality,
            exact: r.exact,
            escapes: Some(r.escapes.len()),
            lm_iterations: Some(r.lm_iterations()),
            error: None,
            rotations: Some(RecordDetails::encode_rotations(&r.rotations)),
        }),
    }
}

fn failed_record(dataset: &str, method: Method, g: &MeasurementGraph, seed: u64, err: &ShonanError) -> ResultRecord {
    ResultRecord {
        dataset: dataset.into(),
        method: method.name().into(),
        n: g.n(),
        m: g.num_edges(),
        seed: Some(seed),
        p_final: None,
        lambda_min: None,
        f_sdp: None,
        f_hat: None,
        certified: false,
        success: false,
        error_pct: None,
        opt_time_s: None,
        eig_time_s: None,
        details: Some(RecordDetails {
            d: g.d(),
            error: Some(err.to_string()),
            ..Default::default()
        }),
    }
}

fn run_one(g: &MeasurementGraph, cfg: &StaircaseConfig, seed: u64) -> Result<SolveResult> {
    let q0 = random_init(g.n(), cfg.p_min, InitMode::HaarSop, seed)?;
    shonan_averaging(g, &q0, cfg)
}

fn solve(flags: &Flags) -> Result<u8> {
    let method = single_method(flags)?;
    if flags.dump_config {
        return dump_configs(&[method], flags);
    }
    let input = flags.input.as_deref().ok_or_else(|| usage("solve needs --input"))?;
    let (name, g) = load_graph(input, flags)?;
    let cfg = effective_config(method, flags)?;
    let result = run_one(&g, &cfg, flags.seed)?;
    info!(
        "{name}: {method} p = {} λ_min = {:e} f̂ = {:e}",
        result.p_final, result.lambda_min, result.f_hat
    );
    emit(&[solve_record(&name, method, &cfg, &g, flags.seed, &result)], flags)?;
    Ok(if result.certified { 0 } else { UNCERTIFIED })
}

/// `foo.g2o` → `foo.truth.json`.
fn truth_path(out: &Path) -> PathBuf {
    let stem = out
        .file_stem()
        .map_or_else(|| "synthetic".into(), |s| s.to_string_lossy().into_owned());
    out.with_file_name(format!("{stem}.truth.json"))
}

fn synth_name(n: usize, sigma: f64, seed: u64) -> String {
    format!("synthetic_n{n}_s{sigma}_g{seed}")
}

fn truth_record(name: &str, g: &MeasurementGraph, truth: &RotationAssignment) -> Result<ResultRecord> {
    let l = build_connection_laplacian(g);
    Ok(ResultRecord {
        dataset: name.into(),
        method: "truth".into(),
        n: g.n(),
        m: g.num_edges(),
        seed: None,
        p_final: None,
        lambda_min: None,
        f_sdp: None,
        f_hat: Some(cost(&l, truth)?),
        certified: false,
        success: false,
        error_pct: None,
        opt_time_s: None,
        eig_time_s: None,
        details: Some(RecordDetails {
            d: g.d(),
            rotations: Some(RecordDetails::encode_rotations(truth)),
            ..Default::default()
        }),
    })
}

fn synth(flags: &Flags) -> Result<u8> {
    let n = flags.n.ok_or_else(|| usage("synth needs --n"))?;
    let out = flags.out.as_deref().ok_or_else(|| usage("synth needs --out"))?;
    let (g, truth) = generate_synthetic(&SyntheticSpec::cycle(n, flags.sigma, flags.seed))?;
    write_g2o(out, &g, Some(&truth))?;
    let record = truth_record(&synth_name(n, flags.sigma, flags.seed), &g, &truth)?;
    write_results(&truth_path(out), &[record], ResultFormat::Json)?;
    Ok(0)
}

fn bench(flags: &Flags) -> Result<u8> {
    let methods = if flags.method.is_empty() {
        Method::ALL.to_vec()
    } else {
        flags.method.clone()
    };
    if flags.dump_config {
        return dump_configs(&methods, flags);
    }
    let (name, g) = match (&flags.input, flags.n) {
        (Some(path), _) => load_graph(path, flags)?,
        (None, Some(n)) => {
            let (g, _) = generate_synthetic(&SyntheticSpec::cycle(n, flags.sigma, flags.seed))?;
            (synth_name(n, flags.sigma, flags.seed), g)
        }
        (None, None) => return Err(usage("bench needs --input or --n")),
    };
    let configs = methods
        .iter()
        .map(|&m| effective_config(m, flags))
        .collect::<Result<Vec<_>>>()?;

    let mut records = Vec::new();
    for (&method, cfg) in methods.iter().zip(&configs) {
        for seed in 0..flags.seeds {
            let record = match run_one(&g, cfg, seed) {
                Ok(r) => solve_record(&name, method, cfg, &g, seed, &r),
                Err(e) => {
                    log::warn!("{name} {method} seed {seed}: {e}");
                    failed_record(&name, method, &g, seed, &e)
                }
            };
            records.push(record);
        }
    }
    score(&mut records);
    for line in summary(&records) {
        eprintln!("{line}");
    }
    emit(&records, flags)?;
    Ok(0)
}

/// Fills `error_pct` and `success` against the best certified cost of the
/// sweep.
fn score(records: &mut [ResultRecord]) {
    let reference = records
        .iter()
        .filter(|r| r.certified)
        .filter_map(|r| r.f_sdp)
        .fold(None, |acc: Option<f64>, f| Some(acc.map_or(f, |a| a.min(f))));
    for r in records.iter_mut() {
        let pct = match (reference, r.f_hat) {
            (Some(f_ref), Some(f)) if f_ref > 0.0 => Some((f - f_ref) / f_ref * 100.0),
            _ => None,
        };
        r.error_pct = pct;
        r.success = r.certified || pct.is_some_and(|p| p <= SUCCESS_GAP * 100.0);
    }
}

fn summary(records: &[ResultRecord]) -> Vec<String> {
    let mut by_method: BTreeMap<&str, Vec<&ResultRecord>> = BTreeMap::new();
    for r in records {
        by_method.entry(r.method.as_str()).or_default().push(r);
    }
    let mut lines = vec![format!(
        "{:<8} {:>6} {:>10} {:>9} {:>9} {:>9} {:>8}",
        "method", "runs", "error%", "min(s)", "avg(s)", "max(s)", "success"
    )];
    for (method, rows) in by_method {
        let times: Vec<f64> = rows
            .iter()
            .filter_map(|r| Some(r.opt_time_s? + r.eig_time_s?))
            .collect();
        let errors: Vec<f64> = rows.iter().filter_map(|r| r.error_pct).collect();
        let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
        let fmt = |v: Option<f64>, prec: usize| v.map_or_else(|| "-".into(), |x| format!("{x:.prec$}"));
        let min = times.iter().copied().reduce(f64::min);
        let max = times.iter().copied().reduce(f64::max);
        let success = rows.iter().filter(|r| r.success).count() as f64 / rows.len() as f64 * 100.0;
        lines.push(format!(
            "{:<8} {:>6} {:>10} {:>9} {:>9} {:>9} {:>7.0}%",
            method,
            rows.len(),
            fmt(mean(&errors), 3),
            fmt(min, 3),
            fmt(mean(&times), 3),
            fmt(max, 3),
            success
        ));
    }
    lines
}

fn load_assignment(path: &Path) -> Result<RotationAssignment> {
    let records = read_results(path, ResultFormat::from_path(path))?;
    records
        .iter()
        .filter_map(|r| r.details.as_ref())
        .find_map(|d| d.decode_rotations().transpose())
        .unwrap_or_else(|| Err(usage(format!("{}: no record carries rotations", path.display()))))
}

fn certify_cmd(flags: &Flags) -> Result<u8> {
    let input = flags.input.as_deref().ok_or_else(|| usage("certify needs --input"))?;
    let assignment = flags
        .assignment
        .as_deref()
        .ok_or_else(|| usage("certify needs --assignment"))?;
    let (name, g) = load_graph(input, flags)?;
    let r = load_assignment(assignment)?;
    if r.n() != g.n() || r.d() != g.d() {
        return Err(usage(format!(
            "assignment has {} SO({}) blocks but the graph has {} SO({}) nodes",
            r.n(),
            r.d(),
            g.n(),
            g.d()
        )));
    }
    let p = flags.pmin.unwrap_or(g.d() + 2);
    let mut eigen = shonan::certifier::EigenConfig::default();
    if let Some(t) = flags.eig_tol {
        eigen.tolerance = t;
    }
    if flags.dump_config {
        let value = json!({ "p": p, "cert_threshold": flags.cert_threshold, "eig_tol": eigen.tolerance });
        println!(
            "{}",
            serde_json::to_string_pretty(&value).map_err(|e| usage(e.to_string()))?
        );
        return Ok(0);
    }
    let l = build_connection_laplacian(&g);
    let start = std::time::Instant::now();
    let c = build_certificate(&l, &r.embed(p)?)?;
    let verdict = certify(min_eigenpair(&c, &eigen, None)?, flags.cert_threshold);
    let f = cost(&l, &r)?;
    let certified = verdict.certified();
    let record = ResultRecord {
        dataset: name,
        method: "certify".into(),
        n: g.n(),
        m: g.num_edges(),
        seed: None,
        p_final: Some(p),
        lambda_min: Some(verdict.lambda_min),
        f_sdp: certified.then_some(f),
        f_hat: Some(f),
        certified,
        success: certified,
        error_pct: None,
        opt_time_s: None,
        eig_time_s: Some(start.elapsed().as_secs_f64()),
        details: Some(RecordDetails {
            d: g.d(),
            verdict: Some(verdict_name(verdict.kind).into()),
            ..Default::default()
        }),
    };
    emit(&[record], flags)?;
    Ok(if certified { 0 } else { UNCERTIFIED })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(method: &str, f_hat: f64, f_sdp: Option<f64>) -> ResultRecord {
        ResultRecord {
            dataset: "x".into(),
            method: method.into(),
            n: 3,
            m: 3,
            seed: Some(0),
            p_final: Some(3),
            lambda_min: None,
            f_sdp,
            f_hat: Some(f_hat),
            certified: f_sdp.is_some(),
            success: false,
            error_pct: None,
            opt_time_s: Some(0.1),
            eig_time_s: Some(0.1),
            details: None,
        }
    }

    #[test]
    fn scoring_uses_best_certified_cost() {
        let mut rows = vec![
            row("sa", 2.0, Some(2.0)),
            row("s3", 2.08, None),
            row("s3", 2.2, None),
            row("sl", 2.0, Some(2.0)),
        ];
        score(&mut rows);
        let pct: Vec<f64> = rows.iter().map(|r| r.error_pct.unwrap()).collect();
        assert!((pct[1] - 4.0).abs() < 1e-9 && (pct[2] - 10.0).abs() < 1e-9);
        assert_eq!(
            rows.iter().map(|r| r.success).collect::<Vec<_>>(),
            [true, true, false, true]
        );
    }

    #[test]
    fn scoring_without_reference_needs_certificates() {
        let mut rows = vec![row("s3", 2.0, None)];
        score(&mut rows);
        assert_eq!(rows[0].error_pct, None);
        assert!(!rows[0].success);
        assert_eq!(summary(&rows).len(), 2);
    }

    #[test]
    fn truth_file_sits_next_to_the_graph() {
        assert_eq!(truth_path(Path::new("/tmp/a/g.g2o")), Path::new("/tmp/a/g.truth.json"));
    }
}
