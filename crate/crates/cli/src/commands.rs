use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use kvbudget::allocation::{
    mga_plan_with, mlma_plan_with, mlp_plan, ratios_to_counts, uniform_plan_with, LayerBudgetPlan, PlanRecord,
    ScoreTransform, Strategy,
};
use kvbudget::importance::{importance, top_indices};
use kvbudget::metrics::{analyze_snapshots, MetricConfig, MetricKind, MetricReport};
use kvbudget::prefill::{compare_plans, run_chunked_prefill, PrefillConfig, PrefillReport};
use kvbudget::stats::{pearson, permutation_test_with, spearman, yapscore, zscore};
use kvbudget::trace::{
    generate_synthetic_snapshot, generate_synthetic_trace, load_snapshot, load_trace, save_snapshot, save_trace,
    AttentionTrace, ScoreTable, Stage,
};
use serde::Serialize;
use serde_json::json;

use crate::args::*;
use crate::error::{CliError, CliResult, Context};

pub fn run(cli: Cli) -> CliResult<()> {
    let out_dir = cli.out_dir.as_deref();
    match cli.command {
        Command::GenTrace(a) => gen_trace(out_dir, a),
        Command::GenSnapshot(a) => gen_snapshot(out_dir, a),
        Command::Importance(a) => importance_cmd(out_dir, a),
        Command::Allocate(a) => allocate(out_dir, a),
        Command::PruneSim(a) => prune_sim(out_dir, a),
        Command::Metrics(a) => metrics(out_dir, a),
        Command::Stats(a) => match a.command {
            StatsCommand::Perm(a) => perm(out_dir, a),
            StatsCommand::Corr(a) => corr(out_dir, a),
            StatsCommand::Yap(a) => yap(out_dir, a),
            StatsCommand::Zscore(a) => zscores(out_dir, a),
        },
        Command::Compare(a) => compare(out_dir, a),
    }
}

/// Where an artifact goes: an explicit path (relative ones under the output
/// directory), the default name inside the output directory, or nowhere.
fn resolve(out_dir: Option<&Path>, output: Option<&Path>, default_name: &str) -> Option<PathBuf> {
    match (out_dir, output) {
        (Some(dir), Some(p)) if p.is_relative() => Some(dir.join(p)),
        (_, Some(p)) => Some(p.to_owned()),
        (Some(dir), None) => Some(dir.join(default_name)),
        (None, None) => None,
    }
}

fn require_path(out_dir: Option<&Path>, output: Option<&Path>, default_name: &str) -> CliResult<PathBuf> {
    resolve(out_dir, output, default_name)
        .ok_or_else(|| CliError::invalid("--output", "binary artifacts need --output or an output directory"))
}

fn ensure_parent(path: &Path) -> CliResult<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => fs::create_dir_all(dir)
            .map_err(|e| CliError::new("io", format!("cannot create {}: {e}", dir.display())))
            .file("--output", dir),
        _ => Ok(()),
    }
}

/// Write a text report to its resolved destination, or stdout.
fn emit(out_dir: Option<&Path>, out: &OutputArgs, stem: &str, body: &str) -> CliResult<()> {
    match resolve(out_dir, out.output.as_deref(), &format!("{stem}.{}", out.format.ext())) {
        Some(path) => {
            ensure_parent(&path)?;
            fs::write(&path, body)
                .map_err(|e| CliError::new("io", format!("cannot write {}: {e}", path.display())))
                .file("--output", &path)
        }
        None => {
            print!("{body}");
            Ok(())
        }
    }
}

fn to_json(value: &impl Serialize) -> CliResult<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

fn gen_trace(out_dir: Option<&Path>, a: GenTraceArgs) -> CliResult<()> {
    let path = require_path(out_dir, a.output.as_deref(), "trace.dkvt")?;
    let trace = generate_synthetic_trace(a.layers, a.heads, a.seq_len, a.key_dim, a.value_dim, a.seed)?;
    ensure_parent(&path)?;
    save_trace(&trace, &path).file("--output", &path)
}

fn gen_snapshot(out_dir: Option<&Path>, a: GenSnapshotArgs) -> CliResult<()> {
    let dir = require_path(out_dir, a.output.as_deref(), "snapshots")?;
    let stages = a
        .stages
        .iter()
        .map(|s| s.parse::<Stage>())
        .collect::<Result<Vec<_>, _>>()
        .flag("--stages")?;
    if a.samples == 0 {
        return Err(CliError::invalid("--samples", "need at least one sample"));
    }
    fs::create_dir_all(&dir)
        .map_err(|e| CliError::new("io", format!("cannot create {}: {e}", dir.display())))
        .file("--output", &dir)?;
    for i in 0..a.samples {
        let snap =
            generate_synthetic_snapshot(a.layers, stages.clone(), a.seq_len, a.hidden_dim, a.seed.wrapping_add(i as u64))?;
        let path = dir.join(format!("sample_{i:03}.dkvr"));
        save_snapshot(&snap, &path).file("--output", &path)?;
    }
    Ok(())
}

fn read_trace(path: &Path) -> CliResult<AttentionTrace> {
    load_trace(path).file("--trace", path)
}

fn importance_cmd(out_dir: Option<&Path>, a: ImportanceArgs) -> CliResult<()> {
    let trace = read_trace(&a.trace)?;
    let h = *trace.header();
    let layers: Vec<usize> = match a.layer {
        Some(l) if l >= h.num_layers => {
            return Err(CliError::invalid("--layer", format!("layer {l} outside 0..{}", h.num_layers)))
        }
        Some(l) => vec![l],
        None => (0..h.num_layers).collect(),
    };
    if let Some(b) = a.budget.filter(|&b| b > h.seq_len) {
        return Err(CliError::invalid("--budget", format!("budget {b} exceeds {} tokens", h.seq_len)));
    }
    let scorer = a.scorer.into();
    let mut rows = Vec::with_capacity(layers.len());
    for &l in &layers {
        let scores = importance(&trace, l, scorer)?;
        let retained = a.budget.map(|b| top_indices(&scores.scores, b));
        rows.push((scores, retained));
    }
    let body = match a.out.format {
        Format::Json => to_json(&json!({
            "scorer": scorer,
            "seq_len": h.seq_len,
            "layers": rows.iter().map(|(s, r)| json!({
                "layer": s.layer,
                "scores": s.scores,
                "retained": r,
            })).collect::<Vec<_>>(),
        }))?,
        Format::Csv => {
            let mut out = String::from("layer,token_index,score");
            out.push_str(if a.budget.is_some() { ",retained\n" } else { "\n" });
            for (s, r) in &rows {
                for (j, v) in s.scores.iter().enumerate() {
                    write!(out, "{},{j},{v}", s.layer).unwrap();
                    if let Some(r) = r {
                        write!(out, ",{}", u8::from(r.binary_search(&j).is_ok())).unwrap();
                    }
                    out.push('\n');
                }
            }
            out
        }
    };
    emit(out_dir, &a.out, "importance", &body)
}

fn check_budget(b: &BudgetArgs) -> CliResult<()> {
    if !(0.0..1.0).contains(&b.rho) {
        return Err(CliError::invalid("--rho", format!("rho {} outside [0, 1)", b.rho)));
    }
    if !(b.rho_max > 0.0 && b.rho_max <= 1.0) {
        return Err(CliError::invalid("--rho-max", format!("rho_max {} outside (0, 1]", b.rho_max)));
    }
    Ok(())
}

fn select_from_report(report: &MetricReport, b: &BudgetArgs) -> CliResult<Vec<f64>> {
    let kind: MetricKind = b.metric_name.parse().flag("--metric-name")?;
    let stage = match &b.metric_stage {
        Some(s) => s.parse::<Stage>().flag("--metric-stage")?,
        None => {
            let stages: BTreeSet<Stage> = report.rows.iter().map(|r| r.stage).collect();
            match stages.len() {
                1 => *stages.first().unwrap(),
                0 => return Err(CliError::new("malformed", "metric report is empty").with_flag("--metric")),
                _ => return Err(CliError::invalid("--metric-stage", "report has several stages; choose one")),
            }
        }
    };
    let mut layers: Vec<usize> =
        report.rows.iter().filter(|r| r.metric == kind && r.stage == stage).map(|r| r.layer).collect();
    layers.sort_unstable();
    if layers.is_empty() || layers.iter().enumerate().any(|(i, &l)| i != l) {
        return Err(CliError::new(
            "malformed",
            format!("report lacks one {kind:?} value per layer at stage {stage}"),
        )
        .with_flag("--metric"));
    }
    Ok(report.layer_values(kind, stage))
}

/// Per-layer metric from a `layer,value` CSV or a metrics report.
fn load_metric(path: &Path, b: &BudgetArgs) -> CliResult<Vec<f64>> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::new("io", format!("cannot read {}: {e}", path.display())))
        .file("--metric", path)?;
    let first = text.lines().next().unwrap_or_default().replace(' ', "");
    if text.trim_start().starts_with('{') {
        let report: MetricReport = serde_json::from_str(&text)
            .map_err(|e| CliError::new("malformed", e.to_string()))
            .file("--metric", path)?;
        return select_from_report(&report, b).map_err(|e| e.with_file(path));
    }
    if first != "layer,value" {
        let report = MetricReport::from_csv_reader(text.as_bytes()).file("--metric", path)?;
        return select_from_report(&report, b).map_err(|e| e.with_file(path));
    }
    let table = ScoreTable::from_csv_reader(text.as_bytes()).file("--metric", path)?;
    let mut pairs: Vec<(f64, f64)> = table.rows().iter().map(|r| (r[0], r[1])).collect();
    pairs.sort_by(|x, y| x.0.total_cmp(&y.0));
    if pairs.iter().enumerate().any(|(i, &(l, _))| l != i as f64) {
        return Err(CliError::new("malformed", "layer column must list 0..L-1 once each").with_flag("--metric").with_file(path));
    }
    Ok(pairs.into_iter().map(|(_, v)| v).collect())
}

fn build_plan(strategy: Strategy, layers: usize, b: &BudgetArgs, metric: Option<&[f64]>) -> CliResult<LayerBudgetPlan> {
    let transform = match b.transform {
        TransformArg::MinShift => ScoreTransform::default(),
        TransformArg::Identity => ScoreTransform::Identity,
    };
    let need_metric = || {
        metric.ok_or_else(|| CliError::invalid("--metric", format!("strategy {strategy} needs a per-layer metric")))
    };
    let plan = match strategy {
        Strategy::Uniform => uniform_plan_with(layers, b.rho, b.exempt_first),
        Strategy::Mlp => mlp_plan(layers, b.rho),
        Strategy::Mga => mga_plan_with(layers, b.rho, need_metric()?, b.rho_max, transform),
        Strategy::Mlma { middle } => mlma_plan_with(layers, b.rho, need_metric()?, middle, b.rho_max, transform),
    };
    plan.map_err(|e| {
        let flag = match e.kind() {
            "infeasible" => "--rho",
            "shape_mismatch" | "non_finite" => "--metric",
            _ if matches!(e, kvbudget::Error::InvalidArgument(ref m) if m.contains("transform")) => "--transform",
            _ => "--strategy",
        };
        CliError::from(e).with_flag(flag)
    })
}

fn metric_for(strategies: &[Strategy], b: &BudgetArgs) -> CliResult<Option<Vec<f64>>> {
    let needed = strategies.iter().any(|s| matches!(s, Strategy::Mga | Strategy::Mlma { .. }));
    match &b.metric {
        Some(p) if needed => load_metric(p, b).map(Some),
        _ => Ok(None),
    }
}

fn plan_csv(record: &PlanRecord) -> String {
    let mut out = String::from("layer,ratio,count,protected\n");
    for (l, (r, c)) in record.ratios.iter().zip(&record.counts).enumerate() {
        writeln!(out, "{l},{r},{c},{}", u8::from(record.protected.contains(&l))).unwrap();
    }
    out
}

fn allocate(out_dir: Option<&Path>, a: AllocateArgs) -> CliResult<()> {
    check_budget(&a.budget)?;
    if a.seq_len == 0 {
        return Err(CliError::invalid("--seq-len", "sequence length must be positive"));
    }
    let metric = metric_for(&[a.strategy], &a.budget)?;
    let plan = build_plan(a.strategy, a.layers, &a.budget, metric.as_deref())?;
    let record = plan.record(a.seq_len);
    let body = match a.out.format {
        Format::Json => to_json(&record)?,
        Format::Csv => plan_csv(&record),
    };
    emit(out_dir, &a.out, "plan", &body)
}

fn prefill_config(sim: &SimArgs) -> CliResult<PrefillConfig> {
    if sim.chunk_size == 0 {
        return Err(CliError::invalid("--chunk-size", "chunk size must be positive"));
    }
    Ok(PrefillConfig {
        chunk_size: sim.chunk_size,
        scorer: sim.scorer.into(),
        attention: sim.attention.into(),
    })
}

fn layer_rows_csv(out: &mut String, name: Option<&str>, plan: &LayerBudgetPlan, report: &PrefillReport) {
    for lr in &report.per_layer {
        if let Some(n) = name {
            write!(out, "{n},").unwrap();
        }
        let s = lr.score_summary;
        write!(
            out,
            "{},{},{},{},{},{},{}",
            lr.layer,
            plan.ratios[lr.layer],
            lr.budget,
            lr.retained.len(),
            s.min,
            s.max,
            s.mean
        )
        .unwrap();
        if let Some(j) = lr.jaccard_vs_full {
            write!(out, ",{j}").unwrap();
        }
        out.push('\n');
    }
}

fn prune_sim(out_dir: Option<&Path>, a: PruneSimArgs) -> CliResult<()> {
    let config = prefill_config(&a.sim)?;
    let trace = read_trace(&a.sim.trace)?;
    let h = *trace.header();
    let plan = match (&a.plan, a.strategy) {
        (Some(path), _) => {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::new("io", format!("cannot read {}: {e}", path.display())))
                .file("--plan", path)?;
            let record: PlanRecord = serde_json::from_str(&text)
                .map_err(|e| CliError::new("malformed", e.to_string()))
                .file("--plan", path)?;
            if record.num_layers != h.num_layers || record.ratios.len() != h.num_layers {
                return Err(CliError::new(
                    "shape_mismatch",
                    format!("plan has {} layers, trace has {}", record.num_layers, h.num_layers),
                )
                .with_flag("--plan").with_file(path));
            }
            record.plan()
        }
        (None, Some(strategy)) => {
            check_budget(&a.budget)?;
            let metric = metric_for(&[strategy], &a.budget)?;
            build_plan(strategy, h.num_layers, &a.budget, metric.as_deref())?
        }
        (None, None) => unreachable!("clap requires --plan or --strategy"),
    };
    let cache = run_chunked_prefill(&trace, &plan, &config)?;
    let report = PrefillReport::new(plan.strategy.to_string(), &cache, &h);
    let body = match a.out.format {
        Format::Json => to_json(&json!({
            "plan": plan.record(h.seq_len),
            "config": config,
            "report": report,
        }))?,
        Format::Csv => {
            let mut out = String::from("layer,ratio,budget,retained,score_min,score_max,score_mean\n");
            layer_rows_csv(&mut out, None, &plan, &report);
            out
        }
    };
    emit(out_dir, &a.out, "prune_sim", &body)
}

fn compare(out_dir: Option<&Path>, a: CompareArgs) -> CliResult<()> {
    let config = prefill_config(&a.sim)?;
    check_budget(&a.budget)?;
    if a.strategies.is_empty() {
        return Err(CliError::invalid("--strategies", "no strategies given"));
    }
    let trace = read_trace(&a.sim.trace)?;
    let h = *trace.header();
    let metric = metric_for(&a.strategies, &a.budget)?;
    let plans = a
        .strategies
        .iter()
        .map(|&s| Ok((s.to_string(), build_plan(s, h.num_layers, &a.budget, metric.as_deref())?)))
        .collect::<CliResult<Vec<_>>>()?;
    let reports = compare_plans(&trace, &plans, &config)?;
    let body = match a.out.format {
        Format::Json => to_json(&json!({
            "seq_len": h.seq_len,
            "num_layers": h.num_layers,
            "config": config,
            "plans": plans.iter().zip(&reports).map(|((_, p), r)| json!({
                "plan": p.record(h.seq_len),
                "total_budget": ratios_to_counts(p, h.seq_len).total,
                "mean_jaccard": r.mean_jaccard(),
                "report": r,
            })).collect::<Vec<_>>(),
        }))?,
        Format::Csv => {
            let mut out =
                String::from("plan,layer,ratio,budget,retained,score_min,score_max,score_mean,jaccard_vs_full\n");
            for ((name, p), r) in plans.iter().zip(&reports) {
                layer_rows_csv(&mut out, Some(name), p, r);
            }
            out
        }
    };
    emit(out_dir, &a.out, "compare", &body)
}

fn metrics(out_dir: Option<&Path>, a: MetricsArgs) -> CliResult<()> {
    let config = MetricConfig {
        knn_k: a.knn_k,
        temperature: a.temperature,
        drop_prob: a.drop_prob,
        bootstrap_resamples: a.bootstrap,
        bootstrap_alpha: a.alpha,
        denominator_mode: a.denominator.into(),
    };
    if let Err(e) = config.validate() {
        let msg = e.to_string();
        let flag = [
            ("knn_k", "--knn-k"),
            ("temperature", "--temperature"),
            ("drop_prob", "--drop-prob"),
            ("alpha", "--alpha"),
            ("resample", "--bootstrap"),
        ]
        .into_iter()
        .find(|(key, _)| msg.contains(key))
        .map_or("--bootstrap", |(_, f)| f);
        return Err(CliError::from(e).with_flag(flag));
    }
    let load = |flag: &str, paths: &[PathBuf]| {
        paths.iter().map(|p| load_snapshot(p).file(flag, p)).collect::<CliResult<Vec<_>>>()
    };
    let originals = load("--originals", &a.originals)?;
    let augmented = load("--augmented", &a.augmented)?;
    let augmented = (!augmented.is_empty()).then_some(&augmented[..]);
    let report = analyze_snapshots(&originals, augmented, &config, a.seed).map_err(|e| {
        let flag = if e.kind() == "shape_mismatch" && augmented.is_some() { "--augmented" } else { "--originals" };
        CliError::from(e).with_flag(flag)
    })?;
    let body = match a.out.format {
        Format::Json => to_json(&report)?,
        Format::Csv => report.to_csv(),
    };
    emit(out_dir, &a.out, "metrics", &body)
}

fn perm(out_dir: Option<&Path>, a: PermArgs) -> CliResult<()> {
    if a.n_perm == 0 {
        return Err(CliError::invalid("--n-perm", "need at least one permutation"));
    }
    let table = ScoreTable::load_csv(&a.table).file("--table", &a.table)?;
    let result = permutation_test_with(&table, a.n_perm, a.seed, a.scheme.into()).file("--table", &a.table)?;
    let body = match a.out.format {
        Format::Json => to_json(&result)?,
        Format::Csv => format!(
            "observed,p_value,effect_size,n_perm,seed\n{},{},{},{},{}\n",
            result.observed_stat, result.p_value, result.effect_size, result.n_perm, result.seed
        ),
    };
    emit(out_dir, &a.out, "perm", &body)
}

fn column(table: &ScoreTable, name: Option<&str>, default: usize, flag: &str) -> CliResult<Vec<f64>> {
    let labels = table.layer_labels();
    let idx = match name {
        Some(n) => labels
            .iter()
            .position(|l| l == n)
            .ok_or_else(|| CliError::invalid(flag, format!("no column named {n:?}")))?,
        None if default < labels.len() => default,
        None => return Err(CliError::invalid(flag, "input has too few columns")),
    };
    Ok(table.rows().iter().map(|r| r[idx]).collect())
}

fn corr(out_dir: Option<&Path>, a: CorrArgs) -> CliResult<()> {
    let table = ScoreTable::load_csv(&a.input).file("--input", &a.input)?;
    let x = column(&table, a.x.as_deref(), 0, "--x")?;
    let y = column(&table, a.y.as_deref(), 1, "--y")?;
    let (name, result) = match a.method {
        CorrMethod::Pearson => ("pearson", pearson(&x, &y)),
        CorrMethod::Spearman => ("spearman", spearman(&x, &y)),
    };
    let r = result.file("--input", &a.input)?;
    let body = match a.out.format {
        Format::Json => to_json(&json!({
            "method": name,
            "coefficient": r.coefficient,
            "p_value": r.p_value,
            "n": r.n,
        }))?,
        Format::Csv => format!("method,coefficient,p_value,n\n{name},{},{},{}\n", r.coefficient, r.p_value, r.n),
    };
    emit(out_dir, &a.out, "corr", &body)
}

fn yap(out_dir: Option<&Path>, a: YapArgs) -> CliResult<()> {
    let score = yapscore(a.length, a.baseline);
    let body = match a.out.format {
        Format::Json => to_json(&json!({ "length": a.length, "baseline": a.baseline, "yapscore": score }))?,
        Format::Csv => format!("length,baseline,yapscore\n{},{},{score}\n", a.length, a.baseline),
    };
    emit(out_dir, &a.out, "yap", &body)
}

fn zscores(out_dir: Option<&Path>, a: ZscoreArgs) -> CliResult<()> {
    let z = zscore(&a.values).flag("--values")?;
    let body = match a.out.format {
        Format::Json => to_json(&json!({ "zscores": z }))?,
        Format::Csv => {
            let mut out = String::from("index,value,zscore\n");
            for (i, (v, s)) in a.values.iter().zip(&z).enumerate() {
                writeln!(out, "{i},{v},{s}").unwrap();
            }
            out
        }
    };
    emit(out_dir, &a.out, "zscore", &body)
}
