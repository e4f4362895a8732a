//! Subcommand pipelines. Every command echoes its resolved config into the
//! output directory so a run is reproducible from that file and the seed.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sessrec_core::data::{
    build_token_sequence, generate_events, generate_synthetic, ingest_events, write_event_log,
    Dataset, UserSequence,
};
use sessrec_core::derive_seed;
use sessrec_core::grad::grad_check;
use sessrec_core::model::{param_count, run_forward, ModelConfig, Parameters};
use sessrec_core::retrieval::{build_index, evaluate, retrieve_topk, EvalReport};
use sessrec_core::train::{
    build_pit_schedule, checkpoint_load, checkpoint_save, run_pit, train_steps, Checkpoint,
    OptimizerState, StepMetrics,
};
use sessrec_core::Error;

use crate::config::RunConfig;
use crate::metrics::{emit_metrics, train_metrics_csv, MetricsRow};

/// Command failure, tagged with its exit code.
#[derive(Debug)]
pub enum CliError {
    /// Exit 2: bad usage or configuration.
    Usage(String),
    /// Exit 1: the pipeline itself failed.
    Runtime(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => m,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => CliError::Usage(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

type CmdResult = Result<(), CliError>;

fn out_dir(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    let dir = PathBuf::from(&cfg.output_dir);
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn echo_config(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    let dir = out_dir(cfg)?;
    fs::write(dir.join("config.resolved.cfg"), cfg.to_text())?;
    Ok(dir)
}

fn load_dataset(cfg: &RunConfig) -> Result<Dataset, CliError> {
    match cfg.data_source.as_str() {
        "synthetic" => Ok(generate_synthetic(
            &cfg.synthetic_config(),
            derive_seed(cfg.seed, "data"),
        )?),
        "events" => {
            let (ds, stats) = ingest_events(Path::new(&cfg.data_events), &cfg.data_config())?;
            if stats.malformed_lines > 0 || stats.dropped_events > 0 {
                eprintln!(
                    "warning: {} malformed lines, {} dropped events",
                    stats.malformed_lines, stats.dropped_events
                );
            }
            Ok(ds)
        }
        other => Err(CliError::Usage(format!("unknown data.source {:?}", other))),
    }
}

fn sized_model(cfg: &RunConfig, ds: &Dataset) -> Result<ModelConfig, CliError> {
    let mcfg = cfg.model_config_unsized().for_dataset(ds);
    mcfg.validate()?;
    Ok(mcfg)
}

pub fn gen_data(cfg: &RunConfig) -> CmdResult {
    let dir = echo_config(cfg)?;
    let events = generate_events(&cfg.synthetic_config(), derive_seed(cfg.seed, "data"))?;
    let path = dir.join(&cfg.data_events);
    write_event_log(&path, &events)?;
    let users: std::collections::BTreeSet<&str> =
        events.iter().map(|e| e.user_id.as_str()).collect();
    let items: std::collections::BTreeSet<&str> =
        events.iter().map(|e| e.item_id.as_str()).collect();
    println!(
        "wrote {} events for {} users over {} items to {}",
        events.len(),
        users.len(),
        items.len(),
        path.display()
    );
    Ok(())
}

fn finish_training_run(
    cfg: &RunConfig,
    dir: &Path,
    experiment: &str,
    ds: &Dataset,
    mcfg: &ModelConfig,
    series: &[StepMetrics],
    params: Parameters,
    opt: OptimizerState,
    phase_cursor: i64,
) -> CmdResult {
    fs::write(
        dir.join("train_metrics.csv"),
        train_metrics_csv(series, &ds.scenarios),
    )?;
    checkpoint_save(
        &dir.join("checkpoint.bin"),
        &Checkpoint {
            model: mcfg.clone(),
            loss: cfg.loss_config(),
            train: cfg.train_config(),
            params,
            opt,
            phase_cursor,
        },
    )?;
    if let Some(last) = series.last() {
        emit_metrics(
            &dir.join("metrics.csv"),
            &[MetricsRow {
                experiment: experiment.into(),
                step: last.step as i64,
                scenario: "overall".into(),
                metric: "loss_total".into(),
                value: last.breakdown.total,
                seed: cfg.seed,
            }],
        )?;
        println!(
            "{}: {} steps, final loss {:.6}",
            experiment, series.len(), last.breakdown.total
        );
    }
    Ok(())
}

pub fn train(cfg: &RunConfig) -> CmdResult {
    let dir = echo_config(cfg)?;
    let ds = load_dataset(cfg)?;
    let mcfg = sized_model(cfg, &ds)?;
    let mut params = Parameters::init(&mcfg, derive_seed(cfg.seed, "init"));
    let mut opt = OptimizerState::new(cfg.train_lr);
    let series = train_steps(
        &ds,
        &mut params,
        &mut opt,
        &mcfg,
        &cfg.loss_config(),
        &cfg.train_config(),
        cfg.train_steps,
    )?;
    finish_training_run(cfg, &dir, "train", &ds, &mcfg, &series, params, opt, -1)
}

pub fn pit_run(cfg: &RunConfig) -> CmdResult {
    let dir = echo_config(cfg)?;
    let ds = load_dataset(cfg)?;
    let mcfg = sized_model(cfg, &ds)?;
    let days: Vec<i64> = ds
        .users
        .iter()
        .flat_map(|u| u.sessions.iter().map(|s| s.day()))
        .collect();
    let (first, last) = match (days.iter().min(), days.iter().max()) {
        (Some(&a), Some(&b)) => (a, b),
        _ => return Err(CliError::Runtime("dataset has no sessions".into())),
    };
    let start = if cfg.pit_start_day < 0 { first } else { cfg.pit_start_day };
    let end = if cfg.pit_end_day < 0 { last } else { cfg.pit_end_day };
    let schedule = build_pit_schedule(start, end, cfg.pit_num_buckets, cfg.pit_window_days)?;

    let mut params = Parameters::init(&mcfg, derive_seed(cfg.seed, "init"));
    let mut opt = OptimizerState::new(cfg.train_lr);
    let reports = run_pit(
        &ds,
        &schedule,
        &mut params,
        &mut opt,
        &mcfg,
        &cfg.loss_config(),
        &cfg.train_config(),
    )?;
    let series: Vec<StepMetrics> =
        reports.iter().flat_map(|r| r.steps.iter().cloned()).collect();
    let trained = reports.iter().filter(|r| !r.skipped).count();
    println!(
        "incremental run: {} phases ({} trained, {} skipped)",
        reports.len(),
        trained,
        reports.len() - trained
    );
    finish_training_run(cfg, &dir, "pit-run", &ds, &mcfg, &series, params, opt, end)
}

fn checkpoint_path(cfg: &RunConfig, explicit: Option<&Path>) -> PathBuf {
    explicit
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from(&cfg.output_dir).join("checkpoint.bin"))
}

pub fn eval(cfg: &RunConfig, checkpoint: Option<&Path>) -> CmdResult {
    let dir = echo_config(cfg)?;
    let ds = load_dataset(cfg)?;
    let ck = checkpoint_load(&checkpoint_path(cfg, checkpoint))?;
    let report: EvalReport = evaluate(&ck.params, &ds, &ck.model, &cfg.eval_config())?;
    fs::write(dir.join("eval.csv"), report.to_csv())?;
    let rows: Vec<MetricsRow> = report
        .ks
        .iter()
        .zip(&report.overall)
        .map(|(&k, &hr)| MetricsRow {
            experiment: "eval".into(),
            step: -1,
            scenario: "overall".into(),
            metric: format!("hr@{}", k),
            value: hr,
            seed: cfg.seed,
        })
        .collect();
    emit_metrics(&dir.join("metrics.csv"), &rows)?;
    for (k, hr) in report.ks.iter().zip(&report.overall) {
        println!("HR@{} = {:.4} ({} users, {} skipped)", k, hr, report.users, report.skipped_users);
    }
    Ok(())
}

#[derive(Serialize)]
struct RetrieveOutput<'a> {
    user_id: &'a str,
    items: &'a [String],
    scores: &'a [f64],
}

pub fn retrieve(cfg: &RunConfig, checkpoint: Option<&Path>, user_id: &str, k: Option<usize>) -> CmdResult {
    let ds = load_dataset(cfg)?;
    let ck = checkpoint_load(&checkpoint_path(cfg, checkpoint))?;
    let user: &UserSequence = ds
        .users
        .iter()
        .find(|u| u.user_id == user_id)
        .ok_or_else(|| CliError::Runtime(format!("unknown user {:?}", user_id)))?;
    let last = user
        .sessions
        .last()
        .ok_or_else(|| CliError::Runtime(format!("user {:?} has no sessions", user_id)))?;
    let seq = build_token_sequence(
        user,
        last.scenario,
        last.start_time + 1,
        ck.model.max_seq_len,
        ck.model.side_vocab.time_buckets,
        &|item| ds.catalog.items[item].side.clone(),
    )?;
    let out = run_forward(&seq, &ck.params, &ck.model)?;
    let (_, ctx) = out
        .context_outputs
        .iter()
        .next_back()
        .ok_or_else(|| CliError::Runtime("no trailing context output".into()))?;
    let index = build_index(&ds.catalog, &ck.params, &cfg.index_config())?;
    let result = retrieve_topk(ctx, &index, k.unwrap_or(cfg.retrieval_k))?;
    let line = serde_json::to_string(&RetrieveOutput {
        user_id,
        items: &result.ids,
        scores: &result.scores,
    })
    .expect("retrieval output serializes");
    println!("{}", line);
    Ok(())
}

pub fn grad_check_cmd(cfg: &RunConfig) -> CmdResult {
    let dir = echo_config(cfg)?;
    let ds = load_dataset(cfg)?;
    let mcfg = sized_model(cfg, &ds)?;
    let params = Parameters::init(&mcfg, derive_seed(cfg.seed, "init"));
    let users = &ds.users[..ds.users.len().min(4)];
    let report = grad_check(
        users,
        &ds.catalog,
        &params,
        &mcfg,
        &cfg.loss_config(),
        4,
        derive_seed(cfg.seed, "grad-check"),
    )?;
    print!("{}", report.to_text());
    fs::write(dir.join("grad_check.csv"), report.to_csv())?;
    if report.pass {
        Ok(())
    } else {
        Err(CliError::Runtime("gradient check failed".into()))
    }
}

const ABLATIONS: [&str; 4] = ["tsn", "msp", "moe", "sw_rope"];

fn with_toggle_off(cfg: &RunConfig, name: &str) -> RunConfig {
    let mut v = cfg.clone();
    match name {
        "tsn" => v.model_tsn = false,
        "msp" => v.model_msp = false,
        "moe" => v.model_moe = false,
        "sw_rope" => v.model_sw_rope = false,
        _ => unreachable!("fixed ablation list"),
    }
    v
}

pub fn ablate(cfg: &RunConfig) -> CmdResult {
    let dir = echo_config(cfg)?;
    let ds = load_dataset(cfg)?;
    let mut summary = String::from("variant,param_count,param_delta_vs_base,final_loss\n");
    let mut base_count = 0usize;

    let mut variants = vec![("base".to_string(), cfg.clone())];
    for name in ABLATIONS {
        variants.push((format!("no_{}", name), with_toggle_off(cfg, name)));
    }
    for (name, vcfg) in &variants {
        let mcfg = sized_model(vcfg, &ds)?;
        let count = param_count(&mcfg);
        if name == "base" {
            base_count = count;
        }
        let mut params = Parameters::init(&mcfg, derive_seed(vcfg.seed, "init"));
        let mut opt = OptimizerState::new(vcfg.train_lr);
        let series = train_steps(
            &ds,
            &mut params,
            &mut opt,
            &mcfg,
            &vcfg.loss_config(),
            &vcfg.train_config(),
            vcfg.train_steps,
        )?;
        let final_loss = series.last().map(|m| m.breakdown.total).unwrap_or(f64::NAN);
        if !final_loss.is_finite() {
            return Err(CliError::Runtime(format!(
                "variant {} trained to non-finite loss",
                name
            )));
        }
        let vdir = dir.join(format!("ablate_{}", name));
        fs::create_dir_all(&vdir)?;
        fs::write(
            vdir.join("train_metrics.csv"),
            train_metrics_csv(&series, &ds.scenarios),
        )?;
        let _ = writeln!(
            summary,
            "{},{},{},{}",
            name,
            count,
            count as i64 - base_count as i64,
            final_loss
        );
        emit_metrics(
            &dir.join("metrics.csv"),
            &[MetricsRow {
                experiment: format!("ablate_{}", name),
                step: series.last().map(|m| m.step as i64).unwrap_or(-1),
                scenario: "overall".into(),
                metric: "loss_total".into(),
                value: final_loss,
                seed: vcfg.seed,
            }],
        )?;
        println!("{}: {} params, final loss {:.6}", name, count, final_loss);
    }
    fs::write(dir.join("ablation.csv"), summary)?;
    Ok(())
}

pub fn scale(cfg: &RunConfig, dims: &[usize]) -> CmdResult {
    if dims.is_empty() {
        return Err(CliError::Usage("scale needs at least one dim".into()));
    }
    let dir = echo_config(cfg)?;
    let ds = load_dataset(cfg)?;
    let mut summary = String::from("dim,param_count,log10_params,hr_at_k\n");
    for &dim in dims {
        let mut vcfg = cfg.clone();
        vcfg.model_dim = dim;
        // Keep the expert width proportional so capacity actually scales.
        vcfg.model_moe_expert_hidden = cfg.model_moe_expert_hidden * dim / cfg.model_dim.max(1);
        vcfg.model_ff_hidden = cfg.model_ff_hidden * dim / cfg.model_dim.max(1);
        let mcfg = sized_model(&vcfg, &ds)?;
        let count = param_count(&mcfg);
        let mut params = Parameters::init(&mcfg, derive_seed(vcfg.seed, "init"));
        let mut opt = OptimizerState::new(vcfg.train_lr);
        let series = train_steps(
            &ds,
            &mut params,
            &mut opt,
            &mcfg,
            &vcfg.loss_config(),
            &vcfg.train_config(),
            vcfg.train_steps,
        )?;
        let mut ecfg = vcfg.eval_config();
        ecfg.ks = vec![vcfg.retrieval_k];
        let report = evaluate(&params, &ds, &mcfg, &ecfg)?;
        let hr = report.overall[0];
        let _ = writeln!(summary, "{},{},{},{}", dim, count, (count as f64).log10(), hr);
        emit_metrics(
            &dir.join("metrics.csv"),
            &[MetricsRow {
                experiment: format!("scale_dim{}", dim),
                step: series.last().map(|m| m.step as i64).unwrap_or(-1),
                scenario: "overall".into(),
                metric: format!("hr@{}", vcfg.retrieval_k),
                value: hr,
                seed: vcfg.seed,
            }],
        )?;
        println!("dim {}: {} params, HR@{} = {:.4}", dim, count, vcfg.retrieval_k, hr);
    }
    fs::write(dir.join("scale.csv"), summary)?;
    Ok(())
}
