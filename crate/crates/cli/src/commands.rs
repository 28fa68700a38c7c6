use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use structprompt::context::AlignmentStrategy;
use structprompt::eval::{
    evaluate, induction_corpus, measure_cost, measure_encode, task_corpus, toy_train, EvalReport, Grouping,
    InductionCorpusSpec, Mode, Optimizer, Protocol, TaskSpec, TrainConfig,
};
use structprompt::inference::GenerationParams;
use structprompt::model::{ModelConfig, ModelWeights, Vocab};

use crate::config::{
    check_writable_parent, load_task, log_path, resolve_task_spec, vocab_path, CliResult, LoadedTask, RunConfig,
};
use crate::report::{fmt_f, Report, Row};

fn model_config(cfg: &RunConfig, vocab_size: usize, default_positions: usize) -> ModelConfig {
    let base = ModelConfig::desk(vocab_size, cfg.seed.unwrap_or(0));
    let d_model = cfg.d_model.unwrap_or(base.d_model);
    let n_heads = cfg.n_heads.unwrap_or(base.n_heads);
    ModelConfig {
        vocab_size,
        d_model,
        n_heads,
        d_head: d_model / n_heads.max(1),
        n_layers: cfg.n_layers.unwrap_or(base.n_layers),
        max_positions: cfg.max_positions.unwrap_or(default_positions),
        seed: base.seed,
    }
}

pub fn train(cfg: &RunConfig) -> CliResult<Report> {
    let out = cfg.out.as_deref().or(cfg.model.as_deref()).ok_or("--out is required for train")?;
    check_writable_parent(out)?;
    let task_name = cfg.task.as_deref().unwrap_or("lookup");
    let spec = resolve_task_spec(task_name)?
        .ok_or("train needs a synthetic task (lookup, classification or a task spec file)")?;
    let vocab = spec.vocab();
    let model_cfg = model_config(cfg, vocab.len(), 64);
    model_cfg.validate().map_err(|e| e.to_string())?;

    let seed = cfg.seed.unwrap_or(0);
    let corpus = task_corpus(&spec, &vocab, cfg.episodes.unwrap_or(20_000), model_cfg.max_positions, seed)
        .map_err(|e| e.to_string())?;
    let optimizer = match cfg.optimizer.as_deref().unwrap_or("adam") {
        "adam" => Optimizer::adam(),
        "sgd" => Optimizer::Sgd { momentum: cfg.momentum.unwrap_or(0.9) },
        other => return Err(format!("unknown optimizer {other:?}; expected sgd or adam")),
    };
    let train_cfg = TrainConfig {
        steps: cfg.steps.unwrap_or(1500),
        learning_rate: cfg.learning_rate.unwrap_or(1e-3),
        batch_size: cfg.batch_size.unwrap_or(64),
        optimizer,
        clip_norm: cfg.clip_norm.or(Some(1.0)),
        warmup: cfg.warmup,
        seed,
        log_every: 50,
    };
    let induction_steps = match spec {
        TaskSpec::Lookup { .. } => cfg.induction_steps.unwrap_or(1500),
        TaskSpec::Classification { .. } => 0,
    };
    let mut weights = ModelWeights::init_random(&model_cfg).map_err(|e| e.to_string())?;
    let mut log = Vec::new();
    if induction_steps > 0 {
        let content: Vec<u32> = spec.content_words().iter().filter_map(|w| vocab.id(w)).collect();
        let corpus_spec = InductionCorpusSpec { seed, ..InductionCorpusSpec::default() };
        let induction = induction_corpus(&corpus_spec, &content).map_err(|e| e.to_string())?;
        let stage = TrainConfig { steps: induction_steps, ..train_cfg.clone() };
        let outcome = toy_train(&weights, &induction, &stage).map_err(|e| e.to_string())?;
        log.extend(outcome.log.iter().map(|r| json!({ "stage": "induction", "step": r.step, "loss": r.loss })));
        weights = outcome.weights;
    }
    let outcome = toy_train(&weights, &corpus, &train_cfg).map_err(|e| e.to_string())?;
    log.extend(outcome.log.iter().map(|r| json!({ "stage": "task", "step": r.step, "loss": r.loss })));

    outcome.weights.save(out).map_err(|e| format!("writing {}: {e}", out.display()))?;
    let vocab_json = serde_json::to_string_pretty(&vocab).map_err(|e| e.to_string())?;
    fs::write(vocab_path(out), vocab_json).map_err(|e| e.to_string())?;
    let mut log_file = fs::File::create(log_path(out)).map_err(|e| e.to_string())?;
    for record in &log {
        writeln!(log_file, "{record}").map_err(|e| e.to_string())?;
    }

    let final_loss = outcome.final_loss.map(fmt_f).unwrap_or_else(|| "-".into());
    let record = json!({
        "weights": out,
        "model": model_cfg,
        "train": train_cfg,
        "induction_steps": induction_steps,
        "task": spec,
        "final_loss": outcome.final_loss,
    });
    Ok(Report {
        command: "train",
        header: vec!["weights", "parameters", "steps", "final_loss"],
        rows: vec![Row::ok(
            record,
            vec![
                out.display().to_string(),
                outcome.weights.parameter_count().to_string(),
                (induction_steps + train_cfg.steps).to_string(),
                final_loss,
            ],
        )],
    })
}

struct Loaded {
    weights: ModelWeights,
    vocab: Vocab,
    task: LoadedTask,
}

fn load_for_eval(cfg: &RunConfig) -> CliResult<Loaded> {
    let model = cfg.require_model()?;
    let task = load_task(cfg.task.as_deref().ok_or("--task is required")?)?;
    if let Some(out) = &cfg.out {
        check_writable_parent(out)?;
    }
    let weights = ModelWeights::load(model).map_err(|e| format!("loading {}: {e}", model.display()))?;
    let sidecar = vocab_path(model);
    let vocab = if sidecar.exists() {
        let text = fs::read_to_string(&sidecar).map_err(|e| e.to_string())?;
        serde_json::from_str(&text).map_err(|e| format!("parsing {}: {e}", sidecar.display()))?
    } else {
        task.vocab()
    };
    Ok(Loaded { weights, vocab, task })
}

fn base_protocol(cfg: &RunConfig, mode: Mode, shots: usize, grouping: Grouping) -> Protocol {
    let defaults = GenerationParams::default();
    Protocol {
        shots,
        mode,
        grouping,
        strategy: cfg.strategy.unwrap_or(AlignmentStrategy::Truncate),
        scale_factor: cfg.scale_factor,
        alignment_length: None,
        seeds: cfg.seeds(),
        generation: GenerationParams {
            beam_width: cfg.beam_width.unwrap_or(defaults.beam_width),
            length_penalty: cfg.alpha.unwrap_or(defaults.length_penalty),
            max_new_tokens: cfg.max_new_tokens.unwrap_or(defaults.max_new_tokens),
            stop_token: defaults.stop_token,
        },
    }
}

const EVAL_HEADER: [&str; 11] =
    ["setting", "mode", "N", "M", "strategy", "scale", "mean", "variance", "std", "encode_macs", "seconds"];

fn setting_label(protocol: &Protocol) -> String {
    match (protocol.mode, protocol.grouping) {
        (Mode::Conventional, _) => "1x".into(),
        (Mode::Structured, Grouping::Groups(m)) => format!("{m}x"),
        (Mode::Structured, Grouping::TokenBudget(b)) => format!("budget {b}"),
    }
}

fn report_cells(report: &EvalReport) -> Vec<String> {
    let p = &report.protocol;
    let first = report.per_seed.first();
    let groups = report.groups().map(|g| g.to_string()).unwrap_or_else(|| "varies".into());
    let scale = first.map(|s| format!("{}", s.scale_factor)).unwrap_or_default();
    let macs = first.map(|s| s.cost.encode_macs.to_string()).unwrap_or_default();
    let seconds: f64 = report.per_seed.iter().map(|s| s.total_seconds).sum();
    vec![
        setting_label(p),
        p.mode.to_string(),
        p.shots.to_string(),
        groups,
        p.strategy.to_string(),
        scale,
        fmt_f(report.mean),
        fmt_f(report.variance),
        fmt_f(report.std),
        macs,
        format!("{seconds:.2}"),
    ]
}

fn run_protocol(loaded: &Loaded, protocol: &Protocol) -> Row {
    match evaluate(&loaded.weights, &loaded.vocab, &loaded.task.task, protocol) {
        Ok(report) => {
            let cells = report_cells(&report);
            Row::ok(report, cells)
        }
        Err(e) => {
            let cells = vec![setting_label(protocol), protocol.mode.to_string(), protocol.shots.to_string()];
            Row::failed(json!({ "protocol": protocol }), e.to_string(), cells, EVAL_HEADER.len())
        }
    }
}

pub fn eval(cfg: &RunConfig) -> CliResult<Report> {
    let loaded = load_for_eval(cfg)?;
    let modes = cfg.mode.clone().unwrap_or_else(|| vec![Mode::Conventional, Mode::Structured]);
    let shots = cfg.shots.clone().unwrap_or_else(|| vec![loaded.task.task.pool.len()]);
    let mut rows = Vec::new();
    for &mode in &modes {
        for &n in &shots {
            let groupings: Vec<Grouping> = match (mode, cfg.group_budget) {
                (Mode::Conventional, _) => vec![Grouping::Groups(1)],
                (Mode::Structured, Some(b)) => vec![Grouping::TokenBudget(b)],
                (Mode::Structured, None) => {
                    cfg.groups.clone().unwrap_or_else(|| vec![1]).into_iter().map(Grouping::Groups).collect()
                }
            };
            for g in groupings {
                rows.push(run_protocol(&loaded, &base_protocol(cfg, mode, n, g)));
            }
        }
    }
    Ok(Report { command: "eval", header: with_axis(None), rows })
}

fn with_axis(axis: Option<&'static str>) -> Vec<&'static str> {
    axis.into_iter().chain(EVAL_HEADER).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Axis {
    PromptLength,
    ScaleFactor,
    Alignment,
}

pub fn ablate(cfg: &RunConfig, axis: Axis) -> CliResult<Report> {
    let loaded = load_for_eval(cfg)?;
    let n = cfg.shots.as_ref().and_then(|s| s.first().copied()).unwrap_or(loaded.task.task.pool.len());
    let m = cfg.groups.as_ref().and_then(|g| g.first().copied()).unwrap_or(4);
    let structured = |grouping| base_protocol(cfg, Mode::Structured, n, grouping);

    let settings: Vec<(String, Protocol)> = match axis {
        Axis::PromptLength => {
            let window = loaded.weights.config.max_positions;
            let budgets: Vec<usize> = match &cfg.values {
                Some(v) => v.iter().map(|&b| b as usize).collect(),
                None => {
                    let top = window.saturating_sub(window / 4).max(1);
                    [top / 8, top / 4, top / 2, top].into_iter().filter(|&b| b > 0).collect()
                }
            };
            budgets.into_iter().map(|b| (b.to_string(), structured(Grouping::TokenBudget(b)))).collect()
        }
        Axis::ScaleFactor => {
            let values = cfg.values.clone().unwrap_or_else(|| {
                let m = m as f64;
                let mut v = vec![1.0, (m / 2.0).max(1.0), m, 2.0 * m];
                v.sort_by(f64::total_cmp);
                v.dedup();
                v
            });
            values
                .into_iter()
                .map(|s| {
                    let mut p = structured(Grouping::Groups(m));
                    p.scale_factor = Some(s);
                    (format!("{s}"), p)
                })
                .collect()
        }
        Axis::Alignment => AlignmentStrategy::ALL
            .into_iter()
            .map(|s| {
                let mut p = structured(Grouping::Groups(m));
                p.strategy = s;
                (s.to_string(), p)
            })
            .collect(),
    };

    let rows = settings
        .into_iter()
        .map(|(value, protocol)| {
            let mut row = run_protocol(&loaded, &protocol);
            row.cells.insert(0, value.clone());
            if let Some(obj) = row.record.as_object_mut() {
                obj.insert("axis_value".into(), json!(value));
            }
            row
        })
        .collect();
    let axis_name = match axis {
        Axis::PromptLength => "group_budget",
        Axis::ScaleFactor => "scale_factor",
        Axis::Alignment => "alignment",
    };
    Ok(Report { command: "ablate", header: with_axis(Some(axis_name)), rows })
}

pub fn bench(cfg: &RunConfig) -> CliResult<Report> {
    if let Some(out) = &cfg.out {
        check_writable_parent(out)?;
    }
    let lengths = cfg.lengths.clone().unwrap_or_else(|| vec![256, 512, 1024]);
    let groups = cfg.groups.clone().unwrap_or_else(|| vec![1, 2, 4, 8]);
    let longest = lengths.iter().copied().max().unwrap_or(1);
    let weights = match &cfg.model {
        Some(path) => ModelWeights::load(path).map_err(|e| format!("loading {}: {e}", path.display()))?,
        None => {
            let mut model_cfg = model_config(cfg, 64, longest + 1);
            model_cfg.d_model = cfg.d_model.unwrap_or(32);
            model_cfg.d_head = model_cfg.d_model / model_cfg.n_heads.max(1);
            model_cfg.n_layers = cfg.n_layers.unwrap_or(4);
            ModelWeights::init_random(&model_cfg).map_err(|e| e.to_string())?
        }
    };
    let wc = weights.config.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.unwrap_or(0));
    let mut rows = Vec::new();
    for &total in &lengths {
        let baseline = measure_cost(&[total], 0, wc.n_heads, wc.d_head).scaled(wc.n_layers);
        for &m in &groups {
            let context = json!({ "length": total, "groups": m });
            if m == 0 || m > total {
                let msg = format!("cannot split {total} tokens into {m} groups");
                rows.push(Row::failed(context, msg, vec![total.to_string(), m.to_string()], 7));
                continue;
            }
            let sizes = structprompt::eval::even_split(total, m);
            let token_groups: Vec<Vec<u32>> =
                sizes.iter().map(|&t| (0..t).map(|_| rng.gen_range(5..wc.vocab_size as u32)).collect()).collect();
            match measure_encode(&weights, &token_groups) {
                Ok(measured) => {
                    let ratio = measured.analytic_macs as f64 / baseline.encode_macs as f64;
                    let record = json!({
                        "length": total,
                        "groups": m,
                        "group_tokens": sizes,
                        "analytic_macs": measured.analytic_macs,
                        "counted_macs": measured.counted_macs,
                        "conventional_macs": baseline.encode_macs,
                        "ratio_to_conventional": ratio,
                        "wall_seconds": measured.wall_seconds,
                        "model": wc,
                    });
                    rows.push(Row::ok(
                        record,
                        vec![
                            total.to_string(),
                            m.to_string(),
                            measured.analytic_macs.to_string(),
                            measured.counted_macs.to_string(),
                            fmt_f(ratio),
                            format!("{:.4}", measured.wall_seconds),
                            baseline.encode_macs.to_string(),
                        ],
                    ));
                }
                Err(e) => rows.push(Row::failed(context, e.to_string(), vec![total.to_string(), m.to_string()], 7)),
            }
        }
    }
    Ok(Report {
        command: "bench",
        header: vec!["length", "M", "encode_macs", "counted_macs", "ratio", "seconds", "conventional_macs"],
        rows,
    })
}

pub fn write_outputs(report: &Report, cfg: &RunConfig, out: Option<&Path>) -> CliResult<()> {
    if let Some(path) = out {
        report.write_jsonl(path, cfg)?;
    }
    print!("{}", report.table());
    Ok(())
}
