use std::collections::HashMap;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context as _, Result};
use chatasu::corpus::{self, read_dialogues, read_jsonl, to_jsonl, Dialogue};
use chatasu::evaluation::{evaluate, evaluate_acr, per_dialogue_f1, significance};
use chatasu::gateway::{
    generate_batch, Backend, BackendConfig, GenerationRecord, HttpBackend, MockBackend, MockBehavior,
};
use chatasu::parsing::{
    parse_acr_output, parse_asu_output, render_acr_output, render_asu_target, AcrPrediction, AsuPrediction,
};
use chatasu::prompting::{acr_prompts, asu_prompts, parse_prompt_id, PromptRecord, PromptTemplate};
use chatasu::reward::{episode_reward, AcrGeneration, RewardConfig, RewardRecord};
use chatasu::rlsim::{curve_to_csv, simulate, Scenario};
use chatasu::Task;
use serde::Serialize;

use crate::output::RunLog;
use crate::{BackendArg, Command, Context, DataProblems, GenerateArgs, TaskArg, UsageError, DEFAULT_SEED};

pub fn dispatch(command: Command, ctx: &Context, log: &mut RunLog) -> Result<()> {
    match command {
        Command::Validate { files } => validate(&files, ctx, log),
        Command::Stats { file } => stats(&file, ctx, log),
        Command::Agreement { first, second } => agreement(&first, &second, ctx, log),
        Command::Prompt { task, file, template, template_file, output } => {
            prompt(task, &file, template, template_file, output.as_deref(), ctx, log)
        }
        Command::Generate(args) => generate(args, ctx, log),
        Command::Parse { task, generations, gold, output } => {
            parse(task, &generations, gold.as_deref(), output.as_deref(), log)
        }
        Command::Eval { gold, pred, acr_pred, per_dialogue } => {
            eval(&gold, &pred, acr_pred.as_deref(), per_dialogue.as_deref(), ctx, log)
        }
        Command::Reward { gold, generations, alpha, beta, gamma, output } => {
            reward(&gold, &generations, [alpha, beta, gamma], output.as_deref(), ctx, log)
        }
        Command::Simulate { scenario, scenario_file, steps, learning_rate, dump_scenario, output } => {
            let opts = SimulateOpts { scenario, scenario_file, steps, learning_rate, dump_scenario };
            run_simulate(opts, output.as_deref(), ctx, log)
        }
        Command::Significance { first, second } => significance_cmd(&first, &second, ctx, log),
    }
}

/// Prints `human` unless JSON was requested; `--json` alone prints the JSON
/// instead, `--json PATH` writes it there and still prints `human`.
fn report<T: Serialize>(ctx: &Context, log: &mut RunLog, human: &str, value: &T) -> Result<()> {
    match ctx.json.as_deref() {
        Some(p) if p == Path::new("-") => log.emit(None, &(serde_json::to_string_pretty(value)? + "\n")),
        Some(p) => {
            log.emit(Some(p), &(serde_json::to_string_pretty(value)? + "\n"))?;
            log.emit(None, human)
        }
        None => log.emit(None, human),
    }
}

fn dialogues(path: &Path, log: &mut RunLog) -> Result<Vec<Dialogue>> {
    log.input(path);
    Ok(read_dialogues(path)?)
}

fn records<T: serde::de::DeserializeOwned + Send>(path: &Path, log: &mut RunLog) -> Result<Vec<T>> {
    log.input(path);
    Ok(read_jsonl(path)?)
}

fn resolve(ctx: &Context, path: &Path) -> PathBuf {
    match ctx.config.base_dir() {
        Some(base) if path.is_relative() => base.join(path),
        _ => path.to_path_buf(),
    }
}

#[derive(Serialize)]
struct ValidationReport {
    file: String,
    dialogue_id: String,
    violations: Vec<String>,
}

fn validate(files: &[PathBuf], ctx: &Context, log: &mut RunLog) -> Result<()> {
    let mut problems = Vec::new();
    let mut n_dialogues = 0;
    for file in files {
        let ds = dialogues(file, log)?;
        n_dialogues += ds.len();
        let mut seen = std::collections::HashSet::new();
        for d in &ds {
            let mut violations: Vec<String> = corpus::validate(d).iter().map(ToString::to_string).collect();
            if !seen.insert(d.dialogue_id.clone()) {
                violations.push("dialogue_id appears more than once".into());
            }
            if !violations.is_empty() {
                problems.push(ValidationReport {
                    file: file.display().to_string(),
                    dialogue_id: d.dialogue_id.clone(),
                    violations,
                });
            }
        }
    }
    let mut human = String::new();
    for p in &problems {
        for v in &p.violations {
            human.push_str(&format!("{}: {}: {}\n", p.file, p.dialogue_id, v));
        }
    }
    human.push_str(&format!("{} dialogues checked, {} with violations\n", n_dialogues, problems.len()));
    report(ctx, log, &human, &problems)?;
    if problems.is_empty() {
        Ok(())
    } else {
        Err(DataProblems(format!("{} dialogues failed validation", problems.len())).into())
    }
}

fn stats(file: &Path, ctx: &Context, log: &mut RunLog) -> Result<()> {
    let ds = dialogues(file, log)?;
    let s = corpus::stats(&ds);
    report(ctx, log, &s.to_table(), &s)
}

fn agreement(first: &Path, second: &Path, ctx: &Context, log: &mut RunLog) -> Result<()> {
    let a = dialogues(first, log)?;
    let b = dialogues(second, log)?;
    let agr = corpus::agreement(&a, &b)?;
    let human = format!(
        "F1 {:.2}  accuracy {:.2}  (matched {}, first {}, second {})\n",
        agr.f1, agr.accuracy, agr.n_matched, agr.n_first, agr.n_second
    );
    report(ctx, log, &human, &agr)
}

fn template_for(task: Task, name: Option<String>, file: Option<PathBuf>, ctx: &Context) -> Result<PromptTemplate> {
    let (name, file) = match (name, file) {
        (None, None) => {
            let cfg = &ctx.config.prompt;
            (cfg.template.clone(), cfg.template_file.as_ref().map(|p| resolve(ctx, p)))
        }
        given => given,
    };
    let template = match (name, file) {
        (_, Some(path)) => PromptTemplate::load(&path)?,
        (Some(name), None) => PromptTemplate::named(&name).map_err(|e| UsageError(e.to_string()))?,
        (None, None) => PromptTemplate::default_for(task),
    };
    if template.task != task {
        return Err(UsageError(format!("template is for {:?}, not {:?}", template.task, task)).into());
    }
    Ok(template)
}

fn task_of(task: TaskArg) -> Task {
    match task {
        TaskArg::Asu => Task::Asu,
        TaskArg::Acr => Task::Acr,
    }
}

fn prompt(
    task: TaskArg,
    file: &Path,
    template: Option<String>,
    template_file: Option<PathBuf>,
    output: Option<&Path>,
    ctx: &Context,
    log: &mut RunLog,
) -> Result<()> {
    let task = task_of(task);
    let template = template_for(task, template, template_file, ctx)?;
    let ds = dialogues(file, log)?;
    log.setting("template", &template);
    let prompts = match task {
        Task::Asu => asu_prompts(&ds, &template)?,
        Task::Acr => acr_prompts(&ds, &template)?,
    };
    log.emit(output, &to_jsonl(&prompts))
}

/// Reference output for every prompt, used as the mock backend's answer key.
fn mock_targets(gold: &[Dialogue], prompts: &[PromptRecord]) -> Result<Vec<(String, String)>> {
    let by_id: HashMap<&str, &Dialogue> = gold.iter().map(|d| (d.dialogue_id.as_str(), d)).collect();
    prompts
        .iter()
        .map(|p| {
            let d = by_id
                .get(p.dialogue_id.as_str())
                .ok_or_else(|| anyhow!("prompt {}: dialogue not in gold file", p.prompt_id))?;
            let target = match p.task {
                Task::Asu => render_asu_target(&d.quadruples),
                Task::Acr => {
                    let explicit = p.explicit.as_deref().unwrap_or_default();
                    let chain = d
                        .chain(explicit)
                        .ok_or_else(|| anyhow!("prompt {}: no chain for {explicit:?}", p.prompt_id))?;
                    render_acr_output(&chain.labels)
                }
            };
            Ok((p.prompt.clone(), target))
        })
        .collect()
}

fn generate(args: GenerateArgs, ctx: &Context, log: &mut RunLog) -> Result<()> {
    let cfg = &ctx.config.generate;
    let backend_kind = match (args.backend, cfg.backend.as_deref()) {
        (Some(b), _) => b,
        (None, None | Some("mock")) => BackendArg::Mock,
        (None, Some("http")) => BackendArg::Http,
        (None, Some(other)) => return Err(UsageError(format!("unknown backend {other:?} in config")).into()),
    };
    let prompts: Vec<PromptRecord> = records(&args.prompts, log)?;
    let candidates = args.candidates.or(cfg.candidates).unwrap_or(4);
    let backend: Box<dyn Backend> = match backend_kind {
        BackendArg::Mock => {
            let gold =
                args.gold.as_deref().ok_or_else(|| UsageError("--gold is required for the mock backend".into()))?;
            let behavior: MockBehavior = args
                .behavior
                .as_deref()
                .or(cfg.behavior.as_deref())
                .unwrap_or("faithful")
                .parse()
                .map_err(|e: String| UsageError(e))?;
            let scores = args.scores.or(cfg.scores).unwrap_or(4);
            log.setting("backend", "mock");
            log.setting("behavior", format!("{behavior:?}").to_lowercase());
            log.setting("candidates", candidates);
            log.setting("scores", scores);
            let gold = dialogues(gold, log)?;
            let mut mock = MockBackend::new(behavior, ctx.seed.unwrap_or(DEFAULT_SEED), candidates, scores);
            for (prompt, target) in mock_targets(&gold, &prompts)? {
                mock.insert(prompt, target);
            }
            Box::new(mock)
        }
        BackendArg::Http => {
            let endpoint = args
                .endpoint
                .or_else(|| cfg.endpoint.clone())
                .ok_or_else(|| UsageError("--endpoint is required for the http backend".into()))?;
            let model = args
                .model
                .or_else(|| cfg.model.clone())
                .ok_or_else(|| UsageError("--model is required for the http backend".into()))?;
            let mut config = BackendConfig::new(endpoint, model);
            config.auth = args.auth_env.or_else(|| cfg.auth.clone());
            config.n_candidates = candidates;
            if let Some(v) = cfg.timeout_secs {
                config.timeout_secs = v;
            }
            if let Some(v) = cfg.max_retries {
                config.max_retries = v;
            }
            if let Some(v) = cfg.backoff_ms {
                config.backoff_ms = v;
            }
            if let Some(v) = cfg.max_in_flight {
                config.max_in_flight = v;
            }
            log.setting("backend", "http");
            log.setting("http", &config);
            Box::new(HttpBackend::new(config)?)
        }
    };
    let results = generate_batch(backend.as_ref(), &prompts);
    let mut out: Vec<GenerationRecord> = Vec::with_capacity(results.len());
    let mut failures = 0;
    for (p, r) in prompts.iter().zip(results) {
        match r {
            Ok(g) => out.push(g),
            Err(e) => {
                log::error!("prompt {}: {e}", p.prompt_id);
                failures += 1;
            }
        }
    }
    log.emit(args.output.as_deref(), &to_jsonl(&out))?;
    if failures > 0 {
        bail!("{failures} of {} prompts failed", prompts.len());
    }
    Ok(())
}

fn parse(
    task: TaskArg,
    generations: &Path,
    gold: Option<&Path>,
    output: Option<&Path>,
    log: &mut RunLog,
) -> Result<()> {
    let gens: Vec<GenerationRecord> = records(generations, log)?;
    let wanted = task_of(task);
    let routed = gens.iter().filter_map(|g| match parse_prompt_id(&g.prompt_id) {
        Some((id, t, explicit)) if t == wanted => Some((id, explicit, g)),
        Some(_) => None,
        None => {
            log::warn!("skipping generation with unrecognized prompt id {:?}", g.prompt_id);
            None
        }
    });
    let text = match wanted {
        Task::Asu => {
            let preds: Vec<AsuPrediction> = routed
                .map(|(dialogue_id, _, g)| {
                    let top = g.outputs.first().map(String::as_str).unwrap_or_default();
                    AsuPrediction { dialogue_id, quadruples: parse_asu_output(top).quadruples }
                })
                .collect();
            to_jsonl(&preds)
        }
        Task::Acr => {
            let gold = gold.ok_or_else(|| UsageError("--gold is required to parse chain outputs".into()))?;
            let gold = dialogues(gold, log)?;
            let lengths: HashMap<&str, usize> =
                gold.iter().map(|d| (d.dialogue_id.as_str(), d.utterances.len())).collect();
            let mut preds = Vec::new();
            for (dialogue_id, explicit, g) in routed {
                let n = *lengths
                    .get(dialogue_id.as_str())
                    .ok_or_else(|| anyhow!("dialogue {dialogue_id} not in gold file"))?;
                let top = g.outputs.first().map(String::as_str).unwrap_or_default();
                match parse_acr_output(top, n) {
                    Ok(parsed) => preds.push(AcrPrediction {
                        dialogue_id,
                        explicit: explicit.unwrap_or_default(),
                        labels: parsed.labels,
                    }),
                    Err(e) => log::warn!("{}: {e}", g.prompt_id),
                }
            }
            to_jsonl(&preds)
        }
    };
    log.emit(output, &text)
}

#[derive(Serialize)]
struct EvalOutput {
    asu: chatasu::EvalReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    acr: Option<chatasu::PrfScore>,
}

fn eval(
    gold: &Path,
    pred: &Path,
    acr_pred: Option<&Path>,
    per_dialogue: Option<&Path>,
    ctx: &Context,
    log: &mut RunLog,
) -> Result<()> {
    let gold = dialogues(gold, log)?;
    let preds: Vec<AsuPrediction> = records(pred, log)?;
    let asu = evaluate(&gold, &preds)?;
    let acr = match acr_pred {
        Some(p) => {
            let chains: Vec<AcrPrediction> = records(p, log)?;
            Some(evaluate_acr(&gold, &chains)?)
        }
        None => None,
    };
    let mut human = asu.to_table();
    if let Some(a) = &acr {
        human.push_str(&format!("Aspect chains F1: {:.2}\n", a.f1 * 100.0));
    }
    if let Some(path) = per_dialogue {
        let f1 = per_dialogue_f1(&gold, &preds)?;
        let text: String = f1.iter().map(|v| format!("{v}\n")).collect();
        log.emit(Some(path), &text)?;
    }
    report(ctx, log, &human, &EvalOutput { asu, acr })
}

fn reward(
    gold: &Path,
    generations: &Path,
    weights: [Option<f64>; 3],
    output: Option<&Path>,
    ctx: &Context,
    log: &mut RunLog,
) -> Result<()> {
    let mut config: RewardConfig = ctx.config.reward.unwrap_or_default();
    let [alpha, beta, gamma] = weights;
    config.alpha = alpha.unwrap_or(config.alpha);
    config.beta = beta.unwrap_or(config.beta);
    config.gamma = gamma.unwrap_or(config.gamma);
    config.validate().map_err(|e| UsageError(e.to_string()))?;
    log.setting("reward", config);

    let gold = dialogues(gold, log)?;
    let gens: Vec<GenerationRecord> = records(generations, log)?;
    let mut asu: HashMap<String, &GenerationRecord> = HashMap::new();
    let mut acr: HashMap<String, Vec<AcrGeneration>> = HashMap::new();
    for g in &gens {
        match parse_prompt_id(&g.prompt_id) {
            Some((id, Task::Asu, _)) => {
                asu.insert(id, g);
            }
            Some((id, Task::Acr, explicit)) => acr
                .entry(id)
                .or_default()
                .push(AcrGeneration { explicit: explicit.unwrap_or_default(), generation: g.result() }),
            None => log::warn!("skipping generation with unrecognized prompt id {:?}", g.prompt_id),
        }
    }
    let mut out = Vec::new();
    for d in &gold {
        let Some(a) = asu.get(&d.dialogue_id) else {
            log::warn!("dialogue {}: no extraction generation, skipped", d.dialogue_id);
            continue;
        };
        let chains = acr.remove(&d.dialogue_id).unwrap_or_default();
        let breakdown =
            episode_reward(&a.result(), &chains, d, &config).with_context(|| format!("dialogue {}", d.dialogue_id))?;
        out.push(RewardRecord { dialogue_id: d.dialogue_id.clone(), breakdown });
    }
    log.emit(output, &to_jsonl(&out))
}

struct SimulateOpts {
    scenario: Option<String>,
    scenario_file: Option<PathBuf>,
    steps: Option<usize>,
    learning_rate: Option<f64>,
    dump_scenario: bool,
}

fn builtin(name: &str) -> Result<Scenario> {
    Scenario::named(name).ok_or_else(|| UsageError(format!("unknown scenario {name:?} (faithful, repetitive)")).into())
}

/// Resolves the scenario from flags, then the config's `[simulate]` table
/// (either `builtin = NAME` with overrides, or a full scenario), then the
/// faithful built-in.
fn load_scenario(opts: &SimulateOpts, ctx: &Context, log: &mut RunLog) -> Result<Scenario> {
    if let Some(name) = &opts.scenario {
        return builtin(name);
    }
    if let Some(path) = &opts.scenario_file {
        log.input(path);
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        return Ok(Scenario::from_toml_str(&text, path.parent())?);
    }
    let Some(table) = &ctx.config.simulate else {
        return Ok(Scenario::faithful());
    };
    let mut table = table.clone();
    let text = match table.remove("builtin") {
        Some(toml::Value::String(name)) => {
            let mut base: toml::Table = toml::from_str(&builtin(&name)?.to_toml_string())?;
            base.extend(table);
            toml::to_string(&base)?
        }
        Some(_) => return Err(UsageError("[simulate] builtin must be a string".into()).into()),
        None => toml::to_string(&table)?,
    };
    Ok(Scenario::from_toml_str(&text, ctx.config.base_dir())?)
}

fn run_simulate(opts: SimulateOpts, output: Option<&Path>, ctx: &Context, log: &mut RunLog) -> Result<()> {
    let mut scenario = load_scenario(&opts, ctx, log)?;
    if let Some(steps) = opts.steps {
        scenario.steps = steps;
    }
    if let Some(lr) = opts.learning_rate {
        scenario.learning_rate = lr;
    }
    scenario.validate().map_err(|e| UsageError(e.to_string()))?;
    if opts.dump_scenario {
        return log.emit(output, &scenario.to_toml_string());
    }
    log.setting("scenario", &scenario);
    let seed = ctx.seed.unwrap_or(scenario.seed);
    log.setting("seed", seed);
    let curve = simulate(&scenario, seed)?;
    log.emit(output, &curve_to_csv(&curve))?;
    if let Some(last) = curve.last() {
        log::info!(
            "step {}: expected reward {:.4}, p_correct {:.4}, repetition {:.4}",
            last.step,
            last.expected_reward,
            last.p_correct,
            last.repetition_rate
        );
    }
    Ok(())
}

fn read_numbers(path: &Path, log: &mut RunLog) -> Result<Vec<f64>> {
    log.input(path);
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .map(|(i, l)| (i, l.split('#').next().unwrap_or("").trim()))
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| l.parse::<f64>().with_context(|| format!("{}:{}: not a number: {l:?}", path.display(), i + 1)))
        .collect()
}

fn significance_cmd(first: &Path, second: &Path, ctx: &Context, log: &mut RunLog) -> Result<()> {
    let a = read_numbers(first, log)?;
    let b = read_numbers(second, log)?;
    let t = significance(&a, &b)?;
    report(ctx, log, &format!("{t}\n"), &t)
}
