use std::path::Path;

use anyhow::{bail, Context, Result};
use serde_json::json;

use langmerge_core::dataprep::{self, clean_transcript, lookup_language, Manifest};
use langmerge_core::evaluator::{read_transcripts_tsv, CommandBackend, MockBackend};
use langmerge_core::lora::{merge_adapters, merge_lora};
use langmerge_core::metrics::{self, normalize_and_tokenize, Vocabulary};
use langmerge_core::{
    apply_task_vector, compute_task_vector, read_checkpoint, tune, write_checkpoint, EvalBackend,
    LoraAdapter, MergeMode, MergeSource, MergeSpec, MockObjective, OptimizeError, RunConfig,
    TaskVector, TensorMap,
};

use crate::{
    Cli, Command, CorrArgs, DiffArgs, LangsArgs, MergeArgs, PrepArgs, SimArgs, SupportArgs,
    TuneArgs, WerArgs,
};

pub fn run(cli: Cli) -> Result<()> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.set_seed(seed);
    }
    match cli.command {
        Command::Diff(args) => diff(args, config),
        Command::Merge(args) => merge(args, config),
        Command::Tune(args) => tune_lambda(args, config),
        Command::Wer(args) => wer(args, config),
        Command::Sim(args) => sim(args),
        Command::Corr(args) => corr(args),
        Command::Prep(args) => prep(args, config),
        Command::Langs(args) => langs(args),
    }
}

/// Validates and echoes the configuration a subcommand will run with.
fn resolved(config: RunConfig) -> Result<RunConfig> {
    config.validate()?;
    log::info!("resolved config: {}", config.to_json());
    Ok(config)
}

fn print_json(value: &serde_json::Value) {
    println!("{value}");
}

fn read(path: &Path) -> Result<TensorMap> {
    read_checkpoint(path).with_context(|| format!("reading {}", path.display()))
}

fn read_adapter(path: &Path) -> Result<LoraAdapter> {
    LoraAdapter::from_tensor_map(&read(path)?)
        .with_context(|| format!("{} is not a LoRA adapter", path.display()))
}

fn diff(args: DiffArgs, mut config: RunConfig) -> Result<()> {
    if let Some(p) = args.name_policy {
        config.merge.name_policy = p;
    }
    let config = resolved(config)?;
    let base = read(&args.base)?;
    let finetuned = read(&args.finetuned)?;
    let tv = compute_task_vector(&finetuned, &base, config.merge.name_policy)?;
    write_checkpoint(&tv.to_tensor_map(), &args.out)?;
    log::info!("wrote task vector to {}", args.out.display());
    print_json(&json!({
        "tensors": tv.deltas().len(),
        "l2_norm": tv.l2_norm(),
        "base_fingerprint": tv.base_fingerprint(),
    }));
    Ok(())
}

fn merge(args: MergeArgs, mut config: RunConfig) -> Result<()> {
    if let Some(l) = args.lambda {
        config.merge.lambda = l;
    }
    if let Some(m) = args.mode {
        config.merge.mode = m;
    }
    if let Some(p) = args.name_policy {
        config.merge.name_policy = p;
    }
    let config = resolved(config)?;
    let spec = config.merge;
    let [lo, hi] = config.optimizer.bounds;
    spec.validate(lo, hi)?;

    let merged = match (&args.with.task_vector, &args.with.support) {
        (Some(tv_path), _) => {
            let target = read(&args.target)?;
            let tv = TaskVector::from_tensor_map(read(tv_path)?)?;
            log::info!(
                "applying task vector (base {}) to target {} at lambda {}",
                tv.base_fingerprint(),
                target.fingerprint(),
                spec.lambda
            );
            apply_task_vector(&target, &tv, spec.lambda, spec.name_policy)?
        }
        (None, Some(support_path)) => {
            let target = read_adapter(&args.target)?;
            let support = read_adapter(support_path)?;
            log::info!("merging adapters, mode {} lambda {}", spec.mode, spec.lambda);
            match (&args.base, spec.mode) {
                (Some(base), _) => merge_adapters(&target, &support, &spec)?.materialize(&read(base)?)?,
                (None, MergeMode::PerMatrix) => merge_lora(&target, &support, &spec)?.to_tensor_map(),
                (None, MergeMode::DeltaSpace) => {
                    bail!("DELTA_SPACE has no low-rank form; pass --base to write merged weights")
                }
            }
        }
        (None, None) => unreachable!("clap requires one of --task-vector/--support"),
    };
    log::info!("merged fingerprint {}", merged.fingerprint());
    write_checkpoint(&merged, &args.out)?;
    print_json(&json!({
        "out": args.out,
        "lambda": spec.lambda,
        "mode": spec.mode,
        "tensors": merged.len(),
    }));
    Ok(())
}

fn merge_source(target: &Path, with: &SupportArgs, base: Option<&Path>, spec: &MergeSpec) -> Result<MergeSource> {
    Ok(match (&with.task_vector, &with.support) {
        (Some(tv), _) => MergeSource::TaskVector {
            target: read(target)?,
            task_vector: TaskVector::from_tensor_map(read(tv)?)?,
            policy: spec.name_policy,
        },
        (None, Some(support)) => {
            let Some(base) = base else {
                bail!("--support needs --base to materialize merged weights");
            };
            MergeSource::Lora {
                base: read(base)?,
                target: read_adapter(target)?,
                support: read_adapter(support)?,
                mode: spec.mode,
            }
        }
        (None, None) => unreachable!("clap requires one of --task-vector/--support"),
    })
}

fn tune_lambda(args: TuneArgs, mut config: RunConfig) -> Result<()> {
    if let Some(m) = args.mode {
        config.merge.mode = m;
    }
    if let Some(p) = args.name_policy {
        config.merge.name_policy = p;
    }
    if let Some(budget) = args.budget {
        config.optimizer.budget = budget;
        config.optimizer.init_points = config.optimizer.init_points.min(budget);
    }
    if let Some(rules) = args.rules {
        config.rules_path = Some(rules);
    }
    if let Some(cmd) = args.eval_template {
        config.evaluator.command = Some(cmd);
        config.evaluator.mock = None;
    }
    if let Some(t) = args.timeout {
        config.evaluator.timeout_s = t;
    }
    if let Some(optimum) = args.mock_optimum {
        let prior = config.evaluator.mock.unwrap_or_default();
        config.evaluator.mock = Some(MockObjective {
            optimum,
            floor: args.mock_floor.unwrap_or(prior.floor),
            curvature: args.mock_curvature.unwrap_or(prior.curvature),
            seed: config.seed,
        });
    }
    if let Some(proxy) = args.proxy {
        config.evaluator.proxy_language = Some(proxy);
    } else if let (None, Some(lang)) = (&config.evaluator.proxy_language, &args.lang) {
        config.evaluator.proxy_language = Some(lookup_language(lang)?.proxy.clone());
    }
    let config = resolved(config)?;

    let source = merge_source(&args.target, &args.with, args.base.as_deref(), &config.merge)?;
    let outcome = match config.evaluator.mock {
        Some(obj) => {
            log::info!("evaluating with the quadratic mock {obj:?}");
            run_tune(&source, MockBackend::new(obj), &config, &args.log_out)?
        }
        None => {
            let manifest = args
                .manifest
                .context("--manifest is required with an external evaluator")?;
            let proxy = config
                .evaluator
                .proxy_language
                .clone()
                .context("no decoding language: pass --lang or --proxy")?;
            let evaluator = config.evaluator.external(config.ruleset()?)?;
            log::info!(
                "dev-set references and hypotheses are both cleaned with {} before scoring",
                match &config.rules_path {
                    Some(p) => p.display().to_string(),
                    None => "the built-in ruleset".into(),
                }
            );
            let backend = CommandBackend::new(evaluator, manifest, proxy)?;
            run_tune(&source, backend, &config, &args.log_out)?
        }
    };

    let best = source.merged(outcome.best_lambda)?;
    write_checkpoint(&best, &args.out)?;
    log::info!("wrote best merged checkpoint to {}", args.out.display());
    print_json(&json!({
        "best_lambda": outcome.best_lambda,
        "best_wer": outcome.comparison.wer_merged,
        "wer_target_only": outcome.comparison.wer_target_only,
        "delta_wer": outcome.comparison.delta_wer,
        "trials": outcome.log.len(),
    }));
    Ok(())
}

fn run_tune<B: EvalBackend>(
    source: &MergeSource,
    backend: B,
    config: &RunConfig,
    log_out: &Path,
) -> Result<langmerge_core::TuneOutcome> {
    let write_log = |log: &langmerge_core::TrialLog| {
        std::fs::write(log_out, log.to_jsonl()).with_context(|| format!("writing {}", log_out.display()))
    };
    match tune(source, backend, &config.optimizer) {
        Ok(outcome) => {
            write_log(&outcome.log)?;
            Ok(outcome)
        }
        Err(OptimizeError { partial, source }) => {
            write_log(&partial)?;
            log::error!("partial trial log ({} trials) kept at {}", partial.len(), log_out.display());
            Err(source.into())
        }
    }
}

fn wer(args: WerArgs, mut config: RunConfig) -> Result<()> {
    if let Some(rules) = args.rules {
        config.rules_path = Some(rules);
    }
    let config = resolved(config)?;
    let rules = config.ruleset()?;
    let clean = |rows: Vec<(String, String)>| -> Vec<(String, String)> {
        rows.into_iter()
            .map(|(id, text)| (id, clean_transcript(&text, &rules)))
            .collect()
    };
    let refs = clean(read_transcripts_tsv(&args.refs)?);
    let hyps = clean(read_transcripts_tsv(&args.hyps)?);
    let report = metrics::wer(&refs, &hyps)?;
    let mut out = json!({
        "wer": report.wer,
        "total_edits": report.total_edits,
        "total_ref_words": report.total_ref_words,
    });
    if args.detail {
        out["per_utterance"] = serde_json::to_value(&report.per_utterance)?;
    }
    print_json(&out);
    Ok(())
}

fn corpus_tokens(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(text.lines().flat_map(normalize_and_tokenize).collect())
}

fn sim(args: SimArgs) -> Result<()> {
    let a = corpus_tokens(&args.a)?;
    let b = corpus_tokens(&args.b)?;
    let vocab = Vocabulary::from_corpora([&a, &b]);
    let cosine = metrics::cosine_similarity(&vocab.count(&a)?, &vocab.count(&b)?)?;
    print_json(&json!({
        "cosine": cosine,
        "vocab_size": vocab.len(),
        "tokens_a": a.len(),
        "tokens_b": b.len(),
    }));
    Ok(())
}

fn read_pairs(path: &Path) -> Result<(Vec<f64>, Vec<f64>)> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').map(str::trim).collect();
        let parsed = match fields.as_slice() {
            [x, y] => x.parse::<f64>().ok().zip(y.parse::<f64>().ok()),
            _ => bail!("{}:{}: expected two tab-separated columns", path.display(), i + 1),
        };
        match parsed {
            Some((x, y)) => {
                xs.push(x);
                ys.push(y);
            }
            None if i == 0 => log::debug!("skipping header `{line}`"),
            None => bail!("{}:{}: non-numeric value", path.display(), i + 1),
        }
    }
    Ok((xs, ys))
}

fn corr(args: CorrArgs) -> Result<()> {
    let (xs, ys) = read_pairs(&args.table)?;
    let p = metrics::pearson(&xs, &ys)?;
    let s = metrics::spearman(&xs, &ys)?;
    print_json(&json!({
        "n": xs.len(),
        "pearson": {"r": p.coefficient, "p_value": p.p_value},
        "spearman": {"rho": s.coefficient, "p_value": s.p_value},
    }));
    Ok(())
}

fn prep(args: PrepArgs, mut config: RunConfig) -> Result<()> {
    if let Some(rules) = args.rules {
        config.rules_path = Some(rules);
    }
    if let Some(cap) = args.cap {
        config.cap = cap;
    }
    let config = resolved(config)?;
    let rules = config.ruleset()?;

    let raw = Manifest::read_tsv(&args.manifest, &args.lang)?;
    let mut stages = vec![("input", raw.len())];
    let m = dataprep::filter_samples(&raw);
    stages.push(("filter", m.len()));
    let m = dataprep::clean_manifest(&m, &rules);
    stages.push(("clean", m.len()));
    let m = dataprep::flag_truncation(&m, dataprep::MAX_AUDIO_SECONDS);
    stages.push(("flag_truncation", m.len()));
    let truncated = m.records.iter().filter(|r| r.truncated).count();
    let m = dataprep::upsample(&m)?;
    stages.push(("upsample", m.len()));
    let m = dataprep::cap_manifest(&m, config.cap, config.seed)?;
    stages.push(("cap", m.len()));

    let file = std::fs::File::create(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    m.write_jsonl(file)?;
    print_json(&json!({
        "language": m.language,
        "kind": m.kind,
        "stages": stages
            .iter()
            .map(|(stage, records)| json!({"stage": stage, "records": records}))
            .collect::<Vec<_>>(),
        "truncated": truncated,
        "cap": config.cap,
        "seed": config.seed,
    }));
    Ok(())
}

fn langs(args: LangsArgs) -> Result<()> {
    let table = dataprep::language_table();
    if args.json {
        println!("{}", serde_json::to_string_pretty(table)?);
        return Ok(());
    }
    println!("code\tname\tfamily\tsupports\tproxy\tscript\ttest_only");
    for m in table {
        let supports = if m.supports.is_empty() {
            "-".to_string()
        } else {
            m.supports.join(",")
        };
        println!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            m.target,
            m.name,
            m.family,
            supports,
            m.proxy,
            m.script,
            if m.test_only { "test-only" } else { "-" }
        );
    }
    Ok(())
}
