//! Boundary to ASR inference.
//!
//! Real evaluation runs an external command built from a template with the
//! placeholders `{checkpoint}`, `{manifest}`, `{lang}` and `{out}`. The
//! command must write `id<TAB>hypothesis` rows to `{out}`; those are joined
//! with the reference rows in `{manifest}` and scored by WER. A closed-form
//! mock stands in for inference when exercising the tuning loop.

use std::collections::HashMap;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use tempfile::TempDir;

use crate::checkpoint::{read_checkpoint, write_checkpoint, TensorMap};
use crate::dataprep::{clean_transcript, Ruleset};
use crate::error::{Error, Result};
use crate::lora::{merge_adapters, materialize_lora, LoraAdapter};
use crate::metrics::{wer, ComparisonReport, WerReport};
use crate::optimize::{optimize, OptimizeError, OptimizerConfig, TrialLog};
use crate::taskvec::{apply_task_vector, MergeMode, MergeSpec, NamePolicy, TaskVector};

const POLL_INTERVAL: Duration = Duration::from_millis(5);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalRequest {
    pub checkpoint_path: PathBuf,
    pub manifest_path: PathBuf,
    /// Language token the decoder is pinned to.
    pub proxy_language: String,
    pub output_path: PathBuf,
}

impl EvalRequest {
    /// Literal replacement of the four placeholders.
    pub fn render(&self, template: &str) -> String {
        template
            .replace("{checkpoint}", &self.checkpoint_path.to_string_lossy())
            .replace("{manifest}", &self.manifest_path.to_string_lossy())
            .replace("{lang}", &self.proxy_language)
            .replace("{out}", &self.output_path.to_string_lossy())
    }
}

/// Reads `id<TAB>text` rows. Every non-empty line needs a tab.
pub fn read_transcripts_tsv(path: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_transcripts_tsv(&text).map_err(|e| match e {
        Error::Parse(msg) => Error::Parse(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn parse_transcripts_tsv(text: &str) -> Result<Vec<(String, String)>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let line = line.trim_end_matches('\r');
            line.split_once('\t')
                .map(|(id, text)| (id.to_string(), text.to_string()))
                .ok_or_else(|| Error::Parse(format!("line {} has no tab separator", i + 1)))
        })
        .collect()
}

/// Runs an external inference command and scores its hypotheses.
#[derive(Debug, Clone)]
pub struct ExternalEvaluator {
    pub cmd_template: String,
    pub timeout: Duration,
    /// Environment variables copied from this process into the child; the
    /// child starts from an empty environment otherwise.
    pub env_allowlist: Vec<String>,
    /// Applied to references and hypotheses alike before scoring.
    pub rules: Ruleset,
}

impl ExternalEvaluator {
    pub fn new(cmd_template: impl Into<String>, timeout: Duration) -> Self {
        ExternalEvaluator {
            cmd_template: cmd_template.into(),
            timeout,
            env_allowlist: vec!["PATH".into()],
            rules: Ruleset::default(),
        }
    }

    pub fn validate_template(&self) -> Result<()> {
        for placeholder in ["{checkpoint}", "{manifest}", "{lang}", "{out}"] {
            if !self.cmd_template.contains(placeholder) {
                return Err(Error::InvalidArgument(format!(
                    "evaluator template lacks {placeholder}"
                )));
            }
        }
        Ok(())
    }

    pub fn run(&self, req: &EvalRequest) -> Result<WerReport> {
        self.validate_template()?;
        for path in [&req.checkpoint_path, &req.manifest_path] {
            if !path.exists() {
                return Err(Error::Evaluator(format!("{} does not exist", path.display())));
            }
        }
        let references = read_transcripts_tsv(&req.manifest_path)?;
        let _ = std::fs::remove_file(&req.output_path);

        let command = req.render(&self.cmd_template);
        log::debug!("running evaluator: {command}");
        self.spawn_and_wait(&command)?;

        if !req.output_path.exists() {
            return Err(Error::Evaluator(format!(
                "evaluator did not write {}",
                req.output_path.display()
            )));
        }
        let hypotheses = read_transcripts_tsv(&req.output_path)?;
        let hyp_ids: std::collections::HashSet<&str> =
            hypotheses.iter().map(|(id, _)| id.as_str()).collect();
        let missing: Vec<&str> = references
            .iter()
            .map(|(id, _)| id.as_str())
            .filter(|id| !hyp_ids.contains(id))
            .collect();
        if !missing.is_empty() {
            return Err(Error::Evaluator(format!(
                "hypotheses missing for {} utterance(s), first `{}`",
                missing.len(),
                missing[0]
            )));
        }
        let clean = |rows: Vec<(String, String)>| -> Vec<(String, String)> {
            rows.into_iter()
                .map(|(id, text)| (id, clean_transcript(&text, &self.rules)))
                .collect()
        };
        wer(&clean(references), &clean(hypotheses))
    }

    fn spawn_and_wait(&self, command: &str) -> Result<()> {
        let mut cmd = Command::new("/bin/sh");
        cmd.arg("-c")
            .arg(command)
            .env_clear()
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped());
        for key in &self.env_allowlist {
            if let Some(value) = std::env::var_os(key) {
                cmd.env(key, value);
            }
        }
        #[cfg(unix)]
        {
            use std::os::unix::process::CommandExt;
            cmd.process_group(0);
        }
        let mut child = cmd
            .spawn()
            .map_err(|e| Error::Evaluator(format!("cannot launch `{command}`: {e}")))?;

        let drain = |pipe: Option<Box<dyn Read + Send>>| {
            std::thread::spawn(move || {
                let mut buf = Vec::new();
                if let Some(mut p) = pipe {
                    let _ = p.read_to_end(&mut buf);
                }
                buf
            })
        };
        let stdout = drain(child.stdout.take().map(|p| Box::new(p) as Box<dyn Read + Send>));
        let stderr = drain(child.stderr.take().map(|p| Box::new(p) as Box<dyn Read + Send>));

        let started = Instant::now();
        let status = loop {
            match child.try_wait() {
                Ok(Some(status)) => break status,
                Ok(None) if started.elapsed() >= self.timeout => {
                    kill_tree(&mut child);
                    let _ = child.wait();
                    return Err(Error::Evaluator(format!(
                        "`{command}` timed out after {:.1}s",
                        self.timeout.as_secs_f64()
                    )));
                }
                Ok(None) => std::thread::sleep(POLL_INTERVAL),
                Err(e) => return Err(Error::Evaluator(format!("waiting on evaluator: {e}"))),
            }
        };
        let out = stdout.join().unwrap_or_default();
        let err = stderr.join().unwrap_or_default();
        if !out.is_empty() {
            log::debug!("evaluator stdout: {}", String::from_utf8_lossy(&out).trim_end());
        }
        if !status.success() {
            return Err(Error::Evaluator(format!(
                "`{command}` exited with {status}: {}",
                String::from_utf8_lossy(&err).trim_end()
            )));
        }
        Ok(())
    }
}

#[cfg(unix)]
fn kill_tree(child: &mut std::process::Child) {
    // The child leads its own process group; take the whole group down.
    let pgid = child.id() as libc::pid_t;
    unsafe {
        libc::kill(-pgid, libc::SIGKILL);
    }
}

#[cfg(not(unix))]
fn kill_tree(child: &mut std::process::Child) {
    let _ = child.kill();
}

/// `run_external_eval` with the default allowlist and cleaning rules.
pub fn run_external_eval(cmd_template: &str, req: &EvalRequest, timeout_s: f64) -> Result<WerReport> {
    if !(timeout_s.is_finite() && timeout_s > 0.0) {
        return Err(Error::InvalidArgument(format!("timeout must be positive, got {timeout_s}")));
    }
    ExternalEvaluator::new(cmd_template, Duration::from_secs_f64(timeout_s)).run(req)
}

/// Quadratic stand-in for dev-set WER as a function of lambda.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MockObjective {
    pub optimum: f64,
    pub floor: f64,
    pub curvature: f64,
    pub seed: u64,
}

impl Default for MockObjective {
    fn default() -> Self {
        MockObjective {
            optimum: 0.25,
            floor: 0.1,
            curvature: 1.0,
            seed: 0,
        }
    }
}

pub fn mock_eval(obj: &MockObjective, lambda: f64) -> f64 {
    obj.floor + obj.curvature * (lambda - obj.optimum) * (lambda - obj.optimum)
}

/// Scores a materialized checkpoint. `lambda` is the merge weight the
/// checkpoint was built with (zero for the target-only model).
pub trait EvalBackend {
    fn evaluate(&mut self, checkpoint: &Path, lambda: f64) -> Result<f64>;
}

/// Backend that answers with [`mock_eval`] after checking that the
/// checkpoint parses.
#[derive(Debug, Clone)]
pub struct MockBackend {
    pub objective: MockObjective,
    calls: usize,
}

impl MockBackend {
    pub fn new(objective: MockObjective) -> Self {
        MockBackend { objective, calls: 0 }
    }

    pub fn calls(&self) -> usize {
        self.calls
    }
}

impl EvalBackend for MockBackend {
    fn evaluate(&mut self, checkpoint: &Path, lambda: f64) -> Result<f64> {
        read_checkpoint(checkpoint)?;
        self.calls += 1;
        Ok(mock_eval(&self.objective, lambda))
    }
}

/// Backend that shells out through an [`ExternalEvaluator`].
#[derive(Debug)]
pub struct CommandBackend {
    pub evaluator: ExternalEvaluator,
    pub manifest_path: PathBuf,
    pub proxy_language: String,
    scratch: TempDir,
}

impl CommandBackend {
    pub fn new(evaluator: ExternalEvaluator, manifest_path: PathBuf, proxy_language: String) -> Result<Self> {
        evaluator.validate_template()?;
        if !manifest_path.exists() {
            return Err(Error::Evaluator(format!(
                "{} does not exist",
                manifest_path.display()
            )));
        }
        let scratch = tempfile::tempdir().map_err(|e| Error::io(std::env::temp_dir(), e))?;
        Ok(CommandBackend {
            evaluator,
            manifest_path,
            proxy_language,
            scratch,
        })
    }
}

impl EvalBackend for CommandBackend {
    fn evaluate(&mut self, checkpoint: &Path, _lambda: f64) -> Result<f64> {
        let req = EvalRequest {
            checkpoint_path: checkpoint.to_path_buf(),
            manifest_path: self.manifest_path.clone(),
            proxy_language: self.proxy_language.clone(),
            output_path: self.scratch.path().join("hypotheses.tsv"),
        };
        let report = self.evaluator.run(&req)?;
        let _ = std::fs::remove_file(&req.output_path);
        Ok(report.wer)
    }
}

/// What gets merged: a task vector onto a fine-tuned target, or a support
/// adapter into a target adapter over a shared base.
#[derive(Debug, Clone)]
pub enum MergeSource {
    TaskVector {
        target: TensorMap,
        task_vector: TaskVector,
        policy: NamePolicy,
    },
    Lora {
        base: TensorMap,
        target: LoraAdapter,
        support: LoraAdapter,
        mode: MergeMode,
    },
}

impl MergeSource {
    pub fn merged(&self, lambda: f64) -> Result<TensorMap> {
        match self {
            MergeSource::TaskVector {
                target,
                task_vector,
                policy,
            } => apply_task_vector(target, task_vector, lambda, *policy),
            MergeSource::Lora {
                base,
                target,
                support,
                mode,
            } => merge_adapters(target, support, &MergeSpec::new(lambda).with_mode(*mode))?
                .materialize(base),
        }
    }

    pub fn target_only(&self) -> Result<TensorMap> {
        match self {
            MergeSource::TaskVector { target, .. } => Ok(target.clone()),
            MergeSource::Lora { base, target, .. } => materialize_lora(target, base),
        }
    }
}

/// Evaluates merges of one source through one backend, in a private scratch
/// directory. Results are cached by exact lambda.
pub struct MergeEvaluator<'a, B> {
    source: &'a MergeSource,
    backend: B,
    scratch: TempDir,
    target_only: Option<f64>,
    cache: HashMap<u64, f64>,
    written: usize,
}

impl<'a, B: EvalBackend> MergeEvaluator<'a, B> {
    pub fn new(source: &'a MergeSource, backend: B) -> Result<Self> {
        let scratch = tempfile::Builder::new()
            .prefix("langmerge-")
            .tempdir()
            .map_err(|e| Error::io(std::env::temp_dir(), e))?;
        Ok(MergeEvaluator {
            source,
            backend,
            scratch,
            target_only: None,
            cache: HashMap::new(),
            written: 0,
        })
    }

    pub fn scratch_dir(&self) -> &Path {
        self.scratch.path()
    }

    pub fn backend(&self) -> &B {
        &self.backend
    }

    fn score(&mut self, model: &TensorMap, lambda: f64) -> Result<f64> {
        self.written += 1;
        let path = self.scratch.path().join(format!("candidate-{}.safetensors", self.written));
        write_checkpoint(model, &path)?;
        let result = self.backend.evaluate(&path, lambda);
        std::fs::remove_file(&path).map_err(|e| Error::io(&path, e))?;
        result
    }

    pub fn target_only_wer(&mut self) -> Result<f64> {
        if let Some(w) = self.target_only {
            return Ok(w);
        }
        let model = self.source.target_only()?;
        let w = self.score(&model, 0.0)?;
        self.target_only = Some(w);
        Ok(w)
    }

    pub fn merged_wer(&mut self, lambda: f64) -> Result<f64> {
        if let Some(&w) = self.cache.get(&lambda.to_bits()) {
            return Ok(w);
        }
        let model = self.source.merged(lambda)?;
        let w = self.score(&model, lambda)?;
        self.cache.insert(lambda.to_bits(), w);
        Ok(w)
    }

    pub fn compare(&mut self, lambda: f64) -> Result<ComparisonReport> {
        let base = self.target_only_wer()?;
        let merged = self.merged_wer(lambda)?;
        Ok(ComparisonReport::new(base, merged))
    }
}

/// Merged-vs-target-only comparison at one lambda.
pub fn evaluate_merge<B: EvalBackend>(source: &MergeSource, lambda: f64, backend: B) -> Result<ComparisonReport> {
    MergeEvaluator::new(source, backend)?.compare(lambda)
}

#[derive(Debug, Clone)]
pub struct TuneOutcome {
    pub log: TrialLog,
    pub best_lambda: f64,
    pub comparison: ComparisonReport,
}

/// Tunes lambda on merged-model WER, then reports the best lambda against
/// the target-only model scored by the same backend.
pub fn tune<B: EvalBackend>(
    source: &MergeSource,
    backend: B,
    config: &OptimizerConfig,
) -> Result<TuneOutcome, OptimizeError> {
    let mut session = MergeEvaluator::new(source, backend).map_err(|source| OptimizeError {
        partial: TrialLog::new(),
        source,
    })?;
    let log = optimize(|lambda| session.merged_wer(lambda), config)?;
    let best_lambda = log.best_lambda().expect("budget is positive");
    let comparison = session.compare(best_lambda).map_err(|source| OptimizeError {
        partial: log.clone(),
        source,
    })?;
    Ok(TuneOutcome {
        log,
        best_lambda,
        comparison,
    })
}
