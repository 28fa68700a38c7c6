use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};
use structprompt::context::{builtin_template, read_records, AlignmentStrategy, Template};
use structprompt::eval::{gen_task, Mode, Task, TaskSpec};
use structprompt::model::Vocab;

pub type CliResult<T> = Result<T, String>;

/// Every setting a subcommand may read. Each field can come from a flag or
/// from the `--config` file; flags win.
#[derive(Args, Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// TOML or JSON file supplying defaults for any flag.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,

    /// Weight file to read (eval, ablate, bench) or write (train).
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Task file, or `lookup` / `classification` for the built-in synthetic tasks.
    #[arg(long)]
    pub task: Option<String>,
    #[arg(long, value_delimiter = ',')]
    pub mode: Option<Vec<Mode>>,
    /// Demonstration counts N.
    #[arg(long, value_delimiter = ',')]
    pub shots: Option<Vec<usize>>,
    /// Group counts M.
    #[arg(long, value_delimiter = ',', conflicts_with = "group_budget")]
    pub groups: Option<Vec<usize>>,
    /// Token budget per group, instead of a group count.
    #[arg(long)]
    pub group_budget: Option<usize>,
    #[arg(long)]
    pub strategy: Option<AlignmentStrategy>,
    /// Attention rescaling factor; defaults to the group count.
    #[arg(long)]
    pub scale_factor: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long)]
    pub beam_width: Option<usize>,
    /// Length penalty exponent.
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub max_new_tokens: Option<usize>,
    /// Report (eval, ablate, bench) or weight file (train) destination.
    #[arg(long)]
    pub out: Option<PathBuf>,

    /// Steps on task episodes.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Steps on induction episodes run first (lookup tasks only).
    #[arg(long)]
    pub induction_steps: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// `sgd` or `adam`.
    #[arg(long)]
    pub optimizer: Option<String>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub warmup: Option<usize>,
    #[arg(long)]
    pub clip_norm: Option<f64>,
    #[arg(long)]
    pub episodes: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub n_heads: Option<usize>,
    #[arg(long)]
    pub n_layers: Option<usize>,
    #[arg(long)]
    pub max_positions: Option<usize>,

    /// Sweep values for `ablate` (budgets or scale factors).
    #[arg(long, value_delimiter = ',')]
    pub values: Option<Vec<f64>>,
    /// Total context lengths for `bench`.
    #[arg(long, value_delimiter = ',')]
    pub lengths: Option<Vec<usize>>,
}

macro_rules! prefer_flags {
    ($flags:ident, $file:ident; $($field:ident),* $(,)?) => {
        RunConfig { config: $flags.config.clone(), $($field: $flags.$field.clone().or($file.$field.clone()),)* }
    };
}

impl RunConfig {
    /// Flags layered over the config file, if one was given.
    pub fn resolve(&self) -> CliResult<RunConfig> {
        let file = match &self.config {
            Some(path) => load_config_file(path)?,
            None => RunConfig::default(),
        };
        let flags = self;
        Ok(prefer_flags!(flags, file;
            model, task, mode, shots, groups, group_budget, strategy, scale_factor, seeds,
            beam_width, alpha, max_new_tokens, out, steps, induction_steps, learning_rate, batch_size, optimizer,
            momentum, warmup, clip_norm, episodes, seed, d_model, n_heads, n_layers, max_positions,
            values, lengths,
        ))
    }

    pub fn seeds(&self) -> Vec<u64> {
        self.seeds.clone().unwrap_or_else(|| (1..=6).collect())
    }

    pub fn require_model(&self) -> CliResult<&Path> {
        self.model.as_deref().ok_or_else(|| "--model is required".to_string())
    }
}

fn load_config_file(path: &Path) -> CliResult<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| format!("reading {}: {e}", path.display()))?;
    let parsed = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).map_err(|e| e.to_string())
    } else {
        toml::from_str(&text).map_err(|e| e.to_string())
    };
    parsed.map_err(|e| format!("parsing {}: {e}", path.display()))
}

#[derive(Clone, Debug, Deserialize)]
#[serde(untagged)]
enum TemplateRef {
    Builtin(String),
    Inline(Template),
}

#[derive(Clone, Debug, Deserialize)]
#[serde(untagged)]
enum TaskFile {
    Synthetic(TaskSpec),
    Records { template: TemplateRef, pool: PathBuf, test: PathBuf },
}

pub fn default_lookup() -> TaskSpec {
    TaskSpec::Lookup { key_words: 40, value_words: 40, pairs: 40, test_size: 20, seed: 0 }
}

pub fn default_classification() -> TaskSpec {
    TaskSpec::Classification { classes: 2, words_per_class: 8, sentence_len: 3, pool_size: 64, test_size: 40, seed: 0 }
}

/// A task together with the synthetic spec it came from, if any.
pub struct LoadedTask {
    pub task: Task,
    pub spec: Option<TaskSpec>,
}

impl LoadedTask {
    /// Vocabulary implied by the task alone.
    pub fn vocab(&self) -> Vocab {
        match &self.spec {
            Some(spec) => spec.vocab(),
            None => {
                let texts: Vec<String> = self
                    .task
                    .pool
                    .iter()
                    .chain(&self.task.test)
                    .filter_map(|r| self.task.template.render(r).ok().map(|d| d.rendered))
                    .chain(std::iter::once(self.task.template.literal_text()))
                    .collect();
                Vocab::build(texts.iter().map(String::as_str))
            }
        }
    }
}

pub fn resolve_task_spec(name: &str) -> CliResult<Option<TaskSpec>> {
    Ok(match name {
        "lookup" => Some(default_lookup()),
        "classification" => Some(default_classification()),
        path => match read_task_file(Path::new(path))? {
            TaskFile::Synthetic(spec) => Some(spec),
            TaskFile::Records { .. } => None,
        },
    })
}

fn read_task_file(path: &Path) -> CliResult<TaskFile> {
    let text = fs::read_to_string(path).map_err(|e| format!("reading task {}: {e}", path.display()))?;
    let parsed = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).map_err(|e| e.to_string())
    } else {
        toml::from_str(&text).map_err(|e| e.to_string())
    };
    parsed.map_err(|e| format!("parsing task {}: {e}", path.display()))
}

pub fn load_task(name: &str) -> CliResult<LoadedTask> {
    if let Some(spec) = match name {
        "lookup" => Some(default_lookup()),
        "classification" => Some(default_classification()),
        _ => None,
    } {
        let task = gen_task(&spec).map_err(|e| e.to_string())?;
        return Ok(LoadedTask { task, spec: Some(spec) });
    }
    let path = Path::new(name);
    match read_task_file(path)? {
        TaskFile::Synthetic(spec) => {
            let task = gen_task(&spec).map_err(|e| e.to_string())?;
            Ok(LoadedTask { task, spec: Some(spec) })
        }
        TaskFile::Records { template, pool, test } => {
            let template = match template {
                TemplateRef::Builtin(name) => {
                    builtin_template(&name).ok_or_else(|| format!("unknown template {name:?}"))?
                }
                TemplateRef::Inline(t) => {
                    t.validate().map_err(|e| e.to_string())?;
                    t
                }
            };
            let base = path.parent().unwrap_or(Path::new("."));
            let read = |p: &Path| -> CliResult<_> {
                let full = base.join(p);
                let file = fs::File::open(&full).map_err(|e| format!("reading {}: {e}", full.display()))?;
                read_records(std::io::BufReader::new(file)).map_err(|e| format!("{}: {e}", full.display()))
            };
            let task = Task { spec: None, template, pool: read(&pool)?, test: read(&test)? };
            Ok(LoadedTask { task, spec: None })
        }
    }
}

/// Sidecar holding the vocabulary a weight file was trained with.
pub fn vocab_path(model: &Path) -> PathBuf {
    let mut name = model.as_os_str().to_owned();
    name.push(".vocab.json");
    PathBuf::from(name)
}

pub fn log_path(model: &Path) -> PathBuf {
    let mut name = model.as_os_str().to_owned();
    name.push(".log.jsonl");
    PathBuf::from(name)
}

/// Fails unless the directory that will hold `path` exists.
pub fn check_writable_parent(path: &Path) -> CliResult<()> {
    let parent = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => return Ok(()),
    };
    if parent.is_dir() {
        Ok(())
    } else {
        Err(format!("output directory {} does not exist", parent.display()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_the_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        fs::write(&path, "shots = [4, 8]\nbeam_width = 5\nstrategy = \"pad_space\"\n").unwrap();
        let flags = RunConfig { config: Some(path), beam_width: Some(2), ..Default::default() };
        let cfg = flags.resolve().unwrap();
        assert_eq!(cfg.shots, Some(vec![4, 8]));
        assert_eq!(cfg.beam_width, Some(2));
        assert_eq!(cfg.strategy, Some(AlignmentStrategy::PadSpace));
    }

    #[test]
    fn unknown_config_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        fs::write(&path, "shotz = 3\n").unwrap();
        let flags = RunConfig { config: Some(path), ..Default::default() };
        assert!(flags.resolve().is_err());
    }

    #[test]
    fn record_task_files_resolve_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("pool.jsonl"), "{\"Sentence\": \"good\", \"Label\": 1}\n").unwrap();
        fs::write(dir.path().join("test.jsonl"), "{\"Sentence\": \"bad\", \"Label\": 0}\n").unwrap();
        let task = dir.path().join("task.toml");
        fs::write(&task, "template = \"sst2\"\npool = \"pool.jsonl\"\ntest = \"test.jsonl\"\n").unwrap();
        let loaded = load_task(task.to_str().unwrap()).unwrap();
        assert_eq!(loaded.task.pool.len(), 1);
        assert!(loaded.vocab().id("good").is_some());
        assert!(loaded.vocab().id("Negative").is_some());
    }

    #[test]
    fn synthetic_task_files_parse() {
        let dir = tempfile::tempdir().unwrap();
        let task = dir.path().join("task.toml");
        fs::write(&task, "kind = \"lookup\"\nkey_words = 10\nvalue_words = 10\npairs = 6\ntest_size = 4\nseed = 3\n")
            .unwrap();
        let loaded = load_task(task.to_str().unwrap()).unwrap();
        assert_eq!(loaded.task.pool.len(), 6);
        assert!(loaded.spec.is_some());
    }
}
