use super::baseline::baseline_ft_like;
use super::dataset::{gen_dataset, relations, tokenize, DatasetConfig, EditStream, TemplateLayout};
use super::eval::{activation_histogram, evaluate_with, LocalityReference, MetricsReport};
use super::stream_io::{load_stream, read_lines};
use crate::editor::{EditConfig, EditMode, EditRecord, Editor, MergeEvent};
use crate::error::{Result, WiseError};
use crate::merge::{MergeConfig, MergeStrategy};
use crate::model::{pretrain, Checkpoint, ModelConfig, PretrainConfig, TinyTransformer, TrainingLog};
use crate::numerics::Token;
use crate::side_memory::{read_side_memories, write_side_memories, Aggregation, MemoryBank, SideMemory};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::time::Instant;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub n_facts: usize,
    pub n_irrelevant: usize,
    pub n_locality: usize,
    pub subject_len: usize,
    pub layout: TemplateLayout,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            n_facts: 100,
            n_irrelevant: 50,
            n_locality: 50,
            subject_len: 6,
            layout: TemplateLayout::SubjectFirst,
        }
    }
}

/// Everything one experiment needs. `seed` drives data generation, model
/// initialisation, pretraining and editing alike; `pretrain.seed` is
/// overwritten by it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub mode: EditMode,
    /// Stream lengths at which metrics are reported.
    pub checkpoints: Vec<usize>,
    /// Pretrained model to load. When the file is missing the model is
    /// pretrained and saved there. `{seed}` is replaced by the seed.
    pub pretrained: Option<PathBuf>,
    /// Use this stream instead of generating one. Sibling `corpus.txt`,
    /// `irrelevant.txt` and `held_out.txt` are picked up when present.
    pub stream: Option<PathBuf>,
    /// Record editing time in reports. Off gives byte-reproducible reports.
    pub record_wall_time: bool,
    /// Also run the fine-tuning baseline on the full stream.
    pub baseline: bool,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub data: DataSection,
    pub edit: EditConfig,
    pub merge: MergeConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            mode: EditMode::Merge,
            checkpoints: vec![1, 10, 100],
            pretrained: None,
            stream: None,
            record_wall_time: true,
            baseline: false,
            model: ModelConfig::default(),
            pretrain: PretrainConfig::default(),
            data: DataSection::default(),
            edit: EditConfig::default(),
            merge: MergeConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| WiseError::Config(one_line(&e.to_string())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.edit.validate()?;
        self.merge.validate()?;
        if self.checkpoints.is_empty() || self.checkpoints.contains(&0) {
            return Err(WiseError::Config("checkpoints must be non-empty and positive".into()));
        }
        Ok(())
    }

    fn pretrained_path(&self) -> Option<PathBuf> {
        self.pretrained
            .as_ref()
            .map(|p| PathBuf::from(p.to_string_lossy().replace("{seed}", &self.seed.to_string())))
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Data and pretrained model an experiment edits.
#[derive(Clone, Debug)]
pub struct Workbench {
    pub model: TinyTransformer<f64>,
    pub stream: EditStream,
    pub irrelevant: Vec<Vec<Token>>,
    pub held_out: Vec<Vec<Token>>,
    pub pretrain_log: Option<TrainingLog>,
}

fn tokenize_all(lines: &[String]) -> Vec<Vec<Token>> {
    lines.iter().map(|l| tokenize(l)).collect()
}

fn sibling_lines(stream_path: &Path, name: &str) -> Result<Vec<String>> {
    let p = stream_path.with_file_name(name);
    if p.is_file() {
        read_lines(p)
    } else {
        Ok(Vec::new())
    }
}

/// Generates or loads the data and pretrains or loads the model.
pub fn prepare(cfg: &ExperimentConfig) -> Result<Workbench> {
    cfg.validate()?;
    let (stream, corpus, irrelevant, held_out) = match &cfg.stream {
        Some(path) => {
            let stream = load_stream(path)?;
            let irrelevant = match &stream.corpus_ref {
                Some(r) => read_lines(r)?,
                None => Vec::new(),
            };
            let corpus = sibling_lines(path, "corpus.txt")?;
            let held_out = sibling_lines(path, "held_out.txt")?;
            (stream, corpus, irrelevant, held_out)
        }
        None => {
            let mut dc = DatasetConfig::new(cfg.seed, cfg.data.n_facts);
            dc.n_irrelevant = cfg.data.n_irrelevant;
            dc.n_locality = cfg.data.n_locality;
            dc.subject_len = cfg.data.subject_len;
            dc.relations = relations(cfg.data.layout);
            let w = gen_dataset(&dc)?;
            (w.stream, w.corpus, w.irrelevant, w.held_out)
        }
    };
    stream.validate()?;

    let cached = cfg.pretrained_path();
    let (model, pretrain_log) = match &cached {
        Some(p) if p.is_file() => {
            let mut model = TinyTransformer::load(p)?;
            // the edit layer does not affect pretraining
            model.config.edit_layer = cfg.model.edit_layer;
            if model.config != cfg.model {
                return Err(WiseError::Config(format!(
                    "pretrained model {} has a different architecture",
                    p.display()
                )));
            }
            (model, None)
        }
        _ => {
            let corpus = tokenize_all(&corpus);
            let mut model = TinyTransformer::new(cfg.model.clone(), cfg.seed)?;
            let pcfg = PretrainConfig {
                seed: cfg.seed,
                ..cfg.pretrain.clone()
            };
            let log = pretrain(&mut model, &corpus, &pcfg)?;
            if let Some(p) = &cached {
                if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                    std::fs::create_dir_all(dir)?;
                }
                model.save(p)?;
            }
            (model, Some(log))
        }
    };
    Ok(Workbench {
        model,
        stream,
        irrelevant: tokenize_all(&irrelevant),
        held_out: tokenize_all(&held_out),
        pretrain_log,
    })
}

/// Output of one editing run.
#[derive(Clone, Debug)]
pub struct ExperimentResult {
    /// One report per checkpoint, in increasing `t_edits`.
    pub reports: Vec<MetricsReport>,
    pub records: Vec<EditRecord>,
    pub merge_events: Vec<MergeEvent>,
    pub memories: Vec<SideMemory<f64>>,
    pub aggregation: Aggregation,
    /// `(query_kind, Δ_act)` after the last edit.
    pub histogram: Vec<(String, f64)>,
    pub baseline: Option<MetricsReport>,
}

/// Edits the stream once and evaluates the state reached after each
/// checkpoint on the edits made so far. Editing is sequential and
/// deterministic, so this equals a separate run per checkpoint.
pub fn run_edits(
    bench: &Workbench,
    edit: &EditConfig,
    merge: &MergeConfig,
    mode: EditMode,
    checkpoints: &[usize],
    seed: u64,
    record_wall_time: bool,
) -> Result<ExperimentResult> {
    let mut checkpoints = checkpoints.to_vec();
    checkpoints.sort_unstable();
    checkpoints.dedup();
    let t_max = *checkpoints.last().ok_or_else(|| WiseError::Config("no checkpoints".into()))?;
    if t_max > bench.stream.len() {
        return Err(WiseError::Config(format!(
            "checkpoint {t_max} exceeds the stream length {}",
            bench.stream.len()
        )));
    }
    let model = &bench.model;
    let reference = LocalityReference::compute(model, &bench.stream.truncated(t_max))?;
    let mut editor = Editor::new(model, &bench.irrelevant, edit.clone(), merge.clone(), mode, seed)?;
    let mut records = Vec::with_capacity(t_max);
    let mut reports = Vec::with_capacity(checkpoints.len());
    let mut elapsed = 0.0;
    let mut next = 0;
    for (t, ex) in bench.stream.examples[..t_max].iter().enumerate() {
        let start = Instant::now();
        records.push(editor.edit_one(ex)?);
        elapsed += start.elapsed().as_secs_f64();
        if checkpoints[next] == t + 1 {
            let bank = editor.bank()?;
            let sub = bench.stream.truncated(t + 1);
            let refs = LocalityReference {
                outputs: reference.outputs[..t + 1].to_vec(),
            };
            let mut report = evaluate_with(model, Some(&bank), &sub, &refs)?;
            report.wall_time = if record_wall_time { elapsed } else { 0.0 };
            reports.push(report);
            next += 1;
        }
    }
    let bank = editor.bank()?;
    let histogram = activation_histogram(model, &bank, &bench.stream.truncated(t_max), &bench.held_out)?;
    Ok(ExperimentResult {
        reports,
        records,
        merge_events: editor.merge_events().to_vec(),
        memories: editor.inference_memories()?,
        aggregation: edit.aggregation,
        histogram,
        baseline: None,
    })
}

/// Prepare, edit, evaluate at every checkpoint and optionally run the
/// fine-tuning baseline on the longest prefix.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<(Workbench, ExperimentResult)> {
    let bench = prepare(cfg)?;
    let mut result = run_edits(
        &bench,
        &cfg.edit,
        &cfg.merge,
        cfg.mode,
        &cfg.checkpoints,
        cfg.seed,
        cfg.record_wall_time,
    )?;
    if cfg.baseline {
        let t_max = result.reports.last().map_or(0, |r| r.t_edits);
        let (_, mut report) = baseline_ft_like(&bench.model, &bench.stream.truncated(t_max), &cfg.edit)?;
        if !cfg.record_wall_time {
            report.wall_time = 0.0;
        }
        result.baseline = Some(report);
    }
    Ok((bench, result))
}

/// Saves the frozen model together with its side memories.
pub fn save_edited(
    path: impl AsRef<Path>,
    model: &TinyTransformer<f64>,
    memories: &[SideMemory<f64>],
    aggregation: Aggregation,
) -> Result<()> {
    let mut ckpt = Checkpoint::new();
    model.write_to(&mut ckpt);
    write_side_memories(&mut ckpt, memories);
    ckpt.meta.insert(
        "aggregation".into(),
        serde_json::to_value(aggregation).expect("aggregation serializes"),
    );
    ckpt.save(path)
}

/// Inverse of [`save_edited`]; a plain model checkpoint yields no memories.
pub fn load_edited(path: impl AsRef<Path>) -> Result<(TinyTransformer<f64>, MemoryBank<f64>)> {
    let ckpt = Checkpoint::load(path)?;
    let model = TinyTransformer::read_from(&ckpt)?;
    let memories = read_side_memories(&ckpt)?;
    let aggregation = match ckpt.meta.get("aggregation") {
        Some(v) => serde_json::from_value(v.clone())
            .map_err(|e| WiseError::Checkpoint(format!("bad aggregation: {e}")))?,
        None => Aggregation::Mean,
    };
    let bank = MemoryBank::new(model.edit_values(), memories, aggregation)?;
    Ok((model, bank))
}

/// Grid for [`sweep`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepGrid {
    pub rho: Vec<f64>,
    pub k: Vec<usize>,
    pub seeds: Vec<u64>,
}

impl Default for SweepGrid {
    fn default() -> Self {
        Self {
            rho: vec![0.05, 0.1, 0.2, 0.5, 1.0],
            k: vec![2, 3],
            seeds: vec![0, 1, 2],
        }
    }
}

impl SweepGrid {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        toml::from_str(&std::fs::read_to_string(path)?).map_err(|e| WiseError::Config(one_line(&e.to_string())))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepCell {
    pub seed: u64,
    pub rho: f64,
    pub k: usize,
    pub report: MetricsReport,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepResult {
    pub cells: Vec<SweepCell>,
    /// `(rho, k, mean avg over seeds)` in grid order.
    pub means: Vec<(f64, usize, f64)>,
}

impl SweepResult {
    /// Cell with the highest mean avg; the first one on ties.
    pub fn best(&self) -> Option<(f64, usize, f64)> {
        self.means
            .iter()
            .copied()
            .fold(None, |best: Option<(f64, usize, f64)>, c| match best {
                Some(b) if b.2 >= c.2 => Some(b),
                _ => Some(c),
            })
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("seed,rho,k,rel,gen,loc,avg\n");
        for c in &self.cells {
            let r = &c.report;
            s.push_str(&format!("{},{},{},{},{},{},{}\n", c.seed, c.rho, c.k, r.rel, r.gen, r.loc, r.avg));
        }
        s
    }
}

/// Edits the full stream for every `(rho, k, seed)` and reports the final
/// metrics. One pretrained model per seed is shared by its cells.
pub fn sweep(cfg: &ExperimentConfig, grid: &SweepGrid) -> Result<SweepResult> {
    if grid.rho.is_empty() || grid.k.is_empty() || grid.seeds.is_empty() {
        return Err(WiseError::Config("sweep grid has an empty axis".into()));
    }
    let t = *cfg.checkpoints.iter().max().expect("validated");
    let mut cells = Vec::new();
    for &seed in &grid.seeds {
        let seeded = ExperimentConfig {
            seed,
            ..cfg.clone()
        };
        let bench = prepare(&seeded)?;
        for &rho in &grid.rho {
            for &k in &grid.k {
                let edit = EditConfig {
                    rho,
                    k,
                    ..cfg.edit.clone()
                };
                let res = run_edits(&bench, &edit, &cfg.merge, cfg.mode, &[t], seed, false)?;
                cells.push(SweepCell {
                    seed,
                    rho,
                    k,
                    report: res.reports[0].clone(),
                });
            }
        }
    }
    let mut means = Vec::new();
    for &rho in &grid.rho {
        for &k in &grid.k {
            let avgs: Vec<f64> = cells
                .iter()
                .filter(|c| c.rho == rho && c.k == k)
                .map(|c| c.report.avg)
                .collect();
            means.push((rho, k, avgs.iter().sum::<f64>() / avgs.len() as f64));
        }
    }
    Ok(SweepResult { cells, means })
}

/// Final metrics of the same stream under each merge strategy.
pub fn merge_ablate(
    cfg: &ExperimentConfig,
    strategies: &[MergeStrategy],
) -> Result<Vec<(MergeStrategy, MetricsReport)>> {
    let bench = prepare(cfg)?;
    let t = *cfg.checkpoints.iter().max().expect("validated");
    strategies
        .iter()
        .map(|&s| {
            let merge = MergeConfig {
                strategy: s,
                ..cfg.merge.clone()
            };
            let res = run_edits(&bench, &cfg.edit, &merge, cfg.mode, &[t], cfg.seed, cfg.record_wall_time)?;
            Ok((s, res.reports[0].clone()))
        })
        .collect()
}
