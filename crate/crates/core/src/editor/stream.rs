use super::augment::augment_prefixes;
use super::config::{EditConfig, EditExample};
use super::loss::{masked_step, memo_loss, prepared_edit_loss, EditLoss, PreparedEdit};
use crate::error::{Result, WiseError};
use crate::merge::{merge_side_memory, merge_stats, overlap_fraction, MergeConfig, MergeStrategy, TaskVectorSet};
use crate::model::TinyTransformer;
use crate::numerics::{Matrix, Token};
use crate::scalar::Scalar;
use crate::side_memory::{activation_shift, MemoryBank, SideMemory};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// What happens once a side memory has absorbed `k · edits_per_shard` edits.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EditMode {
    /// Keep merging new shards into the same memory.
    #[default]
    Merge,
    /// Freeze the memory and open a fresh one.
    Retrieve,
}

impl std::fmt::Display for EditMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EditMode::Merge => "merge",
            EditMode::Retrieve => "retrieve",
        })
    }
}

impl std::str::FromStr for EditMode {
    type Err = WiseError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "merge" => Ok(EditMode::Merge),
            "retrieve" => Ok(EditMode::Retrieve),
            other => Err(WiseError::Config(format!("unknown edit mode '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MergeEvent {
    /// Number of edits applied when the merge happened.
    pub after_edit: usize,
    pub memory: usize,
    pub strategy: MergeStrategy,
    pub shards: usize,
    /// Fraction of coordinates covered by at least two shard masks.
    pub mask_overlap: f64,
    /// Fraction of coordinates changed by at least two shards.
    pub task_overlap: f64,
    pub conflicts: usize,
}

/// One line of the edit log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditRecord {
    pub edit: usize,
    pub memory: usize,
    pub shard: usize,
    pub steps: usize,
    pub ar_loss: f64,
    pub margin_loss: f64,
    pub memo_loss: f64,
    /// Routing activation of the edit prompt after training.
    pub delta_edit: f64,
    pub delta_irrelevant: f64,
    pub epsilon: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub merge: Option<MergeEvent>,
}

#[derive(Clone, Debug)]
struct Slot<T: Scalar> {
    side: SideMemory<T>,
    /// Values every shard copy of the current round starts from.
    round_base: Matrix<T>,
    finished: Vec<Matrix<T>>,
    shard_edits: usize,
    /// Prompt activations of absorbed edits.
    absorbed: Vec<Matrix<T>>,
}

impl<T: Scalar> Slot<T> {
    fn new(main: &Matrix<T>, cfg: &EditConfig, seed: u64) -> Result<Self> {
        let side = SideMemory::init(main, cfg.k, cfg.rho, seed)?;
        Ok(Self {
            round_base: side.values.clone(),
            side,
            finished: Vec::new(),
            shard_edits: 0,
            absorbed: Vec::new(),
        })
    }

    /// Values a query would see now: the pending shard copies merged.
    fn consolidated(&self, mc: &MergeConfig) -> Result<Matrix<T>> {
        let mut copies: Vec<Matrix<T>> = self.finished.clone();
        if self.shard_edits > 0 {
            copies.push(self.side.values.clone());
        }
        match copies.len() {
            0 => Ok(self.round_base.clone()),
            1 => Ok(copies.pop().expect("one copy")),
            _ => merge_side_memory(&self.round_base, &copies, mc),
        }
    }
}

/// Deterministic sub-seed for component `stream`, instance `idx`.
fn derive_seed(seed: u64, stream: u64, idx: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(idx.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const MASK_STREAM: u64 = 1;
const PREFIX_STREAM: u64 = 2;

/// Lifelong editor: trains side memories shard by shard on a frozen model.
pub struct Editor<'m, T: Scalar = f64> {
    model: &'m TinyTransformer<T>,
    cfg: EditConfig,
    merge: MergeConfig,
    mode: EditMode,
    seed: u64,
    irrelevant: Vec<Matrix<T>>,
    slots: Vec<Slot<T>>,
    rng: ChaCha8Rng,
    edits_done: usize,
    events: Vec<MergeEvent>,
}

impl<'m, T: Scalar> Editor<'m, T> {
    /// `irrelevant` are prompts the side memory must leave inactive.
    pub fn new(
        model: &'m TinyTransformer<T>,
        irrelevant: &[Vec<Token>],
        cfg: EditConfig,
        merge: MergeConfig,
        mode: EditMode,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        merge.validate()?;
        let irrelevant = irrelevant
            .iter()
            .map(|x| model.ffn_activation(x))
            .collect::<Result<Vec<_>>>()?;
        let first = Slot::new(model.edit_values(), &cfg, derive_seed(seed, MASK_STREAM, 0))?;
        Ok(Self {
            model,
            cfg,
            merge,
            mode,
            seed,
            irrelevant,
            slots: vec![first],
            rng: ChaCha8Rng::seed_from_u64(seed),
            edits_done: 0,
            events: Vec::new(),
        })
    }

    pub fn config(&self) -> &EditConfig {
        &self.cfg
    }

    pub fn mode(&self) -> EditMode {
        self.mode
    }

    pub fn edits_done(&self) -> usize {
        self.edits_done
    }

    pub fn merge_events(&self) -> &[MergeEvent] {
        &self.events
    }

    /// The memory currently being trained, including its in-progress shard.
    pub fn active_memory(&self) -> &SideMemory<T> {
        &self.slots.last().expect("at least one slot").side
    }

    pub fn edit_one(&mut self, example: &EditExample) -> Result<EditRecord> {
        self.edit_one_observed(example, &mut |_, _| {})
    }

    /// [`Self::edit_one`], calling `observer(step, memory)` after every
    /// optimisation step.
    pub fn edit_one_observed(
        &mut self,
        example: &EditExample,
        observer: &mut dyn FnMut(usize, &SideMemory<T>),
    ) -> Result<EditRecord> {
        example.validate()?;
        let model = self.model;
        let original = PreparedEdit::new(model, example)?;
        let mut variants = vec![original.clone()];
        let prefix_seed = derive_seed(self.seed, PREFIX_STREAM, self.edits_done as u64);
        for v in augment_prefixes(model, example, &self.cfg, prefix_seed)? {
            variants.push(PreparedEdit::new(model, &v)?);
        }

        let memory = self.slots.len() - 1;
        let (slot, earlier) = self.slots.split_last_mut().expect("at least one slot");
        let replay: Vec<&Matrix<T>> = if self.cfg.use_memo_loss && self.mode == EditMode::Retrieve {
            earlier.iter().flat_map(|s| s.absorbed.iter()).collect()
        } else {
            Vec::new()
        };

        let mut last = EditLoss::default();
        let mut steps = 0;
        for step in 0..self.cfg.steps_per_edit {
            let item = &variants[step % variants.len()];
            let batch = irrelevant_batch(&mut self.rng, self.irrelevant.len(), self.cfg.irrelevant_batch);
            let irr: Vec<&Matrix<T>> = batch.iter().map(|&i| &self.irrelevant[i]).collect();
            let (mut parts, mut grad) = prepared_edit_loss(model, &slot.side.values, item, &irr, &self.cfg)?;
            if !replay.is_empty() {
                let pick = self.rng.gen_range(0..replay.len());
                let (m, g) = memo_loss(model, &slot.side.values, replay[pick], &self.cfg)?;
                parts.memo = m;
                grad.add_assign(&g)?;
            }
            if !parts.total().is_finite() {
                return Err(WiseError::Numeric(format!("edit loss diverged at step {step}")));
            }
            last = parts;
            steps = step + 1;
            if self.cfg.early_stop_loss.is_some_and(|t| parts.total() < t) {
                break;
            }
            masked_step(&mut slot.side, &grad, self.cfg.lr)?;
            observer(step, &slot.side);
        }

        let main = model.edit_values();
        let prompt_rows = original.prompt_activation();
        let shift = slot.side.values.sub(main)?;
        let delta_edit = activation_shift(&shift, &prompt_rows, self.cfg.aggregation)?;
        slot.side.update_epsilon(delta_edit)?;
        slot.side.edits_recorded += 1;
        slot.shard_edits += 1;
        slot.absorbed.push(prompt_rows);
        let shard = slot.side.active_shard;
        self.edits_done += 1;

        let merge = self.rotate()?;
        let slot = &self.slots[memory];
        Ok(EditRecord {
            edit: self.edits_done - 1,
            memory,
            shard,
            steps,
            ar_loss: last.autoregressive,
            margin_loss: last.margin,
            memo_loss: last.memo,
            delta_edit: delta_edit.as_f64(),
            delta_irrelevant: last.delta_irrelevant,
            epsilon: slot.side.epsilon.as_f64(),
            merge,
        })
    }

    /// Moves to the next shard when the current one is full, merging after
    /// the last shard of a round.
    fn rotate(&mut self) -> Result<Option<MergeEvent>> {
        let memory = self.slots.len() - 1;
        let slot = &mut self.slots[memory];
        if slot.shard_edits < self.cfg.edits_per_shard {
            return Ok(None);
        }
        slot.finished.push(slot.side.values.clone());
        slot.shard_edits = 0;
        slot.side.active_shard += 1;
        if slot.side.active_shard < self.cfg.k {
            slot.side.values = slot.round_base.clone();
            return Ok(None);
        }

        let copies = std::mem::take(&mut slot.finished);
        let tv = TaskVectorSet::from_models(&slot.round_base, &copies)?;
        let stats = merge_stats(&tv);
        let merged = if copies.len() == 1 {
            copies[0].clone()
        } else {
            merge_side_memory(&slot.round_base, &copies, &self.merge)?
        };
        let masks: Vec<_> = slot.side.masks.iter().collect();
        let event = MergeEvent {
            after_edit: self.edits_done,
            memory,
            strategy: self.merge.strategy,
            shards: copies.len(),
            mask_overlap: overlap_fraction(&masks),
            task_overlap: stats.overlap_fraction,
            conflicts: stats.conflict_count,
        };
        slot.side.values = merged.clone();
        slot.round_base = merged;
        slot.side.active_shard = 0;
        if self.cfg.recompute_epsilon {
            let shift = slot.side.values.sub(self.model.edit_values())?;
            let mut eps = T::infinity();
            for rows in &slot.absorbed {
                eps = eps.min(activation_shift(&shift, rows, self.cfg.aggregation)?);
            }
            slot.side.epsilon = eps;
        }
        self.events.push(event.clone());
        if self.mode == EditMode::Retrieve {
            let seed = derive_seed(self.seed, MASK_STREAM, self.slots.len() as u64);
            self.slots.push(Slot::new(self.model.edit_values(), &self.cfg, seed)?);
        }
        Ok(Some(event))
    }

    /// Memories as inference sees them. Pending shard copies are merged on
    /// the fly and memories without edits are left out.
    pub fn inference_memories(&self) -> Result<Vec<SideMemory<T>>> {
        let mut out = Vec::new();
        for slot in &self.slots {
            if slot.side.edits_recorded == 0 {
                continue;
            }
            let mut side = slot.side.clone();
            side.values = slot.consolidated(&self.merge)?;
            out.push(side);
        }
        Ok(out)
    }

    pub fn bank(&self) -> Result<MemoryBank<T>> {
        MemoryBank::new(self.model.edit_values(), self.inference_memories()?, self.cfg.aggregation)
    }
}

fn irrelevant_batch(rng: &mut ChaCha8Rng, pool: usize, batch: usize) -> Vec<usize> {
    if pool == 0 || batch == 0 {
        return Vec::new();
    }
    if batch <= pool {
        sample(rng, pool, batch).into_vec()
    } else {
        (0..batch).map(|_| rng.gen_range(0..pool)).collect()
    }
}

/// Result of editing a whole stream.
#[derive(Clone, Debug)]
pub struct StreamOutcome<T: Scalar = f64> {
    pub memories: Vec<SideMemory<T>>,
    pub records: Vec<EditRecord>,
    pub merge_events: Vec<MergeEvent>,
}

impl<T: Scalar> StreamOutcome<T> {
    /// One JSON object per edit.
    pub fn log_jsonl(&self) -> String {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&serde_json::to_string(r).expect("record serializes"));
            s.push('\n');
        }
        s
    }
}

/// Applies every edit of `stream` in order.
pub fn run_stream<T: Scalar>(
    model: &TinyTransformer<T>,
    stream: &[EditExample],
    irrelevant: &[Vec<Token>],
    cfg: &EditConfig,
    merge: &MergeConfig,
    mode: EditMode,
    seed: u64,
) -> Result<StreamOutcome<T>> {
    let mut editor = Editor::new(model, irrelevant, cfg.clone(), merge.clone(), mode, seed)?;
    let mut records = Vec::with_capacity(stream.len());
    for ex in stream {
        records.push(editor.edit_one(ex)?);
    }
    Ok(StreamOutcome {
        memories: editor.inference_memories()?,
        merge_events: editor.merge_events().to_vec(),
        records,
    })
}
