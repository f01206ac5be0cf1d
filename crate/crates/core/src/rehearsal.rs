//! Codebook rehearsal: per-sample distance to the hard-assigned codewords,
//! per-task retention of the furthest (or nearest) samples, and replay into
//! later batches.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffmath::Array;
use crate::error::{Error, Result};
use crate::quantizer::{nearest_codeword, split, Codebook};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RehearsalMode {
    Furthest,
    Nearest,
    Off,
}

/// Summed squared residual between each subvector and its nearest codeword.
pub fn sample_distance(x: &[f64], codebook: &Codebook) -> Result<f64> {
    if x.len() != codebook.dim() {
        return Err(Error::shape(
            "sample_distance",
            format!("{} features vs codebook dimension {}", x.len(), codebook.dim()),
        ));
    }
    split(x, codebook.codebooks())?
        .into_iter()
        .enumerate()
        .map(|(i, sub)| nearest_codeword(sub, codebook.book(i)).map(|(_, d)| d))
        .sum()
}

/// Indices of the `s` largest distances, largest first; equal distances keep
/// their original order.
pub fn select_furthest<T>(samples: &[T], distances: &[f64], s: usize) -> Result<Vec<usize>> {
    select(samples, distances, s, RehearsalMode::Furthest)
}

/// Indices of the `s` smallest distances, smallest first.
pub fn select_nearest<T>(samples: &[T], distances: &[f64], s: usize) -> Result<Vec<usize>> {
    select(samples, distances, s, RehearsalMode::Nearest)
}

pub fn select<T>(samples: &[T], distances: &[f64], s: usize, mode: RehearsalMode) -> Result<Vec<usize>> {
    if samples.len() != distances.len() {
        return Err(Error::LengthMismatch {
            left: samples.len(),
            right: distances.len(),
        });
    }
    if mode == RehearsalMode::Off {
        return Ok(Vec::new());
    }
    let mut order: Vec<usize> = (0..distances.len()).collect();
    // Stable sort keeps lower indices first among ties.
    match mode {
        RehearsalMode::Furthest => order.sort_by(|&a, &b| distances[b].total_cmp(&distances[a])),
        _ => order.sort_by(|&a, &b| distances[a].total_cmp(&distances[b])),
    }
    order.truncate(s);
    Ok(order)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BufferEntry {
    pub task_id: usize,
    pub distance: f64,
    /// Raw input, before any augmentation.
    pub sample: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSlot {
    pub task_id: usize,
    pub entries: Vec<BufferEntry>,
}

/// Per-task store of at most `capacity` rehearsal samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RehearsalBuffer {
    capacity: usize,
    slots: Vec<TaskSlot>,
}

impl RehearsalBuffer {
    pub fn new(capacity: usize) -> Self {
        RehearsalBuffer {
            capacity,
            slots: Vec::new(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn slots(&self) -> &[TaskSlot] {
        &self.slots
    }

    pub fn len(&self) -> usize {
        self.slots.iter().map(|s| s.entries.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn entries(&self) -> impl Iterator<Item = &BufferEntry> {
        self.slots.iter().flat_map(|s| s.entries.iter())
    }

    /// Adds the entries for a completed task. Entries must be in the order
    /// the selection produced; a task can be stored only once.
    pub fn insert_task(&mut self, task_id: usize, entries: Vec<BufferEntry>) -> Result<()> {
        if entries.len() > self.capacity {
            return Err(Error::InvalidConfig(format!(
                "{} entries exceed the per-task capacity {}",
                entries.len(),
                self.capacity
            )));
        }
        if self.slots.iter().any(|s| s.task_id == task_id) {
            return Err(Error::InvalidConfig(format!("task {task_id} already buffered")));
        }
        if entries.iter().any(|e| e.task_id != task_id) {
            return Err(Error::InvalidConfig("entry task id does not match slot".into()));
        }
        if entries.is_empty() {
            return Ok(());
        }
        self.slots.push(TaskSlot { task_id, entries });
        Ok(())
    }

    /// Scores every sample of a finished task against `codebook` (using the
    /// representations `features`) and keeps the selected raw samples.
    pub fn store_task(
        &mut self,
        task_id: usize,
        raw: &Array,
        features: &Array,
        codebook: &Codebook,
        mode: RehearsalMode,
    ) -> Result<()> {
        if raw.rows() != features.rows() {
            return Err(Error::LengthMismatch {
                left: raw.rows(),
                right: features.rows(),
            });
        }
        let distances = features
            .row_iter()
            .map(|f| sample_distance(f, codebook))
            .collect::<Result<Vec<_>>>()?;
        let rows: Vec<&[f64]> = raw.row_iter().collect();
        let picked = select(&rows, &distances, self.capacity, mode)?;
        let entries = picked
            .into_iter()
            .map(|i| BufferEntry {
                task_id,
                distance: distances[i],
                sample: rows[i].to_vec(),
            })
            .collect();
        self.insert_task(task_id, entries)
    }
}

/// How many buffered samples join each batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ReplayCount {
    /// All buffered samples, capped at the current batch size.
    Auto,
    Fixed(usize),
}

/// Appends up to `count` buffered samples to a batch.
///
/// Draws are without replacement; each draw first picks a past task
/// uniformly among those with samples left, then an entry uniformly within
/// it. When every buffered sample is requested they are appended in storage
/// order without consuming randomness.
pub fn replay_merge<R: Rng>(
    current: &Array,
    buffer: &RehearsalBuffer,
    count: ReplayCount,
    rng: &mut R,
) -> Result<Array> {
    let total = buffer.len();
    if total == 0 {
        return Ok(current.clone());
    }
    let (rows, cols) = current.dims2()?;
    let wanted = match count {
        ReplayCount::Auto => total.min(rows),
        ReplayCount::Fixed(r) => r.min(total),
    };
    if wanted == 0 {
        return Ok(current.clone());
    }
    let mut data = current.data().to_vec();
    if wanted == total {
        for e in buffer.entries() {
            check_width(e, cols)?;
            data.extend_from_slice(&e.sample);
        }
    } else {
        let mut remaining: Vec<Vec<&BufferEntry>> = buffer
            .slots()
            .iter()
            .map(|s| s.entries.iter().collect())
            .collect();
        for _ in 0..wanted {
            let live: Vec<usize> = (0..remaining.len())
                .filter(|&t| !remaining[t].is_empty())
                .collect();
            let t = live[rng.random_range(0..live.len())];
            let idx = rng.random_range(0..remaining[t].len());
            let e = remaining[t].remove(idx);
            check_width(e, cols)?;
            data.extend_from_slice(&e.sample);
        }
    }
    Array::matrix(rows + wanted, cols, data)
}

fn check_width(entry: &BufferEntry, cols: usize) -> Result<()> {
    if entry.sample.len() != cols {
        return Err(Error::shape(
            "replay_merge",
            format!("buffered sample has {} features, batch {cols}", entry.sample.len()),
        ));
    }
    Ok(())
}
