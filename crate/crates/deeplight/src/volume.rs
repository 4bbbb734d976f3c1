//! Core data model: brain volumes, labeled recordings, and the decoding
//! target vocabulary.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One fMRI volume: a real-valued 3-D voxel grid plus voxel size metadata.
///
/// Data is stored with the x axis fastest, matching NIfTI layout:
/// `data[x + X*(y + Y*z)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BrainVolume {
    pub dims: (usize, usize, usize),
    pub voxel_size_mm: [f64; 3],
    pub data: Vec<f32>,
}

impl BrainVolume {
    pub fn new(dims: (usize, usize, usize), voxel_size_mm: [f64; 3], data: Vec<f32>) -> Result<Self> {
        let (x, y, z) = dims;
        if x == 0 || y == 0 || z == 0 {
            return Err(Error::dimension(format!("volume dims must be >= 1, got {dims:?}")));
        }
        if data.len() != x * y * z {
            return Err(Error::dimension(format!(
                "volume dims {dims:?} imply {} voxels, data has {}",
                x * y * z,
                data.len()
            )));
        }
        Ok(BrainVolume {
            dims,
            voxel_size_mm,
            data,
        })
    }

    pub fn zeros(dims: (usize, usize, usize), voxel_size_mm: [f64; 3]) -> Self {
        BrainVolume {
            dims,
            voxel_size_mm,
            data: vec![0.0; dims.0 * dims.1 * dims.2],
        }
    }

    pub fn num_voxels(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims.0 * (y + self.dims.1 * z)
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.index(x, y, z)]
    }
}

/// One labeled stimulus block: `len` consecutive volumes starting at
/// `start`, all sharing a task-local decoding target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub start: usize,
    pub len: usize,
    pub target: u32,
}

/// One subject's volume time series for one task, with per-volume target
/// labels and block structure.
#[derive(Debug, Clone)]
pub struct Recording {
    pub subject_id: String,
    pub task_id: String,
    pub volumes: Vec<BrainVolume>,
    /// Task-local decoding-target id per volume, aligned with `volumes`.
    pub labels: Vec<u32>,
    pub blocks: Vec<Block>,
    pub tr_seconds: f64,
}

impl Recording {
    /// Checks the structural invariants: labels align with volumes and
    /// blocks tile a subset of the timeline without overlap.
    pub fn validate(&self) -> Result<()> {
        if self.labels.len() != self.volumes.len() {
            return Err(Error::data(format!(
                "recording {}/{}: {} labels for {} volumes",
                self.subject_id,
                self.task_id,
                self.labels.len(),
                self.volumes.len()
            )));
        }
        let t = self.volumes.len();
        let mut covered = vec![false; t];
        for b in &self.blocks {
            if b.start + b.len > t {
                return Err(Error::data(format!(
                    "recording {}/{}: block {}..{} exceeds {} volumes",
                    self.subject_id,
                    self.task_id,
                    b.start,
                    b.start + b.len,
                    t
                )));
            }
            for c in &mut covered[b.start..b.start + b.len] {
                if *c {
                    return Err(Error::data(format!(
                        "recording {}/{}: overlapping blocks",
                        self.subject_id, self.task_id
                    )));
                }
                *c = true;
            }
        }
        Ok(())
    }

    pub fn num_volumes(&self) -> usize {
        self.volumes.len()
    }
}

/// Ordered list of (task, target-name) pairs; the position of a pair is its
/// class index for the decoder head.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelVocabulary {
    entries: Vec<(String, String)>,
    #[serde(skip)]
    task_offsets: BTreeMap<String, (usize, usize)>,
}

impl LabelVocabulary {
    /// Builds a vocabulary from ordered `(task, targets)` groups.
    pub fn from_tasks(tasks: &[TaskSpec]) -> Self {
        let mut entries = Vec::new();
        let mut task_offsets = BTreeMap::new();
        for task in tasks {
            task_offsets.insert(task.id.clone(), (entries.len(), task.targets.len()));
            for name in &task.targets {
                entries.push((task.id.clone(), name.clone()));
            }
        }
        LabelVocabulary {
            entries,
            task_offsets,
        }
    }

    /// Rebuilds the lookup table after deserialization.
    pub fn rebuild_index(&mut self) {
        let mut task_offsets: BTreeMap<String, (usize, usize)> = BTreeMap::new();
        for (i, (task, _)) in self.entries.iter().enumerate() {
            let entry = task_offsets.entry(task.clone()).or_insert((i, 0));
            entry.1 += 1;
        }
        self.task_offsets = task_offsets;
    }

    pub fn size(&self) -> usize {
        self.entries.len()
    }

    pub fn entries(&self) -> &[(String, String)] {
        &self.entries
    }

    /// Class index of a task-local target id, if the task is in vocabulary.
    pub fn class_of(&self, task_id: &str, local_target: u32) -> Option<usize> {
        let &(offset, count) = self.task_offsets.get(task_id)?;
        if (local_target as usize) < count {
            Some(offset + local_target as usize)
        } else {
            None
        }
    }

    /// Tasks in entry order (deduplicated, order preserved).
    pub fn tasks(&self) -> Vec<String> {
        let mut seen = Vec::new();
        for (task, _) in &self.entries {
            if seen.last() != Some(task) && !seen.contains(task) {
                seen.push(task.clone());
            }
        }
        seen
    }
}

/// A task and its decoding targets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub id: String,
    pub targets: Vec<String>,
}

impl TaskSpec {
    pub fn new(id: &str, targets: &[&str]) -> Self {
        TaskSpec {
            id: id.to_string(),
            targets: targets.iter().map(|s| s.to_string()).collect(),
        }
    }
}

/// The seven-task corpus layout: task ids, decoding targets and per-target
/// counts (4, 3, 5, 2, 2, 2, 2), twenty targets in total. The working
/// memory task is the conventional held-out test task.
pub fn standard_tasks() -> Vec<TaskSpec> {
    vec![
        TaskSpec::new("wm", &["body", "face", "place", "tool"]),
        TaskSpec::new("gambling", &["win", "loss", "neutral"]),
        TaskSpec::new(
            "motor",
            &["left_finger", "right_finger", "left_toe", "right_toe", "tongue"],
        ),
        TaskSpec::new("language", &["story", "math"]),
        TaskSpec::new("social", &["interaction", "no_interaction"]),
        TaskSpec::new("relational", &["relational", "matching"]),
        TaskSpec::new("emotion", &["fear", "neutral"]),
    ]
}

/// Default repetition time in seconds (HCP protocol).
pub const DEFAULT_TR_SECONDS: f64 = 0.72;
