//! Append-only pool of finalized task prompts.
//!
//! Entries are frozen at append time and never mutate afterwards; the pool
//! preserves arrival order and persists one binary matrix file plus JSON
//! metadata per prompt, so lifelong runs can resume at any task boundary.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// A soft prompt: `l_p` vectors in the backbone's embedding space.
#[derive(Debug, Clone, PartialEq)]
pub struct Prompt {
    task_id: String,
    matrix: Array2<f64>,
    frozen: bool,
    hash: Option<String>,
}

impl Prompt {
    pub fn trainable(task_id: impl Into<String>, matrix: Array2<f64>) -> Self {
        Self {
            task_id: task_id.into(),
            matrix,
            frozen: false,
            hash: None,
        }
    }

    /// Freezes the prompt; the stored content hash never changes afterwards.
    pub fn finalize(mut self) -> Self {
        self.hash = Some(matrix_hash(&self.matrix));
        self.frozen = true;
        self
    }

    pub fn task_id(&self) -> &str {
        &self.task_id
    }

    /// Read-only view; frozen prompts expose no mutable access.
    pub fn matrix(&self) -> &Array2<f64> {
        &self.matrix
    }

    /// Mutable access for the in-training prompt only.
    pub fn matrix_mut(&mut self) -> Result<&mut Array2<f64>> {
        if self.frozen {
            return Err(Error::InvalidArgument {
                field: "prompt",
                reason: format!("prompt {} is frozen", self.task_id),
            });
        }
        Ok(&mut self.matrix)
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn hash(&self) -> Option<&str> {
        self.hash.as_deref()
    }

    pub fn prompt_len(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn dim(&self) -> usize {
        self.matrix.ncols()
    }

    /// Re-hashes the matrix against the freeze-time hash.
    pub fn verify(&self) -> Result<()> {
        match &self.hash {
            Some(stored) => {
                let actual = matrix_hash(&self.matrix);
                if &actual != stored {
                    return Err(Error::HashMismatch {
                        expected: stored.clone(),
                        actual,
                    });
                }
                Ok(())
            }
            None => Err(Error::UnfrozenPrompt(self.task_id.clone())),
        }
    }
}

fn matrix_hash(m: &Array2<f64>) -> String {
    let mut hasher = Sha256::new();
    hasher.update((m.nrows() as u64).to_le_bytes());
    hasher.update((m.ncols() as u64).to_le_bytes());
    for &v in m.iter() {
        hasher.update(v.to_le_bytes());
    }
    hex::encode(hasher.finalize())
}

#[derive(Debug, Serialize, Deserialize)]
struct PromptMeta {
    task_id: String,
    prompt_len: usize,
    dim: usize,
    hash: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct PoolIndex {
    task_ids: Vec<String>,
}

/// Ordered, append-only store of frozen prompts.
#[derive(Debug, Default, Clone)]
pub struct PromptPool {
    entries: Vec<Prompt>,
}

impl PromptPool {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, task_id: &str) -> bool {
        self.entries.iter().any(|p| p.task_id == task_id)
    }

    pub fn get(&self, task_id: &str) -> Option<&Prompt> {
        self.entries.iter().find(|p| p.task_id == task_id)
    }

    /// Appends a finalized prompt. All entries must share (`l_p`, `d`).
    pub fn append_finalized(&mut self, prompt: Prompt) -> Result<()> {
        if !prompt.frozen {
            return Err(Error::UnfrozenPrompt(prompt.task_id));
        }
        if self.contains(&prompt.task_id) {
            return Err(Error::DuplicateTask(prompt.task_id));
        }
        if let Some(first) = self.entries.first() {
            if first.prompt_len() != prompt.prompt_len() || first.dim() != prompt.dim() {
                return Err(Error::DimensionMismatch(format!(
                    "prompt {} has shape {}x{}, pool holds {}x{}",
                    prompt.task_id,
                    prompt.prompt_len(),
                    prompt.dim(),
                    first.prompt_len(),
                    first.dim()
                )));
            }
        }
        self.entries.push(prompt);
        Ok(())
    }

    /// All stored prompts `{P^1..P^{t-1}}` in arrival order. The current
    /// task must not already be in the pool.
    pub fn previous_prompts(&self, current_task_id: &str) -> Result<&[Prompt]> {
        if self.contains(current_task_id) {
            return Err(Error::DuplicateTask(current_task_id.to_string()));
        }
        Ok(&self.entries)
    }

    pub fn entries(&self) -> &[Prompt] {
        &self.entries
    }

    /// Persists the pool: one binary matrix + metadata JSON per prompt plus
    /// an order index.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let index = PoolIndex {
            task_ids: self.entries.iter().map(|p| p.task_id.clone()).collect(),
        };
        std::fs::write(dir.join("index.json"), serde_json::to_string_pretty(&index)?)?;
        for p in &self.entries {
            let meta = PromptMeta {
                task_id: p.task_id.clone(),
                prompt_len: p.prompt_len(),
                dim: p.dim(),
                hash: p.hash.clone().expect("pool entries are frozen"),
            };
            std::fs::write(
                dir.join(format!("{}.json", p.task_id)),
                serde_json::to_string_pretty(&meta)?,
            )?;
            let mut file =
                std::io::BufWriter::new(std::fs::File::create(dir.join(format!("{}.bin", p.task_id)))?);
            for &v in p.matrix.iter() {
                file.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Loads a pool directory, verifying every stored hash.
    pub fn load(dir: &Path) -> Result<Self> {
        let index_path = dir.join("index.json");
        if !index_path.exists() {
            return Err(Error::NothingToResume(dir.display().to_string()));
        }
        let index: PoolIndex = serde_json::from_str(&std::fs::read_to_string(index_path)?)?;
        let mut pool = Self::new();
        for task_id in &index.task_ids {
            let meta: PromptMeta =
                serde_json::from_str(&std::fs::read_to_string(dir.join(format!("{task_id}.json")))?)?;
            let mut file = std::io::BufReader::new(std::fs::File::open(dir.join(format!("{task_id}.bin")))?);
            let mut data = vec![0.0f64; meta.prompt_len * meta.dim];
            for v in &mut data {
                let mut b = [0u8; 8];
                file.read_exact(&mut b)?;
                *v = f64::from_le_bytes(b);
            }
            let matrix = Array2::from_shape_vec((meta.prompt_len, meta.dim), data)
                .map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
            let prompt = Prompt {
                task_id: meta.task_id,
                matrix,
                frozen: true,
                hash: Some(meta.hash),
            };
            prompt.verify().map_err(|_| {
                Error::CorruptCheckpoint(format!("prompt {task_id} failed hash check"))
            })?;
            pool.entries.push(prompt);
        }
        Ok(pool)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn frozen(id: &str, fill: f64) -> Prompt {
        Prompt::trainable(id, Array2::from_elem((2, 3), fill)).finalize()
    }

    #[test]
    fn append_and_order() {
        let mut pool = PromptPool::new();
        pool.append_finalized(frozen("t1", 1.0)).unwrap();
        pool.append_finalized(frozen("t2", 2.0)).unwrap();
        pool.append_finalized(frozen("t3", 3.0)).unwrap();
        pool.append_finalized(frozen("t4", 4.0)).unwrap();
        let prev = pool.previous_prompts("t5").unwrap();
        assert_eq!(prev.len(), 4);
        let ids: Vec<&str> = prev.iter().map(|p| p.task_id()).collect();
        assert_eq!(ids, vec!["t1", "t2", "t3", "t4"]);
    }

    #[test]
    fn empty_pool_gives_empty_previous() {
        let pool = PromptPool::new();
        assert!(pool.previous_prompts("t1").unwrap().is_empty());
    }

    #[test]
    fn duplicate_task_rejected() {
        let mut pool = PromptPool::new();
        pool.append_finalized(frozen("t1", 1.0)).unwrap();
        assert!(matches!(
            pool.append_finalized(frozen("t1", 2.0)),
            Err(Error::DuplicateTask(_))
        ));
    }

    #[test]
    fn unfrozen_prompt_rejected() {
        let mut pool = PromptPool::new();
        let p = Prompt::trainable("t1", array![[1.0, 2.0]]);
        assert!(matches!(pool.append_finalized(p), Err(Error::UnfrozenPrompt(_))));
    }

    #[test]
    fn appends_leave_prior_hashes_unchanged() {
        let mut pool = PromptPool::new();
        pool.append_finalized(frozen("t1", 1.0)).unwrap();
        pool.append_finalized(frozen("t2", 2.0)).unwrap();
        let h1 = pool.get("t1").unwrap().hash().unwrap().to_string();
        let h2 = pool.get("t2").unwrap().hash().unwrap().to_string();
        pool.append_finalized(frozen("t3", 3.0)).unwrap();
        assert_eq!(pool.get("t1").unwrap().hash().unwrap(), h1);
        assert_eq!(pool.get("t2").unwrap().hash().unwrap(), h2);
        pool.get("t1").unwrap().verify().unwrap();
    }

    #[test]
    fn frozen_prompt_refuses_mutation() {
        let mut p = frozen("t1", 1.0);
        assert!(p.matrix_mut().is_err());
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut pool = PromptPool::new();
        pool.append_finalized(frozen("t1", 1.0)).unwrap();
        let odd = Prompt::trainable("t2", Array2::zeros((3, 3))).finalize();
        assert!(matches!(pool.append_finalized(odd), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn save_load_roundtrip_verifies_hashes() {
        let dir = tempfile::tempdir().unwrap();
        let mut pool = PromptPool::new();
        pool.append_finalized(frozen("t1", 1.5)).unwrap();
        pool.append_finalized(frozen("t2", -0.5)).unwrap();
        pool.save(dir.path()).unwrap();
        let loaded = PromptPool::load(dir.path()).unwrap();
        assert_eq!(loaded.len(), 2);
        assert_eq!(loaded.get("t1").unwrap().matrix(), pool.get("t1").unwrap().matrix());

        // corrupt one matrix file and check detection
        let bin = dir.path().join("t1.bin");
        let mut bytes = std::fs::read(&bin).unwrap();
        bytes[0] ^= 0xff;
        std::fs::write(&bin, bytes).unwrap();
        assert!(matches!(
            PromptPool::load(dir.path()),
            Err(Error::CorruptCheckpoint(_))
        ));
    }

    #[test]
    fn load_missing_dir_is_nothing_to_resume() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            PromptPool::load(&dir.path().join("missing")),
            Err(Error::NothingToResume(_))
        ));
    }
}
