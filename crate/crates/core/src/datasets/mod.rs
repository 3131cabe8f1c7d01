//! Corpora: synthetic generation, CSV ingestion, splitting and archives.

mod csv_source;
mod synthetic;

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::context::ContextSpec;
use crate::error::{CatpError, Result};
use crate::sample::{DataSample, WindowShape};
use crate::scalar::Scalar;

pub use csv_source::{decode_row, encode_row, ingest_csv, window_count, CsvLayout, CsvSource, IngestReport};
pub use synthetic::{generate_synthetic, pattern_of, ContextRule, History, Motion, PatternDef, SyntheticSpec};

/// Where a corpus came from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub source: String,
    pub seed: u64,
    /// SHA-256 of the canonical JSON of the generating spec.
    pub spec_hash: String,
    /// Seed of the last [`resample`], if any.
    #[serde(default)]
    pub round_seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct CorpusSplit<T> {
    pub schema: ContextSpec,
    pub shape: WindowShape,
    pub max_step: f64,
    pub provenance: Provenance,
    pub train: Vec<DataSample<T>>,
    pub val: Vec<DataSample<T>>,
    pub test: Vec<DataSample<T>>,
}

/// How samples are re-split between rounds.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    /// Independent samples: shuffle the pool.
    #[default]
    Shuffle,
    /// Time-ordered samples: permute ten contiguous blocks.
    Blocks,
}

/// `(train, val, test)` sizes for an 80/10/10 split of `n`.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let train = (n as f64 * 0.8).round() as usize;
    let val = ((n as f64 * 0.1).round() as usize).min(n - train);
    (train, val, n - train - val)
}

pub fn spec_hash<S: Serialize>(spec: &S) -> Result<String> {
    let canonical = serde_json::to_value(spec)?;
    Ok(hex::encode(Sha256::digest(serde_json::to_vec(&canonical)?)))
}

impl<T: Scalar> CorpusSplit<T> {
    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self) -> Result<()> {
        self.schema.validate()?;
        for (name, split) in [("train", &self.train), ("val", &self.val), ("test", &self.test)] {
            for (i, s) in split.iter().enumerate() {
                s.validate(&self.schema, self.shape)
                    .map_err(|e| CatpError::data(format!("{name} sample {i}: {e}")))?;
            }
        }
        Ok(())
    }

    /// All samples in train, val, test order.
    pub fn pooled(&self) -> Vec<DataSample<T>> {
        self.train.iter().chain(&self.val).chain(&self.test).cloned().collect()
    }

    /// Splits `samples` 80/10/10 in their given order.
    pub fn from_ordered(
        schema: ContextSpec,
        shape: WindowShape,
        max_step: f64,
        provenance: Provenance,
        mut samples: Vec<DataSample<T>>,
    ) -> Self {
        let (train, val, _) = split_sizes(samples.len());
        let test = samples.split_off(train + val);
        let val = samples.split_off(train);
        Self {
            schema,
            shape,
            max_step,
            provenance,
            train: samples,
            val,
            test,
        }
    }
}

/// Fresh 80/10/10 split of the pooled corpus under `round_seed`.
pub fn resample<T: Scalar>(corpus: &CorpusSplit<T>, round_seed: u64, mode: SplitMode) -> CorpusSplit<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(round_seed);
    let pool = corpus.pooled();
    let ordered = match mode {
        SplitMode::Shuffle => {
            let mut pool = pool;
            pool.shuffle(&mut rng);
            pool
        }
        SplitMode::Blocks => {
            let n = pool.len();
            let bounds: Vec<usize> = (0..=10).map(|b| b * n / 10).collect();
            let mut blocks: Vec<usize> = (0..10).collect();
            blocks.shuffle(&mut rng);
            blocks
                .into_iter()
                .flat_map(|b| pool[bounds[b]..bounds[b + 1]].to_vec())
                .collect()
        }
    };
    let mut provenance = corpus.provenance.clone();
    provenance.round_seed = Some(round_seed);
    CorpusSplit::from_ordered(corpus.schema.clone(), corpus.shape, corpus.max_step, provenance, ordered)
}

/// Contents of `manifest.json` in a corpus archive.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchiveManifest {
    pub schema: ContextSpec,
    pub shape: WindowShape,
    pub max_step: f64,
    pub provenance: Provenance,
    pub counts: [usize; 3],
    /// SHA-256 of `train.jsonl`, `val.jsonl`, `test.jsonl`.
    pub file_hashes: [String; 3],
}

impl ArchiveManifest {
    /// One digest over all split files.
    pub fn archive_hash(&self) -> String {
        hex::encode(Sha256::digest(self.file_hashes.concat().as_bytes()))
    }
}

const SPLIT_FILES: [&str; 3] = ["train.jsonl", "val.jsonl", "test.jsonl"];

/// Writes `corpus` as a directory of JSON-lines split files plus a manifest.
pub fn write_archive<T: Scalar>(corpus: &CorpusSplit<T>, dir: &Path) -> Result<ArchiveManifest> {
    fs::create_dir_all(dir)?;
    let mut hashes: [String; 3] = Default::default();
    for (i, split) in [&corpus.train, &corpus.val, &corpus.test].into_iter().enumerate() {
        let path = dir.join(SPLIT_FILES[i]);
        let mut hasher = Sha256::new();
        let mut out = BufWriter::new(fs::File::create(&path)?);
        for s in split {
            let mut line = serde_json::to_vec(s)?;
            line.push(b'\n');
            hasher.update(&line);
            out.write_all(&line)?;
        }
        out.flush()?;
        hashes[i] = hex::encode(hasher.finalize());
    }
    let manifest = ArchiveManifest {
        schema: corpus.schema.clone(),
        shape: corpus.shape,
        max_step: corpus.max_step,
        provenance: corpus.provenance.clone(),
        counts: [corpus.train.len(), corpus.val.len(), corpus.test.len()],
        file_hashes: hashes,
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn read_archive<T: Scalar>(dir: &Path) -> Result<CorpusSplit<T>> {
    let text = fs::read_to_string(dir.join("manifest.json"))
        .map_err(|e| CatpError::data(format!("{}: {e}", dir.join("manifest.json").display())))?;
    let manifest: ArchiveManifest =
        serde_json::from_str(&text).map_err(|e| CatpError::data(format!("corpus manifest: {e}")))?;
    let mut splits: Vec<Vec<DataSample<T>>> = Vec::with_capacity(3);
    for (i, name) in SPLIT_FILES.iter().enumerate() {
        let file = fs::File::open(dir.join(name)).map_err(|e| CatpError::data(format!("{name}: {e}")))?;
        let samples = BufReader::new(file)
            .lines()
            .enumerate()
            .map(|(n, line)| {
                serde_json::from_str(&line?).map_err(|e| CatpError::data(format!("{name} line {}: {e}", n + 1)))
            })
            .collect::<Result<Vec<_>>>()?;
        if samples.len() != manifest.counts[i] {
            return Err(CatpError::data(format!(
                "{name} holds {} samples, manifest says {}",
                samples.len(),
                manifest.counts[i]
            )));
        }
        splits.push(samples);
    }
    let test = splits.pop().unwrap_or_default();
    let val = splits.pop().unwrap_or_default();
    let train = splits.pop().unwrap_or_default();
    let corpus = CorpusSplit {
        schema: manifest.schema,
        shape: manifest.shape,
        max_step: manifest.max_step,
        provenance: manifest.provenance,
        train,
        val,
        test,
    };
    corpus.validate()?;
    Ok(corpus)
}
