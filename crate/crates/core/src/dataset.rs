//! Sharded on-disk datasets of generated sequences.
//!
//! Shard layout: 16-byte magic, `u32` version, then fixed-size records. Each
//! record is `index: u64, steps: u32, size: u32`, the perturbed frames, the
//! clean frames (both `f32` LE or `u8` quantized) and the `u8` label map of the
//! last frame. The JSON manifest next to the shards lists every shard with its
//! split, sample range and SHA-256.

use std::fmt;
use std::fs::{self, File};
use std::io::{BufReader, Read, Seek, SeekFrom};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{DatasetError, IoContext};
use crate::mnist::{GlyphBank, GlyphSplit};
use crate::scene::{generate_sequence, SceneConfig, SequenceSample};

pub const SHARD_MAGIC: [u8; 16] = *b"RFCNETDS\0\0\0\0\0\0\0\0";
pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
const SHARD_HEADER: u64 = 20;
const RECORD_HEADER: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
    CleanTest,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Train, Split::Val, Split::Test, Split::CleanTest];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::CleanTest => "clean_test",
        }
    }

    /// Digit glyphs used to texture this split.
    pub fn glyph_split(self) -> GlyphSplit {
        match self {
            Split::Train | Split::Val => GlyphSplit::Train,
            Split::Test | Split::CleanTest => GlyphSplit::Test,
        }
    }

    /// Random stream shared by a split's sequences. `clean_test` reuses the
    /// test stream so both splits show the same scenes.
    fn stream(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test | Split::CleanTest => 2,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = DatasetError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Split::ALL
            .into_iter()
            .find(|x| x.as_str() == s)
            .ok_or_else(|| DatasetError::UnknownSplit(s.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub clean_test: usize,
}

impl Default for SplitCounts {
    fn default() -> Self {
        Self {
            train: 20_000,
            val: 4_000,
            test: 1_000,
            clean_test: 1_000,
        }
    }
}

impl SplitCounts {
    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
            Split::CleanTest => self.clean_test,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameDtype {
    #[default]
    F32,
    /// `round(255 x)`, read back as `q / 255`.
    U8,
}

impl FrameDtype {
    fn width(self) -> usize {
        match self {
            FrameDtype::F32 => 4,
            FrameDtype::U8 => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardInfo {
    pub file: String,
    pub split: Split,
    /// Index of the first sample within its split.
    pub start: usize,
    pub count: usize,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub config_echo: SceneConfig,
    pub splits: SplitCounts,
    pub frame_dtype: FrameDtype,
    pub label_dtype: String,
    pub shard_size: usize,
    /// Where the digit glyphs came from (`bundled` or a directory).
    pub glyph_source: String,
    pub shards: Vec<ShardInfo>,
}

impl DatasetManifest {
    pub fn shards_of(&self, split: Split) -> impl Iterator<Item = &ShardInfo> {
        self.shards.iter().filter(move |s| s.split == split)
    }

    fn record_size(&self) -> usize {
        let c = &self.config_echo;
        let n = c.image_size * c.image_size;
        RECORD_HEADER + 2 * c.sequence_length * n * self.frame_dtype.width() + n
    }
}

/// Everything needed to generate a dataset, echoed into its manifest.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    /// Scene parameters; `seed` is the dataset seed.
    pub scene: SceneConfig,
    pub splits: SplitCounts,
    pub frame_dtype: FrameDtype,
    pub shard_size: usize,
    pub glyph_source: String,
}

impl DatasetSpec {
    pub fn from_manifest(m: &DatasetManifest) -> Self {
        Self {
            scene: m.config_echo.clone(),
            splits: m.splits,
            frame_dtype: m.frame_dtype,
            shard_size: m.shard_size,
            glyph_source: m.glyph_source.clone(),
        }
    }
}

/// The generator for sequence `index` of `split`: one ChaCha stream per
/// (seed, split), positioned by the sequence index.
pub fn sequence_rng(seed: u64, split: Split, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((split.stream() << 40) | index as u64);
    rng
}

/// Generates sequence `index` of `split`.
pub fn generate_indexed(
    cfg: &SceneConfig,
    glyphs: &GlyphBank,
    split: Split,
    index: usize,
) -> Result<SequenceSample, DatasetError> {
    let mut rng = sequence_rng(cfg.seed, split, index);
    let cfg = match split {
        Split::CleanTest => cfg.clean(),
        _ => cfg.clone(),
    };
    Ok(generate_sequence(&cfg, glyphs, split.glyph_split(), &mut rng)?)
}

fn encode_record(out: &mut Vec<u8>, index: usize, s: &SequenceSample, dtype: FrameDtype) {
    out.extend_from_slice(&(index as u64).to_le_bytes());
    out.extend_from_slice(&(s.steps as u32).to_le_bytes());
    out.extend_from_slice(&(s.size as u32).to_le_bytes());
    for frames in [&s.frames, &s.clean_frames] {
        match dtype {
            FrameDtype::F32 => frames.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            FrameDtype::U8 => out.extend(frames.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)),
        }
    }
    out.extend_from_slice(&s.label);
}

fn decode_frames(bytes: &[u8], dtype: FrameDtype) -> Vec<f32> {
    match dtype {
        FrameDtype::F32 => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect(),
        FrameDtype::U8 => bytes.iter().map(|&q| q as f32 / 255.0).collect(),
    }
}

fn decode_record(bytes: &[u8], dtype: FrameDtype) -> Result<(usize, SequenceSample), DatasetError> {
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as usize;
    let index = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    let (steps, size) = (u32_at(8), u32_at(12));
    let n = size * size;
    let fb = steps * n * dtype.width();
    if bytes.len() != RECORD_HEADER + 2 * fb + n {
        return Err(DatasetError::Format(format!(
            "record {index} declares {steps} frames of {size}x{size}, which does not fit {} bytes",
            bytes.len()
        )));
    }
    let body = &bytes[RECORD_HEADER..];
    Ok((
        index,
        SequenceSample {
            steps,
            size,
            frames: decode_frames(&body[..fb], dtype),
            clean_frames: decode_frames(&body[fb..2 * fb], dtype),
            label: body[2 * fb..].to_vec(),
        },
    ))
}

/// Serialized shard with its checksum.
fn encode_shard(start: usize, samples: &[SequenceSample], dtype: FrameDtype) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&SHARD_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for (i, s) in samples.iter().enumerate() {
        encode_record(&mut out, start + i, s, dtype);
    }
    out
}

fn write_file_atomic(path: &Path, bytes: &[u8]) -> Result<(), DatasetError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).at(&tmp)?;
    fs::rename(&tmp, path).at(path)?;
    Ok(())
}

fn shard_name(split: Split, n: usize) -> String {
    format!("{split}-{n:05}.rfcds")
}

/// Streams samples into shards of at most `shard_size` records. Samples of one
/// split must arrive together and in index order.
pub struct DatasetWriter {
    dir: PathBuf,
    spec: DatasetSpec,
    shards: Vec<ShardInfo>,
    counts: SplitCounts,
    pending: Vec<SequenceSample>,
    pending_split: Option<Split>,
    written: Vec<Split>,
}

impl DatasetWriter {
    pub fn create(dir: &Path, spec: DatasetSpec) -> Result<Self, DatasetError> {
        if spec.shard_size == 0 {
            return Err(DatasetError::Format("shard_size must be positive".into()));
        }
        fs::create_dir_all(dir).at(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            spec,
            shards: Vec::new(),
            counts: SplitCounts {
                train: 0,
                val: 0,
                test: 0,
                clean_test: 0,
            },
            pending: Vec::new(),
            pending_split: None,
            written: Vec::new(),
        })
    }

    fn count_mut(&mut self, split: Split) -> &mut usize {
        match split {
            Split::Train => &mut self.counts.train,
            Split::Val => &mut self.counts.val,
            Split::Test => &mut self.counts.test,
            Split::CleanTest => &mut self.counts.clean_test,
        }
    }

    pub fn push(&mut self, split: Split, sample: SequenceSample) -> Result<(), DatasetError> {
        let c = &self.spec.scene;
        if sample.steps != c.sequence_length || sample.size != c.image_size {
            return Err(DatasetError::Format(format!(
                "sample has {} frames of {}px, dataset expects {} of {}px",
                sample.steps, sample.size, c.sequence_length, c.image_size
            )));
        }
        if self.pending_split != Some(split) {
            self.flush()?;
            if self.written.contains(&split) {
                return Err(DatasetError::Format(format!("samples of split {split} are not contiguous")));
            }
            self.written.push(split);
            self.pending_split = Some(split);
        }
        self.pending.push(sample);
        if self.pending.len() == self.spec.shard_size {
            self.flush()?;
        }
        Ok(())
    }

    /// Writes an already encoded shard; used by the parallel generator.
    fn push_encoded(&mut self, split: Split, start: usize, count: usize, bytes: &[u8]) -> Result<(), DatasetError> {
        let n = self.shards.iter().filter(|s| s.split == split).count();
        let file = shard_name(split, n);
        let path = self.dir.join(&file);
        write_file_atomic(&path, bytes)?;
        self.shards.push(ShardInfo {
            file,
            split,
            start,
            count,
            sha256: hex::encode(Sha256::digest(bytes)),
        });
        *self.count_mut(split) += count;
        Ok(())
    }

    fn flush(&mut self) -> Result<(), DatasetError> {
        let Some(split) = self.pending_split else {
            return Ok(());
        };
        if self.pending.is_empty() {
            return Ok(());
        }
        let samples = std::mem::take(&mut self.pending);
        let start = self.counts.get(split);
        let bytes = encode_shard(start, &samples, self.spec.frame_dtype);
        self.push_encoded(split, start, samples.len(), &bytes)
    }

    /// Flushes the last shard and writes the manifest.
    pub fn finish(mut self) -> Result<DatasetManifest, DatasetError> {
        self.flush()?;
        let manifest = DatasetManifest {
            version: FORMAT_VERSION,
            config_echo: self.spec.scene.clone(),
            splits: self.counts,
            frame_dtype: self.spec.frame_dtype,
            label_dtype: "u8".into(),
            shard_size: self.spec.shard_size,
            glyph_source: self.spec.glyph_source.clone(),
            shards: self.shards,
        };
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| DatasetError::Format(e.to_string()))?;
        write_file_atomic(&self.dir.join(MANIFEST_FILE), text.as_bytes())?;
        Ok(manifest)
    }
}

/// Writes `samples` into `out_dir` and returns the manifest.
pub fn write_shards<I>(out_dir: &Path, spec: DatasetSpec, samples: I) -> Result<DatasetManifest, DatasetError>
where
    I: IntoIterator<Item = (Split, SequenceSample)>,
{
    let mut w = DatasetWriter::create(out_dir, spec)?;
    for (split, s) in samples {
        w.push(split, s)?;
    }
    w.finish()
}

/// Generates every split of `spec` into `out_dir` with `workers` threads.
/// The output does not depend on the worker count.
pub fn generate_dataset(
    spec: &DatasetSpec,
    glyphs: &GlyphBank,
    out_dir: &Path,
    workers: usize,
) -> Result<DatasetManifest, DatasetError> {
    spec.scene.validate()?;
    let workers = workers.max(1);
    let mut writer = DatasetWriter::create(out_dir, spec.clone())?;
    let jobs: Vec<(Split, usize, usize)> = Split::ALL
        .into_iter()
        .flat_map(|split| {
            let total = spec.splits.get(split);
            (0..total)
                .step_by(spec.shard_size)
                .map(move |start| (split, start, spec.shard_size.min(total - start)))
        })
        .collect();
    for batch in jobs.chunks(workers) {
        let encoded: Vec<Result<Vec<u8>, DatasetError>> = std::thread::scope(|scope| {
            let handles: Vec<_> = batch
                .iter()
                .map(|&(split, start, count)| {
                    scope.spawn(move || {
                        let samples = (start..start + count)
                            .map(|i| generate_indexed(&spec.scene, glyphs, split, i))
                            .collect::<Result<Vec<_>, _>>()?;
                        Ok(encode_shard(start, &samples, spec.frame_dtype))
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("generator thread panicked")).collect()
        });
        for (&(split, start, count), bytes) in batch.iter().zip(encoded) {
            writer.push_encoded(split, start, count, &bytes?)?;
        }
    }
    writer.finish()
}

fn sha256_file(path: &Path) -> Result<String, DatasetError> {
    let mut f = BufReader::new(File::open(path).at(path)?);
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf).at(path)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

/// A dataset directory opened through its manifest.
#[derive(Clone, Debug)]
pub struct Dataset {
    dir: PathBuf,
    manifest: DatasetManifest,
}

impl Dataset {
    pub fn open(dir: &Path) -> Result<Self, DatasetError> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).at(&path)?;
        let manifest: DatasetManifest =
            serde_json::from_str(&text).map_err(|e| DatasetError::Format(format!("{}: {e}", path.display())))?;
        if manifest.version != FORMAT_VERSION {
            return Err(DatasetError::Format(format!("unsupported dataset version {}", manifest.version)));
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest,
        })
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn len(&self, split: Split) -> usize {
        self.manifest.splits.get(split)
    }

    /// Checks the SHA-256 of every shard of `split`.
    pub fn verify_split(&self, split: Split) -> Result<(), DatasetError> {
        for s in self.manifest.shards_of(split) {
            if sha256_file(&self.dir.join(&s.file))? != s.sha256 {
                return Err(DatasetError::Checksum { shard: s.file.clone() });
            }
        }
        Ok(())
    }

    pub fn verify(&self) -> Result<(), DatasetError> {
        Split::ALL.into_iter().try_for_each(|s| self.verify_split(s))
    }

    /// Verifies the split's shards and returns a reader over it, in index
    /// order or shuffled by `shuffle_seed`.
    pub fn open_split(&self, split: Split, shuffle_seed: Option<u64>) -> Result<SplitReader, DatasetError> {
        self.verify_split(split)?;
        let shards: Vec<ShardInfo> = self.manifest.shards_of(split).cloned().collect();
        let covered: usize = shards.iter().map(|s| s.count).sum();
        if covered != self.len(split) {
            return Err(DatasetError::Format(format!(
                "split {split} lists {} samples but its shards hold {covered}",
                self.len(split)
            )));
        }
        let mut order: Vec<usize> = (0..covered).collect();
        if let Some(seed) = shuffle_seed {
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        }
        Ok(SplitReader {
            dir: self.dir.clone(),
            shards,
            record_size: self.manifest.record_size(),
            dtype: self.manifest.frame_dtype,
            order,
            pos: 0,
            open: None,
        })
    }

    /// Convenience: parses the split name first.
    pub fn open_split_named(&self, split: &str, shuffle_seed: Option<u64>) -> Result<SplitReader, DatasetError> {
        self.open_split(split.parse()?, shuffle_seed)
    }

    /// Regenerates the dataset from its manifest into `scratch` and compares
    /// shard checksums.
    pub fn verify_regeneration(&self, glyphs: &GlyphBank, scratch: &Path, workers: usize) -> Result<bool, DatasetError> {
        let again = generate_dataset(&DatasetSpec::from_manifest(&self.manifest), glyphs, scratch, workers)?;
        Ok(again.shards == self.manifest.shards)
    }
}

/// Random-access reader over one split; iterates in its configured order.
pub struct SplitReader {
    dir: PathBuf,
    shards: Vec<ShardInfo>,
    record_size: usize,
    dtype: FrameDtype,
    order: Vec<usize>,
    pos: usize,
    open: Option<(usize, File)>,
}

impl SplitReader {
    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Sample `index` of the split (ignores the iteration order).
    pub fn get(&mut self, index: usize) -> Result<SequenceSample, DatasetError> {
        let shard = self
            .shards
            .iter()
            .position(|s| (s.start..s.start + s.count).contains(&index))
            .ok_or_else(|| DatasetError::Format(format!("sample {index} is in no shard")))?;
        let path = self.dir.join(&self.shards[shard].file);
        if self.open.as_ref().map(|o| o.0) != Some(shard) {
            let mut f = File::open(&path).at(&path)?;
            let mut head = [0u8; SHARD_HEADER as usize];
            f.read_exact(&mut head).at(&path)?;
            if head[..16] != SHARD_MAGIC || head[16..] != FORMAT_VERSION.to_le_bytes() {
                return Err(DatasetError::Format(format!("{} is not a version {FORMAT_VERSION} shard", path.display())));
            }
            self.open = Some((shard, f));
        }
        let f = &mut self.open.as_mut().expect("shard open").1;
        let offset = SHARD_HEADER + ((index - self.shards[shard].start) * self.record_size) as u64;
        f.seek(SeekFrom::Start(offset)).at(&path)?;
        let mut buf = vec![0u8; self.record_size];
        f.read_exact(&mut buf).at(&path)?;
        let (stored, sample) = decode_record(&buf, self.dtype)?;
        if stored != index {
            return Err(DatasetError::Format(format!("expected sample {index}, found {stored}")));
        }
        Ok(sample)
    }

    /// Reads the whole split into memory in iteration order.
    pub fn read_all(mut self) -> Result<Vec<SequenceSample>, DatasetError> {
        self.by_ref().collect()
    }
}

impl Iterator for SplitReader {
    type Item = Result<SequenceSample, DatasetError>;

    fn next(&mut self) -> Option<Self::Item> {
        let &index = self.order.get(self.pos)?;
        self.pos += 1;
        Some(self.get(index))
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let n = self.order.len() - self.pos;
        (n, Some(n))
    }
}

impl ExactSizeIterator for SplitReader {}
