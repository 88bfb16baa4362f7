//! Dataset files, dialogue splits and padded batches.
//!
//! A dataset file is JSON Lines: one header object, then one object per
//! utterance.
//!
//! ```text
//! {"format":"cmfusion-dataset","version":1,"d_audio_in":24,"d_text_in":16,"n_classes":7,"label_names":[...]}
//! {"dialogue_id":"d0","utterance_index":0,"label":3,"audio":[...],"text":[...]}
//! ```
//!
//! Utterances of a dialogue may appear anywhere in the file; dialogues keep
//! the order of their first appearance.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FORMAT_TAG: &str = "cmfusion-dataset";
pub const FORMAT_VERSION: u32 = 1;
/// Label carried by padded positions; never a valid class.
pub const PAD_LABEL: i64 = -1;
pub const DEFAULT_LABEL_NAMES: [&str; 7] = [
    "neutral", "surprise", "fear", "sadness", "joy", "disgust", "anger",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetHeader {
    pub format: String,
    pub version: u32,
    pub d_audio_in: usize,
    pub d_text_in: usize,
    pub n_classes: usize,
    pub label_names: Vec<String>,
}

impl DatasetHeader {
    /// Header with the default emotion names for 7 classes, `class_<i>` otherwise.
    pub fn new(d_audio_in: usize, d_text_in: usize, n_classes: usize) -> Self {
        let label_names = if n_classes == DEFAULT_LABEL_NAMES.len() {
            DEFAULT_LABEL_NAMES.iter().map(|s| s.to_string()).collect()
        } else {
            (0..n_classes).map(|i| format!("class_{i}")).collect()
        };
        Self {
            format: FORMAT_TAG.into(),
            version: FORMAT_VERSION,
            d_audio_in,
            d_text_in,
            n_classes,
            label_names,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.format != FORMAT_TAG {
            return Err(Error::Schema(format!(
                "unknown format tag {:?}, expected {FORMAT_TAG:?}",
                self.format
            )));
        }
        if self.version != FORMAT_VERSION {
            return Err(Error::Schema(format!(
                "unsupported dataset version {}",
                self.version
            )));
        }
        if self.d_audio_in == 0 || self.d_text_in == 0 {
            return Err(Error::Schema("feature dimensions must be positive".into()));
        }
        if self.n_classes < 2 {
            return Err(Error::Schema(format!(
                "n_classes must be at least 2, got {}",
                self.n_classes
            )));
        }
        if self.label_names.len() != self.n_classes {
            return Err(Error::Schema(format!(
                "{} label names for {} classes",
                self.label_names.len(),
                self.n_classes
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UtteranceRecord {
    pub dialogue_id: String,
    pub utterance_index: usize,
    pub label: i64,
    pub audio: Vec<f64>,
    pub text: Vec<f64>,
}

/// One dialogue: `[T x d_audio]` and `[T x d_text]` features plus `T` labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dialogue {
    pub id: String,
    pub audio: Tensor,
    pub text: Tensor,
    pub labels: Vec<usize>,
}

impl Dialogue {
    pub fn new(id: impl Into<String>, audio: Tensor, text: Tensor, labels: Vec<usize>) -> Result<Self> {
        let (ta, _) = audio.dims2()?;
        let (tt, _) = text.dims2()?;
        if ta != tt || ta != labels.len() {
            return Err(Error::Contract(format!(
                "dialogue with {ta} audio rows, {tt} text rows and {} labels",
                labels.len()
            )));
        }
        Ok(Self {
            id: id.into(),
            audio,
            text,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn records(&self) -> impl Iterator<Item = UtteranceRecord> + '_ {
        (0..self.len()).map(move |i| UtteranceRecord {
            dialogue_id: self.id.clone(),
            utterance_index: i,
            label: self.labels[i] as i64,
            audio: self.audio.row(i).to_vec(),
            text: self.text.row(i).to_vec(),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub header: DatasetHeader,
    pub dialogues: Vec<Dialogue>,
}

impl DatasetSplit {
    pub fn new(header: DatasetHeader) -> Result<Self> {
        header.validate()?;
        Ok(Self {
            header,
            dialogues: Vec::new(),
        })
    }

    /// Appends a dialogue after checking it against the header.
    pub fn push(&mut self, dialogue: Dialogue) -> Result<()> {
        let h = &self.header;
        let (_, da) = dialogue.audio.dims2()?;
        let (_, dt) = dialogue.text.dims2()?;
        if da != h.d_audio_in || dt != h.d_text_in {
            return Err(Error::Schema(format!(
                "dialogue {} has widths audio {da}, text {dt}; header says {}, {}",
                dialogue.id, h.d_audio_in, h.d_text_in
            )));
        }
        if let Some(&bad) = dialogue.labels.iter().find(|&&l| l >= h.n_classes) {
            return Err(Error::Data(format!(
                "dialogue {}: label {bad} outside 0..{}",
                dialogue.id, h.n_classes
            )));
        }
        self.dialogues.push(dialogue);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.dialogues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dialogues.is_empty()
    }

    pub fn n_utterances(&self) -> usize {
        self.dialogues.iter().map(Dialogue::len).sum()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.header.n_classes];
        for d in &self.dialogues {
            for &l in &d.labels {
                counts[l] += 1;
            }
        }
        counts
    }

    pub fn records(&self) -> impl Iterator<Item = UtteranceRecord> + '_ {
        self.dialogues.iter().flat_map(Dialogue::records)
    }

    /// Groups records into dialogues and validates them against `header`.
    pub fn from_records(header: DatasetHeader, records: Vec<UtteranceRecord>) -> Result<Self> {
        let located: Vec<(usize, UtteranceRecord)> = records.into_iter().enumerate().collect();
        Self::group(header, located, |i| format!("record {i}"))
    }

    fn group(
        header: DatasetHeader,
        records: Vec<(usize, UtteranceRecord)>,
        locate: impl Fn(usize) -> String,
    ) -> Result<Self> {
        let mut split = Self::new(header)?;
        let h = split.header.clone();
        let mut order: Vec<String> = Vec::new();
        let mut groups: HashMap<String, Vec<(usize, UtteranceRecord)>> = HashMap::new();
        for (pos, r) in records {
            let where_ = || format!("{} (dialogue {}, utterance {})", locate(pos), r.dialogue_id, r.utterance_index);
            if r.audio.len() != h.d_audio_in {
                return Err(Error::Schema(format!(
                    "{}: audio vector has length {}, header says {}",
                    where_(),
                    r.audio.len(),
                    h.d_audio_in
                )));
            }
            if r.text.len() != h.d_text_in {
                return Err(Error::Schema(format!(
                    "{}: text vector has length {}, header says {}",
                    where_(),
                    r.text.len(),
                    h.d_text_in
                )));
            }
            if r.label < 0 || r.label as usize >= h.n_classes {
                return Err(Error::Data(format!(
                    "{}: label {} outside 0..{}",
                    where_(),
                    r.label,
                    h.n_classes
                )));
            }
            if !r.audio.iter().chain(&r.text).all(|v| v.is_finite()) {
                return Err(Error::Data(format!("{}: non-finite feature value", where_())));
            }
            if !groups.contains_key(&r.dialogue_id) {
                order.push(r.dialogue_id.clone());
            }
            groups.entry(r.dialogue_id.clone()).or_default().push((pos, r));
        }
        for id in order {
            let mut utts = groups.remove(&id).unwrap_or_default();
            utts.sort_by_key(|(_, r)| r.utterance_index);
            for (expected, (pos, r)) in utts.iter().enumerate() {
                if r.utterance_index != expected {
                    return Err(Error::Data(format!(
                        "{}: dialogue {id} utterance indices are not contiguous from 0 (found {} where {expected} was expected)",
                        locate(*pos),
                        r.utterance_index
                    )));
                }
            }
            let t = utts.len();
            let mut audio = Vec::with_capacity(t * h.d_audio_in);
            let mut text = Vec::with_capacity(t * h.d_text_in);
            let mut labels = Vec::with_capacity(t);
            for (_, r) in utts {
                audio.extend(r.audio);
                text.extend(r.text);
                labels.push(r.label as usize);
            }
            split.push(Dialogue::new(
                id,
                Tensor::matrix(t, h.d_audio_in, audio)?,
                Tensor::matrix(t, h.d_text_in, text)?,
                labels,
            )?)?;
        }
        Ok(split)
    }
}

/// Reads a dataset from any buffered reader; `source` labels error messages.
pub fn read_dataset<R: BufRead>(reader: R, source: &str) -> Result<DatasetSplit> {
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: source.to_string(),
        line,
        msg,
    };
    let mut header: Option<DatasetHeader> = None;
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::io(source, e))?;
        if line.trim().is_empty() {
            continue;
        }
        if header.is_none() {
            let h: DatasetHeader =
                serde_json::from_str(&line).map_err(|e| parse_err(lineno, format!("bad header: {e}")))?;
            h.validate()?;
            header = Some(h);
        } else {
            let r: UtteranceRecord =
                serde_json::from_str(&line).map_err(|e| parse_err(lineno, e.to_string()))?;
            records.push((lineno, r));
        }
    }
    let header = header.ok_or_else(|| parse_err(1, "missing header line".into()))?;
    DatasetSplit::group(header, records, |line| format!("{source}:{line}"))
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<DatasetSplit> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_dataset(BufReader::new(file), &path.display().to_string())
}

pub fn write_dataset<W: Write>(split: &DatasetSplit, mut out: W) -> std::io::Result<()> {
    serde_json::to_writer(&mut out, &split.header)?;
    out.write_all(b"\n")?;
    for r in split.records() {
        serde_json::to_writer(&mut out, &r)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

pub fn save_dataset(split: &DatasetSplit, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_dataset(split, BufWriter::new(file)).map_err(|e| Error::io(path, e))
}

/// Dialogues padded to a common length.
///
/// `audio` is `[B x T_max x d_audio]`, `text` is `[B x T_max x d_text]`;
/// `labels` and `mask` are row-major `[B x T_max]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DialogueBatch {
    pub dialogue_ids: Vec<String>,
    pub max_len: usize,
    pub audio: Tensor,
    pub text: Tensor,
    pub labels: Vec<i64>,
    pub mask: Vec<bool>,
}

impl DialogueBatch {
    pub fn from_dialogues(dialogues: &[&Dialogue]) -> Result<Self> {
        let first = dialogues
            .first()
            .ok_or_else(|| Error::Contract("empty batch".into()))?;
        let (_, da) = first.audio.dims2()?;
        let (_, dt) = first.text.dims2()?;
        let b = dialogues.len();
        let t_max = dialogues.iter().map(|d| d.len()).max().unwrap_or(0);
        if t_max == 0 {
            return Err(Error::Contract("batch of empty dialogues".into()));
        }
        let mut audio = vec![0.0; b * t_max * da];
        let mut text = vec![0.0; b * t_max * dt];
        let mut labels = vec![PAD_LABEL; b * t_max];
        let mut mask = vec![false; b * t_max];
        for (i, d) in dialogues.iter().enumerate() {
            let n = d.len();
            audio[i * t_max * da..][..n * da].copy_from_slice(d.audio.data());
            text[i * t_max * dt..][..n * dt].copy_from_slice(d.text.data());
            for (j, &l) in d.labels.iter().enumerate() {
                labels[i * t_max + j] = l as i64;
                mask[i * t_max + j] = true;
            }
        }
        Ok(Self {
            dialogue_ids: dialogues.iter().map(|d| d.id.clone()).collect(),
            max_len: t_max,
            audio: Tensor::new(vec![b, t_max, da], audio)?,
            text: Tensor::new(vec![b, t_max, dt], text)?,
            labels,
            mask,
        })
    }

    pub fn len(&self) -> usize {
        self.dialogue_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dialogue_ids.is_empty()
    }

    pub fn n_valid(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Padded matrices, labels and mask of dialogue `b`.
    pub fn dialogue(&self, b: usize) -> Result<BatchItem<'_>> {
        let t = self.max_len;
        let slice = |x: &Tensor| -> Result<Tensor> {
            let w = x.shape()[2];
            Tensor::matrix(t, w, x.data()[b * t * w..(b + 1) * t * w].to_vec())
        };
        Ok(BatchItem {
            audio: slice(&self.audio)?,
            text: slice(&self.text)?,
            labels: &self.labels[b * t..(b + 1) * t],
            mask: &self.mask[b * t..(b + 1) * t],
        })
    }
}

pub struct BatchItem<'a> {
    pub audio: Tensor,
    pub text: Tensor,
    pub labels: &'a [i64],
    pub mask: &'a [bool],
}

/// Shuffles dialogues with `seed` and cuts them into padded batches.
pub fn make_batches(split: &DatasetSplit, batch_size: usize, seed: u64) -> Result<Vec<DialogueBatch>> {
    let mut order: Vec<&Dialogue> = split.dialogues.iter().collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    chunk_batches(&order, batch_size)
}

/// Batches in file order, for evaluation.
pub fn ordered_batches(split: &DatasetSplit, batch_size: usize) -> Result<Vec<DialogueBatch>> {
    let order: Vec<&Dialogue> = split.dialogues.iter().collect();
    chunk_batches(&order, batch_size)
}

fn chunk_batches(order: &[&Dialogue], batch_size: usize) -> Result<Vec<DialogueBatch>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    if order.is_empty() {
        return Err(Error::Config("cannot batch an empty split".into()));
    }
    order.chunks(batch_size).map(DialogueBatch::from_dialogues).collect()
}
