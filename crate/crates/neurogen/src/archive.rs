//! Trial archive: a directory holding `manifest.json`, `trials.f32` and
//! `trials.index.json`.
//!
//! `trials.f32` is a flat little-endian f32 array laid out
//! `[trial][channel][time]`; trial `row` starts at byte
//! `row · n_channels · n_timepoints · 4`. The index maps each row to its
//! trial id, subject, image id, repetition and split. The manifest carries
//! the sample shape, channel names, and per-subject split membership.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::io::{BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use neurogen_core::data::{self, NormalizationStats, RepetitionAverages};
use neurogen_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const DATA_FILE: &str = "trials.f32";
pub const INDEX_FILE: &str = "trials.index.json";

pub const TRAIN: &str = "train";
pub const TEST: &str = "test";
pub const GENERATED: &str = "generated";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchiveManifest {
    pub dataset_id: String,
    pub n_channels: usize,
    pub n_timepoints: usize,
    pub sampling_rate_hz: f64,
    pub channel_names: Vec<String>,
    pub subjects: Vec<String>,
    /// subject → split → trial rows, ascending.
    pub splits: BTreeMap<String, BTreeMap<String, Vec<usize>>>,
    /// Stimulus onset within the epoch; windows are labelled from it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub onset_ms: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub units: Option<String>,
}

impl ArchiveManifest {
    pub fn sample_shape(&self) -> (usize, usize) {
        (self.n_channels, self.n_timepoints)
    }

    fn trial_bytes(&self) -> u64 {
        (self.n_channels * self.n_timepoints * 4) as u64
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrialEntry {
    pub trial_id: String,
    pub subject: String,
    pub image_id: String,
    pub repetition: u32,
    pub split: String,
    pub row: usize,
}

/// Everything in a manifest except what the writer derives from the trials.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchiveInfo {
    pub dataset_id: String,
    pub sampling_rate_hz: f64,
    pub channel_names: Vec<String>,
    pub n_timepoints: usize,
    /// Subjects listed first in the manifest; others follow in order of appearance.
    pub subjects: Vec<String>,
    pub onset_ms: Option<f64>,
    pub units: Option<String>,
}

impl ArchiveInfo {
    pub fn of(m: &ArchiveManifest) -> Self {
        Self {
            dataset_id: m.dataset_id.clone(),
            sampling_rate_hz: m.sampling_rate_hz,
            channel_names: m.channel_names.clone(),
            n_timepoints: m.n_timepoints,
            subjects: m.subjects.clone(),
            onset_ms: m.onset_ms,
            units: m.units.clone(),
        }
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::format(path, e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(Error::io(path))
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(Error::io(path))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

/// Streams trials into a new archive directory.
pub struct ArchiveWriter {
    dir: PathBuf,
    info: ArchiveInfo,
    data: BufWriter<File>,
    entries: Vec<TrialEntry>,
    ids: BTreeSet<String>,
}

impl ArchiveWriter {
    pub fn create(dir: impl AsRef<Path>, info: ArchiveInfo) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        if info.channel_names.is_empty() || info.n_timepoints == 0 {
            return Err(Error::Data("an archive needs at least one channel and one time point".into()));
        }
        if !(info.sampling_rate_hz > 0.0 && info.sampling_rate_hz.is_finite()) {
            return Err(Error::Data(format!("sampling rate must be positive, got {}", info.sampling_rate_hz)));
        }
        fs::create_dir_all(&dir).map_err(Error::io(&dir))?;
        let path = dir.join(DATA_FILE);
        let data = BufWriter::new(File::create(&path).map_err(Error::io(&path))?);
        Ok(Self { dir, info, data, entries: Vec::new(), ids: BTreeSet::new() })
    }

    /// Appends one trial; returns its row.
    pub fn push(&mut self, trial_id: &str, subject: &str, image_id: &str, repetition: u32, split: &str, signal: &Tensor) -> Result<usize> {
        let want = [self.info.channel_names.len(), self.info.n_timepoints];
        if signal.shape() != want {
            return Err(Error::Data(format!("trial `{trial_id}` has shape {:?}, archive expects {:?}", signal.shape(), want)));
        }
        if !signal.is_finite() {
            return Err(Error::Data(format!("trial `{trial_id}` contains non-finite values")));
        }
        if !self.ids.insert(trial_id.to_string()) {
            return Err(Error::Data(format!("duplicate trial id `{trial_id}`")));
        }
        let mut buf = Vec::with_capacity(signal.len() * 4);
        for &v in signal.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        let path = self.dir.join(DATA_FILE);
        self.data.write_all(&buf).map_err(Error::io(&path))?;
        let row = self.entries.len();
        self.entries.push(TrialEntry {
            trial_id: trial_id.into(),
            subject: subject.into(),
            image_id: image_id.into(),
            repetition,
            split: split.into(),
            row,
        });
        Ok(row)
    }

    /// Writes the index and manifest and reopens the result for validation.
    pub fn finish(mut self) -> Result<Archive> {
        let path = self.dir.join(DATA_FILE);
        self.data.flush().map_err(Error::io(&path))?;
        drop(self.data);
        let mut subjects = self.info.subjects.clone();
        let mut splits: BTreeMap<String, BTreeMap<String, Vec<usize>>> = BTreeMap::new();
        for e in &self.entries {
            if !subjects.contains(&e.subject) {
                subjects.push(e.subject.clone());
            }
            splits.entry(e.subject.clone()).or_default().entry(e.split.clone()).or_default().push(e.row);
        }
        let manifest = ArchiveManifest {
            dataset_id: self.info.dataset_id,
            n_channels: self.info.channel_names.len(),
            n_timepoints: self.info.n_timepoints,
            sampling_rate_hz: self.info.sampling_rate_hz,
            channel_names: self.info.channel_names,
            subjects,
            splits,
            onset_ms: self.info.onset_ms,
            units: self.info.units,
        };
        write_json(&self.dir.join(INDEX_FILE), &self.entries)?;
        write_json(&self.dir.join(MANIFEST_FILE), &manifest)?;
        Archive::open(&self.dir)
    }
}

/// A validated archive; trial values are read on demand.
#[derive(Debug)]
pub struct Archive {
    dir: PathBuf,
    manifest: ArchiveManifest,
    entries: Vec<TrialEntry>,
    data: Mutex<File>,
}

impl Archive {
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        let mpath = dir.join(MANIFEST_FILE);
        let manifest: ArchiveManifest = read_json(&mpath)?;
        let ipath = dir.join(INDEX_FILE);
        let mut entries: Vec<TrialEntry> = read_json(&ipath)?;
        let dpath = dir.join(DATA_FILE);
        let data = File::open(&dpath).map_err(Error::io(&dpath))?;
        let bytes = data.metadata().map_err(Error::io(&dpath))?.len();
        validate(&manifest, &mut entries, bytes, &mpath, &ipath, &dpath)?;
        Ok(Self { dir, manifest, entries, data: Mutex::new(data) })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn manifest(&self) -> &ArchiveManifest {
        &self.manifest
    }

    /// Index entries ordered by row.
    pub fn entries(&self) -> &[TrialEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// One trial as `[n_channels, n_timepoints]`.
    pub fn read_trial(&self, row: usize) -> Result<Tensor> {
        let m = &self.manifest;
        if row >= self.entries.len() {
            return Err(Error::Data(format!("row {row} out of range for {} trials", self.entries.len())));
        }
        let path = self.dir.join(DATA_FILE);
        let mut buf = vec![0u8; m.trial_bytes() as usize];
        {
            let mut f = self.data.lock().unwrap_or_else(|p| p.into_inner());
            f.seek(SeekFrom::Start(row as u64 * m.trial_bytes())).map_err(Error::io(&path))?;
            f.read_exact(&mut buf).map_err(Error::io(&path))?;
        }
        let values: Vec<f64> = buf.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            let e = &self.entries[row];
            return Err(Error::format(&path, format!("trial `{}` has a non-finite value at channel {}", e.trial_id, m.channel_names[i / m.n_timepoints])));
        }
        Ok(Tensor::new(&[m.n_channels, m.n_timepoints], values)?)
    }

    /// Entries of one subject and split, by row.
    pub fn select(&self, subject: &str, split: &str) -> Vec<&TrialEntry> {
        self.entries.iter().filter(|e| e.subject == subject && e.split == split).collect()
    }

    pub fn load(&self, subject: &str, split: &str) -> Result<Vec<(&TrialEntry, Tensor)>> {
        self.select(subject, split).into_iter().map(|e| Ok((e, self.read_trial(e.row)?))).collect()
    }

    /// Reads every trial once, failing on the first non-finite value.
    pub fn verify_values(&self) -> Result<()> {
        (0..self.len()).try_for_each(|r| self.read_trial(r).map(|_| ()))
    }

    /// Per-channel statistics over the subject's training split.
    pub fn fit_stats(&self, subject: &str) -> Result<NormalizationStats> {
        let trials = self.load(subject, TRAIN)?;
        if trials.is_empty() {
            return Err(Error::Data(format!("subject `{subject}` has no `{TRAIN}` trials")));
        }
        Ok(NormalizationStats::fit(trials.iter().map(|(_, t)| t), &self.manifest.channel_names)?)
    }

    /// Repetition averages of one subject and split, optionally normalized first.
    pub fn average_repetitions(&self, subject: &str, split: &str, stats: Option<&NormalizationStats>) -> Result<RepetitionAverages> {
        let trials = self.load(subject, split)?;
        if trials.is_empty() {
            return Err(Error::Data(format!("subject `{subject}` has no `{split}` trials")));
        }
        let trials: Vec<(&str, Tensor)> = trials
            .into_iter()
            .map(|(e, t)| Ok((e.image_id.as_str(), match stats {
                Some(s) => s.normalize(&t)?,
                None => t,
            })))
            .collect::<Result<_>>()?;
        Ok(data::average_repetitions(trials.iter().map(|(id, t)| (*id, t)))?)
    }

    /// Rewrites the archive under `dir` through the writer.
    pub fn write_copy(&self, dir: impl AsRef<Path>) -> Result<Archive> {
        let mut w = ArchiveWriter::create(dir, ArchiveInfo::of(&self.manifest))?;
        for e in &self.entries {
            w.push(&e.trial_id, &e.subject, &e.image_id, e.repetition, &e.split, &self.read_trial(e.row)?)?;
        }
        w.finish()
    }
}

fn validate(m: &ArchiveManifest, entries: &mut [TrialEntry], bytes: u64, mpath: &Path, ipath: &Path, dpath: &Path) -> Result<()> {
    if m.n_channels == 0 || m.n_timepoints == 0 {
        return Err(Error::format(mpath, format!("sample shape ({}, {}) is empty", m.n_channels, m.n_timepoints)));
    }
    if m.channel_names.len() != m.n_channels {
        return Err(Error::format(mpath, format!("n_channels is {} but channel_names lists {}", m.n_channels, m.channel_names.len())));
    }
    let mut seen = BTreeSet::new();
    if let Some(dup) = m.channel_names.iter().find(|n| !seen.insert(n.as_str())) {
        return Err(Error::format(mpath, format!("duplicate channel name `{dup}`")));
    }
    if !(m.sampling_rate_hz > 0.0 && m.sampling_rate_hz.is_finite()) {
        return Err(Error::format(mpath, format!("sampling_rate_hz must be positive, got {}", m.sampling_rate_hz)));
    }
    let n = entries.len();
    let want = n as u64 * m.trial_bytes();
    if bytes != want {
        return Err(Error::format(
            dpath,
            format!("{n} trials of {}×{} f32 need {want} bytes, file has {bytes}", m.n_channels, m.n_timepoints),
        ));
    }
    entries.sort_by_key(|e| e.row);
    let mut ids = BTreeSet::new();
    for (i, e) in entries.iter().enumerate() {
        if e.row != i {
            return Err(Error::format(ipath, format!("rows must cover 0..{n} exactly once; row {i} is missing or duplicated")));
        }
        if !ids.insert(e.trial_id.as_str()) {
            return Err(Error::format(ipath, format!("duplicate trial id `{}`", e.trial_id)));
        }
        if !m.subjects.contains(&e.subject) {
            return Err(Error::format(ipath, format!("trial `{}` names subject `{}`, which the manifest does not list", e.trial_id, e.subject)));
        }
    }
    let mut owner: Vec<Option<(&str, &str)>> = vec![None; n];
    for (subject, splits) in &m.splits {
        if !m.subjects.contains(subject) {
            return Err(Error::format(mpath, format!("splits name unknown subject `{subject}`")));
        }
        for (split, rows) in splits {
            for &r in rows {
                let Some(slot) = owner.get_mut(r) else {
                    return Err(Error::format(mpath, format!("split {subject}/{split} lists row {r}, but there are {n} trials")));
                };
                if let Some((s, p)) = slot {
                    return Err(Error::format(mpath, format!("split overlap: row {r} is in both {s}/{p} and {subject}/{split}")));
                }
                *slot = Some((subject, split));
            }
        }
    }
    for (e, o) in entries.iter().zip(&owner) {
        match o {
            None => return Err(Error::format(mpath, format!("trial `{}` (row {}) is in no split", e.trial_id, e.row))),
            Some((s, p)) if *s != e.subject || *p != e.split => {
                return Err(Error::format(
                    ipath,
                    format!("trial `{}` is indexed as {}/{} but the manifest places it in {s}/{p}", e.trial_id, e.subject, e.split),
                ))
            }
            _ => {}
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn info(ch: usize, t: usize) -> ArchiveInfo {
        ArchiveInfo {
            dataset_id: "unit".into(),
            sampling_rate_hz: 100.0,
            channel_names: (0..ch).map(|c| format!("C{c}")).collect(),
            n_timepoints: t,
            subjects: vec![],
            onset_ms: None,
            units: None,
        }
    }

    fn small(dir: &Path) -> Archive {
        let mut w = ArchiveWriter::create(dir, info(4, 16)).unwrap();
        for i in 0..10 {
            let x = Tensor::new(&[4, 16], (0..64).map(|k| (i * 64 + k) as f64 * 0.25).collect()).unwrap();
            let split = if i < 7 { TRAIN } else { TEST };
            w.push(&format!("t{i}"), "s1", &format!("img{}", i % 3), (i / 3) as u32, split, &x).unwrap();
        }
        w.finish().unwrap()
    }

    #[test]
    fn ten_trials_round_trip() {
        let d = tempfile::tempdir().unwrap();
        let a = small(d.path());
        assert_eq!(a.len(), 10);
        assert_eq!(a.manifest().splits["s1"][TEST], vec![7, 8, 9]);
        assert_eq!(a.read_trial(3).unwrap().data()[1], (3 * 64 + 1) as f64 * 0.25);
        let copy = a.write_copy(d.path().join("copy")).unwrap();
        for f in [MANIFEST_FILE, DATA_FILE, INDEX_FILE] {
            assert_eq!(fs::read(d.path().join(f)).unwrap(), fs::read(copy.dir().join(f)).unwrap(), "{f}");
        }
    }

    #[test]
    fn channel_count_must_match_data() {
        let d = tempfile::tempdir().unwrap();
        small(d.path());
        let p = d.path().join(MANIFEST_FILE);
        let mut m: ArchiveManifest = read_json(&p).unwrap();
        m.n_channels = 5;
        m.channel_names.push("C4".into());
        write_json(&p, &m).unwrap();
        let err = Archive::open(d.path()).unwrap_err();
        assert!(matches!(err, Error::Format { .. }), "{err}");
    }

    #[test]
    fn split_overlap_and_truncation_are_rejected() {
        let d = tempfile::tempdir().unwrap();
        small(d.path());
        let p = d.path().join(MANIFEST_FILE);
        let mut m: ArchiveManifest = read_json(&p).unwrap();
        m.splits.get_mut("s1").unwrap().get_mut(TEST).unwrap().push(0);
        write_json(&p, &m).unwrap();
        assert!(Archive::open(d.path()).unwrap_err().to_string().contains("overlap"));

        let d = tempfile::tempdir().unwrap();
        small(d.path());
        let dp = d.path().join(DATA_FILE);
        let bytes = fs::read(&dp).unwrap();
        fs::write(&dp, &bytes[..bytes.len() - 4]).unwrap();
        assert!(Archive::open(d.path()).is_err());
    }

    #[test]
    fn writer_rejects_bad_trials() {
        let d = tempfile::tempdir().unwrap();
        let mut w = ArchiveWriter::create(d.path(), info(2, 3)).unwrap();
        assert!(w.push("a", "s", "i", 0, TRAIN, &Tensor::zeros(&[3, 2])).is_err());
        assert!(w.push("a", "s", "i", 0, TRAIN, &Tensor::full(&[2, 3], f64::NAN)).is_err());
        w.push("a", "s", "i", 0, TRAIN, &Tensor::zeros(&[2, 3])).unwrap();
        assert!(w.push("a", "s", "i", 1, TRAIN, &Tensor::zeros(&[2, 3])).is_err());
    }

    #[test]
    fn averages_and_stats_follow_splits() {
        let d = tempfile::tempdir().unwrap();
        let a = small(d.path());
        let avg = a.average_repetitions("s1", TEST, None).unwrap();
        assert_eq!(avg.by_image.len(), 3);
        assert_eq!(avg.by_image["img1"], a.read_trial(7).unwrap());
        let stats = a.fit_stats("s1").unwrap();
        assert_eq!(stats.channels(), 4);
        assert!(a.fit_stats("nobody").is_err());
    }
}
