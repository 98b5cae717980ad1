//! Dataset container, epoch windowing, electrode layouts and the synthetic
//! generator.
//!
//! Container layout (little-endian):
//!
//! ```text
//! "MSTG" | version u16 | N u16 | samples-per-epoch u32 | record count u64
//! N × (name length u16, UTF-8 name)
//! records × (subject u32, epoch index u32, label u8, N·samples × f32)
//! CRC32 of everything above
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;
use std::path::Path;

use rand::{seq::SliceRandom, Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::binio::{append_crc, put_string, verify_crc, ByteReader, ReadFailure};
use crate::graph::ElectrodeLayout;
use crate::NUM_STAGES;

const MAGIC: &[u8; 4] = b"MSTG";
const VERSION: u16 = 1;

/// Length of one scored epoch in seconds.
pub const EPOCH_SECONDS: f64 = 30.0;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("records out of order at position {position}: epoch index {got} follows {prev}")]
    Ordering { position: usize, prev: u32, got: u32 },
    #[error("layout line {line}: {msg}")]
    Layout { line: u64, msg: String },
    #[error("unknown builtin layout {0:?}")]
    UnknownLayout(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<ReadFailure> for DataError {
    fn from(f: ReadFailure) -> Self {
        DataError::Format { offset: f.offset, msg: f.msg }
    }
}

pub type Result<T> = std::result::Result<T, DataError>;

/// One scored epoch: `signal` holds `N × samples` values, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub subject: u32,
    pub epoch_index: u32,
    pub label: u8,
    pub signal: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub channels: Vec<String>,
    pub samples: usize,
    pub records: Vec<EpochRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub channels: Vec<String>,
    pub samples_per_epoch: usize,
    pub sample_rate_hz: f64,
    pub subjects: Vec<u32>,
    pub class_counts: [usize; NUM_STAGES],
}

impl Dataset {
    pub fn n_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Distinct subject ids in ascending order.
    pub fn subjects(&self) -> Vec<u32> {
        self.records.iter().map(|r| r.subject).collect::<BTreeSet<_>>().into_iter().collect()
    }

    pub fn manifest(&self) -> DatasetManifest {
        let mut class_counts = [0; NUM_STAGES];
        for r in &self.records {
            class_counts[r.label as usize] += 1;
        }
        DatasetManifest {
            channels: self.channels.clone(),
            samples_per_epoch: self.samples,
            sample_rate_hz: self.samples as f64 / EPOCH_SECONDS,
            subjects: self.subjects(),
            class_counts,
        }
    }

    /// Checks channel counts, labels, finiteness and `(subject, epoch)` uniqueness.
    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.len() > u16::MAX as usize {
            return Err(DataError::Invalid(format!("channel count {} out of range", self.channels.len())));
        }
        if self.samples == 0 || self.samples > u32::MAX as usize {
            return Err(DataError::Invalid(format!("samples per epoch {} out of range", self.samples)));
        }
        let width = self.channels.len() * self.samples;
        let mut seen = BTreeSet::new();
        for (i, r) in self.records.iter().enumerate() {
            if r.signal.len() != width {
                return Err(DataError::Invalid(format!(
                    "record {i} has {} values, expected {width}",
                    r.signal.len()
                )));
            }
            if r.label as usize >= NUM_STAGES {
                return Err(DataError::Invalid(format!("record {i} has label {}", r.label)));
            }
            if r.signal.iter().any(|v| !v.is_finite()) {
                return Err(DataError::Invalid(format!("record {i} has a non-finite sample")));
            }
            if !seen.insert((r.subject, r.epoch_index)) {
                return Err(DataError::Invalid(format!(
                    "duplicate (subject {}, epoch {})",
                    r.subject, r.epoch_index
                )));
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let width = self.channels.len() * self.samples;
        let mut out = Vec::with_capacity(24 + self.records.len() * (9 + 4 * width));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.channels.len() as u16).to_le_bytes());
        out.extend_from_slice(&(self.samples as u32).to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u64).to_le_bytes());
        for c in &self.channels {
            put_string(&mut out, c);
        }
        for r in &self.records {
            out.extend_from_slice(&r.subject.to_le_bytes());
            out.extend_from_slice(&r.epoch_index.to_le_bytes());
            out.push(r.label);
            for v in &r.signal {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        append_crc(&mut out);
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut head = ByteReader::new(buf);
        if head.bytes(4, "magic")? != MAGIC {
            return Err(DataError::Format { offset: 0, msg: "bad magic, not a dataset container".into() });
        }
        let payload = verify_crc(buf)?;
        let mut r = ByteReader::new(payload);
        r.bytes(4, "magic")?;
        let version = r.u16("version")?;
        if version != VERSION {
            return Err(DataError::Format { offset: 4, msg: format!("unsupported version {version}") });
        }
        let n = r.u16("channel count")? as usize;
        let samples = r.u32("samples per epoch")? as usize;
        let count_at = r.offset();
        let count = r.u64("record count")?;
        let mut channels = Vec::with_capacity(n);
        for _ in 0..n {
            channels.push(r.string("channel name")?);
        }
        let width = n * samples;
        let record_bytes = 9 + 4 * width as u64;
        if count.checked_mul(record_bytes) != Some(r.remaining() as u64) {
            return Err(DataError::Format {
                offset: count_at,
                msg: format!("record count {count} does not match payload of {} bytes", r.remaining()),
            });
        }
        let mut records = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let subject = r.u32("subject id")?;
            let epoch_index = r.u32("epoch index")?;
            let label_at = r.offset();
            let label = r.u8("label")?;
            if label as usize >= NUM_STAGES {
                return Err(DataError::Format { offset: label_at, msg: format!("label {label} out of range") });
            }
            let raw = r.bytes(4 * width, "signal")?;
            let signal = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
            records.push(EpochRecord { subject, epoch_index, label, signal });
        }
        let ds = Dataset { channels, samples, records };
        ds.validate()?;
        Ok(ds)
    }

    /// Channel `c` of record `i` as f64.
    pub fn channel(&self, i: usize, c: usize) -> impl Iterator<Item = f64> + '_ {
        self.records[i].signal[c * self.samples..(c + 1) * self.samples].iter().map(|&v| v as f64)
    }
}

pub fn save_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    std::fs::write(path, ds.to_bytes()?)?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<(DatasetManifest, Dataset)> {
    let ds = Dataset::from_bytes(&std::fs::read(path)?)?;
    Ok((ds.manifest(), ds))
}

/// `2d + 1` epoch positions centred on one epoch, plus its label and subject.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Window {
    pub epochs: Vec<usize>,
    pub label: u8,
    pub subject: u32,
}

/// Windows over one subject's night. Positions index into `records`, which
/// must be sorted by epoch index; missing context at either end repeats the
/// edge epoch.
pub fn window_sequence(records: &[EpochRecord], d: usize) -> Result<Vec<Window>> {
    for (i, pair) in records.windows(2).enumerate() {
        if pair[1].epoch_index <= pair[0].epoch_index {
            return Err(DataError::Ordering { position: i + 1, prev: pair[0].epoch_index, got: pair[1].epoch_index });
        }
        if pair[1].subject != pair[0].subject {
            return Err(DataError::Invalid(format!(
                "window sequence mixes subjects {} and {}",
                pair[0].subject, pair[1].subject
            )));
        }
    }
    let n = records.len() as isize;
    Ok((0..n)
        .map(|i| Window {
            epochs: (i - d as isize..=i + d as isize).map(|j| j.clamp(0, n - 1) as usize).collect(),
            label: records[i as usize].label,
            subject: records[i as usize].subject,
        })
        .collect())
}

/// Windows for every record of the listed subjects, with positions indexing
/// `ds.records`. Each subject's records are ordered by epoch index first.
pub fn window_dataset(ds: &Dataset, subjects: &[u32], d: usize) -> Result<Vec<Window>> {
    let mut by_subject: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, r) in ds.records.iter().enumerate() {
        by_subject.entry(r.subject).or_default().push(i);
    }
    let mut out = Vec::new();
    for s in subjects {
        let Some(idx) = by_subject.get_mut(s) else {
            return Err(DataError::Invalid(format!("subject {s} not in dataset")));
        };
        idx.sort_by_key(|&i| ds.records[i].epoch_index);
        let recs: Vec<EpochRecord> = idx.iter().map(|&i| ds.records[i].clone()).collect();
        for w in window_sequence(&recs, d)? {
            out.push(Window { epochs: w.epochs.iter().map(|&p| idx[p]).collect(), ..w });
        }
    }
    Ok(out)
}

/// Frequency band and amplitude of one class's oscillation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassBand {
    pub low_hz: f64,
    pub high_hz: f64,
    pub amplitude: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub subjects: usize,
    pub epochs_per_subject: usize,
    pub channels: usize,
    pub samples: usize,
    /// Time base of the generated oscillations. Shortened epochs keep this
    /// rate and simply cover less time.
    pub sample_rate_hz: f64,
    pub bands: Vec<ClassBand>,
    /// Scale of the per-subject channel gains and DC offsets.
    pub bias_strength: f64,
    pub noise_sigma: f64,
    /// Mean length of a run of identical labels.
    pub run_length: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn default_bands() -> Vec<ClassBand> {
        let b = |low_hz, high_hz, amplitude| ClassBand { low_hz, high_hz, amplitude };
        vec![b(18.0, 22.0, 1.0), b(6.0, 8.0, 0.8), b(11.0, 14.0, 1.0), b(1.0, 2.0, 2.0), b(3.0, 5.0, 0.8)]
    }
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            subjects: 5,
            epochs_per_subject: 200,
            channels: 3,
            samples: 3000,
            sample_rate_hz: 100.0,
            bands: Self::default_bands(),
            bias_strength: 0.5,
            noise_sigma: 0.5,
            run_length: 5,
            seed: 7,
        }
    }
}

/// Channel names used by generated data: scalp positions while they last,
/// then `ch{i}`.
pub fn synthetic_channel_names(n: usize) -> Vec<String> {
    const SCALP: [&str; 6] = ["C3", "C4", "F3", "F4", "O1", "O2"];
    (0..n).map(|i| SCALP.get(i).map(|s| s.to_string()).unwrap_or_else(|| format!("ch{i}"))).collect()
}

/// Electrode layout matching [`synthetic_channel_names`].
pub fn synthetic_layout(n: usize) -> ElectrodeLayout {
    if n <= 6 {
        builtin_layout("isruc6").unwrap().subset(&synthetic_channel_names(n)).unwrap()
    } else {
        let cols = (n as f64).sqrt().ceil() as usize;
        let names = synthetic_channel_names(n);
        let coords = (0..n).map(|i| [(i % cols) as f64, (i / cols) as f64, 0.0]).collect();
        ElectrodeLayout::new(names, coords).unwrap()
    }
}

/// Balanced label sequence made of shuffled runs.
fn label_runs(total: usize, classes: usize, run: usize, offset: usize, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let mut runs = Vec::new();
    for c in 0..classes {
        // spread the remainder across subjects through `offset`
        let mut left = total / classes + usize::from((c + classes - offset % classes) % classes < total % classes);
        while left > 0 {
            let len = left.min(run.max(1));
            runs.push((c as u8, len));
            left -= len;
        }
    }
    runs.shuffle(rng);
    runs.into_iter().flat_map(|(c, len)| std::iter::repeat_n(c, len)).collect()
}

/// Generates labelled multichannel epochs. Each class is a mixture of three
/// sinusoids drawn from its band plus Gaussian noise; each subject applies
/// fixed per-channel gains `1 + b·u` and offsets `b·z` (`u ~ U(−½, ½)`,
/// `z ~ N(0, 1)`, `b` the bias strength).
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(DatasetManifest, Dataset)> {
    if spec.subjects == 0 || spec.epochs_per_subject == 0 || spec.channels == 0 || spec.samples == 0 {
        return Err(DataError::Invalid("synthetic counts must be positive".into()));
    }
    if spec.bands.is_empty() || spec.bands.len() > NUM_STAGES {
        return Err(DataError::Invalid(format!("need 1..={NUM_STAGES} class bands")));
    }
    if !(spec.bias_strength >= 0.0) || !(spec.noise_sigma >= 0.0) {
        return Err(DataError::Invalid("bias strength and noise must be non-negative".into()));
    }
    let rate = spec.sample_rate_hz;
    if !(rate > 0.0) || !rate.is_finite() {
        return Err(DataError::Invalid("sample rate must be positive".into()));
    }
    let noise = Normal::new(0.0, spec.noise_sigma).unwrap();
    let std_normal = Normal::new(0.0, 1.0).unwrap();
    let classes = spec.bands.len();
    let mut records = Vec::with_capacity(spec.subjects * spec.epochs_per_subject);

    for s in 0..spec.subjects {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(s as u64 + 1);
        let gains: Vec<f64> =
            (0..spec.channels).map(|_| 1.0 + spec.bias_strength * (rng.gen::<f64>() - 0.5)).collect();
        let offsets: Vec<f64> =
            (0..spec.channels).map(|_| spec.bias_strength * std_normal.sample(&mut rng)).collect();
        let labels = label_runs(spec.epochs_per_subject, classes, spec.run_length, s, &mut rng);

        for (e, &label) in labels.iter().enumerate() {
            let band = spec.bands[label as usize];
            let comps: Vec<(f64, f64)> = (0..3)
                .map(|_| (rng.gen_range(band.low_hz..=band.high_hz), rng.gen_range(0.0..2.0 * PI)))
                .collect();
            let mut signal = Vec::with_capacity(spec.channels * spec.samples);
            for c in 0..spec.channels {
                let shift = rng.gen_range(0.0..2.0 * PI);
                for t in 0..spec.samples {
                    let time = t as f64 / rate;
                    let clean: f64 = comps.iter().map(|&(f, p)| (2.0 * PI * f * time + p + shift).sin()).sum::<f64>()
                        * band.amplitude
                        / 3f64.sqrt();
                    let v = gains[c] * (clean + noise.sample(&mut rng)) + offsets[c];
                    signal.push(v as f32);
                }
            }
            records.push(EpochRecord { subject: s as u32, epoch_index: e as u32, label, signal });
        }
    }
    let ds = Dataset { channels: synthetic_channel_names(spec.channels), samples: spec.samples, records };
    Ok((ds.manifest(), ds))
}

/// Parses `name,x,y,z` rows; an optional header row starting with `name`
/// is skipped.
pub fn parse_layout_csv(text: &str) -> Result<ElectrodeLayout> {
    let mut reader = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_reader(text.as_bytes());
    let mut names: Vec<String> = Vec::new();
    let mut coords = Vec::new();
    for (row, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| DataError::Layout {
            line: e.position().map(|p| p.line()).unwrap_or(0),
            msg: e.to_string(),
        })?;
        let line = rec.position().map(|p| p.line()).unwrap_or(row as u64 + 1);
        if row == 0 && rec.get(0).is_some_and(|f| f.eq_ignore_ascii_case("name")) {
            continue;
        }
        if rec.len() != 4 {
            return Err(DataError::Layout { line, msg: format!("expected 4 fields, got {}", rec.len()) });
        }
        let name = rec[0].to_string();
        if name.is_empty() {
            return Err(DataError::Layout { line, msg: "empty channel name".into() });
        }
        if names.contains(&name) {
            return Err(DataError::Layout { line, msg: format!("duplicate channel name {name:?}") });
        }
        let mut xyz = [0.0; 3];
        for (k, v) in xyz.iter_mut().enumerate() {
            *v = rec[k + 1]
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| DataError::Layout { line, msg: format!("non-numeric coordinate {:?}", &rec[k + 1]) })?;
        }
        names.push(name);
        coords.push(xyz);
    }
    if names.is_empty() {
        return Err(DataError::Layout { line: 0, msg: "no electrodes".into() });
    }
    ElectrodeLayout::new(names, coords).map_err(|e| DataError::Layout { line: 0, msg: e.to_string() })
}

pub fn load_electrode_layout(path: &Path) -> Result<ElectrodeLayout> {
    parse_layout_csv(&std::fs::read_to_string(path)?)
}

/// `isruc6` (F3, F4, C3, C4, O1, O2 on a unit sphere) or `gridRxC`
/// (unit-spaced planar grid, channels `g{r}_{c}`).
pub fn builtin_layout(name: &str) -> Result<ElectrodeLayout> {
    if name == "isruc6" {
        let raw: [(&str, [f64; 3]); 6] = [
            ("F3", [-0.545, 0.673, 0.500]),
            ("F4", [0.545, 0.673, 0.500]),
            ("C3", [-0.719, 0.0, 0.695]),
            ("C4", [0.719, 0.0, 0.695]),
            ("O1", [-0.309, -0.951, 0.0]),
            ("O2", [0.309, -0.951, 0.0]),
        ];
        let names = raw.iter().map(|(n, _)| n.to_string()).collect();
        let coords = raw
            .iter()
            .map(|(_, p)| {
                let norm = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
                [p[0] / norm, p[1] / norm, p[2] / norm]
            })
            .collect();
        return Ok(ElectrodeLayout::new(names, coords).unwrap());
    }
    let dims = name
        .strip_prefix("grid")
        .map(|s| s.trim())
        .and_then(|s| s.split_once(['x', 'X']))
        .and_then(|(r, c)| Some((r.trim().parse::<usize>().ok()?, c.trim().parse::<usize>().ok()?)));
    match dims {
        Some((r, c)) if r > 0 && c > 0 => {
            let mut names = Vec::new();
            let mut coords = Vec::new();
            for i in 0..r {
                for j in 0..c {
                    names.push(format!("g{i}_{j}"));
                    coords.push([j as f64, i as f64, 0.0]);
                }
            }
            Ok(ElectrodeLayout::new(names, coords).unwrap())
        }
        _ => Err(DataError::UnknownLayout(name.to_string())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_runs_are_balanced() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let l = label_runs(23, 5, 4, 0, &mut rng);
        assert_eq!(l.len(), 23);
        let counts: Vec<usize> = (0..5).map(|c| l.iter().filter(|&&v| v == c).count()).collect();
        assert_eq!(counts, vec![5, 5, 5, 4, 4]);
    }

    #[test]
    fn remainders_rotate_across_subjects() {
        let mut total = [0; 5];
        for s in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(s as u64);
            for l in label_runs(12, 5, 3, s, &mut rng) {
                total[l as usize] += 1;
            }
        }
        assert_eq!(total, [12; 5]);
    }

    #[test]
    fn grid_names() {
        let g = builtin_layout("grid2x3").unwrap();
        assert_eq!(g.len(), 6);
        assert_eq!(g.names()[4], "g1_1");
        assert!(matches!(builtin_layout("grid0x3"), Err(DataError::UnknownLayout(_))));
    }
}
