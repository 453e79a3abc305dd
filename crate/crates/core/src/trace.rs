//! Sensor traces: the observation alphabet, labels, deduplication, cycle
//! segmentation, train/test splitting and the CSV trace format.
//!
//! A trace file starts with a `# sampling_period_ms=<int>` header followed by
//! one row per sample: eleven `0`/`1` sensor columns and a label column
//! (`A`, `B`, `C`, `D`, `T`, or `?` for unlabeled traces).

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Number of proximity sensors on the conveyor.
pub const SENSOR_COUNT: usize = 11;

pub const DEFAULT_SAMPLING_PERIOD_MS: u32 = 500;

/// One sampled reading of all eleven binary sensors.
///
/// Stored as a bit mask; bit `i` is sensor `i`.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct SensorVector(u16);

impl SensorVector {
    const MASK: u16 = (1 << SENSOR_COUNT) - 1;

    pub fn from_bits(bits: &[u8]) -> Result<Self> {
        if bits.len() != SENSOR_COUNT {
            return Err(Error::InvalidSensorVector(format!(
                "expected {SENSOR_COUNT} sensors, got {}",
                bits.len()
            )));
        }
        let mut mask = 0u16;
        for (i, &b) in bits.iter().enumerate() {
            match b {
                0 => {}
                1 => mask |= 1 << i,
                other => {
                    return Err(Error::InvalidSensorVector(format!(
                        "sensor {i} has non-binary value {other}"
                    )))
                }
            }
        }
        Ok(SensorVector(mask))
    }

    /// Builds a vector from the low eleven bits of `mask`; higher bits are ignored.
    pub fn from_mask(mask: u16) -> Self {
        SensorVector(mask & Self::MASK)
    }

    pub fn mask(self) -> u16 {
        self.0
    }

    pub fn get(self, sensor: usize) -> bool {
        assert!(sensor < SENSOR_COUNT, "sensor index {sensor} out of range");
        self.0 & (1 << sensor) != 0
    }

    pub fn with_flipped(self, sensor: usize) -> Self {
        assert!(sensor < SENSOR_COUNT, "sensor index {sensor} out of range");
        SensorVector(self.0 ^ (1 << sensor))
    }

    pub fn bits(self) -> [u8; SENSOR_COUNT] {
        let mut out = [0u8; SENSOR_COUNT];
        for (i, b) in out.iter_mut().enumerate() {
            *b = self.get(i) as u8;
        }
        out
    }

    /// Sensors as 0.0/1.0 network inputs.
    pub fn as_features(self) -> [f64; SENSOR_COUNT] {
        let mut out = [0.0; SENSOR_COUNT];
        for (i, x) in out.iter_mut().enumerate() {
            *x = if self.get(i) { 1.0 } else { 0.0 };
        }
        out
    }

    /// Sensor 0 first, e.g. `10001000101`.
    pub fn to_bitstring(self) -> String {
        self.bits()
            .iter()
            .map(|b| if *b == 1 { '1' } else { '0' })
            .collect()
    }
}

impl FromStr for SensorVector {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bits = s
            .chars()
            .map(|c| match c {
                '0' => Ok(0u8),
                '1' => Ok(1u8),
                other => Err(Error::InvalidSensorVector(format!(
                    "non-binary character {other:?} in {s:?}"
                ))),
            })
            .collect::<Result<Vec<_>>>()?;
        SensorVector::from_bits(&bits)
    }
}

impl fmt::Debug for SensorVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SensorVector({})", self.to_bitstring())
    }
}

impl fmt::Display for SensorVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_bitstring())
    }
}

impl Serialize for SensorVector {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_bitstring())
    }
}

impl<'de> Deserialize<'de> for SensorVector {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Where the block is: at one of the four corner positions, or in between.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PositionLabel {
    A,
    B,
    C,
    D,
    #[serde(rename = "T")]
    Transition,
}

impl PositionLabel {
    /// Class order used by the classifier; ties resolve to the lowest index.
    pub const ALL: [PositionLabel; 5] = [
        PositionLabel::A,
        PositionLabel::B,
        PositionLabel::C,
        PositionLabel::D,
        PositionLabel::Transition,
    ];

    pub const POSITIONS: [PositionLabel; 4] = [
        PositionLabel::A,
        PositionLabel::B,
        PositionLabel::C,
        PositionLabel::D,
    ];

    pub fn index(self) -> usize {
        match self {
            PositionLabel::A => 0,
            PositionLabel::B => 1,
            PositionLabel::C => 2,
            PositionLabel::D => 3,
            PositionLabel::Transition => 4,
        }
    }

    pub fn from_index(index: usize) -> Option<Self> {
        Self::ALL.get(index).copied()
    }

    pub fn is_position(self) -> bool {
        self != PositionLabel::Transition
    }

    /// The next corner in conveying order, `D` wrapping to `A`.
    pub fn next_position(self) -> Option<Self> {
        match self {
            PositionLabel::A => Some(PositionLabel::B),
            PositionLabel::B => Some(PositionLabel::C),
            PositionLabel::C => Some(PositionLabel::D),
            PositionLabel::D => Some(PositionLabel::A),
            PositionLabel::Transition => None,
        }
    }

    pub fn token(self) -> &'static str {
        match self {
            PositionLabel::A => "A",
            PositionLabel::B => "B",
            PositionLabel::C => "C",
            PositionLabel::D => "D",
            PositionLabel::Transition => "T",
        }
    }
}

impl fmt::Display for PositionLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

impl FromStr for PositionLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A" => Ok(PositionLabel::A),
            "B" => Ok(PositionLabel::B),
            "C" => Ok(PositionLabel::C),
            "D" => Ok(PositionLabel::D),
            "T" | "Transition" => Ok(PositionLabel::Transition),
            other => Err(Error::UnknownLabel(other.to_string())),
        }
    }
}

/// A sensor reading at a sampling step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Observation {
    pub index: usize,
    pub sensors: SensorVector,
}

/// Wraps a sequence of readings as observations indexed from zero.
pub fn observations(sensors: impl IntoIterator<Item = SensorVector>) -> Vec<Observation> {
    sensors
        .into_iter()
        .enumerate()
        .map(|(index, sensors)| Observation { index, sensors })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Sample {
    pub sensors: SensorVector,
    pub label: PositionLabel,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabeledTrace {
    pub sampling_period_ms: u32,
    pub samples: Vec<Sample>,
}

impl LabeledTrace {
    pub fn new(samples: Vec<Sample>) -> Self {
        LabeledTrace {
            sampling_period_ms: DEFAULT_SAMPLING_PERIOD_MS,
            samples,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn sensors(&self) -> Vec<SensorVector> {
        self.samples.iter().map(|s| s.sensors).collect()
    }

    pub fn labels(&self) -> Vec<PositionLabel> {
        self.samples.iter().map(|s| s.label).collect()
    }
}

/// One revolution of the block, `[start_index, end_index)` in the source trace.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Cycle {
    pub start_index: usize,
    pub end_index: usize,
    pub samples: Vec<Sample>,
}

impl Cycle {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn sensors(&self) -> Vec<SensorVector> {
        self.samples.iter().map(|s| s.sensors).collect()
    }

    pub fn labels(&self) -> Vec<PositionLabel> {
        self.samples.iter().map(|s| s.label).collect()
    }
}

/// Drops every observation equal to its predecessor.
pub fn dedup_consecutive(trace: &[Observation]) -> Vec<Observation> {
    let mut out: Vec<Observation> = Vec::with_capacity(trace.len());
    for obs in trace {
        if out.last().is_none_or(|prev| prev.sensors != obs.sensors) {
            out.push(*obs);
        }
    }
    out
}

/// Indices where a maximal run of label `A` begins.
pub fn a_run_onsets(labels: &[PositionLabel]) -> Vec<usize> {
    labels
        .iter()
        .enumerate()
        .filter(|&(i, &l)| l == PositionLabel::A && (i == 0 || labels[i - 1] != PositionLabel::A))
        .map(|(i, _)| i)
        .collect()
}

/// Cuts the trace at A-run onsets. Samples before the first onset and after
/// the last one belong to no cycle.
pub fn segment_cycles(trace: &LabeledTrace) -> Vec<Cycle> {
    let onsets = a_run_onsets(&trace.labels());
    onsets
        .windows(2)
        .map(|w| Cycle {
            start_index: w[0],
            end_index: w[1],
            samples: trace.samples[w[0]..w[1]].to_vec(),
        })
        .collect()
}

/// Ordered split: the first `floor(fraction * n)` cycles train, the rest test.
pub fn split_train_test(cycles: &[Cycle], train_fraction: f64) -> Result<(Vec<Cycle>, Vec<Cycle>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Split(format!(
            "train fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    let n = cycles.len();
    if n < 2 {
        return Err(Error::Split(format!("need ≥2 cycles to split, got {n}")));
    }
    let n_train = (train_fraction * n as f64).floor() as usize;
    if n_train == 0 || n_train == n {
        return Err(Error::Split(format!(
            "fraction {train_fraction} of {n} cycles leaves one side empty"
        )));
    }
    Ok((cycles[..n_train].to_vec(), cycles[n_train..].to_vec()))
}

/// Contents of a trace file, which may or may not carry labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TraceFile {
    Labeled(LabeledTrace),
    Unlabeled {
        sampling_period_ms: u32,
        sensors: Vec<SensorVector>,
    },
}

impl TraceFile {
    pub fn sensors(&self) -> Vec<SensorVector> {
        match self {
            TraceFile::Labeled(t) => t.sensors(),
            TraceFile::Unlabeled { sensors, .. } => sensors.clone(),
        }
    }

    pub fn sampling_period_ms(&self) -> u32 {
        match self {
            TraceFile::Labeled(t) => t.sampling_period_ms,
            TraceFile::Unlabeled {
                sampling_period_ms, ..
            } => *sampling_period_ms,
        }
    }
}

pub fn parse_trace(text: &str) -> Result<TraceFile> {
    let mut period = None;
    let mut rows: Vec<(SensorVector, Option<PositionLabel>)> = Vec::new();
    let mut labeled: Option<bool> = None;

    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(header) = line.strip_prefix('#') {
            if let Some(value) = header.trim().strip_prefix("sampling_period_ms=") {
                let p: u32 = value.trim().parse().map_err(|_| Error::Parse {
                    line: line_no,
                    message: format!("bad sampling period {value:?}"),
                })?;
                if p == 0 {
                    return Err(Error::Parse {
                        line: line_no,
                        message: "sampling period must be positive".into(),
                    });
                }
                period = Some(p);
            }
            continue;
        }

        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != SENSOR_COUNT + 1 {
            return Err(Error::Parse {
                line: line_no,
                message: format!(
                    "expected {SENSOR_COUNT} sensor columns and a label, got {} columns",
                    fields.len()
                ),
            });
        }
        let mut bits = [0u8; SENSOR_COUNT];
        for (j, f) in fields[..SENSOR_COUNT].iter().enumerate() {
            bits[j] = match *f {
                "0" => 0,
                "1" => 1,
                other => {
                    return Err(Error::Parse {
                        line: line_no,
                        message: format!("sensor {j} has non-binary value {other:?}"),
                    })
                }
            };
        }
        let sensors = SensorVector::from_bits(&bits)?;
        let token = fields[SENSOR_COUNT];
        let label = if token == "?" {
            None
        } else {
            Some(token.parse::<PositionLabel>().map_err(|_| Error::Parse {
                line: line_no,
                message: format!("unknown label {token:?}"),
            })?)
        };
        match labeled {
            None => labeled = Some(label.is_some()),
            Some(expected) if expected != label.is_some() => {
                return Err(Error::Parse {
                    line: line_no,
                    message: "mixes labeled and unlabeled rows".into(),
                })
            }
            _ => {}
        }
        rows.push((sensors, label));
    }

    let sampling_period_ms = period.unwrap_or(DEFAULT_SAMPLING_PERIOD_MS);
    if labeled.unwrap_or(true) {
        Ok(TraceFile::Labeled(LabeledTrace {
            sampling_period_ms,
            samples: rows
                .into_iter()
                .map(|(sensors, label)| Sample {
                    sensors,
                    label: label.expect("labeled rows"),
                })
                .collect(),
        }))
    } else {
        Ok(TraceFile::Unlabeled {
            sampling_period_ms,
            sensors: rows.into_iter().map(|(s, _)| s).collect(),
        })
    }
}

pub fn render_trace(
    sampling_period_ms: u32,
    rows: impl IntoIterator<Item = (SensorVector, Option<PositionLabel>)>,
) -> String {
    let mut out = format!("# sampling_period_ms={sampling_period_ms}\n");
    for (sensors, label) in rows {
        for b in sensors.bits() {
            out.push(if b == 1 { '1' } else { '0' });
            out.push(',');
        }
        out.push_str(label.map_or("?", PositionLabel::token));
        out.push('\n');
    }
    out
}

pub fn read_trace_file(path: impl AsRef<Path>) -> Result<TraceFile> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_trace(&text)
}

/// Reads a trace that must carry labels.
pub fn read_labeled_trace(path: impl AsRef<Path>) -> Result<LabeledTrace> {
    match read_trace_file(path.as_ref())? {
        TraceFile::Labeled(t) => Ok(t),
        TraceFile::Unlabeled { .. } => Err(Error::Validation(format!(
            "{} has no labels",
            path.as_ref().display()
        ))),
    }
}

pub fn write_trace_file(trace: &LabeledTrace, path: impl AsRef<Path>) -> Result<()> {
    let text = render_trace(
        trace.sampling_period_ms,
        trace.samples.iter().map(|s| (s.sensors, Some(s.label))),
    );
    write_text(path.as_ref(), &text)
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}
