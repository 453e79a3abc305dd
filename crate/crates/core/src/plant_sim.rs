//! Discrete-event model of the pneumatic conveyor.
//!
//! The plant steps through a fixed sequence of twenty states per revolution of
//! the block. Each state is held for a number of sampling periods (its dwell),
//! which is what makes a sampled PLC trace contain repeated readings.

use std::collections::{BTreeMap, HashMap};
use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::trace::{LabeledTrace, PositionLabel, Sample, SensorVector, DEFAULT_SAMPLING_PERIOD_MS};

const FIXTURE: &str = include_str!("../fixtures/conveyor_states_v1.toml");

pub const CANONICAL_STATE_COUNT: usize = 20;

/// Canonical ids of the states where the block rests at A, B, C and D.
pub const POSITION_STATE_IDS: [(u8, PositionLabel); 4] = [
    (1, PositionLabel::A),
    (9, PositionLabel::B),
    (13, PositionLabel::C),
    (17, PositionLabel::D),
];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PlantState {
    pub id: u8,
    pub description: String,
    pub sensors: SensorVector,
    pub label: PositionLabel,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FixtureFile {
    version: u32,
    state: Vec<FixtureState>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FixtureState {
    id: u8,
    description: String,
    sensors: SensorVector,
    label: PositionLabel,
}

fn parse_fixture(text: &str) -> Result<Vec<PlantState>> {
    let file: FixtureFile = toml::from_str(text).map_err(|e| Error::Fixture(e.to_string()))?;
    if file.version != 1 {
        return Err(Error::Fixture(format!(
            "unsupported version {}",
            file.version
        )));
    }
    let states: Vec<PlantState> = file
        .state
        .into_iter()
        .map(|s| PlantState {
            id: s.id,
            description: s.description,
            sensors: s.sensors,
            label: s.label,
        })
        .collect();
    for (i, s) in states.iter().enumerate() {
        if s.id as usize != i + 1 {
            return Err(Error::Fixture(format!(
                "state ids out of order at {}",
                s.id
            )));
        }
    }
    Ok(states)
}

/// The twenty states of one normal revolution, in operating order.
pub fn canonical_cycle() -> &'static [PlantState] {
    static STATES: OnceLock<Vec<PlantState>> = OnceLock::new();
    STATES.get_or_init(|| parse_fixture(FIXTURE).expect("bundled fixture is valid"))
}

/// Sensor readings of the four block positions.
pub fn position_map() -> HashMap<SensorVector, PositionLabel> {
    let states = canonical_cycle();
    POSITION_STATE_IDS
        .iter()
        .map(|&(id, label)| (states[id as usize - 1].sensors, label))
        .collect()
}

/// Number of samples the plant stays in each canonical state.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DwellProfile {
    dwell: BTreeMap<u8, u32>,
}

impl DwellProfile {
    pub fn uniform(samples: u32) -> Result<Self> {
        if samples == 0 {
            return Err(Error::Config("dwell must be at least one sample".into()));
        }
        Ok(DwellProfile {
            dwell: (1..=CANONICAL_STATE_COUNT as u8)
                .map(|id| (id, samples))
                .collect(),
        })
    }

    pub fn from_map(dwell: BTreeMap<u8, u32>) -> Result<Self> {
        for id in 1..=CANONICAL_STATE_COUNT as u8 {
            match dwell.get(&id) {
                None => return Err(Error::Config(format!("no dwell for state {id}"))),
                Some(0) => return Err(Error::Config(format!("dwell for state {id} is zero"))),
                _ => {}
            }
        }
        if dwell.len() != CANONICAL_STATE_COUNT {
            return Err(Error::Config("dwell profile names unknown states".into()));
        }
        Ok(DwellProfile { dwell })
    }

    pub fn get(&self, id: u8) -> u32 {
        self.dwell[&id]
    }

    pub fn cycle_length(&self) -> u32 {
        self.dwell.values().sum()
    }
}

impl Default for DwellProfile {
    /// The plant idles two samples at each corner and passes every other state
    /// within one sampling period: 24 samples per revolution.
    fn default() -> Self {
        let mut dwell: BTreeMap<u8, u32> = (1..=CANONICAL_STATE_COUNT as u8)
            .map(|id| (id, 1))
            .collect();
        for (id, _) in POSITION_STATE_IDS {
            dwell.insert(id, 2);
        }
        DwellProfile { dwell }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct NoiseModel {
    pub bit_flip_prob: f64,
    /// Dwell counts vary uniformly by up to this many samples, never below one.
    pub dwell_jitter: u32,
}

impl NoiseModel {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.bit_flip_prob) {
            return Err(Error::Config(format!(
                "bit flip probability must lie in [0, 1), got {}",
                self.bit_flip_prob
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimConfig {
    pub cycles: u32,
    pub dwell: DwellProfile,
    pub noise: NoiseModel,
    pub seed: u64,
    /// Append the block's return to A after the last revolution so the final
    /// pass is a complete, segmentable cycle.
    pub terminal_start: bool,
    pub sampling_period_ms: u32,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            cycles: 51,
            dwell: DwellProfile::default(),
            noise: NoiseModel::default(),
            seed: 0,
            terminal_start: true,
            sampling_period_ms: DEFAULT_SAMPLING_PERIOD_MS,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.cycles == 0 {
            return Err(Error::Config("cycles must be at least 1".into()));
        }
        if self.sampling_period_ms == 0 {
            return Err(Error::Config("sampling period must be positive".into()));
        }
        self.noise.validate()
    }
}

struct Emitter<'a> {
    rng: ChaCha8Rng,
    noise: NoiseModel,
    samples: &'a mut Vec<Sample>,
}

impl Emitter<'_> {
    fn emit(&mut self, state: &PlantState, dwell: u32) {
        let jitter = self.noise.dwell_jitter as i64;
        let count = if jitter > 0 {
            (dwell as i64 + self.rng.random_range(-jitter..=jitter)).max(1) as u32
        } else {
            dwell
        };
        for _ in 0..count {
            let mut sensors = state.sensors;
            if self.noise.bit_flip_prob > 0.0 {
                for bit in 0..crate::trace::SENSOR_COUNT {
                    if self.rng.random_bool(self.noise.bit_flip_prob) {
                        sensors = sensors.with_flipped(bit);
                    }
                }
            }
            self.samples.push(Sample {
                sensors,
                label: state.label,
            });
        }
    }
}

/// Runs the plant for `config.cycles` revolutions and samples every period.
pub fn simulate(config: &SimConfig) -> Result<LabeledTrace> {
    config.validate()?;
    let states = canonical_cycle();
    let mut samples =
        Vec::with_capacity((config.dwell.cycle_length() * config.cycles) as usize + 4);
    let mut emitter = Emitter {
        rng: ChaCha8Rng::seed_from_u64(config.seed),
        noise: config.noise,
        samples: &mut samples,
    };
    for _ in 0..config.cycles {
        for state in states {
            emitter.emit(state, config.dwell.get(state.id));
        }
    }
    if config.terminal_start {
        emitter.emit(&states[0], config.dwell.get(states[0].id));
    }
    Ok(LabeledTrace {
        sampling_period_ms: config.sampling_period_ms,
        samples,
    })
}
