//! Passive automaton learning from one cycle of observations.
//!
//! Repeated readings are collapsed first. Each remaining reading becomes a
//! state; readings found in the position map become the corner states, the
//! rest become fresh anonymous states. Learning stops once the block is seen
//! back at position A.

use std::collections::{BTreeMap, HashMap};

use thiserror::Error;

use crate::automaton::{Automaton, State, StateId, Transition};
use crate::trace::{dedup_consecutive, Observation, PositionLabel, SensorVector};

/// Known sensor readings of the block at each corner.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PositionMap {
    entries: HashMap<SensorVector, PositionLabel>,
}

impl PositionMap {
    pub fn new(entries: HashMap<SensorVector, PositionLabel>) -> crate::Result<Self> {
        if entries.len() > 4 {
            return Err(crate::Error::Config(format!(
                "position map has {} entries, at most 4 allowed",
                entries.len()
            )));
        }
        let mut seen = Vec::new();
        for &label in entries.values() {
            if !label.is_position() || seen.contains(&label) {
                return Err(crate::Error::Config(format!(
                    "position map label {label} is not a distinct corner"
                )));
            }
            seen.push(label);
        }
        Ok(PositionMap { entries })
    }

    /// The four corner readings of the built-in plant model.
    pub fn canonical() -> Self {
        PositionMap {
            entries: crate::plant_sim::position_map(),
        }
    }

    pub fn get(&self, sensors: SensorVector) -> Option<PositionLabel> {
        self.entries.get(&sensors).copied()
    }

    pub fn reading_of(&self, label: PositionLabel) -> Option<SensorVector> {
        self.entries
            .iter()
            .find(|(_, &l)| l == label)
            .map(|(&v, _)| v)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Error)]
pub enum OtalaError {
    #[error("cycle contains no observations")]
    EmptyCycle,
    /// The input ran out before position A came round again.
    #[error("incomplete cycle: position A never recurs ({} states learned)", partial.states().len())]
    IncompleteCycle { partial: Automaton },
}

pub fn is_position_state(obs: SensorVector, pmap: &PositionMap) -> Option<PositionLabel> {
    pmap.get(obs)
}

pub fn learn_otala(cycle: &[Observation], pmap: &PositionMap) -> Result<Automaton, OtalaError> {
    let deduped = dedup_consecutive(cycle);
    let Some(first) = deduped.first() else {
        return Err(OtalaError::EmptyCycle);
    };
    let home = pmap.reading_of(PositionLabel::A);

    // a corner reading that comes round again is an anonymous state
    let mut labeled: Vec<PositionLabel> = Vec::new();
    let mut label_once = |sensors: SensorVector| {
        let label = is_position_state(sensors, pmap).filter(|l| !labeled.contains(l))?;
        labeled.push(label);
        Some(label)
    };
    let mut states = vec![State {
        id: StateId(1),
        output: first.sensors,
        label: label_once(first.sensors),
    }];
    let mut transitions = Vec::new();
    let mut seen_home = Some(first.sensors) == home;
    let mut closed = false;

    for obs in &deduped[1..] {
        let from = states.last().expect("non-empty").id;
        if Some(obs.sensors) == home {
            if seen_home {
                transitions.push(Transition {
                    from,
                    to: StateId(1),
                });
                closed = true;
                break;
            }
            seen_home = true;
        }
        let id = StateId(states.len() + 1);
        states.push(State {
            id,
            output: obs.sensors,
            label: label_once(obs.sensors),
        });
        transitions.push(Transition { from, to: id });
    }

    let automaton = Automaton::new(states, StateId(1), transitions).expect("ids are sequential");
    if closed {
        Ok(automaton)
    } else {
        Err(OtalaError::IncompleteCycle { partial: automaton })
    }
}

/// Per-cycle OTALA results and the structure learned most often.
#[derive(Debug)]
pub struct OtalaRun {
    pub per_cycle: Vec<Result<Automaton, OtalaError>>,
    /// Index into `per_cycle` of the modal closed automaton (earliest on ties),
    /// or of the modal partial one when no cycle closed.
    pub best: usize,
}

impl OtalaRun {
    pub fn best_automaton(&self) -> &Automaton {
        match &self.per_cycle[self.best] {
            Ok(a) => a,
            Err(OtalaError::IncompleteCycle { partial }) => partial,
            Err(OtalaError::EmptyCycle) => unreachable!("best is never an empty cycle"),
        }
    }

    pub fn closed_count(&self) -> usize {
        self.per_cycle.iter().filter(|r| r.is_ok()).count()
    }
}

/// Learns one automaton per cycle. Returns `None` when every cycle is empty.
pub fn learn_all(cycles: &[Vec<Observation>], pmap: &PositionMap) -> Option<OtalaRun> {
    let per_cycle = crate::par::map(cycles, |c| learn_otala(c, pmap));

    let modal = |closed: bool| -> Option<usize> {
        let mut counts: BTreeMap<String, (usize, usize)> = BTreeMap::new();
        for (i, r) in per_cycle.iter().enumerate() {
            let a = match (r, closed) {
                (Ok(a), true) => a,
                (Err(OtalaError::IncompleteCycle { partial }), false) => partial,
                _ => continue,
            };
            counts.entry(a.to_json()).or_insert((0, i)).0 += 1;
        }
        counts
            .values()
            .max_by(|x, y| x.0.cmp(&y.0).then(y.1.cmp(&x.1)))
            .map(|&(_, i)| i)
    };
    let best = modal(true).or_else(|| modal(false))?;
    Some(OtalaRun { per_cycle, best })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plant_sim::{canonical_cycle, simulate, DwellProfile, SimConfig};
    use crate::trace::observations;
    use proptest::prelude::*;

    fn one_cycle(dwell: u32) -> Vec<Observation> {
        let cfg = SimConfig {
            cycles: 1,
            dwell: DwellProfile::uniform(dwell).unwrap(),
            ..SimConfig::default()
        };
        observations(simulate(&cfg).unwrap().sensors())
    }

    #[test]
    fn constant_input_is_incomplete_single_state() {
        let v = SensorVector::from_mask(3);
        match learn_otala(&observations([v, v, v]), &PositionMap::canonical()) {
            Err(OtalaError::IncompleteCycle { partial }) => {
                assert_eq!(partial.states().len(), 1);
                assert!(partial.transitions().is_empty());
                assert!(!partial.closed());
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn empty_input() {
        assert!(matches!(
            learn_otala(&[], &PositionMap::canonical()),
            Err(OtalaError::EmptyCycle)
        ));
    }

    #[test]
    fn canonical_cycle_learns_twenty_states() {
        let a = learn_otala(&one_cycle(1), &PositionMap::canonical()).unwrap();
        assert_eq!(a.states().len(), 20);
        assert_eq!(a.transitions().len(), 20);
        assert!(a.closed());
        assert!(a.is_deterministic());
        let outputs: Vec<_> = a.states().iter().map(|s| s.output).collect();
        let canonical: Vec<_> = canonical_cycle().iter().map(|s| s.sensors).collect();
        assert_eq!(outputs, canonical);
        assert_eq!(
            a.states()
                .iter()
                .filter_map(|s| s.label)
                .collect::<Vec<_>>(),
            PositionLabel::POSITIONS.to_vec()
        );
    }

    #[test]
    fn tripled_samples_learn_the_same_automaton() {
        let once = learn_otala(&one_cycle(1), &PositionMap::canonical()).unwrap();
        let thrice = learn_otala(&one_cycle(3), &PositionMap::canonical()).unwrap();
        assert_eq!(once, thrice);
    }

    #[test]
    fn input_after_closure_is_ignored() {
        let cfg = SimConfig {
            cycles: 3,
            dwell: DwellProfile::uniform(1).unwrap(),
            ..SimConfig::default()
        };
        let all = observations(simulate(&cfg).unwrap().sensors());
        let a = learn_otala(&all, &PositionMap::canonical()).unwrap();
        assert_eq!(
            a,
            learn_otala(&one_cycle(1), &PositionMap::canonical()).unwrap()
        );
    }

    #[test]
    fn position_lookup() {
        let pmap = PositionMap::canonical();
        let states = canonical_cycle();
        assert_eq!(
            is_position_state(states[0].sensors, &pmap),
            Some(PositionLabel::A)
        );
        assert_eq!(is_position_state(SensorVector::default(), &pmap), None);
        assert_eq!(
            is_position_state(states[16].sensors, &pmap),
            Some(PositionLabel::D)
        );
    }

    #[test]
    fn position_map_validation() {
        let v = SensorVector::from_mask;
        let dup = HashMap::from([(v(1), PositionLabel::A), (v(2), PositionLabel::A)]);
        assert!(PositionMap::new(dup).is_err());
        let transition = HashMap::from([(v(1), PositionLabel::Transition)]);
        assert!(PositionMap::new(transition).is_err());
        assert_eq!(PositionMap::canonical().len(), 4);
    }

    #[test]
    fn noise_adds_anonymous_states_instead_of_failing() {
        let mut obs = one_cycle(1);
        obs[5].sensors = obs[5].sensors.with_flipped(9);
        obs.insert(
            6,
            Observation {
                index: 6,
                sensors: canonical_cycle()[5].sensors,
            },
        );
        let a = learn_otala(&obs, &PositionMap::canonical()).unwrap();
        assert_eq!(a.states().len(), 21);
        assert!(a.closed());
    }

    #[test]
    fn learn_all_picks_modal_automaton() {
        let clean = one_cycle(1);
        let mut noisy = clean.clone();
        noisy[3].sensors = noisy[3].sensors.with_flipped(10);
        let cycles = vec![noisy, clean.clone(), clean.clone()];
        let run = learn_all(&cycles, &PositionMap::canonical()).unwrap();
        assert_eq!(run.best, 1);
        assert_eq!(run.closed_count(), 3);
        assert_eq!(run.best_automaton().states().len(), 20);
        assert!(learn_all(&[vec![]], &PositionMap::canonical()).is_none());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn duplication_invariance(reps in proptest::collection::vec(1usize..4, 21)) {
            let base = one_cycle(1);
            let stretched: Vec<SensorVector> = base
                .iter()
                .zip(&reps)
                .flat_map(|(o, &k)| std::iter::repeat_n(o.sensors, k))
                .collect();
            let pmap = PositionMap::canonical();
            let a = learn_otala(&base, &pmap).unwrap();
            let b = learn_otala(&observations(stretched), &pmap).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn state_count_follows_dedup(masks in proptest::collection::vec(0u16..6, 1..40)) {
            let pmap = PositionMap::canonical();
            let home = pmap.reading_of(PositionLabel::A).unwrap();
            // alphabet mixes home with a few arbitrary readings
            let obs = observations(masks.iter().map(|&m| if m == 0 { home } else { SensorVector::from_mask(m) }));
            let a = match learn_otala(&obs, &pmap) {
                Ok(a) => a,
                Err(OtalaError::IncompleteCycle { partial }) => partial,
                Err(e) => panic!("{e}"),
            };
            let deduped = dedup_consecutive(&obs);
            let expected = if a.closed() {
                // the closing reading is not a new state
                let homes: Vec<_> = deduped.iter().enumerate().filter(|(_, o)| o.sensors == home).map(|(i, _)| i).collect();
                homes[1]
            } else {
                deduped.len()
            };
            prop_assert_eq!(a.states().len(), expected);
            prop_assert!(a.is_deterministic());
            let mut labels: Vec<_> = a.states().iter().filter_map(|s| s.label).collect();
            let n = labels.len();
            labels.dedup();
            prop_assert!(n <= 4);
            prop_assert_eq!(labels.len(), n);
        }
    }
}
