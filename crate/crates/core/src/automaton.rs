//! Deterministic state-output automata.
//!
//! Each state emits one sensor vector. Transitions are unlabeled: the plant
//! visits its states in a fixed order, so the learned structure is a path that
//! may close back onto the initial state.

use std::collections::{BTreeSet, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trace::{PositionLabel, SensorVector};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StateId(pub usize);

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct State {
    pub id: StateId,
    pub output: SensorVector,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<PositionLabel>,
}

impl State {
    pub fn position(&self) -> Option<PositionLabel> {
        self.label.filter(|l| l.is_position())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Transition {
    pub from: StateId,
    pub to: StateId,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Automaton {
    states: Vec<State>,
    initial: StateId,
    transitions: Vec<Transition>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Document {
    schema_version: u32,
    initial: StateId,
    closed: bool,
    states: Vec<State>,
    transitions: Vec<Transition>,
}

impl Automaton {
    /// Checks ids are unique, endpoints exist and `initial` is a state.
    pub fn new(states: Vec<State>, initial: StateId, transitions: Vec<Transition>) -> Result<Self> {
        let ids: HashSet<StateId> = states.iter().map(|s| s.id).collect();
        if ids.len() != states.len() {
            return Err(Error::Document("duplicate state id".into()));
        }
        if !ids.contains(&initial) {
            return Err(Error::Document(format!(
                "initial state {} not declared",
                initial.0
            )));
        }
        for t in &transitions {
            if !ids.contains(&t.from) || !ids.contains(&t.to) {
                return Err(Error::Document(format!(
                    "transition {} -> {} references an undeclared state",
                    t.from.0, t.to.0
                )));
            }
        }
        Ok(Automaton {
            states,
            initial,
            transitions,
        })
    }

    pub fn states(&self) -> &[State] {
        &self.states
    }

    pub fn transitions(&self) -> &[Transition] {
        &self.transitions
    }

    pub fn initial(&self) -> StateId {
        self.initial
    }

    pub fn state(&self, id: StateId) -> Option<&State> {
        self.states.iter().find(|s| s.id == id)
    }

    /// True when some transition re-enters the initial state.
    pub fn closed(&self) -> bool {
        self.transitions.iter().any(|t| t.to == self.initial)
    }

    pub fn input_alphabet(&self) -> BTreeSet<SensorVector> {
        self.states.iter().map(|s| s.output).collect()
    }

    pub fn output_alphabet(&self) -> BTreeSet<SensorVector> {
        self.input_alphabet()
    }

    pub fn successors(&self, id: StateId) -> impl Iterator<Item = StateId> + '_ {
        self.transitions
            .iter()
            .filter(move |t| t.from == id)
            .map(|t| t.to)
    }

    pub fn out_degree(&self, id: StateId) -> usize {
        self.successors(id).count()
    }

    pub fn is_deterministic(&self) -> bool {
        self.states.iter().all(|s| self.out_degree(s.id) <= 1)
    }

    pub fn position_labels(&self) -> Vec<PositionLabel> {
        let set: BTreeSet<_> = self.states.iter().filter_map(State::position).collect();
        set.into_iter().collect()
    }

    pub fn without_transition(&self, t: Transition) -> Automaton {
        let mut out = self.clone();
        out.transitions.retain(|x| *x != t);
        out
    }

    pub fn to_json(&self) -> String {
        let doc = Document {
            schema_version: SCHEMA_VERSION,
            initial: self.initial,
            closed: self.closed(),
            states: self.states.clone(),
            transitions: self.transitions.clone(),
        };
        let mut s = serde_json::to_string_pretty(&doc).expect("automaton serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: Document = serde_json::from_str(text).map_err(|e| {
            Error::Document(format!("line {} column {}: {e}", e.line(), e.column()))
        })?;
        if doc.schema_version != SCHEMA_VERSION {
            return Err(Error::Document(format!(
                "unsupported schema_version {}",
                doc.schema_version
            )));
        }
        let a = Automaton::new(doc.states, doc.initial, doc.transitions)?;
        if a.closed() != doc.closed {
            return Err(Error::Document(format!(
                "closed = {} disagrees with the transitions",
                doc.closed
            )));
        }
        Ok(a)
    }

    pub fn to_dot(&self) -> String {
        let mut out =
            String::from("digraph automaton {\n    rankdir=LR;\n    node [shape=circle];\n");
        for s in &self.states {
            let mut label = s.id.0.to_string();
            if let Some(p) = s.position() {
                let _ = write!(label, " [{p}]");
            }
            let _ = write!(label, "\\n{}", s.output);
            let shape = if s.id == self.initial {
                ", shape=doublecircle"
            } else {
                ""
            };
            let _ = writeln!(out, "    s{} [label=\"{label}\"{shape}];", s.id.0);
        }
        for t in &self.transitions {
            let _ = writeln!(out, "    s{} -> s{};", t.from.0, t.to.0);
        }
        out.push_str("}\n");
        out
    }

    /// Follows the unique path from `initial`. Returns the visited states and
    /// whether the walk came back to `initial`.
    fn walk_from_initial(&self) -> (Vec<StateId>, bool) {
        let mut visited = vec![self.initial];
        let mut seen: HashSet<StateId> = HashSet::from([self.initial]);
        let mut current = self.initial;
        loop {
            let mut next = self.successors(current);
            let Some(to) = next.next() else {
                return (visited, false);
            };
            if next.next().is_some() {
                // branching structures have no single revolution
                return (visited, false);
            }
            if to == self.initial {
                return (visited, true);
            }
            if !seen.insert(to) {
                return (visited, false);
            }
            visited.push(to);
            current = to;
        }
    }

    /// Whether corner `from` reaches corner `to` through non-corner states only.
    fn has_position_transition(&self, from: PositionLabel, to: PositionLabel) -> bool {
        let starts = self.states.iter().filter(|s| s.position() == Some(from));
        for start in starts {
            let mut frontier = vec![start.id];
            let mut seen: HashSet<StateId> = HashSet::new();
            while let Some(id) = frontier.pop() {
                for next in self.successors(id) {
                    if !seen.insert(next) {
                        continue;
                    }
                    match self.state(next).and_then(State::position) {
                        Some(label) if label == to => return true,
                        Some(_) => {}
                        None => frontier.push(next),
                    }
                }
            }
        }
        false
    }

    /// Adjacent corner pairs (A→B, B→C, C→D, D→A) the automaton never connects.
    pub fn missing_position_transitions(&self) -> Vec<(PositionLabel, PositionLabel)> {
        PositionLabel::POSITIONS
            .iter()
            .filter_map(|&p| {
                let q = p.next_position()?;
                (!self.has_position_transition(p, q)).then_some((p, q))
            })
            .collect()
    }
}

/// Mints one state per run of equal (observation, label) pairs and chains
/// them. Stops at the first recurrence of the initial pair, which closes the
/// automaton.
pub fn build_from_predictions(
    observations: &[SensorVector],
    labels: &[PositionLabel],
) -> Result<Automaton> {
    if observations.len() != labels.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} observations but {} labels",
            observations.len(),
            labels.len()
        )));
    }
    if observations.is_empty() {
        return Err(Error::Validation(
            "cannot build an automaton from an empty sequence".into(),
        ));
    }
    let mut pairs = observations.iter().copied().zip(labels.iter().copied());
    let first = pairs.next().expect("non-empty");
    let mut states = vec![State {
        id: StateId(1),
        output: first.0,
        label: Some(first.1),
    }];
    let mut transitions = Vec::new();
    let mut prev = first;
    for pair in pairs {
        if pair == prev {
            continue;
        }
        let from = states.last().expect("non-empty").id;
        if pair == first {
            transitions.push(Transition {
                from,
                to: StateId(1),
            });
            break;
        }
        let id = StateId(states.len() + 1);
        states.push(State {
            id,
            output: pair.0,
            label: Some(pair.1),
        });
        transitions.push(Transition { from, to: id });
        prev = pair;
    }
    Automaton::new(states, StateId(1), transitions)
}

/// A full revolution from the initial state back to itself, passing the four
/// corners in conveying order.
pub fn check_cycle_closure(a: &Automaton) -> bool {
    let (path, returned) = a.walk_from_initial();
    if !returned {
        return false;
    }
    let corners: Vec<PositionLabel> = path
        .iter()
        .filter_map(|&id| a.state(id)?.position())
        .collect();
    if corners.len() != 4 {
        return false;
    }
    let order = PositionLabel::POSITIONS;
    let Some(offset) = order.iter().position(|&p| p == corners[0]) else {
        return false;
    };
    corners
        .iter()
        .enumerate()
        .all(|(i, &p)| p == order[(offset + i) % 4])
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub state_count_a: usize,
    pub state_count_b: usize,
    pub transition_count_a: usize,
    pub transition_count_b: usize,
    pub closed_a: bool,
    pub closed_b: bool,
    pub position_labels_present_a: Vec<PositionLabel>,
    pub position_labels_present_b: Vec<PositionLabel>,
    pub missing_position_transitions_a: Vec<(PositionLabel, PositionLabel)>,
    pub missing_position_transitions_b: Vec<(PositionLabel, PositionLabel)>,
}

impl ComparisonReport {
    pub fn swapped(&self) -> ComparisonReport {
        ComparisonReport {
            state_count_a: self.state_count_b,
            state_count_b: self.state_count_a,
            transition_count_a: self.transition_count_b,
            transition_count_b: self.transition_count_a,
            closed_a: self.closed_b,
            closed_b: self.closed_a,
            position_labels_present_a: self.position_labels_present_b.clone(),
            position_labels_present_b: self.position_labels_present_a.clone(),
            missing_position_transitions_a: self.missing_position_transitions_b.clone(),
            missing_position_transitions_b: self.missing_position_transitions_a.clone(),
        }
    }

    pub fn render(&self, name_a: &str, name_b: &str) -> String {
        fn labels(v: &[PositionLabel]) -> String {
            if v.is_empty() {
                return "-".into();
            }
            v.iter()
                .map(|l| l.to_string())
                .collect::<Vec<_>>()
                .join(",")
        }
        fn pairs(v: &[(PositionLabel, PositionLabel)]) -> String {
            if v.is_empty() {
                return "none".into();
            }
            v.iter()
                .map(|(a, b)| format!("{a}->{b}"))
                .collect::<Vec<_>>()
                .join(" ")
        }
        let w = name_a.len().max(name_b.len()).max(9);
        let mut out = String::new();
        let _ = writeln!(out, "{:<22} {:>w$} {:>w$}", "", name_a, name_b);
        let _ = writeln!(
            out,
            "{:<22} {:>w$} {:>w$}",
            "states", self.state_count_a, self.state_count_b
        );
        let _ = writeln!(
            out,
            "{:<22} {:>w$} {:>w$}",
            "transitions", self.transition_count_a, self.transition_count_b
        );
        let _ = writeln!(
            out,
            "{:<22} {:>w$} {:>w$}",
            "closed", self.closed_a, self.closed_b
        );
        let _ = writeln!(
            out,
            "{:<22} {:>w$} {:>w$}",
            "positions present",
            labels(&self.position_labels_present_a),
            labels(&self.position_labels_present_b)
        );
        let _ = writeln!(
            out,
            "missing transitions ({name_a}): {}",
            pairs(&self.missing_position_transitions_a)
        );
        let _ = writeln!(
            out,
            "missing transitions ({name_b}): {}",
            pairs(&self.missing_position_transitions_b)
        );
        out
    }
}

pub fn compare(a: &Automaton, b: &Automaton) -> ComparisonReport {
    ComparisonReport {
        state_count_a: a.states.len(),
        state_count_b: b.states.len(),
        transition_count_a: a.transitions.len(),
        transition_count_b: b.transitions.len(),
        closed_a: a.closed(),
        closed_b: b.closed(),
        position_labels_present_a: a.position_labels(),
        position_labels_present_b: b.position_labels(),
        missing_position_transitions_a: a.missing_position_transitions(),
        missing_position_transitions_b: b.missing_position_transitions(),
    }
}
