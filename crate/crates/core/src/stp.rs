//! Semantic trajectory partition.
//!
//! `l` properties induce `2^l` specifications, one per truth assignment. Spec
//! indices encode negation: bit `i` is set iff property `i` appears negated,
//! so index 0 is the all-satisfied specification and, for two properties
//! `A, B`, the order is `A&B, !A&B, A&!B, !A&!B`.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SgdaError};
use crate::simenv::{
    extract_signals, EnvCondition, ScenarioGeometry, Trajectory, SIGNAL_BRAKE, SIGNAL_DISTANCE, SIGNAL_SPEED,
};
use crate::stl::{Formula, SignalTable};

pub const DEFAULT_MAX_PROPERTIES: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Property {
    pub name: String,
    pub formula: Formula,
    #[serde(default = "default_weight")]
    pub weight: f64,
}

fn default_weight() -> f64 {
    0.5
}

impl Property {
    pub fn new(name: impl Into<String>, formula: Formula) -> Self {
        Self { name: name.into(), formula, weight: default_weight() }
    }

    pub fn with_weight(mut self, weight: f64) -> Self {
        self.weight = weight;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Specification {
    pub index: usize,
    /// `signs[i]` is true when property `i` appears non-negated.
    pub signs: Vec<bool>,
}

impl Specification {
    pub fn from_index(index: usize, l: usize) -> Self {
        Self { index, signs: (0..l).map(|i| index >> i & 1 == 0).collect() }
    }

    /// Conjunction of each property or its negation.
    pub fn literal(&self, properties: &[Property]) -> Formula {
        Formula::And(
            properties
                .iter()
                .zip(&self.signs)
                .map(|(p, &s)| if s { p.formula.clone() } else { p.formula.clone().not() })
                .collect(),
        )
    }

    /// `T`/`F` per property in declaration order.
    pub fn pattern(&self) -> String {
        self.signs.iter().map(|&s| if s { 'T' } else { 'F' }).collect()
    }

    pub fn label(&self, properties: &[Property]) -> String {
        properties
            .iter()
            .zip(&self.signs)
            .map(|(p, &s)| if s { p.name.clone() } else { format!("!{}", p.name) })
            .collect::<Vec<_>>()
            .join(" & ")
    }

    /// Robustness of this specification given per-property robustness values.
    pub fn robustness(&self, property_robustness: &[f64]) -> f64 {
        self.signs
            .iter()
            .zip(property_robustness)
            .map(|(&s, &r)| if s { r } else { -r })
            .fold(f64::INFINITY, f64::min)
    }
}

pub const HALT_SPEED: f64 = 0.05;
pub const HARD_BRAKE: f64 = 0.4;

/// The driving properties: no collision, no halt, no hard brake, with the
/// given brake threshold.
pub fn driving_properties(brake_threshold: f64) -> Vec<Property> {
    vec![
        Property::new("no_collision", Formula::ge(SIGNAL_DISTANCE, 0.0).always()),
        Property::new("no_halt", Formula::ge(SIGNAL_SPEED, HALT_SPEED).always()),
        Property::new("no_hard_brake", Formula::le(SIGNAL_BRAKE, brake_threshold).always()),
    ]
}

/// Index of the specification matching a truth assignment.
pub fn spec_index(truth: &[bool]) -> usize {
    truth.iter().enumerate().fold(0, |acc, (i, &t)| if t { acc } else { acc | 1 << i })
}

/// A trajectory's standing with respect to every property.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub truth: Vec<bool>,
    pub robustness: Vec<f64>,
    pub spec: usize,
}

#[derive(Debug, Clone)]
pub struct Landed {
    pub env: EnvCondition,
    pub trajectory: Trajectory,
}

#[derive(Debug, Clone)]
pub struct Partition {
    properties: Vec<Property>,
    specs: Vec<Specification>,
    landed: Vec<Vec<Landed>>,
    attempts: Vec<u64>,
    spec_weights: Vec<f64>,
}

impl Partition {
    /// Enumerates all `2^l` specifications with zeroed statistics.
    pub fn build(properties: Vec<Property>, max_properties: usize) -> Result<Self> {
        let l = properties.len();
        if l == 0 || l > max_properties {
            return Err(SgdaError::config(format!("need between 1 and {max_properties} properties, got {l}")));
        }
        for p in &properties {
            if !(0.0..=1.0).contains(&p.weight) {
                return Err(SgdaError::config(format!("property `{}` weight {} outside [0, 1]", p.name, p.weight)));
            }
        }
        for (i, p) in properties.iter().enumerate() {
            if properties[..i].iter().any(|q| q.name == p.name) {
                return Err(SgdaError::config(format!("duplicate property name `{}`", p.name)));
            }
        }
        let n = 1usize << l;
        let specs: Vec<Specification> = (0..n).map(|j| Specification::from_index(j, l)).collect();
        let spec_weights = specs
            .iter()
            .map(|s| {
                properties
                    .iter()
                    .zip(&s.signs)
                    .map(|(p, &sign)| if sign { p.weight } else { 1.0 - p.weight })
                    .product()
            })
            .collect();
        Ok(Self { properties, specs, landed: vec![Vec::new(); n], attempts: vec![0; n], spec_weights })
    }

    pub fn properties(&self) -> &[Property] {
        &self.properties
    }

    pub fn specs(&self) -> &[Specification] {
        &self.specs
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn spec_weights(&self) -> &[f64] {
        &self.spec_weights
    }

    pub fn truth_vector(&self, signals: &SignalTable) -> Result<Vec<bool>> {
        self.properties.iter().map(|p| crate::stl::eval_bool(&p.formula, signals)).collect()
    }

    pub fn robustness_vector(&self, signals: &SignalTable) -> Result<Vec<f64>> {
        self.properties.iter().map(|p| crate::stl::eval_quant(&p.formula, signals)).collect()
    }

    pub fn classify_signals(&self, signals: &SignalTable) -> Result<usize> {
        Ok(spec_index(&self.truth_vector(signals)?))
    }

    pub fn evaluate_signals(&self, signals: &SignalTable) -> Result<Evaluation> {
        let truth = self.truth_vector(signals)?;
        let robustness = self.robustness_vector(signals)?;
        Ok(Evaluation { spec: spec_index(&truth), truth, robustness })
    }

    pub fn evaluate(&self, traj: &Trajectory, geom: &ScenarioGeometry) -> Result<Evaluation> {
        self.evaluate_signals(&extract_signals(traj, geom)?)
    }

    /// Side-effect-free classification.
    pub fn classify(&self, traj: &Trajectory, geom: &ScenarioGeometry) -> Result<usize> {
        self.classify_signals(&extract_signals(traj, geom)?)
    }

    /// Stores a classified pair in its specification's landed set.
    pub fn record(&mut self, spec: usize, env: EnvCondition, trajectory: Trajectory) {
        self.landed[spec].push(Landed { env, trajectory });
    }

    /// Classifies and records; returns the landed index.
    pub fn classify_and_record(&mut self, traj: Trajectory, geom: &ScenarioGeometry) -> Result<usize> {
        let spec = self.classify(&traj, geom)?;
        self.record(spec, traj.env, traj);
        Ok(spec)
    }

    pub fn landed(&self, spec: usize) -> &[Landed] {
        &self.landed[spec]
    }

    pub fn landed_counts(&self) -> Vec<usize> {
        self.landed.iter().map(Vec::len).collect()
    }

    pub fn total_landed(&self) -> usize {
        self.landed.iter().map(Vec::len).sum()
    }

    pub fn attempts(&self) -> &[u64] {
        &self.attempts
    }

    pub fn add_attempt(&mut self, spec: usize) {
        self.attempts[spec] += 1;
    }

    /// One row per specification: index, sign pattern, label, landed count,
    /// attempt count, weight.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["spec", "pattern", "label", "landed", "attempts", "weight"])?;
        for s in &self.specs {
            w.write_record([
                s.index.to_string(),
                s.pattern(),
                s.label(&self.properties),
                self.landed[s.index].len().to_string(),
                self.attempts[s.index].to_string(),
                format!("{:.12}", self.spec_weights[s.index]),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stl::eval_bool;

    fn ab() -> Vec<Property> {
        vec![
            Property::new("A", Formula::ge("x", 0.0).always()),
            Property::new("B", Formula::le("y", 1.0).always()),
        ]
    }

    fn table(x: &[f64], y: &[f64]) -> SignalTable {
        let times = (0..x.len()).map(|k| k as f64).collect();
        SignalTable::new(times).unwrap().with("x", x.to_vec()).unwrap().with("y", y.to_vec()).unwrap()
    }

    #[test]
    fn two_properties_give_four_specs_in_order() {
        let p = Partition::build(ab(), 8).unwrap();
        let labels: Vec<String> = p.specs().iter().map(|s| s.label(p.properties())).collect();
        assert_eq!(labels, ["A & B", "!A & B", "A & !B", "!A & !B"]);
        assert_eq!(p.landed_counts(), vec![0; 4]);
        assert_eq!(p.attempts(), &[0; 4]);
    }

    #[test]
    fn three_properties_give_eight_specs() {
        let props = vec![
            Property::new("a", Formula::ge("x", 0.0)),
            Property::new("b", Formula::ge("x", 1.0)),
            Property::new("c", Formula::ge("x", 2.0)),
        ];
        assert_eq!(Partition::build(props, 8).unwrap().len(), 8);
    }

    #[test]
    fn property_weights_multiply_into_spec_weights() {
        let props = vec![
            Property::new("A", Formula::ge("x", 0.0)).with_weight(0.1),
            Property::new("B", Formula::ge("y", 0.0)).with_weight(0.6),
        ];
        let p = Partition::build(props, 8).unwrap();
        let expected = [0.06, 0.54, 0.04, 0.36];
        for (w, e) in p.spec_weights().iter().zip(expected) {
            assert!((w - e).abs() < 1e-12, "{w} vs {e}");
        }
        assert!((p.spec_weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn property_count_is_capped() {
        assert!(Partition::build(vec![], 8).is_err());
        let many: Vec<Property> = (0..9).map(|i| Property::new(format!("p{i}"), Formula::ge("x", 0.0))).collect();
        assert!(Partition::build(many.clone(), 8).is_err());
        assert!(Partition::build(many[..8].to_vec(), 8).is_ok());
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let props = vec![Property::new("A", Formula::ge("x", 0.0)), Property::new("A", Formula::ge("y", 0.0))];
        assert!(Partition::build(props, 8).is_err());
    }

    #[test]
    fn violating_both_lands_in_last_spec() {
        let p = Partition::build(ab(), 8).unwrap();
        let sig = table(&[1.0, -2.0], &[0.5, 3.0]);
        assert_eq!(p.classify_signals(&sig).unwrap(), 3);
        let sig = table(&[1.0, 2.0], &[0.5, 0.0]);
        assert_eq!(p.classify_signals(&sig).unwrap(), 0);
    }

    #[test]
    fn classification_agrees_with_exhaustive_literal_check() {
        let p = Partition::build(ab(), 8).unwrap();
        for (x, y) in [(1.0, 0.0), (-1.0, 0.0), (1.0, 5.0), (-1.0, 5.0), (0.0, 1.0)] {
            let sig = table(&[x, x + 0.5], &[y, y - 0.25]);
            let satisfied: Vec<usize> = p
                .specs()
                .iter()
                .filter(|s| eval_bool(&s.literal(p.properties()), &sig).unwrap())
                .map(|s| s.index)
                .collect();
            assert_eq!(satisfied, vec![p.classify_signals(&sig).unwrap()]);
        }
    }

    #[test]
    fn spec_robustness_is_min_of_sign_adjusted_values() {
        let spec = Specification { index: 2, signs: vec![true, false, true] };
        assert_eq!(spec.robustness(&[3.2, -0.05, 0.1]), 0.05);
        let all = Specification::from_index(0, 3);
        assert_eq!(all.robustness(&[3.0, 0.5, 2.0]), 0.5);
    }

    #[test]
    fn csv_has_one_row_per_spec() {
        let mut p = Partition::build(ab(), 8).unwrap();
        p.add_attempt(1);
        let mut out = Vec::new();
        p.write_csv(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(text.lines().count(), 5);
        assert!(text.lines().nth(2).unwrap().starts_with("1,FT,!A & B,0,1,"));
    }
}
