//! Signal temporal logic over whole finite traces.
//!
//! Formulas are evaluated pointwise over a shared time base. `G` and `F` are
//! the untimed future operators: at sample `t` they range over every sample
//! `t' >= t`. The value of a formula on a trace is its value at the first
//! sample.
//!
//! Boolean semantics use closed comparisons, so a robustness of exactly zero
//! counts as satisfied by an atom.

mod parse;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Result, SgdaError};

pub use parse::parse;

/// Named real-valued signals sampled on a common, strictly increasing time base.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SignalTable {
    times: Vec<f64>,
    columns: BTreeMap<String, Vec<f64>>,
}

impl SignalTable {
    pub fn new(times: Vec<f64>) -> Result<Self> {
        if times.is_empty() {
            return Err(SgdaError::input("signal table needs at least one sample"));
        }
        if times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(SgdaError::input("sample times must be strictly increasing"));
        }
        Ok(Self { times, columns: BTreeMap::new() })
    }

    pub fn insert(&mut self, name: impl Into<String>, values: Vec<f64>) -> Result<()> {
        let name = name.into();
        if values.len() != self.times.len() {
            return Err(SgdaError::input(format!(
                "signal `{name}` has {} samples, time base has {}",
                values.len(),
                self.times.len()
            )));
        }
        self.columns.insert(name, values);
        Ok(())
    }

    pub fn with(mut self, name: impl Into<String>, values: Vec<f64>) -> Result<Self> {
        self.insert(name, values)?;
        Ok(self)
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.columns.get(name).map(Vec::as_slice)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.columns.keys().map(String::as_str)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Comparator {
    /// `signal >= threshold`
    Ge,
    /// `signal <= threshold`
    Le,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Formula {
    Atom { signal: String, cmp: Comparator, threshold: f64 },
    Not(Box<Formula>),
    And(Vec<Formula>),
    Or(Vec<Formula>),
    Globally(Box<Formula>),
    Eventually(Box<Formula>),
}

impl Formula {
    pub fn ge(signal: impl Into<String>, threshold: f64) -> Self {
        Formula::Atom { signal: signal.into(), cmp: Comparator::Ge, threshold }
    }

    pub fn le(signal: impl Into<String>, threshold: f64) -> Self {
        Formula::Atom { signal: signal.into(), cmp: Comparator::Le, threshold }
    }

    #[allow(clippy::should_implement_trait)]
    pub fn not(self) -> Self {
        Formula::Not(Box::new(self))
    }

    pub fn always(self) -> Self {
        Formula::Globally(Box::new(self))
    }

    pub fn eventually(self) -> Self {
        Formula::Eventually(Box::new(self))
    }

    /// Signal names referenced by atoms, in first-occurrence order.
    pub fn signals(&self) -> Vec<&str> {
        let mut out = Vec::new();
        self.visit_atoms(&mut |s| {
            if !out.contains(&s) {
                out.push(s);
            }
        });
        out
    }

    fn visit_atoms<'a>(&'a self, f: &mut impl FnMut(&'a str)) {
        match self {
            Formula::Atom { signal, .. } => f(signal),
            Formula::Not(c) | Formula::Globally(c) | Formula::Eventually(c) => c.visit_atoms(f),
            Formula::And(cs) | Formula::Or(cs) => cs.iter().for_each(|c| c.visit_atoms(f)),
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            Formula::Atom { .. } => 0,
            Formula::Not(c) | Formula::Globally(c) | Formula::Eventually(c) => 1 + c.depth(),
            Formula::And(cs) | Formula::Or(cs) => 1 + cs.iter().map(Formula::depth).max().unwrap_or(0),
        }
    }

    /// Fails on the first atom whose signal is missing from `signals`.
    pub fn check_signals(&self, signals: &SignalTable) -> Result<()> {
        for name in self.signals() {
            if signals.get(name).is_none() {
                return Err(SgdaError::UnknownSignal(name.to_string()));
            }
        }
        Ok(())
    }

    /// Pointwise robustness at every sample.
    pub fn robustness_trace(&self, signals: &SignalTable) -> Result<Vec<f64>> {
        Ok(match self {
            Formula::Atom { signal, cmp, threshold } => {
                let s = signals.get(signal).ok_or_else(|| SgdaError::UnknownSignal(signal.clone()))?;
                match cmp {
                    Comparator::Ge => s.iter().map(|v| v - threshold).collect(),
                    Comparator::Le => s.iter().map(|v| threshold - v).collect(),
                }
            }
            Formula::Not(c) => c.robustness_trace(signals)?.into_iter().map(|v| -v).collect(),
            Formula::And(cs) => fold_children(cs, signals, f64::INFINITY, f64::min)?,
            Formula::Or(cs) => fold_children(cs, signals, f64::NEG_INFINITY, f64::max)?,
            Formula::Globally(c) => suffix_scan(c.robustness_trace(signals)?, f64::min),
            Formula::Eventually(c) => suffix_scan(c.robustness_trace(signals)?, f64::max),
        })
    }

    /// Pointwise Boolean satisfaction at every sample.
    pub fn satisfaction_trace(&self, signals: &SignalTable) -> Result<Vec<bool>> {
        Ok(match self {
            Formula::Atom { signal, cmp, threshold } => {
                let s = signals.get(signal).ok_or_else(|| SgdaError::UnknownSignal(signal.clone()))?;
                match cmp {
                    Comparator::Ge => s.iter().map(|v| v >= threshold).collect(),
                    Comparator::Le => s.iter().map(|v| v <= threshold).collect(),
                }
            }
            Formula::Not(c) => c.satisfaction_trace(signals)?.into_iter().map(|v| !v).collect(),
            Formula::And(cs) => fold_children_bool(cs, signals, true, |a, b| a && b)?,
            Formula::Or(cs) => fold_children_bool(cs, signals, false, |a, b| a || b)?,
            Formula::Globally(c) => suffix_scan(c.satisfaction_trace(signals)?, |a, b| a && b),
            Formula::Eventually(c) => suffix_scan(c.satisfaction_trace(signals)?, |a, b| a || b),
        })
    }
}

fn fold_children(
    children: &[Formula],
    signals: &SignalTable,
    init: f64,
    op: fn(f64, f64) -> f64,
) -> Result<Vec<f64>> {
    let mut acc = vec![init; signals.len()];
    for c in children {
        for (a, v) in acc.iter_mut().zip(c.robustness_trace(signals)?) {
            *a = op(*a, v);
        }
    }
    Ok(acc)
}

fn fold_children_bool(
    children: &[Formula],
    signals: &SignalTable,
    init: bool,
    op: fn(bool, bool) -> bool,
) -> Result<Vec<bool>> {
    let mut acc = vec![init; signals.len()];
    for c in children {
        for (a, v) in acc.iter_mut().zip(c.satisfaction_trace(signals)?) {
            *a = op(*a, v);
        }
    }
    Ok(acc)
}

fn suffix_scan<T: Copy>(mut values: Vec<T>, op: impl Fn(T, T) -> T) -> Vec<T> {
    for i in (0..values.len().saturating_sub(1)).rev() {
        values[i] = op(values[i], values[i + 1]);
    }
    values
}

/// Boolean satisfaction of `formula` on the whole trace.
pub fn eval_bool(formula: &Formula, signals: &SignalTable) -> Result<bool> {
    formula.check_signals(signals)?;
    Ok(formula.satisfaction_trace(signals)?[0])
}

/// Robustness of `formula` on the whole trace.
pub fn eval_quant(formula: &Formula, signals: &SignalTable) -> Result<f64> {
    formula.check_signals(signals)?;
    Ok(formula.robustness_trace(signals)?[0])
}

impl fmt::Display for Comparator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Comparator::Ge => ">=",
            Comparator::Le => "<=",
        })
    }
}

impl fmt::Display for Formula {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Formula::Atom { signal, cmp, threshold } => write!(f, "{signal} {cmp} {threshold:?}"),
            Formula::Not(c) => match **c {
                Formula::And(_) | Formula::Or(_) => write!(f, "!({c})"),
                _ => write!(f, "!{c}"),
            },
            Formula::And(cs) => write_joined(f, cs, " & ", |c| matches!(c, Formula::Or(_) | Formula::And(_))),
            Formula::Or(cs) => write_joined(f, cs, " | ", |c| matches!(c, Formula::Or(_))),
            Formula::Globally(c) => write!(f, "G({c})"),
            Formula::Eventually(c) => write!(f, "F({c})"),
        }
    }
}

fn write_joined(
    f: &mut fmt::Formatter<'_>,
    children: &[Formula],
    sep: &str,
    needs_parens: impl Fn(&Formula) -> bool,
) -> fmt::Result {
    if children.is_empty() {
        // an empty conjunction or disjunction has no text form
        return Err(fmt::Error);
    }
    for (i, c) in children.iter().enumerate() {
        if i > 0 {
            f.write_str(sep)?;
        }
        if needs_parens(c) {
            write!(f, "({c})")?;
        } else {
            write!(f, "{c}")?;
        }
    }
    Ok(())
}

impl FromStr for Formula {
    type Err = SgdaError;

    fn from_str(s: &str) -> Result<Self> {
        parse(s)
    }
}

impl Serialize for Formula {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Formula {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let text = String::deserialize(deserializer)?;
        parse(&text).map_err(serde::de::Error::custom)
    }
}
