use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{spec_hash, CorpusSplit, Provenance};
use crate::context::{ContextSpec, ContextWindow, DataStateSpec, StateKind, StateValue};
use crate::error::{CatpError, Result};
use crate::sample::{DataSample, Point, Trajectory, WindowShape};
use crate::scalar::Scalar;

/// Heading rule of one motion pattern. Angles are radians per step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Motion {
    Straight,
    /// Heading turns by `turn` every step.
    Arc { turn: f64 },
    /// Heading alternates between `+turn` and `−turn` around the initial heading.
    Zigzag { turn: f64 },
}

impl Motion {
    /// Heading of step `j` (0-based) relative to the initial heading.
    fn heading(self, j: usize) -> f64 {
        match self {
            Self::Straight => 0.0,
            Self::Arc { turn } => turn * (j + 1) as f64,
            Self::Zigzag { turn } => {
                if j % 2 == 0 {
                    turn
                } else {
                    -turn
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatternDef {
    pub motion: Motion,
    pub speed_min: f64,
    /// Speed cap; every generated step is at most this long.
    pub speed_max: f64,
}

/// How the past trajectory is generated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum History {
    /// The past follows the same pattern as the future.
    Continue,
    /// The past is a straight lead-in along the initial heading, so the
    /// pattern is only recoverable from the context.
    #[default]
    Straight,
}

/// Maps the value of one context state to a pattern id.
///
/// Booleans and enumerated states map category `i` to pattern `i mod P`;
/// ranged and unlimited states are cut into `P` equal bins of their
/// normalised value. With probability `noise` a sample follows a uniformly
/// drawn pattern instead.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContextRule {
    pub selector: String,
    #[serde(default)]
    pub noise: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub patterns: Vec<PatternDef>,
    pub rule: ContextRule,
    pub schema: ContextSpec,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    /// Uniform heading jitter (radians) added to every step.
    #[serde(default)]
    pub heading_noise: f64,
    #[serde(default)]
    pub history: History,
    pub units: usize,
    pub lc: usize,
    pub lx: usize,
    pub ly: usize,
    pub dt: f64,
    pub max_step: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    /// Three patterns (straight, arc, zigzag) selected by a terrain state,
    /// with ranged, unlimited and boolean distractor states.
    pub fn three_patterns(seed: u64) -> Self {
        let schema = ContextSpec::new(vec![
            DataStateSpec::enumerated("terrain", &["grass", "sand", "rock"], None).expect("valid state"),
            DataStateSpec::ranged("health", 0.0, 100.0).expect("valid state"),
            DataStateSpec::unlimited("respawn", 30.0).expect("valid state"),
            DataStateSpec::boolean("daytime", "night", "day").expect("valid state"),
        ])
        .expect("valid schema");
        let pattern = |motion| PatternDef {
            motion,
            speed_min: 0.6,
            speed_max: 0.9,
        };
        Self {
            patterns: vec![
                pattern(Motion::Straight),
                pattern(Motion::Arc { turn: 0.25 }),
                pattern(Motion::Zigzag { turn: 0.9 }),
            ],
            rule: ContextRule {
                selector: "terrain".into(),
                noise: 0.0,
            },
            schema,
            train: 3000,
            val: 375,
            test: 375,
            heading_noise: 0.02,
            history: History::Straight,
            units: 1,
            lc: 5,
            lx: 30,
            ly: 10,
            dt: 1.0,
            max_step: 1.0,
            seed,
        }
    }

    pub fn shape(&self) -> WindowShape {
        WindowShape {
            lc: self.lc,
            lx: self.lx,
            ly: self.ly,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.schema.validate()?;
        if self.patterns.is_empty() {
            return Err(CatpError::config("synthetic corpus needs at least one pattern"));
        }
        if self.lc == 0 || self.lx < 2 || self.ly == 0 || self.units == 0 {
            return Err(CatpError::config("synthetic window lengths must be positive (LX ≥ 2)"));
        }
        if !(self.dt > 0.0 && self.max_step > 0.0) {
            return Err(CatpError::config("dt and max_step must be positive"));
        }
        if !(0.0..=1.0).contains(&self.rule.noise) {
            return Err(CatpError::config("context rule noise must be a probability"));
        }
        if self.heading_noise < 0.0 {
            return Err(CatpError::config("heading noise must be non-negative"));
        }
        for (i, p) in self.patterns.iter().enumerate() {
            if !(p.speed_max > 0.0) {
                return Err(CatpError::config(format!("pattern {i} has speed cap {}", p.speed_max)));
            }
            if !(p.speed_min > 0.0 && p.speed_min <= p.speed_max) {
                return Err(CatpError::config(format!("pattern {i} speed range is empty")));
            }
            if p.speed_max > self.max_step {
                return Err(CatpError::config(format!(
                    "pattern {i} speed cap {} exceeds max_step {}",
                    p.speed_max, self.max_step
                )));
            }
        }
        let selector = self.selector()?;
        let p = self.patterns.len();
        let reachable = match &selector.kind {
            StateKind::Boolean { .. } => 2,
            StateKind::Enumerated { categories, .. } => categories.len(),
            StateKind::Ranged { .. } | StateKind::Unlimited { .. } => p,
        };
        if reachable < p {
            return Err(CatpError::config(format!(
                "selector '{}' has {reachable} values but {p} patterns must be reachable",
                selector.name
            )));
        }
        Ok(())
    }

    fn selector(&self) -> Result<&DataStateSpec> {
        self.schema
            .states
            .iter()
            .find(|s| s.name == self.rule.selector)
            .ok_or_else(|| CatpError::config(format!("selector state '{}' is not in the schema", self.rule.selector)))
    }
}

/// Pattern id the context rule assigns to `value` of the selector state.
pub fn pattern_of(value: &StateValue, selector: &DataStateSpec, patterns: usize) -> Result<usize> {
    let bin = |x: f64| ((x * patterns as f64).floor() as usize).min(patterns - 1);
    Ok(match &selector.kind {
        StateKind::Boolean { .. } => crate::context::normalize_boolean(value, selector)? as usize % patterns,
        StateKind::Enumerated { .. } => crate::context::category_index(value, selector)?
            .ok_or_else(|| CatpError::invalid("selector category is unknown"))?
            % patterns,
        StateKind::Ranged { .. } | StateKind::Unlimited { .. } => {
            let StateValue::Number(v) = value else {
                return Err(CatpError::invalid("numeric selector expects a number"));
            };
            if matches!(selector.kind, StateKind::Ranged { .. }) {
                bin(crate::context::normalize_ranged(*v, selector)?)
            } else {
                bin(crate::context::normalize_unlimited(*v, selector)?)
            }
        }
    })
}

/// A selector value that the context rule maps to `pattern`.
fn selector_value(spec: &DataStateSpec, pattern: usize, patterns: usize, rng: &mut ChaCha8Rng) -> StateValue {
    let in_bin = |rng: &mut ChaCha8Rng| (pattern as f64 + rng.gen_range(0.0..1.0)) / patterns as f64;
    match &spec.kind {
        StateKind::Boolean { categories } => StateValue::category(categories[pattern].clone()),
        StateKind::Enumerated { categories, .. } => {
            let options: Vec<&String> = categories.iter().enumerate().filter(|(i, _)| i % patterns == pattern).map(|(_, c)| c).collect();
            StateValue::category((*options.choose(rng).expect("validated surjective")).clone())
        }
        StateKind::Ranged { min, max } => StateValue::Number(min + in_bin(rng) * (max - min)),
        StateKind::Unlimited { soft_max } => StateValue::Number(in_bin(rng).min(0.999).atanh() * soft_max),
    }
}

fn random_value(spec: &DataStateSpec, rng: &mut ChaCha8Rng) -> StateValue {
    match &spec.kind {
        StateKind::Boolean { categories } => StateValue::category(categories[rng.gen_range(0..2)].clone()),
        StateKind::Enumerated { categories, .. } => StateValue::category(categories[rng.gen_range(0..categories.len())].clone()),
        StateKind::Ranged { min, max } => StateValue::Number(rng.gen_range(*min..=*max)),
        StateKind::Unlimited { soft_max } => StateValue::Number(rng.gen_range(0.0..3.0 * soft_max)),
    }
}

fn walk(from: [f64; 2], headings: impl Iterator<Item = f64>, speed: f64) -> Vec<[f64; 2]> {
    let mut p = from;
    headings
        .map(|h| {
            p = [p[0] + speed * h.cos(), p[1] + speed * h.sin()];
            p
        })
        .collect()
}

fn points<T: Scalar>(raw: &[[f64; 2]]) -> Vec<Point<T>> {
    raw.iter().map(|p| [T::lit(p[0]), T::lit(p[1])]).collect()
}

fn generate_sample<T: Scalar>(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Result<DataSample<T>> {
    let p = spec.patterns.len();
    let selector = spec.selector()?;
    let assigned = rng.gen_range(0..p);
    let actual = if spec.rule.noise > 0.0 && rng.gen_bool(spec.rule.noise) {
        rng.gen_range(0..p)
    } else {
        assigned
    };
    let chosen = selector_value(selector, assigned, p, rng);
    let frames = (0..spec.lc)
        .map(|_| {
            spec.schema
                .states
                .iter()
                .map(|s| if s.name == selector.name { chosen.clone() } else { random_value(s, rng) })
                .collect()
        })
        .collect();

    let def = spec.patterns[actual];
    let speed = rng.gen_range(def.speed_min..=def.speed_max);
    let heading = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
    let origin = [rng.gen_range(-20.0..20.0), rng.gen_range(-20.0..20.0)];
    let jitter = spec.heading_noise;
    let jitters: Vec<f64> = (0..spec.lx + spec.ly)
        .map(|_| if jitter > 0.0 { rng.gen_range(-jitter..=jitter) } else { 0.0 })
        .collect();
    let all = match spec.history {
        History::Continue => walk(
            origin,
            (0..spec.lx + spec.ly).map(|j| heading + def.motion.heading(j) + jitters[j]),
            speed,
        ),
        History::Straight => {
            let lead = (0..spec.lx).map(|j| heading + jitters[j]);
            let future = (0..spec.ly).map(|j| heading + def.motion.heading(j) + jitters[spec.lx + j]);
            walk(origin, lead.chain(future), speed)
        }
    };
    let (past, future) = all.split_at(spec.lx);
    let mut trajectories = vec![Trajectory::new(points(past), spec.dt, "u0", 0.0)?];
    for u in 1..spec.units {
        let h = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
        let s = rng.gen_range(def.speed_min..=def.speed_max);
        let start = [origin[0] + rng.gen_range(-5.0..5.0), origin[1] + rng.gen_range(-5.0..5.0)];
        let other = walk(start, std::iter::repeat(h).take(spec.lx), s);
        trajectories.push(Trajectory::new(points(&other), spec.dt, format!("u{u}"), 0.0)?);
    }
    let target = Trajectory::new(points(future), spec.dt, "u0", spec.dt * spec.lx as f64)?;
    Ok(DataSample {
        context: ContextWindow { frames },
        past: trajectories,
        target,
        target_id: 0,
        pattern: Some(actual),
    })
}

/// Generates the corpus described by `spec`; deterministic in `spec.seed`.
pub fn generate_synthetic<T: Scalar>(spec: &SyntheticSpec) -> Result<CorpusSplit<T>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut gen = |n: usize| (0..n).map(|_| generate_sample(spec, &mut rng)).collect::<Result<Vec<_>>>();
    let train = gen(spec.train)?;
    let val = gen(spec.val)?;
    let test = gen(spec.test)?;
    let corpus = CorpusSplit {
        schema: spec.schema.clone(),
        shape: spec.shape(),
        max_step: spec.max_step,
        provenance: Provenance {
            source: "synthetic".into(),
            seed: spec.seed,
            spec_hash: spec_hash(spec)?,
            round_seed: None,
        },
        train,
        val,
        test,
    };
    corpus.validate()?;
    Ok(corpus)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> SyntheticSpec {
        let mut s = SyntheticSpec::three_patterns(seed);
        s.train = 40;
        s.val = 5;
        s.test = 5;
        s
    }

    fn step_lengths(s: &DataSample<f64>) -> Vec<f64> {
        let mut pts = s.past[0].points.clone();
        pts.extend(&s.target.points);
        pts.windows(2).map(|w| ((w[1][0] - w[0][0]).powi(2) + (w[1][1] - w[0][1]).powi(2)).sqrt()).collect()
    }

    #[test]
    fn deterministic_and_valid() {
        let a = generate_synthetic::<f64>(&small(3)).unwrap();
        let b = generate_synthetic::<f64>(&small(3)).unwrap();
        assert_eq!(a, b);
        assert_eq!((a.train.len(), a.val.len(), a.test.len()), (40, 5, 5));
        let c = generate_synthetic::<f64>(&small(4)).unwrap();
        assert_ne!(a.train, c.train);
        assert_ne!(a.provenance.spec_hash, c.provenance.spec_hash);
    }

    #[test]
    fn steps_respect_speed_cap() {
        let mut spec = small(1);
        spec.history = History::Continue;
        for s in generate_synthetic::<f64>(&spec).unwrap().train {
            assert!(step_lengths(&s).iter().all(|&d| d <= 0.9 + 1e-12 && d >= 0.6 - 1e-12));
        }
    }

    #[test]
    fn context_determines_pattern_without_noise() {
        let spec = small(2);
        let sel = spec.schema.index_of("terrain").unwrap();
        let corpus = generate_synthetic::<f64>(&spec).unwrap();
        for s in &corpus.train {
            let expected = pattern_of(&s.context.frames[0][sel], &spec.schema.states[sel], 3).unwrap();
            assert_eq!(s.pattern, Some(expected));
        }
        let seen: std::collections::BTreeSet<_> = corpus.train.iter().filter_map(|s| s.pattern).collect();
        assert_eq!(seen.len(), 3);
    }

    #[test]
    fn boolean_identity_rule_separates_two_populations() {
        let mut spec = small(5);
        spec.patterns.truncate(2);
        spec.rule.selector = "daytime".into();
        let sel = spec.schema.index_of("daytime").unwrap();
        for s in generate_synthetic::<f64>(&spec).unwrap().train {
            let day = s.context.frames[0][sel] == StateValue::category("day");
            assert_eq!(s.pattern, Some(usize::from(day)));
        }
    }

    #[test]
    fn single_pattern_corpus() {
        let mut spec = small(6);
        spec.patterns.truncate(1);
        assert!(generate_synthetic::<f64>(&spec).unwrap().train.iter().all(|s| s.pattern == Some(0)));
    }

    #[test]
    fn ranged_selector_bins() {
        let spec = DataStateSpec::ranged("x", 0.0, 30.0).unwrap();
        assert_eq!(pattern_of(&StateValue::Number(5.0), &spec, 3).unwrap(), 0);
        assert_eq!(pattern_of(&StateValue::Number(15.0), &spec, 3).unwrap(), 1);
        assert_eq!(pattern_of(&StateValue::Number(30.0), &spec, 3).unwrap(), 2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let un = DataStateSpec::unlimited("y", 10.0).unwrap();
        for p in 0..3 {
            for _ in 0..20 {
                let v = selector_value(&un, p, 3, &mut rng);
                assert_eq!(pattern_of(&v, &un, 3).unwrap(), p);
                let v = selector_value(&spec, p, 3, &mut rng);
                assert_eq!(pattern_of(&v, &spec, 3).unwrap(), p);
            }
        }
    }

    #[test]
    fn infeasible_specs_are_rejected() {
        let mut spec = small(0);
        spec.patterns[0].speed_max = 0.0;
        assert!(matches!(generate_synthetic::<f64>(&spec), Err(CatpError::Config(_))));
        let mut spec = small(0);
        spec.rule.selector = "daytime".into();
        assert!(generate_synthetic::<f64>(&spec).is_err());
        let mut spec = small(0);
        spec.patterns[1].speed_max = 1.5;
        assert!(generate_synthetic::<f64>(&spec).is_err());
    }
}
