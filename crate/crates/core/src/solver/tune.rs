//! Hyperparameter spaces, grid enumeration and seeded random search.

use std::collections::BTreeMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TuneError {
    #[error("search space has no dimensions")]
    EmptySpace,
    #[error("dimension {name:?}: {reason}")]
    BadDimension { name: String, reason: String },
    #[error("space file line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("{0}")]
    BadArgument(String),
}

pub type Result<T> = std::result::Result<T, TuneError>;

#[derive(Clone, Debug, PartialEq)]
pub enum Value {
    Float(f64),
    Int(i64),
    Str(String),
}

impl Value {
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Value::Float(v) => Some(*v),
            Value::Int(v) => Some(*v as f64),
            Value::Str(_) => None,
        }
    }

    pub fn as_i64(&self) -> Option<i64> {
        match self {
            Value::Int(v) => Some(*v),
            _ => None,
        }
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            Value::Str(s) => Some(s),
            _ => None,
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Float(v) => write!(f, "{v:?}"),
            Value::Int(v) => write!(f, "{v}"),
            Value::Str(s) => f.write_str(s),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum DimSpec {
    Unique(Vec<Value>),
    FloatRange { lo: f64, hi: f64, log: bool },
    IntRange { lo: i64, hi: i64, step: i64 },
}

impl DimSpec {
    fn check(&self, name: &str) -> Result<()> {
        let bad = |r: &str| {
            Err(TuneError::BadDimension {
                name: name.to_string(),
                reason: r.to_string(),
            })
        };
        match self {
            DimSpec::Unique(v) if v.is_empty() => bad("unique needs at least one value"),
            DimSpec::FloatRange { lo, hi, .. } if !(lo < hi) => bad("float_range needs lo < hi"),
            DimSpec::FloatRange { lo, log: true, .. } if *lo <= 0.0 => {
                bad("log float_range needs lo > 0")
            }
            DimSpec::IntRange { lo, hi, .. } if lo >= hi => bad("int_range needs lo < hi"),
            DimSpec::IntRange { step, .. } if *step <= 0 => bad("int_range step must be positive"),
            _ => Ok(()),
        }
    }

    /// Values a grid visits, `n` points for float ranges.
    pub fn grid_values(&self, n: usize) -> Vec<Value> {
        match self {
            DimSpec::Unique(v) => v.clone(),
            DimSpec::IntRange { lo, hi, step } => (0..)
                .map(|k| lo + k * step)
                .take_while(|v| v <= hi)
                .map(Value::Int)
                .collect(),
            DimSpec::FloatRange { lo, hi, log } => (0..n)
                .map(|k| {
                    let t = k as f64 / (n - 1) as f64;
                    let v = if *log {
                        (lo.ln() + t * (hi.ln() - lo.ln())).exp()
                    } else {
                        lo + t * (hi - lo)
                    };
                    Value::Float(if k == n - 1 { *hi } else if k == 0 { *lo } else { v })
                })
                .collect(),
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> Value {
        match self {
            DimSpec::Unique(v) => v[rng.gen_range(0..v.len())].clone(),
            DimSpec::IntRange { lo, hi, step } => {
                let n = (hi - lo) / step;
                Value::Int(lo + step * rng.gen_range(0..=n))
            }
            DimSpec::FloatRange { lo, hi, log: false } => Value::Float(rng.gen_range(*lo..*hi)),
            DimSpec::FloatRange { lo, hi, log: true } => {
                Value::Float(rng.gen_range(lo.ln()..hi.ln()).exp().clamp(*lo, *hi))
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Category {
    Architecture,
    Training,
}

/// Named search dimensions, kept in lexicographic order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ArchSpace {
    dims: BTreeMap<String, (DimSpec, Category)>,
}

pub type Assignment = BTreeMap<String, Value>;

impl ArchSpace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(mut self, name: &str, spec: DimSpec, category: Category) -> Result<Self> {
        spec.check(name)?;
        self.dims.insert(name.to_string(), (spec, category));
        Ok(self)
    }

    pub fn unique(self, name: &str, values: Vec<Value>) -> Result<Self> {
        self.add(name, DimSpec::Unique(values), Category::Architecture)
    }

    pub fn float_range(self, name: &str, lo: f64, hi: f64, log: bool) -> Result<Self> {
        self.add(name, DimSpec::FloatRange { lo, hi, log }, Category::Training)
    }

    pub fn int_range(self, name: &str, lo: i64, hi: i64, step: i64) -> Result<Self> {
        self.add(name, DimSpec::IntRange { lo, hi, step }, Category::Architecture)
    }

    pub fn is_empty(&self) -> bool {
        self.dims.is_empty()
    }

    pub fn names(&self) -> Vec<&str> {
        self.dims.keys().map(String::as_str).collect()
    }

    pub fn dims(&self) -> impl Iterator<Item = (&str, &DimSpec, Category)> {
        self.dims.iter().map(|(k, (s, c))| (k.as_str(), s, *c))
    }

    /// Number of grid configurations for `n` points per float range.
    pub fn cardinality(&self, n: usize) -> usize {
        self.dims.values().map(|(s, _)| s.grid_values(n).len()).product()
    }
}

/// Cartesian product in lexicographic dimension order, the first name
/// varying slowest.
pub fn grid(space: &ArchSpace, n: usize) -> Result<Vec<Assignment>> {
    if space.is_empty() {
        return Err(TuneError::EmptySpace);
    }
    let has_float = space.dims.values().any(|(s, _)| matches!(s, DimSpec::FloatRange { .. }));
    if has_float && n < 2 {
        return Err(TuneError::BadArgument("float ranges need at least 2 grid points".into()));
    }
    let axes: Vec<(&String, Vec<Value>)> = space
        .dims
        .iter()
        .map(|(k, (s, _))| (k, s.grid_values(n)))
        .collect();
    let mut out = vec![Assignment::new()];
    for (name, values) in &axes {
        let mut next = Vec::with_capacity(out.len() * values.len());
        for base in &out {
            for v in values {
                let mut a = base.clone();
                a.insert((*name).clone(), v.clone());
                next.push(a);
            }
        }
        out = next;
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrialRecord {
    pub index: usize,
    pub config: Assignment,
    pub loss: Option<f64>,
    /// Failure message when the objective did not produce a loss.
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchReport {
    pub trials: Vec<TrialRecord>,
    pub best: Option<usize>,
}

impl SearchReport {
    pub fn best_trial(&self) -> Option<&TrialRecord> {
        self.best.map(|i| &self.trials[i])
    }

    /// Dimension columns in lexicographic order, then `loss`.
    pub fn to_csv(&self, space: &ArchSpace) -> String {
        let names = space.names();
        let mut s = names.join(",");
        s.push_str(",loss\n");
        for t in &self.trials {
            for n in &names {
                s.push_str(&t.config.get(*n).map(|v| v.to_string()).unwrap_or_default());
                s.push(',');
            }
            match t.loss {
                Some(l) => s.push_str(&format!("{l:.16e}")),
                None => s.push_str("failed"),
            }
            s.push('\n');
        }
        s
    }
}

/// Run `objective` on each configuration and keep the lowest loss. Errors
/// and non-finite losses are recorded as failed trials.
pub fn evaluate_all<F>(configs: Vec<Assignment>, mut objective: F) -> SearchReport
where
    F: FnMut(&Assignment) -> std::result::Result<f64, String>,
{
    let mut trials = Vec::with_capacity(configs.len());
    let mut best: Option<usize> = None;
    for (index, config) in configs.into_iter().enumerate() {
        let (loss, error) = match objective(&config) {
            Ok(l) if l.is_finite() => (Some(l), None),
            Ok(l) => (None, Some(format!("objective returned {l}"))),
            Err(e) => (None, Some(e)),
        };
        if let Some(l) = loss {
            if best.map_or(true, |b: usize| l < trials_loss(&trials, b)) {
                best = Some(index);
            }
        }
        trials.push(TrialRecord {
            index,
            config,
            loss,
            error,
        });
    }
    SearchReport { trials, best }
}

fn trials_loss(t: &[TrialRecord], i: usize) -> f64 {
    t[i].loss.unwrap_or(f64::INFINITY)
}

/// Configurations drawn independently per dimension from a seeded stream.
pub fn sample_configs(space: &ArchSpace, trials: usize, seed: u64) -> Result<Vec<Assignment>> {
    if space.is_empty() {
        return Err(TuneError::EmptySpace);
    }
    if trials == 0 {
        return Err(TuneError::BadArgument("at least one trial is required".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..trials)
        .map(|_| {
            space
                .dims
                .iter()
                .map(|(k, (s, _))| (k.clone(), s.sample(&mut rng)))
                .collect()
        })
        .collect())
}

pub fn random_search<F>(space: &ArchSpace, trials: usize, seed: u64, objective: F) -> Result<SearchReport>
where
    F: FnMut(&Assignment) -> std::result::Result<f64, String>,
{
    Ok(evaluate_all(sample_configs(space, trials, seed)?, objective))
}

/// Parse `name = unique(...) | float_range(lo, hi[, log]) | int_range(lo, hi[, step])`
/// lines. `[architecture]` and `[training]` headers set the category of the
/// lines that follow; `#` starts a comment.
pub fn parse_space(text: &str) -> Result<ArchSpace> {
    let mut space = ArchSpace::new();
    let mut category = Category::Architecture;
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let err = |r: String| TuneError::Parse {
            line: line_no,
            reason: r,
        };
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        match line {
            "[architecture]" => {
                category = Category::Architecture;
                continue;
            }
            "[training]" => {
                category = Category::Training;
                continue;
            }
            _ => {}
        }
        let (name, rhs) = line
            .split_once('=')
            .ok_or_else(|| err("expected `name = spec`".into()))?;
        let name = name.trim();
        if name.is_empty() {
            return Err(err("empty dimension name".into()));
        }
        let rhs = rhs.trim();
        let open = rhs.find('(').ok_or_else(|| err(format!("no argument list in {rhs:?}")))?;
        let args = rhs[open + 1..]
            .strip_suffix(')')
            .ok_or_else(|| err(format!("unclosed argument list in {rhs:?}")))?;
        let args: Vec<&str> = args.split(',').map(str::trim).filter(|a| !a.is_empty()).collect();
        let float = |s: &str| s.parse::<f64>().map_err(|_| err(format!("bad number {s:?}")));
        let int = |s: &str| s.parse::<i64>().map_err(|_| err(format!("bad integer {s:?}")));
        let spec = match rhs[..open].trim() {
            "unique" => DimSpec::Unique(args.iter().map(|a| parse_value(a)).collect()),
            "float_range" => match args.as_slice() {
                [lo, hi] => DimSpec::FloatRange {
                    lo: float(lo)?,
                    hi: float(hi)?,
                    log: false,
                },
                [lo, hi, flag] => DimSpec::FloatRange {
                    lo: float(lo)?,
                    hi: float(hi)?,
                    log: matches!(*flag, "log" | "log=true" | "true"),
                },
                _ => return Err(err("float_range takes (lo, hi[, log])".into())),
            },
            "int_range" => match args.as_slice() {
                [lo, hi] => DimSpec::IntRange {
                    lo: int(lo)?,
                    hi: int(hi)?,
                    step: 1,
                },
                [lo, hi, step] => DimSpec::IntRange {
                    lo: int(lo)?,
                    hi: int(hi)?,
                    step: int(step.trim_start_matches("step="))?,
                },
                _ => return Err(err("int_range takes (lo, hi[, step])".into())),
            },
            other => return Err(err(format!("unknown spec {other:?}"))),
        };
        space = space.add(name, spec, category).map_err(|e| err(e.to_string()))?;
    }
    if space.is_empty() {
        return Err(TuneError::EmptySpace);
    }
    Ok(space)
}

fn parse_value(s: &str) -> Value {
    if let Ok(i) = s.parse::<i64>() {
        Value::Int(i)
    } else if let Ok(f) = s.parse::<f64>() {
        Value::Float(f)
    } else {
        Value::Str(s.trim_matches(|c| c == '"' || c == '\'').to_string())
    }
}
