//! Game spec files (TOML or JSON).
//!
//! ```toml
//! [grid]
//! t0 = 0.0
//! horizon = 1.0
//! steps = 100
//!
//! [dynamics]
//! control_dims = [1, 1]
//! a = [[0.0, 1.0], [0.0, 0.0]]     # constant, or an array of steps+1 samples
//! b = [[1.0, 0.0], [0.0, 1.0]]
//! sigma = [[0.3, 0.0], [0.0, 0.3]]
//! state_blocks = [1, 1]            # optional: distributed policy class
//!
//! [agents.1.cost]
//! q = [[1.0, 0.0], [0.0, 1.0]]
//! r = [[1.0, 0.0], [0.0, 1.0]]
//! g = [[1.0, 0.0], [0.0, 1.0]]
//!
//! [policy]                         # optional, per-agent gains
//! gains = [[[0.0, 0.0]], [[0.0, 0.0]]]
//!
//! [initial]                        # optional: x0 or moment
//! t0 = 0.0
//! x0 = [1.0, 0.0]
//! ```
//!
//! A distributed quadratic game replaces `[dynamics]` and `[agents]` by a
//! `[distributed]` section with `state_dim`, `control_dim`, `q_bar`,
//! `r_bar`, `g_bar`, `gamma`, `kappa`, `eta` and per-agent tables
//! `[distributed.agents.i]` holding `q`, `r`, `g`, `a`, `b`, `sigma`.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde_json::{Map, Number, Value};

use crate::error::{Error, Result};
use crate::game::{
    lift_distributed, AgentCost, AgentDynamics, DistributedAgentCost, DistributedQuadraticSpec,
    LqGameSpec, PolicyClass, PolicyProfile,
};
use crate::grid::{MatrixSeries, ScalarSeries, TimeGrid};
use crate::ode::InitialState;

/// Distributed section of a game file.
#[derive(Debug, Clone, PartialEq)]
pub struct DistributedGame {
    pub costs: DistributedQuadraticSpec,
    pub dynamics: Vec<AgentDynamics>,
}

/// Parsed game file. For distributed games `spec` is the lifted joint game.
#[derive(Debug, Clone, PartialEq)]
pub struct GameFile {
    pub spec: LqGameSpec,
    pub distributed: Option<DistributedGame>,
    pub policy: Option<PolicyProfile>,
    pub initial: Option<InitialState>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Toml,
    Json,
}

impl Format {
    /// JSON for `.json` files, TOML otherwise.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("json") => Self::Json,
            _ => Self::Toml,
        }
    }
}

fn perr(field: &str, message: impl Into<String>) -> Error {
    Error::Parse {
        field: field.to_string(),
        message: message.into(),
    }
}

/// Read a game file, returning it with the raw bytes (for hashing).
pub fn load_game(path: &Path) -> Result<(GameFile, Vec<u8>)> {
    let bytes = std::fs::read(path)?;
    let text = String::from_utf8(bytes.clone()).map_err(|_| perr("file", "not valid UTF-8"))?;
    Ok((parse_game(&text, Format::from_path(path))?, bytes))
}

pub fn parse_game(text: &str, format: Format) -> Result<GameFile> {
    let root: Value = match format {
        Format::Toml => {
            let t: toml::Table = toml::from_str(text).map_err(|e| perr("toml", e.to_string()))?;
            serde_json::to_value(t).map_err(|e| perr("toml", e.to_string()))?
        }
        Format::Json => serde_json::from_str(text).map_err(|e| {
            perr("json", format!("{e}"))
        })?,
    };
    from_value(&root)
}

// --- reading ----------------------------------------------------------------------

struct Obj<'a> {
    path: String,
    map: &'a Map<String, Value>,
}

impl<'a> Obj<'a> {
    fn new(v: &'a Value, path: &str) -> Result<Self> {
        v.as_object()
            .map(|map| Self {
                path: path.to_string(),
                map,
            })
            .ok_or_else(|| perr(path, "expected a table"))
    }

    fn field(&self, key: &str) -> String {
        if self.path.is_empty() {
            key.to_string()
        } else {
            format!("{}.{key}", self.path)
        }
    }

    fn get(&self, key: &str) -> Result<&'a Value> {
        self.map.get(key).ok_or_else(|| perr(&self.field(key), "missing"))
    }

    fn opt(&self, key: &str) -> Option<&'a Value> {
        self.map.get(key)
    }

    fn only(&self, allowed: &[&str]) -> Result<()> {
        for k in self.map.keys() {
            if !allowed.contains(&k.as_str()) {
                return Err(perr(&self.field(k), "unknown field"));
            }
        }
        Ok(())
    }

    fn obj(&self, key: &str) -> Result<Obj<'a>> {
        Obj::new(self.get(key)?, &self.field(key))
    }

    fn f64(&self, key: &str) -> Result<f64> {
        num(self.get(key)?, &self.field(key))
    }

    fn usize(&self, key: &str) -> Result<usize> {
        let f = self.field(key);
        self.get(key)?
            .as_u64()
            .map(|v| v as usize)
            .ok_or_else(|| perr(&f, "expected a non-negative integer"))
    }

    fn usizes(&self, key: &str) -> Result<Vec<usize>> {
        let f = self.field(key);
        arr(self.get(key)?, &f)?
            .iter()
            .enumerate()
            .map(|(n, v)| {
                v.as_u64()
                    .map(|x| x as usize)
                    .ok_or_else(|| perr(&format!("{f}[{n}]"), "expected a non-negative integer"))
            })
            .collect()
    }

    fn matrix(&self, key: &str) -> Result<DMatrix<f64>> {
        matrix(self.get(key)?, &self.field(key))
    }

    fn series(&self, key: &str) -> Result<MatrixSeries> {
        series(self.get(key)?, &self.field(key))
    }

    fn scalar_series(&self, key: &str) -> Result<ScalarSeries> {
        let f = self.field(key);
        match self.get(key)? {
            Value::Array(a) => ScalarSeries::from_samples(
                a.iter()
                    .enumerate()
                    .map(|(n, v)| num(v, &format!("{f}[{n}]")))
                    .collect::<Result<_>>()?,
            )
            .map_err(|e| perr(&f, e.to_string())),
            v => Ok(ScalarSeries::constant(num(v, &f)?)),
        }
    }

    /// Sub-tables keyed by 1-based agent index, in index order.
    fn indexed(&self, key: &str) -> Result<Vec<Obj<'a>>> {
        let t = self.obj(key)?;
        let mut items: Vec<(usize, Obj)> = Vec::new();
        for (k, v) in t.map {
            let n: usize = k
                .parse()
                .ok()
                .filter(|n| *n >= 1)
                .ok_or_else(|| perr(&t.field(k), "agent keys must be 1, 2, ..."))?;
            items.push((n, Obj::new(v, &t.field(k))?));
        }
        items.sort_by_key(|(n, _)| *n);
        if items.iter().enumerate().any(|(p, (n, _))| *n != p + 1) {
            return Err(perr(&t.path, "agent keys must be consecutive from 1"));
        }
        Ok(items.into_iter().map(|(_, o)| o).collect())
    }
}

fn num(v: &Value, field: &str) -> Result<f64> {
    let x = v.as_f64().ok_or_else(|| perr(field, "expected a number"))?;
    if !x.is_finite() {
        return Err(perr(field, "must be finite"));
    }
    Ok(x)
}

fn arr<'a>(v: &'a Value, field: &str) -> Result<&'a Vec<Value>> {
    v.as_array().ok_or_else(|| perr(field, "expected an array"))
}

fn vector(v: &Value, field: &str) -> Result<DVector<f64>> {
    let a = arr(v, field)?;
    Ok(DVector::from_vec(
        a.iter()
            .enumerate()
            .map(|(n, x)| num(x, &format!("{field}[{n}]")))
            .collect::<Result<_>>()?,
    ))
}

/// Row-major nested arrays.
fn matrix(v: &Value, field: &str) -> Result<DMatrix<f64>> {
    let rows = arr(v, field)?;
    if rows.is_empty() {
        return Err(perr(field, "matrix has no rows"));
    }
    let data: Vec<DVector<f64>> = rows
        .iter()
        .enumerate()
        .map(|(r, row)| vector(row, &format!("{field}[{r}]")))
        .collect::<Result<_>>()?;
    let cols = data[0].len();
    if data.iter().any(|r| r.len() != cols) {
        return Err(perr(field, "rows have different lengths"));
    }
    Ok(DMatrix::from_fn(data.len(), cols, |r, c| data[r][c]))
}

/// A constant matrix or an array of node samples.
fn series(v: &Value, field: &str) -> Result<MatrixSeries> {
    let a = arr(v, field)?;
    let is_series = a
        .first()
        .and_then(|x| x.as_array())
        .and_then(|x| x.first())
        .is_some_and(|x| x.is_array());
    if is_series {
        let samples = a
            .iter()
            .enumerate()
            .map(|(m, s)| matrix(s, &format!("{field}[{m}]")))
            .collect::<Result<Vec<_>>>()?;
        MatrixSeries::from_samples(samples).map_err(|e| perr(field, e.to_string()))
    } else {
        Ok(MatrixSeries::constant(matrix(v, field)?))
    }
}

fn from_value(root: &Value) -> Result<GameFile> {
    let top = Obj::new(root, "")?;
    top.only(&["grid", "dynamics", "agents", "distributed", "policy", "initial"])?;
    let g = top.obj("grid")?;
    g.only(&["t0", "horizon", "steps"])?;
    let grid = TimeGrid::new(g.f64("t0")?, g.f64("horizon")?, g.usize("steps")?)
        .map_err(|e| perr("grid", e.to_string()))?;

    let (spec, distributed) = if let Some(d) = top.opt("distributed") {
        if top.opt("dynamics").is_some() || top.opt("agents").is_some() {
            return Err(perr("distributed", "cannot be combined with [dynamics] or [agents]"));
        }
        let d = Obj::new(d, "distributed")?;
        d.only(&["state_dim", "control_dim", "q_bar", "r_bar", "g_bar", "gamma", "kappa", "eta", "agents"])?;
        let mut costs = Vec::new();
        let mut dynamics = Vec::new();
        for a in d.indexed("agents")? {
            a.only(&["q", "r", "g", "a", "b", "sigma"])?;
            costs.push(DistributedAgentCost {
                q: a.series("q")?,
                r: a.series("r")?,
                g: a.matrix("g")?,
            });
            dynamics.push(AgentDynamics {
                a: a.series("a")?,
                b: a.series("b")?,
                sigma: a.matrix("sigma")?,
            });
        }
        let costs = DistributedQuadraticSpec {
            state_dim: d.usize("state_dim")?,
            control_dim: d.usize("control_dim")?,
            agents: costs,
            q_bar: d.series("q_bar")?,
            r_bar: d.series("r_bar")?,
            g_bar: d.matrix("g_bar")?,
            gamma: d.scalar_series("gamma")?,
            kappa: d.scalar_series("kappa")?,
            eta: d.f64("eta")?,
        };
        let spec = lift_distributed(&costs, &dynamics, grid)?;
        (spec, Some(DistributedGame { costs, dynamics }))
    } else {
        let dy = top.obj("dynamics")?;
        dy.only(&["control_dims", "a", "b", "sigma", "state_blocks"])?;
        let agents = top
            .indexed("agents")?
            .into_iter()
            .map(|a| {
                a.only(&["cost"])?;
                let c = a.obj("cost")?;
                c.only(&["q", "r", "g"])?;
                Ok(AgentCost {
                    q: c.series("q")?,
                    r: c.series("r")?,
                    g: c.matrix("g")?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let policy_class = match dy.opt("state_blocks") {
            Some(_) => PolicyClass::Distributed {
                state_blocks: dy.usizes("state_blocks")?,
            },
            None => PolicyClass::Full,
        };
        let spec = LqGameSpec {
            grid,
            control_dims: dy.usizes("control_dims")?,
            a: dy.series("a")?,
            b: dy.series("b")?,
            sigma: dy.matrix("sigma")?,
            agents,
            policy_class,
        };
        (spec, None)
    };
    spec.check()?;

    let policy = match top.opt("policy") {
        Some(p) => {
            let p = Obj::new(p, "policy")?;
            p.only(&["gains"])?;
            let gains = arr(p.get("gains")?, "policy.gains")?
                .iter()
                .enumerate()
                .map(|(i, v)| series(v, &format!("policy.gains[{i}]")))
                .collect::<Result<Vec<_>>>()?;
            let k = PolicyProfile::new(gains);
            k.check_against(&spec)
                .map_err(|e| perr("policy.gains", e.to_string()))?;
            Some(k)
        }
        None => None,
    };

    let initial = match top.opt("initial") {
        Some(v) => {
            let o = Obj::new(v, "initial")?;
            o.only(&["t0", "x0", "moment"])?;
            let t0 = match o.opt("t0") {
                Some(_) => o.f64("t0")?,
                None => grid.t0(),
            };
            let init = match (o.opt("x0"), o.opt("moment")) {
                (Some(x), None) => InitialState::Point {
                    t0,
                    x0: vector(x, "initial.x0")?,
                },
                (None, Some(_)) => InitialState::Moment {
                    t0,
                    m0: o.matrix("moment")?,
                },
                _ => return Err(perr("initial", "give exactly one of x0 and moment")),
            };
            if init.state_dim() != spec.state_dim() {
                return Err(perr("initial", "dimension does not match the state"));
            }
            Some(init)
        }
        None => None,
    };

    Ok(GameFile {
        spec,
        distributed,
        policy,
        initial,
    })
}

// --- writing ---------------------------------------------------------------------

fn fnum(x: f64) -> Value {
    Value::Number(Number::from_f64(x).expect("finite"))
}

fn mat_value(m: &DMatrix<f64>) -> Value {
    Value::Array(
        (0..m.nrows())
            .map(|r| Value::Array((0..m.ncols()).map(|c| fnum(m[(r, c)])).collect()))
            .collect(),
    )
}

fn series_value(s: &MatrixSeries) -> Value {
    if s.is_constant() {
        mat_value(s.node(0))
    } else {
        Value::Array(s.samples().iter().map(mat_value).collect())
    }
}

fn scalar_series_value(s: &ScalarSeries) -> Value {
    if s.is_constant() {
        fnum(s.node(0))
    } else {
        Value::Array(s.samples().iter().map(|x| fnum(*x)).collect())
    }
}

fn table(entries: Vec<(&str, Value)>) -> Value {
    Value::Object(entries.into_iter().map(|(k, v)| (k.to_string(), v)).collect())
}

fn uints(v: &[usize]) -> Value {
    Value::Array(v.iter().map(|x| Value::from(*x as u64)).collect())
}

fn to_value(f: &GameFile) -> Value {
    let s = &f.spec;
    let mut top = Map::new();
    top.insert(
        "grid".into(),
        table(vec![
            ("t0", fnum(s.grid.t0())),
            ("horizon", fnum(s.grid.horizon())),
            ("steps", Value::from(s.grid.steps() as u64)),
        ]),
    );
    if let Some(d) = &f.distributed {
        let c = &d.costs;
        let agents: Map<String, Value> = c
            .agents
            .iter()
            .zip(&d.dynamics)
            .enumerate()
            .map(|(i, (a, dy))| {
                (
                    (i + 1).to_string(),
                    table(vec![
                        ("q", series_value(&a.q)),
                        ("r", series_value(&a.r)),
                        ("g", mat_value(&a.g)),
                        ("a", series_value(&dy.a)),
                        ("b", series_value(&dy.b)),
                        ("sigma", mat_value(&dy.sigma)),
                    ]),
                )
            })
            .collect();
        top.insert(
            "distributed".into(),
            table(vec![
                ("state_dim", Value::from(c.state_dim as u64)),
                ("control_dim", Value::from(c.control_dim as u64)),
                ("q_bar", series_value(&c.q_bar)),
                ("r_bar", series_value(&c.r_bar)),
                ("g_bar", mat_value(&c.g_bar)),
                ("gamma", scalar_series_value(&c.gamma)),
                ("kappa", scalar_series_value(&c.kappa)),
                ("eta", fnum(c.eta)),
                ("agents", Value::Object(agents)),
            ]),
        );
    } else {
        let mut dy = vec![
            ("control_dims", uints(&s.control_dims)),
            ("a", series_value(&s.a)),
            ("b", series_value(&s.b)),
            ("sigma", mat_value(&s.sigma)),
        ];
        if let PolicyClass::Distributed { state_blocks } = &s.policy_class {
            dy.push(("state_blocks", uints(state_blocks)));
        }
        top.insert("dynamics".into(), table(dy));
        let agents: Map<String, Value> = s
            .agents
            .iter()
            .enumerate()
            .map(|(i, c)| {
                (
                    (i + 1).to_string(),
                    table(vec![(
                        "cost",
                        table(vec![
                            ("q", series_value(&c.q)),
                            ("r", series_value(&c.r)),
                            ("g", mat_value(&c.g)),
                        ]),
                    )]),
                )
            })
            .collect();
        top.insert("agents".into(), Value::Object(agents));
    }
    if let Some(k) = &f.policy {
        top.insert(
            "policy".into(),
            table(vec![("gains", Value::Array(k.gains.iter().map(series_value).collect()))]),
        );
    }
    if let Some(init) = &f.initial {
        let v = match init {
            InitialState::Point { t0, x0 } => table(vec![
                ("t0", fnum(*t0)),
                ("x0", Value::Array(x0.iter().map(|x| fnum(*x)).collect())),
            ]),
            InitialState::Moment { t0, m0 } => table(vec![("t0", fnum(*t0)), ("moment", mat_value(m0))]),
        };
        top.insert("initial".into(), v);
    }
    Value::Object(top)
}

pub fn to_toml_string(f: &GameFile) -> Result<String> {
    toml::to_string(&to_value(f)).map_err(|e| perr("toml", e.to_string()))
}

pub fn to_json_string(f: &GameFile) -> String {
    serde_json::to_string_pretty(&to_value(f)).expect("serialisable")
}
