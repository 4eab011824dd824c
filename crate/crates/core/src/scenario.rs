//! Scenario files: schema validation with JSON-pointer error paths, solver
//! knobs, and the provenance header stamped on every artifact.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::flow::FlowSettings;
use crate::game::{ControlGrid, DynamicsFamily, DynamicsSpec, Modulus};
use crate::measure::{Atom, DiscreteMeasure};
use crate::ot::DEFAULT_EXACT_THRESHOLD;
use crate::stability::{CylindricalFunctional, TauLadder};
use crate::torus::TorusPoint;

pub const FIXTURE_NAMES: [&str; 3] = ["separable_affine", "bilinear", "mean_field_attraction"];

/// Bundled worked fixture by name.
pub fn fixture(name: &str) -> Option<&'static str> {
    match name {
        "separable_affine" => Some(include_str!("../fixtures/separable_affine.json")),
        "bilinear" => Some(include_str!("../fixtures/bilinear.json")),
        "mean_field_attraction" => Some(include_str!("../fixtures/mean_field_attraction.json")),
        _ => None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Knobs {
    pub dt: f64,
    pub picard_tol: f64,
    pub max_iters: usize,
    pub exact_threshold: usize,
    pub ladder: TauLadder,
    pub n: usize,
    /// Direction bound for stability searches; defaults to `C_f`.
    pub c: f64,
    pub seed: u64,
}

impl Knobs {
    pub fn flow(&self) -> FlowSettings {
        FlowSettings {
            dt: self.dt,
            picard_tol: self.picard_tol,
            max_iters: self.max_iters,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    pub spec: DynamicsSpec,
    pub dynamics: DynamicsFamily,
    pub payoff: CylindricalFunctional,
    pub t0: f64,
    pub horizon: f64,
    pub initial: DiscreteMeasure,
    pub knobs: Knobs,
    /// SHA-256 of the canonical (key-sorted) scenario document.
    pub hash: String,
}

struct Walker<'a> {
    root: &'a Map<String, Value>,
}

fn err(pointer: &str, message: impl Into<String>) -> Error {
    Error::scenario(if pointer.is_empty() { "/" } else { pointer }, message)
}

fn number(v: &Value, pointer: &str) -> Result<f64> {
    v.as_f64().filter(|x| x.is_finite()).ok_or_else(|| err(pointer, "expected a finite number"))
}

fn integer(v: &Value, pointer: &str) -> Result<u64> {
    v.as_u64().ok_or_else(|| err(pointer, "expected a nonnegative integer"))
}

fn in_range(x: f64, lo: f64, hi: f64, pointer: &str) -> Result<f64> {
    if x > lo && x <= hi {
        Ok(x)
    } else {
        Err(err(pointer, format!("{x} outside ({lo}, {hi}]")))
    }
}

impl<'a> Walker<'a> {
    fn get(&self, key: &str) -> Result<&'a Value> {
        self.root.get(key).ok_or_else(|| err(&format!("/{key}"), "missing required field"))
    }

    fn opt(&self, key: &str) -> Option<&'a Value> {
        self.root.get(key)
    }
}

fn grid(v: &Value, pointer: &str, d: usize) -> Result<ControlGrid> {
    let arr = v.as_array().ok_or_else(|| err(pointer, "expected an array of controls"))?;
    if arr.is_empty() {
        return Err(err(pointer, "control grid must be nonempty"));
    }
    let mut out = Vec::with_capacity(arr.len());
    for (i, c) in arr.iter().enumerate() {
        let p = format!("{pointer}/{i}");
        let entry = match c {
            Value::Array(xs) => xs
                .iter()
                .enumerate()
                .map(|(k, x)| number(x, &format!("{p}/{k}")))
                .collect::<Result<Vec<f64>>>()?,
            _ => vec![number(c, &p)?],
        };
        if entry.len() != d {
            return Err(err(&p, format!("control has {} components, expected d = {d}", entry.len())));
        }
        out.push(entry);
    }
    Ok(ControlGrid(out))
}

/// `{family, params: {...}}` flattened into the internally tagged form.
fn tagged<T: for<'de> Deserialize<'de>>(v: &Value, pointer: &str) -> Result<T> {
    let obj = v.as_object().ok_or_else(|| err(pointer, "expected an object"))?;
    let family = obj
        .get("family")
        .and_then(Value::as_str)
        .ok_or_else(|| err(&format!("{pointer}/family"), "missing catalog family"))?;
    let mut flat = Map::new();
    flat.insert("family".into(), Value::String(family.into()));
    if let Some(params) = obj.get("params") {
        let params = params
            .as_object()
            .ok_or_else(|| err(&format!("{pointer}/params"), "expected an object"))?;
        for (k, x) in params {
            flat.insert(k.clone(), x.clone());
        }
    }
    serde_json::from_value(Value::Object(flat)).map_err(|e| {
        let msg = e.to_string();
        let at = if msg.contains("unknown variant") {
            format!("{pointer}/family")
        } else {
            format!("{pointer}/params")
        };
        err(&at, msg)
    })
}

impl Scenario {
    pub fn from_path(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn fixture(name: &str) -> Result<Self> {
        let text = fixture(name).ok_or_else(|| Error::structural(format!("no bundled fixture {name}")))?;
        Self::from_json(text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: Value = serde_json::from_str(text)?;
        let root = doc.as_object().ok_or_else(|| err("", "scenario must be a JSON object"))?;
        let w = Walker { root };

        let d = integer(w.get("d")?, "/d")? as usize;
        if !(1..=4).contains(&d) {
            return Err(err("/d", "d must be in 1..=4"));
        }
        let u_grid = grid(w.get("u_grid")?, "/u_grid", d)?;
        let v_grid = grid(w.get("v_grid")?, "/v_grid", d)?;
        let dynamics: DynamicsFamily = tagged(w.get("dynamics")?, "/dynamics")?;
        if let DynamicsFamily::SeparableAffine { drift, .. } = &dynamics {
            if !drift.is_empty() && drift.len() != d {
                return Err(err("/dynamics/params/drift", "drift must have d components"));
            }
        }
        let modulus: Modulus = tagged(w.get("modulus")?, "/modulus")?;
        if modulus.eval(0.0) != 0.0 || modulus.eval(1.0) < 0.0 {
            return Err(err("/modulus/params", "modulus must be nonnegative and vanish at zero"));
        }
        let lipschitz = number(w.get("L")?, "/L")?;
        if lipschitz < 1.0 {
            return Err(err("/L", "L must be at least 1"));
        }
        let speed = number(w.get("C_f")?, "/C_f")?;
        if speed <= 0.0 {
            return Err(err("/C_f", "C_f must be positive"));
        }

        let payoff: CylindricalFunctional = serde_json::from_value(w.get("payoff")?.clone()).map_err(|e| err("/payoff", e.to_string()))?;
        for (i, f) in payoff.features.iter().enumerate() {
            if f.wave.len() != d {
                return Err(err(&format!("/payoff/features/{i}/wave"), "wave vector must have d components"));
            }
        }
        payoff.validate().map_err(|e| err("/payoff", e.to_string()))?;

        let t0 = match w.opt("t0") {
            Some(v) => number(v, "/t0")?,
            None => 0.0,
        };
        let horizon = number(w.get("horizon")?, "/horizon")?;
        if horizon <= t0 {
            return Err(err("/horizon", "horizon must exceed t0"));
        }

        let init = w.get("initial")?.as_array().ok_or_else(|| err("/initial", "expected an array of atoms"))?;
        if init.is_empty() {
            return Err(err("/initial", "initial measure must have atoms"));
        }
        let mut atoms = Vec::with_capacity(init.len());
        for (i, a) in init.iter().enumerate() {
            let p = format!("/initial/{i}");
            let point = a
                .get("point")
                .and_then(Value::as_array)
                .ok_or_else(|| err(&format!("{p}/point"), "expected a coordinate array"))?;
            if point.len() != d {
                return Err(err(&format!("{p}/point"), format!("point has {} coordinates, expected {d}", point.len())));
            }
            let coords = point
                .iter()
                .enumerate()
                .map(|(k, x)| number(x, &format!("{p}/point/{k}")))
                .collect::<Result<Vec<f64>>>()?;
            let weight = number(a.get("weight").ok_or_else(|| err(&format!("{p}/weight"), "missing weight"))?, &format!("{p}/weight"))?;
            if weight <= 0.0 {
                return Err(err(&format!("{p}/weight"), "weight must be positive"));
            }
            atoms.push(Atom::state(TorusPoint::new(coords), weight));
        }
        let total: f64 = atoms.iter().map(|a| a.weight).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(err("/initial", format!("weights sum to {total}, expected 1")));
        }
        let initial = DiscreteMeasure::new(atoms).map_err(|e| err("/initial", e.to_string()))?;

        let knobs = parse_knobs(w.opt("knobs"), speed)?;
        let spec = DynamicsSpec::new(d, u_grid, v_grid, Arc::new(dynamics.clone()), lipschitz, modulus, speed)
            .map_err(|e| err("", e.to_string()))?;
        let name = match w.opt("name") {
            Some(v) => v.as_str().ok_or_else(|| err("/name", "expected a string"))?.to_string(),
            None => "scenario".into(),
        };
        let canonical = serde_json::to_string(&doc)?;
        let hash = format!("{:x}", Sha256::digest(canonical.as_bytes()));
        Ok(Scenario {
            name,
            spec,
            dynamics,
            payoff,
            t0,
            horizon,
            initial,
            knobs,
            hash,
        })
    }

    /// Provenance block: scenario hash and effective knobs.
    pub fn provenance(&self) -> Value {
        serde_json::json!({
            "scenario": self.name,
            "scenario_hash": self.hash,
            "knobs": self.knobs,
        })
    }

    /// `# provenance {...}` line for CSV artifacts.
    pub fn csv_header(&self) -> String {
        format!("# provenance {}\n", self.provenance())
    }

    /// Wrap a JSON artifact with the provenance block.
    pub fn stamp_json(&self, body: Value) -> Value {
        serde_json::json!({ "provenance": self.provenance(), "body": body })
    }
}

fn parse_knobs(v: Option<&Value>, speed: f64) -> Result<Knobs> {
    let empty = Map::new();
    let obj = match v {
        Some(v) => v.as_object().ok_or_else(|| err("/knobs", "expected an object"))?,
        None => &empty,
    };
    const KNOWN: [&str; 10] = ["dt", "picard_tol", "max_iters", "exact_threshold", "tau0", "levels", "tail", "n", "c", "seed"];
    if let Some(k) = obj.keys().find(|k| !KNOWN.contains(&k.as_str())) {
        return Err(err(&format!("/knobs/{k}"), "unknown knob"));
    }
    let num = |key: &str, default: f64| -> Result<f64> {
        obj.get(key).map(|v| number(v, &format!("/knobs/{key}"))).unwrap_or(Ok(default))
    };
    let int = |key: &str, default: u64| -> Result<u64> {
        obj.get(key).map(|v| integer(v, &format!("/knobs/{key}"))).unwrap_or(Ok(default))
    };
    let flow = FlowSettings::default();
    let ladder = TauLadder::default();
    let dt = in_range(num("dt", flow.dt)?, 0.0, 0.1, "/knobs/dt")?;
    let picard_tol = in_range(num("picard_tol", flow.picard_tol)?, 0.0, 1e-2, "/knobs/picard_tol")?;
    let max_iters = int("max_iters", flow.max_iters as u64)?;
    if !(1..=10_000).contains(&max_iters) {
        return Err(err("/knobs/max_iters", "max_iters must be in 1..=10000"));
    }
    let exact_threshold = int("exact_threshold", DEFAULT_EXACT_THRESHOLD as u64)?;
    if exact_threshold > 512 {
        return Err(err("/knobs/exact_threshold", "exact_threshold must be <= 512"));
    }
    let tau0 = in_range(num("tau0", ladder.tau0)?, 0.0, 1.0, "/knobs/tau0")?;
    let levels = int("levels", ladder.levels as u64)?;
    if !(1..=13).contains(&levels) {
        return Err(err("/knobs/levels", "levels must be in 1..=13"));
    }
    let tail = int("tail", ladder.tail as u64)?;
    if tail < 1 || tail > levels {
        return Err(err("/knobs/tail", "tail must be in 1..=levels"));
    }
    let n = int("n", 64)?;
    if !(1..=4096).contains(&n) {
        return Err(err("/knobs/n", "n must be in 1..=4096"));
    }
    let c = in_range(num("c", speed)?, 0.0, f64::MAX, "/knobs/c")?;
    Ok(Knobs {
        dt,
        picard_tol,
        max_iters: max_iters as usize,
        exact_threshold: exact_threshold as usize,
        ladder: TauLadder {
            tau0,
            levels: levels as usize,
            tail: tail as usize,
        },
        n: n as usize,
        c,
        seed: int("seed", 0)?,
    })
}
