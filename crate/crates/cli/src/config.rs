//! `key = value` run configuration. Blank lines and `#` comments are ignored;
//! unknown or repeated keys are errors.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use hbe::degradation::{MaskKind, NoiseModel};
use hbe::hdr::{CameraParams, SveLayout};
use hbe::solver::{InitMode, SolverConfig};
use hbe::{HbeError, Result};

#[derive(Debug, Clone, Copy)]
enum Kind {
    Float,
    Count,
    Seed,
    Bool,
    Mask,
    Noise,
    Init,
    Layout,
    FloatList,
    Text,
}

/// Every accepted key, its value type, its default and a short description.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("alpha_low", "preset (0.5 interpolation, 100 denoising)", "α_L used for well-observed, well-populated groups"),
    ("alpha_high", "preset (1 interpolation, 100 denoising)", "α_H used otherwise"),
    ("pm_threshold", "0.5", "fraction applied to P/n and M/m_nominal"),
    ("m_nominal", "30", "nominal group size for the κ/ν rule"),
    ("outer_iters", "preset (3 interpolation, 1 denoising)", "outer iterations"),
    ("inner_max_iters", "30", "alternating-minimization iteration cap"),
    ("inner_rel_tol", "1e-6", "relative objective change that stops the inner loop"),
    ("init_mode", "directional-gmm", "directional-gmm | smooth-fill"),
    ("patch_side", "8", "patch side length"),
    ("window_side", "25", "search window side length"),
    ("epsilon", "1.5", "similarity threshold factor"),
    ("step", "1", "anchor stride"),
    ("min_group", "2", "smallest group solved jointly"),
    ("unknown_weight", "0.01", "distance weight of pairs with a missing pixel"),
    ("mask", "none", "none | random:F | zoom:Z"),
    ("noise", "none", "none | const:V | affine:A,B"),
    ("seed", "0", "base seed for every random draw"),
    ("clip", "false", "clip observed values to [0, 255]"),
    ("camera_gain", "0.87", "camera gain α"),
    ("exposure_time", "0.005", "exposure time τ in seconds"),
    ("readout_mean", "2048", "readout mean μ_R"),
    ("readout_var", "30", "readout variance σ²_R"),
    ("saturation", "15000", "saturation level z_sat"),
    ("sve_levels", "1,8,64,512", "optical gain levels"),
    ("sve_layout", "nonregular", "regular | nonregular"),
    ("corpus", "stripes,checkerboard,noise", "bench images: synthetic names or image paths"),
    ("tasks", "denoise:30,interpolate:0.7,zoom:2", "bench tasks"),
    ("realizations", "10", "bench realizations per image and task"),
    ("synthetic_size", "64", "side of generated bench images"),
];

fn kind(key: &str) -> Option<Kind> {
    Some(match key {
        "alpha_low" | "alpha_high" | "pm_threshold" | "m_nominal" | "inner_rel_tol" | "epsilon" | "unknown_weight" | "camera_gain"
        | "exposure_time" | "readout_mean" | "readout_var" | "saturation" => Kind::Float,
        "outer_iters" | "inner_max_iters" | "patch_side" | "window_side" | "step" | "min_group" | "realizations"
        | "synthetic_size" => Kind::Count,
        "seed" => Kind::Seed,
        "clip" => Kind::Bool,
        "mask" => Kind::Mask,
        "noise" => Kind::Noise,
        "init_mode" => Kind::Init,
        "sve_layout" => Kind::Layout,
        "sve_levels" => Kind::FloatList,
        "corpus" | "tasks" => Kind::Text,
        _ => return None,
    })
}

fn check(key: &str, value: &str) -> Result<()> {
    let bad = |what: &str| Err(HbeError::Config(format!("{key}: expected {what}, got '{value}'")));
    match kind(key).ok_or_else(|| HbeError::Config(format!("unknown key '{key}'")))? {
        Kind::Float => {
            if value.parse::<f64>().map(f64::is_finite).unwrap_or(false) {
                Ok(())
            } else {
                bad("a finite number")
            }
        }
        Kind::Count => value.parse::<usize>().map(|_| ()).or_else(|_| bad("a non-negative integer")),
        Kind::Seed => value.parse::<u64>().map(|_| ()).or_else(|_| bad("an unsigned 64-bit integer")),
        Kind::Bool => value.parse::<bool>().map(|_| ()).or_else(|_| bad("true or false")),
        Kind::Mask => MaskKind::from_str(value).map(|_| ()),
        Kind::Noise => NoiseModel::from_str(value).map(|_| ()),
        Kind::Init => InitMode::from_str(value).map(|_| ()),
        Kind::Layout => SveLayout::from_str(value).map(|_| ()),
        Kind::FloatList => parse_list::<f64>(value).map(|_| ()).or_else(|_| bad("a comma-separated list of numbers")),
        Kind::Text => Ok(()),
    }
}

fn parse_list<T: FromStr>(value: &str) -> std::result::Result<Vec<T>, ()> {
    value.split(',').map(|s| s.trim().parse::<T>().map_err(|_| ())).collect()
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunConfig {
    entries: BTreeMap<String, String>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| HbeError::Config(format!("line {}: expected 'key = value'", lineno + 1)))?;
            let key = key.trim();
            if cfg.entries.contains_key(key) {
                return Err(HbeError::Config(format!("line {}: duplicate key '{key}'", lineno + 1)));
            }
            cfg.set(key, value.trim())
                .map_err(|e| HbeError::Config(format!("line {}: {}", lineno + 1, strip_prefix(&e))))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HbeError::Config(format!("cannot read config '{}': {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Sets or replaces one validated entry.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        check(key, value)?;
        self.entries.insert(key.to_string(), value.to_string());
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    fn parsed<T: FromStr>(&self, key: &str) -> Option<T> {
        self.get(key).map(|v| v.parse().ok().expect("validated on insertion"))
    }

    /// Overlays the configured solver keys onto a preset.
    pub fn solver(&self, mut base: SolverConfig) -> Result<SolverConfig> {
        macro_rules! take {
            ($key:literal, $field:expr) => {
                if let Some(v) = self.parsed($key) {
                    $field = v;
                }
            };
        }
        take!("alpha_low", base.alpha_low);
        take!("alpha_high", base.alpha_high);
        take!("pm_threshold", base.pm_threshold);
        take!("m_nominal", base.m_nominal);
        take!("outer_iters", base.outer_iters);
        take!("inner_max_iters", base.inner.max_iters);
        take!("inner_rel_tol", base.inner.rel_tol);
        take!("patch_side", base.search.patch_side);
        take!("window_side", base.search.window_side);
        take!("epsilon", base.search.epsilon);
        take!("step", base.search.step);
        take!("min_group", base.search.min_group);
        take!("unknown_weight", base.search.unknown_weight);
        if let Some(mode) = self.get("init_mode") {
            base.init_mode = mode.parse()?;
        }
        base.validate()?;
        Ok(base)
    }

    pub fn camera(&self) -> Result<CameraParams> {
        let mut cam = CameraParams::default();
        if let Some(v) = self.parsed("camera_gain") {
            cam.gain = v;
        }
        if let Some(v) = self.parsed("exposure_time") {
            cam.tau = v;
        }
        if let Some(v) = self.parsed("readout_mean") {
            cam.mu_r = v;
        }
        if let Some(v) = self.parsed("readout_var") {
            cam.var_r = v;
        }
        if let Some(v) = self.parsed("saturation") {
            cam.z_sat = v;
        }
        cam.validate()?;
        Ok(cam)
    }

    pub fn sve_levels(&self) -> Vec<f64> {
        self.get("sve_levels")
            .map(|v| parse_list(v).expect("validated on insertion"))
            .unwrap_or_else(hbe::hdr::default_levels)
    }

    pub fn sve_layout(&self) -> SveLayout {
        self.get("sve_layout").map(|v| v.parse().expect("validated")).unwrap_or(SveLayout::Nonregular)
    }

    pub fn mask(&self) -> MaskKind {
        self.get("mask").map(|v| v.parse().expect("validated")).unwrap_or(MaskKind::RandomUniform(0.0))
    }

    pub fn noise(&self) -> NoiseModel {
        self.get("noise").map(|v| v.parse().expect("validated")).unwrap_or_else(NoiseModel::none)
    }

    pub fn seed(&self) -> u64 {
        self.parsed("seed").unwrap_or(0)
    }

    pub fn clip(&self) -> bool {
        self.parsed("clip").unwrap_or(false)
    }

    pub fn count(&self, key: &str, default: usize) -> usize {
        self.parsed(key).unwrap_or(default)
    }

    /// Comma-separated text entry, or the given default list.
    pub fn list(&self, key: &str, default: &str) -> Vec<String> {
        self.get(key)
            .unwrap_or(default)
            .split(',')
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .collect()
    }
}

fn strip_prefix(e: &HbeError) -> String {
    match e {
        HbeError::Config(msg) => msg.clone(),
        other => other.to_string(),
    }
}
