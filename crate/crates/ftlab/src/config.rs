//! Experiment configuration files and sweep expansion.
//!
//! Configs are sectioned `key = value` text. Every field has a default,
//! unknown sections or keys are rejected, and the fully resolved config is
//! echoed into run outputs together with its hash so artifacts from
//! different configurations cannot be mixed silently.

use crate::rng::fnv1a;
use crate::task::SamplingPrior;
use crate::train::{pcfg_lr_preset, tracr_lr_preset, Protocol};
use crate::vocab::TaskFamily;
use std::fmt;

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    // [grammar]
    pub grammar_file: Option<String>,
    pub txt_len: usize,
    pub context_len: usize,
    // [task]
    pub family: TaskFamily,
    pub o_pt: String,
    pub o_ft: String,
    pub families: Vec<String>,
    // [priors]
    pub prior_preset: String,
    pub prior_values: Option<Vec<f64>>,
    // [correlation]
    pub offset_q: i64,
    pub c_tr: f64,
    // [model]
    pub shape: String,
    pub model_seed: u64,
    pub tracr_len: usize,
    pub tracr_sigma: f64,
    // [train]
    pub protocol: Protocol,
    pub lr: Option<f64>,
    pub lr_preset: Option<String>,
    pub iterations: u64,
    pub batch_size: usize,
    pub eval_every: u64,
    pub eval_size: usize,
    pub pt_fraction: f64,
    pub threshold: f64,
    pub seed: u64,
    pub full: bool,
    // [analysis]
    pub prune_ks: Vec<usize>,
    pub granularity: String,
    pub probe_samples: usize,
    pub analysis_eval_n: usize,
    // [output]
    pub out_dir: String,
    // [sweep]
    pub sweep_priors: Vec<String>,
    pub sweep_lrs: Vec<String>,
    pub sweep_c_tr: Vec<f64>,
    pub sweep_protocols: Vec<String>,
    pub sweep_seeds: Vec<u64>,
    pub sweep_max_cells: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            grammar_file: None,
            txt_len: crate::train::DESK_TXT_LEN,
            context_len: crate::train::DESK_CONTEXT_LEN,
            family: TaskFamily::Count,
            o_pt: "a".into(),
            o_ft: "b".into(),
            families: vec!["C".into()],
            prior_preset: "P_H".into(),
            prior_values: None,
            offset_q: 1,
            c_tr: 1.0,
            shape: "tiny".into(),
            model_seed: 0,
            tracr_len: 30,
            tracr_sigma: 0.001,
            protocol: Protocol::Pretrain,
            lr: None,
            lr_preset: None,
            iterations: 10_000,
            batch_size: 96,
            eval_every: 100,
            eval_size: 2000,
            pt_fraction: 0.5,
            threshold: 95.0,
            seed: 0,
            full: false,
            prune_ks: vec![0, 1, 2, 5, 10, 15],
            granularity: "neuron".into(),
            probe_samples: 20_000,
            analysis_eval_n: 2000,
            out_dir: "runs/default".into(),
            sweep_priors: vec!["P_L".into(), "P_M".into(), "P_H".into()],
            sweep_lrs: vec!["eta_M".into(), "eta_S".into()],
            sweep_c_tr: vec![0.0, 0.5, 0.8, 1.0],
            sweep_protocols: vec!["finetune".into()],
            sweep_seeds: vec![0],
            sweep_max_cells: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "config error: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

fn parse_protocol(s: &str) -> Result<Protocol, ConfigError> {
    Ok(match s {
        "pretrain" => Protocol::Pretrain,
        "finetune" => Protocol::Finetune,
        "reft" => Protocol::Reft,
        "randft" => Protocol::RandFt,
        "mixed" => Protocol::Mixed,
        "jailbreak_pretrain" => Protocol::JailbreakPretrain,
        "scratch" => Protocol::Scratch,
        other => return Err(ConfigError(format!("unknown protocol '{other}'"))),
    })
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<ExperimentConfig, ConfigError> {
        let mut cfg = ExperimentConfig::default();
        let mut section = String::new();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if line.starts_with('[') && line.ends_with(']') {
                section = line[1..line.len() - 1].trim().to_string();
                match section.as_str() {
                    "grammar" | "task" | "priors" | "correlation" | "model" | "train"
                    | "analysis" | "output" | "sweep" => {}
                    other => {
                        return Err(ConfigError(format!(
                            "line {}: unknown section [{other}]",
                            ln + 1
                        )))
                    }
                }
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(ConfigError(format!("line {}: expected key = value", ln + 1)));
            };
            let key = key.trim();
            let value = value.trim();
            cfg.apply(&section, key, value)
                .map_err(|e| ConfigError(format!("line {}: {}", ln + 1, e.0)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&mut self, section: &str, key: &str, value: &str) -> Result<(), ConfigError> {
        let bad_key = || ConfigError(format!("unknown key '{key}' in section [{section}]"));
        let parse_num = |v: &str| -> Result<f64, ConfigError> {
            v.parse()
                .map_err(|_| ConfigError(format!("bad number '{v}' for {key}")))
        };
        let parse_int = |v: &str| -> Result<u64, ConfigError> {
            v.parse()
                .map_err(|_| ConfigError(format!("bad integer '{v}' for {key}")))
        };
        match (section, key) {
            ("grammar", "file") => self.grammar_file = Some(value.to_string()),
            ("grammar", "txt_len") => self.txt_len = parse_int(value)? as usize,
            ("grammar", "context_len") => self.context_len = parse_int(value)? as usize,
            ("task", "family") => {
                self.family = TaskFamily::from_code(value)
                    .ok_or_else(|| ConfigError(format!("unknown family '{value}'")))?
            }
            ("task", "o_pt") => self.o_pt = value.to_string(),
            ("task", "o_ft") => self.o_ft = value.to_string(),
            ("task", "families") => {
                self.families = value.split_whitespace().map(str::to_string).collect()
            }
            ("priors", "preset") => self.prior_preset = value.to_string(),
            ("priors", "probabilities") => {
                let vals: Result<Vec<f64>, _> =
                    value.split_whitespace().map(|v| v.parse::<f64>()).collect();
                self.prior_values =
                    Some(vals.map_err(|_| ConfigError("bad prior probabilities".into()))?);
            }
            ("correlation", "q") => {
                self.offset_q = value
                    .parse()
                    .map_err(|_| ConfigError(format!("bad offset '{value}'")))?
            }
            ("correlation", "c_tr") => self.c_tr = parse_num(value)?,
            ("model", "shape") => self.shape = value.to_string(),
            ("model", "seed") => self.model_seed = parse_int(value)?,
            ("model", "tracr_len") => self.tracr_len = parse_int(value)? as usize,
            ("model", "tracr_sigma") => self.tracr_sigma = parse_num(value)?,
            ("train", "protocol") => self.protocol = parse_protocol(value)?,
            ("train", "lr") => self.lr = Some(parse_num(value)?),
            ("train", "lr_preset") => self.lr_preset = Some(value.to_string()),
            ("train", "iterations") => self.iterations = parse_int(value)?,
            ("train", "batch_size") => self.batch_size = parse_int(value)? as usize,
            ("train", "eval_every") => self.eval_every = parse_int(value)?,
            ("train", "eval_size") => self.eval_size = parse_int(value)? as usize,
            ("train", "pt_fraction") => self.pt_fraction = parse_num(value)?,
            ("train", "threshold") => self.threshold = parse_num(value)?,
            ("train", "seed") => self.seed = parse_int(value)?,
            ("train", "full") => self.full = value == "true" || value == "1",
            ("analysis", "prune_ks") => {
                let vals: Result<Vec<usize>, _> =
                    value.split_whitespace().map(|v| v.parse()).collect();
                self.prune_ks = vals.map_err(|_| ConfigError("bad prune_ks".into()))?;
            }
            ("analysis", "granularity") => self.granularity = value.to_string(),
            ("analysis", "probe_samples") => self.probe_samples = parse_int(value)? as usize,
            ("analysis", "eval_n") => self.analysis_eval_n = parse_int(value)? as usize,
            ("output", "dir") => self.out_dir = value.to_string(),
            ("sweep", "priors") => {
                self.sweep_priors = value.split_whitespace().map(str::to_string).collect()
            }
            ("sweep", "lrs") => {
                self.sweep_lrs = value.split_whitespace().map(str::to_string).collect()
            }
            ("sweep", "c_tr") => {
                let vals: Result<Vec<f64>, _> =
                    value.split_whitespace().map(|v| v.parse()).collect();
                self.sweep_c_tr = vals.map_err(|_| ConfigError("bad sweep c_tr".into()))?;
            }
            ("sweep", "protocols") => {
                self.sweep_protocols = value.split_whitespace().map(str::to_string).collect()
            }
            ("sweep", "seeds") => {
                let vals: Result<Vec<u64>, _> =
                    value.split_whitespace().map(|v| v.parse()).collect();
                self.sweep_seeds = vals.map_err(|_| ConfigError("bad sweep seeds".into()))?;
            }
            ("sweep", "max_cells") => self.sweep_max_cells = parse_int(value)? as usize,
            _ => return Err(bad_key()),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.prior_values.is_none() && SamplingPrior::preset(&self.prior_preset).is_none() {
            return Err(ConfigError(format!(
                "unknown prior preset '{}'",
                self.prior_preset
            )));
        }
        if !(0.0..=1.0).contains(&self.c_tr) {
            return Err(ConfigError(format!("c_tr {} outside [0,1]", self.c_tr)));
        }
        if let Some(name) = &self.lr_preset {
            let known = pcfg_lr_preset(name).is_some() || tracr_lr_preset(name).is_some();
            if !known {
                return Err(ConfigError(format!("unknown lr preset '{name}'")));
            }
        }
        match self.shape.as_str() {
            "tiny" | "gpt" | "tracr" => {}
            other => return Err(ConfigError(format!("unknown model shape '{other}'"))),
        }
        match self.granularity.as_str() {
            "weight" | "neuron" => {}
            other => return Err(ConfigError(format!("unknown granularity '{other}'"))),
        }
        if self.batch_size == 0 || self.context_len <= self.txt_len + 9 {
            return Err(ConfigError(
                "batch_size must be positive and context_len must cover txt_len plus framing"
                    .into(),
            ));
        }
        Ok(())
    }

    pub fn resolved_prior(&self) -> SamplingPrior {
        match &self.prior_values {
            Some(vals) => SamplingPrior::new(vals.clone()).expect("validated"),
            None => SamplingPrior::preset(&self.prior_preset).expect("validated"),
        }
    }

    pub fn resolved_lr(&self) -> f64 {
        if let Some(lr) = self.lr {
            return lr;
        }
        if let Some(name) = &self.lr_preset {
            if self.shape == "tracr" {
                if let Some(lr) = tracr_lr_preset(name) {
                    return lr;
                }
            }
            if let Some(lr) = pcfg_lr_preset(name) {
                return lr;
            }
            if let Some(lr) = tracr_lr_preset(name) {
                return lr;
            }
        }
        match self.protocol {
            Protocol::Pretrain | Protocol::JailbreakPretrain | Protocol::Scratch => 1e-3,
            _ => 1e-5,
        }
    }

    /// Canonical full rendering, echoing every resolved field.
    pub fn resolved_text(&self) -> String {
        let mut s = String::new();
        s.push_str("[grammar]\n");
        if let Some(f) = &self.grammar_file {
            s.push_str(&format!("file = {f}\n"));
        }
        s.push_str(&format!("txt_len = {}\n", self.txt_len));
        s.push_str(&format!("context_len = {}\n", self.context_len));
        s.push_str("[task]\n");
        s.push_str(&format!("family = {}\n", self.family.code()));
        s.push_str(&format!("o_pt = {}\n", self.o_pt));
        s.push_str(&format!("o_ft = {}\n", self.o_ft));
        s.push_str(&format!("families = {}\n", self.families.join(" ")));
        s.push_str("[priors]\n");
        match &self.prior_values {
            Some(v) => s.push_str(&format!(
                "probabilities = {}\n",
                v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ")
            )),
            None => s.push_str(&format!("preset = {}\n", self.prior_preset)),
        }
        s.push_str("[correlation]\n");
        s.push_str(&format!("q = {}\n", self.offset_q));
        s.push_str(&format!("c_tr = {}\n", self.c_tr));
        s.push_str("[model]\n");
        s.push_str(&format!("shape = {}\n", self.shape));
        s.push_str(&format!("seed = {}\n", self.model_seed));
        s.push_str(&format!("tracr_len = {}\n", self.tracr_len));
        s.push_str(&format!("tracr_sigma = {}\n", self.tracr_sigma));
        s.push_str("[train]\n");
        s.push_str(&format!("protocol = {}\n", self.protocol.name()));
        s.push_str(&format!("lr = {}\n", self.resolved_lr()));
        s.push_str(&format!("iterations = {}\n", self.iterations));
        s.push_str(&format!("batch_size = {}\n", self.batch_size));
        s.push_str(&format!("eval_every = {}\n", self.eval_every));
        s.push_str(&format!("eval_size = {}\n", self.eval_size));
        s.push_str(&format!("pt_fraction = {}\n", self.pt_fraction));
        s.push_str(&format!("threshold = {}\n", self.threshold));
        s.push_str(&format!("seed = {}\n", self.seed));
        s.push_str(&format!("full = {}\n", self.full));
        s.push_str("[analysis]\n");
        s.push_str(&format!(
            "prune_ks = {}\n",
            self.prune_ks
                .iter()
                .map(|k| k.to_string())
                .collect::<Vec<_>>()
                .join(" ")
        ));
        s.push_str(&format!("granularity = {}\n", self.granularity));
        s.push_str(&format!("probe_samples = {}\n", self.probe_samples));
        s.push_str(&format!("eval_n = {}\n", self.analysis_eval_n));
        s.push_str("[output]\n");
        s.push_str(&format!("dir = {}\n", self.out_dir));
        s
    }

    pub fn hash(&self) -> u64 {
        fnv1a(self.resolved_text().as_bytes())
    }
}

/// Cartesian sweep over prior, learning-rate, correlation, protocol and
/// seed axes.
#[derive(Debug, Clone)]
pub struct SweepSpec {
    pub priors: Vec<String>,
    pub lrs: Vec<String>,
    pub c_trs: Vec<f64>,
    pub protocols: Vec<String>,
    pub seeds: Vec<u64>,
    pub max_cells: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepCell {
    pub prior: String,
    pub lr: String,
    pub c_tr: f64,
    pub protocol: String,
    pub seed: u64,
}

impl SweepCell {
    pub fn name(&self) -> String {
        format!(
            "{}_{}_{}_ctr{}_s{}",
            self.protocol, self.prior, self.lr, self.c_tr, self.seed
        )
    }
}

impl SweepSpec {
    pub fn from_config(cfg: &ExperimentConfig) -> SweepSpec {
        SweepSpec {
            priors: cfg.sweep_priors.clone(),
            lrs: cfg.sweep_lrs.clone(),
            c_trs: cfg.sweep_c_tr.clone(),
            protocols: cfg.sweep_protocols.clone(),
            seeds: cfg.sweep_seeds.clone(),
            max_cells: cfg.sweep_max_cells,
        }
    }

    pub fn cells(&self) -> Result<Vec<SweepCell>, ConfigError> {
        let count = self.priors.len()
            * self.lrs.len()
            * self.c_trs.len()
            * self.protocols.len()
            * self.seeds.len();
        if count > self.max_cells {
            return Err(ConfigError(format!(
                "sweep has {count} cells, cap is {}",
                self.max_cells
            )));
        }
        let mut out = Vec::with_capacity(count);
        for protocol in &self.protocols {
            for prior in &self.priors {
                for lr in &self.lrs {
                    for &c_tr in &self.c_trs {
                        for &seed in &self.seeds {
                            out.push(SweepCell {
                                prior: prior.clone(),
                                lr: lr.clone(),
                                c_tr,
                                protocol: protocol.clone(),
                                seed,
                            });
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse_and_round_trip() {
        let cfg = ExperimentConfig::parse("").unwrap();
        let text = cfg.resolved_text();
        let cfg2 = ExperimentConfig::parse(&text).unwrap();
        assert_eq!(cfg.hash(), cfg2.hash());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(ExperimentConfig::parse("[train]\nfrobnicate = 7\n").is_err());
        assert!(ExperimentConfig::parse("[warp]\nspeed = 9\n").is_err());
    }

    #[test]
    fn values_override_defaults() {
        let cfg = ExperimentConfig::parse(
            "[priors]\npreset = P_L\n[train]\nprotocol = finetune\nlr_preset = eta_S\nseed = 7\n",
        )
        .unwrap();
        assert_eq!(cfg.prior_preset, "P_L");
        assert_eq!(cfg.resolved_lr(), 1e-6);
        assert_eq!(cfg.seed, 7);
    }

    #[test]
    fn sweep_cell_count_matches_grid() {
        let mut cfg = ExperimentConfig::default();
        cfg.sweep_priors = vec!["P_L".into(), "P_M".into(), "P_H".into()];
        cfg.sweep_lrs = vec!["eta_M".into(), "eta_S".into()];
        cfg.sweep_c_tr = vec![0.0, 0.5, 0.8, 1.0];
        cfg.sweep_protocols = vec!["finetune".into()];
        cfg.sweep_seeds = vec![0];
        let cells = SweepSpec::from_config(&cfg).cells().unwrap();
        assert_eq!(cells.len(), 24);
        // Unique names per cell.
        let mut names: Vec<String> = cells.iter().map(|c| c.name()).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), 24);
    }

    #[test]
    fn sweep_cap_enforced() {
        let mut cfg = ExperimentConfig::default();
        cfg.sweep_seeds = (0..100).collect();
        cfg.sweep_max_cells = 10;
        assert!(SweepSpec::from_config(&cfg).cells().is_err());
    }

    #[test]
    fn tracr_lr_presets_resolve_by_shape() {
        let cfg = ExperimentConfig::parse(
            "[model]\nshape = tracr\n[train]\nprotocol = finetune\nlr_preset = eta_S\n",
        )
        .unwrap();
        assert_eq!(cfg.resolved_lr(), 1e-3);
    }
}
