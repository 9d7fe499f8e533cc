//! Flat `key = value` run configuration.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use lshmf::data::Delimiter;
use lshmf::factorization::{BiasMode, EvalOptions, Preset, RowOrder, TrainConfig};
use lshmf::lsh::LshConfig;
use lshmf::similarity::SimilarityConfig;

pub const SEED_ENV: &str = "LSHMF_SEED";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provider {
    Gsm,
    SimLsh,
    MinHash,
    RpCos,
    Random,
}

impl FromStr for Provider {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "gsm" => Provider::Gsm,
            "simlsh" => Provider::SimLsh,
            "minhash" => Provider::MinHash,
            "rpcos" => Provider::RpCos,
            "random" => Provider::Random,
            other => bail!("unknown provider {other:?} (gsm, simlsh, minhash, rpcos, random)"),
        })
    }
}

impl fmt::Display for Provider {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Provider::Gsm => "gsm",
            Provider::SimLsh => "simlsh",
            Provider::MinHash => "minhash",
            Provider::RpCos => "rpcos",
            Provider::Random => "random",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    Basic,
    Full,
}

/// Every tunable of a run. Unset rate or regularization keys fall back to
/// the preset of the chosen model.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub seed: u64,
    pub delimiter: Delimiter,
    pub zero_floor: Option<f64>,
    pub scale: Option<f64>,
    pub test_fraction: f64,
    pub provider: Provider,
    pub k: usize,
    pub lambda_rho: f64,
    pub lsh: LshConfig,
    pub minhash_hashes: usize,
    pub minhash_bands: usize,
    pub rpcos_planes: usize,
    pub model: ModelKind,
    pub preset: Preset,
    pub rank: usize,
    pub epochs: usize,
    pub beta: Option<f64>,
    pub rates: [Option<f64>; 6],
    pub regs: [Option<f64>; 6],
    pub init_scale: Option<f64>,
    pub biases: Option<BiasMode>,
    pub row_order: RowOrder,
    pub clamp: Option<(f64, f64)>,
    pub workers: usize,
    pub racy: bool,
}

const CLASSES: [&str; 6] = ["b", "b_hat", "u", "v", "w", "c"];

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            delimiter: Delimiter::Tab,
            zero_floor: None,
            scale: None,
            test_fraction: 0.1,
            provider: Provider::SimLsh,
            k: 32,
            lambda_rho: 100.0,
            lsh: LshConfig::default(),
            minhash_hashes: 128,
            minhash_bands: 32,
            rpcos_planes: 8,
            model: ModelKind::Full,
            preset: Preset::MovieLens,
            rank: 32,
            epochs: 50,
            beta: None,
            rates: [None; 6],
            regs: [None; 6],
            init_scale: None,
            biases: None,
            row_order: RowOrder::Natural,
            clamp: None,
            workers: 1,
            racy: false,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    value.parse().map_err(|e| anyhow!("{key} = {value:?}: {e}"))
}

fn optional<T: FromStr>(key: &str, value: &str) -> Result<Option<T>>
where
    T::Err: fmt::Display,
{
    if value.is_empty() || value == "none" {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

/// `key = value` lines; `#` starts a comment.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| anyhow!("line {}: expected `key = value`", n + 1))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub fn parse_override(s: &str) -> Result<(String, String)> {
    let (k, v) = s.split_once('=').ok_or_else(|| anyhow!("override {s:?} is not `key=value`"))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

impl RunConfig {
    /// Defaults, then `LSHMF_SEED`, then the config file, then overrides;
    /// later assignments win.
    pub fn load(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut pairs = Vec::new();
        if let Ok(seed) = std::env::var(SEED_ENV) {
            pairs.push(("seed".to_string(), seed));
        }
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            pairs.extend(parse_pairs(&text)?);
        }
        pairs.extend(overrides.iter().cloned());
        let mut cfg = RunConfig::default();
        for (k, v) in &pairs {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse(key, value)?,
            "delimiter" => self.delimiter = parse(key, value)?,
            "zero_floor" => self.zero_floor = optional(key, value)?,
            "scale" => self.scale = optional(key, value)?,
            "test_fraction" => self.test_fraction = parse(key, value)?,
            "provider" => self.provider = parse(key, value)?,
            "k" => self.k = parse(key, value)?,
            "lambda_rho" => self.lambda_rho = parse(key, value)?,
            "g_bits" => self.lsh.g_bits = parse(key, value)?,
            "p" => self.lsh.p = parse(key, value)?,
            "q" => self.lsh.q = parse(key, value)?,
            "psi_exponent" => self.lsh.psi_exponent = parse(key, value)?,
            "minhash_hashes" => self.minhash_hashes = parse(key, value)?,
            "minhash_bands" => self.minhash_bands = parse(key, value)?,
            "rpcos_planes" => self.rpcos_planes = parse(key, value)?,
            "model" => {
                self.model = match value {
                    "basic" => ModelKind::Basic,
                    "full" => ModelKind::Full,
                    _ => bail!("model = {value:?}: expected basic or full"),
                }
            }
            "preset" => {
                self.preset = match value {
                    "movielens" => Preset::MovieLens,
                    "netflix" => Preset::Netflix,
                    "yahoo" => Preset::YahooMusic,
                    _ => bail!("preset = {value:?}: expected movielens, netflix or yahoo"),
                }
            }
            "rank" => self.rank = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "beta" => self.beta = optional(key, value)?,
            "init_scale" => self.init_scale = optional(key, value)?,
            "biases" => {
                self.biases = Some(match value {
                    "off" => BiasMode::Off,
                    "fixed" => BiasMode::Fixed,
                    "trained" => BiasMode::Trained,
                    _ => bail!("biases = {value:?}: expected off, fixed or trained"),
                })
            }
            "row_order" => {
                self.row_order = match value {
                    "natural" => RowOrder::Natural,
                    "descending" => RowOrder::DescendingCount,
                    _ => bail!("row_order = {value:?}: expected natural or descending"),
                }
            }
            "clamp" => {
                self.clamp = if value.is_empty() || value == "none" {
                    None
                } else {
                    let (lo, hi) = value.split_once(',').ok_or_else(|| anyhow!("clamp = {value:?}: expected lo,hi"))?;
                    Some((parse(key, lo.trim())?, parse(key, hi.trim())?))
                }
            }
            "workers" => self.workers = parse(key, value)?,
            "racy" => self.racy = parse(key, value)?,
            "rates" | "regs" => {
                let x = optional(key, value)?;
                let slot = if key == "rates" { &mut self.rates } else { &mut self.regs };
                *slot = [x; 6];
            }
            _ => {
                let class = key
                    .strip_prefix("rate_")
                    .map(|c| (c, true))
                    .or_else(|| key.strip_prefix("reg_").map(|c| (c, false)));
                let Some((class, is_rate)) = class else {
                    bail!("unknown configuration key {key:?}");
                };
                let idx = CLASSES
                    .iter()
                    .position(|&c| c == class)
                    .ok_or_else(|| anyhow!("unknown parameter class in {key:?}"))?;
                let x = optional(key, value)?;
                if is_rate {
                    self.rates[idx] = x;
                } else {
                    self.regs[idx] = x;
                }
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.test_fraction) {
            bail!("test_fraction must lie in [0, 1)");
        }
        if self.workers == 0 {
            bail!("workers must be at least 1");
        }
        match self.provider {
            Provider::SimLsh => self.lsh_config().validate()?,
            Provider::MinHash if self.minhash_bands == 0 || self.minhash_hashes % self.minhash_bands != 0 => {
                bail!("minhash_hashes must be a positive multiple of minhash_bands")
            }
            Provider::RpCos if !(1..=64).contains(&self.rpcos_planes) => bail!("rpcos_planes must be in 1..=64"),
            Provider::Gsm if self.lambda_rho < 0.0 => bail!("lambda_rho must be non-negative"),
            _ => {}
        }
        self.train_config().validate()?;
        Ok(())
    }

    pub fn lsh_config(&self) -> LshConfig {
        LshConfig { seed: self.seed, ..self.lsh }
    }

    pub fn similarity_config(&self) -> SimilarityConfig {
        SimilarityConfig { lambda_rho: self.lambda_rho, k: self.k }
    }

    pub fn train_config(&self) -> TrainConfig {
        let mut t = match self.model {
            ModelKind::Basic => TrainConfig::basic(self.preset),
            ModelKind::Full => TrainConfig::full(self.preset),
        };
        t.rank = self.rank;
        t.k = if self.model == ModelKind::Full { self.k } else { 0 };
        t.epochs = self.epochs;
        t.seed = self.seed;
        t.init_scale = self.init_scale;
        t.clamp = self.clamp;
        t.row_order = self.row_order;
        if let Some(b) = self.beta {
            t.beta = b;
        }
        if let Some(b) = self.biases {
            t.biases = b;
        }
        let apply = |pc: &mut lshmf::factorization::PerClass, xs: &[Option<f64>; 6]| {
            let slots = [&mut pc.b, &mut pc.b_hat, &mut pc.u, &mut pc.v, &mut pc.w, &mut pc.c];
            for (slot, x) in slots.into_iter().zip(xs) {
                if let Some(x) = x {
                    *slot = *x;
                }
            }
        };
        apply(&mut t.rates, &self.rates);
        apply(&mut t.regs, &self.regs);
        t
    }

    pub fn eval_options(&self) -> EvalOptions {
        EvalOptions { clamp: self.clamp, unscale: self.scale }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairs_and_overrides() {
        let pairs = parse_pairs("# comment\nk = 8\n\nprovider=gsm # trailing\nrate_u = 0.01\n").unwrap();
        let mut cfg = RunConfig::default();
        for (k, v) in &pairs {
            cfg.set(k, v).unwrap();
        }
        assert_eq!(cfg.k, 8);
        assert_eq!(cfg.provider, Provider::Gsm);
        assert_eq!(cfg.train_config().rates.u, 0.01);
        assert_eq!(cfg.train_config().rates.v, TrainConfig::full(Preset::MovieLens).rates.v);
        assert!(cfg.set("nonsense", "1").is_err());
        assert!(cfg.set("rate_z", "1").is_err());
        assert!(parse_pairs("novalue").is_err());
        assert_eq!(parse_override("epochs=3").unwrap(), ("epochs".into(), "3".into()));
    }

    #[test]
    fn basic_model_has_no_neighbors() {
        let mut cfg = RunConfig::default();
        cfg.set("model", "basic").unwrap();
        cfg.set("clamp", "1,5").unwrap();
        let t = cfg.train_config();
        assert_eq!(t.k, 0);
        assert_eq!(t.clamp, Some((1.0, 5.0)));
    }

    #[test]
    fn provider_validation() {
        let mut cfg = RunConfig::default();
        cfg.set("g_bits", "65").unwrap();
        assert!(cfg.validate().is_err());
        cfg.set("provider", "minhash").unwrap();
        assert!(cfg.validate().is_ok());
        cfg.set("minhash_bands", "5").unwrap();
        assert!(cfg.validate().is_err());
    }
}
