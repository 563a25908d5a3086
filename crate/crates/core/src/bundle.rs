//! Versioned text serialization of a trained model.
//!
//! ```text
//! DDMT-BUNDLE v1
//! [config]        key = value lines (the full run config)
//! [normalizer]    tensors mean, std
//! [schedule]      steps, beta1, beta_t, reverse_variance
//! [autoencoder]   tensors enc_w, enc_b, dec_w, dec_b
//! [denoiser]      hyperparameters, then one tensor per weight (absent for no_ddt)
//! [masks]         one line per training window: `window <k> <seed>:<scale> ...`
//! ```
//!
//! A tensor is a `tensor <name> <dims...>` line followed by one line of
//! row-major values in shortest round-trip notation.

use std::fmt::Write as _;
use std::path::Path;

use crate::adnm::{AeParams, MaskMatrix};
use crate::config::RunConfig;
use crate::data::Normalizer;
use crate::denoiser::{DenoiserConfig, DenoiserParams};
use crate::diffusion::{NoiseSchedule, ReverseVariance};
use crate::error::{Error, Result};
use crate::tensor::{ParamSet, Tensor};

pub const HEADER: &str = "DDMT-BUNDLE v1";

/// What the bundled network was trained to output.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NetworkObjective {
    Noise,
    Reconstruction,
}

impl NetworkObjective {
    fn as_str(self) -> &'static str {
        match self {
            NetworkObjective::Noise => "noise",
            NetworkObjective::Reconstruction => "reconstruction",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub objective: NetworkObjective,
    pub params: DenoiserParams,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    pub config: RunConfig,
    pub normalizer: Normalizer,
    pub schedule: NoiseSchedule,
    pub autoencoder: AeParams,
    pub network: Option<Network>,
    pub masks: Vec<MaskMatrix>,
}

fn write_tensor(out: &mut String, name: &str, t: &Tensor) {
    let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
    let values: Vec<String> = t.data().iter().map(|v| format!("{v:e}")).collect();
    let _ = writeln!(out, "tensor {name} {}", dims.join(" "));
    let _ = writeln!(out, "{}", values.join(" "));
}

impl ModelBundle {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(HEADER);
        out.push('\n');
        out.push_str("[config]\n");
        out.push_str(&self.config.echo());

        out.push_str("[normalizer]\n");
        write_tensor(&mut out, "mean", &Tensor::new(vec![self.normalizer.mean.len()], self.normalizer.mean.clone()).expect("vector"));
        write_tensor(&mut out, "std", &Tensor::new(vec![self.normalizer.std.len()], self.normalizer.std.clone()).expect("vector"));

        let s = &self.schedule;
        out.push_str("[schedule]\n");
        let _ = writeln!(out, "steps = {}", s.steps());
        let _ = writeln!(out, "beta1 = {:e}", s.beta1());
        let _ = writeln!(out, "beta_t = {:e}", s.beta_end());
        let _ = writeln!(out, "reverse_variance = {}", s.variance().as_str());

        out.push_str("[autoencoder]\n");
        for (name, t) in self.autoencoder.to_param_set() {
            write_tensor(&mut out, &name, &t);
        }

        if let Some(net) = &self.network {
            let c = &net.params.config;
            out.push_str("[denoiser]\n");
            let _ = writeln!(out, "objective = {}", net.objective.as_str());
            for (k, v) in [
                ("window", c.window),
                ("channels", c.channels),
                ("d_model", c.d_model),
                ("heads", c.heads),
                ("layers", c.layers),
                ("ffn", c.ffn),
            ] {
                let _ = writeln!(out, "{k} = {v}");
            }
            for (name, t) in &net.params.weights {
                write_tensor(&mut out, name, t);
            }
        }

        out.push_str("[masks]\n");
        for (k, m) in self.masks.iter().enumerate() {
            let _ = write!(out, "window {k} size {}", m.size());
            for &seed in m.seeds() {
                let _ = write!(out, " {seed}:{}", m.scales()[seed]);
            }
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().peekable();
        match lines.next() {
            Some((_, l)) if l == HEADER => {}
            Some((_, l)) if l.starts_with("DDMT-BUNDLE ") => {
                return Err(Error::Bundle(format!("unsupported bundle version `{}`", &l[12..])))
            }
            _ => return Err(Error::Bundle("missing DDMT-BUNDLE header".into())),
        }

        let mut sections: Vec<(String, Vec<(usize, &str)>)> = Vec::new();
        for (n, line) in lines {
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                if sections.iter().any(|(s, _)| s == name) {
                    return Err(Error::Bundle(format!("line {}: section [{name}] repeated", n + 1)));
                }
                sections.push((name.to_string(), Vec::new()));
            } else if let Some((_, body)) = sections.last_mut() {
                body.push((n + 1, line));
            } else if !line.trim().is_empty() {
                return Err(Error::Bundle(format!("line {}: content before the first section", n + 1)));
            }
        }
        let section = |name: &str| -> Result<&[(usize, &str)]> {
            sections
                .iter()
                .find(|(s, _)| s == name)
                .map(|(_, b)| b.as_slice())
                .ok_or_else(|| Error::Bundle(format!("section [{name}] missing")))
        };
        for (name, _) in &sections {
            if !["config", "normalizer", "schedule", "autoencoder", "denoiser", "masks"].contains(&name.as_str()) {
                return Err(Error::Bundle(format!("unknown section [{name}]")));
            }
        }

        let config_text: String = section("config")?.iter().map(|(_, l)| format!("{l}\n")).collect();
        let config = RunConfig::parse_text(&config_text).map_err(|e| Error::Bundle(format!("config echo: {e}")))?;

        let norm = read_tensors(section("normalizer")?)?.1;
        let take = |set: &ParamSet, name: &str| -> Result<Vec<f64>> {
            set.get(name)
                .map(|t| t.data().to_vec())
                .ok_or_else(|| Error::Bundle(format!("normalizer `{name}` missing")))
        };
        let normalizer = Normalizer {
            mean: take(&norm, "mean")?,
            std: take(&norm, "std")?,
        };
        if normalizer.mean.len() != normalizer.std.len() {
            return Err(Error::Bundle("normalizer mean and std lengths differ".into()));
        }

        let (sched_kv, _) = read_tensors(section("schedule")?)?;
        let schedule = NoiseSchedule::linear(
            kv_parse(&sched_kv, "steps")?,
            kv_parse(&sched_kv, "beta1")?,
            kv_parse(&sched_kv, "beta_t")?,
            ReverseVariance::parse(kv(&sched_kv, "reverse_variance")?)
                .ok_or_else(|| Error::Bundle("unknown reverse_variance".into()))?,
        )
        .map_err(|e| Error::Bundle(format!("schedule: {e}")))?;

        let autoencoder = AeParams::from_param_set(&read_tensors(section("autoencoder")?)?.1)
            .map_err(|e| Error::Bundle(format!("autoencoder: {e}")))?;

        let network = match section("denoiser") {
            Err(_) => None,
            Ok(body) => {
                let (kvs, weights) = read_tensors(body)?;
                let objective = match kv(&kvs, "objective")? {
                    "noise" => NetworkObjective::Noise,
                    "reconstruction" => NetworkObjective::Reconstruction,
                    other => return Err(Error::Bundle(format!("unknown network objective `{other}`"))),
                };
                let cfg = DenoiserConfig {
                    window: kv_parse(&kvs, "window")?,
                    channels: kv_parse(&kvs, "channels")?,
                    d_model: kv_parse(&kvs, "d_model")?,
                    heads: kv_parse(&kvs, "heads")?,
                    layers: kv_parse(&kvs, "layers")?,
                    ffn: kv_parse(&kvs, "ffn")?,
                };
                cfg.validate().map_err(|e| Error::Bundle(format!("denoiser: {e}")))?;
                let params = DenoiserParams { config: cfg, weights };
                // building the graph checks every weight name and shape
                crate::denoiser::Denoiser::new(&params, schedule.steps())
                    .map_err(|e| Error::Bundle(format!("denoiser: {e}")))?;
                Some(Network { objective, params })
            }
        };

        let mut masks = Vec::new();
        for &(n, line) in section("masks")? {
            if line.trim().is_empty() {
                continue;
            }
            masks.push(parse_mask_line(line).map_err(|e| Error::Bundle(format!("line {n}: {e}")))?);
        }

        Ok(Self {
            config,
            normalizer,
            schedule,
            autoencoder,
            network,
            masks,
        })
    }
}

type KeyValues<'a> = Vec<(&'a str, &'a str)>;

fn kv<'a>(kvs: &KeyValues<'a>, key: &str) -> Result<&'a str> {
    kvs.iter()
        .find(|(k, _)| *k == key)
        .map(|(_, v)| *v)
        .ok_or_else(|| Error::Bundle(format!("`{key}` missing")))
}

fn kv_parse<T: std::str::FromStr>(kvs: &KeyValues<'_>, key: &str) -> Result<T> {
    let v = kv(kvs, key)?;
    v.parse().map_err(|_| Error::Bundle(format!("`{key}` has invalid value `{v}`")))
}

/// Splits a section body into `key = value` pairs and named tensors.
fn read_tensors<'a>(body: &[(usize, &'a str)]) -> Result<(KeyValues<'a>, ParamSet)> {
    let mut kvs = Vec::new();
    let mut tensors = ParamSet::new();
    let mut iter = body.iter();
    while let Some(&(n, line)) = iter.next() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix("tensor ") {
            let mut parts = rest.split_whitespace();
            let name = parts
                .next()
                .ok_or_else(|| Error::Bundle(format!("line {n}: tensor without a name")))?;
            let shape: Vec<usize> = parts
                .map(|d| d.parse().map_err(|_| Error::Bundle(format!("line {n}: bad dimension `{d}`"))))
                .collect::<Result<_>>()?;
            let &(vn, values) = iter
                .next()
                .ok_or_else(|| Error::Bundle(format!("line {n}: tensor `{name}` has no values")))?;
            let data: Vec<f64> = values
                .split_whitespace()
                .map(|v| v.parse().map_err(|_| Error::Bundle(format!("line {vn}: bad value `{v}`"))))
                .collect::<Result<_>>()?;
            let t = Tensor::new(shape, data).map_err(|e| Error::Bundle(format!("line {vn}: {e}")))?;
            if !t.is_finite() {
                return Err(Error::Bundle(format!("line {vn}: tensor `{name}` is not finite")));
            }
            if tensors.insert(name.to_string(), t).is_some() {
                return Err(Error::Bundle(format!("line {n}: tensor `{name}` repeated")));
            }
        } else if let Some((k, v)) = line.split_once('=') {
            kvs.push((k.trim(), v.trim()));
        } else {
            return Err(Error::Bundle(format!("line {n}: cannot parse `{line}`")));
        }
    }
    Ok((kvs, tensors))
}

fn parse_mask_line(line: &str) -> Result<MaskMatrix> {
    let parts: Vec<&str> = line.split_whitespace().collect();
    if parts.len() < 4 || parts[0] != "window" || parts[2] != "size" {
        return Err(Error::Bundle(format!("malformed mask line `{line}`")));
    }
    let size: usize = parts[3]
        .parse()
        .map_err(|_| Error::Bundle(format!("bad mask size `{}`", parts[3])))?;
    let seeds = parts[4..]
        .iter()
        .map(|p| {
            let (s, m) = p
                .split_once(':')
                .ok_or_else(|| Error::Bundle(format!("bad seed entry `{p}`")))?;
            let s = s.parse().map_err(|_| Error::Bundle(format!("bad seed `{s}`")))?;
            let m = m.parse().map_err(|_| Error::Bundle(format!("bad scale `{m}`")))?;
            Ok((s, m))
        })
        .collect::<Result<Vec<(usize, usize)>>>()?;
    MaskMatrix::from_seeds(size, &seeds)
}
