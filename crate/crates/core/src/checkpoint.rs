//! Model checkpoint files shared by simulator and policy models.
//!
//! Line 1 is a JSON header (format version, kind, env, dimensions, member
//! count, per-network layer sizes, named normalization vectors and a config
//! echo). Each following line holds one network's parameters as a flat array
//! in declared order: per layer, weight row-major then bias. Reals carry 17
//! significant digits.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::data::{format_row, parse_row};
use crate::envs::EnvId;
use crate::error::{Error, Result};
use crate::numerics::{Activation, Head, Linear, Mlp};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetSpec {
    pub sizes: Vec<usize>,
    pub activation: Activation,
    pub head: Head,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub kind: String,
    pub env: EnvId,
    pub state_dim: usize,
    pub action_dim: usize,
    pub members: usize,
    pub nets: Vec<NetSpec>,
    pub normalization: BTreeMap<String, Vec<f64>>,
    #[serde(default)]
    pub config: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub nets: Vec<Mlp>,
}

impl Checkpoint {
    pub fn new(
        kind: &str,
        env: EnvId,
        state_dim: usize,
        action_dim: usize,
        nets: Vec<Mlp>,
        normalization: BTreeMap<String, Vec<f64>>,
        config: serde_json::Value,
    ) -> Self {
        let specs = nets
            .iter()
            .map(|n| NetSpec {
                sizes: n.sizes(),
                activation: n.activation,
                head: n.head,
            })
            .collect();
        Self {
            header: CheckpointHeader {
                format_version: CHECKPOINT_FORMAT_VERSION,
                kind: kind.to_string(),
                env,
                state_dim,
                action_dim,
                members: nets.len(),
                nets: specs,
                normalization,
                config,
            },
            nets,
        }
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.header.kind != kind {
            return Err(Error::Config(format!(
                "expected a `{kind}` checkpoint, found `{}`",
                self.header.kind
            )));
        }
        Ok(())
    }

    pub fn norm(&self, name: &str) -> Result<Vec<f64>> {
        self.header
            .normalization
            .get(name)
            .cloned()
            .ok_or_else(|| Error::Config(format!("checkpoint lacks normalization vector `{name}`")))
    }

    pub fn to_text(&self) -> String {
        let mut out = serde_json::to_string(&self.header).expect("header serializes");
        out.push('\n');
        for net in &self.nets {
            out.push_str(&format_row(net.flat_params()));
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty());
        let (_, first) = lines.next().ok_or(Error::Parse {
            line: 1,
            message: "empty checkpoint".into(),
        })?;
        let header: CheckpointHeader = serde_json::from_str(first).map_err(|e| Error::Parse {
            line: 1,
            message: format!("invalid checkpoint header: {e}"),
        })?;
        if header.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Version {
                expected: CHECKPOINT_FORMAT_VERSION,
                found: header.format_version,
            });
        }
        if header.members != header.nets.len() {
            return Err(Error::dim(
                "checkpoint member count",
                header.members,
                header.nets.len(),
            ));
        }
        let mut nets = Vec::with_capacity(header.nets.len());
        for spec in &header.nets {
            let (idx, line) = lines.next().ok_or_else(|| Error::Parse {
                line: nets.len() + 2,
                message: "checkpoint truncated: missing parameter line".into(),
            })?;
            let flat = parse_row(line, idx + 1)?;
            nets.push(build_net(spec, &flat, idx + 1)?);
        }
        if let Some((idx, _)) = lines.next() {
            return Err(Error::Parse {
                line: idx + 1,
                message: "unexpected trailing content".into(),
            });
        }
        Ok(Self { header, nets })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::parse(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

fn build_net(spec: &NetSpec, flat: &[f64], line: usize) -> Result<Mlp> {
    if spec.sizes.len() < 2 {
        return Err(Error::Parse {
            line,
            message: "network needs at least two layer sizes".into(),
        });
    }
    let expected: usize = spec.sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
    if flat.len() != expected {
        return Err(Error::dim(
            format!("checkpoint line {line} parameters"),
            expected,
            flat.len(),
        ));
    }
    let mut offset = 0;
    let mut layers = Vec::new();
    for w in spec.sizes.windows(2) {
        let (inp, out) = (w[0], w[1]);
        let weight = Array2::from_shape_vec((out, inp), flat[offset..offset + inp * out].to_vec())
            .map_err(|e| Error::Usage(e.to_string()))?;
        offset += inp * out;
        let bias = Array1::from(flat[offset..offset + out].to_vec());
        offset += out;
        layers.push(Linear { weight, bias });
    }
    Mlp::from_layers(layers, spec.activation, spec.head)
}
