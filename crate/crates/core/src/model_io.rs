//! Plain-text model files.
//!
//! ```text
//! nails-model 1
//! states 3
//! inputs 1
//! feedthrough false
//! network fx 4 5,3 tanh linear
//! network fy 3 5,1 tanh sigmoid
//! meta loss cross_entropy 1e-4
//! params fx 43
//! 1.2345678901234567e-1
//! ...
//! params fy 26
//! ...
//! end
//! ```
//!
//! Network lines give the input width, the layer widths, and the hidden and
//! output activations (`leaky_relu:0.1` carries its slope). Parameters are
//! written with 17 significant digits so a file reloads bit-exactly. `meta`
//! lines hold free-form key/value pairs for the caller.

use std::io::{BufRead, Write};

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::mlp::{Activation, NetworkSpec};
use crate::model::{RnnModel, RnnSpec};
use crate::scalar::Scalar;

const MAGIC: &str = "nails-model";
const VERSION: u32 = 1;

pub fn activation_name<T: Scalar>(a: Activation<T>) -> String {
    match a {
        Activation::LeakyRelu(s) => format!("leaky_relu:{:e}", s.to_f64_lossy()),
        other => other.name().to_string(),
    }
}

pub fn parse_activation<T: Scalar>(s: &str) -> Option<Activation<T>> {
    match s {
        "linear" => Some(Activation::Linear),
        "tanh" => Some(Activation::Tanh),
        "sigmoid" => Some(Activation::Sigmoid),
        "leaky_relu" => Some(Activation::LeakyRelu(T::lit(0.1))),
        _ => {
            let slope = s.strip_prefix("leaky_relu:")?.parse::<f64>().ok()?;
            Some(Activation::LeakyRelu(T::lit(slope)))
        }
    }
}

fn network_line<T: Scalar>(out: &mut impl Write, name: &str, spec: &NetworkSpec<T>) -> std::io::Result<()> {
    let dims: Vec<String> = spec.layer_dims().iter().map(usize::to_string).collect();
    writeln!(
        out,
        "network {name} {} {} {} {}",
        spec.input_dim(),
        dims.join(","),
        activation_name(spec.hidden_activation()),
        activation_name(spec.output_activation())
    )
}

fn params_block<T: Scalar>(out: &mut impl Write, name: &str, theta: &DVector<T>) -> std::io::Result<()> {
    writeln!(out, "params {name} {}", theta.len())?;
    for v in theta.iter() {
        writeln!(out, "{:.16e}", v.to_f64_lossy())?;
    }
    Ok(())
}

/// Free-form `key value` pairs stored alongside the parameters.
pub type Metadata = Vec<(String, String)>;

pub fn write_model<T: Scalar>(out: &mut impl Write, model: &RnnModel<T>, meta: &[(String, String)]) -> Result<()> {
    let spec = &model.spec;
    writeln!(out, "{MAGIC} {VERSION}")?;
    writeln!(out, "states {}", spec.n_x())?;
    writeln!(out, "inputs {}", spec.n_u())?;
    writeln!(out, "feedthrough {}", spec.feedthrough())?;
    if let Some(fx) = spec.fx() {
        network_line(out, "fx", fx)?;
    }
    network_line(out, "fy", spec.fy())?;
    if let Some(enc) = spec.encoder() {
        network_line(out, "encoder", enc)?;
    }
    for (k, v) in meta {
        if k.is_empty() || k.contains(char::is_whitespace) || v.contains('\n') {
            return Err(Error::Config(format!("invalid metadata entry {k:?}")));
        }
        writeln!(out, "meta {k} {v}")?;
    }
    if spec.fx().is_some() {
        params_block(out, "fx", &model.theta_x)?;
    }
    params_block(out, "fy", &model.theta_y)?;
    if let Some(t) = &model.theta_x0 {
        params_block(out, "encoder", t)?;
    }
    writeln!(out, "end")?;
    Ok(())
}

pub fn save_model<T: Scalar>(path: impl AsRef<std::path::Path>, model: &RnnModel<T>, meta: &[(String, String)]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_model(&mut w, model, meta)?;
    w.flush()?;
    Ok(())
}

pub fn load_model<T: Scalar>(path: impl AsRef<std::path::Path>) -> Result<(RnnModel<T>, Metadata)> {
    read_model(std::io::BufReader::new(std::fs::File::open(path)?))
}

struct Lines<R> {
    inner: std::io::Lines<R>,
    line: u64,
}

impl<R: BufRead> Lines<R> {
    fn next(&mut self) -> Result<Option<String>> {
        loop {
            match self.inner.next() {
                None => return Ok(None),
                Some(l) => {
                    self.line += 1;
                    let l = l?;
                    let t = l.trim();
                    if !t.is_empty() && !t.starts_with('#') {
                        return Ok(Some(t.to_string()));
                    }
                }
            }
        }
    }

    fn err(&self, message: impl Into<String>) -> Error {
        Error::Parse {
            line: self.line,
            message: message.into(),
        }
    }

    fn number<V: std::str::FromStr>(&self, s: Option<&str>, what: &str) -> Result<V> {
        s.and_then(|s| s.parse().ok()).ok_or_else(|| self.err(format!("expected {what}")))
    }
}

pub fn read_model<T: Scalar>(reader: impl BufRead) -> Result<(RnnModel<T>, Metadata)> {
    let mut lines = Lines {
        inner: reader.lines(),
        line: 0,
    };
    let header = lines.next()?.ok_or_else(|| lines.err("empty model file"))?;
    let mut parts = header.split_whitespace();
    if parts.next() != Some(MAGIC) {
        return Err(lines.err("not a model file"));
    }
    let version: u32 = lines.number(parts.next(), "format version")?;
    if version != VERSION {
        return Err(lines.err(format!("unsupported format version {version}")));
    }

    let (mut n_x, mut n_u, mut feedthrough) = (None, None, None);
    let mut networks: Vec<(String, NetworkSpec<T>)> = Vec::new();
    let mut params: Vec<(String, DVector<T>)> = Vec::new();
    let mut meta = Vec::new();
    let mut ended = false;
    while let Some(l) = lines.next()? {
        let mut it = l.split_whitespace();
        match it.next() {
            Some("states") => n_x = Some(lines.number::<usize>(it.next(), "state count")?),
            Some("inputs") => n_u = Some(lines.number::<usize>(it.next(), "input count")?),
            Some("feedthrough") => feedthrough = Some(lines.number::<bool>(it.next(), "true or false")?),
            Some("network") => {
                let name = it.next().ok_or_else(|| lines.err("missing network name"))?.to_string();
                let input: usize = lines.number(it.next(), "network input width")?;
                let dims = it
                    .next()
                    .ok_or_else(|| lines.err("missing layer widths"))?
                    .split(',')
                    .map(|d| d.parse::<usize>().map_err(|_| lines.err(format!("bad layer width {d:?}"))))
                    .collect::<Result<Vec<_>>>()?;
                let mut act = || -> Result<Activation<T>> {
                    let s = it.next().ok_or_else(|| lines.err("missing activation"))?;
                    parse_activation(s).ok_or_else(|| lines.err(format!("unknown activation {s:?}")))
                };
                let (hidden, output) = (act()?, act()?);
                let spec = NetworkSpec::new(input, dims, hidden, output).map_err(|e| lines.err(e.to_string()))?;
                networks.push((name, spec));
            }
            Some("meta") => {
                let rest = l["meta".len()..].trim_start();
                let (k, v) = rest.split_once(char::is_whitespace).unwrap_or((rest, ""));
                meta.push((k.to_string(), v.trim().to_string()));
            }
            Some("params") => {
                let name = it.next().ok_or_else(|| lines.err("missing parameter block name"))?.to_string();
                let n: usize = lines.number(it.next(), "parameter count")?;
                let mut v = Vec::with_capacity(n);
                for _ in 0..n {
                    let l = lines.next()?.ok_or_else(|| lines.err("file ends inside a parameter block"))?;
                    let x: f64 = lines.number(Some(&l), "parameter value")?;
                    v.push(T::lit(x));
                }
                params.push((name, DVector::from_vec(v)));
            }
            Some("end") => {
                ended = true;
                break;
            }
            Some(other) => return Err(lines.err(format!("unknown entry {other:?}"))),
            None => unreachable!(),
        }
    }
    if !ended {
        return Err(lines.err("missing end marker"));
    }

    let take_net = |name: &str| networks.iter().find(|(n, _)| n == name).map(|(_, s)| s.clone());
    let take_params = |name: &str| params.iter().find(|(n, _)| n == name).map(|(_, p)| p.clone());
    let missing = |what: &str| Error::Parse {
        line: lines.line,
        message: format!("missing {what}"),
    };
    let n_x = n_x.ok_or_else(|| missing("state count"))?;
    let n_u = n_u.ok_or_else(|| missing("input count"))?;
    let feedthrough = feedthrough.ok_or_else(|| missing("feedthrough flag"))?;
    let fy = take_net("fy").ok_or_else(|| missing("output network"))?;
    let spec = RnnSpec::new(n_x, n_u, take_net("fx"), fy, feedthrough, take_net("encoder"))?;
    let theta_x = if spec.fx().is_some() {
        take_params("fx").ok_or_else(|| missing("state network parameters"))?
    } else {
        DVector::zeros(0)
    };
    let theta_y = take_params("fy").ok_or_else(|| missing("output network parameters"))?;
    let theta_x0 = match spec.encoder() {
        Some(_) => Some(take_params("encoder").ok_or_else(|| missing("encoder parameters"))?),
        None => None,
    };
    Ok((RnnModel::new(spec, theta_x, theta_y, theta_x0)?, meta))
}
