//! Line-oriented model configuration files.
//!
//! ```text
//! # comment
//! name = kanc_mlp_small
//! input = 1 28 28
//! grid_size = 10
//! spline_degree = 3
//! grid_range = -1 1
//! layer = kan_conv in=1 out=5 kernel=3
//! layer = maxpool window=2
//! layer = flatten
//! layer = linear in=125 out=10
//! layer = log_softmax
//! ```
//!
//! Learnable-activation layers inherit the file-level grid settings unless
//! they set `grid_size=`, `degree=` or `range=lo,hi` themselves. Kernels are
//! `3` or `3x2`; `stride` defaults to 1 (pooling: the window), `padding` to 0.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use crate::error::{Error, Result};
use crate::layers::{GridSpec, LayerSpec};
use crate::model::Model;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub name: String,
    pub input_shape: Vec<usize>,
    pub grid: GridSpec,
    pub layers: Vec<LayerSpec>,
}

fn syntax(line: usize, msg: impl Into<String>) -> Error {
    Error::ConfigSyntax { line, msg: msg.into() }
}

struct LayerArgs<'a> {
    line: usize,
    kind: &'a str,
    args: BTreeMap<&'a str, &'a str>,
}

impl<'a> LayerArgs<'a> {
    fn parse(line: usize, text: &'a str) -> Result<Self> {
        let mut words = text.split_whitespace();
        let kind = words.next().ok_or_else(|| syntax(line, "empty layer"))?;
        let mut args = BTreeMap::new();
        for w in words {
            let (k, v) = w
                .split_once('=')
                .ok_or_else(|| syntax(line, format!("expected key=value, found `{w}`")))?;
            if args.insert(k, v).is_some() {
                return Err(syntax(line, format!("`{k}` given twice")));
            }
        }
        Ok(Self { line, kind, args })
    }

    fn take(&mut self, key: &str) -> Option<&'a str> {
        self.args.remove(key)
    }

    fn usize_or(&mut self, key: &str, default: Option<usize>) -> Result<usize> {
        match self.take(key) {
            Some(v) => v
                .parse()
                .map_err(|_| syntax(self.line, format!("`{key}` must be a non-negative integer, got `{v}`"))),
            None => default.ok_or_else(|| syntax(self.line, format!("{} layer needs `{key}=`", self.kind))),
        }
    }

    fn kernel(&mut self) -> Result<(usize, usize)> {
        let v = self
            .take("kernel")
            .ok_or_else(|| syntax(self.line, format!("{} layer needs `kernel=`", self.kind)))?;
        let bad = || syntax(self.line, format!("kernel must be `N` or `NxM`, got `{v}`"));
        match v.split_once('x') {
            Some((a, b)) => Ok((a.parse().map_err(|_| bad())?, b.parse().map_err(|_| bad())?)),
            None => {
                let n = v.parse().map_err(|_| bad())?;
                Ok((n, n))
            }
        }
    }

    fn grid(&mut self, base: GridSpec) -> Result<GridSpec> {
        let grid_size = self.usize_or("grid_size", Some(base.grid_size))?;
        let degree = self.usize_or("degree", Some(base.degree))?;
        let range = match self.take("range") {
            Some(v) => parse_range(self.line, &v.replace(',', " "))?,
            None => base.range,
        };
        Ok(GridSpec {
            grid_size,
            degree,
            range,
        })
    }

    fn finish(self, spec: LayerSpec) -> Result<LayerSpec> {
        if let Some(k) = self.args.keys().next() {
            return Err(syntax(
                self.line,
                format!("unknown option `{k}` for {} layer", self.kind),
            ));
        }
        Ok(spec)
    }
}

fn parse_range(line: usize, v: &str) -> Result<(f64, f64)> {
    let nums: Vec<f64> = v
        .split_whitespace()
        .map(|s| s.parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| syntax(line, format!("range must be two numbers, got `{v}`")))?;
    match nums[..] {
        [lo, hi] if lo < hi && lo.is_finite() && hi.is_finite() => Ok((lo, hi)),
        _ => Err(syntax(line, format!("range must be `lo hi` with lo < hi, got `{v}`"))),
    }
}

/// A layer line before the file-level grid is known.
enum Pending {
    Ready(LayerSpec),
    Kan(usize, String),
}

impl ModelConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut name = None;
        let mut input = None;
        let mut grid = GridSpec::default();
        let mut pending = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| syntax(line, format!("expected `key = value`, found `{content}`")))?;
            let positive = |v: &str, what: &str| -> Result<usize> {
                match v.parse::<usize>() {
                    Ok(n) if n > 0 => Ok(n),
                    _ => Err(syntax(line, format!("{what} must be a positive integer, got `{v}`"))),
                }
            };
            match key {
                "name" => {
                    if value.is_empty() || value.contains(char::is_whitespace) {
                        return Err(syntax(line, "name must be a single non-empty word"));
                    }
                    name = Some(value.to_string());
                }
                "input" => {
                    input = Some(
                        value
                            .split_whitespace()
                            .map(|v| positive(v, "input dimension"))
                            .collect::<Result<Vec<_>>>()?,
                    );
                }
                "grid_size" => grid.grid_size = positive(value, "grid_size")?,
                "spline_degree" => grid.degree = positive(value, "spline_degree")?,
                "grid_range" => grid.range = parse_range(line, value)?,
                "layer" => pending.push(Self::layer(line, value)?),
                other => return Err(syntax(line, format!("unknown key `{other}`"))),
            }
        }
        let name = name.ok_or_else(|| Error::Config("missing `name`".into()))?;
        let input_shape = input.ok_or_else(|| Error::Config("missing `input`".into()))?;
        let mut layers = Vec::with_capacity(pending.len());
        for p in pending {
            layers.push(match p {
                Pending::Ready(spec) => spec,
                Pending::Kan(line, text) => Self::kan_layer(line, &text, grid)?,
            });
        }
        let cfg = Self {
            name,
            input_shape,
            grid,
            layers,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn layer(line: usize, text: &str) -> Result<Pending> {
        let mut a = LayerArgs::parse(line, text)?;
        let spec = match a.kind {
            "kan_conv" | "kan_linear" => return Ok(Pending::Kan(line, text.to_string())),
            "conv" => LayerSpec::Conv {
                in_channels: a.usize_or("in", None)?,
                out_channels: a.usize_or("out", None)?,
                kernel: a.kernel()?,
                stride: a.usize_or("stride", Some(1))?,
                padding: a.usize_or("padding", Some(0))?,
            },
            "linear" => LayerSpec::Linear {
                n_in: a.usize_or("in", None)?,
                n_out: a.usize_or("out", None)?,
            },
            "maxpool" => {
                let window = a.usize_or("window", None)?;
                LayerSpec::MaxPool {
                    window,
                    stride: a.usize_or("stride", Some(window))?,
                }
            }
            "batchnorm" => LayerSpec::BatchNorm {
                channels: a.usize_or("channels", None)?,
            },
            "relu" => LayerSpec::Relu,
            "flatten" => LayerSpec::Flatten,
            "log_softmax" => LayerSpec::LogSoftmax,
            other => return Err(syntax(line, format!("unknown layer kind `{other}`"))),
        };
        a.finish(spec).map(Pending::Ready)
    }

    fn kan_layer(line: usize, text: &str, base: GridSpec) -> Result<LayerSpec> {
        let mut a = LayerArgs::parse(line, text)?;
        let spec = if a.kind == "kan_conv" {
            LayerSpec::KanConv {
                in_channels: a.usize_or("in", None)?,
                out_channels: a.usize_or("out", None)?,
                kernel: a.kernel()?,
                stride: a.usize_or("stride", Some(1))?,
                padding: a.usize_or("padding", Some(0))?,
                grid: a.grid(base)?,
            }
        } else {
            LayerSpec::KanLinear {
                n_in: a.usize_or("in", None)?,
                n_out: a.usize_or("out", None)?,
                grid: a.grid(base)?,
            }
        };
        a.finish(spec)
    }

    /// Checks the invariants a loadable configuration must satisfy: a
    /// log-softmax head, positive grid settings and consistent chaining.
    pub fn validate(&self) -> Result<()> {
        if self.layers.last() != Some(&LayerSpec::LogSoftmax) {
            return Err(Error::Config(format!(
                "`{}`: the last layer must be log_softmax",
                self.name
            )));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if let LayerSpec::KanConv { grid, .. } | LayerSpec::KanLinear { grid, .. } = l {
                if grid.grid_size == 0 || grid.degree == 0 {
                    return Err(Error::Config(format!(
                        "layer {i}: grid size and spline degree must be positive"
                    )));
                }
            }
        }
        Model::from_specs(&self.name, &self.input_shape, &self.layers, 0)
            .map_err(|e| Error::Config(format!("`{}`: {e}", self.name)))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            Error::ConfigSyntax { line, msg } => Error::ConfigSyntax {
                line,
                msg: format!("{}: {msg}", path.display()),
            },
            other => other,
        })
    }

    /// Sets the grid size of every learnable-activation layer.
    pub fn with_grid_size(mut self, grid_size: usize) -> Self {
        self.grid.grid_size = grid_size;
        for l in &mut self.layers {
            if let LayerSpec::KanConv { grid, .. } | LayerSpec::KanLinear { grid, .. } = l {
                grid.grid_size = grid_size;
            }
        }
        self
    }

    pub fn has_kan_layers(&self) -> bool {
        self.layers
            .iter()
            .any(|l| matches!(l, LayerSpec::KanConv { .. } | LayerSpec::KanLinear { .. }))
    }

    pub fn build(&self, seed: u64) -> Result<Model> {
        Model::from_specs(&self.name, &self.input_shape, &self.layers, seed)
    }
}

impl fmt::Display for ModelConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let dims: Vec<String> = self.input_shape.iter().map(ToString::to_string).collect();
        writeln!(f, "name = {}", self.name)?;
        writeln!(f, "input = {}", dims.join(" "))?;
        writeln!(f, "grid_size = {}", self.grid.grid_size)?;
        writeln!(f, "spline_degree = {}", self.grid.degree)?;
        writeln!(f, "grid_range = {} {}", self.grid.range.0, self.grid.range.1)?;
        let kernel = |k: (usize, usize)| {
            if k.0 == k.1 {
                k.0.to_string()
            } else {
                format!("{}x{}", k.0, k.1)
            }
        };
        let grid = |g: &GridSpec| {
            format!(
                " grid_size={} degree={} range={},{}",
                g.grid_size, g.degree, g.range.0, g.range.1
            )
        };
        for l in &self.layers {
            let line = match l {
                LayerSpec::KanConv {
                    in_channels,
                    out_channels,
                    kernel: k,
                    stride,
                    padding,
                    grid: g,
                } => format!(
                    "kan_conv in={in_channels} out={out_channels} kernel={} stride={stride} padding={padding}{}",
                    kernel(*k),
                    grid(g)
                ),
                LayerSpec::Conv {
                    in_channels,
                    out_channels,
                    kernel: k,
                    stride,
                    padding,
                } => format!(
                    "conv in={in_channels} out={out_channels} kernel={} stride={stride} padding={padding}",
                    kernel(*k)
                ),
                LayerSpec::KanLinear { n_in, n_out, grid: g } => {
                    format!("kan_linear in={n_in} out={n_out}{}", grid(g))
                }
                LayerSpec::Linear { n_in, n_out } => format!("linear in={n_in} out={n_out}"),
                LayerSpec::MaxPool { window, stride } => {
                    format!("maxpool window={window} stride={stride}")
                }
                LayerSpec::BatchNorm { channels } => format!("batchnorm channels={channels}"),
                other => other.kind().to_string(),
            };
            writeln!(f, "layer = {line}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SMALL: &str = "\
# two KAN convolutions and a dense head
name = kanc_mlp_small
input = 1 28 28
grid_size = 10
layer = kan_conv in=1 out=5 kernel=3
layer = maxpool window=2
layer = kan_conv in=5 out=5 kernel=3 grid_size=20 range=-2,2
layer = maxpool window=2
layer = flatten
layer = linear in=125 out=10   # logits
layer = log_softmax
";

    #[test]
    fn parses_and_inherits_grid() {
        let cfg = ModelConfig::parse(SMALL).unwrap();
        assert_eq!(cfg.name, "kanc_mlp_small");
        assert_eq!(cfg.layers.len(), 7);
        match (&cfg.layers[0], &cfg.layers[2]) {
            (LayerSpec::KanConv { grid: a, .. }, LayerSpec::KanConv { grid: b, .. }) => {
                assert_eq!((a.grid_size, a.range), (10, (-1.0, 1.0)));
                assert_eq!((b.grid_size, b.range), (20, (-2.0, 2.0)));
            }
            other => panic!("{other:?}"),
        }
        assert_eq!(cfg.layers[1], LayerSpec::MaxPool { window: 2, stride: 2 });
    }

    #[test]
    fn display_round_trips() {
        let cfg = ModelConfig::parse(SMALL).unwrap();
        assert_eq!(ModelConfig::parse(&cfg.to_string()).unwrap(), cfg);
    }

    #[test]
    fn errors_point_at_lines() {
        let cases = [
            ("name = a\ninput = 1 4 4\nlayer = spin x=1\n", 3),
            ("name = a\ninput = 1 4 4\nlayer = conv in=1 out=2\n", 3),
            ("name = a\ninput = 1 4 4\nlayer = conv in=1 out=2 kernel=3 bogus=1\n", 3),
            ("name = a\nsize 3\n", 2),
            ("name = a\ngrid_size = 0\n", 2),
            ("name = a\ngrid_range = 1 -1\n", 2),
        ];
        for (text, line) in cases {
            match ModelConfig::parse(text) {
                Err(Error::ConfigSyntax { line: l, .. }) => assert_eq!(l, line, "{text}"),
                other => panic!("{text}: {other:?}"),
            }
        }
    }

    #[test]
    fn semantic_errors() {
        let no_head = "name = a\ninput = 4\nlayer = linear in=4 out=2\n";
        assert!(matches!(ModelConfig::parse(no_head), Err(Error::Config(_))));
        let bad_chain = "name = a\ninput = 4\nlayer = linear in=5 out=2\nlayer = log_softmax\n";
        let err = ModelConfig::parse(bad_chain).unwrap_err().to_string();
        assert!(err.contains("layer 0"), "{err}");
        assert!(ModelConfig::parse("input = 4\n").is_err());
    }

    #[test]
    fn grid_size_override() {
        let cfg = ModelConfig::parse(SMALL).unwrap().with_grid_size(20);
        let m = cfg.build(0).unwrap();
        assert_eq!(m.count_parameters().exact, 8010);
    }
}
