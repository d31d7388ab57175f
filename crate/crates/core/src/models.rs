//! Neural components: point-cloud encoder, point-set decoder, reward head,
//! latent forward/inverse models and the policy network.
//!
//! Parameters live in [`ModelParams`], a flat list of named tensors plus an
//! [`Architecture`] descriptor. Values are kept on the `f32` grid so that a
//! checkpoint round-trip reproduces every output bit for bit. Networks are
//! evaluated on a [`Tape`] through [`Net`], which binds each tensor as a
//! trainable leaf or a frozen constant.
//!
//! ```
//! use softrep::models::{Architecture, Component, ModelParams};
//! use softrep::autodiff::Tensor;
//!
//! let arch = Architecture::small(16, 8, 3);
//! let params = ModelParams::init(arch, &[Component::Encoder, Component::Decoder], 7).unwrap();
//! let cloud = Tensor::from_shape_fn((16, 3), |(i, j)| (i * 3 + j) as f64 / 48.0);
//! let latent = params.encode(&cloud).unwrap();
//! assert_eq!(latent.len(), 8);
//! let recon = params.decode(&latent).unwrap();
//! assert_eq!(recon.dim(), (16, 3));
//! ```

use std::collections::HashMap;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdError, GradBundle, Tape, Tensor, Var};

const MAGIC: &str = "softrep-checkpoint 1";

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("cannot encode an empty point cloud")]
    EmptyCloud,
    #[error("{what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("model has no {0} parameters")]
    Missing(Component),
    #[error("bad architecture: {0}")]
    Architecture(String),
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Tape(#[from] AdError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Encoder,
    Decoder,
    Reward,
    Forward,
    Inverse,
    Policy,
}

impl Component {
    pub const ALL: [Component; 6] = [
        Component::Encoder,
        Component::Decoder,
        Component::Reward,
        Component::Forward,
        Component::Inverse,
        Component::Policy,
    ];

    pub fn prefix(self) -> &'static str {
        match self {
            Component::Encoder => "encoder",
            Component::Decoder => "decoder",
            Component::Reward => "reward",
            Component::Forward => "forward",
            Component::Inverse => "inverse",
            Component::Policy => "policy",
        }
    }

    fn of(name: &str) -> Option<Component> {
        let head = name.split('.').next()?;
        Component::ALL.into_iter().find(|c| c.prefix() == head)
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.prefix())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
}

/// Layer widths and input/output sizes of every component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Architecture {
    pub d_latent: usize,
    /// Number of points produced by the decoder.
    pub n_points: usize,
    pub action_dim: usize,
    /// Width of the concatenated policy features.
    pub policy_input: usize,
    pub action_bound: f64,
    /// Per-point MLP, starting from the 3 coordinates.
    pub point_mlp: Vec<usize>,
    /// Shared MLP applied after concatenating the global feature.
    pub global_mlp: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    pub head_hidden: Vec<usize>,
    pub activation: Activation,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            d_latent: 256,
            n_points: 1024,
            action_dim: 3,
            policy_input: 256 + 6 + 256,
            action_bound: 4.0,
            point_mlp: vec![128, 256],
            global_mlp: vec![512],
            decoder_hidden: vec![1024, 1024],
            head_hidden: vec![256, 256],
            activation: Activation::Relu,
        }
    }
}

impl Architecture {
    /// Default widths for a given cloud size, latent size and action size.
    pub fn new(n_points: usize, d_latent: usize, action_dim: usize) -> Self {
        Self {
            d_latent,
            n_points,
            action_dim,
            policy_input: 2 * d_latent + 6,
            ..Self::default()
        }
    }

    /// Narrow layers for tests and quick experiments.
    pub fn small(n_points: usize, d_latent: usize, action_dim: usize) -> Self {
        Self {
            point_mlp: vec![8, 12],
            global_mlp: vec![16],
            decoder_hidden: vec![24, 24],
            head_hidden: vec![16, 16],
            ..Self::new(n_points, d_latent, action_dim)
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::Architecture(m.to_string()));
        if self.d_latent == 0 || self.n_points == 0 || self.action_dim == 0 || self.policy_input == 0 {
            return bad("sizes must be positive");
        }
        if self.point_mlp.is_empty() || self.global_mlp.is_empty() {
            return bad("encoder needs at least one point layer and one global layer");
        }
        let all = [
            &self.point_mlp,
            &self.global_mlp,
            &self.decoder_hidden,
            &self.head_hidden,
        ];
        if all.iter().any(|w| w.contains(&0)) {
            return bad("zero layer width");
        }
        if !(self.action_bound.is_finite() && self.action_bound > 0.0) {
            return bad("action bound must be positive");
        }
        Ok(())
    }

    /// `(name, fan_in, fan_out, linear)` for every dense layer of a component;
    /// `linear` layers have no activation.
    fn layers(&self, c: Component) -> Vec<(String, usize, usize, bool)> {
        let chain = |prefix: String, input: usize, hidden: &[usize], out: usize| {
            let mut widths = vec![input];
            widths.extend_from_slice(hidden);
            widths.push(out);
            (0..widths.len() - 1)
                .map(|i| (format!("{prefix}.{i}"), widths[i], widths[i + 1], i + 2 == widths.len()))
                .collect::<Vec<_>>()
        };
        let d = self.d_latent;
        match c {
            Component::Encoder => {
                let p = &self.point_mlp;
                let mut out = chain("encoder.point".into(), 3, &p[..p.len() - 1], p[p.len() - 1]);
                let feat = p[p.len() - 1];
                let g = &self.global_mlp;
                let mut glob = chain("encoder.global".into(), 2 * feat, &g[..g.len() - 1], g[g.len() - 1]);
                for l in &mut glob {
                    l.3 = false;
                }
                out.extend(glob);
                out.push(("encoder.head".into(), g[g.len() - 1], d, true));
                out
            }
            Component::Decoder => chain("decoder".into(), d, &self.decoder_hidden, 3 * self.n_points),
            Component::Reward => chain("reward".into(), d, &self.head_hidden, 1),
            Component::Forward => chain("forward".into(), d + self.action_dim, &self.head_hidden, d),
            Component::Inverse => chain("inverse".into(), 2 * d, &self.head_hidden, self.action_dim),
            Component::Policy => chain("policy".into(), self.policy_input, &self.head_hidden, self.action_dim),
        }
    }
}

/// Rounds to the nearest `f32`.
pub fn snap(x: f64) -> f64 {
    x as f32 as f64
}

/// Named parameter tensors in declaration order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    arch: Architecture,
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ModelParams {
    pub fn empty(arch: Architecture) -> Result<Self, ModelError> {
        arch.validate()?;
        Ok(Self {
            arch,
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        })
    }

    pub fn init(arch: Architecture, components: &[Component], seed: u64) -> Result<Self, ModelError> {
        let mut p = Self::empty(arch)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for &c in components {
            p.add_component(c, &mut rng)?;
        }
        Ok(p)
    }

    /// Adds freshly initialized layers for `c`. Hidden weights use the
    /// uniform fan-in bound `sqrt(6 / fan_in)`, output weights a tenth of
    /// `sqrt(3 / fan_in)`. Biases start at zero except the decoder output,
    /// which starts at the centre of the unit cube.
    pub fn add_component<R: Rng>(&mut self, c: Component, rng: &mut R) -> Result<(), ModelError> {
        if self.has(c) {
            return Err(ModelError::Architecture(format!("{c} already present")));
        }
        let layers = self.arch.layers(c);
        let count = layers.len();
        for (k, (name, fan_in, fan_out, _)) in layers.into_iter().enumerate() {
            let is_output = k + 1 == count;
            let bound = if is_output {
                0.1 * (3.0 / fan_in as f64).sqrt()
            } else {
                (6.0 / fan_in as f64).sqrt()
            };
            let w = Tensor::from_shape_fn((fan_in, fan_out), |_| snap(rng.random_range(-bound..bound)));
            let fill = if is_output && c == Component::Decoder { 0.5 } else { 0.0 };
            self.push(format!("{name}.weight"), w);
            self.push(format!("{name}.bias"), Tensor::from_elem((1, fan_out), fill));
        }
        Ok(())
    }

    fn push(&mut self, name: String, t: Tensor) {
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(t);
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn has(&self, c: Component) -> bool {
        self.names.iter().any(|n| Component::of(n) == Some(c))
    }

    pub fn components(&self) -> Vec<Component> {
        Component::ALL.into_iter().filter(|&c| self.has(c)).collect()
    }

    pub fn component_of(&self, i: usize) -> Component {
        Component::of(&self.names[i]).expect("parameter names carry a component prefix")
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    /// Drops every tensor belonging to `c`.
    pub fn remove(&mut self, c: Component) {
        let keep: Vec<bool> = (0..self.len()).map(|i| self.component_of(i) != c).collect();
        let mut k = keep.iter();
        self.names.retain(|_| *k.next().unwrap());
        let mut k = keep.iter();
        self.tensors.retain(|_| *k.next().unwrap());
        self.reindex();
    }

    /// Copies the tensors of `c` from `other`, replacing any present here.
    pub fn adopt(&mut self, other: &ModelParams, c: Component) -> Result<(), ModelError> {
        if !other.has(c) {
            return Err(ModelError::Missing(c));
        }
        if other.arch.layers(c) != self.arch.layers(c) {
            return Err(ModelError::Architecture(format!("{c} layer shapes differ")));
        }
        self.remove(c);
        for i in 0..other.len() {
            if other.component_of(i) == c {
                self.push(other.names[i].clone(), other.tensors[i].clone());
            }
        }
        Ok(())
    }

    fn reindex(&mut self) {
        self.index = self.names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
    }

    /// Adds `delta[i]` to tensor `i` and snaps the result to `f32`.
    pub fn update(&mut self, i: usize, delta: &Tensor) {
        self.tensors[i].zip_mut_with(delta, |p, d| *p = snap(*p + d));
    }

    pub fn bind(&self, tape: &mut Tape, trainable: &[Component]) -> Net<'_> {
        let vars = self
            .tensors
            .iter()
            .enumerate()
            .map(|(i, t)| {
                if trainable.contains(&self.component_of(i)) {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        Net { params: self, vars }
    }

    /// Latent vector of a cloud given as an `n x 3` tensor.
    pub fn encode(&self, cloud: &Tensor) -> Result<Vec<f64>, ModelError> {
        let mut tape = Tape::new();
        let net = self.bind(&mut tape, &[]);
        let x = tape.constant(cloud.clone());
        let h = net.encode(&mut tape, x)?;
        Ok(tape.value(h).iter().copied().collect())
    }

    pub fn decode(&self, latent: &[f64]) -> Result<Tensor, ModelError> {
        let mut tape = Tape::new();
        let net = self.bind(&mut tape, &[]);
        let h = tape.constant(row(latent));
        let out = net.decode(&mut tape, h)?;
        Ok(tape.value(out).clone())
    }

    pub fn reward(&self, latent: &[f64]) -> Result<f64, ModelError> {
        let mut tape = Tape::new();
        let net = self.bind(&mut tape, &[]);
        let h = tape.constant(row(latent));
        let r = net.reward(&mut tape, h)?;
        Ok(tape.scalar_value(r))
    }

    pub fn forward_model(&self, latent: &[f64], action: &[f64]) -> Result<Vec<f64>, ModelError> {
        let mut tape = Tape::new();
        let net = self.bind(&mut tape, &[]);
        let h = tape.constant(row(latent));
        let a = tape.constant(row(action));
        let out = net.forward_model(&mut tape, h, a)?;
        Ok(tape.value(out).iter().copied().collect())
    }

    pub fn inverse_model(&self, latent: &[f64], next: &[f64]) -> Result<Vec<f64>, ModelError> {
        let mut tape = Tape::new();
        let net = self.bind(&mut tape, &[]);
        let h0 = tape.constant(row(latent));
        let h1 = tape.constant(row(next));
        let out = net.inverse_model(&mut tape, h0, h1)?;
        Ok(tape.value(out).iter().copied().collect())
    }

    pub fn policy_act(&self, features: &[f64]) -> Result<Vec<f64>, ModelError> {
        let mut tape = Tape::new();
        let net = self.bind(&mut tape, &[]);
        let f = tape.constant(row(features));
        let out = net.policy(&mut tape, f)?;
        Ok(tape.value(out).iter().copied().collect())
    }

    /// Writes the checkpoint: a text header followed by little-endian `f32`
    /// blobs in declaration order.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), ModelError> {
        let arch = serde_json::to_string(&self.arch).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        writeln!(w, "{MAGIC}")?;
        writeln!(w, "endian little")?;
        writeln!(w, "dtype f32")?;
        writeln!(w, "arch {arch}")?;
        writeln!(w, "tensors {}", self.len())?;
        for (n, t) in self.names.iter().zip(&self.tensors) {
            writeln!(w, "{n} {} {}", t.nrows(), t.ncols())?;
        }
        writeln!(w, "end")?;
        for t in &self.tensors {
            let mut buf = Vec::with_capacity(4 * t.len());
            for &x in t.iter() {
                buf.extend_from_slice(&(x as f32).to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, ModelError> {
        let bad = |m: String| ModelError::Checkpoint(m);
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let mut header = Vec::new();
        let mut pos = 0;
        loop {
            let end = bytes[pos..]
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| bad("truncated header".into()))?;
            let line = std::str::from_utf8(&bytes[pos..pos + end]).map_err(|e| bad(e.to_string()))?;
            pos += end + 1;
            if line == "end" {
                break;
            }
            header.push(line.to_string());
        }
        let mut lines = header.iter();
        let mut expect = |key: &str| -> Result<String, ModelError> {
            let line = lines.next().ok_or_else(|| bad(format!("missing {key}")))?;
            if line == key {
                return Ok(String::new());
            }
            line.strip_prefix(&format!("{key} "))
                .map(str::to_string)
                .ok_or_else(|| bad(format!("expected {key}, found {line:?}")))
        };
        expect(MAGIC)?;
        if expect("endian")? != "little" {
            return Err(bad("unsupported endianness".into()));
        }
        if expect("dtype")? != "f32" {
            return Err(bad("unsupported dtype".into()));
        }
        let arch: Architecture = serde_json::from_str(&expect("arch")?).map_err(|e| bad(e.to_string()))?;
        let count: usize = expect("tensors")?.parse().map_err(|_| bad("bad tensor count".into()))?;
        let mut p = Self::empty(arch)?;
        let mut shapes = Vec::with_capacity(count);
        for _ in 0..count {
            let line = lines.next().ok_or_else(|| bad("missing tensor line".into()))?;
            let f: Vec<&str> = line.split(' ').collect();
            let dims = (f.len() == 3)
                .then(|| Some((f[1].parse::<usize>().ok()?, f[2].parse::<usize>().ok()?)))
                .flatten();
            let (rows, cols) = dims.ok_or_else(|| bad(format!("bad tensor line {line:?}")))?;
            if Component::of(f[0]).is_none() {
                return Err(bad(format!("unknown component in {:?}", f[0])));
            }
            shapes.push((f[0].to_string(), rows, cols));
        }
        if lines.next().is_some() {
            return Err(bad("trailing header lines".into()));
        }
        for (name, rows, cols) in shapes {
            let n = rows * cols * 4;
            if bytes.len() < pos + n {
                return Err(bad(format!("blob for {name} truncated")));
            }
            let data = bytes[pos..pos + n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            pos += n;
            let t = Tensor::from_shape_vec((rows, cols), data).map_err(|e| bad(e.to_string()))?;
            p.push(name, t);
        }
        if pos != bytes.len() {
            return Err(bad("trailing bytes after blobs".into()));
        }
        p.check_shapes()?;
        Ok(p)
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        Self::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }

    fn check_shapes(&self) -> Result<(), ModelError> {
        for c in self.components() {
            for (name, fan_in, fan_out, _) in self.arch.layers(c) {
                for (suffix, dim) in [("weight", (fan_in, fan_out)), ("bias", (1, fan_out))] {
                    let key = format!("{name}.{suffix}");
                    match self.get(&key) {
                        Some(t) if t.dim() == dim => {}
                        Some(t) => {
                            return Err(ModelError::Checkpoint(format!(
                                "{key} has shape {:?}, expected {dim:?}",
                                t.dim()
                            )))
                        }
                        None => return Err(ModelError::Checkpoint(format!("{key} missing"))),
                    }
                }
            }
        }
        Ok(())
    }
}

fn row(v: &[f64]) -> Tensor {
    Tensor::from_shape_vec((1, v.len()), v.to_vec()).expect("row shape")
}

/// Parameters bound to a tape.
pub struct Net<'a> {
    params: &'a ModelParams,
    vars: Vec<Var>,
}

impl<'a> Net<'a> {
    /// Uses existing tape variables, one per tensor of `params` in
    /// declaration order.
    pub fn from_vars(params: &'a ModelParams, vars: Vec<Var>) -> Result<Self, ModelError> {
        if vars.len() != params.len() {
            return Err(ModelError::Dimension {
                what: "bound variables",
                expected: params.len(),
                got: vars.len(),
            });
        }
        Ok(Self { params, vars })
    }

    pub fn params(&self) -> &'a ModelParams {
        self.params
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    fn var(&self, name: &str) -> Var {
        self.vars[self.params.index[name]]
    }

    fn dense(&self, tape: &mut Tape, x: Var, layer: &str, act: bool) -> Result<Var, ModelError> {
        let w = self.var(&format!("{layer}.weight"));
        let b = self.var(&format!("{layer}.bias"));
        let y = tape.linear(x, w, b)?;
        Ok(if act { tape.relu(y)? } else { y })
    }

    fn mlp(&self, tape: &mut Tape, c: Component, x: Var) -> Result<Var, ModelError> {
        if !self.params.has(c) {
            return Err(ModelError::Missing(c));
        }
        let layers = self.params.arch.layers(c);
        let mut h = x;
        for (name, _, _, last) in &layers {
            h = self.dense(tape, h, name, !last)?;
        }
        Ok(h)
    }

    fn expect_cols(tape: &Tape, v: Var, what: &'static str, expected: usize) -> Result<(), ModelError> {
        let got = tape.value(v).ncols();
        if got != expected {
            return Err(ModelError::Dimension { what, expected, got });
        }
        Ok(())
    }

    /// `n x 3` cloud to a `1 x d_latent` latent.
    pub fn encode(&self, tape: &mut Tape, cloud: Var) -> Result<Var, ModelError> {
        if !self.params.has(Component::Encoder) {
            return Err(ModelError::Missing(Component::Encoder));
        }
        let n = tape.value(cloud).nrows();
        if n == 0 {
            return Err(ModelError::EmptyCloud);
        }
        Self::expect_cols(tape, cloud, "point dimension", 3)?;
        let mut point = Vec::new();
        let mut global = Vec::new();
        let mut head = None;
        for (name, _, _, last) in self.params.arch.layers(Component::Encoder) {
            if name.starts_with("encoder.point") {
                point.push((name, last));
            } else if name.starts_with("encoder.global") {
                global.push(name);
            } else {
                head = Some(name);
            }
        }
        let mut h = cloud;
        for (name, last) in &point {
            h = self.dense(tape, h, name, !last)?;
        }
        let pooled = tape.max_rows(h)?;
        let spread = tape.repeat_rows(pooled, n)?;
        let mut h = tape.concat_cols(&[h, spread])?;
        for name in &global {
            h = self.dense(tape, h, name, true)?;
        }
        let pooled = tape.max_rows(h)?;
        self.dense(tape, pooled, &head.expect("encoder head layer"), false)
    }

    /// `1 x d_latent` latent to an `n_points x 3` cloud.
    pub fn decode(&self, tape: &mut Tape, latent: Var) -> Result<Var, ModelError> {
        Self::expect_cols(tape, latent, "latent dimension", self.params.arch.d_latent)?;
        let flat = self.mlp(tape, Component::Decoder, latent)?;
        let rows = tape.value(flat).nrows();
        if rows != 1 {
            return Err(ModelError::Dimension {
                what: "decoder batch",
                expected: 1,
                got: rows,
            });
        }
        Ok(tape.reshape(flat, self.params.arch.n_points, 3)?)
    }

    /// Row batch of latents to a column of rewards.
    pub fn reward(&self, tape: &mut Tape, latent: Var) -> Result<Var, ModelError> {
        Self::expect_cols(tape, latent, "latent dimension", self.params.arch.d_latent)?;
        self.mlp(tape, Component::Reward, latent)
    }

    pub fn forward_model(&self, tape: &mut Tape, latent: Var, action: Var) -> Result<Var, ModelError> {
        let a = &self.params.arch;
        Self::expect_cols(tape, latent, "latent dimension", a.d_latent)?;
        Self::expect_cols(tape, action, "action dimension", a.action_dim)?;
        let x = tape.concat_cols(&[latent, action])?;
        self.mlp(tape, Component::Forward, x)
    }

    pub fn inverse_model(&self, tape: &mut Tape, latent: Var, next: Var) -> Result<Var, ModelError> {
        let d = self.params.arch.d_latent;
        Self::expect_cols(tape, latent, "latent dimension", d)?;
        Self::expect_cols(tape, next, "latent dimension", d)?;
        let x = tape.concat_cols(&[latent, next])?;
        self.mlp(tape, Component::Inverse, x)
    }

    /// Action in `[-action_bound, action_bound]` from concatenated features.
    pub fn policy(&self, tape: &mut Tape, features: Var) -> Result<Var, ModelError> {
        let a = &self.params.arch;
        Self::expect_cols(tape, features, "policy features", a.policy_input)?;
        let raw = self.mlp(tape, Component::Policy, features)?;
        let t = tape.tanh(raw)?;
        Ok(tape.scale(t, a.action_bound)?)
    }

    /// Gradients for every tensor; `None` for frozen ones.
    pub fn grads(&self, bundle: &GradBundle) -> Vec<Option<Tensor>> {
        self.vars.iter().map(|&v| bundle.try_get(v).cloned()).collect()
    }
}

/// Sums per-tensor gradients in place.
pub fn accumulate(into: &mut Vec<Option<Tensor>>, grads: Vec<Option<Tensor>>) {
    if into.is_empty() {
        *into = grads;
        return;
    }
    for (acc, g) in into.iter_mut().zip(grads) {
        match (acc.as_mut(), g) {
            (Some(a), Some(g)) => *a += &g,
            (None, Some(g)) => *acc = Some(g),
            _ => {}
        }
    }
}

/// Rescales gradients so their global norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Option<Tensor>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .map(|g| g.iter().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            g.mapv_inplace(|x| x * s);
        }
    }
    norm
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with per-tensor moment buffers. Tensors whose gradient is `None`
/// are left untouched.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<Option<Tensor>>,
    v: Vec<Option<Tensor>>,
    t: Vec<u32>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            m: Vec::new(),
            v: Vec::new(),
            t: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &[Option<Tensor>]) -> Result<(), ModelError> {
        if grads.len() != params.len() {
            return Err(ModelError::Dimension {
                what: "gradient count",
                expected: params.len(),
                got: grads.len(),
            });
        }
        if self.m.len() != params.len() {
            self.m = vec![None; params.len()];
            self.v = vec![None; params.len()];
            self.t = vec![0; params.len()];
        }
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let m = self.m[i].get_or_insert_with(|| Tensor::zeros(g.dim()));
            let v = self.v[i].get_or_insert_with(|| Tensor::zeros(g.dim()));
            self.t[i] += 1;
            let t = self.t[i] as i32;
            let c1 = 1.0 - beta1.powi(t);
            let c2 = 1.0 - beta2.powi(t);
            m.zip_mut_with(g, |m, &g| *m = beta1 * *m + (1.0 - beta1) * g);
            v.zip_mut_with(g, |v, &g| *v = beta2 * *v + (1.0 - beta2) * g * g);
            let mut delta = m.clone();
            delta.zip_mut_with(v, |d, &v| *d = -lr * (*d / c1) / ((v / c2).sqrt() + eps));
            params.update(i, &delta);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layer_shapes_follow_widths() {
        let arch = Architecture::new(1024, 256, 3);
        let p = ModelParams::init(arch, &Component::ALL, 0).unwrap();
        let shape = |n: &str| p.get(n).unwrap().dim();
        assert_eq!(shape("encoder.point.0.weight"), (3, 128));
        assert_eq!(shape("encoder.point.1.weight"), (128, 256));
        assert_eq!(shape("encoder.global.0.weight"), (512, 512));
        assert_eq!(shape("encoder.head.weight"), (512, 256));
        assert_eq!(shape("decoder.0.weight"), (256, 1024));
        assert_eq!(shape("decoder.2.weight"), (1024, 3072));
        assert_eq!(shape("reward.2.weight"), (256, 1));
        assert_eq!(shape("forward.0.weight"), (259, 256));
        assert_eq!(shape("inverse.0.weight"), (512, 256));
        assert_eq!(shape("policy.2.weight"), (256, 3));
    }

    #[test]
    fn parameters_sit_on_f32_grid() {
        let p = ModelParams::init(Architecture::small(8, 4, 3), &Component::ALL, 3).unwrap();
        assert!(p.tensors().iter().flat_map(|t| t.iter()).all(|&x| snap(x) == x));
    }

    #[test]
    fn remove_and_adopt() {
        let arch = Architecture::small(8, 4, 3);
        let a = ModelParams::init(arch.clone(), &[Component::Encoder, Component::Reward], 1).unwrap();
        let mut b = ModelParams::init(arch, &[Component::Encoder], 2).unwrap();
        b.adopt(&a, Component::Reward).unwrap();
        assert_eq!(b.get("reward.0.weight"), a.get("reward.0.weight"));
        b.remove(Component::Encoder);
        assert_eq!(b.components(), vec![Component::Reward]);
        assert!(b.get("reward.1.bias").is_some());
    }

    #[test]
    fn clip_scales_to_max_norm() {
        let mut g = vec![Some(Tensor::from_elem((1, 4), 1.0)), None];
        let n = clip_grad_norm(&mut g, 1.0);
        assert!((n - 2.0).abs() < 1e-15);
        assert!(g[0].as_ref().unwrap().iter().all(|&x| (x - 0.5).abs() < 1e-15));
    }

    #[test]
    fn truncated_checkpoint_is_rejected() {
        let p = ModelParams::init(Architecture::small(8, 4, 3), &[Component::Reward], 1).unwrap();
        let mut buf = Vec::new();
        p.write_to(&mut buf).unwrap();
        buf.pop();
        assert!(matches!(
            ModelParams::read_from(&buf[..]),
            Err(ModelError::Checkpoint(_))
        ));
    }
}
