//! Coordinate network `alpha_theta(x)`.
//!
//! Voxel centres are mapped to `[-1, 1]^3`, lifted by a sinusoidal encoding
//! whose bands are faded in by the annealing weights, pushed through a ReLU
//! MLP with optional input re-injection (skip layers), and squashed into the
//! admissible diffusivity window by the output head.
//!
//! Backpropagation is hand-written over a per-chunk activation tape.

use std::f64::consts::PI;
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{s, Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::grid::{GridSpec, ScalarField3D};
use crate::io::ByteReader;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncodingConfig {
    pub num_freqs: usize,
    pub include_raw: bool,
    pub anneal_beta: f64,
}

impl EncodingConfig {
    /// All bands fully open.
    pub fn full(num_freqs: usize) -> Self {
        Self {
            num_freqs,
            include_raw: false,
            anneal_beta: num_freqs as f64,
        }
    }

    pub fn encoded_dim(&self) -> usize {
        6 * self.num_freqs + if self.include_raw { 3 } else { 0 }
    }
}

/// `w_k = (1 - cos(pi * clamp(beta - k, 0, 1))) / 2`.
pub fn annealing_weights(beta: f64, num_freqs: usize) -> Vec<f64> {
    (0..num_freqs)
        .map(|k| (1.0 - (PI * (beta - k as f64).clamp(0.0, 1.0)).cos()) / 2.0)
        .collect()
}

/// Per axis: `w_k sin(2^k pi x), w_k cos(2^k pi x)` for `k = 0..L`, raw coordinates first if enabled.
pub fn positional_encoding(x: [f64; 3], cfg: &EncodingConfig) -> Vec<f64> {
    let w = annealing_weights(cfg.anneal_beta, cfg.num_freqs);
    let mut out = Vec::with_capacity(cfg.encoded_dim());
    encode_into(x, cfg, &w, &mut out);
    out
}

fn encode_into(x: [f64; 3], cfg: &EncodingConfig, weights: &[f64], out: &mut Vec<f64>) {
    if cfg.include_raw {
        out.extend_from_slice(&x);
    }
    for xa in x {
        let mut freq = PI;
        for w in weights {
            let phase = freq * xa;
            out.push(w * phase.sin());
            out.push(w * phase.cos());
            freq *= 2.0;
        }
    }
}

/// Voxel centre mapped to `[-1, 1]^3` as `(2i + 1) / n - 1`, so refining a grid by an
/// odd factor reproduces coincident centres bit for bit.
pub fn normalized_center(grid: &GridSpec, i: usize, j: usize, k: usize) -> [f64; 3] {
    [
        (2 * i + 1) as f64 / grid.nx as f64 - 1.0,
        (2 * j + 1) as f64 / grid.ny as f64 - 1.0,
        (2 * k + 1) as f64 / grid.nz as f64 - 1.0,
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputHead {
    /// `alpha_min + (alpha_max - alpha_min) * sigmoid(f)`.
    ScaledSigmoid,
    /// `min(softplus(f + c), alpha_max)` with `c` chosen so `f = 0` maps to the window midpoint.
    Softplus,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Architecture {
    pub in_dim: usize,
    pub width: usize,
    /// Number of hidden ReLU layers.
    pub depth: usize,
    /// Hidden layers whose input is `[previous activation, encoding]`.
    pub skip_layers: Vec<usize>,
    pub head: OutputHead,
    pub alpha_min: f64,
    pub alpha_max: f64,
}

impl Architecture {
    /// Ten hidden layers of 512, skip at layer 4, bounds `[0.003, 0.25]`.
    pub fn reference(in_dim: usize) -> Self {
        Self {
            in_dim,
            width: 512,
            depth: 10,
            skip_layers: vec![4],
            head: OutputHead::ScaledSigmoid,
            alpha_min: 0.003,
            alpha_max: 0.25,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_dim == 0 || self.width == 0 || self.depth == 0 {
            return Err(Error::Domain(format!(
                "degenerate architecture: in {} width {} depth {}",
                self.in_dim, self.width, self.depth
            )));
        }
        if !(self.alpha_min > 0.0 && self.alpha_min < self.alpha_max) {
            return Err(Error::Domain(format!(
                "need 0 < alpha_min < alpha_max, got {} and {}",
                self.alpha_min, self.alpha_max
            )));
        }
        if let Some(&s) = self
            .skip_layers
            .iter()
            .find(|&&s| s == 0 || s >= self.depth)
        {
            return Err(Error::Domain(format!(
                "skip layer {s} must be within 1..{}",
                self.depth
            )));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` for every linear layer, output layer last.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut shapes = Vec::with_capacity(self.depth + 1);
        for l in 0..self.depth {
            let fan_in = if l == 0 {
                self.in_dim
            } else if self.skip_layers.contains(&l) {
                self.width + self.in_dim
            } else {
                self.width
            };
            shapes.push((fan_in, self.width));
        }
        shapes.push((self.width, 1));
        shapes
    }

    pub fn param_count(&self) -> usize {
        self.layer_shapes().iter().map(|(i, o)| i * o + o).sum()
    }

    fn softplus_shift(&self) -> f64 {
        let mid = 0.5 * (self.alpha_min + self.alpha_max);
        // inverse softplus
        mid.exp_m1().ln()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `(fan_out, fan_in)`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

static NEXT_PARAMS_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_PARAMS_ID.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug)]
pub struct NeuralFieldParams {
    arch: Architecture,
    layers: Vec<Dense>,
    /// Changes on every mutation; tapes remember it to detect staleness.
    id: u64,
}

impl Clone for NeuralFieldParams {
    fn clone(&self) -> Self {
        Self {
            arch: self.arch.clone(),
            layers: self.layers.clone(),
            id: fresh_id(),
        }
    }
}

impl PartialEq for NeuralFieldParams {
    fn eq(&self, other: &Self) -> bool {
        self.arch == other.arch && self.layers == other.layers
    }
}

/// Uniform Xavier weights in `+-sqrt(6 / (fan_in + fan_out))`, zero biases.
pub fn xavier_init(arch: &Architecture, seed: u64) -> Result<NeuralFieldParams> {
    arch.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = arch
        .layer_shapes()
        .into_iter()
        .map(|(fan_in, fan_out)| {
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            Dense {
                weight: Array2::from_shape_simple_fn((fan_out, fan_in), || {
                    rng.random_range(-bound..=bound)
                }),
                bias: Array1::zeros(fan_out),
            }
        })
        .collect();
    Ok(NeuralFieldParams {
        arch: arch.clone(),
        layers,
        id: fresh_id(),
    })
}

impl NeuralFieldParams {
    pub fn zeros(arch: &Architecture) -> Result<Self> {
        arch.validate()?;
        let layers = arch
            .layer_shapes()
            .into_iter()
            .map(|(i, o)| Dense {
                weight: Array2::zeros((o, i)),
                bias: Array1::zeros(o),
            })
            .collect();
        Ok(Self {
            arch: arch.clone(),
            layers,
            id: fresh_id(),
        })
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        self.id = fresh_id();
        &mut self.layers
    }

    /// Weights row-major then biases, layer by layer.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.arch.param_count());
        for l in &self.layers {
            out.extend(l.weight.iter());
            out.extend(l.bias.iter());
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.arch.param_count() {
            return Err(Error::Shape(format!(
                "{} parameters for an architecture of {}",
                flat.len(),
                self.arch.param_count()
            )));
        }
        let mut it = flat.iter().copied();
        for l in self.layers_mut() {
            for w in l.weight.iter_mut() {
                *w = it.next().expect("length checked");
            }
            for b in l.bias.iter_mut() {
                *b = it.next().expect("length checked");
            }
        }
        Ok(())
    }

    /// Named flat ranges, for diagnostics.
    pub fn blocks(&self) -> Vec<(String, std::ops::Range<usize>)> {
        let mut out = Vec::new();
        let mut start = 0;
        let n = self.layers.len();
        for (idx, l) in self.layers.iter().enumerate() {
            let name = if idx + 1 == n {
                "output".to_string()
            } else {
                format!("hidden{idx}")
            };
            out.push((format!("{name}.weight"), start..start + l.weight.len()));
            start += l.weight.len();
            out.push((format!("{name}.bias"), start..start + l.bias.len()));
            start += l.bias.len();
        }
        out
    }

    fn check_encoding(&self, enc: &EncodingConfig) -> Result<()> {
        if enc.encoded_dim() != self.arch.in_dim {
            return Err(Error::Shape(format!(
                "encoding produces {} features, first layer expects {}",
                enc.encoded_dim(),
                self.arch.in_dim
            )));
        }
        Ok(())
    }

    /// Network output `f` for a batch of encoded inputs, keeping each layer's input.
    fn forward_batch(&self, enc: Array2<f64>, keep: bool) -> (Array1<f64>, Vec<Array2<f64>>) {
        let depth = self.arch.depth;
        let mut inputs = Vec::with_capacity(depth + 1);
        let mut h = enc.clone();
        for (l, layer) in self.layers[..depth].iter().enumerate() {
            let x = if l > 0 && self.arch.skip_layers.contains(&l) {
                ndarray::concatenate(Axis(1), &[h.view(), enc.view()]).expect("row counts match")
            } else {
                h
            };
            let mut z = x.dot(&layer.weight.t());
            z += &layer.bias;
            z.mapv_inplace(|v| v.max(0.0));
            if keep {
                inputs.push(x);
            }
            h = z;
        }
        let out = &self.layers[depth];
        let f = h.dot(&out.weight.row(0)) + out.bias[0];
        if keep {
            inputs.push(h);
        }
        (f, inputs)
    }

    /// `alpha_theta` at one normalized coordinate.
    pub fn eval_point(&self, x: [f64; 3], enc: &EncodingConfig) -> Result<f64> {
        self.check_encoding(enc)?;
        let row = positional_encoding(x, enc);
        let batch = Array2::from_shape_vec((1, row.len()), row).expect("shape");
        let (f, _) = self.forward_batch(batch, false);
        Ok(head(&self.arch, f[0]).0)
    }
}

const SIGMOID_FLOOR: f64 = 1e-15;

#[inline]
fn sigmoid(f: f64) -> f64 {
    if f >= 0.0 {
        1.0 / (1.0 + (-f).exp())
    } else {
        let e = f.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn softplus(f: f64) -> f64 {
    if f > 30.0 {
        f
    } else {
        f.exp().ln_1p()
    }
}

/// `(alpha, dalpha/df)`. The sigmoid is kept `1e-15` away from 0 and 1 so the
/// bracket stays strict after rounding.
#[inline]
fn head(arch: &Architecture, f: f64) -> (f64, f64) {
    match arch.head {
        OutputHead::ScaledSigmoid => {
            let span = arch.alpha_max - arch.alpha_min;
            let s = sigmoid(f);
            let clamped = s.clamp(SIGMOID_FLOOR, 1.0 - SIGMOID_FLOOR);
            (arch.alpha_min + span * clamped, span * s * (1.0 - s))
        }
        OutputHead::Softplus => {
            let u = f + arch.softplus_shift();
            let a = softplus(u);
            if a >= arch.alpha_max {
                (arch.alpha_max, 0.0)
            } else {
                (a.max(f64::MIN_POSITIVE), sigmoid(u))
            }
        }
    }
}

pub const DEFAULT_CHUNK: usize = 8192;

#[derive(Debug)]
struct ChunkTape {
    start: usize,
    inputs: Vec<Array2<f64>>,
    dalpha_df: Array1<f64>,
}

/// Activations recorded by [`field_forward`] for one parameter state and grid.
#[derive(Debug)]
pub struct ForwardTape {
    params_id: u64,
    grid: GridSpec,
    chunks: Vec<ChunkTape>,
}

pub fn field_forward(
    theta: &NeuralFieldParams,
    grid: &GridSpec,
    enc: &EncodingConfig,
) -> Result<(ScalarField3D, ForwardTape)> {
    field_forward_chunked(theta, grid, enc, DEFAULT_CHUNK)
}

fn encoded_rows(
    grid: &GridSpec,
    enc: &EncodingConfig,
    weights: &[f64],
    range: std::ops::Range<usize>,
) -> Array2<f64> {
    let dim = enc.encoded_dim();
    // The encoding separates per axis, so each coordinate value is encoded once.
    let axis_block = |n: usize| -> Vec<Vec<f64>> {
        (0..n)
            .map(|i| {
                let x = (2 * i + 1) as f64 / n as f64 - 1.0;
                let mut out = Vec::with_capacity(2 * weights.len());
                let mut freq = PI;
                for w in weights {
                    let phase = freq * x;
                    out.push(w * phase.sin());
                    out.push(w * phase.cos());
                    freq *= 2.0;
                }
                out
            })
            .collect()
    };
    let (bx, by, bz) = (axis_block(grid.nx), axis_block(grid.ny), axis_block(grid.nz));
    let mut flat = Vec::with_capacity(range.len() * dim);
    for v in range.clone() {
        let (i, j, k) = grid.coords(v);
        if enc.include_raw {
            flat.extend_from_slice(&normalized_center(grid, i, j, k));
        }
        flat.extend_from_slice(&bx[i]);
        flat.extend_from_slice(&by[j]);
        flat.extend_from_slice(&bz[k]);
    }
    Array2::from_shape_vec((range.len(), dim), flat).expect("shape")
}

/// Evaluates the field at every voxel centre, `chunk` voxels at a time.
pub fn field_forward_chunked(
    theta: &NeuralFieldParams,
    grid: &GridSpec,
    enc: &EncodingConfig,
    chunk: usize,
) -> Result<(ScalarField3D, ForwardTape)> {
    theta.check_encoding(enc)?;
    let chunk = chunk.max(1);
    let weights = annealing_weights(enc.anneal_beta, enc.num_freqs);
    let n = grid.len();
    let mut alpha = Vec::with_capacity(n);
    let mut chunks = Vec::with_capacity(n.div_ceil(chunk));
    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        let x = encoded_rows(grid, enc, &weights, start..end);
        let (f, inputs) = theta.forward_batch(x, true);
        let mut dadf = Array1::zeros(f.len());
        for (r, &fv) in f.iter().enumerate() {
            let (a, d) = head(&theta.arch, fv);
            alpha.push(a);
            dadf[r] = d;
        }
        chunks.push(ChunkTape {
            start,
            inputs,
            dalpha_df: dadf,
        });
        start = end;
    }
    let field = ScalarField3D::from_vec(*grid, alpha)?;
    Ok((
        field,
        ForwardTape {
            params_id: theta.id,
            grid: *grid,
            chunks,
        },
    ))
}

/// Same structure as the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub layers: Vec<Dense>,
}

impl ParamGrads {
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend(l.weight.iter());
            out.extend(l.bias.iter());
        }
        out
    }
}

/// `dL/dtheta = sum_v grad_alpha[v] * dalpha(x_v)/dtheta`.
pub fn field_backward(
    theta: &NeuralFieldParams,
    tape: &ForwardTape,
    grad_alpha: &ScalarField3D,
) -> Result<ParamGrads> {
    if tape.params_id != theta.id {
        return Err(Error::StaleTape(
            "parameters changed since the forward pass".into(),
        ));
    }
    if tape.grid != *grad_alpha.grid() {
        return Err(Error::StaleTape(format!(
            "tape grid {} differs from gradient grid {}",
            tape.grid.describe(),
            grad_alpha.grid().describe()
        )));
    }
    let arch = &theta.arch;
    let depth = arch.depth;
    let mut grads: Vec<Dense> = theta
        .layers
        .iter()
        .map(|l| Dense {
            weight: Array2::zeros(l.weight.raw_dim()),
            bias: Array1::zeros(l.bias.len()),
        })
        .collect();
    let ga = grad_alpha.data();

    for c in &tape.chunks {
        let rows = c.dalpha_df.len();
        let gf = Array1::from_shape_fn(rows, |r| ga[c.start + r] * c.dalpha_df[r]);

        let h_last = &c.inputs[depth];
        let out = &theta.layers[depth];
        {
            let g = &mut grads[depth];
            let dw = gf.dot(h_last);
            g.weight.row_mut(0).scaled_add(1.0, &dw);
            g.bias[0] += gf.sum();
        }
        // dL/dh for the last hidden layer: gf (rows) outer w_out (width)
        let mut dh = gf
            .insert_axis(Axis(1))
            .dot(&out.weight.slice(s![0..1, ..]));

        for l in (0..depth).rev() {
            let x = &c.inputs[l];
            let post = if l + 1 < depth {
                let nxt = &c.inputs[l + 1];
                nxt.slice(s![.., 0..arch.width]).to_owned()
            } else {
                c.inputs[depth].clone()
            };
            // ReLU mask from the post-activation
            let mut dz = dh;
            ndarray::Zip::from(&mut dz)
                .and(&post)
                .for_each(|d, &p| {
                    if p <= 0.0 {
                        *d = 0.0
                    }
                });
            let layer = &theta.layers[l];
            {
                let g = &mut grads[l];
                g.weight += &dz.t().dot(x);
                g.bias += &dz.sum_axis(Axis(0));
            }
            if l == 0 {
                break;
            }
            let dx = dz.dot(&layer.weight);
            dh = dx.slice(s![.., 0..arch.width]).to_owned();
        }
    }
    Ok(ParamGrads { layers: grads })
}

pub const PARAMS_MAGIC: &[u8; 4] = b"NFTP";
pub const PARAMS_VERSION: u32 = 1;

/// `NFTP` checkpoint: magic, version, layer shapes, skip set, head, bounds,
/// encoding, then every parameter as little-endian f64 (weights row-major, then biases).
pub fn encode_params(theta: &NeuralFieldParams, enc: &EncodingConfig) -> Vec<u8> {
    let arch = &theta.arch;
    let shapes = arch.layer_shapes();
    let mut out = Vec::new();
    out.extend_from_slice(PARAMS_MAGIC);
    out.extend_from_slice(&PARAMS_VERSION.to_le_bytes());
    out.extend_from_slice(&(shapes.len() as u32).to_le_bytes());
    for (i, o) in &shapes {
        out.extend_from_slice(&(*i as u32).to_le_bytes());
        out.extend_from_slice(&(*o as u32).to_le_bytes());
    }
    out.extend_from_slice(&(arch.skip_layers.len() as u32).to_le_bytes());
    for s in &arch.skip_layers {
        out.extend_from_slice(&(*s as u32).to_le_bytes());
    }
    out.push(match arch.head {
        OutputHead::ScaledSigmoid => 0,
        OutputHead::Softplus => 1,
    });
    out.extend_from_slice(&arch.alpha_min.to_le_bytes());
    out.extend_from_slice(&arch.alpha_max.to_le_bytes());
    out.extend_from_slice(&(enc.num_freqs as u32).to_le_bytes());
    out.push(enc.include_raw as u8);
    for p in theta.to_flat() {
        out.extend_from_slice(&p.to_le_bytes());
    }
    out
}

/// Inverse of [`encode_params`]; the returned encoding has all bands open.
pub fn decode_params(bytes: &[u8]) -> Result<(NeuralFieldParams, EncodingConfig)> {
    let mut r = ByteReader::new(bytes);
    r.magic(PARAMS_MAGIC)?;
    let version = r.u32("version")?;
    if version != PARAMS_VERSION {
        return Err(Error::Format {
            field: "version",
            message: format!("unsupported version {version}"),
        });
    }
    let n_layers = r.u32("n_layers")? as usize;
    if n_layers < 2 {
        return Err(Error::Format {
            field: "n_layers",
            message: format!("{n_layers} layers, need at least 2"),
        });
    }
    let mut shapes = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        shapes.push((r.u32("layer_in")? as usize, r.u32("layer_out")? as usize));
    }
    let n_skip = r.u32("n_skip")? as usize;
    let mut skip_layers = Vec::with_capacity(n_skip);
    for _ in 0..n_skip {
        skip_layers.push(r.u32("skip_layer")? as usize);
    }
    let head = match r.u8("head")? {
        0 => OutputHead::ScaledSigmoid,
        1 => OutputHead::Softplus,
        h => {
            return Err(Error::Format {
                field: "head",
                message: format!("unknown head tag {h}"),
            })
        }
    };
    let alpha_min = r.f64("alpha_min")?;
    let alpha_max = r.f64("alpha_max")?;
    let num_freqs = r.u32("num_freqs")? as usize;
    let include_raw = r.u8("include_raw")? != 0;
    let enc = EncodingConfig {
        num_freqs,
        include_raw,
        anneal_beta: num_freqs as f64,
    };
    let arch = Architecture {
        in_dim: shapes[0].0,
        width: shapes[0].1,
        depth: n_layers - 1,
        skip_layers,
        head,
        alpha_min,
        alpha_max,
    };
    if arch.layer_shapes() != shapes {
        return Err(Error::Format {
            field: "layer_shapes",
            message: "layer sizes inconsistent with width/skip set".into(),
        });
    }
    arch.validate().map_err(|e| Error::Format {
        field: "architecture",
        message: e.to_string(),
    })?;
    let flat = r.payload(arch.param_count())?;
    let mut theta = NeuralFieldParams::zeros(&arch)?;
    theta.set_flat(&flat)?;
    Ok((theta, enc))
}

pub fn write_params(
    theta: &NeuralFieldParams,
    enc: &EncodingConfig,
    path: impl AsRef<std::path::Path>,
) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_params(theta, enc)).map_err(|e| Error::io(path, e))
}

pub fn read_params(
    path: impl AsRef<std::path::Path>,
) -> Result<(NeuralFieldParams, EncodingConfig)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_params(&bytes)
}
