//! Transformer blocks built around token statistics attention.
//!
//! A block is pre-norm: `Z₁ = Z + attn(LN₁(Z))`, `out = Z₁ + MLP(LN₂(Z₁))`.
//! Models are ordered stacks of blocks and can be written to and read from a
//! small little-endian binary container (see [`encode_model`]).

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::causal::{causal_membership, causal_tssa_attention, CausalParams};
use crate::coding_rate::{expansion_rate, variational_compression, Membership, ProjectionBank, SpectralFn};
use crate::error::{dim_err, Result, TostError};
use crate::linalg::Matrix;
use crate::tssa::{estimate_membership, tssa_attention, TssaParams};

/// Variance floor inside layer normalization.
pub const LN_VAR_EPS: f64 = 1e-6;
/// Standard deviation of MLP weights at initialization.
pub const INIT_STD: f64 = 0.02;

/// Per-feature scale and shift.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub scale: Vec<f64>,
    pub shift: Vec<f64>,
}

impl Affine {
    pub fn identity(d: usize) -> Self {
        Self {
            scale: vec![1.0; d],
            shift: vec![0.0; d],
        }
    }
}

/// Standardizes every column over its `d` features, then applies `scale` and `shift`.
///
/// The standard deviation is floored at `sqrt(LN_VAR_EPS)`, so constant columns map to `shift`.
pub fn layer_norm(z: &Matrix, norm: &Affine) -> Result<Matrix> {
    let (d, n) = z.shape();
    if norm.scale.len() != d || norm.shift.len() != d {
        return dim_err(format!("layer norm of width {} on {d} features", norm.scale.len()));
    }
    let mut out = Matrix::zeros(d, n);
    for j in 0..n {
        let mean = (0..d).map(|r| z[(r, j)]).sum::<f64>() / d as f64;
        let var = (0..d).map(|r| (z[(r, j)] - mean).powi(2)).sum::<f64>() / d as f64;
        let std = var.max(LN_VAR_EPS).sqrt();
        for r in 0..d {
            out[(r, j)] = (z[(r, j)] - mean) / std * norm.scale[r] + norm.shift[r];
        }
    }
    Ok(out)
}

/// Exact GELU, `x Φ(x)`.
#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

/// `d/dx GELU(x) = Φ(x) + x φ(x)`.
#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

/// Column-wise two-layer MLP: `w2ᵀ GELU(w1ᵀ Z + b1) + b2`.
pub fn mlp_forward(z: &Matrix, w1: &Matrix, b1: &[f64], w2: &Matrix, b2: &[f64]) -> Result<Matrix> {
    let (d, h) = w1.shape();
    if z.rows() != d || b1.len() != h || w2.shape() != (h, d) || b2.len() != d {
        return dim_err(format!(
            "mlp shapes: z {:?}, w1 {:?}, b1 {}, w2 {:?}, b2 {}",
            z.shape(),
            w1.shape(),
            b1.len(),
            w2.shape(),
            b2.len()
        ));
    }
    let mut hidden = w1.t_matmul(z)?;
    for (i, &b) in b1.iter().enumerate() {
        for x in hidden.row_mut(i) {
            *x = gelu(*x + b);
        }
    }
    let mut out = w2.t_matmul(&hidden)?;
    for (r, &b) in b2.iter().enumerate() {
        for x in out.row_mut(r) {
            *x += b;
        }
    }
    Ok(out)
}

/// Which attention operator a block uses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Attention {
    Tssa(TssaParams),
    Causal(CausalParams),
}

impl Attention {
    pub fn base(&self) -> &TssaParams {
        match self {
            Attention::Tssa(p) => p,
            Attention::Causal(c) => &c.base,
        }
    }

    pub fn base_mut(&mut self) -> &mut TssaParams {
        match self {
            Attention::Tssa(p) => p,
            Attention::Causal(c) => &mut c.base,
        }
    }

    pub fn is_causal(&self) -> bool {
        matches!(self, Attention::Causal(_))
    }

    pub fn forward(&self, z: &Matrix, bank: &ProjectionBank) -> Result<Matrix> {
        match self {
            Attention::Tssa(p) => tssa_attention(z, bank, p),
            Attention::Causal(c) => causal_tssa_attention(z, bank, c),
        }
    }

    pub fn membership(&self, z: &Matrix, bank: &ProjectionBank) -> Result<Membership> {
        match self {
            Attention::Tssa(p) => estimate_membership(z, bank, p),
            Attention::Causal(c) => causal_membership(z, bank, c),
        }
    }
}

/// Parameters of one transformer block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockParams {
    pub bank: ProjectionBank,
    pub attention: Attention,
    /// `d x h`.
    pub mlp_w1: Matrix,
    /// `h x d`.
    pub mlp_w2: Matrix,
    pub mlp_b1: Vec<f64>,
    pub mlp_b2: Vec<f64>,
    pub norm1: Affine,
    pub norm2: Affine,
}

impl BlockParams {
    pub fn d(&self) -> usize {
        self.bank.d()
    }

    pub fn hidden(&self) -> usize {
        self.mlp_w1.cols()
    }

    fn validate(&self) -> Result<()> {
        let (d, h) = (self.d(), self.hidden());
        if h == 0 {
            return dim_err("MLP hidden width must be at least 1");
        }
        if self.mlp_w1.rows() != d
            || self.mlp_w2.shape() != (h, d)
            || self.mlp_b1.len() != h
            || self.mlp_b2.len() != d
            || self.norm1.scale.len() != d
            || self.norm1.shift.len() != d
            || self.norm2.scale.len() != d
            || self.norm2.shift.len() != d
        {
            return dim_err("block parameters have inconsistent shapes");
        }
        self.attention.base().validate(&self.bank)
    }

    /// Zeroes every MLP weight and bias, leaving the block attention-only.
    pub fn zero_mlp(&mut self) {
        self.mlp_w1 = Matrix::zeros(self.mlp_w1.rows(), self.mlp_w1.cols());
        self.mlp_w2 = Matrix::zeros(self.mlp_w2.rows(), self.mlp_w2.cols());
        self.mlp_b1.iter_mut().for_each(|x| *x = 0.0);
        self.mlp_b2.iter_mut().for_each(|x| *x = 0.0);
    }
}

/// Applies one pre-norm block.
pub fn block_forward(z: &Matrix, params: &BlockParams) -> Result<Matrix> {
    params.validate()?;
    let x = layer_norm(z, &params.norm1)?;
    let z1 = z.add(&params.attention.forward(&x, &params.bank)?)?;
    let y = layer_norm(&z1, &params.norm2)?;
    let mlp = mlp_forward(&y, &params.mlp_w1, &params.mlp_b1, &params.mlp_w2, &params.mlp_b2)?;
    z1.add(&mlp)
}

/// Shared model dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub d: usize,
    pub p: usize,
    pub k: usize,
    pub h: usize,
}

/// An ordered stack of blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub dims: ModelDims,
    pub layers: Vec<BlockParams>,
}

impl ModelParams {
    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn validate(&self) -> Result<()> {
        let ModelDims { d, p, k, h } = self.dims;
        for (l, layer) in self.layers.iter().enumerate() {
            layer.validate()?;
            if (layer.bank.d(), layer.bank.p(), layer.bank.k(), layer.hidden()) != (d, p, k, h) {
                return dim_err(format!("layer {l} does not match model dimensions"));
            }
        }
        Ok(())
    }

    /// Switches every block to causal attention, with a zero bias of `bias_len` rows when given.
    pub fn make_causal(&mut self, bias_len: Option<usize>) {
        let k = self.dims.k;
        for layer in &mut self.layers {
            let base = layer.attention.base().clone();
            let mut c = CausalParams::new(base);
            if let Some(len) = bias_len {
                c = c.with_bias(Matrix::zeros(len, k));
            }
            layer.attention = Attention::Causal(c);
        }
    }
}

/// Per-layer objective values recorded at each block's attention input.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerRecord {
    pub layer: usize,
    /// `R^var_{c,f}(X, Π | bank)` with `X` the normalized attention input and `Π` its membership.
    pub compression_var: f64,
    /// `R(X)` at the same point.
    pub expansion: f64,
}

/// Runs all blocks in order, optionally recording the objective trace.
pub fn model_forward(
    z: &Matrix,
    params: &ModelParams,
    record: bool,
) -> Result<(Matrix, Option<Vec<LayerRecord>>)> {
    params.validate()?;
    let mut cur = z.clone();
    let mut trace = record.then(Vec::new);
    for (l, block) in params.layers.iter().enumerate() {
        if let Some(trace) = trace.as_mut() {
            let x = layer_norm(&cur, &block.norm1)?;
            let pi = block.attention.membership(&x, &block.bank)?;
            let f = block.attention.base().f;
            trace.push(LayerRecord {
                layer: l,
                compression_var: variational_compression(&x, &pi, &block.bank, &f)?,
                expansion: expansion_rate(&x, f.alpha())?,
            });
        }
        cur = block_forward(&cur, block)?;
    }
    Ok((cur, trace))
}

/// How [`init_model`] fills the MLP.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InitMode {
    /// Gaussian MLP weights with standard deviation [`INIT_STD`], zero biases.
    Random,
    /// Zero MLP, so every block is a pure residual compression step; banks
    /// are still random and meant to be replaced by oracle bases.
    OracleReady,
}

/// Deterministic initialization: orthonormal banks per head and layer, identity norms.
pub fn init_model(
    d: usize,
    p: usize,
    k: usize,
    h: usize,
    layers: usize,
    seed: u64,
    mode: InitMode,
) -> Result<ModelParams> {
    if d == 0 || p == 0 || k == 0 || h == 0 {
        return dim_err("model dimensions must be at least 1");
    }
    if p > d {
        return dim_err(format!("head width {p} exceeds model width {d}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(layers);
    for _ in 0..layers {
        let bases = (0..k)
            .map(|_| crate::linalg::random_orthonormal_with(d, p, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let (w1, w2) = match mode {
            InitMode::Random => (
                Matrix::gaussian(d, h, &mut rng).scale(INIT_STD),
                Matrix::gaussian(h, d, &mut rng).scale(INIT_STD),
            ),
            InitMode::OracleReady => (Matrix::zeros(d, h), Matrix::zeros(h, d)),
        };
        out.push(BlockParams {
            bank: ProjectionBank::new(bases)?,
            attention: Attention::Tssa(TssaParams::new(d)),
            mlp_w1: w1,
            mlp_w2: w2,
            mlp_b1: vec![0.0; h],
            mlp_b2: vec![0.0; d],
            norm1: Affine::identity(d),
            norm2: Affine::identity(d),
        });
    }
    Ok(ModelParams {
        dims: ModelDims { d, p, k, h },
        layers: out,
    })
}

pub const MODEL_MAGIC: &[u8; 4] = b"TOST";
pub const MODEL_VERSION: u32 = 1;

const FLAG_CAUSAL: u32 = 1;
const FLAG_W: u32 = 1 << 1;
const FLAG_BIAS: u32 = 1 << 2;
const FLAG_NORMALIZE: u32 = 1 << 3;

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: usize) -> Result<()> {
        let v = u32::try_from(v).map_err(|_| TostError::Format(format!("{v} does not fit in u32")))?;
        self.0.extend_from_slice(&v.to_le_bytes());
        Ok(())
    }

    fn f64s(&mut self, v: &[f64]) {
        for x in v {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl Reader<'_> {
    fn take(&mut self, len: usize) -> Result<&[u8]> {
        let end = self.at.checked_add(len).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| TostError::Format("unexpected end of model data".into()))?;
        let out = &self.buf[self.at..end];
        self.at = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        let b = self.take(8)?;
        Ok(f64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, len: usize) -> Result<Vec<f64>> {
        (0..len).map(|_| self.f64()).collect()
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<Matrix> {
        Matrix::from_vec(rows, cols, self.f64s(rows * cols)?)
    }
}

/// Serializes a model.
///
/// Layout (all integers `u32`, all reals `f64`, little-endian, matrices row-major):
///
/// ```text
/// "TOST" | version | d | p | K | h | L
/// per layer:
///   flags (bit0 causal, bit1 W, bit2 bias, bit3 normalized membership) | bias_rows
///   tau | eta | alpha | norm_eps
///   U_1 .. U_K            (d x p each)
///   W                     (d x pK, if bit1)
///   bias                  (bias_rows x K, if bit2)
///   mlp_w1 (d x h) | mlp_w2 (h x d) | mlp_b1 (h) | mlp_b2 (d)
///   norm1 scale (d) | norm1 shift (d) | norm2 scale (d) | norm2 shift (d)
/// ```
pub fn encode_model(model: &ModelParams) -> Result<Vec<u8>> {
    model.validate()?;
    let ModelDims { d, p, k, h } = model.dims;
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MODEL_MAGIC);
    w.0.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    for v in [d, p, k, h, model.depth()] {
        w.u32(v)?;
    }
    for layer in &model.layers {
        let base = layer.attention.base();
        let bias = match &layer.attention {
            Attention::Causal(c) => c.bias.as_ref(),
            Attention::Tssa(_) => None,
        };
        let mut flags = 0;
        if layer.attention.is_causal() {
            flags |= FLAG_CAUSAL;
        }
        if base.w.is_some() {
            flags |= FLAG_W;
        }
        if bias.is_some() {
            flags |= FLAG_BIAS;
        }
        if base.normalize_membership {
            flags |= FLAG_NORMALIZE;
        }
        w.u32(flags as usize)?;
        w.u32(bias.map_or(0, Matrix::rows))?;
        w.f64s(&[base.tau, base.eta, base.alpha(), base.norm_eps]);
        for u in layer.bank.bases() {
            w.f64s(u.as_slice());
        }
        if let Some(m) = &base.w {
            w.f64s(m.as_slice());
        }
        if let Some(b) = bias {
            w.f64s(b.as_slice());
        }
        w.f64s(layer.mlp_w1.as_slice());
        w.f64s(layer.mlp_w2.as_slice());
        w.f64s(&layer.mlp_b1);
        w.f64s(&layer.mlp_b2);
        w.f64s(&layer.norm1.scale);
        w.f64s(&layer.norm1.shift);
        w.f64s(&layer.norm2.scale);
        w.f64s(&layer.norm2.shift);
    }
    Ok(w.0)
}

/// Parses the container written by [`encode_model`].
pub fn decode_model(bytes: &[u8]) -> Result<ModelParams> {
    let mut r = Reader { buf: bytes, at: 0 };
    if r.take(4)? != MODEL_MAGIC {
        return Err(TostError::Format("bad magic".into()));
    }
    let version = r.u32()?;
    if version != MODEL_VERSION as usize {
        return Err(TostError::Format(format!("unsupported version {version}")));
    }
    let (d, p, k, h, depth) = (r.u32()?, r.u32()?, r.u32()?, r.u32()?, r.u32()?);
    let mut layers = Vec::with_capacity(depth.min(1024));
    for _ in 0..depth {
        let flags = r.u32()? as u32;
        let bias_rows = r.u32()?;
        let (tau, eta, alpha, norm_eps) = (r.f64()?, r.f64()?, r.f64()?, r.f64()?);
        let bases = (0..k).map(|_| r.matrix(d, p)).collect::<Result<Vec<_>>>()?;
        let w = if flags & FLAG_W != 0 {
            Some(r.matrix(d, p * k)?)
        } else {
            None
        };
        let bias = if flags & FLAG_BIAS != 0 {
            Some(r.matrix(bias_rows, k)?)
        } else {
            None
        };
        let base = TssaParams {
            tau,
            eta,
            f: SpectralFn::new(alpha)?,
            w,
            normalize_membership: flags & FLAG_NORMALIZE != 0,
            norm_eps,
        };
        let attention = if flags & FLAG_CAUSAL != 0 {
            Attention::Causal(CausalParams { base, bias })
        } else {
            Attention::Tssa(base)
        };
        layers.push(BlockParams {
            bank: ProjectionBank::new(bases)?,
            attention,
            mlp_w1: r.matrix(d, h)?,
            mlp_w2: r.matrix(h, d)?,
            mlp_b1: r.f64s(h)?,
            mlp_b2: r.f64s(d)?,
            norm1: Affine {
                scale: r.f64s(d)?,
                shift: r.f64s(d)?,
            },
            norm2: Affine {
                scale: r.f64s(d)?,
                shift: r.f64s(d)?,
            },
        });
    }
    if r.at != bytes.len() {
        return Err(TostError::Format(format!("{} trailing bytes", bytes.len() - r.at)));
    }
    let model = ModelParams {
        dims: ModelDims { d, p, k, h },
        layers,
    };
    model.validate()?;
    Ok(model)
}

pub fn save_model(model: &ModelParams, path: &Path) -> Result<()> {
    let bytes = encode_model(model)?;
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(&bytes))
        .map_err(|e| TostError::Format(format!("writing {}: {e}", path.display())))
}

pub fn load_model(path: &Path) -> Result<ModelParams> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| TostError::Format(format!("reading {}: {e}", path.display())))?;
    decode_model(&bytes)
}
