//! Adapter parametrisations (LoRA, DiReFT, LoReFT), zero-delta initialisation,
//! rank-dependent scaling, position-masked application and a one-step
//! sign-update simulator used to check rank-invariant learning rates.

use std::fmt;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{kaiming_uniform, l2_norm, random_orthonormal_rows, Matrix, RngSeed};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AdapterId(pub u32);

impl fmt::Display for AdapterId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "adapter#{}", self.0)
    }
}

impl AdapterId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdapterKind {
    Lora,
    Direft,
    Loreft,
}

impl AdapterKind {
    pub const ALL: [AdapterKind; 3] = [AdapterKind::Lora, AdapterKind::Direft, AdapterKind::Loreft];

    pub fn is_reft(self) -> bool {
        !matches!(self, AdapterKind::Lora)
    }

    fn tag(self) -> u8 {
        match self {
            AdapterKind::Lora => 0,
            AdapterKind::Direft => 1,
            AdapterKind::Loreft => 2,
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(AdapterKind::Lora),
            1 => Ok(AdapterKind::Direft),
            2 => Ok(AdapterKind::Loreft),
            t => Err(Error::Format(format!("unknown adapter kind tag {t}"))),
        }
    }
}

impl fmt::Display for AdapterKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AdapterKind::Lora => "lora",
            AdapterKind::Direft => "direft",
            AdapterKind::Loreft => "loreft",
        })
    }
}

/// Which token positions an adapter is applied at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionSchedule {
    /// Prompt positions `0..prompt_len` only.
    PrefillOnly,
    /// Prompt and generated positions.
    AllPositions,
}

impl PositionSchedule {
    /// Whether the (0-based) `position` is in the set for a prompt of `prompt_len` tokens.
    pub fn includes(self, position: usize, prompt_len: usize) -> bool {
        match self {
            PositionSchedule::PrefillOnly => position < prompt_len,
            PositionSchedule::AllPositions => true,
        }
    }
}

impl fmt::Display for PositionSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PositionSchedule::PrefillOnly => "prefill",
            PositionSchedule::AllPositions => "all",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScalingRule {
    Constant(f64),
    AlphaOverR(f64),
    InvSqrtR,
}

impl ScalingRule {
    /// Default for LoRA (`α = 32`).
    pub const LORA_DEFAULT: ScalingRule = ScalingRule::AlphaOverR(32.0);

    pub fn default_for(kind: AdapterKind) -> ScalingRule {
        match kind {
            AdapterKind::Lora => Self::LORA_DEFAULT,
            AdapterKind::Direft | AdapterKind::Loreft => ScalingRule::InvSqrtR,
        }
    }

    fn encode(self) -> (u8, f64) {
        match self {
            ScalingRule::Constant(c) => (0, c),
            ScalingRule::AlphaOverR(a) => (1, a),
            ScalingRule::InvSqrtR => (2, 0.0),
        }
    }

    fn decode(tag: u8, value: f64) -> Result<Self> {
        match tag {
            0 => Ok(ScalingRule::Constant(value)),
            1 => Ok(ScalingRule::AlphaOverR(value)),
            2 => Ok(ScalingRule::InvSqrtR),
            t => Err(Error::Format(format!("unknown scaling tag {t}"))),
        }
    }
}

pub fn scaling_prefactor(rule: ScalingRule, rank: usize) -> f64 {
    let r = rank as f64;
    match rule {
        ScalingRule::Constant(c) => c,
        ScalingRule::AlphaOverR(alpha) => alpha / r,
        ScalingRule::InvSqrtR => 1.0 / r.sqrt(),
    }
}

/// Trainable tensors of one adapter at one hook site.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum AdapterWeights {
    /// `a`: r×m (down), `b`: n×r (up).
    Lora { a: Matrix, b: Matrix },
    /// `a`, `b`: r×d, `bias`: r.
    Direft { a: Matrix, b: Matrix, bias: Vec<f64> },
    /// `r`, `w`: r×d, `bias`: r.
    Loreft { r: Matrix, w: Matrix, bias: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterParams {
    rank: usize,
    scaling: ScalingRule,
    weights: AdapterWeights,
}

/// Input / output widths of a hook site. ReFT sites have `input == output`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SiteDims {
    pub input: usize,
    pub output: usize,
}

impl SiteDims {
    pub fn square(d: usize) -> Self {
        Self { input: d, output: d }
    }
}

impl AdapterParams {
    /// Validates shapes and infers the rank.
    pub fn from_weights(weights: AdapterWeights, scaling: ScalingRule) -> Result<Self> {
        let rank = match &weights {
            AdapterWeights::Lora { a, b } => {
                if b.cols() != a.rows() {
                    return Err(Error::Shape(format!(
                        "LoRA up {}x{} does not match down {}x{}",
                        b.rows(),
                        b.cols(),
                        a.rows(),
                        a.cols()
                    )));
                }
                a.rows()
            }
            AdapterWeights::Direft { a: m1, b: m2, bias } | AdapterWeights::Loreft { r: m1, w: m2, bias } => {
                if m1.shape() != m2.shape() || bias.len() != m1.rows() {
                    return Err(Error::Shape(format!(
                        "ReFT projections {:?}/{:?} with bias of length {}",
                        m1.shape(),
                        m2.shape(),
                        bias.len()
                    )));
                }
                m1.rows()
            }
        };
        let params = Self { rank, scaling, weights };
        let dims = params.dims();
        if rank == 0 {
            return Err(Error::Rank { rank, limit: dims.input.min(dims.output) });
        }
        if rank > dims.input.min(dims.output) {
            return Err(Error::Rank { rank, limit: dims.input.min(dims.output) });
        }
        let prefactor = scaling_prefactor(scaling, rank);
        if !(prefactor > 0.0 && prefactor.is_finite()) {
            return Err(Error::Range(format!("scaling prefactor must be positive, got {prefactor}")));
        }
        Ok(params)
    }

    pub fn kind(&self) -> AdapterKind {
        match self.weights {
            AdapterWeights::Lora { .. } => AdapterKind::Lora,
            AdapterWeights::Direft { .. } => AdapterKind::Direft,
            AdapterWeights::Loreft { .. } => AdapterKind::Loreft,
        }
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn scaling(&self) -> ScalingRule {
        self.scaling
    }

    pub fn prefactor(&self) -> f64 {
        scaling_prefactor(self.scaling, self.rank)
    }

    pub fn weights(&self) -> &AdapterWeights {
        &self.weights
    }

    pub fn dims(&self) -> SiteDims {
        match &self.weights {
            AdapterWeights::Lora { a, b } => SiteDims { input: a.cols(), output: b.rows() },
            AdapterWeights::Direft { a, .. } => SiteDims::square(a.cols()),
            AdapterWeights::Loreft { r, .. } => SiteDims::square(r.cols()),
        }
    }

    pub fn parameter_count(&self) -> usize {
        let SiteDims { input, output } = self.dims();
        parameter_count(self.kind(), self.rank, input, output)
    }

    /// The additive delta for one position. LoRA consumes the module input
    /// `x`; the ReFT kinds consume the residual-stream state `h`.
    pub fn delta(&self, input: &[f64]) -> Result<Vec<f64>> {
        let s = self.prefactor();
        let mut out = match &self.weights {
            AdapterWeights::Lora { a, b } => b.matvec(&a.matvec(input)?)?,
            AdapterWeights::Direft { a, b, bias } => {
                let mut low = a.matvec(input)?;
                low.iter_mut().zip(bias).for_each(|(v, c)| *v += c);
                b.matvec_transposed(&low)?
            }
            AdapterWeights::Loreft { r, w, bias } => {
                let wh = w.matvec(input)?;
                let rh = r.matvec(input)?;
                let low: Vec<f64> = wh.iter().zip(bias).zip(&rh).map(|((x, c), y)| x + c - y).collect();
                r.matvec_transposed(&low)?
            }
        };
        out.iter_mut().for_each(|v| *v *= s);
        Ok(out)
    }
}

pub fn parameter_count(kind: AdapterKind, rank: usize, input: usize, output: usize) -> usize {
    match kind {
        AdapterKind::Lora => output * rank + rank * input,
        AdapterKind::Direft | AdapterKind::Loreft => 2 * rank * input + rank,
    }
}

/// Builds an adapter whose delta is identically zero:
/// LoRA `B = 0` with Kaiming-uniform `A`; DiReFT orthonormal `B`, `A = 0`,
/// `b = 0`; LoReFT `W = R` (orthonormal rows), `b = 0`.
pub fn init_zero_delta(
    kind: AdapterKind,
    rank: usize,
    dims: SiteDims,
    seed: RngSeed,
    scaling: ScalingRule,
) -> Result<AdapterParams> {
    let limit = dims.input.min(dims.output);
    if rank == 0 || rank > limit {
        return Err(Error::Rank { rank, limit });
    }
    if kind.is_reft() && dims.input != dims.output {
        return Err(Error::Shape(format!(
            "ReFT sites are square, got {}->{}",
            dims.input, dims.output
        )));
    }
    let d = dims.input;
    let weights = match kind {
        AdapterKind::Lora => AdapterWeights::Lora {
            a: kaiming_uniform(rank, dims.input, seed.derive("lora.a"))?,
            b: Matrix::zeros(dims.output, rank),
        },
        AdapterKind::Direft => AdapterWeights::Direft {
            a: Matrix::zeros(rank, d),
            b: random_orthonormal_rows(rank, d, seed.derive("direft.b"))?,
            bias: vec![0.0; rank],
        },
        AdapterKind::Loreft => {
            let r = random_orthonormal_rows(rank, d, seed.derive("loreft.r"))?;
            AdapterWeights::Loreft { w: r.clone(), r, bias: vec![0.0; rank] }
        }
    };
    AdapterParams::from_weights(weights, scaling)
}

pub fn adapter_delta(params: &AdapterParams, input: &Matrix) -> Result<Matrix> {
    if !input.is_vector() {
        return Err(Error::Shape(format!("adapter input must be a vector, got {:?}", input.shape())));
    }
    let out = params.delta(input.data())?;
    Ok(if input.rows() == 1 { Matrix::row_vector(&out) } else { Matrix::col_vector(&out) })
}

/// Adds the adapter delta to every row of `outputs` whose `mask` entry is set.
pub fn apply_with_mask(
    params: &AdapterParams,
    outputs: &Matrix,
    inputs: &Matrix,
    mask: &[bool],
) -> Result<Matrix> {
    if mask.len() != outputs.rows() || inputs.rows() != outputs.rows() {
        return Err(Error::Shape(format!(
            "mask of {} rows for outputs {:?} and inputs {:?}",
            mask.len(),
            outputs.shape(),
            inputs.shape()
        )));
    }
    let mut result = outputs.clone();
    for (i, _) in mask.iter().enumerate().filter(|(_, m)| **m) {
        let source = if params.kind().is_reft() { outputs.row(i) } else { inputs.row(i) };
        let delta = params.delta(source)?;
        let row = result.row_mut(i);
        if delta.len() != row.len() {
            return Err(Error::Shape(format!("delta width {} vs output width {}", delta.len(), row.len())));
        }
        row.iter_mut().zip(&delta).for_each(|(o, d)| *o += d);
    }
    Ok(result)
}

/// Applies the adapter at the positions selected by `schedule` for a prompt
/// of `prompt_len` tokens; rows are consecutive positions starting at 0.
pub fn apply_masked(
    params: &AdapterParams,
    module_outputs: &Matrix,
    module_inputs: &Matrix,
    prompt_len: usize,
    schedule: PositionSchedule,
) -> Result<Matrix> {
    let positions = module_outputs.rows();
    if prompt_len > positions {
        return Err(Error::Index(format!("prompt length {prompt_len} exceeds {positions} positions")));
    }
    let mask: Vec<bool> = (0..positions).map(|i| schedule.includes(i, prompt_len)).collect();
    apply_with_mask(params, module_outputs, module_inputs, &mask)
}

/// `−η · x / (|x| + ε)`, with an exactly-zero gradient giving a zero step.
fn sign_step(grad: f64, eta: f64, eps: f64) -> f64 {
    if grad == 0.0 {
        0.0
    } else {
        -eta * grad / (grad.abs() + eps)
    }
}

/// One sign-normalised optimiser step on a DiReFT adapter given the upstream
/// gradient `g = ∂ℒ/∂δ` at input `h`. All three tensors are updated from
/// their true gradients; `B` receives none while `A h + b = 0`.
pub fn first_step_update(params: &AdapterParams, h: &[f64], g: &[f64], eta: f64, eps: f64) -> Result<AdapterParams> {
    let AdapterWeights::Direft { a, b, bias } = params.weights() else {
        return Err(Error::State(format!("first-step simulation needs a DiReFT adapter, got {}", params.kind())));
    };
    let d = a.cols();
    if h.len() != d || g.len() != d {
        return Err(Error::Shape(format!("h/g lengths {}/{} for width {d}", h.len(), g.len())));
    }
    let s = params.prefactor();
    let z = b.matvec(g)?;
    let mut pre = a.matvec(h)?;
    pre.iter_mut().zip(bias).for_each(|(v, c)| *v += c);

    let mut new_a = a.clone();
    let mut new_b = b.clone();
    let mut new_bias = bias.clone();
    for i in 0..params.rank() {
        for j in 0..d {
            let ga = s * z[i] * h[j];
            let gb = s * pre[i] * g[j];
            new_a.set(i, j, a.get(i, j) + sign_step(ga, eta, eps));
            new_b.set(i, j, b.get(i, j) + sign_step(gb, eta, eps));
        }
        new_bias[i] += sign_step(s * z[i], eta, eps);
    }
    AdapterParams::from_weights(
        AdapterWeights::Direft { a: new_a, b: new_b, bias: new_bias },
        params.scaling(),
    )
}

/// `‖δ⁽¹⁾(h)‖₂` after one sign-normalised step from a zero-delta DiReFT init.
#[allow(clippy::too_many_arguments)]
pub fn first_step_delta_norm(
    rank: usize,
    d: usize,
    h: &[f64],
    g: &[f64],
    eta: f64,
    eps: f64,
    scaling: ScalingRule,
    seed: RngSeed,
) -> Result<f64> {
    if eta.is_nan() || eta <= 0.0 || eps < 0.0 {
        return Err(Error::Range(format!("need eta > 0 and eps >= 0, got {eta}, {eps}")));
    }
    let init = init_zero_delta(AdapterKind::Direft, rank, SiteDims::square(d), seed, scaling)?;
    let stepped = first_step_update(&init, h, g, eta, eps)?;
    Ok(l2_norm(&stepped.delta(h)?))
}

pub fn adapter_byte_size(params: &AdapterParams, bytes_per_param: usize) -> Result<usize> {
    if ![2, 4, 8].contains(&bytes_per_param) {
        return Err(Error::Range(format!("bytes per parameter must be 2, 4 or 8, got {bytes_per_param}")));
    }
    Ok(params.parameter_count() * bytes_per_param)
}

// Binary record layout (little-endian):
//   magic "PFTA" | version u8 (=1) | kind u8 | scaling tag u8 | scaling value f64
//   | rank u32 | input dim u32 | output dim u32 | tensors as f64, row-major:
//   LoRA: A (r×m), B (n×r); DiReFT: A (r×d), B (r×d), b (r); LoReFT: b (r), R (r×d), W (r×d)
const RECORD_MAGIC: &[u8; 4] = b"PFTA";
const RECORD_VERSION: u8 = 1;

impl AdapterParams {
    pub fn write_to<W: Write>(&self, out: &mut W) -> Result<()> {
        let (tag, value) = self.scaling.encode();
        let dims = self.dims();
        out.write_all(RECORD_MAGIC)?;
        out.write_all(&[RECORD_VERSION, self.kind().tag(), tag])?;
        out.write_all(&value.to_le_bytes())?;
        for n in [self.rank, dims.input, dims.output] {
            let n = u32::try_from(n).map_err(|_| Error::Format(format!("dimension {n} exceeds u32")))?;
            out.write_all(&n.to_le_bytes())?;
        }
        let tensors: Vec<&[f64]> = match &self.weights {
            AdapterWeights::Lora { a, b } => vec![a.data(), b.data()],
            AdapterWeights::Direft { a, b, bias } => vec![a.data(), b.data(), bias],
            AdapterWeights::Loreft { r, w, bias } => vec![bias, r.data(), w.data()],
        };
        for t in tensors {
            for v in t {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(input: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        if &magic != RECORD_MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let mut head = [0u8; 3];
        input.read_exact(&mut head)?;
        if head[0] != RECORD_VERSION {
            return Err(Error::Format(format!("unsupported version {}", head[0])));
        }
        let kind = AdapterKind::from_tag(head[1])?;
        let scaling = ScalingRule::decode(head[2], read_f64(input)?)?;
        let rank = read_u32(input)? as usize;
        let input_dim = read_u32(input)? as usize;
        let output_dim = read_u32(input)? as usize;
        let weights = match kind {
            AdapterKind::Lora => AdapterWeights::Lora {
                a: read_matrix(input, rank, input_dim)?,
                b: read_matrix(input, output_dim, rank)?,
            },
            AdapterKind::Direft => AdapterWeights::Direft {
                a: read_matrix(input, rank, input_dim)?,
                b: read_matrix(input, rank, input_dim)?,
                bias: read_matrix(input, rank, 1)?.into_data(),
            },
            AdapterKind::Loreft => {
                let bias = read_matrix(input, rank, 1)?.into_data();
                AdapterWeights::Loreft {
                    r: read_matrix(input, rank, input_dim)?,
                    w: read_matrix(input, rank, input_dim)?,
                    bias,
                }
            }
        };
        AdapterParams::from_weights(weights, scaling)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }
}

fn read_u32<R: Read>(input: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    input.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64<R: Read>(input: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    input.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

fn read_matrix<R: Read>(input: &mut R, rows: usize, cols: usize) -> Result<Matrix> {
    let data = (0..rows * cols).map(|_| read_f64(input)).collect::<Result<Vec<_>>>()?;
    Matrix::new(rows, cols, data)
}
