//! Projection, cross-attention and joint cross-attention with a residual MLP.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::diffusion::{grid_to_tokens, tokens_to_grid};
use crate::error::{Error, Result};
use crate::tape::{Tape, Var};

/// A tap activation, `C2×H2×W2`.
#[derive(Debug, Clone, PartialEq)]
pub struct TapFeatures {
    pub grid: Array3<f64>,
}

impl TapFeatures {
    pub fn new(grid: Array3<f64>) -> Result<Self> {
        if grid.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("tap activation".into()));
        }
        Ok(Self { grid })
    }

    pub fn channels(&self) -> usize {
        self.grid.dim().0
    }

    /// `(H2·W2) × C2`, row-major over positions.
    pub fn tokens(&self) -> Array2<f64> {
        grid_to_tokens(self.grid.view())
    }

    pub fn from_tokens(tokens: &Array2<f64>, height: usize, width: usize) -> Result<Self> {
        if tokens.nrows() != height * width {
            return Err(Error::invalid(format!(
                "{} tokens do not fill a {height}x{width} grid",
                tokens.nrows()
            )));
        }
        Self::new(tokens_to_grid(tokens, tokens.ncols(), height, width))
    }
}

/// Per-position linear map `tokens·W + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    /// `in × out`
    pub weight: Array2<f64>,
    /// `1 × out`
    pub bias: Array2<f64>,
}

impl Linear {
    pub fn new(weight: Array2<f64>, bias: Array2<f64>) -> Result<Self> {
        if bias.dim() != (1, weight.ncols()) {
            return Err(Error::config(format!(
                "bias {:?} does not match weight {:?}",
                bias.dim(),
                weight.dim()
            )));
        }
        Ok(Self { weight, bias })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            weight: Array2::eye(n),
            bias: Array2::zeros((1, n)),
        }
    }
}

/// Key and value projections of one feature stream.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamParams {
    pub w_k: Array2<f64>,
    pub w_v: Array2<f64>,
}

/// `linear(k·d → hidden) → SiLU → linear(hidden → C2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FuseMlp {
    pub w1: Array2<f64>,
    pub b1: Array2<f64>,
    pub w2: Array2<f64>,
    pub b2: Array2<f64>,
}

/// One tap's attention block: a query projection shared by every stream,
/// per-stream key/value projections and the fuse MLP.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionBlockParams {
    pub w_q: Array2<f64>,
    pub streams: Vec<StreamParams>,
    pub mlp: FuseMlp,
    pub heads: usize,
}

impl AttentionBlockParams {
    pub fn attention_dim(&self) -> usize {
        self.w_q.ncols()
    }
}

/// Tape handles for an [`AttentionBlockParams`].
#[derive(Debug, Clone)]
pub struct BlockVars {
    pub w_q: Var,
    /// `(w_k, w_v)` per stream.
    pub streams: Vec<(Var, Var)>,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
    pub heads: usize,
}

impl BlockVars {
    pub fn bind(tape: &Tape, p: &AttentionBlockParams) -> Self {
        Self {
            w_q: tape.leaf(p.w_q.clone()),
            streams: p
                .streams
                .iter()
                .map(|s| (tape.leaf(s.w_k.clone()), tape.leaf(s.w_v.clone())))
                .collect(),
            w1: tape.leaf(p.mlp.w1.clone()),
            b1: tape.leaf(p.mlp.b1.clone()),
            w2: tape.leaf(p.mlp.w2.clone()),
            b2: tape.leaf(p.mlp.b2.clone()),
            heads: p.heads,
        }
    }
}

/// `f·W + b` on a tape.
pub fn project_var(tape: &Tape, f: Var, w: Var, b: Var) -> Result<Var> {
    let (_, c1) = tape.shape(f);
    let (win, wout) = tape.shape(w);
    if c1 != win {
        return Err(Error::config(format!(
            "projection expects {win} channels, features have {c1}"
        )));
    }
    if tape.shape(b) != (1, wout) {
        return Err(Error::config("projection bias width differs from weight"));
    }
    tape.add_row(tape.matmul(f, w)?, b)
}

/// Projects a `C1×H1×W1` feature grid to `(H1·W1) × d` tokens.
pub fn project_features(f: &Array3<f64>, params: &Linear) -> Result<Array2<f64>> {
    let tape = Tape::new();
    let x = tape.leaf(grid_to_tokens(f.view()));
    let w = tape.leaf(params.weight.clone());
    let b = tape.leaf(params.bias.clone());
    Ok(tape.value(project_var(&tape, x, w, b)?))
}

/// `softmax(X·W_Q·(F·W_K)ᵀ / √d_h)·(F·W_V)` per head, heads concatenated.
pub fn attend_var(
    tape: &Tape,
    x: Var,
    f: Var,
    w_q: Var,
    w_k: Var,
    w_v: Var,
    heads: usize,
) -> Result<Var> {
    let (c2, d) = tape.shape(w_q);
    if d == 0 {
        return Err(Error::config("attention dim must be positive"));
    }
    if heads == 0 || d % heads != 0 {
        return Err(Error::config(format!(
            "{heads} heads do not divide attention dim {d}"
        )));
    }
    if tape.shape(x).1 != c2 {
        return Err(Error::config(format!(
            "query projection expects {c2} channels, tap has {}",
            tape.shape(x).1
        )));
    }
    let fw = tape.shape(f).1;
    if tape.shape(w_k) != (fw, d) || tape.shape(w_v) != (fw, d) {
        return Err(Error::config(format!(
            "key/value projections must be {fw}x{d}, got {:?} and {:?}",
            tape.shape(w_k),
            tape.shape(w_v)
        )));
    }
    let q = tape.matmul(x, w_q)?;
    let k = tape.matmul(f, w_k)?;
    let v = tape.matmul(f, w_v)?;
    let dh = d / heads;
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                tape.slice_cols(q, lo, hi)?,
                tape.slice_cols(k, lo, hi)?,
                tape.slice_cols(v, lo, hi)?,
            )
        };
        let scores = tape.scale(tape.matmul_nt(qh, kh)?, 1.0 / (dh as f64).sqrt());
        outs.push(tape.matmul(tape.softmax_rows(scores), vh)?);
    }
    if heads == 1 {
        Ok(outs[0])
    } else {
        tape.concat_cols(&outs)
    }
}

/// `X + MLP(concat(Z₁, …))`.
pub fn fuse_var(tape: &Tape, x: Var, zs: &[Var], vars: &BlockVars) -> Result<Var> {
    let z = if zs.len() == 1 {
        zs[0]
    } else {
        tape.concat_cols(zs)?
    };
    let zw = tape.shape(z).1;
    if tape.shape(vars.w1).0 != zw {
        return Err(Error::config(format!(
            "fuse MLP expects {} inputs, streams give {zw}",
            tape.shape(vars.w1).0
        )));
    }
    if tape.shape(vars.w2).1 != tape.shape(x).1 {
        return Err(Error::config(
            "fuse MLP output width differs from tap width",
        ));
    }
    let hidden = tape.silu(tape.add_row(tape.matmul(z, vars.w1)?, vars.b1)?);
    let out = tape.add_row(tape.matmul(hidden, vars.w2)?, vars.b2)?;
    tape.add(x, out)
}

/// Attends tap tokens `x` to each projected stream in `features` and fuses.
pub fn block_var(tape: &Tape, x: Var, features: &[Var], vars: &BlockVars) -> Result<Var> {
    if features.len() != vars.streams.len() {
        return Err(Error::config(format!(
            "block has {} streams, got {} feature sequences",
            vars.streams.len(),
            features.len()
        )));
    }
    let zs = features
        .iter()
        .zip(&vars.streams)
        .map(|(&f, &(w_k, w_v))| attend_var(tape, x, f, vars.w_q, w_k, w_v, vars.heads))
        .collect::<Result<Vec<_>>>()?;
    fuse_var(tape, x, &zs, vars)
}

fn run_block(
    x: &TapFeatures,
    features: &[&Array2<f64>],
    params: &AttentionBlockParams,
) -> Result<TapFeatures> {
    let (_, h, w) = x.grid.dim();
    let tape = Tape::new();
    let xv = tape.leaf(x.tokens());
    let fv: Vec<Var> = features.iter().map(|f| tape.leaf((*f).clone())).collect();
    let vars = BlockVars::bind(&tape, params);
    let out = block_var(&tape, xv, &fv, &vars)?;
    TapFeatures::from_tokens(&tape.value(out), h, w)
}

/// Single-stream cross-attention in residual form.
pub fn cross_attend(
    x: &TapFeatures,
    f: &Array2<f64>,
    params: &AttentionBlockParams,
) -> Result<TapFeatures> {
    if params.streams.len() != 1 {
        return Err(Error::config("cross_attend needs a single-stream block"));
    }
    run_block(x, &[f], params)
}

/// Attends to the mask stream (first) and masked-image stream (second) and
/// fuses both outputs.
pub fn joint_cross_attend(
    x: &TapFeatures,
    f_mask: &Array2<f64>,
    f_masked_image: &Array2<f64>,
    params: &AttentionBlockParams,
) -> Result<TapFeatures> {
    if params.streams.len() != 2 {
        return Err(Error::config("joint_cross_attend needs a two-stream block"));
    }
    if f_mask.ncols() != f_masked_image.ncols() {
        return Err(Error::config(format!(
            "stream widths differ: {} vs {}",
            f_mask.ncols(),
            f_masked_image.ncols()
        )));
    }
    run_block(x, &[f_mask, f_masked_image], params)
}

/// Attention outputs `Z` for each stream, before fusion.
pub fn stream_outputs(
    x: &TapFeatures,
    features: &[&Array2<f64>],
    params: &AttentionBlockParams,
) -> Result<Vec<Array2<f64>>> {
    let tape = Tape::new();
    let xv = tape.leaf(x.tokens());
    let vars = BlockVars::bind(&tape, params);
    features
        .iter()
        .zip(&vars.streams)
        .map(|(f, &(w_k, w_v))| {
            let fv = tape.leaf((*f).clone());
            attend_var(&tape, xv, fv, vars.w_q, w_k, w_v, vars.heads).map(|z| tape.value(z))
        })
        .collect()
}

/// Per-head attention weight matrices of `x` over one projected stream.
pub fn attention_weights(
    x: &TapFeatures,
    f: &Array2<f64>,
    w_q: &Array2<f64>,
    w_k: &Array2<f64>,
    heads: usize,
) -> Result<Vec<Array2<f64>>> {
    let d = w_q.ncols();
    if d == 0 || heads == 0 || !d.is_multiple_of(heads) {
        return Err(Error::config(format!(
            "{heads} heads over attention dim {d}"
        )));
    }
    if w_q.nrows() != x.channels() || w_k.dim() != (f.ncols(), d) {
        return Err(Error::config("query/key projections do not fit inputs"));
    }
    let q = x.tokens().dot(w_q);
    let k = f.dot(w_k);
    let dh = d / heads;
    Ok((0..heads)
        .map(|h| {
            let cols = ndarray::s![.., h * dh..(h + 1) * dh];
            let scores = q.slice(cols).dot(&k.slice(cols).t()) / (dh as f64).sqrt();
            crate::tape::softmax_rows(&scores)
        })
        .collect())
}
