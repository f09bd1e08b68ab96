//! Nearest-neighbor quantization against the dual codebooks, the
//! straight-through gradient wiring, and the quantization loss.
//!
//! Distances use the expanded form `|z|^2 - 2 z.e + |e|^2` with codebook
//! norms precomputed once per forward pass; the exhaustive scan lives in
//! test code as the independent oracle.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{matmul_into, Tape, Tensor, Var};
use crate::transfer::GeneratedCodebooks;

/// Per-position index grid of shape `B x h x w`, stored row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexGrid {
    pub batch: usize,
    pub h: usize,
    pub w: usize,
    pub indices: Vec<usize>,
}

impl IndexGrid {
    pub fn at(&self, b: usize, y: usize, x: usize) -> usize {
        self.indices[(b * self.h + y) * self.w + x]
    }
}

/// Smallest and second-smallest squared distance per position, kept for tie
/// diagnostics. The second entry is infinite for single-code codebooks.
#[derive(Debug, Clone)]
pub struct ArgminMargins {
    pub best: Vec<f64>,
    pub second: Vec<f64>,
}

/// Result of quantizing against the adjective/noun codebook pair.
///
/// `z_q` carries gradient into the codebooks (and through them the transfer
/// network); `z_q_st` is the straight-through wiring `z + sg(z_q - z)` the
/// decoder consumes, which passes gradient to the encoder as identity.
#[derive(Debug, Clone)]
pub struct DualQuantization {
    pub adj_indices: IndexGrid,
    pub noun_indices: IndexGrid,
    pub z_q: Var,
    pub z_q_st: Var,
    pub adj_margins: ArgminMargins,
    pub noun_margins: ArgminMargins,
}

/// Single-codebook variant used by the baseline model.
#[derive(Debug, Clone)]
pub struct SingleQuantization {
    pub indices: IndexGrid,
    pub z_q: Var,
    pub z_q_st: Var,
    pub margins: ArgminMargins,
}

/// Loss components of one forward pass, as plain numbers for reporting.
#[derive(Debug, Clone, Copy)]
pub struct VqLossTerms {
    pub l_rec: f64,
    pub l_codebook: f64,
    pub l_commit: f64,
    pub beta: f64,
    pub total: f64,
}

/// Tape handles for the loss components; `total` is what backward runs on.
#[derive(Debug, Clone, Copy)]
pub struct VqLossVars {
    pub l_rec: Var,
    pub l_codebook: Var,
    pub l_commit: Var,
    pub total: Var,
}

/// Index of the nearest codebook row to `z_vec`, with its squared distance.
/// Ties break toward the lowest index.
pub fn nearest_code(z_vec: &Tensor, codebook: &Tensor) -> Result<(usize, f64)> {
    if codebook.shape().len() != 2 || codebook.shape()[0] == 0 {
        return Err(Error::Invalid("empty or non-2d codebook".into()));
    }
    let d = codebook.shape()[1];
    if z_vec.numel() != d {
        return Err(Error::ShapeMismatch {
            op: "nearest_code",
            left: z_vec.shape().to_vec(),
            right: codebook.shape().to_vec(),
        });
    }
    let norms = row_sq_norms(codebook);
    let z = z_vec.data();
    let z_norm: f64 = z.iter().map(|v| v * v).sum();
    let mut best = (0usize, f64::INFINITY);
    for (k, &norm) in norms.iter().enumerate() {
        let dot: f64 = codebook.row(k).iter().zip(z).map(|(e, v)| e * v).sum();
        let dist = z_norm - 2.0 * dot + norm;
        if dist < best.1 {
            best = (k, dist);
        }
    }
    Ok(best)
}

fn row_sq_norms(codebook: &Tensor) -> Vec<f64> {
    (0..codebook.shape()[0])
        .map(|k| codebook.row(k).iter().map(|v| v * v).sum())
        .collect()
}

/// Argmin scan of every spatial position of a `B x d x h x w` map against a
/// `K x d` codebook, returning indices plus the two smallest distances.
fn scan_positions(
    map: &[f64],
    batch: usize,
    d: usize,
    h: usize,
    w: usize,
    codebook: &[f64],
    k: usize,
) -> (Vec<usize>, ArgminMargins) {
    let plane = h * w;
    let npos = batch * plane;
    // Gather position-major vectors, then one matmul for all dot products.
    let mut pos_major = vec![0.0; npos * d];
    let mut z_norms = vec![0.0; npos];
    for b in 0..batch {
        for p in 0..plane {
            let row = &mut pos_major[(b * plane + p) * d..(b * plane + p + 1) * d];
            for (ci, slot) in row.iter_mut().enumerate() {
                *slot = map[b * d * plane + ci * plane + p];
            }
            z_norms[b * plane + p] = row.iter().map(|v| v * v).sum();
        }
    }
    let mut cb_t = vec![0.0; d * k];
    for kk in 0..k {
        for ci in 0..d {
            cb_t[ci * k + kk] = codebook[kk * d + ci];
        }
    }
    let mut dots = vec![0.0; npos * k];
    matmul_into(&pos_major, &cb_t, npos, d, k, &mut dots);
    let cb_norms: Vec<f64> = (0..k)
        .map(|kk| codebook[kk * d..(kk + 1) * d].iter().map(|v| v * v).sum())
        .collect();

    let mut indices = vec![0usize; npos];
    let mut best = vec![0.0f64; npos];
    let mut second = vec![0.0f64; npos];
    for p in 0..npos {
        let mut b1 = f64::INFINITY;
        let mut b2 = f64::INFINITY;
        let mut arg = 0usize;
        for kk in 0..k {
            let dist = z_norms[p] - 2.0 * dots[p * k + kk] + cb_norms[kk];
            if dist < b1 {
                b2 = b1;
                b1 = dist;
                arg = kk;
            } else if dist < b2 {
                b2 = dist;
            }
        }
        indices[p] = arg;
        best[p] = b1;
        second[p] = b2;
    }
    (indices, ArgminMargins { best, second })
}

fn quantize_half(
    tape: &mut Tape,
    z_half: Var,
    codebook: Var,
) -> Result<(IndexGrid, ArgminMargins, Var)> {
    let zs = tape.shape(z_half).to_vec();
    let cs = tape.shape(codebook).to_vec();
    if cs.len() != 2 || cs[0] == 0 {
        return Err(Error::Invalid("empty or non-2d codebook".into()));
    }
    if zs.len() != 4 || zs[1] != cs[1] {
        return Err(Error::ShapeMismatch {
            op: "quantize",
            left: zs,
            right: cs,
        });
    }
    let (batch, d, h, w) = (zs[0], zs[1], zs[2], zs[3]);
    let (indices, margins) =
        scan_positions(tape.value(z_half), batch, d, h, w, tape.value(codebook), cs[0]);
    let grid = IndexGrid {
        batch,
        h,
        w,
        indices: indices.clone(),
    };
    let gathered = tape.lookup_rows(codebook, Rc::new(indices), batch, h, w)?;
    Ok((grid, margins, gathered))
}

fn straight_through(tape: &mut Tape, z: Var, z_q: Var) -> Result<Var> {
    let delta = tape.sub(z_q, z)?;
    let detached = tape.stop_gradient(delta);
    tape.add(z, detached)
}

/// Splits `z` along channels, quantizes each half against its codebook, and
/// concatenates the gathered rows back into a full map.
pub fn dual_quantize(tape: &mut Tape, z: Var, gen: &GeneratedCodebooks) -> Result<DualQuantization> {
    let zs = tape.shape(z).to_vec();
    if zs.len() != 4 || !zs[1].is_multiple_of(2) || zs[1] / 2 != gen.dim {
        return Err(Error::ShapeMismatch {
            op: "dual_quantize",
            left: zs,
            right: vec![gen.k_adj + gen.k_noun, gen.dim],
        });
    }
    let (z_adj, z_noun) = tape.channel_split(z)?;
    let (adj_indices, adj_margins, q_adj) = quantize_half(tape, z_adj, gen.c_adj)?;
    let (noun_indices, noun_margins, q_noun) = quantize_half(tape, z_noun, gen.c_noun)?;
    let z_q = tape.channel_concat(q_adj, q_noun)?;
    let z_q_st = straight_through(tape, z, z_q)?;
    Ok(DualQuantization {
        adj_indices,
        noun_indices,
        z_q,
        z_q_st,
        adj_margins,
        noun_margins,
    })
}

/// Whole-vector quantization against one codebook (the baseline path).
pub fn quantize_single(tape: &mut Tape, z: Var, codebook: Var) -> Result<SingleQuantization> {
    let (indices, margins, z_q) = quantize_half(tape, z, codebook)?;
    let z_q_st = straight_through(tape, z, z_q)?;
    Ok(SingleQuantization {
        indices,
        z_q,
        z_q_st,
        margins,
    })
}

/// The three-term quantization loss.
///
/// `l_codebook = mse(sg(z), z_q)` reaches only the codebook side (the
/// transfer parameters, or the raw baseline codebook); `l_commit =
/// beta-weighted mse(z, sg(z_q))` reaches only the encoder;
/// `total = l_rec + l_codebook + beta * l_commit`.
pub fn vq_loss(
    tape: &mut Tape,
    x: Var,
    x_hat: Var,
    z: Var,
    z_q: Var,
    beta: f64,
) -> Result<(VqLossVars, VqLossTerms)> {
    let l_rec = tape.mse(x, x_hat)?;
    let sg_z = tape.stop_gradient(z);
    let l_codebook = tape.mse(sg_z, z_q)?;
    let sg_q = tape.stop_gradient(z_q);
    let l_commit = tape.mse(z, sg_q)?;
    let weighted_commit = tape.scale(l_commit, beta);
    let partial = tape.add(l_rec, l_codebook)?;
    let total = tape.add(partial, weighted_commit)?;
    let terms = VqLossTerms {
        l_rec: tape.scalar_value(l_rec),
        l_codebook: tape.scalar_value(l_codebook),
        l_commit: tape.scalar_value(l_commit),
        beta,
        total: tape.scalar_value(total),
    };
    Ok((
        VqLossVars {
            l_rec,
            l_codebook,
            l_commit,
            total,
        },
        terms,
    ))
}

/// Writes the token grids of one image as CSV. The header names the
/// codebook sizes; each data row is `grid,codebook_size,y` then one column
/// per x position.
pub fn tokens_to_csv(grids: &[(&str, usize, &IndexGrid)]) -> String {
    let mut out = String::from("grid,codebook_size,y,codes...\n");
    for (name, k, grid) in grids {
        for b in 0..grid.batch {
            for y in 0..grid.h {
                out.push_str(&format!("{name},{k},{y}"));
                for x in 0..grid.w {
                    out.push_str(&format!(",{}", grid.at(b, y, x)));
                }
                out.push('\n');
            }
        }
    }
    out
}
