use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::matmul::{matmul_a_bt_into, matmul_at_b_into, matmul_into};
use crate::tensor::{SparseMat, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Convolution geometry resolved at forward time and reused by backward.
#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    batch: usize,
    c_in: usize,
    h_in: usize,
    w_in: usize,
    c_out: usize,
    ksize: usize,
    stride: usize,
    padding: usize,
    h_out: usize,
    w_out: usize,
}

#[derive(Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Matmul(Var, Var),
    Conv2d { input: Var, kernel: Var, geom: ConvGeom },
    Relu(Var),
    Sum(Var),
    Mse(Var, Var),
    Reshape(Var),
    ChannelHalf { input: Var, half: usize },
    ChannelConcat(Var, Var),
    Upsample2x(Var),
    StopGradient,
    AddRows { mat: Var, row: Var },
    AddChannelBias { map: Var, bias: Var },
    Spmm { mat: Rc<SparseMat>, dense: Var },
    LookupRows { table: Var, indices: Rc<Vec<usize>> },
    SliceRows { input: Var, start: usize },
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Define-by-run record of one forward pass.
///
/// Nodes are appended in execution order, so the record is already
/// topologically sorted; `backward` walks it once in reverse. A tape is
/// single-threaded and rebuilt for every forward pass.
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        debug_assert_eq!(self.nodes[v.0].data.len(), 1);
        self.nodes[v.0].data[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.nodes[v.0].data.clone(), &self.nodes[v.0].shape)
            .expect("tape node is always self-consistent")
    }

    /// Gradient accumulated at `v`, if backward reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Gradient at `v`, with unreached nodes reported as zeros.
    pub fn grad_or_zeros(&self, v: Var) -> Vec<f64> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => vec![0.0; self.nodes[v.0].data.len()],
        }
    }

    // ── node construction ───────────────────────────────────────────────

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node {
            shape,
            data,
            op,
            needs_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Leaf,
            t.requires_grad(),
        )
    }

    pub fn leaf_parts(&mut self, data: Vec<f64>, shape: &[usize], requires_grad: bool) -> Var {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        self.push(shape.to_vec(), data, Op::Leaf, requires_grad)
    }

    // ── elementwise ops ─────────────────────────────────────────────────

    fn check_same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::ShapeMismatch {
                op,
                left: self.nodes[a.0].shape.clone(),
                right: self.nodes[b.0].shape.clone(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("add", a, b)?;
        let data = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(shape, data, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("sub", a, b)?;
        let data = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(shape, data, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("mul", a, b)?;
        let data = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(shape, data, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let data = self.nodes[a.0].data.iter().map(|x| x * s).collect();
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.needs(a);
        self.push(shape, data, Op::Scale(a, s), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let data = self.nodes[a.0].data.iter().map(|&x| x.max(0.0)).collect();
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.needs(a);
        self.push(shape, data, Op::Relu(a), ng)
    }

    /// Forward identity whose backward contribution is exactly zero.
    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let data = self.nodes[a.0].data.clone();
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, data, Op::StopGradient, false)
    }

    // ── reductions ──────────────────────────────────────────────────────

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.nodes[a.0].data.iter().sum();
        let ng = self.needs(a);
        self.push(vec![1], vec![s], Op::Sum(a), ng)
    }

    /// Mean over all elements of `(a - b)^2`.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("mse", a, b)?;
        let n = self.nodes[a.0].data.len() as f64;
        let s: f64 = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(vec![1], vec![s / n], Op::Mse(a, b), ng))
    }

    // ── shape ops ───────────────────────────────────────────────────────

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.nodes[a.0].data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                left: self.nodes[a.0].shape.clone(),
                right: shape.to_vec(),
            });
        }
        let data = self.nodes[a.0].data.clone();
        let ng = self.needs(a);
        Ok(self.push(shape.to_vec(), data, Op::Reshape(a), ng))
    }

    /// Splits `B x C x H x W` into two `B x C/2 x H x W` halves along channels.
    pub fn channel_split(&mut self, a: Var) -> Result<(Var, Var)> {
        let shape = self.nodes[a.0].shape.clone();
        if shape.len() != 4 || !shape[1].is_multiple_of(2) {
            return Err(Error::Invalid(format!(
                "channel_split needs B x C x H x W with even C, got {:?}",
                shape
            )));
        }
        let lo = self.channel_half(a, 0);
        let hi = self.channel_half(a, 1);
        Ok((lo, hi))
    }

    fn channel_half(&mut self, a: Var, half: usize) -> Var {
        let shape = &self.nodes[a.0].shape;
        let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let hc = c / 2;
        let plane = h * w;
        let mut data = vec![0.0; b * hc * plane];
        let src = &self.nodes[a.0].data;
        for bi in 0..b {
            let src_base = bi * c * plane + half * hc * plane;
            let dst_base = bi * hc * plane;
            data[dst_base..dst_base + hc * plane]
                .copy_from_slice(&src[src_base..src_base + hc * plane]);
        }
        let ng = self.needs(a);
        self.push(
            vec![b, hc, h, w],
            data,
            Op::ChannelHalf { input: a, half },
            ng,
        )
    }

    /// Concatenates along channels; exact inverse of [`Tape::channel_split`].
    pub fn channel_concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.nodes[a.0].shape.clone();
        let sb = self.nodes[b.0].shape.clone();
        if sa.len() != 4 || sb.len() != 4 || sa[0] != sb[0] || sa[2] != sb[2] || sa[3] != sb[3] {
            return Err(Error::ShapeMismatch {
                op: "channel_concat",
                left: sa,
                right: sb,
            });
        }
        let (bn, ca, cb, h, w) = (sa[0], sa[1], sb[1], sa[2], sa[3]);
        let plane = h * w;
        let mut data = vec![0.0; bn * (ca + cb) * plane];
        for bi in 0..bn {
            let dst = bi * (ca + cb) * plane;
            data[dst..dst + ca * plane]
                .copy_from_slice(&self.nodes[a.0].data[bi * ca * plane..(bi + 1) * ca * plane]);
            data[dst + ca * plane..dst + (ca + cb) * plane]
                .copy_from_slice(&self.nodes[b.0].data[bi * cb * plane..(bi + 1) * cb * plane]);
        }
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(vec![bn, ca + cb, h, w], data, Op::ChannelConcat(a, b), ng))
    }

    /// Nearest-neighbor 2x spatial upsampling of `B x C x H x W`.
    pub fn upsample_nearest2x(&mut self, a: Var) -> Result<Var> {
        let shape = self.nodes[a.0].shape.clone();
        if shape.len() != 4 {
            return Err(Error::Invalid(format!(
                "upsample_nearest2x needs B x C x H x W, got {:?}",
                shape
            )));
        }
        let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let mut data = vec![0.0; b * c * 4 * h * w];
        let src = &self.nodes[a.0].data;
        for plane_idx in 0..b * c {
            let sbase = plane_idx * h * w;
            let dbase = plane_idx * 4 * h * w;
            for y in 0..2 * h {
                for x in 0..2 * w {
                    data[dbase + y * 2 * w + x] = src[sbase + (y / 2) * w + x / 2];
                }
            }
        }
        let ng = self.needs(a);
        Ok(self.push(vec![b, c, 2 * h, 2 * w], data, Op::Upsample2x(a), ng))
    }

    /// Rows `start..start+len` of a 2-d tensor.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.nodes[a.0].shape.clone();
        if shape.len() != 2 || start + len > shape[0] || len == 0 {
            return Err(Error::Invalid(format!(
                "slice_rows {}..{} out of range for shape {:?}",
                start,
                start + len,
                shape
            )));
        }
        let d = shape[1];
        let data = self.nodes[a.0].data[start * d..(start + len) * d].to_vec();
        let ng = self.needs(a);
        Ok(self.push(vec![len, d], data, Op::SliceRows { input: a, start }, ng))
    }

    // ── linear algebra ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.nodes[a.0].shape.clone();
        let sb = self.nodes[b.0].shape.clone();
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: sa,
                right: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut data = vec![0.0; m * n];
        matmul_into(&self.nodes[a.0].data, &self.nodes[b.0].data, m, k, n, &mut data);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(vec![m, n], data, Op::Matmul(a, b), ng))
    }

    /// `mat[N x d] + row[d]` added to every row.
    pub fn add_rows(&mut self, mat: Var, row: Var) -> Result<Var> {
        let sm = self.nodes[mat.0].shape.clone();
        let sr = self.nodes[row.0].shape.clone();
        if sm.len() != 2 || sr.len() != 1 || sm[1] != sr[0] {
            return Err(Error::ShapeMismatch {
                op: "add_rows",
                left: sm,
                right: sr,
            });
        }
        let d = sm[1];
        let rowv = &self.nodes[row.0].data;
        let data = self.nodes[mat.0]
            .data
            .iter()
            .enumerate()
            .map(|(i, &x)| x + rowv[i % d])
            .collect();
        let ng = self.needs(mat) || self.needs(row);
        Ok(self.push(sm, data, Op::AddRows { mat, row }, ng))
    }

    /// `map[B x C x H x W] + bias[C]` added per channel.
    pub fn add_channel_bias(&mut self, map: Var, bias: Var) -> Result<Var> {
        let sm = self.nodes[map.0].shape.clone();
        let sb = self.nodes[bias.0].shape.clone();
        if sm.len() != 4 || sb.len() != 1 || sm[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "add_channel_bias",
                left: sm,
                right: sb,
            });
        }
        let (b, c, h, w) = (sm[0], sm[1], sm[2], sm[3]);
        let plane = h * w;
        let biasv = &self.nodes[bias.0].data;
        let mut data = self.nodes[map.0].data.clone();
        for bi in 0..b {
            for (ci, &bv) in biasv.iter().enumerate() {
                let base = (bi * c + ci) * plane;
                for v in &mut data[base..base + plane] {
                    *v += bv;
                }
            }
        }
        let ng = self.needs(map) || self.needs(bias);
        Ok(self.push(sm, data, Op::AddChannelBias { map, bias }, ng))
    }

    /// Sparse constant matrix times dense `[N x d]`; gradient flows only into
    /// the dense operand.
    pub fn spmm(&mut self, mat: &Rc<SparseMat>, dense: Var) -> Result<Var> {
        let sd = self.nodes[dense.0].shape.clone();
        if sd.len() != 2 || sd[0] != mat.size() {
            return Err(Error::ShapeMismatch {
                op: "spmm",
                left: vec![mat.size(), mat.size()],
                right: sd,
            });
        }
        let d = sd[1];
        let mut data = vec![0.0; sd[0] * d];
        mat.mul_dense(&self.nodes[dense.0].data, d, &mut data);
        let ng = self.needs(dense);
        Ok(self.push(
            sd,
            data,
            Op::Spmm {
                mat: Rc::clone(mat),
                dense,
            },
            ng,
        ))
    }

    /// Gathers `table[indices[p]]` for every spatial position into a
    /// `B x d x h x w` map; backward scatter-adds into the table rows.
    pub fn lookup_rows(
        &mut self,
        table: Var,
        indices: Rc<Vec<usize>>,
        batch: usize,
        h: usize,
        w: usize,
    ) -> Result<Var> {
        let st = self.nodes[table.0].shape.clone();
        if st.len() != 2 {
            return Err(Error::Invalid(format!(
                "lookup_rows needs a 2-d table, got {:?}",
                st
            )));
        }
        let (rows, d) = (st[0], st[1]);
        if indices.len() != batch * h * w {
            return Err(Error::Invalid(format!(
                "lookup_rows got {} indices for {} positions",
                indices.len(),
                batch * h * w
            )));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::Invalid(format!(
                "lookup_rows index {} out of range for {} rows",
                bad, rows
            )));
        }
        let plane = h * w;
        let mut data = vec![0.0; batch * d * plane];
        let tdata = &self.nodes[table.0].data;
        for bi in 0..batch {
            for p in 0..plane {
                let idx = indices[bi * plane + p];
                let src = &tdata[idx * d..(idx + 1) * d];
                for (ci, &v) in src.iter().enumerate() {
                    data[bi * d * plane + ci * plane + p] = v;
                }
            }
        }
        let ng = self.needs(table);
        Ok(self.push(
            vec![batch, d, h, w],
            data,
            Op::LookupRows { table, indices },
            ng,
        ))
    }

    // ── convolution ─────────────────────────────────────────────────────

    /// Direct cross-correlation of `input[B x Cin x H x W]` with
    /// `kernel[Cout x Cin x k x k]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let si = self.nodes[input.0].shape.clone();
        let sk = self.nodes[kernel.0].shape.clone();
        if si.len() != 4 || sk.len() != 4 || sk[2] != sk[3] || si[1] != sk[1] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                left: si,
                right: sk,
            });
        }
        if stride == 0 {
            return Err(Error::Invalid("conv2d stride must be positive".into()));
        }
        let (batch, c_in, h_in, w_in) = (si[0], si[1], si[2], si[3]);
        let (c_out, ksize) = (sk[0], sk[2]);
        let h_num = h_in + 2 * padding;
        let w_num = w_in + 2 * padding;
        if h_num < ksize || w_num < ksize {
            return Err(Error::Invalid(format!(
                "conv2d has no valid output window: input {}x{}, k={}, stride={}, padding={}",
                h_in, w_in, ksize, stride, padding
            )));
        }
        // Floor semantics: trailing rows/columns that do not fit a full
        // window are dropped, matching the reference loop nest.
        let geom = ConvGeom {
            batch,
            c_in,
            h_in,
            w_in,
            c_out,
            ksize,
            stride,
            padding,
            h_out: (h_num - ksize) / stride + 1,
            w_out: (w_num - ksize) / stride + 1,
        };
        let cols = im2col(&self.nodes[input.0].data, &geom);
        let npos = geom.batch * geom.h_out * geom.w_out;
        let kdim = geom.c_in * geom.ksize * geom.ksize;
        let mut out_mat = vec![0.0; geom.c_out * npos];
        matmul_into(
            &self.nodes[kernel.0].data,
            &cols,
            geom.c_out,
            kdim,
            npos,
            &mut out_mat,
        );
        // out_mat is [c_out][b * h_out * w_out]; reorder to B x Cout x H' x W'.
        let plane = geom.h_out * geom.w_out;
        let mut data = vec![0.0; geom.batch * geom.c_out * plane];
        for co in 0..geom.c_out {
            for bi in 0..geom.batch {
                let src = &out_mat[co * npos + bi * plane..co * npos + (bi + 1) * plane];
                data[(bi * geom.c_out + co) * plane..(bi * geom.c_out + co + 1) * plane]
                    .copy_from_slice(src);
            }
        }
        let ng = self.needs(input) || self.needs(kernel);
        let shape = vec![geom.batch, geom.c_out, geom.h_out, geom.w_out];
        Ok(self.push(shape, data, Op::Conv2d { input, kernel, geom }, ng))
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Accumulates `d(loss)/d(node)` into every node that needs it.
    /// Each call contributes one full pass, so repeated calls without a
    /// fresh tape keep accumulating.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::Invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        // This pass's gradients live in a scratch array and merge into the
        // persistent buffers at the end; re-propagating previously
        // accumulated gradients would double-count them.
        let mut pass: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        pass[loss.0] = Some(vec![1.0]);

        let take_grad = |pass: &mut Vec<Option<Vec<f64>>>, v: Var, n: usize| -> Vec<f64> {
            pass[v.0].take().unwrap_or_else(|| vec![0.0; n])
        };
        let put_grad = |pass: &mut Vec<Option<Vec<f64>>>, v: Var, buf: Vec<f64>| {
            pass[v.0] = Some(buf);
        };

        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = pass[i].take() else {
                continue;
            };
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf | Op::StopGradient => {}
                Op::Add(a, b) => {
                    if self.needs(a) {
                        let mut ga = take_grad(&mut pass, a, self.nodes[a.0].data.len());
                        for (o, &gi) in ga.iter_mut().zip(&g) {
                            *o += gi;
                        }
                        put_grad(&mut pass, a, ga);
                    }
                    if self.needs(b) {
                        let mut gb = take_grad(&mut pass, b, self.nodes[b.0].data.len());
                        for (o, &gi) in gb.iter_mut().zip(&g) {
                            *o += gi;
                        }
                        put_grad(&mut pass, b, gb);
                    }
                }
                Op::Sub(a, b) => {
                    if self.needs(a) {
                        let mut ga = take_grad(&mut pass, a, self.nodes[a.0].data.len());
                        for (o, &gi) in ga.iter_mut().zip(&g) {
                            *o += gi;
                        }
                        put_grad(&mut pass, a, ga);
                    }
                    if self.needs(b) {
                        let mut gb = take_grad(&mut pass, b, self.nodes[b.0].data.len());
                        for (o, &gi) in gb.iter_mut().zip(&g) {
                            *o -= gi;
                        }
                        put_grad(&mut pass, b, gb);
                    }
                }
                Op::Mul(a, b) => {
                    if self.needs(a) {
                        let mut ga = take_grad(&mut pass, a, self.nodes[a.0].data.len());
                        for ((o, &gi), &bv) in ga.iter_mut().zip(&g).zip(&self.nodes[b.0].data) {
                            *o += gi * bv;
                        }
                        put_grad(&mut pass, a, ga);
                    }
                    if self.needs(b) {
                        let mut gb = take_grad(&mut pass, b, self.nodes[b.0].data.len());
                        for ((o, &gi), &av) in gb.iter_mut().zip(&g).zip(&self.nodes[a.0].data) {
                            *o += gi * av;
                        }
                        put_grad(&mut pass, b, gb);
                    }
                }
                Op::Scale(a, s) => {
                    if self.needs(a) {
                        let mut ga = take_grad(&mut pass, a, self.nodes[a.0].data.len());
                        for (o, &gi) in ga.iter_mut().zip(&g) {
                            *o += s * gi;
                        }
                        put_grad(&mut pass, a, ga);
                    }
                }
                Op::Relu(a) => {
                    if self.needs(a) {
                        let mut ga = take_grad(&mut pass, a, self.nodes[a.0].data.len());
                        for ((o, &gi), &x) in ga.iter_mut().zip(&g).zip(&self.nodes[a.0].data) {
                            if x > 0.0 {
                                *o += gi;
                            }
                        }
                        put_grad(&mut pass, a, ga);
                    }
                }
                Op::Sum(a) => {
                    if self.needs(a) {
                        let mut ga = take_grad(&mut pass, a, self.nodes[a.0].data.len());
                        for o in ga.iter_mut() {
                            *o += g[0];
                        }
                        put_grad(&mut pass, a, ga);
                    }
                }
                Op::Mse(a, b) => {
                    let scale = 2.0 * g[0] / self.nodes[a.0].data.len() as f64;
                    if self.needs(a) {
                        let mut ga = take_grad(&mut pass, a, self.nodes[a.0].data.len());
                        for (o, (&x, &y)) in ga
                            .iter_mut()
                            .zip(self.nodes[a.0].data.iter().zip(&self.nodes[b.0].data))
                        {
                            *o += scale * (x - y);
                        }
                        put_grad(&mut pass, a, ga);
                    }
                    if self.needs(b) {
                        let mut gb = take_grad(&mut pass, b, self.nodes[b.0].data.len());
                        for (o, (&x, &y)) in gb
                            .iter_mut()
                            .zip(self.nodes[a.0].data.iter().zip(&self.nodes[b.0].data))
                        {
                            *o -= scale * (x - y);
                        }
                        put_grad(&mut pass, b, gb);
                    }
                }
                Op::Reshape(a) => {
                    if self.needs(a) {
                        let mut ga = take_grad(&mut pass, a, self.nodes[a.0].data.len());
                        for (o, &gi) in ga.iter_mut().zip(&g) {
                            *o += gi;
                        }
                        put_grad(&mut pass, a, ga);
                    }
                }
                Op::ChannelHalf { input, half } => {
                    if self.needs(input) {
                        let shape = &self.nodes[input.0].shape;
                        let (b, c) = (shape[0], shape[1]);
                        let plane = shape[2] * shape[3];
                        let hc = c / 2;
                        let mut gi = take_grad(&mut pass, input, self.nodes[input.0].data.len());
                        for bi in 0..b {
                            let dst = bi * c * plane + half * hc * plane;
                            let src = bi * hc * plane;
                            for p in 0..hc * plane {
                                gi[dst + p] += g[src + p];
                            }
                        }
                        put_grad(&mut pass, input, gi);
                    }
                }
                Op::ChannelConcat(a, b) => {
                    let (ca, cb) = (self.nodes[a.0].shape[1], self.nodes[b.0].shape[1]);
                    let bn = self.nodes[a.0].shape[0];
                    let plane = self.nodes[a.0].shape[2] * self.nodes[a.0].shape[3];
                    if self.needs(a) {
                        let mut ga = take_grad(&mut pass, a, self.nodes[a.0].data.len());
                        for bi in 0..bn {
                            let src = bi * (ca + cb) * plane;
                            for p in 0..ca * plane {
                                ga[bi * ca * plane + p] += g[src + p];
                            }
                        }
                        put_grad(&mut pass, a, ga);
                    }
                    if self.needs(b) {
                        let mut gb = take_grad(&mut pass, b, self.nodes[b.0].data.len());
                        for bi in 0..bn {
                            let src = bi * (ca + cb) * plane + ca * plane;
                            for p in 0..cb * plane {
                                gb[bi * cb * plane + p] += g[src + p];
                            }
                        }
                        put_grad(&mut pass, b, gb);
                    }
                }
                Op::Upsample2x(a) => {
                    if self.needs(a) {
                        let shape = &self.nodes[a.0].shape;
                        let (h, w) = (shape[2], shape[3]);
                        let planes = shape[0] * shape[1];
                        let mut ga = take_grad(&mut pass, a, self.nodes[a.0].data.len());
                        for pi in 0..planes {
                            let dbase = pi * 4 * h * w;
                            let sbase = pi * h * w;
                            for y in 0..2 * h {
                                for x in 0..2 * w {
                                    ga[sbase + (y / 2) * w + x / 2] += g[dbase + y * 2 * w + x];
                                }
                            }
                        }
                        put_grad(&mut pass, a, ga);
                    }
                }
                Op::SliceRows { input, start } => {
                    if self.needs(input) {
                        let d = self.nodes[input.0].shape[1];
                        let mut gi = take_grad(&mut pass, input, self.nodes[input.0].data.len());
                        for (p, &gv) in g.iter().enumerate() {
                            gi[start * d + p] += gv;
                        }
                        put_grad(&mut pass, input, gi);
                    }
                }
                Op::Matmul(a, b) => {
                    let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                    let n = self.nodes[b.0].shape[1];
                    if self.needs(a) {
                        let mut ga = take_grad(&mut pass, a, self.nodes[a.0].data.len());
                        matmul_a_bt_into(&g, &self.nodes[b.0].data, m, n, k, &mut ga);
                        put_grad(&mut pass, a, ga);
                    }
                    if self.needs(b) {
                        let mut gb = take_grad(&mut pass, b, self.nodes[b.0].data.len());
                        matmul_at_b_into(&self.nodes[a.0].data, &g, m, k, n, &mut gb);
                        put_grad(&mut pass, b, gb);
                    }
                }
                Op::AddRows { mat, row } => {
                    if self.needs(mat) {
                        let mut gm = take_grad(&mut pass, mat, self.nodes[mat.0].data.len());
                        for (o, &gi) in gm.iter_mut().zip(&g) {
                            *o += gi;
                        }
                        put_grad(&mut pass, mat, gm);
                    }
                    if self.needs(row) {
                        let d = self.nodes[row.0].data.len();
                        let mut gr = take_grad(&mut pass, row, self.nodes[row.0].data.len());
                        for (p, &gv) in g.iter().enumerate() {
                            gr[p % d] += gv;
                        }
                        put_grad(&mut pass, row, gr);
                    }
                }
                Op::AddChannelBias { map, bias } => {
                    if self.needs(map) {
                        let mut gm = take_grad(&mut pass, map, self.nodes[map.0].data.len());
                        for (o, &gi) in gm.iter_mut().zip(&g) {
                            *o += gi;
                        }
                        put_grad(&mut pass, map, gm);
                    }
                    if self.needs(bias) {
                        let shape = &self.nodes[map.0].shape;
                        let (b, c) = (shape[0], shape[1]);
                        let plane = shape[2] * shape[3];
                        let mut gb = take_grad(&mut pass, bias, self.nodes[bias.0].data.len());
                        for bi in 0..b {
                            for (ci, acc) in gb.iter_mut().enumerate() {
                                let base = (bi * c + ci) * plane;
                                let mut s = 0.0;
                                for &gv in &g[base..base + plane] {
                                    s += gv;
                                }
                                *acc += s;
                            }
                        }
                        put_grad(&mut pass, bias, gb);
                    }
                }
                Op::Spmm { mat, dense } => {
                    if self.needs(dense) {
                        let d = self.nodes[dense.0].shape[1];
                        let mut gd = take_grad(&mut pass, dense, self.nodes[dense.0].data.len());
                        mat.mul_transpose_dense_acc(&g, d, &mut gd);
                        put_grad(&mut pass, dense, gd);
                    }
                }
                Op::LookupRows { table, indices } => {
                    if self.needs(table) {
                        let d = self.nodes[table.0].shape[1];
                        let out_shape = &self.nodes[i].shape;
                        let (batch, plane) = (out_shape[0], out_shape[2] * out_shape[3]);
                        let mut gt = take_grad(&mut pass, table, self.nodes[table.0].data.len());
                        for bi in 0..batch {
                            for p in 0..plane {
                                let idx = indices[bi * plane + p];
                                for ci in 0..d {
                                    gt[idx * d + ci] += g[bi * d * plane + ci * plane + p];
                                }
                            }
                        }
                        put_grad(&mut pass, table, gt);
                    }
                }
                Op::Conv2d { input, kernel, geom } => {
                    let npos = geom.batch * geom.h_out * geom.w_out;
                    let plane = geom.h_out * geom.w_out;
                    let kdim = geom.c_in * geom.ksize * geom.ksize;
                    // Reorder g from B x Cout x H' x W' to [c_out][b*plane].
                    let mut g_mat = vec![0.0; geom.c_out * npos];
                    for co in 0..geom.c_out {
                        for bi in 0..geom.batch {
                            let src = &g[(bi * geom.c_out + co) * plane
                                ..(bi * geom.c_out + co + 1) * plane];
                            g_mat[co * npos + bi * plane..co * npos + (bi + 1) * plane]
                                .copy_from_slice(src);
                        }
                    }
                    if self.needs(kernel) {
                        // im2col is recomputed instead of stored on the node.
                        let cols = im2col(&self.nodes[input.0].data, &geom);
                        let mut gk = take_grad(&mut pass, kernel, self.nodes[kernel.0].data.len());
                        matmul_a_bt_into(&g_mat, &cols, geom.c_out, npos, kdim, &mut gk);
                        put_grad(&mut pass, kernel, gk);
                    }
                    if self.needs(input) {
                        let mut cols_grad = vec![0.0; kdim * npos];
                        matmul_at_b_into(
                            &self.nodes[kernel.0].data,
                            &g_mat,
                            geom.c_out,
                            kdim,
                            npos,
                            &mut cols_grad,
                        );
                        let mut gi = take_grad(&mut pass, input, self.nodes[input.0].data.len());
                        col2im_acc(&cols_grad, &geom, &mut gi);
                        put_grad(&mut pass, input, gi);
                    }
                }
            }
            pass[i] = Some(g);
        }

        for (slot, contribution) in self.grads.iter_mut().zip(pass) {
            if let Some(pg) = contribution {
                match slot {
                    Some(acc) => {
                        for (o, v) in acc.iter_mut().zip(&pg) {
                            *o += v;
                        }
                    }
                    None => *slot = Some(pg),
                }
            }
        }
        Ok(())
    }
}

/// Valid output-x range `[lo, hi)` for one kernel column, i.e. the `ox` for
/// which `ox*stride + kx - padding` lands inside the input row. For stride 1
/// the whole range maps to one contiguous input slice.
fn valid_ox_range(geom: &ConvGeom, kx: usize) -> (usize, usize) {
    let lo = geom.padding.saturating_sub(kx).div_ceil(geom.stride);
    let lo = lo.min(geom.w_out);
    let mut hi = geom.w_out;
    // largest ox with ox*stride + kx - padding < w_in
    let limit = geom.w_in + geom.padding;
    if geom.stride > 0 {
        let max_plus_one = if limit > kx {
            (limit - kx - 1) / geom.stride + 1
        } else {
            0
        };
        hi = hi.min(max_plus_one);
    }
    (lo, hi.max(lo))
}

/// Unfolds `input[B x Cin x H x W]` into a `[Cin*k*k] x [B*H'*W']` matrix.
fn im2col(input: &[f64], geom: &ConvGeom) -> Vec<f64> {
    let kdim = geom.c_in * geom.ksize * geom.ksize;
    let plane = geom.h_out * geom.w_out;
    let npos = geom.batch * plane;
    let mut cols = vec![0.0; kdim * npos];
    for ci in 0..geom.c_in {
        for ky in 0..geom.ksize {
            for kx in 0..geom.ksize {
                let row = (ci * geom.ksize + ky) * geom.ksize + kx;
                let out_row = &mut cols[row * npos..(row + 1) * npos];
                let (ox_lo, ox_hi) = valid_ox_range(geom, kx);
                for bi in 0..geom.batch {
                    let in_base = (bi * geom.c_in + ci) * geom.h_in * geom.w_in;
                    for oy in 0..geom.h_out {
                        let iy = (oy * geom.stride + ky) as isize - geom.padding as isize;
                        if iy < 0 || iy >= geom.h_in as isize {
                            continue;
                        }
                        let dst_base = bi * plane + oy * geom.w_out;
                        let src_row = in_base + iy as usize * geom.w_in;
                        if geom.stride == 1 {
                            let ix0 = ox_lo + kx - geom.padding;
                            let len = ox_hi - ox_lo;
                            out_row[dst_base + ox_lo..dst_base + ox_hi]
                                .copy_from_slice(&input[src_row + ix0..src_row + ix0 + len]);
                        } else {
                            for ox in ox_lo..ox_hi {
                                let ix = ox * geom.stride + kx - geom.padding;
                                out_row[dst_base + ox] = input[src_row + ix];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Folds a column-space gradient back onto the input layout, accumulating
/// overlapping contributions.
fn col2im_acc(cols: &[f64], geom: &ConvGeom, input_grad: &mut [f64]) {
    let plane = geom.h_out * geom.w_out;
    let npos = geom.batch * plane;
    for ci in 0..geom.c_in {
        for ky in 0..geom.ksize {
            for kx in 0..geom.ksize {
                let row = (ci * geom.ksize + ky) * geom.ksize + kx;
                let col_row = &cols[row * npos..(row + 1) * npos];
                let (ox_lo, ox_hi) = valid_ox_range(geom, kx);
                for bi in 0..geom.batch {
                    let in_base = (bi * geom.c_in + ci) * geom.h_in * geom.w_in;
                    for oy in 0..geom.h_out {
                        let iy = (oy * geom.stride + ky) as isize - geom.padding as isize;
                        if iy < 0 || iy >= geom.h_in as isize {
                            continue;
                        }
                        let src_base = bi * plane + oy * geom.w_out;
                        let dst_row = in_base + iy as usize * geom.w_in;
                        if geom.stride == 1 {
                            let ix0 = ox_lo + kx - geom.padding;
                            for (o, &g) in input_grad[dst_row + ix0..dst_row + ix0 + ox_hi - ox_lo]
                                .iter_mut()
                                .zip(&col_row[src_base + ox_lo..src_base + ox_hi])
                            {
                                *o += g;
                            }
                        } else {
                            for ox in ox_lo..ox_hi {
                                let ix = ox * geom.stride + kx - geom.padding;
                                input_grad[dst_row + ix] += col_row[src_base + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf_grad(tape: &mut Tape, data: &[f64], shape: &[usize]) -> Var {
        tape.leaf_parts(data.to_vec(), shape, true)
    }

    #[test]
    fn add_componentwise() {
        let mut t = Tape::new();
        let a = leaf_grad(&mut t, &[1.0, 2.0], &[2]);
        let b = leaf_grad(&mut t, &[3.0, 4.0], &[2]);
        let c = t.add(a, b).unwrap();
        assert_eq!(t.value(c), &[4.0, 6.0]);
    }

    #[test]
    fn mul_by_zeros_annihilates_value_and_grad() {
        let mut t = Tape::new();
        let x = leaf_grad(&mut t, &[1.5, -2.0, 3.0], &[3]);
        let z = t.leaf_parts(vec![0.0; 3], &[3], false);
        let y = t.mul(x, z).unwrap();
        assert_eq!(t.value(y), &[0.0, 0.0, 0.0]);
        let s = t.sum(y);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn scale_forward_and_backward() {
        let mut t = Tape::new();
        let x = leaf_grad(&mut t, &[1.0, 2.0, 3.0], &[3]);
        let y = t.scale(x, 2.0);
        assert_eq!(t.value(y), &[2.0, 4.0, 6.0]);
        let s = t.sum(y);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn shape_mismatch_reports_both_shapes() {
        let mut t = Tape::new();
        let a = leaf_grad(&mut t, &[1.0, 2.0], &[2]);
        let b = leaf_grad(&mut t, &[1.0, 2.0, 3.0], &[3]);
        let err = t.add(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2]") && msg.contains("[3]"), "{msg}");
    }

    #[test]
    fn matmul_identity_and_dot() {
        let mut t = Tape::new();
        let eye = t.leaf_parts(vec![1.0, 0.0, 0.0, 1.0], &[2, 2], false);
        let m = leaf_grad(&mut t, &[1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let p = t.matmul(eye, m).unwrap();
        assert_eq!(t.value(p), &[1.0, 2.0, 3.0, 4.0]);

        let a = leaf_grad(&mut t, &[1.0, 2.0], &[1, 2]);
        let b = leaf_grad(&mut t, &[3.0, 4.0], &[2, 1]);
        let d = t.matmul(a, b).unwrap();
        assert_eq!(t.value(d), &[11.0]);
    }

    #[test]
    fn conv2d_pointwise_kernel_scales() {
        let mut t = Tape::new();
        let x = leaf_grad(&mut t, &[1.0; 9], &[1, 1, 3, 3]);
        let k = leaf_grad(&mut t, &[2.0], &[1, 1, 1, 1]);
        let y = t.conv2d(x, k, 1, 0).unwrap();
        assert_eq!(t.shape(y), &[1, 1, 3, 3]);
        assert_eq!(t.value(y), &[2.0; 9]);
    }

    #[test]
    fn conv2d_full_window_sums() {
        let mut t = Tape::new();
        let x = leaf_grad(&mut t, &[1.0, 2.0, 3.0, 4.0], &[1, 1, 2, 2]);
        let k = leaf_grad(&mut t, &[1.0; 4], &[1, 1, 2, 2]);
        let y = t.conv2d(x, k, 1, 0).unwrap();
        assert_eq!(t.shape(y), &[1, 1, 1, 1]);
        assert_eq!(t.value(y), &[10.0]);
    }

    #[test]
    fn conv2d_rejects_oversized_kernel() {
        let mut t = Tape::new();
        let x = leaf_grad(&mut t, &[0.0; 9], &[1, 1, 3, 3]);
        let k = leaf_grad(&mut t, &[0.0; 25], &[1, 1, 5, 5]);
        assert!(t.conv2d(x, k, 1, 0).is_err());
    }

    #[test]
    fn conv2d_floor_semantics_drop_trailing_columns() {
        // 3x3 input, k2 s2: windows at 0 only; column 2 is dropped.
        let mut t = Tape::new();
        let x = leaf_grad(&mut t, &(1..=9).map(f64::from).collect::<Vec<_>>(), &[1, 1, 3, 3]);
        let k = leaf_grad(&mut t, &[1.0; 4], &[1, 1, 2, 2]);
        let y = t.conv2d(x, k, 2, 0).unwrap();
        assert_eq!(t.shape(y), &[1, 1, 1, 1]);
        assert_eq!(t.value(y), &[1.0 + 2.0 + 4.0 + 5.0]);
    }

    #[test]
    fn relu_definition_and_subgradient_at_zero() {
        let mut t = Tape::new();
        let x = leaf_grad(&mut t, &[-1.0, 0.0, 2.0], &[3]);
        let y = t.relu(x);
        assert_eq!(t.value(y), &[0.0, 0.0, 2.0]);
        let s = t.sum(y);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn mse_of_identical_inputs_is_zero_with_zero_grad() {
        let mut t = Tape::new();
        let x = leaf_grad(&mut t, &[1.0, 2.0], &[2]);
        let y = t.mse(x, x).unwrap();
        assert_eq!(t.scalar_value(y), 0.0);
        t.backward(y).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn split_concat_roundtrip_is_bit_exact() {
        let mut t = Tape::new();
        let data: Vec<f64> = (0..2 * 4 * 3 * 3).map(|i| i as f64 * 0.171).collect();
        let x = leaf_grad(&mut t, &data, &[2, 4, 3, 3]);
        let (lo, hi) = t.channel_split(x).unwrap();
        let back = t.channel_concat(lo, hi).unwrap();
        assert!(t
            .value(back)
            .iter()
            .zip(&data)
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn channel_split_rejects_odd_channels() {
        let mut t = Tape::new();
        let x = leaf_grad(&mut t, &[0.0; 3 * 4], &[1, 3, 2, 2]);
        assert!(t.channel_split(x).is_err());
    }

    #[test]
    fn stop_gradient_identity_forward_zero_backward() {
        // forward identity
        let mut t = Tape::new();
        let x = leaf_grad(&mut t, &[1.0, 2.0, 3.0], &[3]);
        let sg = t.stop_gradient(x);
        assert_eq!(t.value(sg), &[1.0, 2.0, 3.0]);

        // loss = sum(sg(x) * x): grad wrt x equals x, not 2x
        let prod = t.mul(sg, x).unwrap();
        let s = t.sum(prod);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[1.0, 2.0, 3.0]);

        // loss = sum(sg(x)): grad wrt x is all-zero (never reached)
        let mut t2 = Tape::new();
        let x2 = leaf_grad(&mut t2, &[1.0, 2.0], &[2]);
        let sg2 = t2.stop_gradient(x2);
        let s2 = t2.sum(sg2);
        t2.backward(s2).unwrap();
        assert!(t2.grad(x2).is_none());
        assert_eq!(t2.grad_or_zeros(x2), vec![0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut t = Tape::new();
        let x = leaf_grad(&mut t, &[1.0, 2.0], &[2]);
        assert!(t.backward(x).is_err());
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut t = Tape::new();
        let x = leaf_grad(&mut t, &[1.0, 2.0], &[2]);
        let s = t.sum(x);
        t.backward(s).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn upsample_nearest_repeats_and_backward_pools() {
        let mut t = Tape::new();
        let x = leaf_grad(&mut t, &[1.0, 2.0, 3.0, 4.0], &[1, 1, 2, 2]);
        let y = t.upsample_nearest2x(x).unwrap();
        assert_eq!(t.shape(y), &[1, 1, 4, 4]);
        assert_eq!(
            t.value(y),
            &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0]
        );
        let s = t.sum(y);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[4.0, 4.0, 4.0, 4.0]);
    }

    #[test]
    fn lookup_rows_gathers_and_scatters() {
        let mut t = Tape::new();
        let table = leaf_grad(&mut t, &[1.0, 2.0, 10.0, 20.0], &[2, 2]);
        let out = t
            .lookup_rows(table, Rc::new(vec![1, 1, 0, 1]), 1, 2, 2)
            .unwrap();
        assert_eq!(t.shape(out), &[1, 2, 2, 2]);
        // position-major check: channel 0 plane then channel 1 plane
        assert_eq!(t.value(out), &[10.0, 10.0, 1.0, 10.0, 20.0, 20.0, 2.0, 20.0]);
        let s = t.sum(out);
        t.backward(s).unwrap();
        // row 0 hit once, row 1 three times, per channel
        assert_eq!(t.grad(table).unwrap(), &[1.0, 1.0, 3.0, 3.0]);
    }

    #[test]
    fn determinism_forward_backward_bitwise() {
        let run = || {
            let mut t = Tape::new();
            let data: Vec<f64> = (0..64).map(|i| ((i * 37 % 101) as f64) * 0.013 - 0.5).collect();
            let x = t.leaf_parts(data, &[1, 4, 4, 4], true);
            let kdata: Vec<f64> = (0..4 * 4 * 9).map(|i| ((i * 29 % 53) as f64) * 0.021 - 0.4).collect();
            let k = t.leaf_parts(kdata, &[4, 4, 3, 3], true);
            let y = t.conv2d(x, k, 1, 1).unwrap();
            let r = t.relu(y);
            let s = t.sum(r);
            t.backward(s).unwrap();
            (
                t.value(y).to_vec(),
                t.grad(x).unwrap().to_vec(),
                t.grad(k).unwrap().to_vec(),
            )
        };
        let (y1, gx1, gk1) = run();
        let (y2, gx2, gk2) = run();
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&y1), bits(&y2));
        assert_eq!(bits(&gx1), bits(&gx2));
        assert_eq!(bits(&gk1), bits(&gk2));
    }
}
