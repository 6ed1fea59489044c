use std::collections::BTreeMap;

use super::gemm::gemm;
use super::{dim_err, Element, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Deliberate backward-pass defects, used only as negative controls for
/// the gradient checker.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GradFault {
    /// Multiply the ReLU backward by this factor.
    ScaleReluGrad(f64),
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    ScaleBy {
        x: Var,
        s: Var,
    },
    Relu(Var),
    Sigmoid(Var),
    MaxPair(Var, Var),
    Reshape(Var),
    Transpose(Var),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        k: usize,
        padding: usize,
        // im2col buffer; empty for 1x1 kernels, which read the input directly
        cols: Vec<T>,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    MatMul {
        a: Var,
        b: Var,
        b_transposed: bool,
    },
    SoftmaxRows(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    SliceLead {
        x: Var,
        start: usize,
    },
    ConcatLead(Vec<Var>),
    Sum(Var),
    Mean(Var),
    BceLogits {
        logits: Var,
        target: Vec<T>,
    },
    L1 {
        x: Var,
        target: Vec<T>,
        mask: Vec<T>,
    },
    SoftmaxCe {
        logits: Var,
        labels: Vec<usize>,
        mask: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Records a forward computation so that [`Tape::backward`] can replay it
/// in reverse.
pub struct Tape<T: Element = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    params: BTreeMap<String, Var>,
    track_branches: bool,
    branch_hash: u64,
    fault: Option<GradFault>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape(
    op: &'static str,
    a: &Tensor<impl Element>,
    b: &Tensor<impl Element>,
) -> Result<(), TensorError> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn rank2(op: &'static str, t: &Tensor<impl Element>) -> Result<(usize, usize), TensorError> {
    match *t.shape() {
        [r, c] => Ok((r, c)),
        ref s => Err(dim_err(op, format!("expected rank-2 tensor, got {s:?}"))),
    }
}

fn slot<'a, T: Element>(
    grads: &'a mut [Option<Vec<T>>],
    nodes: &[Node<T>],
    v: Var,
) -> Option<&'a mut Vec<T>> {
    let node = &nodes[v.0];
    if !node.needs_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); node.value.numel()]))
}

fn im2col<T: Element>(
    input: &[T],
    c_in: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: usize,
) -> Vec<T> {
    let hw = h * w;
    let mut cols = vec![T::zero(); c_in * k * k * hw];
    for c in 0..c_in {
        let plane = &input[c * hw..(c + 1) * hw];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                let dx = kj as isize - pad as isize;
                let dy = ki as isize - pad as isize;
                let x_lo = (-dx).max(0) as usize;
                let x_hi = ((w as isize - dx).min(w as isize)).max(0) as usize;
                if x_lo >= x_hi {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let sy = sy as usize;
                    let sx_lo = (x_lo as isize + dx) as usize;
                    let len = x_hi - x_lo;
                    dst[y * w + x_lo..y * w + x_hi]
                        .copy_from_slice(&plane[sy * w + sx_lo..sy * w + sx_lo + len]);
                }
            }
        }
    }
    cols
}

fn col2im<T: Element>(
    cols: &[T],
    out: &mut [T],
    c_in: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: usize,
) {
    let hw = h * w;
    for c in 0..c_in {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * hw..(row + 1) * hw];
                let dx = kj as isize - pad as isize;
                let dy = ki as isize - pad as isize;
                let x_lo = (-dx).max(0) as usize;
                let x_hi = ((w as isize - dx).min(w as isize)).max(0) as usize;
                if x_lo >= x_hi {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let sy = sy as usize;
                    let sx_lo = (x_lo as isize + dx) as usize;
                    let plane =
                        &mut out[c * hw + sy * w + sx_lo..c * hw + sy * w + sx_lo + (x_hi - x_lo)];
                    for (o, &s) in plane.iter_mut().zip(&src[y * w + x_lo..y * w + x_hi]) {
                        *o = *o + s;
                    }
                }
            }
        }
    }
}

fn sigmoid<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            params: BTreeMap::new(),
            track_branches: false,
            branch_hash: 0xcbf2_9ce4_8422_2325,
            fault: None,
        }
    }

    /// Enables the branch signature used by the gradient checker to skip
    /// coordinates whose perturbation crosses a ReLU, max or L1 kink.
    pub fn with_branch_tracking(mut self) -> Self {
        self.track_branches = true;
        self
    }

    pub fn with_fault(mut self, fault: Option<GradFault>) -> Self {
        self.fault = fault;
        self
    }

    pub fn branch_signature(&self) -> u64 {
        self.branch_hash
    }

    fn note_branch(&mut self, bit: bool) {
        if self.track_branches {
            self.branch_hash ^= bit as u64 + 1;
            self.branch_hash = self.branch_hash.wrapping_mul(0x0100_0000_01b3);
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Records an input; gradients are tracked iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let needs = tensor.requires_grad();
        let mut value = tensor;
        value.grad = None;
        self.push(value, Op::Leaf, needs)
    }

    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    /// Binds a named trainable parameter, reusing the existing leaf if the
    /// name was bound before on this tape.
    pub fn param(&mut self, name: &str, tensor: &Tensor<f32>) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let v = self.leaf(tensor.cast::<T>().with_requires_grad(true));
        self.params.insert(name.to_string(), v);
        v
    }

    /// Makes later [`Tape::param`] calls for `name` resolve to `var`, so a
    /// caller can substitute its own leaf (e.g. a perturbed `f64` copy).
    pub fn bind_param(&mut self, name: &str, var: Var) {
        self.params.insert(name.to_string(), var);
    }

    pub fn param_var(&self, name: &str) -> Option<Var> {
        self.params.get(name).copied()
    }

    /// Bound parameter names with their accumulated gradients.
    pub fn param_grads(&self) -> impl Iterator<Item = (&str, Option<&[T]>)> {
        self.params
            .iter()
            .map(|(name, v)| (name.as_str(), self.grads[v.0].as_deref()))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    /// The recorded value with its gradient buffer attached.
    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let mut t = self.nodes[v.0].value.clone();
        t.requires_grad = self.nodes[v.0].needs_grad;
        t.grad = self.grads[v.0].clone();
        t
    }

    pub fn zero_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        make: impl FnOnce(Var, Var) -> Op<T>,
    ) -> Result<Var, TensorError> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        same_shape(op, va, vb)?;
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, make(a, b), needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    /// Element-wise maximum; ties select the first operand.
    pub fn max_pair(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = self.binary(
            "max_pair",
            a,
            b,
            |x, y| if x >= y { x } else { y },
            Op::MaxPair,
        )?;
        if self.track_branches {
            let picks: Vec<bool> = {
                let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                va.data()
                    .iter()
                    .zip(vb.data())
                    .map(|(x, y)| x >= y)
                    .collect()
            };
            picks.into_iter().for_each(|p| self.note_branch(p));
        }
        Ok(out)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let vx = &self.nodes[x.0].value;
        let value = Tensor::new(
            vx.shape().to_vec(),
            vx.data().iter().map(|&v| v * c).collect(),
        )
        .expect("same element count");
        let needs = self.needs(x);
        self.push(value, Op::Scale(x, c), needs)
    }

    /// Multiplies `x` by the single value held in `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var, TensorError> {
        let vs = &self.nodes[s.0].value;
        if vs.numel() != 1 {
            return Err(dim_err(
                "scale_by",
                format!("scalar operand has shape {:?}", vs.shape()),
            ));
        }
        let c = vs.data()[0];
        let vx = &self.nodes[x.0].value;
        let value = Tensor::new(
            vx.shape().to_vec(),
            vx.data().iter().map(|&v| v * c).collect(),
        )?;
        let needs = self.needs(x) || self.needs(s);
        Ok(self.push(value, Op::ScaleBy { x, s }, needs))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let vx = &self.nodes[x.0].value;
        let data: Vec<T> = vx.data().iter().map(|&v| v.max(T::zero())).collect();
        let value = Tensor::new(vx.shape().to_vec(), data).expect("same element count");
        if self.track_branches {
            let signs: Vec<bool> = self.nodes[x.0]
                .value
                .data()
                .iter()
                .map(|&v| v > T::zero())
                .collect();
            signs.into_iter().for_each(|p| self.note_branch(p));
        }
        let needs = self.needs(x);
        self.push(value, Op::Relu(x), needs)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let vx = &self.nodes[x.0].value;
        let data = vx.data().iter().map(|&v| sigmoid(v)).collect();
        let value = Tensor::new(vx.shape().to_vec(), data).expect("same element count");
        let needs = self.needs(x);
        self.push(value, Op::Sigmoid(x), needs)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let value = self.nodes[x.0].value.clone().reshape(shape)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::Reshape(x), needs))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var, TensorError> {
        let vx = &self.nodes[x.0].value;
        let (r, c) = rank2("transpose", vx)?;
        let src = vx.data();
        let mut data = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        let value = Tensor::new(vec![c, r], data)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::Transpose(x), needs))
    }

    /// Same-size 2D cross-correlation of `input[C_in,H,W]` with
    /// `weight[C_out,C_in,k,k]`.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        padding: usize,
    ) -> Result<Var, TensorError> {
        let (vi, vw, vb) = (
            &self.nodes[input.0].value,
            &self.nodes[weight.0].value,
            &self.nodes[bias.0].value,
        );
        let (c_in, h, w) = match *vi.shape() {
            [c, h, w] => (c, h, w),
            ref s => {
                return Err(dim_err(
                    "conv2d",
                    format!("input must be [C,H,W], got {s:?}"),
                ))
            }
        };
        let (c_out, k) = match *vw.shape() {
            [o, i, k1, k2] if i == c_in && k1 == k2 => (o, k1),
            ref s => {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d",
                    left: vi.shape().to_vec(),
                    right: s.to_vec(),
                })
            }
        };
        if k % 2 == 0 || padding * 2 + 1 != k {
            return Err(dim_err(
                "conv2d",
                format!("kernel {k} with padding {padding} does not preserve spatial size"),
            ));
        }
        if vb.shape() != [c_out] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d bias",
                left: vec![c_out],
                right: vb.shape().to_vec(),
            });
        }
        let hw = h * w;
        let ck = c_in * k * k;
        let cols = if k == 1 {
            Vec::new()
        } else {
            im2col(vi.data(), c_in, h, w, k, padding)
        };
        let src = if k == 1 { vi.data() } else { &cols[..] };
        let mut out = vec![T::zero(); c_out * hw];
        for (o, &b) in vb.data().iter().enumerate() {
            out[o * hw..(o + 1) * hw].iter_mut().for_each(|v| *v = b);
        }
        gemm(c_out, ck, hw, vw.data(), false, src, false, &mut out, true);
        let value = Tensor::new(vec![c_out, h, w], out)?;
        let needs = self.needs(input) || self.needs(weight) || self.needs(bias);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                k,
                padding,
                cols,
            },
            needs,
        ))
    }

    /// Per-token affine map `x[T,D_in] · w[D_in,D_out] + b[D_out]`.
    pub fn linear_tokens(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
    ) -> Result<Var, TensorError> {
        let (vi, vw, vb) = (
            &self.nodes[input.0].value,
            &self.nodes[weight.0].value,
            &self.nodes[bias.0].value,
        );
        let (t, d_in) = rank2("linear_tokens", vi)?;
        let (w_in, d_out) = rank2("linear_tokens", vw)?;
        if w_in != d_in || vb.shape() != [d_out] {
            return Err(TensorError::ShapeMismatch {
                op: "linear_tokens",
                left: vi.shape().to_vec(),
                right: vw.shape().to_vec(),
            });
        }
        let mut out = Vec::with_capacity(t * d_out);
        for _ in 0..t {
            out.extend_from_slice(vb.data());
        }
        gemm(
            t,
            d_in,
            d_out,
            vi.data(),
            false,
            vw.data(),
            false,
            &mut out,
            true,
        );
        let value = Tensor::new(vec![t, d_out], out)?;
        let needs = self.needs(input) || self.needs(weight) || self.needs(bias);
        Ok(self.push(
            value,
            Op::Linear {
                input,
                weight,
                bias,
            },
            needs,
        ))
    }

    /// `a[M,K] · b[K,N]`, or `a[M,K] · b[N,K]ᵀ` when `b_transposed`.
    pub fn matmul(&mut self, a: Var, b: Var, b_transposed: bool) -> Result<Var, TensorError> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (m, k) = rank2("matmul", va)?;
        let (r, c) = rank2("matmul", vb)?;
        let (kb, n) = if b_transposed { (c, r) } else { (r, c) };
        if kb != k {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: va.shape().to_vec(),
                right: vb.shape().to_vec(),
            });
        }
        let mut out = vec![T::zero(); m * n];
        gemm(
            m,
            k,
            n,
            va.data(),
            false,
            vb.data(),
            b_transposed,
            &mut out,
            false,
        );
        let value = Tensor::new(vec![m, n], out)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::MatMul { a, b, b_transposed }, needs))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var, TensorError> {
        let vx = &self.nodes[x.0].value;
        let (r, c) = rank2("softmax_rows", vx)?;
        vx.assert_finite("softmax_rows")?;
        let mut out = vx.data().to_vec();
        for row in out.chunks_mut(c.max(1)).take(r) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s = s + *v;
            }
            for v in row.iter_mut() {
                *v = *v / s;
            }
        }
        let value = Tensor::new(vec![r, c], out)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::SoftmaxRows(x), needs))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let vx = &self.nodes[x.0].value;
        let (r, c) = rank2("slice_cols", vx)?;
        if start + len > c {
            return Err(dim_err(
                "slice_cols",
                format!("columns {start}..{} of {c}", start + len),
            ));
        }
        let mut out = Vec::with_capacity(r * len);
        for row in vx.data().chunks(c) {
            out.extend_from_slice(&row[start..start + len]);
        }
        let value = Tensor::new(vec![r, len], out)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::SliceCols { x, start }, needs))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = parts
            .first()
            .ok_or_else(|| dim_err("concat_cols", "no operands"))?;
        let (r, _) = rank2("concat_cols", &self.nodes[first.0].value)?;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (pr, pc) = rank2("concat_cols", &self.nodes[p.0].value)?;
            if pr != r {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    left: self.nodes[first.0].value.shape().to_vec(),
                    right: self.nodes[p.0].value.shape().to_vec(),
                });
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (p, &wd) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.nodes[p.0].value.data()[i * wd..(i + 1) * wd]);
            }
        }
        let value = Tensor::new(vec![r, total], out)?;
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), needs))
    }

    /// Slice `len` entries of the leading dimension (channels of a `[C,H,W]`).
    pub fn slice_lead(&mut self, x: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let vx = &self.nodes[x.0].value;
        let lead = *vx
            .shape()
            .first()
            .ok_or_else(|| dim_err("slice_lead", "rank-0 input"))?;
        if start + len > lead {
            return Err(dim_err(
                "slice_lead",
                format!("rows {start}..{} of {lead}", start + len),
            ));
        }
        let inner: usize = vx.shape()[1..].iter().product();
        let data = vx.data()[start * inner..(start + len) * inner].to_vec();
        let mut shape = vx.shape().to_vec();
        shape[0] = len;
        let value = Tensor::new(shape, data)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::SliceLead { x, start }, needs))
    }

    pub fn concat_lead(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = parts
            .first()
            .ok_or_else(|| dim_err("concat_lead", "no operands"))?;
        let tail = self.nodes[first.0].value.shape()[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for p in parts {
            let v = &self.nodes[p.0].value;
            if v.shape()[1..] != tail[..] {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_lead",
                    left: self.nodes[first.0].value.shape().to_vec(),
                    right: v.shape().to_vec(),
                });
            }
            lead += v.shape()[0];
            data.extend_from_slice(v.data());
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let value = Tensor::new(shape, data)?;
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(value, Op::ConcatLead(parts.to_vec()), needs))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0]
            .value
            .data()
            .iter()
            .fold(T::zero(), |a, &b| a + b);
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::Sum(x), needs)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let vx = &self.nodes[x.0].value;
        let n = T::from_f64(vx.numel().max(1) as f64);
        let s = vx.data().iter().fold(T::zero(), |a, &b| a + b) / n;
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::Mean(x), needs)
    }

    /// Summed binary cross-entropy on logits against `target` in [0,1].
    pub fn bce_with_logits(&mut self, logits: Var, target: Vec<T>) -> Result<Var, TensorError> {
        let vx = &self.nodes[logits.0].value;
        if target.len() != vx.numel() {
            return Err(dim_err(
                "bce_with_logits",
                format!("{} targets for {} logits", target.len(), vx.numel()),
            ));
        }
        let mut s = T::zero();
        for (&x, &t) in vx.data().iter().zip(&target) {
            s = s + x.max(T::zero()) - x * t + (-x.abs()).exp().ln_1p();
        }
        let needs = self.needs(logits);
        Ok(self.push(Tensor::scalar(s), Op::BceLogits { logits, target }, needs))
    }

    /// `Σ mask · |x − target|`.
    pub fn l1_masked(&mut self, x: Var, target: Vec<T>, mask: Vec<T>) -> Result<Var, TensorError> {
        let vx = &self.nodes[x.0].value;
        if target.len() != vx.numel() || mask.len() != vx.numel() {
            return Err(dim_err(
                "l1_masked",
                "target/mask length differs from input",
            ));
        }
        let mut s = T::zero();
        let mut signs = Vec::new();
        for ((&v, &t), &m) in vx.data().iter().zip(&target).zip(&mask) {
            s = s + m * (v - t).abs();
            if self.track_branches && m != T::zero() {
                signs.push(v > t);
            }
        }
        signs.into_iter().for_each(|p| self.note_branch(p));
        let needs = self.needs(x);
        Ok(self.push(Tensor::scalar(s), Op::L1 { x, target, mask }, needs))
    }

    /// Masked softmax cross-entropy over the leading (class) axis of
    /// `logits[K, ...]`, one label per trailing position.
    pub fn softmax_ce(
        &mut self,
        logits: Var,
        labels: Vec<usize>,
        mask: Vec<T>,
    ) -> Result<Var, TensorError> {
        let vx = &self.nodes[logits.0].value;
        let k = *vx
            .shape()
            .first()
            .ok_or_else(|| dim_err("softmax_ce", "rank-0 logits"))?;
        let n = vx.numel() / k.max(1);
        if labels.len() != n || mask.len() != n {
            return Err(dim_err(
                "softmax_ce",
                format!("{} labels for {n} positions", labels.len()),
            ));
        }
        let d = vx.data();
        let mut s = T::zero();
        for p in 0..n {
            if mask[p] == T::zero() {
                continue;
            }
            if labels[p] >= k {
                return Err(dim_err(
                    "softmax_ce",
                    format!("label {} out of {k} classes", labels[p]),
                ));
            }
            let m = (0..k).map(|c| d[c * n + p]).fold(T::neg_infinity(), T::max);
            let lse = (0..k)
                .map(|c| (d[c * n + p] - m).exp())
                .fold(T::zero(), |a, b| a + b)
                .ln()
                + m;
            s = s + mask[p] * (lse - d[labels[p] * n + p]);
        }
        let needs = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(s),
            Op::SoftmaxCe {
                logits,
                labels,
                mask,
            },
            needs,
        ))
    }

    /// Accumulates `d loss / d v` into every reachable node that needs a
    /// gradient. Calling twice without [`Tape::zero_grads`] accumulates.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        let lv = &self.nodes[loss.0].value;
        if lv.numel() != 1 {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        let fault = self.fault;
        let Tape { nodes, grads, .. } = self;
        // seed separately so repeated calls accumulate into intermediate
        // buffers without doubling the seed itself
        let mut pending: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        pending[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = pending[i].take() else { continue };
            let node = &nodes[i];
            if !node.needs_grad {
                continue;
            }
            propagate(nodes, &mut pending, i, &g, fault);
            let acc = grads[i].get_or_insert_with(|| vec![T::zero(); g.len()]);
            for (a, &v) in acc.iter_mut().zip(&g) {
                *a = *a + v;
            }
        }
        Ok(())
    }
}

fn propagate<T: Element>(
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
    i: usize,
    g: &[T],
    fault: Option<GradFault>,
) {
    let val = |v: Var| nodes[v.0].value.data();
    match &nodes[i].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            if let Some(ga) = slot(grads, nodes, *a) {
                ga.iter_mut().zip(g).for_each(|(x, &y)| *x = *x + y);
            }
            if let Some(gb) = slot(grads, nodes, *b) {
                gb.iter_mut().zip(g).for_each(|(x, &y)| *x = *x + y);
            }
        }
        Op::Sub(a, b) => {
            if let Some(ga) = slot(grads, nodes, *a) {
                ga.iter_mut().zip(g).for_each(|(x, &y)| *x = *x + y);
            }
            if let Some(gb) = slot(grads, nodes, *b) {
                gb.iter_mut().zip(g).for_each(|(x, &y)| *x = *x - y);
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            if let Some(ga) = slot(grads, nodes, *a) {
                for ((x, &y), &o) in ga.iter_mut().zip(g).zip(bv) {
                    *x = *x + y * o;
                }
            }
            if let Some(gb) = slot(grads, nodes, *b) {
                for ((x, &y), &o) in gb.iter_mut().zip(g).zip(av) {
                    *x = *x + y * o;
                }
            }
        }
        Op::Scale(x, c) => {
            if let Some(gx) = slot(grads, nodes, *x) {
                gx.iter_mut().zip(g).for_each(|(a, &y)| *a = *a + *c * y);
            }
        }
        Op::ScaleBy { x, s } => {
            let c = val(*s)[0];
            let xv = val(*x);
            let ds = g
                .iter()
                .zip(xv)
                .fold(T::zero(), |acc, (&y, &v)| acc + y * v);
            if let Some(gx) = slot(grads, nodes, *x) {
                gx.iter_mut().zip(g).for_each(|(a, &y)| *a = *a + c * y);
            }
            if let Some(gs) = slot(grads, nodes, *s) {
                gs[0] = gs[0] + ds;
            }
        }
        Op::Relu(x) => {
            let factor = match fault {
                Some(GradFault::ScaleReluGrad(f)) => T::from_f64(f),
                None => T::one(),
            };
            let xv = val(*x);
            if let Some(gx) = slot(grads, nodes, *x) {
                for ((a, &y), &v) in gx.iter_mut().zip(g).zip(xv) {
                    if v > T::zero() {
                        *a = *a + factor * y;
                    }
                }
            }
        }
        Op::Sigmoid(x) => {
            let yv = nodes[i].value.data();
            if let Some(gx) = slot(grads, nodes, *x) {
                for ((a, &d), &y) in gx.iter_mut().zip(g).zip(yv) {
                    *a = *a + d * y * (T::one() - y);
                }
            }
        }
        Op::MaxPair(a, b) => {
            let picks: Vec<bool> = val(*a).iter().zip(val(*b)).map(|(x, y)| x >= y).collect();
            if let Some(ga) = slot(grads, nodes, *a) {
                for ((x, &y), &p) in ga.iter_mut().zip(g).zip(&picks) {
                    if p {
                        *x = *x + y;
                    }
                }
            }
            if let Some(gb) = slot(grads, nodes, *b) {
                for ((x, &y), &p) in gb.iter_mut().zip(g).zip(&picks) {
                    if !p {
                        *x = *x + y;
                    }
                }
            }
        }
        Op::Reshape(x) => {
            if let Some(gx) = slot(grads, nodes, *x) {
                gx.iter_mut().zip(g).for_each(|(a, &y)| *a = *a + y);
            }
        }
        Op::Transpose(x) => {
            let (r, c) = (nodes[x.0].value.shape()[0], nodes[x.0].value.shape()[1]);
            if let Some(gx) = slot(grads, nodes, *x) {
                for i in 0..r {
                    for j in 0..c {
                        gx[i * c + j] = gx[i * c + j] + g[j * r + i];
                    }
                }
            }
        }
        Op::Conv2d {
            input,
            weight,
            bias,
            k,
            padding,
            cols,
        } => {
            let ishape = nodes[input.0].value.shape();
            let (c_in, h, w) = (ishape[0], ishape[1], ishape[2]);
            let hw = h * w;
            let c_out = nodes[weight.0].value.shape()[0];
            let ck = c_in * k * k;
            if let Some(gb) = slot(grads, nodes, *bias) {
                for (o, gbo) in gb.iter_mut().enumerate() {
                    *gbo = g[o * hw..(o + 1) * hw].iter().fold(*gbo, |a, &v| a + v);
                }
            }
            let src: &[T] = if *k == 1 { val(*input) } else { cols };
            if let Some(gw) = slot(grads, nodes, *weight) {
                gemm(c_out, hw, ck, g, false, src, true, gw, true);
            }
            if nodes[input.0].needs_grad {
                let wv = val(*weight);
                if *k == 1 {
                    let gx = slot(grads, nodes, *input).expect("needs grad");
                    gemm(ck, c_out, hw, wv, true, g, false, gx, true);
                } else {
                    let mut dcols = vec![T::zero(); ck * hw];
                    gemm(ck, c_out, hw, wv, true, g, false, &mut dcols, false);
                    let gx = slot(grads, nodes, *input).expect("needs grad");
                    col2im(&dcols, gx, c_in, h, w, *k, *padding);
                }
            }
        }
        Op::Linear {
            input,
            weight,
            bias,
        } => {
            let (t, d_in) = (
                nodes[input.0].value.shape()[0],
                nodes[input.0].value.shape()[1],
            );
            let d_out = nodes[weight.0].value.shape()[1];
            if let Some(gb) = slot(grads, nodes, *bias) {
                for row in g.chunks(d_out) {
                    gb.iter_mut().zip(row).for_each(|(a, &y)| *a = *a + y);
                }
            }
            if let Some(gw) = slot(grads, nodes, *weight) {
                gemm(d_in, t, d_out, val(*input), true, g, false, gw, true);
            }
            if nodes[input.0].needs_grad {
                let wv = val(*weight);
                let gx = slot(grads, nodes, *input).expect("needs grad");
                gemm(t, d_out, d_in, g, false, wv, true, gx, true);
            }
        }
        Op::MatMul { a, b, b_transposed } => {
            let (m, k) = (nodes[a.0].value.shape()[0], nodes[a.0].value.shape()[1]);
            let n = nodes[i].value.shape()[1];
            if nodes[a.0].needs_grad {
                let bv = val(*b);
                let ga = slot(grads, nodes, *a).expect("needs grad");
                // d a = g · op(b)ᵀ
                gemm(m, n, k, g, false, bv, !*b_transposed, ga, true);
            }
            if nodes[b.0].needs_grad {
                let av = val(*a);
                let gb = slot(grads, nodes, *b).expect("needs grad");
                if *b_transposed {
                    // b is [N,K]: d b = gᵀ · a
                    gemm(n, m, k, g, true, av, false, gb, true);
                } else {
                    gemm(k, m, n, av, true, g, false, gb, true);
                }
            }
        }
        Op::SoftmaxRows(x) => {
            let y = nodes[i].value.data();
            let c = nodes[i].value.shape()[1].max(1);
            if let Some(gx) = slot(grads, nodes, *x) {
                for ((grow, yrow), gxrow) in g.chunks(c).zip(y.chunks(c)).zip(gx.chunks_mut(c)) {
                    let dot = grow
                        .iter()
                        .zip(yrow)
                        .fold(T::zero(), |a, (&p, &q)| a + p * q);
                    for ((o, &gy), &yy) in gxrow.iter_mut().zip(grow).zip(yrow) {
                        *o = *o + yy * (gy - dot);
                    }
                }
            }
        }
        Op::SliceCols { x, start } => {
            let c = nodes[x.0].value.shape()[1];
            let len = nodes[i].value.shape()[1];
            if let Some(gx) = slot(grads, nodes, *x) {
                for (r, grow) in g.chunks(len.max(1)).enumerate() {
                    for (j, &v) in grow.iter().enumerate() {
                        let idx = r * c + start + j;
                        gx[idx] = gx[idx] + v;
                    }
                }
            }
        }
        Op::ConcatCols(parts) => {
            let total = nodes[i].value.shape()[1];
            let mut offset = 0;
            for p in parts {
                let wd = nodes[p.0].value.shape()[1];
                if let Some(gp) = slot(grads, nodes, *p) {
                    for (r, grow) in gp.chunks_mut(wd.max(1)).enumerate() {
                        for (j, o) in grow.iter_mut().enumerate() {
                            *o = *o + g[r * total + offset + j];
                        }
                    }
                }
                offset += wd;
            }
        }
        Op::SliceLead { x, start } => {
            let inner: usize = nodes[x.0].value.shape()[1..].iter().product();
            if let Some(gx) = slot(grads, nodes, *x) {
                let dst = &mut gx[start * inner..start * inner + g.len()];
                dst.iter_mut().zip(g).for_each(|(a, &y)| *a = *a + y);
            }
        }
        Op::ConcatLead(parts) => {
            let mut offset = 0;
            for p in parts {
                let n = nodes[p.0].value.numel();
                if let Some(gp) = slot(grads, nodes, *p) {
                    gp.iter_mut()
                        .zip(&g[offset..offset + n])
                        .for_each(|(a, &y)| *a = *a + y);
                }
                offset += n;
            }
        }
        Op::Sum(x) => {
            if let Some(gx) = slot(grads, nodes, *x) {
                gx.iter_mut().for_each(|a| *a = *a + g[0]);
            }
        }
        Op::Mean(x) => {
            let n = T::from_f64(nodes[x.0].value.numel().max(1) as f64);
            if let Some(gx) = slot(grads, nodes, *x) {
                gx.iter_mut().for_each(|a| *a = *a + g[0] / n);
            }
        }
        Op::BceLogits { logits, target } => {
            let xv = val(*logits);
            if let Some(gx) = slot(grads, nodes, *logits) {
                for ((a, &x), &t) in gx.iter_mut().zip(xv).zip(target) {
                    *a = *a + g[0] * (sigmoid(x) - t);
                }
            }
        }
        Op::L1 { x, target, mask } => {
            let xv = val(*x);
            if let Some(gx) = slot(grads, nodes, *x) {
                for (((a, &v), &t), &m) in gx.iter_mut().zip(xv).zip(target).zip(mask) {
                    let d = v - t;
                    let sign = if d > T::zero() {
                        T::one()
                    } else if d < T::zero() {
                        -T::one()
                    } else {
                        T::zero()
                    };
                    *a = *a + g[0] * m * sign;
                }
            }
        }
        Op::SoftmaxCe {
            logits,
            labels,
            mask,
        } => {
            let xv = val(*logits);
            let k = nodes[logits.0].value.shape()[0];
            let n = xv.len() / k.max(1);
            if let Some(gx) = slot(grads, nodes, *logits) {
                for p in 0..n {
                    if mask[p] == T::zero() {
                        continue;
                    }
                    let m = (0..k)
                        .map(|c| xv[c * n + p])
                        .fold(T::neg_infinity(), T::max);
                    let z = (0..k)
                        .map(|c| (xv[c * n + p] - m).exp())
                        .fold(T::zero(), |a, b| a + b);
                    for c in 0..k {
                        let prob = (xv[c * n + p] - m).exp() / z;
                        let onehot = if c == labels[p] { T::one() } else { T::zero() };
                        gx[c * n + p] = gx[c * n + p] + g[0] * mask[p] * (prob - onehot);
                    }
                }
            }
        }
    }
}
