use rustfft::num_complex::Complex64;

use super::fft::{self, Direction};
use super::{numel, strides, DType, Result, Tensor, TensorError};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
}

/// How an operand maps into the full result of a broadcasting op.
#[derive(Debug, Clone)]
enum Bcast {
    Same,
    Scalar,
    /// Operand equals the trailing `len` elements of every row.
    Suffix(usize),
    General(Vec<usize>),
}

impl Bcast {
    #[inline]
    fn at(&self, i: usize) -> usize {
        match self {
            Bcast::Same => i,
            Bcast::Scalar => 0,
            Bcast::Suffix(len) => i % len,
            Bcast::General(map) => map[i],
        }
    }

    /// Broadcast `small` into `full` (numpy rules, `small` only).
    fn new(full: &[usize], small: &[usize]) -> Option<Bcast> {
        if full == small {
            return Some(Bcast::Same);
        }
        if small.len() > full.len() {
            return None;
        }
        if numel(small) == 1 {
            return Some(Bcast::Scalar);
        }
        let lead = full.len() - small.len();
        let aligned: Vec<usize> = std::iter::repeat_n(1, lead).chain(small.iter().copied()).collect();
        if aligned.iter().zip(full).any(|(&s, &f)| s != 1 && s != f) {
            return None;
        }
        let first = aligned.iter().position(|&s| s != 1).unwrap_or(full.len());
        if aligned[first..] == full[first..] {
            return Some(Bcast::Suffix(numel(&full[first..])));
        }
        let small_strides = strides(&aligned);
        let eff: Vec<usize> = aligned
            .iter()
            .zip(&small_strides)
            .map(|(&s, &st)| if s == 1 { 0 } else { st })
            .collect();
        let n = numel(full);
        let mut map = Vec::with_capacity(n);
        let mut idx = vec![0usize; full.len()];
        let mut off = 0usize;
        for _ in 0..n {
            map.push(off);
            for d in (0..full.len()).rev() {
                idx[d] += 1;
                off += eff[d];
                if idx[d] < full[d] {
                    break;
                }
                off -= eff[d] * full[d];
                idx[d] = 0;
            }
        }
        Some(Bcast::General(map))
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Binary {
        kind: Binary,
        a: Var,
        b: Var,
        a_map: Bcast,
        b_map: Bcast,
    },
    Scale(Var, f64),
    Gelu(Var),
    Cos(Var),
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        shared_b: bool,
    },
    Permute(Var, Vec<usize>),
    Reshape(Var),
    SumAxis(Var, usize),
    Sum(Var),
    Fft2 {
        a: Var,
        dir: Direction,
    },
    RealPart(Var),
    AsPairs(Var),
    FromPairs(Var),
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Append-only computation tape. Nodes are stored in creation order, which is a
/// topological order, so the backward sweep visits each node exactly once.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

pub const GROUP_NORM_EPS: f64 = 1e-5;

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

#[inline]
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / SQRT_2))
}

#[inline]
pub fn gelu(x: f64) -> f64 {
    x * normal_cdf(x)
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    normal_cdf(x) + x * INV_SQRT_2PI * (-0.5 * x * x).exp()
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated adjoint of `v` after [`Graph::backward`]. Nodes that require a
    /// gradient but were not reached report an all-zero adjoint.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let data = node.grad.clone().unwrap_or_else(|| vec![0.0; node.value.data().len()]);
        Some(Tensor::with_dtype(node.value.shape(), node.value.dtype(), data).expect("grad shape"))
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn real(&self, op: &'static str, v: Var) -> Result<&Tensor> {
        let t = &self.nodes[v.0].value;
        if t.dtype() != DType::Real {
            return Err(TensorError::DType {
                op,
                expected: DType::Real,
            });
        }
        Ok(t)
    }

    // ---- elementwise -------------------------------------------------------

    fn binary(&mut self, kind: Binary, op: &'static str, a: Var, b: Var) -> Result<Var> {
        let ta = self.real(op, a)?;
        let tb = self.real(op, b)?;
        let (full, a_map, b_map) = if let Some(m) = Bcast::new(ta.shape(), tb.shape()) {
            (ta.shape().to_vec(), Bcast::Same, m)
        } else if let Some(m) = Bcast::new(tb.shape(), ta.shape()) {
            (tb.shape().to_vec(), m, Bcast::Same)
        } else {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        };
        let (da, db) = (ta.data(), tb.data());
        let n = numel(&full);
        let out: Vec<f64> = match kind {
            Binary::Add => (0..n).map(|i| da[a_map.at(i)] + db[b_map.at(i)]).collect(),
            Binary::Sub => (0..n).map(|i| da[a_map.at(i)] - db[b_map.at(i)]).collect(),
            Binary::Mul => (0..n).map(|i| da[a_map.at(i)] * db[b_map.at(i)]).collect(),
        };
        let rg = self.rg(&[a, b]);
        let value = Tensor::new(&full, out)?;
        Ok(self.push(
            value,
            Op::Binary {
                kind,
                a,
                b,
                a_map,
                b_map,
            },
            rg,
        ))
    }

    /// Elementwise sum; one operand may broadcast into the other.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, "add", a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, "sub", a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, "mul", a, b)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let t = self.real("scale", a)?;
        let value = Tensor::new(t.shape(), t.data().iter().map(|x| x * c).collect())?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Scale(a, c), rg))
    }

    /// Exact GELU, `x * Phi(x)`.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let t = self.real("gelu", a)?;
        let value = Tensor::new(t.shape(), t.data().iter().map(|&x| gelu(x)).collect())?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Gelu(a), rg))
    }

    pub fn cos(&mut self, a: Var) -> Result<Var> {
        let t = self.real("cos", a)?;
        let value = Tensor::new(t.shape(), t.data().iter().map(|x| x.cos()).collect())?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Cos(a), rg))
    }

    // ---- linear algebra ----------------------------------------------------

    /// `a: [..., m, k]` times `b: [k, n]` (shared) or `b: [..., k, n]` (same batch).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let ta = self.real("matmul", a)?;
        let tb = self.real("matmul", b)?;
        let (sa, sb) = (ta.shape(), tb.shape());
        let mismatch = || TensorError::ShapeMismatch {
            op: "matmul",
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(mismatch());
        }
        let lead = &sa[..sa.len() - 2];
        let batch = numel(lead);
        let shared_b = sb.len() == 2;
        if !shared_b && sb[..sb.len() - 2] != *lead {
            return Err(mismatch());
        }
        let mut out = vec![0.0; batch * m * n];
        if shared_b {
            gemm(batch * m, k, n, ta.data(), (k, 1), tb.data(), (n, 1), &mut out, 0.0);
        } else {
            for i in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &ta.data()[i * m * k..(i + 1) * m * k],
                    (k, 1),
                    &tb.data()[i * k * n..(i + 1) * k * n],
                    (n, 1),
                    &mut out[i * m * n..(i + 1) * m * n],
                    0.0,
                );
            }
        }
        let mut shape = lead.to_vec();
        shape.extend([m, n]);
        let value = Tensor::new(&shape, out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            value,
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                shared_b,
            },
            rg,
        ))
    }

    // ---- layout ------------------------------------------------------------

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        let mut seen = vec![false; t.rank()];
        if axes.len() != t.rank()
            || axes
                .iter()
                .any(|&x| x >= t.rank() || std::mem::replace(&mut seen[x], true))
        {
            return Err(TensorError::Invalid {
                op: "permute",
                detail: format!("axes {axes:?} are not a permutation of rank {}", t.rank()),
            });
        }
        let (shape, data) = permute_data(t.data(), t.shape(), axes, t.dtype().width());
        let value = Tensor::with_dtype(&shape, t.dtype(), data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Permute(a, axes.to_vec()), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.nodes[a.0].value.clone().reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    // ---- reductions --------------------------------------------------------

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.real("sum_axis", a)?;
        if axis >= t.rank() {
            return Err(TensorError::Invalid {
                op: "sum_axis",
                detail: format!("axis {axis} out of range for shape {:?}", t.shape()),
            });
        }
        let (pre, len, post) = split_axis(t.shape(), axis);
        let mut out = vec![0.0; pre * post];
        let d = t.data();
        for p in 0..pre {
            for j in 0..len {
                let src = &d[(p * len + j) * post..(p * len + j + 1) * post];
                for (o, s) in out[p * post..(p + 1) * post].iter_mut().zip(src) {
                    *o += s;
                }
            }
        }
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        let value = Tensor::new(&shape, out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::SumAxis(a, axis), rg))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let t = self.real("sum", a)?;
        let value = Tensor::scalar(t.data().iter().sum());
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Sum(a), rg))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.nodes[a.0].value.numel().max(1);
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    // ---- spectral ----------------------------------------------------------

    fn spectral(&mut self, a: Var, dir: Direction, op: &'static str) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        if t.rank() < 2 {
            return Err(TensorError::Invalid {
                op,
                detail: format!("needs at least 2 axes, got shape {:?}", t.shape()),
            });
        }
        let (h, w) = (t.shape()[t.rank() - 2], t.shape()[t.rank() - 1]);
        if h == 0 || w == 0 {
            return Err(TensorError::Invalid {
                op,
                detail: format!("empty spatial extent in shape {:?}", t.shape()),
            });
        }
        let data = unitary_fft2(t, h, w, dir);
        let value = Tensor::complex(t.shape(), data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Fft2 { a, dir }, rg))
    }

    /// Unitary 2D DFT over the last two axes (`1/sqrt(H*W)` scaling).
    pub fn fft2(&mut self, a: Var) -> Result<Var> {
        self.spectral(a, Direction::Forward, "fft2")
    }

    /// Unitary inverse 2D DFT over the last two axes.
    pub fn ifft2(&mut self, a: Var) -> Result<Var> {
        self.spectral(a, Direction::Inverse, "ifft2")
    }

    pub fn real_part(&mut self, a: Var) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        if !t.is_complex() {
            return Err(TensorError::DType {
                op: "real_part",
                expected: DType::Complex,
            });
        }
        let data = t.data().iter().step_by(2).copied().collect();
        let value = Tensor::new(t.shape(), data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::RealPart(a), rg))
    }

    /// View a complex `[...]` tensor as real `[..., 2]` holding `(re, im)`.
    pub fn as_pairs(&mut self, a: Var) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        if !t.is_complex() {
            return Err(TensorError::DType {
                op: "as_pairs",
                expected: DType::Complex,
            });
        }
        let mut shape = t.shape().to_vec();
        shape.push(2);
        let value = Tensor::new(&shape, t.data().to_vec())?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::AsPairs(a), rg))
    }

    /// Inverse of [`Graph::as_pairs`]: real `[..., 2]` to complex `[...]`.
    pub fn from_pairs(&mut self, a: Var) -> Result<Var> {
        let t = self.real("from_pairs", a)?;
        if t.shape().last() != Some(&2) {
            return Err(TensorError::Invalid {
                op: "from_pairs",
                detail: format!("trailing axis must be 2, got shape {:?}", t.shape()),
            });
        }
        let shape = &t.shape()[..t.rank() - 1];
        let value = Tensor::complex(shape, t.data().to_vec())?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::FromPairs(a), rg))
    }

    // ---- normalization -----------------------------------------------------

    /// Group normalization of `x: [..., C]`: statistics are taken over every
    /// leading position and the `C / groups` channels of each group.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        let tx = self.real("group_norm", x)?;
        let c = *tx.shape().last().unwrap_or(&0);
        if groups == 0 || c == 0 || c % groups != 0 {
            return Err(TensorError::Invalid {
                op: "group_norm",
                detail: format!("{groups} groups do not divide {c} channels"),
            });
        }
        let tg = self.real("group_norm", gamma)?;
        let tb = self.real("group_norm", beta)?;
        for t in [tg, tb] {
            if t.shape() != [c] {
                return Err(TensorError::ShapeMismatch {
                    op: "group_norm",
                    lhs: tx.shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
        }
        let positions = tx.numel() / c;
        let cg = c / groups;
        let count = (positions * cg) as f64;
        let d = tx.data();
        let mut mean = vec![0.0; groups];
        let mut var = vec![0.0; groups];
        for p in 0..positions {
            for ch in 0..c {
                mean[ch / cg] += d[p * c + ch];
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        for p in 0..positions {
            for ch in 0..c {
                let r = d[p * c + ch] - mean[ch / cg];
                var[ch / cg] += r * r;
            }
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v / count + GROUP_NORM_EPS).sqrt()).collect();
        let mut xhat = vec![0.0; d.len()];
        let mut out = vec![0.0; d.len()];
        let (gd, bd) = (tg.data(), tb.data());
        for p in 0..positions {
            for ch in 0..c {
                let i = p * c + ch;
                let g = ch / cg;
                xhat[i] = (d[i] - mean[g]) * inv_std[g];
                out[i] = xhat[i] * gd[ch] + bd[ch];
            }
        }
        let value = Tensor::new(tx.shape(), out)?;
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            value,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse sweep from a scalar `loss`. Previous adjoints are cleared first.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lt = &self.nodes[loss.0].value;
        if lt.numel() != 1 || lt.is_complex() {
            return Err(TensorError::NonScalarLoss(lt.shape().to_vec()));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let contributions = self.adjoint(i, &g);
            self.nodes[i].grad = Some(g);
            for (v, c) in contributions {
                let node = &mut self.nodes[v.0];
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&c).for_each(|(a, b)| *a += b),
                    None => node.grad = Some(c),
                }
            }
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn adjoint(&self, i: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[i];
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Binary {
                kind,
                a,
                b,
                a_map,
                b_map,
            } => {
                let (va, vb) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
                if self.wants(*a) {
                    let mut ga = vec![0.0; va.len()];
                    for (j, gj) in g.iter().enumerate() {
                        ga[a_map.at(j)] += match kind {
                            Binary::Add | Binary::Sub => *gj,
                            Binary::Mul => gj * vb[b_map.at(j)],
                        };
                    }
                    out.push((*a, ga));
                }
                if self.wants(*b) {
                    let mut gb = vec![0.0; vb.len()];
                    for (j, gj) in g.iter().enumerate() {
                        gb[b_map.at(j)] += match kind {
                            Binary::Add => *gj,
                            Binary::Sub => -gj,
                            Binary::Mul => gj * va[a_map.at(j)],
                        };
                    }
                    out.push((*b, gb));
                }
            }
            Op::Scale(a, c) => {
                if self.wants(*a) {
                    out.push((*a, g.iter().map(|x| x * c).collect()));
                }
            }
            Op::Gelu(a) => {
                if self.wants(*a) {
                    let x = self.nodes[a.0].value.data();
                    out.push((*a, g.iter().zip(x).map(|(gj, &xj)| gj * gelu_grad(xj)).collect()));
                }
            }
            Op::Cos(a) => {
                if self.wants(*a) {
                    let x = self.nodes[a.0].value.data();
                    out.push((*a, g.iter().zip(x).map(|(gj, xj)| -gj * xj.sin()).collect()));
                }
            }
            &Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                shared_b,
            } => {
                let (va, vb) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
                if self.wants(a) {
                    let mut ga = vec![0.0; va.len()];
                    if shared_b {
                        // g [B*m, n] . b^T [n, k]
                        gemm(batch * m, n, k, g, (n, 1), vb, (1, n), &mut ga, 0.0);
                    } else {
                        for bi in 0..batch {
                            gemm(
                                m,
                                n,
                                k,
                                &g[bi * m * n..(bi + 1) * m * n],
                                (n, 1),
                                &vb[bi * k * n..(bi + 1) * k * n],
                                (1, n),
                                &mut ga[bi * m * k..(bi + 1) * m * k],
                                0.0,
                            );
                        }
                    }
                    out.push((a, ga));
                }
                if self.wants(b) {
                    let mut gb = vec![0.0; vb.len()];
                    if shared_b {
                        // a^T [k, B*m] . g [B*m, n]
                        gemm(k, batch * m, n, va, (1, k), g, (n, 1), &mut gb, 0.0);
                    } else {
                        for bi in 0..batch {
                            gemm(
                                k,
                                m,
                                n,
                                &va[bi * m * k..(bi + 1) * m * k],
                                (1, k),
                                &g[bi * m * n..(bi + 1) * m * n],
                                (n, 1),
                                &mut gb[bi * k * n..(bi + 1) * k * n],
                                0.0,
                            );
                        }
                    }
                    out.push((b, gb));
                }
            }
            Op::Permute(a, axes) => {
                if self.wants(*a) {
                    let mut inv = vec![0; axes.len()];
                    for (i, &ax) in axes.iter().enumerate() {
                        inv[ax] = i;
                    }
                    let (_, ga) = permute_data(g, node.value.shape(), &inv, node.value.dtype().width());
                    out.push((*a, ga));
                }
            }
            Op::Reshape(a) | Op::AsPairs(a) | Op::FromPairs(a) => {
                if self.wants(*a) {
                    out.push((*a, g.to_vec()));
                }
            }
            Op::SumAxis(a, axis) => {
                if self.wants(*a) {
                    let shape = self.nodes[a.0].value.shape();
                    let (pre, len, post) = split_axis(shape, *axis);
                    let mut ga = vec![0.0; pre * len * post];
                    for p in 0..pre {
                        for j in 0..len {
                            ga[(p * len + j) * post..(p * len + j + 1) * post]
                                .copy_from_slice(&g[p * post..(p + 1) * post]);
                        }
                    }
                    out.push((*a, ga));
                }
            }
            Op::Sum(a) => {
                if self.wants(*a) {
                    out.push((*a, vec![g[0]; self.nodes[a.0].value.numel()]));
                }
            }
            Op::Fft2 { a, dir } => {
                if self.wants(*a) {
                    // The unitary transform's adjoint is its inverse.
                    let back = match dir {
                        Direction::Forward => Direction::Inverse,
                        Direction::Inverse => Direction::Forward,
                    };
                    let shape = node.value.shape();
                    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
                    let gt = Tensor::complex(shape, g.to_vec()).expect("adjoint shape");
                    let gc = unitary_fft2(&gt, h, w, back);
                    let ga = if self.nodes[a.0].value.is_complex() {
                        gc
                    } else {
                        gc.iter().step_by(2).copied().collect()
                    };
                    out.push((*a, ga));
                }
            }
            Op::RealPart(a) => {
                if self.wants(*a) {
                    let mut ga = vec![0.0; g.len() * 2];
                    for (j, gj) in g.iter().enumerate() {
                        ga[2 * j] = *gj;
                    }
                    out.push((*a, ga));
                }
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                inv_std,
            } => {
                let c = self.nodes[gamma.0].value.numel();
                let positions = xhat.len() / c;
                let cg = c / groups;
                let gamma_v = self.nodes[gamma.0].value.data();
                if self.wants(*x) {
                    let count = (positions * cg) as f64;
                    let mut m1 = vec![0.0; *groups];
                    let mut m2 = vec![0.0; *groups];
                    for p in 0..positions {
                        for ch in 0..c {
                            let i = p * c + ch;
                            let dxh = g[i] * gamma_v[ch];
                            m1[ch / cg] += dxh;
                            m2[ch / cg] += dxh * xhat[i];
                        }
                    }
                    let mut gx = vec![0.0; xhat.len()];
                    for p in 0..positions {
                        for ch in 0..c {
                            let i = p * c + ch;
                            let grp = ch / cg;
                            let dxh = g[i] * gamma_v[ch];
                            gx[i] = inv_std[grp] * (dxh - m1[grp] / count - xhat[i] * m2[grp] / count);
                        }
                    }
                    out.push((*x, gx));
                }
                if self.wants(*gamma) {
                    let mut gg = vec![0.0; c];
                    for (i, (gi, xh)) in g.iter().zip(xhat).enumerate() {
                        gg[i % c] += gi * xh;
                    }
                    out.push((*gamma, gg));
                }
                if self.wants(*beta) {
                    let mut gb = vec![0.0; c];
                    for (i, gi) in g.iter().enumerate() {
                        gb[i % c] += gi;
                    }
                    out.push((*beta, gb));
                }
            }
        }
        out
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (numel(&shape[..axis]), shape[axis], numel(&shape[axis + 1..]))
}

fn unitary_fft2(t: &Tensor, h: usize, w: usize, dir: Direction) -> Vec<f64> {
    let mut buf: Vec<Complex64> = if t.is_complex() {
        fft::from_interleaved(t.data())
    } else {
        fft::to_complex(t.data())
    };
    fft::fft2_inplace(&mut buf, h, w, dir);
    let s = 1.0 / ((h * w) as f64).sqrt();
    buf.iter_mut().for_each(|c| *c *= s);
    fft::to_interleaved(&buf)
}

/// Permuted copy; `width` is the number of `f64` slots per element.
fn permute_data(data: &[f64], shape: &[usize], axes: &[usize], width: usize) -> (Vec<usize>, Vec<f64>) {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n = numel(&out_shape);
    let rank = out_shape.len();
    let mut out = Vec::with_capacity(n * width);
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for _ in 0..n {
        out.extend_from_slice(&data[src * width..(src + 1) * width]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            src += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            src -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    (out_shape, out)
}

/// `c = a . b + beta * c` for an `[m, k]` by `[k, n]` product. Strides are given as
/// `(row, col)` element offsets so transposed operands need no copy.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(
        m * k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len(),
        "gemm: lhs out of bounds"
    );
    assert!(
        k * n == 0 || (k - 1) * rsb + (n - 1) * csb < b.len(),
        "gemm: rhs out of bounds"
    );
    assert!(c.len() >= m * n, "gemm: output too small");
    // SAFETY: the bounds of all three operands were checked above against the
    // given extents and strides, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn add_small_vectors() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2], &[1.0, 2.0]));
        let b = g.constant(t(&[2], &[3.0, 4.0]));
        let c = g.add(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[4.0, 6.0]);
    }

    #[test]
    fn shape_mismatch_reports_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[4]));
        let err = g.add(a, b).unwrap_err();
        assert_eq!(
            err,
            TensorError::ShapeMismatch {
                op: "add",
                lhs: vec![2, 3],
                rhs: vec![4]
            }
        );
        assert!(err.to_string().contains("[2, 3]") && err.to_string().contains("[4]"));
    }

    #[test]
    fn gelu_at_zero_is_zero() {
        assert_eq!(gelu(0.0), 0.0);
    }

    #[test]
    fn matmul_small_integer_case() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = g.constant(t(&[2, 1], &[1.0, 1.0]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.shape(c), &[2, 1]);
        assert_eq!(g.value(c).data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_inner_extent_mismatch() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(
            g.matmul(a, b),
            Err(TensorError::ShapeMismatch { op: "matmul", .. })
        ));
    }

    #[test]
    fn identity_matmul_is_noop() {
        let mut g = Graph::new();
        let eye = g.constant(Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 }));
        let x = g.constant(t(&[3, 2], &[1.0, -2.0, 3.5, 0.25, 7.0, 9.0]));
        let y = g.matmul(eye, x).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());
    }

    #[test]
    fn broadcast_bias_over_rows_and_middle_axis() {
        let mut g = Graph::new();
        let a = g.param(Tensor::zeros(&[2, 3, 2]));
        let row = g.param(t(&[2], &[1.0, 2.0]));
        let mid = g.param(t(&[2, 1, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = g.add(a, row).unwrap();
        let y = g.add(y, mid).unwrap();
        assert_eq!(g.value(y).get(&[1, 2, 1]), 2.0 + 4.0);
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(row).unwrap().data(), &[6.0, 6.0]);
        assert_eq!(g.grad(mid).unwrap().data(), &[3.0; 4]);
    }

    #[test]
    fn unreached_leaf_has_zero_grad() {
        let mut g = Graph::new();
        let x = g.param(Tensor::full(&[3], 2.0));
        let unused = g.param(Tensor::full(&[2], 5.0));
        let y = g.mul(x, x).unwrap();
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(unused).unwrap().data(), &[0.0, 0.0]);
        assert_eq!(g.grad(x).unwrap().data(), &[4.0; 3]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(&[2]));
        assert_eq!(g.backward(x), Err(TensorError::NonScalarLoss(vec![2])));
    }

    #[test]
    fn permute_roundtrip() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn(&[2, 3, 4], |i| i as f64));
        let y = g.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(g.shape(y), &[4, 2, 3]);
        assert_eq!(g.value(y).get(&[3, 1, 2]), g.value(x).get(&[1, 2, 3]));
        let z = g.permute(y, &[1, 2, 0]).unwrap();
        assert_eq!(g.value(z), g.value(x));
        assert!(g.permute(x, &[0, 0, 1]).is_err());
    }

    #[test]
    fn group_norm_normalizes_each_group() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn(&[5, 4], |i| (i as f64).sin() * 3.0 + i as f64));
        let gamma = g.constant(Tensor::full(&[4], 1.0));
        let beta = g.constant(Tensor::zeros(&[4]));
        let y = g.group_norm(x, gamma, beta, 2).unwrap();
        let v = g.value(y);
        for grp in 0..2 {
            let vals: Vec<f64> = (0..5)
                .flat_map(|p| (0..2).map(move |c| (p, grp * 2 + c)))
                .map(|(p, c)| v.get(&[p, c]))
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-3);
        }
        assert!(g.group_norm(x, gamma, beta, 3).is_err());
    }
}
