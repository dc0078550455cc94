//! Reverse-mode differentiation over an append-only tape.
//!
//! Every differentiable op evaluates eagerly, pushes its output onto the
//! tape and remembers the inputs (plus whatever it needs for the adjoint).
//! [`Tape::backward`] consumes the tape and replays it once in reverse.

use indexmap::IndexMap;

use super::kernels::{self, ConvGeom, NormSaved};
use crate::params::ParamStore;
use crate::error::{Error, Result};
use crate::scalar::{gemm, Layout, Scalar};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Silu(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
        rows: usize,
        d_in: usize,
        d_out: usize,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        channels: usize,
        groups: usize,
        spatial: usize,
        saved: NormSaved<T>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        saved: NormSaved<T>,
    },
    Film {
        h: Var,
        scale: Var,
        shift: Var,
    },
    Upsample2x(Var),
    ConcatChannels(Var, Var),
    ConcatBatch(Vec<Var>),
    SliceBatch {
        x: Var,
        start: usize,
    },
    RepeatBatch(Var),
    Reshape(Var),
    ToTokens(Var),
    FromTokens(Var),
    SplitHeads {
        x: Var,
        heads: usize,
    },
    MergeHeads {
        x: Var,
        heads: usize,
    },
    Bmm {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Softmax(Var),
    MeanSpatial(Var),
    Mse(Var, Var),
    Sum(Var),
    Mean(Var),
}

struct Node<T> {
    name: &'static str,
    value: Tensor<T>,
    op: Op<T>,
    tracked: bool,
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    params: IndexMap<String, Var>,
    record: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    a.expect_same_shape(b, op)
}

fn spatial<T: Scalar>(op: &'static str, t: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let s = t.shape();
    if s.len() < 2 {
        return Err(Error::shape(op, format!("expected [N,C,...], got {s:?}")));
    }
    Ok((s[0], s[1], s[2..].iter().product()))
}

impl<T: Scalar> Tape<T> {
    /// A tape that records adjoint information.
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: IndexMap::new(),
            record: true,
        }
    }

    /// A tape for forward-only evaluation; nothing is tracked.
    pub fn inference() -> Self {
        Tape {
            record: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: name.into() });
        }
        let tracked = self.record && inputs.iter().any(|&v| self.tracked(v));
        self.nodes.push(Node {
            name,
            value,
            op: if tracked { op } else { Op::Leaf },
            tracked,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Untracked input.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            name: "constant",
            value,
            op: Op::Leaf,
            tracked: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Input whose gradient is wanted.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        let tracked = self.record;
        self.nodes.push(Node {
            name: "leaf",
            value,
            op: Op::Leaf,
            tracked,
        });
        Var(self.nodes.len() - 1)
    }

    /// Bring a named parameter onto the tape. Repeated requests for the same
    /// name return the same handle, so shared weights accumulate one gradient.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let value = store
            .get(name)
            .ok_or_else(|| Error::Autodiff(format!("unknown parameter `{name}`")))?
            .clone();
        let v = self.leaf(value);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "add", |x, y| x + y)?;
        self.push("add", out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "sub", |x, y| x - y)?;
        self.push("sub", out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        self.push("mul", out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        let out = self.value(a).map(|x| x * s);
        self.push("scale", out, Op::Scale(a, s), &[a])
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x / (T::one() + (-x).exp()));
        self.push("silu", out, Op::Silu(a), &[a])
    }

    /// Cross-correlation of `x: [N,C,H,W]` with `w: [C',C,k,k]`, zero padding
    /// `k/2` and the given stride; output `[N,C',⌈H/s⌉,⌈W/s⌉]` for odd `k`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Result<Var> {
        let dims = self.value(x).dims4("conv2d")?;
        let [c_out, c_in, kh, kw] = self.value(w).dims4("conv2d")?;
        if c_in != dims[1] || kh != kw || kh % 2 == 0 || !(stride == 1 || stride == 2) {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "input {:?}, kernel {:?}, stride {stride}",
                    self.shape(x),
                    self.shape(w)
                ),
            ));
        }
        if let Some(b) = b {
            if self.shape(b) != [c_out] {
                return Err(Error::shape("conv2d", format!("bias {:?} for {c_out} outputs", self.shape(b))));
            }
        }
        let geom = ConvGeom::new(dims, c_out, kh, stride, kh / 2);
        let data = kernels::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &geom,
        );
        let out = Tensor::new(&[geom.n, c_out, geom.ho, geom.wo], data)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push("conv2d", out, Op::Conv2d { x, w, b, geom }, &inputs)
    }

    /// `x: [..., D_in] · w: [D_in, D_out] + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let d_in = *xs.last().expect("tensors have at least one dim");
        if ws.len() != 2 || ws[0] != d_in {
            return Err(Error::shape("linear", format!("input {xs:?}, weight {ws:?}")));
        }
        let d_out = ws[1];
        if let Some(b) = b {
            if self.shape(b) != [d_out] {
                return Err(Error::shape("linear", format!("bias {:?}", self.shape(b))));
            }
        }
        let rows = self.value(x).len() / d_in;
        let mut out = vec![T::zero(); rows * d_out];
        if let Some(b) = b {
            let bias = self.value(b).data();
            for r in out.chunks_exact_mut(d_out) {
                r.copy_from_slice(bias);
            }
        }
        gemm(
            rows,
            d_in,
            d_out,
            T::one(),
            self.value(x).data(),
            Layout::rows(d_in),
            self.value(w).data(),
            Layout::rows(d_out),
            if b.is_some() { T::one() } else { T::zero() },
            &mut out,
            Layout::rows(d_out),
        );
        let mut shape = xs;
        *shape.last_mut().expect("non-empty") = d_out;
        let out = Tensor::new(&shape, out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(
            "linear",
            out,
            Op::Linear {
                x,
                w,
                b,
                rows,
                d_in,
                d_out,
            },
            &inputs,
        )
    }

    /// Group normalisation of `[N,C,...]` with per-channel affine parameters.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        let (_, c, s) = spatial("group_norm", self.value(x))?;
        if groups == 0 || c % groups != 0 || self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape("group_norm", format!("{c} channels, {groups} groups")));
        }
        let cg = c / groups;
        let block = cg * s;
        let param_of = move |bi: usize, i: usize| (bi % groups) * cg + i / s;
        let (y, saved) = kernels::norm_forward(
            self.value(x).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            block,
            param_of,
        );
        let out = Tensor::new(self.shape(x), y)?;
        self.push(
            "group_norm",
            out,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                channels: c,
                groups,
                spatial: s,
                saved,
            },
            &[x, gamma, beta],
        )
    }

    /// Normalisation over the last dimension.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let d = *self.shape(x).last().expect("non-empty");
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape("layer_norm", format!("feature dim {d}")));
        }
        let (y, saved) = kernels::norm_forward(
            self.value(x).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            d,
            |_, i| i,
        );
        let out = Tensor::new(self.shape(x), y)?;
        self.push("layer_norm", out, Op::LayerNorm { x, gamma, beta, saved }, &[x, gamma, beta])
    }

    /// `(1 + scale[n,c])·h[n,c,..] + shift[n,c]`.
    pub fn film(&mut self, h: Var, scale: Var, shift: Var) -> Result<Var> {
        let (n, c, s) = spatial("film", self.value(h))?;
        if self.shape(scale) != [n, c] || self.shape(shift) != [n, c] {
            return Err(Error::shape(
                "film",
                format!(
                    "features {:?}, scale {:?}, shift {:?}",
                    self.shape(h),
                    self.shape(scale),
                    self.shape(shift)
                ),
            ));
        }
        let hv = self.value(h).data();
        let sc = self.value(scale).data();
        let sh = self.value(shift).data();
        let mut out = vec![T::zero(); hv.len()];
        for (nc, (o, x)) in out.chunks_exact_mut(s).zip(hv.chunks_exact(s)).enumerate() {
            let a = T::one() + sc[nc];
            let b = sh[nc];
            for (o, &x) in o.iter_mut().zip(x) {
                *o = a * x + b;
            }
        }
        let out = Tensor::new(self.shape(h), out)?;
        self.push("film", out, Op::Film { h, scale, shift }, &[h, scale, shift])
    }

    /// Nearest-neighbour 2x upsampling of `[N,C,H,W]`.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4("upsample2x")?;
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); n * c * h * w * 4];
        for (plane, src) in out.chunks_exact_mut(4 * h * w).zip(xv.chunks_exact(h * w)) {
            for y in 0..2 * h {
                for x in 0..2 * w {
                    plane[y * 2 * w + x] = src[(y / 2) * w + x / 2];
                }
            }
        }
        let out = Tensor::new(&[n, c, 2 * h, 2 * w], out)?;
        self.push("upsample2x", out, Op::Upsample2x(x), &[x])
    }

    /// Concatenate `[N,C1,...]` and `[N,C2,...]` along channels.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, ca, sa) = spatial("concat_channels", self.value(a))?;
        let (nb, cb, sb) = spatial("concat_channels", self.value(b))?;
        if na != nb || sa != sb || self.shape(a)[2..] != self.shape(b)[2..] {
            return Err(Error::shape(
                "concat_channels",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(av.len() + bv.len());
        for i in 0..na {
            out.extend_from_slice(&av[i * ca * sa..(i + 1) * ca * sa]);
            out.extend_from_slice(&bv[i * cb * sb..(i + 1) * cb * sb]);
        }
        let mut shape = self.shape(a).to_vec();
        shape[1] = ca + cb;
        let out = Tensor::new(&shape, out)?;
        self.push("concat_channels", out, Op::ConcatChannels(a, b), &[a, b])
    }

    pub fn concat_batch(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor<T>> = parts.iter().map(|&v| self.value(v)).collect();
        let out = Tensor::concat_batch(&values)?;
        self.push("concat_batch", out, Op::ConcatBatch(parts.to_vec()), parts)
    }

    pub fn slice_batch(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.value(x).slice_batch(start, len)?;
        self.push("slice_batch", out, Op::SliceBatch { x, start }, &[x])
    }

    /// Tile the whole tensor `times` times along the leading dimension.
    pub fn repeat_batch(&mut self, x: Var, times: usize) -> Result<Var> {
        if times == 0 {
            return Err(Error::shape("repeat_batch", "zero repeats"));
        }
        let v = self.value(x);
        let mut shape = v.shape().to_vec();
        shape[0] *= times;
        let mut data = Vec::with_capacity(v.len() * times);
        for _ in 0..times {
            data.extend_from_slice(v.data());
        }
        let out = Tensor::new(&shape, data)?;
        self.push("repeat_batch", out, Op::RepeatBatch(x), &[x])
    }

    /// Same data under a new shape.
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        self.push("reshape", out, Op::Reshape(x), &[x])
    }

    /// `[N,C,H,W] -> [N,H·W,C]`.
    pub fn to_tokens(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4("to_tokens")?;
        let p = h * w;
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); xv.len()];
        for i in 0..n {
            for ch in 0..c {
                for q in 0..p {
                    out[(i * p + q) * c + ch] = xv[(i * c + ch) * p + q];
                }
            }
        }
        let out = Tensor::new(&[n, p, c], out)?;
        self.push("to_tokens", out, Op::ToTokens(x), &[x])
    }

    /// `[N,H·W,C] -> [N,C,H,W]`.
    pub fn from_tokens(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let [n, p, c] = self.value(x).dims3("from_tokens")?;
        if p != h * w {
            return Err(Error::shape("from_tokens", format!("{p} tokens for {h}x{w}")));
        }
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); xv.len()];
        for i in 0..n {
            for q in 0..p {
                for ch in 0..c {
                    out[(i * c + ch) * p + q] = xv[(i * p + q) * c + ch];
                }
            }
        }
        let out = Tensor::new(&[n, c, h, w], out)?;
        self.push("from_tokens", out, Op::FromTokens(x), &[x])
    }

    /// `[N,L,D] -> [N·heads, L, D/heads]`.
    pub fn split_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let [n, l, d] = self.value(x).dims3("split_heads")?;
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!("feature dim {d} not divisible by {heads} heads")));
        }
        let dh = d / heads;
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); xv.len()];
        for i in 0..n {
            for hd in 0..heads {
                for t in 0..l {
                    let src = &xv[(i * l + t) * d + hd * dh..][..dh];
                    out[((i * heads + hd) * l + t) * dh..][..dh].copy_from_slice(src);
                }
            }
        }
        let out = Tensor::new(&[n * heads, l, dh], out)?;
        self.push("split_heads", out, Op::SplitHeads { x, heads }, &[x])
    }

    /// Inverse of [`Tape::split_heads`].
    pub fn merge_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let [nh, l, dh] = self.value(x).dims3("merge_heads")?;
        if heads == 0 || nh % heads != 0 {
            return Err(Error::shape("merge_heads", format!("{nh} rows for {heads} heads")));
        }
        let n = nh / heads;
        let d = dh * heads;
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); xv.len()];
        for i in 0..n {
            for hd in 0..heads {
                for t in 0..l {
                    let src = &xv[((i * heads + hd) * l + t) * dh..][..dh];
                    out[(i * l + t) * d + hd * dh..][..dh].copy_from_slice(src);
                }
            }
        }
        let out = Tensor::new(&[n, l, d], out)?;
        self.push("merge_heads", out, Op::MergeHeads { x, heads }, &[x])
    }

    /// `a: [B,M,K]` times `b: [B,K,N]` (or `b: [B,N,K]` transposed).
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let [ba, m, k] = self.value(a).dims3("bmm")?;
        let [bb, r, c] = self.value(b).dims3("bmm")?;
        let (kb, n) = if trans_b { (c, r) } else { (r, c) };
        if ba != bb || k != kb {
            return Err(Error::shape(
                "bmm",
                format!("{:?} x {:?} (trans_b={trans_b})", self.shape(a), self.shape(b)),
            ));
        }
        let data = kernels::bmm(self.value(a).data(), self.value(b).data(), ba, m, k, n, trans_b);
        let out = Tensor::new(&[ba, m, n], data)?;
        self.push("bmm", out, Op::Bmm { a, b, trans_b }, &[a, b])
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let len = *self.shape(x).last().expect("non-empty");
        let data = kernels::softmax_rows(self.value(x).data(), len);
        let out = Tensor::new(self.shape(x), data)?;
        self.push("softmax", out, Op::Softmax(x), &[x])
    }

    /// `[N,C,...] -> [N,C]`, averaging the trailing dimensions.
    pub fn mean_spatial(&mut self, x: Var) -> Result<Var> {
        let (n, c, s) = spatial("mean_spatial", self.value(x))?;
        let inv = T::of(1.0 / s as f64);
        let data = self
            .value(x)
            .data()
            .chunks_exact(s)
            .map(|r| r.iter().copied().sum::<T>() * inv)
            .collect();
        let out = Tensor::new(&[n, c], data)?;
        self.push("mean_spatial", out, Op::MeanSpatial(x), &[x])
    }

    /// Mean squared difference, a scalar.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mse", self.value(a), self.value(b))?;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let s: f64 = av
            .iter()
            .zip(bv)
            .map(|(&x, &y)| {
                let d = (x - y).f64();
                d * d
            })
            .sum();
        let out = Tensor::scalar(T::of(s / av.len() as f64));
        self.push("mse", out, Op::Mse(a, b), &[a, b])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum());
        self.push("sum", out, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).mean());
        self.push("mean", out, Op::Mean(x), &[x])
    }

    /// Replay the tape in reverse from the scalar `loss`, consuming it.
    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        if !self.record || !self.tracked(loss) {
            return Err(Error::Autodiff(
                "backward called on a value with no tracked inputs".into(),
            ));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Autodiff(format!(
                "loss must be a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        let Tape { nodes, params, .. } = self;
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(nodes[loss.0].value.shape(), T::one()));

        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if let Op::Leaf = node.op {
                grads[i] = Some(g);
                continue;
            }
            let mut acc = Accum {
                nodes: &nodes,
                grads: &mut grads,
                op: node.name,
            };
            backprop_node(&nodes, node, &g, &mut acc)?;
        }
        Ok(Gradients { grads, params })
    }
}

struct Accum<'a, T: Scalar> {
    nodes: &'a [Node<T>],
    grads: &'a mut [Option<Tensor<T>>],
    op: &'static str,
}

impl<T: Scalar> Accum<'_, T> {
    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn add(&mut self, v: Var, g: Tensor<T>) -> Result<()> {
        if !self.wants(v) {
            return Ok(());
        }
        if !g.all_finite() {
            return Err(Error::NonFinite {
                op: format!("gradient of {}", self.op),
            });
        }
        match &mut self.grads[v.0] {
            Some(existing) => {
                for (e, x) in existing.data_mut().iter_mut().zip(g.data()) {
                    *e += *x;
                }
            }
            slot @ None => *slot = Some(g),
        }
        Ok(())
    }

    fn add_vec(&mut self, v: Var, data: Vec<T>) -> Result<()> {
        if !self.wants(v) {
            return Ok(());
        }
        let t = Tensor::new(self.nodes[v.0].value.shape(), data)?;
        self.add(v, t)
    }
}

fn backprop_node<T: Scalar>(nodes: &[Node<T>], node: &Node<T>, g: &Tensor<T>, acc: &mut Accum<'_, T>) -> Result<()> {
    let val = |v: Var| &nodes[v.0].value;
    let gd = g.data();
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            acc.add(*a, g.clone())?;
            acc.add(*b, g.clone())?;
        }
        Op::Sub(a, b) => {
            acc.add(*a, g.clone())?;
            acc.add(*b, g.map(|x| -x))?;
        }
        Op::Mul(a, b) => {
            if acc.wants(*a) {
                acc.add(*a, g.zip_map(val(*b), "mul", |x, y| x * y)?)?;
            }
            if acc.wants(*b) {
                acc.add(*b, g.zip_map(val(*a), "mul", |x, y| x * y)?)?;
            }
        }
        Op::Scale(a, s) => {
            let s = *s;
            acc.add(*a, g.map(|x| x * s))?;
        }
        Op::Silu(a) => {
            let d = g.zip_map(val(*a), "silu", |gy, x| {
                let sg = T::one() / (T::one() + (-x).exp());
                gy * sg * (T::one() + x * (T::one() - sg))
            })?;
            acc.add(*a, d)?;
        }
        Op::Conv2d { x, w, b, geom } => {
            let need = (acc.wants(*x), acc.wants(*w), b.map(|b| acc.wants(b)).unwrap_or(false));
            let gr = kernels::conv2d_backward(val(*x).data(), val(*w).data(), gd, geom, need);
            if let Some(dx) = gr.dx {
                acc.add_vec(*x, dx)?;
            }
            if let Some(dw) = gr.dw {
                acc.add_vec(*w, dw)?;
            }
            if let (Some(b), Some(db)) = (b, gr.db) {
                acc.add_vec(*b, db)?;
            }
        }
        Op::Linear {
            x,
            w,
            b,
            rows,
            d_in,
            d_out,
        } => {
            let (rows, d_in, d_out) = (*rows, *d_in, *d_out);
            if acc.wants(*x) {
                let mut dx = vec![T::zero(); rows * d_in];
                gemm(rows, d_out, d_in, T::one(), gd, Layout::rows(d_out), val(*w).data(), Layout::transposed(d_out), T::zero(), &mut dx, Layout::rows(d_in));
                acc.add_vec(*x, dx)?;
            }
            if acc.wants(*w) {
                let mut dw = vec![T::zero(); d_in * d_out];
                gemm(d_in, rows, d_out, T::one(), val(*x).data(), Layout::transposed(d_in), gd, Layout::rows(d_out), T::zero(), &mut dw, Layout::rows(d_out));
                acc.add_vec(*w, dw)?;
            }
            if let Some(b) = b {
                if acc.wants(*b) {
                    let mut db = vec![T::zero(); d_out];
                    for r in gd.chunks_exact(d_out) {
                        for (d, &v) in db.iter_mut().zip(r) {
                            *d += v;
                        }
                    }
                    acc.add_vec(*b, db)?;
                }
            }
        }
        Op::GroupNorm {
            x,
            gamma,
            beta,
            channels,
            groups,
            spatial,
            saved,
        } => {
            let (groups, s) = (*groups, *spatial);
            let cg = channels / groups;
            let (dx, dg, db) = kernels::norm_backward(
                gd,
                val(*gamma).data(),
                saved,
                cg * s,
                move |bi, i| (bi % groups) * cg + i / s,
                *channels,
            );
            acc.add_vec(*x, dx)?;
            acc.add_vec(*gamma, dg)?;
            acc.add_vec(*beta, db)?;
        }
        Op::LayerNorm { x, gamma, beta, saved } => {
            let d = val(*gamma).len();
            let (dx, dg, db) = kernels::norm_backward(gd, val(*gamma).data(), saved, d, |_, i| i, d);
            acc.add_vec(*x, dx)?;
            acc.add_vec(*gamma, dg)?;
            acc.add_vec(*beta, db)?;
        }
        Op::Film { h, scale, shift } => {
            let s = val(*h).len() / val(*scale).len();
            let hv = val(*h).data();
            let sc = val(*scale).data();
            if acc.wants(*h) {
                let mut dh = vec![T::zero(); hv.len()];
                for (nc, (d, gg)) in dh.chunks_exact_mut(s).zip(gd.chunks_exact(s)).enumerate() {
                    let a = T::one() + sc[nc];
                    for (d, &gv) in d.iter_mut().zip(gg) {
                        *d = a * gv;
                    }
                }
                acc.add_vec(*h, dh)?;
            }
            if acc.wants(*scale) {
                let ds = gd
                    .chunks_exact(s)
                    .zip(hv.chunks_exact(s))
                    .map(|(gg, hh)| gg.iter().zip(hh).map(|(&a, &b)| a * b).sum::<T>())
                    .collect();
                acc.add_vec(*scale, ds)?;
            }
            if acc.wants(*shift) {
                let dsh = gd.chunks_exact(s).map(|gg| gg.iter().copied().sum::<T>()).collect();
                acc.add_vec(*shift, dsh)?;
            }
        }
        Op::Upsample2x(x) => {
            let [_, _, h, w] = val(*x).dims4("upsample2x")?;
            let mut dx = vec![T::zero(); val(*x).len()];
            for (d, plane) in dx.chunks_exact_mut(h * w).zip(gd.chunks_exact(4 * h * w)) {
                for y in 0..2 * h {
                    for xx in 0..2 * w {
                        d[(y / 2) * w + xx / 2] += plane[y * 2 * w + xx];
                    }
                }
            }
            acc.add_vec(*x, dx)?;
        }
        Op::ConcatChannels(a, b) => {
            let (n, ca, s) = spatial("concat_channels", val(*a))?;
            let cb = val(*b).shape()[1];
            let mut da = Vec::with_capacity(val(*a).len());
            let mut db = Vec::with_capacity(val(*b).len());
            for i in 0..n {
                let base = i * (ca + cb) * s;
                da.extend_from_slice(&gd[base..base + ca * s]);
                db.extend_from_slice(&gd[base + ca * s..base + (ca + cb) * s]);
            }
            acc.add_vec(*a, da)?;
            acc.add_vec(*b, db)?;
        }
        Op::ConcatBatch(parts) => {
            let mut off = 0;
            for &p in parts {
                let len = val(p).len();
                acc.add_vec(p, gd[off..off + len].to_vec())?;
                off += len;
            }
        }
        Op::SliceBatch { x, start } => {
            if acc.wants(*x) {
                let row = val(*x).row_len();
                let mut dx = vec![T::zero(); val(*x).len()];
                dx[start * row..start * row + gd.len()].copy_from_slice(gd);
                acc.add_vec(*x, dx)?;
            }
        }
        Op::RepeatBatch(x) => {
            let len = val(*x).len();
            let mut dx = vec![T::zero(); len];
            for chunk in gd.chunks_exact(len) {
                for (d, &v) in dx.iter_mut().zip(chunk) {
                    *d += v;
                }
            }
            acc.add_vec(*x, dx)?;
        }
        Op::Reshape(x) => {
            acc.add_vec(*x, gd.to_vec())?;
        }
        Op::ToTokens(x) => {
            let [n, c, h, w] = val(*x).dims4("to_tokens")?;
            let p = h * w;
            let mut dx = vec![T::zero(); gd.len()];
            for i in 0..n {
                for ch in 0..c {
                    for q in 0..p {
                        dx[(i * c + ch) * p + q] = gd[(i * p + q) * c + ch];
                    }
                }
            }
            acc.add_vec(*x, dx)?;
        }
        Op::FromTokens(x) => {
            let [n, p, c] = val(*x).dims3("from_tokens")?;
            let mut dx = vec![T::zero(); gd.len()];
            for i in 0..n {
                for q in 0..p {
                    for ch in 0..c {
                        dx[(i * p + q) * c + ch] = gd[(i * c + ch) * p + q];
                    }
                }
            }
            acc.add_vec(*x, dx)?;
        }
        Op::SplitHeads { x, heads } => {
            let [n, l, d] = val(*x).dims3("split_heads")?;
            let dh = d / heads;
            let mut dx = vec![T::zero(); gd.len()];
            for i in 0..n {
                for hd in 0..*heads {
                    for t in 0..l {
                        dx[(i * l + t) * d + hd * dh..][..dh]
                            .copy_from_slice(&gd[((i * heads + hd) * l + t) * dh..][..dh]);
                    }
                }
            }
            acc.add_vec(*x, dx)?;
        }
        Op::MergeHeads { x, heads } => {
            let [nh, l, dh] = val(*x).dims3("merge_heads")?;
            let n = nh / heads;
            let d = dh * heads;
            let mut dx = vec![T::zero(); gd.len()];
            for i in 0..n {
                for hd in 0..*heads {
                    for t in 0..l {
                        dx[((i * heads + hd) * l + t) * dh..][..dh]
                            .copy_from_slice(&gd[(i * l + t) * d + hd * dh..][..dh]);
                    }
                }
            }
            acc.add_vec(*x, dx)?;
        }
        Op::Bmm { a, b, trans_b } => {
            let [bt, m, k] = val(*a).dims3("bmm")?;
            let n = g.shape()[2];
            let (av, bv) = (val(*a).data(), val(*b).data());
            if acc.wants(*a) {
                // da = g · bᵀ  (or g · b when b was given transposed)
                let mut da = vec![T::zero(); av.len()];
                for i in 0..bt {
                    let lb = if *trans_b {
                        Layout::rows(k).at(i * n * k)
                    } else {
                        Layout::transposed(n).at(i * k * n)
                    };
                    gemm(m, n, k, T::one(), gd, Layout::rows(n).at(i * m * n), bv, lb, T::zero(), &mut da, Layout::rows(k).at(i * m * k));
                }
                acc.add_vec(*a, da)?;
            }
            if acc.wants(*b) {
                let mut db = vec![T::zero(); bv.len()];
                for i in 0..bt {
                    if *trans_b {
                        // db [N,K] = gᵀ [N,M] · a [M,K]
                        gemm(n, m, k, T::one(), gd, Layout::transposed(n).at(i * m * n), av, Layout::rows(k).at(i * m * k), T::zero(), &mut db, Layout::rows(k).at(i * n * k));
                    } else {
                        // db [K,N] = aᵀ [K,M] · g [M,N]
                        gemm(k, m, n, T::one(), av, Layout::transposed(k).at(i * m * k), gd, Layout::rows(n).at(i * m * n), T::zero(), &mut db, Layout::rows(n).at(i * k * n));
                    }
                }
                acc.add_vec(*b, db)?;
            }
        }
        Op::Softmax(x) => {
            let y = node.value.data();
            let len = *node.value.shape().last().expect("non-empty");
            let mut dx = vec![T::zero(); y.len()];
            for ((d, ys), gs) in dx.chunks_exact_mut(len).zip(y.chunks_exact(len)).zip(gd.chunks_exact(len)) {
                let dot: T = ys.iter().zip(gs).map(|(&a, &b)| a * b).sum();
                for ((d, &yv), &gv) in d.iter_mut().zip(ys).zip(gs) {
                    *d = yv * (gv - dot);
                }
            }
            acc.add_vec(*x, dx)?;
        }
        Op::MeanSpatial(x) => {
            let (_, _, s) = spatial("mean_spatial", val(*x))?;
            let inv = T::of(1.0 / s as f64);
            let mut dx = Vec::with_capacity(val(*x).len());
            for &gv in gd {
                dx.extend(std::iter::repeat_n(gv * inv, s));
            }
            acc.add_vec(*x, dx)?;
        }
        Op::Mse(a, b) => {
            let k = gd[0] * T::of(2.0 / val(*a).len() as f64);
            let diff = val(*a).zip_map(val(*b), "mse", |x, y| (x - y) * k)?;
            if acc.wants(*b) {
                acc.add(*b, diff.map(|x| -x))?;
            }
            acc.add(*a, diff)?;
        }
        Op::Sum(x) => {
            acc.add(*x, Tensor::full(val(*x).shape(), gd[0]))?;
        }
        Op::Mean(x) => {
            let v = gd[0] / T::of(val(*x).len() as f64);
            acc.add(*x, Tensor::full(val(*x).shape(), v))?;
        }
    }
    Ok(())
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: IndexMap<String, Var>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to a tracked leaf, `None` if the loss does not
    /// depend on it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name).and_then(|&v| self.wrt(v))
    }

    /// Gradient for every parameter in `store`; parameters that did not take
    /// part in the forward pass get exact zeros.
    pub fn into_param_map(mut self, store: &ParamStore<T>) -> IndexMap<String, Tensor<T>> {
        store
            .iter()
            .map(|(name, p)| {
                let g = self
                    .params
                    .get(name)
                    .and_then(|&v| self.grads[v.0].take())
                    .unwrap_or_else(|| Tensor::zeros(p.shape()));
                (name.clone(), g)
            })
            .collect()
    }
}

/// `d loss / d p` for every parameter of `params`, consuming the tape.
pub fn backprop_gradients<T: Scalar>(
    loss: Var,
    params: &ParamStore<T>,
    tape: Tape<T>,
) -> Result<IndexMap<String, Tensor<T>>> {
    Ok(tape.backward(loss)?.into_param_map(params))
}
