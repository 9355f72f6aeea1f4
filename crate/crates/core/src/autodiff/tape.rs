use super::kernels::{col2im, gemm, im2col, Mat, Window2d};
use super::{NnError, Result, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Square window inside a `(batch, 1, h, w)` activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchWindow {
    pub row: usize,
    pub col: usize,
    pub size: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d { input: Var, weight: Var, bias: Var },
    ConvTranspose2 { input: Var, weight: Var, bias: Var },
    AvgPool2 { input: Var },
    Relu { input: Var },
    Sigmoid { input: Var },
    Square { input: Var },
    Add { lhs: Var, rhs: Var },
    Scale { input: Var, factor: f64 },
    Sum { input: Var },
    Mean { input: Var },
    GlobalSumPool { input: Var },
    Dense { input: Var, weight: Var, bias: Var },
    SampleRange { input: Var, argmax: Vec<usize>, argmin: Vec<usize> },
    PatchVariance { input: Var, window: PatchWindow },
    Variance { input: Var },
    Reciprocal { input: Var, floor: f64 },
    Pearson { predicted: Var, observed: Vec<f64>, eps: f64 },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Append-only computation record. Nodes are created in topological order,
/// so the reverse pass is a single backward sweep over the node list.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every trainable leaf.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Stores the gradient of `var` (zeros if unreachable) into `tensor.grad`.
    pub fn write_to(&self, var: Var, tensor: &mut Tensor) {
        tensor.grad = Some(match self.get(var) {
            Some(g) => g.to_vec(),
            None => vec![0.0; tensor.numel()],
        });
    }
}

fn expect_rank(op: &'static str, shape: &[usize], rank: usize) -> Result<()> {
    if shape.len() != rank {
        return Err(NnError::Invalid { op, reason: format!("expected rank {rank}, found shape {shape:?}") });
    }
    Ok(())
}

fn add_into(acc: &mut Option<Vec<f64>>, delta: Vec<f64>) {
    match acc {
        Some(a) => a.iter_mut().zip(delta).for_each(|(x, d)| *x += d),
        None => *acc = Some(delta),
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    let s = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    s.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

fn conv_window(channels: usize, h: usize, w: usize, kernel: usize) -> Window2d {
    Window2d { channels, height: h, width: w, kernel, stride: 1, pad: kernel / 2, out_h: h, out_w: w }
}

/// Geometry of the stride-2, 4x4, pad-1 convolution from a `(2h, 2w)` map
/// down to `(h, w)`; the transposed convolution runs it backwards.
fn down_window(channels: usize, h: usize, w: usize) -> Window2d {
    Window2d { channels, height: 2 * h, width: 2 * w, kernel: 4, stride: 2, pad: 1, out_h: h, out_w: w }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node { shape, value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.node(*v).requires_grad)
    }

    /// Records a copy of `tensor`; it is differentiated iff `requires_grad`.
    pub fn leaf(&mut self, tensor: &Tensor) -> Var {
        self.push(tensor.shape().to_vec(), tensor.data().to_vec(), Op::Leaf, tensor.requires_grad)
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(NnError::DataLength { len: data.len(), shape });
        }
        Ok(self.push(shape, data, Op::Leaf, false))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.node(v).value[0]
    }

    /// Same-padded 2-D convolution, stride 1. Input `(B, Ci, H, W)`,
    /// weight `(Co, Ci, k, k)` with odd `k`, bias `(Co)`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (is, ws) = (self.shape(input).to_vec(), self.shape(weight).to_vec());
        expect_rank("conv2d", &is, 4)?;
        expect_rank("conv2d", &ws, 4)?;
        let (b, ci, h, w) = (is[0], is[1], is[2], is[3]);
        let (co, k) = (ws[0], ws[2]);
        if ws[1] != ci {
            return Err(NnError::ChannelMismatch { op: "conv2d", expected: ws[1], found: ci });
        }
        if k % 2 == 0 || ws[3] != k {
            return Err(NnError::Invalid { op: "conv2d", reason: format!("kernel must be square and odd, got {ws:?}") });
        }
        if self.shape(bias) != [co] {
            return Err(NnError::Shape { op: "conv2d bias", expected: vec![co], found: self.shape(bias).to_vec() });
        }
        let g = conv_window(ci, h, w, k);
        let hw = h * w;
        let mut out = vec![0.0; b * co * hw];
        let mut col = vec![0.0; g.col_rows() * hw];
        {
            let x = self.value(input);
            let wt = self.value(weight);
            let bs = self.value(bias);
            for n in 0..b {
                let img = &x[n * ci * hw..(n + 1) * ci * hw];
                let dst = &mut out[n * co * hw..(n + 1) * co * hw];
                for (o, plane) in dst.chunks_exact_mut(hw).enumerate() {
                    plane.fill(bs[o]);
                }
                if k == 1 {
                    gemm(co, ci, hw, Mat::n(wt), Mat::n(img), dst, true);
                } else {
                    im2col(img, &g, &mut col);
                    gemm(co, g.col_rows(), hw, Mat::n(wt), Mat::n(&col), dst, true);
                }
            }
        }
        let rg = self.any_grad(&[input, weight, bias]);
        Ok(self.push(vec![b, co, h, w], out, Op::Conv2d { input, weight, bias }, rg))
    }

    /// 4x4 stride-2 transposed convolution. Input `(B, Ci, h, w)`,
    /// weight `(Ci, Co, 4, 4)`, output `(B, Co, 2h, 2w)`: the raw
    /// `(2h+2, 2w+2)` scatter cropped by one pixel on every side.
    pub fn conv_transpose2(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (is, ws) = (self.shape(input).to_vec(), self.shape(weight).to_vec());
        expect_rank("conv_transpose2", &is, 4)?;
        expect_rank("conv_transpose2", &ws, 4)?;
        let (b, ci, h, w) = (is[0], is[1], is[2], is[3]);
        if ws[0] != ci {
            return Err(NnError::ChannelMismatch { op: "conv_transpose2", expected: ws[0], found: ci });
        }
        if ws[2] != 4 || ws[3] != 4 {
            return Err(NnError::Invalid { op: "conv_transpose2", reason: format!("kernel must be 4x4, got {ws:?}") });
        }
        let co = ws[1];
        if self.shape(bias) != [co] {
            return Err(NnError::Shape { op: "conv_transpose2 bias", expected: vec![co], found: self.shape(bias).to_vec() });
        }
        let g = down_window(co, h, w);
        let (hw, ohw) = (h * w, 4 * h * w);
        let mut out = vec![0.0; b * co * ohw];
        let mut col = vec![0.0; g.col_rows() * hw];
        {
            let x = self.value(input);
            let wt = self.value(weight);
            let bs = self.value(bias);
            for n in 0..b {
                let img = &x[n * ci * hw..(n + 1) * ci * hw];
                gemm(co * 16, ci, hw, Mat::t(wt), Mat::n(img), &mut col, false);
                let dst = &mut out[n * co * ohw..(n + 1) * co * ohw];
                for (o, plane) in dst.chunks_exact_mut(ohw).enumerate() {
                    plane.fill(bs[o]);
                }
                col2im(&col, &g, dst);
            }
        }
        let rg = self.any_grad(&[input, weight, bias]);
        Ok(self.push(vec![b, co, 2 * h, 2 * w], out, Op::ConvTranspose2 { input, weight, bias }, rg))
    }

    /// 2x2 average pooling with stride 2.
    pub fn avg_pool2(&mut self, input: Var) -> Result<Var> {
        let is = self.shape(input).to_vec();
        expect_rank("avg_pool2", &is, 4)?;
        let (b, c, h, w) = (is[0], is[1], is[2], is[3]);
        if h % 2 == 1 || w % 2 == 1 {
            return Err(NnError::OddSpatial { height: h, width: w });
        }
        let (oh, ow) = (h / 2, w / 2);
        let x = self.value(input);
        let mut out = vec![0.0; b * c * oh * ow];
        for p in 0..b * c {
            let src = &x[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
            for i in 0..oh {
                for j in 0..ow {
                    let r = 2 * i * w + 2 * j;
                    dst[i * ow + j] = 0.25 * (src[r] + src[r + 1] + src[r + w] + src[r + w + 1]);
                }
            }
        }
        let rg = self.any_grad(&[input]);
        Ok(self.push(vec![b, c, oh, ow], out, Op::AvgPool2 { input }, rg))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let out = self.value(input).iter().map(|&x| x.max(0.0)).collect();
        let rg = self.any_grad(&[input]);
        self.push(self.shape(input).to_vec(), out, Op::Relu { input }, rg)
    }

    /// Logistic sigmoid; outputs stay strictly inside (0, 1).
    pub fn sigmoid(&mut self, input: Var) -> Var {
        let out = self.value(input).iter().map(|&x| sigmoid(x)).collect();
        let rg = self.any_grad(&[input]);
        self.push(self.shape(input).to_vec(), out, Op::Sigmoid { input }, rg)
    }

    pub fn square(&mut self, input: Var) -> Var {
        let out = self.value(input).iter().map(|&x| x * x).collect();
        let rg = self.any_grad(&[input]);
        self.push(self.shape(input).to_vec(), out, Op::Square { input }, rg)
    }

    pub fn add(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        if self.shape(lhs) != self.shape(rhs) {
            return Err(NnError::Shape { op: "add", expected: self.shape(lhs).to_vec(), found: self.shape(rhs).to_vec() });
        }
        let out = self.value(lhs).iter().zip(self.value(rhs)).map(|(a, b)| a + b).collect();
        let rg = self.any_grad(&[lhs, rhs]);
        Ok(self.push(self.shape(lhs).to_vec(), out, Op::Add { lhs, rhs }, rg))
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Var {
        let out = self.value(input).iter().map(|&x| x * factor).collect();
        let rg = self.any_grad(&[input]);
        self.push(self.shape(input).to_vec(), out, Op::Scale { input, factor }, rg)
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, input: Var) -> Var {
        let s = self.value(input).iter().sum();
        let rg = self.any_grad(&[input]);
        self.push(vec![1], vec![s], Op::Sum { input }, rg)
    }

    /// Mean of all elements, shape `[1]`.
    pub fn mean(&mut self, input: Var) -> Var {
        let v = self.value(input);
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let rg = self.any_grad(&[input]);
        self.push(vec![1], vec![m], Op::Mean { input }, rg)
    }

    /// `(B, 1, H, W)` to `(B, 1)`: the spatial sum of each image.
    pub fn global_sum_pool(&mut self, input: Var) -> Result<Var> {
        let is = self.shape(input).to_vec();
        expect_rank("global_sum_pool", &is, 4)?;
        if is[1] != 1 {
            return Err(NnError::ChannelMismatch { op: "global_sum_pool", expected: 1, found: is[1] });
        }
        let hw = is[2] * is[3];
        let out = self.value(input).chunks_exact(hw.max(1)).map(|c| c.iter().sum()).collect();
        let rg = self.any_grad(&[input]);
        Ok(self.push(vec![is[0], 1], out, Op::GlobalSumPool { input }, rg))
    }

    /// `y = x W^T + b` for `x` of shape `(B, in)` and `W` of shape `(out, in)`.
    pub fn dense(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (is, ws) = (self.shape(input).to_vec(), self.shape(weight).to_vec());
        expect_rank("dense", &is, 2)?;
        expect_rank("dense", &ws, 2)?;
        if is[1] != ws[1] {
            return Err(NnError::Shape { op: "dense", expected: vec![is[0], ws[1]], found: is });
        }
        let (b, out_n, in_n) = (is[0], ws[0], ws[1]);
        if self.shape(bias) != [out_n] {
            return Err(NnError::Shape { op: "dense bias", expected: vec![out_n], found: self.shape(bias).to_vec() });
        }
        let mut out = Vec::with_capacity(b * out_n);
        for _ in 0..b {
            out.extend((0..out_n).map(|o| self.value(bias)[o]));
        }
        gemm(b, in_n, out_n, Mat::n(self.value(input)), Mat::t(self.value(weight)), &mut out, true);
        let rg = self.any_grad(&[input, weight, bias]);
        Ok(self.push(vec![b, out_n], out, Op::Dense { input, weight, bias }, rg))
    }

    /// Per-sample `max - min` over everything but the leading axis, shape `[B]`.
    pub fn sample_range(&mut self, input: Var) -> Result<Var> {
        let is = self.shape(input).to_vec();
        if is.is_empty() || is[0] == 0 {
            return Err(NnError::Invalid { op: "sample_range", reason: "empty batch".into() });
        }
        let per = is[1..].iter().product::<usize>();
        let (mut out, mut argmax, mut argmin) = (Vec::new(), Vec::new(), Vec::new());
        for (n, chunk) in self.value(input).chunks_exact(per).enumerate() {
            let (mut hi, mut lo) = (0, 0);
            for (i, &v) in chunk.iter().enumerate() {
                if v > chunk[hi] {
                    hi = i;
                }
                if v < chunk[lo] {
                    lo = i;
                }
            }
            out.push(chunk[hi] - chunk[lo]);
            argmax.push(n * per + hi);
            argmin.push(n * per + lo);
        }
        let rg = self.any_grad(&[input]);
        Ok(self.push(vec![is[0]], out, Op::SampleRange { input, argmax, argmin }, rg))
    }

    /// Per-sample population variance inside `window` of a `(B, 1, H, W)` map.
    pub fn patch_variance(&mut self, input: Var, window: PatchWindow) -> Result<Var> {
        let is = self.shape(input).to_vec();
        expect_rank("patch_variance", &is, 4)?;
        let (b, h, w) = (is[0], is[2], is[3]);
        if is[1] != 1 {
            return Err(NnError::ChannelMismatch { op: "patch_variance", expected: 1, found: is[1] });
        }
        if window.size == 0 || window.row + window.size > h || window.col + window.size > w {
            return Err(NnError::Invalid { op: "patch_variance", reason: format!("{window:?} does not fit {h}x{w}") });
        }
        let k = (window.size * window.size) as f64;
        let x = self.value(input);
        let out = (0..b)
            .map(|n| {
                let vals = patch_iter(n, h, w, window).map(|i| x[i]);
                let mean = vals.clone().sum::<f64>() / k;
                vals.map(|v| (v - mean).powi(2)).sum::<f64>() / k
            })
            .collect();
        let rg = self.any_grad(&[input]);
        Ok(self.push(vec![b], out, Op::PatchVariance { input, window }, rg))
    }

    /// Population variance over all elements, shape `[1]`.
    pub fn variance(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let rg = self.any_grad(&[input]);
        self.push(vec![1], vec![var], Op::Variance { input }, rg)
    }

    /// Elementwise `1 / max(x, floor)`; the gradient is zero where the floor binds.
    pub fn reciprocal(&mut self, input: Var, floor: f64) -> Var {
        let out = self.value(input).iter().map(|&x| 1.0 / x.max(floor)).collect();
        let rg = self.any_grad(&[input]);
        self.push(self.shape(input).to_vec(), out, Op::Reciprocal { input, floor }, rg)
    }

    /// `1 - r` where `r` is the Pearson correlation between `predicted`
    /// (any shape with `n` elements) and the constant `observed`. `eps` is
    /// added to both sums of squares under the square roots.
    pub fn pearson_loss(&mut self, predicted: Var, observed: &[f64], eps: f64) -> Result<Var> {
        let p = self.value(predicted);
        if p.len() != observed.len() || p.len() < 2 {
            return Err(NnError::Invalid {
                op: "pearson_loss",
                reason: format!("need equal lengths >= 2, got {} and {}", p.len(), observed.len()),
            });
        }
        let s = PearsonSums::new(p, observed, eps);
        let rg = self.any_grad(&[predicted]);
        Ok(self.push(vec![1], vec![1.0 - s.r()], Op::Pearson { predicted, observed: observed.to_vec(), eps }, rg))
    }

    /// Reverse pass from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let ls = self.shape(loss);
        if ls.iter().product::<usize>() != 1 {
            return Err(NnError::NonScalarLoss(ls.to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(node, &g, &mut grads);
        }
        // Only leaves keep their gradient.
        for (g, node) in grads.iter_mut().zip(&self.nodes) {
            if !matches!(node.op, Op::Leaf) || !node.requires_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    fn backprop(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { input, weight, bias } => self.conv2d_backward(*input, *weight, *bias, g, grads),
            Op::ConvTranspose2 { input, weight, bias } => self.deconv_backward(*input, *weight, *bias, g, grads),
            Op::AvgPool2 { input } => {
                let is = self.shape(*input);
                let (h, w) = (is[2], is[3]);
                let (oh, ow) = (h / 2, w / 2);
                let mut dx = vec![0.0; self.value(*input).len()];
                for p in 0..is[0] * is[1] {
                    for i in 0..oh {
                        for j in 0..ow {
                            let d = 0.25 * g[p * oh * ow + i * ow + j];
                            let r = p * h * w + 2 * i * w + 2 * j;
                            dx[r] += d;
                            dx[r + 1] += d;
                            dx[r + w] += d;
                            dx[r + w + 1] += d;
                        }
                    }
                }
                add_into(&mut grads[input.0], dx);
            }
            Op::Relu { input } => {
                let dx = node.value.iter().zip(g).map(|(&y, &d)| if y > 0.0 { d } else { 0.0 }).collect();
                add_into(&mut grads[input.0], dx);
            }
            Op::Sigmoid { input } => {
                let dx = node.value.iter().zip(g).map(|(&s, &d)| d * s * (1.0 - s)).collect();
                add_into(&mut grads[input.0], dx);
            }
            Op::Square { input } => {
                let dx = self.value(*input).iter().zip(g).map(|(&x, &d)| 2.0 * x * d).collect();
                add_into(&mut grads[input.0], dx);
            }
            Op::Add { lhs, rhs } => {
                if self.wants(*lhs) {
                    add_into(&mut grads[lhs.0], g.to_vec());
                }
                if self.wants(*rhs) {
                    add_into(&mut grads[rhs.0], g.to_vec());
                }
            }
            Op::Scale { input, factor } => {
                add_into(&mut grads[input.0], g.iter().map(|d| d * factor).collect());
            }
            Op::Sum { input } => {
                add_into(&mut grads[input.0], vec![g[0]; self.value(*input).len()]);
            }
            Op::Mean { input } => {
                let n = self.value(*input).len();
                add_into(&mut grads[input.0], vec![g[0] / n as f64; n]);
            }
            Op::GlobalSumPool { input } => {
                let is = self.shape(*input);
                let hw = is[2] * is[3];
                let dx = (0..is[0]).flat_map(|n| std::iter::repeat_n(g[n], hw)).collect();
                add_into(&mut grads[input.0], dx);
            }
            Op::Dense { input, weight, bias } => {
                let is = self.shape(*input);
                let (b, in_n) = (is[0], is[1]);
                let out_n = self.shape(*weight)[0];
                if self.wants(*input) {
                    let mut dx = vec![0.0; b * in_n];
                    gemm(b, out_n, in_n, Mat::n(g), Mat::n(self.value(*weight)), &mut dx, false);
                    add_into(&mut grads[input.0], dx);
                }
                if self.wants(*weight) {
                    let mut dw = vec![0.0; out_n * in_n];
                    gemm(out_n, b, in_n, Mat::t(g), Mat::n(self.value(*input)), &mut dw, false);
                    add_into(&mut grads[weight.0], dw);
                }
                if self.wants(*bias) {
                    let mut db = vec![0.0; out_n];
                    for row in g.chunks_exact(out_n) {
                        db.iter_mut().zip(row).for_each(|(a, d)| *a += d);
                    }
                    add_into(&mut grads[bias.0], db);
                }
            }
            Op::SampleRange { input, argmax, argmin } => {
                let mut dx = vec![0.0; self.value(*input).len()];
                for n in 0..g.len() {
                    dx[argmax[n]] += g[n];
                    dx[argmin[n]] -= g[n];
                }
                add_into(&mut grads[input.0], dx);
            }
            Op::PatchVariance { input, window } => {
                let is = self.shape(*input);
                let (h, w) = (is[2], is[3]);
                let x = self.value(*input);
                let k = (window.size * window.size) as f64;
                let mut dx = vec![0.0; x.len()];
                for n in 0..is[0] {
                    let mean = patch_iter(n, h, w, *window).map(|i| x[i]).sum::<f64>() / k;
                    for i in patch_iter(n, h, w, *window) {
                        dx[i] = g[n] * 2.0 * (x[i] - mean) / k;
                    }
                }
                add_into(&mut grads[input.0], dx);
            }
            Op::Variance { input } => {
                let x = self.value(*input);
                let n = x.len() as f64;
                let mean = x.iter().sum::<f64>() / n;
                add_into(&mut grads[input.0], x.iter().map(|v| g[0] * 2.0 * (v - mean) / n).collect());
            }
            Op::Reciprocal { input, floor } => {
                let dx = self
                    .value(*input)
                    .iter()
                    .zip(g)
                    .map(|(&x, &d)| if x > *floor { -d / (x * x) } else { 0.0 })
                    .collect();
                add_into(&mut grads[input.0], dx);
            }
            Op::Pearson { predicted, observed, eps } => {
                let s = PearsonSums::new(self.value(*predicted), observed, *eps);
                add_into(&mut grads[predicted.0], s.gradient().into_iter().map(|d| -d * g[0]).collect());
            }
        }
    }

    fn conv2d_backward(&self, input: Var, weight: Var, bias: Var, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let is = self.shape(input);
        let ws = self.shape(weight);
        let (b, ci, h, w) = (is[0], is[1], is[2], is[3]);
        let (co, k) = (ws[0], ws[2]);
        let hw = h * w;
        let geo = conv_window(ci, h, w, k);
        let x = self.value(input);
        let wt = self.value(weight);
        let (want_x, want_w) = (self.wants(input), self.wants(weight));
        let mut dx = want_x.then(|| vec![0.0; x.len()]);
        let mut dw = want_w.then(|| vec![0.0; wt.len()]);
        let mut col = vec![0.0; geo.col_rows() * hw];
        let mut dcol = vec![0.0; geo.col_rows() * hw];
        for n in 0..b {
            let img = &x[n * ci * hw..(n + 1) * ci * hw];
            let gn = &g[n * co * hw..(n + 1) * co * hw];
            if let Some(dw) = dw.as_mut() {
                if k == 1 {
                    gemm(co, hw, ci, Mat::n(gn), Mat::t(img), dw, true);
                } else {
                    im2col(img, &geo, &mut col);
                    gemm(co, hw, geo.col_rows(), Mat::n(gn), Mat::t(&col), dw, true);
                }
            }
            if let Some(dx) = dx.as_mut() {
                let dimg = &mut dx[n * ci * hw..(n + 1) * ci * hw];
                if k == 1 {
                    gemm(ci, co, hw, Mat::t(wt), Mat::n(gn), dimg, true);
                } else {
                    gemm(geo.col_rows(), co, hw, Mat::t(wt), Mat::n(gn), &mut dcol, false);
                    col2im(&dcol, &geo, dimg);
                }
            }
        }
        if let Some(dx) = dx {
            add_into(&mut grads[input.0], dx);
        }
        if let Some(dw) = dw {
            add_into(&mut grads[weight.0], dw);
        }
        if self.wants(bias) {
            add_into(&mut grads[bias.0], channel_sums(g, b, co, hw));
        }
    }

    fn deconv_backward(&self, input: Var, weight: Var, bias: Var, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let is = self.shape(input);
        let ws = self.shape(weight);
        let (b, ci, h, w) = (is[0], is[1], is[2], is[3]);
        let co = ws[1];
        let (hw, ohw) = (h * w, 4 * h * w);
        let geo = down_window(co, h, w);
        let x = self.value(input);
        let wt = self.value(weight);
        let (want_x, want_w) = (self.wants(input), self.wants(weight));
        let mut dx = want_x.then(|| vec![0.0; x.len()]);
        let mut dw = want_w.then(|| vec![0.0; wt.len()]);
        let mut dcol = vec![0.0; geo.col_rows() * hw];
        for n in 0..b {
            let gn = &g[n * co * ohw..(n + 1) * co * ohw];
            im2col(gn, &geo, &mut dcol);
            if let Some(dw) = dw.as_mut() {
                let img = &x[n * ci * hw..(n + 1) * ci * hw];
                gemm(ci, hw, co * 16, Mat::n(img), Mat::t(&dcol), dw, true);
            }
            if let Some(dx) = dx.as_mut() {
                gemm(ci, co * 16, hw, Mat::n(wt), Mat::n(&dcol), &mut dx[n * ci * hw..(n + 1) * ci * hw], true);
            }
        }
        if let Some(dx) = dx {
            add_into(&mut grads[input.0], dx);
        }
        if let Some(dw) = dw {
            add_into(&mut grads[weight.0], dw);
        }
        if self.wants(bias) {
            add_into(&mut grads[bias.0], channel_sums(g, b, co, ohw));
        }
    }
}

fn channel_sums(g: &[f64], b: usize, c: usize, plane: usize) -> Vec<f64> {
    let mut out = vec![0.0; c];
    for n in 0..b {
        for (o, acc) in out.iter_mut().enumerate() {
            let start = (n * c + o) * plane;
            *acc += g[start..start + plane].iter().sum::<f64>();
        }
    }
    out
}

fn patch_iter(n: usize, h: usize, w: usize, win: PatchWindow) -> impl Iterator<Item = usize> + Clone {
    let base = n * h * w;
    (win.row..win.row + win.size).flat_map(move |r| (win.col..win.col + win.size).map(move |c| base + r * w + c))
}

struct PearsonSums {
    centered_p: Vec<f64>,
    centered_o: Vec<f64>,
    cross: f64,
    norm_p: f64,
    norm_o: f64,
}

impl PearsonSums {
    fn new(p: &[f64], o: &[f64], eps: f64) -> Self {
        let n = p.len() as f64;
        let mp = p.iter().sum::<f64>() / n;
        let mo = o.iter().sum::<f64>() / n;
        let centered_p: Vec<f64> = p.iter().map(|v| v - mp).collect();
        let centered_o: Vec<f64> = o.iter().map(|v| v - mo).collect();
        let cross = centered_p.iter().zip(&centered_o).map(|(a, b)| a * b).sum();
        let norm_p = (centered_p.iter().map(|a| a * a).sum::<f64>() + eps).sqrt();
        let norm_o = (centered_o.iter().map(|b| b * b).sum::<f64>() + eps).sqrt();
        Self { centered_p, centered_o, cross, norm_p, norm_o }
    }

    fn r(&self) -> f64 {
        self.cross / (self.norm_p * self.norm_o)
    }

    /// `dr / dp_i`.
    fn gradient(&self) -> Vec<f64> {
        let denom = self.norm_p * self.norm_o;
        let k = self.cross / (self.norm_p * self.norm_p * denom);
        self.centered_o.iter().zip(&self.centered_p).map(|(b, a)| b / denom - k * a).collect()
    }
}

/// Stride-2 4x4 pad-1 convolution without bias: `(B, Co, 2h, 2w)` with
/// weights `(Ci, Co, 4, 4)` to `(B, Ci, h, w)`. This is the adjoint of
/// [`Tape::conv_transpose2`] with the same weights.
pub fn conv_downsample(input: &Tensor, weight: &Tensor) -> Result<Tensor> {
    let (is, ws) = (input.shape(), weight.shape());
    expect_rank("conv_downsample", is, 4)?;
    expect_rank("conv_downsample", ws, 4)?;
    let (b, co, hh, ww) = (is[0], is[1], is[2], is[3]);
    let ci = ws[0];
    if ws[1] != co {
        return Err(NnError::ChannelMismatch { op: "conv_downsample", expected: ws[1], found: co });
    }
    if hh % 2 == 1 || ww % 2 == 1 {
        return Err(NnError::OddSpatial { height: hh, width: ww });
    }
    let (h, w) = (hh / 2, ww / 2);
    let geo = down_window(co, h, w);
    let mut col = vec![0.0; geo.col_rows() * h * w];
    let mut out = vec![0.0; b * ci * h * w];
    for n in 0..b {
        im2col(&input.data()[n * co * hh * ww..(n + 1) * co * hh * ww], &geo, &mut col);
        gemm(ci, co * 16, h * w, Mat::n(weight.data()), Mat::n(&col), &mut out[n * ci * h * w..(n + 1) * ci * h * w], false);
    }
    Tensor::new(vec![b, ci, h, w], out)
}
