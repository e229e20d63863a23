//! Reverse-mode recording of tensor operations.

use crate::conv::{conv2d_backward_bias, conv2d_backward_input, conv2d_backward_weight, conv2d_forward, ConvGeometry};
use crate::error::{Error, Result};
use crate::fft::{fft2, ifft2};
use crate::params::ModelParams;
use crate::tensor::Tensor4;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(String),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeometry,
    },
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddChannel {
        x: Var,
        b: Var,
    },
    ChannelAffine {
        x: Var,
        scale: Var,
        bias: Var,
    },
    AvgPool2(Var),
    Upsample2(Var),
    Concat(Var, Var),
    SpectrumMag(Var),
    Mse {
        pred: Var,
        target: Tensor4,
    },
    SumSquares(Var),
    Tv(Var),
    External {
        x: Var,
        grad: Tensor4,
    },
    WeightedSum(Vec<(Var, f64)>),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor4,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of primitive operations. Backward visits nodes in
/// reverse insertion order, which is a reverse topological order.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    flip_conv_weight_grad: bool,
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
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

    /// Test hook: negates every conv kernel gradient during backward.
    #[doc(hidden)]
    pub fn inject_conv_weight_grad_fault(&mut self) {
        self.flip_conv_weight_grad = true;
    }

    pub fn value(&self, v: Var) -> &Tensor4 {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Smallest distance of any relu input or total-variation difference
    /// from its kink, over nodes that carry gradient. Finite differences
    /// are only meaningful when this exceeds the step size by a wide margin.
    /// Exactly tied TV neighbours are skipped: they come from pixels fed by
    /// identical activations, which move together under any perturbation.
    pub fn kink_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for node in &self.nodes {
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Relu(x) => {
                    margin = self.value(*x).data().iter().fold(margin, |m, v| m.min(v.abs()));
                }
                Op::Tv(x) => {
                    let t = self.value(*x);
                    let (h, w) = (t.h(), t.w());
                    for plane in t.data().chunks_exact(h * w) {
                        for i in 0..h {
                            for j in 0..w {
                                let v = plane[i * w + j];
                                if j + 1 < w && plane[i * w + j + 1] != v {
                                    margin = margin.min((plane[i * w + j + 1] - v).abs());
                                }
                                if i + 1 < h && plane[(i + 1) * w + j] != v {
                                    margin = margin.min((plane[(i + 1) * w + j] - v).abs());
                                }
                            }
                        }
                    }
                }
                _ => {}
            }
        }
        margin
    }

    fn push(&mut self, value: Tensor4, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Constant input; receives no gradient.
    pub fn leaf(&mut self, value: Tensor4) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Copy of `v` cut off from the gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.leaf(value)
    }

    pub fn param(&mut self, params: &ModelParams, name: &str) -> Result<Var> {
        let value = params.value(name)?.clone();
        Ok(self.push(value, Op::Param(name.to_string()), true))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeometry) -> Result<Var> {
        let value = conv2d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), geom)?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        Ok(self.push(value, Op::Conv2d { x, w, b, geom }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        let rg = self.rg(&[x]);
        self.push(value, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        let rg = self.rg(&[x]);
        self.push(value, Op::Sigmoid(x), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::tanh);
        let rg = self.rg(&[x]);
        self.push(value, Op::Tanh(x), rg)
    }

    fn zip(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor4> {
        let (ta, tb) = (self.value(a), self.value(b));
        ta.check_same_shape(tb, what)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor4::new(ta.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let value = self.value(x).map(|v| v * s);
        let rg = self.rg(&[x]);
        self.push(value, Op::Scale(x, s), rg)
    }

    /// Adds a per-channel offset of shape [1, C, 1, 1] or [N, C, 1, 1].
    pub fn add_channel(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        let [n, c, _, _] = tx.shape();
        let bs = tb.shape();
        if !(bs == [1, c, 1, 1] || bs == [n, c, 1, 1]) {
            return Err(Error::Shape(format!("channel offset {bs:?} for {:?}", tx.shape())));
        }
        let mut value = tx.clone();
        for a in 0..n {
            for ch in 0..c {
                let off = tb.data()[if bs[0] == 1 { ch } else { a * c + ch }];
                value.plane_mut(a, ch).iter_mut().for_each(|v| *v += off);
            }
        }
        let rg = self.rg(&[x, b]);
        Ok(self.push(value, Op::AddChannel { x, b }, rg))
    }

    /// `scale[c] * x + bias[c]` with [1, C, 1, 1] coefficients.
    pub fn channel_affine(&mut self, x: Var, scale: Var, bias: Var) -> Result<Var> {
        let tx = self.value(x);
        let c = tx.c();
        for v in [scale, bias] {
            if self.value(v).shape() != [1, c, 1, 1] {
                return Err(Error::Shape(format!(
                    "channel affine {:?} for {c} channels",
                    self.value(v).shape()
                )));
            }
        }
        let (s, b) = (self.value(scale).data(), self.value(bias).data());
        let mut value = tx.clone();
        for a in 0..tx.n() {
            for ch in 0..c {
                value.plane_mut(a, ch).iter_mut().for_each(|v| *v = s[ch] * *v + b[ch]);
            }
        }
        let rg = self.rg(&[x, scale, bias]);
        Ok(self.push(value, Op::ChannelAffine { x, scale, bias }, rg))
    }

    /// 2×2 mean pooling with stride 2.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let [n, c, h, w] = tx.shape();
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Shape(format!("avg_pool2 needs even dims, got {h}x{w}")));
        }
        let value = Tensor4::from_fn([n, c, h / 2, w / 2], |[a, ch, i, j]| {
            0.25 * (tx.at(a, ch, 2 * i, 2 * j)
                + tx.at(a, ch, 2 * i, 2 * j + 1)
                + tx.at(a, ch, 2 * i + 1, 2 * j)
                + tx.at(a, ch, 2 * i + 1, 2 * j + 1))
        });
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::AvgPool2(x), rg))
    }

    /// Nearest-neighbour 2× upsampling.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let [n, c, h, w] = tx.shape();
        let value = Tensor4::from_fn([n, c, 2 * h, 2 * w], |[a, ch, i, j]| tx.at(a, ch, i / 2, j / 2));
        let rg = self.rg(&[x]);
        self.push(value, Op::Upsample2(x), rg)
    }

    /// Channel concatenation `[a, b]`.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let [n, ca, h, w] = ta.shape();
        let [nb, cb, hb, wb] = tb.shape();
        if (n, h, w) != (nb, hb, wb) {
            return Err(Error::Shape(format!("concat {:?} with {:?}", ta.shape(), tb.shape())));
        }
        let mut data = Vec::with_capacity((ca + cb) * n * h * w);
        for s in 0..n {
            data.extend_from_slice(ta.sample(s));
            data.extend_from_slice(tb.sample(s));
        }
        let value = Tensor4::new([n, ca + cb, h, w], data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Concat(a, b), rg))
    }

    /// Per-plane magnitude of the unnormalized 2-D DFT.
    pub fn spectrum_mag(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let [n, c, h, w] = tx.shape();
        let mut value = Tensor4::zeros(tx.shape());
        for a in 0..n {
            for ch in 0..c {
                let (re, im) = fft2(tx.plane(a, ch), h, w)?;
                for (o, (r, i)) in value.plane_mut(a, ch).iter_mut().zip(re.iter().zip(&im)) {
                    *o = r.hypot(*i);
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::SpectrumMag(x), rg))
    }

    /// Mean squared difference to a constant target; scalar output.
    pub fn mse(&mut self, pred: Var, target: &Tensor4) -> Result<Var> {
        let tp = self.value(pred);
        tp.check_same_shape(target, "mse")?;
        let m = tp
            .data()
            .iter()
            .zip(target.data())
            .map(|(p, t)| (p - t) * (p - t))
            .sum::<f64>()
            / tp.len() as f64;
        let rg = self.rg(&[pred]);
        Ok(self.push(
            Tensor4::scalar(m),
            Op::Mse {
                pred,
                target: target.clone(),
            },
            rg,
        ))
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().map(|v| v * v).sum();
        let rg = self.rg(&[x]);
        self.push(Tensor4::scalar(s), Op::SumSquares(x), rg)
    }

    /// Mean absolute forward difference over all horizontal and vertical
    /// neighbour pairs of every plane.
    pub fn total_variation(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let [n, c, h, w] = tx.shape();
        let pairs = n * c * (h * (w - 1) + (h - 1) * w);
        if pairs == 0 {
            return Err(Error::Shape(format!("total variation of {:?}", tx.shape())));
        }
        let mut acc = 0.0;
        for a in 0..n {
            for ch in 0..c {
                let p = tx.plane(a, ch);
                for i in 0..h {
                    for j in 0..w {
                        if j + 1 < w {
                            acc += (p[i * w + j + 1] - p[i * w + j]).abs();
                        }
                        if i + 1 < h {
                            acc += (p[(i + 1) * w + j] - p[i * w + j]).abs();
                        }
                    }
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor4::scalar(acc / pairs as f64), Op::Tv(x), rg))
    }

    /// Scalar computed outside the tape, with its gradient w.r.t. `x`
    /// already known.
    pub fn external(&mut self, x: Var, value: f64, grad: Tensor4) -> Result<Var> {
        self.value(x).check_same_shape(&grad, "external gradient")?;
        if !value.is_finite() {
            return Err(Error::NonFinite("external scalar".into()));
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor4::scalar(value), Op::External { x, grad }, rg))
    }

    /// Σ wᵢ·sᵢ over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut total = 0.0;
        for &(v, w) in terms {
            total += w * self.value(v).item()?;
        }
        let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        let rg = self.rg(&vars);
        Ok(self.push(Tensor4::scalar(total), Op::WeightedSum(terms.to_vec()), rg))
    }

    /// Propagates `seed · ∂loss` back through the tape and adds the result
    /// to the gradient accumulators in `params`.
    pub fn backward(&self, loss: Var, seed: f64, params: &mut ModelParams) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::EmptyTape);
        }
        if loss.0 >= self.nodes.len() {
            return Err(Error::Invalid(format!("loss node {} not on tape", loss.0)));
        }
        self.value(loss).item()?;
        let mut grads: Vec<Option<Tensor4>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor4::scalar(seed));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backward_node(node, g, &mut grads, params)?;
        }
        Ok(())
    }

    fn send(&self, grads: &mut [Option<Tensor4>], v: Var, g: Tensor4) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn backward_node(
        &self,
        node: &Node,
        g: Tensor4,
        grads: &mut [Option<Tensor4>],
        params: &mut ModelParams,
    ) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::Param(name) => params.accumulate(name, &g)?,
            Op::Conv2d { x, w, b, geom } => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                if self.requires_grad(*x) {
                    self.send(grads, *x, conv2d_backward_input(&g, tw, tx.shape(), *geom));
                }
                if self.requires_grad(*w) {
                    let mut dw = conv2d_backward_weight(&g, tx, tw.shape(), *geom);
                    if self.flip_conv_weight_grad {
                        dw.scale(-1.0);
                    }
                    self.send(grads, *w, dw);
                }
                if let Some(b) = b {
                    if self.requires_grad(*b) {
                        self.send(grads, *b, conv2d_backward_bias(&g));
                    }
                }
            }
            Op::Relu(x) => {
                let mut d = g;
                for (dv, xv) in d.data_mut().iter_mut().zip(self.value(*x).data()) {
                    if *xv <= 0.0 {
                        *dv = 0.0;
                    }
                }
                self.send(grads, *x, d);
            }
            Op::Sigmoid(x) => {
                let mut d = g;
                for (dv, y) in d.data_mut().iter_mut().zip(node.value.data()) {
                    *dv *= y * (1.0 - y);
                }
                self.send(grads, *x, d);
            }
            Op::Tanh(x) => {
                let mut d = g;
                for (dv, y) in d.data_mut().iter_mut().zip(node.value.data()) {
                    *dv *= 1.0 - y * y;
                }
                self.send(grads, *x, d);
            }
            Op::Add(a, b) => {
                self.send(grads, *a, g.clone());
                self.send(grads, *b, g);
            }
            Op::Sub(a, b) => {
                self.send(grads, *a, g.clone());
                self.send(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    let data = g.data().iter().zip(tb.data()).map(|(d, y)| d * y).collect();
                    self.send(grads, *a, Tensor4::new(g.shape(), data)?);
                }
                if self.requires_grad(*b) {
                    let data = g.data().iter().zip(ta.data()).map(|(d, y)| d * y).collect();
                    self.send(grads, *b, Tensor4::new(g.shape(), data)?);
                }
            }
            Op::Scale(x, s) => self.send(grads, *x, g.map(|v| v * s)),
            Op::AddChannel { x, b } => {
                if self.requires_grad(*b) {
                    let bs = self.value(*b).shape();
                    let mut db = Tensor4::zeros(bs);
                    let [n, c, _, _] = g.shape();
                    for a in 0..n {
                        for ch in 0..c {
                            let k = if bs[0] == 1 { ch } else { a * c + ch };
                            db.data_mut()[k] += g.plane(a, ch).iter().sum::<f64>();
                        }
                    }
                    self.send(grads, *b, db);
                }
                self.send(grads, *x, g);
            }
            Op::ChannelAffine { x, scale, bias } => {
                let tx = self.value(*x);
                let s = self.value(*scale).data();
                let [n, c, _, _] = g.shape();
                let mut ds = Tensor4::zeros([1, c, 1, 1]);
                let mut db = Tensor4::zeros([1, c, 1, 1]);
                let mut dx = g.clone();
                for a in 0..n {
                    for ch in 0..c {
                        let gp = g.plane(a, ch);
                        ds.data_mut()[ch] += gp.iter().zip(tx.plane(a, ch)).map(|(d, v)| d * v).sum::<f64>();
                        db.data_mut()[ch] += gp.iter().sum::<f64>();
                        dx.plane_mut(a, ch).iter_mut().for_each(|v| *v *= s[ch]);
                    }
                }
                self.send(grads, *scale, ds);
                self.send(grads, *bias, db);
                self.send(grads, *x, dx);
            }
            Op::AvgPool2(x) => {
                let shape = self.value(*x).shape();
                let d = Tensor4::from_fn(shape, |[a, ch, i, j]| 0.25 * g.at(a, ch, i / 2, j / 2));
                self.send(grads, *x, d);
            }
            Op::Upsample2(x) => {
                let shape = self.value(*x).shape();
                let d = Tensor4::from_fn(shape, |[a, ch, i, j]| {
                    g.at(a, ch, 2 * i, 2 * j)
                        + g.at(a, ch, 2 * i, 2 * j + 1)
                        + g.at(a, ch, 2 * i + 1, 2 * j)
                        + g.at(a, ch, 2 * i + 1, 2 * j + 1)
                });
                self.send(grads, *x, d);
            }
            Op::Concat(a, b) => {
                let ca = self.value(*a).c();
                let [n, c, h, w] = g.shape();
                let p = h * w;
                let mut da = Vec::with_capacity(n * ca * p);
                let mut db = Vec::with_capacity(n * (c - ca) * p);
                for s in 0..n {
                    let sample = g.sample(s);
                    da.extend_from_slice(&sample[..ca * p]);
                    db.extend_from_slice(&sample[ca * p..]);
                }
                self.send(grads, *a, Tensor4::new([n, ca, h, w], da)?);
                self.send(grads, *b, Tensor4::new([n, c - ca, h, w], db)?);
            }
            Op::SpectrumMag(x) => {
                // d|X|/dx = H·W · Re(ifft2(g · X/|X|)), zero where |X| = 0
                let tx = self.value(*x);
                let [n, c, h, w] = tx.shape();
                let mut d = Tensor4::zeros(tx.shape());
                for a in 0..n {
                    for ch in 0..c {
                        let (re, im) = fft2(tx.plane(a, ch), h, w)?;
                        let gp = g.plane(a, ch);
                        let mag = node.value.plane(a, ch);
                        let mut ur = vec![0.0; h * w];
                        let mut ui = vec![0.0; h * w];
                        for k in 0..h * w {
                            if mag[k] > 0.0 {
                                ur[k] = gp[k] * re[k] / mag[k];
                                ui[k] = gp[k] * im[k] / mag[k];
                            }
                        }
                        let (br, _) = ifft2(&ur, &ui, h, w)?;
                        let scale = (h * w) as f64;
                        for (o, v) in d.plane_mut(a, ch).iter_mut().zip(&br) {
                            *o = scale * v;
                        }
                    }
                }
                self.send(grads, *x, d);
            }
            Op::Mse { pred, target } => {
                let gs = g.item()?;
                let tp = self.value(*pred);
                let k = 2.0 * gs / tp.len() as f64;
                let data = tp.data().iter().zip(target.data()).map(|(p, t)| k * (p - t)).collect();
                self.send(grads, *pred, Tensor4::new(tp.shape(), data)?);
            }
            Op::SumSquares(x) => {
                let gs = g.item()?;
                self.send(grads, *x, self.value(*x).map(|v| 2.0 * gs * v));
            }
            Op::Tv(x) => {
                let gs = g.item()?;
                let tx = self.value(*x);
                let [n, c, h, w] = tx.shape();
                let k = gs / (n * c * (h * (w - 1) + (h - 1) * w)) as f64;
                let mut d = Tensor4::zeros(tx.shape());
                for a in 0..n {
                    for ch in 0..c {
                        let p = tx.plane(a, ch);
                        let dp = d.plane_mut(a, ch);
                        for i in 0..h {
                            for j in 0..w {
                                if j + 1 < w {
                                    let s = k * sign(p[i * w + j + 1] - p[i * w + j]);
                                    dp[i * w + j + 1] += s;
                                    dp[i * w + j] -= s;
                                }
                                if i + 1 < h {
                                    let s = k * sign(p[(i + 1) * w + j] - p[i * w + j]);
                                    dp[(i + 1) * w + j] += s;
                                    dp[i * w + j] -= s;
                                }
                            }
                        }
                    }
                }
                self.send(grads, *x, d);
            }
            Op::External { x, grad } => {
                let gs = g.item()?;
                self.send(grads, *x, grad.map(|v| gs * v));
            }
            Op::WeightedSum(terms) => {
                let gs = g.item()?;
                for &(v, w) in terms {
                    self.send(grads, v, Tensor4::scalar(gs * w));
                }
            }
        }
        Ok(())
    }
}
