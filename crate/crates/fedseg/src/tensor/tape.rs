//! Gradient tape: op recording and the reverse sweep.

use super::{check_finite, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add { a: usize, b: usize },
    Mul { a: usize, b: usize },
    MulScalar { a: usize, s: f32 },
    Relu { a: usize },
    Log { a: usize },
    Mean { a: usize },
    MatMul { a: usize, b: usize, m: usize, k: usize, n: usize },
    Transpose2d { a: usize, rows: usize, cols: usize },
    Reshape { a: usize },
    Conv2d { input: usize, kernel: usize },
    BiasAdd { input: usize, bias: usize },
    ConcatChannels { a: usize, b: usize },
    SoftmaxChannels { a: usize },
    Upsample2x { a: usize },
    Downsample2xAvg { a: usize },
    /// Confidence-weighted pixel cross-entropy from logits; pseudo-labels
    /// and weights are captured as constants.
    WeightedCe { logits: usize, classes: Vec<u8>, weights: Vec<f32>, probs: Vec<f32> },
    /// Mean per-pixel KL(reference || probs); the reference is a constant.
    KlToReference { probs: usize, reference: Vec<f32> },
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    data: Vec<f32>,
    needs_grad: bool,
}

/// Records ops in topological order; one backward pass per tape.
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f32>>>,
    frozen: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape { nodes: Vec::new(), grads: Vec::new(), frozen: false }
    }

    pub fn value(&self, v: Var) -> &[f32] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        Tensor {
            shape: self.nodes[v.0].shape.clone(),
            data: self.nodes[v.0].data.clone(),
            grad: None,
        }
    }

    /// Gradient of the last backward's loss w.r.t. `v`, if one flowed.
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    fn check_unfrozen(&self) -> Result<()> {
        if self.frozen {
            Err(Error::TapeReuse)
        } else {
            Ok(())
        }
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, data: Vec<f32>, needs_grad: bool) -> Var {
        self.nodes.push(Node { op, shape, data, needs_grad });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes[id].needs_grad
    }

    /// Insert a tensor as a leaf. Tracked leaves receive gradients.
    pub fn leaf(&mut self, t: &Tensor, tracked: bool) -> Var {
        self.push(Op::Leaf, t.shape.clone(), t.data.clone(), tracked)
    }

    /// Leaf from a raw buffer (always untracked; used for constants).
    pub fn constant(&mut self, shape: &[usize], data: Vec<f32>) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "constant shape {:?} vs buffer length {}",
                shape,
                data.len()
            )));
        }
        Ok(self.push(Op::Leaf, shape.to_vec(), data, false))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_unfrozen()?;
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::ShapeMismatch(format!(
                "add: {:?} vs {:?}",
                self.nodes[a.0].shape, self.nodes[b.0].shape
            )));
        }
        let data: Vec<f32> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x + y)
            .collect();
        check_finite(&data, "add")?;
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.needs(a.0) || self.needs(b.0);
        Ok(self.push(Op::Add { a: a.0, b: b.0 }, shape, data, ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_unfrozen()?;
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::ShapeMismatch(format!(
                "mul: {:?} vs {:?}",
                self.nodes[a.0].shape, self.nodes[b.0].shape
            )));
        }
        let data: Vec<f32> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x * y)
            .collect();
        check_finite(&data, "mul")?;
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.needs(a.0) || self.needs(b.0);
        Ok(self.push(Op::Mul { a: a.0, b: b.0 }, shape, data, ng))
    }

    pub fn mul_scalar(&mut self, a: Var, s: f32) -> Result<Var> {
        self.check_unfrozen()?;
        let data: Vec<f32> = self.nodes[a.0].data.iter().map(|x| x * s).collect();
        check_finite(&data, "mul_scalar")?;
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.needs(a.0);
        Ok(self.push(Op::MulScalar { a: a.0, s }, shape, data, ng))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.check_unfrozen()?;
        let data: Vec<f32> = self.nodes[a.0].data.iter().map(|x| x.max(0.0)).collect();
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.needs(a.0);
        Ok(self.push(Op::Relu { a: a.0 }, shape, data, ng))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.check_unfrozen()?;
        let data: Vec<f32> = self.nodes[a.0].data.iter().map(|x| x.ln()).collect();
        check_finite(&data, "log")?;
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.needs(a.0);
        Ok(self.push(Op::Log { a: a.0 }, shape, data, ng))
    }

    /// Mean over all elements; produces a scalar of shape `[1]`.
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.check_unfrozen()?;
        let src = &self.nodes[a.0].data;
        if src.is_empty() {
            return Err(Error::ShapeMismatch("mean of empty tensor".into()));
        }
        let sum: f64 = src.iter().map(|&v| v as f64).sum();
        let m = (sum / src.len() as f64) as f32;
        check_finite(&[m], "mean")?;
        let ng = self.needs(a.0);
        Ok(self.push(Op::Mean { a: a.0 }, vec![1], vec![m], ng))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_unfrozen()?;
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch(format!("matmul: {:?} x {:?}", sa, sb)));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0f32; m * n];
        matmul_forward(&self.nodes[a.0].data, &self.nodes[b.0].data, m, k, n, &mut out);
        check_finite(&out, "matmul")?;
        let ng = self.needs(a.0) || self.needs(b.0);
        Ok(self.push(Op::MatMul { a: a.0, b: b.0, m, k, n }, vec![m, n], out, ng))
    }

    pub fn transpose2d(&mut self, a: Var) -> Result<Var> {
        self.check_unfrozen()?;
        let s = &self.nodes[a.0].shape;
        if s.len() != 2 {
            return Err(Error::ShapeMismatch(format!("transpose2d: {:?}", s)));
        }
        let (r, c) = (s[0], s[1]);
        let src = &self.nodes[a.0].data;
        let mut out = vec![0.0f32; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let ng = self.needs(a.0);
        Ok(self.push(Op::Transpose2d { a: a.0, rows: r, cols: c }, vec![c, r], out, ng))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.check_unfrozen()?;
        let n: usize = shape.iter().product();
        if n != self.nodes[a.0].data.len() {
            return Err(Error::ShapeMismatch(format!(
                "reshape {:?} -> {:?}",
                self.nodes[a.0].shape, shape
            )));
        }
        let data = self.nodes[a.0].data.clone();
        let ng = self.needs(a.0);
        Ok(self.push(Op::Reshape { a: a.0 }, shape.to_vec(), data, ng))
    }

    /// 3x3-style convolution with stride 1 and zero "same" padding.
    /// Input `[H,W,Cin]`, kernel `[kh,kw,Cin,Cout]` with odd kh,kw.
    pub fn conv2d_same(&mut self, input: Var, kernel: Var) -> Result<Var> {
        self.check_unfrozen()?;
        let si = self.nodes[input.0].shape.clone();
        let sk = self.nodes[kernel.0].shape.clone();
        if si.len() != 3 || sk.len() != 4 {
            return Err(Error::ShapeMismatch(format!("conv2d: input {:?}, kernel {:?}", si, sk)));
        }
        let (h, w, cin) = (si[0], si[1], si[2]);
        let (kh, kw, kcin, cout) = (sk[0], sk[1], sk[2], sk[3]);
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::ShapeMismatch(format!("conv2d: even kernel {}x{}", kh, kw)));
        }
        if kcin != cin {
            return Err(Error::ShapeMismatch(format!(
                "conv2d: input channels {} vs kernel channels {}",
                cin, kcin
            )));
        }
        let mut out = vec![0.0f32; h * w * cout];
        conv2d_forward(
            &self.nodes[input.0].data,
            h,
            w,
            cin,
            &self.nodes[kernel.0].data,
            kh,
            kw,
            cout,
            &mut out,
        );
        check_finite(&out, "conv2d")?;
        let ng = self.needs(input.0) || self.needs(kernel.0);
        Ok(self.push(
            Op::Conv2d { input: input.0, kernel: kernel.0 },
            vec![h, w, cout],
            out,
            ng,
        ))
    }

    /// Add a per-channel bias `[C]` to an `[H,W,C]` tensor.
    pub fn bias_add(&mut self, input: Var, bias: Var) -> Result<Var> {
        self.check_unfrozen()?;
        let si = &self.nodes[input.0].shape;
        let sb = &self.nodes[bias.0].shape;
        if si.len() != 3 || sb.len() != 1 || sb[0] != si[2] {
            return Err(Error::ShapeMismatch(format!("bias_add: {:?} + {:?}", si, sb)));
        }
        let c = si[2];
        let bias_data = &self.nodes[bias.0].data;
        let data: Vec<f32> = self.nodes[input.0]
            .data
            .iter()
            .enumerate()
            .map(|(i, v)| v + bias_data[i % c])
            .collect();
        check_finite(&data, "bias_add")?;
        let shape = si.clone();
        let ng = self.needs(input.0) || self.needs(bias.0);
        Ok(self.push(Op::BiasAdd { input: input.0, bias: bias.0 }, shape, data, ng))
    }

    /// Concatenate two `[H,W,C]` tensors along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_unfrozen()?;
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[1] != sb[1] {
            return Err(Error::ShapeMismatch(format!("concat: {:?} ++ {:?}", sa, sb)));
        }
        let (h, w, ca, cb) = (sa[0], sa[1], sa[2], sb[2]);
        let mut data = vec![0.0f32; h * w * (ca + cb)];
        let da = &self.nodes[a.0].data;
        let db = &self.nodes[b.0].data;
        for px in 0..h * w {
            data[px * (ca + cb)..px * (ca + cb) + ca].copy_from_slice(&da[px * ca..(px + 1) * ca]);
            data[px * (ca + cb) + ca..(px + 1) * (ca + cb)]
                .copy_from_slice(&db[px * cb..(px + 1) * cb]);
        }
        let ng = self.needs(a.0) || self.needs(b.0);
        Ok(self.push(Op::ConcatChannels { a: a.0, b: b.0 }, vec![h, w, ca + cb], data, ng))
    }

    /// Per-pixel softmax over the channel axis of `[H,W,N]` logits,
    /// stabilized by max subtraction.
    pub fn softmax_channels(&mut self, logits: Var) -> Result<Var> {
        self.check_unfrozen()?;
        let s = self.nodes[logits.0].shape.clone();
        if s.len() != 3 || s[2] < 2 {
            return Err(Error::ShapeMismatch(format!("softmax_channels: {:?}", s)));
        }
        check_finite(&self.nodes[logits.0].data, "softmax_channels")?;
        let n = s[2];
        let src = &self.nodes[logits.0].data;
        let mut data = vec![0.0f32; src.len()];
        for px in 0..src.len() / n {
            softmax_pixel(&src[px * n..(px + 1) * n], &mut data[px * n..(px + 1) * n]);
        }
        let ng = self.needs(logits.0);
        Ok(self.push(Op::SoftmaxChannels { a: logits.0 }, s, data, ng))
    }

    /// Nearest-neighbor 2x upsampling: `[H,W,C]` -> `[2H,2W,C]`.
    pub fn upsample2x_nearest(&mut self, a: Var) -> Result<Var> {
        self.check_unfrozen()?;
        let s = &self.nodes[a.0].shape;
        if s.len() != 3 {
            return Err(Error::ShapeMismatch(format!("upsample2x: {:?}", s)));
        }
        let (h, w, c) = (s[0], s[1], s[2]);
        let src = &self.nodes[a.0].data;
        let mut data = vec![0.0f32; 4 * h * w * c];
        for y in 0..2 * h {
            for x in 0..2 * w {
                let sb = ((y / 2) * w + x / 2) * c;
                let ob = (y * 2 * w + x) * c;
                data[ob..ob + c].copy_from_slice(&src[sb..sb + c]);
            }
        }
        let ng = self.needs(a.0);
        Ok(self.push(Op::Upsample2x { a: a.0 }, vec![2 * h, 2 * w, c], data, ng))
    }

    /// 2x2 average pooling: `[H,W,C]` -> `[H/2,W/2,C]`; H and W must be even.
    pub fn downsample2x_avg(&mut self, a: Var) -> Result<Var> {
        self.check_unfrozen()?;
        let s = &self.nodes[a.0].shape;
        if s.len() != 3 || s[0] % 2 != 0 || s[1] % 2 != 0 {
            return Err(Error::ShapeMismatch(format!("downsample2x: {:?}", s)));
        }
        let (h, w, c) = (s[0], s[1], s[2]);
        let (oh, ow) = (h / 2, w / 2);
        let src = &self.nodes[a.0].data;
        let mut data = vec![0.0f32; oh * ow * c];
        for y in 0..oh {
            for x in 0..ow {
                let ob = (y * ow + x) * c;
                for ch in 0..c {
                    let i00 = ((2 * y) * w + 2 * x) * c + ch;
                    let i01 = ((2 * y) * w + 2 * x + 1) * c + ch;
                    let i10 = ((2 * y + 1) * w + 2 * x) * c + ch;
                    let i11 = ((2 * y + 1) * w + 2 * x + 1) * c + ch;
                    data[ob + ch] = (src[i00] + src[i01] + src[i10] + src[i11]) * 0.25;
                }
            }
        }
        let ng = self.needs(a.0);
        Ok(self.push(Op::Downsample2xAvg { a: a.0 }, vec![oh, ow, c], data, ng))
    }

    /// Confidence-weighted pixel cross-entropy from `[H,W,N]` logits:
    /// `(1/(H*W)) * sum_px weights[px] * -log softmax(logits)[px][classes[px]]`.
    pub fn weighted_cross_entropy(
        &mut self,
        logits: Var,
        classes: &[u8],
        weights: &[f32],
    ) -> Result<Var> {
        self.check_unfrozen()?;
        let s = self.nodes[logits.0].shape.clone();
        if s.len() != 3 {
            return Err(Error::ShapeMismatch(format!("weighted_ce: logits {:?}", s)));
        }
        let (npx, n) = (s[0] * s[1], s[2]);
        if classes.len() != npx || weights.len() != npx {
            return Err(Error::ShapeMismatch(format!(
                "weighted_ce: {} pixels, {} classes, {} weights",
                npx,
                classes.len(),
                weights.len()
            )));
        }
        if let Some(&c) = classes.iter().find(|&&c| (c as usize) >= n) {
            return Err(Error::LabelOutOfRange { label: c as usize, num_classes: n });
        }
        check_finite(&self.nodes[logits.0].data, "weighted_ce")?;
        let src = &self.nodes[logits.0].data;
        let mut probs = vec![0.0f32; src.len()];
        let mut acc = 0.0f64;
        for px in 0..npx {
            let row = &src[px * n..(px + 1) * n];
            let mut mx = row[0];
            for &v in row {
                mx = mx.max(v);
            }
            let mut denom = 0.0f64;
            for &v in row {
                denom += ((v - mx) as f64).exp();
            }
            let lse = mx as f64 + denom.ln();
            for (i, &v) in row.iter().enumerate() {
                probs[px * n + i] = ((v as f64 - lse).exp()) as f32;
            }
            acc += weights[px] as f64 * (lse - row[classes[px] as usize] as f64);
        }
        let loss = (acc / npx as f64) as f32;
        check_finite(&[loss], "weighted_ce")?;
        let ng = self.needs(logits.0);
        Ok(self.push(
            Op::WeightedCe {
                logits: logits.0,
                classes: classes.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
            vec![1],
            vec![loss],
            ng,
        ))
    }

    /// Mean per-pixel KL(reference || probs) where `probs` is an `[H,W,N]`
    /// probability field and `reference` a constant of the same layout.
    /// Probabilities are floored at 1e-12 inside the logs.
    pub fn kl_to_reference(&mut self, probs: Var, reference: &[f32]) -> Result<Var> {
        self.check_unfrozen()?;
        let s = self.nodes[probs.0].shape.clone();
        if s.len() != 3 || reference.len() != self.nodes[probs.0].data.len() {
            return Err(Error::ShapeMismatch(format!(
                "kl: probs {:?}, reference length {}",
                s,
                reference.len()
            )));
        }
        let npx = s[0] * s[1];
        let src = &self.nodes[probs.0].data;
        let mut acc = 0.0f64;
        for (&p, &r) in src.iter().zip(reference) {
            if r > 0.0 {
                let pf = (p as f64).max(1e-12);
                acc += r as f64 * ((r as f64).ln() - pf.ln());
            }
        }
        let loss = (acc / npx as f64) as f32;
        check_finite(&[loss], "kl_to_reference")?;
        let ng = self.needs(probs.0);
        Ok(self.push(
            Op::KlToReference { probs: probs.0, reference: reference.to_vec() },
            vec![1],
            vec![loss],
            ng,
        ))
    }

    /// Reverse sweep from a scalar loss. Freezes the tape.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.frozen {
            return Err(Error::TapeReuse);
        }
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::NonScalarLoss(self.nodes[loss.0].data.len()));
        }
        self.frozen = true;
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].needs_grad || self.grads[i].is_none() {
                continue;
            }
            let g = self.grads[i].take().unwrap();
            self.backprop_node(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn ensure_grad(&mut self, id: usize) -> &mut Vec<f32> {
        let len = self.nodes[id].data.len();
        self.grads[id].get_or_insert_with(|| vec![0.0; len])
    }

    fn backprop_node(&mut self, id: usize, g: &[f32]) {
        // Split borrows: node data is read-only here, grads are written.
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                let (a, b) = (*a, *b);
                if self.needs(a) {
                    let ga = self.ensure_grad(a);
                    for (d, &s) in ga.iter_mut().zip(g) {
                        *d += s;
                    }
                }
                if self.needs(b) {
                    let gb = self.ensure_grad(b);
                    for (d, &s) in gb.iter_mut().zip(g) {
                        *d += s;
                    }
                }
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                if self.needs(a) {
                    let other: Vec<f32> = self.nodes[b].data.clone();
                    let ga = self.ensure_grad(a);
                    for i in 0..g.len() {
                        ga[i] += g[i] * other[i];
                    }
                }
                if self.needs(b) {
                    let other: Vec<f32> = self.nodes[a].data.clone();
                    let gb = self.ensure_grad(b);
                    for i in 0..g.len() {
                        gb[i] += g[i] * other[i];
                    }
                }
            }
            Op::MulScalar { a, s } => {
                let (a, s) = (*a, *s);
                if self.needs(a) {
                    let ga = self.ensure_grad(a);
                    for i in 0..g.len() {
                        ga[i] += g[i] * s;
                    }
                }
            }
            Op::Relu { a } => {
                let a = *a;
                if self.needs(a) {
                    let x: Vec<f32> = self.nodes[a].data.clone();
                    let ga = self.ensure_grad(a);
                    for i in 0..g.len() {
                        if x[i] > 0.0 {
                            ga[i] += g[i];
                        }
                    }
                }
            }
            Op::Log { a } => {
                let a = *a;
                if self.needs(a) {
                    let x: Vec<f32> = self.nodes[a].data.clone();
                    let ga = self.ensure_grad(a);
                    for i in 0..g.len() {
                        ga[i] += g[i] / x[i];
                    }
                }
            }
            Op::Mean { a } => {
                let a = *a;
                if self.needs(a) {
                    let scale = g[0] / self.nodes[a].data.len() as f32;
                    let ga = self.ensure_grad(a);
                    for d in ga.iter_mut() {
                        *d += scale;
                    }
                }
            }
            Op::MatMul { a, b, m, k, n } => {
                let (a, b, m, k, n) = (*a, *b, *m, *k, *n);
                if self.needs(a) {
                    let bd = self.nodes[b].data.clone();
                    let ga = self.ensure_grad(a);
                    // dA[i,p] = sum_j g[i,j] * B[p,j]
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = 0.0f32;
                            for j in 0..n {
                                s += g[i * n + j] * bd[p * n + j];
                            }
                            ga[i * k + p] += s;
                        }
                    }
                }
                if self.needs(b) {
                    let ad = self.nodes[a].data.clone();
                    let gb = self.ensure_grad(b);
                    // dB[p,j] = sum_i A[i,p] * g[i,j]
                    for i in 0..m {
                        for p in 0..k {
                            let v = ad[i * k + p];
                            for j in 0..n {
                                gb[p * n + j] += v * g[i * n + j];
                            }
                        }
                    }
                }
            }
            Op::Transpose2d { a, rows, cols } => {
                let (a, r, c) = (*a, *rows, *cols);
                if self.needs(a) {
                    let ga = self.ensure_grad(a);
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::Reshape { a } => {
                let a = *a;
                if self.needs(a) {
                    let ga = self.ensure_grad(a);
                    for (d, &s) in ga.iter_mut().zip(g) {
                        *d += s;
                    }
                }
            }
            Op::Conv2d { input, kernel } => {
                let (input, kernel) = (*input, *kernel);
                let (h, w, cin) = {
                    let s = &self.nodes[input].shape;
                    (s[0], s[1], s[2])
                };
                let (kh, kw, cout) = {
                    let s = &self.nodes[kernel].shape;
                    (s[0], s[1], s[3])
                };
                if self.needs(input) {
                    let kd = self.nodes[kernel].data.clone();
                    let ga = self.ensure_grad(input);
                    conv2d_backward_input(&kd, h, w, cin, kh, kw, cout, g, ga);
                }
                if self.needs(kernel) {
                    let id = self.nodes[input].data.clone();
                    let gk = self.ensure_grad(kernel);
                    conv2d_backward_kernel(&id, h, w, cin, kh, kw, cout, g, gk);
                }
            }
            Op::BiasAdd { input, bias } => {
                let (input, bias) = (*input, *bias);
                if self.needs(input) {
                    let gi = self.ensure_grad(input);
                    for (d, &s) in gi.iter_mut().zip(g) {
                        *d += s;
                    }
                }
                if self.needs(bias) {
                    let c = self.nodes[bias].data.len();
                    let mut acc = vec![0.0f64; c];
                    for (i, &s) in g.iter().enumerate() {
                        acc[i % c] += s as f64;
                    }
                    let gb = self.ensure_grad(bias);
                    for (d, s) in gb.iter_mut().zip(acc) {
                        *d += s as f32;
                    }
                }
            }
            Op::ConcatChannels { a, b } => {
                let (a, b) = (*a, *b);
                let ca = self.nodes[a].shape[2];
                let cb = self.nodes[b].shape[2];
                let npx = self.nodes[a].shape[0] * self.nodes[a].shape[1];
                if self.needs(a) {
                    let ga = self.ensure_grad(a);
                    for px in 0..npx {
                        for ch in 0..ca {
                            ga[px * ca + ch] += g[px * (ca + cb) + ch];
                        }
                    }
                }
                if self.needs(b) {
                    let gb = self.ensure_grad(b);
                    for px in 0..npx {
                        for ch in 0..cb {
                            gb[px * cb + ch] += g[px * (ca + cb) + ca + ch];
                        }
                    }
                }
            }
            Op::SoftmaxChannels { a } => {
                let a = *a;
                if self.needs(a) {
                    let p = self.nodes[id].data.clone();
                    let n = self.nodes[id].shape[2];
                    let ga = self.ensure_grad(a);
                    for px in 0..p.len() / n {
                        let pr = &p[px * n..(px + 1) * n];
                        let gr = &g[px * n..(px + 1) * n];
                        let mut dot = 0.0f32;
                        for i in 0..n {
                            dot += gr[i] * pr[i];
                        }
                        for i in 0..n {
                            ga[px * n + i] += pr[i] * (gr[i] - dot);
                        }
                    }
                }
            }
            Op::Upsample2x { a } => {
                let a = *a;
                if self.needs(a) {
                    let (h, w, c) = {
                        let s = &self.nodes[a].shape;
                        (s[0], s[1], s[2])
                    };
                    let ga = self.ensure_grad(a);
                    for y in 0..h {
                        for x in 0..w {
                            let gb = (y * w + x) * c;
                            for ch in 0..c {
                                let mut s = 0.0f32;
                                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                                    s += g[((2 * y + dy) * 2 * w + 2 * x + dx) * c + ch];
                                }
                                ga[gb + ch] += s;
                            }
                        }
                    }
                }
            }
            Op::Downsample2xAvg { a } => {
                let a = *a;
                if self.needs(a) {
                    let (h, w, c) = {
                        let s = &self.nodes[a].shape;
                        (s[0], s[1], s[2])
                    };
                    let (oh, ow) = (h / 2, w / 2);
                    let ga = self.ensure_grad(a);
                    for y in 0..oh {
                        for x in 0..ow {
                            for ch in 0..c {
                                let s = g[(y * ow + x) * c + ch] * 0.25;
                                ga[((2 * y) * w + 2 * x) * c + ch] += s;
                                ga[((2 * y) * w + 2 * x + 1) * c + ch] += s;
                                ga[((2 * y + 1) * w + 2 * x) * c + ch] += s;
                                ga[((2 * y + 1) * w + 2 * x + 1) * c + ch] += s;
                            }
                        }
                    }
                }
            }
            Op::WeightedCe { logits, classes, weights, probs } => {
                let logits = *logits;
                if self.needs(logits) {
                    let n = self.nodes[logits].shape[2];
                    let npx = classes.len();
                    let classes = classes.clone();
                    let weights = weights.clone();
                    let probs = probs.clone();
                    let scale = g[0] / npx as f32;
                    let gl = self.ensure_grad(logits);
                    for px in 0..npx {
                        let wpx = weights[px] * scale;
                        for i in 0..n {
                            let one = if i == classes[px] as usize { 1.0 } else { 0.0 };
                            gl[px * n + i] += wpx * (probs[px * n + i] - one);
                        }
                    }
                }
            }
            Op::KlToReference { probs, reference } => {
                let probs = *probs;
                if self.needs(probs) {
                    let npx = self.nodes[probs].shape[0] * self.nodes[probs].shape[1];
                    let reference = reference.clone();
                    let p: Vec<f32> = self.nodes[probs].data.clone();
                    let scale = g[0] / npx as f32;
                    let gp = self.ensure_grad(probs);
                    for i in 0..p.len() {
                        if reference[i] > 0.0 {
                            gp[i] += scale * (-reference[i] / p[i].max(1e-12));
                        }
                    }
                }
            }
        }
    }
}

fn softmax_pixel(row: &[f32], out: &mut [f32]) {
    let mut mx = row[0];
    for &v in row {
        mx = mx.max(v);
    }
    let mut denom = 0.0f32;
    for (i, &v) in row.iter().enumerate() {
        let e = (v - mx).exp();
        out[i] = e;
        denom += e;
    }
    for o in out.iter_mut() {
        *o /= denom;
    }
}

fn matmul_forward(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let v = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += v * brow[j];
            }
        }
    }
}

fn conv2d_forward(
    input: &[f32],
    h: usize,
    w: usize,
    cin: usize,
    kernel: &[f32],
    kh: usize,
    kw: usize,
    cout: usize,
    out: &mut [f32],
) {
    let (ph, pw) = (kh / 2, kw / 2);
    let mut acc = vec![0.0f32; cout];
    for y in 0..h {
        for x in 0..w {
            acc.fill(0.0);
            for dy in 0..kh {
                let iy = y + dy;
                if iy < ph || iy - ph >= h {
                    continue;
                }
                let iy = iy - ph;
                for dx in 0..kw {
                    let ix = x + dx;
                    if ix < pw || ix - pw >= w {
                        continue;
                    }
                    let ix = ix - pw;
                    let ibase = (iy * w + ix) * cin;
                    let kbase = (dy * kw + dx) * cin * cout;
                    for ci in 0..cin {
                        let v = input[ibase + ci];
                        let krow = &kernel[kbase + ci * cout..kbase + (ci + 1) * cout];
                        for (a, &kv) in acc.iter_mut().zip(krow) {
                            *a += v * kv;
                        }
                    }
                }
            }
            let ob = (y * w + x) * cout;
            out[ob..ob + cout].copy_from_slice(&acc);
        }
    }
}

fn conv2d_backward_input(
    kernel: &[f32],
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    cout: usize,
    gout: &[f32],
    ginput: &mut [f32],
) {
    let (ph, pw) = (kh / 2, kw / 2);
    // Transposed kernel [kh,kw,cout,cin] so the inner axpy runs over cin.
    let mut kt = vec![0.0f32; kernel.len()];
    for dy in 0..kh {
        for dx in 0..kw {
            let base = (dy * kw + dx) * cin * cout;
            for ci in 0..cin {
                for co in 0..cout {
                    kt[base + co * cin + ci] = kernel[base + ci * cout + co];
                }
            }
        }
    }
    for y in 0..h {
        for x in 0..w {
            let gb = (y * w + x) * cout;
            for dy in 0..kh {
                let iy = y + dy;
                if iy < ph || iy - ph >= h {
                    continue;
                }
                let iy = iy - ph;
                for dx in 0..kw {
                    let ix = x + dx;
                    if ix < pw || ix - pw >= w {
                        continue;
                    }
                    let ix = ix - pw;
                    let ibase = (iy * w + ix) * cin;
                    let kbase = (dy * kw + dx) * cin * cout;
                    for co in 0..cout {
                        let gv = gout[gb + co];
                        let krow = &kt[kbase + co * cin..kbase + (co + 1) * cin];
                        let gin = &mut ginput[ibase..ibase + cin];
                        for (d, &kv) in gin.iter_mut().zip(krow) {
                            *d += gv * kv;
                        }
                    }
                }
            }
        }
    }
}

fn conv2d_backward_kernel(
    input: &[f32],
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    cout: usize,
    gout: &[f32],
    gkernel: &mut [f32],
) {
    let (ph, pw) = (kh / 2, kw / 2);
    for y in 0..h {
        for x in 0..w {
            let gb = (y * w + x) * cout;
            let grow = &gout[gb..gb + cout];
            for dy in 0..kh {
                let iy = y + dy;
                if iy < ph || iy - ph >= h {
                    continue;
                }
                let iy = iy - ph;
                for dx in 0..kw {
                    let ix = x + dx;
                    if ix < pw || ix - pw >= w {
                        continue;
                    }
                    let ix = ix - pw;
                    let ibase = (iy * w + ix) * cin;
                    let kbase = (dy * kw + dx) * cin * cout;
                    for ci in 0..cin {
                        let v = input[ibase + ci];
                        let krow = &mut gkernel[kbase + ci * cout..kbase + (ci + 1) * cout];
                        for (d, &gv) in krow.iter_mut().zip(grow) {
                            *d += v * gv;
                        }
                    }
                }
            }
        }
    }
}
