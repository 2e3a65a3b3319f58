//! The two-stream network: a two-layer ReLU embedding per stream, a first
//! and an adversarial 1-D convolutional T-CAM head per stream, and the
//! class-weighted fusion of the resulting T-CAMs.
//!
//! Every forward function has a matching backward pass that accumulates
//! parameter gradients into a zero-initialised [`Network`] of the same
//! shape.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::data::{FeatureSequence, VideoSample};
use crate::error::{Error, Result};
use crate::numkit::{topk_indices, Tensor2};

/// N_c×l class activation sequence.
pub type Tcam = Tensor2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stream {
    Rgb,
    Flow,
}

impl Stream {
    pub const ALL: [Stream; 2] = [Stream::Rgb, Stream::Flow];

    pub fn name(self) -> &'static str {
        match self {
            Stream::Rgb => "rgb",
            Stream::Flow => "flow",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Branch {
    First,
    Adversarial,
}

impl Branch {
    pub const ALL: [Branch; 2] = [Branch::First, Branch::Adversarial];

    pub fn name(self) -> &'static str {
        match self {
            Branch::First => "first",
            Branch::Adversarial => "adversarial",
        }
    }
}

/// Shape of the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub input_dim: usize,
    pub embed_dim: usize,
    pub num_classes: usize,
    pub kernel_size: usize,
}

/// Switches that change the computation graph rather than its weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Architecture {
    /// Whether the adversarial branches exist at all.
    pub adversarial: bool,
    /// Erasing ratio `s_a`: `floor(l / s_a)` salient steps are zeroed.
    pub erase_ratio: f64,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            adversarial: true,
            erase_ratio: 40.0,
        }
    }
}

fn matmul_cols(w: &Tensor2, b: &[f64], x: &Tensor2) -> Tensor2 {
    let (out_dim, in_dim) = w.shape();
    let l = x.cols();
    let mut z = Tensor2::zeros(out_dim, l);
    for (o, &bias) in b.iter().enumerate().take(out_dim) {
        let wrow = w.row(o);
        let zrow = z.row_mut(o);
        zrow.iter_mut().for_each(|v| *v = bias);
        for (i, &wi) in wrow.iter().enumerate().take(in_dim) {
            if wi == 0.0 {
                continue;
            }
            for (zv, &xv) in zrow.iter_mut().zip(x.row(i)) {
                *zv += wi * xv;
            }
        }
    }
    z
}

fn relu(z: &Tensor2) -> Tensor2 {
    let mut out = z.clone();
    out.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
    out
}

/// Two fully connected layers with ReLU, applied column-wise.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub w1: Tensor2,
    pub b1: Vec<f64>,
    pub w2: Tensor2,
    pub b2: Vec<f64>,
}

/// Intermediate activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct EmbedCache {
    pub pre_hidden: Tensor2,
    pub hidden: Tensor2,
    pub pre_out: Tensor2,
    pub out: Tensor2,
}

impl Embedding {
    pub fn zeros(input_dim: usize, embed_dim: usize) -> Self {
        Self {
            w1: Tensor2::zeros(embed_dim, input_dim),
            b1: vec![0.0; embed_dim],
            w2: Tensor2::zeros(embed_dim, embed_dim),
            b2: vec![0.0; embed_dim],
        }
    }

    fn init(rng: &mut ChaCha8Rng, input_dim: usize, embed_dim: usize) -> Self {
        let mut e = Self::zeros(input_dim, embed_dim);
        uniform_fill(rng, e.w1.as_mut_slice(), input_dim);
        uniform_fill(rng, e.w2.as_mut_slice(), embed_dim);
        e
    }

    pub fn input_dim(&self) -> usize {
        self.w1.cols()
    }

    pub fn embed_dim(&self) -> usize {
        self.w1.rows()
    }

    pub fn forward(&self, x: &FeatureSequence) -> Result<EmbedCache> {
        if x.rows() != self.input_dim() {
            return Err(Error::shape("embed", self.input_dim(), x.rows()));
        }
        let pre_hidden = matmul_cols(&self.w1, &self.b1, x);
        let hidden = relu(&pre_hidden);
        let pre_out = matmul_cols(&self.w2, &self.b2, &hidden);
        let out = relu(&pre_out);
        Ok(EmbedCache {
            pre_hidden,
            hidden,
            pre_out,
            out,
        })
    }

    /// Accumulates parameter gradients given `d_out = dL/d(out)`.
    pub fn backward(&self, x: &FeatureSequence, cache: &EmbedCache, d_out: &Tensor2, grad: &mut Embedding) {
        let e = self.embed_dim();
        let l = x.cols();
        let mut d_pre_out = d_out.clone();
        for (g, &z) in d_pre_out.as_mut_slice().iter_mut().zip(cache.pre_out.as_slice()) {
            if z <= 0.0 {
                *g = 0.0;
            }
        }
        let mut d_hidden = Tensor2::zeros(e, l);
        for o in 0..e {
            let drow = d_pre_out.row(o);
            grad.b2[o] += drow.iter().sum::<f64>();
            for i in 0..e {
                let hrow = cache.hidden.row(i);
                grad.w2.add_at(o, i, drow.iter().zip(hrow).map(|(a, b)| a * b).sum());
                let w = self.w2.get(o, i);
                if w != 0.0 {
                    for (dh, &dv) in d_hidden.row_mut(i).iter_mut().zip(drow) {
                        *dh += w * dv;
                    }
                }
            }
        }
        for (g, &z) in d_hidden.as_mut_slice().iter_mut().zip(cache.pre_hidden.as_slice()) {
            if z <= 0.0 {
                *g = 0.0;
            }
        }
        for o in 0..e {
            let drow = d_hidden.row(o);
            grad.b1[o] += drow.iter().sum::<f64>();
            for i in 0..x.rows() {
                grad.w1
                    .add_at(o, i, drow.iter().zip(x.row(i)).map(|(a, b)| a * b).sum());
            }
        }
    }
}

/// Column-wise `ReLU(W2·ReLU(W1·x_t + b1) + b2)`.
pub fn embed(x: &FeatureSequence, p: &Embedding) -> Result<Tensor2> {
    Ok(p.forward(x)?.out)
}

/// 1-D convolution over time producing one score row per class.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvHead {
    pub num_classes: usize,
    pub width: usize,
    pub kernel_size: usize,
    /// Flattened `[class][channel][tap]`.
    pub kernel: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvHead {
    pub fn zeros(num_classes: usize, width: usize, kernel_size: usize) -> Self {
        Self {
            num_classes,
            width,
            kernel_size,
            kernel: vec![0.0; num_classes * width * kernel_size],
            bias: vec![0.0; num_classes],
        }
    }

    fn init(rng: &mut ChaCha8Rng, num_classes: usize, width: usize, kernel_size: usize) -> Self {
        let mut h = Self::zeros(num_classes, width, kernel_size);
        uniform_fill(rng, &mut h.kernel, width * kernel_size);
        h
    }

    #[inline]
    fn tap(&self, j: usize, e: usize, q: usize) -> f64 {
        self.kernel[(j * self.width + e) * self.kernel_size + q]
    }

    fn check(&self, xe: &Tensor2) -> Result<()> {
        if xe.rows() != self.width {
            return Err(Error::shape("tcam", self.width, xe.rows()));
        }
        if self.kernel_size.is_multiple_of(2) {
            return Err(Error::invalid("conv kernel size must be odd"));
        }
        Ok(())
    }

    /// Score row of class `j`; columns flagged in `erased` read as zero.
    pub fn forward_row(&self, xe: &Tensor2, j: usize, erased: Option<&[bool]>) -> Vec<f64> {
        let l = xe.cols();
        let pad = self.kernel_size / 2;
        let mut row = vec![self.bias[j]; l];
        for e in 0..self.width {
            let xrow = xe.row(e);
            for q in 0..self.kernel_size {
                let w = self.tap(j, e, q);
                if w == 0.0 {
                    continue;
                }
                for (t, out) in row.iter_mut().enumerate() {
                    let src = t + q;
                    if src < pad || src - pad >= l {
                        continue;
                    }
                    let s = src - pad;
                    if erased.is_some_and(|m| m[s]) {
                        continue;
                    }
                    *out += w * xrow[s];
                }
            }
        }
        row
    }

    /// Backward of [`ConvHead::forward_row`]: accumulates kernel/bias
    /// gradients and, when given, the gradient with respect to `xe`.
    pub fn backward_row(
        &self,
        xe: &Tensor2,
        j: usize,
        erased: Option<&[bool]>,
        d_row: &[f64],
        grad: &mut ConvHead,
        mut d_xe: Option<&mut Tensor2>,
    ) {
        let l = xe.cols();
        let pad = self.kernel_size / 2;
        grad.bias[j] += d_row.iter().sum::<f64>();
        for e in 0..self.width {
            let xrow = xe.row(e);
            for q in 0..self.kernel_size {
                let idx = (j * self.width + e) * self.kernel_size + q;
                let w = self.kernel[idx];
                let mut acc = 0.0;
                for (t, &d) in d_row.iter().enumerate() {
                    let src = t + q;
                    if src < pad || src - pad >= l {
                        continue;
                    }
                    let s = src - pad;
                    if erased.is_some_and(|m| m[s]) {
                        continue;
                    }
                    acc += d * xrow[s];
                    if let Some(dx) = d_xe.as_deref_mut() {
                        dx.add_at(e, s, d * w);
                    }
                }
                grad.kernel[idx] += acc;
            }
        }
    }

    pub fn forward(&self, xe: &Tensor2) -> Result<Tcam> {
        self.check(xe)?;
        let mut out = Tensor2::zeros(self.num_classes, xe.cols());
        for j in 0..self.num_classes {
            out.row_mut(j).copy_from_slice(&self.forward_row(xe, j, None));
        }
        Ok(out)
    }

    pub fn backward(&self, xe: &Tensor2, d_c: &Tensor2, grad: &mut ConvHead, d_xe: &mut Tensor2) {
        for j in 0..self.num_classes {
            self.backward_row(xe, j, None, d_c.row(j), grad, Some(d_xe));
        }
    }
}

/// T-CAM of one branch: zero-padded cross-correlation plus class bias.
pub fn tcam(xe: &Tensor2, head: &ConvHead) -> Result<Tcam> {
    head.forward(xe)
}

/// `floor(l / s_a)`.
pub fn erase_count(len: usize, erase_ratio: f64) -> usize {
    (len as f64 / erase_ratio).floor() as usize
}

/// Time steps erased for one class: the `floor(l/s_a)` highest first-branch
/// scores, lower time index first on ties. Returned as a per-step flag.
pub fn salient_steps(row: &[f64], erase_ratio: f64) -> Vec<bool> {
    let k = erase_count(row.len(), erase_ratio).min(row.len());
    let mut flags = vec![false; row.len()];
    for t in topk_indices(row, k) {
        flags[t] = true;
    }
    flags
}

/// Copy of `xe` with the most salient columns of class `j` zeroed.
pub fn adversarial_mask(xe: &Tensor2, c_first: &Tcam, j: usize, erase_ratio: f64) -> Result<Tensor2> {
    if c_first.cols() != xe.cols() {
        return Err(Error::shape("adversarial_mask", xe.cols(), c_first.cols()));
    }
    if erase_ratio < 1.0 {
        return Err(Error::invalid("erasing ratio s_a must be >= 1"));
    }
    let flags = salient_steps(c_first.row(j), erase_ratio);
    let mut out = xe.clone();
    for (t, &erase) in flags.iter().enumerate() {
        if erase {
            (0..out.rows()).for_each(|e| out.set(e, t, 0.0));
        }
    }
    Ok(out)
}

/// Adversarial T-CAM plus the erased-step flags used for each class.
#[derive(Debug, Clone)]
pub struct AdversarialTcam {
    pub tcam: Tcam,
    pub erased: Vec<Vec<bool>>,
}

/// Row `j` is the adversarial head applied to features whose class-`j`
/// salient steps were erased.
pub fn adversarial_tcam(xe: &Tensor2, c_first: &Tcam, head: &ConvHead, erase_ratio: f64) -> Result<AdversarialTcam> {
    head.check(xe)?;
    if c_first.shape() != (head.num_classes, xe.cols()) {
        return Err(Error::shape(
            "adversarial_tcam",
            format!("{}x{}", head.num_classes, xe.cols()),
            format!("{}x{}", c_first.rows(), c_first.cols()),
        ));
    }
    if erase_ratio < 1.0 {
        return Err(Error::invalid("erasing ratio s_a must be >= 1"));
    }
    let mut tcam = Tensor2::zeros(head.num_classes, xe.cols());
    let mut erased = Vec::with_capacity(head.num_classes);
    for j in 0..head.num_classes {
        let flags = salient_steps(c_first.row(j), erase_ratio);
        tcam.row_mut(j)
            .copy_from_slice(&head.forward_row(xe, j, Some(&flags)));
        erased.push(flags);
    }
    Ok(AdversarialTcam { tcam, erased })
}

/// Learned class weights of the final T-CAM.
#[derive(Debug, Clone, PartialEq)]
pub struct Fusion {
    pub w_rgb: Vec<f64>,
    pub w_flow: Vec<f64>,
    /// Weight `omega` of the adversarial T-CAMs; not learned.
    pub omega: f64,
}

impl Fusion {
    pub fn new(num_classes: usize, omega: f64) -> Self {
        Self {
            w_rgb: vec![1.0; num_classes],
            w_flow: vec![1.0; num_classes],
            omega,
        }
    }
}

fn check_same(context: &'static str, a: &Tcam, b: &Tcam) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            context,
            format!("{}x{}", a.rows(), a.cols()),
            format!("{}x{}", b.rows(), b.cols()),
        ));
    }
    Ok(())
}

/// Final T-CAM `w_r·(C_r + ω·C_ra) + w_o·(C_o + ω·C_oa)`. Missing
/// adversarial T-CAMs contribute nothing.
pub fn fuse_opt(c_r: &Tcam, c_ra: Option<&Tcam>, c_o: &Tcam, c_oa: Option<&Tcam>, fp: &Fusion) -> Result<Tcam> {
    check_same("fuse", c_r, c_o)?;
    for c in [c_ra, c_oa].into_iter().flatten() {
        check_same("fuse", c_r, c)?;
    }
    if fp.w_rgb.len() != c_r.rows() || fp.w_flow.len() != c_r.rows() {
        return Err(Error::shape("fuse weights", c_r.rows(), fp.w_rgb.len()));
    }
    let mut out = Tensor2::zeros(c_r.rows(), c_r.cols());
    for j in 0..c_r.rows() {
        for t in 0..c_r.cols() {
            let r = c_r.get(j, t) + c_ra.map_or(0.0, |c| fp.omega * c.get(j, t));
            let o = c_o.get(j, t) + c_oa.map_or(0.0, |c| fp.omega * c.get(j, t));
            out.set(j, t, fp.w_rgb[j] * r + fp.w_flow[j] * o);
        }
    }
    Ok(out)
}

pub fn fuse(c_r: &Tcam, c_ra: &Tcam, c_o: &Tcam, c_oa: &Tcam, fp: &Fusion) -> Result<Tcam> {
    fuse_opt(c_r, Some(c_ra), c_o, Some(c_oa), fp)
}

/// Gradients of the fused T-CAM with respect to its four inputs.
#[derive(Debug, Clone)]
pub struct FuseGrads {
    pub d_r: Tensor2,
    pub d_ra: Option<Tensor2>,
    pub d_o: Tensor2,
    pub d_oa: Option<Tensor2>,
}

/// Backward of [`fuse_opt`]; accumulates weight gradients into `grad`.
pub fn fuse_backward(
    c_r: &Tcam,
    c_ra: Option<&Tcam>,
    c_o: &Tcam,
    c_oa: Option<&Tcam>,
    fp: &Fusion,
    d_final: &Tensor2,
    grad: &mut Fusion,
) -> FuseGrads {
    let (n, l) = c_r.shape();
    let mut g = FuseGrads {
        d_r: Tensor2::zeros(n, l),
        d_ra: c_ra.map(|_| Tensor2::zeros(n, l)),
        d_o: Tensor2::zeros(n, l),
        d_oa: c_oa.map(|_| Tensor2::zeros(n, l)),
    };
    for j in 0..n {
        for t in 0..l {
            let d = d_final.get(j, t);
            let r = c_r.get(j, t) + c_ra.map_or(0.0, |c| fp.omega * c.get(j, t));
            let o = c_o.get(j, t) + c_oa.map_or(0.0, |c| fp.omega * c.get(j, t));
            grad.w_rgb[j] += d * r;
            grad.w_flow[j] += d * o;
            g.d_r.set(j, t, d * fp.w_rgb[j]);
            g.d_o.set(j, t, d * fp.w_flow[j]);
            if let Some(m) = g.d_ra.as_mut() {
                m.set(j, t, d * fp.w_rgb[j] * fp.omega);
            }
            if let Some(m) = g.d_oa.as_mut() {
                m.set(j, t, d * fp.w_flow[j] * fp.omega);
            }
        }
    }
    g
}

/// Parameters of one stream.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamParams {
    pub embedding: Embedding,
    pub first: ConvHead,
    pub adversarial: ConvHead,
}

impl StreamParams {
    pub fn head(&self, branch: Branch) -> &ConvHead {
        match branch {
            Branch::First => &self.first,
            Branch::Adversarial => &self.adversarial,
        }
    }
}

/// Complete set of learnable network parameters (centers live elsewhere).
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub rgb: StreamParams,
    pub flow: StreamParams,
    pub fusion: Fusion,
    pub arch: Architecture,
}

/// Mutable view of one parameter tensor.
pub struct ParamView<'a> {
    pub name: String,
    pub values: &'a mut [f64],
    /// Whether decoupled weight decay applies.
    pub decay: bool,
}

fn uniform_fill(rng: &mut ChaCha8Rng, values: &mut [f64], fan_in: usize) {
    let bound = 1.0 / (fan_in as f64).sqrt();
    values
        .iter_mut()
        .for_each(|v| *v = rng.random_range(-bound..bound));
}

/// Forward activations of one stream.
#[derive(Debug, Clone)]
pub struct StreamForward {
    pub embed: EmbedCache,
    pub first: Tcam,
    pub adversarial: Option<AdversarialTcam>,
}

impl StreamForward {
    pub fn features(&self) -> &Tensor2 {
        &self.embed.out
    }

    pub fn tcam(&self, branch: Branch) -> Option<&Tcam> {
        match branch {
            Branch::First => Some(&self.first),
            Branch::Adversarial => self.adversarial.as_ref().map(|a| &a.tcam),
        }
    }
}

#[derive(Debug, Clone)]
pub struct VideoForward {
    pub rgb: StreamForward,
    pub flow: StreamForward,
    pub fused: Tcam,
}

impl VideoForward {
    pub fn stream(&self, s: Stream) -> &StreamForward {
        match s {
            Stream::Rgb => &self.rgb,
            Stream::Flow => &self.flow,
        }
    }
}

/// Upstream gradients reaching one stream.
#[derive(Debug, Clone)]
pub struct StreamGrads {
    pub d_features: Tensor2,
    pub d_first: Tensor2,
    pub d_adversarial: Option<Tensor2>,
}

impl StreamGrads {
    pub fn zeros(width: usize, classes: usize, len: usize, adversarial: bool) -> Self {
        Self {
            d_features: Tensor2::zeros(width, len),
            d_first: Tensor2::zeros(classes, len),
            d_adversarial: adversarial.then(|| Tensor2::zeros(classes, len)),
        }
    }
}

impl Network {
    /// Uniform(±1/√fan_in) weights, zero biases, unit fusion weights.
    pub fn init(rng: &mut ChaCha8Rng, dims: Dims, arch: Architecture, omega: f64) -> Self {
        let mut stream = || StreamParams {
            embedding: Embedding::init(rng, dims.input_dim, dims.embed_dim),
            first: ConvHead::init(rng, dims.num_classes, dims.embed_dim, dims.kernel_size),
            adversarial: ConvHead::init(rng, dims.num_classes, dims.embed_dim, dims.kernel_size),
        };
        let rgb = stream();
        let flow = stream();
        Self {
            rgb,
            flow,
            fusion: Fusion::new(dims.num_classes, omega),
            arch,
        }
    }

    /// Same shapes, every learnable entry zero (gradient accumulator).
    pub fn zeros_like(&self) -> Self {
        let d = self.dims();
        let stream = || StreamParams {
            embedding: Embedding::zeros(d.input_dim, d.embed_dim),
            first: ConvHead::zeros(d.num_classes, d.embed_dim, d.kernel_size),
            adversarial: ConvHead::zeros(d.num_classes, d.embed_dim, d.kernel_size),
        };
        Self {
            rgb: stream(),
            flow: stream(),
            fusion: Fusion {
                w_rgb: vec![0.0; d.num_classes],
                w_flow: vec![0.0; d.num_classes],
                omega: self.fusion.omega,
            },
            arch: self.arch,
        }
    }

    pub fn dims(&self) -> Dims {
        Dims {
            input_dim: self.rgb.embedding.input_dim(),
            embed_dim: self.rgb.embedding.embed_dim(),
            num_classes: self.rgb.first.num_classes,
            kernel_size: self.rgb.first.kernel_size,
        }
    }

    pub fn stream(&self, s: Stream) -> &StreamParams {
        match s {
            Stream::Rgb => &self.rgb,
            Stream::Flow => &self.flow,
        }
    }

    pub fn stream_mut(&mut self, s: Stream) -> &mut StreamParams {
        match s {
            Stream::Rgb => &mut self.rgb,
            Stream::Flow => &mut self.flow,
        }
    }

    /// Every learnable tensor in a fixed order.
    pub fn params_mut(&mut self) -> Vec<ParamView<'_>> {
        let mut out = Vec::new();
        for (name, sp) in [("rgb", &mut self.rgb), ("flow", &mut self.flow)] {
            let StreamParams {
                embedding,
                first,
                adversarial,
            } = sp;
            out.push(ParamView {
                name: format!("embed.{name}.w1"),
                values: embedding.w1.as_mut_slice(),
                decay: true,
            });
            out.push(ParamView {
                name: format!("embed.{name}.b1"),
                values: &mut embedding.b1,
                decay: false,
            });
            out.push(ParamView {
                name: format!("embed.{name}.w2"),
                values: embedding.w2.as_mut_slice(),
                decay: true,
            });
            out.push(ParamView {
                name: format!("embed.{name}.b2"),
                values: &mut embedding.b2,
                decay: false,
            });
            for (branch, head) in [("first", first), ("adversarial", adversarial)] {
                out.push(ParamView {
                    name: format!("head.{name}.{branch}.kernel"),
                    values: &mut head.kernel,
                    decay: true,
                });
                out.push(ParamView {
                    name: format!("head.{name}.{branch}.bias"),
                    values: &mut head.bias,
                    decay: false,
                });
            }
        }
        out.push(ParamView {
            name: "fusion.w_rgb".into(),
            values: &mut self.fusion.w_rgb,
            decay: false,
        });
        out.push(ParamView {
            name: "fusion.w_flow".into(),
            values: &mut self.fusion.w_flow,
            decay: false,
        });
        out
    }

    /// Flattened copy of all learnable values, in `params_mut` order.
    pub fn flat(&self) -> Vec<f64> {
        let mut c = self.clone();
        c.params_mut()
            .into_iter()
            .flat_map(|p| p.values.to_vec())
            .collect()
    }

    fn stream_forward(&self, s: Stream, x: &FeatureSequence) -> Result<StreamForward> {
        let p = self.stream(s);
        let embed = p.embedding.forward(x)?;
        let first = p.first.forward(&embed.out)?;
        let adversarial = if self.arch.adversarial {
            Some(adversarial_tcam(
                &embed.out,
                &first,
                &p.adversarial,
                self.arch.erase_ratio,
            )?)
        } else {
            None
        };
        Ok(StreamForward {
            embed,
            first,
            adversarial,
        })
    }

    pub fn forward(&self, sample: &VideoSample) -> Result<VideoForward> {
        let rgb = self.stream_forward(Stream::Rgb, &sample.rgb)?;
        let flow = self.stream_forward(Stream::Flow, &sample.flow)?;
        let fused = fuse_opt(
            &rgb.first,
            rgb.tcam(Branch::Adversarial),
            &flow.first,
            flow.tcam(Branch::Adversarial),
            &self.fusion,
        )?;
        Ok(VideoForward { rgb, flow, fused })
    }

    fn stream_backward(
        &self,
        s: Stream,
        x: &FeatureSequence,
        fwd: &StreamForward,
        mut up: StreamGrads,
        grad: &mut StreamParams,
    ) {
        let p = self.stream(s);
        let xe = fwd.features();
        if let (Some(adv), Some(d_adv)) = (&fwd.adversarial, &up.d_adversarial) {
            for j in 0..p.adversarial.num_classes {
                p.adversarial.backward_row(
                    xe,
                    j,
                    Some(&adv.erased[j]),
                    d_adv.row(j),
                    &mut grad.adversarial,
                    Some(&mut up.d_features),
                );
            }
        }
        p.first
            .backward(xe, &up.d_first, &mut grad.first, &mut up.d_features);
        p.embedding
            .backward(x, &fwd.embed, &up.d_features, &mut grad.embedding);
    }

    /// Back-propagates upstream gradients (loss terms on features and
    /// branch T-CAMs plus the fused T-CAM) into `grad`.
    pub fn backward(
        &self,
        sample: &VideoSample,
        fwd: &VideoForward,
        mut d_rgb: StreamGrads,
        mut d_flow: StreamGrads,
        d_fused: &Tensor2,
        grad: &mut Network,
    ) {
        let fg = fuse_backward(
            &fwd.rgb.first,
            fwd.rgb.tcam(Branch::Adversarial),
            &fwd.flow.first,
            fwd.flow.tcam(Branch::Adversarial),
            &self.fusion,
            d_fused,
            &mut grad.fusion,
        );
        d_rgb.d_first.axpy(1.0, &fg.d_r);
        d_flow.d_first.axpy(1.0, &fg.d_o);
        if let (Some(a), Some(b)) = (d_rgb.d_adversarial.as_mut(), fg.d_ra.as_ref()) {
            a.axpy(1.0, b);
        }
        if let (Some(a), Some(b)) = (d_flow.d_adversarial.as_mut(), fg.d_oa.as_ref()) {
            a.axpy(1.0, b);
        }
        self.stream_backward(Stream::Rgb, &sample.rgb, &fwd.rgb, d_rgb, &mut grad.rgb);
        self.stream_backward(Stream::Flow, &sample.flow, &fwd.flow, d_flow, &mut grad.flow);
    }

    /// Adds `scale * other` to every learnable entry.
    pub fn axpy(&mut self, scale: f64, other: &Network) {
        let mut other = other.clone();
        for (a, b) in self.params_mut().into_iter().zip(other.params_mut()) {
            a.values
                .iter_mut()
                .zip(b.values.iter())
                .for_each(|(x, y)| *x += scale * y);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for p in self.params_mut() {
            p.values.iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn sq_norm(&self) -> f64 {
        self.flat().iter().map(|v| v * v).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::fd_grad_check;
    use rand::SeedableRng;

    fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor2 {
        Tensor2::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    fn dims(k: usize) -> Dims {
        Dims {
            input_dim: 5,
            embed_dim: 4,
            num_classes: 3,
            kernel_size: k,
        }
    }

    #[test]
    fn embed_zero_and_identity() {
        let x = Tensor2::zeros(3, 4);
        assert_eq!(embed(&x, &Embedding::zeros(3, 3)).unwrap(), x);
        let mut id = Embedding::zeros(3, 3);
        for i in 0..3 {
            id.w1.set(i, i, 1.0);
            id.w2.set(i, i, 1.0);
        }
        let x = Tensor2::from_fn(3, 4, |r, c| (r + 2 * c) as f64);
        assert_eq!(embed(&x, &id).unwrap(), x);
        assert!(embed(&Tensor2::zeros(2, 4), &id).is_err());
    }

    #[test]
    fn embed_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&mut rng, 5, 6);
        let mut e = Embedding::init(&mut rng, 5, 4);
        // off-kink biases: with zero biases a dead hidden column sits exactly on a ReLU kink
        e.b1.iter_mut().chain(e.b2.iter_mut()).for_each(|b| *b = rng.random_range(-0.2..0.2));
        let probe = rand_tensor(&mut rng, 4, 6);
        let loss = |e: &Embedding| -> f64 {
            let out = embed(&x, e).unwrap();
            out.as_slice().iter().zip(probe.as_slice()).map(|(a, b)| a * b).sum()
        };
        let cache = e.forward(&x).unwrap();
        let mut grad = Embedding::zeros(5, 4);
        e.backward(&x, &cache, &probe, &mut grad);
        let w1 = e.w1.as_slice().to_vec();
        let check = fd_grad_check(
            |w| {
                let mut e2 = e.clone();
                e2.w1.as_mut_slice().copy_from_slice(w);
                loss(&e2)
            },
            &w1,
            1e-6,
            grad.w1.as_slice(),
        )
        .unwrap();
        assert!(check.max_rel_error < 1e-4, "{check:?}");
        let check = fd_grad_check(
            |b| {
                let mut e2 = e.clone();
                e2.b2.copy_from_slice(b);
                loss(&e2)
            },
            &e.b2,
            1e-6,
            &grad.b2,
        )
        .unwrap();
        assert!(check.max_rel_error < 1e-4, "{check:?}");
    }

    #[test]
    fn unit_kernel_is_pointwise_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let head = ConvHead::init(&mut rng, 3, 4, 1);
        let mut head = head;
        head.bias = vec![0.5, -0.25, 1.0];
        let xe = rand_tensor(&mut rng, 4, 7);
        let c = tcam(&xe, &head).unwrap();
        for j in 0..3 {
            for t in 0..7 {
                let expect: f64 = head.bias[j] + (0..4).map(|e| head.tap(j, e, 0) * xe.get(e, t)).sum::<f64>();
                assert!((c.get(j, t) - expect).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn wide_kernel_zero_pads_edges() {
        let mut head = ConvHead::zeros(1, 1, 3);
        head.kernel = vec![1.0, 2.0, 3.0];
        let xe = Tensor2::from_rows(&[vec![1.0; 5]]).unwrap();
        let c = tcam(&xe, &head).unwrap();
        assert_eq!(c.row(0), &[5.0, 6.0, 6.0, 6.0, 3.0]);
        let even = ConvHead::zeros(1, 1, 2);
        assert!(tcam(&xe, &even).is_err());
    }

    #[test]
    fn conv_kernel_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let head = ConvHead::init(&mut rng, 3, 4, 3);
        let xe = rand_tensor(&mut rng, 4, 6);
        let mut grad = ConvHead::zeros(3, 4, 3);
        let mut d_xe = Tensor2::zeros(4, 6);
        head.backward(&xe, &Tensor2::from_fn(3, 6, |_, _| 1.0), &mut grad, &mut d_xe);
        let check = fd_grad_check(
            |k| {
                let mut h = head.clone();
                h.kernel.copy_from_slice(k);
                tcam(&xe, &h).unwrap().as_slice().iter().sum()
            },
            &head.kernel,
            1e-6,
            &grad.kernel,
        )
        .unwrap();
        assert!(check.max_rel_error < 1e-4, "{check:?}");
        let check = fd_grad_check(
            |x| {
                let xt = Tensor2::new(4, 6, x.to_vec()).unwrap();
                tcam(&xt, &head).unwrap().as_slice().iter().sum()
            },
            xe.as_slice(),
            1e-6,
            d_xe.as_slice(),
        )
        .unwrap();
        assert!(check.max_rel_error < 1e-4, "{check:?}");
    }

    #[test]
    fn mask_examples() {
        let xe = Tensor2::from_fn(2, 4, |e, t| (e * 4 + t + 1) as f64);
        let c = Tensor2::from_rows(&[vec![5.0, 1.0, 4.0, 2.0]]).unwrap();
        let m = adversarial_mask(&xe, &c, 0, 2.0).unwrap();
        assert_eq!(m.col(0), vec![0.0, 0.0]);
        assert_eq!(m.col(1), xe.col(1));
        assert_eq!(m.col(2), vec![0.0, 0.0]);
        assert_eq!(m.col(3), xe.col(3));

        let xe5 = Tensor2::from_fn(2, 5, |e, t| (e + t) as f64);
        let c5 = Tensor2::from_rows(&[vec![1.0, 9.0, 2.0, 3.0, 4.0]]).unwrap();
        assert_eq!(adversarial_mask(&xe5, &c5, 0, 40.0).unwrap(), xe5);

        let flat = Tensor2::from_rows(&[vec![0.5; 5]]).unwrap();
        assert_eq!(salient_steps(flat.row(0), 2.0), vec![true, true, false, false, false]);
        assert!(adversarial_mask(&xe5, &c5, 0, 0.5).is_err());
    }

    #[test]
    fn adversarial_without_erasing_is_plain_tcam() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let head = ConvHead::init(&mut rng, 3, 4, 3);
        let xe = rand_tensor(&mut rng, 4, 6);
        let c_first = rand_tensor(&mut rng, 3, 6);
        let adv = adversarial_tcam(&xe, &c_first, &head, 40.0).unwrap();
        assert_eq!(adv.tcam, tcam(&xe, &head).unwrap());
    }

    #[test]
    fn adversarial_row_uses_class_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let head = ConvHead::init(&mut rng, 3, 4, 1);
        let xe = rand_tensor(&mut rng, 4, 8);
        let c_first = rand_tensor(&mut rng, 3, 8);
        let adv = adversarial_tcam(&xe, &c_first, &head, 4.0).unwrap();
        for j in 0..3 {
            let masked = adversarial_mask(&xe, &c_first, j, 4.0).unwrap();
            let full = tcam(&masked, &head).unwrap();
            assert_eq!(adv.tcam.row(j), full.row(j));
        }
    }

    #[test]
    fn adversarial_kernel_gradient_at_fixed_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let head = ConvHead::init(&mut rng, 3, 4, 3);
        let xe = rand_tensor(&mut rng, 4, 9);
        let c_first = rand_tensor(&mut rng, 3, 9);
        let probe = rand_tensor(&mut rng, 3, 9);
        let adv = adversarial_tcam(&xe, &c_first, &head, 3.0).unwrap();
        let mut grad = ConvHead::zeros(3, 4, 3);
        for j in 0..3 {
            head.backward_row(&xe, j, Some(&adv.erased[j]), probe.row(j), &mut grad, None);
        }
        let check = fd_grad_check(
            |k| {
                let mut h = head.clone();
                h.kernel.copy_from_slice(k);
                let c = adversarial_tcam(&xe, &c_first, &h, 3.0).unwrap().tcam;
                c.as_slice().iter().zip(probe.as_slice()).map(|(a, b)| a * b).sum()
            },
            &head.kernel,
            1e-6,
            &grad.kernel,
        )
        .unwrap();
        assert!(check.max_rel_error < 1e-4, "{check:?}");
    }

    #[test]
    fn fuse_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let cs: Vec<Tensor2> = (0..4).map(|_| rand_tensor(&mut rng, 2, 3)).collect();
        let mut fp = Fusion::new(2, 0.0);
        let f = fuse(&cs[0], &cs[1], &cs[2], &cs[3], &fp).unwrap();
        let mut sum = cs[0].clone();
        sum.axpy(1.0, &cs[2]);
        assert_eq!(f, sum);

        fp.omega = 0.6;
        fp.w_flow = vec![0.0, 0.0];
        let f = fuse(&cs[0], &cs[1], &cs[2], &cs[3], &fp).unwrap();
        let mut rgb = cs[0].clone();
        rgb.axpy(0.6, &cs[1]);
        assert_eq!(f, rgb);
        assert!(fuse(&cs[0], &cs[1], &Tensor2::zeros(3, 3), &cs[3], &fp).is_err());
    }

    #[test]
    fn fuse_weight_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let cs: Vec<Tensor2> = (0..4).map(|_| rand_tensor(&mut rng, 3, 5)).collect();
        let probe = rand_tensor(&mut rng, 3, 5);
        let mut fp = Fusion::new(3, 0.6);
        fp.w_rgb = vec![0.3, -1.2, 0.8];
        let mut grad = Fusion {
            w_rgb: vec![0.0; 3],
            w_flow: vec![0.0; 3],
            omega: 0.6,
        };
        fuse_backward(&cs[0], Some(&cs[1]), &cs[2], Some(&cs[3]), &fp, &probe, &mut grad);
        let check = fd_grad_check(
            |w| {
                let f = Fusion {
                    w_rgb: w.to_vec(),
                    ..fp.clone()
                };
                let out = fuse(&cs[0], &cs[1], &cs[2], &cs[3], &f).unwrap();
                out.as_slice().iter().zip(probe.as_slice()).map(|(a, b)| a * b).sum()
            },
            &fp.w_rgb,
            1e-6,
            &grad.w_rgb,
        )
        .unwrap();
        assert!(check.max_rel_error < 1e-6, "{check:?}");
    }

    #[test]
    fn network_backward_through_all_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut net = Network::init(&mut rng, dims(3), Architecture { adversarial: true, erase_ratio: 3.0 }, 0.6);
        for p in net.params_mut() {
            if p.name.contains(".b") || p.name.ends_with("bias") {
                p.values.iter_mut().for_each(|b| *b = rng.random_range(-0.2..0.2));
            }
        }
        let sample = VideoSample {
            id: "v".into(),
            rgb: rand_tensor(&mut rng, 5, 7),
            flow: rand_tensor(&mut rng, 5, 7),
            labels: vec![true, false, false],
            gt_segments: vec![],
        };
        let probe = rand_tensor(&mut rng, 3, 7);
        let loss = |n: &Network| -> f64 {
            let f = n.forward(&sample).unwrap();
            f.fused.as_slice().iter().zip(probe.as_slice()).map(|(a, b)| a * b).sum()
        };
        let fwd = net.forward(&sample).unwrap();
        let mut grad = net.zeros_like();
        net.backward(
            &sample,
            &fwd,
            StreamGrads::zeros(4, 3, 7, true),
            StreamGrads::zeros(4, 3, 7, true),
            &probe,
            &mut grad,
        );
        let flat = net.flat();
        let check = fd_grad_check(
            |x| {
                let mut n = net.clone();
                let mut offset = 0;
                for p in n.params_mut() {
                    let len = p.values.len();
                    p.values.copy_from_slice(&x[offset..offset + len]);
                    offset += len;
                }
                loss(&n)
            },
            &flat,
            1e-6,
            &grad.flat(),
        )
        .unwrap();
        assert!(check.max_rel_error < 1e-4, "{check:?}");
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn embedding_is_nonnegative(seed in any::<u64>()) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let e = Embedding::init(&mut rng, 4, 3);
                let x = rand_tensor(&mut rng, 4, 6);
                prop_assert!(embed(&x, &e).unwrap().as_slice().iter().all(|&v| v >= 0.0));
            }

            #[test]
            fn unit_kernel_commutes_with_time_permutation(seed in any::<u64>()) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let head = ConvHead::init(&mut rng, 2, 3, 1);
                let xe = rand_tensor(&mut rng, 3, 6);
                let mut perm: Vec<usize> = (0..6).collect();
                rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
                let permuted = Tensor2::from_fn(3, 6, |e, t| xe.get(e, perm[t]));
                let a = tcam(&xe, &head).unwrap();
                let b = tcam(&permuted, &head).unwrap();
                for j in 0..2 {
                    for (t, &p) in perm.iter().enumerate() {
                        prop_assert_eq!(b.get(j, t), a.get(j, p));
                    }
                }
            }

            #[test]
            fn mask_zeroes_the_top_columns(row in prop::collection::vec(-5.0f64..5.0, 1..30), ratio in 1.0f64..10.0) {
                let l = row.len();
                let c = Tensor2::from_rows(std::slice::from_ref(&row)).unwrap();
                let xe = Tensor2::from_fn(2, l, |_, _| 1.0);
                let m = adversarial_mask(&xe, &c, 0, ratio).unwrap();
                let k = erase_count(l, ratio);
                let zeroed: Vec<usize> = (0..l).filter(|&t| m.get(0, t) == 0.0).collect();
                prop_assert_eq!(zeroed.len(), k);
                let min_zeroed = zeroed.iter().map(|&t| row[t]).fold(f64::INFINITY, f64::min);
                for (t, &v) in row.iter().enumerate() {
                    if !zeroed.contains(&t) {
                        prop_assert!(v <= min_zeroed);
                    }
                }
            }
        }
    }
}
