//! Graph-convolutional retargeting network and motion discriminator.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::skeleton::{self, FkBatch, JointGraph, Motion, Skeleton};
use crate::tensor::Tensor;

pub const LEAKY_SLOPE: f64 = 0.2;
pub const LOGIT_CLAMP: f64 = 15.0;
/// Rotation (6) + height-normalized position (3).
pub const FEATURE_CHANNELS: usize = 9;

/// Named parameter tensors in a fixed order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) -> usize {
        self.names.push(name.into());
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names.iter().position(|n| n == name).map(move |i| &mut self.tensors[i])
    }

    /// Total number of scalars.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn zero_all(&mut self) {
        for t in &mut self.tensors {
            t.data_mut().fill(0.0);
        }
    }

    /// Puts every tensor on the tape; `trainable` decides whether gradients are collected.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) })
            .collect()
    }

    /// Checks that `other` has the same names and shapes.
    pub fn check_layout(&self, other: &ParamStore) -> Result<()> {
        if self.names != other.names {
            return Err(Error::schema("checkpoint", "parameter names differ from the model layout"));
        }
        for (n, (a, b)) in self.names.iter().zip(self.tensors.iter().zip(&other.tensors)) {
            if a.shape() != b.shape() {
                return Err(Error::schema(
                    "checkpoint",
                    format!("parameter {n} has shape {:?}, expected {:?}", b.shape(), a.shape()),
                ));
            }
        }
        Ok(())
    }
}

fn glorot(rng: &mut ChaCha8Rng, shape: [usize; 2], gain: f64) -> Tensor {
    let bound = gain * (6.0 / (shape[0] + shape[1]) as f64).sqrt();
    Tensor::new(shape, (0..shape[0] * shape[1]).map(|_| rng.random_range(-bound..bound)).collect())
}

/// `x'_i = lift(x_i) + Σ_{j∈N(i)} LeakyReLU(W [x_i, x_j, e_{j,i}] + b)`; `lift` is the identity when widths match.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphConvLayer {
    pub c_in: usize,
    pub c_out: usize,
    w: usize,
    b: usize,
    lift: Option<usize>,
}

impl GraphConvLayer {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, c_in: usize, c_out: usize) -> Self {
        let w = store.push(format!("{name}.w"), glorot(rng, [c_out, 2 * c_in + 3], 0.5));
        let b = store.push(format!("{name}.b"), Tensor::zeros([c_out]));
        let lift = (c_in != c_out).then(|| store.push(format!("{name}.lift"), glorot(rng, [c_out, c_in], 1.0)));
        Self { c_in, c_out, w, b, lift }
    }

    /// `x` is `[B, T, N, c_in]`, `offsets` is `[B, N, 3]` (per-item edge features).
    pub fn forward(&self, g: &mut Graph, p: &[Var], x: Var, graph: &Arc<JointGraph>, offsets: &Arc<Tensor>) -> Result<Var> {
        graph_conv_op(
            g,
            x,
            p[self.w],
            p[self.b],
            self.lift.map(|l| p[l]),
            graph,
            offsets,
            LEAKY_SLOPE,
        )
    }
}

#[inline]
fn leaky(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        slope * x
    }
}

/// Fused graph convolution on the tape. See [`GraphConvLayer`].
#[allow(clippy::too_many_arguments)]
pub fn graph_conv_op(
    g: &mut Graph,
    x: Var,
    w: Var,
    b: Var,
    lift: Option<Var>,
    graph: &Arc<JointGraph>,
    offsets: &Arc<Tensor>,
    slope: f64,
) -> Result<Var> {
    let xs = g.value(x).shape().to_vec();
    let ws = g.value(w).shape().to_vec();
    let n = graph.num_nodes();
    if xs.len() != 4 || xs[2] != n {
        return Err(Error::ShapeMismatch(format!("graph_conv input must be [B, T, {n}, C], got {xs:?}")));
    }
    let (bsz, t, cin) = (xs[0], xs[1], xs[3]);
    if ws.len() != 2 || ws[1] != 2 * cin + 3 {
        return Err(Error::ShapeMismatch(format!("graph_conv weight must be [C_out, {}], got {ws:?}", 2 * cin + 3)));
    }
    let cout = ws[0];
    if g.value(b).shape() != [cout] {
        return Err(Error::ShapeMismatch(format!("graph_conv bias must be [{cout}]")));
    }
    match lift {
        Some(l) if g.value(l).shape() != [cout, cin] => {
            return Err(Error::ShapeMismatch(format!("graph_conv lift must be [{cout}, {cin}]")))
        }
        None if cin != cout => {
            return Err(Error::ShapeMismatch(format!("graph_conv needs a lift for {cin} → {cout} channels")))
        }
        _ => {}
    }
    if offsets.shape() != [bsz, n, 3] {
        return Err(Error::ShapeMismatch(format!(
            "edge features must be [{bsz}, {n}, 3], got {:?}",
            offsets.shape()
        )));
    }
    let k = 2 * cin + 3;
    let frames = bsz * t;
    let exec = g.exec();

    // pre-activation of message (i ← j) in frame f: A_i + B_j + W_e e + b
    let message_pre = {
        let graph = graph.clone();
        let offsets = offsets.clone();
        move |wd: &[f64], bd: &[f64], xf: &[f64], f: usize, a: &mut Vec<f64>, bm: &mut Vec<f64>| {
            a.clear();
            bm.clear();
            a.resize(n * cout, 0.0);
            bm.resize(n * cout, 0.0);
            for i in 0..n {
                let xi = &xf[i * cin..(i + 1) * cin];
                for o in 0..cout {
                    let row = &wd[o * k..(o + 1) * k];
                    let mut sa = 0.0;
                    let mut sb = 0.0;
                    for c in 0..cin {
                        sa += row[c] * xi[c];
                        sb += row[cin + c] * xi[c];
                    }
                    a[i * cout + o] = sa;
                    bm[i * cout + o] = sb;
                }
            }
            let item = f / t;
            let od = offsets.data();
            let mut pre = Vec::new();
            for i in 0..n {
                for &(j, oj, s) in graph.neighbors(i) {
                    let e = [
                        s * od[(item * n + oj) * 3],
                        s * od[(item * n + oj) * 3 + 1],
                        s * od[(item * n + oj) * 3 + 2],
                    ];
                    for o in 0..cout {
                        let row = &wd[o * k..(o + 1) * k];
                        pre.push(
                            a[i * cout + o]
                                + bm[j * cout + o]
                                + row[2 * cin] * e[0]
                                + row[2 * cin + 1] * e[1]
                                + row[2 * cin + 2] * e[2]
                                + bd[o],
                        );
                    }
                }
            }
            pre
        }
    };
    let message_pre = Arc::new(message_pre);

    let mut out = vec![0.0; frames * n * cout];
    {
        let xd = g.value(x).data();
        let wd = g.value(w).data();
        let bd = g.value(b).data();
        let ld = lift.map(|l| g.value(l).data());
        let mp = message_pre.clone();
        exec.for_each_chunk_mut(&mut out, n * cout, |f, of| {
            let xf = &xd[f * n * cin..(f + 1) * n * cin];
            let (mut a, mut bm) = (Vec::new(), Vec::new());
            let pre = mp(wd, bd, xf, f, &mut a, &mut bm);
            for i in 0..n {
                let xi = &xf[i * cin..(i + 1) * cin];
                for o in 0..cout {
                    of[i * cout + o] = match ld {
                        Some(l) => (0..cin).map(|c| l[o * cin + c] * xi[c]).sum(),
                        None => xi[o],
                    };
                }
            }
            let mut idx = 0;
            for i in 0..n {
                for _ in graph.neighbors(i) {
                    for o in 0..cout {
                        of[i * cout + o] += leaky(pre[idx], slope);
                        idx += 1;
                    }
                }
            }
        });
    }

    let mut parents = vec![x, w, b];
    parents.extend(lift);
    let graph = graph.clone();
    let offsets = offsets.clone();
    Ok(g.custom(
        Tensor::new([bsz, t, n, cout], out),
        &parents,
        Box::new(move |grad, p, _| {
            let (xd, wd, bd) = (p[0].data(), p[1].data(), p[2].data());
            let ld = p.get(3).map(|l| l.data());
            let gd = grad.data();
            let od = offsets.data();
            struct Part {
                gx: Vec<f64>,
                gw: Vec<f64>,
                gb: Vec<f64>,
                gl: Vec<f64>,
            }
            let parts = exec.map_range(frames, |f| {
                let xf = &xd[f * n * cin..(f + 1) * n * cin];
                let gf = &gd[f * n * cout..(f + 1) * n * cout];
                let (mut a, mut bm) = (Vec::new(), Vec::new());
                let pre = message_pre(wd, bd, xf, f, &mut a, &mut bm);
                let item = f / t;
                let mut ga = vec![0.0; n * cout];
                let mut gbm = vec![0.0; n * cout];
                let mut gw = vec![0.0; cout * k];
                let mut gb = vec![0.0; cout];
                let mut idx = 0;
                for i in 0..n {
                    for &(j, oj, s) in graph.neighbors(i) {
                        let e = [
                            s * od[(item * n + oj) * 3],
                            s * od[(item * n + oj) * 3 + 1],
                            s * od[(item * n + oj) * 3 + 2],
                        ];
                        for o in 0..cout {
                            let d = if pre[idx] > 0.0 { 1.0 } else { slope };
                            let gp = gf[i * cout + o] * d;
                            idx += 1;
                            ga[i * cout + o] += gp;
                            gbm[j * cout + o] += gp;
                            gb[o] += gp;
                            for q in 0..3 {
                                gw[o * k + 2 * cin + q] += gp * e[q];
                            }
                        }
                    }
                }
                let mut gx = vec![0.0; n * cin];
                let mut gl = if ld.is_some() { vec![0.0; cout * cin] } else { Vec::new() };
                for i in 0..n {
                    let xi = &xf[i * cin..(i + 1) * cin];
                    let gxi = &mut gx[i * cin..(i + 1) * cin];
                    for o in 0..cout {
                        let (gai, gbi, go) = (ga[i * cout + o], gbm[i * cout + o], gf[i * cout + o]);
                        let row = &wd[o * k..(o + 1) * k];
                        for c in 0..cin {
                            gxi[c] += gai * row[c] + gbi * row[cin + c];
                            gw[o * k + c] += gai * xi[c];
                            gw[o * k + cin + c] += gbi * xi[c];
                        }
                        match ld {
                            Some(l) => {
                                for c in 0..cin {
                                    gxi[c] += go * l[o * cin + c];
                                    gl[o * cin + c] += go * xi[c];
                                }
                            }
                            None => gxi[o] += go,
                        }
                    }
                }
                Part { gx, gw, gb, gl }
            });
            let mut gx = Vec::with_capacity(frames * n * cin);
            let mut gw = vec![0.0; cout * k];
            let mut gb = vec![0.0; cout];
            let mut gl = vec![0.0; if ld.is_some() { cout * cin } else { 0 }];
            for part in parts {
                gx.extend_from_slice(&part.gx);
                gw.iter_mut().zip(&part.gw).for_each(|(a, b)| *a += b);
                gb.iter_mut().zip(&part.gb).for_each(|(a, b)| *a += b);
                gl.iter_mut().zip(&part.gl).for_each(|(a, b)| *a += b);
            }
            let mut res = vec![
                Some(Tensor::new(p[0].shape().to_vec(), gx)),
                Some(Tensor::new(p[1].shape().to_vec(), gw)),
                Some(Tensor::new(p[2].shape().to_vec(), gb)),
            ];
            if ld.is_some() {
                res.push(Some(Tensor::new(p[3].shape().to_vec(), gl)));
            }
            res
        }),
    ))
}

/// Residual 1-D convolution along time, per joint: kernel 3, zero "same" padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemporalLayer {
    pub channels: usize,
    w: usize,
    b: usize,
}

pub const TEMPORAL_KERNEL: usize = 3;

impl TemporalLayer {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, channels: usize, gain: f64) -> Self {
        let w = store.push(
            format!("{name}.w"),
            glorot(rng, [channels, TEMPORAL_KERNEL * channels], gain),
        );
        let b = store.push(format!("{name}.b"), Tensor::zeros([channels]));
        Self { channels, w, b }
    }

    pub fn forward(&self, g: &mut Graph, p: &[Var], x: Var) -> Result<Var> {
        temporal_conv_op(g, x, p[self.w], p[self.b])
    }
}

/// `y[t] = x[t] + b + Σ_k W_k x[t + k − 1]` on `[B, T, N, C]`.
pub fn temporal_conv_op(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    let xs = g.value(x).shape().to_vec();
    if xs.len() != 4 {
        return Err(Error::ShapeMismatch(format!("temporal conv input must be [B, T, N, C], got {xs:?}")));
    }
    let (bsz, t, n, c) = (xs[0], xs[1], xs[2], xs[3]);
    let kk = TEMPORAL_KERNEL * c;
    if g.value(w).shape() != [c, kk] || g.value(b).shape() != [c] {
        return Err(Error::ShapeMismatch(format!("temporal conv parameters must be [{c}, {kk}] and [{c}]")));
    }
    let exec = g.exec();
    let half = (TEMPORAL_KERNEL / 2) as isize;
    let mut out = vec![0.0; bsz * t * n * c];
    {
        let (xd, wd, bd) = (g.value(x).data(), g.value(w).data(), g.value(b).data());
        exec.for_each_chunk_mut(&mut out, n * c, |f, of| {
            let (item, tt) = (f / t, (f % t) as isize);
            of.copy_from_slice(&xd[f * n * c..(f + 1) * n * c]);
            for j in 0..n {
                for o in 0..c {
                    let mut s = bd[o];
                    for kt in 0..TEMPORAL_KERNEL {
                        let src = tt + kt as isize - half;
                        if src < 0 || src >= t as isize {
                            continue;
                        }
                        let xr = &xd[((item * t + src as usize) * n + j) * c..][..c];
                        let wr = &wd[o * kk + kt * c..][..c];
                        s += xr.iter().zip(wr).map(|(a, b)| a * b).sum::<f64>();
                    }
                    of[j * c + o] += s;
                }
            }
        });
    }
    Ok(g.custom(
        Tensor::new(xs.clone(), out),
        &[x, w, b],
        Box::new(move |grad, p, _| {
            let (xd, wd) = (p[0].data(), p[1].data());
            let gd = grad.data();
            let parts = exec.map_range(bsz, |item| {
                let mut gx = gd[item * t * n * c..(item + 1) * t * n * c].to_vec();
                let mut gw = vec![0.0; c * kk];
                let mut gb = vec![0.0; c];
                for tt in 0..t {
                    for j in 0..n {
                        let go = &gd[((item * t + tt) * n + j) * c..][..c];
                        for o in 0..c {
                            gb[o] += go[o];
                        }
                        for kt in 0..TEMPORAL_KERNEL {
                            let src = tt as isize + kt as isize - half;
                            if src < 0 || src >= t as isize {
                                continue;
                            }
                            let src = src as usize;
                            let xr = &xd[((item * t + src) * n + j) * c..][..c];
                            for o in 0..c {
                                let wr = &wd[o * kk + kt * c..][..c];
                                for ci in 0..c {
                                    gx[(src * n + j) * c + ci] += go[o] * wr[ci];
                                    gw[o * kk + kt * c + ci] += go[o] * xr[ci];
                                }
                            }
                        }
                    }
                }
                (gx, gw, gb)
            });
            let mut gx = Vec::with_capacity(bsz * t * n * c);
            let mut gw = vec![0.0; c * kk];
            let mut gb = vec![0.0; c];
            for (x, w, b) in parts {
                gx.extend(x);
                gw.iter_mut().zip(&w).for_each(|(a, b)| *a += b);
                gb.iter_mut().zip(&b).for_each(|(a, b)| *a += b);
            }
            vec![
                Some(Tensor::new(p[0].shape().to_vec(), gx)),
                Some(Tensor::new(p[1].shape().to_vec(), gw)),
                Some(Tensor::new(p[2].shape().to_vec(), gb)),
            ]
        }),
    ))
}

/// Multiplies each batch item of `x` (`[B, ...]`) by its own constant.
pub fn scale_items_op(g: &mut Graph, x: Var, factors: &[f64]) -> Result<Var> {
    let xv = g.value(x);
    if xv.shape().first() != Some(&factors.len()) {
        return Err(Error::ShapeMismatch(format!(
            "{} scale factors for a batch of shape {:?}",
            factors.len(),
            xv.shape()
        )));
    }
    let per = xv.len() / factors.len().max(1);
    let f = factors.to_vec();
    let data = xv.data().iter().enumerate().map(|(i, v)| v * f[i / per]).collect();
    Ok(g.custom(
        Tensor::new(xv.shape().to_vec(), data),
        &[x],
        Box::new(move |grad, p, _| {
            let d = grad.data().iter().enumerate().map(|(i, v)| v * f[i / per]).collect();
            vec![Some(Tensor::new(p[0].shape().to_vec(), d))]
        }),
    ))
}

/// Per-item skeleton context shared by every layer in a batch.
#[derive(Clone, Debug)]
pub struct SkeletonBatch {
    pub graph: Arc<JointGraph>,
    /// `[B, N, 3]` offsets.
    pub offsets: Arc<Tensor>,
    pub heights: Vec<f64>,
    pub fk: FkBatch,
}

impl SkeletonBatch {
    pub fn new(skeletons: &[&Skeleton]) -> Result<Self> {
        let fk = FkBatch::new(skeletons)?;
        let n = skeletons[0].num_joints();
        let offsets = skeletons
            .iter()
            .flat_map(|s| s.offsets().iter().flatten().copied())
            .collect();
        Ok(Self {
            graph: Arc::new(JointGraph::from_skeleton(skeletons[0])),
            offsets: Arc::new(Tensor::new([skeletons.len(), n, 3], offsets)),
            heights: skeletons.iter().map(|s| s.height()).collect(),
            fk,
        })
    }

    pub fn repeat(skel: &Skeleton, items: usize) -> Result<Self> {
        Self::new(&vec![skel; items])
    }

    pub fn items(&self) -> usize {
        self.heights.len()
    }
}

/// Motion features Q = [rot6d, FK position / height] on the tape: `[B, T, N, 9]`.
pub fn motion_features_op(g: &mut Graph, rot6d: Var, root: Var, batch: &SkeletonBatch) -> Result<Var> {
    let (pos, _) = skeleton::fk_from_rot6d(g, rot6d, root, &batch.fk)?;
    let inv: Vec<f64> = batch.heights.iter().map(|h| 1.0 / h).collect();
    let pos = scale_items_op(g, pos, &inv)?;
    Ok(g.concat_last(&[rot6d, pos]))
}

/// Plain-value version of [`motion_features_op`]: `[T, N, 9]`.
pub fn motion_features(skel: &Skeleton, motion: &Motion) -> Result<Tensor> {
    let batch = SkeletonBatch::new(&[skel])?;
    let mut g = Graph::with_exec(crate::parallel::Exec::Sequential);
    let (r, p) = motion_tensors(&mut g, &[motion])?;
    let q = motion_features_op(&mut g, r, p, &batch)?;
    Ok(g.value(q).clone().reshaped([motion.frames(), motion.joints(), FEATURE_CHANNELS]))
}

/// Stacks motions of equal length into `[B, T, N, 6]` and `[B, T, 3]` constants.
pub fn motion_tensors(g: &mut Graph, motions: &[&Motion]) -> Result<(Var, Var)> {
    let first = motions.first().ok_or_else(|| Error::DataEmpty("no motions to batch".into()))?;
    let (t, n) = (first.frames(), first.joints());
    let mut rot = Vec::with_capacity(motions.len() * t * n * 6);
    let mut root = Vec::with_capacity(motions.len() * t * 3);
    for m in motions {
        if m.frames() != t || m.joints() != n {
            return Err(Error::ShapeMismatch("motions in a batch must share frame and joint counts".into()));
        }
        rot.extend_from_slice(m.rot6d.data());
        root.extend_from_slice(m.root_pos.data());
    }
    let b = motions.len();
    Ok((
        g.constant(Tensor::new([b, t, n, 6], rot)),
        g.constant(Tensor::new([b, t, 3], root)),
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder_channels: [usize; 2],
    pub decoder_channels: [usize; 2],
    pub root_hidden: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder_channels: [16, 32],
            decoder_channels: [16, 6],
            root_hidden: 16,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn latent_channels(&self) -> usize {
        self.encoder_channels[1]
    }

    fn validate(&self) -> Result<()> {
        if self.decoder_channels[1] != 6 {
            return Err(Error::InvalidConfig("decoder must end with 6 rotation channels".into()));
        }
        if self.encoder_channels.contains(&0) || self.decoder_channels.contains(&0) || self.root_hidden == 0 {
            return Err(Error::InvalidConfig("channel widths must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Dense {
    w: usize,
    b: usize,
}

impl Dense {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, cin: usize, cout: usize) -> Self {
        let w = store.push(format!("{name}.w"), glorot(rng, [cout, cin], 1.0));
        let b = store.push(format!("{name}.b"), Tensor::zeros([cout]));
        Self { w, b }
    }

    fn forward(&self, g: &mut Graph, p: &[Var], x: Var) -> Var {
        g.linear(x, p[self.w], Some(p[self.b]))
    }
}

/// Encoder F_θ, decoder F_φ and the root-trajectory MLP.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetargetModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    enc: [GraphConvLayer; 2],
    enc_t: TemporalLayer,
    dec: [GraphConvLayer; 2],
    dec_t: TemporalLayer,
    root: [Dense; 2],
}

/// Identity rotation in 6D; the initial value of the output bias.
const OUTPUT_BIAS_INIT: [f64; 6] = crate::rotation::IDENTITY_6D;

impl RetargetModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut s = ParamStore::new();
        let [e1, e2] = config.encoder_channels;
        let [d1, d2] = config.decoder_channels;
        let enc = [
            GraphConvLayer::new(&mut s, &mut rng, "encoder.gc0", FEATURE_CHANNELS, e1),
            GraphConvLayer::new(&mut s, &mut rng, "encoder.gc1", e1, e2),
        ];
        let enc_t = TemporalLayer::new(&mut s, &mut rng, "encoder.temporal", e2, 0.5);
        let dec = [
            GraphConvLayer::new(&mut s, &mut rng, "decoder.gc0", e2, d1),
            GraphConvLayer::new(&mut s, &mut rng, "decoder.gc1", d1, d2),
        ];
        let dec_t = TemporalLayer::new(&mut s, &mut rng, "decoder.temporal", d2, 0.5);
        s.tensors_mut()[dec_t.b] = Tensor::new([6], OUTPUT_BIAS_INIT.to_vec());
        let root = [
            Dense::new(&mut s, &mut rng, "root_mlp.0", e2, config.root_hidden),
            Dense::new(&mut s, &mut rng, "root_mlp.1", config.root_hidden, 3),
        ];
        Ok(Self {
            config,
            params: s,
            enc,
            enc_t,
            dec,
            dec_t,
            root,
        })
    }

    pub fn num_params(&self) -> usize {
        self.params.count()
    }

    /// Q `[B, T, N, 9]` → Z `[B, T, N, 32]`.
    pub fn encode_op(&self, g: &mut Graph, p: &[Var], q: Var, batch: &SkeletonBatch) -> Result<Var> {
        let x = self.enc[0].forward(g, p, q, &batch.graph, &batch.offsets)?;
        let x = self.enc[1].forward(g, p, x, &batch.graph, &batch.offsets)?;
        self.enc_t.forward(g, p, x)
    }

    /// Z → (rot6d `[B, T, N, 6]`, root position `[B, T, 3]` in meters of the batch skeletons).
    pub fn decode_op(&self, g: &mut Graph, p: &[Var], z: Var, batch: &SkeletonBatch) -> Result<(Var, Var)> {
        let x = self.dec[0].forward(g, p, z, &batch.graph, &batch.offsets)?;
        let x = self.dec[1].forward(g, p, x, &batch.graph, &batch.offsets)?;
        let rot = self.dec_t.forward(g, p, x)?;
        let zr = g.select(z, 2, batch.graph.root());
        let h = self.root[0].forward(g, p, zr);
        let h = g.leaky_relu(h, LEAKY_SLOPE);
        let r = self.root[1].forward(g, p, h);
        // the MLP predicts height-normalized root positions
        let root = scale_items_op(g, r, &batch.heights)?;
        Ok((rot, root))
    }

    /// Source motion → target motion on the tape; also returns Z.
    pub fn retarget_op(
        &self,
        g: &mut Graph,
        p: &[Var],
        q: Var,
        source: &SkeletonBatch,
        target: &SkeletonBatch,
    ) -> Result<(Var, Var, Var)> {
        let z = self.encode_op(g, p, q, source)?;
        let (rot, root) = self.decode_op(g, p, z, target)?;
        Ok((rot, root, z))
    }

    /// Q `[T, N, 9]` for one skeleton → Z `[T, N, 32]`.
    pub fn encode(&self, q: &Tensor, skel: &Skeleton) -> Result<Tensor> {
        let s = q.shape();
        if s.len() != 3 || s[1] != skel.num_joints() || s[2] != FEATURE_CHANNELS {
            return Err(Error::ShapeMismatch(format!(
                "Q must be [T, {}, 9], got {s:?}",
                skel.num_joints()
            )));
        }
        let batch = SkeletonBatch::new(&[skel])?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let qv = g.constant(q.clone().reshaped([1, s[0], s[1], s[2]]));
        let z = self.encode_op(&mut g, &p, qv, &batch)?;
        Ok(g.value(z).clone().reshaped([s[0], s[1], self.config.latent_channels()]))
    }

    /// Z `[T, N, 32]` → target motion. Degenerate rotation outputs are reported.
    pub fn decode(&self, z: &Tensor, skel: &Skeleton, fps: f64) -> Result<Motion> {
        let s = z.shape();
        if s.len() != 3 || s[1] != skel.num_joints() || s[2] != self.config.latent_channels() {
            return Err(Error::ShapeMismatch(format!(
                "Z must be [T, {}, {}], got {s:?}",
                skel.num_joints(),
                self.config.latent_channels()
            )));
        }
        let batch = SkeletonBatch::new(&[skel])?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let zv = g.constant(z.clone().reshaped([1, s[0], s[1], s[2]]));
        let (rot, root) = self.decode_op(&mut g, &p, zv, &batch)?;
        let rot = g.value(rot).clone().reshaped([s[0], s[1], 6]);
        for r in rot.data().chunks_exact(6) {
            crate::rotation::rot6d_to_matrix(r.try_into().unwrap())?;
        }
        Motion::new(rot, g.value(root).clone().reshaped([s[0], 3]), fps)
    }

    /// Retargets a whole clip from `source` to `target` (same topology).
    pub fn retarget(&self, motion: &Motion, source: &Skeleton, target: &Skeleton) -> Result<Motion> {
        if !source.same_topology(target) {
            return Err(Error::PairMismatch("source and target skeletons differ in topology".into()));
        }
        let q = motion_features(source, motion)?;
        let z = self.encode(&q, source)?;
        self.decode(&z, target, motion.fps)
    }

    pub fn load_params(&mut self, params: ParamStore) -> Result<()> {
        self.params.check_layout(&params)?;
        self.params = params;
        Ok(())
    }
}

/// Per-frame real/fake classifier F_γ.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Discriminator {
    pub params: ParamStore,
    gc: [GraphConvLayer; 2],
    head: Dense,
}

impl Discriminator {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_d15c);
        let mut s = ParamStore::new();
        let gc = [
            GraphConvLayer::new(&mut s, &mut rng, "disc.gc0", FEATURE_CHANNELS, 16),
            GraphConvLayer::new(&mut s, &mut rng, "disc.gc1", 16, 32),
        ];
        let head = Dense::new(&mut s, &mut rng, "disc.head", 32, 1);
        Self { params: s, gc, head }
    }

    /// Q `[B, T, N, 9]` → probabilities `[B, T]` in `(0, 1)`.
    pub fn forward(&self, g: &mut Graph, p: &[Var], q: Var, batch: &SkeletonBatch) -> Result<Var> {
        let s = g.value(q).shape().to_vec();
        let x = self.gc[0].forward(g, p, q, &batch.graph, &batch.offsets)?;
        let x = self.gc[1].forward(g, p, x, &batch.graph, &batch.offsets)?;
        let pooled = g.mean_axis(x, 2);
        let logit = self.head.forward(g, p, pooled);
        let prob = g.clamped_sigmoid(logit, LOGIT_CLAMP);
        Ok(g.reshape(prob, &[s[0], s[1]]))
    }

    /// Single frame `[N, 9]` → probability.
    pub fn discriminate(&self, q: &Tensor, skel: &Skeleton) -> Result<f64> {
        let n = skel.num_joints();
        if q.shape() != [n, FEATURE_CHANNELS] {
            return Err(Error::ShapeMismatch(format!("frame features must be [{n}, 9], got {:?}", q.shape())));
        }
        let batch = SkeletonBatch::new(&[skel])?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let qv = g.constant(q.clone().reshaped([1, 1, n, FEATURE_CHANNELS]));
        let prob = self.forward(&mut g, &p, qv, &batch)?;
        Ok(g.value(prob).data()[0])
    }

    pub fn load_params(&mut self, params: ParamStore) -> Result<()> {
        self.params.check_layout(&params)?;
        self.params = params;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_difference, relative_error};

    fn path_graph(n: usize) -> (Arc<JointGraph>, Vec<Option<usize>>) {
        let parents: Vec<Option<usize>> = (0..n).map(|i| i.checked_sub(1)).collect();
        (Arc::new(JointGraph::from_parents(&parents).unwrap()), parents)
    }

    #[test]
    fn zero_weights_pass_through() {
        let (graph, _) = path_graph(3);
        let offsets = Arc::new(Tensor::new([1, 3, 3], vec![0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0]));
        let mut g = Graph::new();
        let x0 = Tensor::new([1, 2, 3, 2], (0..12).map(|i| i as f64 * 0.3 - 1.0).collect());
        let x = g.constant(x0.clone());
        let w = g.constant(Tensor::zeros([2, 7]));
        let b = g.constant(Tensor::zeros([2]));
        let y = graph_conv_op(&mut g, x, w, b, None, &graph, &offsets, LEAKY_SLOPE).unwrap();
        assert_eq!(g.value(y), &x0);
    }

    #[test]
    fn isolated_node_passes_through() {
        let graph = Arc::new(JointGraph::from_parents(&[None]).unwrap());
        let offsets = Arc::new(Tensor::zeros([1, 1, 3]));
        let mut g = Graph::new();
        let x = g.constant(Tensor::new([1, 1, 1, 1], vec![0.7]));
        let w = g.constant(Tensor::new([1, 5], vec![1.0, 2.0, 3.0, 4.0, 5.0]));
        let b = g.constant(Tensor::new([1], vec![9.0]));
        let y = graph_conv_op(&mut g, x, w, b, None, &graph, &offsets, LEAKY_SLOPE).unwrap();
        assert_eq!(g.value(y).data(), &[0.7]);
    }

    #[test]
    fn two_node_hand_evaluation() {
        // node 1 is the child of node 0 with offset (0.5, 0, 0)
        let (graph, _) = path_graph(2);
        let offsets = Arc::new(Tensor::new([1, 2, 3], vec![0.0, 0.0, 0.0, 0.5, 0.0, 0.0]));
        let mut g = Graph::new();
        let x = g.constant(Tensor::new([1, 1, 2, 1], vec![1.0, -2.0]));
        // W = [w_self, w_nb, e_x, e_y, e_z]
        let w = g.constant(Tensor::new([1, 5], vec![0.5, 0.25, 2.0, 0.0, 0.0]));
        let b = g.constant(Tensor::new([1], vec![0.1]));
        let y = graph_conv_op(&mut g, x, w, b, None, &graph, &offsets, LEAKY_SLOPE).unwrap();
        // node 0: neighbor 1 is its child, e = −0.5: 0.5·1 + 0.25·(−2) − 1 + 0.1 = −0.9 → −0.18
        // node 1: neighbor 0 is its parent, e = +0.5: 0.5·(−2) + 0.25·1 + 1 + 0.1 = 0.35
        let out = g.value(y).data();
        assert!((out[0] - (1.0 - 0.18)).abs() < 1e-12);
        assert!((out[1] - (-2.0 + 0.35)).abs() < 1e-12);
    }

    #[test]
    fn graph_conv_gradients() {
        let (graph, _) = path_graph(3);
        let offsets = Arc::new(Tensor::new([2, 3, 3], (0..18).map(|i| (i as f64 * 0.37).sin()).collect()));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut rnd = |shape: &[usize]| {
            let n = shape.iter().product();
            Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
        };
        let x0 = rnd(&[2, 2, 3, 2]);
        let w0 = rnd(&[4, 7]);
        let b0 = rnd(&[4]);
        let l0 = rnd(&[4, 2]);
        let wt = rnd(&[2, 2, 3, 4]);
        let loss = |g: &mut Graph, v: [Var; 4]| {
            let y = graph_conv_op(g, v[0], v[1], v[2], Some(v[3]), &graph, &offsets, LEAKY_SLOPE).unwrap();
            let w = g.constant(wt.clone());
            let m = g.mul(y, w);
            g.sum(m)
        };
        let inputs = [x0, w0, b0, l0];
        let mut g = Graph::new();
        let vars = inputs.clone().map(|t| g.param(t));
        let l = loss(&mut g, vars);
        let grads = g.backward(l);
        for k in 0..4 {
            let num = finite_difference(&inputs[k], 1e-6, |t| {
                let mut g = Graph::new();
                let vars: Vec<Var> = (0..4)
                    .map(|i| g.constant(if i == k { t.clone() } else { inputs[i].clone() }))
                    .collect();
                let l = loss(&mut g, vars.try_into().unwrap());
                g.scalar(l)
            });
            let e = relative_error(grads.get(vars[k]).unwrap(), &num, 1e-8);
            assert!(e < 1e-4, "input {k}: {e}");
        }
    }

    #[test]
    fn temporal_gradients_and_zero_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut rnd = |shape: &[usize]| {
            let n = shape.iter().product();
            Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
        };
        let x0 = rnd(&[2, 4, 2, 3]);
        let w0 = rnd(&[3, 9]);
        let b0 = rnd(&[3]);
        let wt = rnd(&[2, 4, 2, 3]);
        let mut g = Graph::new();
        let x = g.constant(x0.clone());
        let zw = g.constant(Tensor::zeros([3, 9]));
        let zb = g.constant(Tensor::zeros([3]));
        let y = temporal_conv_op(&mut g, x, zw, zb).unwrap();
        assert_eq!(g.value(y), &x0);

        let loss = |g: &mut Graph, v: [Var; 3]| {
            let y = temporal_conv_op(g, v[0], v[1], v[2]).unwrap();
            let w = g.constant(wt.clone());
            let m = g.mul(y, w);
            g.sum_squares(m)
        };
        let inputs = [x0, w0, b0];
        let mut g = Graph::new();
        let vars = inputs.clone().map(|t| g.param(t));
        let l = loss(&mut g, vars);
        let grads = g.backward(l);
        for k in 0..3 {
            let num = finite_difference(&inputs[k], 1e-6, |t| {
                let mut g = Graph::new();
                let vars: Vec<Var> = (0..3)
                    .map(|i| g.constant(if i == k { t.clone() } else { inputs[i].clone() }))
                    .collect();
                let l = loss(&mut g, vars.try_into().unwrap());
                g.scalar(l)
            });
            assert!(relative_error(grads.get(vars[k]).unwrap(), &num, 1e-8) < 1e-4);
        }
    }

    fn chain_skeleton(n: usize) -> Skeleton {
        let names = (0..n).map(|i| format!("j{i}")).collect();
        let parents = (0..n).map(|i| i.checked_sub(1)).collect();
        let offsets = (0..n).map(|i| if i == 0 { [0.0; 3] } else { [0.1 * i as f64, 0.2, 0.0] }).collect();
        Skeleton::new(names, parents, offsets, 1.5).unwrap()
    }

    #[test]
    fn shape_contracts() {
        let model = RetargetModel::new(ModelConfig::default()).unwrap();
        let skel = chain_skeleton(8);
        let q = Tensor::new([4, 8, 9], (0..288).map(|i| (i as f64 * 0.1).cos()).collect());
        let z = model.encode(&q, &skel).unwrap();
        assert_eq!(z.shape(), [4, 8, 32]);
        let m = model.decode(&z, &skel, 30.0).unwrap();
        assert_eq!(m.rot6d.shape(), [4, 8, 6]);
        assert_eq!(m.root_pos.shape(), [4, 3]);
        assert!(matches!(model.encode(&Tensor::zeros([4, 7, 9]), &skel), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn zero_model() {
        let mut model = RetargetModel::new(ModelConfig::default()).unwrap();
        model.params.zero_all();
        let skel = chain_skeleton(5);
        let z = model.encode(&Tensor::zeros([3, 5, 9]), &skel).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
        assert!(matches!(model.decode(&z, &skel, 30.0), Err(Error::DegenerateRotation(_))));

        let mut d = Discriminator::new(1);
        d.params.zero_all();
        let q = Tensor::new([5, 9], (0..45).map(|i| i as f64).collect());
        assert_eq!(d.discriminate(&q, &skel).unwrap(), 0.5);
    }

    #[test]
    fn logit_clamp() {
        let mut d = Discriminator::new(1);
        d.params.zero_all();
        *d.params.get_mut("disc.head.b").unwrap() = Tensor::new([1], vec![100.0]);
        let skel = chain_skeleton(3);
        let p = d.discriminate(&Tensor::zeros([3, 9]), &skel).unwrap();
        assert!(p <= crate::autodiff::sigmoid(LOGIT_CLAMP) && p < 1.0);
    }

    #[test]
    fn deterministic_under_seed() {
        let skel = chain_skeleton(6);
        let q = Tensor::new([4, 6, 9], (0..216).map(|i| (i as f64 * 0.7).sin()).collect());
        let a = RetargetModel::new(ModelConfig::default()).unwrap();
        let b = RetargetModel::new(ModelConfig::default()).unwrap();
        let za = a.encode(&q, &skel).unwrap();
        let zb = b.encode(&q, &skel).unwrap();
        assert_eq!(za.data(), zb.data());
        let ma = a.decode(&za, &skel, 30.0).unwrap();
        let mb = b.decode(&zb, &skel, 30.0).unwrap();
        assert_eq!(ma.rot6d.data(), mb.rot6d.data());
        let f = Tensor::new([6, 9], q.data()[..54].to_vec());
        assert_eq!(
            Discriminator::new(2).discriminate(&f, &skel).unwrap().to_bits(),
            Discriminator::new(2).discriminate(&f, &skel).unwrap().to_bits()
        );
    }

    #[test]
    fn parameter_count_is_stable() {
        let model = RetargetModel::new(ModelConfig::default()).unwrap();
        // gc 9→16: 16·21 + 16 + 16·9; gc 16→32: 32·35 + 32 + 32·16; temporal 32: 32·96 + 32
        // gc 32→16: 16·67 + 16 + 16·32; gc 16→6: 6·35 + 6 + 6·16; temporal 6: 6·18 + 6
        // root: 32·16 + 16 + 16·3 + 3
        let expected = (336 + 16 + 144)
            + (1120 + 32 + 512)
            + (3072 + 32)
            + (1072 + 16 + 512)
            + (210 + 6 + 96)
            + (108 + 6)
            + (512 + 16 + 48 + 3);
        assert_eq!(model.num_params(), expected);
        assert_eq!(model.num_params(), 7869);
    }
}
