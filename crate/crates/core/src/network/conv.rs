//! Per-frame residual CNN with hand-written backward passes.
//!
//! Frames are independent: a batch of `B` frames is a flat buffer of `B`
//! `[channels, height, width]` maps. Convolutions lower to im2col + GEMM.
//! Weight gradients are reduced over fixed frame chunks in a fixed order so
//! results do not depend on thread scheduling.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::scalar::{matmul, Scalar, Trans};
use crate::tensor::Tensor;

/// Frames per unit of parallel work in the backward pass.
const GRAD_CHUNK: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Geom {
    cin: usize,
    cout: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    in_h: usize,
    in_w: usize,
}

impl Geom {
    fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad - self.kernel) / self.stride + 1
    }

    fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad - self.kernel) / self.stride + 1
    }

    fn in_len(&self) -> usize {
        self.cin * self.in_h * self.in_w
    }

    fn out_len(&self) -> usize {
        self.cout * self.out_h() * self.out_w()
    }

    fn col_rows(&self) -> usize {
        self.cin * self.kernel * self.kernel
    }

    fn col_cols(&self) -> usize {
        self.out_h() * self.out_w()
    }
}

fn im2col<T: Scalar>(g: &Geom, x: &[T], col: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let p = oh * ow;
    for ci in 0..g.cin {
        let plane = &x[ci * g.in_h * g.in_w..(ci + 1) * g.in_h * g.in_w];
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (ci * g.kernel + ky) * g.kernel + kx;
                let dst = &mut col[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= g.in_h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.in_w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]; accumulates into `dx`.
fn col2im<T: Scalar>(g: &Geom, col: &[T], dx: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let p = oh * ow;
    for ci in 0..g.cin {
        let plane = &mut dx[ci * g.in_h * g.in_w..(ci + 1) * g.in_h * g.in_w];
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (ci * g.kernel + ky) * g.kernel + kx;
                let src = &col[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.in_w as isize {
                            dst[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// 2-D convolution with bias; weight shape `[cout, cin, k, k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: usize,
    pub pad: usize,
}

impl<T: Scalar> Conv2d<T> {
    pub fn zeros(cin: usize, cout: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[cout, cin, kernel, kernel]),
            bias: Tensor::zeros(&[cout]),
            stride,
            pad,
        }
    }

    /// He-normal weights, zero bias.
    pub fn init<R: Rng + ?Sized>(
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        let mut conv = Self::zeros(cin, cout, kernel, stride, pad);
        let std = gain * (2.0 / (cin * kernel * kernel) as f64).sqrt();
        for w in conv.weight.data_mut() {
            let z: f64 = StandardNormal.sample(rng);
            *w = T::lit(z * std);
        }
        conv
    }

    pub fn cin(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn cout(&self) -> usize {
        self.weight.shape()[0]
    }

    fn geom(&self, in_h: usize, in_w: usize) -> Geom {
        Geom {
            cin: self.cin(),
            cout: self.cout(),
            kernel: self.weight.shape()[2],
            stride: self.stride,
            pad: self.pad,
            in_h,
            in_w,
        }
    }

    pub fn out_size(&self, in_h: usize, in_w: usize) -> (usize, usize) {
        let g = self.geom(in_h, in_w);
        (g.out_h(), g.out_w())
    }

    /// Convolve `frames` independent maps stored back to back in `x`.
    pub fn forward(&self, x: &[T], in_h: usize, in_w: usize) -> Vec<T> {
        let g = self.geom(in_h, in_w);
        let frames = x.len() / g.in_len();
        debug_assert_eq!(frames * g.in_len(), x.len());
        let (rows, cols) = (g.col_rows(), g.col_cols());
        let w = self.weight.data();
        let b = self.bias.data();
        let mut out = vec![T::zero(); frames * g.out_len()];
        out.par_chunks_mut(g.out_len())
            .zip(x.par_chunks(g.in_len()))
            .for_each_init(
                || vec![T::zero(); rows * cols],
                |col, (o, xi)| {
                    im2col(&g, xi, col);
                    matmul(g.cout, rows, cols, w, Trans::No, col, Trans::No, T::zero(), o);
                    for (line, &bias) in o.chunks_mut(cols).zip(b) {
                        line.iter_mut().for_each(|v| *v += bias);
                    }
                },
            );
        out
    }

    /// Returns `dx` (when requested) and accumulates parameter gradients
    /// into `grad`.
    pub fn backward(
        &self,
        x: &[T],
        in_h: usize,
        in_w: usize,
        dy: &[T],
        need_dx: bool,
        grad: &mut Conv2d<T>,
    ) -> Option<Vec<T>> {
        let g = self.geom(in_h, in_w);
        let frames = x.len() / g.in_len();
        let (rows, cols) = (g.col_rows(), g.col_cols());
        let w = self.weight.data();
        let mut dx = if need_dx {
            vec![T::zero(); x.len()]
        } else {
            Vec::new()
        };
        let n_chunks = frames.div_ceil(GRAD_CHUNK);
        let dx_chunk = if need_dx { GRAD_CHUNK * g.in_len() } else { 1 };
        let mut dx_slices: Vec<&mut [T]> = if need_dx {
            dx.chunks_mut(dx_chunk).collect()
        } else {
            (0..n_chunks).map(|_| <&mut [T]>::default()).collect()
        };
        let partials: Vec<(Vec<T>, Vec<T>)> = dx_slices
            .par_iter_mut()
            .enumerate()
            .map(|(c, dxc)| {
                let mut dw = vec![T::zero(); g.cout * rows];
                let mut db = vec![T::zero(); g.cout];
                let mut col = vec![T::zero(); rows * cols];
                let mut dcol = if need_dx {
                    vec![T::zero(); rows * cols]
                } else {
                    Vec::new()
                };
                let lo = c * GRAD_CHUNK;
                let hi = ((c + 1) * GRAD_CHUNK).min(frames);
                for f in lo..hi {
                    let xi = &x[f * g.in_len()..(f + 1) * g.in_len()];
                    let dyi = &dy[f * g.out_len()..(f + 1) * g.out_len()];
                    im2col(&g, xi, &mut col);
                    matmul(g.cout, cols, rows, dyi, Trans::No, &col, Trans::Yes, T::one(), &mut dw);
                    for (acc, line) in db.iter_mut().zip(dyi.chunks(cols)) {
                        *acc += line.iter().copied().sum::<T>();
                    }
                    if need_dx {
                        matmul(rows, g.cout, cols, w, Trans::Yes, dyi, Trans::No, T::zero(), &mut dcol);
                        let off = (f - lo) * g.in_len();
                        col2im(&g, &dcol, &mut dxc[off..off + g.in_len()]);
                    }
                }
                (dw, db)
            })
            .collect();
        for (dw, db) in partials {
            grad.weight.data_mut().iter_mut().zip(dw).for_each(|(a, b)| *a += b);
            grad.bias.data_mut().iter_mut().zip(db).for_each(|(a, b)| *a += b);
        }
        need_dx.then_some(dx)
    }
}

fn relu_in_place<T: Scalar>(x: &mut [T]) {
    x.iter_mut().for_each(|v| *v = v.max(T::zero()));
}

/// Zero the gradient wherever the rectified activation is zero.
fn relu_mask<T: Scalar>(grad: &mut [T], activation: &[T]) {
    grad.iter_mut()
        .zip(activation)
        .for_each(|(g, &a)| {
            if a <= T::zero() {
                *g = T::zero();
            }
        });
}

/// `relu(conv2(relu(conv1(x))) + shortcut(x))`; the shortcut is a strided
/// 1x1 convolution when the shape changes, identity otherwise.
#[derive(Debug, Clone, PartialEq)]
pub struct ResBlock<T> {
    pub conv1: Conv2d<T>,
    pub conv2: Conv2d<T>,
    pub shortcut: Option<Conv2d<T>>,
}

impl<T: Scalar> ResBlock<T> {
    pub fn zeros(cin: usize, cout: usize, stride: usize) -> Self {
        Self {
            conv1: Conv2d::zeros(cin, cout, 3, stride, 1),
            conv2: Conv2d::zeros(cout, cout, 3, 1, 1),
            shortcut: (stride != 1 || cin != cout).then(|| Conv2d::zeros(cin, cout, 1, stride, 0)),
        }
    }

    pub fn init<R: Rng + ?Sized>(cin: usize, cout: usize, stride: usize, rng: &mut R) -> Self {
        Self {
            conv1: Conv2d::init(cin, cout, 3, stride, 1, 1.0, rng),
            // Damped residual branch keeps activations bounded without
            // normalization layers.
            conv2: Conv2d::init(cout, cout, 3, 1, 1, 0.5, rng),
            shortcut: (stride != 1 || cin != cout)
                .then(|| Conv2d::init(cin, cout, 1, stride, 0, 1.0, rng)),
        }
    }
}

struct BlockTrace<T> {
    in_h: usize,
    in_w: usize,
    hidden: Vec<T>,
    out: Vec<T>,
}

/// Saved activations of one backbone pass.
pub(crate) struct BackboneTrace<T> {
    input: Vec<T>,
    stem: Vec<T>,
    blocks: Vec<BlockTrace<T>>,
}

/// Stem convolution followed by residual stages.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone<T> {
    pub stem: Conv2d<T>,
    pub blocks: Vec<ResBlock<T>>,
}

impl<T: Scalar> Backbone<T> {
    /// Stage `i` has `widths[i]` channels; stages after the first halve the
    /// resolution.
    pub fn zeros(widths: &[usize]) -> Self {
        let mut blocks = Vec::with_capacity(widths.len());
        let mut cin = widths[0];
        for (i, &w) in widths.iter().enumerate() {
            blocks.push(ResBlock::zeros(cin, w, if i == 0 { 1 } else { 2 }));
            cin = w;
        }
        Self {
            stem: Conv2d::zeros(1, widths[0], 3, 1, 1),
            blocks,
        }
    }

    pub fn init<R: Rng + ?Sized>(widths: &[usize], rng: &mut R) -> Self {
        let stem = Conv2d::init(1, widths[0], 3, 1, 1, 1.0, rng);
        let mut blocks = Vec::with_capacity(widths.len());
        let mut cin = widths[0];
        for (i, &w) in widths.iter().enumerate() {
            blocks.push(ResBlock::init(cin, w, if i == 0 { 1 } else { 2 }, rng));
            cin = w;
        }
        Self { stem, blocks }
    }

    pub fn out_channels(&self) -> usize {
        self.blocks.last().map_or(self.stem.cout(), |b| b.conv2.cout())
    }

    pub fn out_size(&self, in_h: usize, in_w: usize) -> (usize, usize) {
        let (mut h, mut w) = self.stem.out_size(in_h, in_w);
        for b in &self.blocks {
            (h, w) = b.conv1.out_size(h, w);
        }
        (h, w)
    }

    /// Run `x` (back-to-back single-channel frames) through the network.
    pub(crate) fn forward_traced(&self, x: Vec<T>, in_h: usize, in_w: usize) -> (Vec<T>, BackboneTrace<T>) {
        let mut stem = self.stem.forward(&x, in_h, in_w);
        relu_in_place(&mut stem);
        let (mut h, mut w) = self.stem.out_size(in_h, in_w);
        let mut blocks: Vec<BlockTrace<T>> = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let input = blocks.last().map_or(&stem, |b| &b.out);
            let mut hidden = block.conv1.forward(input, h, w);
            relu_in_place(&mut hidden);
            let (oh, ow) = block.conv1.out_size(h, w);
            let mut out = block.conv2.forward(&hidden, oh, ow);
            match &block.shortcut {
                Some(sc) => {
                    let s = sc.forward(input, h, w);
                    out.iter_mut().zip(s).for_each(|(o, v)| *o += v);
                }
                None => out.iter_mut().zip(input.iter()).for_each(|(o, &v)| *o += v),
            }
            relu_in_place(&mut out);
            blocks.push(BlockTrace {
                in_h: h,
                in_w: w,
                hidden,
                out,
            });
            (h, w) = (oh, ow);
        }
        let output = blocks.last().map_or_else(|| stem.clone(), |b| b.out.clone());
        (
            output,
            BackboneTrace {
                input: x,
                stem,
                blocks,
            },
        )
    }

    pub(crate) fn backward(&self, trace: &BackboneTrace<T>, d_out: Vec<T>, in_h: usize, in_w: usize, grad: &mut Backbone<T>) {
        let mut d = d_out;
        for (i, block) in self.blocks.iter().enumerate().rev() {
            let bt = &trace.blocks[i];
            let input = if i == 0 { &trace.stem } else { &trace.blocks[i - 1].out };
            let g = &mut grad.blocks[i];
            relu_mask(&mut d, &bt.out);
            let (oh, ow) = block.conv1.out_size(bt.in_h, bt.in_w);
            let mut d_hidden = block
                .conv2
                .backward(&bt.hidden, oh, ow, &d, true, &mut g.conv2)
                .expect("dx requested");
            relu_mask(&mut d_hidden, &bt.hidden);
            let mut dx = block
                .conv1
                .backward(input, bt.in_h, bt.in_w, &d_hidden, true, &mut g.conv1)
                .expect("dx requested");
            match (&block.shortcut, g.shortcut.as_mut()) {
                (Some(sc), Some(gs)) => {
                    let ds = sc
                        .backward(input, bt.in_h, bt.in_w, &d, true, gs)
                        .expect("dx requested");
                    dx.iter_mut().zip(ds).for_each(|(a, b)| *a += b);
                }
                _ => dx.iter_mut().zip(&d).for_each(|(a, &b)| *a += b),
            }
            d = dx;
        }
        relu_mask(&mut d, &trace.stem);
        self.stem.backward(&trace.input, in_h, in_w, &d, false, &mut grad.stem);
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct nested-loop convolution.
    fn conv_reference(c: &Conv2d<f64>, x: &[f64], h: usize, w: usize) -> Vec<f64> {
        let k = c.weight.shape()[2];
        let (oh, ow) = c.out_size(h, w);
        let mut out = vec![0.0; c.cout() * oh * ow];
        for co in 0..c.cout() {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = c.bias.data()[co];
                    for ci in 0..c.cin() {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * c.stride + ky) as isize - c.pad as isize;
                                let ix = (ox * c.stride + kx) as isize - c.pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    acc += c.weight.at(&[co, ci, ky, kx])
                                        * x[(ci * h + iy as usize) * w + ix as usize];
                                }
                            }
                        }
                    }
                    out[(co * oh + oy) * ow + ox] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (k, stride, pad) in [(3, 1, 1), (3, 2, 1), (1, 2, 0)] {
            let mut c: Conv2d<f64> = Conv2d::init(2, 3, k, stride, pad, 1.0, &mut rng);
            c.bias.data_mut().iter_mut().enumerate().for_each(|(i, b)| *b = i as f64 * 0.1);
            let (h, w) = (7, 5);
            let x: Vec<f64> = (0..2 * 2 * h * w).map(|i| ((i * 7919) % 13) as f64 / 13.0).collect();
            let got = c.forward(&x, h, w);
            let per = got.len() / 2;
            for f in 0..2 {
                let want = conv_reference(&c, &x[f * 2 * h * w..(f + 1) * 2 * h * w], h, w);
                for (a, b) in got[f * per..(f + 1) * per].iter().zip(&want) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let c: Conv2d<f64> = Conv2d::init(2, 2, 3, 2, 1, 1.0, &mut rng);
        let (h, w) = (6, 5);
        let x: Vec<f64> = (0..3 * 2 * h * w).map(|i| ((i * 31) % 17) as f64 / 17.0 - 0.4).collect();
        let out = c.forward(&x, h, w);
        let probe: Vec<f64> = (0..out.len()).map(|i| ((i * 13) % 7) as f64 - 3.0).collect();
        let loss = |c: &Conv2d<f64>, x: &[f64]| -> f64 {
            c.forward(x, h, w).iter().zip(&probe).map(|(a, b)| a * b).sum()
        };
        let mut grad = Conv2d::zeros(2, 2, 3, 2, 1);
        let dx = c.backward(&x, h, w, &probe, true, &mut grad).unwrap();
        let eps = 1e-6;
        for i in 0..c.weight.len() {
            let mut p = c.clone();
            p.weight.data_mut()[i] += eps;
            let mut m = c.clone();
            m.weight.data_mut()[i] -= eps;
            let fd = (loss(&p, &x) - loss(&m, &x)) / (2.0 * eps);
            assert!((fd - grad.weight.data()[i]).abs() < 1e-6);
        }
        for i in (0..x.len()).step_by(7) {
            let mut xp = x.clone();
            xp[i] += eps;
            let mut xm = x.clone();
            xm[i] -= eps;
            let fd = (loss(&c, &xp) - loss(&c, &xm)) / (2.0 * eps);
            assert!((fd - dx[i]).abs() < 1e-6);
        }
        let mut p = c.clone();
        p.bias.data_mut()[0] += eps;
        let mut m = c.clone();
        m.bias.data_mut()[0] -= eps;
        let fd = (loss(&p, &x) - loss(&m, &x)) / (2.0 * eps);
        assert!((fd - grad.bias.data()[0]).abs() < 1e-6);
    }

    #[test]
    fn backbone_output_geometry() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b: Backbone<f32> = Backbone::init(&[4, 8, 16], &mut rng);
        assert_eq!(b.out_size(64, 44), (16, 11));
        assert_eq!(b.out_channels(), 16);
    }

    #[test]
    fn backbone_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut bb: Backbone<f64> = Backbone::init(&[2, 3, 4], &mut rng);
        // Zero biases put dead units exactly on the ReLU corner.
        randomize_biases(&mut bb, &mut rng);
        let (h, w) = (16, 12);
        let frames = 3;
        let x: Vec<f64> = (0..frames * h * w).map(|_| rng.random::<f64>()).collect();
        let (oh, ow) = bb.out_size(h, w);
        let probe: Vec<f64> = (0..frames * 4 * oh * ow).map(|_| rng.random::<f64>() - 0.5).collect();
        let f = |b: &Backbone<f64>| -> f64 {
            let (y, _) = b.forward_traced(x.clone(), h, w);
            y.iter().zip(&probe).map(|(a, p)| a * p).sum()
        };
        let (_, trace) = bb.forward_traced(x.clone(), h, w);
        let mut grad = Backbone::zeros(&[2, 3, 4]);
        bb.backward(&trace, probe.clone(), h, w, &mut grad);
        let eps = 1e-6;
        let check = |name: &str, analytic: &[f64], get: &dyn Fn(&mut Backbone<f64>) -> &mut Tensor<f64>| {
            for (i, &a) in analytic.iter().enumerate() {
                let mut p = bb.clone();
                get(&mut p).data_mut()[i] += eps;
                let mut m = bb.clone();
                get(&mut m).data_mut()[i] -= eps;
                let fd = (f(&p) - f(&m)) / (2.0 * eps);
                assert!((fd - a).abs() <= 1e-5 * (1.0 + a.abs()), "{name}[{i}]: {a} vs {fd}");
            }
        };
        check("block0.conv1.bias", grad.blocks[0].conv1.bias.data(), &|b| &mut b.blocks[0].conv1.bias);
        check("block0.conv2.bias", grad.blocks[0].conv2.bias.data(), &|b| &mut b.blocks[0].conv2.bias);
        check("block0.conv1.weight", grad.blocks[0].conv1.weight.data(), &|b| &mut b.blocks[0].conv1.weight);
        check("block1.conv1.weight", grad.blocks[1].conv1.weight.data(), &|b| &mut b.blocks[1].conv1.weight);
        check("stem.weight", grad.stem.weight.data(), &|b| &mut b.stem.weight);
    }

    pub(crate) fn randomize_biases<R: Rng>(bb: &mut Backbone<f64>, rng: &mut R) {
        let mut convs = vec![&mut bb.stem];
        for b in &mut bb.blocks {
            convs.push(&mut b.conv1);
            convs.push(&mut b.conv2);
            if let Some(sc) = &mut b.shortcut {
                convs.push(sc);
            }
        }
        for c in convs {
            c.bias.data_mut().iter_mut().for_each(|v| *v = rng.random::<f64>() * 0.2 - 0.1);
        }
    }
}
