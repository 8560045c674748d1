//! Network building blocks with explicit forward/backward passes.
//!
//! Convolution is im2col + GEMM so the whole batch reduces to one matrix
//! product per layer (ndarray's `dot` dispatches to matrixmultiply).
//! Everything is generic over the float type: production runs in f32,
//! gradient checks run the same code in f64.

use ndarray::{Array1, Array2, Array4, NdFloat};
use rand_distr::{Distribution, Normal};

use crate::rng::Rng;

/// 2-D convolution with square kernels and symmetric zero padding k/2.
#[derive(Debug, Clone)]
pub struct Conv2d<F> {
    /// (out_channels, in_channels, k, k)
    pub weight: Array4<F>,
    pub bias: Array1<F>,
    pub stride: usize,
    pub padding: usize,
}

/// Forward-pass byproducts needed by the backward pass.
pub struct ConvCache<F> {
    cols: Array2<F>,
    input_dim: (usize, usize, usize, usize),
    out_hw: (usize, usize),
}

impl<F: NdFloat> Conv2d<F> {
    /// He-normal initialization; draws are made in f64 so identical seeds
    /// initialize f32 and f64 models to the same values.
    pub fn new(in_c: usize, out_c: usize, k: usize, stride: usize, rng: &mut Rng) -> Self {
        let std = (2.0 / (in_c * k * k) as f64).sqrt();
        let dist = Normal::new(0.0, std).unwrap();
        let weight =
            Array4::from_shape_simple_fn((out_c, in_c, k, k), || F::from(dist.sample(rng)).unwrap());
        Conv2d {
            weight,
            bias: Array1::zeros(out_c),
            stride,
            padding: k / 2,
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.weight.dim().2;
        let oh = (h + 2 * self.padding - k) / self.stride + 1;
        let ow = (w + 2 * self.padding - k) / self.stride + 1;
        (oh, ow)
    }

    fn im2col(&self, x: &Array4<F>) -> (Array2<F>, (usize, usize)) {
        let (n_batch, in_c, h, w) = x.dim();
        let k = self.weight.dim().2;
        let (oh, ow) = self.out_hw(h, w);
        let row_len = in_c * k * k;
        let p = self.padding as isize;

        let mut cols = Array2::<F>::zeros((n_batch * oh * ow, row_len));
        let xs = x.as_slice().expect("conv input must be standard layout");
        let cs = cols.as_slice_mut().unwrap();
        for n in 0..n_batch {
            for oi in 0..oh {
                for oj in 0..ow {
                    let row_base = ((n * oh + oi) * ow + oj) * row_len;
                    let i0 = (oi * self.stride) as isize - p;
                    let j0 = (oj * self.stride) as isize - p;
                    for c in 0..in_c {
                        let x_base = (n * in_c + c) * h * w;
                        for ki in 0..k {
                            let ii = i0 + ki as isize;
                            let col_base = row_base + (c * k + ki) * k;
                            if ii < 0 || ii >= h as isize {
                                continue; // zero padding row
                            }
                            let x_row = x_base + ii as usize * w;
                            for kj in 0..k {
                                let jj = j0 + kj as isize;
                                if jj >= 0 && jj < w as isize {
                                    cs[col_base + kj] = xs[x_row + jj as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        (cols, (oh, ow))
    }

    pub fn forward(&self, x: &Array4<F>) -> (Array4<F>, ConvCache<F>) {
        let (n_batch, _, _, _) = x.dim();
        let (out_c, in_c, k, _) = self.weight.dim();
        let (cols, (oh, ow)) = self.im2col(x);

        let w_mat = self
            .weight
            .view()
            .into_shape_with_order((out_c, in_c * k * k))
            .unwrap();
        // (rows, row_len) x (row_len, out_c)
        let mut out_mat = cols.dot(&w_mat.t());
        for mut row in out_mat.rows_mut() {
            row += &self.bias;
        }
        let out = out_mat
            .into_shape_with_order((n_batch, oh, ow, out_c))
            .unwrap()
            .permuted_axes([0, 3, 1, 2])
            .as_standard_layout()
            .to_owned();
        let cache = ConvCache {
            cols,
            input_dim: x.dim(),
            out_hw: (oh, ow),
        };
        (out, cache)
    }

    /// Returns (grad_input, grad_weight, grad_bias).
    pub fn backward(
        &self,
        cache: &ConvCache<F>,
        grad_out: &Array4<F>,
    ) -> (Array4<F>, Array4<F>, Array1<F>) {
        let (n_batch, in_c, h, w) = cache.input_dim;
        let (out_c, _, k, _) = self.weight.dim();
        let (oh, ow) = cache.out_hw;
        let row_len = in_c * k * k;

        // (N, out_c, oh, ow) -> (rows, out_c)
        let g_mat = grad_out
            .view()
            .permuted_axes([0, 2, 3, 1])
            .as_standard_layout()
            .into_shape_with_order((n_batch * oh * ow, out_c))
            .unwrap()
            .to_owned();

        let grad_b = g_mat.sum_axis(ndarray::Axis(0));
        let grad_w_mat = g_mat.t().dot(&cache.cols);
        let grad_w = grad_w_mat
            .into_shape_with_order((out_c, in_c, k, k))
            .unwrap();

        let w_mat = self
            .weight
            .view()
            .into_shape_with_order((out_c, row_len))
            .unwrap();
        let grad_cols = g_mat.dot(&w_mat);

        // col2im: scatter-add column gradients back onto the input grid.
        let mut grad_in = Array4::<F>::zeros((n_batch, in_c, h, w));
        let gs = grad_cols.as_slice().unwrap();
        let gi = grad_in.as_slice_mut().unwrap();
        let p = self.padding as isize;
        for n in 0..n_batch {
            for oi in 0..oh {
                for oj in 0..ow {
                    let row_base = ((n * oh + oi) * ow + oj) * row_len;
                    let i0 = (oi * self.stride) as isize - p;
                    let j0 = (oj * self.stride) as isize - p;
                    for c in 0..in_c {
                        let x_base = (n * in_c + c) * h * w;
                        for ki in 0..k {
                            let ii = i0 + ki as isize;
                            if ii < 0 || ii >= h as isize {
                                continue;
                            }
                            let x_row = x_base + ii as usize * w;
                            let col_base = row_base + (c * k + ki) * k;
                            for kj in 0..k {
                                let jj = j0 + kj as isize;
                                if jj >= 0 && jj < w as isize {
                                    gi[x_row + jj as usize] =
                                        gi[x_row + jj as usize] + gs[col_base + kj];
                                }
                            }
                        }
                    }
                }
            }
        }
        (grad_in, grad_w, grad_b)
    }
}

pub fn relu_forward<F: NdFloat>(x: &Array4<F>) -> (Array4<F>, Array4<u8>) {
    let mask = x.mapv(|v| u8::from(v > F::zero()));
    let out = x.mapv(|v| if v > F::zero() { v } else { F::zero() });
    (out, mask)
}

pub fn relu_backward<F: NdFloat>(mask: &Array4<u8>, grad: &Array4<F>) -> Array4<F> {
    let mut out = grad.clone();
    out.zip_mut_with(mask, |g, &m| {
        if m == 0 {
            *g = F::zero();
        }
    });
    out
}

/// Global average pool: (N, C, h, w) -> (N, C).
pub fn gap_forward<F: NdFloat>(x: &Array4<F>) -> Array2<F> {
    let (n, c, h, w) = x.dim();
    let scale = F::from(1.0 / (h * w) as f64).unwrap();
    let mut out = Array2::zeros((n, c));
    for i in 0..n {
        for ch in 0..c {
            let mut acc = F::zero();
            for y in 0..h {
                for xx in 0..w {
                    acc = acc + x[(i, ch, y, xx)];
                }
            }
            out[(i, ch)] = acc * scale;
        }
    }
    out
}

pub fn gap_backward<F: NdFloat>(grad: &Array2<F>, h: usize, w: usize) -> Array4<F> {
    let (n, c) = grad.dim();
    let scale = F::from(1.0 / (h * w) as f64).unwrap();
    let mut out = Array4::zeros((n, c, h, w));
    for i in 0..n {
        for ch in 0..c {
            let g = grad[(i, ch)] * scale;
            for y in 0..h {
                for xx in 0..w {
                    out[(i, ch, y, xx)] = g;
                }
            }
        }
    }
    out
}

/// Position-shared linear map: the 1x1 classifier applied either to pooled
/// feature vectors or independently at every spatial position.
#[derive(Debug, Clone)]
pub struct Linear<F> {
    /// (out, in)
    pub weight: Array2<F>,
    pub bias: Array1<F>,
}

impl<F: NdFloat> Linear<F> {
    pub fn new(in_dim: usize, out_dim: usize, rng: &mut Rng) -> Self {
        let std = (1.0 / in_dim as f64).sqrt();
        let dist = Normal::new(0.0, std).unwrap();
        let weight =
            Array2::from_shape_simple_fn((out_dim, in_dim), || F::from(dist.sample(rng)).unwrap());
        Linear {
            weight,
            bias: Array1::zeros(out_dim),
        }
    }

    /// (N, C) -> (N, out)
    pub fn forward_vec(&self, x: &Array2<F>) -> Array2<F> {
        let mut out = x.dot(&self.weight.t());
        for mut row in out.rows_mut() {
            row += &self.bias;
        }
        out
    }

    /// Returns (grad_input, grad_weight, grad_bias) for the vector path.
    pub fn backward_vec(
        &self,
        x: &Array2<F>,
        grad_out: &Array2<F>,
    ) -> (Array2<F>, Array2<F>, Array1<F>) {
        let grad_w = grad_out.t().dot(x);
        let grad_b = grad_out.sum_axis(ndarray::Axis(0));
        let grad_x = grad_out.dot(&self.weight);
        (grad_x, grad_w, grad_b)
    }

    /// (N, C, h, w) -> (N, out, h, w), same weights at every position.
    pub fn forward_map(&self, x: &Array4<F>) -> Array4<F> {
        let (n, c, h, w) = x.dim();
        let out_dim = self.weight.dim().0;
        let mut out = Array4::zeros((n, out_dim, h, w));
        for i in 0..n {
            let feat = x
                .index_axis(ndarray::Axis(0), i)
                .into_shape_with_order((c, h * w))
                .unwrap()
                .to_owned();
            let mut logits = self.weight.dot(&feat);
            for (mut row, &b) in logits.rows_mut().into_iter().zip(self.bias.iter()) {
                row += b;
            }
            out.index_axis_mut(ndarray::Axis(0), i).assign(
                &logits.into_shape_with_order((out_dim, h, w)).unwrap(),
            );
        }
        out
    }

    /// Returns (grad_input, grad_weight, grad_bias) for the map path.
    pub fn backward_map(
        &self,
        x: &Array4<F>,
        grad_out: &Array4<F>,
    ) -> (Array4<F>, Array2<F>, Array1<F>) {
        let (n, c, h, w) = x.dim();
        let out_dim = self.weight.dim().0;
        let mut grad_w = Array2::<F>::zeros(self.weight.dim());
        let mut grad_b = Array1::<F>::zeros(out_dim);
        let mut grad_x = Array4::<F>::zeros((n, c, h, w));
        for i in 0..n {
            let feat = x
                .index_axis(ndarray::Axis(0), i)
                .into_shape_with_order((c, h * w))
                .unwrap()
                .to_owned();
            let g = grad_out
                .index_axis(ndarray::Axis(0), i)
                .into_shape_with_order((out_dim, h * w))
                .unwrap()
                .to_owned();
            grad_w = grad_w + g.dot(&feat.t());
            grad_b = grad_b + g.sum_axis(ndarray::Axis(1));
            let gx = self.weight.t().dot(&g);
            grad_x
                .index_axis_mut(ndarray::Axis(0), i)
                .assign(&gx.into_shape_with_order((c, h, w)).unwrap());
        }
        (grad_x, grad_w, grad_b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;
    use ndarray::Axis;

    fn fixture_input(n: usize, c: usize, h: usize, w: usize) -> Array4<f64> {
        Array4::from_shape_fn((n, c, h, w), |(a, b, y, x)| {
            ((a * 31 + b * 17 + y * 5 + x) as f64 * 0.7).sin() * 0.5
        })
    }

    #[test]
    fn conv_matches_naive_convolution() {
        let mut rng = rng_for(3, "conv-naive");
        let conv = Conv2d::<f64>::new(2, 3, 3, 2, &mut rng);
        let x = fixture_input(2, 2, 7, 6);
        let (out, _) = conv.forward(&x);
        let (oh, ow) = conv.out_hw(7, 6);
        assert_eq!(out.dim(), (2, 3, oh, ow));

        // Direct quintuple-loop oracle.
        for n in 0..2 {
            for oc in 0..3 {
                for oi in 0..oh {
                    for oj in 0..ow {
                        let mut acc = conv.bias[oc];
                        for ic in 0..2 {
                            for ki in 0..3 {
                                for kj in 0..3 {
                                    let ii = (oi * 2 + ki) as isize - 1;
                                    let jj = (oj * 2 + kj) as isize - 1;
                                    if ii >= 0 && ii < 7 && jj >= 0 && jj < 6 {
                                        acc += conv.weight[(oc, ic, ki, kj)]
                                            * x[(n, ic, ii as usize, jj as usize)];
                                    }
                                }
                            }
                        }
                        let got = out[(n, oc, oi, oj)];
                        assert!((got - acc).abs() < 1e-12, "mismatch at {n},{oc},{oi},{oj}");
                    }
                }
            }
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = rng_for(5, "conv-fd");
        let mut conv = Conv2d::<f64>::new(2, 2, 3, 1, &mut rng);
        let x = fixture_input(1, 2, 5, 5);
        // Scalar objective: weighted sum of outputs.
        let probe = Array4::from_shape_fn((1, 2, 5, 5), |(_, c, i, j)| {
            ((c * 13 + i * 3 + j) as f64).cos()
        });
        let loss = |c: &Conv2d<f64>, x: &Array4<f64>| -> f64 {
            let (out, _) = c.forward(x);
            (&out * &probe).sum()
        };

        let (_, cache) = conv.forward(&x);
        let (grad_in, grad_w, grad_b) = conv.backward(&cache, &probe);

        let h = 1e-6;
        // Probe a scattering of weight coordinates.
        for &idx in &[(0, 0, 0, 0), (1, 1, 2, 2), (0, 1, 1, 0)] {
            let orig = conv.weight[idx];
            conv.weight[idx] = orig + h;
            let up = loss(&conv, &x);
            conv.weight[idx] = orig - h;
            let down = loss(&conv, &x);
            conv.weight[idx] = orig;
            let fd = (up - down) / (2.0 * h);
            assert!((fd - grad_w[idx]).abs() / fd.abs().max(1.0) < 1e-4, "weight {idx:?}");
        }
        for bi in 0..2 {
            let orig = conv.bias[bi];
            conv.bias[bi] = orig + h;
            let up = loss(&conv, &x);
            conv.bias[bi] = orig - h;
            let down = loss(&conv, &x);
            conv.bias[bi] = orig;
            let fd = (up - down) / (2.0 * h);
            assert!((fd - grad_b[bi]).abs() / fd.abs().max(1.0) < 1e-4, "bias {bi}");
        }
        let mut x2 = x.clone();
        for &idx in &[(0, 0, 0, 0), (0, 1, 3, 2), (0, 0, 4, 4)] {
            let orig = x2[idx];
            x2[idx] = orig + h;
            let up = loss(&conv, &x2);
            x2[idx] = orig - h;
            let down = loss(&conv, &x2);
            x2[idx] = orig;
            let fd = (up - down) / (2.0 * h);
            assert!((fd - grad_in[idx]).abs() / fd.abs().max(1.0) < 1e-4, "input {idx:?}");
        }
    }

    #[test]
    fn gap_is_the_spatial_mean() {
        let x = fixture_input(2, 3, 4, 5);
        let pooled = gap_forward(&x);
        for n in 0..2 {
            for c in 0..3 {
                let mean = x
                    .index_axis(Axis(0), n)
                    .index_axis(Axis(0), c)
                    .mean()
                    .unwrap();
                assert!((pooled[(n, c)] - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn linear_map_and_vec_paths_agree_on_pooled_input() {
        let mut rng = rng_for(7, "linear");
        let lin = Linear::<f64>::new(3, 4, &mut rng);
        let x = fixture_input(2, 3, 4, 4);
        // classifier(GAP(x)) == GAP(classifier applied per position):
        // both orders of two linear maps.
        let via_vec = lin.forward_vec(&gap_forward(&x));
        let map = lin.forward_map(&x);
        let via_map = gap_forward(&map);
        for (a, b) in via_vec.iter().zip(via_map.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn relu_zeroes_gradients_where_inactive() {
        let x = Array4::from_shape_vec((1, 1, 1, 4), vec![-1.0, 2.0, -3.0, 4.0]).unwrap();
        let (out, mask) = relu_forward(&x);
        assert_eq!(out.as_slice().unwrap(), &[0.0, 2.0, 0.0, 4.0]);
        let grad = Array4::from_elem((1, 1, 1, 4), 1.0);
        let gin = relu_backward(&mask, &grad);
        assert_eq!(gin.as_slice().unwrap(), &[0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn linear_backward_matches_finite_differences() {
        let mut rng = rng_for(9, "linear-fd");
        let mut lin = Linear::<f64>::new(3, 2, &mut rng);
        let x = Array2::from_shape_fn((4, 3), |(i, j)| ((i * 3 + j) as f64 * 0.3).cos());
        let probe = Array2::from_shape_fn((4, 2), |(i, j)| ((i + j) as f64 * 0.9).sin());
        let loss =
            |l: &Linear<f64>, x: &Array2<f64>| -> f64 { (&l.forward_vec(x) * &probe).sum() };
        let (gx, gw, gb) = lin.backward_vec(&x, &probe);
        let h = 1e-6;
        for &idx in &[(0, 0), (1, 2)] {
            let orig = lin.weight[idx];
            lin.weight[idx] = orig + h;
            let up = loss(&lin, &x);
            lin.weight[idx] = orig - h;
            let down = loss(&lin, &x);
            lin.weight[idx] = orig;
            assert!(((up - down) / (2.0 * h) - gw[idx]).abs() < 1e-6);
        }
        let orig = lin.bias[0];
        lin.bias[0] = orig + h;
        let up = loss(&lin, &x);
        lin.bias[0] = orig - h;
        let down = loss(&lin, &x);
        lin.bias[0] = orig;
        assert!(((up - down) / (2.0 * h) - gb[0]).abs() < 1e-6);
        let mut x2 = x.clone();
        let orig = x2[(2, 1)];
        x2[(2, 1)] = orig + h;
        let up = loss(&lin, &x2);
        x2[(2, 1)] = orig - h;
        let down = loss(&lin, &x2);
        assert!(((up - down) / (2.0 * h) - gx[(2, 1)]).abs() < 1e-6);
    }

    #[test]
    fn map_path_equals_per_pixel_vec_path() {
        let mut rng = rng_for(11, "map-vec");
        let lin = Linear::<f64>::new(3, 5, &mut rng);
        let x = fixture_input(1, 3, 2, 2);
        let map = lin.forward_map(&x);
        for i in 0..2 {
            for j in 0..2 {
                let feat = Array2::from_shape_fn((1, 3), |(_, c)| x[(0, c, i, j)]);
                let v = lin.forward_vec(&feat);
                for o in 0..5 {
                    assert!((map[(0, o, i, j)] - v[(0, o)]).abs() < 1e-12);
                }
            }
        }
    }
}
