//! Local texture complexity: variance pooling, median smoothing, blending
//! and the mean-variance-pooling texture loss.
//!
//! Borders use replicate padding throughout. Windows are the standard
//! `kernel x kernel` neighbourhood centred on each position.

use crate::autodiff::{Graph, Var};
use crate::error::{invalid, BasnError, Result};
use crate::image::{AttentionMap, FloatImage, TextureFreeImage};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DEFAULT_KERNEL: usize = 7;

pub(crate) fn check_kernel(kernel: usize, h: usize, w: usize) -> Result<()> {
    if kernel.is_multiple_of(2) {
        return Err(invalid(format!("kernel {kernel} must be odd")));
    }
    if kernel > h.min(w) {
        return Err(invalid(format!(
            "kernel {kernel} larger than {h}x{w} input"
        )));
    }
    Ok(())
}

#[inline]
fn clamp_index(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

/// Separable box mean with replicate padding over one `h x w` plane.
pub(crate) fn box_mean_replicate<T: Scalar>(x: &[T], h: usize, w: usize, kernel: usize) -> Vec<T> {
    let r = (kernel / 2) as isize;
    let inv = T::one() / T::from_usize(kernel).unwrap();
    let mut rows = vec![T::zero(); h * w];
    for y in 0..h {
        let line = &x[y * w..(y + 1) * w];
        for xx in 0..w {
            let mut acc = T::zero();
            for d in -r..=r {
                acc += line[clamp_index(xx as isize + d, w)];
            }
            rows[y * w + xx] = acc * inv;
        }
    }
    let mut out = vec![T::zero(); h * w];
    for y in 0..h {
        for d in -r..=r {
            let src = clamp_index(y as isize + d, h);
            for xx in 0..w {
                out[y * w + xx] += rows[src * w + xx];
            }
        }
        for v in &mut out[y * w..(y + 1) * w] {
            *v *= inv;
        }
    }
    out
}

/// Adjoint of [`box_mean_replicate`].
pub(crate) fn box_mean_replicate_transpose<T: Scalar>(
    g: &[T],
    h: usize,
    w: usize,
    kernel: usize,
) -> Vec<T> {
    let r = (kernel / 2) as isize;
    let inv = T::one() / T::from_usize(kernel).unwrap();
    let mut cols = vec![T::zero(); h * w];
    for y in 0..h {
        for d in -r..=r {
            let dst = clamp_index(y as isize + d, h);
            for xx in 0..w {
                cols[dst * w + xx] += g[y * w + xx] * inv;
            }
        }
    }
    let mut out = vec![T::zero(); h * w];
    for y in 0..h {
        for xx in 0..w {
            let v = cols[y * w + xx] * inv;
            for d in -r..=r {
                out[y * w + clamp_index(xx as isize + d, w)] += v;
            }
        }
    }
    out
}

/// Windowed variance `E(X^2) - E(X)^2` of a rank-2 `[H, W]` map; output has
/// the same shape and is non-negative.
pub fn var_pool_2d<T: Scalar>(x: &Tensor<T>, kernel: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.len() != 2 {
        return Err(BasnError::ShapeMismatch(format!("expected [H, W], got {s:?}")));
    }
    let (h, w) = (s[0], s[1]);
    check_kernel(kernel, h, w)?;
    if !x.is_finite() {
        return Err(invalid("var_pool_2d input is not finite"));
    }
    let mut g = Graph::new();
    let v = g.constant(x.clone().reshape(&[1, 1, h, w])?);
    let out = g.var_pool2d(v, kernel);
    g.value(out).clone().reshape(&[h, w])
}

/// Median filter per channel (replicate padding).
pub fn median_smooth<T: Scalar>(img: &FloatImage<T>, kernel: usize) -> Result<TextureFreeImage<T>> {
    check_kernel(kernel, img.height(), img.width())?;
    let (c, h, w) = (img.channels(), img.height(), img.width());
    let r = (kernel / 2) as isize;
    let mut out = Vec::with_capacity(c * h * w);
    let mut window = Vec::with_capacity(kernel * kernel);
    for ch in 0..c {
        let plane = img.plane(ch);
        for y in 0..h {
            for x in 0..w {
                window.clear();
                for dy in -r..=r {
                    let yy = clamp_index(y as isize + dy, h);
                    for dx in -r..=r {
                        window.push(plane[yy * w + clamp_index(x as isize + dx, w)]);
                    }
                }
                let mid = window.len() / 2;
                let (_, m, _) = window
                    .select_nth_unstable_by(mid, |a, b| a.partial_cmp(b).expect("finite pixels"));
                out.push(*m);
            }
        }
    }
    Ok(TextureFreeImage(FloatImage::new(c, h, w, out)?))
}

/// `A * C_theta + (1 - A) * C`, attention broadcast over channels.
pub fn blend<T: Scalar>(
    cover: &FloatImage<T>,
    target: &TextureFreeImage<T>,
    attention: &AttentionMap<T>,
) -> Result<FloatImage<T>> {
    let t = target.image();
    if !cover.same_shape(t)
        || attention.height() != cover.height()
        || attention.width() != cover.width()
    {
        return Err(BasnError::ShapeMismatch(
            "blend: cover, target and attention disagree in shape".into(),
        ));
    }
    let plane = cover.height() * cover.width();
    let a = attention.values();
    let data = cover
        .data()
        .iter()
        .zip(t.data())
        .enumerate()
        .map(|(i, (&c, &ct))| {
            let w = a[i % plane];
            (w * ct + (T::one() - w) * c).max(T::zero()).min(T::one())
        })
        .collect();
    FloatImage::new(cover.channels(), cover.height(), cover.width(), data)
}

/// Graph form of the texture loss: mean of variance pooling over every
/// position and channel of an `[N, C, H, W]` node.
pub fn texture_loss_node<T: Scalar>(g: &mut Graph<T>, x: Var, kernel: usize) -> Var {
    let v = g.var_pool2d(x, kernel);
    g.mean_all(v)
}

pub fn texture_loss<T: Scalar>(img: &FloatImage<T>, kernel: usize) -> Result<T> {
    Ok(texture_loss_with_grad(img, kernel)?.0)
}

/// Texture loss and its gradient with respect to every pixel.
pub fn texture_loss_with_grad<T: Scalar>(
    img: &FloatImage<T>,
    kernel: usize,
) -> Result<(T, FloatImage<T>)> {
    check_kernel(kernel, img.height(), img.width())?;
    if !img.data().iter().all(|v| v.is_finite()) {
        return Err(invalid("texture_loss input is not finite"));
    }
    let mut g = Graph::new();
    let x = g.variable(img.to_tensor());
    let loss = texture_loss_node(&mut g, x, kernel);
    let grads = g.backward(loss);
    let grad = FloatImage::from_tensor(grads.get(x).expect("input gradient"))?;
    Ok((g.scalar_value(loss), grad))
}

/// Whole-image variance (population) and its gradient; the global
/// counterpart of variance pooling.
pub fn global_variance_with_grad<T: Scalar>(img: &FloatImage<T>) -> (T, FloatImage<T>) {
    let n = T::from_usize(img.data().len()).unwrap();
    let mean = img.data().iter().copied().sum::<T>() / n;
    let var = img.data().iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    let two = T::lit(2.0);
    let grad = img.data().iter().map(|&v| two * (v - mean) / n).collect();
    (
        var,
        FloatImage::new(img.channels(), img.height(), img.width(), grad).unwrap(),
    )
}
