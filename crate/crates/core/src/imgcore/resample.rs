//! Catmull-Rom bicubic sampling with mirror (reflect) boundary handling.

use super::image::{clamp_unit, Image};

/// Reflects an integer coordinate into `[0, n)` without repeating the border
/// sample (`-1 -> 1`, `n -> n - 2`).
#[inline]
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut m = i.rem_euclid(period);
    if m >= n as isize {
        m = period - m;
    }
    m as usize
}

/// Catmull-Rom (a = -0.5) weights for the four taps at offsets -1, 0, 1, 2
/// around `floor(x)`, given the fractional part `t`.
#[inline]
pub fn cubic_weights(t: f32) -> [f32; 4] {
    let a = -0.5f32;
    let w = |d: f32| -> f32 {
        let d = d.abs();
        if d <= 1.0 {
            ((a + 2.0) * d - (a + 3.0)) * d * d + 1.0
        } else if d < 2.0 {
            ((a * d - 5.0 * a) * d + 8.0 * a) * d - 4.0 * a
        } else {
            0.0
        }
    };
    [w(1.0 + t), w(t), w(1.0 - t), w(2.0 - t)]
}

/// Samples all channels at continuous position `(sy, sx)` into `out`.
pub fn sample_bicubic(img: &Image, sy: f32, sx: f32, out: &mut [f32]) {
    let (h, w, c) = (img.height(), img.width(), img.channels());
    let fy = sy.floor();
    let fx = sx.floor();
    let wy = cubic_weights(sy - fy);
    let wx = cubic_weights(sx - fx);
    let (iy, ix) = (fy as isize, fx as isize);
    let data = img.data();
    out[..c].iter_mut().for_each(|v| *v = 0.0);
    for (dy, &wyv) in wy.iter().enumerate() {
        if wyv == 0.0 {
            continue;
        }
        let yy = reflect_index(iy + dy as isize - 1, h);
        for (dx, &wxv) in wx.iter().enumerate() {
            if wxv == 0.0 {
                continue;
            }
            let xx = reflect_index(ix + dx as isize - 1, w);
            let base = (yy * w + xx) * c;
            let wgt = wyv * wxv;
            for ch in 0..c {
                out[ch] += wgt * data[base + ch];
            }
        }
    }
}

/// Bilinear sampling with reflect boundary, used by the blur corruptions.
pub fn sample_bilinear(img: &Image, sy: f32, sx: f32, out: &mut [f32]) {
    let (h, w, c) = (img.height(), img.width(), img.channels());
    let fy = sy.floor();
    let fx = sx.floor();
    let ty = sy - fy;
    let tx = sx - fx;
    let (iy, ix) = (fy as isize, fx as isize);
    let data = img.data();
    out[..c].iter_mut().for_each(|v| *v = 0.0);
    for (dy, wyv) in [(0, 1.0 - ty), (1, ty)] {
        if wyv == 0.0 {
            continue;
        }
        let yy = reflect_index(iy + dy, h);
        for (dx, wxv) in [(0, 1.0 - tx), (1, tx)] {
            if wxv == 0.0 {
                continue;
            }
            let xx = reflect_index(ix + dx, w);
            let base = (yy * w + xx) * c;
            for ch in 0..c {
                out[ch] += wyv * wxv * data[base + ch];
            }
        }
    }
}

/// Builds an output image by inverse-mapping every destination pixel through
/// `map(y, x) -> (src_y, src_x)` and sampling bicubically.
pub fn warp(
    img: &Image,
    out_h: usize,
    out_w: usize,
    map: impl Fn(f32, f32) -> (f32, f32),
) -> Image {
    let c = img.channels();
    let mut data = vec![0.0f32; out_h * out_w * c];
    let mut px = [0.0f32; 3];
    for y in 0..out_h {
        for x in 0..out_w {
            let (sy, sx) = map(y as f32, x as f32);
            sample_bicubic(img, sy, sx, &mut px);
            let base = (y * out_w + x) * c;
            for ch in 0..c {
                data[base + ch] = clamp_unit(px[ch]);
            }
        }
    }
    Image::from_parts(out_h, out_w, c, data)
}

/// Bicubic resize to `out_h × out_w` using pixel-center alignment.
pub fn resize(img: &Image, out_h: usize, out_w: usize) -> Image {
    if out_h == img.height() && out_w == img.width() {
        return img.clone();
    }
    let sy = img.height() as f32 / out_h as f32;
    let sx = img.width() as f32 / out_w as f32;
    warp(img, out_h, out_w, |y, x| {
        ((y + 0.5) * sy - 0.5, (x + 0.5) * sx - 0.5)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_does_not_repeat_border() {
        let idx: Vec<usize> = (-3..8).map(|i| reflect_index(i, 5)).collect();
        assert_eq!(idx, vec![3, 2, 1, 0, 1, 2, 3, 4, 3, 2, 1]);
        assert_eq!(reflect_index(-4, 1), 0);
    }

    #[test]
    fn weights_partition_unity_and_interpolate() {
        for t in [0.0f32, 0.1, 0.25, 0.5, 0.9] {
            let s: f32 = cubic_weights(t).iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
        assert_eq!(cubic_weights(0.0), [0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn same_size_resize_is_exact() {
        let img = Image::new(2, 2, 1, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        assert_eq!(resize(&img, 2, 2), img);
    }
}
