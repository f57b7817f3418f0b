use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::image::{clamp_unit, Image};
use super::resample::{resize, warp};
use crate::error::{Error, Result};

/// Side fraction kept by a corner/center crop on small images.
pub const CROP_RATIO: f32 = 0.875;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TransformKind {
    Identity,
    Rotate,
    Zoom,
    Color,
    AutoContrast,
    Sharpness,
    HFlip,
    Crop,
}

/// One test-time transform.
///
/// `param` is degrees (counter-clockwise) for `Rotate`, the scale factor for
/// `Zoom`, the blend factor for `Color`/`Sharpness`, and the crop position
/// for `Crop` (0 center, 1 top-left, 2 top-right, 3 bottom-left,
/// 4 bottom-right). It is ignored by the other kinds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transform {
    pub kind: TransformKind,
    pub param: f32,
}

impl Transform {
    pub const IDENTITY: Transform = Transform {
        kind: TransformKind::Identity,
        param: 0.0,
    };
    pub const HFLIP: Transform = Transform {
        kind: TransformKind::HFlip,
        param: 0.0,
    };

    pub fn new(kind: TransformKind, param: f32) -> Result<Self> {
        let t = Transform { kind, param };
        t.validate()?;
        Ok(t)
    }

    pub fn rotate(degrees: f32) -> Self {
        Transform {
            kind: TransformKind::Rotate,
            param: degrees,
        }
    }

    pub fn zoom(factor: f32) -> Self {
        Transform {
            kind: TransformKind::Zoom,
            param: factor,
        }
    }

    pub fn color(factor: f32) -> Self {
        Transform {
            kind: TransformKind::Color,
            param: factor,
        }
    }

    pub fn sharpness(factor: f32) -> Self {
        Transform {
            kind: TransformKind::Sharpness,
            param: factor,
        }
    }

    pub fn auto_contrast() -> Self {
        Transform {
            kind: TransformKind::AutoContrast,
            param: 0.0,
        }
    }

    pub fn crop(position: u8) -> Self {
        Transform {
            kind: TransformKind::Crop,
            param: f32::from(position),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.param;
        if !p.is_finite() {
            return Err(Error::param(format!("{self}: non-finite parameter")));
        }
        let ok = match self.kind {
            TransformKind::Rotate => (-180.0..=180.0).contains(&p),
            TransformKind::Zoom => p > 0.0,
            TransformKind::Color | TransformKind::Sharpness => p >= 0.0,
            TransformKind::Crop => p.fract() == 0.0 && (0.0..=4.0).contains(&p),
            TransformKind::Identity | TransformKind::AutoContrast | TransformKind::HFlip => true,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::param(format!("{self}: parameter out of range")))
        }
    }

    fn uses_param(&self) -> bool {
        matches!(
            self.kind,
            TransformKind::Rotate
                | TransformKind::Zoom
                | TransformKind::Color
                | TransformKind::Sharpness
                | TransformKind::Crop
        )
    }

    /// `(kind, param)` identity used for duplicate detection.
    fn key(&self) -> (TransformKind, u32) {
        (
            self.kind,
            if self.uses_param() {
                self.param.to_bits()
            } else {
                0
            },
        )
    }
}

impl fmt::Display for Transform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self.kind {
            TransformKind::Identity => "identity",
            TransformKind::Rotate => "rotate",
            TransformKind::Zoom => "zoom",
            TransformKind::Color => "color",
            TransformKind::AutoContrast => "autocontrast",
            TransformKind::Sharpness => "sharpness",
            TransformKind::HFlip => "hflip",
            TransformKind::Crop => "crop",
        };
        if self.uses_param() {
            write!(f, "{name}:{}", self.param)
        } else {
            f.write_str(name)
        }
    }
}

impl FromStr for Transform {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => (n.trim(), Some(a.trim())),
            None => (s.trim(), None),
        };
        let kind = match name.to_ascii_lowercase().as_str() {
            "identity" => TransformKind::Identity,
            "rotate" => TransformKind::Rotate,
            "zoom" => TransformKind::Zoom,
            "color" => TransformKind::Color,
            "autocontrast" => TransformKind::AutoContrast,
            "sharpness" => TransformKind::Sharpness,
            "hflip" => TransformKind::HFlip,
            "crop" => TransformKind::Crop,
            other => return Err(Error::param(format!("unknown transform `{other}`"))),
        };
        let t = Transform { kind, param: 0.0 };
        let param = match (t.uses_param(), arg) {
            (true, Some(a)) => a
                .parse::<f32>()
                .map_err(|_| Error::param(format!("bad transform parameter in `{s}`")))?,
            (true, None) => return Err(Error::param(format!("transform `{s}` needs a parameter"))),
            (false, _) => 0.0,
        };
        Transform::new(kind, param)
    }
}

/// An ordered, duplicate-free candidate set containing exactly one identity.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformSpace {
    transforms: Vec<Transform>,
}

impl TransformSpace {
    pub fn new(transforms: Vec<Transform>) -> Result<Self> {
        for t in &transforms {
            t.validate()?;
        }
        let identities = transforms
            .iter()
            .filter(|t| t.kind == TransformKind::Identity)
            .count();
        if identities != 1 {
            return Err(Error::param(format!(
                "transform space needs exactly one identity, found {identities}"
            )));
        }
        for (i, a) in transforms.iter().enumerate() {
            if transforms[..i].iter().any(|b| b.key() == a.key()) {
                return Err(Error::param(format!("duplicate transform {a}")));
            }
        }
        Ok(Self { transforms })
    }

    pub fn len(&self) -> usize {
        self.transforms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transforms.is_empty()
    }

    pub fn get(&self, index: usize) -> Option<&Transform> {
        self.transforms.get(index)
    }

    pub fn transforms(&self) -> &[Transform] {
        &self.transforms
    }

    pub fn identity_index(&self) -> usize {
        self.transforms
            .iter()
            .position(|t| t.kind == TransformKind::Identity)
            .expect("validated space holds an identity")
    }

    pub fn names(&self) -> Vec<String> {
        self.transforms.iter().map(ToString::to_string).collect()
    }

    /// Stable content hash used to tie label stores and predictors to a space.
    pub fn fingerprint(&self) -> String {
        crate::seed::sha256_hex(self.names().join(",").as_bytes())
    }
}

/// The 12-transform default space. Index order:
///
/// | idx | transform      | idx | transform       |
/// |-----|----------------|-----|-----------------|
/// | 0   | rotate -20°    | 6   | autocontrast    |
/// | 1   | rotate +20°    | 7   | sharpness 0.2   |
/// | 2   | zoom 0.8       | 8   | sharpness 0.5   |
/// | 3   | zoom 1.2       | 9   | sharpness 3.0   |
/// | 4   | color 0.5      | 10  | sharpness 4.0   |
/// | 5   | color 1.5      | 11  | identity        |
pub fn default_space() -> TransformSpace {
    TransformSpace::new(vec![
        Transform::rotate(-20.0),
        Transform::rotate(20.0),
        Transform::zoom(0.8),
        Transform::zoom(1.2),
        Transform::color(0.5),
        Transform::color(1.5),
        Transform::auto_contrast(),
        Transform::sharpness(0.2),
        Transform::sharpness(0.5),
        Transform::sharpness(3.0),
        Transform::sharpness(4.0),
        Transform::IDENTITY,
    ])
    .expect("default space is valid")
}

/// Crop side used for the corner/center crops of an image of the given size.
pub fn crop_side(height: usize, width: usize) -> usize {
    ((height.min(width) as f32 * CROP_RATIO).round() as usize).max(1)
}

/// Applies `t` to `img`. Every output sample is clamped to `[0, 1]`.
///
/// `Crop` returns a `crop_side × crop_side` image; every other kind keeps the
/// input shape.
pub fn apply_transform(img: &Image, t: &Transform) -> Result<Image> {
    t.validate()?;
    let out = match t.kind {
        TransformKind::Identity => img.clone(),
        TransformKind::Rotate => rotate(img, t.param),
        TransformKind::Zoom => zoom(img, t.param),
        TransformKind::Color => color(img, t.param),
        TransformKind::AutoContrast => auto_contrast(img),
        TransformKind::Sharpness => sharpness(img, t.param),
        TransformKind::HFlip => hflip(img),
        TransformKind::Crop => {
            let side = crop_side(img.height(), img.width());
            crop_at(img, t.param as u8, side)?
        }
    };
    Ok(out)
}

/// Applies `t` and resizes the result back to the input size when the
/// transform changed it (crops), so it can be fed to a fixed-input model.
pub fn apply_for_model(img: &Image, t: &Transform) -> Result<Image> {
    let out = apply_transform(img, t)?;
    if out.same_shape(img) {
        Ok(out)
    } else {
        Ok(resize(&out, img.height(), img.width()))
    }
}

fn center(n: usize) -> f32 {
    (n as f32 - 1.0) / 2.0
}

fn rotate(img: &Image, degrees: f32) -> Image {
    if degrees == 0.0 {
        return img.clone();
    }
    let (cy, cx) = (center(img.height()), center(img.width()));
    let (s, c) = degrees.to_radians().sin_cos();
    warp(img, img.height(), img.width(), |y, x| {
        let (dy, dx) = (y - cy, x - cx);
        (cy + dx * s + dy * c, cx + dx * c - dy * s)
    })
}

/// Zoom-out (`factor < 1`) shrinks content about the center and mirror-fills
/// the border; zoom-in (`factor > 1`) is a central crop of `side / factor`
/// resized back. Both reduce to the same inverse map.
fn zoom(img: &Image, factor: f32) -> Image {
    if factor == 1.0 {
        return img.clone();
    }
    let (cy, cx) = (center(img.height()), center(img.width()));
    warp(img, img.height(), img.width(), |y, x| {
        (cy + (y - cy) / factor, cx + (x - cx) / factor)
    })
}

fn color(img: &Image, factor: f32) -> Image {
    let c = img.channels();
    if c == 1 {
        return img.clone();
    }
    let gray = img.luminance();
    let mut data = Vec::with_capacity(img.data().len());
    for (px, &g) in img.data().chunks_exact(c).zip(&gray) {
        for &v in px {
            data.push(clamp_unit(g + factor * (v - g)));
        }
    }
    Image::from_parts(img.height(), img.width(), c, data)
}

fn auto_contrast(img: &Image) -> Image {
    let c = img.channels();
    let mut lo = vec![f32::INFINITY; c];
    let mut hi = vec![f32::NEG_INFINITY; c];
    for px in img.data().chunks_exact(c) {
        for ch in 0..c {
            lo[ch] = lo[ch].min(px[ch]);
            hi[ch] = hi[ch].max(px[ch]);
        }
    }
    let mut data = img.data().to_vec();
    for px in data.chunks_exact_mut(c) {
        for ch in 0..c {
            let span = hi[ch] - lo[ch];
            if span > 0.0 {
                px[ch] = clamp_unit((px[ch] - lo[ch]) / span);
            }
        }
    }
    Image::from_parts(img.height(), img.width(), c, data)
}

/// 3×3 smoothing with kernel `[[1,1,1],[1,5,1],[1,1,1]] / 13`; border pixels
/// are copied unsmoothed.
pub(crate) fn smooth(img: &Image) -> Vec<f32> {
    let (h, w, c) = (img.height(), img.width(), img.channels());
    let src = img.data();
    let mut out = src.to_vec();
    if h < 3 || w < 3 {
        return out;
    }
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            for ch in 0..c {
                let mut acc = 0.0f32;
                for dy in 0..3 {
                    for dx in 0..3 {
                        acc += src[((y + dy - 1) * w + (x + dx - 1)) * c + ch];
                    }
                }
                // the centre already contributed once; its weight is 5
                acc += 4.0 * src[(y * w + x) * c + ch];
                out[(y * w + x) * c + ch] = acc / 13.0;
            }
        }
    }
    out
}

fn sharpness(img: &Image, factor: f32) -> Image {
    let smoothed = smooth(img);
    let data = smoothed
        .iter()
        .zip(img.data())
        .map(|(&s, &v)| clamp_unit(s + factor * (v - s)))
        .collect();
    Image::from_parts(img.height(), img.width(), img.channels(), data)
}

pub fn hflip(img: &Image) -> Image {
    let (h, w, c) = (img.height(), img.width(), img.channels());
    let src = img.data();
    let mut data = Vec::with_capacity(src.len());
    for y in 0..h {
        for x in (0..w).rev() {
            let base = (y * w + x) * c;
            data.extend_from_slice(&src[base..base + c]);
        }
    }
    Image::from_parts(h, w, c, data)
}

/// Copies the `side × side` window with top-left corner `(y0, x0)`.
pub fn crop_window(
    img: &Image,
    y0: usize,
    x0: usize,
    side_h: usize,
    side_w: usize,
) -> Result<Image> {
    if y0 + side_h > img.height() || x0 + side_w > img.width() || side_h == 0 || side_w == 0 {
        return Err(Error::dim(format!(
            "crop {side_h}x{side_w} at ({y0}, {x0}) exceeds {}x{} image",
            img.height(),
            img.width()
        )));
    }
    let c = img.channels();
    let mut data = Vec::with_capacity(side_h * side_w * c);
    for y in y0..y0 + side_h {
        let start = (y * img.width() + x0) * c;
        data.extend_from_slice(&img.data()[start..start + side_w * c]);
    }
    Ok(Image::from_parts(side_h, side_w, c, data))
}

fn crop_at(img: &Image, position: u8, side: usize) -> Result<Image> {
    let (h, w) = (img.height(), img.width());
    if side > h || side > w {
        return Err(Error::dim(format!(
            "crop side {side} exceeds {h}x{w} image"
        )));
    }
    let (y0, x0) = match position {
        0 => ((h - side) / 2, (w - side) / 2),
        1 => (0, 0),
        2 => (0, w - side),
        3 => (h - side, 0),
        4 => (h - side, w - side),
        p => return Err(Error::param(format!("crop position {p} not in 0..=4"))),
    };
    crop_window(img, y0, x0, side, side)
}

/// Conventional multi-crop views: the image is resized so its short side is
/// `resize_to`, then the center and four corner crops of side `crop_to` are
/// taken (in position order 0..=4). With `n = 10` the horizontal flips of
/// those five follow, in the same order.
pub fn crop_set(img: &Image, n: usize, resize_to: usize, crop_to: usize) -> Result<Vec<Image>> {
    if n != 5 && n != 10 {
        return Err(Error::param(format!(
            "crop set size must be 5 or 10, got {n}"
        )));
    }
    if crop_to == 0 || resize_to < crop_to {
        return Err(Error::param(format!(
            "need resize_to ({resize_to}) >= crop_to ({crop_to}) > 0"
        )));
    }
    let (h, w) = (img.height(), img.width());
    let (rh, rw) = if h <= w {
        (
            resize_to,
            ((w as f64 * resize_to as f64 / h as f64).round() as usize).max(1),
        )
    } else {
        (
            ((h as f64 * resize_to as f64 / w as f64).round() as usize).max(1),
            resize_to,
        )
    };
    if crop_to > rh || crop_to > rw {
        return Err(Error::dim(format!(
            "crop {crop_to} exceeds resized {rh}x{rw}"
        )));
    }
    let resized = resize(img, rh, rw);
    let mut views = (0..5u8)
        .map(|p| crop_at(&resized, p, crop_to))
        .collect::<Result<Vec<_>>>()?;
    if n == 10 {
        let flipped: Vec<Image> = views.iter().map(hflip).collect();
        views.extend(flipped);
    }
    Ok(views)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize, c: usize) -> Image {
        let data = (0..h * w * c)
            .map(|i| ((i * 37) % 101) as f32 / 100.0)
            .collect();
        Image::new(h, w, c, data).unwrap()
    }

    #[test]
    fn default_space_layout() {
        let space = default_space();
        assert_eq!(space.len(), 12);
        assert_eq!(space.identity_index(), 11);
        let sharp: Vec<f32> = space
            .transforms()
            .iter()
            .filter(|t| t.kind == TransformKind::Sharpness)
            .map(|t| t.param)
            .collect();
        assert_eq!(sharp, vec![0.2, 0.5, 3.0, 4.0]);
    }

    #[test]
    fn space_rejects_duplicates_and_missing_identity() {
        let dup = TransformSpace::new(vec![
            Transform::IDENTITY,
            Transform::zoom(0.8),
            Transform::zoom(0.8),
        ]);
        assert!(matches!(dup, Err(Error::Parameter(_))));
        assert!(TransformSpace::new(vec![Transform::zoom(0.8)]).is_err());
        assert!(TransformSpace::new(vec![Transform::IDENTITY, Transform::IDENTITY]).is_err());
    }

    #[test]
    fn parameter_validation() {
        assert!(Transform::new(TransformKind::Rotate, 181.0).is_err());
        assert!(Transform::new(TransformKind::Zoom, 0.0).is_err());
        assert!(Transform::new(TransformKind::Sharpness, -0.1).is_err());
        assert!(Transform::new(TransformKind::Crop, 5.0).is_err());
        assert!(apply_transform(&ramp(4, 4, 1), &Transform::rotate(200.0)).is_err());
    }

    #[test]
    fn parse_round_trip() {
        for t in default_space().transforms() {
            let parsed: Transform = t.to_string().parse().unwrap();
            assert_eq!(&parsed, t);
        }
        assert!("warp:1".parse::<Transform>().is_err());
        assert!("zoom".parse::<Transform>().is_err());
    }

    #[test]
    fn autocontrast_two_values() {
        let img = Image::new(1, 4, 1, vec![0.25, 0.75, 0.25, 0.75]).unwrap();
        let out = apply_transform(&img, &Transform::auto_contrast()).unwrap();
        assert_eq!(out.data(), &[0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn sharpness_kernel_interior_value() {
        // 3x3 single channel: only the centre is smoothed.
        let img = Image::new(3, 3, 1, vec![0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let s = smooth(&img);
        assert!((s[4] - 5.0 / 13.0).abs() < 1e-7);
        assert_eq!(s[0], 0.0);
        let blurred = apply_transform(&img, &Transform::sharpness(0.0)).unwrap();
        assert!((blurred.get(1, 1, 0) - 5.0 / 13.0).abs() < 1e-7);
    }

    #[test]
    fn rotate_90_moves_right_pixel_to_top() {
        let mut data = vec![0.0; 9];
        data[5] = 1.0; // (y=1, x=2)
        let img = Image::new(3, 3, 1, data).unwrap();
        let out = apply_transform(&img, &Transform::rotate(90.0)).unwrap();
        assert!((out.get(0, 1, 0) - 1.0).abs() < 1e-5);
        assert!(out.get(1, 2, 0).abs() < 1e-5);
    }

    #[test]
    fn zoom_in_matches_crop_then_resize() {
        let img = ramp(12, 12, 1);
        let zoomed = apply_transform(&img, &Transform::zoom(2.0)).unwrap();
        let crop = crop_window(&img, 3, 3, 6, 6).unwrap();
        let manual = resize(&crop, 12, 12);
        // away from the crop border, where the two differ only in padding
        for y in 3..9 {
            for x in 3..9 {
                assert!((zoomed.get(y, x, 0) - manual.get(y, x, 0)).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn crop_transform_side() {
        let img = ramp(32, 32, 3);
        let out = apply_transform(&img, &Transform::crop(1)).unwrap();
        assert_eq!((out.height(), out.width()), (28, 28));
        assert_eq!(out.get(0, 0, 0), img.get(0, 0, 0));
        let br = apply_transform(&img, &Transform::crop(4)).unwrap();
        assert_eq!(br.get(27, 27, 2), img.get(31, 31, 2));
        assert!(matches!(
            apply_transform(&Image::filled(1, 1, 1, 0.5).unwrap(), &Transform::crop(9)),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn crop_set_shapes() {
        let img = ramp(32, 40, 3);
        let five = crop_set(&img, 5, 256, 224).unwrap();
        assert_eq!(five.len(), 5);
        assert!(five.iter().all(|v| v.height() == 224 && v.width() == 224));
        let ten = crop_set(&ramp(32, 32, 3), 10, 32, 28).unwrap();
        assert_eq!(ten.len(), 10);
        for i in 0..5 {
            assert_eq!(ten[i + 5], hflip(&ten[i]));
        }
        assert!(matches!(
            crop_set(&img, 5, 20, 28),
            Err(Error::Parameter(_))
        ));
        assert!(crop_set(&img, 4, 32, 28).is_err());
    }
}
