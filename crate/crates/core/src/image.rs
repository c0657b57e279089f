//! Raster loading, colour conversion, cropping, patch (un)embedding and the
//! Sobel operator shared by the visible-detail loss and the artifact metric.

use std::path::Path;

use image::{DynamicImage, ImageBuffer, ImageReader, Luma, Rgb};

use crate::error::{Error, Result};
use crate::tensor::{Matrix, VertexFeatures};

/// Dense raster with intensities normalized to `[0, 1]`.
///
/// Data is row-major and channel-interleaved. The network's raw training
/// output is also carried in this type and may leave `[0, 1]` before
/// clamping; everything loaded from disk or returned by inference is inside
/// the range.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::shape(format!(
                "images have 1 or 3 channels, got {channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::shape(format!(
                "{} values for a {height}x{width}x{channels} image",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::numeric(format!("non-finite pixel value {v}")));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn gray(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(height, width, 1, data)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Self::new(height, width, channels, vec![value; height * width * channels])
            .expect("valid constant image")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels]
    }

    pub fn is_normalized(&self) -> bool {
        self.data.iter().all(|v| (0.0..=1.0).contains(v))
    }

    pub fn clamped(&self) -> Image {
        Image {
            data: self.data.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
            ..self.clone()
        }
    }

    fn require_gray(&self, what: &str) -> Result<()> {
        if self.channels != 1 {
            return Err(Error::shape(format!(
                "{what} expects a single-channel image, got {} channels",
                self.channels
            )));
        }
        Ok(())
    }

    /// Luminance plane: the image itself when grayscale, otherwise the
    /// full-range BT.601 Y channel.
    pub fn luma(&self) -> Image {
        if self.channels == 1 {
            return self.clone();
        }
        let data = self
            .data
            .chunks_exact(3)
            .map(|p| KR * p[0] + KG * p[1] + KB * p[2])
            .collect();
        Image {
            height: self.height,
            width: self.width,
            channels: 1,
            data,
        }
    }

    /// Window `[y, y+size) × [x, x+size)`.
    pub fn crop(&self, y: usize, x: usize, size_h: usize, size_w: usize) -> Result<Image> {
        if y + size_h > self.height || x + size_w > self.width {
            return Err(Error::Size(format!(
                "window {size_h}x{size_w} at ({y},{x}) exceeds {}x{} image",
                self.height, self.width
            )));
        }
        let c = self.channels;
        let mut data = Vec::with_capacity(size_h * size_w * c);
        for r in y..y + size_h {
            let start = (r * self.width + x) * c;
            data.extend_from_slice(&self.data[start..start + size_w * c]);
        }
        Ok(Image {
            height: size_h,
            width: size_w,
            channels: c,
            data,
        })
    }
}

/// Three full-resolution planes of a full-range BT.601 YCbCr image.
#[derive(Debug, Clone, PartialEq)]
pub struct YcbcrImage {
    pub y: Image,
    pub cb: Image,
    pub cr: Image,
}

// Full-range BT.601 luma weights. Every other coefficient of the forward and
// inverse transforms is derived from these, so the pair is an exact inverse.
const KR: f64 = 0.299;
const KB: f64 = 0.114;
const KG: f64 = 1.0 - KR - KB;

/// Reads an 8- or 16-bit grayscale or RGB raster (PNG, BMP) and scales it to `[0, 1]`.
pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let decode_err = |reason: String| Error::Decode {
        path: path.to_path_buf(),
        reason,
    };
    let reader = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    let decoded = reader.decode().map_err(|e| match e {
        image::ImageError::Unsupported(u) => Error::Format {
            path: path.to_path_buf(),
            reason: u.to_string(),
        },
        other => decode_err(other.to_string()),
    })?;
    let (w, h) = (decoded.width() as usize, decoded.height() as usize);
    let (channels, data): (usize, Vec<f64>) = match decoded {
        DynamicImage::ImageLuma8(b) => (1, b.into_raw().iter().map(|&v| v as f64 / 255.0).collect()),
        DynamicImage::ImageLuma16(b) => (1, b.into_raw().iter().map(|&v| v as f64 / 65535.0).collect()),
        DynamicImage::ImageRgb8(b) => (3, b.into_raw().iter().map(|&v| v as f64 / 255.0).collect()),
        DynamicImage::ImageRgb16(b) => (3, b.into_raw().iter().map(|&v| v as f64 / 65535.0).collect()),
        other => {
            return Err(Error::Format {
                path: path.to_path_buf(),
                reason: format!("unsupported pixel layout {:?}", other.color()),
            })
        }
    };
    Image::new(h, w, channels, data)
}

/// Writes an 8-bit raster; the container is chosen from the file extension.
/// Values are clamped to `[0, 1]` and rounded to the nearest code.
pub fn save_image(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes: Vec<u8> = img
        .data
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let (w, h) = (img.width as u32, img.height as u32);
    let result = if img.channels == 1 {
        ImageBuffer::<Luma<u8>, _>::from_raw(w, h, bytes)
            .expect("buffer size matches")
            .save(path)
    } else {
        ImageBuffer::<Rgb<u8>, _>::from_raw(w, h, bytes)
            .expect("buffer size matches")
            .save(path)
    };
    result.map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Format {
            path: path.to_path_buf(),
            reason: other.to_string(),
        },
    })
}

pub fn rgb_to_ycbcr(img: &Image) -> Result<YcbcrImage> {
    if img.channels != 3 {
        return Err(Error::shape(format!(
            "YCbCr conversion needs 3 channels, got {}",
            img.channels
        )));
    }
    let n = img.height * img.width;
    let (mut y, mut cb, mut cr) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for p in img.data.chunks_exact(3) {
        let (r, g, b) = (p[0], p[1], p[2]);
        let luma = KR * r + KG * g + KB * b;
        y.push(luma);
        cb.push(0.5 + (b - luma) / (2.0 * (1.0 - KB)));
        cr.push(0.5 + (r - luma) / (2.0 * (1.0 - KR)));
    }
    let plane = |data| Image::gray(img.height, img.width, data);
    Ok(YcbcrImage {
        y: plane(y)?,
        cb: plane(cb)?,
        cr: plane(cr)?,
    })
}

/// Inverse of [`rgb_to_ycbcr`], clamped to `[0, 1]`.
pub fn ycbcr_to_rgb(img: &YcbcrImage) -> Result<Image> {
    ycbcr_to_rgb_unclamped(img).map(|rgb| rgb.clamped())
}

pub(crate) fn ycbcr_to_rgb_unclamped(img: &YcbcrImage) -> Result<Image> {
    let dims = img.y.dims();
    if img.cb.dims() != dims || img.cr.dims() != dims {
        return Err(Error::shape(format!(
            "plane shapes differ: y {:?}, cb {:?}, cr {:?}",
            dims,
            img.cb.dims(),
            img.cr.dims()
        )));
    }
    for plane in [&img.y, &img.cb, &img.cr] {
        plane.require_gray("YCbCr plane")?;
    }
    let mut data = Vec::with_capacity(dims.0 * dims.1 * 3);
    for ((&y, &cb), &cr) in img.y.data.iter().zip(&img.cb.data).zip(&img.cr.data) {
        let (cb, cr) = (cb - 0.5, cr - 0.5);
        let r = y + 2.0 * (1.0 - KR) * cr;
        let b = y + 2.0 * (1.0 - KB) * cb;
        let g = (y - KR * r - KB * b) / KG;
        data.extend_from_slice(&[r, g, b]);
    }
    Image::new(dims.0, dims.1, 3, data)
}

/// Top-left offsets of every `size × size` window on a `stride` grid that
/// fits entirely inside an `h × w` image, in row-major order.
pub fn crop_offsets(h: usize, w: usize, size: usize, stride: usize) -> Result<Vec<(usize, usize)>> {
    if stride == 0 {
        return Err(Error::Size("crop stride must be at least 1".into()));
    }
    if size == 0 || size > h.min(w) {
        return Err(Error::Size(format!(
            "crop size {size} does not fit a {h}x{w} image"
        )));
    }
    let ys = (0..=h - size).step_by(stride);
    Ok(ys
        .flat_map(|y| (0..=w - size).step_by(stride).map(move |x| (y, x)))
        .collect())
}

/// An aligned infrared/visible crop and its offset in the source pair.
#[derive(Debug, Clone)]
pub struct CropPair {
    pub y: usize,
    pub x: usize,
    pub ir: Image,
    pub vis: Image,
}

pub fn crop_pairs(ir: &Image, vis: &Image, size: usize, stride: usize) -> Result<Vec<CropPair>> {
    if ir.dims() != vis.dims() {
        return Err(Error::shape(format!(
            "pair is not aligned: ir {:?} vs vis {:?}",
            ir.dims(),
            vis.dims()
        )));
    }
    crop_offsets(ir.height, ir.width, size, stride)?
        .into_iter()
        .map(|(y, x)| {
            Ok(CropPair {
                y,
                x,
                ir: ir.crop(y, x, size, size)?,
                vis: vis.crop(y, x, size, size)?,
            })
        })
        .collect()
}

/// Geometry of a patch grid over an `height × width` image, including the
/// edge-replicated padding needed to reach a multiple of `patch`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchGrid {
    pub height: usize,
    pub width: usize,
    pub patch: usize,
}

impl PatchGrid {
    pub fn new(height: usize, width: usize, patch: usize) -> Result<Self> {
        if patch == 0 || height == 0 || width == 0 {
            return Err(Error::Size(format!(
                "invalid patch grid: {height}x{width} with patch {patch}"
            )));
        }
        Ok(Self {
            height,
            width,
            patch,
        })
    }

    pub fn grid_rows(&self) -> usize {
        self.height.div_ceil(self.patch)
    }

    pub fn grid_cols(&self) -> usize {
        self.width.div_ceil(self.patch)
    }

    pub fn vertices(&self) -> usize {
        self.grid_rows() * self.grid_cols()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch
    }

    pub fn padded_height(&self) -> usize {
        self.grid_rows() * self.patch
    }

    pub fn padded_width(&self) -> usize {
        self.grid_cols() * self.patch
    }
}

/// Splits a single-channel image into row-major patch vectors, one vertex
/// per patch in raster order. Non-divisible sizes are padded by edge
/// replication.
pub fn patchify(img: &Image, patch: usize) -> Result<VertexFeatures> {
    img.require_gray("patchify")?;
    let grid = PatchGrid::new(img.height, img.width, patch)?;
    let mut out = Matrix::zeros(grid.vertices(), grid.patch_dim());
    for gy in 0..grid.grid_rows() {
        for gx in 0..grid.grid_cols() {
            let row = out.row_mut(gy * grid.grid_cols() + gx);
            for py in 0..patch {
                let y = (gy * patch + py).min(img.height - 1);
                for px in 0..patch {
                    let x = (gx * patch + px).min(img.width - 1);
                    row[py * patch + px] = img.data[y * img.width + x];
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of [`patchify`]; padding introduced by `patchify` is cropped.
pub fn unpatchify(vf: &VertexFeatures, h: usize, w: usize, patch: usize) -> Result<Image> {
    let data = unpatchify_raw(vf, &PatchGrid::new(h, w, patch)?)?;
    Image::gray(h, w, data)
}

pub(crate) fn unpatchify_raw(vf: &VertexFeatures, grid: &PatchGrid) -> Result<Vec<f64>> {
    if vf.rows() != grid.vertices() || vf.cols() != grid.patch_dim() {
        return Err(Error::shape(format!(
            "{}x{} vertex features do not match a {}x{} image with patch {}",
            vf.rows(),
            vf.cols(),
            grid.height,
            grid.width,
            grid.patch
        )));
    }
    let p = grid.patch;
    let mut data = vec![0.0; grid.height * grid.width];
    for y in 0..grid.height {
        for x in 0..grid.width {
            let v = (y / p) * grid.grid_cols() + x / p;
            data[y * grid.width + x] = vf[(v, (y % p) * p + x % p)];
        }
    }
    Ok(data)
}

/// Scatters a per-pixel gradient back onto patch vectors (adjoint of
/// [`unpatchify_raw`]). Padded cells receive zero.
pub(crate) fn patchify_adjoint(grad: &[f64], grid: &PatchGrid) -> Matrix {
    let p = grid.patch;
    let mut out = Matrix::zeros(grid.vertices(), grid.patch_dim());
    for y in 0..grid.height {
        for x in 0..grid.width {
            let v = (y / p) * grid.grid_cols() + x / p;
            out[(v, (y % p) * p + x % p)] += grad[y * grid.width + x];
        }
    }
    out
}

const SOBEL_X: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
const SOBEL_Y: [[f64; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];

/// Sobel responses written as sums of pixel differences, so flat regions
/// produce exact zeros.
fn sobel_raw(data: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    let px = |y: usize, x: usize| data[y * w + x];
    let mut gx = vec![0.0; h * w];
    let mut gy = vec![0.0; h * w];
    for y in 0..h {
        let (up, down) = (y.saturating_sub(1), (y + 1).min(h - 1));
        for x in 0..w {
            let (left, right) = (x.saturating_sub(1), (x + 1).min(w - 1));
            gx[y * w + x] = (px(up, right) - px(up, left))
                + 2.0 * (px(y, right) - px(y, left))
                + (px(down, right) - px(down, left));
            gy[y * w + x] = (px(down, left) - px(up, left))
                + 2.0 * (px(down, x) - px(up, x))
                + (px(down, right) - px(up, right));
        }
    }
    (gx, gy)
}

fn correlate3_adjoint(grad: &[f64], h: usize, w: usize, k: &[[f64; 3]; 3], out: &mut [f64]) {
    for y in 0..h {
        for x in 0..w {
            let g = grad[y * w + x];
            if g == 0.0 {
                continue;
            }
            for (ky, krow) in k.iter().enumerate() {
                let sy = (y + ky).saturating_sub(1).min(h - 1);
                for (kx, &kv) in krow.iter().enumerate() {
                    let sx = (x + kx).saturating_sub(1).min(w - 1);
                    out[sy * w + sx] += kv * g;
                }
            }
        }
    }
}

/// Horizontal and vertical Sobel responses with edge-replicate padding.
pub fn sobel_components(img: &Image) -> Result<(Vec<f64>, Vec<f64>)> {
    img.require_gray("sobel")?;
    let (h, w) = img.dims();
    Ok(sobel_raw(&img.data, h, w))
}

/// Gradient magnitude `|Gx| + |Gy|`.
pub fn sobel_gradient(img: &Image) -> Result<Image> {
    let (gx, gy) = sobel_components(img)?;
    let data = gx.iter().zip(&gy).map(|(a, b)| a.abs() + b.abs()).collect();
    Image::gray(img.height, img.width, data)
}

/// Pulls a gradient w.r.t. the Sobel magnitude back to the input pixels,
/// using subgradient 0 where a component vanishes.
pub(crate) fn sobel_gradient_backward(img: &Image, upstream: &[f64]) -> Result<Vec<f64>> {
    let (gx, gy) = sobel_components(img)?;
    let (h, w) = img.dims();
    let dgx: Vec<f64> = gx.iter().zip(upstream).map(|(g, u)| sign(*g) * u).collect();
    let dgy: Vec<f64> = gy.iter().zip(upstream).map(|(g, u)| sign(*g) * u).collect();
    let mut out = vec![0.0; h * w];
    correlate3_adjoint(&dgx, h, w, &SOBEL_X, &mut out);
    correlate3_adjoint(&dgy, h, w, &SOBEL_Y, &mut out);
    Ok(out)
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
