//! Single-channel rasters and image file I/O.

use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("cannot read image {path}: {source}")]
    Read {
        path: String,
        #[source]
        source: ::image::ImageError,
    },
    #[error("cannot write image {path}: {source}")]
    Write {
        path: String,
        #[source]
        source: ::image::ImageError,
    },
    #[error("raster size mismatch: {0}")]
    Size(String),
}

/// Row-major single-channel raster.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster<T> {
    width: usize,
    height: usize,
    data: Vec<T>,
}

/// 8-bit grayscale image.
pub type ImageGray = Raster<u8>;

impl<T: Copy> Raster<T> {
    pub fn new(width: usize, height: usize, fill: T) -> Self {
        Self { width, height, data: vec![fill; width * height] }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<T>) -> Result<Self, ImageError> {
        if data.len() != width * height {
            return Err(ImageError::Size(format!(
                "{} values for a {width}x{height} raster",
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self { width, height, data }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> T {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn get_checked(&self, x: isize, y: isize) -> Option<T> {
        if x < 0 || y < 0 || x as usize >= self.width || y as usize >= self.height {
            None
        } else {
            Some(self.data[y as usize * self.width + x as usize])
        }
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: T) {
        self.data[y * self.width + x] = v;
    }

    #[inline]
    pub fn row(&self, y: usize) -> &[T] {
        &self.data[y * self.width..(y + 1) * self.width]
    }

    #[inline]
    pub fn row_mut(&mut self, y: usize) -> &mut [T] {
        &mut self.data[y * self.width..(y + 1) * self.width]
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> Raster<U> {
        Raster { width: self.width, height: self.height, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn same_size<U>(&self, other: &Raster<U>) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Horizontal mirror image.
    pub fn flipped_horizontally(&self) -> Self {
        Self::from_fn(self.width, self.height, |x, y| self.get(self.width - 1 - x, y))
    }
}

impl Raster<u8> {
    /// Bilinear sample at a sub-pixel position (pixel centres at integers).
    /// `None` outside the image.
    pub fn sample(&self, x: f64, y: f64) -> Option<f64> {
        if !(x >= 0.0 && y >= 0.0 && x <= (self.width - 1) as f64 && y <= (self.height - 1) as f64) {
            return None;
        }
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = x - x0 as f64;
        let fy = y - y0 as f64;
        let a = self.get(x0, y0) as f64 * (1.0 - fx) + self.get(x1, y0) as f64 * fx;
        let b = self.get(x0, y1) as f64 * (1.0 - fx) + self.get(x1, y1) as f64 * fx;
        Some(a * (1.0 - fy) + b * fy)
    }

    /// Resamples to `width × height` with a triangle filter whose support
    /// widens when downsampling.
    pub fn resized(&self, width: usize, height: usize) -> Self {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let img = self.to_dynamic();
        let out = ::image::imageops::resize(
            &img,
            width.max(1) as u32,
            height.max(1) as u32,
            ::image::imageops::FilterType::Triangle,
        );
        Self { width: width.max(1), height: height.max(1), data: out.into_raw() }
    }

    /// 2×2 box average; odd trailing rows/columns are dropped.
    pub fn halved(&self) -> Self {
        let w = (self.width / 2).max(1);
        let h = (self.height / 2).max(1);
        Self::from_fn(w, h, |x, y| {
            let (x0, y0) = (2 * x, 2 * y);
            let x1 = (x0 + 1).min(self.width - 1);
            let y1 = (y0 + 1).min(self.height - 1);
            let s = self.get(x0, y0) as u32 + self.get(x1, y0) as u32 + self.get(x0, y1) as u32 + self.get(x1, y1) as u32;
            ((s + 2) / 4) as u8
        })
    }

    fn to_dynamic(&self) -> ::image::GrayImage {
        ::image::GrayImage::from_raw(self.width as u32, self.height as u32, self.data.clone())
            .expect("raster dimensions match its buffer")
    }

    /// Loads a PNG or PGM file, converting colour to luma with weights
    /// 0.299 / 0.587 / 0.114.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ImageError> {
        let path = path.as_ref();
        let read_err = |source| ImageError::Read { path: path.display().to_string(), source };
        let img = ::image::ImageReader::open(path)
            .map_err(|e| read_err(::image::ImageError::IoError(e)))?
            .with_guessed_format()
            .map_err(|e| read_err(::image::ImageError::IoError(e)))?
            .decode()
            .map_err(read_err)?;
        Ok(Self::from_dynamic(&img))
    }

    pub fn from_dynamic(img: &::image::DynamicImage) -> Self {
        use ::image::DynamicImage as D;
        match img {
            D::ImageLuma8(g) => Self {
                width: g.width() as usize,
                height: g.height() as usize,
                data: g.as_raw().clone(),
            },
            other => {
                let rgb = other.to_rgb8();
                let data = rgb
                    .pixels()
                    .map(|p| {
                        let [r, g, b] = p.0;
                        (0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64).round().clamp(0.0, 255.0) as u8
                    })
                    .collect();
                Self { width: rgb.width() as usize, height: rgb.height() as usize, data }
            }
        }
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<(), ImageError> {
        let path = path.as_ref();
        self.to_dynamic()
            .save_with_format(path, ::image::ImageFormat::Png)
            .map_err(|source| ImageError::Write { path: path.display().to_string(), source })
    }
}

impl Raster<u16> {
    pub fn save_png16(&self, path: impl AsRef<Path>) -> Result<(), ImageError> {
        let path = path.as_ref();
        let img = ::image::ImageBuffer::<::image::Luma<u16>, Vec<u16>>::from_raw(
            self.width as u32,
            self.height as u32,
            self.data.clone(),
        )
        .expect("raster dimensions match its buffer");
        img.save_with_format(path, ::image::ImageFormat::Png)
            .map_err(|source| ImageError::Write { path: path.display().to_string(), source })
    }

    pub fn load_png16(path: impl AsRef<Path>) -> Result<Self, ImageError> {
        let path = path.as_ref();
        let img = ::image::open(path).map_err(|source| ImageError::Read { path: path.display().to_string(), source })?;
        let g = img.to_luma16();
        Ok(Self { width: g.width() as usize, height: g.height() as usize, data: g.into_raw() })
    }
}

/// Integral image with one row and column of zero padding: `sum(x, y)` is
/// the sum of all pixels strictly above and to the left of `(x, y)`.
#[derive(Debug, Clone)]
pub struct IntegralImage {
    width: usize,
    height: usize,
    sums: Vec<f64>,
}

impl IntegralImage {
    pub fn new(img: &Raster<f32>) -> Self {
        let (w, h) = (img.width(), img.height());
        let stride = w + 1;
        let mut sums = vec![0.0f64; stride * (h + 1)];
        for y in 0..h {
            let mut acc = 0.0;
            for x in 0..w {
                acc += img.get(x, y) as f64;
                sums[(y + 1) * stride + x + 1] = sums[y * stride + x + 1] + acc;
            }
        }
        Self { width: w, height: h, sums }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Sum over the box with top-left `(x, y)` and size `w × h`, clipped to
    /// the image.
    #[inline]
    pub fn box_sum(&self, x: isize, y: isize, w: isize, h: isize) -> f64 {
        let clip = |v: isize, max: usize| v.clamp(0, max as isize) as usize;
        let x0 = clip(x, self.width);
        let y0 = clip(y, self.height);
        let x1 = clip(x + w, self.width);
        let y1 = clip(y + h, self.height);
        if x1 <= x0 || y1 <= y0 {
            return 0.0;
        }
        let s = self.width + 1;
        self.sums[y1 * s + x1] - self.sums[y0 * s + x1] - self.sums[y1 * s + x0] + self.sums[y0 * s + x0]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn integral_box_sums() {
        let img = Raster::from_fn(5, 4, |x, y| (x + 10 * y) as f32);
        let ii = IntegralImage::new(&img);
        let brute: f64 = (1..4).flat_map(|x| (1..3).map(move |y| (x + 10 * y) as f64)).sum();
        assert_eq!(ii.box_sum(1, 1, 3, 2), brute);
        assert_eq!(ii.box_sum(-3, -3, 2, 2), 0.0);
        assert_eq!(ii.box_sum(0, 0, 100, 100), img.as_slice().iter().map(|&v| v as f64).sum::<f64>());
    }

    #[test]
    fn png_round_trip_and_luma() {
        let dir = tempfile::tempdir().unwrap();
        let img = Raster::from_fn(7, 3, |x, y| (x * 30 + y) as u8);
        let p = dir.path().join("a.png");
        img.save_png(&p).unwrap();
        assert_eq!(ImageGray::load(&p).unwrap(), img);

        let rgb = ::image::RgbImage::from_pixel(2, 2, ::image::Rgb([255, 0, 0]));
        let q = dir.path().join("rgb.png");
        rgb.save(&q).unwrap();
        assert_eq!(ImageGray::load(&q).unwrap().get(0, 0), 76);

        let err = ImageGray::load(dir.path().join("missing.png")).unwrap_err();
        assert!(err.to_string().contains("missing.png"));
    }

    #[test]
    fn pgm_input() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.pgm");
        std::fs::write(&p, b"P2\n3 2\n255\n0 10 20\n30 40 50\n").unwrap();
        let img = ImageGray::load(&p).unwrap();
        assert_eq!((img.width(), img.height(), img.get(2, 1)), (3, 2, 50));
    }

    #[test]
    fn bilinear_sampling() {
        let img = Raster::from_fn(3, 3, |x, _| (x * 100) as u8);
        assert_eq!(img.sample(0.5, 1.0), Some(50.0));
        assert_eq!(img.sample(2.5, 1.0), None);
    }
}
