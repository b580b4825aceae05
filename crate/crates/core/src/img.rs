//! Minimal row-major image buffer shared by frames, alignment, and mapping.

/// Dense 2-D grid of `T`, row-major. Depth images use 0.0 for "no reading".
#[derive(Debug, Clone, PartialEq)]
pub struct Image<T> {
    width: usize,
    height: usize,
    data: Vec<T>,
}

impl<T: Copy> Image<T> {
    pub fn new_fill(width: usize, height: usize, fill: T) -> Self {
        Self { width, height, data: vec![fill; width * height] }
    }

    /// Wraps an existing buffer; `data.len()` must equal `width * height`.
    pub fn from_vec(width: usize, height: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), width * height, "image buffer size mismatch");
        Self { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> T {
        debug_assert!(x < self.width && y < self.height);
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: T) {
        debug_assert!(x < self.width && y < self.height);
        self.data[y * self.width + x] = value;
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }
}

impl Image<f32> {
    /// Bilinear sample at continuous coordinates, where integer `(x, y)`
    /// addresses the center of pixel `(x, y)`. The caller must keep
    /// `0 <= u <= width-1` and `0 <= v <= height-1`; the borders themselves
    /// are valid sample locations.
    #[inline]
    pub fn bilinear(&self, u: f64, v: f64) -> f64 {
        let (x0, y0, fu, fv) = self.cell(u, v);
        let w = self.width;
        let i00 = self.data[y0 * w + x0] as f64;
        let i10 = self.data[y0 * w + x0 + 1] as f64;
        let i01 = self.data[(y0 + 1) * w + x0] as f64;
        let i11 = self.data[(y0 + 1) * w + x0 + 1] as f64;
        (1.0 - fv) * ((1.0 - fu) * i00 + fu * i10) + fv * ((1.0 - fu) * i01 + fu * i11)
    }

    /// Base corner and fractional offsets of the interpolation cell for
    /// `(u, v)`, clamped so samples exactly on the far border stay in range.
    #[inline]
    pub fn cell(&self, u: f64, v: f64) -> (usize, usize, f64, f64) {
        debug_assert!(u >= 0.0 && v >= 0.0 && u <= (self.width - 1) as f64 && v <= (self.height - 1) as f64);
        let mut x0 = u.floor() as usize;
        let mut y0 = v.floor() as usize;
        if x0 >= self.width - 1 {
            x0 = self.width - 2;
        }
        if y0 >= self.height - 1 {
            y0 = self.height - 2;
        }
        (x0, y0, u - x0 as f64, v - y0 as f64)
    }

    /// True when `(u, v)` lies inside the sampleable area.
    #[inline]
    pub fn in_bounds(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && v >= 0.0 && u <= (self.width - 1) as f64 && v <= (self.height - 1) as f64
    }
}
