//! Dense row-major 2D grids used for images, depth maps and fields.

/// A row-major `width x height` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid<T> {
    width: usize,
    height: usize,
    data: Vec<T>,
}

/// 8-bit range intensities stored as `f32` (0..=255).
pub type GrayImage = Grid<f32>;

/// Metric depth; `0` or non-finite means "no measurement".
pub type DepthImage = Grid<f32>;

impl<T: Clone> Grid<T> {
    pub fn new(width: usize, height: usize, fill: T) -> Self {
        Self {
            width,
            height,
            data: vec![fill; width * height],
        }
    }
}

impl<T> Grid<T> {
    /// Panics if `data.len() != width * height`.
    pub fn from_vec(width: usize, height: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), width * height, "grid data length mismatch");
        Self {
            width,
            height,
            data,
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
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
    pub fn index(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> &T {
        &self.data[y * self.width + x]
    }

    #[inline]
    pub fn get_mut(&mut self, x: usize, y: usize) -> &mut T {
        &mut self.data[y * self.width + x]
    }

    #[inline]
    pub fn contains(&self, x: i64, y: i64) -> bool {
        x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height
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

    pub fn row(&self, y: usize) -> &[T] {
        &self.data[y * self.width..(y + 1) * self.width]
    }
}

impl<T: Copy> Grid<T> {
    #[inline]
    pub fn at(&self, x: usize, y: usize) -> T {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: T) {
        let i = y * self.width + x;
        self.data[i] = value;
    }
}

impl Grid<f32> {
    /// Halves the resolution by averaging 2x2 blocks. Odd trailing rows/columns are dropped.
    pub fn downsample(&self) -> Self {
        let w = self.width / 2;
        let h = self.height / 2;
        Self::from_fn(w, h, |x, y| {
            let (x0, y0) = (2 * x, 2 * y);
            0.25 * (self.at(x0, y0) + self.at(x0 + 1, y0) + self.at(x0, y0 + 1) + self.at(x0 + 1, y0 + 1))
        })
    }
}

/// Image pyramid where level `l` has half the resolution of level `l - 1`.
pub fn image_pyramid(image: &GrayImage, levels: usize) -> Vec<GrayImage> {
    let mut out = Vec::with_capacity(levels);
    out.push(image.clone());
    for l in 1..levels {
        let next = out[l - 1].downsample();
        out.push(next);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn downsample_averages_blocks() {
        let g = Grid::from_fn(4, 2, |x, y| (x + 4 * y) as f32);
        let d = g.downsample();
        assert_eq!((d.width(), d.height()), (2, 1));
        assert_eq!(d.at(0, 0), (0.0 + 1.0 + 4.0 + 5.0) / 4.0);
        assert_eq!(d.at(1, 0), (2.0 + 3.0 + 6.0 + 7.0) / 4.0);
    }

    #[test]
    fn pyramid_levels_halve() {
        let g = GrayImage::new(64, 48, 1.0);
        let p = image_pyramid(&g, 3);
        let dims: Vec<_> = p.iter().map(|i| (i.width(), i.height())).collect();
        assert_eq!(dims, vec![(64, 48), (32, 24), (16, 12)]);
    }
}
