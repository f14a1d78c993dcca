/// Row-major `W×H` raster. Cell `(x, y)` lives at `data[y * w + x]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid<T> {
    w: usize,
    h: usize,
    data: Vec<T>,
}

impl<T: Clone> Grid<T> {
    pub fn filled(w: usize, h: usize, value: T) -> Self {
        Self {
            w,
            h,
            data: vec![value; w * h],
        }
    }
}

impl<T> Grid<T> {
    /// Returns `None` when `data.len() != w * h`.
    pub fn from_vec(w: usize, h: usize, data: Vec<T>) -> Option<Self> {
        (data.len() == w * h).then_some(Self { w, h, data })
    }

    pub fn from_fn(w: usize, h: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                data.push(f(x, y));
            }
        }
        Self { w, h, data }
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.w, self.h)
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn get(&self, x: usize, y: usize) -> &T {
        &self.data[y * self.w + x]
    }

    pub fn set(&mut self, x: usize, y: usize, value: T) {
        self.data[y * self.w + x] = value;
    }

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> Grid<U> {
        Grid {
            w: self.w,
            h: self.h,
            data: self.data.iter().map(f).collect(),
        }
    }
}

impl<T: Copy> Grid<T> {
    pub fn at(&self, x: usize, y: usize) -> T {
        self.data[y * self.w + x]
    }

    /// Mirror left-right.
    pub fn flip_x(&self) -> Self {
        Self::from_fn(self.w, self.h, |x, y| self.at(self.w - 1 - x, y))
    }

    /// Mirror top-bottom.
    pub fn flip_y(&self) -> Self {
        Self::from_fn(self.w, self.h, |x, y| self.at(x, self.h - 1 - y))
    }
}
