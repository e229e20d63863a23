use crate::error::{Error, Result};

/// Dense (N, C, H, W) array of 64-bit reals, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    shape: [usize; 4],
    data: Vec<f64>,
}

impl Tensor4 {
    pub fn new(shape: [usize; 4], data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("zero dimension in {shape:?}")));
        }
        if data.len() != shape.iter().product::<usize>() {
            return Err(Error::Shape(format!(
                "{shape:?} needs {} values, got {}",
                shape.iter().product::<usize>(),
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: [usize; 4]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: [usize; 4], v: f64) -> Self {
        assert!(shape.iter().all(|&d| d > 0), "zero dimension in {shape:?}");
        Self {
            shape,
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: [1, 1, 1, 1],
            data: vec![v],
        }
    }

    pub fn from_fn(shape: [usize; 4], mut f: impl FnMut([usize; 4]) -> f64) -> Self {
        let mut t = Self::zeros(shape);
        let [n, c, h, w] = shape;
        let mut k = 0;
        for a in 0..n {
            for b in 0..c {
                for i in 0..h {
                    for j in 0..w {
                        t.data[k] = f([a, b, i, j]);
                        k += 1;
                    }
                }
            }
        }
        t
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn n(&self) -> usize {
        self.shape[0]
    }

    pub fn c(&self) -> usize {
        self.shape[1]
    }

    pub fn h(&self) -> usize {
        self.shape[2]
    }

    pub fn w(&self) -> usize {
        self.shape[3]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn plane_len(&self) -> usize {
        self.shape[2] * self.shape[3]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn offset(&self, n: usize, c: usize, i: usize, j: usize) -> usize {
        ((n * self.shape[1] + c) * self.shape[2] + i) * self.shape[3] + j
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, i: usize, j: usize) -> f64 {
        self.data[self.offset(n, c, i, j)]
    }

    pub fn plane(&self, n: usize, c: usize) -> &[f64] {
        let p = self.plane_len();
        let start = (n * self.shape[1] + c) * p;
        &self.data[start..start + p]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [f64] {
        let p = self.plane_len();
        let start = (n * self.shape[1] + c) * p;
        &mut self.data[start..start + p]
    }

    /// Contiguous slice holding all channels of sample `n`.
    pub fn sample(&self, n: usize) -> &[f64] {
        let s = self.shape[1] * self.plane_len();
        &self.data[n * s..(n + 1) * s]
    }

    /// Value of a [1,1,1,1] tensor.
    pub fn item(&self) -> Result<f64> {
        if self.shape == [1, 1, 1, 1] {
            Ok(self.data[0])
        } else {
            Err(Error::NotScalar(self.shape))
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor4 {
        Tensor4 {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn check_same_shape(&self, other: &Tensor4, what: &str) -> Result<()> {
        if self.shape == other.shape {
            Ok(())
        } else {
            Err(Error::Shape(format!("{what}: {:?} vs {:?}", self.shape, other.shape)))
        }
    }

    pub fn add_assign(&mut self, other: &Tensor4) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Stacks single-sample tensors of identical shape along the batch axis.
    pub fn stack(items: &[Tensor4]) -> Result<Tensor4> {
        let first = items.first().ok_or_else(|| Error::Shape("stack of nothing".into()))?;
        let [_, c, h, w] = first.shape;
        let mut data = Vec::with_capacity(items.len() * c * h * w);
        let mut n = 0;
        for t in items {
            if t.shape[1..] != first.shape[1..] {
                return Err(Error::Shape(format!("stack {:?} vs {:?}", t.shape, first.shape)));
            }
            data.extend_from_slice(&t.data);
            n += t.shape[0];
        }
        Tensor4::new([n, c, h, w], data)
    }

    /// Copies sample `n` out as a batch of one.
    pub fn select(&self, n: usize) -> Tensor4 {
        let [_, c, h, w] = self.shape;
        Tensor4 {
            shape: [1, c, h, w],
            data: self.sample(n).to_vec(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn indexing_is_row_major() {
        let t = Tensor4::from_fn([2, 3, 4, 5], |[a, b, i, j]| (1000 * a + 100 * b + 10 * i + j) as f64);
        assert_eq!(t.at(1, 2, 3, 4), 1234.0);
        assert_eq!(t.plane(1, 1)[7], 1112.0);
        assert_eq!(t.sample(1)[0], 1000.0);
        assert_eq!(t.select(1).at(0, 2, 3, 4), 1234.0);
    }

    #[test]
    fn construction_checks() {
        assert!(Tensor4::new([1, 0, 2, 2], vec![]).is_err());
        assert!(Tensor4::new([1, 1, 2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor4::zeros([1, 2, 2, 2]).item().is_err());
        assert_eq!(Tensor4::scalar(3.5).item().unwrap(), 3.5);
    }

    #[test]
    fn stacking() {
        let a = Tensor4::filled([1, 2, 3, 3], 1.0);
        let b = Tensor4::filled([2, 2, 3, 3], 2.0);
        let s = Tensor4::stack(&[a, b]).unwrap();
        assert_eq!(s.shape(), [3, 2, 3, 3]);
        assert_eq!(s.at(2, 1, 2, 2), 2.0);
        assert!(Tensor4::stack(&[Tensor4::zeros([1, 1, 2, 2]), Tensor4::zeros([1, 2, 2, 2])]).is_err());
    }
}
