use super::scalar::Scalar;

/// Dense `(batch, height, width, channels)` tensor, channels fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4<T> {
    shape: [usize; 4],
    data: Vec<T>,
}

impl<T: Scalar> Tensor4<T> {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Self {
            shape,
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<T>) -> Self {
        assert_eq!(
            data.len(),
            shape.iter().product::<usize>(),
            "tensor data length must equal the product of {shape:?}"
        );
        Self { shape, data }
    }

    pub fn filled(shape: [usize; 4], value: T) -> Self {
        Self {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self::from_vec([1, 1, 1, 1], vec![value])
    }

    /// Converts a row-major `h×w×c` plane of `f32` values into a batch of one.
    pub fn from_hwc_f32(height: usize, width: usize, channels: usize, values: &[f32]) -> Self {
        Self::from_vec(
            [1, height, width, channels],
            values.iter().map(|&v| T::from_f64_lossy(v as f64)).collect(),
        )
    }

    pub fn to_f32_vec(&self) -> Vec<f32> {
        self.data.iter().map(|v| v.as_f64() as f32).collect()
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn height(&self) -> usize {
        self.shape[1]
    }

    pub fn width(&self) -> usize {
        self.shape[2]
    }

    pub fn channels(&self) -> usize {
        self.shape[3]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Number of pixels (`batch·height·width`).
    pub fn pixels(&self) -> usize {
        self.shape[0] * self.shape[1] * self.shape[2]
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn offset(&self, b: usize, y: usize, x: usize, c: usize) -> usize {
        ((b * self.shape[1] + y) * self.shape[2] + x) * self.shape[3] + c
    }

    #[inline]
    pub fn at(&self, b: usize, y: usize, x: usize, c: usize) -> T {
        self.data[self.offset(b, y, x, c)]
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    /// Spatial window `[y0, y0+h) × [x0, x0+w)` of every batch item.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Self {
        let [b, hh, ww, c] = self.shape;
        assert!(y0 + h <= hh && x0 + w <= ww, "crop outside tensor");
        let mut out = Vec::with_capacity(b * h * w * c);
        for bi in 0..b {
            for y in y0..y0 + h {
                let start = self.offset(bi, y, x0, 0);
                out.extend_from_slice(&self.data[start..start + w * c]);
            }
        }
        Self::from_vec([b, h, w, c], out)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor4<U> {
        Tensor4 {
            shape: self.shape,
            data: self.data.iter().map(|v| U::from_f64_lossy(v.as_f64())).collect(),
        }
    }
}
