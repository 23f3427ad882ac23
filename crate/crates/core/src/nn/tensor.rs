use crate::error::{Error, Result};
use crate::imaging::ModelImage;

/// Dense `N × C × H × W` activation tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self { n, c, h, w, data: vec![0.0; n * c * h * w] }
    }

    pub fn from_vec(n: usize, c: usize, h: usize, w: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), n * c * h * w, "tensor data length");
        Self { n, c, h, w, data }
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    #[inline]
    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn from_images(images: &[&ModelImage]) -> Result<Self> {
        let first = images.first().ok_or_else(|| Error::Empty("image batch".into()))?;
        let (h, w) = (first.height, first.width);
        let mut data = Vec::with_capacity(images.len() * 3 * h * w);
        for img in images {
            if (img.height, img.width) != (h, w) {
                return Err(Error::DimensionMismatch("images in a batch differ in size".into()));
            }
            data.extend_from_slice(&img.data);
        }
        Ok(Self { n: images.len(), c: 3, h, w, data })
    }

    /// Splits a 3-channel batch back into images, clamping into `[-1, 1]`.
    pub fn to_images(&self) -> Vec<ModelImage> {
        assert_eq!(self.c, 3, "model images have three channels");
        let per = 3 * self.plane();
        self.data
            .chunks_exact(per)
            .map(|chunk| ModelImage {
                height: self.h,
                width: self.w,
                data: chunk.iter().map(|v| v.clamp(-1.0, 1.0)).collect(),
            })
            .collect()
    }

    /// Channel-wise concatenation of two tensors with equal `n, h, w`.
    pub fn concat_channels(a: &Tensor, b: &Tensor) -> Tensor {
        assert_eq!((a.n, a.h, a.w), (b.n, b.h, b.w), "concat spatial dims");
        let (pa, pb) = (a.c * a.plane(), b.c * b.plane());
        let mut data = Vec::with_capacity(a.data.len() + b.data.len());
        for n in 0..a.n {
            data.extend_from_slice(&a.data[n * pa..(n + 1) * pa]);
            data.extend_from_slice(&b.data[n * pb..(n + 1) * pb]);
        }
        Tensor { n: a.n, c: a.c + b.c, h: a.h, w: a.w, data }
    }

    /// Inverse of [`Tensor::concat_channels`]: the first `c_first` channels and the rest.
    pub fn split_channels(&self, c_first: usize) -> (Tensor, Tensor) {
        let p = self.plane();
        let c_second = self.c - c_first;
        let mut a = Vec::with_capacity(self.n * c_first * p);
        let mut b = Vec::with_capacity(self.n * c_second * p);
        for n in 0..self.n {
            let base = n * self.c * p;
            a.extend_from_slice(&self.data[base..base + c_first * p]);
            b.extend_from_slice(&self.data[base + c_first * p..base + self.c * p]);
        }
        (
            Tensor { n: self.n, c: c_first, h: self.h, w: self.w, data: a },
            Tensor { n: self.n, c: c_second, h: self.h, w: self.w, data: b },
        )
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape(), other.shape(), "add shapes");
        self.data.iter_mut().zip(&other.data).for_each(|(a, b)| *a += b);
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
