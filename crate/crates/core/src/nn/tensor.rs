use std::sync::Mutex;

use super::Real;
use crate::error::{Error, Result};

/// Dense `batch x channels x time x frequency` array. Matrices use
/// `[rows, cols, 1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub shape: [usize; 4],
    pub data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: [usize; 4], data: Vec<T>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {} values, got {}",
                shape.iter().product::<usize>(),
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: [usize; 4]) -> Self {
        Tensor {
            shape,
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    /// Values per batch item.
    pub fn item_len(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }

    pub fn item(&self, b: usize) -> &[T] {
        let n = self.item_len();
        &self.data[b * n..(b + 1) * n]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| U::of(v.f64())).collect(),
        }
    }

    /// Stack equally sized items into a `[n, c, h, w]` batch.
    pub fn stack(items: &[&[f32]], c: usize, h: usize, w: usize) -> Result<Self> {
        let len = c * h * w;
        let mut data = Vec::with_capacity(items.len() * len);
        for it in items {
            if it.len() != len {
                return Err(Error::shape(format!("item of {} values, expected {c}x{h}x{w}", it.len())));
            }
            data.extend(it.iter().map(|&v| T::of(v as f64)));
        }
        Ok(Tensor {
            shape: [items.len(), c, h, w],
            data,
        })
    }
}

const POOL_MIN: usize = 1 << 16;
const POOL_KEEP: usize = 12;

/// Keeps large activation buffers alive between batches so they are not
/// page-faulted in afresh every time.
#[derive(Debug, Default)]
pub struct Pool<T> {
    free: Mutex<Vec<Vec<T>>>,
}

impl<T: Real> Pool<T> {
    fn take(&self, n: usize) -> Vec<T> {
        if n >= POOL_MIN {
            let mut free = self.free.lock().expect("pool lock");
            let best = free
                .iter()
                .enumerate()
                .filter(|(_, v)| v.capacity() >= n && v.capacity() <= 2 * n)
                .min_by_key(|(_, v)| v.capacity())
                .map(|(i, _)| i);
            if let Some(i) = best {
                let mut v = free.swap_remove(i);
                v.clear();
                return v;
            }
        }
        Vec::with_capacity(n)
    }

    pub fn zeros(&self, shape: [usize; 4]) -> Tensor<T> {
        let n = shape.iter().product();
        let mut data = self.take(n);
        data.resize(n, T::zero());
        Tensor { shape, data }
    }

    pub fn copy_of(&self, t: &Tensor<T>) -> Tensor<T> {
        let mut data = self.take(t.data.len());
        data.extend_from_slice(&t.data);
        Tensor { shape: t.shape, data }
    }

    pub fn recycle(&self, t: Tensor<T>) {
        let v = t.data;
        if v.capacity() < POOL_MIN {
            return;
        }
        let mut free = self.free.lock().expect("pool lock");
        free.push(v);
        if free.len() > POOL_KEEP {
            let smallest = (0..free.len()).min_by_key(|&i| free[i].capacity()).expect("non-empty");
            free.swap_remove(smallest);
        }
    }
}
