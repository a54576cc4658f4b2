use super::Real;

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub t: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    /// Zero moments shaped like `params`.
    pub fn new(params: &[&[T]]) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            t: 0,
            m: params.iter().map(|p| vec![T::zero(); p.len()]).collect(),
            v: params.iter().map(|p| vec![T::zero(); p.len()]).collect(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut Vec<T>], grads: &[Vec<T>], lr: f64) {
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let (b1t, b2t) = (T::of(b1), T::of(b2));
        let (ob1, ob2) = (T::of(1.0 - b1), T::of(1.0 - b2));
        let (ic1, ic2) = (T::of(1.0 / c1), T::of(1.0 / c2));
        let (lr, eps) = (T::of(lr), T::of(self.epsilon));
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.len() {
                m[i] = b1t * m[i] + ob1 * g[i];
                v[i] = b2t * v[i] + ob2 * g[i] * g[i];
                let mh = m[i] * ic1;
                let vh = v[i] * ic2;
                p[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}
