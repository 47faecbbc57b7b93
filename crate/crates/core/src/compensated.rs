//! Compensated summation of products (TwoSum with FMA-exact products).

#[derive(Clone, Copy, Debug, Default)]
pub(crate) struct Accum {
    hi: f64,
    lo: f64,
}

impl Accum {
    pub(crate) fn add_prod(&mut self, a: f64, b: f64) {
        let p = a * b;
        let e = a.mul_add(b, -p);
        let s = self.hi + p;
        let bb = s - self.hi;
        self.lo += (self.hi - (s - bb)) + (p - bb) + e;
        self.hi = s;
    }

    pub(crate) fn value(self) -> f64 {
        self.hi + self.lo
    }
}

/// `Σ a_k b_k` as if computed in twice the working precision.
pub(crate) fn dot(a: impl IntoIterator<Item = f64>, b: impl IntoIterator<Item = f64>) -> f64 {
    let mut acc = Accum::default();
    for (x, y) in a.into_iter().zip(b) {
        acc.add_prod(x, y);
    }
    acc.value()
}
