use sha2::{Digest, Sha256};

/// Uniform access to every learnable tensor of a component, in a fixed order.
///
/// Gradients use the same concrete type as the parameters they belong to, so
/// a gradient buffer is just `zeros_like(model)` and optimizers can work on
/// flattened vectors.
pub trait Parameters {
    fn visit(&self, f: &mut dyn FnMut(&[f64]));

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64]));

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |p| n += p.len());
        n
    }

    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.visit(&mut |p| out.extend_from_slice(p));
        out
    }

    /// Overwrites all parameters from `flat`, which must have `num_params()` entries.
    fn load_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.num_params(), "flat parameter length");
        let mut offset = 0;
        self.visit_mut(&mut |p| {
            p.copy_from_slice(&flat[offset..offset + p.len()]);
            offset += p.len();
        });
    }

    fn zero(&mut self) {
        self.visit_mut(&mut |p| p.fill(0.0));
    }

    /// Hex SHA-256 over the little-endian parameter bytes.
    fn param_digest(&self) -> String {
        let mut hasher = Sha256::new();
        self.visit(&mut |p| {
            for v in p {
                hasher.update(v.to_le_bytes());
            }
        });
        hex::encode(hasher.finalize())
    }

    fn all_finite(&self) -> bool {
        let mut ok = true;
        self.visit(&mut |p| ok &= p.iter().all(|v| v.is_finite()));
        ok
    }
}

/// A copy of `value` with every parameter set to zero.
pub fn zeros_like<T: Parameters + Clone>(value: &T) -> T {
    let mut z = value.clone();
    z.zero();
    z
}

pub(crate) fn slice_mut<D: ndarray::Dimension>(a: &mut ndarray::Array<f64, D>) -> &mut [f64] {
    a.as_slice_mut().expect("parameters are stored in standard layout")
}

pub(crate) fn slice<D: ndarray::Dimension>(a: &ndarray::Array<f64, D>) -> &[f64] {
    a.as_slice().expect("parameters are stored in standard layout")
}
