use ndarray::{Array2, ArrayView2};

/// Bilinear resize with half-pixel centres (`align_corners = false`).
#[derive(Debug, Clone, PartialEq)]
pub struct Bilinear {
    in_hw: (usize, usize),
    out_hw: (usize, usize),
    rows: Vec<(usize, usize, f64)>,
    cols: Vec<(usize, usize, f64)>,
}

fn taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(n_in - 1);
            let hi = (lo + 1).min(n_in - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

impl Bilinear {
    pub fn new(in_hw: (usize, usize), out_hw: (usize, usize)) -> Self {
        Self {
            in_hw,
            out_hw,
            rows: taps(in_hw.0, out_hw.0),
            cols: taps(in_hw.1, out_hw.1),
        }
    }

    pub fn out_hw(&self) -> (usize, usize) {
        self.out_hw
    }

    pub fn forward(&self, input: ArrayView2<f64>) -> Array2<f64> {
        debug_assert_eq!(input.dim(), self.in_hw);
        let mut out = Array2::zeros(self.out_hw);
        for (y, &(y0, y1, wy)) in self.rows.iter().enumerate() {
            for (x, &(x0, x1, wx)) in self.cols.iter().enumerate() {
                let top = (1.0 - wx) * input[[y0, x0]] + wx * input[[y0, x1]];
                let bottom = (1.0 - wx) * input[[y1, x0]] + wx * input[[y1, x1]];
                out[[y, x]] = (1.0 - wy) * top + wy * bottom;
            }
        }
        out
    }

    /// Transpose of [`Bilinear::forward`].
    pub fn adjoint(&self, grad_out: ArrayView2<f64>) -> Array2<f64> {
        debug_assert_eq!(grad_out.dim(), self.out_hw);
        let mut g = Array2::zeros(self.in_hw);
        for (y, &(y0, y1, wy)) in self.rows.iter().enumerate() {
            for (x, &(x0, x1, wx)) in self.cols.iter().enumerate() {
                let d = grad_out[[y, x]];
                let top = (1.0 - wy) * d;
                let bottom = wy * d;
                g[[y0, x0]] += (1.0 - wx) * top;
                g[[y0, x1]] += wx * top;
                g[[y1, x0]] += (1.0 - wx) * bottom;
                g[[y1, x1]] += wx * bottom;
            }
        }
        g
    }
}
