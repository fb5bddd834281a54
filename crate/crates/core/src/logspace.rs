//! Log-domain primitives shared by the chain inference and the Sinkhorn sweeps.

use ndarray::Array2;

/// Columns whose stabilized sum falls below this are recomputed with an exact
/// log-sum-exp.
const FAST_PATH_FLOOR: f64 = 1e-250;

/// `log Σ exp(v)`, with `-∞` for an empty or all-`-∞` input.
pub fn log_sum_exp(v: impl IntoIterator<Item = f64> + Clone) -> f64 {
    let m = v.clone().into_iter().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    if m == f64::INFINITY {
        return m;
    }
    m + v.into_iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Max-subtracted exponentials `exp(v − max v)` and the max itself.
fn stabilized(v: &[f64]) -> (f64, Vec<f64>) {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return (m, vec![0.0; v.len()]);
    }
    (m, v.iter().map(|x| (x - m).exp()).collect())
}

/// A `D×D` log-kernel `L(x, y)` prepared for repeated log-domain
/// matrix-vector products in both directions.
///
/// Each product runs in linear arithmetic against a row- or column-max
/// rescaled copy of `exp(L)`; the result is exact unless the rescaled sum
/// underflows, in which case that entry falls back to a full log-sum-exp.
#[derive(Debug, Clone)]
pub struct LogKernel {
    d: usize,
    log: Vec<f64>,
    col_max: Vec<f64>,
    // col_exp[y * d + x] = exp(L(x, y) - col_max[y])
    col_exp: Vec<f64>,
    row_max: Vec<f64>,
    // row_exp[x * d + y] = exp(L(x, y) - row_max[x])
    row_exp: Vec<f64>,
}

impl LogKernel {
    pub fn new(log: &Array2<f64>) -> Self {
        let d = log.nrows();
        assert_eq!(d, log.ncols(), "log-kernel must be square");
        let flat: Vec<f64> = log.iter().copied().collect();
        let mut row_max = vec![f64::NEG_INFINITY; d];
        let mut col_max = vec![f64::NEG_INFINITY; d];
        for x in 0..d {
            for y in 0..d {
                let v = flat[x * d + y];
                row_max[x] = row_max[x].max(v);
                col_max[y] = col_max[y].max(v);
            }
        }
        let mut row_exp = vec![0.0; d * d];
        let mut col_exp = vec![0.0; d * d];
        for x in 0..d {
            for y in 0..d {
                let v = flat[x * d + y];
                if row_max[x] > f64::NEG_INFINITY {
                    row_exp[x * d + y] = (v - row_max[x]).exp();
                }
                if col_max[y] > f64::NEG_INFINITY {
                    col_exp[y * d + x] = (v - col_max[y]).exp();
                }
            }
        }
        Self {
            d,
            log: flat,
            col_max,
            col_exp,
            row_max,
            row_exp,
        }
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    #[inline]
    pub fn log_at(&self, x: usize, y: usize) -> f64 {
        self.log[x * self.d + y]
    }

    /// `out(y) = log Σ_x exp(a(x) + L(x, y))`.
    pub fn forward(&self, a: &[f64]) -> Vec<f64> {
        let d = self.d;
        let (amax, ea) = stabilized(a);
        if amax == f64::NEG_INFINITY {
            return vec![f64::NEG_INFINITY; d];
        }
        (0..d)
            .map(|y| {
                if self.col_max[y] == f64::NEG_INFINITY {
                    return f64::NEG_INFINITY;
                }
                let col = &self.col_exp[y * d..(y + 1) * d];
                let s: f64 = col.iter().zip(&ea).map(|(k, e)| k * e).sum();
                if s > FAST_PATH_FLOOR {
                    amax + self.col_max[y] + s.ln()
                } else {
                    log_sum_exp((0..d).map(|x| a[x] + self.log[x * d + y]))
                }
            })
            .collect()
    }

    /// `out(x) = log Σ_y exp(L(x, y) + b(y))`.
    pub fn backward(&self, b: &[f64]) -> Vec<f64> {
        let d = self.d;
        let (bmax, eb) = stabilized(b);
        if bmax == f64::NEG_INFINITY {
            return vec![f64::NEG_INFINITY; d];
        }
        (0..d)
            .map(|x| {
                if self.row_max[x] == f64::NEG_INFINITY {
                    return f64::NEG_INFINITY;
                }
                let row = &self.row_exp[x * d..(x + 1) * d];
                let s: f64 = row.iter().zip(&eb).map(|(k, e)| k * e).sum();
                if s > FAST_PATH_FLOOR {
                    bmax + self.row_max[x] + s.ln()
                } else {
                    let r = &self.log[x * d..(x + 1) * d];
                    log_sum_exp(r.iter().zip(b).map(|(l, bv)| l + bv))
                }
            })
            .collect()
    }
}
