//! Dense f64 tensors and reverse-mode automatic differentiation.
//!
//! Everything in the simulator computes in f64 on row-major buffers. The
//! [`Tape`] records a forward computation and replays it in reverse to
//! produce gradients; [`adamw_step`] consumes those gradients.

mod adamw;
mod tape;

pub use adamw::{adamw_step, AdamWConfig, AdamWState, Optimizer};
pub use tape::{NormMode, PoolMode, Tape, TensorId};

use crate::error::{Error, Result};
use crate::rng::gaussian;

/// Row-major dense tensor. The shape invariant `product(shape) == data.len()`
/// is enforced by every constructor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() || shape.is_empty() {
            return Err(Error::invalid(
                "Tensor::new",
                format!("shape {:?} does not describe {} elements", shape, data.len()),
            ));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
            requires_grad: false,
            grad: None,
        }
    }

    /// Gaussian init with standard deviation `std`.
    pub fn randn(shape: Vec<usize>, std: f64, rng: &mut impl rand::Rng) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| gaussian(rng) * std).collect();
        Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn trainable(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn accumulate_grad(&mut self, g: &[f64]) {
        let grad = self.grad.get_or_insert_with(|| vec![0.0; self.data.len()]);
        for (dst, src) in grad.iter_mut().zip(g) {
            *dst += src;
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }
}

// ── scalar special functions ──

const LN_GAMMA_HALF: f64 = 0.5723649429247001; // ln Γ(1/2) = ln √π

/// Error function, full double precision, via the regularized incomplete
/// gamma function: erf(x) = sign(x) · P(1/2, x²). Series expansion for small
/// arguments, Lentz continued fraction for large ones.
pub fn erf(x: f64) -> f64 {
    if x == 0.0 {
        return 0.0;
    }
    let z = x * x;
    if z > 40.0 {
        return if x > 0.0 { 1.0 } else { -1.0 };
    }
    let p = if z < 1.5 {
        lower_gamma_half_series(z)
    } else {
        1.0 - upper_gamma_half_cf(z)
    };
    if x > 0.0 {
        p
    } else {
        -p
    }
}

/// P(1/2, z) by power series.
fn lower_gamma_half_series(z: f64) -> f64 {
    let a = 0.5;
    let mut ap = a;
    let mut sum = 1.0 / a;
    let mut del = sum;
    for _ in 0..200 {
        ap += 1.0;
        del *= z / ap;
        sum += del;
        if del.abs() < sum.abs() * 1e-17 {
            break;
        }
    }
    sum * (-z + a * z.ln() - LN_GAMMA_HALF).exp()
}

/// Q(1/2, z) by modified Lentz continued fraction.
fn upper_gamma_half_cf(z: f64) -> f64 {
    let a = 0.5;
    const TINY: f64 = 1e-300;
    let mut b = z + 1.0 - a;
    let mut c = 1.0 / TINY;
    let mut d = 1.0 / b;
    let mut h = d;
    for i in 1..200 {
        let an = -(i as f64) * (i as f64 - a);
        b += 2.0;
        d = an * d + b;
        if d.abs() < TINY {
            d = TINY;
        }
        c = b + an / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < 1e-17 {
            break;
        }
    }
    (-z + a * z.ln() - LN_GAMMA_HALF).exp() * h
}

const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_TAU: f64 = 0.3989422804014327; // 1/√(2π)

/// Exact GeLU: 0.5 · x · (1 + erf(x/√2)).
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + erf(x * FRAC_1_SQRT_2))
}

/// d/dx of exact GeLU: Φ(x) + x·φ(x).
pub fn gelu_grad_scalar(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + erf(x * FRAC_1_SQRT_2));
    let pdf = INV_SQRT_TAU * (-0.5 * x * x).exp();
    cdf + x * pdf
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent oracle: Maclaurin series of erf, accurate for |x| <= 1.5.
    fn erf_series(x: f64) -> f64 {
        let mut term = x;
        let mut sum = x;
        for n in 1..80 {
            let nf = n as f64;
            term *= -x * x / nf;
            sum += term / (2.0 * nf + 1.0);
        }
        sum * 2.0 / std::f64::consts::PI.sqrt()
    }

    #[test]
    fn erf_matches_series_oracle_at_small_arguments() {
        for &x in &[0.01, 0.1, 0.25, 0.5, FRAC_1_SQRT_2, 1.0, 1.4] {
            let e = erf(x);
            let o = erf_series(x);
            assert!((e - o).abs() < 1e-14, "erf({x}) = {e}, series {o}");
            assert!((erf(-x) + o).abs() < 1e-14, "erf odd symmetry at {x}");
        }
    }

    #[test]
    fn erf_matches_published_constants() {
        // Classical table values, 16 significant digits.
        let cases = [
            (0.5, 0.5204998778130465),
            (1.0, 0.8427007929497149),
            (2.0, 0.9953222650189527),
            (3.0, 0.9999779095030014),
        ];
        for (x, want) in cases {
            assert!((erf(x) - want).abs() < 2e-15, "erf({x}) = {}", erf(x));
        }
    }

    #[test]
    fn erf_limits_and_monotonicity() {
        assert_eq!(erf(0.0), 0.0);
        assert_eq!(erf(10.0), 1.0);
        assert_eq!(erf(-10.0), -1.0);
        let mut prev = -1.0;
        for i in -60..=60 {
            let v = erf(i as f64 * 0.1);
            assert!(v >= prev, "erf not monotone at {}", i as f64 * 0.1);
            prev = v;
        }
    }

    #[test]
    fn gelu_scalar_reference_points() {
        assert_eq!(gelu_scalar(0.0), 0.0);
        assert!((gelu_scalar(10.0) - 10.0).abs() < 1e-6);
        assert!(gelu_scalar(-10.0).abs() < 1e-6);
        // gelu(1) = 0.5 · (1 + erf(1/√2)) against the series oracle.
        let want = 0.5 * (1.0 + erf_series(FRAC_1_SQRT_2));
        assert!((gelu_scalar(1.0) - want).abs() < 1e-12);
    }

    #[test]
    fn gelu_grad_matches_central_difference() {
        let h = 1e-6;
        for i in -40..=40 {
            let x = i as f64 * 0.1;
            let fd = (gelu_scalar(x + h) - gelu_scalar(x - h)) / (2.0 * h);
            let an = gelu_grad_scalar(x);
            assert!((fd - an).abs() < 1e-8, "gelu'({x}): analytic {an}, fd {fd}");
        }
    }

    #[test]
    fn tensor_shape_invariant_is_enforced() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![], vec![]).is_err());
    }

    #[test]
    fn grad_accumulation_adds() {
        let mut t = Tensor::zeros(vec![3]);
        t.accumulate_grad(&[1.0, 2.0, 3.0]);
        t.accumulate_grad(&[1.0, 1.0, 1.0]);
        assert_eq!(t.grad.as_deref(), Some(&[2.0, 3.0, 4.0][..]));
        t.zero_grad();
        assert!(t.grad.is_none());
    }
}
