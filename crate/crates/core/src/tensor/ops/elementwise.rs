use super::{is_scalar_shape, same_shape};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor, Var};

fn zip_map<T: Real>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

#[inline]
pub(crate) fn sigmoid_scalar<T: Real>(x: T) -> T {
    // split by sign so exp never overflows
    if x >= T::ZERO {
        T::ONE / (T::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::ONE + e)
    }
}

#[inline]
pub(crate) fn gelu_scalar<T: Real>(x: T) -> T {
    let half = T::from_f64(0.5);
    half * x * (T::ONE + (x / T::from_f64(SQRT_2)).erf())
}

#[inline]
fn gelu_grad_scalar<T: Real>(x: T) -> T {
    let half = T::from_f64(0.5);
    let cdf = half * (T::ONE + (x / T::from_f64(SQRT_2)).erf());
    let pdf = T::from_f64(INV_SQRT_2PI) * (-(half * x * x)).exp();
    cdf + x * pdf
}

impl<'g, T: Real> Var<'g, T> {
    pub fn add(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        let shape = same_shape("add", &self, &other)?;
        let out = zip_map(self.value().data(), other.value().data(), |a, b| a + b);
        self.graph().record("add", Tensor::new(shape, out)?, &[self, other], |a| {
            vec![Some(a.grad.to_vec()), Some(a.grad.to_vec())]
        })
    }

    pub fn sub(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        let shape = same_shape("sub", &self, &other)?;
        let out = zip_map(self.value().data(), other.value().data(), |a, b| a - b);
        self.graph().record("sub", Tensor::new(shape, out)?, &[self, other], |a| {
            vec![Some(a.grad.to_vec()), Some(a.grad.iter().map(|&g| -g).collect())]
        })
    }

    pub fn mul(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        let shape = same_shape("mul", &self, &other)?;
        let out = zip_map(self.value().data(), other.value().data(), |a, b| a * b);
        self.graph().record("mul", Tensor::new(shape, out)?, &[self, other], |a| {
            vec![
                Some(zip_map(a.grad, a.input(1).data(), |g, y| g * y)),
                Some(zip_map(a.grad, a.input(0).data(), |g, x| g * x)),
            ]
        })
    }

    pub fn add_scalar(self, c: f64) -> Result<Var<'g, T>> {
        let c = T::from_f64(c);
        let value = self.value().map(|v| v + c);
        self.graph().record("add_scalar", value, &[self], |a| vec![Some(a.grad.to_vec())])
    }

    pub fn mul_scalar(self, c: f64) -> Result<Var<'g, T>> {
        let c = T::from_f64(c);
        let value = self.value().map(|v| v * c);
        self.graph().record("mul_scalar", value, &[self], move |a| {
            vec![Some(a.grad.iter().map(|&g| g * c).collect())]
        })
    }

    pub fn neg(self) -> Result<Var<'g, T>> {
        self.mul_scalar(-1.0)
    }

    /// `s · x` for a one-element `s` (scalar-tensor broadcasting).
    pub fn scale_by(self, s: Var<'g, T>) -> Result<Var<'g, T>> {
        if !is_scalar_shape(&s.shape()) {
            return Err(Error::shape("scale_by", format!("scale must have one element, got {:?}", s.shape())));
        }
        let sv = s.item();
        let value = self.value().map(|v| v * sv);
        self.graph().record("scale_by", value, &[self, s], |a| {
            let sv = a.input(1).data()[0];
            let ds: T = a.grad.iter().zip(a.input(0).data()).map(|(&g, &x)| g * x).sum();
            vec![Some(a.grad.iter().map(|&g| g * sv).collect()), Some(vec![ds])]
        })
    }

    /// `x / s` for a one-element, nonzero `s`.
    pub fn div_by(self, s: Var<'g, T>) -> Result<Var<'g, T>> {
        if !is_scalar_shape(&s.shape()) {
            return Err(Error::shape("div_by", format!("divisor must have one element, got {:?}", s.shape())));
        }
        let sv = s.item();
        if sv == T::ZERO {
            return Err(Error::invalid("div_by", "division by zero"));
        }
        let value = self.value().map(|v| v / sv);
        self.graph().record("div_by", value, &[self, s], |a| {
            let sv = a.input(1).data()[0];
            let ds: T = a
                .grad
                .iter()
                .zip(a.input(0).data())
                .map(|(&g, &x)| -(g * x) / (sv * sv))
                .sum();
            vec![Some(a.grad.iter().map(|&g| g / sv).collect()), Some(vec![ds])]
        })
    }

    /// Adds `bias[n]` along the trailing axis of `x[..., n]`.
    pub fn add_trailing(self, bias: Var<'g, T>) -> Result<Var<'g, T>> {
        let shape = self.shape();
        let n = *shape.last().ok_or_else(|| Error::shape("add_trailing", "rank-0 input"))?;
        if bias.shape() != [n] {
            return Err(Error::shape("add_trailing", format!("bias {:?} does not match trailing extent {n}", bias.shape())));
        }
        let b = bias.value();
        let out: Vec<T> = self
            .value()
            .data()
            .chunks(n)
            .flat_map(|row| row.iter().zip(b.data()).map(|(&x, &bv)| x + bv))
            .collect();
        self.graph().record("add_trailing", Tensor::new(shape, out)?, &[self, bias], move |a| {
            let mut db = vec![T::ZERO; n];
            for row in a.grad.chunks(n) {
                db.iter_mut().zip(row).for_each(|(d, &g)| *d += g);
            }
            vec![Some(a.grad.to_vec()), Some(db)]
        })
    }

    pub fn sigmoid(self) -> Result<Var<'g, T>> {
        let value = self.value().map(sigmoid_scalar);
        self.graph().record("sigmoid", value, &[self], |a| {
            vec![Some(zip_map(a.grad, a.out.data(), |g, s| g * s * (T::ONE - s)))]
        })
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(self) -> Result<Var<'g, T>> {
        let value = self.value().map(gelu_scalar);
        self.graph().record("gelu", value, &[self], |a| {
            vec![Some(zip_map(a.grad, a.input(0).data(), |g, x| g * gelu_grad_scalar(x)))]
        })
    }

    /// Elementwise absolute value; the subgradient at 0 is 0.
    pub fn abs(self) -> Result<Var<'g, T>> {
        let value = self.value().map(|v| v.abs());
        self.graph().record("abs", value, &[self], |a| {
            vec![Some(zip_map(a.grad, a.input(0).data(), |g, x| {
                if x > T::ZERO {
                    g
                } else if x < T::ZERO {
                    -g
                } else {
                    T::ZERO
                }
            }))]
        })
    }
}
