//! Exact rational reference for linear noise schedules.

use num_bigint::BigInt;
use num_traits::{One, Signed, ToPrimitive, Zero};

/// Exact rational `num / den` with `den > 0`.
#[derive(Clone, Debug)]
pub struct Q {
    num: BigInt,
    den: BigInt,
}

impl Q {
    fn from_f64(x: f64) -> Q {
        // Every finite double is m * 2^e exactly.
        let bits = x.to_bits();
        let sign = if bits >> 63 == 1 { -1 } else { 1 };
        let exp = ((bits >> 52) & 0x7ff) as i64;
        let frac = bits & ((1u64 << 52) - 1);
        let (mant, e) = if exp == 0 {
            (frac, -1074)
        } else {
            (frac | (1u64 << 52), exp - 1075)
        };
        let m = BigInt::from(mant) * sign;
        if e >= 0 {
            Q {
                num: m << e as usize,
                den: BigInt::one(),
            }
        } else {
            Q {
                num: m,
                den: BigInt::one() << (-e) as usize,
            }
        }
    }
    fn int(n: i64) -> Q {
        Q {
            num: BigInt::from(n),
            den: BigInt::one(),
        }
    }
    fn add(&self, o: &Q) -> Q {
        Q {
            num: &self.num * &o.den + &o.num * &self.den,
            den: &self.den * &o.den,
        }
    }
    fn sub(&self, o: &Q) -> Q {
        Q {
            num: &self.num * &o.den - &o.num * &self.den,
            den: &self.den * &o.den,
        }
    }
    fn mul(&self, o: &Q) -> Q {
        Q {
            num: &self.num * &o.num,
            den: &self.den * &o.den,
        }
    }
    fn div(&self, o: &Q) -> Q {
        let (num, den) = (&self.num * &o.den, &self.den * &o.num);
        if den.is_negative() {
            Q { num: -num, den: -den }
        } else {
            Q { num, den }
        }
    }
    /// Nearest double, good to far better than 1e-15 relative.
    fn to_f64(&self) -> f64 {
        if self.num.is_zero() {
            return 0.0;
        }
        let shift = 80i64 - (self.num.bits() as i64 - self.den.bits() as i64);
        let scaled = if shift >= 0 {
            (&self.num << shift as usize) / &self.den
        } else {
            &self.num / (&self.den << (-shift) as usize)
        };
        scaled.to_f64().unwrap() * 2f64.powi(-shift as i32)
    }
    /// Keeps numbers small enough for a 1000-term product.
    fn reduce(&self, bits: u64) -> Q {
        let excess = self.den.bits().saturating_sub(bits);
        if excess == 0 {
            return self.clone();
        }
        Q {
            num: &self.num >> excess as usize,
            den: &self.den >> excess as usize,
        }
    }
}

/// Reference values per step `t = 1..=T`, in the order beta, alpha,
/// alpha_bar, 1 - alpha_bar, posterior variance, posterior x0 coefficient,
/// posterior x_t coefficient. Products are carried to 512 bits.
pub fn linear_schedule(t_max: usize, start: f64, end: f64) -> Vec<[f64; 7]> {
    let q_start = Q::from_f64(start);
    let span = Q::from_f64(end).sub(&q_start);
    let one = Q::int(1);
    let mut alpha_bar = vec![one.clone()];
    let mut betas = Vec::new();
    for t in 1..=t_max {
        let beta = q_start.add(&span.mul(&Q::int(t as i64 - 1)).div(&Q::int(t_max as i64 - 1)));
        alpha_bar.push(alpha_bar[t - 1].mul(&one.sub(&beta)).reduce(512));
        betas.push(beta);
    }
    (1..=t_max)
        .map(|t| {
            let beta = &betas[t - 1];
            let ab = &alpha_bar[t];
            let ab_prev = &alpha_bar[t - 1];
            let oma = one.sub(ab);
            let oma_prev = one.sub(ab_prev);
            [
                beta.to_f64(),
                one.sub(beta).to_f64(),
                ab.to_f64(),
                oma.to_f64(),
                beta.mul(&oma_prev).div(&oma).to_f64(),
                ab_prev.to_f64().sqrt() * beta.div(&oma).to_f64(),
                one.sub(beta).to_f64().sqrt() * oma_prev.div(&oma).to_f64(),
            ]
        })
        .collect()
}
