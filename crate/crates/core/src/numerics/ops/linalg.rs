use crate::error::{Error, Result};
use crate::numerics::tape::{Backward, GradSink, Tape, Var};
use crate::numerics::tensor::Tensor;

/// `c = op(a) · op(b)` (or `c += ...` when `accumulate`), with `op` an
/// optional transpose of the row-major operand. `op(a)` is `m × k`, `op(b)`
/// is `k × n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if trans_a {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if trans_b {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above bound every access implied by the strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

struct BmmBack {
    a: Var,
    b: Var,
    trans_a: bool,
    trans_b: bool,
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
}

impl Backward for BmmBack {
    fn backward(&self, tape: &Tape, _: Var, grad: &[f64], sink: &mut GradSink<'_>) {
        let (m, k, n) = (self.m, self.k, self.n);
        let av = tape.value(self.a).data();
        let bv = tape.value(self.b).data();
        if let Some(slot) = sink.slot(self.a) {
            for i in 0..self.batch {
                let g = &grad[i * m * n..(i + 1) * m * n];
                let bi = &bv[i * k * n..(i + 1) * k * n];
                let out = &mut slot[i * m * k..(i + 1) * m * k];
                if self.trans_a {
                    gemm(k, n, m, bi, self.trans_b, g, true, out, true);
                } else {
                    gemm(m, n, k, g, false, bi, !self.trans_b, out, true);
                }
            }
        }
        if let Some(slot) = sink.slot(self.b) {
            for i in 0..self.batch {
                let g = &grad[i * m * n..(i + 1) * m * n];
                let ai = &av[i * m * k..(i + 1) * m * k];
                let out = &mut slot[i * k * n..(i + 1) * k * n];
                if self.trans_b {
                    gemm(n, m, k, g, true, ai, self.trans_a, out, true);
                } else {
                    gemm(k, m, n, ai, !self.trans_a, g, false, out, true);
                }
            }
        }
    }
}

impl Tape {
    /// Rank-2 matrix product.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Dimension {
                op: "matmul",
                left: sa,
                right: sb,
            });
        }
        self.batched(
            a,
            b,
            false,
            false,
            1,
            sa[0],
            sa[1],
            sb[1],
            vec![sa[0], sb[1]],
        )
    }

    /// Batched product over the leading axis of two rank-3 values, with
    /// optional transposes of the trailing two axes.
    pub fn bmm(&mut self, a: Var, b: Var, trans_a: bool, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let mismatch = || Error::Dimension {
            op: "bmm",
            left: sa.clone(),
            right: sb.clone(),
        };
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(mismatch());
        }
        let (m, k) = if trans_a {
            (sa[2], sa[1])
        } else {
            (sa[1], sa[2])
        };
        let (k2, n) = if trans_b {
            (sb[2], sb[1])
        } else {
            (sb[1], sb[2])
        };
        if k != k2 {
            return Err(mismatch());
        }
        self.batched(a, b, trans_a, trans_b, sa[0], m, k, n, vec![sa[0], m, n])
    }

    /// `x[..., k] · w[k, n]` applied to every row of `x`.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let k = *sx.last().unwrap();
        if sw.len() != 2 || sw[0] != k {
            return Err(Error::Dimension {
                op: "linear",
                left: sx,
                right: sw,
            });
        }
        let rows = sx.iter().product::<usize>() / k;
        let mut out_shape = sx;
        *out_shape.last_mut().unwrap() = sw[1];
        self.batched(x, w, false, false, 1, rows, k, sw[1], out_shape)
    }

    #[allow(clippy::too_many_arguments)]
    fn batched(
        &mut self,
        a: Var,
        b: Var,
        trans_a: bool,
        trans_b: bool,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        out_shape: Vec<usize>,
    ) -> Result<Var> {
        let mut data = vec![0.0; batch * m * n];
        {
            let (av, bv) = (self.value(a).data(), self.value(b).data());
            for i in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &av[i * m * k..(i + 1) * m * k],
                    trans_a,
                    &bv[i * k * n..(i + 1) * k * n],
                    trans_b,
                    &mut data[i * m * n..(i + 1) * m * n],
                    false,
                );
            }
        }
        let value = Tensor::from_parts(out_shape, data);
        Ok(self.push_op(
            value,
            &[a, b],
            BmmBack {
                a,
                b,
                trans_a,
                trans_b,
                batch,
                m,
                k,
                n,
            },
        ))
    }
}
