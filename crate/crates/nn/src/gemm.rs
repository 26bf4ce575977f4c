//! Strided general matrix multiply on top of `matrixmultiply`.

#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    data: &'a [f64],
    offset: usize,
    rs: usize,
    cs: usize,
}

pub(crate) struct MatMut<'a> {
    data: &'a mut [f64],
    offset: usize,
    rs: usize,
    cs: usize,
}

impl<'a> MatRef<'a> {
    pub fn row_major(data: &'a [f64], cols: usize) -> Self {
        MatRef {
            data,
            offset: 0,
            rs: cols,
            cs: 1,
        }
    }

    pub fn strided(data: &'a [f64], offset: usize, rs: usize, cs: usize) -> Self {
        MatRef {
            data,
            offset,
            rs,
            cs,
        }
    }

    /// The same storage viewed as its transpose.
    pub fn t(self) -> Self {
        MatRef {
            rs: self.cs,
            cs: self.rs,
            ..self
        }
    }

    fn check(&self, rows: usize, cols: usize) {
        if rows > 0 && cols > 0 {
            let last = self.offset + (rows - 1) * self.rs + (cols - 1) * self.cs;
            assert!(last < self.data.len(), "gemm operand out of bounds");
        }
    }
}

impl<'a> MatMut<'a> {
    pub fn row_major(data: &'a mut [f64], cols: usize) -> Self {
        MatMut {
            data,
            offset: 0,
            rs: cols,
            cs: 1,
        }
    }

    pub fn strided(data: &'a mut [f64], offset: usize, rs: usize, cs: usize) -> Self {
        MatMut {
            data,
            offset,
            rs,
            cs,
        }
    }

    fn check(&self, rows: usize, cols: usize) {
        if rows > 0 && cols > 0 {
            let last = self.offset + (rows - 1) * self.rs + (cols - 1) * self.cs;
            assert!(last < self.data.len(), "gemm output out of bounds");
        }
    }
}

/// `c <- alpha * a[m,k] * b[k,n] + beta * c[m,n]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: MatRef<'_>,
    b: MatRef<'_>,
    beta: f64,
    c: MatMut<'_>,
) {
    if m == 0 || n == 0 {
        return;
    }
    a.check(m, k);
    b.check(k, n);
    c.check(m, n);
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let idx = c.offset + i * c.rs + j * c.cs;
                c.data[idx] *= beta;
            }
        }
        return;
    }
    // SAFETY: every index touched by dgemm lies within the bounds asserted
    // by the `check` calls above, and `c` is uniquely borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr().add(a.offset),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr().add(b.offset),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.data.as_mut_ptr().add(c.offset),
            c.rs as isize,
            c.cs as isize,
        );
    }
}
