//! Inner loops. Dot products use eight independent accumulators so the
//! compiler can vectorize them without reassociating a single running sum;
//! results are still bit-reproducible for a given input.

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// `y += a * x`
#[inline]
pub(crate) fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// `y += W x` for row-major `W` with `cols` columns.
pub(crate) fn matvec_acc(w: &[f64], cols: usize, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(w.len(), cols * y.len());
    for (yi, row) in y.iter_mut().zip(w.chunks_exact(cols)) {
        *yi += dot(row, x);
    }
}

/// `x_grad += W^T g`
pub(crate) fn matvec_t_acc(w: &[f64], cols: usize, g: &[f64], x_grad: &mut [f64]) {
    for (gi, row) in g.iter().zip(w.chunks_exact(cols)) {
        if *gi != 0.0 {
            axpy(*gi, row, x_grad);
        }
    }
}

/// `W_grad += g x^T`
pub(crate) fn outer_acc(g: &[f64], x: &[f64], w_grad: &mut [f64]) {
    for (gi, row) in g.iter().zip(w_grad.chunks_exact_mut(x.len())) {
        if *gi != 0.0 {
            axpy(*gi, x, row);
        }
    }
}
