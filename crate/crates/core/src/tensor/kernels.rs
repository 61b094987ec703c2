//! Raw numeric kernels shared by the graph ops. Everything here works on
//! flat row-major slices; shapes are validated by the caller.

/// Row-major matrix view description: `rows × cols` with explicit strides.
#[derive(Clone, Copy, Debug)]
pub(crate) struct MatView {
    pub rows: usize,
    pub cols: usize,
    pub row_stride: isize,
    pub col_stride: isize,
}

impl MatView {
    pub fn dense(rows: usize, cols: usize) -> Self {
        MatView {
            rows,
            cols,
            row_stride: cols as isize,
            col_stride: 1,
        }
    }

    pub fn t(self) -> Self {
        MatView {
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
        }
    }

    fn max_offset(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            return 0;
        }
        (self.rows - 1) * self.row_stride as usize + (self.cols - 1) * self.col_stride as usize
    }
}

/// `c = beta * c + a · b` where `c` is dense `a.rows × b.cols`.
pub(crate) fn gemm(a: &[f64], av: MatView, b: &[f64], bv: MatView, c: &mut [f64], beta: f64) {
    assert_eq!(av.cols, bv.rows, "gemm inner dimension");
    assert!(av.rows * av.cols == 0 || av.max_offset() < a.len(), "gemm lhs bounds");
    assert!(bv.rows * bv.cols == 0 || bv.max_offset() < b.len(), "gemm rhs bounds");
    assert_eq!(c.len(), av.rows * bv.cols, "gemm output size");
    if c.is_empty() {
        return;
    }
    if av.cols == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    // SAFETY: bounds of every view were asserted above; `c` is dense and
    // does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            av.rows,
            av.cols,
            bv.cols,
            1.0,
            a.as_ptr(),
            av.row_stride,
            av.col_stride,
            b.as_ptr(),
            bv.row_stride,
            bv.col_stride,
            beta,
            c.as_mut_ptr(),
            bv.cols as isize,
            1,
        );
    }
}

pub(crate) fn conv1d_out_len(len: usize, kernel: usize, stride: usize) -> usize {
    (len - kernel) / stride + 1
}

/// Valid 1-D convolution over `input[len × cin]` with `kernels[k × cin × cout]`.
///
/// The window for output row `t` is the contiguous slice
/// `input[t*stride*cin .. (t*stride + k)*cin]`, so the im2col matrix is a
/// strided view of the input and needs no copy.
pub(crate) fn conv1d_forward(
    input: &[f64],
    len: usize,
    cin: usize,
    kernels: &[f64],
    k: usize,
    cout: usize,
    bias: &[f64],
    stride: usize,
) -> Vec<f64> {
    let out_len = conv1d_out_len(len, k, stride);
    let mut out = Vec::with_capacity(out_len * cout);
    for _ in 0..out_len {
        out.extend_from_slice(bias);
    }
    let cols = MatView {
        rows: out_len,
        cols: k * cin,
        row_stride: (stride * cin) as isize,
        col_stride: 1,
    };
    gemm(input, cols, kernels, MatView::dense(k * cin, cout), &mut out, 1.0);
    out
}

/// Gradients of [`conv1d_forward`]; results are added into the provided buffers.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv1d_backward(
    input: &[f64],
    len: usize,
    cin: usize,
    kernels: &[f64],
    k: usize,
    cout: usize,
    stride: usize,
    grad_out: &[f64],
    grad_input: Option<&mut [f64]>,
    grad_kernels: Option<&mut [f64]>,
    grad_bias: Option<&mut [f64]>,
) {
    let out_len = conv1d_out_len(len, k, stride);
    let cols = MatView {
        rows: out_len,
        cols: k * cin,
        row_stride: (stride * cin) as isize,
        col_stride: 1,
    };
    let go = MatView::dense(out_len, cout);
    if let Some(gk) = grad_kernels {
        gemm(input, cols.t(), grad_out, go, gk, 1.0);
    }
    if let Some(gb) = grad_bias {
        for row in grad_out.chunks_exact(cout) {
            gb.iter_mut().zip(row).for_each(|(b, g)| *b += g);
        }
    }
    if let Some(gi) = grad_input {
        let mut dcols = vec![0.0; out_len * k * cin];
        gemm(
            grad_out,
            go,
            kernels,
            MatView::dense(k * cin, cout).t(),
            &mut dcols,
            0.0,
        );
        let width = k * cin;
        for (t, row) in dcols.chunks_exact(width).enumerate() {
            let start = t * stride * cin;
            gi[start..start + width]
                .iter_mut()
                .zip(row)
                .for_each(|(g, d)| *g += d);
        }
    }
}

/// Max pooling along axis 0 of a `len × channels` array with stride equal to
/// the window. Returns the pooled values and the flat argmax of each output.
pub(crate) fn maxpool1d(
    input: &[f64],
    len: usize,
    channels: usize,
    window: usize,
) -> (Vec<f64>, Vec<usize>) {
    let out_len = len / window;
    let mut out = Vec::with_capacity(out_len * channels);
    let mut arg = Vec::with_capacity(out_len * channels);
    for t in 0..out_len {
        for c in 0..channels {
            let mut best = (t * window) * channels + c;
            for w in 1..window {
                let idx = (t * window + w) * channels + c;
                if input[idx] > input[best] {
                    best = idx;
                }
            }
            out.push(input[best]);
            arg.push(best);
        }
    }
    (out, arg)
}

/// Splits a shape around `axis` into `(outer, axis_len, inner)`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Numpy-style broadcast of two shapes aligned at the trailing dimension.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` when read through the broadcast `out` shape; broadcast
/// dimensions get stride 0.
pub(crate) fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let offset = out.len() - shape.len();
    let mut strides = vec![0; out.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[i + offset] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Visits every output position of a broadcast binary op, passing
/// `(out_index, lhs_index, rhs_index)`.
pub(crate) fn for_each_broadcast(
    out: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let total: usize = out.iter().product();
    if total == 0 {
        return;
    }
    let rank = out.len();
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let last = rank - 1;
    let inner = out[last];
    let (la, lb) = (sa[last], sb[last]);
    let mut idx = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    let mut o = 0;
    while o < total {
        for j in 0..inner {
            f(o + j, ia + j * la, ib + j * lb);
        }
        o += inner;
        // carry into the outer dimensions
        let mut d = last;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < out[d] {
                break;
            }
            ia -= sa[d] * out[d];
            ib -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

/// Numerically stable logistic function.
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
