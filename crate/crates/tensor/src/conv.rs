//! 3D convolution via chunked im2col and a dense matrix product.

use crate::scalar::{gemm, MatLayout};
use crate::{Scalar, Shape5, Tensor};

/// Upper bound on the element count of one im2col buffer.
const COLUMN_BUDGET: usize = 1 << 21;

/// Geometry of a 3D convolution; every triple is ordered `(x, y, z)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ConvSpec {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub dilation: [usize; 3],
    pub padding: [usize; 3],
}

impl ConvSpec {
    /// Stride 1, dilation 1, padding that preserves the spatial shape (odd kernels).
    pub fn same(kernel: [usize; 3]) -> Self {
        ConvSpec { kernel, stride: [1; 3], dilation: [1; 3], padding: kernel.map(|k| (k - 1) / 2) }
    }

    /// Shape-preserving dilated convolution.
    pub fn dilated(kernel: [usize; 3], dilation: usize) -> Self {
        ConvSpec {
            kernel,
            stride: [1; 3],
            dilation: [dilation; 3],
            padding: kernel.map(|k| dilation * (k - 1) / 2),
        }
    }

    pub fn pointwise() -> Self {
        Self::same([1, 1, 1])
    }

    pub fn with_stride(mut self, stride: [usize; 3]) -> Self {
        self.stride = stride;
        self
    }

    pub fn taps(&self) -> usize {
        self.kernel.iter().product()
    }

    /// Extent of one kernel application in input voxels, per axis.
    pub fn receptive_extent(&self) -> [usize; 3] {
        std::array::from_fn(|a| self.dilation[a] * (self.kernel[a] - 1) + 1)
    }

    fn is_plain_pointwise(&self) -> bool {
        self.kernel == [1; 3] && self.stride == [1; 3] && self.padding == [0; 3]
    }

    /// Output spatial shape, or `None` when the kernel does not fit.
    pub fn output_spatial(&self, input: [usize; 3]) -> Option<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            let padded = input[a] + 2 * self.padding[a];
            let extent = self.receptive_extent()[a];
            if padded < extent || self.stride[a] == 0 {
                return None;
            }
            out[a] = (padded - extent) / self.stride[a] + 1;
        }
        Some(out)
    }
}

struct Geometry {
    spec: ConvSpec,
    cin: usize,
    cout: usize,
    ins: [usize; 3],
    outs: [usize; 3],
}

impl Geometry {
    fn new(x: Shape5, w: Shape5, spec: &ConvSpec) -> Self {
        assert_eq!(x.c, w.c, "conv input channels {} do not match kernel {}", x.c, w.c);
        assert_eq!(w.spatial(), spec.kernel, "kernel tensor does not match conv spec");
        let outs = spec
            .output_spatial(x.spatial())
            .unwrap_or_else(|| panic!("conv kernel {:?} does not fit input {x}", spec.kernel));
        Geometry { spec: *spec, cin: x.c, cout: w.n, ins: x.spatial(), outs }
    }

    fn rows_k(&self) -> usize {
        self.cin * self.spec.taps()
    }

    fn in_plane(&self) -> usize {
        self.ins.iter().product()
    }

    fn out_plane(&self) -> usize {
        self.outs.iter().product()
    }

    /// Output rows (fixed `(y, z)`, all `x`) per im2col chunk.
    fn chunk_rows(&self) -> usize {
        (COLUMN_BUDGET / (self.rows_k() * self.outs[0]).max(1)).max(1)
    }

    /// Valid output-x range `[lo, hi)` for a kernel tap at x offset `off`.
    fn x_range(&self, off: isize) -> (usize, usize) {
        let s = self.spec.stride[0] as isize;
        let n = self.outs[0] as isize;
        let lo = if off >= 0 { 0 } else { (-off + s - 1) / s };
        let room = self.ins[0] as isize - off;
        let hi = if room <= 0 { 0 } else { ((room + s - 1) / s).min(n) };
        (lo.min(n) as usize, hi.max(lo.min(n)) as usize)
    }

    /// Visits every (column row, output row) pair of an im2col chunk with the
    /// input line it reads from, or `None` when the line lies in the padding.
    fn for_each_line(&self, r0: usize, r1: usize, mut f: impl FnMut(usize, usize, Option<usize>, isize)) {
        let ConvSpec { kernel: k, stride: s, dilation: d, padding: p } = self.spec;
        let in_plane = self.in_plane();
        let mut row = 0;
        for ci in 0..self.cin {
            for kz in 0..k[2] {
                for ky in 0..k[1] {
                    for kx in 0..k[0] {
                        let offx = (kx * d[0]) as isize - p[0] as isize;
                        for (j, r) in (r0..r1).enumerate() {
                            let oz = r / self.outs[1];
                            let oy = r % self.outs[1];
                            let iz = (oz * s[2] + kz * d[2]) as isize - p[2] as isize;
                            let iy = (oy * s[1] + ky * d[1]) as isize - p[1] as isize;
                            let line = if iz < 0
                                || iy < 0
                                || iz >= self.ins[2] as isize
                                || iy >= self.ins[1] as isize
                            {
                                None
                            } else {
                                Some(ci * in_plane + (iz as usize * self.ins[1] + iy as usize) * self.ins[0])
                            };
                            f(row, j, line, offx);
                        }
                        row += 1;
                    }
                }
            }
        }
    }

    fn im2col<T: Scalar>(&self, x: &[T], r0: usize, r1: usize, cols: &mut [T]) {
        let ox_n = self.outs[0];
        let cp = (r1 - r0) * ox_n;
        let sx = self.spec.stride[0];
        self.for_each_line(r0, r1, |row, j, line, offx| {
            let seg = &mut cols[row * cp + j * ox_n..row * cp + (j + 1) * ox_n];
            let Some(base) = line else {
                seg.fill(T::zero());
                return;
            };
            let (lo, hi) = self.x_range(offx);
            seg[..lo].fill(T::zero());
            seg[hi..].fill(T::zero());
            if lo < hi {
                let start = (base as isize + (lo * sx) as isize + offx) as usize;
                if sx == 1 {
                    seg[lo..hi].copy_from_slice(&x[start..start + (hi - lo)]);
                } else {
                    for (i, v) in seg[lo..hi].iter_mut().enumerate() {
                        *v = x[start + i * sx];
                    }
                }
            }
        });
    }

    fn col2im<T: Scalar>(&self, cols: &[T], r0: usize, r1: usize, dx: &mut [T]) {
        let ox_n = self.outs[0];
        let cp = (r1 - r0) * ox_n;
        let sx = self.spec.stride[0];
        self.for_each_line(r0, r1, |row, j, line, offx| {
            let Some(base) = line else { return };
            let seg = &cols[row * cp + j * ox_n..row * cp + (j + 1) * ox_n];
            let (lo, hi) = self.x_range(offx);
            if lo < hi {
                let start = (base as isize + (lo * sx) as isize + offx) as usize;
                for (i, &v) in seg[lo..hi].iter().enumerate() {
                    dx[start + i * sx] += v;
                }
            }
        });
    }
}

/// `y = conv(x, w) + b` with `w` shaped `[cout, cin, kx, ky, kz]` and `b`
/// shaped `[1, cout, 1, 1, 1]`.
pub fn conv3d_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, bias: Option<&Tensor<T>>, spec: &ConvSpec) -> Tensor<T> {
    let g = Geometry::new(x.shape(), w.shape(), spec);
    let out_shape = Shape5::new(x.shape().n, g.cout, g.outs[0], g.outs[1], g.outs[2]);
    let mut y = Tensor::zeros(out_shape);
    let p_out = g.out_plane();
    let rows_k = g.rows_k();
    let in_item = g.cin * g.in_plane();
    let out_item = g.cout * p_out;
    let total_rows = g.outs[1] * g.outs[2];
    let chunk = g.chunk_rows();
    let mut cols = Vec::new();
    for n in 0..x.shape().n {
        let xi = &x.data()[n * in_item..(n + 1) * in_item];
        let yi = &mut y.data_mut()[n * out_item..(n + 1) * out_item];
        if spec.is_plain_pointwise() {
            gemm(
                g.cout,
                g.cin,
                p_out,
                T::one(),
                w.data(),
                MatLayout::row_major(0, rows_k),
                xi,
                MatLayout::row_major(0, p_out),
                T::zero(),
                yi,
                MatLayout::row_major(0, p_out),
            );
        } else {
            let mut r0 = 0;
            while r0 < total_rows {
                let r1 = (r0 + chunk).min(total_rows);
                let cp = (r1 - r0) * g.outs[0];
                cols.resize(rows_k * cp, T::zero());
                g.im2col(xi, r0, r1, &mut cols);
                gemm(
                    g.cout,
                    rows_k,
                    cp,
                    T::one(),
                    w.data(),
                    MatLayout::row_major(0, rows_k),
                    &cols,
                    MatLayout::row_major(0, cp),
                    T::zero(),
                    yi,
                    MatLayout { offset: r0 * g.outs[0], row_stride: p_out, col_stride: 1 },
                );
                r0 = r1;
            }
        }
        if let Some(b) = bias {
            for (co, plane) in yi.chunks_mut(p_out).enumerate() {
                let bv = b.data()[co];
                plane.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    y
}

pub struct ConvGrads<T> {
    /// `None` when the caller did not request the input gradient.
    pub dx: Option<Tensor<T>>,
    pub dw: Tensor<T>,
    pub db: Option<Tensor<T>>,
}

pub fn conv3d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    with_bias: bool,
    spec: &ConvSpec,
    dy: &Tensor<T>,
    need_dx: bool,
) -> ConvGrads<T> {
    let g = Geometry::new(x.shape(), w.shape(), spec);
    let p_out = g.out_plane();
    assert_eq!(dy.shape(), Shape5::new(x.shape().n, g.cout, g.outs[0], g.outs[1], g.outs[2]));
    let rows_k = g.rows_k();
    let in_item = g.cin * g.in_plane();
    let out_item = g.cout * p_out;
    let total_rows = g.outs[1] * g.outs[2];
    let chunk = g.chunk_rows();

    let mut dw = Tensor::zeros(w.shape());
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    let mut cols = Vec::new();
    let mut dcols = Vec::new();
    for n in 0..x.shape().n {
        let xi = &x.data()[n * in_item..(n + 1) * in_item];
        let dyi = &dy.data()[n * out_item..(n + 1) * out_item];
        if spec.is_plain_pointwise() {
            gemm(
                g.cout,
                p_out,
                g.cin,
                T::one(),
                dyi,
                MatLayout::row_major(0, p_out),
                xi,
                MatLayout::transposed(0, p_out),
                T::one(),
                dw.data_mut(),
                MatLayout::row_major(0, rows_k),
            );
            if let Some(dx) = dx.as_mut() {
                gemm(
                    g.cin,
                    g.cout,
                    p_out,
                    T::one(),
                    w.data(),
                    MatLayout::transposed(0, rows_k),
                    dyi,
                    MatLayout::row_major(0, p_out),
                    T::zero(),
                    &mut dx.data_mut()[n * in_item..(n + 1) * in_item],
                    MatLayout::row_major(0, p_out),
                );
            }
            continue;
        }
        let mut r0 = 0;
        while r0 < total_rows {
            let r1 = (r0 + chunk).min(total_rows);
            let cp = (r1 - r0) * g.outs[0];
            let dy_chunk = MatLayout { offset: r0 * g.outs[0], row_stride: p_out, col_stride: 1 };
            cols.resize(rows_k * cp, T::zero());
            g.im2col(xi, r0, r1, &mut cols);
            gemm(
                g.cout,
                cp,
                rows_k,
                T::one(),
                dyi,
                dy_chunk,
                &cols,
                MatLayout::transposed(0, cp),
                T::one(),
                dw.data_mut(),
                MatLayout::row_major(0, rows_k),
            );
            if let Some(dx) = dx.as_mut() {
                dcols.resize(rows_k * cp, T::zero());
                gemm(
                    rows_k,
                    g.cout,
                    cp,
                    T::one(),
                    w.data(),
                    MatLayout::transposed(0, rows_k),
                    dyi,
                    dy_chunk,
                    T::zero(),
                    &mut dcols,
                    MatLayout::row_major(0, cp),
                );
                g.col2im(&dcols, r0, r1, &mut dx.data_mut()[n * in_item..(n + 1) * in_item]);
            }
            r0 = r1;
        }
    }
    let db = with_bias.then(|| {
        let mut db = Tensor::zeros(Shape5::new(1, g.cout, 1, 1, 1));
        for n in 0..x.shape().n {
            for co in 0..g.cout {
                db.data_mut()[co] += dy.plane(n, co).iter().copied().sum::<T>();
            }
        }
        db
    });
    ConvGrads { dx, dw, db }
}
