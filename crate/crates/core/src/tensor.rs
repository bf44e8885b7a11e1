//! Dense NCHW tensors and the scalar trait shared by the 32-bit training path
//! and the 64-bit checking path.

use std::fmt;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::Rng;

use crate::error::{Error, Result};

/// Floating-point element type of a [`Tensor`].
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + 'static
{
    const BYTES: usize;

    /// `c <- alpha * a·b + beta * c` on strided row/column views.
    ///
    /// # Safety
    /// Every index reachable through the given dimensions and strides must lie
    /// inside the corresponding allocation, and `c` must not alias `a` or `b`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal representable")
    }
}

impl Real for f32 {
    const BYTES: usize = 4;

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Real for f64 {
    const BYTES: usize = 8;

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// A strided matrix view used by [`gemm`].
#[derive(Clone, Copy)]
pub(crate) struct MatView {
    pub offset: usize,
    pub rs: usize,
    pub cs: usize,
}

impl MatView {
    pub fn row_major(offset: usize, cols: usize) -> Self {
        MatView { offset, rs: cols, cs: 1 }
    }

    /// Row-major storage of the transposed matrix: logical (r, c) lives at c * rows + r.
    pub fn transposed(offset: usize, stored_cols: usize) -> Self {
        MatView { offset, rs: 1, cs: stored_cols }
    }

    fn last(&self, rows: usize, cols: usize) -> usize {
        self.offset + (rows - 1) * self.rs + (cols - 1) * self.cs
    }
}

/// Bounds-checked strided GEMM: `c[m×n] = a[m×k]·b[k×n] + beta·c`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    av: MatView,
    b: &[T],
    bv: MatView,
    beta: T,
    c: &mut [T],
    cv: MatView,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let idx = cv.offset + i * cv.rs + j * cv.cs;
                c[idx] = if beta == T::zero() { T::zero() } else { c[idx] * beta };
            }
        }
        return;
    }
    assert!(av.last(m, k) < a.len(), "gemm: lhs view out of bounds");
    assert!(bv.last(k, n) < b.len(), "gemm: rhs view out of bounds");
    assert!(cv.last(m, n) < c.len(), "gemm: output view out of bounds");
    // SAFETY: bounds asserted above; `c` is a distinct mutable borrow.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.as_ptr().add(av.offset),
            av.rs as isize,
            av.cs as isize,
            b.as_ptr().add(bv.offset),
            bv.rs as isize,
            bv.cs as isize,
            beta,
            c.as_mut_ptr().add(cv.offset),
            cv.rs as isize,
            cv.cs as isize,
        );
    }
}

/// Batch, channel, height and width extents of a tensor.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const SCALAR: Shape = Shape { n: 1, c: 1, h: 1, w: 1 };

    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    pub fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn hw(&self) -> usize {
        self.h * self.w
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    pub fn is_scalar(&self) -> bool {
        *self == Shape::SCALAR
    }

    pub fn with_c(self, c: usize) -> Self {
        Shape { c, ..self }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{},{},{})", self.n, self.c, self.h, self.w)
    }
}

/// Row-major NCHW array.
#[derive(Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let head: Vec<_> = self.data.iter().take(8).collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("head", &head)
            .finish()
    }
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Shape, data: Vec<T>) -> Result<Self> {
        if shape.dims().contains(&0) {
            return Err(Error::dim("tensor", format!("zero-sized dimension in {shape}")));
        }
        if data.len() != shape.numel() {
            return Err(Error::dim(
                "tensor",
                format!("{} values for shape {shape} ({} expected)", data.len(), shape.numel()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub(crate) fn from_parts(shape: Shape, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.numel(), data.len());
        Tensor { shape, data }
    }

    pub fn full(shape: Shape, v: T) -> Self {
        Tensor::from_parts(shape, vec![v; shape.numel()])
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: Shape) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(v: T) -> Self {
        Self::full(Shape::SCALAR, v)
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..shape.n {
            for c in 0..shape.c {
                for y in 0..shape.h {
                    for x in 0..shape.w {
                        data.push(f(n, c, y, x));
                    }
                }
            }
        }
        Tensor::from_parts(shape, data)
    }

    /// Values drawn uniformly from `[lo, hi)`.
    pub fn uniform<R: Rng + ?Sized>(shape: Shape, lo: f64, hi: f64, rng: &mut R) -> Self {
        let data = (0..shape.numel()).map(|_| T::lit(rng.gen_range(lo..hi))).collect();
        Tensor::from_parts(shape, data)
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        let s = self.shape;
        ((n * s.c + c) * s.h + y) * s.w + x
    }

    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.index(n, c, y, x)]
    }

    /// The single value of a `(1,1,1,1)` tensor.
    pub fn item(&self) -> T {
        assert!(self.shape.is_scalar(), "item() on non-scalar tensor {}", self.shape);
        self.data[0]
    }

    pub fn reshape(&self, shape: Shape) -> Result<Self> {
        if shape.numel() != self.numel() {
            return Err(Error::ShapeMismatch { op: "reshape", lhs: self.shape, rhs: shape });
        }
        Ok(Tensor::from_parts(shape, self.data.clone()))
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor::from_parts(self.shape, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        let data = self.data.iter().map(|&v| U::from_f64(v.to_f64().unwrap()).unwrap()).collect();
        Tensor::from_parts(self.shape, data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> T {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max)
    }

    /// Extract batch item `n` as a `(1, c, h, w)` tensor.
    pub fn sample(&self, n: usize) -> Tensor<T> {
        let s = self.shape;
        let len = s.c * s.hw();
        Tensor::from_parts(Shape::new(1, s.c, s.h, s.w), self.data[n * len..(n + 1) * len].to_vec())
    }

    /// Stack equally shaped tensors along the batch axis.
    pub fn stack(items: &[Tensor<T>]) -> Result<Tensor<T>> {
        let first = items.first().ok_or_else(|| Error::dim("stack", "no tensors"))?.shape;
        let mut data = Vec::with_capacity(first.numel() * items.len());
        let mut n = 0;
        for t in items {
            let s = t.shape;
            if (s.c, s.h, s.w) != (first.c, first.h, first.w) {
                return Err(Error::ShapeMismatch { op: "stack", lhs: first, rhs: s });
            }
            n += s.n;
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor::from_parts(Shape::new(n, first.c, first.h, first.w), data))
    }

    /// Spatial window `[y0, y0+h) × [x0, x0+w)` of every sample and channel.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Tensor<T>> {
        let s = self.shape;
        if h == 0 || w == 0 || y0 + h > s.h || x0 + w > s.w {
            return Err(Error::dim(
                "crop",
                format!("window {h}x{w} at ({y0},{x0}) exceeds {s}"),
            ));
        }
        let mut data = Vec::with_capacity(s.n * s.c * h * w);
        for plane in self.data.chunks_exact(s.hw()) {
            for y in y0..y0 + h {
                data.extend_from_slice(&plane[y * s.w + x0..y * s.w + x0 + w]);
            }
        }
        Ok(Tensor::from_parts(Shape::new(s.n, s.c, h, w), data))
    }

    pub fn flip_horizontal(&self) -> Tensor<T> {
        let s = self.shape;
        let mut data = self.data.clone();
        for row in data.chunks_exact_mut(s.w) {
            row.reverse();
        }
        Tensor::from_parts(s, data)
    }

    /// Rotate every plane by 90° counter-clockwise, `k` times.
    pub fn rot90(&self, k: usize) -> Tensor<T> {
        let mut out = self.clone();
        for _ in 0..k % 4 {
            out = out.rot90_once();
        }
        out
    }

    fn rot90_once(&self) -> Tensor<T> {
        let s = self.shape;
        let out_shape = Shape::new(s.n, s.c, s.w, s.h);
        let mut data = Vec::with_capacity(s.numel());
        for plane in self.data.chunks_exact(s.hw()) {
            // out(y, x) = in(x, w - 1 - y)
            for y in 0..s.w {
                for x in 0..s.h {
                    data.push(plane[x * s.w + (s.w - 1 - y)]);
                }
            }
        }
        Tensor::from_parts(out_shape, data)
    }
}
