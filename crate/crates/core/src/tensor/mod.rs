//! Dense NCHW tensors and a small tape-based reverse-mode autodiff engine.
//!
//! [`Tensor`] is plain data. Differentiable computation happens on a
//! [`Graph`], which records every operation together with whatever it needs
//! for the backward pass; [`Var`] is a cheap handle to a node in that graph.

mod gradcheck;
mod graph;
pub(crate) mod kernels;

use std::fmt;

pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use graph::{Axis, CustomOp, Graph, ReduceAxes, UpsampleMode, Var, WarpDirection};

use crate::error::{Error, Result};

/// Element type of a tensor. Implemented for `f32` (training) and `f64`
/// (gradient verification).
pub trait Float:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + Default
    + fmt::Debug
    + fmt::Display
    + std::iter::Sum
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + Send
    + Sync
    + 'static
{
    /// `c <- alpha * a * b + beta * c` for row-major `a: m x k`, `b: k x n`,
    /// with optional transposition of either operand.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        a_trans: bool,
        b: &[Self],
        b_trans: bool,
        beta: Self,
        c: &mut [Self],
    ) {
        let (rsa, csa) = gemm_strides(m, k, a_trans);
        let (rsb, csb) = gemm_strides(k, n, b_trans);
        Self::gemm_view(
            m,
            k,
            n,
            alpha,
            MatView::new(a, 0, rsa, csa),
            MatView::new(b, 0, rsb, csb),
            beta,
            c,
            MatLayout {
                offset: 0,
                rs: n,
                cs: 1,
            },
        );
    }

    /// General strided product; panics if any view reaches outside its
    /// buffer or if the layout of `c` maps two entries to one element.
    #[allow(clippy::too_many_arguments)]
    fn gemm_view(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: MatView<'_, Self>,
        b: MatView<'_, Self>,
        beta: Self,
        c: &mut [Self],
        c_layout: MatLayout,
    );

    fn of(v: f64) -> Self {
        <Self as num_traits::FromPrimitive>::from_f64(v).expect("f64 is representable")
    }

    fn as_f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).expect("float converts to f64")
    }
}

fn gemm_strides(rows: usize, cols: usize, trans: bool) -> (usize, usize) {
    // logical (rows x cols) view of a buffer stored row-major as either
    // (rows x cols) or, when transposed, (cols x rows)
    if trans {
        (1, rows)
    } else {
        (cols, 1)
    }
}

/// Placement of a logical matrix inside a flat buffer: entry `(i, j)` lives
/// at `offset + i * rs + j * cs`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MatLayout {
    pub offset: usize,
    pub rs: usize,
    pub cs: usize,
}

impl MatLayout {
    fn check(&self, rows: usize, cols: usize, len: usize) {
        if rows > 0 && cols > 0 {
            let last = self.offset + (rows - 1) * self.rs + (cols - 1) * self.cs;
            assert!(
                last < len,
                "matrix view reaches index {last} of a buffer of {len}"
            );
        }
    }
}

/// Read-only strided view; entries may alias.
#[derive(Clone, Copy, Debug)]
pub struct MatView<'a, T> {
    pub data: &'a [T],
    pub layout: MatLayout,
}

impl<'a, T> MatView<'a, T> {
    pub fn new(data: &'a [T], offset: usize, rs: usize, cs: usize) -> Self {
        MatView {
            data,
            layout: MatLayout { offset, rs, cs },
        }
    }
}

macro_rules! impl_float {
    ($t:ty, $gemm:path) => {
        impl Float for $t {
            fn gemm_view(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: MatView<'_, Self>,
                b: MatView<'_, Self>,
                beta: Self,
                c: &mut [Self],
                cl: MatLayout,
            ) {
                a.layout.check(m, k, a.data.len());
                b.layout.check(k, n, b.data.len());
                cl.check(m, n, c.len());
                assert!(
                    m <= 1
                        || n <= 1
                        || (cl.rs >= n * cl.cs && cl.cs >= 1)
                        || (cl.cs >= m * cl.rs && cl.rs >= 1),
                    "output layout aliases entries"
                );
                // SAFETY: every index reached is bounds-checked above and
                // the output entries are pairwise distinct.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.data.as_ptr().add(a.layout.offset),
                        a.layout.rs as isize,
                        a.layout.cs as isize,
                        b.data.as_ptr().add(b.layout.offset),
                        b.layout.rs as isize,
                        b.layout.cs as isize,
                        beta,
                        c.as_mut_ptr().add(cl.offset),
                        cl.rs as isize,
                        cl.cs as isize,
                    );
                }
            }
        }
    };
}

impl_float!(f32, matrixmultiply::sgemm);
impl_float!(f64, matrixmultiply::dgemm);

/// (batch, channels, height, width)
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Shape(pub [usize; 4]);

impl Shape {
    pub const SCALAR: Shape = Shape([1, 1, 1, 1]);

    pub fn new(batch: usize, channels: usize, height: usize, width: usize) -> Self {
        Shape([batch, channels, height, width])
    }

    pub fn batch(&self) -> usize {
        self.0[0]
    }

    pub fn channels(&self) -> usize {
        self.0[1]
    }

    pub fn height(&self) -> usize {
        self.0[2]
    }

    pub fn width(&self) -> usize {
        self.0[3]
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    pub fn plane(&self) -> usize {
        self.0[2] * self.0[3]
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [n, c, h, w] = self.0;
        write!(f, "{n}x{c}x{h}x{w}")
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Float> Tensor<T> {
    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::invalid(
                "tensor",
                format!("{} values for shape {shape}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: Shape, value: T) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self::full(Shape::SCALAR, value)
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut([usize; 4]) -> T) -> Self {
        let [n, c, h, w] = shape.0;
        let mut data = Vec::with_capacity(shape.numel());
        for b in 0..n {
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        data.push(f([b, ch, y, x]));
                    }
                }
            }
        }
        Tensor { shape, data }
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

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    fn offset(&self, idx: [usize; 4]) -> usize {
        let [_, c, h, w] = self.shape.0;
        ((idx[0] * c + idx[1]) * h + idx[2]) * w + idx[3]
    }

    pub fn at(&self, idx: [usize; 4]) -> T {
        self.data[self.offset(idx)]
    }

    pub fn set(&mut self, idx: [usize; 4], value: T) {
        let o = self.offset(idx);
        self.data[o] = value;
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Float>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// One batch element as a batch-1 tensor.
    pub fn batch_item(&self, b: usize) -> Self {
        let per = self.shape.numel() / self.shape.batch();
        let mut shape = self.shape;
        shape.0[0] = 1;
        Tensor {
            shape,
            data: self.data[b * per..(b + 1) * per].to_vec(),
        }
    }

    /// Concatenation along the batch axis.
    pub fn stack(items: &[Tensor<T>]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::invalid("stack", "no tensors"))?;
        let [_, c, h, w] = first.shape.0;
        let mut data = Vec::with_capacity(first.numel() * items.len());
        let mut batch = 0;
        for t in items {
            let [n, tc, th, tw] = t.shape.0;
            if (tc, th, tw) != (c, h, w) {
                return Err(Error::ShapeMismatch {
                    op: "stack",
                    lhs: first.shape,
                    rhs: t.shape,
                });
            }
            batch += n;
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor {
            shape: Shape::new(batch, c, h, w),
            data,
        })
    }

    /// Mirror along the width axis.
    pub fn flip_horizontal(&self) -> Self {
        let w = self.shape.width();
        let mut data = self.data.clone();
        for row in data.chunks_mut(w) {
            row.reverse();
        }
        Tensor {
            shape: self.shape,
            data,
        }
    }

    /// 2x2 box-filter downsampling (area resize by one octave).
    pub fn downsample2(&self) -> Result<Self> {
        let [n, c, h, w] = self.shape.0;
        if h < 2 || w < 2 || h % 2 != 0 || w % 2 != 0 {
            return Err(Error::invalid(
                "downsample2",
                format!("spatial dims must be even, got {}", self.shape),
            ));
        }
        let quarter = T::of(0.25);
        let out = Tensor::from_fn(Shape::new(n, c, h / 2, w / 2), |[b, ch, y, x]| {
            let s = self.at([b, ch, 2 * y, 2 * x])
                + self.at([b, ch, 2 * y, 2 * x + 1])
                + self.at([b, ch, 2 * y + 1, 2 * x])
                + self.at([b, ch, 2 * y + 1, 2 * x + 1]);
            s * quarter
        });
        Ok(out)
    }
}

impl<T: Float> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor({}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, ", {:?}", self.data)?;
        }
        write!(f, ")")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor::<f32>::from_vec(Shape::new(1, 1, 2, 2), vec![0.0; 3]).is_err());
        assert!(Tensor::<f32>::from_vec(Shape::new(1, 1, 2, 2), vec![0.0; 4]).is_ok());
    }

    #[test]
    fn gemm_transposes() {
        // a = [[1,2,3],[4,5,6]] (2x3), b = [[1,0],[0,1],[1,1]] (3x2)
        let a = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [1.0f64, 0.0, 0.0, 1.0, 1.0, 1.0];
        let mut c = [0.0f64; 4];
        f64::gemm(2, 3, 2, 1.0, &a, false, &b, false, 0.0, &mut c);
        assert_eq!(c, [4.0, 5.0, 10.0, 11.0]);

        // a^T stored as 3x2
        let at = [1.0f64, 4.0, 2.0, 5.0, 3.0, 6.0];
        let mut c2 = [0.0f64; 4];
        f64::gemm(2, 3, 2, 1.0, &at, true, &b, false, 0.0, &mut c2);
        assert_eq!(c2, c);

        // b^T stored as 2x3
        let bt = [1.0f64, 0.0, 1.0, 0.0, 1.0, 1.0];
        let mut c3 = [1.0f64; 4];
        f64::gemm(2, 3, 2, 1.0, &a, false, &bt, true, 1.0, &mut c3);
        assert_eq!(c3, [5.0, 6.0, 11.0, 12.0]);
    }

    #[test]
    fn downsample_averages_blocks() {
        let t = Tensor::<f64>::from_vec(
            Shape::new(1, 1, 2, 4),
            vec![1.0, 3.0, 0.0, 0.0, 5.0, 7.0, 4.0, 4.0],
        )
        .unwrap();
        assert_eq!(t.downsample2().unwrap().data(), &[4.0, 2.0]);
    }

    #[test]
    fn flip_is_involution() {
        let t = Tensor::<f32>::from_fn(Shape::new(2, 3, 2, 5), |[b, c, y, x]| {
            (b * 100 + c * 10 + y * 5 + x) as f32
        });
        assert_ne!(t.flip_horizontal(), t);
        assert_eq!(t.flip_horizontal().flip_horizontal(), t);
    }
}
