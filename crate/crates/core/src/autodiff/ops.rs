//! Built-in tensor operations and the `Tape` helpers that record them.

use ndarray::{s, Axis};

use super::{scalar, AdError, Op, Tape, Tensor, Var};

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(), AdError> {
    if a.dim() != b.dim() {
        return Err(AdError::Shape {
            op,
            detail: format!("{:?} vs {:?}", a.dim(), b.dim()),
        });
    }
    Ok(())
}

pub struct Add;
impl Op for Add {
    fn name(&self) -> &'static str {
        "add"
    }
    fn forward(&self, x: &[&Tensor]) -> Result<Tensor, AdError> {
        same_shape("add", x[0], x[1])?;
        Ok(x[0] + x[1])
    }
    fn backward(&self, _: &[&Tensor], _: &Tensor, g: &Tensor) -> Result<Vec<Option<Tensor>>, AdError> {
        Ok(vec![Some(g.clone()), Some(g.clone())])
    }
}

pub struct Sub;
impl Op for Sub {
    fn name(&self) -> &'static str {
        "sub"
    }
    fn forward(&self, x: &[&Tensor]) -> Result<Tensor, AdError> {
        same_shape("sub", x[0], x[1])?;
        Ok(x[0] - x[1])
    }
    fn backward(&self, _: &[&Tensor], _: &Tensor, g: &Tensor) -> Result<Vec<Option<Tensor>>, AdError> {
        Ok(vec![Some(g.clone()), Some(-g)])
    }
}

/// Elementwise product.
pub struct Mul;
impl Op for Mul {
    fn name(&self) -> &'static str {
        "mul"
    }
    fn forward(&self, x: &[&Tensor]) -> Result<Tensor, AdError> {
        same_shape("mul", x[0], x[1])?;
        Ok(x[0] * x[1])
    }
    fn backward(&self, x: &[&Tensor], _: &Tensor, g: &Tensor) -> Result<Vec<Option<Tensor>>, AdError> {
        Ok(vec![Some(g * x[1]), Some(g * x[0])])
    }
}

pub struct Scale(pub f64);
impl Op for Scale {
    fn name(&self) -> &'static str {
        "scale"
    }
    fn forward(&self, x: &[&Tensor]) -> Result<Tensor, AdError> {
        Ok(x[0] * self.0)
    }
    fn backward(&self, _: &[&Tensor], _: &Tensor, g: &Tensor) -> Result<Vec<Option<Tensor>>, AdError> {
        Ok(vec![Some(g * self.0)])
    }
}

/// `a * s` where `s` is a `1 x 1` tensor.
pub struct MulScalar;
impl Op for MulScalar {
    fn name(&self) -> &'static str {
        "mul_scalar"
    }
    fn forward(&self, x: &[&Tensor]) -> Result<Tensor, AdError> {
        if x[1].dim() != (1, 1) {
            return Err(AdError::Shape {
                op: "mul_scalar",
                detail: format!("scalar operand has shape {:?}", x[1].dim()),
            });
        }
        Ok(x[0] * x[1][[0, 0]])
    }
    fn backward(&self, x: &[&Tensor], _: &Tensor, g: &Tensor) -> Result<Vec<Option<Tensor>>, AdError> {
        let ds = (g * x[0]).sum();
        Ok(vec![Some(g * x[1][[0, 0]]), Some(scalar(ds))])
    }
}

pub struct MatMul;
impl Op for MatMul {
    fn name(&self) -> &'static str {
        "matmul"
    }
    fn forward(&self, x: &[&Tensor]) -> Result<Tensor, AdError> {
        if x[0].ncols() != x[1].nrows() {
            return Err(AdError::Shape {
                op: "matmul",
                detail: format!("{:?} x {:?}", x[0].dim(), x[1].dim()),
            });
        }
        Ok(x[0].dot(x[1]))
    }
    fn backward(&self, x: &[&Tensor], _: &Tensor, g: &Tensor) -> Result<Vec<Option<Tensor>>, AdError> {
        Ok(vec![Some(g.dot(&x[1].t())), Some(x[0].t().dot(g))])
    }
}

/// `a + b` with `b` a single row broadcast over the rows of `a`.
pub struct AddRow;
impl Op for AddRow {
    fn name(&self) -> &'static str {
        "add_row"
    }
    fn forward(&self, x: &[&Tensor]) -> Result<Tensor, AdError> {
        if x[1].nrows() != 1 || x[1].ncols() != x[0].ncols() {
            return Err(AdError::Shape {
                op: "add_row",
                detail: format!("{:?} + {:?}", x[0].dim(), x[1].dim()),
            });
        }
        Ok(x[0] + x[1])
    }
    fn backward(&self, _: &[&Tensor], _: &Tensor, g: &Tensor) -> Result<Vec<Option<Tensor>>, AdError> {
        Ok(vec![Some(g.clone()), Some(g.sum_axis(Axis(0)).insert_axis(Axis(0)))])
    }
}

pub struct Relu;
impl Op for Relu {
    fn name(&self) -> &'static str {
        "relu"
    }
    fn forward(&self, x: &[&Tensor]) -> Result<Tensor, AdError> {
        Ok(x[0].mapv(|v| v.max(0.0)))
    }
    fn backward(&self, x: &[&Tensor], _: &Tensor, g: &Tensor) -> Result<Vec<Option<Tensor>>, AdError> {
        let mut out = g.clone();
        out.zip_mut_with(x[0], |d, &v| {
            if v <= 0.0 {
                *d = 0.0
            }
        });
        Ok(vec![Some(out)])
    }
}

pub struct Tanh;
impl Op for Tanh {
    fn name(&self) -> &'static str {
        "tanh"
    }
    fn forward(&self, x: &[&Tensor]) -> Result<Tensor, AdError> {
        Ok(x[0].mapv(f64::tanh))
    }
    fn backward(&self, _: &[&Tensor], y: &Tensor, g: &Tensor) -> Result<Vec<Option<Tensor>>, AdError> {
        let mut out = g.clone();
        out.zip_mut_with(y, |d, &t| *d *= 1.0 - t * t);
        Ok(vec![Some(out)])
    }
}

pub struct Sqrt;
impl Op for Sqrt {
    fn name(&self) -> &'static str {
        "sqrt"
    }
    fn forward(&self, x: &[&Tensor]) -> Result<Tensor, AdError> {
        Ok(x[0].mapv(f64::sqrt))
    }
    fn backward(&self, _: &[&Tensor], y: &Tensor, g: &Tensor) -> Result<Vec<Option<Tensor>>, AdError> {
        let mut out = g.clone();
        out.zip_mut_with(y, |d, &r| *d *= 0.5 / r);
        Ok(vec![Some(out)])
    }
}

pub struct Square;
impl Op for Square {
    fn name(&self) -> &'static str {
        "square"
    }
    fn forward(&self, x: &[&Tensor]) -> Result<Tensor, AdError> {
        Ok(x[0].mapv(|v| v * v))
    }
    fn backward(&self, x: &[&Tensor], _: &Tensor, g: &Tensor) -> Result<Vec<Option<Tensor>>, AdError> {
        let mut out = g.clone();
        out.zip_mut_with(x[0], |d, &v| *d *= 2.0 * v);
        Ok(vec![Some(out)])
    }
}

pub struct Exp;
impl Op for Exp {
    fn name(&self) -> &'static str {
        "exp"
    }
    fn forward(&self, x: &[&Tensor]) -> Result<Tensor, AdError> {
        Ok(x[0].mapv(f64::exp))
    }
    fn backward(&self, _: &[&Tensor], y: &Tensor, g: &Tensor) -> Result<Vec<Option<Tensor>>, AdError> {
        Ok(vec![Some(g * y)])
    }
}

/// Elementwise clamp; the adjoint is zero wherever the clamp is active.
pub struct Clamp {
    pub lo: f64,
    pub hi: f64,
}
impl Op for Clamp {
    fn name(&self) -> &'static str {
        "clamp"
    }
    fn forward(&self, x: &[&Tensor]) -> Result<Tensor, AdError> {
        Ok(x[0].mapv(|v| v.clamp(self.lo, self.hi)))
    }
    fn backward(&self, x: &[&Tensor], _: &Tensor, g: &Tensor) -> Result<Vec<Option<Tensor>>, AdError> {
        let mut out = g.clone();
        out.zip_mut_with(x[0], |d, &v| {
            if v < self.lo || v > self.hi {
                *d = 0.0
            }
        });
        Ok(vec![Some(out)])
    }
}

/// Column-wise maximum over rows (symmetric pooling), `n x c -> 1 x c`.
/// Ties resolve to the first maximal row.
pub struct MaxRows;

fn argmax_rows(x: &Tensor) -> Vec<usize> {
    (0..x.ncols())
        .map(|c| {
            let col = x.column(c);
            let mut best = 0;
            for r in 1..col.len() {
                if col[r] > col[best] {
                    best = r;
                }
            }
            best
        })
        .collect()
}

impl Op for MaxRows {
    fn name(&self) -> &'static str {
        "max_rows"
    }
    fn forward(&self, x: &[&Tensor]) -> Result<Tensor, AdError> {
        if x[0].nrows() == 0 {
            return Err(AdError::Shape {
                op: "max_rows",
                detail: "no rows to pool".into(),
            });
        }
        let arg = argmax_rows(x[0]);
        Ok(Tensor::from_shape_fn((1, x[0].ncols()), |(_, c)| x[0][[arg[c], c]]))
    }
    fn backward(&self, x: &[&Tensor], _: &Tensor, g: &Tensor) -> Result<Vec<Option<Tensor>>, AdError> {
        let arg = argmax_rows(x[0]);
        let mut out = Tensor::zeros(x[0].dim());
        for (c, &r) in arg.iter().enumerate() {
            out[[r, c]] = g[[0, c]];
        }
        Ok(vec![Some(out)])
    }
}

pub struct ConcatCols;
impl Op for ConcatCols {
    fn name(&self) -> &'static str {
        "concat_cols"
    }
    fn forward(&self, x: &[&Tensor]) -> Result<Tensor, AdError> {
        let rows = x[0].nrows();
        if x.iter().any(|t| t.nrows() != rows) {
            return Err(AdError::Shape {
                op: "concat_cols",
                detail: "row counts differ".into(),
            });
        }
        let views: Vec<_> = x.iter().map(|t| t.view()).collect();
        ndarray::concatenate(Axis(1), &views).map_err(|e| AdError::Shape {
            op: "concat_cols",
            detail: e.to_string(),
        })
    }
    fn backward(&self, x: &[&Tensor], _: &Tensor, g: &Tensor) -> Result<Vec<Option<Tensor>>, AdError> {
        let mut start = 0;
        Ok(x.iter()
            .map(|t| {
                let part = g.slice(s![.., start..start + t.ncols()]).to_owned();
                start += t.ncols();
                Some(part)
            })
            .collect())
    }
}

pub struct ConcatRows;
impl Op for ConcatRows {
    fn name(&self) -> &'static str {
        "concat_rows"
    }
    fn forward(&self, x: &[&Tensor]) -> Result<Tensor, AdError> {
        let views: Vec<_> = x.iter().map(|t| t.view()).collect();
        ndarray::concatenate(Axis(0), &views).map_err(|e| AdError::Shape {
            op: "concat_rows",
            detail: e.to_string(),
        })
    }
    fn backward(&self, x: &[&Tensor], _: &Tensor, g: &Tensor) -> Result<Vec<Option<Tensor>>, AdError> {
        let mut start = 0;
        Ok(x.iter()
            .map(|t| {
                let part = g.slice(s![start..start + t.nrows(), ..]).to_owned();
                start += t.nrows();
                Some(part)
            })
            .collect())
    }
}

/// Broadcasts a single row to `n` rows.
pub struct RepeatRows(pub usize);
impl Op for RepeatRows {
    fn name(&self) -> &'static str {
        "repeat_rows"
    }
    fn forward(&self, x: &[&Tensor]) -> Result<Tensor, AdError> {
        if x[0].nrows() != 1 {
            return Err(AdError::Shape {
                op: "repeat_rows",
                detail: format!("expected one row, got {:?}", x[0].dim()),
            });
        }
        Ok(x[0]
            .broadcast((self.0, x[0].ncols()))
            .expect("row broadcast")
            .to_owned())
    }
    fn backward(&self, _: &[&Tensor], _: &Tensor, g: &Tensor) -> Result<Vec<Option<Tensor>>, AdError> {
        Ok(vec![Some(g.sum_axis(Axis(0)).insert_axis(Axis(0)))])
    }
}

/// Row-major reshape.
pub struct Reshape(pub usize, pub usize);
impl Op for Reshape {
    fn name(&self) -> &'static str {
        "reshape"
    }
    fn forward(&self, x: &[&Tensor]) -> Result<Tensor, AdError> {
        reshape(x[0], (self.0, self.1))
    }
    fn backward(&self, x: &[&Tensor], _: &Tensor, g: &Tensor) -> Result<Vec<Option<Tensor>>, AdError> {
        Ok(vec![Some(reshape(g, x[0].dim())?)])
    }
}

fn reshape(t: &Tensor, shape: (usize, usize)) -> Result<Tensor, AdError> {
    let data: Vec<f64> = t.iter().copied().collect();
    Tensor::from_shape_vec(shape, data).map_err(|e| AdError::Shape {
        op: "reshape",
        detail: e.to_string(),
    })
}

pub struct SliceRows {
    pub start: usize,
    pub len: usize,
}
impl Op for SliceRows {
    fn name(&self) -> &'static str {
        "slice_rows"
    }
    fn forward(&self, x: &[&Tensor]) -> Result<Tensor, AdError> {
        if self.start + self.len > x[0].nrows() {
            return Err(AdError::Shape {
                op: "slice_rows",
                detail: format!("{}..{} of {}", self.start, self.start + self.len, x[0].nrows()),
            });
        }
        Ok(x[0].slice(s![self.start..self.start + self.len, ..]).to_owned())
    }
    fn backward(&self, x: &[&Tensor], _: &Tensor, g: &Tensor) -> Result<Vec<Option<Tensor>>, AdError> {
        let mut out = Tensor::zeros(x[0].dim());
        out.slice_mut(s![self.start..self.start + self.len, ..]).assign(g);
        Ok(vec![Some(out)])
    }
}

pub struct SliceCols {
    pub start: usize,
    pub len: usize,
}
impl Op for SliceCols {
    fn name(&self) -> &'static str {
        "slice_cols"
    }
    fn forward(&self, x: &[&Tensor]) -> Result<Tensor, AdError> {
        if self.start + self.len > x[0].ncols() {
            return Err(AdError::Shape {
                op: "slice_cols",
                detail: format!("{}..{} of {}", self.start, self.start + self.len, x[0].ncols()),
            });
        }
        Ok(x[0].slice(s![.., self.start..self.start + self.len]).to_owned())
    }
    fn backward(&self, x: &[&Tensor], _: &Tensor, g: &Tensor) -> Result<Vec<Option<Tensor>>, AdError> {
        let mut out = Tensor::zeros(x[0].dim());
        out.slice_mut(s![.., self.start..self.start + self.len]).assign(g);
        Ok(vec![Some(out)])
    }
}

pub struct Sum;
impl Op for Sum {
    fn name(&self) -> &'static str {
        "sum"
    }
    fn forward(&self, x: &[&Tensor]) -> Result<Tensor, AdError> {
        Ok(scalar(x[0].sum()))
    }
    fn backward(&self, x: &[&Tensor], _: &Tensor, g: &Tensor) -> Result<Vec<Option<Tensor>>, AdError> {
        Ok(vec![Some(Tensor::from_elem(x[0].dim(), g[[0, 0]]))])
    }
}

/// Mean squared difference over all entries.
pub struct Mse;
impl Op for Mse {
    fn name(&self) -> &'static str {
        "mse"
    }
    fn forward(&self, x: &[&Tensor]) -> Result<Tensor, AdError> {
        same_shape("mse", x[0], x[1])?;
        let n = x[0].len().max(1) as f64;
        let s: f64 = x[0].iter().zip(x[1].iter()).map(|(a, b)| (a - b) * (a - b)).sum();
        Ok(scalar(s / n))
    }
    fn backward(&self, x: &[&Tensor], _: &Tensor, g: &Tensor) -> Result<Vec<Option<Tensor>>, AdError> {
        let n = x[0].len().max(1) as f64;
        let d = (x[0] - x[1]) * (2.0 * g[[0, 0]] / n);
        Ok(vec![Some(d.clone()), Some(-d)])
    }
}

impl Tape {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        self.apply(Add, &[a, b])
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        self.apply(Sub, &[a, b])
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        self.apply(Mul, &[a, b])
    }
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var, AdError> {
        self.apply(Scale(c), &[a])
    }
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var, AdError> {
        self.apply(MulScalar, &[a, s])
    }
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        self.apply(MatMul, &[a, b])
    }
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, AdError> {
        self.apply(AddRow, &[a, row])
    }
    pub fn relu(&mut self, a: Var) -> Result<Var, AdError> {
        self.apply(Relu, &[a])
    }
    pub fn tanh(&mut self, a: Var) -> Result<Var, AdError> {
        self.apply(Tanh, &[a])
    }
    pub fn sqrt(&mut self, a: Var) -> Result<Var, AdError> {
        self.apply(Sqrt, &[a])
    }
    pub fn square(&mut self, a: Var) -> Result<Var, AdError> {
        self.apply(Square, &[a])
    }
    pub fn exp(&mut self, a: Var) -> Result<Var, AdError> {
        self.apply(Exp, &[a])
    }
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var, AdError> {
        self.apply(Clamp { lo, hi }, &[a])
    }
    pub fn max_rows(&mut self, a: Var) -> Result<Var, AdError> {
        self.apply(MaxRows, &[a])
    }
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, AdError> {
        self.apply(ConcatCols, parts)
    }
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, AdError> {
        self.apply(ConcatRows, parts)
    }
    pub fn repeat_rows(&mut self, a: Var, n: usize) -> Result<Var, AdError> {
        self.apply(RepeatRows(n), &[a])
    }
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var, AdError> {
        self.apply(Reshape(rows, cols), &[a])
    }
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var, AdError> {
        self.apply(SliceRows { start, len }, &[a])
    }
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var, AdError> {
        self.apply(SliceCols { start, len }, &[a])
    }
    pub fn sum(&mut self, a: Var) -> Result<Var, AdError> {
        self.apply(Sum, &[a])
    }
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        self.apply(Mse, &[a, b])
    }

    /// `x W + b` for a row-batch `x`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var, AdError> {
        let xw = self.matmul(x, w)?;
        self.add_row(xw, b)
    }

    /// `ca * a + cb * b` for tensors of equal shape.
    pub fn axpby(&mut self, ca: f64, a: Var, cb: f64, b: Var) -> Result<Var, AdError> {
        let sa = self.scale(a, ca)?;
        let sb = self.scale(b, cb)?;
        self.add(sa, sb)
    }
}
