//! Reverse-mode differentiation over `f64` matrices.
//!
//! Feature maps are `(frames * height * width, channels)` with rows in frame, row, column
//! order. Token blocks are `(tokens, width)`. Scalars are `(1, 1)`.

use std::ops::Range;

use ndarray::{s, Array2, Axis};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Spatial layout of a feature map's rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Geom {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

impl Geom {
    pub fn new(frames: usize, height: usize, width: usize) -> Self {
        Self { frames, height, width }
    }

    pub fn rows(&self) -> usize {
        self.frames * self.height * self.width
    }

    pub fn tokens_per_frame(&self) -> usize {
        self.height * self.width
    }

    /// Output layout of a padded 3x3 convolution with this stride.
    pub fn strided(&self, stride: usize) -> Self {
        Self::new(
            self.frames,
            (self.height - 1) / stride + 1,
            (self.width - 1) / stride + 1,
        )
    }

    pub fn upsampled(&self) -> Self {
        Self::new(self.frames, self.height * 2, self.width * 2)
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a * b^T`
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Silu(Var),
    Exp(Var),
    Im2col { src: Var, geom: Geom, stride: usize },
    Upsample2 { src: Var, geom: Geom },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, Range<usize>),
    GatherRows(Var, Vec<usize>),
    SoftmaxRows(Var),
    MaxCols { src: Var, argmax: Vec<usize> },
    SqErrMean { src: Var, target: Array2<f64>, weight: f64 },
    DotConst(Var, Array2<f64>),
    Sum(Vec<Var>),
}

#[derive(Default)]
pub struct Tape {
    values: Vec<Array2<f64>>,
    ops: Vec<Op>,
}

fn scalar(v: f64) -> Array2<f64> {
    Array2::from_elem((1, 1), v)
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        let value = if value.is_standard_layout() {
            value
        } else {
            value.as_standard_layout().into_owned()
        };
        self.values.push(value);
        self.ops.push(op);
        Var(self.values.len() - 1)
    }

    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.values[v.0]
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.values[v.0][[0, 0]]
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(self.value(b));
        self.push(out, Op::MatMul(a, b))
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(&self.value(b).t());
        self.push(out, Op::MatMulNt(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) + self.value(b);
        self.push(out, Op::Add(a, b))
    }

    /// Adds the `(1, c)` row `row` to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.value(row).nrows(), 1, "add_row needs a single row");
        let out = self.value(a) + self.value(row);
        self.push(out, Op::AddRow(a, row))
    }

    /// Multiplies every row of `a` elementwise by the `(1, c)` row `row`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.value(row).nrows(), 1, "mul_row needs a single row");
        let out = self.value(a) * self.value(row);
        self.push(out, Op::MulRow(a, row))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a) * c;
        self.push(out, Op::Scale(a, c))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::exp);
        self.push(out, Op::Exp(a))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|v| v * sigmoid(v));
        self.push(out, Op::Silu(a))
    }

    /// Patches of a 3x3 zero-padded convolution: `(out_rows, 9 * channels)`, column
    /// `(dy * 3 + dx) * channels + c`.
    pub fn im2col(&mut self, a: Var, geom: Geom, stride: usize) -> Var {
        let src = self.value(a);
        assert_eq!(src.nrows(), geom.rows(), "im2col geometry");
        let c = src.ncols();
        let og = geom.strided(stride);
        let mut out = Array2::zeros((og.rows(), 9 * c));
        let src_s = src.as_slice().expect("standard layout");
        let out_s = out.as_slice_mut().expect("standard layout");
        for f in 0..geom.frames {
            for oy in 0..og.height {
                for ox in 0..og.width {
                    let r = (f * og.height + oy) * og.width + ox;
                    for dy in 0..3 {
                        let iy = (oy * stride + dy) as isize - 1;
                        if iy < 0 || iy >= geom.height as isize {
                            continue;
                        }
                        for dx in 0..3 {
                            let ix = (ox * stride + dx) as isize - 1;
                            if ix < 0 || ix >= geom.width as isize {
                                continue;
                            }
                            let sr = (f * geom.height + iy as usize) * geom.width + ix as usize;
                            let o = r * 9 * c + (dy * 3 + dx) * c;
                            out_s[o..o + c].copy_from_slice(&src_s[sr * c..(sr + 1) * c]);
                        }
                    }
                }
            }
        }
        self.push(out, Op::Im2col { src: a, geom, stride })
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2(&mut self, a: Var, geom: Geom) -> Var {
        let src = self.value(a);
        assert_eq!(src.nrows(), geom.rows(), "upsample geometry");
        let og = geom.upsampled();
        let rows: Vec<usize> = (0..og.rows())
            .map(|r| {
                let x = r % og.width;
                let y = (r / og.width) % og.height;
                let f = r / (og.width * og.height);
                (f * geom.height + y / 2) * geom.width + x / 2
            })
            .collect();
        let out = src.select(Axis(0), &rows);
        self.push(out, Op::Upsample2 { src: a, geom })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = ndarray::concatenate(Axis(1), &views).expect("row counts agree");
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = ndarray::concatenate(Axis(0), &views).expect("column counts agree");
        self.push(out, Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, cols: Range<usize>) -> Var {
        let out = self.value(a).slice(s![.., cols.clone()]).to_owned();
        self.push(out, Op::SliceCols(a, cols))
    }

    /// Rows of `a` in the given order; indices may repeat.
    pub fn gather_rows(&mut self, a: Var, rows: Vec<usize>) -> Var {
        let out = self.value(a).select(Axis(0), &rows);
        self.push(out, Op::GatherRows(a, rows))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let out = tryon_core::attention::softmax_rows(self.value(a));
        self.push(out, Op::SoftmaxRows(a))
    }

    /// Row-wise maximum over `cols`, `(rows, 1)`. Ties go to the lowest column.
    pub fn max_cols(&mut self, a: Var, cols: Range<usize>) -> Var {
        assert!(!cols.is_empty(), "max over no columns");
        let src = self.value(a);
        let mut argmax = Vec::with_capacity(src.nrows());
        let mut out = Array2::zeros((src.nrows(), 1));
        for (r, row) in src.outer_iter().enumerate() {
            let mut best = cols.start;
            for c in cols.clone() {
                if row[c] > row[best] {
                    best = c;
                }
            }
            argmax.push(best);
            out[[r, 0]] = row[best];
        }
        self.push(out, Op::MaxCols { src: a, argmax })
    }

    /// `weight * mean((a - target)^2)`.
    pub fn sq_err_mean(&mut self, a: Var, target: Array2<f64>, weight: f64) -> Var {
        let src = self.value(a);
        assert_eq!(src.dim(), target.dim(), "target shape");
        let sq: f64 = src.iter().zip(target.iter()).map(|(x, t)| (x - t) * (x - t)).sum();
        let out = scalar(weight * sq / src.len() as f64);
        self.push(out, Op::SqErrMean { src: a, target, weight })
    }

    /// `sum(a * c)` for a constant `c`.
    pub fn dot_const(&mut self, a: Var, c: Array2<f64>) -> Var {
        assert_eq!(self.value(a).dim(), c.dim(), "constant shape");
        let out = scalar((self.value(a) * &c).sum());
        self.push(out, Op::DotConst(a, c))
    }

    /// Elementwise sum of equally shaped values.
    pub fn sum(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "sum of nothing");
        let mut out = self.value(parts[0]).clone();
        for &p in &parts[1..] {
            out += self.value(p);
        }
        self.push(out, Op::Sum(parts.to_vec()))
    }

    /// Gradients of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).dim(), (1, 1), "loss must be a scalar");
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.values.len()];
        grads[loss.0] = Some(scalar(1.0));
        for n in (0..=loss.0).rev() {
            let Some(g) = grads[n].take() else {
                continue;
            };
            self.propagate(n, &g, &mut grads);
            grads[n] = Some(g);
        }
        Gradients(grads)
    }

    fn propagate(&self, n: usize, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        let val = |v: Var| &self.values[v.0];
        match &self.ops[n] {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                accumulate(grads, *a, g.dot(&val(*b).t()));
                accumulate(grads, *b, val(*a).t().dot(g));
            }
            Op::MatMulNt(a, b) => {
                accumulate(grads, *a, g.dot(val(*b)));
                accumulate(grads, *b, g.t().dot(val(*a)));
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::AddRow(a, row) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::MulRow(a, row) => {
                accumulate(grads, *a, g * val(*row));
                let d = (g * val(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                accumulate(grads, *row, d);
            }
            Op::Scale(a, c) => accumulate(grads, *a, g * *c),
            Op::Exp(a) => accumulate(grads, *a, g * &self.values[n]),
            Op::Silu(a) => {
                let mut d = val(*a).mapv(|x| {
                    let sg = sigmoid(x);
                    sg * (1.0 + x * (1.0 - sg))
                });
                d *= g;
                accumulate(grads, *a, d);
            }
            Op::Im2col { src, geom, stride } => {
                accumulate(grads, *src, col2im(g, *geom, *stride, val(*src).ncols()));
            }
            Op::Upsample2 { src, geom } => {
                let og = geom.upsampled();
                let mut d = Array2::zeros(val(*src).dim());
                for (r, row) in g.outer_iter().enumerate() {
                    let x = r % og.width;
                    let y = (r / og.width) % og.height;
                    let f = r / (og.width * og.height);
                    let sr = (f * geom.height + y / 2) * geom.width + x / 2;
                    let mut dst = d.row_mut(sr);
                    dst += &row;
                }
                accumulate(grads, *src, d);
            }
            Op::ConcatCols(parts) => {
                let mut at = 0;
                for &p in parts {
                    let w = val(p).ncols();
                    accumulate(grads, p, g.slice(s![.., at..at + w]).to_owned());
                    at += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut at = 0;
                for &p in parts {
                    let h = val(p).nrows();
                    accumulate(grads, p, g.slice(s![at..at + h, ..]).to_owned());
                    at += h;
                }
            }
            Op::SliceCols(a, cols) => {
                let mut d = Array2::zeros(val(*a).dim());
                d.slice_mut(s![.., cols.clone()]).assign(g);
                accumulate(grads, *a, d);
            }
            Op::GatherRows(a, rows) => {
                let mut d = Array2::zeros(val(*a).dim());
                for (&r, src) in rows.iter().zip(g.outer_iter()) {
                    let mut dst = d.row_mut(r);
                    dst += &src;
                }
                accumulate(grads, *a, d);
            }
            Op::SoftmaxRows(a) => {
                let y = &self.values[n];
                let mut d = y * g;
                for (mut drow, yrow) in d.outer_iter_mut().zip(y.outer_iter()) {
                    let dot = drow.sum();
                    drow.zip_mut_with(&yrow, |dv, &yv| *dv -= yv * dot);
                }
                accumulate(grads, *a, d);
            }
            Op::MaxCols { src, argmax } => {
                let mut d = Array2::zeros(val(*src).dim());
                for (r, &c) in argmax.iter().enumerate() {
                    d[[r, c]] = g[[r, 0]];
                }
                accumulate(grads, *src, d);
            }
            Op::SqErrMean { src, target, weight } => {
                let x = val(*src);
                let k = g[[0, 0]] * 2.0 * weight / x.len() as f64;
                accumulate(grads, *src, (x - target) * k);
            }
            Op::DotConst(a, c) => accumulate(grads, *a, c * g[[0, 0]]),
            Op::Sum(parts) => {
                for &p in parts {
                    accumulate(grads, p, g.clone());
                }
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Array2<f64>>], v: Var, delta: Array2<f64>) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &delta,
        slot => *slot = Some(delta),
    }
}

fn col2im(g: &Array2<f64>, geom: Geom, stride: usize, c: usize) -> Array2<f64> {
    let og = geom.strided(stride);
    let mut d = Array2::zeros((geom.rows(), c));
    let g_s = g.as_standard_layout();
    let g_s = g_s.as_slice().expect("standard layout");
    let d_s = d.as_slice_mut().expect("standard layout");
    for f in 0..geom.frames {
        for oy in 0..og.height {
            for ox in 0..og.width {
                let r = (f * og.height + oy) * og.width + ox;
                for dy in 0..3 {
                    let iy = (oy * stride + dy) as isize - 1;
                    if iy < 0 || iy >= geom.height as isize {
                        continue;
                    }
                    for dx in 0..3 {
                        let ix = (ox * stride + dx) as isize - 1;
                        if ix < 0 || ix >= geom.width as isize {
                            continue;
                        }
                        let sr = (f * geom.height + iy as usize) * geom.width + ix as usize;
                        let o = r * 9 * c + (dy * 3 + dx) * c;
                        for k in 0..c {
                            d_s[sr * c + k] += g_s[o + k];
                        }
                    }
                }
            }
        }
    }
    d
}

/// Per-node gradients from [`Tape::backward`]. Nodes the loss does not depend on have none.
pub struct Gradients(Vec<Option<Array2<f64>>>);

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.0[v.0].as_ref()
    }

    /// Gradient of `v`, zeros of `shape` when the loss does not reach it.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Array2<f64> {
        self.get(v).cloned().unwrap_or_else(|| Array2::zeros(shape))
    }
}
