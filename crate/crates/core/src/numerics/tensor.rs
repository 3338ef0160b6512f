use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::proposals::BBox;

/// Normalisation applied to every slice along one axis.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormMode {
    /// Unit Euclidean norm. Zero slices stay zero.
    #[default]
    L2,
    /// Affine map onto `[0, 1]`. Constant slices become 0.5.
    MinMax,
}

/// Row-major dense array of `f32` with an explicit shape.
///
/// A zero-dimensional shape holds a single scalar.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f32>) -> Result<Self> {
        let shape = shape.into();
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Contract(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                expected,
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f32) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f32) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> f32) -> Self {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        Self {
            shape,
            data: (0..n).map(&mut f).collect(),
        }
    }

    /// Square identity matrix.
    pub fn eye(n: usize) -> Self {
        Self::from_fn([n, n], |i| if i / n == i % n { 1.0 } else { 0.0 })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index rank mismatch");
        index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &d)| {
                assert!(i < d, "index {i} out of range for dim {d}");
                acc * d + i
            })
    }

    /// Element at a multi-index. Panics when out of range.
    pub fn at(&self, index: &[usize]) -> f32 {
        self.data[self.offset(index)]
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Tensor> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.numel() {
            return Err(dim_err("reshape", &self.shape, &shape));
        }
        Ok(Tensor {
            shape,
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_with(&self, other: &Tensor, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(dim_err("elementwise", &self.shape, &other.shape));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn scale(&self, s: f32) -> Tensor {
        self.map(|v| v * s)
    }

    /// Slice `r` along the first axis: a row of a matrix, or one
    /// `H×W` plane of an `N×H×W` stack.
    pub fn row(&self, r: usize) -> Tensor {
        assert!(self.ndim() >= 2, "row() needs at least two axes");
        let w: usize = self.shape[1..].iter().product();
        Tensor {
            shape: self.shape[1..].to_vec(),
            data: self.data[r * w..(r + 1) * w].to_vec(),
        }
    }

    /// Build an `rows × w` matrix from equally sized rows.
    pub fn stack_rows(rows: &[Tensor], width: usize) -> Result<Tensor> {
        let mut data = Vec::with_capacity(rows.len() * width);
        for r in rows {
            if r.numel() != width {
                return Err(dim_err("stack_rows", &[width], r.shape()));
            }
            data.extend_from_slice(&r.data);
        }
        Tensor::new([rows.len(), width], data)
    }

    pub fn transpose(&self) -> Result<Tensor> {
        if self.ndim() != 2 {
            return Err(dim_err("transpose", &self.shape, &[]));
        }
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Tensor {
            shape: vec![n, m],
            data,
        })
    }

    /// Matrix product with f64 accumulation.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.ndim() != 2 || other.ndim() != 2 || self.shape[1] != other.shape[0] {
            return Err(dim_err("matmul", &self.shape, &other.shape));
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut acc = vec![0f64; m * n];
        for i in 0..m {
            let out = &mut acc[i * n..(i + 1) * n];
            for p in 0..k {
                let a = self.data[i * k + p] as f64;
                if a == 0.0 {
                    continue;
                }
                let brow = &other.data[p * n..(p + 1) * n];
                for (o, &b) in out.iter_mut().zip(brow) {
                    *o += a * b as f64;
                }
            }
        }
        Ok(Tensor {
            shape: vec![m, n],
            data: acc.into_iter().map(|v| v as f32).collect(),
        })
    }

    /// Splits the shape around `axis` into (outer, len, inner) strides.
    fn axis_split(&self, axis: usize) -> Result<(usize, usize, usize)> {
        if axis >= self.ndim() {
            return Err(Error::Bounds(format!(
                "axis {axis} for tensor of rank {}",
                self.ndim()
            )));
        }
        let outer = self.shape[..axis].iter().product();
        let inner = self.shape[axis + 1..].iter().product();
        Ok((outer, self.shape[axis], inner))
    }

    fn map_slices(
        &self,
        axis: usize,
        mut f: impl FnMut(&[f64]) -> Vec<f64>,
    ) -> Result<Tensor> {
        let (outer, len, inner) = self.axis_split(axis)?;
        let mut data = vec![0f32; self.numel()];
        let mut slice = vec![0f64; len];
        for o in 0..outer {
            for i in 0..inner {
                for (a, s) in slice.iter_mut().enumerate() {
                    *s = self.data[(o * len + a) * inner + i] as f64;
                }
                for (a, v) in f(&slice).into_iter().enumerate() {
                    data[(o * len + a) * inner + i] = v as f32;
                }
            }
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn normalize(&self, axis: usize, mode: NormMode) -> Result<Tensor> {
        self.map_slices(axis, |s| match mode {
            NormMode::L2 => {
                let norm = s.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm == 0.0 {
                    vec![0.0; s.len()]
                } else {
                    s.iter().map(|v| v / norm).collect()
                }
            }
            NormMode::MinMax => {
                let lo = s.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                if hi - lo == 0.0 {
                    vec![0.5; s.len()]
                } else {
                    s.iter().map(|v| (v - lo) / (hi - lo)).collect()
                }
            }
        })
    }

    pub fn sigmoid(&self) -> Tensor {
        self.map(|v| sigmoid(v as f64) as f32)
    }

    /// Softmax along `axis`, stabilised by max subtraction.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        self.map_slices(axis, softmax_slice)
    }

    /// Per-channel mean over a box of a `C×H×W` map.
    pub fn avg_pool_region(&self, bbox: &BBox) -> Result<Tensor> {
        if self.ndim() != 3 {
            return Err(dim_err("avg_pool_region", &self.shape, &[]));
        }
        let (c, h, w) = (self.shape[0], self.shape[1], self.shape[2]);
        check_box(bbox, h, w)?;
        let area = bbox.area() as f64;
        let data = (0..c)
            .map(|ch| {
                let mut acc = 0f64;
                for r in bbox.row_min..=bbox.row_max {
                    let base = (ch * h + r) * w;
                    for col in bbox.col_min..=bbox.col_max {
                        acc += self.data[base + col] as f64;
                    }
                }
                (acc / area) as f32
            })
            .collect();
        Ok(Tensor {
            shape: vec![c],
            data,
        })
    }

    /// Corner-aligned bilinear resize of an `H×W` map.
    pub fn resize_bilinear(&self, out_h: usize, out_w: usize) -> Result<Tensor> {
        if self.ndim() != 2 || self.shape[0] == 0 || self.shape[1] == 0 {
            return Err(dim_err("resize_bilinear", &self.shape, &[out_h, out_w]));
        }
        let (h, w) = (self.shape[0], self.shape[1]);
        if (h, w) == (out_h, out_w) {
            return Ok(self.clone());
        }
        let coord = |i: usize, src: usize, dst: usize| -> (usize, usize, f64) {
            if src == 1 || dst == 1 {
                return (0, 0, 0.0);
            }
            let pos = i as f64 * (src - 1) as f64 / (dst - 1) as f64;
            let lo = (pos.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            (lo, hi, pos - lo as f64)
        };
        let mut data = Vec::with_capacity(out_h * out_w);
        for i in 0..out_h {
            let (r0, r1, fr) = coord(i, h, out_h);
            for j in 0..out_w {
                let (c0, c1, fc) = coord(j, w, out_w);
                let v = |r: usize, c: usize| self.data[r * w + c] as f64;
                let top = v(r0, c0) + (v(r0, c1) - v(r0, c0)) * fc;
                let bottom = v(r1, c0) + (v(r1, c1) - v(r1, c0)) * fc;
                data.push((top + (bottom - top) * fr) as f32);
            }
        }
        Ok(Tensor {
            shape: vec![out_h, out_w],
            data,
        })
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_slice(s: &[f64]) -> Vec<f64> {
    let max = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = s.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub(crate) fn check_box(bbox: &BBox, h: usize, w: usize) -> Result<()> {
    if bbox.row_min > bbox.row_max || bbox.col_min > bbox.col_max || bbox.row_max >= h || bbox.col_max >= w
    {
        return Err(Error::Bounds(format!("{bbox:?} outside {h}x{w}")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_cases() {
        let a = t(&[2, 2], &[1., 2., 3., 4.]);
        assert_eq!(Tensor::eye(2).matmul(&a).unwrap(), a);
        let r = t(&[1, 2], &[1., 2.]).matmul(&t(&[2, 1], &[3., 4.])).unwrap();
        assert_eq!(r.data(), &[11.0]);
        let z = Tensor::zeros([3, 0]).matmul(&Tensor::zeros([0, 2])).unwrap();
        assert_eq!(z, Tensor::zeros([3, 2]));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = Tensor::zeros([2, 3]).matmul(&Tensor::zeros([2, 3])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        assert!(matches!(err, Error::Dimension { .. }));
    }

    #[test]
    fn normalize_conventions() {
        let v = t(&[2], &[3., 4.]).normalize(0, NormMode::L2).unwrap();
        assert!((v.data()[0] - 0.6).abs() < 1e-7 && (v.data()[1] - 0.8).abs() < 1e-7);
        let z = t(&[2], &[0., 0.]).normalize(0, NormMode::L2).unwrap();
        assert_eq!(z.data(), &[0., 0.]);
        let c = t(&[3], &[2., 2., 2.]).normalize(0, NormMode::MinMax).unwrap();
        assert_eq!(c.data(), &[0.5, 0.5, 0.5]);
        let m = t(&[3], &[1., 3., 2.]).normalize(0, NormMode::MinMax).unwrap();
        assert_eq!(m.data(), &[0., 1., 0.5]);
    }

    #[test]
    fn normalize_along_middle_axis() {
        // 2 x 2 x 1, normalise along axis 1
        let x = t(&[2, 2, 1], &[3., 4., 0., 2.]).normalize(1, NormMode::L2).unwrap();
        assert_eq!(x.data(), &[0.6, 0.8, 0.0, 1.0]);
    }

    #[test]
    fn activations() {
        assert_eq!(Tensor::scalar(0.0).sigmoid().data(), &[0.5]);
        let u = t(&[3], &[7., 7., 7.]).softmax(0).unwrap();
        for v in u.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-7);
        }
        let s = t(&[2], &[0., 3f32.ln()]).softmax(0).unwrap();
        assert!((s.data()[0] - 0.25).abs() < 1e-6 && (s.data()[1] - 0.75).abs() < 1e-6);
    }

    #[test]
    fn pooling() {
        let m = t(&[1, 2, 2], &[1., 2., 3., 4.]);
        let b = BBox::new(0, 0, 1, 1);
        assert_eq!(m.avg_pool_region(&b).unwrap().data(), &[2.5]);
        let one = m.avg_pool_region(&BBox::new(1, 0, 1, 0)).unwrap();
        assert_eq!(one.data(), &[3.0]);
        assert!(matches!(
            m.avg_pool_region(&BBox::new(0, 0, 2, 1)),
            Err(Error::Bounds(_))
        ));
        let c = Tensor::full([3, 4, 4], 1.5);
        assert_eq!(c.avg_pool_region(&BBox::new(1, 1, 3, 2)).unwrap().data(), &[1.5; 3]);
    }

    #[test]
    fn resize() {
        let c = Tensor::full([3, 5], 0.25).resize_bilinear(200, 200).unwrap();
        assert!(c.data().iter().all(|&v| v == 0.25));
        let x = Tensor::from_fn([200, 200], |i| (i as f32 * 0.37).sin());
        assert_eq!(x.resize_bilinear(200, 200).unwrap(), x);
        let step = t(&[2, 2], &[0., 1., 0., 1.]).resize_bilinear(200, 200).unwrap();
        for r in 0..200 {
            for c in 1..200 {
                assert!(step.at(&[r, c]) >= step.at(&[r, c - 1]));
            }
        }
        assert_eq!(step.at(&[0, 0]), 0.0);
        assert_eq!(step.at(&[199, 199]), 1.0);
        let single = t(&[1, 1], &[0.7]).resize_bilinear(4, 4).unwrap();
        assert!(single.data().iter().all(|&v| v == 0.7));
    }
}
