//! Dense row-major f64 tensors.
//!
//! Plain values only; differentiable computation lives in [`crate::graph`],
//! where each node owns one `Tensor` together with its gradient buffer.

use std::io::{BufRead, Write};

use rand::Rng;

use crate::error::TensorError;

/// Dense n-dimensional value. `data` is row-major; `grad`, when present,
/// has the same length as `data`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub grad: Option<Vec<f64>>,
    pub requires_grad: bool,
}

impl Tensor {
    /// Builds a tensor, validating shape/data agreement and finiteness.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::Invalid(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(TensorError::Invalid(format!(
                "zero dimension in shape {shape:?}"
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFinite { op: "Tensor::new" });
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; numel],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
            grad: None,
            requires_grad: false,
        }
    }

    /// Gaussian init with the given standard deviation.
    pub fn randn(shape: Vec<usize>, std: f64, rng: &mut impl Rng) -> Self {
        let numel: usize = shape.iter().product();
        // Box-Muller over the uniform stream keeps us off rand_distr.
        let mut data = Vec::with_capacity(numel);
        while data.len() < numel {
            let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            let u2: f64 = rng.gen::<f64>();
            let r = (-2.0 * u1.ln()).sqrt();
            let theta = 2.0 * std::f64::consts::PI * u2;
            data.push(r * theta.cos() * std);
            if data.len() < numel {
                data.push(r * theta.sin() * std);
            }
        }
        Tensor {
            shape,
            data,
            grad: None,
            requires_grad: false,
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Row `i` of a 2-D tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        let cols = self.shape[self.shape.len() - 1];
        &self.data[i * cols..(i + 1) * cols]
    }

    /// Flat text dump: `shape: d1 d2 ...` then `data: v1 v2 ...`.
    pub fn write_dump(&self, w: &mut impl Write) -> std::io::Result<()> {
        write!(w, "shape:")?;
        for d in &self.shape {
            write!(w, " {d}")?;
        }
        writeln!(w)?;
        write!(w, "data:")?;
        for v in &self.data {
            write!(w, " {v}")?;
        }
        writeln!(w)
    }

    /// Parses the two-line format produced by [`Tensor::write_dump`].
    pub fn read_dump(r: &mut impl BufRead) -> Result<Self, TensorError> {
        let mut shape_line = String::new();
        let mut data_line = String::new();
        r.read_line(&mut shape_line)
            .map_err(|e| TensorError::Invalid(format!("dump read: {e}")))?;
        r.read_line(&mut data_line)
            .map_err(|e| TensorError::Invalid(format!("dump read: {e}")))?;
        Self::parse_dump_lines(&shape_line, &data_line)
    }

    pub fn parse_dump_lines(shape_line: &str, data_line: &str) -> Result<Self, TensorError> {
        let shape_body = shape_line
            .trim()
            .strip_prefix("shape:")
            .ok_or_else(|| TensorError::Invalid("dump missing 'shape:' line".into()))?;
        let data_body = data_line
            .trim()
            .strip_prefix("data:")
            .ok_or_else(|| TensorError::Invalid("dump missing 'data:' line".into()))?;
        let shape = shape_body
            .split_whitespace()
            .map(|t| {
                t.parse::<usize>()
                    .map_err(|e| TensorError::Invalid(format!("bad dimension '{t}': {e}")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let data = data_body
            .split_whitespace()
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|e| TensorError::Invalid(format!("bad value '{t}': {e}")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Tensor::new(shape, data)
    }
}

/// Mean and population standard deviation of a vector, the normalization
/// statistics used by conditional layer norm.
pub fn layer_norm_stats(x: &[f64]) -> (f64, f64) {
    let d = x.len() as f64;
    let mu = x.iter().sum::<f64>() / d;
    let var = x.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d;
    (mu, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_shape_data_mismatch() {
        assert!(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn new_rejects_non_finite() {
        assert!(matches!(
            Tensor::new(vec![2], vec![1.0, f64::NAN]),
            Err(TensorError::NonFinite { .. })
        ));
    }

    #[test]
    fn stats_constant_vector() {
        let (mu, sigma) = layer_norm_stats(&[1.0, 1.0, 1.0]);
        assert_eq!((mu, sigma), (1.0, 0.0));
    }

    #[test]
    fn stats_plus_minus_one() {
        let (mu, sigma) = layer_norm_stats(&[1.0, -1.0]);
        assert_eq!((mu, sigma), (0.0, 1.0));
    }

    #[test]
    fn stats_population_form() {
        // [0,2,4]: mean 2, population variance 8/3.
        let (mu, sigma) = layer_norm_stats(&[0.0, 2.0, 4.0]);
        assert!((mu - 2.0).abs() < 1e-15);
        assert!((sigma - (8.0f64 / 3.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn dump_round_trip() {
        let t = Tensor::new(vec![2, 3], vec![1.5, -2.25, 0.1, 3.0, -0.0001, 7.0]).unwrap();
        let mut buf = Vec::new();
        t.write_dump(&mut buf).unwrap();
        let back = Tensor::read_dump(&mut &buf[..]).unwrap();
        assert_eq!(t.shape, back.shape);
        assert_eq!(t.data, back.data);
    }
}
