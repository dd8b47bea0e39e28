//! Fully connected tanh network over a flat parameter slice.
//!
//! Parameters are stored layer by layer: the `fan_out x fan_in` weight matrix
//! in row-major order followed by the `fan_out` biases. Hidden layers use
//! `tanh`, the output layer is linear.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MlpLayout {
    pub input: usize,
    pub hidden: Vec<usize>,
    pub output: usize,
}

impl MlpLayout {
    pub fn new(input: usize, hidden: Vec<usize>, output: usize) -> Self {
        Self {
            input,
            hidden,
            output,
        }
    }

    /// `(fan_in, fan_out)` of every layer.
    pub fn layers(&self) -> Vec<(usize, usize)> {
        let mut dims = vec![self.input];
        dims.extend(&self.hidden);
        dims.push(self.output);
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers().iter().map(|(i, o)| (i + 1) * o).sum()
    }

    /// `"mlp-tanh:<in>-<h1>-...-<out>"`.
    pub fn id(&self) -> String {
        let mut parts = vec![self.input.to_string()];
        parts.extend(self.hidden.iter().map(usize::to_string));
        parts.push(self.output.to_string());
        format!("mlp-tanh:{}", parts.join("-"))
    }

    pub fn parse_id(id: &str) -> Result<Self> {
        let dims = id
            .strip_prefix("mlp-tanh:")
            .ok_or_else(|| Error::Config(format!("not an mlp layout: {id}")))?;
        let dims: Vec<usize> = dims
            .split('-')
            .map(|d| {
                d.parse()
                    .map_err(|_| Error::Config(format!("bad layer width {d:?} in {id}")))
            })
            .collect::<Result<_>>()?;
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::Config(format!("degenerate layout {id}")));
        }
        Ok(Self {
            input: dims[0],
            hidden: dims[1..dims.len() - 1].to_vec(),
            output: dims[dims.len() - 1],
        })
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init(&self, rng: &mut Rng) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for (fan_in, fan_out) in self.layers() {
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            out.extend((0..fan_in * fan_out).map(|_| rng.uniform_range(-bound, bound)));
            out.extend(std::iter::repeat_n(0.0, fan_out));
        }
        out
    }

    fn check(&self, params: &[f64], x: &ArrayView2<f64>) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::Dimension {
                expected: self.param_count(),
                got: params.len(),
            });
        }
        if x.ncols() != self.input {
            return Err(Error::Dimension {
                expected: self.input,
                got: x.ncols(),
            });
        }
        Ok(())
    }

    fn split<'a>(&self, params: &'a [f64]) -> Vec<(ArrayView2<'a, f64>, ArrayView1<'a, f64>)> {
        let mut off = 0;
        self.layers()
            .into_iter()
            .map(|(fi, fo)| {
                let w = ArrayView2::from_shape((fo, fi), &params[off..off + fi * fo])
                    .expect("layer shape");
                off += fi * fo;
                let b = ArrayView1::from(&params[off..off + fo]);
                off += fo;
                (w, b)
            })
            .collect()
    }

    /// Batched forward pass; rows of `x` are samples.
    pub fn forward(&self, params: &[f64], x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check(params, &x)?;
        let layers = self.split(params);
        let last = layers.len() - 1;
        let mut h = x.to_owned();
        for (l, (w, b)) in layers.iter().enumerate() {
            let mut z = h.dot(&w.t());
            z += b;
            if l < last {
                z.mapv_inplace(f64::tanh);
            }
            h = z;
        }
        Ok(h)
    }

    /// Loss `sum_b w_b ||f(x_b) - y_b||^2 / sum_b w_b` and its gradient with
    /// respect to the flat parameters.
    pub fn weighted_sse(
        &self,
        params: &[f64],
        x: ArrayView2<f64>,
        y: ArrayView2<f64>,
        weights: ArrayView1<f64>,
    ) -> Result<(f64, Vec<f64>)> {
        self.check(params, &x)?;
        if x.nrows() == 0 {
            return Err(Error::Empty("batch"));
        }
        if y.dim() != (x.nrows(), self.output) || weights.len() != x.nrows() {
            return Err(Error::Dimension {
                expected: x.nrows() * self.output,
                got: y.len(),
            });
        }
        if weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::Config("sample weights must be non-negative".into()));
        }
        let wsum: f64 = weights.sum();
        if wsum <= 0.0 {
            return Err(Error::ZeroWeightSum);
        }

        let layers = self.split(params);
        let last = layers.len() - 1;
        // activations[l] is the input to layer l
        let mut acts: Vec<Array2<f64>> = Vec::with_capacity(layers.len() + 1);
        acts.push(x.to_owned());
        for (l, (w, b)) in layers.iter().enumerate() {
            let mut z = acts[l].dot(&w.t());
            z += b;
            if l < last {
                z.mapv_inplace(f64::tanh);
            }
            acts.push(z);
        }

        let out = &acts[layers.len()];
        let diff = out - &y;
        let per_sample = (&diff * &diff).sum_axis(Axis(1));
        let loss = per_sample.dot(&weights) / wsum;

        let scale: Array1<f64> = weights.mapv(|w| 2.0 * w / wsum);
        let mut delta = diff * &scale.insert_axis(Axis(1));

        let mut grad = vec![0.0; self.param_count()];
        let mut offsets = Vec::with_capacity(layers.len());
        let mut off = 0;
        for (fi, fo) in self.layers() {
            offsets.push(off);
            off += (fi + 1) * fo;
        }
        for l in (0..layers.len()).rev() {
            let (w, _) = &layers[l];
            let (fo, fi) = w.dim();
            let gw = delta.t().dot(&acts[l]);
            let gb = delta.sum_axis(Axis(0));
            let o = offsets[l];
            grad[o..o + fi * fo].copy_from_slice(gw.as_slice().expect("contiguous"));
            grad[o + fi * fo..o + fi * fo + fo].copy_from_slice(gb.as_slice().expect("contiguous"));
            if l > 0 {
                let mut dh = delta.dot(w);
                let h = &acts[l];
                ndarray::Zip::from(&mut dh).and(h).for_each(|d, &a| *d *= 1.0 - a * a);
                delta = dh;
            }
        }
        Ok((loss, grad))
    }

    /// Unweighted mean of the per-sample squared error.
    pub fn mean_sse(&self, params: &[f64], x: ArrayView2<f64>, y: ArrayView2<f64>) -> Result<f64> {
        if x.nrows() == 0 {
            return Err(Error::Empty("dataset"));
        }
        let out = self.forward(params, x)?;
        if out.dim() != y.dim() {
            return Err(Error::Dimension {
                expected: out.len(),
                got: y.len(),
            });
        }
        let diff = out - y;
        Ok((&diff * &diff).sum() / x.nrows() as f64)
    }

    /// Slice of the flat vector holding layer `l`'s weights (without biases).
    pub fn weight_range(&self, l: usize) -> std::ops::Range<usize> {
        let mut off = 0;
        for (i, (fi, fo)) in self.layers().into_iter().enumerate() {
            if i == l {
                return off..off + fi * fo;
            }
            off += (fi + 1) * fo;
        }
        panic!("layer {l} out of range")
    }

    pub fn bias_range(&self, l: usize) -> std::ops::Range<usize> {
        let w = self.weight_range(l);
        let fo = self.layers()[l].1;
        w.end..w.end + fo
    }
}

/// Gathers rows of `m` in the given order.
pub(crate) fn gather_rows(m: &Array2<f64>, rows: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros((rows.len(), m.ncols()));
    for (i, &r) in rows.iter().enumerate() {
        out.slice_mut(s![i, ..]).assign(&m.row(r));
    }
    out
}
