//! Closed-form layer arithmetic: convolution parameter counts, the
//! depthwise-separable reduction factor, the TiKAN activation gate and
//! B-spline bases.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Minimum channel count for the KAN transform to run.
pub const TIKAN_MIN_CHANNELS: usize = 16;
/// Maximum `height * width` for the KAN transform to run.
pub const TIKAN_MAX_AREA: usize = 1024;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvShape {
    pub kernel: u64,
    pub c_in: u64,
    pub c_out: u64,
}

impl ConvShape {
    pub fn new(kernel: u64, c_in: u64, c_out: u64) -> Result<Self> {
        if kernel == 0 || c_in == 0 || c_out == 0 {
            return Err(Error::InvalidArgument(format!(
                "conv shape needs positive values, got K={kernel} {c_in}->{c_out}"
            )));
        }
        Ok(Self { kernel, c_in, c_out })
    }
}

/// `K²·C_in·C_out`.
pub fn std_conv_params(s: &ConvShape) -> u64 {
    s.kernel * s.kernel * s.c_in * s.c_out
}

/// `K²·C_in + C_in·C_out`: one depthwise `K x K` filter per input channel
/// followed by a pointwise `1 x 1` mix.
pub fn dsconv_params(s: &ConvShape) -> u64 {
    s.kernel * s.kernel * s.c_in + s.c_in * s.c_out
}

/// Adds one bias per output channel (and per depthwise channel for the
/// separable form).
pub fn conv_params(s: &ConvShape, kind: ConvKind, bias: bool) -> u64 {
    let b = u64::from(bias);
    match kind {
        ConvKind::Standard => std_conv_params(s) + b * s.c_out,
        ConvKind::DepthwiseSeparable => dsconv_params(s) + b * (s.c_in + s.c_out),
    }
}

/// `K²·C_out / (K² + C_out)`, the ratio of the two counts above.
pub fn reduction_factor(s: &ConvShape) -> f64 {
    let k2 = (s.kernel * s.kernel) as f64;
    k2 * s.c_out as f64 / (k2 + s.c_out as f64)
}

pub fn tikan_active(channels: usize, height: usize, width: usize) -> bool {
    channels >= TIKAN_MIN_CHANNELS && height.saturating_mul(width) <= TIKAN_MAX_AREA
}

/// Spline `Σ c_i·B_{i,p}(x)` over a knot vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplineBasis {
    knots: Vec<f64>,
    degree: usize,
    control: Vec<f64>,
}

impl SplineBasis {
    pub fn new(knots: Vec<f64>, degree: usize, control: Vec<f64>) -> Result<Self> {
        if knots.len() != control.len() + degree + 1 {
            return Err(Error::InvalidArgument(format!(
                "{} knots for {} control points of degree {degree}, need {}",
                knots.len(),
                control.len(),
                control.len() + degree + 1
            )));
        }
        if control.is_empty() {
            return Err(Error::InvalidArgument("spline needs a control point".into()));
        }
        if knots.iter().chain(&control).any(|v| !v.is_finite())
            || knots.windows(2).any(|w| w[0] > w[1])
        {
            return Err(Error::InvalidArgument(
                "knots must be finite and non-decreasing".into(),
            ));
        }
        if knots[degree] >= knots[control.len()] {
            return Err(Error::InvalidArgument("empty spline domain".into()));
        }
        Ok(Self {
            knots,
            degree,
            control,
        })
    }

    /// `grid` equal intervals on `[lo, hi]` with the end knots repeated
    /// `degree + 1` times; `grid + degree` basis functions.
    pub fn clamped_uniform(
        grid: usize,
        degree: usize,
        lo: f64,
        hi: f64,
        control: Vec<f64>,
    ) -> Result<Self> {
        if grid == 0 || !(lo < hi) {
            return Err(Error::InvalidArgument(format!(
                "clamped knots need grid >= 1 and lo < hi, got {grid} on [{lo}, {hi}]"
            )));
        }
        let mut knots = vec![lo; degree];
        knots.extend((0..=grid).map(|i| {
            if i == grid {
                hi
            } else {
                lo + (hi - lo) * i as f64 / grid as f64
            }
        }));
        knots.extend(std::iter::repeat_n(hi, degree));
        Self::new(knots, degree, control)
    }

    /// Clamped uniform knots on `[-1, 1]` with all control points 1.
    pub fn default_grid(grid: usize, degree: usize) -> Result<Self> {
        Self::clamped_uniform(grid, degree, -1.0, 1.0, vec![1.0; grid + degree])
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn control(&self) -> &[f64] {
        &self.control
    }

    pub fn len(&self) -> usize {
        self.control.len()
    }

    pub fn is_empty(&self) -> bool {
        self.control.is_empty()
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.knots[self.degree], self.knots[self.control.len()])
    }

    /// All basis values at `x` by the Cox–de Boor recursion, with `0/0`
    /// terms taken as 0. The right end of the domain belongs to the last
    /// nonempty interval.
    pub fn basis(&self, x: f64) -> Result<Vec<f64>> {
        let (lo, hi) = self.domain();
        if !(x >= lo && x <= hi) {
            return Err(Error::OutsideDomain { x, lo, hi });
        }
        let t = &self.knots;
        let m = t.len() - 1;
        let mut b: Vec<f64> = (0..m)
            .map(|i| f64::from(t[i] <= x && x < t[i + 1]))
            .collect();
        if x == hi {
            let n = self.control.len();
            let last = (0..n).rev().find(|&i| t[i] < t[i + 1]).expect("nonempty domain");
            b.iter_mut().for_each(|v| *v = 0.0);
            b[last] = 1.0;
        }
        let frac = |num: f64, den: f64| if den == 0.0 { 0.0 } else { num / den };
        for p in 1..=self.degree {
            b = (0..m - p)
                .map(|i| {
                    frac(x - t[i], t[i + p] - t[i]) * b[i]
                        + frac(t[i + p + 1] - x, t[i + p + 1] - t[i + 1]) * b[i + 1]
                })
                .collect();
        }
        Ok(b)
    }

    /// Basis values and the spline value `Σ c_i B_i(x)`.
    pub fn eval(&self, x: f64) -> Result<(Vec<f64>, f64)> {
        let b = self.basis(x)?;
        let v = b.iter().zip(&self.control).map(|(b, c)| b * c).sum();
        Ok((b, v))
    }
}

pub fn bspline_eval(basis: &SplineBasis, x: f64) -> Result<(Vec<f64>, f64)> {
    basis.eval(x)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvKind {
    #[default]
    Standard,
    DepthwiseSeparable,
}

fn one() -> u64 {
    1
}

/// One entry of a layer-spec file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub name: String,
    #[serde(default)]
    pub kind: ConvKind,
    pub kernel: u64,
    pub c_in: u64,
    pub c_out: u64,
    #[serde(default)]
    pub bias: bool,
    #[serde(default = "one")]
    pub repeat: u64,
    /// Input resolution; enables the TiKAN column when given.
    #[serde(default)]
    pub height: Option<usize>,
    #[serde(default)]
    pub width: Option<usize>,
}

/// Layer-spec file: `{"layers": [...]}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpecFile {
    pub layers: Vec<LayerSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerCost {
    pub name: String,
    pub kind: ConvKind,
    pub shape: ConvShape,
    pub repeat: u64,
    pub std_params: u64,
    pub ds_params: u64,
    pub reduction: f64,
    /// Parameters of the declared kind, bias included, times `repeat`.
    pub params: u64,
    pub tikan: Option<bool>,
}

impl LayerSpecFile {
    pub fn from_json(text: &str) -> Result<Self> {
        let f: Self = serde_json::from_str(text)?;
        for l in &f.layers {
            ConvShape::new(l.kernel, l.c_in, l.c_out)?;
        }
        Ok(f)
    }

    pub fn costs(&self) -> Result<Vec<LayerCost>> {
        self.layers
            .iter()
            .map(|l| {
                let shape = ConvShape::new(l.kernel, l.c_in, l.c_out)?;
                let params = conv_params(&shape, l.kind, l.bias)
                    .checked_mul(l.repeat)
                    .ok_or_else(|| Error::InvalidArgument(format!("`{}` overflows", l.name)))?;
                let tikan = match (l.height, l.width) {
                    (Some(h), Some(w)) => Some(tikan_active(l.c_out as usize, h, w)),
                    _ => None,
                };
                Ok(LayerCost {
                    name: l.name.clone(),
                    kind: l.kind,
                    shape,
                    repeat: l.repeat,
                    std_params: std_conv_params(&shape),
                    ds_params: dsconv_params(&shape),
                    reduction: reduction_factor(&shape),
                    params,
                    tikan,
                })
            })
            .collect()
    }
}

/// CSV table of `costs` followed by a `total` row.
pub fn cost_table_csv(costs: &[LayerCost]) -> String {
    let mut s =
        String::from("name,kind,kernel,c_in,c_out,repeat,std_params,ds_params,reduction,params,tikan\n");
    for c in costs {
        let kind = match c.kind {
            ConvKind::Standard => "standard",
            ConvKind::DepthwiseSeparable => "depthwise_separable",
        };
        let tikan = c.tikan.map(|t| t.to_string()).unwrap_or_default();
        let _ = writeln!(
            s,
            "{},{kind},{},{},{},{},{},{},{:.4},{},{tikan}",
            c.name,
            c.shape.kernel,
            c.shape.c_in,
            c.shape.c_out,
            c.repeat,
            c.std_params,
            c.ds_params,
            c.reduction,
            c.params
        );
    }
    let total: u64 = costs.iter().map(|c| c.params).sum();
    let _ = writeln!(s, "total,,,,,,,,,{total},");
    s
}
