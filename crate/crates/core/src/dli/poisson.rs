//! Poisson seamless cloning as a sparse linear solve on the pixel grid.
//!
//! For every pixel `p` of the region Ω the discrete equation is
//! `4 g_p - Σ_{q ∈ N(p) ∩ Ω} g_q = Σ_{q ∈ N(p) \ Ω} f_q + Σ_q v_pq`, where `f`
//! is the target image and `v_pq` the guidance difference along edge `pq`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::geometric::round_u8;
use crate::data::{ImageBuffer, MaskBuffer, Sample};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverMethod {
    /// Red-black Gauss–Seidel. Both colours update from disjoint neighbour
    /// sets, so the result does not depend on update order.
    #[default]
    GaussSeidel,
    ConjugateGradient,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverSettings {
    pub method: SolverMethod,
    /// Stop once `max |Δg - div v|` over Ω falls to this value (8-bit scale).
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for SolverSettings {
    fn default() -> Self {
        // The residual bound is tighter than the 1e-3 error target because
        // the error can exceed the residual by the inverse-Laplacian norm.
        Self {
            method: SolverMethod::GaussSeidel,
            tolerance: 1e-5,
            max_iterations: 10_000,
        }
    }
}

/// One channel of a Poisson problem on an `height x width` grid.
///
/// `guidance_x[p]` is the guidance along the edge from `p` to its right
/// neighbour, `guidance_y[p]` along the edge to the pixel below.
#[derive(Clone, Debug, PartialEq)]
pub struct PoissonSystem {
    height: usize,
    width: usize,
    region: Vec<bool>,
    boundary: Vec<f64>,
    guidance_x: Vec<f64>,
    guidance_y: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoissonSolution {
    /// Full plane: solved values in Ω, boundary values elsewhere.
    pub values: Vec<f64>,
    pub iterations: usize,
    pub residual: f64,
}

impl PoissonSystem {
    pub fn new(
        height: usize,
        width: usize,
        region: Vec<bool>,
        boundary: Vec<f64>,
        guidance_x: Vec<f64>,
        guidance_y: Vec<f64>,
    ) -> Result<Self> {
        let n = height * width;
        if [region.len(), boundary.len(), guidance_x.len(), guidance_y.len()]
            .iter()
            .any(|&l| l != n)
        {
            return Err(Error::DimensionMismatch(format!(
                "poisson system planes must have {height}x{width} entries"
            )));
        }
        if boundary
            .iter()
            .chain(&guidance_x)
            .chain(&guidance_y)
            .any(|v| !v.is_finite())
        {
            return Err(Error::InvalidArgument("poisson inputs must be finite".into()));
        }
        for (i, &inside) in region.iter().enumerate() {
            let (y, x) = (i / width, i % width);
            if inside && (y == 0 || x == 0 || y + 1 == height || x + 1 == width) {
                return Err(Error::InvalidArgument(format!(
                    "region pixel ({y}, {x}) lies on the image border"
                )));
            }
        }
        Ok(Self {
            height,
            width,
            region,
            boundary,
            guidance_x,
            guidance_y,
        })
    }

    /// Guidance is the forward-difference gradient of `source`.
    pub fn from_source(
        height: usize,
        width: usize,
        region: Vec<bool>,
        target: Vec<f64>,
        source: &[f64],
    ) -> Result<Self> {
        if source.len() != height * width {
            return Err(Error::DimensionMismatch("source plane size".into()));
        }
        let (gx, gy) = forward_gradient(source, height, width);
        Self::new(height, width, region, target, gx, gy)
    }

    pub fn zero_guidance(
        height: usize,
        width: usize,
        region: Vec<bool>,
        boundary: Vec<f64>,
    ) -> Result<Self> {
        let n = height * width;
        Self::new(height, width, region, boundary, vec![0.0; n], vec![0.0; n])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn region(&self) -> &[bool] {
        &self.region
    }

    pub fn boundary(&self) -> &[f64] {
        &self.boundary
    }

    pub fn interior_len(&self) -> usize {
        self.region.iter().filter(|&&r| r).count()
    }

    fn neighbours(&self, p: usize) -> [usize; 4] {
        [p - 1, p + 1, p - self.width, p + self.width]
    }

    /// `Σ_q v_pq` for the four edges leaving `p`, with `v_pq` the guidance
    /// difference `g_p - g_q` along each edge (the negated divergence).
    fn guidance_sum(&self, p: usize) -> f64 {
        let w = self.width;
        -self.guidance_x[p] + self.guidance_x[p - 1] - self.guidance_y[p] + self.guidance_y[p - w]
    }

    /// Right-hand side of the linear system: guidance plus fixed neighbours.
    fn rhs(&self) -> Vec<f64> {
        (0..self.region.len())
            .map(|p| {
                if !self.region[p] {
                    return 0.0;
                }
                let fixed: f64 = self
                    .neighbours(p)
                    .iter()
                    .filter(|&&q| !self.region[q])
                    .map(|&q| self.boundary[q])
                    .sum();
                self.guidance_sum(p) + fixed
            })
            .collect()
    }

    /// `max_p |Δg_p - div v_p|` over Ω, `g` a full plane.
    pub fn residual(&self, g: &[f64]) -> f64 {
        (0..g.len())
            .filter(|&p| self.region[p])
            .map(|p| {
                let lap: f64 = self.neighbours(p).iter().map(|&q| g[q]).sum::<f64>() - 4.0 * g[p];
                (lap + self.guidance_sum(p)).abs()
            })
            .fold(0.0, f64::max)
    }

    /// Discrete gradient-mismatch energy over every edge touching Ω.
    pub fn energy(&self, g: &[f64]) -> f64 {
        let w = self.width;
        let mut e = 0.0;
        for p in 0..g.len() {
            let (y, x) = (p / w, p % w);
            if x + 1 < w && (self.region[p] || self.region[p + 1]) {
                let d = g[p + 1] - g[p] - self.guidance_x[p];
                e += d * d;
            }
            if y + 1 < self.height && (self.region[p] || self.region[p + w]) {
                let d = g[p + w] - g[p] - self.guidance_y[p];
                e += d * d;
            }
        }
        e
    }

    pub fn solve(&self, settings: &SolverSettings) -> Result<PoissonSolution> {
        self.solve_observed(settings, |_, _| {})
    }

    /// Like [`solve`](Self::solve), calling `observe(iteration, plane)` after
    /// every iteration.
    pub fn solve_observed(
        &self,
        settings: &SolverSettings,
        observe: impl FnMut(usize, &[f64]),
    ) -> Result<PoissonSolution> {
        if !(settings.tolerance > 0.0) {
            return Err(Error::InvalidArgument("solver tolerance must be > 0".into()));
        }
        match settings.method {
            SolverMethod::GaussSeidel => self.gauss_seidel(settings, observe),
            SolverMethod::ConjugateGradient => self.conjugate_gradient(settings, observe),
        }
    }

    fn gauss_seidel(
        &self,
        settings: &SolverSettings,
        mut observe: impl FnMut(usize, &[f64]),
    ) -> Result<PoissonSolution> {
        let w = self.width;
        let rhs = self.rhs();
        let mut g = self.boundary.clone();
        let colours: [Vec<usize>; 2] = [0, 1].map(|c| {
            (0..g.len())
                .filter(|&p| self.region[p] && (p / w + p % w) % 2 == c)
                .collect()
        });
        let mut residual = self.residual(&g);
        let mut iterations = 0;
        while residual > settings.tolerance {
            if iterations == settings.max_iterations {
                return Err(Error::NonConvergence {
                    iterations,
                    residual,
                });
            }
            for colour in &colours {
                for &p in colour {
                    let inner: f64 = self
                        .neighbours(p)
                        .iter()
                        .filter(|&&q| self.region[q])
                        .map(|&q| g[q])
                        .sum();
                    g[p] = (rhs[p] + inner) / 4.0;
                }
            }
            iterations += 1;
            observe(iterations, &g);
            residual = self.residual(&g);
        }
        Ok(PoissonSolution {
            values: g,
            iterations,
            residual,
        })
    }

    fn conjugate_gradient(
        &self,
        settings: &SolverSettings,
        mut observe: impl FnMut(usize, &[f64]),
    ) -> Result<PoissonSolution> {
        let idx: Vec<usize> = (0..self.region.len()).filter(|&p| self.region[p]).collect();
        let mut g = self.boundary.clone();
        let mut residual = self.residual(&g);
        if residual <= settings.tolerance {
            return Ok(PoissonSolution {
                values: g,
                iterations: 0,
                residual,
            });
        }
        let rhs = self.rhs();
        let apply = |v: &[f64], out: &mut Vec<f64>| {
            // v lives on the full plane with zeros outside Ω
            out.clear();
            out.extend(idx.iter().map(|&p| {
                let inner: f64 = self.neighbours(p).iter().map(|&q| v[q]).sum();
                4.0 * v[p] - inner
            }));
        };
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();

        let mut field = vec![0.0; g.len()];
        for &p in &idx {
            field[p] = g[p];
        }
        let mut ap = Vec::with_capacity(idx.len());
        apply(&field, &mut ap);
        let mut r: Vec<f64> = idx.iter().zip(&ap).map(|(&p, a)| rhs[p] - a).collect();
        let mut d = r.clone();
        let mut rr = dot(&r, &r);
        let mut dir = vec![0.0; g.len()];
        let mut iterations = 0;
        while residual > settings.tolerance {
            if iterations == settings.max_iterations {
                return Err(Error::NonConvergence {
                    iterations,
                    residual,
                });
            }
            for (k, &p) in idx.iter().enumerate() {
                dir[p] = d[k];
            }
            apply(&dir, &mut ap);
            let step = rr / dot(&d, &ap);
            for (k, &p) in idx.iter().enumerate() {
                g[p] += step * d[k];
                r[k] -= step * ap[k];
            }
            let rr_next = dot(&r, &r);
            let beta = rr_next / rr;
            for (dk, rk) in d.iter_mut().zip(&r) {
                *dk = rk + beta * *dk;
            }
            rr = rr_next;
            iterations += 1;
            observe(iterations, &g);
            residual = self.residual(&g);
        }
        Ok(PoissonSolution {
            values: g,
            iterations,
            residual,
        })
    }
}

/// Forward differences `(f[y][x+1] - f[y][x], f[y+1][x] - f[y][x])`, zero on
/// the last column and row.
pub fn forward_gradient(plane: &[f64], height: usize, width: usize) -> (Vec<f64>, Vec<f64>) {
    let mut gx = vec![0.0; plane.len()];
    let mut gy = vec![0.0; plane.len()];
    for y in 0..height {
        for x in 0..width {
            let p = y * width + x;
            if x + 1 < width {
                gx[p] = plane[p + 1] - plane[p];
            }
            if y + 1 < height {
                gy[p] = plane[p + width] - plane[p];
            }
        }
    }
    (gx, gy)
}

/// Max-pooling with a `kernel x kernel` window (stride 1, same size).
pub fn dilate_max(mask: &MaskBuffer, kernel: usize) -> Result<MaskBuffer> {
    if kernel == 0 || kernel.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!(
            "dilation kernel must be odd and positive, got {kernel}"
        )));
    }
    let (h, w) = (mask.height(), mask.width());
    let r = kernel / 2;
    let mut labels = vec![0u8; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut m = 0;
            for yy in y.saturating_sub(r)..(y + r + 1).min(h) {
                for xx in x.saturating_sub(r)..(x + r + 1).min(w) {
                    m = m.max(mask.get(yy, xx));
                }
            }
            labels[y * w + x] = m;
        }
    }
    MaskBuffer::new(h, w, labels)
}

/// Blends the defect into `target` over the dilated defect mask.
///
/// Ω is the nonzero region of the dilated mask minus the image border. Pixels
/// outside Ω keep the target values exactly; the output mask is the dilated
/// mask.
pub fn poisson_clone(
    defect: &Sample,
    target: &ImageBuffer,
    kernel: usize,
    settings: &SolverSettings,
) -> Result<Sample> {
    let (h, w) = (target.height(), target.width());
    if (defect.height(), defect.width()) != (h, w) {
        return Err(Error::DimensionMismatch(format!(
            "defect `{}` is {}x{}, target is {h}x{w}",
            defect.id,
            defect.height(),
            defect.width()
        )));
    }
    if defect.mask.is_defect_free() {
        return Err(Error::EmptyDefect(defect.id.clone()));
    }
    let mask = dilate_max(&defect.mask, kernel)?;
    let region: Vec<bool> = (0..h * w)
        .map(|p| {
            let (y, x) = (p / w, p % w);
            mask.labels()[p] != 0 && y > 0 && x > 0 && y + 1 < h && x + 1 < w
        })
        .collect();
    let ch = target.channels();
    let source = defect.image.with_channels(ch)?;
    let planes: Vec<Result<Vec<f64>>> = (0..ch)
        .into_par_iter()
        .map(|c| {
            let system = PoissonSystem::from_source(
                h,
                w,
                region.clone(),
                target.plane(c),
                &source.plane(c),
            )?;
            Ok(system.solve(settings)?.values)
        })
        .collect();
    let mut image = target.clone();
    for (c, plane) in planes.into_iter().enumerate() {
        let plane = plane?;
        for p in (0..h * w).filter(|&p| region[p]) {
            image.set(p / w, p % w, c, round_u8(plane[p]));
        }
    }
    Sample::new(defect.id.clone(), image, mask)
}
