//! Learnable spatial polar transformation.
//!
//! An image is resampled onto an (angle, radius) grid: output row `i` holds
//! samples along the ray at angle `theta_i`, output column `j` the samples at
//! radius `r_j = j * R / M`. The angles are not free parameters. They come
//! from a weight vector `lambda` through a normalized cumulative sum of its
//! positive parts,
//!
//! ```text
//! z_i     = sum_{k<=i} max(0, lambda_k) / sum_{k<N} max(0, lambda_k)
//! theta_i = (b - a) * z_i + a
//! ```
//!
//! which keeps every angle inside `[a, b]` and preserves their order under
//! any gradient update.
//!
//! # Coordinate frame
//!
//! Grid coordinates are normalized: `(0, 0)` is the image center, `x` points
//! right, `y` points up, and `±1` are the centers of the outermost pixels.
//! They map to fractional pixel positions by
//!
//! ```text
//! col = (x + 1) / 2 * (W - 1)
//! row = (1 - y) / 2 * (H - 1)
//! ```
//!
//! Samples are read with the bilinear kernel `max(0, 1 - |col - w|) *
//! max(0, 1 - |row - h|)` summed over all pixels, so positions outside the
//! raster read as 0 (the sketch background).

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::tensor::Tensor;

/// Lambda entries are initialized to this constant, which yields uniformly
/// spaced angles.
pub const LAMBDA_INIT: f64 = 0.05;

/// Below this positive mass the angle parameters are treated as collapsed.
pub const DEGENERATE_MASS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SptConfig {
    /// Number of sampled angles (output rows), `N`.
    pub rows: usize,
    /// Number of sampled radii (output columns), `M`.
    pub cols: usize,
    /// Largest sampled radius `R` in normalized units.
    pub max_radius: f64,
    /// Angle of the first row, `a`.
    pub start_angle: f64,
    /// Angle the last row reaches, `b`.
    pub end_angle: f64,
    /// Polar center in normalized coordinates.
    pub origin: (f64, f64),
}

impl SptConfig {
    pub fn new(rows: usize, cols: usize, max_radius: f64, start_angle: f64, end_angle: f64) -> Self {
        SptConfig {
            rows,
            cols,
            max_radius,
            start_angle,
            end_angle,
            origin: (0.0, 0.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.rows >= 2, Config, "SPT needs at least 2 rows, got {}", self.rows);
        ensure!(self.cols >= 2, Config, "SPT needs at least 2 columns, got {}", self.cols);
        ensure!(
            self.max_radius > 0.0 && self.max_radius.is_finite(),
            Config,
            "SPT max radius must be positive, got {}",
            self.max_radius
        );
        ensure!(
            self.start_angle != self.end_angle,
            Config,
            "SPT angle range is empty ({} == {})",
            self.start_angle,
            self.end_angle
        );
        Ok(())
    }

    /// Closed interval spanned by the angle range, low end first.
    pub fn angle_bounds(&self) -> (f64, f64) {
        (
            self.start_angle.min(self.end_angle),
            self.start_angle.max(self.end_angle),
        )
    }

    pub fn radii(&self) -> Vec<f64> {
        (0..self.cols)
            .map(|j| j as f64 * self.max_radius / self.cols as f64)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SptParams {
    pub lambda: Vec<f64>,
}

impl SptParams {
    pub fn uniform(rows: usize) -> Self {
        SptParams {
            lambda: vec![LAMBDA_INIT; rows],
        }
    }

    pub fn positive_mass(&self) -> f64 {
        positive_mass(&self.lambda)
    }

    /// Restores uniform angles when the positive mass has collapsed. Returns
    /// whether a reset happened.
    pub fn guard_degenerate(&mut self) -> bool {
        if self.positive_mass() < DEGENERATE_MASS {
            self.lambda.fill(LAMBDA_INIT);
            true
        } else {
            false
        }
    }
}

fn positive_mass(lambda: &[f64]) -> f64 {
    lambda.iter().map(|v| v.max(0.0)).sum()
}

/// Normalized cumulative sum of the positive parts of `lambda`.
pub fn lambda_to_z(lambda: &[f64]) -> Result<Vec<f64>> {
    let total = positive_mass(lambda);
    if !(total > 0.0) {
        return Err(Error::Degenerate(format!(
            "no positive entry among {} lambda values",
            lambda.len()
        )));
    }
    let mut acc = 0.0;
    Ok(lambda
        .iter()
        .map(|v| {
            acc += v.max(0.0);
            acc / total
        })
        .collect())
}

/// Affine map of `z` onto the angle range `a -> b`.
pub fn z_to_theta(z: &[f64], start_angle: f64, end_angle: f64) -> Vec<f64> {
    z.iter()
        .map(|&zi| (end_angle - start_angle) * zi + start_angle)
        .collect()
}

/// Jacobian `dz_i / dlambda_k`, row `i`, column `k`, evaluated case by case:
/// the prefix case `k <= i`, the suffix case `k > i`, and zero for
/// non-positive `lambda_k`.
pub fn z_jacobian(lambda: &[f64]) -> Result<Vec<Vec<f64>>> {
    let n = lambda.len();
    let total = positive_mass(lambda);
    ensure!(total > 0.0, Degenerate, "no positive entry among {n} lambda values");
    let pos: Vec<f64> = lambda.iter().map(|v| v.max(0.0)).collect();
    let sq = total * total;
    Ok((0..n)
        .map(|i| {
            let head: f64 = pos[..=i].iter().sum();
            let tail: f64 = pos[i + 1..].iter().sum();
            (0..n)
                .map(|k| {
                    if lambda[k] <= 0.0 {
                        0.0
                    } else if k <= i {
                        tail / sq
                    } else {
                        -head / sq
                    }
                })
                .collect()
        })
        .collect())
}

/// Pulls a gradient on `z` back to `lambda` in `O(N)`.
///
/// For positive `lambda_k`, `dL/dlambda_k = (S * U_k - A) / S^2` where `S` is
/// the positive mass, `U_k = sum_{i>=k} g_i` and `A = sum_i g_i P_i` with
/// `P_i` the positive prefix sums.
pub fn z_backward(lambda: &[f64], upstream_z: &[f64]) -> Result<Vec<f64>> {
    ensure!(
        lambda.len() == upstream_z.len(),
        Contract,
        "lambda has length {} but upstream has {}",
        lambda.len(),
        upstream_z.len()
    );
    let total = positive_mass(lambda);
    ensure!(
        total > 0.0,
        Degenerate,
        "no positive entry among {} lambda values",
        lambda.len()
    );
    let mut prefix = 0.0;
    let mut weighted = 0.0;
    for (l, g) in lambda.iter().zip(upstream_z) {
        prefix += l.max(0.0);
        weighted += g * prefix;
    }
    let mut grad = vec![0.0; lambda.len()];
    let mut suffix = 0.0;
    for k in (0..lambda.len()).rev() {
        suffix += upstream_z[k];
        if lambda[k] > 0.0 {
            grad[k] = (total * suffix - weighted) / (total * total);
        }
    }
    Ok(grad)
}

/// Angles for `lambda` under the range of `config`.
pub fn lambda_to_theta(lambda: &[f64], config: &SptConfig) -> Result<Vec<f64>> {
    Ok(z_to_theta(
        &lambda_to_z(lambda)?,
        config.start_angle,
        config.end_angle,
    ))
}

/// Chains an angle gradient through `theta = (b - a) z + a` and the
/// cumulative-sum parametrization.
pub fn theta_to_lambda_grad(lambda: &[f64], config: &SptConfig, d_theta: &[f64]) -> Result<Vec<f64>> {
    let scale = config.end_angle - config.start_angle;
    let d_z: Vec<f64> = d_theta.iter().map(|g| g * scale).collect();
    z_backward(lambda, &d_z)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplingGrid {
    pub rows: usize,
    pub cols: usize,
    /// Normalized `(x, y)` sample positions, row-major `rows x cols`.
    pub coords: Vec<(f64, f64)>,
    pub theta: Vec<f64>,
    pub radius: Vec<f64>,
}

impl SamplingGrid {
    pub fn coord(&self, i: usize, j: usize) -> (f64, f64) {
        self.coords[i * self.cols + j]
    }

    /// Smallest distance of any sample's fractional pixel position to an
    /// integer, i.e. to a breakpoint of the bilinear kernel.
    pub fn breakpoint_margin(&self, height: usize, width: usize) -> f64 {
        self.coords
            .iter()
            .map(|&(x, y)| {
                let (c, r) = to_pixel(x, y, height, width);
                frac_distance(c).min(frac_distance(r))
            })
            .fold(f64::INFINITY, f64::min)
    }
}

fn frac_distance(v: f64) -> f64 {
    (v - v.round()).abs()
}

/// Builds sample positions `origin + r_j (cos theta_i, sin theta_i)`.
pub fn build_grid(theta: &[f64], config: &SptConfig) -> Result<SamplingGrid> {
    config.validate()?;
    ensure!(
        theta.len() == config.rows,
        Contract,
        "expected {} angles, got {}",
        config.rows,
        theta.len()
    );
    let (lo, hi) = config.angle_bounds();
    let slack = 1e-12 * (1.0 + lo.abs().max(hi.abs()));
    ensure!(
        theta.iter().all(|&t| t >= lo - slack && t <= hi + slack),
        Contract,
        "angles leave the range [{lo}, {hi}]"
    );
    let radius = config.radii();
    let (ox, oy) = config.origin;
    let mut coords = Vec::with_capacity(config.rows * config.cols);
    for &t in theta {
        let (s, c) = t.sin_cos();
        for &r in &radius {
            coords.push((ox + r * c, oy + r * s));
        }
    }
    Ok(SamplingGrid {
        rows: config.rows,
        cols: config.cols,
        coords,
        theta: theta.to_vec(),
        radius,
    })
}

/// Normalized `(x, y)` to fractional `(col, row)` pixel position.
#[inline]
pub fn to_pixel(x: f64, y: f64, height: usize, width: usize) -> (f64, f64) {
    (
        (x + 1.0) / 2.0 * (width - 1) as f64,
        (1.0 - y) / 2.0 * (height - 1) as f64,
    )
}

#[inline]
fn kernel(t: f64) -> f64 {
    (1.0 - t.abs()).max(0.0)
}

/// Derivative of `max(0, 1 - |p - q|)` with respect to `p`: `+1` when the
/// pixel is at or right of the sample, `-1` when left of it, 0 outside the
/// unit neighborhood.
#[inline]
fn kernel_slope(p: f64, q: f64) -> f64 {
    if (p - q).abs() >= 1.0 {
        0.0
    } else if q >= p {
        1.0
    } else {
        -1.0
    }
}

fn check_image(image: &Tensor) -> Result<(usize, usize)> {
    ensure!(
        image.ndim() == 2 && image.shape()[0] >= 2 && image.shape()[1] >= 2,
        Contract,
        "SPT input must be a [H,W] raster with H,W >= 2, got {:?}",
        image.shape()
    );
    Ok((image.shape()[0], image.shape()[1]))
}

/// Visits the (up to four) pixels within the unit neighborhood of `(col, row)`.
#[inline]
fn for_neighbors(col: f64, row: f64, height: usize, width: usize, mut f: impl FnMut(usize, usize)) {
    let c0 = col.floor();
    let r0 = row.floor();
    for dr in 0..2 {
        let h = r0 + dr as f64;
        if h < 0.0 || h >= height as f64 {
            continue;
        }
        for dc in 0..2 {
            let w = c0 + dc as f64;
            if w < 0.0 || w >= width as f64 {
                continue;
            }
            f(h as usize, w as usize);
        }
    }
}

/// Bilinear resampling of a `[H,W]` raster onto `grid`; returns `[N,M]`.
pub fn spt_forward(image: &Tensor, grid: &SamplingGrid) -> Result<Tensor> {
    let (height, width) = check_image(image)?;
    let u = image.data();
    let values = grid
        .coords
        .iter()
        .map(|&(x, y)| {
            let (col, row) = to_pixel(x, y, height, width);
            let mut v = 0.0;
            for_neighbors(col, row, height, width, |h, w| {
                v += u[h * width + w] * kernel(col - w as f64) * kernel(row - h as f64);
            });
            v
        })
        .collect();
    Tensor::from_vec(&[grid.rows, grid.cols], values)
}

/// Gradient of a loss with respect to the sampled angles, given the gradient
/// `upstream` on the transformed image.
pub fn spt_backward(image: &Tensor, grid: &SamplingGrid, upstream: &Tensor) -> Result<Vec<f64>> {
    let (height, width) = check_image(image)?;
    ensure!(
        upstream.shape() == [grid.rows, grid.cols],
        Contract,
        "upstream {:?} does not match grid {}x{}",
        upstream.shape(),
        grid.rows,
        grid.cols
    );
    let u = image.data();
    let up = upstream.data();
    let col_scale = (width - 1) as f64 / 2.0;
    let row_scale = -((height - 1) as f64) / 2.0;
    let mut d_theta = vec![0.0; grid.rows];
    for (i, (&theta, dt)) in grid.theta.iter().zip(d_theta.iter_mut()).enumerate() {
        let (s, c) = theta.sin_cos();
        for (j, &r) in grid.radius.iter().enumerate() {
            let g = up[i * grid.cols + j];
            if g == 0.0 || r == 0.0 {
                continue;
            }
            let (x, y) = grid.coord(i, j);
            let (col, row) = to_pixel(x, y, height, width);
            let (mut dv_dcol, mut dv_drow) = (0.0, 0.0);
            for_neighbors(col, row, height, width, |h, w| {
                let (wf, hf) = (w as f64, h as f64);
                let val = u[h * width + w];
                dv_dcol += val * kernel(row - hf) * kernel_slope(col, wf);
                dv_drow += val * kernel(col - wf) * kernel_slope(row, hf);
            });
            let dcol_dtheta = col_scale * (-r * s);
            let drow_dtheta = row_scale * (r * c);
            *dt += g * (dv_dcol * dcol_dtheta + dv_drow * drow_dtheta);
        }
    }
    Ok(d_theta)
}

/// A stream's transformation: its fixed range plus the grid built from the
/// current `lambda`.
#[derive(Debug, Clone)]
pub struct PolarTransform {
    pub config: SptConfig,
    pub grid: SamplingGrid,
}

impl PolarTransform {
    pub fn new(config: SptConfig, params: &SptParams) -> Result<Self> {
        config.validate()?;
        ensure!(
            params.lambda.len() == config.rows,
            Contract,
            "lambda has length {} but the transform has {} rows",
            params.lambda.len(),
            config.rows
        );
        let theta = lambda_to_theta(&params.lambda, &config)?;
        let grid = build_grid(&theta, &config)?;
        Ok(PolarTransform { config, grid })
    }

    pub fn apply(&self, image: &Tensor) -> Result<Tensor> {
        spt_forward(image, &self.grid)
    }

    /// Gradient on `lambda` for the upstream gradient on the output image.
    pub fn backward(&self, params: &SptParams, image: &Tensor, upstream: &Tensor) -> Result<Vec<f64>> {
        let d_theta = spt_backward(image, &self.grid, upstream)?;
        theta_to_lambda_grad(&params.lambda, &self.config, &d_theta)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_diff_gradcheck, numeric_gradient, GradcheckConfig};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    #[test]
    fn z_examples() {
        let z = lambda_to_z(&[0.05; 4]).unwrap();
        for (a, b) in z.iter().zip([0.25, 0.5, 0.75, 1.0]) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(lambda_to_z(&[1.0, -1.0, 1.0]).unwrap(), vec![0.5, 0.5, 1.0]);
        assert!(matches!(lambda_to_z(&[-1.0, 0.0]), Err(Error::Degenerate(_))));
    }

    #[test]
    fn z_matches_cumulative_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let lambda: Vec<f64> = (0..8).map(|_| rng.gen_range(0.01..1.0)).collect();
        let total: f64 = lambda.iter().sum();
        let z = lambda_to_z(&lambda).unwrap();
        for i in 0..8 {
            let expect: f64 = lambda[..=i].iter().sum::<f64>() / total;
            assert!((z[i] - expect).abs() < 1e-15);
        }
        assert_eq!(z[7], 1.0);
    }

    #[test]
    fn theta_examples() {
        assert_eq!(z_to_theta(&[1.0], PI, -PI), vec![-PI]);
        assert_eq!(z_to_theta(&[0.5], PI, -PI), vec![0.0]);
        let t = z_to_theta(&[0.25, 0.5, 0.75, 1.0], 0.75 * PI, 0.25 * PI);
        for (a, b) in t.iter().zip([0.625, 0.5, 0.375, 0.25]) {
            assert!((a - b * PI).abs() < 1e-15);
        }
    }

    #[test]
    fn grid_examples() {
        let cfg = SptConfig::new(2, 2, 2.0, PI, -PI);
        let g = build_grid(&[PI / 2.0, 0.0], &cfg).unwrap();
        // r_1 = 1
        let (x, y) = g.coord(0, 1);
        assert!(x.abs() < 1e-15 && (y - 1.0).abs() < 1e-15);
        for i in 0..2 {
            assert_eq!(g.coord(i, 0), (0.0, 0.0));
        }
    }

    #[test]
    fn grid_matches_trig_oracle() {
        let cfg = SptConfig::new(4, 4, 2.0, PI, -PI);
        let theta = lambda_to_theta(&[1.0; 4], &cfg).unwrap();
        let g = build_grid(&theta, &cfg).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let r = j as f64 * 0.5;
                let (x, y) = g.coord(i, j);
                assert!((x - r * theta[i].cos()).abs() < 1e-15);
                assert!((y - r * theta[i].sin()).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn grid_rejects_out_of_range_angles() {
        let cfg = SptConfig::new(2, 2, 1.0, 0.0, 1.0);
        assert!(build_grid(&[0.5, 1.5], &cfg).is_err());
        assert!(build_grid(&[0.5], &cfg).is_err());
    }

    fn grid_from_pixels(points: &[(f64, f64)], h: usize, w: usize) -> SamplingGrid {
        // inverse of to_pixel
        let coords = points
            .iter()
            .map(|&(c, r)| (c / (w - 1) as f64 * 2.0 - 1.0, 1.0 - r / (h - 1) as f64 * 2.0))
            .collect();
        SamplingGrid {
            rows: 1,
            cols: points.len(),
            coords,
            theta: vec![0.0],
            radius: vec![0.0; points.len()],
        }
    }

    #[test]
    fn sampling_on_pixels_and_midpoints() {
        let img = Tensor::from_vec(&[5, 5], (0..25).map(|v| v as f64 / 25.0).collect()).unwrap();
        let g = grid_from_pixels(&[(2.0, 3.0), (1.5, 2.0)], 5, 5);
        let v = spt_forward(&img, &g).unwrap();
        assert!((v.data()[0] - img.at(&[3, 2])).abs() < 1e-14);
        let mid = 0.5 * (img.at(&[2, 1]) + img.at(&[2, 2]));
        assert!((v.data()[1] - mid).abs() < 1e-14);
    }

    #[test]
    fn constant_image_gives_constant_output_and_zero_gradient() {
        // 10x10 keeps every sample off the integer lattice, where the kernel
        // slope is discontinuous.
        let img = Tensor::filled(&[10, 10], 0.7);
        let cfg = SptConfig::new(6, 5, 1.0, PI, -PI);
        let t = PolarTransform::new(cfg, &SptParams::uniform(6)).unwrap();
        let v = t.apply(&img).unwrap();
        assert!(v.data().iter().all(|&x| (x - 0.7).abs() < 1e-12));
        let up = Tensor::filled(&[6, 5], 1.3);
        let d = spt_backward(&img, &t.grid, &up).unwrap();
        assert!(d.iter().all(|&g| g.abs() < 1e-12), "{d:?}");
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = Tensor::from_vec(&[8, 8], (0..64).map(|_| rng.gen()).collect()).unwrap();
        let cfg = SptConfig::new(4, 4, 2.0, PI, -PI);
        let t = PolarTransform::new(cfg, &SptParams::uniform(4)).unwrap();
        let d = spt_backward(&img, &t.grid, &Tensor::zeros(&[4, 4])).unwrap();
        assert!(d.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn jacobian_cases() {
        let lambda = [0.3, -0.2, 0.5, 0.0];
        let jac = z_jacobian(&lambda).unwrap();
        for row in &jac {
            assert_eq!(row[1], 0.0);
            assert_eq!(row[3], 0.0);
        }
        // z_{N-1} == 1 for every lambda
        assert!(jac[3].iter().sum::<f64>().abs() < 1e-15);
        assert!(jac[3].iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn jacobian_matches_finite_differences_at_uniform_init() {
        let lambda = vec![0.05; 4];
        let jac = z_jacobian(&lambda).unwrap();
        let cfg = GradcheckConfig {
            step: 1e-7,
            tolerance: 1e-6,
            ..Default::default()
        };
        for i in 0..4 {
            let rep = finite_diff_gradcheck(
                |l| lambda_to_z(l).unwrap()[i],
                &lambda,
                &jac[i],
                &cfg,
            )
            .unwrap();
            assert!(rep.passed || jac[i].iter().all(|v| v.abs() < 1e-15), "row {i}: {rep:?}");
        }
    }

    #[test]
    fn z_backward_agrees_with_jacobian() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let lambda: Vec<f64> = (0..7).map(|_| rng.gen_range(-0.5..1.0)).collect();
            if positive_mass(&lambda) == 0.0 {
                continue;
            }
            let up: Vec<f64> = (0..7).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let jac = z_jacobian(&lambda).unwrap();
            let fast = z_backward(&lambda, &up).unwrap();
            for k in 0..7 {
                let slow: f64 = (0..7).map(|i| up[i] * jac[i][k]).sum();
                assert!((fast[k] - slow).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn theta_gradient_matches_finite_differences_away_from_breakpoints() {
        let cfg = GradcheckConfig {
            step: 1e-5,
            tolerance: 1e-4,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let spt_cfg = SptConfig::new(6, 6, 1.2, PI, -PI);
        let mut checked = 0;
        while checked < 10 {
            let img = Tensor::from_vec(&[12, 12], (0..144).map(|_| rng.gen()).collect()).unwrap();
            let theta: Vec<f64> = {
                let mut t: Vec<f64> = (0..6).map(|_| rng.gen_range(-PI..PI)).collect();
                t.sort_by(|a, b| b.partial_cmp(a).unwrap());
                t
            };
            let grid = build_grid(&theta, &spt_cfg).unwrap();
            if grid.breakpoint_margin(12, 12) < 1e-3 {
                continue;
            }
            let up = Tensor::from_vec(&[6, 6], (0..36).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
            let analytic = spt_backward(&img, &grid, &up).unwrap();
            let loss = |t: &[f64]| {
                let g = build_grid(t, &spt_cfg).unwrap();
                let v = spt_forward(&img, &g).unwrap();
                v.data().iter().zip(up.data()).map(|(a, b)| a * b).sum::<f64>()
            };
            let rep = finite_diff_gradcheck(loss, &theta, &analytic, &cfg).unwrap();
            assert!(rep.passed, "{rep:?}");
            checked += 1;
        }
    }

    #[test]
    fn lambda_gradient_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let spt_cfg = SptConfig::new(5, 4, 1.0, 0.75 * PI, 0.25 * PI);
        let img = Tensor::from_vec(&[10, 10], (0..100).map(|_| rng.gen()).collect()).unwrap();
        let lambda: Vec<f64> = (0..5).map(|_| rng.gen_range(0.02..0.1)).collect();
        let params = SptParams { lambda: lambda.clone() };
        let t = PolarTransform::new(spt_cfg, &params).unwrap();
        assert!(t.grid.breakpoint_margin(10, 10) > 1e-3);
        let up = Tensor::from_vec(&[5, 4], (0..20).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let analytic = t.backward(&params, &img, &up).unwrap();
        let numeric = numeric_gradient(
            |l| {
                let t = PolarTransform::new(spt_cfg, &SptParams { lambda: l.to_vec() }).unwrap();
                let v = t.apply(&img).unwrap();
                v.data().iter().zip(up.data()).map(|(a, b)| a * b).sum()
            },
            &lambda,
            1e-6,
        )
        .unwrap();
        let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for (a, n) in analytic.iter().zip(&numeric) {
            assert!((a - n).abs() / scale < 1e-4, "{analytic:?} vs {numeric:?}");
        }
    }

    #[test]
    fn guard_resets_collapsed_lambda() {
        let mut p = SptParams {
            lambda: vec![-0.1, 0.0, -3.0],
        };
        assert!(p.guard_degenerate());
        assert_eq!(p.lambda, vec![LAMBDA_INIT; 3]);
        assert!(!p.guard_degenerate());
    }

    #[test]
    fn config_validation() {
        assert!(SptConfig::new(1, 4, 2.0, PI, -PI).validate().is_err());
        assert!(SptConfig::new(4, 1, 2.0, PI, -PI).validate().is_err());
        assert!(SptConfig::new(4, 4, 0.0, PI, -PI).validate().is_err());
        assert!(SptConfig::new(4, 4, 2.0, 1.0, 1.0).validate().is_err());
    }

    /// Straight double sum over every pixel of the separable tent kernel.
    fn direct_sample(img: &Tensor, grid: &SamplingGrid) -> Vec<f64> {
        let (h, w) = (img.shape()[0], img.shape()[1]);
        grid.coords
            .iter()
            .map(|&(x, y)| {
                let col = (x + 1.0) / 2.0 * (w - 1) as f64;
                let row = (1.0 - y) / 2.0 * (h - 1) as f64;
                let mut v = 0.0;
                for n in 0..h {
                    for m in 0..w {
                        let kx = (1.0 - (col - m as f64).abs()).max(0.0);
                        let ky = (1.0 - (row - n as f64).abs()).max(0.0);
                        v += img.at(&[n, m]) * kx * ky;
                    }
                }
                v
            })
            .collect()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(50))]

        #[test]
        fn forward_matches_direct_double_sum(
            h in 2usize..=32,
            w in 2usize..=32,
            rows in 2usize..12,
            cols in 2usize..12,
            stream in 0usize..3,
            seed in any::<u64>(),
        ) {
            let ranges = [(PI, -PI), (-PI / 4.0, -3.0 * PI / 4.0), (3.0 * PI / 4.0, PI / 4.0)];
            let (a, b) = ranges[stream];
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let img = Tensor::from_vec(&[h, w], (0..h * w).map(|_| rng.gen()).collect()).unwrap();
            let cfg = SptConfig::new(rows, cols, 2.0, a, b);
            let lambda: Vec<f64> = (0..rows).map(|_| rng.gen_range(-0.02..0.1)).collect();
            prop_assume!(positive_mass(&lambda) > 0.0);
            let t = PolarTransform::new(cfg, &SptParams { lambda }).unwrap();
            let fast = t.apply(&img).unwrap();
            let slow = direct_sample(&img, &t.grid);
            for (f, s) in fast.data().iter().zip(&slow) {
                prop_assert!((f - s).abs() < 1e-12, "{} vs {}", f, s);
            }
        }

        #[test]
        fn quarter_turn_shifts_rows_cyclically(side in 4usize..=24, quarter in 1usize..4, seed in any::<u64>()) {
            let rows = 4 * quarter;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let img = Tensor::from_vec(&[side, side], (0..side * side).map(|_| rng.gen()).collect()).unwrap();
            // Counterclockwise quarter turn in the (x, y) frame.
            let mut turned = Tensor::zeros(&[side, side]);
            for r in 0..side {
                for c in 0..side {
                    turned.set(&[r, c], img.at(&[c, side - 1 - r]));
                }
            }
            let cfg = SptConfig::new(rows, 7, 1.3, PI, -PI);
            let t = PolarTransform::new(cfg, &SptParams::uniform(rows)).unwrap();
            let v = t.apply(&img).unwrap();
            let vt = t.apply(&turned).unwrap();
            for i in 0..rows {
                for j in 0..7 {
                    let expect = v.at(&[(i + quarter) % rows, j]);
                    prop_assert!((vt.at(&[i, j]) - expect).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn uniform_lambda_on_ring_plateaus_gives_constant_columns() {
        // Each grid radius sits inside a plateau wider than the bilinear
        // footprint, so every sample of a column reads the same value.
        let side = 64;
        let (cols, radius) = (8, 1.0);
        let spacing = radius * (side - 1) as f64 / 2.0 / cols as f64;
        let centre = (side - 1) as f64 / 2.0;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let levels: Vec<f64> = (0..=cols).map(|_| rng.gen()).collect();
        let mut img = Tensor::zeros(&[side, side]);
        for r in 0..side {
            for c in 0..side {
                let rho = ((r as f64 - centre).powi(2) + (c as f64 - centre).powi(2)).sqrt();
                let j = (rho / spacing).round() as usize;
                let v = if j <= cols && (rho - j as f64 * spacing).abs() <= 1.6 { levels[j] } else { rng.gen() };
                img.set(&[r, c], v);
            }
        }
        let cfg = SptConfig::new(56, cols, radius, PI, -PI);
        let out = PolarTransform::new(cfg, &SptParams::uniform(56)).unwrap().apply(&img).unwrap();
        for j in 1..cols {
            for i in 0..56 {
                assert!((out.at(&[i, j]) - levels[j]).abs() < 1e-9, "row {i} col {j}");
            }
        }
        assert!((1..cols).any(|j| (levels[j] - levels[j - 1]).abs() > 0.1));
    }
}
