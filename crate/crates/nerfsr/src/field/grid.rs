//! Vector-matrix factorized feature grid.
//!
//! A 3-D feature volume is stored as three plane factors [R, N_a, N_b] and
//! three line factors [R, N_c] over complementary axis pairs, plus a mixing
//! matrix [channels, 3R] that maps stacked plane*line products to output
//! features. Queries are bilinear on planes and linear on lines, so the
//! represented field is piecewise-trilinear per component.

use ndarray::{Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::geometry::Aabb;

/// Axis layout of component k: (plane axis a, plane axis b, line axis c).
pub const COMPONENT_AXES: [(usize, usize, usize); 3] = [(0, 1, 2), (0, 2, 1), (1, 2, 0)];

#[derive(Debug, Clone)]
pub struct FactorizedGrid {
    pub resolution: [usize; 3],
    pub rank: usize,
    pub channels: usize,
    pub bounding_box: Aabb,
    /// plane_factors[k] has shape [R, N_a, N_b] per COMPONENT_AXES.
    pub plane_factors: [Array3<f64>; 3],
    /// line_factors[k] has shape [R, N_c].
    pub line_factors: [Array2<f64>; 3],
    /// [channels, 3R]; column k*R + r weighs component k, rank r.
    pub mixing: Array2<f64>,
}

/// Gradient buffers matching a grid's parameter arrays.
#[derive(Debug, Clone)]
pub struct GridGrads {
    pub plane_factors: [Array3<f64>; 3],
    pub line_factors: [Array2<f64>; 3],
    pub mixing: Array2<f64>,
}

/// Index and fractional offset of a coordinate in a node lattice of size n,
/// clamped so the upper neighbor always exists.
#[inline]
fn locate(u: f64, n: usize) -> (usize, f64) {
    if n == 1 {
        return (0, 0.0);
    }
    let u = u.clamp(0.0, (n - 1) as f64);
    let i = (u.floor() as usize).min(n - 2);
    (i, u - i as f64)
}

impl FactorizedGrid {
    /// Grid with factors ~ Normal(0, std) and the given constant mixing
    /// initializer (None draws fan-in normals instead).
    pub fn init(
        resolution: [usize; 3],
        rank: usize,
        channels: usize,
        bounding_box: Aabb,
        factor_std: f64,
        constant_mixing: Option<f64>,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let normal = |rng: &mut ChaCha8Rng, std: f64| -> f64 {
            // Box-Muller; two uniform draws per sample keeps the stream
            // layout independent of any cached spare value.
            let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        };
        let plane_factors = std::array::from_fn(|k| {
            let (a, b, _) = COMPONENT_AXES[k];
            Array3::from_shape_simple_fn((rank, resolution[a], resolution[b]), || {
                normal(rng, factor_std)
            })
        });
        let line_factors = std::array::from_fn(|k| {
            let (_, _, c) = COMPONENT_AXES[k];
            Array2::from_shape_simple_fn((rank, resolution[c]), || normal(rng, factor_std))
        });
        let mixing = match constant_mixing {
            Some(v) => Array2::from_elem((channels, 3 * rank), v),
            None => {
                let std = 1.0 / ((3 * rank).max(1) as f64).sqrt();
                Array2::from_shape_simple_fn((channels, 3 * rank), || normal(rng, std))
            }
        };
        FactorizedGrid {
            resolution,
            rank,
            channels,
            bounding_box,
            plane_factors,
            line_factors,
            mixing,
        }
    }

    pub fn param_count(&self) -> usize {
        self.plane_factors.iter().map(|p| p.len()).sum::<usize>()
            + self.line_factors.iter().map(|l| l.len()).sum::<usize>()
            + self.mixing.len()
    }

    /// Continuous lattice coordinate of `x` on axis `axis`.
    #[inline]
    fn lattice(&self, axis: usize, x: f64) -> f64 {
        let lo = self.bounding_box.min[axis];
        let hi = self.bounding_box.max[axis];
        let n = self.resolution[axis];
        if n == 1 || hi <= lo {
            return 0.0;
        }
        (x - lo) / (hi - lo) * (n - 1) as f64
    }

    /// Stacked per-component plane*line products at `p`, written to
    /// `out` of length 3R. `p` must lie inside the bounding box.
    pub fn products(&self, p: &[f64; 3], out: &mut [f64]) {
        debug_assert_eq!(out.len(), 3 * self.rank);
        let loc: [(usize, f64); 3] =
            std::array::from_fn(|a| locate(self.lattice(a, p[a]), self.resolution[a]));
        for k in 0..3 {
            let (a, b, c) = COMPONENT_AXES[k];
            let (ia, fa) = loc[a];
            let (ib, fb) = loc[b];
            let (ic, fc) = loc[c];
            let w00 = (1.0 - fa) * (1.0 - fb);
            let w10 = fa * (1.0 - fb);
            let w01 = (1.0 - fa) * fb;
            let w11 = fa * fb;
            let plane = &self.plane_factors[k];
            let line = &self.line_factors[k];
            for r in 0..self.rank {
                let pv = w00 * plane[[r, ia, ib]]
                    + w10 * plane[[r, ia + 1, ib]]
                    + w01 * plane[[r, ia, ib + 1]]
                    + w11 * plane[[r, ia + 1, ib + 1]];
                let lv = (1.0 - fc) * line[[r, ic]] + fc * line[[r, ic + 1]];
                out[k * self.rank + r] = pv * lv;
            }
        }
    }

    /// Mixed feature vector at `p`: mixing . products(p), written to `out`
    /// of length `channels`. `scratch` must have length 3R.
    pub fn features(&self, p: &[f64; 3], out: &mut [f64], scratch: &mut [f64]) {
        self.products(p, scratch);
        debug_assert_eq!(out.len(), self.channels);
        for (ch, o) in out.iter_mut().enumerate() {
            let row = self.mixing.row(ch);
            *o = row.iter().zip(scratch.iter()).map(|(m, v)| m * v).sum();
        }
    }

    /// Accumulates parameter gradients for one query: given d(loss)/d(feature)
    /// at `p`, scatters into `grads`. Recomputes the interpolation weights.
    pub fn backward(&self, p: &[f64; 3], dfeat: &[f64], grads: &mut GridGrads) {
        debug_assert_eq!(dfeat.len(), self.channels);
        let loc: [(usize, f64); 3] =
            std::array::from_fn(|a| locate(self.lattice(a, p[a]), self.resolution[a]));
        for k in 0..3 {
            let (a, b, c) = COMPONENT_AXES[k];
            let (ia, fa) = loc[a];
            let (ib, fb) = loc[b];
            let (ic, fc) = loc[c];
            let w00 = (1.0 - fa) * (1.0 - fb);
            let w10 = fa * (1.0 - fb);
            let w01 = (1.0 - fa) * fb;
            let w11 = fa * fb;
            let plane = &self.plane_factors[k];
            let line = &self.line_factors[k];
            for r in 0..self.rank {
                let col = k * self.rank + r;
                let pv = w00 * plane[[r, ia, ib]]
                    + w10 * plane[[r, ia + 1, ib]]
                    + w01 * plane[[r, ia, ib + 1]]
                    + w11 * plane[[r, ia + 1, ib + 1]];
                let lv = (1.0 - fc) * line[[r, ic]] + fc * line[[r, ic + 1]];
                // d(loss)/d(product col) via the mixing matrix, plus the
                // mixing gradient itself.
                let mut dprod = 0.0;
                for ch in 0..self.channels {
                    let df = dfeat[ch];
                    dprod += df * self.mixing[[ch, col]];
                    grads.mixing[[ch, col]] += df * pv * lv;
                }
                let dpv = dprod * lv;
                let gp = &mut grads.plane_factors[k];
                gp[[r, ia, ib]] += dpv * w00;
                gp[[r, ia + 1, ib]] += dpv * w10;
                gp[[r, ia, ib + 1]] += dpv * w01;
                gp[[r, ia + 1, ib + 1]] += dpv * w11;
                let dlv = dprod * pv;
                let gl = &mut grads.line_factors[k];
                gl[[r, ic]] += dlv * (1.0 - fc);
                gl[[r, ic + 1]] += dlv * fc;
            }
        }
    }

    /// Linearly resamples all factors onto `new_resolution` nodes
    /// (align-corners mapping), leaving the represented field unchanged up
    /// to interpolation error.
    pub fn upsampled(&self, new_resolution: [usize; 3]) -> FactorizedGrid {
        let src = |axis: usize, j: usize, n_new: usize| -> f64 {
            let n_old = self.resolution[axis];
            if n_new == 1 || n_old == 1 {
                return 0.0;
            }
            j as f64 * (n_old - 1) as f64 / (n_new - 1) as f64
        };
        let plane_factors = std::array::from_fn(|k| {
            let (a, b, _) = COMPONENT_AXES[k];
            let (na, nb) = (new_resolution[a], new_resolution[b]);
            Array3::from_shape_fn((self.rank, na, nb), |(r, ja, jb)| {
                let (ia, fa) = locate(src(a, ja, na), self.resolution[a]);
                let (ib, fb) = locate(src(b, jb, nb), self.resolution[b]);
                let p = &self.plane_factors[k];
                (1.0 - fa) * (1.0 - fb) * p[[r, ia, ib]]
                    + fa * (1.0 - fb) * p[[r, ia + 1, ib]]
                    + (1.0 - fa) * fb * p[[r, ia, ib + 1]]
                    + fa * fb * p[[r, ia + 1, ib + 1]]
            })
        });
        let line_factors = std::array::from_fn(|k| {
            let (_, _, c) = COMPONENT_AXES[k];
            let nc = new_resolution[c];
            Array2::from_shape_fn((self.rank, nc), |(r, jc)| {
                let (ic, fc) = locate(src(c, jc, nc), self.resolution[c]);
                let l = &self.line_factors[k];
                (1.0 - fc) * l[[r, ic]] + fc * l[[r, ic + 1]]
            })
        });
        FactorizedGrid {
            resolution: new_resolution,
            rank: self.rank,
            channels: self.channels,
            bounding_box: self.bounding_box,
            plane_factors,
            line_factors,
            mixing: self.mixing.clone(),
        }
    }
}

impl GridGrads {
    pub fn zeros_like(grid: &FactorizedGrid) -> Self {
        GridGrads {
            plane_factors: std::array::from_fn(|k| {
                Array3::zeros(grid.plane_factors[k].raw_dim())
            }),
            line_factors: std::array::from_fn(|k| Array2::zeros(grid.line_factors[k].raw_dim())),
            mixing: Array2::zeros(grid.mixing.raw_dim()),
        }
    }
}
