//! Tensor grids on truncated boxes and flux-form assembly of the Dirichlet
//! quadratic form int sum q D_iu D_iv + int V u v as a sparse matrix.
//!
//! Nodes live strictly inside [-rho, rho]^d with zero Dirichlet boundary.
//! Axis coordinates are exact integer multiples of h, so grids with the same
//! spacing and nested half-widths share nodes bit-for-bit and the assembled
//! sub-blocks coincide exactly. The matrix represents -A_h: off-diagonals
//! are -q(face midpoint)/h², diagonals collect the q of every incident face
//! plus V at the node, which makes it a symmetric M-matrix.

use crate::coefficients::CoefficientField;
use crate::error::{CoreError, Result};
use crate::linalg::SymCsr;
use crate::report::MarginReport;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use std::io::Write;

/// Nodes a grid may carry before assembly is refused; at ~100 bytes per
/// matrix row this caps direct memory near half a gigabyte.
pub const DEFAULT_NODE_BUDGET: usize = 4_000_000;

/// Uniform tensor grid of interior nodes in [-rho, rho]^d.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid {
    pub d: usize,
    pub rho: f64,
    pub h: f64,
    /// Interior nodes per axis: 2 rho/h - 1.
    pub nx: usize,
    /// Total interior nodes: nx^d.
    pub n: usize,
    /// rho/h as an integer.
    c: i64,
}

pub fn build_grid(d: usize, rho: f64, h: f64) -> Result<Grid> {
    build_grid_with_budget(d, rho, h, DEFAULT_NODE_BUDGET)
}

pub fn build_grid_with_budget(d: usize, rho: f64, h: f64, budget: usize) -> Result<Grid> {
    if !(1..=3).contains(&d) {
        return Err(CoreError::invalid("d", "d in {1, 2, 3}"));
    }
    if !(h > 0.0) || !(rho > h) {
        return Err(CoreError::invalid("rho, h", "rho > h > 0"));
    }
    let cf = rho / h;
    let c = cf.round();
    if (cf - c).abs() > 1e-9 * cf {
        return Err(CoreError::Grid(format!(
            "rho/h must be integral; got rho = {rho}, h = {h} (rho/h = {cf})"
        )));
    }
    let nx = (2.0 * c - 1.0) as usize;
    let n = nx.pow(d as u32);
    if n > budget {
        return Err(CoreError::MemoryBudget { nodes: n, budget });
    }
    Ok(Grid {
        d,
        rho,
        h,
        nx,
        n,
        c: c as i64,
    })
}

impl Grid {
    /// Integer axis coordinate of node index i: ranges over 1-c ..= c-1.
    fn axis_int(&self, i: usize) -> i64 {
        i as i64 + 1 - self.c
    }

    pub fn coord_axis(&self, i: usize) -> f64 {
        self.axis_int(i) as f64 * self.h
    }

    /// Lexicographic decode: most significant axis first.
    pub fn multi_of(&self, idx: usize) -> Vec<usize> {
        let mut rem = idx;
        let mut out = vec![0usize; self.d];
        for k in (0..self.d).rev() {
            out[k] = rem % self.nx;
            rem /= self.nx;
        }
        out
    }

    pub fn index_of(&self, multi: &[usize]) -> usize {
        let mut idx = 0usize;
        for &m in multi {
            idx = idx * self.nx + m;
        }
        idx
    }

    pub fn node_coords(&self, idx: usize) -> Vec<f64> {
        self.multi_of(idx)
            .iter()
            .map(|&i| self.coord_axis(i))
            .collect()
    }

    /// The node at the origin.
    pub fn center_index(&self) -> usize {
        let mid = (self.c - 1) as usize;
        self.index_of(&vec![mid; self.d])
    }

    /// Index of the interior node nearest to x; None when x is outside the
    /// open box.
    pub fn nearest_index(&self, x: &[f64]) -> Option<usize> {
        let mut multi = Vec::with_capacity(self.d);
        for &xi in x {
            if xi.abs() >= self.rho {
                return None;
            }
            let i = (xi / self.h).round() as i64 + self.c - 1;
            multi.push(i.clamp(0, self.nx as i64 - 1) as usize);
        }
        Some(self.index_of(&multi))
    }

    pub fn cell_volume(&self) -> f64 {
        self.h.powi(self.d as i32)
    }

    pub fn descriptor(&self) -> String {
        format!(
            "box [-{rho}, {rho}]^{d}, h = {h}, n = {n}",
            rho = self.rho,
            d = self.d,
            h = self.h,
            n = self.n
        )
    }
}

/// Assembled -A_h with its grid and field.
#[derive(Debug, Clone)]
pub struct DiscreteOperator {
    pub matrix: SymCsr,
    pub grid: Grid,
    pub eta: f64,
    pub field: CoefficientField,
    /// V at each node, in grid order.
    pub v_diag: Vec<f64>,
}

/// Flux-form assembly. Every face between adjacent cells is visited once and
/// its midpoint diffusion coefficient written to both incident entries, so
/// symmetry is exact by construction; faces into the Dirichlet boundary
/// contribute to the diagonal only.
pub fn assemble(field: &CoefficientField, grid: &Grid) -> Result<DiscreteOperator> {
    if field.d != grid.d {
        return Err(CoreError::Incompatible(format!(
            "field dimension {} does not match grid dimension {}",
            field.d, grid.d
        )));
    }
    let overflow_hint = |e: CoreError| match e {
        CoreError::Overflow { context } => CoreError::Overflow {
            context: format!(
                "{context} during assembly; reduce rho (exponential coefficients \
                 overflow past moderate radii)"
            ),
        },
        other => other,
    };
    let h2 = grid.h * grid.h;
    let mut trips: Vec<(usize, usize, f64)> = Vec::with_capacity(grid.n * (2 * grid.d + 1));
    let mut v_diag = vec![0.0; grid.n];
    let mut coords = vec![0.0; grid.d];
    for idx in 0..grid.n {
        let multi = grid.multi_of(idx);
        for (k, &m) in multi.iter().enumerate() {
            coords[k] = grid.coord_axis(m);
        }
        let v = field.eval_v(&coords).map_err(overflow_hint)?;
        v_diag[idx] = v;
        trips.push((idx, idx, v));
        for k in 0..grid.d {
            // face midpoint on the + side of axis k: integer coordinate + 1/2
            let mut mid = coords.clone();
            mid[k] = (grid.axis_int(multi[k]) as f64 + 0.5) * grid.h;
            let w = field.q_scalar(&mid).map_err(overflow_hint)? / h2;
            if multi[k] + 1 < grid.nx {
                let mut nbr = multi.clone();
                nbr[k] += 1;
                let j = grid.index_of(&nbr);
                trips.push((idx, idx, w));
                trips.push((j, j, w));
                trips.push((idx, j, -w));
                trips.push((j, idx, -w));
            } else {
                // face into the boundary
                trips.push((idx, idx, w));
            }
            if multi[k] == 0 {
                // left boundary face, visited from its only interior neighbor
                let mut lmid = coords.clone();
                lmid[k] = (grid.axis_int(0) as f64 - 0.5) * grid.h;
                let w = field.q_scalar(&lmid).map_err(overflow_hint)? / h2;
                trips.push((idx, idx, w));
            }
        }
    }
    let matrix = SymCsr::from_triplets(grid.n, trips)?;
    Ok(DiscreteOperator {
        matrix,
        grid: *grid,
        eta: field.eta,
        field: field.clone(),
        v_diag,
    })
}

impl DiscreteOperator {
    pub fn n(&self) -> usize {
        self.grid.n
    }

    /// Coordinate text dump: one "row col value" line per entry.
    pub fn dump_coo(&self, w: &mut impl Write) -> std::io::Result<()> {
        for (i, j, v) in self.matrix.triplets() {
            writeln!(w, "{i} {j} {v:.17e}")?;
        }
        Ok(())
    }
}

/// L2 norm weighted by cell volume: (sum u_i^2 h^d)^{1/2}.
pub fn norm_l2(grid: &Grid, u: &[f64]) -> f64 {
    (u.iter().map(|v| v * v).sum::<f64>() * grid.cell_volume()).sqrt()
}

/// L1 norm weighted by cell volume.
pub fn norm_l1(grid: &Grid, u: &[f64]) -> f64 {
    u.iter().map(|v| v.abs()).sum::<f64>() * grid.cell_volume()
}

pub fn norm_linf(u: &[f64]) -> f64 {
    u.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

/// Squared forward-difference gradient norm with zero extension across the
/// Dirichlet boundary: sum over all faces of (Du/h)^2 * h^d. This is exactly
/// the quadratic form of the assembled matrix when q = 1 and V = 0.
pub fn grad_norm_sq(grid: &Grid, u: &[f64]) -> f64 {
    debug_assert_eq!(u.len(), grid.n);
    let vol = grid.cell_volume();
    let h2 = grid.h * grid.h;
    let mut acc = 0.0;
    for idx in 0..grid.n {
        let multi = grid.multi_of(idx);
        for k in 0..grid.d {
            let up = if multi[k] + 1 < grid.nx {
                let mut nbr = multi.clone();
                nbr[k] += 1;
                u[grid.index_of(&nbr)]
            } else {
                0.0
            };
            let diff = up - u[idx];
            acc += diff * diff / h2 * vol;
            if multi[k] == 0 {
                acc += u[idx] * u[idx] / h2 * vol;
            }
        }
    }
    acc
}

/// (form, eta * grad, v-mass) for one grid function: u^T M u h^d, the
/// ellipticity floor eta ||grad_h u||^2, and sum V u^2 h^d.
pub fn form_margin(op: &DiscreteOperator, u: &[f64]) -> (f64, f64, f64) {
    let vol = op.grid.cell_volume();
    let form = op.matrix.quadratic_form(u) * vol;
    let grad = op.eta * grad_norm_sq(&op.grid, u);
    let vmass = op
        .v_diag
        .iter()
        .zip(u)
        .map(|(v, ui)| v * ui * ui)
        .sum::<f64>()
        * vol;
    (form, grad, vmass)
}

/// Random-trial check of the coercivity identity u^T M u h^d >= eta
/// ||grad_h u||^2. Margins within the rounding floor of the two sums are
/// snapped to zero so that the exact-equality case (q = 1, V = 0) passes.
pub fn form_check(op: &DiscreteOperator, trials: usize) -> Result<MarginReport> {
    if trials == 0 {
        return Err(CoreError::invalid("trials", "trials >= 1"));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(0xD15C_0F0E);
    let mut samples = Vec::with_capacity(trials);
    for trial in 0..trials {
        let mut u: Vec<f64> = (0..op.n()).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
        let nrm = crate::linalg::norm2(&u);
        for v in &mut u {
            *v /= nrm;
        }
        let (form, grad, _) = form_margin(op, &u);
        let mut margin = form - grad;
        if margin < 0.0 && margin.abs() <= 1e-12 * (form.abs() + grad.abs()) {
            margin = 0.0;
        }
        samples.push((vec![trial as f64], margin));
    }
    MarginReport::from_samples(
        samples,
        format!("{} random unit grid functions on {}", trials, op.grid.descriptor()),
    )
    .ok_or_else(|| CoreError::EmptySamples("no trials".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn grid_node_counts() {
        assert_eq!(build_grid(1, 10.0, 0.01).unwrap().n, 1999);
        assert_eq!(build_grid(2, 4.0, 0.5).unwrap().n, 225);
        assert!(matches!(
            build_grid(1, 1.0, 0.3),
            Err(CoreError::Grid(_))
        ));
        assert!(matches!(
            build_grid_with_budget(1, 10.0, 1e-5, 100_000),
            Err(CoreError::MemoryBudget { .. })
        ));
    }

    #[test]
    fn grid_coordinates_are_exact_multiples() {
        let g = build_grid(1, 4.0, 1.0).unwrap();
        assert_eq!(g.nx, 7);
        let coords: Vec<f64> = (0..7).map(|i| g.coord_axis(i)).collect();
        assert_eq!(coords, vec![-3.0, -2.0, -1.0, 0.0, 1.0, 2.0, 3.0]);
        assert_eq!(g.node_coords(g.center_index()), vec![0.0]);

        let g2 = build_grid(2, 2.0, 0.5).unwrap();
        assert_eq!(g2.node_coords(g2.center_index()), vec![0.0, 0.0]);
        assert_eq!(g2.nearest_index(&[0.1, -0.3]), Some(g2.index_of(&[3, 2])));
        assert_eq!(g2.nearest_index(&[2.5, 0.0]), None);
    }

    #[test]
    fn identity_field_gives_laplacian_stencil() {
        let f = CoefficientField::identity(1).unwrap();
        let g = build_grid(1, 2.0, 0.5).unwrap();
        let op = assemble(&f, &g).unwrap();
        let inv_h2 = 4.0;
        for i in 0..g.n {
            assert_relative_eq!(op.matrix.get(i, i), 2.0 * inv_h2, max_relative = 1e-15);
            if i + 1 < g.n {
                assert_relative_eq!(op.matrix.get(i, i + 1), -inv_h2, max_relative = 1e-15);
            }
        }
    }

    #[test]
    fn potential_adds_to_diagonal() {
        let free = CoefficientField::identity(1).unwrap();
        let osc = CoefficientField::identity_with_potential(1, 2.0).unwrap();
        let g = build_grid(1, 2.0, 0.5).unwrap();
        let a = assemble(&free, &g).unwrap();
        let b = assemble(&osc, &g).unwrap();
        for i in 0..g.n {
            let x = g.coord_axis(i);
            assert_relative_eq!(
                b.matrix.get(i, i) - a.matrix.get(i, i),
                x * x,
                max_relative = 1e-15,
                epsilon = 1e-15
            );
        }
    }

    #[test]
    fn hand_assembled_seven_node_system() {
        // poly(m=2, s=2), d=1, rho=2, h=0.5: q(x) = 1 + x^2, V(x) = x^2,
        // off-diagonal (x, x + 0.5) = -q(x + 0.25)/h^2, diagonal
        // [q(x - 0.25) + q(x + 0.25)]/h^2 + x^2.
        let f = CoefficientField::polynomial(2.0, 2.0, 1).unwrap();
        let g = build_grid(1, 2.0, 0.5).unwrap();
        let op = assemble(&f, &g).unwrap();
        let diag = [28.75, 17.5, 10.75, 8.5, 10.75, 17.5, 28.75];
        let off = [-10.25, -6.25, -4.25, -4.25, -6.25, -10.25];
        for i in 0..7 {
            assert_relative_eq!(op.matrix.get(i, i), diag[i], max_relative = 1e-14);
        }
        for i in 0..6 {
            assert_relative_eq!(op.matrix.get(i, i + 1), off[i], max_relative = 1e-14);
            assert_eq!(op.matrix.get(i, i + 1), op.matrix.get(i + 1, i));
        }
    }

    #[test]
    fn assembly_is_exactly_symmetric_and_m_matrix() {
        let f = CoefficientField::polynomial(4.0, 4.0, 2).unwrap();
        let g = build_grid(2, 2.0, 0.25).unwrap();
        let op = assemble(&f, &g).unwrap();
        assert!(op.matrix.is_symmetric(0.0));
        for (i, j, v) in op.matrix.triplets() {
            if i != j {
                assert!(v <= 0.0, "positive off-diagonal at ({i},{j})");
            }
        }
        // diffusion row sums: interior rows 0, boundary-adjacent rows > 0
        for i in 0..g.n {
            let mut sum = -op.v_diag[i];
            for (r, _, v) in op.matrix.triplets().filter(|&(r, _, _)| r == i) {
                let _ = r;
                sum += v;
            }
            assert!(sum >= -1e-9, "diffusion row sum negative at {i}: {sum}");
        }
    }

    #[test]
    fn nested_grids_share_exact_subblocks() {
        let f = CoefficientField::polynomial(2.0, 2.0, 1).unwrap();
        let small = build_grid(1, 2.0, 0.5).unwrap();
        let large = build_grid(1, 3.0, 0.5).unwrap();
        let a = assemble(&f, &small).unwrap();
        let b = assemble(&f, &large).unwrap();
        // node x in the small grid sits at offset +2 in the large one; the
        // small grid's boundary faces reappear as interior faces with the
        // same midpoint weight, so even edge diagonals coincide exactly
        for i in 0..small.n {
            for j in 0..small.n {
                if i.abs_diff(j) <= 1 {
                    assert_eq!(
                        a.matrix.get(i, j),
                        b.matrix.get(i + 2, j + 2),
                        "entry ({i},{j}) differs"
                    );
                }
            }
        }

        let f2 = CoefficientField::polynomial(4.0, 4.0, 2).unwrap();
        let s2 = build_grid(2, 1.5, 0.25).unwrap();
        let l2 = build_grid(2, 2.5, 0.25).unwrap();
        let a2 = assemble(&f2, &s2).unwrap();
        let b2 = assemble(&f2, &l2).unwrap();
        let off = ((l2.nx - s2.nx) / 2) as usize;
        // compare a strictly interior node's row
        let mi = [s2.nx / 2, s2.nx / 2 - 1];
        let i_small = s2.index_of(&mi);
        let i_large = l2.index_of(&[mi[0] + off, mi[1] + off]);
        assert_eq!(
            a2.matrix.get(i_small, i_small),
            b2.matrix.get(i_large, i_large)
        );
    }

    #[test]
    fn form_identity_is_exact_gradient_norm() {
        let f = CoefficientField::identity(1).unwrap();
        let g = build_grid(1, 2.0, 0.25).unwrap();
        let op = assemble(&f, &g).unwrap();
        let rep = form_check(&op, 25).unwrap();
        assert!(rep.verdict.is_pass(), "worst {}", rep.worst_margin);
        assert!(
            rep.worst_margin.abs() <= 1e-10,
            "identity margin should vanish, got {}",
            rep.worst_margin
        );
    }

    #[test]
    fn form_margin_equals_potential_mass() {
        let f = CoefficientField::identity_with_potential(1, 2.0).unwrap();
        let g = build_grid(1, 2.0, 0.25).unwrap();
        let op = assemble(&f, &g).unwrap();
        let u: Vec<f64> = (0..g.n).map(|i| ((i as f64) * 0.7).sin()).collect();
        let (form, grad, vmass) = form_margin(&op, &u);
        assert_relative_eq!(form - grad, vmass, max_relative = 1e-11);
    }

    #[test]
    fn polynomial_field_margins_nonnegative() {
        let f = CoefficientField::polynomial(4.0, 4.0, 1).unwrap();
        let g = build_grid(1, 4.0, 0.05).unwrap();
        let op = assemble(&f, &g).unwrap();
        let rep = form_check(&op, 100).unwrap();
        assert!(rep.verdict.is_pass(), "worst {}", rep.worst_margin);
        assert!(rep.worst_margin >= 0.0);
    }

    #[test]
    fn exponential_overflow_suggests_smaller_rho() {
        let f = CoefficientField::exponential(2.0, 3.0, 1).unwrap();
        let g = build_grid(1, 10.0, 0.5).unwrap();
        let err = assemble(&f, &g).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("rho"), "{msg}");
    }

    /// Smooth random bumps drawn in continuum coordinates, so the same seed
    /// yields the same function on every grid.
    fn bump_functions(d: usize, trials: usize, seed: u64) -> Vec<Vec<(f64, Vec<f64>, f64)>> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        (0..trials)
            .map(|_| {
                (0..3)
                    .map(|_| {
                        let a = rng.gen::<f64>() * 2.0 - 1.0;
                        let c: Vec<f64> =
                            (0..d).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
                        let w = 0.15 + 0.35 * rng.gen::<f64>();
                        (a, c, w)
                    })
                    .collect()
            })
            .collect()
    }

    fn nash_max_ratio(g: &Grid, funcs: &[Vec<(f64, Vec<f64>, f64)>]) -> f64 {
        let vol = g.cell_volume();
        let mut max_ratio = 0.0f64;
        for bumps in funcs {
            let u: Vec<f64> = (0..g.n)
                .map(|idx| {
                    let x = g.node_coords(idx);
                    bumps
                        .iter()
                        .map(|(a, c, w)| {
                            let r2: f64 =
                                x.iter().zip(c).map(|(xi, ci)| (xi - ci) * (xi - ci)).sum();
                            a * (-r2 / (w * w)).exp()
                        })
                        .sum()
                })
                .collect();
            let l2 = (u.iter().map(|v| v * v).sum::<f64>() * vol).sqrt();
            let l1 = u.iter().map(|v| v.abs()).sum::<f64>() * vol;
            let gn = grad_norm_sq(g, &u).sqrt();
            let ratio = l2.powf(1.0 + 2.0 / g.d as f64) / (gn * l1.powf(2.0 / g.d as f64));
            max_ratio = max_ratio.max(ratio);
        }
        max_ratio
    }

    #[test]
    fn nash_ratio_stable_under_refinement() {
        // the Nash functional's grid maximum must not drift under h-refinement
        for d in [1usize, 2] {
            let trials = if d == 1 { 1000 } else { 300 };
            let funcs = bump_functions(d, trials, 0xBEEF);
            let (h0, h1) = if d == 1 { (0.02, 0.01) } else { (0.2, 0.1) };
            let r0 = nash_max_ratio(&build_grid(d, 2.0, h0).unwrap(), &funcs);
            let r1 = nash_max_ratio(&build_grid(d, 2.0, h1).unwrap(), &funcs);
            let drift = (r1 - r0).abs() / r0;
            assert!(drift < 0.10, "d={d}: ratios {r0} vs {r1}, drift {drift}");
        }
    }
}
