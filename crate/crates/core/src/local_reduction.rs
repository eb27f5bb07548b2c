//! Per-subdomain reduction: the worker step of the pipeline.
//!
//! Each extended subdomain carries a lifting operator Z mapping boundary data
//! on its internal boundary B to the resulting discrete-harmonic interior,
//! restricted to the unextended subdomain. The worker weights this operator
//! by the local energy factor R and the boundary trace factor R_BB, truncates
//! its SVD at a tolerance, and turns the kept left vectors plus one
//! particular solution into a small diagonalized block of the reduced system.
//! Everything here is per-subdomain and shares no mutable state, so the
//! pipeline can run one worker per process.

use crate::decomposition::Decomposition;
use crate::dense::{self, DenseChol};
use crate::envelope::EnvelopeChol;
use crate::error::{CoreError, Result};
use crate::fem::{self, CoefficientField, DofMap, ScalarField};
use crate::mesh::Mesh;
use crate::sparse::Csr;
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Default refusal threshold for the explicit dense path.
pub const EXPLICIT_BOUNDARY_CAP: usize = 20000;

/// Norm below which the particular-solution column is dropped as zero.
const PARTICULAR_CUTOFF: f64 = 1e-14;

/// Block eigenvalues below this fraction of the largest are treated as
/// numerically null on the owned rows and dropped. Well above the
/// eigensolver's roundoff floor, well below any energy a direction that
/// actually reaches the owned region carries.
const OWNED_NULL_REL: f64 = 1e-10;

/// One subdomain's worth of mesh, cut out of the global problem.
///
/// Node and element lists are local; `global_nodes` maps back. Local node
/// order follows ascending global id, so every ascending local list is also
/// ascending globally (the fixed B order relies on this). The first
/// `n_own_elements` elements form the unextended subdomain.
#[derive(Debug, Clone)]
pub struct SubMesh {
    /// 1-based subdomain id.
    pub id: u32,
    pub mesh: Mesh,
    pub global_nodes: Vec<u32>,
    pub n_own_elements: usize,
    /// Owned free DOFs (partition label = id), local node ids.
    pub owned: Vec<u32>,
    /// Interior free DOFs of the extension, local.
    pub i_dofs: Vec<u32>,
    /// Internal-boundary free DOFs, local, fixed ascending order.
    pub b_dofs: Vec<u32>,
    /// Owned DOFs incident to the interface region, local.
    pub interface_owned: Vec<u32>,
    /// Neighboring subdomain ids.
    pub neighbors: Vec<u32>,
}

impl SubMesh {
    /// Cut subdomain `id` out of a decomposed global mesh.
    pub fn extract(mesh: &Mesh, dec: &Decomposition, id: u32) -> Result<SubMesh> {
        let idx = id
            .checked_sub(1)
            .map(|i| i as usize)
            .filter(|&i| i < dec.n)
            .ok_or_else(|| CoreError::Validation(format!("subdomain id {id} out of range")))?;
        let own = &dec.subdomain_elements[idx];
        let ext = &dec.extended_elements[idx];
        let mut in_own = vec![false; mesh.n_elements()];
        for &e in own {
            in_own[e as usize] = true;
        }
        let elems: Vec<u32> = own
            .iter()
            .copied()
            .chain(ext.iter().copied().filter(|&e| !in_own[e as usize]))
            .collect();

        let mut member = vec![false; mesh.n_vertices()];
        for &e in &elems {
            for &v in mesh.element(e as usize) {
                member[v as usize] = true;
            }
        }
        let global_nodes: Vec<u32> =
            (0..mesh.n_vertices() as u32).filter(|&v| member[v as usize]).collect();
        let mut local_of = vec![-1i64; mesh.n_vertices()];
        for (l, &g) in global_nodes.iter().enumerate() {
            local_of[g as usize] = l as i64;
        }

        let d = mesh.dim();
        let mut coords = Vec::with_capacity(global_nodes.len() * d);
        for &g in &global_nodes {
            coords.extend_from_slice(mesh.vertex(g as usize));
        }
        let mut elements = Vec::with_capacity(elems.len() * (d + 1));
        for &e in &elems {
            for &v in mesh.element(e as usize) {
                elements.push(local_of[v as usize] as u32);
            }
        }

        let to_local = |list: &[u32]| -> Vec<u32> {
            list.iter().map(|&g| local_of[g as usize] as u32).collect()
        };
        let i_dofs = to_local(&dec.i_dofs[idx]);
        let b_dofs = to_local(&dec.b_dofs[idx]);
        let owned = to_local(&dec.interior_dofs[idx]);
        let interface_owned = to_local(&dec.interface_dofs[idx]);

        // Members outside I and B are constrained: either on the true
        // Dirichlet boundary or never free in the extension.
        let mut dirichlet = vec![true; global_nodes.len()];
        for &v in i_dofs.iter().chain(&b_dofs) {
            dirichlet[v as usize] = false;
        }
        let mesh = Mesh::new(d, coords, elements, dirichlet)?;
        let neighbors = dec
            .neighbor_pairs
            .iter()
            .filter_map(|&(a, b)| {
                if a == id {
                    Some(b)
                } else if b == id {
                    Some(a)
                } else {
                    None
                }
            })
            .collect();
        Ok(SubMesh {
            id,
            mesh,
            global_nodes,
            n_own_elements: own.len(),
            owned,
            i_dofs,
            b_dofs,
            interface_owned,
            neighbors,
        })
    }

    /// Free DOFs of the unextended subdomain (the rows the lifting restricts
    /// to), ascending local order.
    pub fn region_free_nodes(&self) -> Vec<u32> {
        let mut mark = vec![false; self.mesh.n_vertices()];
        for e in 0..self.n_own_elements {
            for &v in self.mesh.element(e) {
                mark[v as usize] = true;
            }
        }
        (0..self.mesh.n_vertices() as u32)
            .filter(|&v| mark[v as usize] && !self.mesh.is_dirichlet(v as usize))
            .collect()
    }

    /// Element ids of the unextended subdomain.
    pub fn own_elements(&self) -> impl Iterator<Item = u32> + '_ {
        0..self.n_own_elements as u32
    }

    /// All elements of the extension.
    pub fn extended_elements(&self) -> impl Iterator<Item = u32> + '_ {
        0..self.mesh.n_elements() as u32
    }
}

/// Positions of `subset` within `list`; both must be ascending and subset
/// must actually be contained.
pub fn positions_in(subset: &[u32], list: &[u32]) -> Vec<u32> {
    let mut out = Vec::with_capacity(subset.len());
    let mut j = 0usize;
    for &s in subset {
        while j < list.len() && list[j] < s {
            j += 1;
        }
        assert!(j < list.len() && list[j] == s, "subset entry {s} missing from list");
        out.push(j as u32);
        j += 1;
    }
    out
}

/// The discrete lifting: boundary data on B to interior values on the
/// subdomain, via the factorized interior block of the extended stiffness.
pub struct LiftingOperator {
    /// Cholesky of A_II on the extension interior.
    pub a_ii: EnvelopeChol,
    /// A_BI block (transposed lifting coupling), |B| x |I|.
    pub a_bi: Csr,
    /// Subdomain free DOFs, local node ids, ascending.
    pub g_dofs: Vec<u32>,
    /// Positions of `g_dofs` within the I list (the restriction C).
    pub c_rows: Vec<u32>,
}

impl LiftingOperator {
    pub fn build(sub: &SubMesh, coeff: &CoefficientField) -> Result<LiftingOperator> {
        let (a_ii, a_bi) = assemble_ib_blocks(sub, |mesh, elems, dofs| {
            fem::assemble_stiffness(mesh, elems, coeff, dofs)
        })?;
        let a_ii = EnvelopeChol::factor_rcm(&a_ii)
            .map_err(|e| CoreError::Factorization(format!("interior stiffness block: {e}")))?;
        let g_dofs = sub.region_free_nodes();
        let c_rows = positions_in(&g_dofs, &sub.i_dofs);
        Ok(LiftingOperator { a_ii, a_bi, g_dofs, c_rows })
    }

    /// |I|: interior dimension of the extension.
    pub fn n(&self) -> usize {
        self.a_ii.n()
    }

    /// |B|: boundary dimension, the column count of the lifting.
    pub fn m(&self) -> usize {
        self.a_bi.nrows()
    }

    /// Rows of the operator output: free DOFs of the subdomain.
    pub fn rows(&self) -> usize {
        self.g_dofs.len()
    }

    /// Z X for dense X (M x k): minus the harmonic extension of the boundary
    /// columns, restricted to subdomain rows. The sign convention follows the
    /// residual equation A_II u = -A_IB z, matching the weighted operator the
    /// singular value analysis works on up to an irrelevant global sign.
    fn lift(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let k = x.ncols();
        let mut interior = DMatrix::zeros(self.n(), k);
        self.a_bi.mul_transpose_dense(x, &mut interior);
        self.a_ii.solve_in_place(&mut interior);
        let mut out = DMatrix::zeros(self.rows(), k);
        for (r, &i) in self.c_rows.iter().enumerate() {
            for c in 0..k {
                out[(r, c)] = interior[(i as usize, c)];
            }
        }
        out
    }

    /// Z^T Y for dense Y over subdomain rows (G x k).
    fn lift_transpose(&self, y: &DMatrix<f64>) -> DMatrix<f64> {
        let k = y.ncols();
        let mut interior = DMatrix::zeros(self.n(), k);
        for (r, &i) in self.c_rows.iter().enumerate() {
            for c in 0..k {
                interior[(i as usize, c)] = y[(r, c)];
            }
        }
        self.a_ii.solve_in_place(&mut interior);
        let mut out = DMatrix::zeros(self.m(), k);
        self.a_bi.mul_dense(&interior, &mut out);
        out
    }
}

/// Energy weights: R on the subdomain and the boundary trace factor R_BB.
pub struct WeightFactors {
    /// Upper Cholesky factor of the H1 matrix over the subdomain free DOFs.
    pub r_i: DenseChol,
    /// Upper Cholesky factor of the H1 Schur complement on B.
    pub r_bb: DenseChol,
}

/// Assemble a matrix over the extension with I-before-B ordering and return
/// the (II, BI) blocks.
fn assemble_ib_blocks<F>(sub: &SubMesh, assemble: F) -> Result<(Csr, Csr)>
where
    F: Fn(&Mesh, std::ops::Range<u32>, &DofMap) -> Result<Csr>,
{
    let n = sub.i_dofs.len();
    let m = sub.b_dofs.len();
    let mut retained = Vec::with_capacity(n + m);
    retained.extend_from_slice(&sub.i_dofs);
    retained.extend_from_slice(&sub.b_dofs);
    let dofs = DofMap::new(retained, sub.mesh.n_vertices());
    let full = assemble(&sub.mesh, 0..sub.mesh.n_elements() as u32, &dofs)?;
    let col_of_i: Vec<i32> =
        (0..n + m).map(|c| if c < n { c as i32 } else { -1 }).collect();
    let rows_i: Vec<usize> = (0..n).collect();
    let rows_b: Vec<usize> = (n..n + m).collect();
    let a_ii = full.submatrix(&rows_i, &col_of_i, n);
    let a_bi = full.submatrix(&rows_b, &col_of_i, n);
    Ok((a_ii, a_bi))
}

/// Build both weight factors from the H1 (unit-coefficient) form.
///
/// R_BB comes from the block elimination of the extended H1 matrix with I
/// ordered before B: the Schur complement T_BB - V^T V with V = R^{-T} T_IB
/// equals the trailing block of the full factorization, so only one
/// triangular sweep over the boundary columns is needed. Any fill-reducing
/// reordering stays inside I; B keeps its fixed order.
pub fn build_weights(sub: &SubMesh) -> Result<WeightFactors> {
    let t0 = std::time::Instant::now();
    let n = sub.i_dofs.len();
    let m = sub.b_dofs.len();
    let mut retained = Vec::with_capacity(n + m);
    retained.extend_from_slice(&sub.i_dofs);
    retained.extend_from_slice(&sub.b_dofs);
    let dofs = DofMap::new(retained, sub.mesh.n_vertices());
    let full = fem::assemble_h1(&sub.mesh, 0..sub.mesh.n_elements() as u32, &dofs)?;
    eprintln!("[t] h1 assemble {:?} (n={n} m={m})", t0.elapsed());
    let col_of_i: Vec<i32> =
        (0..n + m).map(|c| if c < n { c as i32 } else { -1 }).collect();
    let col_of_b: Vec<i32> =
        (0..n + m).map(|c| if c < n { -1 } else { (c - n) as i32 }).collect();
    let rows_i: Vec<usize> = (0..n).collect();
    let rows_b: Vec<usize> = (n..n + m).collect();
    let t_ii = full.submatrix(&rows_i, &col_of_i, n);
    let t_bi = full.submatrix(&rows_b, &col_of_i, n);
    let t_bb = full.submatrix(&rows_b, &col_of_b, m);
    drop(full);

    let r_bb = if m > 0 {
        let t = std::time::Instant::now();
        let fac = EnvelopeChol::factor_rcm(&t_ii)
            .map_err(|e| CoreError::Factorization(format!("interior H1 block: {e}")))?;
        eprintln!("[t] t_ii factor {:?} (env {})", t.elapsed(), fac.envelope());
        let t = std::time::Instant::now();
        let mut v = DMatrix::zeros(n, m);
        for (b, i, val) in t_bi.iter() {
            v[(i, b)] = val;
        }
        fac.solve_factor_transpose_in_place(&mut v);
        eprintln!("[t] v solve {:?}", t.elapsed());
        let t = std::time::Instant::now();
        // The solve leaves each column of V zero above the front its sparse
        // right-hand side first touches, so the ragged product skips those
        // rows instead of multiplying them.
        let mut s = t_bb.to_dense();
        dense::syrk_t_ragged(-1.0, &v, 1.0, &mut s);
        eprintln!("[t] syrk {:?}", t.elapsed());
        let t = std::time::Instant::now();
        let r = DenseChol::new(s)
            .map_err(|e| CoreError::Factorization(format!("boundary trace factor: {e}")))?;
        eprintln!("[t] s chol {:?}", t.elapsed());
        r
    } else {
        DenseChol::new(DMatrix::zeros(0, 0))?
    };

    let t = std::time::Instant::now();
    let g_dofs = sub.region_free_nodes();
    let own_dofs = DofMap::new(g_dofs, sub.mesh.n_vertices());
    let h1_own = fem::assemble_h1(&sub.mesh, 0..sub.n_own_elements as u32, &own_dofs)?;
    let r_i = DenseChol::new(h1_own.to_dense())
        .map_err(|e| CoreError::Factorization(format!("subdomain H1 matrix: {e}")))?;
    eprintln!("[t] r_i {:?} (g={})", t.elapsed(), r_i.n());
    Ok(WeightFactors { r_i, r_bb })
}

/// Solve the zero-boundary subproblem on the extension and restrict to the
/// subdomain rows.
pub fn particular_solution(
    sub: &SubMesh,
    lifting: &LiftingOperator,
    f: &ScalarField,
) -> Result<Vec<f64>> {
    let dofs = DofMap::new(sub.i_dofs.clone(), sub.mesh.n_vertices());
    let mut b = fem::assemble_load(&sub.mesh, sub.extended_elements(), f.as_ref(), &dofs);
    lifting.a_ii.solve_vec(&mut b);
    Ok(lifting.c_rows.iter().map(|&i| b[i as usize]).collect())
}

/// Truncated weighted SVD of the lifting, in subdomain coordinates.
#[derive(Debug)]
pub struct Reduction {
    /// Kept basis columns over the subdomain free DOFs (R^{-1} U_kept).
    pub basis_g: DMatrix<f64>,
    /// Kept singular values, descending.
    pub sigma: Vec<f64>,
    /// Kept right singular vectors, rows matching `sigma`, columns over B.
    pub vt: DMatrix<f64>,
    /// Largest discarded singular value; `None` when the factorization had
    /// no discarded tail to certify (full-rank randomized sketch).
    pub first_discarded: Option<f64>,
}

fn empty_reduction(rows: usize, m: usize) -> Reduction {
    Reduction {
        basis_g: DMatrix::zeros(rows, 0),
        sigma: Vec::new(),
        vt: DMatrix::zeros(0, m),
        first_discarded: None,
    }
}

/// Build the weighted operator W = R Z R_BB^{-1} as a dense matrix,
/// sweeping the boundary columns in blocks through the interior solve.
fn build_weighted_operator(lifting: &LiftingOperator, weights: &WeightFactors) -> DMatrix<f64> {
    let (g, n, m) = (lifting.rows(), lifting.n(), lifting.m());
    let mut w = DMatrix::zeros(g, m);
    let block = 64usize;
    let mut c0 = 0;
    while c0 < m {
        let wid = block.min(m - c0);
        let mut rhs = DMatrix::zeros(n, wid);
        for b in c0..c0 + wid {
            for (i, val) in lifting.a_bi.row(b) {
                rhs[(i, b - c0)] = val;
            }
        }
        lifting.a_ii.solve_in_place(&mut rhs);
        for (r, &i) in lifting.c_rows.iter().enumerate() {
            for c in 0..wid {
                w[(r, c0 + c)] = rhs[(i as usize, c)];
            }
        }
        c0 += wid;
    }
    dense::trmm_left(weights.r_i.factor(), false, &mut w);
    weights.r_bb.solve_r_right_in_place(&mut w);
    w
}

/// Explicit reduction: dense weighted operator, full SVD, truncation at
/// `epsilon`. Refuses boundaries larger than `cap` (the randomized path is
/// meant for those).
pub fn reduce_explicit(
    lifting: &LiftingOperator,
    weights: &WeightFactors,
    epsilon: f64,
    cap: usize,
) -> Result<Reduction> {
    if epsilon <= 0.0 {
        return Err(CoreError::Validation("tolerance must be positive".into()));
    }
    let m = lifting.m();
    if m == 0 {
        return Ok(empty_reduction(lifting.rows(), 0));
    }
    if m > cap {
        return Err(CoreError::Validation(format!(
            "boundary dimension {m} exceeds the explicit-path cap {cap}; use the randomized method"
        )));
    }
    let w = build_weighted_operator(lifting, weights);
    let (u, s, vt) = dense::svd_thin(&w)?;
    let kept = s.iter().take_while(|&&x| x > epsilon).count();
    // Rank cannot exceed min(G, M); any singular value past the computed list
    // is exactly zero, so the discarded head is always certified.
    let first_discarded = Some(s.as_slice().get(kept).copied().unwrap_or(0.0));
    let mut basis_g = u.columns(0, kept).into_owned();
    weights.r_i.solve_r_in_place(&mut basis_g);
    Ok(Reduction {
        basis_g,
        sigma: s.as_slice()[..kept].to_vec(),
        vt: vt.rows(0, kept).into_owned(),
        first_discarded,
    })
}

/// Full spectrum of the weighted operator, descending, at most `max_count`
/// values. Empty when the extension saturated (no boundary).
pub fn compute_spectrum(
    lifting: &LiftingOperator,
    weights: &WeightFactors,
    max_count: usize,
) -> Result<Vec<f64>> {
    if lifting.m() == 0 {
        return Ok(Vec::new());
    }
    let w = build_weighted_operator(lifting, weights);
    let s = dense::singular_values(&w)?;
    Ok(s.as_slice().iter().copied().take(max_count).collect())
}

/// Largest singular value of the weighted operator by power iteration on
/// W^T W, applied implicitly (no dense operator is formed).
pub fn operator_norm_estimate(
    lifting: &LiftingOperator,
    weights: &WeightFactors,
    max_iters: usize,
    seed: u64,
) -> f64 {
    let m = lifting.m();
    if m == 0 {
        return 0.0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = StandardNormal;
    let mut x = DMatrix::from_fn(m, 1, |_, _| normal.sample(&mut rng));
    let mut sigma = 0.0f64;
    for _ in 0..max_iters {
        let nx = x.norm();
        if nx == 0.0 {
            return 0.0;
        }
        x /= nx;
        let y = apply_weighted(lifting, weights, &x);
        let z = apply_weighted_transpose(lifting, weights, &y);
        let new_sigma = y.norm();
        if (new_sigma - sigma).abs() <= 1e-12 * new_sigma.max(1.0) {
            return new_sigma;
        }
        sigma = new_sigma;
        x = z;
    }
    sigma
}

/// W X without forming W.
fn apply_weighted(
    lifting: &LiftingOperator,
    weights: &WeightFactors,
    x: &DMatrix<f64>,
) -> DMatrix<f64> {
    let mut t = x.clone();
    weights.r_bb.solve_r_in_place(&mut t);
    let mut y = lifting.lift(&t);
    dense::trmm_left(weights.r_i.factor(), false, &mut y);
    y
}

/// W^T Y without forming W.
fn apply_weighted_transpose(
    lifting: &LiftingOperator,
    weights: &WeightFactors,
    y: &DMatrix<f64>,
) -> DMatrix<f64> {
    let mut t = y.clone();
    dense::trmm_left(weights.r_i.factor(), true, &mut t);
    let mut z = lifting.lift_transpose(&t);
    weights.r_bb.solve_rt_in_place(&mut z);
    z
}

/// Randomized reduction: Gaussian sketch of the weighted operator, thin QR,
/// projected small SVD via two left solves, truncation at `epsilon`.
/// Deterministic for a fixed seed; retries once with a salted seed if the
/// sketch degenerates.
pub fn reduce_randomized(
    lifting: &LiftingOperator,
    weights: &WeightFactors,
    epsilon: f64,
    sketch_columns: usize,
    seed: u64,
) -> Result<Reduction> {
    if epsilon <= 0.0 {
        return Err(CoreError::Validation("tolerance must be positive".into()));
    }
    let m = lifting.m();
    if m == 0 {
        return Ok(empty_reduction(lifting.rows(), 0));
    }
    if sketch_columns == 0 {
        return Err(CoreError::Validation("sketch needs at least one column".into()));
    }
    let k = if sketch_columns > m {
        eprintln!(
            "subdomain: sketch width {sketch_columns} clamped to boundary dimension {m}"
        );
        m
    } else {
        sketch_columns
    };
    match randomized_attempt(lifting, weights, epsilon, k, seed) {
        Ok(r) => Ok(r),
        Err(first) => {
            let salted = seed.rotate_left(17) ^ 0x9e37_79b9_7f4a_7c15;
            eprintln!("subdomain: degenerate sketch ({first}); retrying with salted seed");
            randomized_attempt(lifting, weights, epsilon, k, salted).map_err(|e| {
                CoreError::Factorization(format!("sketch failed twice: {first}; then {e}"))
            })
        }
    }
}

fn randomized_attempt(
    lifting: &LiftingOperator,
    weights: &WeightFactors,
    epsilon: f64,
    k: usize,
    seed: u64,
) -> Result<Reduction> {
    let m = lifting.m();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = StandardNormal;
    // Column-by-column fill fixes the sampling order, making runs bit-identical.
    let t = std::time::Instant::now();
    let mut sketch = DMatrix::zeros(m, k);
    for j in 0..k {
        for i in 0..m {
            sketch[(i, j)] = normal.sample(&mut rng);
        }
    }
    eprintln!("[t] sketch gen {:?} (m={m} k={k})", t.elapsed());
    let t = std::time::Instant::now();
    let y = apply_weighted(lifting, weights, &sketch);
    eprintln!("[t] apply W {:?}", t.elapsed());
    let t = std::time::Instant::now();
    let (q_hat, rdiag) = dense::qr_thin(&y)?;
    eprintln!("[t] qr {:?}", t.elapsed());
    let lead = rdiag.first().copied().unwrap_or(0.0);
    if !lead.is_finite() || lead == 0.0 {
        return Err(CoreError::Factorization("sketch range collapsed".into()));
    }

    // F^T = W^T Q via two left solves (interior then trace factor); the
    // interior block is symmetric so its transpose solve is the same solve.
    let t = std::time::Instant::now();
    let f_t = apply_weighted_transpose(lifting, weights, &q_hat);
    eprintln!("[t] apply Wt {:?}", t.elapsed());
    let t = std::time::Instant::now();
    let f = f_t.transpose();
    let (u_f, s, vt) = dense::svd_thin(&f)?;
    eprintln!("[t] small svd {:?}", t.elapsed());
    if s.iter().any(|x| !x.is_finite()) {
        return Err(CoreError::Factorization("sketch produced non-finite spectrum".into()));
    }
    let kept = s.iter().take_while(|&&x| x > epsilon).count();
    let first_discarded = if kept < s.len() {
        Some(s[kept])
    } else if (s.len() as usize) < m.min(lifting.rows()) {
        // The sketch saw only k directions; the true tail is uncertified.
        eprintln!(
            "subdomain: sketch width {k} kept every singular value above {epsilon}; tail unverified"
        );
        None
    } else {
        Some(0.0)
    };
    let mut basis_g = DMatrix::zeros(lifting.rows(), kept);
    dense::gemm(false, false, 1.0, &q_hat, &u_f.columns(0, kept).into_owned(), 0.0, &mut basis_g);
    weights.r_i.solve_r_in_place(&mut basis_g);
    Ok(Reduction {
        basis_g,
        sigma: s.as_slice()[..kept].to_vec(),
        vt: vt.rows(0, kept).into_owned(),
        first_discarded,
    })
}

/// Sketch width rule: an eighth of the boundary, but never fewer than 32
/// columns (or the whole boundary when it is smaller than that).
pub fn sketch_width(m: usize, divisor: usize) -> usize {
    (m / divisor.max(1)).max(32.min(m)).max(1)
}

/// Eigendecomposition of the projected block Q^T A_own Q, without touching
/// Q. Eigenvalues ascending; callers decide what non-positive ones mean.
fn block_rotation(q: &DMatrix<f64>, a_own: &Csr) -> Result<(DMatrix<f64>, Vec<f64>)> {
    let mt = q.ncols();
    let mut aq = DMatrix::zeros(q.nrows(), mt);
    a_own.mul_dense(q, &mut aq);
    let mut small = DMatrix::zeros(mt, mt);
    dense::gemm(true, false, 1.0, q, &aq, 0.0, &mut small);
    let (vecs, vals) = dense::symmetric_eigen(&small)?;
    Ok((vecs, vals.as_slice().to_vec()))
}

fn rank_deficient(smallest: f64) -> CoreError {
    CoreError::Factorization(format!(
        "projected block not positive definite (smallest eigenvalue {smallest:.3e}); \
         basis is rank deficient"
    ))
}

/// Returns the diagonal (ascending); the basis is modified in place.
pub fn diagonalize_block(q: &mut DMatrix<f64>, a_own: &Csr) -> Result<Vec<f64>> {
    if q.ncols() == 0 {
        return Ok(Vec::new());
    }
    let (vecs, vals) = block_rotation(q, a_own)?;
    if vals[0] <= 0.0 {
        return Err(rank_deficient(vals[0]));
    }
    let mut rotated = DMatrix::zeros(q.nrows(), q.ncols());
    dense::gemm(false, false, 1.0, q, &vecs, 0.0, &mut rotated);
    *q = rotated;
    Ok(vals)
}

/// Q^T b for the local load.
pub fn project_local_rhs(q: &DMatrix<f64>, b_own: &[f64]) -> Vec<f64> {
    assert_eq!(q.nrows(), b_own.len());
    (0..q.ncols()).map(|j| q.column(j).iter().zip(b_own).map(|(a, b)| a * b).sum()).collect()
}

/// Expected-error and tail bounds for Gaussian range sketching.
#[derive(Debug, Clone, Copy)]
pub struct HmtBounds {
    pub expected: f64,
    /// Tail bound and its failure probability; absent when p < 4 or t, u < 1.
    pub tail: Option<f64>,
    pub failure_probability: Option<f64>,
}

/// Evaluate the Gaussian sketching error bounds on a computed spectrum:
/// expected error (1+sqrt(k/(p-1))) sigma_{k+1} + (e sqrt(k+p)/p) tail2,
/// tail bound (1+t sqrt(3k/(p+1))) sigma_{k+1}
///            + t (e sqrt(k+p)/(p+1)) tail2 + u t (e sqrt(k+p)/(p+1)) sigma_{k+1},
/// failing with probability at most 2 t^-p + exp(-u^2/2), where tail2 is the
/// l2 mass of the spectrum past k.
pub fn evaluate_hmt_bounds(
    sigma: &[f64],
    k: usize,
    p: usize,
    t: f64,
    u: f64,
) -> Result<HmtBounds> {
    if k < 2 || p < 2 {
        return Err(CoreError::Validation(format!(
            "sketch bounds need k >= 2 and p >= 2 (got k = {k}, p = {p})"
        )));
    }
    if sigma.len() <= k {
        return Err(CoreError::Validation(format!(
            "spectrum has {} values; need more than k = {k}",
            sigma.len()
        )));
    }
    let sk1 = sigma[k];
    let tail2: f64 = sigma[k..].iter().map(|s| s * s).sum::<f64>().sqrt();
    let kf = k as f64;
    let pf = p as f64;
    let e = std::f64::consts::E;
    let expected = (1.0 + (kf / (pf - 1.0)).sqrt()) * sk1 + e * (kf + pf).sqrt() / pf * tail2;
    let (tail, failure_probability) = if p >= 4 && t >= 1.0 && u >= 1.0 {
        let c = e * (kf + pf).sqrt() / (pf + 1.0);
        let bound = (1.0 + t * (3.0 * kf / (pf + 1.0)).sqrt()) * sk1 + t * c * tail2 + u * t * c * sk1;
        (Some(bound), Some(sketch_failure_probability(p, t, u)))
    } else {
        (None, None)
    };
    Ok(HmtBounds { expected, tail, failure_probability })
}

/// Probability that the tail bound fails: 2 t^-p + exp(-u^2/2). Depends only
/// on the sketch parameters, not on the spectrum.
pub fn sketch_failure_probability(p: usize, t: f64, u: f64) -> f64 {
    2.0 * t.powf(-(p as f64)) + (-u * u / 2.0).exp()
}

/// Reduction method selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Explicit,
    Randomized,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Explicit => "explicit",
            Method::Randomized => "randomized",
        }
    }

    pub fn from_str(s: &str) -> Result<Method> {
        match s {
            "explicit" => Ok(Method::Explicit),
            "randomized" => Ok(Method::Randomized),
            _ => Err(CoreError::Validation(format!("unknown method `{s}`"))),
        }
    }
}

/// Everything a worker needs beyond its submesh.
#[derive(Clone)]
pub struct WorkerConfig {
    pub epsilon: f64,
    pub method: Method,
    pub sketch_divisor: usize,
    /// Per-subdomain seed (already derived from the master seed).
    pub seed: u64,
    pub coeff: CoefficientField,
    pub load: ScalarField,
    pub explicit_cap: usize,
}

/// Finished local basis: diagonalized, stitched to owned rows, with the
/// projected load and the index maps the master needs.
#[derive(Debug, Clone)]
pub struct LocalBasis {
    pub id: u32,
    /// Owned-row basis columns: diagonalizing rotation applied, each column
    /// scaled to unit energy on the owned rows, owned-null columns dropped.
    pub q: DMatrix<f64>,
    /// Diagonal of the projected subdomain block (all ones by construction).
    pub block_diag: Vec<f64>,
    /// Projected local load.
    pub rhs: Vec<f64>,
    /// Kept singular values of the weighted lifting.
    pub sigma: Vec<f64>,
    pub has_particular: bool,
    /// Global node ids of the basis rows.
    pub owned_global: Vec<u32>,
    /// Row positions whose DOF touches the interface region.
    pub interface_rows: Vec<u32>,
}

impl LocalBasis {
    /// Column count of the basis: kept singular vectors plus the particular
    /// column when present, minus any owned-null columns dropped at
    /// diagonalization.
    pub fn m(&self) -> usize {
        self.q.ncols()
    }

    /// The interface slice of the basis: rows at interface positions.
    pub fn interface_slice(&self) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.interface_rows.len(), self.q.ncols());
        for (r, &p) in self.interface_rows.iter().enumerate() {
            for c in 0..self.q.ncols() {
                out[(r, c)] = self.q[(p as usize, c)];
            }
        }
        out
    }
}

/// The reduced space attached to its whole region, for local error studies:
/// the same columns as the stitched basis but with rows at every region
/// free node, so the local reduced solution can be evaluated off the owned
/// set too.
#[derive(Debug, Clone)]
pub struct RegionBasis {
    /// Local node ids of the rows (the region free nodes), ascending.
    pub g_dofs: Vec<u32>,
    /// Region rows of the rotated basis, |g_dofs| x m_i.
    pub q: DMatrix<f64>,
}

/// The whole worker: weights, lifting, truncated SVD, particular solution,
/// stitching, diagonalization, load projection. Also hands back the
/// region-level rows of the basis.
pub fn run_worker_detailed(sub: &SubMesh, cfg: &WorkerConfig) -> Result<(LocalBasis, RegionBasis)> {
    let fail = |e: CoreError| CoreError::Worker { subdomain: sub.id as usize, msg: e.to_string() };
    let weights = build_weights(sub).map_err(fail)?;
    run_worker_with_weights(sub, cfg, &weights)
}

/// [`run_worker_detailed`] with prebuilt weight factors. The weights carry
/// only unit-coefficient H1 geometry, so a caller sweeping coefficient
/// fields over one submesh can build them once.
pub fn run_worker_with_weights(
    sub: &SubMesh,
    cfg: &WorkerConfig,
    weights: &WeightFactors,
) -> Result<(LocalBasis, RegionBasis)> {
    let fail = |e: CoreError| CoreError::Worker { subdomain: sub.id as usize, msg: e.to_string() };
    let t = std::time::Instant::now();
    let lifting = LiftingOperator::build(sub, &cfg.coeff).map_err(fail)?;
    eprintln!("[t] lifting build {:?}", t.elapsed());
    let t = std::time::Instant::now();
    let reduction = match cfg.method {
        Method::Explicit => {
            reduce_explicit(&lifting, &weights, cfg.epsilon, cfg.explicit_cap).map_err(fail)?
        }
        Method::Randomized => {
            let k = sketch_width(lifting.m(), cfg.sketch_divisor);
            reduce_randomized(&lifting, &weights, cfg.epsilon, k, cfg.seed).map_err(fail)?
        }
    };
    eprintln!("[t] reduction {:?}", t.elapsed());
    if let Some(d) = reduction.first_discarded {
        if d > cfg.epsilon {
            return Err(fail(CoreError::Factorization(format!(
                "truncation violated: first discarded singular value {d:.3e} > {:.3e}",
                cfg.epsilon
            ))));
        }
    }
    let u_p = particular_solution(sub, &lifting, &cfg.load).map_err(fail)?;

    // Stack the kept columns and the particular solution at region level.
    let kept = reduction.basis_g.ncols();
    let p_norm = u_p.iter().map(|x| x * x).sum::<f64>().sqrt();
    let has_particular = p_norm >= PARTICULAR_CUTOFF;
    let total = kept + usize::from(has_particular);
    let g = lifting.g_dofs.len();
    let mut qg = DMatrix::zeros(g, total);
    qg.view_mut((0, 0), (g, kept)).copy_from(&reduction.basis_g);
    if has_particular {
        for (r, &v) in u_p.iter().enumerate() {
            qg[(r, kept)] = v;
        }
    }

    // Stitch: owned rows carry the subdomain's share of the global space.
    let own_pos = positions_in(&sub.owned, &lifting.g_dofs);
    let mut q = DMatrix::zeros(sub.owned.len(), total);
    for (r, &p) in own_pos.iter().enumerate() {
        for c in 0..total {
            q[(r, c)] = qg[(p as usize, c)];
        }
    }

    let own_map = DofMap::new(sub.owned.clone(), sub.mesh.n_vertices());
    let a_own =
        fem::assemble_stiffness(&sub.mesh, sub.own_elements(), &cfg.coeff, &own_map).map_err(fail)?;
    let (block_diag, q, qg) = if total == 0 {
        (Vec::new(), q, qg)
    } else {
        let (vecs, vals) = block_rotation(&q, &a_own).map_err(fail)?;
        // Directions with numerically zero energy on the owned rows span
        // nothing in the stitched global space; keeping them would only make
        // the projected block singular. Anything further below zero than
        // roundoff allows means the block was not positive semidefinite.
        let cut = OWNED_NULL_REL * vals[total - 1];
        if vals[total - 1] <= 0.0 || vals[0] < -cut {
            return Err(fail(rank_deficient(vals[0])));
        }
        let first = vals.iter().position(|&v| v > cut).unwrap();
        let m = total - first;
        let kept_vecs = vecs.columns(first, m).into_owned();
        let mut qr = DMatrix::zeros(q.nrows(), m);
        dense::gemm(false, false, 1.0, &q, &kept_vecs, 0.0, &mut qr);
        let mut qgr = DMatrix::zeros(g, m);
        dense::gemm(false, false, 1.0, &qg, &kept_vecs, 0.0, &mut qgr);
        // Scale each column to unit block energy. The projected block
        // becomes the identity, so the raw spectrum of the assembled system
        // coincides with its Jacobi-preconditioned one; column spans and the
        // reconstructed solution are unchanged.
        for c in 0..m {
            let s = 1.0 / vals[first + c].sqrt();
            qr.column_mut(c).scale_mut(s);
            qgr.column_mut(c).scale_mut(s);
        }
        (vec![1.0; m], qr, qgr)
    };
    let b_own = fem::assemble_load(&sub.mesh, sub.own_elements(), cfg.load.as_ref(), &own_map);
    let rhs = project_local_rhs(&q, &b_own);

    let owned_global: Vec<u32> =
        sub.owned.iter().map(|&v| sub.global_nodes[v as usize]).collect();
    let interface_rows = positions_in(&sub.interface_owned, &sub.owned);
    let basis = LocalBasis {
        id: sub.id,
        q,
        block_diag,
        rhs,
        sigma: reduction.sigma,
        has_particular,
        owned_global,
        interface_rows,
    };
    Ok((basis, RegionBasis { g_dofs: lifting.g_dofs, q: qg }))
}

/// [`run_worker_detailed`] without the region rows; what the pipeline runs.
pub fn run_worker(sub: &SubMesh, cfg: &WorkerConfig) -> Result<LocalBasis> {
    run_worker_detailed(sub, cfg).map(|(basis, _)| basis)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decomposition;
    use crate::mesh::generate_unit_cube_mesh;
    use std::sync::Arc;

    fn fixture(divisions: usize, dim: usize, n: usize, hops: usize) -> (Mesh, Decomposition) {
        let mesh = generate_unit_cube_mesh(divisions, dim).unwrap();
        let dec = decomposition::decompose(&mesh, n, hops, 7).unwrap();
        (mesh, dec)
    }

    /// The subdomain with the largest internal boundary; tests that exercise
    /// the lifting need one that did not saturate its extension.
    fn bounded_sub(mesh: &Mesh, dec: &Decomposition) -> SubMesh {
        let id = (1..=dec.n as u32)
            .max_by_key(|&i| dec.b_dofs[(i - 1) as usize].len())
            .unwrap();
        let sub = SubMesh::extract(mesh, dec, id).unwrap();
        assert!(!sub.b_dofs.is_empty(), "fixture saturated: every extension swallowed the mesh");
        sub
    }

    fn dense_h1_blocks(sub: &SubMesh) -> (DMatrix<f64>, usize, usize) {
        let n = sub.i_dofs.len();
        let m = sub.b_dofs.len();
        let mut retained = sub.i_dofs.clone();
        retained.extend_from_slice(&sub.b_dofs);
        let dofs = DofMap::new(retained, sub.mesh.n_vertices());
        let t = fem::assemble_h1(&sub.mesh, 0..sub.mesh.n_elements() as u32, &dofs).unwrap();
        (t.to_dense(), n, m)
    }

    #[test]
    fn trace_factor_matches_dense_schur_complement() {
        for (div, dim, n_sub, hops) in [(10, 2, 3, 2), (6, 3, 4, 1), (8, 2, 4, 1)] {
            let (mesh, dec) = fixture(div, dim, n_sub, hops);
            let sub = bounded_sub(&mesh, &dec);
            let weights = build_weights(&sub).unwrap();
            let (t, n, m) = dense_h1_blocks(&sub);
            let t_ii = t.view((0, 0), (n, n)).into_owned();
            let t_ib = t.view((0, n), (n, m)).into_owned();
            let t_bb = t.view((n, n), (m, m)).into_owned();
            let mut x = t_ib.clone();
            DenseChol::new(t_ii).unwrap().solve_in_place(&mut x);
            let schur = &t_bb - t_ib.transpose() * x;
            let r = weights.r_bb.factor();
            let diff = (r.transpose() * r - &schur).norm() / schur.norm();
            assert!(diff < 1e-10, "relative error {diff:.3e}");
        }
    }

    #[test]
    fn trace_norm_matches_minimization_oracle() {
        use rand::Rng;
        let (mesh, dec) = fixture(10, 2, 3, 2);
        let sub = bounded_sub(&mesh, &dec);
        let weights = build_weights(&sub).unwrap();
        let (t, n, m) = dense_h1_blocks(&sub);
        let t_ii = t.view((0, 0), (n, n)).into_owned();
        let t_ib = t.view((0, n), (n, m)).into_owned();
        let chol_ii = DenseChol::new(t_ii.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let beta = DMatrix::from_fn(m, 1, |_, _| rng.gen_range(-1.0..1.0f64));
            // The constrained minimizer extends beta harmonically.
            let mut beta_i = &t_ib * &beta;
            chol_ii.solve_in_place(&mut beta_i);
            beta_i = -beta_i;
            let mut full = DMatrix::zeros(n + m, 1);
            full.view_mut((0, 0), (n, 1)).copy_from(&beta_i);
            full.view_mut((n, 0), (m, 1)).copy_from(&beta);
            let energy = (full.transpose() * &t * &full)[(0, 0)];
            let mut rb = beta.clone();
            dense::trmm_left(weights.r_bb.factor(), false, &mut rb);
            let norm2 = rb.norm_squared();
            assert!((norm2 - energy).abs() <= 1e-10 * energy.abs().max(1.0));
        }
    }

    #[test]
    fn particular_solution_zero_load_is_zero() {
        let (mesh, dec) = fixture(5, 2, 2, 2);
        let sub = SubMesh::extract(&mesh, &dec, 1).unwrap();
        let lifting = LiftingOperator::build(&sub, &CoefficientField::One).unwrap();
        let zero: ScalarField = Arc::new(|_: &[f64]| 0.0);
        let u = particular_solution(&sub, &lifting, &zero).unwrap();
        assert!(u.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn particular_solution_matches_dense_oracle() {
        let (mesh, dec) = fixture(6, 2, 3, 2);
        let sub = SubMesh::extract(&mesh, &dec, 1).unwrap();
        let lifting = LiftingOperator::build(&sub, &CoefficientField::One).unwrap();
        let f = fem::unit_energy_load(2);
        let u = particular_solution(&sub, &lifting, &f).unwrap();

        let dofs = DofMap::new(sub.i_dofs.clone(), sub.mesh.n_vertices());
        let a = fem::assemble_stiffness(
            &sub.mesh,
            0..sub.mesh.n_elements() as u32,
            &CoefficientField::One,
            &dofs,
        )
        .unwrap();
        let b = fem::assemble_load(&sub.mesh, 0..sub.mesh.n_elements() as u32, f.as_ref(), &dofs);
        let mut x = DMatrix::from_vec(b.len(), 1, b);
        DenseChol::new(a.to_dense()).unwrap().solve_in_place(&mut x);
        for (r, &i) in lifting.c_rows.iter().enumerate() {
            assert!((u[r] - x[(i as usize, 0)]).abs() < 1e-10);
        }
    }

    #[test]
    fn saturated_subdomain_reproduces_full_solution() {
        let mesh = generate_unit_cube_mesh(6, 3).unwrap();
        let dec = decomposition::decompose(&mesh, 1, 50, 1).unwrap();
        let sub = SubMesh::extract(&mesh, &dec, 1).unwrap();
        assert!(sub.b_dofs.is_empty());
        let lifting = LiftingOperator::build(&sub, &CoefficientField::One).unwrap();
        let f = fem::unit_energy_load(3);
        let u = particular_solution(&sub, &lifting, &f).unwrap();

        let dofs = DofMap::free(&mesh);
        let a = fem::assemble_stiffness(
            &mesh,
            0..mesh.n_elements() as u32,
            &CoefficientField::One,
            &dofs,
        )
        .unwrap();
        let b = fem::assemble_load(&mesh, 0..mesh.n_elements() as u32, f.as_ref(), &dofs);
        let (x, _, _) = fem::solve_full(&a, &b, 1e-12, 10_000).unwrap();
        // Local node order follows ascending global id and every node is a
        // member, so free DOFs align one-to-one.
        let g = sub.region_free_nodes();
        assert_eq!(g.len(), x.len());
        for (r, &v) in g.iter().enumerate() {
            let gv = sub.global_nodes[v as usize];
            let xi = dofs.local(gv).unwrap();
            assert!((u[r] - x[xi]).abs() < 1e-8);
        }
    }

    #[test]
    fn explicit_truncation_contract_holds() {
        let (mesh, dec) = fixture(8, 2, 3, 2);
        let sub = bounded_sub(&mesh, &dec);
        let weights = build_weights(&sub).unwrap();
        let lifting = LiftingOperator::build(&sub, &CoefficientField::One).unwrap();
        for eps in [1e-1, 1e-2, 1e-3] {
            let red = reduce_explicit(&lifting, &weights, eps, EXPLICIT_BOUNDARY_CAP).unwrap();
            assert!(red.sigma.iter().all(|&s| s > eps));
            assert!(red.first_discarded.unwrap() <= eps);
            assert_eq!(red.basis_g.ncols(), red.sigma.len());
            assert!(red.sigma.len() <= lifting.m());
        }
        // A tolerance above the largest singular value keeps nothing.
        let spec = compute_spectrum(&lifting, &weights, 1).unwrap();
        let red = reduce_explicit(&lifting, &weights, spec[0] * 1.01, EXPLICIT_BOUNDARY_CAP).unwrap();
        assert_eq!(red.sigma.len(), 0);
        assert_eq!(red.basis_g.ncols(), 0);
    }

    #[test]
    fn explicit_cap_guards_memory() {
        let (mesh, dec) = fixture(8, 2, 3, 2);
        let sub = bounded_sub(&mesh, &dec);
        let weights = build_weights(&sub).unwrap();
        let lifting = LiftingOperator::build(&sub, &CoefficientField::One).unwrap();
        let err = reduce_explicit(&lifting, &weights, 1e-2, lifting.m() - 1).unwrap_err();
        assert!(err.to_string().contains("randomized"));
    }

    #[test]
    fn full_sketch_matches_explicit_spectrum() {
        let (mesh, dec) = fixture(8, 2, 4, 1);
        let sub = bounded_sub(&mesh, &dec);
        let weights = build_weights(&sub).unwrap();
        let lifting = LiftingOperator::build(&sub, &CoefficientField::One).unwrap();
        let exp = reduce_explicit(&lifting, &weights, 1e-6, EXPLICIT_BOUNDARY_CAP).unwrap();
        let rnd = reduce_randomized(&lifting, &weights, 1e-6, lifting.m(), 19).unwrap();
        assert_eq!(exp.sigma.len(), rnd.sigma.len());
        for (a, b) in exp.sigma.iter().zip(&rnd.sigma) {
            assert!((a - b).abs() <= 1e-10 * a.max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn randomized_is_deterministic_per_seed() {
        let (mesh, dec) = fixture(7, 2, 3, 2);
        let sub = bounded_sub(&mesh, &dec);
        let weights = build_weights(&sub).unwrap();
        let lifting = LiftingOperator::build(&sub, &CoefficientField::One).unwrap();
        let k = sketch_width(lifting.m(), 8);
        let a = reduce_randomized(&lifting, &weights, 1e-2, k, 5).unwrap();
        let b = reduce_randomized(&lifting, &weights, 1e-2, k, 5).unwrap();
        assert_eq!(a.basis_g.as_slice(), b.basis_g.as_slice());
        assert_eq!(a.sigma, b.sigma);
    }

    #[test]
    fn power_iteration_matches_largest_singular_value() {
        let (mesh, dec) = fixture(7, 2, 3, 2);
        let sub = bounded_sub(&mesh, &dec);
        let weights = build_weights(&sub).unwrap();
        let lifting = LiftingOperator::build(&sub, &CoefficientField::One).unwrap();
        let spec = compute_spectrum(&lifting, &weights, 5).unwrap();
        let est = operator_norm_estimate(&lifting, &weights, 2000, 11);
        assert!(
            (est - spec[0]).abs() <= 1e-8 * spec[0],
            "power {est} vs svd {}",
            spec[0]
        );
    }

    #[test]
    fn spectrum_monotone_and_empty_on_saturation() {
        let (mesh, dec) = fixture(8, 2, 3, 1);
        let sub = bounded_sub(&mesh, &dec);
        let weights = build_weights(&sub).unwrap();
        let lifting = LiftingOperator::build(&sub, &CoefficientField::One).unwrap();
        let spec = compute_spectrum(&lifting, &weights, 1000).unwrap();
        assert!(spec.windows(2).all(|w| w[0] >= w[1]));

        let mesh1 = generate_unit_cube_mesh(5, 2).unwrap();
        let dec1 = decomposition::decompose(&mesh1, 1, 50, 1).unwrap();
        let sub1 = SubMesh::extract(&mesh1, &dec1, 1).unwrap();
        let w1 = build_weights(&sub1).unwrap();
        let l1 = LiftingOperator::build(&sub1, &CoefficientField::One).unwrap();
        assert!(compute_spectrum(&l1, &w1, 1000).unwrap().is_empty());
    }

    #[test]
    fn diagonalization_rotates_block_to_diagonal() {
        let (mesh, dec) = fixture(7, 2, 3, 2);
        let sub = bounded_sub(&mesh, &dec);
        let cfg = WorkerConfig {
            epsilon: 1e-3,
            method: Method::Explicit,
            sketch_divisor: 8,
            seed: 1,
            coeff: CoefficientField::One,
            load: fem::unit_energy_load(2),
            explicit_cap: EXPLICIT_BOUNDARY_CAP,
        };
        let basis = run_worker(&sub, &cfg).unwrap();
        assert!(basis.has_particular);
        assert!(basis.m() >= 2);
        assert!(basis.block_diag.iter().all(|&d| d > 0.0));

        // Recompute the projected block from the rotated basis.
        let own_map = DofMap::new(sub.owned.clone(), sub.mesh.n_vertices());
        let a_own =
            fem::assemble_stiffness(&sub.mesh, sub.own_elements(), &CoefficientField::One, &own_map)
                .unwrap();
        let mut aq = DMatrix::zeros(basis.q.nrows(), basis.m());
        a_own.mul_dense(&basis.q, &mut aq);
        let mut block = DMatrix::zeros(basis.m(), basis.m());
        dense::gemm(true, false, 1.0, &basis.q, &aq, 0.0, &mut block);
        let scale = basis.block_diag.iter().cloned().fold(0.0f64, f64::max);
        for i in 0..basis.m() {
            assert!((block[(i, i)] - basis.block_diag[i]).abs() <= 1e-10 * scale);
            for j in 0..basis.m() {
                if i != j {
                    assert!(block[(i, j)].abs() <= 1e-10 * scale, "off-diagonal {i},{j}");
                }
            }
        }
    }

    #[test]
    fn single_column_block_is_rayleigh_quotient() {
        let (mesh, dec) = fixture(5, 2, 2, 2);
        let sub = SubMesh::extract(&mesh, &dec, 1).unwrap();
        let own_map = DofMap::new(sub.owned.clone(), sub.mesh.n_vertices());
        let a_own =
            fem::assemble_stiffness(&sub.mesh, sub.own_elements(), &CoefficientField::One, &own_map)
                .unwrap();
        let mut q = DMatrix::from_fn(sub.owned.len(), 1, |i, _| 1.0 + (i % 3) as f64);
        let q0 = q.clone();
        let diag = diagonalize_block(&mut q, &a_own).unwrap();
        let num = a_own.quadratic_form(q0.as_slice());
        assert!((diag[0] - num).abs() <= 1e-10 * num.abs());
        // Rotation of a single column is a sign at most.
        let same = (&q - &q0).norm() < 1e-12 || (&q + &q0).norm() < 1e-12;
        assert!(same);
    }

    #[test]
    fn projected_rhs_is_plain_dot_in_one_column() {
        let q = DMatrix::from_vec(3, 1, vec![1.0, 2.0, 3.0]);
        let rhs = project_local_rhs(&q, &[4.0, 5.0, 6.0]);
        assert_eq!(rhs, vec![32.0]);
        let zero = project_local_rhs(&q, &[0.0, 0.0, 0.0]);
        assert_eq!(zero, vec![0.0]);
    }

    #[test]
    fn hmt_bounds_zero_tail_and_reference_point() {
        let mut sigma = vec![1.0];
        sigma.extend(std::iter::repeat(0.0).take(9));
        let b = evaluate_hmt_bounds(&sigma, 2, 2, 0.0, 0.0).unwrap();
        assert_eq!(b.expected, 0.0);
        assert!(b.tail.is_none());

        // Reference point: k = 40, p = 135, t = 2, u = 5.
        let decay: Vec<f64> = (0..200).map(|j| 0.7f64.powi(j)).collect();
        let b = evaluate_hmt_bounds(&decay, 40, 135, 2.0, 5.0).unwrap();
        let prob = b.failure_probability.unwrap();
        assert!((prob - 4e-6).abs() < 1e-6, "failure probability {prob:.3e}");

        assert!(evaluate_hmt_bounds(&decay, 1, 135, 2.0, 5.0).is_err());
        assert!(evaluate_hmt_bounds(&decay[..10], 40, 135, 2.0, 5.0).is_err());
    }

    #[test]
    fn hmt_expected_bound_matches_geometric_formula() {
        let rho = 0.5f64;
        let sigma: Vec<f64> = (0..10).map(|j| rho.powi(j)).collect();
        let (k, p) = (3usize, 4usize);
        let b = evaluate_hmt_bounds(&sigma, k, p, 0.0, 0.0).unwrap();
        // Partial geometric sums in closed form.
        let sk1 = rho.powi(k as i32);
        let tail2 = ((rho.powi(2 * k as i32) - rho.powi(20)) / (1.0 - rho * rho)).sqrt();
        let expect = (1.0 + (k as f64 / (p as f64 - 1.0)).sqrt()) * sk1
            + std::f64::consts::E * ((k + p) as f64).sqrt() / p as f64 * tail2;
        assert!((b.expected - expect).abs() <= 1e-12 * expect);
    }

    #[test]
    fn worker_runs_randomized_end_to_end() {
        let (mesh, dec) = fixture(7, 2, 4, 2);
        for id in 1..=4 {
            let sub = SubMesh::extract(&mesh, &dec, id).unwrap();
            let cfg = WorkerConfig {
                epsilon: 1e-2,
                method: Method::Randomized,
                sketch_divisor: 8,
                seed: 1000 + id as u64,
                coeff: CoefficientField::One,
                load: fem::unit_energy_load(2),
                explicit_cap: EXPLICIT_BOUNDARY_CAP,
            };
            let basis = run_worker(&sub, &cfg).unwrap();
            assert_eq!(basis.owned_global.len(), sub.owned.len());
            assert!(basis.m() <= sub.b_dofs.len() + 1);
            assert_eq!(basis.rhs.len(), basis.m());
            assert_eq!(basis.block_diag.len(), basis.m());
            assert!(basis.interface_rows.len() <= basis.owned_global.len());
        }
    }
}
