//! The three-step pipeline over a run directory.
//!
//! A run directory is the only shared state: `manifest.json` records the
//! configuration, `in/` holds one submesh file per subdomain, `out/` one
//! basis file per finished worker, and the solve step leaves the reduced
//! system, a report, and optionally the reconstructed solution. Workers are
//! independent processes that read one submesh and write one basis file;
//! they may be killed at any moment and restarted, so every file is written
//! atomically (temp then rename) and completion is defined by the basis
//! file existing, not by anything in memory.

use crate::decomposition;
use crate::error::{CoreError, Result};
use crate::fem::{self, CoefficientField, DofMap, ScalarField};
use crate::global_projection::{assemble_interface, assemble_reduced, BasisSummary};
use crate::local_reduction::{
    run_worker, LocalBasis, Method, SubMesh, WorkerConfig, EXPLICIT_BOUNDARY_CAP,
};
use crate::mesh::{generate_unit_cube_mesh, Mesh, Tokens};
use crate::reduced_solve::{
    condition_of_csr, condition_of_reduced, energy_error, pcg_jacobi, reduction_error,
    Reconstructor, SolveReport,
};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

/// Write `bytes` to `path` via a temporary file and rename, so readers and
/// restarted runs never observe a half-written file.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("file");
    let tmp = dir.join(format!(".{name}.tmp.{}", std::process::id()));
    fs::write(&tmp, bytes).map_err(|e| CoreError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| CoreError::io(path, e))?;
    Ok(())
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Worker seed for one subdomain, derived from the master seed so results
/// do not depend on worker count or completion order.
pub fn per_subdomain_seed(master: u64, id: u32) -> u64 {
    splitmix64(master ^ (id as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

pub fn submesh_rel(id: u32) -> String {
    format!("in/sub_{id:03}.txt")
}

pub fn basis_rel(id: u32) -> String {
    format!("out/basis_{id:03}.txt")
}

/// Mesh reference stored in the manifest: `gen:<divisions>:<dim>` for the
/// structured unit-cube family, or `file:<path>` for an imported mesh.
pub fn resolve_mesh(mesh_ref: &str) -> Result<Mesh> {
    if let Some(spec) = mesh_ref.strip_prefix("gen:") {
        let (div, dim) = spec
            .split_once(':')
            .ok_or_else(|| CoreError::Validation(format!("bad mesh reference `{mesh_ref}`")))?;
        let div: usize = div
            .parse()
            .map_err(|_| CoreError::Validation(format!("bad mesh reference `{mesh_ref}`")))?;
        let dim: usize = dim
            .parse()
            .map_err(|_| CoreError::Validation(format!("bad mesh reference `{mesh_ref}`")))?;
        return generate_unit_cube_mesh(div, dim);
    }
    if let Some(path) = mesh_ref.strip_prefix("file:") {
        return Mesh::import(Path::new(path));
    }
    Err(CoreError::Validation(format!(
        "mesh reference `{mesh_ref}` is neither gen:<div>:<dim> nor file:<path>"
    )))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Pending,
    Done,
    Failed,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubdomainEntry {
    pub id: u32,
    pub status: Status,
    pub submesh: String,
    pub basis: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// The run configuration plus per-subdomain bookkeeping.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub run_id: String,
    pub mesh: String,
    pub n: usize,
    pub r_hops: usize,
    pub epsilon: f64,
    pub method: String,
    pub sketch_divisor: usize,
    pub master_seed: u64,
    pub coefficient: String,
    pub load: String,
    pub subdomains: Vec<SubdomainEntry>,
}

impl Manifest {
    pub fn path_in(run_dir: &Path) -> PathBuf {
        run_dir.join("manifest.json")
    }

    pub fn load(run_dir: &Path) -> Result<Manifest> {
        let path = Manifest::path_in(run_dir);
        let bytes = fs::read(&path).map_err(|e| CoreError::io(&path, e))?;
        serde_json::from_slice(&bytes)
            .map_err(|e| CoreError::Validation(format!("manifest {}: {e}", path.display())))
    }

    pub fn save(&self, run_dir: &Path) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(self)
            .map_err(|e| CoreError::Validation(format!("manifest serialize: {e}")))?;
        bytes.push(b'\n');
        atomic_write(&Manifest::path_in(run_dir), &bytes)
    }

    pub fn method(&self) -> Result<Method> {
        Method::from_str(&self.method)
    }

    pub fn coefficient_field(&self) -> Result<CoefficientField> {
        CoefficientField::from_selector(&self.coefficient)
    }

    pub fn load_field(&self, dim: usize) -> Result<ScalarField> {
        fem::load_from_selector(&self.load, dim)
    }

    pub fn entry_mut(&mut self, id: u32) -> Result<&mut SubdomainEntry> {
        self.subdomains
            .iter_mut()
            .find(|s| s.id == id)
            .ok_or_else(|| CoreError::Validation(format!("subdomain {id} not in manifest")))
    }

    /// Move a subdomain to a new status. `done` is terminal; `pending` is
    /// never a target, so transitions cannot run backwards.
    pub fn set_status(&mut self, id: u32, status: Status, error: Option<String>) -> Result<()> {
        let entry = self.entry_mut(id)?;
        let ok = match (entry.status, status) {
            (Status::Done, Status::Done) => true,
            (Status::Done, _) => false,
            (_, Status::Pending) => false,
            _ => true,
        };
        if !ok {
            return Err(CoreError::Validation(format!(
                "subdomain {id}: illegal status transition {:?} -> {status:?}",
                entry.status
            )));
        }
        entry.status = status;
        entry.error = error;
        Ok(())
    }
}

fn write_indices(w: &mut impl Write, key: &str, list: &[u32]) -> std::io::Result<()> {
    write!(w, "{key} {}", list.len())?;
    for v in list {
        write!(w, " {v}")?;
    }
    writeln!(w)
}

fn read_indices(t: &mut Tokens, key: &str) -> Result<Vec<u32>> {
    t.expect_word(key)?;
    let count: usize = t.number(&format!("{key} count"))?;
    (0..count).map(|_| t.number::<u32>(key)).collect()
}

fn read_reals(t: &mut Tokens, count: usize, what: &str) -> Result<Vec<f64>> {
    (0..count).map(|_| t.number::<f64>(what)).collect()
}

pub fn write_submesh(path: &Path, sub: &SubMesh) -> Result<()> {
    let mut buf = Vec::new();
    let w = &mut buf;
    let d = sub.mesh.dim();
    writeln!(w, "submesh 1").unwrap();
    writeln!(w, "id {}", sub.id).unwrap();
    writeln!(w, "dim {d}").unwrap();
    writeln!(w, "nodes {}", sub.global_nodes.len()).unwrap();
    for (l, &g) in sub.global_nodes.iter().enumerate() {
        write!(w, "{g}").unwrap();
        for c in sub.mesh.vertex(l) {
            write!(w, " {c}").unwrap();
        }
        writeln!(w).unwrap();
    }
    writeln!(w, "elements {} {}", sub.mesh.n_elements(), sub.n_own_elements).unwrap();
    for e in 0..sub.mesh.n_elements() {
        let el = sub.mesh.element(e);
        writeln!(
            w,
            "{}",
            el.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(" ")
        )
        .unwrap();
    }
    write_indices(w, "owned", &sub.owned).unwrap();
    write_indices(w, "interior", &sub.i_dofs).unwrap();
    write_indices(w, "boundary", &sub.b_dofs).unwrap();
    write_indices(w, "interface", &sub.interface_owned).unwrap();
    write_indices(w, "neighbors", &sub.neighbors).unwrap();
    atomic_write(path, &buf)
}

pub fn read_submesh(path: &Path) -> Result<SubMesh> {
    let file = fs::File::open(path).map_err(|e| CoreError::io(path, e))?;
    let mut r = std::io::BufReader::new(file);
    let mut t = Tokens::new(&mut r, path)?;
    t.expect_word("submesh")?;
    let version: u32 = t.number("format version")?;
    if version != 1 {
        return Err(t.error(format!("unsupported submesh version {version}")));
    }
    t.expect_word("id")?;
    let id: u32 = t.number("subdomain id")?;
    t.expect_word("dim")?;
    let dim: usize = t.number("dimension")?;
    t.expect_word("nodes")?;
    let nv: usize = t.number("node count")?;
    let mut global_nodes = Vec::with_capacity(nv);
    let mut coords = Vec::with_capacity(nv * dim);
    for _ in 0..nv {
        global_nodes.push(t.number::<u32>("global node id")?);
        for _ in 0..dim {
            coords.push(t.number::<f64>("coordinate")?);
        }
    }
    t.expect_word("elements")?;
    let ne: usize = t.number("element count")?;
    let n_own: usize = t.number("own element count")?;
    if n_own > ne {
        return Err(t.error("own element count exceeds element count"));
    }
    let mut elements = Vec::with_capacity(ne * (dim + 1));
    for _ in 0..ne * (dim + 1) {
        let v: u32 = t.number("element vertex")?;
        if v as usize >= nv {
            return Err(t.error(format!("element vertex {v} out of range")));
        }
        elements.push(v);
    }
    let owned = read_indices(&mut t, "owned")?;
    let i_dofs = read_indices(&mut t, "interior")?;
    let b_dofs = read_indices(&mut t, "boundary")?;
    let interface_owned = read_indices(&mut t, "interface")?;
    let neighbors = read_indices(&mut t, "neighbors")?;
    let mut dirichlet = vec![true; nv];
    for &v in i_dofs.iter().chain(&b_dofs) {
        if v as usize >= nv {
            return Err(t.error(format!("DOF index {v} out of range")));
        }
        dirichlet[v as usize] = false;
    }
    let mesh = Mesh::new(dim, coords, elements, dirichlet)?;
    Ok(SubMesh {
        id,
        mesh,
        global_nodes,
        n_own_elements: n_own,
        owned,
        i_dofs,
        b_dofs,
        interface_owned,
        neighbors,
    })
}

fn write_matrix_rows(w: &mut impl Write, m: &DMatrix<f64>) {
    for r in 0..m.nrows() {
        let mut line = String::new();
        for c in 0..m.ncols() {
            if c > 0 {
                line.push(' ');
            }
            line.push_str(&format!("{}", m[(r, c)]));
        }
        writeln!(w, "{line}").unwrap();
    }
}

fn write_reals(w: &mut impl Write, key: &str, vals: &[f64]) {
    write!(w, "{key} {}", vals.len()).unwrap();
    for v in vals {
        write!(w, " {v}").unwrap();
    }
    writeln!(w).unwrap();
}

/// Basis file layout: scalars and index maps first, then the interface
/// slice, then the full owned-row matrix, so the master can stop reading
/// before `qfull` and never hold a full basis it does not need.
pub fn write_basis(path: &Path, basis: &LocalBasis) -> Result<()> {
    let mut buf = Vec::new();
    let w = &mut buf;
    writeln!(w, "basis 1").unwrap();
    writeln!(w, "id {}", basis.id).unwrap();
    writeln!(w, "rows {}", basis.q.nrows()).unwrap();
    writeln!(w, "cols {}", basis.m()).unwrap();
    writeln!(w, "has_particular {}", u8::from(basis.has_particular)).unwrap();
    write_reals(w, "sigma", &basis.sigma);
    write_reals(w, "diag", &basis.block_diag);
    write_reals(w, "rhs", &basis.rhs);
    write_indices(w, "owned", &basis.owned_global).unwrap();
    write_indices(w, "interface", &basis.interface_rows).unwrap();
    writeln!(w, "qslice").unwrap();
    write_matrix_rows(w, &basis.interface_slice());
    writeln!(w, "qfull").unwrap();
    write_matrix_rows(w, &basis.q);
    atomic_write(path, &buf)
}

struct BasisHead {
    id: u32,
    rows: usize,
    cols: usize,
    has_particular: bool,
    sigma: Vec<f64>,
    block_diag: Vec<f64>,
    rhs: Vec<f64>,
    owned_global: Vec<u32>,
    interface_rows: Vec<u32>,
}

fn read_basis_head(t: &mut Tokens) -> Result<BasisHead> {
    t.expect_word("basis")?;
    let version: u32 = t.number("format version")?;
    if version != 1 {
        return Err(t.error(format!("unsupported basis version {version}")));
    }
    t.expect_word("id")?;
    let id: u32 = t.number("subdomain id")?;
    t.expect_word("rows")?;
    let rows: usize = t.number("row count")?;
    t.expect_word("cols")?;
    let cols: usize = t.number("column count")?;
    t.expect_word("has_particular")?;
    let hp: u8 = t.number("particular flag")?;
    t.expect_word("sigma")?;
    let ks: usize = t.number("sigma count")?;
    let sigma = read_reals(t, ks, "singular value")?;
    t.expect_word("diag")?;
    let kd: usize = t.number("diag count")?;
    let block_diag = read_reals(t, kd, "diagonal entry")?;
    t.expect_word("rhs")?;
    let kr: usize = t.number("rhs count")?;
    let rhs = read_reals(t, kr, "rhs entry")?;
    let owned_global = read_indices(t, "owned")?;
    let interface_rows = read_indices(t, "interface")?;
    // Columns can fall short of the truncation count when owned-null
    // directions were dropped at diagonalization, never exceed it.
    if kd != cols || kr != cols || ks + usize::from(hp == 1) < cols || owned_global.len() != rows {
        return Err(t.error("basis header is internally inconsistent"));
    }
    Ok(BasisHead {
        id,
        rows,
        cols,
        has_particular: hp == 1,
        sigma,
        block_diag,
        rhs,
        owned_global,
        interface_rows,
    })
}

fn read_matrix(t: &mut Tokens, rows: usize, cols: usize, what: &str) -> Result<DMatrix<f64>> {
    let mut m = DMatrix::zeros(rows, cols);
    for r in 0..rows {
        for c in 0..cols {
            m[(r, c)] = t.number(what)?;
        }
    }
    Ok(m)
}

/// Master-side read: everything up to and including the interface slice.
pub fn read_basis_summary(path: &Path) -> Result<BasisSummary> {
    let file = fs::File::open(path).map_err(|e| CoreError::io(path, e))?;
    let mut r = std::io::BufReader::new(file);
    let mut t = Tokens::new(&mut r, path)?;
    let head = read_basis_head(&mut t)?;
    t.expect_word("qslice")?;
    let q = read_matrix(&mut t, head.interface_rows.len(), head.cols, "basis slice entry")?;
    let interface_nodes = head
        .interface_rows
        .iter()
        .map(|&p| {
            head.owned_global
                .get(p as usize)
                .copied()
                .ok_or_else(|| t.error(format!("interface row {p} out of range")))
        })
        .collect::<Result<Vec<u32>>>()?;
    Ok(BasisSummary {
        id: head.id,
        block_diag: head.block_diag,
        rhs: head.rhs,
        interface_nodes,
        interface_q: q,
    })
}

/// Worker-side read: the whole basis, for reconstruction.
pub fn read_basis_full(path: &Path) -> Result<LocalBasis> {
    let file = fs::File::open(path).map_err(|e| CoreError::io(path, e))?;
    let mut r = std::io::BufReader::new(file);
    let mut t = Tokens::new(&mut r, path)?;
    let head = read_basis_head(&mut t)?;
    t.expect_word("qslice")?;
    let _slice = read_matrix(&mut t, head.interface_rows.len(), head.cols, "basis slice entry")?;
    t.expect_word("qfull")?;
    let q = read_matrix(&mut t, head.rows, head.cols, "basis entry")?;
    Ok(LocalBasis {
        id: head.id,
        q,
        block_diag: head.block_diag,
        rhs: head.rhs,
        sigma: head.sigma,
        has_particular: head.has_particular,
        owned_global: head.owned_global,
        interface_rows: head.interface_rows,
    })
}

/// Configuration for a new run.
#[derive(Debug, Clone)]
pub struct PartitionConfig {
    pub mesh_ref: String,
    pub n: usize,
    pub r_hops: usize,
    pub master_seed: u64,
    pub epsilon: f64,
    pub method: Method,
    pub sketch_divisor: usize,
    pub coefficient: String,
    pub load: String,
    pub run_id: Option<String>,
}

#[derive(Debug)]
pub struct PartitionSummary {
    pub n: usize,
    pub n_free: usize,
    pub mesh_size: f64,
    pub overlap_count: usize,
    pub extended_overlap_count: usize,
    pub neighbor_pairs: usize,
    pub interface_elements: usize,
}

/// Step 1: partition, extend, and write one submesh file per subdomain.
pub fn cmd_partition(run_dir: &Path, cfg: &PartitionConfig) -> Result<PartitionSummary> {
    CoefficientField::from_selector(&cfg.coefficient)?;
    fem::load_from_selector(&cfg.load, 2)?;
    if !(cfg.epsilon > 0.0) {
        return Err(CoreError::Validation("epsilon must be positive".into()));
    }
    if cfg.sketch_divisor == 0 {
        return Err(CoreError::Validation("sketch divisor must be positive".into()));
    }
    let mesh = resolve_mesh(&cfg.mesh_ref)?;
    let dec = decomposition::decompose(&mesh, cfg.n, cfg.r_hops, cfg.master_seed)?;

    fs::create_dir_all(run_dir.join("in")).map_err(|e| CoreError::io(run_dir.join("in"), e))?;
    fs::create_dir_all(run_dir.join("out")).map_err(|e| CoreError::io(run_dir.join("out"), e))?;
    decomposition::write_partition(&run_dir.join("partition.txt"), &dec.labels)?;
    for id in 1..=cfg.n as u32 {
        let sub = SubMesh::extract(&mesh, &dec, id)?;
        write_submesh(&run_dir.join(submesh_rel(id)), &sub)?;
    }
    let run_id = cfg.run_id.clone().unwrap_or_else(|| {
        run_dir.file_name().and_then(|n| n.to_str()).unwrap_or("run").to_string()
    });
    let manifest = Manifest {
        run_id,
        mesh: cfg.mesh_ref.clone(),
        n: cfg.n,
        r_hops: cfg.r_hops,
        epsilon: cfg.epsilon,
        method: cfg.method.as_str().to_string(),
        sketch_divisor: cfg.sketch_divisor,
        master_seed: cfg.master_seed,
        coefficient: cfg.coefficient.clone(),
        load: cfg.load.clone(),
        subdomains: (1..=cfg.n as u32)
            .map(|id| SubdomainEntry {
                id,
                status: Status::Pending,
                submesh: submesh_rel(id),
                basis: basis_rel(id),
                error: None,
            })
            .collect(),
    };
    manifest.save(run_dir)?;
    Ok(PartitionSummary {
        n: cfg.n,
        n_free: mesh.n_free_dofs(),
        mesh_size: mesh.mesh_size(),
        overlap_count: dec.overlap_count,
        extended_overlap_count: dec.extended_overlap_count,
        neighbor_pairs: dec.neighbor_pairs.len(),
        interface_elements: dec.interface_elements.len(),
    })
}

/// Run one worker in this process: read the submesh, build the basis,
/// write the basis file. The manifest is read-only here; status changes
/// belong to the parent.
pub fn run_single_worker(run_dir: &Path, id: u32) -> Result<()> {
    let manifest = Manifest::load(run_dir)?;
    let entry = manifest
        .subdomains
        .iter()
        .find(|s| s.id == id)
        .ok_or_else(|| CoreError::Validation(format!("subdomain {id} not in manifest")))?;
    let sub = read_submesh(&run_dir.join(&entry.submesh))?;
    if sub.id != id {
        return Err(CoreError::Validation(format!(
            "submesh file {} holds subdomain {}, expected {id}",
            entry.submesh, sub.id
        )));
    }
    let cfg = WorkerConfig {
        epsilon: manifest.epsilon,
        method: manifest.method()?,
        sketch_divisor: manifest.sketch_divisor,
        seed: per_subdomain_seed(manifest.master_seed, id),
        coeff: manifest.coefficient_field()?,
        load: manifest.load_field(sub.mesh.dim())?,
        explicit_cap: EXPLICIT_BOUNDARY_CAP,
    };
    let basis = run_worker(&sub, &cfg)?;
    write_basis(&run_dir.join(&entry.basis), &basis)
}

/// How cmd_reduce executes workers.
pub enum Runner {
    /// Sequentially in this process (tests, convergence studies).
    InProcess,
    /// As child processes of the given executable, `worker_count` at a time.
    Subprocess { exe: PathBuf, worker_count: usize },
}

#[derive(Debug, Default)]
pub struct ReduceSummary {
    pub done: Vec<u32>,
    pub skipped: Vec<u32>,
    pub failed: Vec<(u32, String)>,
}

/// Step 2: run workers for every subdomain that has no basis file yet.
/// Failures are recorded in the manifest and do not stop other workers.
pub fn cmd_reduce(run_dir: &Path, only: Option<&[u32]>, runner: &Runner) -> Result<ReduceSummary> {
    let mut manifest = Manifest::load(run_dir)?;
    let all_ids: Vec<u32> = manifest.subdomains.iter().map(|s| s.id).collect();
    let ids: Vec<u32> = match only {
        None => all_ids,
        Some(filter) => {
            for f in filter {
                if !all_ids.contains(f) {
                    return Err(CoreError::Validation(format!("subdomain {f} not in manifest")));
                }
            }
            filter.to_vec()
        }
    };
    let mut summary = ReduceSummary::default();
    let mut pending = Vec::new();
    for &id in &ids {
        let entry = manifest.entry_mut(id)?;
        if run_dir.join(&entry.basis).exists() {
            if entry.status != Status::Done {
                manifest.set_status(id, Status::Done, None)?;
            }
            summary.skipped.push(id);
        } else {
            pending.push(id);
        }
    }
    manifest.save(run_dir)?;

    match runner {
        Runner::InProcess => {
            for id in pending {
                match run_single_worker(run_dir, id) {
                    Ok(()) => {
                        manifest.set_status(id, Status::Done, None)?;
                        summary.done.push(id);
                    }
                    Err(e) => {
                        let msg = e.to_string();
                        manifest.set_status(id, Status::Failed, Some(msg.clone()))?;
                        summary.failed.push((id, msg));
                    }
                }
                manifest.save(run_dir)?;
            }
        }
        Runner::Subprocess { exe, worker_count } => {
            let slots = (*worker_count).max(1);
            let mut queue: std::collections::VecDeque<u32> = pending.into();
            let mut running: Vec<(u32, std::process::Child)> = Vec::new();
            loop {
                while running.len() < slots {
                    let Some(id) = queue.pop_front() else { break };
                    let child = std::process::Command::new(exe)
                        .arg("worker")
                        .arg("--run-dir")
                        .arg(run_dir)
                        .arg("--id")
                        .arg(id.to_string())
                        .stdout(std::process::Stdio::null())
                        .stderr(std::process::Stdio::piped())
                        .spawn()
                        .map_err(|e| CoreError::io(exe, e))?;
                    running.push((id, child));
                }
                if running.is_empty() {
                    break;
                }
                std::thread::sleep(std::time::Duration::from_millis(25));
                let mut k = 0;
                while k < running.len() {
                    let status = running[k]
                        .1
                        .try_wait()
                        .map_err(|e| CoreError::io(run_dir, e))?;
                    if let Some(status) = status {
                        let (id, mut child) = running.swap_remove(k);
                        if status.success() {
                            manifest.set_status(id, Status::Done, None)?;
                            summary.done.push(id);
                        } else {
                            let mut msg = String::new();
                            if let Some(mut err) = child.stderr.take() {
                                let _ = err.read_to_string(&mut msg);
                            }
                            let msg = msg.lines().last().unwrap_or("worker failed").to_string();
                            manifest.set_status(id, Status::Failed, Some(msg.clone()))?;
                            summary.failed.push((id, msg));
                        }
                        manifest.save(run_dir)?;
                    } else {
                        k += 1;
                    }
                }
            }
        }
    }
    summary.done.sort_unstable();
    Ok(summary)
}

/// Outputs of the solve step beyond the report file.
#[derive(Debug, Clone)]
pub struct SolveOptions {
    pub tol: f64,
    /// Iteration cap; `None` means ten times the reduced dimension.
    pub max_iter: Option<usize>,
    /// Solve the full FE system too and report the reduction error.
    pub compare_full: bool,
    /// Lanczos condition estimates for both matrices.
    pub kappa: bool,
    pub kappa_iters: usize,
    /// Write the reconstructed nodal solution to solution.txt.
    pub write_solution: bool,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            tol: 1e-10,
            max_iter: None,
            compare_full: false,
            kappa: false,
            kappa_iters: 400,
            write_solution: false,
        }
    }
}

/// Step 3: project onto the collected bases, solve, reconstruct, report.
pub fn cmd_solve(run_dir: &Path, opts: &SolveOptions) -> Result<SolveReport> {
    let manifest = Manifest::load(run_dir)?;
    let mesh = resolve_mesh(&manifest.mesh)?;
    let labels =
        decomposition::read_partition(&run_dir.join("partition.txt"), mesh.n_vertices())?;
    let overlap = decomposition::build_overlap(&mesh, &labels)?;
    if overlap.subdomain_elements.len() != manifest.n {
        return Err(CoreError::Validation(format!(
            "partition has {} subdomains, manifest says {}",
            overlap.subdomain_elements.len(),
            manifest.n
        )));
    }
    let coeff = manifest.coefficient_field()?;

    let missing: Vec<String> = manifest
        .subdomains
        .iter()
        .filter(|s| !run_dir.join(&s.basis).exists())
        .map(|s| s.id.to_string())
        .collect();
    if !missing.is_empty() {
        return Err(CoreError::Validation(format!(
            "missing basis output for subdomains: {}",
            missing.join(", ")
        )));
    }

    let (a0, a0_nodes) = assemble_interface(&mesh, &overlap.interface_elements, &coeff)?;
    let mut parts = Vec::with_capacity(manifest.n);
    for entry in &manifest.subdomains {
        parts.push(read_basis_summary(&run_dir.join(&entry.basis))?);
    }
    let sys = assemble_reduced(&a0, &a0_nodes, &parts, &overlap.neighbor_pairs, manifest.n)?;
    drop(parts);

    sys.to_csr().write_triplets_file(&run_dir.join("system.txt"))?;
    let mut off = Vec::new();
    write!(off, "offsets {}", sys.offsets.len()).unwrap();
    for o in &sys.offsets {
        write!(off, " {o}").unwrap();
    }
    writeln!(off).unwrap();
    atomic_write(&run_dir.join("offsets.txt"), &off)?;

    let max_iter = opts.max_iter.unwrap_or(10 * sys.dim().max(1));
    let b = sys.rhs.clone();
    let (x, iterations, residual) = pcg_jacobi(&sys, &b, opts.tol, max_iter)?;

    let mut report = SolveReport {
        x: x.clone(),
        iterations,
        residual,
        reduced_dim: sys.dim(),
        reduced_nnz: sys.nnz(),
        ..SolveReport::default()
    };
    let unit_energy = manifest.coefficient == "one" && manifest.load == "unit-energy";
    if unit_energy {
        report.energy_error = Some(energy_error(&sys, &x));
    }
    if opts.kappa {
        report.kappa_reduced = Some(condition_of_reduced(
            &sys,
            opts.kappa_iters,
            manifest.master_seed.wrapping_add(1),
        ));
    }

    let needs_global = opts.compare_full || opts.kappa;
    let needs_reconstruct = opts.compare_full || opts.write_solution;
    let mut u_tilde = None;
    if needs_reconstruct {
        let free = DofMap::free(&mesh);
        let mut rec = Reconstructor::new(free);
        for entry in &manifest.subdomains {
            let basis = read_basis_full(&run_dir.join(&entry.basis))?;
            let idx = (basis.id - 1) as usize;
            let xs = &x[sys.block_range(idx)];
            rec.add_subdomain(basis.id, &basis.owned_global, &basis.q, xs)?;
        }
        u_tilde = Some(rec.finish()?);
    }
    if needs_global {
        let free = DofMap::free(&mesh);
        let a = fem::assemble_stiffness(&mesh, 0..mesh.n_elements() as u32, &coeff, &free)?;
        if opts.kappa {
            report.kappa_full = Some(condition_of_csr(
                &a,
                opts.kappa_iters,
                manifest.master_seed.wrapping_add(2),
            ));
        }
        if opts.compare_full {
            let load = manifest.load_field(mesh.dim())?;
            let bfull =
                fem::assemble_load(&mesh, 0..mesh.n_elements() as u32, load.as_ref(), &free);
            let (u, _, _) = fem::solve_full(&a, &bfull, opts.tol.min(1e-10), 100_000)?;
            if unit_energy {
                report.fe_energy_error = Some((1.0 - a.quadratic_form(&u)).max(0.0).sqrt());
            }
            let ut = u_tilde.as_ref().unwrap();
            let a_unit = if manifest.coefficient == "one" {
                a
            } else {
                fem::assemble_stiffness(
                    &mesh,
                    0..mesh.n_elements() as u32,
                    &CoefficientField::One,
                    &free,
                )?
            };
            report.reduction_error = Some(reduction_error(&u, ut, &a_unit));
        }
    }
    if opts.write_solution {
        let free = DofMap::free(&mesh);
        let ut = u_tilde.as_ref().unwrap();
        let mut buf = Vec::new();
        writeln!(buf, "solution {}", mesh.n_vertices()).unwrap();
        for v in 0..mesh.n_vertices() {
            let val = free.local(v as u32).map_or(0.0, |k| ut[k]);
            writeln!(buf, "{val}").unwrap();
        }
        atomic_write(&run_dir.join("solution.txt"), &buf)?;
    }

    let mut buf = Vec::new();
    report.write_text(&mut buf).map_err(|e| CoreError::io(run_dir.join("report.txt"), e))?;
    atomic_write(&run_dir.join("report.txt"), &buf)?;
    Ok(report)
}

/// Direct full-order solve, for baselines and convergence studies.
#[derive(Debug, Clone)]
pub struct FullSolveReport {
    pub n_free: usize,
    pub iterations: usize,
    pub residual: f64,
    pub energy_error: Option<f64>,
    pub solution: Vec<f64>,
}

pub fn full_solve(
    mesh_ref: &str,
    coefficient: &str,
    load_sel: &str,
    tol: f64,
) -> Result<FullSolveReport> {
    let mesh = resolve_mesh(mesh_ref)?;
    let coeff = CoefficientField::from_selector(coefficient)?;
    let load = fem::load_from_selector(load_sel, mesh.dim())?;
    let free = DofMap::free(&mesh);
    let a = fem::assemble_stiffness(&mesh, 0..mesh.n_elements() as u32, &coeff, &free)?;
    let b = fem::assemble_load(&mesh, 0..mesh.n_elements() as u32, load.as_ref(), &free);
    let (u, iterations, residual) = fem::solve_full(&a, &b, tol, 100_000)?;
    let energy_error = if coefficient == "one" && load_sel == "unit-energy" {
        let r = 1.0 - a.quadratic_form(&u);
        Some(r.max(0.0).sqrt())
    } else {
        None
    };
    Ok(FullSolveReport { n_free: free.len(), iterations, residual, energy_error, solution: u })
}

/// Singular spectra of the weighted lifting operators, for decay plots and
/// sketch-bound evaluation. Explicit computation, so subject to the same
/// boundary-size cap as the explicit reduction path.
pub fn cmd_spectra(
    run_dir: &Path,
    only: Option<&[u32]>,
    max_count: usize,
) -> Result<Vec<(u32, Vec<f64>)>> {
    let manifest = Manifest::load(run_dir)?;
    let coeff = manifest.coefficient_field()?;
    let ids: Vec<u32> = match only {
        Some(f) => f.to_vec(),
        None => manifest.subdomains.iter().map(|s| s.id).collect(),
    };
    let mut out = Vec::with_capacity(ids.len());
    for id in ids {
        let entry = manifest
            .subdomains
            .iter()
            .find(|s| s.id == id)
            .ok_or_else(|| CoreError::Validation(format!("subdomain {id} not in manifest")))?;
        let sub = read_submesh(&run_dir.join(&entry.submesh))?;
        if sub.b_dofs.len() > EXPLICIT_BOUNDARY_CAP {
            return Err(CoreError::Validation(format!(
                "subdomain {id} boundary {} exceeds the explicit cap {EXPLICIT_BOUNDARY_CAP}",
                sub.b_dofs.len()
            )));
        }
        let weights = crate::local_reduction::build_weights(&sub)?;
        let lifting = crate::local_reduction::LiftingOperator::build(&sub, &coeff)?;
        let spectrum = crate::local_reduction::compute_spectrum(&lifting, &weights, max_count)?;
        out.push((id, spectrum));
    }
    let mut buf = Vec::new();
    writeln!(buf, "spectra 1").unwrap();
    for (id, s) in &out {
        write!(buf, "subdomain {id} {}", s.len()).unwrap();
        for v in s {
            write!(buf, " {v}").unwrap();
        }
        writeln!(buf).unwrap();
    }
    atomic_write(&run_dir.join("spectra.txt"), &buf)?;
    Ok(out)
}

pub fn read_spectra(path: &Path) -> Result<Vec<(u32, Vec<f64>)>> {
    let file = fs::File::open(path).map_err(|e| CoreError::io(path, e))?;
    let mut r = std::io::BufReader::new(file);
    let mut t = Tokens::new(&mut r, path)?;
    t.expect_word("spectra")?;
    let version: u32 = t.number("format version")?;
    if version != 1 {
        return Err(t.error(format!("unsupported spectra version {version}")));
    }
    let mut out = Vec::new();
    while !t.done() {
        t.expect_word("subdomain")?;
        let id: u32 = t.number("subdomain id")?;
        let count: usize = t.number("value count")?;
        out.push((id, read_reals(&mut t, count, "singular value")?));
    }
    Ok(out)
}

/// One row of the h-refinement study.
#[derive(Debug, Clone)]
pub struct ConvergenceRow {
    pub divisions: usize,
    pub h: f64,
    pub energy_error: f64,
    pub fe_error: f64,
    pub reduction_error: f64,
    pub reduced_dim: usize,
    pub n_free: usize,
}

#[derive(Debug, Clone)]
pub struct ConvergenceReport {
    pub rows: Vec<ConvergenceRow>,
    /// Least-squares slope of log(error) against log(h).
    pub slope: f64,
}

/// Run the whole pipeline at several mesh sizes and fit the error decay
/// rate. Cases are (divisions, subdomains, hops); dim, tolerance and method
/// come from the shared settings.
pub fn cmd_convergence(
    base_dir: &Path,
    dim: usize,
    cases: &[(usize, usize, usize)],
    epsilon: f64,
    method: Method,
    master_seed: u64,
    tol: f64,
) -> Result<ConvergenceReport> {
    if cases.len() < 2 {
        return Err(CoreError::Validation("need at least two mesh sizes for a rate".into()));
    }
    let mut rows = Vec::with_capacity(cases.len());
    for &(div, n, hops) in cases {
        let run_dir = base_dir.join(format!("case_{div:03}"));
        let cfg = PartitionConfig {
            mesh_ref: format!("gen:{div}:{dim}"),
            n,
            r_hops: hops,
            master_seed,
            epsilon,
            method,
            sketch_divisor: 8,
            coefficient: "one".into(),
            load: "unit-energy".into(),
            run_id: None,
        };
        let summary = cmd_partition(&run_dir, &cfg)?;
        let reduce = cmd_reduce(&run_dir, None, &Runner::InProcess)?;
        if !reduce.failed.is_empty() {
            return Err(CoreError::Pipeline(format!(
                "convergence case {div}: {} workers failed ({})",
                reduce.failed.len(),
                reduce.failed[0].1
            )));
        }
        let report = cmd_solve(
            &run_dir,
            &SolveOptions { tol, compare_full: true, ..SolveOptions::default() },
        )?;
        let energy = report.energy_error.ok_or_else(|| {
            CoreError::Pipeline("convergence study needs the unit-energy load".into())
        })?;
        rows.push(ConvergenceRow {
            divisions: div,
            h: summary.mesh_size,
            energy_error: energy,
            fe_error: report.fe_energy_error.unwrap_or(f64::NAN),
            reduction_error: report.reduction_error.unwrap_or(f64::NAN),
            reduced_dim: report.reduced_dim,
            n_free: summary.n_free,
        });
    }
    let slope = fit_slope(
        &rows.iter().map(|r| r.h.ln()).collect::<Vec<_>>(),
        &rows.iter().map(|r| r.energy_error.ln()).collect::<Vec<_>>(),
    );
    let mut buf = Vec::new();
    writeln!(buf, "convergence 1").unwrap();
    for r in &rows {
        writeln!(
            buf,
            "case {} {} {} {} {} {} {}",
            r.divisions, r.h, r.energy_error, r.fe_error, r.reduction_error, r.reduced_dim,
            r.n_free
        )
        .unwrap();
    }
    writeln!(buf, "slope {slope}").unwrap();
    atomic_write(&base_dir.join("convergence.txt"), &buf)?;
    Ok(ConvergenceReport { rows, slope })
}

/// Least-squares slope of y against x.
pub fn fit_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut den = 0.0;
    for (a, b) in x.iter().zip(y) {
        num += (a - mx) * (b - my);
        den += (a - mx) * (a - mx);
    }
    num / den
}

/// Buffered file writer that fails through CoreError.
pub fn buffered_file(path: &Path) -> Result<BufWriter<fs::File>> {
    let f = fs::File::create(path).map_err(|e| CoreError::io(path, e))?;
    Ok(BufWriter::new(f))
}
