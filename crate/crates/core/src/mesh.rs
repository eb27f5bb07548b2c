//! Simplicial meshes of the unit square and cube: structured generation,
//! plain-text import/export, and node adjacency.

use crate::error::{CoreError, Result};
use std::io::{BufRead, Write};
use std::path::Path;

/// A simplicial mesh in dimension 2 or 3 with homogeneous Dirichlet boundary.
/// Immutable after construction; safe to share across threads.
#[derive(Clone, Debug)]
pub struct Mesh {
    dim: usize,
    /// Flat coordinates, `dim` entries per vertex.
    coords: Vec<f64>,
    /// Flat connectivity, `dim + 1` vertex indices per element.
    elements: Vec<u32>,
    /// Marker per vertex: on the geometric boundary.
    dirichlet: Vec<bool>,
}

impl Mesh {
    pub fn new(dim: usize, coords: Vec<f64>, elements: Vec<u32>, dirichlet: Vec<bool>) -> Result<Mesh> {
        if dim != 2 && dim != 3 {
            return Err(CoreError::Validation(format!("dimension must be 2 or 3, got {dim}")));
        }
        if coords.len() % dim != 0 {
            return Err(CoreError::Validation("coordinate array length not a multiple of dim".into()));
        }
        let nv = coords.len() / dim;
        if elements.len() % (dim + 1) != 0 {
            return Err(CoreError::Validation("element array length not a multiple of dim+1".into()));
        }
        if dirichlet.len() != nv {
            return Err(CoreError::Validation("dirichlet marker length mismatch".into()));
        }
        let mesh = Mesh {
            dim,
            coords,
            elements,
            dirichlet,
        };
        for e in 0..mesh.n_elements() {
            for &v in mesh.element(e) {
                if v as usize >= nv {
                    return Err(CoreError::Validation(format!(
                        "element {e} references vertex {v} but there are only {nv} vertices"
                    )));
                }
            }
            let vol = mesh.element_volume(e);
            if vol.abs() < 1e-300 {
                return Err(CoreError::Validation(format!("element {e} is degenerate (zero volume)")));
            }
        }
        Ok(mesh)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_vertices(&self) -> usize {
        self.coords.len() / self.dim
    }

    pub fn n_elements(&self) -> usize {
        self.elements.len() / (self.dim + 1)
    }

    pub fn vertex(&self, i: usize) -> &[f64] {
        &self.coords[i * self.dim..(i + 1) * self.dim]
    }

    pub fn element(&self, e: usize) -> &[u32] {
        &self.elements[e * (self.dim + 1)..(e + 1) * (self.dim + 1)]
    }

    pub fn elements_flat(&self) -> &[u32] {
        &self.elements
    }

    pub fn is_dirichlet(&self, v: usize) -> bool {
        self.dirichlet[v]
    }

    /// Free (non-Dirichlet) vertex indices, ascending.
    pub fn free_dofs(&self) -> Vec<u32> {
        (0..self.n_vertices() as u32)
            .filter(|&v| !self.dirichlet[v as usize])
            .collect()
    }

    pub fn n_free_dofs(&self) -> usize {
        self.dirichlet.iter().filter(|&&d| !d).count()
    }

    /// Signed element volume times d! is the Jacobian determinant; this
    /// returns the absolute simplex volume.
    pub fn element_volume(&self, e: usize) -> f64 {
        let el = self.element(e);
        let d = self.dim;
        let x0 = self.vertex(el[0] as usize);
        let mut m = [[0.0f64; 3]; 3];
        for k in 0..d {
            let xk = self.vertex(el[k + 1] as usize);
            for c in 0..d {
                m[c][k] = xk[c] - x0[c];
            }
        }
        let det = match d {
            2 => m[0][0] * m[1][1] - m[0][1] * m[1][0],
            _ => {
                m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
                    - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
                    + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
            }
        };
        let dfact = if d == 2 { 2.0 } else { 6.0 };
        det.abs() / dfact
    }

    /// Maximum element diameter (longest edge over all elements).
    pub fn mesh_size(&self) -> f64 {
        let mut h2: f64 = 0.0;
        for e in 0..self.n_elements() {
            let el = self.element(e);
            for a in 0..el.len() {
                for b in (a + 1)..el.len() {
                    let xa = self.vertex(el[a] as usize);
                    let xb = self.vertex(el[b] as usize);
                    let d2: f64 = xa.iter().zip(xb).map(|(p, q)| (p - q) * (p - q)).sum();
                    h2 = h2.max(d2);
                }
            }
        }
        h2.sqrt()
    }

    /// Node adjacency: neighbors share an element. Sorted, no self loops.
    pub fn node_adjacency(&self) -> Vec<Vec<u32>> {
        let mut adj = vec![Vec::new(); self.n_vertices()];
        for e in 0..self.n_elements() {
            let el = self.element(e);
            for &a in el {
                for &b in el {
                    if a != b {
                        adj[a as usize].push(b);
                    }
                }
            }
        }
        for list in &mut adj {
            list.sort_unstable();
            list.dedup();
        }
        adj
    }

    /// Elements incident to each vertex.
    pub fn vertex_elements(&self) -> Vec<Vec<u32>> {
        let mut inc = vec![Vec::new(); self.n_vertices()];
        for e in 0..self.n_elements() {
            for &v in self.element(e) {
                inc[v as usize].push(e as u32);
            }
        }
        inc
    }

    pub fn export(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).map_err(|e| CoreError::io(path, e))?;
        crate::pipeline::atomic_write(path, &buf)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        writeln!(w, "mesh {} {} {}", self.dim, self.n_vertices(), self.n_elements())?;
        for i in 0..self.n_vertices() {
            let x = self.vertex(i);
            for (c, v) in x.iter().enumerate() {
                if c > 0 {
                    write!(w, " ")?;
                }
                write!(w, "{}", v)?;
            }
            writeln!(w)?;
        }
        for e in 0..self.n_elements() {
            let el = self.element(e);
            for (c, v) in el.iter().enumerate() {
                if c > 0 {
                    write!(w, " ")?;
                }
                write!(w, "{}", v)?;
            }
            writeln!(w)?;
        }
        let dn: Vec<usize> = (0..self.n_vertices()).filter(|&v| self.dirichlet[v]).collect();
        writeln!(w, "dirichlet {}", dn.len())?;
        for v in dn {
            writeln!(w, "{}", v)?;
        }
        Ok(())
    }

    pub fn import(path: &Path) -> Result<Mesh> {
        let f = std::fs::File::open(path).map_err(|e| CoreError::io(path, e))?;
        Mesh::read_from(&mut std::io::BufReader::new(f), path)
    }

    pub fn read_from<R: BufRead>(r: &mut R, path: &Path) -> Result<Mesh> {
        let mut tok = Tokens::new(r, path)?;
        tok.expect_word("mesh")?;
        let dim: usize = tok.number("dimension")?;
        if dim != 2 && dim != 3 {
            return Err(tok.error(format!("dimension must be 2 or 3, got {dim}")));
        }
        let nv: usize = tok.number("vertex count")?;
        let ne: usize = tok.number("element count")?;
        let mut coords = Vec::with_capacity(nv * dim);
        for _ in 0..nv * dim {
            coords.push(tok.number::<f64>("vertex coordinate")?);
        }
        let mut elements = Vec::with_capacity(ne * (dim + 1));
        for _ in 0..ne * (dim + 1) {
            let v: usize = tok.number("element vertex index")?;
            if v >= nv {
                return Err(tok.error(format!("vertex index {v} out of range (nv = {nv})")));
            }
            elements.push(v as u32);
        }
        tok.expect_word("dirichlet")?;
        let nd: usize = tok.number("dirichlet count")?;
        let mut dirichlet = vec![false; nv];
        for _ in 0..nd {
            let v: usize = tok.number("dirichlet index")?;
            if v >= nv {
                return Err(tok.error(format!("dirichlet index {v} out of range (nv = {nv})")));
            }
            dirichlet[v] = true;
        }
        Mesh::new(dim, coords, elements, dirichlet)
    }
}

/// Whitespace token reader that tracks line numbers for error messages.
pub(crate) struct Tokens {
    words: Vec<(usize, String)>,
    pos: usize,
    path: std::path::PathBuf,
}

impl Tokens {
    pub fn new<R: BufRead>(r: &mut R, path: &Path) -> Result<Tokens> {
        let mut words = Vec::new();
        for (ln, line) in r.lines().enumerate() {
            let line = line.map_err(|e| CoreError::io(path, e))?;
            for w in line.split_whitespace() {
                words.push((ln + 1, w.to_string()));
            }
        }
        Ok(Tokens {
            words,
            pos: 0,
            path: path.to_path_buf(),
        })
    }

    fn line(&self) -> usize {
        if self.pos < self.words.len() {
            self.words[self.pos].0
        } else {
            self.words.last().map(|w| w.0).unwrap_or(1)
        }
    }

    pub fn error(&self, msg: impl Into<String>) -> CoreError {
        CoreError::parse(&self.path, self.line(), msg)
    }

    pub fn next(&mut self, what: &str) -> Result<String> {
        if self.pos >= self.words.len() {
            return Err(CoreError::parse(
                &self.path,
                self.line(),
                format!("unexpected end of file, expected {what}"),
            ));
        }
        self.pos += 1;
        Ok(self.words[self.pos - 1].1.clone())
    }

    pub fn expect_word(&mut self, word: &str) -> Result<()> {
        let line = self.line();
        let got = self.next(word)?;
        if got != word {
            return Err(CoreError::parse(&self.path, line, format!("expected `{word}`, got `{got}`")));
        }
        Ok(())
    }

    pub fn number<T: std::str::FromStr>(&mut self, what: &str) -> Result<T> {
        let line = self.line();
        let got = self.next(what)?;
        got.parse()
            .map_err(|_| CoreError::parse(&self.path, line, format!("expected {what}, got `{got}`")))
    }

    pub fn done(&self) -> bool {
        self.pos >= self.words.len()
    }
}

/// Structured simplicial mesh of the unit square or cube.
///
/// Every lattice cell is split the same way: squares by the diagonal from the
/// low corner to the high corner, cubes into the six tetrahedra that sort the
/// local coordinates (all sharing the main diagonal), so neighboring cells
/// always agree on shared faces.
pub fn generate_unit_cube_mesh(divisions_per_axis: usize, dimension: usize) -> Result<Mesh> {
    let n = divisions_per_axis;
    let d = dimension;
    if n == 0 {
        return Err(CoreError::Validation("divisions_per_axis must be at least 1".into()));
    }
    if d != 2 && d != 3 {
        return Err(CoreError::Validation(format!("dimension must be 2 or 3, got {d}")));
    }
    let np = n + 1;
    let nv = np.pow(d as u32);
    let mut coords = Vec::with_capacity(nv * d);
    let mut dirichlet = Vec::with_capacity(nv);
    let h = 1.0 / n as f64;
    if d == 2 {
        for j in 0..np {
            for i in 0..np {
                coords.push(i as f64 * h);
                coords.push(j as f64 * h);
                dirichlet.push(i == 0 || i == n || j == 0 || j == n);
            }
        }
    } else {
        for k in 0..np {
            for j in 0..np {
                for i in 0..np {
                    coords.push(i as f64 * h);
                    coords.push(j as f64 * h);
                    coords.push(k as f64 * h);
                    dirichlet.push(i == 0 || i == n || j == 0 || j == n || k == 0 || k == n);
                }
            }
        }
    }

    let mut elements = Vec::new();
    if d == 2 {
        let vid = |i: usize, j: usize| (j * np + i) as u32;
        for j in 0..n {
            for i in 0..n {
                let (a, b, c, dd) = (vid(i, j), vid(i + 1, j), vid(i, j + 1), vid(i + 1, j + 1));
                // Diagonal a-dd shared by both triangles.
                elements.extend_from_slice(&[a, b, dd]);
                elements.extend_from_slice(&[a, dd, c]);
            }
        }
    } else {
        let vid = |i: usize, j: usize, k: usize| ((k * np + j) * np + i) as u32;
        // The six permutations of (x, y, z) orderings; each tetrahedron walks
        // from the low corner to the high corner one axis at a time.
        const PERMS: [[usize; 3]; 6] = [
            [0, 1, 2],
            [0, 2, 1],
            [1, 0, 2],
            [1, 2, 0],
            [2, 0, 1],
            [2, 1, 0],
        ];
        for k in 0..n {
            for j in 0..n {
                for i in 0..n {
                    for perm in PERMS {
                        let mut corner = [i, j, k];
                        let mut tet = [vid(corner[0], corner[1], corner[2]), 0, 0, 0];
                        for (step, &axis) in perm.iter().enumerate() {
                            corner[axis] += 1;
                            tet[step + 1] = vid(corner[0], corner[1], corner[2]);
                        }
                        elements.extend_from_slice(&tet);
                    }
                }
            }
        }
    }
    Mesh::new(d, coords, elements, dirichlet)
}
