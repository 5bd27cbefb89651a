//! Linear stochastic subsystems and their interconnection.
//!
//! A subsystem evolves as `x⁺ = A x + B ν + D ω + F ς` with `ς` standard
//! normal. Its outputs are split into an external block `C_ext x` and one
//! internal block `C_int[j] x` per peer `j` that listens to it. Wiring is
//! described by a [`Topology`]: an edge `j → i` feeds `C_int_j[i] x_j` into a
//! contiguous slice of `ω_i`.

use std::collections::BTreeMap;
use std::fmt;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{block_diag, vstack};

#[derive(Debug, Clone, PartialEq)]
pub struct LinearSubsystem {
    pub id: usize,
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub d: DMatrix<f64>,
    pub f: DMatrix<f64>,
    pub c_ext: DMatrix<f64>,
    /// Internal output blocks keyed by the receiving peer. A missing key means
    /// the connecting output is identically zero.
    pub c_int: BTreeMap<usize, DMatrix<f64>>,
}

/// One dimension-consistency failure, naming the two matrices that disagree.
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub subsystem: usize,
    pub first: String,
    pub second: String,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "subsystem {}: {} vs {}: {}",
            self.subsystem, self.first, self.second, self.detail
        )
    }
}

impl LinearSubsystem {
    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    pub fn internal_input_dim(&self) -> usize {
        self.d.ncols()
    }

    pub fn noise_dim(&self) -> usize {
        self.f.ncols()
    }

    pub fn external_output_dim(&self) -> usize {
        self.c_ext.nrows()
    }

    /// Full output map: `C_ext` followed by the internal blocks in ascending
    /// peer order.
    pub fn full_output(&self) -> DMatrix<f64> {
        let mut blocks = vec![&self.c_ext];
        blocks.extend(self.c_int.values());
        vstack(&blocks, self.state_dim())
    }

    /// Dimension diagnostics; empty when the subsystem is well formed.
    pub fn validate(&self) -> Vec<Violation> {
        let n = self.a.nrows();
        let mut out = Vec::new();
        let mut push = |first: &str, second: &str, detail: String| {
            out.push(Violation {
                subsystem: self.id,
                first: first.to_string(),
                second: second.to_string(),
                detail,
            })
        };
        if self.a.ncols() != n {
            push("A", "A", format!("A is {}×{}, not square", n, self.a.ncols()));
        }
        for (name, m) in [("B", &self.b), ("D", &self.d), ("F", &self.f)] {
            if m.nrows() != n {
                push(
                    name,
                    "A",
                    format!("{name} rows ≠ state dim ({} ≠ {n})", m.nrows()),
                );
            }
        }
        if self.c_ext.ncols() != n {
            push(
                "C_ext",
                "A",
                format!("C_ext columns ≠ state dim ({} ≠ {n})", self.c_ext.ncols()),
            );
        }
        for (peer, block) in &self.c_int {
            if *peer == self.id {
                push(
                    &format!("C_int[{peer}]"),
                    "id",
                    "internal output routed to itself".to_string(),
                );
            }
            if block.ncols() != n {
                push(
                    &format!("C_int[{peer}]"),
                    "A",
                    format!("columns ≠ state dim ({} ≠ {n})", block.ncols()),
                );
            }
        }
        out
    }

    /// One noise-driven step `A x + B ν + D ω + F ς`.
    pub fn step(
        &self,
        x: &DVector<f64>,
        nu: &DVector<f64>,
        omega: &DVector<f64>,
        noise: &DVector<f64>,
    ) -> DVector<f64> {
        let mut next = &self.a * x;
        next.gemv(1.0, &self.b, nu, 1.0);
        next.gemv(1.0, &self.d, omega, 1.0);
        next.gemv(1.0, &self.f, noise, 1.0);
        next
    }
}

/// Edge `from → to`: `C_int_from[to] x_from` drives rows
/// `offset..offset + len` of `ω_to`, where `len` is the block's row count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Edge {
    pub from: usize,
    pub to: usize,
    pub offset: usize,
}

/// Rows of a subsystem's internal input that are held at zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InputSlice {
    pub subsystem: usize,
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Topology {
    pub n: usize,
    pub edges: Vec<Edge>,
    pub unconnected: Vec<InputSlice>,
}

impl Topology {
    pub fn empty(n: usize) -> Self {
        Topology {
            n,
            edges: Vec::new(),
            unconnected: Vec::new(),
        }
    }

    /// Builds edges from `(from, to)` pairs, stacking each `ω_i` in ascending
    /// peer order. Rows of `D_i` left over after the last incoming slice are
    /// declared unconnected.
    pub fn from_pairs(subs: &[LinearSubsystem], pairs: &[(usize, usize)]) -> Result<Self> {
        let n = subs.len();
        let mut incoming: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for &(from, to) in pairs {
            if from >= n || to >= n {
                return Err(Error::InvalidTopology(format!(
                    "edge {from} → {to} references a subsystem outside 0..{n}"
                )));
            }
            incoming.entry(to).or_default().push(from);
        }
        let mut topo = Topology::empty(n);
        for (i, sub) in subs.iter().enumerate() {
            let mut peers = incoming.remove(&i).unwrap_or_default();
            peers.sort_unstable();
            let mut offset = 0;
            for from in peers {
                let len = subs[from]
                    .c_int
                    .get(&i)
                    .map(|c| c.nrows())
                    .ok_or_else(|| {
                        Error::DimensionMismatch(format!(
                            "edge {from} → {i}: subsystem {from} has no internal output block for {i}"
                        ))
                    })?;
                topo.edges.push(Edge {
                    from,
                    to: i,
                    offset,
                });
                offset += len;
            }
            let p = sub.internal_input_dim();
            if offset < p {
                topo.unconnected.push(InputSlice {
                    subsystem: i,
                    offset,
                    len: p - offset,
                });
            }
        }
        Ok(topo)
    }

    pub fn has_edge(&self, from: usize, to: usize) -> bool {
        self.edges.iter().any(|e| e.from == from && e.to == to)
    }

    pub fn in_degree(&self, i: usize) -> usize {
        self.edges.iter().filter(|e| e.to == i).count()
    }

    pub fn incoming(&self, i: usize) -> impl Iterator<Item = &Edge> {
        self.edges.iter().filter(move |e| e.to == i)
    }

    /// Checks edge endpoints, slice dimensions and exact coverage of every
    /// internal input row.
    pub fn validate(&self, subs: &[LinearSubsystem]) -> Result<()> {
        if self.n != subs.len() {
            return Err(Error::InvalidTopology(format!(
                "topology declares {} subsystems, {} given",
                self.n,
                subs.len()
            )));
        }
        let mut coverage: Vec<Vec<u32>> = subs
            .iter()
            .map(|s| vec![0; s.internal_input_dim()])
            .collect();
        let mut seen = std::collections::BTreeSet::new();
        for e in &self.edges {
            if e.from >= self.n || e.to >= self.n {
                return Err(Error::InvalidTopology(format!(
                    "edge {} → {} out of range",
                    e.from, e.to
                )));
            }
            if e.from == e.to {
                return Err(Error::InvalidTopology(format!("self-edge on {}", e.from)));
            }
            if !seen.insert((e.from, e.to)) {
                return Err(Error::InvalidTopology(format!(
                    "duplicate edge {} → {}",
                    e.from, e.to
                )));
            }
            let block = subs[e.from].c_int.get(&e.to).ok_or_else(|| {
                Error::DimensionMismatch(format!(
                    "edge {} → {}: no internal output block C_int[{}] on subsystem {}",
                    e.from, e.to, e.to, e.from
                ))
            })?;
            mark(&mut coverage[e.to], e.to, e.offset, block.nrows())?;
        }
        for s in &self.unconnected {
            if s.subsystem >= self.n {
                return Err(Error::InvalidTopology(format!(
                    "unconnected slice on unknown subsystem {}",
                    s.subsystem
                )));
            }
            mark(&mut coverage[s.subsystem], s.subsystem, s.offset, s.len)?;
        }
        for (i, rows) in coverage.iter().enumerate() {
            if let Some(row) = rows.iter().position(|&c| c == 0) {
                return Err(Error::DanglingInput { subsystem: i, row });
            }
        }
        Ok(())
    }
}

fn mark(rows: &mut [u32], subsystem: usize, offset: usize, len: usize) -> Result<()> {
    if offset + len > rows.len() {
        return Err(Error::DimensionMismatch(format!(
            "subsystem {subsystem}: slice {offset}..{} exceeds internal input dim {}",
            offset + len,
            rows.len()
        )));
    }
    for r in &mut rows[offset..offset + len] {
        *r += 1;
        if *r > 1 {
            return Err(Error::InvalidTopology(format!(
                "subsystem {subsystem}: internal input rows covered more than once"
            )));
        }
    }
    Ok(())
}

/// Internal inputs `ω_i` for every subsystem given the current states.
pub fn route_internal_inputs(
    subs: &[LinearSubsystem],
    topo: &Topology,
    states: &[DVector<f64>],
) -> Vec<DVector<f64>> {
    let mut omegas: Vec<DVector<f64>> = subs
        .iter()
        .map(|s| DVector::zeros(s.internal_input_dim()))
        .collect();
    for e in &topo.edges {
        let block = &subs[e.from].c_int[&e.to];
        let y = block * &states[e.from];
        omegas[e.to].rows_mut(e.offset, y.len()).copy_from(&y);
    }
    omegas
}

/// Monolithic form of an interconnection with internal inputs eliminated.
#[derive(Debug, Clone, PartialEq)]
pub struct InterconnectedSystem {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub f: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub state_offsets: Vec<usize>,
    pub input_offsets: Vec<usize>,
    pub noise_offsets: Vec<usize>,
    pub subsystem_ids: Vec<usize>,
    pub topology: Topology,
}

impl InterconnectedSystem {
    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn step(&self, x: &DVector<f64>, nu: &DVector<f64>, noise: &DVector<f64>) -> DVector<f64> {
        let mut next = &self.a * x;
        next.gemv(1.0, &self.b, nu, 1.0);
        next.gemv(1.0, &self.f, noise, 1.0);
        next
    }
}

fn offsets(dims: impl Iterator<Item = usize>) -> Vec<usize> {
    let mut acc = 0;
    dims.map(|d| {
        let o = acc;
        acc += d;
        o
    })
    .collect()
}

/// Eliminates `ω_ij = y_ji` and returns the stacked system.
pub fn assemble_interconnection(
    subs: &[LinearSubsystem],
    topo: &Topology,
) -> Result<InterconnectedSystem> {
    for (i, s) in subs.iter().enumerate() {
        if s.id != i {
            return Err(Error::InvalidTopology(format!(
                "subsystem at position {i} has id {}",
                s.id
            )));
        }
        if let Some(v) = s.validate().into_iter().next() {
            return Err(Error::DimensionMismatch(v.to_string()));
        }
    }
    topo.validate(subs)?;

    let mut a = block_diag(subs.iter().map(|s| &s.a));
    let b = block_diag(subs.iter().map(|s| &s.b));
    let f = block_diag(subs.iter().map(|s| &s.f));
    let c = block_diag(subs.iter().map(|s| &s.c_ext));
    let state_offsets = offsets(subs.iter().map(|s| s.state_dim()));

    for e in &topo.edges {
        let block = &subs[e.from].c_int[&e.to];
        let d_slice = subs[e.to].d.columns(e.offset, block.nrows());
        let coupling = d_slice * block;
        let mut target = a.view_mut(
            (state_offsets[e.to], state_offsets[e.from]),
            (coupling.nrows(), coupling.ncols()),
        );
        target += coupling;
    }

    Ok(InterconnectedSystem {
        a,
        b,
        f,
        c,
        state_offsets,
        input_offsets: offsets(subs.iter().map(|s| s.input_dim())),
        noise_offsets: offsets(subs.iter().map(|s| s.noise_dim())),
        subsystem_ids: subs.iter().map(|s| s.id).collect(),
        topology: topo.clone(),
    })
}
