//! Project files: subsystems, wiring, abstractions and run settings in one
//! JSON document.
//!
//! ```json
//! {
//!   "schema_version": 1,
//!   "notes": ["free text shown by `check`"],
//!   "subsystems": [
//!     { "id": 1, "a": [[..]], "b": [[..]], "d": [[..]], "f": [[..]],
//!       "c_ext": [[..]], "c_int": { "4": [[..]] } }
//!   ],
//!   "topology": {
//!     "edges": [ { "from": 3, "to": 1 } ],
//!     "unconnected": [ { "subsystem": 2, "offset": 1, "len": 1 } ]
//!   },
//!   "abstractions": [
//!     { "subsystem": 1, "p": [[..]], "a_hat": [[..]], "b_hat": [[..]],
//!       "d_hat": [[..]], "f_hat": [[..]], "pi": 0.99, "kappa_hat": 0.98,
//!       "m": [[..]], "k": [[..]],
//!       "certificate": { "q": [[..]], "s": [[..]], "r_tilde": [[..]] } }
//!   ],
//!   "composition": { "degree_mode": "in_degree", "gain_decimals": 2 },
//!   "run": { "epsilon": 1.0, "horizon": 10, "trials": 10000, "seed": 42 }
//! }
//! ```
//!
//! Matrices are arrays of rows. A matrix with zero columns is written as a
//! list of empty rows; a matrix with zero rows as `[]`. Subsystem ids are
//! arbitrary distinct integers; every other reference (`c_int` keys, edge
//! endpoints, `abstractions[].subsystem`) uses them. `c_hat_ext` and
//! `c_hat_int` default to `C_ext P` and `C_int P`. When any edge carries an
//! explicit `offset`, all must, and `unconnected` must list the remaining
//! rows; otherwise slices are stacked in ascending peer order.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use simcert_core::model::{Edge, InputSlice, LinearSubsystem, Topology};
use simcert_core::spsf::{AbstractionCandidate, AbstractionCertificate, SpsfConstants};
use simcert_core::{example, DegreeMode};

pub const SCHEMA_VERSION: u32 = 1;

pub type Rows = Vec<Vec<f64>>;

#[derive(Debug, Error)]
pub enum ProjectError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed project file: {0}")]
    Json(#[from] serde_json::Error),
    #[error("schema error: {0}")]
    Schema(String),
    #[error(transparent)]
    Model(#[from] simcert_core::Error),
}

fn schema(msg: impl Into<String>) -> ProjectError {
    ProjectError::Schema(msg.into())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProjectFile {
    pub schema_version: u32,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
    pub subsystems: Vec<SubsystemSpec>,
    #[serde(default)]
    pub topology: TopologySpec,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub abstractions: Vec<AbstractionSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub composition: Option<CompositionSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run: Option<RunSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubsystemSpec {
    pub id: usize,
    pub a: Rows,
    pub b: Rows,
    pub d: Rows,
    pub f: Rows,
    pub c_ext: Rows,
    #[serde(default)]
    pub c_int: BTreeMap<usize, Rows>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologySpec {
    #[serde(default)]
    pub edges: Vec<EdgeSpec>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub unconnected: Vec<SliceSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdgeSpec {
    pub from: usize,
    pub to: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub offset: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SliceSpec {
    pub subsystem: usize,
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AbstractionSpec {
    pub subsystem: usize,
    pub p: Rows,
    pub a_hat: Rows,
    pub b_hat: Rows,
    pub d_hat: Rows,
    pub f_hat: Rows,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c_hat_ext: Option<Rows>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c_hat_int: Option<BTreeMap<usize, Rows>>,
    pub pi: f64,
    pub kappa_hat: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m: Option<Rows>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<Rows>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub certificate: Option<CertificateSpec>,
    /// Written by `abstract` for reference; never read back as input.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub constants: Option<ConstantsSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CertificateSpec {
    pub q: Rows,
    pub s: Rows,
    pub r_tilde: Rows,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstantsSpec {
    pub alpha_coef: f64,
    pub kappa_hat: f64,
    pub rho_int_coef: f64,
    pub rho_ext_coef: f64,
    pub psi: f64,
}

impl From<SpsfConstants> for ConstantsSpec {
    fn from(c: SpsfConstants) -> Self {
        ConstantsSpec {
            alpha_coef: c.alpha_coef,
            kappa_hat: c.kappa_hat,
            rho_int_coef: c.rho_int_coef,
            rho_ext_coef: c.rho_ext_coef,
            psi: c.psi,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompositionSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub degree_mode: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gain_decimals: Option<u32>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trials: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Bound on `sup_k ‖ν̂(k)‖` used in `ψ̂`; defaults to 0.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nuhat_sup: Option<f64>,
    /// Initial states keyed by subsystem id; missing entries are zero.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub initial_concrete: BTreeMap<usize, Vec<f64>>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub initial_abstract: BTreeMap<usize, Vec<f64>>,
    /// Abstract feedback `ν̂_i = G_i x̂_i` keyed by subsystem id; missing
    /// entries give `ν̂_i = 0`.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub policy_gains: BTreeMap<usize, Rows>,
}

/// Abstraction data after parsing, before any certification.
#[derive(Debug, Clone)]
pub struct LoadedAbstraction {
    pub candidate: AbstractionCandidate,
    pub pi: f64,
    pub kappa_hat: f64,
    pub m_k: Option<(DMatrix<f64>, DMatrix<f64>)>,
    /// Complete stored certificate (requires `m`, `k` and `certificate`).
    pub certificate: Option<AbstractionCertificate>,
}

/// A validated project with ids resolved to dense indices (file order).
#[derive(Debug, Clone)]
pub struct Project {
    pub file: ProjectFile,
    pub ids: Vec<usize>,
    pub subsystems: Vec<LinearSubsystem>,
    pub topology: Topology,
    pub abstractions: Vec<Option<LoadedAbstraction>>,
}

pub fn parse_matrix(name: &str, rows: &Rows, empty_cols: usize) -> Result<DMatrix<f64>, ProjectError> {
    let Some(first) = rows.first() else {
        return Ok(DMatrix::zeros(0, empty_cols));
    };
    let cols = first.len();
    if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != cols) {
        return Err(schema(format!(
            "{name}: row {i} has {} entries, expected {cols}",
            r.len()
        )));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(schema(format!("{name}: non-finite entry")));
    }
    Ok(DMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j]))
}

pub fn matrix_rows(m: &DMatrix<f64>) -> Rows {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

impl ProjectFile {
    pub fn load(path: &Path) -> Result<Self, ProjectError> {
        let text = std::fs::read_to_string(path).map_err(|source| ProjectError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self, ProjectError> {
        let file: ProjectFile = serde_json::from_str(text)?;
        if file.schema_version != SCHEMA_VERSION {
            return Err(schema(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                file.schema_version
            )));
        }
        Ok(file)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("project serialises") + "\n"
    }

    pub fn save(&self, path: &Path) -> Result<(), ProjectError> {
        std::fs::write(path, self.to_json()).map_err(|source| ProjectError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn resolve(self) -> Result<Project, ProjectError> {
        Project::resolve(self)
    }
}

impl Project {
    pub fn load(path: &Path) -> Result<Self, ProjectError> {
        ProjectFile::load(path)?.resolve()
    }

    pub fn index_of(&self, id: usize) -> Option<usize> {
        self.ids.iter().position(|&i| i == id)
    }

    fn resolve(file: ProjectFile) -> Result<Self, ProjectError> {
        let ids: Vec<usize> = file.subsystems.iter().map(|s| s.id).collect();
        if ids.is_empty() {
            return Err(schema("project has no subsystems"));
        }
        let index: BTreeMap<usize, usize> = ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        if index.len() != ids.len() {
            return Err(schema("duplicate subsystem id"));
        }
        let lookup = |what: &str, id: usize| {
            index
                .get(&id)
                .copied()
                .ok_or_else(|| schema(format!("{what} references unknown subsystem id {id}")))
        };

        let mut subsystems = Vec::with_capacity(ids.len());
        for (idx, spec) in file.subsystems.iter().enumerate() {
            let tag = |m: &str| format!("subsystem {}: {m}", spec.id);
            let a = parse_matrix(&tag("a"), &spec.a, 0)?;
            let n = a.nrows();
            let mut c_int = BTreeMap::new();
            for (&peer, rows) in &spec.c_int {
                let peer_idx = lookup(&tag("c_int"), peer)?;
                c_int.insert(peer_idx, parse_matrix(&tag("c_int"), rows, n)?);
            }
            let s = LinearSubsystem {
                id: idx,
                b: parse_matrix(&tag("b"), &spec.b, 0)?,
                d: parse_matrix(&tag("d"), &spec.d, 0)?,
                f: parse_matrix(&tag("f"), &spec.f, 0)?,
                c_ext: parse_matrix(&tag("c_ext"), &spec.c_ext, n)?,
                c_int,
                a,
            };
            if let Some(v) = s.validate().into_iter().next() {
                return Err(schema(format!(
                    "subsystem {}: {} vs {}: {}",
                    spec.id, v.first, v.second, v.detail
                )));
            }
            subsystems.push(s);
        }

        let topology = Self::resolve_topology(&file.topology, &subsystems, &lookup)?;

        let mut abstractions: Vec<Option<LoadedAbstraction>> = vec![None; ids.len()];
        for spec in &file.abstractions {
            let idx = lookup("abstraction", spec.subsystem)?;
            if abstractions[idx].is_some() {
                return Err(schema(format!(
                    "subsystem {} has more than one abstraction",
                    spec.subsystem
                )));
            }
            let s = &subsystems[idx];
            abstractions[idx] = Some(Self::resolve_abstraction(spec, s, &lookup)?);
        }

        Ok(Project {
            file,
            ids,
            subsystems,
            topology,
            abstractions,
        })
    }

    fn resolve_topology(
        spec: &TopologySpec,
        subs: &[LinearSubsystem],
        lookup: &dyn Fn(&str, usize) -> Result<usize, ProjectError>,
    ) -> Result<Topology, ProjectError> {
        let explicit = spec.edges.iter().filter(|e| e.offset.is_some()).count();
        let topo = if explicit == 0 {
            if !spec.unconnected.is_empty() {
                return Err(schema(
                    "unconnected slices require explicit edge offsets",
                ));
            }
            let pairs = spec
                .edges
                .iter()
                .map(|e| Ok((lookup("edge", e.from)?, lookup("edge", e.to)?)))
                .collect::<Result<Vec<_>, ProjectError>>()?;
            Topology::from_pairs(subs, &pairs)?
        } else if explicit == spec.edges.len() {
            let edges = spec
                .edges
                .iter()
                .map(|e| {
                    Ok(Edge {
                        from: lookup("edge", e.from)?,
                        to: lookup("edge", e.to)?,
                        offset: e.offset.unwrap_or_default(),
                    })
                })
                .collect::<Result<Vec<_>, ProjectError>>()?;
            let unconnected = spec
                .unconnected
                .iter()
                .map(|u| {
                    Ok(InputSlice {
                        subsystem: lookup("unconnected slice", u.subsystem)?,
                        offset: u.offset,
                        len: u.len,
                    })
                })
                .collect::<Result<Vec<_>, ProjectError>>()?;
            Topology {
                n: subs.len(),
                edges,
                unconnected,
            }
        } else {
            return Err(schema("either all edges carry an offset or none does"));
        };
        topo.validate(subs)?;
        Ok(topo)
    }

    fn resolve_abstraction(
        spec: &AbstractionSpec,
        s: &LinearSubsystem,
        lookup: &dyn Fn(&str, usize) -> Result<usize, ProjectError>,
    ) -> Result<LoadedAbstraction, ProjectError> {
        let tag = |m: &str| format!("abstraction of {}: {m}", spec.subsystem);
        let n = s.state_dim();
        let p = parse_matrix(&tag("p"), &spec.p, 0)?;
        let nh = p.ncols();
        let mut candidate = AbstractionCandidate::with_lifted_outputs(
            s,
            p,
            parse_matrix(&tag("a_hat"), &spec.a_hat, nh)?,
            parse_matrix(&tag("b_hat"), &spec.b_hat, 0)?,
            parse_matrix(&tag("d_hat"), &spec.d_hat, 0)?,
            parse_matrix(&tag("f_hat"), &spec.f_hat, 0)?,
        );
        if let Some(rows) = &spec.c_hat_ext {
            candidate.chat_ext = parse_matrix(&tag("c_hat_ext"), rows, nh)?;
        }
        if let Some(map) = &spec.c_hat_int {
            candidate.chat_int = map
                .iter()
                .map(|(&peer, rows)| {
                    Ok((lookup(&tag("c_hat_int"), peer)?, parse_matrix(&tag("c_hat_int"), rows, nh)?))
                })
                .collect::<Result<_, ProjectError>>()?;
        }
        if let Some(v) = candidate.validate(s).into_iter().next() {
            return Err(schema(format!(
                "abstraction of subsystem {}: {} vs {}: {}",
                spec.subsystem, v.first, v.second, v.detail
            )));
        }
        let m_k = match (&spec.m, &spec.k) {
            (Some(m), Some(k)) => Some((
                parse_matrix(&tag("m"), m, n)?,
                parse_matrix(&tag("k"), k, n)?,
            )),
            (None, None) => None,
            _ => return Err(schema(tag("m and k must be given together"))),
        };
        if let Some((m, k)) = &m_k {
            if m.shape() != (n, n) || k.shape() != (s.input_dim(), n) {
                return Err(schema(tag("m must be n×n and k m×n")));
            }
        }
        let certificate = match (&spec.certificate, &m_k) {
            (Some(c), Some((m, k))) => {
                let cert = AbstractionCertificate {
                    m: m.clone(),
                    k: k.clone(),
                    q: parse_matrix(&tag("q"), &c.q, nh)?,
                    s: parse_matrix(&tag("s"), &c.s, s.internal_input_dim())?,
                    rtilde: parse_matrix(&tag("r_tilde"), &c.r_tilde, candidate.bhat.ncols())?,
                    pi: spec.pi,
                    kappa_hat: spec.kappa_hat,
                };
                let m_in = s.input_dim();
                if cert.q.shape() != (m_in, nh)
                    || cert.s.shape() != (m_in, s.internal_input_dim())
                    || cert.rtilde.shape() != (m_in, candidate.bhat.ncols())
                {
                    return Err(schema(tag("certificate matrix shapes do not match")));
                }
                Some(cert)
            }
            (Some(_), None) => return Err(schema(tag("certificate requires m and k"))),
            (None, _) => None,
        };
        Ok(LoadedAbstraction {
            candidate,
            pi: spec.pi,
            kappa_hat: spec.kappa_hat,
            m_k,
            certificate,
        })
    }

    pub fn degree_mode(&self) -> Result<Option<DegreeMode>, ProjectError> {
        self.file
            .composition
            .as_ref()
            .and_then(|c| c.degree_mode.as_deref())
            .map(|m| m.parse::<DegreeMode>().map_err(schema))
            .transpose()
    }

    pub fn gain_decimals(&self) -> Option<u32> {
        self.file.composition.as_ref().and_then(|c| c.gain_decimals)
    }

    pub fn run(&self) -> RunSpec {
        self.file.run.clone().unwrap_or_default()
    }

    /// Initial states in index order, checked against state dimensions.
    pub fn initial_states(&self) -> Result<(Vec<DVector<f64>>, Vec<DVector<f64>>), ProjectError> {
        let run = self.run();
        let pick = |map: &BTreeMap<usize, Vec<f64>>, dims: Vec<usize>, label: &str| {
            for id in map.keys() {
                if self.index_of(*id).is_none() {
                    return Err(schema(format!("{label} initial state for unknown id {id}")));
                }
            }
            self.ids
                .iter()
                .zip(dims)
                .map(|(id, n)| match map.get(id) {
                    Some(v) if v.len() == n => Ok(DVector::from_column_slice(v)),
                    Some(v) => Err(schema(format!(
                        "{label} initial state of {id} has length {}, expected {n}",
                        v.len()
                    ))),
                    None => Ok(DVector::zeros(n)),
                })
                .collect()
        };
        let concrete = pick(
            &run.initial_concrete,
            self.subsystems.iter().map(|s| s.state_dim()).collect(),
            "concrete",
        )?;
        let abstract_dims = self
            .abstractions
            .iter()
            .map(|a| a.as_ref().map_or(0, |a| a.candidate.state_dim()))
            .collect();
        let abstracts = pick(&run.initial_abstract, abstract_dims, "abstract")?;
        Ok((concrete, abstracts))
    }
}

/// The four-subsystem ring as a project file, with ids 1..=4, the published
/// `M`, `K`, `Q`, `R̃` and the recomputed `S`.
pub fn reference_example_project(s_coef: f64) -> ProjectFile {
    let subs = example::subsystems();
    let topo = example::topology(&subs);
    let (m, k) = example::published_m_k();
    let id = |i: usize| i + 1;
    let n = example::STATE_DIM;
    ProjectFile {
        schema_version: SCHEMA_VERSION,
        notes: vec![format!(
            "S is stored as {s_coef}·1 (the value forced by D = P·D_hat − B·S); the published value is {}·1",
            example::published::S_COEF
        )],
        subsystems: subs
            .iter()
            .map(|s| SubsystemSpec {
                id: id(s.id),
                a: matrix_rows(&s.a),
                b: matrix_rows(&s.b),
                d: matrix_rows(&s.d),
                f: matrix_rows(&s.f),
                c_ext: matrix_rows(&s.c_ext),
                c_int: s.c_int.iter().map(|(&p, c)| (id(p), matrix_rows(c))).collect(),
            })
            .collect(),
        topology: TopologySpec {
            edges: topo
                .edges
                .iter()
                .map(|e| EdgeSpec {
                    from: id(e.from),
                    to: id(e.to),
                    offset: None,
                })
                .collect(),
            unconnected: Vec::new(),
        },
        abstractions: subs
            .iter()
            .map(|s| {
                let cand = example::candidate(s);
                AbstractionSpec {
                    subsystem: id(s.id),
                    p: matrix_rows(&cand.p),
                    a_hat: matrix_rows(&cand.ahat),
                    b_hat: matrix_rows(&cand.bhat),
                    d_hat: matrix_rows(&cand.dhat),
                    f_hat: matrix_rows(&cand.fhat),
                    c_hat_ext: None,
                    c_hat_int: None,
                    pi: example::PI,
                    kappa_hat: example::KAPPA_HAT,
                    m: Some(matrix_rows(&m)),
                    k: Some(matrix_rows(&k)),
                    certificate: Some(CertificateSpec {
                        q: vec![vec![1.0]; n],
                        s: vec![vec![s_coef]; n],
                        r_tilde: vec![vec![1.0]; n],
                    }),
                    constants: None,
                }
            })
            .collect(),
        composition: Some(CompositionSpec {
            degree_mode: Some(DegreeMode::InDegree.to_string()),
            gain_decimals: Some(example::published::GAIN_DECIMALS),
        }),
        run: Some(RunSpec {
            epsilon: Some(example::published::EPSILON),
            horizon: Some(example::published::HORIZON),
            trials: Some(10_000),
            seed: Some(42),
            ..Default::default()
        }),
    }
}
