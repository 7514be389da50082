//! Area adjacency graphs and the scaled intrinsic CAR structure used by the
//! BYM2 spatial prior.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use log::warn;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{AreaId, GeographyVersion};
use crate::linalg::psd_pseudo_inverse;

/// Relative eigenvalue cutoff separating the Laplacian null space.
const NULL_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdjacencyGraph {
    pub geography: GeographyVersion,
    nodes: Vec<AreaId>,
    /// Undirected edges as sorted index pairs `(i, j)` with `i < j`.
    edges: Vec<(usize, usize)>,
    components: Vec<Vec<usize>>,
}

impl AdjacencyGraph {
    pub fn new(
        nodes: Vec<AreaId>,
        edges: &[(AreaId, AreaId)],
        geography: GeographyVersion,
    ) -> Result<Self> {
        if nodes.is_empty() {
            return Err(Error::Graph(format!("{geography}: empty node list")));
        }
        let mut index = BTreeMap::new();
        for (i, n) in nodes.iter().enumerate() {
            if index.insert(n.clone(), i).is_some() {
                return Err(Error::Graph(format!("{geography}: duplicate node {n}")));
            }
        }
        let lookup = |a: &AreaId| {
            index
                .get(a)
                .copied()
                .ok_or_else(|| Error::Graph(format!("{geography}: edge references unknown node {a}")))
        };
        let mut set = BTreeSet::new();
        for (a, b) in edges {
            let (i, j) = (lookup(a)?, lookup(b)?);
            if i == j {
                return Err(Error::Graph(format!("{geography}: self-loop at {a}")));
            }
            if !set.insert((i.min(j), i.max(j))) {
                warn!("{geography}: duplicate edge {a}-{b} ignored");
            }
        }
        let edges: Vec<(usize, usize)> = set.into_iter().collect();
        let components = connected_components(nodes.len(), &edges);
        Ok(AdjacencyGraph {
            geography,
            nodes,
            edges,
            components,
        })
    }

    pub fn nodes(&self) -> &[AreaId] {
        &self.nodes
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    /// Connected components, each sorted, ordered by smallest member.
    pub fn components(&self) -> &[Vec<usize>] {
        &self.components
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn position(&self, area: &AreaId) -> Option<usize> {
        self.nodes.iter().position(|n| n == area)
    }

    pub fn degree(&self) -> Vec<usize> {
        let mut d = vec![0; self.len()];
        for &(i, j) in &self.edges {
            d[i] += 1;
            d[j] += 1;
        }
        d
    }

    /// Unscaled ICAR precision D − A.
    pub fn laplacian(&self) -> DMatrix<f64> {
        let n = self.len();
        let mut l = DMatrix::zeros(n, n);
        for &(i, j) in &self.edges {
            l[(i, j)] -= 1.0;
            l[(j, i)] -= 1.0;
            l[(i, i)] += 1.0;
            l[(j, j)] += 1.0;
        }
        l
    }
}

fn connected_components(n: usize, edges: &[(usize, usize)]) -> Vec<Vec<usize>> {
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    for &(i, j) in edges {
        let (a, b) = (find(&mut parent, i), find(&mut parent, j));
        if a != b {
            parent[a.max(b)] = a.min(b);
        }
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..n {
        let r = find(&mut parent, i);
        groups.entry(r).or_default().push(i);
    }
    let mut comps: Vec<Vec<usize>> = groups.into_values().collect();
    comps.sort_by_key(|c| c[0]);
    comps
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IcarComponent {
    pub nodes: Vec<usize>,
    /// Geometric mean of the unscaled marginal variances; `None` for an
    /// isolated node, which carries no structured effect.
    pub scale: Option<f64>,
}

/// ICAR precision rescaled so that the typical (geometric-mean) marginal
/// variance under per-component sum-to-zero constraints is one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaledIcar {
    precision: Vec<f64>,
    n: usize,
    pub components: Vec<IcarComponent>,
    /// Nonzero eigenvalues of the scaled precision.
    pub eigenvalues: Vec<f64>,
}

impl ScaledIcar {
    pub fn precision(&self) -> DMatrix<f64> {
        DMatrix::from_column_slice(self.n, self.n, &self.precision)
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn null_space_dim(&self) -> usize {
        self.components.len()
    }

    /// κ of the graph when it has exactly one component with edges.
    pub fn scale_factor(&self) -> Option<f64> {
        let mut scales = self.components.iter().filter_map(|c| c.scale);
        match (scales.next(), scales.next()) {
            (Some(k), None) => Some(k),
            _ => None,
        }
    }

    pub fn is_iid_only(&self, node: usize) -> bool {
        self.components
            .iter()
            .any(|c| c.scale.is_none() && c.nodes == [node])
    }

    /// Diagonal of the constrained generalized inverse of the scaled
    /// precision (1 by construction in geometric mean per component;
    /// isolated nodes report `NaN`).
    pub fn marginal_variances(&self) -> Vec<f64> {
        let q = self.precision();
        let mut out = vec![f64::NAN; self.n];
        for c in &self.components {
            if c.scale.is_none() {
                continue;
            }
            let sub = q.select_rows(&c.nodes).select_columns(&c.nodes);
            let (pinv, _) = psd_pseudo_inverse(&sub, NULL_TOL);
            for (k, &i) in c.nodes.iter().enumerate() {
                out[i] = pinv[(k, k)];
            }
        }
        out
    }

    /// log of the product of nonzero eigenvalues of the scaled precision.
    pub fn log_pseudo_determinant(&self) -> f64 {
        self.eigenvalues.iter().map(|v| v.ln()).sum()
    }
}

/// Scales the ICAR precision of `graph` component by component.
pub fn scale_icar(graph: &AdjacencyGraph) -> ScaledIcar {
    let n = graph.len();
    let lap = graph.laplacian();
    let mut q = DMatrix::zeros(n, n);
    let mut components = Vec::with_capacity(graph.components().len());
    let mut eigenvalues = Vec::new();
    for comp in graph.components() {
        if comp.len() == 1 {
            components.push(IcarComponent {
                nodes: comp.clone(),
                scale: None,
            });
            continue;
        }
        let sub = lap.select_rows(comp).select_columns(comp);
        let (pinv, nonzero) = psd_pseudo_inverse(&sub, NULL_TOL);
        let mean_log = comp
            .iter()
            .enumerate()
            .map(|(k, _)| pinv[(k, k)].ln())
            .sum::<f64>()
            / comp.len() as f64;
        let kappa = mean_log.exp();
        for (a, &i) in comp.iter().enumerate() {
            for (b, &j) in comp.iter().enumerate() {
                q[(i, j)] = kappa * sub[(a, b)];
            }
        }
        eigenvalues.extend(nonzero.iter().map(|l| kappa * l));
        components.push(IcarComponent {
            nodes: comp.clone(),
            scale: Some(kappa),
        });
    }
    eigenvalues.sort_by(|a, b| a.partial_cmp(b).unwrap());
    ScaledIcar {
        precision: q.as_slice().to_vec(),
        n,
        components,
        eigenvalues,
    }
}

/// Reads `nodes.csv` (geography_version, puma) and `adjacency.csv`
/// (geography_version, puma_a, puma_b) into one graph per geography.
pub fn read_graphs<R1: Read, R2: Read>(
    nodes: R1,
    adjacency: Option<R2>,
) -> Result<BTreeMap<GeographyVersion, AdjacencyGraph>> {
    let mut node_lists: BTreeMap<GeographyVersion, Vec<AreaId>> = BTreeMap::new();
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(nodes);
    for (i, rec) in rdr.deserialize::<NodeRow>().enumerate() {
        let rec = rec.map_err(|e| Error::row("nodes.csv", i + 2, e.to_string()))?;
        let geo = rec.geography_version.parse()?;
        node_lists.entry(geo).or_default().push(AreaId(rec.puma));
    }
    let mut edge_lists: BTreeMap<GeographyVersion, Vec<(AreaId, AreaId)>> = BTreeMap::new();
    if let Some(adj) = adjacency {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(adj);
        for (i, rec) in rdr.deserialize::<EdgeRow>().enumerate() {
            let rec = rec.map_err(|e| Error::row("adjacency.csv", i + 2, e.to_string()))?;
            let geo = rec.geography_version.parse()?;
            edge_lists
                .entry(geo)
                .or_default()
                .push((AreaId(rec.puma_a), AreaId(rec.puma_b)));
        }
    }
    if let Some(geo) = edge_lists.keys().find(|g| !node_lists.contains_key(g)) {
        return Err(Error::Graph(format!("edges given for {geo} but no nodes")));
    }
    node_lists
        .into_iter()
        .map(|(geo, nodes)| {
            let edges = edge_lists.remove(&geo).unwrap_or_default();
            AdjacencyGraph::new(nodes, &edges, geo).map(|g| (geo, g))
        })
        .collect()
}

pub fn load_graphs(
    nodes: impl AsRef<Path>,
    adjacency: Option<&Path>,
) -> Result<BTreeMap<GeographyVersion, AdjacencyGraph>> {
    let nodes = nodes.as_ref();
    let nf = File::open(nodes).map_err(|e| Error::io(nodes, e))?;
    let af = match adjacency {
        Some(p) => Some(File::open(p).map_err(|e| Error::io(p, e))?),
        None => None,
    };
    read_graphs(nf, af)
}

pub fn write_graphs<W1: Write, W2: Write>(
    graphs: &BTreeMap<GeographyVersion, AdjacencyGraph>,
    nodes: W1,
    adjacency: W2,
) -> Result<()> {
    let mut nw = csv::Writer::from_writer(nodes);
    nw.write_record(["geography_version", "puma"])?;
    let mut aw = csv::Writer::from_writer(adjacency);
    aw.write_record(["geography_version", "puma_a", "puma_b"])?;
    for (geo, g) in graphs {
        for n in g.nodes() {
            nw.write_record([geo.token(), n.as_str()])?;
        }
        for &(i, j) in g.edges() {
            aw.write_record([geo.token(), g.nodes[i].as_str(), g.nodes[j].as_str()])?;
        }
    }
    nw.flush().map_err(|e| Error::io("<nodes output>", e))?;
    aw.flush().map_err(|e| Error::io("<adjacency output>", e))?;
    Ok(())
}

#[derive(Deserialize)]
struct NodeRow {
    geography_version: String,
    puma: String,
}

#[derive(Deserialize)]
struct EdgeRow {
    geography_version: String,
    puma_a: String,
    puma_b: String,
}
