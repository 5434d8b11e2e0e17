//! Covering nerves, unitary flat bundles and the per-mode coboundary solver.
//!
//! At mode `n` the unknowns are one complex number per chart and every
//! oriented edge `j -> k` with multiplier `t_kj = e^{iφ_kj}` contributes the
//! equation `t_kj^n a_k - a_j = b_kj`. The solver returns the minimum-norm
//! least-squares solution together with its defect, and its `∞ -> ∞`
//! operator norm is the measured small-divisor amplification `A_n`.

use std::collections::{HashMap, HashSet, VecDeque};
use std::f64::consts::TAU;

use faer::Mat;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::circle::phase_difference;
use crate::error::{Error, Result};

/// Relative smallest singular value below which a mode counts as resonant.
pub const RESONANCE_REL: f64 = 1e-12;

/// Default relative solvability tolerance for [`solve_mode`].
pub const SOLVE_REL_TOL: f64 = 1e-10;

/// Tolerance on the 1-cocycle condition of the bundle phases.
pub const COCYCLE_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub from: usize,
    pub to: usize,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Nerve {
    charts: Vec<String>,
    edges: Vec<Edge>,
    triples: Vec<[usize; 3]>,
}

impl Nerve {
    pub fn new(charts: Vec<String>, edges: Vec<Edge>, triples: Vec<[usize; 3]>) -> Result<Self> {
        if charts.is_empty() {
            return Err(Error::InvalidNerve("no charts".into()));
        }
        let mut seen = HashSet::new();
        for c in &charts {
            if !seen.insert(c.as_str()) {
                return Err(Error::InvalidNerve(format!("duplicate chart id {c:?}")));
            }
        }
        let mut labels = HashSet::new();
        for e in &edges {
            if e.from >= charts.len() || e.to >= charts.len() {
                return Err(Error::InvalidNerve(format!(
                    "edge {:?} references a missing chart",
                    e.label
                )));
            }
            if !labels.insert((e.from, e.to, e.label.as_str())) {
                return Err(Error::InvalidNerve(format!(
                    "label {:?} repeated on {} -> {}",
                    e.label, charts[e.from], charts[e.to]
                )));
            }
        }
        for t in &triples {
            if t.iter().any(|&i| i >= charts.len()) {
                return Err(Error::InvalidNerve(format!("triple {t:?} references a missing chart")));
            }
        }
        let nerve = Self {
            charts,
            edges,
            triples,
        };
        if !nerve.is_connected() {
            return Err(Error::InvalidNerve("underlying graph is not connected".into()));
        }
        Ok(nerve)
    }

    /// Builds a nerve from chart ids, resolving edge endpoints by id.
    pub fn from_ids(
        charts: &[&str],
        edges: &[(&str, &str, &str)],
        triples: &[[&str; 3]],
    ) -> Result<Self> {
        let charts: Vec<String> = charts.iter().map(|s| s.to_string()).collect();
        let index = |id: &str| {
            charts
                .iter()
                .position(|c| c == id)
                .ok_or_else(|| Error::InvalidNerve(format!("unknown chart {id:?}")))
        };
        let edges = edges
            .iter()
            .map(|(f, t, l)| {
                Ok(Edge {
                    from: index(f)?,
                    to: index(t)?,
                    label: l.to_string(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let triples = triples
            .iter()
            .map(|t| Ok([index(t[0])?, index(t[1])?, index(t[2])?]))
            .collect::<Result<Vec<_>>>()?;
        Self::new(charts, edges, triples)
    }

    pub fn charts(&self) -> &[String] {
        &self.charts
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn triples(&self) -> &[[usize; 3]] {
        &self.triples
    }

    pub fn chart_index(&self, id: &str) -> Option<usize> {
        self.charts.iter().position(|c| c == id)
    }

    /// Human-readable edge name, e.g. `U0->U1[+]`.
    pub fn edge_name(&self, e: usize) -> String {
        let edge = &self.edges[e];
        format!(
            "{}->{}[{}]",
            self.charts[edge.from], self.charts[edge.to], edge.label
        )
    }

    fn is_connected(&self) -> bool {
        let mut adj = vec![Vec::new(); self.charts.len()];
        for e in &self.edges {
            adj[e.from].push(e.to);
            adj[e.to].push(e.from);
        }
        let mut seen = vec![false; self.charts.len()];
        let mut queue = VecDeque::from([0]);
        seen[0] = true;
        while let Some(v) = queue.pop_front() {
            for &u in &adj[v] {
                if !seen[u] {
                    seen[u] = true;
                    queue.push_back(u);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }

    /// Fundamental cycles of a BFS spanning tree rooted at chart 0, one per non-tree edge.
    pub fn fundamental_loops(&self) -> Vec<Vec<EdgeStep>> {
        let c = self.charts.len();
        // parent[v] = (parent chart, step from parent to v)
        let mut parent: Vec<Option<(usize, EdgeStep)>> = vec![None; c];
        let mut depth = vec![usize::MAX; c];
        let mut tree_edges = HashSet::new();
        depth[0] = 0;
        let mut queue = VecDeque::from([0usize]);
        while let Some(v) = queue.pop_front() {
            for (i, e) in self.edges.iter().enumerate() {
                let (u, forward) = if e.from == v {
                    (e.to, true)
                } else if e.to == v {
                    (e.from, false)
                } else {
                    continue;
                };
                if depth[u] == usize::MAX {
                    depth[u] = depth[v] + 1;
                    parent[u] = Some((v, EdgeStep { edge: i, forward }));
                    tree_edges.insert(i);
                    queue.push_back(u);
                }
            }
        }
        let path_from_root = |mut v: usize| {
            let mut steps = Vec::new();
            while let Some((p, step)) = parent[v] {
                steps.push(step);
                v = p;
            }
            steps.reverse();
            steps
        };
        let mut loops = Vec::new();
        for (i, e) in self.edges.iter().enumerate() {
            if tree_edges.contains(&i) {
                continue;
            }
            let mut walk = path_from_root(e.from);
            walk.push(EdgeStep {
                edge: i,
                forward: true,
            });
            let back: Vec<EdgeStep> = path_from_root(e.to)
                .into_iter()
                .rev()
                .map(|s| EdgeStep {
                    edge: s.edge,
                    forward: !s.forward,
                })
                .collect();
            walk.extend(back);
            loops.push(walk);
        }
        loops
    }

    pub fn describe_walk(&self, walk: &[EdgeStep]) -> String {
        if walk.is_empty() {
            return "(empty)".into();
        }
        let mut out = String::new();
        for (i, s) in walk.iter().enumerate() {
            let e = &self.edges[s.edge];
            let (a, b) = if s.forward { (e.from, e.to) } else { (e.to, e.from) };
            if i == 0 {
                out.push_str(&self.charts[a]);
            }
            if s.forward {
                out.push_str(&format!(" -[{}]-> {}", e.label, self.charts[b]));
            } else {
                out.push_str(&format!(" <-[{}]- {}", e.label, self.charts[b]));
            }
        }
        out
    }
}

/// One traversal of an edge in a walk; `forward` follows the edge orientation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EdgeStep {
    pub edge: usize,
    pub forward: bool,
}

/// A nerve with one unit-modulus multiplier `t_kj = e^{iφ_kj}` per edge.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitaryFlatBundle {
    nerve: Nerve,
    phases: Vec<f64>,
}

impl UnitaryFlatBundle {
    pub fn new(nerve: Nerve, phases: Vec<f64>) -> Result<Self> {
        if phases.len() != nerve.edges.len() {
            return Err(Error::InvalidNerve(format!(
                "{} phases for {} edges",
                phases.len(),
                nerve.edges.len()
            )));
        }
        if phases.iter().any(|p| !p.is_finite()) {
            return Err(Error::InvalidNerve("non-finite edge phase".into()));
        }
        let bundle = Self {
            nerve,
            phases: phases.into_iter().map(|p| p.rem_euclid(TAU)).collect(),
        };
        bundle.check_cocycle(COCYCLE_TOL)?;
        Ok(bundle)
    }

    pub fn nerve(&self) -> &Nerve {
        &self.nerve
    }

    pub fn phases(&self) -> &[f64] {
        &self.phases
    }

    pub fn multiplier(&self, e: usize, n: i64) -> Complex64 {
        Complex64::from_polar(1.0, self.phases[e] * n as f64)
    }

    /// Phase of the transition from chart `from` to chart `to`, using the
    /// first matching edge in either orientation.
    fn pair_phase(&self, from: usize, to: usize) -> Option<f64> {
        self.nerve.edges.iter().enumerate().find_map(|(i, e)| {
            if e.from == from && e.to == to {
                Some(self.phases[i])
            } else if e.from == to && e.to == from {
                Some(-self.phases[i])
            } else {
                None
            }
        })
    }

    /// Checks `φ_kj + φ_ji - φ_ki ≡ 0 mod 2π` on every listed triple `[i, j, k]`.
    pub fn check_cocycle(&self, tol: f64) -> Result<()> {
        for t in &self.nerve.triples {
            let [i, j, k] = *t;
            let get = |a: usize, b: usize| {
                self.pair_phase(a, b).ok_or_else(|| {
                    Error::InvalidNerve(format!(
                        "triple {:?} lacks an edge between {} and {}",
                        t, self.nerve.charts[a], self.nerve.charts[b]
                    ))
                })
            };
            let defect = phase_difference(get(j, k)? + get(i, j)?, get(i, k)?);
            if defect.abs() > tol {
                return Err(Error::InvalidNerve(format!(
                    "cocycle condition fails on triple {t:?} by {defect:e}"
                )));
            }
        }
        Ok(())
    }

    /// Loop with the smallest n-fold holonomy distance to 0 mod 2π.
    pub fn most_resonant_loop(&self, n: i64) -> Option<(Vec<EdgeStep>, f64)> {
        self.nerve
            .fundamental_loops()
            .into_iter()
            .map(|walk| {
                let h = holonomy_unchecked(self, &walk);
                let dist = phase_difference(h * n as f64, 0.0).abs();
                (walk, dist)
            })
            .min_by(|a, b| a.1.total_cmp(&b.1))
    }
}

/// Signed sum of edge phases along a closed walk, reduced to `[0, 2π)`.
pub fn holonomy(bundle: &UnitaryFlatBundle, walk: &[EdgeStep]) -> Result<f64> {
    let edges = bundle.nerve.edges();
    if let Some(first) = walk.first() {
        let endpoints = |s: &EdgeStep| {
            let e = edges
                .get(s.edge)
                .ok_or_else(|| Error::Path(format!("edge index {} out of range", s.edge)))?;
            Ok::<_, Error>(if s.forward { (e.from, e.to) } else { (e.to, e.from) })
        };
        let start = endpoints(first)?.0;
        let mut at = start;
        for s in walk {
            let (a, b) = endpoints(s)?;
            if a != at {
                return Err(Error::Path(format!(
                    "step over edge {} starts at {} but the walk is at {}",
                    s.edge, bundle.nerve.charts[a], bundle.nerve.charts[at]
                )));
            }
            at = b;
        }
        if at != start {
            return Err(Error::Path(format!(
                "walk ends at {} instead of {}",
                bundle.nerve.charts[at], bundle.nerve.charts[start]
            )));
        }
    }
    Ok(holonomy_unchecked(bundle, walk).rem_euclid(TAU))
}

fn holonomy_unchecked(bundle: &UnitaryFlatBundle, walk: &[EdgeStep]) -> f64 {
    walk.iter()
        .map(|s| {
            if s.forward {
                bundle.phases[s.edge]
            } else {
                -bundle.phases[s.edge]
            }
        })
        .fold(0.0, |acc, p| acc + p)
}

/// Dense `edges × charts` matrix of the mode-`n` coboundary operator.
pub fn mode_matrix(bundle: &UnitaryFlatBundle, n: i64) -> Mat<Complex64> {
    let nerve = bundle.nerve();
    let mut a = Mat::<Complex64>::zeros(nerve.edges.len(), nerve.charts.len());
    for (r, e) in nerve.edges.iter().enumerate() {
        a[(r, e.to)] += bundle.multiplier(r, n);
        a[(r, e.from)] -= Complex64::new(1.0, 0.0);
    }
    a
}

fn mul_vec(m: &Mat<Complex64>, x: &[Complex64]) -> Vec<Complex64> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).fold(Complex64::new(0.0, 0.0), |acc, j| acc + m[(i, j)] * x[j]))
        .collect()
}

/// Minimum-norm solution operator of one mode.
#[derive(Debug, Clone)]
pub struct ModeOperator {
    pub n: i64,
    matrix: Mat<Complex64>,
    pinv: Mat<Complex64>,
    pub kernel_dim: usize,
    pub singular_min: f64,
    pub singular_max: f64,
}

impl ModeOperator {
    pub fn new(bundle: &UnitaryFlatBundle, n: i64) -> Result<Self> {
        if n == 0 {
            return Err(Error::Domain("mode 0 is not solved".into()));
        }
        let matrix = mode_matrix(bundle, n);
        let (rows, cols) = (matrix.nrows(), matrix.ncols());
        if rows == 0 {
            let pinv = Mat::<Complex64>::zeros(cols, 0);
            return Ok(Self {
                n,
                matrix,
                pinv,
                kernel_dim: cols,
                singular_min: 0.0,
                singular_max: 0.0,
            });
        }
        let svd = matrix
            .thin_svd()
            .map_err(|e| Error::Domain(format!("SVD of the mode-{n} operator failed: {e:?}")))?;
        let sv: Vec<f64> = svd.S().column_vector().iter().map(|z| z.re).collect();
        let smax = sv.iter().cloned().fold(0.0, f64::max);
        let smin = sv.iter().cloned().fold(f64::INFINITY, f64::min);
        // Entries are unit-modulus multipliers, so the natural scale is at least 1;
        // a 1x1 system would otherwise never look resonant relative to itself.
        let scale = smax.max(1.0);
        if smin < RESONANCE_REL * scale {
            let (loop_desc, holonomy) = match bundle.most_resonant_loop(n) {
                Some((walk, _)) => {
                    let h = holonomy_unchecked(bundle, &walk);
                    (
                        bundle.nerve.describe_walk(&walk),
                        (h * n as f64).rem_euclid(TAU),
                    )
                }
                None => ("(none)".into(), 0.0),
            };
            return Err(Error::ResonantMode {
                mode: n,
                loop_desc,
                holonomy,
            });
        }
        let threshold = RESONANCE_REL * scale;
        let (u, v) = (svd.U(), svd.V());
        let pinv = Mat::from_fn(cols, rows, |i, j| {
            sv.iter()
                .enumerate()
                .filter(|(_, s)| **s > threshold)
                .fold(Complex64::new(0.0, 0.0), |acc, (l, s)| acc + v[(i, l)] * u[(j, l)].conj() / *s)
        });
        Ok(Self {
            n,
            matrix,
            pinv,
            kernel_dim: cols.saturating_sub(rows.min(cols)),
            singular_min: smin,
            singular_max: smax,
        })
    }

    /// `∞ -> ∞` operator norm of the solution map: the amplification `A_n`.
    pub fn amplification(&self) -> f64 {
        (0..self.pinv.nrows())
            .map(|i| (0..self.pinv.ncols()).fold(0.0, |acc, j| acc + self.pinv[(i, j)].norm()))
            .fold(0.0, f64::max)
    }

    pub fn solve(&self, b: &[Complex64], tolerance: f64) -> Result<ModeCochainSolution> {
        if b.len() != self.matrix.nrows() {
            return Err(Error::Domain(format!(
                "{} right-hand sides for {} edges",
                b.len(),
                self.matrix.nrows()
            )));
        }
        let a = mul_vec(&self.pinv, b);
        let residual = mul_vec(&self.matrix, &a)
            .iter()
            .zip(b)
            .map(|(x, y)| (x - y).norm())
            .fold(0.0, f64::max);
        let bmax = b.iter().map(|z| z.norm()).fold(0.0, f64::max);
        let amax = a.iter().map(|z| z.norm()).fold(0.0, f64::max);
        if residual > tolerance {
            return Err(Error::CoboundaryFailure {
                mode: self.n,
                residual,
                tolerance,
            });
        }
        Ok(ModeCochainSolution {
            n: self.n,
            a,
            residual,
            amplification: if bmax > 0.0 { amax / bmax } else { 0.0 },
            resonance_flag: self.kernel_dim > 0,
        })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ModeCochainSolution {
    pub n: i64,
    /// One coefficient per chart.
    pub a: Vec<Complex64>,
    /// `∞`-norm of the equation defects.
    pub residual: f64,
    /// `max_j |a_j| / max_e |b_e|` for this right-hand side.
    pub amplification: f64,
    /// Set when the coboundary operator has a nontrivial kernel and the
    /// minimum-norm representative was chosen.
    pub resonance_flag: bool,
}

/// Solves mode `n` with the default solvability tolerance `1e-10 · max|b|`.
pub fn solve_mode(bundle: &UnitaryFlatBundle, n: i64, b: &[Complex64]) -> Result<ModeCochainSolution> {
    let bmax = b.iter().map(|z| z.norm()).fold(0.0, f64::max);
    ModeOperator::new(bundle, n)?.solve(b, SOLVE_REL_TOL * bmax)
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct ModeAmplification {
    pub n: i64,
    pub amplification: f64,
}

/// `A_n` for `1 <= |n| <= max_mode`, failing on the first resonant mode.
pub fn amplification_spectrum(bundle: &UnitaryFlatBundle, max_mode: usize) -> Result<Vec<ModeAmplification>> {
    let mut out = Vec::with_capacity(2 * max_mode);
    for n in signed_modes(max_mode) {
        let op = ModeOperator::new(bundle, n)?;
        out.push(ModeAmplification {
            n,
            amplification: op.amplification(),
        });
    }
    Ok(out)
}

/// As [`amplification_spectrum`], but resonant modes are collected instead of failing.
pub fn amplification_spectrum_partial(
    bundle: &UnitaryFlatBundle,
    max_mode: usize,
) -> Result<(Vec<ModeAmplification>, Vec<i64>)> {
    let mut out = Vec::with_capacity(2 * max_mode);
    let mut resonant = Vec::new();
    for n in signed_modes(max_mode) {
        match ModeOperator::new(bundle, n) {
            Ok(op) => out.push(ModeAmplification {
                n,
                amplification: op.amplification(),
            }),
            Err(Error::ResonantMode { .. }) => resonant.push(n),
            Err(e) => return Err(e),
        }
    }
    Ok((out, resonant))
}

/// `-N, ..., -1, 1, ..., N`.
pub fn signed_modes(max_mode: usize) -> impl Iterator<Item = i64> {
    let n = max_mode as i64;
    (-n..=n).filter(|k| *k != 0)
}

#[derive(Debug, Clone, Serialize)]
pub struct ModeCheck {
    pub n: i64,
    pub amplification: f64,
    pub bound: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct DiophantineFit {
    pub mu: f64,
    pub c0: f64,
    pub argmax: i64,
    pub modes: Vec<ModeCheck>,
    /// Growth at the top of the spectrum outpaces every power law the fit could absorb.
    pub super_polynomial: bool,
}

/// `C0 = max_n A_n / |n|^{μ-1}` with the per-mode check `A_n <= C0 |n|^{μ-1}`.
pub fn fit_diophantine(spectrum: &[ModeAmplification], mu: f64) -> Result<DiophantineFit> {
    if spectrum.is_empty() {
        return Err(Error::Domain("empty amplification spectrum".into()));
    }
    if !(mu > 1.0) {
        return Err(Error::Domain(format!("mu = {mu} must exceed 1")));
    }
    let weight = |n: i64| (n.unsigned_abs() as f64).powf(mu - 1.0);
    let (argmax, c0) = spectrum
        .iter()
        .map(|m| (m.n, m.amplification / weight(m.n)))
        .fold((0i64, f64::NEG_INFINITY), |best, cur| {
            if cur.1 > best.1 {
                cur
            } else {
                best
            }
        });
    let modes = spectrum
        .iter()
        .map(|m| {
            let bound = c0 * weight(m.n);
            ModeCheck {
                n: m.n,
                amplification: m.amplification,
                bound,
                pass: m.amplification <= bound * (1.0 + 1e-12),
            }
        })
        .collect();
    Ok(DiophantineFit {
        mu,
        c0,
        argmax,
        modes,
        super_polynomial: super_polynomial(spectrum, argmax, mu),
    })
}

fn super_polynomial(spectrum: &[ModeAmplification], argmax: i64, mu: f64) -> bool {
    let mut by_mode: HashMap<u64, f64> = HashMap::new();
    for m in spectrum {
        let e = by_mode.entry(m.n.unsigned_abs()).or_insert(0.0);
        *e = e.max(m.amplification);
    }
    let top = *by_mode.keys().max().unwrap_or(&0);
    if top < 4 || argmax.unsigned_abs() != top {
        return false;
    }
    let half = top / 2;
    match (by_mode.get(&top), by_mode.get(&half)) {
        (Some(&hi), Some(&lo)) if hi > 0.0 && lo > 0.0 => {
            let slope = (hi / lo).ln() / (top as f64 / half as f64).ln();
            slope > mu + 1.0
        }
        _ => false,
    }
}
