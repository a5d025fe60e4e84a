//! Spectra versus field: sorted eigenlevels, level diagrams with branch
//! tracking, avoided-crossing search and the NV/P1 matching field.

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::constants::GAMMA_E_MHZ_PER_MT;
use crate::error::{Error, Result};
use crate::presets::bare_nv;
use crate::spinsys::{
    hermiticity_error, max_abs, HamiltonianParts, HermitianOperator, SpinSystemSpec,
};
use crate::C64;

/// Coarsest scan step accepted by [`find_crossings`], mT.
pub const MAX_SCAN_STEP_MT: f64 = 0.01;
/// Field tolerance of the refined crossing positions, mT.
pub const CROSSING_FIELD_TOL_MT: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct Eigensystem {
    /// Ascending eigenvalues, MHz.
    pub values: Vec<f64>,
    /// Orthonormal eigenvectors as columns, in the order of `values`.
    pub vectors: DMatrix<C64>,
}

/// Unsorted eigendecomposition of a Hermitian matrix.
pub(crate) fn eigh(m: &DMatrix<C64>) -> (Vec<f64>, DMatrix<C64>) {
    let se = SymmetricEigen::new(m.clone());
    (se.eigenvalues.iter().copied().collect(), se.eigenvectors)
}

pub(crate) fn eigenvalues_sorted(m: &DMatrix<C64>) -> Vec<f64> {
    let mut v: Vec<f64> = m.clone().symmetric_eigenvalues().iter().copied().collect();
    v.sort_by(f64::total_cmp);
    v
}

/// Ascending eigenvalues with phase-fixed eigenvectors: the first component
/// of each vector with magnitude above `1e-12` is made real and positive.
pub fn eigenlevels(h: &HermitianOperator) -> Result<Eigensystem> {
    let m = h.matrix();
    let scale = max_abs(m).max(f64::MIN_POSITIVE);
    if hermiticity_error(m) > 1e-9 * scale {
        return Err(Error::Contract(
            "eigenlevels requires a Hermitian operator".into(),
        ));
    }
    let (vals, vecs) = eigh(m);
    let mut order: Vec<usize> = (0..vals.len()).collect();
    order.sort_by(|&a, &b| vals[a].total_cmp(&vals[b]).then(a.cmp(&b)));
    let n = vals.len();
    let mut vectors = DMatrix::<C64>::zeros(n, n);
    let mut values = Vec::with_capacity(n);
    for (col, &k) in order.iter().enumerate() {
        values.push(vals[k]);
        let v = vecs.column(k);
        let phase = v
            .iter()
            .find(|z| z.norm() > 1e-12)
            .map(|z| z.conj() / z.norm())
            .unwrap_or(C64::new(1.0, 0.0));
        vectors.set_column(col, &(v * phase));
    }
    Ok(Eigensystem { values, vectors })
}

/// Energies versus field, sorted per field point.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LevelDiagram {
    pub fields_mt: Vec<f64>,
    /// `energies[i][l]`: level `l` at field `i`, MHz.
    pub energies: Vec<Vec<f64>>,
    #[serde(skip)]
    pub vectors: Option<Vec<DMatrix<C64>>>,
    pub spec_hash: String,
}

impl LevelDiagram {
    pub fn dim(&self) -> usize {
        self.energies.first().map_or(0, Vec::len)
    }

    /// `B_mT, level_0_MHz, ...` table.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("B_mT");
        for l in 0..self.dim() {
            out.push_str(&format!(",level_{l}_MHz"));
        }
        out.push('\n');
        for (b, row) in self.fields_mt.iter().zip(&self.energies) {
            out.push_str(&format!("{b:.6}"));
            for e in row {
                out.push_str(&format!(",{e:.9}"));
            }
            out.push('\n');
        }
        out
    }

    /// Branch labels from maximal eigenvector overlap between adjacent fields.
    ///
    /// `result[i][l]` is the branch carried by sorted level `l` at field `i`;
    /// branches are named after their sorted index at the first field.
    /// Returns `None` when the diagram was built without eigenvectors.
    pub fn track_branches(&self) -> Option<Vec<Vec<usize>>> {
        let vecs = self.vectors.as_ref()?;
        let n = self.dim();
        let mut labels = vec![(0..n).collect::<Vec<_>>()];
        for w in vecs.windows(2) {
            let overlap = w[0].adjoint() * &w[1];
            let prev = labels.last().expect("non-empty");
            let mut pairs: Vec<(f64, usize, usize)> = (0..n)
                .flat_map(|a| (0..n).map(move |b| (a, b)))
                .map(|(a, b)| (overlap[(a, b)].norm_sqr(), a, b))
                .collect();
            pairs.sort_by(|x, y| y.0.total_cmp(&x.0).then((x.1, x.2).cmp(&(y.1, y.2))));
            let mut next = vec![usize::MAX; n];
            let mut used = vec![false; n];
            for (_, a, b) in pairs {
                if !used[a] && next[b] == usize::MAX {
                    used[a] = true;
                    next[b] = prev[a];
                }
            }
            labels.push(next);
        }
        Some(labels)
    }

    /// Smallest difference between levels `lo` and `hi` over the diagram.
    pub fn min_gap(&self, lo: usize, hi: usize) -> f64 {
        self.energies
            .iter()
            .map(|r| r[hi] - r[lo])
            .fold(f64::INFINITY, f64::min)
    }
}

fn field_grid(range: (f64, f64), n_points: usize) -> Result<Vec<f64>> {
    let (lo, hi) = range;
    if n_points < 2 {
        return Err(Error::config(
            "a level diagram needs at least two field points",
        ));
    }
    if !(hi > lo) || !lo.is_finite() || !hi.is_finite() || lo < 0.0 {
        return Err(Error::config(format!(
            "field range [{lo}, {hi}] mT is empty or invalid"
        )));
    }
    let step = (hi - lo) / (n_points - 1) as f64;
    Ok((0..n_points).map(|i| lo + step * i as f64).collect())
}

pub fn level_diagram(
    spec: &SpinSystemSpec,
    range: (f64, f64),
    n_points: usize,
    keep_vectors: bool,
) -> Result<LevelDiagram> {
    let fields = field_grid(range, n_points)?;
    let parts = spec.hamiltonian_parts()?;
    let solved: Vec<Eigensystem> = fields
        .par_iter()
        .map(|&b| eigenlevels(&parts.at(b)))
        .collect::<Result<_>>()?;
    let energies = solved.iter().map(|e| e.values.clone()).collect();
    let vectors = keep_vectors.then(|| solved.into_iter().map(|e| e.vectors).collect());
    Ok(LevelDiagram {
        fields_mt: fields,
        energies,
        vectors,
        spec_hash: spec.hash(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Crossing {
    pub field_mt: f64,
    pub gap_mhz: f64,
    pub level_lo: usize,
    pub level_hi: usize,
}

/// Avoided crossings found in a field window.
///
/// `delta0`/`delta1` are filled by [`lac_gaps`]: `delta1` is the smallest
/// gap of the inner pair of a four-branch manifold and `delta0` the smallest
/// gap within its lower or upper pair.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CrossingReport {
    pub entries: Vec<Crossing>,
    pub delta0: Option<Crossing>,
    pub delta1: Option<Crossing>,
}

impl CrossingReport {
    /// `B_c_mT, gap_MHz, level_lo, level_hi` table.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("B_c_mT,gap_MHz,level_lo,level_hi\n");
        for c in &self.entries {
            out.push_str(&format!(
                "{:.6},{:.9},{},{}\n",
                c.field_mt, c.gap_mhz, c.level_lo, c.level_hi
            ));
        }
        out
    }

    fn smallest(&self, pairs: &[(usize, usize)]) -> Option<Crossing> {
        self.entries
            .iter()
            .filter(|c| pairs.contains(&(c.level_lo, c.level_hi)))
            .min_by(|a, b| a.gap_mhz.total_cmp(&b.gap_mhz))
            .cloned()
    }
}

#[derive(Clone, Debug)]
pub struct CrossingSearch {
    pub range_mt: (f64, f64),
    pub scan_step_mt: f64,
    /// Level pairs to examine; all adjacent pairs when `None`.
    pub level_pairs: Option<Vec<(usize, usize)>>,
}

impl CrossingSearch {
    pub fn new(range_mt: (f64, f64)) -> Self {
        CrossingSearch {
            range_mt,
            scan_step_mt: 0.002,
            level_pairs: None,
        }
    }

    pub fn pairs(mut self, pairs: Vec<(usize, usize)>) -> Self {
        self.level_pairs = Some(pairs);
        self
    }
}

fn gap_at(parts: &HamiltonianParts, b: f64, lo: usize, hi: usize) -> f64 {
    let v = eigenvalues_sorted(&parts.at(b).into_matrix());
    v[hi] - v[lo]
}

/// Golden-section minimization on `[a, b]` to absolute tolerance `tol`.
pub(crate) fn golden_min(mut a: f64, mut b: f64, tol: f64, f: impl Fn(f64) -> f64) -> (f64, f64) {
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - r * (b - a);
    let mut d = a + r * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while (b - a).abs() > tol {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - r * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + r * (b - a);
            fd = f(d);
        }
    }
    let x = 0.5 * (a + b);
    (x, f(x))
}

/// Local minima of level gaps in the window, refined to [`CROSSING_FIELD_TOL_MT`].
/// An empty report is a valid outcome.
pub fn find_crossings(spec: &SpinSystemSpec, search: &CrossingSearch) -> Result<CrossingReport> {
    if !(search.scan_step_mt > 0.0 && search.scan_step_mt <= MAX_SCAN_STEP_MT) {
        return Err(Error::config(format!(
            "scan step {} mT must be in (0, {MAX_SCAN_STEP_MT}] mT",
            search.scan_step_mt
        )));
    }
    let (lo, hi) = search.range_mt;
    let n = (((hi - lo) / search.scan_step_mt).ceil() as usize).max(2) + 1;
    let fields = field_grid(search.range_mt, n)?;
    let parts = spec.hamiltonian_parts()?;
    let dim = parts.dim();
    let levels: Vec<Vec<f64>> = fields
        .par_iter()
        .map(|&b| eigenvalues_sorted(&parts.at(b).into_matrix()))
        .collect();
    let pairs = search
        .level_pairs
        .clone()
        .unwrap_or_else(|| (0..dim.saturating_sub(1)).map(|l| (l, l + 1)).collect());
    for &(a, b) in &pairs {
        if a >= b || b >= dim {
            return Err(Error::config(format!(
                "level pair ({a}, {b}) invalid for dimension {dim}"
            )));
        }
    }
    let mut candidates = Vec::new();
    for &(a, b) in &pairs {
        let g: Vec<f64> = levels.iter().map(|r| r[b] - r[a]).collect();
        for i in 1..g.len() - 1 {
            if g[i] < g[i - 1] && g[i] <= g[i + 1] {
                candidates.push((i, a, b));
            }
        }
    }
    let mut entries: Vec<Crossing> = candidates
        .par_iter()
        .map(|&(i, a, b)| {
            let (x, gap) = golden_min(fields[i - 1], fields[i + 1], CROSSING_FIELD_TOL_MT, |x| {
                gap_at(&parts, x, a, b)
            });
            Crossing {
                field_mt: x,
                gap_mhz: gap.max(0.0),
                level_lo: a,
                level_hi: b,
            }
        })
        .collect();
    entries.sort_by(|x, y| {
        x.field_mt
            .total_cmp(&y.field_mt)
            .then((x.level_lo, x.level_hi).cmp(&(y.level_lo, y.level_hi)))
    });
    Ok(CrossingReport {
        entries,
        delta0: None,
        delta1: None,
    })
}

/// Crossing report for the four-branch manifold starting at sorted level
/// `lowest`, with the inner (`delta1`) and outer (`delta0`) gaps labeled.
pub fn lac_gaps(
    spec: &SpinSystemSpec,
    range_mt: (f64, f64),
    lowest: usize,
) -> Result<CrossingReport> {
    let k = lowest;
    let search =
        CrossingSearch::new(range_mt).pairs(vec![(k, k + 1), (k + 1, k + 2), (k + 2, k + 3)]);
    let mut report = find_crossings(spec, &search)?;
    report.delta1 = report.smallest(&[(k + 1, k + 2)]);
    report.delta0 = report.smallest(&[(k, k + 1), (k + 2, k + 3)]);
    Ok(report)
}

/// Index of the lowest level of the NV |0,+1/2> / |-1,-1/2> manifold, i.e.
/// the number of levels carrying NV |0> with the P1 in |-1/2>.
pub fn trio_manifold_start(spec: &SpinSystemSpec) -> usize {
    let p1_dims: usize = spec.dims().iter().skip(2).product();
    p1_dims
}

#[derive(Clone, Debug)]
pub struct MatchingOptions {
    pub bracket_mt: (f64, f64),
    pub scan_step_mt: f64,
    pub tol_mt: f64,
    /// Added to the P1 transition energy, e.g. `A m_K` for a hyperfine-shifted line.
    pub p1_offset_mhz: f64,
}

impl Default for MatchingOptions {
    fn default() -> Self {
        MatchingOptions {
            bracket_mt: (1.0, 100.0),
            scan_step_mt: 0.5,
            tol_mt: 1e-7,
            p1_offset_mhz: 0.0,
        }
    }
}

/// Maximum polar angle accepted by [`matching_field`], degrees.
pub const MATCHING_MAX_THETA_DEG: f64 = 50.0;

/// Field where the NV |0> -> |-1> transition equals the P1 splitting.
///
/// Uses the bare NV (3 levels) and bare P1 electron; the two lowest NV
/// levels stay adiabatically connected to |0> and |-1> below the ground-state
/// anti-crossing, so sorted order identifies them.
pub fn matching_field(theta_deg: f64, opts: &MatchingOptions) -> Result<f64> {
    matching_root(theta_deg, opts, &|b| {
        GAMMA_E_MHZ_PER_MT * b + opts.p1_offset_mhz
    })
}

/// Matching field for the P1 line with host-nitrogen projection `m_k`, using
/// the exact levels of `p1_host` (P1 electron at site 0, 14N at site 1).
///
/// Unlike [`matching_field`] with a secular offset, this includes the
/// second-order shifts from the transverse hyperfine terms.
pub fn matching_field_with_host(
    p1_host: &SpinSystemSpec,
    m_k: i32,
    opts: &MatchingOptions,
) -> Result<f64> {
    if p1_host.dims() != [2, 3] || !(-1..=1).contains(&m_k) {
        return Err(Error::config(
            "P1 host system must be a spin-1/2 and a spin-1, with m_K in {-1, 0, 1}",
        ));
    }
    let parts = p1_host.hamiltonian_parts()?;
    let k = (1 - m_k) as usize;
    let (up, down) = (k, 3 + k);
    let transition = move |b: f64| {
        let (vals, vecs) = eigh(&parts.at(b).into_matrix());
        let pick = |idx: usize| {
            (0..vals.len())
                .max_by(|&x, &y| {
                    vecs[(idx, x)]
                        .norm_sqr()
                        .total_cmp(&vecs[(idx, y)].norm_sqr())
                })
                .map(|j| vals[j])
                .unwrap_or(f64::NAN)
        };
        pick(up) - pick(down) + opts.p1_offset_mhz
    };
    matching_root(p1_host.theta_deg, opts, &transition)
}

fn matching_root(
    theta_deg: f64,
    opts: &MatchingOptions,
    p1_transition: &dyn Fn(f64) -> f64,
) -> Result<f64> {
    if !(0.0..=MATCHING_MAX_THETA_DEG).contains(&theta_deg) {
        return Err(Error::config(format!(
            "matching field is defined for theta in [0, {MATCHING_MAX_THETA_DEG}] deg, got {theta_deg}"
        )));
    }
    let parts = bare_nv(theta_deg).hamiltonian_parts()?;
    let f = |b: f64| {
        let e = eigenvalues_sorted(&parts.at(b).into_matrix());
        (e[1] - e[0]) - p1_transition(b)
    };
    let (lo, hi) = opts.bracket_mt;
    let no_root = Error::NoMatchingField {
        theta_deg,
        lo_mt: lo,
        hi_mt: hi,
    };
    let mut a = lo;
    let mut fa = f(a);
    while a < hi {
        let b = (a + opts.scan_step_mt).min(hi);
        let fb = f(b);
        if fa == 0.0 {
            return Ok(a);
        }
        if fa.signum() != fb.signum() {
            return Ok(bisect(a, b, fa, opts.tol_mt, &f));
        }
        a = b;
        fa = fb;
    }
    Err(no_root)
}

fn bisect(mut a: f64, mut b: f64, mut fa: f64, tol: f64, f: &impl Fn(f64) -> f64) -> f64 {
    while b - a > tol {
        let m = 0.5 * (a + b);
        let fm = f(m);
        if fm == 0.0 {
            return m;
        }
        if fm.signum() == fa.signum() {
            a = m;
            fa = fm;
        } else {
            b = m;
        }
    }
    0.5 * (a + b)
}
