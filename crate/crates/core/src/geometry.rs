//! Monte Carlo statistics of randomly placed NV and P1 centres.
//!
//! Defects are placed in a periodic cube, either uniformly in the continuum
//! or on diamond lattice sites, and all distances use the minimum-image
//! convention. Realization `i` of a run draws from a ChaCha stream keyed by
//! `(seed, i)`, so results do not depend on thread count or scheduling.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::constants::{c_ee_mhz_nm3, DIAMOND_CARBON_DENSITY_PER_NM3};
use crate::error::{Error, Result};

/// Cubic lattice constant of diamond, nm.
pub const DIAMOND_LATTICE_CONSTANT_NM: f64 = 0.356_68;

/// Nearest carbon-carbon distance in diamond, nm.
pub const CC_BOND_NM: f64 = 0.154_45;

/// Defects per nm³ at a concentration given in ppm of carbon sites.
pub fn ppm_to_density(ppm: f64) -> f64 {
    ppm * 1e-6 * DIAMOND_CARBON_DENSITY_PER_NM3
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Defect {
    Nv,
    P1,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Placement {
    #[default]
    Continuum,
    Lattice,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DefectEnsembleSpec {
    pub p1_ppm: f64,
    pub nv_ppm: f64,
    /// Edge of the periodic cube, nm. Exclusive with `target_count`.
    pub box_edge_nm: Option<f64>,
    /// Expected number of defects per realization; sets the box edge.
    pub target_count: Option<f64>,
    pub placement: Placement,
    pub seed: u64,
}

impl Default for DefectEnsembleSpec {
    fn default() -> Self {
        DefectEnsembleSpec {
            p1_ppm: 50.0,
            nv_ppm: 10.0,
            box_edge_nm: None,
            target_count: Some(1e4),
            placement: Placement::Continuum,
            seed: 0,
        }
    }
}

const MAX_EXPECTED_COUNT: f64 = 1e6;

impl DefectEnsembleSpec {
    pub fn with_concentrations(p1_ppm: f64, nv_ppm: f64) -> Self {
        DefectEnsembleSpec {
            p1_ppm,
            nv_ppm,
            ..Default::default()
        }
    }

    pub fn with_seed(self, seed: u64) -> Self {
        DefectEnsembleSpec { seed, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.p1_ppm > 0.0 && self.nv_ppm > 0.0) || !(self.p1_ppm + self.nv_ppm).is_finite() {
            return Err(Error::config("p1_ppm and nv_ppm must be positive"));
        }
        match (self.box_edge_nm, self.target_count) {
            (Some(l), None) if l > 0.0 && l.is_finite() => {}
            (None, Some(n)) if n > 0.0 && n.is_finite() => {}
            (Some(_), Some(_)) => {
                return Err(Error::config(
                    "set only one of box_edge_nm and target_count",
                ))
            }
            _ => {
                return Err(Error::config(
                    "box_edge_nm or target_count must be a positive number",
                ))
            }
        }
        let n = self.expected_count();
        if n < 2.0 {
            return Err(Error::config(format!(
                "box holds {n:.3} defects on average; at least 2 are needed"
            )));
        }
        if n > MAX_EXPECTED_COUNT {
            return Err(Error::config(format!(
                "box holds {n:.3e} defects on average; the limit is 1e6"
            )));
        }
        Ok(())
    }

    pub fn nv_density(&self) -> f64 {
        ppm_to_density(self.nv_ppm)
    }

    pub fn p1_density(&self) -> f64 {
        ppm_to_density(self.p1_ppm)
    }

    pub fn edge_nm(&self) -> f64 {
        let l = match (self.box_edge_nm, self.target_count) {
            (Some(l), _) => l,
            (None, Some(n)) => (n / (self.nv_density() + self.p1_density())).cbrt(),
            (None, None) => f64::NAN,
        };
        match self.placement {
            Placement::Continuum => l,
            Placement::Lattice => {
                (l / DIAMOND_LATTICE_CONSTANT_NM).round().max(1.0) * DIAMOND_LATTICE_CONSTANT_NM
            }
        }
    }

    pub fn expected_count(&self) -> f64 {
        (self.nv_density() + self.p1_density()) * self.edge_nm().powi(3)
    }
}

/// One realization: positions in `[0, edge)³`, nm.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ensemble {
    pub edge_nm: f64,
    pub positions: Vec<[f64; 3]>,
    pub species: Vec<Defect>,
}

impl Ensemble {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn count(&self, kind: Defect) -> usize {
        self.species.iter().filter(|&&s| s == kind).count()
    }

    pub fn indices(&self, kind: Defect) -> impl Iterator<Item = usize> + '_ {
        self.species
            .iter()
            .enumerate()
            .filter(move |(_, &s)| s == kind)
            .map(|(i, _)| i)
    }

    pub fn distance(&self, i: usize, j: usize) -> f64 {
        min_image_distance(&self.positions[i], &self.positions[j], self.edge_nm)
    }
}

pub fn min_image_distance(a: &[f64; 3], b: &[f64; 3], edge: f64) -> f64 {
    let mut s = 0.0;
    for k in 0..3 {
        let mut d = (a[k] - b[k]).abs() % edge;
        if d > 0.5 * edge {
            d = edge - d;
        }
        s += d * d;
    }
    s.sqrt()
}

fn realization_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn poisson_count(rng: &mut ChaCha8Rng, mean: f64) -> usize {
    Poisson::new(mean)
        .map(|p| p.sample(rng) as usize)
        .unwrap_or(0)
}

/// Diamond sites of one cubic cell, in units of the lattice constant.
const DIAMOND_BASIS: [[f64; 3]; 8] = [
    [0.0, 0.0, 0.0],
    [0.0, 0.5, 0.5],
    [0.5, 0.0, 0.5],
    [0.5, 0.5, 0.0],
    [0.25, 0.25, 0.25],
    [0.25, 0.75, 0.75],
    [0.75, 0.25, 0.75],
    [0.75, 0.75, 0.25],
];

/// Realization `index` of the ensemble.
pub fn sample_realization(spec: &DefectEnsembleSpec, index: u64) -> Result<Ensemble> {
    spec.validate()?;
    let edge = spec.edge_nm();
    let volume = edge.powi(3);
    let mut rng = realization_rng(spec.seed, index);
    let n_nv = poisson_count(&mut rng, spec.nv_density() * volume);
    let n_p1 = poisson_count(&mut rng, spec.p1_density() * volume);
    let mut positions = Vec::with_capacity(n_nv + n_p1);
    match spec.placement {
        Placement::Continuum => {
            for _ in 0..n_nv + n_p1 {
                positions.push([
                    rng.random::<f64>() * edge,
                    rng.random::<f64>() * edge,
                    rng.random::<f64>() * edge,
                ]);
            }
        }
        Placement::Lattice => {
            let cells = (edge / DIAMOND_LATTICE_CONSTANT_NM).round() as u64;
            let sites = 8 * cells.pow(3);
            if (n_nv + n_p1) as u64 > sites / 2 {
                return Err(Error::config(
                    "lattice box too small for the requested concentrations",
                ));
            }
            let mut taken = HashSet::with_capacity(n_nv + n_p1);
            while taken.len() < n_nv + n_p1 {
                let s = rng.random_range(0..sites);
                if taken.insert(s) {
                    let cell = s / 8;
                    let b = DIAMOND_BASIS[(s % 8) as usize];
                    let (cx, cy, cz) =
                        (cell % cells, (cell / cells) % cells, cell / (cells * cells));
                    positions.push([
                        (cx as f64 + b[0]) * DIAMOND_LATTICE_CONSTANT_NM,
                        (cy as f64 + b[1]) * DIAMOND_LATTICE_CONSTANT_NM,
                        (cz as f64 + b[2]) * DIAMOND_LATTICE_CONSTANT_NM,
                    ]);
                }
            }
        }
    }
    let mut species = vec![Defect::Nv; n_nv];
    species.extend(std::iter::repeat_n(Defect::P1, n_p1));
    Ok(Ensemble {
        edge_nm: edge,
        positions,
        species,
    })
}

/// Realization 0 of the ensemble.
pub fn sample_ensemble(spec: &DefectEnsembleSpec) -> Result<Ensemble> {
    sample_realization(spec, 0)
}

/// Periodic cell list over a subset of an ensemble's defects.
struct CellGrid<'a> {
    ens: &'a Ensemble,
    per_axis: usize,
    cell: f64,
    cells: Vec<Vec<usize>>,
}

impl<'a> CellGrid<'a> {
    fn new(ens: &'a Ensemble, members: impl Iterator<Item = usize>, cell_hint: f64) -> Self {
        let per_axis = ((ens.edge_nm / cell_hint).floor() as usize).clamp(1, 128);
        let cell = ens.edge_nm / per_axis as f64;
        let mut cells = vec![Vec::new(); per_axis.pow(3)];
        for i in members {
            cells[Self::index_of(&ens.positions[i], cell, per_axis)].push(i);
        }
        CellGrid {
            ens,
            per_axis,
            cell,
            cells,
        }
    }

    fn index_of(p: &[f64; 3], cell: f64, n: usize) -> usize {
        let c = |x: f64| ((x / cell).floor() as usize).min(n - 1);
        c(p[0]) + n * (c(p[1]) + n * c(p[2]))
    }

    /// Calls `f(j, r)` for members within `radius` of `p` (each once).
    fn for_each_within(&self, p: &[f64; 3], radius: f64, mut f: impl FnMut(usize, f64)) {
        let n = self.per_axis as i64;
        let reach = (radius / self.cell).ceil() as i64;
        if 2 * reach + 1 >= n {
            for bucket in &self.cells {
                for &j in bucket {
                    let r = min_image_distance(p, &self.ens.positions[j], self.ens.edge_nm);
                    if r <= radius {
                        f(j, r);
                    }
                }
            }
            return;
        }
        let c = |x: f64| ((x / self.cell).floor() as i64).min(n - 1);
        let (cx, cy, cz) = (c(p[0]), c(p[1]), c(p[2]));
        for dz in -reach..=reach {
            for dy in -reach..=reach {
                for dx in -reach..=reach {
                    let idx = (cx + dx).rem_euclid(n)
                        + n * ((cy + dy).rem_euclid(n) + n * (cz + dz).rem_euclid(n));
                    for &j in &self.cells[idx as usize] {
                        let r = min_image_distance(p, &self.ens.positions[j], self.ens.edge_nm);
                        if r <= radius {
                            f(j, r);
                        }
                    }
                }
            }
        }
    }

    /// Nearest member of kind `kind` to `p`, ties to the lower index.
    fn nearest_of(&self, p: &[f64; 3], kind: Defect, start_radius: f64) -> Option<(usize, f64)> {
        let mut radius = start_radius.max(self.cell);
        loop {
            let mut best: Option<(usize, f64)> = None;
            self.for_each_within(p, radius, |j, r| {
                if self.ens.species[j] == kind
                    && best.is_none_or(|(bj, br)| r < br || (r == br && j < bj))
                {
                    best = Some((j, r));
                }
            });
            if best.is_some() || radius >= self.ens.edge_nm {
                return best;
            }
            radius *= 2.0;
        }
    }
}

/// Histogram with bins `[lo_k, hi_k)` and a density normalized to unit area.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub bin_lo: Vec<f64>,
    pub bin_hi: Vec<f64>,
    pub density: Vec<f64>,
}

impl Histogram {
    fn from_edges(edges: Vec<f64>, values: impl Iterator<Item = f64>) -> Self {
        let nb = edges.len() - 1;
        let mut counts = vec![0usize; nb];
        let mut total = 0usize;
        for v in values {
            total += 1;
            let k = edges.partition_point(|&e| e <= v);
            if k >= 1 && k <= nb {
                counts[k - 1] += 1;
            }
        }
        let density = counts
            .iter()
            .enumerate()
            .map(|(k, &c)| c as f64 / (total.max(1) as f64 * (edges[k + 1] - edges[k])))
            .collect();
        Histogram {
            bin_lo: edges[..nb].to_vec(),
            bin_hi: edges[1..].to_vec(),
            density,
        }
    }

    pub fn linear(values: &[f64], width: f64) -> Self {
        let hi = values.iter().cloned().fold(0.0, f64::max);
        let nb = ((hi / width).floor() as usize) + 1;
        Histogram::from_edges(
            (0..=nb).map(|k| k as f64 * width).collect(),
            values.iter().copied(),
        )
    }

    /// Bins of `decade_fraction` in log10, covering all positive values.
    pub fn logarithmic(values: &[f64], decade_fraction: f64) -> Self {
        let pos = values.iter().copied().filter(|v| *v > 0.0);
        let (lo, hi) = pos
            .clone()
            .fold((f64::INFINITY, 0.0f64), |(a, b), v| (a.min(v), b.max(v)));
        if !lo.is_finite() {
            return Histogram::from_edges(vec![0.0, 1.0], std::iter::empty());
        }
        let k0 = (lo.log10() / decade_fraction).floor() as i64;
        let k1 = (hi.log10() / decade_fraction).floor() as i64 + 1;
        let edges = (k0..=k1)
            .map(|k| 10f64.powf(k as f64 * decade_fraction))
            .collect();
        Histogram::from_edges(edges, pos)
    }

    pub fn to_csv(&self, unit: &str) -> String {
        let mut out = format!("bin_lo_{unit},bin_hi_{unit},density\n");
        for ((a, b), d) in self.bin_lo.iter().zip(&self.bin_hi).zip(&self.density) {
            out.push_str(&format!("{a:.6},{b:.6},{d:.9e}\n"));
        }
        out
    }
}

/// Realizations evaluated per parallel batch.
const BATCH: u64 = 16;

/// Applies `per` to successive realizations until `need` items are gathered.
fn gather<T: Send>(
    spec: &DefectEnsembleSpec,
    need: usize,
    per: impl Fn(&Ensemble) -> Vec<T> + Sync,
) -> Result<Vec<T>> {
    spec.validate()?;
    let mut out = Vec::with_capacity(need);
    let mut next = 0u64;
    while out.len() < need {
        let batch: Vec<Vec<T>> = (next..next + BATCH)
            .into_par_iter()
            .map(|i| sample_realization(spec, i).map(|e| per(&e)))
            .collect::<Result<_>>()?;
        next += BATCH;
        for items in batch {
            out.extend(items);
        }
        if next > 1_000_000 {
            return Err(Error::config(
                "ensemble yields too few samples; enlarge the box",
            ));
        }
    }
    out.truncate(need);
    Ok(out)
}

fn mean_spacing(density: f64) -> f64 {
    density.powf(-1.0 / 3.0)
}

/// Distance from every NV to its nearest P1 in successive realizations.
pub fn nn_distances(spec: &DefectEnsembleSpec, n_samples: usize) -> Result<Vec<f64>> {
    let hint = mean_spacing(spec.p1_density());
    gather(spec, n_samples, |e| {
        let grid = CellGrid::new(e, e.indices(Defect::P1), hint);
        e.indices(Defect::Nv)
            .filter_map(|i| {
                grid.nearest_of(&e.positions[i], Defect::P1, hint)
                    .map(|(_, r)| r)
            })
            .collect()
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistanceStats {
    pub n: usize,
    pub mean_nm: f64,
    pub stderr_nm: f64,
    pub histogram: Histogram,
}

pub const DISTANCE_BIN_NM: f64 = 0.1;

pub fn nn_distance_stats(spec: &DefectEnsembleSpec, n_samples: usize) -> Result<DistanceStats> {
    if n_samples < 2 {
        return Err(Error::config("need at least 2 samples"));
    }
    let d = nn_distances(spec, n_samples)?;
    let (mean, stderr) = mean_stderr(&d);
    Ok(DistanceStats {
        n: d.len(),
        mean_nm: mean,
        stderr_nm: stderr,
        histogram: Histogram::linear(&d, DISTANCE_BIN_NM),
    })
}

fn mean_stderr(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Point-dipole coupling magnitude `C_ee / r³` with the angular factor
/// dropped and `r` floored at `floor_nm`.
pub fn coupling_magnitude_mhz(r_nm: f64, floor_nm: f64) -> f64 {
    c_ee_mhz_nm3() / r_nm.max(floor_nm).powi(3)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CouplingStats {
    pub n: usize,
    pub mean_mhz: f64,
    pub median_mhz: f64,
    /// Coupling of a pair at the mean nearest-neighbour distance.
    pub at_mean_distance_mhz: f64,
    pub floor_nm: f64,
    pub histogram: Histogram,
}

/// Couplings to the nearest P1 of each NV. Distances below `floor_nm`
/// (default: one C-C bond) are clamped, since the continuum places pairs
/// arbitrarily close and the mean of `1/r³` otherwise diverges.
pub fn coupling_stats(
    spec: &DefectEnsembleSpec,
    n_samples: usize,
    floor_nm: Option<f64>,
) -> Result<CouplingStats> {
    let floor = floor_nm.unwrap_or(CC_BOND_NM);
    if !(floor >= 0.0) {
        return Err(Error::config("distance floor must be non-negative"));
    }
    let d = nn_distances(spec, n_samples)?;
    let mut j: Vec<f64> = d
        .iter()
        .map(|&r| coupling_magnitude_mhz(r, floor))
        .collect();
    let (mean, _) = mean_stderr(&j);
    let (mean_d, _) = mean_stderr(&d);
    let histogram = Histogram::logarithmic(&j, 0.1);
    j.sort_by(f64::total_cmp);
    let median = if j.len() % 2 == 1 {
        j[j.len() / 2]
    } else {
        0.5 * (j[j.len() / 2 - 1] + j[j.len() / 2])
    };
    Ok(CouplingStats {
        n: j.len(),
        mean_mhz: mean,
        median_mhz: median,
        at_mean_distance_mhz: coupling_magnitude_mhz(mean_d, 0.0),
        floor_nm: floor,
        histogram,
    })
}

/// Which member pairs can pull a spin into a cluster.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum PairCoupling {
    /// Any two electron spins (NV-P1, P1-P1, NV-NV).
    #[default]
    All,
    /// Only NV-P1 pairs.
    NvP1,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterRule {
    /// A spin joins when its coupling to every member exceeds this fraction
    /// of the seed NV-P1 coupling.
    pub threshold_fraction: f64,
    pub pairs: PairCoupling,
    /// Distance floor for coupling magnitudes, nm.
    pub floor_nm: f64,
}

impl Default for ClusterRule {
    fn default() -> Self {
        ClusterRule {
            threshold_fraction: 0.5,
            pairs: PairCoupling::All,
            floor_nm: CC_BOND_NM,
        }
    }
}

impl ClusterRule {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold_fraction > 0.0 && self.threshold_fraction <= 1.0) {
            return Err(Error::config("threshold_fraction must lie in (0, 1]"));
        }
        if !(self.floor_nm >= 0.0) {
            return Err(Error::config("floor_nm must be non-negative"));
        }
        Ok(())
    }
}

/// Size of the cluster seeded by NV `nv`; `None` when the box has no P1.
pub fn cluster_size(ens: &Ensemble, nv: usize, rule: &ClusterRule) -> Option<usize> {
    let grid_all = CellGrid::new(ens, 0..ens.len(), 1.0);
    cluster_size_with(ens, &grid_all, nv, rule)
}

fn cluster_size_with(
    ens: &Ensemble,
    grid: &CellGrid,
    nv: usize,
    rule: &ClusterRule,
) -> Option<usize> {
    // seed: the NV and its strongest-coupled (closest) P1
    let (p1, r_d) = grid.nearest_of(&ens.positions[nv], Defect::P1, grid.cell)?;
    let j_d = coupling_magnitude_mhz(r_d, rule.floor_nm);
    let threshold = rule.threshold_fraction * j_d;
    let coupling = |a: usize, b: usize| coupling_magnitude_mhz(ens.distance(a, b), rule.floor_nm);
    let counts =
        |a: usize, b: usize| rule.pairs == PairCoupling::All || ens.species[a] != ens.species[b];

    // every member couples to the seed NV above threshold (directly or, for
    // NV-P1-only pairs, through the seed P1), so candidates lie within r_t
    // of one of the seed spins
    let r_t = (c_ee_mhz_nm3() / threshold).cbrt();
    let mut candidates: Vec<usize> = Vec::new();
    for s in [nv, p1] {
        grid.for_each_within(&ens.positions[s], r_t, |j, _| {
            if j != nv && j != p1 {
                candidates.push(j);
            }
        });
    }
    candidates.sort_unstable();
    candidates.dedup();

    let mut members = vec![nv, p1];
    loop {
        // admissible: above threshold with every member it is paired with,
        // and no NV-P1 coupling stronger than the seed pair
        let best = candidates
            .iter()
            .filter(|j| !members.contains(j))
            .filter_map(|&j| {
                let mut weakest = f64::INFINITY;
                for &m in &members {
                    let c = coupling(j, m);
                    if ens.species[j] != ens.species[m] && c > j_d {
                        return None;
                    }
                    if counts(j, m) {
                        if c <= threshold {
                            return None;
                        }
                        weakest = weakest.min(c);
                    }
                }
                Some((j, weakest))
            })
            .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
        match best {
            Some((j, _)) => members.push(j),
            None => return Some(members.len()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterPmf {
    /// `(n, probability)` for n = 2, 3, ...
    pub pmf: Vec<(usize, f64)>,
    pub mean: f64,
    pub n_clusters: usize,
}

impl ClusterPmf {
    pub fn probability(&self, n: usize) -> f64 {
        self.pmf.iter().find(|(k, _)| *k == n).map_or(0.0, |x| x.1)
    }

    pub fn mode(&self) -> usize {
        self.pmf
            .iter()
            .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)))
            .map_or(0, |x| x.0)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("n,probability\n");
        for (n, p) in &self.pmf {
            out.push_str(&format!("{n},{p:.9e}\n"));
        }
        out
    }
}

/// Cluster-size distribution over `n_clusters` NV-seeded clusters, taken
/// from successive realizations (every NV of a realization seeds one).
pub fn cluster_sizes(
    spec: &DefectEnsembleSpec,
    rule: &ClusterRule,
    n_clusters: usize,
) -> Result<Vec<usize>> {
    rule.validate()?;
    let hint = mean_spacing(spec.p1_density() + spec.nv_density());
    gather(spec, n_clusters, |e| {
        let grid = CellGrid::new(e, 0..e.len(), hint);
        e.indices(Defect::Nv)
            .filter_map(|nv| cluster_size_with(e, &grid, nv, rule))
            .collect()
    })
}

pub fn cluster_distribution(
    spec: &DefectEnsembleSpec,
    rule: &ClusterRule,
    n_clusters: usize,
) -> Result<ClusterPmf> {
    if n_clusters == 0 {
        return Err(Error::config("need at least one cluster"));
    }
    let sizes = cluster_sizes(spec, rule, n_clusters)?;
    let max = sizes.iter().copied().max().unwrap_or(2);
    let mut counts = vec![0usize; max + 1];
    for &s in &sizes {
        counts[s] += 1;
    }
    let total = sizes.len() as f64;
    Ok(ClusterPmf {
        pmf: (2..=max).map(|n| (n, counts[n] as f64 / total)).collect(),
        mean: sizes.iter().sum::<usize>() as f64 / total,
        n_clusters: sizes.len(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistanceCurve {
    pub ppm: Vec<f64>,
    pub mean_d_nm: Vec<f64>,
    pub stderr_nm: Vec<f64>,
}

impl DistanceCurve {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("ppm,mean_d_nm,stderr_nm\n");
        for ((p, d), s) in self.ppm.iter().zip(&self.mean_d_nm).zip(&self.stderr_nm) {
            out.push_str(&format!("{p},{d:.9e},{s:.9e}\n"));
        }
        out
    }
}

/// Mean NV-nearest-P1 distance per P1 concentration at a fixed P1:NV ratio.
pub fn mean_distance_vs_concentration(
    base: &DefectEnsembleSpec,
    p1_ppm: &[f64],
    ratio: f64,
    n_samples: usize,
) -> Result<DistanceCurve> {
    if p1_ppm.is_empty()
        || p1_ppm.iter().any(|p| !(*p > 0.0))
        || p1_ppm.windows(2).any(|w| !(w[1] > w[0]))
    {
        return Err(Error::config(
            "concentrations must be positive and ascending",
        ));
    }
    if !(ratio > 0.0) {
        return Err(Error::config("P1:NV ratio must be positive"));
    }
    let mut curve = DistanceCurve {
        ppm: p1_ppm.to_vec(),
        mean_d_nm: vec![],
        stderr_nm: vec![],
    };
    for &p in p1_ppm {
        let spec = DefectEnsembleSpec {
            p1_ppm: p,
            nv_ppm: p / ratio,
            ..base.clone()
        };
        let s = nn_distance_stats(&spec, n_samples)?;
        curve.mean_d_nm.push(s.mean_nm);
        curve.stderr_nm.push(s.stderr_nm);
    }
    Ok(curve)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_conversion() {
        assert!((ppm_to_density(1.0) - 1.763e-4).abs() < 1e-12);
    }

    #[test]
    fn minimum_image_wraps() {
        assert!((min_image_distance(&[0.1, 0.0, 0.0], &[9.9, 0.0, 0.0], 10.0) - 0.2).abs() < 1e-12);
        assert!((min_image_distance(&[1.0, 1.0, 1.0], &[2.0, 1.0, 1.0], 10.0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn coupling_at_reference_distance() {
        assert!((coupling_magnitude_mhz(2.35, 0.0) - 4.0).abs() < 0.02);
    }

    #[test]
    fn spec_validation() {
        let mut s = DefectEnsembleSpec::default();
        s.box_edge_nm = Some(10.0);
        assert!(s.validate().is_err());
        s.target_count = None;
        s.box_edge_nm = Some(1.0);
        assert!(s.validate().is_err(), "box too small");
        s.box_edge_nm = Some(30.0);
        assert!(s.validate().is_ok());
        assert!(DefectEnsembleSpec::with_concentrations(0.0, 1.0)
            .validate()
            .is_err());
    }

    #[test]
    fn lattice_sites_are_on_the_lattice() {
        let spec = DefectEnsembleSpec {
            placement: Placement::Lattice,
            target_count: Some(500.0),
            p1_ppm: 5000.0,
            nv_ppm: 1000.0,
            ..Default::default()
        };
        let e = sample_ensemble(&spec).unwrap();
        for p in &e.positions {
            for x in p {
                let q = x / DIAMOND_LATTICE_CONSTANT_NM * 4.0;
                assert!((q - q.round()).abs() < 1e-9);
            }
        }
        for i in 0..e.len().min(50) {
            for j in 0..i {
                assert!(e.distance(i, j) > CC_BOND_NM - 1e-9);
            }
        }
    }

    #[test]
    fn cell_grid_agrees_with_brute_force() {
        let spec = DefectEnsembleSpec {
            target_count: Some(2000.0),
            ..Default::default()
        };
        let e = sample_ensemble(&spec).unwrap();
        let grid = CellGrid::new(&e, e.indices(Defect::P1), 1.0);
        for i in e.indices(Defect::Nv).take(50) {
            let brute = e
                .indices(Defect::P1)
                .map(|j| e.distance(i, j))
                .fold(f64::INFINITY, f64::min);
            let (_, r) = grid.nearest_of(&e.positions[i], Defect::P1, 0.5).unwrap();
            assert_eq!(r, brute);
        }
    }

    #[test]
    fn histogram_is_normalized() {
        let h = Histogram::linear(&[0.05, 0.15, 0.15, 0.31], 0.1);
        let area: f64 = h
            .density
            .iter()
            .zip(h.bin_lo.iter().zip(&h.bin_hi))
            .map(|(d, (a, b))| d * (b - a))
            .sum();
        assert!((area - 1.0).abs() < 1e-12);
        let l = Histogram::logarithmic(&[0.5, 3.0, 40.0], 0.1);
        let area: f64 = l
            .density
            .iter()
            .zip(l.bin_lo.iter().zip(&l.bin_hi))
            .map(|(d, (a, b))| d * (b - a))
            .sum();
        assert!((area - 1.0).abs() < 1e-9);
    }
}
