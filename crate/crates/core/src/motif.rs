//! Detection of sign-changing features in static-field DNP spectra.
//!
//! A motif is a pair of adjacent lobes of opposite sign; its centre is the
//! zero crossing of the smoothed signal between them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MotifOptions {
    /// Gaussian smoothing width, mT.
    pub smoothing_mt: f64,
    /// Lobes below this fraction of the largest smoothed |P| are ignored.
    pub threshold_fraction: f64,
    /// Largest lobe-to-lobe distance within one motif, mT.
    pub max_lobe_separation_mt: f64,
}

impl Default for MotifOptions {
    fn default() -> Self {
        MotifOptions {
            smoothing_mt: 0.01,
            threshold_fraction: 0.2,
            max_lobe_separation_mt: 0.3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lobe {
    pub field_mt: f64,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Motif {
    pub center_mt: f64,
    /// Lobe at the lower field.
    pub lower: Lobe,
    /// Lobe at the higher field.
    pub upper: Lobe,
    /// `|S(c+x) + S(c-x)| / (|S(c+x)| + |S(c-x)|)` summed over the mirrored
    /// window of the smoothed signal; 0 for a perfectly odd motif.
    pub mirror_asymmetry: f64,
}

/// Gaussian-weighted moving average on a (possibly non-uniform) grid.
pub fn smooth(fields: &[f64], values: &[f64], sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return values.to_vec();
    }
    let reach = 4.0 * sigma;
    let mut lo = 0;
    fields
        .iter()
        .map(|&b| {
            while fields[lo] < b - reach {
                lo += 1;
            }
            let (mut num, mut den) = (0.0, 0.0);
            for (&f, &v) in fields[lo..].iter().zip(&values[lo..]) {
                if f > b + reach {
                    break;
                }
                let w = (-0.5 * ((f - b) / sigma).powi(2)).exp();
                num += w * v;
                den += w;
            }
            num / den
        })
        .collect()
}

fn interp(fields: &[f64], values: &[f64], b: f64) -> Option<f64> {
    let i = fields.partition_point(|&f| f < b);
    if i == 0 || i >= fields.len() {
        return (i < fields.len() && fields[i] == b).then(|| values[i]);
    }
    let t = (b - fields[i - 1]) / (fields[i] - fields[i - 1]);
    Some(values[i - 1] + t * (values[i] - values[i - 1]))
}

/// Finds the antisymmetric motifs of a field scan. `fields` must be strictly
/// increasing.
pub fn find_motifs(fields: &[f64], values: &[f64], opts: &MotifOptions) -> Result<Vec<Motif>> {
    if fields.len() != values.len() || fields.len() < 3 {
        return Err(Error::config(
            "motif search needs at least 3 (field, value) points",
        ));
    }
    if fields.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::config(
            "motif search needs strictly increasing fields",
        ));
    }
    if !(opts.threshold_fraction > 0.0 && opts.threshold_fraction < 1.0) {
        return Err(Error::config("threshold_fraction must lie in (0, 1)"));
    }
    let s = smooth(fields, values, opts.smoothing_mt);
    let peak = s.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak == 0.0 {
        return Ok(vec![]);
    }
    let floor = opts.threshold_fraction * peak;

    // local extrema of |s| above the floor, same-sign neighbours merged
    let mut lobes: Vec<(usize, f64)> = Vec::new();
    for i in 1..s.len() - 1 {
        let a = s[i].abs();
        if a < floor || a < s[i - 1].abs() || a < s[i + 1].abs() {
            continue;
        }
        match lobes.last_mut() {
            Some(last) if same_lobe(&s, last.0, i, floor) => {
                if a > last.1.abs() {
                    *last = (i, s[i]);
                }
            }
            _ => lobes.push((i, s[i])),
        }
    }

    let mut motifs = Vec::new();
    let mut k = 0;
    while k + 1 < lobes.len() {
        let (i, vi) = lobes[k];
        let (j, vj) = lobes[k + 1];
        if vi.signum() == vj.signum() || fields[j] - fields[i] > opts.max_lobe_separation_mt {
            k += 1;
            continue;
        }
        let center = zero_crossing(fields, &s, i, j);
        let half = (center - fields[i]).max(fields[j] - center) * 2.0;
        motifs.push(Motif {
            center_mt: center,
            lower: Lobe {
                field_mt: fields[i],
                value: vi,
            },
            upper: Lobe {
                field_mt: fields[j],
                value: vj,
            },
            mirror_asymmetry: mirror_asymmetry(fields, &s, center, half),
        });
        k += 2;
    }
    Ok(motifs)
}

/// Two extrema belong to one lobe when the signal between them keeps its
/// sign and stays above the floor.
fn same_lobe(s: &[f64], i: usize, j: usize, floor: f64) -> bool {
    let sign = s[i].signum();
    s[i..=j]
        .iter()
        .all(|v| v.signum() == sign && v.abs() >= floor)
}

fn zero_crossing(fields: &[f64], s: &[f64], i: usize, j: usize) -> f64 {
    // the crossing closest to the midpoint of the two lobes
    let mid = 0.5 * (fields[i] + fields[j]);
    (i..j)
        .filter(|&m| s[m] == 0.0 || s[m].signum() != s[m + 1].signum())
        .map(|m| {
            if s[m] == 0.0 {
                fields[m]
            } else {
                fields[m] + (fields[m + 1] - fields[m]) * s[m] / (s[m] - s[m + 1])
            }
        })
        .min_by(|a, b| (a - mid).abs().total_cmp(&(b - mid).abs()))
        .unwrap_or(mid)
}

fn mirror_asymmetry(fields: &[f64], s: &[f64], center: f64, half_width: f64) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (&b, &v) in fields.iter().zip(s) {
        let x = b - center;
        if x <= 0.0 || x > half_width {
            continue;
        }
        if let Some(m) = interp(fields, s, center - x) {
            num += (v + m).abs();
            den += v.abs() + m.abs();
        }
    }
    if den > 0.0 {
        num / den
    } else {
        f64::NAN
    }
}
