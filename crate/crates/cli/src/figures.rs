//! Bundled figure configurations.

use std::path::Path;

use crate::config::parse_config;
use crate::error::{CliError, CliResult};
use crate::run::{run, RunOutput};

pub struct Figure {
    pub name: &'static str,
    /// `(part, config text)`; outputs are named `<figure>_<part>.csv`.
    pub parts: &'static [(&'static str, &'static str)],
}

pub const FIGURES: &[Figure] = &[
    Figure {
        name: "fig1c",
        parts: &[
            ("coupling", include_str!("../figures/fig1c_coupling.toml")),
            (
                "nn-distance",
                include_str!("../figures/fig1c_nn-distance.toml"),
            ),
        ],
    },
    Figure {
        name: "fig1e",
        parts: &[
            ("down", include_str!("../figures/fig1e_down.toml")),
            ("up", include_str!("../figures/fig1e_up.toml")),
        ],
    },
    Figure {
        name: "fig1f",
        parts: &[("clusters", include_str!("../figures/fig1f_clusters.toml"))],
    },
    Figure {
        name: "fig3b",
        parts: &[(
            "fraction-scan",
            include_str!("../figures/fig3b_fraction-scan.toml"),
        )],
    },
    Figure {
        name: "fig3c-fit",
        parts: &[("fit", include_str!("../figures/fig3c-fit_fit.toml"))],
    },
    Figure {
        name: "fig3d",
        parts: &[
            ("hf-0.4MHz", include_str!("../figures/fig3d_hf-0.4MHz.toml")),
            ("hf-1.0MHz", include_str!("../figures/fig3d_hf-1.0MHz.toml")),
            ("hf-2.0MHz", include_str!("../figures/fig3d_hf-2.0MHz.toml")),
            ("hf-5.0MHz", include_str!("../figures/fig3d_hf-5.0MHz.toml")),
        ],
    },
    Figure {
        name: "fig4c",
        parts: &[("spectrum", include_str!("../figures/fig4c_spectrum.toml"))],
    },
    Figure {
        name: "fig4e",
        parts: &[
            ("down", include_str!("../figures/fig4e_down.toml")),
            ("up", include_str!("../figures/fig4e_up.toml")),
        ],
    },
    Figure {
        name: "fig5d",
        parts: &[(
            "matching-field",
            include_str!("../figures/fig5d_matching-field.toml"),
        )],
    },
];

pub fn names() -> Vec<&'static str> {
    FIGURES.iter().map(|f| f.name).collect()
}

pub fn figure(name: &str) -> CliResult<&'static Figure> {
    FIGURES.iter().find(|f| f.name == name).ok_or_else(|| {
        CliError::Config(format!(
            "unknown figure `{name}`; valid names: {}",
            names().join(", ")
        ))
    })
}

/// Runs every part of a figure, optionally overriding the bundled seed.
pub fn run_figure(name: &str, seed: Option<u64>) -> CliResult<Vec<(String, RunOutput)>> {
    let fig = figure(name)?;
    fig.parts
        .iter()
        .map(|(part, text)| {
            let mut cfg = parse_config(text)?;
            if seed.is_some() {
                cfg.seed = seed;
            }
            Ok((format!("{}_{part}", fig.name), run(&cfg, Path::new("."))?))
        })
        .collect()
}
