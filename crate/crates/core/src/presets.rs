//! Named architecture presets, one per benchmark dataset and variant.
//!
//! GCN presets are `gcn-<dataset>-jk{none,concat,pool}` and DNA presets are
//! `dna-<dataset>-g{1,8,16}`. Every other hyperparameter keeps its default.

use crate::error::{Error, Result};
use crate::layers::{JkMode, LayerKind, ModelConfig};

/// Dataset keys, in the column order of the tables below.
pub const DATASETS: [&str; 8] = [
    "cora",
    "citeseer",
    "pubmed",
    "cora-full",
    "coauthor-cs",
    "coauthor-physics",
    "amazon-computers",
    "amazon-photo",
];

/// (layers, hidden, groups) per dataset.
const GCN_JK_NONE: [(usize, usize, usize); 8] = [
    (1, 128, 16),
    (1, 128, 8),
    (1, 16, 1),
    (1, 128, 16),
    (1, 128, 16),
    (1, 32, 16),
    (1, 128, 16),
    (1, 64, 16),
];
const GCN_JK_CONCAT: [(usize, usize, usize); 8] = [
    (2, 128, 8),
    (2, 64, 8),
    (2, 16, 16),
    (2, 128, 8),
    (2, 128, 1),
    (3, 64, 1),
    (1, 128, 1),
    (3, 128, 1),
];
const GCN_JK_POOL: [(usize, usize, usize); 8] = [
    (2, 128, 1),
    (2, 128, 1),
    (2, 16, 16),
    (5, 128, 16),
    (5, 128, 16),
    (5, 64, 1),
    (1, 128, 8),
    (3, 128, 16),
];

/// (layers, hidden, heads) per dataset.
const DNA_G1: [(usize, usize, usize); 8] = [
    (1, 128, 16),
    (2, 128, 8),
    (2, 16, 8),
    (2, 128, 8),
    (1, 128, 16),
    (1, 32, 16),
    (2, 128, 8),
    (1, 64, 8),
];
const DNA_G8: [(usize, usize, usize); 8] = [
    (4, 64, 8),
    (3, 128, 16),
    (2, 64, 8),
    (3, 128, 8),
    (1, 64, 8),
    (1, 64, 8),
    (2, 128, 16),
    (1, 128, 8),
];
const DNA_G16: [(usize, usize, usize); 8] = [
    (4, 128, 8),
    (4, 128, 8),
    (2, 64, 16),
    (2, 128, 8),
    (1, 128, 16),
    (1, 128, 16),
    (1, 128, 16),
    (1, 128, 16),
];

type Table = [(usize, usize, usize); 8];

const GCN_VARIANTS: [(&str, JkMode, &Table); 3] = [
    ("jknone", JkMode::None, &GCN_JK_NONE),
    ("jkconcat", JkMode::Concat, &GCN_JK_CONCAT),
    ("jkpool", JkMode::Pool, &GCN_JK_POOL),
];
const DNA_VARIANTS: [(&str, usize, &Table); 3] =
    [("g1", 1, &DNA_G1), ("g8", 8, &DNA_G8), ("g16", 16, &DNA_G16)];

/// Every preset name, sorted.
pub fn preset_names() -> Vec<String> {
    let mut names = Vec::new();
    for ds in DATASETS {
        for (suffix, _, _) in GCN_VARIANTS {
            names.push(format!("gcn-{ds}-{suffix}"));
        }
        for (suffix, _, _) in DNA_VARIANTS {
            names.push(format!("dna-{ds}-{suffix}"));
        }
    }
    names.sort();
    names
}

/// Model configuration of a named preset.
pub fn preset(name: &str) -> Result<ModelConfig> {
    let unknown = || Error::UnknownPreset {
        name: name.to_string(),
        available: preset_names().join(", "),
    };
    let key = name.to_ascii_lowercase();
    let (kind, rest) = key.split_once('-').ok_or_else(unknown)?;
    let (ds, variant) = rest.rsplit_once('-').ok_or_else(unknown)?;
    let col = DATASETS.iter().position(|&d| d == ds).ok_or_else(unknown)?;
    match kind {
        "gcn" => {
            let (_, jk, table) = GCN_VARIANTS.iter().find(|(s, _, _)| *s == variant).ok_or_else(unknown)?;
            let (num_layers, hidden, groups) = table[col];
            Ok(ModelConfig {
                num_layers,
                hidden,
                groups,
                heads: 1,
                layer_kind: LayerKind::Gcn,
                jk_mode: *jk,
                ..ModelConfig::default()
            })
        }
        "dna" => {
            let (_, groups, table) = DNA_VARIANTS.iter().find(|(s, _, _)| *s == variant).ok_or_else(unknown)?;
            let (num_layers, hidden, heads) = table[col];
            Ok(ModelConfig {
                num_layers,
                hidden,
                groups: *groups,
                heads,
                layer_kind: LayerKind::Dna,
                jk_mode: JkMode::None,
                ..ModelConfig::default()
            })
        }
        _ => Err(unknown()),
    }
}
