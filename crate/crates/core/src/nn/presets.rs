//! Preset architectures.
//!
//! Only layer counts and parameter totals of the reference teachers and
//! students are published, so the widths below were chosen to hit those
//! totals (exactly where it was possible, otherwise within 0.01%). The
//! `desk` variants keep every layer-type count of their full counterpart
//! but shrink widths so they train in minutes on one CPU core.

use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

use super::{LayerSpec as L, ModelSpec};
use crate::tensor::Padding::{Same, Valid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Dataset {
    Mnist,
    FashionMnist,
    Cifar10,
}

impl Dataset {
    pub const ALL: [Dataset; 3] = [Dataset::Mnist, Dataset::FashionMnist, Dataset::Cifar10];

    pub fn id(self) -> &'static str {
        match self {
            Dataset::Mnist => "mnist",
            Dataset::FashionMnist => "fashion-mnist",
            Dataset::Cifar10 => "cifar10",
        }
    }

    pub fn input_shape(self) -> Vec<usize> {
        match self {
            Dataset::Cifar10 => vec![3, 32, 32],
            _ => vec![1, 28, 28],
        }
    }
}

impl fmt::Display for Dataset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Dataset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Dataset::ALL
            .into_iter()
            .find(|d| d.id() == s)
            .ok_or_else(|| format!("unknown dataset '{s}' (expected one of: mnist, fashion-mnist, cifar10)"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    Large,
    Small,
    General,
    Baseline,
}

impl Role {
    pub const ALL: [Role; 4] = [Role::Large, Role::Small, Role::General, Role::Baseline];

    pub fn id(self) -> &'static str {
        match self {
            Role::Large => "large",
            Role::Small => "small",
            Role::General => "general",
            Role::Baseline => "baseline",
        }
    }
}

/// Published `(conv, dense, dropout?, batch_norm?, total params)` for each
/// dataset and role.
pub fn reference(dataset: Dataset, role: Role) -> (usize, usize, bool, bool, usize) {
    use Dataset::*;
    use Role::*;
    match (dataset, role) {
        (Mnist, Large) => (3, 3, true, false, 2_560_906),
        (Mnist, Small) => (2, 1, false, false, 1_433_610),
        (Mnist, General) => (2, 1, false, false, 20_490),
        (Mnist, Baseline) => (0, 1, false, false, 7_850),
        (FashionMnist, Large) => (4, 4, true, false, 2_339_850),
        (FashionMnist, Small) => (3, 1, false, false, 1_558_538),
        (FashionMnist, General) => (2, 1, false, false, 50_186),
        (FashionMnist, Baseline) => (0, 1, false, false, 7_850),
        (Cifar10, Large) => (8, 3, true, true, 26_902_442),
        (Cifar10, Small) => (3, 1, false, false, 5_674_634),
        (Cifar10, General) => (3, 1, false, false, 534_666),
        (Cifar10, Baseline) => (0, 1, false, false, 30_730),
    }
}

fn out(classes: usize) -> L {
    L::Output { classes }
}

/// Full-size architecture for `dataset` and `role`.
pub fn full(dataset: Dataset, role: Role) -> ModelSpec {
    use Dataset::*;
    use Role::*;
    let input = dataset.input_shape();
    let layers = match (dataset, role) {
        (Mnist, Large) => vec![
            L::conv(1, 32, 3, 1, Same),
            L::Relu,
            L::conv(32, 64, 3, 1, Same),
            L::Relu,
            L::MaxPool2,
            L::conv(64, 64, 3, 1, Same),
            L::Relu,
            L::MaxPool2,
            L::Flatten,
            L::dense(64 * 49, 704),
            L::Relu,
            L::Dropout { rate: 0.5 },
            L::dense(704, 415),
            L::Relu,
            L::dense(415, 10),
            out(10),
        ],
        (Mnist, Small) => vec![
            L::conv(1, 10, 3, 1, Valid),
            L::Relu,
            L::conv(10, 245, 3, 1, Valid),
            L::Relu,
            L::Flatten,
            L::dense(245 * 24 * 24, 10),
            out(10),
        ],
        (Mnist, General) => vec![
            L::conv(1, 16, 3, 1, Same),
            L::Relu,
            L::conv(16, 32, 3, 2, Same),
            L::Relu,
            L::MaxPool2,
            L::Flatten,
            L::dense(32 * 49, 10),
            out(10),
        ],
        (FashionMnist, Large) => vec![
            L::conv(1, 32, 3, 1, Same),
            L::Relu,
            L::conv(32, 32, 3, 1, Same),
            L::Relu,
            L::MaxPool2,
            L::conv(32, 64, 3, 1, Same),
            L::Relu,
            L::conv(64, 64, 3, 1, Same),
            L::Relu,
            L::MaxPool2,
            L::Flatten,
            L::dense(64 * 49, 672),
            L::Relu,
            L::Dropout { rate: 0.5 },
            L::dense(672, 192),
            L::Relu,
            L::dense(192, 185),
            L::Relu,
            L::dense(185, 10),
            out(10),
        ],
        (FashionMnist, Small) => vec![
            L::conv(1, 32, 3, 1, Valid),
            L::Relu,
            L::conv(32, 32, 3, 1, Valid),
            L::Relu,
            L::conv(32, 302, 3, 1, Valid),
            L::Relu,
            L::Flatten,
            L::dense(302 * 22 * 22, 10),
            out(10),
        ],
        (FashionMnist, General) => vec![
            L::conv(1, 32, 3, 1, Same),
            L::Relu,
            L::conv(32, 64, 3, 2, Same),
            L::Relu,
            L::MaxPool2,
            L::Flatten,
            L::dense(64 * 49, 10),
            out(10),
        ],
        (Cifar10, Large) => {
            let mut layers = Vec::new();
            let mut c_in = 3;
            for (i, &c) in [64, 64, 128, 128, 256, 256, 512, 512].iter().enumerate() {
                layers.extend([L::conv(c_in, c, 3, 1, Same), L::batch_norm(c), L::Relu]);
                if i % 2 == 1 {
                    layers.push(L::MaxPool2);
                }
                c_in = c;
            }
            layers.extend([
                L::Flatten,
                L::dense(512 * 4, 3648),
                L::Relu,
                L::Dropout { rate: 0.5 },
                L::dense(3648, 4028),
                L::Relu,
                L::dense(4028, 10),
                out(10),
            ]);
            layers
        }
        (Cifar10, Small) => vec![
            L::conv(3, 112, 3, 1, Valid),
            L::Relu,
            L::conv(112, 32, 3, 1, Valid),
            L::Relu,
            L::conv(32, 800, 3, 1, Valid),
            L::Relu,
            L::Flatten,
            L::dense(800 * 26 * 26, 10),
            out(10),
        ],
        (Cifar10, General) => vec![
            L::conv(3, 64, 3, 1, Same),
            L::Relu,
            L::conv(64, 128, 3, 1, Same),
            L::Relu,
            L::MaxPool2,
            L::conv(128, 256, 3, 1, Same),
            L::Relu,
            L::MaxPool2,
            L::Flatten,
            L::dense(256 * 64, 10),
            out(10),
        ],
        (_, Baseline) => {
            let n: usize = input.iter().product();
            vec![L::Flatten, L::dense(n, 10), out(10)]
        }
    };
    ModelSpec::new(input, layers)
}

/// Reduced architecture with the same layer-type counts as [`full`].
pub fn desk(dataset: Dataset, role: Role) -> ModelSpec {
    use Role::*;
    let input = dataset.input_shape();
    let c = input[0];
    // Spatial extent after two stride-2 "same" convolutions.
    let q = input[1].div_ceil(4);
    let layers = match (dataset, role) {
        (Dataset::Mnist, Large) => vec![
            L::conv(c, 16, 3, 2, Same),
            L::Relu,
            L::conv(16, 32, 3, 1, Same),
            L::Relu,
            L::MaxPool2,
            L::conv(32, 32, 3, 1, Same),
            L::Relu,
            L::Flatten,
            L::dense(32 * q * q, 256),
            L::Relu,
            L::Dropout { rate: 0.25 },
            L::dense(256, 128),
            L::Relu,
            L::dense(128, 10),
            out(10),
        ],
        (Dataset::FashionMnist, Large) => vec![
            L::conv(c, 16, 3, 2, Same),
            L::Relu,
            L::conv(16, 16, 3, 1, Same),
            L::Relu,
            L::MaxPool2,
            L::conv(16, 32, 3, 1, Same),
            L::Relu,
            L::conv(32, 32, 3, 1, Same),
            L::Relu,
            L::Flatten,
            L::dense(32 * q * q, 256),
            L::Relu,
            L::Dropout { rate: 0.25 },
            L::dense(256, 128),
            L::Relu,
            L::dense(128, 64),
            L::Relu,
            L::dense(64, 10),
            out(10),
        ],
        (Dataset::Cifar10, Large) => {
            let mut layers = Vec::new();
            let mut c_in = c;
            for (i, &w) in [16, 16, 32, 32, 64, 64, 64, 64].iter().enumerate() {
                layers.extend([L::conv(c_in, w, 3, 1, Same), L::batch_norm(w), L::Relu]);
                if i % 2 == 1 {
                    layers.push(L::MaxPool2);
                }
                c_in = w;
            }
            layers.extend([
                L::Flatten,
                L::dense(64 * 4, 256),
                L::Relu,
                L::Dropout { rate: 0.25 },
                L::dense(256, 128),
                L::Relu,
                L::dense(128, 10),
                out(10),
            ]);
            layers
        }
        (Dataset::Mnist, Small) => vec![
            L::conv(c, 8, 3, 2, Same),
            L::Relu,
            L::conv(8, 16, 3, 2, Same),
            L::Relu,
            L::Flatten,
            L::dense(16 * q * q, 10),
            out(10),
        ],
        (_, Small) => vec![
            L::conv(c, 8, 3, 2, Same),
            L::Relu,
            L::conv(8, 16, 3, 2, Same),
            L::Relu,
            L::conv(16, 16, 3, 1, Same),
            L::Relu,
            L::Flatten,
            L::dense(16 * q * q, 10),
            out(10),
        ],
        (_, General) => {
            let extra = if dataset == Dataset::Cifar10 {
                vec![L::conv(8, 8, 3, 1, Same), L::Relu]
            } else {
                Vec::new()
            };
            let mut layers = vec![L::conv(c, 8, 3, 2, Same), L::Relu, L::conv(8, 8, 3, 2, Same), L::Relu];
            layers.extend(extra);
            layers.extend([L::Flatten, L::dense(8 * q * q, 10), out(10)]);
            layers
        }
        (_, Baseline) => return full(dataset, Baseline),
    };
    ModelSpec::new(input, layers)
}

/// Resolves names such as `mnist-large` or `cifar10-general-desk`.
pub fn by_name(name: &str) -> Option<ModelSpec> {
    let (base, is_desk) = match name.strip_suffix("-desk") {
        Some(b) => (b, true),
        None => (name, false),
    };
    let (ds, role) = base.rsplit_once('-')?;
    let dataset = ds.parse().ok()?;
    let role = Role::ALL.into_iter().find(|r| r.id() == role)?;
    Some(if is_desk { desk(dataset, role) } else { full(dataset, role) })
}

/// Every name accepted by [`by_name`].
pub fn names() -> Vec<String> {
    let mut out = Vec::new();
    for d in Dataset::ALL {
        for r in Role::ALL {
            out.push(format!("{}-{}", d.id(), r.id()));
            out.push(format!("{}-{}-desk", d.id(), r.id()));
        }
    }
    out
}
