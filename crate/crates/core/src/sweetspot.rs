//! Batch-size × epoch sweeps of teacher training and the search for sweet
//! spots: cells that keep soft-label entropy high without giving up accuracy.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{self, AnalysisError};
use crate::data::LabeledDataset;
use crate::nn::ModelSpec;
use crate::rng::derive_seed;
use crate::train::{evaluate, train_teacher, Checkpoint, TrainConfig, TrainError};

#[derive(Debug, Error)]
pub enum SweepError {
    #[error("invalid sweep grid: {0}")]
    Grid(String),
    #[error("surface has no successful cells")]
    EmptySurface,
    #[error(
        "no cell reaches the accuracy floor {floor}; best is batch {} / {} epochs at {}",
        best.batch, best.epochs, best.accuracy
    )]
    Infeasible { floor: f64, best: Spot },
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
}

pub type Result<T> = std::result::Result<T, SweepError>;

fn default_t_ref() -> f64 {
    9.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepGrid {
    pub batch_sizes: Vec<usize>,
    pub epoch_counts: Vec<usize>,
    #[serde(default = "default_t_ref")]
    pub reference_t: f64,
    /// Accuracy floor for sweet spots; defaults to the best successful
    /// grid accuracy minus two points.
    #[serde(default)]
    pub min_accuracy: Option<f64>,
    /// Everything except batch size, epochs and seed is taken from here.
    pub base: TrainConfig,
}

impl SweepGrid {
    pub fn validate(&self) -> Result<()> {
        for (name, list) in [("batch_sizes", &self.batch_sizes), ("epoch_counts", &self.epoch_counts)] {
            if list.is_empty() {
                return Err(SweepError::Grid(format!("{name} is empty")));
            }
            if list.windows(2).any(|w| w[0] >= w[1]) {
                return Err(SweepError::Grid(format!("{name} must be strictly increasing")));
            }
        }
        if self.batch_sizes[0] == 0 {
            return Err(SweepError::Grid("batch sizes must be positive".into()));
        }
        if !(self.reference_t > 0.0) {
            return Err(SweepError::Grid(format!("reference_t must be positive, got {}", self.reference_t)));
        }
        if let Some(f) = self.min_accuracy {
            if !(f > 0.0 && f <= 1.0) {
                return Err(SweepError::Grid(format!("min_accuracy must lie in (0, 1], got {f}")));
            }
        }
        Ok(())
    }

    /// Training configuration of the cell `(batch, epochs)`. The seed mixes
    /// the base seed with both coordinates so cells are independent.
    pub fn cell_config(&self, batch: usize, epochs: usize) -> TrainConfig {
        TrainConfig {
            batch_size: batch,
            epochs,
            seed: derive_seed(self.base.seed, &[batch as u64, epochs as u64]),
            ..self.base
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum CellOutcome {
    Ok {
        /// Mean soft-label entropy at the reference temperature, training set.
        entropy: f64,
        /// Test accuracy.
        accuracy: f64,
        checkpoint: String,
    },
    Failed {
        reason: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
    pub outcome: CellOutcome,
    /// Added by refinement rather than part of the original grid.
    #[serde(default)]
    pub refined: bool,
}

impl Cell {
    pub fn entropy(&self) -> Option<f64> {
        match self.outcome {
            CellOutcome::Ok { entropy, .. } => Some(entropy),
            CellOutcome::Failed { .. } => None,
        }
    }

    pub fn accuracy(&self) -> Option<f64> {
        match self.outcome {
            CellOutcome::Ok { accuracy, .. } => Some(accuracy),
            CellOutcome::Failed { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropySurface {
    pub batch_sizes: Vec<usize>,
    pub epoch_counts: Vec<usize>,
    pub reference_t: f64,
    /// Grid cells in batch-major order, then any refinement cells.
    pub cells: Vec<Cell>,
}

impl EntropySurface {
    pub fn cell(&self, batch: usize, epochs: usize) -> Option<&Cell> {
        self.cells.iter().find(|c| c.batch == batch && c.epochs == epochs)
    }

    /// Entropies of the grid row at fixed `epochs`, over increasing batch.
    pub fn row_at_epochs(&self, epochs: usize) -> Vec<Option<f64>> {
        self.batch_sizes
            .iter()
            .map(|&b| self.cell(b, epochs).and_then(Cell::entropy))
            .collect()
    }

    /// Entropies of the grid column at fixed `batch`, over increasing epochs.
    pub fn column_at_batch(&self, batch: usize) -> Vec<Option<f64>> {
        self.epoch_counts
            .iter()
            .map(|&e| self.cell(batch, e).and_then(Cell::entropy))
            .collect()
    }

    /// CSV with header `batch,epochs,entropy,accuracy,checkpoint`; failed
    /// cells have empty fields.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("batch,epochs,entropy,accuracy,checkpoint\n");
        for c in &self.cells {
            match &c.outcome {
                CellOutcome::Ok {
                    entropy,
                    accuracy,
                    checkpoint,
                } => s.push_str(&format!("{},{},{entropy},{accuracy},{checkpoint}\n", c.batch, c.epochs)),
                CellOutcome::Failed { .. } => s.push_str(&format!("{},{},,,\n", c.batch, c.epochs)),
            }
        }
        s
    }
}

/// Trains and measures one cell. Divergence and other training failures are
/// recorded in the cell rather than returned.
pub fn run_cell(
    spec: &ModelSpec,
    train: &LabeledDataset,
    test: &LabeledDataset,
    grid: &SweepGrid,
    batch: usize,
    epochs: usize,
) -> (Cell, Option<Checkpoint>) {
    let cfg = grid.cell_config(batch, epochs);
    let measured = train_teacher(spec, train, &cfg).map_err(SweepError::from).and_then(|(mut ckpt, _)| {
        let curve = analysis::entropy_curve(&ckpt.model, train, &[grid.reference_t])?;
        let accuracy = evaluate(&ckpt.model, test)?.accuracy;
        ckpt.test_accuracy = Some(accuracy);
        Ok((curve.points[0].mean, accuracy, ckpt))
    });
    let (outcome, ckpt) = match measured {
        Ok((entropy, accuracy, ckpt)) => (
            CellOutcome::Ok {
                entropy,
                accuracy,
                checkpoint: ckpt.id(),
            },
            Some(ckpt),
        ),
        Err(e) => (CellOutcome::Failed { reason: e.to_string() }, None),
    };
    (
        Cell {
            batch,
            epochs,
            seed: cfg.seed,
            outcome,
            refined: false,
        },
        ckpt,
    )
}

/// Trains one teacher per grid cell. `on_cell` sees every cell as it
/// finishes, with its checkpoint when training succeeded.
pub fn entropy_surface_with<F>(
    spec: &ModelSpec,
    train: &LabeledDataset,
    test: &LabeledDataset,
    grid: &SweepGrid,
    mut on_cell: F,
) -> Result<EntropySurface>
where
    F: FnMut(&Cell, Option<&Checkpoint>),
{
    grid.validate()?;
    let mut cells = Vec::with_capacity(grid.batch_sizes.len() * grid.epoch_counts.len());
    for &b in &grid.batch_sizes {
        for &e in &grid.epoch_counts {
            let (cell, ckpt) = run_cell(spec, train, test, grid, b, e);
            on_cell(&cell, ckpt.as_ref());
            cells.push(cell);
        }
    }
    Ok(EntropySurface {
        batch_sizes: grid.batch_sizes.clone(),
        epoch_counts: grid.epoch_counts.clone(),
        reference_t: grid.reference_t,
        cells,
    })
}

pub fn entropy_surface(spec: &ModelSpec, train: &LabeledDataset, test: &LabeledDataset, grid: &SweepGrid) -> Result<EntropySurface> {
    entropy_surface_with(spec, train, test, grid, |_, _| {})
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spot {
    pub batch: usize,
    pub epochs: usize,
    pub entropy: f64,
    pub accuracy: f64,
}

/// The floor in effect: explicit, or best successful accuracy minus 0.02.
pub fn accuracy_floor(surface: &EntropySurface, explicit: Option<f64>) -> Result<f64> {
    if let Some(f) = explicit {
        return Ok(f);
    }
    surface
        .cells
        .iter()
        .filter_map(Cell::accuracy)
        .fold(None, |m: Option<f64>, a| Some(m.map_or(a, |m| m.max(a))))
        .map(|best| best - 0.02)
        .ok_or(SweepError::EmptySurface)
}

/// Every successful cell meeting the accuracy floor, by descending entropy.
/// Ties go to the smaller batch, then to fewer epochs.
pub fn find_sweet_spot(surface: &EntropySurface, floor: Option<f64>) -> Result<Vec<Spot>> {
    let floor = accuracy_floor(surface, floor)?;
    let all: Vec<Spot> = surface
        .cells
        .iter()
        .filter_map(|c| match c.outcome {
            CellOutcome::Ok { entropy, accuracy, .. } => Some(Spot {
                batch: c.batch,
                epochs: c.epochs,
                entropy,
                accuracy,
            }),
            CellOutcome::Failed { .. } => None,
        })
        .collect();
    if all.is_empty() {
        return Err(SweepError::EmptySurface);
    }
    let mut feasible: Vec<Spot> = all.iter().copied().filter(|s| s.accuracy >= floor).collect();
    if feasible.is_empty() {
        let best = *all
            .iter()
            .max_by(|a, b| a.accuracy.total_cmp(&b.accuracy))
            .expect("non-empty");
        return Err(SweepError::Infeasible { floor, best });
    }
    feasible.sort_by(|a, b| {
        b.entropy
            .total_cmp(&a.entropy)
            .then(a.batch.cmp(&b.batch))
            .then(a.epochs.cmp(&b.epochs))
    });
    Ok(feasible)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct RefineConfig {
    /// Rounds of midpoint insertion around the current best spot.
    #[serde(default)]
    pub iterations: usize,
}

/// Integer midpoints between `v` and its neighbours in `known`.
fn midpoints(known: &[usize], v: usize) -> Vec<usize> {
    let pos = known.iter().position(|&k| k == v).expect("value is known");
    let mut out = Vec::new();
    if pos > 0 {
        out.push((known[pos - 1] + v) / 2);
    }
    if pos + 1 < known.len() {
        out.push((v + known[pos + 1]) / 2);
    }
    out.retain(|m| !known.contains(m));
    out
}

/// Ranks the surface, then for each refinement round trains cells at the
/// midpoints between the best spot and its neighbouring batch sizes and
/// epoch counts, and re-ranks. The floor is fixed before refinement.
pub fn refine_sweet_spot(
    surface: &mut EntropySurface,
    spec: &ModelSpec,
    train: &LabeledDataset,
    test: &LabeledDataset,
    grid: &SweepGrid,
    refine: RefineConfig,
) -> Result<Vec<Spot>> {
    let floor = accuracy_floor(surface, grid.min_accuracy)?;
    let mut ranked = find_sweet_spot(surface, Some(floor))?;
    for _ in 0..refine.iterations {
        let best = ranked[0];
        let mut batches: Vec<usize> = surface.cells.iter().filter(|c| c.epochs == best.epochs).map(|c| c.batch).collect();
        let mut epochs: Vec<usize> = surface.cells.iter().filter(|c| c.batch == best.batch).map(|c| c.epochs).collect();
        batches.sort_unstable();
        epochs.sort_unstable();
        let mut fresh: Vec<(usize, usize)> = midpoints(&batches, best.batch).into_iter().map(|b| (b, best.epochs)).collect();
        fresh.extend(midpoints(&epochs, best.epochs).into_iter().map(|e| (best.batch, e)));
        fresh.retain(|&(b, e)| b > 0 && surface.cell(b, e).is_none());
        if fresh.is_empty() {
            break;
        }
        for (b, e) in fresh {
            let (mut cell, _) = run_cell(spec, train, test, grid, b, e);
            cell.refined = true;
            surface.cells.push(cell);
        }
        ranked = find_sweet_spot(surface, Some(floor))?;
    }
    Ok(ranked)
}

/// Spearman rank correlation with average ranks for ties. `None` when either
/// side is constant or fewer than two pairs are given.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let rx = ranks(x);
    let ry = ranks(y);
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman ρ of entropy against batch size for each epoch count (rows) and
/// against epochs for each batch size (columns). Failed cells are dropped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurfaceTrends {
    pub rows: Vec<(usize, Option<f64>)>,
    pub columns: Vec<(usize, Option<f64>)>,
}

pub fn surface_trends(surface: &EntropySurface) -> SurfaceTrends {
    let rho = |axis: &[usize], values: Vec<Option<f64>>| {
        let (x, y): (Vec<f64>, Vec<f64>) = axis
            .iter()
            .zip(values)
            .filter_map(|(&a, v)| v.map(|v| (a as f64, v)))
            .unzip();
        spearman(&x, &y)
    };
    SurfaceTrends {
        rows: surface
            .epoch_counts
            .iter()
            .map(|&e| (e, rho(&surface.batch_sizes, surface.row_at_epochs(e))))
            .collect(),
        columns: surface
            .batch_sizes
            .iter()
            .map(|&b| (b, rho(&surface.epoch_counts, surface.column_at_batch(b))))
            .collect(),
    }
}
