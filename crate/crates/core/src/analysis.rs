//! Soft-label diagnostics: entropy curves, variance in response,
//! penultimate-layer projections and the distillation-nature score.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::LabeledDataset;
use crate::losses::{argmax, softmax_t, LossError};
use crate::nn::{LayerSpec, Model, NnError};
use crate::rng::SeededRng;
use crate::train::SoftLabelMatrix;

pub use crate::losses::entropy;

/// Temperatures probed by default.
pub const DEFAULT_T_GRID: [f64; 6] = [3.0, 6.0, 9.0, 12.0, 15.0, 20.0];

/// Threshold on the nature score above which distillation is KD-like.
pub const DEFAULT_NATURE_THRESHOLD: f64 = 0.05;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("temperature grid is empty")]
    EmptyGrid,
    #[error("need at least {needed} classes, found {found}")]
    TooFewClasses { needed: usize, found: usize },
    #[error("class {class} is out of range for {classes} classes")]
    ClassOutOfRange { class: usize, classes: usize },
    #[error("projection classes must be distinct, got {0:?}")]
    DuplicateClasses([usize; 3]),
    #[error("class {class} has {available} examples, {requested} requested")]
    NotEnoughExamples { class: usize, available: usize, requested: usize },
    #[error("class templates span fewer than two dimensions")]
    DegenerateTemplates,
    #[error("class centroids coincide")]
    CoincidentCentroids,
    #[error("no class has two or more examples")]
    NoVarianceClasses,
    #[error("matrix rows have inconsistent lengths")]
    RaggedRows,
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Loss(#[from] LossError),
}

pub type Result<T> = std::result::Result<T, AnalysisError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EntropyPoint {
    pub temperature: f64,
    /// Mean entropy in nats.
    pub mean: f64,
    /// Population standard deviation across examples.
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyCurve {
    pub points: Vec<EntropyPoint>,
}

impl EntropyCurve {
    pub fn means(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.mean).collect()
    }

    /// Mean entropy at temperature `t`, if it is on the grid.
    pub fn at(&self, t: f64) -> Option<f64> {
        self.points.iter().find(|p| p.temperature == t).map(|p| p.mean)
    }
}

/// Entropy statistics of logit rows softened at each temperature.
pub fn entropy_curve_from_logits(logits: &[Vec<f64>], grid: &[f64]) -> Result<EntropyCurve> {
    if logits.is_empty() {
        return Err(AnalysisError::EmptyDataset);
    }
    if grid.is_empty() {
        return Err(AnalysisError::EmptyGrid);
    }
    let n = logits.len() as f64;
    let mut points = Vec::with_capacity(grid.len());
    for &t in grid {
        let h = logits
            .iter()
            .map(|z| Ok(entropy(&softmax_t(z, t)?)))
            .collect::<std::result::Result<Vec<f64>, LossError>>()?;
        let mean = h.iter().sum::<f64>() / n;
        let var = h.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        points.push(EntropyPoint {
            temperature: t,
            mean,
            std: var.sqrt(),
        });
    }
    Ok(EntropyCurve { points })
}

/// Eval-mode logits of every example in `ds`, as `f64` rows.
pub fn logits_of(model: &Model<f32>, ds: &LabeledDataset) -> Result<Vec<Vec<f64>>> {
    if ds.is_empty() {
        return Err(AnalysisError::EmptyDataset);
    }
    let logits = model.predict_logits(&ds.images, 256)?;
    Ok((0..ds.len())
        .map(|i| logits.outer(i).iter().map(|&v| v as f64).collect())
        .collect())
}

/// Mean and spread of the teacher's soft-label entropy over `ds` at each
/// temperature of `grid`.
pub fn entropy_curve(teacher: &Model<f32>, ds: &LabeledDataset, grid: &[f64]) -> Result<EntropyCurve> {
    entropy_curve_from_logits(&logits_of(teacher, ds)?, grid)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassVariance {
    pub class: usize,
    pub examples: usize,
    /// Variance across examples of the true-class entry.
    pub confidence: f64,
    /// Mean over the other positions of the across-example variance.
    pub similarity: f64,
    /// Mean over examples of the variance among the other positions.
    pub within_example: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseVarianceReport {
    pub classes: Vec<ClassVariance>,
    /// Classes with fewer than two examples, with their counts.
    pub excluded: Vec<(usize, usize)>,
}

/// Unbiased sample variance.
fn sample_variance(xs: impl ExactSizeIterator<Item = f64> + Clone) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.clone().sum::<f64>() / n;
    xs.map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)
}

/// Variance in response over raw rows grouped by hard label. Rows need not
/// sum exactly to one.
pub fn response_variance(rows: &[Vec<f64>], labels: &[usize]) -> Result<ResponseVarianceReport> {
    let c = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != c) || labels.len() != rows.len() {
        return Err(AnalysisError::RaggedRows);
    }
    if c < 2 {
        return Err(AnalysisError::TooFewClasses { needed: 2, found: c });
    }
    let mut members = vec![Vec::new(); c];
    for (i, &l) in labels.iter().enumerate() {
        if l >= c {
            return Err(AnalysisError::ClassOutOfRange { class: l, classes: c });
        }
        members[l].push(i);
    }
    let mut report = ResponseVarianceReport {
        classes: Vec::new(),
        excluded: Vec::new(),
    };
    for (class, idx) in members.iter().enumerate() {
        match idx.len() {
            0 => {}
            1 => report.excluded.push((class, 1)),
            n => {
                let column = |j: usize| sample_variance(idx.iter().map(move |&i| rows[i][j]));
                let others = (0..c).filter(|&j| j != class);
                let similarity = others.clone().map(column).sum::<f64>() / (c - 1) as f64;
                let within_example = idx
                    .iter()
                    .map(|&i| sample_variance(others.clone().map(|j| rows[i][j]).collect::<Vec<_>>().into_iter()))
                    .sum::<f64>()
                    / n as f64;
                report.classes.push(ClassVariance {
                    class,
                    examples: n,
                    confidence: column(class),
                    similarity,
                    within_example,
                });
            }
        }
    }
    if report.classes.is_empty() {
        return Err(AnalysisError::NoVarianceClasses);
    }
    Ok(report)
}

pub fn variance_in_response(soft: &SoftLabelMatrix) -> Result<ResponseVarianceReport> {
    let rows: Vec<Vec<f64>> = (0..soft.len()).map(|i| soft.row_f64(i)).collect();
    response_variance(&rows, &soft.labels)
}

/// How class templates are formed for the projection plane.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TemplateSource {
    /// Columns of the classifier's weight matrix.
    #[default]
    Weights,
    /// Mean penultimate activation of the sampled examples of each class.
    ClassMeans,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionResult {
    pub points: Vec<[f64; 2]>,
    pub classes: Vec<usize>,
    /// Dataset index of each point.
    pub indices: Vec<usize>,
    pub basis: [Vec<f64>; 2],
    pub templates: TemplateSource,
}

impl ProjectionResult {
    /// `|bᵢ·bⱼ − δᵢⱼ|` maximized over the basis pairs.
    pub fn orthonormality_error(&self) -> f64 {
        let [a, b] = &self.basis;
        (dot(a, a) - 1.0)
            .abs()
            .max((dot(b, b) - 1.0).abs())
            .max(dot(a, b).abs())
    }

    /// CSV with header `x,y,class`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("x,y,class\n");
        for (p, c) in self.points.iter().zip(&self.classes) {
            s.push_str(&format!("{},{},{}\n", p[0], p[1], c));
        }
        s
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Orthonormal basis of span{t₂ − t₁, t₃ − t₁} by Gram–Schmidt.
pub fn template_basis(t: [&[f64]; 3]) -> Result<[Vec<f64>; 2]> {
    let d1: Vec<f64> = t[1].iter().zip(t[0]).map(|(a, b)| a - b).collect();
    let d2: Vec<f64> = t[2].iter().zip(t[0]).map(|(a, b)| a - b).collect();
    let n1 = dot(&d1, &d1).sqrt();
    if n1 < 1e-12 {
        return Err(AnalysisError::DegenerateTemplates);
    }
    let e1: Vec<f64> = d1.iter().map(|v| v / n1).collect();
    let proj = dot(&d2, &e1);
    let r: Vec<f64> = d2.iter().zip(&e1).map(|(v, e)| v - proj * e).collect();
    let n2 = dot(&r, &r).sqrt();
    // Relative to the second difference so the test is scale-free.
    if n2 <= 1e-9 * dot(&d2, &d2).sqrt().max(n1) {
        return Err(AnalysisError::DegenerateTemplates);
    }
    let e2 = r.iter().map(|v| v / n2).collect();
    Ok([e1, e2])
}

/// Projects penultimate activations of `n_per_class` randomly chosen
/// examples of each of three classes onto the plane through their class
/// templates.
pub fn penultimate_projection(
    model: &Model<f32>,
    ds: &LabeledDataset,
    classes: [usize; 3],
    n_per_class: usize,
    templates: TemplateSource,
    rng: &mut SeededRng,
) -> Result<ProjectionResult> {
    let [a, b, c] = classes;
    if a == b || b == c || a == c {
        return Err(AnalysisError::DuplicateClasses(classes));
    }
    let n_classes = model.spec().classes();
    let mut indices = Vec::with_capacity(3 * n_per_class);
    let mut point_classes = Vec::with_capacity(3 * n_per_class);
    for &k in &classes {
        if k >= n_classes {
            return Err(AnalysisError::ClassOutOfRange { class: k, classes: n_classes });
        }
        let mut pool: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels[i] == k).collect();
        if pool.len() < n_per_class {
            return Err(AnalysisError::NotEnoughExamples {
                class: k,
                available: pool.len(),
                requested: n_per_class,
            });
        }
        rng.shuffle(&mut pool);
        pool.truncate(n_per_class);
        pool.sort_unstable();
        indices.extend_from_slice(&pool);
        point_classes.extend(std::iter::repeat_n(k, n_per_class));
    }
    let (_, penultimate) = model.predict_chunked(&ds.images.gather(&indices), 256)?;
    let width = penultimate.shape()[1];
    let acts: Vec<Vec<f64>> = (0..indices.len())
        .map(|i| penultimate.outer(i).iter().map(|&v| v as f64).collect())
        .collect();

    let temps: Vec<Vec<f64>> = match templates {
        TemplateSource::Weights => {
            let head = model.spec().classifier_index();
            debug_assert!(matches!(model.spec().layers[head], LayerSpec::Dense { .. }));
            let w = &model.params()[head][0];
            classes
                .iter()
                .map(|&k| (0..width).map(|r| w.data()[r * n_classes + k] as f64).collect())
                .collect()
        }
        TemplateSource::ClassMeans => (0..3)
            .map(|g| {
                let rows = &acts[g * n_per_class..(g + 1) * n_per_class];
                (0..width)
                    .map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n_per_class.max(1) as f64)
                    .collect()
            })
            .collect(),
    };
    let basis = template_basis([&temps[0], &temps[1], &temps[2]])?;
    let points = acts.iter().map(|p| [dot(p, &basis[0]), dot(p, &basis[1])]).collect();
    Ok(ProjectionResult {
        points,
        classes: point_classes,
        indices,
        basis,
        templates,
    })
}

/// Mean distance of points to their class centroid divided by the mean
/// distance between class centroids. Lower means tighter clusters.
pub fn cluster_spread(pr: &ProjectionResult) -> Result<f64> {
    let mut ids: Vec<usize> = pr.classes.clone();
    ids.sort_unstable();
    ids.dedup();
    if ids.len() < 2 {
        return Err(AnalysisError::TooFewClasses { needed: 2, found: ids.len() });
    }
    let centroids: Vec<[f64; 2]> = ids
        .iter()
        .map(|&k| {
            let (mut sx, mut sy, mut n) = (0.0, 0.0, 0.0);
            for (p, _) in pr.points.iter().zip(&pr.classes).filter(|(_, &c)| c == k) {
                sx += p[0];
                sy += p[1];
                n += 1.0;
            }
            [sx / n, sy / n]
        })
        .collect();
    let dist = |a: [f64; 2], b: [f64; 2]| (a[0] - b[0]).hypot(a[1] - b[1]);
    let within = pr
        .points
        .iter()
        .zip(&pr.classes)
        .map(|(&p, c)| dist(p, centroids[ids.binary_search(c).expect("class listed")]))
        .sum::<f64>()
        / pr.points.len() as f64;
    let mut between = 0.0;
    let mut pairs = 0.0;
    for i in 0..centroids.len() {
        for j in i + 1..centroids.len() {
            between += dist(centroids[i], centroids[j]);
            pairs += 1.0;
        }
    }
    let between = between / pairs;
    if between < 1e-9 {
        return Err(AnalysisError::CoincidentCentroids);
    }
    Ok(within / between)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    LsLike,
    KdLike,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NatureScore {
    pub score: f64,
    pub regime: Regime,
    pub threshold: f64,
}

/// Mean KL divergence, in nats, of each row's renormalized similarity labels
/// from the uniform distribution over `C − 1` classes. A row whose
/// similarity labels are all equal (including all zero) scores exactly 0.
pub fn similarity_score(rows: &[Vec<f64>]) -> Result<f64> {
    let c = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != c) {
        return Err(AnalysisError::RaggedRows);
    }
    if c < 3 {
        return Err(AnalysisError::TooFewClasses { needed: 3, found: c });
    }
    if rows.is_empty() {
        return Err(AnalysisError::EmptyDataset);
    }
    let m = (c - 1) as f64;
    let mut total = 0.0;
    for row in rows {
        let top = argmax(row);
        let mass: f64 = row.iter().enumerate().filter(|&(j, _)| j != top).map(|(_, v)| v).sum();
        let mut similarity = row.iter().enumerate().filter(|&(j, _)| j != top).map(|(_, v)| v);
        let first = similarity.next().copied();
        // Exactly equal labels are uniform by definition; skip the rounding
        // noise of the renormalization.
        if mass <= 0.0 || similarity.all(|v| Some(*v) == first) {
            continue;
        }
        let kl: f64 = row
            .iter()
            .enumerate()
            .filter(|&(j, &v)| j != top && v > 0.0)
            .map(|(_, &v)| {
                let s = v / mass;
                s * (s * m).ln()
            })
            .sum();
        total += kl.max(0.0);
    }
    Ok(total / rows.len() as f64)
}

pub fn classify_rows(rows: &[Vec<f64>], threshold: f64) -> Result<NatureScore> {
    let score = similarity_score(rows)?;
    Ok(NatureScore {
        score,
        regime: if score > threshold { Regime::KdLike } else { Regime::LsLike },
        threshold,
    })
}

/// Whether distilling from `soft` behaves like knowledge distillation or like
/// label smoothing.
pub fn classify_nature(soft: &SoftLabelMatrix, threshold: f64) -> Result<NatureScore> {
    let rows: Vec<Vec<f64>> = (0..soft.len()).map(|i| soft.row_f64(i)).collect();
    classify_rows(&rows, threshold)
}
