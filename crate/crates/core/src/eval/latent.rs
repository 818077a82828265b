//! Latent-plan encodings of generated traces: mean pooling over codebook
//! rows, pairwise distances, and a 2-D projection.

use std::path::Path;

use iclp_substrate::{Rng, Tensor};
use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use super::{svg, write_file};
use crate::latentize::{latent_spans, ExtendedVocabulary};
use crate::{Error, Result};

/// A generated (or reference) assistant trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub id: String,
    pub label: String,
    pub ids: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodingSet {
    pub step: usize,
    pub vectors: Vec<Vec<f64>>,
    /// Trace id and group label per vector.
    pub ids: Vec<String>,
    pub labels: Vec<String>,
    /// Traces with fewer than `step` latent spans.
    pub skipped: usize,
}

/// Mean of the codebook rows named by the `step`-th latent span (1-based)
/// of each trace.
pub fn collect_step_encodings(
    traces: &[Trace],
    codebook: &Tensor<f32>,
    vocab: &ExtendedVocabulary,
    step: usize,
) -> Result<EncodingSet> {
    if step == 0 {
        return Err(Error::Precondition("step index is 1-based".into()));
    }
    if codebook.rows() != vocab.k() {
        return Err(Error::Vocab(format!(
            "codebook has {} rows, vocabulary extends by {}",
            codebook.rows(),
            vocab.k()
        )));
    }
    let mut set = EncodingSet { step, vectors: Vec::new(), ids: Vec::new(), labels: Vec::new(), skipped: 0 };
    for t in traces {
        let spans = latent_spans(&t.ids, vocab);
        let Some(span) = spans.get(step - 1) else {
            set.skipped += 1;
            continue;
        };
        let mut v = vec![0.0f64; codebook.cols()];
        for &k in span {
            for (a, &b) in v.iter_mut().zip(codebook.row(k)) {
                *a += b as f64;
            }
        }
        for a in &mut v {
            *a /= span.len() as f64;
        }
        set.vectors.push(v);
        set.ids.push(t.id.clone());
        set.labels.push(t.label.clone());
    }
    Ok(set)
}

/// Symmetric Euclidean distance matrix with rows ordered by label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceMatrix {
    pub labels: Vec<String>,
    pub ids: Vec<String>,
    pub n: usize,
    pub data: Vec<f64>,
}

impl DistanceMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    /// Mean distance over distinct pairs within the same label and across labels.
    pub fn within_between(&self) -> (f64, f64) {
        let (mut w, mut nw, mut b, mut nb) = (0.0, 0usize, 0.0, 0usize);
        for i in 0..self.n {
            for j in i + 1..self.n {
                if self.labels[i] == self.labels[j] {
                    w += self.get(i, j);
                    nw += 1;
                } else {
                    b += self.get(i, j);
                    nb += 1;
                }
            }
        }
        (w / nw.max(1) as f64, b / nb.max(1) as f64)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("id,label");
        for id in &self.ids {
            out.push(',');
            out.push_str(id);
        }
        out.push('\n');
        for i in 0..self.n {
            out.push_str(&format!("{},{}", self.ids[i], self.labels[i]));
            for j in 0..self.n {
                out.push_str(&format!(",{}", self.get(i, j)));
            }
            out.push('\n');
        }
        write_file(path, out.as_bytes())
    }

    pub fn write_svg(&self, path: &Path) -> Result<()> {
        write_file(path, svg::heatmap(self.n, &self.data, &self.labels).as_bytes())
    }
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Stable order grouping equal labels together.
fn label_order(set: &EncodingSet) -> Vec<usize> {
    let mut order: Vec<usize> = (0..set.vectors.len()).collect();
    order.sort_by(|&a, &b| set.labels[a].cmp(&set.labels[b]).then(set.ids[a].cmp(&set.ids[b])));
    order
}

pub fn pairwise_distances(set: &EncodingSet) -> Result<DistanceMatrix> {
    let n = set.vectors.len();
    if n < 2 {
        return Err(Error::Precondition(format!("need at least 2 encodings, have {n}")));
    }
    let order = label_order(set);
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let d = euclidean(&set.vectors[order[i]], &set.vectors[order[j]]);
            data[i * n + j] = d;
            data[j * n + i] = d;
        }
    }
    Ok(DistanceMatrix {
        labels: order.iter().map(|&i| set.labels[i].clone()).collect(),
        ids: order.iter().map(|&i| set.ids[i].clone()).collect(),
        n,
        data,
    })
}

/// Stochastic-neighbor refinement settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub iterations: usize,
    pub learning_rate: f64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        Self { perplexity: 10.0, iterations: 500, learning_rate: 100.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    pub ids: Vec<String>,
    pub labels: Vec<String>,
    pub points: Vec<[f64; 2]>,
}

impl Projection {
    /// Mean pairwise distance within and across labels in the plane.
    pub fn within_between(&self) -> (f64, f64) {
        let n = self.points.len();
        let m = DistanceMatrix {
            labels: self.labels.clone(),
            ids: self.ids.clone(),
            n,
            data: (0..n * n).map(|x| euclidean(&self.points[x / n], &self.points[x % n])).collect(),
        };
        m.within_between()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("id,label,x,y\n");
        for ((id, l), p) in self.ids.iter().zip(&self.labels).zip(&self.points) {
            out.push_str(&format!("{id},{l},{},{}\n", p[0], p[1]));
        }
        write_file(path, out.as_bytes())
    }

    pub fn write_svg(&self, path: &Path) -> Result<()> {
        write_file(path, svg::scatter(&self.points, &self.labels).as_bytes())
    }
}

/// Principal components of row vectors. Each component's sign is fixed so
/// that its largest-magnitude coordinate is positive. Missing components
/// (rank below 2) are zero.
pub fn pca_2d(vectors: &[Vec<f64>]) -> Result<Vec<[f64; 2]>> {
    let n = vectors.len();
    if n < 3 {
        return Err(Error::Precondition(format!("need at least 3 encodings, have {n}")));
    }
    let d = vectors[0].len();
    let mut x = DMatrix::from_fn(n, d, |i, j| vectors[i][j]);
    for j in 0..d {
        let mean = x.column(j).mean();
        x.column_mut(j).add_scalar_mut(-mean);
    }
    let cov = x.transpose() * &x / (n as f64);
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let scale = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    let mut coords = vec![[0.0; 2]; n];
    for c in 0..2 {
        let Some(&k) = order.get(c) else {
            log::warn!("projection: input has fewer than 2 dimensions, padding with zeros");
            continue;
        };
        if eig.eigenvalues[k] <= scale * 1e-12 {
            log::warn!("projection: rank below 2, component {} set to zero", c + 1);
            continue;
        }
        let proj = &x * eig.eigenvectors.column(k);
        let pivot = proj.iter().copied().fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        for (i, v) in proj.iter().enumerate() {
            coords[i][c] = sign * v;
        }
    }
    Ok(coords)
}

/// PCA, optionally refined by exact t-SNE started from the PCA layout
/// plus seeded jitter.
pub fn project_2d(set: &EncodingSet, seed: u64, tsne: Option<&TsneConfig>) -> Result<Projection> {
    let order = label_order(set);
    let vectors: Vec<Vec<f64>> = order.iter().map(|&i| set.vectors[i].clone()).collect();
    let mut points = pca_2d(&vectors)?;
    if let Some(cfg) = tsne {
        points = tsne_refine(&vectors, points, cfg, seed);
    }
    Ok(Projection {
        ids: order.iter().map(|&i| set.ids[i].clone()).collect(),
        labels: order.iter().map(|&i| set.labels[i].clone()).collect(),
        points,
    })
}

fn tsne_refine(x: &[Vec<f64>], init: Vec<[f64; 2]>, cfg: &TsneConfig, seed: u64) -> Vec<[f64; 2]> {
    let n = x.len();
    let mut p = vec![0.0; n * n];
    let target = cfg.perplexity.min((n - 1) as f64).ln();
    for i in 0..n {
        let d: Vec<f64> = (0..n).map(|j| x[i].iter().zip(&x[j]).map(|(a, b)| (a - b).powi(2)).sum()).collect();
        let (mut lo, mut hi, mut beta) = (0.0, f64::INFINITY, 1.0);
        for _ in 0..64 {
            let w: Vec<f64> = (0..n).map(|j| if j == i { 0.0 } else { (-beta * d[j]).exp() }).collect();
            let z: f64 = w.iter().sum::<f64>().max(1e-300);
            let h = z.ln() + beta * (0..n).map(|j| w[j] * d[j]).sum::<f64>() / z;
            for j in 0..n {
                p[i * n + j] = w[j] / z;
            }
            if (h - target).abs() < 1e-5 {
                break;
            }
            if h > target {
                lo = beta;
                beta = if hi.is_finite() { (beta + hi) / 2.0 } else { beta * 2.0 };
            } else {
                hi = beta;
                beta = (beta + lo) / 2.0;
            }
        }
    }
    let mut sym = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            sym[i * n + j] = ((p[i * n + j] + p[j * n + i]) / (2.0 * n as f64)).max(1e-12);
        }
    }
    let spread = init.iter().map(|q| q[0].abs().max(q[1].abs())).fold(0.0, f64::max).max(1e-12);
    let mut rng = Rng::derived(seed, "tsne");
    let mut y: Vec<[f64; 2]> = init
        .iter()
        .map(|q| [q[0] / spread + rng.normal::<f64>(1e-4), q[1] / spread + rng.normal::<f64>(1e-4)])
        .collect();
    let mut vel = vec![[0.0; 2]; n];
    for it in 0..cfg.iterations {
        let exaggeration = if it < cfg.iterations / 4 { 4.0 } else { 1.0 };
        let mut num = vec![0.0; n * n];
        let mut z = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    let q = 1.0 / (1.0 + (y[i][0] - y[j][0]).powi(2) + (y[i][1] - y[j][1]).powi(2));
                    num[i * n + j] = q;
                    z += q;
                }
            }
        }
        let momentum = if it < 250 { 0.5 } else { 0.8 };
        for i in 0..n {
            let mut g = [0.0; 2];
            for j in 0..n {
                if i != j {
                    let m = (exaggeration * sym[i * n + j] - num[i * n + j] / z) * num[i * n + j];
                    g[0] += 4.0 * m * (y[i][0] - y[j][0]);
                    g[1] += 4.0 * m * (y[i][1] - y[j][1]);
                }
            }
            for c in 0..2 {
                vel[i][c] = momentum * vel[i][c] - cfg.learning_rate * g[c];
            }
        }
        for i in 0..n {
            y[i][0] += vel[i][0];
            y[i][1] += vel[i][1];
        }
    }
    y
}
