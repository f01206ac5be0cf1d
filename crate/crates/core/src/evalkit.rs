//! KNN evaluation of frozen representations and the continual-learning
//! metrics ACC, BWT and MAA.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datastream::TaskStream;
use crate::diffmath::{Array, NORM_EPS};
use crate::encoder::{encode, EncoderParams};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KnnConfig {
    pub k: usize,
    pub tau: f64,
}

impl Default for KnnConfig {
    fn default() -> Self {
        KnnConfig { k: 20, tau: 0.1 }
    }
}

fn unit_rows(features: &Array) -> Vec<Vec<f64>> {
    features
        .row_iter()
        .map(|r| {
            let n = r.iter().map(|x| x * x).sum::<f64>().sqrt().max(NORM_EPS);
            r.iter().map(|x| x / n).collect()
        })
        .collect()
}

/// Cosine KNN over a fixed labelled feature bank.
#[derive(Clone, Debug)]
pub struct KnnClassifier {
    bank: Vec<Vec<f64>>,
    labels: Vec<usize>,
    config: KnnConfig,
}

impl KnnClassifier {
    pub fn fit(features: &Array, labels: &[usize], config: KnnConfig) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::EmptyTrainingSet);
        }
        if features.rows() != labels.len() {
            return Err(Error::LengthMismatch {
                left: features.rows(),
                right: labels.len(),
            });
        }
        if config.k == 0 || config.k > labels.len() {
            return Err(Error::TooFewNeighbours {
                k: config.k,
                available: labels.len(),
            });
        }
        if !(config.tau > 0.0) {
            return Err(Error::InvalidConfig("knn temperature must be > 0".into()));
        }
        Ok(KnnClassifier {
            bank: unit_rows(features),
            labels: labels.to_vec(),
            config,
        })
    }

    /// Weighted vote of the `k` most similar bank entries, each contributing
    /// `exp(sim / tau)`. Similarity ties go to the lower bank index, vote
    /// ties to the smaller label.
    pub fn predict(&self, query: &[f64]) -> Result<usize> {
        let dim = self.bank[0].len();
        if query.len() != dim {
            return Err(Error::shape("knn_predict", format!("{} vs {dim}", query.len())));
        }
        let n = query.iter().map(|x| x * x).sum::<f64>().sqrt().max(NORM_EPS);
        let mut sims: Vec<(f64, usize)> = self
            .bank
            .iter()
            .enumerate()
            .map(|(i, b)| (b.iter().zip(query).map(|(x, y)| x * y).sum::<f64>() / n, i))
            .collect();
        sims.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));

        let mut votes: Vec<(usize, f64)> = Vec::new();
        for &(sim, i) in sims.iter().take(self.config.k) {
            let w = (sim / self.config.tau).exp();
            match votes.iter_mut().find(|(l, _)| *l == self.labels[i]) {
                Some(slot) => slot.1 += w,
                None => votes.push((self.labels[i], w)),
            }
        }
        votes.sort_by_key(|(label, _)| *label);
        let mut best = votes[0];
        for &(label, w) in &votes[1..] {
            if w > best.1 {
                best = (label, w);
            }
        }
        Ok(best.0)
    }

    pub fn accuracy(&self, queries: &Array, labels: &[usize]) -> Result<f64> {
        if queries.rows() != labels.len() {
            return Err(Error::LengthMismatch {
                left: queries.rows(),
                right: labels.len(),
            });
        }
        if labels.is_empty() {
            return Err(Error::Stream("evaluation split has no labelled samples".into()));
        }
        let mut correct = 0;
        for (q, &label) in queries.row_iter().zip(labels) {
            if self.predict(q)? == label {
                correct += 1;
            }
        }
        Ok(correct as f64 / labels.len() as f64)
    }
}

pub fn knn_predict(
    train_feats: &Array,
    train_labels: &[usize],
    query: &[f64],
    k: usize,
    tau_knn: f64,
) -> Result<usize> {
    KnnClassifier::fit(train_feats, train_labels, KnnConfig { k, tau: tau_knn })?.predict(query)
}

/// Lower-triangular accuracy matrix; row `j` (0-based) holds the accuracies
/// on tasks `0..=j` measured after training task `j`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    tasks: usize,
    rows: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn new(tasks: usize) -> Self {
        AccuracyMatrix {
            tasks,
            rows: Vec::new(),
        }
    }

    pub fn from_rows(tasks: usize, rows: Vec<Vec<f64>>) -> Result<Self> {
        let mut m = Self::new(tasks);
        for r in rows {
            m.push_row(r)?;
        }
        Ok(m)
    }

    pub fn tasks(&self) -> usize {
        self.tasks
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn completed(&self) -> usize {
        self.rows.len()
    }

    pub fn is_complete(&self) -> bool {
        self.rows.len() == self.tasks
    }

    /// Accuracy on task `eval` after training task `trained` (both 0-based).
    pub fn get(&self, trained: usize, eval: usize) -> Option<f64> {
        self.rows.get(trained).and_then(|r| r.get(eval)).copied()
    }

    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        let j = self.rows.len();
        if j >= self.tasks {
            return Err(Error::IncompleteMatrix(format!(
                "matrix already holds all {} rows",
                self.tasks
            )));
        }
        if row.len() != j + 1 {
            return Err(Error::IncompleteMatrix(format!(
                "row {} needs {} entries, got {}",
                j + 1,
                j + 1,
                row.len()
            )));
        }
        if let Some(bad) = row.iter().find(|a| !(0.0..=1.0).contains(*a)) {
            return Err(Error::InvalidConfig(format!("accuracy {bad} outside [0, 1]")));
        }
        self.rows.push(row);
        Ok(())
    }

    /// Mean accuracy over the tasks seen so far, after each training point.
    pub fn row_means(&self) -> Vec<f64> {
        self.rows
            .iter()
            .map(|r| r.iter().sum::<f64>() / r.len() as f64)
            .collect()
    }

    /// Writes `task_trained,task_eval,accuracy` rows with 1-based task
    /// indices and six decimals.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "task_trained,task_eval,accuracy")?;
        for (j, row) in self.rows.iter().enumerate() {
            for (i, a) in row.iter().enumerate() {
                writeln!(out, "{},{},{:.6}", j + 1, i + 1, a)?;
            }
        }
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(file))
    }

    /// Parses the CSV written by [`AccuracyMatrix::write_csv`]. The task
    /// count is the largest `task_trained` index; every entry `i <= j` must
    /// be present exactly once.
    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut reader = csv::Reader::from_reader(input);
        let headers = reader.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != ["task_trained", "task_eval", "accuracy"] {
            return Err(Error::Parse(format!("unexpected matrix header {headers:?}")));
        }
        let mut cells: Vec<(usize, usize, f64)> = Vec::new();
        for record in reader.records() {
            let record = record?;
            let field = |i: usize| record.get(i).unwrap_or("").trim().to_string();
            let parse_idx = |s: String| {
                s.parse::<usize>()
                    .ok()
                    .filter(|v| *v >= 1)
                    .ok_or_else(|| Error::Parse(format!("bad task index {s:?}")))
            };
            let j = parse_idx(field(0))?;
            let i = parse_idx(field(1))?;
            let a: f64 = field(2)
                .parse()
                .map_err(|_| Error::Parse(format!("bad accuracy {:?}", field(2))))?;
            if i > j {
                return Err(Error::Parse(format!("entry ({j},{i}) above the diagonal")));
            }
            cells.push((j, i, a));
        }
        let tasks = cells.iter().map(|c| c.0).max().unwrap_or(0);
        if tasks == 0 {
            return Err(Error::IncompleteMatrix("no entries".into()));
        }
        let mut grid: Vec<Vec<Option<f64>>> = (1..=tasks).map(|j| vec![None; j]).collect();
        for (j, i, a) in cells {
            let slot = &mut grid[j - 1][i - 1];
            if slot.is_some() {
                return Err(Error::Parse(format!("duplicate entry ({j},{i})")));
            }
            *slot = Some(a);
        }
        let rows = grid
            .into_iter()
            .enumerate()
            .map(|(j, r)| {
                r.into_iter()
                    .enumerate()
                    .map(|(i, a)| {
                        a.ok_or_else(|| {
                            Error::IncompleteMatrix(format!("missing entry ({},{})", j + 1, i + 1))
                        })
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_rows(tasks, rows)
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub acc: f64,
    /// `None` for a single task.
    pub bwt: Option<f64>,
    pub maa: f64,
}

/// ACC, BWT and MAA of a complete matrix.
pub fn compute_metrics(matrix: &AccuracyMatrix) -> Result<MetricsReport> {
    let t = matrix.tasks();
    if t == 0 || !matrix.is_complete() {
        return Err(Error::IncompleteMatrix(format!(
            "{} of {} rows present",
            matrix.completed(),
            t
        )));
    }
    let rows = matrix.rows();
    let last = &rows[t - 1];
    let acc = last.iter().sum::<f64>() / t as f64;
    let bwt = (t > 1).then(|| {
        (0..t - 1).map(|i| last[i] - rows[i][i]).sum::<f64>() / (t - 1) as f64
    });
    let maa = matrix.row_means().iter().sum::<f64>() / t as f64;
    Ok(MetricsReport { acc, bwt, maa })
}

/// Backward transfer, failing for single-task matrices.
pub fn backward_transfer(matrix: &AccuracyMatrix) -> Result<f64> {
    compute_metrics(matrix)?.bwt.ok_or(Error::UndefinedBwt)
}

/// Accuracy on every task `0..=last_trained` with the current encoder: each
/// task is classified among its own classes by KNN fitted on its training
/// split.
pub fn evaluate_all_tasks(
    encoder: &EncoderParams,
    stream: &TaskStream,
    last_trained: usize,
    knn: KnnConfig,
) -> Result<Vec<f64>> {
    if last_trained >= stream.tasks().len() {
        return Err(Error::Stream(format!(
            "task {last_trained} not in a stream of {} tasks",
            stream.tasks().len()
        )));
    }
    stream.tasks()[..=last_trained]
        .iter()
        .map(|task| {
            let train = encode(&task.train.features, encoder)?;
            let test = encode(&task.test.features, encoder)?;
            let knn = KnnClassifier::fit(&train, &task.train.labels, knn)?;
            knn.accuracy(&test, &task.test.labels)
        })
        .collect()
}
