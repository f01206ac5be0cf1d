//! Seeded synthetic task streams and their CSV exchange format.
//!
//! Every class is an isotropic Gaussian around a mean drawn on a sphere of
//! radius `separation`. Classes are randomly partitioned into tasks, so
//! label sets never overlap. Feature values are rounded to nine significant
//! digits at generation time, which makes the CSV export lossless.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffmath::Array;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamConfig {
    pub tasks: usize,
    pub classes_per_task: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub input_dim: usize,
    /// Radius of the sphere the class means lie on.
    pub separation: f64,
    /// Per-coordinate standard deviation around a class mean.
    pub spread: f64,
    pub seed: u64,
}

impl Default for StreamConfig {
    fn default() -> Self {
        StreamConfig {
            tasks: 5,
            classes_per_task: 5,
            train_per_class: 200,
            test_per_class: 50,
            input_dim: 64,
            separation: 4.0,
            spread: 1.0,
            seed: 0,
        }
    }
}

impl StreamConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            self.tasks,
            self.classes_per_task,
            self.train_per_class,
            self.test_per_class,
            self.input_dim,
        ];
        if counts.contains(&0) {
            return Err(Error::InvalidConfig("stream counts must be positive".into()));
        }
        if !(self.separation > 0.0 && self.separation.is_finite()) {
            return Err(Error::InvalidConfig("separation must be > 0".into()));
        }
        if !(self.spread >= 0.0 && self.spread.is_finite()) {
            return Err(Error::InvalidConfig("spread must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSplit {
    pub features: Array,
    pub labels: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    pub id: usize,
    /// Sorted class ids belonging to this task.
    pub classes: Vec<usize>,
    /// Training inputs; the labels are only used to fit evaluation KNNs.
    pub train: LabeledSplit,
    pub test: LabeledSplit,
}

impl Task {
    /// The training inputs as seen by the unsupervised learner.
    pub fn unlabeled_train(&self) -> &Array {
        &self.train.features
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskStream {
    input_dim: usize,
    tasks: Vec<Task>,
}

fn round_sig9(x: f64) -> f64 {
    format!("{x:.8e}").parse().expect("formatted float parses")
}

impl TaskStream {
    /// Validates class disjointness across tasks and split consistency.
    pub fn new(input_dim: usize, tasks: Vec<Task>) -> Result<Self> {
        if tasks.is_empty() {
            return Err(Error::Stream("stream has no tasks".into()));
        }
        let mut seen = BTreeSet::new();
        for task in &tasks {
            for split in [&task.train, &task.test] {
                if split.labels.is_empty() {
                    return Err(Error::Stream(format!("task {} is empty", task.id)));
                }
                if split.features.rows() != split.labels.len() || split.features.cols() != input_dim {
                    return Err(Error::Stream(format!("task {} has inconsistent splits", task.id)));
                }
                if let Some(l) = split.labels.iter().find(|l| task.classes.binary_search(l).is_err()) {
                    return Err(Error::Stream(format!("task {} has stray label {l}", task.id)));
                }
            }
            for &c in &task.classes {
                if !seen.insert(c) {
                    return Err(Error::Stream(format!(
                        "class {c} appears in more than one task (again in task {})",
                        task.id
                    )));
                }
            }
        }
        Ok(TaskStream { input_dim, tasks })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn tasks(&self) -> &[Task] {
        &self.tasks
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    /// Writes `task_id,class_id,split,f0..f{d-1}`, train rows before test
    /// rows within each task.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = std::io::BufWriter::new(out);
        write!(w, "task_id,class_id,split")?;
        for f in 0..self.input_dim {
            write!(w, ",f{f}")?;
        }
        writeln!(w)?;
        for task in &self.tasks {
            for (name, split) in [("train", &task.train), ("test", &task.test)] {
                for (row, label) in split.features.row_iter().zip(&split.labels) {
                    write!(w, "{},{},{}", task.id, label, name)?;
                    for v in row {
                        write!(w, ",{v:.8e}")?;
                    }
                    writeln!(w)?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    /// Parses the stream CSV. Task ids must form the range `0..T`; a task id
    /// in that range without train or test rows is reported as empty.
    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut reader = csv::Reader::from_reader(input);
        let headers = reader.headers()?.clone();
        let names: Vec<&str> = headers.iter().collect();
        if names.len() < 4 || names[..3] != ["task_id", "class_id", "split"] {
            return Err(Error::Parse(format!("unexpected stream header {names:?}")));
        }
        let dim = names.len() - 3;
        for (i, n) in names[3..].iter().enumerate() {
            if *n != format!("f{i}") {
                return Err(Error::Parse(format!("feature column {i} is named {n:?}")));
            }
        }

        #[derive(Default)]
        struct Acc {
            train: (Vec<f64>, Vec<usize>),
            test: (Vec<f64>, Vec<usize>),
        }
        let mut by_task: BTreeMap<usize, Acc> = BTreeMap::new();
        for (line, record) in reader.records().enumerate() {
            let record = record?;
            let bad = |what: &str| Error::Parse(format!("record {}: bad {what}", line + 1));
            let task: usize = record[0].trim().parse().map_err(|_| bad("task_id"))?;
            let class: usize = record[1].trim().parse().map_err(|_| bad("class_id"))?;
            let acc = by_task.entry(task).or_default();
            let (features, labels) = match record[2].trim() {
                "train" => &mut acc.train,
                "test" => &mut acc.test,
                _ => return Err(bad("split")),
            };
            for v in record.iter().skip(3) {
                let x: f64 = v.trim().parse().map_err(|_| bad("feature"))?;
                if !x.is_finite() {
                    return Err(bad("feature"));
                }
                features.push(x);
            }
            labels.push(class);
        }
        let Some(&max_id) = by_task.keys().next_back() else {
            return Err(Error::Stream("stream file has no rows".into()));
        };
        let mut tasks = Vec::with_capacity(max_id + 1);
        for id in 0..=max_id {
            let acc = by_task.remove(&id).unwrap_or_default();
            if acc.train.1.is_empty() || acc.test.1.is_empty() {
                return Err(Error::Stream(format!("task {id} is empty")));
            }
            let classes: BTreeSet<usize> =
                acc.train.1.iter().chain(&acc.test.1).copied().collect();
            let split = |(f, l): (Vec<f64>, Vec<usize>)| -> Result<LabeledSplit> {
                Ok(LabeledSplit {
                    features: Array::matrix(l.len(), dim, f)?,
                    labels: l,
                })
            };
            tasks.push(Task {
                id,
                classes: classes.into_iter().collect(),
                train: split(acc.train)?,
                test: split(acc.test)?,
            });
        }
        Self::new(dim, tasks)
    }
}

/// Loads a stream from the CSV exchange format.
pub fn load_external(path: &Path) -> Result<TaskStream> {
    TaskStream::read_csv(std::fs::File::open(path)?)
}

pub fn generate_stream(config: &StreamConfig) -> Result<TaskStream> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let n_classes = config.tasks * config.classes_per_task;
    let d = config.input_dim;

    let means: Vec<Vec<f64>> = (0..n_classes)
        .map(|_| loop {
            let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.0 {
                break v.iter().map(|x| config.separation * x / norm).collect();
            }
        })
        .collect();

    let mut class_order: Vec<usize> = (0..n_classes).collect();
    class_order.shuffle(&mut rng);

    let draw = |class: usize, count: usize, rng: &mut ChaCha8Rng| {
        let mut data = Vec::with_capacity(count * d);
        for _ in 0..count {
            for &m in &means[class] {
                let noise: f64 = StandardNormal.sample(rng);
                data.push(round_sig9(m + config.spread * noise));
            }
        }
        data
    };

    let mut tasks = Vec::with_capacity(config.tasks);
    for (id, chunk) in class_order.chunks(config.classes_per_task).enumerate() {
        let mut classes = chunk.to_vec();
        classes.sort_unstable();
        let mut splits = Vec::with_capacity(2);
        for per_class in [config.train_per_class, config.test_per_class] {
            let mut data = Vec::new();
            let mut labels = Vec::new();
            for &c in &classes {
                data.extend(draw(c, per_class, &mut rng));
                labels.extend(std::iter::repeat_n(c, per_class));
            }
            splits.push(LabeledSplit {
                features: Array::matrix(labels.len(), d, data)?,
                labels,
            });
        }
        let test = splits.pop().expect("two splits");
        let train = splits.pop().expect("two splits");
        tasks.push(Task {
            id,
            classes,
            train,
            test,
        });
    }
    TaskStream::new(d, tasks)
}
