//! EMA teacher, FIFO memory bank and soft-voting pseudo labels.

use std::io::Write;

use candle_core::{DType, Tensor, D};

use crate::error::{Error, Result};
use crate::nn::{argmax, log_softmax_last, Param};

/// Elementwise `teacher <- m * teacher + (1 - m) * student` over aligned parameter lists.
pub fn ema_update(teacher: &[&Param], student: &[&Param], momentum: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&momentum) {
        return Err(Error::State(format!(
            "EMA momentum must lie in [0, 1], got {momentum}"
        )));
    }
    if teacher.len() != student.len() {
        return Err(Error::State(format!(
            "teacher has {} parameters, student has {}",
            teacher.len(),
            student.len()
        )));
    }
    for (t, s) in teacher.iter().zip(student) {
        if t.name() != s.name() || t.dims() != s.dims() {
            return Err(Error::State(format!(
                "teacher parameter {} {:?} does not match student parameter {} {:?}",
                t.name(),
                t.dims(),
                s.name(),
                s.dims()
            )));
        }
    }
    for (t, s) in teacher.iter().zip(student) {
        let updated = (t.value().affine(momentum, 0.0)? + s.value().affine(1.0 - momentum, 0.0)?)?;
        t.set(&updated)?;
    }
    Ok(())
}

/// Pairs of (teacher, student) parameters for which the student is trainable.
pub fn trainable_pairs<'a>(
    teacher: Vec<&'a Param>,
    student: Vec<&'a Param>,
) -> Result<(Vec<&'a Param>, Vec<&'a Param>)> {
    if teacher.len() != student.len() {
        return Err(Error::State(format!(
            "teacher has {} parameters, student has {}",
            teacher.len(),
            student.len()
        )));
    }
    Ok(teacher
        .into_iter()
        .zip(student)
        .filter(|(_, s)| s.is_trainable())
        .unzip())
}

/// A bank entry, oldest-first when listed.
#[derive(Debug, Clone, PartialEq)]
pub struct BankEntry {
    pub insertion_index: u64,
    pub feature: Vec<f64>,
    pub probs: Vec<f64>,
}

/// Fixed-capacity FIFO of teacher features (unit-norm) and class probabilities.
#[derive(Debug, Clone)]
pub struct MemoryBank {
    capacity: usize,
    feature_dim: usize,
    num_classes: usize,
    features: Vec<Vec<f64>>,
    probs: Vec<Vec<f64>>,
    insertion: Vec<u64>,
    cursor: usize,
    inserted: u64,
}

/// Result of soft voting for one query.
#[derive(Debug, Clone, PartialEq)]
pub struct Vote {
    pub label: usize,
    pub probs: Vec<f64>,
}

fn l2_normalize(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter().map(|x| x / n).collect()
    } else {
        v.to_vec()
    }
}

impl MemoryBank {
    pub fn new(capacity: usize, feature_dim: usize, num_classes: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("memory bank capacity must be positive".into()));
        }
        Ok(Self {
            capacity,
            feature_dim,
            num_classes,
            features: Vec::with_capacity(capacity),
            probs: Vec::with_capacity(capacity),
            insertion: Vec::with_capacity(capacity),
            cursor: 0,
            inserted: 0,
        })
    }

    /// Creates a bank and fills it with warm-up teacher outputs. Fewer
    /// samples than `capacity` leave the bank partially filled.
    pub fn warm_up(
        capacity: usize,
        features: &[Vec<f64>],
        probs: &[Vec<f64>],
        top_k: usize,
    ) -> Result<Self> {
        if capacity < top_k {
            return Err(Error::Config(format!(
                "bank capacity {capacity} is smaller than top_k {top_k}"
            )));
        }
        let (d, c) = match (features.first(), probs.first()) {
            (Some(f), Some(p)) => (f.len(), p.len()),
            _ => return Err(Error::Data("no warm-up samples for the memory bank".into())),
        };
        let mut bank = Self::new(capacity, d, c)?;
        let n = features.len().min(capacity);
        bank.update(&features[..n], &probs[..n])?;
        Ok(bank)
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    /// Pushes a batch in arrival order, overwriting the oldest entries once full.
    pub fn update(&mut self, features: &[Vec<f64>], probs: &[Vec<f64>]) -> Result<()> {
        if features.is_empty() {
            return Err(Error::State("empty memory bank update".into()));
        }
        if features.len() != probs.len() {
            return Err(Error::State(format!(
                "{} features but {} probability vectors",
                features.len(),
                probs.len()
            )));
        }
        for (f, p) in features.iter().zip(probs) {
            if f.len() != self.feature_dim {
                return Err(Error::State(format!(
                    "feature dim {} does not match bank dim {}",
                    f.len(),
                    self.feature_dim
                )));
            }
            if p.len() != self.num_classes {
                return Err(Error::State(format!(
                    "probability dim {} does not match bank classes {}",
                    p.len(),
                    self.num_classes
                )));
            }
        }
        for (f, p) in features.iter().zip(probs) {
            let f = l2_normalize(f);
            let total: f64 = p.iter().sum();
            let p: Vec<f64> = p.iter().map(|x| x / total).collect();
            if self.features.len() < self.capacity {
                self.features.push(f);
                self.probs.push(p);
                self.insertion.push(self.inserted);
            } else {
                self.features[self.cursor] = f;
                self.probs[self.cursor] = p;
                self.insertion[self.cursor] = self.inserted;
            }
            self.cursor = (self.cursor + 1) % self.capacity;
            self.inserted += 1;
        }
        Ok(())
    }

    /// Entries from oldest to newest.
    pub fn entries(&self) -> Vec<BankEntry> {
        let n = self.len();
        let start = if n < self.capacity { 0 } else { self.cursor };
        (0..n)
            .map(|i| {
                let slot = (start + i) % n;
                BankEntry {
                    insertion_index: self.insertion[slot],
                    feature: self.features[slot].clone(),
                    probs: self.probs[slot].clone(),
                }
            })
            .collect()
    }

    /// Averages the stored probabilities of the `min(k, len)` entries most
    /// cosine-similar to `query`; the label is the argmax (lowest index on ties).
    pub fn soft_vote(&self, query: &[f64], k: usize) -> Result<Vote> {
        if self.is_empty() {
            return Err(Error::Voting(
                "memory bank is empty; warm it up before voting".into(),
            ));
        }
        if k == 0 {
            return Err(Error::Voting("top_k must be at least 1".into()));
        }
        if query.len() != self.feature_dim {
            return Err(Error::Voting(format!(
                "query dim {} does not match bank dim {}",
                query.len(),
                self.feature_dim
            )));
        }
        let q = l2_normalize(query);
        let mut scored: Vec<(f64, u64, usize)> = self
            .features
            .iter()
            .enumerate()
            .map(|(slot, f)| {
                let sim = f.iter().zip(&q).map(|(a, b)| a * b).sum::<f64>();
                (sim, self.insertion[slot], slot)
            })
            .collect();
        let k = k.min(scored.len());
        // Higher similarity first; older entries win exact ties.
        let order = |a: &(f64, u64, usize), b: &(f64, u64, usize)| {
            b.0.total_cmp(&a.0).then(a.1.cmp(&b.1))
        };
        if k < scored.len() {
            scored.select_nth_unstable_by(k - 1, order);
        }
        let mut probs = vec![0.0; self.num_classes];
        for &(_, _, slot) in &scored[..k] {
            for (acc, p) in probs.iter_mut().zip(&self.probs[slot]) {
                *acc += p;
            }
        }
        for p in probs.iter_mut() {
            *p /= k as f64;
        }
        Ok(Vote {
            label: argmax(&probs),
            probs,
        })
    }

    pub fn soft_vote_batch(&self, queries: &[Vec<f64>], k: usize) -> Result<Vec<Vote>> {
        queries.iter().map(|q| self.soft_vote(q, k)).collect()
    }

    /// Writes the bank as CSV, oldest entry first:
    /// `insertion_index,f0..f{d-1},p0..p{C-1}`.
    pub fn dump<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let mut header = vec!["insertion_index".to_string()];
        header.extend((0..self.feature_dim).map(|i| format!("f{i}")));
        header.extend((0..self.num_classes).map(|i| format!("p{i}")));
        writeln!(w, "{}", header.join(","))?;
        for e in self.entries() {
            let mut row = vec![e.insertion_index.to_string()];
            row.extend(e.feature.iter().map(|x| format!("{x:e}")));
            row.extend(e.probs.iter().map(|x| format!("{x:e}")));
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// Mean cross-entropy between hard pseudo labels and the softmax of `logits` (`[B, C]`).
pub fn pseudo_label_loss(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let (b, c) = logits.dims2()?;
    if labels.len() != b {
        return Err(Error::Input(format!(
            "{} labels for a batch of {b}",
            labels.len()
        )));
    }
    let mut onehot = vec![0.0f64; b * c];
    for (i, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(Error::Input(format!("label {y} out of range for {c} classes")));
        }
        onehot[i * c + y] = 1.0;
    }
    let onehot = Tensor::from_vec(onehot, (b, c), logits.device())?.to_dtype(logits.dtype())?;
    let nll = (log_softmax_last(logits)? * onehot)?.sum(D::Minus1)?.neg()?;
    Ok(nll.mean_all()?)
}

/// Converts a `[B, n]` tensor to `f64` rows.
pub fn tensor_rows(t: &Tensor) -> Result<Vec<Vec<f64>>> {
    Ok(t.detach().to_dtype(DType::F64)?.to_vec2::<f64>()?)
}
