//! Chooses which model codes each sequence so that mean quality is highest
//! while model sizes plus weighted data bytes stay within a budget.
//!
//! Every nonempty model subset is searched exactly by branch and bound. The
//! bound is a dynamic program over data costs discretized to a granularity
//! `g`; rounding each cost down keeps it admissible, so `g` only affects speed.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use crate::error::{Error, Result};

pub const DEFAULT_DATA_WEIGHT: u64 = 100;
/// Upper limit on discretization levels of the bound.
pub const MAX_LEVELS: u128 = 1 << 20;
/// Upper limit on cells of one bound table.
pub const MAX_BOUND_CELLS: u128 = 1 << 24;
pub const MAX_MODELS: usize = 16;
/// `brute_force_allocate` accepts instances with at most `2^BRUTE_FORCE_BITS` assignments.
pub const BRUTE_FORCE_BITS: f64 = 24.0;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelRecord {
    pub model: String,
    pub bytes: u64,
    pub ms_ssim: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceRecords {
    pub id: String,
    pub frames: u64,
    pub records: Vec<ModelRecord>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceRDTable {
    pub sequences: Vec<SequenceRecords>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Budget {
    pub total_bytes: u128,
    pub data_weight: u64,
    pub model_sizes: BTreeMap<String, u64>,
}

impl Budget {
    pub fn new(total_bytes: u128, model_sizes: BTreeMap<String, u64>) -> Self {
        Self {
            total_bytes,
            data_weight: DEFAULT_DATA_WEIGHT,
            model_sizes,
        }
    }
}

/// `model_bytes + weight × data_bytes`.
pub fn total_cost(model_bytes: u128, data_bytes: u128, weight: u64) -> u128 {
    model_bytes + weight as u128 * data_bytes
}

#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    /// `(sequence id, model id)` in table order.
    pub choices: Vec<(String, String)>,
    /// Distinct models the choices use, sorted.
    pub models: Vec<String>,
    pub model_bytes: u128,
    pub data_bytes: u128,
    pub cost: u128,
    /// Frame-weighted mean MS-SSIM.
    pub quality: f64,
}

impl SequenceRDTable {
    /// Model ids, sorted.
    pub fn models(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self
            .sequences
            .iter()
            .flat_map(|s| s.records.iter().map(|r| r.model.as_str()))
            .collect();
        set.into_iter().map(str::to_string).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.sequences.is_empty() {
            return bad("table has no sequences".into());
        }
        let models = self.models();
        let mut ids = BTreeSet::new();
        for s in &self.sequences {
            if !ids.insert(&s.id) {
                return bad(format!("sequence `{}` listed twice", s.id));
            }
            if s.frames == 0 {
                return bad(format!("sequence `{}` has no frames", s.id));
            }
            let mut seen = BTreeSet::new();
            for r in &s.records {
                if !seen.insert(&r.model) {
                    return bad(format!("sequence `{}` has two records for `{}`", s.id, r.model));
                }
                if r.bytes == 0 {
                    return bad(format!("sequence `{}` model `{}` has zero bytes", s.id, r.model));
                }
                if !(0.0..=1.0).contains(&r.ms_ssim) {
                    return bad(format!(
                        "sequence `{}` model `{}` has MS-SSIM {} outside [0, 1]",
                        s.id, r.model, r.ms_ssim
                    ));
                }
            }
            if seen.len() != models.len() {
                return bad(format!("sequence `{}` lacks records for some models", s.id));
            }
        }
        Ok(())
    }

    /// One `sequence frames model bytes ms_ssim` record per line; blank lines
    /// and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut sequences: Vec<SequenceRecords> = Vec::new();
        let mut index: BTreeMap<String, usize> = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<_> = line.split_whitespace().collect();
            let err = |what: &str| Error::InvalidArgument(format!("line {}: {what}", n + 1));
            if fields.len() != 5 {
                return Err(err("expected `sequence frames model bytes ms_ssim`"));
            }
            let frames: u64 = fields[1].parse().map_err(|_| err("bad frame count"))?;
            let record = ModelRecord {
                model: fields[2].to_string(),
                bytes: fields[3].parse().map_err(|_| err("bad byte count"))?,
                ms_ssim: fields[4].parse().map_err(|_| err("bad MS-SSIM"))?,
            };
            match index.get(fields[0]) {
                Some(&i) => {
                    if sequences[i].frames != frames {
                        return Err(err("frame count differs from earlier record"));
                    }
                    sequences[i].records.push(record);
                }
                None => {
                    index.insert(fields[0].to_string(), sequences.len());
                    sequences.push(SequenceRecords {
                        id: fields[0].to_string(),
                        frames,
                        records: vec![record],
                    });
                }
            }
        }
        let table = Self { sequences };
        table.validate()?;
        Ok(table)
    }

    fn record(&self, seq: usize, model: &str) -> &ModelRecord {
        self.sequences[seq]
            .records
            .iter()
            .find(|r| r.model == model)
            .expect("validated table")
    }
}

impl Assignment {
    /// The chosen records in table format followed by a summary comment.
    pub fn to_text(&self, table: &SequenceRDTable) -> String {
        let mut out = String::new();
        for (i, (seq, model)) in self.choices.iter().enumerate() {
            let r = table.record(i, model);
            let _ = writeln!(out, "{seq} {} {model} {} {}", table.sequences[i].frames, r.bytes, r.ms_ssim);
        }
        let _ = writeln!(
            out,
            "# total_cost={} model_bytes={} data_bytes={} mean_ms_ssim={} models={}",
            self.cost,
            self.model_bytes,
            self.data_bytes,
            self.quality,
            self.models.join(",")
        );
        out
    }
}

/// The instance in index form: `choices[s][m]` for model `m` of the sorted list.
struct Instance {
    models: Vec<String>,
    sizes: Vec<u128>,
    /// `(weighted data cost, frames × MS-SSIM, data bytes)`.
    choices: Vec<Vec<(u128, f64, u64)>>,
    frames: u128,
    weight: u64,
    budget: u128,
}

impl Instance {
    fn new(table: &SequenceRDTable, budget: &Budget) -> Result<Self> {
        table.validate()?;
        if budget.total_bytes == 0 {
            return Err(Error::InvalidArgument("budget must be positive".into()));
        }
        if budget.data_weight == 0 {
            return Err(Error::InvalidArgument("data weight must be at least 1".into()));
        }
        let models = table.models();
        if models.len() > MAX_MODELS {
            return Err(Error::InvalidArgument(format!(
                "{} candidate models; at most {MAX_MODELS} are supported",
                models.len()
            )));
        }
        let sizes = models
            .iter()
            .map(|m| {
                budget
                    .model_sizes
                    .get(m)
                    .map(|&s| s as u128)
                    .ok_or_else(|| Error::InvalidArgument(format!("no size given for model `{m}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        let choices = (0..table.sequences.len())
            .map(|s| {
                let frames = table.sequences[s].frames as f64;
                models
                    .iter()
                    .map(|m| {
                        let r = table.record(s, m);
                        (budget.data_weight as u128 * r.bytes as u128, frames * r.ms_ssim, r.bytes)
                    })
                    .collect()
            })
            .collect();
        Ok(Self {
            models,
            sizes,
            choices,
            frames: table.sequences.iter().map(|s| s.frames as u128).sum(),
            weight: budget.data_weight,
            budget: budget.total_bytes,
        })
    }

    /// Quality sum accumulated in sequence order, so that every search
    /// computes bit-identical totals for the same assignment.
    fn quality_sum(&self, picks: &[usize]) -> f64 {
        picks.iter().enumerate().fold(0.0, |acc, (s, &m)| acc + self.choices[s][m].1)
    }

    fn cost(&self, picks: &[usize]) -> (u128, u128) {
        let used: BTreeSet<usize> = picks.iter().copied().collect();
        let model_bytes = used.iter().map(|&m| self.sizes[m]).sum();
        let data: u128 = picks.iter().enumerate().map(|(s, &m)| self.choices[s][m].2 as u128).sum();
        (model_bytes, data)
    }

    fn assignment(&self, table: &SequenceRDTable, picks: &[usize]) -> Assignment {
        let (model_bytes, data_bytes) = self.cost(picks);
        let used: BTreeSet<usize> = picks.iter().copied().collect();
        Assignment {
            choices: picks
                .iter()
                .enumerate()
                .map(|(s, &m)| (table.sequences[s].id.clone(), self.models[m].clone()))
                .collect(),
            models: used.iter().map(|&m| self.models[m].clone()).collect(),
            model_bytes,
            data_bytes,
            cost: total_cost(model_bytes, data_bytes, self.weight),
            quality: self.quality_sum(picks) / self.frames as f64,
        }
    }

    /// Cheapest possible total over all assignments.
    fn min_cost(&self) -> u128 {
        (1..1usize << self.models.len())
            .map(|mask| {
                let members: Vec<usize> = (0..self.models.len()).filter(|m| mask >> m & 1 == 1).collect();
                let models: u128 = members.iter().map(|&m| self.sizes[m]).sum();
                let data: u128 = self
                    .choices
                    .iter()
                    .map(|c| members.iter().map(|&m| c[m].0).min().expect("nonempty"))
                    .sum();
                models + data
            })
            .min()
            .expect("at least one model")
    }

    /// Candidate ordering: higher quality, then lower cost, then smaller model ids.
    fn better(&self, a: &Candidate, b: &Candidate) -> bool {
        match a.quality.partial_cmp(&b.quality).expect("finite") {
            Ordering::Greater => true,
            Ordering::Less => false,
            Ordering::Equal => match a.cost.cmp(&b.cost) {
                Ordering::Less => true,
                Ordering::Greater => false,
                Ordering::Equal => a.picks < b.picks,
            },
        }
    }

    fn candidate(&self, picks: Vec<usize>) -> Candidate {
        let (m, d) = self.cost(&picks);
        Candidate {
            quality: self.quality_sum(&picks),
            cost: total_cost(m, d, self.weight),
            picks,
        }
    }
}

#[derive(Clone, Debug)]
struct Candidate {
    quality: f64,
    cost: u128,
    picks: Vec<usize>,
}

/// Branch and bound over one subset, charged for all of its models.
struct SubsetSearch<'a> {
    inst: &'a Instance,
    /// Per sequence, the subset's non-dominated options ordered by quality.
    options: Vec<Vec<usize>>,
    granularity: u128,
    /// `bound[s][k]`: best quality of sequences `s..` with floored cost at most `k`.
    bound: Vec<Vec<f64>>,
    /// Exact cheapest data cost of sequences `s..`.
    min_suffix: Vec<u128>,
    slack: f64,
    charge: u128,
    best: Option<Candidate>,
}

impl<'a> SubsetSearch<'a> {
    fn new(inst: &'a Instance, members: &[usize], capacity: u128) -> Self {
        let n = inst.choices.len();
        let options: Vec<Vec<usize>> = inst
            .choices
            .iter()
            .map(|c| {
                let mut keep: Vec<usize> = members
                    .iter()
                    .copied()
                    .filter(|&a| {
                        // drop options another member matches or beats on both axes;
                        // an exact tie goes to the smaller model index
                        !members.iter().any(|&b| {
                            b != a
                                && c[b].1 >= c[a].1
                                && c[b].0 <= c[a].0
                                && (c[b].1 > c[a].1 || c[b].0 < c[a].0 || b < a)
                        })
                    })
                    .collect();
                keep.sort_by(|&a, &b| c[b].1.partial_cmp(&c[a].1).expect("finite").then(a.cmp(&b)));
                keep
            })
            .collect();
        let levels = MAX_LEVELS.min(MAX_BOUND_CELLS / (n as u128 + 1)).max(1);
        let granularity = capacity.div_ceil(levels).max(1);
        let top = (capacity / granularity) as usize;
        let mut bound = vec![vec![0.0; top + 1]; n + 1];
        let mut min_suffix = vec![0u128; n + 1];
        for s in (0..n).rev() {
            let (head, tail) = bound.split_at_mut(s + 1);
            let (row, next) = (&mut head[s], &tail[0]);
            for (k, cell) in row.iter_mut().enumerate() {
                *cell = options[s]
                    .iter()
                    .filter_map(|&m| {
                        let w = (inst.choices[s][m].0 / granularity) as usize;
                        (w <= k && next[k - w] > f64::NEG_INFINITY).then(|| inst.choices[s][m].1 + next[k - w])
                    })
                    .fold(f64::NEG_INFINITY, f64::max);
            }
            min_suffix[s] = min_suffix[s + 1] + options[s].iter().map(|&m| inst.choices[s][m].0).min().expect("nonempty");
        }
        let total: f64 = inst.choices.iter().map(|c| c.iter().map(|x| x.1).fold(0.0, f64::max)).sum();
        Self {
            inst,
            options,
            granularity,
            bound,
            min_suffix,
            // rounding differences between the bound and exact sums
            slack: 1e-9 * (1.0 + total),
            charge: 0,
            best: None,
        }
    }

    fn run(mut self, charge: u128, capacity: u128) -> Option<Candidate> {
        self.charge = charge;
        if self.min_suffix[0] > capacity {
            return None;
        }
        let mut picks = Vec::with_capacity(self.inst.choices.len());
        self.descend(0, &mut picks, 0.0, capacity);
        self.best
    }

    fn descend(&mut self, s: usize, picks: &mut Vec<usize>, quality: f64, remaining: u128) {
        let n = self.inst.choices.len();
        if s == n {
            let candidate = Candidate {
                quality,
                cost: self.charge + self.data_cost(picks),
                picks: picks.clone(),
            };
            if self.best.as_ref().is_none_or(|b| self.inst.better(&candidate, b)) {
                self.best = Some(candidate);
            }
            return;
        }
        if remaining < self.min_suffix[s] {
            return;
        }
        let level = ((remaining / self.granularity) as usize).min(self.bound[s].len() - 1);
        if let Some(best) = &self.best {
            if quality + self.bound[s][level] < best.quality - self.slack {
                return;
            }
        }
        for i in 0..self.options[s].len() {
            let m = self.options[s][i];
            let (cost, q, _) = self.inst.choices[s][m];
            if cost > remaining {
                continue;
            }
            picks.push(m);
            self.descend(s + 1, picks, quality + q, remaining - cost);
            picks.pop();
        }
    }

    fn data_cost(&self, picks: &[usize]) -> u128 {
        picks.iter().enumerate().map(|(s, &m)| self.inst.choices[s][m].0).sum()
    }
}

/// Highest-quality assignment within `budget`, counting only models it uses.
pub fn allocate(table: &SequenceRDTable, budget: &Budget) -> Result<Assignment> {
    let inst = Instance::new(table, budget)?;
    let mut best: Option<Candidate> = None;
    for mask in 1..1usize << inst.models.len() {
        let members: Vec<usize> = (0..inst.models.len()).filter(|m| mask >> m & 1 == 1).collect();
        let charge: u128 = members.iter().map(|&m| inst.sizes[m]).sum();
        let Some(capacity) = inst.budget.checked_sub(charge) else { continue };
        let Some(found) = SubsetSearch::new(&inst, &members, capacity).run(charge, capacity) else { continue };
        // rescore with only the models actually used
        let found = inst.candidate(found.picks);
        if best.as_ref().is_none_or(|b| inst.better(&found, b)) {
            best = Some(found);
        }
    }
    match best {
        Some(c) => Ok(inst.assignment(table, &c.picks)),
        None => Err(Error::Infeasible { min_cost: inst.min_cost() }),
    }
}

/// Exhaustive search under the same objective and tie-break; a test oracle.
pub fn brute_force_allocate(table: &SequenceRDTable, budget: &Budget) -> Result<Assignment> {
    let inst = Instance::new(table, budget)?;
    let (n, m) = (inst.choices.len(), inst.models.len());
    if n as f64 * (m as f64).log2() > BRUTE_FORCE_BITS {
        return Err(Error::InvalidArgument(format!(
            "{m}^{n} assignments exceed the exhaustive search limit"
        )));
    }
    let mut picks = vec![0usize; n];
    let mut best: Option<Candidate> = None;
    loop {
        let c = inst.candidate(picks.clone());
        if c.cost <= inst.budget && best.as_ref().is_none_or(|b| inst.better(&c, b)) {
            best = Some(c);
        }
        // odometer increment, last sequence fastest
        let mut s = n;
        loop {
            if s == 0 {
                return match best {
                    Some(c) => Ok(inst.assignment(table, &c.picks)),
                    None => Err(Error::Infeasible { min_cost: inst.min_cost() }),
                };
            }
            s -= 1;
            picks[s] += 1;
            if picks[s] < m {
                break;
            }
            picks[s] = 0;
        }
    }
}
