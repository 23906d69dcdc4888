//! Parameter subregions from two importance tables.
//!
//! Addresses are represented by their index in parameter-address order, so
//! ascending index is ascending address. Every set is a sorted `Vec<usize>`.

use std::path::Path;

use crate::binio::{FormatError, Reader, Writer};
use crate::importance::ImportanceTable;
use crate::lora::AdapterSet;

#[derive(Debug, thiserror::Error)]
pub enum PartitionError {
    #[error("{name} must be in [0, 1], got {value}")]
    Fraction { name: &'static str, value: f64 },
    #[error("all importance scores are zero; no ranking exists")]
    AllZero,
    #[error("tables cover {0} and {1} addresses")]
    Coverage(usize, usize),
    #[error(transparent)]
    Format(#[from] FormatError),
}

fn check_fraction(name: &'static str, value: f64) -> Result<(), PartitionError> {
    if !(0.0..=1.0).contains(&value) {
        return Err(PartitionError::Fraction { name, value });
    }
    Ok(())
}

/// Indices sorted by score descending, ties by ascending index.
pub fn rank_desc(scores: &[f64], indices: impl IntoIterator<Item = usize>) -> Vec<usize> {
    let mut order: Vec<usize> = indices.into_iter().collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// Minimal top-ranked prefix whose score sum reaches `theta` of the total.
///
/// `theta = 1` selects every index, including zero-score ones.
pub fn select_by_cumulative(scores: &[f64], theta: f64) -> Result<Vec<usize>, PartitionError> {
    check_fraction("theta", theta)?;
    if theta == 0.0 {
        return Ok(Vec::new());
    }
    if theta == 1.0 {
        return Ok((0..scores.len()).collect());
    }
    let order = rank_desc(scores, 0..scores.len());
    // Summed in rank order so the last prefix sum is exactly the total.
    let total: f64 = order.iter().map(|&j| scores[j]).sum();
    if total <= 0.0 {
        return Err(PartitionError::AllZero);
    }
    let target = theta * total;
    let mut cum = 0.0;
    let mut take = order.len();
    for (k, &j) in order.iter().enumerate() {
        cum += scores[j];
        if cum >= target {
            take = k + 1;
            break;
        }
    }
    let mut chosen = order[..take].to_vec();
    chosen.sort_unstable();
    Ok(chosen)
}

fn difference(a: &[usize], b: &[usize]) -> Vec<usize> {
    a.iter().copied().filter(|x| b.binary_search(x).is_err()).collect()
}

fn intersection(a: &[usize], b: &[usize]) -> Vec<usize> {
    a.iter().copied().filter(|x| b.binary_search(x).is_ok()).collect()
}

fn union(a: &[usize], b: &[usize]) -> Vec<usize> {
    let mut u: Vec<usize> = a.iter().chain(b).copied().collect();
    u.sort_unstable();
    u.dedup();
    u
}

/// `|a ∩ b| / |a ∪ b|`, 0 when both are empty.
pub fn jaccard(a: &[usize], b: &[usize]) -> f64 {
    let u = union(a, b).len();
    if u == 0 {
        return 0.0;
    }
    intersection(a, b).len() as f64 / u as f64
}

/// `⌈fraction · n⌉`, with a small slack so products such as `0.3 · 10`
/// that land one ulp above an integer do not round up.
pub fn ceil_count(fraction: f64, n: usize) -> usize {
    ((fraction * n as f64 - 1e-9).ceil().max(0.0) as usize).min(n)
}

/// Threshold selections for both systems and their set algebra.
#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    pub theta: f64,
    pub total: usize,
    pub s1: Vec<usize>,
    pub s2: Vec<usize>,
    pub omega1_only: Vec<usize>,
    pub omega2_only: Vec<usize>,
    pub omega_shared: Vec<usize>,
    /// `omega_shared` ranked by the System-1 score.
    pub shared_by_s1: Vec<usize>,
    /// `omega_shared` ranked by the System-2 score.
    pub shared_by_s2: Vec<usize>,
}

impl Partition {
    /// `|S1 ∪ S2|` as a percentage of all adapter scalars.
    pub fn percent_param(&self) -> f64 {
        100.0 * union(&self.s1, &self.s2).len() as f64 / self.total as f64
    }
}

pub fn build_partition(
    t1: &ImportanceTable,
    t2: &ImportanceTable,
    theta: f64,
) -> Result<Partition, PartitionError> {
    if t1.len() != t2.len() {
        return Err(PartitionError::Coverage(t1.len(), t2.len()));
    }
    let s1 = select_by_cumulative(&t1.importance, theta)?;
    let s2 = select_by_cumulative(&t2.importance, theta)?;
    let omega_shared = intersection(&s1, &s2);
    Ok(Partition {
        theta,
        total: t1.len(),
        omega1_only: difference(&s1, &s2),
        omega2_only: difference(&s2, &s1),
        shared_by_s1: rank_desc(&t1.importance, omega_shared.iter().copied()),
        shared_by_s2: rank_desc(&t2.importance, omega_shared.iter().copied()),
        omega_shared,
        s1,
        s2,
    })
}

/// Stage 1 trains its exclusive set plus the top `⌈α·|shared|⌉` shared
/// scalars by System-1 score; stage 2 likewise with `β` and System-2 score.
pub fn stage_active_sets(
    p: &Partition,
    alpha: f64,
    beta: f64,
) -> Result<(Vec<usize>, Vec<usize>), PartitionError> {
    check_fraction("alpha", alpha)?;
    check_fraction("beta", beta)?;
    let n = p.omega_shared.len();
    let stage1 = union(&p.omega1_only, &p.shared_by_s1[..ceil_count(alpha, n)]);
    let stage2 = union(&p.omega2_only, &p.shared_by_s2[..ceil_count(beta, n)]);
    Ok((stage1, stage2))
}

/// A partition with its α/β stage sets.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionSpec {
    pub partition: Partition,
    pub alpha: f64,
    pub beta: f64,
    pub stage1_active: Vec<usize>,
    pub stage2_active: Vec<usize>,
}

impl PartitionSpec {
    pub fn new(partition: Partition, alpha: f64, beta: f64) -> Result<Self, PartitionError> {
        let (stage1_active, stage2_active) = stage_active_sets(&partition, alpha, beta)?;
        Ok(Self {
            partition,
            alpha,
            beta,
            stage1_active,
            stage2_active,
        })
    }
}

const MAGIC: [u8; 4] = *b"DSPT";
const VERSION: u32 = 1;

/// Header: theta, alpha, beta (f64), total and set count (u64), the nine set
/// sizes (u64); then each set's indices as u64, in header order.
pub fn encode(spec: &PartitionSpec) -> Vec<u8> {
    let p = &spec.partition;
    let sets = spec_sets(spec);
    let mut w = Writer::new(MAGIC, VERSION);
    w.f64(p.theta);
    w.f64(spec.alpha);
    w.f64(spec.beta);
    w.u64(p.total as u64);
    w.u64(sets.len() as u64);
    for s in &sets {
        w.u64(s.len() as u64);
    }
    for s in &sets {
        for &j in *s {
            w.u64(j as u64);
        }
    }
    w.into_bytes()
}

fn spec_sets(spec: &PartitionSpec) -> [&Vec<usize>; 9] {
    let p = &spec.partition;
    [
        &p.s1,
        &p.s2,
        &p.omega1_only,
        &p.omega2_only,
        &p.omega_shared,
        &p.shared_by_s1,
        &p.shared_by_s2,
        &spec.stage1_active,
        &spec.stage2_active,
    ]
}

pub fn decode(bytes: &[u8]) -> Result<PartitionSpec, FormatError> {
    let mut r = Reader::open(bytes, MAGIC, VERSION)?;
    let theta = r.f64()?;
    let alpha = r.f64()?;
    let beta = r.f64()?;
    let total = r.u64()? as usize;
    let n_sets = r.u64()? as usize;
    if n_sets != 9 {
        return Err(FormatError::Invalid(format!("expected 9 sets, found {n_sets}")));
    }
    r.require(9 * 8)?;
    let sizes: Vec<usize> = (0..9).map(|_| r.u64().map(|v| v as usize)).collect::<Result<_, _>>()?;
    r.require(sizes.iter().sum::<usize>() * 8)?;
    let mut sets = Vec::with_capacity(9);
    for &n in &sizes {
        let set: Vec<usize> = (0..n).map(|_| r.u64().map(|v| v as usize)).collect::<Result<_, _>>()?;
        if set.iter().any(|&j| j >= total) {
            return Err(FormatError::Invalid("address index out of range".into()));
        }
        sets.push(set);
    }
    r.finish()?;
    let mut it = sets.into_iter();
    let mut next = || it.next().expect("nine sets");
    let partition = Partition {
        theta,
        total,
        s1: next(),
        s2: next(),
        omega1_only: next(),
        omega2_only: next(),
        omega_shared: next(),
        shared_by_s1: next(),
        shared_by_s2: next(),
    };
    Ok(PartitionSpec {
        partition,
        alpha,
        beta,
        stage1_active: next(),
        stage2_active: next(),
    })
}

pub fn save(path: &Path, spec: &PartitionSpec) -> Result<(), FormatError> {
    crate::binio::write_atomic(path, &encode(spec))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<PartitionSpec, FormatError> {
    decode(&std::fs::read(path)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Category {
    S1Only,
    S2Only,
    Shared,
    Neither,
}

impl Category {
    pub fn as_str(self) -> &'static str {
        match self {
            Category::S1Only => "s1only",
            Category::S2Only => "s2only",
            Category::Shared => "shared",
            Category::Neither => "neither",
        }
    }
}

pub fn categorize(p: &Partition) -> Vec<Category> {
    let mut cats = vec![Category::Neither; p.total];
    for &j in &p.omega1_only {
        cats[j] = Category::S1Only;
    }
    for &j in &p.omega2_only {
        cats[j] = Category::S2Only;
    }
    for &j in &p.omega_shared {
        cats[j] = Category::Shared;
    }
    cats
}

/// Scatter CSV: `layer,site,matrix,index,I1,I2,category` per address, then a
/// `#` summary line with the non-overlap fractions of S1 and S2 and their Jaccard.
pub fn export_scatter(
    t1: &ImportanceTable,
    t2: &ImportanceTable,
    p: &Partition,
    adapters: &AdapterSet,
    path: &Path,
) -> Result<(), PartitionError> {
    if t1.len() != p.total || t2.len() != p.total || adapters.len() != p.total {
        return Err(PartitionError::Coverage(t1.len().min(t2.len()), p.total));
    }
    let cats = categorize(p);
    let mut out = String::from("layer,site,matrix,index,I1,I2,category\n");
    for (j, addr) in adapters.addresses().enumerate() {
        out.push_str(&format!(
            "{},{},{:?},{},{},{},{}\n",
            addr.layer,
            addr.site,
            addr.matrix,
            addr.flat_index,
            t1.importance[j],
            t2.importance[j],
            cats[j].as_str()
        ));
    }
    let frac = |part: usize, whole: usize| if whole == 0 { 0.0 } else { part as f64 / whole as f64 };
    out.push_str(&format!(
        "# s1_nonoverlap={},s2_nonoverlap={},jaccard={}\n",
        frac(p.omega1_only.len(), p.s1.len()),
        frac(p.omega2_only.len(), p.s2.len()),
        jaccard(&p.s1, &p.s2)
    ));
    crate::binio::write_atomic(path, out.as_bytes()).map_err(FormatError::from)?;
    Ok(())
}
