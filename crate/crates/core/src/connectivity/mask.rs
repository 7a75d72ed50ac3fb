use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Which input channels feed each output channel of a convolution.
///
/// The same pattern applies at every spatial kernel position. Stored as a
/// dense `n_out × n_in` boolean matrix, row-major by output channel.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "MaskFile", into = "MaskFile")]
pub struct ConnectivityMask {
    n_in: usize,
    n_out: usize,
    seed: u64,
    active: Vec<bool>,
}

/// On-disk form: sorted `[out, in]` pairs so files are byte-stable.
#[derive(Serialize, Deserialize)]
struct MaskFile {
    n_in: usize,
    n_out: usize,
    seed: u64,
    active: Vec<[usize; 2]>,
}

impl From<ConnectivityMask> for MaskFile {
    fn from(m: ConnectivityMask) -> Self {
        MaskFile {
            n_in: m.n_in,
            n_out: m.n_out,
            seed: m.seed,
            active: m.pairs(),
        }
    }
}

impl TryFrom<MaskFile> for ConnectivityMask {
    type Error = Error;

    fn try_from(f: MaskFile) -> Result<Self> {
        let mut m = ConnectivityMask::empty(f.n_in, f.n_out, f.seed)?;
        for [o, i] in f.active {
            if o >= f.n_out || i >= f.n_in {
                return Err(Error::Config(format!(
                    "mask entry [{o}, {i}] outside {}x{}",
                    f.n_out, f.n_in
                )));
            }
            m.set(o, i, true);
        }
        Ok(m)
    }
}

/// How sparse connections are drawn.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskSampler {
    /// Every output row gets exactly `max(1, ⌈α·n_in⌉)` inputs.
    #[default]
    FixedFanIn,
    /// Each entry is kept independently with probability α.
    Bernoulli,
}

impl ConnectivityMask {
    /// All-false mask; not a valid live mask until populated.
    pub fn empty(n_in: usize, n_out: usize, seed: u64) -> Result<Self> {
        if n_in == 0 || n_out == 0 {
            return Err(Error::Config(format!(
                "mask dims must be >= 1, got {n_out}x{n_in}"
            )));
        }
        Ok(Self {
            n_in,
            n_out,
            seed,
            active: vec![false; n_in * n_out],
        })
    }

    pub fn n_in(&self) -> usize {
        self.n_in
    }

    pub fn n_out(&self) -> usize {
        self.n_out
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn get(&self, out: usize, input: usize) -> bool {
        self.active[out * self.n_in + input]
    }

    pub fn set(&mut self, out: usize, input: usize, on: bool) {
        self.active[out * self.n_in + input] = on;
    }

    pub fn row(&self, out: usize) -> &[bool] {
        &self.active[out * self.n_in..(out + 1) * self.n_in]
    }

    /// Connected input channels of `out`, ascending.
    pub fn row_inputs(&self, out: usize) -> Vec<usize> {
        self.row(out)
            .iter()
            .enumerate()
            .filter_map(|(i, &a)| a.then_some(i))
            .collect()
    }

    pub fn row_sums(&self) -> Vec<usize> {
        (0..self.n_out)
            .map(|o| self.row(o).iter().filter(|&&a| a).count())
            .collect()
    }

    pub fn col_sums(&self) -> Vec<usize> {
        let mut sums = vec![0; self.n_in];
        for o in 0..self.n_out {
            for (s, &a) in sums.iter_mut().zip(self.row(o)) {
                *s += a as usize;
            }
        }
        sums
    }

    pub fn count(&self) -> usize {
        self.active.iter().filter(|&&a| a).count()
    }

    pub fn capacity(&self) -> usize {
        self.n_in * self.n_out
    }

    pub fn density(&self) -> f64 {
        self.count() as f64 / self.capacity() as f64
    }

    pub fn is_full(&self) -> bool {
        self.active.iter().all(|&a| a)
    }

    /// Sorted `[out, in]` pairs of active entries.
    pub fn pairs(&self) -> Vec<[usize; 2]> {
        (0..self.n_out)
            .flat_map(|o| self.row_inputs(o).into_iter().map(move |i| [o, i]))
            .collect()
    }

    /// True when every entry of `self` is also set in `other`.
    pub fn is_subset_of(&self, other: &ConnectivityMask) -> bool {
        self.n_in == other.n_in
            && self.n_out == other.n_out
            && self
                .active
                .iter()
                .zip(&other.active)
                .all(|(&a, &b)| !a || b)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("mask serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Dense connectivity: every input feeds every output.
pub fn full_mask(n_in: usize, n_out: usize) -> Result<ConnectivityMask> {
    let mut m = ConnectivityMask::empty(n_in, n_out, 0)?;
    m.active.iter_mut().for_each(|a| *a = true);
    Ok(m)
}

/// `⌈x⌉` tolerant of representation error just above an integer.
pub(crate) fn ceil_guarded(x: f64) -> usize {
    (x - 1e-9).ceil().max(0.0) as usize
}

pub(crate) fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha <= 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "alpha must lie in (0, 1], got {alpha}"
        )))
    }
}

/// Fan-in per output row under the fixed fan-in sampler.
pub fn fan_in(n_in: usize, alpha: f64) -> usize {
    ceil_guarded(alpha * n_in as f64).clamp(1, n_in)
}

/// Random channel-sparse mask with fixed fan-in `max(1, ⌈α·n_in⌉)` per
/// output, followed by a repair pass that gives every input channel at
/// least one outgoing connection while keeping the fan-in exact whenever
/// `fan_in · n_out >= n_in`.
pub fn sparse_random_mask(
    n_in: usize,
    n_out: usize,
    alpha: f64,
    seed: u64,
) -> Result<ConnectivityMask> {
    sparse_random_mask_with(n_in, n_out, alpha, seed, MaskSampler::FixedFanIn)
}

/// As [`sparse_random_mask`] with an explicit sampler.
///
/// Bernoulli masks keep every entry with probability `alpha`, force one
/// input per row, and repair empty columns by adding a connection.
pub fn sparse_random_mask_with(
    n_in: usize,
    n_out: usize,
    alpha: f64,
    seed: u64,
    sampler: MaskSampler,
) -> Result<ConnectivityMask> {
    check_alpha(alpha)?;
    let mut m = ConnectivityMask::empty(n_in, n_out, seed)?;
    let mut rng = rng::from_seed(seed);
    match sampler {
        MaskSampler::FixedFanIn => {
            let f = fan_in(n_in, alpha);
            let mut order: Vec<usize> = (0..n_in).collect();
            for o in 0..n_out {
                order.shuffle(&mut rng);
                for &i in &order[..f] {
                    m.set(o, i, true);
                }
            }
        }
        MaskSampler::Bernoulli => {
            for o in 0..n_out {
                let u: Vec<f64> = (0..n_in).map(|_| rng.random::<f64>()).collect();
                let mut best = 0;
                for (i, &ui) in u.iter().enumerate() {
                    if ui < alpha {
                        m.set(o, i, true);
                    }
                    if ui < u[best] {
                        best = i;
                    }
                }
                // an output with no inputs would be dead
                m.set(o, best, true);
            }
        }
    }
    match sampler {
        MaskSampler::FixedFanIn => repair_by_swap(&mut m, &mut rng),
        MaskSampler::Bernoulli => repair_by_adding(&mut m, &mut rng),
    }
    Ok(m)
}

fn repair_by_adding<R: Rng + ?Sized>(m: &mut ConnectivityMask, rng: &mut R) {
    let repair_rows: Vec<usize> = (0..m.n_in).map(|_| rng.random_range(0..m.n_out)).collect();
    let cols = m.col_sums();
    for (i, (&sum, &row)) in cols.iter().zip(&repair_rows).enumerate() {
        if sum == 0 {
            m.set(row, i, true);
        }
    }
}

/// Moves one connection of a randomly chosen row onto each empty column,
/// taking it from an input that keeps another outgoing connection. Row
/// fan-in is unchanged. When rows are too few to cover every column the
/// remaining empty columns get an added connection instead.
fn repair_by_swap<R: Rng + ?Sized>(m: &mut ConnectivityMask, rng: &mut R) {
    let mut cols = m.col_sums();
    for i in 0..m.n_in {
        if cols[i] > 0 {
            continue;
        }
        let start = rng.random_range(0..m.n_out);
        let mut placed = false;
        for step in 0..m.n_out {
            let o = (start + step) % m.n_out;
            let donors: Vec<usize> = (0..m.n_in)
                .filter(|&j| m.get(o, j) && cols[j] >= 2)
                .collect();
            if donors.is_empty() {
                continue;
            }
            let j = donors[rng.random_range(0..donors.len())];
            m.set(o, j, false);
            cols[j] -= 1;
            m.set(o, i, true);
            cols[i] += 1;
            placed = true;
            break;
        }
        if !placed {
            m.set(start, i, true);
            cols[i] += 1;
        }
    }
}

/// Activates `min(additional, #inactive)` uniformly chosen inactive entries.
pub fn densify<R: Rng + ?Sized>(
    mask: &ConnectivityMask,
    additional: usize,
    rng: &mut R,
) -> ConnectivityMask {
    let inactive: Vec<usize> = mask
        .active
        .iter()
        .enumerate()
        .filter_map(|(k, &a)| (!a).then_some(k))
        .collect();
    let take = additional.min(inactive.len());
    let mut out = mask.clone();
    if take == 0 {
        return out;
    }
    for k in rand::seq::index::sample(rng, inactive.len(), take) {
        out.active[inactive[k]] = true;
    }
    out
}
