//! Seeded rollouts, empirical models and behavior-policy estimation.

use std::io::{BufRead, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{Kernel, Policy, SADist, SFn};
use crate::scalar::Real;

/// One observed transition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Transition {
    pub s: u32,
    pub a: u32,
    pub next: u32,
}

/// Episode metadata stored alongside the transitions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub n_states: usize,
    pub n_actions: usize,
    pub horizon: usize,
    pub episodes: usize,
    pub seed: u64,
}

/// Transitions in episode order, `horizon` per episode.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransitionDataset {
    pub header: DatasetHeader,
    pub samples: Vec<Transition>,
}

fn sample_index(weights: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            acc += w;
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}

struct RolloutTables {
    p: Vec<f64>,
    pi: Vec<f64>,
    rho0: Vec<f64>,
    ns: usize,
    na: usize,
}

impl RolloutTables {
    fn episode(&self, seed: u64, episode: usize, horizon: usize, out: &mut Vec<Transition>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(episode as u64);
        let mut s = sample_index(&self.rho0, rng.random::<f64>());
        for _ in 0..horizon {
            let a = sample_index(
                &self.pi[s * self.na..(s + 1) * self.na],
                rng.random::<f64>(),
            );
            let off = (s * self.na + a) * self.ns;
            let next = sample_index(&self.p[off..off + self.ns], rng.random::<f64>());
            out.push(Transition {
                s: s as u32,
                a: a as u32,
                next: next as u32,
            });
            s = next;
        }
    }
}

/// Roll out `episodes` trajectories of length `horizon`: `s0 ~ rho0`,
/// `a ~ pi(.|s)`, `s' ~ P(.|s,a)`. Episode `e` draws from ChaCha stream `e`
/// of `seed`, so the result does not depend on how episodes are scheduled.
pub fn rollout<T: Real>(
    p: &Kernel<T>,
    pi: &Policy<T>,
    rho0: &SFn<T>,
    horizon: usize,
    episodes: usize,
    seed: u64,
) -> Result<TransitionDataset> {
    if horizon == 0 || episodes == 0 {
        return Err(Error::InvalidParameter(
            "horizon and episodes must be positive".into(),
        ));
    }
    if p.shape() != pi.shape() || rho0.len() != p.n_states() {
        return Err(Error::Shape(
            "rollout: kernel, policy and start distribution".into(),
        ));
    }
    let total: f64 = rho0.values().iter().map(|v| v.as_f64()).sum();
    if rho0.values().iter().any(|v| !(*v >= T::zero())) || (total - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidProbability("start distribution".into()));
    }
    let (ns, na) = p.shape();
    let tables = RolloutTables {
        p: p.probs().iter().map(|v| v.as_f64()).collect(),
        pi: pi.probs().iter().map(|v| v.as_f64()).collect(),
        rho0: rho0.values().iter().map(|v| v.as_f64()).collect(),
        ns,
        na,
    };
    let workers = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
        .min(episodes.div_ceil(256))
        .max(1);
    let chunk = episodes.div_ceil(workers);
    let mut parts: Vec<Vec<Transition>> = Vec::with_capacity(workers);
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let tables = &tables;
                scope.spawn(move || {
                    let lo = w * chunk;
                    let hi = ((w + 1) * chunk).min(episodes);
                    let mut out = Vec::with_capacity(hi.saturating_sub(lo) * horizon);
                    for e in lo..hi {
                        tables.episode(seed, e, horizon, &mut out);
                    }
                    out
                })
            })
            .collect();
        for h in handles {
            parts.push(h.join().expect("rollout worker panicked"));
        }
    });
    Ok(TransitionDataset {
        header: DatasetHeader {
            n_states: ns,
            n_actions: na,
            horizon,
            episodes,
            seed,
        },
        samples: parts.concat(),
    })
}

impl TransitionDataset {
    pub fn new(header: DatasetHeader, samples: Vec<Transition>) -> Result<Self> {
        let d = Self { header, samples };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        let h = &self.header;
        if self.samples.len() != h.episodes * h.horizon {
            return Err(Error::Shape(format!(
                "{} samples for {} episodes of length {}",
                self.samples.len(),
                h.episodes,
                h.horizon
            )));
        }
        for t in &self.samples {
            if t.s as usize >= h.n_states
                || t.next as usize >= h.n_states
                || t.a as usize >= h.n_actions
            {
                return Err(Error::Shape(format!("transition {t:?} out of range")));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// The first `episodes` episodes.
    pub fn first_episodes(&self, episodes: usize) -> Self {
        let e = episodes.min(self.header.episodes);
        Self {
            header: DatasetHeader {
                episodes: e,
                ..self.header
            },
            samples: self.samples[..e * self.header.horizon].to_vec(),
        }
    }

    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "s,a,next")?;
        for t in &self.samples {
            writeln!(w, "{},{},{}", t.s, t.a, t.next)?;
        }
        Ok(())
    }

    pub fn read_csv(header: DatasetHeader, r: impl BufRead) -> Result<Self> {
        let mut samples = Vec::with_capacity(header.episodes * header.horizon);
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if i == 0 || line.trim().is_empty() {
                continue;
            }
            let mut it = line.split(',').map(|f| f.trim().parse::<u32>());
            match (it.next(), it.next(), it.next(), it.next()) {
                (Some(Ok(s)), Some(Ok(a)), Some(Ok(next)), None) => {
                    samples.push(Transition { s, a, next })
                }
                _ => return Err(Error::Config(format!("bad dataset line {}: {line}", i + 1))),
            }
        }
        Self::new(header, samples)
    }

    /// Writes `<stem>.csv` and `<stem>.json`.
    pub fn save(&self, stem: &Path) -> Result<()> {
        let f = std::fs::File::create(stem.with_extension("csv"))?;
        self.write_csv(std::io::BufWriter::new(f))?;
        std::fs::write(
            stem.with_extension("json"),
            serde_json::to_string_pretty(&self.header)?,
        )?;
        Ok(())
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let header: DatasetHeader =
            serde_json::from_str(&std::fs::read_to_string(stem.with_extension("json"))?)?;
        let f = std::fs::File::open(stem.with_extension("csv"))?;
        Self::read_csv(header, std::io::BufReader::new(f))
    }
}

/// Aggregated transition counts with the empirical kernel and weights.
#[derive(Debug, Clone)]
pub struct EmpiricalModel<T> {
    pub n_states: usize,
    pub n_actions: usize,
    /// `(s, a, s')` counts, indexed like kernel entries.
    pub counts: Vec<u64>,
    pub row_counts: Vec<u64>,
    pub total: u64,
    /// Count-normalized rows on visited pairs, zero rows elsewhere.
    pub p_hat: Kernel<T>,
    pub rho_hat: SADist<T>,
    pub visited: Vec<bool>,
}

pub fn empirical_model<T: Real>(data: &TransitionDataset) -> Result<EmpiricalModel<T>> {
    if data.is_empty() {
        return Err(Error::InvalidParameter("empty dataset".into()));
    }
    let (ns, na) = (data.header.n_states, data.header.n_actions);
    let mut counts = vec![0u64; ns * na * ns];
    let mut row_counts = vec![0u64; ns * na];
    for t in &data.samples {
        let row = t.s as usize * na + t.a as usize;
        counts[row * ns + t.next as usize] += 1;
        row_counts[row] += 1;
    }
    let total = data.samples.len() as u64;
    let mut probs = vec![T::zero(); ns * na * ns];
    for row in 0..ns * na {
        let n = row_counts[row];
        if n > 0 {
            let denom = T::from_u64(n).unwrap_or_else(T::nan);
            for next in 0..ns {
                let c = counts[row * ns + next];
                if c > 0 {
                    probs[row * ns + next] = T::from_u64(c).unwrap_or_else(T::nan) / denom;
                }
            }
        }
    }
    let tot = T::from_u64(total).unwrap_or_else(T::nan);
    let rho: Vec<T> = row_counts
        .iter()
        .map(|&c| T::from_u64(c).unwrap_or_else(T::nan) / tot)
        .collect();
    Ok(EmpiricalModel {
        n_states: ns,
        n_actions: na,
        visited: row_counts.iter().map(|&c| c > 0).collect(),
        p_hat: Kernel::new_substochastic(ns, na, probs)?,
        rho_hat: SADist::normalized(ns, na, rho)?,
        counts,
        row_counts,
        total,
    })
}

impl<T: Real> EmpiricalModel<T> {
    pub fn is_visited(&self, s: usize, a: usize) -> bool {
        self.visited[s * self.n_actions + a]
    }

    /// Aggregated `(s, a, s', count / total)` entries.
    pub fn weighted(&self) -> WeightedTransitions<T> {
        let ns = self.n_states;
        let tot = T::from_u64(self.total).unwrap_or_else(T::nan);
        let mut entries = Vec::new();
        for (idx, &c) in self.counts.iter().enumerate() {
            if c > 0 {
                let row = idx / ns;
                entries.push(WeightedTransition {
                    s: row / self.n_actions,
                    a: row % self.n_actions,
                    next: idx % ns,
                    w: T::from_u64(c).unwrap_or_else(T::nan) / tot,
                });
            }
        }
        WeightedTransitions {
            n_states: ns,
            n_actions: self.n_actions,
            entries,
            p_hat: self.p_hat.clone(),
            rho: self.rho_hat.clone(),
            visited: self.visited.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightedTransition<T> {
    pub s: usize,
    pub a: usize,
    pub next: usize,
    pub w: T,
}

/// Weighted `(s, a, s')` support that empirical objectives average over.
///
/// Built from counts ([`EmpiricalModel::weighted`]) or exactly from a
/// population pair `rho(s,a) P(s'|s,a)` ([`WeightedTransitions::population`]).
#[derive(Debug, Clone)]
pub struct WeightedTransitions<T> {
    pub n_states: usize,
    pub n_actions: usize,
    pub entries: Vec<WeightedTransition<T>>,
    pub p_hat: Kernel<T>,
    pub rho: SADist<T>,
    pub visited: Vec<bool>,
}

impl<T: Real> WeightedTransitions<T> {
    /// Expectation-weighted "data": every supported `(s, a, s')` with weight
    /// `rho(s,a) P(s'|s,a)`.
    pub fn population(p: &Kernel<T>, rho: &SADist<T>) -> Result<Self> {
        if p.shape() != rho.shape() {
            return Err(Error::Shape("population transitions".into()));
        }
        let (ns, na) = p.shape();
        let mut entries = Vec::new();
        let mut probs = vec![T::zero(); ns * na * ns];
        let mut visited = vec![false; ns * na];
        for s in 0..ns {
            for a in 0..na {
                let r = rho.get(s, a);
                if r > T::zero() {
                    visited[s * na + a] = true;
                    for (next, &pv) in p.row(s, a).iter().enumerate() {
                        if pv > T::zero() {
                            probs[(s * na + a) * ns + next] = pv;
                            entries.push(WeightedTransition {
                                s,
                                a,
                                next,
                                w: r * pv,
                            });
                        }
                    }
                }
            }
        }
        Ok(Self {
            n_states: ns,
            n_actions: na,
            entries,
            p_hat: Kernel::new_substochastic(ns, na, probs)?,
            rho: rho.clone(),
            visited,
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.n_states, self.n_actions)
    }

    pub fn n_visited(&self) -> usize {
        self.visited.iter().filter(|&&v| v).count()
    }
}

/// Per-state action frequencies with every entry floored at `eps_clip`: floored
/// entries sit exactly at `eps_clip` and the rest share the remaining mass in
/// proportion to their counts. Unvisited states get the uniform row.
pub fn estimate_behavior_policy<T: Real>(
    data: &TransitionDataset,
    eps_clip: T,
) -> Result<Policy<T>> {
    let (ns, na) = (data.header.n_states, data.header.n_actions);
    let eps = eps_clip.as_f64();
    if !(eps > 0.0 && eps <= 1.0 / na as f64 + 1e-15) {
        return Err(Error::InvalidParameter(format!(
            "clip level {eps} outside (0, 1/{na}]"
        )));
    }
    let mut counts = vec![0u64; ns * na];
    for t in &data.samples {
        counts[t.s as usize * na + t.a as usize] += 1;
    }
    let mut probs = Vec::with_capacity(ns * na);
    for s in 0..ns {
        let row = &counts[s * na..(s + 1) * na];
        let n: u64 = row.iter().sum();
        if n == 0 {
            probs.extend(std::iter::repeat_n(1.0 / na as f64, na));
            continue;
        }
        probs.extend(floor_row(
            row.iter().map(|&c| c as f64 / n as f64).collect(),
            eps,
        ));
    }
    Policy::normalized(ns, na, probs.into_iter().map(T::lit).collect())
}

/// Behavior estimate from weighted transitions: `rho(s,a) / rho(s)` floored like
/// [`estimate_behavior_policy`]. With count weights the two agree.
pub fn estimate_behavior_policy_weighted<T: Real>(
    data: &WeightedTransitions<T>,
    eps_clip: T,
) -> Result<Policy<T>> {
    let (ns, na) = data.shape();
    let eps = eps_clip.as_f64();
    if !(eps > 0.0 && eps <= 1.0 / na as f64 + 1e-15) {
        return Err(Error::InvalidParameter(format!(
            "clip level {eps} outside (0, 1/{na}]"
        )));
    }
    let mut probs = Vec::with_capacity(ns * na);
    for s in 0..ns {
        let row: Vec<f64> = (0..na).map(|a| data.rho.get(s, a).as_f64()).collect();
        let z: f64 = row.iter().sum();
        if z <= 0.0 {
            probs.extend(std::iter::repeat_n(1.0 / na as f64, na));
            continue;
        }
        probs.extend(floor_row(row.iter().map(|v| v / z).collect(), eps));
    }
    Policy::normalized(ns, na, probs.into_iter().map(T::lit).collect())
}

fn floor_row(p: Vec<f64>, eps: f64) -> Vec<f64> {
    let na = p.len();
    let mut fixed: Vec<bool> = p.iter().map(|&v| v < eps).collect();
    loop {
        let n_fixed = fixed.iter().filter(|&&f| f).count();
        let free_mass: f64 = p
            .iter()
            .zip(&fixed)
            .filter(|(_, &f)| !f)
            .map(|(v, _)| v)
            .sum();
        let budget = 1.0 - n_fixed as f64 * eps;
        let out: Vec<f64> = (0..na)
            .map(|i| {
                if fixed[i] {
                    eps
                } else {
                    p[i] * budget / free_mass
                }
            })
            .collect();
        let mut changed = false;
        for i in 0..na {
            if !fixed[i] && out[i] < eps {
                fixed[i] = true;
                changed = true;
            }
        }
        if !changed || free_mass <= 0.0 {
            return out;
        }
    }
}

/// `(1 - eps2) pi + eps2 uniform`.
pub fn mixture_policy<T: Real>(pi: &Policy<T>, eps2: T) -> Result<Policy<T>> {
    if !(eps2 >= T::zero() && eps2 <= T::one()) {
        return Err(Error::InvalidParameter(format!(
            "mixture weight {eps2} outside [0,1]"
        )));
    }
    let u = T::one() / T::from_usize_lossy(pi.n_actions());
    let probs = pi
        .probs()
        .iter()
        .map(|&p| (T::one() - eps2) * p + eps2 * u)
        .collect();
    Policy::normalized(pi.n_states(), pi.n_actions(), probs)
}

/// Exact expectation of the empirical weights of [`rollout`] data: the
/// horizon-averaged state-action marginal under `(rho0, pi, P)`.
pub fn sampling_distribution<T: Real>(
    p: &Kernel<T>,
    pi: &Policy<T>,
    rho0: &SFn<T>,
    horizon: usize,
) -> Result<SADist<T>> {
    if horizon == 0 {
        return Err(Error::InvalidParameter("horizon must be positive".into()));
    }
    if p.shape() != pi.shape() || rho0.len() != p.n_states() {
        return Err(Error::Shape("sampling_distribution".into()));
    }
    let (ns, na) = p.shape();
    let mut nu = rho0.clone();
    let mut acc = vec![T::zero(); ns * na];
    for t in 0..horizon {
        let sa: Vec<T> = (0..ns * na)
            .map(|i| nu.get(i / na) * pi.probs()[i])
            .collect();
        for (a, v) in acc.iter_mut().zip(&sa) {
            *a = *a + *v;
        }
        if t + 1 < horizon {
            nu = p.pushforward(&crate::mdp::SAFn::from_vec(ns, na, sa)?);
        }
    }
    let h = T::from_usize_lossy(horizon);
    SADist::normalized(ns, na, acc.into_iter().map(|v| v / h).collect())
}

/// Uniform distribution over `start_states` (all states when empty).
pub fn start_distribution<T: Real>(n_states: usize, start_states: &[usize]) -> Result<SFn<T>> {
    if start_states.iter().any(|&s| s >= n_states) {
        return Err(Error::InvalidParameter("start state out of range".into()));
    }
    if start_states.is_empty() {
        return Ok(SFn::constant(
            n_states,
            T::one() / T::from_usize_lossy(n_states),
        ));
    }
    let mut v = vec![T::zero(); n_states];
    let mut seen = vec![false; n_states];
    let mut k = 0usize;
    for &s in start_states {
        if !seen[s] {
            seen[s] = true;
            k += 1;
        }
    }
    let w = T::one() / T::from_usize_lossy(k);
    for s in 0..n_states {
        if seen[s] {
            v[s] = w;
        }
    }
    Ok(SFn::from_vec(v))
}
