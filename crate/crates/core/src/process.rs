//! Autoregressive lognormal demand process and finite-support trees.
//!
//! Stages and products are 0-based throughout the crate.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ProcessParams {
    pub rho: f64,
    pub rho_y: f64,
    /// `mu[t][j]`: unconditional mean demand.
    pub mu: Vec<Vec<f64>>,
    pub eps_std: f64,
    pub delta_std_factor: f64,
    pub stages: usize,
    pub products: usize,
    pub seed: u64,
}

impl ProcessParams {
    pub fn new(rho: f64, rho_y: f64, mu: Vec<Vec<f64>>, seed: u64) -> Result<Self> {
        let stages = mu.len();
        let products = mu.first().map_or(0, Vec::len);
        let p = Self {
            rho,
            rho_y,
            mu,
            eps_std: 0.5,
            delta_std_factor: 0.2,
            stages,
            products,
            seed,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.rho) {
            return Err(Error::Parameter(format!("rho = {} not in [0,1)", self.rho)));
        }
        if !(0.0..=1.0).contains(&self.rho_y) {
            return Err(Error::Parameter(format!("rhoY = {} not in [0,1]", self.rho_y)));
        }
        if self.stages < 2 {
            return Err(Error::Parameter(format!("T = {} < 2", self.stages)));
        }
        if self.products < 1 {
            return Err(Error::Parameter("J must be at least 1".into()));
        }
        if self.mu.len() != self.stages || self.mu.iter().any(|r| r.len() != self.products) {
            return Err(Error::Parameter("mu must be a T x J matrix".into()));
        }
        if self.mu.iter().flatten().any(|&m| !(m > 0.0 && m.is_finite())) {
            return Err(Error::Parameter("all mean demands must be positive".into()));
        }
        if !(self.eps_std >= 0.0) || !(self.delta_std_factor >= 0.0) {
            return Err(Error::Parameter("standard deviations must be nonnegative".into()));
        }
        Ok(())
    }

    fn eps_law(&self) -> Lognormal {
        Lognormal::from_mean_std(1.0, self.eps_std).expect("validated")
    }

    fn delta_law(&self, t: usize, j: usize) -> Lognormal {
        let m = self.mu[t][j];
        Lognormal::from_mean_std(m, self.delta_std_factor * (t + 1) as f64 * m).expect("validated")
    }

    fn demand(&self, t: usize, j: usize, y: f64, delta: f64) -> f64 {
        self.rho_y * y * self.mu[t][j] + (1.0 - self.rho_y) * delta
    }

    /// Draws stages `from..T` of one path into `path`, continuing from `path.latent_y[from-1]`.
    fn fill(&self, path: &mut ScenarioPath, from: usize, key: &StreamKey) {
        let eps = self.eps_law();
        for t in from..self.stages {
            let mut rng = key.rng(t as u64);
            let e: Vec<f64> = (0..self.products).map(|_| eps.draw(&mut rng)).collect();
            for j in 0..self.products {
                let d = self.delta_law(t, j).draw(&mut rng);
                let y = if t == 0 {
                    e[j]
                } else {
                    self.rho * path.latent_y[t - 1][j] + (1.0 - self.rho) * e[j]
                };
                path.latent_y[t][j] = y;
                path.latent_delta[t][j] = d;
                path.demands[t][j] = self.demand(t, j, y, d);
            }
        }
    }

    fn blank_path(&self, id: usize, prob: f64) -> ScenarioPath {
        let z = vec![vec![0.0; self.products]; self.stages];
        ScenarioPath {
            id,
            prob,
            demands: z.clone(),
            latent_y: z.clone(),
            latent_delta: z,
        }
    }

    /// `n` independent paths, each with probability `1/n`.
    pub fn sample_paths(&self, n: usize, tag: &str) -> Result<Vec<ScenarioPath>> {
        self.validate()?;
        if n == 0 {
            return Err(Error::Parameter("sample size must be at least 1".into()));
        }
        Ok((0..n)
            .map(|i| {
                let mut p = self.blank_path(i, 1.0 / n as f64);
                self.fill(&mut p, 0, &StreamKey::new(self.seed, tag, i as u64));
                p
            })
            .collect())
    }

    /// `E[D_{t+h,j} | history through t]` from the stored latent state.
    pub fn conditional_mean_demand(
        &self,
        path: &ScenarioPath,
        t: usize,
        h: usize,
        j: usize,
    ) -> Result<f64> {
        if h == 0 || t + h >= self.stages || j >= self.products {
            return Err(Error::Range(format!(
                "conditional mean at t={t}, h={h}, j={j} with T={}, J={}",
                self.stages, self.products
            )));
        }
        Ok(self.ar_conditional_mean(path, t, t + h, j))
    }

    fn ar_conditional_mean(&self, path: &ScenarioPath, t: usize, s: usize, j: usize) -> f64 {
        let decay = self.rho.powi((s - t) as i32);
        self.mu[s][j] * (self.rho_y * decay * (path.latent_y[t][j] - 1.0) + 1.0)
    }
}

/// Normal parameters of a lognormal variable.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lognormal {
    pub mu: f64,
    pub sigma: f64,
}

impl Lognormal {
    pub fn from_mean_std(mean: f64, std: f64) -> Result<Self> {
        if !(mean > 0.0) || !mean.is_finite() {
            return Err(Error::Parameter(format!("lognormal mean {mean} must be positive")));
        }
        if !(std >= 0.0) || !std.is_finite() {
            return Err(Error::Parameter(format!("lognormal std {std} must be nonnegative")));
        }
        let var = (1.0 + (std / mean).powi(2)).ln();
        Ok(Self {
            mu: mean.ln() - var / 2.0,
            sigma: var.sqrt(),
        })
    }

    pub fn draw<R: Rng>(&self, rng: &mut R) -> f64 {
        if self.sigma == 0.0 {
            return self.mu.exp();
        }
        let z: f64 = rng.sample(StandardNormal);
        (self.mu + self.sigma * z).exp()
    }
}

/// Keys a counter-based random stream by (seed, tag, scenario); stages get sub-streams.
#[derive(Debug, Clone)]
pub struct StreamKey {
    prefix: [u8; 32],
}

impl StreamKey {
    pub fn new(seed: u64, tag: &str, scenario: u64) -> Self {
        let mut h = Sha256::new();
        h.update(seed.to_le_bytes());
        h.update((tag.len() as u64).to_le_bytes());
        h.update(tag.as_bytes());
        h.update(scenario.to_le_bytes());
        Self {
            prefix: h.finalize().into(),
        }
    }

    pub fn rng(&self, sub: u64) -> ChaCha8Rng {
        let mut h = Sha256::new();
        h.update(self.prefix);
        h.update(sub.to_le_bytes());
        ChaCha8Rng::from_seed(h.finalize().into())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ScenarioPath {
    pub id: usize,
    pub prob: f64,
    pub demands: Vec<Vec<f64>>,
    pub latent_y: Vec<Vec<f64>>,
    pub latent_delta: Vec<Vec<f64>>,
}

impl ScenarioPath {
    pub fn stages(&self) -> usize {
        self.demands.len()
    }

    /// True when both paths have identical demands through stage `t` (inclusive).
    pub fn shares_prefix(&self, other: &ScenarioPath, t: usize) -> bool {
        self.demands[..=t] == other.demands[..=t]
    }
}

/// Sets every path's probability to `1/n` and renumbers ids.
pub fn equal_weights(paths: &mut [ScenarioPath]) {
    let n = paths.len() as f64;
    for (i, p) in paths.iter_mut().enumerate() {
        p.id = i;
        p.prob = 1.0 / n;
    }
}

pub trait DemandProcess: Sync + Send {
    fn stages(&self) -> usize;
    fn products(&self) -> usize;
    /// `E[D_{s,j}]`.
    fn mean(&self, s: usize, j: usize) -> f64;
    /// `E[D_{s,j} | history of path through stage t]`; the realized value when `s <= t`.
    fn conditional_mean(&self, path: &ScenarioPath, t: usize, s: usize, j: usize) -> f64;
    /// `n` continuations of `path` after stage `t`, each with probability `1/n`.
    fn conditional_sample(
        &self,
        path: &ScenarioPath,
        t: usize,
        n: usize,
        tag: &str,
    ) -> Result<Vec<ScenarioPath>>;

    /// Path whose stages after `t` are replaced by conditional means.
    fn conditional_mean_path(&self, path: &ScenarioPath, t: usize) -> ScenarioPath {
        let mut p = path.clone();
        for s in t + 1..self.stages() {
            for j in 0..self.products() {
                p.demands[s][j] = self.conditional_mean(path, t, s, j);
            }
        }
        p
    }
}

impl DemandProcess for ProcessParams {
    fn stages(&self) -> usize {
        self.stages
    }

    fn products(&self) -> usize {
        self.products
    }

    fn mean(&self, s: usize, j: usize) -> f64 {
        self.mu[s][j]
    }

    fn conditional_mean(&self, path: &ScenarioPath, t: usize, s: usize, j: usize) -> f64 {
        if s <= t {
            path.demands[s][j]
        } else {
            self.ar_conditional_mean(path, t, s, j)
        }
    }

    fn conditional_sample(
        &self,
        path: &ScenarioPath,
        t: usize,
        n: usize,
        tag: &str,
    ) -> Result<Vec<ScenarioPath>> {
        if t + 1 >= self.stages {
            return Err(Error::Range(format!(
                "conditional sample after stage {t} with T={}",
                self.stages
            )));
        }
        if n == 0 {
            return Err(Error::Parameter("sample size must be at least 1".into()));
        }
        let tag = format!("{tag}|cond:{}:{t}", path.id);
        Ok((0..n)
            .map(|i| {
                let mut p = path.clone();
                p.id = i;
                p.prob = 1.0 / n as f64;
                self.fill(&mut p, t + 1, &StreamKey::new(self.seed, &tag, i as u64));
                p
            })
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Outcome {
    pub demand: Vec<f64>,
    pub prob: f64,
}

/// Stagewise-independent finite-support demand process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiniteSupportProcess {
    pub outcomes: Vec<Vec<Outcome>>,
    pub seed: u64,
}

impl FiniteSupportProcess {
    pub fn new(outcomes: Vec<Vec<Outcome>>, seed: u64) -> Result<Self> {
        let p = Self { outcomes, seed };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.outcomes.is_empty() {
            return Err(Error::Parameter("no stages".into()));
        }
        let j = self.outcomes[0].first().map_or(0, |o| o.demand.len());
        for (t, stage) in self.outcomes.iter().enumerate() {
            if stage.is_empty() {
                return Err(Error::Parameter(format!("stage {t} has no outcomes")));
            }
            let total: f64 = stage.iter().map(|o| o.prob).sum();
            if (total - 1.0).abs() > 1e-9 {
                return Err(Error::Parameter(format!("stage {t} probabilities sum to {total}")));
            }
            for o in stage {
                if !(o.prob > 0.0) {
                    return Err(Error::Parameter(format!("stage {t} has a nonpositive probability")));
                }
                if o.demand.len() != j || o.demand.iter().any(|&d| !(d >= 0.0)) {
                    return Err(Error::Parameter(format!("stage {t} has a malformed demand")));
                }
            }
        }
        Ok(())
    }

    pub fn num_leaves(&self) -> usize {
        self.outcomes.iter().map(Vec::len).product()
    }

    fn path_from_choice(&self, id: usize, choice: &[usize]) -> ScenarioPath {
        let demands: Vec<Vec<f64>> = choice
            .iter()
            .enumerate()
            .map(|(t, &k)| self.outcomes[t][k].demand.clone())
            .collect();
        let prob = choice
            .iter()
            .enumerate()
            .map(|(t, &k)| self.outcomes[t][k].prob)
            .product();
        ScenarioPath {
            id,
            prob,
            latent_y: vec![vec![0.0; demands[0].len()]; demands.len()],
            latent_delta: demands.clone(),
            demands,
        }
    }

    /// Every leaf path in lexicographic outcome order, with its exact probability.
    pub fn enumerate_paths(&self) -> Vec<ScenarioPath> {
        let mut out = Vec::with_capacity(self.num_leaves());
        let mut choice = vec![0usize; self.outcomes.len()];
        loop {
            out.push(self.path_from_choice(out.len(), &choice));
            let mut t = self.outcomes.len();
            loop {
                if t == 0 {
                    return out;
                }
                t -= 1;
                choice[t] += 1;
                if choice[t] < self.outcomes[t].len() {
                    break;
                }
                choice[t] = 0;
            }
        }
    }

    /// Exact continuations of `path` after stage `t` with conditional probabilities.
    pub fn conditional_support(&self, path: &ScenarioPath, t: usize) -> Vec<ScenarioPath> {
        let sub = FiniteSupportProcess {
            outcomes: self.outcomes[t + 1..].to_vec(),
            seed: self.seed,
        };
        sub.enumerate_paths()
            .into_iter()
            .map(|tail| {
                let mut p = path.clone();
                p.id = tail.id;
                p.prob = tail.prob;
                for (k, d) in tail.demands.into_iter().enumerate() {
                    p.latent_delta[t + 1 + k] = d.clone();
                    p.demands[t + 1 + k] = d;
                }
                p
            })
            .collect()
    }
}

impl DemandProcess for FiniteSupportProcess {
    fn stages(&self) -> usize {
        self.outcomes.len()
    }

    fn products(&self) -> usize {
        self.outcomes[0][0].demand.len()
    }

    fn mean(&self, s: usize, j: usize) -> f64 {
        self.outcomes[s].iter().map(|o| o.prob * o.demand[j]).sum()
    }

    fn conditional_mean(&self, path: &ScenarioPath, t: usize, s: usize, j: usize) -> f64 {
        if s <= t {
            path.demands[s][j]
        } else {
            self.mean(s, j)
        }
    }

    fn conditional_sample(
        &self,
        path: &ScenarioPath,
        t: usize,
        n: usize,
        tag: &str,
    ) -> Result<Vec<ScenarioPath>> {
        if t + 1 >= self.stages() {
            return Err(Error::Range(format!("conditional sample after final stage {t}")));
        }
        let tag = format!("{tag}|cond:{}:{t}", path.id);
        Ok((0..n)
            .map(|i| {
                let key = StreamKey::new(self.seed, &tag, i as u64);
                let mut p = path.clone();
                p.id = i;
                p.prob = 1.0 / n as f64;
                for s in t + 1..self.stages() {
                    let u: f64 = key.rng(s as u64).random();
                    let mut acc = 0.0;
                    let stage = &self.outcomes[s];
                    let mut pick = stage.len() - 1;
                    for (k, o) in stage.iter().enumerate() {
                        acc += o.prob;
                        if u < acc {
                            pick = k;
                            break;
                        }
                    }
                    p.demands[s] = stage[pick].demand.clone();
                    p.latent_delta[s] = stage[pick].demand.clone();
                }
                p
            })
            .collect())
    }
}
