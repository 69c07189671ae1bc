//! Basis-function catalogs for the stagewise and nonanticipative dual decision rules.
//!
//! A resolved [`BasisLayout`] lists, for every multiplier row, the basis terms
//! whose weighted sum gives that row's multiplier. Stagewise rows are
//! state-equation rows `(t, j)`; nonanticipative rows are stage variables
//! `(t, v)`. Weights are flattened row by row.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::instance::MslotInstance;
use crate::process::{DemandProcess, ScenarioPath};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DualKind {
    Sw,
    Na,
}

impl fmt::Display for DualKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DualKind::Sw => "sw",
            DualKind::Na => "na",
        })
    }
}

/// Which stage variables carry nonanticipativity multipliers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum NaVars {
    #[default]
    X,
    State,
    All,
}

impl fmt::Display for NaVars {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NaVars::X => "x",
            NaVars::State => "state",
            NaVars::All => "all",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct BasisSpec {
    pub kind: DualKind,
    pub option: u8,
    pub na_vars: NaVars,
    pub include_constant: bool,
    /// NA basis built from the stagewise basis of this option through the state equations.
    pub lifted_from_sw: bool,
}

impl BasisSpec {
    pub fn sw(option: u8) -> Self {
        Self {
            kind: DualKind::Sw,
            option,
            na_vars: NaVars::X,
            include_constant: true,
            lifted_from_sw: false,
        }
    }

    pub fn na(option: u8, na_vars: NaVars) -> Self {
        Self {
            kind: DualKind::Na,
            option,
            na_vars,
            include_constant: false,
            lifted_from_sw: false,
        }
    }

    /// NA spec spanning every SW multiplier of `sw` pushed through `A_t` and `B_t`.
    pub fn lift_sw_to_na(sw: &BasisSpec) -> Result<Self> {
        if sw.kind != DualKind::Sw {
            return Err(Error::Parameter("lifting needs a stagewise spec".into()));
        }
        sw.validate()?;
        Ok(Self {
            kind: DualKind::Na,
            option: sw.option,
            na_vars: NaVars::All,
            include_constant: false,
            lifted_from_sw: true,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=4).contains(&self.option) {
            return Err(Error::Parameter(format!("basis option {} not in 1..=4", self.option)));
        }
        if self.lifted_from_sw && self.kind != DualKind::Na {
            return Err(Error::Parameter("only NA specs can be lifted".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum BasisTerm {
    Constant,
    Demand { stage: usize, product: usize },
}

impl BasisTerm {
    pub fn value(&self, path: &ScenarioPath) -> f64 {
        match *self {
            BasisTerm::Constant => 1.0,
            BasisTerm::Demand { stage, product } => path.demands[stage][product],
        }
    }

    /// Expectation given the history of `path` through stage `t`.
    pub fn conditional<P: DemandProcess + ?Sized>(&self, process: &P, path: &ScenarioPath, t: usize) -> f64 {
        match *self {
            BasisTerm::Constant => 1.0,
            BasisTerm::Demand { stage, product } => process.conditional_mean(path, t, stage, product),
        }
    }

    pub fn centered<P: DemandProcess + ?Sized>(&self, process: &P, path: &ScenarioPath, t: usize) -> f64 {
        match *self {
            BasisTerm::Constant => 0.0,
            BasisTerm::Demand { stage, .. } if stage <= t => 0.0,
            _ => self.value(path) - self.conditional(process, path, t),
        }
    }

    fn known_at(&self, t: usize) -> bool {
        match *self {
            BasisTerm::Constant => true,
            BasisTerm::Demand { stage, .. } => stage <= t,
        }
    }
}

impl fmt::Display for BasisTerm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BasisTerm::Constant => f.write_str("1"),
            BasisTerm::Demand { stage, product } => write!(f, "D[{stage}][{product}]"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct BasisRow {
    pub stage: usize,
    /// SW: state-equation row; NA: stage variable index.
    pub index: usize,
    pub offset: usize,
    pub terms: Vec<BasisTerm>,
}

impl BasisRow {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.terms.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct BasisLayout {
    pub spec: BasisSpec,
    pub stages: usize,
    pub products: usize,
    pub rows: Vec<BasisRow>,
    pub dim: usize,
}

fn sw_terms(option: u8, t: usize, j: usize, nj: usize) -> Vec<BasisTerm> {
    let d = |stage, product| BasisTerm::Demand { stage, product };
    let mut v = vec![BasisTerm::Constant];
    match option {
        1 => v.extend((0..=t).flat_map(|s| (0..nj).map(move |k| d(s, k)))),
        2 => v.extend((0..nj).map(|k| d(t, k))),
        3 => v.extend((0..=t).map(|s| d(s, j))),
        _ => v.push(d(t, j)),
    }
    v
}

fn na_terms(option: u8, t: usize, j: usize, nt: usize, nj: usize) -> Vec<BasisTerm> {
    let d = |stage, product| BasisTerm::Demand { stage, product };
    if t + 1 >= nt {
        return Vec::new();
    }
    match option {
        1 => (t + 1..nt).flat_map(|s| (0..nj).map(move |k| d(s, k))).collect(),
        2 => (0..nj).map(|k| d(t + 1, k)).collect(),
        3 => (t + 1..nt).map(|s| d(s, j)).collect(),
        _ => vec![d(t + 1, j)],
    }
}

impl BasisLayout {
    pub fn resolve(spec: &BasisSpec, inst: &MslotInstance) -> Result<Self> {
        spec.validate()?;
        let (nt, nj) = (inst.stages, inst.products);
        let l = inst.layout();
        let mut rows: Vec<BasisRow> = Vec::new();
        let mut push = |stage, index, terms: Vec<BasisTerm>| {
            if !terms.is_empty() {
                rows.push(BasisRow {
                    stage,
                    index,
                    offset: 0,
                    terms,
                });
            }
        };
        match (spec.kind, spec.lifted_from_sw) {
            (DualKind::Sw, _) => {
                // first-stage state equations stay in the subproblem
                for t in 1..nt {
                    for j in 0..nj {
                        let mut terms = sw_terms(spec.option, t, j, nj);
                        if !spec.include_constant {
                            terms.retain(|k| *k != BasisTerm::Constant);
                        }
                        push(t, j, terms);
                    }
                }
            }
            (DualKind::Na, false) => {
                for t in 0..nt.saturating_sub(1) {
                    for j in 0..nj {
                        let vars: Vec<usize> = match spec.na_vars {
                            NaVars::X => vec![l.x(j)],
                            NaVars::State => vec![l.inv(j), l.backlog(j)],
                            NaVars::All => vec![l.x(j), l.inv(j), l.backlog(j)],
                        };
                        for v in vars {
                            let mut terms = na_terms(spec.option, t, j, nt, nj);
                            if spec.include_constant {
                                terms.insert(0, BasisTerm::Constant);
                            }
                            push(t, v, terms);
                        }
                    }
                }
            }
            (DualKind::Na, true) => {
                // per (stage, variable) union of SW terms reaching it through A_t or B_t
                let n = l.len();
                let mut acc: Vec<Vec<Vec<BasisTerm>>> = vec![vec![Vec::new(); n]; nt];
                let probe = vec![0.0; nj];
                for t in 1..nt {
                    let block = inst.stage_block(t, &probe)?;
                    for (r, row) in block.state_a.iter().enumerate() {
                        let terms = sw_terms(spec.option, t, r, nj);
                        for &(v, _) in row {
                            acc[t][v].extend(terms.iter().copied());
                        }
                        for &(v, _) in &block.state_b[r] {
                            acc[t - 1][v].extend(terms.iter().copied());
                        }
                    }
                }
                for (t, per_var) in acc.into_iter().enumerate() {
                    for (v, mut terms) in per_var.into_iter().enumerate() {
                        terms.retain(|k| !k.known_at(t));
                        let mut seen = Vec::with_capacity(terms.len());
                        for k in terms {
                            if !seen.contains(&k) {
                                seen.push(k);
                            }
                        }
                        if spec.include_constant && !seen.is_empty() {
                            seen.insert(0, BasisTerm::Constant);
                        }
                        push(t, v, seen);
                    }
                }
            }
        }
        let mut dim = 0;
        for r in &mut rows {
            r.offset = dim;
            dim += r.terms.len();
        }
        Ok(Self {
            spec: *spec,
            stages: nt,
            products: nj,
            rows,
            dim,
        })
    }

    pub fn rows_at(&self, t: usize) -> impl Iterator<Item = &BasisRow> {
        self.rows.iter().filter(move |r| r.stage == t)
    }

    /// Raw basis values of each row at stage `t`.
    pub fn values(&self, path: &ScenarioPath, t: usize) -> Vec<Vec<f64>> {
        self.rows_at(t)
            .map(|r| r.terms.iter().map(|k| k.value(path)).collect())
            .collect()
    }

    /// Basis values minus their expectation given the history through each row's stage.
    pub fn centered_values<P: DemandProcess + ?Sized>(
        &self,
        process: &P,
        path: &ScenarioPath,
        t: usize,
    ) -> Vec<Vec<f64>> {
        self.rows_at(t)
            .map(|r| r.terms.iter().map(|k| k.centered(process, path, t)).collect())
            .collect()
    }

    /// Multiplier of each row given weights: `sum_k w_k * value_k`.
    pub fn multiplier(&self, row: &BasisRow, weights: &[f64], values: &[f64]) -> f64 {
        weights[row.range()].iter().zip(values).map(|(w, v)| w * v).sum()
    }
}

/// Convenience: raw stagewise basis values at stage `t`.
pub fn sw_basis_values(layout: &BasisLayout, path: &ScenarioPath, t: usize) -> Result<Vec<Vec<f64>>> {
    if layout.spec.kind != DualKind::Sw {
        return Err(Error::Parameter("expected a stagewise layout".into()));
    }
    Ok(layout.values(path, t))
}

/// Convenience: raw nonanticipative basis values at stage `t`.
pub fn na_basis_values(layout: &BasisLayout, path: &ScenarioPath, t: usize) -> Result<Vec<Vec<f64>>> {
    if layout.spec.kind != DualKind::Na {
        return Err(Error::Parameter("expected a nonanticipative layout".into()));
    }
    Ok(layout.values(path, t))
}

pub fn na_centered_values<P: DemandProcess + ?Sized>(
    layout: &BasisLayout,
    process: &P,
    path: &ScenarioPath,
    t: usize,
) -> Result<Vec<Vec<f64>>> {
    if layout.spec.kind != DualKind::Na {
        return Err(Error::Parameter("expected a nonanticipative layout".into()));
    }
    Ok(layout.centered_values(process, path, t))
}

/// Trained (or fixed) weights with their layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct DualCoefficients {
    pub kind: DualKind,
    pub option: u8,
    pub na_vars: NaVars,
    pub stages: usize,
    pub layout: BasisLayout,
    pub weights: Vec<f64>,
    pub instance_hash: String,
    pub basis_count_reported: usize,
}

impl DualCoefficients {
    pub fn new(layout: BasisLayout, weights: Vec<f64>, inst: &MslotInstance) -> Result<Self> {
        if weights.len() != layout.dim {
            return Err(Error::Structure(format!(
                "{} weights for a basis of dimension {}",
                weights.len(),
                layout.dim
            )));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::Parameter("non-finite weight".into()));
        }
        Ok(Self {
            kind: layout.spec.kind,
            option: layout.spec.option,
            na_vars: layout.spec.na_vars,
            stages: layout.stages,
            basis_count_reported: layout.dim,
            instance_hash: inst.hash(),
            layout,
            weights,
        })
    }

    pub fn zeros(layout: BasisLayout, inst: &MslotInstance) -> Self {
        let n = layout.dim;
        Self::new(layout, vec![0.0; n], inst).expect("zero weights are valid")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instance::Knobs;
    use crate::process::ProcessParams;

    fn inst(t: usize, j: usize, rho_y: f64) -> MslotInstance {
        let p = ProcessParams::new(0.0, rho_y, vec![vec![100.0; j]; t], 4).unwrap();
        MslotInstance::build("b", p, Knobs::default()).unwrap()
    }

    fn terms_of(l: &BasisLayout, t: usize, idx: usize) -> Vec<BasisTerm> {
        l.rows
            .iter()
            .find(|r| r.stage == t && r.index == idx)
            .map(|r| r.terms.clone())
            .unwrap_or_default()
    }

    #[test]
    fn sw_option_sizes() {
        let i = inst(4, 3, 0.2);
        let l4 = BasisLayout::resolve(&BasisSpec::sw(4), &i).unwrap();
        assert!(l4.rows.iter().all(|r| r.terms.len() == 2));
        let l1 = BasisLayout::resolve(&BasisSpec::sw(1), &i).unwrap();
        assert_eq!(terms_of(&l1, 1, 0).len(), 7);
        assert_eq!(l1.dim, 90);
        assert!(l1.rows.iter().all(|r| r.stage >= 1));
        assert!(BasisLayout::resolve(&BasisSpec::sw(5), &i).is_err());
        // option 2 and option 1 agree on a single-stage history
        assert_eq!(sw_terms(1, 0, 1, 3), sw_terms(2, 0, 1, 3));
    }

    #[test]
    fn na_option_sizes() {
        let i = inst(4, 3, 0.2);
        let l = BasisLayout::resolve(&BasisSpec::na(3, NaVars::X), &i).unwrap();
        let d = |s| BasisTerm::Demand { stage: s, product: 1 };
        assert_eq!(terms_of(&l, 0, i.layout().x(1)), vec![d(1), d(2), d(3)]);
        assert!(l.rows_at(3).next().is_none());
        assert_eq!(l.dim, 18);
        let lt2 = BasisLayout::resolve(&BasisSpec::na(3, NaVars::X), &inst(2, 3, 0.2)).unwrap();
        assert_eq!(lt2.dim, 3);
        let la = BasisLayout::resolve(&BasisSpec::na(3, NaVars::All), &i).unwrap();
        assert_eq!(la.dim, 3 * l.dim);
    }

    #[test]
    fn nesting_of_options() {
        let i = inst(4, 3, 0.2);
        for kind in [DualKind::Sw, DualKind::Na] {
            let spec = |o| match kind {
                DualKind::Sw => BasisSpec::sw(o),
                DualKind::Na => BasisSpec::na(o, NaVars::X),
            };
            let big = BasisLayout::resolve(&spec(1), &i).unwrap();
            for o in 2..=4 {
                let small = BasisLayout::resolve(&spec(o), &i).unwrap();
                for r in &small.rows {
                    let b = terms_of(&big, r.stage, r.index);
                    assert!(r.terms.iter().all(|k| b.contains(k)), "{kind} option {o}");
                }
            }
        }
    }

    #[test]
    fn lifted_option4_rows() {
        let i = inst(3, 2, 0.2);
        let sw = BasisSpec::sw(4);
        let lifted = BasisLayout::resolve(&BasisSpec::lift_sw_to_na(&sw).unwrap(), &i).unwrap();
        let l = i.layout();
        let d = |s, j| BasisTerm::Demand { stage: s, product: j };
        for t in 0..2 {
            for j in 0..2 {
                for v in [l.x(j), l.inv(j), l.backlog(j)] {
                    assert_eq!(terms_of(&lifted, t, v), vec![d(t + 1, j)]);
                }
                assert!(terms_of(&lifted, t, l.setup(j)).is_empty());
            }
        }
        assert!(lifted.rows_at(2).next().is_none());
        assert!(BasisSpec::lift_sw_to_na(&BasisSpec::na(1, NaVars::X)).is_err());
    }

    #[test]
    fn centering() {
        let i = inst(3, 1, 0.0);
        let path = i.process.sample_paths(1, "c").unwrap().remove(0);
        let mut spec = BasisSpec::na(3, NaVars::X);
        spec.include_constant = true;
        let l = BasisLayout::resolve(&spec, &i).unwrap();
        let c = na_centered_values(&l, &i.process, &path, 0).unwrap();
        assert_eq!(c[0][0], 0.0);
        assert!((c[0][1] - (path.latent_delta[1][0] - 100.0)).abs() < 1e-9);
        assert!(sw_basis_values(&l, &path, 0).is_err());
        let raw = na_basis_values(&l, &path, 1).unwrap();
        assert_eq!(raw[0], vec![1.0, path.demands[2][0]]);
    }

    #[test]
    fn centered_values_average_to_zero() {
        let p = ProcessParams::new(0.6, 0.2, vec![vec![100.0, 60.0]; 4], 8).unwrap();
        let i = MslotInstance::build("c", p, Knobs::default()).unwrap();
        let l = BasisLayout::resolve(&BasisSpec::na(1, NaVars::X), &i).unwrap();
        let base = i.process.sample_paths(1, "base").unwrap().remove(0);
        let n = 100_000;
        let conts = i.process.conditional_sample(&base, 1, n, "mc").unwrap();
        let k = l.rows_at(1).next().unwrap().terms.len();
        for idx in 0..k {
            let v: Vec<f64> = conts.iter().map(|p| l.centered_values(&i.process, p, 1)[0][idx]).collect();
            let m = v.iter().sum::<f64>() / n as f64;
            let sd = (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n as f64 - 1.0)).sqrt();
            assert!(m.abs() <= 3.0 * sd / (n as f64).sqrt(), "term {idx}: {m}");
        }
    }

    #[test]
    fn coefficient_file_round_trip() {
        let i = inst(3, 2, 0.2);
        let l = BasisLayout::resolve(&BasisSpec::sw(2), &i).unwrap();
        let c = DualCoefficients::zeros(l.clone(), &i);
        let s = serde_json::to_string(&c).unwrap();
        assert!(s.contains("\"kind\":\"sw\""));
        assert!(s.contains("basisCountReported"));
        let back: DualCoefficients = serde_json::from_str(&s).unwrap();
        assert_eq!(back, c);
        assert!(DualCoefficients::new(l, vec![1.0], &i).is_err());
    }
}
