//! Synthetic discrete environments with known response distributions.
//!
//! A [`World`] holds one conditional table per response slot: slot 0's table
//! is the target distribution `Q₀`, slot `j ≥ 1` owns a synthetic component
//! `Q_j`. Every experiment in the crate samples its data from a world and
//! uses the exact tables as ground truth.
//!
//! Sampling is slot-conditional. Slot `j ≥ 1` draws from `Q₀` with
//! probability `π_j = 1 − n·β_j` (labelled target) and from `Q_j` otherwise,
//! so that averaging the slot marginals reproduces the mixture
//! `α·Q₀ + Σ β_j·Q_j` exactly. Slot 0 always draws from `Q₀`; its label is a
//! Bernoulli(α) coin.

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::decimal_vec;
use crate::losses::RewardOracle;
use crate::numeric::total_variation;
use crate::seed::{derive, rng_from, LabRng};

pub const WORLD_SCHEMA: &str = "dora-lab/world/v1";
pub const DATASET_SCHEMA: &str = "dora-lab/dataset/v1";

const ROW_TOLERANCE: f64 = 1e-12;

/// Row-major conditional probability table `T(y | x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CondTable {
    queries: usize,
    responses: usize,
    #[serde(with = "decimal_vec")]
    probs: Vec<f64>,
}

impl CondTable {
    pub fn uniform(queries: usize, responses: usize) -> Self {
        CondTable {
            queries,
            responses,
            probs: vec![1.0 / responses as f64; queries * responses],
        }
    }

    /// Builds a table from explicit rows. Rows must be nonnegative and sum to
    /// one within `1e-9`; rows that are off by rounding are renormalized.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let queries = rows.len();
        if queries == 0 {
            return Err(Error::InvalidDistribution("table has no rows".into()));
        }
        let responses = rows[0].len();
        let mut probs = Vec::with_capacity(queries * responses);
        for (x, row) in rows.iter().enumerate() {
            if row.len() != responses {
                return Err(Error::InvalidDistribution(format!(
                    "row {x} has {} entries, expected {responses}",
                    row.len()
                )));
            }
            if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
                return Err(Error::InvalidDistribution(format!(
                    "row {x} has a negative or non-finite entry"
                )));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidDistribution(format!(
                    "row {x} sums to {sum}"
                )));
            }
            if sum == 1.0 {
                probs.extend_from_slice(row);
            } else {
                probs.extend(row.iter().map(|p| p / sum));
            }
        }
        Ok(CondTable {
            queries,
            responses,
            probs,
        })
    }

    pub fn queries(&self) -> usize {
        self.queries
    }

    pub fn responses(&self) -> usize {
        self.responses
    }

    pub fn row(&self, x: usize) -> &[f64] {
        &self.probs[x * self.responses..(x + 1) * self.responses]
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.probs[x * self.responses + y]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.probs.chunks(self.responses)
    }

    fn validate(&self) -> Result<()> {
        if self.probs.len() != self.queries * self.responses {
            return Err(Error::InvalidDistribution(format!(
                "table holds {} values, expected {}x{}",
                self.probs.len(),
                self.queries,
                self.responses
            )));
        }
        for (x, row) in self.rows().enumerate() {
            if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
                return Err(Error::InvalidDistribution(format!(
                    "row {x} has a negative or non-finite entry"
                )));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_TOLERANCE {
                return Err(Error::InvalidDistribution(format!(
                    "row {x} sums to {sum}"
                )));
            }
        }
        Ok(())
    }
}

/// How one component table is generated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ComponentConfig {
    Uniform,
    /// Symmetric Dirichlet rows. Smaller concentrations give sharper rows.
    /// `bias > 0` mixes in the anti-target row (mass on responses the target
    /// rates low); `bias < 0` mixes in the target row itself.
    Dirichlet {
        concentration: f64,
        #[serde(default)]
        bias: f64,
    },
    /// `Q₀(y|x)·exp(strength·g(y))` with one standard-normal `g(y)` per
    /// response shared by all queries. The log density ratio against the
    /// target is then additive in `x` and `y`.
    Tilted { strength: f64 },
    /// `Q₀(y|x)^power`, renormalized: a mode-seeking copy of the target
    /// when `power > 1`.
    Tempered { power: f64 },
    /// Explicit rows, one per query.
    Table { rows: Vec<Vec<f64>> },
}

/// Parameters for [`build_world`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldConfig {
    pub query_count: usize,
    pub response_count: usize,
    /// Generator for `Q₀`.
    pub target: ComponentConfig,
    /// Generators for `Q₁ … Q_{n−1}`; `n_slots = 1 + synthetic.len()`.
    pub synthetic: Vec<ComponentConfig>,
    /// Separate golden table; `None` means `P_golden = Q₀`.
    #[serde(default)]
    pub golden: Option<ComponentConfig>,
    /// Minimum mean (over queries) total-variation distance between any two
    /// components. Zero requests a possibly degenerate world.
    #[serde(default = "default_tv_floor")]
    pub tv_floor: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_tv_floor() -> f64 {
    0.05
}

const MAX_BUILD_ATTEMPTS: usize = 64;

/// Synthetic environment with exact densities.
#[derive(Debug, Clone, PartialEq)]
pub struct World {
    query_count: usize,
    response_count: usize,
    components: Vec<CondTable>,
    golden: CondTable,
    golden_is_target: bool,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WorldDoc {
    schema: String,
    query_count: usize,
    response_count: usize,
    n_slots: usize,
    golden_is_target: bool,
    components: Vec<CondTable>,
    golden: CondTable,
}

impl World {
    /// Assembles a world from explicit tables. `components[0]` is `Q₀`.
    pub fn from_tables(components: Vec<CondTable>, golden: Option<CondTable>) -> Result<Self> {
        if components.len() < 2 {
            return Err(Error::config(
                "components",
                format!("need at least 2 slots, got {}", components.len()),
            ));
        }
        let (q, r) = (components[0].queries, components[0].responses);
        if q == 0 || r == 0 {
            return Err(Error::config("components", "empty table"));
        }
        for (j, c) in components.iter().enumerate() {
            if c.queries != q || c.responses != r {
                return Err(Error::Arity(format!(
                    "component {j} is {}x{}, expected {q}x{r}",
                    c.queries, c.responses
                )));
            }
            c.validate()?;
        }
        let golden_is_target = golden.is_none();
        let golden = match golden {
            Some(g) => {
                if g.queries != q || g.responses != r {
                    return Err(Error::Arity("golden table shape differs".into()));
                }
                g.validate()?;
                g
            }
            None => components[0].clone(),
        };
        Ok(World {
            query_count: q,
            response_count: r,
            components,
            golden,
            golden_is_target,
        })
    }

    pub fn query_count(&self) -> usize {
        self.query_count
    }

    pub fn response_count(&self) -> usize {
        self.response_count
    }

    pub fn n_slots(&self) -> usize {
        self.components.len()
    }

    pub fn target(&self) -> &CondTable {
        &self.components[0]
    }

    pub fn component(&self, j: usize) -> &CondTable {
        &self.components[j]
    }

    pub fn components(&self) -> &[CondTable] {
        &self.components
    }

    pub fn golden(&self) -> &CondTable {
        &self.golden
    }

    pub fn golden_is_target(&self) -> bool {
        self.golden_is_target
    }

    pub(crate) fn check_index(&self, x: usize, y: usize) -> Result<()> {
        if x >= self.query_count {
            return Err(Error::IndexOutOfRange {
                what: "query",
                index: x,
                size: self.query_count,
            });
        }
        if y >= self.response_count {
            return Err(Error::IndexOutOfRange {
                what: "response",
                index: y,
                size: self.response_count,
            });
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<Vec<u8>> {
        let doc = WorldDoc {
            schema: WORLD_SCHEMA.to_string(),
            query_count: self.query_count,
            response_count: self.response_count,
            n_slots: self.n_slots(),
            golden_is_target: self.golden_is_target,
            components: self.components.clone(),
            golden: self.golden.clone(),
        };
        let mut bytes = serde_json::to_vec_pretty(&doc)?;
        bytes.push(b'\n');
        Ok(bytes)
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let doc: WorldDoc = serde_json::from_slice(bytes)?;
        if doc.schema != WORLD_SCHEMA {
            return Err(Error::config("schema", format!("unknown world schema {}", doc.schema)));
        }
        if doc.components.len() != doc.n_slots {
            return Err(Error::Arity("n_slots does not match component count".into()));
        }
        let golden = if doc.golden_is_target {
            None
        } else {
            Some(doc.golden)
        };
        let world = World::from_tables(doc.components, golden)?;
        if world.query_count != doc.query_count || world.response_count != doc.response_count {
            return Err(Error::Arity("declared sizes do not match tables".into()));
        }
        Ok(world)
    }
}

fn dirichlet_row(concentration: f64, k: usize, rng: &mut LabRng) -> Vec<f64> {
    let gamma = Gamma::new(concentration, 1.0).expect("concentration validated positive");
    let mut row: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
    let sum: f64 = row.iter().sum();
    if sum > 0.0 && sum.is_finite() {
        row.iter_mut().for_each(|v| *v /= sum);
    } else {
        // All draws underflowed: the Dirichlet limit is a vertex.
        row.iter_mut().for_each(|v| *v = 0.0);
        row[rng.random_range(0..k)] = 1.0;
    }
    row
}

fn normalize(mut row: Vec<f64>) -> Vec<f64> {
    let sum: f64 = row.iter().sum();
    row.iter_mut().for_each(|v| *v /= sum);
    row
}

/// Row that puts mass where the target puts little.
fn anti_target_row(target: &[f64]) -> Vec<f64> {
    let max = target.iter().copied().fold(0.0, f64::max);
    normalize(target.iter().map(|p| max - p + 1e-3).collect())
}

fn validate_component(field: &str, c: &ComponentConfig, is_target: bool) -> Result<()> {
    match c {
        ComponentConfig::Uniform => Ok(()),
        ComponentConfig::Dirichlet {
            concentration,
            bias,
        } => {
            if !(concentration.is_finite() && *concentration > 0.0) {
                return Err(Error::config(
                    format!("{field}.concentration"),
                    format!("must lie in (0, inf), got {concentration}"),
                ));
            }
            if !(bias.is_finite() && (-1.0..=1.0).contains(bias)) {
                return Err(Error::config(
                    format!("{field}.bias"),
                    format!("must lie in [-1, 1], got {bias}"),
                ));
            }
            if is_target && *bias != 0.0 {
                return Err(Error::config(
                    format!("{field}.bias"),
                    "the target component cannot be biased toward itself",
                ));
            }
            Ok(())
        }
        ComponentConfig::Tempered { power } => {
            if is_target {
                return Err(Error::config(field, "the target component cannot be tempered"));
            }
            if !(power.is_finite() && *power > 0.0) {
                return Err(Error::config(format!("{field}.power"), "must be positive"));
            }
            Ok(())
        }
        ComponentConfig::Tilted { strength } => {
            if is_target {
                return Err(Error::config(field, "the target component cannot be tilted"));
            }
            if !strength.is_finite() {
                return Err(Error::config(format!("{field}.strength"), "must be finite"));
            }
            Ok(())
        }
        ComponentConfig::Table { .. } => Ok(()),
    }
}

fn generate_component(
    c: &ComponentConfig,
    target: Option<&CondTable>,
    queries: usize,
    responses: usize,
    rng: &mut LabRng,
) -> Result<CondTable> {
    match c {
        ComponentConfig::Uniform => Ok(CondTable::uniform(queries, responses)),
        ComponentConfig::Dirichlet {
            concentration,
            bias,
        } => {
            let mut rows = Vec::with_capacity(queries);
            for x in 0..queries {
                let base = dirichlet_row(*concentration, responses, rng);
                let row = match target {
                    Some(t) if *bias > 0.0 => {
                        let anti = anti_target_row(t.row(x));
                        base.iter()
                            .zip(&anti)
                            .map(|(d, a)| (1.0 - bias) * d + bias * a)
                            .collect()
                    }
                    Some(t) if *bias < 0.0 => {
                        let b = -bias;
                        base.iter()
                            .zip(t.row(x))
                            .map(|(d, q)| (1.0 - b) * d + b * q)
                            .collect()
                    }
                    _ => base,
                };
                rows.push(normalize(row));
            }
            CondTable::from_rows(&rows)
        }
        ComponentConfig::Tempered { power } => {
            let t = target.expect("tempered components are synthetic");
            let rows: Vec<Vec<f64>> = (0..queries)
                .map(|x| normalize(t.row(x).iter().map(|q| q.powf(*power)).collect()))
                .collect();
            CondTable::from_rows(&rows)
        }
        ComponentConfig::Tilted { strength } => {
            let t = target.expect("tilted components are synthetic");
            let g: Vec<f64> = (0..responses)
                .map(|_| StandardNormal.sample(rng))
                .collect();
            let rows: Vec<Vec<f64>> = (0..queries)
                .map(|x| {
                    normalize(
                        t.row(x)
                            .iter()
                            .zip(&g)
                            .map(|(q, gy)| q * (strength * gy).exp())
                            .collect(),
                    )
                })
                .collect();
            CondTable::from_rows(&rows)
        }
        ComponentConfig::Table { rows } => {
            let table = CondTable::from_rows(rows)?;
            if table.queries != queries || table.responses != responses {
                return Err(Error::Arity(format!(
                    "explicit table is {}x{}, expected {queries}x{responses}",
                    table.queries, table.responses
                )));
            }
            Ok(table)
        }
    }
}

fn min_pairwise_tv(components: &[CondTable]) -> f64 {
    let mut min = f64::INFINITY;
    for i in 0..components.len() {
        for j in i + 1..components.len() {
            let a = &components[i];
            let b = &components[j];
            let tv: f64 = (0..a.queries)
                .map(|x| total_variation(a.row(x), b.row(x)))
                .sum::<f64>()
                / a.queries as f64;
            min = min.min(tv);
        }
    }
    min
}

/// Builds a world from `config`. Components are redrawn (up to a fixed
/// attempt budget) until every pair is at least `tv_floor` apart.
pub fn build_world(config: &WorldConfig) -> Result<World> {
    if config.query_count < 1 {
        return Err(Error::config("query_count", "must be at least 1"));
    }
    if config.response_count < 2 {
        return Err(Error::config("response_count", "must be at least 2"));
    }
    if config.synthetic.is_empty() {
        return Err(Error::config(
            "synthetic",
            "need at least one synthetic component (n_slots >= 2)",
        ));
    }
    if !(config.tv_floor.is_finite() && (0.0..=1.0).contains(&config.tv_floor)) {
        return Err(Error::config("tv_floor", "must lie in [0, 1]"));
    }
    validate_component("target", &config.target, true)?;
    for (j, c) in config.synthetic.iter().enumerate() {
        validate_component(&format!("synthetic[{j}]"), c, false)?;
    }
    if let Some(g) = &config.golden {
        validate_component("golden", g, false)?;
    }

    let mut rng = rng_from(config.seed);
    let (q, r) = (config.query_count, config.response_count);
    for _ in 0..MAX_BUILD_ATTEMPTS {
        let target = generate_component(&config.target, None, q, r, &mut rng)?;
        let mut components = vec![target];
        for c in &config.synthetic {
            let table = generate_component(c, Some(&components[0]), q, r, &mut rng)?;
            components.push(table);
        }
        let golden = match &config.golden {
            Some(g) => Some(generate_component(g, Some(&components[0]), q, r, &mut rng)?),
            None => None,
        };
        if config.tv_floor == 0.0 || min_pairwise_tv(&components) >= config.tv_floor {
            return World::from_tables(components, golden);
        }
    }
    Err(Error::config(
        "tv_floor",
        format!(
            "components never reached pairwise TV {} in {MAX_BUILD_ATTEMPTS} attempts",
            config.tv_floor
        ),
    ))
}

/// Mixture weights `α` (target) and `β₁ … β_{n−1}` (synthetic components).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureSpec {
    pub alpha: f64,
    pub betas: Vec<f64>,
}

impl MixtureSpec {
    pub fn new(alpha: f64, betas: Vec<f64>) -> Result<Self> {
        let spec = MixtureSpec { alpha, betas };
        spec.validate()?;
        Ok(spec)
    }

    /// `α` on the target and the remainder split evenly across `n − 1`
    /// synthetic components.
    pub fn even(alpha: f64, n_slots: usize) -> Result<Self> {
        if n_slots < 2 {
            return Err(Error::config("n_slots", "must be at least 2"));
        }
        let beta = (1.0 - alpha) / (n_slots - 1) as f64;
        MixtureSpec::new(alpha, vec![beta; n_slots - 1])
    }

    pub fn n_slots(&self) -> usize {
        self.betas.len() + 1
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && (0.0..=1.0).contains(&self.alpha)) {
            return Err(Error::config("mixture.alpha", format!("must lie in [0, 1], got {}", self.alpha)));
        }
        for (i, b) in self.betas.iter().enumerate() {
            if !(b.is_finite() && *b >= 0.0) {
                return Err(Error::config(
                    format!("mixture.betas[{i}]"),
                    format!("must be nonnegative, got {b}"),
                ));
            }
        }
        let total = self.alpha + self.betas.iter().sum::<f64>();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::config(
                "mixture.alpha+betas",
                format!("weights sum to {total}, expected 1"),
            ));
        }
        let n = self.n_slots() as f64;
        for (i, b) in self.betas.iter().enumerate() {
            if *b > 1.0 / n + 1e-12 {
                return Err(Error::config(
                    format!("mixture.betas[{i}]"),
                    format!("{b} exceeds 1/n_slots; slot-conditional sampling cannot realize it"),
                ));
            }
        }
        Ok(())
    }

    /// Mixture weight `m_j`: `α` for slot 0, `β_j` otherwise.
    pub fn slot_weight(&self, slot: usize) -> f64 {
        if slot == 0 {
            self.alpha
        } else {
            self.betas[slot - 1]
        }
    }

    /// Probability that slot `j` carries a target-labelled draw.
    pub fn slot_target_prob(&self, slot: usize) -> f64 {
        if slot == 0 {
            self.alpha
        } else {
            (1.0 - self.n_slots() as f64 * self.betas[slot - 1]).clamp(0.0, 1.0)
        }
    }

    fn check_world(&self, world: &World) -> Result<()> {
        if self.n_slots() != world.n_slots() {
            return Err(Error::Arity(format!(
                "mixture has {} slots, world has {}",
                self.n_slots(),
                world.n_slots()
            )));
        }
        Ok(())
    }
}

/// One query with `n` responses, their source labels, rewards and ranking.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceDatum {
    pub query: usize,
    pub responses: Vec<usize>,
    /// 1 when the slot's response was drawn as a target sample.
    pub source_labels: Vec<u8>,
    #[serde(with = "decimal_vec")]
    pub rewards: Vec<f64>,
    /// Slots ordered best-first.
    pub ranking: Vec<usize>,
}

impl PreferenceDatum {
    pub fn n_slots(&self) -> usize {
        self.responses.len()
    }

    /// Response in the top-ranked slot.
    pub fn preferred(&self) -> usize {
        self.responses[self.ranking[0]]
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.responses.len();
        if self.source_labels.len() != n || self.rewards.len() != n || self.ranking.len() != n {
            return Err(Error::Arity("datum fields disagree on slot count".into()));
        }
        let mut seen = vec![false; n];
        for &s in &self.ranking {
            if s >= n || seen[s] {
                return Err(Error::Arity(format!("ranking {:?} is not a permutation", self.ranking)));
            }
            seen[s] = true;
        }
        for w in self.ranking.windows(2) {
            if self.rewards[w[0]] < self.rewards[w[1]] {
                return Err(Error::Arity("ranking is not reward-ordered".into()));
            }
        }
        Ok(())
    }
}

/// Slots sorted by descending reward, ties broken by ascending slot index.
pub fn rank_by_rewards(rewards: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..rewards.len()).collect();
    order.sort_by(|&a, &b| rewards[b].total_cmp(&rewards[a]).then(a.cmp(&b)));
    order
}

/// A set of preference data together with how it was produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dataset {
    pub schema: String,
    pub spec: MixtureSpec,
    pub seed: u64,
    pub corruption_rate: f64,
    /// Indices whose rankings were flipped by [`corrupt_labels`].
    #[serde(default)]
    pub corrupted: Vec<usize>,
    pub data: Vec<PreferenceDatum>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn n_slots(&self) -> usize {
        self.spec.n_slots()
    }

    pub fn to_json(&self) -> Result<Vec<u8>> {
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        Ok(bytes)
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let ds: Dataset = serde_json::from_slice(bytes)?;
        if ds.schema != DATASET_SCHEMA {
            return Err(Error::config("schema", format!("unknown dataset schema {}", ds.schema)));
        }
        ds.spec.validate()?;
        for d in &ds.data {
            d.validate()?;
        }
        Ok(ds)
    }
}

/// Inverse-CDF draw from a probability row.
pub fn sample_categorical(row: &[f64], rng: &mut LabRng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, p) in row.iter().enumerate() {
        if *p > 0.0 {
            last_positive = i;
        }
        acc += p;
        if u < acc {
            return i;
        }
    }
    last_positive
}

/// Draws one datum under the slot-conditional mixture scheme.
pub fn sample_datum(
    world: &World,
    spec: &MixtureSpec,
    oracle: &RewardOracle,
    rng: &mut LabRng,
) -> Result<PreferenceDatum> {
    spec.check_world(world)?;
    let x = rng.random_range(0..world.query_count);
    sample_datum_at(world, spec, oracle, x, rng, |j, rng| {
        sample_categorical(world.component(j).row(x), rng)
    })
}

/// Shared body of the samplers: `synthetic(j, rng)` draws the non-target
/// response for slot `j ≥ 1`.
pub(crate) fn sample_datum_at<F>(
    world: &World,
    spec: &MixtureSpec,
    oracle: &RewardOracle,
    x: usize,
    rng: &mut LabRng,
    mut synthetic: F,
) -> Result<PreferenceDatum>
where
    F: FnMut(usize, &mut LabRng) -> usize,
{
    let n = world.n_slots();
    let mut responses = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for j in 0..n {
        let is_target = rng.random::<f64>() < spec.slot_target_prob(j);
        let y = if j == 0 || is_target {
            sample_categorical(world.target().row(x), rng)
        } else {
            synthetic(j, rng)
        };
        responses.push(y);
        labels.push(u8::from(is_target));
    }
    let rewards: Vec<f64> = responses
        .iter()
        .map(|&y| oracle.reward(world, x, y))
        .collect::<Result<_>>()?;
    let ranking = rank_by_rewards(&rewards);
    Ok(PreferenceDatum {
        query: x,
        responses,
        source_labels: labels,
        rewards,
        ranking,
    })
}

const CHUNK: usize = 1024;

/// Samples `size` data. Work fans out over fixed-size chunks, each with its
/// own derived generator, and is concatenated in chunk order.
pub fn generate_dataset(
    world: &World,
    spec: &MixtureSpec,
    oracle: &RewardOracle,
    size: usize,
    seed: u64,
) -> Result<Dataset> {
    generate_dataset_with(world, spec, oracle, size, seed, |x, j, rng| {
        sample_categorical(world.component(j).row(x), rng)
    })
}

/// [`generate_dataset`] with a custom source `synthetic(x, j, rng)` for the
/// non-target draws of slot `j`.
pub fn generate_dataset_with<F>(
    world: &World,
    spec: &MixtureSpec,
    oracle: &RewardOracle,
    size: usize,
    seed: u64,
    synthetic: F,
) -> Result<Dataset>
where
    F: Fn(usize, usize, &mut LabRng) -> usize + Sync,
{
    spec.validate()?;
    spec.check_world(world)?;
    let chunks = size.div_ceil(CHUNK);
    let parts: Vec<Vec<PreferenceDatum>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = rng_from(derive(seed, c as u64));
            let len = CHUNK.min(size - c * CHUNK);
            (0..len)
                .map(|_| {
                    let x = rng.random_range(0..world.query_count);
                    sample_datum_at(world, spec, oracle, x, &mut rng, |j, rng| synthetic(x, j, rng))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    Ok(Dataset {
        schema: DATASET_SCHEMA.to_string(),
        spec: spec.clone(),
        seed,
        corruption_rate: 0.0,
        corrupted: Vec::new(),
        data: parts.into_iter().flatten().collect(),
    })
}

/// `α·Q₀(y|x) + Σ β_i·Q_i(y|x)`.
pub fn mixture_density(world: &World, spec: &MixtureSpec, x: usize, y: usize) -> Result<f64> {
    spec.check_world(world)?;
    world.check_index(x, y)?;
    let mut p = spec.alpha * world.target().get(x, y);
    for (i, b) in spec.betas.iter().enumerate() {
        p += b * world.component(i + 1).get(x, y);
    }
    Ok(p)
}

/// Exact marginal of one slot's response under the slot-conditional scheme.
pub fn slot_density(world: &World, spec: &MixtureSpec, slot: usize, x: usize, y: usize) -> Result<f64> {
    spec.check_world(world)?;
    world.check_index(x, y)?;
    if slot >= world.n_slots() {
        return Err(Error::IndexOutOfRange {
            what: "slot",
            index: slot,
            size: world.n_slots(),
        });
    }
    let q0 = world.target().get(x, y);
    if slot == 0 {
        return Ok(q0);
    }
    let pi = spec.slot_target_prob(slot);
    Ok(pi * q0 + (1.0 - pi) * world.component(slot).get(x, y))
}

/// Posterior that `(x, y)` in `slot` is a golden/target draw, with the
/// slot's sampling prior.
pub fn bayes_posterior(
    world: &World,
    spec: &MixtureSpec,
    slot: usize,
    x: usize,
    y: usize,
) -> Result<f64> {
    spec.check_world(world)?;
    if slot >= world.n_slots() {
        return Err(Error::IndexOutOfRange {
            what: "slot",
            index: slot,
            size: world.n_slots(),
        });
    }
    bayes_posterior_with_prior(world, slot, spec.slot_target_prob(slot), x, y)
}

/// Posterior for an explicit class prior `P(label = 1)`.
pub fn bayes_posterior_with_prior(
    world: &World,
    slot: usize,
    prior: f64,
    x: usize,
    y: usize,
) -> Result<f64> {
    world.check_index(x, y)?;
    let golden = prior * world.golden().get(x, y);
    let synthetic = (1.0 - prior) * world.component(slot).get(x, y);
    let total = golden + synthetic;
    if total <= 0.0 {
        return Err(Error::UndefinedPosterior { query: x, response: y });
    }
    Ok(golden / total)
}

/// Flips the ranking of `⌊rate·N⌋` uniformly chosen data. Rewards are
/// permuted with the ranking so the k-th ranked slot keeps the k-th best
/// reward value.
pub fn corrupt_labels(dataset: &Dataset, rate: f64, rng: &mut LabRng) -> Result<Dataset> {
    if !(rate.is_finite() && (0.0..=1.0).contains(&rate)) {
        return Err(Error::config("corruption_rate", format!("must lie in [0, 1], got {rate}")));
    }
    let n = dataset.len();
    let count = ((rate * n as f64) + 1e-9).floor() as usize;
    let count = count.min(n);
    let mut chosen = index::sample(rng, n, count).into_vec();
    chosen.sort_unstable();
    let mut out = dataset.clone();
    for &i in &chosen {
        let d = &mut out.data[i];
        let sorted: Vec<f64> = d.ranking.iter().map(|&s| d.rewards[s]).collect();
        d.ranking.reverse();
        for (k, &slot) in d.ranking.iter().enumerate() {
            d.rewards[slot] = sorted[k];
        }
    }
    out.corruption_rate = rate;
    out.corrupted = chosen;
    Ok(out)
}
