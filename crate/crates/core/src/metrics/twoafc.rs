use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::features::{ExtractorKind, FeatureExtractor};
use crate::metrics::image::pearson;
use crate::rng::{self, Stream};

pub const SENTINEL_EVERY: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Choice {
    Left,
    Right,
    Tie,
}

/// Shown an original and two candidates, picks the more similar candidate.
pub trait Judge {
    fn id(&self) -> String;
    fn choose(&mut self, original: &[f64], left: &[f64], right: &[f64]) -> Choice;
}

/// Prefers the candidate whose deep-B features correlate more with the original.
pub struct FeatureJudge {
    extractor: FeatureExtractor,
}

impl FeatureJudge {
    pub fn new(side: usize) -> Result<Self> {
        Ok(Self {
            extractor: FeatureExtractor::new(ExtractorKind::DeepB, side)?,
        })
    }

    fn score(&self, original: &[f64], candidate: &[f64]) -> f64 {
        match (self.extractor.extract(original), self.extractor.extract(candidate)) {
            (Ok(a), Ok(b)) => pearson(&a, &b).unwrap_or(0.0),
            _ => f64::NEG_INFINITY,
        }
    }
}

impl Judge for FeatureJudge {
    fn id(&self) -> String {
        "feature-deep-B".into()
    }

    fn choose(&mut self, original: &[f64], left: &[f64], right: &[f64]) -> Choice {
        let (l, r) = (self.score(original, left), self.score(original, right));
        match l.partial_cmp(&r) {
            Some(std::cmp::Ordering::Greater) => Choice::Left,
            Some(std::cmp::Ordering::Less) => Choice::Right,
            _ => Choice::Tie,
        }
    }
}

/// Attentive but indifferent judge: picks a candidate identical to the
/// original when there is one (sentinels), otherwise flips a coin.
pub struct RandomJudge {
    name: String,
    rng: Stream,
}

impl RandomJudge {
    pub fn new(seed: u64) -> Self {
        Self {
            name: format!("random-{seed}"),
            rng: rng::stream(seed, "random-judge", &[]),
        }
    }
}

impl Judge for RandomJudge {
    fn id(&self) -> String {
        self.name.clone()
    }
    fn choose(&mut self, original: &[f64], left: &[f64], right: &[f64]) -> Choice {
        if left == original && right != original {
            Choice::Left
        } else if right == original && left != original {
            Choice::Right
        } else if self.rng.random::<bool>() {
            Choice::Left
        } else {
            Choice::Right
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptionSource {
    RenderA,
    RenderB,
    Original,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    /// 1-based presentation position.
    pub position: usize,
    /// Index into the aligned input lists.
    pub item: usize,
    pub left: OptionSource,
    pub right: OptionSource,
    pub sentinel: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TwoAfcSpec {
    pub seed: u64,
    pub sentinel_every: usize,
}

impl Default for TwoAfcSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            sentinel_every: SENTINEL_EVERY,
        }
    }
}

/// Regular trials in item order with a sentinel at every `sentinel_every`-th
/// position; left/right order is randomised from the seed.
pub fn build_trials(n_items: usize, spec: &TwoAfcSpec) -> Vec<Trial> {
    let mut r = rng::stream(spec.seed, "2afc-order", &[]);
    let every = spec.sentinel_every.max(2);
    if n_items < every {
        log::warn!("{n_items} trials is fewer than {every}; no sentinel trials are inserted");
    }
    let mut out = Vec::new();
    let mut next = 0;
    let mut sentinels = 0usize;
    while next < n_items {
        let position = out.len() + 1;
        let flip: bool = r.random();
        if position % every == 0 && n_items >= every {
            sentinels += 1;
            let foil = if sentinels % 2 == 1 {
                OptionSource::RenderA
            } else {
                OptionSource::RenderB
            };
            let (left, right) = if flip {
                (OptionSource::Original, foil)
            } else {
                (foil, OptionSource::Original)
            };
            out.push(Trial {
                position,
                item: next.saturating_sub(1),
                left,
                right,
                sentinel: true,
            });
        } else {
            let (left, right) = if flip {
                (OptionSource::RenderA, OptionSource::RenderB)
            } else {
                (OptionSource::RenderB, OptionSource::RenderA)
            };
            out.push(Trial {
                position,
                item: next,
                left,
                right,
                sentinel: false,
            });
            next += 1;
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Response {
    pub position: usize,
    pub choice: Choice,
    /// Source of the chosen option; `None` on a tie.
    pub chosen: Option<OptionSource>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeRecord {
    pub judge: String,
    pub responses: Vec<Response>,
    pub failed_sentinels: Vec<usize>,
    pub excluded: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoAfcResult {
    pub trials: Vec<Trial>,
    pub judges: Vec<JudgeRecord>,
    pub valid_trials: usize,
    /// Percentage of valid regular trials preferring A (ties count half).
    pub rate: f64,
    /// `rate - 50`.
    pub delta: f64,
}

pub fn run_2afc(
    spec: &TwoAfcSpec,
    judges: &mut [&mut dyn Judge],
    renders_a: &[Vec<f64>],
    renders_b: &[Vec<f64>],
    originals: &[Vec<f64>],
) -> Result<TwoAfcResult> {
    if renders_a.len() != originals.len() || renders_b.len() != originals.len() {
        return Err(Error::dim(
            "run_2afc",
            &[renders_a.len(), renders_b.len()],
            &[originals.len()],
        ));
    }
    if judges.is_empty() {
        return Err(Error::Data("2AFC needs at least one judge".into()));
    }
    let trials = build_trials(originals.len(), spec);
    let pick = |src: OptionSource, item: usize| -> &[f64] {
        match src {
            OptionSource::RenderA => &renders_a[item],
            OptionSource::RenderB => &renders_b[item],
            OptionSource::Original => &originals[item],
        }
    };
    let mut records = Vec::new();
    let (mut prefer_a, mut valid) = (0.0, 0usize);
    for judge in judges.iter_mut() {
        let mut responses = Vec::with_capacity(trials.len());
        let mut failed = Vec::new();
        for t in &trials {
            let choice = judge.choose(&originals[t.item], pick(t.left, t.item), pick(t.right, t.item));
            let chosen = match choice {
                Choice::Left => Some(t.left),
                Choice::Right => Some(t.right),
                Choice::Tie => None,
            };
            // A tie cannot tell the original from its foil, so it is not counted as a failure.
            if t.sentinel && chosen.is_some_and(|c| c != OptionSource::Original) {
                failed.push(t.position);
            }
            responses.push(Response {
                position: t.position,
                choice,
                chosen,
            });
        }
        let excluded = !failed.is_empty();
        if !excluded {
            for (t, r) in trials.iter().zip(&responses) {
                if t.sentinel {
                    continue;
                }
                valid += 1;
                prefer_a += match r.chosen {
                    Some(OptionSource::RenderA) => 1.0,
                    None => 0.5,
                    _ => 0.0,
                };
            }
        } else {
            log::info!("judge {} failed sentinel(s) {failed:?}; all responses excluded", judge.id());
        }
        records.push(JudgeRecord {
            judge: judge.id(),
            responses,
            failed_sentinels: failed,
            excluded,
        });
    }
    if valid == 0 {
        return Err(Error::Data("every judge was excluded; no valid 2AFC trials".into()));
    }
    let rate = 100.0 * prefer_a / valid as f64;
    Ok(TwoAfcResult {
        trials,
        judges: records,
        valid_trials: valid,
        rate,
        delta: rate - 50.0,
    })
}
