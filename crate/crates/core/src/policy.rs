//! Augmentation policies: RandAugment and AutoAugment-style sub-policy lists,
//! per-sample sampling, and the 14-dimensional transform vector.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageops::{self, magnitude_to_param, AugmentSpace, Image, TransformKind, TransformParam};

/// Number of dimensions of the transform vector.
pub const TAU_DIMS: usize = 14;

/// One `(kind, probability, magnitude)` entry of a sub-policy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Triple {
    pub kind: TransformKind,
    pub prob: f64,
    pub magnitude: u32,
}

impl Triple {
    /// The space whose magnitude scale applies: cutout uses the destruction
    /// scale, every other kind the full one.
    pub fn space(&self) -> AugmentSpace {
        if self.kind == TransformKind::Cutout {
            AugmentSpace::Destruction
        } else {
            AugmentSpace::Full14
        }
    }

    fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.prob) {
            return Err(Error::InvalidPolicy(format!(
                "probability {} of {} outside [0, 1]",
                self.prob, self.kind
            )));
        }
        let max = self.space().max_level();
        if self.magnitude > max {
            return Err(Error::InvalidPolicy(format!(
                "magnitude {} of {} outside 0..={max}",
                self.magnitude, self.kind
            )));
        }
        Ok(())
    }
}

pub type SubPolicy = [Triple; 2];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum PolicySpec {
    /// `n` consecutive transforms drawn uniformly from `space`, each at magnitude `m`.
    RandAugment { n: u32, m: u32, space: AugmentSpace },
    /// One sub-policy drawn uniformly per image; each triple gated by its probability.
    SubPolicies(Vec<SubPolicy>),
}

impl PolicySpec {
    pub fn rand_augment(n: u32, m: u32, space: AugmentSpace) -> Result<Self> {
        let p = Self::RandAugment { n, m, space };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Self::RandAugment { n, m, space } => {
                if *n == 0 {
                    return Err(Error::InvalidPolicy("randaugment needs n >= 1".into()));
                }
                if *m > space.max_level() {
                    return Err(Error::InvalidPolicy(format!(
                        "magnitude {m} outside 0..={} for the {space} space",
                        space.max_level()
                    )));
                }
                Ok(())
            }
            Self::SubPolicies(list) => {
                if list.is_empty() {
                    return Err(Error::InvalidPolicy("empty sub-policy list".into()));
                }
                list.iter().flatten().try_for_each(Triple::validate)
            }
        }
    }

    /// Draws the transforms for one image.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Vec<TransformInstance>> {
        match self {
            Self::RandAugment { n, m, space } => {
                let kinds = space.kinds();
                (0..*n)
                    .map(|_| {
                        let kind = kinds[rng.random_range(0..kinds.len())];
                        let param = resolve(kind, *m, *space, rng)?;
                        Ok(TransformInstance {
                            param,
                            probability: 1.0,
                            applied: true,
                        })
                    })
                    .collect()
            }
            Self::SubPolicies(list) => {
                if list.is_empty() {
                    return Err(Error::InvalidPolicy("empty sub-policy list".into()));
                }
                let sub = &list[rng.random_range(0..list.len())];
                sub.iter()
                    .map(|t| {
                        let applied = rng.random::<f64>() < t.prob;
                        let param = resolve(t.kind, t.magnitude, t.space(), rng)?;
                        Ok(TransformInstance {
                            param,
                            probability: t.prob,
                            applied,
                        })
                    })
                    .collect()
            }
        }
    }
}

/// Maps a level to its parameter, then draws the direction (uniform ±) and,
/// for cutout, the square centre (uniform over the image).
fn resolve<R: Rng + ?Sized>(
    kind: TransformKind,
    level: u32,
    space: AugmentSpace,
    rng: &mut R,
) -> Result<TransformParam> {
    let mut param = magnitude_to_param(kind, level, space)?;
    if kind.is_signed() && rng.random::<bool>() {
        param = param.negated();
    }
    if kind == TransformKind::Cutout {
        param = param.with_anchor((rng.random(), rng.random()));
    }
    Ok(param)
}

/// A sampled transform with its direction resolved and its gate decided.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransformInstance {
    pub param: TransformParam,
    pub probability: f64,
    /// Outcome of the probability gate; `false` means the transform is skipped.
    pub applied: bool,
}

impl TransformInstance {
    pub fn always(param: TransformParam) -> Self {
        Self {
            param,
            probability: 1.0,
            applied: true,
        }
    }
}

/// Per-dimension magnitudes (0 = switched off) and application probabilities.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TransformVector {
    pub entries: [f64; TAU_DIMS],
    pub probs: [f64; TAU_DIMS],
}

impl TransformVector {
    pub fn nonzero_count(&self) -> usize {
        self.entries.iter().filter(|&&e| e != 0.0).count()
    }
}

/// Collapses sampled instances drawn from the full space into a transform
/// vector. Each dimension holds the instance's strength (distance from the
/// identity); a kind drawn twice keeps the larger strength.
pub fn to_tau(instances: &[TransformInstance]) -> Result<TransformVector> {
    let mut tau = TransformVector::default();
    let mut kinds: Vec<TransformKind> = Vec::with_capacity(2);
    for inst in instances {
        let kind = inst.param.kind;
        let Some(dim) = kind.tau_index() else {
            return Err(Error::TransformVector(format!(
                "{kind} has no dimension in the transform vector"
            )));
        };
        if !kinds.contains(&kind) {
            kinds.push(kind);
            if kinds.len() > 2 {
                return Err(Error::TransformVector(format!(
                    "at most two distinct transforms allowed, got {}",
                    instances.len()
                )));
            }
        }
        tau.entries[dim] = tau.entries[dim].max(inst.param.strength());
        tau.probs[dim] = tau.probs[dim].max(inst.probability);
    }
    Ok(tau)
}

/// Applies every gated-in instance left to right.
pub fn augment(img: &Image, instances: &[TransformInstance], fill: u8) -> Result<Image> {
    let mut out = img.clone();
    for inst in instances.iter().filter(|i| i.applied) {
        out = imageops::apply(&out, &inst.param, fill)?;
    }
    Ok(out)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes an ordered list of words into one seed.
pub fn mix_seed(words: &[u64]) -> u64 {
    words
        .iter()
        .fold(0x6A09_E667_F3BC_C909, |acc, &w| splitmix64(acc ^ splitmix64(w)))
}

/// Random stream for one sample in one epoch. Depends only on its three
/// arguments, so augmentation does not depend on batch order or worker count.
pub fn sample_rng(seed: u64, epoch: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(&[seed, epoch, index]))
}

/// Parses the line-oriented policy format:
///
/// ```text
/// # comment
/// randaugment n=2 m=4 space=destruction
/// ```
///
/// or one `subpolicy <kind> <prob> <mag> <kind> <prob> <mag>` line per
/// sub-policy.
pub fn parse_policy(text: &str) -> Result<PolicySpec> {
    let mut rand_aug: Option<(usize, PolicySpec)> = None;
    let mut subs: Vec<SubPolicy> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let syntax = |msg: String| Error::PolicySyntax { line: line_no, msg };
        let mut tokens = line.split_whitespace();
        match tokens.next() {
            Some("randaugment") => {
                if rand_aug.is_some() || !subs.is_empty() {
                    return Err(syntax("randaugment must be the only policy line".into()));
                }
                let spec = parse_rand_augment(tokens).map_err(syntax)?;
                spec.validate().map_err(|e| syntax(e.to_string()))?;
                rand_aug = Some((line_no, spec));
            }
            Some("subpolicy") => {
                if rand_aug.is_some() {
                    return Err(syntax("subpolicy lines cannot follow randaugment".into()));
                }
                let toks: Vec<&str> = tokens.collect();
                if toks.len() != 6 {
                    return Err(syntax(format!(
                        "subpolicy needs 6 fields (kind prob mag kind prob mag), got {}",
                        toks.len()
                    )));
                }
                let first = parse_triple(&toks[0..3]).map_err(syntax)?;
                let second = parse_triple(&toks[3..6]).map_err(syntax)?;
                for t in [&first, &second] {
                    t.validate().map_err(|e| syntax(e.to_string()))?;
                }
                subs.push([first, second]);
            }
            Some(other) => return Err(syntax(format!("unknown directive `{other}`"))),
            None => unreachable!(),
        }
    }
    match rand_aug {
        Some((_, spec)) => Ok(spec),
        None if subs.is_empty() => Err(Error::PolicySyntax {
            line: text.lines().count().max(1),
            msg: "no policy lines".into(),
        }),
        None => Ok(PolicySpec::SubPolicies(subs)),
    }
}

fn parse_rand_augment<'a>(tokens: impl Iterator<Item = &'a str>) -> Result<PolicySpec, String> {
    let (mut n, mut m, mut space) = (None, None, None);
    for tok in tokens {
        let (key, value) = tok
            .split_once('=')
            .ok_or_else(|| format!("expected key=value, got `{tok}`"))?;
        match key {
            "n" => n = Some(value.parse::<u32>().map_err(|e| format!("n: {e}"))?),
            "m" => m = Some(value.parse::<u32>().map_err(|e| format!("m: {e}"))?),
            "space" => {
                space = Some(
                    AugmentSpace::from_name(value)
                        .ok_or_else(|| format!("unknown space `{value}`"))?,
                )
            }
            other => return Err(format!("unknown key `{other}`")),
        }
    }
    Ok(PolicySpec::RandAugment {
        n: n.ok_or("missing n=")?,
        m: m.ok_or("missing m=")?,
        space: space.ok_or("missing space=")?,
    })
}

fn parse_triple(toks: &[&str]) -> Result<Triple, String> {
    let kind =
        TransformKind::from_name(toks[0]).ok_or_else(|| format!("unknown kind `{}`", toks[0]))?;
    let prob = toks[1]
        .parse::<f64>()
        .map_err(|e| format!("probability `{}`: {e}", toks[1]))?;
    let magnitude = toks[2]
        .parse::<u32>()
        .map_err(|e| format!("magnitude `{}`: {e}", toks[2]))?;
    Ok(Triple {
        kind,
        prob,
        magnitude,
    })
}

impl fmt::Display for PolicySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::RandAugment { n, m, space } => write!(f, "randaugment n={n} m={m} space={space}"),
            Self::SubPolicies(list) => {
                for (i, [a, b]) in list.iter().enumerate() {
                    if i > 0 {
                        writeln!(f)?;
                    }
                    write!(
                        f,
                        "subpolicy {} {:?} {} {} {:?} {}",
                        a.kind, a.prob, a.magnitude, b.kind, b.prob, b.magnitude
                    )?;
                }
                Ok(())
            }
        }
    }
}

impl FromStr for PolicySpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        parse_policy(s)
    }
}

impl TryFrom<String> for PolicySpec {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        parse_policy(&s)
    }
}

impl From<PolicySpec> for String {
    fn from(p: PolicySpec) -> String {
        p.to_string()
    }
}
