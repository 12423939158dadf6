//! Compression rules: which axes each block's second moment is shared over,
//! how rules are derived from averaged SNR, and what they save.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Census, LayerType};
use crate::optim::Baseline;
use crate::snr::{depth_averaged_snr, AveragedSnr};
use crate::tensor::Axes;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeriveMode {
    #[default]
    PerLayer,
    DepthAveraged,
}

impl DeriveMode {
    pub fn as_str(self) -> &'static str {
        match self {
            DeriveMode::PerLayer => "per_layer",
            DeriveMode::DepthAveraged => "depth_averaged",
        }
    }
}

impl FromStr for DeriveMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per_layer" => Ok(DeriveMode::PerLayer),
            "depth_averaged" => Ok(DeriveMode::DepthAveraged),
            _ => Err(Error::Input(format!("unknown derive mode `{s}`"))),
        }
    }
}

/// Where a rule set came from.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Derived {
        cutoff: f64,
        lr: Option<f64>,
        source: String,
        mode: DeriveMode,
    },
    Baseline(Baseline),
    Canonical,
    #[default]
    Manual,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Provenance::Derived {
                cutoff,
                lr,
                source,
                mode,
            } => {
                write!(f, "derived cutoff={cutoff} mode={}", mode.as_str())?;
                if let Some(lr) = lr {
                    write!(f, " lr={lr}")?;
                }
                if !source.is_empty() {
                    write!(f, " source={source}")?;
                }
                Ok(())
            }
            Provenance::Baseline(b) => write!(f, "baseline {}", b.as_str()),
            Provenance::Canonical => f.write_str("canonical"),
            Provenance::Manual => f.write_str("manual"),
        }
    }
}

impl FromStr for Provenance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut parts = s.split_whitespace();
        let bad = || Error::Input(format!("bad provenance `{s}`"));
        match parts.next() {
            Some("manual") => Ok(Provenance::Manual),
            Some("canonical") => Ok(Provenance::Canonical),
            Some("baseline") => Ok(Provenance::Baseline(parts.next().ok_or_else(bad)?.parse()?)),
            Some("derived") => {
                let (mut cutoff, mut lr, mut source, mut mode) =
                    (None, None, String::new(), DeriveMode::PerLayer);
                for kv in parts {
                    let (k, v) = kv.split_once('=').ok_or_else(bad)?;
                    match k {
                        "cutoff" => cutoff = Some(v.parse::<f64>().map_err(|_| bad())?),
                        "lr" => lr = Some(v.parse::<f64>().map_err(|_| bad())?),
                        "source" => source = v.to_string(),
                        "mode" => mode = v.parse()?,
                        _ => return Err(bad()),
                    }
                }
                Ok(Provenance::Derived {
                    cutoff: cutoff.ok_or_else(bad)?,
                    lr,
                    source,
                    mode,
                })
            }
            _ => Err(bad()),
        }
    }
}

/// Block name → sharing axes. Blocks not listed are uncompressed.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RuleSet {
    rules: BTreeMap<String, Axes>,
    pub provenance: Provenance,
}

impl RuleSet {
    pub fn new(provenance: Provenance) -> Self {
        RuleSet {
            rules: BTreeMap::new(),
            provenance,
        }
    }

    pub fn insert(&mut self, name: &str, axes: Axes) -> Option<Axes> {
        self.rules.insert(name.to_string(), axes)
    }

    pub fn get(&self, name: &str) -> Axes {
        self.rules.get(name).copied().unwrap_or(Axes::None)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.rules.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Axes)> {
        self.rules.iter().map(|(k, v)| (k.as_str(), *v))
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    /// Every rule must name an untied block of `census` and use axes valid
    /// for that block's rank.
    pub fn check_against(&self, census: &Census) -> Result<()> {
        for (name, k) in self.iter() {
            let entry = census
                .get(name)
                .ok_or_else(|| Error::Input(format!("rule for unknown block `{name}`")))?;
            if let Some(target) = &entry.tied_to {
                return Err(Error::Input(format!(
                    "block `{name}` is tied to `{target}`; rule the target"
                )));
            }
            if !k.valid_for_rank(entry.shape.len()) {
                return Err(Error::Input(format!(
                    "axes {k} invalid for block `{name}` {:?}",
                    entry.shape
                )));
            }
        }
        Ok(())
    }

    /// One `name axes` line per rule, sorted by name. Non-manual provenance
    /// is recorded in a leading `# provenance:` comment.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        if self.provenance != Provenance::Manual {
            out.push_str(&format!("# provenance: {}\n", self.provenance));
        }
        for (name, k) in self.iter() {
            out.push_str(&format!("{name} {k}\n"));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut rules = RuleSet::new(Provenance::Manual);
        for (i, raw) in text.lines().enumerate() {
            let perr = |msg: String| Error::Parse { line: i + 1, msg };
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(comment) = line.strip_prefix('#') {
                if let Some(p) = comment.trim().strip_prefix("provenance:") {
                    rules.provenance = p.trim().parse().map_err(|e: Error| perr(e.to_string()))?;
                }
                continue;
            }
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 2 {
                return Err(perr(format!("expected `name axes`, got `{line}`")));
            }
            let k: Axes = f[1].parse().map_err(|e: Error| perr(e.to_string()))?;
            if rules.insert(f[0], k).is_some() {
                return Err(perr(format!("duplicate block `{}`", f[0])));
            }
        }
        Ok(rules)
    }
}

/// Order in which equal SNR values are resolved: more savings first.
const TIE_ORDER: [Axes; 3] = [Axes::Both, Axes::FanOut, Axes::FanIn];

#[derive(Debug, Clone, PartialEq)]
pub struct DeriveOptions {
    pub cutoff: f64,
    pub mode: DeriveMode,
    /// Whether sharing over both axes is a candidate.
    pub allow_both: bool,
    pub lr: Option<f64>,
    pub source: String,
}

impl Default for DeriveOptions {
    fn default() -> Self {
        DeriveOptions {
            cutoff: 1.0,
            mode: DeriveMode::PerLayer,
            allow_both: true,
            lr: None,
            source: String::new(),
        }
    }
}

/// Compresses each matrix block along its highest-SNR axes when that SNR
/// reaches the cutoff; vectors stay uncompressed.
pub fn derive_rules(avg: &AveragedSnr, census: &Census, opts: &DeriveOptions) -> Result<RuleSet> {
    if !(opts.cutoff > 0.0) {
        return Err(Error::Input(format!(
            "cutoff must be positive, got {}",
            opts.cutoff
        )));
    }
    let by_type = depth_averaged_snr(avg, census)?;
    let mut rules = RuleSet::new(Provenance::Derived {
        cutoff: opts.cutoff,
        lr: opts.lr,
        source: opts.source.clone(),
        mode: opts.mode,
    });
    for e in census.primary() {
        if !e.is_matrix() {
            rules.insert(&e.name, Axes::None);
            continue;
        }
        let mut best: Option<(Axes, f64)> = None;
        for k in TIE_ORDER {
            if k == Axes::Both && !opts.allow_both {
                continue;
            }
            let snr = match opts.mode {
                DeriveMode::PerLayer => avg.get(&(e.name.clone(), k)).copied(),
                DeriveMode::DepthAveraged => by_type.get(&(e.layer_type, k)).copied(),
            }
            .ok_or_else(|| {
                Error::Input(format!("no averaged SNR for block `{}` along {k}", e.name))
            })?;
            if best.is_none_or(|(_, s)| snr > s) {
                best = Some((k, snr));
            }
        }
        let (k, snr) = best.expect("at least one candidate");
        rules.insert(&e.name, if snr >= opts.cutoff { k } else { Axes::None });
    }
    Ok(rules)
}

/// Recommended sharing axes per layer type for the `(fan_out, fan_in)`
/// orientation used here. The embedding and LM head are stored as
/// `(vocab, d_model)`, so sharing over the embedding dimension (one moment
/// per token) is `FanIn` for both.
pub fn canonical_axes(t: LayerType) -> Axes {
    match t {
        LayerType::AttnKey | LayerType::AttnQuery => Axes::FanIn,
        LayerType::AttnValue | LayerType::AttnProj => Axes::FanOut,
        LayerType::MLPUp | LayerType::MLPDown => Axes::FanOut,
        LayerType::TokEmbd | LayerType::LMHead => Axes::FanIn,
        LayerType::AttnLN | LayerType::MLPLN | LayerType::FinalLN => Axes::None,
        LayerType::PosEmbd | LayerType::Generic => Axes::None,
    }
}

pub fn canonical_rules(census: &Census) -> RuleSet {
    let mut rules = RuleSet::new(Provenance::Canonical);
    for e in census.primary() {
        let k = if e.is_matrix() {
            canonical_axes(e.layer_type)
        } else {
            Axes::None
        };
        rules.insert(&e.name, k);
    }
    rules
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EntryCounts {
    pub total: u64,
    pub stored: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SavingsReport {
    pub total_entries: u64,
    pub stored_entries: u64,
    pub fraction: f64,
    pub per_layer_type: BTreeMap<String, EntryCounts>,
}

/// Second-moment entries stored under `rules` versus full Adam. Tied
/// blocks are counted once.
pub fn savings_report(census: &Census, rules: &RuleSet) -> Result<SavingsReport> {
    rules.check_against(census)?;
    let mut per_type: BTreeMap<String, EntryCounts> = BTreeMap::new();
    let (mut total, mut stored) = (0u64, 0u64);
    for e in census.primary() {
        let full = e.numel() as u64;
        let kept = rules.get(&e.name).reduced_len(&e.shape)? as u64;
        total += full;
        stored += kept;
        let c = per_type.entry(e.layer_type.to_string()).or_default();
        c.total += full;
        c.stored += kept;
    }
    let fraction = if total == 0 {
        0.0
    } else {
        1.0 - stored as f64 / total as f64
    };
    Ok(SavingsReport {
        total_entries: total,
        stored_entries: stored,
        fraction,
        per_layer_type: per_type,
    })
}

pub fn savings_fraction(census: &Census, rules: &RuleSet) -> Result<f64> {
    Ok(savings_report(census, rules)?.fraction)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::CensusEntry;

    fn entry(name: &str, t: LayerType, shape: Vec<usize>) -> CensusEntry {
        CensusEntry {
            name: name.into(),
            layer_type: t,
            depth: 0,
            shape,
            tied_to: None,
        }
    }

    fn avg_for(name: &str, fo: f64, fi: f64, both: f64) -> AveragedSnr {
        [(Axes::FanOut, fo), (Axes::FanIn, fi), (Axes::Both, both)]
            .into_iter()
            .map(|(k, v)| ((name.to_string(), k), v))
            .collect()
    }

    #[test]
    fn argmax_above_cutoff() {
        let census = Census {
            entries: vec![entry("w", LayerType::MLPUp, vec![4, 8])],
        };
        let opts = DeriveOptions::default();
        let r = derive_rules(&avg_for("w", 0.5, 2.0, 1.5), &census, &opts).unwrap();
        assert_eq!(r.get("w"), Axes::FanIn);
        let r = derive_rules(&avg_for("w", 0.5, 0.9, 0.2), &census, &opts).unwrap();
        assert_eq!(r.get("w"), Axes::None);
        assert!(r.contains("w"));
        // Ties go to the cheaper option.
        let r = derive_rules(&avg_for("w", 3.0, 3.0, 3.0), &census, &opts).unwrap();
        assert_eq!(r.get("w"), Axes::Both);
        let r = derive_rules(&avg_for("w", 3.0, 3.0, 1.0), &census, &opts).unwrap();
        assert_eq!(r.get("w"), Axes::FanOut);
        let no_both = DeriveOptions {
            allow_both: false,
            ..DeriveOptions::default()
        };
        let r = derive_rules(&avg_for("w", 0.5, 2.0, 9.0), &census, &no_both).unwrap();
        assert_eq!(r.get("w"), Axes::FanIn);
    }

    #[test]
    fn vectors_never_compressed() {
        let census = Census {
            entries: vec![entry("ln", LayerType::FinalLN, vec![8])],
        };
        let mut avg = AveragedSnr::new();
        avg.insert(("ln".into(), Axes::Both), 100.0);
        let r = derive_rules(&avg, &census, &DeriveOptions::default()).unwrap();
        assert_eq!(r.get("ln"), Axes::None);
    }

    #[test]
    fn missing_coverage_is_an_error() {
        let census = Census {
            entries: vec![entry("w", LayerType::MLPUp, vec![4, 8])],
        };
        let mut avg = avg_for("w", 1.0, 1.0, 1.0);
        avg.remove(&("w".to_string(), Axes::FanIn));
        assert!(matches!(
            derive_rules(&avg, &census, &DeriveOptions::default()),
            Err(Error::Input(_))
        ));
        let bad = DeriveOptions {
            cutoff: 0.0,
            ..DeriveOptions::default()
        };
        assert!(derive_rules(&avg_for("w", 1.0, 1.0, 1.0), &census, &bad).is_err());
    }

    #[test]
    fn depth_averaged_mode_uses_type_means() {
        let census = Census {
            entries: vec![
                CensusEntry {
                    depth: 0,
                    ..entry("a", LayerType::MLPUp, vec![4, 4])
                },
                CensusEntry {
                    depth: 1,
                    ..entry("b", LayerType::MLPUp, vec![4, 4])
                },
            ],
        };
        let mut avg = avg_for("a", 4.0, 0.1, 0.1);
        avg.extend(avg_for("b", 0.1, 3.0, 0.1));
        let per = derive_rules(&avg, &census, &DeriveOptions::default()).unwrap();
        assert_eq!((per.get("a"), per.get("b")), (Axes::FanOut, Axes::FanIn));
        let opts = DeriveOptions {
            mode: DeriveMode::DepthAveraged,
            ..DeriveOptions::default()
        };
        let mean = derive_rules(&avg, &census, &opts).unwrap();
        assert_eq!((mean.get("a"), mean.get("b")), (Axes::FanOut, Axes::FanOut));
    }

    #[test]
    fn savings_counts() {
        let census = Census {
            entries: vec![entry("w", LayerType::Generic, vec![4, 8])],
        };
        let mut r = RuleSet::default();
        r.insert("w", Axes::FanIn);
        assert_eq!(savings_fraction(&census, &r).unwrap(), 0.875);
        assert_eq!(savings_fraction(&census, &RuleSet::default()).unwrap(), 0.0);
        r.insert("ghost", Axes::Both);
        assert!(matches!(
            savings_fraction(&census, &r),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn canonical_table() {
        assert_eq!(canonical_axes(LayerType::AttnKey), Axes::FanIn);
        assert_eq!(canonical_axes(LayerType::MLPDown), Axes::FanOut);
        assert_eq!(canonical_axes(LayerType::FinalLN), Axes::None);
        // The vocabulary axis is axis 0, so no canonical rule may touch it.
        for t in LayerType::ALL.into_iter().filter(|t| t.has_token_dim()) {
            assert!(!matches!(canonical_axes(t), Axes::FanOut | Axes::Both));
        }
    }

    #[test]
    fn text_round_trip() {
        let mut r = RuleSet::default();
        r.insert("a", Axes::FanIn);
        assert_eq!(r.to_text(), "a fan_in\n");
        assert_eq!(RuleSet::from_text(&r.to_text()).unwrap(), r);

        let derived = RuleSet {
            provenance: Provenance::Derived {
                cutoff: 2.0,
                lr: Some(3e-4),
                source: "runs/adam".into(),
                mode: DeriveMode::DepthAveraged,
            },
            ..r.clone()
        };
        assert_eq!(RuleSet::from_text(&derived.to_text()).unwrap(), derived);
        let base = RuleSet {
            provenance: Provenance::Baseline(Baseline::AdaminiV2),
            ..r
        };
        assert_eq!(RuleSet::from_text(&base.to_text()).unwrap(), base);
    }

    #[test]
    fn text_errors() {
        assert!(matches!(
            RuleSet::from_text("x sideways"),
            Err(Error::Parse { line: 1, .. })
        ));
        assert!(matches!(
            RuleSet::from_text("# c\na none\na both\n"),
            Err(Error::Parse { line: 3, .. })
        ));
        assert!(matches!(
            RuleSet::from_text("a\n"),
            Err(Error::Parse { line: 1, .. })
        ));
        let empty = RuleSet::from_text("").unwrap();
        assert!(empty.is_empty());
        assert_eq!(empty.provenance, Provenance::Manual);
        let commented = RuleSet::from_text("# just a note\n\n").unwrap();
        assert!(commented.is_empty());
    }
}
