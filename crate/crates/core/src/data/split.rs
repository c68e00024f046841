use serde::{Deserialize, Serialize};

use super::TrialSet;
use crate::error::{Error, Result};

/// Which sessions form the source and target domains.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum SplitPolicy {
    /// Session 1 is the source, session 2 the target.
    Iia,
    /// Sessions 1 to 3 are the source, 4 and 5 the target.
    Iib,
    Custom { source: Vec<u16>, target: Vec<u16> },
}

impl SplitPolicy {
    fn sessions(&self) -> (Vec<u16>, Vec<u16>) {
        match self {
            SplitPolicy::Iia => (vec![1], vec![2]),
            SplitPolicy::Iib => (vec![1, 2, 3], vec![4, 5]),
            SplitPolicy::Custom { source, target } => (source.clone(), target.clone()),
        }
    }
}

impl std::str::FromStr for SplitPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "iia" => Ok(SplitPolicy::Iia),
            "iib" => Ok(SplitPolicy::Iib),
            other => Err(Error::Config(format!("unknown split policy '{other}' (expected iia or iib)"))),
        }
    }
}

/// Partitions `set` by session tag. Every tag must belong to one side.
pub fn split_sessions(set: &TrialSet, policy: &SplitPolicy) -> Result<(TrialSet, TrialSet)> {
    let tags = set
        .sessions
        .as_ref()
        .ok_or_else(|| Error::Config("trial set carries no session tags".into()))?;
    let (src, tgt) = policy.sessions();
    let (mut s, mut t) = (Vec::new(), Vec::new());
    for (i, tag) in tags.iter().enumerate() {
        if src.contains(tag) {
            s.push(i);
        } else if tgt.contains(tag) {
            t.push(i);
        } else {
            return Err(Error::UnknownSession(*tag));
        }
    }
    Ok((set.subset(&s), set.subset(&t)))
}
