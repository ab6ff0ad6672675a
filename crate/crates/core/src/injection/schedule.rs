use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which feature streams a tap receives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InjectionRole {
    MaskedImage,
    Mask,
    Both,
    None,
}

/// A feature stream feeding an attention block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stream {
    Mask,
    MaskedImage,
}

impl Stream {
    pub fn as_str(self) -> &'static str {
        match self {
            Stream::Mask => "mask",
            Stream::MaskedImage => "masked_image",
        }
    }
}

impl fmt::Display for Stream {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl InjectionRole {
    /// Streams in fusion order: mask before masked image.
    pub fn streams(self) -> &'static [Stream] {
        match self {
            InjectionRole::MaskedImage => &[Stream::MaskedImage],
            InjectionRole::Mask => &[Stream::Mask],
            InjectionRole::Both => &[Stream::Mask, Stream::MaskedImage],
            InjectionRole::None => &[],
        }
    }
}

/// Role per tap id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(
    try_from = "BTreeMap<usize, InjectionRole>",
    into = "BTreeMap<usize, InjectionRole>"
)]
pub struct InjectionSchedule {
    roles: BTreeMap<usize, InjectionRole>,
}

impl InjectionSchedule {
    /// Requires at least one tap with a role other than `None`.
    pub fn new(roles: BTreeMap<usize, InjectionRole>) -> Result<Self> {
        if roles.values().all(|r| *r == InjectionRole::None) {
            return Err(Error::config("injection schedule has no active tap"));
        }
        Ok(Self { roles })
    }

    /// Every tap in `0..taps` passes through untouched.
    pub fn passthrough(taps: usize) -> Self {
        Self {
            roles: (0..taps).map(|t| (t, InjectionRole::None)).collect(),
        }
    }

    pub fn role(&self, tap: usize) -> InjectionRole {
        self.roles.get(&tap).copied().unwrap_or(InjectionRole::None)
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, InjectionRole)> + '_ {
        self.roles.iter().map(|(k, v)| (*k, *v))
    }

    pub fn active(&self) -> impl Iterator<Item = (usize, InjectionRole)> + '_ {
        self.iter().filter(|(_, r)| *r != InjectionRole::None)
    }

    pub fn taps(&self) -> impl Iterator<Item = usize> + '_ {
        self.roles.keys().copied()
    }

    pub fn is_passthrough(&self) -> bool {
        self.active().next().is_none()
    }
}

impl std::ops::Index<usize> for InjectionSchedule {
    type Output = InjectionRole;

    fn index(&self, tap: usize) -> &InjectionRole {
        self.roles.get(&tap).unwrap_or(&InjectionRole::None)
    }
}

impl TryFrom<BTreeMap<usize, InjectionRole>> for InjectionSchedule {
    type Error = Error;

    fn try_from(roles: BTreeMap<usize, InjectionRole>) -> Result<Self> {
        if roles.is_empty() {
            return Err(Error::config("empty injection schedule"));
        }
        Ok(Self { roles })
    }
}

impl From<InjectionSchedule> for BTreeMap<usize, InjectionRole> {
    fn from(s: InjectionSchedule) -> Self {
        s.roles
    }
}

/// Masked image at the outermost taps, both streams one level in, the mask
/// alone at the bottleneck.
pub fn default_schedule() -> InjectionSchedule {
    use InjectionRole::*;
    let roles = [
        MaskedImage,
        Both,
        None,
        None,
        Mask,
        None,
        None,
        Both,
        MaskedImage,
    ];
    InjectionSchedule::new(roles.into_iter().enumerate().collect())
        .expect("default schedule is active")
}
