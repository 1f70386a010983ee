use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

pub const NUM_WEATHER: usize = 7;

/// Weather categories, in vocabulary row order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Weather {
    Normal,
    Overcast,
    Fog,
    Rain,
    Sleet,
    #[serde(rename = "lightsnow")]
    LightSnow,
    #[serde(rename = "heavysnow")]
    HeavySnow,
}

impl Weather {
    pub const ALL: [Weather; NUM_WEATHER] = [
        Weather::Normal,
        Weather::Overcast,
        Weather::Fog,
        Weather::Rain,
        Weather::Sleet,
        Weather::LightSnow,
        Weather::HeavySnow,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Weather> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Weather::Normal => "normal",
            Weather::Overcast => "overcast",
            Weather::Fog => "fog",
            Weather::Rain => "rain",
            Weather::Sleet => "sleet",
            Weather::LightSnow => "lightsnow",
            Weather::HeavySnow => "heavysnow",
        }
    }
}

impl fmt::Display for Weather {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Weather {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        Weather::ALL
            .into_iter()
            .find(|w| w.name() == s)
            .ok_or_else(|| Error::Config(alloc::format!("unknown weather category `{s}`")))
    }
}
