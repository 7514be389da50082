//! Poststratification cells: the cross product of six categorical household
//! covariates, each with a fixed baseline level.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// Number of distinct cells (3·5·3·2·2·5).
pub const NUM_CELLS: usize = 900;

/// Number of non-baseline covariate levels, i.e. the length of the full
/// fixed-effect coefficient vector (excluding the intercept).
pub const NUM_COEFFICIENTS: usize = 14;

/// A categorical covariate with lowercase string tokens and a baseline level.
pub trait Level: Copy + Eq + fmt::Debug + 'static {
    const LEVELS: &'static [Self];
    const BASELINE: Self;
    const COVARIATE: Covariate;

    fn token(self) -> &'static str;

    fn position(self) -> usize {
        Self::LEVELS.iter().position(|&l| l == self).unwrap()
    }

    fn parse(token: &str) -> Option<Self> {
        Self::LEVELS.iter().copied().find(|l| l.token() == token)
    }
}

macro_rules! level_enum {
    (
        $(#[$meta:meta])*
        $name:ident, $cov:ident, baseline = $base:ident,
        { $($variant:ident => $tok:literal),+ $(,)? }
    ) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
        pub enum $name { $($variant),+ }

        impl Level for $name {
            const LEVELS: &'static [Self] = &[$($name::$variant),+];
            const BASELINE: Self = $name::$base;
            const COVARIATE: Covariate = Covariate::$cov;

            fn token(self) -> &'static str {
                match self { $($name::$variant => $tok),+ }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.token())
            }
        }

        impl FromStr for $name {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self, Error> {
                <$name as Level>::parse(s).ok_or_else(|| {
                    Error::InvalidInput(format!(
                        "unknown {} level '{}' (expected one of: {})",
                        Covariate::$cov.column(),
                        s,
                        [$($tok),+].join(", ")
                    ))
                })
            }
        }
    };
}

level_enum!(HouseholdSize, HouseholdSize, baseline = One, {
    One => "1", Two => "2", ThreePlus => "3plus",
});

level_enum!(Income, Income, baseline = From100k, {
    Below25k => "lt25k",
    From25To50k => "25to50k",
    From50To75k => "50to75k",
    From75To100k => "75to100k",
    From100k => "100kplus",
});

level_enum!(Vehicles, Vehicles, baseline = One, {
    Zero => "0", One => "1", TwoPlus => "2plus",
});

level_enum!(Children, Children, baseline = No, {
    Yes => "yes", No => "no",
});

level_enum!(
    /// "rent_other" pools renters with every other non-owner arrangement.
    Tenure, Tenure, baseline = Own, {
    Own => "own", RentOther => "rent_other",
});

level_enum!(Race, Race, baseline = WhiteOnly, {
    AfricanAmerican => "african_american",
    Asian => "asian",
    Hispanic => "hispanic",
    WhiteOnly => "white_only",
    Other => "other",
});

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Covariate {
    #[serde(rename = "hh_size")]
    HouseholdSize,
    Income,
    Vehicles,
    Children,
    Tenure,
    Race,
}

impl Covariate {
    pub const ALL: [Covariate; 6] = [
        Covariate::HouseholdSize,
        Covariate::Income,
        Covariate::Vehicles,
        Covariate::Children,
        Covariate::Tenure,
        Covariate::Race,
    ];

    /// CSV column name.
    pub fn column(self) -> &'static str {
        match self {
            Covariate::HouseholdSize => "hh_size",
            Covariate::Income => "income",
            Covariate::Vehicles => "vehicles",
            Covariate::Children => "children",
            Covariate::Tenure => "tenure",
            Covariate::Race => "race",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

/// One non-baseline level of a covariate: a column of the design matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Coefficient {
    pub covariate: Covariate,
    pub level: &'static str,
    /// Position in the canonical 14-coefficient ordering.
    pub index: usize,
}

impl Coefficient {
    pub fn label(&self) -> String {
        format!("{}:{}", self.covariate.column(), self.level)
    }
}

fn push_levels<L: Level>(out: &mut Vec<Coefficient>) {
    for &l in L::LEVELS {
        if l != L::BASELINE {
            let index = out.len();
            out.push(Coefficient {
                covariate: L::COVARIATE,
                level: l.token(),
                index,
            });
        }
    }
}

/// All 14 coefficients in canonical order (household size, income, vehicles,
/// children, tenure, race; levels in declaration order, baselines skipped).
pub fn all_coefficients() -> Vec<Coefficient> {
    let mut out = Vec::with_capacity(NUM_COEFFICIENTS);
    push_levels::<HouseholdSize>(&mut out);
    push_levels::<Income>(&mut out);
    push_levels::<Vehicles>(&mut out);
    push_levels::<Children>(&mut out);
    push_levels::<Tenure>(&mut out);
    push_levels::<Race>(&mut out);
    out
}

/// The set of covariates entering a model's fixed effects.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "Vec<Covariate>", into = "Vec<Covariate>")]
pub struct CovariateSet(u8);

impl CovariateSet {
    pub fn all() -> Self {
        CovariateSet(0b11_1111)
    }

    pub fn empty() -> Self {
        CovariateSet(0)
    }

    pub fn with(mut self, c: Covariate) -> Self {
        self.0 |= 1 << c.index();
        self
    }

    pub fn contains(self, c: Covariate) -> bool {
        self.0 & (1 << c.index()) != 0
    }

    /// Coefficients of the included covariates, in canonical order.
    pub fn coefficients(self) -> Vec<Coefficient> {
        all_coefficients()
            .into_iter()
            .filter(|c| self.contains(c.covariate))
            .collect()
    }
}

impl From<Vec<Covariate>> for CovariateSet {
    fn from(v: Vec<Covariate>) -> Self {
        v.into_iter().fold(CovariateSet::empty(), CovariateSet::with)
    }
}

impl From<CovariateSet> for Vec<Covariate> {
    fn from(s: CovariateSet) -> Self {
        Covariate::ALL.into_iter().filter(|&c| s.contains(c)).collect()
    }
}

impl Default for CovariateSet {
    fn default() -> Self {
        CovariateSet::all()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CellKey {
    pub household_size: HouseholdSize,
    pub income: Income,
    pub vehicles: Vehicles,
    pub children: Children,
    pub tenure: Tenure,
    pub race: Race,
}

impl CellKey {
    /// Dense index in `[0, 900)`; race varies fastest, household size slowest.
    pub fn index(&self) -> usize {
        let mut i = self.household_size.position();
        i = i * Income::LEVELS.len() + self.income.position();
        i = i * Vehicles::LEVELS.len() + self.vehicles.position();
        i = i * Children::LEVELS.len() + self.children.position();
        i = i * Tenure::LEVELS.len() + self.tenure.position();
        i * Race::LEVELS.len() + self.race.position()
    }

    pub fn from_index(mut i: usize) -> Option<CellKey> {
        if i >= NUM_CELLS {
            return None;
        }
        let race = Race::LEVELS[i % 5];
        i /= 5;
        let tenure = Tenure::LEVELS[i % 2];
        i /= 2;
        let children = Children::LEVELS[i % 2];
        i /= 2;
        let vehicles = Vehicles::LEVELS[i % 3];
        i /= 3;
        let income = Income::LEVELS[i % 5];
        i /= 5;
        let household_size = HouseholdSize::LEVELS[i];
        Some(CellKey {
            household_size,
            income,
            vehicles,
            children,
            tenure,
            race,
        })
    }

    pub fn all() -> impl Iterator<Item = CellKey> {
        (0..NUM_CELLS).map(|i| CellKey::from_index(i).unwrap())
    }

    /// Token of this cell's level for covariate `c`.
    pub fn token(&self, c: Covariate) -> &'static str {
        match c {
            Covariate::HouseholdSize => self.household_size.token(),
            Covariate::Income => self.income.token(),
            Covariate::Vehicles => self.vehicles.token(),
            Covariate::Children => self.children.token(),
            Covariate::Tenure => self.tenure.token(),
            Covariate::Race => self.race.token(),
        }
    }

    /// Canonical indices (into [`all_coefficients`]) of the indicators that
    /// are 1 for this cell.
    pub fn active_coefficients(&self) -> impl Iterator<Item = usize> {
        fn offset<L: Level>(l: L, base: usize) -> Option<usize> {
            if l == L::BASELINE {
                return None;
            }
            let p = l.position();
            let b = L::BASELINE.position();
            Some(base + if p > b { p - 1 } else { p })
        }
        [
            offset(self.household_size, 0),
            offset(self.income, 2),
            offset(self.vehicles, 6),
            offset(self.children, 8),
            offset(self.tenure, 9),
            offset(self.race, 10),
        ]
        .into_iter()
        .flatten()
    }
}

impl fmt::Display for CellKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}/{}/{}/{}/{}/{}",
            self.household_size,
            self.income,
            self.vehicles,
            self.children,
            self.tenure,
            self.race
        )
    }
}

/// Per-cell design rows restricted to a covariate subset: `rows[cell]` lists
/// the positions (within the subset's coefficient vector) set to 1.
pub fn design_rows(set: CovariateSet) -> Vec<Vec<usize>> {
    let coefs = all_coefficients();
    let mut position = vec![None; NUM_COEFFICIENTS];
    let mut k = 0;
    for c in &coefs {
        if set.contains(c.covariate) {
            position[c.index] = Some(k);
            k += 1;
        }
    }
    CellKey::all()
        .map(|cell| {
            cell.active_coefficients()
                .filter_map(|i| position[i])
                .collect()
        })
        .collect()
}
