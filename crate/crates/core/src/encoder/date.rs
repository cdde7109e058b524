//! Date features: day, month, clipped year, weekday and holiday indicators.

use serde::Serialize;

use crate::value::CivilDate;

pub const YEAR_MIN: i32 = 1950;
pub const YEAR_MAX: i32 = 2050;
pub const YEAR_CLASSES: usize = (YEAR_MAX - YEAR_MIN + 1) as usize;
pub const DAY_CLASSES: usize = 31;
pub const MONTH_CLASSES: usize = 12;
pub const WEEKDAY_CLASSES: usize = 7;

/// Regions with a holiday indicator, in flag order.
pub const HOLIDAY_REGIONS: [&str; 8] = ["US", "UK", "DE", "FR", "CN", "JP", "IN", "BR"];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DateFeatures {
    pub day: u8,
    pub month: u8,
    /// The true year; see [`DateFeatures::year_index`] for the clipped class.
    pub year: i32,
    /// Monday = 0.
    pub day_of_week: u8,
    pub holidays: [bool; HOLIDAY_REGIONS.len()],
}

impl DateFeatures {
    pub fn year_index(&self) -> usize {
        year_index(self.year)
    }

    pub fn day_index(&self) -> usize {
        self.day as usize - 1
    }

    pub fn month_index(&self) -> usize {
        self.month as usize - 1
    }
}

pub fn year_index(year: i32) -> usize {
    (year.clamp(YEAR_MIN, YEAR_MAX) - YEAR_MIN) as usize
}

pub fn date_features(date: CivilDate) -> DateFeatures {
    DateFeatures {
        day: date.day(),
        month: date.month(),
        year: date.year(),
        day_of_week: date.weekday(),
        holidays: holiday_flags(date),
    }
}

/// Western Easter Sunday (Meeus/Jones/Butcher).
pub fn easter_sunday(year: i32) -> CivilDate {
    let a = year.rem_euclid(19);
    let b = year.div_euclid(100);
    let c = year.rem_euclid(100);
    let d = b / 4;
    let e = b % 4;
    let f = (b + 8) / 25;
    let g = (b - f + 1) / 3;
    let h = (19 * a + b - d - g + 15).rem_euclid(30);
    let i = c / 4;
    let k = c % 4;
    let l = (32 + 2 * e + 2 * i - h - k).rem_euclid(7);
    let m = (a + 11 * h + 22 * l) / 451;
    let month = (h + l - 7 * m + 114) / 31;
    let day = (h + l - 7 * m + 114) % 31 + 1;
    CivilDate::new(year, month as u8, day as u8).expect("computus yields a valid date")
}

struct Rules {
    fixed: &'static [(u8, u8)],
    /// Offsets in days from Easter Sunday.
    easter: &'static [i64],
}

const GOOD_FRIDAY: i64 = -2;
const EASTER_MONDAY: i64 = 1;
const ASCENSION: i64 = 39;
const WHIT_MONDAY: i64 = 50;

const RULES: [Rules; 8] = [
    // US
    Rules { fixed: &[(1, 1), (7, 4), (11, 11), (12, 25)], easter: &[] },
    // UK
    Rules { fixed: &[(1, 1), (12, 25), (12, 26)], easter: &[GOOD_FRIDAY, EASTER_MONDAY] },
    // DE
    Rules {
        fixed: &[(1, 1), (5, 1), (10, 3), (12, 25), (12, 26)],
        easter: &[GOOD_FRIDAY, EASTER_MONDAY, ASCENSION, WHIT_MONDAY],
    },
    // FR
    Rules {
        fixed: &[(1, 1), (5, 1), (5, 8), (7, 14), (8, 15), (11, 1), (11, 11), (12, 25)],
        easter: &[EASTER_MONDAY, ASCENSION, WHIT_MONDAY],
    },
    // CN (Gregorian fixed dates only)
    Rules { fixed: &[(1, 1), (5, 1), (10, 1), (10, 2), (10, 3)], easter: &[] },
    // JP
    Rules { fixed: &[(1, 1), (2, 11), (4, 29), (5, 3), (5, 4), (5, 5), (11, 3), (11, 23)], easter: &[] },
    // IN
    Rules { fixed: &[(1, 26), (8, 15), (10, 2)], easter: &[] },
    // BR
    Rules {
        fixed: &[(1, 1), (4, 21), (5, 1), (9, 7), (10, 12), (11, 2), (11, 15), (12, 25)],
        easter: &[GOOD_FRIDAY],
    },
];

pub fn holiday_flags(date: CivilDate) -> [bool; HOLIDAY_REGIONS.len()] {
    let md = (date.month(), date.day());
    let offset = date.days_since_epoch() - easter_sunday(date.year()).days_since_epoch();
    let mut flags = [false; HOLIDAY_REGIONS.len()];
    for (flag, rules) in flags.iter_mut().zip(&RULES) {
        *flag = rules.fixed.contains(&md) || rules.easter.contains(&offset);
    }
    flags
}
