use chrono::{DateTime, Datelike, NaiveDate, Timelike};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Acquisition time, kept both as epoch seconds and as the calendar
/// components the temporal encoding consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "i64", into = "i64")]
pub struct Timestamp {
    epoch_seconds: i64,
    year: i32,
    day_of_year: u16,
    minute_of_day: u16,
}

impl Timestamp {
    pub fn from_epoch(epoch_seconds: i64) -> Result<Self> {
        let dt = DateTime::from_timestamp(epoch_seconds, 0)
            .ok_or_else(|| Error::invalid(format!("epoch {epoch_seconds} out of range")))?;
        Ok(Timestamp {
            epoch_seconds,
            year: dt.year(),
            day_of_year: dt.ordinal() as u16,
            minute_of_day: (dt.hour() * 60 + dt.minute()) as u16,
        })
    }

    pub fn from_calendar(year: i32, day_of_year: u32, minute_of_day: u32, second: u32) -> Result<Self> {
        if minute_of_day >= 1440 || second >= 60 {
            return Err(Error::invalid(format!("time of day {minute_of_day}m{second}s out of range")));
        }
        let date = NaiveDate::from_yo_opt(year, day_of_year)
            .ok_or_else(|| Error::invalid(format!("no day {day_of_year} in year {year}")))?;
        let dt = date
            .and_hms_opt(minute_of_day / 60, minute_of_day % 60, second)
            .expect("validated time of day");
        Self::from_epoch(dt.and_utc().timestamp())
    }

    /// Convenience constructor from a civil UTC date and time.
    pub fn from_ymd_hms(year: i32, month: u32, day: u32, hour: u32, minute: u32, second: u32) -> Result<Self> {
        let dt = NaiveDate::from_ymd_opt(year, month, day)
            .and_then(|d| d.and_hms_opt(hour, minute, second))
            .ok_or_else(|| Error::invalid(format!("invalid date {year}-{month}-{day} {hour}:{minute}:{second}")))?;
        Self::from_epoch(dt.and_utc().timestamp())
    }

    pub fn epoch_seconds(&self) -> i64 {
        self.epoch_seconds
    }

    pub fn year(&self) -> i32 {
        self.year
    }

    pub fn day_of_year(&self) -> u32 {
        self.day_of_year as u32
    }

    pub fn minute_of_day(&self) -> u32 {
        self.minute_of_day as u32
    }

    pub fn second_of_minute(&self) -> u32 {
        self.epoch_seconds.rem_euclid(60) as u32
    }

    pub fn month(&self) -> u32 {
        DateTime::from_timestamp(self.epoch_seconds, 0)
            .expect("validated at construction")
            .month()
    }

    /// Clock-hour bucket, `floor(epoch / 3600)`.
    pub fn hour_bucket(&self) -> i64 {
        self.epoch_seconds.div_euclid(3600)
    }

    pub fn same_hour(&self, other: &Timestamp) -> bool {
        self.hour_bucket() == other.hour_bucket()
    }

    pub fn offset(&self, seconds: i64) -> Result<Self> {
        Self::from_epoch(self.epoch_seconds + seconds)
    }
}

impl TryFrom<i64> for Timestamp {
    type Error = Error;
    fn try_from(v: i64) -> Result<Self> {
        Self::from_epoch(v)
    }
}

impl From<Timestamp> for i64 {
    fn from(t: Timestamp) -> i64 {
        t.epoch_seconds
    }
}
