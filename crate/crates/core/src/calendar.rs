//! UTC calendar buckets for the energy timeframes.
//!
//! Hours and days are fixed-length; weeks start on Monday; months and years
//! follow the Gregorian calendar.

use chrono::{DateTime, Datelike, Duration, Months, NaiveDate, NaiveDateTime, TimeZone, Utc};
use serde::{Deserialize, Serialize};

use crate::model::TimeWindow;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Timeframe {
    Hourly,
    Daily,
    Weekly,
    Monthly,
    Yearly,
}

impl Timeframe {
    pub const ALL: [Timeframe; 5] = [
        Timeframe::Hourly,
        Timeframe::Daily,
        Timeframe::Weekly,
        Timeframe::Monthly,
        Timeframe::Yearly,
    ];

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "Hourly" | "hourly" => Some(Timeframe::Hourly),
            "Daily" | "daily" => Some(Timeframe::Daily),
            "Weekly" | "weekly" => Some(Timeframe::Weekly),
            "Monthly" | "monthly" => Some(Timeframe::Monthly),
            "Yearly" | "yearly" => Some(Timeframe::Yearly),
            _ => None,
        }
    }
}

fn to_datetime(ms: i64) -> NaiveDateTime {
    DateTime::from_timestamp_millis(ms)
        .unwrap_or(DateTime::<Utc>::MIN_UTC)
        .naive_utc()
}

fn to_ms(date: NaiveDate) -> i64 {
    Utc.from_utc_datetime(&date.and_hms_opt(0, 0, 0).unwrap_or_default())
        .timestamp_millis()
}

/// Start of the bucket containing `ms`.
pub fn bucket_start(ms: i64, timeframe: Timeframe) -> i64 {
    match timeframe {
        Timeframe::Hourly => ms.div_euclid(crate::HOUR_MS) * crate::HOUR_MS,
        Timeframe::Daily => ms.div_euclid(crate::DAY_MS) * crate::DAY_MS,
        Timeframe::Weekly => {
            let date = to_datetime(ms).date();
            let back = i64::from(date.weekday().num_days_from_monday());
            to_ms(date - Duration::days(back))
        }
        Timeframe::Monthly => {
            let date = to_datetime(ms).date();
            to_ms(date.with_day(1).unwrap_or(date))
        }
        Timeframe::Yearly => {
            let date = to_datetime(ms).date();
            to_ms(NaiveDate::from_ymd_opt(date.year(), 1, 1).unwrap_or(date))
        }
    }
}

/// Bucket `[start, end)` containing `ms`.
pub fn bucket(ms: i64, timeframe: Timeframe) -> TimeWindow {
    let start = bucket_start(ms, timeframe);
    let end = match timeframe {
        Timeframe::Hourly => start + crate::HOUR_MS,
        Timeframe::Daily => start + crate::DAY_MS,
        Timeframe::Weekly => start + 7 * crate::DAY_MS,
        Timeframe::Monthly | Timeframe::Yearly => {
            let months = if timeframe == Timeframe::Monthly { 1 } else { 12 };
            let date = to_datetime(start).date();
            to_ms(date.checked_add_months(Months::new(months)).unwrap_or(date))
        }
    };
    TimeWindow::new(start, end)
}

/// Days since the Unix epoch of the UTC date containing `ms`.
pub fn day_index(ms: i64) -> i64 {
    ms.div_euclid(crate::DAY_MS)
}

#[cfg(test)]
mod tests {
    use super::*;

    // 2024-01-01T00:00:00Z, a Monday
    const JAN1: i64 = 1_704_067_200_000;

    #[test]
    fn hourly_and_daily() {
        let t = JAN1 + 5 * crate::HOUR_MS + 1234;
        assert_eq!(bucket_start(t, Timeframe::Hourly), JAN1 + 5 * crate::HOUR_MS);
        assert_eq!(bucket(t, Timeframe::Daily), TimeWindow::new(JAN1, JAN1 + crate::DAY_MS));
    }

    #[test]
    fn weeks_start_on_monday() {
        // Sunday 2024-01-07 23:00 belongs to the week of Monday Jan 1
        let sunday = JAN1 + 6 * crate::DAY_MS + 23 * crate::HOUR_MS;
        assert_eq!(bucket_start(sunday, Timeframe::Weekly), JAN1);
        let monday = JAN1 + 7 * crate::DAY_MS;
        assert_eq!(bucket_start(monday, Timeframe::Weekly), monday);
        // Wednesday 2024-02-28 → Monday 2024-02-26
        let wed = 1_709_078_400_000;
        assert_eq!(bucket_start(wed, Timeframe::Weekly), 1_708_905_600_000);
    }

    #[test]
    fn months_and_years_follow_the_calendar() {
        // 2024-02-29T12:00Z (leap day)
        let leap = 1_709_208_000_000;
        let month = bucket(leap, Timeframe::Monthly);
        assert_eq!(month.start, 1_706_745_600_000); // 2024-02-01
        assert_eq!(month.end, 1_709_251_200_000); // 2024-03-01
        let year = bucket(leap, Timeframe::Yearly);
        assert_eq!(year, TimeWindow::new(JAN1, 1_735_689_600_000));
    }

    #[test]
    fn pre_epoch_timestamps_floor_correctly() {
        assert_eq!(bucket_start(-1, Timeframe::Hourly), -crate::HOUR_MS);
        assert_eq!(day_index(-1), -1);
    }
}
