//! Attach regional incidence to persons by event date, drawing reference
//! dates for everyone without the outcome.

use chrono::NaiveDate;
use claimrisk::cohort::{impute_reference_incidence, Cohort, IncidenceSeries, Outcome, PersonRecord};

fn main() -> claimrisk::Result<()> {
    let mut series = IncidenceSeries::default();
    let start = NaiveDate::from_ymd_opt(2020, 3, 1).unwrap();
    for day in 0..30 {
        let date = start + chrono::Days::new(day);
        series.insert("north", date, 20.0 + 3.0 * day as f64);
        series.insert("south", date, 80.0 - 2.0 * day as f64);
    }

    let mut records = Vec::new();
    for i in 0..8 {
        let mut r = PersonRecord::new(format!("p{i}"));
        r.region = Some(if i % 2 == 0 { "north" } else { "south" }.to_string());
        if i < 3 {
            r.y1 = true;
            r.y2 = true;
            r.event_date = Some(start + chrono::Days::new(5 * i as u64 + 2));
        }
        records.push(r);
    }
    let cohort = Cohort::new(records)?;

    let imputed = impute_reference_incidence(&cohort, &series, Outcome::Y2, 42)?;
    for r in imputed.records() {
        let date = r.event_date.or(r.reference_date).unwrap();
        println!(
            "{:<3} {:<5} y2={} date={date} incidence={:.1}",
            r.id,
            r.region.as_deref().unwrap_or("-"),
            r.y2 as u8,
            r.incidence.unwrap_or(f64::NAN)
        );
    }
    Ok(())
}
