//! File formats for run artefacts.
//!
//! Observations are CSV with the header
//! `time,pseudonym_id,x,y,speed,heading,length,eavesdropper_id`, written at
//! the precision the simulator already rounded to, so reading a file back
//! gives the same values bit for bit. Events are JSON lines; ground truth is
//! one JSON document.

use thiserror::Error;

use crate::model::{Point, VehicleLength};
use crate::sim::{Event, GroundTruth, Observation};

pub const OBSERVATION_HEADER: [&str; 8] = ["time", "pseudonym_id", "x", "y", "speed", "heading", "length", "eavesdropper_id"];

#[derive(Debug, Error)]
pub enum ExportError {
    #[error("observation file: {0}")]
    Csv(#[from] csv::Error),
    #[error("observation file line {line}: {msg}")]
    Field { line: u64, msg: String },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub fn write_observations(obs: &[Observation]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(OBSERVATION_HEADER).expect("in-memory write");
    for o in obs {
        w.write_record([
            format!("{:.1}", o.time),
            o.pseudonym.to_string(),
            format!("{:.3}", o.pos.x),
            format!("{:.3}", o.pos.y),
            format!("{:.3}", o.speed),
            format!("{:.6}", o.heading),
            format!("{:.1}", o.length.meters()),
            o.eavesdropper.to_string(),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory write")).expect("utf-8")
}

pub fn read_observations(text: &str) -> Result<Vec<Observation>, ExportError> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header: Vec<String> = r.headers()?.iter().map(str::to_owned).collect();
    if header != OBSERVATION_HEADER {
        return Err(ExportError::Field {
            line: 1,
            msg: format!("expected header {}", OBSERVATION_HEADER.join(",")),
        });
    }
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let bad = |msg: String| ExportError::Field { line, msg };
        let num = |i: usize| -> Result<f64, ExportError> {
            rec[i].parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| bad(format!("bad {} `{}`", OBSERVATION_HEADER[i], &rec[i])))
        };
        out.push(Observation {
            time: num(0)?,
            pseudonym: rec[1].parse().map_err(|_| bad(format!("bad pseudonym_id `{}`", &rec[1])))?,
            pos: Point::new(num(2)?, num(3)?),
            speed: num(4)?,
            heading: num(5)?,
            length: VehicleLength::from_meters(num(6)?).map_err(|e| bad(e.to_string()))?,
            eavesdropper: rec[7].parse().map_err(|_| bad(format!("bad eavesdropper_id `{}`", &rec[7])))?,
        });
    }
    Ok(out)
}

pub fn write_events(events: &[Event]) -> String {
    let mut s = String::new();
    for e in events {
        s.push_str(&serde_json::to_string(e).expect("event serializes"));
        s.push('\n');
    }
    s
}

pub fn read_events(text: &str) -> Result<Vec<Event>, ExportError> {
    text.lines().filter(|l| !l.trim().is_empty()).map(|l| Ok(serde_json::from_str(l)?)).collect()
}

pub fn write_truth(truth: &GroundTruth) -> String {
    serde_json::to_string_pretty(truth).expect("truth serializes")
}

pub fn read_truth(text: &str) -> Result<GroundTruth, ExportError> {
    Ok(serde_json::from_str(text)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::CredentialId;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn observations_round_trip_exactly(
            t in 0u32..100_000, x in -1e6f64..1e6, y in -1e6f64..1e6,
            speed in 0.0f64..60.0, heading in -3.2f64..3.2, id in any::<u128>(), e in 0u32..10,
        ) {
            let o = Observation {
                time: t as f64 / 10.0,
                pseudonym: CredentialId::from_u128(id),
                pos: Point::new(x, y),
                speed,
                heading,
                length: VehicleLength::from_meters(4.5).unwrap(),
                eavesdropper: e,
            }
            .quantized();
            let back = read_observations(&write_observations(&[o])).unwrap();
            prop_assert_eq!(back, vec![o]);
        }
    }

    #[test]
    fn rejects_wrong_header_and_fields() {
        assert!(read_observations("a,b\n").is_err());
        let good = write_observations(&[Observation {
            time: 1.0,
            pseudonym: CredentialId([1; 16]),
            pos: Point::new(1.0, 2.0),
            speed: 3.0,
            heading: 0.5,
            length: VehicleLength::from_meters(4.5).unwrap(),
            eavesdropper: 0,
        }]);
        assert_eq!(read_observations(&good).unwrap().len(), 1);
        let broken = good.replace("0.500000", "east");
        assert!(matches!(read_observations(&broken), Err(ExportError::Field { line: 2, .. })));
    }
}
