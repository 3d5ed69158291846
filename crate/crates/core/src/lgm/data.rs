//! Station observations: a station × year table with missing entries.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Station {
    pub id: String,
    pub location: [f64; 2],
    /// Elevation in km.
    pub elevation: f64,
}

/// One observed value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub station: usize,
    pub year: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationSet {
    pub stations: Vec<Station>,
    pub years: Vec<String>,
    /// Observed entries, sorted by (year, station).
    pub observations: Vec<Observation>,
}

impl ObservationSet {
    pub fn new(stations: Vec<Station>, years: Vec<String>, mut observations: Vec<Observation>) -> Result<Self> {
        for st in &stations {
            if !(st.location[0].is_finite() && st.location[1].is_finite() && st.elevation.is_finite()) {
                return Err(Error::InvalidInput(format!(
                    "station {} has non-finite coordinates",
                    st.id
                )));
            }
        }
        let mut seen = std::collections::HashSet::new();
        for o in &observations {
            if o.station >= stations.len() || o.year >= years.len() {
                return Err(Error::InvalidInput(format!(
                    "observation refers to station {} / year {} outside the table",
                    o.station, o.year
                )));
            }
            if !o.value.is_finite() {
                return Err(Error::InvalidInput(format!(
                    "non-finite value at station {} year {}",
                    stations[o.station].id, years[o.year]
                )));
            }
            if !seen.insert((o.station, o.year)) {
                return Err(Error::InvalidInput(format!(
                    "duplicate value for station {} year {}",
                    stations[o.station].id, years[o.year]
                )));
            }
        }
        observations.sort_by_key(|o| (o.year, o.station));
        Ok(Self {
            stations,
            years,
            observations,
        })
    }

    pub fn year_count(&self) -> usize {
        self.years.len()
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn counts_per_year(&self) -> Vec<usize> {
        let mut n = vec![0; self.years.len()];
        for o in &self.observations {
            n[o.year] += 1;
        }
        n
    }

    /// Errors if some year has no observation.
    pub fn require_all_years(&self) -> Result<()> {
        if let Some(j) = self.counts_per_year().iter().position(|&c| c == 0) {
            return Err(Error::InvalidInput(format!(
                "year {} has no observations",
                self.years[j]
            )));
        }
        Ok(())
    }

    pub fn station_observations(&self, station: usize) -> Vec<Observation> {
        self.observations
            .iter()
            .filter(|o| o.station == station)
            .copied()
            .collect()
    }

    /// The same table with all values of one station removed (the station
    /// stays in the list so indices are stable).
    pub fn without_station(&self, station: usize) -> Self {
        Self {
            stations: self.stations.clone(),
            years: self.years.clone(),
            observations: self
                .observations
                .iter()
                .filter(|o| o.station != station)
                .copied()
                .collect(),
        }
    }

    /// Reads `station_id,x_km,y_km,elevation_km,year,value_m`. Stations keep
    /// their first-appearance order; years are sorted (numerically when all
    /// labels are integers).
    pub fn read_csv(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::from_reader(file)
    }

    pub fn from_reader<R: std::io::Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .has_headers(true)
            .from_reader(reader);
        let expected = ["station_id", "x_km", "y_km", "elevation_km", "year", "value_m"];
        let headers = rdr.headers()?.clone();
        let names: Vec<&str> = headers.iter().map(|h| h.trim()).collect();
        if names != expected {
            return Err(Error::Parse {
                line: 1,
                message: format!("expected header {}, got {}", expected.join(","), names.join(",")),
            });
        }
        let mut stations: Vec<Station> = Vec::new();
        let mut station_idx: HashMap<String, usize> = HashMap::new();
        let mut raw: Vec<(usize, String, f64, usize)> = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
            if rec.len() != 6 {
                return Err(Error::Parse {
                    line,
                    message: format!("expected 6 fields, got {}", rec.len()),
                });
            }
            let field = |k: usize| rec.get(k).unwrap_or("").trim();
            let num = |k: usize| -> Result<f64> {
                let v: f64 = field(k).parse().map_err(|_| Error::Parse {
                    line,
                    message: format!("{} is not a number: {:?}", expected[k], field(k)),
                })?;
                if !v.is_finite() {
                    return Err(Error::Parse {
                        line,
                        message: format!("{} is not finite", expected[k]),
                    });
                }
                Ok(v)
            };
            let id = field(0).to_string();
            if id.is_empty() {
                return Err(Error::Parse {
                    line,
                    message: "empty station_id".into(),
                });
            }
            let (x, y, h, v) = (num(1)?, num(2)?, num(3)?, num(5)?);
            let year = field(4).to_string();
            if year.is_empty() {
                return Err(Error::Parse {
                    line,
                    message: "empty year".into(),
                });
            }
            let s = match station_idx.get(&id) {
                Some(&s) => {
                    let st = &stations[s];
                    if st.location != [x, y] || st.elevation != h {
                        return Err(Error::Parse {
                            line,
                            message: format!("station {id} appears with different coordinates or elevation"),
                        });
                    }
                    s
                }
                None => {
                    stations.push(Station {
                        id: id.clone(),
                        location: [x, y],
                        elevation: h,
                    });
                    station_idx.insert(id, stations.len() - 1);
                    stations.len() - 1
                }
            };
            raw.push((s, year, v, line));
        }
        let mut years: Vec<String> = raw.iter().map(|r| r.1.clone()).collect();
        years.sort();
        years.dedup();
        if years.iter().all(|y| y.parse::<i64>().is_ok()) {
            years.sort_by_key(|y| y.parse::<i64>().unwrap());
        }
        let year_idx: HashMap<&str, usize> = years.iter().enumerate().map(|(i, y)| (y.as_str(), i)).collect();
        let mut seen = HashMap::new();
        let mut observations = Vec::with_capacity(raw.len());
        for (s, year, value, line) in &raw {
            let j = year_idx[year.as_str()];
            if let Some(first) = seen.insert((*s, j), *line) {
                return Err(Error::Parse {
                    line: *line,
                    message: format!(
                        "duplicate value for station {} year {year} (first on line {first})",
                        stations[*s].id
                    ),
                });
            }
            observations.push(Observation {
                station: *s,
                year: j,
                value: *value,
            });
        }
        Self::new(stations, years, observations)
    }

    /// Writes the observation CSV (rows in (year, station) order), preceded
    /// by optional `#` comment lines.
    pub fn write_csv<W: Write>(&self, mut out: W, comments: &[String]) -> Result<()> {
        for c in comments {
            writeln!(out, "# {c}")?;
        }
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["station_id", "x_km", "y_km", "elevation_km", "year", "value_m"])?;
        for o in &self.observations {
            let st = &self.stations[o.station];
            w.write_record([
                st.id.clone(),
                format!("{}", st.location[0]),
                format!("{}", st.location[1]),
                format!("{}", st.elevation),
                self.years[o.year].clone(),
                format!("{}", o.value),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const CSV: &str = "station_id,x_km,y_km,elevation_km,year,value_m\n\
                       a,1,2,0.1,2009,1.5\n\
                       b,3,4,0.2,2008,2.5\n\
                       a,1,2,0.1,2008,1.0\n";

    #[test]
    fn reads_table() {
        let obs = ObservationSet::from_reader(CSV.as_bytes()).unwrap();
        assert_eq!(obs.years, vec!["2008", "2009"]);
        assert_eq!(obs.stations.len(), 2);
        assert_eq!(obs.stations[0].id, "a");
        assert_eq!(obs.len(), 3);
        assert_eq!(obs.counts_per_year(), vec![2, 1]);
        assert_eq!(
            obs.observations[0],
            Observation {
                station: 0,
                year: 0,
                value: 1.0
            }
        );
        obs.require_all_years().unwrap();
    }

    #[test]
    fn round_trip() {
        let obs = ObservationSet::from_reader(CSV.as_bytes()).unwrap();
        let mut buf = Vec::new();
        obs.write_csv(&mut buf, &["manifest {}".into()]).unwrap();
        let back = ObservationSet::from_reader(buf.as_slice()).unwrap();
        assert_eq!(back.observations, obs.observations);
        assert_eq!(back.stations.len(), 2);
    }

    #[test]
    fn line_numbered_errors() {
        let bad = "station_id,x_km,y_km,elevation_km,year,value_m\na,1,2,0.1,2009,1.5\nb,3,x,0.2,2008,2.5\n";
        match ObservationSet::from_reader(bad.as_bytes()) {
            Err(Error::Parse { line, message }) => {
                assert_eq!(line, 3);
                assert!(message.contains("y_km"), "{message}");
            }
            other => panic!("unexpected {other:?}"),
        }
        let dup = "station_id,x_km,y_km,elevation_km,year,value_m\na,1,2,0.1,2009,1.5\na,1,2,0.1,2009,1.6\n";
        assert!(matches!(
            ObservationSet::from_reader(dup.as_bytes()),
            Err(Error::Parse { line: 3, .. })
        ));
        let moved = "station_id,x_km,y_km,elevation_km,year,value_m\na,1,2,0.1,2009,1.5\na,1,3,0.1,2008,1.6\n";
        assert!(matches!(
            ObservationSet::from_reader(moved.as_bytes()),
            Err(Error::Parse { line: 3, .. })
        ));
        let nan = "station_id,x_km,y_km,elevation_km,year,value_m\na,1,2,0.1,2009,NaN\n";
        assert!(matches!(
            ObservationSet::from_reader(nan.as_bytes()),
            Err(Error::Parse { line: 2, .. })
        ));
        let header = "id,x,y,h,year,value\n";
        assert!(matches!(
            ObservationSet::from_reader(header.as_bytes()),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn holding_out_a_station() {
        let obs = ObservationSet::from_reader(CSV.as_bytes()).unwrap();
        let held = obs.without_station(0);
        assert_eq!(held.len(), 1);
        assert_eq!(obs.station_observations(0).len(), 2);
        assert!(held.require_all_years().is_err());
    }
}
