//! Vocabulary text file: one `name v1 .. vd` line per category.

use std::fmt::Write as _;

use anyhow::{bail, Context, Result};
use routefuse_core::condition::WeatherVocabulary;
use routefuse_core::weather::{Weather, NUM_WEATHER};

pub fn to_text(v: &WeatherVocabulary) -> String {
    let mut s = String::new();
    for w in Weather::ALL {
        s.push_str(w.name());
        for x in v.row(w.index()) {
            let _ = write!(s, " {x}");
        }
        s.push('\n');
    }
    s
}

pub fn parse(text: &str) -> Result<WeatherVocabulary> {
    let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
    if lines.len() != NUM_WEATHER {
        bail!("vocabulary needs {NUM_WEATHER} lines, found {}", lines.len());
    }
    let mut rows = Vec::with_capacity(NUM_WEATHER);
    for (i, (line, w)) in lines.iter().zip(Weather::ALL).enumerate() {
        let mut parts = line.split_whitespace();
        let name = parts.next().unwrap_or("");
        if name != w.name() {
            bail!("vocabulary line {}: expected `{}`, found `{name}`", i + 1, w.name());
        }
        let row = parts
            .enumerate()
            .map(|(j, p)| p.parse::<f64>().with_context(|| format!("vocabulary line {}: value {} `{p}`", i + 1, j + 1)))
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    Ok(WeatherVocabulary::from_rows(&rows)?)
}
