//! JSON-lines scene files. The first line is metadata; each further line
//! holds one scene with keys `lidar`, `radar`, `image`, `prompt`,
//! `weather` and `boxes`. Floats are written as shortest round-trip
//! decimals, so reading a written file reproduces every bit.

use std::io::{BufRead, Write};

use anyhow::{anyhow, bail, Context, Result};
use routefuse_core::autodiff::Tensor;
use routefuse_core::geometry::Box3D;
use routefuse_core::sim::SceneSample;
use routefuse_core::weather::Weather;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

pub const FORMAT: &str = "routefuse-scenes";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Metadata {
    pub format: String,
    pub split: String,
    pub seed: u64,
    pub config_hash: String,
    pub count: usize,
}

fn check_finite(name: &str, v: &[f64]) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        bail!("scene field `{name}` holds a non-finite value")
    }
}

fn scene_json(s: &SceneSample) -> Result<Value> {
    check_finite("lidar", s.lidar.as_flattened())?;
    check_finite("radar", s.radar.as_flattened())?;
    check_finite("image", s.image.data())?;
    check_finite("prompt", &s.prompt)?;
    let boxes: Vec<[f64; 7]> = s.boxes.iter().map(|b| [b.x, b.y, b.z, b.w, b.l, b.h, b.theta]).collect();
    check_finite("boxes", boxes.as_flattened())?;
    Ok(json!({
        "lidar": s.lidar,
        "radar": s.radar,
        "image": { "shape": s.image.shape(), "data": s.image.data() },
        "prompt": s.prompt,
        "weather": s.weather.index(),
        "boxes": boxes,
    }))
}

pub fn write<W: Write>(mut w: W, meta: &Metadata, scenes: &[SceneSample]) -> Result<()> {
    if meta.count != scenes.len() {
        bail!("metadata count {} does not match {} scenes", meta.count, scenes.len());
    }
    serde_json::to_writer(&mut w, meta)?;
    w.write_all(b"\n")?;
    for s in scenes {
        serde_json::to_writer(&mut w, &scene_json(s)?)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn number(v: &Value) -> Option<f64> {
    v.as_f64()
}

fn numbers(v: &Value) -> Option<Vec<f64>> {
    v.as_array()?.iter().map(number).collect()
}

fn rows<const N: usize>(v: &Value) -> Option<Vec<[f64; N]>> {
    v.as_array()?.iter().map(|r| numbers(r)?.try_into().ok()).collect()
}

fn parse_scene(line: &str) -> std::result::Result<SceneSample, String> {
    let v: Value = serde_json::from_str(line).map_err(|e| format!("malformed JSON ({e})"))?;
    let obj = v.as_object().ok_or("expected a JSON object")?;
    for key in obj.keys() {
        if !["lidar", "radar", "image", "prompt", "weather", "boxes"].contains(&key.as_str()) {
            return Err(format!("unexpected field `{key}`"));
        }
    }
    let field = |name: &str| obj.get(name).ok_or_else(|| format!("missing field `{name}`"));
    let lidar = rows::<4>(field("lidar")?).ok_or("field `lidar`: expected a list of [x, y, z, intensity]")?;
    let radar = rows::<4>(field("radar")?).ok_or("field `radar`: expected a list of [x, y, z, doppler]")?;
    let image = field("image")?;
    let shape: Vec<usize> = image
        .get("shape")
        .and_then(Value::as_array)
        .and_then(|a| a.iter().map(|d| d.as_u64().map(|d| d as usize)).collect())
        .ok_or("field `image`: expected integer `shape`")?;
    let data = image.get("data").and_then(numbers).ok_or("field `image`: expected numeric `data`")?;
    let image = Tensor::new(shape, data).map_err(|e| format!("field `image`: {e}"))?;
    let prompt = numbers(field("prompt")?).ok_or("field `prompt`: expected a list of numbers")?;
    let weather = field("weather")?
        .as_u64()
        .and_then(|i| Weather::from_index(i as usize))
        .ok_or("field `weather`: expected a category index 0..7")?;
    let boxes = rows::<7>(field("boxes")?)
        .ok_or("field `boxes`: expected a list of [x, y, z, w, l, h, theta]")?
        .into_iter()
        .map(|[x, y, z, w, l, h, t]| Box3D::new(x, y, z, w, l, h, t))
        .collect();
    Ok(SceneSample { lidar, radar, image, prompt, weather, boxes })
}

pub fn read<R: BufRead>(r: R) -> Result<(Metadata, Vec<SceneSample>)> {
    let mut lines = r.lines();
    let first = lines.next().ok_or_else(|| anyhow!("line 1: missing metadata"))??;
    let meta: Metadata = serde_json::from_str(&first).context("line 1: malformed metadata")?;
    if meta.format != FORMAT {
        bail!("line 1: field `format`: expected `{FORMAT}`, found `{}`", meta.format);
    }
    let mut scenes = Vec::with_capacity(meta.count);
    for (i, line) in lines.enumerate() {
        let line = line?;
        let no = i + 2;
        if line.trim().is_empty() {
            continue;
        }
        scenes.push(parse_scene(&line).map_err(|e| anyhow!("line {no}: {e}"))?);
    }
    if scenes.len() != meta.count {
        bail!("metadata announces {} scenes, file holds {}", meta.count, scenes.len());
    }
    Ok((meta, scenes))
}

pub fn write_file(path: &std::path::Path, meta: &Metadata, scenes: &[SceneSample]) -> Result<()> {
    let f = std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    write(std::io::BufWriter::new(f), meta, scenes).with_context(|| format!("writing {}", path.display()))
}

pub fn read_file(path: &std::path::Path) -> Result<(Metadata, Vec<SceneSample>)> {
    let f = std::fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    read(std::io::BufReader::new(f)).with_context(|| format!("in {}", path.display()))
}
