//! One-row-per-sample CSV interchange format.
//!
//! Header: `sensor_0..sensor_{S-1}, image_0..image_{I-1}, label, split, site_id`.
//! Image cells are either all filled or all empty (missing modality).

use std::io::{Read, Write};
use std::path::Path;

use super::{Dims, Sample, Split, SplitDataset, NUM_CLASSES};
use crate::error::{Error, Result};

pub fn load_csv(path: impl AsRef<Path>) -> Result<SplitDataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(file, &path.display().to_string())
}

/// Parses the CSV format from any reader; `origin` labels error messages.
pub fn read_csv<R: Read>(reader: R, origin: &str) -> Result<SplitDataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(reader);
    let header = rdr.headers()?.clone();
    let names: Vec<&str> = header.iter().collect();
    let dims = parse_header(&names, origin)?;
    let width = dims.sensor + dims.image + 3;

    let mut data = SplitDataset { dims, train: Vec::new(), val: Vec::new(), test: Vec::new() };
    for (i, record) in rdr.records().enumerate() {
        // Row numbers are 1-based data rows (header excluded).
        let row = i + 1;
        let record = record?;
        let err = |field: &str, message: String| Error::Parse {
            path: origin.to_string(),
            row,
            field: field.to_string(),
            message,
        };
        if record.len() != width {
            return Err(err("*", format!("expected {width} cells, found {}", record.len())));
        }
        let mut sensor = Vec::with_capacity(dims.sensor);
        for j in 0..dims.sensor {
            let cell = record[j].trim();
            let field = format!("sensor_{j}");
            if cell.is_empty() {
                return Err(err(&field, "empty sensor value".into()));
            }
            sensor.push(parse_finite(cell).map_err(|m| err(&field, m))?);
        }
        let image_cells: Vec<&str> = (0..dims.image).map(|j| record[dims.sensor + j].trim()).collect();
        let image = if image_cells.iter().all(|c| c.is_empty()) {
            None
        } else {
            let mut image = Vec::with_capacity(dims.image);
            for (j, cell) in image_cells.iter().enumerate() {
                let field = format!("image_{j}");
                if cell.is_empty() {
                    return Err(err(&field, "partially missing image features".into()));
                }
                image.push(parse_finite(cell).map_err(|m| err(&field, m))?);
            }
            Some(image)
        };
        let base = dims.sensor + dims.image;
        let label: usize = record[base]
            .trim()
            .parse()
            .map_err(|_| err("label", format!("`{}` is not a class id", &record[base])))?;
        if label >= dims.classes {
            return Err(err("label", format!("label {label} out of range 0..{}", dims.classes)));
        }
        let tag = record[base + 1].trim();
        let split = Split::from_tag(tag)
            .ok_or_else(|| err("split", format!("unknown split tag `{tag}`")))?;
        let sample = Sample { sensor, image, label, site_id: record[base + 2].to_string() };
        match split {
            Split::Train => data.train.push(sample),
            Split::Val => data.val.push(sample),
            Split::Test => data.test.push(sample),
        }
    }
    Ok(data)
}

fn parse_finite(cell: &str) -> std::result::Result<f64, String> {
    let v: f64 = cell.parse().map_err(|_| format!("`{cell}` is not a number"))?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(format!("non-finite value `{cell}`"))
    }
}

fn parse_header(names: &[&str], origin: &str) -> Result<Dims> {
    let bad = |message: String| Error::Parse {
        path: origin.to_string(),
        row: 0,
        field: "header".into(),
        message,
    };
    let sensor = names.iter().take_while(|n| n.starts_with("sensor_")).count();
    let image = names[sensor..].iter().take_while(|n| n.starts_with("image_")).count();
    for (j, name) in names[..sensor].iter().enumerate() {
        if *name != format!("sensor_{j}") {
            return Err(bad(format!("expected `sensor_{j}`, found `{name}`")));
        }
    }
    for (j, name) in names[sensor..sensor + image].iter().enumerate() {
        if *name != format!("image_{j}") {
            return Err(bad(format!("expected `image_{j}`, found `{name}`")));
        }
    }
    if sensor == 0 {
        return Err(bad("no sensor_* columns".into()));
    }
    if names[sensor + image..] != ["label", "split", "site_id"] {
        return Err(bad(format!(
            "trailing columns must be `label,split,site_id`, found `{}`",
            names[sensor + image..].join(",")
        )));
    }
    Ok(Dims { sensor, image, classes: NUM_CLASSES })
}

pub fn save_csv(data: &SplitDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    write_csv(data, &mut w)?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_csv<W: Write>(data: &SplitDataset, writer: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().from_writer(writer);
    let dims = data.dims;
    let mut header: Vec<String> = (0..dims.sensor).map(|j| format!("sensor_{j}")).collect();
    header.extend((0..dims.image).map(|j| format!("image_{j}")));
    header.extend(["label", "split", "site_id"].map(String::from));
    w.write_record(&header)?;
    for split in Split::ALL {
        for s in data.split(split) {
            let mut rec: Vec<String> = s.sensor.iter().map(|v| v.to_string()).collect();
            match &s.image {
                Some(img) => rec.extend(img.iter().map(|v| v.to_string())),
                None => rec.extend(std::iter::repeat_n(String::new(), dims.image)),
            }
            rec.push(s.label.to_string());
            rec.push(split.tag().to_string());
            rec.push(s.site_id.clone());
            w.write_record(&rec)?;
        }
    }
    w.flush().map_err(|e| Error::io("<csv writer>", e))?;
    Ok(())
}
