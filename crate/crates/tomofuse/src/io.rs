//! File formats: the `TFR1` raster container and the plain-text phantom list.
//!
//! A `TFR1` file is the magic string `TFR1\n`, one ASCII header line
//! `kind=<image|sinogram> rows=<r> cols=<c> pixel_size=<f> extra=<k=v,...>`,
//! then `rows x cols` little-endian 64-bit floats in row-major order. For
//! sinograms the rows are views, the columns are bins, `pixel_size` is the
//! bin spacing, and `extra` carries `blank_count` (and `content=counts` for
//! photon-count data).
//!
//! A phantom file lists one ellipse per line as `cx cy a b angle_deg value`,
//! with an optional `background <v>` line; `#` starts a comment.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Result, TomoError};
use crate::image::Image;
use crate::scan::{CountsData, Ellipse, Phantom, ScanGeometry, Sinogram};

const MAGIC: &[u8] = b"TFR1\n";

/// Parsed header of a raster file.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterHeader {
    pub kind: String,
    pub rows: usize,
    pub cols: usize,
    pub pixel_size: f64,
    pub extra: Vec<(String, String)>,
}

impl RasterHeader {
    pub fn extra_value(&self, key: &str) -> Option<&str> {
        self.extra
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }
}

fn format_header(h: &RasterHeader) -> String {
    let extra = h
        .extra
        .iter()
        .map(|(k, v)| format!("{k}={v}"))
        .collect::<Vec<_>>()
        .join(",");
    format!(
        "kind={} rows={} cols={} pixel_size={} extra={}\n",
        h.kind, h.rows, h.cols, h.pixel_size, extra
    )
}

fn parse_header(line: &str) -> Result<RasterHeader> {
    let mut kind = None;
    let mut rows = None;
    let mut cols = None;
    let mut pixel_size = None;
    let mut extra = Vec::new();
    for field in line.trim_end().split(' ') {
        let (key, value) = field.split_once('=').ok_or_else(|| TomoError::Parse {
            line: 2,
            msg: format!("malformed header field `{field}`"),
        })?;
        match key {
            "kind" => kind = Some(value.to_string()),
            "rows" => rows = value.parse().ok(),
            "cols" => cols = value.parse().ok(),
            "pixel_size" => pixel_size = value.parse().ok(),
            "extra" => {
                for kv in value.split(',').filter(|s| !s.is_empty()) {
                    let (k, v) = kv.split_once('=').ok_or_else(|| TomoError::Parse {
                        line: 2,
                        msg: format!("malformed extra entry `{kv}`"),
                    })?;
                    extra.push((k.to_string(), v.to_string()));
                }
            }
            other => {
                return Err(TomoError::Parse {
                    line: 2,
                    msg: format!("unknown header key `{other}`"),
                })
            }
        }
    }
    match (kind, rows, cols, pixel_size) {
        (Some(kind), Some(rows), Some(cols), Some(pixel_size)) => Ok(RasterHeader {
            kind,
            rows,
            cols,
            pixel_size,
            extra,
        }),
        _ => Err(TomoError::Parse {
            line: 2,
            msg: "header must define kind, rows, cols, pixel_size".into(),
        }),
    }
}

/// Write a raw raster (header + payload).
pub fn write_raster(path: &Path, header: &RasterHeader, data: &[f64]) -> Result<()> {
    if data.len() != header.rows * header.cols {
        return Err(TomoError::Dimension(format!(
            "payload length {} != {}x{}",
            data.len(),
            header.rows,
            header.cols
        )));
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(format_header(header).as_bytes())?;
    for &v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Read a raw raster (header + payload).
pub fn read_raster(path: &Path) -> Result<(RasterHeader, Vec<f64>)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic).map_err(|_| TomoError::Parse {
        line: 1,
        msg: "file too short for TFR1 magic".into(),
    })?;
    if magic != MAGIC {
        return Err(TomoError::Parse {
            line: 1,
            msg: "missing TFR1 magic".into(),
        });
    }
    let mut header_line = String::new();
    r.read_line(&mut header_line)?;
    let header = parse_header(&header_line)?;
    let n = header.rows * header.cols;
    let mut payload = vec![0u8; n * 8];
    r.read_exact(&mut payload).map_err(|_| TomoError::Parse {
        line: 3,
        msg: format!("payload truncated, expected {n} float64 values"),
    })?;
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((header, data))
}

pub fn write_image(path: &Path, image: &Image) -> Result<()> {
    let header = RasterHeader {
        kind: "image".into(),
        rows: image.height(),
        cols: image.width(),
        pixel_size: image.pixel_size(),
        extra: Vec::new(),
    };
    write_raster(path, &header, image.data())
}

pub fn read_image(path: &Path) -> Result<Image> {
    let (h, data) = read_raster(path)?;
    if h.kind != "image" {
        return Err(TomoError::Parse {
            line: 2,
            msg: format!("expected kind=image, found kind={}", h.kind),
        });
    }
    Image::from_data(h.cols, h.rows, h.pixel_size, data)
}

fn sinogram_header(geom: &ScanGeometry, content: &str) -> RasterHeader {
    RasterHeader {
        kind: "sinogram".into(),
        rows: geom.num_views(),
        cols: geom.num_bins(),
        pixel_size: geom.bin_spacing(),
        extra: vec![
            ("blank_count".into(), format!("{}", geom.blank_count())),
            ("content".into(), content.into()),
        ],
    }
}

fn geometry_from_header(h: &RasterHeader) -> Result<ScanGeometry> {
    let blank = h
        .extra_value("blank_count")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| TomoError::Parse {
            line: 2,
            msg: "sinogram header lacks blank_count".into(),
        })?;
    ScanGeometry::new(h.rows, h.cols, h.pixel_size, blank)
}

pub fn write_sinogram(path: &Path, sino: &Sinogram) -> Result<()> {
    write_raster(path, &sinogram_header(sino.geometry(), "log"), sino.data())
}

pub fn read_sinogram(path: &Path) -> Result<Sinogram> {
    let (h, data) = read_raster(path)?;
    if h.kind != "sinogram" {
        return Err(TomoError::Parse {
            line: 2,
            msg: format!("expected kind=sinogram, found kind={}", h.kind),
        });
    }
    if h.extra_value("content") == Some("counts") {
        return Err(TomoError::Parse {
            line: 2,
            msg: "file holds photon counts, not log-domain data".into(),
        });
    }
    Sinogram::from_data(geometry_from_header(&h)?, data)
}

pub fn write_counts(path: &Path, counts: &CountsData) -> Result<()> {
    write_raster(
        path,
        &sinogram_header(counts.geometry(), "counts"),
        counts.counts(),
    )
}

pub fn read_counts(path: &Path) -> Result<CountsData> {
    let (h, data) = read_raster(path)?;
    if h.kind != "sinogram" || h.extra_value("content") != Some("counts") {
        return Err(TomoError::Parse {
            line: 2,
            msg: "expected a sinogram file with content=counts".into(),
        });
    }
    CountsData::from_data(geometry_from_header(&h)?, data)
}

/// Write a phantom description as plain text.
pub fn write_phantom(path: &Path, phantom: &Phantom) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "# cx cy a b angle_deg value")?;
    if phantom.background != 0.0 {
        writeln!(w, "background {}", phantom.background)?;
    }
    for e in &phantom.ellipses {
        writeln!(w, "{} {} {} {} {} {}", e.cx, e.cy, e.a, e.b, e.angle_deg, e.value)?;
    }
    w.flush()?;
    Ok(())
}

/// Parse a plain-text phantom description.
pub fn read_phantom(path: &Path) -> Result<Phantom> {
    let file = File::open(path)?;
    let mut phantom = Phantom::default();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        let line_no = idx + 1;
        let body = line.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let fields: Vec<&str> = body.split_whitespace().collect();
        if fields[0] == "background" {
            if fields.len() != 2 {
                return Err(TomoError::Parse {
                    line: line_no,
                    msg: "background line takes exactly one value".into(),
                });
            }
            phantom.background = fields[1].parse().map_err(|_| TomoError::Parse {
                line: line_no,
                msg: format!("bad background value `{}`", fields[1]),
            })?;
            continue;
        }
        if fields.len() != 6 {
            return Err(TomoError::Parse {
                line: line_no,
                msg: format!("expected 6 fields, found {}", fields.len()),
            });
        }
        let nums: Vec<f64> = fields
            .iter()
            .map(|f| {
                f.parse().map_err(|_| TomoError::Parse {
                    line: line_no,
                    msg: format!("bad number `{f}`"),
                })
            })
            .collect::<Result<_>>()?;
        if !(nums[2] > 0.0 && nums[3] > 0.0) {
            return Err(TomoError::Parse {
                line: line_no,
                msg: "semi-axes must be positive".into(),
            });
        }
        phantom.ellipses.push(Ellipse {
            cx: nums[0],
            cy: nums[1],
            a: nums[2],
            b: nums[3],
            angle_deg: nums[4],
            value: nums[5],
        });
    }
    Ok(phantom)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    #[test]
    fn image_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.tfr");
        let mut r = rng::seeded(4);
        let data: Vec<f64> = (0..12).map(|_| r.gen::<f64>() * 1e3 - 500.0).collect();
        let img = Image::from_data(4, 3, 0.7, data).unwrap();
        write_image(&path, &img).unwrap();
        let back = read_image(&path).unwrap();
        assert_eq!(img, back);
    }

    #[test]
    fn counts_round_trip_keeps_geometry() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("counts.tfr");
        let geom = ScanGeometry::new(3, 5, 1.25, 2e5).unwrap();
        let counts = CountsData::from_data(geom, vec![7.0; 15]).unwrap();
        write_counts(&path, &counts).unwrap();
        let back = read_counts(&path).unwrap();
        assert_eq!(back.geometry(), &geom);
        assert_eq!(back.counts(), counts.counts());
        // a counts file is not a log-domain sinogram
        assert!(read_sinogram(&path).is_err());
    }

    #[test]
    fn truncated_file_is_a_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.tfr");
        let img = Image::zeros(4, 4, 1.0);
        write_image(&path, &img).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 9]).unwrap();
        match read_image(&path) {
            Err(TomoError::Parse { .. }) => {}
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn phantom_text_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.txt");
        let phantom = Phantom::random_tissue(3, 100.0);
        write_phantom(&path, &phantom).unwrap();
        let back = read_phantom(&path).unwrap();
        assert_eq!(phantom, back);
    }

    #[test]
    fn phantom_bad_line_reports_location() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.txt");
        std::fs::write(&path, "# header\n0 0 10 10 0\n").unwrap();
        match read_phantom(&path) {
            Err(TomoError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }
}
