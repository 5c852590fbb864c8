//! Point cloud files.
//!
//! CSV: one row per point, `x,y,z[,f_1..f_C]`, no header.
//! Binary: little-endian `u32 N`, `u32 C`, then `N` rows of `3 + C` `f64` values.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::features::FeatureMap;
use crate::geometry::PointCloud;
use crate::scalar::Real;

pub fn write_csv<T: Real, W: Write>(cloud: &PointCloud<T>, out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    for (i, p) in cloud.coords().iter().enumerate() {
        let mut record: Vec<String> = p.iter().map(|v| v.to_string()).collect();
        if let Some(f) = cloud.features() {
            record.extend(f.row(i).iter().map(|v| v.to_string()));
        }
        w.write_record(&record).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<T: Real, R: Read>(input: R) -> Result<PointCloud<T>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(input);
    let mut coords = Vec::new();
    let mut feats: Vec<T> = Vec::new();
    let mut width = None;
    for record in reader.records() {
        let record = record.map_err(csv_err)?;
        let offset = record.position().map_or(0, |p| p.byte() as usize);
        if record.len() < 3 {
            return Err(Error::Parse {
                offset,
                message: format!("expected at least 3 columns, found {}", record.len()),
            });
        }
        if *width.get_or_insert(record.len()) != record.len() {
            return Err(Error::Parse {
                offset,
                message: "inconsistent column count".into(),
            });
        }
        let mut values = Vec::with_capacity(record.len());
        for field in record.iter() {
            let v: f64 = field.parse().map_err(|_| Error::Parse {
                offset,
                message: format!("invalid number `{field}`"),
            })?;
            values.push(T::lit(v));
        }
        coords.push([values[0], values[1], values[2]]);
        feats.extend_from_slice(&values[3..]);
    }
    let c = width.map_or(0, |w| w - 3);
    let n = coords.len();
    let mut cloud = PointCloud::new(coords)?;
    if c > 0 {
        cloud.set_features(FeatureMap::from_vec(n, c, feats)?)?;
    }
    Ok(cloud)
}

pub fn write_binary<T: Real, W: Write>(cloud: &PointCloud<T>, mut out: W) -> Result<()> {
    let n = u32::try_from(cloud.len()).map_err(|_| Error::size("too many points for a u32 header"))?;
    out.write_all(&n.to_le_bytes())?;
    out.write_all(&(cloud.c_in() as u32).to_le_bytes())?;
    for (i, p) in cloud.coords().iter().enumerate() {
        for v in p {
            out.write_all(&v.as_f64().to_le_bytes())?;
        }
        if let Some(f) = cloud.features() {
            for v in f.row(i) {
                out.write_all(&v.as_f64().to_le_bytes())?;
            }
        }
    }
    Ok(())
}

pub fn read_binary<T: Real, R: Read>(mut input: R) -> Result<PointCloud<T>> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    if bytes.len() < 8 {
        return Err(Error::Parse {
            offset: bytes.len(),
            message: "truncated header".into(),
        });
    }
    let n = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let c = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let expected = 8 + n * (3 + c) * 8;
    if bytes.len() != expected {
        return Err(Error::Parse {
            offset: bytes.len().min(expected),
            message: format!("expected {expected} bytes for N={n}, C={c}, found {}", bytes.len()),
        });
    }
    let values: Vec<T> = bytes[8..]
        .chunks_exact(8)
        .map(|b| T::lit(f64::from_le_bytes(b.try_into().unwrap())))
        .collect();
    let stride = 3 + c;
    let coords = values
        .chunks_exact(stride)
        .map(|r| [r[0], r[1], r[2]])
        .collect();
    let mut cloud = PointCloud::new(coords)?;
    if c > 0 {
        let feats = values.chunks_exact(stride).flat_map(|r| r[3..].iter().copied()).collect();
        cloud.set_features(FeatureMap::from_vec(n, c, feats)?)?;
    }
    Ok(cloud)
}

fn csv_err(e: csv::Error) -> Error {
    let offset = e.position().map_or(0, |p| p.byte() as usize);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Parse {
            offset,
            message: format!("{other:?}"),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> PointCloud<f64> {
        let coords = vec![[0.0, 1.0, 2.0], [-1.5, 0.25, 3.0]];
        let f = FeatureMap::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        PointCloud::with_features(coords, f).unwrap()
    }

    #[test]
    fn csv_roundtrip() {
        let mut buf = Vec::new();
        write_csv(&sample(), &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf.clone()).unwrap(), "0,1,2,1,2\n-1.5,0.25,3,3,4\n");
        assert_eq!(read_csv::<f64, _>(&buf[..]).unwrap(), sample());
    }

    #[test]
    fn binary_roundtrip_and_header() {
        let mut buf = Vec::new();
        write_binary(&sample(), &mut buf).unwrap();
        assert_eq!(&buf[..8], &[2, 0, 0, 0, 2, 0, 0, 0]);
        assert_eq!(buf.len(), 8 + 2 * 5 * 8);
        assert_eq!(read_binary::<f64, _>(&buf[..]).unwrap(), sample());
    }

    #[test]
    fn csv_bad_number_reports_offset() {
        let text = "0,0,0\n1,x,0\n";
        match read_csv::<f64, _>(text.as_bytes()) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 6),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn binary_truncated() {
        let mut buf = Vec::new();
        write_binary(&sample(), &mut buf).unwrap();
        buf.pop();
        assert!(matches!(read_binary::<f64, _>(&buf[..]), Err(Error::Parse { .. })));
    }
}
