//! Binary dataset container and CSV export.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "DCDS"
//! 4       4     format_version (u32)
//! 8       8     N (u64)
//! 16      4     d (u32)
//! 20      4     K (u32)
//! 24      1     domain_tag (0 = source, 1 = target)
//! 25      1     has_observed_labels (0 or 1)
//! 26      ...   N records of:
//!                 d x f64 features
//!                 u32 observed label (0xFFFF_FFFF when absent)
//!                 u32 clean label
//!                 u8  flags (bit 0 = label corrupted, bit 1 = feature corrupted)
//! ```

use std::io::{Read, Write};
use std::path::Path;

use super::{Domain, NoiseFlags, NoisyDataset};
use crate::error::{Error, Result};
use crate::io::write_atomic;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"DCDS";
const NO_LABEL: u32 = u32::MAX;

pub fn write_dataset<W: Write>(ds: &NoisyDataset, mut w: W) -> Result<()> {
    let mut buf = Vec::with_capacity(26 + ds.len() * (ds.dim() * 8 + 9));
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(ds.len() as u64).to_le_bytes());
    buf.extend_from_slice(&(ds.dim() as u32).to_le_bytes());
    buf.extend_from_slice(&(ds.num_classes() as u32).to_le_bytes());
    buf.push(match ds.domain() {
        Domain::Source => 0,
        Domain::Target => 1,
    });
    buf.push(ds.observed_labels().is_some() as u8);

    let gt = ds.ground_truth();
    for (i, row) in ds.rows().enumerate() {
        for v in row {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        let obs = ds.observed_labels().map_or(NO_LABEL, |o| o[i] as u32);
        buf.extend_from_slice(&obs.to_le_bytes());
        buf.extend_from_slice(&(gt.clean_labels[i] as u32).to_le_bytes());
        let f = gt.noise_flags[i];
        buf.push(f.label_corrupted as u8 | (f.feature_corrupted as u8) << 1);
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn save_dataset(ds: &NoisyDataset, path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::new();
    write_dataset(ds, &mut buf)?;
    write_atomic(path.as_ref(), &buf)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.pos as u64,
                format!("unexpected end of file reading {what}"),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn read_dataset<R: Read>(mut r: R) -> Result<NoisyDataset> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut c = Cursor { bytes: &bytes, pos: 0 };

    if c.take(4, "magic")? != MAGIC {
        return Err(Error::format(0, "bad magic, not a dataset file"));
    }
    let version = c.u32("format_version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let n = c.u64("N")? as usize;
    let d = c.u32("d")? as usize;
    let k = c.u32("K")? as usize;
    let domain = match c.u8("domain_tag")? {
        0 => Domain::Source,
        1 => Domain::Target,
        t => return Err(Error::format(24, format!("unknown domain tag {t}"))),
    };
    let has_observed = match c.u8("has_observed_labels")? {
        0 => false,
        1 => true,
        t => return Err(Error::format(25, format!("bad observed-label marker {t}"))),
    };
    if d == 0 || k < 2 {
        return Err(Error::format(16, "header dimensions out of range"));
    }
    let record = d * 8 + 9;
    let remaining = bytes.len() - c.pos;
    if remaining < n.saturating_mul(record) {
        // report the offset of the first incomplete record
        let whole = remaining / record;
        return Err(Error::format(
            (c.pos + whole * record) as u64,
            format!("truncated: header promises {n} records, file holds {whole}"),
        ));
    }

    let mut features = Vec::with_capacity(n * d);
    let mut observed = Vec::with_capacity(if has_observed { n } else { 0 });
    let mut clean = Vec::with_capacity(n);
    let mut flags = Vec::with_capacity(n);
    for i in 0..n {
        let start = c.pos as u64;
        for _ in 0..d {
            features.push(c.f64("feature")?);
        }
        let obs = c.u32("observed label")?;
        let cl = c.u32("clean label")?;
        let fl = c.u8("flags")?;
        if cl as usize >= k {
            return Err(Error::format(start, format!("clean label {cl} out of range in record {i}")));
        }
        if has_observed {
            if obs as usize >= k {
                return Err(Error::format(start, format!("observed label {obs} out of range in record {i}")));
            }
            observed.push(obs as usize);
        } else if obs != NO_LABEL {
            return Err(Error::format(start, format!("record {i} carries a label in an unlabeled file")));
        }
        if fl > 3 {
            return Err(Error::format(start, format!("unknown flag bits {fl:#x} in record {i}")));
        }
        clean.push(cl as usize);
        flags.push(NoiseFlags {
            label_corrupted: fl & 1 != 0,
            feature_corrupted: fl & 2 != 0,
        });
    }
    if c.pos != bytes.len() {
        return Err(Error::format(c.pos as u64, "trailing bytes after last record"));
    }

    let end = c.pos as u64;
    NoisyDataset::new(
        features,
        d,
        k,
        has_observed.then_some(observed),
        clean,
        flags,
        domain,
    )
    .map_err(|e| Error::format(end, e.to_string()))
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<NoisyDataset> {
    let f = std::fs::File::open(path)?;
    read_dataset(std::io::BufReader::new(f))
}

/// One row per instance: `f0..f{d-1},observed,clean,label_flag,feature_flag`.
/// The observed column is empty for unlabeled data.
pub fn write_csv<W: Write>(ds: &NoisyDataset, mut w: W) -> Result<()> {
    let mut header: Vec<String> = (0..ds.dim()).map(|j| format!("f{j}")).collect();
    header.extend(["observed", "clean", "label_flag", "feature_flag"].map(String::from));
    writeln!(w, "{}", header.join(","))?;
    let gt = ds.ground_truth();
    for (i, row) in ds.rows().enumerate() {
        let mut cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        cells.push(ds.observed_labels().map_or(String::new(), |o| o[i].to_string()));
        cells.push(gt.clean_labels[i].to_string());
        cells.push((gt.noise_flags[i].label_corrupted as u8).to_string());
        cells.push((gt.noise_flags[i].feature_corrupted as u8).to_string());
        writeln!(w, "{}", cells.join(","))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{corrupt, make_domain_pair, DomainSpec, NoiseKind, NoiseSpec};

    fn pair() -> (NoisyDataset, NoisyDataset) {
        let spec = DomainSpec {
            num_classes: 3,
            feature_dim: 2,
            samples_per_class: 20,
            class_center_scale: 3.0,
            class_spread: 0.7,
            shift_rotation: 0.5,
            shift_translation: vec![],
            seed: 5,
        };
        let (s, t) = make_domain_pair(&spec).unwrap();
        let noise = NoiseSpec {
            p_noise: 0.8,
            kind: NoiseKind::Mixed,
            seed: 9,
            ..NoiseSpec::none()
        };
        (corrupt(&s, &noise).unwrap(), t)
    }

    fn encode(ds: &NoisyDataset) -> Vec<u8> {
        let mut buf = Vec::new();
        write_dataset(ds, &mut buf).unwrap();
        buf
    }

    #[test]
    fn round_trip_keeps_hidden_fields() {
        let (s, t) = pair();
        assert_eq!(read_dataset(encode(&s).as_slice()).unwrap(), s);
        assert_eq!(read_dataset(encode(&t).as_slice()).unwrap(), t);
    }

    #[test]
    fn truncated_file_reports_offset() {
        let (s, _) = pair();
        let buf = encode(&s);
        let cut = &buf[..buf.len() - 3];
        match read_dataset(cut) {
            Err(Error::Format { offset, .. }) => {
                let record = 2 * 8 + 9;
                assert_eq!(offset as usize, 26 + (s.len() - 1) * record);
            }
            other => panic!("expected format error, got {other:?}"),
        }
        assert!(matches!(read_dataset(&buf[..10]), Err(Error::Format { .. })));
    }

    #[test]
    fn unknown_version_is_rejected() {
        let (s, _) = pair();
        let mut buf = encode(&s);
        buf[4..8].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(
            read_dataset(buf.as_slice()),
            Err(Error::Version { found: 7, expected: 1 })
        ));
    }

    #[test]
    fn inconsistent_flags_are_a_format_error() {
        let (s, _) = pair();
        let mut buf = encode(&s);
        // clear the flag byte of a record whose label was flipped
        let gt = s.ground_truth();
        let i = gt.noise_flags.iter().position(|f| f.label_corrupted).unwrap();
        let record = 2 * 8 + 9;
        buf[26 + i * record + record - 1] &= !1;
        assert!(matches!(read_dataset(buf.as_slice()), Err(Error::Format { .. })));
    }

    #[test]
    fn csv_has_documented_columns() {
        let (s, t) = pair();
        let mut out = Vec::new();
        write_csv(&s, &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "f0,f1,observed,clean,label_flag,feature_flag");
        assert_eq!(lines.count(), s.len());

        let mut out = Vec::new();
        write_csv(&t, &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        let row = text.lines().nth(1).unwrap();
        assert_eq!(row.split(',').nth(2).unwrap(), "");
    }
}
