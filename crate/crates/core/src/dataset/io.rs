//! Little-endian binary dataset format.
//!
//! ```text
//! header : magic "RCDS" | version u32 | parcels u32 | years u8 | channels u16 | classes u16
//! parcel : id u64 | centroid x f64 | centroid y f64 | year * years
//! year   : T u16 | days T*u16 | N_p u32 | pixels (C*N_p*T)*f32 | label u16
//! ```
//! Pixels are stored `C × N_p × T`, row-major. A JSON manifest sits next to
//! the binary file (see [`manifest_path`]).

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::{Dataset, Manifest, MultiYearParcel, PixelSetSample};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"RCDS";
pub const VERSION: u32 = 1;

/// `data.rcds` → `data.rcds.json`.
pub fn manifest_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn save_dataset(path: impl AsRef<Path>, dataset: &Dataset) -> Result<()> {
    let path = path.as_ref();
    dataset.validate()?;
    let bytes = encode(dataset)?;
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    let manifest = serde_json::to_string_pretty(&dataset.manifest)?;
    let mpath = manifest_path(path);
    fs::write(&mpath, manifest).map_err(|e| Error::io(&mpath, e))?;
    Ok(())
}

/// Reads a dataset and, when present, its manifest.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mpath = manifest_path(path);
    let manifest = match fs::read_to_string(&mpath) {
        Ok(text) => serde_json::from_str(&text)?,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Manifest::default(),
        Err(e) => return Err(Error::io(&mpath, e)),
    };
    decode(&bytes, manifest)
}

fn narrow<T: TryFrom<usize>>(v: usize, what: &str) -> Result<T> {
    T::try_from(v).map_err(|_| Error::Dimension(format!("{what} = {v} does not fit the file format")))
}

pub(crate) fn encode(ds: &Dataset) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&narrow::<u32>(ds.parcels.len(), "parcel count")?.to_le_bytes());
    out.push(narrow::<u8>(ds.years, "years")?);
    out.extend_from_slice(&narrow::<u16>(ds.channels, "channels")?.to_le_bytes());
    out.extend_from_slice(&narrow::<u16>(ds.classes, "classes")?.to_le_bytes());
    for p in &ds.parcels {
        out.extend_from_slice(&p.parcel_id.to_le_bytes());
        out.extend_from_slice(&p.centroid.0.to_le_bytes());
        out.extend_from_slice(&p.centroid.1.to_le_bytes());
        for s in &p.years {
            out.extend_from_slice(&narrow::<u16>(s.dates(), "dates")?.to_le_bytes());
            for d in &s.days {
                out.extend_from_slice(&d.to_le_bytes());
            }
            out.extend_from_slice(&narrow::<u32>(s.pixel_count(), "pixels")?.to_le_bytes());
            for v in s.pixels.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
            out.extend_from_slice(&narrow::<u16>(s.label, "label")?.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format(
                self.pos as u64,
                format!(
                    "truncated file: {what} needs {n} bytes, {} remain",
                    self.buf.len() - self.pos
                ),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
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

pub(crate) fn decode(bytes: &[u8], manifest: Manifest) -> Result<Dataset> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::format(
            0,
            format!("bad magic {magic:?}, expected {:?} (\"RCDS\")", MAGIC),
        ));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::format(4, format!("unsupported version {version}, expected {VERSION}")));
    }
    let n_parcels = r.u32("parcel count")? as usize;
    let years = r.u8("years")? as usize;
    let channels = r.u16("channels")? as usize;
    let classes = r.u16("classes")? as usize;
    if channels == 0 {
        return Err(Error::format(13, "channel count is zero"));
    }
    let mut parcels = Vec::with_capacity(n_parcels.min(1 << 20));
    for _ in 0..n_parcels {
        let parcel_id = r.u64("parcel id")?;
        let centroid = (r.f64("centroid x")?, r.f64("centroid y")?);
        let mut samples = Vec::with_capacity(years);
        for y in 0..years {
            let t = r.u16("date count")? as usize;
            let days: Vec<u16> = (0..t).map(|_| r.u16("day")).collect::<Result<_>>()?;
            let np_at = r.pos as u64;
            let n_pixels = r.u32("pixel count")? as usize;
            if n_pixels == 0 || t == 0 {
                return Err(Error::format(
                    np_at,
                    format!("parcel {parcel_id} year {} has no pixels or dates", y + 1),
                ));
            }
            let count = channels
                .checked_mul(n_pixels)
                .and_then(|v| v.checked_mul(t))
                .filter(|v| v.checked_mul(4).is_some_and(|b| b <= r.buf.len() - r.pos))
                .ok_or_else(|| {
                    Error::format(
                        r.pos as u64,
                        format!(
                            "pixel block {channels}x{n_pixels}x{t} overflows the remaining {} bytes",
                            r.buf.len() - r.pos
                        ),
                    )
                })?;
            let raw = r.take(count * 4, "pixels")?;
            let data: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let label_at = r.pos as u64;
            let label = r.u16("label")? as usize;
            if label >= classes {
                return Err(Error::format(label_at, format!("label {label} >= class count {classes}")));
            }
            let pixels = Tensor::new(vec![channels, n_pixels, t], data)?;
            let sample = PixelSetSample::new(parcel_id, y + 1, pixels, days, label)
                .map_err(|e| Error::format(np_at, e.to_string()))?;
            samples.push(sample);
        }
        parcels.push(MultiYearParcel {
            parcel_id,
            centroid,
            years: samples,
        });
    }
    if r.pos != bytes.len() {
        return Err(Error::format(r.pos as u64, "trailing bytes after last parcel"));
    }
    Dataset::new(years, channels, classes, parcels, manifest)
}
