//! MetaImage (`.mhd` header + `.raw` data) reader and writer.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use super::{Volume, VolumeKind};
use crate::{Error, Result, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementType {
    UChar,
    Char,
    UShort,
    Short,
    Float,
    Double,
}

impl ElementType {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "MET_UCHAR" => ElementType::UChar,
            "MET_CHAR" => ElementType::Char,
            "MET_USHORT" => ElementType::UShort,
            "MET_SHORT" => ElementType::Short,
            "MET_FLOAT" => ElementType::Float,
            "MET_DOUBLE" => ElementType::Double,
            _ => return None,
        })
    }

    pub fn tag(self) -> &'static str {
        match self {
            ElementType::UChar => "MET_UCHAR",
            ElementType::Char => "MET_CHAR",
            ElementType::UShort => "MET_USHORT",
            ElementType::Short => "MET_SHORT",
            ElementType::Float => "MET_FLOAT",
            ElementType::Double => "MET_DOUBLE",
        }
    }

    pub fn size(self) -> usize {
        match self {
            ElementType::UChar | ElementType::Char => 1,
            ElementType::UShort | ElementType::Short => 2,
            ElementType::Float => 4,
            ElementType::Double => 8,
        }
    }

    fn decode(self, b: &[u8], msb: bool) -> f64 {
        macro_rules! num {
            ($t:ty, $n:expr) => {{
                let arr: [u8; $n] = b[..$n].try_into().expect("element width");
                (if msb { <$t>::from_be_bytes(arr) } else { <$t>::from_le_bytes(arr) }) as f64
            }};
        }
        match self {
            ElementType::UChar => b[0] as f64,
            ElementType::Char => b[0] as i8 as f64,
            ElementType::UShort => num!(u16, 2),
            ElementType::Short => num!(i16, 2),
            ElementType::Float => num!(f32, 4),
            ElementType::Double => num!(f64, 8),
        }
    }
}

struct Header {
    fields: HashMap<String, String>,
    /// Byte offset where LOCAL data begins.
    local_data_at: Option<usize>,
}

impl Header {
    fn parse(path: &Path, bytes: &[u8]) -> Result<Self> {
        let mut fields = HashMap::new();
        let mut pos = 0;
        let mut local_data_at = None;
        while pos < bytes.len() {
            let end = bytes[pos..].iter().position(|&b| b == b'\n').map_or(bytes.len(), |i| pos + i);
            let line = std::str::from_utf8(&bytes[pos..end])
                .map_err(|_| Error::format(path, format!("header line at byte {pos} is not UTF-8")))?
                .trim();
            pos = end + 1;
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::format(path, format!("header line `{line}` is not `Key = Value`")))?;
            let (key, value) = (key.trim().to_string(), value.trim().to_string());
            let is_data_file = key == "ElementDataFile";
            if is_data_file && value == "LOCAL" {
                local_data_at = Some(pos.min(bytes.len()));
            }
            fields.insert(key, value);
            if is_data_file {
                break;
            }
        }
        Ok(Header { fields, local_data_at })
    }

    fn get<'a>(&'a self, path: &Path, key: &str) -> Result<&'a str> {
        self.fields.get(key).map(String::as_str).ok_or_else(|| Error::format(path, format!("missing key {key}")))
    }

    fn triple<N: std::str::FromStr>(&self, path: &Path, key: &str, default: Option<[N; 3]>) -> Result<[N; 3]> {
        let Some(raw) = self.fields.get(key) else {
            return default.ok_or_else(|| Error::format(path, format!("missing key {key}")));
        };
        let parts: Vec<&str> = raw.split_whitespace().collect();
        if parts.len() != 3 {
            return Err(Error::format(path, format!("key {key} must hold 3 values, found `{raw}`")));
        }
        let mut out = Vec::with_capacity(3);
        for p in parts {
            out.push(p.parse::<N>().map_err(|_| Error::format(path, format!("key {key} has unparsable value `{p}`")))?);
        }
        Ok(out.try_into().unwrap_or_else(|_| unreachable!()))
    }

    fn flag(&self, path: &Path, key: &str) -> Result<Option<bool>> {
        match self.fields.get(key).map(|s| s.to_ascii_lowercase()) {
            None => Ok(None),
            Some(v) if v == "true" || v == "1" => Ok(Some(true)),
            Some(v) if v == "false" || v == "0" => Ok(Some(false)),
            Some(v) => Err(Error::format(path, format!("key {key} must be True or False, found `{v}`"))),
        }
    }
}

/// Reads a 3D MetaImage. `kind = Label` additionally checks binarity.
pub fn read_metaimage<T: Scalar>(path: impl AsRef<Path>, kind: VolumeKind) -> Result<Volume<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let header = Header::parse(path, &bytes)?;

    if let Some(obj) = header.fields.get("ObjectType") {
        if obj != "Image" {
            return Err(Error::format(path, format!("ObjectType must be Image, found `{obj}`")));
        }
    }
    let ndims = header.get(path, "NDims")?;
    if ndims != "3" {
        return Err(Error::format(path, format!("NDims must be 3, found `{ndims}`")));
    }
    if header.flag(path, "CompressedData")? == Some(true) {
        return Err(Error::format(path, "CompressedData = True is not supported"));
    }
    let dims: [usize; 3] = header.triple(path, "DimSize", None)?;
    let spacing: [f64; 3] = match header.fields.get("ElementSpacing") {
        Some(_) => header.triple(path, "ElementSpacing", None)?,
        None => header.triple(path, "ElementSize", Some([1.0; 3]))?,
    };
    let origin: [f64; 3] = ["Offset", "Origin", "Position"]
        .iter()
        .find(|k| header.fields.contains_key(**k))
        .map_or(Ok([0.0; 3]), |k| header.triple(path, k, None))?;
    let etype_raw = header.get(path, "ElementType")?;
    let etype = ElementType::parse(etype_raw)
        .ok_or_else(|| Error::format(path, format!("ElementType `{etype_raw}` is not supported")))?;
    if let Some(n) = header.fields.get("ElementNumberOfChannels") {
        if n != "1" {
            return Err(Error::format(path, format!("ElementNumberOfChannels must be 1, found `{n}`")));
        }
    }
    let msb = match header.flag(path, "ElementByteOrderMSB")? {
        Some(v) => v,
        None => header.flag(path, "BinaryDataByteOrderMSB")?.unwrap_or(false),
    };
    let data_file = header.get(path, "ElementDataFile")?;

    let count: usize = dims.iter().product();
    let expected = count * etype.size();
    let (raw, raw_path): (Vec<u8>, PathBuf) = match header.local_data_at {
        Some(at) => (bytes[at..].to_vec(), path.to_path_buf()),
        None => {
            let p = path.parent().unwrap_or(Path::new(".")).join(data_file);
            (fs::read(&p).map_err(|e| Error::io(&p, e))?, p)
        }
    };
    let header_size: i64 = match header.fields.get("HeaderSize") {
        Some(h) => h.parse().map_err(|_| Error::format(path, format!("key HeaderSize has unparsable value `{h}`")))?,
        None => 0,
    };
    let skip = match header_size {
        -1 => raw.len().saturating_sub(expected),
        n if n >= 0 => n as usize,
        n => return Err(Error::format(path, format!("key HeaderSize has invalid value {n}"))),
    };
    let payload = raw.get(skip..).unwrap_or(&[]);
    if payload.len() < expected {
        return Err(Error::Truncation {
            path: raw_path.display().to_string(),
            expected,
            found: payload.len(),
        });
    }
    let data = payload[..expected].chunks_exact(etype.size()).map(|c| T::of(etype.decode(c, msb))).collect();
    Volume::new(data, dims, spacing, origin, kind).map_err(|e| match e {
        Error::Contract(m) => Error::format(path, m),
        other => other,
    })
}

/// Writes `<stem>.mhd` plus `<stem>.raw`. Labels are stored as `MET_UCHAR`;
/// images as `MET_FLOAT` (f32 volumes) or `MET_DOUBLE` (f64 volumes) so the
/// round trip is bit-exact.
pub fn write_metaimage<T: Scalar>(volume: &Volume<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let raw_path = path.with_extension("raw");
    let raw_name = raw_path
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::Usage(format!("cannot derive a data file name from {}", path.display())))?
        .to_string();
    let etype = match volume.kind() {
        VolumeKind::Label => ElementType::UChar,
        VolumeKind::Image if T::BYTES == 8 => ElementType::Double,
        VolumeKind::Image => ElementType::Float,
    };
    let fmt3 = |v: [f64; 3]| format!("{} {} {}", v[0], v[1], v[2]);
    let d = volume.dims();
    let header = format!(
        "ObjectType = Image\n\
         NDims = 3\n\
         BinaryData = True\n\
         BinaryDataByteOrderMSB = False\n\
         CompressedData = False\n\
         TransformMatrix = 1 0 0 0 1 0 0 0 1\n\
         Offset = {}\n\
         CenterOfRotation = 0 0 0\n\
         AnatomicalOrientation = RAI\n\
         ElementSpacing = {}\n\
         DimSize = {} {} {}\n\
         ElementType = {}\n\
         ElementDataFile = {}\n",
        fmt3(volume.origin()),
        fmt3(volume.spacing()),
        d[0],
        d[1],
        d[2],
        etype.tag(),
        raw_name
    );
    let mut raw = Vec::with_capacity(volume.len() * etype.size());
    for &v in volume.data() {
        match etype {
            ElementType::UChar => raw.push(if v > T::zero() { 1u8 } else { 0u8 }),
            ElementType::Float => raw.extend_from_slice(&(v.as_f64() as f32).to_le_bytes()),
            ElementType::Double => raw.extend_from_slice(&v.as_f64().to_le_bytes()),
            _ => unreachable!("writer only emits uchar, float and double"),
        }
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, header).map_err(|e| Error::io(path, e))?;
    fs::write(&raw_path, raw).map_err(|e| Error::io(&raw_path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header(dims: &str, etype: &str, data: &str, extra: &str) -> String {
        format!(
            "ObjectType = Image\nNDims = 3\nDimSize = {dims}\nElementSpacing = 0.625 0.625 1.5\n{extra}ElementType = {etype}\nElementDataFile = {data}\n"
        )
    }

    #[test]
    fn reads_header_fields_and_data() {
        let dir = tempfile::tempdir().unwrap();
        let values: Vec<f32> = (0..32).map(|i| i as f32 * 0.5).collect();
        let raw: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        fs::write(dir.path().join("a.raw"), raw).unwrap();
        fs::write(dir.path().join("a.mhd"), header("4 4 2", "MET_FLOAT", "a.raw", "Offset = 1 2 3\n")).unwrap();
        let v: Volume<f32> = read_metaimage(dir.path().join("a.mhd"), VolumeKind::Image).unwrap();
        assert_eq!(v.dims(), [4, 4, 2]);
        assert_eq!(v.spacing(), [0.625, 0.625, 1.5]);
        assert_eq!(v.origin(), [1.0, 2.0, 3.0]);
        assert_eq!(v.data(), values.as_slice());
        assert_eq!(v.get(1, 0, 0), 0.5);
        assert_eq!(v.get(0, 1, 0), 2.0);
    }

    #[test]
    fn short_data_is_a_truncation_error() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("a.raw"), vec![0u8; 16 * 4]).unwrap();
        fs::write(dir.path().join("a.mhd"), header("4 4 2", "MET_FLOAT", "a.raw", "")).unwrap();
        let err = read_metaimage::<f32>(dir.path().join("a.mhd"), VolumeKind::Image).unwrap_err();
        assert!(matches!(err, Error::Truncation { expected: 128, found: 64, .. }), "{err}");
    }

    #[test]
    fn big_endian_shorts_decode() {
        let dir = tempfile::tempdir().unwrap();
        let raw: Vec<u8> = [-2i16, 300].iter().flat_map(|v| v.to_be_bytes()).collect();
        fs::write(dir.path().join("b.raw"), raw).unwrap();
        fs::write(dir.path().join("b.mhd"), header("2 1 1", "MET_SHORT", "b.raw", "ElementByteOrderMSB = True\n"))
            .unwrap();
        let v: Volume<f64> = read_metaimage(dir.path().join("b.mhd"), VolumeKind::Image).unwrap();
        assert_eq!(v.data(), &[-2.0, 300.0]);
    }

    #[test]
    fn local_data_follows_the_header() {
        let dir = tempfile::tempdir().unwrap();
        let mut bytes = header("2 1 1", "MET_UCHAR", "LOCAL", "").into_bytes();
        bytes.extend_from_slice(&[0, 1]);
        fs::write(dir.path().join("c.mha"), bytes).unwrap();
        let v: Volume<f32> = read_metaimage(dir.path().join("c.mha"), VolumeKind::Label).unwrap();
        assert_eq!(v.data(), &[0.0, 1.0]);
        assert_eq!(v.kind(), VolumeKind::Label);
    }

    #[test]
    fn malformed_headers_name_the_key() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("d.raw"), vec![0u8; 8]).unwrap();
        let cases = [
            (header("2 2", "MET_UCHAR", "d.raw", ""), "DimSize"),
            (header("2 2 2", "MET_LONG", "d.raw", ""), "ElementType"),
            ("NDims = 3\nDimSize = 2 2 2\nElementType = MET_UCHAR\n".to_string(), "ElementDataFile"),
            (header("2 2 2", "MET_UCHAR", "d.raw", "CompressedData = True\n"), "CompressedData"),
            (header("2 2 2", "MET_UCHAR", "d.raw", "").replace("NDims = 3", "NDims = 2"), "NDims"),
        ];
        for (text, key) in cases {
            fs::write(dir.path().join("d.mhd"), text).unwrap();
            let err = read_metaimage::<f32>(dir.path().join("d.mhd"), VolumeKind::Image).unwrap_err();
            assert!(matches!(err, Error::Format { .. }), "{err}");
            assert!(err.to_string().contains(key), "{err} should name {key}");
        }
    }

    #[test]
    fn round_trip_is_exact_for_images_and_labels() {
        let dir = tempfile::tempdir().unwrap();
        let img = Volume::from_fn([5, 3, 2], [0.625, 0.625, 1.5], VolumeKind::Image, |x, y, z| {
            (x as f32).sin() * 1e-3 + y as f32 - 1.0 / (z as f32 + 3.0)
        })
        .unwrap()
        .with_origin([-10.25, 3.1, 0.7]);
        write_metaimage(&img, dir.path().join("img.mhd")).unwrap();
        let text = fs::read_to_string(dir.path().join("img.mhd")).unwrap();
        assert!(text.contains("ElementSpacing = 0.625 0.625 1.5"));
        assert_eq!(read_metaimage::<f32>(dir.path().join("img.mhd"), VolumeKind::Image).unwrap(), img);

        let img64 = Volume::from_fn([3, 3, 3], [0.3, 0.7, 1.1], VolumeKind::Image, |x, y, z| {
            (x * 9 + y * 3 + z) as f64 / 7.0
        })
        .unwrap();
        write_metaimage(&img64, dir.path().join("img64.mhd")).unwrap();
        assert_eq!(read_metaimage::<f64>(dir.path().join("img64.mhd"), VolumeKind::Image).unwrap(), img64);

        let lab = Volume::from_fn([4, 4, 2], [0.625, 0.625, 1.5], VolumeKind::Label, |x, y, _| {
            ((x + y) % 3 == 0) as u8 as f32
        })
        .unwrap();
        write_metaimage(&lab, dir.path().join("lab.mhd")).unwrap();
        assert!(fs::read_to_string(dir.path().join("lab.mhd")).unwrap().contains("MET_UCHAR"));
        assert_eq!(fs::metadata(dir.path().join("lab.raw")).unwrap().len(), 32);
        assert_eq!(read_metaimage::<f32>(dir.path().join("lab.mhd"), VolumeKind::Label).unwrap(), lab);
    }

    #[test]
    fn unwritable_path_is_an_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("file");
        fs::write(&blocker, b"x").unwrap();
        let v = Volume::filled([1, 1, 1], [1.0; 3], VolumeKind::Image, 0.0f32).unwrap();
        let err = write_metaimage(&v, blocker.join("sub").join("v.mhd")).unwrap_err();
        assert!(matches!(err, Error::Io { .. }), "{err}");
    }
}
