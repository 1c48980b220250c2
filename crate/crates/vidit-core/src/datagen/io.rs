//! On-disk dataset container.
//!
//! A dataset is a directory holding a line-oriented `manifest` plus one
//! binary record per sample. Records store pixels on the 8-bit grid and
//! masks as packed bits, so a write/read cycle reproduces samples
//! bit-exactly (generation already snaps pixels to the same grid).
//!
//! Record layout, little-endian throughout:
//!   magic "VCU1"
//!   u32 tag length, tag string
//!   u32 ref count l, video length n, height h, width w
//!   u32 prompt length, prompt bytes (UTF-8)
//!   u64 sample seed
//!   (l+n)*h*w*3 frame bytes, n*h*w*3 target bytes
//!   (l+n)*h*w mask bits, row-major, LSB first, zero-padded to a byte

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::train::TrainSample;
use crate::vcu::{FrameSeq, MaskSeq, TaskTag, Vcu};

use super::{pixel_to_u8, u8_to_pixel};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"VCU1";

fn record_name(index: usize) -> String {
    format!("record_{index:06}.bin")
}

pub fn write_dataset(samples: &[TrainSample], path: &Path) -> Result<()> {
    let geom = samples
        .iter()
        .map(|s| (s.vcu.video_len(), s.target.height(), s.target.width()))
        .collect::<std::collections::BTreeSet<_>>();
    if geom.len() > 1 {
        return Err(Error::arg(
            "write_dataset",
            format!("samples mix geometries: {geom:?}"),
        ));
    }
    let (n, h, w) = geom.into_iter().next().unwrap_or((0, 0, 0));
    fs::create_dir_all(path)?;
    let manifest = format!(
        "version = {FORMAT_VERSION}\ncount = {}\nframes = {n}\nheight = {h}\nwidth = {w}\n",
        samples.len()
    );
    fs::write(path.join("manifest"), manifest)?;
    for (i, sample) in samples.iter().enumerate() {
        fs::write(path.join(record_name(i)), encode_record(sample))?;
    }
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Vec<TrainSample>> {
    let manifest = fs::read_to_string(path.join("manifest"))?;
    let m = parse_manifest(&manifest)?;
    let mut out = Vec::with_capacity(m.count);
    for i in 0..m.count {
        let file = path.join(record_name(i));
        let bytes = fs::read(&file)?;
        let sample = decode_record(&bytes, Some(&m))
            .map_err(|e| prefix_parse(e, &record_name(i)))?;
        out.push(sample);
    }
    Ok(out)
}

/// One sample as a standalone file, same binary layout as a dataset record.
/// The header carries the geometry, so no manifest is needed.
pub fn write_record_file(sample: &TrainSample, path: &Path) -> Result<()> {
    fs::write(path, encode_record(sample))?;
    Ok(())
}

pub fn read_record_file(path: &Path) -> Result<TrainSample> {
    let bytes = fs::read(path)?;
    decode_record(&bytes, None)
}

fn prefix_parse(e: Error, name: &str) -> Error {
    match e {
        Error::Parse { offset, detail } => Error::Parse {
            offset,
            detail: format!("{name}: {detail}"),
        },
        other => other,
    }
}

struct Manifest {
    count: usize,
    frames: usize,
    height: usize,
    width: usize,
}

fn parse_manifest(text: &str) -> Result<Manifest> {
    let mut fields = std::collections::BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
            offset: lineno as u64,
            detail: format!("manifest line {:?} is not `key = value`", line),
        })?;
        let value: u64 = value.trim().parse().map_err(|_| Error::Parse {
            offset: lineno as u64,
            detail: format!("manifest value {:?} is not an integer", value.trim()),
        })?;
        fields.insert(key.trim().to_string(), value);
    }
    let get = |key: &str| {
        fields.get(key).copied().ok_or_else(|| Error::Parse {
            offset: 0,
            detail: format!("manifest is missing `{key}`"),
        })
    };
    let version = get("version")? as u32;
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            found: version,
            supported: FORMAT_VERSION,
        });
    }
    Ok(Manifest {
        count: get("count")? as usize,
        frames: get("frames")? as usize,
        height: get("height")? as usize,
        width: get("width")? as usize,
    })
}

fn push_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn encode_record(sample: &TrainSample) -> Vec<u8> {
    let vcu = &sample.vcu;
    let (l, n) = (vcu.ref_count(), vcu.video_len());
    let (h, w) = (vcu.height(), vcu.width());
    let tag = vcu.task_tag().to_string();
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    push_u32(&mut buf, tag.len() as u32);
    buf.extend_from_slice(tag.as_bytes());
    for v in [l, n, h, w] {
        push_u32(&mut buf, v as u32);
    }
    push_u32(&mut buf, vcu.prompt().len() as u32);
    buf.extend_from_slice(vcu.prompt().as_bytes());
    buf.extend_from_slice(&sample.seed.to_le_bytes());
    for &px in vcu.frames().tensor().data() {
        buf.push(pixel_to_u8(px));
    }
    for &px in sample.target.tensor().data() {
        buf.push(pixel_to_u8(px));
    }
    let mask_data = vcu.masks().tensor().data();
    let mut byte = 0u8;
    for (i, &m) in mask_data.iter().enumerate() {
        if m != 0.0 {
            byte |= 1 << (i % 8);
        }
        if i % 8 == 7 {
            buf.push(byte);
            byte = 0;
        }
    }
    if mask_data.len() % 8 != 0 {
        buf.push(byte);
    }
    buf
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, len: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + len > self.bytes.len() {
            return Err(Error::Parse {
                offset: self.pos as u64,
                detail: format!(
                    "{} needs {} bytes, {} remain",
                    what,
                    len,
                    self.bytes.len() - self.pos
                ),
            });
        }
        let slice = &self.bytes[self.pos..self.pos + len];
        self.pos += len;
        Ok(slice)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let len = self.u32(what)? as usize;
        let at = self.pos as u64;
        let bytes = self.take(len, what)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| Error::Parse {
            offset: at,
            detail: format!("{what} is not valid UTF-8"),
        })
    }
}

fn decode_record(bytes: &[u8], m: Option<&Manifest>) -> Result<TrainSample> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Parse {
            offset: 0,
            detail: format!("bad magic {magic:?}, want {MAGIC:?}"),
        });
    }
    let tag_at = cur.pos as u64;
    let tag_str = cur.string("task tag")?;
    let tag: TaskTag = tag_str.parse().map_err(|_| Error::Parse {
        offset: tag_at,
        detail: format!("unknown task tag {tag_str:?}"),
    })?;
    let geom_at = cur.pos as u64;
    let l = cur.u32("ref count")? as usize;
    let n = cur.u32("video length")? as usize;
    let h = cur.u32("height")? as usize;
    let w = cur.u32("width")? as usize;
    if let Some(m) = m {
        if (n, h, w) != (m.frames, m.height, m.width) {
            return Err(Error::Parse {
                offset: geom_at,
                detail: format!(
                    "record geometry ({n}, {h}, {w}) does not match manifest ({}, {}, {})",
                    m.frames, m.height, m.width
                ),
            });
        }
    }
    let prompt = cur.string("prompt")?;
    let seed = cur.u64("seed")?;

    let frame_px = (l + n) * h * w * 3;
    let frames = bytes_to_frames(cur.take(frame_px, "frames")?, l + n, h, w)?;
    let target = bytes_to_frames(cur.take(n * h * w * 3, "target")?, n, h, w)?;

    let mask_count = (l + n) * h * w;
    let mask_at = cur.pos as u64;
    let mask_bytes = cur.take(mask_count.div_ceil(8), "masks")?;
    let mut mask_data = vec![0.0f32; mask_count];
    for (i, slot) in mask_data.iter_mut().enumerate() {
        if mask_bytes[i / 8] >> (i % 8) & 1 == 1 {
            *slot = 1.0;
        }
    }
    for i in mask_count..mask_bytes.len() * 8 {
        if mask_bytes[i / 8] >> (i % 8) & 1 == 1 {
            return Err(Error::Parse {
                offset: mask_at + (i / 8) as u64,
                detail: "nonzero padding bits after mask stream".into(),
            });
        }
    }
    if cur.pos != bytes.len() {
        return Err(Error::Parse {
            offset: cur.pos as u64,
            detail: format!("{} trailing bytes after record", bytes.len() - cur.pos),
        });
    }

    let masks = MaskSeq::new(Tensor::from_vec(&[l + n, h, w], mask_data)?)?;
    let vcu = Vcu::from_parts(prompt, frames, masks, l, n, tag).map_err(|e| Error::Parse {
        offset: 0,
        detail: format!("record does not form a valid unit: {e}"),
    })?;
    TrainSample::new(vcu, target, seed).map_err(|e| Error::Parse {
        offset: 0,
        detail: format!("record does not form a valid sample: {e}"),
    })
}

fn bytes_to_frames(bytes: &[u8], count: usize, h: usize, w: usize) -> Result<FrameSeq> {
    let data: Vec<f32> = bytes.iter().map(|&b| u8_to_pixel(b)).collect();
    FrameSeq::new(Tensor::from_vec(&[count, h, w, 3], data)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{make_sample, GeomParams, TaskKind};

    fn sample_set() -> Vec<TrainSample> {
        TaskKind::ALL
            .iter()
            .enumerate()
            .map(|(i, &kind)| make_sample(kind, 100 + i as u64, &GeomParams::default()).unwrap())
            .collect()
    }

    #[test]
    fn roundtrip_reproduces_every_field() {
        let dir = tempfile::tempdir().unwrap();
        let samples = sample_set();
        write_dataset(&samples, dir.path()).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back.len(), samples.len());
        for (a, b) in samples.iter().zip(&back) {
            assert_eq!(a.vcu.prompt(), b.vcu.prompt());
            assert_eq!(a.vcu.task_tag(), b.vcu.task_tag());
            assert_eq!(a.vcu.ref_count(), b.vcu.ref_count());
            assert_eq!(a.vcu.video_len(), b.vcu.video_len());
            assert_eq!(a.seed, b.seed);
            assert!(a.vcu.frames().tensor().bit_eq(b.vcu.frames().tensor()));
            assert!(a.vcu.masks().tensor().bit_eq(b.vcu.masks().tensor()));
            assert!(a.target.tensor().bit_eq(b.target.tensor()));
        }
    }

    #[test]
    fn empty_container_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&[], dir.path()).unwrap();
        assert_eq!(read_dataset(dir.path()).unwrap().len(), 0);
    }

    #[test]
    fn rewriting_produces_identical_bytes() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let samples = sample_set();
        write_dataset(&samples, a.path()).unwrap();
        write_dataset(&samples, b.path()).unwrap();
        let mut names: Vec<_> = std::fs::read_dir(a.path())
            .unwrap()
            .map(|e| e.unwrap().file_name())
            .collect();
        names.sort();
        assert_eq!(names.len(), samples.len() + 1);
        for name in names {
            let x = std::fs::read(a.path().join(&name)).unwrap();
            let y = std::fs::read(b.path().join(&name)).unwrap();
            assert_eq!(x, y, "{name:?}");
        }
    }

    #[test]
    fn truncation_is_a_parse_error_with_an_offset() {
        let dir = tempfile::tempdir().unwrap();
        let samples = vec![make_sample(TaskKind::T2v, 0, &GeomParams::default()).unwrap()];
        write_dataset(&samples, dir.path()).unwrap();
        let record = dir.path().join(record_name(0));
        let bytes = std::fs::read(&record).unwrap();
        std::fs::write(&record, &bytes[..bytes.len() - 10]).unwrap();
        match read_dataset(dir.path()) {
            Err(Error::Parse { offset, detail }) => {
                assert!(offset > 0, "offset {offset}");
                assert!(detail.contains("record_000000.bin"), "{detail}");
            }
            other => panic!("want parse error, got {other:?}"),
        }
    }

    #[test]
    fn trailing_bytes_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let samples = vec![make_sample(TaskKind::Mv2vInpaint, 1, &GeomParams::default()).unwrap()];
        write_dataset(&samples, dir.path()).unwrap();
        let record = dir.path().join(record_name(0));
        let mut bytes = std::fs::read(&record).unwrap();
        let clean_len = bytes.len();
        bytes.extend_from_slice(&[0, 1, 2]);
        std::fs::write(&record, &bytes).unwrap();
        match read_dataset(dir.path()) {
            Err(Error::Parse { offset, detail }) => {
                assert_eq!(offset, clean_len as u64);
                assert!(detail.contains("trailing"), "{detail}");
            }
            other => panic!("want parse error, got {other:?}"),
        }
    }

    #[test]
    fn corrupt_magic_is_reported_at_offset_zero() {
        let dir = tempfile::tempdir().unwrap();
        let samples = vec![make_sample(TaskKind::V2vGray, 2, &GeomParams::default()).unwrap()];
        write_dataset(&samples, dir.path()).unwrap();
        let record = dir.path().join(record_name(0));
        let mut bytes = std::fs::read(&record).unwrap();
        bytes[0] = b'X';
        std::fs::write(&record, &bytes).unwrap();
        match read_dataset(dir.path()) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("want parse error, got {other:?}"),
        }
    }

    #[test]
    fn unsupported_version_is_its_own_error() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&[], dir.path()).unwrap();
        std::fs::write(
            dir.path().join("manifest"),
            "version = 9\ncount = 0\nframes = 0\nheight = 0\nwidth = 0\n",
        )
        .unwrap();
        match read_dataset(dir.path()) {
            Err(Error::Version { found, supported }) => {
                assert_eq!(found, 9);
                assert_eq!(supported, FORMAT_VERSION);
            }
            other => panic!("want version error, got {other:?}"),
        }
    }

    #[test]
    fn standalone_record_files_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("unit.bin");
        let sample = make_sample(TaskKind::Composite, 11, &GeomParams::default()).unwrap();
        write_record_file(&sample, &path).unwrap();
        let back = read_record_file(&path).unwrap();
        assert_eq!(back.vcu.task_tag(), sample.vcu.task_tag());
        assert_eq!(back.seed, sample.seed);
        assert!(back.vcu.frames().tensor().bit_eq(sample.vcu.frames().tensor()));
        assert!(back.vcu.masks().tensor().bit_eq(sample.vcu.masks().tensor()));
        assert!(back.target.tensor().bit_eq(sample.target.tensor()));
        write_record_file(&back, &dir.path().join("again.bin")).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(dir.path().join("again.bin")).unwrap()
        );
    }

    #[test]
    fn mixed_geometry_refuses_to_write() {
        let a = make_sample(TaskKind::T2v, 0, &GeomParams::default()).unwrap();
        let small = GeomParams {
            frames: 4,
            height: 16,
            width: 16,
        };
        let b = make_sample(TaskKind::T2v, 0, &small).unwrap();
        let dir = tempfile::tempdir().unwrap();
        assert!(write_dataset(&[a, b], dir.path()).is_err());
    }
}
