//! Binary dataset file.
//!
//! ```text
//! "BSCC" | u16 version | payload | u32 CRC32(payload)
//!
//! payload := u32 C | u32 T | u32 F | u32 n_train | u32 n_test
//!            | generator spec
//!            | n_train × video | n_test × video
//! video   := u32 len + UTF-8 id
//!            | ceil(C/8) bytes label bitset (LSB first)
//!            | u32 n_gt | n_gt × (u32 start, u32 end, u16 class)
//!            | u32 n_co | n_co × (u32 start, u32 end, u16 class)
//!            | T·F × f32 row-major features
//! ```
//!
//! All integers little-endian.

use std::fs;
use std::path::Path;

use super::{Dataset, GtSegment, SyntheticSpec, VideoSample};
use crate::autodiff::Tensor2;
use crate::codec::{Reader, Writer};
use crate::error::{Error, Result};

pub const DATASET_MAGIC: [u8; 4] = *b"BSCC";
pub const DATASET_VERSION: u16 = 1;

pub fn write_dataset(d: &Dataset) -> Vec<u8> {
    let mut w = Writer::new(&DATASET_MAGIC, DATASET_VERSION);
    let s = &d.spec;
    w.u32(s.num_classes as u32);
    w.u32(s.segments_per_video as u32);
    w.u32(s.feature_dim as u32);
    w.u32(d.train.len() as u32);
    w.u32(d.test.len() as u32);

    w.u32(s.actions_per_video.0 as u32);
    w.u32(s.actions_per_video.1 as u32);
    w.u32(s.action_length.0 as u32);
    w.u32(s.action_length.1 as u32);
    w.f64(s.scene_correlation);
    w.f64(s.co_scene_fraction);
    w.f64(s.noise_sigma);
    w.u32(s.num_train as u32);
    w.u32(s.num_test as u32);
    w.u64(s.seed);

    let label_bytes = s.num_classes.div_ceil(8);
    for v in d.train.iter().chain(&d.test) {
        w.str(&v.id);
        let mut bits = vec![0u8; label_bytes];
        for c in v.classes() {
            bits[c / 8] |= 1 << (c % 8);
        }
        w.bytes(&bits);
        for list in [&v.gt_segments, &v.co_scene_segments] {
            w.u32(list.len() as u32);
            for seg in list {
                w.u32(seg.start as u32);
                w.u32(seg.end as u32);
                w.u16(seg.class as u16);
            }
        }
        for &x in v.features.data() {
            w.f32(x as f32);
        }
    }
    w.finish()
}

pub fn read_dataset(bytes: &[u8]) -> Result<Dataset> {
    let mut r = Reader::open(bytes, &DATASET_MAGIC, DATASET_VERSION)?;
    let c = r.u32()? as usize;
    let t_len = r.u32()? as usize;
    let f = r.u32()? as usize;
    let n_train = r.u32()? as usize;
    let n_test = r.u32()? as usize;

    let spec = SyntheticSpec {
        num_classes: c,
        segments_per_video: t_len,
        feature_dim: f,
        actions_per_video: (r.u32()? as usize, r.u32()? as usize),
        action_length: (r.u32()? as usize, r.u32()? as usize),
        scene_correlation: r.f64()?,
        co_scene_fraction: r.f64()?,
        noise_sigma: r.f64()?,
        num_train: r.u32()? as usize,
        num_test: r.u32()? as usize,
        seed: r.u64()?,
    };

    let label_bytes = c.div_ceil(8);
    let read_video = |r: &mut Reader| -> Result<VideoSample> {
        let id = r.str()?;
        let bits = r.bytes(label_bytes)?;
        let label = (0..c).map(|k| bits[k / 8] >> (k % 8) & 1 == 1).collect();
        let mut lists = [Vec::new(), Vec::new()];
        for list in &mut lists {
            let n = r.u32()? as usize;
            list.reserve(n.min(t_len));
            for _ in 0..n {
                let start = r.u32()? as usize;
                let end = r.u32()? as usize;
                let class = r.u16()? as usize;
                list.push(GtSegment { class, start, end });
            }
        }
        let n = t_len
            .checked_mul(f)
            .ok_or_else(|| Error::Malformed("feature block too large".into()))?;
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(r.f32()? as f64);
        }
        let [gt_segments, co_scene_segments] = lists;
        Ok(VideoSample {
            id,
            features: Tensor2::from_vec(t_len, f, data)?,
            label,
            gt_segments,
            co_scene_segments,
        })
    };
    let train = (0..n_train).map(|_| read_video(&mut r)).collect::<Result<Vec<_>>>()?;
    let test = (0..n_test).map(|_| read_video(&mut r)).collect::<Result<Vec<_>>>()?;
    r.expect_end()?;
    let d = Dataset { spec, train, test };
    d.validate().map_err(|e| Error::Malformed(e.to_string()))?;
    Ok(d)
}

pub fn save_dataset(d: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, write_dataset(d))?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    read_dataset(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::generate_synthetic;

    fn small() -> Dataset {
        generate_synthetic(&SyntheticSpec {
            num_train: 6,
            num_test: 3,
            ..SyntheticSpec::default()
        })
        .unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let d = small();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.bscc");
        save_dataset(&d, &path).unwrap();
        assert_eq!(load_dataset(&path).unwrap(), d);
    }

    #[test]
    fn header_layout() {
        let bytes = write_dataset(&small());
        assert_eq!(&bytes[..4], b"BSCC");
        assert_eq!(u16::from_le_bytes([bytes[4], bytes[5]]), DATASET_VERSION);
        assert_eq!(u32::from_le_bytes(bytes[6..10].try_into().unwrap()), 5);
        assert_eq!(u32::from_le_bytes(bytes[10..14].try_into().unwrap()), 64);
        assert_eq!(u32::from_le_bytes(bytes[14..18].try_into().unwrap()), 32);
    }

    #[test]
    fn corrupted_payload_fails_checksum() {
        let mut bytes = write_dataset(&small());
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        assert!(matches!(read_dataset(&bytes), Err(Error::Checksum { .. })));
    }

    #[test]
    fn bad_magic_version_and_truncation() {
        let bytes = write_dataset(&small());
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(matches!(read_dataset(&wrong), Err(Error::BadMagic { .. })));
        let mut ver = bytes.clone();
        ver[4] = 9;
        assert!(matches!(read_dataset(&ver), Err(Error::Version(9))));
        assert!(read_dataset(&bytes[..bytes.len() - 100]).is_err());
        assert!(matches!(read_dataset(&bytes[..3]), Err(Error::Truncated)));
    }

    #[test]
    fn empty_train_split_is_valid() {
        let mut d = small();
        d.train.clear();
        let back = read_dataset(&write_dataset(&d)).unwrap();
        assert!(back.train.is_empty());
        assert_eq!(back, d);
    }
}
