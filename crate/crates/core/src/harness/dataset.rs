//! On-disk sequences and sequence sources.
//!
//! One directory per sequence:
//!
//! * `frames.bin`: magic `SSMXSEQ1`, little-endian `u32` count, height and
//!   width, then `count·H·W` little-endian f32 pixels, frame by frame.
//! * `gt.csv`: header `frame_idx,cx,cy,w,h,visible`, one row per frame, box
//!   corner and size in pixels, `visible` as 0/1.
//! * `meta.txt`: `key=value` lines (`angle`, `velocity`, `seed`,
//!   `occlusion_rate`, `mm_per_px`).

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::harness::synth::{generate, GenConfig, SequenceMeta, SequenceSample};
use crate::motion::BoundingBox;
use crate::tensor::Tensor;

const FRAMES_MAGIC: &[u8; 8] = b"SSMXSEQ1";
pub const GT_HEADER: &str = "frame_idx,cx,cy,w,h,visible";

pub fn write_sequence(dir: &Path, seq: &SequenceSample) -> Result<()> {
    fs::create_dir_all(dir)?;
    let (h, w) = seq.frame_size();
    let count = u32::try_from(seq.len()).map_err(|_| Error::Format("too many frames".into()))?;
    let mut f = BufWriter::new(fs::File::create(dir.join("frames.bin"))?);
    f.write_all(FRAMES_MAGIC)?;
    for v in [count, h as u32, w as u32] {
        f.write_all(&v.to_le_bytes())?;
    }
    for frame in &seq.frames {
        for v in frame.data() {
            f.write_all(&v.to_le_bytes())?;
        }
    }
    f.flush()?;

    let mut gt = String::from(GT_HEADER);
    gt.push('\n');
    for (i, (b, vis)) in seq.gt_boxes.iter().zip(&seq.visibility).enumerate() {
        gt.push_str(&format!("{i},{},{},{},{},{}\n", b.cx, b.cy, b.w, b.h, u8::from(*vis)));
    }
    fs::write(dir.join("gt.csv"), gt)?;

    let m = &seq.meta;
    let meta = format!(
        "angle={}\nvelocity={}\nseed={}\nocclusion_rate={}\nmm_per_px={}\n",
        m.angle_deg, m.velocity, m.seed, m.occlusion_rate, m.mm_per_px
    );
    fs::write(dir.join("meta.txt"), meta)?;
    Ok(())
}

/// Parses `key=value` lines, skipping blanks and `#` comments.
pub fn parse_key_values(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {line:?}", n + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub fn read_sequence(dir: &Path) -> Result<SequenceSample> {
    let bad = |m: String| Error::Format(format!("{}: {m}", dir.display()));
    let mut bytes = Vec::new();
    fs::File::open(dir.join("frames.bin"))?.read_to_end(&mut bytes)?;
    if bytes.len() < 20 || &bytes[..8] != FRAMES_MAGIC {
        return Err(bad("frames.bin lacks the SSMXSEQ1 header".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().expect("4 bytes")) as usize;
    let (count, h, w) = (word(0), word(1), word(2));
    let body = &bytes[20..];
    if body.len() != 4 * count * h * w {
        return Err(bad(format!(
            "frames.bin holds {} bytes, header implies {}",
            body.len(),
            4 * count * h * w
        )));
    }
    let frames = body
        .chunks_exact(4 * h * w)
        .map(|chunk| {
            let data = chunk
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            Tensor::new(&[1, h, w], data)
        })
        .collect::<Result<Vec<_>>>()?;

    let gt = fs::read_to_string(dir.join("gt.csv"))?;
    let mut lines = gt.lines();
    if lines.next().map(str::trim) != Some(GT_HEADER) {
        return Err(bad(format!("gt.csv must start with {GT_HEADER:?}")));
    }
    let mut gt_boxes = Vec::new();
    let mut visibility = Vec::new();
    for line in lines.filter(|l| !l.trim().is_empty()) {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 6 {
            return Err(bad(format!("malformed gt row {line:?}")));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad(format!("bad number {s:?} in {line:?}")));
        if f[0].parse::<usize>().ok() != Some(gt_boxes.len()) {
            return Err(bad(format!("gt rows out of order at {line:?}")));
        }
        gt_boxes.push(BoundingBox::new(num(f[3])?, num(f[4])?, num(f[1])?, num(f[2])?)?);
        visibility.push(match f[5] {
            "1" => true,
            "0" => false,
            v => return Err(bad(format!("visible must be 0 or 1, got {v:?}"))),
        });
    }
    if gt_boxes.len() != frames.len() {
        return Err(bad(format!("{} gt rows for {} frames", gt_boxes.len(), frames.len())));
    }

    let meta_kv = parse_key_values(&fs::read_to_string(dir.join("meta.txt"))?)?;
    let get = |k: &str| -> Result<&str> {
        meta_kv
            .iter()
            .find(|(key, _)| key == k)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| bad(format!("meta.txt lacks {k}")))
    };
    let num = |k: &str| -> Result<f64> { get(k)?.parse().map_err(|_| bad(format!("meta {k} is not a number"))) };
    let meta = SequenceMeta {
        angle_deg: num("angle")?,
        velocity: num("velocity")?,
        seed: get("seed")?.parse().map_err(|_| bad("meta seed is not an integer".into()))?,
        occlusion_rate: num("occlusion_rate")?,
        mm_per_px: num("mm_per_px")?,
    };
    Ok(SequenceSample {
        frames,
        gt_boxes,
        visibility,
        meta,
    })
}

/// Sequence directories directly under `root`, sorted by name.
pub fn list_sequences(root: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("frames.bin").is_file())
        .collect();
    dirs.sort();
    Ok(dirs)
}

/// Indexed access to sequences without holding them all in memory.
pub trait SequenceSource {
    fn len(&self) -> usize;

    fn get(&self, index: usize) -> Result<SequenceSample>;

    fn name(&self, index: usize) -> String {
        format!("seq_{index:04}")
    }

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Sequences stored on disk.
#[derive(Clone, Debug)]
pub struct DiskSource {
    pub dirs: Vec<PathBuf>,
}

impl DiskSource {
    pub fn open(root: &Path) -> Result<Self> {
        Ok(Self {
            dirs: list_sequences(root)?,
        })
    }
}

impl SequenceSource for DiskSource {
    fn len(&self) -> usize {
        self.dirs.len()
    }

    fn get(&self, index: usize) -> Result<SequenceSample> {
        read_sequence(&self.dirs[index])
    }

    fn name(&self, index: usize) -> String {
        self.dirs[index]
            .file_name()
            .map_or_else(|| index.to_string(), |n| n.to_string_lossy().into_owned())
    }
}

/// Sequences generated on demand.
#[derive(Clone, Debug)]
pub struct SyntheticSource {
    pub configs: Vec<(GenConfig, u64)>,
}

impl SequenceSource for SyntheticSource {
    fn len(&self) -> usize {
        self.configs.len()
    }

    fn get(&self, index: usize) -> Result<SequenceSample> {
        let (cfg, seed) = &self.configs[index];
        generate(cfg, *seed)
    }
}

/// Sequences already in memory.
#[derive(Clone, Debug, Default)]
pub struct MemorySource {
    pub sequences: Vec<SequenceSample>,
}

impl SequenceSource for MemorySource {
    fn len(&self) -> usize {
        self.sequences.len()
    }

    fn get(&self, index: usize) -> Result<SequenceSample> {
        Ok(self.sequences[index].clone())
    }
}

/// Writes `source` as `root/seq_XXXX` directories.
pub fn write_dataset(root: &Path, source: &dyn SequenceSource) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(root)?;
    (0..source.len())
        .map(|i| {
            let dir = root.join(format!("seq_{i:04}"));
            write_sequence(&dir, &source.get(i)?)?;
            Ok(dir)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = GenConfig {
            height: 32,
            width: 48,
            frames: 6,
            occlusion_rate: 0.3,
            ..GenConfig::default()
        };
        let seq = generate(&cfg, 5).unwrap();
        write_sequence(tmp.path(), &seq).unwrap();
        assert_eq!(read_sequence(tmp.path()).unwrap(), seq);
    }

    #[test]
    fn key_values() {
        let kv = parse_key_values("# c\n a = 1\n\nb=x=y\n").unwrap();
        assert_eq!(kv, vec![("a".into(), "1".into()), ("b".into(), "x=y".into())]);
        assert!(parse_key_values("nope").is_err());
    }

    #[test]
    fn rejects_bad_magic() {
        let tmp = tempfile::tempdir().unwrap();
        fs::write(tmp.path().join("frames.bin"), b"XXXXXXXX\0\0\0\0\0\0\0\0\0\0\0\0").unwrap();
        assert!(matches!(read_sequence(tmp.path()), Err(Error::Format(_))));
    }
}
