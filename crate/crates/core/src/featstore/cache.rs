use std::collections::HashSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::Path;

use super::{CacheError, FrameFeatureMatrix};

pub const MAGIC: &[u8; 4] = b"CVAF";
pub const CACHE_VERSION: u32 = 1;

const FIXED_HEADER: u64 = 4 + 4 + 4 + 8;

struct IndexEntry {
    id: String,
    offset: u64,
    n_frames: u32,
}

fn record_bytes(n_frames: u64, dim: u64) -> u64 {
    n_frames * 4 + n_frames * dim * 4
}

/// Feature payload of `n_videos` videos with `n_frames` rows of width `dim`
/// at 32-bit precision (timestamps and index excluded).
pub fn payload_bytes(n_videos: u64, n_frames: u64, dim: u64) -> u64 {
    n_videos * n_frames * dim * 4
}

/// Writes all matrices into one file. Records are ordered by video id, so
/// identical input always yields identical bytes.
pub fn write_cache(path: impl AsRef<Path>, matrices: &[FrameFeatureMatrix]) -> Result<(), CacheError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_cache_to(&mut w, matrices)?;
    w.flush()?;
    Ok(())
}

/// [`write_cache`] into any writer.
pub fn write_cache_to(mut w: impl Write, matrices: &[FrameFeatureMatrix]) -> Result<(), CacheError> {
    let dim = matrices.first().map_or(0, |m| m.dim);
    let mut seen = HashSet::new();
    for m in matrices {
        m.validate()?;
        if m.dim != dim {
            return Err(CacheError::DimMismatch { id: m.video_id.clone(), expected: dim, got: m.dim });
        }
        if !seen.insert(m.video_id.as_str()) {
            return Err(CacheError::DuplicateId(m.video_id.clone()));
        }
        if m.video_id.len() > u16::MAX as usize {
            return Err(CacheError::Invalid { id: m.video_id.clone(), reason: "id longer than 65535 bytes".into() });
        }
    }
    let mut order: Vec<&FrameFeatureMatrix> = matrices.iter().collect();
    order.sort_by(|a, b| a.video_id.cmp(&b.video_id));

    let index_bytes: u64 = order.iter().map(|m| 2 + m.video_id.len() as u64 + 8 + 4).sum();
    let mut offset = FIXED_HEADER + index_bytes;

    w.write_all(MAGIC)?;
    w.write_all(&CACHE_VERSION.to_le_bytes())?;
    w.write_all(&(dim as u32).to_le_bytes())?;
    w.write_all(&(order.len() as u64).to_le_bytes())?;
    for m in &order {
        w.write_all(&(m.video_id.len() as u16).to_le_bytes())?;
        w.write_all(m.video_id.as_bytes())?;
        w.write_all(&offset.to_le_bytes())?;
        w.write_all(&(m.n_frames() as u32).to_le_bytes())?;
        offset += record_bytes(m.n_frames() as u64, dim as u64);
    }
    for m in &order {
        for t in &m.timestamps {
            w.write_all(&t.to_le_bytes())?;
        }
        for v in &m.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Random-access reader. Opening parses only the header and index.
pub struct CacheReader {
    file: BufReader<File>,
    dim: usize,
    index: Vec<IndexEntry>,
    file_len: u64,
    bytes_read: u64,
}

fn read_exact_counted(r: &mut impl Read, buf: &mut [u8], counter: &mut u64, what: &str) -> Result<(), CacheError> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => CacheError::Truncated(format!("ended inside {what}")),
        _ => CacheError::Io(e),
    })?;
    *counter += buf.len() as u64;
    Ok(())
}

impl CacheReader {
    pub fn open(path: impl AsRef<Path>) -> Result<Self, CacheError> {
        let file = File::open(path)?;
        let file_len = file.metadata()?.len();
        let mut file = BufReader::new(file);
        let mut n = 0u64;
        let mut magic = [0u8; 4];
        read_exact_counted(&mut file, &mut magic, &mut n, "magic")?;
        if &magic != MAGIC {
            return Err(CacheError::BadMagic);
        }
        let mut b4 = [0u8; 4];
        let mut b8 = [0u8; 8];
        let mut b2 = [0u8; 2];
        read_exact_counted(&mut file, &mut b4, &mut n, "header")?;
        let version = u32::from_le_bytes(b4);
        if version != CACHE_VERSION {
            return Err(CacheError::UnsupportedVersion(version));
        }
        read_exact_counted(&mut file, &mut b4, &mut n, "header")?;
        let dim = u32::from_le_bytes(b4) as usize;
        read_exact_counted(&mut file, &mut b8, &mut n, "header")?;
        let count = u64::from_le_bytes(b8);
        // every index entry takes at least 14 bytes
        if count.saturating_mul(14) > file_len {
            return Err(CacheError::Truncated(format!("{count} index entries cannot fit in {file_len} bytes")));
        }
        let mut index = Vec::with_capacity(count as usize);
        for _ in 0..count {
            read_exact_counted(&mut file, &mut b2, &mut n, "index")?;
            let mut id = vec![0u8; u16::from_le_bytes(b2) as usize];
            read_exact_counted(&mut file, &mut id, &mut n, "index")?;
            let id = String::from_utf8(id).map_err(|_| CacheError::Corrupt("video id is not utf-8".into()))?;
            read_exact_counted(&mut file, &mut b8, &mut n, "index")?;
            let offset = u64::from_le_bytes(b8);
            read_exact_counted(&mut file, &mut b4, &mut n, "index")?;
            let n_frames = u32::from_le_bytes(b4);
            index.push(IndexEntry { id, offset, n_frames });
        }
        for pair in index.windows(2) {
            if pair[0].id >= pair[1].id {
                return Err(CacheError::Corrupt("index is not sorted by video id".into()));
            }
        }
        for e in &index {
            if e.n_frames == 0 {
                return Err(CacheError::Corrupt(format!("video {:?} has no frames", e.id)));
            }
            let end = e.offset.checked_add(record_bytes(e.n_frames as u64, dim as u64));
            if e.offset < n || end.map_or(true, |end| end > file_len) {
                return Err(CacheError::Truncated(format!("record {:?} extends past end of file", e.id)));
            }
        }
        Ok(Self { file, dim, index, file_len, bytes_read: n })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn file_len(&self) -> u64 {
        self.file_len
    }

    /// Bytes consumed from the file so far (header, index and records).
    pub fn bytes_read(&self) -> u64 {
        self.bytes_read
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.index.iter().map(|e| e.id.as_str())
    }

    pub fn frame_counts(&self) -> impl Iterator<Item = usize> + '_ {
        self.index.iter().map(|e| e.n_frames as usize)
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.binary_search_by(|e| e.id.as_str().cmp(id)).is_ok()
    }

    pub fn read(&mut self, id: &str) -> Result<FrameFeatureMatrix, CacheError> {
        let pos = self
            .index
            .binary_search_by(|e| e.id.as_str().cmp(id))
            .map_err(|_| CacheError::MissingId(id.to_string()))?;
        let (offset, n) = (self.index[pos].offset, self.index[pos].n_frames as usize);
        self.file.seek(SeekFrom::Start(offset))?;
        let mut buf = vec![0u8; record_bytes(n as u64, self.dim as u64) as usize];
        read_exact_counted(&mut self.file, &mut buf, &mut self.bytes_read, "record")?;
        let (ts, vals) = buf.split_at(n * 4);
        let timestamps = ts.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect();
        let data = vals.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        let m = FrameFeatureMatrix { video_id: id.to_string(), dim: self.dim, timestamps, data };
        m.validate().map_err(|e| CacheError::Corrupt(e.to_string()))?;
        Ok(m)
    }
}

/// Reads the requested videos (in request order), or every video in index order.
pub fn read_cache(path: impl AsRef<Path>, ids: Option<&[String]>) -> Result<Vec<FrameFeatureMatrix>, CacheError> {
    let mut reader = CacheReader::open(path)?;
    let wanted: Vec<String> = match ids {
        Some(ids) => ids.to_vec(),
        None => reader.ids().map(str::to_string).collect(),
    };
    wanted.iter().map(|id| reader.read(id)).collect()
}

/// Size summary of a cache file.
#[derive(Clone, Debug, PartialEq)]
pub struct CacheStats {
    pub videos: usize,
    pub dim: usize,
    pub bytes: u64,
    pub bytes_per_video: Option<f64>,
    /// Raw RGB frame bytes (`N·H·W·3`) over cached feature bytes (`N·D·4`).
    pub ratio: Option<f64>,
}

impl CacheStats {
    pub const CSV_HEADER: &'static str = "videos,dim,bytes,bytes_per_video,ratio";

    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(|| "null".to_string(), |v| format!("{v}"));
        format!("{},{},{},{},{}", self.videos, self.dim, self.bytes, opt(self.bytes_per_video), opt(self.ratio))
    }

    pub fn to_csv(&self) -> String {
        format!("{}\n{}\n", Self::CSV_HEADER, self.csv_row())
    }
}

/// `raw_hw` is the frame resolution assumed for the raw-frame estimate.
pub fn cache_stats(path: impl AsRef<Path>, raw_hw: (usize, usize)) -> Result<CacheStats, CacheError> {
    let reader = CacheReader::open(path)?;
    let frames: u64 = reader.frame_counts().map(|n| n as u64).sum();
    let videos = reader.len();
    let feature_bytes = frames * reader.dim() as u64 * 4;
    let raw = frames * (raw_hw.0 * raw_hw.1 * 3) as u64;
    Ok(CacheStats {
        videos,
        dim: reader.dim(),
        bytes: reader.file_len(),
        bytes_per_video: (videos > 0).then(|| reader.file_len() as f64 / videos as f64),
        ratio: (feature_bytes > 0).then(|| raw as f64 / feature_bytes as f64),
    })
}
