//! The `CFDS` dataset container.
//!
//! Little-endian layout:
//!
//! ```text
//! magic        4 bytes  "CFDS"
//! version      u16      1
//! classes      u8       number of classes, then per class: u8 length + UTF-8 name
//! channels     u8       3
//! height       u32
//! width        u32
//! count        u32      number of example records
//! records      count × (u8 label, channels·height·width f32 pixels)
//! source ids   count × (u16 length + UTF-8)
//! checksum     u64      CRC-64/XZ of every preceding byte
//! ```

use std::fs::{self, File, OpenOptions};
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use super::{validate_example, DataError, Dataset, Example, LabelMap, Result};
use crate::checksum::{HashingReader, CRC64};
use crate::tensor::Tensor;

pub const DATASET_MAGIC: [u8; 4] = *b"CFDS";
pub const DATASET_VERSION: u16 = 1;
const CHANNELS: u8 = 3;

/// Streams examples into a dataset file. The file only appears at its final
/// path once [`DatasetWriter::finish`] succeeds.
pub struct DatasetWriter {
    path: PathBuf,
    tmp_path: PathBuf,
    out: Option<BufWriter<File>>,
    count_offset: u64,
    classes: usize,
    image_size: (usize, usize),
    source_ids: Vec<String>,
    finished: bool,
}

impl DatasetWriter {
    pub fn create(path: &Path, label_map: &LabelMap, image_size: (usize, usize)) -> Result<Self> {
        let tmp_path = tmp_sibling(path);
        let file = OpenOptions::new()
            .read(true)
            .write(true)
            .create(true)
            .truncate(true)
            .open(&tmp_path)
            .map_err(DataError::io(&tmp_path))?;
        let mut header = Vec::new();
        header.extend_from_slice(&DATASET_MAGIC);
        header.extend_from_slice(&DATASET_VERSION.to_le_bytes());
        header.push(label_map.len() as u8);
        for name in label_map.names() {
            header.push(name.len() as u8);
            header.extend_from_slice(name.as_bytes());
        }
        header.push(CHANNELS);
        header.extend_from_slice(&(image_size.0 as u32).to_le_bytes());
        header.extend_from_slice(&(image_size.1 as u32).to_le_bytes());
        let count_offset = header.len() as u64;
        header.extend_from_slice(&0u32.to_le_bytes());

        let mut writer = Self {
            path: path.to_path_buf(),
            tmp_path,
            out: Some(BufWriter::new(file)),
            count_offset,
            classes: label_map.len(),
            image_size,
            source_ids: Vec::new(),
            finished: false,
        };
        writer.write(&header)?;
        Ok(writer)
    }

    fn write(&mut self, bytes: &[u8]) -> Result<()> {
        let out = self.out.as_mut().expect("writer is open until finish");
        out.write_all(bytes).map_err(DataError::io(&self.tmp_path))
    }

    pub fn push(&mut self, example: &Example) -> Result<()> {
        validate_example(example, self.classes, self.image_size.0, self.image_size.1)?;
        if example.source_id.len() > u16::MAX as usize {
            return Err(DataError::Validation("source id longer than 65535 bytes".into()));
        }
        let mut record = Vec::with_capacity(1 + 4 * example.image.numel());
        record.push(example.label as u8);
        for v in example.image.data() {
            record.extend_from_slice(&v.to_le_bytes());
        }
        self.write(&record)?;
        self.source_ids.push(example.source_id.clone());
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.source_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source_ids.is_empty()
    }

    /// Writes the trailer and moves the file into place; returns the checksum.
    pub fn finish(mut self) -> Result<u64> {
        let ids = std::mem::take(&mut self.source_ids);
        let mut table = Vec::new();
        for id in &ids {
            table.extend_from_slice(&(id.len() as u16).to_le_bytes());
            table.extend_from_slice(id.as_bytes());
        }
        self.write(&table)?;
        let tmp = self.tmp_path.clone();
        let io = |e| DataError::Io {
            path: tmp.clone(),
            source: e,
        };
        let mut file = self.out.take().unwrap().into_inner().map_err(|e| io(e.into_error()))?;
        file.seek(SeekFrom::Start(self.count_offset)).map_err(io)?;
        file.write_all(&(ids.len() as u32).to_le_bytes()).map_err(io)?;
        file.seek(SeekFrom::Start(0)).map_err(io)?;

        let mut digest = CRC64.digest();
        let mut reader = BufReader::new(&file);
        let mut buf = vec![0u8; 1 << 16];
        loop {
            let n = reader.read(&mut buf).map_err(io)?;
            if n == 0 {
                break;
            }
            digest.update(&buf[..n]);
        }
        drop(reader);
        let checksum = digest.finalize();
        file.seek(SeekFrom::End(0)).map_err(io)?;
        file.write_all(&checksum.to_le_bytes()).map_err(io)?;
        file.sync_all().map_err(io)?;
        drop(file);
        fs::rename(&self.tmp_path, &self.path).map_err(DataError::io(&self.path))?;
        self.finished = true;
        Ok(checksum)
    }
}

impl Drop for DatasetWriter {
    fn drop(&mut self) {
        if !self.finished {
            self.out = None;
            let _ = fs::remove_file(&self.tmp_path);
        }
    }
}

fn tmp_sibling(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".partial");
    path.with_file_name(name)
}

/// Writes an in-memory dataset; returns the file checksum.
pub fn write_dataset(dataset: &Dataset, path: &Path) -> Result<u64> {
    let mut writer = DatasetWriter::create(path, &dataset.label_map, dataset.image_size)?;
    for e in &dataset.examples {
        writer.push(e)?;
    }
    writer.finish()
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            DataError::Truncated
        } else {
            DataError::Format(e.to_string())
        }
    })
}

fn read_u8<R: Read>(r: &mut R) -> Result<u8> {
    let mut b = [0u8; 1];
    read_exact(r, &mut b)?;
    Ok(b[0])
}

fn read_u16<R: Read>(r: &mut R) -> Result<u16> {
    let mut b = [0u8; 2];
    read_exact(r, &mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_string<R: Read>(r: &mut R, len: usize) -> Result<String> {
    let mut b = vec![0u8; len];
    read_exact(r, &mut b)?;
    String::from_utf8(b).map_err(|_| DataError::Format("name is not valid UTF-8".into()))
}

/// Loads and fully validates a dataset file. The checksum is verified before
/// any content is interpreted, so any corrupted byte reports as a mismatch.
/// Also returns the stored checksum.
pub fn read_dataset(path: &Path) -> Result<(Dataset, u64)> {
    let file = File::open(path).map_err(DataError::io(path))?;
    let len = file.metadata().map_err(DataError::io(path))?.len();
    if len < 8 + DATASET_MAGIC.len() as u64 {
        return Err(DataError::Truncated);
    }
    let body_len = len - 8;

    let mut hashing = HashingReader::new(BufReader::new(file).take(body_len));
    std::io::copy(&mut hashing, &mut std::io::sink()).map_err(DataError::io(path))?;
    let (rest, computed) = hashing.finish();
    let mut rest = rest.into_inner();
    let mut trailer = [0u8; 8];
    read_exact(&mut rest, &mut trailer)?;
    let stored = u64::from_le_bytes(trailer);
    if stored != computed {
        return Err(DataError::ChecksumMismatch { stored, computed });
    }

    let file = File::open(path).map_err(DataError::io(path))?;
    let dataset = parse_body(BufReader::new(file).take(body_len), body_len).map_err(|e| match e {
        // the body is checksummed, so running short means the header lies
        DataError::Truncated => DataError::Format("records overrun the declared layout".into()),
        e => e,
    })?;
    Ok((dataset, stored))
}

fn parse_body<R: Read>(mut r: std::io::Take<R>, body_len: u64) -> Result<Dataset> {
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic)?;
    if magic != DATASET_MAGIC {
        return Err(DataError::Format("bad magic (expected CFDS)".into()));
    }
    let version = read_u16(&mut r)?;
    if version != DATASET_VERSION {
        return Err(DataError::Version(version));
    }
    let classes = read_u8(&mut r)? as usize;
    let mut names = Vec::with_capacity(classes);
    for _ in 0..classes {
        let n = read_u8(&mut r)? as usize;
        names.push(read_string(&mut r, n)?);
    }
    let label_map = LabelMap::new(names)?;
    let channels = read_u8(&mut r)?;
    if channels != CHANNELS {
        return Err(DataError::Format(format!("{channels} channels, expected 3")));
    }
    let h = read_u32(&mut r)? as usize;
    let w = read_u32(&mut r)? as usize;
    if h == 0 || w == 0 {
        return Err(DataError::Format("zero image extent".into()));
    }
    let count = read_u32(&mut r)? as usize;
    let pixels = 3 * h * w;
    let record_len = 1 + 4 * pixels as u64;
    if (count as u64).saturating_mul(record_len) > body_len {
        return Err(DataError::Format(format!("declared count {count} exceeds file size")));
    }

    let mut examples = Vec::with_capacity(count);
    let mut raw = vec![0u8; 4 * pixels];
    for i in 0..count {
        let label = read_u8(&mut r)? as usize;
        read_exact(&mut r, &mut raw)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        examples.push(Example {
            image: Tensor::from_vec(&[3, h, w], data)?,
            label,
            source_id: format!("#{i}"),
        });
    }
    for e in examples.iter_mut() {
        let n = read_u16(&mut r)? as usize;
        e.source_id = read_string(&mut r, n)?;
    }
    if r.limit() != 0 {
        return Err(DataError::Format(format!(
            "{} unexpected bytes after the declared {count} records",
            r.limit()
        )));
    }

    let dataset = Dataset {
        label_map,
        image_size: (h, w),
        examples,
    };
    dataset.validate()?;
    Ok(dataset)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_dataset() -> Dataset {
        let examples = (0..6)
            .map(|i| Example {
                image: Tensor::from_vec(&[3, 2, 3], (0..18).map(|p| ((p + i) % 5) as f32 / 4.0).collect())
                    .unwrap(),
                label: i % 4,
                source_id: format!("class{}/img{i}.png", i % 4),
            })
            .collect();
        Dataset {
            label_map: LabelMap::default(),
            image_size: (2, 3),
            examples,
        }
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.cfds");
        let b = dir.path().join("b.cfds");
        let ds = tiny_dataset();
        let sum = write_dataset(&ds, &a).unwrap();
        let (loaded, stored) = read_dataset(&a).unwrap();
        assert_eq!(loaded, ds);
        assert_eq!(stored, sum);
        write_dataset(&loaded, &b).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
        assert!(!dir.path().join("a.cfds.partial").exists());
    }

    #[test]
    fn header_layout() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.cfds");
        write_dataset(&tiny_dataset(), &p).unwrap();
        let bytes = fs::read(&p).unwrap();
        assert_eq!(&bytes[..4], b"CFDS");
        assert_eq!(u16::from_le_bytes([bytes[4], bytes[5]]), 1);
        assert_eq!(bytes[6], 4);
        assert_eq!(&bytes[7..15], b"\x07healthy");
    }

    #[test]
    fn every_corrupted_byte_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.cfds");
        write_dataset(&tiny_dataset(), &p).unwrap();
        let good = fs::read(&p).unwrap();
        for i in (0..good.len()).step_by(7) {
            let mut bad = good.clone();
            bad[i] ^= 0x20;
            fs::write(&p, &bad).unwrap();
            assert!(
                matches!(read_dataset(&p), Err(DataError::ChecksumMismatch { .. })),
                "byte {i}"
            );
        }
    }

    #[test]
    fn truncation_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.cfds");
        write_dataset(&tiny_dataset(), &p).unwrap();
        let good = fs::read(&p).unwrap();
        fs::write(&p, &good[..good.len() - 20]).unwrap();
        assert!(read_dataset(&p).is_err());
        fs::write(&p, &good[..5]).unwrap();
        assert!(matches!(read_dataset(&p), Err(DataError::Truncated)));
    }

    #[test]
    fn count_mismatch_with_valid_checksum_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.cfds");
        write_dataset(&tiny_dataset(), &p).unwrap();
        let mut bytes = fs::read(&p).unwrap();
        bytes.truncate(bytes.len() - 8);
        // count lives right after magic, version, label map, channels, h, w
        let count_at = 4 + 2 + 1 + (1 + 7) + (1 + 6) + (1 + 10) + (1 + 9) + 1 + 4 + 4;
        assert_eq!(u32::from_le_bytes(bytes[count_at..count_at + 4].try_into().unwrap()), 6);
        bytes[count_at] = 5;
        let sum = crate::checksum::crc64(&bytes);
        bytes.extend_from_slice(&sum.to_le_bytes());
        fs::write(&p, &bytes).unwrap();
        assert!(matches!(read_dataset(&p), Err(DataError::Format(_))));
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.cfds");
        write_dataset(&tiny_dataset(), &p).unwrap();
        let mut bytes = fs::read(&p).unwrap();
        bytes.truncate(bytes.len() - 8);
        bytes[4] = 9;
        let sum = crate::checksum::crc64(&bytes);
        bytes.extend_from_slice(&sum.to_le_bytes());
        fs::write(&p, &bytes).unwrap();
        assert!(matches!(read_dataset(&p), Err(DataError::Version(9))));
    }

    #[test]
    fn invalid_examples_are_refused_by_the_writer() {
        let dir = tempfile::tempdir().unwrap();
        let mut ds = tiny_dataset();
        ds.examples[2].image.data_mut()[0] = 1.5;
        assert!(write_dataset(&ds, &dir.path().join("x.cfds")).is_err());
        assert!(!dir.path().join("x.cfds").exists());
        assert!(!dir.path().join("x.cfds.partial").exists());
    }
}
