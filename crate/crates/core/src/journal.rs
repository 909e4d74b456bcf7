//! Append-only JSON-lines journal replayed at startup.

use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::marker::PhantomData;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

pub struct Journal<T> {
    path: PathBuf,
    writer: BufWriter<File>,
    _record: PhantomData<fn(T)>,
}

impl<T> std::fmt::Debug for Journal<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Journal").field("path", &self.path).finish()
    }
}

impl<T: Serialize + DeserializeOwned> Journal<T> {
    /// Opens (creating if needed) the journal and returns every record that
    /// parses. A torn final line from a crash is skipped.
    pub fn open(path: impl AsRef<Path>) -> io::Result<(Self, Vec<T>)> {
        let path = path.as_ref().to_path_buf();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        let mut records = Vec::new();
        if path.exists() {
            for line in BufReader::new(File::open(&path)?).lines() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str(&line) {
                    Ok(r) => records.push(r),
                    Err(e) => tracing::warn!(path = %path.display(), error = %e, "skipping journal line"),
                }
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok((
            Self {
                path,
                writer: BufWriter::new(file),
                _record: PhantomData,
            },
            records,
        ))
    }

    /// Buffers one record; call [`Journal::flush`] to make it durable.
    pub fn append(&mut self, record: &T) -> io::Result<()> {
        serde_json::to_writer(&mut self.writer, record)?;
        self.writer.write_all(b"\n")
    }

    pub fn append_flush(&mut self, record: &T) -> io::Result<()> {
        self.append(record)?;
        self.flush()
    }

    pub fn flush(&mut self) -> io::Result<()> {
        self.writer.flush()
    }

    /// Replaces the journal contents with nothing, e.g. after a snapshot.
    pub fn truncate(&mut self) -> io::Result<()> {
        self.writer.flush()?;
        let file = OpenOptions::new().write(true).truncate(true).open(&self.path)?;
        drop(file);
        let file = OpenOptions::new().create(true).append(true).open(&self.path)?;
        self.writer = BufWriter::new(file);
        Ok(())
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn replays_appended_records_and_skips_torn_tail() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("j.jsonl");
        {
            let (mut j, prior) = Journal::<u32>::open(&path).unwrap();
            assert!(prior.is_empty());
            j.append(&1).unwrap();
            j.append_flush(&2).unwrap();
        }
        std::fs::OpenOptions::new()
            .append(true)
            .open(&path)
            .unwrap()
            .write_all(b"3")
            .unwrap();
        std::fs::OpenOptions::new()
            .append(true)
            .open(&path)
            .unwrap()
            .write_all(b"{\"torn")
            .unwrap();
        let (mut j, records) = Journal::<u32>::open(&path).unwrap();
        assert_eq!(records, vec![1, 2]);
        j.truncate().unwrap();
        j.append_flush(&9).unwrap();
        let (_, records) = Journal::<u32>::open(&path).unwrap();
        assert_eq!(records, vec![9]);
    }
}
