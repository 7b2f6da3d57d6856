//! Append-only JSONL event log and content-addressed image blobs.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use drscreen::analytics::SecondLevel;
use drscreen::enhancement::FundusGeometry;
use drscreen::{Laterality, StudyProposal};
use image::RgbImage;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("store i/o on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("corrupt event log at line {line}: {reason}")]
    Corrupt { line: usize, reason: String },
    #[error("sequence number {found} after {previous} at line {line}")]
    Sequence { line: usize, previous: u64, found: u64 },
    #[error("blob {0} not found")]
    MissingBlob(String),
    #[error("cannot encode or decode image: {0}")]
    Image(#[from] image::ImageError),
    #[error("cannot serialize event: {0}")]
    Serialize(#[from] serde_json::Error),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRef {
    pub image_id: String,
    pub acquisition_index: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_tag: Option<String>,
    pub width: u32,
    pub height: u32,
    /// sha256 of the stored PNG.
    pub blob: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EyeRef {
    pub eye_id: String,
    pub laterality: Laterality,
    pub images: Vec<ImageRef>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyRegistered {
    pub study_id: String,
    pub received_at: DateTime<Utc>,
    /// Hash of everything submitted except the arrival time.
    pub content_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gp_id: Option<String>,
    #[serde(default)]
    pub pressure_referral: bool,
    pub eyes: Vec<EyeRef>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposalComputed {
    pub study_id: String,
    pub computed_at: DateTime<Utc>,
    pub backend: String,
    pub proposal: StudyProposal,
    /// Enhanced image blob per source image id.
    pub enhanced: BTreeMap<String, String>,
    pub geometry: BTreeMap<String, FundusGeometry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionRecorded {
    pub study_id: String,
    pub decided_at: DateTime<Utc>,
    pub gp_id: String,
    pub refer: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub second_level: Option<SecondLevel>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload", rename_all = "snake_case")]
pub enum EventBody {
    StudyRegistered(StudyRegistered),
    ProposalComputed(ProposalComputed),
    DecisionRecorded(DecisionRecorded),
}

impl EventBody {
    pub fn study_id(&self) -> &str {
        match self {
            EventBody::StudyRegistered(e) => &e.study_id,
            EventBody::ProposalComputed(e) => &e.study_id,
            EventBody::DecisionRecorded(e) => &e.study_id,
        }
    }
}

/// One line of the event log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoreEvent {
    pub sequence_number: u64,
    #[serde(flatten)]
    pub body: EventBody,
}

/// Result of reading a log: the intact events plus the byte length they span.
#[derive(Debug)]
pub struct LogContents {
    pub events: Vec<StoreEvent>,
    pub valid_len: u64,
    /// Set when a trailing line was incomplete or unparseable.
    pub discarded_tail: bool,
}

/// Parses a log. Only the final line may be damaged; it is reported and left
/// out. Damage anywhere else is an error.
pub fn read_log(path: &Path) -> Result<LogContents, StoreError> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Ok(LogContents { events: Vec::new(), valid_len: 0, discarded_tail: false })
        }
        Err(e) => return Err(io_err(path)(e)),
    };
    let mut reader = BufReader::new(file);
    let mut events: Vec<StoreEvent> = Vec::new();
    let mut valid_len = 0u64;
    let mut buf = Vec::new();
    let mut line_no = 0;
    let mut pending_error: Option<StoreError> = None;
    loop {
        buf.clear();
        let n = reader.read_until(b'\n', &mut buf).map_err(io_err(path))?;
        if n == 0 {
            break;
        }
        line_no += 1;
        if let Some(err) = pending_error.take() {
            // A damaged line followed by more data is not a torn append.
            return Err(err);
        }
        let complete = buf.last() == Some(&b'\n');
        let parsed = std::str::from_utf8(&buf)
            .map_err(|e| e.to_string())
            .and_then(|s| serde_json::from_str::<StoreEvent>(s.trim_end()).map_err(|e| e.to_string()));
        match parsed {
            Ok(ev) if complete => {
                if let Some(prev) = events.last() {
                    if ev.sequence_number <= prev.sequence_number {
                        return Err(StoreError::Sequence {
                            line: line_no,
                            previous: prev.sequence_number,
                            found: ev.sequence_number,
                        });
                    }
                }
                valid_len += n as u64;
                events.push(ev);
            }
            Ok(_) => pending_error = Some(StoreError::Corrupt { line: line_no, reason: "missing newline".into() }),
            Err(reason) => pending_error = Some(StoreError::Corrupt { line: line_no, reason }),
        }
    }
    let discarded_tail = pending_error.is_some();
    Ok(LogContents { events, valid_len, discarded_tail })
}

/// Single appender over the log file.
#[derive(Debug)]
pub struct EventLog {
    path: PathBuf,
    file: File,
    last_sequence: u64,
}

impl EventLog {
    /// Opens or creates the log, truncating a torn trailing line.
    pub fn open(path: &Path) -> Result<(EventLog, Vec<StoreEvent>), StoreError> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        let contents = read_log(path)?;
        let mut file =
            OpenOptions::new().create(true).read(true).write(true).truncate(false).open(path).map_err(io_err(path))?;
        if contents.discarded_tail {
            tracing::warn!(path = %path.display(), "discarding incomplete trailing event");
            file.set_len(contents.valid_len).map_err(io_err(path))?;
            file.sync_all().map_err(io_err(path))?;
        }
        file.seek(SeekFrom::End(0)).map_err(io_err(path))?;
        let last_sequence = contents.events.last().map_or(0, |e| e.sequence_number);
        Ok((EventLog { path: path.to_path_buf(), file, last_sequence }, contents.events))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn last_sequence(&self) -> u64 {
        self.last_sequence
    }

    /// Writes one event as a single line and syncs it to disk.
    pub fn append(&mut self, body: EventBody) -> Result<StoreEvent, StoreError> {
        let event = StoreEvent { sequence_number: self.last_sequence + 1, body };
        let mut line = serde_json::to_vec(&event)?;
        line.push(b'\n');
        self.file.write_all(&line).map_err(io_err(&self.path))?;
        self.file.sync_data().map_err(io_err(&self.path))?;
        self.last_sequence = event.sequence_number;
        Ok(event)
    }
}

/// PNG files named by the sha256 of their bytes.
#[derive(Debug, Clone)]
pub struct BlobStore {
    dir: PathBuf,
}

impl BlobStore {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        Ok(BlobStore { dir })
    }

    /// Blob directory that sits next to a log file.
    pub fn beside(log_path: &Path) -> Result<Self, StoreError> {
        let mut name = log_path.file_name().unwrap_or_default().to_os_string();
        name.push(".blobs");
        Self::open(log_path.with_file_name(name))
    }

    fn path_of(&self, hash: &str) -> PathBuf {
        self.dir.join(format!("{hash}.png"))
    }

    pub fn put_png(&self, image: &RgbImage) -> Result<String, StoreError> {
        let bytes = encode_png(image)?;
        let hash = hex::encode(Sha256::digest(&bytes));
        let path = self.path_of(&hash);
        if !path.exists() {
            let tmp = self.dir.join(format!("{hash}.tmp"));
            std::fs::write(&tmp, &bytes).map_err(io_err(&tmp))?;
            std::fs::rename(&tmp, &path).map_err(io_err(&path))?;
        }
        Ok(hash)
    }

    pub fn get(&self, hash: &str) -> Result<Vec<u8>, StoreError> {
        if hash.len() != 64 || !hash.bytes().all(|b| b.is_ascii_hexdigit()) {
            return Err(StoreError::MissingBlob(hash.to_string()));
        }
        match std::fs::read(self.path_of(hash)) {
            Ok(b) => Ok(b),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(StoreError::MissingBlob(hash.to_string())),
            Err(e) => Err(io_err(&self.path_of(hash))(e)),
        }
    }

    pub fn get_image(&self, hash: &str) -> Result<RgbImage, StoreError> {
        Ok(image::load_from_memory(&self.get(hash)?)?.to_rgb8())
    }
}

pub fn encode_png(image: &RgbImage) -> Result<Vec<u8>, StoreError> {
    let mut out = std::io::Cursor::new(Vec::new());
    image.write_to(&mut out, image::ImageFormat::Png)?;
    Ok(out.into_inner())
}
