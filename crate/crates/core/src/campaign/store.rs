//! On-disk persistence: a JSON-lines event log plus a periodic snapshot.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use super::{Campaign, CampaignError, CampaignState, Clock, Event};

/// Events between snapshots.
pub const DEFAULT_SNAPSHOT_EVERY: usize = 64;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },
    #[error("{0} already exists")]
    AlreadyExists(PathBuf),
    #[error(transparent)]
    Campaign(#[from] CampaignError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io { path: path.to_owned(), source }
}

pub fn read_events(path: &Path) -> Result<Vec<Event>, StoreError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut events = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let event = serde_json::from_str(&line).map_err(|e| StoreError::Parse {
            path: path.to_owned(),
            line: i + 1,
            message: e.to_string(),
        })?;
        events.push(event);
    }
    Ok(events)
}

/// Append `events` as JSON lines and sync the file.
pub fn write_events(path: &Path, events: &[Event]) -> Result<(), StoreError> {
    let file = OpenOptions::new().create(true).append(true).open(path).map_err(io_err(path))?;
    let mut out = BufWriter::new(file);
    for e in events {
        serde_json::to_writer(&mut out, e).map_err(|e| io_err(path)(e.into()))?;
        out.write_all(b"\n").map_err(io_err(path))?;
    }
    let file = out.into_inner().map_err(|e| io_err(path)(e.into_error()))?;
    file.sync_data().map_err(io_err(path))
}

/// A campaign bound to its event log. Mutations go through [`Self::apply`],
/// which appends whatever events the operation produced.
#[derive(Debug)]
pub struct CampaignStore {
    campaign: Campaign,
    log_path: PathBuf,
    persisted: usize,
    snapshot_every: usize,
    last_snapshot: usize,
}

impl CampaignStore {
    pub fn snapshot_path(log_path: &Path) -> PathBuf {
        let mut name = log_path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
        name.push(".snapshot.json");
        log_path.with_file_name(name)
    }

    /// Start a new log for `campaign`; fails if the log already exists.
    pub fn create(log_path: impl Into<PathBuf>, campaign: Campaign) -> Result<Self, StoreError> {
        let log_path = log_path.into();
        if log_path.exists() {
            return Err(StoreError::AlreadyExists(log_path));
        }
        let mut store =
            Self { campaign, log_path, persisted: 0, snapshot_every: DEFAULT_SNAPSHOT_EVERY, last_snapshot: 0 };
        store.flush()?;
        Ok(store)
    }

    /// Load a log, starting from its snapshot when one is present and
    /// consistent with the log.
    pub fn open(log_path: impl Into<PathBuf>, clock: Clock) -> Result<Self, StoreError> {
        let log_path = log_path.into();
        let events = read_events(&log_path)?;
        let snap_path = Self::snapshot_path(&log_path);
        let snapshot: Option<CampaignState> = fs::read_to_string(&snap_path)
            .ok()
            .and_then(|s| serde_json::from_str(&s).ok())
            .filter(|s: &CampaignState| (s.last_seq as usize) < events.len());
        let campaign = match snapshot {
            Some(state) => Campaign::resume(state, events, clock)?,
            None => Campaign::replay(events, clock)?,
        };
        let persisted = campaign.events().len();
        Ok(Self { campaign, log_path, persisted, snapshot_every: DEFAULT_SNAPSHOT_EVERY, last_snapshot: persisted })
    }

    pub fn with_snapshot_every(mut self, n: usize) -> Self {
        self.snapshot_every = n.max(1);
        self
    }

    pub fn campaign(&self) -> &Campaign {
        &self.campaign
    }

    pub fn log_path(&self) -> &Path {
        &self.log_path
    }

    /// Run one mutation and persist its events. Events of a failed operation
    /// are never produced, so the log only grows on success.
    pub fn apply<T>(&mut self, op: impl FnOnce(&mut Campaign) -> Result<T, CampaignError>) -> Result<T, StoreError> {
        let out = op(&mut self.campaign);
        self.flush()?;
        Ok(out?)
    }

    fn flush(&mut self) -> Result<(), StoreError> {
        let pending = &self.campaign.events()[self.persisted..];
        if pending.is_empty() {
            return Ok(());
        }
        write_events(&self.log_path, pending)?;
        self.persisted = self.campaign.events().len();
        if self.persisted - self.last_snapshot >= self.snapshot_every {
            self.write_snapshot()?;
        }
        Ok(())
    }

    /// Write the snapshot atomically via a temporary file.
    pub fn write_snapshot(&mut self) -> Result<(), StoreError> {
        let path = Self::snapshot_path(&self.log_path);
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.campaign.snapshot_json()).map_err(io_err(&tmp))?;
        fs::rename(&tmp, &path).map_err(io_err(&path))?;
        self.last_snapshot = self.persisted;
        Ok(())
    }
}
