//! Dataset downloads with pinned SHA-256 digests.
//!
//! Files are fetched into a `.part` file, verified, then renamed into place.
//! A file whose digest does not match is moved aside as `<name>.quarantine`
//! and reported; nothing unverified is ever left under its real name.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::time::Duration;

use flate2::read::GzDecoder;
use kdlab_core::nn::presets::Dataset;
use serde::Serialize;

use crate::record::sha256_hex;
use crate::{CliError, Result};

/// Upper bound on a single download, well above the largest archive.
const MAX_BYTES: u64 = 512 << 20;

#[derive(Debug, Clone, PartialEq)]
pub struct RemoteFile {
    pub name: String,
    pub sha256: String,
}

impl RemoteFile {
    fn new(name: &str, sha256: &str) -> Self {
        Self {
            name: name.into(),
            sha256: sha256.into(),
        }
    }
}

/// Where a dataset comes from and what its files must hash to.
#[derive(Debug, Clone, PartialEq)]
pub struct Source {
    pub id: String,
    /// Prefix the file names are appended to.
    pub base_url: String,
    pub files: Vec<RemoteFile>,
    /// Tar.gz archives whose `.bin` members are unpacked next to them.
    pub unpack_bins: bool,
}

impl Source {
    /// The upstream locations and digests of the published archives.
    pub fn pinned(id: Dataset) -> Self {
        match id {
            Dataset::Mnist => Self {
                id: id.id().into(),
                base_url: "https://storage.googleapis.com/cvdf-datasets/mnist/".into(),
                files: vec![
                    RemoteFile::new(
                        "train-images-idx3-ubyte.gz",
                        "440fcabf73cc546fa21475e81ea370265605f56be210a4024d2ca8f203523609",
                    ),
                    RemoteFile::new(
                        "train-labels-idx1-ubyte.gz",
                        "3552534a0a558bbed6aed32b30c495cca23d567ec52cac8be1a0730e8010255c",
                    ),
                    RemoteFile::new(
                        "t10k-images-idx3-ubyte.gz",
                        "8d422c7b0a1c1c79245a5bcf07fe86e33eeafee792b84584aec276f5a2dbc4e6",
                    ),
                    RemoteFile::new(
                        "t10k-labels-idx1-ubyte.gz",
                        "f7ae60f92e00ec6debd23a6088c31dbd2371eca3ffa0defaefb259924204aec6",
                    ),
                ],
                unpack_bins: false,
            },
            Dataset::FashionMnist => Self {
                id: id.id().into(),
                base_url: "http://fashion-mnist.s3-website.eu-central-1.amazonaws.com/".into(),
                files: vec![
                    RemoteFile::new(
                        "train-images-idx3-ubyte.gz",
                        "3aede38d61863908ad78613f6a32ed271626dd12800ba2636569512369268a84",
                    ),
                    RemoteFile::new(
                        "train-labels-idx1-ubyte.gz",
                        "a04f17134ac03560a47e3764e11b92fc97de4d1bfaf8ba1a3aa29af54cc90845",
                    ),
                    RemoteFile::new(
                        "t10k-images-idx3-ubyte.gz",
                        "346e55b948d973a97e58d2351dde16a484bd415d4595297633bb08f03db6a073",
                    ),
                    RemoteFile::new(
                        "t10k-labels-idx1-ubyte.gz",
                        "67da17c76eaffca5446c3361aaab5c3cd6d1c2608764d35dfb1850b086bf8dd5",
                    ),
                ],
                unpack_bins: false,
            },
            Dataset::Cifar10 => Self {
                id: id.id().into(),
                base_url: "https://www.cs.toronto.edu/~kriz/".into(),
                files: vec![RemoteFile::new(
                    "cifar-10-binary.tar.gz",
                    "c4a38c50a1bc5f3a1c5537f2155ab9d68f9f25eb1ed8d9ddda3db29a59bca1dd",
                )],
                unpack_bins: true,
            },
        }
    }

    /// Parses a dataset id; unknown ids are usage errors listing the valid ones.
    pub fn by_id(id: &str) -> Result<Self> {
        id.parse::<Dataset>().map(Self::pinned).map_err(CliError::Config)
    }

    pub fn with_mirror(mut self, base_url: &str) -> Self {
        self.base_url = if base_url.ends_with('/') {
            base_url.to_string()
        } else {
            format!("{base_url}/")
        };
        self
    }
}

#[derive(Debug, Clone)]
pub struct FetchOptions {
    /// Extra attempts after the first failed request.
    pub retries: u32,
    /// Wait before retry `k` is `backoff · 2^k`.
    pub backoff: Duration,
    pub timeout: Duration,
}

impl Default for FetchOptions {
    fn default() -> Self {
        Self {
            retries: 3,
            backoff: Duration::from_millis(500),
            timeout: Duration::from_secs(120),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct FetchReport {
    pub downloaded: Vec<String>,
    /// Already present and verified.
    pub verified: Vec<String>,
    pub unpacked: Vec<String>,
}

fn quarantine(path: &Path) -> PathBuf {
    let mut q = path.as_os_str().to_owned();
    q.push(".quarantine");
    let q = PathBuf::from(q);
    // Best effort: the digest error is what gets reported either way.
    let _ = fs::rename(path, &q);
    q
}

fn checksum_error(path: &Path, expected: &str, found: &str, moved_to: &Path) -> CliError {
    CliError::Data(format!(
        "checksum mismatch for {}: expected {expected}, found {found}; moved to {}",
        path.display(),
        moved_to.display()
    ))
}

fn download(agent: &ureq::Agent, url: &str, opts: &FetchOptions) -> Result<Vec<u8>> {
    let mut last = String::new();
    for attempt in 0..=opts.retries {
        if attempt > 0 {
            std::thread::sleep(opts.backoff * 2u32.pow(attempt - 1));
        }
        match agent.get(url).call() {
            Ok(resp) => {
                let mut body = Vec::new();
                match resp.into_reader().take(MAX_BYTES).read_to_end(&mut body) {
                    Ok(_) => return Ok(body),
                    Err(e) => last = e.to_string(),
                }
            }
            // A definite answer from the server will not change on retry.
            Err(ureq::Error::Status(code, _)) => {
                return Err(CliError::Data(format!("{url}: server answered HTTP {code}")));
            }
            Err(e) => last = e.to_string(),
        }
    }
    Err(CliError::Data(format!(
        "network failure fetching {url} after {} attempt(s): {last}",
        opts.retries + 1
    )))
}

/// Unpacks the `.bin` members of a tar.gz archive into `dir`, dropping
/// their directory prefix. Returns the member names.
fn unpack_bins(archive: &Path, dir: &Path) -> Result<Vec<String>> {
    let data_err = |e: std::io::Error| CliError::Data(format!("{}: {e}", archive.display()));
    let file = fs::File::open(archive).map_err(data_err)?;
    let mut tar = tar::Archive::new(GzDecoder::new(file));
    let mut names = Vec::new();
    for entry in tar.entries().map_err(data_err)? {
        let mut entry = entry.map_err(data_err)?;
        let path = entry.path().map_err(data_err)?.into_owned();
        let Some(name) = path.file_name().and_then(|n| n.to_str()).map(str::to_string) else {
            continue;
        };
        if !name.ends_with(".bin") || !entry.header().entry_type().is_file() {
            continue;
        }
        let mut bytes = Vec::new();
        entry.read_to_end(&mut bytes).map_err(data_err)?;
        crate::record::write_atomic(&dir.join(&name), &bytes).map_err(data_err)?;
        names.push(name);
    }
    if names.is_empty() {
        return Err(CliError::Data(format!("{}: no .bin members", archive.display())));
    }
    Ok(names)
}

/// Files `fetch_dataset` would touch, for dry runs.
pub fn plan(source: &Source, dir: &Path) -> Vec<String> {
    source
        .files
        .iter()
        .map(|f| format!("{}{} -> {} (sha256 {})", source.base_url, f.name, dir.join(&f.name).display(), f.sha256))
        .collect()
}

/// Makes sure every file of `source` is present in `dir` with its pinned
/// digest, downloading only what is missing.
pub fn fetch_dataset(source: &Source, dir: &Path, opts: &FetchOptions) -> Result<FetchReport> {
    fs::create_dir_all(dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?;
    let agent = ureq::AgentBuilder::new().timeout(opts.timeout).build();
    let mut report = FetchReport::default();
    for file in &source.files {
        let path = dir.join(&file.name);
        if path.exists() {
            let bytes = fs::read(&path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
            let found = sha256_hex(&bytes);
            if found != file.sha256 {
                let q = quarantine(&path);
                return Err(checksum_error(&path, &file.sha256, &found, &q));
            }
            report.verified.push(file.name.clone());
        } else {
            let url = format!("{}{}", source.base_url, file.name);
            let bytes = download(&agent, &url, opts)?;
            let found = sha256_hex(&bytes);
            let mut part = path.as_os_str().to_owned();
            part.push(".part");
            let part = PathBuf::from(part);
            fs::write(&part, &bytes).map_err(|e| CliError::Data(format!("{}: {e}", part.display())))?;
            if found != file.sha256 {
                let q = quarantine(&part);
                return Err(checksum_error(&path, &file.sha256, &found, &q));
            }
            fs::rename(&part, &path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
            report.downloaded.push(file.name.clone());
        }
        if source.unpack_bins {
            let fresh = report.downloaded.last() == Some(&file.name);
            let listed = unpacked_names(&path)?;
            if fresh || listed.iter().any(|n| !dir.join(n).exists()) {
                report.unpacked.extend(unpack_bins(&path, dir)?);
            }
        }
    }
    Ok(report)
}

/// Names of the `.bin` members, read from the archive's headers.
fn unpacked_names(archive: &Path) -> Result<Vec<String>> {
    let data_err = |e: std::io::Error| CliError::Data(format!("{}: {e}", archive.display()));
    let file = fs::File::open(archive).map_err(data_err)?;
    let mut tar = tar::Archive::new(GzDecoder::new(file));
    let mut names = Vec::new();
    for entry in tar.entries().map_err(data_err)? {
        let entry = entry.map_err(data_err)?;
        let path = entry.path().map_err(data_err)?;
        if let Some(name) = path.file_name().and_then(|n| n.to_str()) {
            if name.ends_with(".bin") {
                names.push(name.to_string());
            }
        }
    }
    Ok(names)
}
