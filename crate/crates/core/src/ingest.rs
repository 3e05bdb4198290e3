//! Filing download from SEC EDGAR and best-effort HTML conversion.
//!
//! Endpoints used:
//!
//! - ticker map: `https://www.sec.gov/files/company_tickers.json`
//! - submissions index: `https://data.sec.gov/submissions/CIK##########.json`
//! - documents: `https://www.sec.gov/Archives/edgar/data/{cik}/{accession without dashes}/{document}`
//!
//! EDGAR asks for a descriptive `User-Agent` and at most ten requests per
//! second; [`EdgarClient`] refuses to run without the former and spaces
//! requests well under the latter.

use std::path::PathBuf;

use thiserror::Error;

use crate::http::TransportError;

mod edgar;
mod html;

pub use edgar::{fetch_all, fetch_document, list_filings, resolve_cik, EdgarClient, EdgarConfig, FilingRef};
pub use html::{html_to_pages, html_to_pages_with, HtmlOptions};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("rate limited by {url}{}", retry_after_secs.map(|s| format!(" (retry after {s}s)")).unwrap_or_default())]
    RateLimited { url: String, retry_after_secs: Option<u64> },
    #[error("HTTP {status} from {url}")]
    Status { status: u16, url: String },
    #[error("could not decode {url}: {message}")]
    Decode { url: String, message: String },
    #[error("{path}: expected {expected} bytes, received {actual}")]
    ChecksumMismatch { path: PathBuf, expected: u64, actual: u64 },
    #[error("a descriptive User-Agent (name and contact e-mail) is required by EDGAR")]
    MissingUserAgent,
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl IngestError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        IngestError::Io {
            path: path.into(),
            source,
        }
    }
}
