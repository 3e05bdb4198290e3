use std::fs;
use std::ops::RangeInclusive;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use super::IngestError;
use crate::http::{HttpRequest, HttpResponse, HttpTransport};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EdgarConfig {
    /// Sent with every request, e.g. `"Example Research admin@example.org"`.
    pub user_agent: String,
    /// Minimum spacing between requests.
    pub min_interval_ms: u64,
    /// Retries after a 429/503 answer.
    pub max_retries: u32,
    /// Longest `Retry-After` honoured; longer waits fail with `RateLimited`.
    pub max_retry_wait_secs: u64,
    /// Wait before a retry when the server gives no `Retry-After`.
    pub default_backoff_ms: u64,
    pub concurrent_downloads: usize,
    pub tickers_url: String,
    pub submissions_base: String,
    pub archives_base: String,
}

impl Default for EdgarConfig {
    fn default() -> Self {
        Self {
            user_agent: String::new(),
            min_interval_ms: 250,
            max_retries: 3,
            max_retry_wait_secs: 60,
            default_backoff_ms: 2000,
            concurrent_downloads: 2,
            tickers_url: "https://www.sec.gov/files/company_tickers.json".into(),
            submissions_base: "https://data.sec.gov/submissions".into(),
            archives_base: "https://www.sec.gov/Archives/edgar/data".into(),
        }
    }
}

/// Polite EDGAR HTTP client: mandatory User-Agent, request spacing and
/// `Retry-After` handling.
pub struct EdgarClient {
    transport: Arc<dyn HttpTransport>,
    config: EdgarConfig,
    last_request: Mutex<Option<Instant>>,
}

impl EdgarClient {
    pub fn new(transport: Arc<dyn HttpTransport>, config: EdgarConfig) -> Result<Self, IngestError> {
        let ua = config.user_agent.trim();
        if ua.is_empty() || !ua.contains('@') {
            return Err(IngestError::MissingUserAgent);
        }
        Ok(Self {
            transport,
            config,
            last_request: Mutex::new(None),
        })
    }

    pub fn config(&self) -> &EdgarConfig {
        &self.config
    }

    fn throttle(&self) {
        let mut last = self.last_request.lock().unwrap();
        let interval = Duration::from_millis(self.config.min_interval_ms);
        if let Some(t) = *last {
            let elapsed = t.elapsed();
            if elapsed < interval {
                std::thread::sleep(interval - elapsed);
            }
        }
        *last = Some(Instant::now());
    }

    pub fn get(&self, url: &str) -> Result<HttpResponse, IngestError> {
        let mut attempt = 0;
        loop {
            self.throttle();
            let req = HttpRequest::get(url)
                .header("User-Agent", self.config.user_agent.trim())
                .timeout(Duration::from_secs(60));
            let resp = self.transport.execute(&req)?;
            match resp.status {
                s if (200..300).contains(&s) => return Ok(resp),
                404 => return Err(IngestError::NotFound(url.to_string())),
                429 | 503 => {
                    let retry_after = resp.header("Retry-After").and_then(|v| v.trim().parse::<u64>().ok());
                    let wait = retry_after
                        .map(Duration::from_secs)
                        .unwrap_or(Duration::from_millis(self.config.default_backoff_ms << attempt.min(6)));
                    if attempt >= self.config.max_retries || wait.as_secs() > self.config.max_retry_wait_secs {
                        return Err(IngestError::RateLimited {
                            url: url.to_string(),
                            retry_after_secs: retry_after,
                        });
                    }
                    log::info!("EDGAR rate limit on {url}; waiting {wait:?}");
                    std::thread::sleep(wait);
                    attempt += 1;
                }
                status => {
                    return Err(IngestError::Status {
                        status,
                        url: url.to_string(),
                    })
                }
            }
        }
    }

    fn get_json(&self, url: &str) -> Result<Value, IngestError> {
        let resp = self.get(url)?;
        serde_json::from_slice(&resp.body).map_err(|e| IngestError::Decode {
            url: url.to_string(),
            message: e.to_string(),
        })
    }
}

/// One filing and where its primary document lives.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilingRef {
    /// Zero-padded to 10 digits.
    pub cik: String,
    pub company_name: String,
    pub accession_number: String,
    pub form_type: String,
    pub filing_date: String,
    pub report_date: String,
    pub fiscal_year: i32,
    pub primary_document: String,
    pub primary_document_url: String,
}

/// Accepts a CIK (digits, optionally prefixed `CIK`) or a ticker symbol and
/// returns the zero-padded CIK.
pub fn resolve_cik(client: &EdgarClient, cik_or_ticker: &str) -> Result<String, IngestError> {
    let q = cik_or_ticker.trim();
    let digits = q.strip_prefix("CIK").or_else(|| q.strip_prefix("cik")).unwrap_or(q);
    if !digits.is_empty() && digits.len() <= 10 && digits.chars().all(|c| c.is_ascii_digit()) {
        return Ok(format!("{:0>10}", digits));
    }
    let url = client.config.tickers_url.clone();
    let map = client.get_json(&url)?;
    let entries = map.as_object().ok_or_else(|| IngestError::Decode {
        url: url.clone(),
        message: "ticker map is not an object".into(),
    })?;
    for entry in entries.values() {
        let ticker = entry.get("ticker").and_then(Value::as_str).unwrap_or("");
        if ticker.eq_ignore_ascii_case(q) {
            let cik = entry.get("cik_str").and_then(|v| match v {
                Value::Number(n) => n.as_u64(),
                Value::String(s) => s.parse().ok(),
                _ => None,
            });
            if let Some(cik) = cik {
                return Ok(format!("{cik:010}"));
            }
        }
    }
    Err(IngestError::NotFound(format!("ticker {q}")))
}

fn column<'a>(table: &'a Value, key: &str) -> Vec<&'a str> {
    table
        .get(key)
        .and_then(Value::as_array)
        .map(|a| a.iter().map(|v| v.as_str().unwrap_or("")).collect())
        .unwrap_or_default()
}

fn year_of(date: &str) -> Option<i32> {
    date.get(..4)?.parse().ok()
}

fn rows_from(
    client: &EdgarClient,
    table: &Value,
    cik: &str,
    company: &str,
    form_type: &str,
    years: &RangeInclusive<i32>,
    out: &mut Vec<FilingRef>,
) {
    let accession = column(table, "accessionNumber");
    let filing_date = column(table, "filingDate");
    let report_date = column(table, "reportDate");
    let form = column(table, "form");
    let doc = column(table, "primaryDocument");
    let cik_num = cik.trim_start_matches('0');
    for i in 0..accession.len() {
        if form.get(i).copied() != Some(form_type) {
            continue;
        }
        let rd = report_date.get(i).copied().unwrap_or("");
        let fd = filing_date.get(i).copied().unwrap_or("");
        let Some(fy) = year_of(rd).or_else(|| year_of(fd)) else {
            continue;
        };
        if !years.contains(&fy) {
            continue;
        }
        let document = doc.get(i).copied().unwrap_or("");
        if document.is_empty() {
            continue;
        }
        let acc = accession[i];
        out.push(FilingRef {
            cik: cik.to_string(),
            company_name: company.to_string(),
            accession_number: acc.to_string(),
            form_type: form_type.to_string(),
            filing_date: fd.to_string(),
            report_date: rd.to_string(),
            fiscal_year: fy,
            primary_document: document.to_string(),
            primary_document_url: format!(
                "{}/{}/{}/{}",
                client.config.archives_base.trim_end_matches('/'),
                cik_num,
                acc.replace('-', ""),
                document
            ),
        });
    }
}

/// Filings of `form_type` whose fiscal year (report date, else filing date)
/// falls in `years`, ordered by filing date then accession number.
pub fn list_filings(
    client: &EdgarClient,
    cik_or_ticker: &str,
    form_type: &str,
    years: RangeInclusive<i32>,
) -> Result<Vec<FilingRef>, IngestError> {
    if years.is_empty() {
        return Ok(Vec::new());
    }
    let cik = resolve_cik(client, cik_or_ticker)?;
    let base = client.config.submissions_base.trim_end_matches('/').to_string();
    let index = client.get_json(&format!("{base}/CIK{cik}.json"))?;
    let company = index.get("name").and_then(Value::as_str).unwrap_or("").to_string();
    let mut refs = Vec::new();
    if let Some(recent) = index.pointer("/filings/recent") {
        rows_from(client, recent, &cik, &company, form_type, &years, &mut refs);
    }
    // Older filings live in paged files; fetch only pages that can overlap.
    if let Some(files) = index.pointer("/filings/files").and_then(Value::as_array) {
        for f in files {
            let to_year = f.get("filingTo").and_then(Value::as_str).and_then(year_of);
            let from_year = f.get("filingFrom").and_then(Value::as_str).and_then(year_of);
            // A fiscal year's annual report is filed in that year or the next.
            let overlaps = to_year.is_none_or(|y| y >= *years.start())
                && from_year.is_none_or(|y| y <= years.end() + 1);
            if let (true, Some(name)) = (overlaps, f.get("name").and_then(Value::as_str)) {
                let page = client.get_json(&format!("{base}/{name}"))?;
                rows_from(client, &page, &cik, &company, form_type, &years, &mut refs);
            }
        }
    }
    refs.sort_by(|a, b| {
        a.filing_date
            .cmp(&b.filing_date)
            .then_with(|| a.accession_number.cmp(&b.accession_number))
    });
    refs.dedup_by(|a, b| a.accession_number == b.accession_number);
    Ok(refs)
}

fn sha256_file(path: &Path) -> Option<String> {
    let bytes = fs::read(path).ok()?;
    Some(hex::encode(Sha256::digest(&bytes)))
}

/// Downloads the primary document to `dest/{cik}/{accession}/{document}`
/// with a `.sha256` sidecar. When the file already matches its sidecar no
/// request is made. A body shorter or longer than `Content-Length` is
/// rejected and nothing is left on disk.
pub fn fetch_document(client: &EdgarClient, filing: &FilingRef, dest: &Path) -> Result<PathBuf, IngestError> {
    let name = Path::new(&filing.primary_document)
        .file_name()
        .ok_or_else(|| IngestError::Decode {
            url: filing.primary_document_url.clone(),
            message: format!("bad document name {:?}", filing.primary_document),
        })?
        .to_owned();
    let dir = dest.join(&filing.cik).join(&filing.accession_number);
    let path = dir.join(&name);
    let mut sidecar_name = name.clone();
    sidecar_name.push(".sha256");
    let sidecar = dir.join(sidecar_name);

    if let (Ok(recorded), Some(actual)) = (fs::read_to_string(&sidecar), sha256_file(&path)) {
        if recorded.trim() == actual {
            log::debug!("{} already present", path.display());
            return Ok(path);
        }
    }

    let resp = client.get(&filing.primary_document_url)?;
    fs::create_dir_all(&dir).map_err(|e| IngestError::io(&dir, e))?;
    let mut part_name = name.clone();
    part_name.push(".part");
    let part = dir.join(part_name);
    fs::write(&part, &resp.body).map_err(|e| IngestError::io(&part, e))?;
    if let Some(expected) = resp.header("Content-Length").and_then(|v| v.trim().parse::<u64>().ok()) {
        let actual = fs::metadata(&part).map(|m| m.len()).unwrap_or(0);
        if actual != expected {
            let _ = fs::remove_file(&part);
            return Err(IngestError::ChecksumMismatch { path, expected, actual });
        }
    }
    fs::rename(&part, &path).map_err(|e| IngestError::io(&path, e))?;
    let digest = hex::encode(Sha256::digest(&resp.body));
    fs::write(&sidecar, format!("{digest}\n")).map_err(|e| IngestError::io(&sidecar, e))?;
    Ok(path)
}

/// Downloads several filings with at most `concurrent_downloads` in flight.
/// Results are in input order.
pub fn fetch_all(client: &EdgarClient, filings: &[FilingRef], dest: &Path) -> Vec<Result<PathBuf, IngestError>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(client.config.concurrent_downloads.max(1))
        .build();
    match pool {
        Ok(pool) => pool.install(|| filings.par_iter().map(|f| fetch_document(client, f, dest)).collect()),
        Err(_) => filings.iter().map(|f| fetch_document(client, f, dest)).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::http::ReplayTransport;

    fn config() -> EdgarConfig {
        EdgarConfig {
            user_agent: "findoc tests test@example.org".into(),
            min_interval_ms: 0,
            default_backoff_ms: 0,
            ..EdgarConfig::default()
        }
    }

    #[test]
    fn user_agent_required() {
        let t = Arc::new(ReplayTransport::new());
        assert!(matches!(
            EdgarClient::new(t, EdgarConfig::default()),
            Err(IngestError::MissingUserAgent)
        ));
    }

    #[test]
    fn cik_forms() {
        let client = EdgarClient::new(Arc::new(ReplayTransport::new()), config()).unwrap();
        assert_eq!(resolve_cik(&client, "320193").unwrap(), "0000320193");
        assert_eq!(resolve_cik(&client, "CIK0000320193").unwrap(), "0000320193");
    }

    #[test]
    fn rate_limit_is_retried_then_reported() {
        let url = "https://data.sec.gov/x";
        let t = Arc::new(
            ReplayTransport::new()
                .with("GET", url, HttpResponse::status(429, "").with_header("Retry-After", "0"))
                .with("GET", url, HttpResponse::ok("fine")),
        );
        let client = EdgarClient::new(t.clone(), config()).unwrap();
        assert_eq!(client.get(url).unwrap().text(), "fine");
        assert_eq!(t.calls(), 2);
        let ua = t.requests()[0].headers.iter().find(|(k, _)| k == "User-Agent").cloned();
        assert_eq!(ua.unwrap().1, "findoc tests test@example.org");

        let t = Arc::new(ReplayTransport::new().with(
            "GET",
            url,
            HttpResponse::status(429, "").with_header("Retry-After", "3600"),
        ));
        let client = EdgarClient::new(t, config()).unwrap();
        assert!(matches!(
            client.get(url),
            Err(IngestError::RateLimited {
                retry_after_secs: Some(3600),
                ..
            })
        ));
    }

    #[test]
    fn empty_year_range() {
        let t = Arc::new(ReplayTransport::new());
        let client = EdgarClient::new(t.clone(), config()).unwrap();
        #[allow(clippy::reversed_empty_ranges)]
        let refs = list_filings(&client, "AAPL", "10-K", 2024..=2022).unwrap();
        assert!(refs.is_empty());
        assert_eq!(t.calls(), 0);
    }
}
