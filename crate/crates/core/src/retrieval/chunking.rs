use serde::{Deserialize, Serialize};

use super::RetrievalUnit;
use crate::corpus::Report;

/// Sub-page chunk sizes used by the granularity ablation.
pub const ABLATION_SIZES: [usize; 4] = [256, 512, 800, 1200];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    Page,
    /// Pack whole whitespace tokens up to this many per unit, within a page.
    Tokens(usize),
}

impl std::fmt::Display for Granularity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Granularity::Page => f.write_str("page"),
            Granularity::Tokens(n) => write!(f, "{n}"),
        }
    }
}

/// Splits a report into retrieval units.
///
/// Page granularity yields one unit per page (id `p{page}`). Sized
/// granularity packs consecutive whitespace tokens of a page greedily, so
/// every unit but the last on a page holds exactly `size` tokens (id
/// `p{page}.{index}`). Unit text is the original slice of the page, so line
/// breaks inside tables survive. Pages without tokens produce no sized units.
///
/// # Panics
///
/// If a sized granularity of zero is requested.
pub fn rechunk(report: &Report, granularity: Granularity) -> Vec<RetrievalUnit> {
    let mut units = Vec::new();
    for page in &report.pages {
        match granularity {
            Granularity::Page => units.push(RetrievalUnit {
                unit_id: format!("p{}", page.page_number),
                page_number: page.page_number,
                text: page.text.clone(),
                token_count: page.token_count,
            }),
            Granularity::Tokens(size) => {
                assert!(size > 0, "chunk size must be positive");
                let spans = token_spans(&page.text);
                for (i, group) in spans.chunks(size).enumerate() {
                    let start = group[0].0;
                    let end = group[group.len() - 1].1;
                    units.push(RetrievalUnit {
                        unit_id: format!("p{}.{}", page.page_number, i),
                        page_number: page.page_number,
                        text: page.text[start..end].to_string(),
                        token_count: group.len(),
                    });
                }
            }
        }
    }
    units
}

fn token_spans(text: &str) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    let mut start = None;
    for (i, c) in text.char_indices() {
        if c.is_whitespace() {
            if let Some(s) = start.take() {
                spans.push((s, i));
            }
        } else if start.is_none() {
            start = Some(i);
        }
    }
    if let Some(s) = start {
        spans.push((s, text.len()));
    }
    spans
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::PageChunk;

    fn report(pages: Vec<(u32, String)>) -> Report {
        Report {
            report_id: "r".into(),
            company: "c".into(),
            fiscal_year: 2023,
            pages: pages.into_iter().map(|(n, t)| PageChunk::new(n, t)).collect(),
        }
    }

    #[test]
    fn page_granularity() {
        let r = report(vec![(1, "a b".into()), (2, "c".into())]);
        let units = rechunk(&r, Granularity::Page);
        assert_eq!(units.len(), 2);
        assert_eq!(units[0].page_number, 1);
        assert_eq!(units[1].page_number, 2);
    }

    #[test]
    fn sized_packing() {
        let text = (0..600).map(|i| format!("w{i}")).collect::<Vec<_>>().join(" ");
        let r = report(vec![(7, text)]);
        let units = rechunk(&r, Granularity::Tokens(256));
        let sizes: Vec<_> = units.iter().map(|u| u.token_count).collect();
        assert_eq!(sizes, [256, 256, 88]);
        assert!(units.iter().all(|u| u.page_number == 7));
        assert!(units[2].text.starts_with("w512 "));
        assert!(units[2].text.ends_with("w599"));
    }

    #[test]
    fn short_page_single_unit() {
        let text = (0..100).map(|i| format!("w{i}")).collect::<Vec<_>>().join("\n");
        let units = rechunk(&report(vec![(1, text.clone())]), Granularity::Tokens(256));
        assert_eq!(units.len(), 1);
        assert_eq!(units[0].text, text);
    }

    #[test]
    fn units_never_cross_pages() {
        let r = report(vec![(1, "a b c".into()), (2, "d e".into())]);
        let units = rechunk(&r, Granularity::Tokens(4));
        assert_eq!(units.len(), 2);
        assert_eq!(units[0].text, "a b c");
        assert_eq!(units[1].text, "d e");
    }
}
