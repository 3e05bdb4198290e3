use serde::{Deserialize, Serialize};

use crate::corpus::{content_id, count_tokens, PageChunk, Report};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct HtmlOptions {
    /// Page size used when the document has no page-break markers.
    pub tokens_per_page: usize,
}

impl Default for HtmlOptions {
    fn default() -> Self {
        Self { tokens_per_page: 700 }
    }
}

enum Block {
    Line(String),
    Table(Vec<String>),
    PageBreak,
}

#[derive(Default)]
struct Table {
    rows: Vec<Vec<String>>,
    row: Option<Vec<String>>,
    cell: Option<String>,
}

impl Table {
    fn end_cell(&mut self) {
        if let Some(cell) = self.cell.take() {
            self.row.get_or_insert_with(Vec::new).push(cell.trim().to_string());
        }
    }

    fn end_row(&mut self) {
        self.end_cell();
        if let Some(row) = self.row.take() {
            self.rows.push(row);
        }
    }

    fn push_text(&mut self, text: &str) {
        self.cell.get_or_insert_with(String::new).push_str(text);
    }

    fn render(mut self) -> Vec<String> {
        self.end_row();
        // Spacer and symbol cells leave holes; keep the label column and
        // left-pack the values so they line up under their headers.
        let mut rows: Vec<Vec<String>> = self
            .rows
            .into_iter()
            .map(merge_unit_cells)
            .map(|r| {
                r.into_iter()
                    .enumerate()
                    .filter(|(i, c)| *i == 0 || !c.is_empty())
                    .map(|(_, c)| c)
                    .collect()
            })
            .collect();
        rows.retain(|r: &Vec<String>| r.iter().any(|c| !c.is_empty()));
        let width = rows.iter().map(Vec::len).max().unwrap_or(0);
        for r in rows.iter_mut() {
            r.resize(width, String::new());
        }
        let keep: Vec<usize> = (0..width).filter(|&c| rows.iter().any(|r| !r[c].is_empty())).collect();
        if rows.is_empty() || keep.is_empty() {
            return Vec::new();
        }
        let line = |r: &Vec<String>| {
            let cells: Vec<String> = keep.iter().map(|&c| r[c].replace('|', "\\|")).collect();
            format!("| {} |", cells.join(" | "))
        };
        let mut out = vec![line(&rows[0])];
        out.push(format!("|{}", " --- |".repeat(keep.len())));
        out.extend(rows[1..].iter().map(line));
        out
    }
}

/// Filings often put `$`, `)` and `%` in cells of their own; glue them to
/// the neighbouring value.
fn merge_unit_cells(row: Vec<String>) -> Vec<String> {
    let mut out: Vec<String> = Vec::with_capacity(row.len());
    let mut pending_prefix = String::new();
    for cell in row {
        let c = cell.trim();
        if c == "$" || c == "€" || c == "£" {
            pending_prefix.push_str(c);
            out.push(String::new());
            continue;
        }
        if matches!(c, ")" | "%" | ")%" | "%)") {
            if let Some(prev) = out.iter_mut().rev().find(|p| !p.is_empty()) {
                prev.push_str(c);
                out.push(String::new());
                continue;
            }
        }
        if !pending_prefix.is_empty() && !c.is_empty() {
            out.push(format!("{}{}", std::mem::take(&mut pending_prefix), c));
        } else {
            out.push(c.to_string());
        }
    }
    out
}

fn decode_entities(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut rest = s;
    while let Some(amp) = rest.find('&') {
        out.push_str(&rest[..amp]);
        let tail = &rest[amp..];
        let semi = tail[1..].find(';').map(|i| i + 1).filter(|&i| i <= 10);
        let decoded = semi.and_then(|i| {
            let name = &tail[1..i];
            let c = if let Some(num) = name.strip_prefix('#') {
                let code = match num.strip_prefix(['x', 'X']) {
                    Some(hex) => u32::from_str_radix(hex, 16).ok(),
                    None => num.parse().ok(),
                };
                code.and_then(char::from_u32)
            } else {
                match name {
                    "amp" => Some('&'),
                    "lt" => Some('<'),
                    "gt" => Some('>'),
                    "quot" => Some('"'),
                    "apos" => Some('\''),
                    "nbsp" => Some(' '),
                    "rsquo" | "lsquo" => Some('\''),
                    "ldquo" | "rdquo" => Some('"'),
                    "mdash" | "ndash" | "minus" => Some('-'),
                    "bull" | "middot" => Some('*'),
                    _ => None,
                }
            };
            c.map(|c| (c, i + 1))
        });
        match decoded {
            Some((c, len)) => {
                out.push(if c == '\u{a0}' { ' ' } else { c });
                rest = &tail[len..];
            }
            None => {
                out.push('&');
                rest = &tail[1..];
            }
        }
    }
    out.push_str(rest);
    out
}

fn collapse_ws(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut space = false;
    for c in s.chars() {
        if c.is_whitespace() {
            space = true;
        } else {
            if space && !out.is_empty() {
                out.push(' ');
            }
            space = false;
            out.push(c);
        }
    }
    if space && !out.is_empty() {
        out.push(' ');
    }
    out
}

const BLOCK_TAGS: &[&str] = &[
    "p", "div", "h1", "h2", "h3", "h4", "h5", "h6", "li", "ul", "ol", "section", "article", "blockquote", "pre",
    "hr", "center", "dl", "dt", "dd", "header", "footer", "body", "caption",
];
const RAW_TEXT_TAGS: &[&str] = &["script", "style", "title", "noscript", "textarea"];
const VOID_TAGS: &[&str] = &["br", "hr", "img", "meta", "link", "input", "col", "area", "base", "wbr"];

struct Tag {
    name: String,
    closing: bool,
    self_closing: bool,
    /// Attribute text, lowercased with whitespace removed.
    attrs: String,
}

/// Parses the tag starting at `start` (`html[start] == '<'`); returns it and
/// the index after `>`.
fn parse_tag(html: &str, start: usize) -> (Option<Tag>, usize) {
    let bytes = html.as_bytes();
    let mut i = start + 1;
    let mut quote: Option<u8> = None;
    while i < bytes.len() {
        let b = bytes[i];
        match quote {
            Some(q) if b == q => quote = None,
            Some(_) => {}
            None if b == b'"' || b == b'\'' => quote = Some(b),
            None if b == b'>' => break,
            None => {}
        }
        i += 1;
    }
    let end = (i + 1).min(html.len());
    let inner = &html[start + 1..i.min(html.len())];
    let closing = inner.starts_with('/');
    let inner = inner.trim_start_matches('/');
    let name_len = inner
        .find(|c: char| c.is_whitespace() || c == '/' || c == '>')
        .unwrap_or(inner.len());
    let name = inner[..name_len].to_ascii_lowercase();
    if name.is_empty() || !name.starts_with(|c: char| c.is_ascii_alphabetic()) {
        return (None, end);
    }
    let rest = &inner[name_len..];
    let self_closing = rest.trim_end().ends_with('/');
    let attrs: String = rest
        .chars()
        .filter(|c| !c.is_whitespace())
        .collect::<String>()
        .to_ascii_lowercase();
    (
        Some(Tag {
            name,
            closing,
            self_closing,
            attrs,
        }),
        end,
    )
}

fn is_page_break(attrs: &str) -> bool {
    ["page-break-before:always", "page-break-after:always", "break-before:page", "break-after:page"]
        .iter()
        .any(|m| attrs.contains(m))
}

struct Builder {
    blocks: Vec<Block>,
    line: String,
    table: Option<Table>,
    /// Nesting of tables inside the one being built.
    inner_tables: usize,
}

impl Builder {
    fn flush(&mut self) {
        let line = collapse_ws(&self.line);
        let line = line.trim();
        if !line.is_empty() {
            self.blocks.push(Block::Line(line.to_string()));
        }
        self.line.clear();
    }

    fn text(&mut self, s: &str) {
        match &mut self.table {
            Some(t) => t.push_text(s),
            None => self.line.push_str(s),
        }
    }
}

fn to_blocks(html: &str) -> Vec<Block> {
    let lower = html.to_ascii_lowercase();
    let mut b = Builder {
        blocks: Vec::new(),
        line: String::new(),
        table: None,
        inner_tables: 0,
    };
    let mut hidden: Option<(String, usize)> = None;
    let mut i = 0;
    while i < html.len() {
        let Some(rel) = html[i..].find('<') else {
            if hidden.is_none() {
                b.text(&decode_entities(&html[i..]));
            }
            break;
        };
        if rel > 0 && hidden.is_none() {
            b.text(&decode_entities(&html[i..i + rel]));
        }
        let start = i + rel;
        if lower[start..].starts_with("<!--") {
            i = lower[start + 4..].find("-->").map_or(html.len(), |e| start + 4 + e + 3);
            continue;
        }
        if lower[start..].starts_with("<!") || lower[start..].starts_with("<?") {
            i = lower[start..].find('>').map_or(html.len(), |e| start + e + 1);
            continue;
        }
        let (tag, next) = parse_tag(html, start);
        i = next;
        let Some(tag) = tag else {
            if hidden.is_none() {
                b.text("<");
                i = start + 1;
            }
            continue;
        };

        if let Some((name, depth)) = &mut hidden {
            if tag.name == *name && !tag.self_closing {
                if tag.closing {
                    *depth -= 1;
                    if *depth == 0 {
                        hidden = None;
                    }
                } else {
                    *depth += 1;
                }
            }
            continue;
        }
        if tag.closing {
            close_tag(&mut b, &tag.name);
            continue;
        }
        if RAW_TEXT_TAGS.contains(&tag.name.as_str()) && !tag.self_closing {
            let close = format!("</{}", tag.name);
            i = lower[i..].find(&close).map_or(html.len(), |e| {
                let after = i + e;
                lower[after..].find('>').map_or(html.len(), |g| after + g + 1)
            });
            continue;
        }
        let void = VOID_TAGS.contains(&tag.name.as_str()) || tag.self_closing;
        if (tag.attrs.contains("display:none") || tag.name == "head" || tag.name == "ix:header") && !void {
            hidden = Some((tag.name.clone(), 1));
            continue;
        }
        if is_page_break(&tag.attrs) && b.table.is_none() {
            b.flush();
            b.blocks.push(Block::PageBreak);
        }
        open_tag(&mut b, &tag.name);
    }
    if let Some(t) = b.table.take() {
        b.blocks.push(Block::Table(t.render()));
    }
    b.flush();
    b.blocks
}

fn open_tag(b: &mut Builder, name: &str) {
    match (name, b.table.as_mut()) {
        ("table", None) => {
            b.flush();
            b.table = Some(Table::default());
        }
        ("table", Some(_)) => b.inner_tables += 1,
        ("tr", Some(t)) if b.inner_tables == 0 => t.end_row(),
        ("td" | "th", Some(t)) if b.inner_tables == 0 => {
            t.end_cell();
            t.cell = Some(String::new());
        }
        (_, Some(t)) => t.push_text(" "),
        ("br", None) => b.flush(),
        (n, None) if BLOCK_TAGS.contains(&n) => b.flush(),
        _ => {}
    }
}

fn close_tag(b: &mut Builder, name: &str) {
    match (name, b.table.as_mut()) {
        ("table", Some(_)) if b.inner_tables > 0 => b.inner_tables -= 1,
        ("table", Some(_)) => {
            let t = b.table.take().expect("checked");
            let lines = t.render();
            if !lines.is_empty() {
                b.blocks.push(Block::Table(lines));
            }
        }
        ("tr", Some(t)) if b.inner_tables == 0 => t.end_row(),
        ("td" | "th", Some(t)) if b.inner_tables == 0 => t.end_cell(),
        (_, Some(t)) => t.push_text(" "),
        (n, None) if BLOCK_TAGS.contains(&n) => b.flush(),
        _ => {}
    }
}

fn page_text(blocks: &[&Block]) -> String {
    let mut out: Vec<String> = Vec::new();
    for block in blocks {
        match block {
            Block::Line(l) => out.push(l.clone()),
            Block::Table(lines) => {
                if out.last().is_some_and(|l| !l.is_empty()) {
                    out.push(String::new());
                }
                out.extend(lines.iter().cloned());
                out.push(String::new());
            }
            Block::PageBreak => {}
        }
    }
    while out.last().is_some_and(|l| l.is_empty()) {
        out.pop();
    }
    out.join("\n")
}

fn block_tokens(block: &Block) -> usize {
    match block {
        Block::Line(l) => count_tokens(l),
        Block::Table(lines) => lines.iter().map(|l| count_tokens(l)).sum(),
        Block::PageBreak => 0,
    }
}

/// Converts a filing's HTML into a paged report using default options.
pub fn html_to_pages(html: &str) -> Report {
    html_to_pages_with(html, &HtmlOptions::default())
}

/// Best-effort conversion: tags are stripped, tables become Markdown tables,
/// hidden elements and scripts are dropped. Pages split at CSS page-break
/// markers; without any marker the text is packed into pages of about
/// `tokens_per_page` whitespace tokens. Never fails; input without text
/// yields one empty page.
pub fn html_to_pages_with(html: &str, opts: &HtmlOptions) -> Report {
    let blocks = to_blocks(html);
    let budget = opts.tokens_per_page.max(1);
    let mut groups: Vec<Vec<&Block>> = vec![Vec::new()];
    if blocks.iter().any(|b| matches!(b, Block::PageBreak)) {
        for block in &blocks {
            match block {
                Block::PageBreak => groups.push(Vec::new()),
                other => groups.last_mut().unwrap().push(other),
            }
        }
    } else {
        let mut used = 0;
        for block in &blocks {
            let n = block_tokens(block);
            if used > 0 && used + n > budget {
                groups.push(Vec::new());
                used = 0;
            }
            groups.last_mut().unwrap().push(block);
            used += n;
        }
    }
    let mut texts: Vec<String> = groups.iter().map(|g| page_text(g)).filter(|t| !t.trim().is_empty()).collect();
    if texts.is_empty() {
        texts.push(String::new());
    }
    let pages: Vec<PageChunk> = texts
        .into_iter()
        .enumerate()
        .map(|(i, t)| PageChunk::new(i as u32 + 1, t))
        .collect();
    let mut report = Report {
        report_id: String::new(),
        company: String::new(),
        fiscal_year: 0,
        pages,
    };
    report.report_id = content_id(&report.to_markdown());
    report
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn one_table() {
        let html = "<html><head><title>x</title></head><body><p>Balance sheet</p>\
            <table><tr><th>Item</th><th>2023</th></tr>\
            <tr><td>Cash</td><td>$</td><td>1,234</td></tr>\
            <tr><td>Debt</td><td>(45</td><td>)</td></tr></table></body></html>";
        let r = html_to_pages(html);
        assert_eq!(r.pages.len(), 1);
        let text = &r.pages[0].text;
        assert!(text.starts_with("Balance sheet\n\n| Item | 2023 |\n| --- | --- |\n"), "{text}");
        assert!(text.contains("| Cash | $1,234 |"), "{text}");
        assert!(text.contains("| Debt | (45) |"), "{text}");
        assert_eq!(r.pages[0].table_block_spans.len(), 1);
    }

    #[test]
    fn page_breaks() {
        let html = r#"<p>one</p><hr style="page-break-after: always"><p>two</p>
            <div style="PAGE-BREAK-BEFORE:always">three</div>"#;
        let r = html_to_pages(html);
        let texts: Vec<_> = r.pages.iter().map(|p| p.text.as_str()).collect();
        assert_eq!(texts, ["one", "two", "three"]);
        assert_eq!(r.page_numbers(), vec![1, 2, 3]);
    }

    #[test]
    fn token_budget_pages() {
        let html: String = (0..10).map(|i| format!("<p>{}</p>", format!("w{i} ").repeat(30))).collect();
        let r = html_to_pages_with(&html, &HtmlOptions { tokens_per_page: 100 });
        assert_eq!(r.pages.len(), 4);
        assert!(r.pages.iter().all(|p| p.token_count <= 100));
    }

    #[test]
    fn hidden_and_scripts_dropped() {
        let html = "<div style='display:none'><div>hidden</div> still hidden</div>\
            <script>if (a < b) { x = '</div>'; }</script><p>shown &amp; told&#46;</p>";
        let r = html_to_pages(html);
        assert_eq!(r.pages[0].text, "shown & told.");
    }

    #[test]
    fn tag_soup() {
        let r = html_to_pages("<<p>x<<td>></table><b attr=\"unterminated>text");
        assert_eq!(r.pages.len(), 1);
        assert!(!r.pages[0].text.is_empty());
        assert_eq!(html_to_pages("").pages.len(), 1);
    }

    proptest! {
        #[test]
        fn never_panics(s in "\\PC{0,400}") {
            let r = html_to_pages(&s);
            prop_assert!(!r.pages.is_empty());
        }

        #[test]
        fn never_panics_on_taggy_input(parts in proptest::collection::vec(
            prop_oneof![
                Just("<table>".to_string()), Just("</table>".to_string()), Just("<tr>".to_string()),
                Just("<td>".to_string()), Just("</td>".to_string()), Just("<p>".to_string()),
                Just("<!--".to_string()), Just("-->".to_string()), Just("<script>".to_string()),
                Just("<div style='display:none'>".to_string()), Just("</div>".to_string()),
                Just("<hr style='page-break-after:always'>".to_string()), Just("&#x110000;".to_string()),
                Just("&amp".to_string()), Just("é€".to_string()), "[a-z0-9 |$()%]{0,8}",
            ],
            0..60,
        )) {
            let html = parts.concat();
            let r = html_to_pages(&html);
            prop_assert!(!r.pages.is_empty());
            for p in &r.pages {
                prop_assert_eq!(p.token_count, count_tokens(&p.text));
            }
        }
    }
}
