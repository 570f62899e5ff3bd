//! Parsers for model replies. Each locates the first well-formed target block
//! and ignores the prose around it.

use std::sync::LazyLock;

use regex::Regex;

static THINKING: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?s)<thinking>(.*?)</thinking>").unwrap());
static RELEVANT_TABLES: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?s)<relevant_tables>(.*?)</relevant_tables>").unwrap());
static COMMENT: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?s)<!--.*?-->").unwrap());
static DATABASE_BLOCK: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r#"(?s)<database\s+name\s*=\s*"([^"]*)"\s*>(.*?)</database>"#).unwrap());
static TABLE_ENTRY: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r#"(?s)<table\s+rank\s*=\s*"\s*(\d+)\s*"\s*>(.*?)</table>"#).unwrap());
static DESCRIPTION: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?s)<description>(.*?)</description>").unwrap());
static SQL_DATABASE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?s)<database>(.*?)</database>").unwrap());
static SQL_QUERY: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?s)<sql_query>(.*?)</sql_query>").unwrap());
static SQL_FENCE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?s)^```[A-Za-z]*\s*(.*?)\s*```$").unwrap());

/// One `<table rank="…">` entry in reply order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankedEntry {
    pub database: String,
    pub table: String,
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedTables {
    pub thinking: Option<String>,
    pub entries: Vec<RankedEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedSql {
    pub database: Option<String>,
    pub sql: String,
}

pub fn thinking(reply: &str) -> Option<String> {
    THINKING
        .captures(reply)
        .map(|c| c[1].trim().to_string())
        .filter(|s| !s.is_empty())
}

fn unescape(s: &str) -> String {
    s.replace("&lt;", "<")
        .replace("&gt;", ">")
        .replace("&quot;", "\"")
        .replace("&apos;", "'")
        .replace("&amp;", "&")
}

fn clean_name(s: &str) -> String {
    let s = unescape(s.trim());
    let s = s.trim();
    for q in ['`', '"', '\''] {
        if let Some(inner) = s.strip_prefix(q).and_then(|r| r.strip_suffix(q)) {
            return inner.trim().to_string();
        }
    }
    s.to_string()
}

fn parse_tables_block(block: &str) -> Option<Vec<RankedEntry>> {
    let block = COMMENT.replace_all(block, "");
    let mut entries = Vec::new();
    let mut last_end = 0;
    for db in DATABASE_BLOCK.captures_iter(&block) {
        let whole = db.get(0).unwrap();
        if !block[last_end..whole.start()].trim().is_empty() {
            return None;
        }
        last_end = whole.end();
        let database = clean_name(&db[1]);
        if database.is_empty() {
            return None;
        }
        let body = &db[2];
        let mut inner_end = 0;
        for t in TABLE_ENTRY.captures_iter(body) {
            let m = t.get(0).unwrap();
            if !body[inner_end..m.start()].trim().is_empty() {
                return None;
            }
            inner_end = m.end();
            let rank: usize = t[1].parse().ok()?;
            let table = clean_name(&t[2]);
            if rank == 0 || table.is_empty() {
                return None;
            }
            entries.push(RankedEntry {
                database: database.clone(),
                table,
                rank,
            });
        }
        if !body[inner_end..].trim().is_empty() {
            return None;
        }
    }
    block[last_end..].trim().is_empty().then_some(entries)
}

/// Parses a table-prediction reply. An empty `<relevant_tables>` block is a
/// valid, empty answer.
pub fn parse_relevant_tables(reply: &str) -> Option<ParsedTables> {
    RELEVANT_TABLES
        .captures_iter(reply)
        .find_map(|c| parse_tables_block(&c[1]))
        .map(|entries| ParsedTables {
            thinking: thinking(reply),
            entries,
        })
}

pub fn parse_description(reply: &str) -> Option<String> {
    DESCRIPTION
        .captures_iter(reply)
        .map(|c| c[1].trim().to_string())
        .find(|s| !s.is_empty())
}

pub fn parse_sql_reply(reply: &str) -> Option<ParsedSql> {
    let sql = SQL_QUERY.captures_iter(reply).find_map(|c| {
        let body = c[1].trim();
        let body = SQL_FENCE
            .captures(body)
            .map_or(body.to_string(), |f| f[1].to_string());
        (!body.is_empty()).then_some(body)
    })?;
    let database = SQL_DATABASE
        .captures(reply)
        .map(|c| c[1].trim().to_string())
        .filter(|s| !s.is_empty());
    Some(ParsedSql { database, sql })
}

/// The first bracketed list of strings in `reply`, in JSON or with
/// single-quoted items.
pub fn parse_string_list(reply: &str) -> Option<Vec<String>> {
    reply
        .match_indices('[')
        .find_map(|(i, _)| json_list(&reply[i..]).or_else(|| quoted_list(&reply[i..])))
}

fn json_list(s: &str) -> Option<Vec<String>> {
    serde_json::Deserializer::from_str(s)
        .into_iter::<Vec<String>>()
        .next()?
        .ok()
}

fn quoted_list(s: &str) -> Option<Vec<String>> {
    let mut chars = s.strip_prefix('[')?.chars();
    let mut items = Vec::new();
    loop {
        let c = chars.find(|c| !c.is_whitespace() && *c != ',')?;
        match c {
            ']' => return Some(items),
            '\'' | '"' => {
                let mut item = String::new();
                loop {
                    match chars.next()? {
                        '\\' => item.push(chars.next()?),
                        ch if ch == c => break,
                        ch => item.push(ch),
                    }
                }
                items.push(item);
            }
            _ => return None,
        }
    }
}
