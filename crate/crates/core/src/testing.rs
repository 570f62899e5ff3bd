//! Loopback HTTP fixture for exercising the remote provider adapters.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::thread::JoinHandle;

pub(crate) struct Reply {
    status: u16,
    body: String,
}

impl Reply {
    pub(crate) fn ok(body: &str) -> Self {
        Self::status(200, body)
    }

    pub(crate) fn status(status: u16, body: &str) -> Self {
        Self {
            status,
            body: body.to_string(),
        }
    }
}

#[derive(Debug)]
pub(crate) struct Request {
    pub(crate) headers: Vec<(String, String)>,
    pub(crate) body: String,
}

impl Request {
    pub(crate) fn header(&self, name: &str) -> Option<String> {
        self.headers
            .iter()
            .find(|(k, _)| k.eq_ignore_ascii_case(name))
            .map(|(_, v)| v.clone())
    }
}

pub(crate) struct Server {
    addr: String,
    handle: JoinHandle<Vec<Request>>,
}

impl Server {
    pub(crate) fn url(&self) -> String {
        format!("http://{}/v1", self.addr)
    }

    /// Waits until every scripted reply has been served.
    pub(crate) fn finish(self) -> Vec<Request> {
        self.handle.join().expect("fixture thread panicked")
    }
}

/// Serves `replies` in order, one connection each.
pub(crate) fn http_json_server(replies: Vec<Reply>) -> Server {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    let handle = std::thread::spawn(move || {
        let mut seen = Vec::new();
        for reply in replies {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut headers = Vec::new();
            let mut line = String::new();
            reader.read_line(&mut line).unwrap();
            loop {
                line.clear();
                reader.read_line(&mut line).unwrap();
                let trimmed = line.trim_end();
                if trimmed.is_empty() {
                    break;
                }
                if let Some((k, v)) = trimmed.split_once(':') {
                    headers.push((k.trim().to_string(), v.trim().to_string()));
                }
            }
            let find = |name: &str| {
                headers
                    .iter()
                    .find(|(k, _): &&(String, String)| k.eq_ignore_ascii_case(name))
                    .map(|(_, v)| v.clone())
            };
            let mut body = Vec::new();
            if let Some(len) = find("content-length") {
                body.resize(len.parse().unwrap(), 0);
                reader.read_exact(&mut body).unwrap();
            } else if find("transfer-encoding").is_some_and(|v| v.contains("chunked")) {
                loop {
                    line.clear();
                    reader.read_line(&mut line).unwrap();
                    let size = usize::from_str_radix(line.trim(), 16).unwrap();
                    let mut chunk = vec![0; size + 2];
                    reader.read_exact(&mut chunk).unwrap();
                    if size == 0 {
                        break;
                    }
                    body.extend_from_slice(&chunk[..size]);
                }
            }
            let mut stream = stream;
            let response = format!(
                "HTTP/1.1 {} Scripted\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}",
                reply.status,
                reply.body.len(),
                reply.body
            );
            stream.write_all(response.as_bytes()).unwrap();
            stream.flush().unwrap();
            seen.push(Request {
                headers,
                body: String::from_utf8(body).unwrap(),
            });
        }
        seen
    });
    Server { addr, handle }
}

/// Small two-database catalog shaped like the BIRD `student_club` and
/// `formula_1` schemas, plus a distractor database.
pub(crate) const TOY_CATALOG: &str = r#"{
  "version": 1,
  "databases": [
    {
      "name": "student_club",
      "tables": [
        {"name": "member", "columns": [
          {"name": "member_id", "data_type": "text", "description": "unique id of member"},
          {"name": "first_name", "data_type": "text", "description": "member's first name"},
          {"name": "last_name", "data_type": "text", "description": "member's last name"},
          {"name": "zip", "data_type": "integer", "description": "the zip code of the member's hometown"}
        ]},
        {"name": "zip_code", "columns": [
          {"name": "zip_code", "data_type": "integer", "description": "the zip code"},
          {"name": "city", "data_type": "text", "description": "the city"},
          {"name": "county", "data_type": "text", "description": "the county"},
          {"name": "state", "data_type": "text", "description": "the state"}
        ]},
        {"name": "budget", "columns": [
          {"name": "budget_id", "data_type": "text"},
          {"name": "amount", "data_type": "integer", "value_description": "in dollars"}
        ]}
      ],
      "foreign_keys": ["member.zip=zip_code.zip_code"]
    },
    {
      "name": "formula_1",
      "tables": [
        {"name": "circuits", "columns": [
          {"name": "circuitid", "data_type": "integer"},
          {"name": "name", "data_type": "text", "alias": "circuit name"},
          {"name": "country", "data_type": "text"}
        ]},
        {"name": "races", "alias": "grand prix", "columns": [
          {"name": "raceid", "data_type": "integer"},
          {"name": "year", "data_type": "integer"},
          {"name": "date", "data_type": "date"}
        ]}
      ]
    },
    {
      "name": "library",
      "tables": [
        {"name": "books", "description": "catalogued books", "columns": [
          {"name": "isbn", "data_type": "text"},
          {"name": "title", "data_type": "text"}
        ]}
      ]
    }
  ]
}"#;

pub(crate) fn toy_catalog() -> crate::catalog::Catalog {
    crate::catalog::parse_catalog(TOY_CATALOG).unwrap()
}
