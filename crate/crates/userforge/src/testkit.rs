//! Test support: scripted HTTP server, closure backends, and the synthetic
//! fixture corpus.
//!
//! Lives in the library (not `#[cfg(test)]`) so integration tests and the
//! CLI's own tests can reuse it; nothing here is meant for production
//! pipelines.

use std::collections::VecDeque;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use crate::error::{Error, Result};
use crate::gateway::{AttemptError, Backend, ChatRequest, Completion, Gateway, RetryConfig};
use crate::record::{
    AccountKind, AmazonMeta, AuthorFlag, BloggerMeta, RawRecord, RecordMeta, RedditMeta,
    SourceKind, TwitterMeta,
};

// ---------------------------------------------------------------------------
// Backends for tests
// ---------------------------------------------------------------------------

/// Wraps an arbitrary backend in a gateway with default retry settings.
pub fn test_gateway(backend: Box<dyn Backend>) -> Gateway {
    Gateway::from_backend(backend, 4, RetryConfig::default())
}

/// Gateway over the built-in deterministic mock backend, using `dir` as
/// the fixture directory (created if missing).
pub fn mock_gateway_at(dir: &Path) -> Gateway {
    std::fs::create_dir_all(dir).expect("fixture dir");
    let config = crate::gateway::GatewayConfig {
        fixtures_dir: Some(dir.to_path_buf()),
        ..crate::gateway::GatewayConfig::default()
    };
    Gateway::new(&config).expect("mock gateway")
}

/// Backend that delegates to a closure. State goes inside the closure
/// (wrap it in a `Mutex`) when a test needs call-counting behavior.
pub struct FnBackend<F>(pub F)
where
    F: Fn(&ChatRequest) -> String + Send + Sync;

impl<F> Backend for FnBackend<F>
where
    F: Fn(&ChatRequest) -> String + Send + Sync,
{
    fn complete_once(&self, req: &ChatRequest) -> std::result::Result<Completion, AttemptError> {
        Ok(Completion {
            content: (self.0)(req),
            finish_reason: "stop".to_string(),
        })
    }
}

/// Backend that replays responses in order, repeating the last one once
/// the script is exhausted. Handy for re-ask paths.
pub struct SeqBackend {
    responses: Vec<String>,
    cursor: Mutex<usize>,
}

impl SeqBackend {
    pub fn new(responses: Vec<String>) -> Self {
        assert!(!responses.is_empty(), "SeqBackend needs at least one response");
        SeqBackend {
            responses,
            cursor: Mutex::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        *self.cursor.lock().unwrap()
    }
}

impl Backend for SeqBackend {
    fn complete_once(&self, _req: &ChatRequest) -> std::result::Result<Completion, AttemptError> {
        let mut cursor = self.cursor.lock().unwrap();
        let idx = (*cursor).min(self.responses.len() - 1);
        *cursor += 1;
        Ok(Completion {
            content: self.responses[idx].clone(),
            finish_reason: "stop".to_string(),
        })
    }
}

// ---------------------------------------------------------------------------
// Scripted fake HTTP server
// ---------------------------------------------------------------------------

/// One scripted HTTP response.
#[derive(Clone, Debug)]
pub struct ScriptedResponse {
    pub status: u16,
    pub body: String,
    pub delay_ms: u64,
}

impl ScriptedResponse {
    pub fn status(status: u16) -> Self {
        ScriptedResponse {
            status,
            body: format!("{{\"error\":\"scripted {status}\"}}"),
            delay_ms: 0,
        }
    }

    pub fn ok_json(body: &str) -> Self {
        ScriptedResponse {
            status: 200,
            body: body.to_string(),
            delay_ms: 0,
        }
    }

    pub fn with_delay_ms(mut self, delay_ms: u64) -> Self {
        self.delay_ms = delay_ms;
        self
    }
}

/// Minimal HTTP/1.1 server that serves a scripted response per connection
/// and instruments concurrency, for exercising the live gateway path
/// without a network.
pub struct FakeServer {
    addr: std::net::SocketAddr,
    hits: Arc<AtomicUsize>,
    max_in_flight: Arc<AtomicUsize>,
    shutdown: Arc<AtomicBool>,
    accept_thread: Option<JoinHandle<()>>,
}

impl FakeServer {
    pub fn start(responses: Vec<ScriptedResponse>) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").expect("bind fake server");
        listener.set_nonblocking(true).expect("nonblocking listener");
        let addr = listener.local_addr().expect("local addr");
        let hits = Arc::new(AtomicUsize::new(0));
        let in_flight = Arc::new(AtomicUsize::new(0));
        let max_in_flight = Arc::new(AtomicUsize::new(0));
        let shutdown = Arc::new(AtomicBool::new(false));
        let script: Arc<Mutex<VecDeque<ScriptedResponse>>> =
            Arc::new(Mutex::new(responses.into_iter().collect()));

        let accept_thread = {
            let hits = Arc::clone(&hits);
            let in_flight = Arc::clone(&in_flight);
            let max_in_flight = Arc::clone(&max_in_flight);
            let shutdown = Arc::clone(&shutdown);
            std::thread::spawn(move || {
                while !shutdown.load(Ordering::SeqCst) {
                    match listener.accept() {
                        Ok((stream, _)) => {
                            hits.fetch_add(1, Ordering::SeqCst);
                            let current = in_flight.fetch_add(1, Ordering::SeqCst) + 1;
                            max_in_flight.fetch_max(current, Ordering::SeqCst);
                            let response = script
                                .lock()
                                .unwrap()
                                .pop_front()
                                .unwrap_or_else(|| ScriptedResponse::status(500));
                            let in_flight = Arc::clone(&in_flight);
                            std::thread::spawn(move || {
                                serve_connection(stream, response);
                                in_flight.fetch_sub(1, Ordering::SeqCst);
                            });
                        }
                        Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                            std::thread::sleep(Duration::from_millis(2));
                        }
                        Err(_) => break,
                    }
                }
            })
        };

        FakeServer {
            addr,
            hits,
            max_in_flight,
            shutdown,
            accept_thread: Some(accept_thread),
        }
    }

    /// Base URL (the gateway appends `/chat/completions`).
    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Number of connections accepted so far.
    pub fn hits(&self) -> usize {
        self.hits.load(Ordering::SeqCst)
    }

    /// Highest number of simultaneously open connections observed.
    pub fn max_in_flight(&self) -> usize {
        self.max_in_flight.load(Ordering::SeqCst)
    }
}

impl Drop for FakeServer {
    fn drop(&mut self) {
        self.shutdown.store(true, Ordering::SeqCst);
        if let Some(handle) = self.accept_thread.take() {
            let _ = handle.join();
        }
    }
}

fn serve_connection(mut stream: TcpStream, response: ScriptedResponse) {
    let _ = stream.set_read_timeout(Some(Duration::from_secs(5)));
    let mut reader = BufReader::new(stream.try_clone().expect("clone stream"));
    let mut content_length = 0usize;
    loop {
        let mut line = String::new();
        match reader.read_line(&mut line) {
            Ok(0) => return,
            Ok(_) => {
                let lower = line.to_ascii_lowercase();
                if let Some(value) = lower.strip_prefix("content-length:") {
                    content_length = value.trim().parse().unwrap_or(0);
                }
                if line == "\r\n" || line == "\n" {
                    break;
                }
            }
            Err(_) => return,
        }
    }
    if content_length > 0 {
        let mut body = vec![0u8; content_length];
        let _ = reader.read_exact(&mut body);
    }
    if response.delay_ms > 0 {
        std::thread::sleep(Duration::from_millis(response.delay_ms));
    }
    let reason = match response.status {
        200 => "OK",
        400 => "Bad Request",
        429 => "Too Many Requests",
        500 => "Internal Server Error",
        502 => "Bad Gateway",
        _ => "Scripted",
    };
    let payload = format!(
        "HTTP/1.1 {} {}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}",
        response.status,
        reason,
        response.body.len(),
        response.body
    );
    let _ = stream.write_all(payload.as_bytes());
    let _ = stream.flush();
}

// ---------------------------------------------------------------------------
// Fixture corpus
// ---------------------------------------------------------------------------

/// Paths of one generated fixture corpus.
#[derive(Clone, Debug)]
pub struct FixtureCorpus {
    pub root: PathBuf,
    pub reddit: PathBuf,
    pub twitter: PathBuf,
    pub blogger: PathBuf,
    pub amazon: PathBuf,
    pub reddit_comments: PathBuf,
}

const THEMES: [[&str; 3]; 12] = [
    ["gardening", "tomatoes", "compost"],
    ["climbing", "ropes", "granite"],
    ["baking", "sourdough", "ovens"],
    ["chess", "openings", "endgames"],
    ["cycling", "gravel", "derailleur"],
    ["astronomy", "telescope", "nebula"],
    ["pottery", "glazes", "kilns"],
    ["birding", "warblers", "binoculars"],
    ["woodworking", "chisels", "walnut"],
    ["running", "marathons", "intervals"],
    ["photography", "lenses", "exposure"],
    ["cooking", "spices", "skillet"],
];

const BASE_TS: i64 = 1_600_000_000;

fn theme(user: usize) -> [&'static str; 3] {
    THEMES[user % THEMES.len()]
}

/// First-person text of at least `min_chars` characters built from a theme.
fn personal_text(user: usize, idx: usize, min_chars: usize) -> String {
    let [a, b, c] = theme(user);
    let mut text = format!(
        "I spent most of the week on {a} again, and entry {idx} of my notes says it went \
         better than expected. "
    );
    let fillers = [
        format!("My plan for the {b} was simple, but {c} never behaves the same way twice. "),
        format!("We compared results with the usual crowd and I still think the {a} approach wins. "),
        format!("Honestly the {c} part takes me twice as long as it should, and I keep notes on why. "),
        format!("Next month I want to redo the {b} from scratch and see if my record holds. "),
    ];
    let mut i = 0;
    while text.chars().count() < min_chars {
        text.push_str(&fillers[i % fillers.len()]);
        i += 1;
    }
    text
}

/// Text with no first-person pronouns, for the Blogger rejection case.
fn impersonal_text(user: usize, min_chars: usize) -> String {
    let [a, b, c] = theme(user);
    let mut text = format!("The {a} season arrived early this year. ");
    let fillers = [
        format!("Records of {b} behavior explain most of the variance seen so far. "),
        format!("Every {c} responds to weather in a slightly different way. "),
        format!("The standard advice on {a} holds up under repeated trials. "),
    ];
    let mut i = 0;
    while text.chars().count() < min_chars {
        text.push_str(&fillers[i % fillers.len()]);
        i += 1;
    }
    text
}

fn reddit_meta(score: i64, num_comments: i64, flags: &[AuthorFlag]) -> RecordMeta {
    RecordMeta::Reddit(RedditMeta {
        score,
        num_comments,
        author_flags: flags.iter().copied().collect(),
    })
}

fn twitter_meta(retweet: bool, quote: bool, kind: AccountKind, ad: bool) -> RecordMeta {
    RecordMeta::Twitter(TwitterMeta {
        is_retweet: retweet,
        is_quote: quote,
        account_kind: kind,
        is_ad_like: ad,
    })
}

fn record(
    id: String,
    source: SourceKind,
    author: String,
    timestamp: i64,
    text: String,
    meta: RecordMeta,
) -> RawRecord {
    RawRecord {
        record_id: id,
        source,
        author_id: author,
        timestamp,
        text,
        meta,
    }
}

fn write_lines(path: &Path, lines: &[String]) -> Result<()> {
    std::fs::write(path, lines.join("\n") + "\n")
        .map_err(|e| Error::io(path.display().to_string(), e))
}

fn to_line(r: &RawRecord) -> String {
    serde_json::to_string(r).expect("record serializes")
}

/// Writes the full synthetic corpus into `root`: four platform dumps plus
/// a Reddit comments file. Deterministic byte-for-byte.
///
/// Shape (per source: parseable records / records passing the rule filter):
/// reddit 40/36 (+2 malformed lines), twitter 35/30, blogger 26/24,
/// amazon 168/166 of which 160 survive the default 3/8 k-core (20 users ×
/// 8-review windows over 40 items; 3 low-degree noise users peel away).
pub fn write_fixture_corpus(root: &Path) -> Result<FixtureCorpus> {
    std::fs::create_dir_all(root).map_err(|e| Error::io(root.display().to_string(), e))?;

    // --- reddit: 12 users × 3 good posts, then rule rejects + dirty text.
    let mut reddit = Vec::new();
    for u in 0..12usize {
        for p in 0..3usize {
            let mut text = personal_text(u, p, 320);
            if u == 0 && p == 0 {
                text.push_str("see <b>this</b> http://example.com/thread now ");
            }
            reddit.push(to_line(&record(
                format!("rd-u{u:02}-p{p}"),
                SourceKind::Reddit,
                format!("rd_user{u:02}"),
                BASE_TS + (u as i64) * 1000 + (p as i64) * 10,
                text,
                reddit_meta(2 + (u as i64 % 5), 2 + (p as i64), &[]),
            )));
        }
    }
    reddit.push(to_line(&record(
        "rd-rej-score".into(),
        SourceKind::Reddit,
        "rd_user00".into(),
        BASE_TS + 90_000,
        personal_text(0, 9, 320),
        reddit_meta(1, 5, &[]),
    )));
    reddit.push(to_line(&record(
        "rd-rej-comments".into(),
        SourceKind::Reddit,
        "rd_user01".into(),
        BASE_TS + 90_010,
        personal_text(1, 9, 320),
        reddit_meta(5, 0, &[]),
    )));
    reddit.push(to_line(&record(
        "rd-rej-short".into(),
        SourceKind::Reddit,
        "rd_user02".into(),
        BASE_TS + 90_020,
        "Too short to matter.".into(),
        reddit_meta(5, 5, &[]),
    )));
    reddit.push(to_line(&record(
        "rd-rej-bot".into(),
        SourceKind::Reddit,
        "rd_bot".into(),
        BASE_TS + 90_030,
        personal_text(3, 9, 320),
        reddit_meta(9, 9, &[AuthorFlag::Bot]),
    )));
    reddit.insert(5, "this line is not json".to_string());
    reddit.insert(11, r#"{"record_id":"rd-bad","source":"reddit"}"#.to_string());

    // --- twitter: 10 users × 3 good tweets (long-form), then rule rejects.
    let mut twitter = Vec::new();
    for u in 0..10usize {
        for p in 0..3usize {
            let mut text = personal_text(u + 2, p, 310);
            if u == 1 && p == 0 {
                text.push_str("#winning @someone check it ");
            }
            twitter.push(to_line(&record(
                format!("tw-u{u:02}-p{p}"),
                SourceKind::Twitter,
                format!("tw_user{u:02}"),
                BASE_TS + (u as i64) * 1000 + (p as i64) * 10,
                text,
                twitter_meta(false, false, AccountKind::Personal, false),
            )));
        }
    }
    twitter.push(to_line(&record(
        "tw-rej-short".into(),
        SourceKind::Twitter,
        "tw_user00".into(),
        BASE_TS + 90_000,
        "short tweet".into(),
        twitter_meta(false, false, AccountKind::Personal, false),
    )));
    twitter.push(to_line(&record(
        "tw-rej-rt".into(),
        SourceKind::Twitter,
        "tw_user01".into(),
        BASE_TS + 90_010,
        personal_text(3, 9, 310),
        twitter_meta(true, false, AccountKind::Personal, false),
    )));
    twitter.push(to_line(&record(
        "tw-rej-quote".into(),
        SourceKind::Twitter,
        "tw_user02".into(),
        BASE_TS + 90_020,
        personal_text(4, 9, 310),
        twitter_meta(false, true, AccountKind::Personal, false),
    )));
    twitter.push(to_line(&record(
        "tw-rej-brand".into(),
        SourceKind::Twitter,
        "tw_brand".into(),
        BASE_TS + 90_030,
        personal_text(5, 9, 310),
        twitter_meta(false, false, AccountKind::Brand, false),
    )));
    twitter.push(to_line(&record(
        "tw-rej-ad".into(),
        SourceKind::Twitter,
        "tw_user03".into(),
        BASE_TS + 90_040,
        personal_text(6, 9, 310),
        twitter_meta(false, false, AccountKind::Personal, true),
    )));

    // --- blogger: 8 users × 3 good posts, then rule rejects. One post
    // carries a non-English line for the rewrite stage to drop.
    let mut blogger = Vec::new();
    for u in 0..8usize {
        for p in 0..3usize {
            let mut text = personal_text(u + 4, p, 340);
            if u == 2 && p == 1 {
                text.push_str("\nこれは日本語の段落です。\n");
            }
            blogger.push(to_line(&record(
                format!("bl-u{u:02}-p{p}"),
                SourceKind::Blogger,
                format!("bl_user{u:02}"),
                BASE_TS + (u as i64) * 1000 + (p as i64) * 10,
                text,
                RecordMeta::Blogger(BloggerMeta {}),
            )));
        }
    }
    blogger.push(to_line(&record(
        "bl-rej-short".into(),
        SourceKind::Blogger,
        "bl_user00".into(),
        BASE_TS + 90_000,
        "I kept this one too brief.".into(),
        RecordMeta::Blogger(BloggerMeta {}),
    )));
    blogger.push(to_line(&record(
        "bl-rej-impersonal".into(),
        SourceKind::Blogger,
        "bl_user01".into(),
        BASE_TS + 90_010,
        impersonal_text(5, 340),
        RecordMeta::Blogger(BloggerMeta {}),
    )));

    // --- amazon: 20 users, each reviewing an 8-item window (stride 2) of a
    // 40-item catalog — every user has degree 8, every item degree 4, so
    // the whole block survives the 3/8 core. Noise users with 2 reviews on
    // off-catalog items peel away; two short reviews fail the length rule.
    let mut amazon = Vec::new();
    for u in 0..20usize {
        for slot in 0..8usize {
            let item = (2 * u + slot) % 40;
            let item_name = format!("Gadget {item:02} Pro");
            let [a, _, c] = theme(u);
            let text = format!(
                "The {item_name} arrived well packed and survived three weeks of daily use on my \
                 {a} projects. The {c} setting is genuinely useful and the manual even explains \
                 why, which almost never happens."
            );
            amazon.push(to_line(&record(
                format!("az-u{u:02}-r{slot}"),
                SourceKind::Amazon,
                format!("az_user{u:02}"),
                BASE_TS + (u as i64) * 1000 + (slot as i64) * 10,
                text,
                RecordMeta::Amazon(AmazonMeta {
                    item_id: format!("item-{item:02}"),
                    item_name,
                    rating: 1 + ((u + slot) % 5) as u8,
                }),
            )));
        }
    }
    for k in 0..3usize {
        for r in 0..2usize {
            let item = 40 + 2 * k + r;
            amazon.push(to_line(&record(
                format!("az-noise{k}-r{r}"),
                SourceKind::Amazon,
                format!("az_noise{k}"),
                BASE_TS + 800_000 + (k as i64) * 100 + r as i64,
                format!(
                    "A lightly used Gadget {item:02} Pro that does what the box promises, no more \
                     and no less, which after the last one feels like a win."
                ),
                RecordMeta::Amazon(AmazonMeta {
                    item_id: format!("item-{item:02}"),
                    item_name: format!("Gadget {item:02} Pro"),
                    rating: 3,
                }),
            )));
        }
    }
    amazon.push(to_line(&record(
        "az-rej-short0".into(),
        SourceKind::Amazon,
        "az_user00".into(),
        BASE_TS + 900_000,
        "Fine product.".into(),
        RecordMeta::Amazon(AmazonMeta {
            item_id: "item-00".into(),
            item_name: "Gadget 00 Pro".into(),
            rating: 4,
        }),
    )));
    amazon.push(to_line(&record(
        "az-rej-short1".into(),
        SourceKind::Amazon,
        "az_user01".into(),
        BASE_TS + 900_001,
        "Broke fast.".into(),
        RecordMeta::Amazon(AmazonMeta {
            item_id: "item-03".into(),
            item_name: "Gadget 03 Pro".into(),
            rating: 1,
        }),
    )));

    // --- reddit comments: 12 users × 4 short comments for the commenting
    // task; these skip the rule filter by design.
    let mut comments = Vec::new();
    for u in 0..12usize {
        for c in 0..4usize {
            let [a, b, _] = theme(u);
            comments.push(to_line(&record(
                format!("rd-u{u:02}-c{c}"),
                SourceKind::Reddit,
                format!("rd_user{u:02}"),
                BASE_TS + (u as i64) * 1000 + 500 + (c as i64) * 7,
                format!(
                    "Comment {c}: totally agree about {a} — saw the same thing last month when \
                     the {b} finally cooperated."
                ),
                reddit_meta(1, 0, &[]),
            )));
        }
    }

    let corpus = FixtureCorpus {
        root: root.to_path_buf(),
        reddit: root.join("reddit.jsonl"),
        twitter: root.join("twitter.jsonl"),
        blogger: root.join("blogger.jsonl"),
        amazon: root.join("amazon.jsonl"),
        reddit_comments: root.join("reddit_comments.jsonl"),
    };
    write_lines(&corpus.reddit, &reddit)?;
    write_lines(&corpus.twitter, &twitter)?;
    write_lines(&corpus.blogger, &blogger)?;
    write_lines(&corpus.amazon, &amazon)?;
    write_lines(&corpus.reddit_comments, &comments)?;
    Ok(corpus)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filter::FilterEngine;
    use crate::kcore::{kcore_filter, InteractionGraph};
    use crate::record::parse_records_file;

    #[test]
    fn corpus_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a");
        let b = dir.path().join("b");
        write_fixture_corpus(&a).unwrap();
        write_fixture_corpus(&b).unwrap();
        for name in ["reddit.jsonl", "twitter.jsonl", "blogger.jsonl", "amazon.jsonl", "reddit_comments.jsonl"] {
            assert_eq!(
                std::fs::read(a.join(name)).unwrap(),
                std::fs::read(b.join(name)).unwrap(),
                "{name} differs between runs"
            );
        }
    }

    #[test]
    fn corpus_has_documented_parse_and_filter_counts() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = write_fixture_corpus(dir.path()).unwrap();
        let engine = FilterEngine::default();

        let reddit = parse_records_file(&corpus.reddit, SourceKind::Reddit).unwrap();
        assert_eq!(reddit.records.len(), 40);
        assert_eq!(reddit.rejects.len(), 2);
        let kept = reddit
            .records
            .iter()
            .filter(|r| engine.filter_record(r).unwrap().keep)
            .count();
        assert_eq!(kept, 36);

        let twitter = parse_records_file(&corpus.twitter, SourceKind::Twitter).unwrap();
        assert_eq!(twitter.records.len(), 35);
        let kept = twitter
            .records
            .iter()
            .filter(|r| engine.filter_record(r).unwrap().keep)
            .count();
        assert_eq!(kept, 30);

        let blogger = parse_records_file(&corpus.blogger, SourceKind::Blogger).unwrap();
        assert_eq!(blogger.records.len(), 26);
        let kept = blogger
            .records
            .iter()
            .filter(|r| engine.filter_record(r).unwrap().keep)
            .count();
        assert_eq!(kept, 24);

        let amazon = parse_records_file(&corpus.amazon, SourceKind::Amazon).unwrap();
        assert_eq!(amazon.records.len(), 168);
        let kept_amazon = amazon
            .records
            .iter()
            .filter(|r| engine.filter_record(r).unwrap().keep)
            .collect::<Vec<_>>();
        assert_eq!(kept_amazon.len(), 166);

        let graph = InteractionGraph::from_edges(kept_amazon.iter().map(|r| {
            (
                r.author_id.clone(),
                r.meta.as_amazon().unwrap().item_id.clone(),
            )
        }));
        let core = kcore_filter(&graph, 3, 8).unwrap();
        assert_eq!(core.len(), 160);
        assert!(!core.edges.iter().any(|(u, _)| u.starts_with("az_noise")));
    }

    #[test]
    fn fake_server_serves_scripted_responses() {
        let server = FakeServer::start(vec![ScriptedResponse::ok_json("{\"ok\":true}")]);
        let mut stream = TcpStream::connect(server.url().trim_start_matches("http://")).unwrap();
        stream
            .write_all(b"POST /chat/completions HTTP/1.1\r\nHost: x\r\nContent-Length: 2\r\n\r\n{}")
            .unwrap();
        let mut response = String::new();
        stream.read_to_string(&mut response).unwrap();
        assert!(response.starts_with("HTTP/1.1 200"));
        assert!(response.ends_with("{\"ok\":true}"));
        assert_eq!(server.hits(), 1);
    }
}
