use std::io::{BufRead, BufReader, Write};
use std::net::TcpListener;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use ragtag::retrieval::{
    CachedSearch, FixtureCache, HttpSearchClient, SearchClient, SearchHit,
};

struct Echo {
    calls: Arc<AtomicUsize>,
}

impl SearchClient for Echo {
    fn search(&self, query: &str) -> Result<Vec<SearchHit>, String> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        if query.contains("fail") {
            return Err("service unavailable".into());
        }
        Ok(vec![SearchHit {
            title: String::new(),
            snippet: format!("about {query}"),
        }])
    }
}

#[test]
fn prefetch_fills_the_cache_file_once() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cache.jsonl");
    let calls = Arc::new(AtomicUsize::new(0));
    let queries: Vec<String> = (0..20).map(|i| format!("query {i}")).chain(["query 3".to_string()]).collect();

    let search = CachedSearch::new(
        FixtureCache::open(&path).unwrap(),
        Some(Box::new(Echo { calls: calls.clone() })),
    );
    assert!(search.prefetch(&queries, 4).is_empty());
    assert_eq!(calls.load(Ordering::SeqCst), 20);
    assert_eq!(search.live_calls(), 20);

    // A fresh cache over the same file answers everything without the client.
    let reopened = CachedSearch::new(FixtureCache::open(&path).unwrap(), None);
    for q in &queries {
        assert_eq!(reopened.lookup(q).unwrap()[0].snippet, format!("about {q}"));
    }
    assert_eq!(reopened.live_calls(), 0);
}

#[test]
fn prefetch_reports_failing_queries_in_order() {
    let calls = Arc::new(AtomicUsize::new(0));
    let search = CachedSearch::new(FixtureCache::in_memory([]), Some(Box::new(Echo { calls })));
    let queries = vec!["ok".to_string(), "fail one".to_string(), "fail two".to_string()];
    let errors = search.prefetch(&queries, 3);
    let failed: Vec<String> = errors
        .into_iter()
        .map(|e| match e {
            ragtag::Error::Retrieval { query, .. } => query,
            other => panic!("unexpected {other:?}"),
        })
        .collect();
    assert_eq!(failed, vec!["fail one", "fail two"]);
    assert!(search.cache().get("ok").is_some());
}

#[test]
fn malformed_cache_lines_report_their_index() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cache.jsonl");
    std::fs::write(&path, "{\"query\":\"a\",\"results\":[]}\nnot json\n").unwrap();
    assert!(matches!(
        FixtureCache::open(&path),
        Err(ragtag::Error::Format { record: 1, .. })
    ));
}

/// Serves `bodies` in turn to successive requests and returns the request lines.
fn serve(bodies: Vec<&'static str>) -> (String, std::thread::JoinHandle<Vec<String>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/search", listener.local_addr().unwrap());
    let handle = std::thread::spawn(move || {
        let mut seen = Vec::new();
        for body in bodies {
            let (mut stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut request_line = String::new();
            reader.read_line(&mut request_line).unwrap();
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if line == "\r\n" || line.is_empty() {
                    break;
                }
            }
            seen.push(request_line.trim().to_string());
            write!(
                stream,
                "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            )
            .unwrap();
        }
        seen
    });
    (url, handle)
}

#[test]
fn http_client_accepts_both_response_shapes() {
    let (url, server) = serve(vec![
        r#"[{"title":"T","snippet":"S"}]"#,
        r#"{"results":[{"title":"only title"}]}"#,
    ]);
    let client = HttpSearchClient::new(url, Duration::from_secs(5));
    let a = client.search("rome is far").unwrap();
    assert_eq!(a, vec![SearchHit { title: "T".into(), snippet: "S".into() }]);
    let b = client.search("second").unwrap();
    assert_eq!(b[0].title, "only title");
    assert_eq!(b[0].snippet, "");
    let requests = server.join().unwrap();
    assert!(requests[0].starts_with("GET /search?q=rome"), "{}", requests[0]);
}

#[test]
fn unreachable_service_is_an_error() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/search", listener.local_addr().unwrap());
    drop(listener);
    let client = HttpSearchClient::new(url, Duration::from_secs(2));
    assert!(client.search("anything").is_err());
}
