// SPDX-License-Identifier: Apache-2.0

use std::process::{Command, Stdio};
use std::sync::{Arc, Barrier};
use std::thread;
use std::time::Duration;

use barbie_core::store::{Store, StoreError, Table};

const CHILD_ENV: &str = "BARBIE_STORE_CHILD";

/// Re-runs this test binary as a helper process running `test_name`.
fn spawn_helper(test_name: &str, mode: &str, root: &std::path::Path) -> std::process::Child {
    Command::new(std::env::current_exe().unwrap())
        .args(["--exact", test_name, "--nocapture", "--test-threads=1"])
        .env(CHILD_ENV, mode)
        .env("BARBIE_STORE_ROOT", root)
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .unwrap()
}

#[test]
fn helper_process() {
    let Ok(mode) = std::env::var(CHILD_ENV) else { return };
    let store = Store::open(std::env::var("BARBIE_STORE_ROOT").unwrap()).unwrap();
    match mode.as_str() {
        "race" => {
            let pid = std::process::id().to_string();
            let outcome = match store.put_if_absent(Table::Secrets, "contested", pid.as_bytes()) {
                Ok(()) => "WON",
                Err(StoreError::Exists) => "LOST",
                Err(e) => panic!("{e}"),
            };
            println!("RESULT {outcome} {pid}");
        }
        "writer" => {
            let mut i = 0u64;
            loop {
                let byte = b'a' + (i % 26) as u8;
                store.put(Table::Secrets, "torn", &vec![byte; 256 * 1024]).unwrap();
                i += 1;
            }
        }
        other => panic!("unknown helper mode {other}"),
    }
}

#[test]
fn concurrent_put_if_absent_has_one_winner() {
    let dir = tempfile::tempdir().unwrap();
    let store = Store::open(dir.path()).unwrap();
    for round in 0..20 {
        let key = format!("k{round}");
        let barrier = Arc::new(Barrier::new(8));
        let handles: Vec<_> = (0..8)
            .map(|i| {
                let store = store.clone();
                let barrier = barrier.clone();
                let key = key.clone();
                thread::spawn(move || {
                    barrier.wait();
                    store.put_if_absent(Table::Secrets, &key, format!("{i}").as_bytes())
                })
            })
            .collect();
        let results: Vec<_> = handles.into_iter().map(|h| h.join().unwrap()).collect();
        let wins = results.iter().filter(|r| r.is_ok()).count();
        let exists = results.iter().filter(|r| matches!(r, Err(StoreError::Exists))).count();
        assert_eq!((wins, exists), (1, 7), "round {round}");
    }
    assert_eq!(store.keys(Table::Secrets).unwrap().len(), 20);
}

#[test]
fn put_if_absent_is_exclusive_across_processes() {
    let dir = tempfile::tempdir().unwrap();
    let store = Store::open(dir.path()).unwrap();
    let children: Vec<_> = (0..8).map(|_| spawn_helper("helper_process", "race", dir.path())).collect();
    let mut winners = Vec::new();
    let mut losers = 0;
    for child in children {
        let out = child.wait_with_output().unwrap();
        assert!(out.status.success());
        let text = String::from_utf8(out.stdout).unwrap();
        let at = text.find("RESULT ").expect("helper reported");
        let parts: Vec<_> = text[at..].split_whitespace().collect();
        match parts[1] {
            "WON" => winners.push(parts[2].to_owned()),
            _ => losers += 1,
        }
    }
    assert_eq!(winners.len(), 1);
    assert_eq!(losers, 7);
    assert_eq!(store.get(Table::Secrets, "contested").unwrap(), winners[0].as_bytes());
}

#[test]
fn sibling_writes_are_visible_after_put_returns() {
    let dir = tempfile::tempdir().unwrap();
    let a = Store::open(dir.path()).unwrap();
    let b = Store::open(dir.path()).unwrap();
    a.put(Table::Projects, "p", b"v1").unwrap();
    assert_eq!(b.get(Table::Projects, "p").unwrap(), b"v1");
    b.put(Table::Projects, "p", b"v2").unwrap();
    assert_eq!(a.get(Table::Projects, "p").unwrap(), b"v2");
}

#[test]
fn value_survives_reopen() {
    let dir = tempfile::tempdir().unwrap();
    Store::open(dir.path()).unwrap().put(Table::Sessions, "abc", b"durable").unwrap();
    let reopened = Store::open(dir.path()).unwrap();
    assert_eq!(reopened.get(Table::Sessions, "abc").unwrap(), b"durable");
}

#[test]
fn readers_never_see_torn_records_when_writer_is_killed() {
    let dir = tempfile::tempdir().unwrap();
    let store = Store::open(dir.path()).unwrap().without_fsync();
    store.put(Table::Secrets, "torn", &vec![b'z'; 256 * 1024]).unwrap();
    for round in 0..10 {
        let mut child = spawn_helper("helper_process", "writer", dir.path());
        let mut checks = 0;
        let deadline = std::time::Instant::now() + Duration::from_millis(60 + 15 * round);
        while std::time::Instant::now() < deadline {
            let v = store.get(Table::Secrets, "torn").unwrap();
            assert_eq!(v.len(), 256 * 1024);
            assert!(v.iter().all(|&b| b == v[0]), "mixed record observed");
            checks += 1;
        }
        child.kill().unwrap();
        child.wait().unwrap();
        let v = store.get(Table::Secrets, "torn").unwrap();
        assert_eq!(v.len(), 256 * 1024);
        assert!(v.iter().all(|&b| b == v[0]));
        assert!(checks > 0);
    }
    assert_eq!(store.keys(Table::Secrets).unwrap(), vec!["torn".to_string()]);
}
