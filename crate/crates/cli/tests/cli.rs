use std::net::{Ipv4Addr, UdpSocket};
use std::path::Path;
use std::process::{Command, Output, Stdio};
use std::thread;
use std::time::Duration;

use eids_core::announce::{self, Psk, StatusMessage};
use eids_core::pcap;
use eids_core::{Mode, Timestamp};

fn eids(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_eids"))
        .args(args)
        .env_remove("EIDS_PSK")
        .output()
        .expect("run eids")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Longest gap between ARP requests for `ip`, scanning raw frame bytes.
fn max_arp_request_gap(pcap_bytes: &[u8], ip: Ipv4Addr) -> u64 {
    let mut last = None;
    let mut max = 0;
    for rec in pcap::read_all(pcap_bytes).unwrap() {
        let d = &rec.data;
        let is_request = d[12..14] == [0x08, 0x06] && d[20..22] == [0, 1] && d[38..42] == ip.octets();
        if !is_request {
            continue;
        }
        let t = rec.timestamp.as_micros();
        if let Some(prev) = last {
            max = max.max(t - prev);
        }
        last = Some(t);
    }
    max
}

#[test]
fn learn_is_deterministic_and_suggests_twice_the_arp_gap() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("s1.pcap");
    let o = eids(&["simulate", "--duration", "20m", "--node", "S1", "-o", path(&trace)]);
    assert!(o.status.success(), "{}", stderr(&o));

    let gap_us = max_arp_request_gap(&std::fs::read(&trace).unwrap(), Ipv4Addr::new(192, 168, 1, 101));
    assert!(gap_us > 0);

    let (a, b) = (dir.path().join("a.model"), dir.path().join("b.model"));
    let first = eids(&["learn", path(&trace), "--node", "S1", "-o", path(&a)]);
    let second = eids(&["learn", path(&trace), "--node", "S1", "-o", path(&b)]);
    assert!(first.status.success() && second.status.success());
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    let model = std::fs::read_to_string(&a).unwrap();
    let plc = "192.168.1.50";
    assert!(model.lines().any(|l| l.starts_with("FLOW\ttcp\t") && l.contains(plc)));
    assert!(model.lines().any(|l| l.starts_with("FLOW\tarp\t02:00:00:00:00:32")));
    let expected = format!("suggested learning duration {} s", gap_us * 2 / 1_000_000);
    assert!(stderr(&first).contains(&expected), "{}", stderr(&first));
}

#[test]
fn learn_rejects_empty_and_garbage_input() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.pcap");
    std::fs::write(&empty, b"").unwrap();
    let o = eids(&["learn", path(&empty), "--node", "S1", "-o", path(&dir.path().join("m"))]);
    assert_eq!(o.status.code(), Some(2));

    let header_only = dir.path().join("header.pcap");
    let bytes = pcap::PcapWriter::new(Vec::new()).unwrap().into_inner().unwrap();
    std::fs::write(&header_only, bytes).unwrap();
    let o = eids(&["learn", path(&header_only), "--node", "S1", "-o", path(&dir.path().join("m"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn detect_exit_codes_follow_events() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("m");
    let o = eids(&["learn", "--simulate", "--duration", "10m", "-o", path(&model)]);
    assert!(o.status.success(), "{}", stderr(&o));

    let benign = eids(&["detect", "--simulate", "--duration", "12m", "--seed", "5", "--learn-first", "10m"]);
    assert_eq!(benign.status.code(), Some(0), "{}", stdout(&benign));
    assert!(stdout(&benign).is_empty());

    let dos = eids(&[
        "detect",
        "--simulate",
        "--duration",
        "12m",
        "--scenario",
        "dos start=11m duration=1s",
        "--model",
        path(&model),
    ]);
    assert_eq!(dos.status.code(), Some(1));
    let log = stdout(&dos);
    assert!(log.lines().any(|l| l.split('\t').nth(2) == Some("TooFast")), "{log}");

    let sniff = eids(&[
        "detect",
        "--simulate",
        "--duration",
        "12m",
        "--scenario",
        "passive-sniff start=11m",
        "--learn-first",
        "10m",
    ]);
    assert_eq!(sniff.status.code(), Some(0), "{}", stdout(&sniff));
}

#[test]
fn ips_mode_reports_drops() {
    let o = eids(&[
        "detect",
        "--simulate",
        "--duration",
        "11m",
        "--scenario",
        "inject start=630s",
        "--learn-first",
        "10m",
        "--ips",
    ]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(!err.contains(" 0 dropped"), "{err}");
}

#[test]
fn stats_csv() {
    let o = eids(&["stats", "--simulate", "--duration", "2m", "--flow", "tcp:502/rx"]);
    assert!(o.status.success());
    let text = stdout(&o);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("flow,timestamp_us,interarrival_us"));
    let gaps: Vec<f64> = lines.map(|l| l.rsplit(',').next().unwrap().parse().unwrap()).collect();
    assert!(gaps.len() > 1000);
    let mean = gaps.iter().sum::<f64>() / gaps.len() as f64;
    assert!((mean - 100_000.0).abs() < 5_000.0, "{mean}");

    let none = eids(&["stats", "--simulate", "--duration", "1m", "--flow", "udp:9"]);
    assert!(none.status.success());
    assert_eq!(stdout(&none), "flow,timestamp_us,interarrival_us\n");
}

#[test]
fn bad_arguments_exit_two() {
    assert_eq!(eids(&["stats", "--simulate", "--flow", "icmp"]).status.code(), Some(2));
    assert_eq!(eids(&["detect", "--simulate"]).status.code(), Some(2));
    assert_eq!(
        eids(&["learn", "--simulate", "--delta", "3", "-o", "/dev/null"]).status.code(),
        Some(2)
    );
}

#[test]
fn psk_is_not_a_command_line_argument() {
    let o = eids(&["logger", "--psk", "secret", "--run-for", "1s"]);
    assert_eq!(o.status.code(), Some(2));
    let o = eids(&["logger", "--run-for", "1s", "--port", "0"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("EIDS_PSK"));
}

#[test]
fn logger_renders_node_table() {
    let port = UdpSocket::bind((Ipv4Addr::LOCALHOST, 0)).unwrap().local_addr().unwrap().port();
    let child = Command::new(env!("CARGO_BIN_EXE_eids"))
        .args(["logger", "--port", &port.to_string(), "--timeout", "2s", "--run-for", "4s"])
        .env("EIDS_PSK", "cli-test")
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let psk = Psk::new(b"cli-test".to_vec()).unwrap();
    let send = |node_id: u16, intrusion: bool| {
        let msg = announce::encode(
            &StatusMessage {
                node_id,
                msg_time: Timestamp::now().as_millis(),
                intrusion,
                mode: Mode::Active,
                event_count: 0,
            },
            &psk,
        );
        let s = UdpSocket::bind((Ipv4Addr::LOCALHOST, 0)).unwrap();
        s.send_to(&msg, (Ipv4Addr::LOCALHOST, port)).unwrap();
    };
    thread::sleep(Duration::from_millis(500));
    send(1, false);
    thread::sleep(Duration::from_millis(2_300));
    send(2, false);
    send(3, true);
    let out = child.wait_with_output().unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    let want = "ID: 1 is down Intrusion: ???\nID: 2 is up Intrusion: no\nID: 3 is up Intrusion: yes\n";
    assert!(text.contains(want), "{text}");
}

#[test]
fn config_file_applies_and_flags_win() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("eids.conf");
    std::fs::write(&cfg, "# plant\nseed = 5\nduration = 2m\ndelta = 3\n").unwrap();
    let bad = eids(&["--config", path(&cfg), "learn", "--simulate", "-o", path(&dir.path().join("m"))]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(stderr(&bad).contains("[0, 2)"), "{}", stderr(&bad));

    let m = dir.path().join("m");
    let ok = eids(&["--config", path(&cfg), "learn", "--simulate", "--delta", "0.5", "-o", path(&m)]);
    assert!(ok.status.success(), "{}", stderr(&ok));
    let model = std::fs::read_to_string(&m).unwrap();
    assert!(model.lines().any(|l| l.starts_with("TIMING\t") && l.ends_with("\t500")), "{model}");
    assert!(stderr(&ok).contains("over 119 s") || stderr(&ok).contains("over 120 s"), "{}", stderr(&ok));
}
