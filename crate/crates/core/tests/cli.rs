use std::io::Write;
use std::process::{Command, Output, Stdio};

use prover_bridge::read_sexpr;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_prover-bridge"));
    c.env_remove("PROVER_BRIDGE_BACKEND");
    c
}

fn eval(mode: &str, form: &str, extra: &[&str]) -> Output {
    bin().args(["eval", "--mode", mode, "--form", form]).args(extra).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

#[test]
fn eval_success_and_failure() {
    let o = eval("compute", "(+ 1 2)", &[]);
    assert_eq!((stdout(&o).as_str(), o.status.code()), ("(nil 3)\n", Some(0)));
    let o = eval("compute", "(mv 1 2)", &[]);
    assert_eq!((stdout(&o).as_str(), o.status.code()), ("(t nil)\n", Some(1)));
}

#[test]
fn eval_capture_prints_a_captured_line() {
    let o = eval(
        "query",
        "(mv-let (e v state) (assign x 1) (assign r (cw \"hi~%\")))",
        &["--capture-output"],
    );
    assert_eq!(o.status.code(), Some(0));
    let lines: Vec<_> = stdout(&o).lines().map(String::from).collect();
    assert_eq!(lines[0], "(nil nil)");
    let captured = read_sexpr(&lines[1]).unwrap();
    assert!(captured.as_list().unwrap()[1].as_text().unwrap().contains("hi"));
    // prover output goes to stderr, never between result lines
    assert!(String::from_utf8_lossy(&o.stderr).contains("hi"));
}

#[test]
fn quiet_eval_prints_nothing_else() {
    let o = eval("event", "(thm (< 1 2))", &["--quiet"]);
    assert_eq!(stdout(&o), "(nil nil)\n");
    assert!(!String::from_utf8_lossy(&o.stderr).contains("Q.E.D."));
}

#[test]
fn step_limit_flag() {
    assert_eq!(eval("event", "(thm (< 1 2))", &["--step-limit", "1"]).status.code(), Some(1));
    assert_eq!(eval("event", "(thm (< 1 2))", &["--step-limit", "100"]).status.code(), Some(0));
}

#[test]
fn usage_and_backend_errors() {
    assert_eq!(bin().args(["eval", "--form", "1"]).output().unwrap().status.code(), Some(2));
    assert_eq!(eval("compute", "(1", &[]).status.code(), Some(2));
    let o = bin()
        .args(["--backend", "/no/such/prover", "eval", "--mode", "compute", "--form", "1"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(3));
    let o = bin()
        .env("PROVER_BRIDGE_BACKEND", "/no/such/prover")
        .args(["eval", "--mode", "compute", "--form", "1"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn script_runs_every_line() {
    let mut file = tempfile::NamedTempFile::new().unwrap();
    writeln!(
        file,
        "; setup\n(event (defconst *k* 5))\n\n(compute *k*)\n(query (mv nil (list *k* *k*) state))\n(compute (fms \"seen~%\"))"
    )
    .unwrap();
    let o = bin().arg("script").arg(file.path()).arg("--capture-output").output().unwrap();
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(
        stdout(&o),
        "(nil nil)\n(nil 5)\n(nil (5 5))\n(nil nil)\n(captured \"seen\\n\")\n"
    );

    let mut bad = tempfile::NamedTempFile::new().unwrap();
    writeln!(bad, "(compute 1)\n(compute (mv 1 2))").unwrap();
    let o = bin().arg("script").arg(bad.path()).output().unwrap();
    assert_eq!((stdout(&o).as_str(), o.status.code()), ("(nil 1)\n(t nil)\n", Some(1)));

    let mut malformed = tempfile::NamedTempFile::new().unwrap();
    writeln!(malformed, "(compute 1)\n(explode 1)").unwrap();
    let o = bin().arg("script").arg(malformed.path()).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(stdout(&o), "");
}

#[test]
fn repl_reads_stdin() {
    let mut child = bin()
        .arg("repl")
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    child
        .stdin
        .take()
        .unwrap()
        .write_all(b"(compute (+ 2 2))\n(frob)\n(event (defconst *a* 1))\n(compute *a*)\n:quit\n(compute 9)\n")
        .unwrap();
    let o = child.wait_with_output().unwrap();
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(stdout(&o), "(nil 4)\n(nil nil)\n(nil 1)\n");
}

#[test]
fn eval_through_a_pool() {
    use std::io::{BufRead, BufReader};
    let mut pool = bin()
        .args(["pool", "--workers", "1", "--listen", "127.0.0.1:0"])
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let mut stderr = BufReader::new(pool.stderr.take().unwrap());
    let mut line = String::new();
    stderr.read_line(&mut line).unwrap();
    let addr = line.trim().strip_prefix("listening on ").unwrap().to_string();
    let o = bin()
        .args(["--backend", &format!("tcp://{addr}"), "eval", "--mode", "compute", "--form", "(* 6 7)"])
        .output()
        .unwrap();
    pool.kill().unwrap();
    pool.wait().unwrap();
    assert_eq!((stdout(&o).as_str(), o.status.code()), ("(nil 42)\n", Some(0)));
}
