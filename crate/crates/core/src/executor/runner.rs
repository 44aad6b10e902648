//! Evaluator execution: the in-process `expr` language and external runner
//! processes speaking newline-delimited JSON.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc;
use std::thread;
use std::time::Duration;

use serde_json::{json, Value};
use thiserror::Error;

use super::expr::{Outcome, Program, ResponseView};
use super::BUILTIN_LANGUAGE;
use crate::config::ExecutionConfig;
use crate::Parallelism;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EvalError {
    #[error("evaluator timed out on response {0}")]
    Timeout(usize),
    #[error("evaluator crashed: {0}")]
    Crash(String),
    #[error("evaluator program rejected: {0}")]
    Rejected(String),
    #[error("no runner configured for language {0}")]
    UnknownLanguage(String),
}

/// One response as the evaluator sees it.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalInput {
    pub text: String,
    pub model: String,
    pub vars: BTreeMap<String, String>,
}

#[derive(Debug, Clone)]
pub struct EvaluatorRunner {
    pub timeout: Duration,
    pub runners: BTreeMap<String, Vec<String>>,
    pub parallelism: Parallelism,
}

impl Default for EvaluatorRunner {
    fn default() -> Self {
        EvaluatorRunner { timeout: Duration::from_secs(5), runners: BTreeMap::new(), parallelism: Parallelism::Sequential }
    }
}

impl EvaluatorRunner {
    pub fn from_config(cfg: &ExecutionConfig) -> Self {
        EvaluatorRunner {
            timeout: Duration::from_millis(cfg.evaluator_timeout_ms),
            runners: cfg.runners.iter().map(|(k, v)| (k.clone(), v.command.clone())).collect(),
            parallelism: if cfg.parallel_evaluators { Parallelism::Parallel } else { Parallelism::Sequential },
        }
    }

    pub fn supports(&self, language: &str) -> bool {
        language == BUILTIN_LANGUAGE || self.runners.contains_key(language)
    }

    /// Dry-run check. The built-in language is fully parsed; programs for an
    /// external runner only need to be non-empty, since their syntax is the
    /// runner's business.
    pub fn check(&self, language: &str, program: &str) -> Result<(), EvalError> {
        if language == BUILTIN_LANGUAGE {
            return Program::parse(program).map(|_| ()).map_err(|e| EvalError::Rejected(e.to_string()));
        }
        if !self.runners.contains_key(language) {
            return Err(EvalError::UnknownLanguage(language.to_owned()));
        }
        if program.trim().is_empty() {
            return Err(EvalError::Rejected("program is empty".into()));
        }
        Ok(())
    }

    pub fn run(&self, language: &str, program: &str, inputs: &[EvalInput]) -> Result<Vec<Outcome>, EvalError> {
        if language == BUILTIN_LANGUAGE {
            let prog = Program::parse(program).map_err(|e| EvalError::Rejected(e.to_string()))?;
            let indexed: Vec<(usize, &EvalInput)> = inputs.iter().enumerate().collect();
            return crate::par::try_map(self.parallelism, &indexed, |(i, input)| {
                prog.evaluate(ResponseView { text: &input.text, model: &input.model, vars: &input.vars })
                    .map_err(|e| EvalError::Crash(format!("response {i}: {e}")))
            });
        }
        let command = self.runners.get(language).ok_or_else(|| EvalError::UnknownLanguage(language.to_owned()))?;
        ExternalRunner::spawn(command)?.run_all(program, inputs, self.timeout)
    }
}

struct ExternalRunner {
    child: Child,
    stdin: ChildStdin,
    lines: mpsc::Receiver<std::io::Result<String>>,
}

impl ExternalRunner {
    fn spawn(command: &[String]) -> Result<Self, EvalError> {
        let (program, args) = command.split_first().ok_or_else(|| EvalError::Crash("empty runner command".into()))?;
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .map_err(|e| EvalError::Crash(format!("cannot start runner {program}: {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let (tx, lines) = mpsc::channel();
        thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        Ok(ExternalRunner { child, stdin, lines })
    }

    fn run_all(mut self, program: &str, inputs: &[EvalInput], timeout: Duration) -> Result<Vec<Outcome>, EvalError> {
        let mut out = Vec::with_capacity(inputs.len());
        for (i, input) in inputs.iter().enumerate() {
            let request = json!({
                "program": program,
                "response": {"text": input.text, "model": input.model, "vars": input.vars},
            });
            writeln!(self.stdin, "{request}")
                .and_then(|_| self.stdin.flush())
                .map_err(|e| EvalError::Crash(format!("runner closed its input: {e}")))?;
            let line = match self.lines.recv_timeout(timeout) {
                Ok(Ok(line)) => line,
                Ok(Err(e)) => return Err(EvalError::Crash(format!("reading runner output: {e}"))),
                Err(mpsc::RecvTimeoutError::Timeout) => return Err(EvalError::Timeout(i)),
                Err(mpsc::RecvTimeoutError::Disconnected) => {
                    return Err(EvalError::Crash("runner exited before replying".into()))
                }
            };
            out.push(parse_reply(&line)?);
        }
        Ok(out)
    }
}

impl Drop for ExternalRunner {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

fn parse_reply(line: &str) -> Result<Outcome, EvalError> {
    let v: Value = serde_json::from_str(line).map_err(|e| EvalError::Crash(format!("runner reply is not JSON: {e}")))?;
    match v.get("ok").and_then(Value::as_bool) {
        Some(true) => match v.get("value") {
            Some(Value::Bool(b)) => Ok(Outcome::Bool(*b)),
            Some(Value::Number(n)) => Ok(Outcome::Number(n.as_f64().unwrap_or(f64::NAN))),
            other => Err(EvalError::Crash(format!("evaluate returned {}, expected boolean or number", other.unwrap_or(&Value::Null)))),
        },
        Some(false) => Err(EvalError::Crash(
            v.get("error").and_then(Value::as_str).unwrap_or("unknown error").to_owned(),
        )),
        None => Err(EvalError::Crash("runner reply has no ok field".into())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn input(text: &str) -> EvalInput {
        EvalInput { text: text.into(), model: "p/m".into(), vars: BTreeMap::new() }
    }

    fn sh_runner(script: &str) -> EvaluatorRunner {
        EvaluatorRunner {
            timeout: Duration::from_millis(300),
            runners: BTreeMap::from([("sh".to_string(), vec!["sh".into(), "-c".into(), script.into()])]),
            ..EvaluatorRunner::default()
        }
    }

    #[test]
    fn builtin_runs_in_order() {
        let r = EvaluatorRunner { parallelism: Parallelism::Parallel, ..EvaluatorRunner::default() };
        let out = r
            .run(BUILTIN_LANGUAGE, "evaluate(r) = contains(r.text, \"√π\")", &[input("√π"), input("no"), input("yes √π")])
            .unwrap();
        assert_eq!(out, vec![Outcome::Bool(true), Outcome::Bool(false), Outcome::Bool(true)]);
    }

    #[test]
    fn builtin_crash_names_response() {
        let r = EvaluatorRunner::default();
        let err = r.run(BUILTIN_LANGUAGE, "evaluate(r) = number(r.text) > 1", &[input("2"), input("x")]).unwrap_err();
        assert!(matches!(err, EvalError::Crash(ref d) if d.contains("response 1")), "{err:?}");
    }

    #[test]
    fn check_rules() {
        let r = sh_runner("cat");
        assert!(r.check(BUILTIN_LANGUAGE, "evaluate(r) = true").is_ok());
        assert!(matches!(r.check(BUILTIN_LANGUAGE, "oops"), Err(EvalError::Rejected(_))));
        assert!(r.check("sh", "anything").is_ok());
        assert!(r.check("sh", "  ").is_err());
        assert_eq!(r.check("ruby", "x"), Err(EvalError::UnknownLanguage("ruby".into())));
    }

    #[test]
    fn external_protocol_reply_values() {
        let r = sh_runner(r#"while read line; do echo '{"ok": true, "value": 0.5}'; done"#);
        assert_eq!(r.run("sh", "p", &[input("a"), input("b")]).unwrap(), vec![Outcome::Number(0.5); 2]);

        let r = sh_runner(r#"read line; echo '{"ok": false, "error": "boom"}'"#);
        assert_eq!(r.run("sh", "p", &[input("a")]), Err(EvalError::Crash("boom".into())));
    }

    #[test]
    fn external_timeout_reports_index() {
        let r = sh_runner(r#"read line; echo '{"ok": true, "value": true}'; read line; sleep 5"#);
        assert_eq!(r.run("sh", "p", &[input("a"), input("b")]), Err(EvalError::Timeout(1)));
    }

    #[test]
    fn external_exit_is_crash() {
        let r = sh_runner("exit 0");
        assert!(matches!(r.run("sh", "p", &[input("a")]), Err(EvalError::Crash(_))));
    }
}
