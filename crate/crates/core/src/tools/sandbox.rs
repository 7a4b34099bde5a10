//! Subprocess execution for the shell and Python tools.

use std::io::{Read, Write};
use std::path::Path;
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use super::ToolError;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExecOutput {
    pub stdout: String,
    pub stderr: String,
    pub exit_code: Option<i32>,
}

impl ExecOutput {
    pub fn render(&self) -> String {
        let mut out = String::new();
        if !self.stdout.is_empty() {
            out.push_str(&self.stdout);
            if !self.stdout.ends_with('\n') {
                out.push('\n');
            }
        }
        if !self.stderr.is_empty() {
            out.push_str("[stderr]\n");
            out.push_str(&self.stderr);
            if !self.stderr.ends_with('\n') {
                out.push('\n');
            }
        }
        match self.exit_code {
            Some(0) if !out.is_empty() => {}
            Some(code) => out.push_str(&format!("[exit code: {code}]")),
            None => out.push_str("[terminated by signal]"),
        }
        out.trim_end().to_string()
    }
}

/// Where commands run. Swap in a container-backed implementation as needed.
pub trait Sandbox: Send + Sync {
    fn run(
        &self,
        program: &str,
        args: &[&str],
        stdin: Option<&str>,
        cwd: &Path,
        timeout: Duration,
    ) -> Result<ExecOutput, ToolError>;
}

/// Runs commands as local child processes, killing the whole process group
/// on timeout.
#[derive(Debug, Clone, Default)]
pub struct SubprocessSandbox;

impl Sandbox for SubprocessSandbox {
    fn run(
        &self,
        program: &str,
        args: &[&str],
        stdin: Option<&str>,
        cwd: &Path,
        timeout: Duration,
    ) -> Result<ExecOutput, ToolError> {
        let mut cmd = Command::new(program);
        cmd.args(args)
            .current_dir(cwd)
            .stdin(if stdin.is_some() { Stdio::piped() } else { Stdio::null() })
            .stdout(Stdio::piped())
            .stderr(Stdio::piped());
        #[cfg(unix)]
        {
            use std::os::unix::process::CommandExt;
            cmd.process_group(0);
        }
        let mut child = cmd
            .spawn()
            .map_err(|e| ToolError::failure(program, format!("cannot start `{program}`: {e}")))?;

        if let (Some(input), Some(mut pipe)) = (stdin, child.stdin.take()) {
            let input = input.to_string();
            std::thread::spawn(move || {
                let _ = pipe.write_all(input.as_bytes());
            });
        }
        let drain = |pipe: Option<Box<dyn Read + Send>>| {
            std::thread::spawn(move || {
                let mut buf = Vec::new();
                if let Some(mut p) = pipe {
                    let _ = p.read_to_end(&mut buf);
                }
                String::from_utf8_lossy(&buf).into_owned()
            })
        };
        let out = drain(child.stdout.take().map(|p| Box::new(p) as Box<dyn Read + Send>));
        let err = drain(child.stderr.take().map(|p| Box::new(p) as Box<dyn Read + Send>));

        let deadline = Instant::now() + timeout;
        let status = loop {
            match child.try_wait() {
                Ok(Some(status)) => break status,
                Ok(None) if Instant::now() >= deadline => {
                    kill_group(&mut child);
                    return Err(ToolError::ToolTimeout {
                        tool: program.to_string(),
                        secs: timeout.as_secs_f64(),
                    });
                }
                Ok(None) => std::thread::sleep(Duration::from_millis(5)),
                Err(e) => return Err(ToolError::failure(program, e.to_string())),
            }
        };
        Ok(ExecOutput {
            stdout: out.join().unwrap_or_default(),
            stderr: err.join().unwrap_or_default(),
            exit_code: status.code(),
        })
    }
}

fn kill_group(child: &mut std::process::Child) {
    #[cfg(unix)]
    {
        let _ = Command::new("kill")
            .args(["-s", "KILL", "--", &format!("-{}", child.id())])
            .stdout(Stdio::null())
            .stderr(Stdio::null())
            .status();
    }
    let _ = child.kill();
    let _ = child.wait();
}

/// Refuses a handful of obviously destructive shell commands.
pub fn check_command(command: &str) -> Result<(), String> {
    let squashed: String = command.split_whitespace().collect::<Vec<_>>().join(" ");
    const DENY: &[&str] = &[
        "rm -rf /",
        "rm -rf /*",
        "rm -fr /",
        "mkfs",
        ":(){",
        "shutdown",
        "reboot",
        "halt",
        "> /dev/sd",
        "of=/dev/",
        "chmod -R 777 /",
    ];
    for pat in DENY {
        let hit = if *pat == "rm -rf /" || *pat == "rm -fr /" {
            // allow `rm -rf /tmp/x`, refuse the bare root
            squashed.contains(&format!("{pat} ")) || squashed.ends_with(pat)
        } else {
            squashed.contains(pat)
        };
        if hit {
            return Err(format!("command refused by sandbox policy (matched `{pat}`)"));
        }
    }
    Ok(())
}
