//! Killing a running engine process.

use std::io::{BufRead, BufReader};
use std::process::{Command, ExitStatus, Stdio};
use std::time::Duration;

#[derive(Debug)]
pub enum KillOutcome {
    /// The child was killed while running.
    Killed,
    /// The child finished before the kill landed.
    Exited(ExitStatus),
}

/// Starts `cmd`, waits for it to print `running`, lets it work for `after`
/// and then kills it with SIGKILL. The child gets no chance to clean up.
pub fn kill_after(mut cmd: Command, after: Duration) -> std::io::Result<KillOutcome> {
    let mut child = cmd.stdout(Stdio::piped()).spawn()?;
    let stdout = child.stdout.take().expect("piped stdout");
    let mut lines = BufReader::new(stdout).lines();
    let mut ready = false;
    for line in lines.by_ref() {
        if line?.trim() == "running" {
            ready = true;
            break;
        }
    }
    if !ready {
        return Ok(KillOutcome::Exited(child.wait()?));
    }
    std::thread::sleep(after);
    let outcome = match child.try_wait()? {
        Some(status) => KillOutcome::Exited(status),
        None => {
            child.kill()?;
            child.wait()?;
            KillOutcome::Killed
        }
    };
    // keep the pipe drained so a child blocked on stdout cannot linger
    for _ in lines {}
    Ok(outcome)
}
