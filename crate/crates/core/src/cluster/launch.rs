//! Starting daemons: detached local children, or a remote-exec template.

use std::fs::{self, File};
use std::os::unix::process::CommandExt;
use std::path::Path;
use std::process::{Command, ExitStatus, Stdio};
use std::sync::{Arc, Mutex};
use std::thread;

use crate::error::{Error, Result};
use crate::util::shell_quote;

/// A daemon started on this machine. Its exit status appears once it ends.
#[derive(Debug, Clone)]
pub struct Spawned {
    pub pid: u32,
    exit: Arc<Mutex<Option<ExitStatus>>>,
}

impl Spawned {
    pub fn exited(&self) -> Option<ExitStatus> {
        *self.exit.lock().expect("exit slot poisoned")
    }
}

pub enum Launcher {
    Local,
    Remote { template: String },
}

impl Launcher {
    /// Starts `argv` on `host` with `env`, appending output to `log`.
    pub fn launch(&self, host: &str, argv: &[String], env: &[(String, String)], log: &Path) -> Result<Option<Spawned>> {
        match self {
            Launcher::Local => spawn_local(argv, env, log).map(Some),
            Launcher::Remote { template } => {
                let mut script = String::new();
                if let Some(dir) = log.parent() {
                    script.push_str(&format!("mkdir -p {} && ", shell_quote(&dir.to_string_lossy())));
                }
                script.push_str("nohup env");
                for (k, v) in env {
                    script.push_str(&format!(" {}", shell_quote(&format!("{k}={v}"))));
                }
                for a in argv {
                    script.push(' ');
                    script.push_str(&shell_quote(a));
                }
                script.push_str(&format!(" >> {} 2>&1 < /dev/null &", shell_quote(&log.to_string_lossy())));
                run_remote(template, host, &script).map(|_| None)
            }
        }
    }
}

fn spawn_local(argv: &[String], env: &[(String, String)], log: &Path) -> Result<Spawned> {
    let (prog, args) = argv.split_first().ok_or_else(|| Error::InvalidConfig("empty command".into()))?;
    if let Some(dir) = log.parent() {
        fs::create_dir_all(dir).map_err(Error::path_io(dir))?;
    }
    let out = File::options().create(true).append(true).open(log).map_err(Error::path_io(log))?;
    let err = out.try_clone()?;
    let mut child = Command::new(prog)
        .args(args)
        .envs(env.iter().map(|(k, v)| (k, v)))
        .stdin(Stdio::null())
        .stdout(out)
        .stderr(err)
        .process_group(0)
        .spawn()
        .map_err(|e| Error::ClusterUnavailable(format!("cannot start {prog}: {e}")))?;
    let pid = child.id();
    let exit = Arc::new(Mutex::new(None));
    let slot = exit.clone();
    // Reap the daemon when it ends so it never lingers as a zombie.
    thread::spawn(move || {
        if let Ok(status) = child.wait() {
            *slot.lock().expect("exit slot poisoned") = Some(status);
        }
    });
    Ok(Spawned { pid, exit })
}

/// Runs `script` on `host` through the remote-exec template and waits for it.
pub fn run_remote(template: &str, host: &str, script: &str) -> Result<String> {
    let cmd = template
        .replace("{HOST}", &shell_quote(host))
        .replace("{COMMAND}", &shell_quote(script));
    let out = Command::new("/bin/sh")
        .arg("-c")
        .arg(&cmd)
        .stdin(Stdio::null())
        .output()
        .map_err(|e| Error::ClusterUnavailable(format!("{host}: {e}")))?;
    if !out.status.success() {
        return Err(Error::ClusterUnavailable(format!(
            "{host}: remote command failed ({}): {}",
            out.status,
            String::from_utf8_lossy(&out.stderr).trim()
        )));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}
