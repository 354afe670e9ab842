use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::thread;
use std::time::{Duration, Instant};

use log::{info, warn};

use super::{ClusterState, Lifecycle};
use crate::app_master::{JobSpec, COUNTERS_DIR, EVENTS_FILE, READS_DIR, RM_ADDRESS_ENV};
use crate::config::CONFIG_ENV;
use crate::error::{Error, Result};
use crate::protocol::{AppId, AppState, ApplicationRecord, Client, Message};
use crate::util::{now_ms, shell_quote, write_atomic};

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub app_id: AppId,
    pub record: ApplicationRecord,
    /// Where the job's logs were collected.
    pub logs: PathBuf,
    pub wall_ms: u64,
}

impl RunOutcome {
    pub fn succeeded(&self) -> bool {
        self.record.state == AppState::Finished
    }
}

fn am_command(exe: &Path, job_file: &Path) -> String {
    let sibling = exe.with_file_name("ephemyarn-am");
    let job = shell_quote(&job_file.to_string_lossy());
    if sibling.is_file() {
        format!("{} --job {job}", shell_quote(&sibling.to_string_lossy()))
    } else {
        format!("{} am --job {job}", shell_quote(&exe.to_string_lossy()))
    }
}

/// Submits `spec` to the cluster and blocks until the application and its
/// master have both finished.
pub fn run_job(state_path: &Path, spec: &JobSpec) -> Result<RunOutcome> {
    let started = Instant::now();
    spec.validate()?;
    let state = ClusterState::load(state_path)?;
    if state.status != Lifecycle::Ready {
        return Err(Error::ClusterUnavailable(format!("cluster {} is {:?}", state.job_id, state.status)));
    }
    let rm = state
        .rm_address
        .clone()
        .ok_or_else(|| Error::ClusterUnavailable("no resource manager address".into()))?;
    let mut client = Client::new(rm.clone()).with_timeout(Duration::from_secs(5));
    match client.call(&Message::ClusterStatus) {
        Ok(Message::ClusterReport { draining: false, .. }) => {}
        Ok(_) => return Err(Error::ClusterUnavailable("cluster is shutting down".into())),
        Err(e) => return Err(Error::ClusterUnavailable(format!("resource manager at {rm}: {e}"))),
    }
    if spec.output_dir.exists() {
        return Err(Error::OutputExists(spec.output_dir.clone()));
    }

    let jobs_dir = state.staging().join("jobs");
    fs::create_dir_all(&jobs_dir).map_err(Error::path_io(&jobs_dir))?;
    let job_file = jobs_dir.join(format!("{}-{}.job", spec.name, now_ms()));
    write_atomic(&job_file, spec.to_text().as_bytes())?;
    let env = BTreeMap::from([
        (RM_ADDRESS_ENV.to_string(), rm.clone()),
        (CONFIG_ENV.to_string(), state.config_file.display().to_string()),
    ]);
    let reply = client.call(&Message::SubmitApplication {
        name: spec.name.clone(),
        am_command: am_command(&state.exe, &job_file),
        env,
    })?;
    let Message::ApplicationStatus { record, .. } = reply else {
        return Err(Error::Protocol(format!("unexpected reply {reply:?}")));
    };
    let app_id = record.app_id;
    info!("submitted {} as {app_id}", spec.name);

    let tick = Duration::from_millis(state.heartbeat_interval_ms.clamp(10, 500));
    let patience = Duration::from_millis(state.node_timeout_ms.saturating_mul(3).max(1000));
    let mut last_ok = Instant::now();
    let record = loop {
        match client.call(&Message::GetApplication { app_id: app_id.clone() }) {
            Ok(Message::ApplicationStatus { record, am_exited }) => {
                last_ok = Instant::now();
                if record.state.is_terminal() && am_exited {
                    break record;
                }
            }
            Ok(other) => return Err(Error::Protocol(format!("unexpected reply {other:?}"))),
            Err(e) if last_ok.elapsed() > patience => {
                return Err(Error::ClusterUnavailable(format!("lost contact with resource manager: {e}")));
            }
            Err(e) => warn!("status poll failed: {e}"),
        }
        thread::sleep(tick);
    };

    let logs = state.logs_dir().join(&app_id.0);
    let app_staging = spec.staging_dir.clone().unwrap_or_else(|| state.staging().join(&app_id.0));
    collect_am_artifacts(&app_staging, &logs);
    fs::create_dir_all(&logs).map_err(Error::path_io(&logs))?;
    write_atomic(&logs.join("application.json"), serde_json::to_string_pretty(&record)?.as_bytes())?;
    Ok(RunOutcome {
        app_id,
        record,
        logs,
        wall_ms: started.elapsed().as_millis() as u64,
    })
}

/// Copies the AM event log, shuffle read logs and counters next to the container logs.
fn collect_am_artifacts(staging: &Path, dest: &Path) {
    let copy = |from: &Path, to: &Path| -> std::io::Result<()> {
        if from.is_dir() {
            fs::create_dir_all(to)?;
            for e in fs::read_dir(from)? {
                let e = e?;
                if e.file_type()?.is_file() {
                    fs::copy(e.path(), to.join(e.file_name()))?;
                }
            }
        } else if from.is_file() {
            fs::create_dir_all(dest)?;
            fs::copy(from, to)?;
        }
        Ok(())
    };
    for name in [EVENTS_FILE, READS_DIR, COUNTERS_DIR] {
        if let Err(e) = copy(&staging.join(name), &dest.join(name)) {
            warn!("cannot collect {name}: {e}");
        }
    }
}
