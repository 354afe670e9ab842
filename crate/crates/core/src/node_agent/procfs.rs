//! Process-table helpers backed by `/proc` and POSIX signals.

use std::collections::{HashMap, HashSet};
use std::fs;

/// Fields of `/proc/<pid>/stat` we care about.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProcStat {
    pub pid: i32,
    pub state: char,
    pub pgrp: i32,
    pub rss_pages: u64,
}

pub fn parse_stat(text: &str) -> Option<ProcStat> {
    // The command name may contain spaces and parentheses; fields resume after the last ')'.
    let open = text.find('(')?;
    let close = text.rfind(')')?;
    let pid = text[..open].trim().parse().ok()?;
    let rest: Vec<&str> = text[close + 1..].split_whitespace().collect();
    Some(ProcStat {
        pid,
        state: rest.first()?.chars().next()?,
        pgrp: rest.get(2)?.parse().ok()?,
        rss_pages: rest.get(21)?.parse().ok()?,
    })
}

fn all_pids() -> Vec<i32> {
    let Ok(dir) = fs::read_dir("/proc") else { return Vec::new() };
    dir.filter_map(|e| e.ok()?.file_name().to_str()?.parse().ok()).collect()
}

pub fn stat(pid: i32) -> Option<ProcStat> {
    parse_stat(&fs::read_to_string(format!("/proc/{pid}/stat")).ok()?)
}

fn page_size() -> u64 {
    // SAFETY: sysconf has no preconditions.
    let n = unsafe { libc::sysconf(libc::_SC_PAGESIZE) };
    if n > 0 {
        n as u64
    } else {
        4096
    }
}

/// Resident memory in bytes summed over every live process of each group.
pub fn group_rss_bytes(groups: &HashSet<i32>) -> HashMap<i32, u64> {
    let mut out = HashMap::new();
    if groups.is_empty() {
        return out;
    }
    let page = page_size();
    for pid in all_pids() {
        if let Some(st) = stat(pid) {
            if st.state != 'Z' && groups.contains(&st.pgrp) {
                *out.entry(st.pgrp).or_insert(0) += st.rss_pages * page;
            }
        }
    }
    out
}

/// True while `pid` exists and is not a zombie.
pub fn is_alive(pid: i32) -> bool {
    matches!(stat(pid), Some(st) if st.state != 'Z' && st.state != 'X')
}

/// Processes whose environment contains `key=value`.
pub fn pids_with_env(key: &str, value: &str) -> Vec<i32> {
    let needle = format!("{key}={value}");
    let me = std::process::id() as i32;
    all_pids()
        .into_iter()
        .filter(|&pid| pid != me)
        .filter(|&pid| {
            fs::read(format!("/proc/{pid}/environ"))
                .map(|env| env.split(|&b| b == 0).any(|kv| kv == needle.as_bytes()))
                .unwrap_or(false)
        })
        .filter(|&pid| is_alive(pid))
        .collect()
}

pub fn signal(pid: i32, sig: i32) -> bool {
    // SAFETY: kill(2) with a plain pid and signal number.
    unsafe { libc::kill(pid, sig) == 0 }
}

pub fn signal_group(pgid: i32, sig: i32) -> bool {
    pgid > 0 && signal(-pgid, sig)
}
