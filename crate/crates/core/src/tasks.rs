//! Task bodies run inside containers through `ephemyarn task <kind>`.
//!
//! Every task writes its final files under a private temporary name and
//! renames them into place, so a killed attempt never leaves a partial
//! file where a reader or the output committer would see it.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::hash::{Hash, Hasher};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::app_master::{COUNTERS_DIR, READS_DIR, TEMP_DIR};
use crate::bench::data::{sort_records, write_rows, RecordReader, SplitPoints};
use crate::bench::record::{key_of, map_shard_name, reduce_part_name, shard_range};
use crate::error::{Error, Result};
use crate::util::write_atomic;

/// Identity of the running attempt, used to name temporary files.
pub fn attempt_tag() -> String {
    std::env::var("CONTAINER_ID").unwrap_or_else(|_| format!("pid{}", std::process::id()))
}

pub fn shuffle_dir(staging: &Path, map_index: u32) -> PathBuf {
    staging.join(format!("map_{map_index}"))
}

pub fn shuffle_file(staging: &Path, map_index: u32, reducer: u32) -> PathBuf {
    shuffle_dir(staging, map_index).join(format!("part_{reducer}"))
}

pub fn write_counters(staging: &Path, name: &str, counters: &BTreeMap<String, u64>) -> Result<()> {
    let dir = staging.join(COUNTERS_DIR);
    fs::create_dir_all(&dir).map_err(Error::path_io(&dir))?;
    write_atomic(&dir.join(format!("{name}.json")), serde_json::to_string(counters)?.as_bytes())
}

fn temp_dir(base: &Path) -> Result<PathBuf> {
    let dir = base.join(TEMP_DIR).join(attempt_tag());
    if dir.exists() {
        fs::remove_dir_all(&dir).map_err(Error::path_io(&dir))?;
    }
    fs::create_dir_all(&dir).map_err(Error::path_io(&dir))?;
    Ok(dir)
}

/// Moves `tmp` to `dest`, replacing what an earlier attempt may have left.
fn publish(tmp: &Path, dest: &Path) -> Result<()> {
    if dest.is_dir() {
        fs::remove_dir_all(dest).map_err(Error::path_io(dest))?;
    }
    fs::rename(tmp, dest).map_err(Error::path_io(dest))
}

fn cleanup_temp(base: &Path) {
    let _ = fs::remove_dir(base.join(TEMP_DIR).join(attempt_tag()));
    let _ = fs::remove_dir(base.join(TEMP_DIR));
}

/// Mapper-only generator: writes rows of shard `index` to `<output>/part-m-<index>`.
pub fn teragen_map(rows: u64, mappers: u32, seed: u64, index: u32, output: &Path, staging: Option<&Path>) -> Result<u64> {
    if index >= mappers {
        return Err(Error::InvalidJobSpec(format!("task index {index} out of range for {mappers} mappers")));
    }
    let (start, end) = shard_range(rows, mappers, index);
    let tmp = temp_dir(output)?;
    let name = map_shard_name(index);
    write_rows(&tmp.join(&name), seed, start, end)?;
    publish(&tmp.join(&name), &output.join(&name))?;
    cleanup_temp(output);
    if let Some(st) = staging {
        write_counters(
            st,
            &format!("map-{index}"),
            &BTreeMap::from([("map_output_records".into(), end - start)]),
        )?;
    }
    Ok(end - start)
}

/// Range-partitions one input shard into `staging/map_<index>/part_<r>`.
pub fn terasort_map(input: &Path, splits_file: &Path, reducers: u32, index: u32, staging: &Path) -> Result<u64> {
    let bytes = fs::read(splits_file).map_err(Error::path_io(splits_file))?;
    let splits = SplitPoints::from_bytes(&bytes)?;
    if splits.keys.len() + 1 != reducers as usize {
        return Err(Error::InvalidJobSpec(format!(
            "{} split point(s) for {reducers} reducer(s)",
            splits.keys.len()
        )));
    }
    let tmp = temp_dir(staging)?;
    let mut writers: Vec<BufWriter<File>> = (0..reducers)
        .map(|r| {
            let p = tmp.join(format!("part_{r}"));
            File::create(&p).map(|f| BufWriter::with_capacity(1 << 18, f)).map_err(Error::path_io(&p))
        })
        .collect::<Result<_>>()?;
    let mut reader = RecordReader::open(input)?;
    let mut n = 0u64;
    while let Some(rec) = reader.next_record()? {
        writers[splits.partition(key_of(&rec))].write_all(&rec)?;
        n += 1;
    }
    for w in writers {
        w.into_inner().map_err(|e| e.into_error())?.sync_data()?;
    }
    publish(&tmp, &shuffle_dir(staging, index))?;
    let _ = fs::remove_dir(staging.join(TEMP_DIR));
    write_counters(
        staging,
        &format!("map-{index}"),
        &BTreeMap::from([("map_input_records".into(), n), ("map_output_records".into(), n)]),
    )?;
    Ok(n)
}

/// Records which shuffle files reducer `index` opened.
fn read_log(staging: &Path, index: u32) -> Result<(PathBuf, File)> {
    let dir = staging.join(READS_DIR);
    fs::create_dir_all(&dir).map_err(Error::path_io(&dir))?;
    let path = dir.join(format!("reduce_{index}.{}", attempt_tag()));
    let f = File::create(&path).map_err(Error::path_io(&path))?;
    Ok((path, f))
}

/// Merges partition `index` of every mapper into `<output>/part-r-<index>`.
pub fn terasort_reduce(staging: &Path, output: &Path, index: u32, mappers: u32, budget_mb: u64, spill_dir: &Path) -> Result<u64> {
    let inputs: Vec<PathBuf> = (0..mappers).map(|m| shuffle_file(staging, m, index)).collect();
    let (_, mut log) = read_log(staging, index)?;
    let tmp = temp_dir(output)?;
    let name = reduce_part_name(index);
    let file = File::create(tmp.join(&name)).map_err(Error::path_io(tmp.join(&name)))?;
    let mut log_err = None;
    let n = sort_records(&inputs, (budget_mb as usize).saturating_mul(1 << 20), spill_dir, &file, |p| {
        if let Err(e) = writeln!(log, "{}", p.display()) {
            log_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = log_err {
        return Err(e.into());
    }
    file.sync_data()?;
    publish(&tmp.join(&name), &output.join(&name))?;
    cleanup_temp(output);
    write_counters(
        staging,
        &format!("reduce-{index}"),
        &BTreeMap::from([("reduce_input_records".into(), n), ("reduce_output_records".into(), n)]),
    )?;
    Ok(n)
}

fn line_partition(line: &str, reducers: u32) -> usize {
    let mut h = std::collections::hash_map::DefaultHasher::new();
    line.hash(&mut h);
    (h.finish() % reducers as u64) as usize
}

/// Line-oriented identity mapper. With reducers, lines are hash-partitioned
/// into shuffle files; without, the input is copied to `part-m-<index>`.
pub fn identity_map(input: Option<&Path>, staging: &Path, output: &Path, reducers: u32, index: u32) -> Result<u64> {
    let lines: Vec<String> = match input {
        Some(p) if !p.as_os_str().is_empty() => {
            let f = File::open(p).map_err(Error::path_io(p))?;
            BufReader::new(f).lines().collect::<std::io::Result<_>>()?
        }
        _ => Vec::new(),
    };
    let n = lines.len() as u64;
    if reducers == 0 {
        let tmp = temp_dir(output)?;
        let name = map_shard_name(index);
        let mut text = lines.join("\n");
        if !lines.is_empty() {
            text.push('\n');
        }
        fs::write(tmp.join(&name), text)?;
        publish(&tmp.join(&name), &output.join(&name))?;
        cleanup_temp(output);
    } else {
        let tmp = temp_dir(staging)?;
        let mut parts = vec![String::new(); reducers as usize];
        for line in &lines {
            let p = &mut parts[line_partition(line, reducers)];
            p.push_str(line);
            p.push('\n');
        }
        for (r, text) in parts.iter().enumerate() {
            fs::write(tmp.join(format!("part_{r}")), text)?;
        }
        publish(&tmp, &shuffle_dir(staging, index))?;
        let _ = fs::remove_dir(staging.join(TEMP_DIR));
    }
    write_counters(
        staging,
        &format!("map-{index}"),
        &BTreeMap::from([("map_input_records".into(), n), ("map_output_records".into(), n)]),
    )?;
    Ok(n)
}

/// Concatenates partition `index` of every mapper, in mapper order.
pub fn identity_reduce(staging: &Path, output: &Path, index: u32, mappers: u32) -> Result<u64> {
    let (_, mut log) = read_log(staging, index)?;
    let tmp = temp_dir(output)?;
    let name = reduce_part_name(index);
    let mut out = BufWriter::new(File::create(tmp.join(&name)).map_err(Error::path_io(tmp.join(&name)))?);
    let mut n = 0u64;
    for m in 0..mappers {
        let path = shuffle_file(staging, m, index);
        writeln!(log, "{}", path.display())?;
        let f = File::open(&path).map_err(Error::path_io(&path))?;
        for line in BufReader::new(f).lines() {
            writeln!(out, "{}", line?)?;
            n += 1;
        }
    }
    out.flush()?;
    drop(out);
    publish(&tmp.join(&name), &output.join(&name))?;
    cleanup_temp(output);
    write_counters(
        staging,
        &format!("reduce-{index}"),
        &BTreeMap::from([("reduce_input_records".into(), n), ("reduce_output_records".into(), n)]),
    )?;
    Ok(n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::app_master::sum_counters;
    use crate::bench::data::{sample_split_points, teragen, teravalidate};

    #[test]
    fn terasort_tasks_end_to_end_without_cluster() {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        teragen(2000, 4, 5, &data).unwrap();
        let splits = sample_split_points(&data, 3, 500).unwrap();
        let split_file = dir.path().join("splits");
        fs::write(&split_file, splits.to_bytes()).unwrap();
        let staging = dir.path().join("staging");
        let out = dir.path().join("out");
        fs::create_dir_all(&staging).unwrap();
        fs::create_dir_all(&out).unwrap();
        for i in 0..4 {
            let input = data.join(map_shard_name(i));
            assert_eq!(terasort_map(&input, &split_file, 3, i, &staging).unwrap(), 500);
            // a retried attempt replaces the earlier output
            terasort_map(&input, &split_file, 3, i, &staging).unwrap();
        }
        for r in 0..3 {
            terasort_reduce(&staging, &out, r, 4, 1, dir.path()).unwrap();
        }
        assert!(!out.join(TEMP_DIR).exists());
        let rep = teravalidate(&out).unwrap();
        assert!(rep.sorted);
        assert_eq!(rep.rows, 2000);
        assert_eq!(rep.key_checksum, teravalidate(&data).unwrap().key_checksum);
        let c = sum_counters(&staging.join(COUNTERS_DIR));
        assert_eq!(c["map_output_records"], c["reduce_input_records"]);
        let log = fs::read_dir(staging.join(READS_DIR)).unwrap().count();
        assert_eq!(log, 3);
    }

    #[test]
    fn identity_pipeline_preserves_records() {
        let dir = tempfile::tempdir().unwrap();
        let input = dir.path().join("in.txt");
        fs::write(&input, "alpha\nbeta\ngamma\n").unwrap();
        let staging = dir.path().join("st");
        let out = dir.path().join("out");
        fs::create_dir_all(&out).unwrap();
        identity_map(Some(&input), &staging, &out, 1, 0).unwrap();
        identity_reduce(&staging, &out, 0, 1).unwrap();
        assert_eq!(fs::read_to_string(out.join("part-r-00000")).unwrap(), "alpha\nbeta\ngamma\n");
    }
}
