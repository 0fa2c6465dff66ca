//! CSV and key=value output files.

use std::fmt::Write as _;
use std::path::Path;

use super::runner::TimeSeriesResult;
use super::ScenarioError;

/// Writes `voltages.csv`, `ratios.csv`, `events.csv` and `metrics.txt`
/// into `dir`, creating it if needed.
pub fn write_outputs(result: &TimeSeriesResult, dir: &Path) -> Result<(), ScenarioError> {
    std::fs::create_dir_all(dir)?;

    let mut w = csv::Writer::from_path(dir.join("voltages.csv"))?;
    w.write_record(["time_s", "bus_id", "v_pu"])?;
    for (t, row) in result.times.iter().zip(&result.voltages) {
        let ts = t.to_string();
        for (id, v) in result.bus_ids.iter().zip(row) {
            w.write_record([ts.as_str(), &id.to_string(), &v.to_string()])?;
        }
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("ratios.csv"))?;
    w.write_record(["time_s", "inv_id", "u", "role", "coalition_id"])?;
    for k in 0..result.times.len() {
        let ts = result.times[k].to_string();
        for (n, id) in result.inverter_ids.iter().enumerate() {
            w.write_record([
                ts.as_str(),
                &id.to_string(),
                &result.ratios[k][n].to_string(),
                result.roles[k][n].as_str(),
                &result.coalitions[k][n].to_string(),
            ])?;
        }
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("events.csv"))?;
    w.write_record(["tick", "action", "edge_or_node"])?;
    for e in &result.events {
        w.write_record([e.tick.to_string().as_str(), &e.action, &e.target])?;
    }
    w.flush()?;

    write_metrics(result, &dir.join("metrics.txt"))
}

pub fn write_metrics(result: &TimeSeriesResult, path: &Path) -> Result<(), ScenarioError> {
    let mut s = String::new();
    let _ = writeln!(s, "{}", result.metrics);
    let _ = writeln!(s, "ticks={}", result.ticks);
    let _ = writeln!(s, "messages_sent={}", result.messages_sent);
    let _ = writeln!(s, "messages_dropped={}", result.messages_dropped);
    let _ = writeln!(s, "partition_violations={}", result.partition_violations);
    let _ = writeln!(s, "leader_violations={}", result.leader_violations);
    std::fs::write(path, s)?;
    Ok(())
}
