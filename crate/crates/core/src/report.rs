//! Tabular outputs of a training run.

use std::io::Write;

use crate::error::Result;
use crate::model::EpochRecord;

fn exit_label(k: usize, exits: usize) -> String {
    if k + 1 == exits {
        "f".to_string()
    } else {
        (k + 1).to_string()
    }
}

/// Loss history CSV: `epoch,total,lt_1..lt_n,lt_f,ls_1..ls_n,ls_f`.
pub fn write_loss_history<W: Write>(mut w: W, history: &[EpochRecord], num_exits: usize) -> Result<()> {
    let mut header = vec!["epoch".to_string(), "total".to_string()];
    header.extend((0..num_exits).map(|k| format!("lt_{}", exit_label(k, num_exits))));
    header.extend((0..num_exits).map(|k| format!("ls_{}", exit_label(k, num_exits))));
    writeln!(w, "{}", header.join(","))?;
    for rec in history {
        let mut row = vec![rec.epoch.to_string(), rec.loss.total.to_string()];
        row.extend(rec.loss.target.iter().map(f64::to_string));
        row.extend(rec.loss.fairness.iter().map(f64::to_string));
        writeln!(w, "{}", row.join(","))?;
    }
    Ok(())
}
