//! CSV outputs. Every file starts with a `# config_hash=<hex>` line, then a
//! header row.

use std::io::{self, Write};

use crate::analysis::CompromiseReport;
use crate::experiment::RunOutput;
use crate::model::PredictabilityRow;

fn with_hash<W: Write>(mut w: W, hash: &str, f: impl FnOnce(&mut csv::Writer<&mut W>) -> csv::Result<()>) -> io::Result<()> {
    writeln!(w, "# config_hash={hash}")?;
    let mut cw = csv::Writer::from_writer(&mut w);
    f(&mut cw).map_err(io::Error::other)?;
    cw.flush()?;
    drop(cw);
    w.flush()
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_transfers<W: Write>(out: &RunOutput, w: W) -> io::Result<()> {
    with_hash(w, &out.config.hash(), |cw| {
        cw.write_record([
            "file_index",
            "file_id",
            "theta",
            "sender",
            "receiver",
            "status",
            "started_at",
            "completed_at",
            "completion_secs",
            "acked_at",
            "chunks",
            "transmissions",
            "messages_sent",
            "messages_transited",
        ])?;
        let mut rows: Vec<(usize, Vec<String>)> = Vec::new();
        for (t_idx, t) in out.transfers.iter().enumerate() {
            let (sent, transited) = out
                .routes
                .iter()
                .filter(|r| r.transfer == t_idx)
                .fold((0, 0), |(s, o), r| (s + r.sent, o + r.transited));
            let status = match (t.completed_at, t.verified) {
                (Some(_), true) => "complete",
                (Some(_), false) => "corrupt",
                (None, _) => "incomplete",
            };
            rows.push((
                t.file_index,
                vec![
                    t.file_index.to_string(),
                    hex::encode(t.file_id.0),
                    t.theta.to_string(),
                    t.sender.clone(),
                    t.receiver.clone(),
                    status.to_owned(),
                    t.started_at.to_string(),
                    opt(t.completed_at),
                    opt(t.completed_at.map(|c| c - t.started_at)),
                    opt(t.acked_at),
                    t.chunks.to_string(),
                    t.transmissions.to_string(),
                    sent.to_string(),
                    transited.to_string(),
                ],
            ));
        }
        for &f in &out.skipped {
            let mut row = vec![String::new(); 14];
            row[0] = f.to_string();
            row[2] = out.config.theta_for_file(f).to_string();
            row[5] = "skipped".to_owned();
            rows.push((f, row));
        }
        rows.sort_by_key(|(f, _)| *f);
        for (_, r) in rows {
            cw.write_record(&r)?;
        }
        Ok(())
    })
}

/// One row per distinct threshold, in configuration order.
pub fn write_fig6<W: Write>(out: &RunOutput, w: W) -> io::Result<()> {
    let mut thetas: Vec<f64> = Vec::new();
    for &t in &out.config.theta.0 {
        if !thetas.contains(&t) {
            thetas.push(t);
        }
    }
    with_hash(w, &out.config.hash(), |cw| {
        cw.write_record([
            "theta",
            "routes",
            "messages_sent",
            "messages_transited",
            "transit_rate",
            "mean_layer_size",
            "transfers",
            "completed",
            "completion_rate",
            "mean_completion_secs",
        ])?;
        for t in thetas {
            let routes: Vec<_> = out.routes.iter().filter(|r| r.theta == t).collect();
            let sent: u64 = routes.iter().map(|r| r.sent).sum();
            let transited: u64 = routes.iter().map(|r| r.transited).sum();
            let transfers: Vec<_> = out.transfers.iter().filter(|x| x.theta == t).collect();
            let times: Vec<f64> = transfers
                .iter()
                .filter_map(|x| x.completed_at.map(|c| c - x.started_at))
                .collect();
            let rate = |a: usize, b: usize| if b == 0 { String::new() } else { (a as f64 / b as f64).to_string() };
            cw.write_record([
                t.to_string(),
                routes.len().to_string(),
                sent.to_string(),
                transited.to_string(),
                rate(transited as usize, sent as usize),
                if routes.is_empty() {
                    String::new()
                } else {
                    out.mean_layer_size(Some(t)).to_string()
                },
                transfers.len().to_string(),
                times.len().to_string(),
                rate(times.len(), transfers.len()),
                if times.is_empty() {
                    String::new()
                } else {
                    (times.iter().sum::<f64>() / times.len() as f64).to_string()
                },
            ])?;
        }
        Ok(())
    })
}

pub fn write_fig4<W: Write>(rows: &[PredictabilityRow], hash: &str, w: W) -> io::Result<()> {
    with_hash(w, hash, |cw| {
        cw.write_record(["model", "mu", "score"])?;
        for r in rows {
            cw.write_record([r.model.name().to_owned(), r.mu.to_string(), r.score.to_string()])?;
        }
        Ok(())
    })
}

fn num(x: f64) -> String {
    if x.is_nan() {
        String::new()
    } else {
        x.to_string()
    }
}

pub fn write_fig5<W: Write>(report: &CompromiseReport, hash: &str, w: W) -> io::Result<()> {
    with_hash(w, hash, |cw| {
        cw.write_record([
            "adversary_users",
            "adv_fraction",
            "samples",
            "ends_compromised_frac",
            "full_compromised_frac",
            "mean_observed_msg_frac",
            "p90_observed_msg_frac",
            "p_correlate_closed",
            "p_full_closed",
        ])?;
        for r in &report.rows {
            cw.write_record([
                r.adversary_users.to_string(),
                num(r.adv_fraction),
                r.samples.to_string(),
                num(r.ends_compromised_frac),
                num(r.full_compromised_frac),
                num(r.mean_observed_msg_frac),
                num(r.p90_observed_msg_frac),
                num(r.p_correlate_closed),
                num(r.p_full_closed),
            ])?;
        }
        Ok(())
    })
}

/// Reads back any of the files above, skipping the hash line.
pub fn read_csv(text: &str) -> csv::Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let header = r.headers()?.iter().map(str::to_owned).collect();
    let rows = r
        .records()
        .map(|rec| rec.map(|r| r.iter().map(str::to_owned).collect()))
        .collect::<csv::Result<_>>()?;
    Ok((header, rows))
}
