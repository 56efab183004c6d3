//! Result files: CSV tables and g2o pose graphs.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use mrslam_core::comms::{LogEvent, Utilization};
use mrslam_core::graph::{Factor, FactorKind, GraphState};
use mrslam_core::linalg::Mat3;
use mrslam_core::{Key, Pose2};
use serde::Serialize;

use crate::merge::MapPoint;
use crate::metrics::MetricsReport;

#[derive(Debug, thiserror::Error)]
pub enum IoError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("g2o line {line}: {msg}")]
    G2o { line: usize, msg: String },
}

#[derive(Serialize)]
struct MetricsRow {
    full_count: usize,
    full_mae_dist: f64,
    full_rmse_dist: f64,
    full_mae_theta_deg: f64,
    full_rmse_theta_deg: f64,
    ir_count: usize,
    ir_mae_dist: f64,
    ir_rmse_dist: f64,
    ir_mae_theta_deg: f64,
    ir_rmse_theta_deg: f64,
    network_avg_bps: f64,
    network_min_bps: f64,
    network_max_bps: f64,
    total_bits: u64,
    cloud_bits: u64,
    ir_loops: usize,
    success: bool,
}

impl From<&MetricsReport> for MetricsRow {
    fn from(m: &MetricsReport) -> Self {
        MetricsRow {
            full_count: m.full.count,
            full_mae_dist: m.full.mae_dist,
            full_rmse_dist: m.full.rmse_dist,
            full_mae_theta_deg: m.full.mae_theta_deg,
            full_rmse_theta_deg: m.full.rmse_theta_deg,
            ir_count: m.ir.count,
            ir_mae_dist: m.ir.mae_dist,
            ir_rmse_dist: m.ir.rmse_dist,
            ir_mae_theta_deg: m.ir.mae_theta_deg,
            ir_rmse_theta_deg: m.ir.rmse_theta_deg,
            network_avg_bps: m.network_avg,
            network_min_bps: m.network_min,
            network_max_bps: m.network_max,
            total_bits: m.total_bits,
            cloud_bits: m.cloud_bits,
            ir_loops: m.ir_loops,
            success: m.success,
        }
    }
}

pub fn write_metrics(path: &Path, m: &MetricsReport) -> Result<(), IoError> {
    let mut w = csv::Writer::from_path(path)?;
    w.serialize(MetricsRow::from(m))?;
    w.flush()?;
    Ok(())
}

pub fn write_channel_log(path: &Path, log: &[LogEvent]) -> Result<(), IoError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["time", "sender", "kind", "size_bits", "subject_robot", "subject_frame"])?;
    for e in log {
        let (sr, sf) = match e.subject {
            Some(k) => (k.robot.to_string(), k.frame.to_string()),
            None => (String::new(), String::new()),
        };
        w.write_record([
            e.time.to_string(),
            e.sender.to_string(),
            e.kind.label().to_string(),
            e.size_bits.to_string(),
            sr,
            sf,
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_utilization(path: &Path, u: &Utilization) -> Result<(), IoError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["time", "bits_per_second"])?;
    for p in &u.series {
        w.write_record([p.time.to_string(), p.bits_per_second.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_map(path: &Path, points: &[MapPoint]) -> Result<(), IoError> {
    let mut w = csv::Writer::from_path(path)?;
    for p in points {
        w.serialize(p)?;
    }
    w.flush()?;
    Ok(())
}

/// Vertex id for a key: robot in the high 16 bits.
pub fn vertex_id(k: Key) -> u32 {
    (k.robot as u32) << 16 | k.frame as u32
}

pub fn key_of(id: u32) -> Option<Key> {
    let robot = u8::try_from(id >> 16).ok()?;
    Some(Key::new(robot, (id & 0xffff) as u16))
}

/// Writes vertices, between-factors as `EDGE_SE2` (information upper
/// triangle), and the prior vertex as `FIX`. Each edge is preceded by a
/// `# KIND` comment so factor kinds survive a round trip.
pub fn write_g2o<W: Write>(mut w: W, g: &GraphState) -> Result<(), IoError> {
    for (k, p) in &g.poses {
        writeln!(w, "VERTEX_SE2 {} {} {} {}", vertex_id(*k), p.x, p.y, p.theta)?;
    }
    for f in &g.factors {
        let Some(b) = f.b else {
            writeln!(w, "FIX {}", vertex_id(f.a))?;
            continue;
        };
        let Some(info) = f.covariance.inverse_spd() else { continue };
        let i = info.0;
        let m = &f.measurement;
        writeln!(w, "# {}", f.kind.label())?;
        writeln!(
            w,
            "EDGE_SE2 {} {} {} {} {} {} {} {} {} {} {}",
            vertex_id(f.a),
            vertex_id(b),
            m.x,
            m.y,
            m.theta,
            i[0][0],
            i[0][1],
            i[0][2],
            i[1][1],
            i[1][2],
            i[2][2]
        )?;
    }
    Ok(())
}

pub fn save_g2o(path: &Path, g: &GraphState) -> Result<(), IoError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_g2o(&mut w, g)?;
    w.flush()?;
    Ok(())
}

/// Parsed g2o contents. `fixed` lists `FIX` vertices.
#[derive(Clone, Debug, Default)]
pub struct G2oGraph {
    pub vertices: Vec<(Key, Pose2)>,
    pub edges: Vec<Factor>,
    pub fixed: Vec<Key>,
}

pub fn read_g2o<R: BufRead>(r: R) -> Result<G2oGraph, IoError> {
    let mut out = G2oGraph::default();
    let mut pending_kind = FactorKind::Odometry;
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        let err = |msg: &str| IoError::G2o {
            line: n + 1,
            msg: msg.to_string(),
        };
        let mut tok = line.split_whitespace();
        let Some(tag) = tok.next() else { continue };
        let rest: Vec<&str> = tok.collect();
        let id = |s: &str| -> Result<Key, IoError> {
            s.parse::<u32>().ok().and_then(key_of).ok_or_else(|| err("bad vertex id"))
        };
        let nums = |s: &[&str]| -> Result<Vec<f64>, IoError> {
            s.iter().map(|t| t.parse::<f64>().map_err(|_| err("bad number"))).collect()
        };
        match tag {
            "#" => {
                if let Some(k) = rest.first().and_then(|l| FactorKind::from_label(l)) {
                    pending_kind = k;
                }
            }
            "VERTEX_SE2" => {
                if rest.len() != 4 {
                    return Err(err("VERTEX_SE2 needs 4 fields"));
                }
                let v = nums(&rest[1..])?;
                out.vertices.push((id(rest[0])?, Pose2::new(v[0], v[1], v[2])));
            }
            "EDGE_SE2" => {
                if rest.len() != 11 {
                    return Err(err("EDGE_SE2 needs 11 fields"));
                }
                let v = nums(&rest[2..])?;
                let info = Mat3([[v[3], v[4], v[5]], [v[4], v[6], v[7]], [v[5], v[7], v[8]]]);
                let cov = info.inverse_spd().ok_or_else(|| err("information not positive definite"))?;
                let (a, b) = (id(rest[0])?, id(rest[1])?);
                out.edges.push(Factor::between(pending_kind, a, b, Pose2::new(v[0], v[1], v[2]), cov));
                pending_kind = FactorKind::Odometry;
            }
            "FIX" => {
                for s in rest {
                    out.fixed.push(id(s)?);
                }
            }
            _ => return Err(err("unknown tag")),
        }
    }
    Ok(out)
}

pub fn load_g2o(path: &Path) -> Result<G2oGraph, IoError> {
    read_g2o(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn g2o_round_trip() {
        let mut g = GraphState::new(0);
        let cov = Mat3([[0.04, 0.01, 0.0], [0.01, 0.09, 0.002], [0.0, 0.002, 0.003]]);
        g.add_factor(Factor::prior(Key::new(0, 0), Pose2::IDENTITY, Mat3::IDENTITY.scale(1e-6))).unwrap();
        g.add_factor(Factor::between(FactorKind::Odometry, Key::new(0, 0), Key::new(0, 1), Pose2::new(1.0, 0.2, 0.1), cov))
            .unwrap();
        let ir = Factor::between(FactorKind::InterRobot, Key::new(0, 1), Key::new(3, 7), Pose2::new(-2.0, 0.5, -1.2), cov);
        g.add_factor(ir).unwrap();

        let mut buf = Vec::new();
        write_g2o(&mut buf, &g).unwrap();
        let back = read_g2o(buf.as_slice()).unwrap();
        assert_eq!(back.fixed, vec![Key::new(0, 0)]);
        assert_eq!(back.vertices.len(), g.poses.len());
        for (k, p) in &back.vertices {
            let q = g.poses[k];
            assert!((p.x - q.x).abs() < 1e-12 && (p.theta - q.theta).abs() < 1e-12);
        }
        assert_eq!(back.edges.len(), 2);
        assert_eq!(back.edges[1].kind, FactorKind::InterRobot);
        assert_eq!(back.edges[1].b, Some(Key::new(3, 7)));
        for (a, b) in back.edges.iter().zip(&g.factors[1..]) {
            assert_eq!(a.measurement, b.measurement);
            for r in 0..3 {
                for c in 0..3 {
                    assert!((a.covariance.0[r][c] - b.covariance.0[r][c]).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn vertex_ids_pack_robot_high() {
        let k = Key::new(5, 300);
        assert_eq!(vertex_id(k), 5 << 16 | 300);
        assert_eq!(key_of(vertex_id(k)), Some(k));
        assert!(read_g2o("BOGUS 1 2".as_bytes()).is_err());
    }
}
