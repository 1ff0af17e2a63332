//! Attention-locality statistics over recorded attention weights, query
//! heat maps, and CSV/SVG figure export.
//!
//! Both metrics exclude the cls slot (it has no grid position); its mass is
//! renormalized over the grid keys. Distances are Euclidean on pixel-center
//! coordinates, normalized by the image side length.

use crate::model::{AttentionRecord, ModelError, PixelTransformer};
use crate::scalar::Real;
use crate::tokenization::ImageTensor;
use serde::Serialize;
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("record has no grid-coordinate queries")]
    NoGridTokens,
    #[error("query ({0}, {1}) outside the {2}x{3} token grid")]
    QueryOutsideGrid(usize, usize, usize, usize),
    #[error("layer {layer} out of range ({layers} layers)")]
    LayerOutOfRange { layer: usize, layers: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn grid_metric<F: Real>(
    record: &AttentionRecord<F>,
    image_side: f64,
    offset_mode: bool,
) -> Result<f64, AnalysisError> {
    let l = record.seq_len;
    let mut total = 0.0f64;
    let mut queries = 0usize;
    for q in 0..l {
        let Some(qc) = record.query_coords[q] else { continue };
        let row = &record.weights[q * l..(q + 1) * l];
        let mut grid_mass = 0.0f64;
        for (k, w) in row.iter().enumerate() {
            if record.key_coords[k].is_some() {
                grid_mass += w.as_f64();
            }
        }
        if grid_mass <= 0.0 {
            continue;
        }
        let value = if offset_mode {
            // attention-map center of mass, then its distance to the query
            let (mut cy, mut cx) = (0.0f64, 0.0f64);
            for (k, w) in row.iter().enumerate() {
                if let Some((kr, kc)) = record.key_coords[k] {
                    let a = w.as_f64() / grid_mass;
                    cy += a * kr;
                    cx += a * kc;
                }
            }
            ((cy - qc.0).powi(2) + (cx - qc.1).powi(2)).sqrt()
        } else {
            // attention-weighted query-to-key distance
            let mut acc = 0.0f64;
            for (k, w) in row.iter().enumerate() {
                if let Some((kr, kc)) = record.key_coords[k] {
                    let d = ((kr - qc.0).powi(2) + (kc - qc.1).powi(2)).sqrt();
                    acc += (w.as_f64() / grid_mass) * d;
                }
            }
            acc
        };
        total += value;
        queries += 1;
    }
    if queries == 0 {
        return Err(AnalysisError::NoGridTokens);
    }
    Ok(total / queries as f64 / image_side)
}

/// Attention-weighted mean query-to-key distance ("receptive field size"),
/// averaged over grid queries, normalized by the image side.
pub fn mean_attention_distance<F: Real>(
    record: &AttentionRecord<F>,
    image_side: usize,
) -> Result<f64, AnalysisError> {
    grid_metric(record, image_side as f64, false)
}

/// Mean distance from each query to the center of mass of its attention map,
/// normalized by the image side.
pub fn mean_attention_offset<F: Real>(
    record: &AttentionRecord<F>,
    image_side: usize,
) -> Result<f64, AnalysisError> {
    grid_metric(record, image_side as f64, true)
}

/// Per-layer metric vectors, heads sorted ascending by value.
#[derive(Debug, Clone, Serialize)]
pub struct LayerStats {
    pub layer: usize,
    pub distances: Vec<f64>,
    pub offsets: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct AttentionStats {
    pub layers: Vec<LayerStats>,
}

/// Aggregates records (optionally from several images, averaged per
/// layer/head) into sorted per-layer statistics.
pub fn compute_attention_stats<F: Real>(
    records_per_image: &[Vec<AttentionRecord<F>>],
    image_side: usize,
) -> Result<AttentionStats, AnalysisError> {
    let mut dist: BTreeMap<(usize, usize), (f64, usize)> = BTreeMap::new();
    let mut offs: BTreeMap<(usize, usize), (f64, usize)> = BTreeMap::new();
    for records in records_per_image {
        for rec in records {
            let d = mean_attention_distance(rec, image_side)?;
            let o = mean_attention_offset(rec, image_side)?;
            let ed = dist.entry((rec.layer, rec.head)).or_insert((0.0, 0));
            ed.0 += d;
            ed.1 += 1;
            let eo = offs.entry((rec.layer, rec.head)).or_insert((0.0, 0));
            eo.0 += o;
            eo.1 += 1;
        }
    }
    let mut layers: BTreeMap<usize, LayerStats> = BTreeMap::new();
    for ((layer, _), (sum, n)) in &dist {
        layers
            .entry(*layer)
            .or_insert_with(|| LayerStats { layer: *layer, distances: vec![], offsets: vec![] })
            .distances
            .push(sum / *n as f64);
    }
    for ((layer, _), (sum, n)) in &offs {
        layers.get_mut(layer).expect("same keys").offsets.push(sum / *n as f64);
    }
    let mut out: Vec<LayerStats> = layers.into_values().collect();
    for l in &mut out {
        l.distances.sort_by(|a, b| a.partial_cmp(b).unwrap());
        l.offsets.sort_by(|a, b| a.partial_cmp(b).unwrap());
    }
    Ok(AttentionStats { layers: out })
}

/// `layer,head,metric,value` rows; heads appear in ascending-value order.
pub fn stats_to_csv(stats: &AttentionStats) -> String {
    let mut s = String::from("layer,head,metric,value\n");
    for l in &stats.layers {
        for (h, v) in l.distances.iter().enumerate() {
            s.push_str(&format!("{},{},distance,{:.6}\n", l.layer, h, v));
        }
        for (h, v) in l.offsets.iter().enumerate() {
            s.push_str(&format!("{},{},offset,{:.6}\n", l.layer, h, v));
        }
    }
    s
}

/// One head's attention over the token grid for a fixed query position.
#[derive(Debug, Clone)]
pub struct QueryAttentionMap {
    pub head: usize,
    /// Row-major grid of attention mass (keys), grid_h × grid_w.
    pub grid: Vec<f64>,
    pub grid_h: usize,
    pub grid_w: usize,
    /// Attention spent on the cls token, reported separately.
    pub cls_mass: f64,
}

/// Runs the model on one image with recording and extracts the query row of
/// every head at `layer`, reshaped to the token grid. The query is given in
/// pixel coordinates and mapped to its token.
pub fn attention_map_for_query<F: Real>(
    model: &PixelTransformer<F>,
    image: &ImageTensor<F>,
    layer: usize,
    query: (usize, usize),
) -> Result<Vec<QueryAttentionMap>, AnalysisError> {
    if layer >= model.cfg.layers {
        return Err(AnalysisError::LayerOutOfRange { layer, layers: model.cfg.layers });
    }
    let (gh, gw) = model.cfg.token_grid();
    let p = model.cfg.tokenizer.patch_size();
    let (qr, qc) = (query.0 / p, query.1 / p);
    if query.0 >= model.cfg.image_height || query.1 >= model.cfg.image_width {
        return Err(AnalysisError::QueryOutsideGrid(
            query.0,
            query.1,
            model.cfg.image_height,
            model.cfg.image_width,
        ));
    }
    let (_, records) = model.forward_with_attention(image)?;
    let q_index = 1 + qr * gw + qc; // cls occupies slot 0
    let mut maps = Vec::new();
    for rec in records.iter().filter(|r| r.layer == layer) {
        let l = rec.seq_len;
        let row = &rec.weights[q_index * l..(q_index + 1) * l];
        let cls_mass = row[0].as_f64();
        let grid: Vec<f64> = row[1..].iter().map(|w| w.as_f64()).collect();
        maps.push(QueryAttentionMap { head: rec.head, grid, grid_h: gh, grid_w: gw, cls_mass });
    }
    Ok(maps)
}

/// A named line series for figure export.
#[derive(Debug, Clone)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

/// Minimal deterministic SVG line/scatter plot: axes, tick labels at the
/// extremes, one polyline per series, legend.
pub fn svg_line_plot(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    const W: f64 = 640.0;
    const H: f64 = 480.0;
    const M: f64 = 60.0;
    let palette = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];
    let all: Vec<(f64, f64)> = series.iter().flat_map(|s| s.points.iter().copied()).collect();
    let (mut x0, mut x1) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in &all {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        x0 = 0.0;
        x1 = 1.0;
        y0 = 0.0;
        y1 = 1.0;
    }
    if (x1 - x0).abs() < 1e-12 {
        x1 = x0 + 1.0;
    }
    if (y1 - y0).abs() < 1e-12 {
        y1 = y0 + 1.0;
    }
    let px = |x: f64| M + (x - x0) / (x1 - x0) * (W - 2.0 * M);
    let py = |y: f64| H - M - (y - y0) / (y1 - y0) * (H - 2.0 * M);
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n"
    );
    s.push_str(&format!(
        "  <text x=\"{:.1}\" y=\"24\" text-anchor=\"middle\" font-size=\"16\">{}</text>\n",
        W / 2.0,
        title
    ));
    // axes
    s.push_str(&format!(
        "  <line x1=\"{M}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"black\"/>\n",
        H - M,
        W - M,
        H - M
    ));
    s.push_str(&format!(
        "  <line x1=\"{M}\" y1=\"{M}\" x2=\"{M}\" y2=\"{:.1}\" stroke=\"black\"/>\n",
        H - M
    ));
    s.push_str(&format!(
        "  <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-size=\"12\">{}</text>\n",
        W / 2.0,
        H - 16.0,
        x_label
    ));
    s.push_str(&format!(
        "  <text x=\"16\" y=\"{:.1}\" text-anchor=\"middle\" font-size=\"12\" transform=\"rotate(-90 16 {:.1})\">{}</text>\n",
        H / 2.0,
        H / 2.0,
        y_label
    ));
    for (v, at, anchor, is_x) in [
        (x0, px(x0), "middle", true),
        (x1, px(x1), "middle", true),
        (y0, py(y0), "end", false),
        (y1, py(y1), "end", false),
    ] {
        if is_x {
            s.push_str(&format!(
                "  <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"{}\" font-size=\"10\">{:.4}</text>\n",
                at,
                H - M + 16.0,
                anchor,
                v
            ));
        } else {
            s.push_str(&format!(
                "  <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"{}\" font-size=\"10\">{:.4}</text>\n",
                M - 6.0,
                at + 4.0,
                anchor,
                v
            ));
        }
    }
    for (i, ser) in series.iter().enumerate() {
        let color = palette[i % palette.len()];
        let pts: Vec<String> =
            ser.points.iter().map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y))).collect();
        s.push_str(&format!(
            "  <polyline fill=\"none\" stroke=\"{}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
            color,
            pts.join(" ")
        ));
        for &(x, y) in &ser.points {
            s.push_str(&format!(
                "  <circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"2.5\" fill=\"{}\"/>\n",
                px(x),
                py(y),
                color
            ));
        }
        s.push_str(&format!(
            "  <text x=\"{:.1}\" y=\"{:.1}\" font-size=\"11\" fill=\"{}\">{}</text>\n",
            W - M + 6.0,
            M + 14.0 * i as f64,
            color,
            ser.label
        ));
    }
    s.push_str("</svg>\n");
    s
}

/// Writes the attention stats as `stats.csv` plus one SVG per metric.
pub fn export_attention_figures(
    stats: &AttentionStats,
    out_dir: &std::path::Path,
) -> std::io::Result<()> {
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join("stats.csv"), stats_to_csv(stats))?;
    let mk = |metric: &str, pick: fn(&LayerStats) -> &Vec<f64>| {
        let series: Vec<Series> = stats
            .layers
            .iter()
            .map(|l| Series {
                label: format!("layer {}", l.layer),
                points: pick(l).iter().enumerate().map(|(h, &v)| (h as f64, v)).collect(),
            })
            .collect();
        svg_line_plot(
            &format!("mean attention {metric}"),
            "head (sorted)",
            &format!("normalized {metric}"),
            &series,
        )
    };
    std::fs::write(out_dir.join("attention_distance.svg"), mk("distance", |l| &l.distances))?;
    std::fs::write(out_dir.join("attention_offset.svg"), mk("offset", |l| &l.offsets))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn record(l: usize, weights: Vec<f32>, coords: Vec<Option<(f64, f64)>>) -> AttentionRecord<f32> {
        AttentionRecord {
            layer: 0,
            head: 0,
            weights,
            seq_len: l,
            query_coords: coords.clone(),
            key_coords: coords,
        }
    }

    fn grid_coords(side: usize, has_cls: bool) -> Vec<Option<(f64, f64)>> {
        let mut c = Vec::new();
        if has_cls {
            c.push(None);
        }
        for r in 0..side {
            for col in 0..side {
                c.push(Some((r as f64, col as f64)));
            }
        }
        c
    }

    #[test]
    fn self_attention_delta_gives_zero_distance() {
        let l = 4;
        let mut w = vec![0.0f32; l * l];
        for q in 0..l {
            w[q * l + q] = 1.0;
        }
        let rec = record(l, w, grid_coords(2, false));
        assert_eq!(mean_attention_distance(&rec, 2).unwrap(), 0.0);
        assert_eq!(mean_attention_offset(&rec, 2).unwrap(), 0.0);
    }

    #[test]
    fn uniform_2x2_closed_forms() {
        let l = 4;
        let w = vec![0.25f32; l * l];
        let rec = record(l, w, grid_coords(2, false));
        let d = mean_attention_distance(&rec, 2).unwrap();
        let o = mean_attention_offset(&rec, 2).unwrap();
        // every query sees (0 + 1 + 1 + sqrt(2)) / 4, normalized by side 2
        let expect_d = (2.0 + std::f64::consts::SQRT_2) / 4.0 / 2.0;
        assert!((d - expect_d).abs() < 1e-9, "{d} vs {expect_d}");
        assert!((d - 0.42678).abs() < 1e-5);
        // center of mass (0.5, 0.5); offset sqrt(0.5) from each corner
        let expect_o = 0.5f64.sqrt() / 2.0;
        assert!((o - expect_o).abs() < 1e-9);
        assert!((o - 0.35355).abs() < 1e-5);
    }

    #[test]
    fn symmetric_attention_about_query_has_zero_offset() {
        // 1x3 grid, middle query attends equally to both neighbors
        let coords = vec![Some((0.0, 0.0)), Some((0.0, 1.0)), Some((0.0, 2.0))];
        let mut w = vec![0.0f32; 9];
        w[1 * 3] = 0.5;
        w[1 * 3 + 2] = 0.5;
        // other queries: delta on themselves
        w[0] = 1.0;
        w[2 * 3 + 2] = 1.0;
        let rec = record(3, w, coords);
        let o = mean_attention_offset(&rec, 3).unwrap();
        assert!(o.abs() < 1e-9);
    }

    /// Independent O(L²) double-loop oracle (no shared code with the
    /// implementation path).
    fn oracle(rec: &AttentionRecord<f32>, side: f64) -> (f64, f64) {
        let l = rec.seq_len;
        let (mut td, mut to, mut n) = (0.0f64, 0.0f64, 0usize);
        for q in 0..l {
            if rec.query_coords[q].is_none() {
                continue;
            }
            let (qr, qc) = rec.query_coords[q].unwrap();
            let mut mass = 0.0;
            for k in 0..l {
                if rec.key_coords[k].is_some() {
                    mass += rec.weights[q * l + k] as f64;
                }
            }
            let (mut d, mut cy, mut cx) = (0.0f64, 0.0f64, 0.0f64);
            for k in 0..l {
                if let Some((kr, kc)) = rec.key_coords[k] {
                    let a = rec.weights[q * l + k] as f64 / mass;
                    d += a * ((kr - qr).powi(2) + (kc - qc).powi(2)).sqrt();
                    cy += a * kr;
                    cx += a * kc;
                }
            }
            td += d;
            to += ((cy - qr).powi(2) + (cx - qc).powi(2)).sqrt();
            n += 1;
        }
        (td / n as f64 / side, to / n as f64 / side)
    }

    fn random_record(side: usize, has_cls: bool, seed: u64) -> AttentionRecord<f32> {
        let l = side * side + usize::from(has_cls);
        let mut rng = crate::rng::stream(seed, "attn");
        let mut w = vec![0.0f32; l * l];
        for q in 0..l {
            let mut sum = 0.0f32;
            for k in 0..l {
                let v: f32 = rng.gen_range(0.0..1.0);
                w[q * l + k] = v;
                sum += v;
            }
            for k in 0..l {
                w[q * l + k] /= sum;
            }
        }
        record(l, w, grid_coords(side, has_cls))
    }

    #[test]
    fn metrics_match_brute_force_oracle_on_8x8_and_16x16() {
        for (side, seed) in [(8usize, 1u64), (8, 2), (16, 3), (16, 4)] {
            for has_cls in [false, true] {
                let rec = random_record(side, has_cls, seed + u64::from(has_cls) * 100);
                let (od, oo) = oracle(&rec, side as f64);
                let d = mean_attention_distance(&rec, side).unwrap();
                let o = mean_attention_offset(&rec, side).unwrap();
                assert!((d - od).abs() < 1e-6, "distance {d} vs oracle {od}");
                assert!((o - oo).abs() < 1e-6, "offset {o} vs oracle {oo}");
            }
        }
    }

    #[test]
    fn normalized_metrics_are_scale_invariant() {
        let rec = random_record(8, true, 9);
        let d1 = mean_attention_distance(&rec, 8).unwrap();
        // scale all coordinates and the side by 4
        let scale = |c: &Vec<Option<(f64, f64)>>| {
            c.iter().map(|o| o.map(|(r, cc)| (r * 4.0, cc * 4.0))).collect::<Vec<_>>()
        };
        let scaled = AttentionRecord {
            query_coords: scale(&rec.query_coords),
            key_coords: scale(&rec.key_coords),
            ..rec.clone()
        };
        let d2 = mean_attention_distance(&scaled, 32).unwrap();
        assert!((d1 - d2).abs() < 1e-12);
        let o1 = mean_attention_offset(&rec, 8).unwrap();
        let o2 = mean_attention_offset(&scaled, 32).unwrap();
        assert!((o1 - o2).abs() < 1e-12);
    }

    #[test]
    fn stats_sort_heads_ascending() {
        let mut recs = Vec::new();
        for head in 0..3 {
            let mut r = random_record(4, false, 20 + head as u64);
            r.head = head;
            recs.push(r);
        }
        let stats = compute_attention_stats(&[recs], 4).unwrap();
        assert_eq!(stats.layers.len(), 1);
        let d = &stats.layers[0].distances;
        assert!(d.windows(2).all(|w| w[0] <= w[1]));
        let csv = stats_to_csv(&stats);
        assert!(csv.starts_with("layer,head,metric,value\n"));
        assert_eq!(csv.matches("distance").count(), 3);
    }

    #[test]
    fn svg_contains_a_polyline_per_series() {
        let series = vec![
            Series { label: "a".into(), points: vec![(0.0, 1.0), (1.0, 2.0)] },
            Series { label: "b".into(), points: vec![(0.0, 2.0), (1.0, 1.0)] },
        ];
        let svg = svg_line_plot("t", "x", "y", &series);
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.contains("<svg"));
        assert!(svg.contains("</svg>"));
    }
}
