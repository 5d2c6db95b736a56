use std::collections::{BTreeMap, HashMap, HashSet};

use super::result::{CharInstance, Line, PageResult, SearchTrace, TraceOutcome};
use super::DecodeConfig;
use crate::error::Result;
use crate::geometry::{nms, rel_to_abs, GridCoord};
use crate::predictions::PredictionMaps;
use crate::Scalar;

/// Successor of each node, keyed by node index.
pub type EdgeSet = BTreeMap<usize, usize>;

/// Node score: `weight * dis + (1 - weight) * cls_prob`. The decoder uses
/// `weight = 0.8`.
pub fn fused_score<T: Scalar>(dis: T, cls_prob: T, weight: T) -> T {
    weight * dis + (T::one() - weight) * cls_prob
}

/// Candidate nodes from every grid whose presence confidence reaches the
/// threshold, after NMS. Returned in row-major grid order.
pub fn extract_nodes<T: Scalar>(maps: &PredictionMaps<T>, config: &DecodeConfig) -> Result<Vec<CharInstance<T>>> {
    let shape = maps.shape;
    let threshold = T::lit(config.dis_threshold);
    let weight = T::lit(config.dis_weight);
    let mut candidates = Vec::new();
    for g in shape.grids() {
        let dis = maps.dis(g);
        if dis < threshold {
            continue;
        }
        let (cls_id, cls_prob) = maps.argmax_cls(g);
        candidates.push(CharInstance {
            grid: g,
            bbox: rel_to_abs(&maps.rel_box(g), g, &shape)?,
            score: fused_score(dis, cls_prob, weight),
            cls_id,
            cls_prob,
        });
    }
    let scored: Vec<_> = candidates.iter().map(|c| (c.bbox, c.score)).collect();
    let kept = nms(&scored, T::lit(config.nms_iou), &shape);
    Ok(kept.into_iter().map(|k| candidates[k]).collect())
}

/// Walks the reading-order map from `origin` until it reaches another node.
///
/// Each step moves to the neighbour under the most probable direction. The
/// walk reaches a node when that neighbour holds one. Otherwise it ends at
/// the boundary, on revisiting a grid (cycle), or once `max_steps` grids have
/// been visited; at that final grid, if at least one step was taken, any node
/// among its 4-neighbours is accepted instead, the highest-scored one winning.
pub fn follow<T: Scalar>(
    maps: &PredictionMaps<T>,
    origin: GridCoord,
    nodes: &BTreeMap<GridCoord, T>,
    max_steps: usize,
) -> SearchTrace {
    let shape = maps.shape;
    let mut visited = vec![origin];
    let mut seen: HashSet<GridCoord> = HashSet::from([origin]);
    let mut cur = origin;
    loop {
        let next = shape.step(cur, maps.argmax_rd(cur));
        if let Some(n) = next {
            if n != origin && nodes.contains_key(&n) {
                return SearchTrace {
                    origin,
                    visited,
                    outcome: TraceOutcome::Reached(n),
                };
            }
        }
        let stop = match next {
            None => Some(TraceOutcome::Boundary),
            Some(n) if seen.contains(&n) => Some(TraceOutcome::Cycle),
            Some(_) if visited.len() >= max_steps => Some(TraceOutcome::MaxSteps),
            Some(_) => None,
        };
        if let Some(outcome) = stop {
            let outcome = if visited.len() > 1 {
                best_neighbour(cur, origin, nodes, maps)
                    .map(TraceOutcome::Reached)
                    .unwrap_or(outcome)
            } else {
                outcome
            };
            return SearchTrace {
                origin,
                visited,
                outcome,
            };
        }
        let n = next.expect("continuing walk has a next grid");
        visited.push(n);
        seen.insert(n);
        cur = n;
    }
}

fn best_neighbour<T: Scalar>(
    at: GridCoord,
    origin: GridCoord,
    nodes: &BTreeMap<GridCoord, T>,
    maps: &PredictionMaps<T>,
) -> Option<GridCoord> {
    maps.shape
        .neighbours(at)
        .filter(|g| *g != origin)
        .filter_map(|g| nodes.get(&g).map(|&s| (g, s)))
        .fold(None, |best: Option<(GridCoord, T)>, (g, s)| match best {
            Some((bg, bs)) if bs > s || (bs == s && bg < g) => Some((bg, bs)),
            _ => Some((g, s)),
        })
        .map(|(g, _)| g)
}

/// Direction of the edge between two nodes' box centres, in radians.
pub fn edge_angle<T: Scalar>(from: &CharInstance<T>, to: &CharInstance<T>) -> f64 {
    let dy = (to.bbox.y - from.bbox.y).as_f64();
    let dx = (to.bbox.x - from.bbox.x).as_f64();
    dy.atan2(dx)
}

fn angle_diff(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(std::f64::consts::TAU);
    d.min(std::f64::consts::TAU - d)
}

/// Turns reached searches into edges with at most one edge in and one edge
/// out per node.
///
/// Each node proposes at most one successor (its search target), so only
/// incoming conflicts need resolving. Uncontested edges are committed first.
/// Contested targets are then settled in row-major order: the winning edge is
/// the one whose angle is closest to the circular mean angle of the committed
/// chain leading into its source. Candidates without such a chain cannot be
/// compared; if no candidate has one, the highest-scored source wins.
/// Losing edges are dropped.
pub fn resolve_edges<T: Scalar>(nodes: &[CharInstance<T>], traces: &[SearchTrace]) -> EdgeSet {
    let index: HashMap<GridCoord, usize> = nodes.iter().enumerate().map(|(k, n)| (n.grid, k)).collect();
    let mut incoming: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (src, trace) in traces.iter().enumerate() {
        if let Some(dst) = trace.target().and_then(|g| index.get(&g).copied()) {
            if dst != src {
                incoming.entry(dst).or_default().push(src);
            }
        }
    }

    let mut edges = EdgeSet::new();
    let mut pred: HashMap<usize, usize> = HashMap::new();
    for (&dst, srcs) in &incoming {
        if let [src] = srcs.as_slice() {
            edges.insert(*src, dst);
            pred.insert(dst, *src);
        }
    }

    let mut contested: Vec<(usize, &Vec<usize>)> = incoming
        .iter()
        .filter(|(_, s)| s.len() > 1)
        .map(|(&d, s)| (d, s))
        .collect();
    contested.sort_by_key(|(d, _)| nodes[*d].grid);

    for (dst, srcs) in contested {
        let mut best: Option<(usize, f64)> = None;
        for &src in srcs {
            let Some(reference) = chain_mean_angle(src, &pred, nodes) else {
                continue;
            };
            let diff = angle_diff(edge_angle(&nodes[src], &nodes[dst]), reference);
            let better = match best {
                None => true,
                Some((b, bd)) => diff < bd || (diff == bd && source_rank(nodes, src, b)),
            };
            if better {
                best = Some((src, diff));
            }
        }
        let winner = best.map(|(s, _)| s).unwrap_or_else(|| {
            srcs.iter()
                .copied()
                .reduce(|b, s| if source_rank(nodes, s, b) { s } else { b })
                .expect("contested target has candidates")
        });
        edges.insert(winner, dst);
        pred.insert(dst, winner);
    }
    edges
}

/// True when `a` outranks `b`: higher score, then lower grid.
fn source_rank<T: Scalar>(nodes: &[CharInstance<T>], a: usize, b: usize) -> bool {
    let (sa, sb) = (nodes[a].score, nodes[b].score);
    sa > sb || (sa == sb && nodes[a].grid < nodes[b].grid)
}

/// Circular mean of the committed edge angles on the chain ending at `node`.
fn chain_mean_angle<T: Scalar>(node: usize, pred: &HashMap<usize, usize>, nodes: &[CharInstance<T>]) -> Option<f64> {
    let (mut sx, mut sy, mut count) = (0.0f64, 0.0f64, 0usize);
    let mut cur = node;
    let mut seen = HashSet::from([node]);
    while let Some(&prev) = pred.get(&cur) {
        let a = edge_angle(&nodes[prev], &nodes[cur]);
        sx += a.cos();
        sy += a.sin();
        count += 1;
        if !seen.insert(prev) {
            break;
        }
        cur = prev;
    }
    if count == 0 || (sx == 0.0 && sy == 0.0) {
        None
    } else {
        Some(sy.atan2(sx))
    }
}

/// Cuts the edge graph into lines.
///
/// Every node whose start-of-line confidence exceeds `threshold` starts a
/// line (row-major order). A line follows outgoing edges and stops after an
/// end-of-line node, where no edge leaves, or before a node that starts a line
/// of its own or is already placed.
pub fn assemble<T: Scalar>(
    nodes: &[CharInstance<T>],
    edges: &EdgeSet,
    traces: &[SearchTrace],
    maps: &PredictionMaps<T>,
    threshold: T,
) -> PageResult<T> {
    let is_sol: Vec<bool> = nodes.iter().map(|n| maps.sol(n.grid) > threshold).collect();
    let is_eol: Vec<bool> = nodes.iter().map(|n| maps.eol(n.grid) > threshold).collect();
    let mut used = vec![false; nodes.len()];
    let mut lines = Vec::new();

    for start in 0..nodes.len() {
        if !is_sol[start] || used[start] {
            continue;
        }
        let mut members = vec![start];
        used[start] = true;
        let mut cur = start;
        while !is_eol[cur] {
            match edges.get(&cur) {
                Some(&next) if !is_sol[next] && !used[next] => {
                    members.push(next);
                    used[next] = true;
                    cur = next;
                }
                _ => break,
            }
        }
        let first = nodes[start].grid;
        let last = nodes[cur].grid;
        lines.push(Line {
            chars: members.iter().map(|&k| nodes[k]).collect(),
            traces: members.iter().map(|&k| traces[k].clone()).collect(),
            sol_conf: maps.sol(first),
            eol_conf: maps.eol(last),
            transcript: None,
        });
    }

    PageResult {
        shape: maps.shape,
        lines,
        unassigned: nodes.iter().zip(&used).filter(|(_, &u)| !u).map(|(n, _)| *n).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{BBox, Direction, GridShape, RelBox};
    use crate::predictions::EPS_HAT;

    fn shape() -> GridShape {
        GridShape::with_stride(8, 6).unwrap()
    }

    fn place(m: &mut PredictionMaps<f64>, g: GridCoord, cls: u32, dis: f64) {
        m.set_dis(g, dis);
        m.set_cls_onehot(g, cls);
        m.set_rel_box(g, RelBox::new(0.5, 0.5, 0.08, 0.1));
    }

    #[test]
    fn fused_score_examples() {
        assert_eq!(fused_score(1.0, 1.0, 0.8), 1.0);
        assert_eq!(fused_score(0.0, 0.0, 0.8), 0.0);
        assert!((fused_score(0.9f64, 0.5, 0.8) - 0.82).abs() < 1e-12);
    }

    #[test]
    fn extract_nodes_from_background_is_empty() {
        let m = PredictionMaps::<f64>::background(shape(), 5);
        assert!(extract_nodes(&m, &DecodeConfig::default()).unwrap().is_empty());
    }

    #[test]
    fn extract_nodes_suppresses_overlap() {
        let mut m = PredictionMaps::<f64>::background(shape(), 5);
        let a = GridCoord::new(3, 3);
        let b = GridCoord::new(4, 3);
        place(&mut m, a, 1, 0.9);
        place(&mut m, b, 2, 0.7);
        // centres 1.6 px apart, 0.8 * 16 = 12.8 px wide boxes
        m.set_rel_box(a, RelBox::new(0.95, 0.5, 0.1, 0.1));
        m.set_rel_box(b, RelBox::new(0.05, 0.5, 0.1, 0.1));
        let shape = m.shape;
        let ba = rel_to_abs(&m.rel_box(a), a, &shape).unwrap();
        let bb = rel_to_abs(&m.rel_box(b), b, &shape).unwrap();
        let overlap = crate::geometry::iou(&ba, &bb, &shape);
        assert!((overlap - 0.8).abs() < 0.05, "{overlap}");
        let nodes = extract_nodes(&m, &DecodeConfig::default()).unwrap();
        assert_eq!(nodes.len(), 1);
        assert_eq!(nodes[0].grid, a);
    }

    fn scores(gs: &[(GridCoord, f64)]) -> BTreeMap<GridCoord, f64> {
        gs.iter().copied().collect()
    }

    #[test]
    fn follow_reaches_adjacent_node() {
        let mut m = PredictionMaps::<f64>::background(shape(), 3);
        let o = GridCoord::new(2, 2);
        m.point_rd(o, Direction::Right);
        let t = follow(&m, o, &scores(&[(o, 1.0), (GridCoord::new(3, 2), 1.0)]), 14);
        assert_eq!(t.outcome, TraceOutcome::Reached(GridCoord::new(3, 2)));
        assert_eq!(t.visited, vec![o]);
    }

    #[test]
    fn follow_hits_boundary() {
        let mut m = PredictionMaps::<f64>::background(shape(), 3);
        let o = GridCoord::new(1, 3);
        m.point_rd(o, Direction::Left);
        let t = follow(&m, o, &scores(&[(o, 1.0)]), 14);
        assert_eq!(t.outcome, TraceOutcome::Boundary);
        assert_eq!(t.visited, vec![o]);
    }

    #[test]
    fn follow_detects_cycle() {
        let mut m = PredictionMaps::<f64>::background(shape(), 3);
        let a = GridCoord::new(4, 4);
        let b = GridCoord::new(5, 4);
        m.point_rd(a, Direction::Right);
        m.point_rd(b, Direction::Left);
        let t = follow(&m, a, &scores(&[(a, 1.0)]), 14);
        assert_eq!(t.outcome, TraceOutcome::Cycle);
        assert!(t.visited.len() <= 3);
        assert_eq!(t.visited, vec![a, b]);
    }

    #[test]
    fn follow_respects_step_cap() {
        let mut m = PredictionMaps::<f64>::background(shape(), 3);
        for i in 1..=8 {
            m.point_rd(GridCoord::new(i, 1), Direction::Right);
        }
        let t = follow(&m, GridCoord::new(1, 1), &scores(&[]), 3);
        assert_eq!(t.outcome, TraceOutcome::MaxSteps);
        assert_eq!(t.visited.len(), 3);
    }

    #[test]
    fn follow_accepts_neighbour_of_final_grid() {
        let mut m = PredictionMaps::<f64>::background(shape(), 3);
        let o = GridCoord::new(2, 3);
        m.point_rd(o, Direction::Right);
        m.point_rd(GridCoord::new(3, 3), Direction::Right);
        m.point_rd(GridCoord::new(4, 3), Direction::Up);
        m.point_rd(GridCoord::new(4, 2), Direction::Left);
        // walk: (2,3) -> (3,3) -> (4,3) -> (4,2); (3,2) next would be ... Left to (3,2)
        m.point_rd(GridCoord::new(3, 2), Direction::Down); // back into (3,3): cycle
        let lo = GridCoord::new(3, 1);
        let hi = GridCoord::new(2, 2);
        let t = follow(&m, o, &scores(&[(o, 1.0), (lo, 0.7), (hi, 0.9)]), 20);
        // final grid (3,2) has node neighbours (3,1) and (2,2); direction points
        // at neither, so the higher score wins
        assert_eq!(t.outcome, TraceOutcome::Reached(hi));
    }

    fn node(i: usize, j: usize, x: f64, y: f64, score: f64) -> CharInstance<f64> {
        CharInstance {
            grid: GridCoord::new(i, j),
            bbox: BBox::new(x, y, 0.05, 0.05),
            score,
            cls_id: 1,
            cls_prob: 1.0,
        }
    }

    fn trace_to(origin: GridCoord, to: Option<GridCoord>) -> SearchTrace {
        SearchTrace {
            origin,
            visited: vec![origin],
            outcome: to.map(TraceOutcome::Reached).unwrap_or(TraceOutcome::Boundary),
        }
    }

    #[test]
    fn linear_chain_resolves_to_path() {
        let nodes: Vec<_> = (1..=5).map(|i| node(i, 1, i as f64 * 16.0, 8.0, 0.9)).collect();
        let traces: Vec<_> = (0..5)
            .map(|k| trace_to(nodes[k].grid, nodes.get(k + 1).map(|n| n.grid)))
            .collect();
        let edges = resolve_edges(&nodes, &traces);
        assert_eq!(
            edges.into_iter().collect::<Vec<_>>(),
            vec![(0, 1), (1, 2), (2, 3), (3, 4)]
        );
    }

    #[test]
    fn contested_target_keeps_edge_closest_to_running_angle() {
        let deg = |d: f64| d.to_radians();
        // Two incoming chains into t, each with a committed 0 degree edge.
        let t = node(8, 8, 200.0, 100.0, 0.9);
        let a = node(
            3,
            8,
            200.0 - 100.0 * deg(5.0).cos(),
            100.0 - 100.0 * deg(5.0).sin(),
            0.5,
        );
        let pa = node(1, 8, a.bbox.x - 50.0, a.bbox.y, 0.9);
        let b = node(
            5,
            4,
            200.0 - 100.0 * deg(40.0).cos(),
            100.0 - 100.0 * deg(40.0).sin(),
            0.99,
        );
        let pb = node(2, 4, b.bbox.x - 50.0, b.bbox.y, 0.9);
        let nodes = vec![t, a, pa, b, pb];
        assert!((edge_angle(&a, &t) - deg(5.0)).abs() < 1e-12);
        assert!((edge_angle(&b, &t) - deg(40.0)).abs() < 1e-12);
        let traces = vec![
            trace_to(t.grid, None),
            trace_to(a.grid, Some(t.grid)),
            trace_to(pa.grid, Some(a.grid)),
            trace_to(b.grid, Some(t.grid)),
            trace_to(pb.grid, Some(b.grid)),
        ];
        let edges = resolve_edges(&nodes, &traces);
        assert_eq!(edges.get(&1), Some(&0));
        assert_eq!(edges.get(&3), None);
        assert_eq!(edges.get(&2), Some(&1));
        assert_eq!(edges.get(&4), Some(&3));
    }

    #[test]
    fn contested_target_without_chains_prefers_higher_score() {
        let t = node(4, 4, 64.0, 64.0, 0.9);
        let a = node(3, 4, 48.0, 64.0, 0.6);
        let b = node(4, 3, 64.0, 48.0, 0.8);
        let nodes = vec![t, a, b];
        let traces = vec![
            trace_to(t.grid, None),
            trace_to(a.grid, Some(t.grid)),
            trace_to(b.grid, Some(t.grid)),
        ];
        let edges = resolve_edges(&nodes, &traces);
        assert_eq!(edges.into_iter().collect::<Vec<_>>(), vec![(2, 0)]);
    }

    fn line_maps(cells: &[(usize, usize)], sol: &[bool], eol: &[bool]) -> PredictionMaps<f64> {
        let mut m = PredictionMaps::<f64>::background(shape(), 3);
        for (k, &(i, j)) in cells.iter().enumerate() {
            let g = GridCoord::new(i, j);
            place(&mut m, g, 1, 1.0 - EPS_HAT);
            if sol[k] {
                m.set_sol(g, 1.0 - EPS_HAT);
            }
            if eol[k] {
                m.set_eol(g, 1.0 - EPS_HAT);
            }
        }
        m
    }

    #[test]
    fn assemble_single_node_line() {
        let m = line_maps(&[(2, 2)], &[true], &[true]);
        let nodes = vec![node(2, 2, 24.0, 24.0, 1.0)];
        let traces = vec![trace_to(nodes[0].grid, None)];
        let r = assemble(&nodes, &EdgeSet::new(), &traces, &m, 0.9);
        assert_eq!(r.lines.len(), 1);
        assert_eq!(r.lines[0].chars.len(), 1);
        r.check_structure().unwrap();
    }

    #[test]
    fn assemble_without_eol_ends_with_edges() {
        let cells = [(1, 1), (2, 1), (3, 1)];
        let m = line_maps(&cells, &[true, false, false], &[false, false, false]);
        let nodes: Vec<_> = cells
            .iter()
            .map(|&(i, j)| node(i, j, i as f64 * 16.0, 8.0, 1.0))
            .collect();
        let traces = vec![
            trace_to(nodes[0].grid, Some(nodes[1].grid)),
            trace_to(nodes[1].grid, Some(nodes[2].grid)),
            trace_to(nodes[2].grid, None),
        ];
        let edges = resolve_edges(&nodes, &traces);
        let r = assemble(&nodes, &edges, &traces, &m, 0.9);
        assert_eq!(r.lines.len(), 1);
        assert_eq!(r.lines[0].chars.len(), 3);
        r.check_structure().unwrap();
    }

    #[test]
    fn assemble_stops_at_eol_and_before_sol() {
        let cells = [(1, 1), (2, 1), (3, 1), (4, 1), (5, 1)];
        let m = line_maps(
            &cells,
            &[true, false, false, true, false],
            &[false, true, false, false, false],
        );
        let nodes: Vec<_> = cells
            .iter()
            .map(|&(i, j)| node(i, j, i as f64 * 16.0, 8.0, 1.0))
            .collect();
        let traces: Vec<_> = (0..5)
            .map(|k| trace_to(nodes[k].grid, nodes.get(k + 1).map(|n| n.grid)))
            .collect();
        let edges = resolve_edges(&nodes, &traces);
        let r = assemble(&nodes, &edges, &traces, &m, 0.9);
        let lens: Vec<_> = r.lines.iter().map(|l| l.chars.len()).collect();
        // line 1 stops at the EOL node (2,1); line 2 starts at (4,1)
        assert_eq!(lens, vec![2, 2]);
        assert_eq!(r.unassigned.len(), 1);
        assert_eq!(r.unassigned[0].grid, GridCoord::new(3, 1));
        r.check_structure().unwrap();
    }
}
