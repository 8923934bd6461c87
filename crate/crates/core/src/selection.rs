//! Rate-optimal model selection: the upper convex hull of (total rate,
//! metric) points and the rate intervals in which each hull model is best.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrontierPoint {
    pub id: usize,
    /// Total rate in nats.
    pub x: f64,
    pub y: f64,
    pub selected: bool,
}

impl FrontierPoint {
    pub fn new(id: usize, x: f64, y: f64) -> Self {
        Self {
            id,
            x,
            y,
            selected: false,
        }
    }
}

fn cross(o: &FrontierPoint, a: &FrontierPoint, b: &FrontierPoint) -> f64 {
    (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x)
}

/// Vertices of the upper convex hull in increasing `x`.
///
/// Among points sharing an `x`, only the highest survives (the earliest on
/// exact ties). Points on a hull edge but not at its ends are excluded.
/// Non-finite coordinates are rejected.
pub fn upper_convex_hull(points: &[FrontierPoint]) -> Result<Vec<FrontierPoint>> {
    if points.is_empty() {
        return Err(Error::invalid("hull of an empty point set"));
    }
    if let Some(p) = points.iter().find(|p| !p.x.is_finite() || !p.y.is_finite()) {
        return Err(Error::non_finite(format!(
            "frontier point {} at ({}, {}); infinite metrics must be removed before selection",
            p.id, p.x, p.y
        )));
    }
    let mut sorted: Vec<FrontierPoint> = points.to_vec();
    sorted.sort_by(|a, b| a.x.total_cmp(&b.x).then(b.y.total_cmp(&a.y)));
    sorted.dedup_by(|later, earlier| later.x == earlier.x);

    let mut hull: Vec<FrontierPoint> = Vec::with_capacity(sorted.len());
    for p in sorted {
        while hull.len() >= 2 && cross(&hull[hull.len() - 2], &hull[hull.len() - 1], &p) >= 0.0 {
            hull.pop();
        }
        hull.push(p);
    }
    for p in hull.iter_mut() {
        p.selected = true;
    }
    Ok(hull)
}

/// Marks every input point that is a hull vertex.
pub fn mark_hull(points: &mut [FrontierPoint]) -> Result<()> {
    let hull = upper_convex_hull(points)?;
    for p in points.iter_mut() {
        p.selected = hull.iter().any(|h| h.id == p.id);
    }
    Ok(())
}

/// A rate interval and the hull model judged best inside it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateInterval {
    /// `None` for the unbounded left end.
    pub lo: Option<f64>,
    /// `None` for the unbounded right end.
    pub hi: Option<f64>,
    pub id: usize,
}

/// Partitions the rate axis at the hull vertices; a single vertex owns the
/// whole axis. Otherwise the outer intervals go to
/// the first and last vertex; each inner interval goes to whichever endpoint
/// has the higher metric (the left one on ties).
pub fn best_per_interval(hull: &[FrontierPoint]) -> Result<Vec<RateInterval>> {
    let first = hull.first().ok_or_else(|| Error::invalid("empty hull"))?;
    let last = hull.last().expect("nonempty");
    if hull.len() == 1 {
        return Ok(vec![RateInterval {
            lo: None,
            hi: None,
            id: first.id,
        }]);
    }
    if hull.windows(2).any(|w| w[0].x >= w[1].x) {
        return Err(Error::invalid("hull vertices must have increasing x"));
    }
    let mut out = vec![RateInterval {
        lo: None,
        hi: Some(first.x),
        id: first.id,
    }];
    for w in hull.windows(2) {
        let best = if w[1].y > w[0].y { &w[1] } else { &w[0] };
        out.push(RateInterval {
            lo: Some(w[0].x),
            hi: Some(w[1].x),
            id: best.id,
        });
    }
    out.push(RateInterval {
        lo: Some(last.x),
        hi: None,
        id: last.id,
    });
    Ok(out)
}

/// Height of the piecewise-linear hull at `x`, or `None` outside its span.
pub fn hull_value_at(hull: &[FrontierPoint], x: f64) -> Option<f64> {
    if hull.len() == 1 {
        return (x == hull[0].x).then_some(hull[0].y);
    }
    hull.windows(2).find_map(|w| {
        (w[0].x <= x && x <= w[1].x).then(|| {
            let t = (x - w[0].x) / (w[1].x - w[0].x);
            w[0].y + t * (w[1].y - w[0].y)
        })
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pts(xy: &[(f64, f64)]) -> Vec<FrontierPoint> {
        xy.iter()
            .enumerate()
            .map(|(i, &(x, y))| FrontierPoint::new(i, x, y))
            .collect()
    }

    fn ids(h: &[FrontierPoint]) -> Vec<usize> {
        h.iter().map(|p| p.id).collect()
    }

    #[test]
    fn collinear_interior_dropped() {
        let h = upper_convex_hull(&pts(&[(0.0, 0.0), (1.0, 1.0), (2.0, 2.0)])).unwrap();
        assert_eq!(ids(&h), vec![0, 2]);
    }

    #[test]
    fn concave_chain_kept() {
        let h = upper_convex_hull(&pts(&[(0.0, 0.0), (1.0, 2.0), (2.0, 2.5)])).unwrap();
        assert_eq!(ids(&h), vec![0, 1, 2]);
        assert!(h.iter().all(|p| p.selected));
    }

    #[test]
    fn point_below_chord_dropped() {
        let h = upper_convex_hull(&pts(&[(0.0, 0.0), (1.0, 0.2), (2.0, 2.0)])).unwrap();
        assert_eq!(ids(&h), vec![0, 2]);
    }

    #[test]
    fn x_ties_keep_max_y() {
        let h = upper_convex_hull(&pts(&[(1.0, 0.0), (1.0, 3.0), (1.0, 1.0)])).unwrap();
        assert_eq!(ids(&h), vec![1]);
    }

    #[test]
    fn rejects_infinite_and_empty() {
        assert!(upper_convex_hull(&[]).is_err());
        assert!(upper_convex_hull(&pts(&[(0.0, f64::INFINITY)])).is_err());
        assert!(upper_convex_hull(&pts(&[(f64::NAN, 0.0)])).is_err());
    }

    #[test]
    fn intervals() {
        let single = upper_convex_hull(&pts(&[(1.0, 1.0)])).unwrap();
        let iv = best_per_interval(&single).unwrap();
        assert_eq!(iv, vec![RateInterval { lo: None, hi: None, id: 0 }]);

        let two = upper_convex_hull(&pts(&[(0.0, 1.0), (2.0, 3.0)])).unwrap();
        let iv = best_per_interval(&two).unwrap();
        assert_eq!(iv.iter().map(|i| i.id).collect::<Vec<_>>(), vec![0, 1, 1]);
        assert_eq!((iv[1].lo, iv[1].hi), (Some(0.0), Some(2.0)));
    }

    #[test]
    fn mark_and_interpolate() {
        let mut p = pts(&[(0.0, 0.0), (1.0, 0.2), (2.0, 2.0)]);
        mark_hull(&mut p).unwrap();
        assert_eq!(p.iter().map(|q| q.selected).collect::<Vec<_>>(), vec![true, false, true]);
        let h = upper_convex_hull(&p).unwrap();
        assert_eq!(hull_value_at(&h, 1.0), Some(1.0));
        assert_eq!(hull_value_at(&h, 3.0), None);
    }
}
