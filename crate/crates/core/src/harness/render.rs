use std::io::Write;

use crate::cluster::ClusterLabeling;
use crate::error::{Error, Result};
use crate::lattice::SitePoint;
use crate::wilson::TreeState;

const CELL: i64 = 6;
const MARGIN: i64 = 6;
const PALETTE: [&str; 8] = [
    "#d62728", "#1f77b4", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

/// The plane `x_{axis} = level` (lattice units) used to draw a `d = 3` window.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SlabProjection {
    pub axis: usize,
    pub level: i64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RenderSummary {
    pub base_edges: usize,
    /// One group per spanning cluster that has an edge in the picture.
    pub highlighted_groups: usize,
    pub highlighted_edges: usize,
}

/// SVG of the tree restricted to the labeling's window: every edge in a
/// thin gray stroke, then one `<g class="spanning">` per spanning cluster
/// drawn over it in its own color. `x₁` runs left to right and `x₂` bottom
/// to top.
pub fn render_svg<W: Write>(
    tree: &TreeState,
    labeling: &ClusterLabeling,
    projection: Option<SlabProjection>,
    mut out: W,
) -> Result<RenderSummary> {
    let wb = labeling.lattice();
    let dim = wb.dim();
    let plane: Vec<usize> = match (dim, projection) {
        (2, _) => vec![0, 1],
        (3, Some(p)) if p.axis < 3 => (0..3).filter(|&a| a != p.axis).collect(),
        (d, _) => return Err(Error::ProjectionRequired(d)),
    };
    let in_picture = |s: &SitePoint| match projection {
        Some(p) if dim == 3 => s.coord(p.axis) == p.level,
        _ => true,
    };
    let (ax, ay) = (plane[0], plane[1]);
    let width = (wb.hi()[ax] - wb.lo()[ax]) * CELL + 2 * MARGIN;
    let height = (wb.hi()[ay] - wb.lo()[ay]) * CELL + 2 * MARGIN;
    let xy = |s: &SitePoint| {
        (
            (s.coord(ax) - wb.lo()[ax]) * CELL + MARGIN,
            (wb.hi()[ay] - s.coord(ay)) * CELL + MARGIN,
        )
    };

    let mut edges: Vec<(SitePoint, SitePoint)> = tree
        .edges()
        .filter(|(a, b)| wb.contains(a) && wb.contains(b) && in_picture(a) && in_picture(b))
        .collect();
    edges.sort();

    let io = |e| Error::io("<svg>", e);
    writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">"#
    )
    .map_err(io)?;
    writeln!(
        out,
        r#"<rect width="{width}" height="{height}" fill="white"/>"#
    )
    .map_err(io)?;
    let line = |out: &mut W, a: &SitePoint, b: &SitePoint| -> Result<()> {
        let ((x1, y1), (x2, y2)) = (xy(a), xy(b));
        writeln!(out, r#"<line x1="{x1}" y1="{y1}" x2="{x2}" y2="{y2}"/>"#).map_err(io)
    };

    writeln!(
        out,
        r##"<g class="base" stroke="#b0b0b0" stroke-width="1">"##
    )
    .map_err(io)?;
    for (a, b) in &edges {
        line(&mut out, a, b)?;
    }
    writeln!(out, "</g>").map_err(io)?;

    let mut summary = RenderSummary {
        base_edges: edges.len(),
        ..Default::default()
    };
    for (k, id) in labeling.spanning_ids().into_iter().enumerate() {
        let mine: Vec<&(SitePoint, SitePoint)> = edges
            .iter()
            .filter(|(a, _)| labeling.component_of(a) == Some(id))
            .collect();
        if mine.is_empty() {
            continue;
        }
        let info = &labeling.components[id];
        writeln!(
            out,
            r#"<g class="spanning" data-cluster="{id}" data-min-site="{}" data-size="{}" stroke="{}" stroke-width="3">"#,
            info.min_site,
            info.size,
            PALETTE[k % PALETTE.len()]
        )
        .map_err(io)?;
        for (a, b) in &mine {
            line(&mut out, a, b)?;
        }
        writeln!(out, "</g>").map_err(io)?;
        summary.highlighted_groups += 1;
        summary.highlighted_edges += mine.len();
    }
    writeln!(out, "</svg>").map_err(io)?;
    out.flush().map_err(io)?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cluster::count_spanning_clusters;
    use crate::lattice::{BoxRegion, MeshSpec};
    use crate::walk::RngStream;
    use crate::wilson::{sample_ust_fast, BoundaryCondition, SamplingDomain};

    fn render(
        tree: &TreeState,
        spec: &MeshSpec,
        window: &BoxRegion,
        proj: Option<SlabProjection>,
    ) -> (String, RenderSummary, usize) {
        let (n, lab) = count_spanning_clusters(tree, window, spec).unwrap();
        let mut buf = Vec::new();
        let s = render_svg(tree, &lab, proj, &mut buf).unwrap();
        (String::from_utf8(buf).unwrap(), s, n)
    }

    #[test]
    fn single_spanning_path() {
        let spec = MeshSpec::new(2, 4, 1).unwrap();
        let dom = SamplingDomain::for_spec(&spec, BoundaryCondition::Free).unwrap();
        let mut parents = Vec::new();
        for y in 0..=4 {
            for x in 0..=4 {
                let p = SitePoint::new(&[x, y]);
                let parent = match (x, y) {
                    (0, 0) => None,
                    (_, 0) => Some(SitePoint::new(&[x - 1, 0])),
                    _ => Some(SitePoint::new(&[x, y - 1])),
                };
                parents.push((p, parent));
            }
        }
        let tree = TreeState::from_parents(dom, &parents).unwrap();
        let (svg, s, n) = render(&tree, &spec, &spec.window(), None);
        assert_eq!(n, 1);
        assert_eq!(s.highlighted_groups, 1);
        assert_eq!(svg.matches("<g class=\"spanning\"").count(), 1);
        assert_eq!(svg.matches("<line").count(), 2 * 24);
    }

    #[test]
    fn empty_window_is_valid() {
        // a tree consisting of the root alone has nothing to draw
        let spec = MeshSpec::new(2, 4, 1).unwrap();
        let dom = SamplingDomain::for_spec(&spec, BoundaryCondition::Free).unwrap();
        let tree = TreeState::from_parents(dom, &[(SitePoint::new(&[0, 0]), None)]).unwrap();
        let (svg, s, n) = render(&tree, &spec, &spec.window(), None);
        assert_eq!(n, 0);
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert_eq!(s, RenderSummary::default());
        assert_eq!(svg.matches("<line").count(), 0);
    }

    #[test]
    fn three_d_needs_projection() {
        let spec = MeshSpec::new(3, 4, 1).unwrap();
        let dom = SamplingDomain::for_spec(&spec, BoundaryCondition::WiredAll).unwrap();
        let tree = sample_ust_fast(&dom, &RngStream::new(2, 0)).unwrap();
        let (_, lab) = count_spanning_clusters(&tree, &spec.window(), &spec).unwrap();
        assert!(matches!(
            render_svg(&tree, &lab, None, Vec::new()),
            Err(Error::ProjectionRequired(3))
        ));
        let (svg, s, _) = render(
            &tree,
            &spec,
            &spec.window(),
            Some(SlabProjection { axis: 2, level: 2 }),
        );
        assert_eq!(
            svg.matches("<line").count(),
            s.base_edges + s.highlighted_edges
        );
    }

    #[test]
    fn render_is_deterministic() {
        let spec = MeshSpec::new(2, 8, 2).unwrap();
        let dom = SamplingDomain::for_spec(&spec, BoundaryCondition::FreeWithWiredHalo).unwrap();
        let tree = sample_ust_fast(&dom, &RngStream::new(3, 1)).unwrap();
        let a = render(&tree, &spec, &spec.window(), None);
        let b = render(&tree, &spec, &spec.window(), None);
        assert_eq!(a.0, b.0);
        assert_eq!(a.1.highlighted_groups, a.2);
    }
}
