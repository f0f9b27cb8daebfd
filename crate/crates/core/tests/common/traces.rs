//! Constructed exploration traces with hand-derived labels, over
//! `grid_atlas(5, 2, 3)`: ten 200 x 500 regions, ids row-major from the
//! bottom-left, diagonal 1000 * sqrt(2).

use artcarto::geometry::Point;
use artcarto::trails::{BehaviorSegment, EventKind, Report, TrajectoryEvent};

pub const DIAG: f64 = 1414.213562373095;

/// Center of grid region `r`.
pub fn c(r: usize) -> Point {
    [100.0 + 200.0 * (r % 5) as f64, 250.0 + 500.0 * (r / 5) as f64]
}

#[derive(Debug, Clone, PartialEq)]
pub struct Labels {
    pub moves: usize,
    pub jumps: Vec<(usize, usize)>,
    pub wanders: Vec<(usize, usize)>,
    pub revisits: Vec<(usize, usize, Point)>,
    /// (region, start, end)
    pub fixations: Vec<(usize, usize, usize)>,
}

impl Labels {
    fn none(moves: usize) -> Self {
        Self {
            moves,
            jumps: vec![],
            wanders: vec![],
            revisits: vec![],
            fixations: vec![],
        }
    }
}

impl Labels {
    /// Labels read back from a report, fixations sorted.
    pub fn observed(rep: &Report) -> Self {
        let span = |v: &[BehaviorSegment]| -> Vec<(usize, usize)> { v.iter().map(|s| (s.start_idx, s.end_idx)).collect() };
        let mut fixations: Vec<(usize, usize, usize)> = rep
            .fixations
            .iter()
            .map(|s| (s.region_id.unwrap_or(usize::MAX), s.start_idx, s.end_idx))
            .collect();
        fixations.sort();
        Self {
            moves: rep.moves.len(),
            jumps: span(&rep.jumps),
            wanders: span(&rep.wanders),
            revisits: rep
                .revisits
                .iter()
                .map(|s| (s.start_idx, s.end_idx, s.anchor.unwrap_or([f64::NAN; 2])))
                .collect(),
            fixations,
        }
    }

    pub fn sorted(mut self) -> Self {
        self.fixations.sort();
        self
    }
}

pub struct LabeledTrace {
    pub name: &'static str,
    pub events: Vec<TrajectoryEvent>,
    pub labels: Labels,
}

#[derive(Default)]
struct B {
    ev: Vec<TrajectoryEvent>,
    t: u64,
}

impl B {
    fn at(&mut self, t: u64) -> &mut Self {
        self.t = t;
        self
    }

    fn push(&mut self, kind: EventKind, p: Point, artwork: Option<&str>, prompt: Option<&str>) -> &mut Self {
        self.ev.push(TrajectoryEvent {
            t_ms: self.t,
            kind,
            x: p[0],
            y: p[1],
            zoom: 1.0,
            artwork_id: artwork.map(str::to_string),
            prompt: prompt.map(str::to_string),
        });
        self.t += 100;
        self
    }

    fn pan(&mut self, p: Point) -> &mut Self {
        self.push(EventKind::Pan, p, None, None)
    }

    fn zoom(&mut self, p: Point) -> &mut Self {
        self.push(EventKind::Zoom, p, None, None)
    }

    fn click(&mut self, p: Point, id: &str) -> &mut Self {
        self.push(EventKind::Click, p, Some(id), None)
    }

    fn focus(&mut self, p: Point, id: &str) -> &mut Self {
        self.push(EventKind::Focus, p, Some(id), None)
    }

    fn pin(&mut self, p: Point, id: &str) -> &mut Self {
        self.push(EventKind::Pin, p, Some(id), None)
    }

    fn unpin(&mut self, p: Point, id: &str) -> &mut Self {
        self.push(EventKind::Unpin, p, Some(id), None)
    }

    fn generate(&mut self, p: Point) -> &mut Self {
        self.push(EventKind::Generate, p, None, Some("a quiet harbor at dusk"))
    }

    fn done(&mut self) -> Vec<TrajectoryEvent> {
        std::mem::take(&mut self.ev)
    }
}

/// Position of member `m` of grid region `r`.
fn art(r: usize, m: usize) -> (Point, String) {
    let p = c(r);
    ([p[0] + 5.0 * m as f64, p[1] + 5.0 * m as f64], format!("r{r:02}m{m}"))
}

pub fn all() -> Vec<LabeledTrace> {
    let mut out = Vec::new();
    let mut add = |name, events, labels| out.push(LabeledTrace { name, events, labels });

    add("single event", B::default().pan(c(2)).done(), Labels::none(0));

    add(
        "three long moves",
        B::default().pan(c(0)).pan(c(9)).pan(c(4)).pan(c(5)).done(),
        Labels {
            jumps: vec![(1, 1), (2, 2), (3, 3)],
            ..Labels::none(3)
        },
    );

    let mut b = B::default();
    for i in 0..7 {
        b.pan([100.0 + 0.1 * DIAG * i as f64, 250.0]);
    }
    add("moves of a tenth of the diagonal", b.done(), Labels::none(6));

    // long scouting moves, then a local cluster of small moves and clicks
    let (a1, id1) = art(3, 1);
    let (a2, id2) = art(3, 2);
    let mut b = B::default();
    b.at(0).pan(c(0)).at(1000).pan(c(9)).at(2000).pan(c(5)).at(3000).pan(c(3));
    b.at(3100).pan([720.0, 250.0]).at(3150).click(a1, &id1);
    b.at(3200).pan([740.0, 250.0]).at(3300).pan([760.0, 250.0]).at(3350).click(a2, &id2);
    b.at(3400).pan([740.0, 260.0]);
    add(
        "scout then cluster",
        b.done(),
        Labels {
            jumps: vec![(1, 1), (2, 2), (3, 3)],
            wanders: vec![(4, 9)],
            ..Labels::none(7)
        },
    );

    // steady small steps across the whole bottom row, clicking as it goes
    let mut b = B::default();
    for i in 0..20 {
        let x = 20.0 + 50.0 * i as f64;
        b.pan([x, 250.0]);
        if i % 4 == 1 {
            b.click([x, 260.0], &format!("r{:02}m0", i / 4));
        }
    }
    add(
        "long wander",
        b.done(),
        Labels {
            wanders: vec![(1, 24)],
            ..Labels::none(19)
        },
    );

    let mut b = B::default();
    for i in 0..6 {
        b.pan([140.0 + 10.0 * i as f64, 250.0]);
    }
    add(
        "tiny moves without interaction",
        b.done(),
        Labels {
            fixations: vec![(0, 0, 5)],
            ..Labels::none(5)
        },
    );

    let mut b = B::default();
    b.pan(c(0)).click(c(0), "r00m0").pan([120.0, 250.0]).pan(c(9));
    b.click(c(9), "r09m0").pan([920.0, 750.0]).pan(c(0)).pan([120.0, 260.0]);
    add(
        "alternating tiny and large moves",
        b.done(),
        Labels {
            jumps: vec![(3, 3), (6, 6)],
            revisits: vec![(1, 6, c(0))],
            fixations: vec![(0, 0, 7), (9, 3, 5)],
            ..Labels::none(5)
        },
    );

    add(
        "A far B back to A",
        B::default().focus(c(0), "r00m0").focus(c(9), "r09m0").focus(c(0), "r00m0").done(),
        Labels {
            jumps: vec![(1, 1), (2, 2)],
            revisits: vec![(0, 2, c(0))],
            fixations: vec![(0, 0, 2), (9, 1, 1)],
            ..Labels::none(2)
        },
    );

    add(
        "A B A B",
        B::default()
            .focus(c(0), "r00m0")
            .focus(c(9), "r09m0")
            .focus(c(0), "r00m0")
            .focus(c(9), "r09m0")
            .done(),
        Labels {
            jumps: vec![(1, 1), (2, 2), (3, 3)],
            revisits: vec![(0, 2, c(0)), (1, 3, c(9))],
            fixations: vec![(0, 0, 2)],
            ..Labels::none(3)
        },
    );

    let mut b = B::default();
    b.pan(c(2)).click(c(2), "r02m0");
    for x in [550.0, 450.0, 550.0, 450.0] {
        b.pan([x, 250.0]);
    }
    add(
        "oscillate near one anchor",
        b.done(),
        Labels {
            fixations: vec![(2, 0, 5)],
            ..Labels::none(4)
        },
    );

    // even time over every region, all pins in region 7
    let snake = [0, 1, 2, 3, 4, 9, 8, 7];
    let mut b = B::default();
    for (i, &r) in snake.iter().enumerate() {
        b.at(100 * i as u64).pan(c(r));
    }
    for m in 0..3 {
        let (p, id) = art(7, m);
        b.at(710 + 10 * m as u64).pin(p, &id);
    }
    b.at(800).pan(c(6)).at(900).pan(c(5));
    add(
        "collecting in one region",
        b.done(),
        Labels {
            jumps: vec![(5, 5)],
            fixations: vec![(7, 7, 10)],
            ..Labels::none(9)
        },
    );

    let mut b = B::default();
    for (i, r) in [0, 1, 2, 3, 4, 9, 8, 7, 6, 5].into_iter().enumerate() {
        let (p, id) = art(r, 0);
        b.at(100 * i as u64).pan(c(r)).at(100 * i as u64 + 10).pin(p, &id);
    }
    add(
        "even time, pins everywhere",
        b.done(),
        Labels {
            jumps: vec![(9, 10)],
            ..Labels::none(9)
        },
    );

    let mut b = B::default();
    b.at(0).pan(c(2)).at(600).pan(c(7)).at(800).pan(c(8)).at(1000).pan(c(9));
    add(
        "sixty percent dwell",
        b.done(),
        Labels {
            jumps: vec![(1, 1)],
            fixations: vec![(2, 0, 0)],
            ..Labels::none(3)
        },
    );

    let mut b = B::default();
    b.at(0).pan(c(2)).at(390).pan(c(7)).at(700).pan(c(8)).at(1000).pan(c(9));
    add(
        "thirty-nine percent dwell",
        b.done(),
        Labels {
            jumps: vec![(1, 1)],
            ..Labels::none(3)
        },
    );

    let mut b = B::default();
    let (p10, i10) = art(1, 0);
    let (p11, i11) = art(1, 1);
    let (p20, i20) = art(2, 0);
    let (p30, i30) = art(3, 0);
    b.at(0).pan(c(1)).at(10).pin(p10, &i10).at(20).pin(p11, &i11).at(30).unpin(p11, &i11);
    b.at(100).pan(c(2)).at(110).pin(p20, &i20).at(200).pan(c(3)).at(210).pin(p30, &i30);
    b.at(300).pan(c(3));
    add("unpinned artwork leaves the collection", b.done(), Labels::none(2));

    let mut b = B::default();
    let (p0, i0) = art(5, 0);
    let (p1, i1) = art(5, 1);
    b.at(0).pan(c(5)).at(10).pin(p0, &i0).at(20).pin(p1, &i1);
    b.at(100).pan(c(6)).at(200).pan(c(7)).at(300).pan(c(8)).at(400).pan(c(9));
    add(
        "two pins in one region",
        b.done(),
        Labels {
            fixations: vec![(5, 0, 2)],
            ..Labels::none(4)
        },
    );

    let mut b = B::default();
    b.at(0).pan(c(5)).at(10).pin(p0, &i0);
    b.at(100).pan(c(6)).at(200).pan(c(7)).at(300).pan(c(8)).at(400).pan(c(9));
    add("a single pin is not a collection", b.done(), Labels::none(4));

    let mut b = B::default();
    let (q0, j0) = art(0, 1);
    let (q9, j9) = art(9, 1);
    b.at(0).pan([150.0, 250.0]).at(100).pan([180.0, 250.0]).at(150).click(q0, &j0);
    b.at(200).pan([210.0, 250.0]).at(300).pan([850.0, 750.0]).at(400).pan([870.0, 750.0]);
    b.at(450).click(q9, &j9).at(500).pan([890.0, 750.0]).at(600).pan([910.0, 750.0]);
    add(
        "runs of two and three small moves",
        b.done(),
        Labels {
            jumps: vec![(4, 4)],
            wanders: vec![(5, 8)],
            fixations: vec![(9, 4, 8)],
            ..Labels::none(6)
        },
    );

    let (a, ida) = art(2, 1);
    add(
        "zoom in place and clicks are not moves",
        B::default()
            .pan(c(2))
            .zoom(c(2))
            .click(a, &ida)
            .zoom(c(2))
            .pan([520.0, 250.0])
            .done(),
        Labels {
            fixations: vec![(2, 0, 4)],
            ..Labels::none(1)
        },
    );

    let (p4, id4) = art(4, 0);
    add(
        "each anchor fires once",
        B::default()
            .pan(c(0))
            .generate(c(0))
            .pan(c(4))
            .click(p4, &id4)
            .pan(c(0))
            .pan(c(4))
            .pan(c(0))
            .done(),
        Labels {
            jumps: vec![(1, 2), (3, 4), (5, 5), (6, 6)],
            revisits: vec![(1, 4, c(0)), (3, 5, c(4))],
            fixations: vec![(0, 0, 6), (4, 2, 5)],
            ..Labels::none(4)
        },
    );

    out
}
