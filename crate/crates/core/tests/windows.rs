use std::cell::RefCell;
use std::rc::Rc;

use uadt_core::flow_match::{sample, SampleConfig, VelocityField};
use uadt_core::long_video::{plan_windows, stitch_windows};
use uadt_core::numerics::Tensor;
use uadt_core::Result;

#[test]
fn emit_ranges_partition_every_timeline_up_to_500() {
    for total in 1..=500 {
        for window in 2..=12 {
            for discard in 0..window {
                let plan = plan_windows(total, window, discard).unwrap();
                let mut covered = vec![0u8; total];
                for w in &plan.windows {
                    assert!(w.start + w.len <= total);
                    assert_eq!(w.emit_start, w.start + w.context);
                    for j in w.emit() {
                        covered[j] += 1;
                    }
                    if w.start > 0 {
                        assert!(w.context >= discard.min(w.start), "{total}/{window}/{discard}: {w:?}");
                    }
                }
                assert!(covered.iter().all(|&c| c == 1), "{total}/{window}/{discard}");
                if total <= window {
                    assert_eq!(plan.windows.len(), 1);
                }
            }
        }
    }
}

/// Pulls every frame toward a per-window constant and records the given
/// prefix it was handed.
struct Stub {
    level: f64,
    given: Rc<RefCell<Vec<Option<Tensor>>>>,
}

impl VelocityField for Stub {
    fn velocity(&self, x: &Tensor, _t: f64, given: Option<&Tensor>) -> Result<Tensor> {
        self.given.borrow_mut().push(given.cloned());
        Ok(x.map(|v| v - self.level))
    }
}

fn stub(level: f64) -> Stub {
    Stub {
        level,
        given: Rc::default(),
    }
}

#[test]
fn stitched_context_is_copied_bitwise() {
    let plan = plan_windows(9, 5, 2).unwrap();
    let cfg = SampleConfig { steps: 8, seed: 3 };
    let mut logs = Vec::new();
    let z = stitch_windows(&plan, [2, 2, 2], &cfg, |w| {
        let s = stub(w.start as f64);
        logs.push((*w, s.given.clone()));
        Ok(Box::new(s))
    })
    .unwrap();
    assert_eq!(z.shape(), &[2, 9, 2, 2]);
    assert_eq!(logs.len(), 3);
    for (w, log) in &logs {
        let log = log.borrow();
        assert_eq!(log.len(), cfg.steps);
        for g in log.iter() {
            match g {
                None => assert_eq!(w.context, 0),
                Some(g) => assert_eq!(*g, z.narrow(1, w.start, w.start + w.context).unwrap()),
            }
        }
    }
}

#[test]
fn single_window_plan_matches_plain_sampling() {
    let plan = plan_windows(5, 5, 2).unwrap();
    let cfg = SampleConfig { steps: 6, seed: 11 };
    let stitched = stitch_windows(&plan, [3, 1, 2], &cfg, |_| Ok(Box::new(stub(0.25)))).unwrap();
    let direct = sample(&stub(0.25), &[3, 5, 1, 2], None, &cfg).unwrap();
    assert_eq!(stitched, direct);
}
