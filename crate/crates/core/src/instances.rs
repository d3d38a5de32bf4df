//! Small built-in scenarios used by the verification suite and benches.

use crate::model::{DynamicsKind, RobotSpec, Scenario};
use crate::region::{AxisBox, Region};

/// One 1-D integrator (`xdot = u`) on `[-1, 1]` with the goal strip
/// `[-0.05, 0.05]`.
pub fn line_robot(speed: f64) -> Scenario {
    Scenario {
        name: "line_1robot".into(),
        robots: vec![RobotSpec {
            id: 0,
            dynamics: DynamicsKind::CustomAffine {
                a: vec![vec![0.0]],
                b: vec![vec![1.0]],
                c: vec![0.0],
            },
            control_box: AxisBox::new(vec![-speed], vec![speed]).unwrap(),
            speed_bound: speed,
            lipschitz: 0.0,
        }],
        state_boxes: vec![AxisBox::new(vec![-1.0], vec![1.0]).unwrap()],
        obstacles: vec![Region::empty()],
        goals: vec![Region::new(vec![
            AxisBox::new(vec![-0.05], vec![0.05]).unwrap(),
        ])],
        sigma: 0.1,
        starts: Some(vec![vec![0.8]]),
    }
    .validated()
    .expect("line scenario is valid")
}

/// Two 1-D integrators sharing the segment `[0, 0.4]` with goals at the
/// opposite ends and safety distance 0.15. Small enough for the
/// space-time oracle to enumerate exhaustively.
pub fn two_robot_line() -> Scenario {
    let robot = |id| RobotSpec {
        id,
        dynamics: DynamicsKind::CustomAffine {
            a: vec![vec![0.0]],
            b: vec![vec![1.0]],
            c: vec![0.0],
        },
        control_box: AxisBox::new(vec![-0.25], vec![0.25]).unwrap(),
        speed_bound: 0.25,
        lipschitz: 0.0,
    };
    Scenario {
        name: "two_robot_line".into(),
        robots: vec![robot(0), robot(1)],
        state_boxes: vec![
            AxisBox::new(vec![0.0], vec![0.4]).unwrap(),
            AxisBox::new(vec![0.0], vec![0.4]).unwrap(),
        ],
        obstacles: vec![Region::empty(), Region::empty()],
        goals: vec![
            Region::new(vec![AxisBox::new(vec![0.0], vec![0.01]).unwrap()]),
            Region::new(vec![AxisBox::new(vec![0.39], vec![0.4]).unwrap()]),
        ],
        sigma: 0.15,
        starts: Some(vec![vec![0.2], vec![0.4]]),
    }
    .validated()
    .expect("two-robot line scenario is valid")
}
