//! Sliding input/target windows.

use chrono::{DateTime, Duration, Utc};

use super::Segment;
use crate::error::{Error, Result};

/// One training or evaluation example: `window` hours of input followed
/// immediately by `horizon` hours of target.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSample {
    /// Hour index of the first input step within the full timeline.
    pub offset: usize,
    pub window_start: DateTime<Utc>,
    /// `rows × window`
    pub input: Vec<Vec<f64>>,
    /// `rows × horizon`
    pub target: Vec<Vec<f64>>,
}

impl WindowSample {
    /// Hour index of the first forecast step.
    pub fn target_offset(&self) -> usize {
        self.offset + self.input.first().map_or(0, Vec::len)
    }
}

pub fn make_windows(
    segment: &Segment,
    window: usize,
    horizon: usize,
    stride: usize,
) -> Result<Vec<WindowSample>> {
    if stride == 0 || window == 0 || horizon == 0 {
        return Err(Error::Config("window, horizon and stride must be positive".into()));
    }
    let len = segment.len();
    if len < window + horizon {
        return Err(Error::Config(format!(
            "segment of {len} hours cannot hold a {window}+{horizon} window"
        )));
    }
    let count = (len - window - horizon) / stride + 1;
    Ok((0..count)
        .map(|k| {
            let s = k * stride;
            WindowSample {
                offset: segment.offset + s,
                window_start: segment.start + Duration::hours(s as i64),
                input: segment.rows().iter().map(|r| r[s..s + window].to_vec()).collect(),
                target: segment
                    .rows()
                    .iter()
                    .map(|r| r[s + window..s + window + horizon].to_vec())
                    .collect(),
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;

    fn segment(len: usize) -> Segment {
        let t0 = Utc.with_ymd_and_hms(2020, 1, 1, 0, 0, 0).unwrap();
        Segment::new(100, t0, vec![(0..len).map(|h| h as f64).collect(); 2])
    }

    #[test]
    fn boundary_counts() {
        assert_eq!(make_windows(&segment(30), 24, 6, 1).unwrap().len(), 1);
        assert_eq!(make_windows(&segment(31), 24, 6, 1).unwrap().len(), 2);
        assert!(matches!(make_windows(&segment(29), 24, 6, 1), Err(Error::Config(_))));
        assert_eq!(make_windows(&segment(100), 24, 6, 7).unwrap().len(), (100 - 30) / 7 + 1);
    }

    #[test]
    fn target_follows_input() {
        let windows = make_windows(&segment(40), 24, 6, 1).unwrap();
        for w in &windows {
            assert_eq!(w.target[0][0], w.input[0][23] + 1.0);
            assert_eq!(w.target_offset(), w.offset + 24);
        }
        // stride 1 enumerates every start exactly once
        let starts: Vec<usize> = windows.iter().map(|w| w.offset).collect();
        assert_eq!(starts, (100..100 + 11).collect::<Vec<_>>());
        assert_eq!(windows[3].window_start, segment(1).start + Duration::hours(3));
    }
}
