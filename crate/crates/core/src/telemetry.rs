//! Per-message performance metrics computed from one participant's raw input
//! events between two submissions.
//!
//! Every delta is taken between client timestamps of the same device. Key
//! events are `KEY_DOWN` and `KEY_ERASE`; both count towards duration and
//! rhythm.

use crate::model::{InputAction, InputEvent, Millis, TelemetrySummary};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum WindowError {
    #[error("events are not sorted by client_ts_ms (index {0})")]
    Unsorted(usize),
    #[error("key event at index {0} precedes the window start")]
    BeforeStart(usize),
    #[error("event at index {0} follows the submission")]
    AfterSubmit(usize),
}

/// Input events of one participant leading up to one submission.
#[derive(Debug, Clone, PartialEq)]
pub struct EventWindow {
    events: Vec<InputEvent>,
    window_start_ts_ms: Millis,
    submit_ts_ms: Millis,
}

impl EventWindow {
    /// Key events must lie in `[window_start, submit]`. Mouse and focus events
    /// recorded before the turn anchor are kept (they still count for mouse
    /// metrics) but must not follow the submission.
    pub fn new(
        events: Vec<InputEvent>,
        window_start_ts_ms: Millis,
        submit_ts_ms: Millis,
    ) -> Result<Self, WindowError> {
        for (i, pair) in events.windows(2).enumerate() {
            if pair[1].client_ts_ms < pair[0].client_ts_ms {
                return Err(WindowError::Unsorted(i + 1));
            }
        }
        for (i, e) in events.iter().enumerate() {
            if e.action.is_key() && e.client_ts_ms < window_start_ts_ms {
                return Err(WindowError::BeforeStart(i));
            }
            if e.client_ts_ms > submit_ts_ms {
                return Err(WindowError::AfterSubmit(i));
            }
        }
        Ok(Self {
            events,
            window_start_ts_ms,
            submit_ts_ms,
        })
    }

    pub fn events(&self) -> &[InputEvent] {
        &self.events
    }

    pub fn window_start_ts_ms(&self) -> Millis {
        self.window_start_ts_ms
    }

    pub fn submit_ts_ms(&self) -> Millis {
        self.submit_ts_ms
    }

    fn key_times(&self) -> impl Iterator<Item = Millis> + '_ {
        self.events
            .iter()
            .filter(|e| e.action.is_key())
            .map(|e| e.client_ts_ms)
    }
}

fn non_negative(delta: Millis) -> u64 {
    delta.max(0) as u64
}

/// Pre-turn latency: window start to first key event, or to the submission
/// when nothing was typed.
pub fn compute_pause(window: &EventWindow) -> u64 {
    let until = window.key_times().next().unwrap_or(window.submit_ts_ms);
    non_negative(until - window.window_start_ts_ms)
}

/// Returns `(typing_duration_ms, char_count, speed_cps)`.
pub fn compute_speed(window: &EventWindow, submitted_text: &str) -> (u64, u64, f64) {
    let mut keys = window.key_times();
    let duration = match keys.next() {
        Some(first) => non_negative(keys.last().unwrap_or(first) - first),
        None => 0,
    };
    let chars = submitted_text.chars().count() as u64;
    let speed = if duration == 0 {
        0.0
    } else {
        chars as f64 / (duration as f64 / 1000.0)
    };
    (duration, chars, speed)
}

/// Inter-key intervals plus population mean, standard deviation and
/// coefficient of variation.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Rhythm {
    pub iki_list_ms: Vec<u64>,
    pub mean_ms: Option<f64>,
    pub stddev_ms: Option<f64>,
    pub cv: Option<f64>,
}

pub fn compute_rhythm(window: &EventWindow) -> Rhythm {
    let times: Vec<Millis> = window.key_times().collect();
    let ikis: Vec<u64> = times.windows(2).map(|w| non_negative(w[1] - w[0])).collect();
    if ikis.is_empty() {
        return Rhythm::default();
    }
    let n = ikis.len() as f64;
    let mean = ikis.iter().map(|&x| x as f64).sum::<f64>() / n;
    let var = ikis
        .iter()
        .map(|&x| {
            let d = x as f64 - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    let stddev = var.sqrt();
    let cv = (mean > 0.0).then(|| stddev / mean);
    Rhythm {
        iki_list_ms: ikis,
        mean_ms: Some(mean),
        stddev_ms: Some(stddev),
        cv,
    }
}

/// Returns `(mouse_path_px, mouse_event_count)`.
pub fn compute_mouse(window: &EventWindow) -> (f64, u64) {
    let points: Vec<(f64, f64)> = window
        .events
        .iter()
        .filter_map(|e| match e.action {
            InputAction::MouseMove { x, y } => Some((x as f64, y as f64)),
            _ => None,
        })
        .collect();
    let path = points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0).hypot(w[1].1 - w[0].1))
        .sum();
    (path, points.len() as u64)
}

pub fn summarize(window: &EventWindow, submitted_text: &str) -> TelemetrySummary {
    let (typing_duration_ms, char_count, speed_cps) = compute_speed(window, submitted_text);
    let rhythm = compute_rhythm(window);
    let (mouse_path_px, mouse_event_count) = compute_mouse(window);
    let count = |pred: fn(&InputAction) -> bool| {
        window.events.iter().filter(|e| pred(&e.action)).count() as u64
    };
    TelemetrySummary {
        pause_before_ms: compute_pause(window),
        typing_duration_ms,
        char_count,
        keystroke_count: count(|a| matches!(a, InputAction::KeyDown { .. })),
        erase_count: count(|a| matches!(a, InputAction::KeyErase { .. })),
        speed_cps,
        iki_mean_ms: rhythm.mean_ms,
        iki_stddev_ms: rhythm.stddev_ms,
        iki_cv: rhythm.cv,
        iki_list_ms: rhythm.iki_list_ms,
        mouse_path_px,
        mouse_event_count,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn keys_at(ts: &[Millis]) -> Vec<InputEvent> {
        ts.iter()
            .enumerate()
            .map(|(i, &t)| InputEvent::key_down(t, 1, i as u32 + 1))
            .collect()
    }

    fn window(events: Vec<InputEvent>, start: Millis, submit: Millis) -> EventWindow {
        EventWindow::new(events, start, submit).unwrap()
    }

    #[test]
    fn pause_examples() {
        assert_eq!(compute_pause(&window(keys_at(&[1200]), 0, 2000)), 1200);
        assert_eq!(compute_pause(&window(vec![], 0, 500)), 500);
        assert_eq!(compute_pause(&window(keys_at(&[0]), 0, 10)), 0);
    }

    #[test]
    fn pause_ignores_mouse_before_first_key() {
        let mut ev = vec![InputEvent::mouse(100, 0, 0, 0)];
        ev.extend(keys_at(&[700]));
        assert_eq!(compute_pause(&window(ev, 200, 900)), 500);
    }

    #[test]
    fn speed_examples() {
        let w = window(keys_at(&[1000, 1600, 2200, 2900, 3500]), 0, 4000);
        assert_eq!(compute_speed(&w, "hello"), (2500, 5, 2.0));
        assert_eq!(compute_speed(&window(keys_at(&[5]), 0, 9), "a"), (0, 1, 0.0));
        assert_eq!(compute_speed(&window(vec![], 0, 9), "xyz"), (0, 3, 0.0));
    }

    #[test]
    fn rhythm_examples() {
        let r = compute_rhythm(&window(keys_at(&[0, 100, 300]), 0, 400));
        assert_eq!(r.iki_list_ms, vec![100, 200]);
        assert_eq!(r.mean_ms, Some(150.0));
        assert_eq!(r.stddev_ms, Some(50.0));
        assert!((r.cv.unwrap() - 1.0 / 3.0).abs() < 1e-12);

        assert_eq!(compute_rhythm(&window(keys_at(&[7]), 0, 9)), Rhythm::default());

        let even = compute_rhythm(&window(keys_at(&[0, 50, 100, 150]), 0, 200));
        assert_eq!(even.stddev_ms, Some(0.0));
        assert_eq!(even.cv, Some(0.0));
    }

    #[test]
    fn cv_absent_when_mean_zero() {
        let r = compute_rhythm(&window(keys_at(&[10, 10, 10]), 0, 20));
        assert_eq!(r.mean_ms, Some(0.0));
        assert_eq!(r.cv, None);
    }

    #[test]
    fn erase_counts_as_key_event() {
        let ev = vec![
            InputEvent::key_down(0, 1, 1),
            InputEvent::erase(40, 1, 0),
            InputEvent::key_down(100, 1, 1),
        ];
        let s = summarize(&window(ev, 0, 100), "a");
        assert_eq!(s.iki_list_ms, vec![40, 60]);
        assert_eq!((s.keystroke_count, s.erase_count), (2, 1));
        assert_eq!(s.typing_duration_ms, 100);
    }

    #[test]
    fn mouse_examples() {
        let ev = vec![InputEvent::mouse(0, 0, 0, 0), InputEvent::mouse(10, 3, 4, 0)];
        assert_eq!(compute_mouse(&window(ev, 0, 20)), (5.0, 2));
        assert_eq!(compute_mouse(&window(vec![], 0, 20)), (0.0, 0));
    }

    #[test]
    fn paste_is_one_keystroke() {
        let ev = vec![InputEvent::key_down(0, 5, 5), InputEvent::key_down(200, 1, 6)];
        let s = summarize(&window(ev, 0, 300), "abcdef");
        assert_eq!((s.keystroke_count, s.char_count), (2, 6));
        assert_eq!(s.iki_list_ms, vec![200]);
    }

    #[test]
    fn empty_window_summary() {
        let s = summarize(&window(vec![], 0, 0), "x");
        assert_eq!(
            s,
            TelemetrySummary {
                char_count: 1,
                ..TelemetrySummary::default()
            }
        );
    }

    #[test]
    fn composite_matches_components() {
        let mut ev = keys_at(&[1000, 1100, 1300]);
        ev.push(InputEvent::mouse(1400, 0, 0, 3));
        ev.push(InputEvent::mouse(1500, 3, 4, 3));
        let w = window(ev, 0, 2000);
        let s = summarize(&w, "abc");
        assert_eq!(s.pause_before_ms, compute_pause(&w));
        let (d, c, v) = compute_speed(&w, "abc");
        assert_eq!((s.typing_duration_ms, s.char_count, s.speed_cps), (d, c, v));
        let r = compute_rhythm(&w);
        assert_eq!(s.iki_list_ms, r.iki_list_ms);
        assert_eq!((s.iki_mean_ms, s.iki_stddev_ms, s.iki_cv), (r.mean_ms, r.stddev_ms, r.cv));
        assert_eq!((s.mouse_path_px, s.mouse_event_count), compute_mouse(&w));
        assert_eq!(summarize(&w, "abc"), s);
    }

    #[test]
    fn window_validation() {
        let ev = keys_at(&[5, 3]);
        assert_eq!(EventWindow::new(ev, 0, 10), Err(WindowError::Unsorted(1)));
        assert_eq!(
            EventWindow::new(keys_at(&[5]), 6, 10),
            Err(WindowError::BeforeStart(0))
        );
        assert_eq!(
            EventWindow::new(keys_at(&[11]), 0, 10),
            Err(WindowError::AfterSubmit(0))
        );
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn arb_window() -> impl Strategy<Value = (Vec<InputEvent>, Millis)> {
            prop::collection::vec((0i64..500, 0u8..4, -500i32..500, -500i32..500), 0..60)
                .prop_map(|steps| {
                    let mut t = 0;
                    let mut len = 0u32;
                    let mut out = Vec::new();
                    for (dt, k, x, y) in steps {
                        t += dt;
                        let ev = match k {
                            0 | 1 => InputEvent::key_down(t, 1, len + 1),
                            2 if len > 0 => InputEvent::erase(t, 1, len - 1),
                            _ => InputEvent::mouse(t, x, y, len),
                        };
                        len = ev.draft_len_after;
                        out.push(ev);
                    }
                    (out, t)
                })
        }

        proptest! {
            #[test]
            fn shift_invariance((events, end) in arb_window(), shift in -1_000_000i64..1_000_000) {
                let a = summarize(&EventWindow::new(events.clone(), 0, end).unwrap(), "text");
                let shifted = events.into_iter().map(|mut e| { e.client_ts_ms += shift; e }).collect();
                let b = summarize(&EventWindow::new(shifted, shift, end + shift).unwrap(), "text");
                prop_assert_eq!(a, b);
            }

            #[test]
            fn iki_length_law((events, end) in arb_window()) {
                let keys = events.iter().filter(|e| e.action.is_key()).count();
                let s = summarize(&EventWindow::new(events, 0, end).unwrap(), "");
                prop_assert_eq!(s.iki_list_ms.len(), keys.saturating_sub(1));
                prop_assert_eq!(s.iki_mean_ms.is_some(), keys >= 2);
                if s.typing_duration_ms == 0 { prop_assert_eq!(s.speed_cps, 0.0); }
            }
        }
    }
}
