#![allow(dead_code)]

use rand::Rng;

use tvts::corpus::{sample_transcript_window, span_start, TimedTranscriptStream, TranscriptWindow, TRANSCRIPT_GAP_S};
use tvts::Error;

/// Draws `n` windows over random streams and returns every violated window
/// rule, described in words.
pub fn window_violations(n: usize, rng: &mut impl Rng) -> (usize, Vec<String>) {
    let mut checked = 0;
    let mut bad = Vec::new();
    while checked < n {
        let duration = rng.gen_range(20.0..60.0);
        let mut times: Vec<f64> = (0..rng.gen_range(20..200))
            .map(|_| (rng.gen_range(0.0..duration) * 100.0_f64).round() / 100.0)
            .collect();
        times.sort_by(f64::total_cmp);
        let stream = TimedTranscriptStream {
            words: times
                .iter()
                .enumerate()
                .map(|(i, &time)| tvts::corpus::TimedWord { word: format!("w{i}"), time })
                .collect(),
            duration_s: duration,
        };
        let k = rng.gen_range(2..7);
        // Whole or half seconds put word times exactly on span borders.
        let l = f64::from(rng.gen_range(2..9)) / 2.0;
        let slack = duration - TranscriptWindow::total_span(k, l);
        if slack <= 0.0 {
            continue;
        }
        let s_begin = if rng.gen_bool(0.3) {
            (rng.gen_range(0.0..slack) * 100.0_f64).floor() / 100.0
        } else {
            rng.gen_range(0.0..slack)
        };
        match sample_transcript_window(&stream, s_begin, k, l) {
            Ok(w) => {
                checked += 1;
                bad.extend(check_window(&stream, &w, s_begin, k, l));
            }
            Err(Error::EmptyTranscript { index, .. }) => {
                let s = span_start(s_begin, index, l);
                if stream.words.iter().any(|w| s <= w.time && w.time <= s + l) {
                    bad.push(format!("transcript {index} reported empty but has words"));
                }
                checked += 1;
            }
            Err(e) => bad.push(format!("unexpected error {e}")),
        }
    }
    (checked, bad)
}

fn check_window(stream: &TimedTranscriptStream, w: &TranscriptWindow, s_begin: f64, k: usize, l: f64) -> Vec<String> {
    let mut bad = Vec::new();
    if w.k() != k || w.order != (0..k).collect::<Vec<_>>() {
        bad.push(format!("window has {} spans, order {:?}", w.k(), w.order));
        return bad;
    }
    for (i, &(s, e)) in w.spans.iter().enumerate() {
        let expect = s_begin + i as f64 * (l + TRANSCRIPT_GAP_S);
        if s != expect || e != expect + l {
            bad.push(format!("span {i} is [{s}, {e}], expected [{expect}, {}]", expect + l));
        }
        let inside: Vec<String> = stream
            .words
            .iter()
            .filter(|x| expect <= x.time && x.time <= expect + l)
            .map(|x| x.word.clone())
            .collect();
        if w.texts[i] != inside {
            bad.push(format!("transcript {i} words {:?} != closed-interval words {inside:?}", w.texts[i]));
        }
    }
    for pair in w.spans.windows(2) {
        let (gap_from, gap_to) = (pair[0].1, pair[1].0);
        for x in &stream.words {
            if gap_from < x.time && x.time < gap_to && w.texts.iter().flatten().any(|t| *t == x.word) {
                bad.push(format!("gap word {} at {} leaked into a transcript", x.word, x.time));
            }
        }
    }
    bad
}
