//! Sentence-level precision, recall and F1 per label, the P/I/O results
//! table and a tab-separated export that round-trips at full precision.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt::Write;

use crate::corpus::{Label, NUM_LABELS};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ConfusionCounts {
    pub true_positives: [u64; NUM_LABELS],
    pub false_positives: [u64; NUM_LABELS],
    pub false_negatives: [u64; NUM_LABELS],
    pub sentences: u64,
}

impl ConfusionCounts {
    pub fn merge(&mut self, other: &ConfusionCounts) {
        for l in 0..NUM_LABELS {
            self.true_positives[l] += other.true_positives[l];
            self.false_positives[l] += other.false_positives[l];
            self.false_negatives[l] += other.false_negatives[l];
        }
        self.sentences += other.sentences;
    }

    pub fn metrics(&self, label: Label) -> LabelMetrics {
        let l = label.index();
        LabelMetrics::from_counts(self.true_positives[l], self.false_positives[l], self.false_negatives[l])
    }

    /// Fraction of sentences labeled correctly.
    pub fn accuracy(&self) -> f64 {
        if self.sentences == 0 {
            return 0.0;
        }
        self.true_positives.iter().sum::<u64>() as f64 / self.sentences as f64
    }
}

/// Percentages in `[0, 100]`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LabelMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl LabelMetrics {
    /// Zero denominators give zero.
    pub fn from_counts(tp: u64, fp: u64, fn_: u64) -> Self {
        let ratio = |num: u64, den: u64| if den == 0 { 0.0 } else { 100.0 * num as f64 / den as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        Self {
            precision,
            recall,
            f1: harmonic_mean(precision, recall),
        }
    }
}

pub fn harmonic_mean(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Metrics for all seven labels, indexed like [`Label::index`].
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsReport {
    pub labels: [LabelMetrics; NUM_LABELS],
    /// Present for reports computed from counts; absent for averages.
    pub counts: Option<ConfusionCounts>,
}

impl MetricsReport {
    pub fn from_counts(counts: ConfusionCounts) -> Self {
        Self {
            labels: Label::ALL.map(|l| counts.metrics(l)),
            counts: Some(counts),
        }
    }

    pub fn label(&self, label: Label) -> &LabelMetrics {
        &self.labels[label.index()]
    }

    /// Mean F1 over P, I and O.
    pub fn pio_f1(&self) -> f64 {
        Label::PIO.iter().map(|&l| self.label(l).f1).sum::<f64>() / 3.0
    }

    /// Unweighted mean of every value across `reports`.
    pub fn mean(reports: &[MetricsReport]) -> Result<MetricsReport> {
        if reports.is_empty() {
            return Err(Error::EmptyInput("no reports to average"));
        }
        let n = reports.len() as f64;
        let mut out = MetricsReport::default();
        for l in 0..NUM_LABELS {
            let m = &mut out.labels[l];
            for r in reports {
                m.precision += r.labels[l].precision;
                m.recall += r.labels[l].recall;
                m.f1 += r.labels[l].f1;
            }
            m.precision /= n;
            m.recall /= n;
            m.f1 /= n;
        }
        Ok(out)
    }
}

/// Counts over parallel gold and predicted label sequences.
pub fn score_predictions<G: AsRef<[usize]>, P: AsRef<[usize]>>(gold: &[G], predicted: &[P]) -> Result<ConfusionCounts> {
    if gold.len() != predicted.len() {
        return Err(Error::Validation(format!(
            "{} gold abstracts but {} predictions",
            gold.len(),
            predicted.len()
        )));
    }
    let mut c = ConfusionCounts::default();
    for (i, (g, p)) in gold.iter().zip(predicted).enumerate() {
        let (g, p) = (g.as_ref(), p.as_ref());
        if g.len() != p.len() {
            return Err(Error::Validation(format!(
                "abstract {i}: {} gold labels but {} predicted",
                g.len(),
                p.len()
            )));
        }
        for (&gl, &pl) in g.iter().zip(p) {
            if gl >= NUM_LABELS || pl >= NUM_LABELS {
                return Err(Error::Validation(format!("abstract {i}: label index out of range")));
            }
            c.sentences += 1;
            if gl == pl {
                c.true_positives[gl] += 1;
            } else {
                c.false_positives[pl] += 1;
                c.false_negatives[gl] += 1;
            }
        }
    }
    Ok(c)
}

/// Per-fold test reports with their mean and the metrics of the pooled counts.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossValReport {
    pub folds: Vec<MetricsReport>,
    pub mean: MetricsReport,
    pub pooled: MetricsReport,
}

impl CrossValReport {
    pub fn new(folds: Vec<MetricsReport>) -> Result<Self> {
        let mean = MetricsReport::mean(&folds)?;
        let mut pooled = ConfusionCounts::default();
        for f in &folds {
            let c = f.counts.ok_or_else(|| Error::Validation("fold report without counts".into()))?;
            pooled.merge(&c);
        }
        Ok(Self {
            folds,
            mean,
            pooled: MetricsReport::from_counts(pooled),
        })
    }

    /// Rows for [`export_metrics`]: `fold<i>`, then `mean` and `pooled`.
    pub fn entries(&self) -> Vec<(String, MetricsReport)> {
        let mut out: Vec<_> = self
            .folds
            .iter()
            .enumerate()
            .map(|(i, r)| (format!("fold{i}"), r.clone()))
            .collect();
        out.push(("mean".to_string(), self.mean.clone()));
        out.push(("pooled".to_string(), self.pooled.clone()));
        out
    }
}

/// P/I/O table with one decimal per value.
pub fn render_report(report: &MetricsReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:^23}|{:^23}|{:^23}", "P-element", "I-element", "O-element");
    let head = format!("{:>6} {:>6} {:>6}   ", "p", "r", "F1");
    let _ = writeln!(s, "{}", [head.as_str(); 3].join("|"));
    let cells: Vec<String> = Label::PIO
        .iter()
        .map(|&l| {
            let m = report.label(l);
            format!("{:>6.1} {:>6.1} {:>6.1}   ", m.precision, m.recall, m.f1)
        })
        .collect();
    let _ = writeln!(s, "{}", cells.join("|"));
    s
}

const HEADER: &str = "run\tlabel\tprecision\trecall\tf1\ttp\tfp\tfn\tsentences";

/// One line per (run, label) for all seven labels. Floats are written in
/// shortest round-trip form; counts are `-` for averaged reports.
pub fn export_metrics(entries: &[(String, MetricsReport)]) -> String {
    let mut s = String::from(HEADER);
    s.push('\n');
    for (name, report) in entries {
        for label in Label::ALL {
            let m = report.label(label);
            let _ = write!(s, "{name}\t{}\t{:?}\t{:?}\t{:?}", label.tag(), m.precision, m.recall, m.f1);
            match &report.counts {
                Some(c) => {
                    let l = label.index();
                    let _ = writeln!(
                        s,
                        "\t{}\t{}\t{}\t{}",
                        c.true_positives[l], c.false_positives[l], c.false_negatives[l], c.sentences
                    );
                }
                None => s.push_str("\t-\t-\t-\t-\n"),
            }
        }
    }
    s
}

/// Inverse of [`export_metrics`].
pub fn parse_metrics(text: &str) -> Result<Vec<(String, MetricsReport)>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == HEADER => {}
        _ => {
            return Err(Error::Parse {
                line: 1,
                message: "missing metrics header".into(),
            })
        }
    }
    let mut out: Vec<(String, MetricsReport)> = Vec::new();
    let mut seen = 0usize;
    for (i, line) in lines {
        let err = |message: String| Error::Parse { line: i + 1, message };
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 9 {
            return Err(err(format!("expected 9 fields, found {}", f.len())));
        }
        let label: Label = f[1].parse().map_err(|_| err(format!("unknown label {:?}", f[1])))?;
        if label.index() != seen % NUM_LABELS {
            return Err(err("labels out of order".into()));
        }
        if seen % NUM_LABELS == 0 {
            let counts = (f[5] != "-").then(ConfusionCounts::default);
            out.push((f[0].to_string(), MetricsReport { counts, ..Default::default() }));
        }
        let (name, report) = out.last_mut().expect("pushed above");
        if name != f[0] {
            return Err(err(format!("run {:?} interrupted by {:?}", name, f[0])));
        }
        let float = |s: &str| s.parse::<f64>().map_err(|_| err(format!("bad number {s:?}")));
        let int = |s: &str| s.parse::<u64>().map_err(|_| err(format!("bad count {s:?}")));
        let l = label.index();
        report.labels[l] = LabelMetrics {
            precision: float(f[2])?,
            recall: float(f[3])?,
            f1: float(f[4])?,
        };
        match &mut report.counts {
            Some(c) => {
                c.true_positives[l] = int(f[5])?;
                c.false_positives[l] = int(f[6])?;
                c.false_negatives[l] = int(f[7])?;
                c.sentences = int(f[8])?;
            }
            None if f[5..].iter().all(|v| *v == "-") => {}
            None => return Err(err("counts on an averaged row".into())),
        }
        seen += 1;
    }
    if seen % NUM_LABELS != 0 {
        return Err(Error::Parse {
            line: text.lines().count(),
            message: "truncated run".into(),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;

    const P: usize = 1;
    const I: usize = 2;
    const O: usize = 3;

    #[test]
    fn perfect_predictions() {
        let gold = vec![vec![0, 1, 2, 3, 4, 5, 6]];
        let c = score_predictions(&gold, &gold).unwrap();
        let r = MetricsReport::from_counts(c);
        for l in Label::ALL {
            assert_eq!(c.false_positives[l.index()], 0);
            assert_eq!(c.false_negatives[l.index()], 0);
            assert_eq!(*r.label(l), LabelMetrics { precision: 100.0, recall: 100.0, f1: 100.0 });
        }
    }

    #[test]
    fn two_thirds_everywhere() {
        let m = LabelMetrics::from_counts(2, 1, 1);
        assert_eq!(format!("{:.1} {:.1} {:.1}", m.precision, m.recall, m.f1), "66.7 66.7 66.7");
    }

    #[test]
    fn hand_tallied_fixture() {
        // gold / predicted per abstract
        let gold = vec![vec![0, P, I, O, 5], vec![P, P, O], vec![4, I, I, 6]];
        let pred = vec![vec![0, P, O, O, 5], vec![P, I, O], vec![4, I, P, 6]];
        let c = score_predictions(&gold, &pred).unwrap();
        assert_eq!(c.sentences, 12);
        assert_eq!((c.true_positives[P], c.false_positives[P], c.false_negatives[P]), (2, 1, 1));
        assert_eq!((c.true_positives[I], c.false_positives[I], c.false_negatives[I]), (1, 1, 2));
        assert_eq!((c.true_positives[O], c.false_positives[O], c.false_negatives[O]), (2, 1, 0));
        let r = MetricsReport::from_counts(c);
        let i = r.label(Label::Intervention);
        assert!((i.precision - 50.0).abs() < 1e-12);
        assert!((i.recall - 100.0 / 3.0).abs() < 1e-12);
        assert!((i.f1 - 40.0).abs() < 1e-12);
        assert!((c.accuracy() - 9.0 / 12.0).abs() < 1e-15);
    }

    #[test]
    fn length_mismatch() {
        assert!(matches!(score_predictions(&[vec![0, 1]], &[vec![0]]), Err(Error::Validation(_))));
        assert!(matches!(score_predictions(&[vec![0]], &[vec![0], vec![1]]), Err(Error::Validation(_))));
    }

    #[test]
    fn renders_published_row() {
        let mut r = MetricsReport::default();
        let vals = [(91.7, 88.1, 89.8), (82.4, 84.6, 83.5), (87.0, 89.4, 88.1)];
        for (l, (p, rc, f)) in Label::PIO.iter().zip(vals) {
            r.labels[l.index()] = LabelMetrics { precision: p, recall: rc, f1: f };
        }
        let text = render_report(&r);
        let row = text.lines().nth(2).unwrap();
        let nums: Vec<&str> = row.split(|c: char| c == '|' || c.is_whitespace()).filter(|s| !s.is_empty()).collect();
        assert_eq!(nums, ["91.7", "88.1", "89.8", "82.4", "84.6", "83.5", "87.0", "89.4", "88.1"]);
    }

    #[test]
    fn zero_report_renders() {
        let r = MetricsReport::from_counts(ConfusionCounts::default());
        let text = render_report(&r);
        assert_eq!(text.lines().nth(2).unwrap().matches("0.0").count(), 9);
    }

    #[test]
    fn crossval_mean_and_pooled() {
        let a = MetricsReport::from_counts(score_predictions(&[vec![P, I]], &[vec![P, P]]).unwrap());
        let b = MetricsReport::from_counts(score_predictions(&[vec![O, P, P]], &[vec![O, P, I]]).unwrap());
        let cv = CrossValReport::new(vec![a.clone(), b.clone()]).unwrap();
        for l in 0..NUM_LABELS {
            assert!((cv.mean.labels[l].f1 - (a.labels[l].f1 + b.labels[l].f1) / 2.0).abs() < 1e-12);
        }
        assert_eq!(cv.pooled.counts.unwrap().sentences, 5);
        assert_eq!(cv.entries().len(), 4);
    }

    #[test]
    fn export_round_trip() {
        let a = MetricsReport::from_counts(score_predictions(&[vec![P, I, 0, 6]], &[vec![P, P, 0, 5]]).unwrap());
        let b = MetricsReport::from_counts(score_predictions(&[vec![O, 4]], &[vec![O, 4]]).unwrap());
        let cv = CrossValReport::new(vec![a, b]).unwrap();
        let entries = cv.entries();
        let text = export_metrics(&entries);
        assert_eq!(parse_metrics(&text).unwrap(), entries);
        assert!(parse_metrics("nonsense").is_err());
        let truncated: String = text.lines().take(5).map(|l| format!("{l}\n")).collect();
        assert!(parse_metrics(&truncated).is_err());
    }

    fn sequences() -> impl Strategy<Value = (Vec<Vec<usize>>, Vec<Vec<usize>>)> {
        prop::collection::vec(prop::collection::vec((0..NUM_LABELS, 0..NUM_LABELS), 1..6), 1..5).prop_map(|abs| {
            let gold = abs.iter().map(|a| a.iter().map(|p| p.0).collect()).collect();
            let pred = abs.iter().map(|a| a.iter().map(|p| p.1).collect()).collect();
            (gold, pred)
        })
    }

    proptest! {
        #[test]
        fn metrics_are_bounded_and_consistent((gold, pred) in sequences()) {
            let c = score_predictions(&gold, &pred).unwrap();
            prop_assert!(c.true_positives.iter().sum::<u64>() <= c.sentences);
            let r = MetricsReport::from_counts(c);
            for m in r.labels {
                for v in [m.precision, m.recall, m.f1] {
                    prop_assert!((0.0..=100.0).contains(&v));
                }
                prop_assert_eq!(m.f1, harmonic_mean(m.precision, m.recall));
            }
            prop_assert_eq!(parse_metrics(&export_metrics(&[("x".into(), r.clone())])).unwrap()[0].1.clone(), r);
        }

        #[test]
        fn unrelated_sentence_changes_nothing((gold, pred) in sequences(), l in 0..NUM_LABELS, other in 1..NUM_LABELS) {
            let base = MetricsReport::from_counts(score_predictions(&gold, &pred).unwrap());
            let o = (l + other) % NUM_LABELS;
            let mut g2 = gold.clone();
            let mut p2 = pred.clone();
            g2[0].push(o);
            p2[0].push(o);
            let ext = MetricsReport::from_counts(score_predictions(&g2, &p2).unwrap());
            prop_assert_eq!(base.labels[l], ext.labels[l]);
        }
    }
}
