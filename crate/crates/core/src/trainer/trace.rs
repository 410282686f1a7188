use std::fmt::Write as _;

/// One optimisation step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub step: u64,
    pub task: usize,
    pub loss: f64,
}

/// Per-step training losses in step order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossTrace {
    records: Vec<LossRecord>,
}

impl LossTrace {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a record; steps must strictly increase.
    pub fn push(&mut self, record: LossRecord) {
        if let Some(last) = self.records.last() {
            assert!(record.step > last.step, "loss trace steps must increase");
        }
        self.records.push(record);
    }

    pub fn records(&self) -> &[LossRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Mean loss of the first `n` records.
    pub fn head_mean(&self, n: usize) -> f64 {
        mean(self.records.iter().take(n))
    }

    /// Mean loss of the last `n` records.
    pub fn tail_mean(&self, n: usize) -> f64 {
        mean(self.records.iter().rev().take(n))
    }

    /// `step,task,loss` CSV with six significant digits.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,task,loss\n");
        for r in &self.records {
            let _ = writeln!(out, "{},{},{}", r.step, r.task, format_sig6(r.loss));
        }
        out
    }
}

fn mean<'a>(records: impl Iterator<Item = &'a LossRecord>) -> f64 {
    let (sum, n) = records.fold((0.0, 0usize), |(s, n), r| (s + r.loss, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

/// Formats like C's `%.6g`.
pub fn format_sig6(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    let sci = format!("{x:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent");
    let exp: i32 = exp.parse().expect("exponent digits");
    if (-4..6).contains(&exp) {
        let decimals = (5 - exp).max(0) as usize;
        trim_zeros(&format!("{x:.decimals$}")).to_string()
    } else {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{sign}{:02}", trim_zeros(mantissa), exp.abs())
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}
