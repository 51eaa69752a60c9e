use serde::{Deserialize, Serialize};

/// A temporal interval `[start, end]`, in whatever unit the caller uses
/// (snippets inside the model, seconds in files and reports).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub start: f64,
    pub end: f64,
}

impl Segment {
    pub fn new(start: f64, end: f64) -> Self {
        Self { start, end }
    }

    pub fn length(&self) -> f64 {
        self.end - self.start
    }

    pub fn center(&self) -> f64 {
        0.5 * (self.start + self.end)
    }

    pub fn is_valid(&self) -> bool {
        self.start.is_finite() && self.end.is_finite() && self.start <= self.end
    }

    pub fn clamp(self, lo: f64, hi: f64) -> Self {
        Self {
            start: self.start.clamp(lo, hi),
            end: self.end.clamp(lo, hi),
        }
    }

    pub fn scaled(self, k: f64) -> Self {
        Self {
            start: self.start * k,
            end: self.end * k,
        }
    }

    pub fn intersection(&self, other: &Segment) -> f64 {
        (self.end.min(other.end) - self.start.max(other.start)).max(0.0)
    }
}

/// Temporal intersection over union. Two zero-length segments give 0.
pub fn tiou(a: &Segment, b: &Segment) -> f64 {
    let inter = a.intersection(b);
    let union = a.length() + b.length() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiou_examples() {
        let a = Segment::new(0.0, 10.0);
        assert_eq!(tiou(&a, &a), 1.0);
        assert!((tiou(&a, &Segment::new(5.0, 15.0)) - 5.0 / 15.0).abs() < 1e-15);
        assert_eq!(tiou(&a, &Segment::new(11.0, 12.0)), 0.0);
        assert_eq!(tiou(&Segment::new(3.0, 3.0), &Segment::new(3.0, 3.0)), 0.0);
    }
}
