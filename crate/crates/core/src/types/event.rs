use serde::{Deserialize, Serialize};

/// Sign of the log-intensity change that fired an event.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Polarity {
    Negative,
    Positive,
}

impl Polarity {
    #[inline]
    pub fn sign(self) -> f32 {
        match self {
            Polarity::Negative => -1.0,
            Polarity::Positive => 1.0,
        }
    }

    /// Dataset convention: 1 is positive, 0 is negative.
    pub fn from_bit(bit: u8) -> Option<Self> {
        match bit {
            0 => Some(Polarity::Negative),
            1 => Some(Polarity::Positive),
            _ => None,
        }
    }

    pub fn bit(self) -> u8 {
        match self {
            Polarity::Negative => 0,
            Polarity::Positive => 1,
        }
    }
}

/// A single event: timestamp in seconds, pixel column/row and polarity.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub t: f64,
    pub x: f32,
    pub y: f32,
    pub polarity: Polarity,
}

impl Event {
    pub fn new(t: f64, x: f32, y: f32, polarity: Polarity) -> Self {
        Self { t, x, y, polarity }
    }
}

/// Time span covered by a time-ordered slice of events.
pub fn time_span(events: &[Event]) -> Option<(f64, f64)> {
    Some((events.first()?.t, events.last()?.t))
}
