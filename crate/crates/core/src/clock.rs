use std::sync::Arc;

use chrono::{DateTime, Utc};

/// Source of timestamps. Replayed generations use a fixed clock so their
/// output is byte-identical across runs.
#[derive(Clone, Default)]
pub enum Clock {
    #[default]
    System,
    Fixed(DateTime<Utc>),
    Custom(Arc<dyn Fn() -> DateTime<Utc> + Send + Sync>),
}

impl Clock {
    pub fn now(&self) -> DateTime<Utc> {
        match self {
            Clock::System => Utc::now(),
            Clock::Fixed(t) => *t,
            Clock::Custom(f) => f(),
        }
    }
}

impl std::fmt::Debug for Clock {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Clock::System => f.write_str("Clock::System"),
            Clock::Fixed(t) => write!(f, "Clock::Fixed({t})"),
            Clock::Custom(_) => f.write_str("Clock::Custom"),
        }
    }
}
