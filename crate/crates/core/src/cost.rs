//! Operation latencies and the analytic crossing model of the igc data path.

use std::fmt;

use crate::error::{parse_err, InputKind, Result};

/// Median cycles per operation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CostTable {
    pub ud_oneway: u64,
    pub ud_roundtrip: u64,
    pub ve_oneway: u64,
    pub ve_roundtrip: u64,
    pub ept_violation_oneway: u64,
    pub ept_violation_roundtrip: u64,
    pub vmfunc: u64,
    pub sentry_oneway: u64,
    pub sentry_roundtrip: u64,
    pub int_oneway: u64,
    pub int_roundtrip: u64,
}

impl Default for CostTable {
    fn default() -> Self {
        CostTable {
            ud_oneway: 448,
            ud_roundtrip: 790,
            ve_oneway: 938,
            ve_roundtrip: 1286,
            ept_violation_oneway: 990,
            ept_violation_roundtrip: 1318,
            vmfunc: 142,
            sentry_oneway: 1782,
            sentry_roundtrip: 3592,
            int_oneway: 642,
            int_roundtrip: 2958,
        }
    }
}

impl CostTable {
    pub const FIELDS: [&'static str; 11] = [
        "ud_oneway",
        "ud_roundtrip",
        "ve_oneway",
        "ve_roundtrip",
        "ept_violation_oneway",
        "ept_violation_roundtrip",
        "vmfunc",
        "sentry_oneway",
        "sentry_roundtrip",
        "int_oneway",
        "int_roundtrip",
    ];

    fn field_mut(&mut self, name: &str) -> Option<&mut u64> {
        Some(match name {
            "ud_oneway" => &mut self.ud_oneway,
            "ud_roundtrip" => &mut self.ud_roundtrip,
            "ve_oneway" => &mut self.ve_oneway,
            "ve_roundtrip" => &mut self.ve_roundtrip,
            "ept_violation_oneway" => &mut self.ept_violation_oneway,
            "ept_violation_roundtrip" => &mut self.ept_violation_roundtrip,
            "vmfunc" => &mut self.vmfunc,
            "sentry_oneway" => &mut self.sentry_oneway,
            "sentry_roundtrip" => &mut self.sentry_roundtrip,
            "int_oneway" => &mut self.int_oneway,
            "int_roundtrip" => &mut self.int_roundtrip,
            _ => return None,
        })
    }

    pub fn get(&self, name: &str) -> Option<u64> {
        let mut copy = *self;
        copy.field_mut(name).map(|v| *v)
    }

    /// Reason the table is unusable, if any.
    pub fn validate(&self) -> std::result::Result<(), String> {
        for name in Self::FIELDS {
            if self.get(name) == Some(0) {
                return Err(format!("{name} must be positive"));
            }
        }
        if self.sentry_roundtrip < 2 * self.vmfunc {
            return Err("sentry_roundtrip must be at least twice vmfunc".into());
        }
        Ok(())
    }

    /// Apply `name value` overrides on top of the defaults. `#` starts a
    /// comment.
    pub fn parse(text: &str) -> Result<CostTable> {
        let mut table = CostTable::default();
        let mut last_line = 0;
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            last_line = line;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let mut toks = content.split_whitespace();
            let (Some(name), Some(value), None) = (toks.next(), toks.next(), toks.next()) else {
                return Err(parse_err(
                    InputKind::CostTable,
                    line,
                    "expected `name value`",
                ));
            };
            let value: u64 = crate::policy::parse_u64(value).ok_or_else(|| {
                parse_err(InputKind::CostTable, line, format!("bad number `{value}`"))
            })?;
            let slot = table.field_mut(name).ok_or_else(|| {
                parse_err(
                    InputKind::CostTable,
                    line,
                    format!("unknown operation `{name}`"),
                )
            })?;
            *slot = value;
        }
        table
            .validate()
            .map_err(|m| parse_err(InputKind::CostTable, last_line, m))?;
        Ok(table)
    }
}

impl fmt::Display for CostTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for name in Self::FIELDS {
            writeln!(f, "{name} {}", self.get(name).unwrap_or(0))?;
        }
        Ok(())
    }
}

/// Cycles for `crossings` sentry switches: pairs cost a round trip, a
/// leftover switch costs one way.
pub fn estimate_cycles(crossings: u64, table: &CostTable) -> u64 {
    crossings / 2 * table.sentry_roundtrip + crossings % 2 * table.sentry_oneway
}

/// An exact switch rate: `switches` per `per` units. Equality compares
/// values, so 8/4 equals 2/1.
#[derive(Debug, Clone, Copy)]
pub struct Rate {
    pub switches: u64,
    pub per: u64,
}

impl Rate {
    pub fn new(switches: u64, per: u64) -> Self {
        assert!(per > 0, "rate denominator must be positive");
        Rate { switches, per }
    }

    pub fn whole(switches: u64) -> Self {
        Rate::new(switches, 1)
    }

    pub fn value(self) -> f64 {
        self.switches as f64 / self.per as f64
    }

    pub fn is_integer(self) -> bool {
        self.switches.is_multiple_of(self.per)
    }

    /// Exact comparison by cross multiplication.
    pub fn le(self, other: Rate) -> bool {
        self.switches as u128 * other.per as u128 <= other.switches as u128 * self.per as u128
    }
}

impl PartialEq for Rate {
    fn eq(&self, other: &Rate) -> bool {
        self.le(*other) && other.le(*self)
    }
}

impl Eq for Rate {}

impl fmt::Display for Rate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_integer() {
            write!(f, "{}", self.switches / self.per)
        } else {
            write!(f, "{}/{} ({:.4})", self.switches, self.per, self.value())
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DataPathConfig {
    pub refined: bool,
    pub tx_cleanup_batch: u64,
    pub rx_budget: u64,
    pub interrupts_in_driver: bool,
}

impl Default for DataPathConfig {
    fn default() -> Self {
        DataPathConfig {
            refined: false,
            tx_cleanup_batch: 128,
            rx_budget: 64,
            interrupts_in_driver: true,
        }
    }
}

impl DataPathConfig {
    pub fn refined() -> Self {
        DataPathConfig {
            refined: true,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.tx_cleanup_batch == 0 || self.rx_budget == 0 {
            return Err("batch and budget sizes must be at least 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DataPath {
    Isr,
    TxSubmission,
    TxCleanup,
    RxSmall,
    RxLarge,
    Poll,
}

impl DataPath {
    pub const ALL: [DataPath; 6] = [
        DataPath::Isr,
        DataPath::TxSubmission,
        DataPath::TxCleanup,
        DataPath::RxSmall,
        DataPath::RxLarge,
        DataPath::Poll,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DataPath::Isr => "ISR",
            DataPath::TxSubmission => "TX submission",
            DataPath::TxCleanup => "TX cleanup",
            DataPath::RxSmall => "RX (<=256 B)",
            DataPath::RxLarge => "RX (>256 B)",
            DataPath::Poll => "Poll entry/exit",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Frequency {
    PerInterrupt,
    PerPacket,
    PerPoll,
}

impl Frequency {
    pub fn name(self) -> &'static str {
        match self {
            Frequency::PerInterrupt => "per interrupt",
            Frequency::PerPacket => "per packet",
            Frequency::PerPoll => "per poll",
        }
    }
}

/// One row of the crossing table. `low` and `high` differ only where the
/// count depends on run-time conditions (poll exit, a partly used budget).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Crossing {
    pub path: DataPath,
    pub frequency: Frequency,
    pub low: Rate,
    pub high: Rate,
    /// Reference figure when it is `low` rounded to two decimals.
    pub rounded_figure: Option<f64>,
}

impl fmt::Display for Crossing {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:<16} {:<14} ", self.path.name(), self.frequency.name())?;
        if self.low == self.high {
            write!(f, "{}", self.low)?;
        } else {
            write!(f, "{}..{}", self.low, self.high)?;
        }
        if let Some(fig) = self.rounded_figure {
            write!(f, "  [~{fig} rounded]")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossingTable {
    pub refined: bool,
    pub rows: Vec<Crossing>,
}

impl CrossingTable {
    pub fn get(&self, path: DataPath) -> &Crossing {
        self.rows
            .iter()
            .find(|r| r.path == path)
            .expect("every path has a row")
    }

    /// Every entry of `self` is at most the matching entry of `other`.
    pub fn dominated_by(&self, other: &CrossingTable) -> bool {
        self.rows.iter().all(|r| {
            let o = other.get(r.path);
            r.low.le(o.low) && r.high.le(o.high)
        })
    }
}

impl fmt::Display for CrossingTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "crossings ({})",
            if self.refined { "refined" } else { "baseline" }
        )?;
        for row in &self.rows {
            writeln!(f, "  {row}")?;
        }
        Ok(())
    }
}

/// Switch counts per path. Baseline RX rows include the poll-exit crossing
/// of a one-packet poll; refined RX rows count only the per-poll batch
/// helpers spread over a budget.
pub fn crossing_table(config: &DataPathConfig) -> CrossingTable {
    let row = |path, frequency, low, high, rounded_figure| Crossing {
        path,
        frequency,
        low,
        high,
        rounded_figure,
    };
    let poll = row(
        DataPath::Poll,
        Frequency::PerPoll,
        Rate::whole(2),
        Rate::whole(4),
        None,
    );
    let rows = if config.refined {
        let cleanup = Rate::new(2, config.tx_cleanup_batch);
        let rx_low = Rate::new(4, config.rx_budget);
        let rx_high = Rate::new(6, config.rx_budget);
        let tx_fig = (config.tx_cleanup_batch == 128).then_some(0.02);
        let rx_fig = (config.rx_budget == 64).then_some(0.06);
        vec![
            row(
                DataPath::Isr,
                Frequency::PerInterrupt,
                Rate::whole(0),
                Rate::whole(0),
                None,
            ),
            row(
                DataPath::TxSubmission,
                Frequency::PerPacket,
                Rate::whole(2),
                Rate::whole(2),
                None,
            ),
            row(
                DataPath::TxCleanup,
                Frequency::PerPacket,
                cleanup,
                cleanup,
                tx_fig,
            ),
            row(
                DataPath::RxSmall,
                Frequency::PerPacket,
                rx_low,
                rx_high,
                rx_fig,
            ),
            row(
                DataPath::RxLarge,
                Frequency::PerPacket,
                rx_low,
                rx_high,
                rx_fig,
            ),
            poll,
        ]
    } else {
        vec![
            row(
                DataPath::Isr,
                Frequency::PerInterrupt,
                Rate::whole(6),
                Rate::whole(6),
                None,
            ),
            row(
                DataPath::TxSubmission,
                Frequency::PerPacket,
                Rate::whole(6),
                Rate::whole(6),
                None,
            ),
            row(
                DataPath::TxCleanup,
                Frequency::PerPacket,
                Rate::whole(4),
                Rate::whole(4),
                None,
            ),
            row(
                DataPath::RxSmall,
                Frequency::PerPacket,
                Rate::whole(10),
                Rate::whole(10),
                None,
            ),
            row(
                DataPath::RxLarge,
                Frequency::PerPacket,
                Rate::whole(14),
                Rate::whole(14),
                None,
            ),
            poll,
        ]
    };
    CrossingTable {
        refined: config.refined,
        rows,
    }
}
