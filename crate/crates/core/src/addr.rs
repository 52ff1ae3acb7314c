//! Addresses, page arithmetic and permission bits.

use std::fmt;

use crate::error::SimError;

pub const PAGE_SIZE: u64 = 4096;
pub const PAGE_MASK: u64 = PAGE_SIZE - 1;
pub const WORD_SIZE: u64 = 8;

/// A 64-bit byte address. The same type is used for guest-virtual,
/// guest-physical and host-physical addresses; the field or argument name
/// says which space an address lives in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Address(pub u64);

impl Address {
    pub const fn new(value: u64) -> Self {
        Address(value)
    }

    pub const fn value(self) -> u64 {
        self.0
    }

    /// The address with the low 12 bits cleared.
    pub const fn page(self) -> Address {
        Address(self.0 & !PAGE_MASK)
    }

    pub const fn offset(self) -> u64 {
        self.0 & PAGE_MASK
    }

    pub const fn is_page_aligned(self) -> bool {
        self.0 & PAGE_MASK == 0
    }

    pub const fn is_word_aligned(self) -> bool {
        self.0.is_multiple_of(WORD_SIZE)
    }

    pub const fn add(self, bytes: u64) -> Address {
        Address(self.0.wrapping_add(bytes))
    }

    pub const fn sub(self, bytes: u64) -> Address {
        Address(self.0.wrapping_sub(bytes))
    }

    pub fn require_page_aligned(self) -> Result<Address, SimError> {
        if self.is_page_aligned() {
            Ok(self)
        } else {
            Err(SimError::Unaligned(self))
        }
    }
}

impl fmt::Display for Address {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#x}", self.0)
    }
}

impl From<u64> for Address {
    fn from(value: u64) -> Self {
        Address(value)
    }
}

/// Iterate the page-aligned addresses overlapped by `[start, start + size)`.
pub fn pages_covering(start: Address, size: u64) -> impl Iterator<Item = Address> {
    let first = start.page().0;
    let last = if size == 0 {
        first
    } else {
        start.0.saturating_add(size - 1) & !PAGE_MASK
    };
    let count = if size == 0 {
        0
    } else {
        (last - first) / PAGE_SIZE + 1
    };
    (0..count).map(move |i| Address(first + i * PAGE_SIZE))
}

/// The kind of memory access being translated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AccessKind {
    Read,
    Write,
    Execute,
}

impl AccessKind {
    pub fn name(self) -> &'static str {
        match self {
            AccessKind::Read => "read",
            AccessKind::Write => "write",
            AccessKind::Execute => "fetch",
        }
    }
}

impl fmt::Display for AccessKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, PartialOrd, Ord)]
pub struct Permission {
    pub read: bool,
    pub write: bool,
    pub execute: bool,
}

impl Permission {
    pub const NONE: Permission = Permission {
        read: false,
        write: false,
        execute: false,
    };
    pub const R: Permission = Permission {
        read: true,
        write: false,
        execute: false,
    };
    pub const RW: Permission = Permission {
        read: true,
        write: true,
        execute: false,
    };
    pub const RX: Permission = Permission {
        read: true,
        write: false,
        execute: true,
    };
    pub const RWX: Permission = Permission {
        read: true,
        write: true,
        execute: true,
    };
    pub const X: Permission = Permission {
        read: false,
        write: false,
        execute: true,
    };

    pub fn allows(self, access: AccessKind) -> bool {
        match access {
            AccessKind::Read => self.read,
            AccessKind::Write => self.write,
            AccessKind::Execute => self.execute,
        }
    }

    pub fn union(self, other: Permission) -> Permission {
        Permission {
            read: self.read || other.read,
            write: self.write || other.write,
            execute: self.execute || other.execute,
        }
    }

    pub fn is_none(self) -> bool {
        !(self.read || self.write || self.execute)
    }
}

impl fmt::Display for Permission {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}{}{}",
            if self.read { 'r' } else { '-' },
            if self.write { 'w' } else { '-' },
            if self.execute { 'x' } else { '-' }
        )
    }
}
