//! ELF inspection and reversible patching.
//!
//! The loader-based execution modes rewrite the program interpreter, the
//! library search paths and the `DT_NEEDED` names of executables inside a
//! container so that nothing is resolved from the host. Every edit made to a
//! container file is recorded in a [`Journal`] holding the original bytes, so
//! a container can always be returned to its pristine state.
//!
//! The crate also reads `ld.so.cache` files ([`ldcache`]) and knows how to
//! neutralize the host search locations compiled into a glibc dynamic loader
//! ([`loader`]).

mod edit;
mod error;
mod info;
pub mod journal;
pub mod ldcache;
pub mod loader;
mod parse;
mod raw;
pub mod tree;

pub use edit::{apply_edit, EditOutcome, ElfEdit};
pub use error::ElfError;
pub use info::{interpreter_from_head, read_elf, ElfClass, ElfInfo, HeadProbe, ObjectKind};
pub use journal::{Journal, JournalRecord, RecordKind, RevertReport};
pub use parse::{DynEntry, ElfFile};

/// The four bytes every ELF file starts with.
pub const ELF_MAGIC: [u8; 4] = [0x7f, b'E', b'L', b'F'];

/// Returns true when `data` starts with the ELF magic.
pub fn is_elf(data: &[u8]) -> bool {
    data.len() >= 4 && data[..4] == ELF_MAGIC
}
