use std::io;

#[derive(Debug, thiserror::Error)]
pub enum ElfError {
    #[error("not an ELF file")]
    NotElf,
    #[error("malformed ELF: {0}")]
    Format(String),
    #[error("unsupported ELF operation: {0}")]
    Unsupported(String),
    #[error("journal: {0}")]
    Journal(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl ElfError {
    pub(crate) fn format(msg: impl Into<String>) -> Self {
        ElfError::Format(msg.into())
    }
}
