use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum PathError {
    #[error("{0}: no such file or directory")]
    NotFound(PathBuf),
    #[error("{0}: too many levels of symbolic links")]
    Loop(PathBuf),
    #[error("{0}: permission denied")]
    Access(PathBuf),
    #[error("{0}: exec format error")]
    NoExec(PathBuf),
    #[error("file name too long")]
    TooLong,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl PathError {
    /// The errno a system call would fail with.
    pub fn errno(&self) -> i32 {
        match self {
            PathError::NotFound(_) => libc::ENOENT,
            PathError::Loop(_) => libc::ELOOP,
            PathError::Access(_) => libc::EACCES,
            PathError::NoExec(_) => libc::ENOEXEC,
            PathError::TooLong => libc::ENAMETOOLONG,
            PathError::Io(e) => e.raw_os_error().unwrap_or(libc::EIO),
        }
    }
}
