use std::path::Path;

use crate::parse::{read_phdr, ElfFile};
use crate::raw::*;
use crate::ElfError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElfClass {
    Elf32,
    Elf64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObjectKind {
    Executable,
    /// ET_DYN: shared libraries, position independent executables and loaders.
    Shared,
    Other(u16),
}

/// What the dynamic loader would see when mapping a file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ElfInfo {
    pub class: ElfClass,
    pub kind: ObjectKind,
    pub machine: u16,
    pub interpreter: Option<String>,
    pub rpath: Vec<String>,
    pub runpath: Vec<String>,
    pub needed: Vec<String>,
    pub soname: Option<String>,
    pub is_dynamic: bool,
}

impl ElfInfo {
    /// Shared objects that are not themselves runnable programs.
    pub fn is_library(&self) -> bool {
        self.kind == ObjectKind::Shared && self.interpreter.is_none() && self.is_dynamic
    }
}

fn split_search_path(s: &str) -> impl Iterator<Item = String> + '_ {
    s.split(':').filter(|p| !p.is_empty()).map(str::to_owned)
}

impl ElfFile<'_> {
    pub fn info(&self) -> Result<ElfInfo, ElfError> {
        let interpreter = self.interpreter()?;
        let dynamic = self.dynamic()?;
        let strings = self.dynstr_range(&dynamic)?;
        let mut info = ElfInfo {
            class: if self.layout.is64 {
                ElfClass::Elf64
            } else {
                ElfClass::Elf32
            },
            kind: match self.header.e_type {
                ET_EXEC => ObjectKind::Executable,
                ET_DYN => ObjectKind::Shared,
                t => ObjectKind::Other(t),
            },
            machine: self.header.machine,
            interpreter,
            rpath: Vec::new(),
            runpath: Vec::new(),
            needed: Vec::new(),
            soname: None,
            is_dynamic: false,
        };
        let mut flags_1 = 0;
        for entry in &dynamic {
            let string = |idx| match strings {
                Some(range) => self.dyn_string(range, idx),
                None => Err(ElfError::format("dynamic entry without a string table")),
            };
            match entry.tag {
                DT_NEEDED => info.needed.push(string(entry.val)?),
                DT_RPATH => info.rpath.extend(split_search_path(&string(entry.val)?)),
                DT_RUNPATH => info.runpath.extend(split_search_path(&string(entry.val)?)),
                DT_SONAME => info.soname = Some(string(entry.val)?),
                DT_FLAGS_1 => flags_1 = entry.val,
                _ => {}
            }
        }
        // A static-pie carries a dynamic section for self-relocation but never
        // asks for a loader.
        let static_pie = info.interpreter.is_none() && flags_1 & DF_1_PIE != 0 && info.needed.is_empty();
        info.is_dynamic = info.interpreter.is_some() || (!dynamic.is_empty() && !static_pie);
        Ok(info)
    }
}

/// Decodes interpreter, search paths and needed libraries of an ELF file.
pub fn read_elf(path: impl AsRef<Path>) -> Result<ElfInfo, ElfError> {
    let data = std::fs::read(path)?;
    ElfFile::parse(&data)?.info()
}

/// Result of looking for the program interpreter in the first bytes of a file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum HeadProbe {
    NotElf,
    /// No PT_INTERP: the kernel runs the file directly.
    Static,
    Interpreter(String),
    /// The headers extend past the supplied prefix; retry with this many bytes.
    NeedMore(usize),
}

/// Finds the PT_INTERP string using only a prefix of the file, which is how
/// exec interception inspects targets without reading whole binaries.
pub fn interpreter_from_head(head: &[u8]) -> Result<HeadProbe, ElfError> {
    if !crate::is_elf(head) {
        return Ok(HeadProbe::NotElf);
    }
    let layout = Layout::from_ident(head)?;
    if head.len() < layout.ehdr_size() {
        return Ok(HeadProbe::NeedMore(layout.ehdr_size()));
    }
    let (phoff, phnum) = if layout.is64 {
        (layout.u64(head, 32)? as usize, layout.u16(head, 56)? as usize)
    } else {
        (layout.u32(head, 28)? as usize, layout.u16(head, 44)? as usize)
    };
    let table_end = phoff + phnum * layout.phdr_size();
    if head.len() < table_end {
        return Ok(HeadProbe::NeedMore(table_end));
    }
    for i in 0..phnum {
        let p = read_phdr(layout, head, phoff + i * layout.phdr_size())?;
        if p.p_type == PT_INTERP {
            let end = (p.offset + p.filesz) as usize;
            if head.len() < end {
                return Ok(HeadProbe::NeedMore(end));
            }
            return Ok(HeadProbe::Interpreter(cstr(head, p.offset as usize, end)?));
        }
    }
    Ok(HeadProbe::Static)
}
