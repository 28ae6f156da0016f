use crate::raw::*;
use crate::ElfError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Header {
    pub e_type: u16,
    pub machine: u16,
    pub phoff: u64,
    pub shoff: u64,
    pub phentsize: u16,
    pub phnum: u16,
    pub shentsize: u16,
    pub shnum: u16,
    pub shstrndx: u16,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProgramHeader {
    pub p_type: u32,
    pub flags: u32,
    pub offset: u64,
    pub vaddr: u64,
    pub paddr: u64,
    pub filesz: u64,
    pub memsz: u64,
    pub align: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SectionHeader {
    pub name: String,
    pub sh_type: u32,
    pub addr: u64,
    pub offset: u64,
    pub size: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DynEntry {
    pub tag: u64,
    pub val: u64,
}

/// A parsed view over the bytes of an ELF file.
#[derive(Debug, Clone)]
pub struct ElfFile<'a> {
    pub(crate) data: &'a [u8],
    pub(crate) layout: Layout,
    pub(crate) header: Header,
    pub(crate) phdrs: Vec<ProgramHeader>,
    pub(crate) sections: Vec<SectionHeader>,
}

impl<'a> ElfFile<'a> {
    pub fn parse(data: &'a [u8]) -> Result<Self, ElfError> {
        let layout = Layout::from_ident(data)?;
        if data.len() < layout.ehdr_size() {
            return Err(ElfError::format("truncated ELF header"));
        }
        let header = read_header(layout, data)?;
        if header.phnum > 0 && usize::from(header.phentsize) != layout.phdr_size() {
            return Err(ElfError::format(format!(
                "unexpected program header size {}",
                header.phentsize
            )));
        }
        let mut phdrs = Vec::with_capacity(header.phnum.into());
        for i in 0..usize::from(header.phnum) {
            let off = header.phoff as usize + i * layout.phdr_size();
            phdrs.push(read_phdr(layout, data, off)?);
        }
        // Section headers are optional for execution; a stripped or damaged
        // section table must not prevent reading the program view.
        let sections = read_sections(layout, data, &header).unwrap_or_default();
        Ok(ElfFile {
            data,
            layout,
            header,
            phdrs,
            sections,
        })
    }

    pub fn data(&self) -> &'a [u8] {
        self.data
    }

    pub(crate) fn phdr_offset(&self, index: usize) -> usize {
        self.header.phoff as usize + index * self.layout.phdr_size()
    }

    pub(crate) fn find_phdr(&self, p_type: u32) -> Option<(usize, &ProgramHeader)> {
        self.phdrs.iter().enumerate().find(|(_, p)| p.p_type == p_type)
    }

    /// Maps a virtual address to a file offset through the PT_LOAD segments.
    pub(crate) fn vaddr_to_offset(&self, vaddr: u64) -> Option<u64> {
        self.phdrs
            .iter()
            .filter(|p| p.p_type == PT_LOAD)
            .find(|p| vaddr >= p.vaddr && vaddr < p.vaddr + p.filesz)
            .map(|p| vaddr - p.vaddr + p.offset)
    }

    pub(crate) fn interpreter(&self) -> Result<Option<String>, ElfError> {
        match self.find_phdr(PT_INTERP) {
            None => Ok(None),
            Some((_, p)) => {
                let start = p.offset as usize;
                let end = start.saturating_add(p.filesz as usize);
                cstr(self.data, start, end).map(Some)
            }
        }
    }

    /// Entries of the dynamic section up to and including DT_NULL.
    pub fn dynamic(&self) -> Result<Vec<DynEntry>, ElfError> {
        let Some((_, p)) = self.find_phdr(PT_DYNAMIC) else {
            return Ok(Vec::new());
        };
        let size = self.layout.dyn_size();
        let count = p.filesz as usize / size;
        let mut out = Vec::with_capacity(count);
        for i in 0..count {
            let off = p.offset as usize + i * size;
            let tag = self.layout.word(self.data, off)?;
            let val = self.layout.word(self.data, off + self.layout.word_size())?;
            out.push(DynEntry { tag, val });
            if tag == DT_NULL {
                break;
            }
        }
        Ok(out)
    }

    /// File range of the dynamic string table.
    pub(crate) fn dynstr_range(&self, dynamic: &[DynEntry]) -> Result<Option<(usize, usize)>, ElfError> {
        let strtab = dynamic.iter().find(|d| d.tag == DT_STRTAB);
        let strsz = dynamic.iter().find(|d| d.tag == DT_STRSZ);
        match (strtab, strsz) {
            (Some(tab), Some(sz)) => {
                let off = self
                    .vaddr_to_offset(tab.val)
                    .ok_or_else(|| ElfError::format("DT_STRTAB outside loadable segments"))?;
                let start = off as usize;
                let end = start
                    .checked_add(sz.val as usize)
                    .filter(|&e| e <= self.data.len())
                    .ok_or_else(|| ElfError::format("dynamic string table past end of file"))?;
                Ok(Some((start, end)))
            }
            (None, None) => Ok(None),
            _ => Err(ElfError::format("incomplete dynamic string table description")),
        }
    }

    pub(crate) fn dyn_string(&self, range: (usize, usize), index: u64) -> Result<String, ElfError> {
        let off = range.0 + index as usize;
        if off >= range.1 {
            return Err(ElfError::format(format!("dynamic string index {index} out of range")));
        }
        cstr(self.data, off, range.1)
    }

    pub(crate) fn section_index(&self, name: &str) -> Option<usize> {
        self.sections.iter().position(|s| s.name == name)
    }
}

fn read_header(l: Layout, d: &[u8]) -> Result<Header, ElfError> {
    if l.is64 {
        Ok(Header {
            e_type: l.u16(d, 16)?,
            machine: l.u16(d, 18)?,
            phoff: l.u64(d, 32)?,
            shoff: l.u64(d, 40)?,
            phentsize: l.u16(d, 54)?,
            phnum: l.u16(d, 56)?,
            shentsize: l.u16(d, 58)?,
            shnum: l.u16(d, 60)?,
            shstrndx: l.u16(d, 62)?,
        })
    } else {
        Ok(Header {
            e_type: l.u16(d, 16)?,
            machine: l.u16(d, 18)?,
            phoff: l.u32(d, 28)?.into(),
            shoff: l.u32(d, 32)?.into(),
            phentsize: l.u16(d, 42)?,
            phnum: l.u16(d, 44)?,
            shentsize: l.u16(d, 46)?,
            shnum: l.u16(d, 48)?,
            shstrndx: l.u16(d, 50)?,
        })
    }
}

pub(crate) fn read_phdr(l: Layout, d: &[u8], off: usize) -> Result<ProgramHeader, ElfError> {
    if l.is64 {
        Ok(ProgramHeader {
            p_type: l.u32(d, off)?,
            flags: l.u32(d, off + 4)?,
            offset: l.u64(d, off + 8)?,
            vaddr: l.u64(d, off + 16)?,
            paddr: l.u64(d, off + 24)?,
            filesz: l.u64(d, off + 32)?,
            memsz: l.u64(d, off + 40)?,
            align: l.u64(d, off + 48)?,
        })
    } else {
        Ok(ProgramHeader {
            p_type: l.u32(d, off)?,
            offset: l.u32(d, off + 4)?.into(),
            vaddr: l.u32(d, off + 8)?.into(),
            paddr: l.u32(d, off + 12)?.into(),
            filesz: l.u32(d, off + 16)?.into(),
            memsz: l.u32(d, off + 20)?.into(),
            flags: l.u32(d, off + 24)?,
            align: l.u32(d, off + 28)?.into(),
        })
    }
}

pub(crate) fn write_phdr(l: Layout, d: &mut [u8], off: usize, p: &ProgramHeader) {
    if l.is64 {
        l.put_u32(d, off, p.p_type);
        l.put_u32(d, off + 4, p.flags);
        l.put_u64(d, off + 8, p.offset);
        l.put_u64(d, off + 16, p.vaddr);
        l.put_u64(d, off + 24, p.paddr);
        l.put_u64(d, off + 32, p.filesz);
        l.put_u64(d, off + 40, p.memsz);
        l.put_u64(d, off + 48, p.align);
    } else {
        l.put_u32(d, off, p.p_type);
        l.put_u32(d, off + 4, p.offset as u32);
        l.put_u32(d, off + 8, p.vaddr as u32);
        l.put_u32(d, off + 12, p.paddr as u32);
        l.put_u32(d, off + 16, p.filesz as u32);
        l.put_u32(d, off + 20, p.memsz as u32);
        l.put_u32(d, off + 24, p.flags);
        l.put_u32(d, off + 28, p.align as u32);
    }
}

/// Offsets of the addr, offset and size fields within a section header.
pub(crate) fn shdr_field_offsets(l: Layout) -> (usize, usize, usize) {
    if l.is64 {
        (16, 24, 32)
    } else {
        (12, 16, 20)
    }
}

fn read_sections(l: Layout, d: &[u8], h: &Header) -> Result<Vec<SectionHeader>, ElfError> {
    if h.shnum == 0 || h.shoff == 0 {
        return Ok(Vec::new());
    }
    if usize::from(h.shentsize) != l.shdr_size() {
        return Err(ElfError::format("unexpected section header size"));
    }
    let (addr_f, off_f, size_f) = shdr_field_offsets(l);
    let mut raw = Vec::with_capacity(h.shnum.into());
    for i in 0..usize::from(h.shnum) {
        let base = h.shoff as usize + i * l.shdr_size();
        let name = l.u32(d, base)?;
        let sh_type = l.u32(d, base + 4)?;
        let addr = l.word(d, base + addr_f)?;
        let offset = l.word(d, base + off_f)?;
        let size = l.word(d, base + size_f)?;
        raw.push((name, sh_type, addr, offset, size));
    }
    let names = raw
        .get(usize::from(h.shstrndx))
        .map(|&(_, _, _, off, size)| (off as usize, off as usize + size as usize));
    Ok(raw
        .into_iter()
        .map(|(name, sh_type, addr, offset, size)| SectionHeader {
            name: names
                .and_then(|(s, e)| cstr(d, s + name as usize, e).ok())
                .unwrap_or_default(),
            sh_type,
            addr,
            offset,
            size,
        })
        .collect())
}
