// Field-level access to ELF structures for both classes and byte orders.

use crate::ElfError;

pub const EI_CLASS: usize = 4;
pub const EI_DATA: usize = 5;
pub const ELFCLASS32: u8 = 1;
pub const ELFCLASS64: u8 = 2;
pub const ELFDATA2LSB: u8 = 1;
pub const ELFDATA2MSB: u8 = 2;

pub const ET_EXEC: u16 = 2;
pub const ET_DYN: u16 = 3;

pub const PT_NULL: u32 = 0;
pub const PT_LOAD: u32 = 1;
pub const PT_DYNAMIC: u32 = 2;
pub const PT_INTERP: u32 = 3;
pub const PT_NOTE: u32 = 4;

pub const PF_W: u32 = 2;
pub const PF_R: u32 = 4;

pub const DT_NULL: u64 = 0;
pub const DT_NEEDED: u64 = 1;
pub const DT_STRTAB: u64 = 5;
pub const DT_STRSZ: u64 = 10;
pub const DT_SONAME: u64 = 14;
pub const DT_RPATH: u64 = 15;
pub const DT_RUNPATH: u64 = 29;
pub const DT_FLAGS_1: u64 = 0x6fff_fffb;
pub const DT_VERNEED: u64 = 0x6fff_fffe;
pub const DT_VERNEEDNUM: u64 = 0x6fff_ffff;
pub const DF_1_PIE: u64 = 0x0800_0000;

pub const EM_AARCH64: u16 = 183;
pub const EM_PPC64: u16 = 21;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub is64: bool,
    pub big_endian: bool,
}

impl Layout {
    pub fn from_ident(data: &[u8]) -> Result<Self, ElfError> {
        if !crate::is_elf(data) {
            return Err(ElfError::NotElf);
        }
        if data.len() < 16 {
            return Err(ElfError::format("truncated identification"));
        }
        let is64 = match data[EI_CLASS] {
            ELFCLASS32 => false,
            ELFCLASS64 => true,
            c => return Err(ElfError::format(format!("unknown class {c}"))),
        };
        let big_endian = match data[EI_DATA] {
            ELFDATA2LSB => false,
            ELFDATA2MSB => true,
            d => return Err(ElfError::format(format!("unknown data encoding {d}"))),
        };
        Ok(Layout { is64, big_endian })
    }

    pub fn word_size(self) -> usize {
        if self.is64 {
            8
        } else {
            4
        }
    }

    pub fn ehdr_size(self) -> usize {
        if self.is64 {
            64
        } else {
            52
        }
    }

    pub fn phdr_size(self) -> usize {
        if self.is64 {
            56
        } else {
            32
        }
    }

    pub fn shdr_size(self) -> usize {
        if self.is64 {
            64
        } else {
            40
        }
    }

    pub fn dyn_size(self) -> usize {
        2 * self.word_size()
    }

    pub fn u16(self, data: &[u8], off: usize) -> Result<u16, ElfError> {
        let b: [u8; 2] = slice(data, off, 2)?.try_into().unwrap();
        Ok(if self.big_endian {
            u16::from_be_bytes(b)
        } else {
            u16::from_le_bytes(b)
        })
    }

    pub fn u32(self, data: &[u8], off: usize) -> Result<u32, ElfError> {
        let b: [u8; 4] = slice(data, off, 4)?.try_into().unwrap();
        Ok(if self.big_endian {
            u32::from_be_bytes(b)
        } else {
            u32::from_le_bytes(b)
        })
    }

    pub fn u64(self, data: &[u8], off: usize) -> Result<u64, ElfError> {
        let b: [u8; 8] = slice(data, off, 8)?.try_into().unwrap();
        Ok(if self.big_endian {
            u64::from_be_bytes(b)
        } else {
            u64::from_le_bytes(b)
        })
    }

    /// Reads an address-sized field.
    pub fn word(self, data: &[u8], off: usize) -> Result<u64, ElfError> {
        if self.is64 {
            self.u64(data, off)
        } else {
            self.u32(data, off).map(u64::from)
        }
    }

    pub fn put_u32(self, data: &mut [u8], off: usize, v: u32) {
        let b = if self.big_endian {
            v.to_be_bytes()
        } else {
            v.to_le_bytes()
        };
        data[off..off + 4].copy_from_slice(&b);
    }

    pub fn put_u64(self, data: &mut [u8], off: usize, v: u64) {
        let b = if self.big_endian {
            v.to_be_bytes()
        } else {
            v.to_le_bytes()
        };
        data[off..off + 8].copy_from_slice(&b);
    }

    pub fn put_word(self, data: &mut [u8], off: usize, v: u64) {
        if self.is64 {
            self.put_u64(data, off, v)
        } else {
            self.put_u32(data, off, v as u32)
        }
    }
}

pub fn slice(data: &[u8], off: usize, len: usize) -> Result<&[u8], ElfError> {
    off.checked_add(len)
        .and_then(|end| data.get(off..end))
        .ok_or_else(|| ElfError::format(format!("read of {len} bytes at {off:#x} past end of file")))
}

/// Reads a NUL-terminated string starting at `off`, bounded by `limit`.
pub fn cstr(data: &[u8], off: usize, limit: usize) -> Result<String, ElfError> {
    let end = limit.min(data.len());
    let bytes = data
        .get(off..end)
        .ok_or_else(|| ElfError::format(format!("string offset {off:#x} out of range")))?;
    let nul = bytes
        .iter()
        .position(|&b| b == 0)
        .ok_or_else(|| ElfError::format(format!("unterminated string at {off:#x}")))?;
    String::from_utf8(bytes[..nul].to_vec())
        .map_err(|_| ElfError::format(format!("non UTF-8 string at {off:#x}")))
}

pub fn align_up(v: u64, align: u64) -> u64 {
    if align <= 1 {
        v
    } else {
        v.div_ceil(align) * align
    }
}
