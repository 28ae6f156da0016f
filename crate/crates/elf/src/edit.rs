use std::collections::BTreeMap;

use crate::parse::{shdr_field_offsets, write_phdr, DynEntry, ElfFile, ProgramHeader};
use crate::raw::*;
use crate::ElfError;

/// Leading bytes of the segment this crate appends to hold relocated data.
/// A file that already carries one gets it rewritten instead of gaining a
/// second segment.
const SEGMENT_MARKER: &[u8; 16] = b"udocker-elfseg\0\0";

/// The edits applicable to one ELF file.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ElfEdit {
    /// New program interpreter path.
    pub interpreter: Option<String>,
    /// Replaces the value of every DT_RPATH/DT_RUNPATH entry, adding a
    /// DT_RUNPATH entry when the file has neither.
    pub search_path: Option<Vec<String>>,
    /// DT_NEEDED renames, old name to new name.
    pub needed: BTreeMap<String, String>,
}

impl ElfEdit {
    pub fn is_empty(&self) -> bool {
        self.interpreter.is_none() && self.search_path.is_none() && self.needed.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EditOutcome {
    /// The patched file, or `None` when the file already matched the edit.
    pub data: Option<Vec<u8>>,
    /// Rename sources that were not present in the DT_NEEDED list.
    pub unmatched_needed: Vec<String>,
}

/// Applies `edit` to the ELF image in `data`.
///
/// Values that fit are patched in place. Anything that has to grow is moved
/// into a new PT_LOAD segment appended at the end of the file, reusing a
/// PT_NULL or PT_NOTE program header slot; existing segments never move.
pub fn apply_edit(data: &[u8], edit: &ElfEdit) -> Result<EditOutcome, ElfError> {
    let elf = ElfFile::parse(data)?;
    let current_interp = elf.interpreter()?;
    let dynamic = elf.dynamic()?;
    let strings = elf.dynstr_range(&dynamic)?;

    let new_interp = match &edit.interpreter {
        Some(_) if current_interp.is_none() => {
            return Err(ElfError::Unsupported(
                "file has no program interpreter (statically linked)".into(),
            ))
        }
        Some(i) if Some(i) != current_interp.as_ref() => Some(i.clone()),
        _ => None,
    };

    let wants_dynamic = edit.search_path.is_some() || !edit.needed.is_empty();
    if wants_dynamic && (dynamic.is_empty() || strings.is_none()) {
        return Err(ElfError::Unsupported("file has no dynamic section".into()));
    }

    let mut updates: Vec<(usize, String)> = Vec::new();
    let mut additions: Vec<(u64, String)> = Vec::new();
    if let (Some(paths), Some(range)) = (&edit.search_path, strings) {
        let value = paths.join(":");
        let mut present = false;
        for (i, e) in dynamic.iter().enumerate() {
            if e.tag == DT_RPATH || e.tag == DT_RUNPATH {
                present = true;
                if elf.dyn_string(range, e.val)? != value {
                    updates.push((i, value.clone()));
                }
            }
        }
        if !present {
            additions.push((DT_RUNPATH, value));
        }
    }
    let mut unmatched_needed = Vec::new();
    let mut version_refs: Vec<(usize, String)> = Vec::new();
    if let Some(range) = strings {
        let verneed = verneed_file_fields(&elf, &dynamic)?;
        for (old, new) in &edit.needed {
            let mut matched = false;
            for (i, e) in dynamic.iter().enumerate() {
                if e.tag == DT_NEEDED && elf.dyn_string(range, e.val)? == *old {
                    matched = true;
                    if new != old {
                        updates.push((i, new.clone()));
                    }
                }
            }
            if !matched {
                unmatched_needed.push(old.clone());
            } else if new != old {
                // Symbol version requirements name the library too; the
                // loader matches them against the loaded object's name.
                for &(field, idx) in &verneed {
                    if elf.dyn_string(range, idx)? == *old {
                        version_refs.push((field, new.clone()));
                    }
                }
            }
        }
    }

    if new_interp.is_none() && updates.is_empty() && additions.is_empty() {
        return Ok(EditOutcome {
            data: None,
            unmatched_needed,
        });
    }

    let interp_fits = match (&new_interp, elf.find_phdr(PT_INTERP)) {
        (Some(s), Some((_, p))) => s.len() as u64 + 1 <= p.filesz,
        _ => true,
    };
    let mut out = data.to_vec();
    if interp_fits && updates.is_empty() && additions.is_empty() {
        let (_, p) = elf.find_phdr(PT_INTERP).expect("checked above");
        let s = new_interp.expect("an edit is pending");
        let start = p.offset as usize;
        out[start..start + p.filesz as usize].fill(0);
        out[start..start + s.len()].copy_from_slice(s.as_bytes());
        return Ok(EditOutcome {
            data: Some(out),
            unmatched_needed,
        });
    }

    let interp = new_interp.or(current_interp);
    relocate(&elf, &mut out, interp, &dynamic, strings, &updates, &additions, &version_refs)?;
    Ok(EditOutcome {
        data: Some(out),
        unmatched_needed,
    })
}

fn page_size(machine: u16) -> u64 {
    match machine {
        EM_AARCH64 | EM_PPC64 => 0x10000,
        _ => 0x1000,
    }
}

fn relocate(
    elf: &ElfFile<'_>,
    out: &mut Vec<u8>,
    interp: Option<String>,
    dynamic: &[DynEntry],
    strings: Option<(usize, usize)>,
    updates: &[(usize, String)],
    additions: &[(u64, String)],
    version_refs: &[(usize, String)],
) -> Result<(), ElfError> {
    let layout = elf.layout;
    let data = elf.data;
    let page = page_size(elf.header.machine);

    let owned = elf.phdrs.iter().enumerate().find(|(_, p)| {
        p.p_type == PT_LOAD
            && (p.offset + p.filesz) as usize == data.len()
            && data
                .get(p.offset as usize..)
                .is_some_and(|d| d.starts_with(SEGMENT_MARKER))
    });
    let (slot, seg_off, seg_vaddr) = match owned {
        Some((i, p)) => (i, p.offset, p.vaddr),
        None => {
            let slot = elf
                .phdrs
                .iter()
                .rposition(|p| p.p_type == PT_NULL)
                .or_else(|| elf.phdrs.iter().rposition(|p| p.p_type == PT_NOTE))
                .ok_or_else(|| {
                    ElfError::Unsupported("no spare program header slot to describe new data".into())
                })?;
            let max_end = elf
                .phdrs
                .iter()
                .filter(|p| p.p_type == PT_LOAD)
                .map(|p| p.vaddr + p.memsz)
                .max()
                .ok_or_else(|| ElfError::format("no loadable segments"))?;
            (slot, align_up(data.len() as u64, page), align_up(max_end, page))
        }
    };

    let mut content = SEGMENT_MARKER.to_vec();
    let interp_rel = interp.map(|s| {
        let rel = content.len();
        content.extend_from_slice(s.as_bytes());
        content.push(0);
        (rel, s.len() + 1)
    });

    let mut dyn_placement = None;
    let mut vn_file_updates: Vec<(usize, u32)> = Vec::new();
    if let (false, Some((start, end))) = (dynamic.is_empty(), strings) {
        let mut table = data[start..end].to_vec();
        let mut entries: Vec<DynEntry> = dynamic.iter().copied().filter(|e| e.tag != DT_NULL).collect();
        let mut interned: BTreeMap<String, u64> = BTreeMap::new();
        let mut intern = |s: &str| {
            *interned.entry(s.to_string()).or_insert_with(|| {
                let off = table.len() as u64;
                table.extend_from_slice(s.as_bytes());
                table.push(0);
                off
            })
        };
        for (i, s) in updates {
            entries[*i].val = intern(s);
        }
        for (tag, s) in additions {
            let val = intern(s);
            entries.push(DynEntry { tag: *tag, val });
        }
        for (field, s) in version_refs {
            vn_file_updates.push((*field, intern(s) as u32));
        }
        entries.push(DynEntry { tag: DT_NULL, val: 0 });

        let str_rel = content.len();
        content.extend_from_slice(&table);
        content.resize(align_up(content.len() as u64, 8) as usize, 0);
        let dyn_rel = content.len();
        let word = layout.word_size();
        for e in &entries {
            let val = match e.tag {
                DT_STRTAB => seg_vaddr + str_rel as u64,
                DT_STRSZ => table.len() as u64,
                _ => e.val,
            };
            let at = content.len();
            content.resize(at + 2 * word, 0);
            layout.put_word(&mut content, at, e.tag);
            layout.put_word(&mut content, at + word, val);
        }
        dyn_placement = Some((str_rel, table.len(), dyn_rel, entries.len() * layout.dyn_size()));
    }

    let mut phdrs: Vec<ProgramHeader> = elf.phdrs.clone();
    phdrs[slot] = ProgramHeader {
        p_type: PT_LOAD,
        flags: PF_R | PF_W,
        offset: seg_off,
        vaddr: seg_vaddr,
        paddr: seg_vaddr,
        filesz: content.len() as u64,
        memsz: content.len() as u64,
        align: page,
    };
    let place = |p: &mut ProgramHeader, rel: usize, size: usize| {
        p.offset = seg_off + rel as u64;
        p.vaddr = seg_vaddr + rel as u64;
        p.paddr = p.vaddr;
        p.filesz = size as u64;
        p.memsz = size as u64;
    };
    for p in phdrs.iter_mut() {
        match p.p_type {
            PT_INTERP => {
                if let Some((rel, size)) = interp_rel {
                    place(p, rel, size);
                }
            }
            PT_DYNAMIC => {
                if let Some((_, _, rel, size)) = dyn_placement {
                    place(p, rel, size);
                }
            }
            _ => {}
        }
    }
    // Loaders expect PT_LOAD entries sorted by address; the new segment is
    // the highest so it goes after every other PT_LOAD.
    if let Some(last_load) = phdrs
        .iter()
        .enumerate()
        .filter(|&(i, p)| i != slot && p.p_type == PT_LOAD)
        .map(|(i, _)| i)
        .max()
    {
        if slot < last_load {
            let entry = phdrs.remove(slot);
            phdrs.insert(last_load, entry);
        }
    }

    out.truncate(seg_off.min(out.len() as u64) as usize);
    out.resize(seg_off as usize, 0);
    out.extend_from_slice(&content);

    for (i, p) in phdrs.iter().enumerate() {
        write_phdr(layout, out, elf.phdr_offset(i), p);
    }
    for (field, val) in vn_file_updates {
        layout.put_u32(out, field, val);
    }

    let (addr_f, off_f, size_f) = shdr_field_offsets(layout);
    let mut set_section = |name: &str, rel: usize, size: usize| {
        if let Some(idx) = elf.section_index(name) {
            let base = elf.header.shoff as usize + idx * layout.shdr_size();
            layout.put_word(out, base + addr_f, seg_vaddr + rel as u64);
            layout.put_word(out, base + off_f, seg_off + rel as u64);
            layout.put_word(out, base + size_f, size as u64);
        }
    };
    if let Some((rel, size)) = interp_rel {
        set_section(".interp", rel, size);
    }
    if let Some((str_rel, str_size, dyn_rel, dyn_size)) = dyn_placement {
        set_section(".dynstr", str_rel, str_size);
        set_section(".dynamic", dyn_rel, dyn_size);
    }
    Ok(())
}

/// File offsets of the `vn_file` fields of the version requirement table,
/// paired with the string index each one holds.
fn verneed_file_fields(elf: &ElfFile<'_>, dynamic: &[DynEntry]) -> Result<Vec<(usize, u64)>, ElfError> {
    let addr = dynamic.iter().find(|e| e.tag == DT_VERNEED).map(|e| e.val);
    let count = dynamic.iter().find(|e| e.tag == DT_VERNEEDNUM).map(|e| e.val);
    let (Some(addr), Some(count)) = (addr, count) else {
        return Ok(Vec::new());
    };
    let mut off = elf
        .vaddr_to_offset(addr)
        .ok_or_else(|| ElfError::format("DT_VERNEED outside loadable segments"))? as usize;
    let mut out = Vec::new();
    for _ in 0..count {
        // Elf*_Verneed: vn_version u16, vn_cnt u16, vn_file u32, vn_aux u32, vn_next u32
        let file = elf.layout.u32(elf.data, off + 4)?;
        out.push((off + 4, u64::from(file)));
        let next = elf.layout.u32(elf.data, off + 12)? as usize;
        if next == 0 {
            break;
        }
        off += next;
    }
    Ok(out)
}
