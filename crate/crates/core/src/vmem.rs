// Copyright 2026 The hmvcc Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

//! Deterministic user-space model of a process's virtual-memory subsystem.
//!
//! An [`AddressSpace`] holds an ordered set of [`Vma`]s (reserved regions with
//! visibility, protection and backing), a page table of [`Pte`]s that is only
//! populated on first access, a [`PageStore`] of reference-counted physical
//! pages and a set of main-memory files whose page slots can be mapped into
//! the address space (rewiring).
//!
//! On top of the usual `mmap`/`mprotect`-style operations the space offers
//! [`AddressSpace::vm_snapshot`], which duplicates a virtual range by copying
//! its VMAs and, for private mappings, its PTEs. Both sides then share the
//! physical pages copy-on-write.
//!
//! No real memory is mapped. Addresses are plain 64-bit integers and every
//! operation bumps an [`OpCounters`] field, which the benchmarks use as the
//! cost model instead of wall-clock time.
//!
//! The space is not internally synchronized. Callers serialize mutations;
//! `&self` accessors such as [`AddressSpace::page_words`] never fault and can
//! run concurrently.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};
use std::ops::Range;
use std::sync::Arc;

/// A virtual address inside an [`AddressSpace`].
pub type VirtAddr = u64;

/// Default page size (4 KiB small pages).
pub const DEFAULT_PAGE_SIZE: usize = 4096;

/// Lowest address handed out by fresh reservations.
const BASE_ADDR: VirtAddr = 0x1000_0000;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum VmError {
    #[error("value {0:#x} is not page aligned")]
    Alignment(u64),
    #[error("zero-length request")]
    ZeroLength,
    #[error("fault at {0:#x}: address not mapped")]
    Unmapped(VirtAddr),
    #[error("MAP_FAILED: source range at {0:#x} is not fully mapped")]
    MapFailed(VirtAddr),
    #[error("destination range at {0:#x} is not fully mapped")]
    DestinationNotMapped(VirtAddr),
    #[error("source and destination ranges overlap")]
    Overlap,
    #[error("protection fault: write to read-only page at {0:#x}")]
    Protection(VirtAddr),
    #[error("range outside file {file} (offset {offset:#x}, length {length:#x})")]
    FileRange { file: u32, offset: u64, length: u64 },
    #[error("unknown file {0}")]
    UnknownFile(u32),
}

pub type VmResult<T> = Result<T, VmError>;

/// Identifier of a physical page in a [`PageStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PageId(u32);

impl PageId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// Identifier of a main-memory file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FileId(u32);

impl FileId {
    pub fn raw(self) -> u32 {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Visibility {
    Private,
    Shared,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Protection {
    ReadOnly,
    ReadWrite,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Backing {
    Anonymous,
    File { file: FileId, offset: u64 },
}

/// A reserved, contiguous virtual region with uniform properties.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Vma {
    pub start: VirtAddr,
    pub length: u64,
    pub visibility: Visibility,
    pub protection: Protection,
    pub backing: Backing,
}

impl Vma {
    pub fn end(&self) -> VirtAddr {
        self.start + self.length
    }

    pub fn contains(&self, addr: VirtAddr) -> bool {
        addr >= self.start && addr < self.end()
    }

    /// Backing of the byte at `addr`, with the file offset rebased.
    pub fn backing_at(&self, addr: VirtAddr) -> Backing {
        match self.backing {
            Backing::Anonymous => Backing::Anonymous,
            Backing::File { file, offset } => Backing::File {
                file,
                offset: offset + (addr - self.start),
            },
        }
    }

    fn split(self, at: VirtAddr) -> (Vma, Vma) {
        debug_assert!(at > self.start && at < self.end());
        let left = Vma {
            length: at - self.start,
            ..self
        };
        let right = Vma {
            start: at,
            length: self.end() - at,
            backing: self.backing_at(at),
            ..self
        };
        (left, right)
    }

    fn rebased(self, start: VirtAddr) -> Vma {
        Vma { start, ..self }
    }
}

/// Mapping of one virtual page to one physical page.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pte {
    pub vpage: VirtAddr,
    pub ppage: PageId,
    /// Hardware write bit. VMA protection is checked separately.
    pub writable: bool,
    /// Set while a private mapping shares its physical page.
    pub cow_pending: bool,
}

/// Monotone operation counts, the cost model of the emulator.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OpCounters {
    pub snapshot_calls: u64,
    /// One per emulated map or protect invocation.
    pub remap_calls: u64,
    pub vmas_copied: u64,
    pub ptes_copied: u64,
    pub pages_physically_copied: u64,
    pub cow_faults: u64,
    /// Protection faults delivered to a registered fault hook.
    pub hook_faults: u64,
}

impl OpCounters {
    /// Field-wise difference `self - earlier`.
    pub fn delta(&self, earlier: &OpCounters) -> OpCounters {
        OpCounters {
            snapshot_calls: self.snapshot_calls - earlier.snapshot_calls,
            remap_calls: self.remap_calls - earlier.remap_calls,
            vmas_copied: self.vmas_copied - earlier.vmas_copied,
            ptes_copied: self.ptes_copied - earlier.ptes_copied,
            pages_physically_copied: self.pages_physically_copied - earlier.pages_physically_copied,
            cow_faults: self.cow_faults - earlier.cow_faults,
            hook_faults: self.hook_faults - earlier.hook_faults,
        }
    }
}

/// Pool of physical pages with per-page reference counts.
///
/// A page is referenced by every PTE that maps it and by every file slot it
/// backs. Pages whose count drops to zero go back on the free list.
#[derive(Debug)]
pub struct PageStore {
    page_size: usize,
    frames: Vec<Box<[u64]>>,
    refcount: Vec<u32>,
    free: Vec<PageId>,
}

impl PageStore {
    fn new(page_size: usize) -> Self {
        PageStore {
            page_size,
            frames: Vec::new(),
            refcount: Vec::new(),
            free: Vec::new(),
        }
    }

    pub fn page_size(&self) -> usize {
        self.page_size
    }

    fn alloc_zeroed(&mut self) -> PageId {
        if let Some(id) = self.free.pop() {
            self.frames[id.index()].fill(0);
            self.refcount[id.index()] = 1;
            return id;
        }
        let id = PageId(self.frames.len() as u32);
        self.frames
            .push(vec![0u64; self.page_size / 8].into_boxed_slice());
        self.refcount.push(1);
        id
    }

    fn alloc_copy(&mut self, src: PageId) -> PageId {
        let id = self.alloc_zeroed();
        let (a, b) = (src.index(), id.index());
        if a < b {
            let (lo, hi) = self.frames.split_at_mut(b);
            hi[0].copy_from_slice(&lo[a]);
        } else {
            let (lo, hi) = self.frames.split_at_mut(a);
            lo[b].copy_from_slice(&hi[0]);
        }
        id
    }

    fn copy_contents(&mut self, src: PageId, dst: PageId) {
        if src == dst {
            return;
        }
        let words = self.frames[src.index()].clone();
        self.frames[dst.index()].copy_from_slice(&words);
    }

    fn retain(&mut self, id: PageId) {
        self.refcount[id.index()] += 1;
    }

    fn release(&mut self, id: PageId) {
        let rc = &mut self.refcount[id.index()];
        debug_assert!(*rc > 0, "releasing free page {id:?}");
        *rc -= 1;
        if *rc == 0 {
            self.free.push(id);
        }
    }

    pub fn refcount(&self, id: PageId) -> u32 {
        self.refcount[id.index()]
    }

    pub fn words(&self, id: PageId) -> &[u64] {
        &self.frames[id.index()]
    }

    fn words_mut(&mut self, id: PageId) -> &mut [u64] {
        &mut self.frames[id.index()]
    }

    /// Pages with a non-zero reference count.
    pub fn live_pages(&self) -> usize {
        self.frames.len() - self.free.len()
    }

    pub fn free_pages(&self) -> usize {
        self.free.len()
    }
}

/// A main-memory file: a sequence of page slots, each backed by a physical
/// page for the lifetime of the file.
#[derive(Debug)]
struct File {
    slots: Vec<PageId>,
    /// Number of VMAs covering each slot.
    mapped: Vec<u32>,
    /// Unmapped, unclaimed slots, the pool used for manual copy-on-write.
    free: BTreeSet<u32>,
}

/// Handler invoked on a write to a read-only page inside its range.
///
/// The hook receives the faulting page address and may remap or unprotect
/// it; the write is retried exactly once afterwards.
pub type FaultHook = Arc<dyn Fn(&mut AddressSpace, VirtAddr) -> VmResult<()> + Send + Sync>;

/// An emulated address space.
pub struct AddressSpace {
    page_size: u64,
    vmas: BTreeMap<VirtAddr, Vma>,
    ptes: BTreeMap<VirtAddr, Pte>,
    pages: PageStore,
    files: Vec<File>,
    hooks: Vec<(Range<VirtAddr>, FaultHook)>,
    counters: OpCounters,
    zero_page: Box<[u64]>,
}

impl fmt::Debug for AddressSpace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("AddressSpace")
            .field("page_size", &self.page_size)
            .field("vmas", &self.vmas.len())
            .field("ptes", &self.ptes.len())
            .field("live_pages", &self.pages.live_pages())
            .field("files", &self.files.len())
            .field("counters", &self.counters)
            .finish()
    }
}

impl Default for AddressSpace {
    fn default() -> Self {
        AddressSpace::new(DEFAULT_PAGE_SIZE)
    }
}

impl AddressSpace {
    /// Creates an empty space. `page_size` must be a power of two, at least 64.
    pub fn new(page_size: usize) -> Self {
        assert!(
            page_size.is_power_of_two() && page_size >= 64,
            "page size must be a power of two >= 64"
        );
        AddressSpace {
            page_size: page_size as u64,
            vmas: BTreeMap::new(),
            ptes: BTreeMap::new(),
            pages: PageStore::new(page_size),
            files: Vec::new(),
            hooks: Vec::new(),
            counters: OpCounters::default(),
            zero_page: vec![0u64; page_size / 8].into_boxed_slice(),
        }
    }

    pub fn page_size(&self) -> u64 {
        self.page_size
    }

    pub fn counters(&self) -> OpCounters {
        self.counters
    }

    pub fn page_store(&self) -> &PageStore {
        &self.pages
    }

    pub fn vmas(&self) -> impl Iterator<Item = &Vma> {
        self.vmas.values()
    }

    pub fn vma_count(&self) -> usize {
        self.vmas.len()
    }

    pub fn pte_count(&self) -> usize {
        self.ptes.len()
    }

    pub fn pte(&self, vpage: VirtAddr) -> Option<&Pte> {
        self.ptes.get(&vpage)
    }

    /// The VMA containing `addr`, if any.
    pub fn vma_at(&self, addr: VirtAddr) -> Option<&Vma> {
        self.vmas
            .range(..=addr)
            .next_back()
            .map(|(_, v)| v)
            .filter(|v| v.contains(addr))
    }

    /// VMAs intersecting `[addr, addr + len)`, in ascending order.
    pub fn vmas_in(&self, addr: VirtAddr, len: u64) -> Vec<Vma> {
        let end = addr + len;
        let first = self.vma_at(addr).map(|v| v.start).unwrap_or(addr);
        self.vmas
            .range(first..end)
            .map(|(_, v)| *v)
            .filter(|v| v.end() > addr)
            .collect()
    }

    /// Number of PTEs with a virtual page in `[addr, addr + len)`.
    pub fn ptes_in(&self, addr: VirtAddr, len: u64) -> usize {
        self.ptes.range(addr..addr + len).count()
    }

    fn page_floor(&self, addr: VirtAddr) -> VirtAddr {
        addr & !(self.page_size - 1)
    }

    fn check_aligned(&self, value: u64) -> VmResult<()> {
        if value & (self.page_size - 1) != 0 {
            Err(VmError::Alignment(value))
        } else {
            Ok(())
        }
    }

    /// First address in `[addr, addr + len)` not covered by a VMA.
    fn first_hole(&self, addr: VirtAddr, len: u64) -> Option<VirtAddr> {
        let end = addr + len;
        let mut cur = addr;
        while cur < end {
            match self.vma_at(cur) {
                Some(v) => cur = v.end(),
                None => return Some(cur),
            }
        }
        None
    }

    /// Whether `[addr, addr + len)` is entirely covered by VMAs.
    pub fn is_mapped(&self, addr: VirtAddr, len: u64) -> bool {
        self.first_hole(addr, len).is_none()
    }

    /// Lowest page-aligned gap of `len` bytes at or above the base address.
    pub fn find_free(&self, len: u64) -> VirtAddr {
        let mut cur = BASE_ADDR;
        for vma in self.vmas.values() {
            if vma.end() <= cur {
                continue;
            }
            if vma.start >= cur + len {
                break;
            }
            cur = vma.end();
        }
        cur
    }

    /// Splits the VMA strictly containing `addr` into two at `addr`.
    fn split_at(&mut self, addr: VirtAddr) {
        let Some(vma) = self.vma_at(addr).copied() else {
            return;
        };
        if vma.start == addr {
            return;
        }
        let (left, right) = vma.split(addr);
        self.vmas.insert(left.start, left);
        self.vmas.insert(right.start, right);
    }

    fn file_slots(&self, vma: &Vma) -> Option<(usize, Range<usize>)> {
        match vma.backing {
            Backing::Anonymous => None,
            Backing::File { file, offset } => {
                let first = (offset / self.page_size) as usize;
                let n = (vma.length / self.page_size) as usize;
                Some((file.0 as usize, first..first + n))
            }
        }
    }

    fn insert_vma(&mut self, vma: Vma) {
        if let Some((f, slots)) = self.file_slots(&vma) {
            let file = &mut self.files[f];
            for s in slots {
                if file.mapped[s] == 0 {
                    file.free.remove(&(s as u32));
                }
                file.mapped[s] += 1;
            }
        }
        self.vmas.insert(vma.start, vma);
    }

    fn remove_vma(&mut self, start: VirtAddr) {
        if let Some(vma) = self.vmas.remove(&start) {
            if let Some((f, slots)) = self.file_slots(&vma) {
                let file = &mut self.files[f];
                for s in slots {
                    file.mapped[s] -= 1;
                    if file.mapped[s] == 0 {
                        file.free.insert(s as u32);
                    }
                }
            }
        }
    }

    /// Drops all VMAs and PTEs inside `[addr, addr + len)`, splitting VMAs
    /// that straddle the borders.
    fn remove_range(&mut self, addr: VirtAddr, len: u64) {
        let end = addr + len;
        self.split_at(addr);
        self.split_at(end);
        let starts: Vec<VirtAddr> = self.vmas.range(addr..end).map(|(s, _)| *s).collect();
        for s in starts {
            self.remove_vma(s);
        }
        let vpages: Vec<VirtAddr> = self.ptes.range(addr..end).map(|(v, _)| *v).collect();
        for v in vpages {
            if let Some(pte) = self.ptes.remove(&v) {
                self.pages.release(pte.ppage);
            }
        }
    }

    fn file(&self, file: FileId) -> VmResult<&File> {
        self.files
            .get(file.0 as usize)
            .ok_or(VmError::UnknownFile(file.0))
    }

    fn file_page(&self, file: FileId, offset: u64) -> PageId {
        self.files[file.0 as usize].slots[(offset / self.page_size) as usize]
    }

    /// Reserves a fresh region of `length` bytes.
    ///
    /// Shared anonymous memory is modeled as a mapping of an internal file,
    /// so every shared mapping has a file slot to write through to.
    pub fn vm_alloc(
        &mut self,
        length: u64,
        visibility: Visibility,
        backing: Backing,
    ) -> VmResult<VirtAddr> {
        if length == 0 {
            return Err(VmError::ZeroLength);
        }
        self.check_aligned(length)?;
        let backing = match (visibility, backing) {
            (Visibility::Shared, Backing::Anonymous) => Backing::File {
                file: self.file_create(length)?,
                offset: 0,
            },
            (_, Backing::File { file, offset }) => {
                self.check_file_range(file, offset, length)?;
                backing
            }
            (Visibility::Private, Backing::Anonymous) => Backing::Anonymous,
        };
        let start = self.find_free(length);
        self.insert_vma(Vma {
            start,
            length,
            visibility,
            protection: Protection::ReadWrite,
            backing,
        });
        Ok(start)
    }

    /// Removes all mappings in `[addr, addr + length)` together with the
    /// fault hooks whose range lies entirely inside it.
    pub fn vm_unmap(&mut self, addr: VirtAddr, length: u64) -> VmResult<()> {
        self.check_aligned(addr)?;
        self.check_aligned(length)?;
        let end = addr + length;
        self.remove_range(addr, length);
        self.hooks
            .retain(|(r, _)| !(r.start >= addr && r.end <= end));
        Ok(())
    }

    /// Creates the PTE for an untouched page of `vma`.
    fn fault_in(&mut self, vpage: VirtAddr, vma: &Vma) -> Pte {
        let pte = match (vma.visibility, vma.backing_at(vpage)) {
            (_, Backing::Anonymous) => Pte {
                vpage,
                ppage: self.pages.alloc_zeroed(),
                writable: true,
                cow_pending: false,
            },
            (visibility, Backing::File { file, offset }) => {
                let ppage = self.file_page(file, offset);
                self.pages.retain(ppage);
                let private = visibility == Visibility::Private;
                Pte {
                    vpage,
                    ppage,
                    writable: !private,
                    cow_pending: private,
                }
            }
        };
        self.ptes.insert(vpage, pte);
        pte
    }

    /// Non-faulting view of the page containing `addr`.
    ///
    /// Untouched anonymous pages read as a shared zero page and untouched file
    /// pages read through to the file slot; no PTE is created.
    pub fn page_words(&self, addr: VirtAddr) -> VmResult<&[u64]> {
        let vpage = self.page_floor(addr);
        if let Some(pte) = self.ptes.get(&vpage) {
            return Ok(self.pages.words(pte.ppage));
        }
        let vma = self.vma_at(vpage).ok_or(VmError::Unmapped(addr))?;
        Ok(match vma.backing_at(vpage) {
            Backing::Anonymous => &self.zero_page,
            Backing::File { file, offset } => self.pages.words(self.file_page(file, offset)),
        })
    }

    /// Copies `buf.len()` bytes starting at `addr` without faulting pages in.
    pub fn peek(&self, addr: VirtAddr, buf: &mut [u8]) -> VmResult<()> {
        if let Some(hole) = self.first_hole(addr, buf.len() as u64) {
            return Err(VmError::Unmapped(hole));
        }
        let mut done = 0usize;
        while done < buf.len() {
            let cur = addr + done as u64;
            let off = (cur - self.page_floor(cur)) as usize;
            let n = (self.page_size as usize - off).min(buf.len() - done);
            let words = self.page_words(cur)?;
            let bytes: &[u8] = bytemuck::cast_slice(words);
            buf[done..done + n].copy_from_slice(&bytes[off..off + n]);
            done += n;
        }
        Ok(())
    }

    /// Reads `len` bytes, creating PTEs for pages touched for the first time.
    pub fn vm_read(&mut self, addr: VirtAddr, len: u64) -> VmResult<Vec<u8>> {
        if let Some(hole) = self.first_hole(addr, len) {
            return Err(VmError::Unmapped(hole));
        }
        let mut out = vec![0u8; len as usize];
        let mut done = 0usize;
        while done < out.len() {
            let cur = addr + done as u64;
            let vpage = self.page_floor(cur);
            let off = (cur - vpage) as usize;
            let n = (self.page_size as usize - off).min(out.len() - done);
            let ppage = match self.ptes.get(&vpage) {
                Some(pte) => pte.ppage,
                None => {
                    let vma = *self.vma_at(vpage).expect("range checked");
                    self.fault_in(vpage, &vma).ppage
                }
            };
            let bytes: &[u8] = bytemuck::cast_slice(self.pages.words(ppage));
            out[done..done + n].copy_from_slice(&bytes[off..off + n]);
            done += n;
        }
        Ok(out)
    }

    fn hook_for(&self, vpage: VirtAddr) -> Option<FaultHook> {
        self.hooks
            .iter()
            .find(|(r, _)| r.contains(&vpage))
            .map(|(_, h)| Arc::clone(h))
    }

    /// Resolves the physical page a write to `vpage` lands on, running the
    /// fault hook and the copy-on-write path as needed.
    fn prepare_write(&mut self, vpage: VirtAddr) -> VmResult<PageId> {
        let mut vma = *self.vma_at(vpage).ok_or(VmError::Unmapped(vpage))?;
        if vma.protection == Protection::ReadOnly {
            let hook = self.hook_for(vpage).ok_or(VmError::Protection(vpage))?;
            self.counters.hook_faults += 1;
            hook(self, vpage)?;
            vma = *self.vma_at(vpage).ok_or(VmError::Unmapped(vpage))?;
            if vma.protection == Protection::ReadOnly {
                return Err(VmError::Protection(vpage));
            }
        }
        let existing = self.ptes.get(&vpage).copied();
        let pte = match existing {
            Some(pte) => pte,
            None if vma.visibility == Visibility::Private && vma.backing != Backing::Anonymous => {
                // Private file page written before it was ever read.
                self.fault_in(vpage, &vma)
            }
            None => return Ok(self.fault_in(vpage, &vma).ppage),
        };
        if !pte.cow_pending {
            return Ok(pte.ppage);
        }
        let ppage = if self.pages.refcount(pte.ppage) == 1 {
            pte.ppage
        } else {
            let copy = self.pages.alloc_copy(pte.ppage);
            self.pages.release(pte.ppage);
            self.counters.cow_faults += 1;
            self.counters.pages_physically_copied += 1;
            copy
        };
        self.ptes.insert(
            vpage,
            Pte {
                vpage,
                ppage,
                writable: true,
                cow_pending: false,
            },
        );
        Ok(ppage)
    }

    /// Writes `bytes` at `addr`.
    ///
    /// Fails before writing anything if the range is unmapped or a read-only
    /// page in it has no fault hook.
    pub fn vm_write(&mut self, addr: VirtAddr, bytes: &[u8]) -> VmResult<()> {
        let len = bytes.len() as u64;
        if let Some(hole) = self.first_hole(addr, len) {
            return Err(VmError::Unmapped(hole));
        }
        let end = addr + len;
        let mut page = self.page_floor(addr);
        while page < end {
            let vma = self.vma_at(page).expect("range checked");
            if vma.protection == Protection::ReadOnly && self.hook_for(page).is_none() {
                return Err(VmError::Protection(page));
            }
            page += self.page_size;
        }
        let mut done = 0usize;
        while done < bytes.len() {
            let cur = addr + done as u64;
            let vpage = self.page_floor(cur);
            let off = (cur - vpage) as usize;
            let n = (self.page_size as usize - off).min(bytes.len() - done);
            let ppage = self.prepare_write(vpage)?;
            let dst: &mut [u8] = bytemuck::cast_slice_mut(self.pages.words_mut(ppage));
            dst[off..off + n].copy_from_slice(&bytes[done..done + n]);
            done += n;
        }
        Ok(())
    }

    /// Writes one aligned 8-byte word.
    pub fn write_word(&mut self, addr: VirtAddr, value: u64) -> VmResult<()> {
        debug_assert_eq!(addr % 8, 0);
        let vpage = self.page_floor(addr);
        let fast = match (self.vma_at(vpage), self.ptes.get(&vpage)) {
            (Some(vma), Some(pte)) => vma.protection == Protection::ReadWrite && !pte.cow_pending,
            _ => false,
        };
        if !fast {
            return self.vm_write(addr, &value.to_le_bytes());
        }
        let ppage = self.ptes[&vpage].ppage;
        self.pages.words_mut(ppage)[((addr - vpage) / 8) as usize] = value;
        Ok(())
    }

    /// Physically copies `length` bytes from `src` to `dst` (a `memcpy`).
    pub fn copy_range(&mut self, src: VirtAddr, dst: VirtAddr, length: u64) -> VmResult<()> {
        self.check_aligned(src)?;
        self.check_aligned(dst)?;
        self.check_aligned(length)?;
        let mut buf = vec![0u8; self.page_size as usize];
        let mut off = 0;
        while off < length {
            self.peek(src + off, &mut buf)?;
            self.vm_write(dst + off, &buf)?;
            self.counters.pages_physically_copied += 1;
            off += self.page_size;
        }
        Ok(())
    }

    /// Duplicates `[src_addr, src_addr + length)`.
    ///
    /// With `dst_addr == None` a fresh area is reserved; otherwise the snapshot
    /// replaces the existing, fully mapped area at `dst_addr`. Private
    /// mappings share their physical pages copy-on-write afterwards; shared
    /// mappings keep sharing their file pages.
    pub fn vm_snapshot(
        &mut self,
        dst_addr: Option<VirtAddr>,
        src_addr: VirtAddr,
        length: u64,
    ) -> VmResult<VirtAddr> {
        if length == 0 {
            return Err(VmError::ZeroLength);
        }
        self.check_aligned(src_addr)?;
        self.check_aligned(length)?;
        if let Some(dst) = dst_addr {
            self.check_aligned(dst)?;
        }
        // 1. the source must be allocated
        if self.first_hole(src_addr, length).is_some() {
            return Err(VmError::MapFailed(src_addr));
        }
        if let Some(dst) = dst_addr {
            if self.first_hole(dst, length).is_some() {
                return Err(VmError::DestinationNotMapped(dst));
            }
            if dst < src_addr + length && src_addr < dst + length {
                return Err(VmError::Overlap);
            }
        }
        // 2./3. covering VMAs, borders split to match the range exactly
        let src_end = src_addr + length;
        self.split_at(src_addr);
        self.split_at(src_end);
        let covering: Vec<Vma> = self
            .vmas
            .range(src_addr..src_end)
            .map(|(_, v)| *v)
            .collect();
        // 4. reserve or validate the destination
        let dst = match dst_addr {
            Some(dst) => {
                self.remove_range(dst, length);
                dst
            }
            None => self.find_free(length),
        };
        for vma in covering {
            // 5. exact copy, rebased to the destination
            let offset = vma.start - src_addr;
            self.insert_vma(vma.rebased(dst + offset));
            self.counters.vmas_copied += 1;
            // 6. shared mappings go through the file, nothing more to do
            if vma.visibility == Visibility::Shared {
                continue;
            }
            // 7. private: duplicate every existing PTE, both sides COW
            let ptes: Vec<Pte> = self
                .ptes
                .range(vma.start..vma.end())
                .map(|(_, p)| *p)
                .collect();
            for pte in ptes {
                let shared = Pte {
                    writable: false,
                    cow_pending: true,
                    ..pte
                };
                self.ptes.insert(pte.vpage, shared);
                let copy = Pte {
                    vpage: dst + (pte.vpage - src_addr),
                    ..shared
                };
                self.ptes.insert(copy.vpage, copy);
                self.pages.retain(pte.ppage);
                self.counters.ptes_copied += 1;
            }
        }
        self.counters.snapshot_calls += 1;
        Ok(dst)
    }

    /// Sets the protection of `[addr, addr + length)`, splitting VMAs at the
    /// borders. Counts one remap call per affected VMA.
    pub fn vm_protect(
        &mut self,
        addr: VirtAddr,
        length: u64,
        protection: Protection,
    ) -> VmResult<()> {
        self.check_aligned(addr)?;
        self.check_aligned(length)?;
        if let Some(hole) = self.first_hole(addr, length) {
            return Err(VmError::Unmapped(hole));
        }
        let end = addr + length;
        self.split_at(addr);
        self.split_at(end);
        for (_, vma) in self.vmas.range_mut(addr..end) {
            vma.protection = protection;
            self.counters.remap_calls += 1;
        }
        Ok(())
    }

    /// Creates a main-memory file of `length` bytes, all pages zeroed.
    pub fn file_create(&mut self, length: u64) -> VmResult<FileId> {
        if length == 0 {
            return Err(VmError::ZeroLength);
        }
        self.check_aligned(length)?;
        let n = (length / self.page_size) as usize;
        let slots: Vec<PageId> = (0..n).map(|_| self.pages.alloc_zeroed()).collect();
        let id = FileId(self.files.len() as u32);
        self.files.push(File {
            slots,
            mapped: vec![0; n],
            free: (0..n as u32).collect(),
        });
        Ok(id)
    }

    /// Appends `extra` bytes of zeroed pages to `file`.
    pub fn file_grow(&mut self, file: FileId, extra: u64) -> VmResult<()> {
        self.file(file)?;
        self.check_aligned(extra)?;
        let n = (extra / self.page_size) as usize;
        let new: Vec<PageId> = (0..n).map(|_| self.pages.alloc_zeroed()).collect();
        let f = &mut self.files[file.0 as usize];
        let first = f.slots.len() as u32;
        f.slots.extend(new);
        f.mapped.extend(std::iter::repeat_n(0, n));
        f.free.extend(first..first + n as u32);
        Ok(())
    }

    pub fn file_len(&self, file: FileId) -> VmResult<u64> {
        Ok(self.file(file)?.slots.len() as u64 * self.page_size)
    }

    /// Number of slots of `file` neither mapped nor claimed.
    pub fn file_free_pages(&self, file: FileId) -> VmResult<usize> {
        Ok(self.file(file)?.free.len())
    }

    /// Claims the lowest free slot of `file`, growing the file by a quarter
    /// (at least one page) when the pool is empty. Returns the byte offset.
    pub fn file_claim_page(&mut self, file: FileId) -> VmResult<u64> {
        if self.file(file)?.free.is_empty() {
            let pages = (self.files[file.0 as usize].slots.len() / 4).max(1) as u64;
            self.file_grow(file, pages * self.page_size)?;
        }
        let slot = self.files[file.0 as usize]
            .free
            .pop_first()
            .expect("pool refilled");
        Ok(slot as u64 * self.page_size)
    }

    /// Copies the file page at `src_offset` over the one at `dst_offset`.
    pub fn file_copy_page(
        &mut self,
        file: FileId,
        src_offset: u64,
        dst_offset: u64,
    ) -> VmResult<()> {
        let len = self.file_len(file)?;
        if src_offset >= len || dst_offset >= len {
            return Err(VmError::FileRange {
                file: file.0,
                offset: src_offset.max(dst_offset),
                length: self.page_size,
            });
        }
        let src = self.file_page(file, src_offset);
        let dst = self.file_page(file, dst_offset);
        self.pages.copy_contents(src, dst);
        self.counters.pages_physically_copied += 1;
        Ok(())
    }

    fn check_file_range(&self, file: FileId, offset: u64, length: u64) -> VmResult<()> {
        let file_len = self.file_len(file)?;
        self.check_aligned(offset)?;
        if offset + length > file_len {
            return Err(VmError::FileRange {
                file: file.0,
                offset,
                length,
            });
        }
        Ok(())
    }

    /// Maps `[offset, offset + length)` of `file` read-write.
    ///
    /// With `dst_addr` given, whatever was mapped there is replaced; fault
    /// hooks registered over the range stay in place.
    pub fn vm_map_file(
        &mut self,
        dst_addr: Option<VirtAddr>,
        file: FileId,
        offset: u64,
        length: u64,
        visibility: Visibility,
    ) -> VmResult<VirtAddr> {
        if length == 0 {
            return Err(VmError::ZeroLength);
        }
        self.check_aligned(length)?;
        self.check_file_range(file, offset, length)?;
        let start = match dst_addr {
            Some(dst) => {
                self.check_aligned(dst)?;
                self.remove_range(dst, length);
                dst
            }
            None => self.find_free(length),
        };
        self.insert_vma(Vma {
            start,
            length,
            visibility,
            protection: Protection::ReadWrite,
            backing: Backing::File { file, offset },
        });
        self.counters.remap_calls += 1;
        Ok(start)
    }

    /// Installs `hook` for write protection faults inside `range`.
    pub fn register_fault_hook(&mut self, range: Range<VirtAddr>, hook: FaultHook) {
        self.hooks.push((range, hook));
    }

    pub fn has_fault_hook(&self, range: &Range<VirtAddr>) -> bool {
        self.hooks.iter().any(|(r, _)| r == range)
    }

    /// Checks refcount conservation and the structural invariants, returning
    /// a description of the first violation.
    pub fn check_invariants(&self) -> Result<(), String> {
        let mut prev_end = 0;
        for (start, vma) in &self.vmas {
            if *start != vma.start {
                return Err(format!(
                    "vma keyed at {start:#x} starts at {:#x}",
                    vma.start
                ));
            }
            if vma.start % self.page_size != 0
                || vma.length % self.page_size != 0
                || vma.length == 0
            {
                return Err(format!(
                    "vma {:#x}+{:#x} not page aligned",
                    vma.start, vma.length
                ));
            }
            if vma.start < prev_end {
                return Err(format!("vma at {:#x} overlaps its predecessor", vma.start));
            }
            prev_end = vma.end();
        }
        let mut expected = vec![0u32; self.pages.frames.len()];
        for pte in self.ptes.values() {
            if self.vma_at(pte.vpage).is_none() {
                return Err(format!("pte {:#x} outside every vma", pte.vpage));
            }
            if pte.cow_pending && pte.writable {
                return Err(format!("pte {:#x} is cow-pending but writable", pte.vpage));
            }
            expected[pte.ppage.index()] += 1;
        }
        let mut mapped: Vec<Vec<u32>> = self.files.iter().map(|f| vec![0; f.slots.len()]).collect();
        for vma in self.vmas.values() {
            if let Some((f, slots)) = self.file_slots(vma) {
                for s in slots {
                    mapped[f][s] += 1;
                }
            }
        }
        for (fi, file) in self.files.iter().enumerate() {
            for (si, page) in file.slots.iter().enumerate() {
                expected[page.index()] += 1;
                if file.mapped[si] != mapped[fi][si] {
                    return Err(format!("file {fi} slot {si} mapping count drifted"));
                }
            }
        }
        let free: BTreeSet<PageId> = self.pages.free.iter().copied().collect();
        if free.len() != self.pages.free.len() {
            return Err("duplicate page on the free list".into());
        }
        for (i, want) in expected.iter().enumerate() {
            let id = PageId(i as u32);
            let have = self.pages.refcount(id);
            if have != *want {
                return Err(format!(
                    "page {i}: refcount {have}, referenced {want} times"
                ));
            }
            if (have == 0) != free.contains(&id) {
                return Err(format!(
                    "page {i}: free-list membership disagrees with refcount {have}"
                ));
            }
        }
        Ok(())
    }

    /// Stable textual listing of the VMAs and their PTE counts.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for vma in self.vmas.values() {
            let vis = match vma.visibility {
                Visibility::Private => "private",
                Visibility::Shared => "shared",
            };
            let prot = match vma.protection {
                Protection::ReadOnly => "ro",
                Protection::ReadWrite => "rw",
            };
            let backing = match vma.backing {
                Backing::Anonymous => "anon".to_string(),
                Backing::File { file, offset } => format!("file={}+{:#x}", file.0, offset),
            };
            let _ = writeln!(
                out,
                "vma start={:#x} len={:#x} {} {} {} ptes={}",
                vma.start,
                vma.length,
                vis,
                prot,
                backing,
                self.ptes_in(vma.start, vma.length)
            );
        }
        out
    }
}
