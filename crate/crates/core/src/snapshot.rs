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

//! Snapshot strategies over an emulated address space.
//!
//! Three ways to obtain a read-only duplicate of a virtual range:
//!
//! - [`StrategyKind::Physical`] reserves a fresh area and copies every byte.
//! - [`StrategyKind::Rewired`] maps the file pages behind the source a second
//!   time, one map call per source VMA, write-protects both sides and
//!   implements copy-on-write by hand in a fault hook.
//! - [`StrategyKind::VmSnapshot`] issues a single
//!   [`AddressSpace::vm_snapshot`] call.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use crate::vmem::{
    AddressSpace, Backing, OpCounters, Protection, VirtAddr, Visibility, VmError, VmResult,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StrategyKind {
    Physical,
    Rewired,
    VmSnapshot,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 3] = [
        StrategyKind::Physical,
        StrategyKind::Rewired,
        StrategyKind::VmSnapshot,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::Physical => "physical",
            StrategyKind::Rewired => "rewired",
            StrategyKind::VmSnapshot => "vm_snapshot",
        }
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StrategyKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "physical" => Ok(StrategyKind::Physical),
            "rewired" => Ok(StrategyKind::Rewired),
            "vm_snapshot" | "vm-snapshot" => Ok(StrategyKind::VmSnapshot),
            other => Err(format!("unknown snapshot backend '{other}'")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SnapshotError {
    #[error("rewired snapshots need a shared file-backed source (range at {0:#x})")]
    UnsupportedBacking(VirtAddr),
    #[error(transparent)]
    Vm(#[from] VmError),
}

/// Cost of creating one view.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SnapshotCost {
    pub bytes_copied_at_create: u64,
    /// Modeled system calls that create the view's mappings.
    pub invocations_at_create: u64,
    /// Protection changes issued after the mappings exist (rewired only).
    pub protect_calls: u64,
    pub vmas_touched: u64,
    pub ptes_touched: u64,
}

impl SnapshotCost {
    pub fn add(&mut self, other: &SnapshotCost) {
        self.bytes_copied_at_create += other.bytes_copied_at_create;
        self.invocations_at_create += other.invocations_at_create;
        self.protect_calls += other.protect_calls;
        self.vmas_touched += other.vmas_touched;
        self.ptes_touched += other.ptes_touched;
    }
}

/// Reserves a writable segment of `length` bytes suited to `kind`.
///
/// Rewiring needs file pages to remap, so its segments are shared mappings of
/// a fresh file that carries a quarter of spare pages as the copy-on-write
/// pool. The other strategies use private anonymous memory.
pub fn allocate_segment(
    kind: StrategyKind,
    space: &mut AddressSpace,
    length: u64,
) -> VmResult<VirtAddr> {
    match kind {
        StrategyKind::Physical | StrategyKind::VmSnapshot => {
            space.vm_alloc(length, Visibility::Private, Backing::Anonymous)
        }
        StrategyKind::Rewired => {
            let ps = space.page_size();
            let spare = ((length / ps) / 4).max(1) * ps;
            let file = space.file_create(length + spare)?;
            space.vm_map_file(None, file, 0, length, Visibility::Shared)
        }
    }
}

/// Creates a read-only duplicate of `[src, src + length)`.
pub fn create_view(
    kind: StrategyKind,
    space: &mut AddressSpace,
    src: VirtAddr,
    length: u64,
) -> Result<(VirtAddr, SnapshotCost), SnapshotError> {
    let before = space.counters();
    match kind {
        StrategyKind::Physical => {
            if !space.is_mapped(src, length) {
                return Err(VmError::MapFailed(src).into());
            }
            let dst = space.vm_alloc(length, Visibility::Private, Backing::Anonymous)?;
            space.copy_range(src, dst, length)?;
            let d = space.counters().delta(&before);
            Ok((
                dst,
                SnapshotCost {
                    bytes_copied_at_create: length,
                    invocations_at_create: 1,
                    protect_calls: 0,
                    vmas_touched: 1,
                    ptes_touched: space.ptes_in(dst, length) as u64 + d.ptes_copied,
                },
            ))
        }
        StrategyKind::Rewired => rewire(space, src, length),
        StrategyKind::VmSnapshot => {
            let dst = space.vm_snapshot(None, src, length)?;
            let d = space.counters().delta(&before);
            Ok((
                dst,
                SnapshotCost {
                    bytes_copied_at_create: 0,
                    invocations_at_create: d.snapshot_calls,
                    protect_calls: 0,
                    vmas_touched: d.vmas_copied,
                    ptes_touched: d.ptes_copied,
                },
            ))
        }
    }
}

fn rewire(
    space: &mut AddressSpace,
    src: VirtAddr,
    length: u64,
) -> Result<(VirtAddr, SnapshotCost), SnapshotError> {
    if !space.is_mapped(src, length) {
        return Err(VmError::MapFailed(src).into());
    }
    let covering = space.vmas_in(src, length);
    for vma in &covering {
        if vma.visibility != Visibility::Shared || vma.backing == Backing::Anonymous {
            return Err(SnapshotError::UnsupportedBacking(src));
        }
    }
    let dst = space.find_free(length);
    let mut maps = 0;
    for vma in &covering {
        // clip to the requested range
        let lo = vma.start.max(src);
        let hi = vma.end().min(src + length);
        let Backing::File { file, offset } = vma.backing_at(lo) else {
            unreachable!("checked above");
        };
        space.vm_map_file(
            Some(dst + (lo - src)),
            file,
            offset,
            hi - lo,
            Visibility::Shared,
        )?;
        maps += 1;
    }
    let before_protect = space.counters();
    space.vm_protect(dst, length, Protection::ReadOnly)?;
    space.vm_protect(src, length, Protection::ReadOnly)?;
    let protects = space.counters().delta(&before_protect).remap_calls;
    for range in [src..src + length, dst..dst + length] {
        if !space.has_fault_hook(&range) {
            space.register_fault_hook(range, Arc::new(manual_cow));
        }
    }
    Ok((
        dst,
        SnapshotCost {
            bytes_copied_at_create: 0,
            invocations_at_create: maps,
            protect_calls: protects,
            vmas_touched: covering.len() as u64,
            ptes_touched: 0,
        },
    ))
}

/// Write-fault handler of rewired views: claims a free page of the backing
/// file, copies the current contents over and rewires the faulting page to
/// it, read-write.
fn manual_cow(space: &mut AddressSpace, page: VirtAddr) -> VmResult<()> {
    let vma = *space.vma_at(page).ok_or(VmError::Unmapped(page))?;
    let Backing::File { file, offset } = vma.backing_at(page) else {
        return Err(VmError::Protection(page));
    };
    let fresh = space.file_claim_page(file)?;
    space.file_copy_page(file, offset, fresh)?;
    let ps = space.page_size();
    space.vm_map_file(Some(page), file, fresh, ps, Visibility::Shared)?;
    Ok(())
}

/// Performs `vm_write` and reports what it cost.
pub fn write_through(
    space: &mut AddressSpace,
    addr: VirtAddr,
    bytes: &[u8],
) -> VmResult<OpCounters> {
    let before = space.counters();
    space.vm_write(addr, bytes)?;
    Ok(space.counters().delta(&before))
}

/// Modeled cost of duplicating whole address spaces (a `fork`).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ForkCost {
    pub vmas: u64,
    pub ptes: u64,
}

impl ForkCost {
    pub fn total(&self) -> u64 {
        self.vmas + self.ptes
    }
}

/// Every VMA and PTE of `spaces` plus one PTE per page of `extra_bytes`
/// process memory held outside them (timestamps, chains, metadata).
pub fn fork_cost<'a>(
    spaces: impl IntoIterator<Item = &'a AddressSpace>,
    extra_bytes: u64,
    page_size: u64,
) -> ForkCost {
    let mut cost = ForkCost {
        vmas: 0,
        ptes: extra_bytes.div_ceil(page_size),
    };
    if extra_bytes > 0 {
        cost.vmas += 1;
    }
    for s in spaces {
        cost.vmas += s.vma_count() as u64;
        cost.ptes += s.pte_count() as u64;
    }
    cost
}

#[cfg(test)]
mod tests {
    use super::*;

    const P: u64 = 4096;

    fn filled(kind: StrategyKind, pages: u64) -> (AddressSpace, VirtAddr) {
        let mut s = AddressSpace::default();
        let a = allocate_segment(kind, &mut s, pages * P).unwrap();
        for i in 0..pages {
            s.vm_write(a + i * P, &[(i + 1) as u8; 16]).unwrap();
        }
        (s, a)
    }

    #[test]
    fn views_equal_source_and_stay_isolated() {
        for kind in StrategyKind::ALL {
            let (mut s, a) = filled(kind, 8);
            let (v, _) = create_view(kind, &mut s, a, 8 * P).unwrap();
            assert_eq!(
                s.vm_read(v, 8 * P).unwrap(),
                s.vm_read(a, 8 * P).unwrap(),
                "{kind}"
            );
            s.vm_write(a + 2 * P, &[0xee; 16]).unwrap();
            assert_eq!(s.vm_read(v + 2 * P, 1).unwrap(), vec![3], "{kind}");
            s.vm_write(v + 5 * P, &[0xdd; 16]).unwrap();
            assert_eq!(s.vm_read(a + 5 * P, 1).unwrap(), vec![6], "{kind}");
            s.check_invariants().unwrap();
        }
    }

    #[test]
    fn physical_copies_every_byte() {
        let (mut s, a) = filled(StrategyKind::Physical, 4);
        let (_, cost) = create_view(StrategyKind::Physical, &mut s, a, 4 * P).unwrap();
        assert_eq!(cost.bytes_copied_at_create, 4 * P);
    }

    #[test]
    fn vm_snapshot_is_one_call_and_copies_nothing() {
        let (mut s, a) = filled(StrategyKind::VmSnapshot, 4);
        let (_, cost) = create_view(StrategyKind::VmSnapshot, &mut s, a, 4 * P).unwrap();
        assert_eq!(cost.invocations_at_create, 1);
        assert_eq!(cost.bytes_copied_at_create, 0);
        assert_eq!(cost.ptes_touched, 4);
    }

    #[test]
    fn rewired_needs_file_backing() {
        let (mut s, a) = filled(StrategyKind::VmSnapshot, 2);
        assert_eq!(
            create_view(StrategyKind::Rewired, &mut s, a, 2 * P),
            Err(SnapshotError::UnsupportedBacking(a))
        );
    }

    #[test]
    fn rewired_invocations_follow_vma_count() {
        let (mut s, a) = filled(StrategyKind::Rewired, 16);
        let (v, first) = create_view(StrategyKind::Rewired, &mut s, a, 16 * P).unwrap();
        assert_eq!(first.invocations_at_create, 1);
        // every separated page becomes a VMA of its own
        for i in [1u64, 5, 9] {
            s.vm_write(v + i * P, b"w").unwrap();
        }
        let vmas = s.vmas_in(v, 16 * P).len() as u64;
        assert_eq!(vmas, 7);
        let (_, second) = create_view(StrategyKind::Rewired, &mut s, v, 16 * P).unwrap();
        assert_eq!(second.invocations_at_create, vmas);
    }

    #[test]
    fn first_write_costs() {
        let (mut s, a) = filled(StrategyKind::VmSnapshot, 2);
        create_view(StrategyKind::VmSnapshot, &mut s, a, 2 * P).unwrap();
        let d = write_through(&mut s, a, b"x").unwrap();
        assert_eq!((d.cow_faults, d.remap_calls), (1, 0));
        let d = write_through(&mut s, a, b"y").unwrap();
        assert_eq!(d.cow_faults, 0);

        let (mut s, a) = filled(StrategyKind::Rewired, 2);
        create_view(StrategyKind::Rewired, &mut s, a, 2 * P).unwrap();
        let d = write_through(&mut s, a, b"x").unwrap();
        assert!(d.remap_calls >= 1);
        assert_eq!(d.hook_faults, 1);
        let d = write_through(&mut s, a, b"y").unwrap();
        assert_eq!((d.remap_calls, d.hook_faults), (0, 0));
    }

    #[test]
    fn fork_counts_everything() {
        let (s, _) = filled(StrategyKind::VmSnapshot, 3);
        let c = fork_cost([&s], 2 * P + 1, P);
        assert_eq!(c, ForkCost { vmas: 2, ptes: 6 });
    }
}
