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

//! Flat model of an address space.
//!
//! The model keeps every virtual page as its own byte array. Private pages
//! are deep-copied by a snapshot; pages of a shared mapping alias a file
//! slot; private file pages read through to their slot until written.

use std::collections::BTreeMap;

use hmvcc::vmem::{AddressSpace, Backing, FileId, Protection, VirtAddr, Visibility};
use proptest::prelude::*;

pub const PAGE: u64 = 128;
const MAX_PAGES: u64 = 64;

#[derive(Debug, Clone)]
enum Content {
    Private(Vec<u8>),
    Shared {
        file: usize,
        slot: usize,
    },
    /// Private file page not yet written.
    FileCow {
        file: usize,
        slot: usize,
    },
}

#[derive(Debug, Clone)]
struct ModelPage {
    content: Content,
    writable: bool,
}

#[derive(Default)]
struct Model {
    pages: BTreeMap<VirtAddr, ModelPage>,
    files: Vec<Vec<Vec<u8>>>,
}

impl Model {
    fn bytes(&self, vpage: VirtAddr) -> &[u8] {
        match &self.pages[&vpage].content {
            Content::Private(b) => b,
            Content::Shared { file, slot } | Content::FileCow { file, slot } => {
                &self.files[*file][*slot]
            }
        }
    }

    fn read(&self, addr: VirtAddr, len: u64) -> Option<Vec<u8>> {
        let mut out = Vec::with_capacity(len as usize);
        for a in addr..addr + len {
            let vpage = a - a % PAGE;
            self.pages.get(&vpage)?;
            out.push(self.bytes(vpage)[(a - vpage) as usize]);
        }
        Some(out)
    }

    /// `Err(())` without effect when unmapped or read-only.
    fn write(&mut self, addr: VirtAddr, data: &[u8]) -> Result<(), ()> {
        let end = addr + data.len() as u64;
        let mut p = addr - addr % PAGE;
        while p < end {
            match self.pages.get(&p) {
                Some(mp) if mp.writable => {}
                _ => return Err(()),
            }
            p += PAGE;
        }
        for (i, b) in data.iter().enumerate() {
            let a = addr + i as u64;
            let vpage = a - a % PAGE;
            let off = (a - vpage) as usize;
            if let Content::FileCow { file, slot } = self.pages[&vpage].content {
                let copy = self.files[file][slot].clone();
                self.pages.get_mut(&vpage).unwrap().content = Content::Private(copy);
            }
            match &mut self.pages.get_mut(&vpage).unwrap().content {
                Content::Private(bytes) => bytes[off] = *b,
                Content::Shared { file, slot } => self.files[*file][*slot][off] = *b,
                Content::FileCow { .. } => unreachable!(),
            }
        }
        Ok(())
    }

    fn mapped(&self, addr: VirtAddr, pages: u64) -> bool {
        (0..pages).all(|i| self.pages.contains_key(&(addr + i * PAGE)))
    }
}

#[derive(Debug, Clone)]
pub enum Op {
    AllocPrivate(u64),
    AllocShared(u64),
    MapFile {
        file: usize,
        offset: u64,
        pages: u64,
        shared: bool,
    },
    Write {
        region: usize,
        offset: u64,
        len: u64,
        seed: u8,
    },
    Read {
        region: usize,
        offset: u64,
        len: u64,
    },
    Snapshot {
        region: usize,
        first: u64,
        pages: u64,
        into: Option<usize>,
    },
    Protect {
        region: usize,
        first: u64,
        pages: u64,
        read_only: bool,
    },
    Unmap {
        region: usize,
    },
}

pub fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        2 => (1u64..=8).prop_map(Op::AllocPrivate),
        1 => (1u64..=8).prop_map(Op::AllocShared),
        1 => (0usize..8, 0u64..8, 1u64..=4, any::<bool>())
            .prop_map(|(file, offset, pages, shared)| Op::MapFile { file, offset, pages, shared }),
        6 => (0usize..16, 0u64..1024, 1u64..300, any::<u8>())
            .prop_map(|(region, offset, len, seed)| Op::Write { region, offset, len, seed }),
        4 => (0usize..16, 0u64..1024, 1u64..300)
            .prop_map(|(region, offset, len)| Op::Read { region, offset, len }),
        3 => (0usize..16, 0u64..8, 1u64..=8, proptest::option::weighted(0.3, 0usize..16))
            .prop_map(|(region, first, pages, into)| Op::Snapshot { region, first, pages, into }),
        2 => (0usize..16, 0u64..8, 1u64..=8, any::<bool>())
            .prop_map(|(region, first, pages, read_only)| Op::Protect { region, first, pages, read_only }),
        1 => (0usize..16).prop_map(|region| Op::Unmap { region }),
    ]
}

pub struct Harness {
    pub space: AddressSpace,
    model: Model,
    /// `(start, pages)` of every live region.
    regions: Vec<(VirtAddr, u64)>,
    files: Vec<(FileId, u64)>,
}

impl Harness {
    pub fn new() -> Self {
        Harness {
            space: AddressSpace::new(PAGE as usize),
            model: Model::default(),
            regions: Vec::new(),
            files: Vec::new(),
        }
    }

    fn live_pages(&self) -> u64 {
        self.model.pages.len() as u64
    }

    fn region(&self, idx: usize) -> Option<(VirtAddr, u64)> {
        if self.regions.is_empty() {
            None
        } else {
            Some(self.regions[idx % self.regions.len()])
        }
    }

    fn add_file(&mut self, file: FileId, pages: u64) -> usize {
        self.files.push((file, pages));
        self.model
            .files
            .push(vec![vec![0; PAGE as usize]; pages as usize]);
        self.files.len() - 1
    }

    pub fn apply(&mut self, op: &Op) {
        match *op {
            Op::AllocPrivate(pages) | Op::AllocShared(pages) => {
                if self.live_pages() + pages > MAX_PAGES {
                    return;
                }
                let shared = matches!(op, Op::AllocShared(_));
                let vis = if shared {
                    Visibility::Shared
                } else {
                    Visibility::Private
                };
                let addr = self
                    .space
                    .vm_alloc(pages * PAGE, vis, Backing::Anonymous)
                    .unwrap();
                let fidx = if shared {
                    let Backing::File { file, .. } = self.space.vma_at(addr).unwrap().backing
                    else {
                        panic!("shared anonymous memory is file backed");
                    };
                    Some(self.add_file(file, pages))
                } else {
                    None
                };
                for i in 0..pages {
                    let content = match fidx {
                        Some(file) => Content::Shared {
                            file,
                            slot: i as usize,
                        },
                        None => Content::Private(vec![0; PAGE as usize]),
                    };
                    self.model.pages.insert(
                        addr + i * PAGE,
                        ModelPage {
                            content,
                            writable: true,
                        },
                    );
                }
                self.regions.push((addr, pages));
            }
            Op::MapFile {
                file,
                offset,
                pages,
                shared,
            } => {
                if self.files.is_empty() || self.live_pages() + pages > MAX_PAGES {
                    if self.files.is_empty() && self.live_pages() + 4 <= MAX_PAGES {
                        let f = self.space.file_create(4 * PAGE).unwrap();
                        self.add_file(f, 4);
                    }
                    return;
                }
                let fidx = file % self.files.len();
                let (fid, fpages) = self.files[fidx];
                if offset + pages > fpages {
                    assert!(self
                        .space
                        .vm_map_file(None, fid, offset * PAGE, pages * PAGE, Visibility::Shared)
                        .is_err());
                    return;
                }
                let vis = if shared {
                    Visibility::Shared
                } else {
                    Visibility::Private
                };
                let addr = self
                    .space
                    .vm_map_file(None, fid, offset * PAGE, pages * PAGE, vis)
                    .unwrap();
                for i in 0..pages {
                    let slot = (offset + i) as usize;
                    let content = if shared {
                        Content::Shared { file: fidx, slot }
                    } else {
                        Content::FileCow { file: fidx, slot }
                    };
                    self.model.pages.insert(
                        addr + i * PAGE,
                        ModelPage {
                            content,
                            writable: true,
                        },
                    );
                }
                self.regions.push((addr, pages));
            }
            Op::Write {
                region,
                offset,
                len,
                seed,
            } => {
                let Some((start, pages)) = self.region(region) else {
                    return;
                };
                let size = pages * PAGE;
                let offset = offset % size;
                let len = len.min(size - offset);
                let data: Vec<u8> = (0..len).map(|i| seed.wrapping_add(i as u8) | 1).collect();
                let want = self.model.write(start + offset, &data);
                let got = self.space.vm_write(start + offset, &data);
                assert_eq!(want.is_ok(), got.is_ok(), "write {op:?}: {got:?}");
            }
            Op::Read {
                region,
                offset,
                len,
            } => {
                let Some((start, pages)) = self.region(region) else {
                    return;
                };
                let size = pages * PAGE;
                let offset = offset % size;
                let len = len.min(size - offset);
                let want = self.model.read(start + offset, len).expect("region mapped");
                let got = self.space.vm_read(start + offset, len).unwrap();
                assert_eq!(want, got, "read {op:?}");
            }
            Op::Snapshot {
                region,
                first,
                pages,
                into,
            } => {
                let Some((start, rpages)) = self.region(region) else {
                    return;
                };
                let first = first % rpages;
                let pages = pages.min(rpages - first);
                let src = start + first * PAGE;
                let dst = match into {
                    Some(i) => {
                        let (d, dpages) = self.region(i).unwrap();
                        let disjoint = d + pages * PAGE <= src || src + pages * PAGE <= d;
                        if dpages < pages || !disjoint {
                            return;
                        }
                        Some(d)
                    }
                    None => {
                        if self.live_pages() + pages > MAX_PAGES {
                            return;
                        }
                        None
                    }
                };
                let got = self.space.vm_snapshot(dst, src, pages * PAGE).unwrap();
                if let Some(d) = dst {
                    assert_eq!(got, d);
                }
                for i in 0..pages {
                    let mut page = self.model.pages[&(src + i * PAGE)].clone();
                    if let Content::Private(b) = &page.content {
                        page.content = Content::Private(b.clone());
                    }
                    self.model.pages.insert(got + i * PAGE, page);
                }
                if dst.is_none() {
                    self.regions.push((got, pages));
                }
            }
            Op::Protect {
                region,
                first,
                pages,
                read_only,
            } => {
                let Some((start, rpages)) = self.region(region) else {
                    return;
                };
                let first = first % rpages;
                let pages = pages.min(rpages - first);
                let prot = if read_only {
                    Protection::ReadOnly
                } else {
                    Protection::ReadWrite
                };
                self.space
                    .vm_protect(start + first * PAGE, pages * PAGE, prot)
                    .unwrap();
                for i in 0..pages {
                    self.model
                        .pages
                        .get_mut(&(start + (first + i) * PAGE))
                        .unwrap()
                        .writable = !read_only;
                }
            }
            Op::Unmap { region } => {
                if self.regions.is_empty() {
                    return;
                }
                let (start, pages) = self.regions.remove(region % self.regions.len());
                self.space.vm_unmap(start, pages * PAGE).unwrap();
                for i in 0..pages {
                    self.model.pages.remove(&(start + i * PAGE));
                }
                assert!(!self.model.mapped(start, 1));
                assert!(self.space.vm_read(start, 1).is_err());
            }
        }
    }

    pub fn full_compare(&mut self) {
        for &(start, pages) in &self.regions.clone() {
            let want = self.model.read(start, pages * PAGE).unwrap();
            assert_eq!(want, self.space.vm_read(start, pages * PAGE).unwrap());
        }
    }
}

/// Runs one sequence, checking the invariants after every operation.
pub fn run_sequence(ops: &[Op]) -> Result<(), String> {
    let mut h = Harness::new();
    for op in ops {
        h.apply(op);
        h.space
            .check_invariants()
            .map_err(|e| format!("after {op:?}: {e}\n{}", h.space.dump()))?;
    }
    h.full_compare();
    h.space.check_invariants()
}
