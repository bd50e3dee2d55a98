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

//! A main-memory columnar transaction engine with heterogeneous MVCC.
//!
//! OLTP transactions run against the up-to-date store with classical
//! multi-version concurrency control; OLAP transactions run against frozen,
//! virtually snapshotted copies of the columns they touch. The virtual
//! memory machinery is emulated in [`vmem`].

pub mod engine;
pub mod hetero;
pub mod predicate;
pub mod query;
pub mod snapshot;
pub mod storage;
pub mod txn;
pub mod vmem;
pub mod workload;
