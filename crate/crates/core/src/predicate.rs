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

//! Column predicates over encoded cells.
//!
//! Intervals are inclusive on both ends. Strict bounds are expressed by
//! stepping to the neighbouring value (`f64::next_down`, one day less).

use crate::storage::{cell_date, cell_f64, cell_i64, Cell, ColumnRef};

#[derive(Debug, Clone, PartialEq)]
pub enum PredicateForm {
    IntRange {
        lo: i64,
        hi: i64,
    },
    FloatRange {
        lo: f64,
        hi: f64,
    },
    DateRange {
        lo: i32,
        hi: i32,
    },
    /// Sorted dictionary codes.
    Codes(Vec<u32>),
    /// Every value; covers a column that is read but not filtered.
    All,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Predicate {
    pub column: ColumnRef,
    pub form: PredicateForm,
}

impl Predicate {
    pub fn int_range(column: ColumnRef, lo: i64, hi: i64) -> Self {
        debug_assert!(lo <= hi);
        Predicate {
            column,
            form: PredicateForm::IntRange { lo, hi },
        }
    }

    pub fn float_range(column: ColumnRef, lo: f64, hi: f64) -> Self {
        debug_assert!(lo <= hi);
        Predicate {
            column,
            form: PredicateForm::FloatRange { lo, hi },
        }
    }

    /// `value < hi` over floats.
    pub fn float_below(column: ColumnRef, hi: f64) -> Self {
        Predicate::float_range(column, f64::NEG_INFINITY, hi.next_down())
    }

    pub fn date_range(column: ColumnRef, lo: i32, hi: i32) -> Self {
        debug_assert!(lo <= hi);
        Predicate {
            column,
            form: PredicateForm::DateRange { lo, hi },
        }
    }

    pub fn codes(column: ColumnRef, mut codes: Vec<u32>) -> Self {
        codes.sort_unstable();
        codes.dedup();
        Predicate {
            column,
            form: PredicateForm::Codes(codes),
        }
    }

    pub fn code(column: ColumnRef, code: u32) -> Self {
        Predicate::codes(column, vec![code])
    }

    pub fn all(column: ColumnRef) -> Self {
        Predicate {
            column,
            form: PredicateForm::All,
        }
    }

    #[inline]
    pub fn matches(&self, cell: Cell) -> bool {
        match &self.form {
            PredicateForm::IntRange { lo, hi } => (*lo..=*hi).contains(&cell_i64(cell)),
            PredicateForm::FloatRange { lo, hi } => {
                let v = cell_f64(cell);
                v >= *lo && v <= *hi
            }
            PredicateForm::DateRange { lo, hi } => (*lo..=*hi).contains(&cell_date(cell)),
            PredicateForm::Codes(codes) => match codes.as_slice() {
                [one] => cell == *one as Cell,
                many => u32::try_from(cell).is_ok_and(|c| many.binary_search(&c).is_ok()),
            },
            PredicateForm::All => true,
        }
    }
}
