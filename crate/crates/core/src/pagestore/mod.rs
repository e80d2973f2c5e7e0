//! Fixed-size pages grouped per container, byte layouts of decomposed
//! types, and segment access by computed offsets.

mod layout;
mod store;

use thiserror::Error;

use crate::classify::SizeType;

pub use layout::{
    compute_data_size, compute_layout, decode_object, encode_into, encode_object, read_field,
    read_prim, write_field, ArrayLen, DataSize, FieldLayout, Layout,
};
pub use store::{GroupId, PageInfo, PageStore, SegmentRef, StoreStats, DEFAULT_PAGE_SIZE};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LayoutError {
    #[error("type `{ty}` is {verdict} and cannot be decomposed")]
    NotDecomposable { ty: String, verdict: SizeType },
    #[error("field `{field}` may hold several types ({}); it cannot be decomposed", types.join(", "))]
    Polymorphic { field: String, types: Vec<String> },
    #[error("null reference in a decomposed value")]
    NullReference,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("no field at path `{0}`")]
    NoSuchPath(String),
    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("offset outside the segment")]
    OutOfBounds,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StoreError {
    #[error("page size {0} is not supported")]
    BadPageSize(usize),
    #[error("budget of {budget} bytes cannot hold one {page_size}-byte page")]
    BudgetTooSmall { budget: usize, page_size: usize },
    #[error("page budget exhausted")]
    BudgetExhausted,
    #[error("segment of {len} bytes exceeds the {page_size}-byte page size")]
    SegmentTooLarge { len: usize, page_size: usize },
    #[error("page group {0} has been released")]
    DeadGroup(u32),
    #[error("access outside the used bytes of a page group")]
    OutOfBounds,
    #[error("layout error: {0}")]
    Layout(#[from] LayoutError),
    #[error("i/o error: {0}")]
    Io(String),
}
