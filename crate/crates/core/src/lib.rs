//! Shared building blocks for the remote care platform: the smart-home domain
//! model, access tokens, resilience primitives, clocks and journals.

pub mod clock;
pub mod domain;
pub mod journal;
pub mod resilience;
pub mod token;

pub use clock::{Clock, ManualClock, SharedClock, SystemClock};
pub use domain::{
    access_item_for, current_state, validate_value, AccessItem, AccessMode, Command, DeviceItem,
    DeviceState, DomainError, ItemKind, SmartHome,
};
pub use token::{Claims, Principal, Role, TokenError, TokenSigner};
