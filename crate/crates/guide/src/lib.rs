//! Placeholder until the book chapters exist.
