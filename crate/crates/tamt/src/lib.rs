// Copyright 2026 The tamt Authors
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

//! Std companion of `tamt-core`: file formats, corpus cache, task files,
//! experiment configuration, the sweep runner and analysis exports.

pub mod analysis;
pub mod config;
pub mod corpus;
pub mod error;
pub mod format;
pub mod runner;
pub mod taskio;
pub mod trace;

pub use error::{Error, Result};
