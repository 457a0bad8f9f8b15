// Copyright 2026 The gateprune Authors
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//     http://www.apache.org/licenses/LICENSE-2.0
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

//! Simultaneous learning and structured pruning of neural networks with variational
//! Bernoulli gates.

pub mod checkpoint;
pub mod config;
pub mod convergence;
pub mod data;
pub mod error;
pub mod estimators;
pub mod hyper_prior;
pub mod metrics;
pub mod network;
pub mod pipeline;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
