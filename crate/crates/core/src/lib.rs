// SPDX-License-Identifier: Apache-2.0

pub mod aig;
pub mod autodiff;
pub mod batch;
pub mod checkpoint;
pub mod cli;
pub mod dataset;
pub mod experiments;
pub mod gradcheck;
pub mod model;
pub mod sim;
pub mod stats;
pub mod train;
