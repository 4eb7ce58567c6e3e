// Copyright 2026 The TriForce-CPU Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace triforce {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Shape or rank mismatch between kernel operands.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// A sequence or cache would exceed its configured capacity.
class CapacityError : public Error {
 public:
  using Error::Error;
};

/// Caller violated a documented precondition.
class ContractError : public Error {
 public:
  using Error::Error;
};

}  // namespace triforce
