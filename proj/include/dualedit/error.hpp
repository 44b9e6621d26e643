// Copyright 2026 The dualedit Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace dualedit {

// Base of every error thrown by the library. Callers that only care about
// "something went wrong" catch this; the CLI maps subclasses to exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class InvalidArgument : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class NumericFailure : public Error {
 public:
  using Error::Error;
};

class InversionFailure : public NumericFailure {
 public:
  InversionFailure(int step, const std::string& what)
      : NumericFailure("inversion failed at step " + std::to_string(step) + ": " + what), step_(step) {}
  int step() const { return step_; }

 private:
  int step_;
};

class RolloutFailure : public NumericFailure {
 public:
  RolloutFailure(int step, std::size_t retained_graphs, const std::string& what)
      : NumericFailure("rollout failed at step " + std::to_string(step) + " (" + std::to_string(retained_graphs) +
                       " retained graphs): " + what),
        step_(step),
        retained_(retained_graphs) {}
  int step() const { return step_; }
  std::size_t retained_graphs() const { return retained_; }

 private:
  int step_;
  std::size_t retained_;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace dualedit
