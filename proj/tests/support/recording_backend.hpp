// Copyright 2026 The dualedit Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <vector>

#include "dualedit/denoiser.hpp"

namespace dualedit::testing {

// Delegates to another backend and keeps a copy of every latent it is fed.
class RecordingBackend final : public DenoiserBackend {
 public:
  struct Call {
    Tensor z;
    int t;
    bool null_cond;
  };

  explicit RecordingBackend(DenoiserBackend& inner) : inner_(inner) {}

  Shape latent_shape() const override { return inner_.latent_shape(); }
  std::vector<SelfAttentionSite>& sites() override { return inner_.sites(); }
  const std::vector<SelfAttentionSite>& sites() const override { return inner_.sites(); }
  TextCondition null_condition() const override { return inner_.null_condition(); }

  std::vector<Call> calls;

 protected:
  ad::Var forward(const ad::Var& z, int t, const TextCondition& cond, const AttentionHooks* hooks) override {
    calls.push_back({z.value(), t, cond.is_null});
    return inner_.predict(z, t, cond, hooks);
  }

 private:
  DenoiserBackend& inner_;
};

}  // namespace dualedit::testing
