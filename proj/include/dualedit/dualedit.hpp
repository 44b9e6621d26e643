// Copyright 2026 The dualedit Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "dualedit/adam.hpp"
#include "dualedit/archive.hpp"
#include "dualedit/attention_share.hpp"
#include "dualedit/autograd.hpp"
#include "dualedit/codec.hpp"
#include "dualedit/denoiser.hpp"
#include "dualedit/embedder.hpp"
#include "dualedit/error.hpp"
#include "dualedit/gateway.hpp"
#include "dualedit/image_io.hpp"
#include "dualedit/inversion.hpp"
#include "dualedit/pipeline.hpp"
#include "dualedit/rng.hpp"
#include "dualedit/scheduler.hpp"
#include "dualedit/share_config.hpp"
#include "dualedit/tensor.hpp"
#include "dualedit/toy_data.hpp"
#include "dualedit/toy_denoiser.hpp"
