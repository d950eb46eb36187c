// Copyright 2026 The cdsm-fusion Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#ifndef CDSM_VERSION
#define CDSM_VERSION "0.1.0"
#endif

namespace cdsm {

inline constexpr const char* kVersion = CDSM_VERSION;

}  // namespace cdsm
