// Copyright (C) 2026 The blockquant authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

namespace bq {
inline constexpr const char* kVersion = "0.1.0";
}
