// Copyright (C) 2026 The blockquant authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace bq {

// Error categories map 1:1 onto CLI exit codes (see tools/bq_main.cpp).
struct load_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct constraint_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct numeric_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct precondition_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Shape mismatches, bad arguments, out-of-range ids.
struct usage_error : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

}  // namespace bq
