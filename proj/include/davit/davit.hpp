#pragma once

// Umbrella header: the whole library in one include.

#include "tensor.hpp"     // IWYU pragma: export
#include "rng.hpp"        // IWYU pragma: export
#include "tape.hpp"       // IWYU pragma: export
#include "ops.hpp"        // IWYU pragma: export
#include "grad_check.hpp" // IWYU pragma: export
#include "io.hpp"         // IWYU pragma: export
#include "attention.hpp"  // IWYU pragma: export
#include "oracles.hpp"    // IWYU pragma: export
#include "model.hpp"      // IWYU pragma: export
#include "analysis.hpp"   // IWYU pragma: export
#include "train.hpp"      // IWYU pragma: export
#include "selftest.hpp"   // IWYU pragma: export
