// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace kvgate {

struct SelfTestCheck {
  std::string name;
  bool passed = false;
  std::string detail;
};

/// Small, fast invariant checks over the engine. Deterministic.
std::vector<SelfTestCheck> selftest_checks();

/// Prints one "PASS name" or "FAIL name: detail" line per check.
bool run_selftest(std::ostream& out);

}  // namespace kvgate
