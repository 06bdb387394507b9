#ifndef TRAT_GRADCHECK_HPP
#define TRAT_GRADCHECK_HPP

#include <cstdint>
#include <string>
#include <vector>

namespace trat {

struct SuiteResult {
  std::string name;
  int cases = 0;
  // Largest relative error across the suite's cases; the remainder suite
  // stores the largest |ratio - 8| instead, with tolerance 2.
  double worst = 0.0;
  double tolerance = 0.0;
  std::string worst_id;
  bool passed = false;
};

struct GradcheckReport {
  std::string size;
  std::uint64_t seed = 0;
  std::vector<SuiteResult> suites;

  bool all_passed() const;
  // "<suite>/<case>" for the first failed suite, empty when everything passed.
  std::string first_failure() const;
  std::string text() const;
};

// Verification battery over the differentiation stack:
//   reverse-gradient   full parameter gradients vs central finite differences
//   forward-jvp        directional derivatives vs finite differences
//   hvp-quadratic      second directional derivatives vs second differences
//   taylor-remainder   second-order remainder shrinks cubically when t halves
//   row-sum-oracles    final-layer derivative row sums vs finite differences
// size is "tiny" (quick) or "small" (the full battery). inject_relu_fault
// corrupts the relu backward rule in every graph the run builds, which the
// reverse suite must catch.
GradcheckReport run_gradcheck(const std::string& size, std::uint64_t seed,
                              bool inject_relu_fault = false);

}  // namespace trat

#endif  // TRAT_GRADCHECK_HPP
