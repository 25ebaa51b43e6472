#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "bdnet/kernels.hpp"

namespace bdnet {

struct VerifyCase {
  std::string variant;  // binary_regular, binary_dw, dual_dw, multi_dw_N
  Shape input;
  ConvSpec spec;
  bool exact = false;
  double max_diff = 0.0;
};

struct VerifyReport {
  std::vector<VerifyCase> cases;
  std::size_t failures = 0;
  std::size_t count(const std::string& variant) const;
  std::size_t failures_of(const std::string& variant) const;
};

inline const std::vector<std::string>& verify_variants() {
  static const std::vector<std::string> v = {"binary_regular", "binary_dw", "dual_dw",
                                             "multi_dw_1",     "multi_dw_2", "multi_dw_3",
                                             "multi_dw_4"};
  return v;
}

/// Randomized packed-kernel vs float-oracle comparison. Inputs, thresholds
/// and magnitudes are dyadic so every correct result is bit-exact. `pad` is
/// the padding the packed kernels use; the oracle always zero-pads.
VerifyReport verify_kernels(std::size_t cases_per_variant, std::uint64_t seed,
                            PadValue pad = PadValue::Zero);

void write_verify_csv(std::ostream& os, const VerifyReport& r);

}  // namespace bdnet
