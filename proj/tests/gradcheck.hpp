#pragma once

#include <string>
#include <vector>

namespace testing {

struct GradCheck {
  std::string name;
  double rel_error;
};

// Analytic backward passes of the float path against central differences,
// each reported as a norm-wise relative error.
std::vector<GradCheck> float_path_gradchecks(unsigned seed);

// Relative error of the magnitude gradient of binarize against a finite
// difference; the loss is linear in the magnitude, so the difference is exact
// up to rounding.
double magnitude_gradcheck(unsigned seed);

}  // namespace testing
