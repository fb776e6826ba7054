#include "proxslim/state.hpp"

#include <algorithm>
#include <cmath>

#include "proxslim/errors.hpp"

namespace proxslim {

namespace {
double block_distance_sq(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw ContractError("state blocks differ in length");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}
}  // namespace

double distance_sq(const ModelState& a, const ModelState& b) {
  return block_distance_sq(a.w, b.w) + block_distance_sq(a.gamma, b.gamma) +
         block_distance_sq(a.xi, b.xi);
}

double state_norm(const ModelState& z) {
  double s = 0.0;
  for (const auto* v : {&z.w, &z.gamma, &z.xi})
    for (double x : *v) s += x * x;
  return std::sqrt(s);
}

std::size_t count_exact_zeros(const std::vector<double>& v) {
  return static_cast<std::size_t>(std::count(v.begin(), v.end(), 0.0));
}

void require_consistent(const ModelState& z) {
  if (z.xi.size() != z.gamma.size()) {
    throw ContractError("xi has " + std::to_string(z.xi.size()) + " entries, gamma has " +
                        std::to_string(z.gamma.size()));
  }
  if (z.running_mean.size() != z.gamma.size() || z.running_var.size() != z.gamma.size()) {
    throw ContractError("running statistics do not match the channel count");
  }
}

}  // namespace proxslim
