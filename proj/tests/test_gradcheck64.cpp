// Built only against the double-precision core; the tighter tolerance is the
// point of that build.
#include <doctest.h>

#include "capsnet/gradcheck.hpp"

static_assert(sizeof(capsnet::real) == 8, "this suite requires the 64-bit core");

TEST_CASE("gradcheck at 64-bit precision: tolerance 1e-5" * doctest::timeout(900)) {
  CHECK(capsnet::default_gradcheck_tolerance() == 1e-5);
  capsnet::GradCheckOptions opts;
  opts.seed = 1;
  for (const auto& r : capsnet::run_gradcheck(opts)) {
    INFO(r.layer, ": worst ", r.max_rel_err);
    CHECK(r.pass);
  }
}
