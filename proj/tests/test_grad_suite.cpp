#include <set>

#include "doctest.h"
#include "hrdepth/grad_suite.hpp"

using namespace hrdepth;

TEST_CASE("gradient suite covers every group") {
  std::set<std::string> groups, names;
  for (const GradCase& c : grad_suite()) {
    groups.insert(c.group);
    CHECK(names.insert(c.name).second);
  }
  CHECK(groups == std::set<std::string>{"op", "geometry", "loss", "network"});
}

TEST_CASE("gradient suite passes over three seeds") {
  for (const GradSuiteResult& r : run_grad_suite(3)) {
    INFO(r.name << " worst seed " << r.worst_seed << " " << r.error);
    CHECK(r.error.empty());
    CHECK(r.worst <= 1e-5);
  }
}
