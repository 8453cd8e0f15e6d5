#pragma once

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "gradcheck.hpp"
#include "imd/core/tensor_io.hpp"

namespace imd::test {

inline bool regenerate_golden() {
  const char* v = std::getenv("IMD_REGEN_GOLDEN");
  return v && std::string(v) == "1";
}

inline std::filesystem::path golden_path(const std::string& name) {
  return std::filesystem::path(IMD_GOLDEN_DIR) / (name + ".imdt");
}

/// Compares against a frozen golden tensor; writes it instead when IMD_REGEN_GOLDEN=1.
template <class T>
void expect_golden(const std::string& name, const Tensor<T>& actual, double tol) {
  const auto path = golden_path(name);
  if (regenerate_golden()) {
    write_tensor(path, actual);
    GTEST_SKIP() << "regenerated " << path;
  }
  ASSERT_TRUE(std::filesystem::exists(path)) << "missing golden " << path << " (run with IMD_REGEN_GOLDEN=1)";
  const auto expected = read_tensor_as<T>(path);
  ASSERT_EQ(expected.shape, actual.shape) << name;
  double worst = 0;
  for (std::size_t i = 0; i < actual.numel(); ++i)
    worst = std::max(worst, std::abs(static_cast<double>(expected.data[i]) - static_cast<double>(actual.data[i])));
  EXPECT_LE(worst, tol) << name;
}

}  // namespace imd::test
