#pragma once

#include <cstdlib>
#include <fstream>
#include <sstream>
#include <string>

#include <gtest/gtest.h>

namespace rbd::testing {

// Compares `text` with tests/golden/<name>. Setting RBD_UPDATE_GOLDEN=1
// rewrites the file instead, which is how the goldens were first frozen.
inline void expect_golden(const std::string& name, const std::string& text) {
  const std::string path = std::string(RBD_GOLDEN_DIR) + "/" + name;
  if (const char* update = std::getenv("RBD_UPDATE_GOLDEN"); update != nullptr && std::string(update) == "1") {
    std::ofstream(path, std::ios::binary) << text;
    return;
  }
  std::ifstream in(path, std::ios::binary);
  ASSERT_TRUE(in) << "missing golden file " << path;
  std::ostringstream want;
  want << in.rdbuf();
  EXPECT_EQ(text, want.str()) << "golden mismatch: " << path;
}

}  // namespace rbd::testing
