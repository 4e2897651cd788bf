#pragma once

#include <filesystem>
#include <fstream>
#include <iterator>
#include <random>
#include <string>

#include <gtest/gtest.h>

#include "mrfmap/error.hpp"

namespace mrfmap::test {

inline std::filesystem::path source_dir() { return MRFMAP_SOURCE_DIR; }

/// Fresh scratch directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  const auto p = std::filesystem::temp_directory_path() / ("mrfmap_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

inline std::string read_bytes(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

/// Runs f and reports whether it threw mrfmap::Error of the given kind.
template <class F>
::testing::AssertionResult throws_kind(F&& f, mrfmap::ErrorKind kind) {
  try {
    f();
  } catch (const mrfmap::Error& e) {
    if (e.kind() == kind) return ::testing::AssertionSuccess();
    return ::testing::AssertionFailure() << "threw " << e.what();
  } catch (const std::exception& e) {
    return ::testing::AssertionFailure() << "threw foreign exception " << e.what();
  }
  return ::testing::AssertionFailure() << "did not throw";
}

}  // namespace mrfmap::test

#define EXPECT_THROW_KIND(expr, kind) EXPECT_TRUE(::mrfmap::test::throws_kind([&] { (void)(expr); }, ::mrfmap::ErrorKind::kind))
