#pragma once

#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "equirobust/config.hpp"

namespace equirobust::cli {

inline constexpr const char* kVersion = "0.1.0";
inline constexpr const char* kManifestSchema = "equirobust.manifest.v1";

enum ExitCode : int { ok = 0, usage_error = 1, runtime_error = 2 };

/// Bad invocation or inputs that no run could satisfy (exit code 1).
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Train and test splits for a run. CIFAR binaries are read from the
/// directory in EQUIROBUST_DATA; without it the synthetic generator is used
/// and `warning` says so.
struct Splits {
  Dataset train, test;
  std::string warning;
};
Splits load_data(const config::RunConfig& cfg);

/// Entry point behind the equirobust executable. Returns the exit code.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int main(int argc, char** argv);

}  // namespace equirobust::cli
