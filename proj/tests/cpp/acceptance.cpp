// Acceptance suite: runs every acceptance criterion at its stated scale and
// prints one pass/fail line per criterion. Exits non-zero if any fail.

#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "pyramidcast/selfcheck.hpp"

using namespace pyramidcast;

int main() {
  const std::string work_dir = "/tmp/pyramidcast_acceptance";
  std::filesystem::remove_all(work_dir);
  std::filesystem::create_directories(work_dir);

  std::vector<std::pair<std::string, CheckResult>> results;
  auto run = [&](const std::string& tag, CheckResult result) {
    results.emplace_back(tag, std::move(result));
    std::printf("%s %s\n", tag.c_str(), format_check_line(results.back().second).c_str());
    std::fflush(stdout);
  };

  run("C1", check_gradient_correctness());
  run("C2", check_shape_chain());
  run("C3", check_window_locality());
  run("C4", check_attention_normalization(1000));
  run("C5", check_two_stage_freeze(work_dir, 3));
  run("C6", check_determinism(work_dir));
  run("C7", check_hi_sanity(100000));
  run("C8", check_single_batch_overfit(2000, 1e-2));
  run("C9", check_ablation_ordering(work_dir, 40, {1, 2, 3}));
  run("C10", check_scheduler_and_clipping(work_dir));
  run("C11", check_dataset_roundtrip(work_dir));

  int failures = 0;
  for (const auto& [tag, result] : results) {
    if (!result.pass) ++failures;
  }
  std::printf("acceptance: %zu criteria, %d failed\n", results.size(), failures);
  return failures == 0 ? 0 : 1;
}
