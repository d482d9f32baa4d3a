#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace pyramidcast {

struct CheckResult {
  std::string name;
  bool pass = false;
  std::string detail;
  double seconds = 0.0;
};

// Invariant suites shared by the `selftest` CLI command and the acceptance
// tests. Each check is self-contained and deterministic.

/// Central-difference checks on every differentiable primitive plus full
/// one-sample encoder-loss and decoder-loss graphs on the tiny
/// configuration (P=4, d=4, S=2, window=2, L=2, T_f=8).
CheckResult check_gradient_correctness();

/// Default configuration pyramid (24,32),(12,64),(6,128),(3,256) with head
/// input width 768 and 24 decoder query tokens.
CheckResult check_shape_chain();

/// Block-1 window locality (bit-identical outside the window) and deeper
/// receptive fields against the combinatorial merge/window oracle.
CheckResult check_window_locality();

/// Every self- and cross-attention row sums to 1 within 1e-12 on randomized
/// inputs.
CheckResult check_attention_normalization(int64_t trials);

/// After stage-2 training every stage-1 parameter is byte-identical to its
/// checkpoint.
CheckResult check_two_stage_freeze(const std::string& work_dir,
                                   int64_t stage2_epochs);

/// Two full runs (both stages + evaluate) with one seed produce
/// byte-identical checkpoints and reports.
CheckResult check_determinism(const std::string& work_dir);

/// HI on noiseless period-288 data scores exactly zero; with Gaussian noise
/// its MAE converges to 2*sigma/sqrt(pi).
CheckResult check_hi_sanity(int64_t min_points);

/// Stage-1 training on one fixed batch reaches normalized MAE below the
/// target within the step budget.
CheckResult check_single_batch_overfit(int64_t max_steps, double target);

/// Desk-scale ablation ordering: full beats no_decoder (by at least 5%) and
/// no_hierarchy on median test MAE over the given seeds after a fixed epoch
/// budget.
CheckResult check_ablation_ordering(const std::string& work_dir, int64_t epochs,
                                    const std::vector<uint64_t>& seeds);

/// lr_at reproduces the pinned schedule values and the clipped global norm
/// never exceeds the bound during a short forced-clipping run.
CheckResult check_scheduler_and_clipping(const std::string& work_dir);

/// Dataset save/load bit-exactness plus the pinned split boundaries.
CheckResult check_dataset_roundtrip(const std::string& work_dir);

/// The fast subset used by the `selftest` CLI command.
std::vector<CheckResult> run_selftest(const std::string& work_dir);

std::string format_check_line(const CheckResult& result);

}  // namespace pyramidcast
