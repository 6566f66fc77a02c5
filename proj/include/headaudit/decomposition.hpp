#pragma once

#include <compare>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "headaudit/parallel.hpp"
#include "headaudit/store.hpp"
#include "headaudit/tensor.hpp"

namespace headaudit {

struct HeadId {
  std::uint32_t layer = 0;
  std::uint32_t head = 0;

  auto operator<=>(const HeadId&) const = default;
};

// "L23H4"
std::string to_string(HeadId id);
// Accepts "L23H4", "23:4" or "23,4".
HeadId parse_head_id(const std::string& text);
std::vector<HeadId> parse_head_list(const std::string& text);
std::string join_heads(const std::vector<HeadId>& heads);

void check_head(const HeadContributionStore& store, HeadId id);

// Heads whose contributions are replaced by their mean over every image of
// the store the plan was built from.
struct AblationPlan {
  std::size_t n_images = 0;
  std::size_t n_layers = 0;
  std::size_t n_heads = 0;
  std::size_t embed_dim = 0;
  std::vector<HeadId> heads;  // sorted, unique
  RowMatrix<double> means;    // [heads.size(), d]

  bool empty() const { return heads.empty(); }
  // -1 when the slot is not ablated.
  std::vector<int> slot_index() const;
};

// Per-head arithmetic mean over all images, accumulated in 64-bit in image
// order. Throws on an empty store or out-of-range heads.
AblationPlan head_means(const HeadContributionStore& store,
                        std::vector<HeadId> heads);

// Recomputes the means and compares them exactly.
bool plan_matches(const HeadContributionStore& store, const AblationPlan& plan);

// initial + sum_l mlp[l] + sum_(l,h) head[l,h], in exactly that order, with
// planned heads replaced by their means.
std::vector<double> reconstruct(const HeadContributionStore& store,
                                std::size_t image);
std::vector<double> reconstruct(const HeadContributionStore& store,
                                std::size_t image, const AblationPlan& plan);

struct AdditivityCheck {
  double max_relative_error = 0.0;  // ||reconstruct - reference|| / ||reference||
  std::size_t worst_image = 0;
};

// Compares every reconstruction with the stored reference representation.
// Throws Error(kInvalidArgument) when the store carries no reference.
AdditivityCheck check_additivity(const HeadContributionStore& store,
                                 unsigned workers = default_workers());

struct Predictions {
  std::vector<std::uint32_t> labels;  // argmax, ties to the lowest class
  RowMatrix<double> logits;           // [n_images, K]

  std::size_t n_correct(const HeadContributionStore& store) const;
  double accuracy(const HeadContributionStore& store) const;
};

Predictions classify(const HeadContributionStore& store,
                     const ClassifierMatrix& classifier,
                     unsigned workers = default_workers());
Predictions classify(const HeadContributionStore& store,
                     const ClassifierMatrix& classifier,
                     const AblationPlan& plan,
                     unsigned workers = default_workers());

// Repeated-ablation evaluator. Caches partial sums at layer boundaries so a
// plan only re-accumulates from the first ablated layer onward; the floating
// point operations performed are the same as classify(), so results are
// bit-identical to it.
class AblationEngine {
 public:
  AblationEngine(const HeadContributionStore& store,
                 const ClassifierMatrix& classifier,
                 unsigned workers = default_workers(),
                 std::size_t checkpoint_budget_bytes = std::size_t{1} << 30);

  const HeadContributionStore& store() const { return store_; }
  const Predictions& baseline() const { return baseline_; }
  unsigned workers() const { return workers_; }

  Predictions evaluate(const AblationPlan& plan) const;
  // Convenience: means computed from the engine's store.
  Predictions ablate(const std::vector<HeadId>& heads) const;

 private:
  const HeadContributionStore& store_;
  const ClassifierMatrix& classifier_;
  unsigned workers_;
  std::vector<std::size_t> checkpoint_layers_;  // ascending, starts at 0
  std::vector<double> checkpoints_;  // [n_images, checkpoint_layers_, d]
  Predictions baseline_;
};

}  // namespace headaudit
