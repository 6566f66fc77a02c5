#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "headaudit/decomposition.hpp"
#include "headaudit/parallel.hpp"
#include "headaudit/store.hpp"

namespace headaudit {

struct SynthAttribute {
  std::string name;
  std::vector<std::string> values;
  std::vector<double> proportions;  // one per value, sums to 1
  double unknown_fraction = 0.0;    // images left unannotated
};

// A head that adds lambda * (u_value + rho * w_confusion) to every image of
// the target group in an affected class p, with confusion class (p + 1) mod K.
struct PlantedHead {
  HeadId head;
  std::string attribute;
  std::string value;
  double lambda = 0.0;
  std::vector<std::uint32_t> affected_classes;
};

// Geometry: classifier rows w_p, per-class semantic directions t_p and one
// direction u per demographic value are mutually orthonormal (a seeded random
// rotation of the standard basis). Occupation prototypes are
// normalize(w_p + t_p). For an image of class y:
//   initial   = initial_margin * w_y + sigma * noise
//   mlp[l]    = (mlp_margin / L) * w_y
//   head[l,h] = semantic_scale * t_y + head_sigma * noise (+ planted terms)
struct SynthSpec {
  std::size_t n_images = 5000;
  std::size_t n_layers = 24;
  std::size_t n_heads = 16;
  std::size_t embed_dim = 64;
  std::vector<std::string> class_names;
  std::vector<SynthAttribute> attributes;
  std::vector<PlantedHead> planted;
  double sigma = 1.0;
  double head_sigma = 0.01;
  double initial_margin = 3.0;
  double mlp_margin = 3.0;
  double semantic_scale = 30.0;
  double confusion_weight = 1.0;  // rho
  std::size_t n_general_texts = 200;
  std::uint64_t seed = 0;
  std::string model_tag = "synthetic";

  std::size_t n_classes() const { return class_names.size(); }
  // Throws Error(kConfig) on any infeasible or inconsistent field.
  void validate() const;
};

// 8 classes, gender and age attributes, 4 gender heads planted in the last
// four layers with lambda = 2 on 4 of the classes. Seed 0 uses heads
// L21H2, L21H10, L22H14, L23H4; other seeds draw late-layer heads.
SynthSpec concentrated_spec(std::uint64_t seed = 0);
// Same classes, groups and total signal as concentrated_spec(seed), spread
// evenly over `n_heads` heads of the last eight layers.
SynthSpec diffuse_spec(std::uint64_t seed = 0, std::size_t n_heads = 32);

nlohmann::ordered_json spec_to_json(const SynthSpec& spec);
SynthSpec spec_from_json(const nlohmann::json& j);
SynthSpec load_spec(const std::filesystem::path& path);

struct AnalyticClass {
  std::uint32_t true_class = 0;
  std::vector<std::string> groups;     // groups reaching the minimum size
  std::vector<std::uint64_t> counts;   // realized images per group
  std::optional<double> v_baseline;    // V of the expected contingency table
  std::optional<double> v_ablated;     // same, with the planted set ablated
};

struct GroundTruth {
  std::string attribute;                // attribute of the planted heads
  std::vector<HeadId> planted;          // sorted
  std::vector<AnalyticClass> classes;   // one per class index
  std::vector<double> expected_gaps;    // per planted head, largest over affected classes
  double logit_sigma_baseline = 0.0;
  double logit_sigma_ablated = 0.0;

  // Mean over `classes` of v_ablated - v_baseline; nullopt when no listed
  // class has both values.
  std::optional<double> analytic_delta_v(std::span<const std::uint32_t> classes) const;
};

struct SynthOutput {
  HeadContributionStore store;
  PrototypeSet prototypes;
  ClassifierMatrix classifier;
  GroundTruth truth;
};

// Deterministic in spec.seed and independent of the worker count.
SynthOutput generate(const SynthSpec& spec, unsigned workers = default_workers(),
                     std::size_t min_group_size = 20);

nlohmann::ordered_json truth_to_json(const GroundTruth& truth);

// Writes store/, prototypes/, classifier/, spec.json and truth.json.
void save_synth(const SynthOutput& out, const SynthSpec& spec,
                const std::filesystem::path& dir);

// Brute-force per-class chi-squared and V, written independently of the stats
// module for cross-checking it: direct tallies into maps, 64-bit arithmetic.
struct OracleClass {
  std::uint32_t true_class = 0;
  bool testable = false;  // >= 2 groups and >= 2 nonzero columns
  double chi2 = 0.0;
  double v = 0.0;
  std::uint64_t n = 0;
};

std::vector<OracleClass> oracle_metrics(const HeadContributionStore& store,
                                        std::span<const std::uint32_t> predictions,
                                        const std::string& attribute,
                                        std::size_t min_group_size = 20);

}  // namespace headaudit
