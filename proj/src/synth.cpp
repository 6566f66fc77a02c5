#include "headaudit/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numbers>
#include <numeric>
#include <set>

#include <Eigen/Dense>

#include "blob_io.hpp"
#include "headaudit/error.hpp"
#include "headaudit/rng.hpp"

namespace headaudit {

namespace {

using nlohmann::json;
using nlohmann::ordered_json;

// RNG streams outside the per-image range [0, n_images).
constexpr std::uint64_t kRotationStream = std::uint64_t{1} << 62;
constexpr std::uint64_t kDictionaryStream = kRotationStream + 1;
constexpr std::uint64_t kPresetStream = kRotationStream + 2;

[[noreturn]] void config_error(const std::string& message) {
  throw Error(Errc::kConfig, "synth spec: " + message);
}

std::vector<std::string> preset_classes() {
  return {"doctor", "nurse",  "craftsman", "teacher",
          "lawyer", "chef",   "farmer",    "soldier"};
}

std::vector<SynthAttribute> preset_attributes() {
  return {{"gender", {"male", "female", "nonbinary"}, {0.55, 0.43, 0.02}, 0.0},
          {"age", {"young", "middle", "older"}, {0.30, 0.50, 0.20}, 0.0}};
}

SynthSpec preset_base(std::uint64_t seed) {
  SynthSpec s;
  s.class_names = preset_classes();
  s.attributes = preset_attributes();
  s.seed = seed;
  return s;
}

// First `count` of the shuffled slots in layers [first_layer, L), sorted.
std::vector<HeadId> draw_heads(Rng& rng, std::size_t first_layer,
                               std::size_t n_layers, std::size_t n_heads,
                               std::size_t count) {
  std::vector<HeadId> slots;
  for (std::size_t l = first_layer; l < n_layers; ++l) {
    for (std::size_t h = 0; h < n_heads; ++h) {
      slots.push_back({static_cast<std::uint32_t>(l), static_cast<std::uint32_t>(h)});
    }
  }
  rng.shuffle(std::span<HeadId>(slots));
  slots.resize(count);
  std::sort(slots.begin(), slots.end());
  return slots;
}

std::size_t attribute_of(const SynthSpec& spec, const std::string& name) {
  for (std::size_t a = 0; a < spec.attributes.size(); ++a) {
    if (spec.attributes[a].name == name) return a;
  }
  config_error("unknown attribute '" + name + "'");
}

std::size_t value_of(const SynthAttribute& attr, const std::string& value) {
  for (std::size_t v = 0; v < attr.values.size(); ++v) {
    if (attr.values[v] == value) return v;
  }
  config_error("attribute '" + attr.name + "' has no value '" + value + "'");
}

double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }

// P(argmax = k) for logits mean + s * independent standard normals.
std::vector<double> argmax_probabilities(const std::vector<double>& mean, double s) {
  const std::size_t K = mean.size();
  std::vector<double> p(K, 0.0);
  if (s == 0.0) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < K; ++k) {
      if (mean[k] > mean[best]) best = k;
    }
    p[best] = 1.0;
    return p;
  }
  // Composite Simpson over z in [-10, 10].
  constexpr int kIntervals = 4000;
  constexpr double kLo = -10.0;
  constexpr double kHi = 10.0;
  const double h = (kHi - kLo) / kIntervals;
  for (std::size_t k = 0; k < K; ++k) {
    double acc = 0.0;
    for (int i = 0; i <= kIntervals; ++i) {
      const double z = kLo + h * i;
      double f = std::exp(-0.5 * z * z) / std::sqrt(2.0 * std::numbers::pi);
      for (std::size_t j = 0; j < K && f > 0.0; ++j) {
        if (j != k) f *= normal_cdf((mean[k] - mean[j]) / s + z);
      }
      const double w = (i == 0 || i == kIntervals) ? 1.0 : (i % 2 ? 4.0 : 2.0);
      acc += w * f;
    }
    p[k] = acc * h / 3.0;
  }
  return p;
}

// V of a real-valued table after dropping all-zero columns; 0 when one column
// is left.
double expected_table_v(const std::vector<std::vector<double>>& table) {
  const std::size_t G = table.size();
  const std::size_t K = table.front().size();
  std::vector<double> rows(G, 0.0), cols(K, 0.0);
  double n = 0.0;
  for (std::size_t g = 0; g < G; ++g) {
    for (std::size_t k = 0; k < K; ++k) {
      rows[g] += table[g][k];
      cols[k] += table[g][k];
      n += table[g][k];
    }
  }
  std::size_t used = 0;
  double chi2 = 0.0;
  for (std::size_t k = 0; k < K; ++k) {
    if (cols[k] <= 0.0) continue;
    ++used;
    for (std::size_t g = 0; g < G; ++g) {
      const double e = rows[g] * cols[k] / n;
      chi2 += (table[g][k] - e) * (table[g][k] - e) / e;
    }
  }
  if (used < 2) return 0.0;
  const double m = static_cast<double>(std::min(G, used) - 1);
  return std::sqrt(chi2 / (n * m));
}

}  // namespace

void SynthSpec::validate() const {
  if (n_layers < 1 || n_heads < 1) config_error("need n_layers >= 1 and n_heads >= 1");
  if (embed_dim < 2) config_error("need embed_dim >= 2");
  if (class_names.size() < 2) config_error("need at least 2 classes");
  if (std::set<std::string>(class_names.begin(), class_names.end()).size() !=
      class_names.size()) {
    config_error("class names must be unique");
  }
  if (attributes.empty()) config_error("need at least one attribute");
  std::size_t n_values = 0;
  std::set<std::string> attr_names;
  for (const auto& a : attributes) {
    if (!attr_names.insert(a.name).second) config_error("duplicate attribute " + a.name);
    if (a.values.size() < 2) config_error("attribute " + a.name + " needs >= 2 values");
    if (a.proportions.size() != a.values.size()) {
      config_error("attribute " + a.name + " needs one proportion per value");
    }
    double sum = 0.0;
    for (double p : a.proportions) {
      if (!(p >= 0.0)) config_error("attribute " + a.name + " has a negative proportion");
      sum += p;
    }
    if (std::abs(sum - 1.0) > 1e-9) {
      config_error("proportions of " + a.name + " sum to " + std::to_string(sum));
    }
    if (!(a.unknown_fraction >= 0.0 && a.unknown_fraction < 1.0)) {
      config_error("unknown_fraction of " + a.name + " must lie in [0, 1)");
    }
    n_values += a.values.size();
  }
  const std::size_t directions = 2 * class_names.size() + n_values;
  if (directions > embed_dim) {
    config_error("needs " + std::to_string(directions) +
                 " orthogonal directions (2 per class + 1 per demographic value) "
                 "but embed_dim is " + std::to_string(embed_dim));
  }
  if (!(sigma >= 0.0) || !(head_sigma >= 0.0)) config_error("noise scales must be >= 0");
  for (double x : {initial_margin, mlp_margin, semantic_scale, confusion_weight}) {
    if (!std::isfinite(x)) config_error("margins and scales must be finite");
  }
  std::set<HeadId> seen;
  for (const auto& p : planted) {
    if (p.head.layer >= n_layers || p.head.head >= n_heads) {
      config_error("planted head " + to_string(p.head) + " out of range");
    }
    if (!seen.insert(p.head).second) {
      config_error("planted head " + to_string(p.head) + " listed twice");
    }
    if (!(p.lambda >= 0.0) || !std::isfinite(p.lambda)) {
      config_error("planted lambda must be finite and >= 0");
    }
    value_of(attributes[attribute_of(*this, p.attribute)], p.value);
    if (p.attribute != planted.front().attribute) {
      config_error("all planted heads must target the same attribute");
    }
    if (p.affected_classes.empty()) {
      config_error("planted head " + to_string(p.head) + " affects no class");
    }
    for (auto c : p.affected_classes) {
      if (c >= class_names.size()) config_error("affected class index out of range");
    }
  }
}

SynthSpec concentrated_spec(std::uint64_t seed) {
  SynthSpec s = preset_base(seed);
  std::vector<HeadId> heads;
  std::vector<std::uint32_t> affected;
  if (seed == 0) {
    heads = {{21, 2}, {21, 10}, {22, 14}, {23, 4}};
    affected = {0, 2, 4, 6};
  } else {
    Rng rng(derive_seed(seed, kPresetStream));
    heads = draw_heads(rng, s.n_layers - 4, s.n_layers, s.n_heads, 4);
    std::vector<std::uint32_t> classes(s.n_classes());
    std::iota(classes.begin(), classes.end(), 0u);
    rng.shuffle(std::span<std::uint32_t>(classes));
    affected.assign(classes.begin(), classes.begin() + 4);
    std::sort(affected.begin(), affected.end());
  }
  for (const auto& h : heads) s.planted.push_back({h, "gender", "female", 2.0, affected});
  return s;
}

SynthSpec diffuse_spec(std::uint64_t seed, std::size_t n_heads) {
  const SynthSpec concentrated = concentrated_spec(seed);
  SynthSpec s = preset_base(seed);
  double total = 0.0;
  for (const auto& p : concentrated.planted) total += p.lambda;
  Rng rng(derive_seed(seed, kPresetStream + 1));
  const std::size_t first = s.n_layers >= 8 ? s.n_layers - 8 : 0;
  if (n_heads == 0 || n_heads > (s.n_layers - first) * s.n_heads) {
    config_error("diffuse head count does not fit the last eight layers");
  }
  const auto& proto = concentrated.planted.front();
  for (const auto& h : draw_heads(rng, first, s.n_layers, s.n_heads, n_heads)) {
    s.planted.push_back({h, proto.attribute, proto.value,
                         total / static_cast<double>(n_heads), proto.affected_classes});
  }
  return s;
}

ordered_json spec_to_json(const SynthSpec& spec) {
  ordered_json j;
  j["n_images"] = spec.n_images;
  j["n_layers"] = spec.n_layers;
  j["n_heads"] = spec.n_heads;
  j["embed_dim"] = spec.embed_dim;
  j["class_names"] = spec.class_names;
  j["attributes"] = ordered_json::array();
  for (const auto& a : spec.attributes) {
    j["attributes"].push_back({{"name", a.name},
                               {"values", a.values},
                               {"proportions", a.proportions},
                               {"unknown_fraction", a.unknown_fraction}});
  }
  j["planted"] = ordered_json::array();
  for (const auto& p : spec.planted) {
    std::vector<std::string> affected;
    for (auto c : p.affected_classes) affected.push_back(spec.class_names.at(c));
    j["planted"].push_back({{"head", to_string(p.head)},
                            {"attribute", p.attribute},
                            {"value", p.value},
                            {"lambda", p.lambda},
                            {"affected_classes", affected}});
  }
  j["sigma"] = spec.sigma;
  j["head_sigma"] = spec.head_sigma;
  j["initial_margin"] = spec.initial_margin;
  j["mlp_margin"] = spec.mlp_margin;
  j["semantic_scale"] = spec.semantic_scale;
  j["confusion_weight"] = spec.confusion_weight;
  j["n_general_texts"] = spec.n_general_texts;
  j["seed"] = spec.seed;
  j["model_tag"] = spec.model_tag;
  return j;
}

SynthSpec spec_from_json(const json& j) {
  static const std::set<std::string> known = {
      "preset", "n_images", "n_layers", "n_heads", "embed_dim", "class_names",
      "attributes", "planted", "sigma", "head_sigma", "initial_margin",
      "mlp_margin", "semantic_scale", "confusion_weight", "n_general_texts",
      "seed", "model_tag", "diffuse_heads"};
  if (!j.is_object()) config_error("expected a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (!known.count(key)) config_error("unknown field '" + key + "'");
  }
  try {
    const std::uint64_t seed = j.value("seed", std::uint64_t{0});
    const std::string preset = j.value("preset", std::string("concentrated"));
    SynthSpec s;
    if (preset == "concentrated") {
      s = concentrated_spec(seed);
    } else if (preset == "diffuse") {
      s = diffuse_spec(seed, j.value("diffuse_heads", std::size_t{32}));
    } else if (preset == "none") {
      s = preset_base(seed);
    } else {
      config_error("preset must be concentrated, diffuse or none");
    }
    s.n_images = j.value("n_images", s.n_images);
    s.n_layers = j.value("n_layers", s.n_layers);
    s.n_heads = j.value("n_heads", s.n_heads);
    s.embed_dim = j.value("embed_dim", s.embed_dim);
    if (j.contains("class_names")) {
      s.class_names = j.at("class_names").get<std::vector<std::string>>();
    }
    if (j.contains("attributes")) {
      s.attributes.clear();
      for (const auto& a : j.at("attributes")) {
        SynthAttribute attr;
        attr.name = a.at("name").get<std::string>();
        attr.values = a.at("values").get<std::vector<std::string>>();
        attr.proportions = a.at("proportions").get<std::vector<double>>();
        attr.unknown_fraction = a.value("unknown_fraction", 0.0);
        s.attributes.push_back(std::move(attr));
      }
    }
    if (j.contains("planted")) {
      s.planted.clear();
      for (const auto& p : j.at("planted")) {
        PlantedHead ph;
        ph.head = parse_head_id(p.at("head").get<std::string>());
        ph.attribute = p.at("attribute").get<std::string>();
        ph.value = p.at("value").get<std::string>();
        ph.lambda = p.at("lambda").get<double>();
        for (const auto& c : p.at("affected_classes")) {
          if (c.is_number_integer()) {
            if (c.get<std::int64_t>() < 0) config_error("negative affected class index");
            ph.affected_classes.push_back(c.get<std::uint32_t>());
            continue;
          }
          const auto name = c.get<std::string>();
          const auto it = std::find(s.class_names.begin(), s.class_names.end(), name);
          if (it == s.class_names.end()) config_error("unknown affected class " + name);
          ph.affected_classes.push_back(
              static_cast<std::uint32_t>(it - s.class_names.begin()));
        }
        s.planted.push_back(std::move(ph));
      }
    }
    s.sigma = j.value("sigma", s.sigma);
    s.head_sigma = j.value("head_sigma", s.head_sigma);
    s.initial_margin = j.value("initial_margin", s.initial_margin);
    s.mlp_margin = j.value("mlp_margin", s.mlp_margin);
    s.semantic_scale = j.value("semantic_scale", s.semantic_scale);
    s.confusion_weight = j.value("confusion_weight", s.confusion_weight);
    s.n_general_texts = j.value("n_general_texts", s.n_general_texts);
    s.model_tag = j.value("model_tag", s.model_tag);
    s.validate();
    return s;
  } catch (const json::exception& e) {
    config_error(e.what());
  }
}

SynthSpec load_spec(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::kConfig, "cannot open synth spec " + path.string());
  try {
    return spec_from_json(json::parse(in));
  } catch (const json::parse_error& e) {
    throw Error(Errc::kConfig, "synth spec " + path.string() + ": " + e.what());
  }
}

std::optional<double> GroundTruth::analytic_delta_v(
    std::span<const std::uint32_t> which) const {
  double sum = 0.0;
  std::size_t used = 0;
  for (auto k : which) {
    const auto& c = classes.at(k);
    if (c.v_baseline && c.v_ablated) {
      sum += *c.v_ablated - *c.v_baseline;
      ++used;
    }
  }
  if (used == 0) return std::nullopt;
  return sum / static_cast<double>(used);
}

SynthOutput generate(const SynthSpec& spec, unsigned workers,
                     std::size_t min_group_size) {
  spec.validate();
  const std::size_t n = spec.n_images;
  const std::size_t L = spec.n_layers;
  const std::size_t H = spec.n_heads;
  const std::size_t d = spec.embed_dim;
  const std::size_t K = spec.n_classes();
  const std::size_t A = spec.attributes.size();

  // Orthonormal directions from a seeded random rotation.
  Eigen::MatrixXd gauss(d, d);
  {
    Rng rng(derive_seed(spec.seed, kRotationStream));
    for (std::size_t c = 0; c < d; ++c) {
      for (std::size_t r = 0; r < d; ++r) {
        gauss(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = rng.normal();
      }
    }
  }
  const Eigen::MatrixXd Q = Eigen::HouseholderQR<Eigen::MatrixXd>(gauss).householderQ();
  auto column = [&](std::size_t c) -> std::vector<double> {
    std::vector<double> v(d);
    for (std::size_t k = 0; k < d; ++k) {
      v[k] = Q(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(c));
    }
    return v;
  };
  std::vector<std::vector<double>> w(K), t(K);
  for (std::size_t p = 0; p < K; ++p) {
    w[p] = column(p);
    t[p] = column(K + p);
  }
  std::vector<std::vector<std::vector<double>>> u(A);
  std::size_t next = 2 * K;
  for (std::size_t a = 0; a < A; ++a) {
    for (std::size_t v = 0; v < spec.attributes[a].values.size(); ++v) {
      u[a].push_back(column(next++));
    }
  }

  StoreManifest manifest;
  manifest.n_images = n;
  manifest.n_layers = L;
  manifest.n_heads = H;
  manifest.embed_dim = d;
  manifest.class_names = spec.class_names;
  for (const auto& a : spec.attributes) manifest.attributes.push_back({a.name, a.values});
  manifest.model_tag = spec.model_tag;
  StoreTensors tensors = StoreTensors::zeros(manifest, true);

  struct Plant {
    std::size_t attribute;
    std::uint32_t value;
    double lambda;
    std::vector<bool> affected;
  };
  std::vector<Plant> plants;
  std::vector<std::vector<std::size_t>> slot_plants(L * H);
  for (const auto& p : spec.planted) {
    const std::size_t a = attribute_of(spec, p.attribute);
    Plant pl{a, static_cast<std::uint32_t>(value_of(spec.attributes[a], p.value)),
             p.lambda, std::vector<bool>(K, false)};
    for (auto c : p.affected_classes) pl.affected[c] = true;
    slot_plants[p.head.layer * H + p.head.head].push_back(plants.size());
    plants.push_back(std::move(pl));
  }

  const double mlp_step = spec.mlp_margin / static_cast<double>(L);
  parallel_for(n, workers, [&](std::size_t begin, std::size_t end) {
    std::vector<double> buf(d), ref(d);
    for (std::size_t i = begin; i < end; ++i) {
      Rng rng(derive_seed(spec.seed, i));
      const auto y = static_cast<std::uint32_t>(i % K);
      tensors.labels[i] = y;
      for (std::size_t a = 0; a < A; ++a) {
        const auto& attr = spec.attributes[a];
        std::uint32_t value = static_cast<std::uint32_t>(attr.values.size());
        const bool unknown = rng.uniform01() < attr.unknown_fraction;
        const double draw = rng.uniform01();
        if (!unknown) {
          double cum = 0.0;
          value = static_cast<std::uint32_t>(attr.values.size() - 1);
          for (std::size_t v = 0; v < attr.values.size(); ++v) {
            cum += attr.proportions[v];
            if (draw < cum) {
              value = static_cast<std::uint32_t>(v);
              break;
            }
          }
        }
        tensors.demographics[i * A + a] = value;
      }

      for (std::size_t k = 0; k < d; ++k) {
        buf[k] = spec.initial_margin * w[y][k] + spec.sigma * rng.normal();
        tensors.initial[i * d + k] = static_cast<float>(buf[k]);
        ref[k] = buf[k];
      }
      for (std::size_t l = 0; l < L; ++l) {
        float* out = &tensors.mlp[(i * L + l) * d];
        for (std::size_t k = 0; k < d; ++k) {
          const double x = mlp_step * w[y][k];
          out[k] = static_cast<float>(x);
          ref[k] += x;
        }
      }
      const std::uint32_t confusion = static_cast<std::uint32_t>((y + 1) % K);
      for (std::size_t slot = 0; slot < L * H; ++slot) {
        for (std::size_t k = 0; k < d; ++k) {
          buf[k] = spec.semantic_scale * t[y][k];
          if (spec.head_sigma > 0.0) buf[k] += spec.head_sigma * rng.normal();
        }
        for (std::size_t pi : slot_plants[slot]) {
          const Plant& pl = plants[pi];
          if (!pl.affected[y] || tensors.demographics[i * A + pl.attribute] != pl.value) {
            continue;
          }
          const auto& dir = u[pl.attribute][pl.value];
          for (std::size_t k = 0; k < d; ++k) {
            buf[k] += pl.lambda * (dir[k] + spec.confusion_weight * w[confusion][k]);
          }
        }
        float* out = &tensors.heads[(i * L * H + slot) * d];
        for (std::size_t k = 0; k < d; ++k) {
          out[k] = static_cast<float>(buf[k]);
          ref[k] += buf[k];
        }
      }
      for (std::size_t k = 0; k < d; ++k) tensors.reference[i * d + k] = static_cast<float>(ref[k]);
    }
  });

  // Prototypes, dictionary and classifier.
  auto to_float_row = [](RowMatrix<float>& m, std::size_t r, const std::vector<double>& v) {
    for (std::size_t k = 0; k < v.size(); ++k) m(r, k) = static_cast<float>(v[k]);
  };
  auto normalized = [](std::vector<double> v) {
    double s = 0.0;
    for (double x : v) s += x * x;
    s = std::sqrt(s);
    for (double& x : v) x /= s;
    return v;
  };
  PrototypeSet protos;
  protos.embed_dim = d;
  protos.occupation_names = spec.class_names;
  protos.occupation = RowMatrix<float>(K, d);
  std::vector<std::vector<double>> occ(K);
  for (std::size_t p = 0; p < K; ++p) {
    std::vector<double> v(d);
    for (std::size_t k = 0; k < d; ++k) v[k] = w[p][k] + t[p][k];
    occ[p] = normalized(std::move(v));
    to_float_row(protos.occupation, p, occ[p]);
  }
  protos.attributes = manifest.attributes;
  for (std::size_t a = 0; a < A; ++a) {
    RowMatrix<float> m(u[a].size(), d);
    for (std::size_t v = 0; v < u[a].size(); ++v) to_float_row(m, v, u[a][v]);
    protos.demographic.push_back(std::move(m));
  }

  std::vector<std::vector<double>> rows;
  {
    Rng rng(derive_seed(spec.seed, kDictionaryStream));
    for (std::size_t g = 0; g < spec.n_general_texts; ++g) {
      std::vector<double> v(d);
      for (auto& x : v) x = rng.normal();
      char name[32];
      std::snprintf(name, sizeof name, "general_%04zu", g);
      protos.dictionary_entries.push_back({name, TextCategory::kGeneral, "", "", ""});
      rows.push_back(normalized(std::move(v)));
    }
  }
  for (std::size_t p = 0; p < K; ++p) {
    protos.dictionary_entries.push_back(
        {"context_" + spec.class_names[p], TextCategory::kGeneral, "", "", ""});
    rows.push_back(t[p]);
  }
  for (std::size_t p = 0; p < K; ++p) {
    protos.dictionary_entries.push_back({"occupation_" + spec.class_names[p],
                                         TextCategory::kOccupation, spec.class_names[p],
                                         "", ""});
    rows.push_back(occ[p]);
  }
  for (std::size_t a = 0; a < A; ++a) {
    const auto& attr = spec.attributes[a];
    for (std::size_t v = 0; v < attr.values.size(); ++v) {
      protos.dictionary_entries.push_back({attr.name + "_" + attr.values[v],
                                           TextCategory::kDemographic, "", attr.name,
                                           attr.values[v]});
      rows.push_back(u[a][v]);
    }
  }
  protos.dictionary = RowMatrix<float>(rows.size(), d);
  for (std::size_t r = 0; r < rows.size(); ++r) to_float_row(protos.dictionary, r, rows[r]);

  ClassifierMatrix classifier;
  classifier.class_names = spec.class_names;
  classifier.weights = RowMatrix<float>(K, d);
  for (std::size_t p = 0; p < K; ++p) to_float_row(classifier.weights, p, w[p]);

  // Ground truth.
  GroundTruth truth;
  truth.attribute = spec.planted.empty() ? spec.attributes.front().name
                                         : spec.planted.front().attribute;
  const std::size_t ta = attribute_of(spec, truth.attribute);
  const auto& tattr = spec.attributes[ta];
  for (const auto& p : spec.planted) truth.planted.push_back(p.head);
  std::sort(truth.planted.begin(), truth.planted.end());

  const std::size_t V = tattr.values.size();
  std::vector<std::vector<std::uint64_t>> group_counts(K, std::vector<std::uint64_t>(V + 1, 0));
  std::vector<std::uint64_t> class_counts(K, 0);
  for (std::size_t i = 0; i < n; ++i) {
    ++class_counts[tensors.labels[i]];
    ++group_counts[tensors.labels[i]][tensors.demographics[i * A + ta]];
  }

  const double s_base = std::sqrt(spec.sigma * spec.sigma +
                                  static_cast<double>(L * H) * spec.head_sigma * spec.head_sigma);
  const double s_abl = std::sqrt(
      spec.sigma * spec.sigma +
      static_cast<double>(L * H - truth.planted.size()) * spec.head_sigma * spec.head_sigma);
  truth.logit_sigma_baseline = s_base;
  truth.logit_sigma_ablated = s_abl;

  // Logit shift every image receives once the planted heads carry their means.
  std::vector<double> mean_shift(K, 0.0);
  for (const Plant& pl : plants) {
    for (std::size_t p = 0; p < K; ++p) {
      if (!pl.affected[p] || n == 0) continue;
      const double frac =
          static_cast<double>(group_counts[p][pl.value]) / static_cast<double>(n);
      mean_shift[(p + 1) % K] += pl.lambda * spec.confusion_weight * frac;
    }
  }

  for (std::size_t p = 0; p < K; ++p) {
    AnalyticClass ac;
    ac.true_class = static_cast<std::uint32_t>(p);
    std::vector<std::vector<double>> base_table, abl_table;
    for (std::size_t g = 0; g < V; ++g) {
      const auto count = group_counts[p][g];
      if (count == 0 || count < min_group_size) continue;
      ac.groups.push_back(tattr.values[g]);
      ac.counts.push_back(count);
      std::vector<double> mu(K, 0.0);
      mu[p] = spec.initial_margin + spec.mlp_margin;
      std::vector<double> mu_abl = mu;
      for (std::size_t k = 0; k < K; ++k) mu_abl[k] += mean_shift[k];
      for (const Plant& pl : plants) {
        if (pl.affected[p] && pl.value == g) {
          mu[(p + 1) % K] += pl.lambda * spec.confusion_weight;
        }
      }
      auto pb = argmax_probabilities(mu, s_base);
      auto pa = argmax_probabilities(mu_abl, s_abl);
      for (auto& x : pb) x *= static_cast<double>(count);
      for (auto& x : pa) x *= static_cast<double>(count);
      base_table.push_back(std::move(pb));
      abl_table.push_back(std::move(pa));
    }
    if (ac.groups.size() >= 2) {
      ac.v_baseline = expected_table_v(base_table);
      ac.v_ablated = expected_table_v(abl_table);
    }
    truth.classes.push_back(std::move(ac));
  }

  for (const auto& p : spec.planted) {
    const Plant& pl = plants[&p - spec.planted.data()];
    double best = 0.0;
    for (auto c : p.affected_classes) {
      if (class_counts[c] == 0) continue;
      const double f = static_cast<double>(group_counts[c][pl.value]) /
                       static_cast<double>(class_counts[c]);
      const double signal = f * p.lambda;
      const double norm =
          std::sqrt(spec.semantic_scale * spec.semantic_scale +
                    signal * signal * (1.0 + spec.confusion_weight * spec.confusion_weight));
      if (norm > 0.0) best = std::max(best, signal / norm);
    }
    truth.expected_gaps.push_back(best);
  }

  HeadContributionStore store(std::move(manifest), std::move(tensors));
  protos.validate();
  classifier.validate();
  return {std::move(store), std::move(protos), std::move(classifier), std::move(truth)};
}

ordered_json truth_to_json(const GroundTruth& truth) {
  ordered_json j;
  j["attribute"] = truth.attribute;
  std::vector<std::string> heads;
  for (const auto& h : truth.planted) heads.push_back(to_string(h));
  j["planted"] = heads;
  j["expected_gaps"] = truth.expected_gaps;
  j["logit_sigma_baseline"] = truth.logit_sigma_baseline;
  j["logit_sigma_ablated"] = truth.logit_sigma_ablated;
  j["classes"] = ordered_json::array();
  for (const auto& c : truth.classes) {
    ordered_json row;
    row["class"] = c.true_class;
    row["groups"] = c.groups;
    row["counts"] = c.counts;
    row["v_baseline"] = c.v_baseline ? ordered_json(*c.v_baseline) : ordered_json(nullptr);
    row["v_ablated"] = c.v_ablated ? ordered_json(*c.v_ablated) : ordered_json(nullptr);
    j["classes"].push_back(std::move(row));
  }
  return j;
}

void save_synth(const SynthOutput& out, const SynthSpec& spec,
                const std::filesystem::path& dir) {
  detail::ensure_directory(dir);
  save_store(out.store, dir / "store");
  save_prototypes(out.prototypes, dir / "prototypes");
  save_classifier(out.classifier, dir / "classifier");
  for (const auto& [name, doc] :
       {std::pair{"spec.json", spec_to_json(spec)}, {"truth.json", truth_to_json(out.truth)}}) {
    std::ofstream f(dir / name);
    f << doc.dump(2) << '\n';
    if (!f) throw Error(Errc::kOutput, "cannot write " + (dir / name).string());
  }
}

std::vector<OracleClass> oracle_metrics(const HeadContributionStore& store,
                                        std::span<const std::uint32_t> predictions,
                                        const std::string& attribute,
                                        std::size_t min_group_size) {
  const auto& attrs = store.manifest().attributes;
  std::size_t a = attrs.size();
  for (std::size_t i = 0; i < attrs.size(); ++i) {
    if (attrs[i].name == attribute) a = i;
  }
  if (a == attrs.size()) throw Error(Errc::kInvalidArgument, "unknown attribute " + attribute);
  const std::uint32_t unknown = static_cast<std::uint32_t>(attrs[a].values.size());

  std::vector<OracleClass> out;
  for (std::uint32_t c = 0; c < store.n_classes(); ++c) {
    std::map<std::uint32_t, std::map<std::uint32_t, std::uint64_t>> tally;
    for (std::size_t i = 0; i < store.n_images(); ++i) {
      if (store.true_class(i) != c) continue;
      const auto g = store.demographic(i, a);
      if (g == unknown) continue;
      ++tally[g][predictions[i]];
    }
    std::map<std::uint32_t, std::map<std::uint32_t, std::uint64_t>> kept;
    for (const auto& [g, row] : tally) {
      std::uint64_t total = 0;
      for (const auto& [_, count] : row) total += count;
      if (total >= min_group_size && total > 0) kept[g] = row;
    }
    std::map<std::uint32_t, std::uint64_t> col_totals;
    std::map<std::uint32_t, std::uint64_t> row_totals;
    std::uint64_t n = 0;
    for (const auto& [g, row] : kept) {
      for (const auto& [k, count] : row) {
        if (count == 0) continue;
        col_totals[k] += count;
        row_totals[g] += count;
        n += count;
      }
    }
    OracleClass oc;
    oc.true_class = c;
    oc.n = n;
    oc.testable = kept.size() >= 2 && col_totals.size() >= 2;
    if (oc.testable) {
      long double chi2 = 0.0L;
      for (const auto& [g, r] : row_totals) {
        for (const auto& [k, col] : col_totals) {
          const long double e = static_cast<long double>(r) * col / n;
          const auto it = kept[g].find(k);
          const long double o = it == kept[g].end() ? 0.0L : it->second;
          chi2 += (o - e) * (o - e) / e;
        }
      }
      oc.chi2 = static_cast<double>(chi2);
      const std::size_t m = std::min(kept.size(), col_totals.size()) - 1;
      oc.v = std::sqrt(oc.chi2 / (static_cast<double>(n) * static_cast<double>(m)));
    }
    out.push_back(oc);
  }
  return out;
}

}  // namespace headaudit
