#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <unistd.h>

#include "headaudit/rng.hpp"
#include "headaudit/store.hpp"
#include "headaudit/synth.hpp"

namespace testing {

namespace fs = std::filesystem;

class TempDir {
 public:
  TempDir() {
    static std::atomic<int> counter{0};
    path_ = fs::temp_directory_path() /
            ("headaudit_test_" + std::to_string(::getpid()) + "_" +
             std::to_string(counter++));
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const fs::path& path() const { return path_; }
  fs::path operator/(const std::string& name) const { return path_ / name; }

 private:
  fs::path path_;
};

inline headaudit::StoreManifest manifest(std::size_t n, std::size_t L, std::size_t H,
                                         std::size_t d, std::size_t K) {
  headaudit::StoreManifest m;
  m.n_images = n;
  m.n_layers = L;
  m.n_heads = H;
  m.embed_dim = d;
  for (std::size_t k = 0; k < K; ++k) m.class_names.push_back("class" + std::to_string(k));
  m.attributes = {{"gender", {"male", "female", "nonbinary"}},
                  {"age", {"young", "older"}}};
  m.model_tag = "test";
  return m;
}

// Gaussian contributions, uniform labels and demographics (unknowns included).
inline headaudit::HeadContributionStore random_store(std::size_t n, std::size_t L,
                                                     std::size_t H, std::size_t d,
                                                     std::size_t K, std::uint64_t seed,
                                                     bool with_reference = false) {
  const auto m = manifest(n, L, H, d, K);
  auto t = headaudit::StoreTensors::zeros(m, with_reference);
  headaudit::Rng rng(seed);
  for (auto& x : t.initial) x = static_cast<float>(rng.normal());
  for (auto& x : t.mlp) x = static_cast<float>(rng.normal());
  for (auto& x : t.heads) x = static_cast<float>(rng.normal());
  for (auto& x : t.reference) x = static_cast<float>(rng.normal());
  for (auto& y : t.labels) y = static_cast<std::uint32_t>(rng.uniform_index(K));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t a = 0; a < m.attributes.size(); ++a) {
      t.demographics[i * m.attributes.size() + a] = static_cast<std::uint32_t>(
          rng.uniform_index(m.attributes[a].values.size() + 1));
    }
  }
  return headaudit::HeadContributionStore(m, std::move(t));
}

inline std::vector<unsigned char> read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_bytes(const fs::path& p, const std::vector<unsigned char>& bytes) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
}

inline std::string read_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline std::vector<float> unit_vector(headaudit::Rng& rng, std::size_t d) {
  std::vector<float> v(d);
  double norm = 0.0;
  std::vector<double> raw(d);
  for (auto& x : raw) {
    x = rng.normal();
    norm += x * x;
  }
  norm = std::sqrt(norm);
  for (std::size_t k = 0; k < d; ++k) v[k] = static_cast<float>(raw[k] / norm);
  return v;
}

// Random unit prototypes matching `m`, with `n_general` extra dictionary rows.
inline headaudit::PrototypeSet random_prototypes(const headaudit::StoreManifest& m,
                                                 std::size_t n_general,
                                                 std::uint64_t seed) {
  using namespace headaudit;
  Rng rng(seed);
  const std::size_t d = m.embed_dim;
  PrototypeSet p;
  p.embed_dim = d;
  p.occupation_names = m.class_names;
  p.occupation = RowMatrix<float>(m.n_classes(), d);
  p.attributes = m.attributes;
  p.dictionary = RowMatrix<float>(0, d);
  std::vector<float> dict;
  auto add = [&](DictionaryEntry e, const std::vector<float>& v) {
    p.dictionary_entries.push_back(std::move(e));
    dict.insert(dict.end(), v.begin(), v.end());
  };
  for (std::size_t g = 0; g < n_general; ++g) {
    DictionaryEntry e;
    e.name = "general_" + std::to_string(g);
    add(e, unit_vector(rng, d));
  }
  for (std::size_t k = 0; k < m.n_classes(); ++k) {
    const auto v = unit_vector(rng, d);
    std::copy(v.begin(), v.end(), p.occupation.row(k).begin());
    DictionaryEntry e;
    e.name = "occupation_" + m.class_names[k];
    e.category = TextCategory::kOccupation;
    e.class_name = m.class_names[k];
    add(e, v);
  }
  for (const auto& a : m.attributes) {
    RowMatrix<float> table(a.values.size(), d);
    for (std::size_t v = 0; v < a.values.size(); ++v) {
      const auto u = unit_vector(rng, d);
      std::copy(u.begin(), u.end(), table.row(v).begin());
      DictionaryEntry e;
      e.name = a.name + "_" + a.values[v];
      e.category = TextCategory::kDemographic;
      e.attribute = a.name;
      e.value = a.values[v];
      add(e, u);
    }
    p.demographic.push_back(std::move(table));
  }
  p.dictionary.rows = p.dictionary_entries.size();
  p.dictionary.data = std::move(dict);
  return p;
}

inline headaudit::ClassifierMatrix random_classifier(const headaudit::StoreManifest& m,
                                                     std::uint64_t seed) {
  headaudit::Rng rng(seed);
  headaudit::ClassifierMatrix c;
  c.class_names = m.class_names;
  c.weights = headaudit::RowMatrix<float>(m.n_classes(), m.embed_dim);
  for (std::size_t k = 0; k < m.n_classes(); ++k) {
    const auto v = unit_vector(rng, m.embed_dim);
    std::copy(v.begin(), v.end(), c.weights.row(k).begin());
  }
  return c;
}

// Scaled-down concentrated preset: 4 layers of 4 heads, two planted gender
// heads in the last two layers.
inline headaudit::SynthSpec small_spec(std::uint64_t seed, std::size_t n_images = 1500) {
  auto s = headaudit::concentrated_spec(0);
  s.seed = seed;
  s.n_images = n_images;
  s.n_layers = 4;
  s.n_heads = 4;
  s.embed_dim = 32;
  s.n_general_texts = 20;
  const auto affected = s.planted.front().affected_classes;
  s.planted = {{{2, 1}, "gender", "female", 2.0, affected},
               {{3, 3}, "gender", "female", 2.0, affected}};
  return s;
}

}  // namespace testing
