#include "headaudit/store.hpp"

#include <cmath>
#include <set>

#include "blob_io.hpp"
#include "headaudit/error.hpp"

namespace headaudit {

namespace fs = std::filesystem;
using detail::checked_mul;
using nlohmann::json;
using nlohmann::ordered_json;

namespace {

constexpr const char* kStoreFormat = "headaudit-store";
constexpr const char* kPrototypeFormat = "headaudit-prototypes";
constexpr const char* kClassifierFormat = "headaudit-classifier";

void check_unique(const std::vector<std::string>& names,
                  const std::string& context) {
  std::set<std::string> seen;
  for (const auto& n : names) {
    if (!seen.insert(n).second) {
      throw Error(Errc::kFormat, context + ": duplicate name '" + n + "'");
    }
  }
}

void validate_attributes(const std::vector<Attribute>& attributes,
                         const std::string& context) {
  std::vector<std::string> names;
  for (const auto& a : attributes) {
    if (a.values.size() < 2) {
      throw Error(Errc::kFormat, context + ": attribute '" + a.name +
                                     "' needs at least 2 values");
    }
    check_unique(a.values, context + ": attribute '" + a.name + "'");
    names.push_back(a.name);
  }
  check_unique(names, context + ": attributes");
}

std::vector<Attribute> parse_attributes(const json& manifest,
                                        const std::string& context) {
  const auto& arr = detail::field(manifest, "demographic_attributes", context);
  if (!arr.is_array()) {
    throw Error(Errc::kFormat,
                context + ": 'demographic_attributes' must be an array");
  }
  std::vector<Attribute> out;
  for (std::size_t i = 0; i < arr.size(); ++i) {
    const std::string ctx =
        context + ": demographic_attributes[" + std::to_string(i) + "]";
    out.push_back({detail::get_string(arr[i], "name", ctx),
                   detail::get_strings(arr[i], "values", ctx)});
  }
  return out;
}

ordered_json attributes_json(const std::vector<Attribute>& attributes) {
  ordered_json arr = ordered_json::array();
  for (const auto& a : attributes) {
    arr.push_back({{"name", a.name}, {"values", a.values}});
  }
  return arr;
}

ordered_json container_header(const char* format) {
  return {{"format", format}, {"version", 1}, {"endianness", "little"}};
}

// Index of the first non-finite value, or npos.
std::size_t first_non_finite(const std::vector<float>& values) {
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!std::isfinite(values[i])) return i;
  }
  return std::string::npos;
}

void check_unit_rows(const RowMatrix<float>& m, const std::string& context,
                     const std::vector<std::string>* names) {
  for (std::size_t r = 0; r < m.rows; ++r) {
    const double norm = std::sqrt(squared_norm(m.row(r)));
    if (!std::isfinite(norm) || std::abs(norm - 1.0) > kUnitNormTolerance) {
      std::string label = names ? " ('" + (*names)[r] + "')" : "";
      throw Error(Errc::kFormat, context + ": row " + std::to_string(r) + label +
                                     " has norm " + std::to_string(norm) +
                                     ", expected 1 within 1e-5");
    }
  }
}

RowMatrix<float> read_matrix(const fs::path& path, std::size_t rows,
                             std::size_t cols) {
  RowMatrix<float> m;
  m.rows = rows;
  m.cols = cols;
  m.data = detail::read_blob<float>(
      path, checked_mul(rows, cols, path.filename().string()));
  return m;
}

}  // namespace

std::optional<std::size_t> Attribute::value_index(
    const std::string& value) const {
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (values[i] == value) return i;
  }
  return std::nullopt;
}

std::optional<std::size_t> StoreManifest::attribute_index(
    const std::string& name) const {
  for (std::size_t i = 0; i < attributes.size(); ++i) {
    if (attributes[i].name == name) return i;
  }
  return std::nullopt;
}

std::size_t StoreManifest::require_attribute(const std::string& name) const {
  if (auto idx = attribute_index(name)) return *idx;
  throw Error(Errc::kInvalidArgument,
              "store has no demographic attribute '" + name + "'");
}

void StoreManifest::validate() const {
  const std::string ctx = "manifest.json";
  if (n_layers < 1) throw Error(Errc::kFormat, ctx + ": n_layers must be >= 1");
  if (n_heads < 1) {
    throw Error(Errc::kFormat, ctx + ": n_heads_per_layer must be >= 1");
  }
  if (embed_dim < 2) throw Error(Errc::kFormat, ctx + ": embed_dim must be >= 2");
  if (class_names.size() < 2) {
    throw Error(Errc::kFormat, ctx + ": class_names needs at least 2 entries");
  }
  check_unique(class_names, ctx + ": class_names");
  validate_attributes(attributes, ctx);
}

StoreTensors StoreTensors::zeros(const StoreManifest& m, bool with_reference) {
  StoreTensors t;
  const std::size_t n = m.n_images;
  const std::size_t d = m.embed_dim;
  t.initial.assign(n * d, 0.0f);
  t.mlp.assign(n * m.n_layers * d, 0.0f);
  t.heads.assign(n * m.n_layers * m.n_heads * d, 0.0f);
  t.labels.assign(n, 0);
  t.demographics.assign(n * m.attributes.size(), 0);
  if (with_reference) t.reference.assign(n * d, 0.0f);
  return t;
}

void validate_store(const StoreManifest& m, const StoreTensors& t) {
  m.validate();
  const std::size_t n = m.n_images;
  const std::size_t d = m.embed_dim;
  const std::size_t L = m.n_layers;
  const std::size_t H = m.n_heads;
  auto expect_size = [](const char* blob, std::size_t actual,
                        std::size_t expected) {
    if (actual != expected) {
      throw Error(Errc::kDimensionMismatch,
                  std::string(blob) + ": holds " + std::to_string(actual) +
                      " elements, manifest dims require " +
                      std::to_string(expected));
    }
  };
  expect_size("initial.f32", t.initial.size(), checked_mul(n, d, "initial"));
  expect_size("mlp.f32", t.mlp.size(),
              checked_mul(checked_mul(n, L, "mlp"), d, "mlp"));
  expect_size("heads.f32", t.heads.size(),
              checked_mul(checked_mul(checked_mul(n, L, "heads"), H, "heads"), d,
                          "heads"));
  expect_size("labels.u32", t.labels.size(), n);
  expect_size("demographics.u32", t.demographics.size(),
              checked_mul(n, m.attributes.size(), "demographics"));
  if (!t.reference.empty()) {
    expect_size("reference.f32", t.reference.size(), n * d);
  }

  auto offset = [](std::size_t idx) {
    return std::to_string(detail::kBlobHeaderBytes + 4 * idx);
  };
  if (auto i = first_non_finite(t.initial); i != std::string::npos) {
    throw Error(Errc::kNonFinite,
                "initial.f32: non-finite value at image " +
                    std::to_string(i / d) + ", component " +
                    std::to_string(i % d) + " (byte offset " + offset(i) + ")");
  }
  if (auto i = first_non_finite(t.mlp); i != std::string::npos) {
    throw Error(Errc::kNonFinite,
                "mlp.f32: non-finite value at image " +
                    std::to_string(i / (L * d)) + ", layer " +
                    std::to_string((i / d) % L) + ", component " +
                    std::to_string(i % d) + " (byte offset " + offset(i) + ")");
  }
  if (auto i = first_non_finite(t.heads); i != std::string::npos) {
    throw Error(Errc::kNonFinite,
                "heads.f32: non-finite value at image " +
                    std::to_string(i / (L * H * d)) + ", layer " +
                    std::to_string((i / (H * d)) % L) + ", head " +
                    std::to_string((i / d) % H) + ", component " +
                    std::to_string(i % d) + " (byte offset " + offset(i) + ")");
  }
  if (auto i = first_non_finite(t.reference); i != std::string::npos) {
    throw Error(Errc::kNonFinite,
                "reference.f32: non-finite value at image " +
                    std::to_string(i / d) + " (byte offset " + offset(i) + ")");
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (t.labels[i] >= m.n_classes()) {
      throw Error(Errc::kFormat, "labels.u32: image " + std::to_string(i) +
                                     " has class index " +
                                     std::to_string(t.labels[i]) + " >= " +
                                     std::to_string(m.n_classes()));
    }
  }
  const std::size_t A = m.attributes.size();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t a = 0; a < A; ++a) {
      const auto v = t.demographics[i * A + a];
      if (v > m.attributes[a].unknown_index()) {
        throw Error(Errc::kFormat,
                    "demographics.u32: image " + std::to_string(i) +
                        ", attribute '" + m.attributes[a].name + "' has index " +
                        std::to_string(v) + " > unknown index " +
                        std::to_string(m.attributes[a].unknown_index()));
      }
    }
  }
}

HeadContributionStore::HeadContributionStore(StoreManifest manifest,
                                             StoreTensors tensors)
    : manifest_(std::move(manifest)), tensors_(std::move(tensors)) {
  validate_store(manifest_, tensors_);
}

std::span<const float> HeadContributionStore::initial(std::size_t image) const {
  const std::size_t d = manifest_.embed_dim;
  return {tensors_.initial.data() + image * d, d};
}

std::span<const float> HeadContributionStore::mlp(std::size_t image,
                                                  std::size_t layer) const {
  const std::size_t d = manifest_.embed_dim;
  return {tensors_.mlp.data() + (image * manifest_.n_layers + layer) * d, d};
}

std::span<const float> HeadContributionStore::head(std::size_t image,
                                                   std::size_t layer,
                                                   std::size_t head) const {
  const std::size_t d = manifest_.embed_dim;
  const std::size_t slot =
      (image * manifest_.n_layers + layer) * manifest_.n_heads + head;
  return {tensors_.heads.data() + slot * d, d};
}

std::span<const float> HeadContributionStore::reference(
    std::size_t image) const {
  if (!has_reference()) {
    throw Error(Errc::kInvalidArgument, "store carries no reference blob");
  }
  const std::size_t d = manifest_.embed_dim;
  return {tensors_.reference.data() + image * d, d};
}

HeadContributionStore load_store(const fs::path& dir) {
  const json mj = detail::read_manifest(dir / "manifest.json");
  const std::string ctx = "manifest.json";
  detail::expect_header(mj, kStoreFormat, ctx);
  StoreManifest m;
  m.n_images = detail::get_count(mj, "n_images", ctx);
  m.n_layers = detail::get_count(mj, "n_layers", ctx);
  m.n_heads = detail::get_count(mj, "n_heads_per_layer", ctx);
  m.embed_dim = detail::get_count(mj, "embed_dim", ctx);
  m.class_names = detail::get_strings(mj, "class_names", ctx);
  m.attributes = parse_attributes(mj, ctx);
  m.model_tag = detail::get_string(mj, "model_tag", ctx);
  const auto& has_ref = detail::field(mj, "has_reference", ctx);
  if (!has_ref.is_boolean()) {
    throw Error(Errc::kFormat, ctx + ": field 'has_reference' must be a boolean");
  }
  m.validate();

  const std::size_t n = m.n_images;
  const std::size_t d = m.embed_dim;
  StoreTensors t;
  t.initial = detail::read_blob<float>(dir / "initial.f32",
                                       checked_mul(n, d, "initial.f32"));
  t.mlp = detail::read_blob<float>(
      dir / "mlp.f32",
      checked_mul(checked_mul(n, m.n_layers, "mlp.f32"), d, "mlp.f32"));
  t.heads = detail::read_blob<float>(
      dir / "heads.f32",
      checked_mul(checked_mul(checked_mul(n, m.n_layers, "heads.f32"),
                              m.n_heads, "heads.f32"),
                  d, "heads.f32"));
  t.labels = detail::read_blob<std::uint32_t>(dir / "labels.u32", n);
  t.demographics = detail::read_blob<std::uint32_t>(
      dir / "demographics.u32",
      checked_mul(n, m.attributes.size(), "demographics.u32"));
  if (has_ref.get<bool>()) {
    t.reference = detail::read_blob<float>(dir / "reference.f32", n * d);
  }
  return HeadContributionStore(std::move(m), std::move(t));
}

void save_store(const HeadContributionStore& store, const fs::path& dir) {
  detail::ensure_directory(dir);
  const auto& m = store.manifest();
  ordered_json mj = container_header(kStoreFormat);
  mj["n_images"] = m.n_images;
  mj["n_layers"] = m.n_layers;
  mj["n_heads_per_layer"] = m.n_heads;
  mj["embed_dim"] = m.embed_dim;
  mj["class_names"] = m.class_names;
  mj["demographic_attributes"] = attributes_json(m.attributes);
  mj["model_tag"] = m.model_tag;
  mj["has_reference"] = store.has_reference();
  const auto& t = store.tensors();
  detail::write_blob(dir / "initial.f32", t.initial);
  detail::write_blob(dir / "mlp.f32", t.mlp);
  detail::write_blob(dir / "heads.f32", t.heads);
  detail::write_blob(dir / "labels.u32", t.labels);
  detail::write_blob(dir / "demographics.u32", t.demographics);
  if (store.has_reference()) detail::write_blob(dir / "reference.f32", t.reference);
  // Manifest last: a directory with a manifest is a complete container.
  detail::write_manifest(dir / "manifest.json", mj);
}

const char* category_name(TextCategory category) {
  switch (category) {
    case TextCategory::kGeneral: return "general";
    case TextCategory::kOccupation: return "occupation";
    case TextCategory::kDemographic: return "demographic";
  }
  return "general";
}

std::optional<std::size_t> PrototypeSet::attribute_index(
    const std::string& name) const {
  for (std::size_t i = 0; i < attributes.size(); ++i) {
    if (attributes[i].name == name) return i;
  }
  return std::nullopt;
}

void PrototypeSet::validate() const {
  const std::string ctx = "prototypes";
  if (embed_dim < 2) throw Error(Errc::kFormat, ctx + ": embed_dim must be >= 2");
  check_unique(occupation_names, ctx + ": occupations");
  if (occupation.rows != occupation_names.size() || occupation.cols != embed_dim) {
    throw Error(Errc::kDimensionMismatch,
                ctx + ": occupation.f32 shape disagrees with manifest");
  }
  check_unit_rows(occupation, "occupation.f32", &occupation_names);
  validate_attributes(attributes, ctx);
  if (demographic.size() != attributes.size()) {
    throw Error(Errc::kDimensionMismatch,
                ctx + ": one demographic table per attribute required");
  }
  for (std::size_t a = 0; a < attributes.size(); ++a) {
    const auto& table = demographic[a];
    if (table.rows != attributes[a].values.size() || table.cols != embed_dim) {
      throw Error(Errc::kDimensionMismatch,
                  ctx + ": demographic prototypes for '" + attributes[a].name +
                      "' have wrong shape");
    }
    check_unit_rows(table, "demographic.f32 (" + attributes[a].name + ")",
                    &attributes[a].values);
  }
  if (dictionary.rows != dictionary_entries.size() ||
      (dictionary.rows > 0 && dictionary.cols != embed_dim)) {
    throw Error(Errc::kDimensionMismatch,
                ctx + ": dictionary.f32 shape disagrees with manifest");
  }
  std::vector<std::string> names;
  for (const auto& e : dictionary_entries) names.push_back(e.name);
  check_unique(names, ctx + ": dictionary");
  check_unit_rows(dictionary, "dictionary.f32", &names);

  auto check_same = [&](std::size_t text, std::span<const float> proto) {
    const auto row = dictionary.row(text);
    for (std::size_t k = 0; k < embed_dim; ++k) {
      if (std::abs(static_cast<double>(row[k]) - proto[k]) > kUnitNormTolerance) {
        throw Error(Errc::kFormat,
                    ctx + ": dictionary row " + std::to_string(text) + " ('" +
                        dictionary_entries[text].name +
                        "') differs from its prototype at component " +
                        std::to_string(k));
      }
    }
  };
  for (std::size_t i = 0; i < dictionary_entries.size(); ++i) {
    const auto& e = dictionary_entries[i];
    if (e.category == TextCategory::kOccupation) {
      std::optional<std::size_t> cls;
      for (std::size_t k = 0; k < occupation_names.size(); ++k) {
        if (occupation_names[k] == e.class_name) cls = k;
      }
      if (!cls) {
        throw Error(Errc::kFormat, ctx + ": dictionary entry '" + e.name +
                                       "' names unknown class '" +
                                       e.class_name + "'");
      }
      check_same(i, occupation.row(*cls));
    } else if (e.category == TextCategory::kDemographic) {
      auto a = attribute_index(e.attribute);
      std::optional<std::size_t> v;
      if (a) v = attributes[*a].value_index(e.value);
      if (!a || !v) {
        throw Error(Errc::kFormat, ctx + ": dictionary entry '" + e.name +
                                       "' names unknown demographic value '" +
                                       e.attribute + "/" + e.value + "'");
      }
      check_same(i, demographic[*a].row(*v));
    }
  }
}

PrototypeSet load_prototypes(const fs::path& dir) {
  const json mj = detail::read_manifest(dir / "manifest.json");
  const std::string ctx = "prototypes manifest.json";
  detail::expect_header(mj, kPrototypeFormat, ctx);
  PrototypeSet p;
  p.embed_dim = detail::get_count(mj, "embed_dim", ctx);
  p.occupation_names = detail::get_strings(mj, "occupations", ctx);
  p.attributes = parse_attributes(mj, ctx);
  const auto& dict = detail::field(mj, "dictionary", ctx);
  if (!dict.is_array()) {
    throw Error(Errc::kFormat, ctx + ": 'dictionary' must be an array");
  }
  for (std::size_t i = 0; i < dict.size(); ++i) {
    const std::string ectx = ctx + ": dictionary[" + std::to_string(i) + "]";
    DictionaryEntry e;
    e.name = detail::get_string(dict[i], "name", ectx);
    const std::string cat = detail::get_string(dict[i], "category", ectx);
    if (cat == "general") {
      e.category = TextCategory::kGeneral;
    } else if (cat == "occupation") {
      e.category = TextCategory::kOccupation;
      e.class_name = detail::get_string(dict[i], "class", ectx);
    } else if (cat == "demographic") {
      e.category = TextCategory::kDemographic;
      e.attribute = detail::get_string(dict[i], "attribute", ectx);
      e.value = detail::get_string(dict[i], "value", ectx);
    } else {
      throw Error(Errc::kFormat, ectx + ": unknown category '" + cat + "'");
    }
    p.dictionary_entries.push_back(std::move(e));
  }
  if (p.embed_dim < 2) throw Error(Errc::kFormat, ctx + ": embed_dim must be >= 2");
  validate_attributes(p.attributes, ctx);

  const std::size_t d = p.embed_dim;
  p.occupation = read_matrix(dir / "occupation.f32", p.occupation_names.size(), d);
  std::size_t total_values = 0;
  for (const auto& a : p.attributes) total_values += a.values.size();
  const RowMatrix<float> all_demo = read_matrix(dir / "demographic.f32", total_values, d);
  std::size_t offset = 0;
  for (const auto& a : p.attributes) {
    RowMatrix<float> table(a.values.size(), d);
    std::copy_n(all_demo.data.begin() + static_cast<std::ptrdiff_t>(offset * d),
                a.values.size() * d, table.data.begin());
    p.demographic.push_back(std::move(table));
    offset += a.values.size();
  }
  p.dictionary = read_matrix(dir / "dictionary.f32", p.dictionary_entries.size(), d);
  p.validate();
  return p;
}

void save_prototypes(const PrototypeSet& p, const fs::path& dir) {
  p.validate();
  detail::ensure_directory(dir);
  ordered_json mj = container_header(kPrototypeFormat);
  mj["embed_dim"] = p.embed_dim;
  mj["occupations"] = p.occupation_names;
  mj["demographic_attributes"] = attributes_json(p.attributes);
  ordered_json dict = ordered_json::array();
  for (const auto& e : p.dictionary_entries) {
    ordered_json entry = {{"name", e.name}, {"category", category_name(e.category)}};
    if (e.category == TextCategory::kOccupation) entry["class"] = e.class_name;
    if (e.category == TextCategory::kDemographic) {
      entry["attribute"] = e.attribute;
      entry["value"] = e.value;
    }
    dict.push_back(std::move(entry));
  }
  mj["dictionary"] = std::move(dict);
  std::vector<float> all_demo;
  for (const auto& table : p.demographic) {
    all_demo.insert(all_demo.end(), table.data.begin(), table.data.end());
  }
  detail::write_blob(dir / "occupation.f32", p.occupation.data);
  detail::write_blob(dir / "demographic.f32", all_demo);
  detail::write_blob(dir / "dictionary.f32", p.dictionary.data);
  detail::write_manifest(dir / "manifest.json", mj);
}

void ClassifierMatrix::validate() const {
  if (class_names.size() < 2) {
    throw Error(Errc::kFormat, "classifier: needs at least 2 classes");
  }
  check_unique(class_names, "classifier: class_names");
  if (weights.rows != class_names.size() || weights.cols < 2) {
    throw Error(Errc::kDimensionMismatch,
                "classifier: weights.f32 shape disagrees with manifest");
  }
  if (auto i = first_non_finite(weights.data); i != std::string::npos) {
    throw Error(Errc::kNonFinite, "weights.f32: non-finite value in row " +
                                      std::to_string(i / weights.cols));
  }
}

ClassifierMatrix load_classifier(const fs::path& dir) {
  const json mj = detail::read_manifest(dir / "manifest.json");
  const std::string ctx = "classifier manifest.json";
  detail::expect_header(mj, kClassifierFormat, ctx);
  ClassifierMatrix c;
  c.class_names = detail::get_strings(mj, "class_names", ctx);
  const std::size_t d = detail::get_count(mj, "embed_dim", ctx);
  if (d < 2) throw Error(Errc::kFormat, ctx + ": embed_dim must be >= 2");
  c.weights = read_matrix(dir / "weights.f32", c.class_names.size(), d);
  c.validate();
  return c;
}

void save_classifier(const ClassifierMatrix& c, const fs::path& dir) {
  c.validate();
  detail::ensure_directory(dir);
  ordered_json mj = container_header(kClassifierFormat);
  mj["embed_dim"] = c.weights.cols;
  mj["class_names"] = c.class_names;
  detail::write_blob(dir / "weights.f32", c.weights.data);
  detail::write_manifest(dir / "manifest.json", mj);
}

void check_compatible(const HeadContributionStore& store,
                      const PrototypeSet& prototypes) {
  if (prototypes.embed_dim != store.embed_dim()) {
    throw Error(Errc::kDimensionMismatch,
                "prototypes embed_dim " + std::to_string(prototypes.embed_dim) +
                    " != store embed_dim " + std::to_string(store.embed_dim()));
  }
  if (prototypes.occupation_names != store.manifest().class_names) {
    throw Error(Errc::kDimensionMismatch,
                "prototype occupations do not match store class_names");
  }
}

void check_compatible(const HeadContributionStore& store,
                      const ClassifierMatrix& classifier) {
  if (classifier.weights.cols != store.embed_dim()) {
    throw Error(Errc::kDimensionMismatch,
                "classifier embed_dim " + std::to_string(classifier.weights.cols) +
                    " != store embed_dim " + std::to_string(store.embed_dim()));
  }
  if (classifier.class_names.size() != store.n_classes()) {
    throw Error(Errc::kDimensionMismatch,
                "classifier has " + std::to_string(classifier.class_names.size()) +
                    " classes, store has " + std::to_string(store.n_classes()));
  }
  if (classifier.class_names != store.manifest().class_names) {
    throw Error(Errc::kDimensionMismatch,
                "classifier class_names do not match store class_names");
  }
}

}  // namespace headaudit
