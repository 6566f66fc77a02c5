#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "headaudit/tensor.hpp"

namespace headaudit {

struct Attribute {
  std::string name;
  std::vector<std::string> values;

  // Index reserved for images whose value was not annotated.
  std::uint32_t unknown_index() const {
    return static_cast<std::uint32_t>(values.size());
  }
  std::optional<std::size_t> value_index(const std::string& value) const;

  bool operator==(const Attribute&) const = default;
};

struct StoreManifest {
  std::size_t n_images = 0;
  std::size_t n_layers = 0;
  std::size_t n_heads = 0;
  std::size_t embed_dim = 0;
  std::vector<std::string> class_names;
  std::vector<Attribute> attributes;
  std::string model_tag;

  std::size_t n_classes() const { return class_names.size(); }
  std::size_t n_head_slots() const { return n_layers * n_heads; }
  std::optional<std::size_t> attribute_index(const std::string& name) const;
  // Throws Error(kInvalidArgument) naming the attribute when absent.
  std::size_t require_attribute(const std::string& name) const;

  // Throws Error(kFormat) when an invariant is violated.
  void validate() const;

  bool operator==(const StoreManifest&) const = default;
};

// Raw tensors of a store, row-major, dims as in the manifest.
struct StoreTensors {
  std::vector<float> initial;               // [n_images, d]
  std::vector<float> mlp;                   // [n_images, L, d]
  std::vector<float> heads;                 // [n_images, L, H, d]
  std::vector<std::uint32_t> labels;        // [n_images]
  std::vector<std::uint32_t> demographics;  // [n_images, n_attributes]
  std::vector<float> reference;             // empty, or [n_images, d]

  static StoreTensors zeros(const StoreManifest& manifest,
                            bool with_reference = false);

  bool operator==(const StoreTensors&) const = default;
};

// Per-image projected contributions of every head, every MLP block and the
// initial token, plus labels. Immutable once constructed; the constructor
// checks every invariant.
class HeadContributionStore {
 public:
  HeadContributionStore(StoreManifest manifest, StoreTensors tensors);

  const StoreManifest& manifest() const { return manifest_; }
  const StoreTensors& tensors() const { return tensors_; }

  std::size_t n_images() const { return manifest_.n_images; }
  std::size_t n_layers() const { return manifest_.n_layers; }
  std::size_t n_heads() const { return manifest_.n_heads; }
  std::size_t embed_dim() const { return manifest_.embed_dim; }
  std::size_t n_classes() const { return manifest_.n_classes(); }
  bool has_reference() const { return !tensors_.reference.empty(); }

  std::span<const float> initial(std::size_t image) const;
  std::span<const float> mlp(std::size_t image, std::size_t layer) const;
  std::span<const float> head(std::size_t image, std::size_t layer,
                              std::size_t head) const;
  std::span<const float> reference(std::size_t image) const;
  std::uint32_t true_class(std::size_t image) const {
    return tensors_.labels[image];
  }
  std::uint32_t demographic(std::size_t image, std::size_t attribute) const {
    return tensors_.demographics[image * manifest_.attributes.size() +
                                 attribute];
  }

  bool operator==(const HeadContributionStore&) const = default;

 private:
  StoreManifest manifest_;
  StoreTensors tensors_;
};

// Checks tensors against the manifest; error messages name the blob and the
// image/layer/component index of the first offending value.
void validate_store(const StoreManifest& manifest, const StoreTensors& tensors);

HeadContributionStore load_store(const std::filesystem::path& dir);
void save_store(const HeadContributionStore& store,
                const std::filesystem::path& dir);

enum class TextCategory { kGeneral, kOccupation, kDemographic };

const char* category_name(TextCategory category);

struct DictionaryEntry {
  std::string name;
  TextCategory category = TextCategory::kGeneral;
  // kOccupation: class name. kDemographic: attribute and value names.
  std::string class_name;
  std::string attribute;
  std::string value;

  bool operator==(const DictionaryEntry&) const = default;
};

// Unit-norm text embeddings: one occupation prototype per class, one
// demographic prototype per attribute value, and the TextSpan dictionary.
struct PrototypeSet {
  std::size_t embed_dim = 0;
  std::vector<std::string> occupation_names;
  RowMatrix<float> occupation;  // [K, d]
  std::vector<Attribute> attributes;
  std::vector<RowMatrix<float>> demographic;  // per attribute [n_values, d]
  std::vector<DictionaryEntry> dictionary_entries;
  RowMatrix<float> dictionary;  // [n_texts, d]

  std::optional<std::size_t> attribute_index(const std::string& name) const;
  std::size_t n_texts() const { return dictionary.rows; }

  // Throws Error naming the row that breaks an invariant.
  void validate() const;

  bool operator==(const PrototypeSet&) const = default;
};

struct ClassifierMatrix {
  std::vector<std::string> class_names;
  RowMatrix<float> weights;  // [K, d]

  void validate() const;
  bool operator==(const ClassifierMatrix&) const = default;
};

inline constexpr double kUnitNormTolerance = 1e-5;

PrototypeSet load_prototypes(const std::filesystem::path& dir);
void save_prototypes(const PrototypeSet& prototypes,
                     const std::filesystem::path& dir);

ClassifierMatrix load_classifier(const std::filesystem::path& dir);
void save_classifier(const ClassifierMatrix& classifier,
                     const std::filesystem::path& dir);

// Cross-checks that prototypes/classifier describe the same classes and
// embedding width as the store.
void check_compatible(const HeadContributionStore& store,
                      const PrototypeSet& prototypes);
void check_compatible(const HeadContributionStore& store,
                      const ClassifierMatrix& classifier);

}  // namespace headaudit
