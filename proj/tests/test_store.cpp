#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <limits>

#include <json.hpp>

#include "headaudit/error.hpp"
#include "headaudit/store.hpp"
#include "support.hpp"

using namespace headaudit;
using testing::TempDir;

namespace {

template <typename F>
Error expect_error(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e;
  } catch (const std::exception& e) {
    FAIL("non-library exception: " << e.what());
  }
  FAIL("no exception thrown");
  return Error(Errc::kInvalidArgument, "unreachable");
}

bool contains(const std::string& haystack, const std::string& needle) {
  return haystack.find(needle) != std::string::npos;
}

}  // namespace

TEST_CASE("store round trip is bit exact") {
  TempDir tmp;
  const auto store = testing::random_store(37, 3, 4, 8, 5, 11, true);
  save_store(store, tmp.path());
  const auto loaded = load_store(tmp.path());
  CHECK(loaded.manifest() == store.manifest());
  CHECK(loaded.tensors() == store.tensors());
  CHECK(loaded.has_reference());

  // Saving again reproduces every file byte for byte.
  TempDir again;
  save_store(loaded, again.path());
  for (const char* name : {"manifest.json", "initial.f32", "mlp.f32", "heads.f32",
                           "labels.u32", "demographics.u32", "reference.f32"}) {
    CAPTURE(name);
    CHECK(testing::read_bytes(tmp / name) == testing::read_bytes(again / name));
  }
}

TEST_CASE("store without reference omits the blob") {
  TempDir tmp;
  save_store(testing::random_store(5, 2, 2, 4, 3, 1), tmp.path());
  CHECK_FALSE(std::filesystem::exists(tmp / "reference.f32"));
  const auto loaded = load_store(tmp.path());
  CHECK_FALSE(loaded.has_reference());
  CHECK(expect_error([&] { (void)loaded.reference(0); }).code() ==
        Errc::kInvalidArgument);
}

TEST_CASE("empty store loads") {
  TempDir tmp;
  const auto store = testing::random_store(0, 2, 3, 4, 3, 2);
  save_store(store, tmp.path());
  const auto loaded = load_store(tmp.path());
  CHECK(loaded.n_images() == 0);
  CHECK(loaded.tensors().heads.empty());
}

TEST_CASE("blob byte layout is little endian with a u64 length prefix") {
  TempDir tmp;
  auto m = testing::manifest(1, 1, 1, 2, 2);
  auto t = StoreTensors::zeros(m);
  t.initial = {1.0f, -2.5f};
  t.labels = {1};
  save_store(HeadContributionStore(m, t), tmp.path());
  const auto bytes = testing::read_bytes(tmp / "initial.f32");
  REQUIRE(bytes.size() == 16);
  const std::vector<unsigned char> header = {8, 0, 0, 0, 0, 0, 0, 0};
  CHECK(std::vector<unsigned char>(bytes.begin(), bytes.begin() + 8) == header);
  // 1.0f = 0x3F800000, -2.5f = 0xC0200000, least significant byte first.
  const std::vector<unsigned char> payload = {0x00, 0x00, 0x80, 0x3F,
                                              0x00, 0x00, 0x20, 0xC0};
  CHECK(std::vector<unsigned char>(bytes.begin() + 8, bytes.end()) == payload);

  const auto labels = testing::read_bytes(tmp / "labels.u32");
  const std::vector<unsigned char> expect = {4, 0, 0, 0, 0, 0, 0, 0, 1, 0, 0, 0};
  CHECK(labels == expect);

  const auto mj = nlohmann::json::parse(testing::read_text(tmp / "manifest.json"));
  CHECK(mj["format"] == "headaudit-store");
  CHECK(mj["version"] == 1);
  CHECK(mj["endianness"] == "little");
  CHECK(mj["n_heads_per_layer"] == 1);
  CHECK(mj["has_reference"] == false);
}

TEST_CASE("truncated heads blob names the blob") {
  TempDir tmp;
  save_store(testing::random_store(10, 2, 3, 4, 3, 3), tmp.path());
  auto bytes = testing::read_bytes(tmp / "heads.f32");
  bytes.resize(bytes.size() - 7);
  testing::write_bytes(tmp / "heads.f32", bytes);
  const auto e = expect_error([&] { (void)load_store(tmp.path()); });
  CHECK(e.code() == Errc::kTruncated);
  CHECK(contains(e.what(), "heads.f32"));
}

TEST_CASE("non-finite value names image and layer") {
  TempDir tmp;
  auto store = testing::random_store(6, 3, 2, 4, 3, 4);
  auto t = store.tensors();
  // image 4, layer 2, component 1
  t.mlp[(4 * 3 + 2) * 4 + 1] = std::numeric_limits<float>::quiet_NaN();
  const auto e = expect_error([&] { HeadContributionStore(store.manifest(), t); });
  CHECK(e.code() == Errc::kNonFinite);
  CHECK(contains(e.what(), "mlp.f32"));
  CHECK(contains(e.what(), "image 4"));
  CHECK(contains(e.what(), "layer 2"));

  // Same failure when the NaN arrives from disk.
  save_store(store, tmp.path());
  auto bytes = testing::read_bytes(tmp / "mlp.f32");
  const float nan = std::numeric_limits<float>::quiet_NaN();
  std::memcpy(bytes.data() + 8 + 4 * ((4 * 3 + 2) * 4 + 1), &nan, 4);
  testing::write_bytes(tmp / "mlp.f32", bytes);
  const auto e2 = expect_error([&] { (void)load_store(tmp.path()); });
  CHECK(e2.code() == Errc::kNonFinite);
  CHECK(contains(e2.what(), "image 4"));
  CHECK(contains(e2.what(), "layer 2"));
}

TEST_CASE("length header disagreeing with manifest is a format error") {
  TempDir tmp;
  save_store(testing::random_store(4, 2, 2, 4, 3, 5), tmp.path());
  auto bytes = testing::read_bytes(tmp / "initial.f32");
  bytes[0] = static_cast<unsigned char>(bytes[0] + 4);
  testing::write_bytes(tmp / "initial.f32", bytes);
  const auto e = expect_error([&] { (void)load_store(tmp.path()); });
  CHECK(e.code() == Errc::kFormat);
  CHECK(contains(e.what(), "initial.f32"));
}

TEST_CASE("trailing bytes are rejected") {
  TempDir tmp;
  save_store(testing::random_store(4, 2, 2, 4, 3, 5), tmp.path());
  auto bytes = testing::read_bytes(tmp / "labels.u32");
  bytes.push_back(0);
  testing::write_bytes(tmp / "labels.u32", bytes);
  const auto e = expect_error([&] { (void)load_store(tmp.path()); });
  CHECK(e.code() == Errc::kFormat);
  CHECK(contains(e.what(), "labels.u32"));
}

TEST_CASE("manifest invariants") {
  auto m = testing::manifest(3, 2, 2, 4, 3);
  CHECK_NOTHROW(m.validate());

  SUBCASE("duplicate class name") {
    m.class_names[2] = m.class_names[0];
    CHECK(expect_error([&] { m.validate(); }).code() == Errc::kFormat);
  }
  SUBCASE("too few classes") {
    m.class_names.resize(1);
    CHECK(expect_error([&] { m.validate(); }).code() == Errc::kFormat);
  }
  SUBCASE("attribute without values") {
    m.attributes[0].values.clear();
    CHECK(expect_error([&] { m.validate(); }).code() == Errc::kFormat);
  }
  SUBCASE("zero layers") {
    m.n_layers = 0;
    CHECK(expect_error([&] { m.validate(); }).code() == Errc::kFormat);
  }
  SUBCASE("require_attribute names the missing attribute") {
    const auto e = expect_error([&] { (void)m.require_attribute("race"); });
    CHECK(e.code() == Errc::kInvalidArgument);
    CHECK(contains(e.what(), "race"));
    CHECK(m.require_attribute("age") == 1);
  }
}

TEST_CASE("labels and demographics are range checked") {
  auto store = testing::random_store(5, 1, 1, 4, 3, 6);
  auto t = store.tensors();
  SUBCASE("label out of range") {
    t.labels[3] = 3;
    const auto e = expect_error([&] { HeadContributionStore(store.manifest(), t); });
    CHECK(contains(e.what(), "image 3"));
  }
  SUBCASE("unknown demographic index is allowed, one past it is not") {
    t.demographics[0] = 3;  // gender has 3 values; 3 is unknown
    CHECK_NOTHROW(HeadContributionStore(store.manifest(), t));
    t.demographics[0] = 4;
    CHECK_THROWS_AS(HeadContributionStore(store.manifest(), t), Error);
  }
  SUBCASE("tensor size mismatch") {
    t.heads.pop_back();
    CHECK_THROWS_AS(HeadContributionStore(store.manifest(), t), Error);
  }
}

TEST_CASE("prototype container round trip and dictionary size") {
  TempDir tmp;
  const auto m = testing::manifest(0, 1, 1, 16, 6);
  // 3,545 rows in total: the dictionary size used for real models.
  const std::size_t n_general = 3545 - 6 - 5;
  const auto p = testing::random_prototypes(m, n_general, 9);
  REQUIRE(p.n_texts() == 3545);
  CHECK_NOTHROW(p.validate());
  save_prototypes(p, tmp.path());
  const auto loaded = load_prototypes(tmp.path());
  CHECK(loaded == p);
  CHECK(loaded.attribute_index("age") == std::optional<std::size_t>(1));
}

TEST_CASE("prototype row off the unit sphere is named") {
  TempDir tmp;
  const auto m = testing::manifest(0, 1, 1, 8, 4);
  const auto p = testing::random_prototypes(m, 10, 10);
  save_prototypes(p, tmp.path());
  auto bytes = testing::read_bytes(tmp / "dictionary.f32");
  for (std::size_t k = 0; k < 8; ++k) {
    float x;
    std::memcpy(&x, bytes.data() + 8 + 4 * (7 * 8 + k), 4);
    x *= 0.9f;
    std::memcpy(bytes.data() + 8 + 4 * (7 * 8 + k), &x, 4);
  }
  testing::write_bytes(tmp / "dictionary.f32", bytes);
  const auto e = expect_error([&] { (void)load_prototypes(tmp.path()); });
  CHECK(e.code() == Errc::kFormat);
  CHECK(contains(e.what(), "row 7"));
  CHECK(contains(e.what(), "general_7"));
}

TEST_CASE("dictionary occupation row must equal its prototype") {
  const auto m = testing::manifest(0, 1, 1, 8, 4);
  auto p = testing::random_prototypes(m, 2, 12);
  // Row 2 is occupation_class0; swap in class1's vector.
  const auto other = p.occupation.row(1);
  std::copy(other.begin(), other.end(), p.dictionary.row(2).begin());
  const auto e = expect_error([&] { p.validate(); });
  CHECK(contains(e.what(), "occupation_class0"));
}

TEST_CASE("classifier round trip keeps rows") {
  TempDir tmp;
  const auto m = testing::manifest(0, 1, 1, 5, 3);
  auto c = testing::random_classifier(m, 13);
  // Classifier rows need not be unit norm.
  c.weights(1, 2) = 7.25f;
  save_classifier(c, tmp.path());
  const auto loaded = load_classifier(tmp.path());
  CHECK(loaded == c);
  CHECK(loaded.weights(1, 2) == 7.25f);
}

TEST_CASE("compatibility checks") {
  const auto store = testing::random_store(2, 1, 1, 6, 3, 14);
  auto c = testing::random_classifier(store.manifest(), 1);
  CHECK_NOTHROW(check_compatible(store, c));
  c.class_names[1] = "other";
  CHECK(expect_error([&] { check_compatible(store, c); }).code() ==
        Errc::kDimensionMismatch);

  const auto m = testing::manifest(0, 1, 1, 7, 3);
  const auto p = testing::random_prototypes(m, 1, 2);
  CHECK(expect_error([&] { check_compatible(store, p); }).code() ==
        Errc::kDimensionMismatch);
}

TEST_CASE("missing files and bad manifests") {
  TempDir tmp;
  CHECK(expect_error([&] { (void)load_store(tmp / "nope"); }).code() == Errc::kIo);

  save_store(testing::random_store(3, 1, 2, 4, 3, 15), tmp.path());
  const auto original = testing::read_text(tmp / "manifest.json");
  auto rewrite = [&](const std::function<void(nlohmann::json&)>& edit) {
    auto mj = nlohmann::json::parse(original);
    edit(mj);
    std::ofstream(tmp / "manifest.json") << mj.dump();
  };

  rewrite([](auto& mj) { mj["format"] = "something-else"; });
  CHECK(expect_error([&] { (void)load_store(tmp.path()); }).code() == Errc::kFormat);
  rewrite([](auto& mj) { mj["version"] = 2; });
  CHECK(expect_error([&] { (void)load_store(tmp.path()); }).code() == Errc::kFormat);
  rewrite([](auto& mj) { mj["endianness"] = "big"; });
  CHECK(expect_error([&] { (void)load_store(tmp.path()); }).code() == Errc::kFormat);
  rewrite([](auto& mj) { mj.erase("has_reference"); });
  CHECK(contains(expect_error([&] { (void)load_store(tmp.path()); }).what(),
                 "has_reference"));
  rewrite([](auto& mj) { mj["n_images"] = 4; });
  CHECK(expect_error([&] { (void)load_store(tmp.path()); }).code() == Errc::kFormat);
  rewrite([](auto& mj) { mj["n_images"] = -1; });
  CHECK_THROWS_AS((void)load_store(tmp.path()), Error);

  std::ofstream(tmp / "manifest.json") << "{ not json";
  CHECK(expect_error([&] { (void)load_store(tmp.path()); }).code() == Errc::kFormat);
}

TEST_CASE("fuzzed containers fail only with library errors") {
  TempDir clean;
  save_store(testing::random_store(6, 2, 2, 4, 3, 16, true), clean.path());
  const std::vector<std::string> files = {"manifest.json", "initial.f32", "mlp.f32",
                                          "heads.f32",     "labels.u32",  "demographics.u32",
                                          "reference.f32"};
  Rng rng(2024);
  int rejected = 0;
  int accepted = 0;
  for (int trial = 0; trial < 400; ++trial) {
    TempDir tmp;
    for (const auto& f : files) {
      std::filesystem::copy_file(clean / f, tmp / f);
    }
    const auto& target = files[rng.uniform_index(files.size())];
    auto bytes = testing::read_bytes(tmp / target);
    switch (rng.uniform_index(4)) {
      case 0:  // flip random bytes
        for (int k = 0; k < 3 && !bytes.empty(); ++k) {
          bytes[rng.uniform_index(bytes.size())] =
              static_cast<unsigned char>(rng.uniform_index(256));
        }
        break;
      case 1:  // truncate
        bytes.resize(rng.uniform_index(bytes.size() + 1));
        break;
      case 2:  // append garbage
        for (int k = 0; k < 5; ++k) {
          bytes.push_back(static_cast<unsigned char>(rng.uniform_index(256)));
        }
        break;
      default:  // remove the file
        std::filesystem::remove(tmp / target);
        bytes.clear();
        break;
    }
    if (std::filesystem::exists(tmp / target) || !bytes.empty()) {
      testing::write_bytes(tmp / target, bytes);
    }
    try {
      (void)load_store(tmp.path());
      ++accepted;
    } catch (const Error&) {
      ++rejected;
    } catch (const std::exception& e) {
      FAIL("trial " << trial << " on " << target << ": " << e.what());
    }
  }
  CHECK(rejected > 300);
  MESSAGE("fuzz: " << rejected << " rejected, " << accepted << " accepted");
}
