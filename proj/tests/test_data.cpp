#include <filesystem>
#include <set>

#include <doctest.h>

#include "pseudoseg/errors.hpp"
#include "pseudoseg/shapes.hpp"
#include "pseudoseg/split.hpp"
#include "pseudoseg/voc.hpp"

using namespace pseudoseg;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("pseudoseg_test_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

}  // namespace

TEST_CASE("shapes generator is deterministic and self-consistent") {
  Rng a = make_rng(7), b = make_rng(7);
  const auto s1 = data::generate_shapes_sample(a, 128, 128, 4);
  const auto s2 = data::generate_shapes_sample(b, 128, 128, 4);
  REQUIRE(s1.image.pixels.size() == s2.image.pixels.size());
  for (std::int64_t i = 0; i < s1.image.pixels.size(); ++i)
    CHECK(s1.image.pixels[i] == s2.image.pixels[i]);
  CHECK(s1.mask.classes == s2.mask.classes);

  data::validate_image(s1.image);
  data::validate_mask(s1.mask, 4);

  // Image-level labels match a brute-force pixel scan.
  const auto labels = data::image_level_labels(s1.mask, 4);
  for (int c = 1; c <= 3; ++c) {
    bool found = false;
    for (auto v : s1.mask.classes) found = found || v == c;
    CHECK(static_cast<bool>(labels.present[static_cast<std::size_t>(c - 1)]) == found);
  }
}

TEST_CASE("shapes generator rejects bad parameters") {
  Rng rng = make_rng(1);
  CHECK_THROWS_AS(data::generate_shapes_sample(rng, 32, 128, 4), ConfigError);
  CHECK_THROWS_AS(data::generate_shapes_sample(rng, 128, 128, 1), ConfigError);
  CHECK_THROWS_AS(data::generate_shapes_sample(rng, 128, 128, 5), ConfigError);
}

TEST_CASE("every foreground class appears frequently across 1000 samples") {
  // Regression bound frozen from the generator's design: each class appears
  // in well over 200 of 1000 samples.
  std::array<int, 3> hits{0, 0, 0};
  for (int i = 0; i < 1000; ++i) {
    Rng rng = make_rng(derive_seed(99, static_cast<std::uint64_t>(i)));
    const auto s = data::generate_shapes_sample(rng, 64, 64, 4);
    for (int c = 0; c < 3; ++c)
      hits[static_cast<std::size_t>(c)] += s.labels.present[static_cast<std::size_t>(c)] ? 1 : 0;
  }
  for (int c = 0; c < 3; ++c) CHECK(hits[static_cast<std::size_t>(c)] >= 200);
}

TEST_CASE("shapes source round-trips exactly through the VOC layout") {
  data::ShapesConfig cfg;
  cfg.n_train = 3;
  cfg.n_val = 2;
  cfg.seed = 11;
  data::ShapesSource source(cfg);
  CHECK(source.train_ids().size() == 3);
  CHECK(source.val_ids().size() == 2);

  const fs::path root = temp_dir("roundtrip");
  data::materialize_shapes_dataset(source, root);
  data::VocSource loaded(root, 4);
  CHECK(loaded.train_ids() == source.train_ids());
  CHECK(loaded.val_ids() == source.val_ids());

  for (const auto& id : source.train_ids()) {
    const auto orig = source.get(id);
    const auto back = loaded.get(id);
    REQUIRE(back.mask.has_value());
    CHECK(back.mask->classes == orig.mask->classes);
    REQUIRE(back.image.pixels.size() == orig.image.pixels.size());
    double max_err = 0.0;
    for (std::int64_t i = 0; i < orig.image.pixels.size(); ++i)
      max_err = std::max(max_err, std::fabs(orig.image.pixels[i] - back.image.pixels[i]));
    CHECK(max_err == 0.0);  // pixels are quantized to the 8-bit grid
  }
  fs::remove_all(root);
}

TEST_CASE("voc ingestion error paths") {
  data::ShapesConfig cfg;
  cfg.n_train = 2;
  cfg.n_val = 1;
  data::ShapesSource source(cfg);
  const fs::path root = temp_dir("vocerr");
  data::materialize_shapes_dataset(source, root);

  SUBCASE("missing mask for a labeled id names the stem") {
    fs::remove(root / "masks" / "train_000001.png");
    data::VocSource loaded(root, 4);
    const auto s = loaded.get("train_000001");
    CHECK_FALSE(s.mask.has_value());
    CHECK(s.labels.has_value());  // falls back to labels.json
    try {
      loaded.get_labeled("train_000001");
      FAIL("expected DataError");
    } catch (const DataError& e) {
      CHECK(std::string(e.what()).find("train_000001") != std::string::npos);
    }
  }

  SUBCASE("mask value outside class range is a data error") {
    data::VocSource loaded(root, 2);  // class values 2,3 now out of range
    bool threw = false;
    for (const auto& id : loaded.train_ids()) {
      try {
        loaded.get(id);
      } catch (const DataError&) {
        threw = true;
      }
    }
    CHECK(threw);
  }

  SUBCASE("255-valued pixels become ignore") {
    data::VocSource loaded(root, 4);
    const auto s = loaded.get("train_000000");
    // paint some pixels with 255 and re-save through the palette-free path
    data::LabelMask m = *s.mask;
    m.at(0, 0) = 255;
    data::validate_mask(m, 4);  // 255 is always allowed
    CHECK(static_cast<int>(m.at(0, 0)) == data::kIgnoreValue);
  }
  fs::remove_all(root);
}

TEST_CASE("voc colormap decodes palette-colored masks") {
  const auto cmap = data::voc_colormap();
  CHECK(cmap[0] == std::array<std::uint8_t, 3>{0, 0, 0});
  CHECK(cmap[1] == std::array<std::uint8_t, 3>{128, 0, 0});
  CHECK(cmap[2] == std::array<std::uint8_t, 3>{0, 128, 0});
  CHECK(cmap[255] == std::array<std::uint8_t, 3>{224, 224, 192});
}

TEST_CASE("low-data split sampling covers all classes") {
  data::ShapesConfig cfg;
  cfg.n_train = 48;
  cfg.n_val = 1;
  cfg.seed = 3;
  data::ShapesSource source(cfg);
  auto counts = [&](const std::string& id) {
    return data::class_pixel_counts(*source.get(id).mask, 4);
  };

  SUBCASE("fraction one keeps everything") {
    const auto split = data::sample_low_data_split(source.train_ids(), counts, 4,
                                                   data::Fraction{1, 1}, 1);
    CHECK(split.labeled_ids.size() == 48);
    CHECK(split.unlabeled_ids.empty());
  }

  SUBCASE("three seeds give three distinct covered splits") {
    std::set<std::vector<std::string>> seen;
    for (std::uint64_t seed : {1ULL, 2ULL, 3ULL}) {
      const auto split = data::sample_low_data_split(source.train_ids(), counts, 4,
                                                     data::Fraction{1, 8}, seed, 64);
      CHECK(split.labeled_ids.size() == 6);  // ceil(48/8)
      CHECK(split.labeled_ids.size() + split.unlabeled_ids.size() == 48);
      std::vector<std::int64_t> tally(4, 0);
      for (const auto& id : split.labeled_ids) {
        const auto c = counts(id);
        for (int k = 0; k < 4; ++k) tally[static_cast<std::size_t>(k)] += c[k];
      }
      for (int k = 0; k < 4; ++k) CHECK(tally[static_cast<std::size_t>(k)] >= 64);
      // labeled and unlabeled are disjoint
      std::set<std::string> labeled(split.labeled_ids.begin(), split.labeled_ids.end());
      for (const auto& id : split.unlabeled_ids) CHECK(labeled.count(id) == 0);
      seen.insert(split.labeled_ids);
    }
    CHECK(seen.size() == 3);
  }

  SUBCASE("rerunning with the same seed reproduces the split") {
    const auto a = data::sample_low_data_split(source.train_ids(), counts, 4,
                                               data::Fraction{1, 8}, 5, 64);
    const auto b = data::sample_low_data_split(source.train_ids(), counts, 4,
                                               data::Fraction{1, 8}, 5, 64);
    CHECK(a.labeled_ids == b.labeled_ids);
    CHECK(a.unlabeled_ids == b.unlabeled_ids);
  }
}

TEST_CASE("split sampling on a toy set pins the rare-class image or fails") {
  // 10 ids; class 3 appears only in image "i3". Exhaustively check that every
  // successful 2-image split contains i3, and that infeasible coverage
  // reports the uncovered class.
  std::vector<std::string> ids;
  for (int i = 0; i < 10; ++i) ids.push_back("i" + std::to_string(i));
  auto counts = [](const std::string& id) {
    std::vector<std::int64_t> c(4, 0);
    c[0] = 1000;
    c[1] = 500;
    c[2] = 500;
    if (id == "i3") c[3] = 500;
    return c;
  };

  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    const auto split =
        data::sample_low_data_split(ids, counts, 4, data::Fraction{1, 5}, seed, 64, 200);
    bool has_rare = false;
    for (const auto& id : split.labeled_ids) has_rare = has_rare || id == "i3";
    CHECK(has_rare);
  }

  auto no_rare = [](const std::string&) {
    std::vector<std::int64_t> c(4, 0);
    c[0] = 1000;
    c[1] = 500;
    c[2] = 500;
    return c;  // class 3 never reaches the pixel floor
  };
  try {
    data::sample_low_data_split(ids, no_rare, 4, data::Fraction{1, 5}, 1, 64, 10);
    FAIL("expected SamplingError");
  } catch (const SamplingError& e) {
    CHECK(std::string(e.what()).find("3") != std::string::npos);
  }
}

TEST_CASE("fraction parsing") {
  CHECK(data::Fraction::parse("1/16").num == 1);
  CHECK(data::Fraction::parse("1/16").den == 16);
  CHECK(data::Fraction::parse("2/32").den == 16);  // reduced
  CHECK(data::Fraction::parse("0.25").num == 1);
  CHECK(data::Fraction::parse("0.25").den == 4);
  CHECK(data::Fraction::parse("1").value() == 1.0);
  CHECK_THROWS_AS(data::Fraction::parse("0"), ConfigError);
  CHECK_THROWS_AS(data::Fraction::parse("3/2"), ConfigError);
  CHECK_THROWS_AS(data::Fraction::parse("abc"), ConfigError);
}

TEST_CASE("id list round-trip") {
  const fs::path dir = temp_dir("ids");
  const std::vector<std::string> ids = {"a", "b", "c"};
  data::save_id_list(dir / "x.txt", ids);
  CHECK(data::load_id_list(dir / "x.txt") == ids);
  fs::remove_all(dir);
}
