#include <gtest/gtest.h>

#include <filesystem>
#include <random>
#include <set>

#include "r2i/data.hpp"

using namespace r2i;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("r2i_test_data_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::map<std::string, std::vector<std::uint8_t>> tree_bytes(const fs::path& root) {
  std::map<std::string, std::vector<std::uint8_t>> out;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) out[fs::relative(e.path(), root).generic_string()] = read_file_bytes(e.path());
  return out;
}

}  // namespace

TEST(Renderer, DetectorsAgreeOnEveryJitterCombination) {
  int checked = 0;
  for (Domain d : {Domain::skeleton, Domain::creature})
    for (int c = 0; c < toy_class_count; ++c)
      for (Orientation o : {Orientation::left, Orientation::right})
        for (int cx = 14; cx <= 18; ++cx)
          for (int cy = 15; cy <= 19; ++cy)
            for (int r = 6; r <= 8; ++r)
              for (int len = 4; len <= 5; ++len)
                for (double tone : {-0.1, 0.0, 0.1}) {
                  const GlyphSpec g{c, o, {cx, cy, r, len, d == Domain::creature ? tone * 0.3 : tone}, d};
                  const Tensor img = render_glyph(g);
                  ASSERT_EQ(spike_class_of(img), c);
                  ASSERT_EQ(orientation_of(img), o);
                  ASSERT_EQ(orientation_of(flip_horizontal(img)), o == Orientation::left ? Orientation::right : Orientation::left);
                  ++checked;
                }
  EXPECT_EQ(checked, 2 * 6 * 2 * 5 * 5 * 3 * 2 * 3);
}

TEST(Renderer, PixelsSurvivePngRoundTrip) {
  const Tensor img = render_glyph({3, Orientation::left, {}, Domain::creature});
  EXPECT_TRUE(bitwise_equal(decode_png(encode_png(img)), img));
}

TEST(Orientation, AllBlackIsNoSubject) {
  const Tensor black({32, 32, 3}, -1.0f);
  try {
    orientation_of(black);
    FAIL();
  } catch (const NoSubjectError& e) {
    EXPECT_STREQ(e.what(), "no subject");
  }
}

TEST(Split, HashSplitOf121FilesIsNearTenPercent) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    int test = 0;
    for (int i = 0; i < 121; ++i) test += split_of(uuid4(rng) + ".png", 0.1) == Split::test;
    EXPECT_GE(test, 12 - 6);
    EXPECT_LE(test, 12 + 6);
  }
}

TEST(Split, Fnv1aKnownValues) {
  EXPECT_EQ(fnv1a(""), 0xcbf29ce484222325ULL);
  EXPECT_EQ(fnv1a("a"), 0xaf63dc4c8601ec8cULL);
}

TEST(ToyDataset, RejectsTooFewImages) {
  EXPECT_THROW(plan_toy_dataset(1, {5, 6}, Domain::creature), std::invalid_argument);
}

TEST(ToyDataset, GenerationIsByteDeterministicAndRoundTrips) {
  const ToyCounts counts{60, 13};
  const fs::path a = scratch("a"), b = scratch("b");
  const DatasetManifest ma = gen_toy_dataset(a, 7, counts);
  gen_toy_dataset(b, 7, counts);
  EXPECT_EQ(tree_bytes(a), tree_bytes(b));

  const DatasetManifest loaded = load_manifest(a);
  EXPECT_EQ(loaded.class_names, toy_class_names());
  EXPECT_EQ(loaded.records, ma.records);
  EXPECT_TRUE(loaded.warnings.empty());
  EXPECT_EQ(read_manifest_jsonl(a / "manifest.jsonl").records, ma.records);

  for (const char* dom : {"skeleton", "creature"}) {
    EXPECT_EQ(ma.select(dom, Split::train).size(), 60u);
    EXPECT_EQ(ma.select(dom, Split::test).size(), 13u);
    for (Split s : {Split::train, Split::test}) {
      std::map<int, int> per_class;
      for (const auto& r : ma.select(dom, s)) ++per_class[r.class_id];
      ASSERT_EQ(per_class.size(), 6u);
      int lo = 1 << 30, hi = 0;
      for (auto [c, n] : per_class) lo = std::min(lo, n), hi = std::max(hi, n);
      EXPECT_LE(hi - lo, 1);
    }
  }
  for (const auto& r : ma.records) {
    const Tensor img = read_png(a / r.path);
    EXPECT_EQ(spike_class_of(img), r.class_id);
    EXPECT_EQ(orientation_of(img), r.orientation);
  }
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST(ToyDataset, DefaultCountsGive1080And121PerDomain) {
  for (Domain d : {Domain::skeleton, Domain::creature}) {
    const auto plan = plan_toy_dataset(3, {}, d);
    EXPECT_EQ(std::count_if(plan.begin(), plan.end(), [](auto& s) { return s.split == Split::train; }), 1080);
    EXPECT_EQ(std::count_if(plan.begin(), plan.end(), [](auto& s) { return s.split == Split::test; }), 121);
  }
}

TEST(ToyDataset, DomainsAreUnpaired) {
  const auto skel = plan_toy_dataset(3, {}, Domain::skeleton), crea = plan_toy_dataset(3, {}, Domain::creature);
  std::set<GlyphJitter> js;
  for (const auto& s : skel) js.insert(s.spec.jitter);
  for (const auto& s : crea) EXPECT_FALSE(js.count(s.spec.jitter));
  EXPECT_NE(domain_seed(3, Domain::skeleton), domain_seed(3, Domain::creature));
}

TEST(LoadManifest, MixedSizesNameBothFiles) {
  const fs::path root = scratch("mixed");
  write_png(root / "skeleton/a/small.png", Tensor({32, 32, 3}));
  write_png(root / "skeleton/a/big.png", Tensor({64, 64, 3}));
  try {
    load_manifest(root);
    FAIL();
  } catch (const std::invalid_argument& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("skeleton/a/small.png"), std::string::npos);
    EXPECT_NE(msg.find("skeleton/a/big.png"), std::string::npos);
  }
  fs::remove_all(root);
}

TEST(LoadManifest, EmptyClassDirectoryWarnsAndUnknownOrientation) {
  const fs::path root = scratch("empty");
  fs::create_directories(root / "creature/ghost");
  write_png(root / "creature/cat/x.png", Tensor({32, 32, 3}, -1.0f));
  const auto m = load_manifest(root);
  ASSERT_EQ(m.warnings.size(), 1u);
  EXPECT_NE(m.warnings[0].find("creature/ghost"), std::string::npos);
  ASSERT_EQ(m.records.size(), 1u);
  EXPECT_EQ(m.records[0].orientation, Orientation::unknown);
  EXPECT_EQ(m.class_names, std::vector<std::string>{"cat"});
  fs::remove_all(root);
}

TEST(LoadManifest, MissingRootRejected) {
  EXPECT_THROW(load_manifest("/nonexistent/r2i"), std::invalid_argument);
}
