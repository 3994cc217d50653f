#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>
#include <fstream>
#include <thread>

#include "capsf/extractor.hpp"
#include "capsf/weight_archive.hpp"

using namespace capsf;

namespace {

// VGG-19 block 1-3 shapes written out independently of kVggFrontLayers.
struct LayerSpec {
  std::string name;
  std::size_t in, out;
};
const std::vector<LayerSpec> kVgg = {{"conv1_1", 3, 64},    {"conv1_2", 64, 64},   {"conv2_1", 64, 128},
                                     {"conv2_2", 128, 128}, {"conv3_1", 128, 256}, {"conv3_2", 256, 256},
                                     {"conv3_3", 256, 256}, {"conv3_4", 256, 256}};

WeightArchive vgg_archive(Rng& rng, const std::string& skip = "") {
  WeightArchive ar;
  for (const auto& l : kVgg) {
    if (l.name == skip) continue;
    std::vector<float> k(l.out * l.in * 9), b(l.out);
    for (auto& x : k) x = static_cast<float>(rng.uniform(-0.05, 0.05));
    for (auto& x : b) x = static_cast<float>(rng.uniform(-0.05, 0.05));
    ar.add(l.name + ".kernel", Tensor<float>({l.out, l.in, 3, 3}, k));
    ar.add(l.name + ".bias", Tensor<float>({l.out}, b));
  }
  return ar;
}

Tensor<float> random_image(Rng& rng, std::size_t batch = 0) {
  Shape s = batch ? Shape{batch, 3, 128, 128} : Shape{3, 128, 128};
  std::vector<float> v(shape_numel(s));
  for (auto& x : v) x = static_cast<float>(rng.uniform(-2.0, 2.0));
  return Tensor<float>(s, v);
}

std::filesystem::path temp_path(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "capsf_test_extractor";
  std::filesystem::create_directories(dir);
  return dir / name;
}

}  // namespace

TEST(ToyExtractor, OutputShape) {
  Rng rng(1);
  const auto e = FeatureExtractor<float>::toy(32, rng);
  const auto y = e.extract(random_image(rng));
  EXPECT_EQ(y.shape(), (Shape{32, 16, 16}));
  const auto yb = e.extract(random_image(rng, 2));
  EXPECT_EQ(yb.shape(), (Shape{2, 32, 16, 16}));
}

TEST(ToyExtractor, ZeroInputZeroBiasGivesZero) {
  Rng rng(2);
  auto e = FeatureExtractor<float>::toy(32, rng);
  for (auto& p : e.parameters())
    if (p.name.ends_with(".bias")) {
      auto t = p.tensor;
      std::fill(t.mutable_data().begin(), t.mutable_data().end(), 0.0f);
    }
  const auto y = e.extract(Tensor<float>::zeros({3, 128, 128}));
  for (float v : y.data()) ASSERT_EQ(v, 0.0f);
}

TEST(ToyExtractor, ParametersAreFrozen) {
  Rng rng(3);
  const auto e = FeatureExtractor<float>::toy(8, rng);
  EXPECT_TRUE(e.frozen());
  for (const auto& p : e.parameters()) EXPECT_FALSE(p.tensor.requires_grad()) << p.name;
}

TEST(ToyExtractor, RejectsWrongInputShape) {
  Rng rng(4);
  const auto e = FeatureExtractor<float>::toy(8, rng);
  EXPECT_THROW(e.extract(Tensor<float>::zeros({3, 64, 64})), UsageError);
  EXPECT_THROW(e.extract(Tensor<float>::zeros({1, 128, 128})), UsageError);
}

TEST(Extractor, PureAcrossCallsAndThreads) {
  Rng rng(5);
  const auto e = FeatureExtractor<float>::toy(16, rng);
  const auto x = random_image(rng);
  const auto ref = e.extract(x).values();
  EXPECT_EQ(e.extract(x).values(), ref);
  std::vector<std::vector<float>> results(4);
  {
    std::vector<std::jthread> pool;
    for (std::size_t t = 0; t < results.size(); ++t)
      pool.emplace_back([&, t] { results[t] = e.extract(x).values(); });
  }
  for (const auto& r : results) EXPECT_EQ(r, ref);
}

TEST(VggFront, ParameterCountMatchesLayerArithmetic) {
  std::size_t expected = 0;
  for (const auto& l : kVgg) expected += l.out * l.in * 9 + l.out;
  EXPECT_EQ(expected, 2325568u);
  Rng rng(6);
  const auto ar = vgg_archive(rng);
  const auto e = build_vgg_front<float>(ar);
  EXPECT_EQ(e.parameter_count(), expected);
  EXPECT_EQ(e.output_channels(), 256u);
}

TEST(VggFront, RandomInitOutputShape) {
  Rng rng(7);
  const auto e = FeatureExtractor<float>::vgg19_front_random(rng);
  EXPECT_EQ(e.extract(random_image(rng)).shape(), (Shape{256, 16, 16}));
}

TEST(VggFront, MissingLayerIsNamed) {
  Rng rng(8);
  const auto ar = vgg_archive(rng, "conv3_4");
  try {
    build_vgg_front<float>(ar);
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("conv3_4"), std::string::npos) << e.what();
  }
}

TEST(VggFront, WrongShapeIsRejected) {
  WeightArchive ar;
  Rng rng(9);
  for (const auto& l : kVgg) {
    const std::size_t in = l.name == "conv2_1" ? 32 : l.in;
    ar.add(l.name + ".kernel", Tensor<float>::zeros({l.out, in, 3, 3}));
    ar.add(l.name + ".bias", Tensor<float>::zeros({l.out}));
  }
  EXPECT_THROW(build_vgg_front<float>(ar), DataError);
}

TEST(WeightArchive, ByteExactRoundTrip) {
  Rng rng(10);
  WeightArchive ar = vgg_archive(rng);
  ar.set_meta("source", "test fixture");
  ar.add("extra", Tensor<double>({2, 3}, {1, 2, 3, 4, 5, 6}), DType::f64);
  const auto bytes = ar.to_bytes();
  const auto back = WeightArchive::from_bytes(bytes);
  EXPECT_EQ(back.to_bytes(), bytes);
  EXPECT_EQ(back.meta_value("source"), "test fixture");
  EXPECT_EQ(back.get<double>("extra").values(), (std::vector<double>{1, 2, 3, 4, 5, 6}));

  const auto path = temp_path("roundtrip.wa");
  ar.save(path);
  const auto loaded = load_archive(path);
  EXPECT_EQ(loaded.to_bytes(), bytes);
  std::ifstream in(path, std::ios::binary);
  std::vector<std::uint8_t> file((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  EXPECT_EQ(file, bytes);
}

TEST(WeightArchive, LayoutMatchesDocumentation) {
  WeightArchive ar;
  ar.add("a", Tensor<float>({2}, {1.0f, -2.0f}));
  const auto bytes = ar.to_bytes();
  ASSERT_GE(bytes.size(), 16u);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 8), "CAPSFWA1");
  std::uint64_t hlen = 0;
  for (int i = 7; i >= 0; --i) hlen = (hlen << 8) | bytes[8 + i];
  const std::string header(bytes.begin() + 16, bytes.begin() + 16 + static_cast<long>(hlen));
  EXPECT_EQ(header, "tensor a f32 2 0\n");
  ASSERT_EQ(bytes.size(), 16 + hlen + 8);
  float v[2];
  std::memcpy(v, bytes.data() + 16 + hlen, 8);  // little-endian host
  EXPECT_EQ(v[0], 1.0f);
  EXPECT_EQ(v[1], -2.0f);
}

TEST(WeightArchive, CorruptInputsAreRejected) {
  WeightArchive ar;
  ar.add("a", Tensor<float>({4}, {1, 2, 3, 4}));
  ar.add("b", Tensor<float>({2}, {5, 6}));
  const auto good = ar.to_bytes();

  auto bad_magic = good;
  bad_magic[0] = 'X';
  EXPECT_THROW(WeightArchive::from_bytes(bad_magic), DataError);

  auto truncated = good;
  truncated.pop_back();
  EXPECT_THROW(WeightArchive::from_bytes(truncated), DataError);

  auto extra = good;
  extra.push_back(0);
  EXPECT_THROW(WeightArchive::from_bytes(extra), DataError);

  auto huge_header = good;
  huge_header[15] = 0x7f;
  EXPECT_THROW(WeightArchive::from_bytes(huge_header), DataError);

  auto rebuild = [](const std::string& header, std::size_t blob) {
    std::vector<std::uint8_t> out(16 + header.size() + blob, 0);
    std::memcpy(out.data(), "CAPSFWA1", 8);
    for (int i = 0; i < 8; ++i) out[8 + i] = static_cast<std::uint8_t>(header.size() >> (8 * i));
    std::memcpy(out.data() + 16, header.data(), header.size());
    return out;
  };
  EXPECT_NO_THROW(WeightArchive::from_bytes(rebuild("tensor a f32 4 0\n", 16)));
  EXPECT_THROW(WeightArchive::from_bytes(rebuild("tensor a f32 4 4\n", 16)), DataError);        // gap
  EXPECT_THROW(WeightArchive::from_bytes(rebuild("tensor a f16 4 0\n", 8)), DataError);         // dtype
  EXPECT_THROW(WeightArchive::from_bytes(rebuild("tensor a f32 0,4 0\n", 0)), DataError);       // zero dim
  EXPECT_THROW(WeightArchive::from_bytes(rebuild("tensor a f32 x 0\n", 4)), DataError);         // dims
  EXPECT_THROW(WeightArchive::from_bytes(rebuild("weights a f32 4 0\n", 16)), DataError);       // record
  EXPECT_THROW(WeightArchive::from_bytes(rebuild("tensor a f32 2 0\ntensor a f32 2 8\n", 16)),  // duplicate
               DataError);
  EXPECT_THROW(WeightArchive::from_bytes(rebuild("tensor a f32 2 0\ntensor b f32 2 4\n", 16)),  // overlap
               DataError);
  EXPECT_THROW(WeightArchive::from_bytes(rebuild("meta k 1\nmeta k 2\ntensor a f32 4 0\n", 16)), DataError);
}

TEST(WeightArchive, MissingTensorAndShapeMismatch) {
  WeightArchive ar;
  ar.add("a", Tensor<float>({2, 2}, {1, 2, 3, 4}));
  try {
    ar.get<float>("nope");
    FAIL();
  } catch (const DataError& e) {
    EXPECT_EQ(std::string(e.what()), "missing tensor nope");
  }
  EXPECT_THROW(ar.get<float>("a", Shape{4}), DataError);
  EXPECT_EQ(ar.get<float>("a", Shape{2, 2}).values(), (std::vector<float>{1, 2, 3, 4}));
  EXPECT_THROW(ar.add("a", Tensor<float>({1}, {0})), UsageError);
  EXPECT_THROW(ar.add("has space", Tensor<float>({1}, {0})), UsageError);
  EXPECT_THROW(load_archive(temp_path("does_not_exist.wa")), DataError);
}

TEST(WeightArchive, F32StorageRoundsDoubles) {
  WeightArchive ar;
  const double x = 0.1;
  ar.add("x", Tensor<double>({1}, {x}), DType::f32);
  ar.add("y", Tensor<double>({1}, {x}), DType::f64);
  EXPECT_EQ(ar.get<double>("x").item(), static_cast<double>(static_cast<float>(x)));
  EXPECT_EQ(ar.get<double>("y").item(), x);
}
