#pragma once

#include <array>
#include <string>
#include <utility>
#include <vector>

#include "capsf/layers.hpp"
#include "capsf/weight_archive.hpp"

namespace capsf {

enum class ExtractorKind { vgg19_front, toy };

inline const char* extractor_kind_name(ExtractorKind k) {
  return k == ExtractorKind::vgg19_front ? "vgg19_front" : "toy";
}

inline ExtractorKind parse_extractor_kind(const std::string& s) {
  if (s == "vgg19_front" || s == "vgg") return ExtractorKind::vgg19_front;
  if (s == "toy") return ExtractorKind::toy;
  throw UsageError("unknown extractor kind '" + s + "' (expected vgg19_front or toy)");
}

inline constexpr std::size_t kInputSize = 128;
inline constexpr std::size_t kFeatureSize = 16;

struct VggLayer {
  const char* name;
  std::size_t in, out;
};

// VGG-19 convolutions up to the third max-pool.
inline constexpr std::array<VggLayer, 8> kVggFrontLayers{{
    {"conv1_1", 3, 64},
    {"conv1_2", 64, 64},
    {"conv2_1", 64, 128},
    {"conv2_2", 128, 128},
    {"conv3_1", 128, 256},
    {"conv3_2", 256, 256},
    {"conv3_3", 256, 256},
    {"conv3_4", 256, 256},
}};

/// Frozen convolutional front end mapping a normalized 3x128x128 face crop to
/// a Cx16x16 latent block.
///
/// vgg19_front reproduces VGG-19 blocks 1-3 and returns the third max-pool
/// output (after ReLU). toy is a two-convolution stand-in with the same
/// spatial contract for desk-scale runs.
template <typename T>
class FeatureExtractor {
 public:
  static FeatureExtractor toy(std::size_t channels, Rng& rng, bool frozen = true) {
    if (channels == 0) throw UsageError("toy extractor needs at least one channel");
    FeatureExtractor e;
    e.kind_ = ExtractorKind::toy;
    e.frozen_ = frozen;
    e.names_ = {"conv1", "conv2"};
    e.convs_.push_back(Conv<T>::make2d(3, 16, 3, 1, 1, rng, !frozen));
    e.convs_.push_back(Conv<T>::make2d(16, channels, 3, 1, 1, rng, !frozen));
    e.plan_ = {Step::conv, Step::relu, Step::pool, Step::conv, Step::relu, Step::pool, Step::pool};
    return e;
  }

  // Randomly initialized VGG front; useful for shape and budget checks when no
  // pretrained archive is at hand.
  static FeatureExtractor vgg19_front_random(Rng& rng) {
    FeatureExtractor e = vgg_skeleton();
    for (const auto& l : kVggFrontLayers) e.convs_.push_back(Conv<T>::make2d(l.in, l.out, 3, 1, 1, rng, false));
    return e;
  }

  /// Builds the VGG front from an archive holding conv1_1 ... conv3_4
  /// kernels [out,in,3,3] and biases [out].
  static FeatureExtractor vgg19_front(const WeightArchive& archive, const std::string& prefix = "") {
    FeatureExtractor e = vgg_skeleton();
    for (const auto& l : kVggFrontLayers) {
      const std::string base = prefix + l.name;
      for (const char* part : {".kernel", ".bias"}) {
        if (!archive.contains(base + part)) throw DataError("missing tensor " + base + part);
      }
      Conv<T> c;
      c.kernel = archive.get<T>(base + ".kernel", Shape{l.out, l.in, 3, 3});
      c.bias = archive.get<T>(base + ".bias", Shape{l.out});
      c.stride = 1;
      c.padding = 1;
      e.convs_.push_back(std::move(c));
    }
    return e;
  }

  static FeatureExtractor toy_from_archive(const WeightArchive& archive, const std::string& prefix) {
    FeatureExtractor e;
    e.kind_ = ExtractorKind::toy;
    e.names_ = {"conv1", "conv2"};
    for (const auto& n : e.names_) {
      Conv<T> c;
      c.kernel = archive.get<T>(prefix + n + ".kernel");
      c.bias = archive.get<T>(prefix + n + ".bias");
      if (c.kernel.rank() != 4 || c.bias.numel() != c.kernel.dim(0))
        throw DataError("tensor " + prefix + n + " is not a 3x3 convolution");
      c.padding = 1;
      e.convs_.push_back(std::move(c));
    }
    if (e.convs_[0].kernel.shape() != Shape{16, 3, 3, 3} || e.convs_[1].kernel.dim(1) != 16)
      throw DataError("toy extractor tensors have unexpected shapes");
    e.plan_ = {Step::conv, Step::relu, Step::pool, Step::conv, Step::relu, Step::pool, Step::pool};
    return e;
  }

  ExtractorKind kind() const { return kind_; }
  bool frozen() const { return frozen_; }
  std::size_t output_channels() const { return convs_.back().kernel.dim(0); }

  /// [3,128,128] -> [C,16,16], or batched [N,3,128,128] -> [N,C,16,16].
  Tensor<T> extract(const Tensor<T>& x) const {
    const auto& s = x.shape();
    const bool ok = (s.size() == 3 && s == Shape{3, kInputSize, kInputSize}) ||
                    (s.size() == 4 && s[1] == 3 && s[2] == kInputSize && s[3] == kInputSize);
    if (!ok) throw UsageError("extract: expected input [3,128,128] or [N,3,128,128], got " + shape_str(s));
    Tensor<T> h = x;
    std::size_t next = 0;
    for (Step step : plan_) {
      switch (step) {
        case Step::conv: h = convs_[next++].forward(h); break;
        case Step::relu: h = ops::relu(h); break;
        case Step::pool: h = ops::maxpool2d(h); break;
      }
    }
    return h;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& c : convs_) n += c.parameter_count();
    return n;
  }

  std::vector<NamedTensor<T>> parameters() const {
    std::vector<NamedTensor<T>> out;
    for (std::size_t i = 0; i < convs_.size(); ++i) convs_[i].collect(names_[i], out);
    return out;
  }

 private:
  enum class Step { conv, relu, pool };

  static FeatureExtractor vgg_skeleton() {
    FeatureExtractor e;
    e.kind_ = ExtractorKind::vgg19_front;
    for (const auto& l : kVggFrontLayers) e.names_.emplace_back(l.name);
    e.plan_ = {Step::conv, Step::relu, Step::conv, Step::relu, Step::pool,
               Step::conv, Step::relu, Step::conv, Step::relu, Step::pool,
               Step::conv, Step::relu, Step::conv, Step::relu, Step::conv,
               Step::relu, Step::conv, Step::relu, Step::pool};
    return e;
  }

  ExtractorKind kind_ = ExtractorKind::toy;
  bool frozen_ = true;
  std::vector<std::string> names_;
  std::vector<Conv<T>> convs_;
  std::vector<Step> plan_;
};

template <typename T>
FeatureExtractor<T> build_vgg_front(const WeightArchive& archive) {
  return FeatureExtractor<T>::vgg19_front(archive);
}

}  // namespace capsf
