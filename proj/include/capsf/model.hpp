#pragma once

#include <array>
#include <map>
#include <sstream>
#include <string>
#include <type_traits>

#include "capsf/capsnet.hpp"
#include "capsf/extractor.hpp"
#include "capsf/weight_archive.hpp"

namespace capsf {

struct ModelConfig {
  ExtractorKind extractor = ExtractorKind::vgg19_front;
  std::size_t toy_channels = 32;
  CapsNetConfig capsnet;
  RoutingConfig routing;
  // Per-channel normalization applied after scaling pixels to [0,1]; the
  // defaults are the statistics published with the ImageNet VGG weights.
  std::array<double, 3> mean{0.485, 0.456, 0.406};
  std::array<double, 3> std{0.229, 0.224, 0.225};
};

namespace detail {

inline std::string join3(const std::array<double, 3>& v) {
  std::ostringstream oss;
  oss.precision(17);
  oss << v[0] << ',' << v[1] << ',' << v[2];
  return oss.str();
}

inline std::array<double, 3> split3(const std::string& s, const std::string& what) {
  std::array<double, 3> out{};
  std::istringstream iss(s);
  std::string tok;
  for (std::size_t i = 0; i < 3; ++i) {
    if (!std::getline(iss, tok, ',')) throw DataError("malformed " + what + " '" + s + "'");
    try {
      out[i] = std::stod(tok);
    } catch (const std::exception&) {
      throw DataError("malformed " + what + " '" + s + "'");
    }
  }
  return out;
}

inline std::size_t meta_size(const WeightArchive& ar, const std::string& key) {
  const std::string v = ar.meta_value(key);
  try {
    return static_cast<std::size_t>(std::stoull(v));
  } catch (const std::exception&) {
    throw DataError("checkpoint metadata " + key + " is not an integer: '" + v + "'");
  }
}

inline double meta_double(const WeightArchive& ar, const std::string& key) {
  const std::string v = ar.meta_value(key);
  try {
    return std::stod(v);
  } catch (const std::exception&) {
    throw DataError("checkpoint metadata " + key + " is not a number: '" + v + "'");
  }
}

inline std::string fmt_double(double v) {
  std::ostringstream oss;
  oss.precision(17);
  oss << v;
  return oss.str();
}

}  // namespace detail

/// Frozen feature extractor followed by the capsule network.
template <typename T>
class ForensicsModel {
 public:
  ForensicsModel() = default;

  /// Fresh model. The VGG front needs an archive; pass nullptr to get a
  /// randomly initialized front (shape and budget checks only).
  static ForensicsModel create(ModelConfig cfg, Rng& init_rng, const WeightArchive* vgg_archive = nullptr) {
    ForensicsModel m;
    if (cfg.extractor == ExtractorKind::toy) {
      m.extractor_ = FeatureExtractor<T>::toy(cfg.toy_channels, init_rng);
    } else if (vgg_archive) {
      m.extractor_ = FeatureExtractor<T>::vgg19_front(*vgg_archive);
    } else {
      m.extractor_ = FeatureExtractor<T>::vgg19_front_random(init_rng);
    }
    cfg.capsnet.layout.in_channels = m.extractor_.output_channels();
    cfg.routing.validate();
    m.net_ = CapsuleNet<T>(cfg.capsnet, init_rng);
    m.cfg_ = cfg;
    return m;
  }

  const ModelConfig& config() const { return cfg_; }
  const FeatureExtractor<T>& extractor() const { return extractor_; }
  const CapsuleNet<T>& net() const { return net_; }

  Tensor<T> features(const Tensor<T>& image) const { return extractor_.extract(image); }

  CapsuleOutputs<T> forward(const Tensor<T>& features, const RoutingConfig& routing, Rng* noise_rng) const {
    return net_.forward(features, routing, noise_rng);
  }

  RoutingConfig routing(Mode mode) const {
    RoutingConfig r = cfg_.routing;
    r.mode = mode;
    return r;
  }

  std::size_t frozen_parameter_count() const { return extractor_.parameter_count(); }
  std::size_t trainable_parameter_count() const { return net_.parameter_count(); }
  std::size_t parameter_count() const { return frozen_parameter_count() + trainable_parameter_count(); }

  std::vector<NamedTensor<T>> trainable_parameters() const { return net_.parameters(); }

  /// Everything needed to rebuild the model, including batch-norm running
  /// statistics. `extra_meta` is stored alongside (e.g. optimizer settings).
  WeightArchive to_archive(const std::map<std::string, std::string>& extra_meta = {}) const {
    WeightArchive ar;
    const auto& c = cfg_;
    const auto& l = c.capsnet.layout;
    ar.set_meta("format", "capsf-checkpoint-1");
    ar.set_meta("extractor", extractor_kind_name(c.extractor));
    ar.set_meta("toy_channels", std::to_string(c.toy_channels));
    ar.set_meta("capsule.in_channels", std::to_string(l.in_channels));
    ar.set_meta("capsule.hidden", std::to_string(l.hidden));
    ar.set_meta("capsule.pooled", std::to_string(l.pooled));
    ar.set_meta("capsule.head_channels", std::to_string(l.head_channels));
    ar.set_meta("capsule.head_kernel", std::to_string(l.head_kernel));
    ar.set_meta("capsule.head_stride", std::to_string(l.head_stride));
    ar.set_meta("capsule.out_kernel", std::to_string(l.out_kernel));
    ar.set_meta("capsule.dim", std::to_string(l.capsule_dim()));
    ar.set_meta("primary_capsules", std::to_string(c.capsnet.primary_capsules));
    ar.set_meta("output_capsules", std::to_string(c.capsnet.output_capsules));
    ar.set_meta("output_dim", std::to_string(c.capsnet.output_dim));
    ar.set_meta("routing.sharing", sharing_name(c.capsnet.sharing));
    ar.set_meta("routing.iterations", std::to_string(c.routing.iterations));
    ar.set_meta("routing.noise_sigma", detail::fmt_double(c.routing.noise_sigma));
    ar.set_meta("routing.noise_scale", c.routing.noise_scale == NoiseScale::std_dev ? "std_dev" : "variance");
    ar.set_meta("classes", "0=real,1=fake");
    ar.set_meta("normalize.mean", detail::join3(c.mean));
    ar.set_meta("normalize.std", detail::join3(c.std));
    for (const auto& [k, v] : extra_meta) ar.set_meta(k, v);
    const DType dtype = std::is_same_v<T, float> ? DType::f32 : DType::f64;
    for (const auto& p : extractor_.parameters()) ar.add("extractor." + p.name, p.tensor, dtype);
    for (const auto& p : net_.parameters()) ar.add(p.name, p.tensor, dtype);
    for (const auto& b : net_.buffers()) ar.add(b.name, b.tensor, dtype);
    return ar;
  }

  void save(const std::filesystem::path& path, const std::map<std::string, std::string>& extra_meta = {}) const {
    to_archive(extra_meta).save(path);
  }

  static ForensicsModel from_archive(const WeightArchive& ar) {
    if (ar.meta_or("format", "") != "capsf-checkpoint-1")
      throw DataError("not a capsf checkpoint (missing or unknown 'format' metadata)");
    ModelConfig c;
    c.extractor = parse_extractor_kind(ar.meta_value("extractor"));
    c.toy_channels = detail::meta_size(ar, "toy_channels");
    auto& l = c.capsnet.layout;
    l.in_channels = detail::meta_size(ar, "capsule.in_channels");
    l.hidden = detail::meta_size(ar, "capsule.hidden");
    l.pooled = detail::meta_size(ar, "capsule.pooled");
    l.head_channels = detail::meta_size(ar, "capsule.head_channels");
    l.head_kernel = detail::meta_size(ar, "capsule.head_kernel");
    l.head_stride = detail::meta_size(ar, "capsule.head_stride");
    l.out_kernel = detail::meta_size(ar, "capsule.out_kernel");
    c.capsnet.primary_capsules = detail::meta_size(ar, "primary_capsules");
    c.capsnet.output_capsules = detail::meta_size(ar, "output_capsules");
    c.capsnet.output_dim = detail::meta_size(ar, "output_dim");
    c.capsnet.sharing = parse_sharing(ar.meta_value("routing.sharing"));
    c.routing.iterations = static_cast<int>(detail::meta_size(ar, "routing.iterations"));
    c.routing.noise_sigma = detail::meta_double(ar, "routing.noise_sigma");
    c.routing.noise_scale = ar.meta_value("routing.noise_scale") == "variance" ? NoiseScale::variance : NoiseScale::std_dev;
    c.mean = detail::split3(ar.meta_value("normalize.mean"), "normalize.mean");
    c.std = detail::split3(ar.meta_value("normalize.std"), "normalize.std");

    ForensicsModel m;
    m.extractor_ = c.extractor == ExtractorKind::toy ? FeatureExtractor<T>::toy_from_archive(ar, "extractor.")
                                                     : FeatureExtractor<T>::vgg19_front(ar, "extractor.");
    if (m.extractor_.output_channels() != l.in_channels)
      throw DataError("checkpoint extractor width does not match capsule.in_channels");
    Rng scratch(0);
    m.net_ = CapsuleNet<T>(c.capsnet, scratch);
    m.cfg_ = c;
    auto fill = [&](const NamedTensor<T>& p) {
      const Tensor<T> stored = ar.get<T>(p.name, p.tensor.shape());
      Tensor<T> dst = p.tensor;
      std::copy(stored.data().begin(), stored.data().end(), dst.mutable_data().begin());
    };
    for (const auto& p : m.net_.parameters()) fill(p);
    for (const auto& b : m.net_.buffers()) fill(b);
    return m;
  }

  static ForensicsModel load(const std::filesystem::path& path) { return from_archive(WeightArchive::load(path)); }

  // Deep copy; plain copies share parameter storage.
  ForensicsModel clone() const { return from_archive(to_archive()); }

 private:
  ModelConfig cfg_;
  FeatureExtractor<T> extractor_;
  CapsuleNet<T> net_;
};

}  // namespace capsf
