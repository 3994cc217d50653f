#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "capsf/error.hpp"
#include "capsf/image.hpp"
#include "capsf/rng.hpp"

namespace capsf {

enum class Split { train, val, test };

inline const char* split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

inline Split parse_split(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  throw DataError("unknown split '" + s + "' (expected train, val or test)");
}

/// Label 0 is real, 1 is fake.
struct Sample {
  std::filesystem::path path;  // resolved against the manifest directory
  std::string raw_path;        // as written in the manifest
  int label = 0;
  std::string group;
  Split split = Split::train;
};

class Manifest {
 public:
  Manifest() = default;
  explicit Manifest(std::vector<Sample> samples) : samples_(std::move(samples)) { check_unique(); }

  /// Reads `path,label,group,split` CSV. Fields must not contain commas or
  /// quotes. An empty group falls back to the path.
  static Manifest parse(std::istream& in, const std::filesystem::path& base_dir, const std::string& origin = "manifest") {
    std::string line;
    std::size_t lineno = 0;
    auto fail = [&](const std::string& msg) -> DataError {
      return DataError(origin + ":" + std::to_string(lineno) + ": " + msg);
    };
    if (!std::getline(in, line)) throw DataError(origin + ": empty manifest");
    ++lineno;
    strip(line);
    if (line.rfind("\xEF\xBB\xBF", 0) == 0) line.erase(0, 3);
    if (line != "path,label,group,split") throw fail("expected header 'path,label,group,split', got '" + line + "'");
    std::vector<Sample> out;
    while (std::getline(in, line)) {
      ++lineno;
      strip(line);
      if (line.empty()) continue;
      if (line.find('"') != std::string::npos) throw fail("quoted fields are not supported");
      std::vector<std::string> f;
      std::stringstream ss(line);
      std::string tok;
      while (std::getline(ss, tok, ',')) f.push_back(tok);
      if (!line.empty() && line.back() == ',') f.emplace_back();
      if (f.size() != 4) throw fail("expected 4 fields, got " + std::to_string(f.size()));
      Sample s;
      if (f[0].empty()) throw fail("empty path");
      s.raw_path = f[0];
      const std::filesystem::path p(f[0]);
      s.path = p.is_absolute() ? p : base_dir / p;
      if (f[1] == "0" || f[1] == "real") s.label = 0;
      else if (f[1] == "1" || f[1] == "fake") s.label = 1;
      else throw fail("label must be 0/real or 1/fake, got '" + f[1] + "'");
      s.group = f[2].empty() ? f[0] : f[2];
      try {
        s.split = parse_split(f[3]);
      } catch (const DataError& e) {
        throw fail(e.what());
      }
      out.push_back(std::move(s));
    }
    Manifest m;
    m.samples_ = std::move(out);
    m.check_unique(origin);
    return m;
  }

  static Manifest load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open manifest " + path.string());
    return parse(in, path.parent_path(), path.string());
  }

  void save(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write manifest " + path.string());
    out << "path,label,group,split\n";
    for (const auto& s : samples_)
      out << s.raw_path << ',' << s.label << ',' << s.group << ',' << split_name(s.split) << '\n';
  }

  const std::vector<Sample>& samples() const { return samples_; }
  std::size_t size() const { return samples_.size(); }

  std::vector<Sample> split(Split which) const {
    std::vector<Sample> out;
    for (const auto& s : samples_)
      if (s.split == which) out.push_back(s);
    return out;
  }

 private:
  static void strip(std::string& s) {
    while (!s.empty() && (s.back() == '\r' || s.back() == '\n' || s.back() == ' ')) s.pop_back();
  }

  void check_unique(const std::string& origin = "manifest") const {
    std::set<std::string> seen;
    for (const auto& s : samples_)
      if (!seen.insert(s.path.lexically_normal().string()).second)
        throw DataError(origin + ": duplicate path " + s.raw_path);
  }

  std::vector<Sample> samples_;
};

/// Both labels must be present.
inline void require_both_classes(const std::vector<Sample>& samples, const std::string& what) {
  if (samples.empty()) throw DataError(what + " split is empty");
  bool real = false, fake = false;
  for (const auto& s : samples) (s.label ? fake : real) = true;
  if (!real || !fake) throw DataError(what + " split contains only " + (real ? "real" : "fake") + " samples");
}

struct SyntheticConfig {
  std::size_t train = 200;
  std::size_t val = 0;
  std::size_t test = 100;
  std::size_t frames_per_group = 1;
  std::size_t size = 128;
  std::uint64_t seed = 0;
  // Amplitude of the per-pixel texture on fake images.
  double noise_amplitude = 0.15;
};

/// Synthetic two-class images. Real: smooth two-colour gradient plus a faint
/// low-frequency ripple. Fake: the same kind of base with per-pixel uniform
/// noise on top. Frames of one group share the base and differ by a small
/// shift of the gradient.
inline RgbImage synthetic_image(int label, Rng& base_rng, Rng& frame_rng, std::size_t size, double noise_amplitude) {
  std::array<double, 3> c0{}, c1{};
  for (auto& c : c0) c = base_rng.uniform(0.15, 0.85);
  for (auto& c : c1) c = base_rng.uniform(0.15, 0.85);
  const double angle = base_rng.uniform(0.0, 2.0 * std::numbers::pi);
  const double freq = base_rng.uniform(0.5, 2.0);
  const double phase = base_rng.uniform(0.0, 2.0 * std::numbers::pi);
  const double shift = frame_rng.uniform(-0.1, 0.1);
  const double dx = std::cos(angle), dy = std::sin(angle);
  RgbImage img(size, size);
  const double inv = 1.0 / static_cast<double>(size);
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x) {
      const double u = (static_cast<double>(x) + 0.5) * inv - 0.5, v = (static_cast<double>(y) + 0.5) * inv - 0.5;
      const double t = std::clamp(0.5 + (u * dx + v * dy) + shift, 0.0, 1.0);
      const double ripple = 0.03 * std::sin(2.0 * std::numbers::pi * freq * (u * dy - v * dx) + phase);
      for (std::size_t c = 0; c < 3; ++c) {
        double val = c0[c] + t * (c1[c] - c0[c]) + ripple;
        if (label == 1) val += frame_rng.uniform(-noise_amplitude, noise_amplitude);
        img.at(x, y, c) = std::clamp(val, 0.0, 1.0);
      }
    }
  return img;
}

/// Writes PNG files and manifest.csv into `dir`. Labels alternate within each
/// split so every split is balanced. Output is a function of the config only.
inline Manifest make_synthetic(const std::filesystem::path& dir, const SyntheticConfig& cfg) {
  if (cfg.frames_per_group == 0) throw UsageError("frames-per-group must be at least 1");
  if (cfg.size == 0) throw UsageError("image size must be positive");
  std::filesystem::create_directories(dir);
  std::vector<Sample> samples;
  auto emit = [&](Split split, std::size_t count) {
    for (std::size_t k = 0; k < count; ++k) {
      const int label = static_cast<int>(k % 2);
      const std::string group = std::string(split_name(split)) + "_" + std::to_string(k);
      Rng base = Rng::stream(cfg.seed, "synthetic/" + group);
      for (std::size_t f = 0; f < cfg.frames_per_group; ++f) {
        Rng base_copy = base;
        Rng frame = Rng::stream(cfg.seed, "synthetic/" + group + "/" + std::to_string(f));
        const RgbImage img = synthetic_image(label, base_copy, frame, cfg.size, cfg.noise_amplitude);
        std::string name = group;
        if (cfg.frames_per_group > 1) name += "_f" + std::to_string(f);
        name += ".png";
        write_png(dir / name, img);
        Sample s;
        s.raw_path = name;
        s.path = dir / name;
        s.label = label;
        s.group = group;
        s.split = split;
        samples.push_back(std::move(s));
      }
    }
  };
  emit(Split::train, cfg.train);
  emit(Split::val, cfg.val);
  emit(Split::test, cfg.test);
  Manifest m(std::move(samples));
  m.save(dir / "manifest.csv");
  return m;
}

}  // namespace capsf
