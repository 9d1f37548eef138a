#pragma once

// Closed-world shape scenes, their renderings and captions.

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "cobit/codebook.hpp"
#include "cobit/random.hpp"

namespace cobit {

enum class ShapeKind { square, circle, triangle, cross };
enum class Color { red, green, blue, yellow };
enum class Position { top_left, top_right, bottom_left, bottom_right, center };
enum class SizeKind { small, large };

inline constexpr std::array<const char*, 4> kShapeNames{"square", "circle", "triangle", "cross"};
inline constexpr std::array<const char*, 4> kColorNames{"red", "green", "blue", "yellow"};
inline constexpr std::array<const char*, 5> kPositionNames{"top-left", "top-right", "bottom-left", "bottom-right",
                                                           "center"};
inline constexpr std::array<const char*, 2> kSizeNames{"small", "large"};
inline constexpr std::size_t kSceneCombos = 4 * 4 * 5 * 2;
inline constexpr std::size_t kSceneSide = 32;
inline constexpr float kMaxBackground = 0.25f;

inline const char* name(ShapeKind s) { return kShapeNames[static_cast<std::size_t>(s)]; }
inline const char* name(Color c) { return kColorNames[static_cast<std::size_t>(c)]; }
inline const char* name(Position p) { return kPositionNames[static_cast<std::size_t>(p)]; }
inline const char* name(SizeKind s) { return kSizeNames[static_cast<std::size_t>(s)]; }

struct ShapeScene {
  ShapeKind shape = ShapeKind::square;
  Color color = Color::red;
  Position position = Position::center;
  SizeKind size = SizeKind::small;
  float background = 0.f;

  /// shape * 4 + color, the zero-shot class.
  std::size_t label() const { return static_cast<std::size_t>(shape) * 4 + static_cast<std::size_t>(color); }
  /// Index in [0, 160) over (shape, color, position, size).
  std::size_t combo() const {
    return ((static_cast<std::size_t>(shape) * 4 + static_cast<std::size_t>(color)) * 5 +
            static_cast<std::size_t>(position)) * 2 + static_cast<std::size_t>(size);
  }
  static ShapeScene from_combo(std::size_t combo, float background = 0.f) {
    ShapeScene s;
    s.size = static_cast<SizeKind>(combo % 2);
    s.position = static_cast<Position>(combo / 2 % 5);
    s.color = static_cast<Color>(combo / 10 % 4);
    s.shape = static_cast<ShapeKind>(combo / 40);
    s.background = background;
    return s;
  }
  bool operator==(const ShapeScene&) const = default;
};

inline ShapeScene generate_scene(Pcg32& rng) {
  ShapeScene s;
  s.shape = static_cast<ShapeKind>(rng.below(4));
  s.color = static_cast<Color>(rng.below(4));
  s.position = static_cast<Position>(rng.below(5));
  s.size = static_cast<SizeKind>(rng.below(2));
  s.background = static_cast<float>(rng.uniform() * kMaxBackground);
  return s;
}

inline std::array<float, 3> rgb(Color c) {
  switch (c) {
    case Color::red: return {1.f, 0.f, 0.f};
    case Color::green: return {0.f, 1.f, 0.f};
    case Color::blue: return {0.f, 0.f, 1.f};
    case Color::yellow: return {1.f, 1.f, 0.f};
  }
  return {0.f, 0.f, 0.f};
}

/// Centre (row, col) in pixel coordinates and half extent.
inline std::array<double, 2> centre(Position p) {
  switch (p) {
    case Position::top_left: return {8, 8};
    case Position::top_right: return {8, 24};
    case Position::bottom_left: return {24, 8};
    case Position::bottom_right: return {24, 24};
    case Position::center: return {16, 16};
  }
  return {16, 16};
}
inline double half_extent(SizeKind s) { return s == SizeKind::small ? 4.0 : 7.0; }

/// Whether pixel offset (dy, dx) from the centre is inside the shape.
inline bool covers(ShapeKind shape, double dy, double dx, double h) {
  switch (shape) {
    case ShapeKind::square: return std::fabs(dx) <= h && std::fabs(dy) <= h;
    case ShapeKind::circle: return dx * dx + dy * dy <= h * h;
    case ShapeKind::triangle:  // apex up, base at dy = +h
      return dy >= -h && dy <= h && std::fabs(dx) <= (dy + h) / 2;
    case ShapeKind::cross: {
      const double arm = h / 3;
      return (std::fabs(dx) <= arm && std::fabs(dy) <= h) || (std::fabs(dy) <= arm && std::fabs(dx) <= h);
    }
  }
  return false;
}

/// 32x32 solid gray background with the shape in its colour; pixels are
/// sampled at their centres.
inline RawImage render_scene(const ShapeScene& s) {
  RawImage img(kSceneSide, kSceneSide, s.background);
  const auto [cy, cx] = centre(s.position);
  const double h = half_extent(s.size);
  const auto col = rgb(s.color);
  for (std::size_t y = 0; y < kSceneSide; ++y)
    for (std::size_t x = 0; x < kSceneSide; ++x)
      if (covers(s.shape, double(y) + 0.5 - cy, double(x) + 0.5 - cx, h))
        for (std::size_t c = 0; c < 3; ++c) img.at(y, x, c) = col[c];
  return img;
}

/// Caption templates; each contains {color} and {shape} and may use {size}
/// and {position}.
struct CaptionGrammar {
  std::vector<std::string> templates{"a {size} {color} {shape} at the {position}", "the {color} {shape}",
                                     "a photo of a {color} {shape}"};

  std::string fill(std::size_t t, const ShapeScene& s) const {
    std::string out = templates.at(t);
    auto sub = [&out](const std::string& slot, const std::string& v) {
      for (auto p = out.find(slot); p != std::string::npos; p = out.find(slot, p + v.size()))
        out.replace(p, slot.size(), v);
    };
    sub("{size}", name(s.size));
    sub("{color}", name(s.color));
    sub("{shape}", name(s.shape));
    sub("{position}", name(s.position));
    return out;
  }

  /// Every caption the grammar can produce, once per (template, combo).
  std::vector<std::string> enumerate() const {
    std::vector<std::string> out;
    for (std::size_t t = 0; t < templates.size(); ++t)
      for (std::size_t c = 0; c < kSceneCombos; ++c) out.push_back(fill(t, ShapeScene::from_combo(c)));
    return out;
  }
};

inline std::string caption_scene(const ShapeScene& s, const CaptionGrammar& g, Pcg32& rng) {
  return g.fill(rng.below(static_cast<std::uint32_t>(g.templates.size())), s);
}

/// Nearest reference rendering by pixel MSE among all (shape, color,
/// position, size) combinations drawn on the image's estimated background
/// (median pixel value). Ties go to the lowest combination index.
inline std::pair<ShapeKind, Color> classify_rendering(const RawImage& img) {
  if (img.height != kSceneSide || img.width != kSceneSide || img.pixels.size() != kSceneSide * kSceneSide * 3)
    throw ShapeError("classify_rendering: expected a 32x32 RGB image");
  std::vector<float> sorted(img.pixels);
  std::nth_element(sorted.begin(), sorted.begin() + sorted.size() / 2, sorted.end());
  const float bg = std::clamp(sorted[sorted.size() / 2], 0.f, kMaxBackground);
  std::size_t best = 0;
  double best_err = std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < kSceneCombos; ++c) {
    const RawImage ref = render_scene(ShapeScene::from_combo(c, bg));
    double err = 0;
    for (std::size_t i = 0; i < ref.pixels.size(); ++i) {
      const double d = double(img.pixels[i]) - double(ref.pixels[i]);
      err += d * d;
    }
    if (err < best_err) {
      best_err = err;
      best = c;
    }
  }
  const ShapeScene s = ShapeScene::from_combo(best);
  return {s.shape, s.color};
}

/// One dataset record: everything is a pure function of the seed.
struct Example {
  std::uint64_t seed = 0;
  ShapeScene scene;
  std::string caption;
};

inline Example make_example(std::uint64_t seed, const CaptionGrammar& g) {
  Pcg32 rng(seed, 0x5ce4e);
  Example e;
  e.seed = seed;
  e.scene = generate_scene(rng);
  e.caption = caption_scene(e.scene, g, rng);
  return e;
}

/// Examples for seeds first, first+1, ..., first+count-1.
inline std::vector<Example> make_examples(std::uint64_t first, std::size_t count, const CaptionGrammar& g) {
  std::vector<Example> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(make_example(first + i, g));
  return out;
}

/// Manifest line: seed shape color position size background caption words...
inline void write_manifest(const std::vector<Example>& examples, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write manifest '" + path + "'");
  out.precision(9);
  for (const auto& e : examples)
    out << e.seed << ' ' << name(e.scene.shape) << ' ' << name(e.scene.color) << ' ' << name(e.scene.position) << ' '
        << name(e.scene.size) << ' ' << e.scene.background << ' ' << e.caption << '\n';
}

inline std::vector<Example> read_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot read manifest '" + path + "'");
  auto lookup = [&](const auto& names, const std::string& v, auto tag) {
    for (std::size_t i = 0; i < names.size(); ++i)
      if (v == names[i]) return static_cast<decltype(tag)>(i);
    throw FormatError("manifest '" + path + "': unknown field value '" + v + "'");
  };
  std::vector<Example> out;
  for (std::string line; std::getline(in, line);) {
    if (line.empty()) continue;
    std::istringstream is(line);
    Example e;
    std::string shape, color, position, size;
    if (!(is >> e.seed >> shape >> color >> position >> size >> e.scene.background))
      throw FormatError("manifest '" + path + "': malformed line '" + line + "'");
    e.scene.shape = lookup(kShapeNames, shape, ShapeKind{});
    e.scene.color = lookup(kColorNames, color, Color{});
    e.scene.position = lookup(kPositionNames, position, Position{});
    e.scene.size = lookup(kSizeNames, size, SizeKind{});
    std::getline(is >> std::ws, e.caption);
    out.push_back(std::move(e));
  }
  return out;
}

}  // namespace cobit
