#pragma once

// Patch k-means codebook: the frozen image tokenizer.

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>
#include <string>
#include <vector>

#include "cobit/binary_io.hpp"
#include "cobit/random.hpp"
#include "cobit/tensor.hpp"

namespace cobit {

/// H x W x 3, interleaved channels, row-major.
struct RawImage {
  std::size_t height = 0, width = 0;
  std::vector<float> pixels;

  RawImage() = default;
  RawImage(std::size_t h, std::size_t w, float fill = 0.f) : height(h), width(w), pixels(h * w * 3, fill) {}

  float& at(std::size_t y, std::size_t x, std::size_t c) { return pixels[(y * width + x) * 3 + c]; }
  float at(std::size_t y, std::size_t x, std::size_t c) const { return pixels[(y * width + x) * 3 + c]; }
  bool operator==(const RawImage&) const = default;
};

/// side x side token ids, raster order.
struct ImageTokenGrid {
  std::size_t side = 0;
  std::vector<int> ids;
  bool operator==(const ImageTokenGrid&) const = default;
};

struct Codebook {
  std::size_t entries = 0, dim = 0;
  std::vector<float> values;  // entries x dim
  bool frozen = false;

  const float* entry(std::size_t k) const { return values.data() + k * dim; }
  /// Side of the square RGB patch one entry describes.
  std::size_t patch_size() const {
    const auto p = static_cast<std::size_t>(std::lround(std::sqrt(double(dim) / 3.0)));
    if (p * p * 3 != dim) throw ShapeError("codebook dimension " + std::to_string(dim) + " is not a square RGB patch");
    return p;
  }
};

/// Flattened non-overlapping patches in raster order, each patch (dy, dx, c).
inline std::vector<float> patchify(const RawImage& img, std::size_t patch) {
  if (patch == 0 || img.height % patch || img.width % patch)
    throw ShapeError("image " + std::to_string(img.height) + "x" + std::to_string(img.width) +
                     " is not divisible into " + std::to_string(patch) + "-pixel patches");
  if (img.pixels.size() != img.height * img.width * 3) throw ShapeError("image pixel buffer has the wrong size");
  const std::size_t gh = img.height / patch, gw = img.width / patch, d = patch * patch * 3;
  std::vector<float> out(gh * gw * d);
  for (std::size_t r = 0; r < gh; ++r)
    for (std::size_t c = 0; c < gw; ++c) {
      float* dst = out.data() + (r * gw + c) * d;
      for (std::size_t dy = 0; dy < patch; ++dy)
        for (std::size_t dx = 0; dx < patch; ++dx)
          for (std::size_t ch = 0; ch < 3; ++ch) *dst++ = img.at(r * patch + dy, c * patch + dx, ch);
    }
  return out;
}

namespace detail {

/// Nearest-entry search in double precision, ties toward the lowest index.
/// Centroids are stored dimension-major so the inner loop runs over entries.
class NearestSearch {
 public:
  NearestSearch(const float* centroids, std::size_t k, std::size_t d) : k_(k), d_(d), ct_(k * d), dist_(k) {
    for (std::size_t i = 0; i < k; ++i)
      for (std::size_t j = 0; j < d; ++j) ct_[j * k + i] = centroids[i * d + j];
  }

  /// Returns the index and writes the squared distance.
  std::size_t operator()(const float* x, double* best_dist) {
    std::fill(dist_.begin(), dist_.end(), 0.0);
    for (std::size_t j = 0; j < d_; ++j) {
      const double xv = x[j];
      const double* row = ct_.data() + j * k_;
      for (std::size_t i = 0; i < k_; ++i) {
        const double diff = xv - row[i];
        dist_[i] += diff * diff;
      }
    }
    std::size_t best = 0;
    for (std::size_t i = 1; i < k_; ++i)
      if (dist_[i] < dist_[best]) best = i;
    if (best_dist) *best_dist = dist_[best];
    return best;
  }

 private:
  std::size_t k_, d_;
  std::vector<double> ct_, dist_;
};

}  // namespace detail

struct CodebookTraining {
  Codebook codebook;
  double assignment_mse = 0;  // per scalar, last assignment against the final centroids
};

/// k-means over every patch of `images`: k-means++ seeding (first centre a
/// uniform draw, later centres drawn with probability proportional to squared
/// distance), then `iterations` Lloyd rounds. Centroid means are accumulated in
/// double and stored as float; an emptied cluster keeps its centroid.
inline CodebookTraining train_codebook(const std::vector<RawImage>& images, std::size_t k, std::uint64_t seed,
                                       std::size_t patch = 4, std::size_t iterations = 25) {
  if (k == 0) throw Error("train_codebook: K must be positive");
  std::vector<float> data;
  for (const auto& img : images) {
    auto p = patchify(img, patch);
    data.insert(data.end(), p.begin(), p.end());
  }
  const std::size_t d = patch * patch * 3, n = data.size() / d;
  {
    std::set<std::vector<float>> distinct;
    for (std::size_t i = 0; i < n && distinct.size() < k; ++i)
      distinct.emplace(data.begin() + i * d, data.begin() + (i + 1) * d);
    if (distinct.size() < k)
      throw Error("train_codebook: only " + std::to_string(distinct.size()) + " distinct patches for K=" +
                  std::to_string(k));
  }

  Pcg32 rng(seed, 0xc0deb00c);
  std::vector<float> centroids(k * d);
  std::vector<double> nearest(n, std::numeric_limits<double>::infinity());
  auto sqdist = [&](std::size_t i, const float* c) {
    double s = 0;
    for (std::size_t j = 0; j < d; ++j) {
      const double diff = double(data[i * d + j]) - double(c[j]);
      s += diff * diff;
    }
    return s;
  };
  std::size_t pick = rng.below(static_cast<std::uint32_t>(n));
  for (std::size_t c = 0;; ++c) {
    std::copy_n(data.begin() + pick * d, d, centroids.begin() + c * d);
    if (c + 1 == k) break;
    double total = 0;
    for (std::size_t i = 0; i < n; ++i) {
      nearest[i] = std::min(nearest[i], sqdist(i, centroids.data() + c * d));
      total += nearest[i];
    }
    const double target = rng.uniform() * total;
    double run = 0;
    pick = n;
    std::size_t last_positive = 0;
    for (std::size_t i = 0; i < n; ++i) {
      if (nearest[i] <= 0) continue;
      last_positive = i;
      run += nearest[i];
      if (run > target) {
        pick = i;
        break;
      }
    }
    if (pick == n) pick = last_positive;
  }

  std::vector<std::size_t> assign(n);
  auto assign_all = [&] {
    detail::NearestSearch search(centroids.data(), k, d);
    double cost = 0;
    for (std::size_t i = 0; i < n; ++i) {
      double dist = 0;
      assign[i] = search(data.data() + i * d, &dist);
      cost += dist;
    }
    return cost / double(n * d);
  };
  for (std::size_t it = 0; it < iterations; ++it) {
    assign_all();
    std::vector<double> sums(k * d, 0.0);
    std::vector<std::size_t> counts(k, 0);
    for (std::size_t i = 0; i < n; ++i) {
      ++counts[assign[i]];
      for (std::size_t j = 0; j < d; ++j) sums[assign[i] * d + j] += data[i * d + j];
    }
    for (std::size_t c = 0; c < k; ++c)
      if (counts[c])
        for (std::size_t j = 0; j < d; ++j) centroids[c * d + j] = float(sums[c * d + j] / double(counts[c]));
  }
  CodebookTraining out;
  out.assignment_mse = assign_all();
  out.codebook = Codebook{k, d, std::move(centroids), true};
  return out;
}

inline ImageTokenGrid quantize_image(const Codebook& cb, const RawImage& img) {
  const std::size_t patch = cb.patch_size();
  if (img.height != img.width) throw ShapeError("quantize_image: image must be square");
  const auto patches = patchify(img, patch);
  ImageTokenGrid grid;
  grid.side = img.height / patch;
  grid.ids.resize(grid.side * grid.side);
  detail::NearestSearch search(cb.values.data(), cb.entries, cb.dim);
  for (std::size_t i = 0; i < grid.ids.size(); ++i)
    grid.ids[i] = static_cast<int>(search(patches.data() + i * cb.dim, nullptr));
  return grid;
}

inline RawImage dequantize(const Codebook& cb, const ImageTokenGrid& grid) {
  const std::size_t patch = cb.patch_size();
  if (grid.ids.size() != grid.side * grid.side) throw ShapeError("dequantize: grid is not side x side");
  RawImage img(grid.side * patch, grid.side * patch);
  for (std::size_t r = 0; r < grid.side; ++r)
    for (std::size_t c = 0; c < grid.side; ++c) {
      const int id = grid.ids[r * grid.side + c];
      if (id < 0 || static_cast<std::size_t>(id) >= cb.entries)
        throw ShapeError("dequantize: token " + std::to_string(id) + " outside [0, " + std::to_string(cb.entries) + ")");
      const float* src = cb.entry(static_cast<std::size_t>(id));
      for (std::size_t dy = 0; dy < patch; ++dy)
        for (std::size_t dx = 0; dx < patch; ++dx)
          for (std::size_t ch = 0; ch < 3; ++ch) img.at(r * patch + dy, c * patch + dx, ch) = *src++;
    }
  return img;
}

inline constexpr std::uint32_t kCodebookVersion = 1;

inline void save_codebook(const Codebook& cb, const std::string& path) {
  io::Writer w;
  w.bytes("CBKB", 4);
  w.le<std::uint32_t>(kCodebookVersion);
  w.le<std::uint32_t>(static_cast<std::uint32_t>(cb.entries));
  w.le<std::uint32_t>(static_cast<std::uint32_t>(cb.dim));
  w.f32s(cb.values.data(), cb.values.size());
  io::write_file_atomic(path, w.data());
}

inline Codebook load_codebook(const std::string& path) {
  io::Reader r(io::read_file(path), "codebook '" + path + "'");
  if (r.str(4) != "CBKB") throw FormatError("codebook '" + path + "': bad magic");
  if (const auto v = r.le<std::uint32_t>(); v != kCodebookVersion)
    throw FormatError("codebook '" + path + "': unsupported version " + std::to_string(v));
  Codebook cb;
  cb.entries = r.le<std::uint32_t>();
  cb.dim = r.le<std::uint32_t>();
  if (cb.entries == 0 || cb.dim == 0) throw FormatError("codebook '" + path + "': empty");
  cb.values.resize(cb.entries * cb.dim);
  r.f32s(cb.values.data(), cb.values.size());
  if (!r.at_end()) throw FormatError("codebook '" + path + "': trailing bytes");
  for (float v : cb.values)
    if (!std::isfinite(v)) throw FormatError("codebook '" + path + "': non-finite entry");
  cb.frozen = true;
  return cb;
}

}  // namespace cobit
