#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <vector>

#include "bgf/box.hpp"
#include "bgf/io.hpp"

namespace bgf {

// Portable draws on top of mt19937_64 (the std distributions are not
// specified bit-for-bit across library implementations).
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : eng_(seed) {}
  std::uint64_t next() { return eng_(); }
  double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  std::int64_t integer(std::int64_t lo, std::int64_t hi);  // inclusive
  double normal();

 private:
  std::mt19937_64 eng_;
  bool has_spare_ = false;
  double spare_ = 0;
};

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream);

struct SyntheticSpec {
  std::int64_t image_size = 128;
  std::int64_t min_objects = 1;
  std::int64_t max_objects = 3;
  double min_radius = 6;    // ellipse semi-axis, pixels
  double max_radius = 20;
  double blob_lo = 0.65;    // blob intensity range, [0, 1]
  double blob_hi = 0.95;
  double background_lo = 0.05;
  double background_hi = 0.25;
  double noise = 0.04;      // Gaussian stddev
  std::int64_t margin = 1;  // minimum gap between object boxes and to the border
  std::uint64_t seed = 0;

  void validate() const;
};

struct SyntheticImage {
  Image image;
  std::vector<GroundTruth> objects;  // exact pixel bounding boxes, class 0
};

// Pure function of (spec, index).
SyntheticImage render_synthetic(const SyntheticSpec& spec, std::int64_t index);

struct SplitCounts {
  std::int64_t train = 200;
  std::int64_t val = 50;
  std::int64_t test = 0;
};

// Writes images/<split>/NNNNN.pgm, labels/<split>/NNNNN.txt, the split lists
// and dataset.json under root. Image indices run continuously across splits.
DatasetDescriptor gen_synthetic(const SyntheticSpec& spec, const SplitCounts& counts,
                                const std::filesystem::path& root);

}  // namespace bgf
