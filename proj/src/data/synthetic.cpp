#include "bgf/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>

namespace bgf {

namespace fs = std::filesystem;

std::int64_t Rng::integer(std::int64_t lo, std::int64_t hi) {
  if (hi < lo) throw Error("Rng::integer: empty range");
  const auto span = static_cast<std::uint64_t>(hi - lo) + 1;
  return lo + static_cast<std::int64_t>(eng_() % span);
}

double Rng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  double u = 0;
  do {
    u = uniform();
  } while (u <= 0.0);
  const double v = uniform();
  const double r = std::sqrt(-2.0 * std::log(u));
  spare_ = r * std::sin(2.0 * std::numbers::pi * v);
  has_spare_ = true;
  return r * std::cos(2.0 * std::numbers::pi * v);
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

void SyntheticSpec::validate() const {
  if (image_size < 8) throw Error("synthetic: image_size must be >= 8");
  if (min_objects < 0 || max_objects < min_objects) throw Error("synthetic: bad objects-per-image range");
  if (min_radius < 1 || max_radius < min_radius) throw Error("synthetic: bad radius range");
  if (2 * max_radius + 2 * static_cast<double>(margin) + 2 > static_cast<double>(image_size)) {
    throw Error("synthetic: blobs do not fit in the image");
  }
  if (!(0 <= background_lo && background_lo <= background_hi && background_hi < blob_lo && blob_lo <= blob_hi &&
        blob_hi <= 1)) {
    throw Error("synthetic: intensity ranges must satisfy 0 <= background < blob <= 1");
  }
  if (noise < 0) throw Error("synthetic: noise must be >= 0");
}

namespace {

struct Ellipse {
  double cx, cy, rx, ry, intensity;
  bool inside(std::int64_t x, std::int64_t y) const {
    const double dx = (static_cast<double>(x) + 0.5 - cx) / rx;
    const double dy = (static_cast<double>(y) + 0.5 - cy) / ry;
    return dx * dx + dy * dy <= 1.0;
  }
};

bool overlaps(const Box& a, const Box& b, double gap) {
  return a.x1 < b.x2 + gap && b.x1 < a.x2 + gap && a.y1 < b.y2 + gap && b.y1 < a.y2 + gap;
}

// Exact pixel extent of the ellipse, or an invalid box when it covers no pixel.
Box pixel_extent(const Ellipse& e, std::int64_t size) {
  std::int64_t x1 = size, y1 = size, x2 = -1, y2 = -1;
  const auto lo_x = std::max<std::int64_t>(0, static_cast<std::int64_t>(std::floor(e.cx - e.rx)) - 1);
  const auto hi_x = std::min<std::int64_t>(size - 1, static_cast<std::int64_t>(std::ceil(e.cx + e.rx)) + 1);
  const auto lo_y = std::max<std::int64_t>(0, static_cast<std::int64_t>(std::floor(e.cy - e.ry)) - 1);
  const auto hi_y = std::min<std::int64_t>(size - 1, static_cast<std::int64_t>(std::ceil(e.cy + e.ry)) + 1);
  for (std::int64_t y = lo_y; y <= hi_y; ++y) {
    for (std::int64_t x = lo_x; x <= hi_x; ++x) {
      if (!e.inside(x, y)) continue;
      x1 = std::min(x1, x), y1 = std::min(y1, y), x2 = std::max(x2, x), y2 = std::max(y2, y);
    }
  }
  if (x2 < 0) return {0, 0, 0, 0};
  return {static_cast<double>(x1), static_cast<double>(y1), static_cast<double>(x2 + 1), static_cast<double>(y2 + 1)};
}

}  // namespace

SyntheticImage render_synthetic(const SyntheticSpec& spec, std::int64_t index) {
  spec.validate();
  Rng rng(mix_seed(spec.seed, static_cast<std::uint64_t>(index)));
  const std::int64_t n = spec.image_size;
  const auto size = static_cast<double>(n);
  const auto margin = static_cast<double>(spec.margin);
  const std::int64_t want = rng.integer(spec.min_objects, spec.max_objects);
  const double background = rng.uniform(spec.background_lo, spec.background_hi);

  std::vector<Ellipse> blobs;
  SyntheticImage out;
  for (int attempt = 0; attempt < 200 && static_cast<std::int64_t>(blobs.size()) < want; ++attempt) {
    Ellipse e{};
    e.rx = rng.uniform(spec.min_radius, spec.max_radius);
    e.ry = rng.uniform(spec.min_radius, spec.max_radius);
    e.cx = rng.uniform(e.rx + margin + 1, size - e.rx - margin - 1);
    e.cy = rng.uniform(e.ry + margin + 1, size - e.ry - margin - 1);
    e.intensity = rng.uniform(spec.blob_lo, spec.blob_hi);
    const Box b = pixel_extent(e, n);
    if (!b.valid()) continue;
    if (b.x1 < margin || b.y1 < margin || b.x2 > size - margin || b.y2 > size - margin) continue;
    bool clash = false;
    for (const auto& g : out.objects) clash = clash || overlaps(b, g.box, margin);
    if (clash) continue;
    blobs.push_back(e);
    GroundTruth g;
    g.box = b;
    g.class_id = 0;
    out.objects.push_back(g);
  }

  out.image.width = n;
  out.image.height = n;
  out.image.channels = 1;
  out.image.pixels.resize(static_cast<std::size_t>(n * n));
  for (std::int64_t y = 0; y < n; ++y) {
    for (std::int64_t x = 0; x < n; ++x) {
      double v = background;
      for (const auto& e : blobs) {
        if (e.inside(x, y)) v = e.intensity;
      }
      if (spec.noise > 0) v += spec.noise * rng.normal();
      v = std::clamp(v, 0.0, 1.0);
      out.image.pixels[static_cast<std::size_t>(y * n + x)] = static_cast<std::uint8_t>(std::lround(v * 255.0));
    }
  }
  return out;
}

DatasetDescriptor gen_synthetic(const SyntheticSpec& spec, const SplitCounts& counts, const fs::path& root) {
  spec.validate();
  if (counts.train < 0 || counts.val < 0 || counts.test < 0) throw Error("synthetic: negative split size");
  DatasetDescriptor ds;
  ds.root = root;
  ds.format = ImageFormat::PGM;
  ds.class_names = {"blob"};
  std::int64_t index = 0;
  const std::pair<const char*, std::int64_t> splits[] = {
      {"train", counts.train}, {"val", counts.val}, {"test", counts.test}};
  for (const auto& [name, count] : splits) {
    auto& items = ds.splits[name];
    for (std::int64_t i = 0; i < count; ++i, ++index) {
      char stem[32];
      std::snprintf(stem, sizeof stem, "%05lld", static_cast<long long>(index));
      const std::string rel = std::string("images/") + name + "/" + stem + ".pgm";
      const SyntheticImage s = render_synthetic(spec, index);
      write_pnm(root / rel, s.image);
      write_yolo_labels(ds.label_path(rel), s.objects, s.image.width, s.image.height);
      items.push_back(rel);
    }
  }
  save_dataset(ds);
  return ds;
}

}  // namespace bgf
