#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "bgf/box.hpp"
#include "bgf/tensor.hpp"

namespace bgf {

class FormatError : public Error {
 public:
  using Error::Error;
};

// 8-bit raster, interleaved channels (1 = gray, 3 = RGB).
struct Image {
  std::int64_t width = 0;
  std::int64_t height = 0;
  std::int64_t channels = 1;
  std::vector<std::uint8_t> pixels;
};

// Binary P5/P6 with maxval 255.
Image read_pnm(const std::filesystem::path& path);
void write_pnm(const std::filesystem::path& path, const Image& img);

// [C, H, W] in [0, 1]. Gray images are replicated when channels == 3.
template <typename T>
NdTensor<T> image_to_tensor(const Image& img, std::int64_t channels);
template <typename T>
NdTensor<T> load_image(const std::filesystem::path& path, std::int64_t channels = 3);

// Lines of "class cx cy w h", normalized. Boxes come back in pixels.
std::vector<GroundTruth> parse_yolo_labels(const std::string& text, std::int64_t width, std::int64_t height,
                                           const std::string& source, int image_id = 0);
std::vector<GroundTruth> load_yolo_labels(const std::filesystem::path& path, std::int64_t width, std::int64_t height,
                                          int image_id = 0);
void write_yolo_labels(const std::filesystem::path& path, const std::vector<GroundTruth>& gts, std::int64_t width,
                       std::int64_t height);

// One line per box: "class score x1 y1 x2 y2", pixels, 6 decimals.
std::string format_detections(const std::vector<Detection>& dets);
std::vector<Detection> parse_detections(const std::string& text, const std::string& source, int image_id = 0);
void write_detections(const std::filesystem::path& path, const std::vector<Detection>& dets);
std::vector<Detection> read_detections(const std::filesystem::path& path, int image_id = 0);

enum class ImageFormat { PGM, PPM };

struct DatasetDescriptor {
  std::filesystem::path root;
  ImageFormat format = ImageFormat::PGM;
  std::vector<std::string> class_names{"object"};
  std::map<std::string, std::vector<std::string>> splits;  // relative image paths

  std::filesystem::path image_path(const std::string& rel) const { return root / rel; }
  // images/<split>/x.pgm -> labels/<split>/x.txt
  std::filesystem::path label_path(const std::string& rel) const;
  const std::vector<std::string>& split(const std::string& name) const;
};

// Reads root/dataset.json and the split lists it names. Every listed image
// must have a label file.
DatasetDescriptor load_dataset(const std::filesystem::path& root);
void save_dataset(const DatasetDescriptor& ds);

struct LabeledImage {
  std::string rel;
  Image image;
  std::vector<GroundTruth> gts;
};

std::vector<LabeledImage> load_split(const DatasetDescriptor& ds, const std::string& split);

std::string read_text_file(const std::filesystem::path& path);
void write_text_file(const std::filesystem::path& path, const std::string& text);

}  // namespace bgf
