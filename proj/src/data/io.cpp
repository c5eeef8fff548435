#include "bgf/io.hpp"

#include <cctype>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace bgf {

namespace fs = std::filesystem;

std::string read_text_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(path.string() + ": cannot open for reading");
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

void write_text_file(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError(path.string() + ": cannot open for writing");
  out << text;
  if (!out) throw FormatError(path.string() + ": write failed");
}

Image read_pnm(const fs::path& path) {
  const std::string buf = read_text_file(path);
  const std::string name = path.string();
  std::size_t pos = 0;
  auto skip_space = [&] {
    while (pos < buf.size()) {
      if (buf[pos] == '#') {
        while (pos < buf.size() && buf[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(buf[pos]))) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto read_int = [&](const char* field) {
    skip_space();
    std::int64_t v = 0;
    const auto [end, ec] = std::from_chars(buf.data() + pos, buf.data() + buf.size(), v);
    if (ec != std::errc() || end == buf.data() + pos) throw FormatError(name + ": malformed header (" + field + ")");
    pos = static_cast<std::size_t>(end - buf.data());
    return v;
  };
  if (buf.size() < 2 || buf[0] != 'P' || (buf[1] != '5' && buf[1] != '6')) {
    throw FormatError(name + ": bad magic number (expected P5 or P6)");
  }
  Image img;
  img.channels = buf[1] == '5' ? 1 : 3;
  pos = 2;
  img.width = read_int("width");
  img.height = read_int("height");
  const std::int64_t maxval = read_int("maxval");
  if (img.width <= 0 || img.height <= 0) throw FormatError(name + ": malformed header (non-positive size)");
  if (maxval != 255) throw FormatError(name + ": unsupported maxval " + std::to_string(maxval));
  if (pos >= buf.size() || !std::isspace(static_cast<unsigned char>(buf[pos]))) {
    throw FormatError(name + ": malformed header (no separator before payload)");
  }
  ++pos;
  const auto need = static_cast<std::size_t>(img.width * img.height * img.channels);
  if (buf.size() - pos < need) {
    throw FormatError(name + ": truncated payload (" + std::to_string(buf.size() - pos) + " of " +
                      std::to_string(need) + " bytes)");
  }
  img.pixels.assign(buf.begin() + static_cast<std::ptrdiff_t>(pos),
                    buf.begin() + static_cast<std::ptrdiff_t>(pos + need));
  return img;
}

void write_pnm(const fs::path& path, const Image& img) {
  if (img.channels != 1 && img.channels != 3) throw FormatError(path.string() + ": only 1 or 3 channels");
  if (static_cast<std::int64_t>(img.pixels.size()) != img.width * img.height * img.channels) {
    throw FormatError(path.string() + ": pixel buffer does not match image size");
  }
  std::string out = (img.channels == 1 ? "P5\n" : "P6\n") + std::to_string(img.width) + " " +
                    std::to_string(img.height) + "\n255\n";
  out.append(img.pixels.begin(), img.pixels.end());
  write_text_file(path, out);
}

template <typename T>
NdTensor<T> image_to_tensor(const Image& img, std::int64_t channels) {
  if (channels != img.channels && !(img.channels == 1 && channels == 3)) {
    throw FormatError("image has " + std::to_string(img.channels) + " channels, model expects " +
                      std::to_string(channels));
  }
  NdTensor<T> t({channels, img.height, img.width});
  const std::int64_t hw = img.height * img.width;
  for (std::int64_t c = 0; c < channels; ++c) {
    const std::int64_t src_c = img.channels == 1 ? 0 : c;
    for (std::int64_t i = 0; i < hw; ++i) {
      t[c * hw + i] = static_cast<T>(img.pixels[static_cast<std::size_t>(i * img.channels + src_c)]) / T(255);
    }
  }
  return t;
}

template <typename T>
NdTensor<T> load_image(const fs::path& path, std::int64_t channels) {
  return image_to_tensor<T>(read_pnm(path), channels);
}

template NdTensor<float> image_to_tensor(const Image&, std::int64_t);
template NdTensor<double> image_to_tensor(const Image&, std::int64_t);
template NdTensor<float> load_image(const fs::path&, std::int64_t);
template NdTensor<double> load_image(const fs::path&, std::int64_t);

namespace {

std::vector<std::string> split_ws(const std::string& line) {
  std::istringstream is(line);
  std::vector<std::string> out;
  for (std::string tok; is >> tok;) out.push_back(tok);
  return out;
}

double parse_real(const std::string& tok, const std::string& where) {
  double v = 0;
  const auto [end, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
  if (ec != std::errc() || end != tok.data() + tok.size() || !std::isfinite(v)) {
    throw FormatError(where + ": '" + tok + "' is not a number");
  }
  return v;
}

int parse_class(const std::string& tok, const std::string& where) {
  int v = 0;
  const auto [end, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
  if (ec != std::errc() || end != tok.data() + tok.size() || v < 0) {
    throw FormatError(where + ": '" + tok + "' is not a class index");
  }
  return v;
}

}  // namespace

std::vector<GroundTruth> parse_yolo_labels(const std::string& text, std::int64_t width, std::int64_t height,
                                           const std::string& source, int image_id) {
  std::vector<GroundTruth> out;
  std::istringstream is(text);
  std::string line;
  const auto w = static_cast<double>(width), h = static_cast<double>(height);
  for (int lineno = 1; std::getline(is, line); ++lineno) {
    const auto tok = split_ws(line);
    if (tok.empty()) continue;
    const std::string where = source + ":" + std::to_string(lineno);
    if (tok.size() != 5) throw FormatError(where + ": expected 5 columns, got " + std::to_string(tok.size()));
    const int cls = parse_class(tok[0], where);
    double v[4];
    const char* names[4] = {"cx", "cy", "w", "h"};
    for (int i = 0; i < 4; ++i) {
      v[i] = parse_real(tok[static_cast<std::size_t>(i + 1)], where);
      if (v[i] < 0.0 || v[i] > 1.0) throw FormatError(where + ": " + names[i] + " outside [0, 1]");
    }
    if (v[2] <= 0 || v[3] <= 0) throw FormatError(where + ": box has zero extent");
    GroundTruth g;
    g.class_id = cls;
    g.image_id = image_id;
    g.box = {(v[0] - v[2] / 2) * w, (v[1] - v[3] / 2) * h, (v[0] + v[2] / 2) * w, (v[1] + v[3] / 2) * h};
    out.push_back(g);
  }
  return out;
}

std::vector<GroundTruth> load_yolo_labels(const fs::path& path, std::int64_t width, std::int64_t height, int image_id) {
  return parse_yolo_labels(read_text_file(path), width, height, path.string(), image_id);
}

void write_yolo_labels(const fs::path& path, const std::vector<GroundTruth>& gts, std::int64_t width,
                       std::int64_t height) {
  std::string out;
  char line[160];
  const auto w = static_cast<double>(width), h = static_cast<double>(height);
  for (const auto& g : gts) {
    std::snprintf(line, sizeof line, "%d %.8f %.8f %.8f %.8f\n", g.class_id, g.box.cx() / w, g.box.cy() / h,
                  g.box.width() / w, g.box.height() / h);
    out += line;
  }
  write_text_file(path, out);
}

std::string format_detections(const std::vector<Detection>& dets) {
  std::string out;
  char line[200];
  for (const auto& d : dets) {
    std::snprintf(line, sizeof line, "%d %.6f %.6f %.6f %.6f %.6f\n", d.class_id, d.score, d.box.x1, d.box.y1,
                  d.box.x2, d.box.y2);
    out += line;
  }
  return out;
}

std::vector<Detection> parse_detections(const std::string& text, const std::string& source, int image_id) {
  std::vector<Detection> out;
  std::istringstream is(text);
  std::string line;
  for (int lineno = 1; std::getline(is, line); ++lineno) {
    const auto tok = split_ws(line);
    if (tok.empty()) continue;
    const std::string where = source + ":" + std::to_string(lineno);
    if (tok.size() != 6) throw FormatError(where + ": expected 6 columns, got " + std::to_string(tok.size()));
    Detection d;
    d.class_id = parse_class(tok[0], where);
    d.score = parse_real(tok[1], where);
    if (d.score < 0 || d.score > 1) throw FormatError(where + ": score outside [0, 1]");
    d.box = {parse_real(tok[2], where), parse_real(tok[3], where), parse_real(tok[4], where), parse_real(tok[5], where)};
    if (!d.box.valid()) throw FormatError(where + ": degenerate box");
    d.image_id = image_id;
    out.push_back(d);
  }
  return out;
}

void write_detections(const fs::path& path, const std::vector<Detection>& dets) {
  write_text_file(path, format_detections(dets));
}

std::vector<Detection> read_detections(const fs::path& path, int image_id) {
  return parse_detections(read_text_file(path), path.string(), image_id);
}

fs::path DatasetDescriptor::label_path(const std::string& rel) const {
  fs::path p(rel);
  fs::path out;
  bool swapped = false;
  for (const auto& part : p) {
    if (!swapped && part == "images") {
      out /= "labels";
      swapped = true;
    } else {
      out /= part;
    }
  }
  if (!swapped) out = fs::path("labels") / p;
  out.replace_extension(".txt");
  return root / out;
}

const std::vector<std::string>& DatasetDescriptor::split(const std::string& name) const {
  auto it = splits.find(name);
  if (it == splits.end()) throw FormatError(root.string() + ": dataset has no split '" + name + "'");
  return it->second;
}

DatasetDescriptor load_dataset(const fs::path& root) {
  DatasetDescriptor ds;
  ds.root = root;
  const fs::path meta = root / "dataset.json";
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_text_file(meta));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(meta.string() + ": " + e.what());
  }
  const std::string fmt = j.value("format", std::string("pgm"));
  if (fmt == "pgm") {
    ds.format = ImageFormat::PGM;
  } else if (fmt == "ppm") {
    ds.format = ImageFormat::PPM;
  } else {
    throw FormatError(meta.string() + ": unknown image format '" + fmt + "'");
  }
  if (j.contains("classes")) ds.class_names = j.at("classes").get<std::vector<std::string>>();
  for (const auto& [name, file] : j.at("splits").items()) {
    const fs::path list = root / file.get<std::string>();
    std::istringstream is(read_text_file(list));
    std::vector<std::string> items;
    for (std::string line; std::getline(is, line);) {
      while (!line.empty() && std::isspace(static_cast<unsigned char>(line.back()))) line.pop_back();
      if (line.empty()) continue;
      if (!fs::exists(ds.label_path(line))) {
        throw FormatError(list.string() + ": image '" + line + "' has no label file " + ds.label_path(line).string());
      }
      items.push_back(line);
    }
    ds.splits[name] = std::move(items);
  }
  return ds;
}

void save_dataset(const DatasetDescriptor& ds) {
  nlohmann::json j;
  j["format"] = ds.format == ImageFormat::PGM ? "pgm" : "ppm";
  j["classes"] = ds.class_names;
  nlohmann::json splits = nlohmann::json::object();
  for (const auto& [name, items] : ds.splits) {
    const std::string file = name + ".txt";
    splits[name] = file;
    std::string text;
    for (const auto& it : items) text += it + "\n";
    write_text_file(ds.root / file, text);
  }
  j["splits"] = splits;
  write_text_file(ds.root / "dataset.json", j.dump(2) + "\n");
}

std::vector<LabeledImage> load_split(const DatasetDescriptor& ds, const std::string& split) {
  std::vector<LabeledImage> out;
  int id = 0;
  for (const auto& rel : ds.split(split)) {
    LabeledImage li;
    li.rel = rel;
    li.image = read_pnm(ds.image_path(rel));
    li.gts = load_yolo_labels(ds.label_path(rel), li.image.width, li.image.height, id);
    out.push_back(std::move(li));
    ++id;
  }
  return out;
}

}  // namespace bgf
