#include <doctest.h>

#include <cstdio>
#include <cstdlib>

#include <json.hpp>

#include "bgf/io.hpp"
#include "bgf/synthetic.hpp"
#include "test_util.hpp"

using namespace bgf;
using bgf::test::TempDir;
using nlohmann::json;

namespace {

struct Run {
  int code = 0;
  std::string out;
  std::string err;
};

Run run(const std::string& args, const std::filesystem::path& scratch, const std::string& env = "") {
  const auto out = scratch / "stdout.txt", err = scratch / "stderr.txt";
  const std::string cmd =
      env + " \"" BGF_CLI_PATH "\" " + args + " > \"" + out.string() + "\" 2> \"" + err.string() + "\"";
  const int status = std::system(cmd.c_str());
  Run r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = read_text_file(out);
  r.err = read_text_file(err);
  return r;
}

DatasetDescriptor small_dataset(const std::filesystem::path& root) {
  SyntheticSpec spec;
  spec.image_size = 64;
  spec.seed = 21;
  return gen_synthetic(spec, {6, 5, 0}, root);
}

}  // namespace

TEST_CASE("cli: summary of the bgf preset lists four head grids") {
  TempDir dir("cli");
  const auto r = run("summary --preset bgf --input-size 640 --json", dir.path);
  REQUIRE(r.code == 0);
  const auto j = json::parse(r.out);
  std::vector<std::int64_t> grids;
  for (const auto& row : j["rows"])
    if (row["section"] == "head") grids.push_back(row["shape"][1].get<std::int64_t>());
  CHECK(grids == std::vector<std::int64_t>{160, 80, 40, 20});
  const auto base = run("summary --preset fpn-panet --input-size 640 --json", dir.path);
  REQUIRE(base.code == 0);
  const auto jb = json::parse(base.out);
  int heads = 0;
  for (const auto& row : jb["rows"]) heads += row["section"] == "head";
  CHECK(heads == 3);
}

TEST_CASE("cli: eval with detections equal to ground truth scores 1") {
  TempDir dir("cli");
  const auto ds = small_dataset(dir.path / "data");
  const auto dets_dir = dir.path / "dets";
  std::filesystem::create_directories(dets_dir);
  for (const auto& rel : ds.split("val")) {
    std::vector<Detection> dets;
    for (const auto& g : load_yolo_labels(ds.label_path(rel), 64, 64)) dets.push_back({g.box, 1.0, g.class_id, 0});
    write_detections(dets_dir / (std::filesystem::path(rel).stem().string() + ".txt"), dets);
  }
  const auto r = run("eval --dataset " + (dir.path / "data").string() + " --detections " + dets_dir.string() +
                         " --split val",
                     dir.path);
  REQUIRE(r.code == 0);
  const auto j = json::parse(r.out);
  for (auto k : {"precision", "recall", "map50", "map50_95"}) CHECK(j[k].get<double>() == doctest::Approx(1.0));
}

TEST_CASE("cli: errors are one machine-parsable line") {
  TempDir dir("cli");
  const auto missing = run("train --dataset " + (dir.path / "nope").string() + " --out x.bgf", dir.path);
  CHECK(missing.code != 0);
  const auto j = json::parse(missing.err);
  CHECK(j["error"].contains("type"));
  CHECK(j["error"].contains("message"));
  const auto flag = run("summary --no-such-flag", dir.path);
  CHECK(flag.code != 0);
  CHECK(json::parse(flag.err)["error"]["type"] == "usage");
  write_text_file(dir.path / "bad.json", "{\"input_size\": 100}");
  const auto cfg = run("summary --config " + (dir.path / "bad.json").string(), dir.path);
  CHECK(cfg.code != 0);
  CHECK(json::parse(cfg.err).contains("error"));
}

TEST_CASE("cli: train then eval is deterministic across thread counts") {
  TempDir dir("cli");
  small_dataset(dir.path / "data");
  const std::string data = (dir.path / "data").string(), ckpt = (dir.path / "m.bgf").string();
  const auto t = run("train --dataset " + data + " --input-size 64 --steps 3 --batch 3 --seed 2 --out " + ckpt, dir.path);
  REQUIRE(t.code == 0);
  CHECK(json::parse(t.out)["steps"] == 3);
  const std::string eval = "eval --dataset " + data + " --checkpoint " + ckpt + " --split val --conf 0.01";
  const auto one = run(eval, dir.path, "OMP_NUM_THREADS=1");
  const auto four = run(eval, dir.path, "OMP_NUM_THREADS=4");
  REQUIRE(one.code == 0);
  REQUIRE(four.code == 0);
  CHECK(one.out == four.out);
  CHECK(run(eval, dir.path, "OMP_NUM_THREADS=1").out == one.out);
}

TEST_CASE("cli: ablate loss emits one row per regression loss") {
  TempDir dir("cli");
  small_dataset(dir.path / "data");
  const auto r = run("ablate --axis loss --dataset " + (dir.path / "data").string() + " --input-size 64 --steps 1 --out " +
                         (dir.path / "ab.json").string(),
                     dir.path);
  REQUIRE(r.code == 0);
  const auto j = json::parse(read_text_file(dir.path / "ab.json"));
  REQUIRE(j["rows"].size() == 6);
  std::vector<std::string> v;
  for (const auto& row : j["rows"]) v.push_back(row["variant"]);
  CHECK(v == std::vector<std::string>{"giou", "diou", "ciou", "eiou", "siou", "wiou"});
  CHECK(std::count(r.out.begin(), r.out.end(), '\n') == 8);
}
