#include <doctest.h>

#include "bgf/io.hpp"
#include "bgf/synthetic.hpp"
#include "bgf/train.hpp"
#include "test_util.hpp"

using namespace bgf;
using bgf::test::TempDir;

namespace {

struct SmallSetup {
  TempDir dir{"train"};
  DatasetDescriptor ds;
  ModelConfig model = toy_model_config();
  TrainConfig train;

  SmallSetup() {
    SyntheticSpec spec;
    spec.image_size = 64;
    spec.min_radius = 5;
    spec.max_radius = 12;
    spec.seed = 11;
    ds = gen_synthetic(spec, {12, 4, 0}, dir.path / "data");
    model.input_size = 64;
    train.steps = 10;
    train.batch = 4;
    train.seed = 5;
  }
};

std::vector<float> params_of(const Checkpoint& c) {
  std::vector<float> out;
  for (const auto& t : c.tensors)
    if (t.kind == "param") out.insert(out.end(), t.data.begin(), t.data.end());
  return out;
}

}  // namespace

TEST_CASE("TrainConfig: defaults, validation and schedule") {
  TrainConfig c;
  CHECK(c.lr0 == 0.01);
  CHECK(c.lr_final == 0.01);
  CHECK(c.momentum == 0.937);
  CHECK(c.batch == 5);
  CHECK(c.epochs == 120);
  CHECK(c.total_steps(23) == 120 * 5);
  CHECK(c.lr_at(0, 100) == 0.01);
  CHECK(c.lr_at(99, 100) == 0.01);
  c.lr_final = 0.001;
  CHECK(c.lr_at(0, 100) == doctest::Approx(0.01));
  CHECK(c.lr_at(99, 100) < c.lr_at(50, 100));
  TrainConfig bad;
  bad.momentum = 1.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = {};
  bad.batch = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  CHECK(train_config_to_json(train_config_from_json(train_config_to_json(c))) == train_config_to_json(c));
}

TEST_CASE("train_toy: zero learning rate leaves parameters unchanged") {
  SmallSetup s;
  s.train.steps = 1;
  s.train.lr0 = s.train.lr_final = 0.0;
  const auto r = train_toy(s.model, s.train, s.ds);
  REQUIRE(r.log.size() == 1);
  Model<float> fresh(s.model, s.train.seed);
  CHECK(params_of(r.checkpoint) == params_of(capture_model(fresh)));
}

TEST_CASE("train_toy: fixed seed is bit-reproducible at 64-bit precision") {
  SmallSetup s;
  s.train.precision = Precision::F64;
  const auto a = train_toy(s.model, s.train, s.ds);
  const auto b = train_toy(s.model, s.train, s.ds);
  REQUIRE(a.log.size() == 10);
  REQUIRE(b.log.size() == 10);
  for (std::size_t i = 0; i < a.log.size(); ++i) {
    CHECK(a.log[i].loss.total == b.log[i].loss.total);
    CHECK(a.log[i].loss.box == b.log[i].loss.box);
    CHECK(a.log[i].loss.cls == b.log[i].loss.cls);
    CHECK(a.log[i].loss.dfl == b.log[i].loss.dfl);
    CHECK(loss_log_row(a.log[i]) == loss_log_row(b.log[i]));
  }
  CHECK(encode_checkpoint(a.checkpoint) == encode_checkpoint(b.checkpoint));
}

TEST_CASE("train_toy: writes the CSV log and checkpoint") {
  SmallSetup s;
  s.train.steps = 3;
  TrainOptions opt;
  opt.log_csv = s.dir.path / "log.csv";
  opt.checkpoint_out = s.dir.path / "model.bgf";
  const auto r = train_toy(s.model, s.train, s.ds, opt);
  const std::string csv = read_text_file(*opt.log_csv);
  CHECK(csv.rfind(loss_log_header(), 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 4);
  CHECK(encode_checkpoint(load_checkpoint(*opt.checkpoint_out)) == encode_checkpoint(r.checkpoint));
}

TEST_CASE("train_toy: resume rejects a mismatched config") {
  SmallSetup s;
  s.train.steps = 2;
  TrainOptions opt;
  opt.checkpoint_out = s.dir.path / "a.bgf";
  train_toy(s.model, s.train, s.ds, opt);
  TrainOptions resume;
  resume.resume_from = opt.checkpoint_out;
  ModelConfig other = s.model;
  other.loss.reg = IouVariant::GIoU;
  CHECK_THROWS_AS(train_toy(other, s.train, s.ds, resume), ConfigError);
  TrainConfig t2 = s.train;
  t2.momentum = 0.9;
  CHECK_THROWS_AS(train_toy(s.model, t2, s.ds, resume), ConfigError);
}

TEST_CASE("train_toy: resuming continues the same run") {
  SmallSetup s;
  s.train.steps = 6;
  const auto straight = train_toy(s.model, s.train, s.ds);
  TrainOptions first;
  first.checkpoint_out = s.dir.path / "half.bgf";
  TrainConfig half = s.train;
  half.steps = 3;
  train_toy(s.model, half, s.ds, first);
  TrainOptions second;
  second.resume_from = first.checkpoint_out;
  const auto resumed = train_toy(s.model, s.train, s.ds, second);
  REQUIRE(!resumed.log.empty());
  CHECK(resumed.log.back().step == straight.log.back().step);
  CHECK(resumed.log.back().loss.total == doctest::Approx(straight.log.back().loss.total).epsilon(1e-9));
}

TEST_CASE("evaluate_checkpoint: report fields stay in range") {
  SmallSetup s;
  s.train.steps = 2;
  const auto r = train_toy(s.model, s.train, s.ds);
  const auto e = evaluate_checkpoint(r.checkpoint, s.ds, "val");
  CHECK(e.detections.size() == 4);
  for (double v : {e.report.precision, e.report.recall, e.report.map50, e.report.map50_95}) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }
}
