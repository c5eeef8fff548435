#include <doctest.h>

#include "bgf/checkpoint.hpp"
#include "bgf/io.hpp"
#include "bgf/model.hpp"
#include "test_util.hpp"

using namespace bgf;
using bgf::test::TempDir;

TEST_CASE("checkpoint: save, load, save is byte-identical") {
  ModelConfig cfg = toy_model_config();
  cfg.input_size = 64;
  Model<float> m(cfg, 3);
  const Checkpoint c = capture_model(m);
  TempDir dir("ckpt");
  save_checkpoint(dir.path / "a.bgf", c);
  const Checkpoint back = load_checkpoint(dir.path / "a.bgf");
  save_checkpoint(dir.path / "b.bgf", back);
  CHECK(read_text_file(dir.path / "a.bgf") == read_text_file(dir.path / "b.bgf"));
  CHECK(encode_checkpoint(back) == encode_checkpoint(c));
  CHECK(back.tensors.size() == c.tensors.size());
}

TEST_CASE("checkpoint: restore reproduces the model") {
  ModelConfig cfg = toy_model_config();
  cfg.input_size = 64;
  Model<float> a(cfg, 1), b(cfg, 2);
  restore_model(b, capture_model(a));
  CHECK(encode_checkpoint(capture_model(b)) == encode_checkpoint(capture_model(a)));
  Graph<float> ga(false), gb(false);
  NdTensor<float> x({1, cfg.backbone.in_channels, 64, 64}, 0.25f);
  const auto ya = a.forward(ga, x), yb = b.forward(gb, x);
  CHECK(max_abs_diff(ya.cls.value(), yb.cls.value()) == 0.0f);
  CHECK(max_abs_diff(ya.reg.value(), yb.reg.value()) == 0.0f);
}

TEST_CASE("checkpoint: corrupt and mismatched inputs") {
  ModelConfig cfg = toy_model_config();
  cfg.input_size = 64;
  Model<float> m(cfg, 3);
  auto bytes = encode_checkpoint(capture_model(m));
  auto bad = bytes;
  bad[0] = 'X';
  CHECK_THROWS_AS(decode_checkpoint(bad, "bad"), CheckpointError);
  auto trunc = bytes;
  trunc.resize(trunc.size() - 7);
  CHECK_THROWS_AS(decode_checkpoint(trunc, "trunc"), CheckpointError);
  ModelConfig other = cfg;
  other.head.num_classes = 2;
  Model<float> o(other, 3);
  CHECK_THROWS_AS(restore_model(o, decode_checkpoint(bytes, "ok")), CheckpointError);
}
