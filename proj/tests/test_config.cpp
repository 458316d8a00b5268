#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <unistd.h>

#include <filesystem>
#include <fstream>

#include "test_util.hpp"
#include "tokenfusion/model.hpp"
#include "tokenfusion/run_config.hpp"
#include "tokenfusion/weights_io.hpp"

using namespace tokenfusion;

namespace {

struct TempDir {
  std::filesystem::path path;
  TempDir() {
    static int counter = 0;
    path = std::filesystem::temp_directory_path() /
           ("tokenfusion_cfg_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::create_directories(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
};

}  // namespace

// ===================== run config =====================

TEST_CASE("an empty document parses to pure defaults") {
  RunConfig cfg = parse_run_config("{}");
  CHECK(cfg.model.fusion_method == FusionMethod::LateParallel);
  CHECK(cfg.model.embed_dim == 64);
  CHECK(cfg.optim.algorithm == OptimAlgorithm::Adam);
  CHECK(cfg.optim.learning_rate == doctest::Approx(3e-4));
  CHECK(cfg.optim.weight_decay == doctest::Approx(0.01));
  CHECK(cfg.optim.batch_size == 32);
  CHECK(cfg.augment.max_rotation_deg == 15.0);
  CHECK(cfg.dataset.kind == DatasetSource::Kind::Synthetic);
  CHECK(cfg.seed == 0);
}

TEST_CASE("serialization fills every default and round-trips losslessly") {
  RunConfig cfg = parse_run_config(R"({"model": {"embed_dim": 16}, "seed": 9})");
  std::string text = serialize_run_config(cfg);
  // The emitted tree must carry defaults explicitly.
  CHECK(text.find("\"heads\"") != std::string::npos);
  CHECK(text.find("\"learning_rate\"") != std::string::npos);
  CHECK(text.find("\"max_rotation_deg\"") != std::string::npos);
  CHECK(text.find("\"stages\"") != std::string::npos);

  RunConfig again = parse_run_config(text);
  CHECK(serialize_run_config(again) == text);
  CHECK(again.model.embed_dim == 16);
  CHECK(again.seed == 9);
}

TEST_CASE("unknown keys are rejected at every level") {
  CHECK_THROWS_AS(parse_run_config(R"({"modle": {}})"), ConfigError);
  CHECK_THROWS_AS(parse_run_config(R"({"model": {"embed_dims": 8}})"), ConfigError);
  CHECK_THROWS_AS(parse_run_config(R"({"optim": {"lr": 0.1}})"), ConfigError);
  CHECK_THROWS_AS(parse_run_config(R"({"augment": {"flip": 1}})"), ConfigError);
  CHECK_THROWS_AS(parse_run_config(R"({"dataset": {"kindd": "synthetic"}})"), ConfigError);
  CHECK_THROWS_AS(parse_run_config(R"({"model": {"backbone": {"stem": 4}}})"), ConfigError);
  CHECK_THROWS_AS(
      parse_run_config(
          R"({"model": {"backbone": {"stages": [{"blocks": 1}, {}, {}, {}]}}})"),
      ConfigError);
}

TEST_CASE("bad values and bad JSON are config errors") {
  CHECK_THROWS_AS(parse_run_config("not json"), ConfigError);
  CHECK_THROWS_AS(parse_run_config(R"({"model": {"fusion_method": "sideways"}})"), ConfigError);
  CHECK_THROWS_AS(parse_run_config(R"({"optim": {"algorithm": "rmsprop"}})"), ConfigError);
  CHECK_THROWS_AS(parse_run_config(R"({"dataset": {"kind": "imagenet"}})"), ConfigError);
  CHECK_THROWS_AS(parse_run_config(R"({"model": {"embed_dim": "wide"}})"), ConfigError);
}

TEST_CASE("enum fields round-trip through their snake_case names") {
  RunConfig cfg = parse_run_config(R"({
    "model": {"fusion_method": "layer_by_layer", "head_type": "mixing",
               "combine_variant": "copy_add", "bridge_variant": "copy_single",
               "use_class_token": true},
    "optim": {"algorithm": "sgd_momentum"}
  })");
  CHECK(cfg.model.fusion_method == FusionMethod::LayerByLayer);
  CHECK(cfg.model.head_type == HeadType::Mixing);
  CHECK(cfg.model.combine_variant == CombineVariant::CopyAdd);
  CHECK(cfg.model.bridge_variant == BridgeVariant::CopySingle);
  CHECK(cfg.model.use_class_token);
  CHECK(cfg.optim.algorithm == OptimAlgorithm::SgdMomentum);
  RunConfig again = parse_run_config(serialize_run_config(cfg));
  CHECK(again.model.fusion_method == FusionMethod::LayerByLayer);
  CHECK(again.optim.algorithm == OptimAlgorithm::SgdMomentum);
}

TEST_CASE("backbone stages parse into the typed config") {
  RunConfig cfg = parse_run_config(R"({
    "model": {"backbone": {"stem_channels": 8, "stages": [
      {"num_blocks": 1, "out_channels": 8, "stride": 2},
      {"num_blocks": 2, "out_channels": 16, "stride": 2},
      {"num_blocks": 2, "out_channels": 32, "stride": 2},
      {"num_blocks": 1, "out_channels": 32, "stride": 2}
    ]}}
  })");
  CHECK(cfg.model.backbone.stem_channels == 8);
  CHECK(cfg.model.backbone.stages[1].num_blocks == 2);
  CHECK(cfg.model.backbone.stages[2].out_channels == 32);
}

TEST_CASE("file loading reports missing files as config errors") {
  CHECK_THROWS_AS(load_run_config("/nonexistent/p.json"), ConfigError);
  TempDir dir;
  const auto p = dir.path / "run.json";
  std::ofstream(p) << R"({"seed": 4})";
  CHECK(load_run_config(p.string()).seed == 4);
}

// ===================== overrides =====================

TEST_CASE("overrides rewrite scalar fields") {
  RunConfig base = parse_run_config("{}");
  RunConfig a = apply_override(base, "model.embed_dim=16");
  CHECK(a.model.embed_dim == 16);
  RunConfig b = apply_override(base, "optim.learning_rate=0.5");
  CHECK(b.optim.learning_rate == doctest::Approx(0.5));
  RunConfig c = apply_override(base, "optim.algorithm=sgd_momentum");
  CHECK(c.optim.algorithm == OptimAlgorithm::SgdMomentum);
  RunConfig d = apply_override(base, "model.relax_block_budget=true");
  CHECK(d.model.relax_block_budget);
  RunConfig e = apply_override(base, "out_dir=elsewhere");
  CHECK(e.out_dir == "elsewhere");
}

TEST_CASE("overrides reach nested stage entries") {
  RunConfig base = parse_run_config("{}");
  RunConfig cfg = apply_override(base, "model.backbone.stages.2.out_channels=48");
  CHECK(cfg.model.backbone.stages[2].out_channels == 48);
}

TEST_CASE("malformed or unknown overrides are rejected") {
  RunConfig base = parse_run_config("{}");
  CHECK_THROWS_AS(apply_override(base, "no_equals_sign"), ConfigError);
  CHECK_THROWS_AS(apply_override(base, "=5"), ConfigError);
  CHECK_THROWS_AS(apply_override(base, "model.no_such_knob=1"), ConfigError);
  CHECK_THROWS_AS(apply_override(base, "model.embed_dim=not_a_number"), ConfigError);
}

// ===================== weights io =====================

namespace {

ModelConfig small_model_config() {
  ModelConfig cfg;
  cfg.fusion_method = FusionMethod::LateParallel;
  cfg.head_type = HeadType::TokenWise;
  cfg.embed_dim = 8;
  cfg.heads = 2;
  cfg.patch_size = 8;
  cfg.num_classes = 3;
  cfg.late_depth_vit = 1;
  cfg.late_depth_cnn = 1;
  cfg.relax_block_budget = true;
  cfg.backbone.stem_channels = 4;
  cfg.backbone.stages = {StageSpec{1, 8, 2}, StageSpec{1, 8, 2}, StageSpec{1, 8, 2},
                         StageSpec{1, 8, 2}};
  return cfg;
}

}  // namespace

TEST_CASE("weights survive a save/load round trip bitwise") {
  TempDir dir;
  const std::string path = (dir.path / "w.bin").string();

  FusionModel<float> source(small_model_config(), 40);
  save_weights(path, source.params());

  FusionModel<float> target(small_model_config(), 41);  // different init
  bool all_equal = true;
  {
    const auto& se = source.params().entries();
    const auto& te = target.params().entries();
    for (size_t i = 0; i < se.size(); ++i)
      for (int64_t j = 0; j < se[i].second.numel(); ++j)
        if (se[i].second.data()[j] != te[i].second.data()[j]) all_equal = false;
  }
  CHECK(!all_equal);  // seeds differ, so the pre-load weights differ

  load_weights(path, target.params());
  const auto& se = source.params().entries();
  const auto& te = target.params().entries();
  REQUIRE(se.size() == te.size());
  for (size_t i = 0; i < se.size(); ++i) {
    CHECK(se[i].first == te[i].first);
    for (int64_t j = 0; j < se[i].second.numel(); ++j)
      CHECK(se[i].second.data()[j] == te[i].second.data()[j]);
  }
}

TEST_CASE("shape mismatches are detected") {
  TempDir dir;
  const std::string path = (dir.path / "w.bin").string();
  FusionModel<float> source(small_model_config(), 40);
  save_weights(path, source.params());

  ModelConfig other = small_model_config();
  other.embed_dim = 16;  // changes many tensor shapes
  FusionModel<float> target(other, 40);
  CHECK_THROWS_AS(load_weights(path, target.params()), WeightsMismatchError);
}

TEST_CASE("dtype mismatches are detected") {
  TempDir dir;
  const std::string path = (dir.path / "w.bin").string();
  FusionModel<float> source(small_model_config(), 40);
  save_weights(path, source.params());
  FusionModel<double> target(small_model_config(), 40);
  CHECK_THROWS_AS(load_weights(path, target.params()), WeightsMismatchError);
}

TEST_CASE("garbage and truncated files are rejected") {
  TempDir dir;
  const std::string bad = (dir.path / "bad.bin").string();
  std::ofstream(bad, std::ios::binary) << "not a weights file";
  FusionModel<float> model(small_model_config(), 40);
  CHECK_THROWS_AS(load_weights(bad, model.params()), WeightsMismatchError);

  const std::string path = (dir.path / "w.bin").string();
  save_weights(path, model.params());
  // Chop the file short.
  const auto full_size = std::filesystem::file_size(path);
  std::filesystem::resize_file(path, full_size / 2);
  CHECK_THROWS_AS(load_weights(path, model.params()), WeightsMismatchError);
}

TEST_CASE("trailing bytes are rejected") {
  TempDir dir;
  const std::string path = (dir.path / "w.bin").string();
  FusionModel<float> model(small_model_config(), 40);
  save_weights(path, model.params());
  std::ofstream(path, std::ios::binary | std::ios::app) << "x";
  CHECK_THROWS_AS(load_weights(path, model.params()), WeightsMismatchError);
}

TEST_CASE("loaded weights change model outputs to match the source") {
  TempDir dir;
  const std::string path = (dir.path / "w.bin").string();
  FusionModel<float> source(small_model_config(), 40);
  FusionModel<float> target(small_model_config(), 99);
  save_weights(path, source.params());

  Rng rng(3);
  Tensor<float> img = testutil::random_tensor<float>({1, 3, 32, 32}, rng);
  Tensor<float> before = target.forward(img);
  load_weights(path, target.params());
  Tensor<float> after = target.forward(img);
  Tensor<float> want = source.forward(img);
  CHECK(testutil::max_abs_diff(before, want) > 0.0);
  CHECK(testutil::max_abs_diff(after, want) == 0.0);
}
