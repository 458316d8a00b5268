#include "tokenfusion/run_config.hpp"

#include <fstream>
#include <functional>
#include <set>
#include <sstream>

#include <json.hpp>

namespace tokenfusion {

namespace {

using json = nlohmann::ordered_json;

[[noreturn]] void bad(const std::string& msg) { throw ConfigError("config: " + msg); }

void check_keys(const json& obj, const std::string& where, const std::set<std::string>& known) {
  if (!obj.is_object()) bad(where + " must be a JSON object");
  for (const auto& [key, value] : obj.items()) {
    (void)value;
    if (!known.count(key)) bad("unknown key '" + key + "' in " + where);
  }
}

template <typename V>
void take(const json& obj, const std::string& where, const char* key, V& out) {
  if (!obj.contains(key)) return;
  try {
    out = obj.at(key).get<V>();
  } catch (const json::exception&) {
    bad(std::string("bad value for ") + key + " in " + where);
  }
}

void take_enum(const json& obj, const std::string& where, const char* key,
               const std::function<void(const std::string&)>& set) {
  if (!obj.contains(key)) return;
  if (!obj.at(key).is_string()) bad(std::string(key) + " in " + where + " must be a string");
  set(obj.at(key).get<std::string>());
}

StageSpec parse_stage(const json& obj, const std::string& where) {
  check_keys(obj, where, {"num_blocks", "out_channels", "stride"});
  StageSpec s;
  take(obj, where, "num_blocks", s.num_blocks);
  take(obj, where, "out_channels", s.out_channels);
  take(obj, where, "stride", s.stride);
  return s;
}

BackboneConfig parse_backbone(const json& obj) {
  check_keys(obj, "model.backbone", {"stem_channels", "stages"});
  BackboneConfig cfg = BackboneConfig::toy();
  take(obj, "model.backbone", "stem_channels", cfg.stem_channels);
  if (obj.contains("stages")) {
    const json& stages = obj.at("stages");
    if (!stages.is_array() || stages.size() != cfg.stages.size())
      bad("model.backbone.stages must be an array of " + std::to_string(cfg.stages.size()) +
          " stage objects");
    for (size_t i = 0; i < cfg.stages.size(); ++i)
      cfg.stages[i] = parse_stage(stages[i], "model.backbone.stages[" + std::to_string(i) + "]");
  }
  return cfg;
}

ModelConfig parse_model(const json& obj) {
  check_keys(obj, "model",
             {"fusion_method", "combine_variant", "bridge_variant", "head_type",
              "use_class_token", "backbone", "embed_dim", "heads", "mlp_ratio", "patch_size",
              "num_classes", "image_h", "image_w", "late_depth_vit", "late_depth_cnn",
              "early_depth", "mixing_block_depth", "tail_depth", "relax_block_budget",
              "freeze_backbone", "identity_init"});
  ModelConfig cfg;
  take_enum(obj, "model", "fusion_method",
            [&](const std::string& s) { cfg.fusion_method = fusion_method_from_string(s); });
  take_enum(obj, "model", "combine_variant",
            [&](const std::string& s) { cfg.combine_variant = combine_variant_from_string(s); });
  take_enum(obj, "model", "bridge_variant",
            [&](const std::string& s) { cfg.bridge_variant = bridge_variant_from_string(s); });
  take_enum(obj, "model", "head_type",
            [&](const std::string& s) { cfg.head_type = head_type_from_string(s); });
  take(obj, "model", "use_class_token", cfg.use_class_token);
  if (obj.contains("backbone")) cfg.backbone = parse_backbone(obj.at("backbone"));
  take(obj, "model", "embed_dim", cfg.embed_dim);
  take(obj, "model", "heads", cfg.heads);
  take(obj, "model", "mlp_ratio", cfg.mlp_ratio);
  take(obj, "model", "patch_size", cfg.patch_size);
  take(obj, "model", "num_classes", cfg.num_classes);
  take(obj, "model", "image_h", cfg.image_h);
  take(obj, "model", "image_w", cfg.image_w);
  take(obj, "model", "late_depth_vit", cfg.late_depth_vit);
  take(obj, "model", "late_depth_cnn", cfg.late_depth_cnn);
  take(obj, "model", "early_depth", cfg.early_depth);
  take(obj, "model", "mixing_block_depth", cfg.mixing_block_depth);
  take(obj, "model", "tail_depth", cfg.tail_depth);
  take(obj, "model", "relax_block_budget", cfg.relax_block_budget);
  take(obj, "model", "freeze_backbone", cfg.freeze_backbone);
  take(obj, "model", "identity_init", cfg.identity_init);
  return cfg;
}

OptimConfig parse_optim(const json& obj) {
  check_keys(obj, "optim",
             {"algorithm", "learning_rate", "weight_decay", "momentum", "beta1", "beta2",
              "adam_eps", "batch_size", "epochs"});
  OptimConfig cfg;
  take_enum(obj, "optim", "algorithm",
            [&](const std::string& s) { cfg.algorithm = optim_algorithm_from_string(s); });
  take(obj, "optim", "learning_rate", cfg.learning_rate);
  take(obj, "optim", "weight_decay", cfg.weight_decay);
  take(obj, "optim", "momentum", cfg.momentum);
  take(obj, "optim", "beta1", cfg.beta1);
  take(obj, "optim", "beta2", cfg.beta2);
  take(obj, "optim", "adam_eps", cfg.adam_eps);
  take(obj, "optim", "batch_size", cfg.batch_size);
  take(obj, "optim", "epochs", cfg.epochs);
  return cfg;
}

AugmentConfig parse_augment(const json& obj) {
  check_keys(obj, "augment", {"hflip_prob", "vflip_prob", "max_rotation_deg"});
  AugmentConfig cfg;
  take(obj, "augment", "hflip_prob", cfg.hflip_prob);
  take(obj, "augment", "vflip_prob", cfg.vflip_prob);
  take(obj, "augment", "max_rotation_deg", cfg.max_rotation_deg);
  return cfg;
}

DatasetSource parse_dataset(const json& obj) {
  check_keys(obj, "dataset",
             {"kind", "path", "train_count", "val_count", "num_classes", "image_size", "seed"});
  DatasetSource src;
  take_enum(obj, "dataset", "kind", [&](const std::string& s) {
    if (s == "cifar10_dir")
      src.kind = DatasetSource::Kind::Cifar10Dir;
    else if (s == "cifar10_file")
      src.kind = DatasetSource::Kind::Cifar10File;
    else if (s == "synthetic")
      src.kind = DatasetSource::Kind::Synthetic;
    else
      bad("unknown dataset kind: " + s);
  });
  take(obj, "dataset", "path", src.path);
  take(obj, "dataset", "train_count", src.train_count);
  take(obj, "dataset", "val_count", src.val_count);
  take(obj, "dataset", "num_classes", src.num_classes);
  take(obj, "dataset", "image_size", src.image_size);
  take(obj, "dataset", "seed", src.seed);
  return src;
}

const char* dataset_kind_name(DatasetSource::Kind k) {
  switch (k) {
    case DatasetSource::Kind::Cifar10Dir: return "cifar10_dir";
    case DatasetSource::Kind::Cifar10File: return "cifar10_file";
    case DatasetSource::Kind::Synthetic: return "synthetic";
  }
  return "?";
}

json to_json(const RunConfig& cfg) {
  json stages = json::array();
  for (const StageSpec& s : cfg.model.backbone.stages)
    stages.push_back(json{{"num_blocks", s.num_blocks},
                          {"out_channels", s.out_channels},
                          {"stride", s.stride}});
  return json{
      {"model",
       {{"fusion_method", to_string(cfg.model.fusion_method)},
        {"combine_variant", to_string(cfg.model.combine_variant)},
        {"bridge_variant", to_string(cfg.model.bridge_variant)},
        {"head_type", to_string(cfg.model.head_type)},
        {"use_class_token", cfg.model.use_class_token},
        {"backbone", {{"stem_channels", cfg.model.backbone.stem_channels}, {"stages", stages}}},
        {"embed_dim", cfg.model.embed_dim},
        {"heads", cfg.model.heads},
        {"mlp_ratio", cfg.model.mlp_ratio},
        {"patch_size", cfg.model.patch_size},
        {"num_classes", cfg.model.num_classes},
        {"image_h", cfg.model.image_h},
        {"image_w", cfg.model.image_w},
        {"late_depth_vit", cfg.model.late_depth_vit},
        {"late_depth_cnn", cfg.model.late_depth_cnn},
        {"early_depth", cfg.model.early_depth},
        {"mixing_block_depth", cfg.model.mixing_block_depth},
        {"tail_depth", cfg.model.tail_depth},
        {"relax_block_budget", cfg.model.relax_block_budget},
        {"freeze_backbone", cfg.model.freeze_backbone},
        {"identity_init", cfg.model.identity_init}}},
      {"optim",
       {{"algorithm", to_string(cfg.optim.algorithm)},
        {"learning_rate", cfg.optim.learning_rate},
        {"weight_decay", cfg.optim.weight_decay},
        {"momentum", cfg.optim.momentum},
        {"beta1", cfg.optim.beta1},
        {"beta2", cfg.optim.beta2},
        {"adam_eps", cfg.optim.adam_eps},
        {"batch_size", cfg.optim.batch_size},
        {"epochs", cfg.optim.epochs}}},
      {"augment",
       {{"hflip_prob", cfg.augment.hflip_prob},
        {"vflip_prob", cfg.augment.vflip_prob},
        {"max_rotation_deg", cfg.augment.max_rotation_deg}}},
      {"dataset",
       {{"kind", dataset_kind_name(cfg.dataset.kind)},
        {"path", cfg.dataset.path},
        {"train_count", cfg.dataset.train_count},
        {"val_count", cfg.dataset.val_count},
        {"num_classes", cfg.dataset.num_classes},
        {"image_size", cfg.dataset.image_size},
        {"seed", cfg.dataset.seed}}},
      {"out_dir", cfg.out_dir},
      {"seed", cfg.seed}};
}

RunConfig from_json(const json& root) {
  check_keys(root, "config root", {"model", "optim", "augment", "dataset", "out_dir", "seed"});
  RunConfig cfg;
  if (root.contains("model")) cfg.model = parse_model(root.at("model"));
  if (root.contains("optim")) cfg.optim = parse_optim(root.at("optim"));
  if (root.contains("augment")) cfg.augment = parse_augment(root.at("augment"));
  if (root.contains("dataset")) cfg.dataset = parse_dataset(root.at("dataset"));
  take(root, "config root", "out_dir", cfg.out_dir);
  take(root, "config root", "seed", cfg.seed);
  return cfg;
}

}  // namespace

RunConfig parse_run_config(const std::string& json_text) {
  json root;
  try {
    root = json::parse(json_text);
  } catch (const json::exception& e) {
    bad(std::string("invalid JSON: ") + e.what());
  }
  return from_json(root);
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_run_config(buf.str());
}

std::string serialize_run_config(const RunConfig& cfg) { return to_json(cfg).dump(2) + "\n"; }

RunConfig apply_override(const RunConfig& cfg, const std::string& assignment) {
  const size_t eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0)
    bad("override must look like path.to.key=value, got '" + assignment + "'");
  const std::string path = assignment.substr(0, eq);
  const std::string value = assignment.substr(eq + 1);

  std::string pointer = "/";
  for (char c : path) pointer += (c == '.') ? '/' : c;

  json root = to_json(cfg);
  json parsed;
  try {
    parsed = json::parse(value);
  } catch (const json::exception&) {
    parsed = value;  // not a JSON literal; treat as a plain string
  }
  try {
    json::json_pointer ptr(pointer);
    if (!root.contains(ptr)) bad("override targets unknown key '" + path + "'");
    root[ptr] = parsed;
  } catch (const json::exception&) {
    bad("override targets invalid path '" + path + "'");
  }
  return from_json(root);
}

}  // namespace tokenfusion
