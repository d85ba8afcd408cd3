#include "pseudoseg/config.hpp"

#include <fstream>
#include <set>

#include "pseudoseg/checkpoint.hpp"
#include "pseudoseg/errors.hpp"

namespace pseudoseg::run {

namespace {

using nlohmann::json;

// Field-by-field reader that rejects unknown keys and names the offending
// path in every error.
class Reader {
 public:
  Reader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    check_config(j_.is_object(), path_ + ": expected an object");
  }

  ~Reader() = default;

  void allow(std::initializer_list<const char*> keys) {
    std::set<std::string> allowed(keys.begin(), keys.end());
    for (auto it = j_.begin(); it != j_.end(); ++it)
      check_config(allowed.count(it.key()) > 0, path_ + ": unknown field '" + it.key() + "'");
  }

  bool has(const char* key) const { return j_.contains(key); }
  const json& raw(const char* key) const { return j_.at(key); }
  std::string where(const char* key) const { return path_ + "." + key; }

  template <typename T>
  T get(const char* key, T fallback) const {
    if (!j_.contains(key)) return fallback;
    try {
      return j_.at(key).get<T>();
    } catch (const json::exception&) {
      throw ConfigError(where(key) + ": wrong type");
    }
  }

  std::string get_str(const char* key, const std::string& fallback) const {
    return get<std::string>(key, fallback);
  }

 private:
  const json& j_;
  std::string path_;
};

std::array<double, 3> parse_color(const json& j, const std::string& where) {
  check_config(j.is_array() && j.size() == 3, where + ": expected [r,g,b]");
  std::array<double, 3> c{};
  for (int i = 0; i < 3; ++i) {
    c[static_cast<std::size_t>(i)] = j.at(static_cast<std::size_t>(i)).get<double>();
    check_config(c[static_cast<std::size_t>(i)] >= 0.0 && c[static_cast<std::size_t>(i)] <= 1.0,
                 where + ": components must be in [0,1]");
  }
  return c;
}

}  // namespace

ExperimentConfig ExperimentConfig::from_json(const nlohmann::json& j) {
  ExperimentConfig cfg;
  Reader top(j, "config");
  top.allow({"dataset", "model", "train", "fusion", "augment", "output_dir"});
  cfg.output_dir = top.get_str("output_dir", "");

  if (top.has("dataset")) {
    Reader d(top.raw("dataset"), "dataset");
    d.allow({"source", "root", "num_classes", "canvas", "n_train", "n_val", "dataset_seed",
             "fraction", "split_seed", "min_class_pixels", "max_retries"});
    cfg.dataset.source = d.get_str("source", cfg.dataset.source);
    cfg.dataset.root = d.get_str("root", cfg.dataset.root);
    cfg.dataset.num_classes = d.get("num_classes", cfg.dataset.num_classes);
    if (d.has("canvas")) {
      const auto& c = d.raw("canvas");
      check_config(c.is_array() && c.size() == 2, "dataset.canvas: expected [H,W]");
      cfg.dataset.canvas_h = c.at(0).get<int>();
      cfg.dataset.canvas_w = c.at(1).get<int>();
    }
    cfg.dataset.n_train = d.get("n_train", cfg.dataset.n_train);
    cfg.dataset.n_val = d.get("n_val", cfg.dataset.n_val);
    cfg.dataset.dataset_seed = d.get("dataset_seed", cfg.dataset.dataset_seed);
    cfg.dataset.fraction = d.get_str("fraction", cfg.dataset.fraction);
    cfg.dataset.split_seed = d.get("split_seed", cfg.dataset.split_seed);
    cfg.dataset.min_class_pixels = d.get("min_class_pixels", cfg.dataset.min_class_pixels);
    cfg.dataset.max_retries = d.get("max_retries", cfg.dataset.max_retries);
  }

  if (top.has("model")) {
    Reader m(top.raw("model"), "model");
    m.allow({"backbone", "hypercolumn"});
    cfg.backbone = m.get_str("backbone", cfg.backbone);
    cfg.hypercolumn = m.get("hypercolumn", cfg.hypercolumn);
  }

  if (top.has("train")) {
    Reader t(top.raw("train"), "train");
    t.allow({"iterations", "base_lr", "lr_power", "momentum", "labeled_batch",
             "unlabeled_batch", "mode", "seed", "eval_interval", "checkpoint_interval",
             "attention_embed_dim", "pseudo_label_source", "threads"});
    auto& tc = cfg.train;
    tc.iterations = t.get("iterations", tc.iterations);
    tc.base_lr = t.get("base_lr", tc.base_lr);
    tc.lr_power = t.get("lr_power", tc.lr_power);
    tc.momentum = t.get("momentum", tc.momentum);
    tc.labeled_batch = t.get("labeled_batch", tc.labeled_batch);
    tc.unlabeled_batch = t.get("unlabeled_batch", tc.unlabeled_batch);
    if (t.has("mode")) tc.mode = train::parse_mode(t.get_str("mode", ""));
    tc.seed = t.get("seed", tc.seed);
    tc.eval_interval = t.get("eval_interval", tc.eval_interval);
    tc.checkpoint_interval = t.get("checkpoint_interval", tc.checkpoint_interval);
    tc.attention_embed_dim = t.get("attention_embed_dim", tc.attention_embed_dim);
    tc.pseudo_label_source = t.get_str("pseudo_label_source", tc.pseudo_label_source);
    tc.threads = t.get("threads", tc.threads);
  }

  if (top.has("fusion")) {
    Reader f(top.raw("fusion"), "fusion");
    f.allow({"preset", "gamma", "temperature", "mode", "hard_threshold"});
    auto& fc = cfg.train.fusion;
    if (f.has("preset")) fc = sgc::FusionConfig::preset(f.get_str("preset", ""));
    fc.gamma = f.get("gamma", fc.gamma);
    fc.temperature = f.get("temperature", fc.temperature);
    if (f.has("mode")) {
      const std::string m = f.get_str("mode", "soft");
      check_config(m == "soft" || m == "hard", "fusion.mode: expected soft|hard");
      fc.mode = m == "soft" ? sgc::FusionConfig::Mode::soft : sgc::FusionConfig::Mode::hard;
    }
    fc.hard_threshold = f.get("hard_threshold", fc.hard_threshold);
  }

  if (top.has("augment")) {
    Reader a(top.raw("augment"), "augment");
    a.allow({"jitter_strength", "cutout_size", "scale", "crop", "hflip_prob", "mean_color"});
    auto& ac = cfg.train.augment;
    ac.jitter_strength = a.get("jitter_strength", ac.jitter_strength);
    ac.cutout_size = a.get("cutout_size", ac.cutout_size);
    if (a.has("scale")) {
      const auto& s = a.raw("scale");
      check_config(s.is_array() && s.size() == 2, "augment.scale: expected [lo,hi]");
      ac.scale_lo = s.at(0).get<double>();
      ac.scale_hi = s.at(1).get<double>();
    }
    if (a.has("crop")) {
      const auto& c = a.raw("crop");
      check_config(c.is_array() && c.size() == 2, "augment.crop: expected [H,W]");
      ac.crop_h = c.at(0).get<int>();
      ac.crop_w = c.at(1).get<int>();
    }
    ac.hflip_prob = a.get("hflip_prob", ac.hflip_prob);
    if (a.has("mean_color") && !a.raw("mean_color").is_null()) {
      if (a.raw("mean_color").is_string()) {
        check_config(a.get_str("mean_color", "") == "auto",
                     "augment.mean_color: expected \"auto\" or [r,g,b]");
        cfg.mean_color_auto = true;
      } else {
        ac.mean_color = parse_color(a.raw("mean_color"), "augment.mean_color");
        cfg.mean_color_auto = false;
      }
    }
  }

  return cfg;
}

ExperimentConfig ExperimentConfig::load(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw ConfigError("cannot open config file " + file.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config parse error in " + file.string() + ": " + e.what());
  }
  return from_json(j);
}

nlohmann::json ExperimentConfig::to_json() const {
  nlohmann::json j;
  j["dataset"] = {{"source", dataset.source},
                  {"root", dataset.root},
                  {"num_classes", dataset.num_classes},
                  {"canvas", {dataset.canvas_h, dataset.canvas_w}},
                  {"n_train", dataset.n_train},
                  {"n_val", dataset.n_val},
                  {"dataset_seed", dataset.dataset_seed},
                  {"fraction", dataset.fraction},
                  {"split_seed", dataset.split_seed},
                  {"min_class_pixels", dataset.min_class_pixels},
                  {"max_retries", dataset.max_retries}};
  j["model"] = {{"backbone", backbone}, {"hypercolumn", hypercolumn}};
  j["train"] = {{"iterations", train.iterations},
                {"base_lr", train.base_lr},
                {"lr_power", train.lr_power},
                {"momentum", train.momentum},
                {"labeled_batch", train.labeled_batch},
                {"unlabeled_batch", train.unlabeled_batch},
                {"mode", train::mode_name(train.mode)},
                {"seed", train.seed},
                {"eval_interval", train.eval_interval},
                {"checkpoint_interval", train.checkpoint_interval},
                {"attention_embed_dim", train.attention_embed_dim},
                {"pseudo_label_source", train.pseudo_label_source},
                {"threads", train.threads}};
  j["fusion"] = {{"gamma", train.fusion.gamma},
                 {"temperature", train.fusion.temperature},
                 {"mode", train.fusion.mode == sgc::FusionConfig::Mode::soft ? "soft" : "hard"},
                 {"hard_threshold", train.fusion.hard_threshold}};
  nlohmann::json aug = {{"jitter_strength", train.augment.jitter_strength},
                        {"cutout_size", train.augment.cutout_size},
                        {"scale", {train.augment.scale_lo, train.augment.scale_hi}},
                        {"crop", {train.augment.crop_h, train.augment.crop_w}},
                        {"hflip_prob", train.augment.hflip_prob}};
  if (mean_color_auto)
    aug["mean_color"] = "auto";
  else
    aug["mean_color"] = {train.augment.mean_color[0], train.augment.mean_color[1],
                         train.augment.mean_color[2]};
  j["augment"] = aug;
  j["output_dir"] = output_dir;
  return j;
}

void ExperimentConfig::validate() const {
  check_config(dataset.source == "shapes" || dataset.source == "voc_dir",
               "dataset.source: expected shapes|voc_dir, got '" + dataset.source + "'");
  if (dataset.source == "voc_dir")
    check_config(!dataset.root.empty(), "dataset.root: required for voc_dir source");
  check_config(dataset.num_classes >= 2, "dataset.num_classes must be >= 2");
  check_config(dataset.n_train >= 1, "dataset.n_train must be >= 1");
  check_config(dataset.n_val >= 1, "dataset.n_val must be >= 1");
  check_config(dataset.min_class_pixels >= 1, "dataset.min_class_pixels must be >= 1");
  check_config(dataset.max_retries >= 1, "dataset.max_retries must be >= 1");
  data::Fraction::parse(dataset.fraction);
  model_config().validate();
  train.validate();
}

net::ModelConfig ExperimentConfig::model_config() const {
  net::ModelConfig mc = net::ModelConfig::preset(backbone, dataset.num_classes);
  mc.hypercolumn = hypercolumn;
  return mc;
}

std::uint64_t ExperimentConfig::hash() const { return train::fnv1a64(to_json().dump()); }

namespace {

void diff_walk(const nlohmann::json& a, const nlohmann::json& b, const std::string& path,
               std::vector<std::string>& out) {
  if (a.is_object() && b.is_object()) {
    std::set<std::string> keys;
    for (auto it = a.begin(); it != a.end(); ++it) keys.insert(it.key());
    for (auto it = b.begin(); it != b.end(); ++it) keys.insert(it.key());
    for (const auto& k : keys) {
      const std::string sub = path.empty() ? k : path + "." + k;
      if (!a.contains(k) || !b.contains(k))
        out.push_back(sub);
      else
        diff_walk(a.at(k), b.at(k), sub, out);
    }
    return;
  }
  if (a != b) out.push_back(path);
}

}  // namespace

std::vector<std::string> config_diff(const nlohmann::json& a, const nlohmann::json& b) {
  std::vector<std::string> out;
  diff_walk(a, b, "", out);
  return out;
}

}  // namespace pseudoseg::run
