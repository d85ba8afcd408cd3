#include "pseudoseg/runner.hpp"

#include <cstdlib>
#include <fstream>
#include <iostream>

#include "pseudoseg/checkpoint.hpp"
#include "pseudoseg/errors.hpp"
#include "pseudoseg/selftrain.hpp"
#include "pseudoseg/voc.hpp"

namespace pseudoseg::run {

namespace fs = std::filesystem;
using nlohmann::json;

std::unique_ptr<data::DataSource> build_source(const ExperimentConfig& cfg) {
  if (cfg.dataset.source == "shapes") {
    data::ShapesConfig sc;
    sc.height = cfg.dataset.canvas_h;
    sc.width = cfg.dataset.canvas_w;
    sc.num_classes = cfg.dataset.num_classes;
    sc.n_train = cfg.dataset.n_train;
    sc.n_val = cfg.dataset.n_val;
    sc.seed = cfg.dataset.dataset_seed;
    return std::make_unique<data::ShapesSource>(sc);
  }
  if (cfg.dataset.source == "voc_dir")
    return std::make_unique<data::VocSource>(cfg.dataset.root, cfg.dataset.num_classes);
  throw ConfigError("dataset.source: unknown source '" + cfg.dataset.source + "'");
}

data::DatasetSplit build_split(const ExperimentConfig& cfg, const data::DataSource& source) {
  const auto fraction = data::Fraction::parse(cfg.dataset.fraction);
  return data::sample_low_data_split(
      source.train_ids(),
      [&](const std::string& id) {
        const data::Sample s = source.get_labeled(id);
        return data::class_pixel_counts(*s.mask, source.num_classes());
      },
      source.num_classes(), fraction, cfg.dataset.split_seed, cfg.dataset.min_class_pixels,
      cfg.dataset.max_retries);
}

namespace {

ExperimentConfig resolved_with_env(ExperimentConfig cfg) {
  // PSEUDOSEG_DETERMINISTIC=1 pins execution to a single worker thread.
  if (const char* env = std::getenv("PSEUDOSEG_DETERMINISTIC");
      env && std::string(env) != "0")
    cfg.train.threads = 1;
  return cfg;
}

void resolve_mean_color(ExperimentConfig& cfg, const data::DataSource& source) {
  if (cfg.mean_color_auto) cfg.train.augment.mean_color = source.mean_color();
}

json metrics_line(std::int64_t iteration, const train::LossReport& losses,
                  const train::EvalResult& eval) {
  return json{{"iteration", iteration}, {"l_s", losses.l_s},   {"l_u", losses.l_u},
              {"l_x", losses.l_x},      {"l_sa", losses.l_sa}, {"miou", eval.miou},
              {"ece", eval.ece}};
}

}  // namespace

TrainOutcome run_train(const ExperimentConfig& cfg_in) {
  ExperimentConfig cfg = resolved_with_env(cfg_in);
  cfg.validate();
  const auto source = build_source(cfg);
  resolve_mean_color(cfg, *source);
  const auto split = build_split(cfg, *source);

  const bool persist = !cfg.output_dir.empty();
  const fs::path out_dir = cfg.output_dir;
  std::ofstream metrics;
  if (persist) {
    fs::create_directories(out_dir);
    write_json(out_dir / "config.json", cfg.to_json());
    metrics.open(out_dir / "metrics.jsonl", std::ios::trunc);
  }
  const std::string config_json = cfg.to_json().dump();

  train::Trainer trainer(*source, split, cfg.model_config(), cfg.train);

  TrainOutcome outcome;
  outcome.best_miou = -1.0;
  train::LossReport window;
  std::int64_t window_steps = 0;
  for (std::int64_t iter = 0; iter < cfg.train.iterations; ++iter) {
    const auto report = trainer.train_step(iter);
    window.l_s += report.l_s;
    window.l_u += report.l_u;
    window.l_x += report.l_x;
    window.l_sa += report.l_sa;
    ++window_steps;

    const bool last = iter + 1 == cfg.train.iterations;
    if ((iter + 1) % cfg.train.eval_interval == 0 || last) {
      train::LossReport mean;
      mean.l_s = window.l_s / static_cast<double>(window_steps);
      mean.l_u = window.l_u / static_cast<double>(window_steps);
      mean.l_x = window.l_x / static_cast<double>(window_steps);
      mean.l_sa = window.l_sa / static_cast<double>(window_steps);
      const auto eval = trainer.evaluate();
      if (persist) metrics << metrics_line(iter + 1, mean, eval).dump() << "\n";
      if (eval.miou > outcome.best_miou) {
        outcome.best_miou = eval.miou;
        if (persist) {
          outcome.best_checkpoint = out_dir / "best.ckpt";
          train::save_checkpoint(outcome.best_checkpoint, trainer.theta(),
                                 trainer.attention_store(), config_json, iter + 1);
        }
      }
      outcome.final_eval = eval;
      window = train::LossReport{};
      window_steps = 0;
    }
    if (persist && (iter + 1) % cfg.train.checkpoint_interval == 0 && !last) {
      train::save_checkpoint(out_dir / ("ckpt_" + std::to_string(iter + 1) + ".ckpt"),
                             trainer.theta(), trainer.attention_store(), config_json, iter + 1);
    }
  }

  outcome.variant_ece = trainer.pseudo_label_ece(
      {sgc::FusionVariant::decoder_only, sgc::FusionVariant::sgc_only,
       sgc::FusionVariant::full});
  if (persist) {
    outcome.final_checkpoint = out_dir / "final.ckpt";
    train::save_checkpoint(outcome.final_checkpoint, trainer.theta(), trainer.attention_store(),
                           config_json, cfg.train.iterations);
    outcome.metrics_file = out_dir / "metrics.jsonl";
  }
  return outcome;
}

std::vector<fs::path> cmd_make_splits(const ExperimentConfig& cfg_in,
                                      const std::vector<std::uint64_t>& seeds) {
  ExperimentConfig cfg = cfg_in;
  cfg.validate();
  check_config(!cfg.output_dir.empty(), "make-splits: output_dir is required");
  const auto source = build_source(cfg);
  fs::create_directories(fs::path(cfg.output_dir));

  std::vector<fs::path> written;
  const auto fraction = data::Fraction::parse(cfg.dataset.fraction);
  const std::string tag =
      std::to_string(fraction.num) + "-" + std::to_string(fraction.den);
  for (const auto seed : seeds) {
    ExperimentConfig arm = cfg;
    arm.dataset.split_seed = seed;
    const auto split = build_split(arm, *source);
    const fs::path labeled =
        fs::path(cfg.output_dir) / ("labeled_" + tag + "_seed" + std::to_string(seed) + ".txt");
    const fs::path unlabeled =
        fs::path(cfg.output_dir) /
        ("unlabeled_" + tag + "_seed" + std::to_string(seed) + ".txt");
    data::save_id_list(labeled, split.labeled_ids);
    data::save_id_list(unlabeled, split.unlabeled_ids);
    written.push_back(labeled);
    written.push_back(unlabeled);
  }
  return written;
}

json run_eval(const fs::path& checkpoint, const ExperimentConfig& cfg_in) {
  ExperimentConfig cfg = resolved_with_env(cfg_in);
  cfg.validate();
  const auto ckpt = train::load_checkpoint(checkpoint);

  // The checkpoint carries the config it was trained with; the model is
  // rebuilt from that, while the dataset comes from the current config.
  const ExperimentConfig trained = ExperimentConfig::from_json(json::parse(ckpt.config_json));
  ExperimentConfig eval_cfg = cfg;
  eval_cfg.backbone = trained.backbone;
  eval_cfg.hypercolumn = trained.hypercolumn;
  eval_cfg.train.attention_embed_dim = trained.train.attention_embed_dim;
  eval_cfg.train.mode = trained.train.mode;
  eval_cfg.train.fusion = trained.train.fusion;

  const auto source = build_source(eval_cfg);
  resolve_mean_color(eval_cfg, *source);
  const auto split = build_split(eval_cfg, *source);
  train::Trainer trainer(*source, split, eval_cfg.model_config(), eval_cfg.train);
  train::restore_params(trainer.theta(), ckpt.theta);
  train::restore_params(trainer.attention_store(), ckpt.attention);

  const auto eval = trainer.evaluate();
  const auto variant_ece = trainer.pseudo_label_ece(
      {sgc::FusionVariant::decoder_only, sgc::FusionVariant::sgc_only,
       sgc::FusionVariant::mix_no_norm, sgc::FusionVariant::mix_no_sharpen,
       sgc::FusionVariant::full_no_norm_no_sharpen, sgc::FusionVariant::hard_decoder,
       sgc::FusionVariant::full});

  json out;
  out["checkpoint"] = checkpoint.string();
  out["iteration"] = ckpt.iteration;
  out["miou"] = eval.miou;
  out["ece"] = eval.ece;
  out["per_class_iou"] = eval.per_class;
  out["variant_ece"] = variant_ece;
  if (!cfg.output_dir.empty()) {
    fs::create_directories(fs::path(cfg.output_dir));
    write_json(fs::path(cfg.output_dir) / "eval.json", out);
  }
  return out;
}

namespace {

struct Arm {
  std::string name;
  ExperimentConfig cfg;
  std::vector<std::string> expected_diff;  // swept fields, beyond seeds
};

// Every arm must differ from the base config in exactly the swept fields
// (seeds are paired, so they are reset before the comparison).
void assert_arm_diff(const ExperimentConfig& base, const Arm& arm) {
  ExperimentConfig probe = arm.cfg;
  probe.train.seed = base.train.seed;
  probe.dataset.split_seed = base.dataset.split_seed;
  probe.output_dir = base.output_dir;
  auto diffs = config_diff(base.to_json(), probe.to_json());
  for (const auto& d : diffs) {
    bool expected = false;
    for (const auto& e : arm.expected_diff) expected = expected || d == e;
    check_contract(expected, "ablate: arm '" + arm.name + "' changed unexpected field " + d);
  }
}

}  // namespace

json run_ablate(const ExperimentConfig& cfg_in, const std::string& study) {
  ExperimentConfig base = resolved_with_env(cfg_in);
  base.validate();

  std::vector<Arm> arms;
  auto make_arm = [&](const std::string& name, auto&& mutate,
                      std::vector<std::string> diff_fields) {
    Arm a;
    a.name = name;
    a.cfg = base;
    mutate(a.cfg);
    a.expected_diff = std::move(diff_fields);
    assert_arm_diff(base, a);
    arms.push_back(std::move(a));
  };

  if (study == "sources") {
    for (const bool image_level : {false, true}) {
      for (const std::string variant : {"decoder_only", "sgc_only", "full"}) {
        make_arm((image_level ? std::string("image_level_") : std::string("unlabeled_")) +
                     variant,
                 [&](ExperimentConfig& c) {
                   c.train.mode = image_level ? train::TrainMode::image_level
                                              : train::TrainMode::unlabeled;
                   c.train.pseudo_label_source = variant;
                 },
                 {"train.mode", "train.pseudo_label_source"});
      }
    }
  } else if (study == "hypercolumn") {
    for (const bool hyper : {true, false})
      make_arm(hyper ? "hypercolumn" : "last_stage_only",
               [&](ExperimentConfig& c) { c.hypercolumn = hyper; }, {"model.hypercolumn"});
  } else if (study == "soft_hard") {
    for (const bool hard : {false, true})
      make_arm(hard ? "hard" : "soft",
               [&](ExperimentConfig& c) {
                 c.train.fusion.mode = hard ? sgc::FusionConfig::Mode::hard
                                            : sgc::FusionConfig::Mode::soft;
               },
               {"fusion.mode"});
  } else if (study == "sharpening") {
    for (const double t : {0.5, 1.0})
      make_arm("T=" + std::to_string(t).substr(0, 3),
               [&](ExperimentConfig& c) { c.train.fusion.temperature = t; },
               {"fusion.temperature"});
  } else if (study == "jitter_strength") {
    for (const double s : {0.05, 0.25, 0.5, 1.0})
      make_arm("s=" + std::to_string(s).substr(0, 4),
               [&](ExperimentConfig& c) { c.train.augment.jitter_strength = s; },
               {"augment.jitter_strength"});
  } else if (study == "backbone") {
    for (const std::string bb : {"desk4", "desk4_wide"}) {
      for (const bool supervised : {true, false}) {
        make_arm(bb + (supervised ? "_supervised" : "_pseudoseg"),
                 [&](ExperimentConfig& c) {
                   c.backbone = bb;
                   c.train.mode = supervised ? train::TrainMode::supervised_only
                                             : train::TrainMode::unlabeled;
                 },
                 {"model.backbone", "train.mode"});
      }
    }
  } else {
    throw ConfigError("unknown ablation study '" + study +
                      "' (expected sources|hypercolumn|soft_hard|sharpening|jitter_strength|"
                      "backbone)");
  }

  json rows = json::array();
  for (const auto& arm : arms) {
    for (std::uint64_t s = 0; s < 3; ++s) {
      ExperimentConfig run_cfg = arm.cfg;
      run_cfg.train.seed = base.train.seed + s;
      run_cfg.dataset.split_seed = base.dataset.split_seed + s;
      if (!base.output_dir.empty())
        run_cfg.output_dir = (fs::path(base.output_dir) / study / arm.name /
                              ("seed" + std::to_string(run_cfg.train.seed)))
                                 .string();
      const auto outcome = run_train(run_cfg);
      json row = {{"study", study},
                  {"arm", arm.name},
                  {"seed", run_cfg.train.seed},
                  {"miou", outcome.final_eval.miou},
                  {"ece", outcome.final_eval.ece}};
      if (study == "sources")
        row["pseudo_label_ece"] =
            outcome.variant_ece.at(run_cfg.train.pseudo_label_source == "full"
                                       ? "full"
                                       : run_cfg.train.pseudo_label_source);
      rows.push_back(std::move(row));
      std::cout << "[ablate] " << study << " arm=" << arm.name << " seed="
                << run_cfg.train.seed << " miou=" << outcome.final_eval.miou << "\n";
    }
  }

  if (!base.output_dir.empty()) {
    fs::create_directories(fs::path(base.output_dir));
    write_json(fs::path(base.output_dir) / ("ablate_" + study + ".json"), rows);
    write_csv(fs::path(base.output_dir) / ("ablate_" + study + ".csv"), rows);
  }
  return rows;
}

json run_selftrain(const ExperimentConfig& cfg_in) {
  ExperimentConfig base = resolved_with_env(cfg_in);
  base.validate();
  const fs::path out_dir = base.output_dir.empty() ? fs::path() : fs::path(base.output_dir);

  // Teacher: plain supervised training on the labeled split.
  ExperimentConfig teacher_cfg = base;
  teacher_cfg.train.mode = train::TrainMode::supervised_only;
  if (!out_dir.empty()) teacher_cfg.output_dir = (out_dir / "teacher").string();
  const auto teacher_outcome = run_train(teacher_cfg);

  // Rebuild the teacher to generate offline labels.
  const auto source = build_source(teacher_cfg);
  ExperimentConfig resolved_teacher = teacher_cfg;
  resolve_mean_color(resolved_teacher, *source);
  const auto split = build_split(resolved_teacher, *source);
  train::Trainer teacher(*source, split, resolved_teacher.model_config(),
                         resolved_teacher.train);
  if (!teacher_outcome.final_checkpoint.empty()) {
    const auto ckpt = train::load_checkpoint(teacher_outcome.final_checkpoint);
    train::restore_params(teacher.theta(), ckpt.theta);
    train::restore_params(teacher.attention_store(), ckpt.attention);
  } else {
    // No output dir: retrain deterministically in place.
    for (std::int64_t i = 0; i < resolved_teacher.train.iterations; ++i) teacher.train_step(i);
  }

  const fs::path label_dir = out_dir.empty()
                                 ? fs::temp_directory_path() / "pseudoseg_offline_labels"
                                 : out_dir / "offline_labels";
  const auto entries = train::generate_offline_pseudo_labels(teacher, split.unlabeled_ids,
                                                             /*threshold=*/0.5, label_dir);

  // Student: supervised training over ground-truth plus offline-labeled data.
  const auto overrides = train::load_offline_pseudo_labels(label_dir, split.unlabeled_ids);
  data::OverlaySource student_source(*source, overrides);
  data::DatasetSplit student_split = split;
  student_split.labeled_ids.insert(student_split.labeled_ids.end(),
                                   split.unlabeled_ids.begin(), split.unlabeled_ids.end());
  std::sort(student_split.labeled_ids.begin(), student_split.labeled_ids.end());
  student_split.unlabeled_ids.clear();

  ExperimentConfig student_cfg = resolved_teacher;
  if (!out_dir.empty()) student_cfg.output_dir = (out_dir / "student").string();
  train::Trainer student(student_source, student_split, student_cfg.model_config(),
                         student_cfg.train);
  std::ofstream student_metrics;
  if (!out_dir.empty()) {
    fs::create_directories(student_cfg.output_dir);
    write_json(fs::path(student_cfg.output_dir) / "config.json", student_cfg.to_json());
    student_metrics.open(fs::path(student_cfg.output_dir) / "metrics.jsonl", std::ios::trunc);
  }
  train::EvalResult student_eval;
  for (std::int64_t i = 0; i < student_cfg.train.iterations; ++i) {
    const auto report = student.train_step(i);
    const bool last = i + 1 == student_cfg.train.iterations;
    if ((i + 1) % student_cfg.train.eval_interval == 0 || last) {
      student_eval = student.evaluate();
      if (student_metrics.is_open())
        student_metrics << metrics_line(i + 1, report, student_eval).dump() << "\n";
    }
  }
  if (!out_dir.empty())
    train::save_checkpoint(fs::path(student_cfg.output_dir) / "final.ckpt", student.theta(),
                           student.attention_store(), student_cfg.to_json().dump(),
                           student_cfg.train.iterations);

  // One-stage training on the same split for comparison.
  ExperimentConfig ps_cfg = base;
  ps_cfg.train.mode = train::TrainMode::unlabeled;
  if (!out_dir.empty()) ps_cfg.output_dir = (out_dir / "pseudoseg").string();
  const auto ps_outcome = run_train(ps_cfg);

  double mean_ignore = 0.0;
  for (const auto& e : entries) mean_ignore += e.ignore_fraction;
  if (!entries.empty()) mean_ignore /= static_cast<double>(entries.size());

  json table = json::array();
  table.push_back({{"method", "supervised_teacher"}, {"miou", teacher_outcome.final_eval.miou}});
  table.push_back({{"method", "selftrain_student"}, {"miou", student_eval.miou}});
  table.push_back({{"method", "pseudoseg"}, {"miou", ps_outcome.final_eval.miou}});
  json out;
  out["table"] = table;
  out["offline_label_ignore_fraction"] = mean_ignore;
  if (!out_dir.empty()) {
    write_json(out_dir / "selftrain.json", out);
    write_csv(out_dir / "selftrain.csv", table);
  }
  return out;
}

void write_json(const fs::path& file, const json& j) {
  std::ofstream out(file);
  if (!out) throw DataError("cannot write " + file.string());
  out << j.dump(2) << "\n";
}

void write_csv(const fs::path& file, const json& rows) {
  check_contract(rows.is_array(), "write_csv: expected an array of objects");
  std::ofstream out(file);
  if (!out) throw DataError("cannot write " + file.string());
  if (rows.empty()) return;
  std::vector<std::string> cols;
  for (auto it = rows.front().begin(); it != rows.front().end(); ++it) cols.push_back(it.key());
  for (std::size_t i = 0; i < cols.size(); ++i) out << (i ? "," : "") << cols[i];
  out << "\n";
  for (const auto& row : rows) {
    for (std::size_t i = 0; i < cols.size(); ++i) {
      if (i) out << ",";
      const auto& v = row.at(cols[i]);
      if (v.is_string())
        out << v.get<std::string>();
      else
        out << v.dump();
    }
    out << "\n";
  }
}

}  // namespace pseudoseg::run
