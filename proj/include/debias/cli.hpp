#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <stdexcept>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "debias/data.hpp"
#include "debias/io.hpp"
#include "debias/metrics.hpp"
#include "debias/networks.hpp"
#include "debias/svg.hpp"
#include "debias/training.hpp"

namespace debias::cli {

/// Usage or configuration problem; maps to exit code 2.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Full run description: generator settings, training hyperparameters, output
/// paths, and the lambda sweep grid. Serializable so a run is reproducible
/// from the config alone.
struct RunConfig {
  GenConfig gen;
  Hyperparams hyper;
  std::string data_dir = "data";
  std::string checkpoint_dir = "checkpoints";
  std::string report_dir = "reports";
  double lambda_min = 0.01;
  double lambda_max = 0.15;
  double lambda_step = 0.01;
  int repeats = 3;
  std::uint64_t seed = 0;

  void apply_seed() {
    gen.seed = seed;
    hyper.seed = seed;
  }

  std::vector<double> lambda_grid() const {
    if (lambda_step <= 0.0 || lambda_max < lambda_min) {
      throw ConfigError("config: lambda grid is empty or ill-formed");
    }
    const int count =
        static_cast<int>(std::floor((lambda_max - lambda_min) / lambda_step + 0.5)) + 1;
    std::vector<double> grid(static_cast<std::size_t>(count));
    for (int i = 0; i < count; ++i) {
      grid[static_cast<std::size_t>(i)] = lambda_min + lambda_step * i;
    }
    return grid;
  }
};

namespace detail {

inline double as_number(const nlohmann::json& v, const std::string& key) {
  if (!v.is_number()) throw ConfigError("config: key '" + key + "' must be a number");
  return v.get<double>();
}

inline std::int64_t as_integer(const nlohmann::json& v, const std::string& key) {
  if (!v.is_number_integer() && !v.is_number_unsigned()) {
    throw ConfigError("config: key '" + key + "' must be an integer");
  }
  return v.get<std::int64_t>();
}

inline std::string as_string(const nlohmann::json& v, const std::string& key) {
  if (!v.is_string()) throw ConfigError("config: key '" + key + "' must be a string");
  return v.get<std::string>();
}

}  // namespace detail

inline RunConfig parse_config_json(const nlohmann::json& j) {
  RunConfig cfg;
  for (const auto& [key, value] : j.items()) {
    if (key == "n_train") {
      cfg.gen.n_train = static_cast<std::size_t>(detail::as_integer(value, key));
    } else if (key == "n_test") {
      cfg.gen.n_test = static_cast<std::size_t>(detail::as_integer(value, key));
    } else if (key == "p_y_given_s0") {
      cfg.gen.p_y_given_s0 = detail::as_number(value, key);
    } else if (key == "p_y_given_s1") {
      cfg.gen.p_y_given_s1 = detail::as_number(value, key);
    } else if (key == "aux_strengths") {
      if (!value.is_array()) throw ConfigError("config: key 'aux_strengths' must be an array");
      cfg.gen.aux_strengths.clear();
      for (const auto& d : value) {
        cfg.gen.aux_strengths.push_back(detail::as_number(d, key));
      }
    } else if (key == "noise_sigma") {
      cfg.gen.noise_sigma = detail::as_number(value, key);
    } else if (key == "learning_rate") {
      cfg.hyper.learning_rate = detail::as_number(value, key);
    } else if (key == "momentum") {
      cfg.hyper.momentum = detail::as_number(value, key);
    } else if (key == "lr_step") {
      cfg.hyper.lr_step = static_cast<int>(detail::as_integer(value, key));
    } else if (key == "lr_gamma") {
      cfg.hyper.lr_gamma = detail::as_number(value, key);
    } else if (key == "epochs") {
      cfg.hyper.epochs = static_cast<int>(detail::as_integer(value, key));
    } else if (key == "batch_size") {
      cfg.hyper.batch_size = static_cast<std::size_t>(detail::as_integer(value, key));
    } else if (key == "lambda") {
      cfg.hyper.lambda = detail::as_number(value, key);
    } else if (key == "seed") {
      cfg.seed = static_cast<std::uint64_t>(detail::as_integer(value, key));
    } else if (key == "data_dir") {
      cfg.data_dir = detail::as_string(value, key);
    } else if (key == "checkpoint_dir") {
      cfg.checkpoint_dir = detail::as_string(value, key);
    } else if (key == "report_dir") {
      cfg.report_dir = detail::as_string(value, key);
    } else if (key == "lambda_min") {
      cfg.lambda_min = detail::as_number(value, key);
    } else if (key == "lambda_max") {
      cfg.lambda_max = detail::as_number(value, key);
    } else if (key == "lambda_step") {
      cfg.lambda_step = detail::as_number(value, key);
    } else if (key == "repeats") {
      cfg.repeats = static_cast<int>(detail::as_integer(value, key));
    } else {
      throw ConfigError("config: unknown key '" + key + "'");
    }
  }
  cfg.apply_seed();
  try {
    cfg.gen.validate();
    cfg.hyper.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  if (cfg.repeats < 1) throw ConfigError("config: key 'repeats' must be >= 1");
  return cfg;
}

inline RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("config: cannot read " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(is);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config: " + path.string() + " is not valid JSON: " + e.what());
  }
  if (!j.is_object()) throw ConfigError("config: top level must be a JSON object");
  return parse_config_json(j);
}

/// Every field written out, so a generated dataset is self-describing.
inline nlohmann::ordered_json effective_config_json(const RunConfig& cfg) {
  nlohmann::ordered_json j;
  j["n_train"] = cfg.gen.n_train;
  j["n_test"] = cfg.gen.n_test;
  j["p_y_given_s0"] = cfg.gen.p_y_given_s0;
  j["p_y_given_s1"] = cfg.gen.p_y_given_s1;
  j["aux_strengths"] = cfg.gen.aux_strengths;
  j["noise_sigma"] = cfg.gen.noise_sigma;
  j["learning_rate"] = cfg.hyper.learning_rate;
  j["momentum"] = cfg.hyper.momentum;
  j["lr_step"] = cfg.hyper.lr_step;
  j["lr_gamma"] = cfg.hyper.lr_gamma;
  j["epochs"] = cfg.hyper.epochs;
  j["batch_size"] = cfg.hyper.batch_size;
  j["lambda"] = cfg.hyper.lambda;
  j["seed"] = cfg.seed;
  j["data_dir"] = cfg.data_dir;
  j["checkpoint_dir"] = cfg.checkpoint_dir;
  j["report_dir"] = cfg.report_dir;
  j["lambda_min"] = cfg.lambda_min;
  j["lambda_max"] = cfg.lambda_max;
  j["lambda_step"] = cfg.lambda_step;
  j["repeats"] = cfg.repeats;
  return j;
}

// ---------------------------------------------------------------------------
// Pipeline paths and dataset IO
// ---------------------------------------------------------------------------

inline std::filesystem::path train_image_dir(const RunConfig& c) {
  return std::filesystem::path(c.data_dir) / "train";
}
inline std::filesystem::path test_image_dir(const RunConfig& c) {
  return std::filesystem::path(c.data_dir) / "test";
}
inline std::filesystem::path train_attr_path(const RunConfig& c) {
  return std::filesystem::path(c.data_dir) / "train_attrs.txt";
}
inline std::filesystem::path test_attr_path(const RunConfig& c) {
  return std::filesystem::path(c.data_dir) / "test_attrs.txt";
}
inline std::filesystem::path classifier_ckpt_path(const RunConfig& c) {
  return std::filesystem::path(c.checkpoint_dir) / "classifier.ckpt";
}
inline std::filesystem::path unet_ckpt_path(const RunConfig& c) {
  return std::filesystem::path(c.checkpoint_dir) / "unet.ckpt";
}

inline void require_file(const std::filesystem::path& p, const std::string& hint) {
  if (!std::filesystem::exists(p)) {
    throw std::runtime_error("missing file " + p.string() + " (" + hint + ")");
  }
}

inline Dataset load_split(const std::filesystem::path& image_dir,
                          const std::filesystem::path& attr_path) {
  require_file(attr_path, "run `gen` first");
  return load_pgm_dataset(image_dir, load_attr_file(attr_path), "Y", "S");
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

inline void run_gen(const RunConfig& cfg) {
  auto [train, test] = synth_generate(cfg.gen);
  save_pgm_dataset(train, train_image_dir(cfg), train_attr_path(cfg));
  save_pgm_dataset(test, test_image_dir(cfg), test_attr_path(cfg));
  atomic_write_text(std::filesystem::path(cfg.data_dir) / "config_resolved.json",
                    effective_config_json(cfg).dump(2) + "\n");
  std::cout << "gen: wrote " << train.size() << " train and " << test.size()
            << " test examples under " << cfg.data_dir << "\n";
}

inline void run_pretrain(const RunConfig& cfg) {
  const Dataset train = load_split(train_image_dir(cfg), train_attr_path(cfg));
  const ClassifierParams<float> cls = pretrain_classifier(train, cfg.hyper);
  std::filesystem::create_directories(cfg.checkpoint_dir);
  save_checkpoint(cls, classifier_ckpt_path(cfg));
  std::cout << "pretrain: wrote " << classifier_ckpt_path(cfg).string() << "\n";
}

inline void run_train(const RunConfig& cfg) {
  const Dataset train = load_split(train_image_dir(cfg), train_attr_path(cfg));
  require_file(classifier_ckpt_path(cfg), "run `pretrain` first");
  const auto cls = load_classifier_checkpoint<float>(classifier_ckpt_path(cfg));
  auto [unet, log] = train_debiaser(train, cls, cfg.hyper);
  std::filesystem::create_directories(cfg.checkpoint_dir);
  save_checkpoint(unet, unet_ckpt_path(cfg));
  write_train_log(log, std::filesystem::path(cfg.report_dir) / "trainlog.csv");
  std::cout << "train: final-epoch mean mse " << format_sig9(log.final_mse)
            << ", hsic " << format_sig9(log.final_hsic) << "\n";
}

inline void run_eval(const RunConfig& cfg) {
  const Dataset test = load_split(test_image_dir(cfg), test_attr_path(cfg));
  require_file(classifier_ckpt_path(cfg), "run `pretrain` first");
  require_file(unet_ckpt_path(cfg), "run `train` first");
  const auto cls = load_classifier_checkpoint<float>(classifier_ckpt_path(cfg));
  const auto unet = load_unet_checkpoint<float>(unet_ckpt_path(cfg));
  const MetricsReport original = evaluate(cls, test);
  const MetricsReport reconstructed = evaluate(cls, &unet, test);
  write_metrics_csv({{"identity", original}, {"unet", reconstructed}},
                    std::filesystem::path(cfg.report_dir) / "metrics.csv");
  std::cout << "eval: identity ap=" << format_sig9(original.ap)
            << " dp=" << format_sig9(original.dp) << " deo=" << format_sig9(original.deo)
            << "\n";
  std::cout << "eval: unet     ap=" << format_sig9(reconstructed.ap)
            << " dp=" << format_sig9(reconstructed.dp)
            << " deo=" << format_sig9(reconstructed.deo) << "\n";
}

/// Per-lambda mean and sample standard deviation of each metric.
struct SweepRow {
  double lambda = 0.0;
  double ap_mean = 0.0, ap_sd = 0.0;
  double dp_mean = 0.0, dp_sd = 0.0;
  double deo_mean = 0.0, deo_sd = 0.0;
};

namespace detail {

inline std::pair<double, double> mean_sd(const std::vector<double>& v) {
  const double n = static_cast<double>(v.size());
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= n;
  if (v.size() < 2) return {mean, 0.0};
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  return {mean, std::sqrt(ss / (n - 1.0))};
}

inline int env_thread_cap() {
  const char* raw = std::getenv("DEBIAS_THREADS");
  if (raw == nullptr || *raw == '\0') return 1;
  char* end = nullptr;
  const long v = std::strtol(raw, &end, 10);
  if (end == nullptr || *end != '\0' || v < 1) {
    throw ConfigError("DEBIAS_THREADS must be a positive integer");
  }
  return static_cast<int>(v);
}

}  // namespace detail

/// One-epoch trainings over the lambda grid, `repeats` seeds per point.
/// Grid points are independent and may run on up to DEBIAS_THREADS threads;
/// the default of 1 keeps the whole sweep bitwise reproducible.
inline std::vector<SweepRow> sweep_lambda(const RunConfig& cfg, const Dataset& train,
                                          const Dataset& test,
                                          const ClassifierParams<float>& cls) {
  const std::vector<double> grid = cfg.lambda_grid();
  std::vector<SweepRow> rows(grid.size());
  const int threads = std::min<int>(detail::env_thread_cap(),
                                    static_cast<int>(grid.size()));
  std::atomic<std::size_t> next{0};
  auto worker = [&]() {
    for (std::size_t g = next.fetch_add(1); g < grid.size(); g = next.fetch_add(1)) {
      std::vector<double> aps, dps, deos;
      for (int r = 0; r < cfg.repeats; ++r) {
        Hyperparams hyper = cfg.hyper;
        hyper.lambda = grid[g];
        hyper.epochs = 1;  // the ablation protocol trains 1 epoch per point
        hyper.seed = cfg.seed + static_cast<std::uint64_t>(r);
        auto [unet, log] = train_debiaser(train, cls, hyper);
        const MetricsReport rep = evaluate(cls, &unet, test);
        aps.push_back(rep.ap);
        dps.push_back(rep.dp);
        deos.push_back(rep.deo);
      }
      SweepRow row;
      row.lambda = grid[g];
      std::tie(row.ap_mean, row.ap_sd) = detail::mean_sd(aps);
      std::tie(row.dp_mean, row.dp_sd) = detail::mean_sd(dps);
      std::tie(row.deo_mean, row.deo_sd) = detail::mean_sd(deos);
      rows[g] = row;
    }
  };
  if (threads <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }
  return rows;
}

inline std::string sweep_csv(const std::vector<SweepRow>& rows) {
  std::string out = "lambda,ap_mean,ap_sd,dp_mean,dp_sd,deo_mean,deo_sd\n";
  for (const auto& r : rows) {
    out += format_sig9(r.lambda) + "," + format_sig9(r.ap_mean) + "," +
           format_sig9(r.ap_sd) + "," + format_sig9(r.dp_mean) + "," +
           format_sig9(r.dp_sd) + "," + format_sig9(r.deo_mean) + "," +
           format_sig9(r.deo_sd) + "\n";
  }
  return out;
}

inline void run_sweep(const RunConfig& cfg) {
  const Dataset train = load_split(train_image_dir(cfg), train_attr_path(cfg));
  const Dataset test = load_split(test_image_dir(cfg), test_attr_path(cfg));
  require_file(classifier_ckpt_path(cfg), "run `pretrain` first");
  const auto cls = load_classifier_checkpoint<float>(classifier_ckpt_path(cfg));
  const std::vector<SweepRow> rows = sweep_lambda(cfg, train, test, cls);
  const std::filesystem::path dir(cfg.report_dir);
  atomic_write_text(dir / "sweep.csv", sweep_csv(rows));
  ChartSeries ap, dp, deo_series;
  for (const auto& r : rows) {
    ap.x.push_back(r.lambda);
    ap.y.push_back(r.ap_mean);
    ap.sd.push_back(r.ap_sd);
    dp.x.push_back(r.lambda);
    dp.y.push_back(r.dp_mean);
    dp.sd.push_back(r.dp_sd);
    deo_series.x.push_back(r.lambda);
    deo_series.y.push_back(r.deo_mean);
    deo_series.sd.push_back(r.deo_sd);
  }
  emit_svg_line_chart(ap, "Average precision vs lambda", "lambda", "AP",
                      dir / "sweep_ap.svg");
  emit_svg_line_chart(dp, "Demographic parity vs lambda", "lambda", "DP",
                      dir / "sweep_dp.svg");
  emit_svg_line_chart(deo_series, "Equal-opportunity difference vs lambda", "lambda",
                      "DEO", dir / "sweep_deo.svg");
  std::cout << "sweep: wrote " << rows.size() << " grid rows to "
            << (dir / "sweep.csv").string() << "\n";
}

inline void run_spillover(const RunConfig& cfg) {
  const Dataset train = load_split(train_image_dir(cfg), train_attr_path(cfg));
  const Dataset test = load_split(test_image_dir(cfg), test_attr_path(cfg));
  require_file(unet_ckpt_path(cfg), "run `train` first");
  const auto unet = load_unet_checkpoint<float>(unet_ckpt_path(cfg));
  std::vector<ClassifierParams<float>> attr_cls;
  std::filesystem::create_directories(cfg.checkpoint_dir);
  for (std::size_t j = 0; j < train.aux_names.size(); ++j) {
    Hyperparams hyper = cfg.hyper;
    hyper.seed = cfg.seed + static_cast<std::uint64_t>(j);
    attr_cls.push_back(pretrain_attribute_classifier(train, j, hyper));
    save_checkpoint(attr_cls.back(), std::filesystem::path(cfg.checkpoint_dir) /
                                         ("attr_" + train.aux_names[j] + ".ckpt"));
  }
  const SpilloverReport rep = spillover_report(train, attr_cls, unet, test);
  write_spillover_csv(rep, std::filesystem::path(cfg.report_dir) / "spillover.csv");
  std::cout << "spillover: pearson(hsic, |dDP|) = " << format_sig9(rep.pearson_r)
            << " over " << rep.rows.size() << " attributes\n";
}

// ---------------------------------------------------------------------------
// Dispatch
// ---------------------------------------------------------------------------

/// Runs one subcommand. Exit codes: 0 success, 1 runtime failure, 2 usage or
/// configuration error.
inline int dispatch(const std::vector<std::string>& args) {
  CLI::App app{"HSIC-regularized image de-biasing pipeline"};
  app.require_subcommand(1);

  struct SubSpec {
    std::string name;
    std::string help;
    std::string out_field;  // which path --out overrides
    void (*runner)(const RunConfig&);
  };
  const std::vector<SubSpec> specs = {
      {"gen", "generate the synthetic biased dataset", "data_dir", run_gen},
      {"pretrain", "pre-train the frozen two-headed classifier", "checkpoint_dir",
       run_pretrain},
      {"train", "train the de-biasing U-net", "checkpoint_dir", run_train},
      {"eval", "evaluate metrics on original and reconstructed test images",
       "report_dir", run_eval},
      {"sweep", "run the lambda trade-off sweep and emit CSV + SVG charts",
       "report_dir", run_sweep},
      {"spillover", "per-attribute HSIC vs demographic-parity-change report",
       "report_dir", run_spillover},
  };

  struct SubState {
    CLI::App* cmd = nullptr;
    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> out;
  };
  std::vector<SubState> states(specs.size());
  for (std::size_t i = 0; i < specs.size(); ++i) {
    states[i].cmd = app.add_subcommand(specs[i].name, specs[i].help);
    states[i].cmd->add_option("--config", states[i].config_path, "path to the JSON run config")
        ->required();
    states[i].cmd->add_option("--seed", states[i].seed, "override the configured seed");
    states[i].cmd->add_option("--out", states[i].out,
                              "override the subcommand's output directory (" +
                                  specs[i].out_field + ")");
  }

  std::vector<const char*> argv;
  argv.push_back("debias");
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);  // prints the error and usage
    return 2;
  }

  for (std::size_t i = 0; i < specs.size(); ++i) {
    if (!states[i].cmd->parsed()) continue;
    try {
      RunConfig cfg = load_config(states[i].config_path);
      if (states[i].seed) {
        cfg.seed = *states[i].seed;
        cfg.apply_seed();
      }
      if (states[i].out) {
        if (specs[i].out_field == "data_dir") {
          cfg.data_dir = *states[i].out;
        } else if (specs[i].out_field == "checkpoint_dir") {
          cfg.checkpoint_dir = *states[i].out;
        } else {
          cfg.report_dir = *states[i].out;
        }
      }
      specs[i].runner(cfg);
      return 0;
    } catch (const ConfigError& e) {
      std::cerr << "error: " << e.what() << "\n";
      return 2;
    } catch (const std::exception& e) {
      std::cerr << "error: " << e.what() << "\n";
      return 1;
    }
  }
  return 2;
}

}  // namespace debias::cli
