#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <stdexcept>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "evalign/bounds.hpp"
#include "evalign/config.hpp"
#include "evalign/data.hpp"
#include "evalign/eval.hpp"
#include "evalign/model.hpp"
#include "evalign/training.hpp"

namespace {

using nlohmann::json;

struct CommonArgs {
  std::string config_path;
  std::string preset;
  json overrides = json::object();
};

// Hyperparameter flags shared by generate and train. Each flag, when given,
// lands in the override layer on top of preset and config file.
void add_train_flags(CLI::App* cmd, CommonArgs& args) {
  cmd->add_option("--config", args.config_path, "JSON config file");
  cmd->add_option("--preset", args.preset, "named preset: synthetic, balanced, table2");
  auto opt = [cmd, &args](const std::string& flag, const std::string& key,
                          const std::string& help) {
    cmd->add_option_function<double>(
           flag, [&args, key](double v) { args.overrides["train"][key] = v; }, help)
        ->group("Hyperparameters");
  };
  auto opt_int = [cmd, &args](const std::string& flag, const std::string& key,
                              const std::string& help) {
    cmd->add_option_function<int>(
           flag, [&args, key](int v) { args.overrides["train"][key] = v; }, help)
        ->group("Hyperparameters");
  };
  auto opt_str = [cmd, &args](const std::string& flag, const std::string& key,
                              const std::string& help) {
    cmd->add_option_function<std::string>(
           flag, [&args, key](const std::string& v) { args.overrides["train"][key] = v; }, help)
        ->group("Hyperparameters");
  };
  auto opt_bool = [cmd, &args](const std::string& flag, const std::string& key,
                               const std::string& help) {
    cmd->add_option_function<bool>(
           flag, [&args, key](bool v) { args.overrides["train"][key] = v; }, help)
        ->group("Hyperparameters");
  };
  opt_int("--t1", "t1_epochs", "stage-1 epochs");
  opt_int("--t2", "t2_epochs", "stage-2 epochs");
  opt("--lr1", "lr1", "stage-1 learning rate");
  opt("--lr2", "lr2", "stage-2 learning rate");
  opt_int("--eta", "eta", "KL annealing horizon, 0 disables the regularizer");
  opt("--beta", "beta", "stage-2 proximal strength");
  opt_int("--batch-size", "batch_size", "minibatch size");
  opt_str("--selection", "selection", "average_acc, worst_class_acc or worst_group_acc");
  opt_str("--loss-variant", "loss_variant", "log_expected or expected_nll");
  opt("--calib-fraction", "calib_fraction", "held-out share used for stage 2");
  opt_int("--hidden-width", "hidden_width", "frozen random-feature width, 0 = linear");
  opt_str("--activation", "activation", "softplus or exp_clamped");
  opt("--momentum", "momentum", "SGD momentum");
  opt_bool("--class-balance", "class_balance", "stage-2 class-balanced sampling");
  opt_bool("--include-calib-in-stage1", "include_calib_in_stage1",
           "also fit stage 1 on the calibration rows");
  cmd->add_option_function<std::uint64_t>(
      "--seed", [&args](std::uint64_t v) { args.overrides["train"]["seed"] = v; },
      "run seed (beats the EA_SEED environment variable)");
  cmd->add_option_function<std::string>(
      "--out", [&args](const std::string& v) { args.overrides["output_dir"] = v; },
      "output directory");
  cmd->add_option_function<std::string>(
      "--format", [&args](const std::string& v) { args.overrides["report_format"] = v; },
      "report format: json or table");
}

// EA_SEED sits between the config file and explicit --seed.
void apply_env_seed(json& merged, const json& flag_overrides) {
  if (flag_overrides.contains("train") && flag_overrides["train"].contains("seed")) return;
  const char* env = std::getenv("EA_SEED");
  if (!env) return;
  try {
    std::size_t pos = 0;
    const unsigned long long v = std::stoull(env, &pos);
    if (pos != std::string(env).size()) throw std::invalid_argument("trailing characters");
    merged["train"]["seed"] = static_cast<std::uint64_t>(v);
  } catch (const std::exception&) {
    throw std::invalid_argument(std::string("EA_SEED is not a valid seed: '") + env + "'");
  }
}

evalign::ExperimentConfig resolve_config(const CommonArgs& args) {
  json merged = evalign::merge_config_layers(args.preset, args.config_path, args.overrides);
  apply_env_seed(merged, args.overrides);
  return evalign::config_from_json(merged);
}

void write_text(const std::filesystem::path& path, const std::string& content) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot open for writing: " + path.string());
  os << content;
  if (!os) throw std::runtime_error("write failed: " + path.string());
}

std::string counts_summary(const evalign::Dataset& d) {
  std::string s = "N=" + std::to_string(d.size());
  if (d.has_attributes()) {
    s += ", groups";
    const evalign::GroupCounts c = evalign::group_counts(d);
    for (int y = 0; y < d.num_classes; ++y) {
      for (int a = 0; a < d.num_attributes; ++a) {
        s += " (" + std::to_string(y) + "," + std::to_string(a) +
             ")=" + std::to_string(c[y][a]);
      }
    }
  }
  return s;
}

int cmd_generate(const CommonArgs& args) {
  const evalign::ExperimentConfig cfg = resolve_config(args);
  const evalign::PipelineData data = evalign::load_pipeline_data(cfg);
  std::filesystem::create_directories(cfg.output_dir);
  const std::filesystem::path dir(cfg.output_dir);
  evalign::save_csv(data.train, (dir / "train.csv").string());
  evalign::save_csv(data.heldout, (dir / "calib.csv").string());
  evalign::save_csv(data.test, (dir / "test.csv").string());
  std::cout << "train:   " << counts_summary(data.train) << "\n"
            << "calib:   " << counts_summary(data.heldout) << "\n"
            << "test:    " << counts_summary(data.test) << "\n"
            << "written to " << cfg.output_dir << "\n";
  return 0;
}

int cmd_train(const CommonArgs& args, const std::string& stage) {
  if (stage != "full" && stage != "erm-only") {
    throw std::invalid_argument("--stage must be 'full' or 'erm-only'");
  }
  const evalign::ExperimentConfig cfg = resolve_config(args);
  const evalign::PipelineData data = evalign::load_pipeline_data(cfg);
  const bool erm_only = stage == "erm-only";
  const evalign::PipelineResult res = evalign::run_pipeline(data, cfg.train, erm_only);

  std::filesystem::create_directories(cfg.output_dir);
  const std::filesystem::path dir(cfg.output_dir);
  evalign::save_checkpoint(res.stage1.head, (dir / "theta1.ckpt").string());
  json traces;
  traces["stage1_loss"] = res.stage1.loss_trace;
  if (res.ran_stage2) {
    evalign::save_checkpoint(res.selected, (dir / "theta2.ckpt").string());
    traces["stage2_loss"] = res.stage2.loss_trace;
    traces["selected_epoch"] = res.selected_epoch + 1;  // 1-based, matching epoch counting
  } else {
    traces["stage2_loss"] = json::array();
    traces["selected_epoch"] = nullptr;
  }
  write_text(dir / "traces.json", traces.dump(2) + "\n");
  write_text(dir / "metrics.json", evalign::metrics_to_json(res.final_metrics).dump(2) + "\n");
  write_text(dir / "erm_metrics.json", evalign::metrics_to_json(res.erm_metrics).dump(2) + "\n");

  json snapshot;
  snapshot["train"] = evalign::train_config_to_json(cfg.train);
  write_text(dir / "resolved_train_config.json", snapshot.dump(2) + "\n");

  if (res.ran_stage2) {
    std::cout << "selected stage-2 epoch " << res.selected_epoch + 1 << " of "
              << cfg.train.t2_epochs << "\n";
  }
  std::cout << evalign::report(res.final_metrics, cfg.format);
  return 0;
}

int cmd_eval(const std::string& checkpoint, const std::string& data_path,
             const CommonArgs& args, const std::string& format) {
  const evalign::EvidentialHead head = evalign::load_checkpoint(checkpoint);
  evalign::CsvSchema schema;
  if (!args.config_path.empty() || !args.preset.empty() || !args.overrides.empty()) {
    schema = resolve_config(args).csv.schema;
  }
  if (schema.feature_columns.empty()) {
    std::ifstream is(data_path);
    if (!is) throw std::runtime_error("cannot open csv: " + data_path);
    std::string line;
    if (!std::getline(is, line)) throw std::runtime_error(data_path + ":1: missing header row");
    bool saw_attribute = false;
    for (const std::string& col : evalign::detail::split_csv_line(line)) {
      saw_attribute = saw_attribute || col == schema.attribute_column;
      if (col != schema.label_column && col != schema.attribute_column) {
        schema.feature_columns.push_back(col);
      }
    }
    // Inferred layout: the attribute column is optional, group metrics are
    // simply omitted without one.
    if (!saw_attribute) schema.attribute_column.clear();
  }
  const evalign::Dataset data = evalign::load_csv(data_path, schema);
  const evalign::GroupMetrics m = evalign::evaluate(head, data);
  std::cout << evalign::report(m, evalign::report_format_from_string(format));
  return 0;
}

int cmd_bound(const std::string& profile_path, const std::string& format) {
  const json j = evalign::load_json_file(profile_path);
  const evalign::GroupRiskProfile p = evalign::profile_from_json(j);
  const json rep = evalign::bound_report_json(p);
  if (format == "json") {
    std::cout << rep.dump(2) << "\n";
  } else if (format == "table") {
    std::cout << "Reweighted risk:  " << rep["reweighted_risk"].get<double>() << "\n"
              << "Min weight alpha: " << rep["alpha"].get<double>() << "\n"
              << "n_min:            " << rep["n_min"].get<long>() << "\n"
              << "KL(Q||P):         " << rep["kl_qp"].get<double>() << "\n"
              << "delta:            " << rep["delta"].get<double>() << "\n"
              << "Bound:            " << rep["bound"].get<double>() << "\n";
  } else {
    throw std::invalid_argument("unknown report format '" + format + "' (json, table)");
  }
  return 0;
}

constexpr const char* kConfigKeysFooter =
    "Config keys (JSON):\n"
    "  data.source                synthetic | csv | colored_mnist\n"
    "  data.synthetic.*           dim, core_separation, spurious_separation, noise_sigma,\n"
    "                             train_counts, heldout_counts, test_counts (2x2 arrays)\n"
    "  data.csv.*                 train, heldout, test, features, label_column,\n"
    "                             attribute_column, num_classes, num_attributes\n"
    "  data.colored_mnist.*       train_images, train_labels, test_images, test_labels,\n"
    "                             class_digits, train_counts, heldout_fraction,\n"
    "                             heldout_p_corr, test_p_corr, flatten\n"
    "  train.*                    t1_epochs, t2_epochs, lr1, lr2, eta, beta, batch_size,\n"
    "                             seed, selection, loss_variant, calib_fraction,\n"
    "                             hidden_width, activation, momentum, class_balance,\n"
    "                             include_calib_in_stage1\n"
    "  output_dir, report_format\n"
    "Environment: EA_SEED overrides train.seed (an explicit --seed flag wins).\n";

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"evalign: evidential alignment for group-robust classification"};
  app.require_subcommand(1);

  CommonArgs gen_args;
  CLI::App* gen = app.add_subcommand("generate", "write train/calib/test CSV splits");
  add_train_flags(gen, gen_args);
  gen->footer(kConfigKeysFooter);

  CommonArgs train_args;
  std::string stage = "full";
  CLI::App* train = app.add_subcommand("train", "run the two-stage training pipeline");
  add_train_flags(train, train_args);
  train->add_option("--stage", stage, "full (default) or erm-only");
  train->footer(kConfigKeysFooter);

  CommonArgs eval_args;
  std::string checkpoint, data_path, eval_format = "json";
  CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint on a CSV split");
  eval->add_option("--checkpoint", checkpoint, "model checkpoint")->required();
  eval->add_option("--data", data_path, "CSV file to evaluate on")->required();
  eval->add_option("--config", eval_args.config_path, "JSON config file (for the CSV schema)");
  eval->add_option("--format", eval_format, "json or table");
  eval->footer("Honours data.csv.* schema keys from --config; other keys are ignored.\n");

  std::string profile_path, bound_format = "json";
  CLI::App* bound = app.add_subcommand("bound", "compute the worst-group risk certificate");
  bound->add_option("--profile", profile_path, "JSON group-risk profile")->required();
  bound->add_option("--format", bound_format, "json or table");
  bound->footer(
      "Profile keys: group_sizes, empirical_risks, weights, kl_qp, delta.\n");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    if (gen->parsed()) return cmd_generate(gen_args);
    if (train->parsed()) return cmd_train(train_args, stage);
    if (eval->parsed()) return cmd_eval(checkpoint, data_path, eval_args, eval_format);
    if (bound->parsed()) return cmd_bound(profile_path, bound_format);
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::domain_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
