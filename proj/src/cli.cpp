#include "epep/cli.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <ostream>
#include <sstream>

#include "epep/checkpoint.hpp"
#include "epep/config.hpp"
#include "epep/data.hpp"
#include "epep/error.hpp"
#include "epep/prompting.hpp"
#include "epep/training.hpp"
#include "epep/verify.hpp"

namespace epep {

namespace {

using json = nlohmann::json;
namespace fs = std::filesystem;

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write '" + path.string() + "'");
  out << text;
  if (!out) throw ConfigError("failed writing '" + path.string() + "'");
}

std::string metrics_csv(const std::vector<HistoryRow>& rows) {
  std::ostringstream os;
  write_metrics_csv(os, rows);
  return os.str();
}

json report_json(const EvalReport& r, const std::string& split, int epoch,
                 const std::string& method) {
  return {{"split", split},
          {"epoch", epoch},
          {"method", method},
          {"f1_macro", r.f1_macro},
          {"auroc", r.auroc},
          {"loss_eb", r.loss_eb},
          {"loss_kl", r.loss_kl},
          {"mean_u_complete", r.mean_u_complete},
          {"mean_u_missing", r.mean_u_missing},
          {"n_complete", r.n_complete},
          {"n_missing", r.n_missing}};
}

// Runs body and maps library errors onto exit codes with a message on err.
template <class Fn>
int guarded(std::ostream& err, const char* command, Fn body) {
  try {
    return body();
  } catch (const DivergenceError& e) {
    err << "epep " << command << ": " << e.what() << "\n";
    return kExitFailure;
  } catch (const TrainingError& e) {
    err << "epep " << command << ": training failed: " << e.what() << "\n";
    return kExitFailure;
  } catch (const Error& e) {
    err << "epep " << command << ": " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "epep " << command << ": unexpected error: " << e.what() << "\n";
    return kExitFailure;
  }
}

}  // namespace

int cmd_train(const TrainArgs& args, std::ostream& out, std::ostream& err) {
  return guarded(err, "train", [&] {
    RunConfig cfg = args.config_path.empty() ? RunConfig{} : load_run_config(args.config_path);
    auto& t = cfg.train;
    if (args.output_dir) cfg.output_dir = *args.output_dir;
    if (args.method) t.method = parse_method(*args.method);
    if (args.loss) t.loss = parse_loss(*args.loss);
    if (args.policy) {
      t.policy = *args.policy == "auto" ? std::nullopt
                                        : std::optional<CompleteSamplePolicy>(parse_policy(*args.policy));
    }
    if (args.seed) t.seed = *args.seed;
    if (args.epochs) t.epochs = *args.epochs;
    if (args.warmup_epochs) t.warmup.epochs = *args.warmup_epochs;
    cfg.validate();

    const Datasets data = load_datasets(cfg);
    const fs::path dir(cfg.output_dir);
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw ConfigError("output.dir: cannot create '" + dir.string() + "': " + ec.message());
    write_text(dir / "config.json", to_json(cfg).dump(2) + "\n");

    TrainResult result = [&] {
      try {
        return train(t, data.warmup, data.train, data.test);
      } catch (const DivergenceError& e) {
        save_checkpoint((dir / "checkpoint.last_good.json").string(),
                        make_checkpoint(cfg, e.last_good()));
        write_text(dir / "metrics.csv", metrics_csv(e.last_good().history));
        err << "epep train: last good parameters saved to "
            << (dir / "checkpoint.last_good.json").string() << "\n";
        throw;
      }
    }();
    save_checkpoint((dir / "checkpoint.json").string(), make_checkpoint(cfg, result));
    write_text(dir / "metrics.csv", metrics_csv(result.history));

    out << "method " << to_string(t.method) << ", loss " << to_string(t.loss) << ", policy "
        << to_string(result.policy) << ", " << result.prompts.parameter_count()
        << " prompt parameters\n";
    write_metrics_header(out);
    write_metrics_row(out, result.history.back());
    out << "wrote " << (dir / "checkpoint.json").string() << ", "
        << (dir / "metrics.csv").string() << ", " << (dir / "config.json").string() << "\n";
    return kExitOk;
  });
}

int cmd_eval(const EvalArgs& args, std::ostream& out, std::ostream& err) {
  return guarded(err, "eval", [&] {
    if (args.checkpoint.empty()) throw ConfigError("--checkpoint is required");
    const Checkpoint ck = load_checkpoint(args.checkpoint);
    const auto& model = ck.config.train.model;
    std::vector<Sample> samples;
    if (!args.data.empty()) {
      // Labels are range-checked against the checkpoint below, so that a
      // class-count mismatch reports as a shape error.
      SampleShape shape = ck.config.sample_shape();
      shape.num_classes = std::numeric_limits<int>::max();
      samples = load_jsonl(args.data, shape);
    } else if (ck.config.data.source == DataSource::Synthetic) {
      samples = make_synthetic_split(ck.config, args.split);
    } else {
      samples = load_jsonl(ck.config.data.test_path, ck.config.sample_shape());
    }
    if (samples.empty()) throw ConfigError("evaluation dataset is empty");
    for (const auto& s : samples) {
      for (int c : s.labels) {
        if (c >= model.num_classes) {
          throw ShapeError("dataset has class " + std::to_string(c) + " but the checkpoint has " +
                           std::to_string(model.num_classes) + " classes");
        }
      }
      if (std::any_of(s.text_tokens.begin(), s.text_tokens.end(),
                      [&](int tok) { return tok < 0 || tok >= model.text_vocab; })) {
        throw ShapeError("dataset has text tokens outside the checkpoint vocabulary of " +
                         std::to_string(model.text_vocab));
      }
    }
    const EvalReport report = evaluate(ck.encoder, ck.prompts, samples, ck.config.train.loss);
    const HistoryRow row{ck.epochs_trained, args.split, report};
    const std::string report_text =
        report_json(report, args.split, ck.epochs_trained, to_string(ck.prompts.method())).dump(2) +
        "\n";
    std::ostringstream csv;
    write_metrics_header(csv);
    write_metrics_row(csv, row);
    if (args.report_path.empty()) {
      out << report_text;
    } else {
      write_text(args.report_path, report_text);
    }
    if (args.csv_path.empty()) {
      out << csv.str();
    } else {
      write_text(args.csv_path, csv.str());
    }
    return kExitOk;
  });
}

int cmd_synth(const SynthArgs& args, std::ostream& out, std::ostream& err) {
  return guarded(err, "synth", [&] {
    if (args.out.empty()) throw ConfigError("--out is required");
    RunConfig cfg = args.config_path.empty() ? RunConfig{} : load_run_config(args.config_path);
    cfg.data.source = DataSource::Synthetic;
    if (args.seed) cfg.train.seed = *args.seed;
    MissingProtocol* protocol = nullptr;
    std::size_t* n = nullptr;
    if (args.split == "train") {
      protocol = &cfg.data.train_protocol;
      n = &cfg.data.n_train;
    } else if (args.split == "test") {
      protocol = &cfg.data.test_protocol;
      n = &cfg.data.n_test;
    } else if (args.split == "warmup") {
      n = &cfg.data.n_warmup;
      if (args.text || args.image) throw ConfigError("the warmup split is always complete");
    } else {
      throw ConfigError("--split must be train, test or warmup");
    }
    if (args.n) *n = *args.n;
    if (protocol && args.text) protocol->availability[0] = *args.text;
    if (protocol && args.image) protocol->availability[1] = *args.image;
    cfg.validate();

    const auto samples = make_synthetic_split(cfg, args.split);
    std::ostringstream os;
    write_jsonl(os, samples);
    write_text(args.out, os.str());
    const auto incomplete = std::count_if(samples.begin(), samples.end(),
                                          [](const Sample& s) { return !s.pattern.empty(); });
    out << "wrote " << samples.size() << " samples (" << incomplete << " incomplete) to "
        << args.out << "\n";
    return kExitOk;
  });
}

int cmd_params(const ParamsArgs& args, std::ostream& out, std::ostream& err) {
  return guarded(err, "params", [&] {
    const ParamReport report = param_report(args.m, args.d, args.l, args.r);
    print_param_report(report, out);
    for (const auto& row : report.rows) {
      if (!row.count) {
        err << "epep params: " << to_string(row.method) << ": " << row.error << "\n";
        return kExitUsage;
      }
    }
    return kExitOk;
  });
}

int cmd_verify(const VerifyArgs& args, std::ostream& out, std::ostream& err) {
  return guarded(err, "verify", [&] {
    VerifyOptions options;
    options.inject_fault = args.inject_fault;
    const int code = run_verify(out, args.suites, options);
    return code == 0 ? kExitOk : kExitFailure;
  });
}

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Evidential low-rank prompting for missing-modality classification"};
  app.require_subcommand(1);

  TrainArgs train_args;
  auto* train_cmd = app.add_subcommand("train", "Warm up a backbone, then train prompts and head");
  train_cmd->add_option("--config", train_args.config_path, "JSON run config");
  train_cmd->add_option("--out", train_args.output_dir, "Output directory (overrides output.dir)");
  train_cmd->add_option("--method", train_args.method, "EPEP | MAP | MSP | NoPrompt");
  train_cmd->add_option("--loss", train_args.loss, "evidential | cross_entropy");
  train_cmd->add_option("--policy", train_args.policy, "auto | zero | skip | all_weights");
  train_cmd->add_option("--seed", train_args.seed, "Root seed");
  train_cmd->add_option("--epochs", train_args.epochs, "Prompt-phase epochs");
  train_cmd->add_option("--warmup-epochs", train_args.warmup_epochs, "Backbone warm-up epochs");

  EvalArgs eval_args;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint");
  eval_cmd->add_option("--checkpoint", eval_args.checkpoint, "Checkpoint file")->required();
  eval_cmd->add_option("--data", eval_args.data, "JSONL dataset (default: the config's test split)");
  eval_cmd->add_option("--split", eval_args.split, "Split label for the report");
  eval_cmd->add_option("--report", eval_args.report_path, "Write the JSON report here");
  eval_cmd->add_option("--csv", eval_args.csv_path, "Write the CSV row here");

  SynthArgs synth_args;
  auto* synth_cmd = app.add_subcommand("synth", "Write a synthetic JSONL dataset");
  synth_cmd->add_option("--out", synth_args.out, "Output JSONL file")->required();
  synth_cmd->add_option("--config", synth_args.config_path, "JSON run config");
  synth_cmd->add_option("--split", synth_args.split, "train | test | warmup");
  synth_cmd->add_option("--n", synth_args.n, "Number of samples");
  synth_cmd->add_option("--text", synth_args.text, "Text availability in [0, 1]");
  synth_cmd->add_option("--image", synth_args.image, "Image availability in [0, 1]");
  synth_cmd->add_option("--seed", synth_args.seed, "Root seed");

  ParamsArgs params_args;
  auto* params_cmd = app.add_subcommand("params", "Prompt parameter counts for MAP, MSP and EPEP");
  params_cmd->add_option("--m", params_args.m, "Modalities");
  params_cmd->add_option("--d", params_args.d, "Prompt rows (hidden size)");
  params_cmd->add_option("--l", params_args.l, "Prompt length");
  params_cmd->add_option("--r", params_args.r, "Block rank");

  VerifyArgs verify_args;
  auto* verify_cmd = app.add_subcommand("verify", "Run the oracle and gradient suites");
  verify_cmd->add_option("--suite", verify_args.suites, "Suite to run (repeatable)");
  verify_cmd->add_option("--inject-fault", verify_args.inject_fault)->group("");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  if (*train_cmd) return cmd_train(train_args, out, err);
  if (*eval_cmd) return cmd_eval(eval_args, out, err);
  if (*synth_cmd) return cmd_synth(synth_args, out, err);
  if (*params_cmd) return cmd_params(params_args, out, err);
  return cmd_verify(verify_args, out, err);
}

}  // namespace epep
