// SPDX-License-Identifier: Apache-2.0
//
// Command-line front end: generate, split, train, evaluate, sweep, report.
// Every subcommand accepts --config FILE (key = value lines) and one flag per
// configuration key; flags override the file.
#pragma once

#include <CLI11.hpp>

#include <iostream>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "modfuse/checkpoint.hpp"
#include "modfuse/config.hpp"
#include "modfuse/datagen.hpp"
#include "modfuse/metrics.hpp"
#include "modfuse/optim.hpp"
#include "modfuse/sweep.hpp"

namespace modfuse {

namespace detail {

/// Options common to every subcommand.
struct CommonOptions {
  std::string config_path;
  std::map<std::string, std::string> settings;
};

inline void add_common_options(CLI::App& sub, CommonOptions& opts) {
  sub.add_option("--config", opts.config_path, "key = value configuration file")->check(CLI::ExistingFile);
  for (const auto& [key, help] : config_keys()) {
    std::string names = "--" + key;
    if (key == "n_samples") names += ",--n";
    sub.add_option(names, opts.settings[key], help);
  }
}

inline ExperimentConfig resolve_config(const CLI::App& sub, const CommonOptions& opts) {
  ExperimentConfig cfg;
  if (!opts.config_path.empty()) apply_config_file(cfg, opts.config_path);
  for (const auto& [key, value] : opts.settings) {
    if (sub.count("--" + key) == 0) continue;
    try {
      apply_setting(cfg, key, value);
    } catch (const ValidationError& e) {
      throw ValidationError(std::string("--") + key + ": " + e.what());
    }
  }
  return cfg;
}

inline void write_text(const std::string& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot open '" + path + "' for writing");
  os << text;
  if (!os) throw Error("write to '" + path + "' failed");
}

inline std::vector<std::vector<Record>> split_records(const ExperimentConfig& cfg, std::span<const Record> records,
                                                      std::ostream& err) {
  if (cfg.split_fractions.size() != 3) throw ValidationError("split_fractions needs three values (train,val,test)");
  auto res = stratified_split(records, cfg.split_fractions, cfg.seed);
  for (const auto& w : res.warnings) err << "warning: " << w << '\n';
  return std::move(res.parts);
}

inline std::string fmt(double v) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(4);
  os << v;
  return os.str();
}

}  // namespace detail

/// Runs the command line `args` (program name first). Returns the process
/// exit code: 0 on success, 1 for runtime errors, 2 for usage errors and 3
/// when training aborts on a non-finite loss.
inline int run_cli(const std::vector<std::string>& args, std::ostream& out = std::cout,
                   std::ostream& err = std::cerr) {
  CLI::App app{"Gated multimodal late-fusion classifier toolkit", "modfuse"};
  app.require_subcommand(1);
  app.fallthrough(false);

  auto* gen = app.add_subcommand("generate", "write a synthetic dataset");
  auto* split = app.add_subcommand("split", "stratified train/val/test split of a dataset");
  auto* trn = app.add_subcommand("train", "train a model; writes a checkpoint and a training log");
  auto* eval = app.add_subcommand("evaluate", "score a checkpoint on a dataset");
  auto* sweep = app.add_subcommand("sweep", "train one model per lambda and select by validation R@P95");
  auto* report = app.add_subcommand("report", "gate-weight distribution and per-sample modality analysis");

  std::map<CLI::App*, detail::CommonOptions> common;
  for (auto* sub : {gen, split, trn, eval, sweep, report}) detail::add_common_options(*sub, common[sub]);

  std::string out_path, data_path, prefix, model_path, log_path, val_path, text_model, image_model;
  gen->add_option("--out", out_path, "dataset file to write")->required();
  split->add_option("--data", data_path, "dataset to split")->required()->check(CLI::ExistingFile);
  split->add_option("--out-prefix", prefix, "writes PREFIX.train.ds, PREFIX.val.ds, PREFIX.test.ds")->required();
  trn->add_option("--data", data_path, "training dataset")->required()->check(CLI::ExistingFile);
  trn->add_option("--val-data", val_path, "validation dataset (default: stratified carve of --data)")
      ->check(CLI::ExistingFile);
  trn->add_option("--out", model_path, "checkpoint to write")->required();
  trn->add_option("--log", log_path, "training log to write (default: <checkpoint>.log)");
  eval->add_option("--model", model_path, "checkpoint")->required()->check(CLI::ExistingFile);
  eval->add_option("--data", data_path, "dataset to score")->required()->check(CLI::ExistingFile);
  eval->add_option("--out", out_path, "also write the report to this file");
  sweep->add_option("--data", data_path, "dataset to split and sweep on (default: generate from the config)")
      ->check(CLI::ExistingFile);
  sweep->add_option("--out", out_path, "also write the table to this file");
  report->add_option("--model", model_path, "checkpoint with a gated merger")->check(CLI::ExistingFile);
  report->add_option("--data", data_path, "dataset to analyse")->required()->check(CLI::ExistingFile);
  report->add_option("--text-model", text_model, "text-only checkpoint for per-sample modality wins")
      ->check(CLI::ExistingFile);
  report->add_option("--image-model", image_model, "image-only checkpoint for per-sample modality wins")
      ->check(CLI::ExistingFile);

  // Unknown names are reported before required-option checks so the message
  // points at the typo rather than at a missing flag.
  if (args.size() > 1 && !args[1].starts_with("-")) {
    CLI::App* sub = app.get_subcommand_no_throw(args[1]);
    if (sub == nullptr) {
      err << "error: unknown subcommand '" << args[1] << "'\n\n" << app.help();
      return 2;
    }
    for (std::size_t i = 2; i < args.size(); ++i) {
      if (!args[i].starts_with("--")) continue;
      const std::string name = args[i].substr(0, args[i].find('='));
      if (name == "--help" || sub->get_option_no_throw(name) != nullptr) continue;
      err << "error: unknown option '" << name << "' for '" << args[1] << "'\n\n" << sub->help();
      return 2;
    }
  }

  std::vector<std::string> rev(args.rbegin(), args.rend() - (args.empty() ? 0 : 1));
  try {
    app.parse(rev);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n";
    CLI::App* active = &app;
    for (auto* sub : app.get_subcommands()) active = sub;
    err << active->help();
    return 2;
  }

  try {
    CLI::App* sub = app.get_subcommands().front();
    const ExperimentConfig cfg = detail::resolve_config(*sub, common[sub]);

    if (sub == gen) {
      const auto records = generate(cfg.gen);
      write_dataset(out_path, records);
      out << "wrote " << records.size() << " records to " << out_path << '\n';
    } else if (sub == split) {
      const auto records = read_dataset(data_path);
      const auto parts = detail::split_records(cfg, records, err);
      const char* names[] = {"train", "val", "test"};
      for (std::size_t k = 0; k < 3; ++k) {
        const std::string path = prefix + "." + names[k] + ".ds";
        write_dataset(path, parts[k]);
        out << names[k] << '\t' << parts[k].size() << '\t' << path << '\n';
      }
    } else if (sub == trn) {
      const auto records = read_dataset(data_path);
      std::vector<Record> val;
      if (!val_path.empty()) val = read_dataset(val_path);
      const TrainedModel tm = train_model(cfg, records, cfg.train.lambda, val);
      for (const auto& w : tm.log.warnings) err << "warning: " << w << '\n';
      save_checkpoint(model_path, tm.model);
      if (log_path.empty()) log_path = model_path + ".log";
      detail::write_text(log_path, tm.log.to_text());
      const auto& last = tm.log.epochs.back();
      out << "trained " << last.epoch << " epochs (" << last.step << " steps), final loss_ce " << detail::fmt(last.loss_ce);
      if (last.loss_kl) out << ", loss_kl " << detail::fmt(*last.loss_kl);
      out << "\ncheckpoint " << model_path << "\nlog " << log_path << '\n';
    } else if (sub == eval) {
      const FusionModel model = load_checkpoint(model_path);
      const auto records = read_dataset(data_path);
      EvalOptions opt = cfg.eval;
      opt.multiclass = model.config().objective == Objective::multiclass_softmax;
      const EvalReport rep = evaluate(predict(model, records), opt);
      const std::string text = rep.table() + rep.machine_line() + "\n";
      out << text;
      if (!out_path.empty()) detail::write_text(out_path, text);
    } else if (sub == sweep) {
      std::vector<Record> records = data_path.empty() ? generate(cfg.gen) : read_dataset(data_path);
      const auto parts = detail::split_records(cfg, records, err);
      const SweepResult res = lambda_sweep(cfg, parts[0], parts[1], parts[2], cfg.grid);
      for (const auto& row : res.rows)
        if (!row.ok) err << "lambda " << format_double(row.lambda) << " failed: " << row.error << '\n';
      std::string text = res.table();
      if (res.selected) text += "selected_lambda=" + format_double(res.rows[*res.selected].lambda) + "\n";
      out << text;
      if (!out_path.empty()) detail::write_text(out_path, text);
    } else if (sub == report) {
      if (model_path.empty() && (text_model.empty() || image_model.empty())) {
        throw ValidationError("report needs --model, or both --text-model and --image-model");
      }
      const auto records = read_dataset(data_path);
      if (!model_path.empty()) {
        const FusionModel model = load_checkpoint(model_path);
        const PredictionSet p = predict(model, records);
        const AttentionReport a = attention_report(p, cfg.eval.collapse_cutoff);
        out << "# p_txt distribution (" << p.size() << " samples)\n"
            << "min\tq1\tmedian\tq3\tmax\tmean\tcollapse_fraction\n"
            << detail::fmt(a.p_txt.min) << '\t' << detail::fmt(a.p_txt.q1) << '\t' << detail::fmt(a.p_txt.median)
            << '\t' << detail::fmt(a.p_txt.q3) << '\t' << detail::fmt(a.p_txt.max) << '\t' << detail::fmt(a.p_txt.mean)
            << '\t' << detail::fmt(a.collapse_fraction) << '\n';
        out << "# p_txt histogram\nbin_lo\tbin_hi\tcount\n";
        for (std::size_t b = 0; b < a.histogram.size(); ++b) {
          const double w = 1.0 / static_cast<double>(a.histogram.size());
          out << detail::fmt(b * w) << '\t' << detail::fmt((b + 1) * w) << '\t' << a.histogram[b] << '\n';
        }
        out << "# p_txt by informativeness\ntxt_informative\timg_informative\tcount\tmedian_p_txt\tmean_p_txt\n";
        for (int ti : {1, 0})
          for (int ii : {1, 0}) {
            std::vector<double> group;
            for (std::size_t i = 0; i < records.size(); ++i)
              if (records[i].txt_informative == ti && records[i].img_informative == ii) group.push_back((*p.attention)[i]);
            out << ti << '\t' << ii << '\t' << group.size();
            if (group.empty()) {
              out << "\t-\t-\n";
            } else {
              const auto s = describe(group);
              out << '\t' << detail::fmt(s.median) << '\t' << detail::fmt(s.mean) << '\n';
            }
          }
      }
      if (!text_model.empty() && !image_model.empty()) {
        const FusionModel tm = load_checkpoint(text_model), im = load_checkpoint(image_model);
        const auto w = best_modality_counts(predict(tm, records), predict(im, records), cfg.eval.threshold, cfg.win_rule);
        out << "# per-sample modality wins (" << to_string(cfg.win_rule) << ")\ntext_wins\timage_wins\tties\n"
            << w.text << '\t' << w.image << '\t' << w.ties << '\n';
      }
    }
  } catch (const NumericError& e) {
    err << "error: " << e.what() << '\n';
    return 3;
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}

inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  return run_cli(std::vector<std::string>(argv, argv + argc), out, err);
}

}  // namespace modfuse
