// SPDX-License-Identifier: Apache-2.0
//
// End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
// exits nonzero if any criterion fails.
#include <bit>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "modfuse/cli.hpp"
#include "modfuse/modfuse.hpp"
#include "support/fixtures.hpp"
#include "support/gradcheck.hpp"

namespace {

using namespace modfuse;
namespace fs = std::filesystem;

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

ExperimentConfig load_config(const std::string& name) {
  ExperimentConfig c;
  apply_config_file(c, std::string(MODFUSE_CONFIG_DIR) + "/" + name);
  return c;
}

struct Splits {
  std::vector<Record> train, val, test;
};

Splits split_config_data(const ExperimentConfig& c) {
  const auto data = generate(c.gen);
  auto parts = stratified_split(data, c.split_fractions, c.seed).parts;
  return {std::move(parts[0]), std::move(parts[1]), std::move(parts[2])};
}

struct RandomBatch {
  std::vector<std::vector<int>> tokens;
  Tensor images, targets;
};

RandomBatch random_batch(Rng& rng, std::size_t n, std::size_t vocab, std::size_t dim, std::size_t labels) {
  RandomBatch b{{}, Tensor({n, dim}), Tensor({n, labels})};
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<int> seq(1 + rng.below(6));
    for (auto& t : seq) t = static_cast<int>(1 + rng.below(vocab - 1));
    b.tokens.push_back(std::move(seq));
  }
  for (auto& v : b.images.storage()) v = rng.uniform(-1.5, 1.5);
  for (auto& v : b.targets.storage()) v = rng.bernoulli(0.4) ? 1.0 : 0.0;
  return b;
}

ModelConfig small_model(std::uint64_t seed) {
  ModelConfig c;
  c.text = {14, 4, static_cast<Pooling>(seed % 3)};
  c.image = {5, {4}, 3, seed % 2 ? Activation::tanh : Activation::relu};
  c.merger.gate = seed % 4 < 2 ? GateKind::sigmoid : GateKind::softmax;
  c.num_labels = 3;
  return c;
}

bool bits_equal(const std::vector<Tensor>& a, const std::vector<Tensor>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].shape() != b[i].shape()) return false;
    for (std::size_t j = 0; j < a[i].numel(); ++j)
      if (std::bit_cast<std::uint64_t>(a[i][j]) != std::bit_cast<std::uint64_t>(b[i][j])) return false;
  }
  return true;
}

std::vector<Tensor> values_with_prefix(const ParameterList& params, const std::string& prefix) {
  std::vector<Tensor> out;
  for (const auto& p : params)
    if (p.name.starts_with(prefix)) out.push_back(p.var.value());
  return out;
}

// 1. Full-model gradients against central differences.
Outcome gradient_integrity() {
  double worst = 0;
  std::string worst_at;
  std::size_t checked = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    FusionModel model(small_model(seed), seed);
    for (const char* name : {"text_encoder.embedding", "head.W", "head.b", "merger.W", "merger.b", "norm_txt.gamma",
                             "norm_txt.beta", "norm_img.gamma", "norm_img.beta"}) {
      if (model.parameters().find(name) == nullptr) return {false, std::string("missing parameter ") + name};
    }
    Rng rng(mix_seed(seed, 1));
    const auto b = random_batch(rng, 5, 14, 5, 3);
    const double lambda = rng.uniform(0.05, 2.0);
    auto loss_fn = [&] { return model.loss(model.forward(b.tokens, b.images), b.targets, lambda); };
    const auto r = testing::check_gradients(model.parameters(), loss_fn);
    checked += r.checked;
    if (r.max_rel_error > worst) {
      worst = r.max_rel_error;
      worst_at = "seed " + std::to_string(seed) + " " + r.worst;
    }
  }
  return {worst < 1e-4, fmt("20 seeds, %zu entries, max rel err %.2e at %s", checked, worst, worst_at.c_str())};
}

// 2. KL(p || uniform) == ln 2 - H(p) on the two-way simplex.
Outcome kl_entropy_identity() {
  Rng rng(2);
  double worst = 0;
  for (int i = 0; i < 10000; ++i) {
    const double a = rng.uniform();
    const double kl = kl_to_uniform(Var(Tensor::matrix({{a, 1.0 - a}}))).item();
    const double h = -a * std::log(a) - (1.0 - a) * std::log(1.0 - a);
    worst = std::max(worst, std::abs(kl - (std::log(2.0) - h)));
  }
  return {worst < 1e-12, fmt("10000 points, max residual %.2e", worst)};
}

// 3. lambda = 0 reduces to cross-entropy; concat training never moves the gate.
Outcome lambda_zero_reduction() {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    FusionModel model(small_model(seed), seed);
    Rng rng(mix_seed(seed, 3));
    const auto b = random_batch(rng, 6, 14, 5, 3);
    const auto out = model.forward(b.tokens, b.images);
    const Var reg = model.loss(out, b.targets, 0.0);
    const Var ce = bce_loss(out.probs, b.targets);
    if (std::bit_cast<std::uint64_t>(reg.item()) != std::bit_cast<std::uint64_t>(ce.item()))
      return {false, fmt("seed %llu: loss %.17g != CE %.17g", (unsigned long long)seed, reg.item(), ce.item())};
    model.parameters().zero_grad();
    backward(reg);
    const auto g_reg = [&] {
      std::vector<Tensor> g;
      for (const auto& p : model.parameters()) g.push_back(p.var.grad());
      return g;
    }();
    model.parameters().zero_grad();
    backward(bce_loss(model.forward(b.tokens, b.images).probs, b.targets));
    std::vector<Tensor> g_ce;
    for (const auto& p : model.parameters()) g_ce.push_back(p.var.grad());
    if (!bits_equal(g_reg, g_ce)) return {false, fmt("seed %llu: gradients differ", (unsigned long long)seed)};
  }
  GenConfig g;
  g.n_samples = 500;
  g.num_labels = 5;
  g.vocab_size = 60;
  g.image_dim = 8;
  const auto data = generate(g);
  ModelConfig m;
  m.text = {g.vocab_size, 6, Pooling::sum};
  m.image = {g.image_dim, {8}, 6, Activation::relu};
  m.merger.kind = MergerKind::concat;
  m.num_labels = g.num_labels;
  FusionModel model(m, 4);
  const auto gate_before = values_with_prefix(model.parameters(), "merger.");
  const auto head_before = values_with_prefix(model.parameters(), "head.");
  TrainConfig t;
  t.epochs = 3;
  t.lambda = 0.5;
  train(model, data, t);
  if (gate_before.size() != 2) return {false, "concat model lacks gate parameters to compare"};
  if (!bits_equal(values_with_prefix(model.parameters(), "merger."), gate_before))
    return {false, "concat training changed gate parameters"};
  if (bits_equal(values_with_prefix(model.parameters(), "head."), head_before))
    return {false, "concat training did not update the head"};
  return {true, "20 models: loss and gradients bit-identical to CE; concat gate bit-identical after 3 epochs"};
}

// 4. Concat with head W equals uniform attention with head 2W.
Outcome concat_expressivity() {
  double worst = 0;
  std::size_t inputs = 0;
  for (std::uint64_t trial = 0; trial < 10; ++trial) {
    ModelConfig c = small_model(trial);
    c.merger.normalize = trial % 2 == 0;
    c.merger.gate = GateKind::sigmoid;
    ModelConfig ca = c;
    c.merger.kind = MergerKind::concat;
    FusionModel concat_model(c, 100 + trial);
    FusionModel attn_model(ca, 200 + trial);
    for (auto& p : attn_model.parameters()) {
      if (p.name.starts_with("merger.")) {
        p.var.mutable_value().fill(0.0);
      } else {
        p.var.mutable_value() = concat_model.parameters().at(p.name).var.value();
        if (p.name == "head.W")
          for (auto& v : p.var.mutable_value().storage()) v *= 2.0;
      }
    }
    Rng rng(mix_seed(trial, 4));
    const auto b = random_batch(rng, 10, 14, 5, 3);
    // Head logits: the argument of the output sigmoid.
    const Tensor a = concat_model.forward(b.tokens, b.images).probs.parent(0).value();
    const Tensor z = attn_model.forward(b.tokens, b.images).probs.parent(0).value();
    for (std::size_t i = 0; i < a.numel(); ++i) worst = std::max(worst, std::abs(a[i] - z[i]));
    inputs += b.tokens.size();
  }
  return {inputs == 100 && worst < 1e-12, fmt("%zu inputs, max logit diff %.2e", inputs, worst)};
}

// 5. Gate collapse without the penalty, mitigation with it.
Outcome collapse_reproduction() {
  const auto cfg = load_config("collapse.cfg");
  const auto s = split_config_data(cfg);
  const SweepResult r = lambda_sweep(cfg, s.train, s.val, s.test, cfg.grid);
  const SweepRow *zero = nullptr, *half = nullptr;
  for (const auto& row : r.rows) {
    if (row.lambda == 0.0) zero = &row;
    if (row.lambda == 0.5) half = &row;
  }
  if (!zero || !half || !r.selected) return {false, "grid must contain 0 and 0.5 and select a lambda"};
  if (!zero->ok || !half->ok) return {false, "training failed"};
  const SweepRow& tuned = r.rows[*r.selected];
  const bool ok = *zero->collapse_fraction > 0.8 && *half->collapse_fraction < 0.2 &&
                  tuned.test_f1.micro >= zero->test_f1.micro;
  return {ok, fmt("collapse(0)=%.3f collapse(0.5)=%.3f tuned lambda=%g micro %.4f vs lambda=0 micro %.4f",
                  *zero->collapse_fraction, *half->collapse_fraction, tuned.lambda, tuned.test_f1.micro,
                  zero->test_f1.micro)};
}

struct BalancedRun {
  double text_micro = 0, image_micro = 0, both_micro = 0;
  ModalityWins wins;
  std::size_t test_size = 0;
};

const BalancedRun& balanced_run() {
  static const BalancedRun run = [] {
    const auto cfg = load_config("balanced.cfg");
    const auto s = split_config_data(cfg);
    BalancedRun r;
    r.test_size = s.test.size();
    std::vector<PredictionSet> preds;
    for (Modalities m : {Modalities::text, Modalities::image, Modalities::both}) {
      ExperimentConfig c = cfg;
      c.modalities = m;
      const TrainedModel tm = train_model(c, s.train, c.train.lambda, s.val);
      preds.push_back(predict(tm.model, s.test));
    }
    r.text_micro = f1_suite(preds[0], cfg.eval.threshold).micro;
    r.image_micro = f1_suite(preds[1], cfg.eval.threshold).micro;
    r.both_micro = f1_suite(preds[2], cfg.eval.threshold).micro;
    r.wins = best_modality_counts(preds[0], preds[1], cfg.eval.threshold, WinRule::exact_match);
    return r;
  }();
  return run;
}

// 6. Neither modality is best on every sample.
Outcome no_modality_dominates() {
  const auto& r = balanced_run();
  const double n = static_cast<double>(r.test_size);
  const double t = r.wins.text / n, i = r.wins.image / n;
  return {t > 0.05 && i > 0.05,
          fmt("text wins %.1f%%, image wins %.1f%%, ties %.1f%% of %zu", 100 * t, 100 * i, 100 * r.wins.ties / n,
              r.test_size)};
}

// 7. Multimodal beats both unimodal models by two points.
Outcome multimodal_beats_unimodal() {
  const auto& r = balanced_run();
  const bool ok = r.both_micro >= r.text_micro + 0.02 && r.both_micro >= r.image_micro + 0.02;
  return {ok, fmt("micro F1 multimodal %.4f, text %.4f, image %.4f", r.both_micro, r.text_micro, r.image_micro)};
}

// 8. Metric oracles and split balance.
Outcome metric_oracles() {
  Rng rng(8);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t labels = 1 + rng.below(5);
    const std::size_t n = 1 + rng.below(1000 / labels);
    auto p = testing::random_predictions(rng, n, labels, 0.1 + 0.5 * rng.uniform(), trial % 2 ? 20 : 0);
    if (std::count(p.targets.data().begin(), p.targets.data().end(), 1.0) == 0) p.targets[0] = 1.0;
    const auto got = recall_at_precision(p, 0.95);
    const auto want = testing::brute_force_recall_at_precision(p, 0.95);
    if (got.recall != want.recall || got.threshold != want.threshold)
      return {false, fmt("R@P95 fixture %d: %.17g@%.17g vs %.17g@%.17g", trial, got.recall, got.threshold,
                         want.recall, want.threshold)};
  }
  // Hand-computed confusion fixtures.
  const auto a = testing::make_predictions({{0.9, 0.6, 0.1}, {0.7, 0.8, 0.2}, {0.3, 0.5, 0.4}, {0.0, 0.1, 0.3}},
                                           {{1, 1, 0}, {0, 1, 0}, {1, 1, 0}, {0, 0, 1}});
  const auto fa = f1_suite(a, 0.5);
  const auto b = testing::make_predictions({{0.9}, {0.8}, {0.7}, {0.1}, {0.2}}, {{1}, {1}, {0}, {1}, {0}});
  const auto fb = f1_suite(b, 0.5);
  if (fa.micro != 8.0 / 11.0 || fa.macro != 0.5 || fa.weighted != 4.0 / 6.0 || fb.micro != 2.0 / 3.0 ||
      fb.macro != 2.0 / 3.0 || fb.weighted != 2.0 / 3.0)
    return {false, "F1 fixtures mismatch"};

  const auto cfg = load_config("default.cfg");
  const auto data = generate(cfg.gen);
  const auto parts = stratified_split(data, cfg.split_fractions, cfg.seed).parts;
  double worst = 0;
  for (std::size_t l = 0; l < cfg.gen.num_labels; ++l) {
    auto rate = [&](std::span<const Record> rs) {
      double pos = 0;
      for (const auto& r : rs) pos += r.labels[l];
      return pos / static_cast<double>(rs.size());
    };
    const double overall = rate(data);
    for (const auto& part : parts) worst = std::max(worst, std::abs(rate(part) / overall - 1.0));
  }
  return {worst <= 0.10, fmt("200 R@P95 fixtures exact; F1 fixtures exact; split max relative deviation %.2f%% on %zu records",
                             100 * worst, data.size())};
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

// 9. Byte-identical pipeline outputs across two runs.
Outcome determinism() {
  const fs::path root = fs::temp_directory_path() / "modfuse_acceptance_determinism";
  fs::remove_all(root);
  const std::string cfg = std::string(MODFUSE_CONFIG_DIR) + "/default.cfg";
  std::vector<std::map<std::string, std::string>> runs;
  for (int rep = 0; rep < 2; ++rep) {
    const fs::path dir = root / ("run" + std::to_string(rep));
    fs::create_directories(dir);
    auto at = [&](const char* name) { return (dir / name).string(); };
    std::map<std::string, std::string> artifacts;
    auto step = [&](const std::string& tag, std::vector<std::string> rest) {
      std::vector<std::string> args{"modfuse", tag, "--config", cfg};
      args.insert(args.end(), rest.begin(), rest.end());
      std::ostringstream out, err;
      if (run_cli(args, out, err) != 0) throw Error(tag + " failed: " + err.str());
      // Console output names the run directory; compare it with that masked.
      std::string text = out.str();
      for (std::size_t pos; (pos = text.find(dir.string())) != std::string::npos;)
        text.replace(pos, dir.string().size(), "<run>");
      artifacts[tag + ".stdout"] = text;
    };
    step("generate", {"--out", at("data.ds")});
    step("split", {"--data", at("data.ds"), "--out-prefix", at("data")});
    step("train", {"--data", at("data.train.ds"), "--val-data", at("data.val.ds"), "--out", at("model.ckpt"),
                   "--log", at("train.log")});
    step("evaluate", {"--model", at("model.ckpt"), "--data", at("data.test.ds"), "--out", at("eval.txt")});
    step("report", {"--model", at("model.ckpt"), "--data", at("data.test.ds")});
    for (const char* f : {"data.ds", "data.train.ds", "data.val.ds", "data.test.ds", "model.ckpt", "train.log", "eval.txt"})
      artifacts[f] = slurp(dir / f);
    runs.push_back(std::move(artifacts));
  }
  fs::remove_all(root);
  for (const auto& [name, bytes] : runs[0]) {
    if (runs[1].at(name) != bytes) return {false, name + " differs between runs"};
    if (!name.ends_with(".stdout") && bytes.empty()) return {false, name + " is empty"};
  }
  return {true, fmt("%zu artifacts byte-identical (datasets, checkpoint, TrainLog, EvalReport, report)", runs[0].size())};
}

// 10. A very large penalty drives the gate to uniform.
Outcome large_lambda_uniformity() {
  const auto cfg = load_config("default.cfg");
  const auto s = split_config_data(cfg);
  const TrainedModel tm = train_model(cfg, s.train, 10.0, s.val);
  const double dev = mean_gate_deviation(predict(tm.model, s.test));
  return {dev < 0.05, fmt("lambda=10: mean |p_txt - 0.5| = %.2e on %zu test samples", dev, s.test.size())};
}

}  // namespace

int main() {
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria = {
      {"gradient-integrity", gradient_integrity},
      {"kl-entropy-identity", kl_entropy_identity},
      {"lambda-zero-reduction", lambda_zero_reduction},
      {"concat-uniform-attention-equivalence", concat_expressivity},
      {"collapse-and-mitigation", collapse_reproduction},
      {"no-modality-dominates", no_modality_dominates},
      {"multimodal-beats-unimodal", multimodal_beats_unimodal},
      {"metric-oracles", metric_oracles},
      {"pipeline-determinism", determinism},
      {"large-lambda-uniformity", large_lambda_uniformity},
  };
  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    failures += !o.pass;
    std::printf("%s %2zu %-38s %s (%.1fs)\n", o.pass ? "PASS" : "FAIL", i + 1, criteria[i].first, o.detail.c_str(), secs);
    std::fflush(stdout);
  }
  std::printf("%d/%zu criteria passed\n", static_cast<int>(criteria.size()) - failures, criteria.size());
  return failures == 0 ? 0 : 1;
}
