// gbud: synthetic depth data, training, gradient-based uncertainty and
// sparsification evaluation from the command line.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "gbud/ablation.hpp"
#include "gbud/checkpoint.hpp"
#include "gbud/evaluation.hpp"
#include "gbud/image_io.hpp"
#include "gbud/report.hpp"
#include "gbud/run_manifest.hpp"
#include "gbud/synth.hpp"
#include "gbud/train.hpp"
#include "gbud/uncertainty.hpp"

namespace fs = std::filesystem;
using namespace gbud;

namespace {

std::string with_suffix(const std::string& path, const std::string& suffix) {
  fs::path p(path);
  p.replace_extension();
  return p.string() + suffix;
}

bool parse_on_off(const std::string& s) {
  if (s == "on") return true;
  if (s == "off") return false;
  throw UsageError("expected on|off, got '" + s + "'");
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  for (std::string item; std::getline(ss, item, ',');) {
    if (!item.empty()) out.push_back(item);
  }
  if (out.empty()) throw UsageError("empty method list");
  return out;
}

// Options describing the gradient estimator, shared by several commands.
struct GradFlags {
  int layer = 6;
  double lambda = 2.0;
  std::string loss = "flip";
  std::string abs = "on";
  int variance_power = 1;
  std::uint64_t seed = 0;

  void add(CLI::App* cmd) {
    cmd->add_option("--layer", layer, "decoder layer whose gradients are used (1..6)")->capture_default_str();
    cmd->add_option("--lambda", lambda, "variance weight in the Bayesian auxiliary loss")->capture_default_str();
    cmd->add_option("--loss", loss, "reference transform: flip|gt|gray|noise|rot5|rot10|rot20")->capture_default_str();
    cmd->add_option("--abs", abs, "channel max over gradient magnitudes: on|off")->capture_default_str();
    cmd->add_option("--variance-power", variance_power, "exponent of the variance term (1 or 2)")
        ->capture_default_str();
    cmd->add_option("--seed", seed, "seed for noise and dropout sampling")->capture_default_str();
  }

  UncertConfig config() const {
    UncertConfig c;
    c.layer = layer;
    c.lambda = lambda;
    c.transform = parse_aux_transform(loss);
    c.use_abs = parse_on_off(abs);
    c.variance_power = variance_power;
    c.seed = seed;
    c.validate();
    return c;
  }
};

unsigned resolve_threads(int threads) {
  if (threads < 0) throw UsageError("threads must be >= 0");
  return threads > 0 ? static_cast<unsigned>(threads) : std::max(1u, std::thread::hardware_concurrency());
}

// ---- commands ----

struct GenDataFlags {
  std::string out;
  std::size_t n = 2000;
  std::uint64_t seed = 0;
  int noise_patches = SceneConfig{}.max_noisy_patches;
};

void cmd_gen_data(const GenDataFlags& f) {
  if (f.n < 1) throw UsageError("--n must be >= 1");
  SceneConfig scene;
  scene.max_noisy_patches = f.noise_patches;
  generate_dataset(f.n, f.seed, f.out, scene);
  RunManifest m;
  m.command = "gen-data";
  m.flags = {{"out", f.out}, {"n", f.n}, {"seed", f.seed}, {"noise_patches", f.noise_patches}};
  m.seeds = {{"master", f.seed}};
  m.outputs = {f.out};
  m.write((fs::path(f.out) / "run_manifest.json").string());
}

struct TrainFlags {
  std::string data, model = "plain", out;
  int epochs = 20, batch = 8, threads = 0;
  double lr = 1e-3;
  std::uint64_t seed = 0;
  bool flip_augment = false;
};

void cmd_train(const TrainFlags& f) {
  TrainConfig cfg;
  cfg.kind = parse_model_kind(f.model);
  cfg.epochs = f.epochs;
  cfg.batch = f.batch;
  cfg.lr = f.lr;
  cfg.seed = f.seed;
  cfg.flip_augment = f.flip_augment;
  cfg.threads = f.threads;
  cfg.validate();
  const Dataset data(f.data);
  const auto result = train(data, cfg, [](const EpochLog& e) {
    std::fprintf(stderr, "epoch %d train %.6f val %.6f\n", e.epoch, e.train_loss, e.val_loss);
  });
  save_checkpoint(result.net, f.out);
  const std::string log = with_suffix(f.out, ".log.csv");
  write_training_log(result.log, log);
  RunManifest m;
  m.command = "train";
  m.flags = {{"data", f.data}, {"model", f.model}, {"out", f.out}, {"config", cfg.to_json()}};
  m.seeds = {{"init_and_order", f.seed}};
  m.add_input_dataset(data);
  m.outputs = {f.out, log};
  m.write(f.out + ".manifest.json");
}

struct UncertaintyFlags {
  std::string ckpt, image, method = "grad", gt, out;
  GradFlags grad;
};

void cmd_uncertainty(const UncertaintyFlags& f) {
  const Method method = parse_method(f.method);
  const UncertConfig cfg = f.grad.config();
  if (method == Method::kGrad && cfg.transform == AuxTransform::kGt && f.gt.empty()) {
    throw UsageError("--loss gt requires --gt");
  }
  const DepthNet net = load_checkpoint(f.ckpt);
  const Tensor x = read_ppm(f.image);
  std::optional<Tensor> gt;
  if (!f.gt.empty()) gt = read_pfm(f.gt);
  const auto u = estimate(method, net, x, cfg, gt ? &*gt : nullptr);
  write_pfm(u.u, f.out);
  const std::string sidecar = with_suffix(f.out, ".json");
  write_text_file(sidecar, sidecar_json(u, cfg).dump(2) + "\n");
  RunManifest m;
  m.command = "uncertainty";
  m.flags = {{"ckpt", f.ckpt}, {"image", f.image}, {"method", f.method}, {"gt", f.gt}, {"out", f.out},
             {"config", cfg.to_json()}};
  m.seeds = {{"estimator", cfg.seed}};
  m.add_input_file(f.ckpt);
  m.add_input_file(f.image);
  if (!f.gt.empty()) m.add_input_file(f.gt);
  m.outputs = {f.out, sidecar};
  m.write(f.out + ".manifest.json");
}

struct ModelFlags {
  std::string ckpt, dropout_ckpt, log_ckpt;

  void add(CLI::App* cmd) {
    cmd->add_option("--ckpt", ckpt, "checkpoint driving grad and the sampling baselines")->required();
    cmd->add_option("--dropout-ckpt", dropout_ckpt, "dropout-trained checkpoint for mcdrop");
    cmd->add_option("--log-ckpt", log_ckpt, "checkpoint with a variance head for log");
  }
};

struct LoadedModels {
  DepthNet primary;
  std::optional<DepthNet> dropout, bayes;

  ModelSet set() const {
    return {&primary, dropout ? &*dropout : nullptr, bayes ? &*bayes : nullptr};
  }
};

LoadedModels load_models(const ModelFlags& f, RunManifest& m) {
  LoadedModels out{load_checkpoint(f.ckpt), {}, {}};
  m.add_input_file(f.ckpt);
  if (!f.dropout_ckpt.empty()) {
    out.dropout = load_checkpoint(f.dropout_ckpt);
    m.add_input_file(f.dropout_ckpt);
  }
  if (!f.log_ckpt.empty()) {
    out.bayes = load_checkpoint(f.log_ckpt);
    m.add_input_file(f.log_ckpt);
  }
  return out;
}

struct EvaluateFlags {
  ModelFlags models;
  std::string data, split = "test", methods = "grad,post,var,indrop,const", out_csv, curves_csv;
  int bins = kDefaultBins, threads = 0;
  bool pooled = false;
  GradFlags grad;
};

void cmd_evaluate(const EvaluateFlags& f) {
  const UncertConfig cfg = f.grad.config();
  std::vector<MethodSpec> specs;
  for (const auto& name : split_list(f.methods)) specs.push_back({name, parse_method(name), cfg});
  RunManifest m;
  m.command = "evaluate";
  const auto models = load_models(f.models, m);
  const Dataset data(f.data);
  m.add_input_dataset(data);
  EvalOptions opts;
  opts.bins = f.bins;
  opts.pooled = f.pooled;
  opts.threads = resolve_threads(f.threads);
  const auto result = evaluate_methods(models.set(), data, split_indices(data, f.split), specs, opts);
  write_text_file(f.out_csv, results_csv(result));
  write_text_file(f.curves_csv, curves_csv(result));
  m.flags = {{"ckpt", f.models.ckpt},   {"dropout_ckpt", f.models.dropout_ckpt}, {"log_ckpt", f.models.log_ckpt},
             {"data", f.data},          {"split", f.split},                      {"methods", f.methods},
             {"bins", f.bins},          {"pooled", f.pooled},                    {"out_csv", f.out_csv},
             {"curves_csv", f.curves_csv}, {"config", cfg.to_json()}};
  m.seeds = {{"estimator", cfg.seed}};
  m.outputs = {f.out_csv, f.curves_csv};
  m.write(f.out_csv + ".manifest.json");
}

struct AblateFlags {
  ModelFlags models;
  std::string data, split = "test", axis, out_csv;
  int bins = kDefaultBins, threads = 0;
  GradFlags grad;
};

void cmd_ablate(const AblateFlags& f) {
  const AblationAxis axis = parse_ablation_axis(f.axis);
  const UncertConfig base = f.grad.config();
  RunManifest m;
  m.command = "ablate";
  const auto models = load_models(f.models, m);
  const Dataset data(f.data);
  m.add_input_dataset(data);
  EvalOptions opts;
  opts.bins = f.bins;
  opts.threads = resolve_threads(f.threads);
  const auto r = run_ablation(models.set(), load_images(data, split_indices(data, f.split)), axis, base, opts);
  write_text_file(f.out_csv, ablation_csv(r));
  m.flags = {{"ckpt", f.models.ckpt}, {"data", f.data}, {"split", f.split}, {"axis", f.axis},
             {"bins", f.bins},        {"out_csv", f.out_csv}, {"config", base.to_json()}};
  m.seeds = {{"estimator", base.seed}};
  m.outputs = {f.out_csv};
  m.write(f.out_csv + ".manifest.json");
}

struct PlotFlags {
  std::string curves_csv, out_svg;
};

void cmd_plot(const PlotFlags& f) {
  const auto bytes = read_file_bytes(f.curves_csv);
  const std::string text(reinterpret_cast<const char*>(bytes.data()), bytes.size());
  RunManifest m;
  m.command = "plot";
  m.flags = {{"curves_csv", f.curves_csv}, {"out_svg", f.out_svg}};
  m.add_input_file(f.curves_csv);
  m.outputs = plot_curves(text, f.out_svg, f.curves_csv);
  m.write(f.out_svg + ".manifest.json");
}

// ---- error reporting ----

int report(const char* kind, const std::string& message, int code) {
  std::cerr << nlohmann::json{{"error", kind}, {"message", message}}.dump() << '\n';
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Gradient-based uncertainty for monocular depth on synthetic scenes"};
  app.set_version_flag("--version", GBUD_VERSION);
  app.require_subcommand(1);

  GenDataFlags gen;
  auto* c_gen = app.add_subcommand("gen-data", "generate a synthetic dataset");
  c_gen->add_option("--out", gen.out, "output directory")->required();
  c_gen->add_option("--n", gen.n, "number of samples")->capture_default_str();
  c_gen->add_option("--seed", gen.seed, "master seed")->capture_default_str();
  c_gen->add_option("--noise-patches", gen.noise_patches, "maximum noisy label patches per image")
      ->capture_default_str();

  TrainFlags tr;
  auto* c_train = app.add_subcommand("train", "train a depth network");
  c_train->add_option("--data", tr.data, "dataset directory")->required();
  c_train->add_option("--model", tr.model, "plain|log|dropout")->capture_default_str();
  c_train->add_option("--out", tr.out, "checkpoint path")->required();
  c_train->add_option("--epochs", tr.epochs)->capture_default_str();
  c_train->add_option("--lr", tr.lr)->capture_default_str();
  c_train->add_option("--batch", tr.batch)->capture_default_str();
  c_train->add_option("--seed", tr.seed)->capture_default_str();
  c_train->add_option("--threads", tr.threads, "gradient workers, 0 = all cores (results do not depend on it)")
      ->capture_default_str();
  c_train->add_flag("--flip-augment", tr.flip_augment, "random horizontal flips during training");

  UncertaintyFlags un;
  auto* c_unc = app.add_subcommand("uncertainty", "estimate an uncertainty map for one image");
  c_unc->add_option("--ckpt", un.ckpt)->required();
  c_unc->add_option("--image", un.image, "input PPM")->required();
  c_unc->add_option("--method", un.method, "grad|post|var|indrop|mcdrop|log|const")->capture_default_str();
  c_unc->add_option("--gt", un.gt, "ground-truth PFM (for --loss gt)");
  c_unc->add_option("--out", un.out, "output PFM")->required();
  un.grad.add(c_unc);

  EvaluateFlags ev;
  auto* c_eval = app.add_subcommand("evaluate", "sparsification metrics over a dataset split");
  ev.models.add(c_eval);
  c_eval->add_option("--data", ev.data)->required();
  c_eval->add_option("--split", ev.split)->capture_default_str();
  c_eval->add_option("--methods", ev.methods, "comma-separated method list")->capture_default_str();
  c_eval->add_option("--out-csv", ev.out_csv)->required();
  c_eval->add_option("--curves-csv", ev.curves_csv)->required();
  c_eval->add_option("--bins", ev.bins)->capture_default_str();
  c_eval->add_option("--threads", ev.threads)->capture_default_str();
  c_eval->add_flag("--pooled", ev.pooled, "rank all pixels of the split jointly instead of per image");
  ev.grad.add(c_eval);

  AblateFlags ab;
  auto* c_abl = app.add_subcommand("ablate", "sweep one setting of the gradient estimator");
  ab.models.add(c_abl);
  c_abl->add_option("--data", ab.data)->required();
  c_abl->add_option("--split", ab.split)->capture_default_str();
  c_abl->add_option("--axis", ab.axis, "layer|loss|abs|lambda")->required();
  c_abl->add_option("--out-csv", ab.out_csv)->required();
  c_abl->add_option("--bins", ab.bins)->capture_default_str();
  c_abl->add_option("--threads", ab.threads)->capture_default_str();
  ab.grad.add(c_abl);

  PlotFlags pl;
  auto* c_plot = app.add_subcommand("plot", "SVG sparsification-error plots from a curves CSV");
  c_plot->add_option("--curves-csv", pl.curves_csv)->required();
  c_plot->add_option("--out-svg", pl.out_svg, "output path; _<metric> is inserted per metric")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return report("usage", e.what(), 2);
  }

  try {
    if (c_gen->parsed()) cmd_gen_data(gen);
    if (c_train->parsed()) cmd_train(tr);
    if (c_unc->parsed()) cmd_uncertainty(un);
    if (c_eval->parsed()) cmd_evaluate(ev);
    if (c_abl->parsed()) cmd_ablate(ab);
    if (c_plot->parsed()) cmd_plot(pl);
  } catch (const UsageError& e) {
    return report("usage", e.what(), 2);
  } catch (const FormatError& e) {
    return report("format", e.what(), 3);
  } catch (const ShapeError& e) {
    return report("shape", e.what(), 4);
  } catch (const NumericError& e) {
    return report("numeric", e.what(), 5);
  } catch (const std::exception& e) {
    return report("internal", e.what(), 1);
  }
  return 0;
}
