// capsf: train, evaluate and inspect the capsule forensics model.

#include <CLI11.hpp>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "capsf/dataset.hpp"
#include "capsf/gradcheck.hpp"
#include "capsf/pipeline.hpp"

namespace {

using namespace capsf;

struct ModelFlags {
  std::string extractor = "toy";
  std::string vgg_weights;
  std::size_t toy_channels = 32;
  int iterations = 2;
  double noise_sigma = 0.01;
  std::string noise_scale = "std_dev";
  std::string sharing = "per_pair";
  std::vector<double> mean{0.485, 0.456, 0.406};
  std::vector<double> std{0.229, 0.224, 0.225};
};

struct Options {
  ModelFlags model;
  std::string precision = "f64";
  std::uint64_t seed = 0;
  std::size_t threads = 1;

  std::string manifest;
  std::string checkpoint;
  std::string out;
  std::string split = "test";
  double threshold = 0.5;
  std::optional<std::size_t> max_frames;
  std::string report;
  std::vector<std::string> inputs;
  std::size_t limit = 0;
  bool per_sample = false;

  std::size_t epochs = 50;
  std::size_t batch_size = 16;
  double lr = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::size_t checkpoint_every = 0;
  std::optional<double> stop_at_accuracy;
  std::string curve;

  double step = 1e-5;
  double floor = 1e-5;
  double tolerance = 1e-4;

  SyntheticConfig synthetic;
};

void add_model_flags(CLI::App* cmd, ModelFlags& m) {
  cmd->add_option("--extractor", m.extractor, "Feature extractor")
      ->check(CLI::IsMember({"toy", "vgg19_front"}))
      ->capture_default_str();
  cmd->add_option("--vgg-weights", m.vgg_weights, "Weight archive for the VGG-19 front")->check(CLI::ExistingFile);
  cmd->add_option("--toy-channels", m.toy_channels, "Output channels of the toy extractor")->capture_default_str();
  cmd->add_option("-r,--iterations", m.iterations, "Routing iterations")->capture_default_str();
  cmd->add_option("--noise-sigma", m.noise_sigma, "Scale of the Gaussian routing-weight noise (training only)")
      ->capture_default_str();
  cmd->add_option("--noise-scale", m.noise_scale, "Read --noise-sigma as a standard deviation or a variance")
      ->check(CLI::IsMember({"std_dev", "variance"}))
      ->capture_default_str();
  cmd->add_option("--sharing", m.sharing, "Routing matrices per (input, output) pair or per input capsule")
      ->check(CLI::IsMember({"per_pair", "per_input"}))
      ->capture_default_str();
  cmd->add_option("--mean", m.mean, "Per-channel normalization mean")->expected(3)->capture_default_str();
  cmd->add_option("--std", m.std, "Per-channel normalization std")->expected(3)->capture_default_str();
}

ModelConfig to_model_config(const ModelFlags& f) {
  ModelConfig c;
  c.extractor = parse_extractor_kind(f.extractor);
  if (c.extractor == ExtractorKind::vgg19_front && f.vgg_weights.empty())
    throw UsageError("--extractor vgg19_front requires --vgg-weights");
  if (c.extractor == ExtractorKind::toy && !f.vgg_weights.empty())
    throw UsageError("--vgg-weights given but --extractor is toy");
  c.toy_channels = f.toy_channels;
  c.routing.iterations = f.iterations;
  c.routing.noise_sigma = f.noise_sigma;
  c.routing.noise_scale = f.noise_scale == "variance" ? NoiseScale::variance : NoiseScale::std_dev;
  c.routing.validate();
  c.capsnet.sharing = parse_sharing(f.sharing);
  for (std::size_t k = 0; k < 3; ++k) {
    c.mean[k] = f.mean[k];
    c.std[k] = f.std[k];
  }
  return c;
}

// TOML section that `capsf --config FILE <command>` reads back.
void print_resolved(const CLI::App& cmd) {
  std::cout << "# resolved config\n[" << cmd.get_name() << "]\n";
  std::string text = cmd.config_to_str(true, false);
  std::cout << text;
  if (!text.empty() && text.back() != '\n') std::cout << '\n';
  std::cout << "# end config\n";
}

std::vector<Sample> select_split(const Manifest& m, const std::string& split) {
  return m.split(parse_split(split));
}

std::string fmt(double v, int precision = 6) {
  std::ostringstream o;
  o.setf(std::ios::fixed);
  o.precision(precision);
  o << v;
  return o.str();
}

template <typename T>
int run_train(const Options& o) {
  const Manifest manifest = Manifest::load(o.manifest);
  const auto train_samples = manifest.split(Split::train);
  require_both_classes(train_samples, "train");
  const ModelConfig mc = to_model_config(o.model);
  std::optional<WeightArchive> vgg;
  if (!o.model.vgg_weights.empty()) vgg = load_archive(o.model.vgg_weights);
  Rng init = Rng::stream(o.seed, "init");
  auto model = ForensicsModel<T>::create(mc, init, vgg ? &*vgg : nullptr);
  std::cout << "parameters: total=" << model.parameter_count() << " frozen=" << model.frozen_parameter_count()
            << " trainable=" << model.trainable_parameter_count() << '\n';

  const auto data = extract_features(model, train_samples, o.threads);
  std::cout << "train samples: " << data.size() << '\n';

  TrainConfig tc;
  tc.epochs = o.epochs;
  tc.batch_size = o.batch_size;
  tc.adam = {o.lr, o.beta1, o.beta2, o.adam_eps};
  tc.seed = o.seed;
  tc.checkpoint_every = o.checkpoint_every;
  tc.checkpoint_path = o.out;
  tc.stop_at_train_accuracy = o.stop_at_accuracy;

  std::ofstream curve;
  if (!o.curve.empty()) {
    curve.open(o.curve);
    if (!curve) throw DataError("cannot write " + o.curve);
    curve << "epoch,loss,train_accuracy\n";
    curve.precision(17);
  }
  const auto result = train(model, data, tc, [&](const EpochRecord& r) {
    std::cout << "epoch " << r.epoch << " loss=" << fmt(r.loss);
    if (r.train_accuracy) std::cout << " train_accuracy=" << fmt(*r.train_accuracy, 4);
    std::cout << std::endl;
    if (curve.is_open()) curve << r.epoch << ',' << r.loss << ',' << (r.train_accuracy ? *r.train_accuracy : -1.0) << '\n';
  });

  std::map<std::string, std::string> meta{
      {"train.seed", std::to_string(o.seed)},
      {"train.epochs_run", std::to_string(result.epochs_run)},
      {"train.batch_size", std::to_string(o.batch_size)},
      {"train.optimizer", "adam"},
      {"train.lr", detail::fmt_double(o.lr)},
      {"train.beta1", detail::fmt_double(o.beta1)},
      {"train.beta2", detail::fmt_double(o.beta2)},
      {"train.adam_eps", detail::fmt_double(o.adam_eps)},
  };
  model.save(o.out, meta);
  std::cout << "epochs_run=" << result.epochs_run << (result.stopped_early ? " (stopped early)" : "") << '\n';
  std::cout << "checkpoint=" << o.out << '\n';
  return 0;
}

template <typename T>
int run_eval(const Options& o) {
  const auto model = ForensicsModel<T>::load(o.checkpoint);
  const Manifest manifest = Manifest::load(o.manifest);
  const auto samples = select_split(manifest, o.split);
  if (samples.empty()) throw DataError(o.split + " split is empty");
  const auto data = extract_features(model, samples, o.threads);
  const auto out = evaluate(model, data, o.threshold, true, o.max_frames, o.threads);
  std::cout << out.frames.table();
  if (out.groups) std::cout << out.groups->table();
  std::string kv = out.frames.key_values("frame.");
  if (out.groups) kv += out.groups->key_values("group.");
  std::cout << kv;
  if (!o.report.empty()) {
    std::ofstream f(o.report);
    if (!f) throw DataError("cannot write " + o.report);
    f << kv;
  }
  return 0;
}

template <typename T>
int run_predict(const Options& o) {
  const auto model = ForensicsModel<T>::load(o.checkpoint);
  const auto& cfg = model.config();
  std::cout << "path,y_hat,label\n";
  for (const auto& in : o.inputs) {
    const auto x = model.features(preprocess<T>(read_image(in), cfg.mean, cfg.std, kInputSize));
    const double y = static_cast<double>(model.forward(x, model.routing(Mode::eval), nullptr).y_hat.item());
    std::cout << in << ',' << fmt(y, 6) << ',' << (classified_fake(y, o.threshold) ? "fake" : "real") << '\n';
  }
  return 0;
}

template <typename T>
int run_inspect(const Options& o) {
  const auto model = ForensicsModel<T>::load(o.checkpoint);
  const Manifest manifest = Manifest::load(o.manifest);
  auto samples = select_split(manifest, o.split);
  if (o.limit > 0 && samples.size() > o.limit) samples.resize(o.limit);
  if (samples.empty()) throw DataError(o.split + " split is empty");
  const auto data = extract_features(model, samples, o.threads);
  const std::size_t I = model.config().capsnet.primary_capsules, J = model.config().capsnet.output_capsules;
  struct Acc {
    std::size_t count = 0;
    std::vector<double> u_norm, v_norm, coupling, y;
  };
  std::map<int, Acc> acc;
  const RoutingConfig routing = model.routing(Mode::eval);
  if (o.per_sample) std::cout << "path,label,y_hat,|u_i|...,|v_j|...\n";
  for (std::size_t s = 0; s < data.size(); ++s) {
    const auto out = model.forward(data.features[s], routing, nullptr);
    auto& a = acc[data.labels[s]];
    if (a.count == 0) {
      a.u_norm.assign(I, 0.0);
      a.v_norm.assign(J, 0.0);
      a.coupling.assign(I * J, 0.0);
    }
    ++a.count;
    const std::size_t n = out.u.dim(2), m = out.routing.v.dim(2);
    std::vector<double> un(I), vn(J);
    for (std::size_t i = 0; i < I; ++i) {
      double q = 0;
      for (std::size_t k = 0; k < n; ++k) q += std::pow(static_cast<double>(out.u[i * n + k]), 2);
      un[i] = std::sqrt(q);
      a.u_norm[i] += un[i];
    }
    for (std::size_t j = 0; j < J; ++j) {
      double q = 0;
      for (std::size_t k = 0; k < m; ++k) q += std::pow(static_cast<double>(out.routing.v[j * m + k]), 2);
      vn[j] = std::sqrt(q);
      a.v_norm[j] += vn[j];
    }
    const auto& c = out.routing.couplings.back();
    for (std::size_t k = 0; k < I * J; ++k) a.coupling[k] += static_cast<double>(c[k]);
    if (o.per_sample) {
      std::cout << data.paths[s] << ',' << data.labels[s] << ',' << fmt(static_cast<double>(out.y_hat.item()));
      for (double x : un) std::cout << ',' << fmt(x);
      for (double x : vn) std::cout << ',' << fmt(x);
      std::cout << '\n';
    }
  }
  for (const auto& [label, a] : acc) {
    const double cnt = static_cast<double>(a.count);
    std::cout << "class " << (label ? "fake" : "real") << " (" << a.count << " samples)\n";
    for (std::size_t i = 0; i < I; ++i) {
      std::cout << "  primary capsule " << i << ": mean |u| = " << fmt(a.u_norm[i] / cnt) << "  couplings (real, fake) =";
      for (std::size_t j = 0; j < J; ++j) std::cout << ' ' << fmt(a.coupling[i * J + j] / cnt);
      std::cout << '\n';
    }
    for (std::size_t j = 0; j < J; ++j)
      std::cout << "  output capsule " << (j == 0 ? "real" : "fake") << ": mean |v| = " << fmt(a.v_norm[j] / cnt) << '\n';
  }
  return 0;
}

int run_gradcheck(const Options& o) {
  GradcheckConfig gc;
  gc.seed = o.seed;
  gc.step = o.step;
  gc.floor = o.floor;
  gc.tolerance = o.tolerance;
  const auto r = gradcheck(gc);
  std::cout.precision(6);
  std::cout << "checked=" << r.checked << '\n'
            << "max_relative_error=" << std::scientific << r.max_relative_error << '\n'
            << "worst=" << r.worst_parameter << '[' << r.worst_index << "] analytic=" << r.analytic
            << " numeric=" << r.numeric << '\n'
            << "max_central_error=" << r.max_central_error << '\n'
            << std::defaultfloat << "fallback_stencils=" << r.one_sided << '\n'
            << "seconds=" << fmt(r.seconds, 2) << '\n';
  const bool ok = r.max_relative_error <= o.tolerance;
  std::cout << (ok ? "PASS" : "FAIL") << " (tolerance " << o.tolerance << ")\n";
  return ok ? 0 : 3;
}

int run_make_synthetic(const Options& o) {
  SyntheticConfig cfg = o.synthetic;
  cfg.seed = o.seed;
  const auto m = make_synthetic(o.out, cfg);
  std::cout << "wrote " << m.size() << " images and manifest.csv to " << o.out << '\n';
  return 0;
}

template <typename F>
int dispatch_precision(const std::string& precision, F&& f) {
  if (precision == "f32") return f(float{});
  return f(double{});
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Capsule-network forgery detector"};
  app.set_config("--config", "", "Read options from a TOML/INI file");
  app.require_subcommand(1);
  Options o;

  auto common = [&](CLI::App* cmd) {
    cmd->add_option("--seed", o.seed, "Seed for all random streams")->capture_default_str();
    cmd->add_option("--threads", o.threads, "Worker threads for decoding and evaluation")
        ->check(CLI::PositiveNumber)
        ->capture_default_str();
  };
  auto precision = [&](CLI::App* cmd) {
    cmd->add_option("--precision", o.precision, "Floating-point width")
        ->check(CLI::IsMember({"f32", "f64"}))
        ->capture_default_str();
  };

  auto* train_cmd = app.add_subcommand("train", "Train the capsule network on a manifest's train split");
  common(train_cmd);
  precision(train_cmd);
  add_model_flags(train_cmd, o.model);
  train_cmd->add_option("--manifest", o.manifest, "Manifest CSV")->required()->check(CLI::ExistingFile);
  train_cmd->add_option("--out", o.out, "Checkpoint to write")->required();
  train_cmd->add_option("--epochs", o.epochs)->capture_default_str();
  train_cmd->add_option("--batch-size", o.batch_size)->capture_default_str();
  train_cmd->add_option("--lr", o.lr)->capture_default_str();
  train_cmd->add_option("--beta1", o.beta1)->capture_default_str();
  train_cmd->add_option("--beta2", o.beta2)->capture_default_str();
  train_cmd->add_option("--adam-eps", o.adam_eps)->capture_default_str();
  train_cmd->add_option("--checkpoint-every", o.checkpoint_every, "Also save every N epochs (0: only at the end)")
      ->capture_default_str();
  train_cmd->add_option("--stop-at-accuracy", o.stop_at_accuracy, "Stop once train accuracy reaches this value");
  train_cmd->add_option("--curve", o.curve, "Write the loss curve as CSV");

  auto checkpoint_opt = [&](CLI::App* cmd) {
    cmd->add_option("--checkpoint", o.checkpoint, "Trained checkpoint");
  };

  auto* eval_cmd = app.add_subcommand("eval", "Frame- and group-level FRR/FAR/HTER/accuracy");
  common(eval_cmd);
  precision(eval_cmd);
  checkpoint_opt(eval_cmd);
  eval_cmd->add_option("--manifest", o.manifest, "Manifest CSV")->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--split", o.split)->check(CLI::IsMember({"train", "val", "test"}))->capture_default_str();
  eval_cmd->add_option("--threshold", o.threshold, "Items with y_hat >= threshold are classified fake")
      ->capture_default_str();
  eval_cmd->add_option("--max-frames", o.max_frames, "Use only the first N frames of each group");
  eval_cmd->add_option("--report", o.report, "Also write key=value results to this file");

  auto* predict_cmd = app.add_subcommand("predict", "Fake probability for individual images");
  common(predict_cmd);
  precision(predict_cmd);
  checkpoint_opt(predict_cmd);
  predict_cmd->add_option("--input", o.inputs, "Image file(s)")->required()->check(CLI::ExistingFile);
  predict_cmd->add_option("--threshold", o.threshold)->capture_default_str();

  auto* inspect_cmd = app.add_subcommand("inspect", "Per-class capsule activation summaries");
  common(inspect_cmd);
  precision(inspect_cmd);
  checkpoint_opt(inspect_cmd);
  inspect_cmd->add_option("--manifest", o.manifest, "Manifest CSV")->required()->check(CLI::ExistingFile);
  inspect_cmd->add_option("--split", o.split)->check(CLI::IsMember({"train", "val", "test"}))->capture_default_str();
  inspect_cmd->add_option("--limit", o.limit, "Inspect at most N samples (0: all)")->capture_default_str();
  inspect_cmd->add_flag("--per-sample", o.per_sample, "Print one line per sample");

  auto* grad_cmd = app.add_subcommand("gradcheck", "Finite-difference check of all trainable gradients");
  grad_cmd->add_option("--seed", o.seed)->capture_default_str();
  grad_cmd->add_option("--step", o.step, "Central-difference step")->capture_default_str();
  grad_cmd->add_option("--floor", o.floor, "Relative-error denominator floor")->capture_default_str();
  grad_cmd->add_option("--tolerance", o.tolerance)->capture_default_str();

  auto* synth_cmd = app.add_subcommand("make-synthetic", "Write a synthetic two-class image set");
  synth_cmd->add_option("--seed", o.seed)->capture_default_str();
  synth_cmd->add_option("--out", o.out, "Output directory")->required();
  synth_cmd->add_option("--train", o.synthetic.train)->capture_default_str();
  synth_cmd->add_option("--val", o.synthetic.val)->capture_default_str();
  synth_cmd->add_option("--test", o.synthetic.test)->capture_default_str();
  synth_cmd->add_option("--frames-per-group", o.synthetic.frames_per_group)->capture_default_str();
  synth_cmd->add_option("--size", o.synthetic.size, "Image side length")->capture_default_str();
  synth_cmd->add_option("--noise-amplitude", o.synthetic.noise_amplitude)->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  CLI::App* cmd = app.get_subcommands().front();
  print_resolved(*cmd);

  try {
    const std::string name = cmd->get_name();
    if ((name == "eval" || name == "predict" || name == "inspect") && o.checkpoint.empty())
      throw UsageError("checkpoint required (--checkpoint)");
    if (name == "train")
      return dispatch_precision(o.precision, [&](auto t) { return run_train<decltype(t)>(o); });
    if (name == "eval")
      return dispatch_precision(o.precision, [&](auto t) { return run_eval<decltype(t)>(o); });
    if (name == "predict")
      return dispatch_precision(o.precision, [&](auto t) { return run_predict<decltype(t)>(o); });
    if (name == "inspect")
      return dispatch_precision(o.precision, [&](auto t) { return run_inspect<decltype(t)>(o); });
    if (name == "gradcheck") return run_gradcheck(o);
    if (name == "make-synthetic") return run_make_synthetic(o);
    throw UsageError("unknown command " + name);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const DataError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const NumericalError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 3;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
}
