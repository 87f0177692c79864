#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "edm/autoencoder.hpp"
#include "edm/checkpoint.hpp"
#include "edm/core_grid.hpp"
#include "edm/error.hpp"
#include "edm/evaluation.hpp"
#include "edm/forecast.hpp"
#include "edm/hash.hpp"
#include "edm/parallel.hpp"
#include "edm/sampler.hpp"
#include "edm/toy_data.hpp"
#include "edm/training.hpp"
#include "run_config.hpp"

namespace fs = std::filesystem;
using namespace edm;
using cli::UserError;

namespace {

/// Sampler flags shared by sample, rollout, evaluate and gridsearch.
struct SamplerOptions {
  int num_steps = 36;
  double sigma_max = 80.0;
  double sigma_min = 0.002;
  double rho = 7.0;
  double s_churn = 0.0;
  double s_churn_raw = -1.0;
  double s_noise = 1.0;
  double s_tmin = 0.0;
  double s_tmax = 1e30;
  bool second_order = false;

  void add(CLI::App& app) {
    app.add_option("--num-steps", num_steps, "Sampler steps")->capture_default_str();
    app.add_option("--sigma-max", sigma_max, "Initial noise level")->capture_default_str();
    app.add_option("--sigma-min", sigma_min, "Smallest non-zero noise level")->capture_default_str();
    app.add_option("--rho", rho, "Schedule exponent")->capture_default_str();
    app.add_option("--s-churn", s_churn, "Per-step churn gamma in [0, sqrt(2)-1]")->capture_default_str();
    app.add_option("--s-churn-raw", s_churn_raw,
                   "Total churn budget; per-step gamma = min(raw / num_steps, sqrt(2)-1). Overrides --s-churn")
        ->capture_default_str();
    app.add_option("--s-noise", s_noise, "Churn noise scale")->capture_default_str();
    app.add_option("--s-tmin", s_tmin, "Lower edge of the churn band")->capture_default_str();
    app.add_option("--s-tmax", s_tmax, "Upper edge of the churn band")->capture_default_str();
    app.add_flag("--second-order", second_order, "Heun correction on every step");
  }

  SampleConfig config(std::uint64_t seed) const {
    SampleConfig c;
    c.num_steps = num_steps;
    c.sigma_max = sigma_max;
    c.sigma_min = sigma_min;
    c.rho = rho;
    c.s_churn = s_churn_raw >= 0.0 ? churn_gamma_from_raw(s_churn_raw, num_steps) : s_churn;
    c.s_noise = s_noise;
    c.s_tmin = s_tmin;
    c.s_tmax = s_tmax;
    c.seed = seed;
    c.second_order = second_order;
    c.validate();
    return c;
  }
};

std::vector<int> parse_int_list(const std::string& s, const char* what) {
  std::vector<int> out;
  for (const auto& part : CLI::detail::split(s, ',')) {
    try {
      out.push_back(std::stoi(part));
    } catch (const std::exception&) {
      throw UserError(std::string("bad integer '") + part + "' in " + what);
    }
  }
  return out;
}

std::vector<double> parse_double_list(const std::string& s, const char* what) {
  std::vector<double> out;
  for (const auto& part : CLI::detail::split(s, ',')) {
    try {
      out.push_back(std::stod(part));
    } catch (const std::exception&) {
      throw UserError(std::string("bad number '") + part + "' in " + what);
    }
  }
  return out;
}

/// Collects output files for run.json.
class RunRecord {
 public:
  RunRecord(fs::path out, std::string command) : out_(std::move(out)), command_(std::move(command)) {
    fs::create_directories(out_);
  }

  fs::path path(const std::string& name) const { return out_ / name; }
  void add(const fs::path& p) { files_.push_back(p); }
  nlohmann::json& extra() { return extra_; }

  void finish(const CLI::App& sub) {
    const auto opts = cli::resolved_options(sub);
    const fs::path resolved = out_ / "resolved.cfg";
    cli::write_resolved_config(resolved, command_, opts);
    nlohmann::json j;
    j["command"] = command_;
    j["config"] = opts;
    std::string canon;
    for (const auto& [k, v] : opts) {
      if (k != "out") canon += k + "=" + v + ";";
    }
    j["config_hash"] = hex64(fnv1a64(canon));
    j["results"] = extra_;
    nlohmann::json outs = nlohmann::json::array();
    files_.push_back(resolved);
    for (const auto& f : files_) {
      const cli::OutputRecord r = cli::record_output(out_, f);
      outs.push_back({{"path", r.path}, {"size", r.size}, {"fnv1a64", r.fnv1a64}});
    }
    j["outputs"] = outs;
    std::ofstream o(out_ / "run.json");
    o << j.dump(2) << '\n';
  }

 private:
  fs::path out_;
  std::string command_;
  std::vector<fs::path> files_;
  nlohmann::json extra_ = nlohmann::json::object();
};

void write_curve(const fs::path& path, const std::vector<EpochLoss>& curve) {
  std::ofstream out(path);
  out.precision(9);
  out << "epoch,train_loss,val_loss\n";
  for (const auto& e : curve) out << e.epoch << ',' << e.train_loss << ',' << e.val_loss << '\n';
}

std::vector<FieldBatch> normalized_sequences(const LoadedDataset& d) {
  return normalize_sequences(d.sequences, d.manifest.stats);
}

fs::path relative_to(const fs::path& target, const fs::path& dir) {
  return fs::relative(fs::absolute(target), fs::absolute(dir));
}

// ---------------------------------------------------------------- make-data

struct MakeDataOptions {
  std::string out;
  std::size_t train = 2000, val = 200, test = 200;
  int train_length = 3, eval_length = 20;
  int grid = 64;
  std::uint64_t seed = 0;
  std::string velocity = "random";
  double vx = 1.0, vy = 0.0, max_speed = 1.5, angular = 0.02;
  double spawn_rate = 0.2, min_rate = -0.05, max_rate = 0.05;
  double min_cloud = 0.1, threshold = 273.0;
};

void run_make_data(const MakeDataOptions& o, const CLI::App& sub) {
  BlobWorldConfig cfg;
  cfg.grid = o.grid;
  cfg.seed = o.seed;
  cfg.velocity = velocity_kind_from_string(o.velocity);
  cfg.velocity_x = o.vx;
  cfg.velocity_y = o.vy;
  cfg.max_speed = o.max_speed;
  cfg.angular_speed = o.angular;
  cfg.spawn_rate = o.spawn_rate;
  cfg.min_rate = o.min_rate;
  cfg.max_rate = o.max_rate;
  PatchFilter filter;
  filter.min_cloud_fraction = o.min_cloud;
  filter.cloud_threshold = o.threshold;
  if (o.train == 0) throw UserError("--train-count must be at least 1");
  std::vector<SplitSpec> splits{{Split::kTrain, o.train, o.train_length}};
  if (o.val > 0) splits.push_back({Split::kVal, o.val, o.eval_length});
  if (o.test > 0) splits.push_back({Split::kTest, o.test, o.eval_length});
  RunRecord rec(o.out, "make-data");
  const BuiltDataset built = build_dataset(cfg, filter, splits, o.out);
  for (std::size_t i = 0; i < built.paths.size(); ++i) {
    rec.add(built.paths[i].manifest);
    rec.add(built.paths[i].tensor);
    rec.extra()[std::string(to_string(built.manifests[i].split))] = {
        {"count", built.manifests[i].count}, {"rejected_fraction", built.manifests[i].rejected_fraction}};
    std::cout << to_string(built.manifests[i].split) << ": " << built.manifests[i].count << " sequences, rejected "
              << built.manifests[i].rejected_fraction << '\n';
  }
  rec.finish(sub);
}

// ---------------------------------------------------------------- train

struct TrainOptions {
  std::string task = "cond";
  std::string data;
  std::string out;
  std::string baseline;
  std::string autoencoder;
  int epochs = 10, batch_size = 16, accumulation = 1, patience = 10, window = 2;
  double val_fraction = 0.2, lr = 1e-3, time_budget = 0.0, sigma_data = 1.0;
  std::string weighting = "edm";
  std::string sigma_dist = "lognormal";
  double p_mean = -1.2, p_std = 1.2;
  std::uint64_t seed = 0;
  std::string widths = "16,32,64";
  int depth = 2;
  std::string activation = "silu";
  int compression = 2, latent_channels = 4, ae_width = 16;
  bool linear = false, variational = false;
  double kl_weight = 1e-3;
  std::size_t max_samples = 0;
};

TrainConfig train_config(const TrainOptions& o) {
  TrainConfig c;
  c.epochs = o.epochs;
  c.batch_size = o.batch_size;
  c.accumulation = o.accumulation;
  c.weighting = loss_weighting_from_string(o.weighting);
  c.patience = o.patience;
  c.val_fraction = o.val_fraction;
  c.seed = o.seed;
  c.adam.lr = o.lr;
  c.sigma_dist.kind = sigma_dist_from_string(o.sigma_dist);
  c.sigma_dist.loc = o.p_mean;
  c.sigma_dist.scale = o.p_std;
  c.precond.sigma_data = o.sigma_data;
  c.time_budget_seconds = o.time_budget;
  c.validate();
  return c;
}

ConvNetSpec net_spec(const TrainOptions& o) {
  ConvNetSpec s;
  s.widths = parse_int_list(o.widths, "--widths");
  s.depth = o.depth;
  s.activation = activation_from_string(o.activation);
  s.seed = o.seed;
  return s;
}

void run_train(const TrainOptions& o, const CLI::App& sub) {
  const LoadedDataset data = load_dataset(o.data);
  std::vector<FieldBatch> seqs = normalized_sequences(data);
  if (o.max_samples > 0 && seqs.size() > o.max_samples) seqs.resize(o.max_samples);
  const TrainConfig cfg = train_config(o);
  RunRecord rec(o.out, "train");
  const fs::path model_path = rec.path("model.json");
  const auto progress = [](const EpochLoss& e) {
    std::cout << "epoch " << e.epoch << " train " << e.train_loss << " val " << e.val_loss << std::endl;
  };

  Checkpoint ck;
  ck.data_stats = data.manifest.stats;
  ck.window = o.window;
  ck.precond = cfg.precond;
  TrainResult result;

  if (o.task == "autoencoder") {
    std::vector<Field> frames;
    for (const auto& s : seqs) frames.insert(frames.end(), s.begin(), s.end());
    AutoencoderSpec spec;
    spec.compression = o.compression;
    spec.latent_channels = o.latent_channels;
    spec.width = o.ae_width;
    spec.linear = o.linear;
    spec.variational = o.variational;
    spec.kl_weight = o.kl_weight;
    spec.seed = o.seed;
    AutoencoderTrainResult r = train_autoencoder(frames, spec, cfg, progress);
    ck.kind = ModelKind::kAutoencoder;
    ck.autoencoder = spec;
    ck.latent_stats = r.model->latent_stats();
    ck.params = r.model->params();
    result = std::move(r.train);
  } else if (o.task == "baseline") {
    const std::vector<TrainingPair> pairs = make_pairs(seqs, o.window);
    result = train_baseline(pairs, cfg, net_spec(o), progress);
    ck.kind = ModelKind::kBaseline;
    ck.net = net_spec(o);
    ck.net.in_channels = o.window * pairs.front().target.channels();
    ck.net.out_channels = pairs.front().target.channels();
    ck.net.noise_embedding = false;
    ck.params = result.params.values;
  } else if (o.task == "uncond" || o.task == "cond" || o.task == "corrdiff" || o.task == "latent") {
    TrainTask task;
    task.kind = o.task == "uncond"     ? TaskKind::kUnconditional
                : o.task == "corrdiff" ? TaskKind::kCorrDiffResidual
                                       : TaskKind::kConditional;
    std::vector<FieldBatch> train_seqs = seqs;
    if (o.task == "latent") {
      if (o.autoencoder.empty()) throw UserError("--task latent requires --autoencoder");
      const Checkpoint ae_ck = load_checkpoint(o.autoencoder);
      const auto ae = build_autoencoder(ae_ck);
      for (auto& s : train_seqs)
        for (auto& f : s) f = ae->encode(f);
      ck.latent = true;
      ck.autoencoder_path = relative_to(o.autoencoder, o.out).string();
    }
    if (task.kind == TaskKind::kCorrDiffResidual) {
      if (o.baseline.empty()) throw UserError("--task corrdiff requires --baseline");
      task.baseline = build_baseline(load_checkpoint(o.baseline));
      ck.baseline_path = relative_to(o.baseline, o.out).string();
    }
    const std::vector<TrainingPair> pairs = make_pairs(train_seqs, o.window);
    task.target_channels = pairs.front().target.channels();
    task.condition_channels = o.window * task.target_channels;
    const ConvNetSpec spec = diffusion_net_spec(task, net_spec(o));
    DiffusionTrainResult r = train_diffusion(pairs, task, cfg, spec, progress);
    ck.kind = ModelKind::kDiffusion;
    ck.task = task.kind;
    ck.net = spec;
    ck.residual_stats = r.residual_stats;
    ck.params = r.train.params.values;
    result = std::move(r.train);
  } else {
    throw UserError("unknown task '" + o.task + "' (uncond, cond, corrdiff, baseline, autoencoder, latent)");
  }

  save_checkpoint(model_path, ck);
  write_curve(rec.path("loss_curve.csv"), result.curve);
  rec.add(model_path);
  rec.add(rec.path("model.params.edmt"));
  rec.add(rec.path("loss_curve.csv"));
  rec.extra()["best_epoch"] = result.best_epoch;
  rec.extra()["stopped_early"] = result.stopped_early;
  rec.extra()["hit_time_budget"] = result.hit_time_budget;
  rec.finish(sub);
}

// ---------------------------------------------------------------- model loading

struct LoadedModel {
  std::shared_ptr<const Forecaster> forecaster;
  std::shared_ptr<const Denoiser> denoiser;  // set for unconditional diffusion
  std::optional<NormStats> stats;
  int window = 2;
  bool unconditional = false;
  std::string name;
};

LoadedModel load_model(const std::string& spec, const SampleConfig& scfg) {
  LoadedModel m;
  if (spec == "persistence") {
    m.forecaster = std::make_shared<PersistenceForecaster>();
    m.name = "persistence";
    return m;
  }
  const fs::path path(spec);
  const Checkpoint ck = load_checkpoint(path);
  m.stats = ck.data_stats;
  m.window = ck.window;
  const fs::path dir = path.parent_path();
  switch (ck.kind) {
    case ModelKind::kBaseline:
      m.forecaster = std::make_shared<BaselineForecaster>(build_baseline(ck));
      m.name = "baseline";
      break;
    case ModelKind::kAutoencoder:
      throw UserError(spec + " is an autoencoder, not a forecast model");
    case ModelKind::kDiffusion: {
      const auto den = build_denoiser(ck);
      if (ck.latent) {
        auto ae = build_autoencoder(load_checkpoint(dir / ck.autoencoder_path));
        m.forecaster = std::make_shared<LatentForecaster>(den, ae, scfg);
        m.name = "latent";
      } else if (ck.task == TaskKind::kCorrDiffResidual) {
        if (!ck.residual_stats) throw FormatError(spec + ": corrdiff checkpoint without residual statistics");
        auto base = build_baseline(load_checkpoint(dir / ck.baseline_path));
        m.forecaster = std::make_shared<CorrDiffForecaster>(
            base, std::make_shared<DiffusionResidual>(den, scfg, *ck.residual_stats));
        m.name = "corrdiff";
      } else if (ck.task == TaskKind::kUnconditional) {
        m.unconditional = true;
        m.denoiser = den;
        m.name = "uncond";
      } else {
        m.forecaster = std::make_shared<DiffusionForecaster>(den, scfg);
        m.name = "diffusion";
      }
      break;
    }
  }
  return m;
}

/// Frames of a condition/init tensor: [F,H,W] or [1,F,H,W] (kelvin).
FieldBatch read_frames(const std::string& path) {
  const Tensor t = read_tensor_file(path);
  if (t.dims.size() == 3) {
    Tensor t4 = t;
    t4.dims.insert(t4.dims.begin(), 1);
    return sequences_from_tensor(t4, Units::kKelvin).front();
  }
  if (t.dims.size() == 4) {
    if (t.dims[0] != 1) throw UserError(path + ": expected a single sequence [1, F, H, W]");
    return sequences_from_tensor(t, Units::kKelvin).front();
  }
  throw UserError(path + ": expected a rank-3 or rank-4 tensor of frames");
}

NormStats require_stats(const LoadedModel& m, const std::string& data) {
  if (m.stats) return *m.stats;
  if (!data.empty()) return read_manifest(data).stats;
  throw UserError("normalization statistics unavailable: pass --data <manifest>");
}

// ---------------------------------------------------------------- sample

struct SampleOptions {
  std::string checkpoint;
  std::string condition;
  std::string data;
  std::string out;
  std::uint64_t seed = 0;
  int members = 1;
  int size = 64;
  bool trajectory = false;
  SamplerOptions sampler;
};

void run_sample(const SampleOptions& o, const CLI::App& sub) {
  const SampleConfig scfg = o.sampler.config(o.seed);
  const LoadedModel m = load_model(o.checkpoint, scfg);
  const NormStats stats = require_stats(m, o.data);
  RunRecord rec(o.out, "sample");
  std::vector<Field> outputs(o.members);
  std::vector<Trajectory> trajs(o.members);
  FieldBatch cond;
  Shape shape{1, o.size, o.size};
  if (!m.unconditional) {
    if (o.condition.empty()) throw UserError("--condition is required for conditional models");
    const FieldBatch frames = read_frames(o.condition);
    if (frames.size() < static_cast<std::size_t>(m.window))
      throw UserError("condition holds " + std::to_string(frames.size()) + " frames, model needs " +
                      std::to_string(m.window));
    for (std::size_t i = frames.size() - m.window; i < frames.size(); ++i) cond.push_back(normalize(frames[i], stats));
    shape = cond.back().shape();
  }
  parallel_for(static_cast<std::size_t>(o.members), [&](std::size_t k) {
    const std::uint64_t s = member_seed(o.seed, static_cast<int>(k));
    if (m.unconditional) {
      SampleConfig c = scfg;
      c.seed = s;
      outputs[k] = generate(*m.denoiser, {}, c, shape, Units::kNormalized, o.trajectory ? &trajs[k] : nullptr);
    } else if (o.trajectory && m.name == "diffusion") {
      const auto* df = dynamic_cast<const DiffusionForecaster*>(m.forecaster.get());
      (void)df;
      const Checkpoint ck = load_checkpoint(o.checkpoint);
      SampleConfig c = scfg;
      c.seed = lead_seed(s, 0);
      outputs[k] = generate(*build_denoiser(ck), cond, c, shape, Units::kNormalized, &trajs[k]);
    } else {
      outputs[k] = m.forecaster->step(cond, lead_seed(s, 0));
    }
    outputs[k] = denormalize(outputs[k], stats);
  });
  write_tensor_file(rec.path("samples.edmt"), to_tensor(outputs));
  rec.add(rec.path("samples.edmt"));
  if (o.trajectory) {
    for (int k = 0; k < o.members; ++k) {
      if (trajs[k].points.empty()) continue;
      const std::size_t plane = trajs[k].points.front().snapshot.size();
      trajs[k].trace_pixels = {0, plane / 4, plane / 2 + shape.width / 2, plane - 1};
      const fs::path p = rec.path("trajectory_" + std::to_string(k) + ".csv");
      trajs[k].write_csv(p);
      rec.add(p);
    }
  }
  rec.extra()["effective_s_churn"] = scfg.s_churn;
  rec.finish(sub);
}

// ---------------------------------------------------------------- rollout

struct RolloutOptions {
  std::string model;
  std::string init;
  std::string data;
  std::size_t index = 0;
  std::string out;
  int leads = 18, members = 10, first_member = 0;
  std::uint64_t seed = 0;
  bool clamp = false;
  SamplerOptions sampler;
};

void run_rollout(const RolloutOptions& o, const CLI::App& sub) {
  const SampleConfig scfg = o.sampler.config(o.seed);
  const LoadedModel m = load_model(o.model, scfg);
  if (m.unconditional) throw UserError("unconditional models cannot roll out");
  const NormStats stats = require_stats(m, o.data);
  FieldBatch frames;
  std::string tag;
  if (!o.init.empty()) {
    frames = read_frames(o.init);
    tag = fs::path(o.init).filename().string();
  } else if (!o.data.empty()) {
    const LoadedDataset d = load_dataset(o.data);
    if (o.index >= d.sequences.size()) throw UserError("--index out of range");
    frames = d.sequences[o.index];
    tag = fs::path(o.data).filename().string() + "#" + std::to_string(o.index);
  } else {
    throw UserError("rollout needs --init <tensor> or --data <manifest>");
  }
  if (frames.size() < static_cast<std::size_t>(m.window)) throw UserError("init holds too few frames");
  FieldBatch window;
  for (int i = 0; i < m.window; ++i) window.push_back(normalize(frames[i], stats));

  RolloutConfig rc;
  rc.leads = o.leads;
  rc.window = m.window;
  rc.members = o.members;
  rc.first_member = o.first_member;
  rc.base_seed = o.seed;
  if (o.clamp) {
    rc.clamp = true;
    rc.clamp_min = (kMinKelvin - stats.mean_for(0)) / stats.std_for(0);
    rc.clamp_max = (kMaxKelvin - stats.mean_for(0)) / stats.std_for(0);
  }
  EnsembleForecast e = ensemble(*m.forecaster, window, rc, tag);
  for (auto& mem : e.members)
    for (auto& f : mem) f = denormalize(f, stats);
  RunRecord rec(o.out, "rollout");
  write_ensemble(rec.path("rollout.edmt"), e);
  rec.add(rec.path("rollout.edmt"));
  rec.add(rec.path("rollout.edmt.json"));
  rec.extra()["config_hash"] = e.config_hash;
  rec.finish(sub);
}

// ---------------------------------------------------------------- evaluate

struct EvaluateOptions {
  std::string data;
  std::vector<std::string> models;
  std::string out;
  std::size_t count = 8;
  int leads = 18, members = 10;
  std::uint64_t seed = 0;
  double pixel_km = 2.0;
  bool pgm = true;
  bool no_factor = false;
  bool clamp = false;
  SamplerOptions sampler;
};

void run_evaluate(const EvaluateOptions& o, const CLI::App& sub) {
  const LoadedDataset d = load_dataset(o.data);
  const NormStats stats = d.manifest.stats;
  const std::size_t n = std::min(o.count, d.sequences.size());
  if (n == 0) throw UserError("no test sequences");
  const SampleConfig scfg = o.sampler.config(o.seed);

  std::vector<std::pair<std::string, std::string>> specs{{"persistence", "persistence"}};
  for (const auto& s : o.models) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) {
      specs.emplace_back(fs::path(s).parent_path().filename().string(), s);
    } else {
      specs.emplace_back(s.substr(0, eq), s.substr(eq + 1));
    }
  }

  RunRecord rec(o.out, "evaluate");
  std::vector<MetricsRow> rows;
  const fs::path spectrum_csv = rec.path("spectrum.csv");
  const fs::path ss_csv_dir = o.out;
  bool spectrum_written = false;
  const double frame_minutes = 10.0;

  for (const auto& [name, path] : specs) {
    const LoadedModel m = load_model(path, scfg);
    if (m.unconditional) throw UserError(name + " is unconditional and cannot forecast");
    const int window = m.window;
    if (d.manifest.frames_per_sample < window + 1) throw UserError("test sequences are too short");
    const int leads = std::min(o.leads, d.manifest.frames_per_sample - window);
    RolloutConfig rc;
    rc.leads = leads;
    rc.window = window;
    rc.members = o.members;
    rc.base_seed = o.seed;
    if (o.clamp) {
      rc.clamp = true;
      rc.clamp_min = (kMinKelvin - stats.mean_for(0)) / stats.std_for(0);
      rc.clamp_max = (kMaxKelvin - stats.mean_for(0)) / stats.std_for(0);
    }
    const bool stochastic = name != "persistence" && m.name != "baseline";
    if (!stochastic) rc.members = 1;

    std::vector<std::vector<Field>> truth(leads), first(leads), mean(leads);
    std::vector<EnsembleSample> ss;
    for (std::size_t i = 0; i < n; ++i) {
      const FieldBatch& seq = d.sequences[i];
      FieldBatch win;
      for (int w = 0; w < window; ++w) win.push_back(normalize(seq[w], stats));
      EnsembleForecast e = ensemble(*m.forecaster, win, rc, "test#" + std::to_string(i));
      for (auto& mem : e.members)
        for (auto& f : mem) f = denormalize(f, stats);
      const std::vector<Field> em = e.mean();
      for (int k = 0; k < leads; ++k) {
        truth[k].push_back(seq[window + k]);
        first[k].push_back(e.members.front()[k]);
        mean[k].push_back(em[k]);
        if (e.member_count() >= 2) {
          EnsembleSample s;
          for (const auto& mem : e.members) s.members.push_back(mem[k]);
          s.truth = seq[window + k];
          ss.push_back(std::move(s));
        }
      }
      if (i == 0 && o.pgm) {
        for (int k : {1, leads / 2, leads}) {
          if (k < 1) continue;
          const fs::path p = rec.path(name + "_lead" + std::to_string(k) + ".pgm");
          write_pgm(p, e.members.front()[k - 1], 200.0, 300.0, true);
          rec.add(p);
          if (&name == &specs.front().first) {
            const fs::path t = rec.path("truth_lead" + std::to_string(k) + ".pgm");
            write_pgm(t, seq[window + k - 1], 200.0, 300.0, true);
            rec.add(t);
          }
        }
      }
    }
    for (int k = 0; k < leads; ++k) {
      rows.push_back({name, frame_minutes * (k + 1), pixel_metrics(truth[k], first[k])});
      if (stochastic && o.members > 1)
        rows.push_back({name + "_ensmean", frame_minutes * (k + 1), pixel_metrics(truth[k], mean[k])});
    }
    for (int k : {1, leads}) {
      const auto fc = fractional_change(mean_radial_spectrum(first[k - 1], o.pixel_km),
                                        mean_radial_spectrum(truth[k - 1], o.pixel_km));
      write_spectrum_csv(spectrum_csv, name + "_lead" + std::to_string(k), fc, spectrum_written);
      spectrum_written = true;
    }
    if (!ss.empty()) {
      SpreadSkillOptions so;
      so.small_ensemble_factor = !o.no_factor;
      const SpreadSkillCurve c = spread_skill(ss, so);
      const fs::path p = rec.path("spread_skill_" + name + ".csv");
      write_spread_skill_csv(p, c);
      rec.add(p);
      rec.extra()["spread_skill_ratio"][name] = c.ratio;
    }
    std::cout << name << ": lead-1 RMSE " << rows[rows.size() - (stochastic && o.members > 1 ? 2 : 1) * leads].metrics.rmse
              << " K\n";
  }
  write_metrics_csv(rec.path("metrics.csv"), rows);
  rec.add(rec.path("metrics.csv"));
  rec.add(spectrum_csv);
  rec.finish(sub);
}

// ---------------------------------------------------------------- evaluate-ae

struct EvaluateAeOptions {
  std::string data;
  std::vector<std::string> autoencoders;
  std::string out;
  std::size_t count = 0;
};

void run_evaluate_ae(const EvaluateAeOptions& o, const CLI::App& sub) {
  const LoadedDataset d = load_dataset(o.data);
  std::vector<Field> frames;
  for (std::size_t i = 0; i < d.sequences.size() && (o.count == 0 || i < o.count); ++i)
    frames.insert(frames.end(), d.sequences[i].begin(), d.sequences[i].end());
  std::vector<ReconRow> rows;
  rows.push_back({"identity", evaluate_reconstruction(IdentityAutoencoder(1), frames)});
  for (const auto& s : o.autoencoders) {
    const auto eq = s.find('=');
    const std::string name = eq == std::string::npos ? fs::path(s).parent_path().filename().string() : s.substr(0, eq);
    const std::string path = eq == std::string::npos ? s : s.substr(eq + 1);
    const Checkpoint ck = load_checkpoint(path);
    std::shared_ptr<const Autoencoder> ae = build_autoencoder(ck);
    const NormStats stats = ck.data_stats ? *ck.data_stats : d.manifest.stats;
    rows.push_back({name, evaluate_reconstruction(KelvinAutoencoder(ae, stats), frames)});
  }
  RunRecord rec(o.out, "evaluate-ae");
  write_recon_table(rec.path("reconstruction.csv"), rows);
  rec.add(rec.path("reconstruction.csv"));
  for (const auto& r : rows)
    std::cout << r.model << ": bias " << r.report.bias << " K, MAE " << r.report.mae << " K, RMSE " << r.report.rmse
              << " K\n";
  rec.finish(sub);
}

// ---------------------------------------------------------------- gridsearch

struct GridOptions {
  std::string checkpoint;
  std::string data;
  std::string out;
  std::size_t count = 16;
  int members = 10;
  std::uint64_t seed = 0;
  std::string num_steps = "9,18,36,72";
  std::string s_churn = "0,0.2,0.41421356237";
  std::string sigma_max = "20,80,140";
  std::string rho = "4,7,10";
  SamplerOptions sampler;
};

void run_gridsearch(const GridOptions& o, const CLI::App& sub) {
  GridSpec grid;
  grid.num_steps = parse_int_list(o.num_steps, "--grid-num-steps");
  grid.s_churn = parse_double_list(o.s_churn, "--grid-s-churn");
  grid.sigma_max = parse_double_list(o.sigma_max, "--grid-sigma-max");
  grid.rho = parse_double_list(o.rho, "--grid-rho");
  const LoadedDataset d = load_dataset(o.data);
  const NormStats stats = d.manifest.stats;
  const std::size_t n = std::min(o.count, d.sequences.size());
  if (n == 0) throw UserError("no validation sequences");
  const SampleConfig base = o.sampler.config(o.seed);
  if (o.members < 2) throw UserError("grid search needs --members >= 2 for the spread-skill ratio");

  const CandidateEvaluator eval = [&](const SampleConfig& c) {
    const LoadedModel m = load_model(o.checkpoint, c);
    if (m.unconditional || m.name == "baseline") throw UserError("grid search needs a conditional diffusion model");
    RolloutConfig rc;
    rc.leads = 1;
    rc.window = m.window;
    rc.members = o.members;
    rc.base_seed = o.seed;
    std::vector<Field> truth, mean;
    std::vector<EnsembleSample> ss;
    for (std::size_t i = 0; i < n; ++i) {
      const FieldBatch& seq = d.sequences[i];
      FieldBatch win;
      for (int w = 0; w < m.window; ++w) win.push_back(normalize(seq[w], stats));
      EnsembleForecast e = ensemble(*m.forecaster, win, rc);
      EnsembleSample s;
      for (auto& mem : e.members) s.members.push_back(denormalize(mem[0], stats));
      s.truth = seq[m.window];
      EnsembleForecast ek = e;
      for (auto& mem : ek.members) mem[0] = denormalize(mem[0], stats);
      mean.push_back(ek.mean()[0]);
      truth.push_back(s.truth);
      ss.push_back(std::move(s));
    }
    const CandidateScore score{pixel_metrics(truth, mean).rmse, spread_skill(ss).ratio};
    std::cout << "steps " << c.num_steps << " churn " << c.s_churn << " sigma_max " << c.sigma_max << " rho " << c.rho
              << ": rmse " << score.rmse << " ratio " << score.ratio << std::endl;
    return score;
  };
  const GridSearchResult r = grid_search(grid, base, eval);
  RunRecord rec(o.out, "gridsearch");
  write_grid_csv(rec.path("grid.csv"), r.ranked);
  rec.add(rec.path("grid.csv"));
  nlohmann::json sel{{"num_steps", r.selected.num_steps},
                     {"s_churn", r.selected.s_churn},
                     {"sigma_max", r.selected.sigma_max},
                     {"rho", r.selected.rho},
                     {"cells", grid.size()}};
  std::ofstream(rec.path("selected.json")) << sel.dump(2) << '\n';
  rec.add(rec.path("selected.json"));
  rec.extra()["selected"] = sel;
  rec.finish(sub);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"edmcast: diffusion nowcasting on a synthetic blob world"};
  app.require_subcommand(1);
  app.fallthrough();
  unsigned threads = 0;
  std::vector<const CLI::Option*> required_opts;
  const auto req = [&](CLI::Option* o) {
    required_opts.push_back(o);
    return o;
  };
  std::string config_path;
  app.add_option("--threads", threads, "Worker threads (0 = all cores)")->capture_default_str();
  app.add_option("--config", config_path, "key = value config file with [subcommand] sections");

  MakeDataOptions md;
  auto* c_md = app.add_subcommand("make-data", "Generate train/val/test blob-world datasets");
  req(c_md->add_option("--out", md.out, "Output directory"));
  c_md->add_option("--train-count", md.train)->capture_default_str();
  c_md->add_option("--val-count", md.val)->capture_default_str();
  c_md->add_option("--test-count", md.test)->capture_default_str();
  c_md->add_option("--train-length", md.train_length, "Frames per training sequence")->capture_default_str();
  c_md->add_option("--eval-length", md.eval_length, "Frames per val/test sequence")->capture_default_str();
  c_md->add_option("--grid", md.grid)->capture_default_str();
  c_md->add_option("--seed", md.seed)->capture_default_str();
  c_md->add_option("--velocity", md.velocity, "random | fixed | rotational")->capture_default_str();
  c_md->add_option("--vx", md.vx)->capture_default_str();
  c_md->add_option("--vy", md.vy)->capture_default_str();
  c_md->add_option("--max-speed", md.max_speed)->capture_default_str();
  c_md->add_option("--angular-speed", md.angular)->capture_default_str();
  c_md->add_option("--spawn-rate", md.spawn_rate)->capture_default_str();
  c_md->add_option("--min-rate", md.min_rate)->capture_default_str();
  c_md->add_option("--max-rate", md.max_rate)->capture_default_str();
  c_md->add_option("--min-cloud-fraction", md.min_cloud)->capture_default_str();
  c_md->add_option("--cloud-threshold", md.threshold)->capture_default_str();

  TrainOptions tr;
  auto* c_tr = app.add_subcommand("train", "Train a model");
  c_tr->add_option("--task", tr.task, "uncond | cond | corrdiff | baseline | autoencoder | latent")
      ->capture_default_str();
  req(c_tr->add_option("--data", tr.data, "Training manifest"));
  req(c_tr->add_option("--out", tr.out, "Output directory"));
  c_tr->add_option("--baseline", tr.baseline, "Baseline checkpoint (corrdiff)");
  c_tr->add_option("--autoencoder", tr.autoencoder, "Autoencoder checkpoint (latent)");
  c_tr->add_option("--epochs", tr.epochs)->capture_default_str();
  c_tr->add_option("--batch-size", tr.batch_size)->capture_default_str();
  c_tr->add_option("--accumulation", tr.accumulation)->capture_default_str();
  c_tr->add_option("--patience", tr.patience)->capture_default_str();
  c_tr->add_option("--window", tr.window, "Condition frames")->capture_default_str();
  c_tr->add_option("--val-fraction", tr.val_fraction)->capture_default_str();
  c_tr->add_option("--lr", tr.lr)->capture_default_str();
  c_tr->add_option("--time-budget", tr.time_budget, "Seconds; 0 disables")->capture_default_str();
  c_tr->add_option("--sigma-data", tr.sigma_data)->capture_default_str();
  c_tr->add_option("--weighting", tr.weighting, "edm | inverse_sigma | uniform")->capture_default_str();
  c_tr->add_option("--sigma-dist", tr.sigma_dist, "lognormal | loguniform")->capture_default_str();
  c_tr->add_option("--p-mean", tr.p_mean)->capture_default_str();
  c_tr->add_option("--p-std", tr.p_std)->capture_default_str();
  c_tr->add_option("--seed", tr.seed)->capture_default_str();
  c_tr->add_option("--widths", tr.widths, "Comma-separated channel widths per level")->capture_default_str();
  c_tr->add_option("--depth", tr.depth)->capture_default_str();
  c_tr->add_option("--activation", tr.activation)->capture_default_str();
  c_tr->add_option("--compression", tr.compression, "Autoencoder spatial compression")->capture_default_str();
  c_tr->add_option("--latent-channels", tr.latent_channels)->capture_default_str();
  c_tr->add_option("--ae-width", tr.ae_width)->capture_default_str();
  c_tr->add_flag("--linear", tr.linear, "Linear autoencoder");
  c_tr->add_flag("--variational", tr.variational, "KL-regularized autoencoder");
  c_tr->add_option("--kl-weight", tr.kl_weight)->capture_default_str();
  c_tr->add_option("--max-samples", tr.max_samples, "Use at most this many sequences (0 = all)")
      ->capture_default_str();

  SampleOptions sa;
  auto* c_sa = app.add_subcommand("sample", "Generate samples from a checkpoint");
  req(c_sa->add_option("--checkpoint", sa.checkpoint));
  c_sa->add_option("--condition", sa.condition, "EDMT frames [F,H,W] in kelvin");
  c_sa->add_option("--data", sa.data, "Manifest supplying normalization statistics");
  req(c_sa->add_option("--out", sa.out));
  c_sa->add_option("--seed", sa.seed)->capture_default_str();
  c_sa->add_option("--members", sa.members)->capture_default_str();
  c_sa->add_option("--size", sa.size, "Grid size for unconditional models")->capture_default_str();
  c_sa->add_flag("--trajectory", sa.trajectory, "Write per-pixel trajectory CSVs");
  sa.sampler.add(*c_sa);

  RolloutOptions ro;
  auto* c_ro = app.add_subcommand("rollout", "Autoregressive ensemble forecast");
  req(c_ro->add_option("--model", ro.model, "Checkpoint or 'persistence'"));
  c_ro->add_option("--init", ro.init, "EDMT frames [F,H,W] in kelvin");
  c_ro->add_option("--data", ro.data, "Manifest to take the init window from");
  c_ro->add_option("--index", ro.index, "Sequence index within --data")->capture_default_str();
  req(c_ro->add_option("--out", ro.out));
  c_ro->add_option("--leads", ro.leads)->capture_default_str();
  c_ro->add_option("--members", ro.members)->capture_default_str();
  c_ro->add_option("--first-member", ro.first_member)->capture_default_str();
  c_ro->add_option("--seed", ro.seed)->capture_default_str();
  c_ro->add_flag("--clamp", ro.clamp, "Clamp frames to [180, 330] K before re-entry");
  ro.sampler.add(*c_ro);

  EvaluateOptions ev;
  auto* c_ev = app.add_subcommand("evaluate", "Verify models against a test set");
  req(c_ev->add_option("--data", ev.data, "Test manifest"));
  c_ev->add_option("--model", ev.models, "name=checkpoint (repeatable); persistence is always included");
  req(c_ev->add_option("--out", ev.out));
  c_ev->add_option("--count", ev.count, "Initializations")->capture_default_str();
  c_ev->add_option("--leads", ev.leads)->capture_default_str();
  c_ev->add_option("--members", ev.members)->capture_default_str();
  c_ev->add_option("--seed", ev.seed)->capture_default_str();
  c_ev->add_option("--pixel-km", ev.pixel_km)->capture_default_str();
  c_ev->add_flag("!--no-pgm", ev.pgm, "Skip PGM image dumps");
  c_ev->add_flag("--no-ensemble-factor", ev.no_factor, "Disable the sqrt((M+1)/M) spread factor");
  c_ev->add_flag("--clamp", ev.clamp, "Clamp frames to [180, 330] K before re-entry");
  ev.sampler.add(*c_ev);

  EvaluateAeOptions ea;
  auto* c_ea = app.add_subcommand("evaluate-ae", "Reconstruction bias/MAE/RMSE table");
  req(c_ea->add_option("--data", ea.data));
  c_ea->add_option("--autoencoder", ea.autoencoders, "name=checkpoint (repeatable)");
  req(c_ea->add_option("--out", ea.out));
  c_ea->add_option("--count", ea.count, "Sequences to use (0 = all)")->capture_default_str();

  GridOptions gs;
  auto* c_gs = app.add_subcommand("gridsearch", "Rank sampler settings on a validation set");
  req(c_gs->add_option("--checkpoint", gs.checkpoint));
  req(c_gs->add_option("--data", gs.data, "Validation manifest"));
  req(c_gs->add_option("--out", gs.out));
  c_gs->add_option("--count", gs.count)->capture_default_str();
  c_gs->add_option("--members", gs.members)->capture_default_str();
  c_gs->add_option("--seed", gs.seed)->capture_default_str();
  c_gs->add_option("--grid-num-steps", gs.num_steps)->capture_default_str();
  c_gs->add_option("--grid-s-churn", gs.s_churn)->capture_default_str();
  c_gs->add_option("--grid-sigma-max", gs.sigma_max)->capture_default_str();
  c_gs->add_option("--grid-rho", gs.rho)->capture_default_str();
  gs.sampler.add(*c_gs);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    CLI::App* sub = app.get_subcommands().front();
    std::optional<cli::ConfigFile> file;
    if (!config_path.empty()) file = cli::read_config(config_path);
    cli::apply_overlays(app, file ? &*file : nullptr, cli::process_env());
    cli::apply_overlays(*sub, file ? &*file : nullptr, cli::process_env());
    for (const CLI::Option* opt : sub->get_options()) {
      if (opt->count() == 0 && std::find(required_opts.begin(), required_opts.end(), opt) != required_opts.end())
        throw UserError(opt->get_name() + " is required");
    }
    set_thread_count(threads);

    const std::string name = sub->get_name();
    if (name == "make-data") run_make_data(md, *sub);
    else if (name == "train") run_train(tr, *sub);
    else if (name == "sample") run_sample(sa, *sub);
    else if (name == "rollout") run_rollout(ro, *sub);
    else if (name == "evaluate") run_evaluate(ev, *sub);
    else if (name == "evaluate-ae") run_evaluate_ae(ea, *sub);
    else if (name == "gridsearch") run_gridsearch(gs, *sub);
    return 0;
  } catch (const UserError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const DomainError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const FormatError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const ContractViolation& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << '\n';
    return 2;
  }
}
