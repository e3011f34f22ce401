#include "damsgrad/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>
#include <thread>

namespace damsgrad {

using nlohmann::json;
namespace fs = std::filesystem;

std::optional<BenchmarkId> parse_benchmark_id(std::string_view name) {
  if (name == "rastrigin") return BenchmarkId::Rastrigin;
  if (name == "drift-regression") return BenchmarkId::DriftRegression;
  return std::nullopt;
}

std::string_view to_string(BenchmarkId id) {
  switch (id) {
  case BenchmarkId::Rastrigin: return "rastrigin";
  case BenchmarkId::DriftRegression: return "drift-regression";
  }
  return "unknown";
}

std::vector<std::uint64_t> expand_seeds(const SeedSpec &spec) {
  if (const auto *list = std::get_if<std::vector<std::uint64_t>>(&spec)) return *list;
  const auto &m = std::get<MasterSeed>(spec);
  std::vector<std::uint64_t> out;
  for (std::int64_t i = 0; i < m.count; ++i) out.push_back(derive_seed(m.master, {static_cast<std::uint64_t>(i)}));
  return out;
}

std::string format_double(double x) {
  if (std::isnan(x)) return "nan";
  if (std::isinf(x)) return x > 0 ? "inf" : "-inf";
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, x);
  if (ec != std::errc()) throw NumericError("failed to format a double");
  return {buf, end};
}

// ---------------------------------------------------------------------------
// Config parsing

namespace {

/// Strict view of one JSON object: every key must be consumed.
class ObjectReader {
public:
  ObjectReader(const json &j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where() + " must be an object");
  }

  bool has(const std::string &key) const { return j_.contains(key); }

  const json &raw(const std::string &key) {
    seen_.insert(key);
    return j_.at(key);
  }

  template <typename T> std::optional<T> optional(const std::string &key) {
    if (!has(key)) return std::nullopt;
    return get<T>(key);
  }

  template <typename T> T required(const std::string &key) {
    if (!has(key)) throw ConfigError(where() + ": missing required key '" + key + "'");
    return get<T>(key);
  }

  std::string child(const std::string &key) const { return path_.empty() ? key : path_ + "." + key; }

  void finish() const {
    for (const auto &item : j_.items()) {
      if (!seen_.count(item.key())) throw ConfigError(where() + ": unknown key '" + item.key() + "'");
    }
  }

private:
  std::string where() const { return path_.empty() ? "config" : "'" + path_ + "'"; }

  template <typename T> T get(const std::string &key) {
    const json &v = raw(key);
    try {
      if constexpr (std::is_same_v<T, double>) {
        if (!v.is_number()) throw ConfigError("");
      } else if constexpr (std::is_integral_v<T>) {
        if (!v.is_number_integer()) throw ConfigError("");
        if constexpr (std::is_unsigned_v<T>) {
          if (v.is_number_integer() && !v.is_number_unsigned() && v.get<std::int64_t>() < 0) throw ConfigError("");
        }
      }
      return v.get<T>();
    } catch (const std::exception &) {
      throw ConfigError("'" + child(key) + "' has the wrong type or sign");
    }
  }

  const json &j_;
  std::string path_;
  std::set<std::string> seen_;
};

std::vector<double> number_list(const json &v, const std::string &path) {
  if (!v.is_array()) throw ConfigError("'" + path + "' must be an array of numbers");
  std::vector<double> out;
  for (const auto &x : v) {
    if (!x.is_number()) throw ConfigError("'" + path + "' must be an array of numbers");
    out.push_back(x.get<double>());
  }
  return out;
}

SearchRange range_of(const json &v, const std::string &path) {
  const auto xs = number_list(v, path);
  if (xs.size() != 2) throw ConfigError("'" + path + "' must be [lo, hi]");
  return {xs[0], xs[1]};
}

std::pair<std::size_t, std::size_t> line_and_column(std::string_view text, std::size_t byte) {
  std::size_t line = 1, col = 1;
  for (std::size_t i = 0; i < byte && i < text.size(); ++i) {
    if (text[i] == '\n') {
      ++line;
      col = 1;
    } else {
      ++col;
    }
  }
  return {line, col};
}

template <typename Fn> auto as_config_error(Fn &&fn) {
  try {
    return fn();
  } catch (const ConfigError &) {
    throw;
  } catch (const std::invalid_argument &e) {
    throw ConfigError(e.what());
  }
}

HyperParams parse_hyperparams(ObjectReader &top, OptimizerKind kind) {
  HyperParams hp;
  bool beta3_given = false;
  if (top.has("hyperparams")) {
    ObjectReader r(top.raw("hyperparams"), "hyperparams");
    if (auto v = r.optional<double>("alpha")) hp.alpha = *v;
    if (auto v = r.optional<double>("beta1")) hp.beta1 = *v;
    if (auto v = r.optional<double>("beta2")) hp.beta2 = *v;
    if (auto v = r.optional<double>("beta3")) {
      hp.beta3 = *v;
      beta3_given = true;
    }
    if (auto v = r.optional<double>("epsilon")) hp.epsilon = *v;
    r.finish();
  }
  if (kind == OptimizerKind::DAmsGrad && !beta3_given) {
    throw ConfigError("'hyperparams.beta3' is required for optimizer d-amsgrad");
  }
  as_config_error([&] {
    hp.validate();
    return 0;
  });
  return hp;
}

DriftRegressionTask parse_task(ObjectReader &top, std::int64_t &steps, bool steps_given) {
  DriftRegressionTask task = shifted_drift_task(steps);
  if (!top.has("task")) return task;
  ObjectReader r(top.raw("task"), "task");
  if (auto v = r.optional<std::int64_t>("input_dim")) task.input_dim = *v;
  if (auto v = r.optional<std::int64_t>("batch_size")) task.batch_size = *v;
  if (auto v = r.optional<double>("noise")) task.noise = *v;
  const bool has_phases = r.has("phases");
  const bool has_preset = r.has("preset");
  if (has_phases && has_preset) throw ConfigError("'task' takes either 'phases' or 'preset', not both");
  if (has_phases) {
    const json &arr = r.raw("phases");
    if (!arr.is_array()) throw ConfigError("'task.phases' must be an array");
    task.phases.clear();
    for (std::size_t i = 0; i < arr.size(); ++i) {
      ObjectReader p(arr[i], "task.phases[" + std::to_string(i) + "]");
      DriftPhase phase;
      phase.steps = p.required<std::int64_t>("steps");
      phase.target_id = p.required<int>("target");
      phase.scale = p.required<double>("scale");
      p.finish();
      task.phases.push_back(phase);
    }
    if (!steps_given) steps = task.total_steps();
  } else {
    const std::string preset = r.optional<std::string>("preset").value_or("shift");
    const double shift = r.optional<double>("shift").value_or(0.01);
    if (preset == "shift") {
      if (steps < 2) throw ConfigError("the shift preset needs at least 2 steps");
      task.phases = shifted_drift_task(steps, shift).phases;
    } else if (preset == "stationary") {
      if (r.has("shift")) throw ConfigError("'task.shift' only applies to the shift preset");
      task.phases = stationary_drift_task(steps).phases;
    } else {
      throw ConfigError("unknown task preset '" + preset + "'");
    }
  }
  r.finish();
  return task;
}

} // namespace

ExperimentConfig parse_config(std::string_view text) {
  json doc;
  try {
    doc = json::parse(text.begin(), text.end());
  } catch (const json::parse_error &e) {
    const auto [line, col] = line_and_column(text, e.byte > 0 ? e.byte - 1 : 0);
    throw ConfigError("config syntax error at line " + std::to_string(line) + ", column " +
                      std::to_string(col) + ": " + e.what());
  }

  ObjectReader top(doc, "");
  ExperimentConfig cfg;

  const auto bench_name = top.required<std::string>("benchmark");
  const auto bench = parse_benchmark_id(bench_name);
  if (!bench) throw ConfigError("unknown benchmark '" + bench_name + "'");
  cfg.benchmark = *bench;

  const auto opt_name = top.required<std::string>("optimizer");
  const auto kind = parse_optimizer_kind(opt_name);
  if (!kind) throw ConfigError("unknown optimizer '" + opt_name + "'");
  cfg.optimizer = *kind;

  cfg.hp = parse_hyperparams(top, cfg.optimizer);

  const auto steps = top.optional<std::int64_t>("steps");
  cfg.steps = steps.value_or(cfg.benchmark == BenchmarkId::Rastrigin ? 10000 : 20000);
  if (cfg.steps < 1) throw ConfigError("'steps' must be at least 1");

  if (top.has("seeds")) {
    const json &s = top.raw("seeds");
    if (s.is_array()) {
      std::vector<std::uint64_t> list;
      for (const auto &x : s) {
        if (!x.is_number_unsigned() && !(x.is_number_integer() && x.get<std::int64_t>() >= 0)) {
          throw ConfigError("'seeds' entries must be non-negative integers");
        }
        list.push_back(x.get<std::uint64_t>());
      }
      if (list.empty()) throw ConfigError("'seeds' must not be empty");
      cfg.seeds = std::move(list);
    } else {
      ObjectReader r(s, "seeds");
      MasterSeed m;
      m.master = r.required<std::uint64_t>("master");
      m.count = r.required<std::int64_t>("count");
      r.finish();
      if (m.count < 1) throw ConfigError("'seeds.count' must be at least 1");
      cfg.seeds = m;
    }
  }

  cfg.output_dir = top.optional<std::string>("output_dir").value_or("");

  if (top.has("start")) {
    if (cfg.benchmark != BenchmarkId::Rastrigin) throw ConfigError("'start' only applies to rastrigin");
    const auto xs = number_list(top.raw("start"), "start");
    if (xs.size() != 2) throw ConfigError("'start' must hold two numbers");
    cfg.start = {xs[0], xs[1]};
  }

  if (cfg.benchmark == BenchmarkId::DriftRegression) {
    cfg.task = parse_task(top, cfg.steps, steps.has_value());
    as_config_error([&] {
      cfg.task.validate();
      return 0;
    });
    if (cfg.task.total_steps() != cfg.steps) {
      throw ConfigError("task phases cover " + std::to_string(cfg.task.total_steps()) +
                        " steps but 'steps' is " + std::to_string(cfg.steps));
    }
  } else if (top.has("task")) {
    throw ConfigError("'task' only applies to drift-regression");
  }

  if (top.has("tuner")) {
    ObjectReader r(top.raw("tuner"), "tuner");
    TuneSpec spec;
    spec.steps = cfg.steps;
    if (r.has("alpha")) spec.alpha = range_of(r.raw("alpha"), "tuner.alpha");
    if (r.has("beta1")) spec.beta1 = range_of(r.raw("beta1"), "tuner.beta1");
    if (r.has("beta2")) spec.beta2 = range_of(r.raw("beta2"), "tuner.beta2");
    if (auto v = r.optional<std::int64_t>("budget")) spec.budget = *v;
    if (auto v = r.optional<std::int64_t>("steps")) spec.steps = *v;
    if (auto v = r.optional<std::uint64_t>("seed")) spec.seed = *v;
    r.finish();
    as_config_error([&] {
      spec.validate();
      return 0;
    });
    cfg.tuner = spec;
  }

  if (top.has("analysis")) {
    ObjectReader r(top.raw("analysis"), "analysis");
    AnalysisGrid g;
    if (r.has("beta2")) g.beta2 = number_list(r.raw("beta2"), "analysis.beta2");
    if (r.has("beta3")) g.beta3 = number_list(r.raw("beta3"), "analysis.beta3");
    if (r.has("v_max_T")) g.v_max_T = number_list(r.raw("v_max_T"), "analysis.v_max_T");
    if (r.has("v_bar")) g.v_bar = number_list(r.raw("v_bar"), "analysis.v_bar");
    if (auto v = r.optional<std::int64_t>("max_steps")) g.max_steps = *v;
    r.finish();
    for (double b2 : g.beta2) {
      for (double b3 : g.beta3) {
        if (!(b2 >= 0.0 && b2 < b3 && b3 < 1.0)) {
          throw ConfigError("analysis grid needs 0 <= beta2 < beta3 < 1 for every pair");
        }
      }
    }
    for (double x : g.v_max_T) if (!(x >= 0.0)) throw ConfigError("'analysis.v_max_T' entries must be non-negative");
    for (double x : g.v_bar) if (!(x >= 0.0)) throw ConfigError("'analysis.v_bar' entries must be non-negative");
    if (g.max_steps < 1) throw ConfigError("'analysis.max_steps' must be at least 1");
    cfg.analysis = g;
  }

  top.finish();
  return cfg;
}

ExperimentConfig load_config(const fs::path &path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open config '" + path.string() + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    return parse_config(ss.str());
  } catch (const ConfigError &e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

json config_to_json(const ExperimentConfig &cfg) {
  json j;
  j["benchmark"] = to_string(cfg.benchmark);
  j["optimizer"] = to_string(cfg.optimizer);
  j["hyperparams"] = {{"alpha", cfg.hp.alpha},
                      {"beta1", cfg.hp.beta1},
                      {"beta2", cfg.hp.beta2},
                      {"beta3", cfg.hp.beta3},
                      {"epsilon", cfg.hp.epsilon}};
  j["steps"] = cfg.steps;
  if (const auto *list = std::get_if<std::vector<std::uint64_t>>(&cfg.seeds)) {
    j["seeds"] = *list;
  } else {
    const auto &m = std::get<MasterSeed>(cfg.seeds);
    j["seeds"] = {{"master", m.master}, {"count", m.count}};
  }
  j["output_dir"] = cfg.output_dir;
  if (cfg.benchmark == BenchmarkId::Rastrigin) {
    j["start"] = {cfg.start[0], cfg.start[1]};
  } else {
    json phases = json::array();
    for (const auto &p : cfg.task.phases) {
      phases.push_back({{"steps", p.steps}, {"target", p.target_id}, {"scale", p.scale}});
    }
    j["task"] = {{"phases", phases},
                 {"input_dim", cfg.task.input_dim},
                 {"batch_size", cfg.task.batch_size},
                 {"noise", cfg.task.noise}};
  }
  if (cfg.tuner) {
    const auto &t = *cfg.tuner;
    json tj = {{"alpha", {t.alpha.lo, t.alpha.hi}}, {"budget", t.budget}, {"steps", t.steps}, {"seed", t.seed}};
    if (t.beta1) tj["beta1"] = {t.beta1->lo, t.beta1->hi};
    if (t.beta2) tj["beta2"] = {t.beta2->lo, t.beta2->hi};
    j["tuner"] = tj;
  }
  const auto &g = cfg.analysis;
  j["analysis"] = {{"beta2", g.beta2},
                   {"beta3", g.beta3},
                   {"v_max_T", g.v_max_T},
                   {"v_bar", g.v_bar},
                   {"max_steps", g.max_steps}};
  return j;
}

std::string serialize_config(const ExperimentConfig &cfg) { return config_to_json(cfg).dump(2) + "\n"; }

std::string config_hash(const ExperimentConfig &cfg) {
  ExperimentConfig copy = cfg;
  copy.output_dir.clear();
  const std::string text = config_to_json(copy).dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

fs::path resolve_output_dir(const ExperimentConfig &cfg, const std::optional<fs::path> &override_dir) {
  if (override_dir) return *override_dir;
  if (!cfg.output_dir.empty()) return cfg.output_dir;
  const std::string leaf = std::string(to_string(cfg.benchmark)) + "-" + std::string(to_string(cfg.optimizer));
  if (const char *root = std::getenv("DAMSGRAD_OUTPUT_ROOT"); root && *root) return fs::path(root) / leaf;
  return fs::path("damsgrad-out") / leaf;
}

void write_file_atomic(const fs::path &path, std::string_view content) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write '" + tmp.string() + "'");
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    out.flush();
    if (!out) {
      out.close();
      fs::remove(tmp);
      throw std::runtime_error("failed writing '" + tmp.string() + "'");
    }
  }
  fs::rename(tmp, path);
}

std::string run_record_csv(const RunRecord &record, BenchmarkId benchmark) {
  const bool xy = benchmark == BenchmarkId::Rastrigin;
  const bool probe = !record.v_max_probe.empty() || record.replacements.elements() > 0;
  std::string out = "step,loss";
  if (xy) out += ",x1,x2";
  if (probe) out += ",v_max_probe";
  out += '\n';
  for (std::size_t k = 0; k < record.loss.size(); ++k) {
    out += std::to_string(k + 1);
    out += ',';
    out += format_double(record.loss[k]);
    if (xy) {
      out += ',';
      out += format_double(record.trajectory[k][0]);
      out += ',';
      out += format_double(record.trajectory[k][1]);
    }
    if (probe) {
      out += ',';
      out += format_double(record.v_max_probe[k]);
    }
    out += '\n';
  }
  return out;
}

// ---------------------------------------------------------------------------
// Seed runs

namespace {

json vector_json(const Eigen::VectorXd &v) { return std::vector<double>(v.data(), v.data() + v.size()); }

Eigen::VectorXd vector_from(const json &j, const char *what) {
  if (!j.is_array()) throw ConfigError(std::string("checkpoint field '") + what + "' must be an array");
  const auto xs = j.get<std::vector<double>>();
  return Eigen::Map<const Eigen::VectorXd>(xs.data(), static_cast<Eigen::Index>(xs.size()));
}

json finite_or_null(double x) { return std::isfinite(x) ? json(x) : json(nullptr); }

json record_json(const RunRecord &r) {
  json traj = json::array();
  for (const auto &p : r.trajectory) traj.push_back({p[0], p[1]});
  json events = json::array();
  for (const auto &[s, e] : r.replacements.events()) events.push_back({s, e});
  return {{"loss", r.loss},
          {"trajectory", traj},
          {"v_max_probe", r.v_max_probe},
          {"replacements",
           {{"elements", r.replacements.elements()}, {"last_step", r.replacements.last_step()}, {"events", events}}},
          {"final_loss", finite_or_null(r.final_loss)},
          {"diverged", r.diverged}};
}

RunRecord record_from(const json &j) {
  RunRecord r;
  r.loss = j.at("loss").get<std::vector<double>>();
  for (const auto &p : j.at("trajectory")) r.trajectory.emplace_back(p.at(0).get<double>(), p.at(1).get<double>());
  r.v_max_probe = j.at("v_max_probe").get<std::vector<double>>();
  const auto &rep = j.at("replacements");
  std::vector<std::pair<std::int64_t, std::int64_t>> events;
  for (const auto &e : rep.at("events")) events.emplace_back(e.at(0).get<std::int64_t>(), e.at(1).get<std::int64_t>());
  const auto elements = rep.at("elements").get<Eigen::Index>();
  const auto last = rep.at("last_step").get<std::int64_t>();
  r.replacements = elements > 0 || !events.empty() ? ReplacementTrace::restore(elements, events, last) : ReplacementTrace();
  const auto &fl = j.at("final_loss");
  r.final_loss = fl.is_null() ? std::numeric_limits<double>::infinity() : fl.get<double>();
  r.diverged = j.at("diverged").get<bool>();
  return r;
}

} // namespace

SeedRun::SeedRun(const ExperimentConfig &cfg, std::uint64_t seed)
    : hash_(config_hash(cfg)), benchmark_(cfg.benchmark), seed_(seed), total_steps_(cfg.steps), task_(cfg.task) {
  const OptimizerChoice choice{cfg.optimizer, cfg.hp};
  if (benchmark_ == BenchmarkId::Rastrigin) {
    rastrigin_ = start_rastrigin_session(choice, cfg.start);
  } else {
    task_.validate();
    drift_ = start_drift_session(choice, default_drift_network(task_.input_dim, seed));
  }
}

void SeedRun::advance(std::int64_t until) {
  until = std::min(until, total_steps_);
  if (rastrigin_) advance_rastrigin_session(*rastrigin_, until);
  else advance_drift_session(*drift_, task_, seed_, until);
}

std::int64_t SeedRun::step() const { return rastrigin_ ? rastrigin_->step : drift_->step; }

bool SeedRun::done() const { return step() >= total_steps_ || record().diverged; }

const RunRecord &SeedRun::record() const { return rastrigin_ ? rastrigin_->record : drift_->record; }

const OptimizerState<double> &SeedRun::optimizer_state() const {
  return rastrigin_ ? rastrigin_->optimizer.state() : drift_->optimizer.state();
}

json SeedRun::checkpoint() const {
  const auto &st = optimizer_state();
  const Optimizer &opt = rastrigin_ ? rastrigin_->optimizer : drift_->optimizer;
  json j = {{"format_version", kCheckpointVersion},
            {"config_hash", hash_},
            {"benchmark", to_string(benchmark_)},
            {"seed", seed_},
            {"step", step()},
            {"optimizer",
             {{"kind", to_string(opt.kind())},
              {"t", st.t},
              {"m", vector_json(st.m)},
              {"v", vector_json(st.v)},
              {"v_max", vector_json(st.v_max)}}},
            {"record", record_json(record())}};
  if (rastrigin_) {
    j["theta"] = vector_json(rastrigin_->x);
  } else {
    const Mlp &net = drift_->net;
    j["network"] = {{"sizes", net.sizes()},
                    {"activation", to_string(net.activation())},
                    {"output_map", to_string(net.output_map())},
                    {"parameters", vector_json(net.flatten())}};
  }
  return j;
}

SeedRun SeedRun::resume(const ExperimentConfig &cfg, const json &ck) {
  try {
    if (ck.at("format_version").get<int>() != kCheckpointVersion) {
      throw ConfigError("checkpoint format version " + ck.at("format_version").dump() + " is not supported");
    }
    if (ck.at("config_hash").get<std::string>() != config_hash(cfg)) {
      throw ConfigError("checkpoint was written for a different configuration");
    }
    if (ck.at("benchmark").get<std::string>() != to_string(cfg.benchmark)) {
      throw ConfigError("checkpoint benchmark differs from the configuration");
    }
    SeedRun run(cfg, ck.at("seed").get<std::uint64_t>());
    const auto &o = ck.at("optimizer");
    if (o.at("kind").get<std::string>() != to_string(cfg.optimizer)) {
      throw ConfigError("checkpoint optimizer differs from the configuration");
    }
    OptimizerState<double> st{vector_from(o.at("m"), "m"), vector_from(o.at("v"), "v"),
                              vector_from(o.at("v_max"), "v_max"), o.at("t").get<std::int64_t>()};
    const auto step = ck.at("step").get<std::int64_t>();
    if (step < 0 || step > cfg.steps) throw ConfigError("checkpoint step is outside the configured run");
    RunRecord rec = record_from(ck.at("record"));
    if (rec.steps() != step) throw ConfigError("checkpoint record length differs from its step");
    if (run.rastrigin_) {
      auto &s = *run.rastrigin_;
      const Eigen::VectorXd x = vector_from(ck.at("theta"), "theta");
      if (x.size() != 2) throw DimensionError("rastrigin checkpoint needs a 2-vector");
      s.x = x;
      s.optimizer.set_state(std::move(st));
      s.step = step;
      s.record = std::move(rec);
    } else {
      auto &s = *run.drift_;
      const auto &n = ck.at("network");
      if (n.at("sizes").get<std::vector<Eigen::Index>>() != s.net.sizes() ||
          parse_activation(n.at("activation").get<std::string>()) != s.net.activation() ||
          parse_output_map(n.at("output_map").get<std::string>()) != s.net.output_map()) {
        throw ConfigError("checkpoint network architecture differs from the configuration");
      }
      s.net.unflatten(vector_from(n.at("parameters"), "parameters"));
      s.optimizer.set_state(std::move(st));
      s.step = step;
      s.record = std::move(rec);
    }
    return run;
  } catch (const json::exception &e) {
    throw ConfigError(std::string("malformed checkpoint: ") + e.what());
  }
}

RunRecord run_seed(const ExperimentConfig &cfg, std::uint64_t seed) {
  SeedRun run(cfg, seed);
  run.finish();
  return run.record();
}

// ---------------------------------------------------------------------------
// Subcommands

namespace {

/// Runs fn(i) for i in [0, n) on up to `jobs` threads.
void parallel_for(std::size_t n, int jobs, const std::function<void(std::size_t)> &fn) {
  const std::size_t workers = std::min<std::size_t>(n, static_cast<std::size_t>(std::max(1, jobs)));
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) fn(i);
    });
  }
  for (auto &t : pool) t.join();
}

/// Linear-interpolated quantile of sorted values.
double quantile(const std::vector<double> &sorted, double q) {
  if (sorted.empty()) return std::numeric_limits<double>::quiet_NaN();
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  if (frac == 0.0) return sorted[lo];
  return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

std::string run_file_name(const ExperimentConfig &cfg, std::uint64_t seed) {
  return std::string(to_string(cfg.benchmark)) + "-" + std::string(to_string(cfg.optimizer)) + "-seed" +
         std::to_string(seed) + ".csv";
}

std::string checkpoint_file_name(std::uint64_t seed) { return "checkpoint-seed" + std::to_string(seed) + ".json"; }

json mode_json(const ExperimentConfig &cfg) {
  const auto mode = mode_of(cfg.optimizer, cfg.hp);
  return mode ? json(to_string(*mode)) : json(nullptr);
}

json hp_json(const HyperParams &hp) {
  return {{"alpha", hp.alpha}, {"beta1", hp.beta1}, {"beta2", hp.beta2}, {"beta3", hp.beta3}, {"epsilon", hp.epsilon}};
}

json load_json_file(const fs::path &path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open '" + path.string() + "'");
  try {
    return json::parse(in);
  } catch (const json::parse_error &e) {
    throw ConfigError("'" + path.string() + "' is not valid JSON: " + e.what());
  }
}

} // namespace

ExperimentResult run_experiment(const ExperimentConfig &cfg, const RunOptions &options) {
  ExperimentResult result;
  result.output_dir = resolve_output_dir(cfg, options.output_dir);
  fs::create_directories(result.output_dir);
  const auto seeds = expand_seeds(cfg.seeds);
  result.seeds.resize(seeds.size());

  parallel_for(seeds.size(), options.jobs, [&](std::size_t i) {
    SeedOutcome &out = result.seeds[i];
    out.seed = seeds[i];
    try {
      std::optional<SeedRun> run;
      if (options.resume_from) {
        run = SeedRun::resume(cfg, load_json_file(*options.resume_from / checkpoint_file_name(seeds[i])));
        if (run->seed() != seeds[i]) throw ConfigError("checkpoint seed differs from its file name");
      } else {
        run.emplace(cfg, seeds[i]);
      }
      if (options.stop_after) {
        run->advance(*options.stop_after);
        out.file = result.output_dir / checkpoint_file_name(seeds[i]);
        write_file_atomic(out.file, run->checkpoint().dump() + "\n");
      } else {
        run->finish();
        out.file = result.output_dir / run_file_name(cfg, seeds[i]);
        write_file_atomic(out.file, run_record_csv(run->record(), cfg.benchmark));
      }
      out.record = run->record();
      out.ok = true;
    } catch (const std::exception &e) {
      out.error = e.what();
    }
  });

  std::vector<double> finals;
  json runs = json::array();
  std::int64_t failed = 0;
  for (const auto &s : result.seeds) {
    json r = {{"seed", s.seed}, {"status", s.ok ? "ok" : "failed"}};
    if (s.ok) {
      r["file"] = s.file.filename().string();
      r["final_loss"] = finite_or_null(s.record->final_loss);
      r["diverged"] = s.record->diverged;
      r["steps_executed"] = s.record->steps();
      if (s.record->replacements.elements() > 0) {
        r["replacement_events"] = s.record->replacements.events().size();
      }
      finals.push_back(s.record->final_loss);
    } else {
      r["error"] = s.error;
      ++failed;
    }
    runs.push_back(r);
  }
  std::sort(finals.begin(), finals.end());

  result.summary = {{"benchmark", to_string(cfg.benchmark)},
                    {"optimizer", to_string(cfg.optimizer)},
                    {"mode", mode_json(cfg)},
                    {"hyperparams", hp_json(cfg.hp)},
                    {"steps", cfg.steps},
                    {"config_hash", config_hash(cfg)},
                    {"config", config_to_json(cfg)},
                    {"runs", runs},
                    {"failed_seeds", failed},
                    {"final_loss_median", finite_or_null(quantile(finals, 0.5))},
                    {"final_loss_iqr", finite_or_null(quantile(finals, 0.75) - quantile(finals, 0.25))}};
  if (options.stop_after) {
    result.summary["checkpoint_step"] = *options.stop_after;
  } else {
    write_file_atomic(result.output_dir / "summary.json", result.summary.dump(2) + "\n");
  }
  result.exit_status = (!seeds.empty() && failed == static_cast<std::int64_t>(seeds.size())) ? 1 : 0;
  return result;
}

TuneOutcome tune_experiment(const ExperimentConfig &cfg, const RunOptions &options) {
  TuneOutcome out;
  out.output_dir = resolve_output_dir(cfg, options.output_dir);
  fs::create_directories(out.output_dir);
  TuneSpec spec = cfg.tuner.value_or(TuneSpec{});
  if (!cfg.tuner) spec.steps = cfg.steps;

  TuneObjective objective;
  if (cfg.benchmark == BenchmarkId::Rastrigin) {
    objective = rastrigin_objective(cfg.optimizer, spec.steps, cfg.start);
  } else {
    const std::uint64_t seed = expand_seeds(cfg.seeds).front();
    objective = [cfg, seed, steps = spec.steps](const HyperParams &hp) {
      ExperimentConfig trial = cfg;
      trial.hp = hp;
      SeedRun run(trial, seed);
      run.advance(steps);
      return run.record().diverged ? std::numeric_limits<double>::infinity() : run.record().final_loss;
    };
  }
  out.result = random_search_tune(spec, cfg.hp, objective);

  std::string csv = "trial,alpha,beta1,beta2,beta3,epsilon,objective,diverged\n";
  for (const auto &t : out.result.trials) {
    csv += std::to_string(t.index) + "," + format_double(t.hp.alpha) + "," + format_double(t.hp.beta1) + "," +
           format_double(t.hp.beta2) + "," + format_double(t.hp.beta3) + "," + format_double(t.hp.epsilon) + "," +
           format_double(t.objective) + "," + (t.diverged ? "1" : "0") + "\n";
  }
  write_file_atomic(out.output_dir / "tune-trials.csv", csv);

  json best = {{"benchmark", to_string(cfg.benchmark)},
               {"optimizer", to_string(cfg.optimizer)},
               {"mode", mode_json(cfg)},
               {"budget", spec.budget},
               {"steps", spec.steps},
               {"seed", spec.seed},
               {"config_hash", config_hash(cfg)}};
  if (out.result.best) {
    best["best"] = hp_json(*out.result.best);
    best["best_objective"] = out.result.best_objective;
    best["best_trial"] = out.result.best_index;
  } else {
    best["best"] = nullptr;
    best["error"] = "every trial diverged";
    out.exit_status = 1;
  }
  write_file_atomic(out.output_dir / "tune-best.json", best.dump(2) + "\n");
  return out;
}

ExperimentConfig config_for_mode(const ExperimentConfig &base, std::string_view mode) {
  ExperimentConfig cfg = base;
  if (mode == "adam") {
    cfg.hp.beta3 = base.hp.beta2;
  } else if (mode == "amsgrad") {
    cfg.hp.beta3 = 1.0;
  } else if (mode == "d-amsgrad") {
    if (base.optimizer != OptimizerKind::DAmsGrad) {
      throw ConfigError("mode 'd-amsgrad' takes beta3 from a d-amsgrad config");
    }
  } else {
    double beta3 = 0.0;
    auto [end, ec] = std::from_chars(mode.data(), mode.data() + mode.size(), beta3);
    if (ec != std::errc() || end != mode.data() + mode.size()) {
      throw ConfigError("unknown compare mode '" + std::string(mode) + "'");
    }
    cfg.hp.beta3 = beta3;
  }
  cfg.optimizer = OptimizerKind::DAmsGrad;
  as_config_error([&] {
    cfg.hp.validate();
    return 0;
  });
  return cfg;
}

ComparisonReport compare_runs(const std::vector<std::pair<std::string, ExperimentConfig>> &columns, int jobs) {
  if (columns.empty()) throw ConfigError("compare needs at least one column");
  const auto &first = columns.front().second;
  ComparisonReport report;
  report.seeds = expand_seeds(first.seeds);
  for (const auto &[label, cfg] : columns) {
    if (expand_seeds(cfg.seeds) != report.seeds) throw ConfigError("compare columns must share one seed list");
    if (cfg.benchmark != first.benchmark || cfg.steps != first.steps || cfg.task != first.task ||
        cfg.start != first.start) {
      throw ConfigError("compare columns must share the benchmark, steps and task");
    }
    report.labels.push_back(label);
  }

  const std::size_t nc = columns.size(), ns = report.seeds.size();
  report.runs.assign(nc, std::vector<RunRecord>(ns));
  parallel_for(nc * ns, jobs, [&](std::size_t k) {
    const std::size_t c = k / ns, s = k % ns;
    report.runs[c][s] = run_seed(columns[c].second, report.seeds[s]);
  });

  const bool recovery = first.benchmark == BenchmarkId::DriftRegression && first.task.phases.size() > 1;
  report.wins.assign(nc, std::vector<std::int64_t>(nc, 0));
  json rows = json::array();
  if (recovery) report.recovery.assign(nc, std::vector<std::optional<std::int64_t>>(ns));
  for (std::size_t s = 0; s < ns; ++s) {
    json row = {{"seed", report.seeds[s]}};
    json finals = json::object();
    for (std::size_t c = 0; c < nc; ++c) finals[report.labels[c]] = finite_or_null(report.runs[c][s].final_loss);
    row["final_loss"] = finals;
    if (recovery) {
      const std::size_t p = first.task.phases.size() - 1;
      double floor = std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < nc; ++c) {
        if (!report.runs[c][s].diverged) floor = std::min(floor, phase_floor(report.runs[c][s], first.task, p));
      }
      json rec = json::object();
      for (std::size_t c = 0; c < nc; ++c) {
        if (!report.runs[c][s].diverged) report.recovery[c][s] = recovery_steps(report.runs[c][s], first.task, p, floor);
        rec[report.labels[c]] = report.recovery[c][s] ? json(*report.recovery[c][s]) : json(nullptr);
        for (std::size_t d = 0; d < nc; ++d) {
          if (c != d && paired_recovery(report.runs[c][s], report.runs[d][s], first.task, p).first_wins()) {
            ++report.wins[c][d];
          }
        }
      }
      row["recovery_steps"] = rec;
    }
    rows.push_back(row);
  }

  json medians = json::object();
  for (std::size_t c = 0; c < nc; ++c) {
    std::vector<double> finals;
    for (const auto &r : report.runs[c]) finals.push_back(r.final_loss);
    std::sort(finals.begin(), finals.end());
    medians[report.labels[c]] = finite_or_null(quantile(finals, 0.5));
  }
  json modes = json::object();
  for (const auto &[label, cfg] : columns) {
    const auto m = mode_of(cfg.optimizer, cfg.hp);
    modes[label] = {{"optimizer", to_string(cfg.optimizer)},
                    {"beta3", cfg.hp.beta3},
                    {"mode", m ? json(to_string(*m)) : json(nullptr)}};
  }
  report.summary = {{"benchmark", to_string(first.benchmark)},
                    {"seeds", report.seeds},
                    {"labels", report.labels},
                    {"columns", modes},
                    {"final_loss_median", medians},
                    {"rows", rows}};
  if (recovery) report.summary["recovery_wins"] = report.wins;
  return report;
}

ComparisonReport compare_modes(const ExperimentConfig &base, const std::vector<std::string> &modes, int jobs) {
  std::vector<std::pair<std::string, ExperimentConfig>> columns;
  for (const auto &m : modes) columns.emplace_back(m, config_for_mode(base, m));
  return compare_runs(columns, jobs);
}

ComparisonReport compare_experiment(const ExperimentConfig &base, const std::vector<std::string> &modes,
                                    const RunOptions &options) {
  ComparisonReport report = compare_modes(base, modes, options.jobs);
  const fs::path dir = resolve_output_dir(base, options.output_dir);
  std::string csv = "seed";
  for (const auto &l : report.labels) csv += ",final_loss_" + l;
  if (!report.recovery.empty()) {
    for (const auto &l : report.labels) csv += ",recovery_" + l;
  }
  csv += '\n';
  for (std::size_t s = 0; s < report.seeds.size(); ++s) {
    csv += std::to_string(report.seeds[s]);
    for (std::size_t c = 0; c < report.labels.size(); ++c) csv += "," + format_double(report.runs[c][s].final_loss);
    for (std::size_t c = 0; c < report.recovery.size(); ++c) {
      csv += ",";
      if (report.recovery[c][s]) csv += std::to_string(*report.recovery[c][s]);
    }
    csv += '\n';
  }
  write_file_atomic(dir / "compare.csv", csv);
  write_file_atomic(dir / "compare.json", report.summary.dump(2) + "\n");
  return report;
}

std::vector<ReplacementRow> analyze_replacement(const AnalysisGrid &grid, const HyperParams &base) {
  std::vector<ReplacementRow> rows;
  for (double b2 : grid.beta2) {
    for (double b3 : grid.beta3) {
      HyperParams hp = base;
      hp.beta2 = b2;
      hp.beta3 = b3;
      for (double vmax : grid.v_max_T) {
        for (double vbar : grid.v_bar) {
          ReplacementRow row{b2, b3, vmax, vbar, std::nullopt, std::nullopt};
          row.t_star_pred = predict_first_replacement({0, vmax, vbar}, hp).t_star;
          std::int64_t cap = grid.max_steps;
          if (row.t_star_pred) cap = std::min(cap, 2 * *row.t_star_pred + 16);
          row.t_star_emp = simulate_first_replacement(hp, vmax, vbar, cap);
          rows.push_back(row);
        }
      }
    }
  }
  return rows;
}

std::string replacement_csv(const std::vector<ReplacementRow> &rows) {
  std::string csv = "beta2,beta3,v_max_T,v_bar,t_star_pred,t_star_emp\n";
  auto opt = [](const std::optional<std::int64_t> &x) { return x ? std::to_string(*x) : std::string("inf"); };
  for (const auto &r : rows) {
    csv += format_double(r.beta2) + "," + format_double(r.beta3) + "," + format_double(r.v_max_T) + "," +
           format_double(r.v_bar) + "," + opt(r.t_star_pred) + "," + opt(r.t_star_emp) + "\n";
  }
  return csv;
}

std::vector<ReplacementRow> analyze_experiment(const ExperimentConfig &cfg, const RunOptions &options) {
  auto rows = analyze_replacement(cfg.analysis, cfg.hp);
  write_file_atomic(resolve_output_dir(cfg, options.output_dir) / "replacement.csv", replacement_csv(rows));
  return rows;
}

} // namespace damsgrad
