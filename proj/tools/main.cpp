#include <atomic>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <optional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "gconv/checkpoint.hpp"
#include "gconv/diagnostics.hpp"
#include "gconv/metrics.hpp"
#include "gconv/models.hpp"
#include "gconv/train.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;
using namespace gconv;

namespace {

// Bad flags, unreadable files, and invalid configuration exit with 2;
// threshold and assertion failures exit with 1.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct RunConfig {
  std::vector<uint64_t> seeds{1, 2, 3, 4, 5};
  std::string kind;  // "conv", "gconv", or empty for both
  std::string loss = "hinge";
  long iterations = 15000;
  std::string out;  // empty: reports to stdout only, artifacts to the cwd
  std::string format = "json";
  TrainConfig train = toy_defaults();
  GmmSpec gmm;

  std::vector<std::string> frechet_files;
  std::string inception_file;
  bool inject_fault = false;
};

std::string fmt17(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string fmt_err(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6e", v);
  return buf;
}

std::string utc_now() {
  char buf[32];
  const std::time_t t = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

void write_file(const fs::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write " + path.string());
  out << content;
  if (!out) throw ConfigError("write failed for " + path.string());
}

// Prints a report to stdout and mirrors it under --out when one was given.
void emit_report(const RunConfig& rc, const std::string& stem, const std::string& content) {
  std::fputs(content.c_str(), stdout);
  if (!rc.out.empty())
    write_file(fs::path(rc.out) / (stem + "." + rc.format), content);
}

// --- config file ------------------------------------------------------------------------

void expect_keys(const json& j, const char* where, std::initializer_list<const char*> allowed) {
  for (const auto& [key, value] : j.items()) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || key == a;
    if (!ok) throw ConfigError(std::string("config: unknown key '") + key + "' in " + where);
  }
}

void apply_config_file(const std::string& path, RunConfig& rc) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open config file " + path);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError(path + ": " + e.what());
  }
  if (!j.is_object()) throw ConfigError(path + ": top level must be an object");
  try {
    expect_keys(j, "the top level",
                {"seeds", "kind", "loss", "iterations", "out", "format", "train", "gmm"});
    if (j.contains("seeds")) {
      rc.seeds = j["seeds"].get<std::vector<uint64_t>>();
    }
    if (j.contains("kind")) {
      rc.kind = j["kind"].get<std::string>();
      if (rc.kind != "conv" && rc.kind != "gconv")
        throw ConfigError("config: kind must be \"conv\" or \"gconv\"");
    }
    if (j.contains("loss")) {
      rc.loss = j["loss"].get<std::string>();
      loss_kind_from(rc.loss);  // validates
    }
    if (j.contains("iterations")) {
      rc.iterations = j["iterations"].get<long>();
      if (rc.iterations < 0) throw ConfigError("config: iterations must be >= 0");
    }
    if (j.contains("out")) rc.out = j["out"].get<std::string>();
    if (j.contains("format")) {
      rc.format = j["format"].get<std::string>();
      if (rc.format != "csv" && rc.format != "json")
        throw ConfigError("config: format must be \"csv\" or \"json\"");
    }
    if (j.contains("train")) {
      const json& t = j["train"];
      expect_keys(t, "train",
                  {"d_z", "batch_g", "batch_d", "n_dis", "lr_g", "lr_d", "decay_last",
                   "snapshot_interval", "eval_samples", "final_samples"});
      if (t.contains("d_z")) rc.train.d_z = t["d_z"].get<int>();
      if (t.contains("batch_g")) rc.train.batch_g = t["batch_g"].get<int>();
      if (t.contains("batch_d")) rc.train.batch_d = t["batch_d"].get<int>();
      if (t.contains("n_dis")) rc.train.n_dis = t["n_dis"].get<int>();
      if (t.contains("lr_g")) rc.train.lr_g = t["lr_g"].get<double>();
      if (t.contains("lr_d")) rc.train.lr_d = t["lr_d"].get<double>();
      if (t.contains("decay_last")) rc.train.decay_last = t["decay_last"].get<long>();
      if (t.contains("snapshot_interval"))
        rc.train.snapshot_interval = t["snapshot_interval"].get<long>();
      if (t.contains("eval_samples")) rc.train.eval_samples = t["eval_samples"].get<int>();
      if (t.contains("final_samples")) rc.train.final_samples = t["final_samples"].get<int>();
    }
    if (j.contains("gmm")) {
      const json& g = j["gmm"];
      expect_keys(g, "gmm", {"modes", "radius", "stddev"});
      if (g.contains("modes")) rc.gmm.modes = g["modes"].get<int>();
      if (g.contains("radius")) rc.gmm.radius = g["radius"].get<double>();
      if (g.contains("stddev")) rc.gmm.stddev = g["stddev"].get<double>();
    }
  } catch (const json::exception& e) {
    throw ConfigError(path + ": " + e.what());
  } catch (const ValueError& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

std::string scan_config_path(int argc, char** argv) {
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--config") {
      if (i + 1 >= argc) throw ConfigError("--config needs a file path");
      return argv[i + 1];
    }
    if (a.rfind("--config=", 0) == 0) return a.substr(9);
  }
  return "";
}

// --- CSV input --------------------------------------------------------------------------

struct CsvTable {
  std::vector<std::string> header;
  std::vector<double> values;  // row-major
  int rows = 0, cols = 0;
};

std::vector<std::string> split_fields(const std::string& line) {
  std::vector<std::string> out;
  size_t start = 0;
  while (true) {
    const size_t comma = line.find(',', start);
    if (comma == std::string::npos) {
      out.push_back(line.substr(start));
      return out;
    }
    out.push_back(line.substr(start, comma - start));
    start = comma + 1;
  }
}

CsvTable read_csv(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open " + path);
  std::string line;
  const auto next_line = [&]() {
    if (!std::getline(in, line)) return false;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    return true;
  };
  if (!next_line() || line.empty())
    throw ConfigError(path + ": missing header row");
  CsvTable t;
  t.header = split_fields(line);
  t.cols = int(t.header.size());
  int lineno = 1;
  while (next_line()) {
    ++lineno;
    if (line.empty()) continue;  // tolerate a trailing blank line
    const auto fields = split_fields(line);
    if (int(fields.size()) != t.cols)
      throw ConfigError(path + ":" + std::to_string(lineno) + ": expected " +
                        std::to_string(t.cols) + " fields, got " + std::to_string(fields.size()));
    for (const std::string& f : fields) {
      char* end = nullptr;
      const double v = std::strtod(f.c_str(), &end);
      if (f.empty() || end != f.c_str() + f.size())
        throw ConfigError(path + ":" + std::to_string(lineno) + ": not a number: '" + f + "'");
      t.values.push_back(v);
    }
    ++t.rows;
  }
  return t;
}

// --- toy-gan ----------------------------------------------------------------------------

int thread_cap(size_t jobs) {
  unsigned hw = std::thread::hardware_concurrency();
  if (hw == 0) hw = 1;
  long cap = long(hw);
  if (const char* e = std::getenv("GCONV_LAB_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(e, &end, 10);
    if (end == e || *end != '\0' || v < 1)
      throw ConfigError("GCONV_LAB_THREADS must be a positive integer, got '" + std::string(e) +
                        "'");
    cap = v;
  }
  return int(std::min(jobs, size_t(cap)));
}

std::string samples_csv(const Tensor& samples) {
  std::string out = "x,y\n";
  const int n = samples.shape[0];
  for (int i = 0; i < n; ++i) {
    out += fmt17(samples[size_t(i) * 2]);
    out += ',';
    out += fmt17(samples[size_t(i) * 2 + 1]);
    out += '\n';
  }
  return out;
}

int cmd_toy_gan(const RunConfig& rc) {
  if (rc.seeds.empty()) throw ConfigError("toy-gan needs at least one seed");
  std::vector<ConvKind> kinds;
  if (rc.kind.empty())
    kinds = {ConvKind::conv, ConvKind::gconv};
  else
    kinds = {conv_kind_from(rc.kind)};

  const fs::path dir = rc.out.empty() ? fs::path(".") : fs::path(rc.out);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw ConfigError("cannot create output directory " + dir.string());

  struct Job {
    ConvKind kind;
    uint64_t seed;
  };
  std::vector<Job> jobs;
  for (ConvKind k : kinds)
    for (uint64_t s : rc.seeds) jobs.push_back({k, s});

  struct Outcome {
    bool ok = false;
    std::string error;
    ModeReport report;
    HistoryRow last;
    bool has_last = false;
  };
  std::vector<Outcome> results(jobs.size());

  TrainConfig base = rc.train;
  base.iterations = rc.iterations;
  base.loss = loss_kind_from(rc.loss);
  try {
    base.validate();
  } catch (const ValueError& e) {
    throw ConfigError(e.what());
  }
  if (rc.gmm.modes < 1) throw ConfigError("gmm: modes must be >= 1");
  if (rc.gmm.stddev <= 0) throw ConfigError("gmm: stddev must be > 0");

  // Each worker owns its whole run: model, loop, and artifact files. Nothing
  // is shared, so the artifacts cannot depend on the thread count.
  std::atomic<size_t> next{0};
  const auto worker = [&]() {
    while (true) {
      const size_t i = next.fetch_add(1);
      if (i >= jobs.size()) return;
      const Job job = jobs[i];
      Outcome& res = results[i];
      const std::string tag = std::string(to_string(job.kind)) + "_" + std::to_string(job.seed);
      try {
        TrainConfig tc = base;
        tc.kind = job.kind;
        tc.seed = job.seed;
        ToyGan gan(job.kind, tc.d_z, job.seed);
        TrainResult r = train_gan(gan, tc, rc.gmm);
        write_file(dir / ("history_" + tag + ".csv"), r.history.to_csv());
        write_file(dir / ("samples_" + tag + ".csv"), samples_csv(r.samples));
        save_checkpoint(gan.all_params(), (dir / ("checkpoint_" + tag + ".json")).string(),
                        (dir / ("checkpoint_" + tag + ".bin")).string());
        res.report = r.report;
        if (!r.history.rows.empty()) {
          res.last = r.history.rows.back();
          res.has_last = true;
        }
        res.ok = true;
      } catch (const std::exception& e) {
        res.error = e.what();
      }
    }
  };

  const int workers = thread_cap(jobs.size());
  if (workers <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    pool.reserve(size_t(workers));
    for (int i = 0; i < workers; ++i) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }

  ordered_json summary;
  summary["meta"] = {{"tool", "gconv-lab"}, {"created", utc_now()}};
  summary["config"] = {{"iterations", rc.iterations},
                       {"loss", rc.loss},
                       {"n_dis", base.n_dis},
                       {"lr_g", base.lr_g},
                       {"lr_d", base.lr_d},
                       {"batch_g", base.batch_g},
                       {"batch_d", base.batch_d},
                       {"gmm", {{"modes", rc.gmm.modes}, {"radius", rc.gmm.radius},
                                {"stddev", rc.gmm.stddev}}}};
  summary["runs"] = ordered_json::array();
  bool all_ok = true;
  for (size_t i = 0; i < jobs.size(); ++i) {
    const Job& job = jobs[i];
    const Outcome& res = results[i];
    ordered_json run;
    run["kind"] = to_string(job.kind);
    run["seed"] = job.seed;
    if (!res.ok) {
      run["error"] = res.error;
      summary["runs"].push_back(std::move(run));
      all_ok = false;
      std::fprintf(stderr, "run %s_%llu failed: %s\n", to_string(job.kind),
                   (unsigned long long)job.seed, res.error.c_str());
      continue;
    }
    const std::string tag = std::string(to_string(job.kind)) + "_" + std::to_string(job.seed);
    run["covered_modes"] = res.report.covered;
    run["high_quality_ratio"] = res.report.high_quality_ratio;
    run["counts"] = res.report.counts;
    if (res.has_last) {
      run["final_loss_d"] = res.last.loss_d;
      run["final_loss_g"] = res.last.loss_g;
    }
    run["history"] = "history_" + tag + ".csv";
    run["samples"] = "samples_" + tag + ".csv";
    run["checkpoint"] = {"checkpoint_" + tag + ".json", "checkpoint_" + tag + ".bin"};
    summary["runs"].push_back(std::move(run));
  }
  // a lone run mirrors its coverage at the top level for easy scripting
  if (jobs.size() == 1 && results[0].ok) {
    summary["covered_modes"] = results[0].report.covered;
    summary["high_quality_ratio"] = results[0].report.high_quality_ratio;
  }
  write_file(dir / "summary.json", summary.dump(2) + "\n");
  return all_ok ? 0 : 1;
}

// --- param-audit ------------------------------------------------------------------------

int cmd_param_audit(const RunConfig& rc) {
  struct Entry {
    int resolution;
    ConvKind kind;
    ParamReport report;
  };
  std::vector<Entry> entries;
  for (int res : {32, 128, 256})
    for (ConvKind k : {ConvKind::conv, ConvKind::gconv})
      entries.push_back(
          {res, k, count_weights(make_arch(res, Role::generator, k), CountPolicy::conv_only)});

  size_t conv32 = 0, gconv32 = 0;
  std::vector<std::string> failures;
  for (const Entry& e : entries) {
    if (e.resolution == 32 && e.kind == ConvKind::conv) conv32 = e.report.conv_weights;
    if (e.resolution == 32 && e.kind == ConvKind::gconv) gconv32 = e.report.conv_weights;
  }
  const auto within = [](size_t got, double want) {
    return std::abs(double(got) - want) / want <= 0.01;
  };
  if (conv32 != 3'545'856)
    failures.push_back("32/conv weights: expected 3545856, got " + std::to_string(conv32));
  if (gconv32 != 4'381'440)
    failures.push_back("32/gconv weights: expected 4381440, got " + std::to_string(gconv32));
  if (!within(conv32, 3.54e6))
    failures.push_back("32/conv weights " + std::to_string(conv32) + " not within 1% of 3.54M");
  if (!within(gconv32, 4.37e6))
    failures.push_back("32/gconv weights " + std::to_string(gconv32) + " not within 1% of 4.37M");
  for (const Entry& e : entries) {
    if (e.kind != ConvKind::gconv) continue;
    for (const Entry& plain : entries) {
      if (plain.resolution != e.resolution || plain.kind != ConvKind::conv) continue;
      if (e.report.conv_weights != plain.report.conv_weights + plain.report.gconv_extra)
        failures.push_back(std::to_string(e.resolution) +
                           ": gconv weights != conv weights + extra");
    }
  }

  if (rc.format == "csv") {
    std::string out = "resolution,conv_kind,conv_weights,gconv_extra\n";
    for (const Entry& e : entries)
      out += std::to_string(e.resolution) + "," + to_string(e.kind) + "," +
             std::to_string(e.report.conv_weights) + "," + std::to_string(e.report.gconv_extra) +
             "\n";
    emit_report(rc, "param_audit", out);
  } else {
    ordered_json j;
    j["reports"] = ordered_json::array();
    for (const Entry& e : entries)
      j["reports"].push_back(ordered_json::parse(param_report_json(e.report)));
    j["audit"] = {{"conv_weights_32", conv32},
                  {"gconv_weights_32", gconv32},
                  {"reference_conv", 3.54e6},
                  {"reference_gconv", 4.37e6},
                  {"tolerance", 0.01},
                  {"pass", failures.empty()}};
    emit_report(rc, "param_audit", j.dump(2) + "\n");
  }
  for (const std::string& f : failures) std::fprintf(stderr, "audit failure: %s\n", f.c_str());
  return failures.empty() ? 0 : 1;
}

// --- gradcheck and equivalence ----------------------------------------------------------

std::string case_table(const std::vector<CheckCase>& cases, const char* value_col,
                       double threshold, const std::string& format) {
  const auto pass = [&](const CheckCase& c) {
    return c.value < threshold && (!c.exact || c.value == 0.0);
  };
  if (format == "csv") {
    std::string out = std::string("case,") + value_col + ",pass\n";
    for (const CheckCase& c : cases)
      out += c.name + "," + fmt_err(c.value) + "," + (pass(c) ? "true" : "false") + "\n";
    return out;
  }
  ordered_json j;
  j["threshold"] = threshold;
  double worst = 0.0;
  bool all = true;
  j["cases"] = ordered_json::array();
  for (const CheckCase& c : cases) {
    j["cases"].push_back({{"name", c.name}, {value_col, c.value}, {"pass", pass(c)}});
    worst = std::max(worst, c.value);
    all = all && pass(c);
  }
  j["worst"] = worst;
  j["pass"] = all;
  return j.dump(2) + "\n";
}

int report_cases(const RunConfig& rc, const std::string& stem,
                 const std::vector<CheckCase>& cases, const char* value_col, double threshold) {
  emit_report(rc, stem, case_table(cases, value_col, threshold, rc.format));
  int bad = 0;
  for (const CheckCase& c : cases) {
    if (c.value < threshold && (!c.exact || c.value == 0.0)) continue;
    ++bad;
    std::fprintf(stderr, "%s: %s = %s exceeds %s\n", stem.c_str(), c.name.c_str(),
                 fmt_err(c.value).c_str(),
                 c.exact && c.value < threshold ? "exact zero" : fmt_err(threshold).c_str());
  }
  return bad == 0 ? 0 : 1;
}

int cmd_gradcheck(const RunConfig& rc) {
  if (rc.seeds.empty()) throw ConfigError("gradcheck needs a seed");
  const auto cases = gradcheck_suite(rc.seeds[0], 20, rc.inject_fault);
  return report_cases(rc, "gradcheck", cases, "max_rel_err", kGradTolerance);
}

int cmd_equivalence(const RunConfig& rc) {
  if (rc.seeds.empty()) throw ConfigError("equivalence needs a seed");
  const auto cases = equivalence_suite(rc.seeds[0], 120);
  return report_cases(rc, "equivalence", cases, "deviation", kEquivTolerance);
}

// --- metrics ----------------------------------------------------------------------------

Tensor csv_tensor(const CsvTable& t) {
  Tensor out({t.rows, t.cols});
  std::copy(t.values.begin(), t.values.end(), out.data->begin());
  return out;
}

int cmd_metrics(const RunConfig& rc) {
  if (rc.frechet_files.empty() && rc.inception_file.empty())
    throw ConfigError("metrics needs --frechet P.csv Q.csv and/or --inception P.csv");
  ordered_json j;
  try {
    if (!rc.frechet_files.empty()) {
      const CsvTable p = read_csv(rc.frechet_files[0]);
      const CsvTable q = read_csv(rc.frechet_files[1]);
      j["frechet"] = frechet_distance(fit_gaussian_stats(csv_tensor(p)),
                                      fit_gaussian_stats(csv_tensor(q)));
    }
    if (!rc.inception_file.empty()) {
      const CsvTable p = read_csv(rc.inception_file);
      ProbMatrix pm;
      pm.n = p.rows;
      pm.l = p.cols;
      pm.p = p.values;
      pm.validate();
      j["inception_score"] = inception_score(pm);
    }
  } catch (const ValueError& e) {
    throw ConfigError(e.what());
  } catch (const ShapeError& e) {
    throw ConfigError(e.what());
  }

  if (rc.format == "csv") {
    std::string out = "metric,value\n";
    for (const auto& [key, value] : j.items())
      out += key + "," + fmt17(value.get<double>()) + "\n";
    emit_report(rc, "metrics", out);
  } else {
    emit_report(rc, "metrics", j.dump(2) + "\n");
  }
  return 0;
}

// --- wiring -----------------------------------------------------------------------------

void add_common(CLI::App* sc, RunConfig& rc, std::string& config_path, bool with_seeds) {
  if (with_seeds)
    sc->add_option("--seeds", rc.seeds, "comma-separated seed list")->delimiter(',');
  sc->add_option("--out", rc.out, "directory for artifacts and report copies");
  sc->add_option("--config", config_path, "JSON config file (defaults < config < flags)");
  sc->add_option("--format", rc.format, "report format")
      ->check(CLI::IsMember({"csv", "json"}));
}

int run(int argc, char** argv) {
  RunConfig rc;
  const std::string config_path = scan_config_path(argc, argv);
  if (!config_path.empty()) apply_config_file(config_path, rc);

  CLI::App app{"gated-convolution GAN laboratory"};
  app.set_version_flag("--version", "0.1.0");
  app.require_subcommand(1);
  std::string config_dummy;

  CLI::App* toy = app.add_subcommand(
      "toy-gan", "train the toy pair on the ring mixture and report mode coverage");
  add_common(toy, rc, config_dummy, /*with_seeds=*/true);
  toy->add_option("--kind", rc.kind, "layer kind to train (default: both)")
      ->check(CLI::IsMember({"conv", "gconv"}));
  toy->add_option("--loss", rc.loss, "adversarial loss")
      ->check(CLI::IsMember({"ce", "hinge", "lsgan"}));
  toy->add_option("--iterations", rc.iterations, "generator steps")
      ->check(CLI::NonNegativeNumber);

  CLI::App* audit =
      app.add_subcommand("param-audit", "count generator conv weights at 32/128/256");
  add_common(audit, rc, config_dummy, /*with_seeds=*/false);

  CLI::App* grad = app.add_subcommand(
      "gradcheck", "finite-difference gradient checks across every layer kind");
  add_common(grad, rc, config_dummy, /*with_seeds=*/true);
  grad->add_flag("--inject-fault", rc.inject_fault)->group("");

  CLI::App* equiv = app.add_subcommand(
      "equivalence", "compare the fused gated-conv path against the per-sample direct path");
  add_common(equiv, rc, config_dummy, /*with_seeds=*/true);

  CLI::App* met = app.add_subcommand("metrics", "distribution metrics over CSV sample files");
  add_common(met, rc, config_dummy, /*with_seeds=*/false);
  met->add_option("--frechet", rc.frechet_files,
                  "two sample CSVs; reports the Gaussian-fit Frechet distance")
      ->expected(2);
  met->add_option("--inception", rc.inception_file,
                  "per-sample class probability CSV; reports the inception score");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  if (!rc.out.empty()) {
    std::error_code ec;
    fs::create_directories(rc.out, ec);
    if (ec) throw ConfigError("cannot create output directory " + rc.out);
  }

  if (app.got_subcommand(toy)) return cmd_toy_gan(rc);
  if (app.got_subcommand(audit)) return cmd_param_audit(rc);
  if (app.got_subcommand(grad)) return cmd_gradcheck(rc);
  if (app.got_subcommand(equiv)) return cmd_equivalence(rc);
  return cmd_metrics(rc);
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}
