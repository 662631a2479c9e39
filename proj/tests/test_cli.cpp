// Black-box tests of the gconv-lab binary: exit codes, artifact layout,
// output formats, config precedence, and determinism across thread counts.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct CmdResult {
  int code = -1;
  std::string out;
};

// Runs the binary through the shell, capturing stdout; stderr goes to a side
// file so failures still show up in the test log.
CmdResult run_cli(const std::string& args, const std::string& env = "") {
  const std::string err_file = (fs::temp_directory_path() / "gconv_cli_err.txt").string();
  std::string cmd = env;
  if (!cmd.empty()) cmd += " ";
  cmd += std::string(GCONV_CLI_BIN) + " " + args + " 2>" + err_file;
  FILE* pipe = popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  CmdResult r;
  char buf[4096];
  size_t n;
  while ((n = fread(buf, 1, sizeof buf, pipe)) > 0) r.out.append(buf, n);
  const int status = pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  if (r.code != 0) {
    std::ifstream err(err_file);
    std::stringstream ss;
    ss << err.rdbuf();
    INFO("stderr: " << ss.str());
  }
  return r;
}

fs::path fresh_dir(const char* name) {
  const fs::path dir = fs::temp_directory_path() / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in.good());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write(const fs::path& p, const std::string& body) {
  std::ofstream out(p, std::ios::binary);
  out << body;
}

}  // namespace

TEST_CASE("param-audit reports the pinned counts") {
  const CmdResult r = run_cli("param-audit");
  REQUIRE(r.code == 0);
  const json j = json::parse(r.out);
  CHECK(j["audit"]["conv_weights_32"] == 3'545'856);
  CHECK(j["audit"]["gconv_weights_32"] == 4'381'440);
  CHECK(j["audit"]["pass"] == true);
  REQUIRE(j["reports"].size() == 6);
  for (const auto& rep : j["reports"]) {
    CHECK(rep["conv_weights"].get<long>() > 0);
    CHECK(rep.contains("layers"));
  }

  const CmdResult csv = run_cli("param-audit --format csv");
  REQUIRE(csv.code == 0);
  CHECK(csv.out.rfind("resolution,conv_kind,conv_weights,gconv_extra\n", 0) == 0);
  CHECK(csv.out.find("32,conv,3545856,") != std::string::npos);
  CHECK(csv.out.find("32,gconv,4381440,") != std::string::npos);
}

TEST_CASE("equivalence passes and reports its threshold") {
  const CmdResult r = run_cli("equivalence");
  REQUIRE(r.code == 0);
  const json j = json::parse(r.out);
  CHECK(j["pass"] == true);
  CHECK(j["threshold"] == 1e-9);
  CHECK(j["cases"].size() >= 100);
  CHECK(j["worst"].get<double>() < 1e-9);
}

TEST_CASE("gradcheck passes clean and fails with an injected fault") {
  const CmdResult ok = run_cli("gradcheck");
  REQUIRE(ok.code == 0);
  const json j = json::parse(ok.out);
  CHECK(j["pass"] == true);
  CHECK(j["worst"].get<double>() < 1e-5);

  const CmdResult bad = run_cli("gradcheck --inject-fault");
  CHECK(bad.code == 1);
  const json jb = json::parse(bad.out);
  CHECK(jb["pass"] == false);
}

TEST_CASE("bad invocations exit with 2") {
  CHECK(run_cli("no-such-command").code == 2);
  CHECK(run_cli("gradcheck --no-such-flag").code == 2);
  CHECK(run_cli("toy-gan --kind banana --iterations 0").code == 2);
  CHECK(run_cli("toy-gan --iterations -3").code == 2);
  CHECK(run_cli("metrics").code == 2);
  CHECK(run_cli("metrics --frechet /nonexistent/a.csv /nonexistent/b.csv").code == 2);

  const fs::path dir = fresh_dir("gconv_cli_cfg");
  write(dir / "bad_key.json", "{\"seeds\": [1], \"volume\": 11}");
  CHECK(run_cli("toy-gan --config " + (dir / "bad_key.json").string()).code == 2);
  write(dir / "bad_json.json", "{not json");
  CHECK(run_cli("toy-gan --config " + (dir / "bad_json.json").string()).code == 2);
  write(dir / "bad_train.json", "{\"train\": {\"lr_g\": -1.0}}");
  CHECK(run_cli("toy-gan --iterations 0 --seeds 1 --config " +
                (dir / "bad_train.json").string())
            .code == 2);

  CHECK(run_cli("toy-gan --iterations 0 --seeds 1",
                "GCONV_LAB_THREADS=zero").code == 2);
  CHECK(run_cli("toy-gan --iterations 0 --seeds 1",
                "GCONV_LAB_THREADS=0").code == 2);
  CHECK(run_cli("--help").code == 0);
}

TEST_CASE("toy-gan writes the documented artifacts") {
  const fs::path dir = fresh_dir("gconv_cli_toy");
  const CmdResult r =
      run_cli("toy-gan --iterations 0 --seeds 11 --kind gconv --out " + dir.string());
  REQUIRE(r.code == 0);
  for (const char* f : {"history_gconv_11.csv", "samples_gconv_11.csv", "summary.json",
                        "checkpoint_gconv_11.json", "checkpoint_gconv_11.bin"})
    CHECK(fs::exists(dir / f));

  CHECK(slurp(dir / "history_gconv_11.csv") ==
        "iter,loss_d,loss_g,mode_coverage,high_quality_ratio\n");
  const std::string samples = slurp(dir / "samples_gconv_11.csv");
  CHECK(samples.rfind("x,y\n", 0) == 0);
  // header plus one line per sample, LF only
  CHECK(std::count(samples.begin(), samples.end(), '\n') == 10'001);
  CHECK(samples.find('\r') == std::string::npos);

  const json j = json::parse(slurp(dir / "summary.json"));
  REQUIRE(j["runs"].size() == 1);
  CHECK(j["runs"][0]["kind"] == "gconv");
  CHECK(j["runs"][0]["seed"] == 11);
  const int covered = j["runs"][0]["covered_modes"].get<int>();
  CHECK(covered >= 0);
  CHECK(covered <= 8);
  // single run: coverage is mirrored at the top level
  CHECK(j["covered_modes"] == covered);
  CHECK(j["meta"].contains("created"));
}

TEST_CASE("toy-gan covers kind x seed and is reproducible across thread caps") {
  const fs::path d1 = fresh_dir("gconv_cli_rep1");
  const fs::path d2 = fresh_dir("gconv_cli_rep2");
  const std::string args = "toy-gan --iterations 20 --seeds 1,2 --out ";
  REQUIRE(run_cli(args + d1.string(), "GCONV_LAB_THREADS=1").code == 0);
  REQUIRE(run_cli(args + d2.string(), "GCONV_LAB_THREADS=2").code == 0);

  int files = 0;
  for (const char* kind : {"conv", "gconv"})
    for (const char* seed : {"1", "2"})
      for (const char* stem : {"history_", "samples_"}) {
        const std::string name = stem + std::string(kind) + "_" + seed + ".csv";
        CAPTURE(name);
        REQUIRE(fs::exists(d1 / name));
        CHECK(slurp(d1 / name) == slurp(d2 / name));
        ++files;
      }
  CHECK(files == 8);

  json a = json::parse(slurp(d1 / "summary.json"));
  json b = json::parse(slurp(d2 / "summary.json"));
  CHECK(a["runs"] == b["runs"]);
  // both kinds trained: no top-level coverage mirror for multi-run summaries
  CHECK(!a.contains("covered_modes"));
  std::vector<std::pair<std::string, long>> order;
  for (const auto& run : a["runs"])
    order.push_back({run["kind"].get<std::string>(), run["seed"].get<long>()});
  CHECK(order == std::vector<std::pair<std::string, long>>{
                     {"conv", 1}, {"conv", 2}, {"gconv", 1}, {"gconv", 2}});
  for (const auto& run : a["runs"]) {
    CHECK(run.contains("final_loss_d"));
    CHECK(run.contains("final_loss_g"));
  }
}

TEST_CASE("config file fills defaults and flags override it") {
  const fs::path dir = fresh_dir("gconv_cli_prec");
  write(dir / "cfg.json",
        "{\"iterations\": 999, \"kind\": \"conv\", \"seeds\": [5],"
        " \"train\": {\"batch_g\": 32, \"batch_d\": 32},"
        " \"gmm\": {\"modes\": 4}}");
  const CmdResult r = run_cli("toy-gan --config " + (dir / "cfg.json").string() +
                              " --iterations 10 --out " + dir.string());
  REQUIRE(r.code == 0);
  const json j = json::parse(slurp(dir / "summary.json"));
  CHECK(j["config"]["iterations"] == 10);  // flag beats file
  CHECK(j["config"]["batch_g"] == 32);     // file beats default
  CHECK(j["config"]["gmm"]["modes"] == 4);
  REQUIRE(j["runs"].size() == 1);
  CHECK(j["runs"][0]["kind"] == "conv");
  CHECK(j["runs"][0]["seed"] == 5);
  CHECK(fs::exists(dir / "history_conv_5.csv"));

  const std::string hist = slurp(dir / "history_conv_5.csv");
  CHECK(hist.rfind("iter,loss_d,loss_g,mode_coverage,high_quality_ratio\n", 0) == 0);
  CHECK(hist.find("\n10,") != std::string::npos);  // final snapshot row
}

TEST_CASE("metrics computes closed-form values from CSV input") {
  const fs::path dir = fresh_dir("gconv_cli_metrics");
  // same covariance, mean shifted by 5 in x: squared distance 25
  write(dir / "a.csv", "x,y\n0,0\n1,0\n0,1\n1,1\n");
  write(dir / "b.csv", "x,y\n5,0\n6,0\n5,1\n6,1\n");
  // one-hot rows over two classes: score is exactly the class count
  write(dir / "p.csv", "p0,p1\n1,0\n0,1\n");

  const CmdResult r = run_cli("metrics --frechet " + (dir / "a.csv").string() + " " +
                              (dir / "b.csv").string() + " --inception " +
                              (dir / "p.csv").string());
  REQUIRE(r.code == 0);
  const json j = json::parse(r.out);
  CHECK(j["frechet"].get<double>() == doctest::Approx(25.0).epsilon(1e-12));
  CHECK(j["inception_score"].get<double>() == doctest::Approx(2.0).epsilon(1e-12));

  const CmdResult csv = run_cli("metrics --format csv --frechet " + (dir / "a.csv").string() +
                                " " + (dir / "b.csv").string());
  REQUIRE(csv.code == 0);
  CHECK(csv.out.rfind("metric,value\n", 0) == 0);
  CHECK(csv.out.find("frechet,25") != std::string::npos);

  // malformed inputs are configuration errors
  write(dir / "nohdr.csv", "");
  CHECK(run_cli("metrics --inception " + (dir / "nohdr.csv").string()).code == 2);
  write(dir / "ragged.csv", "x,y\n1,2\n3\n");
  CHECK(run_cli("metrics --frechet " + (dir / "ragged.csv").string() + " " +
                (dir / "a.csv").string())
            .code == 2);
  write(dir / "nonnum.csv", "x,y\n1,two\n");
  CHECK(run_cli("metrics --frechet " + (dir / "nonnum.csv").string() + " " +
                (dir / "a.csv").string())
            .code == 2);
  // rows that do not sum to one fail the probability check
  write(dir / "badp.csv", "p0,p1\n0.7,0.7\n");
  CHECK(run_cli("metrics --inception " + (dir / "badp.csv").string()).code == 2);
}

TEST_CASE("reports are mirrored into the out directory") {
  const fs::path dir = fresh_dir("gconv_cli_mirror");
  const CmdResult r = run_cli("param-audit --out " + dir.string());
  REQUIRE(r.code == 0);
  REQUIRE(fs::exists(dir / "param_audit.json"));
  CHECK(json::parse(slurp(dir / "param_audit.json")) == json::parse(r.out));

  const CmdResult c = run_cli("param-audit --format csv --out " + dir.string());
  REQUIRE(c.code == 0);
  CHECK(slurp(dir / "param_audit.csv") == c.out);
}
