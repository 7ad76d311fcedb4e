#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <sys/wait.h>

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <string>

#include "json.hpp"

using nlohmann::json;

namespace {

std::string cli_path() {
  const char* p = std::getenv("BOTKIT_CLI");
  REQUIRE(p != nullptr);
  return p;
}

struct RunResult {
  int exit_code = -1;
  std::string out;
  std::string err;
};

RunResult run_cli(const std::string& args) {
  static int n = 0;
  std::string out_file = "cli_out_" + std::to_string(n) + ".txt";
  std::string err_file = "cli_err_" + std::to_string(n) + ".txt";
  ++n;
  std::string cmd = cli_path() + " " + args + " >" + out_file + " 2>" + err_file;
  int status = std::system(cmd.c_str());
  RunResult r;
  r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  auto slurp = [](const std::string& path) {
    std::ifstream f(path);
    std::stringstream ss;
    ss << f.rdbuf();
    return ss.str();
  };
  r.out = slurp(out_file);
  r.err = slurp(err_file);
  std::remove(out_file.c_str());
  std::remove(err_file.c_str());
  return r;
}

// the row of the stage table whose first column is `stage`
std::string table_line(const std::string& out, const std::string& stage) {
  std::stringstream ss(out);
  std::string line;
  while (std::getline(ss, line)) {
    if (line.rfind(stage, 0) == 0) return line;
  }
  return "";
}

bool files_identical(const std::string& a, const std::string& b) {
  std::ifstream fa(a, std::ios::binary), fb(b, std::ios::binary);
  std::stringstream sa, sb;
  sa << fa.rdbuf();
  sb << fb.rdbuf();
  return fa.good() == fb.good() && sa.str() == sb.str();
}

}  // namespace

TEST_CASE("describe reports botnet-50 totals and an MHSA stage") {
  RunResult r = run_cli("describe botnet-50 --res 1024");
  REQUIRE(r.exit_code == 0);
  CHECK(r.out.find("MHSA") != std::string::npos);
  CHECK(r.out.find("conv7x7") != std::string::npos);
  std::string total = table_line(r.out, "total");
  // params at 1024 include the larger relative tables (20,852,008 at 224)
  CHECK(total.find("20903208") != std::string::npos);
  CHECK(total.find("102991085568") != std::string::npos);
  CHECK(r.out.find("# params") != std::string::npos);
}

TEST_CASE("an all-zero replacement collapses to the plain resnet") {
  RunResult a = run_cli("describe botnet-50 --res 224 --replacement 0,0,0");
  RunResult b = run_cli("describe resnet-50 --res 224");
  REQUIRE(a.exit_code == 0);
  REQUIRE(b.exit_code == 0);
  CHECK(table_line(a.out, "total") == table_line(b.out, "total"));
  CHECK(a.out.find("MHSA") == std::string::npos);
}

TEST_CASE("describe can export a spec file that round-trips") {
  std::string spec_path = "cli_roundtrip.json";
  RunResult r = run_cli("describe botnet_s1-59 --res 224 --json " + spec_path);
  REQUIRE(r.exit_code == 0);
  {
    std::ifstream f(spec_path);
    json j = json::parse(f);
    CHECK(j.at("family") == "botnet_s1");
    CHECK(j.at("blockgroups") == json::array({3, 4, 6, 6}));
  }
  RunResult again = run_cli("describe " + spec_path);
  REQUIRE(again.exit_code == 0);
  CHECK(table_line(again.out, "total") == table_line(r.out, "total"));
  std::remove(spec_path.c_str());
}

TEST_CASE("compare reports the attention delta at 1024") {
  RunResult r = run_cli("compare botnet-50 resnet-50 --res 1024");
  REQUIRE(r.exit_code == 0);
  CHECK(r.out.find("c5") != std::string::npos);
  CHECK(r.out.find("17576230912") != std::string::npos);

  RunResult same = run_cli("compare resnet-50 resnet-50 --res 224");
  REQUIRE(same.exit_code == 0);
}

TEST_CASE("verify subcommand runs green suites and rejects bad names") {
  RunResult r = run_cli("verify --suite invariants --seed 5");
  CHECK(r.exit_code == 0);
  json j = json::parse(r.out);
  CHECK(j.at("pass").get<bool>());
  for (const auto& row : j.at("rows")) CHECK(row.at("status") == "pass");

  RunResult bad = run_cli("verify --suite nonsense");
  CHECK(bad.exit_code == 2);
}

TEST_CASE("invalid arch names and shapes exit with code 2") {
  CHECK(run_cli("describe resnet-51").exit_code == 2);
  CHECK(run_cli("describe resnet-50 --res 200").exit_code == 2);
  CHECK(run_cli("frobnicate").exit_code == 2);
}

TEST_CASE("infer is deterministic and validates its input resolution") {
  std::string base =
      "infer botnet-50 --res 224 --width-div 8 --seed 11 --random 1x3x224x224";
  RunResult a = run_cli(base + " --output cli_a.botk");
  REQUIRE(a.exit_code == 0);
  json ja = json::parse(a.out);
  auto shape = ja.at("output_shape").get<std::vector<int>>();
  CHECK(shape == std::vector<int>{1, 1000});
  CHECK(ja.at("stages").size() == 5);

  RunResult b = run_cli(base + " --output cli_b.botk");
  REQUIRE(b.exit_code == 0);
  CHECK(files_identical("cli_a.botk", "cli_b.botk"));
  std::remove("cli_a.botk");
  std::remove("cli_b.botk");

  RunResult bad = run_cli(
      "infer botnet-50 --res 224 --width-div 8 --seed 11 --random 1x3x256x256 "
      "--output cli_bad.botk");
  CHECK(bad.exit_code == 2);
  CHECK(bad.err.find("position encodings") != std::string::npos);
}
