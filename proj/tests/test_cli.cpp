#include <doctest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <json.hpp>

#include "cpnet/cpnet.h"

namespace fs = std::filesystem;

namespace {

struct Run {
  int code = -1;
  std::string out;
  std::string err;
};

fs::path work_dir() {
  static const fs::path dir = [] {
    fs::path d = fs::temp_directory_path() / "cpnet_cli_tests";
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Run cli(const std::string& args) {
  const fs::path out = work_dir() / "stdout.txt", err = work_dir() / "stderr.txt";
  const std::string cmd = std::string("'") + CPNET_CLI_PATH + "' " + args + " > '" + out.string() + "' 2> '" +
                          err.string() + "'";
  const int status = std::system(cmd.c_str());
  Run r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = slurp(out);
  r.err = slurp(err);
  return r;
}

std::string path(const std::string& name) { return (work_dir() / name).string(); }

void write_file(const std::string& p, const std::string& text) { std::ofstream(p, std::ios::trunc) << text; }

std::size_t count_lines(const std::string& text) {
  return static_cast<std::size_t>(std::count(text.begin(), text.end(), '\n'));
}

}  // namespace

TEST_SUITE("cli") {
  TEST_CASE("usage errors exit 1") {
    CHECK(cli("").code == 1);
    CHECK(cli("frobnicate").code == 1);
    CHECK(cli("generate --bogus").code == 1);
  }

  TEST_CASE("generate writes a deterministic dataset") {
    const Run a = cli("generate --seed 4 --out " + path("a.cpds"));
    REQUIRE(a.code == 0);
    CHECK(a.out.find("1000 train, 200 val") != std::string::npos);
    REQUIRE(cli("generate --seed 4 --out " + path("b.cpds")).code == 0);
    CHECK(slurp(path("a.cpds")) == slurp(path("b.cpds")));
    CHECK(fs::file_size(path("a.cpds")) == 12 + 1200 * (1 + 4096));
    const Run bad = cli("generate --out " + path("no/such/dir/x.cpds"));
    CHECK(bad.code == 1);
    CHECK(bad.err.find("no/such/dir") != std::string::npos);
  }

  TEST_CASE("train dry run echoes the resolved config") {
    write_file(path("cfg.json"), R"({"model": "c2d", "epochs": 3, "learning_rate": 0.005})");
    const Run r = cli("train --dry-run --config " + path("cfg.json") + " --seed 9");
    REQUIRE(r.code == 0);
    const auto j = nlohmann::json::parse(r.out);
    CHECK(j["model"] == "c2d");
    CHECK(j["epochs"] == 3);
    CHECK(j["seed"] == 9);
    CHECK(j["learning_rate"].get<double>() == 0.005);
    CHECK(j["k"] == 8);
    CHECK(j["backend"] == "tree");
    CHECK_FALSE(fs::exists(path("model.cpt")));
  }

  TEST_CASE("bad configs are rejected before any compute") {
    write_file(path("unknown.json"), R"({"epochs": 1, "learning_rte": 0.1})");
    const Run r = cli("train --config " + path("unknown.json"));
    CHECK(r.code == 1);
    CHECK(r.err.find("learning_rte") != std::string::npos);
    write_file(path("zero.json"), R"({"epochs": 0})");
    CHECK(cli("train --config " + path("zero.json")).code == 1);
    write_file(path("type.json"), R"({"k": "eight"})");
    CHECK(cli("train --config " + path("type.json")).code == 1);
    write_file(path("broken.json"), "{");
    CHECK(cli("train --config " + path("broken.json")).code == 1);
    CHECK(cli("train --config " + path("absent.json")).code == 1);
    CHECK(cli("train --dry-run --backend ball").code == 1);
    write_file(path("outdir.json"), R"({"checkpoint": ")" + path("missing/m.cpt") + R"("})");
    CHECK(cli("train --config " + path("outdir.json")).code == 1);
    write_file(path("nods.json"), R"({"dataset": ")" + path("absent.cpds") + R"("})");
    CHECK(cli("train --config " + path("nods.json")).code == 1);
  }

  TEST_CASE("train, eval and visualize round trip") {
    REQUIRE(cli("generate --seed 0 --out " + path("toy.cpds")).code == 0);
    write_file(path("c2d.json"), R"({"model": "c2d", "epochs": 1, "dataset": ")" + path("toy.cpds") +
                                     R"(", "checkpoint": ")" + path("c2d.cpt") + R"(", "metrics": ")" +
                                     path("c2d.csv") + R"("})");
    const Run t = cli("train --config " + path("c2d.json"));
    REQUIRE(t.code == 0);
    CHECK(t.out.find("final val accuracy") != std::string::npos);
    CHECK(count_lines(slurp(path("c2d.csv"))) == 3);

    const Run e = cli("eval --checkpoint " + path("c2d.cpt") + " --dataset " + path("toy.cpds"));
    CHECK(e.code == 0);
    CHECK(e.out.find("val accuracy") != std::string::npos);
    CHECK(cli("eval --checkpoint " + path("absent.cpt")).code == 1);
    CHECK(cli("eval --checkpoint " + path("c2d.cpt") + " --split test").code == 1);
    write_file(path("junk.cpt"), "junk");
    CHECK(cli("eval --checkpoint " + path("junk.cpt")).code == 2);

    // visualize needs a CP module
    CHECK(cli("visualize --checkpoint " + path("c2d.cpt") + " --out " + path("v.jsonl")).code == 1);
    cpnet_model* m = nullptr;
    REQUIRE(cpnet_model_create(CPNET_MODEL_CPNET, 8, 0, &m) == CPNET_OK);
    REQUIRE(cpnet_model_save(m, path("cp.cpt").c_str()) == CPNET_OK);
    cpnet_model_free(m);
    const Run v = cli("visualize --checkpoint " + path("cp.cpt") + " --dataset " + path("toy.cpds") +
                      " --sample 3 --out " + path("v.jsonl"));
    REQUIRE(v.code == 0);
    CHECK(count_lines(slurp(path("v.jsonl"))) == 4096 + 4);
    CHECK(cli("visualize --checkpoint " + path("cp.cpt") + " --sample 5000 --out " + path("v2.jsonl")).code == 1);
  }

  TEST_CASE("gradcheck exit codes and report") {
    CHECK(cli("gradcheck --epsilon 0").code == 1);
    const Run r = cli("gradcheck --seed 1 --out " + path("gc.csv"));
    CHECK(r.code == 0);
    CHECK(r.out.find("gradcheck passed") != std::string::npos);
    const std::string first = slurp(path("gc.csv"));
    REQUIRE(cli("gradcheck --seed 1 --out " + path("gc2.csv")).code == 0);
    CHECK(first == slurp(path("gc2.csv")));
  }

  TEST_CASE("bench-knn prints rows, growth and the cross-check") {
    const Run r = cli("bench-knn --sizes 64,128 --channels 8 --reps 1 --out " + path("bench.csv"));
    REQUIRE(r.code == 0);
    CHECK(r.out.find("backend,thw,c,k,millis") != std::string::npos);
    CHECK(r.out.find("growth brute thw 64 -> 128") != std::string::npos);
    CHECK(r.out.find("all backends agree") != std::string::npos);
    CHECK(count_lines(slurp(path("bench.csv"))) == 5);
    CHECK(cli("bench-knn --sizes 128,64").code == 1);
    CHECK(cli("bench-knn --sizes 66").code == 1);
    CHECK(cli("bench-knn --sizes ''").code == 1);
    CHECK(cli("bench-knn --sizes 64 --backend ball").code == 1);
  }
}
