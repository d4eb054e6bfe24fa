#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <unistd.h>

#include "piattn/cli.hpp"

using namespace piattn;
namespace fs = std::filesystem;

namespace {

struct CliRun {
    int code;
    std::string out, err;
};

fs::path scratch(const std::string& name) {
    return fs::temp_directory_path() / ("piattn_cli_" + std::to_string(::getpid())) / name;
}

CliRun run(std::vector<std::string> args, const std::string& outdir) {
    args.insert(args.begin(), {"piattn", "--out", scratch(outdir).string()});
    std::ostringstream out, err;
    const int code = cli_dispatch(args, out, err);
    return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream s;
    s << in.rdbuf();
    return s.str();
}

}  // namespace

TEST_CASE("rf-bound single point") {
    const CliRun r = run({"rf-bound", "--k", "1", "--pi", "4", "--layers", "4"}, "rf");
    CHECK(r.code == 0);
    CHECK(r.out.find("\"restricted\":12") != std::string::npos);
    CHECK(r.out.find("\"bound\":12") != std::string::npos);
    CHECK(fs::exists(scratch("rf") / "rf.csv"));
    CHECK(fs::exists(scratch("rf") / "manifest.json"));
}

TEST_CASE("oracle-check small grid") {
    const CliRun r = run({"oracle-check", "--grid", "small"}, "oracle");
    CHECK(r.code == 0);
    const std::string csv = slurp(scratch("oracle") / "oracle.csv");
    CHECK(csv.rfind("n,k,pi,H,causal,ablation,max_abs_diff\n", 0) == 0);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 121);
    CHECK(run({"oracle-check", "--grid", "huge"}, "oracle_bad").code == 2);
}

TEST_CASE("usage errors exit 2") {
    CHECK(run({"rf-bound", "--bogus"}, "u1").code == 2);
    CHECK(run({"no-such-command"}, "u2").code == 2);
    CHECK(run({}, "u3").code == 2);
    CHECK(run({"train"}, "u4").code == 2);
    CHECK(run({"decode", "--ckpt", "/nonexistent.bin", "--prompt", "1"}, "u5").code == 2);
}

TEST_CASE("validate-config reports the field") {
    fs::create_directories(scratch(""));
    const fs::path bad = scratch("bad.json");
    std::ofstream(bad) << R"({"model":{"d_model":16,"n_heads":3}})";
    const CliRun r = run({"validate-config", bad.string()}, "val_bad");
    CHECK(r.code == 2);
    CHECK(r.err.find("model.n_heads") != std::string::npos);

    const fs::path good = scratch("good.json");
    std::ofstream(good) << R"({"model":{"d_model":16,"n_heads":2},"attention":{"ring_k":1,"skip_period":4}})";
    const CliRun ok = run({"validate-config", good.string(), "--n", "8"}, "val_good");
    CHECK(ok.code == 0);
    CHECK(ok.out.rfind("token,offset,kind,valid\n", 0) == 0);
    CHECK(ok.out.find("5,-4,SKIP,1\n") != std::string::npos);
}

TEST_CASE("cost-model evaluation and fit") {
    const CliRun r = run({"cost-model"}, "cost");
    CHECK(r.code == 0);
    CHECK(slurp(scratch("cost") / "cost.csv") == "n,k,d_h,seconds\n1024,4,64,3.932160000e-04\n");

    fs::create_directories(scratch(""));
    const fs::path same = scratch("same.csv");
    std::ofstream(same) << "n,k,d_h,seconds\n512,2,32,1e-4\n512,2,32,1e-4\n512,2,32,1e-4\n";
    const CliRun bad = run({"cost-model", "--fit", same.string()}, "cost_bad");
    CHECK(bad.code == 1);
    CHECK(bad.out.find("rank") != std::string::npos);
}

TEST_CASE("simulate-ring and train write deterministic CSVs") {
    CHECK(run({"simulate-ring", "--shards", "4", "--n", "64"}, "ring").code == 0);
    const std::string msgs = slurp(scratch("ring") / "messages.csv");
    CHECK(msgs.rfind("stage,src,dst,rows,elements\n", 0) == 0);

    const std::vector<std::string> args{"--seed", "4", "train", "--task", "needle", "--steps", "20"};
    CHECK(run(args, "t1").code == 0);
    CHECK(run(args, "t2").code == 0);
    CHECK(slurp(scratch("t1") / "metrics.csv") == slurp(scratch("t2") / "metrics.csv"));
    CHECK(fs::exists(scratch("t1") / "checkpoint.bin"));
    CHECK(fs::exists(scratch("t1") / "timing.json"));

    const CliRun d = run({"decode", "--ckpt", (scratch("t1") / "checkpoint.bin").string(), "--prompt", "1,2,3",
                          "--steps", "5", "--greedy"},
                         "dec");
    CHECK(d.code == 0);
    CHECK(run({"decode", "--ckpt", (scratch("t1") / "checkpoint.bin").string(), "--prompt", "1", "--greedy", "--temp",
               "0.5"},
              "dec2")
              .code == 2);
    fs::remove_all(scratch(""));
}
