#include "piattn/cli.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "piattn/checks.hpp"
#include "piattn/decoder.hpp"
#include "piattn/perf.hpp"
#include "piattn/rfield.hpp"
#include "piattn/trainer.hpp"

#ifndef PIATTN_VERSION
#define PIATTN_VERSION "0.0.0"
#endif
#ifndef PIATTN_GIT
#define PIATTN_GIT "unknown"
#endif
#ifndef PIATTN_DATA_DIR
#define PIATTN_DATA_DIR "data"
#endif

namespace piattn {

std::string version_string() { return std::string(PIATTN_VERSION) + "+" + PIATTN_GIT; }

namespace {

using nlohmann::json;
namespace fs = std::filesystem;

struct Globals {
    std::uint64_t seed = 1;
    bool seed_given = false;
    std::string config;
    std::string out;
    std::size_t threads = 1;
};

// Usage/config problems map to exit code 2.
class UsageError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

std::string utc_timestamp() {
    const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    char buf[32];
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

std::string num(double v, const char* f = "%.6g") {
    char buf[64];
    std::snprintf(buf, sizeof(buf), f, v);
    return buf;
}

class Run {
public:
    Run(std::string command, const Globals& g, std::ostream& out, std::vector<std::string> argv)
        : command_(std::move(command)), g_(g), out_(out), argv_(std::move(argv)) {
        dir_ = g.out.empty() ? fs::path("out") / command_ : fs::path(g.out);
        fs::create_directories(dir_);
    }

    void write(const std::string& name, const std::string& content, bool binary_done = false) {
        if (!binary_done) {
            std::ofstream f(dir_ / name, std::ios::binary);
            if (!f) throw std::runtime_error("cannot write " + (dir_ / name).string());
            f << content;
        }
        files_.push_back(name);
    }
    std::string path(const std::string& name) const { return (dir_ / name).string(); }

    void row(const std::string& key, const std::string& value) { table_.emplace_back(key, value); }

    json summary = json::object();

    int finish(bool pass, const std::string& first_failure = "") {
        summary["command"] = command_;
        summary["pass"] = pass;
        if (!pass && !first_failure.empty()) summary["first_failure"] = first_failure;
        std::size_t width = 0;
        for (const auto& [k, v] : table_) width = std::max(width, k.size());
        out_ << command_ << (pass ? "  PASS" : "  FAIL") << "\n";
        for (const auto& [k, v] : table_) out_ << "  " << std::left << std::setw(static_cast<int>(width)) << k << "  " << v << "\n";
        if (!pass && !first_failure.empty()) out_ << "  first failure: " << first_failure << "\n";
        out_ << summary.dump() << "\n";
        write("summary.json", summary.dump(2) + "\n");
        json manifest = {{"command", command_},
                         {"argv", argv_},
                         {"config", g_.config},
                         {"seed", summary.value("seed", g_.seed)},
                         {"threads", g_.threads},
                         {"version", version_string()},
                         {"output_dir", dir_.string()},
                         {"timestamp", utc_timestamp()},
                         {"files", files_}};
        std::ofstream(dir_ / "manifest.json") << manifest.dump(2) << "\n";
        return pass ? 0 : 1;
    }

private:
    std::string command_;
    Globals g_;
    std::ostream& out_;
    std::vector<std::string> argv_;
    fs::path dir_;
    std::vector<std::pair<std::string, std::string>> table_;
    std::vector<std::string> files_;
};

RunConfig config_or_default(const Globals& g) { return g.config.empty() ? RunConfig{} : load_run_config(g.config); }

// ---- subcommands -----------------------------------------------------------

int cmd_oracle(Run& run, const Globals& g, const std::string& grid_name) {
    OracleGrid grid;
    if (grid_name == "full") grid = OracleGrid::full();
    else if (grid_name == "small") grid = OracleGrid::small();
    else throw UsageError("--grid must be small or full");
    const auto t0 = std::chrono::steady_clock::now();
    const OracleReport rep = oracle_check(grid, g.seed);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    run.write("oracle.csv", oracle_csv(rep));
    run.row("configs", std::to_string(rep.rows.size()));
    run.row("max |sparse - oracle|", num(rep.worst, "%.3e"));
    run.row("tolerance", "1e-10");
    run.row("seconds", num(secs, "%.2f"));
    run.summary["configs"] = rep.rows.size();
    run.summary["max_abs_diff"] = rep.worst;
    std::string first;
    for (const OracleRow& r : rep.rows) {
        if (r.max_abs_diff < 1e-10) continue;
        first = "n=" + std::to_string(r.n) + " k=" + std::to_string(r.k) + " pi=" + std::to_string(r.pi) +
                " H=" + std::to_string(r.heads) + " causal=" + (r.causal ? "1" : "0") + " ablation=" +
                to_string(r.ablation) + " diff=" + num(r.max_abs_diff, "%.3e");
        break;
    }
    return run.finish(rep.pass, first);
}

int cmd_grad(Run& run, const Globals& g) {
    const GradReport rep = block_grad_check(g.seed);
    run.write("grad_check.csv", grad_csv(rep));
    run.row("tensors", std::to_string(rep.rows.size()));
    run.row("max relative error", num(rep.worst, "%.3e"));
    run.row("tolerance", "1e-6");
    run.summary["max_rel_error"] = rep.worst;
    std::string first;
    for (const GradRow& r : rep.rows)
        if (r.max_rel_error >= 1e-6 && first.empty()) first = r.tensor + " rel=" + num(r.max_rel_error, "%.3e");
    return run.finish(rep.pass, first);
}

int cmd_rf(Run& run, const Globals& g, CLI::App* sub, std::size_t k, std::size_t pi, std::size_t layers,
           std::size_t n) {
    const RunConfig rc = config_or_default(g);
    AttentionConfig base = rc.model.attention;
    if (!base.causal) throw UsageError("rf-bound analyzes causal stacks; set model.attention.causal");
    RfGrid grid;
    if (sub->count("--k")) grid.ks = {k};
    if (sub->count("--pi")) grid.pis = {pi};
    if (sub->count("--layers")) grid.layers = {layers};
    grid.n = n;
    const std::vector<RfRow> rows = rf_report(base, grid);
    run.write("rf.csv", rf_csv(rows));
    bool pass = true;
    std::string first;
    std::size_t holds = 0, interior = 0, equal = 0;
    for (const RfRow& r : rows) {
        holds += r.bound_holds_restricted;
        interior += r.interior;
        equal += r.interior && r.restricted_reach == r.bound;
        const bool ok = r.bound_holds_restricted && (!r.interior || r.restricted_reach == r.bound);
        if (!ok && pass) {
            first = "k=" + std::to_string(r.k) + " pi=" + std::to_string(r.pi) + " L=" + std::to_string(r.layers) +
                    " restricted=" + std::to_string(r.restricted_reach) + " bound=" + std::to_string(r.bound);
        }
        pass = pass && ok;
    }
    if (rows.size() == 1) {
        const RfRow& r = rows.front();
        run.row("restricted", std::to_string(r.restricted_reach));
        run.row("bound", std::to_string(r.bound));
        run.row("full", std::to_string(r.full_reach));
        run.summary["restricted"] = r.restricted_reach;
        run.summary["bound"] = r.bound;
        run.summary["full"] = r.full_reach;
    }
    run.row("grid points", std::to_string(rows.size()));
    run.row("bound holds (restricted)", std::to_string(holds) + "/" + std::to_string(rows.size()));
    run.row("equality at interior", std::to_string(equal) + "/" + std::to_string(interior));
    run.summary["points"] = rows.size();
    run.summary["bound_holds"] = holds;
    run.summary["interior_equal"] = equal;
    run.summary["interior"] = interior;
    return run.finish(pass, first);
}

TaskKind task_from_flag(const std::string& s) {
    if (s == "copy") return TaskKind::copy_at_pi;
    if (s == "needle") return TaskKind::needle_retrieval;
    if (s == "charlm") return TaskKind::char_lm;
    throw UsageError("--task must be copy, needle or charlm");
}

int cmd_train(Run& run, const Globals& g, CLI::App* sub, const std::string& task_flag, std::size_t steps,
              const std::string& ablation) {
    RunConfig rc;
    if (!g.config.empty()) {
        rc = load_run_config(g.config);
        if (!task_flag.empty() && task_from_flag(task_flag) != rc.task.kind) {
            throw ConfigError("task.kind", "config says " + to_string(rc.task.kind) + " but --task is " + task_flag);
        }
    } else {
        if (task_flag.empty()) throw UsageError("train needs --task or --config");
        rc = preset(task_from_flag(task_flag), PIATTN_DATA_DIR);
    }
    if (g.seed_given) rc.train.seed = g.seed;
    if (sub->count("--steps")) rc.train.steps = steps;
    if (sub->count("--ablation")) rc.model.attention.ablation = parse_ablation(ablation);
    const Task task = load_task(rc.task);
    if (rc.task.kind == TaskKind::char_lm) rc.model.vocab = task.vocab;
    rc.model.validate();
    rc.train.validate();

    TrainOptions opt;
    opt.threads = g.threads;
    const TrainResult res = train(rc, task, opt);
    run.write("metrics.csv", metrics_csv(res.metrics));
    json timing = json::array();
    for (const MetricRow& m : res.metrics) timing.push_back({{"step", m.step}, {"tokens_per_sec", m.tokens_per_sec}});
    run.write("timing.json", json{{"wall_seconds", res.wall_seconds}, {"eval_rows", timing}}.dump(2) + "\n");

    Checkpoint ck{rc, res.params, json::object()};
    ck.extra["task"] = to_json(rc.task);
    if (!task.alphabet.empty()) {
        json codes = json::array();
        for (unsigned char ch : task.alphabet) codes.push_back(static_cast<int>(ch));
        ck.extra["alphabet"] = codes;
    }
    save_checkpoint(run.path("checkpoint.bin"), ck);
    run.write("checkpoint.bin", "", true);

    const double acc = res.final_eval.accuracy;
    run.row("task", to_string(rc.task.kind));
    run.row("ablation", to_string(rc.model.attention.ablation));
    run.row("steps run", std::to_string(res.steps_run));
    run.row("final loss", num(res.losses.empty() ? 0.0 : res.losses.back()));
    run.row("eval loss", num(res.final_eval.loss));
    run.row("eval accuracy", num(acc, "%.4f"));
    run.row("rejected steps", std::to_string(res.rejected_steps));
    run.row("wall seconds", num(res.wall_seconds, "%.1f"));
    run.summary["seed"] = rc.train.seed;
    run.summary["steps_run"] = res.steps_run;
    run.summary["eval_accuracy"] = acc;
    run.summary["eval_loss"] = res.final_eval.loss;
    const bool pass = rc.train.target_accuracy <= 0.0 || acc >= rc.train.target_accuracy;
    return run.finish(pass, pass ? "" : "accuracy " + num(acc, "%.4f") + " below target " + num(rc.train.target_accuracy));
}

int cmd_decode(Run& run, const Globals& g, CLI::App* sub, const std::string& ckpt_path, const std::string& prompt_text,
               std::size_t steps, double temp) {
    if (ckpt_path.empty()) throw UsageError("decode needs --ckpt");
    const bool greedy = sub->count("--greedy") > 0;
    if (greedy && sub->count("--temp")) throw UsageError("--greedy and --temp are exclusive");
    const Checkpoint ck = load_checkpoint(ckpt_path);
    const ModelConfig& m = ck.config.model;
    std::string alphabet;
    if (ck.extra.contains("alphabet"))
        for (int c : ck.extra["alphabet"]) alphabet.push_back(static_cast<char>(c));

    std::vector<std::size_t> prompt;
    if (!alphabet.empty()) {
        for (char ch : prompt_text) {
            const auto at = alphabet.find(ch);
            if (at == std::string::npos) throw UsageError(std::string("prompt character '") + ch + "' not in the model alphabet");
            prompt.push_back(at);
        }
    } else {
        std::string cleaned = prompt_text;
        for (char& ch : cleaned)
            if (ch == ',') ch = ' ';
        std::istringstream in(cleaned);
        long v;
        while (in >> v) {
            if (v < 0 || static_cast<std::size_t>(v) >= m.vocab) throw UsageError("prompt token " + std::to_string(v) + " outside vocab");
            prompt.push_back(static_cast<std::size_t>(v));
        }
        if (!in.eof()) throw UsageError("prompt must be token ids separated by spaces or commas");
    }
    if (prompt.empty()) throw UsageError("prompt is empty");

    Sampler s;
    Rng rng(g.seed);
    if (!greedy && sub->count("--temp")) {
        s.kind = Sampler::Kind::temperature;
        s.temperature = temp;
    }
    const std::vector<std::size_t> tokens = generate(ck.params, m, prompt, steps, s, &rng);
    std::string csv = "position,token,generated\n";
    std::string text;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        csv += std::to_string(i) + "," + std::to_string(tokens[i]) + "," + (i >= prompt.size() ? "1" : "0") + "\n";
        if (!alphabet.empty()) text.push_back(alphabet[tokens[i]]);
    }
    run.write("decode.csv", csv);
    const double diff = decode_consistency(ck.params, m, tokens);
    run.row("sampler", s.kind == Sampler::Kind::greedy ? "greedy" : "temperature " + num(s.temperature));
    run.row("prompt tokens", std::to_string(prompt.size()));
    run.row("generated", std::to_string(steps));
    run.row("cache vs full max |diff|", num(diff, "%.3e"));
    if (!alphabet.empty()) run.row("text", text);
    run.summary["max_abs_diff"] = diff;
    run.summary["tokens"] = tokens;
    const bool pass = diff < 1e-8;
    return run.finish(pass, pass ? "" : "cached logits drift " + num(diff, "%.3e"));
}

std::vector<std::size_t> parse_list(const std::string& s) {
    std::vector<std::size_t> out;
    std::stringstream in(s);
    std::string item;
    while (std::getline(in, item, ',')) {
        try {
            out.push_back(static_cast<std::size_t>(std::stoul(item)));
        } catch (const std::exception&) {
            throw UsageError("bad list entry '" + item + "'");
        }
    }
    if (out.empty()) throw UsageError("empty list");
    return out;
}

int cmd_bench(Run& run, const Globals& g, const std::string& ns, std::size_t repeats) {
    WorkGrid grid;
    grid.ns = parse_list(ns);
    const auto rows = bench(grid, repeats, g.seed);
    std::vector<WorkRow> work;
    json timing = json::array();
    for (const BenchRow& b : rows) {
        work.push_back(b.row);
        timing.push_back({{"n", b.row.n}, {"k", b.row.k}, {"pi", b.row.pi}, {"d_h", b.row.d_h},
                          {"ablation", to_string(b.row.ablation)}, {"seconds", b.median_seconds}});
    }
    run.write("work.csv", work_csv(work));
    run.write("timing.json", json{{"repeats", repeats}, {"rows", timing}}.dump(2) + "\n");
    bool pass = true;
    std::string first;
    double lo = 1e9, hi = 0;
    for (std::size_t i = 0; i < work.size(); ++i) {
        const WorkRow& r = work[i];
        std::string bad;
        if (r.work.score_evals != r.score_slots) bad = "score_evals != slot count";
        if (r.work.stored_activation_elements > r.memory_bound) bad = "stored activations exceed bound";
        if (r.score_ratio > 0) {
            lo = std::min(lo, r.score_ratio);
            hi = std::max(hi, r.score_ratio);
            if (r.n / 2 >= 256 && (r.score_ratio < 1.9 || r.score_ratio > 2.1)) bad = "score ratio " + num(r.score_ratio);
        }
        if (r.ablation == Ablation::no_skip) {
            for (const WorkRow& f : work)
                if (f.ablation == Ablation::full && f.n == r.n && f.k == r.k && f.pi == r.pi &&
                    !(r.work.stored_activation_elements < f.work.stored_activation_elements))
                    bad = "no_skip does not store fewer activations";
        }
        if (!bad.empty() && pass) first = "n=" + std::to_string(r.n) + " k=" + std::to_string(r.k) + ": " + bad;
        pass = pass && bad.empty();
    }
    run.row("grid points", std::to_string(work.size()));
    run.row("score ratio range", num(lo) + " .. " + num(hi));
    run.row("repeats", std::to_string(repeats));
    run.summary["points"] = work.size();
    return run.finish(pass, first);
}

int cmd_ring(Run& run, const Globals& g, CLI::App* sub, std::size_t shards, std::size_t n, std::size_t batch,
             std::size_t k, std::size_t pi, std::size_t heads, std::size_t d_model, bool bidir) {
    // Flags win over --config; without a config the flag defaults apply.
    AttentionConfig c = config_or_default(g).model.attention;
    const bool own = g.config.empty();
    if (own || sub->count("--k")) c.ring_k = k;
    if (own || sub->count("--pi")) c.skip_period = pi;
    if (own || sub->count("--heads")) c.n_heads = heads;
    if (own || sub->count("--d-model")) c.d_model = d_model;
    if (bidir) {
        c.causal = false;
        c.bidirectional_skip = true;
    }
    c.validate();
    const CommReport rep = ring_simulate(shards, n, c, batch);
    run.write("messages.csv", messages_csv(rep));
    run.write("timeline.csv", timeline_csv(rep));
    run.row("shards x shard_len", std::to_string(shards) + " x " + std::to_string(rep.shard_len) +
                                      (rep.padded_n != n ? " (padded " + std::to_string(rep.padded_n - n) + ")" : ""));
    run.row("messages", std::to_string(rep.messages.size()));
    run.row("halo rows / partner rows", std::to_string(rep.halo_rows) + " / " + std::to_string(rep.partner_rows));
    run.row("tallied elements", std::to_string(rep.tallied_elements));
    run.row("closed-form elements", std::to_string(rep.formula_elements) + " (no n or P dependence; not compared)");
    run.row("conserved", rep.conserved ? "yes" : "no");
    run.row("makespan sequential", num(rep.sequential_makespan, "%.4e"));
    run.row("makespan pipelined", num(rep.pipelined_makespan, "%.4e"));
    run.summary["tallied_elements"] = rep.tallied_elements;
    run.summary["formula_elements"] = rep.formula_elements;
    run.summary["conserved"] = rep.conserved;
    return run.finish(rep.conserved, rep.conserved ? "" : "received elements differ from sent/required rows");
}

std::vector<Measurement> load_measurements(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read measurements '" + path + "'");
    std::stringstream buf;
    buf << in.rdbuf();
    const std::string text = buf.str();
    const auto first = text.find_first_not_of(" \t\r\n");
    if (first != std::string::npos && text[first] == '{') {
        const json j = json::parse(text);
        std::vector<Measurement> out;
        for (const json& r : j.at("rows")) {
            if (r.value("ablation", "full") != "full") continue;
            out.push_back({r.at("n").get<double>(), r.at("k").get<double>(), r.at("d_h").get<double>(),
                           r.at("seconds").get<double>(), std::nullopt});
        }
        return out;
    }
    return parse_measurements_csv(text);
}

int cmd_cost(Run& run, CLI::App* sub, CostParams p, double n, double k, double d_h, const std::string& fit_path,
             double fix_c3) {
    p.validate();
    if (fit_path.empty()) {
        if (!(n > 0 && k >= 0 && d_h > 0)) throw UsageError("--n and --d-h must be positive, --k non-negative");
        const double t = cost_model_eval(p, n, k, d_h);
        run.write("cost.csv", "n,k,d_h,seconds\n" + num(n, "%.0f") + "," + num(k, "%.0f") + "," + num(d_h, "%.0f") +
                                  "," + num(t, "%.9e") + "\n");
        run.row("predicted seconds", num(t, "%.6e"));
        run.summary["seconds"] = t;
        return run.finish(true);
    }
    const auto ms = load_measurements(fit_path);
    std::optional<double> pinned;
    if (sub->count("--fix-c3")) pinned = fix_c3;
    CostFit fit;
    try {
        fit = fit_cost_constants(ms, p.rates, pinned);
    } catch (const RankError& e) {
        run.row("measurements", std::to_string(ms.size()));
        return run.finish(false, e.what());
    }
    run.write("fit.csv", "c1,c2,c3,relative_residual,rank\n" + num(fit.c1, "%.12e") + "," + num(fit.c2, "%.12e") +
                             "," + num(fit.c3, "%.12e") + "," + num(fit.relative_residual, "%.6e") + "," +
                             std::to_string(fit.rank) + "\n");
    run.row("measurements", std::to_string(ms.size()));
    run.row("c1 c2 c3", num(fit.c1) + " " + num(fit.c2) + " " + num(fit.c3) + (pinned ? " (c3 pinned)" : ""));
    run.row("relative residual", num(fit.relative_residual, "%.3e"));
    run.summary["c1"] = fit.c1;
    run.summary["c2"] = fit.c2;
    run.summary["c3"] = fit.c3;
    run.summary["relative_residual"] = fit.relative_residual;
    return run.finish(true);
}

int cmd_kl(Run& run, const Globals& g, std::size_t seeds, std::size_t n) {
    const KlReport rep = kl_check(g.seed, seeds, n);
    run.write("kl.csv", kl_csv(rep));
    run.row("KL at eps=0", rep.zero_at_eps0 ? "0" : "nonzero");
    run.row("nonincreasing in eps", rep.nonincreasing ? "yes" : "no");
    run.row("mean KL (eps 1e-4, " + std::to_string(seeds) + " seeds, n " + std::to_string(n) + ")",
            num(rep.random_mean, "%.3e"));
    run.summary["mean_kl"] = rep.random_mean;
    std::string first;
    if (!rep.zero_at_eps0) first = "KL nonzero at eps=0";
    else if (!rep.nonincreasing) first = "KL increases as eps shrinks";
    else if (!(rep.random_mean < 2e-2)) first = "mean KL " + num(rep.random_mean) + " >= 2e-2";
    return run.finish(rep.pass, first);
}

int cmd_validate(Run& run, std::ostream& out, const std::string& path, std::size_t n) {
    const RunConfig rc = load_run_config(path);
    Task task;
    if (rc.task.kind != TaskKind::char_lm) task = load_task(rc.task);
    const std::size_t len = n ? n : std::min<std::size_t>(rc.model.max_seq, 16);
    const std::string csv = union_csv(build_union(rc.model.attention, len));
    out << csv;
    run.write("union.csv", csv);
    for (const std::string& w : rc.model.attention.warnings()) run.row("warning", w);
    run.row("config", path);
    run.row("union tokens", std::to_string(len));
    return run.finish(true);
}

}  // namespace

int cli_dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"pi-attention engine: verification and experiment commands", "piattn"};
    app.require_subcommand(1);
    app.fallthrough();
    Globals g;
    app.add_option("--seed", g.seed, "Seed for every random stream")->each([&](const std::string&) { g.seed_given = true; });
    app.add_option("--config", g.config, "Run config JSON");
    app.add_option("--out", g.out, "Output directory (default out/<command>)");
    app.add_option("--threads", g.threads, "Worker threads")->check(CLI::PositiveNumber);
    app.set_version_flag("--version", version_string());

    std::string grid = "full";
    auto* oracle = app.add_subcommand("oracle-check", "Sparse attention against the dense oracle over a config grid");
    oracle->add_option("--grid", grid, "small or full");

    auto* grad = app.add_subcommand("grad-check", "Finite differences through two stacked blocks");

    std::size_t rk = 1, rpi = 4, rl = 4, rn = 0;
    auto* rf = app.add_subcommand("rf-bound", "Receptive-field reach against kL + pi ceil(log2 L)");
    rf->add_option("--k", rk);
    rf->add_option("--pi", rpi);
    rf->add_option("--layers", rl);
    rf->add_option("--n", rn, "Sequence length (0 picks an interior query)");

    std::string task_flag, ablation;
    std::size_t steps = 0;
    auto* tr = app.add_subcommand("train", "Train on a toy task");
    tr->add_option("--task", task_flag, "copy, needle or charlm");
    tr->add_option("--steps", steps);
    tr->add_option("--ablation", ablation, "full, no_skip, no_gate, static_alpha, no_ring");

    std::string ckpt, prompt;
    std::size_t dsteps = 32;
    double temp = 1.0;
    auto* dec = app.add_subcommand("decode", "Cached autoregressive decoding from a checkpoint");
    dec->add_option("--ckpt", ckpt);
    dec->add_option("--prompt", prompt);
    dec->add_option("--steps", dsteps);
    dec->add_flag("--greedy");
    dec->add_option("--temp", temp)->check(CLI::PositiveNumber);

    std::string ns = "256,512,1024,2048";
    std::size_t repeats = 3;
    auto* be = app.add_subcommand("bench", "Work counters and forward timings");
    be->add_option("--ns", ns, "Comma-separated sequence lengths");
    be->add_option("--repeats", repeats)->check(CLI::PositiveNumber);

    std::size_t shards = 4, sn = 64, batch = 1, sk = 2, spi = 8, sh = 2, sd = 16;
    bool bidir = false;
    auto* ring = app.add_subcommand("simulate-ring", "Virtual device ring with message ledger");
    ring->add_option("--shards", shards)->check(CLI::PositiveNumber);
    ring->add_option("--n", sn);
    ring->add_option("--batch", batch);
    ring->add_option("--k", sk);
    ring->add_option("--pi", spi);
    ring->add_option("--heads", sh);
    ring->add_option("--d-model", sd);
    ring->add_flag("--bidirectional", bidir);

    CostParams cp;
    double cn = 1024, ck = 4, cd = 64, fix_c3 = 1.0;
    std::string fit_path;
    auto* cost = app.add_subcommand("cost-model", "Per-layer latency model and constant fitting");
    cost->add_option("--n", cn);
    cost->add_option("--k", ck);
    cost->add_option("--d-h", cd);
    cost->add_option("--c1", cp.c1);
    cost->add_option("--c2", cp.c2);
    cost->add_option("--c3", cp.c3);
    cost->add_option("--gamma-tc", cp.rates.tc);
    cost->add_option("--gamma-hbm", cp.rates.hbm);
    cost->add_option("--gamma-net", cp.rates.net);
    cost->add_option("--gamma-act", cp.rates.act);
    cost->add_option("--fit", fit_path, "Measurements CSV (n,k,d_h,seconds[,gamma_*]) or bench timing.json");
    cost->add_option("--fix-c3", fix_c3, "Pin c3 when every measurement shares the same rates");

    std::size_t kl_seeds = 100, kl_n = 256;
    auto* kl = app.add_subcommand("kl-check", "Stabilization KL properties");
    kl->add_option("--seeds", kl_seeds);
    kl->add_option("--n", kl_n);

    std::string vpath;
    std::size_t vn = 0;
    auto* val = app.add_subcommand("validate-config", "Validate a run config and print its union table");
    val->add_option("file", vpath);
    val->add_option("--n", vn);

    std::vector<std::string> rev(args.rbegin(), args.rend());
    if (!rev.empty()) rev.pop_back();  // program name
    try {
        app.parse(rev);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return 0;
    } catch (const CLI::CallForVersion&) {
        out << version_string() << "\n";
        return 0;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << "\n\n" << app.help();
        return 2;
    }

    CLI::App* sub = app.get_subcommands().front();
    try {
        Run run(sub->get_name(), g, out, args);
        if (sub == oracle) return cmd_oracle(run, g, grid);
        if (sub == grad) return cmd_grad(run, g);
        if (sub == rf) return cmd_rf(run, g, rf, rk, rpi, rl, rn);
        if (sub == tr) return cmd_train(run, g, tr, task_flag, steps, ablation);
        if (sub == dec) return cmd_decode(run, g, dec, ckpt, prompt, dsteps, temp);
        if (sub == be) return cmd_bench(run, g, ns, repeats);
        if (sub == ring) return cmd_ring(run, g, ring, shards, sn, batch, sk, spi, sh, sd, bidir);
        if (sub == cost) return cmd_cost(run, cost, cp, cn, ck, cd, fit_path, fix_c3);
        if (sub == kl) return cmd_kl(run, g, kl_seeds, kl_n);
        if (sub == val) {
            const std::string path = vpath.empty() ? g.config : vpath;
            if (path.empty()) throw UsageError("validate-config needs a config file");
            return cmd_validate(run, out, path, vn);
        }
    } catch (const ConfigError& e) {
        err << "config error: " << e.what() << "\n";
        return 2;
    } catch (const UsageError& e) {
        err << "error: " << e.what() << "\n\n" << sub->help();
        return 2;
    } catch (const TrainingError& e) {
        err << "training failed: " << e.what() << "\n";
        return 1;
    } catch (const nlohmann::json::exception& e) {
        err << "json error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return 2;
    }
    return 2;
}

int cli_dispatch(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    return cli_dispatch(std::vector<std::string>(argv, argv + argc), out, err);
}

}  // namespace piattn
