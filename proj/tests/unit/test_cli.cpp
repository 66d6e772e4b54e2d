// SPDX-License-Identifier: Apache-2.0
#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "commands.hpp"
#include "config_io.hpp"
#include "cpt/streams.hpp"
#include "doctest.h"
#include "table5.hpp"

using namespace cpt;
using namespace cpt::cli;
namespace fs = std::filesystem;

namespace {

struct Result {
    int code = 0;
    std::string out;
    std::string err;
};

Result invoke(std::vector<std::string> args) {
    args.insert(args.begin(), "cptsim");
    std::vector<char*> argv;
    for (auto& a : args) argv.push_back(a.data());
    std::ostringstream out, err;
    const int code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
    return {code, out.str(), err.str()};
}

fs::path scratch(const std::string& name) {
    const auto dir = fs::temp_directory_path() / ("cpt_cli_test_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

void write(const fs::path& p, const std::string& text) { std::ofstream(p) << text; }

std::string slurp(const fs::path& p) {
    std::ifstream in(p);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::vector<std::vector<std::string>> csv(const std::string& text) {
    std::vector<std::vector<std::string>> rows;
    std::stringstream in(text);
    for (std::string line; std::getline(in, line);) {
        if (line.empty()) continue;
        std::vector<std::string> cells;
        std::stringstream ls(line);
        for (std::string c; std::getline(ls, c, ',');) cells.push_back(c);
        rows.push_back(cells);
    }
    return rows;
}

const char* kSmall = R"([run]
seed = 0
batch_size = 64

[method]
kind = full-ft

[mixture]
preset = reference

[schedule]
variant = independent-cosine
base_lr = 0.05

[budget]
total_gflops = 3e6

[model]
temperature_lr_scale = 0.01

[stream]
ordering = random
num_tasks = 2

[world]
adaptation_concepts = 8
heldout_concepts = 4
)";

}  // namespace

TEST_CASE("config parsing") {
    const auto cfg = parse_config(kSmall);
    CHECK(cfg.batch_size == 64);
    CHECK(cfg.stream.num_tasks == 2);
    CHECK(cfg.world.adaptation_concepts == 8);
    CHECK(cfg.ratios == mixture::MixtureRatios{0.33, 0.34, 0.33});
    CHECK(cfg.schedule.base_lr == 0.05);

    const auto back = parse_config(render_config(cfg));
    CHECK(engine::config_to_json(back) == engine::config_to_json(cfg));

    CHECK_THROWS_WITH_AS(parse_config("[model]\ntau = 1\n"), doctest::Contains("model.tau"), ConfigError);
    CHECK_THROWS_WITH_AS(parse_config("[nope]\nx = 1\n"), doctest::Contains("nope"), ConfigError);
    CHECK_THROWS_WITH_AS(parse_config("[run]\nbatch_size = many\n"), doctest::Contains("batch_size"), ConfigError);
    CHECK_THROWS_WITH_AS(parse_config("[mixture]\nlambda_p = 0.9\n"), doctest::Contains("lambda"), ConfigError);
    CHECK_THROWS_WITH_AS(parse_config("[method]\nkind = galore\n"), doctest::Contains("galore"), ConfigError);
}

TEST_CASE("presets") {
    engine::RunConfig cfg;
    apply_preset(cfg, "tau:1.0");
    CHECK(cfg.model.tau_init == 1.0);
    apply_preset(cfg, "mixture:iidify");
    CHECK(cfg.ratios == mixture::MixtureRatios{0.0, 0.1, 0.9});
    apply_preset(cfg, "budget:2x");
    CHECK(cfg.budget.total_gflops == doctest::Approx(3.6e9));
    apply_preset(cfg, "schedule:autoregressive-rsqrt");
    CHECK(cfg.schedule.variant == schedules::MetaVariant::autoregressive_rsqrt);
    CHECK_THROWS_AS(apply_preset(cfg, "tau:0.2"), ConfigError);
    CHECK_THROWS_AS(apply_preset(cfg, "tau"), ConfigError);
    CHECK(presets_in("merge-w").size() == 3);
    for (const auto& group : preset_catalog())
        for (const auto& p : presets_in(group.group)) {
            engine::RunConfig c;
            c.method.kind = methods::MethodKind::merge_ema;
            CHECK_NOTHROW(apply_preset(c, p));
        }
}

TEST_CASE("invalid ratios exit non-zero naming the field") {
    const auto dir = scratch("badratio");
    write(dir / "bad.cfg", "[mixture]\nlambda_p = 0.5\nlambda_d = 0.5\nlambda_b = 0.5\n");
    const auto r = invoke({"run", "--config", (dir / "bad.cfg").string(), "--out", (dir / "out").string()});
    CHECK(r.code == kConfigError);
    CHECK(r.err.find("lambda") != std::string::npos);
    CHECK_FALSE(fs::exists(dir / "out"));
}

TEST_CASE("run writes artifacts, replays from its manifest and depends on the seed") {
    const auto dir = scratch("run");
    write(dir / "small.cfg", kSmall);
    const auto a = invoke({"run", "--config", (dir / "small.cfg").string(), "--out", (dir / "a").string()});
    REQUIRE(a.code == kOk);
    for (const char* f : {"trajectory.csv", "stream.json", "final.ckpt", "manifest.json"}) CHECK(fs::exists(dir / "a" / f));
    const auto replay = invoke({"run", "--config", (dir / "a" / "manifest.json").string(), "--out", (dir / "b").string()});
    REQUIRE(replay.code == kOk);
    CHECK(slurp(dir / "a" / "trajectory.csv") == slurp(dir / "b" / "trajectory.csv"));
    const auto seeded =
        invoke({"run", "--config", (dir / "small.cfg").string(), "--seed", "5", "--out", (dir / "c").string()});
    REQUIRE(seeded.code == kOk);
    CHECK(slurp(dir / "a" / "trajectory.csv") != slurp(dir / "c" / "trajectory.csv"));

    const auto ev = invoke({"eval", "--config", (dir / "small.cfg").string(), "--checkpoint",
                         (dir / "a" / "final.ckpt").string()});
    CHECK(ev.code == kOk);
    CHECK(ev.out.find("a_ka=") != std::string::npos);
    const auto joint = invoke({"run", "--config", (dir / "small.cfg").string(), "--joint", "--out", (dir / "j").string()});
    CHECK(joint.code == kOk);
}

TEST_CASE("budget command reproduces the printed table") {
    const auto r = invoke({"budget"});
    REQUIRE(r.code == kOk);
    const auto rows = csv(r.out);
    REQUIRE(rows.size() == golden::kTable.size() + 1);
    CHECK(rows[0][5] == "steps_T20");
    std::map<std::string, std::vector<std::string>> by_method;
    for (std::size_t i = 1; i < rows.size(); ++i) by_method[rows[i][0]] = rows[i];
    for (const auto& g : golden::kTable) {
        CAPTURE(g.method);
        const auto& row = by_method.at(std::string(g.method));
        for (std::size_t k = 0; k < 4; ++k) CHECK(std::abs(std::stoll(row[5 + k]) - g.steps[k]) <= 1);
        CHECK(std::stod(row[4]) == doctest::Approx(g.maf).epsilon(1e-6));
    }

    const auto one = invoke({"budget", "--tasks", "1"});
    REQUIRE(one.code == kOk);
    const auto one_rows = csv(one.out);
    CHECK(one_rows[1][0] == "full-ft");
    CHECK(std::stoll(one_rows[1][5]) == 28393);

    const auto dir = scratch("budget");
    write(dir / "empty.csv", "# nothing measured\n");
    const auto empty = invoke({"budget", "--table", (dir / "empty.csv").string()});
    CHECK(empty.code == kOk);
    CHECK(empty.out.empty());
}

TEST_CASE("schedule dump") {
    const auto r = invoke({"schedule", "--kind", "cosine", "--tasks", "3", "--steps", "200"});
    REQUIRE(r.code == kOk);
    const auto rows = csv(r.out);
    REQUIRE(rows.size() == 1 + 3 * 200);
    for (std::size_t t = 1; t <= 3; ++t) CHECK(std::abs(std::stod(rows[t * 200][3])) < 1e-18);

    const auto ar = invoke({"schedule", "--variant", "autoregressive-cosine", "--tasks", "4", "--steps", "100"});
    REQUIRE(ar.code == kOk);
    std::vector<double> peaks(5, 0.0);
    const auto ar_rows = csv(ar.out);
    for (std::size_t i = 1; i < ar_rows.size(); ++i) {
        const auto t = std::stoul(ar_rows[i][0]);
        peaks[t] = std::max(peaks[t], std::stod(ar_rows[i][3]));
    }
    for (std::size_t t = 2; t <= 4; ++t) CHECK(peaks[t] < peaks[t - 1]);
    CHECK(invoke({"schedule", "--variant", "linear"}).code == kConfigError);
}

TEST_CASE("stream command") {
    const auto a = invoke({"stream", "--kind", "random", "--tasks", "7", "--seed", "3"});
    const auto b = invoke({"stream", "--kind", "random", "--tasks", "7", "--seed", "3"});
    REQUIRE(a.code == kOk);
    CHECK(a.out == b.out);
    const auto fwd = streams::from_manifest(a.out);
    const auto rev = streams::from_manifest(invoke({"stream", "--kind", "random", "--tasks", "7", "--seed", "3", "--reverse"}).out);
    auto flipped = fwd.ordering;
    std::reverse(flipped.begin(), flipped.end());
    CHECK(rev.ordering == flipped);
    std::size_t lo = 1000, hi = 0;
    for (const auto& t : fwd.tasks) {
        lo = std::min(lo, t.size());
        hi = std::max(hi, t.size());
    }
    CHECK(hi - lo <= 1);

    const auto dir = scratch("stream");
    write(dir / "inv.csv", "id,dataset,year,frequency\nx,d1,2012,5\ny,d1,2010,50\nz,d2,2011,1\n");
    const auto inv = invoke({"stream", "--kind", "frequency", "--tasks", "3", "--inventory", (dir / "inv.csv").string()});
    REQUIRE(inv.code == kOk);
    CHECK(streams::from_manifest(inv.out).ordering == streams::Ordering{"z", "x", "y"});
    write(dir / "sim.csv", "1,0.9,0.1\n0.9,1,0.5\n0.1,0.5,1\n");
    const auto sim = invoke({"stream", "--kind", "similarity", "--tasks", "1", "--inventory", (dir / "inv.csv").string(),
                          "--similarity", (dir / "sim.csv").string()});
    REQUIRE(sim.code == kOk);
    const auto so = streams::from_manifest(sim.out).ordering;
    CHECK((so == streams::Ordering{"x", "y", "z"} || so == streams::Ordering{"z", "y", "x"}));
    CHECK(invoke({"stream", "--kind", "alphabetical"}).code == kConfigError);
}

TEST_CASE("sweep writes an index") {
    const auto dir = scratch("sweep");
    write(dir / "small.cfg", kSmall);
    const auto r = invoke({"sweep", "--config", (dir / "small.cfg").string(), "--over", "tau:0.01", "--over", "tau:1.0",
                        "--seeds", "0", "--seeds", "1", "--workers", "2", "--out", (dir / "s").string()});
    REQUIRE(r.code == kOk);
    const auto rows = csv(slurp(dir / "s" / "index.csv"));
    REQUIRE(rows.size() == 5);
    CHECK(rows[0][0] == "run");
    for (std::size_t i = 1; i < rows.size(); ++i) CHECK(rows[i][3] == "ok");
}

TEST_CASE("reference config runs within a minute") {
    const char* src = std::getenv("CPT_SOURCE_DIR");
    REQUIRE(src != nullptr);
    const auto dir = scratch("reference");
    const auto start = std::chrono::steady_clock::now();
    const auto r = invoke({"run", "--config", (fs::path(src) / "configs" / "reference.cfg").string(), "--out", dir.string()});
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    CHECK(r.code == kOk);
    CHECK(secs < 60.0);
}
