#include "mfgen/experiment.hpp"

#include <catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <sstream>

using namespace mfgen;
namespace fs = std::filesystem;

namespace {

ExperimentConfig parse(const std::string& text) {
    std::istringstream is(text);
    return ExperimentConfig::parse(is);
}

fs::path scratch(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("mfgen_test_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

std::string slurp(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    std::stringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

} // namespace

TEST_CASE("config parsing: comments, typed access, unknown and duplicate keys") {
    const auto c = parse("# comment\ntarget.kind = gaussian  # trailing\n\ntrain.batches = 5e4\ntarget.params.mean = 1, -2\n");
    CHECK(c.str("target.kind") == "gaussian");
    CHECK(c.integer("train.batches") == 50000);
    CHECK(c.list("target.params.mean") == std::vector<double>{1.0, -2.0});
    CHECK(c.num("sde.a", 0.5) == 0.5);
    CHECK_THROWS_AS(parse("train.bathces = 3\n"), ConfigError);
    CHECK_THROWS_AS(parse("target.params.color = 3\n"), ConfigError);
    CHECK_THROWS_AS(parse("sde.a = 1\nsde.a = 2\n"), ConfigError);
    CHECK_THROWS_AS(parse("sde.a\n"), ConfigError);
    CHECK_THROWS_AS(parse("sde.a = fast\n").num("sde.a"), ConfigError);
    CHECK_THROWS_AS(parse("train.batches = 2.5\n").integer("train.batches"), ConfigError);
    try {
        parse("").require({"target.kind"}, "train-sgm");
        FAIL("expected a missing-key error");
    } catch (const ConfigError& e) {
        CHECK(std::string(e.what()).find("target.kind") != std::string::npos);
    }
    // canonical form ignores ordering and comments
    CHECK(parse("sde.a = 1\nsde.T = 2\n").canonical() == parse("sde.T=2 # x\nsde.a= 1\n").canonical());
}

TEST_CASE("targets from config") {
    const auto g = target_from(parse("target.kind = gaussian\ntarget.params.mean = 1,2,3\ntarget.params.var = 0.5\n"));
    CHECK(g.dim() == 3);
    CHECK(g.covariance()(1, 1) == 0.5);
    const auto m = target_from(parse("target.kind = gaussian_mixture\ntarget.params.weights = 0.3,0.7\n"
                                     "target.params.means = -1,0; 1,0\ntarget.params.vars = 0.2,0.4\n"));
    CHECK(m.kind() == TargetKind::gaussian_mixture);
    CHECK(m.weights()[1] == Catch::Approx(0.7));
    CHECK_THROWS_AS(target_from(parse("target.kind = checkerboard\ntarget.params.var = 1\n")), ConfigError);
    CHECK_THROWS_AS(target_from(parse("target.kind = swissroll\n")), ConfigError);
    CHECK_THROWS_AS(target_from(parse("target.kind = gaussian_mixture\ntarget.params.weights = 1\n")), ConfigError);
}

TEST_CASE("ensemble CSV roundtrip is exact and malformed files are rejected") {
    const auto dir = scratch("csv");
    const auto x = TargetDistribution::isotropic_gaussian(3, 2.0).sample(50, 4).states;
    write_ensemble_csv(dir / "a.csv", x);
    CHECK(read_ensemble_csv(dir / "a.csv") == x);
    CHECK(slurp(dir / "a.csv").rfind("x0,x1,x2\n", 0) == 0);
    std::ofstream(dir / "bad.csv") << "x0,x1\n1,2\n3\n";
    CHECK_THROWS_AS(read_ensemble_csv(dir / "bad.csv"), ShapeError);
    std::ofstream(dir / "nan.csv") << "x0\nabc\n";
    CHECK_THROWS_AS(read_ensemble_csv(dir / "nan.csv"), ConfigError);
}

TEST_CASE("FNV-1a reference values and scatter raster") {
    CHECK(fnv1a64("") == 0xcbf29ce484222325ULL);
    CHECK(fnv1a64("a") == 0xaf63dc4c8601ec8cULL);
    CHECK(fnv1a64("foobar") == 0x85944171f73967e8ULL);
    const auto dir = scratch("ppm");
    RowMatrix x(2, 2);
    x << 0.0, 0.0, 10.0, 10.0;
    write_scatter_ppm(dir / "f.ppm", x);
    const std::string img = slurp(dir / "f.ppm");
    const std::string header = "P6\n512 512\n255\n";
    REQUIRE(img.size() == header.size() + 512 * 512 * 3);
    const auto at = [&](int px, int py) { return static_cast<unsigned char>(img[header.size() + (py * 512 + px) * 3]); };
    CHECK(at(256, 256) == 0);
    CHECK(at(255, 255) == 0);
    CHECK(at(10, 10) == 255);
}

TEST_CASE("train-sgm with zero batches emits the initial checkpoint") {
    const auto dir = scratch("sgm0");
    auto c = parse("target.kind = gaussian\ntarget.params.var = 0.25\ntrain.batches = 0\nsample.n = 200\nsim.dt = 0.05\n"
                   "metrics.reference_n = 200\n");
    const auto r = run_train_sgm(c, dir, false);
    for (const char* f : {"checkpoint.txt", "loss_trace.csv", "samples.csv", "metrics.json", "figure.ppm", "manifest"})
        CHECK(fs::exists(dir / f));
    const auto st = load_train_state((dir / "checkpoint.txt").string());
    CHECK(st.next_batch == 0);
    const auto init = init_sgm_network(NetSpec{}, sde_from(c, 2), SGMObjective::score, 0);
    CHECK(squared_norm(st.params.layers) == squared_norm(init.layers));
    CHECK(r.samples.rows() == 200);
    c.set("loss.alpha0", "1");
    CHECK_THROWS_AS(run_train_sgm(c, dir, true), ConfigError);
}

TEST_CASE("short SGM runs are byte-reproducible and resumable through the checkpoint") {
    const std::string text = "target.kind = checkerboard\ntrain.batches = 30\ntrain.batch_size = 16\ntrain.eval_every = 10\n"
                             "loss.alpha1 = 0.5\nloss.alpha2 = 0.5\nsample.n = 100\nsim.dt = 0.05\nmetrics.reference_n = 100\n";
    const auto a = scratch("rep_a"), b = scratch("rep_b");
    run_train_sgm(parse(text), a, false);
    run_train_sgm(parse(text), b, false);
    CHECK(slurp(a / "samples.csv") == slurp(b / "samples.csv"));
    CHECK(slurp(a / "checkpoint.txt") == slurp(b / "checkpoint.txt"));

    const auto half = scratch("rep_half"), rest = scratch("rep_rest");
    auto c = parse(text);
    c.set("train.batches", "12");
    run_train_sgm(c, half, false);
    run_train_sgm(parse(text), rest, false, half / "checkpoint.txt");
    CHECK(slurp(rest / "samples.csv") == slurp(a / "samples.csv"));
}

TEST_CASE("sample and metrics subcommands") {
    const auto dir = scratch("samp");
    const auto c = parse("target.kind = gaussian\ntarget.params.var = 0.25\ntrain.batches = 5\nsample.n = 300\nsim.dt = 0.05\n"
                         "metrics.reference_n = 300\nsample.method = ode\n");
    run_train_sgm(c, dir / "train", false);
    const auto s = run_sample(c, dir / "train" / "checkpoint.txt", dir / "sample");
    CHECK(s.metrics["method"] == "ode");
    CHECK(s.samples.rows() == 300);
    const auto m = run_metrics(dir / "sample" / "samples.csv", dir / "sample" / "samples.csv", std::nullopt, std::nullopt,
                               dir / "metrics");
    CHECK(std::abs(m.metrics["mmd2"].get<double>()) < 0.01);
    CHECK(m.metrics["energy_distance"].get<double>() == 0.0);
}

TEST_CASE("verify config builder validates the grid") {
    auto c = parse("verify.levels = 3\nverify.nx = 801\nverify.nt = 3001\n");
    CHECK(verify_from(c).grid.nx == 801);
    c.set("verify.nx", "800");
    CHECK_THROWS_AS(verify_from(c), ConfigError);
}
