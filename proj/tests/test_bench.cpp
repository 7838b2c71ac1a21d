#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <sstream>

#include "vir/bench.hpp"
#include "vir/verify.hpp"

using namespace vir;
using namespace vir::bench;

namespace {

BenchRecord synthetic(std::size_t n, double seconds) {
    BenchRecord r;
    r.n = n;
    r.median_seconds = seconds;
    r.tokens_per_sec = double(n) / seconds;
    r.dim = 64;
    r.heads = 4;
    return r;
}

BenchSpec small_spec() {
    BenchSpec spec;
    spec.dim = 32;
    spec.heads = 4;
    spec.patch = 16;
    spec.repeats = 2;
    spec.warmup = 1;
    spec.seed = 7;
    return spec;
}

}  // namespace

TEST_CASE("scaling exponent on synthetic quadratic and linear data") {
    std::vector<BenchRecord> quad, lin;
    for (std::size_t n : {256, 512, 1024, 2048}) {
        quad.push_back(synthetic(n, 3e-9 * double(n) * double(n)));
        lin.push_back(synthetic(n, 4e-7 * double(n)));
    }
    CHECK(fit_scaling_exponent(quad) == doctest::Approx(2.0).epsilon(1e-6));
    CHECK(fit_scaling_exponent(lin) == doctest::Approx(1.0).epsilon(1e-6));

    quad.resize(2);
    CHECK_THROWS_AS(fit_scaling_exponent(quad), ParamError);
}

TEST_CASE("single resolution produces one record with N = (res/patch)^2") {
    BenchSpec spec = small_spec();
    spec.resolutions = {64};
    spec.repeats = 1;
    const auto records = run_benchmark(spec);
    REQUIRE(records.size() == 1);
    CHECK(records[0].n == 16);
    CHECK(records[0].resolution == 64);
    CHECK(records[0].status == "ok");
    CHECK(records[0].median_seconds > 0.0);
    CHECK(records[0].raw_seconds.size() == 1);
}

TEST_CASE("recurrent peak accounting is independent of N") {
    BenchSpec spec = small_spec();
    spec.mode = RunMode::recurrent;
    spec.resolutions = {224, 448};
    spec.exclude_io = true;
    const auto records = run_benchmark(spec);
    REQUIRE(records.size() == 2);
    CHECK(records[0].n == 196);
    CHECK(records[1].n == 784);
    CHECK(records[0].peak_live_f64 == records[1].peak_live_f64);
    CHECK(records[0].peak_live_f64 > 0);
}

TEST_CASE("parallel peak grows with the squared sequence length") {
    BenchSpec spec = small_spec();
    spec.sequence_lengths = {128, 256, 512};
    spec.exclude_io = true;
    const auto records = run_benchmark(spec);
    REQUIRE(records.size() == 3);
    // Mask and score matrix are live together.
    for (const auto& r : records)
        CHECK(r.peak_live_f64 >= 2 * static_cast<long long>(r.n * r.n));
    const double ratio10 = double(records[1].peak_live_f64) / double(records[0].peak_live_f64);
    const double ratio21 = double(records[2].peak_live_f64) / double(records[1].peak_live_f64);
    CHECK(ratio10 > 3.0);
    CHECK(ratio21 > 3.0);
}

TEST_CASE("chunkwise peak is independent of N at fixed C") {
    BenchSpec spec = small_spec();
    spec.mode = RunMode::chunkwise;
    spec.chunk = 16;
    spec.sequence_lengths = {128, 512};
    spec.exclude_io = true;
    const auto records = run_benchmark(spec);
    REQUIRE(records.size() == 2);
    CHECK(records[0].peak_live_f64 == records[1].peak_live_f64);
}

TEST_CASE("chunkwise peak is bounded by a + b*C^2") {
    BenchSpec spec = small_spec();
    spec.mode = RunMode::chunkwise;
    spec.sequence_lengths = {512};
    spec.exclude_io = true;
    std::vector<double> c2, peak;
    for (std::size_t c : {32, 64, 128}) {
        spec.chunk = c;
        const auto records = run_benchmark(spec);
        c2.push_back(double(c) * double(c));
        peak.push_back(double(records[0].peak_live_f64));
    }
    // Fit peak = a + b*C^2 and check it bounds the measurements; the O(C)
    // chunk-slice terms sit below the fitted curve's slack.
    double mx = 0, my = 0;
    for (std::size_t i = 0; i < c2.size(); ++i) {
        mx += c2[i];
        my += peak[i];
    }
    mx /= double(c2.size());
    my /= double(c2.size());
    double sxx = 0, sxy = 0;
    for (std::size_t i = 0; i < c2.size(); ++i) {
        sxx += (c2[i] - mx) * (c2[i] - mx);
        sxy += (c2[i] - mx) * (peak[i] - my);
    }
    const double b = sxy / sxx;
    const double a = my - b * mx;
    CHECK(b > 0.0);
    for (std::size_t i = 0; i < c2.size(); ++i)
        CHECK(peak[i] <= 1.15 * (a + b * c2[i]));
    // Quadratic growth signature: increments over a doubling ladder.
    CHECK(peak[2] - peak[1] > 2.5 * (peak[1] - peak[0]));
}

TEST_CASE("accounting is deterministic across repeats and runs") {
    BenchSpec spec = small_spec();
    spec.sequence_lengths = {96};
    spec.exclude_io = true;
    const auto a = run_benchmark(spec);
    const auto b = run_benchmark(spec);
    CHECK(a[0].peak_live_f64 == b[0].peak_live_f64);
}

TEST_CASE("f32 and 2d-mask runs work") {
    BenchSpec spec = small_spec();
    spec.dtype = Dtype::f32;
    spec.mask = MaskMode::two_d;
    spec.resolutions = {64};
    const auto records = run_benchmark(spec);
    CHECK(records[0].status == "ok");
    CHECK(records[0].dtype == "f32");
    CHECK(records[0].mask == "2d");

    spec.sequence_lengths = {24};  // not a square grid
    CHECK_THROWS_AS(run_benchmark(spec), ParamError);

    spec.sequence_lengths.clear();
    spec.mode = RunMode::recurrent;
    const auto rec = run_benchmark(spec);
    CHECK(rec[0].status == "ok");
}

TEST_CASE("full-model target runs the encoder") {
    BenchSpec spec = small_spec();
    spec.full_model = true;
    spec.resolutions = {32};
    spec.patch = 8;
    spec.dim = 16;
    spec.heads = 2;
    spec.depth = 2;
    spec.repeats = 1;
    const auto records = run_benchmark(spec);
    CHECK(records[0].status == "ok");
    CHECK(records[0].n == 17);  // patches + class token
}

TEST_CASE("batch-parallel workers aggregate throughput") {
    BenchSpec spec = small_spec();
    spec.sequence_lengths = {64};
    spec.batch_parallel = 2;
    spec.repeats = 2;
    const auto records = run_benchmark(spec);
    CHECK(records[0].status == "ok");
    CHECK(records[0].tokens_per_sec > 0.0);
}

TEST_CASE("csv emit: one record is a two-line file, none is header-only") {
    std::ostringstream empty;
    emit_csv({}, empty);
    CHECK(empty.str() == std::string(kCsvHeader) + "\n");

    BenchRecord r = synthetic(64, 0.5);
    std::ostringstream one;
    emit_csv({r}, one);
    std::istringstream lines(one.str());
    std::string line;
    std::size_t count = 0;
    while (std::getline(lines, line)) ++count;
    CHECK(count == 2);
}

TEST_CASE("csv and json round trips preserve every field") {
    BenchSpec spec = small_spec();
    spec.resolutions = {64, 128};
    spec.mode = RunMode::chunkwise;
    spec.chunk = 8;
    auto records = run_benchmark(spec);
    records[0].status = "oom";  // exercise the non-default status too

    std::stringstream csv;
    emit_csv(records, csv);
    const auto from_csv = parse_csv(csv);
    REQUIRE(from_csv.size() == records.size());

    std::stringstream json_s;
    emit_json(from_csv, json_s);
    const auto from_json = parse_json(json_s);
    REQUIRE(from_json.size() == records.size());

    for (std::size_t i = 0; i < records.size(); ++i) {
        const auto& a = records[i];
        const auto& b = from_json[i];
        CHECK(a.mode == b.mode);
        CHECK(a.mask == b.mask);
        CHECK(a.resolution == b.resolution);
        CHECK(a.patch == b.patch);
        CHECK(a.n == b.n);
        CHECK(a.dim == b.dim);
        CHECK(a.heads == b.heads);
        CHECK(a.chunk == b.chunk);
        CHECK(a.dtype == b.dtype);
        CHECK(a.median_seconds == b.median_seconds);
        CHECK(a.tokens_per_sec == b.tokens_per_sec);
        CHECK(a.peak_live_f64 == b.peak_live_f64);
        CHECK(a.status == b.status);
    }
}

TEST_CASE("emit validates format and path") {
    CHECK_THROWS_AS(emit({}, "xml", "/tmp/vir_bench_out.xml"), ParamError);
    CHECK_THROWS_AS(emit({}, "csv", "/nonexistent/dir/out.csv"), Error);
}

TEST_CASE("equivalence suite passes at the default tolerance") {
    const auto report = verify::run_equivalence_suite(1e-9, 42);
    CHECK(report.all_pass());
    for (const auto& p : report.properties) CHECK(p.pass);
}

TEST_CASE("zero tolerance fails on floating-point reassociation and reports cases") {
    const auto report = verify::run_equivalence_suite(0.0, 42);
    CHECK_FALSE(report.all_pass());
    bool saw_failure_detail = false;
    for (const auto& p : report.properties)
        if (!p.pass && !p.failures.empty()) saw_failure_detail = true;
    CHECK(saw_failure_detail);
}

TEST_CASE("seed variation leaves the suite green") {
    for (std::uint64_t seed : {1ULL, 2ULL, 3ULL})
        CHECK(verify::run_equivalence_suite(1e-9, seed).all_pass());
}

TEST_CASE("gradient check harness") {
    const auto result = verify::run_gradient_check(7);
    CHECK(result.pass);
    CHECK(result.max_rel_err <= 1e-6);
}

TEST_CASE("benchmark spec validation") {
    BenchSpec spec = small_spec();
    spec.resolutions = {50};  // not divisible by patch 16
    CHECK_THROWS_AS(run_benchmark(spec), ParamError);
    spec = small_spec();
    spec.mode = RunMode::chunkwise;
    spec.mask = MaskMode::two_d;
    CHECK_THROWS_AS(run_benchmark(spec), ParamError);
    spec = small_spec();
    spec.repeats = 0;
    CHECK_THROWS_AS(run_benchmark(spec), ParamError);
}
