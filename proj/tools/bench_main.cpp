#include <cstdio>
#include <iostream>

#include <CLI11.hpp>

#include "vir/bench.hpp"
#include "vir/verify.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitPropertyFailure = 1;
constexpr int kExitUsage = 2;

struct SlopeBounds {
    double lo, hi;
};

int run_command(const vir::bench::BenchSpec& spec, const std::string& out_path,
                const std::string& format, bool strict) {
    const auto records = vir::bench::run_benchmark(spec);
    if (out_path.empty()) {
        if (format == "json") vir::bench::emit_json(records, std::cout);
        else vir::bench::emit_csv(records, std::cout);
    } else {
        vir::bench::emit(records, format, out_path);
        std::cerr << "wrote " << records.size() << " records to " << out_path << "\n";
    }

    std::size_t ok_count = 0, distinct = 0;
    {
        std::vector<std::size_t> ns;
        for (const auto& r : records)
            if (r.status == "ok") {
                ++ok_count;
                ns.push_back(r.n);
            }
        std::sort(ns.begin(), ns.end());
        distinct = std::unique(ns.begin(), ns.end()) - ns.begin();
    }

    if (distinct >= 3) {
        const double slope = vir::bench::fit_scaling_exponent(records);
        std::fprintf(stderr, "log-log scaling exponent: %.4f\n", slope);
        if (strict) {
            SlopeBounds bounds{0.0, 10.0};
            if (spec.mode == vir::RunMode::parallel) bounds = {1.7, 2.3};
            else if (spec.mode == vir::RunMode::chunkwise) bounds = {0.8, 1.3};
            else bounds = {0.7, 1.4};
            if (slope < bounds.lo || slope > bounds.hi) {
                std::fprintf(stderr, "strict: slope %.4f outside [%.2f, %.2f]\n", slope, bounds.lo,
                             bounds.hi);
                return kExitPropertyFailure;
            }
        }
    }
    if (strict && spec.mode == vir::RunMode::recurrent && spec.exclude_io && ok_count >= 2) {
        for (const auto& r : records)
            if (r.status == "ok" && r.peak_live_f64 != records.front().peak_live_f64) {
                std::fprintf(stderr, "strict: recurrent peak %lld differs from %lld\n",
                             r.peak_live_f64, records.front().peak_live_f64);
                return kExitPropertyFailure;
            }
    }
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"ViR retention benchmark and verification harness"};
    app.require_subcommand(1);

    // --- run ---
    auto* run = app.add_subcommand("run", "measure throughput and accounted memory");
    vir::bench::BenchSpec spec;
    std::string mode_str = "parallel", mask_str = "1d", dtype_str = "f64";
    std::string out_path, format = "csv";
    bool strict = false;
    run->add_option("--mode", mode_str, "parallel | recurrent | chunkwise")
        ->check(CLI::IsMember({"parallel", "recurrent", "chunkwise"}));
    run->add_option("--mask", mask_str, "1d | 2d")->check(CLI::IsMember({"1d", "2d"}));
    run->add_option("--res", spec.resolutions, "image resolutions (pixels)")->delimiter(',');
    run->add_option("--seq", spec.sequence_lengths,
                    "explicit sequence lengths (overrides --res; 1d mask)")
        ->delimiter(',');
    run->add_option("--patch", spec.patch, "patch size");
    run->add_option("--dim", spec.dim, "model dim");
    run->add_option("--heads", spec.heads, "retention heads");
    run->add_option("--chunk", spec.chunk, "chunk size for chunkwise mode");
    run->add_option("--repeats", spec.repeats, "timed repeats, median reported");
    run->add_option("--warmup", spec.warmup, "untimed warmup iterations");
    run->add_option("--depth", spec.depth, "encoder depth (full-model target)");
    run->add_option("--dtype", dtype_str, "f64 | f32")->check(CLI::IsMember({"f64", "f32"}));
    run->add_option("--seed", spec.seed, "rng seed");
    run->add_option("--out", out_path, "output file (stdout when omitted)");
    run->add_option("--format", format, "csv | json")->check(CLI::IsMember({"csv", "json"}));
    run->add_flag("--full-model", spec.full_model, "time the full encoder, not a single layer");
    run->add_flag("--exclude-io", spec.exclude_io,
                  "exclude input/output buffers from peak accounting");
    run->add_flag("--strict", strict, "enforce scaling-slope and memory bounds");
    run->add_option("--batch-parallel", spec.batch_parallel,
                    "independent sequences on this many worker threads");

    // --- verify ---
    auto* verify = app.add_subcommand("verify", "run the full equivalence property suite");
    double tol = 1e-9;
    std::uint64_t verify_seed = 42;
    verify->add_option("--tol", tol, "max |delta| tolerance for mode equivalence");
    verify->add_option("--seed", verify_seed, "base seed for generated inputs");

    // --- gradcheck ---
    auto* gradcheck =
        app.add_subcommand("gradcheck", "analytic gradients vs central finite differences");
    std::uint64_t grad_seed = 7;
    gradcheck->add_option("--seed", grad_seed, "base seed");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return e.get_exit_code() == 0 ? kExitOk : kExitUsage;
    }

    try {
        if (run->parsed()) {
            spec.mode = *vir::parse_run_mode(mode_str);
            spec.mask = *vir::parse_mask_mode(mask_str);
            spec.dtype = dtype_str == "f32" ? vir::Dtype::f32 : vir::Dtype::f64;
            return run_command(spec, out_path, format, strict);
        }
        if (verify->parsed()) {
            const auto report = vir::verify::run_equivalence_suite(tol, verify_seed);
            vir::verify::print_report(report, std::cout);
            return report.all_pass() ? kExitOk : kExitPropertyFailure;
        }
        if (gradcheck->parsed()) {
            const auto result = vir::verify::run_gradient_check(grad_seed);
            std::printf("%s gradcheck: max relative error %.3e (tol %.1e)\n",
                        result.pass ? "[PASS]" : "[FAIL]", result.max_rel_err, result.tolerance);
            return result.pass ? kExitOk : kExitPropertyFailure;
        }
    } catch (const vir::ParamError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitPropertyFailure;
    }
    return kExitUsage;
}
