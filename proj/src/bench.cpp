#include "vir/bench.hpp"

#include <algorithm>
#include <barrier>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <new>
#include <sstream>
#include <thread>

#include <json.hpp>

namespace vir::bench {

using Clock = std::chrono::steady_clock;
using nlohmann::json;

namespace {

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

double median(std::vector<double> xs) {
    std::sort(xs.begin(), xs.end());
    const std::size_t mid = xs.size() / 2;
    return xs.size() % 2 ? xs[mid] : 0.5 * (xs[mid - 1] + xs[mid]);
}

std::string format_double(double x) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", x);
    return buf;
}

// Workload shared by every benchmark thread: inputs, the op under test, and
// its accounting snapshot. Built and run entirely on one thread so the
// thread-local allocation stats stay coherent.
template <typename T>
struct LayerRun {
    EncoderConfig cfg;
    LayerWeightsT<T> lw;
    TensorT<T> z;
    TensorT<T> out;

    LayerRun(const BenchSpec& spec, std::size_t n_tokens, std::uint64_t seed) {
        cfg.model_dim = spec.dim;
        cfg.heads = spec.heads;
        cfg.mask_mode = spec.mask;
        cfg.mode = spec.mode;
        cfg.chunk_size = spec.chunk;
        cfg.patch_size = spec.patch;
        if (spec.mask == MaskMode::two_d) {
            const auto side = static_cast<std::size_t>(std::llround(std::sqrt(double(n_tokens))));
            if (side * side != n_tokens)
                throw ParamError("2d mask needs a square token count, got " +
                                 std::to_string(n_tokens));
            cfg.image_size = side * spec.patch;
        } else {
            cfg.image_size = spec.patch;  // grid unused for 1d masks
        }
        SplitMix64 rng(seed);
        lw.qkv_weight = fill_uniform<T>(rng, {spec.dim, 3 * spec.dim});
        lw.ret_ln_gain = TensorT<T>({spec.dim});
        for (auto& x : lw.ret_ln_gain.flat()) x = T(1);
        lw.ret_ln_bias = TensorT<T>({spec.dim});
        z = fill_uniform<T>(rng, {n_tokens, spec.dim}, -0.5, 0.5);
        out = TensorT<T>({n_tokens, spec.dim});
    }

    void step() { mhr_forward_into(z, lw, cfg, out); }
};

template <typename T>
struct ModelRun {
    EncoderConfig cfg;
    EncoderWeightsT<T> weights;
    TensorT<T> image;

    ModelRun(const BenchSpec& spec, std::size_t resolution, std::uint64_t seed) {
        cfg.image_size = resolution;
        cfg.patch_size = spec.patch;
        cfg.model_dim = spec.dim;
        cfg.heads = spec.heads;
        cfg.depth = spec.depth;
        cfg.mask_mode = spec.mask;
        cfg.mode = spec.mode;
        cfg.chunk_size = spec.chunk;
        cfg.validate();
        weights = bind_weights<T>(random_weight_store(cfg, seed), cfg);
        SplitMix64 rng(seed ^ 0x9E3779B9ULL);
        image = fill_uniform<T>(rng, {resolution, resolution, cfg.channels}, 0.0, 1.0);
    }

    void step() { encoder_forward<T>(image, weights, cfg); }
};

struct ThreadResult {
    std::vector<double> raw_seconds;
    long long peak = 0;
};

// Runs warmup + timed repeats of `make_run()` on the calling thread and
// reports per-repeat wall times plus the accounted element high-water mark
// (relative to the post-setup baseline when exclude_io is set).
template <typename MakeRun>
ThreadResult run_timed(const BenchSpec& spec, MakeRun&& make_run) {
    auto& stats = alloc_stats();
    const long long base0 = stats.live_elems;
    auto run = make_run();
    const long long baseline = stats.live_elems;
    stats.reset_peak();

    ThreadResult result;
    for (std::size_t i = 0; i < spec.warmup; ++i) run.step();
    for (std::size_t i = 0; i < spec.repeats; ++i) {
        const auto t0 = Clock::now();
        run.step();
        result.raw_seconds.push_back(seconds_since(t0));
    }
    result.peak = spec.exclude_io ? stats.peak_elems - baseline : stats.peak_elems - base0;
    return result;
}

std::size_t worker_cap() {
    if (const char* env = std::getenv("VIR_BENCH_THREADS")) {
        const long v = std::strtol(env, nullptr, 10);
        if (v > 0) return static_cast<std::size_t>(v);
    }
    return 0;
}

template <typename T>
BenchRecord run_one(const BenchSpec& spec, std::size_t resolution, std::size_t n_tokens) {
    BenchRecord rec;
    rec.mode = run_mode_name(spec.mode);
    rec.mask = mask_mode_name(spec.mask);
    rec.resolution = resolution;
    rec.patch = spec.patch;
    rec.n = n_tokens;
    rec.dim = spec.dim;
    rec.heads = spec.heads;
    rec.chunk = spec.chunk;
    rec.dtype = dtype_name(spec.dtype);

    std::size_t workers = std::max<std::size_t>(1, spec.batch_parallel);
    if (const std::size_t cap = worker_cap(); cap > 0) workers = std::min(workers, cap);

    try {
        if (workers == 1) {
            ThreadResult tr;
            if (spec.full_model)
                tr = run_timed(spec, [&] { return ModelRun<T>(spec, resolution, spec.seed); });
            else
                tr = run_timed(spec, [&] { return LayerRun<T>(spec, n_tokens, spec.seed); });
            rec.raw_seconds = tr.raw_seconds;
            rec.median_seconds = median(tr.raw_seconds);
            rec.tokens_per_sec = rec.median_seconds > 0 ? double(n_tokens) / rec.median_seconds : 0;
            rec.peak_live_f64 = tr.peak;
        } else {
            // Independent sequences on private worker threads; report
            // aggregate throughput over the timed phase.
            std::vector<ThreadResult> results(workers);
            std::vector<std::exception_ptr> errors(workers);
            std::barrier sync(static_cast<std::ptrdiff_t>(workers) + 1);
            std::vector<std::thread> threads;
            for (std::size_t wi = 0; wi < workers; ++wi) {
                threads.emplace_back([&, wi] {
                    try {
                        auto& stats = alloc_stats();
                        const long long base0 = stats.live_elems;
                        LayerRun<T> run(spec, n_tokens, spec.seed + wi);
                        const long long baseline = stats.live_elems;
                        stats.reset_peak();
                        for (std::size_t i = 0; i < spec.warmup; ++i) run.step();
                        sync.arrive_and_wait();
                        for (std::size_t i = 0; i < spec.repeats; ++i) run.step();
                        results[wi].peak =
                            spec.exclude_io ? stats.peak_elems - baseline : stats.peak_elems - base0;
                    } catch (...) {
                        errors[wi] = std::current_exception();
                        sync.arrive_and_drop();
                    }
                });
            }
            sync.arrive_and_wait();
            const auto t0 = Clock::now();
            for (auto& t : threads) t.join();
            const double wall = seconds_since(t0);
            for (auto& e : errors)
                if (e) std::rethrow_exception(e);
            rec.raw_seconds = {wall};
            rec.median_seconds = wall / double(spec.repeats);
            rec.tokens_per_sec =
                wall > 0 ? double(workers * n_tokens * spec.repeats) / wall : 0.0;
            for (const auto& r : results) rec.peak_live_f64 = std::max(rec.peak_live_f64, r.peak);
        }
    } catch (const std::bad_alloc&) {
        rec.status = "oom";
        rec.median_seconds = 0.0;
        rec.tokens_per_sec = 0.0;
        rec.peak_live_f64 = 0;
        rec.raw_seconds.clear();
    }
    return rec;
}

}  // namespace

std::vector<BenchRecord> run_benchmark(const BenchSpec& spec) {
    if (spec.repeats < 1) throw ParamError("repeats must be >= 1");
    if (spec.dim == 0 || spec.heads == 0 || spec.dim % spec.heads != 0)
        throw ParamError("dim must be a positive multiple of heads");
    if (spec.mode == RunMode::chunkwise) {
        if (spec.chunk < 1) throw ParamError("chunk size must be >= 1");
        if (spec.mask == MaskMode::two_d) throw ParamError("2d retention has no chunkwise form");
    }
    if (spec.full_model && !spec.sequence_lengths.empty())
        throw ParamError("full-model benchmarks take resolutions, not sequence lengths");

    struct Point {
        std::size_t resolution;
        std::size_t n;
    };
    std::vector<Point> points;
    if (!spec.sequence_lengths.empty()) {
        for (std::size_t n : spec.sequence_lengths) {
            if (n < 1) throw ParamError("sequence length must be >= 1");
            points.push_back({0, n});
        }
    } else {
        for (std::size_t res : spec.resolutions) {
            if (res == 0 || res % spec.patch != 0)
                throw ParamError("resolution " + std::to_string(res) +
                                 " not divisible by patch " + std::to_string(spec.patch));
            const std::size_t side = res / spec.patch;
            points.push_back({res, side * side});
        }
    }

    std::vector<BenchRecord> records;
    records.reserve(points.size());
    for (const auto& p : points) {
        const std::size_t tokens = spec.full_model ? p.n + 1 : p.n;
        records.push_back(spec.dtype == Dtype::f32 ? run_one<float>(spec, p.resolution, tokens)
                                                   : run_one<double>(spec, p.resolution, tokens));
    }
    return records;
}

double fit_scaling_exponent(const std::vector<BenchRecord>& records) {
    std::vector<std::pair<double, double>> pts;
    for (const auto& r : records) {
        if (r.status != "ok") continue;
        if (!(r.median_seconds > 0)) throw ParamError("nonpositive timing in record");
        pts.emplace_back(std::log(double(r.n)), std::log(r.median_seconds));
    }
    std::vector<double> ns;
    for (const auto& [x, y] : pts) ns.push_back(x);
    std::sort(ns.begin(), ns.end());
    ns.erase(std::unique(ns.begin(), ns.end()), ns.end());
    if (ns.size() < 3)
        throw ParamError("scaling fit needs records at >= 3 distinct sequence lengths");

    double mx = 0, my = 0;
    for (const auto& [x, y] : pts) {
        mx += x;
        my += y;
    }
    mx /= double(pts.size());
    my /= double(pts.size());
    double sxx = 0, sxy = 0;
    for (const auto& [x, y] : pts) {
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (y - my);
    }
    return sxy / sxx;
}

void emit_csv(const std::vector<BenchRecord>& records, std::ostream& out) {
    out << kCsvHeader << '\n';
    for (const auto& r : records) {
        out << r.mode << ',' << r.mask << ',' << r.resolution << ',' << r.patch << ',' << r.n
            << ',' << r.dim << ',' << r.heads << ',' << r.chunk << ',' << r.dtype << ','
            << format_double(r.median_seconds) << ',' << format_double(r.tokens_per_sec) << ','
            << r.peak_live_f64 << ',' << r.status << '\n';
    }
}

void emit_json(const std::vector<BenchRecord>& records, std::ostream& out) {
    json arr = json::array();
    for (const auto& r : records) {
        arr.push_back({{"mode", r.mode},
                       {"mask", r.mask},
                       {"resolution", r.resolution},
                       {"patch", r.patch},
                       {"N", r.n},
                       {"dim", r.dim},
                       {"heads", r.heads},
                       {"chunk", r.chunk},
                       {"dtype", r.dtype},
                       {"median_seconds", r.median_seconds},
                       {"tokens_per_sec", r.tokens_per_sec},
                       {"peak_live_f64", r.peak_live_f64},
                       {"status", r.status}});
    }
    out << arr.dump(2) << '\n';
}

void emit(const std::vector<BenchRecord>& records, const std::string& format,
          const std::string& path) {
    if (format != "csv" && format != "json")
        throw ParamError("unknown emit format: " + format);
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw Error("cannot open for writing: " + path);
    if (format == "csv") emit_csv(records, out);
    else emit_json(records, out);
    if (!out) throw Error("write failed: " + path);
}

std::vector<BenchRecord> parse_csv(std::istream& in) {
    std::string line;
    if (!std::getline(in, line)) throw ParamError("empty csv");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line != kCsvHeader) throw ParamError("unexpected csv header: " + line);
    std::vector<BenchRecord> records;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::vector<std::string> fields;
        std::stringstream ss(line);
        std::string field;
        while (std::getline(ss, field, ',')) fields.push_back(field);
        if (fields.size() != 13) throw ParamError("csv row has " + std::to_string(fields.size()) +
                                                  " fields, expected 13: " + line);
        BenchRecord r;
        r.mode = fields[0];
        r.mask = fields[1];
        r.resolution = std::stoull(fields[2]);
        r.patch = std::stoull(fields[3]);
        r.n = std::stoull(fields[4]);
        r.dim = std::stoull(fields[5]);
        r.heads = std::stoull(fields[6]);
        r.chunk = std::stoull(fields[7]);
        r.dtype = fields[8];
        r.median_seconds = std::stod(fields[9]);
        r.tokens_per_sec = std::stod(fields[10]);
        r.peak_live_f64 = std::stoll(fields[11]);
        r.status = fields[12];
        records.push_back(std::move(r));
    }
    return records;
}

std::vector<BenchRecord> parse_json(std::istream& in) {
    json arr;
    try {
        in >> arr;
    } catch (const json::exception& ex) {
        throw ParamError(std::string("records json: ") + ex.what());
    }
    if (!arr.is_array()) throw ParamError("records json: expected an array");
    std::vector<BenchRecord> records;
    for (const auto& j : arr) {
        BenchRecord r;
        try {
            r.mode = j.at("mode").get<std::string>();
            r.mask = j.at("mask").get<std::string>();
            r.resolution = j.at("resolution").get<std::size_t>();
            r.patch = j.at("patch").get<std::size_t>();
            r.n = j.at("N").get<std::size_t>();
            r.dim = j.at("dim").get<std::size_t>();
            r.heads = j.at("heads").get<std::size_t>();
            r.chunk = j.at("chunk").get<std::size_t>();
            r.dtype = j.at("dtype").get<std::string>();
            r.median_seconds = j.at("median_seconds").get<double>();
            r.tokens_per_sec = j.at("tokens_per_sec").get<double>();
            r.peak_live_f64 = j.at("peak_live_f64").get<long long>();
            r.status = j.at("status").get<std::string>();
        } catch (const json::exception& ex) {
            throw ParamError(std::string("records json: ") + ex.what());
        }
        records.push_back(std::move(r));
    }
    return records;
}

}  // namespace vir::bench
