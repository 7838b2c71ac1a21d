#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "vir/encoder.hpp"

namespace vir::bench {

// One benchmark sweep: a mode/mask pair timed across image resolutions
// (N = (res/patch)^2) or, alternatively, explicit sequence lengths.
struct BenchSpec {
    RunMode mode = RunMode::parallel;
    MaskMode mask = MaskMode::one_d;
    std::vector<std::size_t> resolutions{224, 448, 768, 1024};
    std::vector<std::size_t> sequence_lengths;  // when set, overrides resolutions (1d mask)
    std::size_t patch = 16;
    std::size_t dim = 256;
    std::size_t heads = 4;
    std::size_t chunk = 64;
    std::size_t repeats = 5;   // report median
    std::size_t warmup = 2;
    std::size_t depth = 2;     // full-model target only
    Dtype dtype = Dtype::f64;
    std::uint64_t seed = 42;
    bool full_model = false;   // default target is a single MHR layer
    bool exclude_io = false;   // drop input/output buffers from peak accounting
    std::size_t batch_parallel = 1;
};

struct BenchRecord {
    std::string mode = "parallel";
    std::string mask = "1d";
    std::size_t resolution = 0;  // 0 for explicit sequence lengths
    std::size_t patch = 16;
    std::size_t n = 0;
    std::size_t dim = 0;
    std::size_t heads = 0;
    std::size_t chunk = 0;
    std::string dtype = "f64";
    double median_seconds = 0.0;
    double tokens_per_sec = 0.0;
    long long peak_live_f64 = 0;  // allocation-accounted element high-water mark
    std::string status = "ok";    // "ok" | "oom"
    std::vector<double> raw_seconds;  // per-repeat timings, in-memory only
};

std::vector<BenchRecord> run_benchmark(const BenchSpec& spec);

// Least-squares slope of log(median_seconds) vs log(N) over records with
// status ok; needs at least 3 distinct N.
double fit_scaling_exponent(const std::vector<BenchRecord>& records);

inline constexpr const char* kCsvHeader =
    "mode,mask,resolution,patch,N,dim,heads,chunk,dtype,median_seconds,tokens_per_sec,"
    "peak_live_f64,status";

void emit_csv(const std::vector<BenchRecord>& records, std::ostream& out);
void emit_json(const std::vector<BenchRecord>& records, std::ostream& out);
void emit(const std::vector<BenchRecord>& records, const std::string& format,
          const std::string& path);
std::vector<BenchRecord> parse_csv(std::istream& in);
std::vector<BenchRecord> parse_json(std::istream& in);

}  // namespace vir::bench
