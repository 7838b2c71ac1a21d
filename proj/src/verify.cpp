#include "vir/verify.hpp"

#include <cmath>
#include <cstdio>
#include <ostream>
#include <sstream>

#include "vir/encoder.hpp"
#include "vir/retention1d.hpp"
#include "vir/retention2d.hpp"

namespace vir::verify {

namespace {

double max_abs_diff(const Tensor& a, const Tensor& b) {
    double dev = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) dev = std::max(dev, std::abs(a(i) - b(i)));
    return dev;
}

struct PropertyBuilder {
    PropertyResult result;

    explicit PropertyBuilder(std::string name, double tol) {
        result.name = std::move(name);
        result.tolerance = tol;
    }

    void observe(double dev, const std::string& where) {
        result.max_dev = std::max(result.max_dev, dev);
        if (dev > result.tolerance) {
            result.pass = false;
            if (result.failures.size() < 8) {
                std::ostringstream os;
                os << where << ": max|d| = " << dev;
                result.failures.push_back(os.str());
            }
        }
    }
};

Tensor random_tensor(SplitMix64& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
    return fill_uniform<double>(rng, std::move(shape), lo, hi);
}

std::string case_tag(std::uint64_t seed, const std::string& rest) {
    return "(seed=" + std::to_string(seed) + ", " + rest + ")";
}

// --- 1D properties ---------------------------------------------------------

PropertyResult prop_1d_mode_equivalence(double tol, std::uint64_t seed) {
    PropertyBuilder p("1d/mode-equivalence", tol);
    const double gammas[] = {0.0, 0.25, 0.9, 1.0 - 0x1.0p-5};
    const std::size_t dk = 8, dv = 8;
    const double scale = std::sqrt(double(dk));
    for (std::size_t n = 1; n <= 64; ++n) {
        for (double gamma : gammas) {
            const std::uint64_t case_seed = seed ^ (n * 1315423911ULL) ^
                                            static_cast<std::uint64_t>(gamma * (1ULL << 32));
            SplitMix64 rng(case_seed);
            const Tensor q = random_tensor(rng, {n, dk});
            const Tensor k = random_tensor(rng, {n, dk});
            const Tensor v = random_tensor(rng, {n, dv});
            const Tensor par = retention_parallel(q, k, v, gamma, scale);
            const Tensor rec = retention_recurrent(q, k, v, gamma, scale);
            std::ostringstream tag;
            tag << "N=" << n << ", gamma=" << gamma;
            p.observe(max_abs_diff(par, rec), case_tag(case_seed, tag.str() + ", recurrent"));
            for (std::size_t c : {std::size_t{1}, std::size_t{3}, std::size_t{8}, n, n + 7}) {
                const Tensor chk = retention_chunkwise(q, k, v, {c, gamma}, scale);
                p.observe(max_abs_diff(par, chk),
                          case_tag(case_seed, tag.str() + ", C=" + std::to_string(c)));
            }
        }
    }
    return p.result;
}

PropertyResult prop_1d_causality(std::uint64_t seed) {
    PropertyBuilder p("1d/causality", 0.0);
    const std::size_t n = 24, dk = 6, dv = 6;
    const double gamma = 0.9, scale = std::sqrt(double(dk));
    SplitMix64 rng(seed ^ 0xCA05A11ULL);
    const Tensor q = random_tensor(rng, {n, dk});
    const Tensor k = random_tensor(rng, {n, dk});
    const Tensor v = random_tensor(rng, {n, dv});
    const Tensor base = retention_parallel(q, k, v, gamma, scale);
    for (std::size_t t = 0; t < n; ++t) {
        Tensor k2 = k, v2 = v;
        k2(t, 0) += 0.75;
        v2(t, dv - 1) -= 0.5;
        const Tensor bumped = retention_parallel(q, k2, v2, gamma, scale);
        double dev = 0.0;
        for (std::size_t i = 0; i < t; ++i)
            for (std::size_t j = 0; j < dv; ++j)
                dev = std::max(dev, std::abs(base(i, j) - bumped(i, j)));
        p.observe(dev, case_tag(seed, "perturbed t=" + std::to_string(t)));
    }
    return p.result;
}

PropertyResult prop_1d_mask_structure(std::uint64_t seed) {
    // gamma-power telescoping M[i][j]*M[j][l] = M[i][l] allows rounding from
    // the two floating multiplies; above-diagonal zeros are exact.
    PropertyBuilder p("1d/mask-structure", 1e-12);
    for (double gamma : {0.0, 0.25, 0.9, 1.0}) {
        const auto mask = build_decay_mask_1d<double>(24, gamma);
        double dev = 0.0;
        for (std::size_t i = 0; i < 24; ++i) {
            for (std::size_t j = i + 1; j < 24; ++j)
                if (mask.entries(i, j) != 0.0) dev = std::max(dev, 1.0);
            for (std::size_t j = 0; j <= i; ++j)
                for (std::size_t l = 0; l <= j; ++l) {
                    const double lhs = mask.entries(i, j) * mask.entries(j, l);
                    const double rhs = mask.entries(i, l);
                    const double denom = std::max(1.0, std::abs(rhs));
                    dev = std::max(dev, std::abs(lhs - rhs) / denom);
                }
        }
        p.observe(dev, case_tag(seed, "gamma=" + std::to_string(gamma)));
    }
    return p.result;
}

PropertyResult prop_1d_state_closed_form(std::uint64_t seed) {
    PropertyBuilder p("1d/state-closed-form", 1e-12);
    const std::size_t n = 40, dk = 5, dv = 7;
    const double gamma = 0.9, scale = std::sqrt(double(dk));
    SplitMix64 rng(seed ^ 0x57A7EULL);
    const Tensor q = random_tensor(rng, {n, dk});
    const Tensor k = random_tensor(rng, {n, dk});
    const Tensor v = random_tensor(rng, {n, dv});
    RetentionState1D state(dk, dv, gamma);
    const auto pow = decay_powers(gamma, n);
    for (std::size_t step = 0; step < n; ++step) {
        retention_recurrent_step(state, q.row(step), k.row(step), v.row(step), scale);
        Tensor direct({dk, dv});
        for (std::size_t m = 0; m <= step; ++m)
            for (std::size_t i = 0; i < dk; ++i)
                for (std::size_t j = 0; j < dv; ++j)
                    direct(i, j) += pow[step - m] * k(m, i) * v(m, j);
        p.observe(max_abs_diff(state.s, direct), case_tag(seed, "n=" + std::to_string(step + 1)));
    }
    return p.result;
}

// --- 2D properties ---------------------------------------------------------

PropertyResult prop_2d_three_way(double tol, std::uint64_t seed) {
    PropertyBuilder p("2d/three-way-equivalence", tol);
    const std::size_t dk = 6, dv = 6;
    const double scale = std::sqrt(double(dk));
    for (std::size_t w = 1; w <= 8; ++w)
        for (std::size_t h = 1; h <= 8; ++h)
            for (double gamma : {0.0, 0.5, 0.9}) {
                const Grid grid{w, h};
                const std::uint64_t case_seed =
                    seed ^ (w * 2654435761ULL) ^ (h * 40503ULL) ^
                    static_cast<std::uint64_t>(gamma * 1024);
                SplitMix64 rng(case_seed);
                const Tensor q = random_tensor(rng, {grid.tokens(), dk});
                const Tensor k = random_tensor(rng, {grid.tokens(), dk});
                const Tensor v = random_tensor(rng, {grid.tokens(), dv});
                const Tensor par = retention_2d_parallel(q, k, v, grid, gamma, scale);
                const Tensor rec = retention_2d_recurrent(q, k, v, grid, gamma, scale);
                const Tensor simp = retention_2d_simplified(q, k, v, grid, gamma, scale);
                std::ostringstream tag;
                tag << "W=" << w << ", H=" << h << ", gamma=" << gamma;
                p.observe(max_abs_diff(par, rec), case_tag(case_seed, tag.str() + ", recurrent"));
                p.observe(max_abs_diff(par, simp), case_tag(case_seed, tag.str() + ", simplified"));
                p.observe(max_abs_diff(rec, simp),
                          case_tag(case_seed, tag.str() + ", rec-vs-simp"));
            }
    return p.result;
}

PropertyResult prop_2d_quadrant_causality(std::uint64_t seed) {
    PropertyBuilder p("2d/quadrant-causality", 0.0);
    const Grid grid{5, 4};
    const std::size_t dk = 4, dv = 4;
    const double gamma = 0.9, scale = std::sqrt(double(dk));
    SplitMix64 rng(seed ^ 0x2DCA05ULL);
    const Tensor q = random_tensor(rng, {grid.tokens(), dk});
    const Tensor k = random_tensor(rng, {grid.tokens(), dk});
    const Tensor v = random_tensor(rng, {grid.tokens(), dv});
    const Tensor base = retention_2d_parallel(q, k, v, grid, gamma, scale);
    for (std::size_t f = 0; f < grid.width; ++f)
        for (std::size_t g = 0; g < grid.height; ++g) {
            Tensor k2 = k;
            k2(grid.index(f, g), 0) += 1.0;
            const Tensor bumped = retention_2d_parallel(q, k2, v, grid, gamma, scale);
            double dev = 0.0;
            for (std::size_t x = 0; x < grid.width; ++x)
                for (std::size_t y = 0; y < grid.height; ++y) {
                    if (x >= f && y >= g) continue;  // inside the affected quadrant
                    const std::size_t s = grid.index(x, y);
                    for (std::size_t j = 0; j < dv; ++j)
                        dev = std::max(dev, std::abs(base(s, j) - bumped(s, j)));
                }
            p.observe(dev, case_tag(seed, "f=" + std::to_string(f) + ", g=" + std::to_string(g)));
        }
    return p.result;
}

PropertyResult prop_2d_shift_equivariance(std::uint64_t seed) {
    PropertyBuilder p("2d/shift-equivariance", 0.0);
    const Grid grid{8, 8};
    for (double gamma : {0.5, 0.9, 1.0 - 0x1.0p-5}) {
        const auto mask = build_decay_mask_2d<double>(grid, gamma);
        double dev = 0.0;
        // Horizontal and vertical neighbors decay by exactly gamma.
        for (std::size_t y = 0; y < 8; ++y)
            for (std::size_t x = 1; x < 8; ++x)
                dev = std::max(dev,
                               std::abs(mask.entries(grid.index(x, y), grid.index(x - 1, y)) - gamma));
        for (std::size_t y = 1; y < 8; ++y)
            for (std::size_t x = 0; x < 8; ++x)
                dev = std::max(dev,
                               std::abs(mask.entries(grid.index(x, y), grid.index(x, y - 1)) - gamma));
        // Entries depend only on (dx, dy), never on absolute position.
        for (std::size_t r = 0; r < grid.tokens(); ++r)
            for (std::size_t c = 0; c < grid.tokens(); ++c) {
                const long dx = long(grid.x_of(r)) - long(grid.x_of(c));
                const long dy = long(grid.y_of(r)) - long(grid.y_of(c));
                if (dx < 0 || dy < 0) continue;
                const double ref = mask.entries(grid.index(std::size_t(dx), std::size_t(dy)),
                                                grid.index(0, 0));
                dev = std::max(dev, std::abs(mask.entries(r, c) - ref));
            }
        p.observe(dev, case_tag(seed, "gamma=" + std::to_string(gamma)));
    }
    return p.result;
}

PropertyResult prop_2d_l1_decay_law(std::uint64_t seed) {
    PropertyBuilder p("2d/l1-decay-law", 0.0);
    const Grid grid{7, 5};
    for (double gamma : {0.0, 0.5, 0.9}) {
        const auto mask = build_decay_mask_2d<double>(grid, gamma);
        const auto pow = decay_powers(gamma, grid.width + grid.height);
        double dev = 0.0;
        for (std::size_t r = 0; r < grid.tokens(); ++r)
            for (std::size_t c = 0; c < grid.tokens(); ++c) {
                const long dx = long(grid.x_of(r)) - long(grid.x_of(c));
                const long dy = long(grid.y_of(r)) - long(grid.y_of(c));
                const double want = (dx >= 0 && dy >= 0) ? pow[std::size_t(dx + dy)] : 0.0;
                dev = std::max(dev, std::abs(mask.entries(r, c) - want));
            }
        p.observe(dev, case_tag(seed, "gamma=" + std::to_string(gamma)));
    }
    return p.result;
}

PropertyResult prop_degenerate_grids(double tol, std::uint64_t seed) {
    PropertyBuilder p("1d-2d/degenerate-grids", tol);
    const std::size_t dk = 6, dv = 6;
    const double scale = std::sqrt(double(dk));
    for (std::size_t n : {std::size_t{1}, std::size_t{2}, std::size_t{5}, std::size_t{16},
                          std::size_t{33}})
        for (double gamma : {0.0, 0.5, 0.9})
            for (bool row_grid : {true, false}) {
                const Grid grid = row_grid ? Grid{n, 1} : Grid{1, n};
                const std::uint64_t case_seed = seed ^ (n * 7919ULL) ^ (row_grid ? 1 : 2) ^
                                                static_cast<std::uint64_t>(gamma * 512);
                SplitMix64 rng(case_seed);
                const Tensor q = random_tensor(rng, {n, dk});
                const Tensor k = random_tensor(rng, {n, dk});
                const Tensor v = random_tensor(rng, {n, dv});
                const Tensor d1p = retention_parallel(q, k, v, gamma, scale);
                const Tensor d1r = retention_recurrent(q, k, v, gamma, scale);
                const Tensor d1c = retention_chunkwise(q, k, v, {3, gamma}, scale);
                std::ostringstream tag;
                tag << (row_grid ? "grid=" : "grid-col=") << n << ", gamma=" << gamma;
                for (const Tensor* d2 :
                     {&d1p, &d1r, &d1c}) {  // compare each 1D mode against each 2D evaluator
                    p.observe(max_abs_diff(*d2, retention_2d_parallel(q, k, v, grid, gamma, scale)),
                              case_tag(case_seed, tag.str() + ", 2d-parallel"));
                    p.observe(
                        max_abs_diff(*d2, retention_2d_recurrent(q, k, v, grid, gamma, scale)),
                        case_tag(case_seed, tag.str() + ", 2d-recurrent"));
                    p.observe(
                        max_abs_diff(*d2, retention_2d_simplified(q, k, v, grid, gamma, scale)),
                        case_tag(case_seed, tag.str() + ", 2d-simplified"));
                }
            }
    return p.result;
}

// --- encoder properties ----------------------------------------------------

EncoderConfig tiny_config() {
    EncoderConfig cfg;
    cfg.image_size = 32;
    cfg.patch_size = 8;
    cfg.model_dim = 16;
    cfg.heads = 2;
    cfg.depth = 2;
    cfg.num_classes = 10;
    return cfg;
}

PropertyResult prop_encoder_cross_mode(double tol, std::uint64_t seed) {
    PropertyBuilder p("encoder/cross-mode-logits", tol);
    for (std::uint64_t s : {seed, seed + 1}) {
        EncoderConfig cfg = tiny_config();
        const WeightStore store = random_weight_store(cfg, s);
        const EncoderWeights w = bind_weights<double>(store, cfg);
        SplitMix64 rng(s ^ 0x1A6EULL);
        const Tensor image =
            fill_uniform<double>(rng, {cfg.image_size, cfg.image_size, cfg.channels}, 0.0, 1.0);

        cfg.mode = RunMode::parallel;
        const Tensor par = encoder_forward<double>(image, w, cfg).logits;
        cfg.mode = RunMode::recurrent;
        const Tensor rec = encoder_forward<double>(image, w, cfg).logits;
        p.observe(max_abs_diff(par, rec), case_tag(s, "1d streaming"));
        cfg.mode = RunMode::chunkwise;
        for (std::size_t c : {std::size_t{1}, std::size_t{4}, cfg.num_patches()}) {
            cfg.chunk_size = c;
            const Tensor chk = encoder_forward<double>(image, w, cfg).logits;
            p.observe(max_abs_diff(par, chk), case_tag(s, "1d chunk C=" + std::to_string(c)));
        }

        EncoderConfig cfg2 = tiny_config();
        cfg2.mask_mode = MaskMode::two_d;
        const EncoderWeights w2 = bind_weights<double>(store, cfg2);
        cfg2.mode = RunMode::parallel;
        const Tensor par2 = encoder_forward<double>(image, w2, cfg2).logits;
        cfg2.mode = RunMode::recurrent;
        const Tensor rec2 = encoder_forward<double>(image, w2, cfg2).logits;
        p.observe(max_abs_diff(par2, rec2), case_tag(s, "2d streaming"));
    }
    return p.result;
}

PropertyResult prop_encoder_class_reach(std::uint64_t seed) {
    PropertyBuilder p("encoder/class-token-reach", 0.0);
    const EncoderConfig cfg = tiny_config();
    for (double gamma : cfg.gammas()) {
        const auto mask = build_decay_mask_1d<double>(cfg.seq_len(), gamma);
        double dev = 0.0;
        for (std::size_t m = 0; m < cfg.seq_len(); ++m)
            if (mask.entries(cfg.seq_len() - 1, m) == 0.0) dev = 1.0;
        p.observe(dev, case_tag(seed, "gamma=" + std::to_string(gamma)));
    }
    return p.result;
}

PropertyResult prop_encoder_determinism(std::uint64_t seed) {
    PropertyBuilder p("encoder/determinism", 0.0);
    const EncoderConfig cfg = tiny_config();
    auto run = [&] {
        const WeightStore store = random_weight_store(cfg, seed);
        const EncoderWeights w = bind_weights<double>(store, cfg);
        SplitMix64 rng(seed ^ 0xD373ULL);
        const Tensor image =
            fill_uniform<double>(rng, {cfg.image_size, cfg.image_size, cfg.channels}, 0.0, 1.0);
        return encoder_forward<double>(image, w, cfg).logits;
    };
    p.observe(max_abs_diff(run(), run()), case_tag(seed, "two runs, same seed"));
    return p.result;
}

}  // namespace

Report run_equivalence_suite(double tolerance, std::uint64_t seed) {
    if (!(tolerance >= 0.0)) throw ParamError("tolerance must be >= 0");
    Report report;
    report.tolerance = tolerance;
    report.seed = seed;
    report.properties.push_back(prop_1d_mode_equivalence(tolerance, seed));
    report.properties.push_back(prop_1d_causality(seed));
    report.properties.push_back(prop_1d_mask_structure(seed));
    report.properties.push_back(prop_1d_state_closed_form(seed));
    report.properties.push_back(prop_2d_three_way(tolerance, seed));
    report.properties.push_back(prop_2d_quadrant_causality(seed));
    report.properties.push_back(prop_2d_shift_equivariance(seed));
    report.properties.push_back(prop_2d_l1_decay_law(seed));
    report.properties.push_back(prop_degenerate_grids(tolerance, seed));
    report.properties.push_back(prop_encoder_cross_mode(tolerance, seed));
    report.properties.push_back(prop_encoder_class_reach(seed));
    report.properties.push_back(prop_encoder_determinism(seed));
    return report;
}

void print_report(const Report& report, std::ostream& out) {
    out << "equivalence suite: tolerance " << report.tolerance << ", seed " << report.seed
        << "\n";
    for (const auto& p : report.properties) {
        char dev[32];
        std::snprintf(dev, sizeof(dev), "%.3e", p.max_dev);
        out << (p.pass ? "[PASS] " : "[FAIL] ") << p.name;
        for (std::size_t i = p.name.size(); i < 28; ++i) out << ' ';
        out << " max|d| = " << dev << "  (tol " << p.tolerance << ")\n";
        for (const auto& f : p.failures) out << "        " << f << "\n";
    }
    out << (report.all_pass() ? "all properties pass\n" : "PROPERTY FAILURES PRESENT\n");
}

GradCheckResult run_gradient_check(std::uint64_t seed) {
    GradCheckResult result;
    const std::size_t n = 6, dk = 4, dv = 4;
    const double scale = std::sqrt(double(dk));
    const double h = 1e-5;
    for (double gamma : {0.5, 0.9}) {
        for (std::uint64_t s : {seed, seed + 1, seed + 2}) {
            SplitMix64 rng(s ^ static_cast<std::uint64_t>(gamma * 4096));
            Tensor q = random_tensor(rng, {n, dk});
            Tensor k = random_tensor(rng, {n, dk});
            Tensor v = random_tensor(rng, {n, dv});
            const Tensor readout = random_tensor(rng, {n, dv});

            auto loss = [&](const Tensor& qq, const Tensor& kk, const Tensor& vv) {
                const Tensor out = retention_parallel(qq, kk, vv, gamma, scale);
                double acc = 0.0;
                for (std::size_t i = 0; i < out.numel(); ++i) acc += out(i) * readout(i);
                return acc;
            };
            const RetentionGrads grads =
                retention_parallel_backward(q, k, v, gamma, scale, readout);

            auto check = [&](Tensor& param, const Tensor& grad) {
                for (std::size_t i = 0; i < param.numel(); ++i) {
                    const double keep = param(i);
                    param(i) = keep + h;
                    const double up = loss(q, k, v);
                    param(i) = keep - h;
                    const double down = loss(q, k, v);
                    param(i) = keep;
                    const double fd = (up - down) / (2.0 * h);
                    const double a = grad(i);
                    const double rel = std::abs(a - fd) / std::max({1.0, std::abs(a), std::abs(fd)});
                    result.max_rel_err = std::max(result.max_rel_err, rel);
                }
            };
            check(q, grads.dq);
            check(k, grads.dk);
            check(v, grads.dv);
        }
    }
    result.pass = result.max_rel_err <= result.tolerance;
    return result;
}

}  // namespace vir::verify
