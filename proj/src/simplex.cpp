#include "simplexlm/simplex.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "simplexlm/errors.hpp"

namespace simplexlm {

namespace {

constexpr double kPi = 3.14159265358979323846;
constexpr double kCosineOffset = 0.008;

void validate_schedule(const NoiseSchedule& s) {
    if (std::abs(s.alpha_bar[0] - 1.0) > 1e-9) {
        throw NumericError("schedule: alpha_bar[0] must be 1");
    }
    for (int t = 1; t <= s.total_steps; ++t) {
        if (!(s.alpha_bar[t] < s.alpha_bar[t - 1])) {
            throw NumericError("schedule: alpha_bar not strictly decreasing at t=" +
                               std::to_string(t));
        }
        if (s.alpha_bar[t] < 0.0 || s.alpha_bar[t] > 1.0) {
            throw NumericError("schedule: alpha_bar out of [0,1] at t=" + std::to_string(t));
        }
    }
    if (s.alpha_bar[s.total_steps] > 0.01) {
        throw NumericError("schedule: alpha_bar[T] must be <= 0.01");
    }
}

} // namespace

NoiseSchedule make_schedule(int total_steps, ScheduleKind kind, double k_scale) {
    if (total_steps < 1) {
        throw ConfigError("make_schedule: T must be >= 1");
    }
    if (k_scale <= 0.0) {
        throw ConfigError("make_schedule: K must be > 0");
    }
    NoiseSchedule s;
    s.total_steps = total_steps;
    s.k_scale = k_scale;
    s.alpha_bar.resize(static_cast<size_t>(total_steps) + 1);

    if (kind == ScheduleKind::Cosine) {
        const auto f = [&](double t) {
            const double arg = ((t / total_steps + kCosineOffset) / (1.0 + kCosineOffset)) *
                               (kPi / 2.0);
            const double c = std::cos(arg);
            return c * c;
        };
        const double f0 = f(0.0);
        for (int t = 0; t <= total_steps; ++t) {
            s.alpha_bar[t] = f(static_cast<double>(t)) / f0;
        }
        s.alpha_bar[0] = 1.0;
    } else {
        // Beta endpoints 1e-4 and 0.02 are calibrated for T=1000; rescale by
        // 1000/T so the total injected noise is T-independent, capping each
        // step at 0.999.
        const double scale = 1000.0 / total_steps;
        double running = 1.0;
        s.alpha_bar[0] = 1.0;
        for (int t = 1; t <= total_steps; ++t) {
            const double frac =
                total_steps > 1 ? static_cast<double>(t - 1) / (total_steps - 1) : 1.0;
            const double beta =
                std::min(0.999, (1e-4 + frac * (0.02 - 1e-4)) * scale);
            running *= (1.0 - beta);
            s.alpha_bar[t] = running;
        }
    }
    validate_schedule(s);
    return s;
}

ScheduleKind schedule_kind_from_string(const std::string& str) {
    if (str == "cosine") return ScheduleKind::Cosine;
    if (str == "linear") return ScheduleKind::Linear;
    throw ConfigError("unknown schedule kind: " + str);
}

SimplexLogits logits_initialization(const TokenSeq& tokens, int vocab, double k_scale) {
    if (k_scale <= 0.0) {
        throw ConfigError("logits_initialization: K must be > 0");
    }
    Matrix m(tokens.length(), vocab);
    for (int i = 0; i < tokens.length(); ++i) {
        const TokenId id = tokens.ids[i];
        if (id < 0 || id >= vocab) {
            throw DomainError("logits_initialization: token id " + std::to_string(id) +
                              " outside vocabulary of size " + std::to_string(vocab));
        }
        double* row = m.row(i);
        for (int j = 0; j < vocab; ++j) {
            row[j] = -k_scale;
        }
        row[id] = k_scale;
    }
    return SimplexLogits(std::move(m), k_scale);
}

SimplexLogits add_noise(const SimplexLogits& w0, int t, const NoiseSchedule& schedule,
                        Rng& rng) {
    if (t < 0 || t > schedule.total_steps) {
        throw DomainError("add_noise: t=" + std::to_string(t) + " outside [0, T]");
    }
    const double signal = std::sqrt(schedule.at(t));
    const double noise = std::sqrt(1.0 - schedule.at(t));
    Matrix out(w0.values.rows, w0.values.cols);
    for (size_t i = 0; i < out.v.size(); ++i) {
        out.v[i] = signal * w0.values.v[i] +
                   noise * (schedule.k_scale * rng.gaussian());
    }
    return SimplexLogits(std::move(out), w0.k_scale);
}

std::vector<TokenId> rows_argmax(const Matrix& m) {
    std::vector<TokenId> out(static_cast<size_t>(m.rows));
    for (int i = 0; i < m.rows; ++i) {
        const double* row = m.row(i);
        int best = 0;
        for (int j = 1; j < m.cols; ++j) {
            if (row[j] > row[best]) {
                best = j;
            }
        }
        out[i] = best;
    }
    return out;
}

namespace {

TokenId sample_from_probs(const std::vector<std::pair<double, int>>& probs, Rng& rng) {
    const double u = rng.uniform();
    double cum = 0.0;
    for (const auto& [p, idx] : probs) {
        cum += p;
        if (u < cum) {
            return idx;
        }
    }
    return probs.back().second;
}

TokenId project_row(const double* row, int n, const ProjectionConfig& cfg, Rng& rng) {
    bool any_finite = false;
    for (int j = 0; j < n; ++j) {
        if (std::isfinite(row[j])) {
            any_finite = true;
        } else if (row[j] != -std::numeric_limits<double>::infinity()) {
            throw DomainError("logits_projection: non-finite logit");
        }
    }
    if (!any_finite) {
        throw DomainError("logits_projection: all logits are -inf");
    }

    if (cfg.mode == ProjectionMode::Argmax) {
        int best = 0;
        for (int j = 1; j < n; ++j) {
            if (row[j] > row[best]) {
                best = j;
            }
        }
        return best;
    }

    std::vector<double> scaled(static_cast<size_t>(n));
    for (int j = 0; j < n; ++j) {
        scaled[j] = row[j] / cfg.temperature;
    }
    softmax_row(scaled.data(), n);

    if (cfg.mode == ProjectionMode::Sample) {
        std::vector<std::pair<double, int>> probs;
        probs.reserve(static_cast<size_t>(n));
        for (int j = 0; j < n; ++j) {
            probs.emplace_back(scaled[j], j);
        }
        return sample_from_probs(probs, rng);
    }

    // Nucleus: smallest prefix of the probability-sorted vocabulary whose
    // mass reaches top_p, renormalized. Ties broken by token index so the
    // nucleus is deterministic.
    std::vector<std::pair<double, int>> sorted;
    sorted.reserve(static_cast<size_t>(n));
    for (int j = 0; j < n; ++j) {
        sorted.emplace_back(scaled[j], j);
    }
    std::sort(sorted.begin(), sorted.end(), [](const auto& a, const auto& b) {
        if (a.first != b.first) return a.first > b.first;
        return a.second < b.second;
    });
    double mass = 0.0;
    size_t keep = 0;
    while (keep < sorted.size()) {
        mass += sorted[keep].first;
        ++keep;
        if (mass >= cfg.top_p) {
            break;
        }
    }
    sorted.resize(keep);
    for (auto& [p, idx] : sorted) {
        p /= mass;
    }
    return sample_from_probs(sorted, rng);
}

} // namespace

std::vector<TokenId> project_tokens(const Matrix& logits, const ProjectionConfig& cfg,
                                    Rng& rng) {
    if (cfg.mode == ProjectionMode::TopP && (cfg.top_p <= 0.0 || cfg.top_p > 1.0)) {
        throw ConfigError("logits_projection: top_p must be in (0, 1]");
    }
    if (cfg.temperature <= 0.0) {
        throw ConfigError("logits_projection: temperature must be > 0");
    }
    std::vector<TokenId> out(static_cast<size_t>(logits.rows));
    for (int i = 0; i < logits.rows; ++i) {
        out[i] = project_row(logits.row(i), logits.cols, cfg, rng);
    }
    return out;
}

SimplexLogits logits_projection(const SimplexLogits& logits, const ProjectionConfig& cfg,
                                double k_scale, Rng& rng) {
    const std::vector<TokenId> chosen = project_tokens(logits.values, cfg, rng);
    TokenSeq seq;
    seq.ids = chosen;
    return logits_initialization(seq, logits.values.cols, k_scale);
}

ProjectionMode projection_mode_from_string(const std::string& s) {
    if (s == "argmax") return ProjectionMode::Argmax;
    if (s == "sample") return ProjectionMode::Sample;
    if (s == "top-p" || s == "top_p" || s == "topp") return ProjectionMode::TopP;
    throw ConfigError("unknown projection mode: " + s);
}

} // namespace simplexlm
