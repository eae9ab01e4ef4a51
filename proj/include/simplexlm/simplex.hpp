#pragma once

#include <vector>

#include "simplexlm/rng.hpp"
#include "simplexlm/tensor.hpp"
#include "simplexlm/tokenizer.hpp"

namespace simplexlm {

// A block of per-position vocabulary-sized logits rows; the space in which
// diffusion happens. A "base" representation has exactly one +K entry and
// V-1 entries equal to -K per row.
struct SimplexLogits {
    Matrix values; // (block length) x V
    double k_scale = 0.0;

    SimplexLogits() = default;
    SimplexLogits(Matrix m, double k) : values(std::move(m)), k_scale(k) {}
    int length() const { return values.rows; }
    int vocab() const { return values.cols; }
};

// Signal-retention coefficients alpha_bar[0..T] plus the simplex scale K.
// alpha_bar[0] = 1 (clean), alpha_bar[T] <= 0.01 (pure noise), strictly
// decreasing in t.
struct NoiseSchedule {
    int total_steps = 0; // T
    std::vector<double> alpha_bar; // T+1 entries
    double k_scale = 0.0;

    double at(int t) const { return alpha_bar[static_cast<size_t>(t)]; }
};

enum class ScheduleKind { Cosine, Linear };

// Cosine: alpha_bar(t) = cos^2(((t/T + s)/(1 + s)) * pi/2) / cos^2((s/(1+s)) * pi/2),
// offset s = 0.008. Linear: per-step betas ramped linearly with endpoints
// rescaled by 1000/T and capped at 0.999, alpha_bar as the running product
// of (1 - beta).
NoiseSchedule make_schedule(int total_steps, ScheduleKind kind, double k_scale);

ScheduleKind schedule_kind_from_string(const std::string& s);

// Maps each token id to the almost-one-hot base representation: +K at the
// token's column, -K elsewhere.
SimplexLogits logits_initialization(const TokenSeq& tokens, int vocab, double k_scale);

// sqrt(alpha_bar[t]) * w0 + sqrt(1 - alpha_bar[t]) * eps, with eps drawn
// elementwise from N(0, K^2).
SimplexLogits add_noise(const SimplexLogits& w0, int t, const NoiseSchedule& schedule,
                        Rng& rng);

enum class ProjectionMode { Argmax, Sample, TopP };

struct ProjectionConfig {
    ProjectionMode mode = ProjectionMode::TopP;
    double top_p = 0.99;
    double temperature = 1.0;
};

ProjectionMode projection_mode_from_string(const std::string& s);

// Snaps each logits row back to a base +/-K representation by choosing one
// token per position: row argmax, a draw from softmax(logits/temperature),
// or a draw from the nucleus of cumulative mass top_p.
SimplexLogits logits_projection(const SimplexLogits& logits, const ProjectionConfig& cfg,
                                double k_scale, Rng& rng);

// Token choices a projection would make, without building the +/-K matrix.
std::vector<TokenId> project_tokens(const Matrix& logits, const ProjectionConfig& cfg,
                                    Rng& rng);

std::vector<TokenId> rows_argmax(const Matrix& m);

} // namespace simplexlm
